//! Dependency multigraph over a basic block and the feature set derived from it.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{BasicBlock, Operand};
use crate::isa::{IsaKb, FLAGS_FAMILY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepKind {
    Raw,
    War,
    Waw,
}

impl fmt::Display for DepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DepKind::Raw => "raw",
            DepKind::War => "war",
            DepKind::Waw => "waw",
        })
    }
}

impl FromStr for DepKind {
    type Err = FeatureParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "raw" => Ok(DepKind::Raw),
            "war" => Ok(DepKind::War),
            "waw" => Ok(DepKind::Waw),
            _ => Err(FeatureParseError::Syntax(format!("unknown dependency kind `{s}`"))),
        }
    }
}

/// A data hazard between instruction `src` and a later instruction `dst`
/// (1-based). `resource` is a register family name or a memory key such as
/// `[rdi + 24]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DepEdge {
    pub src: usize,
    pub dst: usize,
    pub kind: DepKind,
    pub resource: Arc<str>,
}

impl fmt::Display for DepEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}:{}:{}", self.src, self.dst, self.kind, self.resource)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgePolicy {
    /// An edge for every conflicting pair.
    #[default]
    AllPairs,
    /// Only the closest conflicting predecessor per (consumer, resource, kind).
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphOptions {
    pub policy: EdgePolicy,
    pub track_flags: bool,
}

impl GraphOptions {
    pub fn for_kb(kb: &IsaKb) -> Self {
        GraphOptions { policy: EdgePolicy::AllPairs, track_flags: kb.track_flags }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("instruction {index} (`{text}`) does not validate against the KB")]
    InvalidInstruction { index: usize, text: String },
}

#[derive(Debug, Clone)]
pub struct BlockGraph {
    pub block: BasicBlock,
    /// Resource names of this block in sorted order; bitsets index into it.
    resources: Vec<Arc<str>>,
    read_sets: Vec<Bits>,
    write_sets: Vec<Bits>,
    /// Sorted by `DepEdge` order.
    pub dep_edges: Vec<DepEdge>,
    pub options: GraphOptions,
}

impl BlockGraph {
    pub fn len(&self) -> usize {
        self.block.len()
    }

    pub fn is_empty(&self) -> bool {
        self.block.is_empty()
    }

    /// Resources read by vertex `i` (0-based), in sorted order.
    pub fn reads(&self, i: usize) -> impl Iterator<Item = &str> {
        self.read_sets[i].ids().map(|id| &*self.resources[id])
    }

    /// Resources written by vertex `i` (0-based), in sorted order.
    pub fn writes(&self, i: usize) -> impl Iterator<Item = &str> {
        self.write_sets[i].ids().map(|id| &*self.resources[id])
    }

    pub fn has_edge(&self, edge: &DepEdge) -> bool {
        self.dep_edges.binary_search(edge).is_ok()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let vertices: Vec<_> = self
            .block
            .instructions
            .iter()
            .enumerate()
            .map(|(i, instr)| {
                serde_json::json!({
                    "index": i + 1,
                    "text": instr.to_string(),
                    "reads": self.reads(i).collect::<Vec<_>>(),
                    "writes": self.writes(i).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::json!({
            "policy": self.options.policy,
            "track_flags": self.options.track_flags,
            "vertices": vertices,
            "dep_edges": self.dep_edges,
        })
    }
}

pub fn build_graph(kb: &IsaKb, bb: &BasicBlock) -> Result<BlockGraph, GraphError> {
    build_graph_with(kb, bb, GraphOptions::for_kb(kb))
}

pub fn build_graph_with(kb: &IsaKb, bb: &BasicBlock, options: GraphOptions) -> Result<BlockGraph, GraphError> {
    build_graph_owned(kb, bb.clone(), options)
}

/// Resource names of one block, numbered in order of first appearance.
#[derive(Default)]
struct Interner {
    names: Vec<String>,
}

impl Interner {
    fn id(&mut self, name: &str) -> usize {
        match self.names.iter().position(|n| n == name) {
            Some(i) => i,
            None => {
                self.names.push(name.to_string());
                self.names.len() - 1
            }
        }
    }
}

/// Fixed-width bitset over interned resource ids.
#[derive(Debug, Clone)]
struct Bits(Vec<u64>);

impl Bits {
    fn set(&mut self, i: usize) {
        if self.0.len() <= i / 64 {
            self.0.resize(i / 64 + 1, 0);
        }
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().flat_map(|(k, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                (w != 0).then(|| {
                    let b = w.trailing_zeros() as usize;
                    w &= w - 1;
                    k * 64 + b
                })
            })
        })
    }
}

/// Like [`build_graph_with`], taking ownership of the block.
pub fn build_graph_owned(kb: &IsaKb, bb: BasicBlock, options: GraphOptions) -> Result<BlockGraph, GraphError> {
    let mut names = Interner::default();
    let mut reads = Vec::with_capacity(bb.len());
    let mut writes = Vec::with_capacity(bb.len());
    let flags = (!options.track_flags).then(|| names.id(FLAGS_FAMILY));
    for (i, instr) in bb.instructions.iter().enumerate() {
        let form = kb.resolve_form(instr).ok_or_else(|| GraphError::InvalidInstruction {
            index: i + 1,
            text: instr.to_string(),
        })?;
        let mut r = Bits(Vec::new());
        let mut w = Bits(Vec::new());
        let family = |names: &mut Interner, name: &str| names.id(kb.family_of(name).unwrap_or(name));
        for (op, slot) in instr.operands.iter().zip(&form.slots) {
            match op {
                Operand::Register(name) => {
                    let id = family(&mut names, name);
                    if slot.access.reads() {
                        r.set(id);
                    }
                    if slot.access.writes() {
                        w.set(id);
                    }
                }
                Operand::Memory(mem) => {
                    for reg in mem.registers() {
                        r.set(family(&mut names, reg));
                    }
                    if !slot.address_only && (slot.access.reads() || slot.access.writes()) {
                        let id = names.id(&mem.key());
                        if slot.access.reads() {
                            r.set(id);
                        }
                        if slot.access.writes() {
                            w.set(id);
                        }
                    }
                }
                Operand::Immediate { .. } => {}
            }
        }
        for name in &form.implicit_reads {
            r.set(family(&mut names, name));
        }
        for name in &form.implicit_writes {
            w.set(family(&mut names, name));
        }
        reads.push(r);
        writes.push(w);
    }
    if let Some(f) = flags {
        for set in reads.iter_mut().chain(writes.iter_mut()) {
            if let Some(word) = set.0.get_mut(f / 64) {
                *word &= !(1 << (f % 64));
            }
        }
    }
    // Renumber resources so that id order is name order.
    let mut order: Vec<usize> = (0..names.names.len()).collect();
    order.sort_by(|&a, &b| names.names[a].cmp(&names.names[b]));
    let mut rank = vec![0; order.len()];
    for (r, &id) in order.iter().enumerate() {
        rank[id] = r;
    }
    let renumber = |sets: Vec<Bits>| -> Vec<Bits> {
        sets.iter()
            .map(|b| {
                let mut out = Bits(Vec::new());
                for id in b.ids() {
                    out.set(rank[id]);
                }
                out
            })
            .collect()
    };
    let (read_sets, write_sets) = (renumber(reads), renumber(writes));
    let resources: Vec<Arc<str>> = order.iter().map(|&id| Arc::from(names.names[id].as_str())).collect();
    let dep_edges = hazard_edges(&resources, &read_sets, &write_sets, options.policy);
    Ok(BlockGraph { block: bb, resources, read_sets, write_sets, dep_edges, options })
}

fn hazard_edges(names: &[Arc<str>], reads: &[Bits], writes: &[Bits], policy: EdgePolicy) -> Vec<DepEdge> {
    let words = names.len().div_ceil(64);
    let word = |b: &Bits, k: usize| b.0.get(k).copied().unwrap_or(0);
    let mut edges = Vec::new();
    for i in 0..reads.len() {
        for j in i + 1..reads.len() {
            let kinds = [
                (DepKind::Raw, &writes[i], &reads[j], writes),
                (DepKind::War, &reads[i], &writes[j], reads),
                (DepKind::Waw, &writes[i], &writes[j], writes),
            ];
            for (kind, producer, consumer, between) in kinds {
                for k in 0..words {
                    let mut mask = word(producer, k) & word(consumer, k);
                    if policy == EdgePolicy::Nearest {
                        for b in &between[i + 1..j] {
                            mask &= !word(b, k);
                        }
                    }
                    while mask != 0 {
                        let res = k * 64 + mask.trailing_zeros() as usize;
                        mask &= mask - 1;
                        edges.push(DepEdge { src: i + 1, dst: j + 1, kind, resource: names[res].clone() });
                    }
                }
            }
        }
    }
    edges
}

/// An element of the practical feature set: an instruction position, a
/// dependency edge, or the instruction count.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "FeatureRepr", try_from = "FeatureRepr")]
pub enum Feature {
    Inst(usize),
    Dep(DepEdge),
    NumInsts(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum FeatureRepr {
    Inst { index: usize },
    Dep { src: usize, dst: usize, kind: DepKind, resource: String },
    NumInsts { count: usize },
}

impl From<Feature> for FeatureRepr {
    fn from(f: Feature) -> Self {
        match f {
            Feature::Inst(index) => FeatureRepr::Inst { index },
            Feature::Dep(e) => FeatureRepr::Dep { src: e.src, dst: e.dst, kind: e.kind, resource: e.resource.to_string() },
            Feature::NumInsts(count) => FeatureRepr::NumInsts { count },
        }
    }
}

impl TryFrom<FeatureRepr> for Feature {
    type Error = String;

    fn try_from(r: FeatureRepr) -> Result<Self, Self::Error> {
        Ok(match r {
            FeatureRepr::Inst { index } if index >= 1 => Feature::Inst(index),
            FeatureRepr::Inst { .. } => return Err("instruction index must be >= 1".into()),
            FeatureRepr::Dep { src, dst, kind, resource } if src >= 1 && src < dst => {
                Feature::Dep(DepEdge { src, dst, kind, resource: resource.into() })
            }
            FeatureRepr::Dep { .. } => return Err("dependency requires 1 <= src < dst".into()),
            FeatureRepr::NumInsts { count } => Feature::NumInsts(count),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureType {
    Inst,
    Dep,
    NumInsts,
}

impl FeatureType {
    pub const ALL: [FeatureType; 3] = [FeatureType::Inst, FeatureType::Dep, FeatureType::NumInsts];

    pub fn label(self) -> &'static str {
        match self {
            FeatureType::Inst => "inst",
            FeatureType::Dep => "dep",
            FeatureType::NumInsts => "num_insts",
        }
    }
}

impl Feature {
    pub fn feature_type(&self) -> FeatureType {
        match self {
            Feature::Inst(_) => FeatureType::Inst,
            Feature::Dep(_) => FeatureType::Dep,
            Feature::NumInsts(_) => FeatureType::NumInsts,
        }
    }
}

/// Preserve-spec rendering: `inst:4`, `dep:3-6:raw:rax`, `numinsts:6`.
impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feature::Inst(i) => write!(f, "inst:{i}"),
            Feature::Dep(e) => write!(f, "dep:{e}"),
            Feature::NumInsts(n) => write!(f, "numinsts:{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeatureParseError {
    #[error("malformed feature spec: {0}")]
    Syntax(String),
    #[error("feature `{0}` does not occur in the block")]
    Absent(String),
}

/// A feature spec as written by a user. `numinsts` may omit its count, in
/// which case it is resolved against a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureSpec {
    Exact(Feature),
    NumInstsAny,
}

impl FromStr for FeatureSpec {
    type Err = FeatureParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let syntax = || FeatureParseError::Syntax(s.to_string());
        let (head, rest) = s.split_once(':').unwrap_or((s, ""));
        match head.to_ascii_lowercase().as_str() {
            "inst" => {
                let index: usize = rest.parse().map_err(|_| syntax())?;
                if index == 0 {
                    return Err(syntax());
                }
                Ok(FeatureSpec::Exact(Feature::Inst(index)))
            }
            "numinsts" if rest.is_empty() => Ok(FeatureSpec::NumInstsAny),
            "numinsts" => Ok(FeatureSpec::Exact(Feature::NumInsts(rest.parse().map_err(|_| syntax())?))),
            "dep" => {
                let mut parts = rest.splitn(3, ':');
                let (Some(ends), Some(kind), Some(resource)) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(syntax());
                };
                let (a, b) = ends.split_once('-').ok_or_else(syntax)?;
                let src: usize = a.parse().map_err(|_| syntax())?;
                let dst: usize = b.parse().map_err(|_| syntax())?;
                if src == 0 || src >= dst || resource.is_empty() {
                    return Err(syntax());
                }
                Ok(FeatureSpec::Exact(Feature::Dep(DepEdge {
                    src,
                    dst,
                    kind: kind.parse()?,
                    resource: resource.into(),
                })))
            }
            _ => Err(syntax()),
        }
    }
}

impl FeatureSpec {
    /// Resolve against a graph, failing when the feature is not in its
    /// feature set.
    pub fn resolve(&self, g: &BlockGraph) -> Result<Feature, FeatureParseError> {
        let feature = match self {
            FeatureSpec::Exact(f) => f.clone(),
            FeatureSpec::NumInstsAny => Feature::NumInsts(g.len()),
        };
        let present = match &feature {
            Feature::Inst(i) => (1..=g.len()).contains(i),
            Feature::Dep(e) => g.has_edge(e),
            Feature::NumInsts(n) => *n == g.len(),
        };
        if present {
            Ok(feature)
        } else {
            Err(FeatureParseError::Absent(feature.to_string()))
        }
    }
}

/// Parse a comma-separated preserve list against a graph. Memory resources
/// may contain commas only inside brackets.
pub fn parse_preserve(spec: &str, g: &BlockGraph) -> Result<FeatureSet, FeatureParseError> {
    let mut out = FeatureSet::new();
    let mut depth = 0i32;
    let mut start = 0;
    let bytes = spec.as_bytes();
    let mut pieces = Vec::new();
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'[' => depth += 1,
            b']' => depth -= 1,
            b',' if depth == 0 => {
                pieces.push(&spec[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    pieces.push(&spec[start..]);
    for piece in pieces.into_iter().map(str::trim).filter(|p| !p.is_empty()) {
        out.insert(piece.parse::<FeatureSpec>()?.resolve(g)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureSet(pub BTreeSet<Feature>);

impl FeatureSet {
    pub fn new() -> Self {
        FeatureSet(BTreeSet::new())
    }

    pub fn has_type(&self, t: FeatureType) -> bool {
        self.0.iter().any(|f| f.feature_type() == t)
    }

    pub fn contains_num_insts(&self) -> bool {
        self.has_type(FeatureType::NumInsts)
    }

    pub fn with(&self, f: Feature) -> FeatureSet {
        let mut out = self.clone();
        out.0.insert(f);
        out
    }
}

impl Deref for FeatureSet {
    type Target = BTreeSet<Feature>;

    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl DerefMut for FeatureSet {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.0
    }
}

impl FromIterator<Feature> for FeatureSet {
    fn from_iter<I: IntoIterator<Item = Feature>>(iter: I) -> Self {
        FeatureSet(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a FeatureSet {
    type Item = &'a Feature;
    type IntoIter = std::collections::btree_set::Iter<'a, Feature>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, feat) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{feat}")?;
        }
        f.write_str("}")
    }
}

/// One feature per instruction, one per dependency edge, and the count.
pub fn extract_features(g: &BlockGraph) -> FeatureSet {
    let mut out = FeatureSet::new();
    for i in 1..=g.len() {
        out.insert(Feature::Inst(i));
    }
    for e in &g.dep_edges {
        out.insert(Feature::Dep(e.clone()));
    }
    out.insert(Feature::NumInsts(g.len()));
    out
}

/// Whether `f`, a feature of `original`, still holds in `perturbed`.
/// `mapping[i]` is the 0-based perturbed position of original instruction
/// `i`, or `None` if it was deleted.
pub fn feature_present(original: &BlockGraph, perturbed: &BlockGraph, mapping: &[Option<usize>], f: &Feature) -> bool {
    let mapped = |i: usize| i.checked_sub(1).and_then(|i| mapping.get(i).copied().flatten());
    match f {
        Feature::Inst(i) => match (mapped(*i), original.block.instructions.get(i.wrapping_sub(1))) {
            (Some(k), Some(orig)) => perturbed.block.instructions[k].mnemonic == orig.mnemonic,
            _ => false,
        },
        Feature::Dep(e) => match (mapped(e.src), mapped(e.dst)) {
            (Some(s), Some(d)) => perturbed.has_edge(&DepEdge {
                src: s + 1,
                dst: d + 1,
                kind: e.kind,
                resource: e.resource.clone(),
            }),
            _ => false,
        },
        Feature::NumInsts(n) => perturbed.len() == *n,
    }
}

pub fn identity_mapping(n: usize) -> Vec<Option<usize>> {
    (0..n).map(Some).collect()
}
