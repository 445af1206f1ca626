//! Feature-preserving random perturbation of basic blocks, plus exact
//! enumeration and size estimation of the reachable block space.
//!
//! A block is perturbed through two vocabularies. Each instruction may be
//! kept, deleted or given another opcode with the same operand signature.
//! Each dependency edge may be broken by renaming the resource it flows
//! through at one of its endpoints, chosen uniformly. Edges that would
//! rename the same operands of the same instruction form one rename group
//! and share a single decision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{BasicBlock, Instruction, Operand};
use crate::graph::{build_graph_with, feature_present, BlockGraph, DepEdge, DepKind, Feature, FeatureSet};
use crate::isa::IsaKb;

/// Byte offset added to a memory operand to break a memory dependency.
pub const DISPLACEMENT_STEP: i64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    pub p_inst_retain: f64,
    pub p_dep_retain: f64,
    pub p_delete: f64,
    pub p_dep_explicit_retain: f64,
    pub max_retries: u32,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            p_inst_retain: 0.5,
            p_dep_retain: 0.5,
            p_delete: 0.33,
            p_dep_explicit_retain: 0.1,
            max_retries: 50,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("p_inst_retain", self.p_inst_retain),
            ("p_dep_retain", self.p_dep_retain),
            ("p_delete", self.p_delete),
            ("p_dep_explicit_retain", self.p_dep_explicit_retain),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.max_retries == 0 {
            return Err("max_retries must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PerturbError {
    #[error("feature {0} is not a feature of the block")]
    UnknownFeature(String),
    #[error("could not preserve {feature} within {attempts} attempts")]
    Unpreservable { feature: String, attempts: u32 },
    #[error("perturbation produced an invalid block: {0}")]
    InvalidBlock(String),
    #[error("perturbation space exceeds the limit of {limit} blocks")]
    LimitExceeded { limit: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "key", rename_all = "lowercase")]
pub enum RenameTarget {
    Family(String),
    Memory(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenameAlt {
    Family(String),
    Displace(i64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenameGroup {
    /// 0-based instruction position.
    pub vertex: usize,
    pub target: RenameTarget,
    /// Operand positions renamed together.
    pub positions: Vec<usize>,
    pub alternatives: Vec<RenameAlt>,
    /// Dependency edges (indices into `dep_edges`) broken by this group.
    pub members: Vec<usize>,
    /// Edges whose presence depends on this group staying untouched.
    pub touching: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VertexChoice {
    Keep,
    Delete,
    Replace(usize),
}

/// One complete set of decisions for a draw.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Decision {
    pub vertices: Vec<VertexChoice>,
    pub renames: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum PerturbOp {
    Delete { index: usize },
    Replace { index: usize, from: String, to: String },
    Rename { index: usize, from: String, to: String },
    Displace { index: usize, key: String, by: i64 },
}

impl fmt::Display for PerturbOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbOp::Delete { index } => write!(f, "delete {index}"),
            PerturbOp::Replace { index, from, to } => write!(f, "replace {index} {from}->{to}"),
            PerturbOp::Rename { index, from, to } => write!(f, "rename {index} {from}->{to}"),
            PerturbOp::Displace { index, key, by } => write!(f, "displace {index} {key} {by:+}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PerturbResult {
    pub block: BasicBlock,
    pub graph: BlockGraph,
    /// `vertex_map[i]` is the 0-based position of original instruction `i`
    /// in the perturbed block, `None` if deleted.
    pub vertex_map: Vec<Option<usize>>,
    pub ops_applied: Vec<PerturbOp>,
    pub attempts: u32,
}

/// |Π̂(F)| in log10.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceSize {
    pub log10_count: f64,
}

impl SpaceSize {
    pub fn count(&self) -> f64 {
        10f64.powf(self.log10_count)
    }
}

impl fmt::Display for SpaceSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let exp = self.log10_count.floor();
        let mantissa = 10f64.powf(self.log10_count - exp);
        write!(f, "{mantissa:.2}x10^{exp}")
    }
}

/// Everything about a block's perturbations that does not depend on which
/// features are preserved.
#[derive(Debug, Clone)]
pub struct PerturbPlan<'a> {
    pub kb: &'a IsaKb,
    pub graph: &'a BlockGraph,
    pub cfg: PerturbConfig,
    /// Opcode replacement candidates per instruction.
    pub replacements: Vec<Vec<String>>,
    pub groups: Vec<RenameGroup>,
    /// Groups able to break each dependency edge: the later endpoint's
    /// group first, then the earlier one's. Empty when neither endpoint
    /// names the resource in an explicit operand.
    pub edge_groups: Vec<Vec<usize>>,
}

/// A plan restricted to a preserve set.
#[derive(Debug, Clone)]
pub struct Sampler<'p, 'a> {
    pub plan: &'p PerturbPlan<'a>,
    pub preserve: FeatureSet,
    pub protected: Vec<bool>,
    pub allow_delete: bool,
    pub preserved_edges: Vec<bool>,
    /// Groups that may never fire because a preserved edge touches them.
    pub frozen: Vec<bool>,
}

fn is_memory_key(resource: &str) -> bool {
    resource.starts_with('[')
}

/// Explicit operand positions of `instr` through which it accesses
/// `resource` in the given direction.
pub fn carriers(kb: &IsaKb, instr: &Instruction, resource: &str, write: bool) -> BTreeSet<usize> {
    let Some(form) = kb.resolve_form(instr) else { return BTreeSet::new() };
    let family = |r: &str| kb.family_of(r).unwrap_or(r).to_string();
    let mut out = BTreeSet::new();
    for (p, (op, slot)) in instr.operands.iter().zip(&form.slots).enumerate() {
        let uses = if write { slot.access.writes() } else { slot.access.reads() };
        let hit = match op {
            Operand::Register(r) => uses && family(r) == resource,
            Operand::Memory(m) => {
                if is_memory_key(resource) {
                    uses && !slot.address_only && m.key() == resource
                } else {
                    !write && m.registers().any(|r| family(r) == resource)
                }
            }
            Operand::Immediate { .. } => false,
        };
        if hit {
            out.insert(p);
        }
    }
    out
}

/// Whether endpoint `v` (0-based) of `edge` writes (true) or reads the
/// edge's resource.
fn role_writes(edge: &DepEdge, v: usize) -> bool {
    let at_src = edge.src - 1 == v;
    match edge.kind {
        DepKind::Raw => at_src,
        DepKind::War => !at_src,
        DepKind::Waw => true,
    }
}

impl<'a> PerturbPlan<'a> {
    pub fn new(kb: &'a IsaKb, graph: &'a BlockGraph, cfg: PerturbConfig) -> Self {
        let instrs = &graph.block.instructions;
        let replacements = instrs
            .iter()
            .map(|instr| {
                kb.instruction_shapes(instr)
                    .and_then(|shapes| kb.replacement_opcodes(&instr.mnemonic, &shapes).ok())
                    .unwrap_or_default()
            })
            .collect();

        // Carrier position sets per (vertex, resource), merged when they
        // overlap so that one operand is never renamed two ways.
        let edge_carriers: Vec<[(usize, BTreeSet<usize>); 2]> = graph
            .dep_edges
            .iter()
            .map(|e| {
                [e.dst - 1, e.src - 1].map(|v| (v, carriers(kb, &instrs[v], &e.resource, role_writes(e, v))))
            })
            .collect();
        let mut sets: BTreeMap<(usize, String), Vec<BTreeSet<usize>>> = BTreeMap::new();
        for (e, ends) in graph.dep_edges.iter().zip(&edge_carriers) {
            for (v, pos) in ends {
                if pos.is_empty() {
                    continue;
                }
                let bucket = sets.entry((*v, e.resource.to_string())).or_default();
                let mut merged = pos.clone();
                bucket.retain(|s| {
                    if s.is_disjoint(&merged) {
                        true
                    } else {
                        merged.extend(s.iter().copied());
                        false
                    }
                });
                bucket.push(merged);
            }
        }
        let mut groups = Vec::new();
        let mut lookup: BTreeMap<(usize, String, usize), usize> = BTreeMap::new();
        for ((v, resource), bucket) in &sets {
            let mut bucket = bucket.clone();
            bucket.sort();
            for positions in bucket {
                let target = if is_memory_key(resource) {
                    RenameTarget::Memory(resource.clone())
                } else {
                    RenameTarget::Family(resource.clone())
                };
                for &p in &positions {
                    lookup.insert((*v, resource.clone(), p), groups.len());
                }
                groups.push(RenameGroup {
                    vertex: *v,
                    alternatives: alternatives(kb, graph, *v, &target, &positions),
                    target,
                    positions: positions.into_iter().collect(),
                    members: Vec::new(),
                    touching: Vec::new(),
                });
            }
        }
        let mut edge_groups = Vec::with_capacity(graph.dep_edges.len());
        for (eid, (e, ends)) in graph.dep_edges.iter().zip(&edge_carriers).enumerate() {
            let mut gs = Vec::new();
            for (v, pos) in ends {
                if let Some(&p) = pos.iter().next() {
                    let gid = lookup[&(*v, e.resource.to_string(), p)];
                    groups[gid].members.push(eid);
                    gs.push(gid);
                }
            }
            edge_groups.push(gs);
        }
        for group in &mut groups {
            for (eid, ends) in edge_carriers.iter().enumerate() {
                let hit = ends
                    .iter()
                    .any(|(v, pos)| *v == group.vertex && group.positions.iter().any(|p| pos.contains(p)));
                if hit {
                    group.touching.push(eid);
                }
            }
        }
        PerturbPlan { kb, graph, cfg, replacements, groups, edge_groups }
    }

    pub fn groups_at(&self, vertex: usize) -> impl Iterator<Item = (usize, &RenameGroup)> {
        self.groups.iter().enumerate().filter(move |(_, g)| g.vertex == vertex)
    }

    pub fn sampler(&self, preserve: &FeatureSet) -> Result<Sampler<'_, 'a>, PerturbError> {
        let n = self.graph.len();
        let mut protected = vec![false; n];
        let mut preserved_edges = vec![false; self.graph.dep_edges.len()];
        let mut allow_delete = true;
        for f in preserve.iter() {
            match f {
                Feature::Inst(i) if (1..=n).contains(i) => protected[i - 1] = true,
                Feature::Dep(e) => {
                    let idx = self
                        .graph
                        .dep_edges
                        .binary_search(e)
                        .map_err(|_| PerturbError::UnknownFeature(f.to_string()))?;
                    preserved_edges[idx] = true;
                    protected[e.src - 1] = true;
                    protected[e.dst - 1] = true;
                }
                Feature::NumInsts(c) if *c == n => allow_delete = false,
                _ => return Err(PerturbError::UnknownFeature(f.to_string())),
            }
        }
        let frozen = self
            .groups
            .iter()
            .map(|g| g.touching.iter().any(|&e| preserved_edges[e]))
            .collect();
        Ok(Sampler { plan: self, preserve: preserve.clone(), protected, allow_delete, preserved_edges, frozen })
    }

    /// Apply a decision to the original block.
    pub fn realize(&self, decision: &Decision) -> (BasicBlock, Vec<Option<usize>>, Vec<PerturbOp>) {
        let kb = self.kb;
        let mut out = Vec::with_capacity(decision.vertices.len());
        let mut map = Vec::with_capacity(decision.vertices.len());
        let mut ops = Vec::with_capacity(decision.vertices.len());
        for (i, (instr, choice)) in self.graph.block.instructions.iter().zip(&decision.vertices).enumerate() {
            if *choice == VertexChoice::Delete {
                map.push(None);
                ops.push(PerturbOp::Delete { index: i + 1 });
                continue;
            }
            let original = instr;
            let mut instr = instr.clone();
            if let VertexChoice::Replace(k) = choice {
                let to = self.replacements[i][*k].clone();
                ops.push(PerturbOp::Replace { index: i + 1, from: instr.mnemonic.clone(), to: to.clone() });
                instr.mnemonic = to;
            }
            for (gid, group) in self.groups_at(i) {
                let Some(alt) = decision.renames[gid] else { continue };
                match (&group.target, &group.alternatives[alt]) {
                    (RenameTarget::Memory(key), RenameAlt::Displace(by)) => {
                        for &p in &group.positions {
                            if let (Operand::Memory(m), Operand::Memory(orig)) = (&mut instr.operands[p], &original.operands[p]) {
                                if orig.key() == *key {
                                    m.displacement = orig.displacement + by;
                                }
                            }
                        }
                        ops.push(PerturbOp::Displace { index: i + 1, key: key.clone(), by: *by });
                    }
                    (RenameTarget::Family(from), RenameAlt::Family(to)) => {
                        let rename = |r: &mut String| {
                            let Some(spec) = kb.register(r) else { return };
                            if spec.family == *from {
                                if let Some(m) = kb.family_member(to, spec.width_bits) {
                                    *r = m.name.clone();
                                }
                            }
                        };
                        for &p in &group.positions {
                            match &mut instr.operands[p] {
                                Operand::Register(r) => rename(r),
                                Operand::Memory(m) => {
                                    if let Some(b) = m.base.as_mut() {
                                        rename(b);
                                    }
                                    if let Some(x) = m.index.as_mut() {
                                        rename(x);
                                    }
                                }
                                Operand::Immediate { .. } => {}
                            }
                        }
                        ops.push(PerturbOp::Rename { index: i + 1, from: from.clone(), to: to.clone() });
                    }
                    _ => unreachable!("alternative does not fit its target"),
                }
            }
            if instr.mnemonic != original.mnemonic || instr.operands != original.operands {
                instr.source_text = instr.to_string();
            }
            map.push(Some(out.len()));
            out.push(instr);
        }
        (BasicBlock::new(out), map, ops)
    }
}

/// Rename alternatives for the operands at `positions` of `vertex`.
fn alternatives(
    kb: &IsaKb,
    graph: &BlockGraph,
    vertex: usize,
    target: &RenameTarget,
    positions: &BTreeSet<usize>,
) -> Vec<RenameAlt> {
    let family = match target {
        RenameTarget::Memory(_) => return vec![RenameAlt::Displace(DISPLACEMENT_STEP)],
        RenameTarget::Family(f) => f,
    };
    let instr = &graph.block.instructions[vertex];
    let mut occurrences = Vec::new();
    let mut all_families = BTreeSet::new();
    for (p, op) in instr.operands.iter().enumerate() {
        let regs: Vec<&str> = match op {
            Operand::Register(r) => vec![r.as_str()],
            Operand::Memory(m) => m.registers().collect(),
            Operand::Immediate { .. } => Vec::new(),
        };
        for r in regs {
            let fam = kb.family_of(r).unwrap_or(r);
            all_families.insert(fam.to_string());
            if positions.contains(&p) && fam == family {
                occurrences.push(r.to_string());
            }
        }
    }
    let Some(first) = occurrences.first() else { return Vec::new() };
    if occurrences.iter().any(|r| !kb.register(r).is_some_and(|s| s.substitutable)) {
        return Vec::new();
    }
    let widths: BTreeSet<u16> = occurrences.iter().filter_map(|r| kb.register(r)).map(|r| r.width_bits).collect();
    let mut forbidden: BTreeSet<String> = graph
        .reads(vertex)
        .chain(graph.writes(vertex))
        .filter(|res| !is_memory_key(res))
        .map(str::to_string)
        .collect();
    forbidden.extend(all_families);
    let candidates: BTreeSet<String> = kb
        .replacement_registers(first, &forbidden)
        .unwrap_or_default()
        .into_iter()
        .filter_map(|r| kb.family_of(&r).map(str::to_string))
        .filter(|fam| widths.iter().all(|&w| kb.family_member(fam, w).is_some_and(|m| m.substitutable)))
        .collect();
    candidates.into_iter().map(RenameAlt::Family).collect()
}

impl Sampler<'_, '_> {
    /// Draw one decision from the perturbation distribution, without the
    /// preservation check.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Decision {
        let plan = self.plan;
        let cfg = &plan.cfg;
        let n = plan.graph.len();
        let mut vertices = Vec::with_capacity(n);
        let mut deleted = 0;
        for i in 0..n {
            if self.protected[i] || rng.gen::<f64>() < cfg.p_inst_retain {
                vertices.push(VertexChoice::Keep);
                continue;
            }
            if self.allow_delete && deleted + 1 < n && rng.gen::<f64>() < cfg.p_delete {
                vertices.push(VertexChoice::Delete);
                deleted += 1;
                continue;
            }
            let cands = plan.replacements[i].len();
            vertices.push(if cands == 0 { VertexChoice::Keep } else { VertexChoice::Replace(rng.gen_range(0..cands)) });
        }

        let edges = plan.graph.dep_edges.len();
        let mut locked = vec![false; edges];
        let mut requested = vec![false; plan.groups.len()];
        for e in 0..edges {
            if self.preserved_edges[e] {
                continue;
            }
            if rng.gen::<f64>() < cfg.p_dep_explicit_retain {
                locked[e] = true;
            } else if rng.gen::<f64>() >= cfg.p_dep_retain {
                let sides = &plan.edge_groups[e];
                match sides.len() {
                    0 => {}
                    1 => requested[sides[0]] = true,
                    k => requested[sides[rng.gen_range(0..k)]] = true,
                }
            }
        }

        let mut renames = vec![None; plan.groups.len()];
        for (gid, group) in plan.groups.iter().enumerate() {
            if !requested[gid]
                || self.frozen[gid]
                || group.alternatives.is_empty()
                || vertices[group.vertex] == VertexChoice::Delete
                || group.touching.iter().any(|&e| locked[e])
            {
                continue;
            }
            renames[gid] = Some(rng.gen_range(0..group.alternatives.len()));
        }
        Decision { vertices, renames }
    }

    /// Realize a decision and check that it keeps every preserved feature.
    /// Returns the first violated feature on failure.
    pub fn evaluate(&self, decision: &Decision) -> Result<PerturbResult, EvalOutcome> {
        let plan = self.plan;
        let (block, vertex_map, ops_applied) = plan.realize(decision);
        if block.is_empty() {
            return Err(EvalOutcome::Empty);
        }
        let graph = build_graph_with(plan.kb, &block, plan.graph.options)
            .map_err(|e| EvalOutcome::Invalid(e.to_string()))?;
        for f in self.preserve.iter() {
            if !feature_present(plan.graph, &graph, &vertex_map, f) {
                return Err(EvalOutcome::Violates(f.clone()));
            }
        }
        Ok(PerturbResult { block, graph, vertex_map, ops_applied, attempts: 0 })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PerturbResult, PerturbError> {
        let max = self.plan.cfg.max_retries;
        let mut last = None;
        for attempt in 1..=max {
            let decision = self.draw(rng);
            match self.evaluate(&decision) {
                Ok(mut result) => {
                    result.attempts = attempt;
                    return Ok(result);
                }
                Err(EvalOutcome::Invalid(msg)) => return Err(PerturbError::InvalidBlock(msg)),
                Err(EvalOutcome::Violates(f)) => last = Some(f.to_string()),
                Err(EvalOutcome::Empty) => last = Some("a non-empty block".to_string()),
            }
        }
        Err(PerturbError::Unpreservable { feature: last.unwrap_or_default(), attempts: max })
    }

    /// Choices available to instruction `i` under this preserve set.
    pub fn vertex_choices(&self, i: usize) -> Vec<VertexChoice> {
        if self.protected[i] {
            return vec![VertexChoice::Keep];
        }
        let mut out = vec![VertexChoice::Keep];
        if self.allow_delete {
            out.push(VertexChoice::Delete);
        }
        out.extend((0..self.plan.replacements[i].len()).map(VertexChoice::Replace));
        out
    }

    /// Groups that can fire under this preserve set.
    pub fn free_groups(&self) -> Vec<usize> {
        (0..self.plan.groups.len())
            .filter(|&g| !self.frozen[g] && !self.plan.groups[g].alternatives.is_empty())
            .filter(|&g| self.plan.groups[g].members.iter().any(|&e| !self.preserved_edges[e]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalOutcome {
    Empty,
    Violates(Feature),
    Invalid(String),
}

pub fn sample_perturbation<R: Rng + ?Sized>(
    kb: &IsaKb,
    g: &BlockGraph,
    preserve: &FeatureSet,
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<PerturbResult, PerturbError> {
    let plan = PerturbPlan::new(kb, g, *cfg);
    plan.sampler(preserve)?.sample(rng)
}

/// Size of Π̂(F): the product over instructions of the number of distinct
/// outcomes for that instruction, counting each free rename group at a kept
/// instruction once. Exact whenever distinct decisions give distinct blocks.
pub fn estimate_space_size(kb: &IsaKb, g: &BlockGraph, preserve: &FeatureSet) -> Result<SpaceSize, PerturbError> {
    let plan = PerturbPlan::new(kb, g, PerturbConfig::default());
    let sampler = plan.sampler(preserve)?;
    Ok(SpaceSize { log10_count: log10_space(&sampler) })
}

fn log10_space(sampler: &Sampler) -> f64 {
    let plan = sampler.plan;
    let free = sampler.free_groups();
    let mut log = 0.0;
    for i in 0..plan.graph.len() {
        let renames: f64 = free
            .iter()
            .filter(|&&g| plan.groups[g].vertex == i)
            .map(|&g| (1 + plan.groups[g].alternatives.len()) as f64)
            .product();
        let per_vertex = if sampler.protected[i] {
            renames
        } else {
            let kept = (1 + plan.replacements[i].len()) as f64 * renames;
            kept + if sampler.allow_delete { 1.0 } else { 0.0 }
        };
        log += per_vertex.log10();
    }
    if sampler.allow_delete && !sampler.protected.iter().any(|&p| p) {
        // Remove the one all-deleted combination.
        let total = 10f64.powf(log);
        if total.is_finite() && total < 1e15 {
            return (total - 1.0).max(1.0).log10();
        }
    }
    log
}

/// Every distinct block Γ can produce while preserving `preserve`, sorted by
/// canonical text.
pub fn enumerate_space(
    kb: &IsaKb,
    g: &BlockGraph,
    preserve: &FeatureSet,
    limit: usize,
) -> Result<Vec<BasicBlock>, PerturbError> {
    let plan = PerturbPlan::new(kb, g, PerturbConfig::default());
    let sampler = plan.sampler(preserve)?;
    let free = sampler.free_groups();
    let budget = limit.saturating_mul(1000).max(10_000_000);
    if log10_space(&sampler) > (budget as f64).log10() {
        return Err(PerturbError::LimitExceeded { limit });
    }

    let n = g.len();
    let per_vertex_groups: Vec<Vec<usize>> =
        (0..n).map(|i| free.iter().copied().filter(|&gid| plan.groups[gid].vertex == i).collect()).collect();
    let mut found: BTreeMap<String, BasicBlock> = BTreeMap::new();
    let mut decision = Decision { vertices: vec![VertexChoice::Keep; n], renames: vec![None; plan.groups.len()] };
    let mut stack_err = None;
    enumerate_rec(&sampler, &per_vertex_groups, 0, &mut decision, &mut |d| {
        match sampler.evaluate(d) {
            Ok(r) => {
                found.entry(r.block.render()).or_insert(r.block);
                if found.len() > limit {
                    stack_err = Some(PerturbError::LimitExceeded { limit });
                    return false;
                }
            }
            Err(EvalOutcome::Invalid(msg)) => {
                stack_err = Some(PerturbError::InvalidBlock(msg));
                return false;
            }
            Err(_) => {}
        }
        true
    });
    if let Some(e) = stack_err {
        return Err(e);
    }
    Ok(found.into_values().collect())
}

fn enumerate_rec(
    sampler: &Sampler,
    groups: &[Vec<usize>],
    i: usize,
    decision: &mut Decision,
    visit: &mut dyn FnMut(&Decision) -> bool,
) -> bool {
    if i == groups.len() {
        return visit(decision);
    }
    for choice in sampler.vertex_choices(i) {
        decision.vertices[i] = choice;
        let cont = if choice == VertexChoice::Delete {
            enumerate_rec(sampler, groups, i + 1, decision, visit)
        } else {
            rename_rec(sampler, groups, i, 0, decision, visit)
        };
        if !cont {
            return false;
        }
    }
    decision.vertices[i] = VertexChoice::Keep;
    true
}

fn rename_rec(
    sampler: &Sampler,
    groups: &[Vec<usize>],
    i: usize,
    k: usize,
    decision: &mut Decision,
    visit: &mut dyn FnMut(&Decision) -> bool,
) -> bool {
    if k == groups[i].len() {
        return enumerate_rec(sampler, groups, i + 1, decision, visit);
    }
    let gid = groups[i][k];
    let alts = sampler.plan.groups[gid].alternatives.len();
    for alt in std::iter::once(None).chain((0..alts).map(Some)) {
        decision.renames[gid] = alt;
        if !rename_rec(sampler, groups, i, k + 1, decision, visit) {
            return false;
        }
    }
    decision.renames[gid] = None;
    true
}
