//! Cost models: the interpretable crude model, external processes speaking
//! the text protocol, and an LRU cache around either.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::num::NonZeroUsize;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use lru::LruCache;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::asm::BasicBlock;
use crate::graph::{build_graph, BlockGraph, DepKind, Feature, FeatureSet};
use crate::isa::IsaKb;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("no cost for opcode `{0}` in the cost table")]
    MissingOpcode(String),
    #[error("block is not valid for the model: {0}")]
    InvalidBlock(String),
    #[error("failed to spawn `{command}`: {message}")]
    Spawn { command: String, message: String },
    #[error("model process timed out after {0:?}")]
    Timeout(Duration),
    #[error("model process exited with {status}: {stderr}")]
    ExitStatus { status: String, stderr: String },
    #[error("model output is not a single positive number: {0:?}")]
    BadOutput(String),
    #[error("model I/O failure: {0}")]
    Io(String),
}

#[derive(Debug, Error)]
pub enum CostTableError {
    #[error("cannot read cost table {path}: {message}")]
    Io { path: String, message: String },
    #[error("cost table line {line}: {message}")]
    Row { line: usize, message: String },
    #[error("cost table has no entry for block-valid opcodes: {0:?}")]
    Missing(Vec<String>),
    #[error("no bundled cost table for `{0}`")]
    UnknownMarch(String),
}

/// Per-opcode throughput in cycles for one microarchitecture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostTable {
    pub march: String,
    pub per_opcode: BTreeMap<String, f64>,
}

#[derive(Deserialize)]
struct CostRow {
    mnemonic: String,
    cycles: f64,
}

impl CostTable {
    /// Parse `mnemonic,cycles` CSV with a header row.
    pub fn from_csv(march: &str, text: &str) -> Result<Self, CostTableError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut per_opcode = BTreeMap::new();
        for (i, row) in reader.deserialize::<CostRow>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| CostTableError::Row { line, message: e.to_string() })?;
            if !(row.cycles.is_finite() && row.cycles > 0.0) {
                return Err(CostTableError::Row { line, message: format!("cycles must be positive, got {}", row.cycles) });
            }
            if per_opcode.insert(row.mnemonic.to_ascii_lowercase(), row.cycles).is_some() {
                return Err(CostTableError::Row { line, message: format!("duplicate opcode `{}`", row.mnemonic) });
            }
        }
        Ok(CostTable { march: march.to_string(), per_opcode })
    }

    pub fn load(march: &str, path: impl AsRef<Path>) -> Result<Self, CostTableError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CostTableError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_csv(march, &text)
    }

    /// Tables shipped with the crate: `hsw`, `skl` and `tiny`.
    pub fn bundled(march: &str) -> Result<Self, CostTableError> {
        let text = match march {
            "hsw" => crate::data::COSTS_HSW,
            "skl" => crate::data::COSTS_SKL,
            "tiny" => crate::data::COSTS_TINY,
            other => return Err(CostTableError::UnknownMarch(other.to_string())),
        };
        Self::from_csv(march, text)
    }

    pub fn check_covers(&self, kb: &IsaKb) -> Result<(), CostTableError> {
        let missing: Vec<String> = kb
            .opcodes()
            .filter(|op| op.bb_valid && !self.per_opcode.contains_key(&op.mnemonic))
            .map(|op| op.mnemonic.clone())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CostTableError::Missing(missing))
        }
    }

    pub fn cost(&self, mnemonic: &str) -> Result<f64, ModelError> {
        self.per_opcode.get(mnemonic).copied().ok_or_else(|| ModelError::MissingOpcode(mnemonic.to_string()))
    }
}

/// Closed interval `[max(0, center - epsilon), center + epsilon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetInterval {
    pub center: f64,
    pub epsilon: f64,
}

impl TargetInterval {
    pub fn new(center: f64, epsilon: f64) -> Self {
        TargetInterval { center, epsilon }
    }

    pub fn lower(&self) -> f64 {
        (self.center - self.epsilon).max(0.0)
    }

    pub fn upper(&self) -> f64 {
        self.center + self.epsilon
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower() && x <= self.upper()
    }
}

/// Cost of a single feature under the crude model.
pub fn feature_cost(table: &CostTable, g: &BlockGraph, f: &Feature) -> Result<f64, ModelError> {
    let inst = |i: usize| table.cost(&g.block.instructions[i - 1].mnemonic);
    Ok(match f {
        Feature::Inst(i) => inst(*i)?,
        Feature::Dep(e) => match e.kind {
            DepKind::Raw => inst(e.src)? + inst(e.dst)?,
            DepKind::War | DepKind::Waw => 0.0,
        },
        Feature::NumInsts(n) => *n as f64 / 4.0,
    })
}

/// Maximum feature cost over the block's feature set.
pub fn crude_predict(table: &CostTable, g: &BlockGraph) -> Result<f64, ModelError> {
    let mut best = g.len() as f64 / 4.0;
    for instr in &g.block.instructions {
        best = best.max(table.cost(&instr.mnemonic)?);
    }
    for e in &g.dep_edges {
        best = best.max(feature_cost(table, g, &Feature::Dep(e.clone()))?);
    }
    Ok(best)
}

/// All features whose crude cost equals the crude prediction.
pub fn ground_truth_explanation(table: &CostTable, g: &BlockGraph) -> Result<FeatureSet, ModelError> {
    let top = crude_predict(table, g)?;
    let mut out = FeatureSet::new();
    for f in crate::graph::extract_features(g).iter() {
        if feature_cost(table, g, f)? == top {
            out.insert(f.clone());
        }
    }
    Ok(out)
}

pub trait CostModel: Send + Sync {
    fn name(&self) -> &str;

    fn predict(&self, bb: &BasicBlock) -> Result<f64, ModelError>;

    /// Predict from an already built graph. Models that need the graph
    /// override this to skip rebuilding it.
    fn predict_graph(&self, g: &BlockGraph) -> Result<f64, ModelError> {
        self.predict(&g.block)
    }

    /// Whether concurrent `predict` calls are allowed.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct CrudeModel {
    name: String,
    pub table: CostTable,
    kb: Arc<IsaKb>,
}

impl CrudeModel {
    pub fn new(kb: Arc<IsaKb>, table: CostTable) -> Self {
        CrudeModel { name: format!("crude-{}", table.march), table, kb }
    }
}

impl CostModel for CrudeModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, bb: &BasicBlock) -> Result<f64, ModelError> {
        let g = build_graph(&self.kb, bb).map_err(|e| ModelError::InvalidBlock(e.to_string()))?;
        crude_predict(&self.table, &g)
    }

    fn predict_graph(&self, g: &BlockGraph) -> Result<f64, ModelError> {
        crude_predict(&self.table, g)
    }
}

/// Model backed by a closure. Useful for synthetic models.
pub struct FnModel<F> {
    name: String,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(&BasicBlock) -> f64 + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        FnModel { name: name.into(), f }
    }
}

impl<F> CostModel for FnModel<F>
where
    F: Fn(&BasicBlock) -> f64 + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, bb: &BasicBlock) -> Result<f64, ModelError> {
        Ok((self.f)(bb))
    }
}

struct SpawnLimiter {
    active: Mutex<usize>,
    released: Condvar,
    limit: Mutex<usize>,
}

static SPAWNS: SpawnLimiter =
    SpawnLimiter { active: Mutex::new(0), released: Condvar::new(), limit: Mutex::new(4) };

/// Bound the number of external model processes alive at once (default 4).
pub fn set_spawn_limit(limit: usize) {
    *SPAWNS.limit.lock().unwrap() = limit.max(1);
    SPAWNS.released.notify_all();
}

struct SpawnPermit;

impl SpawnPermit {
    fn acquire() -> Self {
        let limit = *SPAWNS.limit.lock().unwrap();
        let mut active = SPAWNS.active.lock().unwrap();
        while *active >= limit {
            active = SPAWNS.released.wait(active).unwrap();
        }
        *active += 1;
        SpawnPermit
    }
}

impl Drop for SpawnPermit {
    fn drop(&mut self) {
        *SPAWNS.active.lock().unwrap() -= 1;
        SPAWNS.released.notify_one();
    }
}

/// A cost model run as a child process: the block's canonical text goes to
/// stdin, one positive decimal comes back on stdout.
#[derive(Debug, Clone)]
pub struct ExternalModel {
    name: String,
    pub argv: Vec<String>,
    pub timeout: Duration,
    pub march: Option<String>,
}

impl ExternalModel {
    pub fn new(argv: Vec<String>, timeout: Duration, march: Option<String>) -> Self {
        let name = format!("exec:{}", argv.join(" "));
        ExternalModel { name, argv, timeout, march }
    }

    fn run(&self, input: &str) -> Result<String, ModelError> {
        let Some((program, args)) = self.argv.split_first() else {
            return Err(ModelError::Spawn { command: String::new(), message: "empty command".into() });
        };
        let _permit = SpawnPermit::acquire();
        let mut cmd = Command::new(program);
        cmd.args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped());
        if let Some(march) = &self.march {
            cmd.env("COMET_MARCH", march);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| ModelError::Spawn { command: self.argv.join(" "), message: e.to_string() })?;
        let mut stdout = child.stdout.take().expect("stdout is piped");
        let mut stderr = child.stderr.take().expect("stderr is piped");
        let out_reader = std::thread::spawn(move || {
            let mut s = Vec::new();
            stdout.read_to_end(&mut s).map(|_| s)
        });
        let err_reader = std::thread::spawn(move || {
            let mut s = Vec::new();
            let _ = stderr.read_to_end(&mut s);
            s
        });
        if let Some(mut stdin) = child.stdin.take() {
            // A child that exits without reading its input closes the pipe;
            // its exit status and output decide the outcome.
            let _ = stdin.write_all(input.as_bytes());
        }
        let status = match child.wait_timeout(self.timeout).map_err(|e| ModelError::Io(e.to_string()))? {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(ModelError::Timeout(self.timeout));
            }
        };
        let out = out_reader.join().expect("reader thread").map_err(|e| ModelError::Io(e.to_string()))?;
        let err = err_reader.join().expect("reader thread");
        if !status.success() {
            return Err(ModelError::ExitStatus {
                status: status.to_string(),
                stderr: String::from_utf8_lossy(&err).trim().to_string(),
            });
        }
        String::from_utf8(out).map_err(|e| ModelError::BadOutput(e.to_string()))
    }
}

/// Parse a wire-protocol response: one line holding a positive decimal.
pub fn parse_prediction(output: &str) -> Result<f64, ModelError> {
    let trimmed = output.trim_end_matches(['\n', '\r']);
    if trimmed.contains('\n') {
        return Err(ModelError::BadOutput(output.to_string()));
    }
    let value: f64 = trimmed.trim().parse().map_err(|_| ModelError::BadOutput(output.to_string()))?;
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(ModelError::BadOutput(output.to_string()))
    }
}

impl CostModel for ExternalModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, bb: &BasicBlock) -> Result<f64, ModelError> {
        parse_prediction(&self.run(&bb.render())?)
    }
}

/// LRU memoization keyed by canonical block text.
pub struct CachedModel {
    inner: Arc<dyn CostModel>,
    cache: Mutex<LruCache<String, f64>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CachedModel {
    pub fn new(inner: Arc<dyn CostModel>, capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("capacity is at least 1");
        CachedModel { inner, cache: Mutex::new(LruCache::new(cap)), hits: AtomicU64::new(0), misses: AtomicU64::new(0) }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup(&self, key: &str) -> Option<f64> {
        let hit = self.cache.lock().unwrap().get(key).copied();
        if hit.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        hit
    }

    fn store(&self, key: String, value: f64) {
        self.misses.fetch_add(1, Ordering::Relaxed);
        self.cache.lock().unwrap().put(key, value);
    }
}

impl CostModel for CachedModel {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn predict(&self, bb: &BasicBlock) -> Result<f64, ModelError> {
        let key = bb.render();
        if let Some(v) = self.lookup(&key) {
            return Ok(v);
        }
        let v = self.inner.predict(bb)?;
        self.store(key, v);
        Ok(v)
    }

    fn predict_graph(&self, g: &BlockGraph) -> Result<f64, ModelError> {
        let key = g.block.render();
        if let Some(v) = self.lookup(&key) {
            return Ok(v);
        }
        let v = self.inner.predict_graph(g)?;
        self.store(key, v);
        Ok(v)
    }

    fn concurrent_safe(&self) -> bool {
        self.inner.concurrent_safe()
    }
}
