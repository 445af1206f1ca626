//! Precision and coverage estimation, KL-LUCB arm selection and the beam
//! search that picks the explanation.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::BasicBlock;
use crate::cost::{CostModel, ModelError, TargetInterval};
use crate::graph::{build_graph, extract_features, feature_present, BlockGraph, Feature, FeatureSet, GraphError};
use crate::isa::IsaKb;
use crate::kl::{kl_lcb, kl_ucb, lucb_beta};
use crate::perturb::{enumerate_space, PerturbConfig, PerturbError, PerturbPlan, PerturbResult};
use crate::rng::{fnv1a, stream};

/// Stream tags separating precision draws from coverage-pool draws.
const STREAM_PRECISION: u64 = 1;
const STREAM_COVERAGE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainConfig {
    pub precision_threshold: f64,
    pub epsilon: f64,
    pub beam_width: usize,
    pub lucb_confidence: f64,
    pub lucb_tolerance: f64,
    pub batch_size: usize,
    pub min_samples: usize,
    pub max_samples_per_candidate: usize,
    pub coverage_pool: usize,
    pub master_seed: u64,
    pub perturb: PerturbConfig,
}

/// ε for the crude model: the smallest change it can make is a quarter unit.
pub const CRUDE_EPSILON: f64 = 0.25;
/// ε for external throughput models, in cycles.
pub const EXTERNAL_EPSILON: f64 = 0.5;

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            precision_threshold: 0.7,
            epsilon: CRUDE_EPSILON,
            beam_width: 10,
            lucb_confidence: 0.05,
            lucb_tolerance: 0.1,
            batch_size: 16,
            min_samples: 100,
            max_samples_per_candidate: 10_000,
            coverage_pool: 1000,
            master_seed: 0,
            perturb: PerturbConfig::default(),
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(format!("{name} must lie in (0, 1), got {v}"))
            }
        };
        unit("precision_threshold", self.precision_threshold)?;
        unit("lucb_confidence", self.lucb_confidence)?;
        unit("lucb_tolerance", self.lucb_tolerance)?;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        for (name, v) in [
            ("beam_width", self.beam_width),
            ("batch_size", self.batch_size),
            ("min_samples", self.min_samples),
            ("max_samples_per_candidate", self.max_samples_per_candidate),
            ("coverage_pool", self.coverage_pool),
        ] {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        if self.min_samples > self.max_samples_per_candidate {
            return Err("min_samples exceeds max_samples_per_candidate".into());
        }
        self.perturb.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub features: FeatureSet,
    pub est_precision: f64,
    pub precision_lcb: f64,
    pub est_coverage: f64,
    /// Precision samples drawn over the whole search.
    pub samples_used: u64,
    /// False when no candidate reached the threshold and the full feature
    /// set was returned instead.
    pub converged: bool,
    pub model_name: String,
    pub prediction: f64,
    pub interval: TargetInterval,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Draw `n` perturbations preserving `preserve` and count predictions inside
/// `target`. Sample `i` uses the stream keyed by `(seed, preserve, i)`.
#[allow(clippy::too_many_arguments)]
pub fn precision_estimate(
    model: &dyn CostModel,
    kb: &IsaKb,
    g: &BlockGraph,
    preserve: &FeatureSet,
    target: TargetInterval,
    cfg: &PerturbConfig,
    seed: u64,
    n: usize,
) -> Result<(u64, u64), ExplainError> {
    let plan = PerturbPlan::new(kb, g, *cfg);
    let successes = precision_batch(model, &plan, preserve, target, seed, 0, n as u64)?;
    Ok((successes, n as u64))
}

fn precision_batch(
    model: &dyn CostModel,
    plan: &PerturbPlan,
    preserve: &FeatureSet,
    target: TargetInterval,
    seed: u64,
    start: u64,
    count: u64,
) -> Result<u64, ExplainError> {
    let sampler = plan.sampler(preserve)?;
    let key = fnv1a(&preserve.to_string());
    let one = |i: u64| -> Result<u64, ExplainError> {
        let mut rng = stream(seed, &[STREAM_PRECISION, key, i]);
        let r = sampler.sample(&mut rng)?;
        Ok(u64::from(target.contains(model.predict_graph(&r.graph)?)))
    };
    if model.concurrent_safe() {
        (start..start + count).into_par_iter().map(one).try_reduce(|| 0, |a, b| Ok(a + b))
    } else {
        (start..start + count).map(one).sum()
    }
}

/// Fraction of pool members exhibiting every feature of `features`.
pub fn coverage_estimate(g: &BlockGraph, features: &FeatureSet, pool: &[PerturbResult]) -> f64 {
    assert!(!pool.is_empty(), "coverage pool is empty");
    let hits = pool
        .iter()
        .filter(|r| features.iter().all(|f| feature_present(g, &r.graph, &r.vertex_map, f)))
        .count();
    hits as f64 / pool.len() as f64
}

/// The shared ∅-preserving pool used for coverage.
pub fn coverage_pool(kb: &IsaKb, g: &BlockGraph, cfg: &PerturbConfig, seed: u64, size: usize) -> Result<Vec<PerturbResult>, PerturbError> {
    let plan = PerturbPlan::new(kb, g, *cfg);
    let sampler = plan.sampler(&FeatureSet::new())?;
    (0..size as u64)
        .into_par_iter()
        .map(|i| sampler.sample(&mut stream(seed, &[STREAM_COVERAGE, i])))
        .collect()
}

/// Whether every block of Π̂(F) is predicted inside `target`.
pub fn exact_faithful_check(
    model: &dyn CostModel,
    kb: &IsaKb,
    g: &BlockGraph,
    features: &FeatureSet,
    target: TargetInterval,
    limit: usize,
) -> Result<bool, ExplainError> {
    for bb in enumerate_space(kb, g, features, limit)? {
        let pg = build_graph(kb, &bb)?;
        if !target.contains(model.predict_graph(&pg)?) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, Default)]
struct Arm {
    n: u64,
    pos: u64,
}

impl Arm {
    fn mean(&self) -> f64 {
        self.pos as f64 / self.n as f64
    }
}

struct Search<'a> {
    model: &'a dyn CostModel,
    plan: PerturbPlan<'a>,
    cfg: &'a ExplainConfig,
    target: TargetInterval,
    arms: Mutex<BTreeMap<FeatureSet, Arm>>,
    /// Per-feature presence bitmaps over the coverage pool.
    presence: BTreeMap<Feature, Vec<u64>>,
    pool_size: usize,
}

impl Search<'_> {
    fn arm(&self, f: &FeatureSet) -> Arm {
        self.arms.lock().unwrap().get(f).copied().unwrap_or_default()
    }

    fn pull(&self, f: &FeatureSet, count: u64) -> Result<Arm, ExplainError> {
        let before = self.arm(f);
        let count = count.min((self.cfg.max_samples_per_candidate as u64).saturating_sub(before.n));
        if count == 0 {
            return Ok(before);
        }
        let pos = precision_batch(self.model, &self.plan, f, self.target, self.cfg.master_seed, before.n, count)?;
        let mut arms = self.arms.lock().unwrap();
        let arm = arms.entry(f.clone()).or_default();
        arm.n += count;
        arm.pos += pos;
        Ok(*arm)
    }

    fn coverage(&self, f: &FeatureSet) -> f64 {
        let words = self.pool_size.div_ceil(64);
        let mut acc = vec![u64::MAX; words];
        for feat in f.iter() {
            for (a, b) in acc.iter_mut().zip(&self.presence[feat]) {
                *a &= b;
            }
        }
        if let Some(last) = acc.last_mut() {
            let rem = self.pool_size % 64;
            if rem != 0 {
                *last &= (1u64 << rem) - 1;
            }
        }
        acc.iter().map(|w| w.count_ones() as u64).sum::<u64>() as f64 / self.pool_size as f64
    }

    /// KL-LUCB top-`top_n` identification among `cands`.
    fn lucb(&self, cands: &[FeatureSet], top_n: usize) -> Result<Vec<usize>, ExplainError> {
        let cfg = self.cfg;
        let batch = cfg.batch_size as u64;
        for c in cands {
            if self.arm(c).n == 0 {
                self.pull(c, batch)?;
            }
        }
        if cands.len() <= top_n {
            return Ok((0..cands.len()).collect());
        }
        let cap = cfg.max_samples_per_candidate as u64;
        let mut arms: Vec<Arm> = cands.iter().map(|c| self.arm(c)).collect();
        let mut t = 1u64;
        loop {
            let order = rank(&arms);
            let (not_j, j) = order.split_at(order.len() - top_n);
            let beta = lucb_beta(cands.len(), t, cfg.lucb_confidence);
            let (mut ut, mut ut_ub) = (usize::MAX, f64::NEG_INFINITY);
            for &a in not_j {
                let ub = kl_ucb(arms[a].pos, arms[a].n, beta);
                if ut == usize::MAX || ub > ut_ub || (ub == ut_ub && a < ut) {
                    (ut, ut_ub) = (a, ub);
                }
            }
            let (mut lt, mut lt_lb) = (usize::MAX, f64::INFINITY);
            for &a in j {
                let lb = kl_lcb(arms[a].pos, arms[a].n, beta);
                if lt == usize::MAX || lb < lt_lb || (lb == lt_lb && a < lt) {
                    (lt, lt_lb) = (a, lb);
                }
            }
            if ut_ub - lt_lb <= cfg.lucb_tolerance || (arms[ut].n >= cap && arms[lt].n >= cap) {
                return Ok(j.to_vec());
            }
            arms[ut] = self.pull(&cands[ut], batch)?;
            arms[lt] = self.pull(&cands[lt], batch)?;
            t += 1;
        }
    }

    /// Sample `f` until its acceptance is settled; returns (accepted, arm).
    fn settle(&self, f: &FeatureSet, level_beta: f64) -> Result<(bool, Arm), ExplainError> {
        let cfg = self.cfg;
        let thr = cfg.precision_threshold;
        let mut arm = self.arm(f);
        loop {
            let mean = if arm.n == 0 { 0.0 } else { arm.mean() };
            let undecided = arm.n == 0
                || (arm.n as usize) < cfg.min_samples
                || (mean >= thr && kl_lcb(arm.pos, arm.n, level_beta) < thr)
                || (mean < thr && kl_ucb(arm.pos, arm.n, level_beta) >= thr);
            if !undecided || arm.n as usize >= cfg.max_samples_per_candidate {
                break;
            }
            let want = (cfg.batch_size as u64).max((cfg.min_samples as u64).saturating_sub(arm.n));
            arm = self.pull(f, want)?;
        }
        let accepted = arm.n as usize >= cfg.min_samples && kl_lcb(arm.pos, arm.n, level_beta) >= thr;
        Ok((accepted, arm))
    }
}

/// Indices sorted by ascending mean; ties broken by descending index so that
/// earlier candidates rank higher.
fn rank(arms: &[Arm]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..arms.len()).collect();
    idx.sort_by(|&a, &b| arms[a].mean().total_cmp(&arms[b].mean()).then(b.cmp(&a)));
    idx
}

/// Find the maximum-coverage feature set whose precision lower bound clears
/// the threshold.
pub fn explain(model: &dyn CostModel, kb: &IsaKb, bb: &BasicBlock, cfg: &ExplainConfig) -> Result<Explanation, ExplainError> {
    cfg.validate().map_err(ExplainError::Config)?;
    let g = build_graph(kb, bb)?;
    let prediction = model.predict_graph(&g)?;
    let target = TargetInterval::new(prediction, cfg.epsilon);
    let all = extract_features(&g);

    let pool = coverage_pool(kb, &g, &cfg.perturb, cfg.master_seed, cfg.coverage_pool)?;
    let words = pool.len().div_ceil(64);
    let presence = all
        .iter()
        .map(|f| {
            let mut bits = vec![0u64; words];
            for (i, r) in pool.iter().enumerate() {
                if feature_present(&g, &r.graph, &r.vertex_map, f) {
                    bits[i / 64] |= 1 << (i % 64);
                }
            }
            (f.clone(), bits)
        })
        .collect();

    let search = Search {
        model,
        plan: PerturbPlan::new(kb, &g, cfg.perturb),
        cfg,
        target,
        arms: Mutex::new(BTreeMap::new()),
        presence,
        pool_size: pool.len(),
    };
    let level_beta = (1.0 / (cfg.lucb_confidence / (1.0 + (cfg.beam_width as f64 - 1.0) * all.len() as f64))).ln();

    let mut survivors: Vec<FeatureSet> = vec![FeatureSet::new()];
    let mut chosen: Option<(FeatureSet, Arm, f64)> = None;
    for _level in 1..=all.len() {
        let cands: Vec<FeatureSet> = survivors
            .iter()
            .flat_map(|s| all.iter().filter(|f| !s.contains(*f)).map(|f| s.with(f.clone())))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if cands.is_empty() {
            break;
        }
        let top = search.lucb(&cands, cfg.beam_width.min(cands.len()))?;
        let mut best: Option<(FeatureSet, Arm, f64)> = None;
        for &i in &top {
            let (ok, arm) = search.settle(&cands[i], level_beta)?;
            if !ok {
                continue;
            }
            let cov = search.coverage(&cands[i]);
            let better = match &best {
                None => true,
                Some((bf, _, bc)) => cov > *bc || (cov == *bc && cands[i] < *bf),
            };
            if better {
                best = Some((cands[i].clone(), arm, cov));
            }
        }
        if best.is_some() {
            chosen = best;
            break;
        }
        let mut next: Vec<usize> = top;
        next.sort();
        survivors = next.into_iter().map(|i| cands[i].clone()).collect();
    }

    let converged = chosen.is_some();
    let (features, arm, coverage) = match chosen {
        Some(c) => c,
        None => {
            let arm = search.pull(&all, cfg.min_samples as u64)?;
            let cov = search.coverage(&all);
            (all.clone(), arm, cov)
        }
    };
    let samples_used = search.arms.lock().unwrap().values().map(|a| a.n).sum();
    Ok(Explanation {
        est_precision: arm.mean(),
        precision_lcb: kl_lcb(arm.pos, arm.n, level_beta).min(arm.mean()),
        est_coverage: coverage,
        features,
        samples_used,
        converged,
        model_name: model.name().to_string(),
        prediction,
        interval: target,
        seed: cfg.master_seed,
        wall_time: None,
    })
}

/// Like [`explain`], additionally recording wall-clock time.
pub fn explain_timed(model: &dyn CostModel, kb: &IsaKb, bb: &BasicBlock, cfg: &ExplainConfig) -> Result<Explanation, ExplainError> {
    let started = Instant::now();
    let mut e = explain(model, kb, bb, cfg)?;
    e.wall_time = Some(started.elapsed().as_secs_f64());
    Ok(e)
}
