//! Dataset loading and the batch evaluations: accuracy against the crude
//! model's ground truth, the random and fixed baselines, precision and
//! coverage averages, MAPE and feature prominence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{parse_block, BasicBlock, ParseError};
use crate::cost::{ground_truth_explanation, CostModel, CostTable, CrudeModel, ModelError};
use crate::explain::{explain, explain_timed, ExplainConfig, Explanation};
use crate::graph::{build_graph, extract_features, FeatureSet, FeatureType};
use crate::isa::IsaKb;
use crate::rng::{fnv1a, stream};

const STREAM_RANDOM_BASELINE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub asm: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub measured: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl DatasetRecord {
    pub fn text(&self) -> String {
        self.asm.join("\n")
    }

    pub fn block(&self, kb: &IsaKb) -> Result<BasicBlock, ParseError> {
        parse_block(&self.text(), kb)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {message}")]
    Io { path: String, message: String },
    #[error("dataset line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("dataset line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("dataset line {line}: record `{id}` has an invalid block: {source}")]
    InvalidBlock { line: usize, id: String, source: ParseError },
    #[error("dataset line {line}: record `{id}` has a non-positive measurement for `{march}`")]
    BadMeasurement { line: usize, id: String, march: String },
}

/// Parse JSON-Lines records, validating every block against `kb`. Blank
/// lines are skipped.
pub fn parse_dataset(text: &str, kb: &IsaKb) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord =
            serde_json::from_str(raw).map_err(|e| DatasetError::Syntax { line, message: e.to_string() })?;
        if !seen.insert(rec.id.clone()) {
            return Err(DatasetError::DuplicateId { line, id: rec.id });
        }
        if let Some((march, _)) = rec.measured.iter().find(|(_, &v)| !(v > 0.0 && v.is_finite())) {
            return Err(DatasetError::BadMeasurement { line, id: rec.id.clone(), march: march.clone() });
        }
        rec.block(kb).map_err(|source| DatasetError::InvalidBlock { line, id: rec.id.clone(), source })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>, kb: &IsaKb) -> Result<Vec<DatasetRecord>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| DatasetError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_dataset(&text, kb)
}

/// Render records as JSON Lines.
pub fn dataset_to_jsonl(records: &[DatasetRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    Empty,
    #[error("record `{id}` has no measurement for `{march}`")]
    MissingMeasurement { id: String, march: String },
    #[error("record `{id}`: {source}")]
    Model { id: String, source: ModelError },
    #[error("record `{id}`: {message}")]
    Block { id: String, message: String },
    #[error("unknown group key `{0}` (expected none, source or category)")]
    UnknownGroup(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    /// Seed of the run, absent for deterministic methods.
    pub seed: Option<u64>,
    pub features: FeatureSet,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl EvalRow {
    fn new(rec: &DatasetRecord, seed: Option<u64>, features: FeatureSet) -> Self {
        EvalRow {
            id: rec.id.clone(),
            seed,
            features,
            correct: None,
            precision: None,
            coverage: None,
            converged: None,
            time: None,
            source: rec.source.clone(),
            category: rec.category.clone(),
        }
    }

    fn from_explanation(rec: &DatasetRecord, seed: u64, e: Explanation) -> Self {
        EvalRow {
            precision: Some(e.est_precision),
            coverage: Some(e.est_coverage),
            converged: Some(e.converged),
            time: e.wall_time,
            ..EvalRow::new(rec, Some(seed), e.features)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub seed: Option<u64>,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Percent correct, mean and spread across seeds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<MeanStd>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<MeanStd>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<MeanStd>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time: Option<MeanStd>,
    pub prominence: ProminenceRow,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<EvalRow>,
    pub failures: Vec<Failure>,
    pub aggregates: Aggregates,
}

/// Per-seed averages of `field`, then mean and spread across seeds.
fn per_seed(rows: &[EvalRow], field: impl Fn(&EvalRow) -> Option<f64>) -> Option<MeanStd> {
    let mut groups: BTreeMap<Option<u64>, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(v) = field(r) {
            groups.entry(r.seed).or_default().push(v);
        }
    }
    let means: Vec<f64> = groups.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    MeanStd::of(&means)
}

impl EvalReport {
    pub fn new(method: impl Into<String>, seeds: Vec<u64>, mut rows: Vec<EvalRow>, mut failures: Vec<Failure>) -> Self {
        rows.sort_by(|a, b| (a.seed, &a.id).cmp(&(b.seed, &b.id)));
        failures.sort_by(|a, b| (a.seed, &a.id).cmp(&(b.seed, &b.id)));
        let aggregates = Aggregates {
            accuracy: per_seed(&rows, |r| r.correct.map(|c| if c { 100.0 } else { 0.0 })),
            precision: per_seed(&rows, |r| r.precision),
            coverage: per_seed(&rows, |r| r.coverage),
            time: per_seed(&rows, |r| r.time),
            prominence: prominence_of("all", rows.iter().map(|r| &r.features)),
            excluded: failures.len(),
        };
        EvalReport { method: method.into(), seeds, rows, failures, aggregates }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// One flat row per (record, seed).
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "id", "seed", "correct", "precision", "coverage", "time", "num_insts", "inst", "dep", "features",
        ])
        .expect("in-memory write");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let flag = |t| if r.features.has_type(t) { "1" } else { "0" }.to_string();
            w.write_record([
                r.id.clone(),
                r.seed.map(|s| s.to_string()).unwrap_or_default(),
                r.correct.map(|c| if c { "1" } else { "0" }.to_string()).unwrap_or_default(),
                opt(r.precision),
                opt(r.coverage),
                opt(r.time),
                flag(FeatureType::NumInsts),
                flag(FeatureType::Inst),
                flag(FeatureType::Dep),
                r.features.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(" "),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

/// Ground truth of every record under the crude model, in record order.
pub fn ground_truths(records: &[DatasetRecord], kb: &IsaKb, table: &CostTable) -> Result<Vec<FeatureSet>, EvalError> {
    records
        .iter()
        .map(|r| {
            let bb = r.block(kb).map_err(|e| EvalError::Block { id: r.id.clone(), message: e.to_string() })?;
            let g = build_graph(kb, &bb).map_err(|e| EvalError::Block { id: r.id.clone(), message: e.to_string() })?;
            ground_truth_explanation(table, &g).map_err(|source| EvalError::Model { id: r.id.clone(), source })
        })
        .collect()
}

/// An explanation is correct when it is a non-empty subset of the ground
/// truth.
pub fn is_correct(explanation: &FeatureSet, ground_truth: &FeatureSet) -> bool {
    !explanation.is_empty() && explanation.is_subset(ground_truth)
}

fn run_explanations(
    records: &[DatasetRecord],
    kb: &IsaKb,
    model: &dyn CostModel,
    cfg: &ExplainConfig,
    seeds: &[u64],
    timed: bool,
) -> (Vec<(usize, u64, Explanation)>, Vec<Failure>) {
    let jobs: Vec<(usize, u64)> = seeds.iter().flat_map(|&s| (0..records.len()).map(move |i| (i, s))).collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let rec = &records[i];
            let cfg = ExplainConfig { master_seed: seed, ..cfg.clone() };
            let run = || -> Result<Explanation, String> {
                let bb = rec.block(kb).map_err(|e| e.to_string())?;
                let r = if timed { explain_timed(model, kb, &bb, &cfg) } else { explain(model, kb, &bb, &cfg) };
                r.map_err(|e| e.to_string())
            };
            (i, seed, run())
        })
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (i, seed, r) in results {
        match r {
            Ok(e) => ok.push((i, seed, e)),
            Err(error) => {
                log::warn!("record {} seed {seed}: {error}", records[i].id);
                failures.push(Failure { id: records[i].id.clone(), seed: Some(seed), error });
            }
        }
    }
    (ok, failures)
}

/// Explain every record under the crude model once per seed and score the
/// explanations against the ground truth.
pub fn accuracy_eval(
    records: &[DatasetRecord],
    kb: &Arc<IsaKb>,
    table: &CostTable,
    cfg: &ExplainConfig,
    seeds: &[u64],
    timed: bool,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let gts = ground_truths(records, kb, table)?;
    let model = CrudeModel::new(kb.clone(), table.clone());
    let (ok, failures) = run_explanations(records, kb, &model, cfg, seeds, timed);
    let rows = ok
        .into_iter()
        .map(|(i, seed, e)| {
            let correct = is_correct(&e.features, &gts[i]);
            EvalRow { correct: Some(correct), ..EvalRow::from_explanation(&records[i], seed, e) }
        })
        .collect();
    Ok(EvalReport::new("comet", seeds.to_vec(), rows, failures))
}

/// Fraction of each feature type among all ground-truth features.
pub fn type_frequencies(gts: &[FeatureSet]) -> BTreeMap<FeatureType, f64> {
    let mut counts: BTreeMap<FeatureType, usize> = FeatureType::ALL.iter().map(|&t| (t, 0)).collect();
    let mut total = 0usize;
    for gt in gts {
        for f in gt.iter() {
            *counts.get_mut(&f.feature_type()).unwrap() += 1;
            total += 1;
        }
    }
    counts
        .into_iter()
        .map(|(t, c)| (t, if total == 0 { 0.0 } else { c as f64 / total as f64 }))
        .collect()
}

/// Include each feature independently with the frequency of its type among
/// all ground-truth features. Redrawn for every seed.
pub fn baseline_random(
    records: &[DatasetRecord],
    kb: &IsaKb,
    table: &CostTable,
    seeds: &[u64],
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let gts = ground_truths(records, kb, table)?;
    let freq = type_frequencies(&gts);
    let mut rows = Vec::new();
    for &seed in seeds {
        for (rec, gt) in records.iter().zip(&gts) {
            let g = build_graph(kb, &rec.block(kb).expect("validated above")).expect("validated above");
            let mut rng = stream(seed, &[STREAM_RANDOM_BASELINE, fnv1a(&rec.id)]);
            let features: FeatureSet =
                extract_features(&g).iter().filter(|f| rng.gen::<f64>() < freq[&f.feature_type()]).cloned().collect();
            let correct = is_correct(&features, gt);
            rows.push(EvalRow { correct: Some(correct), ..EvalRow::new(rec, Some(seed), features) });
        }
    }
    Ok(EvalReport::new("random", seeds.to_vec(), rows, Vec::new()))
}

/// The ground-truth type that occurs most often. Ties go to the earlier
/// type in `FeatureType::ALL`.
pub fn most_frequent_type(gts: &[FeatureSet]) -> FeatureType {
    let freq = type_frequencies(gts);
    let mut best = FeatureType::ALL[0];
    for t in FeatureType::ALL {
        if freq[&t] > freq[&best] {
            best = t;
        }
    }
    best
}

/// Explain every record with the first feature of the most frequent
/// ground-truth type, or nothing if the record has no such feature.
pub fn baseline_fixed(records: &[DatasetRecord], kb: &IsaKb, table: &CostTable) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let gts = ground_truths(records, kb, table)?;
    let kind = most_frequent_type(&gts);
    let rows = records
        .iter()
        .zip(&gts)
        .map(|(rec, gt)| {
            let g = build_graph(kb, &rec.block(kb).expect("validated above")).expect("validated above");
            let features: FeatureSet =
                extract_features(&g).iter().find(|f| f.feature_type() == kind).cloned().into_iter().collect();
            let correct = is_correct(&features, gt);
            EvalRow { correct: Some(correct), ..EvalRow::new(rec, None, features) }
        })
        .collect();
    Ok(EvalReport::new("fixed", Vec::new(), rows, Vec::new()))
}

/// Average precision, coverage and (optionally) time of explanations for
/// `model` over records and seeds.
pub fn prec_cov_eval(
    records: &[DatasetRecord],
    kb: &IsaKb,
    model: &dyn CostModel,
    cfg: &ExplainConfig,
    seeds: &[u64],
    timed: bool,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let (ok, failures) = run_explanations(records, kb, model, cfg, seeds, timed);
    let rows = ok.into_iter().map(|(i, seed, e)| EvalRow::from_explanation(&records[i], seed, e)).collect();
    Ok(EvalReport::new(model.name(), seeds.to_vec(), rows, failures))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapeRow {
    pub id: String,
    pub predicted: f64,
    pub measured: f64,
    /// Absolute percentage error.
    pub ape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapeReport {
    pub model: String,
    pub march: String,
    pub rows: Vec<MapeRow>,
    pub mape: f64,
}

impl MapeReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "predicted", "measured", "ape"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([r.id.clone(), r.predicted.to_string(), r.measured.to_string(), r.ape.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

/// `100 · mean(|predicted − measured| / measured)` over all records.
pub fn mape(records: &[DatasetRecord], kb: &IsaKb, model: &dyn CostModel, march: &str) -> Result<MapeReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let measured: Vec<f64> = records
        .iter()
        .map(|r| {
            r.measured
                .get(march)
                .copied()
                .ok_or_else(|| EvalError::MissingMeasurement { id: r.id.clone(), march: march.to_string() })
        })
        .collect::<Result<_, _>>()?;
    let predicted: Vec<f64> = records
        .par_iter()
        .map(|r| {
            let bb = r.block(kb).map_err(|e| EvalError::Block { id: r.id.clone(), message: e.to_string() })?;
            model.predict(&bb).map_err(|source| EvalError::Model { id: r.id.clone(), source })
        })
        .collect::<Result<_, _>>()?;
    let mut rows: Vec<MapeRow> = records
        .iter()
        .zip(predicted.iter().zip(&measured))
        .map(|(r, (&p, &m))| MapeRow { id: r.id.clone(), predicted: p, measured: m, ape: 100.0 * (p - m).abs() / m })
        .collect();
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let mape = rows.iter().map(|r| r.ape).sum::<f64>() / rows.len() as f64;
    Ok(MapeReport { model: model.name().to_string(), march: march.to_string(), rows, mape })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    None,
    Source,
    Category,
}

impl FromStr for GroupBy {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(GroupBy::None),
            "source" => Ok(GroupBy::Source),
            "category" => Ok(GroupBy::Category),
            other => Err(EvalError::UnknownGroup(other.to_string())),
        }
    }
}

/// Percent of explanations in a group containing at least one feature of
/// each type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProminenceRow {
    pub group: String,
    pub explanations: usize,
    pub num_insts: f64,
    pub inst: f64,
    pub dep: f64,
}

fn prominence_of<'a>(group: &str, sets: impl IntoIterator<Item = &'a FeatureSet>) -> ProminenceRow {
    let mut counts = [0usize; 3];
    let mut n = 0usize;
    for s in sets {
        n += 1;
        for (slot, t) in counts.iter_mut().zip([FeatureType::NumInsts, FeatureType::Inst, FeatureType::Dep]) {
            if s.has_type(t) {
                *slot += 1;
            }
        }
    }
    let pct = |c: usize| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 };
    ProminenceRow { group: group.to_string(), explanations: n, num_insts: pct(counts[0]), inst: pct(counts[1]), dep: pct(counts[2]) }
}

/// Label used for rows lacking the grouping field.
pub const UNLABELED: &str = "unlabeled";

/// Feature-type prominence of a report's explanations, one row per group in
/// ascending group order.
pub fn prominence(rows: &[EvalRow], group_by: GroupBy) -> Vec<ProminenceRow> {
    let key = |r: &EvalRow| -> String {
        let label = match group_by {
            GroupBy::None => return "all".to_string(),
            GroupBy::Source => &r.source,
            GroupBy::Category => &r.category,
        };
        label.clone().unwrap_or_else(|| UNLABELED.to_string())
    };
    let mut groups: BTreeMap<String, Vec<&FeatureSet>> = BTreeMap::new();
    if group_by == GroupBy::None {
        groups.insert("all".to_string(), Vec::new());
    }
    for r in rows {
        groups.entry(key(r)).or_default().push(&r.features);
    }
    groups.into_iter().map(|(g, sets)| prominence_of(&g, sets)).collect()
}

pub fn prominence_csv(rows: &[ProminenceRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group", "explanations", "num_insts", "inst", "dep"]).expect("in-memory write");
    for r in rows {
        w.write_record([r.group.clone(), r.explanations.to_string(), r.num_insts.to_string(), r.inst.to_string(), r.dep.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}
