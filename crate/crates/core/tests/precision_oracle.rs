mod support;

use std::sync::Arc;

use comet_core::asm::{parse_block, BasicBlock};
use comet_core::cost::{CostModel, CostTable, CrudeModel, FnModel, TargetInterval};
use comet_core::explain::{coverage_estimate, coverage_pool, precision_estimate};
use comet_core::fixtures::TINY_FIXTURES;
use comet_core::graph::{build_graph, extract_features, FeatureSet};
use comet_core::isa::IsaKb;
use comet_core::perturb::PerturbConfig;

const N: usize = 20_000;

fn tolerance(p: f64) -> f64 {
    5.0 * (p * (1.0 - p) / N as f64).sqrt() + 1e-3
}

/// Every singleton preserve set of the block, plus the empty one.
fn preserve_sets(all: &FeatureSet) -> Vec<FeatureSet> {
    std::iter::once(FeatureSet::new()).chain(all.iter().map(|f| FeatureSet::new().with(f.clone()))).collect()
}

fn check_precision(model: &dyn CostModel, kb: &IsaKb, text: &str, epsilon: f64) {
    let g = build_graph(kb, &parse_block(text, kb).unwrap()).unwrap();
    let target = TargetInterval::new(model.predict_graph(&g).unwrap(), epsilon);
    let cfg = PerturbConfig::default();
    for (k, f) in preserve_sets(&extract_features(&g)).into_iter().enumerate() {
        let (exact, accepted) = support::exact_precision(model, kb, &g, &f, target, cfg);
        assert!(accepted > 0.2, "{text:?} {f}: accepted mass {accepted}");
        let (hits, n) = precision_estimate(model, kb, &g, &f, target, &cfg, 40 + k as u64, N).unwrap();
        let est = hits as f64 / n as f64;
        assert!((est - exact).abs() <= tolerance(exact), "{text:?} {f}: sampled {est} exact {exact}");
    }
}

#[test]
fn precision_matches_decision_tree_under_count_model() {
    let kb = IsaKb::tiny();
    // Length plus a penalty per add, so that both deletions and opcode
    // replacements move the prediction.
    let model = FnModel::new("count-add", |b: &BasicBlock| {
        b.len() as f64 / 4.0 + b.instructions.iter().filter(|i| i.mnemonic == "add").count() as f64
    });
    for text in TINY_FIXTURES {
        check_precision(&model, &kb, text, 0.1);
    }
}

#[test]
fn precision_matches_decision_tree_under_crude_model() {
    let kb = Arc::new(IsaKb::tiny());
    let model = CrudeModel::new(kb.clone(), CostTable::bundled("tiny").unwrap());
    for text in TINY_FIXTURES {
        check_precision(&model, &kb, text, 0.1);
    }
}

#[test]
fn coverage_matches_decision_tree() {
    let kb = IsaKb::tiny();
    let cfg = PerturbConfig::default();
    for text in TINY_FIXTURES {
        let g = build_graph(&kb, &parse_block(text, &kb).unwrap()).unwrap();
        let pool = coverage_pool(&kb, &g, &cfg, 9, N).unwrap();
        for f in preserve_sets(&extract_features(&g)) {
            let exact = support::exact_coverage(&kb, &g, &f, cfg);
            let est = coverage_estimate(&g, &f, &pool);
            assert!((est - exact).abs() <= tolerance(exact), "{text:?} {f}: sampled {est} exact {exact}");
        }
        assert_eq!(support::exact_coverage(&kb, &g, &FeatureSet::new(), cfg), 1.0);
    }
}

#[test]
fn decision_tree_is_a_distribution() {
    let kb = IsaKb::tiny();
    for text in TINY_FIXTURES {
        let g = build_graph(&kb, &parse_block(text, &kb).unwrap()).unwrap();
        let plan = comet_core::perturb::PerturbPlan::new(&kb, &g, PerturbConfig::default());
        for f in preserve_sets(&extract_features(&g)) {
            let total: f64 = support::decision_distribution(&plan.sampler(&f).unwrap()).iter().map(|(p, _)| p).sum();
            approx::assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        }
    }
}
