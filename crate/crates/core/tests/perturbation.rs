mod support;

use std::collections::BTreeSet;

use comet_core::asm::{parse_block, BasicBlock, Instruction};
use comet_core::data;
use comet_core::eval::parse_dataset;
use comet_core::fixtures::{TINY_FIXTURES, VDIVSS_BLOCK};
use comet_core::graph::{build_graph, extract_features, Feature, FeatureSet};
use comet_core::isa::IsaKb;
use comet_core::perturb::{enumerate_space, estimate_space_size, sample_perturbation, PerturbConfig, PerturbError, PerturbOp};
use comet_core::rng::stream;
use proptest::prelude::*;

fn fixture_blocks(kb: &IsaKb) -> Vec<BasicBlock> {
    parse_dataset(data::FIXTURES, kb).unwrap().iter().map(|r| r.block(kb).unwrap()).collect()
}

#[test]
fn soundness_over_ten_thousand_draws() {
    let kb = IsaKb::core();
    let s = support::soundness_check(&kb, &fixture_blocks(&kb), 10_000, 5);
    assert_eq!((s.unpreserved, s.invalid, s.identity_failures), (0, 0, 0), "{:?}", &s.errors[..s.errors.len().min(5)]);
}

#[test]
fn soundness_on_tiny_isa() {
    let kb = IsaKb::tiny();
    let blocks: Vec<_> = TINY_FIXTURES.iter().map(|t| parse_block(t, &kb).unwrap()).collect();
    let s = support::soundness_check(&kb, &blocks, 2000, 6);
    assert_eq!((s.unpreserved, s.invalid, s.identity_failures), (0, 0, 0), "{:?}", &s.errors[..s.errors.len().min(5)]);
}

#[test]
fn estimate_exact_on_tiny_fixtures() {
    let kb = IsaKb::tiny();
    let bad = support::space_mismatches(&kb, TINY_FIXTURES);
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn monotone_in_preserve_set() {
    let kb = IsaKb::tiny();
    let violations = support::monotonicity_check(&kb, TINY_FIXTURES, 120, 11);
    assert!(violations.is_empty(), "{violations:?}");
}

#[test]
fn limit_exceeded_reports_error() {
    let kb = IsaKb::tiny();
    let g = build_graph(&kb, &parse_block("lea rax, [rax]\nmov rbx, qword ptr [rcx]\nlea rcx, [rbx]", &kb).unwrap()).unwrap();
    let none = FeatureSet::new();
    assert_eq!(enumerate_space(&kb, &g, &none, 10), Err(PerturbError::LimitExceeded { limit: 10 }));
    assert_eq!(enumerate_space(&kb, &g, &none, 1000).unwrap().len(), 48);
    // One pair of decisions collides on this block.
    assert_eq!(estimate_space_size(&kb, &g, &none).unwrap().count().round(), 49.0);
}

#[test]
fn vdivss_block_magnitude() {
    let kb = IsaKb::core();
    let g = build_graph(&kb, &parse_block(VDIVSS_BLOCK, &kb).unwrap()).unwrap();
    let all = estimate_space_size(&kb, &g, &FeatureSet::new()).unwrap();
    assert!((25.0..=45.0).contains(&all.log10_count), "{all}");
    let one = estimate_space_size(&kb, &g, &FeatureSet::new().with(Feature::Inst(1))).unwrap();
    assert!(one.log10_count < all.log10_count);
}

#[test]
fn full_preserve_space_is_the_block() {
    let kb = IsaKb::tiny();
    for t in TINY_FIXTURES {
        let g = build_graph(&kb, &parse_block(t, &kb).unwrap()).unwrap();
        let all = extract_features(&g);
        assert_eq!(enumerate_space(&kb, &g, &all, 10).unwrap(), vec![g.block.clone()]);
        assert_eq!(estimate_space_size(&kb, &g, &all).unwrap().count().round(), 1.0);
    }
}

#[test]
fn unconstrained_draws_are_diverse() {
    let kb = IsaKb::core();
    let text = "mov qword ptr [rdi + 8], rax\nmov rbx, qword ptr [rdi + 8]\nadd rbx, rcx\nimul rcx, rbx";
    let g = build_graph(&kb, &parse_block(text, &kb).unwrap()).unwrap();
    let mut seen = BTreeSet::new();
    let (mut deletes, mut replaces, mut renames, mut displaces) = (0, 0, 0, 0);
    for k in 0..1000u64 {
        let r = sample_perturbation(&kb, &g, &FeatureSet::new(), &PerturbConfig::default(), &mut stream(21, &[k])).unwrap();
        seen.insert(r.block.render());
        for op in &r.ops_applied {
            match op {
                PerturbOp::Delete { .. } => deletes += 1,
                PerturbOp::Replace { .. } => replaces += 1,
                PerturbOp::Rename { .. } => renames += 1,
                PerturbOp::Displace { .. } => displaces += 1,
            }
        }
    }
    assert!(seen.len() > 300, "{}", seen.len());
    assert!(deletes > 0 && replaces > 0 && renames > 0 && displaces > 0, "{deletes} {replaces} {renames} {displaces}");
}

#[test]
fn seeded_draws_repeat() {
    let kb = IsaKb::core();
    let g = build_graph(&kb, &fixture_blocks(&kb)[7]).unwrap();
    let draw = |k: u64| sample_perturbation(&kb, &g, &FeatureSet::new(), &PerturbConfig::default(), &mut stream(3, &[k])).unwrap().block;
    for k in 0..50 {
        assert_eq!(draw(k), draw(k));
    }
}

fn tiny_block() -> impl Strategy<Value = Vec<Instruction>> {
    let universe = support::tiny_universe();
    prop::collection::vec(0..universe.len(), 1..=3).prop_map(move |idx| idx.into_iter().map(|i| universe[i].clone()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn estimate_bounds_enumeration(instrs in tiny_block(), mask in any::<u64>()) {
        let kb = IsaKb::tiny();
        let g = build_graph(&kb, &BasicBlock::new(instrs)).unwrap();
        let all = extract_features(&g);
        let preserve = FeatureSet(all.iter().enumerate().filter(|(i, _)| mask >> (i % 64) & 1 == 1).map(|(_, f)| f.clone()).collect());
        let est = estimate_space_size(&kb, &g, &preserve).unwrap().count();
        let count = enumerate_space(&kb, &g, &preserve, 1_000_000).unwrap().len();
        prop_assert!(est.round() as usize >= count, "{est} < {count}");
        prop_assert!(count >= 1);
    }

    #[test]
    fn enumerated_blocks_keep_preserved_features(instrs in tiny_block(), mask in any::<u64>()) {
        let kb = IsaKb::tiny();
        let g = build_graph(&kb, &BasicBlock::new(instrs)).unwrap();
        let all = extract_features(&g);
        let preserve = FeatureSet(all.iter().enumerate().filter(|(i, _)| mask >> (i % 64) & 1 == 1).map(|(_, f)| f.clone()).collect());
        for bb in enumerate_space(&kb, &g, &preserve, 1_000_000).unwrap() {
            for i in &bb.instructions {
                prop_assert!(kb.validate_instruction(i));
            }
            if preserve.contains_num_insts() {
                prop_assert_eq!(bb.len(), g.len());
            }
        }
    }
}
