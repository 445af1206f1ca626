//! Independent oracles shared by the integration tests and the acceptance
//! suite.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use comet_core::asm::{parse_block, BasicBlock, Instruction, MemOperand, Operand};
use comet_core::cost::{CostModel, TargetInterval};
use comet_core::graph::{build_graph, build_graph_owned, extract_features, feature_present, BlockGraph, DepKind, EdgePolicy, FeatureSet, GraphOptions};
use comet_core::isa::IsaKb;
use comet_core::perturb::{enumerate_space, PerturbConfig, PerturbPlan, Sampler, VertexChoice, Decision};
use comet_core::rng::stream;
use rand::Rng;
use rayon::prelude::*;

// ---------------------------------------------------------------------------
// KL bounds: brute-force grid search.

pub fn kl_ref(p: f64, q: f64) -> f64 {
    let term = |x: f64, y: f64| {
        if x == 0.0 {
            0.0
        } else if y == 0.0 {
            f64::INFINITY
        } else {
            x * (x / y).ln()
        }
    };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

const GRID: usize = 10_000;

/// Largest grid point q >= p̂ with n·kl(p̂, q) <= level.
pub fn grid_ucb(successes: u64, trials: u64, level: f64) -> f64 {
    let p = successes as f64 / trials as f64;
    let n = trials as f64;
    (0..=GRID)
        .map(|k| k as f64 / GRID as f64)
        .filter(|&q| q >= p && n * kl_ref(p, q) <= level)
        .fold(p, f64::max)
}

/// Smallest grid point q <= p̂ with n·kl(p̂, q) <= level.
pub fn grid_lcb(successes: u64, trials: u64, level: f64) -> f64 {
    let p = successes as f64 / trials as f64;
    let n = trials as f64;
    (0..=GRID)
        .map(|k| k as f64 / GRID as f64)
        .filter(|&q| q <= p && n * kl_ref(p, q) <= level)
        .fold(p, f64::min)
}

/// 10 trial counts × 5 success fractions × 4 levels.
pub fn kl_grid_cases() -> Vec<(u64, u64, f64)> {
    let mut out = Vec::new();
    for n in [1u64, 3, 10, 30, 100, 300, 1000, 3000, 10_000, 50_000] {
        for frac in [0.0, 0.25, 0.5, 0.7, 1.0] {
            for level in [0.1, 1.0, 3.0, 10.0] {
                out.push(((frac * n as f64).round() as u64, n, level));
            }
        }
    }
    out
}

/// Number of grid cases where either bound is off by more than 1e-3 or
/// fails to bracket p̂, with a description of the first few.
pub fn kl_grid_check() -> (usize, Vec<String>) {
    let cases = kl_grid_cases();
    let bad: Vec<String> = cases
        .par_iter()
        .filter_map(|&(s, n, level)| {
            let p = s as f64 / n as f64;
            let (ucb, lcb) = (comet_core::kl::kl_ucb(s, n, level), comet_core::kl::kl_lcb(s, n, level));
            let (gu, gl) = (grid_ucb(s, n, level), grid_lcb(s, n, level));
            let ok = (ucb - gu).abs() <= 1e-3 && (lcb - gl).abs() <= 1e-3 && lcb <= p && p <= ucb;
            (!ok).then(|| format!("({s}, {n}, {level}): ucb {ucb} vs {gu}, lcb {lcb} vs {gl}"))
        })
        .collect();
    (cases.len(), bad)
}

// ---------------------------------------------------------------------------
// Hazards: hand-written access semantics of the tiny ISA and a pairwise scan.

const TINY_REGS: [&str; 3] = ["rax", "rbx", "rcx"];

fn mem(base: &str) -> Operand {
    Operand::Memory(MemOperand { base: Some(base.to_string()), index: None, scale: 1, displacement: 0, width_bits: 64 })
}

fn reg(name: &str) -> Operand {
    Operand::Register(name.to_string())
}

/// Every isa_tiny instruction over rax/rbx/rcx with `[reg]` addressing.
pub fn tiny_universe() -> Vec<Instruction> {
    let mut out = Vec::new();
    for a in TINY_REGS {
        for b in TINY_REGS {
            out.push(Instruction::new("mov", vec![reg(a), reg(b)]));
            out.push(Instruction::new("mov", vec![reg(a), mem(b)]));
            out.push(Instruction::new("mov", vec![mem(a), reg(b)]));
            out.push(Instruction::new("add", vec![reg(a), reg(b)]));
            out.push(Instruction::new("sub", vec![reg(a), reg(b)]));
            out.push(Instruction::new("lea", vec![reg(a), mem(b)]));
        }
        out.push(Instruction::new("inc", vec![reg(a)]));
        out.push(Instruction::new("dec", vec![reg(a)]));
    }
    out
}

/// (reads, writes) of a tiny instruction, from the instruction semantics.
pub fn tiny_access(instr: &Instruction) -> (BTreeSet<String>, BTreeSet<String>) {
    let (mut r, mut w) = (BTreeSet::new(), BTreeSet::new());
    let mut touch = |op: &Operand, read: bool, write: bool, value: bool| match op {
        Operand::Register(name) => {
            if read {
                r.insert(name.clone());
            }
            if write {
                w.insert(name.clone());
            }
        }
        Operand::Memory(m) => {
            let base = m.base.clone().unwrap();
            r.insert(base.clone());
            if value {
                let key = format!("[{base}]");
                if read {
                    r.insert(key.clone());
                }
                if write {
                    w.insert(key);
                }
            }
        }
        Operand::Immediate { .. } => {}
    };
    let ops = &instr.operands;
    match instr.mnemonic.as_str() {
        "mov" => {
            touch(&ops[0], false, true, true);
            touch(&ops[1], true, false, true);
        }
        "add" | "sub" => {
            touch(&ops[0], true, true, true);
            touch(&ops[1], true, false, true);
        }
        "inc" | "dec" => touch(&ops[0], true, true, true),
        "lea" => {
            touch(&ops[0], false, true, true);
            touch(&ops[1], true, false, false);
        }
        other => panic!("not a tiny mnemonic: {other}"),
    }
    (r, w)
}

pub type Edge = (usize, usize, DepKind, String);

/// Hazard edges by checking every ordered pair; with `nearest`, an edge is
/// dropped when an instruction in between conflicts the same way.
pub fn oracle_edges(access: &[&(BTreeSet<String>, BTreeSet<String>)], nearest: bool) -> Vec<Edge> {
    let mut out = Vec::new();
    for i in 0..access.len() {
        for j in i + 1..access.len() {
            for kind in [DepKind::Raw, DepKind::War, DepKind::Waw] {
                let (first, second) = match kind {
                    DepKind::Raw => (&access[i].1, &access[j].0),
                    DepKind::War => (&access[i].0, &access[j].1),
                    DepKind::Waw => (&access[i].1, &access[j].1),
                };
                for res in first.intersection(second) {
                    let shadowed = nearest
                        && (i + 1..j).any(|k| match kind {
                            DepKind::Raw | DepKind::Waw => access[k].1.contains(res),
                            DepKind::War => access[k].0.contains(res),
                        });
                    if !shadowed {
                        out.push((i + 1, j + 1, kind, res.clone()));
                    }
                }
            }
        }
    }
    out
}

/// Compare `build_graph` against the oracle on every tiny block of exactly
/// `len` instructions. Returns (blocks checked, first mismatches).
pub fn hazard_exhaustive(kb: &IsaKb, len: u32, policy: EdgePolicy) -> (u64, Vec<String>) {
    let universe = tiny_universe();
    let access: Vec<_> = universe.iter().map(tiny_access).collect();
    let u = universe.len() as u64;
    let total = u.pow(len);
    let options = GraphOptions { policy, ..GraphOptions::for_kb(kb) };
    let bad: Vec<String> = (0..total)
        .into_par_iter()
        .filter_map(|mut code| {
            let mut idx = Vec::with_capacity(len as usize);
            for _ in 0..len {
                idx.push((code % u) as usize);
                code /= u;
            }
            let bb = BasicBlock::new(idx.iter().map(|&k| universe[k].clone()).collect());
            let text = || idx.iter().map(|&k| universe[k].to_string()).collect::<Vec<_>>().join("; ");
            let g = match build_graph_owned(kb, bb, options) {
                Ok(g) => g,
                Err(e) => return Some(format!("{}\n {e}", text())),
            };
            let got: Vec<(usize, usize, DepKind, &str)> =
                g.dep_edges.iter().map(|e| (e.src, e.dst, e.kind, &*e.resource)).collect();
            let acc: Vec<_> = idx.iter().map(|&k| &access[k]).collect();
            let want = oracle_edges(&acc, policy == EdgePolicy::Nearest);
            let same = got.len() == want.len()
                && got.iter().zip(&want).all(|(a, b)| a.0 == b.0 && a.1 == b.1 && a.2 == b.2 && a.3 == b.3);
            (!same).then(|| format!("{}\n got {got:?}\n want {want:?}", text()))
        })
        .collect();
    (total, bad.into_iter().take(5).collect())
}

/// Edges the Case Study 2 listing must contain, by construction of its
/// operands: `mov ecx, edx; xor edx, edx; lea rax, [rcx + rax - 1]; div rcx;
/// mov rdx, rcx; imul rax, rcx`.
pub const CS2_EDGES: &[(usize, usize, DepKind, &str)] = &[
    (3, 6, DepKind::Raw, "rax"),
    (3, 4, DepKind::Raw, "rax"),
    (4, 6, DepKind::Raw, "rax"),
    (2, 4, DepKind::Raw, "rdx"),
    (1, 3, DepKind::Raw, "rcx"),
    (1, 4, DepKind::Raw, "rcx"),
    (1, 2, DepKind::War, "rdx"),
    (3, 4, DepKind::War, "rax"),
    (4, 5, DepKind::Waw, "rdx"),
    (2, 5, DepKind::Waw, "rdx"),
];

// ---------------------------------------------------------------------------
// Perturbation distribution: exact enumeration of the sampler's choices.

/// Every decision the sampler can draw, with its probability.
pub fn decision_distribution(s: &Sampler) -> Vec<(f64, Decision)> {
    let plan = s.plan;
    let cfg = &plan.cfg;
    let n = plan.graph.len();

    let mut vertex_dists: Vec<(f64, Vec<VertexChoice>, usize)> = vec![(1.0, Vec::new(), 0)];
    for i in 0..n {
        let mut next = Vec::new();
        for (p, choices, deleted) in vertex_dists {
            let mut push = |q: f64, c: VertexChoice, d: usize| {
                if q > 0.0 {
                    let mut v = choices.clone();
                    v.push(c);
                    next.push((p * q, v, d));
                }
            };
            if s.protected[i] {
                push(1.0, VertexChoice::Keep, deleted);
                continue;
            }
            push(cfg.p_inst_retain, VertexChoice::Keep, deleted);
            let rest = 1.0 - cfg.p_inst_retain;
            let (p_del, p_rep) = if s.allow_delete && deleted + 1 < n {
                (rest * cfg.p_delete, rest * (1.0 - cfg.p_delete))
            } else {
                (0.0, rest)
            };
            push(p_del, VertexChoice::Delete, deleted + 1);
            let cands = plan.replacements[i].len();
            if cands == 0 {
                push(p_rep, VertexChoice::Keep, deleted);
            } else {
                for k in 0..cands {
                    push(p_rep / cands as f64, VertexChoice::Replace(k), deleted);
                }
            }
        }
        vertex_dists = next;
    }

    // Edge outcomes reduced to (locked edges, requested groups).
    let mut edge_dists: BTreeMap<(Vec<bool>, Vec<bool>), f64> = BTreeMap::new();
    edge_dists.insert((vec![false; plan.graph.dep_edges.len()], vec![false; plan.groups.len()]), 1.0);
    for e in 0..plan.graph.dep_edges.len() {
        if s.preserved_edges[e] {
            continue;
        }
        let mut next = BTreeMap::new();
        for ((locked, requested), p) in edge_dists {
            let mut add = |q: f64, l: Vec<bool>, r: Vec<bool>| {
                if q > 0.0 {
                    *next.entry((l, r)).or_insert(0.0) += p * q;
                }
            };
            let mut l = locked.clone();
            l[e] = true;
            add(cfg.p_dep_explicit_retain, l, requested.clone());
            let open = 1.0 - cfg.p_dep_explicit_retain;
            add(open * cfg.p_dep_retain, locked.clone(), requested.clone());
            let sides = &plan.edge_groups[e];
            if sides.is_empty() {
                add(open * (1.0 - cfg.p_dep_retain), locked.clone(), requested.clone());
            } else {
                for &g in sides {
                    let mut r = requested.clone();
                    r[g] = true;
                    add(open * (1.0 - cfg.p_dep_retain) / sides.len() as f64, locked.clone(), r);
                }
            }
        }
        edge_dists = next;
    }

    let mut out = Vec::new();
    for (pv, vertices, _) in &vertex_dists {
        for ((locked, requested), pe) in &edge_dists {
            let mut partial: Vec<(f64, Vec<Option<usize>>)> = vec![(pv * pe, Vec::new())];
            for (gid, group) in plan.groups.iter().enumerate() {
                let fires = requested[gid]
                    && !s.frozen[gid]
                    && !group.alternatives.is_empty()
                    && vertices[group.vertex] != VertexChoice::Delete
                    && !group.touching.iter().any(|&e| locked[e]);
                let mut next = Vec::new();
                for (p, r) in partial {
                    if fires {
                        let k = group.alternatives.len();
                        for a in 0..k {
                            let mut r2 = r.clone();
                            r2.push(Some(a));
                            next.push((p / k as f64, r2));
                        }
                    } else {
                        let mut r2 = r;
                        r2.push(None);
                        next.push((p, r2));
                    }
                }
                partial = next;
            }
            for (p, renames) in partial {
                out.push((p, Decision { vertices: vertices.clone(), renames }));
            }
        }
    }
    out
}

/// Exact precision of `preserve` under the sampler's accept/retry scheme:
/// mass of accepted decisions predicted inside `target` over accepted mass.
/// Also returns the accepted mass.
pub fn exact_precision(model: &dyn CostModel, kb: &IsaKb, g: &BlockGraph, preserve: &FeatureSet, target: TargetInterval, cfg: PerturbConfig) -> (f64, f64) {
    let plan = PerturbPlan::new(kb, g, cfg);
    let s = plan.sampler(preserve).unwrap();
    let (mut accepted, mut hit) = (0.0, 0.0);
    for (p, d) in decision_distribution(&s) {
        if let Ok(r) = s.evaluate(&d) {
            accepted += p;
            if target.contains(model.predict_graph(&r.graph).unwrap()) {
                hit += p;
            }
        }
    }
    (hit / accepted, accepted)
}

/// Exact probability that an unconstrained perturbation keeps every
/// feature of `features`.
pub fn exact_coverage(kb: &IsaKb, g: &BlockGraph, features: &FeatureSet, cfg: PerturbConfig) -> f64 {
    let plan = PerturbPlan::new(kb, g, cfg);
    let s = plan.sampler(&FeatureSet::new()).unwrap();
    let (mut accepted, mut hit) = (0.0, 0.0);
    for (p, d) in decision_distribution(&s) {
        if let Ok(r) = s.evaluate(&d) {
            accepted += p;
            if features.iter().all(|f| feature_present(g, &r.graph, &r.vertex_map, f)) {
                hit += p;
            }
        }
    }
    hit / accepted
}

// ---------------------------------------------------------------------------
// Monotonicity of the perturbation space in the preserve set.

/// Seeded random subset of `of`, each element kept with probability `keep`.
pub fn random_subset<R: Rng>(rng: &mut R, of: &FeatureSet, keep: f64) -> FeatureSet {
    FeatureSet(of.iter().filter(|_| rng.gen_bool(keep)).cloned().collect())
}

/// Draw `pairs` nested preserve sets F1 ⊆ F2 over the given tiny blocks and
/// check that every block of Π̂(F2) is in Π̂(F1). Returns the violations.
pub fn monotonicity_check(kb: &IsaKb, blocks: &[&str], pairs: usize, seed: u64) -> Vec<String> {
    let mut violations = Vec::new();
    for k in 0..pairs {
        let mut rng = stream(seed, &[k as u64]);
        let text = blocks[k % blocks.len()];
        let g = build_graph(kb, &parse_block(text, kb).unwrap()).unwrap();
        let all = extract_features(&g);
        let f2 = random_subset(&mut rng, &all, 0.5);
        let f1 = random_subset(&mut rng, &f2, 0.5);
        let space = |f: &FeatureSet| -> BTreeSet<String> {
            enumerate_space(kb, &g, f, 1_000_000).unwrap().iter().map(|b| b.render()).collect()
        };
        let (s1, s2) = (space(&f1), space(&f2));
        if let Some(extra) = s2.difference(&s1).next() {
            violations.push(format!("{text:?}: F1 {f1} F2 {f2}: {extra:?} only under F2"));
        }
    }
    violations
}

// ---------------------------------------------------------------------------
// Crude model: hand-derived predictions on the full KB with Haswell costs.

/// (block, expected crude prediction). Derivations use costs_hsw.csv.
pub const CRUDE_SPOTS: &[(&str, f64)] = &[
    // n/4 = 0.25, add = 0.25.
    ("add rax, rbx", 0.25),
    // div = 21.
    ("div rcx", 21.0),
    // RAW(1,2,rax): imul + imul = 2.
    ("imul rax, rbx\nimul rax, rcx", 2.0),
    // No hazards; n/4 = 0.5 beats mov/add at 0.25.
    ("mov rax, rbx\nadd rcx, rdx", 0.5),
    // Eight independent movs: n/4 = 2.
    ("mov rax, 1\nmov rbx, 1\nmov rcx, 1\nmov rdx, 1\nmov rsi, 1\nmov rdi, 1\nmov r8, 1\nmov r9, 1", 2.0),
    // RAW(1,2,xmm0): vdivss + vmulss = 7 + 0.5.
    ("vdivss xmm0, xmm1, xmm2\nvmulss xmm3, xmm0, xmm0", 7.5),
    // idiv writes rax/rdx, div reads them: 39 + 21.
    ("idiv rbx\ndiv rcx", 60.0),
    // RAW(1,2,rax) = 0.5 + 0.25 and n/4 = 0.75 tie; RAW through [rdi] is 0.5.
    ("lea rax, [rbx + 8]\nmov qword ptr [rdi], rax\nmov rcx, qword ptr [rdi]", 0.75),
    // RAW(2,3) and RAW(3,4) are 1.5, but edges span the rewrite at 3:
    // RAW(2,4,xmm0) = movss + addss = 2.
    ("xor rax, rax\nmovss xmm0, dword ptr [rsi]\nmulss xmm0, xmm1\naddss xmm2, xmm0", 2.0),
    // Case Study 2: RAW(4,6,rax) = div + imul = 21 + 1.
    (comet_core::fixtures::CASE_STUDY_2, 22.0),
];

// ---------------------------------------------------------------------------
// Perturbation soundness.

#[derive(Debug, Default)]
pub struct Soundness {
    pub draws: usize,
    pub unpreserved: usize,
    pub invalid: usize,
    pub identity_draws: usize,
    pub identity_failures: usize,
    pub errors: Vec<String>,
}

/// `draws` seeded perturbations spread over `blocks`, each preserving a
/// random subset of the block's features, plus 20 draws per block that
/// preserve every feature and must return the block unchanged.
pub fn soundness_check(kb: &IsaKb, blocks: &[BasicBlock], draws: usize, seed: u64) -> Soundness {
    let graphs: Vec<BlockGraph> = blocks.iter().map(|b| build_graph(kb, b).unwrap()).collect();
    let plans: Vec<PerturbPlan> = graphs.iter().map(|g| PerturbPlan::new(kb, g, PerturbConfig::default())).collect();
    let mut out = Soundness { draws, ..Default::default() };
    for k in 0..draws {
        let (g, plan) = (&graphs[k % graphs.len()], &plans[k % plans.len()]);
        let mut rng = stream(seed, &[k as u64]);
        let keep = [0.0, 0.1, 0.3][k % 3];
        let preserve = random_subset(&mut rng, &extract_features(g), keep);
        let r = match plan.sampler(&preserve).and_then(|s| s.sample(&mut rng)) {
            Ok(r) => r,
            Err(e) => {
                out.unpreserved += 1;
                out.errors.push(format!("{}: {e}", g.block.render()));
                continue;
            }
        };
        if !preserve.iter().all(|f| feature_present(g, &r.graph, &r.vertex_map, f)) {
            out.unpreserved += 1;
            out.errors.push(format!("{} lost part of {preserve}", g.block.render()));
        }
        let reparsed = parse_block(&r.block.render(), kb);
        if !r.block.instructions.iter().all(|i| kb.validate_instruction(i)) || reparsed.as_ref() != Ok(&r.block) {
            out.invalid += 1;
            out.errors.push(format!("invalid perturbation {:?}", r.block.render()));
        }
    }
    for (b, (g, plan)) in graphs.iter().zip(&plans).enumerate() {
        let sampler = plan.sampler(&extract_features(g)).unwrap();
        for k in 0..20u64 {
            out.identity_draws += 1;
            let r = sampler.sample(&mut stream(seed ^ 0x1D, &[b as u64, k])).unwrap();
            if r.block != g.block || !r.ops_applied.is_empty() {
                out.identity_failures += 1;
                out.errors.push(format!("identity broken for {:?}", g.block.render()));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Space size against enumeration.

/// Blocks whose estimate differs from the enumerated count under ∅, as
/// (text, estimate, count).
pub fn space_mismatches(kb: &IsaKb, blocks: &[&str]) -> Vec<(String, f64, usize)> {
    let mut out = Vec::new();
    for text in blocks {
        let g = build_graph(kb, &parse_block(text, kb).unwrap()).unwrap();
        let none = FeatureSet::new();
        let est = comet_core::perturb::estimate_space_size(kb, &g, &none).unwrap().count();
        let count = enumerate_space(kb, &g, &none, 1_000_000).unwrap().len();
        // The estimate is carried in log10; round away the float noise.
        if est.round() as usize != count {
            out.push((text.to_string(), est, count));
        }
    }
    out
}
