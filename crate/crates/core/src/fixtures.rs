//! Deterministic synthetic fixture blocks.
//!
//! The generator draws blocks of 4 to 10 instructions for each of six
//! categories from a fixed seed. A block's category is a function of its
//! contents (see [`classify`]), and the generator redraws until the two
//! agree. Two register-pool styles give the `source` label: `chain` draws
//! from three registers per class and yields dense dependencies, `spread`
//! draws from eight.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::asm::{BasicBlock, Operand};
use crate::eval::DatasetRecord;
use crate::isa::IsaKb;
use crate::rng::stream;

pub const FIXTURE_SEED: u64 = 0x00C0_FFEE;
pub const CATEGORIES: [&str; 6] = ["scalar", "vector", "scalar/vector", "load", "store", "load/store"];
pub const PER_CATEGORY: usize = 9;

/// Small isa_tiny blocks whose perturbation spaces contain no rendering
/// collisions, so the space-size estimate is exact on them.
pub const TINY_FIXTURES: &[&str] = &[
    "inc rax",
    "mov rax, rbx",
    "mov qword ptr [rcx], rbx",
    "lea rax, [rbx]",
    "mov rax, rax\nmov qword ptr [rax], rax",
    "mov rax, rax\nmov rax, qword ptr [rbx]",
    "add rax, rax\nmov rax, qword ptr [rax]",
    "sub rax, rax\nmov qword ptr [rbx], rax",
    "add rax, rax\nmov rcx, qword ptr [rax]",
    "mov rax, rax\nadd rbx, rbx\nsub rcx, rcx",
    "add rax, rax\nmov rax, rbx\nsub rax, rcx",
    "lea rax, [rbx]\nlea rcx, [rbx]\ninc rbx",
    "inc rax\nlea rbx, [rax]\nlea rcx, [rax]",
];

/// Seven-instruction vector block used for space-size magnitude checks.
pub const VDIVSS_BLOCK: &str = "vdivss xmm0, xmm0, xmm6
vmulss xmm7, xmm0, xmm0
vxorps xmm0, xmm0, xmm5
vaddss xmm7, xmm7, xmm3
vmulss xmm6, xmm6, xmm7
vdivss xmm6, xmm3, xmm6
vmulss xmm0, xmm6, xmm0
";

pub const CASE_STUDY_1: &str = "lea rdx, [rax + 1]
mov qword ptr [rdi + 24], rdx
mov byte ptr [rax], 80
mov rsi, qword ptr [r14 + 32]
mov rdi, rbp
";

pub const CASE_STUDY_2: &str = "mov ecx, edx
xor edx, edx
lea rax, [rcx + rax - 1]
div rcx
mov rdx, rcx
imul rax, rcx
";

const GPR_CHAIN: &[&str] = &["rax", "rbx", "rcx"];
const GPR_SPREAD: &[&str] = &["rax", "rbx", "rcx", "rdx", "rsi", "r8", "r9", "r10"];
const VEC_CHAIN: &[&str] = &["xmm0", "xmm1", "xmm2"];
const VEC_SPREAD: &[&str] = &["xmm0", "xmm1", "xmm2", "xmm3", "xmm4", "xmm5", "xmm6", "xmm7"];
const BASES: &[&str] = &["rdi", "r12", "r13"];

#[derive(Clone, Copy)]
struct Pools {
    gpr: &'static [&'static str],
    vec: &'static [&'static str],
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Scalar,
    Vector,
    Load,
    Store,
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).unwrap()
}

fn mem<R: Rng>(rng: &mut R) -> String {
    let base = pick(rng, BASES);
    let disp = 8 * rng.gen_range(0..6);
    if rng.gen_bool(0.2) {
        format!("[{base} + rcx*8 + {}]", disp + 8)
    } else if disp == 0 {
        format!("[{base}]")
    } else {
        format!("[{base} + {disp}]")
    }
}

fn scalar<R: Rng>(rng: &mut R, p: Pools) -> String {
    let mut r = || pick(rng, p.gpr);
    let (a, b) = (r(), r());
    match rng.gen_range(0..100) {
        0..=34 => format!("{} {a}, {b}", pick(rng, &["mov", "add", "sub", "and", "or", "xor", "imul", "cmove"])),
        35..=54 => format!("{} {a}, {}", pick(rng, &["add", "sub", "and", "or", "xor", "mov"]), rng.gen_range(1..64)),
        55..=64 => format!("{} {a}, {}", pick(rng, &["shl", "shr", "sar"]), rng.gen_range(1..6)),
        65..=76 => format!("{} {a}", pick(rng, &["inc", "dec", "neg", "not"])),
        77..=84 => format!("lea {a}, [{b} + {}*{} + {}]", pick(rng, p.gpr), pick(rng, &["1", "2", "4", "8"]), rng.gen_range(1..32)),
        85..=90 => format!("imul {a}, {b}, {}", rng.gen_range(3..100)),
        91..=95 => format!("popcnt {a}, {b}"),
        _ => format!("{} {}", pick(rng, &["div", "idiv"]), pick(rng, &["rbx", "rcx", "rsi"])),
    }
}

fn vector<R: Rng>(rng: &mut R, p: Pools) -> String {
    let mut x = || pick(rng, p.vec);
    let (a, b, c) = (x(), x(), x());
    match rng.gen_range(0..100) {
        0..=44 => format!(
            "{} {a}, {b}, {c}",
            pick(rng, &["vaddss", "vsubss", "vmulss", "vaddsd", "vmulsd", "vaddps", "vmulps", "vxorps"])
        ),
        45..=89 => format!("{} {a}, {b}", pick(rng, &["addss", "subss", "mulss", "addsd", "mulsd", "xorps", "pxor", "movaps"])),
        90..=94 => format!("{} {a}, {b}, {c}", pick(rng, &["vdivss", "vdivsd", "vsqrtss"])),
        _ => format!("divss {a}, {b}"),
    }
}

fn load<R: Rng>(rng: &mut R, p: Pools) -> String {
    let (r, x, m) = (pick(rng, p.gpr), pick(rng, p.vec), mem(rng));
    match rng.gen_range(0..6) {
        0 | 1 => format!("mov {r}, qword ptr {m}"),
        2 => format!("{} {r}, qword ptr {m}", pick(rng, &["add", "sub", "and", "xor"])),
        3 => format!("movss {x}, dword ptr {m}"),
        4 => format!("{} {x}, {x}, dword ptr {m}", pick(rng, &["vaddss", "vmulss"])),
        _ => format!("movaps {x}, xmmword ptr {m}"),
    }
}

fn store<R: Rng>(rng: &mut R, p: Pools) -> String {
    let (r, x, m) = (pick(rng, p.gpr), pick(rng, p.vec), mem(rng));
    match rng.gen_range(0..5) {
        0 | 1 => format!("mov qword ptr {m}, {r}"),
        2 => format!("mov qword ptr {m}, {}", rng.gen_range(0..256)),
        3 => format!("movss dword ptr {m}, {x}"),
        _ => format!("movaps xmmword ptr {m}, {x}"),
    }
}

fn kinds_for(category: &str) -> &'static [Kind] {
    match category {
        "scalar" => &[Kind::Scalar],
        "vector" => &[Kind::Vector],
        "scalar/vector" => &[Kind::Scalar, Kind::Vector],
        "load" => &[Kind::Scalar, Kind::Vector, Kind::Load],
        "store" => &[Kind::Scalar, Kind::Vector, Kind::Store],
        "load/store" => &[Kind::Scalar, Kind::Vector, Kind::Load, Kind::Store],
        other => panic!("unknown category {other}"),
    }
}

/// Category of a block from what it touches: memory reads and writes
/// first, then general-purpose versus vector registers.
pub fn classify(kb: &IsaKb, bb: &BasicBlock) -> &'static str {
    let (mut loads, mut stores, mut gpr, mut vec) = (false, false, false, false);
    for instr in &bb.instructions {
        let form = kb.resolve_form(instr).expect("fixture instructions validate");
        for (op, slot) in instr.operands.iter().zip(&form.slots) {
            match op {
                Operand::Memory(_) if !slot.address_only => {
                    loads |= slot.access.reads();
                    stores |= slot.access.writes();
                }
                Operand::Register(r) => {
                    if kb.register(r).is_some_and(|s| s.width_bits >= 128) {
                        vec = true;
                    } else {
                        gpr = true;
                    }
                }
                _ => {}
            }
        }
    }
    match (loads, stores) {
        (true, true) => "load/store",
        (true, false) => "load",
        (false, true) => "store",
        _ => match (gpr, vec) {
            (true, true) => "scalar/vector",
            (false, true) => "vector",
            _ => "scalar",
        },
    }
}

/// The bundled fixture dataset: `PER_CATEGORY` blocks per category.
pub fn generate_fixtures(kb: &IsaKb) -> Vec<DatasetRecord> {
    let mut out = Vec::new();
    for (ci, &category) in CATEGORIES.iter().enumerate() {
        for k in 0..PER_CATEGORY {
            let style = if k % 2 == 0 { "chain" } else { "spread" };
            let pools = if style == "chain" {
                Pools { gpr: GPR_CHAIN, vec: VEC_CHAIN }
            } else {
                Pools { gpr: GPR_SPREAD, vec: VEC_SPREAD }
            };
            let mut rng = stream(FIXTURE_SEED, &[ci as u64, k as u64]);
            let asm = loop {
                let len = rng.gen_range(4..=10);
                let kinds = kinds_for(category);
                let lines: Vec<String> = (0..len)
                    .map(|_| match *kinds.choose(&mut rng).unwrap() {
                        Kind::Scalar => scalar(&mut rng, pools),
                        Kind::Vector => vector(&mut rng, pools),
                        Kind::Load => load(&mut rng, pools),
                        Kind::Store => store(&mut rng, pools),
                    })
                    .collect();
                match crate::asm::parse_block(&lines.join("\n"), kb) {
                    Ok(bb) if classify(kb, &bb) == category => break lines,
                    _ => continue,
                }
            };
            out.push(DatasetRecord {
                id: format!("{}-{:02}", category.replace('/', "-"), k),
                asm,
                measured: Default::default(),
                source: Some(style.to_string()),
                category: Some(category.to_string()),
            });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}
