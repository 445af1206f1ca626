//! Explaining throughput predictions of x86 basic-block cost models.

pub mod asm;
pub mod cost;
pub mod eval;
pub mod explain;
pub mod fixtures;
pub mod graph;
pub mod perturb;
pub mod rng;
pub mod isa;
pub mod kl;

pub mod data {
    pub const ISA_CORE: &str = include_str!("../data/isa_core.json");
    pub const ISA_TINY: &str = include_str!("../data/isa_tiny.json");
    pub const COSTS_HSW: &str = include_str!("../data/costs_hsw.csv");
    pub const COSTS_SKL: &str = include_str!("../data/costs_skl.csv");
    pub const COSTS_TINY: &str = include_str!("../data/costs_tiny.csv");
    pub const FIXTURES: &str = include_str!("../data/fixtures.jsonl");
    pub const CASE_STUDIES: &str = include_str!("../data/casestudies.jsonl");
}
