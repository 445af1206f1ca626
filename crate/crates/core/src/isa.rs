//! Loadable x86 instruction-set knowledge base.
//!
//! The KB is plain JSON: a register table grouped into alias families and a
//! list of opcode forms. Several entries may share a mnemonic; each entry is
//! one accepted operand signature for that mnemonic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{Instruction, Operand};

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot read KB file {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("KB schema violation: {0}")]
    Schema(String),
    #[error("KB entry `{entry}` references unknown register `{register}`")]
    DanglingRegister { entry: String, register: String },
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("unknown register `{0}`")]
    UnknownRegister(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperandKind {
    Register,
    Memory,
    Immediate,
}

impl fmt::Display for OperandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OperandKind::Register => "register",
            OperandKind::Memory => "memory",
            OperandKind::Immediate => "immediate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Access {
    Read,
    Write,
    ReadWrite,
}

impl Access {
    pub fn reads(self) -> bool {
        matches!(self, Access::Read | Access::ReadWrite)
    }

    pub fn writes(self) -> bool {
        matches!(self, Access::Write | Access::ReadWrite)
    }
}

/// One explicit operand position of an opcode form.
///
/// `address_only` marks memory slots whose address is computed but never
/// dereferenced (`lea`). Such slots only match other address-only slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperandSlot {
    pub kind: OperandKind,
    pub width_bits: u16,
    pub access: Access,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub address_only: bool,
}

/// Kind and width of a concrete operand, used to match it against slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OperandShape {
    pub kind: OperandKind,
    pub width_bits: u16,
    pub address_only: bool,
}

impl OperandShape {
    pub fn register(width_bits: u16) -> Self {
        OperandShape { kind: OperandKind::Register, width_bits, address_only: false }
    }

    pub fn memory(width_bits: u16) -> Self {
        OperandShape { kind: OperandKind::Memory, width_bits, address_only: false }
    }

    pub fn immediate(width_bits: u16) -> Self {
        OperandShape { kind: OperandKind::Immediate, width_bits, address_only: false }
    }
}

impl OperandSlot {
    /// Immediates fit any slot at least as wide as their minimal encoding;
    /// registers and memory must match exactly.
    pub fn accepts(&self, shape: &OperandShape) -> bool {
        if self.kind != shape.kind {
            return false;
        }
        match self.kind {
            OperandKind::Immediate => shape.width_bits <= self.width_bits,
            OperandKind::Register => shape.width_bits == self.width_bits,
            OperandKind::Memory => {
                shape.width_bits == self.width_bits && shape.address_only == self.address_only
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpcodeForm {
    pub slots: Vec<OperandSlot>,
    pub implicit_reads: Vec<String>,
    pub implicit_writes: Vec<String>,
    pub throughput: BTreeMap<String, f64>,
}

impl OpcodeForm {
    pub fn matches(&self, shapes: &[OperandShape]) -> bool {
        self.slots.len() == shapes.len()
            && self.slots.iter().zip(shapes).all(|(slot, shape)| slot.accepts(shape))
    }

    /// Like `matches`, but a parsed memory operand may land in an
    /// address-only slot: the text of `lea rax, [rbx]` does not say which.
    pub fn matches_operands(&self, shapes: &[OperandShape]) -> bool {
        self.slots.len() == shapes.len()
            && self.slots.iter().zip(shapes).all(|(slot, shape)| {
                let shape = OperandShape { address_only: slot.address_only, ..*shape };
                slot.accepts(&shape)
            })
    }

    /// Operand shapes as seen through this form's slots.
    pub fn slot_shapes(&self, shapes: &[OperandShape]) -> Vec<OperandShape> {
        self.slots
            .iter()
            .zip(shapes)
            .map(|(slot, shape)| OperandShape { address_only: slot.address_only, ..*shape })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpcodeSpec {
    pub mnemonic: String,
    pub bb_valid: bool,
    pub forms: Vec<OpcodeForm>,
}

impl OpcodeSpec {
    pub fn form_for(&self, shapes: &[OperandShape]) -> Option<&OpcodeForm> {
        self.forms.iter().find(|form| form.matches(shapes))
    }

    pub fn form_for_operands(&self, shapes: &[OperandShape]) -> Option<&OpcodeForm> {
        self.forms.iter().find(|form| form.matches_operands(shapes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterSpec {
    pub name: String,
    pub width_bits: u16,
    pub family: String,
    pub substitutable: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOpcode {
    mnemonic: String,
    bb_valid: bool,
    slots: Vec<OperandSlot>,
    #[serde(default)]
    implicit_reads: Vec<String>,
    #[serde(default)]
    implicit_writes: Vec<String>,
    #[serde(default)]
    throughput: BTreeMap<String, f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKb {
    version: String,
    #[serde(default)]
    track_flags: bool,
    registers: Vec<RegisterSpec>,
    opcodes: Vec<RawOpcode>,
}

/// Name of the alias family that carries the flags register.
pub const FLAGS_FAMILY: &str = "rflags";

#[derive(Debug, Clone)]
pub struct IsaKb {
    pub version: String,
    /// When false, flag reads and writes are dropped from dependency analysis.
    pub track_flags: bool,
    opcodes: BTreeMap<String, OpcodeSpec>,
    registers: BTreeMap<String, RegisterSpec>,
    families: BTreeMap<String, Vec<String>>,
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<IsaKb, KbError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| KbError::Io { path: path.display().to_string(), source })?;
    IsaKb::from_json(&text)
}

impl IsaKb {
    pub fn from_json(text: &str) -> Result<Self, KbError> {
        if text.trim().is_empty() {
            return Err(KbError::Schema("empty KB document".into()));
        }
        let raw: RawKb =
            serde_json::from_str(text).map_err(|e| KbError::Schema(e.to_string()))?;
        Self::from_raw(raw)
    }

    /// The bundled desk-scale KB covering every instruction used in the
    /// reference listings.
    pub fn core() -> Self {
        Self::from_json(crate::data::ISA_CORE).expect("bundled isa_core.json is valid")
    }

    /// Six-opcode, three-register KB used by exhaustive-enumeration tests.
    pub fn tiny() -> Self {
        Self::from_json(crate::data::ISA_TINY).expect("bundled isa_tiny.json is valid")
    }

    fn from_raw(raw: RawKb) -> Result<Self, KbError> {
        let mut registers = BTreeMap::new();
        let mut families: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for reg in raw.registers {
            if !valid_width(reg.width_bits) && reg.family != FLAGS_FAMILY {
                return Err(KbError::Schema(format!(
                    "register `{}` has invalid width {}",
                    reg.name, reg.width_bits
                )));
            }
            if reg.name.is_empty() || reg.family.is_empty() {
                return Err(KbError::Schema("register with empty name or family".into()));
            }
            let members = families.entry(reg.family.clone()).or_default();
            for other in members.iter() {
                if registers.get(other).map(|r: &RegisterSpec| r.width_bits) == Some(reg.width_bits) {
                    return Err(KbError::Schema(format!(
                        "register `{}` duplicates width {} in family `{}`",
                        reg.name, reg.width_bits, reg.family
                    )));
                }
            }
            members.push(reg.name.clone());
            if registers.insert(reg.name.clone(), reg.clone()).is_some() {
                return Err(KbError::Schema(format!("duplicate register `{}`", reg.name)));
            }
        }

        let mut opcodes: BTreeMap<String, OpcodeSpec> = BTreeMap::new();
        for op in raw.opcodes {
            let entry = op.mnemonic.clone();
            if entry.is_empty() || entry.chars().any(|c| c.is_ascii_uppercase() || c.is_whitespace()) {
                return Err(KbError::Schema(format!("invalid mnemonic `{entry}`")));
            }
            for slot in &op.slots {
                if !valid_width(slot.width_bits) {
                    return Err(KbError::Schema(format!(
                        "opcode `{entry}` has slot width {}",
                        slot.width_bits
                    )));
                }
                if slot.address_only && slot.kind != OperandKind::Memory {
                    return Err(KbError::Schema(format!(
                        "opcode `{entry}` marks a non-memory slot address_only"
                    )));
                }
            }
            for name in op.implicit_reads.iter().chain(&op.implicit_writes) {
                if !registers.contains_key(name) {
                    return Err(KbError::DanglingRegister { entry, register: name.clone() });
                }
            }
            for (march, tp) in &op.throughput {
                if !(tp.is_finite() && *tp > 0.0) {
                    return Err(KbError::Schema(format!(
                        "opcode `{entry}` has non-positive throughput {tp} for {march}"
                    )));
                }
            }
            let form = OpcodeForm {
                slots: op.slots,
                implicit_reads: op.implicit_reads,
                implicit_writes: op.implicit_writes,
                throughput: op.throughput,
            };
            match opcodes.get_mut(&op.mnemonic) {
                Some(spec) => {
                    if spec.bb_valid != op.bb_valid {
                        return Err(KbError::Schema(format!(
                            "opcode `{entry}` disagrees on bb_valid across forms"
                        )));
                    }
                    spec.forms.push(form);
                }
                None => {
                    opcodes.insert(
                        op.mnemonic.clone(),
                        OpcodeSpec { mnemonic: op.mnemonic, bb_valid: op.bb_valid, forms: vec![form] },
                    );
                }
            }
        }
        for flow in ["call", "jmp", "ret"] {
            if opcodes.get(flow).is_some_and(|spec| spec.bb_valid) {
                return Err(KbError::Schema(format!("control-flow opcode `{flow}` marked bb_valid")));
            }
        }

        Ok(IsaKb { version: raw.version, track_flags: raw.track_flags, opcodes, registers, families })
    }

    pub fn opcode(&self, mnemonic: &str) -> Option<&OpcodeSpec> {
        self.opcodes.get(mnemonic)
    }

    pub fn opcodes(&self) -> impl Iterator<Item = &OpcodeSpec> {
        self.opcodes.values()
    }

    pub fn register(&self, name: &str) -> Option<&RegisterSpec> {
        self.registers.get(name)
    }

    pub fn registers(&self) -> impl Iterator<Item = &RegisterSpec> {
        self.registers.values()
    }

    pub fn family_of(&self, name: &str) -> Option<&str> {
        self.registers.get(name).map(|r| r.family.as_str())
    }

    /// Member of `family` with the given width, if the family has one.
    pub fn family_member(&self, family: &str, width_bits: u16) -> Option<&RegisterSpec> {
        self.families
            .get(family)?
            .iter()
            .filter_map(|name| self.registers.get(name))
            .find(|r| r.width_bits == width_bits)
    }

    /// Resolve the form an instruction uses, if it is valid in a basic block.
    pub fn resolve_form(&self, instr: &Instruction) -> Option<&OpcodeForm> {
        let spec = self.opcodes.get(&instr.mnemonic)?;
        if !spec.bb_valid {
            return None;
        }
        let mut shapes = [OperandShape::immediate(0); 4];
        if instr.operands.len() > shapes.len() {
            return None;
        }
        for (shape, op) in shapes.iter_mut().zip(&instr.operands) {
            *shape = match op {
                Operand::Register(name) => OperandShape::register(self.register(name)?.width_bits),
                Operand::Memory(mem) => OperandShape::memory(mem.width_bits),
                Operand::Immediate { width_bits, .. } => OperandShape::immediate(*width_bits),
            };
        }
        spec.form_for_operands(&shapes[..instr.operands.len()])
    }

    /// Operand shapes of a valid instruction, with address-only memory
    /// marked according to the form it resolves to.
    pub fn instruction_shapes(&self, instr: &Instruction) -> Option<Vec<OperandShape>> {
        let shapes = instr.shapes(self)?;
        let form = self.opcodes.get(&instr.mnemonic)?.form_for_operands(&shapes)?;
        Some(form.slot_shapes(&shapes))
    }

    /// Every other block-valid mnemonic accepting the given operand shapes.
    /// Sorted, never containing `mnemonic` itself.
    pub fn replacement_opcodes(
        &self,
        mnemonic: &str,
        operands: &[OperandShape],
    ) -> Result<Vec<String>, KbError> {
        if !self.opcodes.contains_key(mnemonic) {
            return Err(KbError::UnknownMnemonic(mnemonic.to_string()));
        }
        Ok(self
            .opcodes
            .values()
            .filter(|spec| spec.bb_valid && spec.mnemonic != mnemonic)
            .filter(|spec| spec.form_for(operands).is_some())
            .map(|spec| spec.mnemonic.clone())
            .collect())
    }

    /// Substitutable registers of the same width as `reg`, outside its alias
    /// family and outside every family named in `forbidden`.
    pub fn replacement_registers(
        &self,
        reg: &str,
        forbidden: &BTreeSet<String>,
    ) -> Result<Vec<String>, KbError> {
        let spec = self.registers.get(reg).ok_or_else(|| KbError::UnknownRegister(reg.to_string()))?;
        if !spec.substitutable {
            return Ok(Vec::new());
        }
        let banned: BTreeSet<&str> = forbidden
            .iter()
            .map(|name| self.family_of(name).unwrap_or(name.as_str()))
            .chain(std::iter::once(spec.family.as_str()))
            .collect();
        Ok(self
            .registers
            .values()
            .filter(|r| r.substitutable && r.width_bits == spec.width_bits)
            .filter(|r| !banned.contains(r.family.as_str()) && !forbidden.contains(&r.name))
            .map(|r| r.name.clone())
            .collect())
    }

    /// True iff the mnemonic exists, is block-valid and some form accepts the
    /// operands. Never errors.
    pub fn validate_instruction(&self, instr: &Instruction) -> bool {
        self.resolve_form(instr).is_some()
    }
}

fn valid_width(w: u16) -> bool {
    (8..=512).contains(&w) && w.is_power_of_two()
}
