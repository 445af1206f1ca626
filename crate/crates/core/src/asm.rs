//! Intel-syntax basic blocks: tokenizer, parser and canonical printer.

use std::fmt;

use thiserror::Error;

use crate::isa::{IsaKb, OperandShape};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}, column {column}: {message}")]
    Lexical { line: usize, column: usize, message: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: invalid instruction `{text}`: {reason}")]
    InvalidInstruction { line: usize, text: String, reason: String },
    #[error("basic block is empty")]
    EmptyBlock,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MemOperand {
    pub base: Option<String>,
    pub index: Option<String>,
    pub scale: u8,
    pub displacement: i64,
    pub width_bits: u16,
}

impl MemOperand {
    /// Address expression without the access width. Two memory operands alias
    /// iff their keys are equal.
    pub fn key(&self) -> String {
        let mut out = String::from("[");
        let mut first = true;
        if let Some(base) = &self.base {
            out.push_str(base);
            first = false;
        }
        if let Some(index) = &self.index {
            if !first {
                out.push_str(" + ");
            }
            out.push_str(index);
            if self.scale != 1 {
                out.push_str(&format!("*{}", self.scale));
            }
            first = false;
        }
        if first {
            out.push_str(&self.displacement.to_string());
        } else if self.displacement > 0 {
            out.push_str(&format!(" + {}", self.displacement));
        } else if self.displacement < 0 {
            out.push_str(&format!(" - {}", self.displacement.unsigned_abs()));
        }
        out.push(']');
        out
    }

    pub fn registers(&self) -> impl Iterator<Item = &str> {
        self.base.iter().chain(self.index.iter()).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operand {
    Register(String),
    Memory(MemOperand),
    Immediate { value: i64, width_bits: u16 },
}

impl Operand {
    pub fn immediate(value: i64) -> Self {
        Operand::Immediate { value, width_bits: immediate_width(value) }
    }
}

/// Smallest power-of-two width (≥ 8) holding `value` as a signed or an
/// unsigned integer.
pub fn immediate_width(value: i64) -> u16 {
    for w in [8u16, 16, 32] {
        let lo = -(1i64 << (w - 1));
        let hi = 1i64 << w;
        if value >= lo && value < hi {
            return w;
        }
    }
    64
}

fn width_keyword(width: u16) -> &'static str {
    match width {
        8 => "byte",
        16 => "word",
        32 => "dword",
        64 => "qword",
        128 => "xmmword",
        256 => "ymmword",
        _ => "zmmword",
    }
}

fn keyword_width(word: &str) -> Option<u16> {
    Some(match word {
        "byte" => 8,
        "word" => 16,
        "dword" => 32,
        "qword" => 64,
        "xmmword" => 128,
        "ymmword" => 256,
        "zmmword" => 512,
        _ => return None,
    })
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Register(name) => f.write_str(name),
            Operand::Immediate { value, .. } => write!(f, "{value}"),
            Operand::Memory(mem) => write!(f, "{} ptr {}", width_keyword(mem.width_bits), mem.key()),
        }
    }
}

#[derive(Debug, Clone, Eq)]
pub struct Instruction {
    pub mnemonic: String,
    pub operands: Vec<Operand>,
    pub source_text: String,
}

/// Structural equality: the original source text is not compared.
impl PartialEq for Instruction {
    fn eq(&self, other: &Self) -> bool {
        self.mnemonic == other.mnemonic && self.operands == other.operands
    }
}

impl Instruction {
    pub fn new(mnemonic: impl Into<String>, operands: Vec<Operand>) -> Self {
        let mut instr = Instruction { mnemonic: mnemonic.into(), operands, source_text: String::new() };
        instr.source_text = instr.to_string();
        instr
    }

    pub fn shapes(&self, kb: &IsaKb) -> Option<Vec<OperandShape>> {
        self.operands
            .iter()
            .map(|op| match op {
                Operand::Register(name) => kb.register(name).map(|r| OperandShape::register(r.width_bits)),
                Operand::Memory(mem) => Some(OperandShape::memory(mem.width_bits)),
                Operand::Immediate { width_bits, .. } => Some(OperandShape::immediate(*width_bits)),
            })
            .collect()
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.mnemonic)?;
        for (i, op) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub instructions: Vec<Instruction>,
}

impl BasicBlock {
    pub fn new(instructions: Vec<Instruction>) -> Self {
        BasicBlock { instructions }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn render(&self) -> String {
        render_block(self)
    }
}

/// Canonical lowercase text, one instruction per line, each line ending in
/// a newline. Identical blocks render to identical strings.
pub fn render_block(bb: &BasicBlock) -> String {
    let mut out = String::new();
    for instr in &bb.instructions {
        out.push_str(&instr.to_string());
        out.push('\n');
    }
    out
}

pub fn parse_block(text: &str, kb: &IsaKb) -> Result<BasicBlock, ParseError> {
    let mut instructions = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let Some(instr) = parse_line(raw, line, kb)? else { continue };
        let Some(spec) = kb.opcode(&instr.mnemonic) else {
            return Err(ParseError::UnknownMnemonic { line, mnemonic: instr.mnemonic });
        };
        if !spec.bb_valid {
            return Err(ParseError::InvalidInstruction {
                line,
                text: instr.source_text,
                reason: "opcode is not allowed inside a basic block".into(),
            });
        }
        if !kb.validate_instruction(&instr) {
            return Err(ParseError::InvalidInstruction {
                line,
                text: instr.source_text,
                reason: "no form of this opcode accepts these operands".into(),
            });
        }
        instructions.push(instr);
    }
    if instructions.is_empty() {
        return Err(ParseError::EmptyBlock);
    }
    Ok(BasicBlock { instructions })
}

/// Parse a single instruction without checking it against the KB's opcode
/// table. Registers must still be known to the KB.
pub fn parse_instruction(text: &str, kb: &IsaKb) -> Result<Instruction, ParseError> {
    parse_line(text, 1, kb)?.ok_or(ParseError::EmptyBlock)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Number(i64),
    Comma,
    LBracket,
    RBracket,
    Plus,
    Minus,
    Star,
}

fn lex(src: &str, line: usize) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    let err = |col: usize, message: String| ParseError::Lexical { line, column: col, message };
    while i < bytes.len() {
        let c = bytes[i] as char;
        let col = i + 1;
        match c {
            ' ' | '\t' | '\r' => i += 1,
            ';' => break,
            ',' => { toks.push((Tok::Comma, col)); i += 1; }
            '[' => { toks.push((Tok::LBracket, col)); i += 1; }
            ']' => { toks.push((Tok::RBracket, col)); i += 1; }
            '+' => { toks.push((Tok::Plus, col)); i += 1; }
            '-' => { toks.push((Tok::Minus, col)); i += 1; }
            '*' => { toks.push((Tok::Star, col)); i += 1; }
            '0'..='9' => {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_alphanumeric() {
                    i += 1;
                }
                let lit = &src[start..i];
                let parsed = if let Some(hex) = lit.strip_prefix("0x").or_else(|| lit.strip_prefix("0X")) {
                    i64::from_str_radix(hex, 16)
                } else {
                    lit.parse::<i64>()
                };
                let value = parsed.map_err(|_| err(col, format!("malformed number `{lit}`")))?;
                toks.push((Tok::Number(value), col));
            }
            c if c.is_ascii_alphabetic() || c == '_' || c == '.' => {
                let start = i;
                while i < bytes.len() && {
                    let d = bytes[i] as char;
                    d.is_ascii_alphanumeric() || d == '_' || d == '.'
                } {
                    i += 1;
                }
                toks.push((Tok::Word(src[start..i].to_ascii_lowercase()), col));
            }
            other => return Err(err(col, format!("unexpected character `{other}`"))),
        }
    }
    Ok(toks)
}

fn parse_line(raw: &str, line: usize, kb: &IsaKb) -> Result<Option<Instruction>, ParseError> {
    let toks = lex(raw, line)?;
    if toks.is_empty() {
        return Ok(None);
    }
    let source_text = raw.split(';').next().unwrap_or("").trim().to_string();
    let mut p = OperandParser { toks: &toks, pos: 0, line, kb, end_col: raw.len() + 1 };
    let mnemonic = match p.next() {
        Some((Tok::Word(w), _)) => w.clone(),
        Some((_, col)) => return Err(p.error(col, "expected a mnemonic")),
        None => unreachable!(),
    };
    let mut operands = Vec::new();
    if p.peek().is_some() {
        loop {
            operands.push(p.operand()?);
            match p.next() {
                None => break,
                Some((Tok::Comma, _)) => continue,
                Some((_, col)) => return Err(p.error(col, "expected `,` between operands")),
            }
        }
    }
    resolve_memory_widths(&mut operands, kb).map_err(|reason| ParseError::InvalidInstruction {
        line,
        text: source_text.clone(),
        reason,
    })?;
    Ok(Some(Instruction { mnemonic, operands, source_text }))
}

/// Memory operands written without a `ptr` prefix take the common width of
/// the register operands. Ambiguity is an error.
fn resolve_memory_widths(operands: &mut [Operand], kb: &IsaKb) -> Result<(), String> {
    let reg_widths: Vec<u16> = operands
        .iter()
        .filter_map(|op| match op {
            Operand::Register(name) => kb.register(name).map(|r| r.width_bits),
            _ => None,
        })
        .collect();
    for op in operands.iter_mut() {
        if let Operand::Memory(mem) = op {
            if mem.width_bits == 0 {
                match reg_widths.split_first() {
                    Some((first, rest)) if rest.iter().all(|w| w == first) => mem.width_bits = *first,
                    _ => return Err("memory operand size is ambiguous; use a `ptr` prefix".into()),
                }
            }
        }
    }
    Ok(())
}

struct OperandParser<'a> {
    toks: &'a [(Tok, usize)],
    pos: usize,
    line: usize,
    kb: &'a IsaKb,
    end_col: usize,
}

impl<'a> OperandParser<'a> {
    fn next(&mut self) -> Option<(&'a Tok, usize)> {
        let tok = self.toks.get(self.pos)?;
        self.pos += 1;
        Some((&tok.0, tok.1))
    }

    fn peek(&self) -> Option<&'a Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn error(&self, column: usize, message: &str) -> ParseError {
        ParseError::Lexical { line: self.line, column, message: message.to_string() }
    }

    fn expect_next(&mut self, what: &str) -> Result<(&'a Tok, usize), ParseError> {
        let end = self.end_col;
        self.next().ok_or_else(|| self.error(end, &format!("expected {what}, found end of line")))
    }

    fn operand(&mut self) -> Result<Operand, ParseError> {
        let (tok, col) = self.expect_next("an operand")?;
        match tok {
            Tok::Word(w) if keyword_width(w).is_some() => {
                let width = keyword_width(w).unwrap();
                match self.expect_next("`ptr`")? {
                    (Tok::Word(p), _) if p == "ptr" => {}
                    (_, c) => return Err(self.error(c, "expected `ptr` after size keyword")),
                }
                match self.expect_next("`[`")? {
                    (Tok::LBracket, c) => self.memory(width, c),
                    (_, c) => Err(self.error(c, "expected `[`")),
                }
            }
            Tok::Word(w) => {
                if self.kb.register(w).is_some() {
                    Ok(Operand::Register(w.clone()))
                } else {
                    Err(self.error(col, &format!("unknown register or operand `{w}`")))
                }
            }
            Tok::Number(n) => Ok(Operand::immediate(*n)),
            Tok::Minus => match self.expect_next("a number")? {
                (Tok::Number(n), _) => Ok(Operand::immediate(-n)),
                (_, c) => Err(self.error(c, "expected a number after `-`")),
            },
            Tok::LBracket => self.memory(0, col),
            _ => Err(self.error(col, "expected an operand")),
        }
    }

    fn register(&self, name: &str, col: usize) -> Result<String, ParseError> {
        match self.kb.register(name) {
            Some(_) => Ok(name.to_string()),
            None => Err(self.error(col, &format!("unknown register `{name}`"))),
        }
    }

    fn memory(&mut self, width_bits: u16, open_col: usize) -> Result<Operand, ParseError> {
        let mut regs: Vec<(String, Option<u8>)> = Vec::new();
        let mut displacement: i64 = 0;
        let mut negative = false;
        let mut expect_term = true;
        let mut saw_term = false;
        loop {
            let (tok, col) = self.expect_next("`]`")?;
            match tok {
                Tok::RBracket if !expect_term => break,
                Tok::Plus | Tok::Minus if !expect_term => {
                    negative = *tok == Tok::Minus;
                    expect_term = true;
                }
                Tok::Minus if expect_term && !saw_term => {
                    negative = !negative;
                }
                Tok::Number(n) if expect_term => {
                    if self.peek() == Some(&Tok::Star) {
                        self.next();
                        let (rtok, rcol) = self.expect_next("a register")?;
                        let Tok::Word(r) = rtok else {
                            return Err(self.error(rcol, "expected a register after `*`"));
                        };
                        if negative {
                            return Err(self.error(col, "scaled index cannot be negated"));
                        }
                        regs.push((self.register(r, rcol)?, Some(self.scale(*n, col)?)));
                    } else {
                        displacement += if negative { -n } else { *n };
                    }
                    expect_term = false;
                    saw_term = true;
                }
                Tok::Word(r) if expect_term => {
                    if negative {
                        return Err(self.error(col, "register cannot be negated"));
                    }
                    let name = self.register(r, col)?;
                    let scale = if self.peek() == Some(&Tok::Star) {
                        self.next();
                        match self.expect_next("a scale")? {
                            (Tok::Number(n), c) => Some(self.scale(*n, c)?),
                            (_, c) => return Err(self.error(c, "expected a scale after `*`")),
                        }
                    } else {
                        None
                    };
                    regs.push((name, scale));
                    expect_term = false;
                    saw_term = true;
                }
                _ => return Err(self.error(col, "malformed memory operand")),
            }
        }
        if !saw_term {
            return Err(self.error(open_col, "empty memory operand"));
        }
        let (mut base, mut index, mut scale) = (None, None, 1u8);
        for (name, s) in regs {
            match s {
                Some(s) if index.is_none() => {
                    index = Some(name);
                    scale = s;
                }
                None if base.is_none() => base = Some(name),
                None if index.is_none() => index = Some(name),
                _ => return Err(self.error(open_col, "too many registers in memory operand")),
            }
        }
        if base.is_none() && scale == 1 {
            base = index.take();
        }
        Ok(Operand::Memory(MemOperand { base, index, scale, displacement, width_bits }))
    }

    fn scale(&self, n: i64, col: usize) -> Result<u8, ParseError> {
        match n {
            1 | 2 | 4 | 8 => Ok(n as u8),
            _ => Err(self.error(col, "scale must be 1, 2, 4 or 8")),
        }
    }
}
