//! Annotated disassembly listings.
//!
//! A listing is a plain-text rendering of x86 (32-bit) functions in the style of
//! an interactive disassembler, with library-signature parameter names carried
//! as trailing `; name` comments:
//!
//! ```text
//! # comment lines start with '#'
//! FUNCTION sub_401000
//! 401000: push offset SubKey ; lpSubKey
//! 401005: push eax ; hKey
//! 401006: call RegDeleteKeyA
//! END
//! ```
//!
//! Grammar:
//!
//! ```text
//! file       := (func | blank | '#' comment-line)*
//! func       := 'FUNCTION' SP name NL line* 'END' NL
//! line       := hexaddr ':' SP mnemonic (SP operands)? (SP ';' SP annotation)? NL
//! operands   := operand (',' SP? operand)*
//! operand    := register | immediate | hexliteral | '[' memexpr ']' | symbol
//! memexpr    := term (('+'|'-') term)*
//! term       := register ('*' scale)? | immediate | hexliteral | symbol
//! hexliteral := '0'? HEXDIGIT+ 'h'
//! ```
//!
//! Hex literals follow MASM: they must start with a decimal digit, so a value
//! whose leading hex digit is a letter needs the `0` prefix (`0Ch`, not `Ch`).

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 32-bit x86 general-purpose register, or one of its 16-/8-bit views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Register {
    Eax,
    Ebx,
    Ecx,
    Edx,
    Esi,
    Edi,
    Ebp,
    Esp,
    Ax,
    Bx,
    Cx,
    Dx,
    Si,
    Di,
    Bp,
    Sp,
    Al,
    Ah,
    Bl,
    Bh,
    Cl,
    Ch,
    Dl,
    Dh,
}

impl Register {
    pub const ALL: [Register; 24] = [
        Register::Eax,
        Register::Ebx,
        Register::Ecx,
        Register::Edx,
        Register::Esi,
        Register::Edi,
        Register::Ebp,
        Register::Esp,
        Register::Ax,
        Register::Bx,
        Register::Cx,
        Register::Dx,
        Register::Si,
        Register::Di,
        Register::Bp,
        Register::Sp,
        Register::Al,
        Register::Ah,
        Register::Bl,
        Register::Bh,
        Register::Cl,
        Register::Ch,
        Register::Dl,
        Register::Dh,
    ];

    /// The eight 32-bit registers, which double as family identifiers.
    pub const FAMILIES: [Register; 8] = [
        Register::Eax,
        Register::Ebx,
        Register::Ecx,
        Register::Edx,
        Register::Esi,
        Register::Edi,
        Register::Ebp,
        Register::Esp,
    ];

    /// Parses a register name, case-insensitively.
    pub fn parse(name: &str) -> Option<Register> {
        let lower = name.to_ascii_lowercase();
        Register::ALL.iter().copied().find(|r| r.name() == lower)
    }

    pub fn name(self) -> &'static str {
        use Register::*;
        match self {
            Eax => "eax",
            Ebx => "ebx",
            Ecx => "ecx",
            Edx => "edx",
            Esi => "esi",
            Edi => "edi",
            Ebp => "ebp",
            Esp => "esp",
            Ax => "ax",
            Bx => "bx",
            Cx => "cx",
            Dx => "dx",
            Si => "si",
            Di => "di",
            Bp => "bp",
            Sp => "sp",
            Al => "al",
            Ah => "ah",
            Bl => "bl",
            Bh => "bh",
            Cl => "cl",
            Ch => "ch",
            Dl => "dl",
            Dh => "dh",
        }
    }

    /// The 32-bit register this register aliases (`al`, `ah`, `ax` -> `eax`).
    pub fn family(self) -> Register {
        use Register::*;
        match self {
            Eax | Ax | Al | Ah => Eax,
            Ebx | Bx | Bl | Bh => Ebx,
            Ecx | Cx | Cl | Ch => Ecx,
            Edx | Dx | Dl | Dh => Edx,
            Esi | Si => Esi,
            Edi | Di => Edi,
            Ebp | Bp => Ebp,
            Esp | Sp => Esp,
        }
    }

    /// Width in bits.
    pub fn width(self) -> u8 {
        use Register::*;
        match self {
            Eax | Ebx | Ecx | Edx | Esi | Edi | Ebp | Esp => 32,
            Ax | Bx | Cx | Dx | Si | Di | Bp | Sp => 16,
            _ => 8,
        }
    }

    /// Whether this is the high byte of a 16-bit register (`ah`, `bh`, ...).
    pub fn is_high_byte(self) -> bool {
        matches!(self, Register::Ah | Register::Bh | Register::Ch | Register::Dh)
    }

    /// The register of the given family with the same width and byte position,
    /// if the family has one (`esi` has no 8-bit view).
    pub fn with_family(self, family: Register) -> Option<Register> {
        Register::ALL.iter().copied().find(|r| {
            r.family() == family.family()
                && r.width() == self.width()
                && r.is_high_byte() == self.is_high_byte()
        })
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A literal number together with the text it was written as.
///
/// For hex literals `text` holds the digit string, uppercased, without leading
/// zeros and without the `h` suffix (`0Ch` -> `"C"`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Literal {
    pub value: i64,
    pub text: String,
}

impl Literal {
    pub fn decimal(value: i64) -> Literal {
        Literal {
            value,
            text: value.to_string(),
        }
    }

    pub fn hex(value: u64) -> Literal {
        Literal {
            value: value as i64,
            text: format!("{value:X}"),
        }
    }
}

/// Naming category of a disassembler symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolKind {
    /// `dword_XXXX` data reference.
    Dword,
    /// `off_XXXX` pointer table entry.
    Off,
    /// `unk_XXXX` untyped data.
    Unk,
    /// `sub_XXXX` auto-named function.
    Sub,
    /// `offset name` address-of expression.
    Offset,
    /// Anything else: API names, named stack variables, strings.
    Named,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Symbol {
    pub kind: SymbolKind,
    /// Raw name as written (without the `offset` keyword).
    pub name: String,
}

impl Symbol {
    pub fn new(name: &str) -> Symbol {
        let kind = if name.starts_with("dword_") {
            SymbolKind::Dword
        } else if name.starts_with("off_") {
            SymbolKind::Off
        } else if name.starts_with("unk_") {
            SymbolKind::Unk
        } else if name.starts_with("sub_") {
            SymbolKind::Sub
        } else {
            SymbolKind::Named
        };
        Symbol {
            kind,
            name: name.to_string(),
        }
    }

    pub fn offset(name: &str) -> Symbol {
        Symbol {
            kind: SymbolKind::Offset,
            name: name.to_string(),
        }
    }
}

/// Sign joining a memory-expression term to the one before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Plus,
    Minus,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MemTerm {
    pub sign: Sign,
    pub operand: Operand,
    /// Index scale (`ecx*4`); only on register terms.
    pub scale: Option<u8>,
}

/// A jump target of the form `loc_XXXX`, naming an instruction address.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Label {
    pub name: String,
    pub target: u64,
}

impl Label {
    pub fn to_address(target: u64) -> Label {
        Label {
            name: format!("loc_{target:X}"),
            target,
        }
    }
}

/// One instruction operand.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Register(Register),
    Immediate(Literal),
    Hex(Literal),
    /// Bracketed address expression; the terms are never memory operands themselves.
    Memory(Vec<MemTerm>),
    Symbol(Symbol),
    Label(Label),
}

impl Operand {
    pub fn register(&self) -> Option<Register> {
        match self {
            Operand::Register(r) => Some(*r),
            _ => None,
        }
    }

    /// Registers mentioned by this operand, including those inside brackets.
    pub fn registers(&self) -> Vec<Register> {
        match self {
            Operand::Register(r) => vec![*r],
            Operand::Memory(terms) => terms.iter().flat_map(|t| t.operand.registers()).collect(),
            _ => Vec::new(),
        }
    }

    /// Whether the operand dereferences memory, either through brackets or
    /// through a bare data symbol such as `dword_403000`.
    pub fn is_memory_reference(&self) -> bool {
        match self {
            Operand::Memory(_) => true,
            Operand::Symbol(s) => !matches!(s.kind, SymbolKind::Offset | SymbolKind::Sub),
            _ => false,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Register(r) => f.write_str(r.name()),
            Operand::Immediate(lit) => write!(f, "{}", lit.value),
            Operand::Hex(lit) => {
                if lit.text.starts_with(|c: char| c.is_ascii_alphabetic()) {
                    write!(f, "0{}h", lit.text)
                } else {
                    write!(f, "{}h", lit.text)
                }
            }
            Operand::Memory(terms) => {
                f.write_str("[")?;
                for (i, term) in terms.iter().enumerate() {
                    if i > 0 {
                        f.write_str(match term.sign {
                            Sign::Plus => "+",
                            Sign::Minus => "-",
                        })?;
                    }
                    write!(f, "{}", term.operand)?;
                    if let Some(scale) = term.scale {
                        write!(f, "*{scale}")?;
                    }
                }
                f.write_str("]")
            }
            Operand::Symbol(s) if s.kind == SymbolKind::Offset => write!(f, "offset {}", s.name),
            Operand::Symbol(s) => f.write_str(&s.name),
            Operand::Label(l) => f.write_str(&l.name),
        }
    }
}

/// One disassembly line.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub address: u64,
    pub mnemonic: String,
    pub operands: Vec<Operand>,
    pub comment: Option<String>,
}

impl Instruction {
    pub fn new(address: u64, mnemonic: &str, operands: Vec<Operand>) -> Instruction {
        Instruction {
            address,
            mnemonic: mnemonic.to_ascii_lowercase(),
            operands,
            comment: None,
        }
    }

    pub fn with_comment(mut self, comment: &str) -> Instruction {
        self.comment = Some(comment.to_string());
        self
    }

    pub fn is_call(&self) -> bool {
        self.mnemonic == "call"
    }

    pub fn is_push(&self) -> bool {
        self.mnemonic == "push"
    }

    pub fn is_jmp(&self) -> bool {
        self.mnemonic == "jmp"
    }

    pub fn is_ret(&self) -> bool {
        matches!(self.mnemonic.as_str(), "ret" | "retn" | "retf" | "iret" | "iretd")
    }

    /// Unconditional or conditional jump, `loop*`, or `j*cxz`.
    pub fn is_branch(&self) -> bool {
        self.mnemonic.starts_with('j') || self.mnemonic.starts_with("loop")
    }

    /// Whether the instruction transfers control (call, jump, return, interrupt).
    pub fn is_control_flow(&self) -> bool {
        self.is_call() || self.is_branch() || self.is_ret() || self.mnemonic.starts_with("int")
    }

    pub fn call_target(&self) -> Option<&Operand> {
        if self.is_call() {
            self.operands.first()
        } else {
            None
        }
    }

    /// Register families appearing in any operand, in operand order.
    pub fn register_families(&self) -> Vec<Register> {
        let mut out = Vec::new();
        for reg in self.operands.iter().flat_map(|op| op.registers()) {
            let fam = reg.family();
            if !out.contains(&fam) {
                out.push(fam);
            }
        }
        out
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:X}: {}", self.address, self.mnemonic)?;
        for (i, op) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            write!(f, "{op}")?;
        }
        if let Some(comment) = &self.comment {
            write!(f, " ; {comment}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub instructions: Vec<Instruction>,
}

impl Function {
    pub fn index_of_address(&self, address: u64) -> Option<usize> {
        self.instructions
            .binary_search_by_key(&address, |i| i.address)
            .ok()
            .or_else(|| self.instructions.iter().position(|i| i.address == address))
    }

    pub fn address_range(&self) -> Option<(u64, u64)> {
        let first = self.instructions.first()?.address;
        let last = self.instructions.iter().map(|i| i.address).max()?;
        Some((first, last))
    }
}

impl fmt::Display for Function {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "FUNCTION {}", self.name)?;
        for inst in &self.instructions {
            writeln!(f, "{inst}")?;
        }
        writeln!(f, "END")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Listing {
    pub source_id: String,
    pub functions: Vec<Function>,
}

impl Listing {
    /// Renders the listing in canonical form: single spaces, `", "` between
    /// operands, uppercase hex addresses and literals.
    pub fn render(&self) -> String {
        self.functions.iter().map(|f| f.to_string()).collect()
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// Checks the structural invariants: unique names, increasing addresses,
    /// disjoint function ranges.
    pub fn validate(&self) -> Result<()> {
        if self.functions.is_empty() {
            return Err(Error::EmptyListing);
        }
        let mut names = HashSet::new();
        for func in &self.functions {
            if !names.insert(func.name.as_str()) {
                return Err(Error::DuplicateFunction(func.name.clone()));
            }
            for pair in func.instructions.windows(2) {
                if pair[1].address <= pair[0].address {
                    return Err(Error::NonMonotoneAddress {
                        line: 0,
                        function: func.name.clone(),
                        address: pair[1].address,
                    });
                }
            }
        }
        check_ranges(&self.functions)
    }
}

fn check_ranges(functions: &[Function]) -> Result<()> {
    let mut ranges: Vec<(u64, u64, &str)> = functions
        .iter()
        .filter_map(|f| f.address_range().map(|(a, b)| (a, b, f.name.as_str())))
        .collect();
    ranges.sort();
    for pair in ranges.windows(2) {
        if pair[1].0 <= pair[0].1 {
            return Err(Error::OverlappingFunctions(pair[1].2.to_string()));
        }
    }
    Ok(())
}

/// Parses a listing document. `source_id` identifies the file in downstream
/// records.
pub fn parse_listing(text: &str, source_id: &str) -> Result<Listing> {
    let mut functions: Vec<Function> = Vec::new();
    let mut names = HashSet::new();
    let mut current: Option<Function> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("FUNCTION") {
            if current.is_some() {
                return Err(syntax(line_no, "FUNCTION inside an open function block"));
            }
            let name = rest.trim();
            if name.is_empty() || !rest.starts_with(char::is_whitespace) || name.contains(char::is_whitespace) {
                return Err(syntax(line_no, "expected `FUNCTION <name>`"));
            }
            if !names.insert(name.to_string()) {
                return Err(Error::DuplicateFunction(name.to_string()));
            }
            current = Some(Function {
                name: name.to_string(),
                instructions: Vec::new(),
            });
            continue;
        }
        if line == "END" {
            match current.take() {
                Some(func) => functions.push(func),
                None => return Err(syntax(line_no, "END without FUNCTION")),
            }
            continue;
        }
        let Some(func) = current.as_mut() else {
            return Err(syntax(line_no, "instruction outside a FUNCTION block"));
        };
        let inst = parse_instruction(line).map_err(|m| syntax(line_no, &m))?;
        if let Some(prev) = func.instructions.last() {
            if inst.address <= prev.address {
                return Err(Error::NonMonotoneAddress {
                    line: line_no,
                    function: func.name.clone(),
                    address: inst.address,
                });
            }
        }
        func.instructions.push(inst);
    }
    if let Some(func) = current {
        return Err(Error::Syntax {
            line: text.lines().count(),
            message: format!("unterminated FUNCTION `{}`", func.name),
        });
    }
    if functions.is_empty() {
        return Err(Error::EmptyListing);
    }
    check_ranges(&functions)?;
    Ok(Listing {
        source_id: source_id.to_string(),
        functions,
    })
}

fn syntax(line: usize, message: &str) -> Error {
    Error::Syntax {
        line,
        message: message.to_string(),
    }
}

/// Parses one `addr: mnemonic operands ; annotation` line.
pub fn parse_instruction(line: &str) -> std::result::Result<Instruction, String> {
    let (addr_text, rest) = line
        .split_once(':')
        .ok_or_else(|| "expected `<hexaddr>: <mnemonic>`".to_string())?;
    let addr_text = addr_text.trim();
    if addr_text.is_empty() || !addr_text.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(format!("invalid address `{addr_text}`"));
    }
    let address = u64::from_str_radix(addr_text, 16).map_err(|e| format!("invalid address: {e}"))?;
    if !rest.starts_with(char::is_whitespace) {
        return Err("expected a space after `:`".to_string());
    }

    let (body, comment) = match rest.split_once(';') {
        Some((body, comment)) => {
            let comment = comment.trim();
            (body, (!comment.is_empty()).then(|| comment.to_string()))
        }
        None => (rest, None),
    };
    let body = body.trim();
    let (mnemonic, operand_text) = match body.split_once(char::is_whitespace) {
        Some((m, ops)) => (m, ops.trim()),
        None => (body, ""),
    };
    if mnemonic.is_empty() || !mnemonic.chars().all(|c| c.is_ascii_alphanumeric()) {
        return Err(format!("invalid mnemonic `{mnemonic}`"));
    }
    let operands = if operand_text.is_empty() {
        Vec::new()
    } else {
        operand_text
            .split(',')
            .map(|op| parse_operand(op.trim()))
            .collect::<std::result::Result<Vec<_>, _>>()?
    };
    Ok(Instruction {
        address,
        mnemonic: mnemonic.to_ascii_lowercase(),
        operands,
        comment,
    })
}

/// Parses a single operand.
pub fn parse_operand(text: &str) -> std::result::Result<Operand, String> {
    if text.is_empty() {
        return Err("empty operand".to_string());
    }
    if let Some(inner) = text.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| format!("unterminated memory operand `{text}`"))?;
        return parse_memory(inner).map(Operand::Memory);
    }
    if let Some(name) = text.strip_prefix("offset ") {
        let name = name.trim();
        if !is_identifier(name) {
            return Err(format!("invalid offset symbol `{name}`"));
        }
        return Ok(Operand::Symbol(Symbol::offset(name)));
    }
    parse_scalar(text)
}

fn parse_memory(inner: &str) -> std::result::Result<Vec<MemTerm>, String> {
    let mut terms = Vec::new();
    let mut sign = Sign::Plus;
    let mut start = 0;
    let bytes = inner.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'+' || b == b'-' {
            terms.push(memory_term(&inner[start..i], sign)?);
            sign = if b == b'+' { Sign::Plus } else { Sign::Minus };
            start = i + 1;
        }
    }
    terms.push(memory_term(&inner[start..], sign)?);
    Ok(terms)
}

fn memory_term(text: &str, sign: Sign) -> std::result::Result<MemTerm, String> {
    let text = text.trim();
    if text.is_empty() {
        return Err("empty memory-expression term".to_string());
    }
    if let Some((reg, factor)) = text.split_once('*') {
        let reg = Register::parse(reg.trim()).ok_or_else(|| format!("scaled term `{text}` needs a register"))?;
        let scale = match factor.trim() {
            "1" => 1,
            "2" => 2,
            "4" => 4,
            "8" => 8,
            other => return Err(format!("invalid scale `{other}`")),
        };
        return Ok(MemTerm {
            sign,
            operand: Operand::Register(reg),
            scale: Some(scale),
        });
    }
    let operand = parse_scalar(text)?;
    if matches!(operand, Operand::Label(_)) {
        return Err(format!("label `{text}` inside a memory expression"));
    }
    Ok(MemTerm {
        sign,
        operand,
        scale: None,
    })
}

/// Register, decimal, hex literal, label or symbol.
fn parse_scalar(text: &str) -> std::result::Result<Operand, String> {
    if let Some(reg) = Register::parse(text) {
        return Ok(Operand::Register(reg));
    }
    if let Some(lit) = parse_hex(text)? {
        return Ok(Operand::Hex(lit));
    }
    let digits = text.strip_prefix('-').unwrap_or(text);
    if !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit()) {
        let value: i64 = text.parse().map_err(|e| format!("invalid immediate `{text}`: {e}"))?;
        return Ok(Operand::Immediate(Literal {
            value,
            text: text.to_string(),
        }));
    }
    if !is_identifier(text) {
        return Err(format!("unrecognized operand `{text}`"));
    }
    if let Some(label) = parse_label(text) {
        return Ok(Operand::Label(label));
    }
    Ok(Operand::Symbol(Symbol::new(text)))
}

fn parse_hex(text: &str) -> std::result::Result<Option<Literal>, String> {
    let Some(body) = text.strip_suffix('h').or_else(|| text.strip_suffix('H')) else {
        return Ok(None);
    };
    if body.is_empty()
        || !body.starts_with(|c: char| c.is_ascii_digit())
        || !body.chars().all(|c| c.is_ascii_hexdigit())
    {
        return Ok(None);
    }
    let value = u64::from_str_radix(body, 16).map_err(|e| format!("hex literal `{text}`: {e}"))?;
    Ok(Some(Literal::hex(value)))
}

fn parse_label(text: &str) -> Option<Label> {
    let digits = text.strip_prefix("locret_").or_else(|| text.strip_prefix("loc_"))?;
    let target = u64::from_str_radix(digits, 16).ok()?;
    Some(Label {
        name: text.to_string(),
        target,
    })
}

fn is_identifier(text: &str) -> bool {
    let mut chars = text.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || "_$?@.".contains(c) => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || "_$?@.".contains(c))
}

/// Documented parameter list of one API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub params: Vec<String>,
}

/// Reference parameter lists keyed by API name (case-insensitive).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApiCatalog {
    entries: BTreeMap<String, CatalogEntry>,
}

impl ApiCatalog {
    /// Parses `Name:p1,p2,...` records, one per line. `#` starts a comment line.
    pub fn parse(text: &str) -> Result<ApiCatalog> {
        let mut catalog = ApiCatalog::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Catalog {
                line: idx + 1,
                message,
            };
            let (name, params) = line
                .split_once(':')
                .ok_or_else(|| err("expected `Name:param,...`".to_string()))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(err("empty API name".to_string()));
            }
            let params: Vec<String> = params
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(str::to_string)
                .collect();
            let mut seen = HashSet::new();
            if let Some(dup) = params.iter().find(|p| !seen.insert(p.to_ascii_lowercase())) {
                return Err(err(format!("duplicate parameter `{dup}` for `{name}`")));
            }
            catalog
                .insert(name, params)
                .map_err(|_| err(format!("duplicate API name `{name}`")))?;
        }
        Ok(catalog)
    }

    /// Adds an entry; fails if the name (case-insensitively) is already present.
    pub fn insert(&mut self, name: &str, params: Vec<String>) -> Result<()> {
        let key = name.to_ascii_lowercase();
        if self.entries.contains_key(&key) {
            return Err(Error::InvalidArgument(format!("duplicate API name `{name}`")));
        }
        self.entries.insert(
            key,
            CatalogEntry {
                name: name.to_string(),
                params,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&CatalogEntry> {
        self.entries.get(&name.to_ascii_lowercase())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn arity(&self, name: &str) -> Option<usize> {
        self.get(name).map(|e| e.params.len())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CatalogEntry> {
        self.entries.values()
    }
}

/// What a `call` operand resolves to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallTargetKind {
    /// A Windows API present in the catalog; holds the catalog spelling.
    KnownApi(String),
    /// A statically known non-API function (`sub_...`, other named code).
    ExternalUserFn(String),
    /// Register, memory expression, or data-pointer symbol resolved at runtime.
    Indirect(Operand),
}

/// Classifies a call operand against the catalog.
pub fn classify_call_target(op: &Operand, catalog: &ApiCatalog) -> CallTargetKind {
    match op {
        Operand::Register(_) | Operand::Memory(_) => CallTargetKind::Indirect(op.clone()),
        Operand::Symbol(sym) => match sym.kind {
            SymbolKind::Dword | SymbolKind::Off | SymbolKind::Unk => CallTargetKind::Indirect(op.clone()),
            SymbolKind::Sub | SymbolKind::Offset => CallTargetKind::ExternalUserFn(sym.name.clone()),
            SymbolKind::Named => match catalog.get(&sym.name) {
                Some(entry) => CallTargetKind::KnownApi(entry.name.clone()),
                None => CallTargetKind::ExternalUserFn(sym.name.clone()),
            },
        },
        Operand::Label(label) => CallTargetKind::ExternalUserFn(label.name.clone()),
        Operand::Immediate(_) | Operand::Hex(_) => CallTargetKind::ExternalUserFn(op.to_string()),
    }
}

/// Whether a call instruction targets statically known non-API code,
/// judged from the operand alone (no catalog).
pub fn is_direct_call(inst: &Instruction) -> bool {
    match inst.call_target() {
        Some(Operand::Symbol(sym)) => !matches!(sym.kind, SymbolKind::Dword | SymbolKind::Off | SymbolKind::Unk),
        Some(Operand::Label(_) | Operand::Immediate(_) | Operand::Hex(_)) => true,
        _ => false,
    }
}
