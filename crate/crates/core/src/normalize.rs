//! Symbolic operand mapping and token-stream normalization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::ApiCodeprint;
use crate::listing::{Instruction, Operand, SymbolKind};

/// Which parts of a codeprint reach the token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Parameter names, values and context.
    Normal,
    /// Values and context only, as recoverable from a binary without symbols.
    Stripped,
    /// Parameter values only.
    ValuesOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Normal, Variant::Stripped, Variant::ValuesOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Normal => "normal",
            Variant::Stripped => "stripped",
            Variant::ValuesOnly => "values-only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedCodeprint {
    pub api_token: String,
    /// Full stream; position 0 is the API token.
    pub tokens: Vec<String>,
    pub variant: Variant,
    pub param_count: usize,
}

/// Lowercases and drops non-ASCII and punctuation characters.
pub fn clean_token(raw: &str) -> String {
    raw.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Splits free text on whitespace and cleans each piece. Applying it to its
/// own joined output is a no-op.
pub fn normalize_text(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(clean_token)
        .filter(|t| !t.is_empty())
        .collect()
}

/// Maps an operand to its symbolic tokens.
pub fn map_operand(op: &Operand) -> Vec<String> {
    let word = |s: &str| vec![s.to_string()];
    match op {
        Operand::Register(r) => word(r.name()),
        Operand::Immediate(lit) => vec![clean_token(&lit.text)],
        Operand::Hex(lit) => match lit.text.trim_start_matches('0').len() {
            0 | 1 => word("saddr"),
            2..=4 => word("maddr"),
            _ => word("laddr"),
        },
        Operand::Memory(terms) if terms.len() <= 2 => word("mem"),
        Operand::Memory(_) => word("complex"),
        Operand::Symbol(sym) => match sym.kind {
            SymbolKind::Unk => vec!["unknown".into(), "ptr".into()],
            SymbolKind::Offset | SymbolKind::Dword => word("ptr"),
            SymbolKind::Off => vec!["runtime".into(), "ptr".into()],
            SymbolKind::Sub => word("extrfun"),
            SymbolKind::Named => word("mem"),
        },
        Operand::Label(_) => word("label"),
    }
}

/// `mnemonic mapped-operands...`
pub fn instruction_tokens(inst: &Instruction) -> Vec<String> {
    let mut out = vec![clean_token(&inst.mnemonic)];
    for op in &inst.operands {
        out.extend(map_operand(op));
    }
    out.retain(|t| !t.is_empty());
    out
}

/// Serializes a codeprint as a token stream.
///
/// Per parameter, in codeprint order: the parameter name (normal variant
/// only), then the value. A register value is represented by its whole
/// context; any other value by its mapped form alone. The values-only variant
/// emits the mapped value for every parameter.
pub fn normalize_codeprint(cp: &ApiCodeprint, variant: Variant) -> Result<NormalizedCodeprint> {
    let api_token = clean_token(&cp.api_name);
    if api_token.is_empty() {
        return Err(Error::Internal(format!("API name `{}` normalizes to nothing", cp.api_name)));
    }
    let mut tokens = vec![api_token.clone()];
    for param in &cp.params {
        if param.context.is_empty() {
            return Err(Error::Internal(format!(
                "{}@{:#x}: parameter with empty context",
                cp.api_name, cp.callsite_address
            )));
        }
        if variant == Variant::Normal {
            if let Some(name) = &param.name {
                tokens.extend(normalize_text(name));
            }
        }
        let register_valued = param.value.register().is_some();
        if variant == Variant::ValuesOnly || !register_valued {
            tokens.extend(map_operand(&param.value));
        } else {
            for inst in &param.context {
                tokens.extend(instruction_tokens(inst));
            }
        }
    }
    tokens.retain(|t| !t.is_empty());
    Ok(NormalizedCodeprint {
        api_token,
        tokens,
        variant,
        param_count: cp.params.len(),
    })
}

impl NormalizedCodeprint {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::extract_codeprints;
    use crate::listing::{parse_listing, parse_operand, ApiCatalog};

    fn map(s: &str) -> String {
        map_operand(&parse_operand(s).unwrap()).join(" ")
    }

    #[test]
    fn symbolic_mapping_rows() {
        assert_eq!(map("[esi+8]"), "mem");
        assert_eq!(map("[ebp+10h+var_C]"), "complex");
        assert_eq!(map("0Ch"), "saddr");
        assert_eq!(map("0F6Ah"), "maddr");
        assert_eq!(map("0FFFFFFF8h"), "laddr");
        assert_eq!(map("unk_40A000"), "unknown ptr");
        assert_eq!(map("offset aSoftware"), "ptr");
        assert_eq!(map("dword_403000"), "ptr");
        assert_eq!(map("off_41A000"), "runtime ptr");
        assert_eq!(map("sub_40523"), "extrfun");
        assert_eq!(map("3"), "3");
    }

    #[test]
    fn hex_buckets_ignore_leading_zeros() {
        assert_eq!(map("0h"), "saddr");
        assert_eq!(map("10h"), "maddr");
        assert_eq!(map("0FFFFh"), "maddr");
        assert_eq!(map("10000h"), "laddr");
        assert_eq!(map("[ebp+phkResult]"), "mem");
        assert_eq!(map("[eax]"), "mem");
        assert_eq!(map("phkResult"), "mem");
        assert_eq!(map("loc_401000"), "label");
        assert_eq!(map("-4"), "4");
    }

    fn codeprint(path_text: &str) -> ApiCodeprint {
        let cat = ApiCatalog::parse(include_str!("../fixtures/catalog.txt")).unwrap();
        let listing = parse_listing(path_text, "t").unwrap();
        extract_codeprints(&listing.functions[0], &cat).remove(0)
    }

    #[test]
    fn findresourcea_streams() {
        let cp = codeprint(include_str!("../fixtures/listings/fig5_findresourcea.lst"));
        let normal = normalize_codeprint(&cp, Variant::Normal).unwrap();
        assert_eq!(
            normal.text(),
            "findresourcea lptype 6 lpname push ecx movzx ecx ax hmodule push edi mov edi complex push edi mov esi complex push esi"
        );
        let stripped = normalize_codeprint(&cp, Variant::Stripped).unwrap();
        assert_eq!(
            stripped.text(),
            "findresourcea 6 push ecx movzx ecx ax push edi mov edi complex push edi mov esi complex push esi"
        );
        let values = normalize_codeprint(&cp, Variant::ValuesOnly).unwrap();
        assert_eq!(values.text(), "findresourcea 6 ecx esi");
        assert_eq!(normal.param_count, 3);
    }

    #[test]
    fn zero_params_yield_api_token_only() {
        let cp = ApiCodeprint {
            api_name: "GetProcessHeap".into(),
            callsite_address: 1,
            function_name: "f".into(),
            params: vec![],
        };
        let n = normalize_codeprint(&cp, Variant::Normal).unwrap();
        assert_eq!(n.tokens, vec!["getprocessheap"]);
    }

    #[test]
    fn empty_context_is_internal_error() {
        let mut cp = codeprint(include_str!("../fixtures/listings/fig5_findresourcea.lst"));
        cp.params[0].context.clear();
        assert!(matches!(normalize_codeprint(&cp, Variant::Stripped), Err(Error::Internal(_))));
    }

    #[test]
    fn text_normalization_is_idempotent() {
        let once = normalize_text("Push  [EBP+var_C], 0Ch ; hKey — ü");
        assert_eq!(once, vec!["push", "ebpvarc", "0ch", "hkey"]);
        assert_eq!(normalize_text(&once.join(" ")), once);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
