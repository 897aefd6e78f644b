#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use codeprint::listing::{parse_listing, ApiCatalog, Listing};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn catalog() -> ApiCatalog {
    ApiCatalog::parse(&std::fs::read_to_string(fixture_dir().join("catalog.txt")).unwrap()).unwrap()
}

/// Every `.lst` under the given fixture subdirectory, sorted.
pub fn fixture_listings(sub: &str) -> Vec<Listing> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(fixture_dir().join(sub))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "lst"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let id = p.file_name().unwrap().to_string_lossy().into_owned();
            parse_listing(&std::fs::read_to_string(p).unwrap(), &id).unwrap()
        })
        .collect()
}

const R32: [&str; 7] = ["eax", "ebx", "ecx", "edx", "esi", "edi", "ebp"];
const R16: [&str; 6] = ["ax", "bx", "cx", "dx", "si", "di"];
const R8: [&str; 8] = ["al", "ah", "bl", "bh", "cl", "ch", "dl", "dh"];
const NAMES: [&str; 10] = ["hFile", "lpBuffer", "dwFlags", "hKey", "lpName", "nSize", "hProcess", "dwBytes", "s", "len"];
const APIS: [&str; 8] = [
    "CloseHandle",
    "WriteFile",
    "HeapAlloc",
    "send",
    "RegDeleteKeyA",
    "GetProcessHeap",
    "FindResourceA",
    "Sleep",
];

fn masm_hex(v: u64) -> String {
    let digits = format!("{v:X}");
    if digits.starts_with(|c: char| c.is_ascii_alphabetic()) {
        format!("0{digits}h")
    } else {
        format!("{digits}h")
    }
}

/// One random instruction body (no address), drawn from a mix weighted
/// toward register traffic and annotated pushes.
pub fn random_body<R: Rng>(rng: &mut R) -> String {
    let r32 = |rng: &mut R| *R32.choose(rng).unwrap();
    let var = |rng: &mut R| format!("var_{:X}", rng.gen_range(1..0x40u32));
    let name = |rng: &mut R| *NAMES.choose(rng).unwrap();
    match rng.gen_range(0..24) {
        0 | 1 => format!("mov {}, {}", r32(rng), r32(rng)),
        2 if rng.gen_bool(0.3) => format!("mov {}, [{}+{}*{}+{}]", r32(rng), r32(rng), r32(rng), [1, 2, 4, 8].choose(rng).unwrap(), rng.gen_range(0..64)),
        2 => format!("mov {}, [{}+{}]", r32(rng), r32(rng), rng.gen_range(0..64)),
        3 => format!("mov {}, [ebp+{}]", r32(rng), var(rng)),
        4 => format!("mov [{}+{}], {}", r32(rng), rng.gen_range(0..64), r32(rng)),
        5 => format!("lea {}, [ebp+{}]", r32(rng), var(rng)),
        6 => format!("movzx {}, {}", r32(rng), R16.choose(rng).unwrap()),
        7 => format!("movzx {}, {}", r32(rng), R8.choose(rng).unwrap()),
        8 => format!("add {}, {}", r32(rng), rng.gen_range(0..100)),
        9 => format!("sub {}, {}", r32(rng), masm_hex(rng.gen_range(0..0x1_0000_0000u64))),
        10 => format!("xor {}, {}", r32(rng), r32(rng)),
        11 => format!("cmp {}, {}", r32(rng), rng.gen_range(0..10)),
        12 => format!("test {}, {}", R8.choose(rng).unwrap(), R8.choose(rng).unwrap()),
        13..=15 => format!("push {} ; {}", r32(rng), name(rng)),
        16 => format!("push {} ; {}", rng.gen_range(0..9), name(rng)),
        17 => format!("push offset a{} ; {}", var(rng), name(rng)),
        18 => format!("push [ebp+{}] ; {}", var(rng), name(rng)),
        19 => format!("push {}", r32(rng)),
        20 => format!("pop {}", r32(rng)),
        21 => format!("call sub_{:X}", rng.gen_range(0x402000..0x40F000u32)),
        22 => format!("call dword_{:X}", rng.gen_range(0x410000..0x41F000u32)),
        _ => format!("call {}", APIS.choose(rng).unwrap()),
    }
}

/// A random function of `n` instructions as `(address, body)` lines.
pub fn random_function<R: Rng>(rng: &mut R, base: u64, n: usize) -> Vec<(u64, String)> {
    let mut addr = base;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push((addr, random_body(rng)));
        addr += rng.gen_range(1..8);
    }
    out
}

pub fn render_function(name: &str, lines: &[(u64, String)]) -> String {
    let mut text = format!("FUNCTION {name}\n");
    for (addr, body) in lines {
        text.push_str(&format!("{addr:X}: {body}\n"));
    }
    text.push_str("END\n");
    text
}

// ---------------------------------------------------------------------------
// Reference implementation over raw text, sharing no code with the library.

fn family_of(tok: &str) -> Option<&'static str> {
    Some(match tok {
        "eax" | "ax" | "al" | "ah" => "eax",
        "ebx" | "bx" | "bl" | "bh" => "ebx",
        "ecx" | "cx" | "cl" | "ch" => "ecx",
        "edx" | "dx" | "dl" | "dh" => "edx",
        "esi" | "si" => "esi",
        "edi" | "di" => "edi",
        "ebp" | "bp" => "ebp",
        "esp" | "sp" => "esp",
        _ => return None,
    })
}

pub struct TextInst {
    pub address: u64,
    pub mnemonic: String,
    pub operands: String,
    pub comment: Option<String>,
}

impl TextInst {
    pub fn parse(address: u64, body: &str) -> TextInst {
        let (code, comment) = match body.split_once(" ; ") {
            Some((c, n)) => (c, Some(n.trim().to_string())),
            None => (body, None),
        };
        let (mnemonic, operands) = code.trim().split_once(' ').unwrap_or((code.trim(), ""));
        TextInst {
            address,
            mnemonic: mnemonic.to_string(),
            operands: operands.trim().to_string(),
            comment,
        }
    }

    pub fn families(&self) -> BTreeSet<&'static str> {
        self.operands
            .split(|c: char| !c.is_ascii_alphanumeric() && c != '_')
            .filter_map(family_of)
            .collect()
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct OracleParam {
    pub name: String,
    pub context: Vec<u64>,
    pub tracked: BTreeSet<String>,
}

#[derive(Debug, PartialEq, Eq)]
pub struct OracleCodeprint {
    pub api: String,
    pub address: u64,
    pub params: Vec<OracleParam>,
}

/// Reverse pass from one origin over `window` (indices into `window`).
/// Returns included addresses in window order, the tracked set, and the
/// tracked-set size after every step (for monotonicity checks).
pub fn oracle_backtrack(window: &[&TextInst], origin: &TextInst) -> (Vec<u64>, BTreeSet<String>, Vec<usize>) {
    let value = origin.operands.trim();
    let mut keep = vec![false; window.len()];
    let mut tracked: BTreeSet<&str> = BTreeSet::new();
    let mut sizes = Vec::new();
    if let Some(fam) = family_of(value) {
        tracked.insert(fam);
        for (i, inst) in window.iter().enumerate().rev() {
            if inst.address == origin.address {
                continue;
            }
            if inst.mnemonic == "call" {
                keep[i] = true;
            } else {
                let fams = inst.families();
                if fams.iter().any(|f| tracked.contains(f)) {
                    keep[i] = true;
                    tracked.extend(fams);
                }
            }
            sizes.push(tracked.len());
        }
    }
    let mut context: Vec<u64> = Vec::new();
    let mut origin_placed = false;
    for (i, inst) in window.iter().enumerate() {
        if inst.address == origin.address {
            context.push(origin.address);
            origin_placed = true;
        } else if keep[i] {
            context.push(inst.address);
        }
    }
    if !origin_placed {
        context.push(origin.address);
    }
    (context, tracked.into_iter().map(String::from).collect(), sizes)
}

/// Forward scan plus backtracking over raw listing lines.
pub fn oracle_extract(lines: &[(u64, String)], arity: &BTreeMap<String, usize>) -> Vec<OracleCodeprint> {
    let insts: Vec<TextInst> = lines.iter().map(|(a, b)| TextInst::parse(*a, b)).collect();
    let mut window: Vec<&TextInst> = Vec::new();
    let mut boundary = 0;
    let mut out = Vec::new();
    for inst in &insts {
        if inst.mnemonic != "call" {
            window.push(inst);
            continue;
        }
        let target = inst.operands.as_str();
        if let Some(&n) = arity.get(target) {
            let mut picked: Vec<&TextInst> = Vec::new();
            for cand in window[boundary..].iter().rev() {
                if picked.len() >= n {
                    break;
                }
                if cand.mnemonic == "push" && cand.comment.is_some() {
                    picked.push(cand);
                }
            }
            picked.reverse();
            let params = picked
                .iter()
                .map(|origin| {
                    let (context, tracked, _) = oracle_backtrack(&window, origin);
                    OracleParam {
                        name: origin.comment.clone().unwrap(),
                        context,
                        tracked,
                    }
                })
                .collect();
            boundary = window.len();
            out.push(OracleCodeprint {
                api: target.to_string(),
                address: inst.address,
                params,
            });
        } else if target.starts_with("dword_")
            || target.starts_with("off_")
            || target.starts_with("unk_")
            || target.starts_with('[')
            || family_of(target).is_some()
        {
            // Indirect: not part of the trace.
        } else {
            window.push(inst);
        }
    }
    out
}

pub fn arity_table(catalog: &ApiCatalog) -> BTreeMap<String, usize> {
    catalog.iter().map(|e| (e.name.clone(), e.params.len())).collect()
}
