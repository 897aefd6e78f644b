//! Codeprint extraction: locate API callsites, recover their parameters from
//! annotated pushes, and backtrack each parameter value through register
//! def-use links to collect the semantically related instructions.

use std::collections::{BTreeSet, HashSet};

use serde::Serialize;

use crate::listing::{classify_call_target, is_direct_call, ApiCatalog, CallTargetKind, Function, Instruction, Operand, Register};

/// One parameter of a callsite with the instructions that produced its value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamContext {
    pub name: Option<String>,
    pub value: Operand,
    /// Related instructions in window (program) order; includes the push.
    pub context: Vec<Instruction>,
    /// Register families collected while backtracking.
    pub tracked: BTreeSet<Register>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiCodeprint {
    pub api_name: String,
    pub callsite_address: u64,
    pub function_name: String,
    /// Parameters in push order (right-to-left argument order).
    pub params: Vec<ParamContext>,
}

/// A call through a register, memory expression, or data pointer that receives
/// stack arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObfuscatedCallsite {
    pub function_name: String,
    pub callsite_address: u64,
    pub target: Operand,
    pub params: Vec<ParamContext>,
}

/// Backtracks a parameter value through `window`.
///
/// `origin` is the instruction that hands the value to the callee (usually the
/// `push`). When the value is a register, the window is scanned in reverse:
/// direct calls are always kept, and any other instruction is kept when one
/// of its register families is already tracked, after which all of its
/// register families become tracked. A non-register value yields the origin
/// alone. `origin` may itself be part of the window; it is matched by address.
pub fn backtrack_parameter(value: &Operand, origin: &Instruction, window: &[Instruction]) -> ParamContext {
    let mut tracked = BTreeSet::new();
    let origin_pos = window.iter().position(|i| i.address == origin.address);
    let mut included: BTreeSet<usize> = BTreeSet::new();

    if let Some(reg) = value.register() {
        tracked.insert(reg.family());
        for (idx, inst) in window.iter().enumerate().rev() {
            if Some(idx) == origin_pos {
                continue;
            }
            if inst.is_call() {
                if is_direct_call(inst) {
                    included.insert(idx);
                }
                continue;
            }
            let families = inst.register_families();
            if families.iter().any(|f| tracked.contains(f)) {
                included.insert(idx);
                tracked.extend(families);
            }
        }
    }

    let mut context: Vec<Instruction> = included.iter().map(|&i| window[i].clone()).collect();
    match origin_pos {
        Some(pos) => {
            let at = included.range(..pos).count();
            context.insert(at, origin.clone());
        }
        None => context.push(origin.clone()),
    }
    ParamContext {
        name: origin.comment.clone(),
        value: value.clone(),
        context,
        tracked,
    }
}

/// Orders a function's instructions for the forward scan, splicing
/// `jmp out / block / jmp back` detours into place so that a relocated run
/// is visited where control actually reaches it. Detour jumps are dropped.
pub fn linearize(func: &Function) -> Vec<&Instruction> {
    let insts = &func.instructions;
    let mut consumed = vec![false; insts.len()];
    let mut out = Vec::with_capacity(insts.len());
    for i in 0..insts.len() {
        if consumed[i] {
            continue;
        }
        if let Some((start, end)) = detour_block(func, i, &consumed) {
            out.extend(&insts[start..end]);
            for flag in &mut consumed[start..=end] {
                *flag = true;
            }
            continue;
        }
        out.push(&insts[i]);
    }
    out
}

/// If `insts[i]` is `jmp L` where `L` begins a straight-line block ending in a
/// `jmp` back to `insts[i + 1]`, returns the block bounds `(start, back_jmp)`.
fn detour_block(func: &Function, i: usize, consumed: &[bool]) -> Option<(usize, usize)> {
    let insts = &func.instructions;
    let inst = &insts[i];
    if !inst.is_jmp() {
        return None;
    }
    let Some(Operand::Label(label)) = inst.operands.first() else {
        return None;
    };
    let continuation = insts.get(i + 1)?.address;
    let start = func.index_of_address(label.target)?;
    if start <= i + 1 {
        return None;
    }
    for k in start..insts.len() {
        if consumed[k] {
            return None;
        }
        let cand = &insts[k];
        if cand.is_jmp() {
            return match cand.operands.first() {
                Some(Operand::Label(back)) if back.target == continuation && k > start => Some((start, k)),
                _ => None,
            };
        }
        if cand.is_control_flow() {
            return None;
        }
    }
    None
}

/// Extracts one codeprint per known-API callsite of `func`.
///
/// The forward scan keeps every non-call instruction and every direct
/// non-API call. At an API call, annotated pushes are collected in reverse
/// back to the previous API call, up to the catalog arity, and each is
/// backtracked over everything collected so far in the function.
pub fn extract_codeprints(func: &Function, catalog: &ApiCatalog) -> Vec<ApiCodeprint> {
    let mut window: Vec<Instruction> = Vec::new();
    let mut boundary = 0usize;
    let mut out = Vec::new();

    for inst in linearize(func) {
        let Some(target) = inst.call_target() else {
            if !inst.is_call() {
                window.push(inst.clone());
            }
            continue;
        };
        match classify_call_target(target, catalog) {
            CallTargetKind::ExternalUserFn(_) => window.push(inst.clone()),
            CallTargetKind::Indirect(_) => {}
            CallTargetKind::KnownApi(api_name) => {
                let arity = catalog.arity(&api_name).unwrap_or(usize::MAX);
                let mut params = Vec::new();
                for cand in window[boundary..].iter().rev() {
                    if params.len() >= arity {
                        break;
                    }
                    if !cand.is_push() || cand.comment.is_none() {
                        continue;
                    }
                    if let Some(value) = cand.operands.first() {
                        params.push(backtrack_parameter(value, cand, &window));
                    }
                }
                params.reverse();
                boundary = window.len();
                out.push(ApiCodeprint {
                    api_name,
                    callsite_address: inst.address,
                    function_name: func.name.clone(),
                    params,
                });
            }
        }
    }
    out
}

/// Whether `inst` stores an argument into the outgoing stack area
/// (`mov [esp...], src`).
fn is_stack_store(inst: &Instruction) -> bool {
    inst.mnemonic == "mov"
        && matches!(inst.operands.first(), Some(op @ Operand::Memory(_))
            if op.registers().iter().any(|r| r.family() == Register::Esp))
}

/// Finds indirect callsites that receive arguments by `push` or stack `mov`.
///
/// Arguments are the pushes and stack stores since the previous call of any
/// kind, in program order; parameter names are not recorded.
pub fn detect_obfuscated_callsites(func: &Function, catalog: &ApiCatalog) -> Vec<ObfuscatedCallsite> {
    let mut window: Vec<Instruction> = Vec::new();
    let mut region = 0usize;
    let mut out = Vec::new();

    for inst in linearize(func) {
        let Some(target) = inst.call_target() else {
            if !inst.is_call() {
                window.push(inst.clone());
            }
            continue;
        };
        match classify_call_target(target, catalog) {
            CallTargetKind::ExternalUserFn(_) => window.push(inst.clone()),
            CallTargetKind::KnownApi(_) => {}
            CallTargetKind::Indirect(op) => {
                let params: Vec<ParamContext> = window[region..]
                    .iter()
                    .filter_map(|cand| {
                        let value = if cand.is_push() {
                            cand.operands.first()
                        } else if is_stack_store(cand) {
                            cand.operands.get(1)
                        } else {
                            None
                        }?;
                        let mut param = backtrack_parameter(value, cand, &window);
                        param.name = None;
                        Some(param)
                    })
                    .collect();
                if !params.is_empty() {
                    out.push(ObfuscatedCallsite {
                        function_name: func.name.clone(),
                        callsite_address: inst.address,
                        target: op,
                        params,
                    });
                }
            }
        }
        region = window.len();
    }
    out
}

/// Serializable view of a parameter, with instructions rendered as text.
#[derive(Debug, Clone, Serialize)]
pub struct ParamRecord {
    pub name: Option<String>,
    pub value: String,
    pub context: Vec<String>,
    pub tracked: Vec<Register>,
}

impl From<&ParamContext> for ParamRecord {
    fn from(p: &ParamContext) -> Self {
        ParamRecord {
            name: p.name.clone(),
            value: p.value.to_string(),
            context: p.context.iter().map(|i| i.to_string()).collect(),
            tracked: p.tracked.iter().copied().collect(),
        }
    }
}

/// One line of the `extract` output.
#[derive(Debug, Clone, Serialize)]
pub struct CodeprintRecord {
    pub source: String,
    pub function: String,
    pub address: u64,
    /// API name, or `None` for an obfuscated callsite.
    pub api: Option<String>,
    /// Indirect call target for obfuscated callsites.
    pub target: Option<String>,
    pub params: Vec<ParamRecord>,
}

impl CodeprintRecord {
    pub fn from_codeprint(source: &str, cp: &ApiCodeprint) -> Self {
        CodeprintRecord {
            source: source.to_string(),
            function: cp.function_name.clone(),
            address: cp.callsite_address,
            api: Some(cp.api_name.clone()),
            target: None,
            params: cp.params.iter().map(ParamRecord::from).collect(),
        }
    }

    pub fn from_obfuscated(source: &str, site: &ObfuscatedCallsite) -> Self {
        CodeprintRecord {
            source: source.to_string(),
            function: site.function_name.clone(),
            address: site.callsite_address,
            api: None,
            target: Some(site.target.to_string()),
            params: site.params.iter().map(ParamRecord::from).collect(),
        }
    }
}

/// Checks the structural invariants of a backtracked context against the
/// window it came from; returns a description of the first violation.
pub fn check_context(param: &ParamContext, origin: &Instruction, window: &[Instruction]) -> Result<(), String> {
    let position = |inst: &Instruction| -> Option<usize> {
        match window.iter().position(|w| w.address == inst.address) {
            Some(p) => Some(p),
            None if inst == origin => Some(window.len()),
            None => None,
        }
    };
    let mut seen = HashSet::new();
    let mut last: Option<usize> = None;
    for inst in &param.context {
        if !seen.insert(inst.address) {
            return Err(format!("duplicate instruction at {:#x}", inst.address));
        }
        let Some(pos) = position(inst) else {
            return Err(format!("instruction at {:#x} is outside the window", inst.address));
        };
        if last.is_some_and(|l| pos <= l) {
            return Err(format!("instruction at {:#x} is out of program order", inst.address));
        }
        last = Some(pos);
    }
    if !param.context.iter().any(|i| i.address == origin.address) {
        return Err("origin instruction missing from context".to_string());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::listing::{parse_instruction, parse_listing};

    fn catalog() -> ApiCatalog {
        ApiCatalog::parse(include_str!("../fixtures/catalog.txt")).unwrap()
    }

    fn function(text: &str) -> Function {
        parse_listing(text, "t").unwrap().functions.remove(0)
    }

    fn rendered(ctx: &[Instruction]) -> Vec<String> {
        ctx.iter().map(|i| i.to_string()).collect()
    }

    #[test]
    fn regdeletekeya_codeprint() {
        let f = function(include_str!("../fixtures/listings/fig4_regdeletekeya.lst"));
        let cps = extract_codeprints(&f, &catalog());
        assert_eq!(cps.len(), 1);
        let cp = &cps[0];
        assert_eq!(cp.api_name, "RegDeleteKeyA");
        assert_eq!(cp.callsite_address, 0x401018);
        assert_eq!(cp.params.len(), 2);
        assert_eq!(cp.params[0].name.as_deref(), Some("lpSubKey"));
        assert_eq!(cp.params[1].name.as_deref(), Some("hKey"));

        let hkey = &cp.params[1];
        assert_eq!(
            hkey.tracked,
            BTreeSet::from([Register::Eax, Register::Ebp, Register::Ecx])
        );
        assert_eq!(
            rendered(&hkey.context),
            vec![
                "401000: push ecx",
                "401001: lea ecx, [ebp+phkResult]",
                "40100A: call sub_403EBC",
                "40100F: mov eax, [ebp+phkResult]",
                "401017: push eax ; hKey",
            ]
        );
        assert_eq!(rendered(&cp.params[0].context), vec!["401012: push offset SubKey ; lpSubKey"]);
    }

    #[test]
    fn immediate_parameter_is_bare_push() {
        let push = parse_instruction("402130: push 6 ; lpType").unwrap();
        let window = vec![
            parse_instruction("402120: mov eax, 6").unwrap(),
            push.clone(),
        ];
        let p = backtrack_parameter(&push.operands[0], &push, &window);
        assert_eq!(p.context, vec![push]);
        assert!(p.tracked.is_empty());
    }

    #[test]
    fn no_calls_no_codeprints() {
        let f = function("FUNCTION f\n1: mov eax, ebx\n2: push eax ; x\n3: retn\nEND\n");
        assert!(extract_codeprints(&f, &catalog()).is_empty());
    }

    // Hand-simulated trace of the forward/reverse scans on the 12-line fixture:
    //
    //   WriteFile (arity 5): reverse over 403010..403003 picks the five
    //   annotated pushes; boundary moves past them.
    //   CloseHandle (arity 1): reverse over [403017] only -> hObject.
    //   hObject context: 403017 (origin), 403010 push esi (esi tracked),
    //   403000 mov esi,[ebp+hFile] (+ebp); 403005 lea eax,[ebp+..] was visited
    //   before ebp became tracked and stays out.
    #[test]
    fn consecutive_calls_do_not_share_pushes() {
        let f = function(include_str!("../fixtures/listings/consecutive_calls.lst"));
        assert_eq!(f.instructions.len(), 12);
        let cps = extract_codeprints(&f, &catalog());
        assert_eq!(cps.len(), 2);
        let names = |cp: &ApiCodeprint| -> Vec<String> { cp.params.iter().map(|p| p.name.clone().unwrap()).collect() };
        assert_eq!(cps[0].api_name, "WriteFile");
        assert_eq!(
            names(&cps[0]),
            vec!["lpOverlapped", "lpNumberOfBytesWritten", "nNumberOfBytesToWrite", "lpBuffer", "hFile"]
        );
        assert_eq!(cps[1].api_name, "CloseHandle");
        assert_eq!(names(&cps[1]), vec!["hObject"]);
        assert_eq!(
            rendered(&cps[1].params[0].context),
            vec![
                "403000: mov esi, [ebp+hFile]",
                "403010: push esi ; hFile",
                "403017: push esi ; hObject",
            ]
        );
        // lpNumberOfBytesWritten: eax -> lea (+ebp) -> mov esi,[ebp+hFile] (+esi);
        // the later push esi was passed before esi was tracked.
        assert_eq!(
            rendered(&cps[0].params[1].context),
            vec![
                "403000: mov esi, [ebp+hFile]",
                "403005: lea eax, [ebp+NumberOfBytesWritten]",
                "403008: push eax ; lpNumberOfBytesWritten",
            ]
        );
        assert_eq!(
            cps[0].params[1].tracked,
            BTreeSet::from([Register::Eax, Register::Esi, Register::Ebp])
        );
    }

    #[test]
    fn boundary_blocks_reuse_of_earlier_pushes() {
        // CryptReleaseContext wants two parameters but only one annotated push
        // follows the previous API call.
        let f = function(
            "FUNCTION f\n1: push esi ; hObject\n2: call CloseHandle\n3: push 0 ; dwFlags\n4: call CryptReleaseContext\nEND\n",
        );
        let cps = extract_codeprints(&f, &catalog());
        assert_eq!(cps[1].params.len(), 1);
        assert_eq!(cps[1].params[0].name.as_deref(), Some("dwFlags"));
    }

    #[test]
    fn arity_caps_collection_and_zero_arity_is_empty() {
        let f = function(
            "FUNCTION f\n1: push 1 ; a\n2: push 2 ; b\n3: push eax ; hObject\n4: call CloseHandle\n5: push 5 ; x\n6: call GetProcessHeap\nEND\n",
        );
        let cps = extract_codeprints(&f, &catalog());
        assert_eq!(cps[0].params.len(), 1);
        assert!(cps[1].params.is_empty());
    }

    #[test]
    fn unannotated_pushes_are_skipped() {
        let f = function("FUNCTION f\n1: push 1 ; hKey\n2: push ecx\n3: call CryptDestroyKey\nEND\n");
        let cps = extract_codeprints(&f, &catalog());
        assert_eq!(cps[0].params.len(), 1);
        assert_eq!(cps[0].params[0].name.as_deref(), Some("hKey"));
    }

    #[test]
    fn obfuscated_callsites() {
        let f = function(include_str!("../fixtures/listings/obfuscated.lst"));
        let sites = detect_obfuscated_callsites(&f, &catalog());
        let summary: Vec<(String, usize)> = sites.iter().map(|s| (s.target.to_string(), s.params.len())).collect();
        assert_eq!(
            summary,
            vec![
                ("dword_403000".to_string(), 2),
                ("[esi+var_A]".to_string(), 3),
                ("off_41A000".to_string(), 2),
            ]
        );
        // `call esi` has no pushes since the previous call.
        assert!(!sites.iter().any(|s| s.target.to_string() == "esi"));
        assert!(sites.iter().all(|s| s.params.iter().all(|p| p.name.is_none())));
        // the mov-based stores carry their source register as the value
        assert_eq!(sites[2].params[0].value.to_string(), "ecx");
    }

    #[test]
    fn call_esi_without_arguments_is_ignored() {
        let f = function("FUNCTION f\n1: mov esi, eax\n2: call esi\nEND\n");
        assert!(detect_obfuscated_callsites(&f, &catalog()).is_empty());
    }

    #[test]
    fn detours_are_linearized() {
        let f = function(
            "FUNCTION f\n10: mov eax, 1\n11: jmp loc_30\n13: push ebx ; hObject\n14: call CloseHandle\n15: retn\n30: push 0 ; x\n31: mov ebx, eax\n32: jmp loc_13\nEND\n",
        );
        let order: Vec<u64> = linearize(&f).iter().map(|i| i.address).collect();
        assert_eq!(order, vec![0x10, 0x30, 0x31, 0x13, 0x14, 0x15]);
        let cps = extract_codeprints(&f, &catalog());
        assert_eq!(
            rendered(&cps[0].params[0].context),
            vec!["10: mov eax, 1", "31: mov ebx, eax", "13: push ebx ; hObject"]
        );
    }

    #[test]
    fn ordinary_jumps_are_not_spliced() {
        let f = function("FUNCTION f\n10: jmp loc_20\n12: nop\n20: nop\n21: retn\nEND\n");
        let order: Vec<u64> = linearize(&f).iter().map(|i| i.address).collect();
        assert_eq!(order, vec![0x10, 0x12, 0x20, 0x21]);
    }
}
