//! Semantics-preserving rewrites used to probe extractor robustness.
//!
//! Four in-place rewrites keep every instruction at its original address slot:
//! immediate substitution (`sub r, k` <-> `add r, -k`), whole-function register
//! reassignment, reordering of independent adjacent instructions, and
//! permutation of callee-saved register pushes. Code displacement moves a run
//! of instructions to a fresh block after the function and links it back with
//! two jumps. Call instructions and their operands are never altered.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::listing::{Function, Instruction, Label, Listing, Literal, MemTerm, Operand, Register};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    #[serde(rename = "instr-substitution")]
    Substitution,
    RegisterReassignment,
    #[serde(rename = "instr-reordering")]
    Reordering,
    SaveRegisterReordering,
    Displacement,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::Substitution,
        TransformKind::RegisterReassignment,
        TransformKind::Reordering,
        TransformKind::SaveRegisterReordering,
        TransformKind::Displacement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Substitution => "instr-substitution",
            TransformKind::RegisterReassignment => "register-reassignment",
            TransformKind::Reordering => "instr-reordering",
            TransformKind::SaveRegisterReordering => "save-register-reordering",
            TransformKind::Displacement => "displacement",
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown transform `{s}`")))
    }
}

/// One applied (or skipped) edit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub function: String,
    pub kind: TransformKind,
    pub detail: String,
    pub addresses: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformPlan {
    pub seed: u64,
    pub kinds: BTreeSet<TransformKind>,
    /// Explicit register pair to exchange; chosen from the seed when absent.
    pub register_swap: Option<(Register, Register)>,
    /// Probability that an eligible substitution or reordering site is rewritten.
    pub rate: f64,
    pub log: Vec<EditRecord>,
}

impl TransformPlan {
    pub fn new(seed: u64, kinds: impl IntoIterator<Item = TransformKind>) -> TransformPlan {
        TransformPlan {
            seed,
            kinds: kinds.into_iter().collect(),
            register_swap: None,
            rate: 1.0,
            log: Vec::new(),
        }
    }

    pub fn with_register_swap(mut self, a: Register, b: Register) -> TransformPlan {
        self.register_swap = Some((a, b));
        self
    }

    fn rng_for(&self, function: &str, kind: TransformKind) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(crate::seed::mix(self.seed, &[function.as_bytes(), kind.as_str().as_bytes()]))
    }

    fn record(&mut self, function: &str, kind: TransformKind, detail: String, addresses: Vec<u64>) {
        self.log.push(EditRecord {
            function: function.to_string(),
            kind,
            detail,
            addresses,
        });
    }
}

// ---------------------------------------------------------------------------
// Def/use model

const FLAGS: u16 = 1 << 8;

fn family_bit(r: Register) -> u16 {
    let idx = Register::FAMILIES.iter().position(|f| *f == r.family()).unwrap_or(0);
    1 << idx
}

fn bits(op: &Operand) -> u16 {
    op.registers().into_iter().fold(0, |acc, r| acc | family_bit(r))
}

#[derive(Debug, Clone, Copy, Default)]
struct Effects {
    uses: u16,
    defs: u16,
    mem_read: bool,
    mem_write: bool,
    /// Control flow or an instruction outside the modelled subset.
    barrier: bool,
}

impl Effects {
    /// `op` is read (and written when `write`): registers or memory.
    fn operand(&mut self, op: &Operand, read: bool, write: bool) {
        if op.is_memory_reference() {
            self.uses |= bits(op);
            self.mem_read |= read;
            self.mem_write |= write;
        } else {
            if read {
                self.uses |= bits(op);
            }
            if write {
                self.defs |= bits(op);
            }
        }
    }
}

fn effects(inst: &Instruction) -> Effects {
    let mut e = Effects::default();
    let ops = &inst.operands;
    let esp = family_bit(Register::Esp);
    match (inst.mnemonic.as_str(), ops.len()) {
        ("mov" | "movzx" | "movsx", 2) => {
            e.operand(&ops[0], false, true);
            e.operand(&ops[1], true, false);
        }
        ("lea", 2) => {
            e.operand(&ops[0], false, true);
            e.uses |= bits(&ops[1]);
        }
        ("add" | "sub" | "and" | "or" | "xor" | "shl" | "shr" | "sar" | "rol" | "ror" | "imul", 2) => {
            e.operand(&ops[0], true, true);
            e.operand(&ops[1], true, false);
            e.defs |= FLAGS;
        }
        ("adc" | "sbb", 2) => {
            e.operand(&ops[0], true, true);
            e.operand(&ops[1], true, false);
            e.uses |= FLAGS;
            e.defs |= FLAGS;
        }
        ("inc" | "dec" | "neg", 1) => {
            e.operand(&ops[0], true, true);
            e.defs |= FLAGS;
        }
        ("not", 1) => e.operand(&ops[0], true, true),
        ("cmp" | "test", 2) => {
            e.operand(&ops[0], true, false);
            e.operand(&ops[1], true, false);
            e.defs |= FLAGS;
        }
        ("xchg", 2) => {
            e.operand(&ops[0], true, true);
            e.operand(&ops[1], true, true);
        }
        ("push", 1) => {
            e.operand(&ops[0], true, false);
            e.uses |= esp;
            e.defs |= esp;
            e.mem_write = true;
        }
        ("pop", 1) => {
            e.operand(&ops[0], false, true);
            e.uses |= esp;
            e.defs |= esp;
            e.mem_read = true;
        }
        ("nop", 0) => {}
        _ => e.barrier = true,
    }
    if inst.is_control_flow() {
        e.barrier = true;
    }
    e
}

/// Whether two adjacent instructions can be exchanged without changing
/// register, flag, or memory state.
pub fn independent(a: &Instruction, b: &Instruction) -> bool {
    let (x, y) = (effects(a), effects(b));
    if x.barrier || y.barrier {
        return false;
    }
    let raw_war_waw = x.defs & (y.uses | y.defs) != 0 || y.defs & x.uses != 0;
    let memory = (x.mem_write && (y.mem_read || y.mem_write)) || (y.mem_write && x.mem_read);
    !raw_war_waw && !memory
}

fn reads_flags(inst: &Instruction) -> bool {
    let m = inst.mnemonic.as_str();
    (inst.is_branch() && m != "jmp" && !m.starts_with("loop") && m != "jecxz" && m != "jcxz")
        || matches!(m, "adc" | "sbb" | "pushf" | "pushfd" | "lahf" | "into")
        || m.starts_with("set")
        || m.starts_with("cmov")
}

fn label_targets(func: &Function) -> HashSet<u64> {
    func.instructions
        .iter()
        .flat_map(|i| i.operands.iter())
        .filter_map(|op| match op {
            Operand::Label(l) => Some(l.target),
            _ => None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// In-place rewrites

fn substitute(func: &mut Function, plan: &mut TransformPlan) {
    let mut rng = plan.rng_for(&func.name, TransformKind::Substitution);
    for i in 0..func.instructions.len() {
        let next_reads_flags = func.instructions.get(i + 1).is_some_and(reads_flags);
        let inst = &func.instructions[i];
        let flipped = match (inst.mnemonic.as_str(), inst.operands.as_slice()) {
            ("add", [Operand::Register(_), Operand::Immediate(k)]) => Some("sub").zip(k.value.checked_neg()),
            ("sub", [Operand::Register(_), Operand::Immediate(k)]) => Some("add").zip(k.value.checked_neg()),
            _ => None,
        };
        let Some((mnemonic, value)) = flipped else { continue };
        // add/sub set CF differently for negated operands.
        if next_reads_flags || !rng.gen_bool(plan.rate) {
            continue;
        }
        let before = inst.clone();
        let inst = &mut func.instructions[i];
        inst.mnemonic = mnemonic.to_string();
        inst.operands[1] = Operand::Immediate(Literal::decimal(value));
        let detail = format!("{} -> {}", strip_address(&before), strip_address(inst));
        let addr = inst.address;
        plan.record(&func.name, TransformKind::Substitution, detail, vec![addr]);
    }
}

fn strip_address(inst: &Instruction) -> String {
    let text = inst.to_string();
    text.split_once(": ").map_or(text.clone(), |(_, rest)| rest.to_string())
}

fn rename(op: &Operand, a: Register, b: Register) -> Operand {
    let swap = |r: Register| {
        if r.family() == a {
            r.with_family(b).expect("swap validated")
        } else if r.family() == b {
            r.with_family(a).expect("swap validated")
        } else {
            r
        }
    };
    match op {
        Operand::Register(r) => Operand::Register(swap(*r)),
        Operand::Memory(terms) => Operand::Memory(
            terms
                .iter()
                .map(|t| MemTerm {
                    sign: t.sign,
                    operand: rename(&t.operand, a, b),
                    scale: t.scale,
                })
                .collect(),
        ),
        other => other.clone(),
    }
}

/// Registers (all views) mentioned by the function, and the families that
/// appear in call operands.
fn register_usage(func: &Function) -> (BTreeSet<Register>, BTreeSet<Register>) {
    let mut used = BTreeSet::new();
    let mut in_calls = BTreeSet::new();
    for inst in &func.instructions {
        for r in inst.operands.iter().flat_map(|op| op.registers()) {
            used.insert(r);
            if inst.is_call() {
                in_calls.insert(r.family());
            }
        }
    }
    (used, in_calls)
}

fn check_swap(func: &Function, a: Register, b: Register) -> std::result::Result<(), String> {
    let (used, in_calls) = register_usage(func);
    for r in [a, b] {
        if matches!(r, Register::Esp | Register::Ebp) {
            return Err("stack and frame pointers are never reassigned".into());
        }
        if in_calls.contains(&r) {
            return Err(format!("{r} appears in a call operand"));
        }
    }
    if a == b {
        return Err("registers are identical".into());
    }
    for r in &used {
        for (from, to) in [(a, b), (b, a)] {
            if r.family() == from && r.with_family(to).is_none() {
                return Err(format!("{r} has no counterpart in the {to} family"));
            }
        }
    }
    Ok(())
}

fn callee_saved(r: Register) -> bool {
    matches!(r.family(), Register::Ebx | Register::Esi | Register::Edi)
}

fn reassign_registers(func: &mut Function, plan: &mut TransformPlan) -> Result<()> {
    let (a, b) = match plan.register_swap {
        Some((a, b)) => {
            let (a, b) = (a.family(), b.family());
            check_swap(func, a, b).map_err(|why| {
                Error::RegisterSwapRejected(a.name().to_string(), b.name().to_string(), why)
            })?;
            (a, b)
        }
        None => {
            let has_calls = func.instructions.iter().any(Instruction::is_call);
            let pool: Vec<Register> = [Register::Eax, Register::Ebx, Register::Ecx, Register::Edx, Register::Esi, Register::Edi]
                .into_iter()
                // eax carries call results.
                .filter(|r| !(has_calls && *r == Register::Eax))
                .collect();
            // Across a call, a callee-saved register must stay callee-saved.
            let same_class = |a: Register, b: Register| !has_calls || callee_saved(a) == callee_saved(b);
            let pairs: Vec<(Register, Register)> = pool
                .iter()
                .enumerate()
                .flat_map(|(i, &a)| pool[i + 1..].iter().map(move |&b| (a, b)))
                .filter(|&(a, b)| same_class(a, b) && check_swap(func, a, b).is_ok())
                .collect();
            let mut rng = plan.rng_for(&func.name, TransformKind::RegisterReassignment);
            match pairs.choose(&mut rng) {
                Some(&pair) => pair,
                None => {
                    plan.record(&func.name, TransformKind::RegisterReassignment, "no eligible register pair".into(), vec![]);
                    return Ok(());
                }
            }
        }
    };
    let mut touched = Vec::new();
    for inst in func.instructions.iter_mut().filter(|i| !i.is_call()) {
        let renamed: Vec<Operand> = inst.operands.iter().map(|op| rename(op, a, b)).collect();
        if renamed != inst.operands {
            inst.operands = renamed;
            touched.push(inst.address);
        }
    }
    plan.record(&func.name, TransformKind::RegisterReassignment, format!("{a} <-> {b}"), touched);
    Ok(())
}

fn reorder(func: &mut Function, plan: &mut TransformPlan) {
    let mut rng = plan.rng_for(&func.name, TransformKind::Reordering);
    let targets = label_targets(func);
    let insts = &mut func.instructions;
    let mut i = 0;
    while i + 1 < insts.len() {
        let (a, b) = (&insts[i], &insts[i + 1]);
        // A jump into the second slot would start at the moved-down instruction.
        if !targets.contains(&b.address) && independent(a, b) && rng.gen_bool(plan.rate) {
            let (addr_a, addr_b) = (a.address, b.address);
            insts.swap(i, i + 1);
            insts[i].address = addr_a;
            insts[i + 1].address = addr_b;
            let detail = format!("{} <-> {}", strip_address(&insts[i + 1]), strip_address(&insts[i]));
            plan.log.push(EditRecord {
                function: func.name.clone(),
                kind: TransformKind::Reordering,
                detail,
                addresses: vec![addr_a, addr_b],
            });
            i += 2;
        } else {
            i += 1;
        }
    }
}

fn single_register(inst: &Instruction, mnemonic: &str) -> Option<Register> {
    match (inst.mnemonic == mnemonic, inst.operands.as_slice()) {
        (true, [Operand::Register(r)]) => Some(*r),
        _ => None,
    }
}

fn is_frame_teardown(inst: &Instruction) -> bool {
    inst.mnemonic == "leave"
        || single_register(inst, "pop") == Some(Register::Ebp)
        || (inst.mnemonic == "mov"
            && inst.operands == [Operand::Register(Register::Esp), Operand::Register(Register::Ebp)])
}

fn reorder_saved_registers(func: &mut Function, plan: &mut TransformPlan) {
    let insts = &func.instructions;
    let mut start = 0;
    if insts.len() >= 2
        && single_register(&insts[0], "push") == Some(Register::Ebp)
        && insts[1].mnemonic == "mov"
        && insts[1].operands == [Operand::Register(Register::Ebp), Operand::Register(Register::Esp)]
    {
        start = 2;
    }
    if insts.get(start).is_some_and(|i| i.mnemonic == "sub" && i.operands.first() == Some(&Operand::Register(Register::Esp))) {
        start += 1;
    }
    let saved: Vec<Register> = insts[start..]
        .iter()
        .map_while(|i| {
            single_register(i, "push")
                .filter(|r| matches!(r, Register::Ebx | Register::Esi | Register::Edi) && i.comment.is_none())
        })
        .collect();
    let distinct: BTreeSet<Register> = saved.iter().copied().collect();
    if saved.len() < 2 || distinct.len() != saved.len() {
        return;
    }
    // Every return must restore exactly the mirrored sequence.
    let mut epilogues = Vec::new();
    let mirrored: Vec<Register> = saved.iter().rev().copied().collect();
    for k in (0..insts.len()).filter(|&k| insts[k].is_ret()) {
        let mut end = k;
        while end > 0 && is_frame_teardown(&insts[end - 1]) {
            end -= 1;
        }
        if end < saved.len() {
            break;
        }
        let pops: Vec<Register> = insts[end - saved.len()..end]
            .iter()
            .filter_map(|i| single_register(i, "pop"))
            .collect();
        // The pop run must lie after the push run.
        if pops != mirrored || end - saved.len() < start + saved.len() {
            break;
        }
        epilogues.push(end - saved.len());
    }
    let returns = insts.iter().filter(|i| i.is_ret()).count();
    if returns == 0 || epilogues.len() != returns {
        plan.record(
            &func.name,
            TransformKind::SaveRegisterReordering,
            "epilogue does not mirror prologue; skipped".into(),
            vec![],
        );
        return;
    }

    let mut rng = plan.rng_for(&func.name, TransformKind::SaveRegisterReordering);
    let mut order = saved.clone();
    order.shuffle(&mut rng);
    if order == saved {
        order.rotate_left(1);
    }
    let mut addresses = Vec::new();
    for (j, r) in order.iter().enumerate() {
        let inst = &mut func.instructions[start + j];
        inst.operands[0] = Operand::Register(*r);
        addresses.push(inst.address);
    }
    for &at in &epilogues {
        for (j, r) in order.iter().rev().enumerate() {
            let inst = &mut func.instructions[at + j];
            inst.operands[0] = Operand::Register(*r);
            addresses.push(inst.address);
        }
    }
    let names: Vec<&str> = order.iter().map(|r| r.name()).collect();
    plan.record(&func.name, TransformKind::SaveRegisterReordering, format!("saved order {}", names.join(", ")), addresses);
}

/// Applies the enabled in-place rewrites in a fixed order: substitution,
/// register reassignment, reordering, save-register reordering.
pub fn ipr_transform(func: &Function, plan: &mut TransformPlan) -> Result<Function> {
    if !(0.0..=1.0).contains(&plan.rate) {
        return Err(Error::InvalidArgument(format!("rate {} outside [0, 1]", plan.rate)));
    }
    let mut out = func.clone();
    if plan.kinds.contains(&TransformKind::Substitution) {
        substitute(&mut out, plan);
    }
    if plan.kinds.contains(&TransformKind::RegisterReassignment) {
        reassign_registers(&mut out, plan)?;
    }
    if plan.kinds.contains(&TransformKind::Reordering) {
        reorder(&mut out, plan);
    }
    if plan.kinds.contains(&TransformKind::SaveRegisterReordering) {
        reorder_saved_registers(&mut out, plan);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Displacement

fn jmp_to(address: u64, target: u64) -> Instruction {
    Instruction::new(address, "jmp", vec![Operand::Label(Label::to_address(target))])
}

/// Moves a seeded run of 2-4 straight-line instructions to a new block after
/// the function: the first slot becomes `jmp` to the block, and the block ends
/// with `jmp` back to the instruction that followed the run. Functions without
/// a suitable run are returned unchanged.
pub fn displace_code(func: &Function, plan: &mut TransformPlan) -> Function {
    let insts = &func.instructions;
    let targets = label_targets(func);
    let movable = |i: &Instruction| !i.is_control_flow();
    let mut candidates = Vec::new();
    for start in 0..insts.len() {
        for len in 2..=4 {
            let end = start + len;
            if end >= insts.len() {
                break;
            }
            let run = &insts[start..end];
            if run.iter().all(movable) && run[1..].iter().all(|i| !targets.contains(&i.address)) {
                candidates.push((start, len));
            }
        }
    }
    let mut rng = plan.rng_for(&func.name, TransformKind::Displacement);
    let Some(&(start, len)) = candidates.choose(&mut rng) else {
        plan.record(&func.name, TransformKind::Displacement, "no displaceable run; unchanged".into(), vec![]);
        return func.clone();
    };

    let size = |k: usize| insts.get(k + 1).map_or(1, |n| n.address - insts[k].address);
    let last = insts.last().expect("candidates imply instructions");
    let base = last.address + 1;
    let continuation = insts[start + len].address;

    let mut out: Vec<Instruction> = Vec::with_capacity(insts.len() + 2);
    out.extend_from_slice(&insts[..start]);
    out.push(jmp_to(insts[start].address, base));
    out.extend_from_slice(&insts[start + len..]);
    let mut cursor = base;
    let mut addresses = vec![insts[start].address];
    for (k, inst) in insts.iter().enumerate().skip(start).take(len) {
        let mut moved = inst.clone();
        moved.address = cursor;
        addresses.push(cursor);
        cursor += size(k).max(1);
        out.push(moved);
    }
    out.push(jmp_to(cursor, continuation));
    addresses.push(cursor);

    plan.record(
        &func.name,
        TransformKind::Displacement,
        format!("moved {len} instructions from {:X} to {base:X}", insts[start].address),
        addresses,
    );
    Function {
        name: func.name.clone(),
        instructions: out,
    }
}

// ---------------------------------------------------------------------------
// Listing level

fn relabel(label: &Label, delta: u64) -> Label {
    let prefix = label.name.rsplit_once('_').map_or("loc", |(p, _)| p);
    let target = label.target + delta;
    Label {
        name: format!("{prefix}_{target:X}"),
        target,
    }
}

fn relocate(func: &mut Function, delta: u64) {
    let own: HashSet<u64> = func.instructions.iter().map(|i| i.address).collect();
    for inst in &mut func.instructions {
        inst.address += delta;
        for op in &mut inst.operands {
            if let Operand::Label(l) = op {
                if own.contains(&l.target) {
                    *l = relabel(l, delta);
                }
            }
        }
    }
}

/// Transforms every function and shifts later functions whose range would
/// now overlap a grown predecessor.
pub fn transform_listing(listing: &Listing, plan: &mut TransformPlan) -> Result<Listing> {
    let mut functions = Vec::with_capacity(listing.functions.len());
    for func in &listing.functions {
        let mut f = ipr_transform(func, plan)?;
        if plan.kinds.contains(&TransformKind::Displacement) {
            f = displace_code(&f, plan);
        }
        functions.push(f);
    }

    let mut order: Vec<usize> = (0..functions.len()).collect();
    order.sort_by_key(|&i| functions[i].address_range().map(|r| r.0));
    let mut end: Option<u64> = None;
    for i in order {
        let Some((first, last)) = functions[i].address_range() else { continue };
        if let Some(prev) = end.filter(|&e| first <= e) {
            let delta = prev + 1 - first;
            relocate(&mut functions[i], delta);
            plan.record(
                &functions[i].name,
                TransformKind::Displacement,
                format!("relocated by {delta:X}h to avoid overlap"),
                vec![first + delta],
            );
            end = Some(last + delta);
        } else {
            end = Some(end.map_or(last, |e| e.max(last)));
        }
    }
    let out = Listing {
        source_id: listing.source_id.clone(),
        functions,
    };
    out.validate()?;
    Ok(out)
}
