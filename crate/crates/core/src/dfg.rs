//! Dataflow graph IR, its text format, and the scalar reference executor.
//!
//! Grammar (one statement per line, `#` starts a comment):
//!
//! ```text
//! loop <N>                      trip count of the single loop (default 1)
//! in <id> <addr> [+<stride>]    load; with a stride it streams addr + stride*i
//! out <src> <addr> [+<stride>]  store; with a stride it streams per iteration
//! <id> <op> <operand>...        add sub mul and or xor shl shr lt (2 operands),
//!                               sel p a b (p != 0 ? a : b)
//! <id> phi <init> <update>      loop-carried value: init at i = 0, then update
//! <id> load <addr>              load from a computed address
//! <id> store <value> <addr>     store to a computed address
//! ```
//!
//! Operands are node ids or constants `#k` with k in the i16 range; a comment
//! is a `#` not followed by a digit or minus sign. Addresses are decimal or
//! `0x` hex word addresses. Nodes that depend on a strided input or a phi
//! are evaluated once per iteration; all others once. A
//! non-strided `out` of a per-iteration value stores its final value.
//! Loads observe the image as it was before the kernel ran.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::memory::MemError;
use crate::pe::{alu, Opcode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Node(usize),
    Const(i32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Input {
        addr: u32,
        stride: Option<u32>,
    },
    Output {
        src: Operand,
        addr: u32,
        stride: Option<u32>,
    },
    /// Binary ALU op or SEL (three operands).
    Op {
        op: Opcode,
        args: Vec<Operand>,
    },
    Phi {
        init: Operand,
        update: Operand,
    },
    Load {
        addr: Operand,
    },
    Store {
        value: Operand,
        addr: Operand,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
}

impl Node {
    pub fn operands(&self) -> Vec<Operand> {
        match &self.kind {
            NodeKind::Input { .. } => vec![],
            NodeKind::Output { src, .. } => vec![*src],
            NodeKind::Op { args, .. } => args.clone(),
            NodeKind::Phi { init, update } => vec![*init, *update],
            NodeKind::Load { addr } => vec![*addr],
            NodeKind::Store { value, addr } => vec![*value, *addr],
        }
    }

    /// Operands that must be computed before this node within one
    /// evaluation (a phi's update comes from the previous iteration).
    pub fn forward_operands(&self) -> Vec<Operand> {
        match &self.kind {
            NodeKind::Phi { init, .. } => vec![*init],
            _ => self.operands(),
        }
    }

    pub fn is_memory(&self) -> bool {
        !matches!(self.kind, NodeKind::Op { .. } | NodeKind::Phi { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DfgError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cycle through `{node}` not closed by a phi")]
    CyclicGraph { node: String },
    #[error("line {line}: operand `{name}` is not defined")]
    UnboundOperand { line: usize, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dfg {
    pub nodes: Vec<Node>,
    pub trip_count: u32,
    /// Topological order ignoring phi back-edges.
    order: Vec<usize>,
    stream: Vec<bool>,
}

const KEYWORDS: [&str; 3] = ["in", "out", "loop"];

fn binary_op(word: &str) -> Option<Opcode> {
    Some(match word {
        "add" => Opcode::Add,
        "sub" => Opcode::Sub,
        "mul" => Opcode::Mul,
        "and" => Opcode::And,
        "or" => Opcode::Or,
        "xor" => Opcode::Xor,
        "shl" => Opcode::Shl,
        "shr" => Opcode::Shr,
        "lt" => Opcode::CmpLt,
        _ => return None,
    })
}

fn op_word(op: Opcode) -> &'static str {
    match op {
        Opcode::Add => "add",
        Opcode::Sub => "sub",
        Opcode::Mul => "mul",
        Opcode::And => "and",
        Opcode::Or => "or",
        Opcode::Xor => "xor",
        Opcode::Shl => "shl",
        Opcode::Shr => "shr",
        Opcode::CmpLt => "lt",
        Opcode::Sel => "sel",
        other => other.mnemonic(),
    }
}

fn parse_addr(tok: &str) -> Option<u32> {
    match tok.strip_prefix("0x") {
        Some(h) => u32::from_str_radix(h, 16).ok(),
        None => tok.parse().ok(),
    }
}

fn valid_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !KEYWORDS.contains(&s)
}

/// Operand text before name resolution.
enum RawOperand {
    Name(String),
    Const(i32),
}

enum RawKind {
    Input { addr: u32, stride: Option<u32> },
    Output { src: RawOperand, addr: u32, stride: Option<u32> },
    Op { op: Opcode, args: Vec<RawOperand> },
    Phi { init: RawOperand, update: RawOperand },
    Load { addr: RawOperand },
    Store { value: RawOperand, addr: RawOperand },
}

pub fn parse_dfg(text: &str) -> Result<Dfg, DfgError> {
    let mut raw: Vec<(usize, String, RawKind)> = Vec::new();
    let mut trip: Option<u32> = None;
    let mut outputs = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let err = |message: String| DfgError::Parse { line: lineno, message };
        // `#` also prefixes constants: a comment starts at a `#` token not
        // followed by a digit or minus sign
        let toks: Vec<&str> = line
            .split_whitespace()
            .take_while(|t| !(t.starts_with('#') && !t[1..].starts_with(|c: char| c.is_ascii_digit() || c == '-')))
            .collect();
        if toks.is_empty() {
            continue;
        }
        let operand = |t: &str| -> Result<RawOperand, DfgError> {
            if let Some(k) = t.strip_prefix('#') {
                let v: i32 = k.parse().map_err(|_| err(format!("bad constant `{t}`")))?;
                if i16::try_from(v).is_err() {
                    return Err(err(format!("constant {v} does not fit 16 bits")));
                }
                Ok(RawOperand::Const(v))
            } else if valid_name(t) {
                Ok(RawOperand::Name(t.to_string()))
            } else {
                Err(err(format!("bad operand `{t}`")))
            }
        };
        let addr_and_stride = |rest: &[&str]| -> Result<(u32, Option<u32>), DfgError> {
            let addr = rest.first().and_then(|t| parse_addr(t)).ok_or_else(|| err("expected an address".into()))?;
            let stride = match rest.get(1) {
                None => None,
                Some(t) => Some(
                    t.strip_prefix('+').and_then(|s| s.parse().ok()).ok_or_else(|| err(format!("bad stride `{t}`")))?,
                ),
            };
            if rest.len() > 2 {
                return Err(err("trailing tokens".into()));
            }
            Ok((addr, stride))
        };
        match toks[0] {
            "loop" => {
                if trip.is_some() {
                    return Err(err("only one loop is supported".into()));
                }
                let n: u32 = toks
                    .get(1)
                    .and_then(|t| t.parse().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| err("loop needs a positive trip count".into()))?;
                if toks.len() > 2 {
                    return Err(err("trailing tokens".into()));
                }
                trip = Some(n);
            }
            "in" => {
                let name = toks.get(1).ok_or_else(|| err("missing input id".into()))?;
                if !valid_name(name) {
                    return Err(err(format!("bad id `{name}`")));
                }
                let (addr, stride) = addr_and_stride(&toks[2..])?;
                raw.push((lineno, name.to_string(), RawKind::Input { addr, stride }));
            }
            "out" => {
                let src = operand(toks.get(1).ok_or_else(|| err("missing output source".into()))?)?;
                if matches!(src, RawOperand::Const(_)) {
                    return Err(err("output source must be a node".into()));
                }
                let (addr, stride) = addr_and_stride(&toks[2..])?;
                raw.push((lineno, format!("out{outputs}"), RawKind::Output { src, addr, stride }));
                outputs += 1;
            }
            name => {
                if !valid_name(name) {
                    return Err(err(format!("bad id `{name}`")));
                }
                let opword = toks.get(1).ok_or_else(|| err("missing operation".into()))?;
                let args = toks[2..].iter().map(|t| operand(t)).collect::<Result<Vec<_>, _>>()?;
                let given = args.len();
                let arity = |n: usize| {
                    if given == n {
                        Ok(())
                    } else {
                        Err(err(format!("`{opword}` takes {n} operands, got {given}")))
                    }
                };
                let mut args = args.into_iter();
                let kind = match *opword {
                    "phi" => {
                        arity(2)?;
                        RawKind::Phi { init: args.next().unwrap(), update: args.next().unwrap() }
                    }
                    "load" => {
                        arity(1)?;
                        RawKind::Load { addr: args.next().unwrap() }
                    }
                    "store" => {
                        arity(2)?;
                        RawKind::Store { value: args.next().unwrap(), addr: args.next().unwrap() }
                    }
                    "sel" => {
                        arity(3)?;
                        RawKind::Op { op: Opcode::Sel, args: args.collect() }
                    }
                    w => {
                        let op = binary_op(w).ok_or_else(|| err(format!("unknown operation `{w}`")))?;
                        arity(2)?;
                        RawKind::Op { op, args: args.collect() }
                    }
                };
                raw.push((lineno, name.to_string(), kind));
            }
        }
    }

    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, (line, name, _)) in raw.iter().enumerate() {
        if index.insert(name.as_str(), i).is_some() {
            return Err(DfgError::Parse { line: *line, message: format!("duplicate id `{name}`") });
        }
    }
    let mut nodes = Vec::with_capacity(raw.len());
    for (line, name, kind) in &raw {
        let resolve = |o: &RawOperand| -> Result<Operand, DfgError> {
            match o {
                RawOperand::Const(k) => Ok(Operand::Const(*k)),
                RawOperand::Name(n) => index
                    .get(n.as_str())
                    .map(|&i| Operand::Node(i))
                    .ok_or_else(|| DfgError::UnboundOperand { line: *line, name: n.clone() }),
            }
        };
        let kind = match kind {
            RawKind::Input { addr, stride } => NodeKind::Input { addr: *addr, stride: *stride },
            RawKind::Output { src, addr, stride } => {
                NodeKind::Output { src: resolve(src)?, addr: *addr, stride: *stride }
            }
            RawKind::Op { op, args } => {
                NodeKind::Op { op: *op, args: args.iter().map(resolve).collect::<Result<_, _>>()? }
            }
            RawKind::Phi { init, update } => NodeKind::Phi { init: resolve(init)?, update: resolve(update)? },
            RawKind::Load { addr } => NodeKind::Load { addr: resolve(addr)? },
            RawKind::Store { value, addr } => NodeKind::Store { value: resolve(value)?, addr: resolve(addr)? },
        };
        nodes.push(Node { name: name.clone(), kind });
    }
    for (i, n) in nodes.iter().enumerate() {
        let produces = |o: &Operand| match o {
            Operand::Node(j) => !matches!(nodes[*j].kind, NodeKind::Output { .. } | NodeKind::Store { .. }),
            Operand::Const(_) => true,
        };
        if !n.operands().iter().all(produces) {
            return Err(DfgError::Parse {
                line: raw[i].0,
                message: format!("`{}` reads a node that produces no value", n.name),
            });
        }
    }
    Dfg::new(nodes, trip.unwrap_or(1)).map_err(|e| match e {
        DfgError::Parse { line: 0, message } => {
            // attach the line of the offending phi
            let line = raw.iter().find(|(_, name, _)| message.contains(&format!("`{name}`"))).map_or(0, |r| r.0);
            DfgError::Parse { line, message }
        }
        other => other,
    })
}

impl Dfg {
    /// Builds and validates a graph from resolved nodes.
    pub fn new(nodes: Vec<Node>, trip_count: u32) -> Result<Dfg, DfgError> {
        let order = topo_order(&nodes)?;
        let mut stream = vec![false; nodes.len()];
        for &i in &order {
            stream[i] = match &nodes[i].kind {
                NodeKind::Input { stride, .. } | NodeKind::Output { stride, .. } => stride.is_some(),
                NodeKind::Phi { .. } => true,
                _ => nodes[i].operands().iter().any(|o| matches!(o, Operand::Node(j) if stream[*j])),
            };
        }
        for n in &nodes {
            if let NodeKind::Phi { init: Operand::Node(j), .. } = n.kind {
                if stream[j] {
                    return Err(DfgError::Parse {
                        line: 0,
                        message: format!("phi `{}` needs a loop-invariant initial value", n.name),
                    });
                }
            }
        }
        Ok(Dfg { nodes, trip_count, order, stream })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Topological order; a phi precedes its users and its update follows.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Whether node `i` is evaluated once per loop iteration.
    pub fn is_stream(&self, i: usize) -> bool {
        self.stream[i]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// (producer, consumer, operand slot) for every node operand.
    pub fn edges(&self) -> Vec<(usize, usize, usize)> {
        let mut e = Vec::new();
        for (c, n) in self.nodes.iter().enumerate() {
            for (slot, o) in n.operands().iter().enumerate() {
                if let Operand::Node(p) = o {
                    e.push((*p, c, slot));
                }
            }
        }
        e
    }

    /// Users of node `i`.
    pub fn users(&self, i: usize) -> Vec<usize> {
        let mut u: Vec<usize> = self.edges().into_iter().filter(|e| e.0 == i).map(|e| e.1).collect();
        u.dedup();
        u
    }

    /// ASAP level: inputs and constants-only nodes are level 0.
    pub fn levels(&self) -> Vec<usize> {
        let mut level = vec![0; self.nodes.len()];
        for &i in &self.order {
            level[i] = self.nodes[i]
                .forward_operands()
                .iter()
                .filter_map(|o| match o {
                    Operand::Node(j) => Some(level[*j] + 1),
                    Operand::Const(_) => None,
                })
                .max()
                .unwrap_or(0);
        }
        level
    }

    /// Highest word address any affine memory node touches, plus one.
    pub fn affine_extent(&self) -> u32 {
        let last = self.trip_count.saturating_sub(1);
        self.nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Input { addr, stride } | NodeKind::Output { addr, stride, .. } => {
                    Some(addr + stride.unwrap_or(0) * last + 1)
                }
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }
}

fn topo_order(nodes: &[Node]) -> Result<Vec<usize>, DfgError> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; nodes.len()];
    let mut order = Vec::with_capacity(nodes.len());
    for root in 0..nodes.len() {
        if state[root] != 0 {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        state[root] = 1;
        while let Some(&mut (n, ref mut k)) = stack.last_mut() {
            let deps = nodes[n].forward_operands();
            if let Some(o) = deps.get(*k) {
                *k += 1;
                if let Operand::Node(j) = *o {
                    match state[j] {
                        0 => {
                            state[j] = 1;
                            stack.push((j, 0));
                        }
                        1 => return Err(DfgError::CyclicGraph { node: nodes[j].name.clone() }),
                        _ => {}
                    }
                }
            } else {
                state[n] = 2;
                order.push(n);
                stack.pop();
            }
        }
    }
    // stable order: by ASAP level, then by node index
    let mut level = vec![0usize; nodes.len()];
    for &i in &order {
        level[i] = nodes[i]
            .forward_operands()
            .iter()
            .filter_map(|o| match o {
                Operand::Node(j) => Some(level[*j] + 1),
                Operand::Const(_) => None,
            })
            .max()
            .unwrap_or(0);
    }
    let mut sorted: Vec<usize> = (0..nodes.len()).collect();
    sorted.sort_by_key(|&i| (level[i], i));
    Ok(sorted)
}

impl fmt::Display for Dfg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = |o: &Operand| match o {
            Operand::Node(i) => self.nodes[*i].name.clone(),
            Operand::Const(k) => format!("#{k}"),
        };
        if self.trip_count != 1 {
            writeln!(f, "loop {}", self.trip_count)?;
        }
        for n in &self.nodes {
            let stride = |s: &Option<u32>| s.map(|s| format!(" +{s}")).unwrap_or_default();
            match &n.kind {
                NodeKind::Input { addr, stride: s } => writeln!(f, "in {} {addr}{}", n.name, stride(s))?,
                NodeKind::Output { src, addr, stride: s } => writeln!(f, "out {} {addr}{}", name(src), stride(s))?,
                NodeKind::Op { op, args } => {
                    let a: Vec<String> = args.iter().map(name).collect();
                    writeln!(f, "{} {} {}", n.name, op_word(*op), a.join(" "))?
                }
                NodeKind::Phi { init, update } => writeln!(f, "{} phi {} {}", n.name, name(init), name(update))?,
                NodeKind::Load { addr } => writeln!(f, "{} load {}", n.name, name(addr))?,
                NodeKind::Store { value, addr } => writeln!(f, "{} store {} {}", n.name, name(value), name(addr))?,
            }
        }
        Ok(())
    }
}

/// Scalar evaluation of `dfg` over a shared-memory image, with the same
/// 32-bit wrapping semantics as the PE ALU. Returns the image after all
/// stores.
pub fn reference_execute(dfg: &Dfg, image: &[u32]) -> Result<Vec<u32>, MemError> {
    let limit = image.len() as u32;
    let read = |addr: u32| image.get(addr as usize).copied().ok_or(MemError::AddressOutOfRange { addr, limit });
    let mut out = image.to_vec();
    let write = |out: &mut Vec<u32>, addr: u32, v: u32| -> Result<(), MemError> {
        *out.get_mut(addr as usize).ok_or(MemError::AddressOutOfRange { addr, limit })? = v;
        Ok(())
    };
    let mut val: Vec<u32> = vec![0; dfg.len()];
    let get = |val: &[u32], o: &Operand| match o {
        Operand::Node(i) => val[*i],
        Operand::Const(k) => *k as u32,
    };

    let eval = |i: usize, iter: u32, val: &mut Vec<u32>, out: &mut Vec<u32>, prev: &[u32]| -> Result<(), MemError> {
        let n = &dfg.nodes[i];
        match &n.kind {
            NodeKind::Input { addr, stride } => {
                val[i] = read(addr.wrapping_add(stride.unwrap_or(0).wrapping_mul(iter)))?;
            }
            NodeKind::Output { src, addr, stride } => {
                if stride.is_some() || !matches!(src, Operand::Node(j) if dfg.is_stream(*j)) {
                    let a = addr.wrapping_add(stride.unwrap_or(0).wrapping_mul(iter));
                    write(out, a, get(val, src))?;
                }
            }
            NodeKind::Op { op, args } => {
                val[i] = if *op == Opcode::Sel {
                    alu(Opcode::Sel, get(val, &args[0]), get(val, &args[1]), get(val, &args[2]))
                } else {
                    alu(*op, get(val, &args[0]), get(val, &args[1]), 0)
                };
            }
            NodeKind::Phi { init, update } => {
                val[i] = if iter == 0 { get(val, init) } else { get(prev, update) };
            }
            NodeKind::Load { addr } => val[i] = read(get(val, addr))?,
            NodeKind::Store { value, addr } => write(out, get(val, addr), get(val, value))?,
        }
        Ok(())
    };

    let order = dfg.order().to_vec();
    for &i in &order {
        if !dfg.is_stream(i) {
            eval(i, 0, &mut val, &mut out, &[])?;
        }
    }
    let mut prev = val.clone();
    for iter in 0..dfg.trip_count {
        for &i in &order {
            if dfg.is_stream(i) {
                eval(i, iter, &mut val, &mut out, &prev)?;
            }
        }
        prev.clone_from(&val);
    }
    for n in &dfg.nodes {
        if let NodeKind::Output { src: Operand::Node(j), addr, stride: None } = n.kind {
            if dfg.is_stream(j) {
                write(&mut out, addr, val[j])?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_add_of_constants() {
        let g = parse_dfg("x add #2 #3").unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.edges().is_empty());
    }

    #[test]
    fn diamond_has_four_edges() {
        let g = parse_dfg("a add #1 #2\nm mul a #3\nd add a #4\ns sub m d\n").unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.edges().len(), 4);
        assert_eq!(g.levels(), vec![0, 1, 1, 2]);
    }

    #[test]
    fn cycles_need_a_phi() {
        let e = parse_dfg("a add b #1\nb add a #1").unwrap_err();
        assert!(matches!(e, DfgError::CyclicGraph { .. }));
        assert!(parse_dfg("loop 4\np phi #0 u\nu add p #1\nout u 0").is_ok());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_dfg("x add a #1"), Err(DfgError::UnboundOperand { line: 1, .. })));
        assert!(matches!(parse_dfg("x frob #1 #2"), Err(DfgError::Parse { line: 1, .. })));
        assert!(matches!(parse_dfg("x add #1"), Err(DfgError::Parse { .. })));
        assert!(matches!(parse_dfg("x add #1 #70000"), Err(DfgError::Parse { .. })));
        assert!(matches!(parse_dfg("x add #1 #2\nx add #1 #2"), Err(DfgError::Parse { line: 2, .. })));
        assert!(matches!(parse_dfg("loop 2\nloop 3"), Err(DfgError::Parse { line: 2, .. })));
        assert!(matches!(parse_dfg("loop 4\nin a 0 +1\np phi a u\nu add p #1"), Err(DfgError::Parse { line: 3, .. })));
    }

    #[test]
    fn comments_and_display_round_trip() {
        let text = "loop 4 # four\nin a 0 +1\nin b 4 +1  # second\ns add a b\nout s 8 +1\n";
        let g = parse_dfg(text).unwrap();
        assert_eq!(parse_dfg(&g.to_string()).unwrap(), g);
    }

    #[test]
    fn vector_add_reference() {
        let g = parse_dfg("loop 2\nin a 0 +1\nin b 2 +1\ns add a b\nout s 4 +1").unwrap();
        let out = reference_execute(&g, &[1, 2, 3, 4, 0, 0]).unwrap();
        assert_eq!(&out[4..], &[4, 6]);
    }

    #[test]
    fn reduction_and_final_value() {
        let g = parse_dfg("loop 4\nin x 0 +1\np phi #10 u\nu add p x\nout u 8").unwrap();
        let out = reference_execute(&g, &[1, 2, 3, 4, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(out[8], 20);
    }

    #[test]
    fn wrapping_and_indirect_access() {
        let g = parse_dfg("in i 0\nl load i\nm mul l #-1\nst store m #3").unwrap();
        let out = reference_execute(&g, &[2, 0, 5, 0]).unwrap();
        assert_eq!(out[3], (-5i32) as u32);
        let g = parse_dfg("in i 0\nl load i").unwrap();
        assert!(reference_execute(&g, &[9]).is_err());
    }
}
