//! Static mapper from a [`Dfg`] to per-PE configuration timelines.
//!
//! Time is counted in control steps: every PE executes one word per step in
//! lockstep, so a word placed at step `t` on PE `p` produces a value that
//! sits in `p`'s accumulator from `t` on and drives `p`'s output port during
//! `t + 1` only. A consumer at `(c, t)` therefore reads an operand either
//! from a neighbor that produced it at `t - 1`, or from its own accumulator
//! if nothing executed on `c` since the value arrived.
//!
//! Only nodes whose value reaches an output or store are placed. They go in
//! depth-first post-order from the sinks, taller operand cones first. For
//! each node every (PE, step) candidate is costed with a shortest-path
//! search over time-space tokens: a value can be held in an idle
//! accumulator (free), re-driven with `ROUTE ACC`, moved one hop with
//! `ROUTE <port>`, or, for inputs, loaded a second time on a neighboring
//! LSU. Per-iteration values (streams) move as whole `ROUTE` words repeated
//! by the ICB. Because the mesh is bipartite, a stream root starts only on
//! steps where `row + col + step` is even, so two streams can always meet.
//!
//! A candidate is kept only if the users it enables can still be placed
//! soon and every value waiting for a consumer can still travel. When a
//! node finds no slot at all, the previous node moves to its next candidate
//! (bounded chronological backtracking).
//!
//! A phi and its update collapse into one accumulating word whose phi
//! operand is `ACC`; the initial value is put into that PE's accumulator one
//! step before the loop word starts.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::arch::{ArchParams, Coord, ExecMode, PeType};
use crate::bitstream::{decode_bitstream, encode_bitstream, BitstreamError, PeRecord};
use crate::dfg::{Dfg, NodeKind, Operand};
use crate::interconnect::{neighbors, Direction};
use crate::pe::{check_word, ConfigWord, Opcode, SrcSel};

/// Largest repeat count a single word can carry.
pub const MAX_ITERS: u32 = 255;
/// Steps searched past a node's earliest start before giving up.
const HORIZON: u32 = 384;
const MAX_RETRIES: usize = 256;
const LOOKAHEAD: u32 = 64;
const SLACK: u32 = 3;
const MAX_BACKTRACKS: usize = 32;
/// Steps a not yet consumed value must be able to survive.
const LIVE_SPAN: u32 = 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MapError {
    #[error("node `{node}` is unmappable: {reason}")]
    Unmappable { node: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TimedWord {
    pub step: u32,
    pub duration: u32,
    pub word: ConfigWord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Placement {
    pub pe: Coord,
    pub step: u32,
    pub duration: u32,
}

/// A `ROUTE` word moving (or re-driving) a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RouteWord {
    pub value: usize,
    pub pe: Coord,
    pub step: u32,
    pub duration: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mapping {
    /// Per DFG node; `None` for a phi folded into its update and for nodes
    /// whose value never reaches an output or store.
    pub placements: Vec<Option<Placement>>,
    pub routes: Vec<RouteWord>,
    /// `ROUTE IMM` words materializing constants.
    pub const_words: usize,
    /// Extra LOAD words re-reading an input next to a consumer.
    pub reloads: usize,
    /// Non-NOP words per PE, ordered by step.
    pub timeline: BTreeMap<Coord, Vec<TimedWord>>,
    /// Number of steps until the last word finishes.
    pub length: u32,
}

impl Mapping {
    pub fn route_count(&self) -> usize {
        self.routes.len()
    }

    pub fn pes_used(&self) -> usize {
        self.timeline.len()
    }

    pub fn lsus_used(&self, params: &ArchParams) -> usize {
        self.timeline.keys().filter(|&&c| params.pe_type(c) == PeType::Lsu).count()
    }

    pub fn summary(&self, params: &ArchParams) -> String {
        format!(
            "steps={} routes={} consts={} reloads={} pes={} lsus={}",
            self.length,
            self.route_count(),
            self.const_words,
            self.reloads,
            self.pes_used(),
            self.lsus_used(params)
        )
    }
}

fn unmappable(dfg: &Dfg, node: usize, reason: impl Into<String>) -> MapError {
    MapError::Unmappable { node: dfg.nodes[node].name.clone(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Src {
    Value(usize),
    Gen(i32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Src0,
    Src1,
    /// Read through the accumulator without a select (SEL's else operand).
    AccOnly,
    /// Accumulator contents before a folded loop starts.
    Init,
}

#[derive(Debug, Clone, Copy)]
struct Need {
    field: Field,
    src: Src,
}

#[derive(Debug, Clone)]
struct Task {
    node: usize,
    dur: u32,
    streaming: bool,
    lsu_only: bool,
    has_users: bool,
    template: ConfigWord,
    needs: Vec<Need>,
}

fn fits_i8(k: i32) -> bool {
    i8::try_from(k).is_ok()
}

/// Puts constant operands of `a` (src0) and `b` (src1) into the immediate
/// where possible; returns the ones that still need a value.
fn inline_consts(word: &mut ConfigWord, a: Option<Operand>, b: Option<Operand>) -> (Option<Src>, Option<Src>) {
    let as_src = |o: Operand| match o {
        Operand::Node(v) => Src::Value(v),
        Operand::Const(k) => Src::Gen(k),
    };
    match (a, b) {
        (Some(Operand::Const(x)), Some(Operand::Const(y))) if fits_i8(x) && fits_i8(y) => {
            word.src0 = SrcSel::ImmHi;
            word.src1 = SrcSel::ImmLo;
            word.imm = (u16::from(x as u8) << 8) | u16::from(y as u8);
            (None, None)
        }
        (Some(Operand::Const(x)), other) => {
            word.src0 = SrcSel::Imm;
            word.imm = x as u16;
            (None, other.map(as_src))
        }
        (other, Some(Operand::Const(y))) => {
            word.src1 = SrcSel::Imm;
            word.imm = y as u16;
            (other.map(as_src), None)
        }
        (a, b) => (a.map(as_src), b.map(as_src)),
    }
}

fn check_addr(dfg: &Dfg, node: usize, addr: i64) -> Result<u16, MapError> {
    u16::try_from(addr).map_err(|_| unmappable(dfg, node, format!("address {addr} exceeds the 16-bit base")))
}

fn check_stride(dfg: &Dfg, node: usize, stride: Option<u32>, streaming: bool) -> Result<u8, MapError> {
    match stride {
        Some(s) if streaming => u8::try_from(s)
            .ok()
            .filter(|&s| s <= 15)
            .ok_or_else(|| unmappable(dfg, node, format!("stride {s} exceeds 15"))),
        _ => Ok(0),
    }
}

/// Phi nodes keyed by the update node they fold into.
fn fold_phis(dfg: &Dfg) -> Result<HashMap<usize, usize>, MapError> {
    let mut folded = HashMap::new();
    for (p, n) in dfg.nodes.iter().enumerate() {
        let NodeKind::Phi { update, .. } = n.kind else { continue };
        let bad = |why: &str| unmappable(dfg, p, why.to_string());
        let Operand::Node(u) = update else {
            return Err(bad("the update must be a node"));
        };
        if dfg.users(p) != vec![u] {
            return Err(bad("a phi may only feed its own update"));
        }
        let NodeKind::Op { op, args } = &dfg.nodes[u].kind else {
            return Err(bad("the update must be an ALU operation"));
        };
        let slots: Vec<usize> = (0..args.len()).filter(|&k| args[k] == Operand::Node(p)).collect();
        let ok = match (op, slots.as_slice()) {
            (Opcode::Sel, [2]) => true,
            (Opcode::Sel, _) => false,
            (_, [_]) => true,
            _ => false,
        };
        if !ok {
            return Err(bad("the phi must appear once in the update (as the else operand of sel)"));
        }
        if folded.insert(u, p).is_some() {
            return Err(bad("two phis share one update"));
        }
    }
    Ok(folded)
}

fn build_task(dfg: &Dfg, i: usize, folded: &HashMap<usize, usize>, trip: u32) -> Result<Option<Task>, MapError> {
    let node = &dfg.nodes[i];
    let streaming = dfg.is_stream(i) && trip > 1;
    let dur = if streaming { trip } else { 1 };
    let mut needs = Vec::new();
    let mut push = |field: Field, src: Option<Src>| {
        if let Some(src) = src {
            needs.push(Need { field, src });
        }
    };
    let (template, lsu_only) = match &node.kind {
        NodeKind::Phi { .. } => return Ok(None),
        NodeKind::Input { addr, stride } => {
            let mut w = ConfigWord::new(Opcode::Load).with_imm(check_addr(dfg, i, i64::from(*addr))?);
            w.shared_reg_idx = check_stride(dfg, i, *stride, streaming)?;
            (w, true)
        }
        NodeKind::Output { src, addr, stride } => {
            let mut w = ConfigWord::new(Opcode::Store).with_imm(check_addr(dfg, i, i64::from(*addr))?);
            w.shared_reg_idx = check_stride(dfg, i, *stride, streaming)?;
            let Operand::Node(v) = *src else { unreachable!("outputs read nodes") };
            push(Field::Src0, Some(Src::Value(v)));
            (w, true)
        }
        NodeKind::Load { addr } => {
            let mut w = ConfigWord::new(Opcode::Load);
            match *addr {
                Operand::Const(k) => w.imm = check_addr(dfg, i, i64::from(k))?,
                Operand::Node(v) => push(Field::Src1, Some(Src::Value(v))),
            }
            (w, true)
        }
        NodeKind::Store { value, addr } => {
            let mut w = ConfigWord::new(Opcode::Store);
            match *value {
                Operand::Const(k) => push(Field::Src0, Some(Src::Gen(k))),
                Operand::Node(v) => push(Field::Src0, Some(Src::Value(v))),
            }
            match *addr {
                Operand::Const(k) => w.imm = check_addr(dfg, i, i64::from(k))?,
                Operand::Node(v) => push(Field::Src1, Some(Src::Value(v))),
            }
            (w, true)
        }
        NodeKind::Op { op, args } => {
            let mut w = ConfigWord::new(*op);
            let phi = folded.get(&i).copied();
            let is_phi = |o: &Operand| phi.is_some_and(|p| *o == Operand::Node(p));
            let slot = |k: usize| Some(args[k]).filter(|o| !is_phi(o));
            let (a, b) = (slot(0), slot(1));
            let (a, b) = inline_consts(&mut w, a, b);
            if is_phi(&args[0]) {
                w.src0 = SrcSel::Acc;
            }
            if is_phi(&args[1]) {
                w.src1 = SrcSel::Acc;
            }
            push(Field::Src0, a);
            push(Field::Src1, b);
            if *op == Opcode::Sel {
                if let Some(o) = slot(2) {
                    if streaming {
                        return Err(unmappable(dfg, i, "a per-iteration sel needs its else operand loop-carried"));
                    }
                    push(
                        Field::AccOnly,
                        Some(match o {
                            Operand::Node(v) => Src::Value(v),
                            Operand::Const(k) => Src::Gen(k),
                        }),
                    );
                }
            }
            if let Some(p) = phi {
                let NodeKind::Phi { init, .. } = dfg.nodes[p].kind else { unreachable!() };
                push(
                    Field::Init,
                    Some(match init {
                        Operand::Node(v) => Src::Value(v),
                        Operand::Const(k) => Src::Gen(k),
                    }),
                );
            }
            (w, false)
        }
    };
    let template = template.with_iters(dur as u8);
    let has_users = !dfg.users(i).is_empty();
    Ok(Some(Task { node: i, dur, streaming, lsu_only, has_users, template, needs }))
}

#[derive(Debug, Clone, Default)]
struct PeLine {
    words: BTreeMap<u32, (u32, ConfigWord)>,
    holds: BTreeMap<u32, usize>,
}

impl PeLine {
    fn overlaps(&self, a: u32, b: u32) -> bool {
        self.words.range(..b).next_back().is_some_and(|(&s, &(d, _))| s + d > a)
    }

    fn word_count(&self) -> usize {
        let mut count = 0;
        let mut end = 0;
        for (&s, &(d, _)) in &self.words {
            count += (s - end).div_ceil(MAX_ITERS) as usize + 1;
            end = s + d;
        }
        count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    Hold { pe: usize, step: u32 },
    Route { pe: usize, step: u32, dur: u32, sel: SrcSel },
}

#[derive(Debug, Clone)]
struct Board {
    lines: Vec<PeLine>,
    /// Per value: (pe, step, fresh) where the value is in that PE's
    /// accumulator at the end of `step`; fresh means it also drives the
    /// port during `step + 1`.
    scalar_tokens: Vec<Vec<(usize, u32, bool)>>,
    /// Per value: (pe, first step) of a per-iteration element stream.
    stream_tokens: Vec<Vec<(usize, u32)>>,
    routes: Vec<(usize, usize, u32, u32)>,
    gens: usize,
    reloads: usize,
}

struct Grid {
    cols: usize,
    adj: Vec<Vec<(Direction, usize)>>,
    usable: Vec<bool>,
    lsu: Vec<bool>,
    capacity: usize,
    trip: u32,
}

impl Grid {
    fn coord(&self, i: usize) -> Coord {
        Coord::new(i / self.cols, i % self.cols)
    }

    fn dir_to(&self, from: usize, to: usize) -> SrcSel {
        let d = self.adj[from].iter().find(|(_, n)| *n == to).map(|(d, _)| *d).expect("route hop between neighbors");
        SrcSel::Port(d)
    }
}

impl Board {
    fn free(&self, g: &Grid, pe: usize, a: u32, b: u32) -> bool {
        g.usable[pe] && !self.lines[pe].overlaps(a, b) && self.lines[pe].holds.range(a..b).next().is_none()
    }

    fn hold_ok(&self, g: &Grid, pe: usize, step: u32, v: usize) -> bool {
        g.usable[pe]
            && !self.lines[pe].overlaps(step, step + 1)
            && self.lines[pe].holds.get(&step).is_none_or(|&h| h == v)
    }

    fn room(&self, g: &Grid, pe: usize) -> bool {
        self.lines[pe].word_count() < g.capacity
    }

    fn place(&mut self, pe: usize, step: u32, dur: u32, word: ConfigWord) {
        self.lines[pe].words.insert(step, (dur, word));
    }

    /// Applies a routing path for value `v`, checking every slot again.
    fn apply(&mut self, g: &Grid, v: usize, acts: &[Act]) -> bool {
        for &act in acts.iter().rev() {
            match act {
                Act::Hold { pe, step } => {
                    if !self.hold_ok(g, pe, step, v) {
                        return false;
                    }
                    self.lines[pe].holds.insert(step, v);
                    self.scalar_tokens[v].push((pe, step, false));
                }
                Act::Route { pe, step, dur, sel } => {
                    if !self.free(g, pe, step, step + dur) {
                        return false;
                    }
                    let w = ConfigWord::new(Opcode::Route).with_src(sel, SrcSel::None).with_iters(dur as u8);
                    self.place(pe, step, dur, w);
                    self.routes.push((v, pe, step, dur));
                    self.scalar_tokens[v].push((pe, step + dur - 1, true));
                    if dur > 1 {
                        self.stream_tokens[v].push((pe, step));
                    }
                }
            }
        }
        true
    }

    fn gen(&mut self, g: &Grid, pe: usize, step: u32, dur: u32, k: i32) -> bool {
        if !self.free(g, pe, step, step + dur) {
            return false;
        }
        let w =
            ConfigWord::new(Opcode::Route).with_src(SrcSel::Imm, SrcSel::None).with_imm(k as u16).with_iters(dur as u8);
        self.place(pe, step, dur, w);
        self.gens += 1;
        true
    }
}

const INF: u32 = u32::MAX;
const HELD: usize = 0;
const FRESH: usize = 1;

#[derive(Debug, Clone, Copy)]
enum Back {
    Unset,
    Source,
    Hold(usize),
    RouteAcc(usize),
    RoutePort(usize),
}

/// Cheapest way (in route words) to have a value in some accumulator at
/// some step, layer by layer in time.
struct ScalarDp {
    v: usize,
    base: u32,
    cost: Vec<Vec<[u32; 2]>>,
    back: Vec<Vec<[Back; 2]>>,
    sources: BTreeMap<u32, Vec<(usize, bool)>>,
}

impl ScalarDp {
    fn new(board: &Board, v: usize) -> Option<Self> {
        let mut sources: BTreeMap<u32, Vec<(usize, bool)>> = BTreeMap::new();
        for &(pe, s, fresh) in &board.scalar_tokens[v] {
            sources.entry(s).or_default().push((pe, fresh));
        }
        let base = *sources.keys().next()?;
        Some(ScalarDp { v, base, cost: Vec::new(), back: Vec::new(), sources })
    }

    fn earliest(&self) -> u32 {
        self.base
    }

    fn extend(&mut self, g: &Grid, board: &Board, upto: u32) {
        let n = g.adj.len();
        while self.base + (self.cost.len() as u32) <= upto {
            let s = self.base + self.cost.len() as u32;
            let mut cost = vec![[INF; 2]; n];
            let mut back = vec![[Back::Unset; 2]; n];
            if let Some(prev) = self.cost.last() {
                for q in 0..n {
                    for f in [HELD, FRESH] {
                        let c = prev[q][f];
                        if c == INF {
                            continue;
                        }
                        let mut relax = |pe: usize, flag: usize, c: u32, b: Back| {
                            if c < cost[pe][flag] {
                                cost[pe][flag] = c;
                                back[pe][flag] = b;
                            }
                        };
                        if board.hold_ok(g, q, s, self.v) {
                            relax(q, HELD, c, Back::Hold(f));
                        }
                        if board.free(g, q, s, s + 1) && board.room(g, q) {
                            relax(q, FRESH, c + 1, Back::RouteAcc(f));
                        }
                        if f == FRESH {
                            for &(_, q2) in &g.adj[q] {
                                if board.free(g, q2, s, s + 1) && board.room(g, q2) {
                                    relax(q2, FRESH, c + 1, Back::RoutePort(q));
                                }
                            }
                        }
                    }
                }
            }
            if let Some(srcs) = self.sources.get(&s) {
                for &(pe, fresh) in srcs {
                    let f = if fresh { FRESH } else { HELD };
                    cost[pe][f] = 0;
                    back[pe][f] = Back::Source;
                }
            }
            self.cost.push(cost);
            self.back.push(back);
        }
    }

    fn at(&self, pe: usize, s: u32, f: usize) -> u32 {
        if s < self.base {
            return INF;
        }
        self.cost.get((s - self.base) as usize).map_or(INF, |l| l[pe][f])
    }

    /// Best flag for "value in the accumulator of `pe` at `s`".
    fn any(&self, pe: usize, s: u32) -> (u32, usize) {
        let (h, f) = (self.at(pe, s, HELD), self.at(pe, s, FRESH));
        if f <= h {
            (f, FRESH)
        } else {
            (h, HELD)
        }
    }

    fn path(&self, g: &Grid, mut pe: usize, mut s: u32, mut f: usize) -> Vec<Act> {
        let mut acts = Vec::new();
        loop {
            match self.back[(s - self.base) as usize][pe][f] {
                Back::Source => return acts,
                Back::Hold(pf) => {
                    acts.push(Act::Hold { pe, step: s });
                    f = pf;
                }
                Back::RouteAcc(pf) => {
                    acts.push(Act::Route { pe, step: s, dur: 1, sel: SrcSel::Acc });
                    f = pf;
                }
                Back::RoutePort(from) => {
                    acts.push(Act::Route { pe, step: s, dur: 1, sel: g.dir_to(pe, from) });
                    pe = from;
                    f = FRESH;
                }
                Back::Unset => unreachable!("path through an unreached state"),
            }
            s -= 1;
        }
    }
}

/// Operand indices with the accumulator claims (init, sel's else) first.
fn claimers_first(task: &Task) -> Vec<usize> {
    let claims = |k: &usize| matches!(task.needs[*k].field, Field::Init | Field::AccOnly);
    let n = task.needs.len();
    (0..n).filter(claims).chain((0..n).filter(|k| !claims(k))).collect()
}

/// Every order of the port operands, accumulator claims always first.
fn routing_orders(task: &Task) -> Vec<Vec<usize>> {
    let base = claimers_first(task);
    let split = base.iter().take_while(|&&k| matches!(task.needs[k].field, Field::Init | Field::AccOnly)).count();
    let (head, tail) = base.split_at(split);
    let mut out = Vec::new();
    permute(&mut tail.to_vec(), 0, &mut |p| out.push(head.iter().chain(p.iter()).copied().collect()));
    out
}

fn permute(v: &mut Vec<usize>, k: usize, out: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        out(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, out);
        v.swap(k, i);
    }
}

fn promise(need: Need, ch: Choice, acc_src: &mut Option<Src>, claimed: &mut Vec<(usize, Src)>) {
    match ch {
        Choice::Acc => *acc_src = Some(need.src),
        Choice::Port(q) | Choice::StreamPort(q) | Choice::Broadcast(q) | Choice::Reload(q) => {
            claimed.push((q, need.src))
        }
    }
}

/// Same search for element streams, which can only move hop by hop.
struct StreamDp {
    base: u32,
    cost: Vec<Vec<u32>>,
    back: Vec<Vec<Back>>,
    sources: BTreeMap<u32, Vec<usize>>,
}

impl StreamDp {
    fn new(board: &Board, v: usize) -> Option<Self> {
        let mut sources: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &(pe, s) in &board.stream_tokens[v] {
            sources.entry(s).or_default().push(pe);
        }
        let base = *sources.keys().next()?;
        Some(StreamDp { base, cost: Vec::new(), back: Vec::new(), sources })
    }

    fn extend(&mut self, g: &Grid, board: &Board, upto: u32) {
        let n = g.adj.len();
        while self.base + (self.cost.len() as u32) <= upto {
            let s = self.base + self.cost.len() as u32;
            let mut cost = vec![INF; n];
            let mut back = vec![Back::Unset; n];
            if let Some(prev) = self.cost.last() {
                for q in 0..n {
                    if prev[q] == INF {
                        continue;
                    }
                    for &(_, q2) in &g.adj[q] {
                        if prev[q] + 1 < cost[q2] && board.free(g, q2, s, s + g.trip) && board.room(g, q2) {
                            cost[q2] = prev[q] + 1;
                            back[q2] = Back::RoutePort(q);
                        }
                    }
                }
            }
            if let Some(srcs) = self.sources.get(&s) {
                for &pe in srcs {
                    cost[pe] = 0;
                    back[pe] = Back::Source;
                }
            }
            self.cost.push(cost);
            self.back.push(back);
        }
    }

    fn at(&self, pe: usize, s: u32) -> u32 {
        if s < self.base {
            return INF;
        }
        self.cost.get((s - self.base) as usize).map_or(INF, |l| l[pe])
    }

    fn path(&self, g: &Grid, mut pe: usize, mut s: u32) -> Vec<Act> {
        let mut acts = Vec::new();
        loop {
            match self.back[(s - self.base) as usize][pe] {
                Back::Source => return acts,
                Back::RoutePort(from) => {
                    acts.push(Act::Route { pe, step: s, dur: g.trip, sel: g.dir_to(pe, from) });
                    pe = from;
                }
                _ => unreachable!("stream path through an unreached state"),
            }
            s -= 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Choice {
    Acc,
    Port(usize),
    StreamPort(usize),
    Broadcast(usize),
    /// A second LOAD of an input on a neighboring LSU.
    Reload(usize),
}

/// Search state for one node's operands.
struct NeedDp {
    scalar: Option<ScalarDp>,
    stream: Option<StreamDp>,
}

struct Mapper<'a> {
    dfg: &'a Dfg,
    g: Grid,
    board: Board,
    producer: Vec<Option<usize>>,
    tasks: Vec<Option<Task>>,
}

impl<'a> Mapper<'a> {
    fn value_streaming(&self, v: usize) -> bool {
        self.dfg.is_stream(v) && self.g.trip > 1
    }

    fn need_dp(&self, task: &Task, need: Need) -> NeedDp {
        match need.src {
            Src::Value(v) => NeedDp {
                scalar: ScalarDp::new(&self.board, v),
                stream: if task.streaming && self.value_streaming(v) { StreamDp::new(&self.board, v) } else { None },
            },
            Src::Gen(_) => NeedDp { scalar: None, stream: None },
        }
    }

    fn need_dps(&self, task: &Task) -> Vec<NeedDp> {
        task.needs.iter().map(|&n| self.need_dp(task, n)).collect()
    }

    fn earliest(&self, task: &Task, dps: &[NeedDp]) -> u32 {
        let mut t = 0;
        for (need, dp) in task.needs.iter().zip(dps) {
            let from = match (&dp.stream, &dp.scalar) {
                (Some(s), _) => s.base + 1,
                (None, Some(s)) => s.earliest() + 1 + u32::from(task.streaming),
                (None, None) => 1,
            };
            t = t.max(from);
            if matches!(need.field, Field::Init | Field::AccOnly) {
                t = t.max(1);
            }
        }
        t
    }

    fn extend(&self, dps: &mut [NeedDp], upto: u32) {
        for dp in dps {
            if let Some(s) = &mut dp.scalar {
                s.extend(&self.g, &self.board, upto);
            }
            if let Some(s) = &mut dp.stream {
                s.extend(&self.g, &self.board, upto);
            }
        }
    }

    /// Inputs can simply be loaded again next to a consumer, including a
    /// scalar input repeated over the loop (stride 0).
    fn reloadable(&self, task: &Task, src: Src) -> bool {
        let Src::Value(v) = src else { return false };
        matches!(self.dfg.nodes[v].kind, NodeKind::Input { .. }) && (task.streaming || !self.value_streaming(v))
    }

    /// Best way to deliver one operand of `task` at `(c, t)`, given the
    /// accumulator contents and neighbor drivers promised to other operands.
    #[allow(clippy::too_many_arguments)]
    fn choose(
        &self,
        task: &Task,
        need: Need,
        dp: &NeedDp,
        c: usize,
        t: u32,
        acc_src: Option<Src>,
        claimed: &[(usize, Src)],
    ) -> Option<(u32, Choice)> {
        let g = &self.g;
        let b = &self.board;
        let n = g.trip;
        if t == 0 {
            return None;
        }
        let acc_cost = |s: u32| -> u32 {
            match need.src {
                Src::Value(_) => dp.scalar.as_ref().map_or(INF, |d| d.any(c, s).0),
                Src::Gen(_) if b.free(g, c, s, s + 1) => 1,
                Src::Gen(_) => INF,
            }
        };
        let open = |q: usize| !claimed.iter().any(|&(p, s)| p == q && s != need.src);
        let acc_open = acc_src.is_none_or(|a| a == need.src);
        let mut best: Option<(u32, Choice)> = None;
        let mut offer = |cost: u32, ch: Choice| {
            if cost != INF && best.is_none_or(|(bc, _)| cost < bc) {
                best = Some((cost, ch));
            }
        };
        match need.field {
            Field::Init | Field::AccOnly => {
                if acc_open {
                    offer(acc_cost(t - 1), Choice::Acc);
                }
            }
            Field::Src0 | Field::Src1 if task.streaming => {
                for &(_, q) in g.adj[c].iter().filter(|(_, q)| open(*q)) {
                    if self.reloadable(task, need.src) && b.free(g, q, t - 1, t - 1 + n) && g.lsu[q] && b.room(g, q) {
                        offer(1, Choice::Reload(q));
                    }
                    if let (Src::Value(_), Some(sdp)) = (need.src, &dp.stream) {
                        offer(sdp.at(q, t - 1), Choice::StreamPort(q));
                        continue;
                    }
                    if !b.free(g, q, t - 1, t - 1 + n) || !b.room(g, q) {
                        continue;
                    }
                    let cost = match need.src {
                        Src::Gen(_) => 1,
                        Src::Value(_) if t >= 2 => {
                            dp.scalar.as_ref().map_or(INF, |d| d.any(q, t - 2).0.saturating_add(1))
                        }
                        Src::Value(_) => INF,
                    };
                    offer(cost, Choice::Broadcast(q));
                }
            }
            Field::Src0 | Field::Src1 => {
                if acc_open {
                    offer(acc_cost(t - 1), Choice::Acc);
                }
                for &(_, q) in g.adj[c].iter().filter(|(_, q)| open(*q)) {
                    if self.reloadable(task, need.src) && b.free(g, q, t - 1, t) && g.lsu[q] && b.room(g, q) {
                        offer(1, Choice::Reload(q));
                    }
                    let cost = match need.src {
                        Src::Value(_) => dp.scalar.as_ref().map_or(INF, |d| d.at(q, t - 1, FRESH)),
                        Src::Gen(_) if b.free(g, q, t - 1, t) => 1,
                        Src::Gen(_) => INF,
                    };
                    offer(cost, Choice::Port(q));
                }
            }
        }
        best
    }

    /// Cost of running `task` on `c` from step `t`: (route words, distance).
    /// ALU work on an LSU counts as one extra unit of distance.
    fn evaluate(&self, task: &Task, dps: &[NeedDp], c: usize, t: u32) -> Option<(u32, usize)> {
        let g = &self.g;
        let b = &self.board;
        if !g.usable[c] || (task.lsu_only && !g.lsu[c]) {
            return None;
        }
        if !b.free(g, c, t, t + task.dur) || !b.room(g, c) {
            return None;
        }
        // Streams cannot wait, and a grid is bipartite: two streams only
        // meet at a consumer if (row + col + step) has the same parity at
        // both producers. Every stream that does not descend from another
        // one starts on even parity.
        let at = g.coord(c);
        if task.streaming && dps.iter().all(|d| d.stream.is_none()) && !(at.row + at.col + t as usize).is_multiple_of(2)
        {
            return None;
        }
        // A stream must leave its producer right away.
        if task.streaming
            && task.has_users
            && !g.adj[c].iter().any(|&(_, q)| b.free(g, q, t + 1, t + 1 + task.dur) && b.room(g, q))
        {
            return None;
        }
        let mut cost = 0u32;
        let mut dist = 0usize;
        let mut acc_src = None;
        let mut claimed = Vec::new();
        for k in claimers_first(task) {
            let need = task.needs[k];
            if let Src::Value(v) = need.src {
                if let Some(p) = self.producer[v] {
                    dist += g.coord(p).manhattan(at);
                }
            }
            let (cst, ch) = self.choose(task, need, &dps[k], c, t, acc_src, &claimed)?;
            promise(need, ch, &mut acc_src, &mut claimed);
            cost += cst;
        }
        if !task.lsu_only && g.lsu[c] {
            dist += 1;
        }
        Some((cost, dist))
    }

    /// Places `task` at `(c, t)`. Operand routes can block each other, so
    /// every routing order is tried, each operand picking its best path on
    /// the board left by the ones before it.
    fn commit(&mut self, task: &Task, c: usize, t: u32) -> bool {
        let snapshot = self.board.clone();
        for order in routing_orders(task) {
            if self.commit_in_order(task, c, t, &order) {
                return true;
            }
            self.board = snapshot.clone();
        }
        false
    }

    fn commit_in_order(&mut self, task: &Task, c: usize, t: u32, order: &[usize]) -> bool {
        let n = self.g.trip;
        let mut word = task.template;
        if !self.board.free(&self.g, c, t, t + task.dur) {
            return false;
        }
        self.board.place(c, t, task.dur, word);
        let mut acc_src = None;
        let mut claimed = Vec::new();
        for &k in order {
            let need = task.needs[k];
            let mut dp = self.need_dp(task, need);
            self.extend(std::slice::from_mut(&mut dp), t);
            let Some((_, choice)) = self.choose(task, need, &dp, c, t, acc_src, &claimed) else {
                return false;
            };
            promise(need, choice, &mut acc_src, &mut claimed);
            let g = &self.g;
            let ok = match (choice, need.src) {
                (Choice::Acc, Src::Value(v)) => self.route_scalar(v, c, t - 1, None),
                (Choice::Acc, Src::Gen(k)) => self.board.gen(g, c, t - 1, 1, k),
                (Choice::Port(q), Src::Value(v)) => self.route_scalar(v, q, t - 1, Some(FRESH)),
                (Choice::Port(q), Src::Gen(k)) => self.board.gen(g, q, t - 1, 1, k),
                (Choice::StreamPort(q), Src::Value(v)) => {
                    let sdp = dp.stream.as_ref().expect("stream choice has a stream search");
                    let acts = sdp.path(g, q, t - 1);
                    self.board.apply(g, v, &acts)
                }
                (Choice::StreamPort(_), Src::Gen(_)) => false,
                (Choice::Broadcast(q), Src::Gen(k)) => self.board.gen(g, q, t - 1, n, k),
                (Choice::Reload(_), Src::Gen(_)) => false,
                (Choice::Reload(q), Src::Value(v)) => {
                    let dur = if task.streaming { n } else { 1 };
                    let src = self.tasks[v].as_ref().expect("inputs have tasks").template;
                    let word = src.with_iters(dur as u8);
                    if self.board.free(g, q, t - 1, t - 1 + dur) {
                        self.board.place(q, t - 1, dur, word);
                        self.board.reloads += 1;
                        self.board.scalar_tokens[v].push((q, t + dur - 2, true));
                        if dur > 1 {
                            self.board.stream_tokens[v].push((q, t - 1));
                        }
                        true
                    } else {
                        false
                    }
                }
                (Choice::Broadcast(q), Src::Value(v)) => {
                    self.route_scalar(v, q, t - 2, None)
                        && self.board.apply(&self.g, v, &[Act::Route { pe: q, step: t - 1, dur: n, sel: SrcSel::Acc }])
                }
            };
            if !ok {
                return false;
            }
            let sel = match choice {
                Choice::Acc => SrcSel::Acc,
                Choice::Port(q) | Choice::StreamPort(q) | Choice::Broadcast(q) | Choice::Reload(q) => {
                    self.g.dir_to(c, q)
                }
            };
            match need.field {
                Field::Src0 => word.src0 = sel,
                Field::Src1 => word.src1 = sel,
                Field::AccOnly | Field::Init => {}
            }
        }
        self.board.place(c, t, task.dur, word);
        let v = task.node;
        self.board.scalar_tokens[v].push((c, t + task.dur - 1, true));
        if task.streaming {
            self.board.stream_tokens[v].push((c, t));
        }
        self.producer[v] = Some(c);
        self.board.lines.iter().all(|l| l.word_count() <= self.g.capacity)
    }

    /// Routes scalar value `v` into the accumulator of `pe` at step `s`
    /// (fresh only, if `flag` asks for it).
    fn route_scalar(&mut self, v: usize, pe: usize, s: u32, flag: Option<usize>) -> bool {
        let Some(mut dp) = ScalarDp::new(&self.board, v) else { return false };
        dp.extend(&self.g, &self.board, s);
        let (cost, f) = match flag {
            Some(f) => (dp.at(pe, s, f), f),
            None => dp.any(pe, s),
        };
        if cost == INF {
            return false;
        }
        let acts = dp.path(&self.g, pe, s, f);
        self.board.apply(&self.g, v, &acts)
    }

    /// Places `task` at the best candidate not in `excluded`; rejected
    /// candidates are added to it.
    fn place_task(&mut self, task: &Task, excluded: &mut Vec<(usize, u32)>) -> Result<Placement, MapError> {
        let mut dps = self.need_dps(task);
        let t0 = self.earliest(task, &dps);
        let n_pes = self.g.adj.len();
        let partners = self.partners(task.node);
        let penalty: Vec<u32> = (0..n_pes)
            .map(|c| {
                let at = self.g.coord(c);
                partners.iter().map(|&p| at.manhattan(self.g.coord(p)).saturating_sub(2) as u32).sum()
            })
            .collect();
        for _ in 0..MAX_RETRIES {
            // The first step with any candidate opens a short window; a
            // later step competes at one unit per step of delay.
            let mut found: Option<(u32, usize, u32, usize)> = None;
            let mut first = None;
            for t in t0..t0 + HORIZON {
                if first.is_some_and(|f| t > f + SLACK) {
                    break;
                }
                self.extend(&mut dps, t);
                for c in 0..n_pes {
                    if excluded.contains(&(c, t)) {
                        continue;
                    }
                    if let Some((cost, dist)) = self.evaluate(task, &dps, c, t) {
                        let f = *first.get_or_insert(t);
                        let key = (cost + penalty[c] + (t - f), dist, t, c);
                        if found.is_none_or(|k| key < k) {
                            found = Some(key);
                        }
                    }
                }
            }
            let found = found.map(|(_, _, t, c)| (c, t));
            let Some((c, t)) = found else {
                return Err(unmappable(
                    self.dfg,
                    task.node,
                    format!("no PE and step within {HORIZON} steps of step {t0}"),
                ));
            };
            let snapshot = self.board.clone();
            let producer = self.producer.clone();
            if self.commit(task, c, t) && self.users_still_placeable(task.node) && self.pending_values_alive() {
                return Ok(Placement { pe: self.g.coord(c), step: t, duration: task.dur });
            }
            self.board = snapshot;
            self.producer = producer;
            excluded.push((c, t));
        }
        Err(unmappable(self.dfg, task.node, "context capacity or routing resources exhausted"))
    }

    /// Placed producers of the other operands of `v`'s consumers; `v`
    /// should land close enough to meet them.
    fn partners(&self, v: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for u in self.consumers(v) {
            let Some(task) = &self.tasks[u] else { continue };
            for n in &task.needs {
                if let Src::Value(w) = n.src {
                    if w != v {
                        out.extend(self.producer[w]);
                    }
                }
            }
        }
        out
    }

    /// Nodes that consume `v` directly, with a folded phi replaced by its
    /// update.
    fn consumers(&self, v: usize) -> Vec<usize> {
        self.dfg
            .users(v)
            .into_iter()
            .map(|u| match self.dfg.nodes[u].kind {
                NodeKind::Phi { update: Operand::Node(w), .. } if self.tasks[u].is_none() => w,
                _ => u,
            })
            .filter(|&u| self.tasks[u].is_some())
            .collect()
    }

    /// Every placed value with an unplaced consumer must still be able to
    /// travel for a while: streams hop by hop, scalars held or moved.
    fn pending_values_alive(&self) -> bool {
        (0..self.dfg.len()).all(|v| {
            if self.producer[v].is_none()
                || self.tasks[v].is_none()
                || self.consumers(v).iter().all(|&u| self.producer[u].is_some())
            {
                return true;
            }
            if self.value_streaming(v) {
                let Some(mut dp) = StreamDp::new(&self.board, v) else { return true };
                let until = dp.base + LIVE_SPAN;
                dp.extend(&self.g, &self.board, until);
                (dp.base..=until).all(|s| (0..self.g.adj.len()).any(|q| dp.at(q, s) != INF))
            } else {
                let Some(mut dp) = ScalarDp::new(&self.board, v) else { return true };
                let last = self.board.scalar_tokens[v].iter().map(|t| t.1).max().unwrap_or(0);
                dp.extend(&self.g, &self.board, last + LIVE_SPAN);
                (0..self.g.adj.len()).any(|q| dp.any(q, last + LIVE_SPAN).0 != INF)
            }
        })
    }

    /// One level of lookahead: every user whose operands are now all placed
    /// must still find a slot soon. Catches streams boxed in by siblings.
    fn users_still_placeable(&self, v: usize) -> bool {
        self.dfg.users(v).into_iter().all(|u| {
            let Some(task) = &self.tasks[u] else { return true };
            let ready = task.needs.iter().all(|n| match n.src {
                Src::Value(w) => self.producer[w].is_some(),
                Src::Gen(_) => true,
            });
            if !ready {
                return true;
            }
            let mut dps = self.need_dps(task);
            let t0 = self.earliest(task, &dps);
            (t0..t0 + LOOKAHEAD).any(|t| {
                self.extend(&mut dps, t);
                (0..self.g.adj.len()).any(|c| self.evaluate(task, &dps, c, t).is_some())
            })
        })
    }
}

/// Nodes whose value can reach an output or a store.
fn live_nodes(dfg: &Dfg) -> Vec<bool> {
    let mut live = vec![false; dfg.len()];
    let mut stack: Vec<usize> = (0..dfg.len())
        .filter(|&i| matches!(dfg.nodes[i].kind, NodeKind::Output { .. } | NodeKind::Store { .. }))
        .collect();
    while let Some(i) = stack.pop() {
        if std::mem::replace(&mut live[i], true) {
            continue;
        }
        for o in dfg.nodes[i].operands() {
            if let Operand::Node(v) = o {
                stack.push(v);
            }
        }
    }
    live
}

/// Depth-first post-order from the sinks, so that each operand cone is
/// placed right before its consumer and streams meet soon after they start.
/// Taller operand cones go first: a short one placed early would have to
/// wait, boxed in, while the tall one is built.
fn placement_order(dfg: &Dfg) -> Vec<usize> {
    let mut height = vec![0usize; dfg.len()];
    for &i in dfg.order() {
        height[i] = dfg.nodes[i]
            .forward_operands()
            .into_iter()
            .filter_map(|o| match o {
                Operand::Node(v) => Some(height[v] + 1),
                Operand::Const(_) => None,
            })
            .max()
            .unwrap_or(0);
    }
    fn visit(dfg: &Dfg, height: &[usize], i: usize, seen: &mut [bool], out: &mut Vec<usize>) {
        if std::mem::replace(&mut seen[i], true) {
            return;
        }
        let mut ops: Vec<usize> = dfg.nodes[i]
            .forward_operands()
            .into_iter()
            .filter_map(|o| match o {
                Operand::Node(v) => Some(v),
                Operand::Const(_) => None,
            })
            .collect();
        ops.sort_by_key(|&v| std::cmp::Reverse(height[v]));
        for v in ops {
            visit(dfg, height, v, seen, out);
        }
        out.push(i);
    }
    let mut seen = vec![false; dfg.len()];
    let mut out = Vec::with_capacity(dfg.len());
    let is_sink = |i: usize| matches!(dfg.nodes[i].kind, NodeKind::Output { .. } | NodeKind::Store { .. });
    let sinks: Vec<usize> = (0..dfg.len()).filter(|&i| is_sink(i)).collect();
    for i in sinks.into_iter().chain(0..dfg.len()) {
        visit(dfg, &height, i, &mut seen, &mut out);
    }
    out
}

/// Maps `dfg` onto one RPU of `params`.
pub fn map(dfg: &Dfg, params: &ArchParams) -> Result<Mapping, MapError> {
    let first = || dfg.nodes.first().map_or_else(|| "-".to_string(), |n| n.name.clone());
    if params.exec_mode == ExecMode::Scmd {
        return Err(MapError::Unmappable { node: first(), reason: "the mapper targets MCMD arrays".into() });
    }
    if dfg.trip_count > MAX_ITERS {
        return Err(MapError::Unmappable {
            node: first(),
            reason: format!("trip count {} exceeds {MAX_ITERS}", dfg.trip_count),
        });
    }
    let folded = fold_phis(dfg)?;
    let n = params.rows * params.cols;
    let adj = (0..n)
        .map(|i| {
            let at = params.coord(i);
            neighbors(params.topology, at, params.rows, params.cols)
                .into_iter()
                .map(|(d, c)| (d, params.index(c)))
                .collect()
        })
        .collect();
    let g = Grid {
        cols: params.cols,
        adj,
        usable: params.coords().map(|c| params.pe_type(c) != PeType::Cpe).collect(),
        lsu: params.coords().map(|c| params.pe_type(c) == PeType::Lsu).collect(),
        capacity: params.context_capacity(),
        trip: dfg.trip_count,
    };
    let mut m = Mapper {
        dfg,
        g,
        board: Board {
            lines: vec![PeLine::default(); n],
            scalar_tokens: vec![Vec::new(); dfg.len()],
            stream_tokens: vec![Vec::new(); dfg.len()],
            routes: Vec::new(),
            gens: 0,
            reloads: 0,
        },
        producer: vec![None; dfg.len()],
        tasks: Vec::with_capacity(dfg.len()),
    };
    let order = placement_order(dfg);
    let live = live_nodes(dfg);
    let mut tasks = vec![None; dfg.len()];
    for &i in order.iter().filter(|&&i| live[i]) {
        tasks[i] = build_task(dfg, i, &folded, dfg.trip_count)?;
    }
    m.tasks = tasks;
    // Chronological backtracking: when a node finds no slot, its
    // predecessor in the order moves to its next candidate.
    let seq: Vec<usize> = order.into_iter().filter(|&i| m.tasks[i].is_some()).collect();
    let mut placements: Vec<Option<Placement>> = vec![None; dfg.len()];
    let mut excluded = vec![Vec::new(); seq.len()];
    let mut saved: Vec<(Board, Vec<Option<usize>>)> = Vec::with_capacity(seq.len());
    let mut budget = MAX_BACKTRACKS;
    let mut k = 0;
    while k < seq.len() {
        let task = m.tasks[seq[k]].clone().expect("sequence holds placed tasks");
        saved.truncate(k);
        saved.push((m.board.clone(), m.producer.clone()));
        match m.place_task(&task, &mut excluded[k]) {
            Ok(p) => {
                placements[seq[k]] = Some(p);
                k += 1;
            }
            Err(e) if k == 0 || budget == 0 => return Err(e),
            Err(_) => {
                budget -= 1;
                excluded[k].clear();
                k -= 1;
                (m.board, m.producer) = saved[k].clone();
                let prev = placements[seq[k]].take().expect("earlier tasks are placed");
                excluded[k].push((prev.pe.row * m.g.cols + prev.pe.col, prev.step));
            }
        }
    }
    let mut timeline = BTreeMap::new();
    let mut length = 0;
    for (i, line) in m.board.lines.iter().enumerate() {
        if line.words.is_empty() {
            continue;
        }
        let words: Vec<TimedWord> =
            line.words.iter().map(|(&step, &(duration, word))| TimedWord { step, duration, word }).collect();
        length = length.max(words.last().map_or(0, |w| w.step + w.duration));
        timeline.insert(m.g.coord(i), words);
    }
    let routes = m
        .board
        .routes
        .iter()
        .map(|&(value, pe, step, duration)| RouteWord { value, pe: m.g.coord(pe), step, duration })
        .collect();
    Ok(Mapping { placements, routes, const_words: m.board.gens, reloads: m.board.reloads, timeline, length })
}

/// PE records for a mapping: gaps become NOP words repeated by the ICB.
pub fn emit_records(mapping: &Mapping) -> Vec<PeRecord> {
    mapping
        .timeline
        .iter()
        .map(|(at, words)| {
            let mut out = Vec::new();
            let mut end = 0;
            for w in words {
                let mut gap = w.step - end;
                while gap > 0 {
                    let k = gap.min(MAX_ITERS);
                    out.push(ConfigWord::NOP.with_iters(k as u8));
                    gap -= k;
                }
                out.push(w.word);
                end = w.step + w.duration;
            }
            PeRecord { row: at.row as u8, col: at.col as u8, words: out }
        })
        .collect()
}

pub fn emit_bitstream(mapping: &Mapping) -> Vec<u8> {
    encode_bitstream(&emit_records(mapping))
}

/// Rebuilds per-PE timelines (NOPs dropped) from a bitstream.
pub fn timeline_from_bitstream(bytes: &[u8]) -> Result<BTreeMap<Coord, Vec<TimedWord>>, BitstreamError> {
    let mut out = BTreeMap::new();
    for rec in decode_bitstream(bytes)? {
        let mut step = 0;
        let mut words = Vec::new();
        for w in rec.words {
            let duration = w.executions();
            if w.opcode != Opcode::Nop {
                words.push(TimedWord { step, duration, word: w });
            }
            step += duration;
        }
        if !words.is_empty() {
            out.insert(Coord::new(usize::from(rec.row), usize::from(rec.col)), words);
        }
    }
    Ok(out)
}

/// Structural legality of a mapping: one word per PE and step, memory ops
/// only on LSUs, nothing on the controller, every port select a real link.
pub fn check_mapping(mapping: &Mapping, params: &ArchParams) -> Result<(), String> {
    for (&at, words) in &mapping.timeline {
        if !params.contains(at) {
            return Err(format!("{at} outside the grid"));
        }
        let t = params.pe_type(at);
        if t == PeType::Cpe {
            return Err(format!("{at} is the controller PE"));
        }
        let mut end = 0;
        for w in words {
            if w.step < end {
                return Err(format!("{at}: overlapping words at step {}", w.step));
            }
            if w.duration == 0 || w.duration > MAX_ITERS || w.duration != w.word.executions() {
                return Err(format!("{at}: bad duration at step {}", w.step));
            }
            end = w.step + w.duration;
            check_word(&w.word, t, params.topology).map_err(|e| format!("{at} step {}: {e}", w.step))?;
            for s in [w.word.src0, w.word.src1] {
                if let SrcSel::Port(d) = s {
                    if crate::interconnect::neighbor(params.topology, at, d, params.rows, params.cols).is_none() {
                        return Err(format!("{at} step {}: no link {d:?}", w.step));
                    }
                }
            }
        }
        if words.len() > params.context_capacity() {
            return Err(format!("{at}: context overflow"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfg::parse_dfg;

    fn grid(r: usize, c: usize) -> ArchParams {
        let mut p = ArchParams::with_grid(r, c, false);
        p.rpu_count = 1;
        p
    }

    #[test]
    fn single_add_on_2x2() {
        let g = parse_dfg("x add #2 #3\nout x 0").unwrap();
        let m = map(&g, &grid(2, 2)).unwrap();
        assert_eq!(m.length, 2);
        assert_eq!(m.route_count(), 0);
        let recs = emit_records(&m);
        assert_eq!(recs.len(), 1, "the store reads the add through the accumulator");
        let ops: Vec<Opcode> = recs[0].words.iter().map(|w| w.opcode).collect();
        assert_eq!(ops, [Opcode::Add, Opcode::Store]);
    }

    #[test]
    fn values_without_a_sink_are_not_placed() {
        let g = parse_dfg("in a 0\nd mul a #3\ns add a #1\nout s 1").unwrap();
        let m = map(&g, &grid(2, 2)).unwrap();
        assert!(m.placements[1].is_none());
        assert!(m.placements[2].is_some());
    }

    #[test]
    fn empty_graph_emits_nothing() {
        let g = parse_dfg("").unwrap();
        let m = map(&g, &grid(2, 2)).unwrap();
        assert!(emit_bitstream(&m).is_empty());
    }

    #[test]
    fn emitted_bitstream_decodes_to_the_timeline() {
        let g = parse_dfg("loop 8\nin a 0 +1\nin b 8 +1\ns add a b\nout s 16 +1").unwrap();
        let p = ArchParams::standard();
        let m = map(&g, &p).unwrap();
        check_mapping(&m, &p).unwrap();
        assert_eq!(timeline_from_bitstream(&emit_bitstream(&m)).unwrap(), m.timeline);
    }

    #[test]
    fn long_gaps_split_into_nops() {
        let mut m = Mapping {
            placements: vec![],
            routes: vec![],
            const_words: 0,
            reloads: 0,
            timeline: BTreeMap::new(),
            length: 600,
        };
        m.timeline
            .insert(Coord::new(0, 0), vec![TimedWord { step: 599, duration: 1, word: ConfigWord::new(Opcode::Add) }]);
        let recs = emit_records(&m);
        assert_eq!(recs[0].words.len(), 4);
        assert_eq!(timeline_from_bitstream(&emit_bitstream(&m)).unwrap(), m.timeline);
    }

    #[test]
    fn scmd_and_bad_phis_are_rejected() {
        let g = parse_dfg("x add #2 #3").unwrap();
        let mut p = grid(4, 4);
        p.exec_mode = ExecMode::Scmd;
        assert!(map(&g, &p).is_err());
        let g = parse_dfg("loop 4\nin x 0 +1\np phi #0 u\nu add p x\nv add p #1\nout v 9").unwrap();
        let e = map(&g, &grid(4, 4)).unwrap_err();
        assert!(matches!(e, MapError::Unmappable { ref node, .. } if node == "p"));
    }
}
