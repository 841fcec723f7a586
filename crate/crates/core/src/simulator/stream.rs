//! Discrete-step execution of a finalized stream graph over bounded FIFOs.
//!
//! Every step each unfinished node makes at most one move: read a beat,
//! issue one iteration of its pipelined loop (which may read and write in
//! the same step), or sit out a pipeline drain stall. Reads and writes are
//! decided against the channel occupancies at the start of the step and
//! writes land at its end, so the outcome does not depend on the order in
//! which nodes are polled. A step in which no node moves while some node is
//! unfinished is a deadlock.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::reference::offset;
use super::{DenseTensor, SimError};
use crate::affine_ir::{clamp_i8, GenericOp, IteratorKind};
use crate::resource_model::{estimate_cycles, CostTable, LoopNest};
use crate::stream_arch::{ChannelId, Engine, NodeId, NodeKind, OperandSource, StreamGraph, StreamLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockReason {
    Empty,
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockedChannel {
    pub channel: String,
    pub reason: BlockReason,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deadlock {
    pub nodes: Vec<String>,
    pub channels: Vec<BlockedChannel>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelTrace {
    pub name: String,
    pub depth: usize,
    pub max_occupancy: usize,
    pub produced: u64,
    pub consumed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTrace {
    pub name: String,
    /// Step (1-based) in which the node wrote its first output beat.
    pub first_output: Option<u64>,
    /// Step (1-based) after which the node had nothing left to do.
    pub completed: Option<u64>,
    /// Steps in which the node moved, drain stalls included.
    pub active_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTrace {
    pub steps: u64,
    pub channels: Vec<ChannelTrace>,
    pub nodes: Vec<NodeTrace>,
    pub deadlock: Option<Deadlock>,
}

impl SimTrace {
    pub fn completed(&self) -> bool {
        self.deadlock.is_none()
    }

    pub fn node(&self, name: &str) -> Option<&NodeTrace> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

#[derive(Clone, Debug, Default)]
pub struct SimOptions {
    /// Defaults to 100 × the estimated total cycles.
    pub step_limit: Option<u64>,
    /// Node polling order; defaults to node id order.
    pub poll_order: Option<Vec<NodeId>>,
    pub costs: CostTable,
}

pub fn measure_first_output(trace: &SimTrace, node: &str) -> Result<u64, SimError> {
    let n = trace.node(node).ok_or_else(|| SimError::UnknownNode(node.to_string()))?;
    n.first_output.ok_or_else(|| SimError::NoOutput(node.to_string()))
}

pub fn run_stream(graph: &StreamGraph, input: &DenseTensor, step_limit: Option<u64>) -> Result<(DenseTensor, SimTrace), SimError> {
    run_stream_with(
        graph,
        input,
        &SimOptions {
            step_limit,
            ..SimOptions::default()
        },
    )
}

// ---------------------------------------------------------------------------
// Channels and per-step I/O

struct Fifo {
    beats: VecDeque<Vec<i32>>,
    depth: usize,
    start: usize,
    pending: Option<Vec<i32>>,
    max_occupancy: usize,
    produced: u64,
    consumed: u64,
}

struct Io<'a> {
    fifos: &'a mut [Fifo],
    blocked: Vec<(ChannelId, BlockReason)>,
    wrote: bool,
}

impl Io<'_> {
    fn can_read(&self, ch: ChannelId) -> bool {
        self.fifos[ch].start > 0
    }

    fn can_write(&self, ch: ChannelId) -> bool {
        let f = &self.fifos[ch];
        f.start < f.depth && f.pending.is_none()
    }

    fn pop(&mut self, ch: ChannelId) -> Vec<i32> {
        let f = &mut self.fifos[ch];
        f.consumed += 1;
        f.beats.pop_front().expect("readable channel holds a beat")
    }

    fn push(&mut self, ch: ChannelId, beat: Vec<i32>) {
        self.fifos[ch].pending = Some(beat);
        self.wrote = true;
    }

    fn block(&mut self, ch: ChannelId, reason: BlockReason) -> Move {
        self.blocked.push((ch, reason));
        Move::Blocked
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Move {
    Acted,
    /// Took a beat into a holding register without starting an iteration.
    Latched,
    Blocked,
    Done,
}

// ---------------------------------------------------------------------------
// Loop schedule shared by compute nodes

/// Walks the blocked iteration space of a nest and inserts drain stalls.
struct Schedule {
    blocked: Vec<usize>,
    unroll: Vec<usize>,
    idx: Vec<usize>,
    pipeline: Option<usize>,
    done: bool,
    stall: u64,
    depth: u64,
    ii: u64,
}

impl Schedule {
    fn new(nest: &LoopNest, costs: &CostTable) -> Self {
        let blocked = nest.blocked_trips();
        Schedule {
            done: blocked.contains(&0),
            idx: vec![0; blocked.len()],
            unroll: (0..nest.len()).map(|l| nest.effective_unroll(l)).collect(),
            blocked,
            pipeline: nest.pipeline,
            stall: 0,
            depth: costs.pipeline_depth,
            ii: costs.ii,
        }
    }

    /// First iteration value covered by the current block of loop `l`.
    fn value(&self, l: usize) -> usize {
        self.idx[l] * self.unroll[l]
    }

    fn last_from(&self, from: usize) -> bool {
        (from..self.idx.len()).all(|l| self.idx[l] + 1 == self.blocked[l])
    }

    /// Moves past the current iteration and schedules its stall.
    fn advance(&mut self) {
        let region_end = match self.pipeline {
            Some(p) => self.last_from(p),
            None => true,
        };
        self.stall = if region_end { self.depth - 1 } else { self.ii - 1 };
        let mut l = self.idx.len();
        loop {
            if l == 0 {
                self.done = true;
                return;
            }
            l -= 1;
            self.idx[l] += 1;
            if self.idx[l] < self.blocked[l] {
                return;
            }
            self.idx[l] = 0;
        }
    }
}

/// Weight ROM contents indexed by operand slot.
struct Operands {
    sources: Vec<OperandSource>,
    roms: Vec<Vec<i32>>,
}

impl Operands {
    fn new(graph: &StreamGraph, sources: &[OperandSource]) -> Result<Self, SimError> {
        let roms = sources
            .iter()
            .map(|s| match s {
                OperandSource::Port(_) => Ok(Vec::new()),
                OperandSource::Rom(name) => graph
                    .weights
                    .get(name)
                    .map(|w| w.data.iter().map(|&v| v as i32).collect())
                    .ok_or_else(|| SimError::MissingTensor(name.clone())),
            })
            .collect::<Result<_, _>>()?;
        Ok(Operands {
            sources: sources.to_vec(),
            roms,
        })
    }
}

fn arith(op: &GenericOp, e: crate::affine_ir::IrError) -> SimError {
    SimError::Arithmetic {
        node: op.op_id.clone(),
        source: e,
    }
}

// ---------------------------------------------------------------------------
// Reduction engine: line buffer, window buffer or data line

struct ReductionProc {
    op: GenericOp,
    operands: Operands,
    sched: Schedule,
    input: ChannelId,
    output: ChannelId,
    in_layout: StreamLayout,
    out_layout: StreamLayout,
    n_stream: usize,
    out_lane: usize,
    channels: usize,
    // Window geometry; rank-2 inputs use a 1×1 window.
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    row_length: usize,
    line: Vec<i32>,
    window: Vec<i32>,
    assembly: Vec<i32>,
    beats_in: usize,
    pixels_done: usize,
    current_batch: usize,
    reductions: Vec<(usize, usize)>,
    iter: Vec<i64>,
    vals: Vec<i32>,
}

impl ReductionProc {
    fn new(graph: &StreamGraph, id: NodeId, costs: &CostTable) -> Result<Self, SimError> {
        let node = &graph.nodes[id];
        let op = node.op.clone().ok_or_else(|| SimError::NotFinalized(format!("{} has no op", node.name)))?;
        let nest = node.nest.as_ref().expect("compute node has a nest");
        let Some(Engine::Reduction { channels, spatial, .. }) = &node.engine else {
            unreachable!("reduction process built for a reduction engine")
        };
        let input = node.inputs[0];
        let output = node.outputs[0];
        let (kh, kw, sh, sw, row_length) = match spatial.as_slice() {
            [h, w] => (h.k_eff(), w.k_eff(), h.stride, w.stride, w.in_extent),
            _ => (1, 1, 1, 1, 1),
        };
        let reductions = (0..op.num_dims())
            .filter(|&d| op.kind(d) == IteratorKind::Reduction)
            .map(|d| (d, op.trip_counts[d]))
            .collect();
        Ok(ReductionProc {
            operands: Operands::new(graph, &node.operands)?,
            sched: Schedule::new(nest, costs),
            in_layout: graph.channels[input].layout(),
            out_layout: graph.channels[output].layout(),
            input,
            output,
            n_stream: nest.loops.iter().filter(|l| l.stream).count(),
            out_lane: node.out_lane.expect("compute node has an output lane"),
            channels: *channels,
            kh,
            kw,
            sh,
            sw,
            row_length,
            line: vec![0; (kh - 1) * row_length * channels],
            window: vec![0; kh * kw * channels],
            assembly: Vec::with_capacity(*channels),
            beats_in: 0,
            pixels_done: 0,
            current_batch: 0,
            reductions,
            iter: vec![0; op.num_dims()],
            vals: vec![0; op.inputs.len()],
            op,
        })
    }

    /// Output position (batch, then spatial) of the current iteration.
    fn out_pixel(&self) -> Vec<usize> {
        (0..self.n_stream).map(|l| self.sched.value(l)).collect()
    }

    /// Input stream position that must have arrived before the current
    /// output position can be computed.
    fn required_pixel(&self) -> usize {
        let p = self.out_pixel();
        if p.len() == 3 {
            let h = p[1] * self.sh + self.kh - 1;
            let w = p[2] * self.sw + self.kw - 1;
            let (hh, ww) = (self.in_layout.shape[2], self.in_layout.shape[3]);
            (p[0] * hh + h) * ww + w
        } else {
            p[0]
        }
    }

    fn ingest(&mut self, beat: Vec<i32>) {
        self.assembly.extend(beat);
        self.beats_in += 1;
        if self.assembly.len() < self.channels {
            return;
        }
        let coords = self.in_layout.pixel_coords(self.pixels_done);
        self.current_batch = coords[0];
        let w = if coords.len() == 3 { coords[2] } else { 0 };
        let (c, kh, kw, rl) = (self.channels, self.kh, self.kw, self.row_length);
        for r in 0..kh {
            for j in 0..kw - 1 {
                for ch in 0..c {
                    self.window[(r * kw + j) * c + ch] = self.window[(r * kw + j + 1) * c + ch];
                }
            }
            for ch in 0..c {
                let v = if r + 1 < kh {
                    self.line[(r * rl + w) * c + ch]
                } else {
                    self.assembly[ch]
                };
                self.window[(r * kw + kw - 1) * c + ch] = v;
            }
        }
        for r in 0..kh.saturating_sub(1) {
            for ch in 0..c {
                self.line[(r * rl + w) * c + ch] = if r + 2 < kh {
                    self.line[((r + 1) * rl + w) * c + ch]
                } else {
                    self.assembly[ch]
                };
            }
        }
        self.assembly.clear();
        self.pixels_done += 1;
    }

    /// Window element for input tensor index `idx` at output position `p`.
    fn window_value(&self, idx: &[usize], p: &[usize]) -> i32 {
        debug_assert_eq!(idx[0], self.current_batch);
        if idx.len() == 4 {
            let r = idx[2] - p[1] * self.sh;
            let j = idx[3] - p[2] * self.sw;
            self.window[(r * self.kw + j) * self.channels + idx[1]]
        } else {
            self.window[idx[1]]
        }
    }

    fn compute_beat(&mut self) -> Result<Vec<i32>, SimError> {
        let p = self.out_pixel();
        let width = self.out_layout.width;
        let fb = self.sched.idx[self.out_lane];
        let mut beat = Vec::with_capacity(width);
        let out_rank = self.op.output.shape.len();
        let mut idx_buf = [0usize; 4];
        for lane in 0..width {
            let f = fb * width + lane;
            // Output index (batch, lane axis, spatial...).
            let mut out_idx = vec![p[0], f];
            out_idx.extend_from_slice(&p[1..]);
            for (a, e) in self.op.output.map.results.iter().enumerate().take(out_rank) {
                self.iter[e.terms[0].dim] = out_idx[a] as i64;
            }
            let red_total: usize = self.reductions.iter().map(|r| r.1).product();
            let mut acc = 0i32;
            for flat in 0..red_total {
                let mut rem = flat;
                for &(d, t) in self.reductions.iter().rev() {
                    self.iter[d] = (rem % t) as i64;
                    rem /= t;
                }
                for (k, src) in self.operands.sources.iter().enumerate() {
                    let o = &self.op.inputs[k];
                    self.vals[k] = match src {
                        OperandSource::Port(_) => {
                            let idx = &mut idx_buf[..o.shape.len()];
                            for (a, e) in o.map.results.iter().enumerate() {
                                idx[a] = (e.constant + e.terms.iter().map(|t| t.coeff * self.iter[t.dim]).sum::<i64>()) as usize;
                            }
                            self.window_value(idx, &p)
                        }
                        OperandSource::Rom(_) => self.operands.roms[k][offset(&o.map, &o.shape, &self.iter)],
                    };
                }
                acc = self.op.payload.eval(&self.vals, acc).map_err(|e| arith(&self.op, e))?;
            }
            beat.push(clamp_i8(acc));
        }
        Ok(beat)
    }

    fn step(&mut self, io: &mut Io) -> Result<Move, SimError> {
        if self.sched.stall > 0 {
            self.sched.stall -= 1;
            return Ok(Move::Acted);
        }
        if self.sched.done {
            if self.beats_in < self.in_layout.beats() {
                if !io.can_read(self.input) {
                    return Ok(io.block(self.input, BlockReason::Empty));
                }
                let b = io.pop(self.input);
                self.ingest(b);
                return Ok(Move::Acted);
            }
            return Ok(Move::Done);
        }
        let bpp = self.in_layout.beats_per_pixel();
        let need = (self.required_pixel() + 1) * bpp;
        let writes = self.sched.last_from(self.out_lane + 1);
        if self.beats_in + 1 < need {
            if !io.can_read(self.input) {
                return Ok(io.block(self.input, BlockReason::Empty));
            }
            let b = io.pop(self.input);
            self.ingest(b);
            return Ok(Move::Acted);
        }
        if self.beats_in + 1 == need {
            if !io.can_read(self.input) {
                return Ok(io.block(self.input, BlockReason::Empty));
            }
            let b = io.pop(self.input);
            self.ingest(b);
            if writes && !io.can_write(self.output) {
                return Ok(Move::Acted);
            }
        } else if writes && !io.can_write(self.output) {
            return Ok(io.block(self.output, BlockReason::Full));
        }
        if writes {
            let beat = self.compute_beat()?;
            io.push(self.output, beat);
        }
        self.sched.advance();
        Ok(Move::Acted)
    }
}

// ---------------------------------------------------------------------------
// Elementwise engine

struct ElementwiseProc {
    op: GenericOp,
    operands: Operands,
    sched: Schedule,
    inputs: Vec<ChannelId>,
    output: ChannelId,
    layout: StreamLayout,
    latched: Vec<Option<Vec<i32>>>,
    beat: usize,
    iter: Vec<i64>,
    vals: Vec<i32>,
}

impl ElementwiseProc {
    fn new(graph: &StreamGraph, id: NodeId, costs: &CostTable) -> Result<Self, SimError> {
        let node = &graph.nodes[id];
        let op = node.op.clone().ok_or_else(|| SimError::NotFinalized(format!("{} has no op", node.name)))?;
        let nest = node.nest.as_ref().expect("compute node has a nest");
        Ok(ElementwiseProc {
            operands: Operands::new(graph, &node.operands)?,
            sched: Schedule::new(nest, costs),
            inputs: node.inputs.clone(),
            output: node.outputs[0],
            layout: graph.channels[node.outputs[0]].layout(),
            latched: vec![None; node.inputs.len()],
            beat: 0,
            iter: vec![0; op.num_dims()],
            vals: vec![0; op.inputs.len()],
            op,
        })
    }

    fn compute_beat(&mut self) -> Result<Vec<i32>, SimError> {
        let mut out = Vec::with_capacity(self.layout.width);
        for lane in 0..self.layout.width {
            let idx = self.layout.index_of(self.beat, lane);
            for (a, e) in self.op.output.map.results.iter().enumerate() {
                self.iter[e.terms[0].dim] = idx[a] as i64;
            }
            for (k, src) in self.operands.sources.iter().enumerate() {
                self.vals[k] = match src {
                    OperandSource::Port(p) => self.latched[*p].as_ref().expect("all ports latched")[lane],
                    OperandSource::Rom(_) => {
                        let o = &self.op.inputs[k];
                        self.operands.roms[k][offset(&o.map, &o.shape, &self.iter)]
                    }
                };
            }
            let v = self.op.payload.eval(&self.vals, 0).map_err(|e| arith(&self.op, e))?;
            out.push(clamp_i8(v));
        }
        Ok(out)
    }

    fn step(&mut self, io: &mut Io) -> Result<Move, SimError> {
        if self.sched.stall > 0 {
            self.sched.stall -= 1;
            return Ok(Move::Acted);
        }
        if self.sched.done {
            return Ok(Move::Done);
        }
        let mut read_any = false;
        for p in 0..self.inputs.len() {
            if self.latched[p].is_none() {
                if io.can_read(self.inputs[p]) {
                    self.latched[p] = Some(io.pop(self.inputs[p]));
                    read_any = true;
                } else {
                    io.blocked.push((self.inputs[p], BlockReason::Empty));
                }
            }
        }
        if self.latched.iter().any(Option::is_none) {
            return Ok(if read_any { Move::Latched } else { Move::Blocked });
        }
        if !io.can_write(self.output) {
            if read_any {
                return Ok(Move::Latched);
            }
            return Ok(io.block(self.output, BlockReason::Full));
        }
        let beat = self.compute_beat()?;
        io.push(self.output, beat);
        self.latched.iter_mut().for_each(|l| *l = None);
        self.beat += 1;
        self.sched.advance();
        Ok(Move::Acted)
    }
}

// ---------------------------------------------------------------------------
// Adapters

enum Proc {
    Source {
        output: ChannelId,
        layout: StreamLayout,
        data: Vec<i32>,
        sent: usize,
    },
    Sink {
        input: ChannelId,
        layout: StreamLayout,
        data: Vec<i32>,
        received: usize,
    },
    Broadcast {
        input: ChannelId,
        outputs: Vec<ChannelId>,
        remaining: usize,
    },
    Reduction(Box<ReductionProc>),
    Elementwise(Box<ElementwiseProc>),
}

impl Proc {
    fn step(&mut self, io: &mut Io) -> Result<Move, SimError> {
        match self {
            Proc::Source {
                output,
                layout,
                data,
                sent,
            } => {
                if *sent == layout.beats() {
                    return Ok(Move::Done);
                }
                if !io.can_write(*output) {
                    return Ok(io.block(*output, BlockReason::Full));
                }
                let beat = (0..layout.width).map(|l| data[layout.flat_index(*sent, l)]).collect();
                io.push(*output, beat);
                *sent += 1;
                Ok(Move::Acted)
            }
            Proc::Sink {
                input,
                layout,
                data,
                received,
            } => {
                if *received == layout.beats() {
                    return Ok(Move::Done);
                }
                if !io.can_read(*input) {
                    return Ok(io.block(*input, BlockReason::Empty));
                }
                let beat = io.pop(*input);
                for (l, v) in beat.into_iter().enumerate() {
                    data[layout.flat_index(*received, l)] = v;
                }
                *received += 1;
                Ok(Move::Acted)
            }
            Proc::Broadcast {
                input,
                outputs,
                remaining,
            } => {
                if *remaining == 0 {
                    return Ok(Move::Done);
                }
                let mut ok = true;
                if !io.can_read(*input) {
                    io.blocked.push((*input, BlockReason::Empty));
                    ok = false;
                }
                for &o in outputs.iter() {
                    if !io.can_write(o) {
                        io.blocked.push((o, BlockReason::Full));
                        ok = false;
                    }
                }
                if !ok {
                    return Ok(Move::Blocked);
                }
                let beat = io.pop(*input);
                for &o in outputs.iter() {
                    io.push(o, beat.clone());
                }
                *remaining -= 1;
                Ok(Move::Acted)
            }
            Proc::Reduction(p) => p.step(io),
            Proc::Elementwise(p) => p.step(io),
        }
    }

    fn is_done(&self) -> bool {
        match self {
            Proc::Source { layout, sent, .. } => *sent == layout.beats(),
            Proc::Sink { layout, received, .. } => *received == layout.beats(),
            Proc::Broadcast { remaining, .. } => *remaining == 0,
            Proc::Reduction(p) => p.sched.done && p.sched.stall == 0 && p.beats_in == p.in_layout.beats(),
            Proc::Elementwise(p) => p.sched.done && p.sched.stall == 0,
        }
    }
}

fn build_procs(graph: &StreamGraph, input: &DenseTensor, costs: &CostTable) -> Result<Vec<Proc>, SimError> {
    graph
        .nodes
        .iter()
        .map(|n| {
            Ok(match n.kind {
                NodeKind::Source => Proc::Source {
                    output: n.outputs[0],
                    layout: graph.channels[n.outputs[0]].layout(),
                    data: input.data.clone(),
                    sent: 0,
                },
                NodeKind::Sink => {
                    let layout = graph.channels[n.inputs[0]].layout();
                    Proc::Sink {
                        input: n.inputs[0],
                        data: vec![0; layout.numel()],
                        layout,
                        received: 0,
                    }
                }
                NodeKind::Broadcast => Proc::Broadcast {
                    input: n.inputs[0],
                    outputs: n.outputs.clone(),
                    remaining: graph.channels[n.inputs[0]].layout().beats(),
                },
                NodeKind::Compute => match n.engine {
                    Some(Engine::Reduction { .. }) => Proc::Reduction(Box::new(ReductionProc::new(graph, n.id, costs)?)),
                    _ => Proc::Elementwise(Box::new(ElementwiseProc::new(graph, n.id, costs)?)),
                },
            })
        })
        .collect()
}

/// Default step limit: 100 × the estimated total cycles of the design.
fn default_step_limit(graph: &StreamGraph, costs: &CostTable) -> u64 {
    let est: u64 = graph
        .compute_nodes()
        .map(|n| estimate_cycles(n.nest.as_ref().expect("compute node has a nest"), &n.warmup, costs).total)
        .sum();
    let beats: u64 = graph.channels.iter().map(|c| c.layout().beats() as u64).sum();
    100 * (est + beats).max(1)
}

pub fn run_stream_with(graph: &StreamGraph, input: &DenseTensor, opts: &SimOptions) -> Result<(DenseTensor, SimTrace), SimError> {
    if input.shape != graph.input.shape {
        return Err(SimError::Shape {
            expected: graph.input.shape.clone(),
            got: input.shape.clone(),
        });
    }
    if !graph.finalized {
        return Err(SimError::NotFinalized("widths and depths are not assigned".into()));
    }
    let problems = graph.violations();
    if !problems.is_empty() {
        return Err(SimError::NotFinalized(problems.join("; ")));
    }
    let costs = &opts.costs;
    let limit = opts.step_limit.unwrap_or_else(|| default_step_limit(graph, costs));
    let order: Vec<NodeId> = opts.poll_order.clone().unwrap_or_else(|| (0..graph.nodes.len()).collect());

    let mut procs = build_procs(graph, input, costs)?;
    let mut fifos: Vec<Fifo> = graph
        .channels
        .iter()
        .map(|c| Fifo {
            beats: VecDeque::new(),
            depth: c.depth,
            start: 0,
            pending: None,
            max_occupancy: 0,
            produced: 0,
            consumed: 0,
        })
        .collect();
    let mut nodes: Vec<NodeTrace> = graph
        .nodes
        .iter()
        .map(|n| NodeTrace {
            name: n.name.clone(),
            first_output: None,
            completed: None,
            active_steps: 0,
        })
        .collect();
    let mut done: Vec<bool> = procs.iter().map(Proc::is_done).collect();
    let mut step = 0u64;
    let mut deadlock = None;

    while !done.iter().all(|&d| d) {
        if step >= limit {
            return Err(SimError::Livelock { steps: step });
        }
        for f in fifos.iter_mut() {
            f.start = f.beats.len();
        }
        let mut moved = false;
        let mut blocked = BTreeSet::new();
        let mut blocked_nodes = Vec::new();
        for &id in &order {
            if done[id] {
                continue;
            }
            let mut io = Io {
                fifos: &mut fifos,
                blocked: Vec::new(),
                wrote: false,
            };
            let m = procs[id].step(&mut io)?;
            let wrote = io.wrote;
            match m {
                Move::Acted => {
                    moved = true;
                    nodes[id].active_steps += 1;
                    if wrote && nodes[id].first_output.is_none() {
                        nodes[id].first_output = Some(step + 1);
                    }
                }
                Move::Latched => moved = true,
                Move::Blocked => {
                    blocked.extend(io.blocked);
                    blocked_nodes.push(id);
                }
                Move::Done => {}
            }
            if procs[id].is_done() {
                done[id] = true;
                nodes[id].completed = Some(step + 1);
            }
        }
        for f in fifos.iter_mut() {
            if let Some(b) = f.pending.take() {
                f.beats.push_back(b);
                f.produced += 1;
            }
            f.max_occupancy = f.max_occupancy.max(f.beats.len());
        }
        step += 1;
        if !moved && !done.iter().all(|&d| d) {
            blocked_nodes.sort();
            deadlock = Some(Deadlock {
                nodes: blocked_nodes.iter().map(|&n| graph.nodes[n].name.clone()).collect(),
                channels: blocked
                    .into_iter()
                    .map(|(c, reason)| BlockedChannel {
                        channel: graph.channels[c].name.clone(),
                        reason,
                    })
                    .collect(),
            });
            break;
        }
    }

    let sink = graph.sink().id;
    let output = match &procs[sink] {
        Proc::Sink { data, .. } => DenseTensor::from_data(&graph.output.shape, data.clone()),
        _ => unreachable!("sink node runs a sink process"),
    };
    let channels = graph
        .channels
        .iter()
        .zip(&fifos)
        .map(|(c, f)| ChannelTrace {
            name: c.name.clone(),
            depth: c.depth,
            max_occupancy: f.max_occupancy,
            produced: f.produced,
            consumed: f.consumed,
        })
        .collect();
    Ok((
        output,
        SimTrace {
            steps: step,
            channels,
            nodes,
            deadlock,
        },
    ))
}
