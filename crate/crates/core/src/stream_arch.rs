//! Streaming dataflow graph construction.
//!
//! Every [`GenericOp`] becomes one compute node. Tensors between nodes exist
//! only as point-to-point FIFO channels; a tensor with several consumers is
//! duplicated by a broadcast node. Sliding-window nodes hold a line buffer
//! and a window buffer, regular reductions hold the current data line, and
//! pure-parallel nodes hold nothing.
//!
//! Channel token order is fixed for every tensor: positions over all axes
//! except axis 1 in row-major order, and for each position the axis-1
//! elements in groups of `κ` lanes. Lane `l` of group `g` carries element
//! `g·κ + l`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affine_ir::{AffineExpr, DimId, GenericOp, IteratorKind, TensorDecl};
use crate::kernel_analysis::{classify_kernel, AnalysisError, KernelClass};
use crate::model_ingest::{LayerGraph, WeightTensor, GRAPH_INPUT};
use crate::resource_model::{bram_blocks, Loop, LoopNest, Warmup};

pub type NodeId = usize;
pub type ChannelId = usize;

/// Safety margin added to every computed FIFO depth.
pub const DEPTH_MARGIN: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StreamError {
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("op `{op}` cannot be streamed: {message}")]
    Unsupported { op: String, message: String },
    #[error("tensor `{0}` has no producer")]
    NoProducer(String),
    #[error("no cycle estimate for node `{0}`")]
    MissingEstimate(String),
}

fn unsupported(op: &GenericOp, message: impl Into<String>) -> StreamError {
    StreamError::Unsupported {
        op: op.op_id.clone(),
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Token layout

/// Beat/lane layout of one tensor on a channel of width `width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamLayout {
    pub shape: Vec<usize>,
    pub width: usize,
}

impl StreamLayout {
    pub fn new(shape: &[usize], width: usize) -> Self {
        StreamLayout {
            shape: shape.to_vec(),
            width: width.max(1),
        }
    }

    /// Extent of the lane axis (axis 1).
    pub fn channels(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn pixels(&self) -> usize {
        self.numel() / self.channels()
    }

    pub fn beats_per_pixel(&self) -> usize {
        self.channels() / self.width
    }

    pub fn beats(&self) -> usize {
        self.pixels() * self.beats_per_pixel()
    }

    /// Row-major coordinates over every axis except axis 1.
    pub fn pixel_coords(&self, pixel: usize) -> Vec<usize> {
        let extents: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .filter(|(a, _)| *a != 1)
            .map(|(_, &e)| e)
            .collect();
        let mut coords = vec![0; extents.len()];
        let mut rem = pixel;
        for (c, &e) in coords.iter_mut().zip(&extents).rev() {
            *c = rem % e;
            rem /= e;
        }
        coords
    }

    /// Full tensor index of lane `lane` of beat `beat`.
    pub fn index_of(&self, beat: usize, lane: usize) -> Vec<usize> {
        let bpp = self.beats_per_pixel();
        let pixel = beat / bpp;
        let channel = (beat % bpp) * self.width + lane;
        let coords = self.pixel_coords(pixel);
        let mut idx = Vec::with_capacity(self.shape.len());
        idx.push(coords[0]);
        if self.shape.len() > 1 {
            idx.push(channel);
            idx.extend_from_slice(&coords[1..]);
        }
        idx
    }

    pub fn flat_index(&self, beat: usize, lane: usize) -> usize {
        flatten(&self.shape, &self.index_of(beat, lane))
    }
}

/// Row-major flattening of `idx` within `shape`.
pub fn flatten(shape: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &e)| acc * e + i)
}

// ---------------------------------------------------------------------------
// Graph types

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Source,
    Sink,
    Broadcast,
    Compute,
}

/// One windowed input axis of a reduction node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialAxis {
    pub in_extent: usize,
    pub out_extent: usize,
    pub out_dim: DimId,
    pub red_dim: Option<DimId>,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl SpatialAxis {
    /// Input extent covered by one window.
    pub fn k_eff(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "snake_case")]
pub enum Engine {
    /// Sliding-window or regular reduction over one streamed input.
    Reduction {
        batch_dim: DimId,
        in_lane_dim: DimId,
        out_lane_dim: DimId,
        channels: usize,
        out_channels: usize,
        spatial: Vec<SpatialAxis>,
    },
    /// Consume–compute–produce over identically shaped streams.
    Elementwise { lane_dim: DimId },
}

/// Where each payload input of a compute node comes from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperandSource {
    Port(usize),
    Rom(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferKind {
    LineBuffer,
    WindowBuffer,
    DataLine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    Bram,
    Registers,
}

/// A node-local memory. Shapes are `[rows, row_length, channels]` for line
/// buffers, `[k_h, k_w, channels]` for window buffers and `[channels]` for
/// data lines.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buffer {
    pub name: String,
    pub kind: BufferKind,
    pub shape: Vec<usize>,
    pub element_bits: u32,
    /// Loop whose unroll factor sets the partition factor.
    pub partition_loop: Option<usize>,
}

impl Buffer {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bits(&self) -> u64 {
        match self.kind {
            BufferKind::LineBuffer => {
                line_buffer_bits(self.shape[0], self.shape[1], self.element_bits, self.shape[2])
            }
            _ => self.elements() as u64 * self.element_bits as u64,
        }
    }

    pub fn partitions(&self, nest: &LoopNest) -> usize {
        match self.kind {
            BufferKind::WindowBuffer => self.elements(),
            _ => self.partition_loop.map(|l| nest.effective_unroll(l)).unwrap_or(1),
        }
    }

    /// Window buffers and completely partitioned arrays live in registers.
    pub fn storage(&self, nest: &LoopNest) -> Storage {
        if self.kind == BufferKind::WindowBuffer || self.partitions(nest) >= self.elements() {
            Storage::Registers
        } else {
            Storage::Bram
        }
    }

    pub fn bram(&self, nest: &LoopNest) -> u64 {
        match self.storage(nest) {
            Storage::Registers => 0,
            Storage::Bram => bram_blocks(self.bits(), self.partitions(nest) as u64),
        }
    }
}

/// `rows · row_length · element_bits · replication`.
pub fn line_buffer_bits(rows: usize, row_length: usize, element_bits: u32, replication: usize) -> u64 {
    rows as u64 * row_length as u64 * element_bits as u64 * replication as u64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamNode {
    pub id: NodeId,
    pub name: String,
    pub kind: NodeKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<KernelClass>,
    #[serde(skip)]
    pub op: Option<GenericOp>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub engine: Option<Engine>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub operands: Vec<OperandSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nest: Option<LoopNest>,
    pub warmup: Warmup,
    /// Lane loop of each input port.
    pub in_lanes: Vec<Option<usize>>,
    pub out_lane: Option<usize>,
    pub buffers: Vec<Buffer>,
    pub inputs: Vec<ChannelId>,
    pub outputs: Vec<ChannelId>,
}

impl StreamNode {
    fn adapter(id: NodeId, name: impl Into<String>, kind: NodeKind) -> Self {
        StreamNode {
            id,
            name: name.into(),
            kind,
            class: None,
            op: None,
            engine: None,
            operands: Vec::new(),
            nest: None,
            warmup: Warmup::default(),
            in_lanes: Vec::new(),
            out_lane: None,
            buffers: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn is_compute(&self) -> bool {
        self.kind == NodeKind::Compute
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub node: NodeId,
    pub port: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamChannel {
    pub id: ChannelId,
    pub name: String,
    pub tensor: String,
    pub shape: Vec<usize>,
    pub element_bits: u32,
    /// Number of lanes `κ`.
    pub width: usize,
    /// Tokens per lane.
    pub depth: usize,
    pub producer: Endpoint,
    pub consumer: Endpoint,
}

impl StreamChannel {
    pub fn layout(&self) -> StreamLayout {
        StreamLayout::new(&self.shape, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamGraph {
    pub nodes: Vec<StreamNode>,
    pub channels: Vec<StreamChannel>,
    pub input: TensorDecl,
    pub output: TensorDecl,
    pub finalized: bool,
    /// Constant weight ROMs.
    #[serde(skip)]
    pub weights: BTreeMap<String, WeightTensor>,
    /// Every activation tensor shape, graph I/O included.
    #[serde(skip)]
    pub tensor_shapes: BTreeMap<String, Vec<usize>>,
}

impl StreamGraph {
    pub fn node(&self, name: &str) -> Option<&StreamNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn compute_nodes(&self) -> impl Iterator<Item = &StreamNode> {
        self.nodes.iter().filter(|n| n.is_compute())
    }

    pub fn source(&self) -> &StreamNode {
        self.nodes.iter().find(|n| n.kind == NodeKind::Source).expect("graph has a source")
    }

    pub fn sink(&self) -> &StreamNode {
        self.nodes.iter().find(|n| n.kind == NodeKind::Sink).expect("graph has a sink")
    }

    pub fn successors(&self, node: NodeId) -> Vec<NodeId> {
        self.nodes[node].outputs.iter().map(|&c| self.channels[c].consumer.node).collect()
    }

    /// Elements held by every node-local buffer.
    pub fn buffered_elements(&self, node: NodeId) -> usize {
        self.nodes[node].buffers.iter().map(Buffer::elements).sum()
    }

    /// Lane count a node uses on one of its ports.
    pub fn port_width(&self, node: NodeId, lane_loop: Option<usize>, channel: ChannelId) -> usize {
        match (&self.nodes[node].nest, lane_loop) {
            (Some(nest), Some(l)) => nest.effective_unroll(l),
            _ => self.channels[channel].width,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stream graph serializes")
    }

    /// Structural and token-balance problems; empty when the graph is sound.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for ch in &self.channels {
            if ch.width == 0 || ch.shape.get(1).copied().unwrap_or(1) % ch.width != 0 {
                out.push(format!("channel {}: width {} does not split the lane axis", ch.name, ch.width));
                continue;
            }
            if ch.depth == 0 {
                out.push(format!("channel {}: zero depth", ch.name));
            }
            let p = &self.nodes[ch.producer.node];
            let c = &self.nodes[ch.consumer.node];
            if p.outputs.get(ch.producer.port) != Some(&ch.id) || c.inputs.get(ch.consumer.port) != Some(&ch.id) {
                out.push(format!("channel {}: endpoints do not reference it", ch.name));
                continue;
            }
            let wp = self.port_width(p.id, p.out_lane, ch.id);
            let wc = self.port_width(c.id, c.in_lanes.get(ch.consumer.port).copied().flatten(), ch.id);
            if wp != ch.width || wc != ch.width {
                out.push(format!(
                    "channel {}: lane mismatch (producer {wp}, channel {}, consumer {wc})",
                    ch.name, ch.width
                ));
            }
            let layout = ch.layout();
            let produced = layout.numel() / wp.max(1);
            let consumed = layout.numel() / wc.max(1);
            if produced != consumed {
                out.push(format!("channel {}: {produced} tokens produced, {consumed} consumed", ch.name));
            }
        }
        for n in &self.nodes {
            if n.kind != NodeKind::Source && n.inputs.is_empty() {
                out.push(format!("node {}: no input channel", n.name));
            }
            if n.kind != NodeKind::Sink && n.outputs.is_empty() {
                out.push(format!("node {}: no output channel", n.name));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Construction

struct NodeDesign {
    engine: Engine,
    operands: Vec<OperandSource>,
    nest: LoopNest,
    warmup: Warmup,
    in_lanes: Vec<Option<usize>>,
    out_lane: usize,
    buffers: Vec<Buffer>,
}

fn mk_loop(op: &GenericOp, dim: DimId, name: String, stream: bool) -> Loop {
    Loop {
        name,
        dim,
        trip: op.trip_counts[dim],
        kind: op.kind(dim),
        stream,
    }
}

fn operand_sources(op: &GenericOp, graph: &LayerGraph) -> (Vec<OperandSource>, Vec<usize>) {
    let mut port = 0;
    let mut activations = Vec::new();
    let sources = op
        .inputs
        .iter()
        .enumerate()
        .map(|(i, o)| {
            if graph.is_activation(&o.tensor) {
                activations.push(i);
                port += 1;
                OperandSource::Port(port - 1)
            } else {
                OperandSource::Rom(o.tensor.clone())
            }
        })
        .collect();
    (sources, activations)
}

/// Splits an access expression into `(parallel dim, stride, reduction dim, dilation)`.
fn spatial_expr(op: &GenericOp, e: &AffineExpr) -> Option<(DimId, i64, Option<(DimId, i64)>)> {
    if e.constant != 0 {
        return None;
    }
    match e.terms.as_slice() {
        [t] if op.is_parallel(t.dim) => Some((t.dim, t.coeff, None)),
        [a, b] => {
            let (p, r) = match (op.kind(a.dim), op.kind(b.dim)) {
                (IteratorKind::Parallel, IteratorKind::Reduction) => (a, b),
                (IteratorKind::Reduction, IteratorKind::Parallel) => (b, a),
                _ => return None,
            };
            Some((p.dim, p.coeff, Some((r.dim, r.coeff))))
        }
        _ => None,
    }
}

fn reduction_design(
    op: &GenericOp,
    class: &KernelClass,
    operands: Vec<OperandSource>,
    activations: &[usize],
) -> Result<NodeDesign, StreamError> {
    let [act] = activations else {
        return Err(unsupported(op, "a reduction node needs exactly one streamed input"));
    };
    let input = &op.inputs[*act];
    let rank = input.shape.len();
    if rank != 2 && rank != 4 {
        return Err(unsupported(op, format!("streamed input of rank {rank}")));
    }
    let res = &input.map.results;
    let out = &op.output.map.results;
    let single = |e: &AffineExpr| e.single_dim().filter(|_| e.terms[0].coeff == 1 && e.constant == 0);
    let batch_dim = single(&res[0])
        .filter(|&d| op.is_parallel(d))
        .ok_or_else(|| unsupported(op, "input axis 0 must be a parallel iterator"))?;
    let in_lane_dim = single(&res[1])
        .filter(|&d| !op.is_parallel(d))
        .ok_or_else(|| unsupported(op, "input axis 1 must be a reduction iterator"))?;
    if out.len() != rank || single(&out[0]) != Some(batch_dim) {
        return Err(unsupported(op, "output must keep the batch axis of the input"));
    }
    let out_lane_dim = single(&out[1])
        .ok_or_else(|| unsupported(op, "output axis 1 must be a single iterator"))?;

    let mut spatial = Vec::new();
    for a in 2..rank {
        let (p, s, r) = spatial_expr(op, &res[a])
            .ok_or_else(|| unsupported(op, format!("input axis {a} expression `{}`", res[a])))?;
        if single(&out[a]) != Some(p) {
            return Err(unsupported(op, format!("output axis {a} does not follow input axis {a}")));
        }
        spatial.push(SpatialAxis {
            in_extent: input.shape[a],
            out_extent: op.trip_counts[p],
            out_dim: p,
            red_dim: r.map(|(d, _)| d),
            kernel: r.map_or(1, |(d, _)| op.trip_counts[d]),
            stride: s as usize,
            dilation: r.map_or(1, |(_, c)| c as usize),
        });
    }

    let names: &[&str] = if rank == 4 {
        &["n", "f", "oh", "ow", "c", "kh", "kw"]
    } else {
        &["m", "n", "k"]
    };
    let name = |d: DimId| {
        if op.num_dims() == names.len() {
            names[d].to_string()
        } else {
            format!("d{d}")
        }
    };
    let mut order = vec![batch_dim];
    order.extend(spatial.iter().map(|s| s.out_dim));
    let n_stream = order.len();
    order.push(out_lane_dim);
    order.push(in_lane_dim);
    order.extend(spatial.iter().filter_map(|s| s.red_dim));
    for d in 0..op.num_dims() {
        if !order.contains(&d) {
            if op.is_parallel(d) {
                return Err(unsupported(op, format!("parallel iterator d{d} is not an output axis")));
            }
            order.push(d);
        }
    }
    let loops = order
        .iter()
        .enumerate()
        .map(|(i, &d)| mk_loop(op, d, name(d), i < n_stream))
        .collect();
    let nest = LoopNest::new(loops, n_stream - 1);
    let in_lane = n_stream + 1;
    let out_lane = n_stream;

    let channels = input.shape[1];
    let mut buffers = Vec::new();
    let warmup_pixels;
    if class.is_sliding_window() {
        let (kh, kw, row_length) = match spatial.as_slice() {
            [h, w] => (h.k_eff(), w.k_eff(), w.in_extent),
            _ => return Err(unsupported(op, "sliding windows need two spatial axes")),
        };
        let rows = kh - 1;
        if rows > 0 {
            buffers.push(Buffer {
                name: format!("{}_line", op.op_id),
                kind: BufferKind::LineBuffer,
                shape: vec![rows, row_length, channels],
                element_bits: 8,
                partition_loop: Some(in_lane),
            });
        }
        buffers.push(Buffer {
            name: format!("{}_window", op.op_id),
            kind: BufferKind::WindowBuffer,
            shape: vec![kh, kw, channels],
            element_bits: 8,
            partition_loop: None,
        });
        warmup_pixels = (rows * row_length + kw) as u64;
    } else {
        buffers.push(Buffer {
            name: format!("{}_dataline", op.op_id),
            kind: BufferKind::DataLine,
            shape: vec![channels],
            element_bits: 8,
            partition_loop: Some(in_lane),
        });
        warmup_pixels = 1;
    }

    Ok(NodeDesign {
        engine: Engine::Reduction {
            batch_dim,
            in_lane_dim,
            out_lane_dim,
            channels,
            out_channels: op.output.shape[1],
            spatial,
        },
        operands,
        nest,
        warmup: Warmup {
            pixels: warmup_pixels,
            lane_loop: Some(in_lane),
        },
        in_lanes: vec![Some(in_lane)],
        out_lane,
        buffers,
    })
}

fn elementwise_design(op: &GenericOp, operands: Vec<OperandSource>, activations: &[usize]) -> Result<NodeDesign, StreamError> {
    let rank = op.output.shape.len();
    if rank < 2 {
        return Err(unsupported(op, "streams need a lane axis"));
    }
    if activations.is_empty() {
        return Err(unsupported(op, "no streamed input"));
    }
    let identity = |m: &crate::affine_ir::IndexingMap| {
        m.results.len() == rank
            && m.results
                .iter()
                .enumerate()
                .all(|(a, e)| e.single_dim().is_some_and(|d| op.output.map.results[a].single_dim() == Some(d)) && e.terms[0].coeff == 1 && e.constant == 0)
    };
    if !op.output.map.results.iter().all(|e| e.is_single_dim() && e.constant == 0 && e.terms[0].coeff == 1) {
        return Err(unsupported(op, "output map must select iterators directly"));
    }
    for &a in activations {
        let o = &op.inputs[a];
        if o.shape != op.output.shape || !identity(&o.map) {
            return Err(unsupported(op, format!("streamed input `{}` is not aligned with the output", o.tensor)));
        }
    }
    let dims: Vec<DimId> = op.output.map.results.iter().map(|e| e.terms[0].dim).collect();
    let names: Vec<String> = if rank == 4 {
        ["n", "c", "h", "w"].iter().map(|s| s.to_string()).collect()
    } else if rank == 2 {
        vec!["m".into(), "f".into()]
    } else {
        (0..rank).map(|a| format!("a{a}")).collect()
    };
    let mut axis_order: Vec<usize> = (0..rank).filter(|&a| a != 1).collect();
    axis_order.push(1);
    let loops = axis_order
        .iter()
        .enumerate()
        .map(|(i, &a)| mk_loop(op, dims[a], names[a].clone(), i + 1 < rank))
        .collect();
    let lane = rank - 1;
    Ok(NodeDesign {
        engine: Engine::Elementwise { lane_dim: dims[1] },
        operands,
        nest: LoopNest::new(loops, rank - 2),
        warmup: Warmup::default(),
        in_lanes: vec![Some(lane); activations.len()],
        out_lane: lane,
        buffers: Vec::new(),
    })
}

/// Consumer of a tensor: a layer input port, or the graph sink.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Consumer {
    Layer(usize, usize),
    Sink,
}

struct Builder<'a> {
    graph: &'a LayerGraph,
    nodes: Vec<StreamNode>,
    channels: Vec<StreamChannel>,
    /// Producing endpoint reserved for each (tensor, consumer) pair.
    slots: BTreeMap<(String, Consumer), Endpoint>,
}

impl Builder<'_> {
    fn consumers(&self, tensor: &str) -> Vec<Consumer> {
        let mut out: Vec<Consumer> = self
            .graph
            .consumers(tensor)
            .into_iter()
            .map(|(l, p)| Consumer::Layer(l, p))
            .collect();
        if tensor == self.graph.output.name {
            out.push(Consumer::Sink);
        }
        out
    }

    fn add_node(&mut self, mut node: StreamNode) -> NodeId {
        node.id = self.nodes.len();
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn connect(&mut self, tensor: &str, name: String, from: Endpoint, to: Endpoint) {
        let shape = self.graph.shapes[tensor].clone();
        let id = self.channels.len();
        self.channels.push(StreamChannel {
            id,
            name,
            tensor: tensor.to_string(),
            width: shape.get(1).copied().unwrap_or(1),
            shape,
            element_bits: 8,
            depth: DEPTH_MARGIN,
            producer: from,
            consumer: to,
        });
        let p = &mut self.nodes[from.node].outputs;
        if p.len() <= from.port {
            p.resize(from.port + 1, usize::MAX);
        }
        p[from.port] = id;
        let c = &mut self.nodes[to.node].inputs;
        if c.len() <= to.port {
            c.resize(to.port + 1, usize::MAX);
        }
        c[to.port] = id;
    }

    /// Registers `node` as the producer of `tensor`, inserting a broadcast
    /// when several consumers read it.
    fn publish(&mut self, tensor: &str, node: NodeId) {
        let consumers = self.consumers(tensor);
        if consumers.len() == 1 {
            self.slots.insert((tensor.to_string(), consumers[0]), Endpoint { node, port: 0 });
            return;
        }
        let b = self.add_node(StreamNode::adapter(0, format!("{tensor}_fork"), NodeKind::Broadcast));
        self.connect(tensor, tensor.to_string(), Endpoint { node, port: 0 }, Endpoint { node: b, port: 0 });
        for (port, c) in consumers.into_iter().enumerate() {
            self.slots.insert((tensor.to_string(), c), Endpoint { node: b, port });
        }
    }

    fn take_slot(&mut self, tensor: &str, consumer: Consumer) -> Result<Endpoint, StreamError> {
        self.slots
            .remove(&(tensor.to_string(), consumer))
            .ok_or_else(|| StreamError::NoProducer(tensor.to_string()))
    }

    fn channel_name(&self, tensor: &str, from: Endpoint) -> String {
        if self.nodes[from.node].kind == NodeKind::Broadcast {
            format!("{tensor}_{}", from.port)
        } else {
            tensor.to_string()
        }
    }
}

/// Builds the streaming graph for lowered `ops` of `graph` (one op per
/// layer, in layer order).
pub fn build_stream_graph(ops: &[GenericOp], graph: &LayerGraph) -> Result<StreamGraph, StreamError> {
    let mut b = Builder {
        graph,
        nodes: Vec::new(),
        channels: Vec::new(),
        slots: BTreeMap::new(),
    };
    let src = b.add_node(StreamNode::adapter(0, "source", NodeKind::Source));
    b.publish(GRAPH_INPUT, src);

    for (li, (layer, op)) in graph.layers.iter().zip(ops).enumerate() {
        let class = classify_kernel(op);
        let (operands, activations) = operand_sources(op, graph);
        let design = match class {
            KernelClass::PureParallel => elementwise_design(op, operands, &activations)?,
            _ => reduction_design(op, &class, operands, &activations)?,
        };
        // Initial widths cover the whole lane axis; DSE narrows them later.
        let mut nest = design.nest;
        for l in design.in_lanes.iter().flatten().chain([&design.out_lane]) {
            nest.unroll[*l] = nest.loops[*l].trip;
        }
        let node = b.add_node(StreamNode {
            id: 0,
            name: op.op_id.clone(),
            kind: NodeKind::Compute,
            class: Some(class),
            op: Some(op.clone()),
            engine: Some(design.engine),
            operands: design.operands,
            nest: Some(nest),
            warmup: design.warmup,
            in_lanes: design.in_lanes,
            out_lane: Some(design.out_lane),
            buffers: design.buffers,
            inputs: Vec::new(),
            outputs: Vec::new(),
        });
        for (port, tensor) in layer.inputs.iter().enumerate() {
            let from = b.take_slot(tensor, Consumer::Layer(li, port))?;
            let name = b.channel_name(tensor, from);
            b.connect(tensor, name, from, Endpoint { node, port });
        }
        b.publish(&layer.name, node);
    }

    let sink = b.add_node(StreamNode::adapter(0, "sink", NodeKind::Sink));
    let out = graph.output.name.clone();
    let from = b.take_slot(&out, Consumer::Sink)?;
    let name = b.channel_name(&out, from);
    b.connect(&out, name, from, Endpoint { node: sink, port: 0 });
    if let Some(((tensor, _), _)) = b.slots.iter().next() {
        return Err(StreamError::NoProducer(tensor.clone()));
    }

    Ok(StreamGraph {
        nodes: b.nodes,
        channels: b.channels,
        input: graph.input.clone(),
        output: graph.output.clone(),
        finalized: false,
        weights: graph.weights.clone(),
        tensor_shapes: graph.shapes.clone(),
    })
}

// ---------------------------------------------------------------------------
// FIFO sizing

fn reachable(graph: &StreamGraph, from: NodeId) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![from];
    while let Some(n) = stack.pop() {
        if seen.insert(n) {
            stack.extend(graph.successors(n));
        }
    }
    seen
}

/// Per-channel FIFO depths.
///
/// `first_output[v]` is the estimated cycle of node `v`'s first output;
/// adapters may be `None`. For every broadcast and its first common
/// descendant, channels on a branch whose summed first-output latency falls
/// short of the longest branch by `Δ` get depth `Δ + 2`; every other channel
/// gets depth 2. The fork emits one token per cycle.
pub fn size_fifo_depths(graph: &StreamGraph, first_output: &[Option<u64>]) -> Result<Vec<usize>, StreamError> {
    let fo = |v: NodeId| -> Result<u64, StreamError> {
        let n = &graph.nodes[v];
        match first_output.get(v).copied().flatten() {
            Some(c) => Ok(c),
            None if n.is_compute() => Err(StreamError::MissingEstimate(n.name.clone())),
            None => Ok(0),
        }
    };
    for n in &graph.nodes {
        fo(n.id)?;
    }
    let mut depths = vec![DEPTH_MARGIN; graph.channels.len()];
    for fork in graph.nodes.iter().filter(|n| n.kind == NodeKind::Broadcast) {
        let heads: Vec<NodeId> = fork.outputs.iter().map(|&c| graph.channels[c].consumer.node).collect();
        let reach: Vec<BTreeSet<NodeId>> = heads.iter().map(|&h| reachable(graph, h)).collect();
        let common = reach
            .iter()
            .skip(1)
            .fold(reach[0].clone(), |acc, r| acc.intersection(r).copied().collect());
        let Some(&join) = common.iter().next() else {
            continue;
        };
        // Longest latency from each node to the join, over nodes that reach it.
        let mut to_join: BTreeMap<NodeId, u64> = BTreeMap::new();
        to_join.insert(join, 0);
        for v in (0..join).rev() {
            let best = graph
                .successors(v)
                .into_iter()
                .filter_map(|w| to_join.get(&w).copied())
                .max();
            if let Some(b) = best {
                to_join.insert(v, fo(v)? + b);
            }
        }
        let lat: Vec<u64> = heads.iter().map(|h| to_join[h]).collect();
        let longest = lat.iter().copied().max().unwrap_or(0);
        for (i, &ch) in fork.outputs.iter().enumerate() {
            if lat[i] == longest {
                continue;
            }
            let need = (longest - lat[i]) as usize + DEPTH_MARGIN;
            depths[ch] = depths[ch].max(need);
            for c in &graph.channels {
                let (u, w) = (c.producer.node, c.consumer.node);
                if u != join && reach[i].contains(&u) && to_join.contains_key(&u) && to_join.contains_key(&w) {
                    depths[c.id] = depths[c.id].max(need);
                }
            }
        }
    }
    Ok(depths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ingest::{lower_graph, parse_model_str};

    pub(crate) fn graph_for(text: &str) -> StreamGraph {
        let g = parse_model_str(text).unwrap();
        let ops = lower_graph(&g).unwrap();
        build_stream_graph(&ops, &g).unwrap()
    }

    const CONV_RELU: &str = r#"{
        "input": {"shape": [1, 2, 32, 32], "dtype": "i8"},
        "layers": [
            {"name": "conv", "kind": "conv2d", "params": {"out_ch": 4, "in_ch": 2, "kernel_h": 3, "kernel_w": 3}, "inputs": ["input"]},
            {"name": "relu", "kind": "relu", "inputs": ["conv"]}
        ],
        "weights": "random:1"
    }"#;

    const RESIDUAL: &str = r#"{
        "input": {"shape": [1, 4, 8, 8], "dtype": "i8"},
        "layers": [
            {"name": "a", "kind": "conv2d", "params": {"out_ch": 4, "in_ch": 4, "kernel_h": 1, "kernel_w": 1}, "inputs": ["input"]},
            {"name": "r", "kind": "relu", "inputs": ["a"]},
            {"name": "b", "kind": "conv2d", "params": {"out_ch": 4, "in_ch": 4, "kernel_h": 1, "kernel_w": 1}, "inputs": ["r"]},
            {"name": "sum", "kind": "add", "inputs": ["b", "input"]}
        ],
        "weights": "random:2"
    }"#;

    const LINEAR: &str = r#"{
        "input": {"shape": [2, 512], "dtype": "i8"},
        "layers": [
            {"name": "fc", "kind": "linear", "params": {"in_features": 512, "out_features": 128}, "inputs": ["input"]}
        ],
        "weights": "random:3"
    }"#;

    #[test]
    fn layout_round_trip() {
        let l = StreamLayout::new(&[1, 4, 2, 3], 2);
        assert_eq!(l.beats(), 12);
        assert_eq!(l.index_of(0, 1), vec![0, 1, 0, 0]);
        assert_eq!(l.index_of(1, 0), vec![0, 2, 0, 0]);
        assert_eq!(l.index_of(2, 0), vec![0, 0, 0, 1]);
        let mut seen: Vec<usize> = (0..l.beats()).flat_map(|b| (0..2).map(move |ln| (b, ln))).map(|(b, ln)| l.flat_index(b, ln)).collect();
        seen.sort();
        assert_eq!(seen, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn conv_relu_structure() {
        let g = graph_for(CONV_RELU);
        let kinds: Vec<_> = g.nodes.iter().map(|n| n.kind).collect();
        assert_eq!(kinds, vec![NodeKind::Source, NodeKind::Compute, NodeKind::Compute, NodeKind::Sink]);
        let conv = g.node("conv").unwrap();
        assert_eq!(conv.buffers.len(), 2);
        assert_eq!(conv.buffers[0].kind, BufferKind::LineBuffer);
        assert_eq!(conv.buffers[0].shape, vec![2, 32, 2]);
        assert_eq!(conv.buffers[1].shape, vec![3, 3, 2]);
        assert!(g.node("relu").unwrap().buffers.is_empty());
        assert_eq!(g.channels.len(), 3);
        assert!(g.channels.iter().all(|c| c.depth == 2));
        assert_eq!(g.channels[1].width, 4);
        assert!(g.violations().is_empty(), "{:?}", g.violations());
        let names: Vec<_> = conv.nest.as_ref().unwrap().loops.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["n", "oh", "ow", "f", "c", "kh", "kw"]);
        assert_eq!(conv.warmup.pixels, 2 * 32 + 3);
    }

    #[test]
    fn line_buffer_bits_examples() {
        assert_eq!(line_buffer_bits(2, 32, 8, 1), 512);
        assert_eq!(line_buffer_bits(2, 224, 8, 1), 3584);
        assert_eq!(line_buffer_bits(0, 224, 8, 1), 0);
    }

    #[test]
    fn residual_is_a_diamond() {
        let g = graph_for(RESIDUAL);
        let fork = g.node("input_fork").unwrap();
        assert_eq!(fork.kind, NodeKind::Broadcast);
        assert_eq!(fork.outputs.len(), 2);
        let sum = g.node("sum").unwrap();
        assert_eq!(sum.inputs.len(), 2);
        assert_eq!(g.channels[sum.inputs[1]].producer.node, fork.id);
        assert!(g.violations().is_empty(), "{:?}", g.violations());
        // 1×1 convs are regular reductions holding one data line.
        assert_eq!(g.node("a").unwrap().buffers[0].kind, BufferKind::DataLine);
    }

    #[test]
    fn linear_data_line() {
        let g = graph_for(LINEAR);
        let fc = g.node("fc").unwrap();
        assert_eq!(fc.buffers.len(), 1);
        assert_eq!(fc.buffers[0].kind, BufferKind::DataLine);
        assert_eq!(fc.buffers[0].elements(), 512);
    }

    #[test]
    fn depths_for_straight_pipeline() {
        let g = graph_for(CONV_RELU);
        let fo = vec![None, Some(71), Some(4), None];
        assert_eq!(size_fifo_depths(&g, &fo).unwrap(), vec![2, 2, 2]);
        assert!(matches!(
            size_fifo_depths(&g, &[None, None, Some(4), None]),
            Err(StreamError::MissingEstimate(_))
        ));
    }

    #[test]
    fn depths_for_diamond() {
        let g = graph_for(RESIDUAL);
        let id = |n: &str| g.node(n).unwrap().id;
        let mut fo = vec![None; g.nodes.len()];
        fo[id("a")] = Some(10);
        fo[id("r")] = Some(4);
        fo[id("b")] = Some(10);
        fo[id("sum")] = Some(4);
        let depths = size_fifo_depths(&g, &fo).unwrap();
        let bypass = g.nodes[id("sum")].inputs[1];
        assert_eq!(depths[bypass], 24 + 2);
        for (c, d) in depths.iter().enumerate() {
            if c != bypass {
                assert_eq!(*d, 2, "channel {}", g.channels[c].name);
            }
        }
    }

    #[test]
    fn equal_branches_get_margin_only() {
        let g = graph_for(
            r#"{
            "input": {"shape": [1, 2, 4, 4], "dtype": "i8"},
            "layers": [
                {"name": "p", "kind": "relu", "inputs": ["input"]},
                {"name": "q", "kind": "relu", "inputs": ["input"]},
                {"name": "s", "kind": "add", "inputs": ["p", "q"]}
            ],
            "weights": "random:0"
        }"#,
        );
        let fo: Vec<_> = g.nodes.iter().map(|n| n.is_compute().then_some(4)).collect();
        assert!(size_fifo_depths(&g, &fo).unwrap().iter().all(|&d| d == 2));
    }
}
