//! Vitis HLS C++ emission for a finalized stream graph.
//!
//! One source file per design: a small prelude, one function per compute or
//! broadcast node in graph order, then the top function that declares every
//! channel as an array of `hls::stream` (one stream per lane) and runs the
//! nodes under `DATAFLOW`. Source and sink adapters become the top-level
//! stream ports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affine_ir::{AffineExpr, DimId, GenericOp, PayloadExpr};
use crate::dse::DseSolution;
use crate::resource_model::{CostTable, LoopNest};
use crate::stream_arch::{
    Buffer, BufferKind, Engine, NodeKind, OperandSource, Storage, StreamGraph, StreamNode,
};

/// Pragma kinds reported in the manifest, present even when unused.
pub const PRAGMA_KINDS: [&str; 8] = [
    "ARRAY_PARTITION",
    "BIND_STORAGE",
    "DATAFLOW",
    "INLINE",
    "INTERFACE",
    "PIPELINE",
    "STREAM",
    "UNROLL",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodegenError {
    #[error("graph is not finalized: {0}")]
    NotFinalized(String),
    #[error("solution does not match the graph: {0}")]
    SolutionMismatch(String),
    #[error("cannot emit node `{node}`: {message}")]
    Unsupported { node: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDecl {
    pub id: String,
    pub depth: usize,
    pub lanes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferDecl {
    pub name: String,
    pub bits: u64,
    pub partitions: usize,
    pub storage: Storage,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub pragmas: BTreeMap<String, usize>,
    pub streams: Vec<StreamDecl>,
    pub buffers: Vec<BufferDecl>,
}

impl Manifest {
    fn empty() -> Self {
        Manifest {
            pragmas: PRAGMA_KINDS.iter().map(|k| (k.to_string(), 0)).collect(),
            ..Manifest::default()
        }
    }

    pub fn pragma_count(&self, kind: &str) -> usize {
        self.pragmas.get(kind).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmittedDesign {
    pub top_name: String,
    pub prelude: String,
    /// `(node name, function text)` in graph order.
    pub functions: Vec<(String, String)>,
    pub top: String,
    pub manifest: Manifest,
}

impl EmittedDesign {
    /// An empty design: no functions and all counts zero.
    pub fn empty(top_name: &str) -> Self {
        EmittedDesign {
            top_name: top_name.to_string(),
            prelude: String::new(),
            functions: Vec::new(),
            top: String::new(),
            manifest: Manifest::empty(),
        }
    }

    pub fn source(&self) -> String {
        let mut out = self.prelude.clone();
        for (_, f) in &self.functions {
            out.push_str(f);
            out.push('\n');
        }
        out.push_str(&self.top);
        out
    }
}

pub fn render_manifest(design: &EmittedDesign) -> String {
    let mut s = serde_json::to_string_pretty(&design.manifest).expect("manifest serializes");
    s.push('\n');
    s
}

/// Turns a graph name into a C identifier.
pub fn c_ident(name: &str) -> String {
    let mut s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    if s.is_empty() || s.starts_with(|c: char| c.is_ascii_digit()) {
        s.insert(0, '_');
    }
    s
}

// ---------------------------------------------------------------------------
// Text building

struct Code {
    text: String,
    indent: usize,
}

impl Code {
    fn new() -> Self {
        Code {
            text: String::new(),
            indent: 0,
        }
    }

    fn line(&mut self, s: impl AsRef<str>) {
        let s = s.as_ref();
        if s.is_empty() {
            self.text.push('\n');
            return;
        }
        for _ in 0..self.indent {
            self.text.push_str("  ");
        }
        self.text.push_str(s);
        self.text.push('\n');
    }

    fn pragma(&mut self, s: impl AsRef<str>) {
        let _ = writeln!(self.text, "#pragma HLS {}", s.as_ref());
    }

    fn open(&mut self, s: impl AsRef<str>) {
        self.line(format!("{} {{", s.as_ref()));
        self.indent += 1;
    }

    fn close(&mut self) {
        self.indent -= 1;
        self.line("}");
    }

    /// `for` loop over `0..trip` with a label.
    fn open_loop(&mut self, label: &str, var: &str, trip: usize) {
        self.open(format!("{label}: for (int {var} = 0; {var} < {trip}; {var}++)"));
    }
}

fn count_pragmas(text: &str, manifest: &mut Manifest) {
    for line in text.lines() {
        if let Some(rest) = line.trim_start().strip_prefix("#pragma HLS ") {
            let kind = rest.split_whitespace().next().unwrap_or("");
            *manifest.pragmas.entry(kind.to_string()).or_insert(0) += 1;
        }
    }
}

fn render_affine(e: &AffineExpr, names: &BTreeMap<DimId, String>) -> String {
    let mut parts: Vec<String> = e
        .terms
        .iter()
        .map(|t| {
            let v = names.get(&t.dim).cloned().unwrap_or_else(|| format!("d{}", t.dim));
            if t.coeff == 1 {
                v
            } else {
                format!("{} * {v}", t.coeff)
            }
        })
        .collect();
    if e.constant != 0 || parts.is_empty() {
        parts.push(e.constant.to_string());
    }
    parts.join(" + ")
}

fn loop_names(nest: &LoopNest) -> BTreeMap<DimId, String> {
    nest.loops.iter().map(|l| (l.dim, c_ident(&l.name))).collect()
}

fn loop_pragmas(c: &mut Code, nest: &LoopNest, l: usize, ii: u64) {
    if nest.pipeline == Some(l) {
        c.pragma(format!("PIPELINE II={ii}"));
    }
    let u = nest.effective_unroll(l);
    if u > 1 {
        c.pragma(format!("UNROLL factor={u}"));
    }
}

/// Input-position counterpart of an output loop variable (`oh` -> `ih`).
fn input_var(out_var: &str) -> String {
    format!("i{}", out_var.strip_prefix('o').unwrap_or(out_var))
}

fn stream_param(name: &str, lanes: usize) -> String {
    format!("hls::stream<data_t> {name}[{lanes}]")
}

/// Declares a node-local buffer with its partitioning and storage binding.
fn declare_buffer(c: &mut Code, b: &Buffer, nest: &LoopNest, manifest: &mut Manifest) {
    let name = c_ident(&b.name);
    let dims: String = b.shape.iter().map(|d| format!("[{d}]")).collect();
    let storage = b.storage(nest);
    let parts = b.partitions(nest);
    let keyword = if b.kind == BufferKind::LineBuffer { "static " } else { "" };
    c.line(format!("{keyword}data_t {name}{dims};"));
    match storage {
        Storage::Registers => c.pragma(format!("ARRAY_PARTITION variable={name} complete dim=0")),
        Storage::Bram => {
            if parts > 1 {
                c.pragma(format!("ARRAY_PARTITION variable={name} cyclic factor={parts} dim={}", b.shape.len()));
            }
            c.pragma(format!("BIND_STORAGE variable={name} type=ram_2p impl=bram"));
        }
    }
    manifest.buffers.push(BufferDecl {
        name: b.name.clone(),
        bits: b.bits(),
        partitions: parts,
        storage,
    });
}

/// Declares a weight ROM, partitioned along every axis walked by an
/// unrolled loop.
fn declare_rom(c: &mut Code, graph: &StreamGraph, op: &GenericOp, k: usize, name: &str, nest: &LoopNest) -> Result<(), CodegenError> {
    let w = graph.weights.get(name).ok_or_else(|| CodegenError::Unsupported {
        node: op.op_id.clone(),
        message: format!("weight tensor `{name}` is missing"),
    })?;
    let ident = c_ident(name);
    let dims: String = w.shape.iter().map(|d| format!("[{d}]")).collect();
    c.line(format!("static const data_t {ident}{dims} = {{"));
    c.indent += 1;
    for chunk in w.data.chunks(16) {
        let vals: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
        c.line(format!("{},", vals.join(", ")));
    }
    c.indent -= 1;
    c.line("};");
    for (axis, e) in op.inputs[k].map.results.iter().enumerate() {
        if !e.is_single_dim() {
            continue;
        }
        let Some(l) = nest.loops.iter().position(|l| l.dim == e.terms[0].dim) else {
            continue;
        };
        let u = nest.effective_unroll(l);
        if u == w.shape[axis] {
            c.pragma(format!("ARRAY_PARTITION variable={ident} complete dim={}", axis + 1));
        } else if u > 1 {
            c.pragma(format!("ARRAY_PARTITION variable={ident} cyclic factor={u} dim={}", axis + 1));
        }
    }
    c.pragma(format!("BIND_STORAGE variable={ident} type=rom_1p impl=lutram"));
    Ok(())
}

fn rom_access(op: &GenericOp, k: usize, name: &str, names: &BTreeMap<DimId, String>) -> String {
    let idx: String = op.inputs[k]
        .map
        .results
        .iter()
        .map(|e| format!("[{}]", render_affine(e, names)))
        .collect();
    format!("{}{idx}", c_ident(name))
}

fn missing(node: &StreamNode, what: &str) -> CodegenError {
    CodegenError::Unsupported {
        node: node.name.clone(),
        message: format!("missing {what}"),
    }
}

// ---------------------------------------------------------------------------
// Node functions

fn emit_reduction(graph: &StreamGraph, node: &StreamNode, ii: u64, manifest: &mut Manifest) -> Result<String, CodegenError> {
    let op = node.op.as_ref().ok_or_else(|| missing(node, "op"))?;
    let nest = node.nest.as_ref().ok_or_else(|| missing(node, "loop nest"))?;
    let Some(Engine::Reduction {
        channels,
        spatial,
        ..
    }) = &node.engine
    else {
        return Err(missing(node, "reduction engine"));
    };
    let channels = *channels;
    let input = &graph.channels[node.inputs[0]];
    let output = &graph.channels[node.outputs[0]];
    let (k_in, k_out) = (input.width, output.width);
    let fname = c_ident(&node.name);
    let names = loop_names(nest);
    let n_stream = nest.loops.iter().filter(|l| l.stream).count();

    let mut c = Code::new();
    c.open(format!(
        "static void {fname}({}, {})",
        stream_param("in", k_in),
        stream_param("out", k_out)
    ));
    for (k, src) in node.operands.iter().enumerate() {
        if let OperandSource::Rom(w) = src {
            declare_rom(&mut c, graph, op, k, w, nest)?;
        }
    }
    for b in &node.buffers {
        declare_buffer(&mut c, b, nest, manifest);
    }
    let line = node.buffers.iter().find(|b| b.kind == BufferKind::LineBuffer).map(|b| c_ident(&b.name));
    let window = node.buffers.iter().find(|b| b.kind == BufferKind::WindowBuffer);
    let dataline = node.buffers.iter().find(|b| b.kind == BufferKind::DataLine).map(|b| c_ident(&b.name));

    // Stream loops walk the input pixels; an output position is computed
    // once its last input pixel has arrived.
    let batch = &nest.loops[0];
    c.open_loop(&format!("{fname}_{}", c_ident(&batch.name)), &c_ident(&batch.name), batch.trip);
    loop_pragmas(&mut c, nest, 0, ii);
    let mut guard = Vec::new();
    for (a, ax) in spatial.iter().enumerate() {
        let l = a + 1;
        let out_var = c_ident(&nest.loops[l].name);
        let in_var = input_var(&out_var);
        c.open_loop(&format!("{fname}_{in_var}"), &in_var, ax.in_extent);
        loop_pragmas(&mut c, nest, l, ii);
        let lead = ax.k_eff() - 1;
        guard.push(if lead > 0 {
            format!("{in_var} >= {lead}")
        } else {
            String::new()
        });
        if ax.stride > 1 {
            guard.push(format!("({in_var} - {lead}) % {} == 0", ax.stride));
        }
    }
    guard.retain(|g| !g.is_empty());

    // Ingest one pixel.
    c.open_loop(&format!("{fname}_read"), "ci", channels);
    if k_in > 1 {
        c.pragma(format!("UNROLL factor={k_in}"));
    }
    c.line(format!("data_t px = in[ci % {k_in}].read();"));
    if let Some(win) = window {
        let (kh, kw) = (win.shape[0], win.shape[1]);
        let wname = c_ident(&win.name);
        let col = spatial.get(1).map(|_| input_var(&c_ident(&nest.loops[2].name))).unwrap_or_else(|| "0".into());
        if kw > 1 {
            c.open_loop(&format!("{fname}_shift_r"), "r", kh);
            c.pragma("UNROLL");
            c.open_loop(&format!("{fname}_shift_j"), "j", kw - 1);
            c.pragma("UNROLL");
            c.line(format!("{wname}[r][j][ci] = {wname}[r][j + 1][ci];"));
            c.close();
            c.close();
        }
        if let Some(lb) = &line {
            c.open_loop(&format!("{fname}_fill"), "r", kh - 1);
            c.pragma("UNROLL");
            c.line(format!("{wname}[r][{}][ci] = {lb}[r][{col}][ci];", kw - 1));
            c.close();
        }
        c.line(format!("{wname}[{}][{}][ci] = px;", kh - 1, kw - 1));
        if let Some(lb) = &line {
            if kh > 2 {
                c.open_loop(&format!("{fname}_line_shift"), "r", kh - 2);
                c.pragma("UNROLL");
                c.line(format!("{lb}[r][{col}][ci] = {lb}[r + 1][{col}][ci];"));
                c.close();
            }
            c.line(format!("{lb}[{}][{col}][ci] = px;", kh - 2));
        }
    } else if let Some(dl) = &dataline {
        c.line(format!("{dl}[ci] = px;"));
    }
    c.close();

    if !guard.is_empty() {
        c.open(format!("if ({})", guard.join(" && ")));
    }
    for (a, ax) in spatial.iter().enumerate() {
        let out_var = c_ident(&nest.loops[a + 1].name);
        let lead = ax.k_eff() - 1;
        let in_var = input_var(&out_var);
        let shifted = if lead > 0 { format!("({in_var} - {lead})") } else { in_var };
        let value = if ax.stride > 1 { format!("{shifted} / {}", ax.stride) } else { shifted };
        c.line(format!("const int {out_var} = {value};"));
    }

    // Reduction loops. The out-lane loop comes first and owns the write.
    for l in n_stream..nest.len() {
        let lp = &nest.loops[l];
        let var = c_ident(&lp.name);
        c.open_loop(&format!("{fname}_{var}"), &var, lp.trip);
        loop_pragmas(&mut c, nest, l, ii);
        if l == n_stream {
            c.line("acc_t acc = 0;");
        }
    }
    let inputs: Vec<String> = node
        .operands
        .iter()
        .enumerate()
        .map(|(k, src)| match src {
            OperandSource::Rom(w) => rom_access(op, k, w, &names),
            OperandSource::Port(_) => {
                let m = &op.inputs[k].map.results;
                let lane = render_affine(&m[1], &names);
                match window {
                    Some(win) => {
                        let offset = |axis: usize, a: usize| {
                            let out_dim = spatial[a].out_dim;
                            let e = AffineExpr {
                                terms: m[axis].terms.iter().filter(|t| t.dim != out_dim).cloned().collect(),
                                constant: m[axis].constant,
                            };
                            render_affine(&e, &names)
                        };
                        format!("{}[{}][{}][{lane}]", c_ident(&win.name), offset(2, 0), offset(3, 1))
                    }
                    None => format!("{}[{lane}]", dataline.clone().unwrap_or_default()),
                }
            }
        })
        .collect();
    c.line(format!("acc = {};", op.payload.to_c(&inputs, "acc")));
    for l in (n_stream..nest.len()).rev() {
        if l == n_stream {
            let out_var = c_ident(&nest.loops[l].name);
            c.line(format!("out[{out_var} % {k_out}].write(clamp_i8(acc));"));
        }
        c.close();
    }
    if !guard.is_empty() {
        c.close();
    }
    for _ in 0..n_stream {
        c.close();
    }
    c.close();
    Ok(c.text)
}

fn emit_elementwise(graph: &StreamGraph, node: &StreamNode, ii: u64) -> Result<String, CodegenError> {
    let op = node.op.as_ref().ok_or_else(|| missing(node, "op"))?;
    let nest = node.nest.as_ref().ok_or_else(|| missing(node, "loop nest"))?;
    let fname = c_ident(&node.name);
    let names = loop_names(nest);
    let k_out = graph.channels[node.outputs[0]].width;
    let mut params: Vec<String> = node
        .inputs
        .iter()
        .enumerate()
        .map(|(p, &ch)| stream_param(&format!("in{p}"), graph.channels[ch].width))
        .collect();
    params.push(stream_param("out", k_out));

    let mut c = Code::new();
    c.open(format!("static void {fname}({})", params.join(", ")));
    for (k, src) in node.operands.iter().enumerate() {
        if let OperandSource::Rom(w) = src {
            declare_rom(&mut c, graph, op, k, w, nest)?;
        }
    }
    for (l, lp) in nest.loops.iter().enumerate() {
        let var = c_ident(&lp.name);
        c.open_loop(&format!("{fname}_{var}"), &var, lp.trip);
        loop_pragmas(&mut c, nest, l, ii);
    }
    let lane = c_ident(&nest.loops[nest.len() - 1].name);
    let inputs: Vec<String> = node
        .operands
        .iter()
        .enumerate()
        .map(|(k, src)| match src {
            OperandSource::Port(p) => {
                let w = graph.channels[node.inputs[*p]].width;
                c.line(format!("const data_t v{p} = in{p}[{lane} % {w}].read();"));
                format!("v{p}")
            }
            OperandSource::Rom(w) => rom_access(op, k, w, &names),
        })
        .collect();
    let value = op.payload.to_c(&inputs, "0");
    let value = match op.payload {
        PayloadExpr::ClampToI8(_) => value,
        _ => format!("clamp_i8({value})"),
    };
    c.line(format!("out[{lane} % {k_out}].write({value});"));
    for _ in 0..nest.len() {
        c.close();
    }
    c.close();
    Ok(c.text)
}

fn emit_broadcast(graph: &StreamGraph, node: &StreamNode, ii: u64) -> String {
    let fname = c_ident(&node.name);
    let input = &graph.channels[node.inputs[0]];
    let k = input.width;
    let mut params = vec![stream_param("in", k)];
    params.extend((0..node.outputs.len()).map(|p| stream_param(&format!("out{p}"), k)));
    let mut c = Code::new();
    c.open(format!("static void {fname}({})", params.join(", ")));
    c.open_loop(&format!("{fname}_beat"), "b", input.layout().beats());
    c.pragma(format!("PIPELINE II={ii}"));
    c.open_loop(&format!("{fname}_lane"), "l", k);
    c.line("const data_t v = in[l].read();");
    for p in 0..node.outputs.len() {
        c.line(format!("out{p}[l].write(v);"));
    }
    c.close();
    c.close();
    c.close();
    c.text
}

fn emit_top(graph: &StreamGraph, top_name: &str, manifest: &mut Manifest) -> String {
    let input = graph.source().outputs[0];
    let output = graph.sink().inputs[0];
    let chan = |id: usize| format!("{}_s", c_ident(&graph.channels[id].name));
    let mut c = Code::new();
    c.open(format!(
        "void {top_name}({}, {})",
        stream_param(&chan(input), graph.channels[input].width),
        stream_param(&chan(output), graph.channels[output].width)
    ));
    for port in [input, output] {
        c.pragma(format!("INTERFACE axis port={}", chan(port)));
    }
    c.pragma("DATAFLOW");
    for ch in &graph.channels {
        let name = chan(ch.id);
        if ch.id != input && ch.id != output {
            c.line(format!("{};", stream_param(&name, ch.width)));
        }
        c.pragma(format!("STREAM variable={name} depth={}", ch.depth));
        manifest.streams.push(StreamDecl {
            id: ch.name.clone(),
            depth: ch.depth,
            lanes: ch.width,
        });
    }
    c.line("");
    for node in &graph.nodes {
        if matches!(node.kind, NodeKind::Source | NodeKind::Sink) {
            continue;
        }
        let args: Vec<String> = node.inputs.iter().chain(&node.outputs).map(|&ch| chan(ch)).collect();
        c.line(format!("{}({});", c_ident(&node.name), args.join(", ")));
    }
    c.close();
    c.text
}

const PRELUDE: &str = "#include <cstdint>

#include <ap_int.h>
#include <hls_stream.h>

typedef ap_int<8> data_t;
typedef ap_int<32> acc_t;

static data_t clamp_i8(acc_t v) {
#pragma HLS INLINE
  return v > 127 ? data_t(127) : (v < -128 ? data_t(-128) : data_t(v));
}

";

/// Emits the design. `top_name` names the top function and is sanitized
/// into a C identifier; pipelined loops get the initiation interval of
/// `costs`.
pub fn emit(graph: &StreamGraph, solution: &DseSolution, top_name: &str, costs: &CostTable) -> Result<EmittedDesign, CodegenError> {
    if !graph.finalized {
        return Err(CodegenError::NotFinalized("run design space exploration first".into()));
    }
    let problems = graph.violations();
    if !problems.is_empty() {
        return Err(CodegenError::NotFinalized(problems.join("; ")));
    }
    for choice in &solution.nodes {
        let node = graph
            .node(&choice.name)
            .ok_or_else(|| CodegenError::SolutionMismatch(format!("unknown node `{}`", choice.name)))?;
        let nest = node.nest.as_ref().ok_or_else(|| missing(node, "loop nest"))?;
        if nest.unroll != choice.unroll || nest.pipeline != choice.pipeline {
            return Err(CodegenError::SolutionMismatch(format!(
                "node `{}` is configured with u={:?} pipeline={:?}, solution has u={:?} pipeline={:?}",
                node.name, nest.unroll, nest.pipeline, choice.unroll, choice.pipeline
            )));
        }
    }
    let ii = costs.ii.max(1);
    let top_name = c_ident(top_name);
    let mut manifest = Manifest::empty();
    let mut functions = Vec::new();
    for node in &graph.nodes {
        let text = match (node.kind, &node.engine) {
            (NodeKind::Compute, Some(Engine::Reduction { .. })) => emit_reduction(graph, node, ii, &mut manifest)?,
            (NodeKind::Compute, _) => emit_elementwise(graph, node, ii)?,
            (NodeKind::Broadcast, _) => emit_broadcast(graph, node, ii),
            _ => continue,
        };
        functions.push((node.name.clone(), text));
    }
    let top = emit_top(graph, &top_name, &mut manifest);
    let prelude = format!("// {top_name}: {} DSP, {} BRAM18K, {} estimated cycles\n{PRELUDE}", solution.dsp, solution.bram, solution.cycles);
    let design = EmittedDesign {
        top_name,
        prelude,
        functions,
        top,
        manifest,
    };
    let mut manifest = design.manifest.clone();
    count_pragmas(&design.source(), &mut manifest);
    Ok(EmittedDesign { manifest, ..design })
}

// ---------------------------------------------------------------------------
// Source checks

/// Every array declared in `source` with its element count.
pub fn array_declarations(source: &str) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for line in source.lines() {
        for ty in ["data_t ", "acc_t ", "hls::stream<data_t> "] {
            for (at, _) in line.match_indices(ty) {
                if let Some(decl) = parse_array(&line[at + ty.len()..]) {
                    out.push(decl);
                }
            }
        }
    }
    out
}

/// Parses `name[d0][d1]...` at the start of `text`.
fn parse_array(text: &str) -> Option<(String, usize)> {
    let name_len = text.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))?;
    let (name, mut rest) = text.split_at(name_len);
    let mut elems = 1usize;
    let mut dims = 0;
    while let Some(r) = rest.strip_prefix('[') {
        let close = r.find(']')?;
        elems *= r[..close].parse::<usize>().ok()?;
        dims += 1;
        rest = &r[close + 1..];
    }
    (!name.is_empty() && dims > 0).then(|| (name.to_string(), elems))
}

/// Mutable data arrays whose size equals that of a full tensor carried
/// between nodes. Constant weight tables are parameters and stream arrays
/// are lane bundles of FIFOs, so neither is considered.
pub fn intermediate_arrays(source: &str, graph: &StreamGraph) -> Vec<String> {
    let sizes: Vec<usize> = graph.channels.iter().map(|c| c.shape.iter().product()).collect();
    let data: String = source
        .lines()
        .filter(|l| !l.contains("const data_t"))
        .map(|l| l.replace("hls::stream<data_t>", "hls::stream"))
        .flat_map(|l| [l, "\n".to_string()])
        .collect();
    array_declarations(&data)
        .into_iter()
        .filter(|(_, n)| sizes.contains(n))
        .map(|(name, n)| format!("{name}[{n}]"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dse::{optimize, Objective};
    use crate::model_ingest::{lower_graph, parse_model_str};
    use crate::resource_model::{CostTable, ResourceBudget};
    use crate::stream_arch::build_stream_graph;

    fn design(text: &str) -> (StreamGraph, EmittedDesign) {
        let g = parse_model_str(text).unwrap();
        let sg = build_stream_graph(&lower_graph(&g).unwrap(), &g).unwrap();
        let (fin, sol) = optimize(&sg, ResourceBudget::default(), CostTable::default(), Objective::Sum).unwrap();
        let d = emit(&fin, &sol, "top", &CostTable::default()).unwrap();
        (fin, d)
    }

    const CONV_RELU: &str = r#"{
        "input": {"shape": [1, 4, 8, 8], "dtype": "i8"},
        "layers": [
            {"name": "conv", "kind": "conv2d", "params": {"out_ch": 4, "in_ch": 4, "kernel_h": 3, "kernel_w": 3}, "inputs": ["input"]},
            {"name": "relu", "kind": "relu", "inputs": ["conv"]}
        ],
        "weights": "random:3"
    }"#;

    #[test]
    fn conv_relu_pragma_counts() {
        let (g, d) = design(CONV_RELU);
        assert_eq!(d.functions.len(), 2);
        let m = &d.manifest;
        assert_eq!(m.pragma_count("DATAFLOW"), 1);
        assert_eq!(m.pragma_count("STREAM"), g.channels.len());
        assert!(m.pragma_count("STREAM") >= 3);
        assert_eq!(m.pragma_count("PIPELINE"), 2);
        let src = d.source();
        assert!(src.contains("conv_line"));
        assert_eq!(intermediate_arrays(&src, &g), Vec::<String>::new());
    }

    #[test]
    fn relu_only_has_no_partitions() {
        let (_, d) = design(
            r#"{"input": {"shape": [1, 4, 8, 8], "dtype": "i8"},
                "layers": [{"name": "relu", "kind": "relu", "inputs": ["input"]}],
                "weights": "random:1"}"#,
        );
        assert_eq!(d.manifest.pragma_count("ARRAY_PARTITION"), 0);
        assert_eq!(d.manifest.pragma_count("PIPELINE"), 1);
        assert!(d.source().contains("PIPELINE II=1"));
    }

    #[test]
    fn empty_manifest_has_zero_counts() {
        let d = EmittedDesign::empty("x");
        let json: serde_json::Value = serde_json::from_str(&render_manifest(&d)).unwrap();
        for k in PRAGMA_KINDS {
            assert_eq!(json["pragmas"][k], 0);
        }
        assert_eq!(render_manifest(&d), render_manifest(&d));
    }

    #[test]
    fn unfinalized_graph_is_rejected() {
        let g = parse_model_str(CONV_RELU).unwrap();
        let sg = build_stream_graph(&lower_graph(&g).unwrap(), &g).unwrap();
        let (_, sol) = optimize(&sg, ResourceBudget::default(), CostTable::default(), Objective::Sum).unwrap();
        assert!(matches!(emit(&sg, &sol, "top", &CostTable::default()), Err(CodegenError::NotFinalized(_))));
    }

    #[test]
    fn array_parser_counts_elements() {
        let src = "  static data_t a_line[2][8][4];\nvoid f(hls::stream<data_t> in[4], hls::stream<data_t> out[2]) {\n";
        let decls = array_declarations(src);
        assert_eq!(decls, vec![("a_line".into(), 64), ("in".into(), 4), ("out".into(), 2)]);
    }
}
