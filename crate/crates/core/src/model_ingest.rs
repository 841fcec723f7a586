//! Layer-graph model files and their lowering to [`GenericOp`]s.
//!
//! A model is a JSON document:
//!
//! ```json
//! {
//!   "input": { "shape": [1, 3, 32, 32], "dtype": "i8" },
//!   "layers": [
//!     { "name": "conv0", "kind": "conv2d",
//!       "params": { "out_ch": 8, "in_ch": 3, "kernel_h": 3, "kernel_w": 3,
//!                   "stride": 1, "dilation": 1 },
//!       "inputs": ["input"] },
//!     { "name": "relu0", "kind": "relu", "inputs": ["conv0"] }
//!   ],
//!   "weights": "random:7"
//! }
//! ```
//!
//! `weights` is either `"random:<seed>"` (every weight tensor drawn from a
//! seeded generator) or an object mapping `<layer>.weight` / `<layer>.bias`
//! to `{ "shape": [...], "data": [...] | "random:<seed>" }`. The graph input
//! is always called `input`. Padding is always valid (no padding).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affine_ir::{
    validate_op, AffineExpr, GenericOp, IndexingMap, IteratorKind, Operand, PayloadExpr, TensorDecl,
};

/// Name of the graph input tensor.
pub const GRAPH_INPUT: &str = "input";

/// Range of randomly generated weights (inclusive).
pub const RANDOM_WEIGHT_RANGE: (i8, i8) = (-3, 3);
/// Range of randomly generated biases (inclusive).
pub const RANDOM_BIAS_RANGE: (i8, i8) = (-16, 16);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("model parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("model parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("shape mismatch in layer `{layer}`: {message}")]
    Shape { layer: String, message: String },
    #[error("layer graph contains a cycle through {0:?}")]
    Cycle(Vec<String>),
    #[error("unsupported layer `{layer}`: {message}")]
    Unsupported { layer: String, message: String },
    #[error("lowered op `{op}` failed validation: {diagnostics}")]
    Invalid { op: String, diagnostics: String },
}

fn parse_err(context: impl Into<String>, message: impl Into<String>) -> ModelError {
    ModelError::Parse {
        context: context.into(),
        message: message.into(),
    }
}

fn shape_err(layer: &str, message: impl Into<String>) -> ModelError {
    ModelError::Shape {
        layer: layer.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        out_ch: usize,
        in_ch: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        dilation: usize,
    },
    Relu,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    ElementwiseAdd,
    BiasAdd,
}

impl LayerKind {
    fn arity(&self) -> usize {
        match self {
            LayerKind::ElementwiseAdd => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
}

/// A validated layer DAG. `layers` is in topological order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub layers: Vec<LayerSpec>,
    pub input: TensorDecl,
    pub output: TensorDecl,
    pub weights: BTreeMap<String, WeightTensor>,
    /// Output shape of every tensor (graph input and each layer).
    pub shapes: BTreeMap<String, Vec<usize>>,
}

impl LayerGraph {
    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Layers (with port index) reading `tensor`.
    pub fn consumers(&self, tensor: &str) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            for (pi, inp) in l.inputs.iter().enumerate() {
                if inp == tensor {
                    out.push((li, pi));
                }
            }
        }
        out
    }

    /// Every tensor passed between nodes or across the graph boundary.
    pub fn activation_tensors(&self) -> impl Iterator<Item = (&String, &Vec<usize>)> {
        self.shapes.iter()
    }

    pub fn is_activation(&self, tensor: &str) -> bool {
        self.shapes.contains_key(tensor)
    }
}

// ---------------------------------------------------------------------------
// Raw file schema

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    input: RawInput,
    layers: Vec<RawLayer>,
    #[serde(default)]
    weights: Option<RawWeights>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInput {
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    name: String,
    kind: String,
    #[serde(default)]
    params: Option<serde_json::Value>,
    inputs: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawWeights {
    Random(String),
    Explicit(BTreeMap<String, RawWeight>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeight {
    shape: Vec<usize>,
    data: RawWeightData,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawWeightData {
    Values(Vec<i64>),
    Random(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvParams {
    out_ch: usize,
    in_ch: usize,
    kernel_h: usize,
    kernel_w: usize,
    #[serde(default = "one")]
    stride: usize,
    #[serde(default = "one")]
    dilation: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearParams {
    in_features: usize,
    out_features: usize,
}

fn one() -> usize {
    1
}

fn parse_seed(s: &str, context: &str) -> Result<u64, ModelError> {
    s.strip_prefix("random:")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(context, format!("expected \"random:<seed>\", got {s:?}")))
}

fn parse_kind(raw: &RawLayer) -> Result<LayerKind, ModelError> {
    let ctx = format!("layer `{}`", raw.name);
    let params = |ctx: &str| {
        raw.params
            .clone()
            .ok_or_else(|| parse_err(ctx, "missing field `params`"))
    };
    let no_params = || match &raw.params {
        None => Ok(()),
        Some(serde_json::Value::Object(m)) if m.is_empty() => Ok(()),
        Some(_) => Err(parse_err(&ctx, format!("layer kind `{}` takes no params", raw.kind))),
    };
    let kind = match raw.kind.as_str() {
        "conv2d" => {
            let p: ConvParams = serde_json::from_value(params(&ctx)?)
                .map_err(|e| parse_err(format!("{ctx}.params"), e.to_string()))?;
            if p.stride == 0 || p.dilation == 0 || p.kernel_h == 0 || p.kernel_w == 0 {
                return Err(parse_err(
                    format!("{ctx}.params"),
                    "stride, dilation and kernel extents must be >= 1",
                ));
            }
            if p.out_ch == 0 || p.in_ch == 0 {
                return Err(parse_err(format!("{ctx}.params"), "channel counts must be >= 1"));
            }
            LayerKind::Conv2d {
                out_ch: p.out_ch,
                in_ch: p.in_ch,
                kernel_h: p.kernel_h,
                kernel_w: p.kernel_w,
                stride: p.stride,
                dilation: p.dilation,
            }
        }
        "linear" => {
            let p: LinearParams = serde_json::from_value(params(&ctx)?)
                .map_err(|e| parse_err(format!("{ctx}.params"), e.to_string()))?;
            if p.in_features == 0 || p.out_features == 0 {
                return Err(parse_err(format!("{ctx}.params"), "feature counts must be >= 1"));
            }
            LayerKind::Linear {
                in_features: p.in_features,
                out_features: p.out_features,
            }
        }
        "relu" => {
            no_params()?;
            LayerKind::Relu
        }
        "add" | "elementwise_add" => {
            no_params()?;
            LayerKind::ElementwiseAdd
        }
        "bias_add" => {
            no_params()?;
            LayerKind::BiasAdd
        }
        other => return Err(parse_err(format!("{ctx}.kind"), format!("unknown layer kind `{other}`"))),
    };
    Ok(kind)
}

/// Reads and validates a model file.
pub fn parse_model(path: impl AsRef<Path>) -> Result<LayerGraph, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_model_str(&text)
}

pub fn parse_model_str(text: &str) -> Result<LayerGraph, ModelError> {
    let raw: RawModel = serde_json::from_str(text)?;
    if raw.input.dtype != "i8" {
        return Err(parse_err("input.dtype", format!("unsupported dtype `{}` (only i8)", raw.input.dtype)));
    }
    if raw.input.shape.is_empty() || raw.input.shape.contains(&0) {
        return Err(parse_err("input.shape", "shape must be non-empty with positive extents"));
    }

    let mut names = BTreeSet::new();
    let mut layers = Vec::new();
    for raw_layer in &raw.layers {
        if raw_layer.name == GRAPH_INPUT {
            return Err(parse_err(format!("layer `{}`", raw_layer.name), "name is reserved for the graph input"));
        }
        if !names.insert(raw_layer.name.clone()) {
            return Err(parse_err(format!("layer `{}`", raw_layer.name), "duplicate layer name"));
        }
        let kind = parse_kind(raw_layer)?;
        if raw_layer.inputs.len() != kind.arity() {
            return Err(parse_err(
                format!("layer `{}`.inputs", raw_layer.name),
                format!("expected {} inputs, got {}", kind.arity(), raw_layer.inputs.len()),
            ));
        }
        layers.push(LayerSpec {
            name: raw_layer.name.clone(),
            kind,
            inputs: raw_layer.inputs.clone(),
        });
    }
    if layers.is_empty() {
        return Err(parse_err("layers", "model has no layers"));
    }
    for l in &layers {
        for inp in &l.inputs {
            if inp != GRAPH_INPUT && !names.contains(inp) {
                return Err(parse_err(format!("layer `{}`.inputs", l.name), format!("unknown tensor `{inp}`")));
            }
        }
    }

    let layers = topo_sort(layers)?;

    let mut shapes = BTreeMap::new();
    shapes.insert(GRAPH_INPUT.to_string(), raw.input.shape.clone());
    for l in &layers {
        let ins: Vec<Vec<usize>> = l.inputs.iter().map(|i| shapes[i].clone()).collect();
        let out = output_shape(l, &ins)?;
        shapes.insert(l.name.clone(), out);
    }

    let consumed: BTreeSet<&str> = layers.iter().flat_map(|l| l.inputs.iter().map(String::as_str)).collect();
    if !consumed.contains(GRAPH_INPUT) {
        return Err(parse_err("layers", "graph input is never consumed"));
    }
    let sinks: Vec<&LayerSpec> = layers.iter().filter(|l| !consumed.contains(l.name.as_str())).collect();
    if sinks.len() != 1 {
        return Err(parse_err(
            "layers",
            format!(
                "expected exactly one graph output, found {:?}",
                sinks.iter().map(|l| &l.name).collect::<Vec<_>>()
            ),
        ));
    }
    let output_name = sinks[0].name.clone();

    let weights = build_weights(&layers, &shapes, raw.weights)?;

    let graph = LayerGraph {
        input: TensorDecl::i8(GRAPH_INPUT, raw.input.shape),
        output: TensorDecl::i8(output_name.clone(), shapes[&output_name].clone()),
        layers,
        weights,
        shapes,
    };
    for op in lower_graph(&graph)? {
        let diags = validate_op(&op);
        if !diags.is_empty() {
            return Err(ModelError::Invalid {
                op: op.op_id,
                diagnostics: diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "),
            });
        }
    }
    Ok(graph)
}

fn topo_sort(layers: Vec<LayerSpec>) -> Result<Vec<LayerSpec>, ModelError> {
    let index: BTreeMap<String, usize> = layers.iter().enumerate().map(|(i, l)| (l.name.clone(), i)).collect();
    let mut indegree = vec![0usize; layers.len()];
    let mut users = vec![Vec::new(); layers.len()];
    for (i, l) in layers.iter().enumerate() {
        for inp in &l.inputs {
            if let Some(&p) = index.get(inp) {
                indegree[i] += 1;
                users[p].push(i);
            }
        }
    }
    // Stable Kahn: among ready layers the earliest in the file goes first.
    let mut ready: BTreeSet<usize> = (0..layers.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(layers.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &u in &users[i] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.insert(u);
            }
        }
    }
    if order.len() != layers.len() {
        let stuck = (0..layers.len())
            .filter(|i| !order.contains(i))
            .map(|i| layers[i].name.clone())
            .collect();
        return Err(ModelError::Cycle(stuck));
    }
    let mut slots: Vec<Option<LayerSpec>> = layers.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().unwrap()).collect())
}

/// Output spatial extent under valid padding.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    if n < span {
        return None;
    }
    Some((n - span) / stride + 1)
}

fn output_shape(layer: &LayerSpec, ins: &[Vec<usize>]) -> Result<Vec<usize>, ModelError> {
    let name = &layer.name;
    match &layer.kind {
        LayerKind::Conv2d {
            out_ch,
            in_ch,
            kernel_h,
            kernel_w,
            stride,
            dilation,
        } => {
            let s = &ins[0];
            if s.len() != 4 {
                return Err(shape_err(name, format!("conv2d expects a rank-4 NCHW input, got {s:?}")));
            }
            if s[1] != *in_ch {
                return Err(shape_err(name, format!("in_ch = {in_ch} but input has {} channels", s[1])));
            }
            let oh = conv_out_extent(s[2], *kernel_h, *stride, *dilation)
                .ok_or_else(|| shape_err(name, format!("kernel height {kernel_h} does not fit input height {}", s[2])))?;
            let ow = conv_out_extent(s[3], *kernel_w, *stride, *dilation)
                .ok_or_else(|| shape_err(name, format!("kernel width {kernel_w} does not fit input width {}", s[3])))?;
            Ok(vec![s[0], *out_ch, oh, ow])
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let s = &ins[0];
            if s.len() != 2 {
                return Err(shape_err(name, format!("linear expects a rank-2 input, got {s:?}")));
            }
            if s[1] != *in_features {
                return Err(shape_err(name, format!("in_features = {in_features} but input has {}", s[1])));
            }
            Ok(vec![s[0], *out_features])
        }
        LayerKind::Relu | LayerKind::BiasAdd => {
            if ins[0].len() < 2 {
                return Err(shape_err(name, "elementwise layers need rank >= 2 tensors"));
            }
            Ok(ins[0].clone())
        }
        LayerKind::ElementwiseAdd => {
            if ins[0] != ins[1] {
                return Err(shape_err(name, format!("operand shapes differ: {:?} vs {:?}", ins[0], ins[1])));
            }
            if ins[0].len() < 2 {
                return Err(shape_err(name, "elementwise layers need rank >= 2 tensors"));
            }
            Ok(ins[0].clone())
        }
    }
}

/// Weight tensors a layer needs: name, shape and random-value range.
fn required_weights(layer: &LayerSpec, in_shape: &[usize]) -> Vec<(String, Vec<usize>, (i8, i8))> {
    match &layer.kind {
        LayerKind::Conv2d {
            out_ch,
            in_ch,
            kernel_h,
            kernel_w,
            ..
        } => vec![(layer.weight_name(), vec![*out_ch, *in_ch, *kernel_h, *kernel_w], RANDOM_WEIGHT_RANGE)],
        LayerKind::Linear {
            in_features,
            out_features,
        } => vec![(layer.weight_name(), vec![*in_features, *out_features], RANDOM_WEIGHT_RANGE)],
        LayerKind::BiasAdd => vec![(layer.bias_name(), vec![in_shape[1]], RANDOM_BIAS_RANGE)],
        _ => Vec::new(),
    }
}

fn random_data(seed: u64, n: usize, range: (i8, i8)) -> Vec<i8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(range.0..=range.1)).collect()
}

fn build_weights(
    layers: &[LayerSpec],
    shapes: &BTreeMap<String, Vec<usize>>,
    raw: Option<RawWeights>,
) -> Result<BTreeMap<String, WeightTensor>, ModelError> {
    let mut out = BTreeMap::new();
    let required = layers.iter().flat_map(|l| {
        required_weights(l, &shapes[&l.inputs[0]])
            .into_iter()
            .map(move |(name, shape, range)| (l, name, shape, range))
    });
    match raw {
        Some(RawWeights::Random(spec)) => {
            let seed = parse_seed(&spec, "weights")?;
            for (idx, (_, name, shape, range)) in required.enumerate() {
                let n = shape.iter().product();
                let data = random_data(seed.wrapping_add((idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)), n, range);
                out.insert(name, WeightTensor { shape, data });
            }
        }
        Some(RawWeights::Explicit(map)) => {
            for (l, name, shape, range) in required {
                let w = map
                    .get(&name)
                    .ok_or_else(|| parse_err("weights", format!("missing weight tensor `{name}`")))?;
                if w.shape != shape {
                    return Err(shape_err(&l.name, format!("weight `{name}` has shape {:?}, expected {shape:?}", w.shape)));
                }
                let n: usize = shape.iter().product();
                let data = match &w.data {
                    RawWeightData::Values(v) => {
                        if v.len() != n {
                            return Err(shape_err(
                                &l.name,
                                format!("weight `{name}` has {} values for shape {shape:?}", v.len()),
                            ));
                        }
                        v.iter()
                            .map(|&x| {
                                i8::try_from(x)
                                    .map_err(|_| parse_err(format!("weights.{name}.data"), format!("value {x} is not int8")))
                            })
                            .collect::<Result<Vec<_>, _>>()?
                    }
                    RawWeightData::Random(s) => random_data(parse_seed(s, &format!("weights.{name}.data"))?, n, range),
                };
                out.insert(name, WeightTensor { shape, data });
            }
            if let Some(extra) = map.keys().find(|k| !out.contains_key(*k)) {
                return Err(parse_err("weights", format!("unknown weight tensor `{extra}`")));
            }
        }
        None => {
            if let Some((l, ..)) = required.into_iter().next() {
                return Err(parse_err("weights", format!("layer `{}` needs weights but none are given", l.name)));
            }
        }
    }
    Ok(out)
}

/// Lowers one layer to a [`GenericOp`].
///
/// Convolution dims are `(n, f, oh, ow, c, kh, kw)`; linear dims are
/// `(m, n, k)`; elementwise layers use the identity map over their output.
pub fn lower_layer(layer: &LayerSpec, input_shapes: &[Vec<usize>]) -> Result<GenericOp, ModelError> {
    use IteratorKind::*;
    let out_shape = output_shape(layer, input_shapes)?;
    let name = &layer.name;
    match &layer.kind {
        LayerKind::Conv2d {
            out_ch,
            in_ch,
            kernel_h,
            kernel_w,
            stride,
            dilation,
        } => {
            let (s, d) = (*stride as i64, *dilation as i64);
            // A kernel extent of one contributes no reduction term to the
            // access expression.
            let spatial = |out_dim, red_dim, k: usize| {
                if k > 1 {
                    AffineExpr::sum(out_dim, s, red_dim, d)
                } else {
                    AffineExpr::scaled(out_dim, s)
                }
            };
            let input_map = IndexingMap::new(
                7,
                vec![
                    AffineExpr::dim(0),
                    AffineExpr::dim(4),
                    spatial(2, 5, *kernel_h),
                    spatial(3, 6, *kernel_w),
                ],
            );
            let weight_map = IndexingMap::new(7, vec![AffineExpr::dim(1), AffineExpr::dim(4), AffineExpr::dim(5), AffineExpr::dim(6)]);
            Ok(GenericOp {
                op_id: name.clone(),
                inputs: vec![
                    Operand::new(layer.inputs[0].clone(), input_shapes[0].clone(), input_map),
                    Operand::new(layer.weight_name(), vec![*out_ch, *in_ch, *kernel_h, *kernel_w], weight_map),
                ],
                output: Operand::new(name.clone(), out_shape.clone(), IndexingMap::new(7, (0..4).map(AffineExpr::dim).collect())),
                iterator_kinds: vec![Parallel, Parallel, Parallel, Parallel, Reduction, Reduction, Reduction],
                trip_counts: vec![out_shape[0], *out_ch, out_shape[2], out_shape[3], *in_ch, *kernel_h, *kernel_w],
                payload: PayloadExpr::mac(),
            })
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => Ok(GenericOp {
            op_id: name.clone(),
            inputs: vec![
                Operand::new(
                    layer.inputs[0].clone(),
                    input_shapes[0].clone(),
                    IndexingMap::new(3, vec![AffineExpr::dim(0), AffineExpr::dim(2)]),
                ),
                Operand::new(
                    layer.weight_name(),
                    vec![*in_features, *out_features],
                    IndexingMap::new(3, vec![AffineExpr::dim(2), AffineExpr::dim(1)]),
                ),
            ],
            output: Operand::new(name.clone(), out_shape.clone(), IndexingMap::new(3, vec![AffineExpr::dim(0), AffineExpr::dim(1)])),
            iterator_kinds: vec![Parallel, Parallel, Reduction],
            trip_counts: vec![out_shape[0], *out_features, *in_features],
            payload: PayloadExpr::mac(),
        }),
        LayerKind::Relu => {
            let r = out_shape.len();
            Ok(GenericOp {
                op_id: name.clone(),
                inputs: vec![Operand::new(layer.inputs[0].clone(), out_shape.clone(), IndexingMap::identity(r))],
                output: Operand::new(name.clone(), out_shape.clone(), IndexingMap::identity(r)),
                iterator_kinds: vec![Parallel; r],
                trip_counts: out_shape.clone(),
                payload: PayloadExpr::max(PayloadExpr::input(0), PayloadExpr::Const(0)),
            })
        }
        LayerKind::ElementwiseAdd => {
            let r = out_shape.len();
            Ok(GenericOp {
                op_id: name.clone(),
                inputs: vec![
                    Operand::new(layer.inputs[0].clone(), out_shape.clone(), IndexingMap::identity(r)),
                    Operand::new(layer.inputs[1].clone(), out_shape.clone(), IndexingMap::identity(r)),
                ],
                output: Operand::new(name.clone(), out_shape.clone(), IndexingMap::identity(r)),
                iterator_kinds: vec![Parallel; r],
                trip_counts: out_shape.clone(),
                payload: PayloadExpr::clamp(PayloadExpr::add(PayloadExpr::input(0), PayloadExpr::input(1))),
            })
        }
        LayerKind::BiasAdd => {
            let r = out_shape.len();
            Ok(GenericOp {
                op_id: name.clone(),
                inputs: vec![
                    Operand::new(layer.inputs[0].clone(), out_shape.clone(), IndexingMap::identity(r)),
                    Operand::new(layer.bias_name(), vec![out_shape[1]], IndexingMap::new(r, vec![AffineExpr::dim(1)])),
                ],
                output: Operand::new(name.clone(), out_shape.clone(), IndexingMap::identity(r)),
                iterator_kinds: vec![Parallel; r],
                trip_counts: out_shape.clone(),
                payload: PayloadExpr::clamp(PayloadExpr::add(PayloadExpr::input(0), PayloadExpr::input(1))),
            })
        }
    }
}

/// Lowers every layer of the graph, in topological order.
pub fn lower_graph(graph: &LayerGraph) -> Result<Vec<GenericOp>, ModelError> {
    graph
        .layers
        .iter()
        .map(|l| {
            let shapes: Vec<Vec<usize>> = l.inputs.iter().map(|i| graph.shapes[i].clone()).collect();
            lower_layer(l, &shapes)
        })
        .collect()
}
