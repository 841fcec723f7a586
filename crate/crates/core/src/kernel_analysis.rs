//! Kernel classification from indexing maps.
//!
//! An op is a sliding window when some input access expression combines
//! exactly one parallel and one reduction iterator, `s·i_p + δ·i_r`; the
//! parallel coefficient is the stride and the reduction coefficient is the
//! dilation. Ops with reductions but no such access are regular reductions;
//! everything else is pure parallel. Runtime is linear in the number of map
//! results inspected.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affine_ir::{AffineExpr, DimId, GenericOp, IteratorKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("op `{op}`: composite expression `{expr}` in output map is unsupported")]
    CompositeOutput { op: String, expr: String },
    #[error("op `{op}`: window expression `{expr}` has no parallel term in the window set")]
    WindowAxis { op: String, expr: String },
    #[error("op `{op}` is not a sliding-window kernel")]
    NotSlidingWindow { op: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowAxis {
    pub stride: i64,
    pub dilation: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum KernelClass {
    PureParallel,
    RegularReduction,
    SlidingWindow { axes: Vec<WindowAxis> },
}

impl KernelClass {
    pub fn name(&self) -> &'static str {
        match self {
            KernelClass::PureParallel => "pure_parallel",
            KernelClass::RegularReduction => "regular_reduction",
            KernelClass::SlidingWindow { .. } => "sliding_window",
        }
    }

    pub fn is_sliding_window(&self) -> bool {
        matches!(self, KernelClass::SlidingWindow { .. })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlidingWindowMatch {
    pub is_sliding: bool,
    pub axes: Vec<WindowAxis>,
}

/// Parallel, reduction, original-input and window sets of an op.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IteratorSets {
    pub parallel: BTreeSet<DimId>,
    pub reduction: BTreeSet<DimId>,
    pub original: Vec<AffineExpr>,
    pub window: BTreeSet<DimId>,
}

/// Splits a two-term expression into `(parallel term, reduction term)` when
/// it has exactly one of each.
fn parallel_reduction_pair(op: &GenericOp, e: &AffineExpr) -> Option<((DimId, i64), (DimId, i64))> {
    if e.constant != 0 {
        return None;
    }
    let [a, b] = e.terms.as_slice() else {
        return None;
    };
    if a.coeff < 1 || b.coeff < 1 {
        return None;
    }
    match (op.iterator_kinds.get(a.dim)?, op.iterator_kinds.get(b.dim)?) {
        (IteratorKind::Parallel, IteratorKind::Reduction) => Some(((a.dim, a.coeff), (b.dim, b.coeff))),
        (IteratorKind::Reduction, IteratorKind::Parallel) => Some(((b.dim, b.coeff), (a.dim, a.coeff))),
        _ => None,
    }
}

/// Sliding-window detection returning the number of map results inspected.
pub fn detect_sliding_window_counted(op: &GenericOp) -> (SlidingWindowMatch, usize) {
    let mut visits = 0;
    if op.iterator_kinds.iter().all(|k| *k == IteratorKind::Parallel) {
        return (SlidingWindowMatch::default(), visits);
    }
    let mut axes = Vec::new();
    for input in &op.inputs {
        for e in &input.map.results {
            visits += 1;
            if let Some(((_, stride), (_, dilation))) = parallel_reduction_pair(op, e) {
                axes.push(WindowAxis { stride, dilation });
            }
        }
    }
    (
        SlidingWindowMatch {
            is_sliding: !axes.is_empty(),
            axes,
        },
        visits,
    )
}

/// Collects every `(stride, dilation)` window axis of the op's inputs.
pub fn detect_sliding_window(op: &GenericOp) -> SlidingWindowMatch {
    detect_sliding_window_counted(op).0
}

pub fn classify_kernel(op: &GenericOp) -> KernelClass {
    let m = detect_sliding_window(op);
    if m.is_sliding {
        KernelClass::SlidingWindow { axes: m.axes }
    } else if op.has_reduction() {
        KernelClass::RegularReduction
    } else {
        KernelClass::PureParallel
    }
}

/// Builds the parallel / reduction / original / window dimension sets.
///
/// Dimensions that appear in no input map at all are broadcast lanes and
/// land in the parallel set.
pub fn classify_iterators(op: &GenericOp) -> Result<IteratorSets, AnalysisError> {
    let mut sets = IteratorSets::default();
    let mut input_dims = BTreeSet::new();
    for input in &op.inputs {
        for e in &input.map.results {
            input_dims.extend(e.dims());
            if let Some(d) = e.single_dim() {
                if op.is_parallel(d) {
                    sets.parallel.insert(d);
                } else {
                    sets.reduction.insert(d);
                }
            } else if e.terms.len() >= 2 && !sets.original.contains(e) {
                sets.original.push(e.clone());
            }
        }
    }
    for e in &op.output.map.results {
        if e.terms.len() > 1 {
            return Err(AnalysisError::CompositeOutput {
                op: op.op_id.clone(),
                expr: e.to_string(),
            });
        }
        if let Some(d) = e.single_dim() {
            if !input_dims.contains(&d) {
                sets.parallel.insert(d);
            } else if op.is_parallel(d) && !sets.parallel.contains(&d) {
                sets.window.insert(d);
            }
        }
    }
    Ok(sets)
}

/// Window size along each sliding axis: `(output dim, trip of the
/// reduction dim in the same expression)`.
pub fn window_extents(op: &GenericOp, sets: &IteratorSets) -> Result<Vec<(DimId, usize)>, AnalysisError> {
    sets.original
        .iter()
        .map(|e| {
            let err = || AnalysisError::WindowAxis {
                op: op.op_id.clone(),
                expr: e.to_string(),
            };
            let ((p, _), (r, _)) = parallel_reduction_pair(op, e).ok_or_else(err)?;
            if !sets.window.contains(&p) {
                return Err(err());
            }
            Ok((p, op.trip_counts[r]))
        })
        .collect()
}

/// Complete analysis of one op, as reported by the `analyze` subcommand.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpAnalysis {
    pub op_id: String,
    pub class: KernelClass,
    pub stride: Vec<i64>,
    pub dilation: Vec<i64>,
    #[serde(rename = "P")]
    pub parallel: Vec<DimId>,
    #[serde(rename = "R")]
    pub reduction: Vec<DimId>,
    #[serde(rename = "O")]
    pub original: Vec<String>,
    #[serde(rename = "W")]
    pub window: Vec<DimId>,
    pub window_extents: Vec<(DimId, usize)>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub sets: IteratorSets,
}

pub fn analyze_op(op: &GenericOp) -> Result<OpAnalysis, AnalysisError> {
    let class = classify_kernel(op);
    let sets = classify_iterators(op)?;
    let mut warnings = Vec::new();
    for input in &op.inputs {
        for e in &input.map.results {
            if e.terms.len() == 2 && parallel_reduction_pair(op, e).is_none() {
                warnings.push(format!(
                    "expression `{e}` of `{}` combines two iterators of the same kind; not a window axis",
                    input.tensor
                ));
            }
        }
    }
    let extents = if class.is_sliding_window() {
        window_extents(op, &sets)?
    } else {
        Vec::new()
    };
    let (stride, dilation) = match &class {
        KernelClass::SlidingWindow { axes } => (
            axes.iter().map(|a| a.stride).collect(),
            axes.iter().map(|a| a.dilation).collect(),
        ),
        _ => (Vec::new(), Vec::new()),
    };
    Ok(OpAnalysis {
        op_id: op.op_id.clone(),
        class,
        stride,
        dilation,
        parallel: sets.parallel.iter().copied().collect(),
        reduction: sets.reduction.iter().copied().collect(),
        original: sets.original.iter().map(|e| e.to_string()).collect(),
        window: sets.window.iter().copied().collect(),
        window_extents: extents,
        warnings,
        sets,
    })
}
