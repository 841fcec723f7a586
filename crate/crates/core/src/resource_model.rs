//! Cycle, DSP and BRAM18K estimates for a node's loop nest.
//!
//! A nest is an ordered list of loops with an unroll factor per loop and an
//! optional pipeline level. Loops strictly inside the pipelined loop are
//! fully unrolled. The pipelined region costs `D_fill + II·(T_eff − 1)`
//! cycles and is repeated once per iteration of the enclosing loops.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affine_ir::{DimId, IteratorKind, PayloadOps};

/// Capacity of one BRAM18K block.
pub const BRAM18K_BITS: u64 = 18_432;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResourceError {
    #[error("DSP efficiency undefined: {0} must be positive")]
    ZeroDivisor(&'static str),
    #[error("invalid cost table: {0}")]
    InvalidCostTable(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Loop {
    pub name: String,
    pub dim: DimId,
    pub trip: usize,
    pub kind: IteratorKind,
    /// Loops that walk the stream order itself; these are never unrolled.
    pub stream: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopNest {
    pub loops: Vec<Loop>,
    pub unroll: Vec<usize>,
    pub pipeline: Option<usize>,
    /// Outermost level that may carry the PIPELINE pragma.
    pub min_pipeline: usize,
}

impl LoopNest {
    pub fn new(loops: Vec<Loop>, min_pipeline: usize) -> Self {
        let unroll = vec![1; loops.len()];
        LoopNest {
            loops,
            unroll,
            pipeline: None,
            min_pipeline,
        }
    }

    pub fn len(&self) -> usize {
        self.loops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }

    pub fn trips(&self) -> Vec<usize> {
        self.loops.iter().map(|l| l.trip).collect()
    }

    pub fn position(&self, dim: DimId) -> Option<usize> {
        self.loops.iter().position(|l| l.dim == dim)
    }

    /// `None` followed by every legal pipeline level.
    pub fn pipeline_options(&self) -> Vec<Option<usize>> {
        std::iter::once(None)
            .chain((self.min_pipeline..self.loops.len()).map(Some))
            .collect()
    }

    /// True for loops strictly inside the pipelined loop.
    pub fn is_inside_pipeline(&self, l: usize) -> bool {
        self.pipeline.is_some_and(|p| l > p)
    }

    /// Unroll factor with loops under the pipeline counted as fully unrolled.
    pub fn effective_unroll(&self, l: usize) -> usize {
        if self.is_inside_pipeline(l) {
            self.loops[l].trip
        } else {
            self.unroll[l]
        }
    }

    /// Iterations of each loop after unrolling.
    pub fn blocked_trips(&self) -> Vec<usize> {
        (0..self.loops.len())
            .map(|l| self.loops[l].trip / self.effective_unroll(l).max(1))
            .collect()
    }

    /// Sets the pipeline level and forces the loops inside it to full unroll.
    pub fn set_pipeline(&mut self, level: Option<usize>) {
        self.pipeline = level;
        for l in 0..self.loops.len() {
            if self.is_inside_pipeline(l) {
                self.unroll[l] = self.loops[l].trip;
            }
        }
    }

    /// All factors 1, pipeline on the innermost loop.
    pub fn baseline(&self) -> LoopNest {
        let mut nest = self.clone();
        nest.unroll = vec![1; nest.loops.len()];
        nest.pipeline = nest.loops.len().checked_sub(1);
        nest
    }

    /// Nest invariant violations, as human-readable strings.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.unroll.len() != self.loops.len() {
            out.push(format!(
                "{} unroll factors for {} loops",
                self.unroll.len(),
                self.loops.len()
            ));
            return out;
        }
        for (l, (lp, &u)) in self.loops.iter().zip(&self.unroll).enumerate() {
            if u == 0 || lp.trip % u != 0 {
                out.push(format!("loop {}: u = {u} does not divide trip {}", lp.name, lp.trip));
            } else if self.is_inside_pipeline(l) && u != lp.trip {
                out.push(format!("loop {}: inside the pipeline but u = {u} < trip {}", lp.name, lp.trip));
            } else if lp.stream && u != 1 {
                out.push(format!("loop {}: stream loop cannot be unrolled (u = {u})", lp.name));
            }
        }
        if let Some(p) = self.pipeline {
            if p < self.min_pipeline || p >= self.loops.len() {
                out.push(format!(
                    "pipeline level {p} outside {}..{}",
                    self.min_pipeline,
                    self.loops.len()
                ));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTable {
    pub mul: u64,
    pub add: u64,
    pub max: u64,
    pub clamp: u64,
    /// Pipeline fill depth `D_fill`.
    pub pipeline_depth: u64,
    pub ii: u64,
}

impl Default for CostTable {
    fn default() -> Self {
        CostTable {
            mul: 1,
            add: 0,
            max: 0,
            clamp: 0,
            pipeline_depth: 4,
            ii: 1,
        }
    }
}

impl CostTable {
    pub fn validate(&self) -> Result<(), ResourceError> {
        if self.pipeline_depth == 0 {
            return Err(ResourceError::InvalidCostTable("pipeline_depth must be at least 1".into()));
        }
        if self.ii == 0 {
            return Err(ResourceError::InvalidCostTable("ii must be at least 1".into()));
        }
        Ok(())
    }

    /// DSP cost of one execution of a payload.
    pub fn dsp_per_iteration(&self, ops: PayloadOps) -> u64 {
        ops.mul * self.mul + ops.add * self.add + ops.max * self.max + ops.clamp * self.clamp
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceBudget {
    pub dsp: u64,
    pub bram: u64,
}

impl Default for ResourceBudget {
    fn default() -> Self {
        ResourceBudget { dsp: 1248, bram: 288 }
    }
}

/// Tokens a node must ingest before it can produce its first output:
/// `pixels` positions of the input stream, each `trip / u` beats wide on the
/// input lane loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warmup {
    pub pixels: u64,
    pub lane_loop: Option<usize>,
}

impl Warmup {
    pub fn beats(&self, nest: &LoopNest) -> u64 {
        let per_pixel = self
            .lane_loop
            .map(|l| nest.blocked_trips()[l] as u64)
            .unwrap_or(1);
        self.pixels * per_pixel
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleEstimate {
    pub total: u64,
    pub first_output: u64,
}

pub fn estimate_cycles(nest: &LoopNest, warmup: &Warmup, costs: &CostTable) -> CycleEstimate {
    let blocked = nest.blocked_trips();
    let d = costs.pipeline_depth;
    let total = match nest.pipeline {
        Some(p) => {
            let outer: u64 = blocked[..p].iter().map(|&t| t as u64).product();
            let t_eff: u64 = blocked[p..].iter().map(|&t| t as u64).product();
            outer * (d + costs.ii * (t_eff - 1))
        }
        None => blocked.iter().map(|&t| t as u64).product::<u64>() * d,
    };
    CycleEstimate {
        total,
        first_output: warmup.beats(nest) + d,
    }
}

pub fn estimate_dsp(nest: &LoopNest, ops: PayloadOps, costs: &CostTable) -> u64 {
    let replication: u64 = (0..nest.len()).map(|l| nest.effective_unroll(l) as u64).product();
    costs.dsp_per_iteration(ops) * replication
}

/// BRAM18K blocks for one buffer split into `partitions` banks.
pub fn bram_blocks(bits: u64, partitions: u64) -> u64 {
    if bits == 0 {
        return 0;
    }
    let p = partitions.max(1);
    p * bits.div_ceil(p).div_ceil(BRAM18K_BITS)
}

/// Total blocks over `(bits, partitions)` pairs.
pub fn estimate_bram(buffers: &[(u64, u64)]) -> u64 {
    buffers.iter().map(|&(bits, p)| bram_blocks(bits, p)).sum()
}

/// `speedup / (dsp_compare / dsp_baseline)`, rounded to two decimals.
pub fn dsp_efficiency(speedup: f64, dsp_compare: f64, dsp_baseline: f64) -> Result<f64, ResourceError> {
    if dsp_baseline <= 0.0 {
        return Err(ResourceError::ZeroDivisor("dsp_baseline"));
    }
    if dsp_compare <= 0.0 {
        return Err(ResourceError::ZeroDivisor("dsp_compare"));
    }
    let v = speedup / (dsp_compare / dsp_baseline);
    Ok((v * 100.0).round() / 100.0)
}
