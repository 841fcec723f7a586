//! Dense reference execution and bounded-FIFO stream simulation.

mod reference;
mod stream;

pub use reference::{run_op_dense, run_reference};
pub use stream::{
    measure_first_output, run_stream, run_stream_with, BlockReason, BlockedChannel, ChannelTrace, Deadlock, NodeTrace,
    SimOptions, SimTrace,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affine_ir::IrError;

/// Range of randomly generated input activations (inclusive).
pub const INPUT_RANGE: (i32, i32) = (-8, 8);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("input shape {got:?} does not match the graph input {expected:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("tensor `{0}` is not available")]
    MissingTensor(String),
    #[error("graph is not finalized: {0}")]
    NotFinalized(String),
    #[error("node `{node}`: {source}")]
    Arithmetic {
        node: String,
        #[source]
        source: IrError,
    },
    #[error("no completion and no deadlock after {steps} steps")]
    Livelock { steps: u64 },
    #[error("node `{0}` produced no output")]
    NoOutput(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseTensor {
    pub shape: Vec<usize>,
    pub element_bits: u8,
    pub data: Vec<i32>,
}

impl DenseTensor {
    pub fn zeros(shape: &[usize], element_bits: u8) -> Self {
        DenseTensor {
            shape: shape.to_vec(),
            element_bits,
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn from_data(shape: &[usize], data: Vec<i32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "data length must match shape");
        DenseTensor {
            shape: shape.to_vec(),
            element_bits: 8,
            data,
        }
    }

    /// Seeded int8 tensor with values drawn from [`INPUT_RANGE`].
    pub fn random(shape: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(INPUT_RANGE.0..=INPUT_RANGE.1)).collect();
        DenseTensor::from_data(shape, data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}
