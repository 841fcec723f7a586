//! Dense layer-by-layer interpreter used as the functional oracle.

use std::collections::BTreeMap;

use super::{DenseTensor, SimError};
use crate::affine_ir::{clamp_i8, GenericOp, IndexingMap};
use crate::model_ingest::{lower_graph, LayerGraph};

/// Row-major offset of the element `map` selects at iteration point `iter`.
pub(crate) fn offset(map: &IndexingMap, shape: &[usize], iter: &[i64]) -> usize {
    let mut off = 0usize;
    for (e, &extent) in map.results.iter().zip(shape) {
        let v = e.constant + e.terms.iter().map(|t| t.coeff * iter[t.dim]).sum::<i64>();
        debug_assert!(v >= 0 && (v as usize) < extent, "access outside tensor");
        off = off * extent + v as usize;
    }
    off
}

/// Executes one op over its whole iteration space: an i32 accumulator per
/// output element starts at 0 and the final value is clamped to int8.
pub fn run_op_dense(op: &GenericOp, operands: &[&[i32]]) -> Result<Vec<i32>, SimError> {
    let mut acc = vec![0i32; op.output.shape.iter().product()];
    let trips: Vec<i64> = op.trip_counts.iter().map(|&t| t as i64).collect();
    let mut iter = vec![0i64; trips.len()];
    let mut vals = vec![0i32; op.inputs.len()];
    if trips.iter().all(|&t| t > 0) {
        'space: loop {
            for (k, o) in op.inputs.iter().enumerate() {
                vals[k] = operands[k][offset(&o.map, &o.shape, &iter)];
            }
            let out = offset(&op.output.map, &op.output.shape, &iter);
            acc[out] = op.payload.eval(&vals, acc[out]).map_err(|source| SimError::Arithmetic {
                node: op.op_id.clone(),
                source,
            })?;
            let mut d = trips.len();
            loop {
                if d == 0 {
                    break 'space;
                }
                d -= 1;
                iter[d] += 1;
                if iter[d] < trips[d] {
                    break;
                }
                iter[d] = 0;
            }
        }
    }
    Ok(acc.into_iter().map(clamp_i8).collect())
}

/// Runs every layer densely in topological order.
pub fn run_reference(graph: &LayerGraph, input: &DenseTensor) -> Result<DenseTensor, SimError> {
    if input.shape != graph.input.shape {
        return Err(SimError::Shape {
            expected: graph.input.shape.clone(),
            got: input.shape.clone(),
        });
    }
    let ops = lower_graph(graph).map_err(|e| SimError::MissingTensor(e.to_string()))?;
    let mut tensors: BTreeMap<String, Vec<i32>> = BTreeMap::new();
    tensors.insert(graph.input.name.clone(), input.data.clone());
    for (name, w) in &graph.weights {
        tensors.insert(name.clone(), w.data.iter().map(|&v| v as i32).collect());
    }
    for op in &ops {
        let operands = op
            .inputs
            .iter()
            .map(|o| {
                tensors
                    .get(&o.tensor)
                    .map(Vec::as_slice)
                    .ok_or_else(|| SimError::MissingTensor(o.tensor.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let out = run_op_dense(op, &operands)?;
        tensors.insert(op.output.tensor.clone(), out);
    }
    let data = tensors
        .remove(&graph.output.name)
        .ok_or_else(|| SimError::MissingTensor(graph.output.name.clone()))?;
    Ok(DenseTensor::from_data(&graph.output.shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ingest::parse_model_str;

    #[test]
    fn relu_of_negatives_is_zero() {
        let g = parse_model_str(
            r#"{"input": {"shape": [1, 2, 3, 3], "dtype": "i8"},
                "layers": [{"name": "r", "kind": "relu", "inputs": ["input"]}],
                "weights": "random:0"}"#,
        )
        .unwrap();
        let x = DenseTensor::from_data(&[1, 2, 3, 3], vec![-5; 18]);
        assert_eq!(run_reference(&g, &x).unwrap().data, vec![0; 18]);
    }

    #[test]
    fn identity_one_by_one_conv() {
        let g = parse_model_str(
            r#"{"input": {"shape": [1, 1, 4, 4], "dtype": "i8"},
                "layers": [{"name": "c", "kind": "conv2d",
                            "params": {"out_ch": 1, "in_ch": 1, "kernel_h": 1, "kernel_w": 1},
                            "inputs": ["input"]}],
                "weights": {"c.weight": {"shape": [1, 1, 1, 1], "data": [1]}}}"#,
        )
        .unwrap();
        let x = DenseTensor::from_data(&[1, 1, 4, 4], (0..16).map(|v| v * 9 - 60).collect());
        let y = run_reference(&g, &x).unwrap();
        assert_eq!(y.data, x.data.iter().map(|&v| clamp_i8(v)).collect::<Vec<_>>());
    }

    #[test]
    fn shape_mismatch() {
        let g = parse_model_str(
            r#"{"input": {"shape": [1, 2, 3, 3], "dtype": "i8"},
                "layers": [{"name": "r", "kind": "relu", "inputs": ["input"]}],
                "weights": "random:0"}"#,
        )
        .unwrap();
        let x = DenseTensor::zeros(&[1, 2, 3, 4], 8);
        assert!(matches!(run_reference(&g, &x), Err(SimError::Shape { .. })));
    }
}
