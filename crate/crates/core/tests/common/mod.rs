//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use dataflow_hls::affine_ir::{AffineExpr, GenericOp, IndexingMap, IteratorKind, Operand, PayloadExpr, PayloadOps};
use dataflow_hls::dse::{ChannelLanes, DseNode, DseProblem, LaneRef, Objective};
use dataflow_hls::model_ingest::{lower_graph, parse_model, LayerGraph};
use dataflow_hls::resource_model::{CostTable, Loop, LoopNest, ResourceBudget, Warmup};
use dataflow_hls::stream_arch::{build_stream_graph, Buffer, BufferKind, StreamGraph};
use rand::seq::SliceRandom;
use rand::Rng;

/// The five benchmark kernels at desk scale.
pub const BENCHMARKS: [&str; 5] = [
    "conv_relu_32",
    "cascade_conv_32",
    "residual_32",
    "linear_64x16",
    "feed_forward_64x16",
];

pub fn model_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../models")
        .join(format!("{name}.json"))
}

pub fn load(name: &str) -> (LayerGraph, StreamGraph) {
    let layers = parse_model(model_path(name)).unwrap();
    let ops = lower_graph(&layers).unwrap();
    let graph = build_stream_graph(&ops, &layers).unwrap();
    (layers, graph)
}

fn clamp(v: i64) -> i32 {
    v.clamp(-128, 127) as i32
}

/// Direct NCHW convolution with valid padding, i64 accumulation and a
/// final clamp to int8.
pub fn conv2d_nchw(x: &[i32], xs: [usize; 4], w: &[i32], ws: [usize; 4], stride: usize, dilation: usize) -> Vec<i32> {
    let [n, c, h, wd] = xs;
    let [f, wc, kh, kw] = ws;
    assert_eq!(c, wc);
    let oh = (h - dilation * (kh - 1) - 1) / stride + 1;
    let ow = (wd - dilation * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0; n * f * oh * ow];
    for b in 0..n {
        for o in 0..f {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0i64;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = y * stride + i * dilation;
                                let ix = xo * stride + j * dilation;
                                let xv = x[((b * c + ci) * h + iy) * wd + ix] as i64;
                                let wv = w[((o * c + ci) * kh + i) * kw + j] as i64;
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * f + o) * oh + y) * ow + xo] = clamp(acc);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Sliding-window oracle

/// Window axes found by probing every input access function numerically:
/// an access axis is a window axis when its index is zero at the origin
/// and moves with exactly one parallel and one reduction iterator, each
/// with a positive step. Returns `(stride, dilation)` per axis in operand
/// and axis order.
pub fn sliding_window_oracle(op: &GenericOp) -> Vec<(i64, i64)> {
    let n = op.num_dims();
    let origin = vec![0i64; n];
    let mut axes = Vec::new();
    if op.iterator_kinds.iter().all(|k| *k == IteratorKind::Parallel) {
        return axes;
    }
    for input in &op.inputs {
        let at_origin = input.map.eval(&origin).unwrap();
        for axis in 0..input.map.results.len() {
            let mut moving = Vec::new();
            for d in 0..n {
                assert!(op.trip_counts[d] >= 2, "oracle needs two points per iterator");
                let mut probe = origin.clone();
                probe[d] = 1;
                let step = input.map.eval(&probe).unwrap()[axis] - at_origin[axis];
                // The access must be affine in `d` over the whole trip.
                for t in 0..op.trip_counts[d] as i64 {
                    probe[d] = t;
                    assert_eq!(input.map.eval(&probe).unwrap()[axis] - at_origin[axis], step * t);
                }
                if step != 0 {
                    moving.push((d, step));
                }
            }
            if at_origin[axis] != 0 || moving.len() != 2 {
                continue;
            }
            let (p, r): (Vec<(usize, i64)>, Vec<(usize, i64)>) = moving.iter().partition(|(d, _)| op.iterator_kinds[*d] == IteratorKind::Parallel);
            if p.len() == 1 && r.len() == 1 && p[0].1 > 0 && r[0].1 > 0 {
                axes.push((p[0].1, r[0].1));
            }
        }
    }
    axes
}

fn random_expr(rng: &mut impl Rng, dims: usize) -> AffineExpr {
    let a = rng.gen_range(0..dims);
    let expr = match rng.gen_range(0..4) {
        0 => AffineExpr::dim(a),
        1 => AffineExpr::scaled(a, rng.gen_range(1..=3)),
        _ => {
            let b = rng.gen_range(0..dims);
            AffineExpr::sum(a, rng.gen_range(1..=3), b, rng.gen_range(1..=3))
        }
    };
    if rng.gen_bool(0.15) {
        expr.with_constant(rng.gen_range(1..=2))
    } else {
        expr
    }
}

/// A random op with at most four iterators, trips in 2..=6 and one or two
/// inputs whose access expressions have at most two terms.
pub fn random_op(rng: &mut impl Rng) -> GenericOp {
    let dims = rng.gen_range(1..=4);
    let kinds: Vec<IteratorKind> = (0..dims)
        .map(|_| {
            if rng.gen_bool(0.5) {
                IteratorKind::Parallel
            } else {
                IteratorKind::Reduction
            }
        })
        .collect();
    let trips: Vec<usize> = (0..dims).map(|_| rng.gen_range(2..=6)).collect();
    let inputs = (0..rng.gen_range(1..=2))
        .map(|i| {
            let results: Vec<AffineExpr> = (0..rng.gen_range(1..=3)).map(|_| random_expr(rng, dims)).collect();
            let shape = results.iter().map(|e| e.max_value(&trips) as usize + 1).collect();
            Operand::new(format!("in{i}"), shape, IndexingMap::new(dims, results))
        })
        .collect();
    let par: Vec<usize> = (0..dims).filter(|&d| kinds[d] == IteratorKind::Parallel).collect();
    let output = Operand::new(
        "out",
        par.iter().map(|&d| trips[d]).collect(),
        IndexingMap::new(dims, par.iter().map(|&d| AffineExpr::dim(d)).collect()),
    );
    GenericOp {
        op_id: "rand".into(),
        inputs,
        output,
        iterator_kinds: kinds,
        trip_counts: trips,
        payload: PayloadExpr::mac(),
    }
}

// ---------------------------------------------------------------------------
// DSE oracle

const TRIPS: [usize; 4] = [4, 6, 8, 12];

fn random_node(rng: &mut impl Rng, idx: usize) -> DseNode {
    let len = rng.gen_range(1..=3);
    let min_pipeline = rng.gen_range(0..len);
    let streams = if rng.gen_bool(0.5) { min_pipeline + 1 } else { 0 };
    let loops: Vec<Loop> = (0..len)
        .map(|l| Loop {
            name: format!("l{l}"),
            dim: l,
            trip: *TRIPS.choose(rng).unwrap(),
            kind: if rng.gen_bool(0.7) {
                IteratorKind::Parallel
            } else {
                IteratorKind::Reduction
            },
            stream: l < streams,
        })
        .collect();
    let buffers = if rng.gen_bool(0.5) {
        let l = rng.gen_range(0..len);
        vec![Buffer {
            name: format!("n{idx}_buf"),
            kind: BufferKind::DataLine,
            shape: vec![loops[l].trip * 256],
            element_bits: 8,
            partition_loop: Some(l),
        }]
    } else {
        Vec::new()
    };
    DseNode {
        name: format!("n{idx}"),
        nest: LoopNest::new(loops, min_pipeline),
        ops: PayloadOps {
            mul: rng.gen_range(0..=2),
            add: rng.gen_range(0..=1),
            max: 0,
            clamp: 0,
        },
        buffers,
        warmup: Warmup {
            pixels: rng.gen_range(0..=4),
            lane_loop: Some(len - 1),
        },
    }
}

/// A random problem with at most two nodes of at most three loops each.
pub fn random_problem(rng: &mut impl Rng) -> DseProblem {
    let count = rng.gen_range(1..=2);
    let nodes: Vec<DseNode> = (0..count).map(|i| random_node(rng, i)).collect();
    let mut couplings = Vec::new();
    let mut channels = Vec::new();
    if count == 2 {
        let pairs: Vec<(usize, usize)> = (0..nodes[0].nest.len())
            .flat_map(|a| (0..nodes[1].nest.len()).map(move |b| (a, b)))
            .filter(|&(a, b)| {
                let (la, lb) = (&nodes[0].nest.loops[a], &nodes[1].nest.loops[b]);
                la.trip == lb.trip && !la.stream && !lb.stream
            })
            .collect();
        if let Some(&(a, b)) = pairs.choose(rng) {
            let (ra, rb) = (LaneRef { node: 0, lane_loop: a }, LaneRef { node: 1, lane_loop: b });
            couplings.push((ra, rb));
            channels.push(ChannelLanes {
                name: "n0_n1".into(),
                lanes: vec![ra, rb],
            });
        }
    }
    DseProblem {
        nodes,
        couplings,
        channels,
        budget: ResourceBudget {
            dsp: rng.gen_range(0..=96),
            bram: rng.gen_range(0..=12),
        },
        costs: CostTable::default(),
        objective: if rng.gen_bool(0.75) { Objective::Sum } else { Objective::Max },
    }
}

fn legal_configs(node: &DseNode) -> Vec<(Vec<usize>, Option<usize>)> {
    let nest = &node.nest;
    let mut out = Vec::new();
    let pipelines: Vec<Option<usize>> = std::iter::once(None).chain((nest.min_pipeline..nest.len()).map(Some)).collect();
    let mut vectors: Vec<Vec<usize>> = vec![Vec::new()];
    for lp in &nest.loops {
        vectors = vectors
            .into_iter()
            .flat_map(|v| {
                (1..=lp.trip).filter(move |u| lp.trip % u == 0).map(move |u| {
                    let mut w = v.clone();
                    w.push(u);
                    w
                })
            })
            .collect();
    }
    for p in pipelines {
        for u in &vectors {
            let ok = nest.loops.iter().enumerate().all(|(l, lp)| {
                let inside = p.is_some_and(|p| l > p);
                !(lp.stream && u[l] != 1) && !(inside && u[l] != lp.trip)
            });
            if ok {
                out.push((u.clone(), p));
            }
        }
    }
    out
}

/// Best objective over every legal assignment within the budget, by
/// brute-force enumeration.
pub fn exhaustive_best(problem: &DseProblem) -> Option<u64> {
    let per_node: Vec<Vec<_>> = problem
        .nodes
        .iter()
        .map(|n| {
            legal_configs(n)
                .into_iter()
                .map(|(u, p)| {
                    let est = n.estimate(&n.configured(&u, p), &problem.costs);
                    (u, est)
                })
                .collect()
        })
        .collect();
    let mut best: Option<u64> = None;
    let mut idx = vec![0usize; per_node.len()];
    loop {
        let pick: Vec<_> = idx.iter().enumerate().map(|(n, &i)| &per_node[n][i]).collect();
        let coupled = problem
            .couplings
            .iter()
            .all(|(a, b)| pick[a.node].0[a.lane_loop] == pick[b.node].0[b.lane_loop]);
        let dsp: u64 = pick.iter().map(|c| c.1.dsp).sum();
        let bram: u64 = pick.iter().map(|c| c.1.bram).sum();
        if coupled && dsp <= problem.budget.dsp && bram <= problem.budget.bram {
            let cycles = match problem.objective {
                Objective::Sum => pick.iter().map(|c| c.1.cycles).sum(),
                Objective::Max => pick.iter().map(|c| c.1.cycles).max().unwrap_or(0),
            };
            best = Some(best.map_or(cycles, |b| b.min(cycles)));
        }
        let mut k = idx.len();
        loop {
            if k == 0 {
                return best;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < per_node[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
}
