//! Design-space exploration over unroll factors, pipeline placement and
//! stream widths.
//!
//! Each node picks a pipeline level (or none) and an unroll factor per loop
//! dividing its trip count. Stream-coupled lane loops share one variable, so
//! a channel always has the same width at both ends. The search is an exact
//! depth-first branch and bound over nodes: a branch is cut when the partial
//! resource use plus the cheapest completion exceeds the budget, or when the
//! partial cost plus the cheapest completion is already worse than the
//! incumbent.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affine_ir::PayloadOps;
use crate::resource_model::{estimate_cycles, estimate_dsp, CostTable, LoopNest, ResourceBudget, Warmup};
use crate::stream_arch::{size_fifo_depths, Buffer, NodeKind, StreamError, StreamGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Constraint {
    #[serde(rename = "Unroll Constr")]
    Unroll,
    #[serde(rename = "DSP Constr")]
    Dsp,
    #[serde(rename = "BRAM Constr")]
    Bram,
    #[serde(rename = "Stream Constr")]
    Stream,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Constraint::Unroll => "Unroll Constr",
            Constraint::Dsp => "DSP Constr",
            Constraint::Bram => "BRAM Constr",
            Constraint::Stream => "Stream Constr",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DseError {
    #[error("infeasible: {constraint}: needs at least {required}, budget is {budget}")]
    Infeasible {
        constraint: Constraint,
        required: u64,
        budget: u64,
    },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("solution violates {0:?}")]
    Rejected(Vec<Violation>),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Sum of node latencies.
    #[default]
    Sum,
    /// Latency of the slowest node.
    Max,
}

/// One lane loop of one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LaneRef {
    pub node: usize,
    pub lane_loop: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DseNode {
    pub name: String,
    pub nest: LoopNest,
    pub ops: PayloadOps,
    pub buffers: Vec<Buffer>,
    pub warmup: Warmup,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLanes {
    pub name: String,
    pub lanes: Vec<LaneRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DseProblem {
    pub nodes: Vec<DseNode>,
    pub couplings: Vec<(LaneRef, LaneRef)>,
    pub channels: Vec<ChannelLanes>,
    pub budget: ResourceBudget,
    pub costs: CostTable,
    pub objective: Objective,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeEstimate {
    pub cycles: u64,
    pub first_output: u64,
    pub dsp: u64,
    pub bram: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeChoice {
    pub name: String,
    pub unroll: Vec<usize>,
    pub pipeline: Option<usize>,
    pub estimate: NodeEstimate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelChoice {
    pub name: String,
    pub width: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DseSolution {
    pub nodes: Vec<NodeChoice>,
    pub channels: Vec<ChannelChoice>,
    pub cycles: u64,
    pub dsp: u64,
    pub bram: u64,
    pub optimal: bool,
}

impl DseSolution {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solution serializes")
    }

    pub fn unroll_vector(&self) -> Vec<usize> {
        self.nodes.iter().flat_map(|n| n.unroll.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub target: String,
    /// Amount by which the constraint is exceeded.
    pub slack: i64,
    pub message: String,
}

/// All positive divisors of `n`, ascending.
pub fn divisors(n: usize) -> Vec<usize> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n.is_multiple_of(d) {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

impl DseNode {
    pub fn configured(&self, unroll: &[usize], pipeline: Option<usize>) -> LoopNest {
        let mut nest = self.nest.clone();
        nest.unroll = unroll.to_vec();
        nest.pipeline = pipeline;
        nest
    }

    pub fn estimate(&self, nest: &LoopNest, costs: &CostTable) -> NodeEstimate {
        let c = estimate_cycles(nest, &self.warmup, costs);
        NodeEstimate {
            cycles: c.total,
            first_output: c.first_output,
            dsp: estimate_dsp(nest, self.ops, costs),
            bram: self.buffers.iter().map(|b| b.bram(nest)).sum(),
        }
    }
}

impl DseProblem {
    pub fn validate(&self) -> Result<(), DseError> {
        let check = |r: &LaneRef| -> Result<(), DseError> {
            let ok = self.nodes.get(r.node).is_some_and(|n| r.lane_loop < n.nest.len());
            if ok {
                Ok(())
            } else {
                Err(DseError::InvalidProblem(format!(
                    "coupling references missing loop {} of node {}",
                    r.lane_loop, r.node
                )))
            }
        };
        for (a, b) in &self.couplings {
            check(a)?;
            check(b)?;
        }
        for c in &self.channels {
            c.lanes.iter().try_for_each(check)?;
        }
        for n in &self.nodes {
            if n.nest.loops.iter().any(|l| l.trip == 0) {
                return Err(DseError::InvalidProblem(format!("node {} has a zero trip count", n.name)));
            }
        }
        self.costs
            .validate()
            .map_err(|e| DseError::InvalidProblem(e.to_string()))
    }

    fn combine(&self, acc: u64, v: u64) -> u64 {
        match self.objective {
            Objective::Sum => acc + v,
            Objective::Max => acc.max(v),
        }
    }

    /// Builds a solution from explicit per-node choices, filling estimates
    /// and channel widths. Depths stay at 2 until [`finalize`].
    pub fn solution(&self, choices: &[(Vec<usize>, Option<usize>)], optimal: bool) -> DseSolution {
        let nodes: Vec<NodeChoice> = self
            .nodes
            .iter()
            .zip(choices)
            .map(|(n, (u, p))| NodeChoice {
                name: n.name.clone(),
                unroll: u.clone(),
                pipeline: *p,
                estimate: n.estimate(&n.configured(u, *p), &self.costs),
            })
            .collect();
        let channels = self
            .channels
            .iter()
            .map(|c| ChannelChoice {
                name: c.name.clone(),
                width: c
                    .lanes
                    .first()
                    .map(|r| nodes[r.node].unroll[r.lane_loop])
                    .unwrap_or(1),
                depth: 2,
            })
            .collect();
        let cycles = nodes.iter().fold(0, |acc, n| self.combine(acc, n.estimate.cycles));
        DseSolution {
            cycles,
            dsp: nodes.iter().map(|n| n.estimate.dsp).sum(),
            bram: nodes.iter().map(|n| n.estimate.bram).sum(),
            nodes,
            channels,
            optimal,
        }
    }
}

/// The unoptimized design: every factor 1, pipeline on each innermost loop.
pub fn baseline_solution(problem: &DseProblem) -> DseSolution {
    let choices: Vec<_> = problem
        .nodes
        .iter()
        .map(|n| {
            let b = n.nest.baseline();
            (b.unroll, b.pipeline)
        })
        .collect();
    problem.solution(&choices, false)
}

// ---------------------------------------------------------------------------
// Graph to problem

/// Extracts the optimization problem of a stream graph's compute nodes.
///
/// Broadcast, source and sink nodes pass lanes through unchanged, so every
/// lane loop reachable through them shares one width.
pub fn problem_from_graph(
    graph: &StreamGraph,
    budget: ResourceBudget,
    costs: CostTable,
    objective: Objective,
) -> DseProblem {
    let index: BTreeMap<usize, usize> = graph
        .compute_nodes()
        .enumerate()
        .map(|(i, n)| (n.id, i))
        .collect();
    let nodes = graph
        .compute_nodes()
        .map(|n| {
            let mut nest = n.nest.clone().expect("compute nodes have a nest");
            nest.unroll = vec![1; nest.len()];
            nest.pipeline = None;
            DseNode {
                name: n.name.clone(),
                nest,
                ops: n.op.as_ref().map(|o| o.payload.op_counts()).unwrap_or_default(),
                buffers: n.buffers.clone(),
                warmup: n.warmup,
            }
        })
        .collect();

    // Channels joined through broadcasts form one width group.
    let mut group: Vec<usize> = (0..graph.channels.len()).collect();
    fn find(g: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while g[r] != r {
            r = g[r];
        }
        let mut y = x;
        while g[y] != r {
            let next = g[y];
            g[y] = r;
            y = next;
        }
        r
    }
    for n in graph.nodes.iter().filter(|n| n.kind == NodeKind::Broadcast) {
        for &o in &n.outputs {
            let (a, b) = (find(&mut group, n.inputs[0]), find(&mut group, o));
            group[a.max(b)] = a.min(b);
        }
    }
    let mut lanes_of_group: BTreeMap<usize, Vec<LaneRef>> = BTreeMap::new();
    for ch in &graph.channels {
        let g = find(&mut group, ch.id);
        let entry = lanes_of_group.entry(g).or_default();
        let p = &graph.nodes[ch.producer.node];
        if let (Some(&i), Some(l)) = (index.get(&p.id), p.out_lane) {
            entry.push(LaneRef { node: i, lane_loop: l });
        }
        let c = &graph.nodes[ch.consumer.node];
        if let (Some(&i), Some(Some(l))) = (index.get(&c.id), c.in_lanes.get(ch.consumer.port)) {
            entry.push(LaneRef { node: i, lane_loop: *l });
        }
    }
    let mut couplings = Vec::new();
    for lanes in lanes_of_group.values_mut() {
        lanes.sort();
        lanes.dedup();
        for w in lanes.windows(2) {
            couplings.push((w[0], w[1]));
        }
    }
    let channels = graph
        .channels
        .iter()
        .map(|ch| ChannelLanes {
            name: ch.name.clone(),
            lanes: lanes_of_group[&find(&mut group, ch.id)].clone(),
        })
        .collect();
    DseProblem {
        nodes,
        couplings,
        channels,
        budget,
        costs,
        objective,
    }
}

// ---------------------------------------------------------------------------
// Search

#[derive(Clone, Debug)]
struct Config {
    unroll: Vec<usize>,
    pipeline: Option<usize>,
    est: NodeEstimate,
}

fn node_configs(node: &DseNode, costs: &CostTable) -> Vec<Config> {
    let mut out = Vec::new();
    for p in node.nest.pipeline_options() {
        let mut probe = node.nest.clone();
        probe.pipeline = p;
        let domains: Vec<Vec<usize>> = node
            .nest
            .loops
            .iter()
            .enumerate()
            .map(|(l, lp)| {
                if lp.stream {
                    vec![1]
                } else if probe.is_inside_pipeline(l) {
                    vec![lp.trip]
                } else {
                    divisors(lp.trip)
                }
            })
            .collect();
        let mut idx = vec![0; domains.len()];
        'enumerate: loop {
            let unroll: Vec<usize> = idx.iter().zip(&domains).map(|(&i, d)| d[i]).collect();
            let nest = node.configured(&unroll, p);
            out.push(Config {
                est: node.estimate(&nest, costs),
                unroll,
                pipeline: p,
            });
            // Mixed-radix increment, last loop fastest.
            let mut k = domains.len();
            loop {
                if k == 0 {
                    break 'enumerate;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < domains[k].len() {
                    break;
                }
                idx[k] = 0;
            }
        }
    }
    out.sort_by(|a, b| {
        (a.est.cycles, a.est.dsp, a.est.bram, &a.unroll, a.pipeline).cmp(&(b.est.cycles, b.est.dsp, b.est.bram, &b.unroll, b.pipeline))
    });
    out
}

/// Total order used to pick among solutions.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    cycles: u64,
    dsp: u64,
    bram: u64,
    unroll: Vec<usize>,
    pipeline: Vec<Option<usize>>,
}

struct Search<'a> {
    problem: &'a DseProblem,
    configs: Vec<Vec<Config>>,
    /// Coupling variable of each (node, loop), if coupled.
    var: Vec<Vec<Option<usize>>>,
    values: Vec<Option<usize>>,
    /// Cheapest completion from node `i` on: (cycles, dsp, bram).
    rest: Vec<(u64, u64, u64)>,
    chosen: Vec<usize>,
    best: Option<(Key, Vec<usize>)>,
    budget: ResourceBudget,
}

impl Search<'_> {
    fn run(&mut self, i: usize, cycles: u64, dsp: u64, bram: u64) {
        if i == self.configs.len() {
            let key = Key {
                cycles,
                dsp,
                bram,
                unroll: self
                    .chosen
                    .iter()
                    .enumerate()
                    .flat_map(|(n, &c)| self.configs[n][c].unroll.iter().copied())
                    .collect(),
                pipeline: self
                    .chosen
                    .iter()
                    .enumerate()
                    .map(|(n, &c)| self.configs[n][c].pipeline)
                    .collect(),
            };
            if self.best.as_ref().is_none_or(|(b, _)| key < *b) {
                self.best = Some((key, self.chosen.clone()));
            }
            return;
        }
        for c in 0..self.configs[i].len() {
            let est = self.configs[i][c].est;
            let ncycles = self.problem.combine(cycles, est.cycles);
            let (ndsp, nbram) = (dsp + est.dsp, bram + est.bram);
            let (rc, rd, rb) = self.rest[i + 1];
            if ndsp + rd > self.budget.dsp || nbram + rb > self.budget.bram {
                continue;
            }
            if let Some((b, _)) = &self.best {
                let lb = (self.problem.combine(ncycles, rc), ndsp + rd, nbram + rb);
                if lb > (b.cycles, b.dsp, b.bram) {
                    // Configs are sorted by cycles, but resource bounds are
                    // not monotone in that order, so keep scanning unless
                    // the cycle bound alone is already worse.
                    if lb.0 > b.cycles {
                        break;
                    }
                    continue;
                }
            }
            let mut assigned = Vec::new();
            let mut consistent = true;
            for (l, v) in self.var[i].iter().enumerate() {
                let Some(v) = *v else { continue };
                let u = self.configs[i][c].unroll[l];
                match self.values[v] {
                    Some(x) if x != u => {
                        consistent = false;
                        break;
                    }
                    Some(_) => {}
                    None => {
                        self.values[v] = Some(u);
                        assigned.push(v);
                    }
                }
            }
            if consistent {
                self.chosen.push(c);
                self.run(i + 1, ncycles, ndsp, nbram);
                self.chosen.pop();
            }
            for v in assigned {
                self.values[v] = None;
            }
        }
    }
}

fn search(problem: &DseProblem, budget: ResourceBudget) -> Option<Vec<(Vec<usize>, Option<usize>)>> {
    let configs: Vec<Vec<Config>> = problem
        .nodes
        .iter()
        .map(|n| {
            node_configs(n, &problem.costs)
                .into_iter()
                .filter(|c| c.est.dsp <= budget.dsp && c.est.bram <= budget.bram)
                .collect()
        })
        .collect();
    if configs.iter().any(Vec::is_empty) {
        return None;
    }

    // Union-find over coupled lane loops.
    let mut ids: BTreeMap<LaneRef, usize> = BTreeMap::new();
    let mut parent: Vec<usize> = Vec::new();
    let mut id_of = |r: LaneRef, parent: &mut Vec<usize>| {
        *ids.entry(r).or_insert_with(|| {
            parent.push(parent.len());
            parent.len() - 1
        })
    };
    fn root(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut pairs = Vec::new();
    for (a, b) in &problem.couplings {
        let (x, y) = (id_of(*a, &mut parent), id_of(*b, &mut parent));
        pairs.push((x, y));
    }
    for (x, y) in pairs {
        let (rx, ry) = (root(&mut parent, x), root(&mut parent, y));
        parent[rx.max(ry)] = rx.min(ry);
    }
    let mut var = problem
        .nodes
        .iter()
        .map(|n| vec![None; n.nest.len()])
        .collect::<Vec<_>>();
    for (r, id) in &ids {
        var[r.node][r.lane_loop] = Some(root(&mut parent, *id));
    }

    let mut rest = vec![(0, 0, 0); configs.len() + 1];
    for i in (0..configs.len()).rev() {
        let min = |f: fn(&Config) -> u64| configs[i].iter().map(f).min().unwrap_or(0);
        let (c, d, b) = (min(|c| c.est.cycles), min(|c| c.est.dsp), min(|c| c.est.bram));
        let next = rest[i + 1];
        rest[i] = (problem.combine(next.0, c), next.1 + d, next.2 + b);
    }

    let mut s = Search {
        problem,
        var,
        values: vec![None; parent.len()],
        rest,
        chosen: Vec::new(),
        best: None,
        budget,
        configs,
    };
    s.run(0, 0, 0, 0);
    let (_, chosen) = s.best?;
    Some(
        chosen
            .iter()
            .enumerate()
            .map(|(n, &c)| (s.configs[n][c].unroll.clone(), s.configs[n][c].pipeline))
            .collect(),
    )
}

/// Exact minimum-cycle solution within the budget.
pub fn solve(problem: &DseProblem) -> Result<DseSolution, DseError> {
    problem.validate()?;
    if let Some(choices) = search(problem, problem.budget) {
        return Ok(problem.solution(&choices, true));
    }
    let min_of = |f: fn(&NodeEstimate) -> u64| -> u64 {
        problem
            .nodes
            .iter()
            .map(|n| node_configs(n, &problem.costs).iter().map(|c| f(&c.est)).min().unwrap_or(0))
            .sum()
    };
    let (min_dsp, min_bram) = (min_of(|e| e.dsp), min_of(|e| e.bram));
    let unlimited = ResourceBudget {
        dsp: u64::MAX / 4,
        bram: u64::MAX / 4,
    };
    let dsp_binds = min_dsp > problem.budget.dsp
        || search(
            problem,
            ResourceBudget {
                bram: problem.budget.bram,
                ..unlimited
            },
        )
        .is_some();
    Err(if dsp_binds {
        DseError::Infeasible {
            constraint: Constraint::Dsp,
            required: min_dsp,
            budget: problem.budget.dsp,
        }
    } else {
        DseError::Infeasible {
            constraint: Constraint::Bram,
            required: min_bram,
            budget: problem.budget.bram,
        }
    })
}

pub fn check_feasible(solution: &DseSolution, problem: &DseProblem) -> Vec<Violation> {
    let mut out = Vec::new();
    if solution.nodes.len() != problem.nodes.len() {
        out.push(Violation {
            constraint: Constraint::Unroll,
            target: "solution".into(),
            slack: solution.nodes.len() as i64 - problem.nodes.len() as i64,
            message: "node count differs from the problem".into(),
        });
        return out;
    }
    let mut dsp = 0;
    let mut bram = 0;
    let mut nests = Vec::new();
    for (n, c) in problem.nodes.iter().zip(&solution.nodes) {
        let nest = n.configured(&c.unroll, c.pipeline);
        let v = nest.violations();
        if v.is_empty() {
            let e = n.estimate(&nest, &problem.costs);
            dsp += e.dsp;
            bram += e.bram;
        }
        for m in v {
            out.push(Violation {
                constraint: Constraint::Unroll,
                target: n.name.clone(),
                slack: 0,
                message: m,
            });
        }
        nests.push(nest);
    }
    if dsp > problem.budget.dsp {
        out.push(Violation {
            constraint: Constraint::Dsp,
            target: "graph".into(),
            slack: (dsp - problem.budget.dsp) as i64,
            message: format!("DSP over by {}", dsp - problem.budget.dsp),
        });
    }
    if bram > problem.budget.bram {
        out.push(Violation {
            constraint: Constraint::Bram,
            target: "graph".into(),
            slack: (bram - problem.budget.bram) as i64,
            message: format!("BRAM over by {}", bram - problem.budget.bram),
        });
    }
    let width = |r: &LaneRef| nests.get(r.node).and_then(|n| n.unroll.get(r.lane_loop)).copied().unwrap_or(0);
    for (a, b) in &problem.couplings {
        let (wa, wb) = (width(a), width(b));
        if wa != wb {
            out.push(Violation {
                constraint: Constraint::Stream,
                target: format!("{}/{} ~ {}/{}", problem.nodes[a.node].name, a.lane_loop, problem.nodes[b.node].name, b.lane_loop),
                slack: wa as i64 - wb as i64,
                message: format!("coupled lane loops unrolled {wa} and {wb}"),
            });
        }
    }
    for (ch, choice) in problem.channels.iter().zip(&solution.channels) {
        for r in &ch.lanes {
            let w = width(r);
            if w != choice.width {
                out.push(Violation {
                    constraint: Constraint::Stream,
                    target: ch.name.clone(),
                    slack: choice.width as i64 - w as i64,
                    message: format!(
                        "channel {} has {} lanes but {} unrolls its lane loop by {w}",
                        ch.name, choice.width, problem.nodes[r.node].name
                    ),
                });
            }
        }
    }
    out
}

/// Applies a feasible solution to the graph: loop annotations, channel
/// widths and FIFO depths sized from first-output estimates. The returned
/// solution carries the chosen depths.
pub fn finalize(graph: &StreamGraph, problem: &DseProblem, solution: &DseSolution) -> Result<(StreamGraph, DseSolution), DseError> {
    let violations = check_feasible(solution, problem);
    if !violations.is_empty() {
        return Err(DseError::Rejected(violations));
    }
    if solution.channels.len() != graph.channels.len() {
        return Err(DseError::InvalidProblem("solution and graph disagree on channels".into()));
    }
    let mut g = graph.clone();
    let mut first_output = vec![None; g.nodes.len()];
    let compute: Vec<usize> = g.compute_nodes().map(|n| n.id).collect();
    for (&id, choice) in compute.iter().zip(&solution.nodes) {
        let nest = g.nodes[id].nest.as_mut().expect("compute nodes have a nest");
        nest.unroll = choice.unroll.clone();
        nest.pipeline = choice.pipeline;
        first_output[id] = Some(choice.estimate.first_output);
    }
    for (ch, choice) in g.channels.iter_mut().zip(&solution.channels) {
        ch.width = choice.width;
    }
    let depths = size_fifo_depths(&g, &first_output)?;
    let mut sol = solution.clone();
    for ((ch, choice), d) in g.channels.iter_mut().zip(sol.channels.iter_mut()).zip(depths) {
        ch.depth = d;
        choice.depth = d;
    }
    g.finalized = true;
    Ok((g, sol))
}

/// Extract, solve and finalize in one go.
pub fn optimize(
    graph: &StreamGraph,
    budget: ResourceBudget,
    costs: CostTable,
    objective: Objective,
) -> Result<(StreamGraph, DseSolution), DseError> {
    let problem = problem_from_graph(graph, budget, costs, objective);
    let solution = solve(&problem)?;
    finalize(graph, &problem, &solution)
}

/// Finalizes the unoptimized baseline design.
pub fn baseline(graph: &StreamGraph, costs: CostTable) -> Result<(StreamGraph, DseSolution), DseError> {
    let mut problem = problem_from_graph(
        graph,
        ResourceBudget {
            dsp: u64::MAX / 4,
            bram: u64::MAX / 4,
        },
        costs,
        Objective::Sum,
    );
    let solution = baseline_solution(&problem);
    problem.budget = ResourceBudget {
        dsp: solution.dsp,
        bram: solution.bram,
    };
    finalize(graph, &problem, &solution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine_ir::IteratorKind;
    use crate::resource_model::Loop;

    fn mac() -> PayloadOps {
        PayloadOps {
            mul: 1,
            add: 1,
            max: 0,
            clamp: 0,
        }
    }

    fn node(name: &str, trips: &[usize]) -> DseNode {
        let loops = trips
            .iter()
            .enumerate()
            .map(|(i, &t)| Loop {
                name: format!("l{i}"),
                dim: i,
                trip: t,
                kind: IteratorKind::Parallel,
                stream: false,
            })
            .collect();
        DseNode {
            name: name.into(),
            nest: LoopNest::new(loops, 0),
            ops: mac(),
            buffers: Vec::new(),
            warmup: Warmup::default(),
        }
    }

    fn problem(nodes: Vec<DseNode>, dsp: u64) -> DseProblem {
        DseProblem {
            nodes,
            couplings: Vec::new(),
            channels: Vec::new(),
            budget: ResourceBudget { dsp, bram: 288 },
            costs: CostTable::default(),
            objective: Objective::Sum,
        }
    }

    #[test]
    fn divisor_examples() {
        assert_eq!(divisors(12), vec![1, 2, 3, 4, 6, 12]);
        assert_eq!(divisors(1), vec![1]);
        assert_eq!(divisors(30), vec![1, 2, 3, 5, 6, 10, 15, 30]);
        assert_eq!(divisors(16), vec![1, 2, 4, 8, 16]);
    }

    #[test]
    fn single_node_unconstrained_and_constrained() {
        let s = solve(&problem(vec![node("a", &[8])], 1248)).unwrap();
        assert_eq!(s.nodes[0].unroll, vec![8]);
        assert_eq!(s.cycles, 4);
        let s = solve(&problem(vec![node("a", &[8])], 4)).unwrap();
        assert_eq!(s.nodes[0].unroll, vec![4]);
        assert_eq!(s.dsp, 4);
        assert!(s.optimal);
    }

    #[test]
    fn coupled_nodes_share_width() {
        let mut p = problem(vec![node("a", &[8]), node("b", &[8])], 4);
        let (a, b) = (LaneRef { node: 0, lane_loop: 0 }, LaneRef { node: 1, lane_loop: 0 });
        p.couplings.push((a, b));
        p.channels.push(ChannelLanes {
            name: "s".into(),
            lanes: vec![a, b],
        });
        let s = solve(&p).unwrap();
        assert_eq!(s.nodes[0].unroll, vec![2]);
        assert_eq!(s.nodes[1].unroll, vec![2]);
        assert_eq!(s.channels[0].width, 2);
        assert!(check_feasible(&s, &p).is_empty());
    }

    #[test]
    fn infeasible_names_dsp() {
        let err = solve(&problem(vec![node("a", &[8])], 0)).unwrap_err();
        assert!(matches!(err, DseError::Infeasible { constraint: Constraint::Dsp, .. }));
        assert!(err.to_string().contains("DSP Constr"));
    }

    #[test]
    fn check_feasible_reports() {
        let mut p = problem(vec![node("a", &[8, 8])], 1248);
        let s = p.solution(&[(vec![1, 1], None)], false);
        assert!(check_feasible(&s, &p).is_empty());
        p.budget.dsp = 12;
        let s = p.solution(&[(vec![4, 4], None)], false);
        let v = check_feasible(&s, &p);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].constraint, Constraint::Dsp);
        assert_eq!(v[0].slack, 4);
        let s = p.solution(&[(vec![3, 1], None)], false);
        assert_eq!(check_feasible(&s, &p)[0].constraint, Constraint::Unroll);
    }

    #[test]
    fn stream_mismatch_reported() {
        let mut p = problem(vec![node("a", &[8]), node("b", &[8])], 1248);
        let (a, b) = (LaneRef { node: 0, lane_loop: 0 }, LaneRef { node: 1, lane_loop: 0 });
        p.couplings.push((a, b));
        p.channels.push(ChannelLanes {
            name: "s".into(),
            lanes: vec![a, b],
        });
        let s = p.solution(&[(vec![2], None), (vec![4], None)], false);
        let v = check_feasible(&s, &p);
        assert!(v.iter().any(|v| v.constraint == Constraint::Stream && v.target == "s"));
    }

    #[test]
    fn repeated_solves_identical() {
        let p = problem(vec![node("a", &[12, 6]), node("b", &[8, 4])], 30);
        let a = solve(&p).unwrap().to_json();
        let b = solve(&p).unwrap().to_json();
        assert_eq!(a, b);
    }
}
