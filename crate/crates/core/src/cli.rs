//! Command-line driver: parse, analyze, build, explore, emit and simulate.
//!
//! Exit codes: 0 on success, 2 when no design fits the budget (the binding
//! constraint is named on stderr), 3 when the stream simulation disagrees
//! with the dense reference or fails to complete, 1 for everything else.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codegen::{emit, intermediate_arrays, render_manifest, EmittedDesign};
use crate::dse::{optimize, DseError, DseSolution, Objective};
use crate::kernel_analysis::analyze_op;
use crate::model_ingest::{lower_graph, parse_model, LayerGraph};
use crate::resource_model::{CostTable, ResourceBudget};
use crate::simulator::{run_reference, run_stream_with, ChannelTrace, Deadlock, DenseTensor, NodeTrace, SimOptions, SimTrace};
use crate::stream_arch::{build_stream_graph, StreamGraph};

#[derive(Debug, Parser)]
#[command(name = "dfhls", version, about = "Streaming dataflow HLS generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify every lowered op and report its iterator sets.
    Analyze(CommonArgs),
    /// Explore unroll, pipeline and stream-width choices under the budget.
    Dse(CommonArgs),
    /// Write the HLS source and its manifest.
    Emit(CommonArgs),
    /// Run the stream simulator on a seeded random input.
    Simulate(SimArgs),
    /// Run every stage and write all artifacts.
    All(SimArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Model description (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// DSP budget.
    #[arg(long, default_value_t = 1248)]
    pub dsp: u64,
    /// BRAM18K budget.
    #[arg(long, default_value_t = 288)]
    pub bram: u64,
    /// Cost-table and objective overrides (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; reports go to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for the simulation input.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the finalized stream graph to this file.
    #[arg(long)]
    pub dump_graph: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Write the full simulation trace (JSON) to this file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Compare the stream output with the dense reference.
    #[arg(long)]
    pub check_reference: bool,
}

/// Overrides read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub dsp_costs: Option<DspCosts>,
    #[serde(default)]
    pub pipeline_depth: Option<u64>,
    #[serde(default)]
    pub ii: Option<u64>,
    #[serde(default)]
    pub objective: Option<Objective>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DspCosts {
    pub mul: Option<u64>,
    pub add: Option<u64>,
    pub max: Option<u64>,
    pub clamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub model: PathBuf,
    pub budget: ResourceBudget,
    pub costs: CostTable,
    pub objective: Objective,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_args(args: &CommonArgs) -> anyhow::Result<Self> {
        let mut costs = CostTable::default();
        let mut objective = Objective::default();
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            let cfg: ConfigFile =
                serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
            if let Some(d) = cfg.dsp_costs {
                costs.mul = d.mul.unwrap_or(costs.mul);
                costs.add = d.add.unwrap_or(costs.add);
                costs.max = d.max.unwrap_or(costs.max);
                costs.clamp = d.clamp.unwrap_or(costs.clamp);
            }
            costs.pipeline_depth = cfg.pipeline_depth.unwrap_or(costs.pipeline_depth);
            costs.ii = cfg.ii.unwrap_or(costs.ii);
            objective = cfg.objective.unwrap_or(objective);
        }
        costs.validate().context("invalid cost table")?;
        Ok(RunConfig {
            model: args.model.clone(),
            budget: ResourceBudget {
                dsp: args.dsp,
                bram: args.bram,
            },
            costs,
            objective,
            out: args.out.clone(),
            seed: args.seed,
        })
    }

    /// Design name: the model file stem as a C identifier.
    pub fn design_name(&self) -> String {
        let stem = self.model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        crate::codegen::c_ident(&stem)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Infeasible(DseError),
    #[error("simulation mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Infeasible(_) => 2,
            CliError::Mismatch(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

/// Summary written by `simulate` and `all`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimReport {
    pub design: String,
    pub seed: u64,
    pub steps: u64,
    pub completed: bool,
    pub matches_reference: Option<bool>,
    pub mismatched_elements: usize,
    pub nodes: Vec<NodeTrace>,
    pub channels: Vec<ChannelTrace>,
    pub deadlock: Option<Deadlock>,
}

struct Pipeline {
    layers: LayerGraph,
    graph: StreamGraph,
    solution: DseSolution,
}

fn load(config: &RunConfig) -> anyhow::Result<(LayerGraph, StreamGraph)> {
    let layers = parse_model(&config.model)?;
    let ops = lower_graph(&layers)?;
    let graph = build_stream_graph(&ops, &layers)?;
    Ok((layers, graph))
}

fn explore(config: &RunConfig) -> Result<Pipeline, CliError> {
    let (layers, graph) = load(config)?;
    let (graph, solution) = optimize(&graph, config.budget, config.costs.clone(), config.objective).map_err(|e| match e {
        DseError::Infeasible { .. } => CliError::Infeasible(e),
        other => CliError::Other(other.into()),
    })?;
    Ok(Pipeline {
        layers,
        graph,
        solution,
    })
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Writes `text` to `<out>/<file>` or prints it when no directory is set.
fn report(config: &RunConfig, file: &str, text: &str) -> anyhow::Result<()> {
    match &config.out {
        Some(dir) => write_file(&dir.join(file), text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn emit_design(config: &RunConfig, p: &Pipeline) -> anyhow::Result<EmittedDesign> {
    let design = emit(&p.graph, &p.solution, &config.design_name(), &config.costs)?;
    let leaks = intermediate_arrays(&design.source(), &p.graph);
    if !leaks.is_empty() {
        bail!("emitted source holds full intermediate tensors: {}", leaks.join(", "));
    }
    Ok(design)
}

fn simulate(config: &RunConfig, p: &Pipeline, args: &SimArgs, check: bool) -> Result<(SimReport, SimTrace), CliError> {
    let input = DenseTensor::random(&p.layers.input.shape, config.seed);
    let opts = SimOptions {
        costs: config.costs.clone(),
        ..SimOptions::default()
    };
    let (output, trace) = run_stream_with(&p.graph, &input, &opts).map_err(anyhow::Error::from)?;
    if let Some(path) = &args.trace {
        write_file(path, &json(&trace))?;
    }
    let (matches, mismatched) = if check {
        let want = run_reference(&p.layers, &input).map_err(anyhow::Error::from)?;
        let n = want.data.iter().zip(&output.data).filter(|(a, b)| a != b).count();
        (Some(n == 0 && trace.completed()), n)
    } else {
        (None, 0)
    };
    Ok((
        SimReport {
            design: config.design_name(),
            seed: config.seed,
            steps: trace.steps,
            completed: trace.completed(),
            matches_reference: matches,
            mismatched_elements: mismatched,
            nodes: trace.nodes.clone(),
            channels: trace.channels.clone(),
            deadlock: trace.deadlock.clone(),
        },
        trace,
    ))
}

fn sim_verdict(report: &SimReport) -> Result<(), CliError> {
    if let Some(d) = &report.deadlock {
        let chans: Vec<String> = d.channels.iter().map(|c| c.channel.clone()).collect();
        return Err(CliError::Mismatch(format!("deadlock; blocked channels: {}", chans.join(", "))));
    }
    if report.matches_reference == Some(false) {
        return Err(CliError::Mismatch(format!(
            "{} output elements differ from the reference",
            report.mismatched_elements
        )));
    }
    Ok(())
}

fn dump_graph(args: &CommonArgs, graph: &StreamGraph) -> anyhow::Result<()> {
    if let Some(path) = &args.dump_graph {
        write_file(path, &format!("{}\n", graph.to_json()))?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Analyze(args) => {
            let config = RunConfig::from_args(args)?;
            let (layers, graph) = load(&config)?;
            let ops = lower_graph(&layers).map_err(anyhow::Error::from)?;
            let analyses = ops
                .iter()
                .map(analyze_op)
                .collect::<Result<Vec<_>, _>>()
                .map_err(anyhow::Error::from)?;
            dump_graph(args, &graph)?;
            report(&config, "analysis.json", &json(&analyses))?;
        }
        Command::Dse(args) => {
            let config = RunConfig::from_args(args)?;
            let p = explore(&config)?;
            dump_graph(args, &p.graph)?;
            report(&config, "dse.json", &json(&p.solution))?;
        }
        Command::Emit(args) => {
            let config = RunConfig::from_args(args)?;
            let p = explore(&config)?;
            dump_graph(args, &p.graph)?;
            let design = emit_design(&config, &p)?;
            let dir = config.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let name = config.design_name();
            write_file(&dir.join(format!("{name}.cpp")), &design.source())?;
            write_file(&dir.join(format!("{name}.manifest.json")), &render_manifest(&design))?;
        }
        Command::Simulate(args) => {
            let config = RunConfig::from_args(&args.common)?;
            let p = explore(&config)?;
            dump_graph(&args.common, &p.graph)?;
            let (rep, _) = simulate(&config, &p, args, args.check_reference)?;
            report(&config, "sim.json", &json(&rep))?;
            sim_verdict(&rep)?;
        }
        Command::All(args) => {
            let mut config = RunConfig::from_args(&args.common)?;
            let dir = config.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            config.out = Some(dir.clone());
            let p = explore(&config)?;
            dump_graph(&args.common, &p.graph)?;
            write_file(&dir.join("graph.json"), &format!("{}\n", p.graph.to_json()))?;
            write_file(&dir.join("dse.json"), &json(&p.solution))?;
            let design = emit_design(&config, &p)?;
            let name = config.design_name();
            write_file(&dir.join(format!("{name}.cpp")), &design.source())?;
            write_file(&dir.join(format!("{name}.manifest.json")), &render_manifest(&design))?;
            let (rep, _) = simulate(&config, &p, args, true)?;
            write_file(&dir.join("sim.json"), &json(&rep))?;
            sim_verdict(&rep)?;
        }
    }
    Ok(())
}

/// Runs the parsed command and maps the outcome to a process exit code,
/// writing diagnostics to stderr.
pub fn main_with(cli: &Cli) -> i32 {
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Other(inner) => eprintln!("error: {inner:#}"),
                _ => eprintln!("error: {e}"),
            }
            e.exit_code()
        }
    }
}
