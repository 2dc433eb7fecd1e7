//! The `graphfi` command line.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::campaign::{
    bench, bench_config, feed_files_in, labels, run_campaign, stats_summary, stats_table,
    CampaignError, CampaignSpec, SdcCriterion,
};
use crate::config::parse_config;
use crate::graph::Graph;
use crate::injection::profile;
use crate::model_io::{load_feeds, load_model};
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "graphfi", version, about = "Fault injection for tensor dataflow graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ModelArgs {
    /// Graph document (.gfi)
    #[arg(long)]
    pub graph: PathBuf,
    /// Weights blob (.gfiw)
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CriterionArg {
    Class,
    Regression,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute once without faults and print the outputs
    Golden {
        #[command(flatten)]
        model: ModelArgs,
        /// Feed bundle (.gfiw)
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run an injection campaign
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Feed bundles, or directories of them
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Injections per input
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, value_enum, default_value_t = CriterionArg::Class)]
        criterion: CriterionArg,
        /// Regression SDC threshold, in output units
        #[arg(long)]
        threshold: Option<f64>,
        /// Overrides the config's Seed
        #[arg(long)]
        seed: Option<u64>,
        /// Run log, one JSON object per line
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also write the stats output here
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Describe a model: nodes, shapes and injectable instances
    Inspect {
        #[command(flatten)]
        model: ModelArgs,
        /// Feed bundle used to count dynamic instances
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Parse and check a config file
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Time plain, instrumented and injecting executions
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        /// Injection setup for the enabled column; one bit flip per run if absent
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        predictions: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        json: bool,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn runtime(message: impl ToString) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e)
    }
}

type CliResult = Result<(), CliError>;

/// Parse `args` (including the program name) and execute. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Golden { model, input, json } => cmd_golden(&model, &input, json, out),
        Command::Run {
            config,
            model,
            inputs,
            n,
            workers,
            criterion,
            threshold,
            seed,
            log,
            out: out_path,
            json,
        } => {
            let criterion = match (criterion, threshold) {
                (CriterionArg::Class, None) => SdcCriterion::ClassMismatch,
                (CriterionArg::Class, Some(_)) => {
                    return Err(CliError::usage("--threshold requires --criterion regression"))
                }
                (CriterionArg::Regression, Some(t)) if t > 0.0 && t.is_finite() => {
                    SdcCriterion::RegressionThreshold(t)
                }
                (CriterionArg::Regression, Some(t)) => {
                    return Err(CliError::usage(format!("threshold must be positive, got {t}")))
                }
                (CriterionArg::Regression, None) => {
                    return Err(CliError::usage("--criterion regression requires --threshold"))
                }
            };
            if n == 0 {
                return Err(CliError::usage("injections must be ≥ 1"));
            }
            if workers == 0 {
                return Err(CliError::usage("workers must be ≥ 1"));
            }
            let inputs = expand_inputs(&inputs)?;
            let spec = CampaignSpec {
                graph: model.graph,
                weights: model.weights,
                config,
                inputs,
                injections_per_input: n,
                workers,
                criterion,
                seed,
                log,
            };
            cmd_run(&spec, out_path.as_deref(), json, out)
        }
        Command::Inspect { model, input, json } => cmd_inspect(&model, input.as_deref(), json, out),
        Command::ValidateConfig { config, json } => cmd_validate_config(&config, json, out),
        Command::Bench {
            model,
            input,
            config,
            predictions,
            repeats,
            json,
        } => cmd_bench(&model, &input, config.as_deref(), predictions, repeats, json, out),
    }
}

fn expand_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let found = feed_files_in(p)
                .map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
            if found.is_empty() {
                return Err(CliError::usage(format!("{}: no .gfiw inputs", p.display())));
            }
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn load(model: &ModelArgs) -> Result<Graph, CliError> {
    load_model(&model.graph, &model.weights).map_err(CliError::runtime)
}

fn tensor_json(id: &str, t: &Tensor) -> serde_json::Value {
    json!({
        "node": id,
        "dtype": t.dtype().name(),
        "shape": t.shape(),
        "values": t.to_f64_vec(),
    })
}

fn cmd_golden(model: &ModelArgs, input: &Path, json: bool, out: &mut dyn Write) -> CliResult {
    let g = load(model)?;
    let feeds = load_feeds(input).map_err(CliError::runtime)?;
    let exec = g.execute(&feeds, None).map_err(CliError::runtime)?;
    let prof = crate::injection::InstanceProfile::from_trace(&exec.trace);
    let ids = g.output_ids();
    if json {
        let outputs: Vec<_> = ids
            .iter()
            .zip(&exec.outputs)
            .map(|(id, t)| tensor_json(id, t))
            .collect();
        let label = exec.outputs.first().map(labels);
        let v = json!({
            "outputs": outputs,
            "label": label,
            "nodes_executed": exec.trace.len(),
            "injectable_instances": prof.counts.iter().map(|(k, n)| (k.name(), n)).collect::<std::collections::BTreeMap<_, _>>(),
            "injectable_total": prof.total,
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&v).unwrap())?;
        return Ok(());
    }
    for (id, t) in ids.iter().zip(&exec.outputs) {
        writeln!(out, "{id} {} {:?}: {:?}", t.dtype(), t.shape(), t.to_f64_vec())?;
    }
    if let Some(t) = exec.outputs.first() {
        writeln!(out, "label: {:?}", labels(t))?;
    }
    writeln!(
        out,
        "trace: {} nodes executed, {} injectable instances",
        exec.trace.len(),
        prof.total
    )?;
    for (k, n) in &prof.counts {
        writeln!(out, "  {k}: {n}")?;
    }
    Ok(())
}

fn cmd_run(spec: &CampaignSpec, out_path: Option<&Path>, json: bool, out: &mut dyn Write) -> CliResult {
    let report = run_campaign(spec).map_err(|e| match e {
        CampaignError::Config(_) | CampaignError::Spec(_) => CliError::usage(e.to_string()),
        e => CliError::runtime(e),
    })?;
    let text = if json {
        let st = report.result.stat;
        let mut s = serde_json::to_string_pretty(&json!({
            "seed": report.result.seed,
            "runs": report.result.outcomes.len(),
            "total": st.total,
            "sdc": st.sdc,
            "crashes": st.crashes,
            "sdc_rate": st.sdc_rate,
            "ci95_half_width": st.ci95_half_width,
            "mode": report.config.mode.name(),
            "criterion": spec.criterion.to_string(),
        }))
        .unwrap();
        s.push('\n');
        s
    } else {
        format!("{}\n{}", stats_summary(&report), stats_table(&[report.row()]))
    };
    if let Some(p) = out_path {
        std::fs::write(p, &text).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn cmd_inspect(model: &ModelArgs, input: Option<&Path>, json: bool, out: &mut dyn Write) -> CliResult {
    let g = load(model)?;
    let counts = match input {
        Some(p) => {
            let feeds = load_feeds(p).map_err(CliError::runtime)?;
            profile(&g, &feeds).map_err(CliError::runtime)?.counts
        }
        None => g.injectable_kinds(),
    };
    let total: usize = counts.values().sum();
    if json {
        let nodes: Vec<_> = g
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let t = g.node_type(i);
                json!({
                    "id": n.id,
                    "op": n.kind().name(),
                    "inputs": n.inputs,
                    "dtype": t.dtype.name(),
                    "shape": t.shape,
                    "injectable": n.injectable,
                })
            })
            .collect();
        let v = json!({
            "nodes": nodes,
            "outputs": g.output_ids(),
            "injectable_instances": counts.iter().map(|(k, n)| (k.name(), n)).collect::<std::collections::BTreeMap<_, _>>(),
            "injectable_total": total,
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&v).unwrap())?;
        return Ok(());
    }
    for (i, n) in g.nodes().iter().enumerate() {
        let t = g.node_type(i);
        writeln!(
            out,
            "{:<14} {:<12} {} {:?}{}  <- [{}]",
            n.id,
            n.kind(),
            t.dtype,
            t.shape,
            if n.injectable { " *" } else { "" },
            n.inputs.join(", ")
        )?;
    }
    writeln!(out, "outputs: {}", g.output_ids().join(", "))?;
    writeln!(out, "injectable instances ({total}):")?;
    for (k, n) in &counts {
        writeln!(out, "  {k}: {n}")?;
    }
    Ok(())
}

fn cmd_validate_config(path: &Path, json: bool, out: &mut dyn Write) -> CliResult {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let cfg = parse_config(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let warnings = cfg.warnings();
    if json {
        let v = json!({
            "seed": cfg.seed,
            "scalar_fault_type": cfg.scalar_fault_type.name(),
            "tensor_fault_type": cfg.tensor_fault_type.name(),
            "mode": cfg.mode.name(),
            "ops": cfg.ops.iter().map(|r| json!({"op": r.selector.to_string(), "probability": r.probability})).collect::<Vec<_>>(),
            "skip_count": cfg.skip_count,
            "warnings": warnings,
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&v).unwrap())?;
        return Ok(());
    }
    writeln!(out, "ok: {}", path.display())?;
    out.write_all(cfg.to_yaml().as_bytes())?;
    for w in warnings {
        writeln!(out, "warning: {w}")?;
    }
    Ok(())
}

fn cmd_bench(
    model: &ModelArgs,
    input: &Path,
    config: Option<&Path>,
    predictions: usize,
    repeats: usize,
    json: bool,
    out: &mut dyn Write,
) -> CliResult {
    if predictions == 0 {
        return Err(CliError::usage("predictions must be ≥ 1"));
    }
    let cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
            parse_config(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
        }
        None => bench_config(),
    };
    let g = load(model)?;
    let feeds = load_feeds(input).map_err(CliError::runtime)?;
    let report = bench(&g, &feeds, &cfg, predictions, repeats).map_err(CliError::runtime)?;
    if json {
        let v = json!({
            "predictions": report.predictions,
            "executions": report.executions,
            "baseline_ms": report.baseline.as_secs_f64() * 1e3,
            "disabled_ms": report.disabled.as_secs_f64() * 1e3,
            "enabled_ms": report.enabled.as_secs_f64() * 1e3,
            "inst_ratio": report.instrumentation_ratio(),
            "fi_ratio": report.injection_ratio(),
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&v).unwrap())?;
        return Ok(());
    }
    writeln!(out, "{} predictions per column", report.predictions)?;
    out.write_all(report.table().as_bytes())?;
    Ok(())
}
