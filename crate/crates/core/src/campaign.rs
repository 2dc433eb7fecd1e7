//! Golden runs, injection campaigns and their statistics.
//!
//! A campaign executes `injections_per_input` faulty runs for every input.
//! Run `r` (global index `input * injections_per_input + j`) draws all its
//! randomness from stream `r` of the root seed, so the set of outcomes does
//! not depend on the number of workers or on scheduling.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufWriter, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{parse_config, ConfigErrors, FIConfig, FaultType, InjectMode, OpSelector};
use crate::graph::{kernels, ExecError, Feeds, Graph};
use crate::injection::{FaultRecord, InjectError, InstanceProfile, Instrumented};
use crate::model_io::{load_feeds, load_model, ModelIoError};
use crate::rng::{entropy_seed, run_rng};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SdcCriterion {
    /// Any change in predicted label.
    ClassMismatch,
    /// Absolute deviation above the threshold, in output units.
    RegressionThreshold(f64),
}

impl fmt::Display for SdcCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SdcCriterion::ClassMismatch => f.write_str("class"),
            SdcCriterion::RegressionThreshold(d) => write!(f, "regression>{d}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Benign,
    #[serde(rename = "SDC")]
    Sdc,
    Crash,
}

/// What the run predicted: labels for integer outputs or classifiers, values
/// for regressors. Taken from the first graph output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputSummary {
    Labels(Vec<i64>),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run: u64,
    pub input: usize,
    pub outcome: Outcome,
    pub records: Vec<FaultRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<OutputSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Wall time of the run; excluded from determinism comparisons.
    pub wall_us: u64,
}

impl RunOutcome {
    /// Copy with the timing zeroed.
    pub fn without_timing(&self) -> RunOutcome {
        RunOutcome {
            wall_us: 0,
            ..self.clone()
        }
    }
}

/// Aggregate over one set of runs. Crashed runs are counted separately and
/// excluded from `total`, the SDC-rate denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FIStat {
    pub total: u64,
    pub sdc: u64,
    pub crashes: u64,
    pub sdc_rate: f64,
    pub ci95_half_width: f64,
}

/// Normal-approximation 95% half-width, shrunk so `p ± h` stays in [0, 1].
pub fn ci95_half_width(p: f64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let h = 1.96 * (p * (1.0 - p) / n as f64).sqrt();
    h.min(p).min(1.0 - p).max(0.0)
}

impl FIStat {
    pub fn from_counts(total: u64, sdc: u64, crashes: u64) -> FIStat {
        assert!(sdc <= total, "sdc count {sdc} exceeds total {total}");
        let sdc_rate = if total == 0 {
            0.0
        } else {
            sdc as f64 / total as f64
        };
        FIStat {
            total,
            sdc,
            crashes,
            sdc_rate,
            ci95_half_width: ci95_half_width(sdc_rate, total),
        }
    }

    pub fn from_outcomes<'a, I: IntoIterator<Item = &'a RunOutcome>>(outcomes: I) -> FIStat {
        let (mut total, mut sdc, mut crashes) = (0, 0, 0);
        for o in outcomes {
            match o.outcome {
                Outcome::Benign => total += 1,
                Outcome::Sdc => {
                    total += 1;
                    sdc += 1
                }
                Outcome::Crash => crashes += 1,
            }
        }
        FIStat::from_counts(total, sdc, crashes)
    }

    pub fn ci_low(&self) -> f64 {
        self.sdc_rate - self.ci95_half_width
    }

    pub fn ci_high(&self) -> f64 {
        self.sdc_rate + self.ci95_half_width
    }
}

/// Pool counts and recompute rate and interval.
pub fn collate(stats: &[FIStat]) -> FIStat {
    let (t, s, c) = stats.iter().fold((0, 0, 0), |(t, s, c), x| {
        (t + x.total, s + x.sdc, c + x.crashes)
    });
    FIStat::from_counts(t, s, c)
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("output count differs: golden {golden}, faulty {faulty}")]
    OutputCount { golden: usize, faulty: usize },
    #[error("output {index}: golden {golden}, faulty {faulty}")]
    Mismatch {
        index: usize,
        golden: String,
        faulty: String,
    },
}

/// Labels of a classifier output: integers as-is, floats by arg-max over the
/// last axis.
pub fn labels(t: &Tensor) -> Vec<i64> {
    match t.dtype() {
        DType::I64 => t.as_i64().unwrap().to_vec(),
        DType::Bool => t.as_bool().unwrap().iter().map(|&b| b as i64).collect(),
        _ if t.rank() == 0 => vec![0],
        _ => {
            let axis = t.rank() - 1;
            let am = kernels::eval(&crate::graph::Op::ArgMax { axis }, &[t])
                .expect("arg-max over the last axis of a float tensor");
            am.as_i64().unwrap().to_vec()
        }
    }
}

pub fn summarize(outputs: &[Tensor], criterion: SdcCriterion) -> Option<OutputSummary> {
    let t = outputs.first()?;
    Some(match (criterion, t.dtype()) {
        (SdcCriterion::RegressionThreshold(_), DType::F32 | DType::F64) => {
            OutputSummary::Values(t.to_f64_vec())
        }
        _ => OutputSummary::Labels(labels(t)),
    })
}

/// Compare a faulty run to the golden run. Bit-identical outputs are always
/// benign; for regression a non-finite faulty value counts as SDC.
pub fn classify(
    golden: &[Tensor],
    faulty: &[Tensor],
    criterion: SdcCriterion,
) -> Result<Outcome, ClassifyError> {
    if golden.len() != faulty.len() {
        return Err(ClassifyError::OutputCount {
            golden: golden.len(),
            faulty: faulty.len(),
        });
    }
    for (index, (g, f)) in golden.iter().zip(faulty).enumerate() {
        if g.dtype() != f.dtype() || g.shape() != f.shape() {
            return Err(ClassifyError::Mismatch {
                index,
                golden: format!("{} {:?}", g.dtype(), g.shape()),
                faulty: format!("{} {:?}", f.dtype(), f.shape()),
            });
        }
    }
    if golden == faulty {
        return Ok(Outcome::Benign);
    }
    let sdc = match criterion {
        SdcCriterion::ClassMismatch => golden.iter().zip(faulty).any(|(g, f)| labels(g) != labels(f)),
        SdcCriterion::RegressionThreshold(delta) => golden.iter().zip(faulty).any(|(g, f)| {
            g.to_f64_vec()
                .into_iter()
                .zip(f.to_f64_vec())
                .any(|(a, b)| !b.is_finite() || (b - a).abs() > delta)
        }),
    };
    Ok(if sdc { Outcome::Sdc } else { Outcome::Benign })
}

/// Per-input golden outputs, each computed at most once.
pub struct GoldenCache<'g> {
    graph: &'g Graph,
    entries: Mutex<HashMap<usize, Arc<Golden>>>,
    executions: AtomicUsize,
}

#[derive(Debug)]
pub struct Golden {
    pub outputs: Vec<Tensor>,
    pub profile: InstanceProfile,
}

impl<'g> GoldenCache<'g> {
    pub fn new(graph: &'g Graph) -> Self {
        GoldenCache {
            graph,
            entries: Mutex::new(HashMap::new()),
            executions: AtomicUsize::new(0),
        }
    }

    pub fn get(&self, input: usize, feeds: &Feeds) -> Result<Arc<Golden>, ExecError> {
        if let Some(g) = self.entries.lock().unwrap().get(&input) {
            return Ok(Arc::clone(g));
        }
        self.executions.fetch_add(1, Ordering::Relaxed);
        let exec = self.graph.execute(feeds, None)?;
        let golden = Arc::new(Golden {
            profile: InstanceProfile::from_trace(&exec.trace),
            outputs: exec.outputs,
        });
        let mut entries = self.entries.lock().unwrap();
        Ok(Arc::clone(entries.entry(input).or_insert(golden)))
    }

    /// Graph executions performed so far.
    pub fn executions(&self) -> usize {
        self.executions.load(Ordering::Relaxed)
    }
}

/// One golden execution.
pub fn golden_run(g: &Graph, feeds: &Feeds) -> Result<Vec<Tensor>, ExecError> {
    Ok(g.execute(feeds, None)?.outputs)
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    ModelIo(#[from] ModelIoError),
    #[error("config: {0}")]
    Config(#[from] ConfigErrors),
    #[error("{0}")]
    Spec(String),
    #[error("golden run for input {input}: {source}")]
    Golden {
        input: usize,
        #[source]
        source: ExecError,
    },
    #[error("input {input}: {source}")]
    Plan {
        input: usize,
        #[source]
        source: InjectError,
    },
    #[error("run log {path}: {source}")]
    Log {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// An in-memory campaign over already loaded model and inputs.
pub struct Campaign<'g> {
    pub graph: &'g Graph,
    pub config: FIConfig,
    pub inputs: Vec<Feeds>,
    pub injections_per_input: usize,
    pub workers: usize,
    pub criterion: SdcCriterion,
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub seed: u64,
    pub stat: FIStat,
    /// Ordered by run index.
    pub outcomes: Vec<RunOutcome>,
}

fn validate_counts(injections: usize, workers: usize, inputs: usize) -> Result<(), CampaignError> {
    if injections == 0 {
        return Err(CampaignError::Spec("injections must be ≥ 1".into()));
    }
    if workers == 0 {
        return Err(CampaignError::Spec("workers must be ≥ 1".into()));
    }
    if inputs == 0 {
        return Err(CampaignError::Spec("at least one input is required".into()));
    }
    Ok(())
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

impl Campaign<'_> {
    /// Seed used by [`Campaign::run`]: the config's, or a fresh one.
    pub fn resolve_seed(&self) -> u64 {
        self.config.seed.unwrap_or_else(entropy_seed)
    }

    /// Run every injection; each outcome is written to `log` as one JSON
    /// line, in run order.
    pub fn run(&self, log: Option<&mut dyn Write>) -> Result<CampaignResult, CampaignError> {
        let seed = self.resolve_seed();
        self.run_with_seed(seed, log)
    }

    pub fn run_with_seed(
        &self,
        seed: u64,
        mut log: Option<&mut dyn Write>,
    ) -> Result<CampaignResult, CampaignError> {
        validate_counts(self.injections_per_input, self.workers, self.inputs.len())?;
        log::info!("campaign seed {seed}");
        for w in self.config.warnings() {
            log::warn!("{w}");
        }

        let cache = GoldenCache::new(self.graph);
        let mut goldens = Vec::with_capacity(self.inputs.len());
        for (input, feeds) in self.inputs.iter().enumerate() {
            let golden = cache
                .get(input, feeds)
                .map_err(|source| CampaignError::Golden { input, source })?;
            if self.config.mode != InjectMode::ErrorRate && golden.profile.total == 0 {
                return Err(CampaignError::Plan {
                    input,
                    source: InjectError::EmptyProfile(self.config.mode),
                });
            }
            goldens.push(golden);
        }
        let instrumented: Vec<Instrumented<'_>> = goldens
            .iter()
            .map(|g| Instrumented::with_profile(self.graph, self.config.clone(), g.profile.clone()))
            .collect();

        let n = self.injections_per_input;
        let total = n * self.inputs.len();
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<RunOutcome>();
        let mut outcomes: Vec<RunOutcome> = Vec::with_capacity(total);
        let mut log_error = None;

        std::thread::scope(|scope| {
            for _ in 0..self.workers.min(total) {
                let tx = tx.clone();
                let (next, goldens, instrumented) = (&next, &goldens, &instrumented);
                scope.spawn(move || loop {
                    let r = next.fetch_add(1, Ordering::Relaxed);
                    if r >= total {
                        break;
                    }
                    let input = r / n;
                    let outcome = self.one_run(
                        seed,
                        r as u64,
                        input,
                        &instrumented[input],
                        &goldens[input].outputs,
                    );
                    if tx.send(outcome).is_err() {
                        break;
                    }
                });
            }
            drop(tx);

            // Re-order so the log is written in run order.
            let mut pending = BTreeMap::new();
            for o in rx {
                pending.insert(o.run, o);
                while let Some(o) = pending.remove(&(outcomes.len() as u64)) {
                    if let (Some(w), None) = (log.as_deref_mut(), &log_error) {
                        let line = serde_json::to_string(&o).expect("run outcome serializes");
                        if let Err(e) = writeln!(w, "{line}") {
                            log_error = Some(e);
                        }
                    }
                    outcomes.push(o);
                }
            }
        });

        if let Some(source) = log_error {
            return Err(CampaignError::Log {
                path: PathBuf::from("<log>"),
                source,
            });
        }
        debug_assert_eq!(outcomes.len(), total);
        Ok(CampaignResult {
            seed,
            stat: FIStat::from_outcomes(&outcomes),
            outcomes,
        })
    }

    fn one_run(
        &self,
        seed: u64,
        run: u64,
        input: usize,
        instrumented: &Instrumented<'_>,
        golden: &[Tensor],
    ) -> RunOutcome {
        let start = Instant::now();
        let feeds = &self.inputs[input];
        let result = panic::catch_unwind(AssertUnwindSafe(|| {
            let mut rng = run_rng(seed, run);
            instrumented.run(feeds, &mut rng, true)
        }));
        let (outcome, records, summary, error) = match result {
            Ok(Ok(r)) => match classify(golden, &r.outputs, self.criterion) {
                Ok(c) => (c, r.records, summarize(&r.outputs, self.criterion), None),
                Err(e) => (Outcome::Crash, r.records, None, Some(e.to_string())),
            },
            Ok(Err(e)) => (Outcome::Crash, Vec::new(), None, Some(e.to_string())),
            Err(p) => (
                Outcome::Crash,
                Vec::new(),
                None,
                Some(format!("panic: {}", panic_message(p.as_ref()))),
            ),
        };
        RunOutcome {
            run,
            input,
            outcome,
            records,
            summary,
            error,
            wall_us: start.elapsed().as_micros() as u64,
        }
    }
}

/// A campaign described by file paths.
#[derive(Debug, Clone)]
pub struct CampaignSpec {
    pub graph: PathBuf,
    pub weights: PathBuf,
    pub config: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub injections_per_input: usize,
    pub workers: usize,
    pub criterion: SdcCriterion,
    /// Overrides the config's seed.
    pub seed: Option<u64>,
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct CampaignReport {
    pub config: FIConfig,
    pub result: CampaignResult,
}

impl CampaignReport {
    pub fn row(&self) -> StatsRow {
        StatsRow::new(&self.config, self.result.stat)
    }
}

/// Load everything, validate, run, and write the run log.
pub fn run_campaign(spec: &CampaignSpec) -> Result<CampaignReport, CampaignError> {
    validate_counts(spec.injections_per_input, spec.workers, spec.inputs.len())?;
    if let SdcCriterion::RegressionThreshold(d) = spec.criterion {
        if !(d > 0.0 && d.is_finite()) {
            return Err(CampaignError::Spec(format!(
                "regression threshold must be positive, got {d}"
            )));
        }
    }
    let text = std::fs::read_to_string(&spec.config).map_err(|e| {
        CampaignError::ModelIo(ModelIoError::Io {
            path: spec.config.clone(),
            source: e,
        })
    })?;
    let mut config = parse_config(&text)?;
    if let Some(seed) = spec.seed {
        config.seed = Some(seed);
    }
    let graph = load_model(&spec.graph, &spec.weights)?;
    let inputs = spec
        .inputs
        .iter()
        .map(|p| load_feeds(p))
        .collect::<Result<Vec<_>, _>>()?;
    let campaign = Campaign {
        graph: &graph,
        config: config.clone(),
        inputs,
        injections_per_input: spec.injections_per_input,
        workers: spec.workers,
        criterion: spec.criterion,
    };
    let seed = campaign.resolve_seed();
    config.seed = Some(seed);
    let result = match &spec.log {
        Some(path) => {
            let log_err = |source| CampaignError::Log {
                path: path.clone(),
                source,
            };
            let file = std::fs::File::create(path).map_err(log_err)?;
            let mut w = BufWriter::new(file);
            let result = campaign.run_with_seed(seed, Some(&mut w)).map_err(|e| match e {
                CampaignError::Log { source, .. } => log_err(source),
                e => e,
            })?;
            w.flush().map_err(log_err)?;
            result
        }
        None => campaign.run_with_seed(seed, None)?,
    };
    Ok(CampaignReport { config, result })
}

/// One row of the comma-separated stats table.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub mode: InjectMode,
    pub fault_type: String,
    /// Probability for errorRate campaigns; per-op entries joined by `;`.
    pub error_rate: String,
    pub stat: FIStat,
}

impl StatsRow {
    pub fn new(cfg: &FIConfig, stat: FIStat) -> Self {
        let fault_type = if cfg.scalar_fault_type == cfg.tensor_fault_type {
            cfg.tensor_fault_type.to_string()
        } else {
            format!("{}/{}", cfg.scalar_fault_type, cfg.tensor_fault_type)
        };
        let error_rate = if cfg.mode != InjectMode::ErrorRate {
            String::new()
        } else {
            cfg.ops
                .iter()
                .map(|r| match r.selector {
                    OpSelector::All => format!("{}", r.probability),
                    OpSelector::Kind(k) => format!("{k}={}", r.probability),
                })
                .collect::<Vec<_>>()
                .join(";")
        };
        StatsRow {
            mode: cfg.mode,
            fault_type,
            error_rate,
            stat,
        }
    }
}

pub const STATS_HEADER: &str = "mode,fault_type,error_rate,n,sdc_rate,ci95";

pub fn stats_table(rows: &[StatsRow]) -> String {
    let mut s = String::from(STATS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.mode, r.fault_type, r.error_rate, r.stat.total, r.stat.sdc_rate, r.stat.ci95_half_width
        ));
    }
    s
}

/// Human-readable summary; deterministic for a fixed seed.
pub fn stats_summary(report: &CampaignReport) -> String {
    let st = &report.result.stat;
    let mut s = format!(
        "seed: {}\nruns: {}\nsdc: {}\ncrashes: {}\nsdc_rate: {:.6}\nci95: {:.6}\n",
        report.result.seed,
        report.result.outcomes.len(),
        st.sdc,
        st.crashes,
        st.sdc_rate,
        st.ci95_half_width
    );
    if st.total > 0 && (st.sdc == 0 || st.sdc == st.total) {
        s.push_str("note: rate at 0 or 1, normal-approximation interval has zero width\n");
    }
    s
}

/// Timings for the same number of predictions under three setups.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub predictions: usize,
    pub baseline: Duration,
    pub disabled: Duration,
    pub enabled: Duration,
    /// Executions per setup, counted from returned traces.
    pub executions: [usize; 3],
}

impl BenchReport {
    /// (disabled - baseline) / baseline.
    pub fn instrumentation_ratio(&self) -> f64 {
        ratio(self.disabled, self.baseline)
    }

    /// (enabled - disabled) / disabled.
    pub fn injection_ratio(&self) -> f64 {
        ratio(self.enabled, self.disabled)
    }

    pub fn table(&self) -> String {
        let inst = format!("{:.2}x", self.instrumentation_ratio());
        let fi = format!("{:.2}x", self.injection_ratio());
        format!(
            "{:<12}{:<12}{:<12}{:<8}{}\n{:<12}{:<12}{:<12}{:<8}{}\n",
            "Baseline",
            "DisableFI",
            "EnableFI",
            "Inst.",
            "FI",
            fmt_duration(self.baseline),
            fmt_duration(self.disabled),
            fmt_duration(self.enabled),
            inst,
            fi,
        )
    }
}

fn ratio(a: Duration, b: Duration) -> f64 {
    let b = b.as_secs_f64();
    if b == 0.0 {
        return 0.0;
    }
    (a.as_secs_f64() - b) / b
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.3}ms", d.as_secs_f64() * 1e3)
}

/// Time `predictions` executions each of: the plain graph, the instrumented
/// graph with injection disabled, and with injection enabled. Each figure is
/// the fastest of `repeats` loops; the three loops are interleaved.
pub fn bench(
    graph: &Graph,
    feeds: &Feeds,
    cfg: &FIConfig,
    predictions: usize,
    repeats: usize,
) -> Result<BenchReport, InjectError> {
    let inst = Instrumented::new(graph, cfg.clone(), feeds)?;
    let seed = cfg.seed.unwrap_or(0);
    let mut best = [Duration::MAX; 3];
    let mut executions = [0usize; 3];
    for rep in 0..repeats.max(1) {
        let t = Instant::now();
        for _ in 0..predictions {
            let e = graph.execute(feeds, None)?;
            executions[0] += !e.trace.is_empty() as usize;
        }
        best[0] = best[0].min(t.elapsed());

        let t = Instant::now();
        for i in 0..predictions {
            let mut rng = run_rng(seed, (rep * predictions + i) as u64);
            let r = inst.run(feeds, &mut rng, false)?;
            executions[1] += !r.trace.is_empty() as usize;
        }
        best[1] = best[1].min(t.elapsed());

        let t = Instant::now();
        for i in 0..predictions {
            let mut rng = run_rng(seed, (rep * predictions + i) as u64);
            // A fault that cannot apply still counts as a timed prediction.
            if let Ok(r) = inst.run(feeds, &mut rng, true) {
                executions[2] += !r.trace.is_empty() as usize;
            } else {
                executions[2] += 1;
            }
        }
        best[2] = best[2].min(t.elapsed());
    }
    let repeats = repeats.max(1);
    Ok(BenchReport {
        predictions,
        baseline: best[0],
        disabled: best[1],
        enabled: best[2],
        executions: executions.map(|n| n / repeats),
    })
}

/// Default injection setup for benchmarking: one bit flip per run.
pub fn bench_config() -> FIConfig {
    FIConfig::new(InjectMode::OneFaultPerRun)
        .with_fault(FaultType::BitFlipElement)
        .with_seed(0)
}

/// Path helper used by callers that accept `--inputs` directories.
pub fn feed_files_in(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "gfiw"))
        .collect();
    files.sort();
    Ok(files)
}
