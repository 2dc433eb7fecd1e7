//! Fault selection and corruption.
//!
//! Injection rides on the interpreter's [`Interceptor`] seam: after each
//! injectable node computes its output, [`RunInjector`] decides whether this
//! invocation is faulty and, if so, substitutes a corrupted copy. The graph is
//! never modified, so a run with injection disabled is the golden run.
//!
//! All injection state lives in one run; nothing carries over between runs.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{FIConfig, FaultType, InjectMode};
use crate::graph::{
    count_instances, BoxError, ExecError, ExecutionTrace, Feeds, Graph, Interceptor, OpKind, Site,
};
use crate::tensor::{self, Tensor, TensorError};

/// Dynamic instance counts of injectable nodes for one (graph, feeds) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InstanceProfile {
    pub counts: BTreeMap<OpKind, usize>,
    pub total: usize,
}

impl InstanceProfile {
    pub fn from_trace(trace: &ExecutionTrace) -> Self {
        let counts = count_instances(trace);
        let total = counts.values().sum();
        InstanceProfile { counts, total }
    }
}

/// Golden execution used only to count injectable instances.
pub fn profile(g: &Graph, feeds: &Feeds) -> Result<InstanceProfile, ExecError> {
    Ok(InstanceProfile::from_trace(&g.execute(feeds, None)?.trace))
}

#[derive(Debug, Clone, PartialEq)]
pub enum InjectionPlan {
    /// Per-kind Bernoulli probabilities, drawn at each invocation.
    ErrorRate(BTreeMap<OpKind, f64>),
    /// One chosen instance per injectable kind.
    DynamicInstance(BTreeMap<OpKind, usize>),
    /// A single (kind, instance) for the whole run.
    OneFaultPerRun { kind: OpKind, instance: usize },
}

impl InjectionPlan {
    pub fn mode(&self) -> InjectMode {
        match self {
            InjectionPlan::ErrorRate(_) => InjectMode::ErrorRate,
            InjectionPlan::DynamicInstance(_) => InjectMode::DynamicInstance,
            InjectionPlan::OneFaultPerRun { .. } => InjectMode::OneFaultPerRun,
        }
    }
}

#[derive(Debug, Error)]
pub enum InjectError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("{0} mode needs at least one injectable operator instance")]
    EmptyProfile(InjectMode),
    #[error("{fault} fault: {source}")]
    Fault {
        fault: FaultType,
        #[source]
        source: TensorError,
    },
}

pub fn plan<R: Rng + ?Sized>(
    cfg: &FIConfig,
    prof: &InstanceProfile,
    rng: &mut R,
) -> Result<InjectionPlan, InjectError> {
    match cfg.mode {
        InjectMode::ErrorRate => Ok(InjectionPlan::ErrorRate(
            prof.counts
                .keys()
                .map(|&k| (k, cfg.effective_probability(k).unwrap_or(0.0)))
                .collect(),
        )),
        InjectMode::DynamicInstance => {
            if prof.total == 0 {
                return Err(InjectError::EmptyProfile(cfg.mode));
            }
            Ok(InjectionPlan::DynamicInstance(
                prof.counts
                    .iter()
                    .map(|(&k, &n)| (k, rng.random_range(0..n)))
                    .collect(),
            ))
        }
        InjectMode::OneFaultPerRun => {
            if prof.total == 0 {
                return Err(InjectError::EmptyProfile(cfg.mode));
            }
            let mut pick = rng.random_range(0..prof.total);
            for (&kind, &n) in &prof.counts {
                if pick < n {
                    return Ok(InjectionPlan::OneFaultPerRun {
                        kind,
                        instance: pick,
                    });
                }
                pick -= n;
            }
            unreachable!("pick < total")
        }
    }
}

/// Audit record of one corruption. Element values are stored as raw bit
/// patterns so NaN and infinities survive serialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub node: String,
    /// Topological position of the node.
    pub node_index: usize,
    pub kind: OpKind,
    pub instance: usize,
    pub fault: FaultType,
    /// Corrupted element for element-granular faults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element: Option<usize>,
    /// Flipped bit per corrupted element, for bit-flip faults.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bits: Vec<u32>,
    /// Bit patterns before corruption: one element, or the whole tensor.
    pub original: Vec<u64>,
    pub corrupted: Vec<u64>,
}

/// Per-run mutable state.
#[derive(Debug, Clone, Default)]
pub struct InjectionState {
    /// Invocations seen so far, by topological node position.
    pub invocations: Vec<u64>,
    pub faults_applied: usize,
}

impl InjectionState {
    pub fn new(nodes: usize) -> Self {
        InjectionState {
            invocations: vec![0; nodes],
            faults_applied: 0,
        }
    }
}

/// Decide whether this invocation is faulty. Advances the node's invocation
/// counter; skipped invocations consume no randomness.
pub fn should_inject<R: Rng + ?Sized>(
    state: &mut InjectionState,
    plan: &InjectionPlan,
    cfg: &FIConfig,
    site: &Site<'_>,
    rng: &mut R,
) -> bool {
    if state.invocations.len() <= site.index {
        state.invocations.resize(site.index + 1, 0);
    }
    let prior = state.invocations[site.index];
    state.invocations[site.index] += 1;
    if prior < cfg.skip_count {
        return false;
    }
    match plan {
        InjectionPlan::ErrorRate(p) => {
            let p = p.get(&site.kind()).copied().unwrap_or(0.0);
            p > 0.0 && rng.random_bool(p)
        }
        InjectionPlan::DynamicInstance(chosen) => chosen.get(&site.kind()) == Some(&site.instance),
        InjectionPlan::OneFaultPerRun { kind, instance } => {
            state.faults_applied == 0 && *kind == site.kind() && *instance == site.instance
        }
    }
}

fn all_bits(t: &Tensor) -> Vec<u64> {
    (0..t.len()).map(|i| t.element_bits(i).unwrap()).collect()
}

/// Corrupt `t` with the fault type chosen by its rank. `None` faults and
/// empty tensors yield no record.
pub fn apply_fault<R: Rng + ?Sized>(
    site: &Site<'_>,
    t: &Tensor,
    cfg: &FIConfig,
    rng: &mut R,
) -> Result<Option<(Tensor, FaultRecord)>, InjectError> {
    let fault = cfg.fault_for_rank(t.rank());
    if fault == FaultType::None || t.is_empty() {
        return Ok(None);
    }
    let wrap = |source| InjectError::Fault { fault, source };
    let width = t.dtype().bit_width();
    let mut element = None;
    let mut bits = Vec::new();
    let out = match fault {
        FaultType::None => unreachable!(),
        FaultType::Zero => tensor::zero_like(t),
        FaultType::Rand => tensor::rand_like(t, rng).map_err(wrap)?,
        FaultType::RandElement => {
            let e = rng.random_range(0..t.len());
            element = Some(e);
            tensor::rand_element(t, e, rng).map_err(wrap)?
        }
        FaultType::BitFlipElement => {
            let e = rng.random_range(0..t.len());
            let b = rng.random_range(0..width);
            element = Some(e);
            bits.push(b);
            tensor::bit_flip_element(t, e, b).map_err(wrap)?
        }
        FaultType::BitFlipTensor => {
            let (out, chosen) =
                tensor::bit_flip_all(t, |_| rng.random_range(0..width)).map_err(wrap)?;
            bits = chosen;
            out
        }
    };
    let (original, corrupted) = match element {
        Some(e) => (
            vec![t.element_bits(e).unwrap()],
            vec![out.element_bits(e).unwrap()],
        ),
        None => (all_bits(t), all_bits(&out)),
    };
    let record = FaultRecord {
        node: site.node.id.clone(),
        node_index: site.index,
        kind: site.kind(),
        instance: site.instance,
        fault,
        element,
        bits,
        original,
        corrupted,
    };
    Ok(Some((out, record)))
}

/// Interceptor that applies one run's plan. With `enabled == false` it
/// returns every output untouched without consulting the plan.
pub struct RunInjector<'a, R: Rng + ?Sized> {
    cfg: &'a FIConfig,
    plan: Option<InjectionPlan>,
    state: InjectionState,
    rng: &'a mut R,
    records: Vec<FaultRecord>,
}

impl<'a, R: Rng + ?Sized> RunInjector<'a, R> {
    /// `plan == None` disables injection.
    pub fn new(cfg: &'a FIConfig, plan: Option<InjectionPlan>, nodes: usize, rng: &'a mut R) -> Self {
        RunInjector {
            cfg,
            plan,
            state: InjectionState::new(nodes),
            rng,
            records: Vec::new(),
        }
    }

    pub fn into_records(self) -> Vec<FaultRecord> {
        self.records
    }
}

impl<R: Rng + ?Sized> Interceptor for RunInjector<'_, R> {
    fn intercept(&mut self, site: &Site<'_>, output: &Tensor) -> Result<Option<Tensor>, BoxError> {
        let Some(plan) = &self.plan else {
            return Ok(None);
        };
        if !should_inject(&mut self.state, plan, self.cfg, site, self.rng) {
            return Ok(None);
        }
        match apply_fault(site, output, self.cfg, self.rng)? {
            Some((t, record)) => {
                log::debug!(
                    "fault {} at {}#{} ({})",
                    record.fault,
                    record.kind,
                    record.instance,
                    record.node
                );
                self.state.faults_applied += 1;
                self.records.push(record);
                Ok(Some(t))
            }
            None => Ok(None),
        }
    }
}

#[derive(Debug, Clone)]
pub struct InstrumentedRun {
    pub outputs: Vec<Tensor>,
    pub records: Vec<FaultRecord>,
    pub trace: ExecutionTrace,
    /// Every node's output in topological order, after any corruption.
    pub values: Vec<Tensor>,
}

/// A graph paired with a config and a cached instance profile. The profile is
/// computed once; each [`Instrumented::run`] then plans and executes.
pub struct Instrumented<'g> {
    graph: &'g Graph,
    cfg: FIConfig,
    profile: InstanceProfile,
}

impl<'g> Instrumented<'g> {
    pub fn new(graph: &'g Graph, cfg: FIConfig, feeds: &Feeds) -> Result<Self, ExecError> {
        let profile = profile(graph, feeds)?;
        Ok(Self::with_profile(graph, cfg, profile))
    }

    pub fn with_profile(graph: &'g Graph, cfg: FIConfig, profile: InstanceProfile) -> Self {
        Instrumented {
            graph,
            cfg,
            profile,
        }
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    pub fn config(&self) -> &FIConfig {
        &self.cfg
    }

    pub fn profile(&self) -> &InstanceProfile {
        &self.profile
    }

    pub fn run<R: Rng + ?Sized>(
        &self,
        feeds: &Feeds,
        rng: &mut R,
        enabled: bool,
    ) -> Result<InstrumentedRun, InjectError> {
        let plan = if enabled {
            Some(plan(&self.cfg, &self.profile, rng)?)
        } else {
            None
        };
        let mut injector = RunInjector::new(&self.cfg, plan, self.graph.len(), rng);
        let exec = self.graph.execute(feeds, Some(&mut injector))?;
        Ok(InstrumentedRun {
            outputs: exec.outputs,
            records: injector.into_records(),
            trace: exec.trace,
            values: exec.values,
        })
    }
}

/// Profile, plan and execute once with injection enabled.
pub fn instrumented_execute<R: Rng + ?Sized>(
    g: &Graph,
    feeds: &Feeds,
    cfg: &FIConfig,
    rng: &mut R,
) -> Result<InstrumentedRun, InjectError> {
    Instrumented::new(g, cfg.clone(), feeds)?.run(feeds, rng, true)
}

/// Re-applies recorded corruptions at their recorded sites.
pub struct Replay<'a> {
    records: &'a [FaultRecord],
}

impl<'a> Replay<'a> {
    pub fn new(records: &'a [FaultRecord]) -> Self {
        Replay { records }
    }
}

impl Interceptor for Replay<'_> {
    fn intercept(&mut self, site: &Site<'_>, output: &Tensor) -> Result<Option<Tensor>, BoxError> {
        let Some(r) = self
            .records
            .iter()
            .find(|r| r.node_index == site.index && r.instance == site.instance)
        else {
            return Ok(None);
        };
        let mut out = output.clone();
        match r.element {
            Some(e) => out = out.with_element_bits(e, r.corrupted[0])?,
            None => {
                if r.corrupted.len() != out.len() {
                    return Err(format!(
                        "record for {} holds {} values, output has {}",
                        r.node,
                        r.corrupted.len(),
                        out.len()
                    )
                    .into());
                }
                for (i, &bits) in r.corrupted.iter().enumerate() {
                    out = out.with_element_bits(i, bits)?;
                }
            }
        }
        Ok(Some(out))
    }
}

/// Execute with `records` forced as the run's faults.
pub fn replay(g: &Graph, feeds: &Feeds, records: &[FaultRecord]) -> Result<Vec<Tensor>, ExecError> {
    Ok(g.execute(feeds, Some(&mut Replay::new(records)))?.outputs)
}
