//! Python bindings: models, tensors, configs and campaigns.

use std::path::PathBuf;

use graphfi_core::campaign::{self, run_campaign, CampaignSpec, FIStat, SdcCriterion};
use graphfi_core::config::{parse_config, FIConfig};
use graphfi_core::injection::{self, FaultRecord};
use graphfi_core::model_io::{load_feeds as load_feed_file, load_model, save_model};
use graphfi_core::rng::run_rng;
use graphfi_core::tensor::bit_flip_element;
use graphfi_core::{DType, Feeds, Graph, Tensor as CoreTensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

#[pyclass(name = "Tensor", module = "graphfi", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PyTensor {
    inner: CoreTensor,
}

#[pymethods]
impl PyTensor {
    /// Build from flat row-major values.
    #[new]
    #[pyo3(signature = (values, shape, dtype = "f32"))]
    fn new(values: Vec<f64>, shape: Vec<usize>, dtype: &str) -> PyResult<Self> {
        let dt = DType::parse(dtype).ok_or_else(|| value_err(format!("unknown dtype {dtype:?}")))?;
        let t = match dt {
            DType::F32 => CoreTensor::from_f32(shape, values.iter().map(|&v| v as f32).collect()),
            DType::F64 => CoreTensor::from_f64(shape, values),
            DType::I64 => CoreTensor::from_i64(shape, values.iter().map(|&v| v as i64).collect()),
            DType::Bool => CoreTensor::from_bool(shape, values.iter().map(|&v| v != 0.0).collect()),
        };
        Ok(PyTensor {
            inner: t.map_err(value_err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        self.inner.dtype().name()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Flat values as Python floats (ints for i64, bools for bool).
    fn tolist<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        if let Some(v) = self.inner.as_i64() {
            return v.into_pyobject(py).map(Bound::into_any);
        }
        if let Some(v) = self.inner.as_bool() {
            return v.into_pyobject(py).map(Bound::into_any);
        }
        self.inner.to_f64_vec().into_pyobject(py).map(Bound::into_any)
    }

    fn element_bits(&self, index: usize) -> PyResult<u64> {
        self.inner.element_bits(index).map_err(value_err)
    }

    fn bit_flip(&self, index: usize, bit: u32) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: bit_flip_element(&self.inner, index, bit).map_err(value_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Tensor(dtype={}, shape={:?})", self.inner.dtype().name(), self.inner.shape())
    }
}

fn feeds_from(feeds: &Bound<'_, PyDict>) -> PyResult<Feeds> {
    let mut out = Feeds::new();
    for (k, v) in feeds.iter() {
        let t: PyRef<'_, PyTensor> = v.extract()?;
        out.insert(k.extract()?, t.inner.clone());
    }
    Ok(out)
}

fn wrap(ts: Vec<CoreTensor>) -> Vec<PyTensor> {
    ts.into_iter().map(|inner| PyTensor { inner }).collect()
}

#[pyclass(name = "Model", module = "graphfi", frozen)]
struct PyModel {
    graph: Graph,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(graph: PathBuf, weights: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            graph: load_model(&graph, &weights).map_err(runtime_err)?,
        })
    }

    fn save(&self, graph: PathBuf, weights: PathBuf) -> PyResult<()> {
        save_model(&self.graph, &graph, &weights).map_err(runtime_err)
    }

    #[getter]
    fn node_ids(&self) -> Vec<String> {
        self.graph.nodes().iter().map(|n| n.id.clone()).collect()
    }

    #[getter]
    fn outputs(&self) -> Vec<String> {
        self.graph.output_ids().into_iter().map(str::to_string).collect()
    }

    /// Fault-free execution.
    fn execute(&self, feeds: &Bound<'_, PyDict>) -> PyResult<Vec<PyTensor>> {
        let feeds = feeds_from(feeds)?;
        Ok(wrap(campaign::golden_run(&self.graph, &feeds).map_err(runtime_err)?))
    }

    /// Dynamic instances per injectable op kind.
    fn profile(&self, feeds: &Bound<'_, PyDict>) -> PyResult<Vec<(String, usize)>> {
        let feeds = feeds_from(feeds)?;
        let p = injection::profile(&self.graph, &feeds).map_err(runtime_err)?;
        Ok(p.counts.into_iter().map(|(k, n)| (k.name().to_string(), n)).collect())
    }

    /// One injected run on stream `run` of `seed`. Returns outputs and fault records.
    #[pyo3(signature = (feeds, config, seed, run = 0))]
    fn inject<'py>(
        &self,
        py: Python<'py>,
        feeds: &Bound<'py, PyDict>,
        config: &PyConfig,
        seed: u64,
        run: u64,
    ) -> PyResult<(Vec<PyTensor>, Vec<Bound<'py, PyDict>>)> {
        let feeds = feeds_from(feeds)?;
        let r = injection::instrumented_execute(&self.graph, &feeds, &config.inner, &mut run_rng(seed, run))
            .map_err(runtime_err)?;
        let records = r
            .records
            .iter()
            .map(|rec| record_dict(py, rec))
            .collect::<PyResult<_>>()?;
        Ok((wrap(r.outputs), records))
    }
}

fn record_dict<'py>(py: Python<'py>, r: &FaultRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("node", &r.node)?;
    d.set_item("kind", r.kind.name())?;
    d.set_item("instance", r.instance)?;
    d.set_item("fault", r.fault.name())?;
    d.set_item("element", r.element)?;
    d.set_item("bits", &r.bits)?;
    Ok(d)
}

#[pyclass(name = "Config", module = "graphfi", frozen)]
struct PyConfig {
    inner: FIConfig,
}

#[pymethods]
impl PyConfig {
    /// Parse a YAML config; every problem is listed in the raised ValueError.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: parse_config(text).map_err(value_err)?,
        })
    }

    fn to_yaml(&self) -> String {
        self.inner.to_yaml()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.name()
    }

    #[getter]
    fn seed(&self) -> Option<u64> {
        self.inner.seed
    }

    #[getter]
    fn scalar_fault_type(&self) -> &'static str {
        self.inner.scalar_fault_type.name()
    }

    #[getter]
    fn tensor_fault_type(&self) -> &'static str {
        self.inner.tensor_fault_type.name()
    }

    #[getter]
    fn skip_count(&self) -> u64 {
        self.inner.skip_count
    }

    #[getter]
    fn ops(&self) -> Vec<(String, f64)> {
        self.inner
            .ops
            .iter()
            .map(|r| (r.selector.to_string(), r.probability))
            .collect()
    }

    fn warnings(&self) -> Vec<String> {
        self.inner.warnings()
    }
}

#[pyclass(name = "Stat", module = "graphfi", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyStat {
    inner: FIStat,
}

#[pymethods]
impl PyStat {
    #[new]
    #[pyo3(signature = (total, sdc, crashes = 0))]
    fn new(total: u64, sdc: u64, crashes: u64) -> PyResult<Self> {
        if sdc > total {
            return Err(value_err(format!("sdc {sdc} exceeds total {total}")));
        }
        Ok(PyStat {
            inner: FIStat::from_counts(total, sdc, crashes),
        })
    }

    #[getter]
    fn total(&self) -> u64 {
        self.inner.total
    }

    #[getter]
    fn sdc(&self) -> u64 {
        self.inner.sdc
    }

    #[getter]
    fn crashes(&self) -> u64 {
        self.inner.crashes
    }

    #[getter]
    fn sdc_rate(&self) -> f64 {
        self.inner.sdc_rate
    }

    #[getter]
    fn ci95_half_width(&self) -> f64 {
        self.inner.ci95_half_width
    }

    #[getter]
    fn ci_low(&self) -> f64 {
        self.inner.ci_low()
    }

    #[getter]
    fn ci_high(&self) -> f64 {
        self.inner.ci_high()
    }

    fn __repr__(&self) -> String {
        format!(
            "Stat(n={}, sdc_rate={:.6}, ci95={:.6}, crashes={})",
            self.inner.total, self.inner.sdc_rate, self.inner.ci95_half_width, self.inner.crashes
        )
    }
}

/// Run a campaign from files. Returns `(seed, stat)`.
#[pyfunction]
#[pyo3(signature = (config, graph, weights, inputs, n = 1000, workers = 1, threshold = None, seed = None, log = None))]
#[allow(clippy::too_many_arguments)]
fn run(
    py: Python<'_>,
    config: PathBuf,
    graph: PathBuf,
    weights: PathBuf,
    inputs: Vec<PathBuf>,
    n: usize,
    workers: usize,
    threshold: Option<f64>,
    seed: Option<u64>,
    log: Option<PathBuf>,
) -> PyResult<(u64, PyStat)> {
    let spec = CampaignSpec {
        graph,
        weights,
        config,
        inputs,
        injections_per_input: n,
        workers,
        criterion: threshold.map_or(SdcCriterion::ClassMismatch, SdcCriterion::RegressionThreshold),
        seed,
        log,
    };
    let report = py.detach(|| run_campaign(&spec)).map_err(runtime_err)?;
    Ok((
        report.result.seed,
        PyStat {
            inner: report.result.stat,
        },
    ))
}

#[pyfunction]
fn load_feeds(path: PathBuf) -> PyResult<Vec<(String, PyTensor)>> {
    let feeds = load_feed_file(&path).map_err(runtime_err)?;
    Ok(feeds.into_iter().map(|(k, inner)| (k, PyTensor { inner })).collect())
}

#[pyfunction]
fn ci95_half_width(p: f64, n: u64) -> f64 {
    campaign::ci95_half_width(p, n)
}

#[pyfunction]
fn collate(stats: Vec<PyRef<'_, PyStat>>) -> PyStat {
    let all: Vec<FIStat> = stats.iter().map(|s| s.inner).collect();
    PyStat {
        inner: campaign::collate(&all),
    }
}

#[pymodule]
fn graphfi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyStat>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(load_feeds, m)?)?;
    m.add_function(wrap_pyfunction!(ci95_half_width, m)?)?;
    m.add_function(wrap_pyfunction!(collate, m)?)?;
    Ok(())
}
