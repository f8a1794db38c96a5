use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use metalora::harness::eval::report_flops_table;
use metalora::harness::{PipelineConfig, Workspace};
use metalora::lora::{average_adapters, load_artifact, load_model, save_artifact, save_model};
use metalora::meta::proto_probs;
use metalora::tensor::{LrSchedule, Tensor};
use metalora::vit::{flops_estimate, keep_count, plan_flops, sparse_input_flops, PrunePlan, TokenSelection};
use metalora::{LoRAAdapter, ViT, ViTConfig};

create_exception!(metalora_py, MetaloraError, PyException, "Pipeline error; the message starts with its class.");

fn err(e: metalora::Error) -> PyErr {
    MetaloraError::new_err(format!("{}: {}", e.class(), e))
}

fn json_to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| MetaloraError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// `{layer: pruned_fraction}` as in the FLOPs tables.
fn plan_from(pruned: Option<BTreeMap<usize, f64>>) -> PyResult<PrunePlan> {
    let mut plan = PrunePlan::new();
    for (layer, p) in pruned.unwrap_or_default() {
        plan = plan.with(layer, 1.0 - p).map_err(err)?;
    }
    Ok(plan)
}

#[pyclass(name = "ViTConfig", module = "metalora_py", from_py_object)]
#[derive(Clone)]
struct PyViTConfig {
    inner: ViTConfig,
}

#[pymethods]
impl PyViTConfig {
    #[new]
    #[pyo3(signature = (image_size, patch_size, channels, depth, embed_dim, num_heads, mlp_ratio = 4))]
    fn new(image_size: usize, patch_size: usize, channels: usize, depth: usize, embed_dim: usize, num_heads: usize, mlp_ratio: usize) -> PyResult<Self> {
        let inner = ViTConfig { image_size, patch_size, channels, depth, embed_dim, num_heads, mlp_ratio };
        inner.validate().map_err(err)?;
        Ok(PyViTConfig { inner })
    }

    #[staticmethod]
    fn desk() -> Self {
        PyViTConfig { inner: ViTConfig::desk() }
    }

    #[staticmethod]
    fn vit_b16() -> Self {
        PyViTConfig { inner: ViTConfig::vit_b16() }
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim
    }

    #[getter]
    fn num_patches(&self) -> usize {
        self.inner.num_patches()
    }

    #[getter]
    fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape()
    }

    /// Forward FLOPs under a `{layer: pruned_fraction}` plan.
    #[pyo3(signature = (pruned = None))]
    fn flops(&self, pruned: Option<BTreeMap<usize, f64>>) -> PyResult<u64> {
        Ok(plan_flops(&self.inner, &plan_from(pruned)?))
    }

    /// Forward FLOPs when a fraction `ratio` of input tokens is dropped.
    fn sparse_flops(&self, ratio: f64) -> u64 {
        sparse_input_flops(&self.inner, keep_count(self.inner.num_patches(), 1.0 - ratio))
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Sum over layers of `3N·D² + 2N²·D + 8N·D²`.
#[pyfunction(name = "flops_estimate")]
fn py_flops_estimate(cfg: &PyViTConfig, seq_lengths: Vec<usize>) -> PyResult<u64> {
    flops_estimate(&cfg.inner, &seq_lengths).map_err(err)
}

/// Learning rate of the cyclic warm-up/cosine schedule at `iteration`.
#[pyfunction]
#[pyo3(signature = (iteration, warmup_start = 1e-5, peak = 1e-3))]
fn lr_at(iteration: usize, warmup_start: f64, peak: f64) -> f64 {
    LrSchedule::cyclic(warmup_start, peak).lr_at(iteration)
}

/// Prototype-classifier probabilities, one row per query.
#[pyfunction(name = "proto_probs")]
#[pyo3(signature = (queries, centers, squared = false))]
fn py_proto_probs(queries: Vec<Vec<f64>>, centers: Vec<Vec<f64>>, squared: bool) -> PyResult<Vec<Vec<f64>>> {
    let q = Tensor::from_rows(&queries).map_err(err)?;
    let c = Tensor::from_rows(&centers).map_err(err)?;
    let p = proto_probs(&q, &c, squared).map_err(err)?;
    Ok((0..queries.len()).map(|i| p.row(i).to_vec()).collect())
}

#[pyclass(name = "LoRAAdapter", module = "metalora_py", from_py_object)]
#[derive(Clone)]
struct PyLoRAAdapter {
    inner: LoRAAdapter,
}

#[pymethods]
impl PyLoRAAdapter {
    /// Fresh adapter: `A` Gaussian, `B` zero, so it changes no output.
    #[new]
    #[pyo3(signature = (cfg, rank = 4, seed = 0))]
    fn new(cfg: &PyViTConfig, rank: usize, seed: u64) -> PyResult<Self> {
        Ok(PyLoRAAdapter { inner: LoRAAdapter::new(&cfg.inner, rank, seed).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (cfg, rank = 4, seed = 0))]
    fn random(cfg: &PyViTConfig, rank: usize, seed: u64) -> PyResult<Self> {
        Ok(PyLoRAAdapter { inner: LoRAAdapter::random(&cfg.inner, rank, seed).map_err(err)? })
    }

    /// Reads an LRCY adapter artifact (any head is ignored).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyLoRAAdapter { inner: load_artifact(&path).map_err(err)?.0 })
    }

    #[staticmethod]
    fn average(adapters: Vec<PyLoRAAdapter>) -> PyResult<Self> {
        let refs: Vec<&LoRAAdapter> = adapters.iter().map(|a| &a.inner).collect();
        Ok(PyLoRAAdapter { inner: average_adapters(&refs).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_artifact(&path, &self.inner, None, serde_json::Value::Null).map_err(err)
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn task_id(&self) -> String {
        self.inner.meta.task_id.clone()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.meta.class_names.clone()
    }

    fn __eq__(&self, other: &PyLoRAAdapter) -> bool {
        self.inner == other.inner
    }
}

#[pyclass(name = "ViT", module = "metalora_py", from_py_object)]
#[derive(Clone)]
struct PyViT {
    inner: ViT,
}

#[pymethods]
impl PyViT {
    #[new]
    #[pyo3(signature = (cfg, seed = 0))]
    fn new(cfg: &PyViTConfig, seed: u64) -> PyResult<Self> {
        Ok(PyViT { inner: ViT::new(cfg.inner.clone(), seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyViT { inner: load_model(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyViTConfig {
        PyViTConfig { inner: self.inner.cfg.clone() }
    }

    /// Weight hash; unchanged by inference.
    fn fingerprint(&self) -> String {
        metalora::lora::fingerprint(&self.inner)
    }

    /// CLS embeddings of a batch given as flat `C·H·W` rows.
    #[pyo3(signature = (images, adapter = None, pruned = None))]
    fn embed(&self, images: Vec<Vec<f32>>, adapter: Option<&PyLoRAAdapter>, pruned: Option<BTreeMap<usize, f64>>) -> PyResult<Vec<Vec<f32>>> {
        let mut shape = vec![images.len()];
        shape.extend_from_slice(&self.inner.cfg.image_shape());
        let x = Tensor::new(shape, images.concat()).map_err(err)?;
        let plan = plan_from(pruned)?;
        let (e, _) = self.inner.infer(&x, adapter.map(|a| &a.inner), Some(&plan), TokenSelection::All).map_err(err)?;
        Ok((0..images.len()).map(|i| e.row(i).to_vec()).collect())
    }
}

#[pyclass(name = "PipelineConfig", module = "metalora_py", from_py_object)]
#[derive(Clone)]
struct PyPipelineConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyPipelineConfig {
    #[new]
    fn new() -> Self {
        PyPipelineConfig { inner: PipelineConfig::default() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyPipelineConfig { inner: PipelineConfig::from_toml_str(text).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPipelineConfig { inner: PipelineConfig::load(&path).map_err(err)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(err)
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn model(&self) -> PyViTConfig {
        PyViTConfig { inner: self.inner.vit.clone() }
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner)
    }
}

/// Output directory shared by the pipeline stages; each method mirrors a CLI subcommand.
#[pyclass(name = "Workspace", module = "metalora_py")]
struct PyWorkspace {
    inner: Workspace,
}

#[pymethods]
impl PyWorkspace {
    #[new]
    fn new(root: PathBuf) -> Self {
        PyWorkspace { inner: Workspace::new(root) }
    }

    #[getter]
    fn root(&self) -> PathBuf {
        self.inner.root.clone()
    }

    /// Returns `(meta_train_images, meta_test_images)`.
    fn gen_data(&self, cfg: &PyPipelineConfig) -> PyResult<(usize, usize)> {
        let (train, test) = self.inner.gen_data(&cfg.inner).map_err(err)?;
        Ok((train.len(), test.len()))
    }

    /// Returns each teacher's train accuracy.
    fn pretune(&self, cfg: &PyPipelineConfig) -> PyResult<Vec<f64>> {
        Ok(self.inner.pretune(&cfg.inner).map_err(err)?.iter().map(|t| t.train_accuracy).collect())
    }

    /// Returns the number of generated tasks.
    fn invert(&self, cfg: &PyPipelineConfig) -> PyResult<usize> {
        Ok(self.inner.invert(&cfg.inner).map_err(err)?.len())
    }

    /// Returns the training log as a list of dicts.
    fn meta_train<'py>(&self, py: Python<'py>, cfg: &PyPipelineConfig) -> PyResult<Bound<'py, PyAny>> {
        let out = self.inner.meta_train(&cfg.inner).map_err(err)?;
        json_to_py(py, &out.log)
    }

    /// Returns the evaluation report as a dict.
    fn eval<'py>(&self, py: Python<'py>, cfg: &PyPipelineConfig) -> PyResult<Bound<'py, PyAny>> {
        let report = self.inner.eval(&cfg.inner).map_err(err)?;
        json_to_py(py, &report)
    }

    fn all<'py>(&self, py: Python<'py>, cfg: &PyPipelineConfig) -> PyResult<Bound<'py, PyAny>> {
        let report = self.inner.all(&cfg.inner).map_err(err)?;
        json_to_py(py, &report)
    }
}

/// Analytical FLOPs rows (label, flops, delta %) for `{layer: pruned}` plans and input sparse ratios.
#[pyfunction]
#[pyo3(signature = (cfg, plans = Vec::new(), sparse_ratios = Vec::new()))]
fn flops_table(cfg: &PyViTConfig, plans: Vec<BTreeMap<usize, f64>>, sparse_ratios: Vec<f64>) -> PyResult<Vec<(String, u64, f64)>> {
    let plans = plans.into_iter().map(|p| plan_from(Some(p))).collect::<PyResult<Vec<_>>>()?;
    let table = report_flops_table(&cfg.inner, &plans, &sparse_ratios, None, None).map_err(err)?;
    Ok(table.rows.into_iter().map(|r| (r.label, r.flops, r.delta_pct)).collect())
}

#[pymodule]
fn metalora_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MetaloraError", m.py().get_type::<MetaloraError>())?;
    m.add_class::<PyViTConfig>()?;
    m.add_class::<PyViT>()?;
    m.add_class::<PyLoRAAdapter>()?;
    m.add_class::<PyPipelineConfig>()?;
    m.add_class::<PyWorkspace>()?;
    m.add_function(wrap_pyfunction!(py_flops_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(py_proto_probs, m)?)?;
    m.add_function(wrap_pyfunction!(flops_table, m)?)?;
    Ok(())
}
