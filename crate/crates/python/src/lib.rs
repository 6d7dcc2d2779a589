//! Python bindings for `fpsattn`.
//!
//! Matrices cross the boundary as lists of rows in row-major grid order
//! `(t, h, w)`; the tile-contiguous reordering happens on the Rust side.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fpsattn::attention::{self, AttentionInputs, FpsConfig};
use fpsattn::experiment::{self, ExperimentConfig, MetricsRow};
use fpsattn::fp8::{self, Fp8Code, Fp8Kind, ScaleFactor};
use fpsattn::grid::{build_tile_map, invert_permutation};
use fpsattn::sparsity::{self, build_block_mask};
use fpsattn::{metrics, Granularity, GridShape, Matrix, ScheduleConfig, TileScheme, WindowSpec};

type Triple = (usize, usize, usize);

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_kind(name: &str) -> PyResult<Fp8Kind> {
    name.parse().map_err(|e: fpsattn::Error| value_error(e))
}

fn parse_granularity(name: &str) -> PyResult<Granularity> {
    name.parse().map_err(|e: fpsattn::Error| value_error(e))
}

fn triple((a, b, c): Triple) -> [usize; 3] {
    [a, b, c]
}

fn untriple([a, b, c]: [usize; 3]) -> Triple {
    (a, b, c)
}

fn to_matrix(rows: Vec<Vec<f32>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(value_error)
}

/// Partition of a `(t, h, w)` token grid into equal tiles.
#[pyclass(name = "TileMap", frozen, module = "fpsattn", skip_from_py_object)]
#[derive(Clone)]
struct PyTileMap {
    inner: fpsattn::TileMap,
}

#[pymethods]
impl PyTileMap {
    #[new]
    fn new(grid: Triple, d_model: usize, tile: Triple) -> PyResult<Self> {
        let [t, h, w] = triple(grid);
        let grid = GridShape::new(t, h, w, d_model).map_err(value_error)?;
        let inner = build_tile_map(grid, TileScheme::from(triple(tile))).map_err(value_error)?;
        Ok(Self { inner })
    }

    #[getter]
    fn tile_grid_dims(&self) -> Triple {
        untriple(self.inner.tile_grid_dims)
    }

    #[getter]
    fn tiles_total(&self) -> usize {
        self.inner.tiles_total
    }

    #[getter]
    fn tile_volume(&self) -> usize {
        self.inner.tile_volume
    }

    #[getter]
    fn tokens(&self) -> usize {
        self.inner.tokens()
    }

    /// Grid-order token index at each tile-contiguous row.
    fn tile_contiguous_order(&self) -> Vec<usize> {
        self.inner.tile_contiguous_order()
    }

    fn __repr__(&self) -> String {
        let g = self.inner.grid;
        format!(
            "TileMap(grid=({}, {}, {}), d_model={}, tile={:?})",
            g.t_frames,
            g.height,
            g.width,
            g.d_model,
            self.inner.scheme.dims()
        )
    }
}

/// Tile-level sliding-window attention mask.
#[pyclass(name = "BlockMask", frozen, module = "fpsattn")]
struct PyBlockMask {
    inner: fpsattn::BlockMask,
}

#[pymethods]
impl PyBlockMask {
    #[new]
    fn new(window: Triple, dims: Triple) -> PyResult<Self> {
        let [a, b, c] = triple(window);
        let window = WindowSpec::new(a, b, c).map_err(value_error)?;
        let inner = build_block_mask(window, triple(dims)).map_err(value_error)?;
        Ok(Self { inner })
    }

    #[getter]
    fn tiles_total(&self) -> usize {
        self.inner.tiles_total()
    }

    #[getter]
    fn density(&self) -> f64 {
        sparsity::density(&self.inner)
    }

    /// Flat key-tile indices admitted for query tile `u`, ascending.
    fn allowed(&self, u: usize) -> PyResult<Vec<usize>> {
        if u >= self.inner.tiles_total() {
            return Err(value_error(format!("tile {u} out of range")));
        }
        Ok(self.inner.allowed(u).to_vec())
    }

    fn is_allowed(&self, u: usize, v: usize) -> bool {
        let n = self.inner.tiles_total();
        u < n && v < n && self.inner.is_allowed(u, v)
    }

    fn dump(&self) -> String {
        self.inner.dump()
    }
}

/// Early / mid / late parameter schedule over the denoising steps.
#[pyclass(name = "Schedule", module = "fpsattn", from_py_object)]
#[derive(Clone)]
struct PySchedule {
    inner: ScheduleConfig,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (total_steps=None, alpha1=None, alpha2=None))]
    fn new(total_steps: Option<usize>, alpha1: Option<f64>, alpha2: Option<f64>) -> Self {
        let mut inner = ScheduleConfig::default();
        if let Some(d) = total_steps {
            inner.total_steps = d;
        }
        if let Some(a) = alpha1 {
            inner.alpha1 = a;
        }
        if let Some(a) = alpha2 {
            inner.alpha2 = a;
        }
        Self { inner }
    }

    #[getter]
    fn total_steps(&self) -> usize {
        self.inner.total_steps
    }

    /// Last step of the early regime and last step of the mid regime.
    fn thresholds(&self) -> (usize, usize) {
        self.inner.thresholds()
    }

    fn regime_at(&self, step: usize) -> PyResult<String> {
        Ok(self.inner.regime_at(step).map_err(value_error)?.to_string())
    }

    /// `(tile, window)` in force at a 1-based step.
    fn params_at(&self, step: usize) -> PyResult<(Triple, Triple)> {
        let p = self.inner.params_at(step).map_err(value_error)?;
        Ok((untriple(p.tile.dims()), untriple(p.window.extents())))
    }

    /// Human-readable violations; empty when the schedule is valid.
    fn violations(&self) -> Vec<String> {
        match self.inner.validate() {
            Ok(()) => Vec::new(),
            Err(v) => v.iter().map(ToString::to_string).collect(),
        }
    }
}

/// Full experiment configuration, loaded from TOML or left at defaults.
#[pyclass(name = "Config", module = "fpsattn", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => ExperimentConfig::from_toml(text).map_err(value_error)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(value_error)
    }

    /// Every configuration problem found; empty when valid.
    fn problems(&self) -> Vec<String> {
        self.inner.problems()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn heads(&self) -> usize {
        self.inner.heads
    }

    #[setter]
    fn set_heads(&mut self, heads: usize) {
        self.inner.heads = heads;
    }

    #[getter]
    fn format(&self) -> String {
        self.inner.format.to_string()
    }

    #[setter]
    fn set_format(&mut self, name: &str) -> PyResult<()> {
        self.inner.format = parse_kind(name)?;
        Ok(())
    }

    #[getter]
    fn passthrough(&self) -> bool {
        self.inner.passthrough
    }

    #[setter]
    fn set_passthrough(&mut self, on: bool) {
        self.inner.passthrough = on;
    }

    #[getter]
    fn schedule(&self) -> PySchedule {
        PySchedule {
            inner: self.inner.schedule,
        }
    }

    #[setter]
    fn set_schedule(&mut self, schedule: PySchedule) {
        self.inner.schedule = schedule.inner;
    }
}

/// Nearest FP8 code (round to nearest, ties to even) as an integer byte.
#[pyfunction]
#[pyo3(signature = (x, format="e4m3"))]
fn encode(x: f32, format: &str) -> PyResult<u8> {
    let fmt = parse_kind(format)?.format();
    Ok(fp8::encode(x, &fmt).map_err(value_error)?.0)
}

#[pyfunction]
#[pyo3(signature = (code, format="e4m3"))]
fn decode(code: u8, format: &str) -> PyResult<f32> {
    let fmt = parse_kind(format)?.format();
    fp8::decode(Fp8Code(code), &fmt).map_err(value_error)
}

/// `amax / max_finite`, or 1 for an all-zero block.
#[pyfunction]
#[pyo3(signature = (values, format="e4m3"))]
fn compute_scale(values: Vec<f32>, format: &str) -> PyResult<f32> {
    let fmt = parse_kind(format)?.format();
    Ok(fp8::compute_scale(&values, &fmt).map_err(value_error)?.value())
}

#[pyfunction]
#[pyo3(signature = (x, scale, format="e4m3"))]
fn quantize_dequantize(x: f32, scale: f32, format: &str) -> PyResult<f32> {
    let fmt = parse_kind(format)?.format();
    let scale = ScaleFactor::new(scale).map_err(value_error)?;
    fp8::quantize_dequantize(x, scale, &fmt).map_err(value_error)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    metrics::cosine_similarity(&a, &b).map_err(value_error)
}

#[pyfunction]
fn mse(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    metrics::mse(&a, &b).map_err(value_error)
}

#[pyfunction]
fn snr_db(reference: Vec<f32>, approx: Vec<f32>) -> PyResult<f64> {
    metrics::snr_db(&reference, &approx).map_err(value_error)
}

#[pyfunction]
fn flops_dense(tokens: usize, d_model: usize) -> u64 {
    metrics::flops_dense(tokens, d_model)
}

#[pyfunction]
fn flops_sparse(tokens: usize, d_model: usize, density: f64) -> PyResult<u64> {
    metrics::flops_sparse(tokens, d_model, density).map_err(value_error)
}

fn inputs(q: Vec<Vec<f32>>, k: Vec<Vec<f32>>, v: Vec<Vec<f32>>, map: &PyTileMap) -> PyResult<AttentionInputs> {
    AttentionInputs::from_grid_order(&to_matrix(q)?, &to_matrix(k)?, &to_matrix(v)?, map.inner)
        .map_err(value_error)
}

fn grid_order_rows(out: &Matrix, inputs: &AttentionInputs) -> PyResult<Vec<Vec<f32>>> {
    let back = invert_permutation(&inputs.map().tile_contiguous_order());
    Ok(out.gather_rows(&back).map_err(value_error)?.to_rows())
}

fn scale_or_default(softmax_scale: Option<f32>, d_model: usize) -> f32 {
    softmax_scale.unwrap_or_else(|| attention::default_softmax_scale(d_model))
}

/// Full-precision attention over all keys.
#[pyfunction]
#[pyo3(signature = (q, k, v, tile_map, softmax_scale=None))]
fn dense_reference(
    q: Vec<Vec<f32>>,
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    tile_map: &PyTileMap,
    softmax_scale: Option<f32>,
) -> PyResult<Vec<Vec<f32>>> {
    let inputs = inputs(q, k, v, tile_map)?;
    let scale = scale_or_default(softmax_scale, inputs.d_model());
    let out = attention::dense_reference(&inputs, scale).map_err(value_error)?;
    grid_order_rows(&out, &inputs)
}

/// Full-precision attention restricted to the sliding-tile window.
#[pyfunction]
#[pyo3(signature = (q, k, v, tile_map, window, softmax_scale=None))]
fn sparse_reference(
    q: Vec<Vec<f32>>,
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    tile_map: &PyTileMap,
    window: Triple,
    softmax_scale: Option<f32>,
) -> PyResult<Vec<Vec<f32>>> {
    let inputs = inputs(q, k, v, tile_map)?;
    let scale = scale_or_default(softmax_scale, inputs.d_model());
    let mask = build_block_mask(WindowSpec::from(triple(window)), inputs.map().tile_grid_dims).map_err(value_error)?;
    let out = attention::sparse_reference(&inputs, &mask, scale).map_err(value_error)?;
    grid_order_rows(&out, &inputs)
}

/// Quantized sparse attention.
#[pyfunction]
#[pyo3(signature = (q, k, v, tile_map, window, format="e4m3", passthrough=false, qk_granularity="per_tile_3d", softmax_scale=None))]
#[allow(clippy::too_many_arguments)]
fn fps_forward(
    q: Vec<Vec<f32>>,
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    tile_map: &PyTileMap,
    window: Triple,
    format: &str,
    passthrough: bool,
    qk_granularity: &str,
    softmax_scale: Option<f32>,
) -> PyResult<Vec<Vec<f32>>> {
    let inputs = inputs(q, k, v, tile_map)?;
    let mut config = FpsConfig::new(parse_kind(format)?.format(), WindowSpec::from(triple(window)), inputs.d_model());
    config.softmax_scale = scale_or_default(softmax_scale, inputs.d_model());
    config.passthrough = passthrough;
    config.qk_granularity = parse_granularity(qk_granularity)?;
    let out = attention::fps_forward(&inputs, &config).map_err(value_error)?;
    grid_order_rows(&out, &inputs)
}

fn row_dict<'py>(py: Python<'py>, row: &MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let m = &row.metrics;
    d.set_item("step", row.step)?;
    d.set_item("regime", &row.regime)?;
    d.set_item("tile", untriple(row.params.tile.dims()))?;
    d.set_item("window", untriple(row.params.window.extents()))?;
    d.set_item("density", m.density)?;
    d.set_item("flops_dense", m.flops_dense)?;
    d.set_item("flops_sparse", m.flops_sparse)?;
    d.set_item("cosine_sim", m.cosine_sim)?;
    d.set_item("mse", m.mse)?;
    d.set_item("snr_db", m.snr_db)?;
    Ok(d)
}

fn checked_run(config: &PyConfig) -> PyResult<Vec<MetricsRow>> {
    let problems = config.inner.problems();
    if !problems.is_empty() {
        return Err(value_error(problems.join("; ")));
    }
    experiment::run_experiment(&config.inner).map_err(value_error)
}

/// One dict per denoising step.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = py.detach(|| checked_run(config))?;
    rows.iter().map(|r| row_dict(py, r)).collect()
}

/// The same run as `run_experiment`, rendered as CSV text.
#[pyfunction]
fn run_experiment_csv(py: Python<'_>, config: &PyConfig) -> PyResult<String> {
    let rows = py.detach(|| checked_run(config))?;
    Ok(experiment::to_csv(&rows))
}

#[pymodule]
#[pyo3(name = "fpsattn")]
fn fpsattn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTileMap>()?;
    m.add_class::<PyBlockMask>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(compute_scale, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_dequantize, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(snr_db, m)?)?;
    m.add_function(wrap_pyfunction!(flops_dense, m)?)?;
    m.add_function(wrap_pyfunction!(flops_sparse, m)?)?;
    m.add_function(wrap_pyfunction!(dense_reference, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_reference, m)?)?;
    m.add_function(wrap_pyfunction!(fps_forward, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment_csv, m)?)?;
    m.add("CSV_HEADER", experiment::CSV_HEADER)?;
    Ok(())
}
