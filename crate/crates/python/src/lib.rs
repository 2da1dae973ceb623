//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use motility::clustering;
use motility::config::{KChoice, PipelineConfig, Stage};
use motility::dynamics::{self, LatentTrajectory, StateSpace};
use motility::pipeline;
use motility::similarity::{self, DistanceMatrix};
use motility::tracking::{self, CostMatrix};
use motility::{Error, ErrorKind};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e.kind() {
        ErrorKind::Config | ErrorKind::Data => PyValueError::new_err(e.to_string()),
        ErrorKind::Io => PyOSError::new_err(e.to_string()),
        ErrorKind::Numerical => PyArithmeticError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Minimum-cost assignment; returns `(pairs, total_cost)`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let m = CostMatrix::from_rows(&cost).map_err(to_py)?;
    let a = tracking::hungarian(&m).map_err(to_py)?;
    Ok((a.pairs, a.total_cost))
}

/// Solves `A^T P A - P + Q = 0`.
#[pyfunction]
fn solve_discrete_lyapunov(a: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let p = similarity::solve_discrete_lyapunov(&matrix(&a)?, &matrix(&q)?).map_err(to_py)?;
    Ok(rows(&p))
}

#[pyclass(name = "ARModel", frozen)]
struct PyARModel {
    inner: dynamics::ARModel,
}

#[pymethods]
impl PyARModel {
    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn coefficients(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.b.iter().map(rows).collect()
    }

    #[getter]
    fn residual_rms(&self) -> f64 {
        self.inner.residual_rms
    }

    fn __repr__(&self) -> String {
        format!(
            "ARModel(order={}, dim={}, residual_rms={:.3e})",
            self.inner.order(),
            self.inner.dim(),
            self.inner.residual_rms
        )
    }
}

/// Least-squares AR fit of an `n x L` latent trajectory.
#[pyfunction]
#[pyo3(signature = (h, order=5))]
fn fit_ar(h: Vec<Vec<f64>>, order: usize) -> PyResult<PyARModel> {
    let latent = LatentTrajectory::new(matrix(&h)?);
    let inner = dynamics::fit_ar(&latent, order, 0).map_err(to_py)?;
    Ok(PyARModel { inner })
}

#[pyclass(name = "StateSpace", frozen)]
struct PyStateSpace {
    inner: StateSpace,
}

#[pymethods]
impl PyStateSpace {
    #[new]
    fn new(a: Vec<Vec<f64>>, c: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = StateSpace::new(matrix(&a)?, matrix(&c)?, 0).map_err(to_py)?;
        Ok(PyStateSpace { inner })
    }

    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.a)
    }

    #[getter]
    fn c(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.c)
    }

    /// Companion form of an AR model observed through `c` (3 x n).
    #[staticmethod]
    fn companion(model: &PyARModel, c: Vec<Vec<f64>>) -> PyResult<Self> {
        let projection = dynamics::ProjectionMatrix {
            c: matrix(&c)?,
            mean: nalgebra::DVector::zeros(c.len()),
        };
        let inner = dynamics::companion_form(&model.inner, &projection).map_err(to_py)?;
        Ok(PyStateSpace { inner })
    }

    fn spectral_radius(&self) -> f64 {
        similarity::spectral_radius(&self.inner.a)
    }

    fn martin_distance(&self, other: &PyStateSpace) -> PyResult<f64> {
        let d = similarity::martin_distance(&self.inner, &other.inner).map_err(to_py)?;
        Ok(d.distance)
    }
}

/// Symmetric matrix of Martin distances.
#[pyfunction]
#[pyo3(signature = (models, workers=0))]
fn pairwise_distances(
    py: Python<'_>,
    models: Vec<Py<PyStateSpace>>,
    workers: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let systems: Vec<StateSpace> = models.iter().map(|m| m.get().inner.clone()).collect();
    let d = py
        .detach(|| similarity::pairwise_matrix(&systems, workers, similarity::DEFAULT_TILE))
        .map_err(to_py)?;
    Ok(rows(&d.m))
}

/// Heat-kernel affinities; returns `(S, sigma)`.
#[pyfunction]
#[pyo3(signature = (distances, beta=1.0))]
fn heat_kernel(distances: Vec<Vec<f64>>, beta: f64) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let d = DistanceMatrix::from_matrix(matrix(&distances)?).map_err(to_py)?;
    let s = similarity::heat_kernel(&d, beta).map_err(to_py)?;
    Ok((rows(&s.s), s.sigma))
}

/// Spectral clustering of an affinity matrix; `k=None` picks k by eigengap.
/// Returns `(labels, k)`.
#[pyfunction]
#[pyo3(signature = (affinity, k=None, k_max=8, seed=0))]
fn spectral_cluster(
    affinity: Vec<Vec<f64>>,
    k: Option<usize>,
    k_max: usize,
    seed: u64,
) -> PyResult<(Vec<usize>, usize)> {
    let s = similarity::AffinityMatrix {
        s: matrix(&affinity)?,
        beta: 1.0,
        sigma: 1.0,
    };
    let k = match k {
        Some(k) => k,
        None => clustering::eigengap_k(&s, k_max).map_err(to_py)?,
    };
    let r = clustering::cluster_trajectories(&s, k, seed).map_err(to_py)?;
    Ok((r.labels, k))
}

#[pyfunction]
fn adjusted_rand_index(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("label vectors differ in length"));
    }
    Ok(clustering::adjusted_rand_index(&a, &b))
}

#[pyclass(name = "Config")]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (out="motility-out", seed=0, workers=0))]
    fn new(out: &str, seed: u64, workers: usize) -> Self {
        PyConfig {
            inner: PipelineConfig {
                out: PathBuf::from(out),
                seed,
                workers,
                ..PipelineConfig::default()
            },
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = PipelineConfig::from_toml_str(text).map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = PipelineConfig::load(&path).map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn stage_key(&self, stage: &str) -> PyResult<String> {
        let s = Stage::ALL
            .into_iter()
            .find(|s| s.as_str() == stage)
            .ok_or_else(|| PyValueError::new_err(format!("unknown stage {stage:?}")))?;
        Ok(self.inner.stage_key(s))
    }

    #[getter]
    fn get_out(&self) -> PathBuf {
        self.inner.out.clone()
    }

    #[setter]
    fn set_out(&mut self, out: PathBuf) {
        self.inner.out = out;
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
    fn get_workers(&self) -> usize {
        self.inner.workers
    }

    #[setter]
    fn set_workers(&mut self, workers: usize) {
        self.inner.workers = workers;
    }

    #[getter]
    fn get_beta(&self) -> f64 {
        self.inner.cluster.beta
    }

    #[setter]
    fn set_beta(&mut self, beta: f64) {
        self.inner.cluster.beta = beta;
    }

    /// `None` for eigengap selection.
    #[getter]
    fn get_k(&self) -> Option<usize> {
        match self.inner.cluster.k {
            KChoice::Auto => None,
            KChoice::Fixed(k) => Some(k),
        }
    }

    #[setter]
    fn set_k(&mut self, k: Option<usize>) {
        self.inner.cluster.k = k.map_or(KChoice::Auto, KChoice::Fixed);
    }

    #[getter]
    fn get_order(&self) -> usize {
        self.inner.model.order
    }

    #[setter]
    fn set_order(&mut self, order: usize) {
        self.inner.model.order = order;
    }

    #[getter]
    fn get_length(&self) -> usize {
        self.inner.track.target_length
    }

    /// Sets both the target and the minimum track length.
    #[setter]
    fn set_length(&mut self, length: usize) {
        self.inner.track.target_length = length;
        self.inner.track.min_length = length;
    }

    /// Synthetic video shape `[T, Z, H, W]`.
    #[getter]
    fn get_synth_dims(&self) -> [usize; 4] {
        self.inner.synth.dims
    }

    #[setter]
    fn set_synth_dims(&mut self, dims: [usize; 4]) {
        self.inner.synth.dims = dims;
    }

    /// Cells per phenotype in the synthetic video.
    #[setter]
    fn set_cells_per_phenotype(&mut self, n: usize) {
        self.inner.synth.helical = n;
        self.inner.synth.erratic_semicircular = n;
        self.inner.synth.corkscrew_linear = n;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(out={:?}, seed={}, hash={})",
            self.inner.out,
            self.inner.seed,
            &self.inner.hash()[..12]
        )
    }
}

#[pyclass(name = "ClusterRun", frozen, get_all)]
struct PyClusterRun {
    trajectory_ids: Vec<usize>,
    labels: Vec<usize>,
    k: usize,
    inertia: f64,
    sigma: f64,
    eigenvalues: Vec<f64>,
    ari: Option<f64>,
    distances: Vec<Vec<f64>>,
}

impl From<pipeline::ClusterOutput> for PyClusterRun {
    fn from(o: pipeline::ClusterOutput) -> Self {
        PyClusterRun {
            distances: rows(&o.distances.m),
            trajectory_ids: o.trajectory_ids,
            labels: o.result.labels,
            k: o.summary.k,
            inertia: o.summary.inertia,
            sigma: o.summary.sigma,
            eigenvalues: o.summary.eigenvalues_head,
            ari: o.summary.ari,
        }
    }
}

#[pymethods]
impl PyClusterRun {
    fn __repr__(&self) -> String {
        format!(
            "ClusterRun(m={}, k={}, ari={:?})",
            self.labels.len(),
            self.k,
            self.ari
        )
    }
}

/// Writes the synthetic video and ground truth; returns the number of cells.
#[pyfunction]
fn synth(py: Python<'_>, config: &PyConfig) -> PyResult<usize> {
    let cfg = config.inner.clone();
    let (_, truth) = py.detach(|| pipeline::cmd_synth(&cfg)).map_err(to_py)?;
    Ok(truth.trajectories.len())
}

/// Detects and links; returns the corpus as `(ids, paths)` with paths `[t][xyz]`.
#[pyfunction]
fn track(py: Python<'_>, config: &PyConfig) -> PyResult<(Vec<usize>, Vec<Vec<[f64; 3]>>)> {
    let cfg = config.inner.clone();
    let out = py.detach(|| pipeline::cmd_track(&cfg)).map_err(to_py)?;
    let paths = (0..out.corpus.len()).map(|i| out.corpus.row(i)).collect();
    Ok((out.corpus.track_ids, paths))
}

#[pyfunction]
fn featurize(py: Python<'_>, config: &PyConfig) -> PyResult<Vec<PyARModel>> {
    let cfg = config.inner.clone();
    let f = py.detach(|| pipeline::cmd_featurize(&cfg)).map_err(to_py)?;
    Ok(f.models
        .into_iter()
        .map(|inner| PyARModel { inner })
        .collect())
}

#[pyfunction]
fn cluster(py: Python<'_>, config: &PyConfig) -> PyResult<PyClusterRun> {
    let cfg = config.inner.clone();
    let out = py.detach(|| pipeline::cmd_cluster(&cfg)).map_err(to_py)?;
    Ok(out.into())
}

/// Runs every stage, writing artifacts under `config.out`.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config: &PyConfig) -> PyResult<PyClusterRun> {
    let cfg = config.inner.clone();
    let out = py.detach(|| pipeline::cmd_pipeline(&cfg)).map_err(to_py)?;
    Ok(out.into())
}

#[pymodule]
fn motility_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyARModel>()?;
    m.add_class::<PyStateSpace>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyClusterRun>()?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(solve_discrete_lyapunov, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ar, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_distances, m)?)?;
    m.add_function(wrap_pyfunction!(heat_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_cluster, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(track, m)?)?;
    m.add_function(wrap_pyfunction!(featurize, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
