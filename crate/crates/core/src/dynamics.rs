//! Shared PCA projection and per-trajectory autoregressive models.
//!
//! Observed positions `r_t` (3D) are centred on the pooled corpus mean and
//! projected onto the top principal directions `C` to give latent states
//! `h_t = C^T (r_t - mean)`. Each latent trajectory is then fitted with
//! `h_t = B_1 h_{t-1} + ... + B_d h_{t-d} + v_t` by one least-squares solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tracking::TrajectoryCorpus;

pub const DEFAULT_ORDER: usize = 5;
pub const DEFAULT_LATENT_DIM: usize = 2;

/// Orthonormal `p x n` projection with its centring vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    pub c: DMatrix<f64>,
    pub mean: DVector<f64>,
}

impl ProjectionMatrix {
    pub fn observed_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.c.ncols()
    }

    /// `C h + mean`.
    pub fn reconstruct(&self, h: &DVector<f64>) -> DVector<f64> {
        &self.c * h + &self.mean
    }

    pub fn to_record(&self) -> ProjectionRecord {
        ProjectionRecord {
            p: self.c.nrows(),
            n: self.c.ncols(),
            c: row_major(&self.c),
            mean: self.mean.iter().copied().collect(),
        }
    }

    pub fn from_record(r: &ProjectionRecord) -> Result<Self> {
        if r.c.len() != r.p * r.n || r.mean.len() != r.p {
            return Err(Error::Invalid(
                "projection record has inconsistent shapes".into(),
            ));
        }
        Ok(ProjectionMatrix {
            c: DMatrix::from_row_slice(r.p, r.n, &r.c),
            mean: DVector::from_column_slice(&r.mean),
        })
    }
}

/// JSON form of [`ProjectionMatrix`]; `c` is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRecord {
    pub p: usize,
    pub n: usize,
    pub c: Vec<f64>,
    pub mean: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

/// Latent states as an `n x L` matrix (column `t` is `h_t`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub h: DMatrix<f64>,
}

impl LatentTrajectory {
    pub fn new(h: DMatrix<f64>) -> Self {
        LatentTrajectory { h }
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn len(&self) -> usize {
        self.h.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.h.ncols() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ARModel {
    /// `B_1 .. B_d`, each `n x n`.
    pub b: Vec<DMatrix<f64>>,
    pub residual_rms: f64,
    /// Sum of squared residual norms over the fitted rows.
    pub residual_ss: f64,
    pub trajectory_id: usize,
}

impl ARModel {
    pub fn order(&self) -> usize {
        self.b.len()
    }

    pub fn dim(&self) -> usize {
        self.b.first().map_or(0, |m| m.nrows())
    }

    /// All `B_i` entries, each matrix row-major, concatenated (`d * n * n` values).
    pub fn flattened(&self) -> Vec<f64> {
        self.b.iter().flat_map(row_major).collect()
    }

    pub fn to_record(&self) -> ARModelRecord {
        ARModelRecord {
            trajectory_id: self.trajectory_id,
            d: self.order(),
            n: self.dim(),
            b: self.b.iter().map(row_major).collect(),
            residual_rms: self.residual_rms,
            residual_ss: self.residual_ss,
        }
    }

    pub fn from_record(r: &ARModelRecord) -> Result<Self> {
        if r.b.len() != r.d || r.b.iter().any(|m| m.len() != r.n * r.n) {
            return Err(Error::Invalid(format!(
                "model {} does not hold {} matrices of {}x{}",
                r.trajectory_id, r.d, r.n, r.n
            )));
        }
        Ok(ARModel {
            b: r.b
                .iter()
                .map(|m| DMatrix::from_row_slice(r.n, r.n, m))
                .collect(),
            residual_rms: r.residual_rms,
            residual_ss: r.residual_ss,
            trajectory_id: r.trajectory_id,
        })
    }
}

/// JSON form of [`ARModel`]; every `B_i` is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ARModelRecord {
    pub trajectory_id: usize,
    pub d: usize,
    pub n: usize,
    pub b: Vec<Vec<f64>>,
    pub residual_rms: f64,
    #[serde(default)]
    pub residual_ss: f64,
}

/// First-order lifting `x_{t+1} = A x_t`, `y_t = C_s x_t` of an AR model.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub id: usize,
}

impl StateSpace {
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>, id: usize) -> Result<Self> {
        if !a.is_square() || c.ncols() != a.nrows() {
            return Err(Error::Invalid(format!(
                "state space needs square A and C with matching columns: A {}x{}, C {}x{}",
                a.nrows(),
                a.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        Ok(StateSpace { a, c, id })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }
}

/// PCA over all pooled positions; columns are the top-`n` right singular
/// vectors of the centred data, each signed so its largest-magnitude entry is positive.
pub fn fit_projection(corpus: &TrajectoryCorpus, n: usize) -> Result<ProjectionMatrix> {
    let (m, l) = (corpus.len(), corpus.length);
    if m == 0 || l < 2 {
        return Err(Error::Invalid(format!(
            "projection needs at least one trajectory of 2+ frames (m={m}, L={l})"
        )));
    }
    if n == 0 || n > 3 {
        return Err(Error::Config(format!(
            "latent dim must be in 1..=3, got {n}"
        )));
    }
    let count = (m * l) as f64;
    let mut mean = DVector::zeros(3);
    for i in 0..m {
        for t in 0..l {
            let r = corpus.position(i, t);
            for k in 0..3 {
                mean[k] += r[k];
            }
        }
    }
    mean /= count;

    let mut data = DMatrix::zeros(m * l, 3);
    for i in 0..m {
        for t in 0..l {
            let r = corpus.position(i, t);
            for k in 0..3 {
                data[(i * l + t, k)] = r[k] - mean[k];
            }
        }
    }
    let svd = data.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let top = svd.singular_values[order[0]];
    let tol = top * (m * l).max(3) as f64 * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < n {
        return Err(Error::DegenerateCovariance { rank, required: n });
    }

    let mut c = DMatrix::zeros(3, n);
    for (col, &idx) in order.iter().take(n).enumerate() {
        let mut v: Vec<f64> = v_t.row(idx).iter().copied().collect();
        let pivot = (0..3)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .unwrap();
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for k in 0..3 {
            c[(k, col)] = v[k] / norm;
        }
    }
    Ok(ProjectionMatrix { c, mean })
}

/// `h_t = C^T (r_t - mean)` for every frame of one path.
pub fn project(path: &[[f64; 3]], projection: &ProjectionMatrix) -> LatentTrajectory {
    let n = projection.latent_dim();
    let mut h = DMatrix::zeros(n, path.len());
    for (t, r) in path.iter().enumerate() {
        let centred = DVector::from_fn(3, |k, _| r[k] - projection.mean[k]);
        h.set_column(t, &(projection.c.transpose() * centred));
    }
    LatentTrajectory { h }
}

/// Minimum number of frames for a determined AR(`order`) fit in `dim` dimensions.
pub fn min_frames(order: usize, dim: usize) -> usize {
    order + dim * order + 1
}

/// Joint least-squares fit of `[B_1 .. B_d]`; minimum-norm on rank deficiency.
pub fn fit_ar(latent: &LatentTrajectory, order: usize, trajectory_id: usize) -> Result<ARModel> {
    let (n, l) = (latent.dim(), latent.len());
    if order == 0 || n == 0 {
        return Err(Error::Config("AR order and latent dim must be >= 1".into()));
    }
    let needed = min_frames(order, n);
    if l < needed {
        return Err(Error::TooShort {
            len: l,
            needed,
            order,
            dim: n,
        });
    }
    let rows = l - order;
    let q = n * order;
    let mut regressors = DMatrix::zeros(rows, q);
    let mut targets = DMatrix::zeros(rows, n);
    for (row, t) in (order..l).enumerate() {
        for lag in 1..=order {
            for k in 0..n {
                regressors[(row, (lag - 1) * n + k)] = latent.h[(k, t - lag)];
            }
        }
        for k in 0..n {
            targets[(row, k)] = latent.h[(k, t)];
        }
    }

    let svd = regressors.clone().svd(true, true);
    let top = svd.singular_values.max();
    let eps = top * rows.max(q) as f64 * f64::EPSILON;
    let weights = svd
        .solve(&targets, eps)
        .map_err(|e| Error::Invalid(format!("least-squares solve failed: {e}")))?;

    // weights block `lag` holds B_lag^T
    let b: Vec<DMatrix<f64>> = (0..order)
        .map(|lag| weights.rows(lag * n, n).transpose())
        .collect();
    let residual = &targets - &regressors * &weights;
    let residual_ss = residual.norm_squared();
    Ok(ARModel {
        b,
        residual_rms: (residual_ss / rows as f64).sqrt(),
        residual_ss,
        trajectory_id,
    })
}

/// Companion matrix `[[B_1 .. B_d], [I 0 ..], [0 I 0 ..], ..]` with output `[C | 0]`.
pub fn companion_form(model: &ARModel, projection: &ProjectionMatrix) -> Result<StateSpace> {
    let (d, n) = (model.order(), model.dim());
    if n != projection.latent_dim() {
        return Err(Error::Invalid(format!(
            "model latent dim {n} does not match projection latent dim {}",
            projection.latent_dim()
        )));
    }
    let q = n * d;
    let mut a = DMatrix::zeros(q, q);
    for (i, b) in model.b.iter().enumerate() {
        a.view_mut((0, i * n), (n, n)).copy_from(b);
    }
    for i in 1..d {
        a.view_mut((i * n, (i - 1) * n), (n, n))
            .copy_from(&DMatrix::identity(n, n));
    }
    let mut c = DMatrix::zeros(projection.observed_dim(), q);
    c.view_mut((0, 0), (projection.observed_dim(), n))
        .copy_from(&projection.c);
    StateSpace::new(a, c, model.trajectory_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_from(rows: Vec<Vec<[f64; 3]>>) -> TrajectoryCorpus {
        let ids = (0..rows.len()).collect();
        TrajectoryCorpus::from_rows(ids, &rows).unwrap()
    }

    #[test]
    fn planar_corpus_reconstructs_exactly() {
        let rows: Vec<Vec<[f64; 3]>> = (0..4)
            .map(|i| {
                (0..20)
                    .map(|t| {
                        let a = 0.3 * t as f64 + i as f64;
                        [10.0 + 5.0 * a.cos() + i as f64, 20.0 + 3.0 * a.sin(), 7.0]
                    })
                    .collect()
            })
            .collect();
        let corpus = corpus_from(rows.clone());
        let proj = fit_projection(&corpus, 2).unwrap();
        let gram = proj.c.transpose() * &proj.c;
        assert!((gram - DMatrix::identity(2, 2)).abs().max() < 1e-10);
        for row in &rows {
            let h = project(row, &proj);
            for (t, r) in row.iter().enumerate() {
                let back = proj.reconstruct(&h.h.column(t).into_owned());
                for k in 0..3 {
                    assert!((back[k] - r[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn collinear_corpus_is_rank_deficient() {
        let rows = vec![(0..10).map(|t| [t as f64, 2.0 * t as f64, 1.0]).collect()];
        let err = fit_projection(&corpus_from(rows), 2).unwrap_err();
        assert!(
            matches!(
                err,
                Error::DegenerateCovariance {
                    rank: 1,
                    required: 2
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn positions_at_mean_project_to_zero() {
        let proj = ProjectionMatrix {
            c: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            mean: DVector::from_column_slice(&[1.0, 2.0, 3.0]),
        };
        let h = project(&vec![[1.0, 2.0, 3.0]; 5], &proj);
        assert!(h.h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_trajectory_gives_zero_model() {
        let m = fit_ar(&LatentTrajectory::new(DMatrix::zeros(2, 61)), 5, 0).unwrap();
        assert!(m.b.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert_eq!(m.residual_rms, 0.0);
    }

    #[test]
    fn geometric_sequence_recovers_half() {
        let h = DMatrix::from_fn(1, 30, |_, t| 0.5f64.powi(t as i32));
        let m = fit_ar(&LatentTrajectory::new(h), 1, 0).unwrap();
        assert!((m.b[0][(0, 0)] - 0.5).abs() < 1e-12);
        assert!(m.residual_rms < 1e-12);
    }

    #[test]
    fn short_trajectory_is_rejected() {
        let err = fit_ar(&LatentTrajectory::new(DMatrix::zeros(2, 15)), 5, 0).unwrap_err();
        assert!(matches!(err, Error::TooShort { needed: 16, .. }), "{err}");
    }

    #[test]
    fn negated_trajectory_gives_same_model() {
        let h = DMatrix::from_fn(2, 40, |k, t| {
            ((t * (k + 2)) as f64 * 0.37).sin() + 0.1 * k as f64
        });
        let a = fit_ar(&LatentTrajectory::new(h.clone()), 3, 0).unwrap();
        let b = fit_ar(&LatentTrajectory::new(-h), 3, 0).unwrap();
        for (x, y) in a.b.iter().zip(&b.b) {
            assert!((x - y).abs().max() < 1e-12);
        }
    }

    #[test]
    fn companion_of_order_one_is_b1() {
        let model = ARModel {
            b: vec![DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4])],
            residual_rms: 0.0,
            residual_ss: 0.0,
            trajectory_id: 3,
        };
        let proj = ProjectionMatrix {
            c: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            mean: DVector::zeros(3),
        };
        let ss = companion_form(&model, &proj).unwrap();
        assert_eq!(ss.a, model.b[0]);
        assert_eq!(ss.c, proj.c);
        assert_eq!(ss.id, 3);
    }

    #[test]
    fn model_record_round_trip() {
        let model = ARModel {
            b: vec![
                DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]),
                DMatrix::from_row_slice(2, 2, &[-0.5, 0.6, 0.7, -0.8]),
            ],
            residual_rms: 0.25,
            residual_ss: 1.5,
            trajectory_id: 9,
        };
        let rec = model.to_record();
        assert_eq!(rec.b[0], vec![0.1, 0.2, 0.3, 0.4]);
        let json = serde_json::to_string(&rec).unwrap();
        let back: ARModelRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(ARModel::from_record(&back).unwrap(), model);
        assert_eq!(model.flattened().len(), 8);
    }
}
