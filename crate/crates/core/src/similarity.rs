//! Martin distance between linear dynamical systems and the heat-kernel affinity.
//!
//! For two systems `(A_1, C_1)` and `(A_2, C_2)` the joint observability
//! Gramian `P` solves `A^T P A - P = -C^T C` with `A = diag(A_1, A_2)` and
//! `C = [C_1 C_2]`. The squared cosines of the subspace angles are the
//! eigenvalues of `P11^-1 P12 P22^-1 P21`, and
//! `d_M^2 = -sum_k ln cos^2(theta_k)`.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::StateSpace;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tracking::{write_matrix_csv, write_text};
use crate::volume::write_container;

/// Lower clamp applied to `cos^2(theta)` before taking logs.
pub const COS2_FLOOR: f64 = 1e-12;
/// Margin used when rescaling an unstable system: `A / (rho + STABILITY_MARGIN)`.
pub const STABILITY_MARGIN: f64 = 1e-6;
/// In-op bound on the relative Gramian residual.
pub const RESIDUAL_BOUND: f64 = 1e-8;
/// Largest accepted condition number of a diagonal Gramian block.
pub const MAX_BLOCK_CONDITION: f64 = 1e15;

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Solves the Stein equation `A1^T X A2 - X = -Q` through its Kronecker form
/// with one step of iterative refinement.
pub fn solve_stein(a1: &DMatrix<f64>, a2: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (r, c) = (a1.nrows(), a2.nrows());
    if !a1.is_square() || !a2.is_square() || q.shape() != (r, c) {
        return Err(Error::Invalid(format!(
            "Stein shapes: A1 {:?}, A2 {:?}, Q {:?}",
            a1.shape(),
            a2.shape(),
            q.shape()
        )));
    }
    // column-major vec: vec(A1^T X A2) = (A2^T kron A1^T) vec(X)
    let mut k = a2.transpose().kronecker(&a1.transpose());
    for i in 0..r * c {
        k[(i, i)] -= 1.0;
    }
    let rhs = -nalgebra::DVector::from_column_slice(q.as_slice());
    let lu = k.clone().lu();
    let mut x = lu.solve(&rhs).ok_or_else(|| Error::Unstable {
        radius: spectral_radius(a1).max(spectral_radius(a2)),
    })?;
    let correction = lu
        .solve(&(&rhs - &k * &x))
        .unwrap_or_else(|| x.clone() * 0.0);
    x += correction;
    Ok(DMatrix::from_column_slice(r, c, x.as_slice()))
}

fn relative_residual(a: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    let r = a.transpose() * p * a - p + q;
    let scale = q.norm();
    if scale == 0.0 {
        r.norm()
    } else {
        r.norm() / scale
    }
}

/// Solves `A^T P A - P = -Q` for a Schur-stable `A`.
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Invalid(format!(
            "A must be square, got {:?}",
            a.shape()
        )));
    }
    let radius = spectral_radius(a);
    if radius >= 1.0 {
        return Err(Error::Unstable { radius });
    }
    let mut p = solve_stein(a, a, q)?;
    if (q - q.transpose()).abs().max() == 0.0 {
        p = (&p + p.transpose()) * 0.5;
    }
    let residual = relative_residual(a, &p, q);
    if residual > RESIDUAL_BOUND {
        return Err(Error::LyapunovResidual {
            residual,
            bound: RESIDUAL_BOUND,
        });
    }
    Ok(p)
}

/// Block-diagonal dynamics and stacked outputs of two systems.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSystem {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q1: usize,
}

impl JointSystem {
    pub fn new(first: &StateSpace, second: &StateSpace) -> Result<Self> {
        if first.output_dim() != second.output_dim() {
            return Err(Error::Invalid(format!(
                "output dims differ: {} vs {}",
                first.output_dim(),
                second.output_dim()
            )));
        }
        let (q1, q2) = (first.state_dim(), second.state_dim());
        let mut a = DMatrix::zeros(q1 + q2, q1 + q2);
        a.view_mut((0, 0), (q1, q1)).copy_from(&first.a);
        a.view_mut((q1, q1), (q2, q2)).copy_from(&second.a);
        let mut c = DMatrix::zeros(first.output_dim(), q1 + q2);
        c.view_mut((0, 0), (first.output_dim(), q1))
            .copy_from(&first.c);
        c.view_mut((0, q1), (first.output_dim(), q2))
            .copy_from(&second.c);
        Ok(JointSystem { a, c, q1 })
    }
}

/// Joint Gramian with its `2 x 2` block split.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSolution {
    pub p: DMatrix<f64>,
    pub q1: usize,
}

impl LyapunovSolution {
    pub fn p11(&self) -> DMatrix<f64> {
        self.p.view((0, 0), (self.q1, self.q1)).into_owned()
    }

    pub fn p12(&self) -> DMatrix<f64> {
        let q2 = self.p.nrows() - self.q1;
        self.p.view((0, self.q1), (self.q1, q2)).into_owned()
    }

    pub fn p21(&self) -> DMatrix<f64> {
        let q2 = self.p.nrows() - self.q1;
        self.p.view((self.q1, 0), (q2, self.q1)).into_owned()
    }

    pub fn p22(&self) -> DMatrix<f64> {
        let q2 = self.p.nrows() - self.q1;
        self.p.view((self.q1, self.q1), (q2, q2)).into_owned()
    }
}

/// Gramian of a joint system, solved block by block: block `(i, j)` solves
/// `A_i^T P_ij A_j - P_ij = -C_i^T C_j`, and `P21 = P12^T`.
pub fn joint_gramian(first: &StateSpace, second: &StateSpace) -> Result<LyapunovSolution> {
    let joint = JointSystem::new(first, second)?;
    for s in [first, second] {
        let radius = spectral_radius(&s.a);
        if radius >= 1.0 {
            return Err(Error::Unstable { radius });
        }
    }
    let c1t = first.c.transpose();
    let c2t = second.c.transpose();
    let p11 = symmetrize(solve_stein(&first.a, &first.a, &(&c1t * &first.c))?);
    let p22 = symmetrize(solve_stein(&second.a, &second.a, &(&c2t * &second.c))?);
    let p12 = solve_stein(&first.a, &second.a, &(&c1t * &second.c))?;

    let (q1, q2) = (first.state_dim(), second.state_dim());
    let mut p = DMatrix::zeros(q1 + q2, q1 + q2);
    p.view_mut((0, 0), (q1, q1)).copy_from(&p11);
    p.view_mut((q1, q1), (q2, q2)).copy_from(&p22);
    p.view_mut((0, q1), (q1, q2)).copy_from(&p12);
    p.view_mut((q1, 0), (q2, q1)).copy_from(&p12.transpose());

    let q = joint.c.transpose() * &joint.c;
    let residual = relative_residual(&joint.a, &p, &q);
    if residual > RESIDUAL_BOUND {
        return Err(Error::LyapunovResidual {
            residual,
            bound: RESIDUAL_BOUND,
        });
    }
    Ok(LyapunovSolution { p, q1 })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngleSpectrum {
    /// `cos^2(theta_k)`, descending, clamped to `[COS2_FLOOR, 1]`.
    pub cos2: Vec<f64>,
    /// How many values the clamp changed.
    pub clamped: usize,
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Squared cosines of the subspace angles encoded in `P`.
///
/// Computed as the squared singular values of `L1^-1 P12 L2^-T` where
/// `P11 = L1 L1^T`, `P22 = L2 L2^T`; these equal the eigenvalues of
/// `P11^-1 P12 P22^-1 P21`.
pub fn subspace_angles(solution: &LyapunovSolution) -> Result<AngleSpectrum> {
    let (p11, p22) = (solution.p11(), solution.p22());
    let (c11, c22) = (condition(&p11), condition(&p22));
    let singular = || Error::SingularGramian {
        cond_11: c11,
        cond_22: c22,
    };
    if !(c11 <= MAX_BLOCK_CONDITION && c22 <= MAX_BLOCK_CONDITION) {
        return Err(singular());
    }
    let l1 = p11.cholesky().ok_or_else(singular)?.l();
    let l2 = p22.cholesky().ok_or_else(singular)?.l();
    // M = L1^-1 P12 L2^-T
    let left = l1
        .solve_lower_triangular(&solution.p12())
        .ok_or_else(singular)?;
    let m = l2
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(singular)?
        .transpose();
    let mut clamped = 0;
    let mut cos2: Vec<f64> = m
        .singular_values()
        .iter()
        .map(|s| {
            let v = s * s;
            let c = v.clamp(COS2_FLOOR, 1.0);
            if c != v {
                clamped += 1;
            }
            c
        })
        .collect();
    cos2.sort_by(|a, b| b.total_cmp(a));
    Ok(AngleSpectrum { cos2, clamped })
}

/// Rescales `A` to spectral radius below one when needed.
pub fn stabilize(system: &StateSpace) -> StateSpace {
    let radius = spectral_radius(&system.a);
    if radius >= 1.0 {
        StateSpace {
            a: &system.a / (radius + STABILITY_MARGIN),
            c: system.c.clone(),
            id: system.id,
        }
    } else {
        system.clone()
    }
}

fn lexical(a: &StateSpace, b: &StateSpace) -> Ordering {
    let by_entries = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
        x.shape().cmp(&y.shape()).then_with(|| {
            x.iter()
                .zip(y.iter())
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    };
    by_entries(&a.a, &b.a).then_with(|| by_entries(&a.c, &b.c))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MartinDistance {
    pub distance: f64,
    pub clamped: usize,
    pub angles: usize,
}

/// Martin distance between two systems, stabilizing either if needed.
///
/// The pair is put in a canonical order first, so `d(i, j)` and `d(j, i)`
/// are computed identically.
pub fn martin_distance(first: &StateSpace, second: &StateSpace) -> Result<MartinDistance> {
    let (x, y) = if lexical(first, second) == Ordering::Greater {
        (second, first)
    } else {
        (first, second)
    };
    let (x, y) = (stabilize(x), stabilize(y));
    let solution = joint_gramian(&x, &y)?;
    let spectrum = subspace_angles(&solution)?;
    let sum: f64 = spectrum.cos2.iter().map(|c| -c.ln()).sum();
    Ok(MartinDistance {
        distance: sum.max(0.0).sqrt(),
        clamped: spectrum.clamped,
        angles: spectrum.cos2.len(),
    })
}

/// Symmetric `m x m` Martin distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub m: DMatrix<f64>,
    pub clamped_angles: usize,
    pub total_angles: usize,
}

impl DistanceMatrix {
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Invalid("distance matrix must be square".into()));
        }
        Ok(DistanceMatrix {
            m,
            clamped_angles: 0,
            total_angles: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.m.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.m.nrows() == 0
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_square_csv(path, &self.m)
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        write_square_raw(path, &self.m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub s: DMatrix<f64>,
    pub beta: f64,
    pub sigma: f64,
}

impl AffinityMatrix {
    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.s.nrows() == 0
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_square_csv(path, &self.s)
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        write_square_raw(path, &self.s)
    }

    pub fn sidecar(&self) -> KernelSidecar {
        KernelSidecar {
            m: self.len(),
            beta: self.beta,
            sigma: self.sigma,
        }
    }
}

/// Reproducibility record written next to the kernel exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSidecar {
    pub m: usize,
    pub beta: f64,
    pub sigma: f64,
}

impl KernelSidecar {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &serde_json::to_string_pretty(self)?)
    }
}

fn write_square_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    write_matrix_csv(path, &rows)
}

fn write_square_raw(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let data: Vec<f32> = m.transpose().iter().map(|&v| v as f32).collect();
    write_container(path, [1, 1, m.nrows(), m.ncols()], &data)
}

/// Population standard deviation of the off-diagonal entries.
pub fn off_diagonal_std(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n < 2 {
        return 0.0;
    }
    let values: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)])
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}

/// `S_ij = exp(-beta * M_ij / sigma)`; all ones when `sigma = 0`.
pub fn heat_kernel(distances: &DistanceMatrix, beta: f64) -> Result<AffinityMatrix> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be > 0, got {beta}")));
    }
    let sigma = off_diagonal_std(&distances.m);
    let s = if sigma == 0.0 {
        DMatrix::from_element(distances.len(), distances.len(), 1.0)
    } else {
        distances.m.map(|d| (-beta * d / sigma).exp())
    };
    Ok(AffinityMatrix { s, beta, sigma })
}

/// Default number of pairs per task tile.
pub const DEFAULT_TILE: usize = 64;

/// All pairwise Martin distances; identical for every worker count.
pub fn pairwise_matrix(
    models: &[StateSpace],
    workers: usize,
    tile: usize,
) -> Result<DistanceMatrix> {
    let m = models.len();
    if m < 2 {
        return Err(Error::Invalid(format!(
            "pairwise distances need at least 2 models, got {m}"
        )));
    }
    let plan = parallel::plan_pairs(m, tile);
    let tiles = parallel::run(
        &plan,
        |chunk, _| {
            plan.pairs(chunk)
                .into_iter()
                .map(|(i, j)| {
                    martin_distance(&models[i], &models[j])
                        .map(|d| (i, j, d))
                        .map_err(|e| Error::Pair {
                            i: models[i].id,
                            j: models[j].id,
                            source: Box::new(e),
                        })
                })
                .collect::<Result<Vec<_>>>()
        },
        workers,
    )
    .map_err(|e| match e {
        Error::Task { source, .. } => *source,
        other => other,
    })?;

    let mut out = DMatrix::zeros(m, m);
    let (mut clamped, mut total) = (0, 0);
    for (i, j, d) in tiles.into_iter().flatten() {
        out[(i, j)] = d.distance;
        out[(j, i)] = d.distance;
        clamped += d.clamped;
        total += d.angles;
    }
    Ok(DistanceMatrix {
        m: out,
        clamped_angles: clamped,
        total_angles: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, id: usize) -> StateSpace {
        StateSpace::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            id,
        )
        .unwrap()
    }

    #[test]
    fn zero_dynamics_gives_q() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = solve_discrete_lyapunov(&DMatrix::zeros(2, 2), &q).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn scalar_geometric_series() {
        let p = solve_discrete_lyapunov(
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn unstable_system_is_rejected() {
        let err =
            solve_discrete_lyapunov(&DMatrix::from_element(1, 1, 1.2), &DMatrix::identity(1, 1))
                .unwrap_err();
        assert!(matches!(err, Error::Unstable { .. }));
    }

    #[test]
    fn self_comparison_gives_unit_cosines() {
        let s = StateSpace::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.3]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 1.0]),
            0,
        )
        .unwrap();
        let sol = joint_gramian(&s, &s).unwrap();
        let spec = subspace_angles(&sol).unwrap();
        assert!(spec.cos2.iter().all(|c| (c - 1.0).abs() < 1e-9));
    }

    #[test]
    fn orthogonal_blocks_clamp_to_floor() {
        let mut p = DMatrix::identity(4, 4);
        p[(0, 0)] = 2.0;
        let sol = LyapunovSolution { p, q1: 2 };
        let spec = subspace_angles(&sol).unwrap();
        assert_eq!(spec.cos2, vec![COS2_FLOOR; 2]);
        assert_eq!(spec.clamped, 2);
    }

    #[test]
    fn singular_block_reports_condition() {
        let mut p = DMatrix::identity(4, 4);
        p[(1, 1)] = 0.0;
        let err = subspace_angles(&LyapunovSolution { p, q1: 2 }).unwrap_err();
        assert!(matches!(err, Error::SingularGramian { .. }), "{err}");
    }

    #[test]
    fn scalar_martin_matches_closed_form() {
        let (a1, a2) = (0.3f64, 0.8f64);
        let cos2 = (1.0 / (1.0 - a1 * a2)).powi(2) * (1.0 - a1 * a1) * (1.0 - a2 * a2);
        let d = martin_distance(&scalar(a1, 0), &scalar(a2, 1)).unwrap();
        assert!((d.distance - (-cos2.ln()).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unstable_models_are_rescaled() {
        let d = martin_distance(&scalar(1.5, 0), &scalar(0.5, 1)).unwrap();
        assert!(d.distance.is_finite() && d.distance > 0.0);
    }

    #[test]
    fn heat_kernel_zero_distances() {
        let m = DistanceMatrix::from_matrix(DMatrix::zeros(3, 3)).unwrap();
        let s = heat_kernel(&m, 1.0).unwrap();
        assert_eq!(s.sigma, 0.0);
        assert!(s.s.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn heat_kernel_entry_at_sigma_over_beta() {
        // off-diagonal values {1, 3, 2} (each twice): mean 2, population std sqrt(2/3)
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 3.0, 1.0, 0.0, 2.0, 3.0, 2.0, 0.0]);
        let sigma = (2.0f64 / 3.0).sqrt();
        assert!((off_diagonal_std(&m) - sigma).abs() < 1e-15);
        // M_01 = 1 = sigma / beta
        let s = heat_kernel(&DistanceMatrix::from_matrix(m).unwrap(), sigma).unwrap();
        assert!((s.s[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((s.s[(0, 1)] - 0.3679).abs() < 1e-4);
        assert_eq!(s.s[(2, 2)], 1.0);
    }

    #[test]
    fn heat_kernel_rejects_nonpositive_beta() {
        let m = DistanceMatrix::from_matrix(DMatrix::zeros(2, 2)).unwrap();
        assert!(heat_kernel(&m, 0.0).is_err());
    }

    #[test]
    fn pairwise_of_two_matches_direct() {
        let models = vec![scalar(0.3, 0), scalar(0.8, 1)];
        let m = pairwise_matrix(&models, 1, DEFAULT_TILE).unwrap();
        let d = martin_distance(&models[0], &models[1]).unwrap().distance;
        assert_eq!(m.m[(0, 1)], d);
        assert_eq!(m.m[(1, 0)], d);
        assert_eq!(m.m[(0, 0)], 0.0);
    }

    #[test]
    fn pairwise_failure_names_pair() {
        let bad = StateSpace::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), 7).unwrap();
        let models = vec![scalar(0.3, 0), scalar(0.5, 1), bad];
        let err = pairwise_matrix(&models, 2, 1).unwrap_err();
        assert!(matches!(err, Error::Pair { i: 0, j: 7, .. }), "{err}");
    }
}
