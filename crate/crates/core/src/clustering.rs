//! Spectral clustering on a precomputed affinity matrix.
//!
//! Uses the symmetric normalized Laplacian `L = I - D^-1/2 S D^-1/2`. The
//! eigenvectors of its `k` smallest eigenvalues (the `k` largest of the
//! normalized affinity) are row-normalized and clustered with k-means.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::AffinityMatrix;

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// `m x k`, rows normalized to unit length (zero rows stay zero).
    pub u: DMatrix<f64>,
    /// Full Laplacian spectrum, ascending.
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    /// `k` rows of embedding coordinates.
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    pub k: usize,
}

/// `I - D^-1/2 S D^-1/2`.
pub fn normalized_laplacian(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = s.nrows();
    let inv_sqrt: Vec<f64> = (0..m)
        .map(|i| {
            let degree: f64 = s.row(i).sum();
            if degree > 0.0 {
                Ok(1.0 / degree.sqrt())
            } else {
                Err(Error::ZeroDegree(i))
            }
        })
        .collect::<Result<_>>()?;
    let mut l = DMatrix::from_fn(m, m, |i, j| -s[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
    for i in 0..m {
        l[(i, i)] += 1.0;
    }
    // exact symmetry keeps the eigensolver on its symmetric path
    Ok((&l + l.transpose()) * 0.5)
}

fn sorted_eigen(l: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = l.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .total_cmp(&eig.eigenvalues[b])
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// Ascending eigenvalues of the normalized Laplacian of `s`.
pub fn laplacian_spectrum(s: &AffinityMatrix) -> Result<Vec<f64>> {
    Ok(sorted_eigen(normalized_laplacian(&s.s)?).0)
}

pub fn spectral_embed(s: &AffinityMatrix, k: usize) -> Result<Embedding> {
    let m = s.len();
    if k == 0 || k > m {
        return Err(Error::TooManyClusters { k, m });
    }
    let (eigenvalues, vectors) = sorted_eigen(normalized_laplacian(&s.s)?);
    let mut u = vectors.columns(0, k).into_owned();
    for mut row in u.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    Ok(Embedding { u, eigenvalues })
}

/// Largest gap `lambda_{i+1} - lambda_i` for `1 <= i <= k_max` (1-based);
/// ties go to the smaller `i`.
pub fn eigengap_from_spectrum(eigenvalues: &[f64], k_max: usize) -> usize {
    let limit = k_max.min(eigenvalues.len().saturating_sub(1));
    let mut best = (1, f64::NEG_INFINITY);
    for i in 1..=limit {
        let gap = eigenvalues[i] - eigenvalues[i - 1];
        if gap > best.1 {
            best = (i, gap);
        }
    }
    best.0
}

pub fn eigengap_k(s: &AffinityMatrix, k_max: usize) -> Result<usize> {
    if k_max < 2 {
        return Err(Error::Config(format!("k_max must be >= 2, got {k_max}")));
    }
    Ok(eigengap_from_spectrum(&laplacian_spectrum(s)?, k_max))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let m = points.len();
    let mut centers = vec![points[rng.random_range(0..m)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        centers.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

/// One Lloyd run; returns (labels, centers, inertia history).
fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> (Vec<usize>, Vec<Vec<f64>>, Vec<f64>) {
    let (m, dim, k) = (points.len(), points[0].len(), centers.len());
    let mut labels = vec![0; m];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centers);
            labels[i] = c;
            inertia += d;
        }
        history.push(inertia);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centre
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if let [.., prev, last] = history[..] {
            if prev == 0.0 || (prev - last) / prev < KMEANS_TOL {
                break;
            }
        }
    }
    // final assignment against the final centres
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest(p, &centers);
        labels[i] = c;
        inertia += d;
    }
    history.push(inertia);
    (labels, centers, history)
}

/// Relabels clusters in order of first appearance.
fn canonical(labels: &[usize], centers: &[Vec<f64>]) -> (Vec<usize>, Vec<Vec<f64>>) {
    let k = centers.len();
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &l in labels {
        if map[l] == usize::MAX {
            map[l] = next;
            next += 1;
        }
    }
    for slot in map.iter_mut() {
        if *slot == usize::MAX {
            *slot = next;
            next += 1;
        }
    }
    let mut new_centers = vec![Vec::new(); k];
    for (old, &new) in map.iter().enumerate() {
        new_centers[new] = centers[old].clone();
    }
    (labels.iter().map(|&l| map[l]).collect(), new_centers)
}

/// k-means++ seeding with Lloyd refinement, best of [`KMEANS_RESTARTS`] by inertia.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64) -> Result<ClusterResult> {
    let m = points.nrows();
    if k == 0 || k > m {
        return Err(Error::TooManyClusters { k, m });
    }
    let rows: Vec<Vec<f64>> = points
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = plus_plus_init(&rows, k, &mut rng);
        let (labels, centers, history) = lloyd(&rows, init);
        let inertia = *history.last().unwrap();
        if best.as_ref().is_none_or(|b| inertia < b.2) {
            best = Some((labels, centers, inertia));
        }
    }
    let (labels, centers, inertia) = best.unwrap();
    let (labels, centers) = canonical(&labels, &centers);
    Ok(ClusterResult {
        labels,
        centers,
        inertia,
        k,
    })
}

/// Spectral embedding followed by k-means.
pub fn cluster_trajectories(s: &AffinityMatrix, k: usize, seed: u64) -> Result<ClusterResult> {
    let embedding = spectral_embed(s, k)?;
    kmeans(&embedding.u, k, seed)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let choose2 = |v: u64| (v * v.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().flatten().map(|&v| choose2(v)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = choose2(n as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
