//! Synthetic videos with analytic ground truth.
//!
//! Each cell follows one of three parametric path families and is rendered as
//! an isotropic Gaussian blob. Path parameters are drawn from fixed ranges:
//!
//! | phenotype              | path                                                                 |
//! |------------------------|----------------------------------------------------------------------|
//! | `helical`              | circle in x-y, radius 4-6, 0.25-0.35 rad/frame, linear z drift 0.08-0.12 voxel/frame |
//! | `erratic-semicircular` | half circle of radius 7-9 swept over the video, Gaussian jitter (0.35 voxel x-y, 0.15 z) |
//! | `corkscrew-linear`     | straight x-y line at 0.25-0.35 voxel/frame wrapped by a radius 1.5-2 helix at 0.9-1.1 rad/frame |
//!
//! Cell centres are placed uniformly at random such that every path keeps a
//! `3 * blob_sigma` margin from the volume faces and every pair of cells stays
//! at least `max(6 * blob_sigma, 8)` voxels apart in x-y at every frame.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dims4, Volume4D};
use crate::error::{Error, Result};

const PLACEMENT_ATTEMPTS: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phenotype {
    Helical,
    ErraticSemicircular,
    CorkscrewLinear,
}

impl Phenotype {
    pub const ALL: [Phenotype; 3] = [
        Phenotype::Helical,
        Phenotype::ErraticSemicircular,
        Phenotype::CorkscrewLinear,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phenotype::Helical => "helical",
            Phenotype::ErraticSemicircular => "erratic-semicircular",
            Phenotype::CorkscrewLinear => "corkscrew-linear",
        }
    }

    pub fn label(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for Phenotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phenotype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phenotype::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown phenotype {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// `[T, Z, H, W]`.
    pub dims: [usize; 4],
    pub helical: usize,
    pub erratic_semicircular: usize,
    pub corkscrew_linear: usize,
    pub blob_sigma: f64,
    pub peak: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dims: [61, 24, 128, 128],
            helical: 10,
            erratic_semicircular: 10,
            corkscrew_linear: 10,
            blob_sigma: 1.5,
            peak: 0.9,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn dims4(&self) -> Dims4 {
        Dims4::new(self.dims[0], self.dims[1], self.dims[2], self.dims[3])
    }

    fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Invalid(format!(
                "synth dims must be >= 1: {:?}",
                self.dims
            )));
        }
        if !(self.blob_sigma > 0.0) {
            return Err(Error::Invalid("blob_sigma must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.peak) {
            return Err(Error::Invalid("peak must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Invalid("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    fn counts(&self) -> [(Phenotype, usize); 3] {
        [
            (Phenotype::Helical, self.helical),
            (Phenotype::ErraticSemicircular, self.erratic_semicircular),
            (Phenotype::CorkscrewLinear, self.corkscrew_linear),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTrack {
    pub phenotype: Phenotype,
    /// `(t, x, y, z)` in voxel units, one per frame.
    pub points: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub trajectories: Vec<GroundTruthTrack>,
}

impl GroundTruth {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("trajectory_id,phenotype,t,x,y,z\n");
        for (id, tr) in self.trajectories.iter().enumerate() {
            for p in &tr.points {
                out.push_str(&format!(
                    "{id},{},{},{},{},{}\n",
                    tr.phenotype, p[0] as usize, p[1], p[2], p[3]
                ));
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut trajectories: Vec<GroundTruthTrack> = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad =
                || Error::Invalid(format!("{}:{}: malformed row", path.display(), lineno + 1));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(bad());
            }
            let id: usize = cols[0].parse().map_err(|_| bad())?;
            let phenotype: Phenotype = cols[1].parse()?;
            let mut p = [0.0; 4];
            for (k, v) in p.iter_mut().enumerate() {
                *v = cols[2 + k].parse().map_err(|_| bad())?;
            }
            if id == trajectories.len() {
                trajectories.push(GroundTruthTrack {
                    phenotype,
                    points: Vec::new(),
                });
            } else if id + 1 != trajectories.len() {
                return Err(bad());
            }
            trajectories[id].points.push(p);
        }
        Ok(GroundTruth { trajectories })
    }
}

/// Path offsets relative to the cell centre, one `(x, y, z)` per frame.
fn sample_path(phenotype: Phenotype, frames: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mid = (frames as f64 - 1.0) / 2.0;
    let phase = rng.random_range(0.0..2.0 * PI);
    match phenotype {
        Phenotype::Helical => {
            let radius = rng.random_range(4.0..6.0);
            let omega = rng.random_range(0.25..0.35);
            let vz = rng.random_range(0.08..0.12) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (0..frames)
                .map(|t| {
                    let a = omega * t as f64 + phase;
                    [radius * a.cos(), radius * a.sin(), vz * (t as f64 - mid)]
                })
                .collect()
        }
        Phenotype::ErraticSemicircular => {
            let radius = rng.random_range(7.0..9.0);
            let jitter_xy = Normal::new(0.0, 0.35).unwrap();
            let jitter_z = Normal::new(0.0, 0.15).unwrap();
            let span = (frames.max(2) - 1) as f64;
            (0..frames)
                .map(|t| {
                    let a = phase + PI * t as f64 / span;
                    [
                        radius * a.cos() + jitter_xy.sample(rng),
                        radius * a.sin() + jitter_xy.sample(rng),
                        jitter_z.sample(rng),
                    ]
                })
                .collect()
        }
        Phenotype::CorkscrewLinear => {
            let heading = rng.random_range(0.0..2.0 * PI);
            let speed = rng.random_range(0.25..0.35);
            let radius = rng.random_range(1.5..2.0);
            let omega = rng.random_range(0.9..1.1);
            let (ux, uy) = (heading.cos(), heading.sin());
            // e1 = (-uy, ux, 0) spans the lateral direction, e2 = z.
            (0..frames)
                .map(|t| {
                    let s = speed * (t as f64 - mid);
                    let a = omega * t as f64 + phase;
                    let (c, sn) = (radius * a.cos(), radius * a.sin());
                    [ux * s - uy * c, uy * s + ux * c, sn]
                })
                .collect()
        }
    }
}

/// Renders a synthetic video and its ground truth. A pure function of `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Volume4D, GroundTruth)> {
    spec.validate()?;
    let dims = spec.dims4();
    let extent = [
        dims.w as f64 - 1.0,
        dims.h as f64 - 1.0,
        dims.z as f64 - 1.0,
    ];
    let margin = 3.0 * spec.blob_sigma;
    let min_sep = (6.0 * spec.blob_sigma).max(8.0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut placed: Vec<(Phenotype, Vec<[f64; 3]>)> = Vec::new();
    for (phenotype, count) in spec.counts() {
        for _ in 0..count {
            let index = placed.len();
            let offsets = sample_path(phenotype, dims.t, &mut rng);
            let mut ranges = [(0.0, 0.0); 3];
            for axis in 0..3 {
                let lo = offsets
                    .iter()
                    .map(|o| o[axis])
                    .fold(f64::INFINITY, f64::min);
                let hi = offsets
                    .iter()
                    .map(|o| o[axis])
                    .fold(f64::NEG_INFINITY, f64::max);
                let (cmin, cmax) = (margin - lo, extent[axis] - margin - hi);
                if cmin > cmax {
                    return Err(Error::OutOfBounds {
                        index,
                        phenotype: phenotype.to_string(),
                        reason: format!(
                            "path spans {:.2} voxels on axis {} but only {:.2} fit inside the margin",
                            hi - lo,
                            ["x", "y", "z"][axis],
                            extent[axis] - 2.0 * margin
                        ),
                    });
                }
                ranges[axis] = (cmin, cmax);
            }
            let mut accepted = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let centre: Vec<f64> = ranges
                    .iter()
                    .map(|&(a, b)| if a < b { rng.random_range(a..=b) } else { a })
                    .collect();
                let path: Vec<[f64; 3]> = offsets
                    .iter()
                    .map(|o| [o[0] + centre[0], o[1] + centre[1], o[2] + centre[2]])
                    .collect();
                let clear = placed.iter().all(|(_, other)| {
                    path.iter()
                        .zip(other)
                        .all(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]) >= min_sep)
                });
                if clear {
                    accepted = Some(path);
                    break;
                }
            }
            let path = accepted.ok_or_else(|| {
                Error::Invalid(format!(
                    "could not place cell {index} ({phenotype}) {min_sep:.1} voxels clear of the others after {PLACEMENT_ATTEMPTS} attempts"
                ))
            })?;
            placed.push((phenotype, path));
        }
    }

    let mut volume = Volume4D::zeros(dims)?;
    let reach = (4.0 * spec.blob_sigma).ceil();
    let inv_two_var = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
    for t in 0..dims.t {
        for (_, path) in &placed {
            let [cx, cy, cz] = path[t];
            let span = |c: f64, n: usize| {
                let lo = (c - reach).floor().max(0.0) as usize;
                let hi = ((c + reach).ceil() as usize).min(n - 1);
                lo..=hi
            };
            for z in span(cz, dims.z) {
                let dz = z as f64 - cz;
                for y in span(cy, dims.h) {
                    let dy = y as f64 - cy;
                    for x in span(cx, dims.w) {
                        let dx = x as f64 - cx;
                        let v = spec.peak * (-(dx * dx + dy * dy + dz * dz) * inv_two_var).exp();
                        let i = volume.index(t, z, y, x);
                        volume.data_mut()[i] += v as f32;
                    }
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
        let frame_len = dims.z * dims.h * dims.w;
        for (t, frame) in volume.data_mut().chunks_mut(frame_len).enumerate() {
            let mut frame_rng = ChaCha8Rng::seed_from_u64(spec.seed);
            frame_rng.set_stream(t as u64 + 1);
            for v in frame.iter_mut() {
                *v += noise.sample(&mut frame_rng) as f32;
            }
        }
    }
    for v in volume.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let trajectories = placed
        .into_iter()
        .map(|(phenotype, path)| GroundTruthTrack {
            phenotype,
            points: path
                .iter()
                .enumerate()
                .map(|(t, p)| [t as f64, p[0], p[1], p[2]])
                .collect(),
        })
        .collect();
    Ok((volume, GroundTruth { trajectories }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dims: [usize; 4], counts: [usize; 3], noise: f64) -> SynthSpec {
        SynthSpec {
            dims,
            helical: counts[0],
            erratic_semicircular: counts[1],
            corkscrew_linear: counts[2],
            blob_sigma: 1.5,
            peak: 0.9,
            noise_sigma: noise,
            seed: 11,
        }
    }

    #[test]
    fn empty_spec_gives_zero_volume() {
        let (v, gt) = generate_synthetic(&spec([3, 4, 8, 8], [0, 0, 0], 0.0)).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert!(gt.trajectories.is_empty());
    }

    #[test]
    fn helix_centroid_matches_path() {
        let (v, gt) = generate_synthetic(&spec([12, 20, 40, 40], [1, 0, 0], 0.0)).unwrap();
        let d = v.dims();
        for (t, p) in gt.trajectories[0].points.iter().enumerate() {
            let (mut m, mut sx, mut sy, mut sz) = (0.0, 0.0, 0.0, 0.0);
            for z in 0..d.z {
                for y in 0..d.h {
                    for x in 0..d.w {
                        let w = v.get(t, z, y, x) as f64;
                        m += w;
                        sx += w * x as f64;
                        sy += w * y as f64;
                        sz += w * z as f64;
                    }
                }
            }
            let c = [sx / m, sy / m, sz / m];
            for k in 0..3 {
                assert!(
                    (c[k] - p[k + 1]).abs() < 0.1,
                    "t={t} axis {k}: {} vs {}",
                    c[k],
                    p[k + 1]
                );
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let s = spec([4, 16, 48, 48], [1, 1, 1], 0.05);
        let a = generate_synthetic(&s).unwrap();
        let b = generate_synthetic(&s).unwrap();
        assert_eq!(a, b);
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(generate_synthetic(&other).unwrap().0, a.0);
    }

    #[test]
    fn oversized_path_is_rejected_before_rendering() {
        let err = generate_synthetic(&spec([10, 4, 10, 10], [1, 0, 0], 0.0)).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { .. }), "{err}");
    }

    #[test]
    fn ground_truth_stays_inside_volume() {
        let s = spec([20, 24, 96, 96], [3, 3, 3], 0.0);
        let (v, gt) = generate_synthetic(&s).unwrap();
        let d = v.dims();
        for tr in &gt.trajectories {
            assert_eq!(tr.points.len(), d.t);
            for p in &tr.points {
                assert!(p[1] >= 0.0 && p[1] <= (d.w - 1) as f64);
                assert!(p[2] >= 0.0 && p[2] <= (d.h - 1) as f64);
                assert!(p[3] >= 0.0 && p[3] <= (d.z - 1) as f64);
            }
        }
    }

    #[test]
    fn ground_truth_csv_round_trip() {
        let (_, gt) = generate_synthetic(&spec([5, 16, 48, 48], [1, 1, 1], 0.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.csv");
        gt.write_csv(&path).unwrap();
        assert_eq!(GroundTruth::read_csv(&path).unwrap(), gt);
    }
}
