//! Per-frame particle detection.
//!
//! Every slice is median filtered and binarized, 8-connected foreground
//! components become 2D particles, and particles on adjacent slices whose x-y
//! centroids are close are merged into one 3D centre of mass.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::volume::Volume4D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Otsu,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectParams {
    pub median_radius: usize,
    pub threshold_mode: ThresholdMode,
    pub fixed_threshold: f64,
    pub min_area: usize,
    pub z_link_radius: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            median_radius: 1,
            threshold_mode: ThresholdMode::Fixed,
            fixed_threshold: 0.3,
            min_area: 3,
            z_link_radius: 3.0,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_area < 1 {
            return Err(Error::Config("detect.min_area must be >= 1".into()));
        }
        if !(self.z_link_radius > 0.0) {
            return Err(Error::Config("detect.z_link_radius must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.fixed_threshold) {
            return Err(Error::Config(
                "detect.fixed_threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Borrowed `H x W` row-major slice.
#[derive(Debug, Clone, Copy)]
pub struct SliceView<'a> {
    pub h: usize,
    pub w: usize,
    pub data: &'a [f32],
}

impl<'a> SliceView<'a> {
    pub fn new(h: usize, w: usize, data: &'a [f32]) -> Self {
        assert_eq!(data.len(), h * w, "slice data does not match {h}x{w}");
        SliceView { h, w, data }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
    pub frame: usize,
    pub depth: usize,
}

impl SliceMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle2D {
    /// Sub-pixel `(x, y)`: column, row.
    pub centroid: [f64; 2],
    pub area: usize,
    pub depth: usize,
    pub frame: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection3D {
    /// Intensity-weighted `(x, y, z)`.
    pub center: [f64; 3],
    pub frame: usize,
    pub total_mass: f64,
    pub voxel_count: usize,
}

/// Median of a `(2r+1)^2` window, clipped at the borders.
pub fn median_filter(slice: SliceView<'_>, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return slice.data.to_vec();
    }
    let (h, w) = (slice.h, slice.w);
    let mut out = vec![0.0; h * w];
    let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            window.clear();
            for yy in y0..=y1 {
                window.extend_from_slice(&slice.data[yy * w + x0..=yy * w + x1]);
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, f32::total_cmp);
            out[y * w + x] = *m;
        }
    }
    out
}

/// Otsu threshold over a 256-bin histogram spanning `[min, max]`.
///
/// Foreground is `value > threshold`. A constant input returns its own value,
/// so the resulting mask is empty.
pub fn otsu_threshold(values: &[f32]) -> f64 {
    const BINS: usize = 256;
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if values.is_empty() || lo >= hi {
        return if values.is_empty() { 0.0 } else { hi as f64 };
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = (((v as f64 - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let centre = |b: usize| lo + (b as f64 + 0.5) * width;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(b, &c)| c as f64 * centre(b))
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0);
    for k in 0..BINS - 1 {
        w0 += hist[k] as f64;
        sum0 += hist[k] as f64 * centre(k);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * diff * diff;
        if between > best {
            best = between;
            best_k = k;
        }
    }
    lo + (best_k as f64 + 1.0) * width
}

/// Median filter then binarize.
pub fn preprocess_slice(
    slice: SliceView<'_>,
    frame: usize,
    depth: usize,
    params: &DetectParams,
) -> SliceMask {
    let filtered = median_filter(slice, params.median_radius);
    let threshold = match params.threshold_mode {
        ThresholdMode::Otsu => otsu_threshold(&filtered),
        ThresholdMode::Fixed => params.fixed_threshold,
    };
    SliceMask {
        h: slice.h,
        w: slice.w,
        bits: filtered.iter().map(|&v| v as f64 > threshold).collect(),
        frame,
        depth,
    }
}

/// 8-connected components of `mask`, weighted by `source` intensities.
///
/// Components are returned in row-major order of their first pixel.
pub fn extract_particles(
    mask: &SliceMask,
    source: SliceView<'_>,
    params: &DetectParams,
) -> Vec<Particle2D> {
    assert_eq!(
        (mask.h, mask.w),
        (source.h, source.w),
        "mask/slice shape mismatch"
    );
    let (h, w) = (mask.h, mask.w);
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::new();
    let mut particles = Vec::new();
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut area, mut mass, mut sx, mut sy, mut ux, mut uy) =
            (0usize, 0.0, 0.0, 0.0, 0.0, 0.0);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            let v = source.data[p] as f64;
            area += 1;
            mass += v;
            sx += v * x as f64;
            sy += v * y as f64;
            ux += x as f64;
            uy += y as f64;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let q = ny * w + nx;
                    if mask.bits[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        if area < params.min_area {
            continue;
        }
        let centroid = if mass > 0.0 {
            [sx / mass, sy / mass]
        } else {
            [ux / area as f64, uy / area as f64]
        };
        particles.push(Particle2D {
            centroid,
            area,
            depth: mask.depth,
            frame: mask.frame,
            mass,
        });
    }
    particles
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn by_zyx(a: &Detection3D, b: &Detection3D) -> std::cmp::Ordering {
    a.center[2]
        .total_cmp(&b.center[2])
        .then(a.center[1].total_cmp(&b.center[1]))
        .then(a.center[0].total_cmp(&b.center[0]))
}

/// Merges particles of one frame across depth.
///
/// Particles on slices `z` and `z + 1` whose x-y centroids lie within
/// `z_link_radius` are linked; linked groups (transitively) become one
/// detection. Output is ordered by `(z, y, x)` of the centre.
pub fn consolidate_3d(particles: &[Particle2D], params: &DetectParams) -> Vec<Detection3D> {
    let n = particles.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for a in 0..n {
        for b in 0..n {
            let (pa, pb) = (&particles[a], &particles[b]);
            if pb.depth != pa.depth + 1 {
                continue;
            }
            let d = (pa.centroid[0] - pb.centroid[0]).hypot(pa.centroid[1] - pb.centroid[1]);
            if d <= params.z_link_radius {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = find(&mut parent, i);
        groups[r].push(i);
    }
    let mut detections: Vec<Detection3D> = groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|g| {
            let frame = particles[g[0]].frame;
            let mass: f64 = g.iter().map(|&i| particles[i].mass).sum();
            let voxel_count = g.iter().map(|&i| particles[i].area).sum();
            let weight = |i: usize| {
                if mass > 0.0 {
                    particles[i].mass / mass
                } else {
                    1.0 / g.len() as f64
                }
            };
            let mut center = [0.0; 3];
            for &i in &g {
                let p = &particles[i];
                let wgt = weight(i);
                center[0] += wgt * p.centroid[0];
                center[1] += wgt * p.centroid[1];
                center[2] += wgt * p.depth as f64;
            }
            Detection3D {
                center,
                frame,
                total_mass: mass,
                voxel_count,
            }
        })
        .collect();
    detections.sort_by(by_zyx);
    detections
}

/// Full detection for frame `t`; slices are processed on `workers` threads.
pub fn detect_frame(
    volume: &Volume4D,
    t: usize,
    params: &DetectParams,
    workers: usize,
) -> Result<Vec<Detection3D>> {
    let d = volume.dims();
    if t >= d.t {
        return Err(Error::Invalid(format!("frame {t} out of range 0..{}", d.t)));
    }
    let per_slice = parallel::map_indices(d.z, 1, workers, |z| {
        let view = SliceView::new(d.h, d.w, volume.slice(t, z));
        let mask = preprocess_slice(view, t, z, params);
        Ok(extract_particles(&mask, view, params))
    })?;
    let particles: Vec<Particle2D> = per_slice.into_iter().flatten().collect();
    Ok(consolidate_3d(&particles, params))
}

/// Detections for every frame, frames distributed across workers.
pub fn detect_all(
    volume: &Volume4D,
    params: &DetectParams,
    workers: usize,
    frame_chunk: usize,
) -> Result<Vec<Vec<Detection3D>>> {
    params.validate()?;
    parallel::map_indices(volume.dims().t, frame_chunk, workers, |t| {
        detect_frame(volume, t, params, 1)
    })
}
