//! Frame-to-frame linking by minimum-cost assignment and corpus assembly.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::Detection3D;
use crate::error::{Error, Result};
use crate::volume::write_container;

/// Dense non-negative cost matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::Invalid(format!(
                "cost matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        if let Some(bad) = entries.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Invalid(format!(
                "cost entries must be finite and >= 0, found {bad}"
            )));
        }
        Ok(CostMatrix {
            rows,
            cols,
            entries,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Invalid("ragged cost matrix".into()));
        }
        CostMatrix::new(r, c, rows.concat())
    }

    /// Pairwise Euclidean distances between detection centres.
    pub fn euclidean(prev: &[Detection3D], next: &[Detection3D]) -> Self {
        let entries = prev
            .iter()
            .flat_map(|a| next.iter().map(move |b| distance(&a.center, &b.center)))
            .collect();
        CostMatrix {
            rows: prev.len(),
            cols: next.len(),
            entries,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.cols + c]
    }

    fn transposed(&self) -> CostMatrix {
        let mut entries = Vec::with_capacity(self.entries.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                entries.push(self.get(r, c));
            }
        }
        CostMatrix {
            rows: self.cols,
            cols: self.rows,
            entries,
        }
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost assignment of `min(R, C)` pairs (shortest augmenting path
/// with row/column potentials, O(n^2 m)).
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    if cost.rows == 0 || cost.cols == 0 {
        return Err(Error::EmptyCostMatrix);
    }
    if cost.rows > cost.cols {
        let t = hungarian(&cost.transposed())?;
        let mut pairs: Vec<(usize, usize)> = t.pairs.into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return Ok(Assignment {
            pairs,
            total_cost: t.total_cost,
        });
    }

    let (n, m) = (cost.rows, cost.cols);
    // 1-based arrays; column 0 is a virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_to = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost.get(r0 - 1, j - 1) - u[r0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = col0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    col1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    Ok(Assignment { pairs, total_cost })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackParams {
    pub gate_radius: f64,
    pub min_length: usize,
    pub target_length: usize,
}

impl Default for TrackParams {
    fn default() -> Self {
        TrackParams {
            gate_radius: 5.0,
            min_length: 61,
            target_length: 61,
        }
    }
}

impl TrackParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gate_radius > 0.0) {
            return Err(Error::Config("track.gate_radius must be > 0".into()));
        }
        if self.min_length > self.target_length {
            return Err(Error::Config(format!(
                "track.min_length {} exceeds track.target_length {}",
                self.min_length, self.target_length
            )));
        }
        if self.target_length == 0 {
            return Err(Error::Config("track.target_length must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameLinks {
    /// `(prev index, next index)` pairs within the gate.
    pub matches: Vec<(usize, usize)>,
    /// Indices into `next` that start new tracks.
    pub births: Vec<usize>,
    /// Indices into `prev` whose tracks end.
    pub deaths: Vec<usize>,
}

/// Links two consecutive frames; assigned pairs farther apart than the gate are severed.
pub fn link_frames(prev: &[Detection3D], next: &[Detection3D], params: &TrackParams) -> FrameLinks {
    if prev.is_empty() || next.is_empty() {
        return FrameLinks {
            matches: Vec::new(),
            births: (0..next.len()).collect(),
            deaths: (0..prev.len()).collect(),
        };
    }
    let cost = CostMatrix::euclidean(prev, next);
    let assignment = hungarian(&cost).expect("non-empty cost matrix");
    let matches: Vec<(usize, usize)> = assignment
        .pairs
        .into_iter()
        .filter(|&(r, c)| cost.get(r, c) <= params.gate_radius)
        .collect();
    let mut prev_used = vec![false; prev.len()];
    let mut next_used = vec![false; next.len()];
    for &(r, c) in &matches {
        prev_used[r] = true;
        next_used[c] = true;
    }
    FrameLinks {
        births: (0..next.len()).filter(|&c| !next_used[c]).collect(),
        deaths: (0..prev.len()).filter(|&r| !prev_used[r]).collect(),
        matches,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Active,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: usize,
    /// `(t, x, y, z)` with consecutive `t`.
    pub points: Vec<[f64; 4]>,
    pub status: TrackStatus,
}

impl Track {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first_frame(&self) -> Option<usize> {
        self.points.first().map(|p| p[0] as usize)
    }
}

fn point(t: usize, d: &Detection3D) -> [f64; 4] {
    [t as f64, d.center[0], d.center[1], d.center[2]]
}

/// Folds [`link_frames`] over `frames` (index = frame number).
pub fn build_tracks(frames: &[Vec<Detection3D>], params: &TrackParams) -> Vec<Track> {
    let mut tracks: Vec<Track> = Vec::new();
    // track id owning each detection of the previous frame
    let mut owners: Vec<usize> = Vec::new();
    for (t, dets) in frames.iter().enumerate() {
        let prev: &[Detection3D] = if t == 0 { &[] } else { &frames[t - 1] };
        let links = link_frames(prev, dets, params);
        let mut next_owners = vec![usize::MAX; dets.len()];
        for &(r, c) in &links.matches {
            let id = owners[r];
            tracks[id].points.push(point(t, &dets[c]));
            next_owners[c] = id;
        }
        for &r in &links.deaths {
            tracks[owners[r]].status = TrackStatus::Terminated;
        }
        for &c in &links.births {
            let id = tracks.len();
            tracks.push(Track {
                id,
                points: vec![point(t, &dets[c])],
                status: TrackStatus::Active,
            });
            next_owners[c] = id;
        }
        owners = next_owners;
    }
    tracks
}

/// `m x L` coordinate matrices, one row per surviving track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCorpus {
    pub length: usize,
    pub track_ids: Vec<usize>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
}

impl TrajectoryCorpus {
    pub fn len(&self) -> usize {
        self.track_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.track_ids.is_empty()
    }

    /// `(x, y, z)` of row `i` at time `t`.
    pub fn position(&self, i: usize, t: usize) -> [f64; 3] {
        [self.x[i][t], self.y[i][t], self.z[i][t]]
    }

    pub fn row(&self, i: usize) -> Vec<[f64; 3]> {
        (0..self.length).map(|t| self.position(i, t)).collect()
    }

    /// Builds a corpus from per-row `(x, y, z)` paths of equal length.
    pub fn from_rows(track_ids: Vec<usize>, rows: &[Vec<[f64; 3]>]) -> Result<Self> {
        let length = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != length) || track_ids.len() != rows.len() {
            return Err(Error::Invalid("corpus rows must share one length".into()));
        }
        let axis = |k: usize| {
            rows.iter()
                .map(|r| r.iter().map(|p| p[k]).collect())
                .collect()
        };
        Ok(TrajectoryCorpus {
            length,
            track_ids,
            x: axis(0),
            y: axis(1),
            z: axis(2),
        })
    }

    /// Writes `X.csv`, `Y.csv`, `Z.csv` (one row per trajectory) and
    /// `corpus_ids.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        for (name, mat) in [("X.csv", &self.x), ("Y.csv", &self.y), ("Z.csv", &self.z)] {
            write_matrix_csv(&dir.join(name), mat)?;
        }
        let ids: String = self.track_ids.iter().map(|id| format!("{id}\n")).collect();
        write_text(&dir.join("corpus_ids.csv"), &format!("track_id\n{ids}"))
    }

    pub fn read_csv(dir: &Path) -> Result<Self> {
        let x = read_matrix_csv(&dir.join("X.csv"))?;
        let y = read_matrix_csv(&dir.join("Y.csv"))?;
        let z = read_matrix_csv(&dir.join("Z.csv"))?;
        let ids_path = dir.join("corpus_ids.csv");
        let text = std::fs::read_to_string(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let track_ids = text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse()
                    .map_err(|_| Error::Invalid(format!("bad track id {l:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let length = x.first().map_or(0, Vec::len);
        let shape_ok =
            |m: &Vec<Vec<f64>>| m.len() == track_ids.len() && m.iter().all(|r| r.len() == length);
        if !(shape_ok(&x) && shape_ok(&y) && shape_ok(&z)) {
            return Err(Error::Invalid(format!(
                "corpus matrices in {} disagree in shape",
                dir.display()
            )));
        }
        Ok(TrajectoryCorpus {
            length,
            track_ids,
            x,
            y,
            z,
        })
    }

    /// Raw container with dims `(3, m, L, 1)`.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let data: Vec<f32> = [&self.x, &self.y, &self.z]
            .iter()
            .flat_map(|m| m.iter().flatten().map(|&v| v as f32))
            .collect();
        write_container(path, [3, self.len(), self.length, 1], &data)
    }
}

/// Drops short tracks, truncates the rest to `target_length`, packs by id.
pub fn normalize_corpus(tracks: &[Track], params: &TrackParams) -> Result<TrajectoryCorpus> {
    params.validate()?;
    let mut kept: Vec<&Track> = tracks
        .iter()
        .filter(|t| t.len() >= params.min_length && t.len() >= params.target_length)
        .collect();
    kept.sort_by_key(|t| t.id);
    if kept.is_empty() {
        return Err(Error::EmptyCorpus {
            min_length: params.min_length.max(params.target_length),
        });
    }
    let l = params.target_length;
    let axis = |k: usize| -> Vec<Vec<f64>> {
        kept.iter()
            .map(|t| t.points[..l].iter().map(|p| p[k]).collect())
            .collect()
    };
    Ok(TrajectoryCorpus {
        length: l,
        track_ids: kept.iter().map(|t| t.id).collect(),
        x: axis(1),
        y: axis(2),
        z: axis(3),
    })
}

pub fn write_tracks_csv(tracks: &[Track], path: &Path) -> Result<()> {
    let mut out = String::from("track_id,t,x,y,z\n");
    for tr in tracks {
        for p in &tr.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                tr.id, p[0] as usize, p[1], p[2], p[3]
            ));
        }
    }
    write_text(path, &out)
}

pub fn read_tracks_csv(path: &Path) -> Result<Vec<Track>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tracks: Vec<Track> = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || {
            Error::Invalid(format!(
                "{}:{}: malformed track row",
                path.display(),
                lineno + 1
            ))
        };
        let cols: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        if cols.len() != 5 {
            return Err(bad());
        }
        let id = cols[0] as usize;
        match tracks.last_mut() {
            Some(tr) if tr.id == id => tr.points.push([cols[1], cols[2], cols[3], cols[4]]),
            _ => tracks.push(Track {
                id,
                points: vec![[cols[1], cols[2], cols[3], cols[4]]],
                status: TrackStatus::Terminated,
            }),
        }
    }
    Ok(tracks)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Comma-separated rows, shortest round-trip float formatting.
pub fn write_matrix_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Invalid(format!("{}:{}: not a number", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, y: f64, z: f64) -> Detection3D {
        Detection3D {
            center: [x, y, z],
            frame: 0,
            total_mass: 1.0,
            voxel_count: 1,
        }
    }

    fn track(id: usize, len: usize) -> Track {
        Track {
            id,
            points: (0..len)
                .map(|t| [t as f64, id as f64 + t as f64, 2.0 * t as f64, 1.0])
                .collect(),
            status: TrackStatus::Terminated,
        }
    }

    #[test]
    fn diagonal_zero_cost() {
        let c = CostMatrix::from_rows(&[
            vec![0.0, 10.0, 10.0],
            vec![10.0, 0.0, 10.0],
            vec![10.0, 10.0, 0.0],
        ])
        .unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let c = CostMatrix::new(0, 3, vec![]).unwrap();
        assert!(matches!(hungarian(&c), Err(Error::EmptyCostMatrix)));
    }

    #[test]
    fn rejects_negative_and_nan_costs() {
        assert!(CostMatrix::new(1, 2, vec![1.0, -1.0]).is_err());
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn tall_matrix_assigns_every_column() {
        let c = CostMatrix::from_rows(&[vec![5.0, 1.0], vec![1.0, 5.0], vec![0.5, 0.5]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs.len(), 2);
        assert_eq!(a.total_cost, 1.5);
    }

    #[test]
    fn prev_empty_means_all_births() {
        let next = vec![det(0.0, 0.0, 0.0), det(5.0, 0.0, 0.0)];
        let l = link_frames(&[], &next, &TrackParams::default());
        assert_eq!(l.births, vec![0, 1]);
        assert!(l.matches.is_empty() && l.deaths.is_empty());
    }

    #[test]
    fn global_cost_beats_greedy() {
        // Greedy links prev[0] to its nearest next[1] (distance 1), leaving
        // prev[1] -> next[0] (distance 4.9).
        let prev = vec![det(0.0, 0.0, 0.0), det(2.9, 0.0, 0.0)];
        let next = vec![det(-2.0, 0.0, 0.0), det(1.0, 0.0, 0.0)];
        let p = TrackParams {
            gate_radius: 10.0,
            ..TrackParams::default()
        };
        let l = link_frames(&prev, &next, &p);
        let mut m = l.matches.clone();
        m.sort();
        // enumeration: {(0,0),(1,1)} = 2 + 1.9 = 3.9; {(0,1),(1,0)} = 1 + 4.9 = 5.9
        assert_eq!(m, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn over_gate_match_is_severed() {
        let p = TrackParams {
            gate_radius: 3.0,
            ..TrackParams::default()
        };
        let l = link_frames(&[det(0.0, 0.0, 0.0)], &[det(6.0, 0.0, 0.0)], &p);
        assert!(l.matches.is_empty());
        assert_eq!(l.births, vec![0]);
        assert_eq!(l.deaths, vec![0]);
    }

    #[test]
    fn persistent_detection_forms_one_track() {
        let frames: Vec<Vec<Detection3D>> = (0..12)
            .map(|t| vec![det(10.0 + 0.3 * t as f64, 5.0, 2.0)])
            .collect();
        let tracks = build_tracks(&frames, &TrackParams::default());
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].len(), 12);
        assert_eq!(tracks[0].status, TrackStatus::Active);
    }

    #[test]
    fn vanishing_detection_splits_tracks() {
        let t_total = 30;
        let frames: Vec<Vec<Detection3D>> = (0..t_total)
            .map(|t| {
                if t < 10 {
                    vec![det(10.0, 10.0, 3.0)]
                } else if t == 10 {
                    vec![]
                } else {
                    vec![det(80.0, 60.0, 3.0)]
                }
            })
            .collect();
        let tracks = build_tracks(&frames, &TrackParams::default());
        assert_eq!(tracks.len(), 2);
        assert_eq!(tracks[0].len(), 10);
        assert_eq!(tracks[0].status, TrackStatus::Terminated);
        assert_eq!(tracks[1].len(), t_total - 11);
        assert_eq!(tracks[1].first_frame(), Some(11));
    }

    #[test]
    fn corpus_drops_short_and_truncates_long() {
        let tracks = vec![track(0, 63), track(1, 61), track(2, 45)];
        let c = normalize_corpus(&tracks, &TrackParams::default()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.track_ids, vec![0, 1]);
        assert!(c.x.iter().chain(&c.y).chain(&c.z).all(|r| r.len() == 61));
        let expected: Vec<f64> = tracks[0].points[..61].iter().map(|p| p[1]).collect();
        assert_eq!(c.x[0], expected);
    }

    #[test]
    fn corpus_without_survivors_is_an_error() {
        let err = normalize_corpus(&[track(0, 10)], &TrackParams::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus { .. }));
    }

    #[test]
    fn tracks_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.csv");
        let tracks = vec![track(0, 3), track(1, 2)];
        write_tracks_csv(&tracks, &path).unwrap();
        let back = read_tracks_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].points, tracks[0].points);
    }
}
