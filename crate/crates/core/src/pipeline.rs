//! Stage orchestration. Every stage reads its inputs from and writes its
//! artifacts to the configured output directory, so stages can be run one at
//! a time or chained.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clustering::{self, ClusterResult};
use crate::config::{file_sha256, InputKind, KChoice, PipelineConfig, Stage};
use crate::detection;
use crate::dynamics::{self, ARModel, ARModelRecord, ProjectionMatrix, ProjectionRecord};
use crate::error::{Error, Result};
use crate::parallel;
use crate::similarity::{self, AffinityMatrix, DistanceMatrix};
use crate::tracking::{self, Track, TrajectoryCorpus};
use crate::volume::{self, GroundTruth, Volume4D};

pub const VOLUME_FILE: &str = "volume.raw";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const TRACKS_FILE: &str = "tracks.csv";
pub const CORPUS_RAW_FILE: &str = "corpus.raw";
pub const MODELS_DIR: &str = "models";
pub const PROJECTION_FILE: &str = "projection.json";
pub const DISTANCE_CSV: &str = "distance.csv";
pub const DISTANCE_RAW: &str = "distance.raw";
pub const AFFINITY_CSV: &str = "affinity.csv";
pub const AFFINITY_RAW: &str = "affinity.raw";
pub const KERNEL_FILE: &str = "kernel.json";
pub const LABELS_FILE: &str = "labels.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PLOT_EXPORT_FILE: &str = "plot_export.json";
pub const MANIFEST_FILE: &str = "manifest.json";

const EIGENVALUES_HEAD: usize = 10;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the settings this stage's outputs depend on.
    pub key: String,
    pub seconds: f64,
    /// Artifact file name to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub workers: usize,
    pub config: PipelineConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    fn load_or_new(cfg: &PipelineConfig) -> Manifest {
        let fresh = Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            workers: parallel::resolve_workers(cfg.workers),
            config: cfg.clone(),
            stages: BTreeMap::new(),
        };
        match read_json::<Manifest>(&cfg.out.join(MANIFEST_FILE)) {
            Ok(mut old) => {
                // drop records that no longer match this configuration
                old.stages.retain(|name, rec| {
                    Stage::ALL
                        .iter()
                        .find(|s| s.as_str() == name)
                        .is_some_and(|s| cfg.stage_key(*s) == rec.key)
                });
                Manifest {
                    stages: old.stages,
                    ..fresh
                }
            }
            Err(_) => fresh,
        }
    }
}

fn record_stage(
    cfg: &PipelineConfig,
    stage: Stage,
    started: Instant,
    artifacts: &[PathBuf],
) -> Result<()> {
    let seconds = started.elapsed().as_secs_f64();
    let mut manifest = Manifest::load_or_new(cfg);
    let mut hashes = BTreeMap::new();
    for path in artifacts {
        let name = path
            .strip_prefix(&cfg.out)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        hashes.insert(name, file_sha256(path)?);
    }
    manifest.stages.insert(
        stage.as_str().to_string(),
        StageRecord {
            key: cfg.stage_key(stage),
            seconds,
            artifacts: hashes,
        },
    );
    write_json(&cfg.out.join(MANIFEST_FILE), &manifest)
}

pub fn read_manifest(out: &Path) -> Result<Manifest> {
    read_json(&out.join(MANIFEST_FILE))
}

/// Writes the synthetic volume and its ground truth.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<(Volume4D, GroundTruth)> {
    cfg.validate()?;
    let started = Instant::now();
    ensure_dir(&cfg.out)?;
    let (vol, truth) = volume::generate_synthetic(&cfg.synth_spec())?;
    let vol_path = cfg.out.join(VOLUME_FILE);
    let gt_path = cfg.out.join(GROUND_TRUTH_FILE);
    volume::write_raw(&vol, &vol_path)?;
    truth.write_csv(&gt_path)?;
    record_stage(cfg, Stage::Synth, started, &[vol_path, gt_path])?;
    Ok((vol, truth))
}

/// Input volume: the configured file or directory, or for synthetic input
/// the previously written volume (regenerated when absent).
pub fn load_input(cfg: &PipelineConfig) -> Result<Volume4D> {
    match cfg.input.kind {
        InputKind::Synth => {
            let path = cfg.out.join(VOLUME_FILE);
            if path.exists() {
                volume::read_raw(&path)
            } else {
                Ok(volume::generate_synthetic(&cfg.synth_spec())?.0)
            }
        }
        InputKind::Raw => volume::read_raw(required_path(cfg)?),
        InputKind::Stack => volume::load_stack(required_path(cfg)?, cfg.input.layout.as_deref()),
    }
}

fn required_path(cfg: &PipelineConfig) -> Result<&Path> {
    cfg.input
        .path
        .as_deref()
        .ok_or_else(|| Error::Config("input.path is required".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub tracks: Vec<Track>,
    pub corpus: TrajectoryCorpus,
}

pub fn track_volume(cfg: &PipelineConfig, vol: &Volume4D) -> Result<TrackOutput> {
    let frames = detection::detect_all(vol, &cfg.detect, cfg.workers, cfg.parallel.frame_chunk)?;
    let tracks = tracking::build_tracks(&frames, &cfg.track);
    let corpus = tracking::normalize_corpus(&tracks, &cfg.track)?;
    Ok(TrackOutput { tracks, corpus })
}

/// Detection, linking and corpus normalization.
pub fn cmd_track(cfg: &PipelineConfig) -> Result<TrackOutput> {
    cfg.validate()?;
    let vol = load_input(cfg)?;
    track_with(cfg, &vol)
}

fn track_with(cfg: &PipelineConfig, vol: &Volume4D) -> Result<TrackOutput> {
    let started = Instant::now();
    ensure_dir(&cfg.out)?;
    let out = track_volume(cfg, vol)?;
    let tracks_path = cfg.out.join(TRACKS_FILE);
    tracking::write_tracks_csv(&out.tracks, &tracks_path)?;
    out.corpus.write_csv(&cfg.out)?;
    let raw_path = cfg.out.join(CORPUS_RAW_FILE);
    out.corpus.write_raw(&raw_path)?;
    let mut artifacts = vec![tracks_path, raw_path];
    artifacts.extend(["X.csv", "Y.csv", "Z.csv", "corpus_ids.csv"].map(|f| cfg.out.join(f)));
    record_stage(cfg, Stage::Track, started, &artifacts)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub projection: ProjectionMatrix,
    pub models: Vec<ARModel>,
}

pub fn featurize_corpus(cfg: &PipelineConfig, corpus: &TrajectoryCorpus) -> Result<Features> {
    let projection = dynamics::fit_projection(corpus, cfg.model.latent_dim)?;
    let models = parallel::map_indices(corpus.len(), 16, cfg.workers, |i| {
        let latent = dynamics::project(&corpus.row(i), &projection);
        dynamics::fit_ar(&latent, cfg.model.order, corpus.track_ids[i])
    })?;
    Ok(Features { projection, models })
}

pub fn model_file_name(trajectory_id: usize) -> String {
    format!("model_{trajectory_id:05}.json")
}

/// Projection and one AR model per corpus row.
pub fn cmd_featurize(cfg: &PipelineConfig) -> Result<Features> {
    cfg.validate()?;
    let corpus = TrajectoryCorpus::read_csv(&cfg.out)?;
    featurize_with(cfg, &corpus)
}

fn featurize_with(cfg: &PipelineConfig, corpus: &TrajectoryCorpus) -> Result<Features> {
    let started = Instant::now();
    let features = featurize_corpus(cfg, corpus)?;
    let models_dir = cfg.out.join(MODELS_DIR);
    if models_dir.exists() {
        std::fs::remove_dir_all(&models_dir).map_err(|e| Error::io(&models_dir, e))?;
    }
    ensure_dir(&models_dir)?;
    let proj_path = cfg.out.join(PROJECTION_FILE);
    write_json(&proj_path, &features.projection.to_record())?;
    let mut artifacts = vec![proj_path];
    for model in &features.models {
        let path = models_dir.join(model_file_name(model.trajectory_id));
        write_json(&path, &model.to_record())?;
        artifacts.push(path);
    }
    record_stage(cfg, Stage::Featurize, started, &artifacts)?;
    Ok(features)
}

pub fn read_features(out: &Path) -> Result<Features> {
    let projection =
        ProjectionMatrix::from_record(&read_json::<ProjectionRecord>(&out.join(PROJECTION_FILE))?)?;
    let dir = out.join(MODELS_DIR);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut models = paths
        .iter()
        .map(|p| ARModel::from_record(&read_json::<ARModelRecord>(p)?))
        .collect::<Result<Vec<_>>>()?;
    models.sort_by_key(|m| m.trajectory_id);
    Ok(Features { projection, models })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub k: usize,
    pub k_requested: String,
    pub m: usize,
    pub eigenvalues_head: Vec<f64>,
    pub inertia: f64,
    pub seed: u64,
    pub beta: f64,
    pub sigma: f64,
    pub clamped_angles: usize,
    pub total_angles: usize,
    /// Agreement with synthetic ground truth, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotTrajectory {
    pub id: usize,
    pub label: usize,
    /// `(t, x, y, z)` per frame.
    pub path: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutput {
    pub distances: DistanceMatrix,
    pub affinity: AffinityMatrix,
    pub result: ClusterResult,
    pub trajectory_ids: Vec<usize>,
    pub summary: ClusterSummary,
}

pub fn cluster_features(cfg: &PipelineConfig, features: &Features) -> Result<ClusterOutput> {
    let m = features.models.len();
    if m == 0 {
        return Err(Error::EmptyCorpus {
            min_length: cfg.track.target_length,
        });
    }
    let systems = features
        .models
        .iter()
        .map(|model| dynamics::companion_form(model, &features.projection))
        .collect::<Result<Vec<_>>>()?;
    let distances = if m == 1 {
        DistanceMatrix::from_matrix(DMatrix::zeros(1, 1))?
    } else {
        similarity::pairwise_matrix(&systems, cfg.workers, cfg.parallel.pair_tile)?
    };
    let affinity = similarity::heat_kernel(&distances, cfg.cluster.beta)?;
    let spectrum = clustering::laplacian_spectrum(&affinity)?;
    let k = match cfg.cluster.k {
        KChoice::Auto if m == 1 => 1,
        KChoice::Auto => clustering::eigengap_from_spectrum(&spectrum, cfg.cluster.k_max),
        KChoice::Fixed(k) => k,
    };
    let result = clustering::cluster_trajectories(&affinity, k, cfg.seed)?;
    let summary = ClusterSummary {
        k,
        k_requested: cfg.cluster.k.to_string(),
        m,
        eigenvalues_head: spectrum.iter().take(EIGENVALUES_HEAD).copied().collect(),
        inertia: result.inertia,
        seed: cfg.seed,
        beta: affinity.beta,
        sigma: affinity.sigma,
        clamped_angles: distances.clamped_angles,
        total_angles: distances.total_angles,
        ari: None,
    };
    Ok(ClusterOutput {
        distances,
        affinity,
        result,
        trajectory_ids: features.models.iter().map(|m| m.trajectory_id).collect(),
        summary,
    })
}

/// Ground-truth phenotype label for each track: the synthetic cell whose path
/// lies closest on average over the track's frames.
pub fn match_ground_truth(tracks: &[&Track], truth: &GroundTruth) -> Vec<usize> {
    tracks
        .iter()
        .map(|tr| {
            let mut best = (0, f64::INFINITY);
            for gt in &truth.trajectories {
                let mut total = 0.0;
                for p in &tr.points {
                    let t = p[0] as usize;
                    total += match gt.points.get(t) {
                        Some(q) => {
                            ((p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2) + (p[3] - q[3]).powi(2))
                                .sqrt()
                        }
                        None => f64::INFINITY,
                    };
                }
                let mean = total / tr.points.len().max(1) as f64;
                if mean < best.1 {
                    best = (gt.phenotype.label(), mean);
                }
            }
            best.0
        })
        .collect()
}

fn write_labels(path: &Path, ids: &[usize], labels: &[usize]) -> Result<()> {
    let mut out = String::from("trajectory_id,label\n");
    for (id, label) in ids.iter().zip(labels) {
        out.push_str(&format!("{id},{label}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let bad = || Error::Invalid(format!("malformed label row {l:?}"));
            let (a, b) = l.split_once(',').ok_or_else(bad)?;
            Ok((
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

/// Distances, affinities, labels, summary and plot export.
pub fn cmd_cluster(cfg: &PipelineConfig) -> Result<ClusterOutput> {
    cfg.validate()?;
    let features = read_features(&cfg.out)?;
    cluster_with(cfg, &features)
}

fn cluster_with(cfg: &PipelineConfig, features: &Features) -> Result<ClusterOutput> {
    let started = Instant::now();
    let mut output = cluster_features(cfg, features)?;
    let out = &cfg.out;

    let tracks = tracking::read_tracks_csv(&out.join(TRACKS_FILE))?;
    let by_id: BTreeMap<usize, &Track> = tracks.iter().map(|t| (t.id, t)).collect();
    let length = cfg.track.target_length;
    let clipped: Vec<Track> = output
        .trajectory_ids
        .iter()
        .map(|id| {
            let tr = by_id.get(id).ok_or_else(|| {
                Error::Invalid(format!("trajectory {id} missing from {TRACKS_FILE}"))
            })?;
            Ok(Track {
                points: tr.points.iter().take(length).copied().collect(),
                ..(*tr).clone()
            })
        })
        .collect::<Result<_>>()?;

    if cfg.input.kind == InputKind::Synth {
        if let Ok(truth) = GroundTruth::read_csv(&out.join(GROUND_TRUTH_FILE)) {
            let refs: Vec<&Track> = clipped.iter().collect();
            let truth_labels = match_ground_truth(&refs, &truth);
            output.summary.ari = Some(clustering::adjusted_rand_index(
                &output.result.labels,
                &truth_labels,
            ));
        }
    }

    let artifacts: Vec<PathBuf> = [
        DISTANCE_CSV,
        DISTANCE_RAW,
        AFFINITY_CSV,
        AFFINITY_RAW,
        KERNEL_FILE,
        LABELS_FILE,
        SUMMARY_FILE,
        PLOT_EXPORT_FILE,
    ]
    .iter()
    .map(|f| out.join(f))
    .collect();
    output.distances.write_csv(&artifacts[0])?;
    output.distances.write_raw(&artifacts[1])?;
    output.affinity.write_csv(&artifacts[2])?;
    output.affinity.write_raw(&artifacts[3])?;
    output.affinity.sidecar().write(&artifacts[4])?;
    write_labels(&artifacts[5], &output.trajectory_ids, &output.result.labels)?;
    write_json(&artifacts[6], &output.summary)?;
    let plot: Vec<PlotTrajectory> = clipped
        .into_iter()
        .zip(&output.result.labels)
        .map(|(tr, &label)| PlotTrajectory {
            id: tr.id,
            label,
            path: tr.points,
        })
        .collect();
    write_json(&artifacts[7], &plot)?;
    record_stage(cfg, Stage::Cluster, started, &artifacts)?;
    Ok(output)
}

/// All stages in sequence; synthetic input is generated first.
pub fn cmd_pipeline(cfg: &PipelineConfig) -> Result<ClusterOutput> {
    cfg.validate()?;
    let vol = match cfg.input.kind {
        InputKind::Synth => cmd_synth(cfg)?.0,
        _ => load_input(cfg)?,
    };
    let tracked = track_with(cfg, &vol)?;
    drop(vol);
    let features = featurize_with(cfg, &tracked.corpus)?;
    cluster_with(cfg, &features)
}
