//! Pipeline configuration, loaded from TOML.
//!
//! ```toml
//! seed = 0
//! workers = 0          # 0 = all available cores
//! out = "out"
//!
//! [input]
//! kind = "synth"       # synth | raw | stack
//! path = "video.raw"   # raw file or slice directory
//! layout = "t{t}_z{z}.png"
//!
//! [synth]
//! dims = [61, 24, 128, 128]
//! helical = 10
//!
//! [detect]
//! threshold_mode = "fixed"  # or "otsu" (per slice)
//! fixed_threshold = 0.3
//!
//! [track]
//! gate_radius = 5.0
//!
//! [model]
//! order = 5
//! latent_dim = 2
//!
//! [cluster]
//! beta = 1.0
//! k = "auto"           # or an integer
//! k_max = 8
//!
//! [parallel]
//! frame_chunk = 8
//! pair_tile = 64
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::detection::DetectParams;
use crate::dynamics::{DEFAULT_LATENT_DIM, DEFAULT_ORDER};
use crate::error::{Error, Result};
use crate::similarity::DEFAULT_TILE;
use crate::tracking::TrackParams;
use crate::volume::SynthSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Synth,
    Raw,
    Stack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub kind: InputKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec {
            kind: InputKind::Synth,
            path: None,
            layout: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KChoice {
    Auto,
    Fixed(usize),
}

impl fmt::Display for KChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KChoice::Auto => f.write_str("auto"),
            KChoice::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl std::str::FromStr for KChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(KChoice::Auto);
        }
        s.parse().map(KChoice::Fixed).map_err(|_| {
            Error::Config(format!(
                "k must be \"auto\" or a positive integer, got {s:?}"
            ))
        })
    }
}

impl Serialize for KChoice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KChoice::Auto => s.serialize_str("auto"),
            KChoice::Fixed(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for KChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(k) => Ok(KChoice::Fixed(k as usize)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub order: usize,
    pub latent_dim: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            order: DEFAULT_ORDER,
            latent_dim: DEFAULT_LATENT_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    pub beta: f64,
    pub k: KChoice,
    pub k_max: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            beta: 1.0,
            k: KChoice::Auto,
            k_max: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParallelParams {
    pub frame_chunk: usize,
    pub pair_tile: usize,
}

impl Default for ParallelParams {
    fn default() -> Self {
        ParallelParams {
            frame_chunk: 8,
            pair_tile: DEFAULT_TILE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Drives synthetic generation and k-means seeding.
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub input: InputSpec,
    /// `synth.seed` is ignored; the top-level seed is used.
    pub synth: SynthSpec,
    pub detect: DetectParams,
    pub track: TrackParams,
    pub model: ModelParams,
    pub cluster: ClusterParams,
    pub parallel: ParallelParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            workers: 0,
            out: PathBuf::from("out"),
            input: InputSpec::default(),
            synth: SynthSpec::default(),
            detect: DetectParams::default(),
            track: TrackParams::default(),
            model: ModelParams::default(),
            cluster: ClusterParams::default(),
            parallel: ParallelParams::default(),
        }
    }
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Track,
    Featurize,
    Cluster,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Synth, Stage::Track, Stage::Featurize, Stage::Cluster];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Track => "track",
            Stage::Featurize => "featurize",
            Stage::Cluster => "cluster",
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Synthetic spec with the top-level seed applied.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.input.kind {
            InputKind::Synth => {}
            InputKind::Raw | InputKind::Stack => {
                if self.input.path.is_none() {
                    return Err(Error::Config(format!(
                        "input.path is required for input kind {:?}",
                        self.input.kind
                    )));
                }
            }
        }
        self.detect.validate()?;
        self.track.validate()?;
        if self.model.order < 1 || self.model.latent_dim < 1 {
            return Err(Error::Config(
                "model.order and model.latent_dim must be >= 1".into(),
            ));
        }
        if self.model.latent_dim > 3 {
            return Err(Error::Config(format!(
                "model.latent_dim {} exceeds the 3 spatial coordinates",
                self.model.latent_dim
            )));
        }
        if !(self.cluster.beta > 0.0) {
            return Err(Error::Config(format!(
                "cluster.beta must be > 0, got {}",
                self.cluster.beta
            )));
        }
        match self.cluster.k {
            KChoice::Auto if self.cluster.k_max < 2 => {
                return Err(Error::Config(
                    "k = \"auto\" requires cluster.k_max >= 2".into(),
                ));
            }
            KChoice::Fixed(0) => return Err(Error::Config("cluster.k must be >= 1".into())),
            _ => {}
        }
        if self.parallel.frame_chunk < 1 || self.parallel.pair_tile < 1 {
            return Err(Error::Config("parallel chunk sizes must be >= 1".into()));
        }
        Ok(())
    }

    /// Hash of everything that determines outputs (excludes `workers`, `out`).
    pub fn hash(&self) -> String {
        self.stage_key(Stage::Cluster)
    }

    /// Hash of the settings that determine the outputs of `stage` and all
    /// stages before it.
    pub fn stage_key(&self, stage: Stage) -> String {
        let mut parts = vec![serde_json::json!({
            "input": self.input,
            "synth": self.synth,
            "seed": self.seed,
        })];
        if stage >= Stage::Track {
            parts.push(serde_json::json!({ "detect": self.detect, "track": self.track }));
        }
        if stage >= Stage::Featurize {
            parts.push(serde_json::json!({ "model": self.model }));
        }
        if stage >= Stage::Cluster {
            parts.push(serde_json::json!({ "cluster": self.cluster }));
        }
        sha256_hex(serde_json::Value::Array(parts).to_string().as_bytes())
    }
}

pub(crate) fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = PipelineConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.model.order, 5);
        assert_eq!(cfg.model.latent_dim, 2);
        assert_eq!(cfg.cluster.beta, 1.0);
        assert_eq!(cfg.cluster.k, KChoice::Auto);
        cfg.validate().unwrap();
    }

    #[test]
    fn parses_sections() {
        let cfg = PipelineConfig::from_toml_str(
            r#"
seed = 7
[input]
kind = "stack"
path = "data"
layout = "t{t}_z{z}.tif"
[detect]
threshold_mode = "fixed"
fixed_threshold = 0.4
[cluster]
k = 3
"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.input.kind, InputKind::Stack);
        assert_eq!(cfg.detect.fixed_threshold, 0.4);
        assert_eq!(cfg.cluster.k, KChoice::Fixed(3));
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml_str("[cluster]\nbeta = 1.0\ngamma = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn bad_k_strings_are_rejected() {
        assert!(PipelineConfig::from_toml_str("[cluster]\nk = \"many\"\n").is_err());
        assert_eq!("AUTO".parse::<KChoice>().unwrap(), KChoice::Auto);
    }

    #[test]
    fn validation_failures() {
        let mut cfg = PipelineConfig::default();
        cfg.input.kind = InputKind::Raw;
        assert!(cfg.validate().is_err());

        let mut cfg = PipelineConfig::default();
        cfg.cluster.k_max = 1;
        assert!(cfg.validate().is_err());
        cfg.cluster.k = KChoice::Fixed(2);
        cfg.validate().unwrap();

        let mut cfg = PipelineConfig::default();
        cfg.cluster.beta = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.cluster.k = KChoice::Fixed(4);
        cfg.input.path = Some("x.raw".into());
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn beta_only_changes_cluster_key() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.cluster.beta = 2.0;
        for stage in [Stage::Synth, Stage::Track, Stage::Featurize] {
            assert_eq!(a.stage_key(stage), b.stage_key(stage));
        }
        assert_ne!(a.stage_key(Stage::Cluster), b.stage_key(Stage::Cluster));
    }

    #[test]
    fn workers_and_out_do_not_change_hash() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.workers = 8;
        b.out = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
    }
}
