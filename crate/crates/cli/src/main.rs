use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use motility::config::{InputKind, KChoice, PipelineConfig};
use motility::detection::ThresholdMode;
use motility::pipeline;
use motility::{Error, ErrorKind};

#[derive(Parser)]
#[command(
    name = "motility",
    version,
    about = "Cell tracking and motion phenotype clustering for 4D microscopy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video with ground truth
    Synth(Common),
    /// Detect, link and normalize trajectories
    Track(Common),
    /// Fit the projection and per-trajectory AR models
    Featurize(Common),
    /// Martin distances, affinities and spectral clustering
    Cluster(Common),
    /// Run every stage in sequence
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses all cores
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Raw volume file or slice directory
    #[arg(long)]
    input: Option<PathBuf>,
    /// Slice file pattern with {t} and {z}
    #[arg(long)]
    layout: Option<String>,
    /// Fixed intensity threshold; switches off Otsu
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    gate_radius: Option<f64>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// Cluster count or "auto"
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    k_max: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(path) = &self.input {
            cfg.input.kind = if path.is_dir() {
                InputKind::Stack
            } else {
                InputKind::Raw
            };
            cfg.input.path = Some(path.clone());
        }
        if let Some(v) = &self.layout {
            cfg.input.layout = Some(v.clone());
        }
        if let Some(v) = self.threshold {
            cfg.detect.threshold_mode = ThresholdMode::Fixed;
            cfg.detect.fixed_threshold = v;
        }
        if let Some(v) = self.gate_radius {
            cfg.track.gate_radius = v;
        }
        if let Some(v) = self.length {
            cfg.track.target_length = v;
            cfg.track.min_length = v;
        }
        if let Some(v) = self.order {
            cfg.model.order = v;
        }
        if let Some(v) = self.latent_dim {
            cfg.model.latent_dim = v;
        }
        if let Some(v) = self.beta {
            cfg.cluster.beta = v;
        }
        if let Some(v) = &self.k {
            cfg.cluster.k = v.parse::<KChoice>()?;
        }
        if let Some(v) = self.k_max {
            cfg.cluster.k_max = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = c.resolve()?;
            let (vol, truth) = pipeline::cmd_synth(&cfg)?;
            let d = vol.dims();
            println!(
                "wrote {} ({}x{}x{}x{}) and {} ground-truth trajectories to {}",
                pipeline::VOLUME_FILE,
                d.t,
                d.z,
                d.h,
                d.w,
                truth.trajectories.len(),
                cfg.out.display()
            );
        }
        Command::Track(c) => {
            let cfg = c.resolve()?;
            let out = pipeline::cmd_track(&cfg)?;
            println!(
                "{} tracks, {} trajectories of length {}",
                out.tracks.len(),
                out.corpus.len(),
                out.corpus.length
            );
        }
        Command::Featurize(c) => {
            let cfg = c.resolve()?;
            let f = pipeline::cmd_featurize(&cfg)?;
            println!("{} models of order {}", f.models.len(), cfg.model.order);
        }
        Command::Cluster(c) => report(&pipeline::cmd_cluster(&c.resolve()?)?),
        Command::Pipeline(c) => report(&pipeline::cmd_pipeline(&c.resolve()?)?),
    }
    Ok(())
}

fn report(out: &pipeline::ClusterOutput) {
    let s = &out.summary;
    print!(
        "{} trajectories, k = {}, inertia {:.4}",
        s.m, s.k, s.inertia
    );
    if let Some(ari) = s.ari {
        print!(", ARI vs ground truth {ari:.3}");
    }
    println!();
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data | ErrorKind::Io => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
