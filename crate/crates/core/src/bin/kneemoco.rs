use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kneemoco::experiment::{self, ConfigError, ExperimentConfig, ExperimentError, RunManifest, RunMode, SliceKind};
use kneemoco::recon::VoxelVolume;
use kneemoco::se3::Vec3;

#[derive(Parser)]
#[command(name = "kneemoco", version, about = "IMU-based motion compensation lab for knee cone-beam CT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set squat_deg=45.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// desk, desk256 or full.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut sets = self.sets.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if let Some(o) = &self.out {
            sets.push(format!("out={}", toml_string(&o.to_string_lossy())));
        }
        if let Some(p) = &self.preset {
            sets.push(format!("preset={}", toml_string(p)));
        }
        if let Some(w) = self.workers {
            sets.push(format!("workers={w}"));
        }
        ExperimentConfig::from_sources(self.config.as_deref(), &sets)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Subcommand)]
enum Command {
    /// Run the full four-arm experiment.
    Run(RunArgs),
    /// Simulate motion and IMU and write the ground-truth and estimated tracks.
    ExportTracks(RunArgs),
    /// Aggregate results (mean ± sample std) over run manifests.
    Compare {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Write shank-axial, thigh-axial and sagittal slices of a saved volume.
    RenderSlices {
        /// Volume written by `run` with save_volumes = true.
        volume: PathBuf,
        #[arg(long, default_value = "slices")]
        out: PathBuf,
        /// Knee center in mm as x,y,z; defaults to the volume center.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        knee: Option<Vec<f64>>,
        /// Display window as lo,hi; defaults to the 0.1 and 99.9 percentiles.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        window: Option<Vec<f64>>,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn run_experiment(args: &RunArgs, mode: RunMode) -> ExitCode {
    let cfg = match args.resolve() {
        Ok(c) => c,
        Err(e) => return fail(2, e),
    };
    match experiment::run(&cfg, mode) {
        Ok(outcome) => {
            for r in &outcome.reports {
                print!("{}", r.key_values());
            }
            println!("output={}", cfg.out.display());
            ExitCode::SUCCESS
        }
        Err(e @ ExperimentError::Config(_)) => fail(e.exit_code(), e),
        Err(e) => fail(e.exit_code(), e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(a) => run_experiment(&a, RunMode::Full),
        Command::ExportTracks(a) => run_experiment(&a, RunMode::TracksOnly),
        Command::Compare { manifests } => {
            let mut loaded = Vec::new();
            for p in &manifests {
                match RunManifest::load(p) {
                    Ok(m) => loaded.push(m),
                    Err(e) => return fail(2, e),
                }
            }
            match experiment::compare(&loaded) {
                Ok(rows) => {
                    print!("{}", experiment::format_table(&rows, loaded.len()));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(2, e),
            }
        }
        Command::RenderSlices { volume, out, knee, window } => {
            let vol = match VoxelVolume::load(&volume) {
                Ok(v) => v,
                Err(e) => return fail(2, e),
            };
            let knee = knee.map(|k| Vec3::new(k[0], k[1], k[2])).unwrap_or_else(|| vol.spec.center());
            let window = window.map(|w| (w[0], w[1])).unwrap_or_else(|| {
                use kneemoco::metrics::{percentile, HIGH_PERCENTILE, LOW_PERCENTILE};
                (percentile(&vol.data, LOW_PERCENTILE), percentile(&vol.data, HIGH_PERCENTILE))
            });
            if let Err(e) = std::fs::create_dir_all(&out) {
                return fail(3, e);
            }
            for (kind, name) in [
                (SliceKind::ShankAxial, "shank_axial.pgm"),
                (SliceKind::ThighAxial, "thigh_axial.pgm"),
                (SliceKind::Sagittal, "sagittal.pgm"),
            ] {
                if let Err(e) = experiment::write_slice(&vol, knee, kind, &out.join(name), window) {
                    return fail(3, e);
                }
            }
            println!("output={}", out.display());
            ExitCode::SUCCESS
        }
    }
}
