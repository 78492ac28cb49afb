//! `gt`: ground-truth generation and sensor calibration.
//!
//! Exit codes: 0 success, 1 data error, 2 configuration or usage error.

use clap::{Args, Parser, Subcommand};
use groundtruth::pipeline::{commands, fixtures, PipelineConfig, PipelineError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "gt",
    version,
    about = "UAV ground truth and sensor calibration toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Io {
    /// TOML configuration file; relative data paths resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Time-synchronise the sensors and solve the per-epoch pose trajectory.
    Solve(Io),
    /// Estimate inter-sensor time offsets and write shifted streams.
    Timesync(Io),
    /// Align and stitch two trajectory segments.
    Align(Io),
    /// Magnetometer calibration.
    Magcal {
        #[command(subcommand)]
        step: MagcalStep,
    },
    /// Calibrate a fiducial marker field from detections.
    Markercal(Io),
    /// Vibration analysis.
    Vibration {
        #[command(subcommand)]
        step: VibrationStep,
    },
    /// Write a synthetic fixture set with one config per command family.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
enum MagcalStep {
    /// Hard- and soft-iron ellipsoid fit.
    Intrinsic(Io),
    /// Magnetometer-to-IMU rotation and inclination from static poses.
    Extrinsic(Io),
}

#[derive(Debug, Subcommand)]
enum VibrationStep {
    /// Welch PSD, spectrogram and dominant peak of the acceleration norm.
    Psd(Io),
    /// Fit the motor rate to RPM polynomial.
    Rpmfit(Io),
    /// Predict resonance frequencies from logged motor rates.
    Predict(Io),
    /// Overlapping Allan deviation of every IMU channel.
    Allan(Io),
}

type Handler = fn(&PipelineConfig, &Path) -> Result<(), PipelineError>;

fn dispatch(command: Command) -> Result<(), PipelineError> {
    let (handler, io): (Handler, Io) = match command {
        Command::Synth { out, seed } => {
            let set = fixtures::write_fixture_set(&out, seed)?;
            log::info!("fixtures written, solve config at {}", set.solve.display());
            return Ok(());
        }
        Command::Solve(io) => (commands::solve, io),
        Command::Timesync(io) => (commands::timesync, io),
        Command::Align(io) => (commands::align, io),
        Command::Magcal {
            step: MagcalStep::Intrinsic(io),
        } => (commands::magcal_intrinsic, io),
        Command::Magcal {
            step: MagcalStep::Extrinsic(io),
        } => (commands::magcal_extrinsic, io),
        Command::Markercal(io) => (commands::markercal, io),
        Command::Vibration { step } => match step {
            VibrationStep::Psd(io) => (commands::vibration_psd, io),
            VibrationStep::Rpmfit(io) => (commands::vibration_rpmfit, io),
            VibrationStep::Predict(io) => (commands::vibration_predict, io),
            VibrationStep::Allan(io) => (commands::vibration_allan, io),
        },
    };
    let cfg = PipelineConfig::load(&io.config)?;
    handler(&cfg, &io.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GT_LOG_LEVEL", "warn")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
