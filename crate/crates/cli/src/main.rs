use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use needleguide::blobdetect::pgm::write_pgm;
use needleguide::harness::{run_experiment, run_trial_observed, table1_csv, table2_csv, trial_seed, write_outputs, ExperimentConfig};
use needleguide::phantomsim::{observe, ObservationMode, StereoFrame, TraceWriter};
use needleguide::pipeline::{derive_seed, Simulation};

mod serve;

#[derive(Parser)]
#[command(name = "needleguide", version, about = "Deformable target tracking and needle guidance simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of simulated biopsies and write the result tables.
    RunExperiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 15)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one simulated biopsy and print its record as JSON.
    RunTrial {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trial index inside the experiment seeded with `--seed`.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Per-frame ground-truth CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Render the first stereo frame of a scene as PGM images.
    RenderDebug {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Host an interactive session on ws://127.0.0.1:<port>/session.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include the ground-truth lesion in snapshots.
        #[arg(long)]
        debug: bool,
    },
}

fn load(config: Option<&Path>) -> Result<ExperimentConfig> {
    match config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::RunExperiment { config, trials, seed, out } => {
            let cfg = load(config.as_deref())?;
            let (report, records) = run_experiment(&cfg, trials, seed)?;
            write_outputs(&out, &report, &records)?;
            print!("{}", table1_csv(&report.table1));
            print!("{}", table2_csv(&report.table2));
            if let Some(w) = report.wilcoxon {
                println!("wilcoxon W = {} n = {} p = {:.4e}", w.w, w.n_effective, w.p_two_sided);
            }
            if let Some(rs) = report.spearman_rs {
                println!("spearman r_s = {rs:.4}");
            }
            for (index, reason) in &report.failures {
                println!("trial {index} failed: {reason}");
            }
            for c in &report.checks {
                println!("{} {:?}: {}", if c.passed { "PASS" } else { "FAIL" }, c.check, c.detail);
            }
            Ok(if report.all_checks_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::RunTrial { config, seed, index, trace } => {
            let cfg = load(config.as_deref())?;
            let mut writer = match trace {
                Some(p) => Some(TraceWriter::new(BufWriter::new(File::create(&p)?), cfg.sim.phantom.n_markers)?),
                None => None,
            };
            let mut io_error = None;
            let record = run_trial_observed(&cfg, index, trial_seed(seed, index), |sim, frame| {
                if let Some(w) = writer.as_mut() {
                    if let Err(e) = w.record(frame.time_s, &frame.true_lesion, &sim.scene().markers) {
                        io_error.get_or_insert(e);
                    }
                }
            })?;
            if let Some(e) = io_error {
                return Err(e.into());
            }
            if let Some(w) = writer {
                use std::io::Write;
                w.into_inner().flush()?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "index": record.index,
                    "seed": record.seed,
                    "status": record.status,
                    "frames": record.frames,
                    "valid_frames": record.valid_frames,
                    "tps": record.tps(),
                    "rigid": record.rigid(),
                    "displacement": record.displacement(),
                    "target_needle": record.target_needle,
                    "target_camera": record.target_camera,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::RenderDebug { config, seed, out } => {
            let cfg = load(config.as_deref())?.sim;
            let sim = Simulation::new(cfg.clone(), seed)?;
            let obs = observe(
                sim.scene(),
                &cfg.rig,
                &cfg.noise,
                ObservationMode::Pixel,
                &cfg.render,
                derive_seed(seed, 0),
            );
            let StereoFrame::Images { left, right } = obs.frame else {
                unreachable!("pixel mode renders images");
            };
            fs::create_dir_all(&out)?;
            for (name, img) in [("left.pgm", &left), ("right.pgm", &right)] {
                let path = out.join(name);
                write_pgm(img, BufWriter::new(File::create(&path)?))?;
                println!("{}", path.display());
            }
            if !obs.excluded.is_empty() {
                println!("markers outside the view: {:?}", obs.excluded);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { config, port, seed, debug } => {
            let cfg = load(config.as_deref())?.sim;
            serve::serve(cfg, port, seed, debug)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
