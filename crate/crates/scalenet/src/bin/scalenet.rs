use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use scalenet::checkpoint::Checkpoint;
use scalenet::config::{preset, presets, RunConfig};
use scalenet::error::{Error, Result};
use scalenet::export::read_simulator_export;
use scalenet::kitti::read_kitti;
use scalenet::manifest::{DatasetManifest, Origin, Split};
use scalenet::run::{self, Stamp, TrainRequest};
use scalenet::synth::{find_exports, run_synthgen, SynthOptions};
use scalenet_core::geometry::CameraId;

/// Metric distance between consecutive camera frames: data preparation,
/// synthetic drives, training and evaluation.
#[derive(Parser)]
#[command(name = "scalenet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic drives into simulator-export directories.
    Synthgen {
        #[arg(long)]
        out: PathBuf,
        /// Number of maps, starting at map 1.
        #[arg(long, default_value_t = 6, conflicts_with = "map")]
        maps: usize,
        /// Explicit map indices (repeatable).
        #[arg(long)]
        map: Vec<usize>,
        /// Frames per map.
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long, default_value_t = 100)]
        episode_frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Samples per pixel along each axis.
        #[arg(long, default_value_t = 2)]
        supersample: usize,
    },
    /// Build a manifest from simulator exports or a KITTI odometry tree.
    Prepare {
        /// Manifest file to write.
        #[arg(long)]
        out: PathBuf,
        /// Export directory, or a directory of exports (repeatable).
        #[arg(long, required_unless_present = "kitti_root")]
        export: Vec<PathBuf>,
        #[arg(long, conflicts_with = "export")]
        kitti_root: Option<PathBuf>,
        /// KITTI sequences; defaults to the standard train or test split.
        #[arg(long, value_delimiter = ',')]
        sequences: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "left,right")]
        cameras: Vec<CameraId>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Train a model from a preset or a JSON run configuration.
    Train {
        #[arg(long, required_unless_present = "config", conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest files (repeatable); the run's data section picks frames.
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Overrides the number of iterations.
        #[arg(long)]
        iterations: Option<u64>,
        /// Trained CNN checkpoint an LSTM run starts from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint of this run to resume.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on consecutive pairs of the given manifests.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Print a table of per-sequence error statistics across eval runs.
    Report {
        /// Eval output directories or report files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List presets, or print one as JSON.
    Presets { name: Option<String> },
}

fn load_manifests(paths: &[PathBuf]) -> Result<Vec<DatasetManifest>> {
    paths.iter().map(|p| DatasetManifest::load(p)).collect()
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthgen {
            out,
            maps,
            map,
            frames,
            episode_frames,
            seed,
            workers,
            supersample,
        } => {
            let mut opts = SynthOptions::new(maps, frames, seed);
            if !map.is_empty() {
                opts.maps = map;
            }
            opts.episode_frames = episode_frames;
            opts.workers = workers;
            opts.render.supersample = supersample;
            if supersample == 0 {
                return Err(Error::config("supersample must be positive"));
            }
            let dirs = run_synthgen(&out, &opts)?;
            let stamp_cfg = serde_json::json!({
                "maps": opts.maps, "frames_per_map": frames, "episode_frames": episode_frames, "render": opts.render,
            });
            Stamp::new("synthgen", seed, workers, &stamp_cfg).write(&out)?;
            for d in dirs {
                println!("{}", d.display());
            }
        }
        Command::Prepare {
            out,
            export,
            kitti_root,
            sequences,
            cameras,
            split,
        } => {
            let split = Split::from(split);
            let manifest = match kitti_root {
                Some(root) => {
                    let (train, test) = scalenet::kitti::kitti_split_presets();
                    let seqs: Vec<&str> = if sequences.is_empty() {
                        if split == Split::Train { train } else { test }
                    } else {
                        sequences.iter().map(String::as_str).collect()
                    };
                    let cams: BTreeSet<CameraId> = cameras.into_iter().collect();
                    read_kitti(&root, &seqs, &cams, split)?
                }
                None => {
                    let mut frames = Vec::new();
                    for root in &export {
                        for dir in find_exports(root)? {
                            frames.extend(read_simulator_export(&dir, split)?.frames);
                        }
                    }
                    let m = DatasetManifest::new(split, Origin::SimulatorExport, frames);
                    m.validate(true)?;
                    m
                }
            };
            manifest.save(&out)?;
            println!("{} frames, {} trajectories", manifest.frames.len(), manifest.trajectories()?.len());
        }
        Command::Train {
            preset: name,
            config,
            manifest,
            out,
            seed,
            workers,
            iterations,
            init,
            checkpoint,
        } => {
            let mut run = match (name, config) {
                (Some(name), _) => preset(&name)?,
                (None, Some(path)) => RunConfig::load(&path)?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            if let Some(s) = seed {
                run.train.seed = s;
            }
            if let Some(n) = iterations {
                run.train.total_iterations = n;
            }
            let outcome = run::train(TrainRequest {
                run,
                manifests: load_manifests(&manifest)?,
                out: out.clone(),
                workers,
                init: init.as_deref().map(Checkpoint::load).transpose()?,
                resume: checkpoint.as_deref().map(Checkpoint::load).transpose()?,
            })?;
            if let Some(last) = outcome.log.last() {
                println!("step {} loss {:.6}", last.step, last.loss);
            }
            println!("{}", out.join(run::FINAL_CHECKPOINT).display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            workers,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let eval = run::evaluate(&ck, &load_manifests(&manifest)?, workers)?;
            run::write_eval_outputs(&out, &ck, &eval, workers)?;
            let p = &eval.report.pooled;
            println!("pairs {} uncovered {} mu {:.4} sigma {:.4}", p.n, eval.report.uncovered, p.mu, p.sigma);
        }
        Command::Report { runs, out } => {
            let reports = runs.iter().map(|p| run::read_report(p)).collect::<Result<Vec<_>>>()?;
            let table = run::report_table(&reports);
            print!("{table}");
            if let Some(path) = out {
                std::fs::write(&path, &table).map_err(Error::io(&path))?;
            }
        }
        Command::Presets { name } => match name {
            Some(name) => println!("{}", serde_json::to_string_pretty(&preset(&name)?).expect("presets serialize")),
            None => {
                for p in presets() {
                    println!("{}", p.name);
                }
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
