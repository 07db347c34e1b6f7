use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use ddei::backbone::reconstruct_with;
use ddei::data::{self, DatasetManifest, PhantomConfig, Split};
use ddei::export::{self, VideoFormat};
use ddei::forward::{sample_masks, MaskSpec};
use ddei::group::GroupConfig;
use ddei::rng::derive_seed;
use ddei::train::{self, Checkpoint, EvalOptions, ReconstructionMode, RunOptions, TrainConfig};
use ddei::Error;

#[derive(Parser)]
#[command(name = "ddei", version, about = "Self-supervised dynamic MRI reconstruction")]
struct Cli {
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
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

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Direct,
    TssduStar,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Gif,
    PngFrames,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset (config: phantom settings).
    GenData {
        #[arg(long, default_value_t = 50)]
        count: usize,
        /// Fraction of sequences assigned to training.
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
    },
    /// Draw and store one mask per manifest entry (config: mask spec).
    MakeMasks {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train a reconstructor (config: training settings).
    Train,
    /// Evaluate a checkpoint and write report.json and report.txt.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the manifest the checkpoint was trained on.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "direct")]
        mode: ModeArg,
        /// Number of input splits averaged in tssdu-star mode.
        #[arg(long, default_value_t = 8)]
        n_splits: usize,
    },
    /// Reconstruct a k-space file with its mask file.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kspace: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// Also write a GIF next to the output.
        #[arg(long)]
        gif: bool,
    },
    /// Write a sequence file as a GIF or PNG frames.
    ExportVideo {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "gif")]
        format: FormatArg,
    },
    /// Write GIFs of random spatial and temporal transforms (config: group settings).
    DemoTransforms {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        count: usize,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn require_out(cli: &Cli) -> Result<&Path, Failure> {
    cli.out.as_deref().ok_or_else(|| Failure::Usage("--out is required".into()))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if cli.threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::GenData { count, train_fraction } => {
            let phantom: PhantomConfig = read_config(cli.config.as_deref())?;
            let out = require_out(cli)?;
            let manifest = data::build_dataset(*count, &phantom, *train_fraction, out, seed)?;
            println!(
                "wrote {} sequences ({} train, {} test) to {}",
                manifest.entries.len(),
                manifest.split(Split::Train).count(),
                manifest.split(Split::Test).count(),
                out.display()
            );
        }
        Command::MakeMasks { manifest, split } => {
            let spec: MaskSpec = read_config(cli.config.as_deref())?;
            let (mut m, dir) = DatasetManifest::load(manifest)?;
            let split = Split::from(*split);
            let mut written = 0;
            for (i, entry) in m.entries.iter_mut().enumerate() {
                if entry.split != split {
                    continue;
                }
                let [t, h, w] = entry.dims;
                let entry_spec = spec.with_seed(derive_seed(seed, &[i as u64]));
                let masks = sample_masks(&entry_spec, t, h, w)?;
                let rel = PathBuf::from(format!("{}.mask", entry.id));
                data::save_masks(&masks, &dir.join(&rel))?;
                entry.mask_path = Some(rel);
                entry.mask_spec = Some(entry_spec);
                written += 1;
            }
            m.save(&dir)?;
            println!("wrote {written} masks to {}", dir.display());
        }
        Command::Train => {
            let path = cli.config.as_deref().ok_or_else(|| Failure::Usage("train needs --config".into()))?;
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let mut config = TrainConfig::from_json(&text)?;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            if let Some(out) = &cli.out {
                config.checkpoint_dir = out.clone();
            }
            if config.checkpoint_dir.as_os_str().is_empty() {
                return Err(Failure::Usage("set checkpoint_dir in the config or pass --out".into()));
            }
            let ckpt = train::train_with(&config, RunOptions { threads: cli.threads }, &mut |r| {
                if r.step % 50 == 0 {
                    eprintln!("epoch {:>4}  step {:>6}  loss {:.6e}", r.epoch, r.step, r.loss);
                }
            })?;
            println!(
                "trained {} steps; checkpoint at {}",
                ckpt.step,
                config.checkpoint_dir.join(train::CHECKPOINT_NAME).display()
            );
            if let Some(best) = &ckpt.best {
                println!("best test PSNR {:.2} dB at epoch {}", best.psnr, best.epoch);
            }
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            mode,
            n_splits,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let manifest_path = manifest.clone().unwrap_or_else(|| ckpt.config.dataset_manifest.clone());
            let (m, dir) = DatasetManifest::load(&manifest_path)?;
            let mode = match mode {
                ModeArg::Direct => ReconstructionMode::Direct,
                ModeArg::TssduStar => ReconstructionMode::TssduStar(*n_splits),
            };
            let options = EvalOptions {
                split: Split::from(*split),
                mode,
                seed: cli.seed.unwrap_or(ckpt.config.seed),
                threads: cli.threads,
            };
            let report = train::evaluate(&ckpt, &m, &dir, &options)?;
            print!("{}", report.to_table());
            if let Some(out) = &cli.out {
                fs::create_dir_all(out).map_err(|e| Error::Io {
                    path: out.clone(),
                    source: e,
                })?;
                write(&out.join("report.json"), report.to_json().as_bytes())?;
                write(&out.join("report.txt"), report.to_table().as_bytes())?;
            }
        }
        Command::Reconstruct {
            checkpoint,
            kspace,
            masks,
            gif,
        } => {
            let out = require_out(cli)?;
            let network = Checkpoint::load(checkpoint)?.network()?;
            let y = data::load_kspace(kspace)?;
            let masks = data::load_masks(masks)?;
            let x = reconstruct_with(&network, &y, &masks)?;
            data::save_sequence(&x, out)?;
            if *gif {
                export::export_video(&x, &out.with_extension("gif"), VideoFormat::Gif)?;
            }
            println!("wrote {}", out.display());
        }
        Command::ExportVideo { input, format } => {
            let out = require_out(cli)?;
            let x = data::load_sequence(input)?;
            let format = match format {
                FormatArg::Gif => VideoFormat::Gif,
                FormatArg::PngFrames => VideoFormat::PngFrames,
            };
            let files = export::export_video(&x, out, format)?;
            println!("wrote {} file(s)", files.len());
        }
        Command::DemoTransforms { input, count } => {
            let group: GroupConfig = read_config(cli.config.as_deref())?;
            let out = require_out(cli)?;
            let files = export::demo_transforms(input, &group, *count, seed, out)?;
            println!("wrote {} GIFs to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| {
        Failure::Run(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            let code = if e.is_data_error() {
                2
            } else if e.is_numeric_error() {
                3
            } else {
                1
            };
            ExitCode::from(code)
        }
    }
}
