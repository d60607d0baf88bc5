use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaconv::config::RunConfig;
use adaconv::datasets::{self, SynthParams};
use adaconv::evaluation::MeanStd;
use adaconv::fb_basis::BasisBank;
use adaconv::segnet::SegModel;
use adaconv::{checkpoint, inspect, rng, train, Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adaconv", version, about = "Adaptive Fourier-Bessel convolution for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides train.output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a baseline and an adaptive configuration on the same seeds.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        adaptive: PathBuf,
        /// Comma separated, e.g. 1,2,3.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on an images/masks directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Model config; defaults to config.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        action: DatasetCommand,
    },
    /// Write every basis of the bank as CSV.
    InspectBasis {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "3,5,7,9")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 6)]
        count: usize,
    },
    /// Write synthesized kernels and per-size energy at chosen pixels.
    InspectKernels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// "y,x;y,x"
        #[arg(long)]
        pixels: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "kernels")]
        out: PathBuf,
    },
    /// Model utilities.
    Model {
        #[command(subcommand)]
        action: ModelCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate a synthetic multi-scale set as PNG pairs.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        r_min: f64,
        /// Defaults to min(24, size/2 - 1).
        #[arg(long)]
        r_max: Option<f64>,
        #[arg(long, default_value_t = 0.08)]
        noise: f64,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Print the architecture and parameter counts as JSON.
    Describe {
        #[arg(long)]
        config: PathBuf,
    },
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json serialises"));
}

fn sibling_config(checkpoint: &Path, explicit: Option<PathBuf>) -> Result<RunConfig> {
    let path = explicit.unwrap_or_else(|| checkpoint.with_file_name("config.toml"));
    RunConfig::load(&path)
}

fn load_model(cfg: &RunConfig, checkpoint_path: &Path) -> Result<SegModel> {
    let mut model = SegModel::zeroed(&cfg.model)?;
    model.load_tensors(checkpoint::load(checkpoint_path)?)?;
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = RunConfig::load(&config)?.with_overrides(seed, out);
            let mut dice = Vec::new();
            for &s in &cfg.train.seeds {
                let dir = train::seed_dir(&cfg.train.output_dir, s);
                let outcome = train::train_run(&cfg, s, &dir)?;
                let fg = &outcome.test.metrics.foreground;
                println!(
                    "seed {s}: best epoch {} of {}, test dice {:.4} iou {:.4} accuracy {:.4} -> {}",
                    outcome.best_epoch,
                    outcome.records.len(),
                    fg.dice,
                    fg.iou,
                    fg.accuracy,
                    dir.display()
                );
                dice.push(fg.dice);
            }
            if dice.len() > 1 {
                println!("test dice {}", MeanStd::of(&dice).display_percent());
            }
        }
        Command::Compare {
            baseline,
            adaptive,
            seeds,
            out,
        } => {
            let b = RunConfig::load(&baseline)?;
            let a = RunConfig::load(&adaptive)?;
            let seeds = if seeds.is_empty() { a.train.seeds.clone() } else { seeds };
            let out = out.unwrap_or_else(|| a.train.output_dir.clone());
            let cmp = train::compare(&b, &a, &seeds, &out)?;
            print_json(&cmp.to_json());
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            config,
        } => {
            let cfg = sibling_config(&ckpt, config)?;
            let model = load_model(&cfg, &ckpt)?;
            let opts = datasets::LoadOptions {
                target_size: cfg.data.image_size(),
                channels: cfg.model.in_channels,
                num_classes: cfg.model.num_classes,
            };
            let mut samples = datasets::load_directory(&data.join("images"), &data.join("masks"), &opts)?;
            samples.sort_by(|x, y| x.id.cmp(&y.id));
            let eval = train::evaluate(&model, &samples, cfg.train.batch_size)?;
            print_json(&eval.to_json());
        }
        Command::Dataset {
            action:
                DatasetCommand::Synth {
                    n,
                    size,
                    seed,
                    out,
                    r_min,
                    r_max,
                    noise,
                },
        } => {
            let params = SynthParams {
                n,
                size,
                seed,
                r_min,
                r_max: r_max.unwrap_or_else(|| 24f64.min(size as f64 / 2.0 - 1.0)),
                noise_sigma: noise,
            };
            for sample in datasets::synth_multiscale(&params)? {
                datasets::save_sample(&out, &sample, 2)?;
            }
            println!("wrote {n} samples to {}", out.display());
        }
        Command::InspectBasis { out, sizes, count } => {
            let bank = BasisBank::new(&sizes, count)?;
            let files = inspect::inspect_basis(&bank, &out)?;
            println!("wrote {} bases to {}", files.len(), out.display());
        }
        Command::InspectKernels {
            checkpoint: ckpt,
            image,
            pixels,
            config,
            out,
        } => {
            let cfg = sibling_config(&ckpt, config)?;
            let model = load_model(&cfg, &ckpt)?;
            let layer = model
                .adaptive()
                .ok_or_else(|| Error::Config("checkpoint has no adaptive layer".into()))?;
            let img = datasets::load_image(&image, cfg.model.in_channels, cfg.data.image_size())?;
            let shape = img.shape().to_vec();
            let batch = img.reshape(&[1, shape[0], shape[1], shape[2]])?;
            let pixels = inspect::parse_pixels(&pixels)?;
            let doc = inspect::inspect_kernels(layer, &batch, &pixels, &out)?;
            print_json(&doc);
        }
        Command::Model {
            action: ModelCommand::Describe { config },
        } => {
            let cfg = RunConfig::load(&config)?;
            let model = SegModel::new(&cfg.model, &mut rng::seeded(0))?;
            print_json(&model.describe());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
