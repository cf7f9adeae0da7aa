use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentvision::pipeline::{fixture, IngestOptions, Split, SplitFractions};
use latentvision::report::{
    cmd_compress, cmd_eval, cmd_latents, cmd_report, cmd_train, exit_code, DataSource, EvalSource, RunSpec, DATA_ENV,
};
use latentvision::Error;

/// Compress images to latent streams and classify them without decoding.
#[derive(Parser)]
#[command(name = "latentvision", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress images to .lvc streams and tabulate their bpp.
    Compress {
        /// Codec weights file.
        #[arg(long)]
        weights: PathBuf,
        /// Refuse weights of any other quality index.
        #[arg(long)]
        quality: Option<u8>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Precompute (ŷ, σ̂) for one dataset split into a latent store.
    Latents {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        quality: Option<u8>,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run a training spec (TOML).
    Train {
        config: PathBuf,
        /// Override a spec key, e.g. `--set train.epochs=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a classifier checkpoint on a latent store or a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Latent store to evaluate on.
        #[arg(long, conflicts_with_all = ["root", "manifest"])]
        store: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Codec weights, needed when evaluating on a dataset.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        quality: Option<u8>,
        /// Write the metrics as CSV.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Tabulate best accuracies of finished runs by quality and mode.
    Report {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Write the synthetic texture dataset used by the tests.
    Fixture {
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        val_per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root.
    #[arg(long, env = DATA_ENV)]
    root: Option<PathBuf>,
    /// Tab-separated `path, class, split` lines.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Seed of the per-class split when there is no manifest.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl DataArgs {
    fn source(self) -> Result<DataSource, Error> {
        let root = self
            .root
            .ok_or_else(|| Error::Config(format!("no dataset root: pass --root or set ${DATA_ENV}")))?;
        Ok(DataSource {
            root,
            manifest: self.manifest,
            options: IngestOptions {
                fractions: SplitFractions::default(),
                seed: self.split_seed,
                verify_images: false,
            },
        })
    }
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Compress {
            weights,
            quality,
            out,
            images,
        } => {
            let r = cmd_compress(&images, quality, &weights, &out)?;
            println!(
                "compressed {} of {} images, mean {:.4} bpp -> {}",
                r.rows.len(),
                images.len(),
                r.mean_bpp(),
                out.display()
            );
            if !r.errors.is_empty() {
                println!(
                    "{} failures listed in {}",
                    r.errors.len(),
                    out.join("errors.csv").display()
                );
            }
        }
        Command::Latents {
            data,
            weights,
            quality,
            split,
            out,
        } => {
            let (store, rep) = cmd_latents(&data.source()?, split, &weights, quality, &out)?;
            println!("{} records -> {}", store.len(), out.display());
            if !rep.skipped.is_empty() {
                println!("{} images skipped", rep.skipped.len());
            }
        }
        Command::Train { config, overrides } => {
            let spec = RunSpec::load(&config, &overrides)?;
            let o = cmd_train(&spec)?;
            match (o.metrics.best_epoch, o.metrics.best_top1) {
                (Some(e), Some(t)) => println!("best epoch {e}: val top-1 {t:.2}"),
                (Some(e), None) => println!("best epoch {e}"),
                _ => {}
            }
            for a in &o.artifacts {
                println!("wrote {}", a.display());
            }
        }
        Command::Eval {
            checkpoint,
            store,
            data,
            weights,
            split,
            quality,
            out,
        } => {
            let source = match store {
                Some(s) => EvalSource::Store(s),
                None => EvalSource::Dataset {
                    data: data.source()?,
                    split,
                    weights: weights
                        .ok_or_else(|| Error::Config("--weights is required to evaluate on a dataset".into()))?,
                },
            };
            let r = cmd_eval(&checkpoint, &source, quality, out.as_deref())?;
            println!("count     {}", r.count);
            println!("top1      {:.2}", r.top1);
            println!("top5      {:.2}", r.top5);
            println!("mean_bpp  {:.4}", r.mean_bpp);
        }
        Command::Report { out, runs } => {
            let t = cmd_report(&runs, &out)?;
            print!("{}", t.to_markdown());
        }
        Command::Fixture {
            out,
            train_per_class,
            val_per_class,
            size,
            seed,
        } => {
            let spec = fixture::FixtureSpec {
                train_per_class,
                val_per_class,
                test_per_class: 0,
                size,
                seed,
            };
            let m = fixture::write_fixture(&out, &spec)?;
            println!("manifest {}", m.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
