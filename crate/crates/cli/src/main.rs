use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use csn_core::config::Config;
use csn_core::diffcore::{set_corrupted_backward, OpKind};
use csn_core::episodes::write_glyph_dataset;
use csn_core::{CsnError, Result};
use csn_cli::{ablate, bench, gradcheck, load_config, resolve_seed, run_eval, run_train};

#[derive(Parser)]
#[command(name = "csn", version, about = "Few-shot learning with conditionally shifted neurons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchMode {
    Grad,
    Df,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model; writes resolved.config, metrics.jsonl and best.model.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default runs/<config stem>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override train.episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a saved model on test episodes; prints one JSON object.
    Eval {
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Time describe + predict under gradient and direct-feedback conditioning.
    Bench {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        mode: BenchMode,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Finite-difference check of the episode loss per parameter group.
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 1e-3)]
        h: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Corrupt the backward rule of this op (negative control).
        #[arg(long, value_name = "OP")]
        corrupt: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train and test every combination of a grid file; prints CSV.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Keep each run's artifacts under this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write a procedural handwritten-glyph dataset in the omniglot layout.
    Glyphs {
        dir: PathBuf,
        #[arg(long, default_value_t = 40)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 28)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn io_err(path: &Path, e: io::Error) -> CsnError {
    CsnError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn seeded(config: &Path, set: &[String], seed: Option<u64>) -> Result<Config> {
    let mut cfg = load_config(config, set)?;
    let seed = resolve_seed(&cfg, seed)?;
    cfg.set("train.seed", &seed.to_string())?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train {
            config,
            seed,
            out,
            episodes,
            set,
        } => {
            let mut cfg = seeded(&config, &set, seed)?;
            if let Some(n) = episodes {
                cfg.set("train.episodes", &n.to_string())?;
            }
            let out = out.unwrap_or_else(|| csn_cli::default_out_dir(&config));
            let summary = run_train(&cfg, Some(&out))?;
            match summary.best_val_accuracy {
                Some(acc) => eprintln!(
                    "best validation accuracy {acc:.4} at episode {}; model in {}",
                    summary.best_episode,
                    out.display()
                ),
                None => eprintln!("trained {} episodes; model in {}", summary.best_episode, out.display()),
            }
        }
        Command::Eval {
            model,
            config,
            episodes,
            seed,
            set,
        } => {
            let cfg = seeded(&config, &set, seed)?;
            let episodes = match episodes {
                Some(n) => n,
                None => cfg.parse("eval.episodes")?,
            };
            let report = run_eval(&model, &cfg, episodes, cfg.parse("train.seed")?)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::Bench {
            config,
            mode,
            episodes,
            seed,
            json,
            set,
        } => {
            let cfg = seeded(&config, &set, seed)?;
            let modes: &[&str] = match mode {
                BenchMode::Grad => &["grad"],
                BenchMode::Df => &["df"],
                BenchMode::Both => &["grad", "df"],
            };
            let report = bench::run_bench(&cfg, modes, episodes, cfg.parse("train.seed")?)?;
            if json {
                println!("{}", serde_json::to_string(&report).expect("report serializes"));
            } else {
                print!("{report}");
            }
        }
        Command::Gradcheck {
            config,
            samples,
            h,
            seed,
            corrupt,
            set,
        } => {
            let cfg = seeded(&config, &set, seed)?;
            if let Some(name) = corrupt {
                let op = OpKind::from_name(&name).ok_or_else(|| {
                    let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                    CsnError::Config(format!("unknown op `{name}` (one of {})", known.join(", ")))
                })?;
                set_corrupted_backward(Some(op));
            }
            let report = gradcheck::run_gradcheck(&cfg, samples, h, cfg.parse("train.seed")?)?;
            println!("{report}");
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Ablate {
            config,
            grid,
            out,
            csv,
            set,
        } => {
            let cfg = load_config(&config, &set)?;
            let text = std::fs::read_to_string(&grid).map_err(|e| io_err(&grid, e))?;
            let axes = ablate::parse_grid(&text)?;
            let rows = ablate::run_ablate(&cfg, &axes, out.as_deref())?;
            match csv {
                Some(p) => ablate::write_csv(&rows, File::create(&p).map_err(|e| io_err(&p, e))?)?,
                None => ablate::write_csv(&rows, io::stdout().lock())?,
            }
        }
        Command::Glyphs {
            dir,
            classes,
            per_class,
            size,
            seed,
        } => {
            write_glyph_dataset(&dir, classes, per_class, size, seed)?;
            eprintln!("wrote {} glyph images to {}", classes * per_class, dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => {
            let _ = io::stdout().flush();
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
