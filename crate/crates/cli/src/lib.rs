//! Library side of the `csn` binary: each subcommand is a plain function so
//! tests can drive it without spawning processes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use csn_core::config::Config;
use csn_core::episodes::{episode_shape, evaluate, train, EvalReport, MetricsRecord, Split, TaskSource, TrainConfig};
use csn_core::learners::{load_model, save_model, CsnModel, ModelSpec};
use csn_core::{CsnError, Result};

pub mod ablate;
pub mod bench;
pub mod gradcheck;

/// Environment variable consulted for the run seed when `--seed` is absent.
pub const SEED_ENV: &str = "CSN_SEED";

fn io_err(path: &Path, e: std::io::Error) -> CsnError {
    CsnError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Reads a config file and applies `key=value` overrides on top.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut cfg = Config::from_text(&text)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CsnError::Config(format!("override `{o}` is not `key=value`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

/// Seed precedence: explicit flag, then `CSN_SEED`, then the config.
pub fn resolve_seed(cfg: &Config, flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CsnError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => cfg.parse("train.seed"),
    }
}

/// Fills `auto` model keys from the task source.
pub fn resolve(cfg: &mut Config, source: &TaskSource) -> Result<()> {
    if cfg.is_auto("model.input") {
        cfg.set("model.input", &source.input_shape().to_string())?;
    }
    if cfg.is_auto("model.classes") {
        let way = cfg.get("episode.way").to_string();
        cfg.set("model.classes", &way)?;
    }
    Ok(())
}

/// Source, resolved config and a freshly initialized model.
pub fn build(cfg: &Config) -> Result<(TaskSource, Config, CsnModel)> {
    let source = TaskSource::from_config(cfg)?;
    let mut cfg = cfg.clone();
    resolve(&mut cfg, &source)?;
    let spec = ModelSpec::from_config(&cfg)?;
    let model = CsnModel::new(spec, cfg.parse("train.seed")?)?;
    Ok((source, cfg, model))
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: CsnModel,
    pub source: TaskSource,
    pub config: Config,
    pub records: Vec<MetricsRecord>,
    pub best_val_accuracy: Option<f64>,
    pub best_episode: usize,
}

/// Trains from `cfg`. With `out`, writes `resolved.config`, streams
/// `metrics.jsonl` and saves the best parameters to `best.model`.
pub fn run_train(cfg: &Config, out: Option<&Path>) -> Result<TrainSummary> {
    let (source, cfg, mut model) = build(cfg)?;
    let tc = TrainConfig::from_config(&cfg, &source)?;
    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let p = dir.join("resolved.config");
            fs::write(&p, cfg.to_text()).map_err(|e| io_err(&p, e))?;
            let p = dir.join("metrics.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(|e| io_err(&p, e))?), p))
        }
        None => None,
    };
    let mut records = Vec::new();
    let outcome = train(&mut model, &source, &tc, &mut |rec| {
        if let Some((w, p)) = metrics.as_mut() {
            let line = serde_json::to_string(rec).expect("records serialize");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| io_err(p, e))?;
        }
        records.push(rec.clone());
        Ok(())
    })?;
    model.store = outcome.best;
    if let Some(dir) = out {
        save_model(dir.join("best.model"), &model)?;
    }
    Ok(TrainSummary {
        model,
        source,
        config: cfg,
        records,
        best_val_accuracy: outcome.best_val_accuracy,
        best_episode: outcome.best_episode,
    })
}

/// Rejects a model that cannot run on the episodes `cfg` describes.
pub fn check_compatible(model: &CsnModel, source: &TaskSource, cfg: &Config) -> Result<()> {
    let spec = model.spec();
    let expected = source.input_shape();
    if spec.input != expected {
        return Err(CsnError::Config(format!(
            "model expects {} inputs but the {} source yields {expected}",
            spec.input,
            source.name()
        )));
    }
    let way: usize = cfg.parse("episode.way")?;
    if spec.classes != way {
        return Err(CsnError::Config(format!(
            "model has {} output classes but episode.way is {way}",
            spec.classes
        )));
    }
    Ok(())
}

/// Scores a trained model on test episodes of the configured source.
pub fn evaluate_model(model: &CsnModel, cfg: &Config, episodes: usize, seed: u64) -> Result<EvalReport> {
    let source = TaskSource::from_config(cfg)?;
    check_compatible(model, &source, cfg)?;
    let shape = episode_shape(cfg, &source)?;
    evaluate(model, &source, Split::Test, episodes, shape, seed)
}

pub fn run_eval(model_path: &Path, cfg: &Config, episodes: usize, seed: u64) -> Result<EvalReport> {
    let model = load_model(model_path)?;
    evaluate_model(&model, cfg, episodes, seed)
}

/// Default output directory for a config file: `runs/<file stem>`.
pub fn default_out_dir(config: &Path) -> PathBuf {
    let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    Path::new("runs").join(stem)
}
