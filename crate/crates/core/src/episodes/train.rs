use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::accuracy;
use super::{clip_gradients, episode_seed, evaluate, sample_episode, ClipKind, EpisodeShape, Optimizer, OptimizerKind, Split, TaskSource};
use crate::config::Config;
use crate::diffcore::{ParamStore, Tape};
use crate::error::{CsnError, Result};
use crate::learners::CsnModel;

/// Train-record interval when validation is off.
const DEFAULT_LOG_INTERVAL: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    pub optimizer: OptimizerKind,
    pub clip: Option<f64>,
    pub clip_kind: ClipKind,
    /// Episodes between validation runs; 0 disables validation.
    pub val_interval: usize,
    pub val_episodes: usize,
    pub seed: u64,
    pub shape: EpisodeShape,
}

impl TrainConfig {
    /// Training settings of `cfg`; `auto` query counts come from `source`.
    pub fn from_config(cfg: &Config, source: &TaskSource) -> Result<Self> {
        let optimizer = match cfg.get("train.optimizer") {
            "adam" => OptimizerKind::Adam {
                lr: cfg.parse("train.lr")?,
                beta1: cfg.parse("train.beta1")?,
                beta2: cfg.parse("train.beta2")?,
                eps: cfg.parse("train.eps")?,
            },
            "sgd" => OptimizerKind::Sgd {
                lr: cfg.parse("train.lr")?,
                momentum: cfg.parse("train.momentum")?,
            },
            other => {
                return Err(CsnError::Config(format!(
                    "key `train.optimizer`: unknown optimizer `{other}` (adam|sgd)"
                )))
            }
        };
        let clip = cfg.parse_opt_f64("train.clip")?;
        if clip.is_some_and(|c| c <= 0.0 || !c.is_finite()) {
            return Err(CsnError::Config("train.clip must be positive or none".into()));
        }
        Ok(TrainConfig {
            episodes: cfg.parse("train.episodes")?,
            optimizer,
            clip,
            clip_kind: cfg.parse("train.clip_kind")?,
            val_interval: cfg.parse("train.val_interval")?,
            val_episodes: cfg.parse("train.val_episodes")?,
            seed: cfg.parse("train.seed")?,
            shape: episode_shape(cfg, source)?,
        })
    }
}

/// Episode shape of `cfg`, resolving `auto` query counts against `source`.
pub fn episode_shape(cfg: &Config, source: &TaskSource) -> Result<EpisodeShape> {
    let queries = if cfg.is_auto("episode.queries_per_class") {
        source.default_queries()
    } else {
        cfg.parse("episode.queries_per_class")?
    };
    Ok(EpisodeShape {
        way: cfg.parse("episode.way")?,
        shot: cfg.parse("episode.shot")?,
        queries,
    })
}

/// One line of `metrics.jsonl`: averages over the episodes since the
/// previous record of the same split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Training episodes completed when the record was taken.
    pub episode: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub ms_per_episode: f64,
    pub extract_ms: f64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation accuracy (the final ones when
    /// validation never ran).
    pub best: ParamStore,
    pub best_val_accuracy: Option<f64>,
    /// Training episodes completed at the best checkpoint.
    pub best_episode: usize,
}

#[derive(Default)]
struct Window {
    episodes: usize,
    loss: f64,
    acc: f64,
    ms: f64,
    extract_ms: f64,
}

impl Window {
    fn record(&mut self, episode: usize) -> Option<MetricsRecord> {
        if self.episodes == 0 {
            return None;
        }
        let n = self.episodes as f64;
        let rec = MetricsRecord {
            episode,
            split: Split::Train.name().into(),
            loss: self.loss / n,
            accuracy: self.acc / n,
            ms_per_episode: self.ms / n,
            extract_ms: self.extract_ms / n,
            timestamp: now_ms(),
        };
        *self = Window::default();
        Some(rec)
    }
}

/// Meta-trains `model` on `source`: per episode describe → predict → summed
/// query loss → backward → optional clip → optimizer step. Every
/// `val_interval` episodes the model is scored on `val_episodes` fixed
/// validation episodes and the parameters are kept when they improve.
/// Records go to `sink` as they are produced.
pub fn train(
    model: &mut CsnModel,
    source: &TaskSource,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut opt = Optimizer::new(cfg.optimizer, &model.store);
    let validate = cfg.val_interval > 0 && cfg.val_episodes > 0 && source.classes(Split::Val).len() >= cfg.shape.way;
    let log_interval = if validate { cfg.val_interval } else { DEFAULT_LOG_INTERVAL };
    let mut best = model.store.clone();
    let mut best_val: Option<f64> = None;
    let mut best_episode = 0;
    let mut window = Window::default();
    for i in 0..cfg.episodes {
        let seed = episode_seed(cfg.seed, Split::Train, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ep = sample_episode(source, Split::Train, cfg.shape, &mut rng)?;
        let start = Instant::now();
        let diverged = |detail: String| CsnError::NanLoss { episode: i, seed, detail };
        let mut tape = Tape::new();
        let run = model
            .net
            .run_episode(&model.store, &mut tape, &ep, None, Some(&mut rng))
            .map_err(|e| match e {
                CsnError::Numeric { op } => diverged(format!("non-finite value in `{op}`")),
                other => other,
            })?;
        let loss = tape.value(run.loss).item();
        if !loss.is_finite() {
            return Err(diverged(format!("loss {loss}")));
        }
        let grads = tape.backward(run.loss)?;
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store);
        if let Some(threshold) = cfg.clip {
            let norm = clip_gradients(&mut model.store, cfg.clip_kind, threshold);
            if !norm.is_finite() {
                return Err(diverged(format!("gradient norm {norm}")));
            }
        }
        opt.step(&mut model.store);
        window.episodes += 1;
        window.loss += loss;
        window.acc += accuracy(tape.value(run.probs), &ep.query_y);
        window.ms += start.elapsed().as_secs_f64() * 1e3;
        window.extract_ms += run.extract_ms;

        let done = i + 1;
        if done % log_interval == 0 || done == cfg.episodes {
            if let Some(rec) = window.record(done) {
                sink(&rec)?;
            }
        }
        if validate && done % cfg.val_interval == 0 {
            let report = evaluate(model, source, Split::Val, cfg.val_episodes, cfg.shape, cfg.seed)?;
            sink(&MetricsRecord {
                episode: done,
                split: Split::Val.name().into(),
                loss: report.loss,
                accuracy: report.mean,
                ms_per_episode: report.ms_per_episode,
                extract_ms: 0.0,
                timestamp: now_ms(),
            })?;
            if best_val.map_or(true, |b| report.mean > b) {
                best_val = Some(report.mean);
                best = model.store.clone();
                best_episode = done;
            }
        }
    }
    if best_val.is_none() {
        best = model.store.clone();
        best_episode = cfg.episodes;
    }
    Ok(TrainOutcome {
        best,
        best_val_accuracy: best_val,
        best_episode,
    })
}
