//! Task distributions, the episodic sampler, optimizers, meta-training and
//! evaluation.

mod cloze;
mod eval;
mod gaussian;
mod glyphs;
mod omniglot;
mod optim;
mod sampler;
mod train;

pub use cloze::ClozeSource;
pub use eval::{evaluate, EvalReport};
pub use gaussian::GaussianSource;
pub use glyphs::write_glyph_dataset;
pub use omniglot::{bilinear_resize, load_omniglot, rotate90, OmniglotSource};
pub use optim::{clip_gradients, ClipKind, Optimizer, OptimizerKind};
pub use sampler::{episode_seed, sample_episode, EpisodeShape};
pub use train::{episode_shape, train, MetricsRecord, TrainConfig, TrainOutcome};

use std::fmt;

use rand::Rng;

use crate::config::Config;
use crate::error::{CsnError, Result};
use crate::learners::{Episode, InputShape, Inputs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Disjoint class-id pools.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPartition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassPartition {
    /// Consecutive id ranges `0..train`, then val, then test.
    pub fn contiguous(train: usize, val: usize, test: usize) -> Self {
        ClassPartition {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..train + val + test).collect(),
        }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Where episodes come from.
#[derive(Clone, Debug)]
pub enum TaskSource {
    Gaussian(GaussianSource),
    Omniglot(OmniglotSource),
    Cloze(ClozeSource),
}

fn split_sizes(cfg: &Config, defaults: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    let get = |key: &str, d: usize| -> Result<usize> {
        if cfg.is_auto(key) {
            Ok(d)
        } else {
            cfg.parse(key)
        }
    };
    Ok((
        get("source.train_classes", defaults.0)?,
        get("source.val_classes", defaults.1)?,
        get("source.test_classes", defaults.2)?,
    ))
}

fn noise(cfg: &Config, default: f64) -> Result<f64> {
    if cfg.is_auto("source.noise") {
        Ok(default)
    } else {
        cfg.parse("source.noise")
    }
}

/// Environment variable that points omniglot runs at a dataset when
/// `source.path` is empty.
pub const OMNIGLOT_ENV: &str = "CSN_OMNIGLOT_DIR";

impl TaskSource {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let seed: u64 = cfg.parse("source.seed")?;
        match cfg.get("source.kind") {
            "gaussian" => {
                let (tr, va, te) = split_sizes(cfg, GaussianSource::DEFAULT_SPLITS)?;
                Ok(TaskSource::Gaussian(GaussianSource::new(
                    ClassPartition::contiguous(tr, va, te),
                    cfg.parse("source.dim")?,
                    noise(cfg, 0.1)?,
                    seed,
                )?))
            }
            "cloze" => {
                let (tr, va, te) = split_sizes(cfg, ClozeSource::DEFAULT_SPLITS)?;
                Ok(TaskSource::Cloze(ClozeSource::new(
                    ClassPartition::contiguous(tr, va, te),
                    cfg.parse("source.vocab")?,
                    cfg.parse("source.seq_len")?,
                    noise(cfg, 0.2)?,
                    seed,
                )?))
            }
            "omniglot" => {
                let mut path = cfg.get("source.path").to_string();
                if path.is_empty() {
                    path = std::env::var(OMNIGLOT_ENV).unwrap_or_default();
                }
                if path.is_empty() {
                    return Err(CsnError::Config(format!(
                        "source.kind = omniglot needs source.path (or {OMNIGLOT_ENV})"
                    )));
                }
                let splits = split_sizes(cfg, OmniglotSource::DEFAULT_SPLITS)?;
                Ok(TaskSource::Omniglot(load_omniglot(
                    &path,
                    cfg.parse("source.image_size")?,
                    cfg.parse_bool("source.rotations")?,
                    splits,
                    seed,
                )?))
            }
            other => Err(CsnError::Config(format!(
                "key `source.kind`: unknown source `{other}` (gaussian|omniglot|cloze)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskSource::Gaussian(_) => "gaussian",
            TaskSource::Omniglot(_) => "omniglot",
            TaskSource::Cloze(_) => "cloze",
        }
    }

    pub fn partition(&self) -> &ClassPartition {
        match self {
            TaskSource::Gaussian(s) => &s.partition,
            TaskSource::Omniglot(s) => &s.partition,
            TaskSource::Cloze(s) => &s.partition,
        }
    }

    pub fn classes(&self, split: Split) -> &[usize] {
        self.partition().get(split)
    }

    pub fn input_shape(&self) -> InputShape {
        match self {
            TaskSource::Gaussian(s) => InputShape::Vector(s.dim),
            TaskSource::Omniglot(s) => InputShape::Image {
                channels: 1,
                height: s.image_size,
                width: s.image_size,
            },
            TaskSource::Cloze(s) => InputShape::Tokens {
                vocab: s.token_count(),
                len: s.seq_len,
            },
        }
    }

    /// Queries per class when the config says `auto`.
    pub fn default_queries(&self) -> usize {
        match self {
            TaskSource::Cloze(_) => 1,
            _ => 15,
        }
    }

    /// `count` fresh or distinct examples of one class.
    fn draw(&self, class: usize, count: usize, rng: &mut impl Rng) -> Result<Inputs> {
        match self {
            TaskSource::Gaussian(s) => s.draw(class, count, rng),
            TaskSource::Omniglot(s) => s.draw(class, count, rng),
            TaskSource::Cloze(s) => s.draw(class, count, rng),
        }
    }

    /// Labels predicted by the source's reference classifier, which sees
    /// only the episode (nearest description mean for vectors and images,
    /// best position-wise overlap for sentences).
    pub fn oracle_predict(&self, ep: &Episode) -> Result<Vec<usize>> {
        match self {
            TaskSource::Cloze(_) => cloze::overlap_oracle(ep),
            _ => gaussian::nearest_mean_oracle(ep),
        }
    }
}

/// Row-wise concatenation of input batches of one kind.
pub(crate) fn concat_inputs(parts: Vec<Inputs>) -> Result<Inputs> {
    use crate::diffcore::Tensor;
    use crate::learners::TokenBatch;

    let mut it = parts.into_iter();
    let first = it.next().ok_or_else(|| CsnError::Sampler("no examples drawn".into()))?;
    match first {
        Inputs::Vectors(t) | Inputs::Images(t) => {
            let is_image = t.rank() == 4;
            let tail = t.shape()[1..].to_vec();
            let mut n = t.shape()[0];
            let mut data = t.into_data();
            for p in it {
                match p {
                    Inputs::Vectors(u) | Inputs::Images(u) if u.shape()[1..] == tail[..] => {
                        n += u.shape()[0];
                        data.extend(u.into_data());
                    }
                    _ => return Err(CsnError::Sampler("mixed example shapes".into())),
                }
            }
            let shape: Vec<usize> = std::iter::once(n).chain(tail).collect();
            let t = Tensor::new(shape, data)?;
            Ok(if is_image { Inputs::Images(t) } else { Inputs::Vectors(t) })
        }
        Inputs::Tokens(b) => {
            let mut rows: Vec<Vec<usize>> = (0..b.n).map(|i| b.row(i).to_vec()).collect();
            for p in it {
                let Inputs::Tokens(u) = p else {
                    return Err(CsnError::Sampler("mixed example kinds".into()));
                };
                rows.extend((0..u.n).map(|i| u.row(i).to_vec()));
            }
            Ok(Inputs::Tokens(TokenBatch::new(&rows)?))
        }
    }
}
