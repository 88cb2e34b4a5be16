use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{episode_seed, sample_episode, EpisodeShape, Split, TaskSource};
use crate::error::Result;
use crate::learners::{argmax_rows, CsnModel};

/// Accuracy summary over independently sampled test episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: f64,
    /// Sample standard deviation of per-episode accuracy.
    pub std: f64,
    /// Half-width of the normal-approximation 95% interval of the mean.
    pub ci95: f64,
    pub episodes: usize,
    pub ms_per_episode: f64,
    #[serde(skip)]
    pub accuracies: Vec<f64>,
    /// Mean summed query cross-entropy per episode.
    #[serde(skip)]
    pub loss: f64,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>, ms_per_episode: f64) -> Self {
        let n = accuracies.len();
        let mean = if n == 0 { 0.0 } else { accuracies.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            0.0
        } else {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        let ci95 = if n == 0 { 0.0 } else { 1.96 * std / (n as f64).sqrt() };
        EvalReport {
            mean,
            std,
            ci95,
            episodes: n,
            ms_per_episode,
            accuracies,
            loss: 0.0,
        }
    }

    /// Standard error of the mean.
    pub fn sem(&self) -> f64 {
        self.ci95 / 1.96
    }
}

/// Summed cross-entropy of the true labels under `probs`.
pub(crate) fn query_loss(probs: &crate::diffcore::Tensor, labels: &[usize]) -> f64 {
    let c = probs.shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(j, &y)| -probs.data()[j * c + y].max(crate::diffcore::tape::CE_EPS).ln())
        .sum()
}

/// Fraction of `labels` matched by the row-wise argmax of `probs`.
pub(crate) fn accuracy(probs: &crate::diffcore::Tensor, labels: &[usize]) -> f64 {
    let pred = argmax_rows(probs);
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Evaluates `model` on `episodes` episodes of `split`. Episode `i` is drawn
/// from its own seed, so the report depends only on `seed`.
pub fn evaluate(
    model: &CsnModel,
    source: &TaskSource,
    split: Split,
    episodes: usize,
    shape: EpisodeShape,
    seed: u64,
) -> Result<EvalReport> {
    let mut accs = Vec::with_capacity(episodes);
    let mut total_ms = 0.0;
    let mut loss = 0.0;
    for i in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, split, i as u64));
        let ep = sample_episode(source, split, shape, &mut rng)?;
        let start = Instant::now();
        let probs = model.predict_episode(&ep)?;
        total_ms += start.elapsed().as_secs_f64() * 1e3;
        accs.push(accuracy(&probs, &ep.query_y));
        loss += query_loss(&probs, &ep.query_y);
    }
    let mut report = EvalReport::from_accuracies(accs, total_ms / episodes.max(1) as f64);
    report.loss = loss / episodes.max(1) as f64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_statistics() {
        let r = EvalReport::from_accuracies(vec![0.0, 1.0, 0.5, 0.5], 2.0);
        assert_eq!(r.mean, 0.5);
        assert!((r.std - (0.5f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r.ci95 - 1.96 * r.std / 2.0).abs() < 1e-12);
        assert_eq!(r.episodes, 4);
    }
}
