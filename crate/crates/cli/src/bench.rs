//! Paired timing of gradient versus direct-feedback conditioning.

use std::fmt;
use std::time::Instant;

use csn_core::config::Config;
use csn_core::episodes::{episode_seed, episode_shape, sample_episode, Split};
use csn_core::learners::Episode;
use csn_core::{CsnError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::build;

/// Timing summary of one conditioning mode.
#[derive(Clone, Debug, Serialize)]
pub struct ModeTiming {
    pub mode: String,
    pub episodes: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub median_extract_ms: f64,
    pub p95_extract_ms: f64,
    /// Backward traversals spent on conditioning, per episode.
    pub backward_passes: Vec<usize>,
}

impl ModeTiming {
    pub fn max_backward_passes(&self) -> usize {
        self.backward_passes.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub modes: Vec<ModeTiming>,
    /// Median grad ms/task over median df ms/task, when both ran.
    pub grad_over_df: Option<f64>,
}

impl BenchReport {
    pub fn mode(&self, name: &str) -> Option<&ModeTiming> {
        self.modes.iter().find(|m| m.mode == name)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:>8} {:>11} {:>9} {:>14} {:>12} {:>10}",
            "mode", "episodes", "median_ms", "p95_ms", "extract_median", "extract_p95", "backward"
        )?;
        for m in &self.modes {
            let passes = if m.backward_passes.is_empty() {
                0.0
            } else {
                m.backward_passes.iter().sum::<usize>() as f64 / m.backward_passes.len() as f64
            };
            writeln!(
                f,
                "{:<6} {:>8} {:>11.3} {:>9.3} {:>14.3} {:>12.3} {:>10.1}",
                m.mode, m.episodes, m.median_ms, m.p95_ms, m.median_extract_ms, m.p95_extract_ms, passes
            )?;
        }
        if let Some(r) = self.grad_over_df {
            writeln!(f, "grad/df median ratio: {r:.3}")?;
        }
        Ok(())
    }
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

struct Runner {
    name: String,
    model: csn_core::learners::CsnModel,
    total: Vec<f64>,
    extract: Vec<f64>,
    passes: Vec<usize>,
}

impl Runner {
    fn run(&mut self, ep: &Episode, record: bool) -> Result<()> {
        let net = &self.model.net;
        let store = &self.model.store;
        let start = Instant::now();
        let info = net.conditioning(store, &ep.support_x, &ep.support_onehot())?;
        let extract = start.elapsed().as_secs_f64() * 1e3;
        let bank = net.describe_from(store, &ep.support_x, &info)?;
        let probs = net.predict(store, &bank, &ep.query_x)?;
        let total = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(probs);
        if record {
            self.total.push(total);
            self.extract.push(extract);
            self.passes.push(info.backward_passes);
        }
        Ok(())
    }
}

/// Times describe + predict for each mode in `modes` (`grad`, `df`) on the
/// same test episodes. Modes alternate within each episode, in swapped
/// order on odd episodes, so drift on the machine hits both alike.
pub fn run_bench(cfg: &Config, modes: &[&str], episodes: usize, seed: u64) -> Result<BenchReport> {
    if modes.is_empty() {
        return Err(CsnError::Config("bench needs at least one mode".into()));
    }
    let warmup: usize = cfg.parse("bench.warmup")?;
    let mut runners = Vec::new();
    for &mode in modes {
        let mut c = cfg.clone();
        c.set("cond.mode", mode)?;
        // gradient information is only defined as a constant
        if mode == "grad" {
            c.set("cond.stop_grad", "true")?;
        }
        let (_, _, model) = build(&c)?;
        if !model.spec().shifts {
            return Err(CsnError::Config("bench needs model.shifts = true".into()));
        }
        runners.push(Runner {
            name: mode.to_string(),
            model,
            total: Vec::new(),
            extract: Vec::new(),
            passes: Vec::new(),
        });
    }
    let (source, _, _) = build(cfg)?;
    let shape = episode_shape(cfg, &source)?;
    for i in 0..warmup + episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, Split::Test, i as u64));
        let ep = sample_episode(&source, Split::Test, shape, &mut rng)?;
        let record = i >= warmup;
        let n = runners.len();
        for j in 0..n {
            let k = if i % 2 == 0 { j } else { n - 1 - j };
            runners[k].run(&ep, record)?;
        }
    }
    let modes: Vec<ModeTiming> = runners
        .into_iter()
        .map(|r| ModeTiming {
            mode: r.name,
            episodes,
            median_ms: percentile(&r.total, 0.5),
            p95_ms: percentile(&r.total, 0.95),
            median_extract_ms: percentile(&r.extract, 0.5),
            p95_extract_ms: percentile(&r.extract, 0.95),
            backward_passes: r.passes,
        })
        .collect();
    let median = |name: &str| modes.iter().find(|m| m.mode == name).map(|m| m.median_ms);
    let grad_over_df = match (median("grad"), median("df")) {
        (Some(g), Some(d)) if d > 0.0 => Some(g / d),
        _ => None,
    };
    Ok(BenchReport { modes, grad_over_df })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let xs = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(percentile(&xs, 0.5), 3.0);
        assert_eq!(percentile(&xs, 0.95), 5.0);
        assert_eq!(percentile(&xs, 0.0), 1.0);
    }
}
