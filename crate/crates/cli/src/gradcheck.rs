//! Finite-difference check of the full episode loss, per parameter group.

use std::fmt;

use csn_core::config::Config;
use csn_core::diffcore::gradcheck::find_faulty_ops;
use csn_core::diffcore::{finite_diff_check, OpKind, ParamId, Tape};
use csn_core::episodes::{episode_seed, episode_shape, sample_episode, Split};
use csn_core::{CsnError, Result};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::build;

/// Worst tolerated relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub group: String,
    pub checked: usize,
    pub kinks_skipped: usize,
    pub worst: f64,
    /// `name[index]` of the worst coordinate.
    pub worst_at: String,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
    /// Op kinds whose backward rule fails its own check; only searched when
    /// some group fails.
    pub faulty_ops: Vec<(OpKind, f64)>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.worst < TOLERANCE)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            let status = if g.worst < TOLERANCE { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<6} worst rel error {:.3e} at {} ({} coords, {} kinks skipped) {status}",
                g.group, g.worst, g.worst_at, g.checked, g.kinks_skipped
            )?;
        }
        for (op, err) in &self.faulty_ops {
            writeln!(f, "faulty backward rule: {op} (self-check error {err:.3e})")?;
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Checks `samples` random coordinates per parameter group of the model
/// `cfg` describes on one training episode. Dropout is forced off; with
/// `cond.stop_grad` the conditioning information is frozen as the
/// constant the training graph treats it as.
pub fn run_gradcheck(cfg: &Config, samples: usize, h: f64, seed: u64) -> Result<GradcheckReport> {
    if samples == 0 {
        return Err(CsnError::Config("gradcheck needs at least one sample per group".into()));
    }
    let mut cfg = cfg.clone();
    cfg.set("model.dropout", "0")?;
    let (source, cfg, mut model) = build(&cfg)?;
    let shape = episode_shape(&cfg, &source)?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, Split::Train, 0));
    let ep = sample_episode(&source, Split::Train, shape, &mut rng)?;
    let frozen = if model.spec().shifts && model.spec().stop_grad {
        Some(model.net.conditioning(&model.store, &ep.support_x, &ep.support_onehot())?)
    } else {
        None
    };

    let mut groups = Vec::new();
    for group in model.store.groups() {
        let params: Vec<(ParamId, usize)> = model
            .store
            .iter()
            .filter(|(_, p)| p.group() == group)
            .map(|(id, p)| (id, p.value.numel()))
            .collect();
        let total: usize = params.iter().map(|p| p.1).sum();
        let coords: Vec<(ParamId, usize)> = index::sample(&mut rng, total, samples.min(total))
            .into_iter()
            .map(|mut flat| {
                for &(id, n) in &params {
                    if flat < n {
                        return (id, flat);
                    }
                    flat -= n;
                }
                unreachable!("flat index within total")
            })
            .collect();
        let net = &model.net;
        let report = finite_diff_check(&mut model.store, &coords, h, |store, tape| {
            net.run_episode(store, tape, &ep, frozen.as_ref(), None).map(|r| r.loss)
        })?;
        let worst_at = report.worst().map_or_else(
            || "-".to_string(),
            |c| format!("{}[{}]", model.store.get(c.param).name, c.index),
        );
        groups.push(GroupCheck {
            group,
            checked: report.coords.len(),
            kinks_skipped: report.kinks_skipped,
            worst: report.max_rel_error,
            worst_at,
        });
    }

    let mut report = GradcheckReport {
        groups,
        faulty_ops: Vec::new(),
    };
    if !report.passed() {
        let mut tape = Tape::new();
        model.net.run_episode(&model.store, &mut tape, &ep, frozen.as_ref(), None)?;
        report.faulty_ops = find_faulty_ops(&tape.op_kinds(), TOLERANCE);
    }
    Ok(report)
}
