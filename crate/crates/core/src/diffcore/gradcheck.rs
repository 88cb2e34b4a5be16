//! Central-difference gradient oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::param::{ParamId, ParamStore};
use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::{CsnError, Result};

/// Floor of the relative-error denominator, per unit of loss magnitude.
/// Gradients smaller than this are below what rounding in a forward pass of
/// that magnitude lets finite differences resolve.
pub const REL_FLOOR: f64 = 1e-8;

/// Outcome for one checked coordinate.
#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Step actually used (may be smaller than requested near a kink).
    pub h: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub coords: Vec<CoordCheck>,
    /// Coordinates whose one-sided differences disagree at every step size,
    /// i.e. the function has a kink (relu, max-pool) inside the stencil.
    pub kinks_skipped: usize,
}

impl FdReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|analytic − numeric| / max(|analytic|, REL_FLOOR · max(|f|, 1))` for a
/// function value `f`.
pub fn relative_error(analytic: f64, numeric: f64, f: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(REL_FLOOR * f.abs().max(1.0))
}

fn eval(store: &ParamStore, f: &mut impl FnMut(&ParamStore, &mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let root = f(store, &mut tape)?;
    let v = tape.value(root);
    if v.numel() != 1 {
        return Err(CsnError::Usage("checked function must return a scalar".into()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of the scalar built by `f` against the
/// fourth-order central difference
/// `(8(f(θ+h) − f(θ−h)) − (f(θ+2h) − f(θ−2h))) / 12h` at each
/// `(param, flat index)` in `coords`. Its O(h⁴) truncation error allows
/// steps large enough that rounding in `f` does not swamp small gradients.
/// The estimate is repeated at h/2 as a smoothness check. `f` is rebuilt on
/// a fresh tape for every evaluation and must be deterministic.
///
/// When the two estimates disagree (a kink inside the stencil) the step is
/// shrunk up to three times; a coordinate that never becomes smooth is
/// skipped and counted in [`FdReport::kinks_skipped`].
pub fn finite_diff_check(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    mut f: impl FnMut(&ParamStore, &mut Tape) -> Result<Var>,
) -> Result<FdReport> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(CsnError::Usage(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let root = f(store, &mut tape)?;
    let f0 = tape.value(root).item();
    let grads = tape.backward(root)?;
    let again = eval(store, &mut f)?;
    if again.to_bits() != f0.to_bits() {
        return Err(CsnError::OracleInvalid(format!(
            "two forward passes disagree ({f0:e} vs {again:e})"
        )));
    }

    let mut report = FdReport::default();
    for &(pid, index) in coords {
        let shape = store.value(pid).shape().to_vec();
        let analytic = grads.param_grad(pid, &shape).data()[index];
        let original = store.value(pid).data()[index];
        let mut step = h;
        let mut accepted = None;
        for _ in 0..4 {
            // f at original + k·step/2 for k = ±1, ±2, ±4
            let mut at = |k: f64| {
                store.value_mut(pid).data_mut()[index] = original + k * step / 2.0;
                let v = eval(store, &mut f);
                store.value_mut(pid).data_mut()[index] = original;
                v
            };
            let (p1, m1, p2, m2, p4, m4) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?, at(4.0)?, at(-4.0)?);
            let numeric = (8.0 * (p2 - m2) - (p4 - m4)) / (12.0 * step);
            let half = (8.0 * (p1 - m1) - (p2 - m2)) / (6.0 * step);
            // For smooth f the gap between one-sided slopes is h·f″ + O(h³),
            // so it doubles with the step, and the estimates at h and h/2
            // agree to O(h⁴). A kink at the centre leaves the gap constant;
            // one off centre weighs into the two estimates differently.
            let rounding = 1e-14 * f0.abs().max(1.0) / step;
            let gap = (p2 - 2.0 * f0 + m2) / step;
            let gap2 = (p4 - 2.0 * f0 + m4) / (2.0 * step);
            let scales = (gap2 - 2.0 * gap).abs() <= 0.1 * gap2.abs() + rounding;
            let smooth = scales && (numeric - half).abs() <= 1e-6 * half.abs() + rounding;
            if smooth || relative_error(analytic, numeric, f0) < 1e-6 {
                accepted = Some((numeric, step));
                break;
            }
            step /= 10.0;
            if step < 1e-7 {
                break;
            }
        }
        match accepted {
            Some((numeric, step)) => {
                let rel = relative_error(analytic, numeric, f0);
                report.max_rel_error = report.max_rel_error.max(rel);
                report.coords.push(CoordCheck {
                    param: pid,
                    index,
                    analytic,
                    numeric,
                    rel_error: rel,
                    h: step,
                });
            }
            None => report.kinks_skipped += 1,
        }
    }
    Ok(report)
}

/// Picks up to `k` distinct flat coordinates of `pid` uniformly at random.
pub fn sample_coords(store: &ParamStore, pid: ParamId, k: usize, rng: &mut impl Rng) -> Vec<(ParamId, usize)> {
    let numel = store.value(pid).numel();
    rand::seq::index::sample(rng, numel, k.min(numel))
        .into_iter()
        .map(|i| (pid, i))
        .collect()
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// Values bounded away from zero (keeps relu/log away from their kinks).
fn signed_away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Checks the backward rule of a single op kind on a small random graph and
/// returns the worst relative error. Kinds without a differentiable input
/// (leaves, stop-gradient) return 0.
pub fn op_self_check(kind: OpKind, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut pids = Vec::new();
    let mut add = |store: &mut ParamStore, t: Tensor| {
        let id = store.add(format!("p{}", store.len()), t).expect("fresh name");
        pids.push(id);
        id
    };
    let a23 = random_tensor(&[2, 3], &mut rng, -1.0, 1.0);
    let b23 = random_tensor(&[2, 3], &mut rng, -1.0, 1.0);
    let weights = random_tensor(&[256], &mut rng, -1.0, 1.0);
    let target = {
        let mut y = Tensor::zeros(&[2, 3]);
        y.data_mut()[1] = 1.0;
        y.data_mut()[3] = 1.0;
        y
    };

    let (p0, p1) = match kind {
        OpKind::Leaf | OpKind::Param | OpKind::StopGrad => return Ok(0.0),
        OpKind::MatMul => (
            add(&mut store, a23.clone()),
            add(&mut store, random_tensor(&[3, 4], &mut rng, -1.0, 1.0)),
        ),
        OpKind::Conv2d => (
            add(&mut store, random_tensor(&[2, 2, 4, 3], &mut rng, -1.0, 1.0)),
            add(&mut store, random_tensor(&[3, 2, 3, 3], &mut rng, -1.0, 1.0)),
        ),
        OpKind::MaxPool2 => {
            // distinct values at least 0.05 apart so h never swaps a maximum
            let mut vals: Vec<f64> = (0..30).map(|i| i as f64 * 0.05).collect();
            use rand::seq::SliceRandom;
            vals.shuffle(&mut rng);
            (add(&mut store, Tensor::new(vec![2, 3, 5], vals).expect("shape")), add(&mut store, Tensor::scalar(0.0)))
        }
        OpKind::Relu | OpKind::Log => (
            add(
                &mut store,
                if kind == OpKind::Log {
                    random_tensor(&[2, 3], &mut rng, 0.3, 2.0)
                } else {
                    signed_away_from_zero(&[2, 3], &mut rng)
                },
            ),
            add(&mut store, Tensor::scalar(0.0)),
        ),
        OpKind::AddBroadcast => (add(&mut store, a23.clone()), add(&mut store, random_tensor(&[1, 3], &mut rng, -1.0, 1.0))),
        OpKind::Embedding => (
            add(&mut store, random_tensor(&[5, 3], &mut rng, -1.0, 1.0)),
            add(&mut store, Tensor::scalar(0.0)),
        ),
        OpKind::Cosine => (
            add(&mut store, a23.clone()),
            add(&mut store, random_tensor(&[4, 3], &mut rng, -1.0, 1.0)),
        ),
        OpKind::BatchOuter => (
            add(&mut store, a23.clone()),
            add(&mut store, random_tensor(&[2, 4], &mut rng, -1.0, 1.0)),
        ),
        OpKind::CrossEntropy => (
            add(&mut store, a23.clone()),
            add(&mut store, random_tensor(&[2, 3], &mut rng, 0.2, 1.0)),
        ),
        _ => (add(&mut store, a23.clone()), add(&mut store, b23.clone())),
    };

    let reduce = move |tape: &mut Tape, v: Var| -> Result<Var> {
        let n = tape.value(v).numel();
        let shape = tape.value(v).shape().to_vec();
        let w = Tensor::new(shape, weights.data()[..n].to_vec())?;
        let w = tape.constant(w)?;
        let prod = tape.mul(v, w)?;
        tape.sum(prod)
    };

    let build = move |store: &ParamStore, tape: &mut Tape| -> Result<Var> {
        let x = tape.param(store, p0)?;
        let y = tape.param(store, p1)?;
        let out = match kind {
            OpKind::MatMul => tape.matmul(x, y)?,
            OpKind::Transpose => tape.transpose(x)?,
            OpKind::Add => tape.add(x, y)?,
            OpKind::Sub => tape.sub(x, y)?,
            OpKind::Mul => tape.mul(x, y)?,
            OpKind::Scale => tape.scale(x, -1.7)?,
            OpKind::AddBroadcast => tape.add_broadcast(x, y)?,
            OpKind::Concat => tape.concat(&[x, y, x], 1)?,
            OpKind::Narrow => tape.narrow(x, 1, 1, 2)?,
            OpKind::Reshape => tape.reshape(x, &[3, 2])?,
            OpKind::Conv2d => tape.conv2d(x, y, 1)?,
            OpKind::MaxPool2 => tape.maxpool2(x)?,
            OpKind::Sum => {
                let s = tape.sum(x)?;
                return tape.mul(s, s);
            }
            OpKind::Mean => {
                let s = tape.mean(x)?;
                return tape.mul(s, s);
            }
            OpKind::MeanLast => tape.mean_last(x)?,
            OpKind::Tanh => tape.tanh(x)?,
            OpKind::Sigmoid => tape.sigmoid(x)?,
            OpKind::Relu => tape.relu(x)?,
            OpKind::Softmax => tape.softmax(x)?,
            OpKind::Log => tape.log(x)?,
            OpKind::CrossEntropy => {
                // fused path through softmax plus the plain-probability path
                let p = tape.softmax(x)?;
                let fused = tape.cross_entropy(p, &target)?;
                let q = tape.softmax(y)?;
                let q = tape.scale(q, 1.0)?;
                let plain = tape.cross_entropy(q, &target)?;
                return tape.add(fused, plain);
            }
            OpKind::Embedding => tape.embedding(x, &[4, 0, 4, 2])?,
            OpKind::Cosine => tape.cosine(x, y)?,
            OpKind::BatchOuter => tape.batch_outer(x, y)?,
            OpKind::Leaf | OpKind::Param | OpKind::StopGrad => unreachable!(),
        };
        reduce(tape, out)
    };

    let mut coords = Vec::new();
    for pid in pids {
        for i in 0..store.value(pid).numel() {
            coords.push((pid, i));
        }
    }
    Ok(finite_diff_check(&mut store, &coords, 1e-5, build)?.max_rel_error)
}

/// Runs [`op_self_check`] for every kind in `kinds`, returning those whose
/// backward rule disagrees with finite differences beyond `tol`.
pub fn find_faulty_ops(kinds: &[OpKind], tol: f64) -> Vec<(OpKind, f64)> {
    kinds
        .iter()
        .filter_map(|&k| match op_self_check(k, 7) {
            Ok(err) if err < tol => None,
            Ok(err) => Some((k, err)),
            Err(_) => Some((k, f64::INFINITY)),
        })
        .collect()
}
