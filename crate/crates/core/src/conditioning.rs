//! Conditioning information: what the meta learner reads off the base
//! learner's behaviour on each description example.
//!
//! Gradient mode backpropagates the description loss of each example on its
//! own scratch tape and captures `∂L/∂a` at every CSN pre-activation. Direct
//! feedback multiplies `σ′(a)` by the output error `ŷ′ − y′` and needs only
//! the forward pass.

use std::fmt;
use std::str::FromStr;

use crate::csn::{Activation, Granularity};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{CsnError, Result};
use crate::learners::Inputs;

/// Default preprocessing constant.
pub const DEFAULT_P: f64 = 7.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConditioningMode {
    Gradient { p: f64 },
    DirectFeedback,
}

impl Default for ConditioningMode {
    fn default() -> Self {
        ConditioningMode::DirectFeedback
    }
}

impl ConditioningMode {
    pub fn name(&self) -> &'static str {
        match self {
            ConditioningMode::Gradient { .. } => "grad",
            ConditioningMode::DirectFeedback => "df",
        }
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConditioningMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "grad" | "gradient" => Ok(ConditioningMode::Gradient { p: DEFAULT_P }),
            "df" | "direct_feedback" => Ok(ConditioningMode::DirectFeedback),
            _ => Err(format!("unknown conditioning mode `{s}` (grad|df)")),
        }
    }
}

/// Log-magnitude / sign encoding of a gradient component:
/// `(ln|∇| / p, sgn ∇)` when `|∇| ≥ e^{−p}`, else `(−1, e^p ∇)`.
pub fn preprocess_gradient(g: f64, p: f64) -> (f64, f64) {
    if g.abs() >= (-p).exp() {
        (g.abs().ln() / p, g.signum())
    } else {
        (-1.0, p.exp() * g)
    }
}

/// A CSN site seen during the description forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Slot {
    /// Pre-activation node (`a_t`, or `c_t` for recurrent cells).
    pub pre: Var,
    /// Hidden nonlinearity; `None` marks the softmax output (σ′ ≡ 1).
    pub act: Option<Activation>,
}

/// Everything conditioning needs from one description forward pass.
#[derive(Clone, Debug)]
pub struct DescribeTrace {
    pub probs: Var,
    pub slots: Vec<Slot>,
}

/// Implemented by models that can run their unshifted (β ≡ 0) forward pass.
pub trait Describe {
    fn describe_trace(&self, tape: &mut Tape, store: &crate::diffcore::ParamStore, x: &Inputs) -> Result<DescribeTrace>;
    fn granularity(&self) -> Granularity;
    fn slot_count(&self) -> usize;
}

/// Per slot, a constant `[n, L, m]` tensor plus instrumentation.
#[derive(Clone, Debug)]
pub struct ConditioningInfo {
    pub slots: Vec<Tensor>,
    /// Backward traversals performed to produce this info.
    pub backward_passes: usize,
}

impl ConditioningInfo {
    pub fn examples(&self) -> usize {
        self.slots.first().map_or(0, |t| t.shape()[0])
    }

    /// Width `m` of the per-neuron info vectors.
    pub fn info_dim(&self) -> usize {
        self.slots.first().map_or(0, |t| t.shape()[2])
    }
}

/// Collapses a `[n, ...]` per-unit tensor to `[n, L]` rows, averaging over
/// space for channel-granular conv layers.
fn reduce_rows(t: &Tensor, granularity: Granularity) -> Tensor {
    let s = t.shape();
    let n = s[0];
    if s.len() == 4 && granularity == Granularity::Channel {
        let plane = s[2] * s[3];
        let data = t
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        Tensor::new(vec![n, s[1]], data).expect("shape")
    } else {
        let l = t.numel() / n;
        t.reshape(&[n, l]).expect("shape")
    }
}

fn check_slots(model: &impl Describe, trace: &DescribeTrace) -> Result<()> {
    if trace.slots.len() != model.slot_count() {
        return Err(CsnError::Config(format!(
            "model declares {} CSN sites but its description pass registered {}",
            model.slot_count(),
            trace.slots.len()
        )));
    }
    Ok(())
}

/// Gradient information, one scratch tape and one backward pass per
/// description example. With `preprocess` false the raw gradient is kept
/// (`m = 1`), as the scalar-λ value function expects.
pub fn extract_gradient_info(
    model: &impl Describe,
    store: &crate::diffcore::ParamStore,
    x: &Inputs,
    y: &Tensor,
    p: f64,
    preprocess: bool,
) -> Result<ConditioningInfo> {
    let n = x.len();
    if n == 0 {
        return Err(CsnError::EmptyDescription);
    }
    let granularity = model.granularity();
    let mut per_slot: Vec<Vec<f64>> = vec![Vec::new(); model.slot_count()];
    let mut widths = vec![0; model.slot_count()];
    let mut passes = 0;
    for i in 0..n {
        let mut tape = Tape::new();
        let trace = model.describe_trace(&mut tape, store, &x.select(&[i]))?;
        check_slots(model, &trace)?;
        let loss = tape.cross_entropy(trace.probs, &y.select_rows(&[i]))?;
        let grads = tape.backward(loss)?;
        passes += tape.stats().backward_passes;
        for (k, slot) in trace.slots.iter().enumerate() {
            let g = grads.get_or_zeros(slot.pre, tape.shape(slot.pre));
            let rows = reduce_rows(&g, granularity);
            widths[k] = rows.shape()[1];
            for &v in rows.data() {
                if preprocess {
                    let (a, b) = preprocess_gradient(v, p);
                    per_slot[k].extend([a, b]);
                } else {
                    per_slot[k].push(v);
                }
            }
        }
    }
    let m = if preprocess { 2 } else { 1 };
    let slots = per_slot
        .into_iter()
        .zip(widths)
        .map(|(data, l)| Tensor::new(vec![n, l, m], data))
        .collect::<Result<_>>()?;
    Ok(ConditioningInfo {
        slots,
        backward_passes: passes,
    })
}

/// Builds direct-feedback info `σ′(a) ⊗ (ŷ′ − y′)` on `tape` from a trace
/// recorded there. The result is differentiable when the trace is; pass it
/// through [`Tape::stop_grad`] or use [`extract_df_info`] for constants.
pub fn df_info_on_tape(
    tape: &mut Tape,
    trace: &DescribeTrace,
    y: &Tensor,
    granularity: Granularity,
) -> Result<Vec<Var>> {
    let target = tape.constant(y.clone())?;
    let err = tape.sub(trace.probs, target)?;
    let n = y.shape()[0];
    let mut out = Vec::with_capacity(trace.slots.len());
    for slot in &trace.slots {
        let shape = tape.shape(slot.pre).to_vec();
        let deriv = match slot.act {
            Some(Activation::Tanh) => {
                let t = tape.tanh(slot.pre)?;
                let tt = tape.mul(t, t)?;
                let one = tape.constant(Tensor::ones(&shape))?;
                tape.sub(one, tt)?
            }
            // relu′ is piecewise constant, so a constant mask is exact
            Some(Activation::Relu) => {
                let mask = tape.value(slot.pre).map(|a| Activation::Relu.derivative(a));
                tape.constant(mask)?
            }
            None => tape.constant(Tensor::ones(&shape))?,
        };
        let rows = if shape.len() == 4 && granularity == Granularity::Channel {
            let r = tape.reshape(deriv, &[n, shape[1], shape[2] * shape[3]])?;
            tape.mean_last(r)?
        } else {
            let l = shape[1..].iter().product();
            tape.reshape(deriv, &[n, l])?
        };
        out.push(tape.batch_outer(rows, err)?);
    }
    Ok(out)
}

/// Direct-feedback info from one batched forward pass with no backward pass.
pub fn extract_df_info(
    model: &impl Describe,
    store: &crate::diffcore::ParamStore,
    x: &Inputs,
    y: &Tensor,
) -> Result<ConditioningInfo> {
    if x.is_empty() {
        return Err(CsnError::EmptyDescription);
    }
    let mut tape = Tape::no_grad();
    let trace = model.describe_trace(&mut tape, store, x)?;
    check_slots(model, &trace)?;
    let vars = df_info_on_tape(&mut tape, &trace, y, model.granularity())?;
    Ok(ConditioningInfo {
        slots: vars.into_iter().map(|v| tape.value(v).clone()).collect(),
        backward_passes: tape.stats().backward_passes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocess_reference_points() {
        assert_eq!(preprocess_gradient(1.0, 7.0), (0.0, 1.0));
        let (a, b) = preprocess_gradient((-8f64).exp(), 7.0);
        assert_eq!(a, -1.0);
        assert!((b - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(preprocess_gradient(0.0, 7.0), (-1.0, 0.0));
    }

    #[test]
    fn preprocess_branches_meet_at_boundary() {
        for sign in [1.0, -1.0] {
            let g = sign * (-7f64).exp();
            let large = (g.abs().ln() / 7.0, g.signum());
            let small = (-1.0, 7f64.exp() * g);
            assert!((large.0 - small.0).abs() < 1e-12);
            assert!((large.1 - small.1).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_reduction_is_spatial_mean() {
        let t = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 3.0, -2.0, 0.0]).unwrap();
        assert_eq!(reduce_rows(&t, Granularity::Channel).data(), &[2.0, -1.0]);
        assert_eq!(reduce_rows(&t, Granularity::Unit).shape(), &[1, 4]);
    }
}
