//! Conditionally shifted neuron layers.
//!
//! Every layer exposes its pre-activation node so the conditioning stage can
//! read gradients or direct feedback there, and accepts an optional shift
//! `β`. `None` is the description phase (β ≡ 0), which the layers treat as
//! "no shift op at all" so the base network is untouched.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{CsnError, Result};

/// How the retrieved shift enters a hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ShiftMode {
    /// `σ(a) + σ(β)`
    #[default]
    Normalized,
    /// `σ(a) + β`
    RawAdditive,
    /// `σ(a + β)`
    PreActivation,
}

impl ShiftMode {
    pub const ALL: [ShiftMode; 3] = [ShiftMode::Normalized, ShiftMode::RawAdditive, ShiftMode::PreActivation];

    pub fn name(self) -> &'static str {
        match self {
            ShiftMode::Normalized => "normalized",
            ShiftMode::RawAdditive => "raw_additive",
            ShiftMode::PreActivation => "pre_activation",
        }
    }
}

impl fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShiftMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ShiftMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown shift mode `{s}` (normalized|raw_additive|pre_activation)"))
    }
}

/// Hidden nonlinearity. Both satisfy σ(0) = 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }

    /// σ′(a); relu uses the subgradient 0 at 0.
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            _ => Err(format!("unknown activation `{s}` (tanh|relu)")),
        }
    }
}

/// Shift resolution for convolutional layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Granularity {
    /// One shift per output channel, broadcast over space.
    #[default]
    Channel,
    /// One shift per output unit (channel × position).
    Unit,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Channel => "channel",
            Granularity::Unit => "unit",
        })
    }
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "channel" => Ok(Granularity::Channel),
            "unit" => Ok(Granularity::Unit),
            _ => Err(format!("unknown granularity `{s}` (channel|unit)")),
        }
    }
}

/// Pre-activation and output of one CSN layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerOut {
    pub pre: Var,
    pub out: Var,
}

fn check_beta(tape: &Tape, op: &'static str, pre: Var, beta: Var) -> Result<()> {
    let (sp, sb) = (tape.shape(pre), tape.shape(beta));
    let ok = sp.len() == sb.len() && sp.iter().zip(sb).all(|(&a, &b)| a == b || b == 1) && sp[0] == sb[0];
    if !ok {
        return Err(CsnError::dim(op, format!("shift {sb:?} does not fit pre-activation {sp:?}")));
    }
    Ok(())
}

/// `h = σ(a) ⊕ β` under `mode`, with `β` broadcast over any size-1 axes.
pub fn shifted_activation(
    tape: &mut Tape,
    act: Activation,
    pre: Var,
    beta: Option<Var>,
    mode: ShiftMode,
) -> Result<Var> {
    let Some(beta) = beta else {
        return act.apply(tape, pre);
    };
    check_beta(tape, "csn_shift", pre, beta)?;
    match mode {
        ShiftMode::Normalized => {
            let h = act.apply(tape, pre)?;
            let s = act.apply(tape, beta)?;
            tape.add_broadcast(h, s)
        }
        ShiftMode::RawAdditive => {
            let h = act.apply(tape, pre)?;
            tape.add_broadcast(h, beta)
        }
        ShiftMode::PreActivation => {
            let z = tape.add_broadcast(pre, beta)?;
            act.apply(tape, z)
        }
    }
}

/// Fully connected CSN layer, `W` stored `[L_t, L_{t−1}]`.
#[derive(Clone, Debug)]
pub struct DenseCsn {
    pub w: ParamId,
    pub b: ParamId,
    pub act: Activation,
    pub in_dim: usize,
    pub width: usize,
}

impl DenseCsn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        width: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(DenseCsn {
            w: store.add_he(format!("{name}.w"), &[width, in_dim], in_dim, rng)?,
            b: store.add_zeros(format!("{name}.b"), &[1, width])?,
            act,
            in_dim,
            width,
        })
    }

    /// Affine part `x Wᵀ + b` for `x[N, L_{t−1}]`.
    pub fn affine(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        let z = tape.matmul_t(x, w)?;
        tape.add_broadcast(z, b)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        beta: Option<Var>,
        mode: ShiftMode,
    ) -> Result<LayerOut> {
        let pre = self.affine(tape, store, x)?;
        let out = shifted_activation(tape, self.act, pre, beta, mode)?;
        Ok(LayerOut { pre, out })
    }
}

/// Softmax output layer: `softmax(a + β)` whatever the hidden shift mode.
#[derive(Clone, Debug)]
pub struct OutputCsn {
    pub dense: DenseCsn,
}

impl OutputCsn {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(OutputCsn {
            dense: DenseCsn::new(store, name, in_dim, classes, Activation::Tanh, rng)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.dense.width
    }

    /// Returns the logits `a` (pre-shift) and the probabilities.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, beta: Option<Var>) -> Result<LayerOut> {
        let pre = self.dense.affine(tape, store, x)?;
        let logits = match beta {
            Some(beta) => {
                check_beta(tape, "output_csn", pre, beta)?;
                tape.add_broadcast(pre, beta)?
            }
            None => pre,
        };
        let out = tape.softmax(logits)?;
        Ok(LayerOut { pre, out })
    }
}

/// `k×k` stride-1 same-padded convolution with a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Conv {
            w: store.add_he(format!("{name}.w"), &[out_ch, in_ch, k, k], in_ch * k * k, rng)?,
            b: store.add_zeros(format!("{name}.b"), &[1, out_ch, 1, 1])?,
            k,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        let y = tape.conv2d(x, w, self.k / 2)?;
        tape.add_broadcast(y, b)
    }
}

/// Convolutional CSN layer: conv → shifted activation → 2×2 max-pool.
#[derive(Clone, Debug)]
pub struct ConvCsn {
    pub conv: Conv,
    pub act: Activation,
    pub out_ch: usize,
}

impl ConvCsn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ConvCsn {
            conv: Conv::new(store, name, in_ch, out_ch, 3, rng)?,
            act,
            out_ch,
        })
    }

    /// `out` is the pooled activation; `pre` is the unpooled pre-activation.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        beta: Option<Var>,
        mode: ShiftMode,
    ) -> Result<LayerOut> {
        let pre = self.conv.forward(tape, store, x)?;
        let h = shifted_activation(tape, self.act, pre, beta, mode)?;
        let out = tape.maxpool2(h)?;
        Ok(LayerOut { pre, out })
    }
}

/// Residual block with CSNs on its output:
/// `h¹ = relu(conv₃ₓ₃ x)`, `h² = relu(conv₃ₓ₃ h¹)`, `h³ = conv₁ₓ₁ h²`,
/// `h⁴ = conv₁ₓ₁ x`, `a = h³ + h⁴`, then `relu(a) ⊕ β` and 2×2 max-pool.
#[derive(Clone, Debug)]
pub struct CsnResBlock {
    pub conv_a: Conv,
    pub conv_b: Conv,
    pub conv_c: Conv,
    pub conv_skip: Conv,
    pub filters: usize,
}

impl CsnResBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, filters: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(CsnResBlock {
            conv_a: Conv::new(store, &format!("{name}.conv_a"), in_ch, filters, 3, rng)?,
            conv_b: Conv::new(store, &format!("{name}.conv_b"), filters, filters, 3, rng)?,
            conv_c: Conv::new(store, &format!("{name}.conv_c"), filters, filters, 1, rng)?,
            conv_skip: Conv::new(store, &format!("{name}.conv_skip"), in_ch, filters, 1, rng)?,
            filters,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        beta: Option<Var>,
        mode: ShiftMode,
    ) -> Result<LayerOut> {
        let h1 = self.conv_a.forward(tape, store, x)?;
        let h1 = tape.relu(h1)?;
        let h2 = self.conv_b.forward(tape, store, h1)?;
        let h2 = tape.relu(h2)?;
        let h3 = self.conv_c.forward(tape, store, h2)?;
        let h4 = self.conv_skip.forward(tape, store, x)?;
        let pre = tape.add(h3, h4)?;
        let h = shifted_activation(tape, Activation::Relu, pre, beta, mode)?;
        let out = tape.maxpool2(h)?;
        Ok(LayerOut { pre, out })
    }
}

/// One LSTM step's outputs; `c` is the node conditioning reads from.
#[derive(Clone, Copy, Debug)]
pub struct LstmStep {
    pub h: Var,
    pub c: Var,
}

/// LSTM cell with shifts inside the output-gate product:
/// `h_t = (σ(c_t) ⊕ β_t) ⊙ o_t`. Gate weights are stacked `[4H, in + H]`
/// in the order input, forget, output, candidate.
#[derive(Clone, Debug)]
pub struct AdaLstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub act: Activation,
    pub in_dim: usize,
    pub hidden: usize,
}

impl AdaLstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_dim + hidden;
        Ok(AdaLstmCell {
            w: store.add_he(format!("{name}.w"), &[4 * hidden, fan_in], fan_in, rng)?,
            b: store.add_zeros(format!("{name}.b"), &[1, 4 * hidden])?,
            act: Activation::Tanh,
            in_dim,
            hidden,
        })
    }

    /// Gate parameters entered once per sequence and reused at every step.
    pub fn enter(&self, tape: &mut Tape, store: &ParamStore) -> Result<(Var, Var)> {
        Ok((tape.param(store, self.w)?, tape.param(store, self.b)?))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape,
        params: (Var, Var),
        x: Var,
        h_prev: Var,
        c_prev: Var,
        beta: Option<Var>,
        mode: ShiftMode,
    ) -> Result<LstmStep> {
        let hs = self.hidden;
        let xh = tape.concat(&[x, h_prev], 1)?;
        let z = tape.matmul_t(xh, params.0)?;
        let z = tape.add_broadcast(z, params.1)?;
        let zi = tape.narrow(z, 1, 0, hs)?;
        let zf = tape.narrow(z, 1, hs, hs)?;
        let zo = tape.narrow(z, 1, 2 * hs, hs)?;
        let zv = tape.narrow(z, 1, 3 * hs, hs)?;
        let i = tape.sigmoid(zi)?;
        let f = tape.sigmoid(zf)?;
        let o = tape.sigmoid(zo)?;
        let v = self.act.apply(tape, zv)?;
        let vi = tape.mul(v, i)?;
        let cf = tape.mul(c_prev, f)?;
        let c = tape.add(vi, cf)?;
        let s = shifted_activation(tape, self.act, c, beta, mode)?;
        let h = tape.mul(s, o)?;
        Ok(LstmStep { h, c })
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Result<(Var, Var)> {
        let h = tape.constant(Tensor::zeros(&[batch, self.hidden]))?;
        let c = tape.constant(Tensor::zeros(&[batch, self.hidden]))?;
        Ok((h, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn zero_weights_unit_shift_gives_tanh_one() {
        let mut store = ParamStore::new();
        let layer = DenseCsn::new(&mut store, "l", 3, 4, Activation::Tanh, &mut rng()).unwrap();
        store.set_value(layer.w, Tensor::zeros(&[4, 3])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3])).unwrap();
        let beta = tape.constant(Tensor::ones(&[1, 4])).unwrap();
        let out = layer.forward(&mut tape, &store, x, Some(beta), ShiftMode::Normalized).unwrap();
        for &v in tape.value(out.out).data() {
            assert!((v - 0.76159).abs() < 1e-5);
        }
    }

    #[test]
    fn output_shift_ln3() {
        let mut store = ParamStore::new();
        let layer = OutputCsn::new(&mut store, "out", 2, 2, &mut rng()).unwrap();
        store.set_value(layer.dense.w, Tensor::zeros(&[2, 2])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2])).unwrap();
        let beta = tape.constant(Tensor::new(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap()).unwrap();
        let out = layer.forward(&mut tape, &store, x, Some(beta)).unwrap();
        let p = tape.value(out.out).data();
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_lstm_step_with_unit_shift() {
        let mut store = ParamStore::new();
        let cell = AdaLstmCell::new(&mut store, "lstm", 2, 3, &mut rng()).unwrap();
        store.set_value(cell.w, Tensor::zeros(&[12, 5])).unwrap();
        let mut tape = Tape::new();
        let params = cell.enter(&mut tape, &store).unwrap();
        let x = tape.constant(Tensor::ones(&[1, 2])).unwrap();
        let (h0, c0) = cell.zero_state(&mut tape, 1).unwrap();
        let plain = cell.step(&mut tape, params, x, h0, c0, None, ShiftMode::Normalized).unwrap();
        assert_eq!(tape.value(plain.h), &Tensor::zeros(&[1, 3]));
        assert_eq!(tape.value(plain.c), &Tensor::zeros(&[1, 3]));
        let beta = tape.constant(Tensor::ones(&[1, 3])).unwrap();
        let shifted = cell.step(&mut tape, params, x, h0, c0, Some(beta), ShiftMode::Normalized).unwrap();
        for &v in tape.value(shifted.h).data() {
            assert!((v - 0.38080).abs() < 1e-5);
        }
    }

    #[test]
    fn relu_drops_negative_normalized_shift() {
        let mut store = ParamStore::new();
        let layer = DenseCsn::new(&mut store, "l", 3, 4, Activation::Relu, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap()).unwrap();
        let plain = layer.forward(&mut tape, &store, x, None, ShiftMode::Normalized).unwrap();
        let beta = tape.constant(Tensor::full(&[1, 4], -0.7)).unwrap();
        let shifted = layer.forward(&mut tape, &store, x, Some(beta), ShiftMode::Normalized).unwrap();
        assert_eq!(tape.value(plain.out), tape.value(shifted.out));
    }

    #[test]
    fn shift_shape_is_checked() {
        let mut store = ParamStore::new();
        let layer = DenseCsn::new(&mut store, "l", 3, 4, Activation::Tanh, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3])).unwrap();
        let beta = tape.constant(Tensor::ones(&[1, 5])).unwrap();
        let err = layer.forward(&mut tape, &store, x, Some(beta), ShiftMode::Normalized).unwrap_err();
        assert!(matches!(err, CsnError::Dimension { .. }));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ShiftMode::ALL {
            assert_eq!(m.name().parse::<ShiftMode>().unwrap(), m);
        }
        assert!("bogus".parse::<ShiftMode>().is_err());
    }
}
