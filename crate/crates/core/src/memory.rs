//! Key-value shift memory: keys `k′ᵢ = f(x′ᵢ)`, values `V_t = g(I_t)` and
//! cosine attention that turns a query key into per-layer shifts.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::csn::{Activation, AdaLstmCell, ConvCsn, DenseCsn, ShiftMode};
use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{CsnError, Result};
use crate::learners::Inputs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum AttentionMode {
    #[default]
    Soft,
    Hard,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Soft => "soft",
            AttentionMode::Hard => "hard",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "soft" => Ok(AttentionMode::Soft),
            "hard" => Ok(AttentionMode::Hard),
            _ => Err(format!("unknown attention mode `{s}` (soft|hard)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ValueKind {
    /// Three-layer relu MLP, `m → h → h → 1`.
    #[default]
    Mlp3,
    /// `V = λ·∇` on raw gradients.
    ScalarLambda,
    /// Single linear unit, `m → 1`.
    Perceptron1,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueKind::Mlp3 => "mlp3",
            ValueKind::ScalarLambda => "scalar_lambda",
            ValueKind::Perceptron1 => "perceptron1",
        })
    }
}

impl FromStr for ValueKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mlp3" => Ok(ValueKind::Mlp3),
            "scalar_lambda" => Ok(ValueKind::ScalarLambda),
            "perceptron1" => Ok(ValueKind::Perceptron1),
            _ => Err(format!("unknown value function `{s}` (mlp3|scalar_lambda|perceptron1)")),
        }
    }
}

/// Initial bias of the value output. Averaged shifts start out positive so
/// relu-shifted neurons pass gradient to the value function from the start.
pub const VALUE_BIAS_INIT: f64 = 0.5;

fn value_out(store: &mut ParamStore, in_dim: usize, rng: &mut impl Rng) -> Result<DenseCsn> {
    let out = DenseCsn::new(store, "value.out", in_dim, 1, Activation::Tanh, rng)?;
    store.set_value(out.b, Tensor::new(vec![1, 1], vec![VALUE_BIAS_INIT])?)?;
    Ok(out)
}

/// Coordinate-wise value function `g`: each neuron's `m`-vector of
/// conditioning info maps to one scalar, with parameters shared by every
/// layer.
#[derive(Clone, Debug)]
pub enum ValueFunction {
    Mlp3 { layers: [DenseCsn; 2], out: DenseCsn },
    ScalarLambda { lambda: ParamId },
    Perceptron1 { out: DenseCsn },
}

impl ValueFunction {
    pub fn new(
        store: &mut ParamStore,
        kind: ValueKind,
        info_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            ValueKind::Mlp3 => ValueFunction::Mlp3 {
                layers: [
                    DenseCsn::new(store, "value.fc1", info_dim, hidden, Activation::Relu, rng)?,
                    DenseCsn::new(store, "value.fc2", hidden, hidden, Activation::Relu, rng)?,
                ],
                out: value_out(store, hidden, rng)?,
            },
            ValueKind::ScalarLambda => {
                if info_dim != 1 {
                    return Err(CsnError::Config(
                        "the scalar-lambda value function needs raw gradient info (m = 1)".into(),
                    ));
                }
                ValueFunction::ScalarLambda {
                    lambda: store.add("value.lambda", Tensor::ones(&[1, 1]))?,
                }
            }
            ValueKind::Perceptron1 => ValueFunction::Perceptron1 {
                out: value_out(store, info_dim, rng)?,
            },
        })
    }

    pub fn kind(&self) -> ValueKind {
        match self {
            ValueFunction::Mlp3 { .. } => ValueKind::Mlp3,
            ValueFunction::ScalarLambda { .. } => ValueKind::ScalarLambda,
            ValueFunction::Perceptron1 { .. } => ValueKind::Perceptron1,
        }
    }

    /// Parameters of the final map, which `zero_output` clears.
    pub fn output_params(&self) -> Vec<ParamId> {
        match self {
            ValueFunction::Mlp3 { out, .. } | ValueFunction::Perceptron1 { out } => vec![out.w, out.b],
            ValueFunction::ScalarLambda { lambda } => vec![*lambda],
        }
    }

    /// Forces every value to zero by clearing the output map.
    pub fn zero_output(&self, store: &mut ParamStore) -> Result<()> {
        for id in self.output_params() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape))?;
        }
        Ok(())
    }

    /// Applies `g` to rows `[r, m]`, giving `[r, 1]`.
    fn apply_rows(&self, tape: &mut Tape, store: &ParamStore, rows: Var) -> Result<Var> {
        match self {
            ValueFunction::Mlp3 { layers, out } => {
                let mut h = rows;
                for l in layers {
                    h = l.forward(tape, store, h, None, ShiftMode::Normalized)?.out;
                }
                out.affine(tape, store, h)
            }
            ValueFunction::ScalarLambda { lambda } => {
                let l = tape.param(store, *lambda)?;
                tape.matmul(rows, l)
            }
            ValueFunction::Perceptron1 { out } => out.affine(tape, store, rows),
        }
    }

    /// Maps every slot's `[n, L_t, m]` info to values and lays them side by
    /// side as one `[n, Σ L_t]` matrix (returned with the slot widths).
    pub fn write_values(&self, tape: &mut Tape, store: &ParamStore, info: &[Var]) -> Result<(Var, Vec<usize>)> {
        let first = info.first().ok_or_else(|| CsnError::Config("model has no CSN sites".into()))?;
        let (n, m) = (tape.shape(*first)[0], tape.shape(*first)[2]);
        let mut widths = Vec::with_capacity(info.len());
        for &slot in info {
            let s = tape.shape(slot);
            if s.len() != 3 || s[0] != n || s[2] != m {
                return Err(CsnError::dim("write_values", format!("slot info {s:?}, expected [{n}, L, {m}]")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        // [n, ΣL, m] is example-major, so its rows reshape straight into [n, ΣL]
        let joined = if info.len() == 1 { info[0] } else { tape.concat(info, 1)? };
        let rows = tape.reshape(joined, &[n * total, m])?;
        let v = self.apply_rows(tape, store, rows)?;
        Ok((tape.reshape(v, &[n, total])?, widths))
    }
}

/// Input embedding `f` producing `d`-dimensional keys.
#[derive(Clone, Debug)]
pub enum KeyFunction {
    Mlp { hidden: Vec<DenseCsn>, out: DenseCsn },
    Cnn { convs: Vec<ConvCsn>, out: DenseCsn },
    Lstm { embed: ParamId, cell: AdaLstmCell, out: DenseCsn },
}

impl KeyFunction {
    pub fn mlp(store: &mut ParamStore, in_dim: usize, hidden: &[usize], d: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(DenseCsn::new(store, &format!("key.fc{}", i + 1), prev, h, Activation::Relu, rng)?);
            prev = h;
        }
        let out = DenseCsn::new(store, "key.out", prev, d, Activation::Tanh, rng)?;
        Ok(KeyFunction::Mlp { hidden: layers, out })
    }

    /// Plain CNN (3×3 conv, relu, 2×2 pool per layer) then a linear map.
    pub fn cnn(
        store: &mut ParamStore,
        in_ch: usize,
        hw: (usize, usize),
        layers: usize,
        filters: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut convs = Vec::new();
        let (mut h, mut w, mut c) = (hw.0, hw.1, in_ch);
        for i in 0..layers {
            convs.push(ConvCsn::new(store, &format!("key.conv{}", i + 1), c, filters, Activation::Relu, rng)?);
            c = filters;
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        let out = DenseCsn::new(store, "key.out", c * h * w, d, Activation::Tanh, rng)?;
        Ok(KeyFunction::Cnn { convs, out })
    }

    pub fn lstm(
        store: &mut ParamStore,
        vocab: usize,
        embed_dim: usize,
        hidden: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embed = store.add_he("key.embed", &[vocab, embed_dim], embed_dim, rng)?;
        let cell = AdaLstmCell::new(store, "key.lstm", embed_dim, hidden, rng)?;
        let out = DenseCsn::new(store, "key.out", hidden, d, Activation::Tanh, rng)?;
        Ok(KeyFunction::Lstm { embed, cell, out })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: &Inputs) -> Result<Var> {
        match (self, x) {
            (KeyFunction::Mlp { hidden, out }, Inputs::Vectors(t)) => {
                let mut h = tape.constant(t.clone())?;
                for l in hidden {
                    h = l.forward(tape, store, h, None, ShiftMode::Normalized)?.out;
                }
                out.affine(tape, store, h)
            }
            (KeyFunction::Cnn { convs, out }, Inputs::Images(t)) => {
                let mut h = tape.constant(t.clone())?;
                for c in convs {
                    h = c.forward(tape, store, h, None, ShiftMode::Normalized)?.out;
                }
                let n = tape.shape(h)[0];
                let flat = tape.shape(h)[1..].iter().product();
                let h = tape.reshape(h, &[n, flat])?;
                out.affine(tape, store, h)
            }
            (KeyFunction::Lstm { embed, cell, out }, Inputs::Tokens(seq)) => {
                let table = tape.param(store, *embed)?;
                let params = cell.enter(tape, store)?;
                let (mut h, mut c) = cell.zero_state(tape, seq.n)?;
                for t in 0..seq.len {
                    let x_t = tape.embedding(table, &seq.column(t))?;
                    let step = cell.step(tape, params, x_t, h, c, None, ShiftMode::Normalized)?;
                    (h, c) = seq.carry(tape, t, (step.h, step.c), (h, c))?;
                }
                out.affine(tape, store, h)
            }
            _ => Err(CsnError::Config("key function does not match the input kind".into())),
        }
    }
}

/// Keys and side-by-side slot values of one episode's description.
#[derive(Clone, Debug)]
pub struct BankVars {
    pub keys: Var,
    pub values: Var,
    pub widths: Vec<usize>,
}

/// Memory contents detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    /// `[n, d]`
    pub keys: Tensor,
    /// `[n, Σ L_t]`
    pub values: Tensor,
    pub widths: Vec<usize>,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values of slot `k` as `[n, L_k]`.
    pub fn slot_values(&self, k: usize) -> Tensor {
        let start: usize = self.widths[..k].iter().sum();
        let total: usize = self.widths.iter().sum();
        let n = self.len();
        let mut data = Vec::with_capacity(n * self.widths[k]);
        for i in 0..n {
            data.extend_from_slice(&self.values.data()[i * total + start..][..self.widths[k]]);
        }
        Tensor::new(vec![n, self.widths[k]], data).expect("shape")
    }

    pub fn to_vars(&self, tape: &mut Tape) -> Result<BankVars> {
        Ok(BankVars {
            keys: tape.constant(self.keys.clone())?,
            values: tape.constant(self.values.clone())?,
            widths: self.widths.clone(),
        })
    }

    pub fn from_vars(tape: &Tape, bank: &BankVars) -> Self {
        MemoryBank {
            keys: tape.value(bank.keys).clone(),
            values: tape.value(bank.values).clone(),
            widths: bank.widths.clone(),
        }
    }
}

/// Attention weights `[m, n]` for query keys `[m, d]`.
pub fn attention(tape: &mut Tape, query_keys: Var, keys: Var) -> Result<Var> {
    let cos = tape.cosine(query_keys, keys)?;
    tape.softmax(cos)
}

/// Index of the largest cosine per query row; ties go to the lowest index.
pub fn hard_indices(cos: &Tensor) -> Vec<usize> {
    let n = cos.shape()[1];
    cos.data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Per-slot shifts `[m, L_t]` for query keys `[m, d]`. Soft mode returns
/// `softmax(cos) · V`; hard mode copies the value row of the most similar
/// key. One set of weights serves every slot.
pub fn read_shifts(tape: &mut Tape, bank: &BankVars, query_keys: Var, mode: AttentionMode) -> Result<Vec<Var>> {
    if tape.shape(bank.keys)[0] == 0 {
        return Err(CsnError::EmptyDescription);
    }
    let all = match mode {
        AttentionMode::Soft => {
            let alpha = attention(tape, query_keys, bank.keys)?;
            tape.matmul(alpha, bank.values)?
        }
        AttentionMode::Hard => {
            let cos = tape.cosine(query_keys, bank.keys)?;
            let idx = hard_indices(tape.value(cos));
            tape.embedding(bank.values, &idx)?
        }
    };
    let mut out = Vec::with_capacity(bank.widths.len());
    let mut start = 0;
    for &w in &bank.widths {
        out.push(tape.narrow(all, 1, start, w)?);
        start += w;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(tape: &mut Tape, keys: Tensor, values: Tensor, widths: Vec<usize>) -> BankVars {
        BankVars {
            keys: tape.constant(keys).unwrap(),
            values: tape.constant(values).unwrap(),
            widths,
        }
    }

    #[test]
    fn single_entry_memory_returns_its_row() {
        for mode in [AttentionMode::Soft, AttentionMode::Hard] {
            let mut tape = Tape::new();
            let b = bank(
                &mut tape,
                Tensor::new(vec![1, 2], vec![0.3, -0.4]).unwrap(),
                Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap(),
                vec![2, 1],
            );
            let q = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
            let shifts = read_shifts(&mut tape, &b, q, mode).unwrap();
            assert_eq!(tape.value(shifts[0]).data(), &[1.0, 2.0]);
            assert_eq!(tape.value(shifts[1]).data(), &[3.0]);
        }
    }

    #[test]
    fn two_keys_orthogonal_and_aligned() {
        let mut tape = Tape::new();
        let keys = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let q = tape.constant(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap()).unwrap();
        let a = attention(&mut tape, q, keys).unwrap();
        let a = tape.value(a).data();
        assert!((a[0] - 0.73106).abs() < 1e-5 && (a[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut tape = Tape::new();
        let b = bank(
            &mut tape,
            Tensor::new(vec![3, 2], vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap(),
            Tensor::new(vec![3, 1], vec![1.0, 2.0, 6.0]).unwrap(),
            vec![1],
        );
        let q = tape.constant(Tensor::new(vec![1, 2], vec![0.5, -3.0]).unwrap()).unwrap();
        let s = read_shifts(&mut tape, &b, q, AttentionMode::Soft).unwrap();
        assert!((tape.value(s[0]).item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn hard_ties_pick_lowest_index() {
        let cos = Tensor::new(vec![1, 3], vec![0.2, 0.9, 0.9]).unwrap();
        assert_eq!(hard_indices(&cos), vec![1]);
    }

    #[test]
    fn lambda_requires_raw_gradients() {
        let mut store = ParamStore::new();
        let mut rng = rand::thread_rng();
        assert!(ValueFunction::new(&mut store, ValueKind::ScalarLambda, 2, 20, &mut rng).is_err());
    }
}
