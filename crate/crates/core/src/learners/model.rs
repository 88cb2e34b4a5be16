use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{Arch, InputShape, ModelSpec};
use super::{Episode, Inputs};
use crate::conditioning::{
    df_info_on_tape, extract_df_info, extract_gradient_info, ConditioningInfo, ConditioningMode, Describe,
    DescribeTrace, Slot,
};
use crate::csn::{Activation, AdaLstmCell, ConvCsn, CsnResBlock, DenseCsn, Granularity, OutputCsn, ShiftMode};
use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{CsnError, Result};
use crate::memory::{read_shifts, BankVars, KeyFunction, MemoryBank, ValueFunction};

/// Filter counts of the residual network before the divisor is applied.
const RESNET_FILTERS: [usize; 4] = [64, 96, 128, 256];
/// How many trailing residual blocks carry shifts.
const RESNET_CSN_BLOCKS: usize = 2;

#[derive(Clone, Debug)]
enum Base {
    Ffn {
        hidden: Vec<DenseCsn>,
        out: OutputCsn,
    },
    Cnn {
        convs: Vec<ConvCsn>,
        first_csn: usize,
        out: OutputCsn,
    },
    ResNet {
        blocks: Vec<CsnResBlock>,
        fc: DenseCsn,
        out: OutputCsn,
    },
    Lstm {
        embed: ParamId,
        cells: Vec<AdaLstmCell>,
        out: OutputCsn,
    },
    LstmFfn {
        embed: ParamId,
        cells: Vec<AdaLstmCell>,
        head: DenseCsn,
        out: OutputCsn,
    },
}

/// State threaded through one forward pass: where the next shift comes
/// from, which sites have been seen, and the dropout stream.
struct Pass<'a, 'r> {
    betas: Option<&'a [Var]>,
    next: usize,
    slots: Vec<Slot>,
    mode: ShiftMode,
    granularity: Granularity,
    dropout: Option<(f64, &'r mut dyn RngCore)>,
}

impl Pass<'_, '_> {
    /// The next retrieved shift `[m, L]`, reshaped to broadcast against a
    /// pre-activation of shape `pre` (batch axis first).
    fn beta(&mut self, tape: &mut Tape, pre: &[usize]) -> Result<Option<Var>> {
        let Some(betas) = self.betas else {
            return Ok(None);
        };
        let beta = *betas.get(self.next).ok_or_else(|| {
            CsnError::Config(format!("memory holds {} shift slots but the model needs more", betas.len()))
        })?;
        self.next += 1;
        let m = tape.shape(beta)[0];
        let target: Vec<usize> = if pre.len() == 4 && self.granularity == Granularity::Channel {
            vec![m, pre[1], 1, 1]
        } else {
            std::iter::once(m).chain(pre[1..].iter().copied()).collect()
        };
        if tape.value(beta).numel() != target.iter().product::<usize>() {
            return Err(CsnError::Config(format!(
                "retrieved shift {:?} does not match CSN site {:?}",
                tape.shape(beta),
                &target[1..]
            )));
        }
        if tape.shape(beta) == target.as_slice() {
            Ok(Some(beta))
        } else {
            tape.reshape(beta, &target).map(Some)
        }
    }

    fn record(&mut self, pre: Var, act: Option<Activation>) {
        self.slots.push(Slot { pre, act });
    }

    /// Inverted dropout; identity outside training.
    fn drop(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if *rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - *rate;
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| {
                let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                if u < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?)?;
        tape.mul(x, mask)
    }
}

fn flatten(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let n = s[0];
    let rest = s[1..].iter().product();
    tape.reshape(x, &[n, rest])
}

/// The structure of a CSN model: base learner, key function `f` and value
/// function `g`. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: ModelSpec,
    base: Base,
    key: KeyFunction,
    value: ValueFunction,
    slots: usize,
}

impl Network {
    pub fn build(spec: ModelSpec, store: &mut ParamStore, rng: &mut impl rand::Rng) -> Result<Self> {
        spec.validate()?;
        let classes = spec.classes;
        let (base, slots) = match (spec.arch, spec.input) {
            (Arch::AdaFfn, InputShape::Vector(d)) => {
                let mut hidden = Vec::new();
                let mut prev = d;
                for (i, &w) in spec.hidden.iter().enumerate() {
                    hidden.push(DenseCsn::new(store, &format!("base.fc{}", i + 1), prev, w, spec.activation, rng)?);
                    prev = w;
                }
                let out = OutputCsn::new(store, "base.out", prev, classes, rng)?;
                let slots = hidden.len() + 1;
                (Base::Ffn { hidden, out }, slots)
            }
            (Arch::AdaCnn, InputShape::Image { channels, height, width }) => {
                let mut convs = Vec::new();
                let (mut c, mut h, mut w) = (channels, height, width);
                for i in 0..spec.conv_layers {
                    convs.push(ConvCsn::new(
                        store,
                        &format!("base.conv{}", i + 1),
                        c,
                        spec.filters,
                        Activation::Relu,
                        rng,
                    )?);
                    c = spec.filters;
                    h = h.div_ceil(2);
                    w = w.div_ceil(2);
                }
                let out = OutputCsn::new(store, "base.out", c * h * w, classes, rng)?;
                let first_csn = spec.conv_layers + 1 - spec.csn_layers;
                (Base::Cnn { convs, first_csn, out }, spec.csn_layers)
            }
            (Arch::AdaResNet, InputShape::Image { channels, height, width }) => {
                let mut blocks = Vec::new();
                let (mut c, mut h, mut w) = (channels, height, width);
                for (i, f) in RESNET_FILTERS.iter().enumerate() {
                    let f = f / spec.resnet_divisor;
                    blocks.push(CsnResBlock::new(store, &format!("base.block{}", i + 1), c, f, rng)?);
                    c = f;
                    h = h.div_ceil(2);
                    w = w.div_ceil(2);
                }
                let fc = DenseCsn::new(store, "base.fc", c * h * w, spec.head_hidden, Activation::Relu, rng)?;
                let out = OutputCsn::new(store, "base.out", spec.head_hidden, classes, rng)?;
                (Base::ResNet { blocks, fc, out }, RESNET_CSN_BLOCKS + 2)
            }
            (Arch::AdaLstm | Arch::LstmAdaFfn, InputShape::Tokens { vocab, len }) => {
                let embed = store.add_he("base.embed", &[vocab, spec.embed_dim], spec.embed_dim, rng)?;
                let mut cells = Vec::new();
                let mut prev = spec.embed_dim;
                for (i, &hs) in spec.hidden.iter().enumerate() {
                    cells.push(AdaLstmCell::new(store, &format!("base.lstm{}", i + 1), prev, hs, rng)?);
                    prev = hs;
                }
                if spec.arch == Arch::AdaLstm {
                    let out = OutputCsn::new(store, "base.out", prev, classes, rng)?;
                    let slots = cells.len() * len + 1;
                    (Base::Lstm { embed, cells, out }, slots)
                } else {
                    let head = DenseCsn::new(store, "base.head", prev, spec.head_hidden, spec.activation, rng)?;
                    let out = OutputCsn::new(store, "base.out", spec.head_hidden, classes, rng)?;
                    (Base::LstmFfn { embed, cells, head, out }, 2)
                }
            }
            (arch, input) => {
                return Err(CsnError::Config(format!("architecture {arch} cannot consume {input} inputs")));
            }
        };
        let key = match spec.input {
            InputShape::Vector(d) => KeyFunction::mlp(store, d, &[spec.key_hidden], spec.key_dim, rng)?,
            InputShape::Image { channels, height, width } => {
                let layers = if spec.arch == Arch::AdaCnn { spec.conv_layers } else { RESNET_FILTERS.len() };
                KeyFunction::cnn(store, channels, (height, width), layers, spec.key_hidden, spec.key_dim, rng)?
            }
            InputShape::Tokens { vocab, .. } => {
                KeyFunction::lstm(store, vocab, spec.embed_dim, spec.key_hidden, spec.key_dim, rng)?
            }
        };
        let value = ValueFunction::new(store, spec.value_fn, spec.info_dim(), spec.value_hidden, rng)?;
        Ok(Network {
            spec,
            base,
            key,
            value,
            slots,
        })
    }

    pub fn value_function(&self) -> &ValueFunction {
        &self.value
    }

    fn check_inputs(&self, x: &Inputs) -> Result<()> {
        let ok = match (self.spec.input, x) {
            (InputShape::Vector(d), Inputs::Vectors(t)) => t.rank() == 2 && t.shape()[1] == d,
            (InputShape::Image { channels, height, width }, Inputs::Images(t)) => {
                t.shape().len() == 4 && t.shape()[1..] == [channels, height, width]
            }
            (InputShape::Tokens { vocab, len }, Inputs::Tokens(b)) => {
                b.len == len && b.ids.iter().all(|&id| id < vocab)
            }
            _ => false,
        };
        if !ok {
            return Err(CsnError::Config(format!(
                "model expects {} inputs, got a {} batch that does not fit",
                self.spec.input,
                x.kind()
            )));
        }
        Ok(())
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Inputs, pass: &mut Pass<'_, '_>) -> Result<Var> {
        self.check_inputs(x)?;
        let n = x.len();
        let mode = pass.mode;
        let probs = match (&self.base, x) {
            (Base::Ffn { hidden, out }, Inputs::Vectors(t)) => {
                let mut h = tape.constant(t.clone())?;
                for layer in hidden {
                    let beta = pass.beta(tape, &[n, layer.width])?;
                    let o = layer.forward(tape, store, h, beta, mode)?;
                    pass.record(o.pre, Some(layer.act));
                    h = pass.drop(tape, o.out)?;
                }
                self.output(tape, store, out, h, pass)?
            }
            (Base::Cnn { convs, first_csn, out }, Inputs::Images(t)) => {
                let mut h = tape.constant(t.clone())?;
                for (i, conv) in convs.iter().enumerate() {
                    let s = tape.shape(h);
                    let pre_shape = [n, conv.out_ch, s[2], s[3]];
                    let beta = if i >= *first_csn { pass.beta(tape, &pre_shape)? } else { None };
                    let o = conv.forward(tape, store, h, beta, mode)?;
                    if i >= *first_csn {
                        pass.record(o.pre, Some(conv.act));
                    }
                    h = pass.drop(tape, o.out)?;
                }
                let h = flatten(tape, h)?;
                self.output(tape, store, out, h, pass)?
            }
            (Base::ResNet { blocks, fc, out }, Inputs::Images(t)) => {
                let mut h = tape.constant(t.clone())?;
                let first_csn = blocks.len() - RESNET_CSN_BLOCKS;
                for (i, block) in blocks.iter().enumerate() {
                    let s = tape.shape(h);
                    let pre_shape = [n, block.filters, s[2], s[3]];
                    let beta = if i >= first_csn { pass.beta(tape, &pre_shape)? } else { None };
                    let o = block.forward(tape, store, h, beta, mode)?;
                    if i >= first_csn {
                        pass.record(o.pre, Some(Activation::Relu));
                    }
                    h = pass.drop(tape, o.out)?;
                }
                let h = flatten(tape, h)?;
                let beta = pass.beta(tape, &[n, fc.width])?;
                let o = fc.forward(tape, store, h, beta, mode)?;
                pass.record(o.pre, Some(fc.act));
                let h = pass.drop(tape, o.out)?;
                self.output(tape, store, out, h, pass)?
            }
            (Base::Lstm { embed, cells, out }, Inputs::Tokens(seq)) => {
                let h = self.run_lstm(tape, store, *embed, cells, seq, Some(pass))?;
                let h = pass.drop(tape, h)?;
                self.output(tape, store, out, h, pass)?
            }
            (Base::LstmFfn { embed, cells, head, out }, Inputs::Tokens(seq)) => {
                let h = self.run_lstm(tape, store, *embed, cells, seq, None)?;
                let beta = pass.beta(tape, &[n, head.width])?;
                let o = head.forward(tape, store, h, beta, mode)?;
                pass.record(o.pre, Some(head.act));
                let h = pass.drop(tape, o.out)?;
                self.output(tape, store, out, h, pass)?
            }
            _ => unreachable!("inputs checked against the spec"),
        };
        if pass.betas.is_some_and(|b| b.len() != pass.next) {
            return Err(CsnError::Config(format!(
                "memory holds {} shift slots but the model used {}",
                pass.betas.map_or(0, <[Var]>::len),
                pass.next
            )));
        }
        Ok(probs)
    }

    fn output(&self, tape: &mut Tape, store: &ParamStore, out: &OutputCsn, h: Var, pass: &mut Pass<'_, '_>) -> Result<Var> {
        let n = tape.shape(h)[0];
        let beta = pass.beta(tape, &[n, out.classes()])?;
        let o = out.forward(tape, store, h, beta)?;
        pass.record(o.pre, None);
        Ok(o.out)
    }

    /// Runs stacked LSTM layers over a left-padded batch and returns the last
    /// layer's final hidden state. With `pass` set the cells are adaptive and
    /// every `c_t` is a CSN site (time-major, then layer).
    fn run_lstm(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embed: ParamId,
        cells: &[AdaLstmCell],
        seq: &super::TokenBatch,
        mut pass: Option<&mut Pass<'_, '_>>,
    ) -> Result<Var> {
        let table = tape.param(store, embed)?;
        let mut params = Vec::with_capacity(cells.len());
        let mut state = Vec::with_capacity(cells.len());
        for cell in cells {
            params.push(cell.enter(tape, store)?);
            state.push(cell.zero_state(tape, seq.n)?);
        }
        let mode = pass.as_ref().map_or(ShiftMode::Normalized, |p| p.mode);
        for t in 0..seq.len {
            let mut x = tape.embedding(table, &seq.column(t))?;
            for (l, cell) in cells.iter().enumerate() {
                let beta = match pass.as_deref_mut() {
                    Some(p) => p.beta(tape, &[seq.n, cell.hidden])?,
                    None => None,
                };
                let (h, c) = state[l];
                let step = cell.step(tape, params[l], x, h, c, beta, mode)?;
                if let Some(p) = pass.as_deref_mut() {
                    p.record(step.c, Some(cell.act));
                }
                state[l] = seq.carry(tape, t, (step.h, step.c), (h, c))?;
                x = state[l].0;
            }
        }
        Ok(state.last().expect("at least one layer").0)
    }

    fn pass<'a, 'r>(&self, betas: Option<&'a [Var]>, dropout: Option<&'r mut dyn RngCore>) -> Pass<'a, 'r> {
        Pass {
            betas,
            next: 0,
            slots: Vec::new(),
            mode: self.spec.shift_mode,
            granularity: self.spec.granularity,
            dropout: dropout.map(|rng| (self.spec.dropout, rng)),
        }
    }

    /// Conditioning information for a description set, as constants.
    pub fn conditioning(&self, store: &ParamStore, x: &Inputs, y: &Tensor) -> Result<ConditioningInfo> {
        match self.spec.cond {
            ConditioningMode::Gradient { p } => extract_gradient_info(self, store, x, y, p, self.spec.preprocess()),
            ConditioningMode::DirectFeedback => extract_df_info(self, store, x, y),
        }
    }

    fn write(&self, tape: &mut Tape, store: &ParamStore, x: &Inputs, info: &[Var]) -> Result<BankVars> {
        let keys = self.key.apply(tape, store, x)?;
        let (values, widths) = self.value.write_values(tape, store, info)?;
        Ok(BankVars { keys, values, widths })
    }

    fn constants(tape: &mut Tape, info: &ConditioningInfo) -> Result<Vec<Var>> {
        info.slots.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Builds the whole describe → predict → loss computation on `tape`.
    /// `frozen` replaces conditioning extraction with fixed info.
    pub fn run_episode(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        ep: &Episode,
        frozen: Option<&ConditioningInfo>,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<EpisodeRun> {
        if ep.way != self.spec.classes {
            return Err(CsnError::Config(format!(
                "model has {} output classes but the episode is {}-way",
                self.spec.classes, ep.way
            )));
        }
        let mut extract_ms = 0.0;
        let mut backward_passes = 0;
        let shifts = if self.spec.shifts {
            let y = ep.support_onehot();
            let start = Instant::now();
            let info = match frozen {
                Some(info) => Self::constants(tape, info)?,
                None if self.spec.stop_grad => {
                    let info = self.conditioning(store, &ep.support_x, &y)?;
                    backward_passes = info.backward_passes;
                    Self::constants(tape, &info)?
                }
                None => {
                    let trace = self.describe_trace(tape, store, &ep.support_x)?;
                    df_info_on_tape(tape, &trace, &y, self.spec.granularity)?
                }
            };
            extract_ms = start.elapsed().as_secs_f64() * 1e3;
            let bank = self.write(tape, store, &ep.support_x, &info)?;
            let q = self.key.apply(tape, store, &ep.query_x)?;
            Some(read_shifts(tape, &bank, q, self.spec.attention)?)
        } else {
            None
        };
        let mut pass = self.pass(shifts.as_deref(), dropout);
        let probs = self.forward(tape, store, &ep.query_x, &mut pass)?;
        let loss = tape.cross_entropy(probs, &ep.query_onehot())?;
        Ok(EpisodeRun {
            loss,
            probs,
            extract_ms,
            backward_passes,
        })
    }

    /// Description phase: conditioning, keys and values for `x`.
    pub fn describe(&self, store: &ParamStore, x: &Inputs, y: &Tensor) -> Result<MemoryBank> {
        let info = self.conditioning(store, x, y)?;
        self.describe_from(store, x, &info)
    }

    /// Memory for `x` from conditioning information computed elsewhere.
    pub fn describe_from(&self, store: &ParamStore, x: &Inputs, info: &ConditioningInfo) -> Result<MemoryBank> {
        let mut tape = Tape::no_grad();
        let info = Self::constants(&mut tape, info)?;
        let bank = self.write(&mut tape, store, x, &info)?;
        Ok(MemoryBank::from_vars(&tape, &bank))
    }

    /// Prediction phase: class probabilities `[m, C]` under retrieved shifts.
    pub fn predict(&self, store: &ParamStore, bank: &MemoryBank, x: &Inputs) -> Result<Tensor> {
        if !self.spec.shifts {
            return self.predict_unadapted(store, x);
        }
        let mut tape = Tape::no_grad();
        let vars = bank.to_vars(&mut tape)?;
        let q = self.key.apply(&mut tape, store, x)?;
        let shifts = read_shifts(&mut tape, &vars, q, self.spec.attention)?;
        let mut pass = self.pass(Some(&shifts), None);
        let probs = self.forward(&mut tape, store, x, &mut pass)?;
        Ok(tape.value(probs).clone())
    }

    /// The base network with every shift absent.
    pub fn predict_unadapted(&self, store: &ParamStore, x: &Inputs) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let mut pass = self.pass(None, None);
        let probs = self.forward(&mut tape, store, x, &mut pass)?;
        Ok(tape.value(probs).clone())
    }

    /// Summed query cross-entropy of one episode, without dropout.
    pub fn episode_loss(&self, store: &ParamStore, ep: &Episode) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let run = self.run_episode(store, &mut tape, ep, None, None)?;
        Ok(tape.value(run.loss).item())
    }
}

impl Describe for Network {
    fn describe_trace(&self, tape: &mut Tape, store: &ParamStore, x: &Inputs) -> Result<DescribeTrace> {
        let mut pass = self.pass(None, None);
        let probs = self.forward(tape, store, x, &mut pass)?;
        Ok(DescribeTrace {
            probs,
            slots: pass.slots,
        })
    }

    fn granularity(&self) -> Granularity {
        self.spec.granularity
    }

    fn slot_count(&self) -> usize {
        self.slots
    }
}

/// Handles into the tape built by [`Network::run_episode`].
#[derive(Clone, Copy, Debug)]
pub struct EpisodeRun {
    pub loss: Var,
    /// Query probabilities `[m, C]`.
    pub probs: Var,
    /// Wall time of conditioning extraction.
    pub extract_ms: f64,
    /// Backward traversals spent on conditioning extraction.
    pub backward_passes: usize,
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct CsnModel {
    pub net: Network,
    pub store: ParamStore,
}

impl CsnModel {
    /// Fresh model, He-initialized from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Network::build(spec, &mut store, &mut rng)?;
        Ok(CsnModel { net, store })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.net.spec
    }

    pub fn describe(&self, x: &Inputs, y: &Tensor) -> Result<MemoryBank> {
        self.net.describe(&self.store, x, y)
    }

    pub fn predict(&self, bank: &MemoryBank, x: &Inputs) -> Result<Tensor> {
        self.net.predict(&self.store, bank, x)
    }

    pub fn predict_unadapted(&self, x: &Inputs) -> Result<Tensor> {
        self.net.predict_unadapted(&self.store, x)
    }

    /// Query probabilities after describing the episode's support set.
    pub fn predict_episode(&self, ep: &Episode) -> Result<Tensor> {
        if !self.spec().shifts {
            return self.predict_unadapted(&ep.query_x);
        }
        let bank = self.describe(&ep.support_x, &ep.support_onehot())?;
        self.predict(&bank, &ep.query_x)
    }

    pub fn episode_loss(&self, ep: &Episode) -> Result<f64> {
        self.net.episode_loss(&self.store, ep)
    }

    /// Clears the value function's output map so every shift is zero.
    pub fn zero_value_output(&mut self) -> Result<()> {
        self.net.value.zero_output(&mut self.store)
    }
}
