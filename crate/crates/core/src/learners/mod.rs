//! Complete CSN models and the describe / predict protocol.

mod model;
mod serialize;
mod spec;

pub use model::{CsnModel, EpisodeRun, Network};
pub use serialize::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use spec::{Arch, InputShape, ModelSpec};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{CsnError, Result};

/// Token id reserved for padding.
pub const PAD: usize = 0;
/// Token id marking the missing word in cloze sentences.
pub const BLANK: usize = 1;

/// A batch of fixed-length token sequences, row-major `[n, len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub n: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn new(rows: &[Vec<usize>]) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if len == 0 || rows.iter().any(|r| r.len() != len) {
            return Err(CsnError::Usage(
                "token sequences must be non-empty and padded to one length".into(),
            ));
        }
        Ok(TokenBatch {
            ids: rows.concat(),
            n: rows.len(),
            len,
        })
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }

    /// Ids at time step `t` for every sequence.
    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.n).map(|i| self.ids[i * self.len + t]).collect()
    }

    /// Keeps the previous recurrent state wherever step `t` is padding, so
    /// left-padded sequences start from a clean state at their first token.
    pub fn carry(&self, tape: &mut Tape, t: usize, new: (Var, Var), prev: (Var, Var)) -> Result<(Var, Var)> {
        let col = self.column(t);
        if col.iter().all(|&id| id != PAD) {
            return Ok(new);
        }
        let hidden = tape.shape(new.0)[1];
        let mut keep = Vec::with_capacity(self.n * hidden);
        let mut take = Vec::with_capacity(self.n * hidden);
        for &id in &col {
            let m = if id == PAD { 0.0 } else { 1.0 };
            keep.extend(std::iter::repeat(1.0 - m).take(hidden));
            take.extend(std::iter::repeat(m).take(hidden));
        }
        let keep = tape.constant(Tensor::new(vec![self.n, hidden], keep)?)?;
        let take = tape.constant(Tensor::new(vec![self.n, hidden], take)?)?;
        let mut mix = |a: Var, b: Var| -> Result<Var> {
            let a = tape.mul(a, take)?;
            let b = tape.mul(b, keep)?;
            tape.add(a, b)
        };
        Ok((mix(new.0, prev.0)?, mix(new.1, prev.1)?))
    }

    fn select(&self, rows: &[usize]) -> Self {
        let ids = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        TokenBatch {
            ids,
            n: rows.len(),
            len: self.len,
        }
    }
}

/// Model inputs for a batch of examples.
#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// `[n, D]`
    Vectors(Tensor),
    /// `[n, C, H, W]`
    Images(Tensor),
    Tokens(TokenBatch),
}

impl Inputs {
    pub fn len(&self) -> usize {
        match self {
            Inputs::Vectors(t) | Inputs::Images(t) => t.shape()[0],
            Inputs::Tokens(b) => b.n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        match self {
            Inputs::Vectors(t) => Inputs::Vectors(t.select_rows(rows)),
            Inputs::Images(t) => Inputs::Images(t.select_rows(rows)),
            Inputs::Tokens(b) => Inputs::Tokens(b.select(rows)),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Inputs::Vectors(_) => "vector",
            Inputs::Images(_) => "image",
            Inputs::Tokens(_) => "tokens",
        }
    }
}

/// One sampled task: `n = k × C` labelled description examples and a
/// labelled query set, labels re-indexed to `0..C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support_x: Inputs,
    pub support_y: Vec<usize>,
    pub query_x: Inputs,
    pub query_y: Vec<usize>,
    pub way: usize,
    pub shot: usize,
    /// Underlying class id behind each episode label.
    pub class_ids: Vec<usize>,
}

impl Episode {
    pub fn support_onehot(&self) -> Tensor {
        one_hot(&self.support_y, self.way)
    }

    pub fn query_onehot(&self) -> Tensor {
        one_hot(&self.query_y, self.way)
    }

    /// The same episode with description examples reordered by `perm`.
    pub fn permute_support(&self, perm: &[usize]) -> Self {
        Episode {
            support_x: self.support_x.select(perm),
            support_y: perm.iter().map(|&i| self.support_y[i]).collect(),
            ..self.clone()
        }
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("non-empty labels")
}

/// Row-wise argmax (first maximum wins).
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let c = probs.shape()[probs.rank() - 1];
    probs
        .data()
        .chunks(c)
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
