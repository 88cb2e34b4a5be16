use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ClassPartition;
use crate::error::{CsnError, Result};
use crate::learners::{Episode, Inputs, TokenBatch, BLANK, PAD};

/// First id of ordinary context tokens; ids below are reserved.
const FIRST_WORD: usize = 2;

#[derive(Clone, Debug)]
struct Template {
    /// Context token ids with `BLANK` at the gap.
    tokens: Vec<usize>,
    blank: usize,
}

/// Synthetic fill-in-the-blank sentences of `seq_len` tokens. Every target
/// word (class) owns a context template with one blank. With probability
/// `noise` a sample moves the blank to a random position, and each context
/// token is independently resampled with probability `noise`, so at noise 1
/// nothing about a sentence identifies its class.
#[derive(Clone, Debug)]
pub struct ClozeSource {
    pub partition: ClassPartition,
    pub vocab: usize,
    pub seq_len: usize,
    pub noise: f64,
    templates: Vec<Template>,
}

impl ClozeSource {
    pub const DEFAULT_SPLITS: (usize, usize, usize) = (200, 50, 100);

    pub fn new(partition: ClassPartition, vocab: usize, seq_len: usize, noise: f64, seed: u64) -> Result<Self> {
        if seq_len < 3 {
            return Err(CsnError::Config(format!("source.seq_len must be at least 3, got {seq_len}")));
        }
        if vocab < 2 {
            return Err(CsnError::Config("source.vocab must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&noise) {
            return Err(CsnError::Config(format!("cloze source.noise must be in [0, 1], got {noise}")));
        }
        let total = partition.train.len() + partition.val.len() + partition.test.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let templates = (0..total)
            .map(|_| {
                let blank = rng.gen_range(0..seq_len);
                let tokens = (0..seq_len)
                    .map(|i| if i == blank { BLANK } else { rng.gen_range(FIRST_WORD..FIRST_WORD + vocab) })
                    .collect();
                Template { tokens, blank }
            })
            .collect();
        Ok(ClozeSource {
            partition,
            vocab,
            seq_len,
            noise,
            templates,
        })
    }

    /// Embedding table size: context words plus the reserved ids.
    pub fn token_count(&self) -> usize {
        self.vocab + FIRST_WORD
    }

    pub(super) fn draw<R: Rng>(&self, class: usize, count: usize, rng: &mut R) -> Result<Inputs> {
        let t = self
            .templates
            .get(class)
            .ok_or_else(|| CsnError::Sampler(format!("class {class} does not exist")))?;
        let word = |rng: &mut R| rng.gen_range(FIRST_WORD..FIRST_WORD + self.vocab);
        let rows: Vec<Vec<usize>> = (0..count)
            .map(|_| {
                let mut row = t.tokens.clone();
                if rng.gen::<f64>() < self.noise {
                    let moved = rng.gen_range(0..self.seq_len);
                    row[t.blank] = word(rng);
                    row[moved] = BLANK;
                }
                for tok in row.iter_mut() {
                    if *tok != BLANK && rng.gen::<f64>() < self.noise {
                        *tok = word(rng);
                    }
                }
                row
            })
            .collect();
        Ok(Inputs::Tokens(TokenBatch::new(&rows)?))
    }
}

/// Labels each query with the description sentence sharing the most tokens
/// position by position (padding excluded); ties go to the lowest label.
pub(super) fn overlap_oracle(ep: &Episode) -> Result<Vec<usize>> {
    let (Inputs::Tokens(s), Inputs::Tokens(q)) = (&ep.support_x, &ep.query_x) else {
        return Err(CsnError::Usage("the overlap oracle needs token inputs".into()));
    };
    let mut out = Vec::with_capacity(q.n);
    for j in 0..q.n {
        let mut score = vec![0usize; ep.way];
        for i in 0..s.n {
            let overlap = s
                .row(i)
                .iter()
                .zip(q.row(j))
                .filter(|(a, b)| a == b && **a != PAD)
                .count();
            let y = ep.support_y[i];
            score[y] = score[y].max(overlap);
        }
        let mut best = 0;
        for (c, &v) in score.iter().enumerate() {
            if v > score[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}
