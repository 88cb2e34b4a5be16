use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ClassPartition;
use crate::diffcore::Tensor;
use crate::error::{CsnError, Result};
use crate::learners::{argmax_rows, Episode, Inputs};

/// Isotropic Gaussian classes around fixed random prototypes on the unit
/// sphere.
#[derive(Clone, Debug)]
pub struct GaussianSource {
    pub partition: ClassPartition,
    pub dim: usize,
    pub noise: f64,
    prototypes: Vec<Vec<f64>>,
}

impl GaussianSource {
    pub const DEFAULT_SPLITS: (usize, usize, usize) = (200, 50, 50);

    pub fn new(partition: ClassPartition, dim: usize, noise: f64, seed: u64) -> Result<Self> {
        if !(noise > 0.0 && noise.is_finite()) {
            return Err(CsnError::Config(format!("source.noise must be positive, got {noise}")));
        }
        if dim == 0 {
            return Err(CsnError::Config("source.dim must be positive".into()));
        }
        let total = partition.train.len() + partition.val.len() + partition.test.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prototypes = (0..total)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        Ok(GaussianSource {
            partition,
            dim,
            noise,
            prototypes,
        })
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.prototypes[class]
    }

    pub(super) fn draw(&self, class: usize, count: usize, rng: &mut impl Rng) -> Result<Inputs> {
        let proto = self
            .prototypes
            .get(class)
            .ok_or_else(|| CsnError::Sampler(format!("class {class} does not exist")))?;
        let mut data = Vec::with_capacity(count * self.dim);
        for _ in 0..count {
            data.extend(proto.iter().map(|&p| p + self.noise * rng.sample::<f64, _>(StandardNormal)));
        }
        Ok(Inputs::Vectors(Tensor::new(vec![count, self.dim], data)?))
    }
}

/// Predicts each query's label as the description class whose mean input is
/// nearest in Euclidean distance.
pub(super) fn nearest_mean_oracle(ep: &Episode) -> Result<Vec<usize>> {
    let (sx, qx) = match (&ep.support_x, &ep.query_x) {
        (Inputs::Vectors(s), Inputs::Vectors(q)) | (Inputs::Images(s), Inputs::Images(q)) => (s, q),
        _ => return Err(CsnError::Usage("the nearest-mean oracle needs vector or image inputs".into())),
    };
    let d = sx.numel() / sx.shape()[0];
    let mut means = vec![0.0; ep.way * d];
    let mut counts = vec![0usize; ep.way];
    for (i, &y) in ep.support_y.iter().enumerate() {
        counts[y] += 1;
        for (m, &v) in means[y * d..(y + 1) * d].iter_mut().zip(&sx.data()[i * d..(i + 1) * d]) {
            *m += v;
        }
    }
    for (c, &k) in counts.iter().enumerate() {
        means[c * d..(c + 1) * d].iter_mut().for_each(|m| *m /= k.max(1) as f64);
    }
    let m = qx.shape()[0];
    let mut neg_dist = Vec::with_capacity(m * ep.way);
    for j in 0..m {
        let q = &qx.data()[j * d..(j + 1) * d];
        for c in 0..ep.way {
            let dist: f64 = q.iter().zip(&means[c * d..(c + 1) * d]).map(|(a, b)| (a - b).powi(2)).sum();
            neg_dist.push(-dist);
        }
    }
    Ok(argmax_rows(&Tensor::new(vec![m, ep.way], neg_dist)?))
}
