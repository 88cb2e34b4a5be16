//! Omniglot-style image folders: `manifest.csv` rows `class_id,relative_path`
//! pointing at `H×W` grayscale CSNT tensors.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ClassPartition;
use crate::diffcore::io::load_csnt;
use crate::diffcore::Tensor;
use crate::error::{CsnError, Result};
use crate::learners::Inputs;

#[derive(Clone, Debug)]
pub struct OmniglotSource {
    pub partition: ClassPartition,
    pub image_size: usize,
    /// Images of every class id, each `image_size²` values.
    images: Vec<Vec<Vec<f64>>>,
    /// Manifest class names; rotated copies are named `name@90` etc.
    pub class_names: Vec<String>,
}

impl OmniglotSource {
    pub const DEFAULT_SPLITS: (usize, usize, usize) = (30, 0, 10);

    pub fn examples(&self, class: usize) -> usize {
        self.images[class].len()
    }

    pub fn total_images(&self) -> usize {
        self.images.iter().map(Vec::len).sum()
    }

    pub(super) fn draw(&self, class: usize, count: usize, rng: &mut impl Rng) -> Result<Inputs> {
        let pool = self
            .images
            .get(class)
            .ok_or_else(|| CsnError::Sampler(format!("class {class} does not exist")))?;
        if pool.len() < count {
            return Err(CsnError::Sampler(format!(
                "class `{}` has {} images but an episode needs {count}",
                self.class_names[class],
                pool.len()
            )));
        }
        let s = self.image_size;
        let mut data = Vec::with_capacity(count * s * s);
        for i in index::sample(rng, pool.len(), count) {
            data.extend_from_slice(&pool[i]);
        }
        Ok(Inputs::Images(Tensor::new(vec![count, 1, s, s], data)?))
    }
}

/// Bilinear resize of a row-major `h×w` image to `size×size` with
/// half-pixel centers; resizing to the original size is exact.
pub fn bilinear_resize(img: &[f64], h: usize, w: usize, size: usize) -> Vec<f64> {
    if h == size && w == size {
        return img.to_vec();
    }
    let coord = |dst: usize, src_len: usize| -> (usize, usize, f64) {
        let x = ((dst as f64 + 0.5) * src_len as f64 / size as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let (r0, r1, fr) = coord(r, h);
        for c in 0..size {
            let (c0, c1, fc) = coord(c, w);
            let top = img[r0 * w + c0] * (1.0 - fc) + img[r0 * w + c1] * fc;
            let bottom = img[r1 * w + c0] * (1.0 - fc) + img[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Square image rotated 90° counter-clockwise.
pub fn rotate90(img: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            out[(size - 1 - c) * size + r] = img[r * size + c];
        }
    }
    out
}

/// Loads the dataset at `dir`, resizes every image, partitions the base
/// classes `(train, val, test)` at random (seeded), and with `rotations`
/// adds the 90°, 180° and 270° rotations of each training class as new
/// training classes.
pub fn load_omniglot(
    dir: impl AsRef<Path>,
    image_size: usize,
    rotations: bool,
    splits: (usize, usize, usize),
    seed: u64,
) -> Result<OmniglotSource> {
    let dir = dir.as_ref();
    if image_size == 0 {
        return Err(CsnError::Config("source.image_size must be positive".into()));
    }
    let manifest = dir.join("manifest.csv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(&manifest)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CsnError::io(&manifest, io),
            other => CsnError::Loader {
                row: 0,
                detail: format!("{other:?}"),
            },
        })?;
    let mut names: Vec<String> = Vec::new();
    let mut by_name: HashMap<String, usize> = HashMap::new();
    let mut images: Vec<Vec<Vec<f64>>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CsnError::Loader {
            row,
            detail: e.to_string(),
        })?;
        if rec.len() != 2 || rec[0].is_empty() || rec[1].is_empty() {
            return Err(CsnError::Loader {
                row,
                detail: format!("expected `class_id,relative_path`, got {} fields", rec.len()),
            });
        }
        let path = dir.join(&rec[1]);
        let t = load_csnt(&path).map_err(|e| CsnError::Loader {
            row,
            detail: format!("{}: {e}", path.display()),
        })?;
        let (h, w) = match t.shape() {
            [h, w] => (*h, *w),
            [1, h, w] => (*h, *w),
            s => {
                return Err(CsnError::Loader {
                    row,
                    detail: format!("expected an H×W image, found shape {s:?}"),
                })
            }
        };
        let class = *by_name.entry(rec[0].to_string()).or_insert_with(|| {
            names.push(rec[0].to_string());
            images.push(Vec::new());
            names.len() - 1
        });
        images[class].push(bilinear_resize(t.data(), h, w, image_size));
    }
    let (tr, va, te) = splits;
    if names.len() < tr + va + te {
        return Err(CsnError::Config(format!(
            "{} lists {} classes but the split needs {}",
            manifest.display(),
            names.len(),
            tr + va + te
        )));
    }
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut partition = ClassPartition {
        train: order[..tr].to_vec(),
        val: order[tr..tr + va].to_vec(),
        test: order[tr + va..tr + va + te].to_vec(),
    };
    if rotations {
        for base in partition.train.clone() {
            let mut current = images[base].clone();
            for deg in [90, 180, 270] {
                current = current.iter().map(|img| rotate90(img, image_size)).collect();
                names.push(format!("{}@{deg}", names[base]));
                images.push(current.clone());
                partition.train.push(images.len() - 1);
            }
        }
    }
    Ok(OmniglotSource {
        partition,
        image_size,
        images,
        class_names: names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_to_same_size_is_identity() {
        let img: Vec<f64> = (0..12).map(|v| v as f64 / 11.0).collect();
        assert_eq!(bilinear_resize(&img, 3, 4, 3).len(), 9);
        let sq: Vec<f64> = (0..16).map(|v| v as f64 / 15.0).collect();
        assert_eq!(bilinear_resize(&sq, 4, 4, 4), sq);
    }

    #[test]
    fn four_rotations_are_identity() {
        let img: Vec<f64> = (0..9).map(f64::from).collect();
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate90(&r, 3);
        }
        assert_eq!(r, img);
        assert_eq!(rotate90(&img, 3), vec![2.0, 5.0, 8.0, 1.0, 4.0, 7.0, 0.0, 3.0, 6.0]);
    }

    #[test]
    fn downsizing_constant_image_keeps_value() {
        let img = vec![0.25; 28 * 28];
        assert!(bilinear_resize(&img, 28, 28, 14).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
