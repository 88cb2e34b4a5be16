//! Procedural handwritten-glyph dataset in the omniglot folder layout, for
//! machines without the real dataset. Each class is a few random strokes;
//! each example redraws them with its own affine jitter and wobble.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::io::{save_csnt, Precision};
use crate::diffcore::Tensor;
use crate::error::{CsnError, Result};

type Point = (f64, f64);

const STROKE_RADIUS: f64 = 0.045;
const EDGE: f64 = 0.035;
const SAMPLES_PER_STROKE: usize = 12;

fn random_glyph(rng: &mut impl Rng) -> Vec<[Point; 3]> {
    let strokes = rng.gen_range(2..=4);
    (0..strokes)
        .map(|_| {
            let mut p = || (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85));
            [p(), p(), p()]
        })
        .collect()
}

fn bezier(s: &[Point; 3], t: f64) -> Point {
    let u = 1.0 - t;
    (
        u * u * s[0].0 + 2.0 * u * t * s[1].0 + t * t * s[2].0,
        u * u * s[0].1 + 2.0 * u * t * s[1].1 + t * t * s[2].1,
    )
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// One jittered rendering of `glyph` at `size×size`, ink 1 on background 0.
fn render(glyph: &[[Point; 3]], size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let angle = rng.gen_range(-0.2..0.2);
    let scale = rng.gen_range(0.88..1.12);
    let shift = (rng.gen_range(-0.06..0.06), rng.gen_range(-0.06..0.06));
    let wobble = Normal::new(0.0, 0.025).expect("positive std");
    let (sin, cos) = f64::sin_cos(angle);
    let warp = |p: Point| -> Point {
        let (x, y) = (p.0 - 0.5, p.1 - 0.5);
        (
            0.5 + scale * (cos * x - sin * y) + shift.0,
            0.5 + scale * (sin * x + cos * y) + shift.1,
        )
    };
    let polylines: Vec<Vec<Point>> = glyph
        .iter()
        .map(|s| {
            let s = s.map(|p| warp((p.0 + wobble.sample(rng), p.1 + wobble.sample(rng))));
            (0..=SAMPLES_PER_STROKE)
                .map(|i| bezier(&s, i as f64 / SAMPLES_PER_STROKE as f64))
                .collect()
        })
        .collect();
    let mut img = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let p = ((c as f64 + 0.5) / size as f64, (r as f64 + 0.5) / size as f64);
            let d = polylines
                .iter()
                .flat_map(|line| line.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            img.push((1.0 - (d - STROKE_RADIUS) / EDGE).clamp(0.0, 1.0));
        }
    }
    img
}

/// Writes `classes × per_class` glyph images of side `size` under `dir`,
/// with a `manifest.csv` naming class `gNNN` for each file.
pub fn write_glyph_dataset(dir: impl AsRef<Path>, classes: usize, per_class: usize, size: usize, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| CsnError::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::new();
    for class in 0..classes {
        let glyph = random_glyph(&mut rng);
        let sub = format!("g{class:03}");
        fs::create_dir_all(dir.join(&sub)).map_err(|e| CsnError::io(dir.join(&sub), e))?;
        for i in 0..per_class {
            let rel = format!("{sub}/{i:02}.csnt");
            let img = Tensor::new(vec![size, size], render(&glyph, size, &mut rng))?;
            save_csnt(dir.join(&rel), &img, Precision::F32)?;
            manifest.push_str(&format!("{sub},{rel}\n"));
        }
    }
    let path = dir.join("manifest.csv");
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(manifest.as_bytes()))
        .map_err(|e| CsnError::io(&path, e))
}
