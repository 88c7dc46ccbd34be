//! Procedural shape images for running the pipeline without downloads.
//!
//! Class `k` draws shape `k` from a fixed catalogue at a jittered position
//! and size, in a random bright color over a random dark background with
//! pixel noise. Source and target tasks take disjoint class ranges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::Dataset;

pub const SHAPES: [&str; 12] = [
    "disk", "square", "triangle", "plus", "ring", "hbar", "vbar", "diamond", "cross", "corner",
    "frame", "tee",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    /// Index of the first shape in [`SHAPES`].
    pub first_class: usize,
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// 8 classes, 250 images each, 3×16×16.
    pub fn source(seed: u64) -> Self {
        SynthSpec {
            name: "synth-source".into(),
            first_class: 0,
            classes: 8,
            per_class: 250,
            channels: 3,
            size: 16,
            noise: 0.15,
            seed,
        }
    }

    /// The 4 shapes the source never sees.
    pub fn target(seed: u64) -> Self {
        SynthSpec {
            name: "synth-target".into(),
            first_class: 8,
            classes: 4,
            per_class: 40,
            ..SynthSpec::source(seed)
        }
    }
}

/// Whether pixel `(y, x)` lies inside `shape` centered at `(cy, cx)` with radius `r`.
fn inside(shape: usize, y: f64, x: f64, cy: f64, cx: f64, r: f64) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    let (ay, ax) = (dy.abs(), dx.abs());
    let t = (r * 0.35).max(1.0);
    match shape {
        0 => dy * dy + dx * dx <= r * r,
        1 => ay <= r * 0.8 && ax <= r * 0.8,
        2 => dy <= r * 0.7 && dy >= -r * 0.9 && ax <= (dy + r * 0.9) * 0.6,
        3 => (ay <= t * 0.5 && ax <= r) || (ax <= t * 0.5 && ay <= r),
        4 => {
            let d = (dy * dy + dx * dx).sqrt();
            d <= r && d >= r - t
        }
        5 => ay <= t * 0.6 && ax <= r,
        6 => ax <= t * 0.6 && ay <= r,
        7 => ay + ax <= r,
        8 => ((dy - dx).abs() <= t * 0.7 || (dy + dx).abs() <= t * 0.7) && ay <= r && ax <= r,
        9 => {
            let (top, left) = (cy - r * 0.8, cx - r * 0.8);
            let (y0, x0) = (y - top, x - left);
            y0 >= 0.0 && x0 >= 0.0 && y0 <= 1.6 * r && x0 <= 1.6 * r && (y0 <= t || x0 <= t)
        }
        10 => ay <= r * 0.85 && ax <= r * 0.85 && (ay >= r * 0.85 - t || ax >= r * 0.85 - t),
        11 => {
            (dy >= -r * 0.8 && dy <= -r * 0.8 + t && ax <= r)
                || (ax <= t * 0.5 && dy >= -r * 0.8 && dy <= r)
        }
        _ => unreachable!("shape index checked by caller"),
    }
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.first_class + spec.classes > SHAPES.len() {
        return Err(Error::contract(format!(
            "classes {}..{} outside the {}-shape catalogue",
            spec.first_class,
            spec.first_class + spec.classes,
            SHAPES.len()
        )));
    }
    if spec.size < 8 || spec.channels == 0 || spec.per_class == 0 {
        return Err(Error::contract(
            "synthetic images need size >= 8, channels >= 1 and samples",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise =
        Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::contract(e.to_string()))?;
    let (s, c) = (spec.size, spec.channels);
    let n = spec.classes * spec.per_class;
    let mut pixels = Vec::with_capacity(n * c * s * s);
    let mut labels = Vec::with_capacity(n);
    let sf = s as f64;
    for i in 0..n {
        let label = i % spec.classes;
        let shape = spec.first_class + label;
        let r = sf * rng.random_range(0.25..0.38);
        let cy = sf / 2.0 + rng.random_range(-0.12..0.12) * sf;
        let cx = sf / 2.0 + rng.random_range(-0.12..0.12) * sf;
        let fg: Vec<f64> = (0..c).map(|_| rng.random_range(0.55..1.0)).collect();
        let bg: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..0.35)).collect();
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let on = inside(shape, y as f64 + 0.5, x as f64 + 0.5, cy, cx, r);
                    let v = if on { fg[ch] } else { bg[ch] } + noise.sample(&mut rng);
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        labels.push(label as u8);
    }
    let names = SHAPES[spec.first_class..spec.first_class + spec.classes]
        .iter()
        .map(|s| s.to_string())
        .collect();
    Dataset::new(spec.name.clone(), names, [c, s, s], pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let spec = SynthSpec {
            per_class: 5,
            ..SynthSpec::target(3)
        };
        let a = generate(&spec).unwrap();
        assert_eq!(a.len(), 20);
        assert!(a.by_class().values().all(|v| v.len() == 5));
        assert_eq!(a, generate(&spec).unwrap());
        assert_eq!(a.class_names, ["cross", "corner", "frame", "tee"]);
    }

    #[test]
    fn every_shape_covers_pixels() {
        for shape in 0..SHAPES.len() {
            let count = (0..16)
                .flat_map(|y| (0..16).map(move |x| (y, x)))
                .filter(|&(y, x)| inside(shape, y as f64 + 0.5, x as f64 + 0.5, 8.0, 8.0, 5.0))
                .count();
            assert!(count > 8 && count < 200, "shape {shape} covers {count}");
        }
    }

    #[test]
    fn catalogue_bounds_checked() {
        let spec = SynthSpec {
            first_class: 10,
            ..SynthSpec::target(0)
        };
        assert!(generate(&spec).is_err());
    }
}
