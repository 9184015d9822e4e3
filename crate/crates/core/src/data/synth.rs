//! Synthetic texture classification task.
//!
//! Every class owns a blob "style" (a colour and a blob radius). An image is
//! a tinted noisy background with two to four Gaussian blobs in the class
//! style and strictly fewer distractor blobs from other classes, under a
//! random global illumination gain. The label is always recoverable from
//! the image, but single blobs are ambiguous and the nuisance factors make
//! it hard to learn from a few labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub size: usize,
    pub n: usize,
    /// Seeds the per-sample randomness.
    pub seed: u64,
    /// Seeds the class styles. Datasets with equal `task` share classes.
    pub task: u64,
}

impl SynthSpec {
    /// The bundled desk task: 4 classes of 16x16 RGB images.
    pub fn desk(n: usize, seed: u64) -> Self {
        Self {
            classes: 4,
            size: 16,
            n,
            seed,
            task: 0,
        }
    }
}

struct Style {
    colour: [f32; 3],
    radius: f32,
}

fn styles(classes: usize, task: u64) -> Vec<Style> {
    let mut rng = ChaCha8Rng::seed_from_u64(task.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x7e57);
    (0..classes)
        .map(|k| {
            // spread hues evenly, then jitter, so styles stay distinct
            let hue = (k as f32 + rng.random_range(0.0..0.5)) / classes as f32;
            let colour = [0.0f32, 1.0 / 3.0, 2.0 / 3.0].map(|off| {
                0.5 + 0.4 * (std::f32::consts::TAU * (hue + off)).cos()
            });
            let radius = if k % 2 == 0 {
                rng.random_range(0.9..1.3)
            } else {
                rng.random_range(1.8..2.4)
            };
            Style { colour, radius }
        })
        .collect()
}

/// Balanced dataset: sample `i` has label `i % classes`.
pub fn synth_blobs(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.size < 4 || spec.n == 0 {
        return Err(Error::Contract(format!(
            "synthetic task needs >= 2 classes, size >= 4 and n >= 1 (got {}, {}, {})",
            spec.classes, spec.size, spec.n
        )));
    }
    let styles = styles(spec.classes, spec.task);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f32, 0.08).unwrap();
    let s = spec.size;
    let mut images = Vec::with_capacity(spec.n * s * s * 3);
    let mut labels = Vec::with_capacity(spec.n);
    let mut canvas = vec![0.0f32; s * s * 3];
    for i in 0..spec.n {
        let label = i % spec.classes;
        let level: f32 = rng.random_range(0.2..0.6);
        let bg: [f32; 3] = std::array::from_fn(|_| level + rng.random_range(-0.08..0.08));
        for px in canvas.chunks_mut(3) {
            px.copy_from_slice(&bg);
        }
        let own = rng.random_range(2..=4usize);
        let distractors = rng.random_range(0..own);
        for b in 0..own + distractors {
            let owner = if b < own {
                label
            } else {
                (label + rng.random_range(1..spec.classes)) % spec.classes
            };
            let st = &styles[owner];
            let r = st.radius * rng.random_range(0.8..1.25);
            let amp = rng.random_range(0.7..1.0);
            let cy = rng.random_range(0.0..s as f32);
            let cx = rng.random_range(0.0..s as f32);
            let col = st.colour.map(|c| c + rng.random_range(-0.1..0.1));
            for y in 0..s {
                for x in 0..s {
                    let d2 = (y as f32 + 0.5 - cy).powi(2) + (x as f32 + 0.5 - cx).powi(2);
                    let a = amp * (-d2 / (2.0 * r * r)).exp();
                    if a < 1e-3 {
                        continue;
                    }
                    for ch in 0..3 {
                        let v = &mut canvas[(y * s + x) * 3 + ch];
                        *v = *v * (1.0 - a) + col[ch] * a;
                    }
                }
            }
        }
        let gain: f32 = rng.random_range(0.8..1.2);
        for v in &canvas {
            let px = (v * gain + noise.sample(&mut rng)).clamp(0.0, 1.0);
            images.push((px * 255.0).round() as u8);
        }
        labels.push(label as i16);
    }
    Dataset::new(format!("blobs-c{}-s{}", spec.classes, s), (s, s, 3), spec.classes, images, labels)
}
