//! Procedural datasets small enough for single-core experiments.
//!
//! Class (or style) structure depends only on the class index; the seed only
//! drives per-sample variation. Two draws with different seeds therefore
//! come from the same distribution.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Inputs, LabeledDataset};
use crate::autodiff::softmax_rows;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthImageSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub extent: usize,
    pub channels: usize,
    /// Additive Gaussian pixel noise std.
    pub noise: f64,
    /// Groups consecutive classes into this many coarse labels.
    pub coarse_groups: Option<usize>,
    pub seed: u64,
}

impl Default for SynthImageSpec {
    fn default() -> Self {
        SynthImageSpec {
            num_classes: 10,
            per_class: 50,
            extent: 16,
            channels: 3,
            noise: 0.25,
            coarse_groups: None,
            seed: 0,
        }
    }
}

/// Deterministic per-class grating parameters: orientation, spatial
/// frequency (cycles per image) and per-channel colour weights.
fn class_pattern(c: usize, channels: usize) -> (f64, f64, Vec<f64>) {
    const GOLDEN: f64 = 0.618_033_988_749_895;
    let u = (c as f64 * GOLDEN).fract();
    let theta = PI * u;
    let freq = 1.5 + 2.5 * ((c as f64 * 0.377 + 0.13).fract());
    let colour = (0..channels)
        .map(|k| 0.6 + 0.4 * (2.0 * PI * (c as f64 * 0.29 + k as f64 / channels as f64)).cos())
        .collect();
    (theta, freq, colour)
}

/// Class-conditional oriented gratings with random phase and pixel noise.
pub fn synth_image_task(num_classes: usize, per_class: usize, extent: usize, seed: u64) -> Result<LabeledDataset> {
    synth_image(&SynthImageSpec {
        num_classes,
        per_class,
        extent,
        seed,
        ..SynthImageSpec::default()
    })
}

impl SynthImageSpec {
    pub fn generate(&self) -> Result<LabeledDataset> {
        synth_image(self)
    }
}

fn synth_image(spec: &SynthImageSpec) -> Result<LabeledDataset> {
    if spec.num_classes < 2 || spec.per_class == 0 || spec.extent == 0 || spec.channels == 0 {
        return Err(Error::Config("synthetic image task needs >=2 classes and positive sizes".into()));
    }
    if let Some(g) = spec.coarse_groups {
        if g == 0 || spec.num_classes % g != 0 {
            return Err(Error::Config(format!(
                "coarse_groups {g} must divide num_classes {}",
                spec.num_classes
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let e = spec.extent;
    let per = spec.channels * e * e;
    let n = spec.num_classes * spec.per_class;
    let mut pixels = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    let patterns: Vec<_> = (0..spec.num_classes)
        .map(|c| class_pattern(c, spec.channels))
        .collect();
    for (c, (theta, freq, colour)) in patterns.iter().enumerate() {
        let (ct, st) = (theta.cos(), theta.sin());
        for _ in 0..spec.per_class {
            let phase = rng.random::<f64>() * 2.0 * PI;
            let amp = 0.25 + 0.15 * rng.random::<f64>();
            for w in colour {
                for y in 0..e {
                    for x in 0..e {
                        let t = (x as f64 * ct + y as f64 * st) / e as f64;
                        let v = 0.5 + amp * w * (2.0 * PI * freq * t + phase).sin() + noise.sample(&mut rng);
                        pixels.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(c);
        }
    }
    let (coarse, num_coarse) = match spec.coarse_groups {
        Some(g) => {
            let size = spec.num_classes / g;
            (Some(labels.iter().map(|l| l / size).collect()), Some(g))
        }
        None => (None, None),
    };
    Ok(LabeledDataset {
        inputs: Inputs::Images {
            channels: spec.channels,
            extent: e,
            pixels,
        },
        labels,
        num_classes: spec.num_classes,
        coarse,
        num_coarse,
    })
}

/// Row-stochastic `vocab×vocab` transition matrix of a style. Depends only
/// on the style index.
pub fn style_transitions(style: usize, vocab: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x57_71e0 + style as u64);
    let mut m: Vec<f64> = (0..vocab * vocab)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            2.5 * z
        })
        .collect();
    softmax_rows(&mut m, vocab);
    m
}

fn categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Markov-chain character sequences, one chain per style. Each stored
/// sequence has `seq_len + 1` tokens so inputs and next-token targets overlap.
pub fn synth_char_task(
    vocab: usize,
    seq_len: usize,
    num_styles: usize,
    per_style: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if vocab < 2 || seq_len == 0 || num_styles == 0 || per_style == 0 {
        return Err(Error::Config("synthetic char task needs vocab >= 2 and positive sizes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(num_styles * per_style * (seq_len + 1));
    let mut labels = Vec::with_capacity(num_styles * per_style);
    for s in 0..num_styles {
        let tm = style_transitions(s, vocab);
        for _ in 0..per_style {
            let mut t = rng.random_range(0..vocab);
            tokens.push(t as u32);
            for _ in 0..seq_len {
                t = categorical(&tm[t * vocab..(t + 1) * vocab], &mut rng);
                tokens.push(t as u32);
            }
            labels.push(s);
        }
    }
    Ok(LabeledDataset {
        inputs: Inputs::Sequences {
            seq_len,
            vocab,
            tokens,
        },
        labels,
        num_classes: num_styles,
        coarse: None,
        num_coarse: None,
    })
}
