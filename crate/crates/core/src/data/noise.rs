use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Inputs, LabeledDataset, PartitionManifest};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// `σ_i = σ_M/(N−1)·i`, in 8-bit pixel units.
pub fn noise_sigma(client: usize, num_clients: usize, sigma_max: f64) -> f64 {
    if num_clients < 2 {
        return 0.0;
    }
    sigma_max / (num_clients - 1) as f64 * client as f64
}

/// A copy of the pooled dataset with each client's samples perturbed.
#[derive(Clone, Debug)]
pub struct NoisyDataset {
    pub dataset: LabeledDataset,
    /// Per-client σ in pixel units.
    pub sigmas: Vec<f64>,
}

/// Adds `N(0, (σ_i/255)²)` noise to every train and test input of client
/// `i` and clips to `[0, 1]`. The input dataset is left untouched.
pub fn apply_noise_ladder(manifest: &PartitionManifest, ds: &LabeledDataset, sigma_max: f64) -> Result<NoisyDataset> {
    let n = manifest.num_clients();
    if n < 2 {
        return Err(Error::Config("noise ladder needs at least 2 clients".into()));
    }
    if !(sigma_max >= 0.0) || !sigma_max.is_finite() {
        return Err(Error::Config(format!("sigma_max must be >= 0, got {sigma_max}")));
    }
    let mut out = ds.clone();
    let Inputs::Images {
        channels,
        extent,
        pixels,
    } = &mut out.inputs
    else {
        return Err(Error::Dataset("noise ladder applies to image data".into()));
    };
    let per = *channels * *extent * *extent;
    let sigmas: Vec<f64> = (0..n).map(|i| noise_sigma(i, n, sigma_max)).collect();
    for (c, sigma) in sigmas.iter().enumerate() {
        if *sigma == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, sigma / 255.0).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(manifest.seed, &[0x401_5e, c as u64]));
        for &i in manifest.train[c].iter().chain(&manifest.test[c]) {
            for p in &mut pixels[i * per..(i + 1) * per] {
                *p = (*p + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(NoisyDataset { dataset: out, sigmas })
}
