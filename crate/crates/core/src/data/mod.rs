//! Datasets, synthetic generators, and non-IID partitioners.

mod cifar;
mod noise;
mod partition;
mod synth;

use sha2::{Digest, Sha256};

pub use cifar::{decode_records, load_cifar, CifarVariant};
pub use noise::{apply_noise_ladder, noise_sigma, NoisyDataset};
pub use partition::{
    largest_remainder, partition, partition_dirichlet, partition_noise_ladder, partition_pachinko,
    partition_pathological,
    PartitionManifest, PartitionScheme, TEST_FRACTION,
};
pub use synth::{synth_char_task, synth_image_task, style_transitions, SynthImageSpec};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// `n × C × H × W` pixels in `[0, 1]`, square images.
    Images {
        channels: usize,
        extent: usize,
        pixels: Vec<f64>,
    },
    /// `n × (seq_len + 1)` token ids; inputs are the first `seq_len`
    /// tokens and targets the last `seq_len`.
    Sequences {
        seq_len: usize,
        vocab: usize,
        tokens: Vec<u32>,
    },
}

/// Pooled samples with fine (and optionally coarse) labels. For sequence
/// data the label is the generating style.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Inputs,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub coarse: Option<Vec<usize>>,
    pub num_coarse: Option<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        let stored = match &self.inputs {
            Inputs::Images {
                channels,
                extent,
                pixels,
            } => pixels.len() / (channels * extent * extent).max(1),
            Inputs::Sequences { seq_len, tokens, vocab } => {
                if tokens.iter().any(|&t| t as usize >= *vocab) {
                    return Err(Error::Dataset("token id outside vocabulary".into()));
                }
                tokens.len() / (seq_len + 1)
            }
        };
        if stored != n {
            return Err(Error::Dataset(format!("{n} labels for {stored} inputs")));
        }
        if self.labels.iter().any(|&l| l >= self.num_classes) {
            return Err(Error::Dataset("label outside class range".into()));
        }
        if let (Some(c), Some(k)) = (&self.coarse, self.num_coarse) {
            if c.len() != n || c.iter().any(|&l| l >= k) {
                return Err(Error::Dataset("bad coarse labels".into()));
            }
        }
        Ok(())
    }

    /// Sample indices per fine label.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// SHA-256 over shape metadata, labels and inputs.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        match &self.inputs {
            Inputs::Images {
                channels,
                extent,
                pixels,
            } => {
                h.update(b"images");
                h.update((*channels as u64).to_le_bytes());
                h.update((*extent as u64).to_le_bytes());
                for p in pixels {
                    h.update(p.to_le_bytes());
                }
            }
            Inputs::Sequences {
                seq_len,
                vocab,
                tokens,
            } => {
                h.update(b"sequences");
                h.update((*seq_len as u64).to_le_bytes());
                h.update((*vocab as u64).to_le_bytes());
                for t in tokens {
                    h.update(t.to_le_bytes());
                }
            }
        }
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        if let Some(c) = &self.coarse {
            for l in c {
                h.update((*l as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Gathers `indices` into a model batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let b = indices.len();
        if b == 0 {
            return Err(Error::Dataset("empty batch".into()));
        }
        match &self.inputs {
            Inputs::Images {
                channels,
                extent,
                pixels,
            } => {
                let per = channels * extent * extent;
                let mut data = Vec::with_capacity(b * per);
                let mut targets = Vec::with_capacity(b);
                for &i in indices {
                    data.extend_from_slice(&pixels[i * per..(i + 1) * per]);
                    targets.push(self.labels[i] as f64);
                }
                Ok(Batch {
                    inputs: Tensor::new(vec![b, *channels, *extent, *extent], data)?,
                    targets: Tensor::new(vec![b], targets)?,
                })
            }
            Inputs::Sequences { seq_len, tokens, .. } => {
                let m = *seq_len;
                let mut inputs = Vec::with_capacity(b * m);
                let mut targets = Vec::with_capacity(b * m);
                for &i in indices {
                    let row = &tokens[i * (m + 1)..(i + 1) * (m + 1)];
                    inputs.extend(row[..m].iter().map(|&t| t as f64));
                    targets.extend(row[1..].iter().map(|&t| t as f64));
                }
                Ok(Batch {
                    inputs: Tensor::new(vec![b, m], inputs)?,
                    targets: Tensor::new(vec![b, m], targets)?,
                })
            }
        }
    }

    /// One image as `[C, H, W]`.
    pub fn image(&self, index: usize) -> Result<Tensor> {
        match &self.inputs {
            Inputs::Images {
                channels,
                extent,
                pixels,
            } => {
                let per = channels * extent * extent;
                Tensor::new(
                    vec![*channels, *extent, *extent],
                    pixels[index * per..(index + 1) * per].to_vec(),
                )
            }
            Inputs::Sequences { .. } => Err(Error::Dataset("not an image dataset".into())),
        }
    }
}
