use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Inputs, LabeledDataset};
use crate::error::{Error, Result};

const PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + PIXELS,
            CifarVariant::Cifar100 => 2 + PIXELS,
        }
    }

    /// File names and record counts of the standard binary distribution.
    fn files(self) -> Vec<(&'static str, usize)> {
        match self {
            CifarVariant::Cifar10 => vec![
                ("data_batch_1.bin", 10_000),
                ("data_batch_2.bin", 10_000),
                ("data_batch_3.bin", 10_000),
                ("data_batch_4.bin", 10_000),
                ("data_batch_5.bin", 10_000),
                ("test_batch.bin", 10_000),
            ],
            CifarVariant::Cifar100 => vec![("train.bin", 50_000), ("test.bin", 10_000)],
        }
    }
}

/// Loads the binary CIFAR release under `dir`, pooling train and test
/// records. Pixels are scaled to `[0, 1]`; every file is size-checked before
/// any record is decoded.
pub fn load_cifar(dir: &Path, variant: CifarVariant) -> Result<LabeledDataset> {
    let rec = variant.record_len();
    let mut all = Vec::new();
    for (name, count) in variant.files() {
        let path = dir.join(name);
        let mut bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = (rec * count) as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::FileSize {
                path,
                expected,
                actual: bytes.len() as u64,
            });
        }
        all.append(&mut bytes);
    }
    decode_records(&all, variant)
}

/// Decodes concatenated binary CIFAR records.
pub fn decode_records(bytes: &[u8], variant: CifarVariant) -> Result<LabeledDataset> {
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        return Err(Error::Dataset(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let total = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(total * PIXELS);
    let mut labels = Vec::with_capacity(total);
    let mut coarse = Vec::new();
    for r in bytes.chunks_exact(rec) {
        let px = match variant {
            CifarVariant::Cifar10 => {
                labels.push(r[0] as usize);
                &r[1..]
            }
            CifarVariant::Cifar100 => {
                coarse.push(r[0] as usize);
                labels.push(r[1] as usize);
                &r[2..]
            }
        };
        pixels.extend(px.iter().map(|&b| b as f64 / 255.0));
    }
    let ds = match variant {
        CifarVariant::Cifar10 => LabeledDataset {
            inputs: Inputs::Images {
                channels: 3,
                extent: 32,
                pixels,
            },
            labels,
            num_classes: 10,
            coarse: None,
            num_coarse: None,
        },
        CifarVariant::Cifar100 => LabeledDataset {
            inputs: Inputs::Images {
                channels: 3,
                extent: 32,
                pixels,
            },
            labels,
            num_classes: 100,
            coarse: Some(coarse),
            num_coarse: Some(20),
        },
    };
    ds.validate()?;
    Ok(ds)
}
