//! Experiment configuration: presets, JSON files and flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use fedtp_core::analysis::RolloutConfig;
use fedtp_core::data::{load_cifar, synth_char_task, CifarVariant, SynthImageSpec};
use fedtp_core::model::Task;
use fedtp_core::{
    FederationConfig, HyperNetConfig, LabeledDataset, ModelConfig, PartitionScheme, StrategyName, StrategySpec,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    SyntheticImages(SynthImageSpec),
    SyntheticChars {
        vocab: usize,
        seq_len: usize,
        num_styles: usize,
        per_style: usize,
        seed: u64,
    },
    Cifar {
        variant: CifarVariant,
        dir: PathBuf,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<LabeledDataset> {
        let ds = match self {
            DatasetSpec::SyntheticImages(spec) => spec.generate()?,
            DatasetSpec::SyntheticChars {
                vocab,
                seq_len,
                num_styles,
                per_style,
                seed,
            } => synth_char_task(*vocab, *seq_len, *num_styles, *per_style, *seed)?,
            DatasetSpec::Cifar { variant, dir } => load_cifar(dir, *variant)?,
        };
        Ok(ds)
    }

    /// Output width the model needs: class count, or vocabulary size.
    fn model_classes(&self) -> usize {
        match self {
            DatasetSpec::SyntheticImages(s) => s.num_classes,
            DatasetSpec::SyntheticChars { vocab, .. } => *vocab,
            DatasetSpec::Cifar {
                variant: CifarVariant::Cifar10,
                ..
            } => 10,
            DatasetSpec::Cifar {
                variant: CifarVariant::Cifar100,
                ..
            } => 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NovelConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for NovelConfig {
    fn default() -> Self {
        NovelConfig { epochs: 1, lr: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub partition: PartitionScheme,
    pub model: ModelConfig,
    pub hypernet: HyperNetConfig,
    pub strategy: StrategySpec,
    pub federation: FederationConfig,
    /// Write a checkpoint every this many rounds; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// The last this many clients of the partition are left out of training
    /// and used by `finetune-novel`.
    pub holdout_clients: usize,
    pub novel: NovelConfig,
    pub rollout: RolloutConfig,
    pub out_dir: Option<PathBuf>,
    /// Filled in by `partition`.
    pub dataset_fingerprint: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn config(self) -> ExperimentConfig {
        match self {
            Preset::Desk => ExperimentConfig {
                dataset: DatasetSpec::SyntheticImages(SynthImageSpec::default()),
                partition: PartitionScheme::Pathological {
                    num_clients: 10,
                    classes_per_client: 2,
                },
                model: ModelConfig::desk(),
                hypernet: HyperNetConfig::default(),
                strategy: StrategySpec::default(),
                federation: FederationConfig::default(),
                checkpoint_every: 0,
                holdout_clients: 0,
                novel: NovelConfig::default(),
                rollout: RolloutConfig::default(),
                out_dir: None,
                dataset_fingerprint: None,
            },
            Preset::Paper => ExperimentConfig {
                dataset: DatasetSpec::Cifar {
                    variant: CifarVariant::Cifar10,
                    dir: PathBuf::from("data/cifar-10-batches-bin"),
                },
                partition: PartitionScheme::Pathological {
                    num_clients: 50,
                    classes_per_client: 2,
                },
                model: ModelConfig::paper(),
                federation: FederationConfig {
                    rounds: 1500,
                    ..FederationConfig::default()
                },
                checkpoint_every: 100,
                ..Preset::Desk.config()
            },
        }
    }
}

/// Values given on the command line. `None` leaves the file or preset value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub strategy: Option<StrategyName>,
    pub rounds: Option<usize>,
    pub local_epochs: Option<usize>,
    pub lr: Option<f64>,
    pub server_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub clients: Option<usize>,
    pub sample_rate: Option<f64>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub scheme: Option<String>,
    pub alpha: Option<f64>,
    pub beta_fine: Option<f64>,
    pub classes_per_client: Option<usize>,
    pub sigma_max: Option<f64>,
}

impl Overrides {
    /// True when any flag touches the dataset split. The seed drives both
    /// the split and training.
    pub fn touches_partition(&self) -> bool {
        self.seed.is_some()
            || self.clients.is_some()
            || self.scheme.is_some()
            || self.alpha.is_some()
            || self.beta_fine.is_some()
            || self.classes_per_client.is_some()
            || self.sigma_max.is_some()
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Value::Object(Default::default()));
    }
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn tag_of(v: &Value) -> Option<&Value> {
    v.get("kind").or_else(|| v.get("name"))
}

/// Overlays `top` onto `base`. Objects merge key by key, except tagged
/// objects whose tag changes, which are replaced whole.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => {
                        let retag = matches!((tag_of(slot), tag_of(&v)), (Some(x), Some(y)) if x != y);
                        if retag {
                            *slot = v;
                        } else {
                            merge(slot, v);
                        }
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn scheme_with(name: &str, num_clients: usize) -> Result<PartitionScheme> {
    Ok(match name {
        "pathological" => PartitionScheme::Pathological {
            num_clients,
            classes_per_client: 2,
        },
        "dirichlet" => PartitionScheme::Dirichlet {
            num_clients,
            alpha: 0.3,
        },
        "pachinko" => PartitionScheme::Pachinko {
            num_clients,
            alpha: 0.3,
            beta: 10.0,
        },
        "noise_ladder" => PartitionScheme::NoiseLadder {
            num_clients,
            sigma_max: 20.0,
        },
        other => return Err(CliError::Config(format!("scheme: unknown partition scheme `{other}`"))),
    })
}

fn apply_partition_flags(scheme: &mut PartitionScheme, o: &Overrides) -> Result<()> {
    let n = o.clients.unwrap_or(scheme.num_clients());
    if let Some(name) = &o.scheme {
        if name != scheme.name() {
            *scheme = scheme_with(name, n)?;
        }
    }
    let name = scheme.name();
    for (flag, set, takes) in [
        ("alpha", o.alpha.is_some(), matches!(name, "dirichlet" | "pachinko")),
        ("beta-fine", o.beta_fine.is_some(), name == "pachinko"),
        ("classes-per-client", o.classes_per_client.is_some(), name == "pathological"),
        ("sigma-max", o.sigma_max.is_some(), name == "noise_ladder"),
    ] {
        if set && !takes {
            return Err(CliError::Config(format!("{flag}: not a parameter of the {name} scheme")));
        }
    }
    match scheme {
        PartitionScheme::Pathological {
            num_clients,
            classes_per_client,
        } => {
            *num_clients = n;
            *classes_per_client = o.classes_per_client.unwrap_or(*classes_per_client);
        }
        PartitionScheme::Dirichlet { num_clients, alpha } => {
            *num_clients = n;
            *alpha = o.alpha.unwrap_or(*alpha);
        }
        PartitionScheme::Pachinko {
            num_clients,
            alpha,
            beta,
        } => {
            *num_clients = n;
            *alpha = o.alpha.unwrap_or(*alpha);
            *beta = o.beta_fine.unwrap_or(*beta);
        }
        PartitionScheme::NoiseLadder {
            num_clients,
            sigma_max,
        } => {
            *num_clients = n;
            *sigma_max = o.sigma_max.unwrap_or(*sigma_max);
        }
    }
    Ok(())
}

/// `base`, then the JSON file at `file`, then `flags`; the result is
/// validated.
pub fn resolve(base: &ExperimentConfig, file: Option<&Path>, flags: &Overrides) -> Result<ExperimentConfig> {
    let mut value = serde_json::to_value(base).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = file {
        let top = read_json(path)?;
        if !top.is_object() {
            return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
        }
        merge(&mut value, top);
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    let f = &mut cfg.federation;
    if let Some(v) = flags.strategy {
        cfg.strategy.name = v;
    }
    if let Some(v) = flags.rounds {
        f.rounds = v;
    }
    if let Some(v) = flags.local_epochs {
        f.local_epochs = v;
    }
    if let Some(v) = flags.lr {
        f.lr = v;
    }
    if let Some(v) = flags.server_lr {
        f.server_lr = v;
    }
    if let Some(v) = flags.batch_size {
        f.batch_size = v;
    }
    if let Some(v) = flags.sample_rate {
        f.sample_rate = v;
    }
    if let Some(v) = flags.seed {
        f.seed = v;
    }
    if let Some(v) = flags.workers {
        f.workers = v;
    }
    if let Some(v) = &flags.out {
        cfg.out_dir = Some(v.clone());
    }
    apply_partition_flags(&mut cfg.partition, flags)?;
    validate(&cfg)?;
    Ok(cfg)
}

/// Preset, optional file and flags, as used by `partition`.
pub fn parse_config(preset: Preset, file: Option<&Path>, flags: &Overrides) -> Result<ExperimentConfig> {
    resolve(&preset.config(), file, flags)
}

pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    cfg.federation.validate()?;
    cfg.strategy.validate()?;
    cfg.model.validate()?;
    cfg.hypernet.validate()?;
    let want = cfg.dataset.model_classes();
    if cfg.model.num_classes != want {
        return Err(CliError::Config(format!(
            "model.num_classes: dataset needs {want}, got {}",
            cfg.model.num_classes
        )));
    }
    match &cfg.dataset {
        DatasetSpec::SyntheticChars { seq_len, .. } => {
            if cfg.model.task != Task::NextToken || cfg.model.seq_len != *seq_len {
                return Err(CliError::Config(
                    "model.task: character data needs next_token with a matching seq_len".into(),
                ));
            }
        }
        DatasetSpec::SyntheticImages(s) => {
            if cfg.model.task != Task::ImageClassification
                || cfg.model.image_extent != s.extent
                || cfg.model.channels != s.channels
            {
                return Err(CliError::Config(
                    "model.image_extent: must match the dataset's image shape".into(),
                ));
            }
        }
        DatasetSpec::Cifar { .. } => {
            if cfg.model.task != Task::ImageClassification || cfg.model.image_extent != 32 || cfg.model.channels != 3 {
                return Err(CliError::Config("model.image_extent: CIFAR images are 3x32x32".into()));
            }
        }
    }
    let n = cfg.partition.num_clients();
    if cfg.holdout_clients >= n {
        return Err(CliError::Config(format!(
            "holdout_clients: {} leaves no training clients out of {n}",
            cfg.holdout_clients
        )));
    }
    if !(cfg.novel.lr > 0.0) || !cfg.novel.lr.is_finite() {
        return Err(CliError::Config(format!("novel.lr: invalid value {}", cfg.novel.lr)));
    }
    if !(0.0..1.0).contains(&cfg.rollout.discard_ratio) {
        return Err(CliError::Config(format!(
            "rollout.discard_ratio: invalid value {}",
            cfg.rollout.discard_ratio
        )));
    }
    Ok(())
}

pub fn write_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    crate::run::write_file(path, text + "\n")
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.to_path_buf()));
    }
    let v = read_json(path)?;
    serde_json::from_value(v).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
