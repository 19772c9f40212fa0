//! The five pipeline stages and the run-directory layout they share.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use fedtp_core::analysis::{attention_rollout, map_divergence, pgm_bytes, AttentionMap};
use fedtp_core::data::{apply_noise_ladder, partition};
use fedtp_core::federation::{weighted_accuracy, ClientEval};
use fedtp_core::model::Task;
use fedtp_core::{checkpoint, Federation, LabeledDataset, PartitionManifest, PartitionScheme, RoundReport, StrategyName};
use serde::Serialize;
use serde_json::json;

use crate::config::{read_config, resolve, validate, write_config, ExperimentConfig, Overrides};
use crate::error::{CliError, Result};

/// Paths of every artifact under one run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        RunDir(path.into())
    }

    pub fn path(&self) -> &Path {
        &self.0
    }

    /// Config resolved at partition time.
    pub fn config(&self) -> PathBuf {
        self.0.join("config.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.0.join("manifest.json")
    }

    /// Config the training run actually used.
    pub fn train_config(&self) -> PathBuf {
        self.0.join("train_config.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.csv")
    }

    pub fn client_metrics(&self) -> PathBuf {
        self.0.join("client_metrics.csv")
    }

    pub fn rounds(&self) -> PathBuf {
        self.0.join("rounds.jsonl")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.0.join("embeddings.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.0.join("checkpoints")
    }

    pub fn round_checkpoint(&self, round: usize) -> PathBuf {
        self.checkpoints().join(format!("round-{round:05}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final.ckpt")
    }

    pub fn eval(&self) -> PathBuf {
        self.0.join("eval.json")
    }

    pub fn maps(&self) -> PathBuf {
        self.0.join("maps")
    }

    pub fn novel(&self) -> PathBuf {
        self.0.join("novel.csv")
    }
}

/// Default run directory when neither `--out` nor `out_dir` is given.
pub fn timestamped_dir() -> PathBuf {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("run-{secs}"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    Ok(())
}

/// Writes `bytes` to `path`, which must not exist yet.
pub fn write_new(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::AlreadyExists => CliError::Exists(path.to_path_buf()),
            _ => CliError::io(path, e),
        })?;
    f.write_all(bytes.as_ref()).map_err(|e| CliError::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact(path))
    }
}

fn read_manifest(run: &RunDir) -> Result<PartitionManifest> {
    let path = require(run.manifest())?;
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(PartitionManifest::from_json(&text)?)
}

/// Dataset plus manifest as training sees them: fingerprint-checked, with
/// noise-ladder perturbation applied.
pub fn load_inputs(cfg: &ExperimentConfig, run: &RunDir) -> Result<(LabeledDataset, PartitionManifest)> {
    let manifest = read_manifest(run)?;
    let ds = cfg.dataset.load()?;
    manifest.validate(&ds)?;
    let ds = match manifest.scheme {
        PartitionScheme::NoiseLadder { sigma_max, .. } => apply_noise_ladder(&manifest, &ds, sigma_max)?.dataset,
        _ => ds,
    };
    Ok((ds, manifest))
}

/// The manifest restricted to the clients that take part in training.
pub fn training_manifest(cfg: &ExperimentConfig, manifest: &PartitionManifest) -> PartitionManifest {
    let keep = manifest.num_clients() - cfg.holdout_clients;
    let mut m = manifest.clone();
    m.train.truncate(keep);
    m.test.truncate(keep);
    m
}

pub fn build_federation<'a>(
    cfg: &ExperimentConfig,
    ds: &'a LabeledDataset,
    manifest: &PartitionManifest,
) -> Result<Federation<'a>> {
    Ok(Federation::new(
        cfg.model.clone(),
        cfg.hypernet.clone(),
        cfg.strategy.clone(),
        cfg.federation.clone(),
        ds,
        &training_manifest(cfg, manifest),
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionSummary {
    pub run_dir: PathBuf,
    pub num_clients: usize,
    pub train_sizes: Vec<usize>,
    pub dataset_fingerprint: String,
}

/// Builds and validates the manifest; writes `config.json` and
/// `manifest.json`.
pub fn cmd_partition(cfg: &ExperimentConfig) -> Result<PartitionSummary> {
    let dir = cfg.out_dir.clone().unwrap_or_else(timestamped_dir);
    let run = RunDir::new(&dir);
    if run.manifest().exists() {
        return Err(CliError::Exists(run.manifest()));
    }
    let ds = cfg.dataset.load()?;
    let manifest = partition(&ds, &cfg.partition, cfg.federation.seed)?;
    manifest.validate(&ds)?;
    let mut echo = cfg.clone();
    echo.out_dir = Some(dir.clone());
    echo.dataset_fingerprint = Some(manifest.dataset_fingerprint.clone());
    write_config(&run.config(), &echo)?;
    write_new(&run.manifest(), manifest.to_json()? + "\n")?;
    Ok(PartitionSummary {
        run_dir: dir,
        num_clients: manifest.num_clients(),
        train_sizes: manifest.train_sizes(),
        dataset_fingerprint: manifest.dataset_fingerprint,
    })
}

/// Config for the training stage: `config.json` of the run, then the
/// optional file, then flags. Dataset and partition are fixed by the
/// manifest and may not change.
pub fn train_config(run: &RunDir, file: Option<&Path>, flags: &Overrides) -> Result<ExperimentConfig> {
    require(run.manifest())?;
    let base = read_config(&run.config())?;
    if flags.touches_partition() {
        return Err(CliError::Config(format!(
            "partition: fixed by {}; partition into a new run directory instead",
            run.manifest().display()
        )));
    }
    let mut cfg = resolve(&base, file, flags)?;
    if cfg.dataset != base.dataset || cfg.partition != base.partition {
        return Err(CliError::Config(format!(
            "dataset: fixed by {}; partition into a new run directory instead",
            run.manifest().display()
        )));
    }
    cfg.out_dir = Some(run.path().to_path_buf());
    Ok(cfg)
}

fn save_checkpoint(path: &Path, fed: &Federation<'_>, cfg: &ExperimentConfig) -> Result<()> {
    let header = json!({ "round": fed.server.round, "experiment": cfg });
    let bytes = checkpoint::encode(&fed.snapshot(), &header)?;
    write_file(path, bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub rounds: usize,
    pub final_weighted_acc: Option<f64>,
    pub final_train_loss: f64,
}

/// Runs every round, streaming `rounds.jsonl`, then writes metrics,
/// embeddings and checkpoints.
pub fn cmd_train(
    run: &RunDir,
    cfg: &ExperimentConfig,
    progress: &mut dyn FnMut(&RoundReport),
) -> Result<TrainSummary> {
    validate(cfg)?;
    if run.final_checkpoint().exists() {
        return Err(CliError::Exists(run.final_checkpoint()));
    }
    let (ds, manifest) = load_inputs(cfg, run)?;
    let mut fed = build_federation(cfg, &ds, &manifest)?;
    write_config(&run.train_config(), cfg)?;
    let rounds_path = run.rounds();
    let mut log = fs::File::create(&rounds_path).map_err(|e| CliError::io(&rounds_path, e))?;
    let mut reports = Vec::with_capacity(cfg.federation.rounds);
    while fed.server.round < cfg.federation.rounds {
        let r = fed.run_round()?;
        let line = serde_json::to_string(&r).map_err(fedtp_core::Error::from)?;
        writeln!(log, "{line}").map_err(|e| CliError::io(&rounds_path, e))?;
        if cfg.checkpoint_every > 0 && r.round % cfg.checkpoint_every == 0 {
            save_checkpoint(&run.round_checkpoint(r.round), &fed, cfg)?;
        }
        progress(&r);
        reports.push(r);
    }
    write_file(&run.metrics(), fedtp_core::analysis::metrics_csv(&reports))?;
    write_file(&run.client_metrics(), fedtp_core::analysis::client_metrics_csv(&reports))?;
    if !fed.server.embeddings.is_empty() {
        write_file(
            &run.embeddings(),
            fedtp_core::analysis::embeddings_csv(&fed.server.embeddings),
        )?;
    }
    save_checkpoint(&run.final_checkpoint(), &fed, cfg)?;
    let last = reports.last();
    Ok(TrainSummary {
        rounds: fed.server.round,
        final_weighted_acc: last.and_then(|r| r.weighted_acc),
        final_train_loss: last.map_or(f64::NAN, RoundReport::mean_train_loss),
    })
}

/// Loads the training config and a checkpoint (the final one unless
/// `checkpoint` is given) and restores the federation from it.
pub fn restore<'a>(
    run: &RunDir,
    cfg: &ExperimentConfig,
    ds: &'a LabeledDataset,
    manifest: &PartitionManifest,
    checkpoint: Option<&Path>,
) -> Result<Federation<'a>> {
    let path = require(checkpoint.map_or_else(|| run.final_checkpoint(), Path::to_path_buf))?;
    let (arrays, header) = checkpoint::load(&path)?;
    let round = header["round"]
        .as_u64()
        .ok_or_else(|| CliError::Config(format!("{}: header has no round", path.display())))?;
    let mut fed = build_federation(cfg, ds, manifest)?;
    fed.restore(&arrays, round as usize)?;
    Ok(fed)
}

/// Training config, after checking that the checkpoint exists.
pub fn trained_config(run: &RunDir, checkpoint: Option<&Path>, workers: Option<usize>) -> Result<ExperimentConfig> {
    require(checkpoint.map_or_else(|| run.final_checkpoint(), Path::to_path_buf))?;
    let mut cfg = read_config(&run.train_config())?;
    if let Some(w) = workers {
        cfg.federation.workers = w;
        validate(&cfg)?;
    }
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub round: usize,
    pub weighted_acc: f64,
    pub clients: Vec<ClientEval>,
}

/// Evaluates every training client on its test split; writes `eval.json`.
pub fn cmd_eval(run: &RunDir, cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    let (ds, manifest) = load_inputs(cfg, run)?;
    let fed = restore(run, cfg, &ds, &manifest, checkpoint)?;
    let clients = fed.evaluate()?;
    let out = EvalSummary {
        round: fed.server.round,
        weighted_acc: weighted_accuracy(&clients),
        clients,
    };
    let text = serde_json::to_string_pretty(&out).map_err(fedtp_core::Error::from)?;
    write_file(&run.eval(), text + "\n")?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutSummary {
    pub probe: usize,
    pub divergence: f64,
    pub maps: Vec<PathBuf>,
}

/// Per-client rollout maps of one probe image.
pub fn client_maps(fed: &Federation<'_>, probe: usize, cfg: &ExperimentConfig) -> Result<Vec<AttentionMap>> {
    if fed.model.config().task != Task::ImageClassification {
        return Err(CliError::Config("rollout: needs an image classification model".into()));
    }
    if probe >= fed.data.len() {
        return Err(CliError::Config(format!("probe: index {probe} out of range")));
    }
    let batch = fed.data.batch(&[probe])?;
    let mut maps = Vec::with_capacity(fed.num_clients());
    for id in 0..fed.num_clients() {
        let out = fed.model.model_forward(&fed.client_params(id)?, &batch, true)?;
        let trace = out
            .traces
            .and_then(|t| t.into_iter().next())
            .ok_or_else(|| CliError::Config("rollout: model produced no attention trace".into()))?;
        maps.push(attention_rollout(&trace, &cfg.rollout)?);
    }
    Ok(maps)
}

/// Writes `maps/client-XXX.pgm` per client and `maps/summary.json`. The
/// probe defaults to the first test sample of client 0.
pub fn cmd_rollout(
    run: &RunDir,
    cfg: &ExperimentConfig,
    probe: Option<usize>,
    checkpoint: Option<&Path>,
) -> Result<RolloutSummary> {
    let (ds, manifest) = load_inputs(cfg, run)?;
    let fed = restore(run, cfg, &ds, &manifest, checkpoint)?;
    let probe = probe.unwrap_or(manifest.test[0][0]);
    let maps = client_maps(&fed, probe, cfg)?;
    let divergence = if maps.len() >= 2 { map_divergence(&maps)? } else { 0.0 };
    let mut paths = Vec::with_capacity(maps.len());
    for (id, map) in maps.iter().enumerate() {
        let p = run.maps().join(format!("client-{id:03}.pgm"));
        write_file(&p, pgm_bytes(map))?;
        paths.push(p);
    }
    let summary = RolloutSummary {
        probe,
        divergence,
        maps: paths,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(fedtp_core::Error::from)?;
    write_file(&run.maps().join("summary.json"), text + "\n")?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NovelRow {
    pub client: usize,
    pub before: f64,
    pub after: f64,
}

/// Fits a fresh embedding for each held-out client; writes `novel.csv`.
pub fn cmd_finetune_novel(run: &RunDir, cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<NovelRow>> {
    if cfg.strategy.name != StrategyName::Fedtp {
        return Err(CliError::Config(format!(
            "strategy: finetune-novel needs fedtp, run used {}",
            cfg.strategy.name.as_str()
        )));
    }
    if cfg.holdout_clients == 0 {
        return Err(CliError::Config(
            "holdout_clients: no clients were held out of training".into(),
        ));
    }
    let (ds, manifest) = load_inputs(cfg, run)?;
    let fed = restore(run, cfg, &ds, &manifest, checkpoint)?;
    let first = manifest.num_clients() - cfg.holdout_clients;
    let mut rows = Vec::with_capacity(cfg.holdout_clients);
    let mut csv = String::from("client_id,before,after\n");
    for id in first..manifest.num_clients() {
        let r = fed.finetune_novel_client(
            &manifest.train[id],
            &manifest.test[id],
            cfg.novel.epochs,
            cfg.novel.lr,
            cfg.federation.seed,
        )?;
        csv.push_str(&format!("{id},{},{}\n", r.before, r.after));
        rows.push(NovelRow {
            client: id,
            before: r.before,
            after: r.after,
        });
    }
    write_file(&run.novel(), csv)?;
    Ok(rows)
}
