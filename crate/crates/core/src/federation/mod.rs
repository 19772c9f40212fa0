//! Round orchestration, strategies, aggregation and evaluation.

mod local;
mod round;

use serde::{Deserialize, Serialize};

pub use local::{epoch_order, local_train, LocalUpdate};
pub use round::{Federation, NovelResult};

use crate::error::{Error, Result};
use crate::hypernet::HyperNet;
use crate::model::ModelConfig;
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Fedtp,
    VanillaPersonalized,
    Fedavg,
    Fedprox,
    LocalOnly,
    FedperHead,
}

impl StrategyName {
    pub const ALL: [StrategyName; 6] = [
        StrategyName::Fedtp,
        StrategyName::VanillaPersonalized,
        StrategyName::Fedavg,
        StrategyName::Fedprox,
        StrategyName::LocalOnly,
        StrategyName::FedperHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Fedtp => "fedtp",
            StrategyName::VanillaPersonalized => "vanilla_personalized",
            StrategyName::Fedavg => "fedavg",
            StrategyName::Fedprox => "fedprox",
            StrategyName::LocalOnly => "local_only",
            StrategyName::FedperHead => "fedper_head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        StrategyName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Strategy(format!("unknown strategy `{s}`")))
    }

    /// Keys kept in each client's local cache.
    pub fn cached_keys(self, model: &ModelConfig) -> Vec<String> {
        match self {
            StrategyName::VanillaPersonalized => model.attention_keys(),
            StrategyName::FedperHead => model.head_keys(),
            StrategyName::LocalOnly => model.param_shapes().into_keys().collect(),
            _ => Vec::new(),
        }
    }

    /// Keys held by the server as `ξ̄`.
    pub fn shared_keys(self, model: &ModelConfig) -> Vec<String> {
        let exclude = match self {
            StrategyName::Fedtp | StrategyName::VanillaPersonalized => model.attention_keys(),
            StrategyName::FedperHead => model.head_keys(),
            _ => Vec::new(),
        };
        model
            .param_shapes()
            .into_keys()
            .filter(|k| !exclude.contains(k))
            .collect()
    }

    pub fn aggregates(self) -> bool {
        self != StrategyName::LocalOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySpec {
    pub name: StrategyName,
    /// Proximal coefficient, read only by fedprox.
    pub mu: f64,
    /// Feed `+ΔW` to the hypernetwork VJP instead of `−ΔW`.
    pub literal_paper_sign: bool,
    pub freeze_embeddings: bool,
    /// Weight by `m_i / Σ_all m_j` instead of renormalizing within the cohort.
    pub literal_global_mass: bool,
}

impl Default for StrategySpec {
    fn default() -> Self {
        StrategySpec {
            name: StrategyName::Fedtp,
            mu: 0.01,
            literal_paper_sign: false,
            freeze_embeddings: false,
            literal_global_mass: false,
        }
    }
}

impl StrategySpec {
    pub fn new(name: StrategyName) -> Self {
        StrategySpec {
            name,
            ..StrategySpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::Config(format!("strategy.mu must be >= 0, got {}", self.mu)));
        }
        Ok(())
    }

    pub(crate) fn proximal(&self) -> f64 {
        if self.name == StrategyName::Fedprox {
            self.mu
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub server_lr: f64,
    pub batch_size: usize,
    pub sample_rate: f64,
    pub seed: u64,
    pub workers: usize,
    /// Evaluate every this many rounds; the last round is always evaluated.
    pub eval_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 50,
            local_epochs: 5,
            lr: 0.01,
            server_lr: 0.01,
            batch_size: 64,
            sample_rate: 1.0,
            seed: 0,
            workers: 1,
            eval_every: 1,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, v: String| Err(Error::Config(format!("{f}: invalid value {v}")));
        if self.rounds == 0 {
            return bad("rounds", "0".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "0".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", self.lr.to_string());
        }
        if !(self.server_lr > 0.0) || !self.server_lr.is_finite() {
            return bad("server_lr", self.server_lr.to_string());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "0".into());
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return bad("sample_rate", self.sample_rate.to_string());
        }
        if self.workers == 0 {
            return bad("workers", "0".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every", "0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Personalized parameters for strategies that keep them locally.
    pub cache: Option<ParamSet>,
}

impl ClientState {
    /// `m_i`.
    pub fn sample_count(&self) -> usize {
        self.train.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub round: usize,
    /// `ξ̄`.
    pub shared: ParamSet,
    pub hypernet: Option<HyperNet>,
    pub embeddings: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub client: usize,
    pub correct: usize,
    pub total: usize,
}

impl ClientEval {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// `Σ correct_i / Σ total_i`.
pub fn weighted_accuracy(evals: &[ClientEval]) -> f64 {
    let c: usize = evals.iter().map(|e| e.correct).sum();
    let t: usize = evals.iter().map(|e| e.total).sum();
    if t == 0 {
        0.0
    } else {
        c as f64 / t as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub sampled: Vec<usize>,
    /// `(client, mean local training loss)` for sampled clients.
    pub train_loss: Vec<(usize, f64)>,
    /// `(client, test accuracy)` for every client on evaluation rounds.
    pub test_acc: Vec<(usize, f64)>,
    pub evals: Vec<ClientEval>,
    pub weighted_acc: Option<f64>,
    /// `‖ξ̄^t − ξ̄^{t−1}‖`.
    pub delta_shared_norm: f64,
    pub grad_phi_norm: Option<f64>,
    pub grad_z_norm: Vec<(usize, f64)>,
    pub wall_clock_secs: f64,
}

impl RoundReport {
    pub fn mean_train_loss(&self) -> f64 {
        if self.train_loss.is_empty() {
            return f64::NAN;
        }
        self.train_loss.iter().map(|(_, l)| l).sum::<f64>() / self.train_loss.len() as f64
    }

    pub fn mean_test_acc(&self) -> Option<f64> {
        if self.test_acc.is_empty() {
            return None;
        }
        Some(self.test_acc.iter().map(|(_, a)| a).sum::<f64>() / self.test_acc.len() as f64)
    }
}

/// `Σ w_i·ξ_i`, accumulated in list order.
pub fn weighted_sum(updates: &[(&ParamSet, f64)]) -> Result<ParamSet> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::Config("aggregation needs at least one update".into()))?;
    let mut out: ParamSet = first
        .iter()
        .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
        .collect();
    for (set, w) in updates {
        if set.len() != out.len() {
            return Err(Error::shape("aggregate_shared", out.len(), set.len()));
        }
        for (k, acc) in out.iter_mut() {
            let t = set.get(k).ok_or_else(|| Error::MissingParam(k.clone()))?;
            acc.axpy(*w, t)?;
        }
    }
    Ok(out)
}

/// `ξ̄ = Σ (m_i/M)·ξ_i` with `M = Σ m_i` over `updates`.
pub fn aggregate_shared(updates: &[(&ParamSet, usize)]) -> Result<ParamSet> {
    let mass: usize = updates.iter().map(|(_, m)| m).sum();
    if mass == 0 {
        return Err(Error::Config("aggregation mass is zero".into()));
    }
    let weighted: Vec<(&ParamSet, f64)> = updates
        .iter()
        .map(|(p, m)| (*p, *m as f64 / mass as f64))
        .collect();
    weighted_sum(&weighted)
}

/// `⌈rate·N⌉` distinct clients, sorted, drawn from a stream keyed by
/// `(seed, round)`.
pub fn sample_cohort(num_clients: usize, rate: f64, seed: u64, round: usize) -> Vec<usize> {
    use rand::SeedableRng;
    let k = ((rate * num_clients as f64).ceil() as usize).clamp(1, num_clients);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(
        seed,
        &[0xc0_4047, round as u64],
    ));
    let mut ids = rand::seq::index::sample(&mut rng, num_clients, k).into_vec();
    ids.sort_unstable();
    ids
}

pub(crate) fn restrict(params: &ParamSet, keys: &[String]) -> ParamSet {
    keys.iter()
        .filter_map(|k| params.get(k).map(|t| (k.clone(), t.clone())))
        .collect()
}

pub(crate) fn overlay(base: &mut ParamSet, top: &ParamSet) {
    for (k, t) in top {
        base.insert(k.clone(), t.clone());
    }
}
