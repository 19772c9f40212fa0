use std::time::Instant;

use rayon::prelude::*;
use rayon::ThreadPool;

use super::{
    local_train, overlay, restrict, sample_cohort, weighted_accuracy, weighted_sum, ClientEval, ClientState,
    FederationConfig, RoundReport, ServerState, StrategyName, StrategySpec,
};
use crate::autodiff::Tape;
use crate::data::{LabeledDataset, PartitionManifest};
use crate::error::{Error, Result};
use crate::hypernet::{init_embeddings, server_cotangent, HyperNet, HyperNetConfig};
use crate::model::{init_model, ModelConfig, Transformer};
use crate::seed::derive_seed;
use crate::tensor::{param_diff, param_norm, GradMap, ParamSet, Tensor};

const EVAL_CHUNK: usize = 256;

/// A complete simulated federation over one pooled dataset.
pub struct Federation<'a> {
    pub model: Transformer,
    pub strategy: StrategySpec,
    pub config: FederationConfig,
    pub data: &'a LabeledDataset,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pool: ThreadPool,
}

struct ClientOutcome {
    id: usize,
    params: ParamSet,
    train_loss: f64,
    grads: Option<(GradMap, Tensor)>,
}

/// Accuracy of a novel client before and after embedding fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct NovelResult {
    pub before: f64,
    pub after: f64,
    pub embedding: Tensor,
}

impl<'a> Federation<'a> {
    /// Initializes server and clients. Model and hypernetwork parameters
    /// derive from `config.seed`.
    pub fn new(
        model_config: ModelConfig,
        hyper_config: HyperNetConfig,
        strategy: StrategySpec,
        config: FederationConfig,
        data: &'a LabeledDataset,
        manifest: &PartitionManifest,
    ) -> Result<Self> {
        config.validate()?;
        strategy.validate()?;
        let model = Transformer::new(model_config)?;
        let mc = model.config().clone();
        let mut clients = Vec::with_capacity(manifest.num_clients());
        for (id, (train, test)) in manifest.train.iter().zip(&manifest.test).enumerate() {
            if train.is_empty() || test.is_empty() {
                return Err(Error::Config(format!("client {id} has an empty train or test split")));
            }
            clients.push(ClientState {
                id,
                train: train.clone(),
                test: test.clone(),
                cache: None,
            });
        }
        if clients.is_empty() {
            return Err(Error::Config("manifest has no clients".into()));
        }
        let init = init_model(&mc, derive_seed(config.seed, &[0x30de1]))?.merged();
        let cached = strategy.name.cached_keys(&mc);
        if !cached.is_empty() {
            let cache = restrict(&init, &cached);
            for c in &mut clients {
                c.cache = Some(cache.clone());
            }
        }
        let (hypernet, embeddings) = if strategy.name == StrategyName::Fedtp {
            let hn = HyperNet::init(hyper_config.clone(), &mc, derive_seed(config.seed, &[0x4e7]))?;
            let z = init_embeddings(clients.len(), hyper_config.embed_dim, config.seed)?;
            (Some(hn), z)
        } else {
            (None, Vec::new())
        };
        let server = ServerState {
            round: 0,
            shared: restrict(&init, &strategy.name.shared_keys(&mc)),
            hypernet,
            embeddings,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("workers: {e}")))?;
        Ok(Federation {
            model,
            strategy,
            config,
            data,
            server,
            clients,
            pool,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Every piece of mutable federation state as one flat array set:
    /// `shared.*`, `hypernet.*`, `z.{i}` and `client.{i}.*`.
    pub fn snapshot(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, t) in &self.server.shared {
            out.insert(format!("shared.{k}"), t.clone());
        }
        if let Some(hn) = &self.server.hypernet {
            for (k, t) in &hn.params {
                out.insert(format!("hypernet.{k}"), t.clone());
            }
        }
        for (i, z) in self.server.embeddings.iter().enumerate() {
            out.insert(format!("z.{i}"), z.clone());
        }
        for c in &self.clients {
            if let Some(cache) = &c.cache {
                for (k, t) in cache {
                    out.insert(format!("client.{}.{k}", c.id), t.clone());
                }
            }
        }
        out
    }

    /// Inverse of [`Federation::snapshot`]. Every array currently held must
    /// be present with the same shape; `round` becomes the server round.
    pub fn restore(&mut self, arrays: &ParamSet, round: usize) -> Result<()> {
        let mut next = self.snapshot();
        if arrays.len() != next.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                next.len(),
                arrays.len()
            )));
        }
        for (k, t) in next.iter_mut() {
            let src = arrays.get(k).ok_or_else(|| Error::MissingParam(k.clone()))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{k}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        let take = |prefix: &str| -> ParamSet {
            next.iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|r| (r.to_string(), t.clone())))
                .collect()
        };
        self.server.shared = take("shared.");
        if let Some(hn) = self.server.hypernet.as_mut() {
            hn.params = take("hypernet.");
        }
        for (i, z) in self.server.embeddings.iter_mut().enumerate() {
            *z = next[&format!("z.{i}")].clone();
        }
        for c in &mut self.clients {
            if c.cache.is_some() {
                c.cache = Some(take(&format!("client.{}.", c.id)));
            }
        }
        self.server.round = round;
        Ok(())
    }

    /// Full parameter set client `id` would start local training with now.
    pub fn client_params(&self, id: usize) -> Result<ParamSet> {
        let client = self
            .clients
            .get(id)
            .ok_or_else(|| Error::Config(format!("no client {id}")))?;
        let mut params = self.server.shared.clone();
        if let Some(hn) = &self.server.hypernet {
            overlay(&mut params, &hn.forward(&self.server.embeddings[id])?);
        }
        if let Some(cache) = &client.cache {
            overlay(&mut params, cache);
        }
        Ok(params)
    }

    /// Parameters generated for an arbitrary embedding on top of `ξ̄`.
    pub fn params_for_embedding(&self, z: &Tensor) -> Result<ParamSet> {
        let hn = self.hypernet()?;
        let mut params = self.server.shared.clone();
        overlay(&mut params, &hn.forward(z)?);
        Ok(params)
    }

    fn hypernet(&self) -> Result<&HyperNet> {
        self.server
            .hypernet
            .as_ref()
            .ok_or_else(|| Error::Strategy(format!("strategy {} has no hypernetwork", self.strategy.name.as_str())))
    }

    fn train_client(&self, id: usize, round: usize) -> Result<ClientOutcome> {
        let client = &self.clients[id];
        let params = self.client_params(id)?;
        let up = local_train(&self.model, self.data, client, params, &self.config, &self.strategy, round)?;
        let grads = match &self.server.hypernet {
            Some(hn) => {
                let cot = server_cotangent(&up.delta_w, self.strategy.literal_paper_sign);
                Some(hn.vjp(&self.server.embeddings[id], &cot)?)
            }
            None => None,
        };
        Ok(ClientOutcome {
            id,
            params: up.params,
            train_loss: up.train_loss,
            grads,
        })
    }

    /// One communication round: sample, train locally against the frozen
    /// server snapshot, then aggregate and update at the barrier in client
    /// id order.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let started = Instant::now();
        let t = self.server.round + 1;
        let n = self.clients.len();
        let cohort = sample_cohort(n, self.config.sample_rate, self.config.seed, t);
        let this = &*self;
        let results: Vec<Result<ClientOutcome>> = self
            .pool
            .install(|| cohort.par_iter().map(|&id| this.train_client(id, t)).collect());
        let mut outcomes = Vec::with_capacity(results.len());
        for (r, &id) in results.into_iter().zip(&cohort) {
            outcomes.push(r.map_err(|e| Error::Client {
                client: id,
                source: Box::new(e),
            })?);
        }

        let mass: usize = if self.strategy.literal_global_mass {
            self.clients.iter().map(ClientState::sample_count).sum()
        } else {
            outcomes.iter().map(|o| self.clients[o.id].sample_count()).sum()
        };
        let weights: Vec<f64> = outcomes
            .iter()
            .map(|o| self.clients[o.id].sample_count() as f64 / mass as f64)
            .collect();

        let mc = self.model.config().clone();
        let previous = self.server.shared.clone();
        if self.strategy.name.aggregates() {
            let keys = self.strategy.name.shared_keys(&mc);
            let parts: Vec<ParamSet> = outcomes.iter().map(|o| restrict(&o.params, &keys)).collect();
            let pairs: Vec<(&ParamSet, f64)> = parts.iter().zip(&weights).map(|(p, &w)| (p, w)).collect();
            self.server.shared = weighted_sum(&pairs)?;
        }
        let cached = self.strategy.name.cached_keys(&mc);
        if !cached.is_empty() {
            for o in &outcomes {
                self.clients[o.id].cache = Some(restrict(&o.params, &cached));
            }
        }

        let mut grad_phi_norm = None;
        let mut grad_z_norm = Vec::new();
        if let Some(hn) = self.server.hypernet.as_mut() {
            let mut gphi: Option<GradMap> = None;
            let mut gz = Vec::with_capacity(outcomes.len());
            for (o, &w) in outcomes.iter().zip(&weights) {
                let (gp, g) = o.grads.as_ref().expect("fedtp outcome carries hypernet grads");
                match gphi.as_mut() {
                    None => gphi = Some(gp.iter().map(|(k, t)| (k.clone(), t.scaled(w))).collect()),
                    Some(acc) => {
                        for (k, t) in gp {
                            match acc.get_mut(k) {
                                Some(a) => a.axpy(w, t)?,
                                None => {
                                    acc.insert(k.clone(), t.scaled(w));
                                }
                            }
                        }
                    }
                }
                let g = g.scaled(w);
                grad_z_norm.push((o.id, g.norm()));
                gz.push((o.id, g));
            }
            let gphi = gphi.unwrap_or_default();
            grad_phi_norm = Some(param_norm(&gphi));
            let beta = self.config.server_lr;
            if let Some((k, _)) = gphi.iter().find(|(_, g)| !g.all_finite()) {
                return Err(Error::NonFinite(k.clone()));
            }
            if let Some((id, _)) = gz.iter().find(|(_, g)| !g.all_finite()) {
                return Err(Error::NonFinite(format!("z{id}")));
            }
            for (k, g) in &gphi {
                hn.params
                    .get_mut(k)
                    .ok_or_else(|| Error::UnknownParam(k.clone()))?
                    .axpy(-beta, g)?;
            }
            if !self.strategy.freeze_embeddings {
                for (id, g) in &gz {
                    self.server.embeddings[*id].axpy(-beta, g)?;
                }
            }
        }
        self.server.round = t;

        let delta_shared_norm = param_norm(&param_diff(&self.server.shared, &previous)?);
        let evaluate = t % self.config.eval_every == 0 || t == self.config.rounds;
        let evals = if evaluate { self.evaluate()? } else { Vec::new() };
        Ok(RoundReport {
            round: t,
            sampled: cohort,
            train_loss: outcomes.iter().map(|o| (o.id, o.train_loss)).collect(),
            test_acc: evals.iter().map(|e| (e.client, e.accuracy())).collect(),
            weighted_acc: evaluate.then(|| weighted_accuracy(&evals)),
            evals,
            delta_shared_norm,
            grad_phi_norm,
            grad_z_norm,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining rounds up to `config.rounds`.
    pub fn run(&mut self) -> Result<Vec<RoundReport>> {
        let mut out = Vec::new();
        while self.server.round < self.config.rounds {
            out.push(self.run_round()?);
        }
        Ok(out)
    }

    /// Top-1 correct / total over `indices` under `params`.
    pub fn count_correct(&self, params: &ParamSet, indices: &[usize]) -> Result<(usize, usize)> {
        let (mut c, mut t) = (0, 0);
        for chunk in indices.chunks(EVAL_CHUNK) {
            let (cc, tt) = self.model.count_correct(params, &self.data.batch(chunk)?)?;
            c += cc;
            t += tt;
        }
        Ok((c, t))
    }

    /// Every client on its own test split with its personalized parameters.
    pub fn evaluate(&self) -> Result<Vec<ClientEval>> {
        let this = self;
        let results: Vec<Result<ClientEval>> = self.pool.install(|| {
            (0..this.clients.len())
                .into_par_iter()
                .map(|id| {
                    let params = this.client_params(id)?;
                    let (correct, total) = this.count_correct(&params, &this.clients[id].test)?;
                    Ok(ClientEval {
                        client: id,
                        correct,
                        total,
                    })
                })
                .collect()
        });
        results.into_iter().collect()
    }

    /// Mean of the trained client embeddings.
    pub fn mean_embedding(&self) -> Result<Tensor> {
        let hn = self.hypernet()?;
        let mut acc = Tensor::zeros(vec![hn.config.embed_dim]);
        let n = self.server.embeddings.len() as f64;
        for z in &self.server.embeddings {
            acc.axpy(1.0 / n, z)?;
        }
        Ok(acc)
    }

    /// Fits only a fresh embedding for an unseen client, starting from the
    /// mean embedding, with `φ` and `ξ̄` frozen.
    pub fn finetune_novel_client(
        &self,
        train: &[usize],
        test: &[usize],
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<NovelResult> {
        let hn = self.hypernet()?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("novel client needs train and test samples".into()));
        }
        let mut z = self.mean_embedding()?;
        let acc = |z: &Tensor| -> Result<f64> {
            let (c, t) = self.count_correct(&self.params_for_embedding(z)?, test)?;
            Ok(c as f64 / t as f64)
        };
        let before = acc(&z)?;
        let frozen_phi: ParamSet = hn.params.iter().map(|(k, t)| (k.clone(), t.detached())).collect();
        let frozen_shared: ParamSet = self
            .server
            .shared
            .iter()
            .map(|(k, t)| (k.clone(), t.detached()))
            .collect();
        let frozen_hn = HyperNet::from_params(hn.config.clone(), self.model.config(), frozen_phi)?;
        let novel_id = self.clients.len();
        for epoch in 0..epochs {
            let order = super::epoch_order(train, seed, novel_id, 0, epoch);
            for chunk in order.chunks(self.config.batch_size) {
                let batch = self.data.batch(chunk)?;
                let mut tape = Tape::new();
                let phi = frozen_hn.register(&mut tape);
                let zv = tape.param("z", &z);
                let outs = frozen_hn.forward_vars(&mut tape, &phi, zv)?;
                let mut vars = self.model.register(&mut tape, &frozen_shared);
                for (b, o) in outs.into_iter().enumerate() {
                    for (k, v) in frozen_hn.split_block_vars(&mut tape, b, o)? {
                        vars.insert(k, v);
                    }
                }
                let fwd = self.model.forward(&mut tape, &vars, &batch)?;
                let grads = tape.backward(fwd.loss)?;
                if let Some(g) = grads.get("z") {
                    if !g.all_finite() {
                        return Err(Error::NonFinite("z".into()));
                    }
                    z.axpy(-lr, g)?;
                }
            }
        }
        let after = acc(&z)?;
        Ok(NovelResult {
            before,
            after,
            embedding: z,
        })
    }
}
