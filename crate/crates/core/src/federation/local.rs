use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClientState, FederationConfig, StrategySpec};
use crate::autodiff::sgd_step;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::seed::derive_seed;
use crate::tensor::ParamSet;

/// Outcome of one client's local optimization.
#[derive(Clone, Debug)]
pub struct LocalUpdate {
    /// `θ_i^{t,K}`.
    pub params: ParamSet,
    /// `W^{t,K} − W^{t,0}` over the model's attention keys.
    pub delta_w: ParamSet,
    /// Sample-weighted mean cross-entropy over all local steps.
    pub train_loss: f64,
    pub steps: usize,
}

/// Visiting order of a client's training samples in one epoch. Depends only
/// on `(seed, client, round, epoch)`.
pub fn epoch_order(train: &[usize], seed: u64, client: usize, round: usize, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &[client as u64, round as u64, epoch as u64],
    ));
    order.shuffle(&mut rng);
    order
}

/// `K` epochs of mini-batch SGD on the client's training split, plus the
/// proximal term `μ/2‖θ−θ^0‖²` under fedprox.
pub fn local_train(
    model: &Transformer,
    data: &LabeledDataset,
    client: &ClientState,
    params: ParamSet,
    cfg: &FederationConfig,
    strategy: &StrategySpec,
    round: usize,
) -> Result<LocalUpdate> {
    if client.train.is_empty() {
        return Err(Error::Config(format!("client {} has no training samples", client.id)));
    }
    let start = params.clone();
    let mut params = params;
    let mu = strategy.proximal();
    let (mut loss_sum, mut seen, mut steps) = (0.0, 0usize, 0usize);
    for epoch in 0..cfg.local_epochs {
        let order = epoch_order(&client.train, cfg.seed, client.id, round, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(chunk)?;
            let (loss, mut grads) = model.loss_and_grads(&params, &batch)?;
            if mu > 0.0 {
                for (k, g) in grads.iter_mut() {
                    let diff = params[k].sub(&start[k])?;
                    g.axpy(mu, &diff)?;
                }
            }
            sgd_step(&mut params, &grads, cfg.lr)?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            steps += 1;
        }
    }
    let mut delta_w = ParamSet::new();
    for k in model.config().attention_keys() {
        if let (Some(a), Some(b)) = (params.get(&k), start.get(&k)) {
            delta_w.insert(k, a.sub(b)?);
        }
    }
    Ok(LocalUpdate {
        params,
        delta_w,
        train_loss: loss_sum / seen as f64,
        steps,
    })
}
