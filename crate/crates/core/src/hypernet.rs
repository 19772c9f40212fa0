//! Server-side hypernetwork `h(φ; z)`.
//!
//! An MLP trunk maps a client embedding to a hidden code; one linear head per
//! transformer block turns that code into the block's concatenated
//! `W^Q ‖ W^K ‖ W^V` (row-major `d×d` each). Updates to `φ` and `z` are
//! vector–Jacobian products of the generated weights against a cotangent
//! built from the client's local weight change.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{GradMap, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperNetConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub trunk_layers: usize,
}

impl Default for HyperNetConfig {
    fn default() -> Self {
        HyperNetConfig {
            embed_dim: 32,
            hidden: 150,
            trunk_layers: 4,
        }
    }
}

impl HyperNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.trunk_layers == 0 {
            return Err(Error::Config(
                "hypernet embed_dim, hidden and trunk_layers must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Hypernetwork parameters together with the target shapes they produce.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperNet {
    pub config: HyperNetConfig,
    num_blocks: usize,
    d_model: usize,
    roles: Vec<&'static str>,
    /// `trunk.{l}.{weight,bias}`, `head.{b}.{weight,bias}`.
    pub params: ParamSet,
}

impl HyperNet {
    /// Fresh parameters. Trunk layers use He scaling; heads are scaled by
    /// `1/√(hidden·d_model)` so generated projections start near the
    /// magnitude of directly initialized ones.
    pub fn init(config: HyperNetConfig, model: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = model.d_model;
        let roles = model.attention_roles().to_vec();
        for l in 0..config.trunk_layers {
            let fan_in = if l == 0 { config.embed_dim } else { config.hidden };
            let std = if l == 0 {
                1.0 / (fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            params.insert(
                format!("trunk.{l}.weight"),
                Tensor::randn(vec![fan_in, config.hidden], std, &mut rng),
            );
            params.insert(format!("trunk.{l}.bias"), Tensor::zeros(vec![config.hidden]));
        }
        let out = roles.len() * d * d;
        let head_std = 1.0 / ((config.hidden * d) as f64).sqrt();
        for b in 0..model.num_blocks {
            params.insert(
                format!("head.{b}.weight"),
                Tensor::randn(vec![config.hidden, out], head_std, &mut rng),
            );
            params.insert(format!("head.{b}.bias"), Tensor::zeros(vec![out]));
        }
        Ok(HyperNet {
            config,
            num_blocks: model.num_blocks,
            d_model: d,
            roles,
            params,
        })
    }

    /// Wraps existing parameters, checking them against the model shape.
    pub fn from_params(config: HyperNetConfig, model: &ModelConfig, params: ParamSet) -> Result<Self> {
        let template = HyperNet::init(config.clone(), model, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::shape("hypernet", template.params.len(), params.len()));
        }
        for (k, t) in &template.params {
            let p = params.get(k).ok_or_else(|| Error::MissingParam(k.clone()))?;
            if p.shape() != t.shape() {
                return Err(Error::shape(
                    "hypernet",
                    format!("`{k}` {:?}", t.shape()),
                    format!("{:?}", p.shape()),
                ));
            }
        }
        Ok(HyperNet { params, ..template })
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    /// Length of one head's output.
    pub fn head_width(&self) -> usize {
        self.roles.len() * self.d_model * self.d_model
    }

    fn check_embedding(&self, z: &Tensor) -> Result<()> {
        if z.shape() != [self.config.embed_dim] {
            return Err(Error::shape(
                "hypernet_forward",
                format!("embedding [{}]", self.config.embed_dim),
                format!("{:?}", z.shape()),
            ));
        }
        Ok(())
    }

    /// Records `h(φ; z)` on `tape`, returning one `[1, head_width]` output per block.
    pub fn forward_vars(&self, tape: &mut Tape, phi: &BTreeMap<String, Var>, z: Var) -> Result<Vec<Var>> {
        let g = |k: String| {
            phi.get(&k)
                .copied()
                .ok_or(Error::MissingParam(k))
        };
        let mut h = tape.reshape(z, vec![1, self.config.embed_dim])?;
        for l in 0..self.config.trunk_layers {
            h = tape.matmul(h, g(format!("trunk.{l}.weight"))?)?;
            h = tape.add(h, g(format!("trunk.{l}.bias"))?)?;
            if l + 1 < self.config.trunk_layers {
                h = tape.relu(h)?;
            }
        }
        (0..self.num_blocks)
            .map(|b| {
                let o = tape.matmul(h, g(format!("head.{b}.weight"))?)?;
                tape.add(o, g(format!("head.{b}.bias"))?)
            })
            .collect()
    }

    /// Splits one block output var into named `d×d` projection vars.
    pub fn split_block_vars(&self, tape: &mut Tape, block: usize, out: Var) -> Result<Vec<(String, Var)>> {
        let dd = self.d_model * self.d_model;
        self.roles
            .iter()
            .enumerate()
            .map(|(r, role)| {
                let s = tape.slice(out, 1, r * dd, dd)?;
                let w = tape.reshape(s, vec![self.d_model, self.d_model])?;
                Ok((format!("blocks.{block}.attn.{role}"), w))
            })
            .collect()
    }

    pub fn register(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), tape.param(k.clone(), t)))
            .collect()
    }

    /// Generated attention set for embedding `z`.
    pub fn forward(&self, z: &Tensor) -> Result<ParamSet> {
        self.check_embedding(z)?;
        let mut tape = Tape::new();
        let phi = self.register(&mut tape);
        let zv = tape.input("z", z.clone());
        let outs = self.forward_vars(&mut tape, &phi, zv)?;
        let dd = self.d_model * self.d_model;
        let mut set = ParamSet::new();
        for (b, o) in outs.into_iter().enumerate() {
            let data = tape.value(o).data();
            for (r, role) in self.roles.iter().enumerate() {
                set.insert(
                    format!("blocks.{b}.attn.{role}"),
                    Tensor::from_parts(vec![self.d_model, self.d_model], data[r * dd..(r + 1) * dd].to_vec()),
                );
            }
        }
        Ok(set)
    }

    /// Flattens an attention-set-shaped map into per-block cotangents.
    fn block_cotangents(&self, delta: &ParamSet) -> Result<Vec<Tensor>> {
        let dd = self.d_model * self.d_model;
        let expected = self.num_blocks * self.roles.len();
        if delta.len() != expected {
            return Err(Error::shape("hypernet_grads", format!("{expected} matrices"), delta.len()));
        }
        (0..self.num_blocks)
            .map(|b| {
                let mut flat = Vec::with_capacity(self.head_width());
                for role in &self.roles {
                    let k = format!("blocks.{b}.attn.{role}");
                    let t = delta.get(&k).ok_or_else(|| Error::MissingParam(k.clone()))?;
                    if t.len() != dd {
                        return Err(Error::shape(
                            "hypernet_grads",
                            format!("`{k}` [{0}, {0}]", self.d_model),
                            format!("{:?}", t.shape()),
                        ));
                    }
                    flat.extend_from_slice(t.data());
                }
                Ok(Tensor::from_parts(vec![1, self.head_width()], flat))
            })
            .collect()
    }

    /// Vector–Jacobian products `(∂W/∂φ)ᵀ·cot` and `(∂W/∂z)ᵀ·cot`, i.e. a
    /// backward pass through [`HyperNet::forward`] seeded with `cot`.
    pub fn vjp(&self, z: &Tensor, cot: &ParamSet) -> Result<(GradMap, Tensor)> {
        self.check_embedding(z)?;
        let cots = self.block_cotangents(cot)?;
        let mut tape = Tape::new();
        let phi = self.register(&mut tape);
        let zv = tape.param("z", z);
        let outs = self.forward_vars(&mut tape, &phi, zv)?;
        let seeds: Vec<(Var, &Tensor)> = outs.iter().copied().zip(cots.iter()).collect();
        let grads = tape.backward_with(&seeds)?;
        let mut gphi = tape.param_grads(&grads);
        let gz = gphi
            .remove("z")
            .unwrap_or_else(|| Tensor::zeros(vec![self.config.embed_dim]));
        Ok((gphi, gz))
    }
}

/// Deterministic `N(0, 1)` embeddings, one per client.
pub fn init_embeddings(num_clients: usize, dim: usize, seed: u64) -> Result<Vec<Tensor>> {
    if num_clients == 0 || dim == 0 {
        return Err(Error::Config("num_clients and dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e4be_dd16_0000);
    Ok((0..num_clients)
        .map(|_| Tensor::randn(vec![dim], 1.0, &mut rng))
        .collect())
}

/// Output cotangent fed to [`HyperNet::vjp`] for a local change
/// `ΔW = W^K − W^0`. By default this is `−ΔW`, which makes the server step
/// descend the clients' losses; `literal_sign` passes `ΔW` unchanged.
pub fn server_cotangent(delta_w: &ParamSet, literal_sign: bool) -> ParamSet {
    let c = if literal_sign { 1.0 } else { -1.0 };
    delta_w.iter().map(|(k, t)| (k.clone(), t.scaled(c))).collect()
}

/// `φ ← φ − β·grad_φ`, `z ← z − β·grad_z`. Nothing changes if any input is non-finite.
pub fn apply_server_update(
    phi: &mut ParamSet,
    z: &mut Tensor,
    grad_phi: &GradMap,
    grad_z: &Tensor,
    beta: f64,
) -> Result<()> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::Config(format!("server lr must be finite and >= 0, got {beta}")));
    }
    for (k, g) in grad_phi {
        if !g.all_finite() {
            return Err(Error::NonFinite(k.clone()));
        }
        let p = phi.get(k).ok_or_else(|| Error::UnknownParam(k.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("apply_server_update", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
    }
    if !grad_z.all_finite() {
        return Err(Error::NonFinite("z".into()));
    }
    if grad_z.shape() != z.shape() {
        return Err(Error::shape("apply_server_update", format!("{:?}", z.shape()), format!("{:?}", grad_z.shape())));
    }
    for (k, g) in grad_phi {
        phi.get_mut(k).unwrap().axpy(-beta, g)?;
    }
    z.axpy(-beta, grad_z)?;
    Ok(())
}
