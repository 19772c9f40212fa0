//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive eagerly as it is applied, so values are
//! available immediately and the same record can later be replayed with new
//! leaf bindings through [`Tape::forward_eval`]. [`Tape::backward`] walks the
//! record once in reverse.

mod ops;

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{GradMap, ParamSet, Tensor};

pub(crate) use ops::softmax_rows;
use ops::Op;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Leaf {
    Param(String),
    Input(String),
    Const,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    leaf: Option<Leaf>,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node cotangents produced by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient accumulated at `v`, or `None` when `v` was not on a path to the seed.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, leaf: Leaf, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            leaf: Some(leaf),
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named parameter. Its gradient is reported by
    /// [`Tape::backward`] only if `value.requires_grad()` is set.
    pub fn param(&mut self, name: impl Into<String>, value: &Tensor) -> Var {
        let rg = value.requires_grad();
        self.push_leaf(Leaf::Param(name.into()), value.detached(), rg)
    }

    /// Registers a named, non-differentiable input.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push_leaf(Leaf::Input(name.into()), value, false)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Leaf::Const, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let xs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = ops::forward(&op, &xs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            leaf: None,
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[.., m, k] x [k, n]` or batched `[B, m, k] x [B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    /// Elementwise sum; `b` may broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }

    /// Softmax along the last axis, computed with row-max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LayerNorm, &[a])
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }

    /// Rows of `table` selected by the integer-valued `indices`.
    pub fn embedding(&mut self, table: Var, indices: Var) -> Result<Var> {
        self.apply(Op::Embedding, &[table, indices])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Op::Reshape(shape.into()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "at least one input", 0));
        }
        self.apply(Op::Concat(axis), parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, len }, &[a])
    }

    /// Mean of every entry, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean(None), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Mean(Some(axis)), &[a])
    }

    /// Mean softmax cross-entropy of `logits [n, C]` against integer `targets [n]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.apply(Op::CrossEntropy, &[logits, targets])
    }

    /// Rebinds named leaves and re-evaluates every recorded operation.
    ///
    /// Every named input must be bound; parameters keep their recorded values
    /// unless a binding with their name is supplied. Returns the value of the
    /// last recorded node.
    pub fn forward_eval(&mut self, bindings: &BTreeMap<String, Tensor>) -> Result<Tensor> {
        let mut used = 0;
        for node in &mut self.nodes {
            let name = match &node.leaf {
                Some(Leaf::Param(n)) => n,
                Some(Leaf::Input(n)) => {
                    if !bindings.contains_key(n) {
                        return Err(Error::UnboundInput(n.clone()));
                    }
                    n
                }
                _ => continue,
            };
            if let Some(t) = bindings.get(name) {
                if t.shape() != node.value.shape() {
                    return Err(Error::shape(
                        "forward_eval",
                        format!("`{name}` {:?}", node.value.shape()),
                        format!("{:?}", t.shape()),
                    ));
                }
                node.value = t.detached();
                used += 1;
            }
        }
        if used < bindings.len() {
            let known: Vec<&String> = self
                .nodes
                .iter()
                .filter_map(|n| match &n.leaf {
                    Some(Leaf::Param(s)) | Some(Leaf::Input(s)) => Some(s),
                    _ => None,
                })
                .collect();
            if let Some(extra) = bindings.keys().find(|k| !known.contains(k)) {
                return Err(Error::UnboundInput(extra.clone()));
            }
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].leaf.is_some() {
                continue;
            }
            let value = {
                let node = &self.nodes[i];
                let xs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                ops::forward(&node.op, &xs)
                    .map_err(|e| Error::shape(node.op.name(), "recorded shapes", e))?
            };
            self.nodes[i].value = value;
        }
        self.nodes
            .last()
            .map(|n| n.value.clone())
            .ok_or_else(|| Error::shape("forward_eval", "non-empty tape", "empty"))
    }

    /// Reverse pass seeded with arbitrary output cotangents.
    pub fn backward_with(&self, seeds: &[(Var, &Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, cot) in seeds {
            let node = &self.nodes[v.0];
            if cot.shape() != node.value.shape() {
                return Err(Error::shape(
                    "backward",
                    format!("cotangent {:?}", node.value.shape()),
                    format!("{:?}", cot.shape()),
                ));
            }
            accumulate(&mut grads[v.0], cot.data());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if node.leaf.is_some() || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let xs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let local = ops::backward(&node.op, &xs, &node.value, &g, &needs);
            for (&j, d) in node.inputs.iter().zip(local) {
                if let (true, Some(d)) = (self.nodes[j].requires_grad, d) {
                    accumulate(&mut grads[j], &d);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// d(loss)/d(p) for every reachable parameter registered with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        let value = &self.nodes[loss.0].value;
        if value.len() != 1 {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        let seed = Tensor::full(value.shape().to_vec(), 1.0);
        let grads = self.backward_with(&[(loss, &seed)])?;
        Ok(self.param_grads(&grads))
    }

    /// Collects parameter gradients out of a backward result.
    pub fn param_grads(&self, grads: &Gradients) -> GradMap {
        let mut out = GradMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(Leaf::Param(name)), true, Some(g)) =
                (&node.leaf, node.requires_grad, &grads.grads[i])
            {
                let t = Tensor::from_parts(node.value.shape().to_vec(), g.clone());
                match out.get_mut(name) {
                    Some(existing) => existing.axpy(1.0, &t).expect("same parameter shape"),
                    None => {
                        out.insert(name.clone(), t);
                    }
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// In-place `p <- p - lr * g`. Parameters without a gradient are left alone.
pub fn sgd_step(params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFinite(name.clone()));
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("`{name}` {:?}", p.shape()),
                format!("{:?}", g.shape()),
            ));
        }
    }
    for (name, g) in grads {
        params.get_mut(name).unwrap().axpy(-lr, g)?;
    }
    Ok(())
}

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Probe at most this many coordinates per parameter tensor (random subset).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Max relative error between analytic gradients and central differences.
///
/// `f` returns the scalar value and its analytic gradient map. The error at
/// one coordinate is `|a - fd| / max(|a|, |fd|, 1e-12)`; a parameter absent
/// from the gradient map counts as analytic zero. Non-finite values count as
/// infinite error.
pub fn grad_check<F>(f: F, params: &ParamSet, cfg: &GradCheck) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<(f64, GradMap)>,
{
    if !(cfg.eps > 0.0 && cfg.eps <= 1e-2) {
        return Err(Error::Config(format!("grad_check eps must be in (0, 1e-2], got {}", cfg.eps)));
    }
    let (_, analytic) = f(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for (name, p) in params {
        if !p.requires_grad() {
            continue;
        }
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < p.len() => {
                let mut v = sample(&mut rng, p.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..p.len()).collect(),
        };
        for i in coords {
            let x0 = p.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = x0 + cfg.eps;
            let up = f(&work)?.0;
            work.get_mut(name).unwrap().data_mut()[i] = x0 - cfg.eps;
            let down = f(&work)?.0;
            work.get_mut(name).unwrap().data_mut()[i] = x0;
            let fd = (up - down) / (2.0 * cfg.eps);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[i]);
            let err = if a.is_finite() && fd.is_finite() {
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12)
            } else {
                f64::INFINITY
            };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
