//! Dense row-major tensors and named parameter sets.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape-tagged `f64` buffer with an optional gradient slot.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default = "default_true")]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

fn default_true() -> bool {
    true
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", "positive extents", format!("{shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{} elements for {:?}", numel(&shape), shape),
                data.len(),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: true,
            grad: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_parts(Vec::new(), vec![v])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::from_parts(shape, vec![0.0; n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::from_parts(shape, vec![v; n])
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                x * std
            })
            .collect();
        Tensor::from_parts(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    /// Copy with `requires_grad` cleared.
    pub fn detached(&self) -> Self {
        let mut t = Tensor::from_parts(self.shape.clone(), self.data.clone());
        t.requires_grad = false;
        t
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", self.data.len(), grad.len()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.data.len()),
                format!("{shape:?}"),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise `self + scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "axpy",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        out.grad = None;
        Ok(out)
    }

    pub fn scaled(&self, c: f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|x| c * x).collect())
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// Named parameters in deterministic (lexicographic) order.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Euclidean norm over every entry of every tensor in the set.
pub fn param_norm(params: &ParamSet) -> f64 {
    params
        .values()
        .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// `a - b` over matching keys; fails on key or shape mismatch.
pub fn param_diff(a: &ParamSet, b: &ParamSet) -> Result<ParamSet> {
    if a.len() != b.len() {
        return Err(Error::shape("param_diff", a.len(), b.len()));
    }
    a.iter()
        .map(|(k, ta)| {
            let tb = b.get(k).ok_or_else(|| Error::MissingParam(k.clone()))?;
            Ok((k.clone(), ta.sub(tb)?))
        })
        .collect()
}

/// Total scalar count.
pub fn param_count(params: &ParamSet) -> usize {
    params.values().map(Tensor::len).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_length_must_match_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn grad_shape_is_checked() {
        let mut t = Tensor::zeros(vec![3]);
        assert!(t.set_grad(vec![0.0; 2]).is_err());
        t.set_grad(vec![1.0; 3]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(2.5);
        assert!(s.shape().is_empty());
        assert_eq!(s.item(), 2.5);
    }
}
