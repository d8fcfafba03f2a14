//! Named parameters, seeded initialization, and the small set of
//! differentiable building blocks the encoders and heads are made of.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A named trainable-or-frozen tensor.
///
/// Frozen parameters are handed to forward passes detached, so no gradient
/// can reach them.
#[derive(Debug)]
pub struct Param {
    name: String,
    var: Var,
    trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: &Tensor) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            var: Var::from_tensor(&value.detach())?,
            trainable: false,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rename(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// The value as seen by a forward pass.
    pub fn tensor(&self) -> Tensor {
        if self.trainable {
            self.var.as_tensor().clone()
        } else {
            self.var.as_detached_tensor()
        }
    }

    /// The underlying variable; gradients are keyed by it.
    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn value(&self) -> Tensor {
        self.var.as_detached_tensor()
    }

    pub fn set(&self, value: &Tensor) -> Result<()> {
        if value.dims() != self.var.dims() {
            return Err(Error::Shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.name,
                self.var.dims(),
                value.dims()
            )));
        }
        self.var.set(&value.to_dtype(self.var.dtype())?)?;
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        self.var.dims()
    }

    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }

    /// Values widened to `f64`, row-major.
    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.value().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }

    /// SHA-256 over dtype, shape, and the little-endian value bytes.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(format!("{:?}{:?}", self.var.dtype(), self.var.dims()).as_bytes());
        let flat = self.value().flatten_all()?;
        match flat.dtype() {
            DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| h.update(v.to_le_bytes())),
            _ => flat
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .for_each(|v| h.update(v.to_le_bytes())),
        }
        Ok(hex::encode(h.finalize()))
    }
}

impl Clone for Param {
    /// Deep copy: the clone owns separate storage.
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            var: Var::from_tensor(&self.var.as_detached_tensor()).expect("copying a cpu tensor cannot fail"),
            trainable: self.trainable,
        }
    }
}

/// Anything that owns [`Param`]s.
pub trait Parameters {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.elem_count());
        n
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut(&mut |p| p.set_trainable(trainable));
    }
}

/// Seeded tensor initializer.
pub struct Init {
    rng: ChaCha8Rng,
    dtype: DType,
}

impl Init {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn from_values(&self, values: Vec<f64>, dims: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    pub fn normal(&mut self, dims: &[usize], std: f64) -> Result<Tensor> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n = dims.iter().product();
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.from_values(values, dims)
    }

    pub fn uniform(&mut self, dims: &[usize], bound: f64) -> Result<Tensor> {
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
        let n = dims.iter().product();
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.from_values(values, dims)
    }

    pub fn zeros(&self, dims: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(dims, self.dtype, &Device::Cpu)?)
    }

    pub fn ones(&self, dims: &[usize]) -> Result<Tensor> {
        Ok(Tensor::ones(dims, self.dtype, &Device::Cpu)?)
    }
}

/// Affine map `y = x·Wᵀ + b` over the last dimension; `W` is `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize, std: f64, bias: bool) -> Result<Self> {
        let weight = Param::new(format!("{name}.weight"), &init.normal(&[out_dim, in_dim], std)?)?;
        let bias = if bias {
            Some(Param::new(format!("{name}.bias"), &init.zeros(&[out_dim])?)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight.tensor(), self.bias.as_ref().map(Param::tensor).as_ref())
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// `x·Wᵀ (+ b)` for `x` of any rank, `W` of shape `(out, in)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let in_dim = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
    if weight.dims()[1] != in_dim {
        return Err(Error::Shape(format!(
            "linear expects input width {}, got {in_dim}",
            weight.dims()[1]
        )));
    }
    let rows = x.elem_count() / in_dim;
    let mut y = x.reshape((rows, in_dim))?.matmul(&weight.t()?)?;
    if let Some(b) = bias {
        y = y.broadcast_add(b)?;
    }
    let mut out_dims = dims;
    *out_dims.last_mut().expect("non-empty") = weight.dims()[0];
    Ok(y.reshape(out_dims)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(init: &Init, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: Param::new(format!("{name}.gamma"), &init.ones(&[dim])?)?,
            beta: Param::new(format!("{name}.beta"), &init.zeros(&[dim])?)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.tensor())?
            .broadcast_add(&self.beta.tensor())?)
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    // the shift is constant for the derivative
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Numerically stable log-softmax over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Cosine similarity along the last dimension, broadcasting leading dims.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = a.broadcast_mul(b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok(dot.broadcast_div(&na.broadcast_mul(&nb)?)?)
}

/// Scalar tensor to `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], dims: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), dims, &Device::Cpu).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[1.0, 2.0, 3.0, -5.0, 0.0, 5.0], &[2, 3]);
        let s = softmax(&x).unwrap().sum(D::Minus1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = t(&[0.3, -1.2, 4.0], &[3]);
        let a = log_softmax(&x).unwrap().to_vec1::<f64>().unwrap();
        let b = softmax(&x).unwrap().log().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in a.iter().zip(b) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_is_stable() {
        let x = t(&[-800.0, 0.0, 800.0], &[3]);
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y[2], 800.0);
    }

    #[test]
    fn frozen_param_is_detached() {
        let mut p = Param::new("w", &t(&[1.0, 2.0], &[2])).unwrap();
        let loss = p.tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(p.var().as_tensor()).is_none());
        p.set_trainable(true);
        let loss = p.tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(p.var().as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g, vec![2.0, 4.0]);
    }

    #[test]
    fn clone_is_deep() {
        let p = Param::new("w", &t(&[1.0], &[1])).unwrap();
        let q = p.clone();
        q.set(&t(&[5.0], &[1])).unwrap();
        assert_eq!(p.to_vec().unwrap(), vec![1.0]);
        assert_ne!(p.checksum().unwrap(), q.checksum().unwrap());
    }

    #[test]
    fn init_is_seeded() {
        let a = Init::new(3, DType::F32).normal(&[4], 1.0).unwrap();
        let b = Init::new(3, DType::F32).normal(&[4], 1.0).unwrap();
        assert_eq!(a.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap());
    }
}
