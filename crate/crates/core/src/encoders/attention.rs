//! Pre-norm transformer blocks whose Q/K/V projections optionally carry
//! low-rank adapters.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear, softmax, Init, LayerNorm, Linear, Param, Parameters};

/// One low-rank pair: down-projection `A` (r×d) then up-projection `B` (d×r).
#[derive(Debug, Clone)]
pub struct LowRank {
    pub a: Param,
    pub b: Param,
}

impl LowRank {
    fn new(init: &mut Init, name: &str, dim: usize, rank: usize) -> Result<Self> {
        Ok(Self {
            a: Param::new(format!("{name}.lora_a"), &init.normal(&[rank, dim], 0.02)?)?,
            b: Param::new(format!("{name}.lora_b"), &init.zeros(&[dim, rank])?)?,
        })
    }

    /// `scale · B·A` as a dense `(d, d)` matrix.
    pub fn delta(&self, scale: f64) -> Result<Tensor> {
        Ok((self.b.value().matmul(&self.a.value())? * scale)?)
    }
}

impl Parameters for LowRank {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.a);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.a);
        f(&mut self.b);
    }
}

#[derive(Debug, Clone)]
pub struct LayerAdapters {
    pub q: LowRank,
    pub k: LowRank,
    pub v: LowRank,
}

impl Parameters for LayerAdapters {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl AdapterSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Low-rank pairs for the Q, K, and V projections of every block.
#[derive(Debug, Clone)]
pub struct AdapterBank {
    pub spec: AdapterSpec,
    pub layers: Vec<LayerAdapters>,
}

impl AdapterBank {
    /// `A ~ N(0, 0.02²)` from `seed`, `B = 0`.
    pub fn new(prefix: &str, n_layers: usize, dim: usize, spec: AdapterSpec, seed: u64, dtype: DType) -> Result<Self> {
        if spec.rank == 0 || spec.rank >= dim {
            return Err(Error::Config(format!(
                "adapter rank must satisfy 1 <= r < d = {dim}, got {}",
                spec.rank
            )));
        }
        if !spec.alpha.is_finite() || spec.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "adapter alpha must be positive, got {}",
                spec.alpha
            )));
        }
        let mut init = Init::new(seed, dtype);
        let layers = (0..n_layers)
            .map(|l| {
                let name = format!("{prefix}.blocks.{l}.attn");
                Ok(LayerAdapters {
                    q: LowRank::new(&mut init, &format!("{name}.q"), dim, spec.rank)?,
                    k: LowRank::new(&mut init, &format!("{name}.k"), dim, spec.rank)?,
                    v: LowRank::new(&mut init, &format!("{name}.v"), dim, spec.rank)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { spec, layers })
    }

    /// Sets every up-projection to zero, making the bank an exact no-op.
    pub fn zero_up_projections(&self) -> Result<()> {
        for layer in &self.layers {
            for lr in [&layer.q, &layer.k, &layer.v] {
                lr.b.set(&lr.b.value().zeros_like()?)?;
            }
        }
        Ok(())
    }
}

impl Parameters for AdapterBank {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub fn new(init: &mut Init, name: &str, dim: usize, n_heads: usize) -> Result<Self> {
        let std = (dim as f64).powf(-0.5);
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim, std, true)?,
            k: Linear::new(init, &format!("{name}.k"), dim, dim, std, true)?,
            v: Linear::new(init, &format!("{name}.v"), dim, dim, std, true)?,
            out: Linear::new(init, &format!("{name}.out"), dim, dim, std, true)?,
            n_heads,
        })
    }
}

impl Parameters for Attention {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// `W·x + b + scale·B·(A·x)`, or the plain projection without an adapter.
fn adapted_projection(x: &Tensor, base: &Linear, adapter: Option<(&LowRank, f64)>) -> Result<Tensor> {
    let y = base.forward(x)?;
    match adapter {
        None => Ok(y),
        Some((lr, scale)) => {
            let down = linear(x, &lr.a.tensor(), None)?;
            let up = linear(&down, &lr.b.tensor(), None)?;
            Ok((y + (up * scale)?)?)
        }
    }
}

fn split_heads(x: &Tensor, n_heads: usize) -> Result<Tensor> {
    let (b, t, d) = x.dims3()?;
    Ok(x.reshape((b, t, n_heads, d / n_heads))?.transpose(1, 2)?.contiguous()?)
}

/// Additive mask with `-inf` above the diagonal.
pub fn causal_mask(len: usize, dtype: DType) -> Result<Tensor> {
    let values: Vec<f32> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j > i { f32::NEG_INFINITY } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(values, (len, len), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Multi-head self-attention over `x: (batch, tokens, d)` with optional
/// low-rank adapters on Q, K, and V.
///
/// Returns the attention output and the softmax weights
/// `(batch, heads, queries, keys)`.
pub fn lora_attention(
    x: &Tensor,
    attn: &Attention,
    adapters: Option<(&LayerAdapters, f64)>,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (b, t, d) = x.dims3()?;
    if d % attn.n_heads != 0 {
        return Err(Error::Shape(format!(
            "width {d} not divisible by {} heads",
            attn.n_heads
        )));
    }
    let pick = |f: fn(&LayerAdapters) -> &LowRank| adapters.map(|(a, s)| (f(a), s));
    let q = adapted_projection(x, &attn.q, pick(|a| &a.q))?;
    let k = adapted_projection(x, &attn.k, pick(|a| &a.k))?;
    let v = adapted_projection(x, &attn.v, pick(|a| &a.v))?;
    let (q, k, v) = (
        split_heads(&q, attn.n_heads)?,
        split_heads(&k, attn.n_heads)?,
        split_heads(&v, attn.n_heads)?,
    );
    let head_dim = d / attn.n_heads;
    let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (head_dim as f64).powf(-0.5))?;
    if let Some(m) = mask {
        scores = scores.broadcast_add(m)?;
    }
    let weights = softmax(&scores)?;
    let y = weights.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
    Ok((attn.out.forward(&y)?, weights))
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(init: &mut Init, name: &str, dim: usize, n_heads: usize, mlp_dim: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(init, &format!("{name}.attn"), dim, n_heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(
                init,
                &format!("{name}.mlp.fc1"),
                dim,
                mlp_dim,
                (dim as f64).powf(-0.5),
                true,
            )?,
            fc2: Linear::new(
                init,
                &format!("{name}.mlp.fc2"),
                mlp_dim,
                dim,
                (mlp_dim as f64).powf(-0.5),
                true,
            )?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        adapters: Option<(&LayerAdapters, f64)>,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (a, weights) = lora_attention(&self.ln1.forward(x)?, &self.attn, adapters, mask)?;
        let x = (x + a)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        Ok(((x + h)?, weights))
    }

    /// Folds `scale·B·A` into the Q/K/V weights.
    pub fn merge(&mut self, adapters: &LayerAdapters, scale: f64) -> Result<()> {
        for (lin, lr) in [
            (&mut self.attn.q, &adapters.q),
            (&mut self.attn.k, &adapters.k),
            (&mut self.attn.v, &adapters.v),
        ] {
            let merged = (lin.weight.value() + lr.delta(scale)?)?;
            lin.weight.set(&merged)?;
        }
        Ok(())
    }
}

impl Parameters for Block {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.ln1.visit(f);
        self.attn.visit(f);
        self.ln2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.ln1.visit_mut(f);
        self.attn.visit_mut(f);
        self.ln2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Per-block attention weights recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// One `(batch, heads, queries, keys)` tensor per block.
    pub layers: Vec<Tensor>,
}

impl AttentionTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Largest deviation of any attention row sum from 1.
    pub fn max_row_sum_error(&self) -> Result<f64> {
        let mut worst = 0f64;
        for l in &self.layers {
            let sums = l
                .to_dtype(DType::F64)?
                .sum(candle_core::D::Minus1)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            for s in sums {
                worst = worst.max((s - 1.0).abs());
            }
        }
        Ok(worst)
    }
}

/// Runs `x` through `blocks`, routing block `l` through `adapters.layers[l]`.
pub fn run_blocks(
    blocks: &[Block],
    x: Tensor,
    adapters: Option<&AdapterBank>,
    mask: Option<&Tensor>,
) -> Result<(Tensor, AttentionTrace)> {
    let mut x = x;
    let mut layers = Vec::with_capacity(blocks.len());
    for (l, block) in blocks.iter().enumerate() {
        let layer_adapters = adapters.map(|bank| (&bank.layers[l], bank.spec.scale()));
        let (y, w) = block.forward(&x, layer_adapters, mask)?;
        x = y;
        layers.push(w);
    }
    Ok((x, AttentionTrace { layers }))
}
