//! Frozen autoregressive decoder conditioned on a learned prefix.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::dataset::{BOS_ID, EOS_ID, PAD_ID};
use crate::encoders::{causal_mask, run_blocks, Block};
use crate::error::{Error, Result};
use crate::nn::{log_softmax, Init, LayerNorm, Linear, Param, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: usize,
    /// Prefix positions plus token positions.
    pub max_positions: usize,
}

impl DecoderConfig {
    pub fn desk(vocab_size: usize, max_positions: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            n_heads: 4,
            n_layers: 2,
            mlp_ratio: 4,
            max_positions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.n_heads == 0
            || self.n_layers == 0
            || self.mlp_ratio == 0
            || self.max_positions < 2
        {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "decoder embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Small causal language model. Always frozen; only the prefix that feeds
/// it is trained.
#[derive(Debug, Clone)]
pub struct CaptionDecoder {
    config: DecoderConfig,
    token_embedding: Param,
    pos_embedding: Param,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    lm_head: Linear,
}

impl CaptionDecoder {
    pub fn new(config: DecoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut init = Init::new(seed, dtype);
        let token_embedding = Param::new("decoder.token_embedding", &init.normal(&[config.vocab_size, d], 1.0)?)?;
        let pos_embedding = Param::new("decoder.pos_embedding", &init.normal(&[config.max_positions, d], 0.5)?)?;
        let blocks = (0..config.n_layers)
            .map(|l| {
                Block::new(
                    &mut init,
                    &format!("decoder.blocks.{l}"),
                    d,
                    config.n_heads,
                    d * config.mlp_ratio,
                )
            })
            .collect::<Result<_>>()?;
        let ln_final = LayerNorm::new(&init, "decoder.ln_final", d)?;
        // small output weights keep the initial next-token distribution near uniform
        let lm_head = Linear::new(&mut init, "decoder.lm_head", d, config.vocab_size, 0.02, true)?;
        Ok(Self {
            config,
            token_embedding,
            pos_embedding,
            blocks,
            ln_final,
            lm_head,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Zeroes the output layer so every position predicts the uniform
    /// distribution.
    pub fn force_uniform(&self) -> Result<()> {
        for p in self.lm_head.params() {
            p.set(&p.value().zeros_like()?)?;
        }
        Ok(())
    }

    /// Next-token logits `(B, K + T, V)` for `prefix: (B, K, d)` followed by
    /// the embedded `tokens: (B, T)`.
    pub fn logits(&self, prefix: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let (b, k, d) = prefix.dims3()?;
        let (tb, t) = tokens.dims2()?;
        if tb != b || d != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "prefix {:?} does not match tokens {:?} / width {}",
                prefix.dims(),
                tokens.dims(),
                self.config.embed_dim
            )));
        }
        let len = k + t;
        if len > self.config.max_positions {
            return Err(Error::Shape(format!(
                "decoder input of {len} positions exceeds {}",
                self.config.max_positions
            )));
        }
        let emb = self
            .token_embedding
            .tensor()
            .index_select(&tokens.flatten_all()?, 0)?
            .reshape((b, t, d))?;
        let x = Tensor::cat(&[prefix, &emb], 1)?.broadcast_add(&self.pos_embedding.tensor().narrow(0, 0, len)?)?;
        let mask = causal_mask(len, x.dtype())?;
        let (x, _) = run_blocks(&self.blocks, x, None, Some(&mask))?;
        self.lm_head.forward(&self.ln_final.forward(&x)?)
    }

    /// Greedy decoding from a single prefix `(K, d)`; stops at EOS or when
    /// `max_tokens` have been produced.
    pub fn greedy(&self, prefix: &Tensor, max_tokens: usize) -> Result<Vec<u32>> {
        let prefix = prefix.unsqueeze(0)?;
        let k = prefix.dim(1)?;
        let mut seq = vec![BOS_ID];
        let mut out = Vec::new();
        while out.len() < max_tokens && k + seq.len() <= self.config.max_positions {
            let toks = Tensor::new(seq.as_slice(), &Device::Cpu)?.unsqueeze(0)?;
            let logits = self.logits(&prefix, &toks)?;
            let last = logits.get(0)?.get(k + seq.len() - 1)?;
            let next = last.argmax(D::Minus1)?.to_scalar::<u32>()?;
            if next == EOS_ID {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

impl Parameters for CaptionDecoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.token_embedding);
        f(&self.pos_embedding);
        self.blocks.iter().for_each(|b| b.visit(f));
        self.ln_final.visit(f);
        self.lm_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.token_embedding);
        f(&mut self.pos_embedding);
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.ln_final.visit_mut(f);
        self.lm_head.visit_mut(f);
    }
}

/// Maps `f^o` to `K` decoder-width prefix embeddings.
#[derive(Debug, Clone)]
pub struct PrefixProjection {
    proj: Linear,
    tokens: usize,
    width: usize,
}

impl PrefixProjection {
    pub fn new(input_dim: usize, tokens: usize, width: usize, seed: u64, dtype: DType) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::Config("prefix_tokens must be at least 1".into()));
        }
        let mut init = Init::new(seed, dtype);
        let mut proj = Linear::new(
            &mut init,
            "prefix.proj",
            input_dim,
            tokens * width,
            (input_dim as f64).powf(-0.5),
            true,
        )?;
        proj.set_trainable(true);
        Ok(Self { proj, tokens, width })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// `(B, d_o) -> (B, K, width)`.
    pub fn forward(&self, object: &Tensor) -> Result<Tensor> {
        let b = object.dim(0)?;
        Ok(self.proj.forward(object)?.reshape((b, self.tokens, self.width))?)
    }
}

impl Parameters for PrefixProjection {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.proj.visit_mut(f);
    }
}

/// Caption negative log-likelihood.
///
/// Each caption is a tokenized description `[BOS, c_1, …, c_{N−1}, EOS]`.
/// The decoder reads the prefix then `[BOS, c_1, …, c_{N−1}]` and predicts
/// `[c_1, …, c_{N−1}, EOS]`. Per caption the loss is the mean over its `N`
/// targets; the batch loss is the mean over captions.
pub fn vgc_loss(
    decoder: &CaptionDecoder,
    prefix: &PrefixProjection,
    objects: &Tensor,
    captions: &[Vec<u32>],
) -> Result<Tensor> {
    let b = captions.len();
    if b == 0 || objects.dim(0)? != b {
        return Err(Error::Shape(format!(
            "{} object features for {b} captions",
            objects.dim(0)?
        )));
    }
    if let Some(c) = captions.iter().find(|c| c.len() < 2) {
        return Err(Error::Argument(format!("caption {c:?} has no target tokens")));
    }
    let v = decoder.vocab_size();
    if let Some(bad) = captions.iter().flatten().find(|&&t| t as usize >= v) {
        return Err(Error::Shape(format!("caption token {bad} outside vocabulary of {v}")));
    }
    let k = prefix.tokens();
    let t = captions.iter().map(|c| c.len() - 1).max().unwrap_or(0);
    let mut inputs = Vec::with_capacity(b * t);
    let mut pick = vec![0f64; b * t * v];
    for (i, c) in captions.iter().enumerate() {
        let n = c.len() - 1;
        inputs.extend_from_slice(&c[..n]);
        inputs.extend(std::iter::repeat_n(PAD_ID, t - n));
        for (pos, &target) in c[1..].iter().enumerate() {
            pick[(i * t + pos) * v + target as usize] = 1.0 / (n * b) as f64;
        }
    }
    let dtype = objects.dtype();
    let inputs = Tensor::from_vec(inputs, (b, t), &Device::Cpu)?;
    let pick = Tensor::from_vec(pick, (b, t, v), &Device::Cpu)?.to_dtype(dtype)?;
    let logits = decoder.logits(&prefix.forward(objects)?, &inputs)?;
    // position k−1+i (the last prefix slot, then each input token) predicts target i
    let logp = log_softmax(&logits.narrow(1, k - 1, t)?)?;
    Ok(logp.mul(&pick)?.sum_all()?.neg()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;

    fn setup() -> (CaptionDecoder, PrefixProjection) {
        let dec = CaptionDecoder::new(DecoderConfig::desk(12, 16), 3, DType::F64).unwrap();
        let pre = PrefixProjection::new(8, 4, 64, 4, DType::F64).unwrap();
        (dec, pre)
    }

    fn objects(b: usize) -> Tensor {
        Tensor::randn(0f64, 1.0, (b, 8), &Device::Cpu).unwrap()
    }

    #[test]
    fn uniform_decoder_gives_log_vocab() {
        let (dec, pre) = setup();
        dec.force_uniform().unwrap();
        let caps = vec![vec![BOS_ID, 5, 6, EOS_ID], vec![BOS_ID, 7, EOS_ID]];
        let l = scalar(&vgc_loss(&dec, &pre, &objects(2), &caps).unwrap()).unwrap();
        assert!((l - (12f64).ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn confident_decoder_gives_zero() {
        let (dec, pre) = setup();
        // bias every position toward token 5 by a huge margin; caption predicts only 5s
        dec.force_uniform().unwrap();
        let mut bias = vec![0f64; 12];
        bias[5] = 1e4;
        let bias = Tensor::new(bias.as_slice(), &Device::Cpu).unwrap();
        dec.lm_head.visit(&mut |p| {
            if p.name().ends_with("bias") {
                p.set(&bias).unwrap();
            }
        });
        let caps = vec![vec![BOS_ID, 5, 5, 5]];
        let l = scalar(&vgc_loss(&dec, &pre, &objects(1), &caps).unwrap()).unwrap();
        assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn near_uniform_at_init() {
        let (dec, pre) = setup();
        // averaged over many distinct targets; a single caption is too noisy
        let caps: Vec<Vec<u32>> = (0..48u32)
            .map(|i| {
                let mut c = vec![BOS_ID];
                c.extend((0..6).map(|k| 4 + (i * 7 + k * 5) % 8));
                c.push(EOS_ID);
                c
            })
            .collect();
        let l = scalar(&vgc_loss(&dec, &pre, &objects(48), &caps).unwrap()).unwrap();
        assert!(l <= (12f64).ln() + 0.1, "{l}");
    }

    #[test]
    fn empty_caption_is_rejected() {
        let (dec, pre) = setup();
        assert!(matches!(
            vgc_loss(&dec, &pre, &objects(1), &[vec![BOS_ID]]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn padding_does_not_change_a_caption_loss() {
        let (dec, pre) = setup();
        let o = objects(2);
        let short = vec![BOS_ID, 7, EOS_ID];
        let long = vec![BOS_ID, 4, 5, 6, 8, EOS_ID];
        let both = scalar(&vgc_loss(&dec, &pre, &o, &[short.clone(), long.clone()]).unwrap()).unwrap();
        let a = scalar(&vgc_loss(&dec, &pre, &o.narrow(0, 0, 1).unwrap(), &[short]).unwrap()).unwrap();
        let b = scalar(&vgc_loss(&dec, &pre, &o.narrow(0, 1, 1).unwrap(), &[long]).unwrap()).unwrap();
        assert!((both - (a + b) / 2.0).abs() < 1e-10);
    }

    #[test]
    fn greedy_terminates() {
        let (dec, pre) = setup();
        let p = pre.forward(&objects(1)).unwrap().squeeze(0).unwrap();
        let out = dec.greedy(&p, 6).unwrap();
        assert!(out.len() <= 6);
    }
}
