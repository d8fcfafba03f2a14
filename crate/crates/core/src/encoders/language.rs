//! Causal text transformer pooled at the end-of-sequence token.

use candle_core::{DType, Device, Tensor};

use super::attention::{causal_mask, run_blocks, Block};
use super::config::{EncoderConfig, EncoderInput};
use crate::dataset::PAD_ID;
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, Param, Parameters};

#[derive(Debug, Clone)]
pub struct LanguageEncoder {
    config: EncoderConfig,
    token_embedding: Param,
    pos_embedding: Param,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    proj: Linear,
}

/// Pads sequences with [`PAD_ID`] into a `(batch, len)` id tensor.
pub(crate) fn pad_batch(seqs: &[Vec<u32>], len: usize) -> Result<Tensor> {
    let mut ids = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(PAD_ID, len - s.len()));
    }
    Ok(Tensor::from_vec(ids, (seqs.len(), len), &Device::Cpu)?)
}

impl LanguageEncoder {
    pub fn new(config: EncoderConfig, prefix: &str, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let EncoderInput::Tokens { vocab_size, max_tokens } = config.input else {
            return Err(Error::Config("language encoder needs a token input config".into()));
        };
        let d = config.embed_dim;
        let mut init = Init::new(seed, dtype);
        let token_embedding = Param::new(
            format!("{prefix}.token_embedding"),
            &init.normal(&[vocab_size, d], 1.0)?,
        )?;
        let pos_embedding = Param::new(format!("{prefix}.pos_embedding"), &init.normal(&[max_tokens, d], 0.5)?)?;
        let blocks = (0..config.n_layers)
            .map(|l| {
                Block::new(
                    &mut init,
                    &format!("{prefix}.blocks.{l}"),
                    d,
                    config.n_heads,
                    config.mlp_dim(),
                )
            })
            .collect::<Result<_>>()?;
        let ln_final = LayerNorm::new(&init, &format!("{prefix}.ln_final"), d)?;
        let proj = Linear::new(
            &mut init,
            &format!("{prefix}.proj"),
            d,
            config.output_dim,
            (d as f64).powf(-0.5),
            false,
        )?;
        Ok(Self {
            config,
            token_embedding,
            pos_embedding,
            blocks,
            ln_final,
            proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn max_tokens(&self) -> usize {
        self.config.seq_len()
    }

    fn vocab_size(&self) -> usize {
        self.token_embedding.dims()[0]
    }

    /// Encodes each token sequence to `f^l`: the final-token state after the
    /// last norm, projected to `output_dim`. Returns `(batch, output_dim)`.
    pub fn encode(&self, seqs: &[Vec<u32>]) -> Result<Tensor> {
        if seqs.is_empty() {
            return Err(Error::Argument("no token sequences to encode".into()));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if len > self.max_tokens() {
            return Err(Error::Shape(format!(
                "sequence of {len} tokens exceeds max_tokens {}",
                self.max_tokens()
            )));
        }
        if let Some(s) = seqs.iter().find(|s| s.is_empty()) {
            return Err(Error::Shape(format!("empty token sequence in batch: {s:?}")));
        }
        let vocab = self.vocab_size() as u32;
        if let Some(bad) = seqs.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let b = seqs.len();
        let d = self.config.embed_dim;
        let ids = pad_batch(seqs, len)?;
        let x = self
            .token_embedding
            .tensor()
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, len, d))?
            .broadcast_add(&self.pos_embedding.tensor().narrow(0, 0, len)?)?;
        let mask = causal_mask(len, x.dtype())?;
        let (x, _) = run_blocks(&self.blocks, x, None, Some(&mask))?;
        let x = self.ln_final.forward(&x)?;
        let last: Vec<u32> = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| (i * len + s.len() - 1) as u32)
            .collect();
        let last = Tensor::from_vec(last, b, &Device::Cpu)?;
        let pooled = x.reshape((b * len, d))?.index_select(&last, 0)?;
        self.proj.forward(&pooled)
    }

    /// `f^l` of a single sequence.
    pub fn encode_language(&self, tokens: &[u32]) -> Result<Tensor> {
        Ok(self.encode(&[tokens.to_vec()])?.squeeze(0)?)
    }
}

impl Parameters for LanguageEncoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.token_embedding);
        f(&self.pos_embedding);
        self.blocks.iter().for_each(|b| b.visit(f));
        self.ln_final.visit(f);
        self.proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.token_embedding);
        f(&mut self.pos_embedding);
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.ln_final.visit_mut(f);
        self.proj.visit_mut(f);
    }
}
