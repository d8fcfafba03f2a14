//! Vision transformer used for both the frozen vision branch and the
//! adapter-bearing domain branch.

use candle_core::{DType, Device, IndexOp, Tensor};

use super::attention::{run_blocks, AdapterBank, AdapterSpec, AttentionTrace, Block};
use super::config::{EncoderConfig, EncoderInput};
use crate::dataset::ViewImage;
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, Param, Parameters};

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    config: EncoderConfig,
    prefix: String,
    patch_embed: Linear,
    class_embedding: Param,
    pos_embedding: Param,
    ln_pre: LayerNorm,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    proj: Linear,
    adapters: Option<AdapterBank>,
}

impl VisionEncoder {
    pub fn new(config: EncoderConfig, prefix: &str, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let EncoderInput::Image { patch_size, .. } = config.input else {
            return Err(Error::Config("vision encoder needs an image input config".into()));
        };
        let d = config.embed_dim;
        let patch_dim = patch_size * patch_size * 3;
        let mut init = Init::new(seed, dtype);
        let patch_embed = Linear::new(
            &mut init,
            &format!("{prefix}.patch_embed"),
            patch_dim,
            d,
            (patch_dim as f64).powf(-0.5),
            false,
        )?;
        let class_embedding = Param::new(format!("{prefix}.class_embedding"), &init.normal(&[d], 0.5)?)?;
        let pos_embedding = Param::new(
            format!("{prefix}.pos_embedding"),
            &init.normal(&[config.seq_len(), d], 0.5)?,
        )?;
        let ln_pre = LayerNorm::new(&init, &format!("{prefix}.ln_pre"), d)?;
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
        let ln_post = LayerNorm::new(&init, &format!("{prefix}.ln_post"), d)?;
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
            prefix: prefix.to_owned(),
            patch_embed,
            class_embedding,
            pos_embedding,
            ln_pre,
            blocks,
            ln_post,
            proj,
            adapters: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.proj.weight.var().dtype()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn adapters(&self) -> Option<&AdapterBank> {
        self.adapters.as_ref()
    }

    pub fn adapters_mut(&mut self) -> Option<&mut AdapterBank> {
        self.adapters.as_mut()
    }

    pub fn image_size(&self) -> usize {
        match self.config.input {
            EncoderInput::Image { image_size, .. } => image_size,
            EncoderInput::Tokens { .. } => unreachable!("validated at construction"),
        }
    }

    pub fn patch_size(&self) -> usize {
        match self.config.input {
            EncoderInput::Image { patch_size, .. } => patch_size,
            EncoderInput::Tokens { .. } => unreachable!("validated at construction"),
        }
    }

    /// Patches per side of the square patch grid.
    pub fn grid_side(&self) -> usize {
        self.image_size() / self.patch_size()
    }

    /// Flattens views into `(batch, patches, patch·patch·3)` with pixels mapped to `[-1, 1]`.
    pub fn patchify(&self, views: &[&ViewImage]) -> Result<Tensor> {
        let size = self.image_size();
        let p = self.patch_size();
        let side = size / p;
        let patch_dim = p * p * 3;
        let mut data = Vec::with_capacity(views.len() * side * side * patch_dim);
        for view in views {
            if view.width() != size || view.height() != size {
                return Err(Error::Shape(format!(
                    "view is {}x{}, encoder expects {size}x{size}",
                    view.width(),
                    view.height()
                )));
            }
            let px = view.pixels();
            for gy in 0..side {
                for gx in 0..side {
                    for y in gy * p..(gy + 1) * p {
                        let row = (y * size + gx * p) * 3;
                        data.extend(px[row..row + p * 3].iter().map(|&v| v as f32 / 127.5 - 1.0));
                    }
                }
            }
        }
        Ok(Tensor::from_vec(data, (views.len(), side * side, patch_dim), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    /// Embeds pre-patchified views. Routes attention through the adapter bank
    /// when one is attached. Returns `(batch, output_dim)` pooled class-token
    /// features and the attention trace.
    pub fn forward_patches(&self, patches: &Tensor) -> Result<(Tensor, AttentionTrace)> {
        let (b, n, _) = patches.dims3()?;
        let d = self.config.embed_dim;
        if n + 1 != self.config.seq_len() {
            return Err(Error::Shape(format!(
                "expected {} patches, got {n}",
                self.config.seq_len() - 1
            )));
        }
        let tokens = self.patch_embed.forward(patches)?;
        let cls = self
            .class_embedding
            .tensor()
            .reshape((1, 1, d))?
            .broadcast_as((b, 1, d))?;
        let x = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos_embedding.tensor())?;
        let x = self.ln_pre.forward(&x)?;
        let (x, trace) = run_blocks(&self.blocks, x, self.adapters.as_ref(), None)?;
        let pooled = self.ln_post.forward(&x.i((.., 0, ..))?)?;
        Ok((self.proj.forward(&pooled)?, trace))
    }

    /// Frozen-branch embedding `f^v_j` of a single view.
    pub fn encode_vision(&self, view: &ViewImage) -> Result<Tensor> {
        if self.adapters.is_some() {
            return Err(Error::State(
                "encode_vision called on an adapter-bearing encoder".into(),
            ));
        }
        let (f, _) = self.forward_patches(&self.patchify(&[view])?)?;
        Ok(f.squeeze(0)?)
    }

    /// Domain-branch embedding `f^d_j` of a single view plus its attention trace.
    pub fn encode_domain(&self, view: &ViewImage) -> Result<(Tensor, AttentionTrace)> {
        if self.adapters.is_none() {
            return Err(Error::State("encode_domain requires an adapter bank".into()));
        }
        let (f, trace) = self.forward_patches(&self.patchify(&[view])?)?;
        Ok((f.squeeze(0)?, trace))
    }

    /// Deep copy of the base weights under the `domain` prefix with a fresh
    /// adapter bank (`B = 0`). Only the adapters are left trainable.
    pub fn clone_as_domain_encoder(&self, rank: usize, alpha: f64, init_seed: u64) -> Result<Self> {
        self.clone_with_adapters("domain", AdapterSpec { rank, alpha }, init_seed)
    }

    pub fn clone_with_adapters(&self, prefix: &str, spec: AdapterSpec, init_seed: u64) -> Result<Self> {
        if self.adapters.is_some() {
            return Err(Error::State("encoder already carries adapters".into()));
        }
        let bank = AdapterBank::new(
            prefix,
            self.config.n_layers,
            self.config.embed_dim,
            spec,
            init_seed,
            self.dtype(),
        )?;
        let mut out = self.clone();
        let old = format!("{}.", self.prefix);
        let new = format!("{prefix}.");
        out.visit_mut(&mut |p| {
            let renamed = p.name().replacen(&old, &new, 1);
            p.rename(renamed);
            p.set_trainable(false);
        });
        out.prefix = prefix.to_owned();
        out.adapters = Some(bank);
        if let Some(a) = out.adapters.as_mut() {
            a.set_trainable(true);
        }
        Ok(out)
    }

    /// Adapter-free copy whose Q/K/V weights absorb `(α/r)·B·A`.
    pub fn merge_adapter(&self) -> Result<Self> {
        let bank = self
            .adapters
            .as_ref()
            .ok_or_else(|| Error::State("no adapter to merge".into()))?;
        let mut out = self.clone();
        out.adapters = None;
        for (block, layer) in out.blocks.iter_mut().zip(&bank.layers) {
            block.merge(layer, bank.spec.scale())?;
        }
        Ok(out)
    }

    /// Copy with every adapter up-projection zeroed.
    pub fn with_zeroed_adapters(&self) -> Result<Self> {
        let out = self.clone();
        if let Some(bank) = &out.adapters {
            bank.zero_up_projections()?;
        }
        Ok(out)
    }

    /// Visits only the non-adapter weights.
    pub fn visit_base<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.patch_embed.visit(f);
        f(&self.class_embedding);
        f(&self.pos_embedding);
        self.ln_pre.visit(f);
        self.blocks.iter().for_each(|b| b.visit(f));
        self.ln_post.visit(f);
        self.proj.visit(f);
    }

    pub fn visit_base_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.patch_embed.visit_mut(f);
        f(&mut self.class_embedding);
        f(&mut self.pos_embedding);
        self.ln_pre.visit_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.ln_post.visit_mut(f);
        self.proj.visit_mut(f);
    }
}

impl Parameters for VisionEncoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.visit_base(f);
        if let Some(a) = &self.adapters {
            a.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.visit_base_mut(f);
        if let Some(a) = &mut self.adapters {
            a.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> VisionEncoder {
        VisionEncoder::new(EncoderConfig::desk_vision(16), "vision", 7, DType::F32).unwrap()
    }

    fn noise_view(seed: u8) -> ViewImage {
        let px = (0..16 * 16 * 3)
            .map(|i| ((i as u32 * 37 + seed as u32 * 101) % 251) as u8)
            .collect();
        ViewImage::new(16, 16, px).unwrap()
    }

    #[test]
    fn output_has_output_dim_and_is_deterministic() {
        let enc = encoder();
        let v = noise_view(1);
        let a = enc.encode_vision(&v).unwrap().to_vec1::<f32>().unwrap();
        let b = enc.encode_vision(&v).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn black_and_white_images_differ() {
        let enc = encoder();
        let black = ViewImage::filled(16, 16, [0, 0, 0]).unwrap();
        let white = ViewImage::filled(16, 16, [255, 255, 255]).unwrap();
        let a = enc.encode_vision(&black).unwrap().to_vec1::<f32>().unwrap();
        let b = enc.encode_vision(&white).unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn wrong_view_size_is_a_shape_error() {
        let enc = encoder();
        let v = ViewImage::filled(8, 8, [0, 0, 0]).unwrap();
        assert!(matches!(enc.encode_vision(&v), Err(Error::Shape(_))));
    }

    #[test]
    fn fresh_clone_matches_source_exactly() {
        let enc = encoder();
        let dom = enc.clone_as_domain_encoder(4, 4.0, 3).unwrap();
        let v = noise_view(9);
        let (fd, trace) = dom.encode_domain(&v).unwrap();
        let fv = enc.encode_vision(&v).unwrap();
        assert_eq!(fd.to_vec1::<f32>().unwrap(), fv.to_vec1::<f32>().unwrap());
        assert_eq!(trace.n_layers(), 4);
        assert!(trace.max_row_sum_error().unwrap() < 1e-5);
    }

    #[test]
    fn clone_renames_and_sets_mask() {
        let enc = encoder();
        let dom = enc.clone_as_domain_encoder(4, 4.0, 3).unwrap();
        let mut adapter_count = 0;
        dom.visit(&mut |p| {
            assert!(p.name().starts_with("domain."), "{}", p.name());
            let is_adapter = p.name().contains("lora_");
            assert_eq!(p.trainable(), is_adapter);
            if is_adapter {
                adapter_count += p.elem_count();
            }
        });
        assert_eq!(adapter_count, 4 * 3 * 2 * 64 * 4);
        // the source is untouched
        enc.visit(&mut |p| assert!(p.name().starts_with("vision.")));
    }

    #[test]
    fn same_seed_clones_are_identical() {
        let enc = encoder();
        let a = enc.clone_as_domain_encoder(4, 4.0, 11).unwrap();
        let b = enc.clone_as_domain_encoder(4, 4.0, 11).unwrap();
        let sums = |e: &VisionEncoder| {
            e.adapters()
                .unwrap()
                .params()
                .iter()
                .map(|p| p.checksum().unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(sums(&a), sums(&b));
    }

    #[test]
    fn rank_must_be_below_width() {
        let enc = encoder();
        assert!(matches!(
            enc.clone_as_domain_encoder(64, 64.0, 0),
            Err(Error::Config(_))
        ));
        assert!(enc.clone_as_domain_encoder(0, 1.0, 0).is_err());
    }

    #[test]
    fn merge_of_zero_adapters_is_exact_and_single_use() {
        let enc = encoder();
        let dom = enc.clone_as_domain_encoder(4, 4.0, 3).unwrap();
        let merged = dom.merge_adapter().unwrap();
        let w = |e: &VisionEncoder| e.blocks()[2].attn.v.weight.to_vec().unwrap();
        assert_eq!(w(&merged), w(&enc));
        assert!(matches!(merged.merge_adapter(), Err(Error::State(_))));
        assert!(matches!(enc.encode_domain(&noise_view(0)), Err(Error::State(_))));
        assert!(matches!(dom.encode_vision(&noise_view(0)), Err(Error::State(_))));
    }
}
