//! The full grounding system: three encoders, the score head, and the
//! caption branch, plus the batched forward passes used by training and
//! evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::{GroundingDataset, ReferenceRecord, Vocabulary};
use crate::encoders::{AdapterSpec, EncoderConfig, LanguageEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::head::{fuse, EncoderToggles, ScoreHead};
use crate::nn::{Param, Parameters};
use crate::objectives::{
    lgr_loss_logits, object_feature_tensor, vgc_loss, vlc_loss, CaptionDecoder, DecoderConfig, PrefixProjection,
    TaskMask, VlcMode,
};

/// Seed for the frozen stand-in backbones. Fixed so that every run, whatever
/// its training seed, starts from the same "pretrained" encoders.
pub const BACKBONE_SEED: u64 = 20_240_417;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Self::F32 => DType::F32,
            Self::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: EncoderConfig,
    pub language: EncoderConfig,
    pub decoder: DecoderConfig,
    pub head_hidden: Vec<usize>,
    /// `None` once the adapters have been merged into the base weights.
    pub adapter: Option<AdapterSpec>,
    pub prefix_tokens: usize,
    pub toggles: EncoderToggles,
    pub backbone_seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    /// Desk-scale system for the given image size and vocabulary.
    pub fn desk(image_size: usize, vocab_size: usize, max_tokens: usize) -> Self {
        let vision = EncoderConfig::desk_vision(image_size);
        let od = vision.output_dim;
        let prefix_tokens = 4;
        Self {
            vision,
            language: EncoderConfig::desk_language(vocab_size, max_tokens),
            decoder: DecoderConfig::desk(vocab_size, prefix_tokens + max_tokens),
            head_hidden: vec![2 * od, 2 * od],
            adapter: Some(AdapterSpec { rank: 4, alpha: 4.0 }),
            prefix_tokens,
            toggles: EncoderToggles::default(),
            backbone_seed: BACKBONE_SEED,
            precision: Precision::F32,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.vision.output_dim
    }

    pub fn max_tokens(&self) -> usize {
        self.language.seq_len()
    }

    pub fn with_prefix_tokens(mut self, k: usize) -> Self {
        self.prefix_tokens = k;
        self.decoder.max_positions = k + self.max_tokens();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.language.validate()?;
        self.decoder.validate()?;
        self.toggles.validate()?;
        if self.language.output_dim != self.output_dim() {
            return Err(Error::Config(format!(
                "language output_dim {} differs from vision output_dim {}",
                self.language.output_dim,
                self.output_dim()
            )));
        }
        if self.prefix_tokens == 0 {
            return Err(Error::Config("prefix_tokens must be at least 1".into()));
        }
        if self.decoder.max_positions < self.prefix_tokens + self.max_tokens() {
            return Err(Error::Config(
                "decoder max_positions cannot hold prefix plus caption".into(),
            ));
        }
        Ok(())
    }
}

/// Parameter groups, in the order they are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    VisionEncoder,
    LanguageEncoder,
    DomainEncoder,
    DomainAdapters,
    ScoreHead,
    PrefixProjection,
    CaptionDecoder,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::VisionEncoder,
        Group::LanguageEncoder,
        Group::DomainEncoder,
        Group::DomainAdapters,
        Group::ScoreHead,
        Group::PrefixProjection,
        Group::CaptionDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::VisionEncoder => "vision_encoder",
            Group::LanguageEncoder => "language_encoder",
            Group::DomainEncoder => "domain_encoder",
            Group::DomainAdapters => "domain_adapters",
            Group::ScoreHead => "score_head",
            Group::PrefixProjection => "prefix_projection",
            Group::CaptionDecoder => "caption_decoder",
        }
    }

    /// Part of the domain-specific encoder (base weights or adapters).
    pub fn is_domain(self) -> bool {
        matches!(self, Group::DomainEncoder | Group::DomainAdapters)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which views of each object the model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ViewMode {
    #[default]
    Multi,
    Single(usize),
}

impl ViewMode {
    pub fn select(self, available: usize) -> Result<Vec<usize>> {
        match self {
            ViewMode::Multi => Ok((0..available).collect()),
            ViewMode::Single(i) if i < available => Ok(vec![i]),
            ViewMode::Single(i) => Err(Error::Argument(format!(
                "single view index {i} out of range for {available} views"
            ))),
        }
    }
}

impl FromStr for ViewMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "multi" => Ok(ViewMode::Multi),
            None if s == "single" => Ok(ViewMode::Single(0)),
            Some(("single", idx)) => idx
                .parse()
                .map(ViewMode::Single)
                .map_err(|_| Error::Argument(format!("bad view index `{idx}`"))),
            _ => Err(Error::Argument(format!(
                "view mode must be `multi`, `single`, or `single:<idx>`, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for ViewMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewMode::Multi => f.write_str("multi"),
            ViewMode::Single(i) => write!(f, "single:{i}"),
        }
    }
}

/// Loss selection for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub mask: TaskMask,
    pub vlc_mode: VlcMode,
    pub vlc_temperature: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            mask: TaskMask::ALL,
            vlc_mode: VlcMode::Infonce,
            vlc_temperature: 0.07,
        }
    }
}

/// Loss terms of one batch. Disabled or inapplicable terms are `None`.
#[derive(Debug, Clone)]
pub struct BatchLosses {
    pub lgr: Tensor,
    pub vlc: Option<Tensor>,
    pub vgc: Option<Tensor>,
    pub total: Tensor,
}

#[derive(Debug, Clone)]
pub struct GroundingModel {
    config: ModelConfig,
    vocabulary: Vocabulary,
    pub vision: VisionEncoder,
    pub language: LanguageEncoder,
    pub domain: VisionEncoder,
    pub head: ScoreHead,
    pub decoder: CaptionDecoder,
    pub prefix: PrefixProjection,
}

impl GroundingModel {
    /// Frozen backbones come from `config.backbone_seed`; the adapters,
    /// head, and prefix projection from `init_seed`.
    pub fn new(config: ModelConfig, vocabulary: Vocabulary, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab_size = match config.language.input {
            crate::encoders::EncoderInput::Tokens { vocab_size, .. } => vocab_size,
            _ => unreachable!("validated as a token encoder"),
        };
        if vocab_size != vocabulary.size() || config.decoder.vocab_size != vocabulary.size() {
            return Err(Error::Config(format!(
                "model vocabulary size {vocab_size} does not match the {}-token vocabulary",
                vocabulary.size()
            )));
        }
        let dtype = config.precision.dtype();
        let od = config.output_dim();
        let vision = VisionEncoder::new(config.vision.clone(), "vision", config.backbone_seed, dtype)?;
        let language = LanguageEncoder::new(
            config.language.clone(),
            "language",
            config.backbone_seed.wrapping_add(1),
            dtype,
        )?;
        let decoder = CaptionDecoder::new(config.decoder.clone(), config.backbone_seed.wrapping_add(2), dtype)?;
        let spec = config.adapter.unwrap_or(AdapterSpec { rank: 1, alpha: 1.0 });
        let mut domain = vision.clone_with_adapters("domain", spec, init_seed)?;
        if config.adapter.is_none() {
            domain = domain.merge_adapter()?;
        }
        let head = ScoreHead::new(3 * od, &config.head_hidden, init_seed.wrapping_add(1), dtype)?;
        let prefix = PrefixProjection::new(
            od,
            config.prefix_tokens,
            config.decoder.embed_dim,
            init_seed.wrapping_add(2),
            dtype,
        )?;
        Ok(Self {
            config,
            vocabulary,
            vision,
            language,
            domain,
            head,
            decoder,
            prefix,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    pub fn toggles(&self) -> EncoderToggles {
        self.config.toggles
    }

    pub fn set_toggles(&mut self, toggles: EncoderToggles) -> Result<()> {
        toggles.validate()?;
        self.config.toggles = toggles;
        Ok(())
    }

    /// Copy whose domain encoder has its adapters folded into the base weights.
    pub fn merged(&self) -> Result<Self> {
        let mut out = self.clone();
        out.domain = self.domain.merge_adapter()?;
        out.config.adapter = None;
        Ok(out)
    }

    /// Visits every parameter with its group.
    pub fn visit_groups<'a>(&'a self, f: &mut dyn FnMut(Group, &'a Param)) {
        self.vision.visit(&mut |p| f(Group::VisionEncoder, p));
        self.language.visit(&mut |p| f(Group::LanguageEncoder, p));
        self.domain.visit_base(&mut |p| f(Group::DomainEncoder, p));
        if let Some(a) = self.domain.adapters() {
            a.visit(&mut |p| f(Group::DomainAdapters, p));
        }
        self.head.visit(&mut |p| f(Group::ScoreHead, p));
        self.prefix.visit(&mut |p| f(Group::PrefixProjection, p));
        self.decoder.visit(&mut |p| f(Group::CaptionDecoder, p));
    }

    pub fn visit_groups_mut(&mut self, f: &mut dyn FnMut(Group, &mut Param)) {
        self.vision.visit_mut(&mut |p| f(Group::VisionEncoder, p));
        self.language.visit_mut(&mut |p| f(Group::LanguageEncoder, p));
        self.domain.visit_base_mut(&mut |p| f(Group::DomainEncoder, p));
        if let Some(a) = self.domain.adapters_mut() {
            a.visit_mut(&mut |p| f(Group::DomainAdapters, p));
        }
        self.head.visit_mut(&mut |p| f(Group::ScoreHead, p));
        self.prefix.visit_mut(&mut |p| f(Group::PrefixProjection, p));
        self.decoder.visit_mut(&mut |p| f(Group::CaptionDecoder, p));
    }

    pub fn tokenize(&self, description: &str) -> Result<Vec<u32>> {
        self.vocabulary.tokenize(description, self.config.max_tokens())
    }

    /// `f^d_j` for a stack of patchified views `(n, Np, pd)`; `(n, od)`.
    pub fn domain_features(&self, patches: &Tensor) -> Result<Tensor> {
        Ok(self.domain.forward_patches(patches)?.0)
    }

    /// All loss terms for a batch of references. Every candidate object is
    /// encoded once by the domain encoder, however often it appears.
    pub fn batch_losses(
        &self,
        cache: &FeatureCache,
        refs: &[&ReferenceRecord],
        settings: &LossSettings,
    ) -> Result<BatchLosses> {
        settings.mask.validate()?;
        if refs.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let toggles = self.toggles();
        let mut objects: Vec<&str> = Vec::new();
        let mut slot: BTreeMap<&str, u32> = BTreeMap::new();
        let mut pair_obj = Vec::with_capacity(2 * refs.len());
        let mut pair_ref = Vec::with_capacity(2 * refs.len());
        let mut labels = Vec::with_capacity(2 * refs.len());
        let mut target_obj = Vec::with_capacity(refs.len());
        for (i, r) in refs.iter().enumerate() {
            for (id, label) in [(r.target.as_str(), 1.0), (r.distractor(), 0.0)] {
                let s = *slot.entry(id).or_insert_with(|| {
                    objects.push(id);
                    (objects.len() - 1) as u32
                });
                pair_obj.push(s);
                pair_ref.push(i as u32);
                labels.push(label);
                if label == 1.0 {
                    target_obj.push(s);
                }
            }
        }
        let dev = Device::Cpu;
        let od = self.config.output_dim();
        let j = cache.views_per_object();
        let vision = cache.vision_stack(&objects)?;
        let domain = if toggles.domain {
            let n = objects.len();
            self.domain_features(&cache.patch_stack(&objects)?)?
                .reshape((n, j, od))?
        } else {
            vision.zeros_like()?
        };
        let language = cache.language_stack(refs)?;

        let pair_obj = Tensor::new(pair_obj.as_slice(), &dev)?;
        let pair_ref = Tensor::new(pair_ref.as_slice(), &dev)?;
        let fused = fuse(
            &language.index_select(&pair_ref, 0)?,
            &vision.index_select(&pair_obj, 0)?,
            &domain.index_select(&pair_obj, 0)?,
            toggles,
        )?;
        let labels = Tensor::new(labels.as_slice(), &dev)?.to_dtype(self.dtype())?;
        let lgr = lgr_loss_logits(&self.head.logits(&fused)?, &labels)?;

        let needs_object = settings.mask.vlc || settings.mask.vgc;
        let f_o = if needs_object {
            let t = Tensor::new(target_obj.as_slice(), &dev)?;
            let (v, d) = (vision.index_select(&t, 0)?, domain.index_select(&t, 0)?);
            Some(match (toggles.vision, toggles.domain) {
                (true, true) => object_feature_tensor(&v, &d)?,
                (true, false) => crate::head::aggregate_tensor(&v)?,
                _ => crate::head::aggregate_tensor(&d)?,
            })
        } else {
            None
        };
        let vlc = match &f_o {
            Some(f_o) if settings.mask.vlc && refs.len() >= 2 => {
                Some(vlc_loss(&language, f_o, settings.vlc_mode, settings.vlc_temperature)?)
            }
            _ => None,
        };
        let vgc = match &f_o {
            Some(f_o) if settings.mask.vgc => {
                let captions = refs
                    .iter()
                    .map(|r| cache.tokens(&r.reference_id).map(<[u32]>::to_vec))
                    .collect::<Result<Vec<_>>>()?;
                Some(vgc_loss(&self.decoder, &self.prefix, f_o, &captions)?)
            }
            _ => None,
        };
        let mut total = lgr.clone();
        for t in [&vlc, &vgc].into_iter().flatten() {
            total = (total + t)?;
        }
        Ok(BatchLosses { lgr, vlc, vgc, total })
    }

    /// Scores of `[candidates[0], candidates[1]]` for every reference.
    /// No gradients are tracked.
    pub fn score_references(&self, cache: &FeatureCache, refs: &[&ReferenceRecord]) -> Result<Vec<[f64; 2]>> {
        let mut ids: Vec<&str> = refs
            .iter()
            .flat_map(|r| r.candidates.iter().map(String::as_str))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let slot: BTreeMap<&str, u32> = ids.iter().enumerate().map(|(i, id)| (*id, i as u32)).collect();
        let od = self.config.output_dim();
        let j = cache.views_per_object();
        let vision = cache.vision_stack(&ids)?;
        let domain = if self.toggles().domain {
            let mut parts = Vec::new();
            for chunk in ids.chunks(32) {
                let f = self.domain_features(&cache.patch_stack(chunk)?)?.detach();
                parts.push(f.reshape((chunk.len(), j, od))?);
            }
            Tensor::cat(&parts, 0)?
        } else {
            vision.zeros_like()?
        };
        let dev = Device::Cpu;
        let mut out = Vec::with_capacity(refs.len());
        for chunk in refs.chunks(128) {
            let language = cache.language_stack(chunk)?;
            let mut objs = Vec::with_capacity(2 * chunk.len());
            let mut rows = Vec::with_capacity(2 * chunk.len());
            for (i, r) in chunk.iter().enumerate() {
                for c in &r.candidates {
                    objs.push(slot[c.as_str()]);
                    rows.push(i as u32);
                }
            }
            let objs = Tensor::new(objs.as_slice(), &dev)?;
            let rows = Tensor::new(rows.as_slice(), &dev)?;
            let fused = fuse(
                &language.index_select(&rows, 0)?,
                &vision.index_select(&objs, 0)?,
                &domain.index_select(&objs, 0)?,
                self.toggles(),
            )?;
            let scores = self
                .head
                .scores(&fused)?
                .detach()
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?;
            out.extend(scores.chunks(2).map(|s| [s[0], s[1]]));
        }
        Ok(out)
    }

    /// Greedy caption for an object from its `f^o`.
    pub fn caption(&self, cache: &FeatureCache, object_id: &str) -> Result<String> {
        let od = self.config.output_dim();
        let j = cache.views_per_object();
        let v = cache.vision_stack(&[object_id])?;
        let d = self
            .domain_features(&cache.patch_stack(&[object_id])?)?
            .reshape((1, j, od))?;
        let f_o = object_feature_tensor(&v, &d)?;
        let prefix = self.prefix.forward(&f_o)?.squeeze(0)?;
        let ids = self.decoder.greedy(&prefix, self.config.max_tokens())?;
        Ok(self.vocabulary.decode(&ids))
    }
}

impl Parameters for GroundingModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.visit_groups(&mut |_, p| f(p));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.visit_groups_mut(&mut |_, p| f(p));
    }
}

/// Frozen-branch features and patch tensors, computed once per dataset.
///
/// Vision and language encoders never change during training, so their
/// outputs are cached per object and per reference.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    views: Vec<usize>,
    object_slot: BTreeMap<String, usize>,
    patches: Vec<Tensor>,
    vision: Vec<Tensor>,
    reference_slot: BTreeMap<String, usize>,
    language: Vec<Tensor>,
    tokens: Vec<Vec<u32>>,
}

impl FeatureCache {
    pub fn build(model: &GroundingModel, dataset: &GroundingDataset, mode: ViewMode) -> Result<Self> {
        let views = mode.select(dataset.view_count())?;
        let mut object_slot = BTreeMap::new();
        let mut patches = Vec::new();
        let mut vision = Vec::new();
        for (i, id) in dataset.object_ids().enumerate() {
            let all = dataset
                .views(id)
                .ok_or_else(|| Error::Argument(format!("object `{id}` has no views")))?;
            let chosen: Vec<_> = views.iter().map(|&j| &all[j]).collect();
            let p = model.vision.patchify(&chosen)?;
            vision.push(model.vision.forward_patches(&p)?.0.detach());
            patches.push(p);
            object_slot.insert(id.to_owned(), i);
        }
        let mut reference_slot = BTreeMap::new();
        let mut tokens = Vec::new();
        for (i, r) in dataset.references().iter().enumerate() {
            tokens.push(model.tokenize(&r.description)?);
            reference_slot.insert(r.reference_id.clone(), i);
        }
        let mut language = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(64) {
            let f = model.language.encode(chunk)?.detach();
            for k in 0..chunk.len() {
                language.push(f.get(k)?);
            }
        }
        Ok(Self {
            views,
            object_slot,
            patches,
            vision,
            reference_slot,
            language,
            tokens,
        })
    }

    pub fn views_per_object(&self) -> usize {
        self.views.len()
    }

    pub fn view_indices(&self) -> &[usize] {
        &self.views
    }

    fn object(&self, id: &str) -> Result<usize> {
        self.object_slot
            .get(id)
            .copied()
            .ok_or_else(|| Error::Argument(format!("unknown object `{id}`")))
    }

    fn reference(&self, id: &str) -> Result<usize> {
        self.reference_slot
            .get(id)
            .copied()
            .ok_or_else(|| Error::Argument(format!("unknown reference `{id}`")))
    }

    /// `(n·J, Np, pd)` patches for the given objects.
    pub fn patch_stack(&self, ids: &[&str]) -> Result<Tensor> {
        let parts = ids
            .iter()
            .map(|id| Ok(self.patches[self.object(id)?].clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// `(n, J, od)` frozen vision features.
    pub fn vision_stack(&self, ids: &[&str]) -> Result<Tensor> {
        let parts = ids
            .iter()
            .map(|id| Ok(self.vision[self.object(id)?].clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&parts, 0)?)
    }

    /// `(B, od)` frozen language features.
    pub fn language_stack(&self, refs: &[&ReferenceRecord]) -> Result<Tensor> {
        let parts = refs
            .iter()
            .map(|r| Ok(self.language[self.reference(&r.reference_id)?].clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&parts, 0)?)
    }

    pub fn tokens(&self, reference_id: &str) -> Result<&[u32]> {
        Ok(&self.tokens[self.reference(reference_id)?])
    }
}
