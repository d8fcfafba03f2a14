//! Grounding, contrastive, and caption losses and their sum.

mod caption;

pub use caption::{vgc_loss, CaptionDecoder, DecoderConfig, PrefixProjection};

use std::fmt;
use std::str::FromStr;

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::aggregate_tensor;
use crate::nn::{cosine, log_softmax, softplus};

/// Cosine similarity of two non-zero vectors.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("similarity of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Binary cross-entropy of one score against a 0/1 label.
pub fn lgr_loss(score: f64, label: f64) -> f64 {
    -(label * score.ln() + (1.0 - label) * (1.0 - score).ln())
}

/// Mean binary cross-entropy over scored pairs, computed from pre-sigmoid
/// logits as `softplus(z) − y·z` so saturated scores stay finite.
pub fn lgr_loss_logits(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if logits.dims() != labels.dims() {
        return Err(Error::Shape(format!(
            "logits {:?} vs labels {:?}",
            logits.dims(),
            labels.dims()
        )));
    }
    Ok((softplus(logits)? - logits.mul(labels)?)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlcMode {
    /// Raw cosines in the ratio, no exponent.
    Literal,
    #[default]
    Infonce,
}

impl FromStr for VlcMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "infonce" => Ok(Self::Infonce),
            other => Err(Error::Config(format!(
                "vlc_mode must be `literal` or `infonce`, got `{other}`"
            ))),
        }
    }
}

/// One contrastive direction for a single positive: the negative log of
/// the positive's share among itself and the negatives.
pub fn contrastive_direction(s_pos: f64, s_neg: &[f64], mode: VlcMode, temperature: f64) -> Result<f64> {
    if s_neg.is_empty() {
        return Err(Error::Argument("contrastive loss needs at least one negative".into()));
    }
    match mode {
        VlcMode::Infonce => {
            if temperature <= 0.0 {
                return Err(Error::Config(format!(
                    "temperature must be positive, got {temperature}"
                )));
            }
            let logits: Vec<f64> = std::iter::once(s_pos)
                .chain(s_neg.iter().copied())
                .map(|s| s / temperature)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            Ok(lse - logits[0])
        }
        VlcMode::Literal => {
            if let Some(bad) = std::iter::once(&s_pos).chain(s_neg).find(|&&s| s <= 0.0) {
                return Err(Error::NumericDomain(format!(
                    "literal contrastive ratio needs positive similarities, got {bad}"
                )));
            }
            Ok(-(s_pos / (s_pos + s_neg.iter().sum::<f64>())).ln())
        }
    }
}

/// In-batch bidirectional contrastive loss. Row `i` of `language` and row
/// `i` of `objects` form the positive pair; every other row is a negative.
/// Each direction is averaged over the batch and the two are summed.
pub fn vlc_loss(language: &Tensor, objects: &Tensor, mode: VlcMode, temperature: f64) -> Result<Tensor> {
    let (b, d) = language.dims2()?;
    if objects.dims2()? != (b, d) {
        return Err(Error::Shape(format!(
            "language {:?} vs objects {:?}",
            language.dims(),
            objects.dims()
        )));
    }
    if b < 2 {
        return Err(Error::Argument("contrastive loss needs a batch of at least 2".into()));
    }
    // sims[i][k] = s(f^l_i, f^o_k)
    let sims = cosine(&language.unsqueeze(1)?, &objects.unsqueeze(0)?)?;
    let eye = Tensor::eye(b, sims.dtype(), &Device::Cpu)?;
    match mode {
        VlcMode::Infonce => {
            if temperature <= 0.0 {
                return Err(Error::Config(format!(
                    "temperature must be positive, got {temperature}"
                )));
            }
            let z = (sims / temperature)?;
            // o→l holds f^l fixed and ranks objects; l→o holds f^o fixed and ranks descriptions
            let o_to_l = log_softmax(&z)?.mul(&eye)?.sum_all()?;
            let l_to_o = log_softmax(&z.t()?)?.mul(&eye)?.sum_all()?;
            Ok(((o_to_l + l_to_o)? / -(b as f64))?)
        }
        VlcMode::Literal => {
            let flat = sims
                .flatten_all()?
                .to_dtype(candle_core::DType::F64)?
                .to_vec1::<f64>()?;
            if let Some(bad) = flat.iter().find(|&&s| s <= 0.0 || !s.is_finite()) {
                return Err(Error::NumericDomain(format!(
                    "literal contrastive ratio needs positive similarities, got {bad}"
                )));
            }
            let pos = sims.mul(&eye)?.sum(D::Minus1)?.log()?;
            let o_to_l = (pos.clone() - sims.sum(1)?.log()?)?.sum_all()?;
            let l_to_o = (pos - sims.sum(0)?.log()?)?.sum_all()?;
            Ok(((o_to_l + l_to_o)? / -(b as f64))?)
        }
    }
}

/// `f^o`: elementwise max over all vision and domain view vectors.
pub fn build_object_feature(vision_views: &[Vec<f64>], domain_views: &[Vec<f64>]) -> Result<Vec<f64>> {
    if vision_views.is_empty() || domain_views.is_empty() {
        return Err(Error::Argument(
            "object feature needs at least one view of each kind".into(),
        ));
    }
    let all: Vec<Vec<f64>> = vision_views.iter().chain(domain_views).cloned().collect();
    crate::head::aggregate(&all)
}

/// Batched `f^o` from `(P, J, d)` stacks.
pub fn object_feature_tensor(vision_views: &Tensor, domain_views: &Tensor) -> Result<Tensor> {
    aggregate_tensor(&Tensor::cat(&[vision_views, domain_views], D::Minus2)?)
}

/// Which losses enter the total. The grounding loss is mandatory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TaskMask {
    pub lgr: bool,
    pub vlc: bool,
    pub vgc: bool,
}

impl TaskMask {
    pub const ALL: Self = Self {
        lgr: true,
        vlc: true,
        vgc: true,
    };
    pub const LGR: Self = Self {
        lgr: true,
        vlc: false,
        vgc: false,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.lgr {
            return Err(Error::Config("task_mask must include LGR".into()));
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        [("LGR", self.lgr), ("VLC", self.vlc), ("VGC", self.vgc)]
            .into_iter()
            .filter(|(_, on)| *on)
            .map(|(n, _)| n.to_owned())
            .collect()
    }
}

impl Default for TaskMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl TryFrom<Vec<String>> for TaskMask {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        let mut m = Self {
            lgr: false,
            vlc: false,
            vgc: false,
        };
        for n in names {
            match n.to_ascii_lowercase().as_str() {
                "lgr" => m.lgr = true,
                "vlc" => m.vlc = true,
                "vgc" => m.vgc = true,
                other => return Err(Error::Config(format!("unknown task `{other}` in task_mask"))),
            }
        }
        Ok(m)
    }
}

impl From<TaskMask> for Vec<String> {
    fn from(m: TaskMask) -> Self {
        m.names()
    }
}

impl FromStr for TaskMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(|c: char| c == ',' || c == '+')
            .map(|t| t.trim().to_owned())
            .filter(|t| !t.is_empty())
            .collect::<Vec<_>>()
            .try_into()
    }
}

impl fmt::Display for TaskMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join("+"))
    }
}

/// Unweighted sum of the enabled losses.
pub fn total_loss(l_lgr: f64, l_vlc: f64, l_vgc: f64, mask: TaskMask) -> Result<f64> {
    mask.validate()?;
    let mut total = l_lgr;
    if mask.vlc {
        total += l_vlc;
    }
    if mask.vgc {
        total += l_vgc;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use proptest::prelude::*;

    fn mat(rows: &[[f64; 2]]) -> Tensor {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (rows.len(), 2), &Device::Cpu).unwrap()
    }

    #[test]
    fn similarity_basics() {
        assert!((similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((similarity(&[3.0, 4.0], &[-3.0, -4.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn lgr_closed_forms() {
        assert!((lgr_loss(0.5, 1.0) - 0.693147).abs() < 1e-6);
        assert!((lgr_loss(0.9, 1.0) - 0.105361).abs() < 1e-6);
        assert!(lgr_loss(1.0 - 1e-12, 1.0) < 1e-11);
        let z = Tensor::new(&[0.0f64, 2.0, -3.0], &Device::Cpu).unwrap();
        let y = Tensor::new(&[1.0f64, 0.0, 1.0], &Device::Cpu).unwrap();
        let got = lgr_loss_logits(&z, &y).unwrap().to_scalar::<f64>().unwrap();
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let want = (lgr_loss(s(0.0), 1.0) + lgr_loss(s(2.0), 0.0) + lgr_loss(s(-3.0), 1.0)) / 3.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn contrastive_closed_forms() {
        let e = std::f64::consts::E;
        let l = contrastive_direction(1.0, &[-1.0], VlcMode::Infonce, 1.0).unwrap();
        assert!((l - -(e / (e + 1.0 / e)).ln()).abs() < 1e-12);
        assert!((l - 0.126928).abs() < 1e-6);
        let tie = contrastive_direction(0.3, &[0.3], VlcMode::Infonce, 0.07).unwrap();
        assert!((tie - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(
            contrastive_direction(0.5, &[-0.1], VlcMode::Literal, 1.0),
            Err(Error::NumericDomain(_))
        ));
        let lit = contrastive_direction(0.6, &[0.2], VlcMode::Literal, 1.0).unwrap();
        assert!((lit + (0.75f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn batched_vlc_matches_per_direction_sum() {
        // l0 ‖ o0, l1 ‖ o1, and the off-diagonal cosines are −1
        let l = mat(&[[1.0, 0.0], [-1.0, 0.0]]);
        let o = mat(&[[2.0, 0.0], [-3.0, 0.0]]);
        let got = vlc_loss(&l, &o, VlcMode::Infonce, 1.0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let dir = contrastive_direction(1.0, &[-1.0], VlcMode::Infonce, 1.0).unwrap();
        assert!((got - 2.0 * dir).abs() < 1e-12);
        assert!(matches!(
            vlc_loss(&l, &o, VlcMode::Literal, 1.0),
            Err(Error::NumericDomain(_))
        ));
    }

    #[test]
    fn batched_literal_matches_scalar() {
        let l = mat(&[[1.0, 0.2], [0.3, 1.0]]);
        let o = mat(&[[1.0, 0.1], [0.5, 1.0]]);
        let got = vlc_loss(&l, &o, VlcMode::Literal, 1.0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let lv = [[1.0, 0.2], [0.3, 1.0]];
        let ov = [[1.0, 0.1], [0.5, 1.0]];
        let s = |i: usize, k: usize| similarity(&lv[i], &ov[k]).unwrap();
        let mut want = 0.0;
        for i in 0..2 {
            let j = 1 - i;
            want += contrastive_direction(s(i, i), &[s(i, j)], VlcMode::Literal, 1.0).unwrap();
            want += contrastive_direction(s(i, i), &[s(j, i)], VlcMode::Literal, 1.0).unwrap();
        }
        assert!((got - want / 2.0).abs() < 1e-12);
    }

    #[test]
    fn vlc_rejects_singleton_batch() {
        let l = mat(&[[1.0, 0.0]]);
        assert!(matches!(
            vlc_loss(&l, &l, VlcMode::Infonce, 1.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn object_feature_examples() {
        assert_eq!(
            build_object_feature(&[vec![1.0, -3.0]], &[vec![-2.0, 4.0]]).unwrap(),
            vec![1.0, 4.0]
        );
        let v = vec![vec![1.0, 2.0], vec![-1.0, 5.0]];
        assert_eq!(build_object_feature(&v, &v).unwrap(), vec![1.0, 5.0]);
        assert!(matches!(build_object_feature(&[], &v), Err(Error::Argument(_))));
        let vt = Tensor::new(&[[[1.0f64, -3.0]]], &Device::Cpu).unwrap();
        let dt = Tensor::new(&[[[-2.0f64, 4.0]]], &Device::Cpu).unwrap();
        let ot = object_feature_tensor(&vt, &dt).unwrap().to_dtype(DType::F64).unwrap();
        assert_eq!(ot.to_vec2::<f64>().unwrap(), vec![vec![1.0, 4.0]]);
    }

    #[test]
    fn total_loss_rules() {
        assert_eq!(total_loss(0.7, 0.3, 2.0, TaskMask::LGR).unwrap(), 0.7);
        assert!((total_loss(0.7, 0.3, 2.0, TaskMask::ALL).unwrap() - 3.0).abs() < 1e-15);
        let no_lgr = TaskMask {
            lgr: false,
            vlc: true,
            vgc: true,
        };
        assert!(matches!(total_loss(0.7, 0.3, 2.0, no_lgr), Err(Error::Config(_))));
    }

    #[test]
    fn task_mask_parsing() {
        assert_eq!("LGR,VLC,VGC".parse::<TaskMask>().unwrap(), TaskMask::ALL);
        assert_eq!("lgr".parse::<TaskMask>().unwrap(), TaskMask::LGR);
        assert!("lgr,foo".parse::<TaskMask>().is_err());
        let json = serde_json::to_string(&TaskMask::ALL).unwrap();
        assert_eq!(json, r#"["LGR","VLC","VGC"]"#);
        assert_eq!(serde_json::from_str::<TaskMask>(&json).unwrap(), TaskMask::ALL);
        assert_eq!(TaskMask::ALL.to_string(), "LGR+VLC+VGC");
    }

    proptest! {
        #[test]
        fn lgr_monotone_and_symmetric(a in 0.001f64..0.999, b in 0.001f64..0.999) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(lgr_loss(lo, 1.0) > lgr_loss(hi, 1.0));
            prop_assert!(lgr_loss(lo, 0.0) < lgr_loss(hi, 0.0));
            prop_assert!((lgr_loss(a, 1.0) - lgr_loss(1.0 - a, 0.0)).abs() < 1e-12);
        }

        #[test]
        fn infonce_bounds_and_monotonicity(
            pos in -1.0f64..1.0,
            negs in prop::collection::vec(-1.0f64..1.0, 1..6),
            d in 0.01f64..0.5,
            tau in 0.05f64..2.0,
        ) {
            let base = contrastive_direction(pos, &negs, VlcMode::Infonce, tau).unwrap();
            prop_assert!(base >= 0.0);
            let up = contrastive_direction(pos + d, &negs, VlcMode::Infonce, tau).unwrap();
            prop_assert!(up < base);
            let mut worse = negs.clone();
            worse[0] += d;
            prop_assert!(contrastive_direction(pos, &worse, VlcMode::Infonce, tau).unwrap() > base);
        }

        #[test]
        fn total_is_order_free(a in 0.0f64..5.0, b in 0.0f64..5.0, c in 0.0f64..5.0) {
            let t = total_loss(a, b, c, TaskMask::ALL).unwrap();
            prop_assert!((t - (c + a + b)).abs() < 1e-12);
        }
    }
}
