//! View reweighting, max-pool fusion, the scoring MLP, and the argmax
//! prediction rule.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};

use crate::dataset::ReferenceRecord;
use crate::error::{Error, Result};
use crate::nn::{cosine, scalar, sigmoid, softmax, Init, Linear, Param, Parameters};

fn to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let width = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Shape("view vectors have unequal lengths".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), width), &Device::Cpu)?)
}

fn check_nonzero(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::Degenerate(format!("{what} has zero norm")));
    }
    Ok(())
}

/// Softmax over views of `cos(f^d_j, f^l)`, batched.
///
/// `views: (..., J, d)`, `language: (..., d)`; returns `(..., J)`.
pub fn view_weights(views: &Tensor, language: &Tensor) -> Result<Tensor> {
    let sims = cosine(views, &language.unsqueeze(D::Minus2)?)?;
    softmax(&sims)
}

/// Scales every view by its weight; `(..., J, d)` in and out.
pub fn reweight_tensor(views: &Tensor, language: &Tensor) -> Result<Tensor> {
    let w = view_weights(views, language)?;
    Ok(views.broadcast_mul(&w.unsqueeze(D::Minus1)?)?)
}

/// Elementwise max across the view axis: `(..., J, d) -> (..., d)`.
pub fn aggregate_tensor(views: &Tensor) -> Result<Tensor> {
    Ok(views.max(D::Minus2)?)
}

/// Reweighting weights `w_j` for a single description.
pub fn reweight_weights(domain_views: &[Vec<f64>], language: &[f64]) -> Result<Vec<f64>> {
    if domain_views.is_empty() {
        return Err(Error::Argument("reweighting needs at least one view".into()));
    }
    check_nonzero(language, "language embedding")?;
    for (j, v) in domain_views.iter().enumerate() {
        check_nonzero(v, &format!("domain view {j}"))?;
        if v.len() != language.len() {
            return Err(Error::Shape(format!(
                "view {j} has width {}, language embedding {}",
                v.len(),
                language.len()
            )));
        }
    }
    let views = to_tensor(domain_views)?;
    let lang = Tensor::from_vec(language.to_vec(), language.len(), &Device::Cpu)?;
    Ok(view_weights(&views, &lang)?.to_vec1::<f64>()?)
}

/// `f̃^d_j = w_j · f^d_j`.
pub fn reweight(domain_views: &[Vec<f64>], language: &[f64]) -> Result<Vec<Vec<f64>>> {
    let w = reweight_weights(domain_views, language)?;
    Ok(domain_views
        .iter()
        .zip(w)
        .map(|(v, w)| v.iter().map(|x| x * w).collect())
        .collect())
}

/// Elementwise maximum over views.
pub fn aggregate(views: &[Vec<f64>]) -> Result<Vec<f64>> {
    if views.is_empty() {
        return Err(Error::Argument("cannot aggregate an empty view list".into()));
    }
    Ok(aggregate_tensor(&to_tensor(views)?)?.to_vec1::<f64>()?)
}

/// Which segments of the fused feature carry signal. A disabled encoder
/// contributes zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderToggles {
    pub vision: bool,
    pub domain: bool,
}

impl Default for EncoderToggles {
    fn default() -> Self {
        Self {
            vision: true,
            domain: true,
        }
    }
}

impl EncoderToggles {
    pub fn validate(&self) -> Result<()> {
        if !self.vision && !self.domain {
            return Err(Error::Config(
                "at least one of the vision and domain encoders must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Fused feature `f = [f^l, f^v, f^d]` for a batch of (description, object) pairs.
///
/// `language: (P, d)`, `vision_views`/`domain_views: (P, J, d)`; returns `(P, 3d)`.
pub fn fuse(
    language: &Tensor,
    vision_views: &Tensor,
    domain_views: &Tensor,
    toggles: EncoderToggles,
) -> Result<Tensor> {
    let f_v = if toggles.vision {
        aggregate_tensor(vision_views)?
    } else {
        language.zeros_like()?
    };
    let f_d = if toggles.domain {
        aggregate_tensor(&reweight_tensor(domain_views, language)?)?
    } else {
        language.zeros_like()?
    };
    Ok(Tensor::cat(&[language, &f_v, &f_d], D::Minus1)?)
}

/// Every intermediate feature for one (description, object) pair.
#[derive(Debug, Clone)]
pub struct EmbeddingBundle {
    pub language: Tensor,
    pub vision_views: Tensor,
    pub domain_views: Tensor,
    pub reweighted: Tensor,
    pub vision: Tensor,
    pub domain: Tensor,
    /// Max over all `2J` vision and domain view vectors.
    pub object: Tensor,
    pub fused: Tensor,
}

impl EmbeddingBundle {
    /// `language: (d)`, view stacks `(J, d)`.
    pub fn new(language: &Tensor, vision_views: &Tensor, domain_views: &Tensor) -> Result<Self> {
        let (j, d) = vision_views.dims2()?;
        if domain_views.dims2()? != (j, d) || language.dims1()? != d || j == 0 {
            return Err(Error::Shape(format!(
                "bundle mismatch: language {:?}, vision {:?}, domain {:?}",
                language.dims(),
                vision_views.dims(),
                domain_views.dims()
            )));
        }
        let reweighted = reweight_tensor(domain_views, language)?;
        let vision = aggregate_tensor(vision_views)?;
        let domain = aggregate_tensor(&reweighted)?;
        let object = aggregate_tensor(&Tensor::cat(&[vision_views, domain_views], 0)?)?;
        let fused = Tensor::cat(&[language, &vision, &domain], 0)?;
        Ok(Self {
            language: language.clone(),
            vision_views: vision_views.clone(),
            domain_views: domain_views.clone(),
            reweighted,
            vision,
            domain,
            object,
            fused,
        })
    }
}

/// MLP from the fused feature to a scalar, followed by a sigmoid.
#[derive(Debug, Clone)]
pub struct ScoreHead {
    layers: Vec<Linear>,
}

impl ScoreHead {
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64, dtype: DType) -> Result<Self> {
        let mut init = Init::new(seed, dtype);
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        if widths.contains(&0) {
            return Err(Error::Config("score head widths must be positive".into()));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Linear::new(
                    &mut init,
                    &format!("head.layers.{i}"),
                    w[0],
                    w[1],
                    (w[0] as f64).powf(-0.5),
                    true,
                )
            })
            .collect::<Result<_>>()?;
        let mut head = Self { layers };
        head.set_trainable(true);
        Ok(head)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Pre-sigmoid score for `fused: (P, 3d)`; returns `(P)`.
    pub fn logits(&self, fused: &Tensor) -> Result<Tensor> {
        if fused.dim(D::Minus1)? != self.input_dim() {
            return Err(Error::Shape(format!(
                "score head expects width {}, got {}",
                self.input_dim(),
                fused.dim(D::Minus1)?
            )));
        }
        let mut x = fused.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i < last {
                x = x.gelu()?;
            }
        }
        Ok(x.squeeze(D::Minus1)?)
    }

    pub fn scores(&self, fused: &Tensor) -> Result<Tensor> {
        sigmoid(&self.logits(fused)?)
    }
}

impl Parameters for ScoreHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// `Score = sigmoid(MLP([f^l, f^v, f^d]))`.
pub fn fuse_and_score(bundle: &EmbeddingBundle, head: &ScoreHead) -> Result<f64> {
    scalar(&head.scores(&bundle.fused.unsqueeze(0)?)?)
}

/// The higher-scoring candidate; exact ties go to the lexicographically
/// smaller object id.
pub fn predict<'a>(reference: &'a ReferenceRecord, scores: &BTreeMap<String, f64>) -> Result<&'a str> {
    let [a, b] = &reference.candidates;
    let score = |id: &str| {
        scores.get(id).copied().ok_or_else(|| {
            Error::Argument(format!(
                "no score for candidate `{id}` of reference `{}`",
                reference.reference_id
            ))
        })
    };
    let (sa, sb) = (score(a)?, score(b)?);
    Ok(pick(a, sa, b, sb))
}

pub(crate) fn pick<'a>(a: &'a str, sa: f64, b: &'a str, sb: f64) -> &'a str {
    if sa > sb || (sa == sb && a < b) {
        a
    } else {
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Annotation, Split};
    use proptest::prelude::*;

    fn reference(a: &str, b: &str) -> ReferenceRecord {
        ReferenceRecord {
            reference_id: "r".into(),
            description: "x".into(),
            candidates: [a.into(), b.into()],
            target: a.into(),
            annotation: Annotation::Visual,
            split: Split::Train,
        }
    }

    #[test]
    fn single_view_reweight_is_identity() {
        let v = vec![vec![0.3, -2.0, 1.0]];
        assert_eq!(reweight_weights(&v, &[1.0, 1.0, 0.0]).unwrap(), vec![1.0]);
        assert_eq!(reweight(&v, &[1.0, 1.0, 0.0]).unwrap(), v);
    }

    #[test]
    fn equal_similarity_gives_uniform_weights() {
        let v = vec![vec![1.0, 1.0], vec![1.0, -1.0]];
        let w = reweight_weights(&v, &[1.0, 0.0]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cosines_one_and_zero() {
        let v = vec![vec![2.0, 0.0], vec![0.0, 3.0]];
        let w = reweight_weights(&v, &[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((w[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn zero_vectors_are_degenerate() {
        assert!(matches!(
            reweight_weights(&[vec![0.0, 0.0]], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            reweight_weights(&[vec![1.0, 0.0]], &[0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn aggregate_is_elementwise_max() {
        assert_eq!(aggregate(&[vec![1.0, -2.0], vec![0.0, 5.0]]).unwrap(), vec![1.0, 5.0]);
        assert_eq!(aggregate(&[vec![4.0, 2.0]]).unwrap(), vec![4.0, 2.0]);
        assert!(matches!(aggregate(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_head_scores_one_half() {
        let head = ScoreHead::new(6, &[4, 4], 1, DType::F64).unwrap();
        for p in head.params() {
            p.set(&p.value().zeros_like().unwrap()).unwrap();
        }
        let f = Tensor::new(&[[1.0f64, 2.0, 3.0, -4.0, 5.0, 6.0]], &Device::Cpu).unwrap();
        assert_eq!(scalar(&head.scores(&f).unwrap()).unwrap(), 0.5);
    }

    #[test]
    fn bundle_scores_are_in_open_interval_and_deterministic() {
        let head = ScoreHead::new(6, &[4, 4], 1, DType::F64).unwrap();
        let l = Tensor::new(&[1.0f64, -1.0], &Device::Cpu).unwrap();
        let v = Tensor::new(&[[1.0f64, 2.0], [3.0, -1.0]], &Device::Cpu).unwrap();
        let d = Tensor::new(&[[0.5f64, 0.5], [-2.0, 1.0]], &Device::Cpu).unwrap();
        let b = EmbeddingBundle::new(&l, &v, &d).unwrap();
        let s1 = fuse_and_score(&b, &head).unwrap();
        let s2 = fuse_and_score(&b, &head).unwrap();
        assert!(s1 > 0.0 && s1 < 1.0);
        assert_eq!(s1, s2);
        assert_eq!(b.fused.dims1().unwrap(), 6);
        assert_eq!(b.object.to_vec1::<f64>().unwrap(), vec![3.0, 2.0]);
    }

    #[test]
    fn bundle_rejects_mismatched_widths() {
        let l = Tensor::new(&[1.0f64, -1.0, 0.0], &Device::Cpu).unwrap();
        let v = Tensor::new(&[[1.0f64, 2.0]], &Device::Cpu).unwrap();
        assert!(matches!(EmbeddingBundle::new(&l, &v, &v), Err(Error::Shape(_))));
    }

    #[test]
    fn prediction_rule() {
        let r = reference("o1", "o2");
        let scores = BTreeMap::from([("o1".to_owned(), 0.8), ("o2".to_owned(), 0.3)]);
        assert_eq!(predict(&r, &scores).unwrap(), "o1");
        assert_eq!(predict(&reference("o2", "o1"), &scores).unwrap(), "o1");
        let tie = BTreeMap::from([("a".to_owned(), 0.5), ("b".to_owned(), 0.5)]);
        assert_eq!(predict(&reference("b", "a"), &tie).unwrap(), "a");
        assert!(matches!(predict(&reference("a", "zzz"), &tie), Err(Error::Argument(_))));
    }

    fn vecs(j: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), j)
    }

    proptest! {
        #[test]
        fn weights_form_a_probability_vector(
            views in (1usize..9).prop_flat_map(|j| vecs(j, 6)),
            lang in prop::collection::vec(-5.0f64..5.0, 6),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(views.iter().all(|v| v.iter().any(|&x| x != 0.0)));
            prop_assume!(lang.iter().any(|&x| x != 0.0));
            let w = reweight_weights(&views, &lang).unwrap();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let scaled: Vec<f64> = lang.iter().map(|x| x * c).collect();
            let w2 = reweight_weights(&views, &scaled).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn aggregate_permutation_and_duplication(views in (1usize..6).prop_flat_map(|j| vecs(j, 4)), rot in 0usize..6) {
            let base = aggregate(&views).unwrap();
            let mut rotated = views.clone();
            let n = rotated.len();
            rotated.rotate_left(rot % n);
            prop_assert_eq!(aggregate(&rotated).unwrap(), base.clone());
            let mut doubled = views.clone();
            doubled.extend(views.iter().cloned());
            prop_assert_eq!(aggregate(&doubled).unwrap(), base);
        }

        #[test]
        fn prediction_is_order_free_and_monotone(sa in 0.0f64..1.0, sb in 0.0f64..1.0, bump in 0.0f64..1.0) {
            let scores = BTreeMap::from([("a".to_owned(), sa), ("b".to_owned(), sb)]);
            let p1 = predict(&reference("a", "b"), &scores).unwrap().to_owned();
            let p2 = predict(&reference("b", "a"), &scores).unwrap().to_owned();
            prop_assert_eq!(&p1, &p2);
            let mut raised = scores.clone();
            *raised.get_mut(&p1).unwrap() += bump;
            let r = reference("a", "b");
            prop_assert_eq!(predict(&r, &raised).unwrap(), p1.as_str());
        }
    }
}
