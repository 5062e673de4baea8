//! Domain classification loss, per-scale Dice + cross-entropy segmentation
//! loss, and the deep-supervised total.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dac::DomainCode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Dice smoothing term.
    pub epsilon: f64,
    /// Weight per supervised scale, finest first.
    pub scale_weights: Vec<f64>,
    /// Lower bound applied to probabilities before taking logs.
    pub prob_clip: f64,
}

impl LossConfig {
    /// Default configuration for `n` supervised scales.
    pub fn for_scales(n: usize) -> Self {
        Self {
            epsilon: 1e-5,
            scale_weights: deep_supervision_weights(n),
            prob_clip: 1e-7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.scale_weights;
        if w.is_empty() {
            return Err(Error::config("no supervised scales"));
        }
        if w.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::config("scale weights must be nonnegative"));
        }
        if w.windows(2).any(|p| p[1] >= p[0]) {
            return Err(Error::config("scale weights must strictly decrease from finest to coarsest"));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("scale weights sum to {s}, expected 1")));
        }
        if !(self.epsilon > 0.0) || !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return Err(Error::config("epsilon must be positive and prob_clip in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Halve the weight per coarser scale and normalize to sum 1.
pub fn deep_supervision_weights(n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|i| 0.5f64.powi(i as i32)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / s).collect()
}

/// `-sum_k d_k log(max(p_k, clip))` for a one-hot `label`.
pub fn classification_loss(code: &DomainCode, label: &[f64], clip: f64) -> Result<f64> {
    let k = one_hot_index(label)?;
    if label.len() != code.len() {
        return Err(Error::shape(format!(
            "label over {} domains, code over {}",
            label.len(),
            code.len()
        )));
    }
    Ok(-code.probs()[k].clamp(clip, 1.0).ln())
}

fn one_hot_index(label: &[f64]) -> Result<usize> {
    let ones: Vec<usize> = label
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect();
    let zeros = label.iter().filter(|&&v| v == 0.0).count();
    match ones.as_slice() {
        [k] if zeros + 1 == label.len() => Ok(*k),
        _ => Err(Error::invalid(format!("domain label is not one-hot: {label:?}"))),
    }
}

/// Dice and cross-entropy parts of the segmentation loss for one channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegLossParts {
    pub dice: f64,
    pub ce: f64,
}

impl SegLossParts {
    pub fn total(&self) -> f64 {
        self.dice + self.ce
    }
}

fn check_seg_inputs(p: &[f64], y: &[f64]) -> Result<()> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::shape(format!(
            "prediction has {} voxels, target {}",
            p.len(),
            y.len()
        )));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("probabilities must lie in [0, 1]"));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("targets must be binary"));
    }
    Ok(())
}

/// `1 - 2 sum(p y) / (sum(p + y) + eps) - sum(y ln p + (1 - y) ln(1 - p))`
/// over all voxels of one binary channel; `p` is clipped to
/// `[clip, 1 - clip]` inside the logarithms.
pub fn segmentation_loss_at_scale(p: &[f64], y: &[f64], eps: f64, clip: f64) -> Result<SegLossParts> {
    check_seg_inputs(p, y)?;
    Ok(seg_parts(p, y, eps, clip))
}

fn seg_parts(p: &[f64], y: &[f64], eps: f64, clip: f64) -> SegLossParts {
    let mut inter = 0.0;
    let mut denom = eps;
    let mut ce = 0.0;
    for (&pv, &yv) in p.iter().zip(y) {
        inter += pv * yv;
        denom += pv + yv;
        let pc = pv.clamp(clip, 1.0 - clip);
        ce -= yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln();
    }
    SegLossParts {
        dice: 1.0 - 2.0 * inter / denom,
        ce,
    }
}

/// Analytic gradient of [`segmentation_loss_at_scale`] with respect to `p`.
pub fn segmentation_loss_grad(p: &[f64], y: &[f64], eps: f64, clip: f64) -> Result<Vec<f64>> {
    check_seg_inputs(p, y)?;
    Ok(seg_grad(p, y, eps, clip))
}

fn seg_grad(p: &[f64], y: &[f64], eps: f64, clip: f64) -> Vec<f64> {
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let denom: f64 = p.iter().sum::<f64>() + y.iter().sum::<f64>() + eps;
    p.iter()
        .zip(y)
        .map(|(&pv, &yv)| {
            let dice = -2.0 * yv / denom + 2.0 * inter / (denom * denom);
            let ce = if pv < clip || pv > 1.0 - clip {
                0.0
            } else {
                -yv / pv + (1.0 - yv) / (1.0 - pv)
            };
            dice + ce
        })
        .collect()
}

/// Multi-class lift: the binary loss applied to every foreground channel of
/// channel-major `probs [C, V]` against integer `labels [V]`, summed.
pub fn multiclass_segmentation_loss(
    probs: &[f64],
    labels: &[u8],
    classes: usize,
    eps: f64,
    clip: f64,
) -> Result<(f64, Vec<SegLossParts>)> {
    let v = labels.len();
    if probs.len() != classes * v {
        return Err(Error::shape(format!(
            "{} probabilities for {classes} classes over {v} voxels",
            probs.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
    }
    let mut parts = Vec::with_capacity(classes.saturating_sub(1));
    for c in 1..classes {
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(l as usize == c)).collect();
        parts.push(segmentation_loss_at_scale(&probs[c * v..(c + 1) * v], &y, eps, clip)?);
    }
    Ok((parts.iter().map(SegLossParts::total).sum(), parts))
}

/// Prediction and target at one supervised scale.
#[derive(Clone, Copy, Debug)]
pub struct ScaleTarget<'a> {
    /// Channel-major probabilities `[C, V]`.
    pub probs: &'a [f64],
    pub labels: &'a [u8],
    pub classes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls: Option<f64>,
    pub seg: Vec<f64>,
    pub total: f64,
}

/// `L = L_cls + sum_i w_i L_seg^i`; the classification term is absent for
/// models without a domain predictor.
pub fn total_loss(
    domain: Option<(&DomainCode, &[f64])>,
    scales: &[ScaleTarget<'_>],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if scales.len() != cfg.scale_weights.len() {
        return Err(Error::shape(format!(
            "{} scales but {} weights",
            scales.len(),
            cfg.scale_weights.len()
        )));
    }
    let cls = domain
        .map(|(code, label)| classification_loss(code, label, cfg.prob_clip))
        .transpose()?;
    let seg = scales
        .iter()
        .map(|s| multiclass_segmentation_loss(s.probs, s.labels, s.classes, cfg.epsilon, cfg.prob_clip).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(cls, &seg, &cfg.scale_weights))
}

pub fn combine(cls: Option<f64>, seg: &[f64], weights: &[f64]) -> LossBreakdown {
    let total = cls.unwrap_or(0.0) + seg.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>();
    LossBreakdown {
        cls,
        seg: seg.to_vec(),
        total,
    }
}

/// Nearest-neighbour downsampling of a label map by an integer factor per axis.
pub fn downsample_labels(labels: &[u8], spatial: &[usize], factor: usize) -> Vec<u8> {
    if factor == 1 {
        return labels.to_vec();
    }
    let out: Vec<usize> = spatial.iter().map(|s| s / factor).collect();
    let vol: usize = out.iter().product();
    let mut res = Vec::with_capacity(vol);
    let mut idx = vec![0usize; out.len()];
    for i in 0..vol {
        let mut rem = i;
        for a in (0..out.len()).rev() {
            idx[a] = rem % out[a];
            rem /= out[a];
        }
        let mut j = 0;
        for a in 0..out.len() {
            j = j * spatial[a] + idx[a] * factor;
        }
        res.push(labels[j]);
    }
    res
}

/// Batch-mean segmentation loss as a graph node over `probs [B, C, ..]`.
pub fn segmentation_loss_node(g: &mut Graph, probs: Var, targets: &[Vec<u8>], cfg: &LossConfig) -> Result<(Var, f64)> {
    let pv = g.value(probs);
    let (batch, classes) = (pv.batch(), pv.channels());
    let vol = pv.spatial_len();
    if targets.len() != batch || targets.iter().any(|t| t.len() != vol) {
        return Err(Error::shape("segmentation targets do not match predictions"));
    }
    let mut grad = vec![0.0f32; pv.numel()];
    let mut total = 0.0;
    let inv_b = 1.0 / batch as f64;
    for (b, labels) in targets.iter().enumerate() {
        let sample = pv.sample(b);
        for c in 1..classes {
            let p: Vec<f64> = sample[c * vol..(c + 1) * vol].iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = labels.iter().map(|&l| f64::from(l as usize == c)).collect();
            total += seg_parts(&p, &y, cfg.epsilon, cfg.prob_clip).total() * inv_b;
            let gr = seg_grad(&p, &y, cfg.epsilon, cfg.prob_clip);
            let off = (b * classes + c) * vol;
            for (dst, v) in grad[off..off + vol].iter_mut().zip(gr) {
                *dst = (v * inv_b) as f32;
            }
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
        }
    }
    let shape = pv.shape().to_vec();
    let node = g.scalar_fn(probs, total as f32, Tensor::from_vec(&shape, grad)?)?;
    Ok((node, total))
}

/// Batch-mean classification loss as a graph node over `code [B, K]`.
pub fn classification_loss_node(g: &mut Graph, code: Var, labels: &[usize], clip: f64) -> Result<(Var, f64)> {
    let cv = g.value(code);
    let (batch, k) = (cv.shape()[0], cv.shape()[1]);
    if labels.len() != batch || labels.iter().any(|&l| l >= k) {
        return Err(Error::shape("domain labels do not match domain codes"));
    }
    let mut grad = vec![0.0f32; batch * k];
    let mut total = 0.0;
    for (b, &l) in labels.iter().enumerate() {
        let p = cv.data()[b * k + l] as f64;
        total += -p.clamp(clip, 1.0).ln() / batch as f64;
        if p >= clip {
            grad[b * k + l] = (-1.0 / (p * batch as f64)) as f32;
        }
    }
    let node = g.scalar_fn(code, total as f32, Tensor::from_vec(&[batch, k], grad)?)?;
    Ok((node, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn classification_examples() {
        let clip = 1e-7;
        let e3 = [0.0, 0.0, 1.0, 0.0, 0.0];
        let code = DomainCode::one_hot(5, 2);
        assert!(classification_loss(&code, &e3, clip).unwrap().abs() < 1e-6);
        let uni = DomainCode::uniform(5);
        assert!((classification_loss(&uni, &e3, clip).unwrap() - 5f64.ln()).abs() < 1e-12);
        let c = DomainCode::new(vec![0.7, 0.2, 0.1]).unwrap();
        let l = classification_loss(&c, &[1.0, 0.0, 0.0], clip).unwrap();
        assert!((l - 0.356_674_943_9).abs() < 1e-9);
        assert!(classification_loss(&c, &[0.5, 0.5, 0.0], clip).is_err());
        assert!(classification_loss(&c, &[1.0, 1.0, 0.0], clip).is_err());
    }

    #[test]
    fn perfect_single_voxel() {
        let clip = 1e-7;
        let parts = segmentation_loss_at_scale(&[1.0 - clip], &[1.0], 1e-5, clip).unwrap();
        assert!((parts.dice - 1e-5 / (2.0 + 1e-5)).abs() < 1e-7);
        assert!((parts.ce - 1e-7).abs() < 1e-9);
        assert!((parts.total() - 5.1e-6).abs() < 1e-7);
    }

    #[test]
    fn empty_mask_degeneracy() {
        let parts = segmentation_loss_at_scale(&[0.0; 9], &[0.0; 9], 1e-5, 1e-7).unwrap();
        assert_eq!(parts.dice, 1.0);
        assert!(parts.ce < 1e-5);
    }

    #[test]
    fn two_by_two_half_probabilities() {
        let p = [0.5; 4];
        let y = [1.0, 0.0, 0.0, 0.0];
        let parts = segmentation_loss_at_scale(&p, &y, 1e-5, 1e-7).unwrap();
        let dice = 1.0 - 1.0 / (3.0 + 1e-5);
        assert!((parts.dice - dice).abs() < 1e-12);
        assert!((parts.dice - 0.6667).abs() < 1e-4);
        assert!((parts.ce - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((parts.total() - 3.4392).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(segmentation_loss_at_scale(&[0.5, 0.5], &[1.0], 1e-5, 1e-7).is_err());
        assert!(segmentation_loss_at_scale(&[1.5], &[1.0], 1e-5, 1e-7).is_err());
        assert!(segmentation_loss_at_scale(&[0.5], &[0.5], 1e-5, 1e-7).is_err());
    }

    #[test]
    fn default_weights_for_four_scales() {
        let w = deep_supervision_weights(4);
        let want = [8.0 / 15.0, 4.0 / 15.0, 2.0 / 15.0, 1.0 / 15.0];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        LossConfig::for_scales(4).validate().unwrap();
        let mut bad = LossConfig::for_scales(2);
        bad.scale_weights = vec![0.5, 0.5];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn total_with_zero_weights_is_classification_only() {
        let code = DomainCode::new(vec![0.7, 0.3]).unwrap();
        let label = [1.0, 0.0];
        let probs = [0.5, 0.5, 0.5, 0.5];
        let labels = [0u8, 1];
        let scale = ScaleTarget {
            probs: &probs,
            labels: &labels,
            classes: 2,
        };
        let cfg = LossConfig {
            scale_weights: vec![0.0],
            ..LossConfig::for_scales(1)
        };
        let out = total_loss(Some((&code, &label)), &[scale], &cfg).unwrap();
        assert_eq!(out.total, out.cls.unwrap());

        let cfg = LossConfig::for_scales(1);
        let out = total_loss(Some((&code, &label)), &[scale], &cfg).unwrap();
        assert!((out.total - (out.cls.unwrap() + out.seg[0])).abs() < 1e-12);
        let no_cls = total_loss(None, &[scale], &cfg).unwrap();
        assert!(no_cls.cls.is_none());
        assert_eq!(no_cls.total, no_cls.seg[0]);
    }

    #[test]
    fn nearest_downsampling_keeps_label_values() {
        let labels: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
        let d = downsample_labels(&labels, &[4, 4], 2);
        assert_eq!(d, vec![labels[0], labels[2], labels[8], labels[10]]);
    }

    #[test]
    fn graph_node_matches_pure_loss() {
        let mut g = Graph::new();
        let probs = Tensor::from_vec(&[1, 2, 2, 2], vec![0.9, 0.2, 0.6, 0.5, 0.1, 0.8, 0.4, 0.5]).unwrap();
        let p = g.leaf(probs.clone());
        let targets = vec![vec![0u8, 1, 1, 0]];
        let cfg = LossConfig::for_scales(1);
        let (node, value) = segmentation_loss_node(&mut g, p, &targets, &cfg).unwrap();
        let fg: Vec<f64> = probs.data()[4..].iter().map(|&v| v as f64).collect();
        let want = segmentation_loss_at_scale(&fg, &[0.0, 1.0, 1.0, 0.0], cfg.epsilon, cfg.prob_clip).unwrap();
        assert!((value - want.total()).abs() < 1e-6);
        let grads = g.backward(node);
        let gp = grads.wrt(p).unwrap();
        assert!(gp.data()[..4].iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn total_is_monotone_in_each_scale(
            seg in proptest::collection::vec(0.0f64..10.0, 3),
            bump in 0.0f64..5.0,
            which in 0usize..3,
            cls in 0.0f64..3.0,
        ) {
            let w = deep_supervision_weights(3);
            let base = combine(Some(cls), &seg, &w).total;
            let mut s2 = seg.clone();
            s2[which] += bump;
            prop_assert!(combine(Some(cls), &s2, &w).total >= base);
        }

        #[test]
        fn seg_parts_stay_in_range(
            p in proptest::collection::vec(0.0f64..=1.0, 1..40),
            seed in any::<u64>(),
        ) {
            let y: Vec<f64> = p.iter().enumerate().map(|(i, _)| ((seed >> (i % 64)) & 1) as f64).collect();
            let parts = segmentation_loss_at_scale(&p, &y, 1e-5, 1e-7).unwrap();
            prop_assert!(parts.dice >= 0.0 && parts.dice <= 1.0);
            prop_assert!(parts.ce >= 0.0);
        }
    }
}
