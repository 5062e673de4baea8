//! Model assembly for the full method and its ablation variants.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig, MultiScaleFeatures};
use crate::cac::{cac_layout, cac_logits};
use crate::dac::{apply_dac_head, dac_dynamic_response, Controller, DomainPredictor, FilterLayout, Pointwise, ResidualSign};
use crate::error::{Error, Result};
use crate::params::{kaiming_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Gain applied to controller weights at initialization.
pub const CONTROLLER_GAIN: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Variant {
    /// Domain-adaptive head followed by content-adaptive head.
    Dcac,
    /// Residual uses `+` instead of `-`.
    DcacPlus,
    /// Content-adaptive head first, domain-adaptive head on its class scores.
    Cdac,
    /// One head generated from the domain code concatenated with global features.
    DCac,
    NoDac,
    /// Static 1x1 classifier instead of the content-adaptive head.
    NoCac,
    /// Domain predictor without the gradient barrier.
    DcacNg,
    /// Heads on the `n` finest decoder scales only.
    DcacN(usize),
    /// Content controller fed by pooled features of every encoder block.
    DcacM,
    /// Backbone plus static classifier, no domain predictor.
    DeepAll,
}

impl Variant {
    pub fn uses_dac(self) -> bool {
        !matches!(self, Variant::NoDac | Variant::DCac | Variant::DeepAll)
    }

    pub fn uses_cac(self) -> bool {
        !matches!(self, Variant::NoCac | Variant::DeepAll)
    }

    pub fn has_domain_predictor(self) -> bool {
        self != Variant::DeepAll
    }

    pub fn gradient_barrier(self) -> bool {
        self != Variant::DcacNg
    }

    pub fn residual_sign(self) -> ResidualSign {
        if self == Variant::DcacPlus {
            ResidualSign::Plus
        } else {
            ResidualSign::Minus
        }
    }

    /// Training variants in ablation-table order (the shuffled-filter
    /// evaluation is derived from `Dcac`).
    pub fn ablation_set() -> Vec<Variant> {
        vec![
            Variant::DeepAll,
            Variant::DCac,
            Variant::NoDac,
            Variant::NoCac,
            Variant::Cdac,
            Variant::DcacNg,
            Variant::Dcac,
        ]
    }

    pub fn label(self) -> String {
        match self {
            Variant::Dcac => "DCAC".into(),
            Variant::DcacPlus => "DCAC+".into(),
            Variant::Cdac => "CDAC".into(),
            Variant::DCac => "D-CAC".into(),
            Variant::NoDac => "w/o DAC".into(),
            Variant::NoCac => "w/o CAC".into(),
            Variant::DcacNg => "DCAC-NG".into(),
            Variant::DcacN(n) => format!("DCAC^{n}"),
            Variant::DcacM => "DCAC-M".into(),
            Variant::DeepAll => "DeepAll".into(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Dcac => f.write_str("dcac"),
            Variant::DcacPlus => f.write_str("dcac-plus"),
            Variant::Cdac => f.write_str("cdac"),
            Variant::DCac => f.write_str("d-cac"),
            Variant::NoDac => f.write_str("no-dac"),
            Variant::NoCac => f.write_str("no-cac"),
            Variant::DcacNg => f.write_str("dcac-ng"),
            Variant::DcacN(n) => write!(f, "dcac-n{n}"),
            Variant::DcacM => f.write_str("dcac-m"),
            Variant::DeepAll => f.write_str("deepall"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace('_', "-");
        Ok(match t.as_str() {
            "dcac" => Variant::Dcac,
            "dcac-plus" | "dcac+" => Variant::DcacPlus,
            "cdac" => Variant::Cdac,
            "d-cac" => Variant::DCac,
            "no-dac" | "wo-dac" => Variant::NoDac,
            "no-cac" | "wo-cac" => Variant::NoCac,
            "dcac-ng" => Variant::DcacNg,
            "dcac-m" => Variant::DcacM,
            "deepall" | "deep-all" => Variant::DeepAll,
            other => {
                let n = other
                    .strip_prefix("dcac-n")
                    .or_else(|| other.strip_prefix("dcac^"))
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::invalid(format!("unknown variant '{s}'")))?;
                Variant::DcacN(n)
            }
        })
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> Self {
        v.to_string()
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Number of source domains `K`.
    pub num_domains: usize,
    /// Number of segmentation classes `C`, background included.
    pub num_classes: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.variant.has_domain_predictor() && self.num_domains < 1 {
            return Err(Error::config("need at least one source domain"));
        }
        if let Variant::DcacN(n) = self.variant {
            if n == 0 || n > self.backbone.num_blocks - 1 {
                return Err(Error::config(format!(
                    "DCAC^n needs 1 <= n <= {}, got {n}",
                    self.backbone.num_blocks - 1
                )));
            }
        }
        Ok(())
    }

    /// Decoder scales carrying heads during training, finest first.
    pub fn supervised_scales(&self) -> Vec<usize> {
        let n = match self.variant {
            Variant::DcacN(n) => n,
            _ => self.backbone.num_blocks - 1,
        };
        (0..n).collect()
    }

    /// Width `K*C` of the projected decoder features.
    pub fn head_width(&self) -> usize {
        self.num_domains * self.num_classes
    }
}

/// Dynamic parameters generated per image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicParamCounts {
    pub dac: usize,
    pub cac: usize,
}

impl DynamicParamCounts {
    pub fn total(&self) -> usize {
        self.dac + self.cac
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScaleSelection {
    /// Every supervised scale (training).
    #[default]
    Supervised,
    /// Finest scale only (inference).
    Finest,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub scales: ScaleSelection,
    /// Replace the generated content filters `[B, len]`.
    pub content_filters: Option<Tensor>,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self {
            scales: ScaleSelection::Finest,
            content_filters: None,
        }
    }
}

pub struct ForwardOutput {
    /// Decoder scale index of each prediction, finest first.
    pub scales: Vec<usize>,
    /// Class probabilities `[B, C, ..]` per scale.
    pub probs: Vec<Var>,
    pub domain_code: Option<Var>,
    /// Raw pooled encoder features seen by the domain predictor.
    pub domain_features: Option<Var>,
    pub domain_filters: Option<Var>,
    pub content_filters: Option<Var>,
    pub features: MultiScaleFeatures,
}

struct ScaleHead {
    scale: usize,
    projection: Option<Pointwise>,
    classifier: Option<Pointwise>,
}

pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    predictor: Option<DomainPredictor>,
    domain_ctrl: Option<Controller>,
    domain_layout: Option<FilterLayout>,
    content_ctrl: Option<Controller>,
    content_layout: Option<FilterLayout>,
    heads: Vec<ScaleHead>,
    head_calls: Vec<AtomicUsize>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bcfg = &cfg.backbone;
        let backbone = Backbone::new(bcfg, &mut store, &mut rng)?;
        let enc_ch = bcfg.channels();
        let (k, c) = (cfg.num_domains, cfg.num_classes);
        let width = cfg.head_width();
        let variant = cfg.variant;
        let rank = bcfg.spatial_rank;
        let slope = bcfg.leaky_slope;

        let predictor = variant.has_domain_predictor().then(|| {
            DomainPredictor::new(&mut store, &mut rng, &enc_ch, k, variant.gradient_barrier())
        });

        let domain_layout = variant.uses_dac().then(|| {
            if variant == Variant::Cdac {
                FilterLayout::chain(&[c, c])
            } else {
                FilterLayout::dac(k, c)
            }
        });
        let domain_ctrl = domain_layout.as_ref().map(|layout| {
            Controller::new(
                &mut store,
                &mut rng,
                "domain_controller",
                k,
                layout.len(),
                CONTROLLER_GAIN,
                Tensor::zeros(&[layout.len()]),
            )
        });

        let content_layout = variant.uses_cac().then(|| cac_layout(width, c));
        let content_ctrl = match &content_layout {
            Some(layout) => {
                let in_width = match variant {
                    Variant::DcacM => enc_ch.iter().sum(),
                    Variant::DCac => k + bcfg.bottleneck_channels(),
                    _ => bcfg.bottleneck_channels(),
                };
                let bias = static_head_init(layout, slope, &mut rng);
                Some(Controller::new(
                    &mut store,
                    &mut rng,
                    "content_controller",
                    in_width,
                    layout.len(),
                    CONTROLLER_GAIN,
                    bias,
                ))
            }
            None => None,
        };

        let dec_ch = &enc_ch[..bcfg.num_blocks - 1];
        let mut heads = Vec::new();
        for s in cfg.supervised_scales() {
            let projection = (variant != Variant::DeepAll).then(|| {
                Pointwise::new(&mut store, &mut rng, &format!("head.{s}.conv_o"), dec_ch[s], width, rank)
            });
            let classifier = match variant {
                Variant::DeepAll => Some(Pointwise::new(
                    &mut store,
                    &mut rng,
                    &format!("head.{s}.classifier"),
                    dec_ch[s],
                    c,
                    rank,
                )),
                Variant::NoCac => Some(Pointwise::new(
                    &mut store,
                    &mut rng,
                    &format!("head.{s}.classifier"),
                    width,
                    c,
                    rank,
                )),
                _ => None,
            };
            heads.push(ScaleHead {
                scale: s,
                projection,
                classifier,
            });
        }
        let head_calls = (0..bcfg.num_blocks - 1).map(|_| AtomicUsize::new(0)).collect();
        Ok(Self {
            cfg,
            store,
            backbone,
            predictor,
            domain_ctrl,
            domain_layout,
            content_ctrl,
            content_layout,
            heads,
            head_calls,
        })
    }

    /// Rebuild a model from a configuration and stored parameters.
    pub fn from_params(cfg: ModelConfig, store: &ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.store.load_from(store)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn domain_predictor(&self) -> Option<&DomainPredictor> {
        self.predictor.as_ref()
    }

    pub fn domain_controller(&self) -> Option<&Controller> {
        self.domain_ctrl.as_ref()
    }

    pub fn content_controller(&self) -> Option<&Controller> {
        self.content_ctrl.as_ref()
    }

    pub fn domain_layout(&self) -> Option<&FilterLayout> {
        self.domain_layout.as_ref()
    }

    pub fn content_layout(&self) -> Option<&FilterLayout> {
        self.content_layout.as_ref()
    }

    pub fn supervised_scales(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.scale).collect()
    }

    /// Parameter groups whose gradient norms are clipped independently: the
    /// domain classifier and everything else.
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let fc: Vec<ParamId> = self.predictor.as_ref().map_or(Vec::new(), |p| p.fc_params().to_vec());
        let rest = self.store.ids().filter(|id| !fc.contains(id)).collect();
        let mut groups = vec![("segmentation", rest)];
        if !fc.is_empty() {
            groups.push(("domain_classifier", fc));
        }
        groups
    }

    pub fn dynamic_param_counts(&self) -> DynamicParamCounts {
        DynamicParamCounts {
            dac: self.domain_layout.as_ref().map_or(0, FilterLayout::len),
            cac: self.content_layout.as_ref().map_or(0, FilterLayout::len),
        }
    }

    /// Fold a batch of domain-predictor inputs into its running statistics.
    pub fn update_domain_statistics(&mut self, features: &Tensor) -> Result<()> {
        match &self.predictor {
            Some(p) => p.update_statistics(&mut self.store, features),
            None => Ok(()),
        }
    }

    /// Number of head applications per decoder scale since the last reset.
    pub fn head_calls(&self) -> Vec<usize> {
        self.head_calls.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset_head_calls(&self) {
        for c in &self.head_calls {
            c.store(0, Ordering::Relaxed);
        }
    }

    pub fn forward(&self, g: &mut Graph, image: Var, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let store = &self.store;
        let features = self.backbone.forward(g, store, image)?;
        let enc = &features.encoder;
        let batch = g.value(image).batch();

        let (domain_code, domain_features) = match &self.predictor {
            Some(p) => {
                let (code, feats) = p.forward_with_features(g, store, enc)?;
                (Some(code), Some(feats))
            }
            None => (None, None),
        };
        // Controllers see the code as a constant; the FC layer learns from the
        // classification loss only.
        let condition_code = domain_code.map(|c| g.detach(c));
        let domain_filters = match (&self.domain_ctrl, condition_code) {
            (Some(ctrl), Some(code)) => Some(ctrl.forward(g, store, code)?),
            _ => None,
        };
        let content_filters = match &self.content_ctrl {
            Some(ctrl) => Some(match &opts.content_filters {
                Some(t) => {
                    if t.shape() != [batch, ctrl.out_len()] {
                        return Err(Error::shape(format!(
                            "content filter override {:?}, expected [{batch}, {}]",
                            t.shape(),
                            ctrl.out_len()
                        )));
                    }
                    g.constant(t.clone())
                }
                None => {
                    let cond = self.content_condition(g, enc, condition_code)?;
                    ctrl.forward(g, store, cond)?
                }
            }),
            None => None,
        };

        let selected: Vec<&ScaleHead> = match opts.scales {
            ScaleSelection::Supervised => self.heads.iter().collect(),
            ScaleSelection::Finest => self.heads.iter().take(1).collect(),
        };
        let mut probs = Vec::with_capacity(selected.len());
        let mut scales = Vec::with_capacity(selected.len());
        for head in selected {
            let p = self.apply_heads(g, head, features.decoder[head.scale], domain_filters, content_filters)?;
            self.head_calls[head.scale].fetch_add(1, Ordering::Relaxed);
            probs.push(p);
            scales.push(head.scale);
        }
        Ok(ForwardOutput {
            scales,
            probs,
            domain_code,
            domain_features,
            domain_filters,
            content_filters,
            features,
        })
    }

    fn content_condition(&self, g: &mut Graph, enc: &[Var], code: Option<Var>) -> Result<Var> {
        let bottleneck = *enc.last().expect("encoder maps");
        match self.cfg.variant {
            Variant::DcacM => {
                let pooled: Vec<Var> = enc.iter().map(|&m| g.global_avg_pool(m)).collect();
                g.concat(&pooled)
            }
            Variant::DCac => {
                let code = code.ok_or_else(|| Error::config("D-CAC needs a domain code"))?;
                let gap = g.global_avg_pool(bottleneck);
                g.concat(&[code, gap])
            }
            _ => Ok(g.global_avg_pool(bottleneck)),
        }
    }

    fn apply_heads(
        &self,
        g: &mut Graph,
        head: &ScaleHead,
        decoded: Var,
        domain_filters: Option<Var>,
        content_filters: Option<Var>,
    ) -> Result<Var> {
        let store = &self.store;
        let slope = self.cfg.backbone.leaky_slope;
        let variant = self.cfg.variant;
        if variant == Variant::DeepAll {
            let cls = head.classifier.as_ref().expect("DeepAll classifier");
            let logits = cls.forward(g, store, decoded)?;
            return Ok(g.softmax(logits));
        }
        let projected = head
            .projection
            .as_ref()
            .expect("projection head")
            .forward(g, store, decoded)?;
        let need = |v: Option<Var>, what: &str| v.ok_or_else(|| Error::config(format!("missing {what} filters")));
        let logits = match variant {
            Variant::Cdac => {
                let z = cac_logits(
                    g,
                    projected,
                    need(content_filters, "content")?,
                    self.content_layout.as_ref().expect("content layout"),
                    slope,
                )?;
                apply_dac_head(
                    g,
                    z,
                    need(domain_filters, "domain")?,
                    self.domain_layout.as_ref().expect("domain layout"),
                    variant.residual_sign(),
                )?
            }
            Variant::NoCac => {
                let f = apply_dac_head(
                    g,
                    projected,
                    need(domain_filters, "domain")?,
                    self.domain_layout.as_ref().expect("domain layout"),
                    variant.residual_sign(),
                )?;
                head.classifier
                    .as_ref()
                    .expect("static classifier")
                    .forward(g, store, f)?
            }
            Variant::NoDac | Variant::DCac => cac_logits(
                g,
                projected,
                need(content_filters, "content")?,
                self.content_layout.as_ref().expect("content layout"),
                slope,
            )?,
            _ => {
                let f = apply_dac_head(
                    g,
                    projected,
                    need(domain_filters, "domain")?,
                    self.domain_layout.as_ref().expect("domain layout"),
                    variant.residual_sign(),
                )?;
                cac_logits(
                    g,
                    f,
                    need(content_filters, "content")?,
                    self.content_layout.as_ref().expect("content layout"),
                    slope,
                )?
            }
        };
        Ok(g.softmax(logits))
    }

    /// Projected finest-scale features before the domain-adaptive head and
    /// the dynamic response `Conv_O(f_D^1) * w_d`, both `[B, K*C, ..]`.
    pub fn domain_head_features(&self, g: &mut Graph, image: Var) -> Result<(Var, Var)> {
        let layout = self
            .domain_layout
            .as_ref()
            .filter(|_| self.cfg.variant != Variant::Cdac)
            .ok_or_else(|| Error::config(format!("variant {} has no domain-adaptive head on projected features", self.cfg.variant)))?;
        let store = &self.store;
        let features = self.backbone.forward(g, store, image)?;
        let code = self
            .predictor
            .as_ref()
            .expect("domain predictor")
            .forward(g, store, &features.encoder)?;
        let filters = self.domain_ctrl.as_ref().expect("controller").forward(g, store, code)?;
        let head = &self.heads[0];
        let projected = head
            .projection
            .as_ref()
            .expect("projection")
            .forward(g, store, features.decoder[head.scale])?;
        let dynamic = dac_dynamic_response(g, projected, filters, layout)?;
        Ok((projected, dynamic))
    }
}

/// Controller bias that makes the generated head start as an ordinary
/// randomly initialized stack of 1x1 layers.
fn static_head_init(layout: &FilterLayout, slope: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let mut bias = vec![0.0f32; layout.len()];
    for slot in layout.slots() {
        let w = kaiming_normal(rng, &[slot.cout, slot.cin], slot.cin, slope);
        bias[slot.offset..slot.offset + slot.cin * slot.cout].copy_from_slice(w.data());
    }
    Tensor::from_vec(&[layout.len()], bias).expect("layout length")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: Variant, k: usize, c: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                num_blocks: 3,
                base_channels: 4,
                channel_cap: 16,
                ..Default::default()
            },
            num_domains: k,
            num_classes: c,
            variant,
        }
    }

    #[test]
    fn variant_names_round_trip() {
        let mut all = Variant::ablation_set();
        all.extend([Variant::DcacPlus, Variant::DcacN(3), Variant::DcacM]);
        for v in all {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<Variant>(&json).unwrap(), v);
        }
        assert_eq!("DCAC^2".parse::<Variant>().unwrap(), Variant::DcacN(2));
        assert!("dcac-x".parse::<Variant>().is_err());
    }

    #[test]
    fn dynamic_counts_per_variant() {
        let full = Model::new(cfg(Variant::Dcac, 5, 2), 0).unwrap().dynamic_param_counts();
        assert_eq!(full, DynamicParamCounts { dac: 110, cac: 242 });
        for v in [Variant::NoDac, Variant::NoCac] {
            let c = Model::new(cfg(v, 5, 2), 0).unwrap().dynamic_param_counts();
            assert!(c.total() < full.total());
        }
        assert_eq!(Model::new(cfg(Variant::DeepAll, 5, 2), 0).unwrap().dynamic_param_counts().total(), 0);
    }

    #[test]
    fn dcac_n_validation() {
        assert!(Model::new(cfg(Variant::DcacN(0), 3, 2), 0).is_err());
        assert!(Model::new(cfg(Variant::DcacN(3), 3, 2), 0).is_err());
        let m = Model::new(cfg(Variant::DcacN(1), 3, 2), 0).unwrap();
        assert_eq!(m.supervised_scales(), vec![0]);
    }

    #[test]
    fn every_variant_runs_forward() {
        let mut all = Variant::ablation_set();
        all.extend([Variant::DcacPlus, Variant::DcacN(2), Variant::DcacM]);
        for v in all {
            let m = Model::new(cfg(v, 3, 3), 1).unwrap();
            let mut g = Graph::inference();
            let x = g.constant(Tensor::full(&[2, 1, 8, 8], 0.5));
            let out = m.forward(&mut g, x, &ForwardOptions::default()).unwrap();
            assert_eq!(out.probs.len(), m.supervised_scales().len(), "{v}");
            assert_eq!(out.domain_code.is_some(), v.has_domain_predictor());
            let p = g.value(out.probs[0]);
            assert_eq!(p.shape(), &[2, 3, 8, 8]);
            assert!(p.is_finite());
        }
    }

    #[test]
    fn inference_runs_finest_head_only() {
        let m = Model::new(cfg(Variant::Dcac, 2, 2), 0).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::full(&[1, 1, 8, 8], 0.5));
        m.forward(&mut g, x, &ForwardOptions::inference()).unwrap();
        assert_eq!(m.head_calls(), vec![1, 0]);
    }
}
