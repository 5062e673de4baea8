//! Domain adaptive convolution: a domain predictor turns pooled encoder
//! features into a domain code, a controller maps the code to the weights of
//! a 1x1 dynamic layer, and the residual head subtracts that layer's response
//! from the projected decoder features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AffineSlot, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_normal, uniform_fan_in, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Probability vector over the `K` source domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainCode(Vec<f64>);

impl DomainCode {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty domain code"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("domain code entries outside [0, 1]: {probs:?}")));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::invalid(format!("domain code sums to {s}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most likely domain; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        self.ranking()[0]
    }

    /// Domain indices by decreasing probability, ties by lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx
    }
}

/// Layout of a flat dynamic filter vector as a stack of per-voxel affine layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterLayout {
    slots: Vec<AffineSlot>,
}

impl FilterLayout {
    /// Stack of affine layers with the given channel sequence.
    pub fn chain(channels: &[usize]) -> Self {
        let mut slots = Vec::with_capacity(channels.len().saturating_sub(1));
        let mut offset = 0;
        for w in channels.windows(2) {
            let s = AffineSlot {
                offset,
                cin: w[0],
                cout: w[1],
            };
            offset = s.end();
            slots.push(s);
        }
        Self { slots }
    }

    /// One `(K*C) -> (K*C)` layer.
    pub fn dac(k: usize, c: usize) -> Self {
        Self::chain(&[k * c, k * c])
    }

    pub fn slots(&self) -> &[AffineSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.last().map_or(0, AffineSlot::end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(K*C)^2 + K*C`.
pub fn dac_filter_len(k: usize, c: usize) -> usize {
    let kc = k * c;
    kc * kc + kc
}

/// A generated filter vector together with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub layout: FilterLayout,
    pub values: Vec<f32>,
}

impl FilterBank {
    pub fn new(layout: FilterLayout, values: Vec<f32>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::shape(format!(
                "filter bank has {} values, layout needs {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Weight (row-major `cout x cin`) and bias of layer `i`.
    pub fn layer(&self, i: usize) -> (&[f32], &[f32]) {
        let s = self.layout.slots()[i];
        self.values[s.offset..s.end()].split_at(s.cin * s.cout)
    }
}

/// How the dynamic response enters the residual in the domain-adaptive head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResidualSign {
    #[default]
    Minus,
    Plus,
}

/// Fully connected layer plus softmax over concatenated pooled encoder features.
#[derive(Clone, Debug)]
pub struct DomainPredictor {
    weight: ParamId,
    bias: ParamId,
    /// Running feature statistics used to standardize the FC input. They are
    /// buffers, updated by the trainer and never by gradients.
    mean: ParamId,
    var: ParamId,
    count: ParamId,
    in_width: usize,
    num_domains: usize,
    /// Stop gradients from flowing into the encoder.
    pub gradient_barrier: bool,
}

impl DomainPredictor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        encoder_channels: &[usize],
        num_domains: usize,
        gradient_barrier: bool,
    ) -> Self {
        let in_width = encoder_channels.iter().sum();
        Self {
            weight: store.add(
                "domain_predictor.fc.weight",
                uniform_fan_in(rng, &[num_domains, in_width], in_width, 1.0),
            ),
            bias: store.add("domain_predictor.fc.bias", Tensor::zeros(&[num_domains])),
            mean: store.add("domain_predictor.norm.mean", Tensor::zeros(&[in_width])),
            var: store.add("domain_predictor.norm.var", Tensor::full(&[in_width], 1.0)),
            count: store.add("domain_predictor.norm.count", Tensor::scalar(0.0)),
            in_width,
            num_domains,
            gradient_barrier,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn fc_params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn buffer_params(&self) -> [ParamId; 3] {
        [self.mean, self.var, self.count]
    }

    /// Domain code `[b, K]` from the encoder maps.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, encoder: &[Var]) -> Result<Var> {
        Ok(self.forward_with_features(g, store, encoder)?.0)
    }

    /// Domain code and the raw concatenated pooled features `[b, in]`.
    pub fn forward_with_features(&self, g: &mut Graph, store: &ParamStore, encoder: &[Var]) -> Result<(Var, Var)> {
        let pooled: Vec<Var> = encoder.iter().map(|&m| g.global_avg_pool(m)).collect();
        let cat = g.concat(&pooled)?;
        let width = g.value(cat).shape()[1];
        if width != self.in_width {
            return Err(Error::config(format!(
                "domain predictor expects {} features, encoder provides {width}",
                self.in_width
            )));
        }
        let cat = if self.gradient_barrier { g.detach(cat) } else { cat };
        let n = self.in_width;
        let mean = store.get(self.mean).data();
        let var = store.get(self.var).data();
        let mut diag = vec![0.0f32; n * n];
        let mut shift = vec![0.0f32; n];
        for i in 0..n {
            let inv = 1.0 / (var[i] + STAT_EPS).sqrt();
            diag[i * n + i] = inv;
            shift[i] = -mean[i] * inv;
        }
        let scale = g.constant(Tensor::from_vec(&[n, n], diag)?);
        let shift = g.constant(Tensor::from_vec(&[n], shift)?);
        let standardized = g.linear(cat, scale, shift)?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let logits = g.linear(standardized, w, b)?;
        Ok((g.softmax(logits), cat))
    }

    /// Fold a batch of raw features `[b, in]` into the running statistics.
    /// The first batch sets them directly; later batches use an exponential
    /// average with rate `max(1 / (count + 1), STAT_MOMENTUM)`.
    pub fn update_statistics(&self, store: &mut ParamStore, features: &Tensor) -> Result<()> {
        let n = self.in_width;
        if features.rank() != 2 || features.shape()[1] != n {
            return Err(Error::shape(format!("feature batch {:?}, expected [_, {n}]", features.shape())));
        }
        let b = features.shape()[0];
        if b == 0 {
            return Ok(());
        }
        let count = store.get(self.count).item() as f64;
        let rate = (1.0 / (count + 1.0)).max(STAT_MOMENTUM);
        let rows = features.data();
        let mut mean: Vec<f64> = store.get(self.mean).data().iter().map(|&v| v as f64).collect();
        let mut var: Vec<f64> = store.get(self.var).data().iter().map(|&v| v as f64).collect();
        for i in 0..n {
            let bm = (0..b).map(|r| rows[r * n + i] as f64).sum::<f64>() / b as f64;
            mean[i] += rate * (bm - mean[i]);
            let bv = (0..b).map(|r| (rows[r * n + i] as f64 - mean[i]).powi(2)).sum::<f64>() / b as f64;
            var[i] += rate * (bv - var[i]);
        }
        let m = store.get_mut(self.mean).data_mut();
        for (d, s) in m.iter_mut().zip(&mean) {
            *d = *s as f32;
        }
        let v = store.get_mut(self.var).data_mut();
        for (d, s) in v.iter_mut().zip(&var) {
            *d = *s as f32;
        }
        store.get_mut(self.count).data_mut()[0] = (count + 1.0) as f32;
        Ok(())
    }
}

/// Variance floor of the feature standardization.
pub const STAT_EPS: f32 = 1e-5;
/// Long-run rate of the running feature statistics.
pub const STAT_MOMENTUM: f64 = 0.01;

/// Affine map from a conditioning vector to a flat filter vector.
#[derive(Clone, Debug)]
pub struct Controller {
    weight: ParamId,
    bias: ParamId,
    in_width: usize,
    out_len: usize,
}

impl Controller {
    /// Weights use the fan-in uniform initializer scaled by `gain`; the bias
    /// starts at `bias`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_width: usize,
        out_len: usize,
        gain: f32,
        bias: Tensor,
    ) -> Self {
        assert_eq!(bias.numel(), out_len);
        Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform_fan_in(rng, &[out_len, in_width], in_width, gain),
            ),
            bias: store.add(format!("{name}.bias"), bias),
            in_width,
            out_len,
        }
    }

    pub fn in_width(&self) -> usize {
        self.in_width
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    /// Filters `[b, out_len]` from conditioning `[b, in_width]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cond: Var) -> Result<Var> {
        let width = g.value(cond).shape()[1];
        if width != self.in_width {
            return Err(Error::config(format!(
                "controller expects input width {}, got {width}",
                self.in_width
            )));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(cond, w, b)
    }
}

/// Traditional 1x1 convolution; projects decoder features to `K*C` channels
/// (`Conv_O`) or acts as a static pixel classifier.
#[derive(Clone, Debug)]
pub struct Pointwise {
    weight: ParamId,
    bias: ParamId,
}

impl Pointwise {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        spatial_rank: usize,
    ) -> Self {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat_n(1, spatial_rank));
        Self {
            weight: store.add(format!("{name}.weight"), kaiming_normal(rng, &shape, cin, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv(x, w, Some(b), 1)
    }
}

/// Dynamic 1x1 response of projected features `x` under per-sample filters.
pub fn dac_dynamic_response(g: &mut Graph, x: Var, filters: Var, layout: &FilterLayout) -> Result<Var> {
    let [slot] = layout.slots() else {
        return Err(Error::shape("domain-adaptive layout must have exactly one layer"));
    };
    g.dynamic_affine(x, filters, *slot)
}

/// `x - x * w_d` (or `x + x * w_d`), where `x = Conv_O(f_D)`.
pub fn apply_dac_head(
    g: &mut Graph,
    projected: Var,
    filters: Var,
    layout: &FilterLayout,
    sign: ResidualSign,
) -> Result<Var> {
    let filt = g.value(filters).shape().to_vec();
    if filt.len() != 2 || filt[1] != layout.len() {
        return Err(Error::shape(format!(
            "domain filter bank {filt:?} does not match layout length {}",
            layout.len()
        )));
    }
    let dynamic = dac_dynamic_response(g, projected, filters, layout)?;
    match sign {
        ResidualSign::Minus => g.sub(projected, dynamic),
        ResidualSign::Plus => g.add(projected, dynamic),
    }
}

/// Convenience wrapper on plain tensors: `projected [b, KC, ..]`, `filters [b, len]`.
pub fn apply_dac_head_tensor(
    projected: &Tensor,
    filters: &Tensor,
    layout: &FilterLayout,
    sign: ResidualSign,
) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.constant(projected.clone());
    let f = g.constant(filters.clone());
    let y = apply_dac_head(&mut g, x, f, layout, sign)?;
    Ok(g.value(y).clone())
}
