//! U-shaped encoder-decoder producing multi-scale encoder features (input to
//! the domain predictor and content controller) and decoder features (input
//! to the segmentation heads).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Number of encoder blocks `N`; the decoder has `N - 1`.
    pub num_blocks: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    /// 2 for slices, 3 for volumes.
    pub spatial_rank: usize,
    pub in_channels: usize,
    pub leaky_slope: f32,
    pub norm_eps: f32,
    /// Reject non-divisible inputs instead of padding them.
    pub strict: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_blocks: 5,
            base_channels: 32,
            channel_cap: 320,
            spatial_rank: 2,
            in_channels: 1,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
            strict: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.num_blocks) {
            return Err(Error::config(format!(
                "num_blocks must be in [2, 8], got {}",
                self.num_blocks
            )));
        }
        if !(1..=3).contains(&self.spatial_rank) {
            return Err(Error::config("spatial_rank must be 1, 2 or 3"));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.channel_cap < self.base_channels {
            return Err(Error::config("channel counts must be positive and cap >= base"));
        }
        if !(self.norm_eps > 0.0) || !self.leaky_slope.is_finite() {
            return Err(Error::config("norm_eps must be positive and leaky_slope finite"));
        }
        Ok(())
    }

    /// Channels of encoder block `i` (0-based): doubled per block, capped.
    pub fn channels(&self) -> Vec<usize> {
        (0..self.num_blocks)
            .map(|i| {
                self.base_channels
                    .checked_shl(i as u32)
                    .unwrap_or(usize::MAX)
                    .min(self.channel_cap)
            })
            .collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.channels().last().expect("at least two blocks")
    }

    /// Every spatial axis must be a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << (self.num_blocks - 1)
    }

    pub fn check_spatial(&self, spatial: &[usize]) -> Result<()> {
        if spatial.len() != self.spatial_rank {
            return Err(Error::Dimension(format!(
                "expected {} spatial axes, got {spatial:?}",
                self.spatial_rank
            )));
        }
        let d = self.divisor();
        if let Some(bad) = spatial.iter().find(|&&s| s == 0 || s % d != 0) {
            return Err(Error::Dimension(format!(
                "spatial size {bad} in {spatial:?} is not divisible by 2^(N-1) = {d}"
            )));
        }
        Ok(())
    }

    /// Smallest divisible extent covering `spatial`.
    pub fn padded_extent(&self, spatial: &[usize]) -> Vec<usize> {
        let d = self.divisor();
        spatial.iter().map(|s| s.div_ceil(d).max(1) * d).collect()
    }

    /// Number of trainable scalars; a pure function of the configuration.
    pub fn param_count(&self) -> usize {
        let k = 3usize.pow(self.spatial_rank as u32);
        let up = 2usize.pow(self.spatial_rank as u32);
        let ch = self.channels();
        let conv = |cin: usize, cout: usize| cin * cout * k + cout + 2 * cout;
        let mut n = 0;
        let mut prev = self.in_channels;
        for &c in &ch {
            n += conv(prev, c) + conv(c, c);
            prev = c;
        }
        for i in (0..self.num_blocks - 1).rev() {
            n += ch[i + 1] * ch[i] * up + ch[i];
            n += conv(2 * ch[i], ch[i]) + conv(ch[i], ch[i]);
        }
        n
    }
}

/// 3x3 convolution followed by instance normalization and LeakyReLU.
#[derive(Clone, Debug)]
struct ConvNormAct {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: usize,
}

impl ConvNormAct {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &BackboneConfig,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat_n(3, cfg.spatial_rank));
        let fan_in = cin * 3usize.pow(cfg.spatial_rank as u32);
        Self {
            weight: store.add(
                format!("{name}.weight"),
                kaiming_normal(rng, &shape, fan_in, cfg.leaky_slope),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            gamma: store.add(format!("{name}.norm.gamma"), Tensor::full(&[cout], 1.0)),
            beta: store.add(format!("{name}.norm.beta"), Tensor::zeros(&[cout])),
            stride,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, cfg: &BackboneConfig) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv(x, w, Some(b), self.stride)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.instance_norm(y, gamma, beta, cfg.norm_eps)?;
        Ok(g.leaky_relu(y, cfg.leaky_slope))
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    up_weight: ParamId,
    up_bias: ParamId,
    conv1: ConvNormAct,
    conv2: ConvNormAct,
}

/// Encoder and decoder feature maps. Index 0 is the finest scale.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    encoder: Vec<(ConvNormAct, ConvNormAct)>,
    decoder: Vec<DecoderBlock>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels();
        let mut encoder = Vec::with_capacity(cfg.num_blocks);
        let mut prev = cfg.in_channels;
        for (i, &c) in ch.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let a = ConvNormAct::new(store, rng, &format!("enc.{i}.conv0"), cfg, prev, c, stride);
            let b = ConvNormAct::new(store, rng, &format!("enc.{i}.conv1"), cfg, c, c, 1);
            encoder.push((a, b));
            prev = c;
        }
        let mut decoder = Vec::with_capacity(cfg.num_blocks - 1);
        for i in 0..cfg.num_blocks - 1 {
            let mut up_shape = vec![ch[i + 1], ch[i]];
            up_shape.extend(std::iter::repeat_n(2, cfg.spatial_rank));
            let up_fan = ch[i + 1];
            decoder.push(DecoderBlock {
                up_weight: store.add(
                    format!("dec.{i}.up.weight"),
                    kaiming_normal(rng, &up_shape, up_fan, 1.0),
                ),
                up_bias: store.add(format!("dec.{i}.up.bias"), Tensor::zeros(&[ch[i]])),
                conv1: ConvNormAct::new(store, rng, &format!("dec.{i}.conv0"), cfg, 2 * ch[i], ch[i], 1),
                conv2: ConvNormAct::new(store, rng, &format!("dec.{i}.conv1"), cfg, ch[i], ch[i], 1),
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Encoder maps `f_E^1..f_E^N`, halving resolution after the first block.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Vec<Var>> {
        let shape = g.value(image).shape().to_vec();
        if shape.len() != self.cfg.spatial_rank + 2 || shape[1] != self.cfg.in_channels {
            return Err(Error::Dimension(format!(
                "input {shape:?} does not match {} channels with spatial rank {}",
                self.cfg.in_channels, self.cfg.spatial_rank
            )));
        }
        self.cfg.check_spatial(&shape[2..])?;
        let mut maps = Vec::with_capacity(self.encoder.len());
        let mut x = image;
        for (a, b) in &self.encoder {
            x = a.forward(g, store, x, &self.cfg)?;
            x = b.forward(g, store, x, &self.cfg)?;
            maps.push(x);
        }
        Ok(maps)
    }

    /// Decoder maps `f_D^1..f_D^{N-1}` aligned with the encoder resolutions.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, encoder: &[Var]) -> Result<Vec<Var>> {
        if encoder.len() != self.cfg.num_blocks {
            return Err(Error::shape(format!(
                "expected {} encoder maps, got {}",
                self.cfg.num_blocks,
                encoder.len()
            )));
        }
        let mut out = vec![encoder[0]; self.decoder.len()];
        let mut x = *encoder.last().expect("nonempty");
        for i in (0..self.decoder.len()).rev() {
            let blk = &self.decoder[i];
            let w = g.param(store, blk.up_weight);
            let b = g.param(store, blk.up_bias);
            let up = g.conv_transpose(x, w, b)?;
            let cat = g.concat(&[encoder[i], up])?;
            x = blk.conv1.forward(g, store, cat, &self.cfg)?;
            x = blk.conv2.forward(g, store, x, &self.cfg)?;
            out[i] = x;
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<MultiScaleFeatures> {
        let encoder = self.encode(g, store, image)?;
        let decoder = self.decode(g, store, &encoder)?;
        Ok(MultiScaleFeatures { encoder, decoder })
    }
}

/// Zero-pad `[c, spatial..]` symmetrically to `target`; returns the padded
/// tensor and the per-axis leading offsets.
pub fn pad_symmetric(image: &Tensor, target: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let spatial = &image.shape()[1..];
    if spatial.len() != target.len() || spatial.iter().zip(target).any(|(s, t)| s > t) {
        return Err(Error::shape(format!("cannot pad {spatial:?} to {target:?}")));
    }
    let offsets: Vec<usize> = spatial.iter().zip(target).map(|(s, t)| (t - s) / 2).collect();
    let c = image.shape()[0];
    let mut shape = vec![c];
    shape.extend_from_slice(target);
    let mut out = Tensor::zeros(&shape);
    let src_vol: usize = spatial.iter().product();
    let dst_vol: usize = target.iter().product();
    let mut idx = vec![0usize; spatial.len()];
    for i in 0..src_vol {
        let mut rem = i;
        for a in (0..spatial.len()).rev() {
            idx[a] = rem % spatial[a];
            rem /= spatial[a];
        }
        let mut j = 0;
        for a in 0..spatial.len() {
            j = j * target[a] + idx[a] + offsets[a];
        }
        for ch in 0..c {
            out.data_mut()[ch * dst_vol + j] = image.data()[ch * src_vol + i];
        }
    }
    Ok((out, offsets))
}

/// Inverse of [`pad_symmetric`] for a single-channel map of `extent` values.
pub fn crop<T: Copy>(values: &[T], extent: &[usize], offsets: &[usize], target: &[usize]) -> Vec<T> {
    let vol: usize = target.iter().product();
    let mut out = Vec::with_capacity(vol);
    let mut idx = vec![0usize; target.len()];
    for i in 0..vol {
        let mut rem = i;
        for a in (0..target.len()).rev() {
            idx[a] = rem % target[a];
            rem /= target[a];
        }
        let mut j = 0;
        for a in 0..target.len() {
            j = j * extent[a] + idx[a] + offsets[a];
        }
        out.push(values[j]);
    }
    out
}
