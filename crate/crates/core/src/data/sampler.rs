//! Domain-balanced mini-batch sampling with augmentation and random patch
//! cropping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::DomainDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub patch: Vec<usize>,
    pub batch_size: usize,
    /// Every patch extent must be a multiple of this.
    pub divisor: usize,
    /// Reject images smaller than the patch instead of padding them.
    pub strict: bool,
    pub augment: AugmentConfig,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.patch.is_empty() || self.patch.contains(&0) {
            return Err(Error::config(format!("invalid patch size {:?}", self.patch)));
        }
        if self.divisor == 0 {
            return Err(Error::config("divisor must be positive"));
        }
        if let Some(&bad) = self.patch.iter().find(|&&p| p % self.divisor != 0) {
            return Err(Error::Dimension(format!(
                "patch extent {bad} is not divisible by {}",
                self.divisor
            )));
        }
        self.augment.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, channels, patch..]`.
    pub images: Tensor,
    pub labels: Vec<Vec<u8>>,
    /// Position of each element's domain within the sampler's dataset list.
    pub sources: Vec<usize>,
    pub domain_ids: Vec<usize>,
    pub case_ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// `[B, K]` one-hot source-domain labels.
    pub fn one_hot(&self, k: usize) -> Tensor {
        let mut t = Tensor::zeros(&[self.len(), k]);
        for (b, &s) in self.sources.iter().enumerate() {
            t.data_mut()[b * k + s] = 1.0;
        }
        t
    }
}

pub struct BatchSampler {
    datasets: Vec<DomainDataset>,
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(datasets: Vec<DomainDataset>, cfg: SamplerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if datasets.is_empty() || datasets.iter().any(DomainDataset::is_empty) {
            return Err(Error::invalid("every source domain needs at least one case"));
        }
        for ds in &datasets {
            for case in &ds.cases {
                if case.spatial().len() != cfg.patch.len() {
                    return Err(Error::shape(format!(
                        "case {} has spatial rank {}, patch has {}",
                        case.id,
                        case.spatial().len(),
                        cfg.patch.len()
                    )));
                }
                if cfg.strict && case.spatial().iter().zip(&cfg.patch).any(|(s, p)| s < p) {
                    return Err(Error::Dimension(format!(
                        "patch {:?} larger than case {} of extent {:?}",
                        cfg.patch,
                        case.id,
                        case.spatial()
                    )));
                }
            }
        }
        Ok(Self {
            datasets,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn num_domains(&self) -> usize {
        self.datasets.len()
    }

    pub fn domain_ids(&self) -> Vec<usize> {
        self.datasets.iter().map(|d| d.domain_id).collect()
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Domains of the next batch: `B / K` per domain and the remainder spread
    /// over distinct random domains.
    fn domain_slots(&mut self) -> Vec<usize> {
        let k = self.datasets.len();
        let b = self.cfg.batch_size;
        let mut slots: Vec<usize> = (0..b / k * k).map(|i| i % k).collect();
        let mut extra: Vec<usize> = (0..k).collect();
        extra.shuffle(&mut self.rng);
        slots.extend(extra.into_iter().take(b % k));
        slots.shuffle(&mut self.rng);
        slots
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let slots = self.domain_slots();
        let mut images = Vec::with_capacity(slots.len());
        let mut labels = Vec::with_capacity(slots.len());
        let mut domain_ids = Vec::with_capacity(slots.len());
        let mut case_ids = Vec::with_capacity(slots.len());
        for &s in &slots {
            let ds = &self.datasets[s];
            let case = &ds.cases[self.rng.random_range(0..ds.cases.len())];
            let (img, lbl) = augment(&case.image, &case.label, &self.cfg.augment, &mut self.rng)?;
            let (img, lbl) = random_patch(&img, &lbl, &self.cfg.patch, &mut self.rng)?;
            images.push(img);
            labels.push(lbl);
            domain_ids.push(ds.domain_id);
            case_ids.push(case.id.clone());
        }
        Ok(Batch {
            images: Tensor::stack(&images)?,
            labels,
            sources: slots,
            domain_ids,
            case_ids,
        })
    }
}

/// Random crop of `patch` from `[c, spatial..]`. Axes shorter than the patch
/// are padded symmetrically with the image minimum and background label.
pub fn random_patch<R: Rng + ?Sized>(
    image: &Tensor,
    label: &[u8],
    patch: &[usize],
    rng: &mut R,
) -> Result<(Tensor, Vec<u8>)> {
    let spatial = &image.shape()[1..];
    if spatial.len() != patch.len() {
        return Err(Error::shape(format!("patch {patch:?} vs image {spatial:?}")));
    }
    let channels = image.shape()[0];
    let rank = patch.len();
    let extent: Vec<usize> = spatial.iter().zip(patch).map(|(&s, &p)| s.max(p)).collect();
    let pad: Vec<usize> = spatial.iter().zip(&extent).map(|(&s, &e)| (e - s) / 2).collect();
    let start: Vec<usize> = extent
        .iter()
        .zip(patch)
        .map(|(&e, &p)| rng.random_range(0..=e - p))
        .collect();
    let vol_in: usize = spatial.iter().product();
    let vol_out: usize = patch.iter().product();
    let mut out_shape = vec![channels];
    out_shape.extend_from_slice(patch);
    let fills: Vec<f32> = (0..channels)
        .map(|c| {
            image.data()[c * vol_in..(c + 1) * vol_in]
                .iter()
                .copied()
                .fold(f32::INFINITY, f32::min)
        })
        .collect();
    let mut img = Tensor::zeros(&out_shape);
    let mut lbl = vec![0u8; vol_out];
    let mut idx = vec![0usize; rank];
    for o in 0..vol_out {
        let mut rem = o;
        for a in (0..rank).rev() {
            idx[a] = rem % patch[a];
            rem /= patch[a];
        }
        let mut src = Some(0usize);
        for a in 0..rank {
            let e = idx[a] + start[a];
            src = match (src, e.checked_sub(pad[a])) {
                (Some(j), Some(p)) if p < spatial[a] => Some(j * spatial[a] + p),
                _ => None,
            };
        }
        for c in 0..channels {
            img.data_mut()[c * vol_out + o] = match src {
                Some(j) => image.data()[c * vol_in + j],
                None => fills[c],
            };
        }
        lbl[o] = src.map_or(0, |j| label[j]);
    }
    Ok((img, lbl))
}
