//! Synthetic multi-domain segmentation data. All domains share one shape
//! process (random ellipses on a textured background); domains differ only
//! in the intensity transform applied afterwards.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Case, DomainDataset};
use crate::error::{Error, Result};
use crate::tensor::{spatial3, Tensor};

/// Foreground fraction bounds enforced by the shape process.
pub const MIN_FOREGROUND: f64 = 0.05;
pub const MAX_FOREGROUND: f64 = 0.40;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub gamma: f64,
    pub bias_amplitude: f64,
    pub noise_sigma: f64,
    pub contrast: f64,
}

impl DomainTransform {
    /// Built-in transform for domain `k`.
    pub fn preset(k: usize) -> Self {
        const TABLE: [DomainTransform; 4] = [
            DomainTransform {
                gamma: 1.0,
                bias_amplitude: 0.0,
                noise_sigma: 0.02,
                contrast: 1.0,
            },
            DomainTransform {
                gamma: 0.5,
                bias_amplitude: 0.35,
                noise_sigma: 0.12,
                contrast: 0.8,
            },
            DomainTransform {
                gamma: 2.0,
                bias_amplitude: 0.15,
                noise_sigma: 0.05,
                contrast: 1.4,
            },
            DomainTransform {
                gamma: 1.4,
                bias_amplitude: 0.6,
                noise_sigma: 0.25,
                contrast: 0.6,
            },
        ];
        if k < TABLE.len() {
            return TABLE[k];
        }
        let j = k as f64;
        Self {
            gamma: 0.5 + 0.15 * ((k * 7) % 10) as f64,
            bias_amplitude: 0.05 * ((k * 3) % 10) as f64,
            noise_sigma: 0.02 + 0.01 * ((k * 5) % 12) as f64,
            contrast: 0.5 + 0.1 * (j % 10.0),
        }
    }

    /// Parameter-wise interpolation `(1 - t) a + t b`.
    pub fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let m = |x: f64, y: f64| (1.0 - t) * x + t * y;
        Self {
            gamma: m(a.gamma, b.gamma),
            bias_amplitude: m(a.bias_amplitude, b.bias_amplitude),
            noise_sigma: m(a.noise_sigma, b.noise_sigma),
            contrast: m(a.contrast, b.contrast),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.contrast > 0.0 && self.noise_sigma >= 0.0 && self.bias_amplitude >= 0.0) {
            return Err(Error::config(format!("invalid domain transform {self:?}")));
        }
        if self.bias_amplitude >= 1.0 {
            return Err(Error::config("bias amplitude must stay below 1"));
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, base: &[f64], dims: [usize; 3], rng: &mut R) -> Result<Vec<f32>> {
        let theta = rng.random_range(0.0..2.0 * PI);
        let curve = rng.random_range(-0.5..0.5);
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
        let mut out = Vec::with_capacity(base.len());
        let mut i = 0;
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let u = unit(z, dims[0]) * 0.5 + unit(y, dims[1]);
                    let v = unit(x, dims[2]);
                    let lin = theta.cos() * v + theta.sin() * u;
                    let field = (lin + curve * (u * u + v * v - 0.5)).clamp(-1.0, 1.0);
                    let mut val = base[i].clamp(1e-3, 1.0).powf(self.gamma);
                    val *= 1.0 + self.bias_amplitude * field;
                    val *= self.contrast;
                    if self.noise_sigma > 0.0 {
                        val += noise.sample(rng);
                    }
                    out.push(val as f32);
                    i += 1;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub seed: u64,
    pub shape: Vec<usize>,
    pub num_classes: usize,
    /// Per-domain transforms; domains beyond this list use the presets.
    pub transforms: Vec<DomainTransform>,
}

impl SyntheticDomainSpec {
    pub fn new(seed: u64, shape: Vec<usize>) -> Self {
        Self {
            seed,
            shape,
            num_classes: 2,
            transforms: Vec::new(),
        }
    }

    pub fn transform(&self, k: usize) -> DomainTransform {
        self.transforms.get(k).copied().unwrap_or_else(|| DomainTransform::preset(k))
    }

    fn validate(&self) -> Result<()> {
        if self.shape.is_empty() || self.shape.len() > 3 || self.shape.iter().any(|&s| s < 4) {
            return Err(Error::config(format!("synthetic shape {:?} must have 1..=3 axes of at least 4", self.shape)));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config("synthetic data needs 2..=255 classes"));
        }
        Ok(())
    }
}

fn unit(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Per-case generator stream: shape and intensity draws for one case are
/// independent of every other case.
fn case_rng(seed: u64, domain: usize, case: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 32) | case as u64);
    rng
}

struct Ellipse {
    center: [f64; 3],
    radii: [f64; 3],
    angle: f64,
    class: u8,
}

impl Ellipse {
    fn contains(&self, p: [f64; 3]) -> bool {
        let dz = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dx = p[2] - self.center[2];
        let (s, c) = self.angle.sin_cos();
        let ry = c * dy + s * dx;
        let rx = -s * dy + c * dx;
        (dz / self.radii[0]).powi(2) + (ry / self.radii[1]).powi(2) + (rx / self.radii[2]).powi(2) <= 1.0
    }
}

/// Base image in `[0, 1]` with its label, before any domain transform.
pub fn shape_sample<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], num_classes: usize) -> (Vec<f64>, Vec<u8>) {
    let dims = spatial3(shape);
    let active: Vec<usize> = (3 - shape.len()..3).collect();
    let vol = dims[0] * dims[1] * dims[2];
    let coords: Vec<[f64; 3]> = (0..vol)
        .map(|i| {
            let x = i % dims[2];
            let y = (i / dims[2]) % dims[1];
            let z = i / (dims[1] * dims[2]);
            [unit(z, dims[0]), unit(y, dims[1]), unit(x, dims[2])]
        })
        .collect();
    let fg_classes = num_classes - 1;
    let mut label = vec![0u8; vol];
    loop {
        let count = rng.random_range(fg_classes.max(1)..=fg_classes.max(2));
        let shapes: Vec<Ellipse> = (0..count)
            .map(|e| {
                let mut center = [0.0; 3];
                let mut radii = [f64::INFINITY; 3];
                for &a in &active {
                    center[a] = rng.random_range(-0.5..0.5);
                    radii[a] = rng.random_range(0.15..0.55);
                }
                Ellipse {
                    center,
                    radii,
                    angle: rng.random_range(0.0..PI),
                    class: (e % fg_classes + 1) as u8,
                }
            })
            .collect();
        for (l, p) in label.iter_mut().zip(&coords) {
            *l = shapes.iter().rev().find(|s| s.contains(*p)).map_or(0, |s| s.class);
        }
        let fg = label.iter().filter(|&&l| l > 0).count() as f64 / vol as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fg) {
            break;
        }
    }

    // Low-frequency texture shared by foreground and background.
    let waves: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let mut k = [0.0; 3];
            for &a in &active {
                k[a] = rng.random_range(-6.0..6.0);
            }
            (k, rng.random_range(0.0..2.0 * PI), rng.random_range(0.01..0.04))
        })
        .collect();
    let base = coords
        .iter()
        .zip(&label)
        .map(|(p, &l)| {
            let level = 0.25 + 0.45 * l as f64 / fg_classes as f64;
            let tex: f64 = waves
                .iter()
                .map(|(k, phase, amp)| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin())
                .sum();
            (level + tex).clamp(0.0, 1.0)
        })
        .collect();
    (base, label)
}

/// Generate the cases of one domain under an explicit transform.
pub fn generate_domain(
    spec: &SyntheticDomainSpec,
    domain_id: usize,
    transform: &DomainTransform,
    cases: usize,
) -> Result<DomainDataset> {
    spec.validate()?;
    transform.validate()?;
    let dims = spatial3(&spec.shape);
    let mut img_shape = vec![1];
    img_shape.extend_from_slice(&spec.shape);
    let mut out = Vec::with_capacity(cases);
    for i in 0..cases {
        let mut rng = case_rng(spec.seed, domain_id, i);
        let (base, label) = shape_sample(&mut rng, &spec.shape, spec.num_classes);
        let values = transform.apply(&base, dims, &mut rng)?;
        out.push(Case::new(format!("{i:04}"), Tensor::from_vec(&img_shape, values)?, label)?);
    }
    Ok(DomainDataset {
        domain_id,
        modality: "synthetic".into(),
        cases: out,
    })
}

pub fn generate_synthetic_domains(
    spec: &SyntheticDomainSpec,
    n_domains: usize,
    cases_per_domain: usize,
) -> Result<Vec<DomainDataset>> {
    if n_domains < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 domains for leave-one-domain-out, got {n_domains}"
        )));
    }
    let transforms: Vec<DomainTransform> = (0..n_domains).map(|k| spec.transform(k)).collect();
    for i in 0..n_domains {
        for j in 0..i {
            if transforms[i] == transforms[j] {
                return Err(Error::config(format!("domains {j} and {i} share one transform")));
            }
        }
    }
    (0..n_domains)
        .map(|k| generate_domain(spec, k, &transforms[k], cases_per_domain))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticDomainSpec::new(7, vec![24, 24]);
        let a = generate_synthetic_domains(&spec, 3, 4).unwrap();
        let b = generate_synthetic_domains(&spec, 3, 4).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_domains(&SyntheticDomainSpec::new(8, vec![24, 24]), 3, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn needs_three_domains() {
        let spec = SyntheticDomainSpec::new(0, vec![16, 16]);
        assert!(generate_synthetic_domains(&spec, 2, 1).is_err());
    }

    #[test]
    fn foreground_fraction_in_range() {
        for shape in [vec![32, 32], vec![8, 16, 16]] {
            let mut spec = SyntheticDomainSpec::new(1, shape);
            for classes in [2, 3] {
                spec.num_classes = classes;
                let ds = generate_domain(&spec, 0, &DomainTransform::preset(0), 100).unwrap();
                for case in &ds.cases {
                    let fg = case.label.iter().filter(|&&l| l > 0).count() as f64 / case.label.len() as f64;
                    assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fg), "{fg}");
                    assert!(case.label.iter().all(|&l| (l as usize) < classes));
                }
            }
        }
    }

    #[test]
    fn masks_shared_across_domains() {
        let spec = SyntheticDomainSpec::new(3, vec![16, 16]);
        let a = generate_domain(&spec, 0, &DomainTransform::preset(0), 5).unwrap();
        let b = generate_domain(&spec, 0, &DomainTransform::preset(2), 5).unwrap();
        for (x, y) in a.cases.iter().zip(&b.cases) {
            assert_eq!(x.label, y.label);
            assert_ne!(x.image, y.image);
        }
    }

    #[test]
    fn presets_are_distinct() {
        for i in 0..12 {
            for j in 0..i {
                assert_ne!(DomainTransform::preset(i), DomainTransform::preset(j));
            }
        }
    }
}
