//! Paired image/label augmentation. Geometric transforms are composed into one
//! coordinate map; the image is resampled linearly and the label by nearest
//! neighbour so label values never change.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{spatial3, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Random translation of the field of view, up to `max_shift` of the extent.
    pub p_crop: f64,
    pub max_shift: f64,
    /// In-plane rotation, angle uniform in `[-max_angle, max_angle]` degrees.
    pub p_rotate: f64,
    pub max_angle: f64,
    /// Isotropic zoom with factor uniform in `scale_range`.
    pub p_scale: f64,
    pub scale_range: (f64, f64),
    /// Per-axis mirroring probability.
    pub p_flip: f64,
    /// Additive Gaussian noise on the image, sigma uniform in `[0, noise_sigma]`.
    pub p_noise: f64,
    pub noise_sigma: f64,
    /// Smooth displacement field from a coarse grid of `elastic_grid` nodes per
    /// axis with node displacements `N(0, elastic_magnitude^2)` voxels.
    pub p_elastic: f64,
    pub elastic_magnitude: f64,
    pub elastic_grid: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_crop: 0.3,
            max_shift: 0.1,
            p_rotate: 0.2,
            max_angle: 15.0,
            p_scale: 0.2,
            scale_range: (0.85, 1.15),
            p_flip: 0.5,
            p_noise: 0.1,
            noise_sigma: 0.1,
            p_elastic: 0.1,
            elastic_magnitude: 2.0,
            elastic_grid: 5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            p_crop: 0.0,
            p_rotate: 0.0,
            p_scale: 0.0,
            p_flip: 0.0,
            p_noise: 0.0,
            p_elastic: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_crop,
            self.p_rotate,
            self.p_scale,
            self.p_flip,
            self.p_noise,
            self.p_elastic,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("augmentation probabilities must lie in [0, 1]"));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.0 > self.scale_range.1 {
            return Err(Error::config("scale range must be positive and ordered"));
        }
        if self.elastic_grid < 2 {
            return Err(Error::config("elastic grid needs at least two nodes per axis"));
        }
        Ok(())
    }
}

/// Apply a random subset of the configured transforms to `image`
/// (`[channels, spatial..]`) and its `label`.
pub fn augment<R: Rng + ?Sized>(
    image: &Tensor,
    label: &[u8],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor, Vec<u8>)> {
    cfg.validate()?;
    if image.rank() < 2 {
        return Err(Error::shape(format!("augment needs [c, spatial..], got {:?}", image.shape())));
    }
    let spatial = image.shape()[1..].to_vec();
    let vol: usize = spatial.iter().product();
    if vol != label.len() {
        return Err(Error::shape(format!("label length {} vs image volume {vol}", label.len())));
    }
    let dims = spatial3(&spatial);
    // Axes of the padded (d, h, w) triple that exist in the input.
    let active: Vec<usize> = (3 - spatial.len()..3).collect();
    let center: [f64; 3] = [0, 1, 2].map(|a| (dims[a] as f64 - 1.0) / 2.0);

    let mut shift = [0.0f64; 3];
    let mut rotation = None;
    let mut zoom = None;
    let mut elastic = None;
    if rng.random_bool(cfg.p_crop) {
        for &a in &active {
            let m = (cfg.max_shift * dims[a] as f64).floor() as i64;
            shift[a] = rng.random_range(-m..=m) as f64;
        }
    }
    if spatial.len() >= 2 && rng.random_bool(cfg.p_rotate) {
        let deg = rng.random_range(-cfg.max_angle..=cfg.max_angle);
        rotation = Some(deg.to_radians());
    }
    if rng.random_bool(cfg.p_scale) {
        zoom = Some(rng.random_range(cfg.scale_range.0..=cfg.scale_range.1));
    }
    if rng.random_bool(cfg.p_elastic) {
        elastic = Some(ElasticField::new(dims, &active, cfg.elastic_grid, cfg.elastic_magnitude, rng));
    }

    let geometric = shift.iter().any(|&s| s != 0.0) || rotation.is_some() || zoom.is_some() || elastic.is_some();
    let (mut img, mut lbl) = if geometric {
        let mut coords = Vec::with_capacity(vol);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let p = [z as f64, y as f64, x as f64];
                    let mut q = p;
                    if let Some(f) = &elastic {
                        let d = f.at(z, y, x);
                        for a in 0..3 {
                            q[a] += d[a];
                        }
                    }
                    if let Some(s) = zoom {
                        for &a in &active {
                            q[a] = (q[a] - center[a]) / s + center[a];
                        }
                    }
                    if let Some(theta) = rotation {
                        let (s, c) = theta.sin_cos();
                        let dy = q[1] - center[1];
                        let dx = q[2] - center[2];
                        q[1] = c * dy - s * dx + center[1];
                        q[2] = s * dy + c * dx + center[2];
                    }
                    for a in 0..3 {
                        q[a] += shift[a];
                    }
                    coords.push(q);
                }
            }
        }
        (resample_linear(image, dims, &coords), resample_nearest(label, dims, &coords))
    } else {
        (image.clone(), label.to_vec())
    };

    for &a in &active {
        if rng.random_bool(cfg.p_flip) {
            flip(&mut img, &mut lbl, dims, a);
        }
    }

    if rng.random_bool(cfg.p_noise) {
        let sigma = rng.random_range(0.0..=cfg.noise_sigma);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
            for v in img.data_mut() {
                *v += normal.sample(rng) as f32;
            }
        }
    }
    Ok((img, lbl))
}

/// Mirror image and label along padded axis `axis` (0 = d, 1 = h, 2 = w).
pub fn flip(image: &mut Tensor, label: &mut [u8], dims: [usize; 3], axis: usize) {
    let vol = dims[0] * dims[1] * dims[2];
    let channels = image.numel() / vol;
    let src_index = |z: usize, y: usize, x: usize| {
        let mut p = [z, y, x];
        p[axis] = dims[axis] - 1 - p[axis];
        (p[0] * dims[1] + p[1]) * dims[2] + p[2]
    };
    let mut perm = Vec::with_capacity(vol);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                perm.push(src_index(z, y, x));
            }
        }
    }
    let old_label = label.to_vec();
    for (i, &j) in perm.iter().enumerate() {
        label[i] = old_label[j];
    }
    for c in 0..channels {
        let plane = &mut image.data_mut()[c * vol..(c + 1) * vol];
        let old = plane.to_vec();
        for (i, &j) in perm.iter().enumerate() {
            plane[i] = old[j];
        }
    }
}

fn inside(q: &[f64; 3], dims: [usize; 3]) -> bool {
    (0..3).all(|a| q[a] >= -1e-9 && q[a] <= dims[a] as f64 - 1.0 + 1e-9)
}

fn resample_linear(image: &Tensor, dims: [usize; 3], coords: &[[f64; 3]]) -> Tensor {
    let vol = dims[0] * dims[1] * dims[2];
    let channels = image.numel() / vol;
    let mut out = Tensor::zeros(image.shape());
    for c in 0..channels {
        let src = &image.data()[c * vol..(c + 1) * vol];
        let fill = src.iter().copied().fold(f32::INFINITY, f32::min);
        let dst = &mut out.data_mut()[c * vol..(c + 1) * vol];
        for (i, q) in coords.iter().enumerate() {
            if !inside(q, dims) {
                dst[i] = fill;
                continue;
            }
            let mut lo = [0usize; 3];
            let mut frac = [0.0f64; 3];
            for a in 0..3 {
                let v = q[a].clamp(0.0, dims[a] as f64 - 1.0);
                lo[a] = (v.floor() as usize).min(dims[a] - 1);
                frac[a] = v - lo[a] as f64;
            }
            let mut acc = 0.0f64;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut idx = [0usize; 3];
                for a in 0..3 {
                    let up = (corner >> (2 - a)) & 1 == 1;
                    w *= if up { frac[a] } else { 1.0 - frac[a] };
                    idx[a] = if up { (lo[a] + 1).min(dims[a] - 1) } else { lo[a] };
                }
                if w != 0.0 {
                    acc += w * src[(idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]] as f64;
                }
            }
            dst[i] = acc as f32;
        }
    }
    out
}

fn resample_nearest(label: &[u8], dims: [usize; 3], coords: &[[f64; 3]]) -> Vec<u8> {
    coords
        .iter()
        .map(|q| {
            if !inside(q, dims) {
                return 0;
            }
            let idx: [usize; 3] = [0, 1, 2].map(|a| (q[a].round().max(0.0) as usize).min(dims[a] - 1));
            label[(idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]]
        })
        .collect()
}

/// Displacement field interpolated from a coarse grid with Catmull-Rom
/// splines along each axis.
struct ElasticField {
    dims: [usize; 3],
    grid: [usize; 3],
    /// Node displacements per axis, `[axis][node]`.
    nodes: [Vec<f64>; 3],
}

impl ElasticField {
    fn new<R: Rng + ?Sized>(dims: [usize; 3], active: &[usize], grid: usize, magnitude: f64, rng: &mut R) -> Self {
        let g: [usize; 3] = [0, 1, 2].map(|a| if active.contains(&a) { grid } else { 1 });
        let n = g[0] * g[1] * g[2];
        let nodes = [0, 1, 2].map(|a| {
            (0..n)
                .map(|_| {
                    if active.contains(&a) {
                        let s: f64 = StandardNormal.sample(rng);
                        s * magnitude
                    } else {
                        0.0
                    }
                })
                .collect()
        });
        Self { dims, grid: g, nodes }
    }

    fn weights(&self, axis: usize, pos: usize) -> [(usize, f64); 4] {
        let g = self.grid[axis];
        if g == 1 {
            return [(0, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)];
        }
        let n = self.dims[axis];
        let u = if n > 1 {
            pos as f64 * (g - 1) as f64 / (n - 1) as f64
        } else {
            0.0
        };
        let i = (u.floor() as usize).min(g - 2);
        let t = u - i as f64;
        let (t2, t3) = (t * t, t * t * t);
        let w = [
            -0.5 * t3 + t2 - 0.5 * t,
            1.5 * t3 - 2.5 * t2 + 1.0,
            -1.5 * t3 + 2.0 * t2 + 0.5 * t,
            0.5 * t3 - 0.5 * t2,
        ];
        let clamp = |k: isize| k.clamp(0, g as isize - 1) as usize;
        let base = i as isize;
        [
            (clamp(base - 1), w[0]),
            (clamp(base), w[1]),
            (clamp(base + 1), w[2]),
            (clamp(base + 2), w[3]),
        ]
    }

    fn at(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        let wz = self.weights(0, z);
        let wy = self.weights(1, y);
        let wx = self.weights(2, x);
        let mut out = [0.0; 3];
        for &(iz, az) in &wz {
            for &(iy, ay) in &wy {
                for &(ix, ax) in &wx {
                    let w = az * ay * ax;
                    if w == 0.0 {
                        continue;
                    }
                    let j = (iz * self.grid[1] + iy) * self.grid[2] + ix;
                    for (a, o) in out.iter_mut().enumerate() {
                        *o += w * self.nodes[a][j];
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_case(seed: u64, spatial: &[usize]) -> (Tensor, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vol: usize = spatial.iter().product();
        let mut shape = vec![1];
        shape.extend_from_slice(spatial);
        let img = Tensor::from_vec(&shape, (0..vol).map(|_| rng.random::<f32>()).collect()).unwrap();
        let lbl = (0..vol).map(|_| rng.random_range(0..3u8)).collect();
        (img, lbl)
    }

    #[test]
    fn zero_probabilities_is_identity() {
        let (img, lbl) = sample_case(0, &[12, 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = augment(&img, &lbl, &AugmentConfig::none(), &mut rng).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, lbl);
    }

    #[test]
    fn double_flip_is_identity() {
        let (img, lbl) = sample_case(2, &[4, 6, 5]);
        for axis in 0..3 {
            let (mut a, mut b) = (img.clone(), lbl.clone());
            flip(&mut a, &mut b, [4, 6, 5], axis);
            assert_ne!(b, lbl);
            flip(&mut a, &mut b, [4, 6, 5], axis);
            assert_eq!(a, img);
            assert_eq!(b, lbl);
        }
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = Tensor::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (mut a, mut b) = (img, vec![0u8, 1, 2]);
        flip(&mut a, &mut b, [1, 1, 3], 2);
        assert_eq!(a.data(), &[3.0, 2.0, 1.0]);
        assert_eq!(b, vec![2, 1, 0]);
    }

    #[test]
    fn integer_shift_moves_content_exactly() {
        let (img, lbl) = sample_case(3, &[8, 8]);
        let cfg = AugmentConfig {
            p_crop: 1.0,
            max_shift: 0.25,
            ..AugmentConfig::none()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = augment(&img, &lbl, &cfg, &mut rng).unwrap();
        // Every kept label value must come from the original image at an
        // integer offset, so the image values inside are a subset.
        for (&v, &l) in a.data().iter().zip(&b) {
            let found = img.data().iter().zip(&lbl).any(|(&w, &m)| w == v && m == l);
            let fill = img.data().iter().copied().fold(f32::INFINITY, f32::min);
            assert!(found || (v == fill && l == 0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn labels_stay_in_class_set(seed in 0u64..1000, three_d in any::<bool>()) {
            let spatial: Vec<usize> = if three_d { vec![5, 9, 7] } else { vec![11, 13] };
            let (img, lbl) = sample_case(seed, &spatial);
            let cfg = AugmentConfig {
                p_crop: 1.0, p_rotate: 1.0, p_scale: 1.0, p_flip: 0.5, p_noise: 1.0, p_elastic: 1.0,
                ..AugmentConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let (a, b) = augment(&img, &lbl, &cfg, &mut rng).unwrap();
            prop_assert_eq!(a.shape(), img.shape());
            prop_assert_eq!(b.len(), lbl.len());
            prop_assert!(b.iter().all(|&v| v < 3));
            prop_assert!(a.is_finite());
        }
    }
}
