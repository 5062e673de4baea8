//! Overlap and surface-distance metrics on label masks of rank 1 to 3.

use crate::error::{Error, Result};
use crate::tensor::spatial3;

/// Dice similarity in percent between the voxels equal to `class` in each
/// mask. Two empty masks score 100.
pub fn dsc(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("mask lengths {} and {}", pred.len(), gt.len())));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (x, y) = (a == class, b == class);
        p += x as usize;
        g += y as usize;
        both += (x && y) as usize;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (p + g) as f64)
}

/// Foreground voxels with at least one background face neighbour. Voxels on
/// the image border count as boundary.
pub fn boundary(mask: &[bool], spatial: &[usize]) -> Vec<usize> {
    let dims = spatial3(spatial);
    let active: Vec<usize> = (3 - spatial.len()..3).collect();
    let mut out = Vec::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = (z * dims[1] + y) * dims[2] + x;
                if !mask[i] {
                    continue;
                }
                let p = [z, y, x];
                let edge = active.iter().any(|&a| {
                    let mut lo = p;
                    let mut hi = p;
                    if p[a] == 0 || p[a] + 1 == dims[a] {
                        return true;
                    }
                    lo[a] -= 1;
                    hi[a] += 1;
                    let at = |q: [usize; 3]| mask[(q[0] * dims[1] + q[1]) * dims[2] + q[2]];
                    !at(lo) || !at(hi)
                });
                if edge {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// Exact squared Euclidean distance transform along one line
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut first = f.iter().position(|x| x.is_finite());
    let Some(start) = first.take() else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = start;
    for q in start + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every voxel to the nearest voxel in `sites`.
pub fn squared_distance_field(sites: &[usize], spatial: &[usize]) -> Vec<f64> {
    let dims = spatial3(spatial);
    let vol = dims[0] * dims[1] * dims[2];
    let mut field = vec![f64::INFINITY; vol];
    for &s in sites {
        field[s] = 0.0;
    }
    let longest = dims.iter().copied().max().unwrap_or(1);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    for axis in 0..3 {
        let n = dims[axis];
        if n == 1 {
            continue;
        }
        let stride = match axis {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        };
        for start in 0..vol {
            // Visit each line once, from its first voxel.
            let coord = (start / stride) % n;
            if coord != 0 {
                continue;
            }
            for i in 0..n {
                line[i] = field[start + i * stride];
            }
            edt_1d(&line[..n], &mut out[..n], &mut v[..n], &mut z[..n + 1]);
            for i in 0..n {
                field[start + i * stride] = out[i];
            }
        }
    }
    field
}

/// Symmetric average surface distance in voxels between the `class` regions
/// of two masks. `None` when either region is empty.
pub fn asd(pred: &[u8], gt: &[u8], spatial: &[usize], class: u8) -> Result<Option<f64>> {
    let vol: usize = spatial.iter().product();
    if pred.len() != vol || gt.len() != vol {
        return Err(Error::shape(format!(
            "masks of length {} and {} for extent {spatial:?}",
            pred.len(),
            gt.len()
        )));
    }
    let pm: Vec<bool> = pred.iter().map(|&v| v == class).collect();
    let gm: Vec<bool> = gt.iter().map(|&v| v == class).collect();
    let bp = boundary(&pm, spatial);
    let bg = boundary(&gm, spatial);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let dg = squared_distance_field(&bg, spatial);
    let dp = squared_distance_field(&bp, spatial);
    let mean = |from: &[usize], field: &[f64]| from.iter().map(|&i| field[i].sqrt()).sum::<f64>() / from.len() as f64;
    Ok(Some(0.5 * (mean(&bp, &dg) + mean(&bg, &dp))))
}
