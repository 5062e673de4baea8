use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::trainer::StepRecord;

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 30;

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn polyline(img: &mut RgbImage, ys: &[f64], lo: f64, hi: f64, c: Rgb<u8>) {
    let n = ys.len().max(2) - 1;
    let span = (hi - lo).max(1e-12);
    let pts: Vec<(i64, i64)> = ys
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let x = MARGIN as f64 + (W - 2 * MARGIN) as f64 * i as f64 / n as f64;
            let y = (H - MARGIN) as f64 - (H - 2 * MARGIN) as f64 * (v - lo) / span;
            (x.round() as i64, y.round() as i64)
        })
        .collect();
    for w in pts.windows(2) {
        line(img, w[0], w[1], c);
    }
}

/// Total, segmentation and classification losses per step on a log10 axis.
pub fn loss_curve(log: &[StepRecord], path: &Path) -> Result<()> {
    if log.is_empty() {
        return Err(Error::invalid("training log is empty"));
    }
    let l10 = |v: f64| v.max(1e-8).log10();
    let total: Vec<f64> = log.iter().map(|r| l10(r.total)).collect();
    let seg: Vec<f64> = log.iter().map(|r| l10(r.l_seg.iter().sum())).collect();
    let cls: Option<Vec<f64>> = log.iter().map(|r| r.l_cls.map(l10)).collect();
    let all = total.iter().chain(&seg).chain(cls.iter().flatten());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (l, r, t, b) = (MARGIN as i64, (W - MARGIN) as i64, MARGIN as i64, (H - MARGIN) as i64);
    line(&mut img, (l, b), (r, b), axis);
    line(&mut img, (l, t), (l, b), axis);
    polyline(&mut img, &seg, lo, hi, Rgb([31, 119, 180]));
    if let Some(cls) = &cls {
        polyline(&mut img, cls, lo, hi, Rgb([214, 39, 40]));
    }
    polyline(&mut img, &total, lo, hi, axis);
    img.save(path)?;
    Ok(())
}

/// Row-normalized matrix as a white-to-blue heat map.
pub fn matrix(m: &[Vec<f64>], path: &Path) -> Result<()> {
    let n = m.len();
    if n == 0 || m.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("matrix must be square and non-empty"));
    }
    let cell = 64u32;
    let mut img = RgbImage::new(cell * n as u32, cell * n as u32);
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let v = v.clamp(0.0, 1.0);
            let c = Rgb([(255.0 * (1.0 - v)) as u8, (255.0 * (1.0 - 0.6 * v)) as u8, 255]);
            for y in 0..cell {
                for x in 0..cell {
                    let edge = x == 0 || y == 0;
                    img.put_pixel(j as u32 * cell + x, i as u32 * cell + y, if edge { Rgb([128, 128, 128]) } else { c });
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}
