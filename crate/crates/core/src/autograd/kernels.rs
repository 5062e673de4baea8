//! Numeric kernels behind the graph ops: GEMM, im2col convolution, strided
//! transposed convolution and instance normalization.

use crate::tensor::spatial3;

/// `c = op(a) * op(b) + beta * c` for row-major matrices, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a dense convolution with symmetric zero padding, expressed on
/// three spatial axes (leading axes are singletons for 1D/2D inputs).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(cin: usize, spatial: &[usize], kernel: usize, stride: usize) -> Self {
        let input = spatial3(spatial);
        let rank = spatial.len();
        let mut k = [1; 3];
        let mut s = [1; 3];
        let mut p = [0; 3];
        for axis in 3 - rank..3 {
            k[axis] = kernel;
            s[axis] = stride;
            p[axis] = kernel / 2;
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = (input[a] + 2 * p[a] - k[a]) / s[a] + 1;
        }
        Self {
            cin,
            input,
            kernel: k,
            stride: s,
            pad: p,
            output,
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kernel_volume()
    }

    /// A 1x1 stride-1 convolution reads its input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel_volume() == 1 && self.stride == [1, 1, 1]
    }

    /// Shape of the output spatial axes with the original rank.
    pub fn output_spatial(&self, rank: usize) -> Vec<usize> {
        self.output[3 - rank..].to_vec()
    }
}

/// Unfold one sample `[cin, d, h, w]` into `[cin * kvol, out_vol]`.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let out_vol = od * oh * ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * out_vol..(row + 1) * out_vol];
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        let zrow = &mut dst[oz * oh * ow..(oz + 1) * oh * ow];
                        if iz < 0 || iz >= id as isize {
                            zrow.fill(0.0);
                            continue;
                        }
                        let iz = iz as usize;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let line = &mut zrow[oy * ow..(oy + 1) * ow];
                            if iy < 0 || iy >= ih as isize {
                                line.fill(0.0);
                                continue;
                            }
                            let src = &xc[(iz * ih + iy as usize) * iw..][..iw];
                            for (ox, v) in line.iter_mut().enumerate() {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                *v = if ix < 0 || ix >= iw as isize {
                                    0.0
                                } else {
                                    src[ix as usize]
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `[cin * kvol, out_vol]` back into `dx`.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let out_vol = od * oh * ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * out_vol..(row + 1) * out_vol];
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        let iz = iz as usize;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let line = &src[(oz * oh + oy) * ow..][..ow];
                            let dst = &mut xc[(iz * ih + iy as usize) * iw..][..iw];
                            for (ox, v) in line.iter().enumerate() {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < iw as isize {
                                    dst[ix as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward convolution over a batch. `w` is `[cout, cin * kvol]`.
pub(crate) fn conv_forward(
    x: &[f32],
    batch: usize,
    g: &ConvGeom,
    w: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
) -> Vec<f32> {
    let in_per = g.cin * g.in_volume();
    let out_vol = g.out_volume();
    let rows = g.col_rows();
    let mut out = vec![0.0; batch * cout * out_vol];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * out_vol]
    };
    for b in 0..batch {
        let xs = &x[b * in_per..(b + 1) * in_per];
        let ys = &mut out[b * cout * out_vol..(b + 1) * cout * out_vol];
        let colref: &[f32] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(cout, rows, out_vol, w, false, colref, false, ys, 0.0);
        if let Some(bias) = bias {
            for (co, bv) in bias.iter().enumerate() {
                for v in &mut ys[co * out_vol..(co + 1) * out_vol] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution. Returns `(dx, dw, db)`; `dx` only when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f32],
    batch: usize,
    g: &ConvGeom,
    w: &[f32],
    cout: usize,
    dy: &[f32],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>) {
    let in_per = g.cin * g.in_volume();
    let out_vol = g.out_volume();
    let rows = g.col_rows();
    let mut dx = want_dx.then(|| vec![0.0; batch * in_per]);
    let mut dw = want_dw.then(|| vec![0.0; cout * rows]);
    let mut db = vec![0.0; cout];
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { rows * out_vol }];
    let mut dcols = vec![0.0; if want_dx { rows * out_vol } else { 0 }];
    for b in 0..batch {
        let dys = &dy[b * cout * out_vol..(b + 1) * cout * out_vol];
        for co in 0..cout {
            db[co] += dys[co * out_vol..(co + 1) * out_vol].iter().sum::<f32>();
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x[b * in_per..(b + 1) * in_per];
            let colref: &[f32] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            gemm(cout, out_vol, rows, dys, false, colref, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[b * in_per..(b + 1) * in_per];
            if g.is_pointwise() {
                gemm(rows, cout, out_vol, w, true, dys, false, dxs, 0.0);
            } else {
                gemm(rows, cout, out_vol, w, true, dys, false, &mut dcols, 0.0);
                col2im(&dcols, g, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Geometry of a transposed convolution whose kernel equals its stride, so
/// output windows never overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct UpGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub factor: [usize; 3],
}

impl UpGeom {
    pub fn new(cin: usize, cout: usize, spatial: &[usize], factor: usize) -> Self {
        let rank = spatial.len();
        let mut f = [1; 3];
        for a in f.iter_mut().skip(3 - rank) {
            *a = factor;
        }
        Self {
            cin,
            cout,
            input: spatial3(spatial),
            factor: f,
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.factor.iter().product()
    }

    pub fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output(&self) -> [usize; 3] {
        [
            self.input[0] * self.factor[0],
            self.input[1] * self.factor[1],
            self.input[2] * self.factor[2],
        ]
    }

    pub fn out_volume(&self) -> usize {
        self.output().iter().product()
    }

    /// Visit every (column row, input position, output offset) triple.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [id, ih, iw] = self.input;
        let [fd, fh, fw] = self.factor;
        let [_, oh, ow] = self.output();
        let kvol = self.kernel_volume();
        let out_vol = self.out_volume();
        for co in 0..self.cout {
            for kz in 0..fd {
                for ky in 0..fh {
                    for kx in 0..fw {
                        let row = co * kvol + (kz * fh + ky) * fw + kx;
                        for z in 0..id {
                            for y in 0..ih {
                                for x in 0..iw {
                                    let pos = (z * ih + y) * iw + x;
                                    let o = ((z * fd + kz) * oh + y * fh + ky) * ow + x * fw + kx;
                                    f(row, pos, co * out_vol + o);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `w` is `[cin, cout * kvol]`.
pub(crate) fn up_forward(x: &[f32], batch: usize, g: &UpGeom, w: &[f32], bias: &[f32]) -> Vec<f32> {
    let in_per = g.cin * g.in_volume();
    let out_per = g.cout * g.out_volume();
    let rows = g.cout * g.kernel_volume();
    let in_vol = g.in_volume();
    let mut out = vec![0.0; batch * out_per];
    let mut cols = vec![0.0; rows * in_vol];
    for b in 0..batch {
        let xs = &x[b * in_per..(b + 1) * in_per];
        gemm(rows, g.cin, in_vol, w, true, xs, false, &mut cols, 0.0);
        let ys = &mut out[b * out_per..(b + 1) * out_per];
        let kvol = g.kernel_volume();
        g.for_each(|row, pos, o| ys[o] = cols[row * in_vol + pos] + bias[row / kvol]);
    }
    out
}

pub(crate) fn up_backward(
    x: &[f32],
    batch: usize,
    g: &UpGeom,
    w: &[f32],
    dy: &[f32],
    want_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let in_per = g.cin * g.in_volume();
    let out_per = g.cout * g.out_volume();
    let rows = g.cout * g.kernel_volume();
    let in_vol = g.in_volume();
    let out_vol = g.out_volume();
    let mut dx = want_dx.then(|| vec![0.0; batch * in_per]);
    let mut dw = vec![0.0; g.cin * rows];
    let mut db = vec![0.0; g.cout];
    let mut dcols = vec![0.0; rows * in_vol];
    for b in 0..batch {
        let dys = &dy[b * out_per..(b + 1) * out_per];
        for co in 0..g.cout {
            db[co] += dys[co * out_vol..(co + 1) * out_vol].iter().sum::<f32>();
        }
        g.for_each(|row, pos, o| dcols[row * in_vol + pos] = dys[o]);
        let xs = &x[b * in_per..(b + 1) * in_per];
        gemm(g.cin, in_vol, rows, xs, false, &dcols, true, &mut dw, 1.0);
        if let Some(dx) = dx.as_mut() {
            gemm(
                g.cin,
                rows,
                in_vol,
                w,
                false,
                &dcols,
                false,
                &mut dx[b * in_per..(b + 1) * in_per],
                0.0,
            );
        }
    }
    (dx, dw, db)
}

/// Per-sample, per-channel normalization statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub(crate) fn instance_norm_forward(
    x: &[f32],
    batch: usize,
    channels: usize,
    vol: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, NormCache) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; batch * channels];
    for b in 0..batch {
        for c in 0..channels {
            let idx = b * channels + c;
            let xs = &x[idx * vol..(idx + 1) * vol];
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / vol as f64;
            let var = xs
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / vol as f64;
            let istd = 1.0 / (var + eps as f64).sqrt();
            inv_std[idx] = istd as f32;
            let (g, bt) = (gamma[c], beta[c]);
            for i in 0..vol {
                let h = ((xs[i] as f64 - mean) * istd) as f32;
                xhat[idx * vol + i] = h;
                y[idx * vol + i] = g * h + bt;
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn instance_norm_backward(
    dy: &[f32],
    cache: &NormCache,
    batch: usize,
    channels: usize,
    vol: usize,
    gamma: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    let n = vol as f64;
    for b in 0..batch {
        for c in 0..channels {
            let idx = b * channels + c;
            let dys = &dy[idx * vol..(idx + 1) * vol];
            let xh = &cache.xhat[idx * vol..(idx + 1) * vol];
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xh = 0.0f64;
            for (d, h) in dys.iter().zip(xh) {
                sum_dy += *d as f64;
                sum_dy_xh += (*d as f64) * (*h as f64);
            }
            dgamma[c] += sum_dy_xh as f32;
            dbeta[c] += sum_dy as f32;
            let g = gamma[c] as f64;
            let k = g * cache.inv_std[idx] as f64 / n;
            for i in 0..vol {
                let v = n * dys[i] as f64 - sum_dy - xh[i] as f64 * sum_dy_xh;
                dx[idx * vol + i] = (k * v) as f32;
            }
        }
    }
    (dx, dgamma, dbeta)
}
