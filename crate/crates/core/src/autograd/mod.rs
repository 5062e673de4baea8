//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op of one forward pass. Nodes that do not depend
//! on a trainable leaf carry no gradient, which is also how a gradient barrier
//! works: [`Graph::detach`] re-enters a value as a constant.

pub(crate) mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use kernels::{ConvGeom, NormCache, UpGeom};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Where a per-sample affine layer sits inside a flat filter vector: a
/// `cout x cin` row-major weight followed by `cout` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AffineSlot {
    pub offset: usize,
    pub cin: usize,
    pub cout: usize,
}

impl AffineSlot {
    pub fn len(&self) -> usize {
        self.cin * self.cout + self.cout
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn end(&self) -> usize {
        self.offset + self.len()
    }
}

enum Op {
    Constant,
    Leaf,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Up {
        x: Var,
        w: Var,
        b: Var,
        geom: UpGeom,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Concat {
        parts: Vec<Var>,
    },
    Gap {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    DynamicAffine {
        x: Var,
        filters: Var,
        slot: AffineSlot,
    },
    Add {
        a: Var,
        b: Var,
        sign: f32,
    },
    Scalar {
        input: Var,
        local_grad: Tensor,
    },
    WeightedSum {
        terms: Vec<(Var, f32)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records gradients for parameters and leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    /// A graph for inference: nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Node for a stored parameter; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Same value, no gradient path back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Dense convolution with "same" zero padding; kernel taken from `w`'s
    /// shape `[cout, cin, k, ..]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() < 3 || ws.len() != xs.len() || ws[1] != xs[1] {
            return Err(Error::shape(format!("conv input {xs:?} with weight {ws:?}")));
        }
        let k = ws[2];
        if ws[2..].iter().any(|&d| d != k) {
            return Err(Error::shape(format!("non-cubic kernel {ws:?}")));
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::shape("conv bias length"));
            }
        }
        let geom = ConvGeom::new(xs[1], &xs[2..], k, stride);
        let out = kernels::conv_forward(
            self.value(x).data(),
            xs[0],
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
        );
        let mut shape = vec![xs[0], cout];
        shape.extend(geom.output_spatial(xs.len() - 2));
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Conv { x, w, b, geom }, needs))
    }

    /// Transposed convolution with kernel = stride; `w` is `[cin, cout, f, ..]`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() < 3 || ws.len() != xs.len() || ws[0] != xs[1] {
            return Err(Error::shape(format!(
                "transposed conv input {xs:?} with weight {ws:?}"
            )));
        }
        let factor = ws[2];
        let geom = UpGeom::new(ws[0], ws[1], &xs[2..], factor);
        if self.value(b).numel() != ws[1] {
            return Err(Error::shape("transposed conv bias length"));
        }
        let out = kernels::up_forward(
            self.value(x).data(),
            xs[0],
            &geom,
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut shape = vec![xs[0], ws[1]];
        shape.extend(xs[2..].iter().map(|d| d * factor));
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Up { x, w, b, geom }, needs))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let xv = self.value(x);
        let (batch, ch, vol) = (xv.batch(), xv.channels(), xv.spatial_len());
        if self.value(gamma).numel() != ch || self.value(beta).numel() != ch {
            return Err(Error::shape("instance norm affine length"));
        }
        let (y, cache) = kernels::instance_norm_forward(
            xv.data(),
            batch,
            ch,
            vol,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let shape = xv.shape().to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let cache = if needs {
            cache
        } else {
            NormCache {
                xhat: Vec::new(),
                inv_std: Vec::new(),
            }
        };
        Ok(self.push(
            Tensor::from_vec(&shape, y)?,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                cache,
            },
            needs,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let y = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        let needs = self.needs(x);
        self.push(y, Op::LeakyRelu { x, slope }, needs)
    }

    /// Concatenate along axis 1 (channels or features).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::shape("empty concat"))?)
            .shape()
            .to_vec();
        let batch = first[0];
        let tail: Vec<usize> = first[2..].to_vec();
        let vol: usize = tail.iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[0] != batch || s[2..] != tail[..] {
                return Err(Error::shape(format!("concat of {first:?} and {s:?}")));
            }
            total += s[1];
        }
        let mut data = vec![0.0; batch * total * vol];
        for b in 0..batch {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                let c = t.channels();
                let src = t.sample(b);
                data[(b * total + off) * vol..(b * total + off + c) * vol].copy_from_slice(src);
                off += c;
            }
        }
        let mut shape = vec![batch, total];
        shape.extend(tail);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_vec(&shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Global average pooling: `[b, c, spatial..]` to `[b, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (batch, ch, vol) = (t.batch(), t.channels(), t.spatial_len());
        let data = t
            .data()
            .chunks(vol)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / vol as f64) as f32)
            .collect();
        let y = Tensor::from_vec(&[batch, ch], data).expect("gap shape");
        let needs = self.needs(x);
        self.push(y, Op::Gap { x }, needs)
    }

    /// `x [b, in]`, `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.value(b).numel() != ws[0] {
            return Err(Error::shape(format!("linear input {xs:?} with weight {ws:?}")));
        }
        let (batch, out) = (xs[0], ws[0]);
        let mut y = vec![0.0; batch * out];
        kernels::gemm(
            batch,
            xs[1],
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut y,
            0.0,
        );
        let bias = self.value(b).data();
        for row in y.chunks_mut(out) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_vec(&[batch, out], y)?, Op::Linear { x, w, b }, needs))
    }

    /// Softmax over axis 1.
    pub fn softmax(&mut self, x: Var) -> Var {
        let y = softmax_axis1(self.value(x));
        let needs = self.needs(x);
        self.push(y, Op::Softmax { x }, needs)
    }

    /// Per-sample affine map over channels using weights read from row `b` of
    /// `filters [b, len]` at `slot`.
    pub fn dynamic_affine(&mut self, x: Var, filters: Var, slot: AffineSlot) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let fs = self.value(filters).shape().to_vec();
        if xs.len() < 2 || xs[1] != slot.cin {
            return Err(Error::shape(format!(
                "dynamic layer expects {} input channels, got {xs:?}",
                slot.cin
            )));
        }
        if fs.len() != 2 || fs[0] != xs[0] || fs[1] < slot.end() {
            return Err(Error::shape(format!(
                "filter bank {fs:?} too small for slot ending at {}",
                slot.end()
            )));
        }
        let batch = xs[0];
        let vol: usize = xs[2..].iter().product();
        let mut y = vec![0.0; batch * slot.cout * vol];
        let xv = self.value(x);
        let fv = self.value(filters);
        for b in 0..batch {
            let f = &fv.sample(b)[slot.offset..slot.end()];
            let (wt, bias) = f.split_at(slot.cin * slot.cout);
            let ys = &mut y[b * slot.cout * vol..(b + 1) * slot.cout * vol];
            kernels::gemm(slot.cout, slot.cin, vol, wt, false, xv.sample(b), false, ys, 0.0);
            for (co, bv) in bias.iter().enumerate() {
                for v in &mut ys[co * vol..(co + 1) * vol] {
                    *v += bv;
                }
            }
        }
        let mut shape = xs.clone();
        shape[1] = slot.cout;
        let needs = self.needs(x) || self.needs(filters);
        Ok(self.push(
            Tensor::from_vec(&shape, y)?,
            Op::DynamicAffine { x, filters, slot },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_signed(a, b, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_signed(a, b, -1.0)
    }

    fn add_signed(&mut self, a: Var, b: Var, sign: f32) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "elementwise {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + sign * y).collect();
        let y = Tensor::from_vec(av.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b, sign }, needs))
    }

    /// Scalar node computed outside the graph, with its gradient with respect
    /// to `input` supplied by the caller.
    pub fn scalar_fn(&mut self, input: Var, value: f32, local_grad: Tensor) -> Result<Var> {
        if local_grad.shape() != self.value(input).shape() {
            return Err(Error::shape("scalar gradient must match its input"));
        }
        let needs = self.needs(input);
        Ok(self.push(Tensor::scalar(value), Op::Scalar { input, local_grad }, needs))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let value = terms
            .iter()
            .map(|&(v, w)| w * self.value(v).item())
            .sum::<f32>();
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(
            Tensor::scalar(value),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            needs,
        )
    }

    /// Reverse pass from a scalar root. Gradients are kept for leaves and
    /// parameters only.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.needs(root) {
            grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param | Op::Constant => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f32>) {
        if !self.needs(v) {
            return;
        }
        let t = Tensor::from_vec(shape, data).expect("gradient shape");
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Constant | Op::Leaf | Op::Param => {}
            Op::Conv { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (dx, dw, db) = kernels::conv_backward(
                    xv.data(),
                    xv.batch(),
                    geom,
                    wv.data(),
                    wv.shape()[0],
                    g.data(),
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, xv.shape(), dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, wv.shape(), dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, &[db.len()], db);
                }
            }
            Op::Up { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (dx, dw, db) =
                    kernels::up_backward(xv.data(), xv.batch(), geom, wv.data(), g.data(), self.needs(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, xv.shape(), dx);
                }
                self.accumulate(grads, *w, wv.shape(), dw);
                self.accumulate(grads, *b, &[db.len()], db);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let xv = self.value(*x);
                let (dx, dgamma, dbeta) = kernels::instance_norm_backward(
                    g.data(),
                    cache,
                    xv.batch(),
                    xv.channels(),
                    xv.spatial_len(),
                    self.value(*gamma).data(),
                );
                self.accumulate(grads, *x, xv.shape(), dx);
                self.accumulate(grads, *gamma, &[dgamma.len()], dgamma);
                self.accumulate(grads, *beta, &[dbeta.len()], dbeta);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| if v >= 0.0 { d } else { slope * d })
                    .collect();
                self.accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Concat { parts } => {
                let batch = out.batch();
                let total = out.channels();
                let vol: usize = out.shape()[2..].iter().product();
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.channels();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(pv.numel());
                        for b in 0..batch {
                            d.extend_from_slice(
                                &g.data()[(b * total + off) * vol..(b * total + off + c) * vol],
                            );
                        }
                        self.accumulate(grads, p, pv.shape(), d);
                    }
                    off += c;
                }
            }
            Op::Gap { x } => {
                let xv = self.value(*x);
                let vol = xv.spatial_len();
                let inv = 1.0 / vol as f32;
                let mut dx = Vec::with_capacity(xv.numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, vol));
                }
                self.accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (batch, inp, outn) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; batch * inp];
                    kernels::gemm(batch, outn, inp, g.data(), false, wv.data(), false, &mut dx, 0.0);
                    self.accumulate(grads, *x, xv.shape(), dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; outn * inp];
                    kernels::gemm(outn, batch, inp, g.data(), true, xv.data(), false, &mut dw, 0.0);
                    self.accumulate(grads, *w, wv.shape(), dw);
                }
                let mut db = vec![0.0; outn];
                for row in g.data().chunks(outn) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *b, &[outn], db);
            }
            Op::Softmax { x } => {
                let (batch, ch) = (out.shape()[0], out.shape()[1]);
                let vol: usize = out.shape()[2..].iter().product();
                let mut dx = vec![0.0; out.numel()];
                let (p, d) = (out.data(), g.data());
                for b in 0..batch {
                    let base = b * ch * vol;
                    for v in 0..vol {
                        let mut dot = 0.0;
                        for c in 0..ch {
                            let i = base + c * vol + v;
                            dot += p[i] * d[i];
                        }
                        for c in 0..ch {
                            let i = base + c * vol + v;
                            dx[i] = p[i] * (d[i] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, out.shape(), dx);
            }
            Op::DynamicAffine { x, filters, slot } => {
                let xv = self.value(*x);
                let fv = self.value(*filters);
                let batch = xv.batch();
                let vol: usize = xv.shape()[2..].iter().product();
                let want_dx = self.needs(*x);
                let want_df = self.needs(*filters);
                let mut dx = vec![0.0; if want_dx { xv.numel() } else { 0 }];
                let mut df = vec![0.0; if want_df { fv.numel() } else { 0 }];
                let flen = fv.shape()[1];
                let nw = slot.cin * slot.cout;
                for b in 0..batch {
                    let gs = &g.data()[b * slot.cout * vol..(b + 1) * slot.cout * vol];
                    if want_dx {
                        let wt = &fv.sample(b)[slot.offset..slot.offset + nw];
                        kernels::gemm(
                            slot.cin,
                            slot.cout,
                            vol,
                            wt,
                            true,
                            gs,
                            false,
                            &mut dx[b * slot.cin * vol..(b + 1) * slot.cin * vol],
                            0.0,
                        );
                    }
                    if want_df {
                        let row = &mut df[b * flen + slot.offset..b * flen + slot.end()];
                        let (dw, dbias) = row.split_at_mut(nw);
                        kernels::gemm(slot.cout, vol, slot.cin, gs, false, xv.sample(b), true, dw, 0.0);
                        for (co, d) in dbias.iter_mut().enumerate() {
                            *d = gs[co * vol..(co + 1) * vol].iter().sum();
                        }
                    }
                }
                if want_dx {
                    self.accumulate(grads, *x, xv.shape(), dx);
                }
                if want_df {
                    self.accumulate(grads, *filters, fv.shape(), df);
                }
            }
            Op::Add { a, b, sign } => {
                let shape = out.shape();
                self.accumulate(grads, *a, shape, g.data().to_vec());
                let s = *sign;
                self.accumulate(grads, *b, shape, g.data().iter().map(|v| s * v).collect());
            }
            Op::Scalar { input, local_grad } => {
                let up = g.item();
                let d = local_grad.data().iter().map(|v| up * v).collect();
                self.accumulate(grads, *input, local_grad.shape(), d);
            }
            Op::WeightedSum { terms } => {
                let up = g.item();
                for &(v, w) in terms {
                    self.accumulate(grads, v, &[1], vec![up * w]);
                }
            }
        }
    }
}

/// Gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of a leaf or parameter node; `None` means identically zero.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }
}

pub(crate) fn softmax_axis1(x: &Tensor) -> Tensor {
    let (batch, ch) = (x.shape()[0], x.shape()[1]);
    let vol: usize = x.shape()[2..].iter().product();
    let mut y = vec![0.0; x.numel()];
    let d = x.data();
    for b in 0..batch {
        let base = b * ch * vol;
        for v in 0..vol {
            let mut m = f32::NEG_INFINITY;
            for c in 0..ch {
                m = m.max(d[base + c * vol + v]);
            }
            let mut s = 0.0f32;
            for c in 0..ch {
                let e = (d[base + c * vol + v] - m).exp();
                y[base + c * vol + v] = e;
                s += e;
            }
            for c in 0..ch {
                y[base + c * vol + v] /= s;
            }
        }
    }
    Tensor::from_vec(x.shape(), y).expect("softmax shape")
}
