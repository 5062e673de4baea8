//! Content adaptive convolution: filters for a three-layer per-voxel classifier
//! generated from pooled bottleneck features of each image.

use crate::autograd::{Graph, Var};
use crate::dac::FilterLayout;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `2 * ((K*C)^2 + K*C) + (K*C*C + C)`.
pub fn cac_filter_len(k: usize, c: usize) -> usize {
    let kc = k * c;
    2 * (kc * kc + kc) + (kc * c + c)
}

/// Channel sequence `width -> width -> width -> classes`.
pub fn cac_layout(width: usize, classes: usize) -> FilterLayout {
    FilterLayout::chain(&[width, width, width, classes])
}

/// Layout for `K` domains and `C` classes.
pub fn cac_layout_for(k: usize, c: usize) -> FilterLayout {
    cac_layout(k * c, c)
}

/// Pre-softmax class scores of the content-adaptive head. LeakyReLU follows
/// every dynamic layer except the last.
pub fn cac_logits(g: &mut Graph, x: Var, filters: Var, layout: &FilterLayout, slope: f32) -> Result<Var> {
    let filt = g.value(filters).shape().to_vec();
    if filt.len() != 2 || filt[1] != layout.len() {
        return Err(Error::shape(format!(
            "content filter bank {filt:?} does not match layout length {}",
            layout.len()
        )));
    }
    let n = layout.slots().len();
    let mut h = x;
    for (i, slot) in layout.slots().iter().enumerate() {
        h = g.dynamic_affine(h, filters, *slot)?;
        if i + 1 < n {
            h = g.leaky_relu(h, slope);
        }
    }
    Ok(h)
}

/// Per-voxel class probabilities `p = softmax(head(x))`.
pub fn apply_cac_head(g: &mut Graph, x: Var, filters: Var, layout: &FilterLayout, slope: f32) -> Result<Var> {
    let logits = cac_logits(g, x, filters, layout, slope)?;
    Ok(g.softmax(logits))
}

pub fn apply_cac_head_tensor(x: &Tensor, filters: &Tensor, layout: &FilterLayout, slope: f32) -> Result<Tensor> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let f = g.constant(filters.clone());
    let p = apply_cac_head(&mut g, xv, f, layout, slope)?;
    Ok(g.value(p).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_len_formula() {
        assert_eq!(cac_filter_len(5, 2), 242);
        for k in 1..6 {
            for c in 1..5 {
                let kc = k * c;
                let want = 2 * (kc * kc + kc) + (kc * c + c);
                assert_eq!(cac_layout_for(k, c).len(), want);
                assert_eq!(cac_filter_len(k, c), want);
            }
        }
    }

    #[test]
    fn zero_bank_gives_uniform_probabilities() {
        let layout = cac_layout_for(2, 3);
        let x = Tensor::from_vec(&[1, 6, 2, 2], (0..24).map(|v| v as f32).collect()).unwrap();
        let f = Tensor::zeros(&[1, layout.len()]);
        let p = apply_cac_head_tensor(&x, &f, &layout, 0.01).unwrap();
        assert_eq!(p.shape(), &[1, 3, 2, 2]);
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let layout = cac_layout_for(2, 2);
        let x = Tensor::zeros(&[1, 4, 2, 2]);
        let f = Tensor::zeros(&[1, layout.len() + 2]);
        assert!(apply_cac_head_tensor(&x, &f, &layout, 0.01).is_err());
        let x3 = Tensor::zeros(&[1, 3, 2, 2]);
        let f = Tensor::zeros(&[1, layout.len()]);
        assert!(apply_cac_head_tensor(&x3, &f, &layout, 0.01).is_err());
    }
}
