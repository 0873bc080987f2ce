//! Fused softmax + cross-entropy.
//!
//! Inference applies a plain softmax head; during training the softmax is
//! fused with the negative log-likelihood so the gradient reduces to
//! `(softmax - onehot) / B`, which is both cheaper and better conditioned
//! than differentiating through an explicit softmax.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::nn::{sc, Scalar};
use crate::Label;

/// Mean cross-entropy of `[B, C]` logits against integer labels, and the
/// gradient with respect to the logits. Uses the shifted log-sum-exp, so
/// arbitrarily large logits stay finite.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[Label],
) -> Result<(T, Tensor<T>)> {
    let &[b, c] = logits.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "loss expects 2d logits, got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    for &l in labels {
        if l as usize >= c {
            return Err(Error::LabelOutOfRange { label: l, classes: c });
        }
    }

    let ld = logits.data();
    let mut dlogits = Tensor::zeros(&[b, c]);
    let dd = dlogits.data_mut();
    let inv_b: T = sc(1.0 / b as f64);
    let mut total = T::zero();
    for bi in 0..b {
        let row = &ld[bi * c..(bi + 1) * c];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for &l in row {
            sum += (l - max).exp();
        }
        let lse = max + sum.ln();
        let y = labels[bi] as usize;
        total += lse - row[y];
        let drow = &mut dd[bi * c..(bi + 1) * c];
        for (j, &l) in row.iter().enumerate() {
            let p = (l - lse).exp();
            drow[j] = if j == y { (p - T::one()) * inv_b } else { p * inv_b };
        }
    }
    Ok((total * inv_b, dlogits))
}
