//! Tensor-level entry points for the core operations. Each runs the same
//! kernel the tape uses, so gradients checked through the tape cover these too.

use crate::error::{Error, Result};
use crate::nn::kernels;
use crate::nn::{Real, Tensor};

/// Floor applied inside every logarithm of a cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    kernels::mm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let out = kernels::softmax_rows(x.data(), x.cols(), None);
    Tensor::new(x.shape(), out).expect("same shape as input")
}

pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    let (out, _) = kernels::layer_norm(x.data(), d, gain.data(), bias.data(), T::lit(eps));
    Tensor::new(x.shape(), out)
}

/// Target of a cross-entropy: a class index or a full distribution.
#[derive(Clone, Debug)]
pub enum Target<'a, T> {
    Class(usize),
    Distribution(&'a [T]),
}

/// Cross-entropy of a predicted distribution against a hard or soft target.
pub fn cross_entropy<T: Real>(pred: &[T], target: Target<'_, T>) -> Result<T> {
    let floor = T::lit(LOG_FLOOR);
    match target {
        Target::Class(i) => {
            let p = pred.get(i).ok_or_else(|| {
                Error::Label(format!("class {i} out of range for {} classes", pred.len()))
            })?;
            Ok(-kernels::log_clamped(*p, floor))
        }
        Target::Distribution(t) => {
            if t.len() != pred.len() {
                return Err(Error::dim("cross_entropy", &[pred.len()], &[t.len()]));
            }
            Ok(pred
                .iter()
                .zip(t)
                .map(|(&p, &q)| -q * kernels::log_clamped(p, floor))
                .sum())
        }
    }
}
