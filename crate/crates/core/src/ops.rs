//! Single-example primitives of the TextCNN. The batched tape operations in
//! [`crate::tape`] are built from these.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Sum of elementwise products of two equally long slices.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Frobenius inner product `Σ_ij a_ij b_ij` of two rank-2 tensors.
pub fn frobenius_inner<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.rank() != 2 || a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    Ok(dot(a.data(), b.data()))
}

/// Valid (unpadded, stride 1) convolution of an `n×d` embedding matrix with one
/// `h×d` filter. Window `i` covers rows `i..i+h`, so the output has `n-h+1`
/// entries. A rank-1 `t` is read as `n×1`.
pub fn conv1d_forward<T: Scalar>(t: &Tensor<T>, w: &Tensor<T>, bias: T, f: Activation) -> Result<Tensor<T>> {
    let (n, d) = as_matrix(t);
    let (h, dw) = as_matrix(w);
    if d != dw {
        return Err(Error::ShapeMismatch { left: t.shape().to_vec(), right: w.shape().to_vec() });
    }
    if n < h {
        return Err(Error::SequenceTooShort { len: n, height: h });
    }
    let window = h * d;
    let out = (0..=n - h).map(|i| f.apply(dot(&t.data()[i * d..i * d + window], w.data()) + bias)).collect();
    Tensor::new(vec![n - h + 1], out)
}

fn as_matrix<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    match t.shape() {
        [n] => (*n, 1),
        [n, d] => (*n, *d),
        s => (s[0], s[1..].iter().product()),
    }
}

/// 1-max pooling. Returns the maximum and the first index attaining it.
pub fn max_pool1<T: Scalar>(c: &[T]) -> Result<(T, usize)> {
    let (&first, rest) = c.split_first().ok_or(Error::EmptyInput("max_pool1"))?;
    let mut best = (first, 0);
    for (i, &v) in rest.iter().enumerate() {
        if v > best.0 {
            best = (v, i + 1);
        }
    }
    Ok(best)
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (0 or `1/(1-p)`) so a backward pass can reuse it.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, p: f64, mode: Mode, rng: &mut R) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let scale = T::lit(1.0 / (1.0 - p));
    let keep: Vec<T> = (0..x.len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { scale }).collect();
    let mut out = x.clone();
    for (v, &k) in out.data_mut().iter_mut().zip(&keep) {
        *v = *v * k;
    }
    Ok((out, Some(keep)))
}

/// Numerically stable `-log softmax(logits)[label]` and its gradient
/// `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if logits.len() < 2 {
        return Err(Error::EmptyInput("softmax_cross_entropy"));
    }
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    let (max, argmax) = max_pool1(logits)?;
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    // the max term contributes exactly 1; ln_1p keeps precision for confident logits
    let rest: T = exps.iter().enumerate().filter(|&(i, _)| i != argmax).map(|(_, &e)| e).sum();
    let total = T::one() + rest;
    let loss = rest.ln_1p() + (max - logits[label]);
    let mut grad: Vec<T> = exps.iter().map(|&e| e / total).collect();
    grad[label] = grad[label] - T::one();
    Ok((loss, grad))
}
