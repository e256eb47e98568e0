//! Reverse-mode gradient tape over coarse, batched tensor operations.
//!
//! Each call on [`GradTape`] evaluates one operation eagerly, stores its
//! output and whatever the adjoint needs, and returns a [`Var`] handle.
//! [`GradTape::backward`] replays the adjoints in reverse order once and then
//! releases the recorded intermediates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, dot, Mode};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Sum(Var),
    Inner(Var, Var),
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, keep: Option<Vec<T>> },
    Conv1d { x: Var, w: Var, b: Var },
    Relu(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Concat(Vec<Var>),
    Linear { x: Var, w: Var, b: Var },
    SoftmaxCe { logits: Var, dlogits: Vec<T> },
}

#[derive(Debug)]
pub struct GradTape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    consumed: bool,
}

/// Gradients indexed by the [`Var`]s of the tape that produced them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape { values: Vec::new(), ops: Vec::new(), consumed: false }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.values.push(value);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Elementwise inner product of two equally shaped tensors.
    pub fn inner(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb)?;
        let s = dot(ta.data(), tb.data());
        self.push(Tensor::scalar(s), Op::Inner(a, b))
    }

    /// Row lookup: `ids` (length `batch*len`) into `table[vocab×d]`, giving `[batch, len, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        let t = self.value(table);
        let [vocab, d] = t.shape() else {
            return Err(Error::Data(format!("embedding table must be rank 2, got {:?}", t.shape())));
        };
        let (vocab, d) = (*vocab, *d);
        if ids.len() != batch * len {
            return Err(Error::ShapeMismatch { left: vec![batch, len], right: vec![ids.len()] });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![batch, len, d], out)?;
        self.push(value, Op::Embedding { table, ids: ids.to_vec() })
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        let (value, keep) = ops::dropout(self.value(x), p, mode, rng)?;
        self.push(value, Op::Dropout { x, keep })
    }

    /// Valid convolution of `x[batch, n, d]` with `w[channels, h, d]` plus
    /// `b[channels]`, giving pre-activations `[batch, channels, n-h+1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (&[batch, n, d], &[ch, h, dw]) = (tx.shape(), tw.shape()) else {
            return Err(Error::ShapeMismatch { left: tx.shape().to_vec(), right: tw.shape().to_vec() });
        };
        if d != dw || tb.shape() != [ch] {
            return Err(Error::ShapeMismatch { left: tx.shape().to_vec(), right: tw.shape().to_vec() });
        }
        if n < h {
            return Err(Error::SequenceTooShort { len: n, height: h });
        }
        let out_len = n - h + 1;
        let window = h * d;
        let mut out = Vec::with_capacity(batch * ch * out_len);
        for bi in 0..batch {
            let seq = &tx.data()[bi * n * d..(bi + 1) * n * d];
            for c in 0..ch {
                let filter = &tw.data()[c * window..(c + 1) * window];
                let bias = tb.data()[c];
                for i in 0..out_len {
                    out.push(dot(&seq[i * d..i * d + window], filter) + bias);
                }
            }
        }
        let value = Tensor::new(vec![batch, ch, out_len], out)?;
        self.push(value, Op::Conv1d { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x))
    }

    /// 1-max pooling over the last axis of `[batch, channels, len]`. Ties go to
    /// the first maximal position.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let &[batch, ch, len] = tx.shape() else {
            return Err(Error::Data(format!("max_pool expects rank 3, got {:?}", tx.shape())));
        };
        let mut out = Vec::with_capacity(batch * ch);
        let mut argmax = Vec::with_capacity(batch * ch);
        for (row, chunk) in tx.data().chunks_exact(len).enumerate() {
            let (m, i) = ops::max_pool1(chunk)?;
            out.push(m);
            argmax.push(row * len + i);
        }
        let value = Tensor::new(vec![batch, ch], out)?;
        self.push(value, Op::MaxPool { x, argmax })
    }

    /// Column-wise concatenation of `[batch, k_i]` tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput("concat"))?;
        let batch = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != batch {
                return Err(Error::ShapeMismatch { left: vec![batch], right: s.to_vec() });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(batch * total);
        for bi in 0..batch {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[bi * w..(bi + 1) * w]);
            }
        }
        let value = Tensor::new(vec![batch, total], out)?;
        self.push(value, Op::Concat(parts.to_vec()))
    }

    /// `x[batch, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (&[batch, fin], &[win, fout]) = (tx.shape(), tw.shape()) else {
            return Err(Error::ShapeMismatch { left: tx.shape().to_vec(), right: tw.shape().to_vec() });
        };
        if fin != win || tb.shape() != [fout] {
            return Err(Error::ShapeMismatch { left: tx.shape().to_vec(), right: tw.shape().to_vec() });
        }
        let mut out = Vec::with_capacity(batch * fout);
        for bi in 0..batch {
            let row = &tx.data()[bi * fin..(bi + 1) * fin];
            let mut acc = tb.data().to_vec();
            for (k, &xv) in row.iter().enumerate() {
                if xv == T::zero() {
                    continue;
                }
                for (a, &wv) in acc.iter_mut().zip(&tw.data()[k * fout..(k + 1) * fout]) {
                    *a = *a + xv * wv;
                }
            }
            out.extend(acc);
        }
        let value = Tensor::new(vec![batch, fout], out)?;
        self.push(value, Op::Linear { x, w, b })
    }

    /// Mean softmax cross-entropy of `logits[batch, classes]` against `labels`.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let &[batch, classes] = tl.shape() else {
            return Err(Error::Data(format!("logits must be rank 2, got {:?}", tl.shape())));
        };
        if labels.len() != batch {
            return Err(Error::ShapeMismatch { left: vec![batch], right: vec![labels.len()] });
        }
        let scale = T::lit(1.0 / batch as f64);
        let mut total = T::zero();
        let mut dlogits = Vec::with_capacity(batch * classes);
        for (row, &y) in tl.data().chunks_exact(classes).zip(labels) {
            let (loss, grad) = ops::softmax_cross_entropy(row, y)?;
            total = total + loss;
            dlogits.extend(grad.into_iter().map(|g| g * scale));
        }
        self.push(Tensor::scalar(total * scale), Op::SoftmaxCe { logits, dlogits })
    }

    /// Propagates from the scalar `loss` back to every recorded value. The
    /// tape is emptied; a second call fails with [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Data(format!("backward from non-scalar of shape {:?}", self.value(loss).shape())));
        }
        self.consumed = true;
        let values = std::mem::take(&mut self.values);
        let ops = std::mem::take(&mut self.ops);
        let mut grads: Vec<Option<Tensor<T>>> = (0..values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(values[loss.0].shape(), T::one()));

        for (idx, op) in ops.iter().enumerate().rev() {
            let Some(g) = grads[idx].take() else { continue };
            match op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(values[x.0].shape(), g.item());
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Inner(a, b) => {
                    let s = g.item();
                    let ga = values[b.0].map(|v| v * s);
                    let gb = values[a.0].map(|v| v * s);
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Embedding { table, ids } => {
                    let shape = values[table.0].shape();
                    let d = shape[1];
                    let mut gt = Tensor::zeros(shape);
                    let data = gt.data_mut();
                    for (pos, &id) in ids.iter().enumerate() {
                        let src = &g.data()[pos * d..(pos + 1) * d];
                        for (dst, &s) in data[id * d..(id + 1) * d].iter_mut().zip(src) {
                            *dst = *dst + s;
                        }
                    }
                    accumulate(&mut grads, *table, gt)?;
                }
                Op::Dropout { x, keep } => {
                    let gx = match keep {
                        Some(k) => {
                            let mut gx = g;
                            for (v, &m) in gx.data_mut().iter_mut().zip(k) {
                                *v = *v * m;
                            }
                            gx
                        }
                        None => g,
                    };
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Conv1d { x, w, b } => {
                    let (tx, tw) = (&values[x.0], &values[w.0]);
                    let &[batch, n, d] = tx.shape() else { unreachable!() };
                    let &[ch, h, _] = tw.shape() else { unreachable!() };
                    let out_len = n - h + 1;
                    let window = h * d;
                    let mut gx = Tensor::zeros(tx.shape());
                    let mut gw = Tensor::zeros(tw.shape());
                    let mut gb = Tensor::zeros(&[ch]);
                    for bi in 0..batch {
                        let seq = &tx.data()[bi * n * d..(bi + 1) * n * d];
                        for c in 0..ch {
                            let filter = &tw.data()[c * window..(c + 1) * window];
                            let row = &g.data()[(bi * ch + c) * out_len..(bi * ch + c + 1) * out_len];
                            for (i, &gy) in row.iter().enumerate() {
                                if gy == T::zero() {
                                    continue;
                                }
                                gb.data_mut()[c] = gb.data()[c] + gy;
                                let gwin = &mut gw.data_mut()[c * window..(c + 1) * window];
                                for (dst, &xv) in gwin.iter_mut().zip(&seq[i * d..i * d + window]) {
                                    *dst = *dst + gy * xv;
                                }
                                let off = bi * n * d + i * d;
                                let gxwin = &mut gx.data_mut()[off..off + window];
                                for (dst, &wv) in gxwin.iter_mut().zip(filter) {
                                    *dst = *dst + gy * wv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (v, &xv) in gx.data_mut().iter_mut().zip(values[x.0].data()) {
                        if xv <= T::zero() {
                            *v = T::zero();
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros(values[x.0].shape());
                    for (&pos, &gv) in argmax.iter().zip(g.data()) {
                        gx.data_mut()[pos] = gv;
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Concat(parts) => {
                    let total = g.shape()[1];
                    let batch = g.shape()[0];
                    let mut offset = 0;
                    for &p in parts {
                        let w = values[p.0].shape()[1];
                        let mut gp = Vec::with_capacity(batch * w);
                        for bi in 0..batch {
                            gp.extend_from_slice(&g.data()[bi * total + offset..bi * total + offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, Tensor::new(vec![batch, w], gp)?)?;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (&values[x.0], &values[w.0]);
                    let &[batch, fin] = tx.shape() else { unreachable!() };
                    let fout = tw.shape()[1];
                    let mut gx = Tensor::zeros(tx.shape());
                    let mut gw = Tensor::zeros(tw.shape());
                    let mut gb = Tensor::zeros(&[fout]);
                    for bi in 0..batch {
                        let gy = &g.data()[bi * fout..(bi + 1) * fout];
                        for (dst, &v) in gb.data_mut().iter_mut().zip(gy) {
                            *dst = *dst + v;
                        }
                        for k in 0..fin {
                            let wrow = &tw.data()[k * fout..(k + 1) * fout];
                            gx.data_mut()[bi * fin + k] = dot(gy, wrow);
                            let xv = tx.data()[bi * fin + k];
                            if xv != T::zero() {
                                for (dst, &v) in gw.data_mut()[k * fout..(k + 1) * fout].iter_mut().zip(gy) {
                                    *dst = *dst + xv * v;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::SoftmaxCe { logits, dlogits } => {
                    let s = g.item();
                    let gl = Tensor::new(values[logits.0].shape().to_vec(), dlogits.iter().map(|&v| v * s).collect())?;
                    accumulate(&mut grads, *logits, gl)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}
