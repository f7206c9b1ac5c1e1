//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients into every node that (transitively) depends on a parameter or a
//! gradient-tracking input. A fresh graph is built for each mini-batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{self, ConvGeometry, PoolGeometry};
use super::optim::{ParamId, ParamStore};
use super::{inverse_permutation, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    AddBroadcast {
        x: Var,
        table: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Conv2d {
        x: Var,
        filters: Var,
        cols: Vec<T>,
        geom: ConvGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    PrependToken {
        x: Var,
        token: Var,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    training: bool,
    rng: ChaCha8Rng,
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Graph<T> {
    /// `training` enables dropout; `seed` drives its masks.
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Inference-mode graph (dropout disabled).
    pub fn inference() -> Self {
        Self::new(false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is collected for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient should be available after `backward`.
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        let v = self.input(value);
        self.nodes[v.0].tracked = true;
        v
    }

    /// Bring a stored parameter onto the tape. Repeated calls return the same
    /// variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let mut value = store.get(id).tensor.clone();
        value.clear_grad();
        let v = self.input_with_grad(value);
        self.params.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after [`Graph::backward`]. Interior nodes do not
    /// retain theirs.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Fingerprint of the branch taken by every non-smooth op: which ReLU
    /// outputs are active and which cell wins each max-pool window. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { .. } => {
                    i.hash(&mut h);
                    for v in node.value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---------------------------------------------------------------- ops

    /// `x [.. x k] * w [k x p] -> [.. x p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, p) = (av.rows(), av.last_dim(), bv.shape()[1]);
        let mut out = vec![T::zero(); m * p];
        T::gemm(
            m,
            k,
            p,
            T::one(),
            av.data(),
            (k as isize, 1),
            bv.data(),
            (p as isize, 1),
            T::zero(),
            &mut out,
            (p as isize, 1),
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = p;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product over the leading axis: `[B x m x k] * [B x k x n]`,
    /// or `[B x m x k] * [B x n x k]^T` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bad = || {
            Error::shape(format!(
                "batch_matmul {:?} x {:?} (trans_b={trans_b})",
                av.shape(),
                bv.shape()
            ))
        };
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (kb, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let b_strides = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av.data()[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &bv.data()[i * k * n..(i + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        let t = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(av.shape(), data)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    /// Add a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.last_dim();
        if bv.len() != d {
            return Err(Error::shape(format!(
                "bias of {} for last axis {d}",
                bv.len()
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            add_into(row, bv.data());
        }
        let t = Tensor::new(xv.shape(), data)?;
        Ok(self.push(t, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Add `table` to every slice along the leading (batch) axis of `x`.
    pub fn add_broadcast(&mut self, x: Var, table: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(table));
        if xv.rank() < 2 || xv.shape()[1..].iter().product::<usize>() != tv.len() {
            return Err(Error::shape(format!(
                "broadcast {:?} onto {:?}",
                tv.shape(),
                xv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for slice in data.chunks_mut(tv.len()) {
            add_into(slice, tv.data());
        }
        let t = Tensor::new(xv.shape(), data)?;
        Ok(self.push(t, Op::AddBroadcast { x, table }, &[x, table]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu { x }, &[x])
    }

    /// Softmax over the last axis, with the row maximum subtracted first.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN input to softmax".into()));
        }
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_row(row);
        }
        let t = Tensor::new(xv.shape(), data)?;
        Ok(self.push(t, Op::Softmax { x }, &[x]))
    }

    /// Per-row normalization over the last axis (eps 1e-5), then affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape(format!(
                "layer_norm affine {}/{} for width {d}",
                gv.len(),
                bv.len()
            )));
        }
        let eps = T::from_f64_lossy(1e-5);
        let dn = T::from_usize_lossy(d);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv.data()[i] + bv.data()[i]);
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout. Outside training, or at rate 0, returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(
                "dropout_rate",
                format!("must lie in [0, 1), got {rate}"),
            ));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(xv.shape(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Valid, stride-1 cross-correlation of `x [B x H x W x C_in]` with
    /// `filters [kh x kw x C_in x C_out]`.
    pub fn conv2d(&mut self, x: Var, filters: Var) -> Result<Var> {
        let (xv, fv) = (self.value(x), self.value(filters));
        if xv.rank() != 4 || fv.rank() != 4 || xv.shape()[3] != fv.shape()[2] {
            return Err(Error::shape(format!(
                "conv2d input {:?} filters {:?}",
                xv.shape(),
                fv.shape()
            )));
        }
        let geom = ConvGeometry {
            batch: xv.shape()[0],
            h: xv.shape()[1],
            w: xv.shape()[2],
            c_in: xv.shape()[3],
            kh: fv.shape()[0],
            kw: fv.shape()[1],
            c_out: fv.shape()[3],
        };
        if conv::conv2d_output_shape(geom.h, geom.w, geom.kh, geom.kw).is_none() {
            return Err(Error::shape(format!(
                "conv2d input {}x{} smaller than kernel {}x{}",
                geom.h, geom.w, geom.kh, geom.kw
            )));
        }
        let (out, cols) = conv::conv2d_forward(xv.data(), fv.data(), &geom);
        let t = Tensor::new(&[geom.batch, geom.out_h(), geom.out_w(), geom.c_out], out)?;
        // the unfolded input is only needed to form filter gradients
        let cols = if self.nodes[filters.0].tracked {
            cols
        } else {
            Vec::new()
        };
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                filters,
                cols,
                geom,
            },
            &[x, filters],
        ))
    }

    /// Max pooling, "same" padding, over `x [B x H x W x C]`.
    pub fn maxpool_same(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 || kernel == 0 || stride == 0 {
            return Err(Error::shape(format!("maxpool input {:?}", xv.shape())));
        }
        let geom = PoolGeometry {
            batch: xv.shape()[0],
            h: xv.shape()[1],
            w: xv.shape()[2],
            c: xv.shape()[3],
            kernel,
            stride,
        };
        let (oh, ow) = geom.out_hw();
        let (out, argmax) = conv::maxpool_same_forward(xv.data(), &geom);
        let t = Tensor::new(&[geom.batch, oh, ow, geom.c], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(axes)?;
        Ok(self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Insert `token` (length `d`) as row 0 of every item of `x [B x n x d]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(token));
        if xv.rank() != 3 || tv.len() != xv.shape()[2] {
            return Err(Error::shape(format!(
                "prepend {:?} to {:?}",
                tv.shape(),
                xv.shape()
            )));
        }
        let (b, n, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut data = Vec::with_capacity(b * (n + 1) * d);
        for item in xv.data().chunks(n * d) {
            data.extend_from_slice(tv.data());
            data.extend_from_slice(item);
        }
        let t = Tensor::new(&[b, n + 1, d], data)?;
        Ok(self.push(t, Op::PrependToken { x, token }, &[x, token]))
    }

    /// Row `index` of every item: `[B x n x d] -> [B x d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || index >= xv.shape()[1] {
            return Err(Error::shape(format!(
                "select token {index} of {:?}",
                xv.shape()
            )));
        }
        let (b, n, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut data = Vec::with_capacity(b * d);
        for item in xv.data().chunks(n * d) {
            data.extend_from_slice(&item[index * d..(index + 1) * d]);
        }
        let t = Tensor::new(&[b, d], data)?;
        Ok(self.push(t, Op::SelectToken { x, index }, &[x]))
    }

    /// Mean softmax cross-entropy of `logits [B x C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy logits {:?} for {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let c = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[label];
            softmax_row(row);
        }
        let loss = total / T::from_usize_lossy(labels.len());
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("cross-entropy loss is {loss}")));
        }
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `sum_i weights[i] * x[i]` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(Error::shape(format!(
                "{} weights for {} values",
                weights.len(),
                xv.len()
            )));
        }
        let s = xv.data().iter().zip(weights).map(|(&a, &w)| a * w).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    /// Dense layer: `x W + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ----------------------------------------------------------- backward

    /// Seed `d loss / d loss = 1` and propagate through the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        self.nodes[loss.0].value.grad_mut()[0] = T::one();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked || self.nodes[i].value.grad().is_none() {
                continue;
            }
            // interior gradients are consumed here; only leaves keep theirs
            let dy = match self.nodes[i].op {
                Op::Leaf => continue,
                _ => self.nodes[i].value.take_grad().expect("checked above"),
            };
            let contributions = self.node_backward(i, dy);
            for (parent, g) in contributions {
                let node = &mut self.nodes[parent.0];
                if node.tracked {
                    node.value.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn node_backward(&self, i: usize, owned: Vec<T>) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let dy = owned.as_slice();
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, p) = (av.rows(), av.last_dim(), bv.shape()[1]);
                if self.tracked(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        p,
                        k,
                        T::one(),
                        dy,
                        (p as isize, 1),
                        bv.data(),
                        (1, p as isize),
                        T::zero(),
                        &mut da,
                        (k as isize, 1),
                    );
                    out.push((*a, da));
                }
                if self.tracked(*b) {
                    let mut db = vec![T::zero(); k * p];
                    T::gemm(
                        k,
                        m,
                        p,
                        T::one(),
                        av.data(),
                        (1, k as isize),
                        dy,
                        (p as isize, 1),
                        T::zero(),
                        &mut db,
                        (p as isize, 1),
                    );
                    out.push((*b, db));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                if self.tracked(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    // dA = dC * B^T (or dC * B when B was used transposed)
                    let bs = if *trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    for s in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &dy[s * m * n..(s + 1) * m * n],
                            (n as isize, 1),
                            &bv.data()[s * k * n..(s + 1) * k * n],
                            bs,
                            T::zero(),
                            &mut da[s * m * k..(s + 1) * m * k],
                            (k as isize, 1),
                        );
                    }
                    out.push((*a, da));
                }
                if self.tracked(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for s in 0..batch {
                        let a_s = &av.data()[s * m * k..(s + 1) * m * k];
                        let dy_s = &dy[s * m * n..(s + 1) * m * n];
                        let db_s = &mut db[s * k * n..(s + 1) * k * n];
                        if *trans_b {
                            // dB [n x k] = dC^T [n x m] * A [m x k]
                            T::gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                dy_s,
                                (1, n as isize),
                                a_s,
                                (k as isize, 1),
                                T::zero(),
                                db_s,
                                (k as isize, 1),
                            );
                        } else {
                            // dB [k x n] = A^T [k x m] * dC [m x n]
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                a_s,
                                (1, k as isize),
                                dy_s,
                                (n as isize, 1),
                                T::zero(),
                                db_s,
                                (n as isize, 1),
                            );
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, dy.to_vec()));
                out.push((*b, owned));
            }
            Op::AddBias { x, bias } => {
                if self.tracked(*bias) {
                    let d = node.value.last_dim();
                    let mut db = vec![T::zero(); d];
                    for row in dy.chunks(d) {
                        add_into(&mut db, row);
                    }
                    out.push((*bias, db));
                }
                out.push((*x, owned));
            }
            Op::AddBroadcast { x, table } => {
                if self.tracked(*table) {
                    let n = val(*table).len();
                    let mut dt = vec![T::zero(); n];
                    for slice in dy.chunks(n) {
                        add_into(&mut dt, slice);
                    }
                    out.push((*table, dt));
                }
                out.push((*x, owned));
            }
            Op::Scale { x, factor } => {
                out.push((*x, dy.iter().map(|&g| g * *factor).collect()));
            }
            Op::Relu { x } => {
                let xv = val(*x);
                let dx = dy
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = val(*gamma).data();
                let d = node.value.last_dim();
                let dn = T::from_usize_lossy(d);
                if self.tracked(*x) {
                    let mut dx = vec![T::zero(); xhat.len()];
                    for (r, ((hr, gr), dr)) in xhat
                        .chunks(d)
                        .zip(dy.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut sum = T::zero();
                        let mut sum_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum += dh;
                            sum_h += dh * hr[j];
                        }
                        let scale = inv_std[r] / dn;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dr[j] = scale * (dn * dh - sum - hr[j] * sum_h);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.tracked(*gamma) || self.tracked(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (hr, gr) in xhat.chunks(d).zip(dy.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    out.push((*gamma, dg));
                    out.push((*beta, db));
                }
            }
            Op::Dropout { x, mask } => {
                out.push((*x, dy.iter().zip(mask).map(|(&g, &m)| g * m).collect()));
            }
            Op::Conv2d {
                x,
                filters,
                cols,
                geom,
            } => {
                let fv = val(*filters).data();
                let mut df = self.tracked(*filters).then(|| vec![T::zero(); fv.len()]);
                let mut dx = self.tracked(*x).then(|| vec![T::zero(); val(*x).len()]);
                conv::conv2d_backward(dy, cols, fv, geom, df.as_deref_mut(), dx.as_deref_mut());
                if let Some(df) = df {
                    out.push((*filters, df));
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&src, &g) in argmax.iter().zip(dy) {
                    dx[src] += g;
                }
                out.push((*x, dx));
            }
            Op::Permute { x, axes } => {
                let g = Tensor::new(node.value.shape(), owned).expect("grad matches value");
                let back = g
                    .permute(&inverse_permutation(axes))
                    .expect("valid permutation");
                out.push((*x, back.into_data()));
            }
            Op::Reshape { x } => out.push((*x, owned)),
            Op::PrependToken { x, token } => {
                let shape = node.value.shape();
                let (n1, d) = (shape[1], shape[2]);
                let mut dx = Vec::with_capacity(dy.len() - shape[0] * d);
                let mut dt = vec![T::zero(); d];
                for item in dy.chunks(n1 * d) {
                    add_into(&mut dt, &item[..d]);
                    dx.extend_from_slice(&item[d..]);
                }
                out.push((*x, dx));
                out.push((*token, dt));
            }
            Op::SelectToken { x, index } => {
                let shape = val(*x).shape();
                let (n, d) = (shape[1], shape[2]);
                let mut dx = vec![T::zero(); val(*x).len()];
                for (item, g) in dx.chunks_mut(n * d).zip(dy.chunks(d)) {
                    item[index * d..(index + 1) * d].copy_from_slice(g);
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).shape()[1];
                let scale = dy[0] / T::from_usize_lossy(labels.len());
                let mut dx = probs.clone();
                for (row, &l) in dx.chunks_mut(c).zip(labels) {
                    row[l] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                out.push((*logits, dx));
            }
            Op::WeightedSum { x, weights } => {
                out.push((*x, weights.iter().map(|&w| w * dy[0]).collect()));
            }
        }
        out
    }

    /// Add `scale * grad` of every parameter on the tape into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>, scale: T) {
        for &(id, v) in &self.params {
            if let Some(g) = self.grad(v) {
                let dst = store.get_mut(id).tensor.grad_mut();
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d += s * scale;
                }
            }
        }
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
