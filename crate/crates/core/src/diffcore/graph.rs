//! Reverse-mode differentiation over a flat tape.
//!
//! Every operation appends a node holding its forward value together with
//! whatever it needs to push gradients back to its inputs. Nodes built only
//! from constants are untracked and skip saving backward buffers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::{gemm, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with stored running statistics.
    Running,
}

/// Per-channel statistics measured by a batch-statistics forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when only one value per channel was seen).
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Broadcast {
    ia: Vec<usize>,
    ib: Vec<usize>,
}

struct ConvGeom {
    batch: usize,
    in_ch: usize,
    len: usize,
    filters: usize,
    kernel: usize,
    out_len: usize,
    stride: usize,
    pad: usize,
}

enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        plan: Option<Broadcast>,
    },
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var, f64),
    Pow(Var, f64),
    Sum(Var),
    SumLast(Var),
    MeanLast(Var),
    MaxLast(Var, Vec<usize>),
    Softmax(Var),
    L2Normalize(Var, Vec<f64>, f64),
    RowNorm(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    ConcatLast(Var, Var),
    SelectRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    MaskedLogSumExp(Var, Vec<bool>),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        col: Vec<f64>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
        channels: usize,
        inner: usize,
    },
    MaxPool(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, if `v` was tracked and
    /// reached by the backward pass.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Copy of `v` with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let f = match kind {
            BinKind::Add => |x: f64, y: f64| x + y,
            BinKind::Sub => |x: f64, y: f64| x - y,
            BinKind::Mul => |x: f64, y: f64| x * y,
            BinKind::Div => |x: f64, y: f64| x / y,
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let (value, plan) = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            (Tensor::new(ta.shape().to_vec(), data)?, None)
        } else {
            let (shape, ia, ib) = broadcast(ta.shape(), tb.shape())?;
            let data = ia
                .iter()
                .zip(&ib)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect();
            (Tensor::new(shape, data)?, Some(Broadcast { ia, ib }))
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Binary { kind, a, b, plan }, tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.map(x, |v| v * c);
        let t = self.tracked(x);
        self.push(v, Op::Scale(x, c), t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        let t = self.tracked(x);
        self.push(v, Op::Relu(x), t)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::exp);
        let t = self.tracked(x);
        self.push(v, Op::Exp(x), t)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Var {
        let v = self.map(x, |v| v.max(eps).ln());
        let t = self.tracked(x);
        self.push(v, Op::Log(x, eps), t)
    }

    /// Elementwise power for nonnegative inputs.
    pub fn powf(&mut self, x: Var, a: f64) -> Var {
        let v = self.map(x, |v| v.powf(a));
        let t = self.tracked(x);
        self.push(v, Op::Pow(x, a), t)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    // ----- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let t = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), t)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn reduced_shape(shape: &[usize]) -> Vec<usize> {
        if shape.len() <= 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        }
    }

    pub fn sum_last(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let w = tx.last_dim();
        let data: Vec<f64> = if w == 0 {
            vec![0.0; Self::reduced_shape(tx.shape()).iter().product()]
        } else {
            tx.data().chunks(w).map(|c| c.iter().sum()).collect()
        };
        let v = Tensor::new(Self::reduced_shape(tx.shape()), data).expect("reduced");
        let t = self.tracked(x);
        self.push(v, Op::SumLast(x), t)
    }

    pub fn mean_last(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let w = tx.last_dim();
        let data: Vec<f64> = if w == 0 {
            vec![0.0; Self::reduced_shape(tx.shape()).iter().product()]
        } else {
            tx.data()
                .chunks(w)
                .map(|c| c.iter().sum::<f64>() / w as f64)
                .collect()
        };
        let v = Tensor::new(Self::reduced_shape(tx.shape()), data).expect("reduced");
        let t = self.tracked(x);
        self.push(v, Op::MeanLast(x), t)
    }

    /// Maximum over the last axis; the gradient flows to the first maximal
    /// entry of each row.
    pub fn max_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let w = tx.last_dim();
        if w == 0 {
            return Err(Error::shape("max_last", "empty last axis"));
        }
        let mut argmax = Vec::with_capacity(tx.numel() / w);
        let mut data = Vec::with_capacity(tx.numel() / w);
        for (r, row) in tx.data().chunks(w).enumerate() {
            let (j, m) = argmax_first(row);
            argmax.push(r * w + j);
            data.push(m);
        }
        let v = Tensor::new(Self::reduced_shape(tx.shape()), data)?;
        let t = self.tracked(x);
        Ok(self.push(v, Op::MaxLast(x, argmax), t))
    }

    // ----- normalizations ----------------------------------------------

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let w = tx.last_dim();
        let mut out = tx.data().to_vec();
        if w > 0 {
            for row in out.chunks_mut(w) {
                softmax_in_place(row);
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let t = self.tracked(x);
        self.push(v, Op::Softmax(x), t)
    }

    /// Rows divided by `max(||row||, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let w = tx.last_dim();
        let mut out = tx.data().to_vec();
        let mut norms = Vec::new();
        if w > 0 {
            for row in out.chunks_mut(w) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let d = n.max(eps);
                row.iter_mut().for_each(|v| *v /= d);
                norms.push(n);
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let t = self.tracked(x);
        self.push(v, Op::L2Normalize(x, norms, eps), t)
    }

    /// Euclidean norm of each row over the last axis; gradient zero at the origin.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let w = tx.last_dim().max(1);
        let data: Vec<f64> = tx
            .data()
            .chunks(w)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let v = Tensor::new(Self::reduced_shape(tx.shape()), data).expect("reduced");
        let t = self.tracked(x);
        self.push(v, Op::RowNorm(x), t)
    }

    // ----- structure ---------------------------------------------------

    /// `(m x k) * (k x n)` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), Layout::Normal, tb.data(), Layout::Normal, 0.0, &mut out);
        let v = Tensor::new(vec![m, n], out)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::MatMul { a, b, m, k, n }, t))
    }

    /// Concatenates two 2-D tensors along columns.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(Error::shape(
                "concat_last",
                format!("{:?} ++ {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (r, ca, cb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&ta.data()[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&tb.data()[i * cb..(i + 1) * cb]);
        }
        let v = Tensor::new(vec![r, ca + cb], out)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::ConcatLast(a, b), t))
    }

    /// Rows `idx` along the leading axis.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tx.rows()) {
            return Err(Error::shape(
                "select_rows",
                format!("row {bad} out of {}", tx.rows()),
            ));
        }
        let v = tx.select_rows(idx);
        let t = self.tracked(x);
        Ok(self.push(v, Op::SelectRows(x, idx.to_vec()), t))
    }

    /// `out[i] = x[i, idx[i]]` for a 2-D `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.shape()[0] != idx.len() {
            return Err(Error::shape(
                "pick",
                format!("{:?} with {} indices", tx.shape(), idx.len()),
            ));
        }
        let c = tx.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::shape("pick", format!("column {bad} out of {c}")));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| tx.data()[i * c + j]).collect();
        let v = Tensor::new(vec![idx.len()], data)?;
        let t = self.tracked(x);
        Ok(self.push(v, Op::Pick(x, idx.to_vec()), t))
    }

    /// Row-wise `ln sum exp` restricted to entries where `mask` is true.
    /// Every row must have at least one unmasked entry.
    pub fn masked_logsumexp(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || mask.len() != tx.numel() {
            return Err(Error::shape(
                "masked_logsumexp",
                format!("{:?} with mask of {}", tx.shape(), mask.len()),
            ));
        }
        let w = tx.shape()[1];
        let mut out = Vec::with_capacity(tx.shape()[0]);
        for (i, row) in tx.data().chunks(w.max(1)).enumerate().take(tx.shape()[0]) {
            let m = &mask[i * w..(i + 1) * w];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument(format!(
                    "masked_logsumexp: row {i} has no active entry"
                )));
            }
            let s: f64 = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| (v - mx).exp())
                .sum();
            out.push(mx + s.ln());
        }
        let v = Tensor::new(vec![tx.shape()[0]], out)?;
        let t = self.tracked(x);
        Ok(self.push(v, Op::MaskedLogSumExp(x, mask), t))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let t = self.tracked(x);
        Ok(self.push(v, Op::Reshape(x), t))
    }

    // ----- layers ------------------------------------------------------

    /// 1-D convolution of `x[B, Ch, S]` with `w[F, Ch, k]` plus `b[F]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 3 {
            return Err(Error::shape("conv1d", format!("input rank {} != 3", tx.rank())));
        }
        if tw.rank() != 3 {
            return Err(Error::shape("conv1d", format!("weight rank {} != 3", tw.rank())));
        }
        let (batch, in_ch, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (filters, w_ch, kernel) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if w_ch != in_ch {
            return Err(Error::shape(
                "conv1d",
                format!("channel dimension: input has {in_ch}, weight expects {w_ch}"),
            ));
        }
        if tb.shape() != [filters] {
            return Err(Error::shape(
                "conv1d",
                format!("bias dimension {:?} != [{filters}]", tb.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv1d", "stride must be >= 1"));
        }
        if kernel == 0 || kernel > len + 2 * pad {
            return Err(Error::shape(
                "conv1d",
                format!("kernel dimension {kernel} exceeds padded length {}", len + 2 * pad),
            ));
        }
        let out_len = (len + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom {
            batch,
            in_ch,
            len,
            filters,
            kernel,
            out_len,
            stride,
            pad,
        };
        let col = im2col(tx.data(), &geom);
        let cols = batch * out_len;
        let mut yp = vec![0.0; filters * cols];
        gemm(
            filters,
            in_ch * kernel,
            cols,
            tw.data(),
            Layout::Normal,
            &col,
            Layout::Normal,
            0.0,
            &mut yp,
        );
        let mut out = vec![0.0; batch * filters * out_len];
        for f in 0..filters {
            let bias = tb.data()[f];
            for bi in 0..batch {
                let src = &yp[f * cols + bi * out_len..f * cols + (bi + 1) * out_len];
                let dst = &mut out[(bi * filters + f) * out_len..(bi * filters + f + 1) * out_len];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
        let v = Tensor::new(vec![batch, filters, out_len], out)?;
        let keep_col = self.tracked(w);
        let t = self.tracked(x) || self.tracked(w) || self.tracked(b);
        let col = if keep_col { col } else { Vec::new() };
        Ok(self.push(v, Op::Conv1d { x, w, b, col, geom }, t))
    }

    /// Batch normalization over `x[B, F, S]` (or `x[B, F]`) per channel `F`.
    ///
    /// In [`BatchNormMode::Batch`] the measured statistics are returned so the
    /// caller can fold them into its running estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let tx = self.value(x);
        if tx.rank() != 2 && tx.rank() != 3 {
            return Err(Error::shape("batchnorm1d", format!("input rank {}", tx.rank())));
        }
        let (batch, channels) = (tx.shape()[0], tx.shape()[1]);
        let inner = if tx.rank() == 3 { tx.shape()[2] } else { 1 };
        for (name, t) in [("gamma", self.value(gamma)), ("beta", self.value(beta))] {
            if t.shape() != [channels] {
                return Err(Error::shape(
                    "batchnorm1d",
                    format!("{name} dimension {:?} != [{channels}]", t.shape()),
                ));
            }
        }
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::shape("batchnorm1d", "running statistics dimension"));
        }
        let (tg, tb) = (self.value(gamma).data(), self.value(beta).data());
        let n = batch * inner;
        let data = tx.data();
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        match mode {
            BatchNormMode::Batch => {
                for c in 0..channels {
                    let mut s = 0.0;
                    for bi in 0..batch {
                        let off = (bi * channels + c) * inner;
                        s += data[off..off + inner].iter().sum::<f64>();
                    }
                    let m = if n > 0 { s / n as f64 } else { 0.0 };
                    let mut ss = 0.0;
                    for bi in 0..batch {
                        let off = (bi * channels + c) * inner;
                        ss += data[off..off + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = if n > 0 { ss / n as f64 } else { 0.0 };
                }
            }
            BatchNormMode::Running => {
                mean.copy_from_slice(running_mean);
                var.copy_from_slice(running_var);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for bi in 0..batch {
            for c in 0..channels {
                let off = (bi * channels + c) * inner;
                for i in off..off + inner {
                    let h = (data[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = tg[c] * h + tb[c];
                }
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        let stats = (mode == BatchNormMode::Batch).then(|| BatchStats {
            var: if n > 1 {
                var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect()
            } else {
                var.clone()
            },
            mean,
        });
        let t = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let node = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == BatchNormMode::Batch,
                channels,
                inner,
            },
            t,
        );
        Ok((node, stats))
    }

    /// Non-overlapping max pooling with window `k` along the last axis of
    /// `x[B, C, S]`; trailing samples that do not fill a window are dropped.
    pub fn maxpool1d(&mut self, x: Var, k: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 || k == 0 {
            return Err(Error::shape("maxpool1d", format!("{:?} window {k}", tx.shape())));
        }
        let (b, c, s) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let so = s / k;
        if so == 0 {
            return Err(Error::shape("maxpool1d", format!("length {s} shorter than window {k}")));
        }
        let mut out = Vec::with_capacity(b * c * so);
        let mut argmax = Vec::with_capacity(b * c * so);
        for r in 0..b * c {
            let row = &tx.data()[r * s..(r + 1) * s];
            for o in 0..so {
                let (j, m) = argmax_first(&row[o * k..(o + 1) * k]);
                out.push(m);
                argmax.push(r * s + o * k + j);
            }
        }
        let v = Tensor::new(vec![b, c, so], out)?;
        let t = self.tracked(x);
        Ok(self.push(v, Op::MaxPool(x, argmax), t))
    }

    /// Inverted dropout with a mask drawn from `seed`; `p = 0` is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        let t = self.tracked(x);
        Ok(self.push(v, Op::Dropout(x, mask), t))
    }

    // ----- backward ----------------------------------------------------

    /// Gradients of the one-element node `loss` with respect to every
    /// tracked node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.tracked(loss) {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.tracked(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, plan } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let idx = |k: usize, which: bool| match plan {
                    None => k,
                    Some(p) => {
                        if which {
                            p.ib[k]
                        } else {
                            p.ia[k]
                        }
                    }
                };
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, gk) in g.iter().enumerate() {
                        let (ia, ib) = (idx(k, false), idx(k, true));
                        ga[ia] += match kind {
                            BinKind::Add | BinKind::Sub => *gk,
                            BinKind::Mul => gk * vb[ib],
                            BinKind::Div => gk / vb[ib],
                        };
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (k, gk) in g.iter().enumerate() {
                        let (ia, ib) = (idx(k, false), idx(k, true));
                        gb[ib] += match kind {
                            BinKind::Add => *gk,
                            BinKind::Sub => -gk,
                            BinKind::Mul => gk * va[ia],
                            BinKind::Div => -gk * va[ia] / (vb[ib] * vb[ib]),
                        };
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * c);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += s * y;
                    }
                }
            }
            Op::Log(x, eps) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > *eps {
                            *d += s / v;
                        }
                    }
                }
            }
            Op::Pow(x, a) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += s * a * v.powf(a - 1.0);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumLast(x) | Op::MeanLast(x) => {
                let w = self.value(*x).last_dim();
                let scale = match &self.nodes[i].op {
                    Op::MeanLast(_) if w > 0 => 1.0 / w as f64,
                    _ => 1.0,
                };
                if let Some(gx) = self.acc(grads, *x) {
                    if w > 0 {
                        for (row, s) in gx.chunks_mut(w).zip(g) {
                            row.iter_mut().for_each(|d| *d += s * scale);
                        }
                    }
                }
            }
            Op::MaxLast(x, argmax) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (&j, s) in argmax.iter().zip(g) {
                        gx[j] += s;
                    }
                }
            }
            Op::Softmax(x) => {
                let w = out.last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    if w > 0 {
                        for ((d, y), gr) in gx.chunks_mut(w).zip(out.data().chunks(w)).zip(g.chunks(w)) {
                            let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for k in 0..w {
                                d[k] += y[k] * (gr[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::L2Normalize(x, norms, eps) => {
                let w = out.last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    if w > 0 {
                        for (((d, y), gr), &n) in gx
                            .chunks_mut(w)
                            .zip(out.data().chunks(w))
                            .zip(g.chunks(w))
                            .zip(norms)
                        {
                            if n >= *eps {
                                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                                for k in 0..w {
                                    d[k] += (gr[k] - y[k] * dot) / n;
                                }
                            } else {
                                for k in 0..w {
                                    d[k] += gr[k] / eps;
                                }
                            }
                        }
                    }
                }
            }
            Op::RowNorm(x) => {
                let tx = self.value(*x);
                let w = tx.last_dim().max(1);
                if let Some(gx) = self.acc(grads, *x) {
                    for (((d, xr), &n), s) in gx
                        .chunks_mut(w)
                        .zip(tx.data().chunks(w))
                        .zip(out.data())
                        .zip(g)
                    {
                        if n > 0.0 {
                            for k in 0..w {
                                d[k] += s * xr[k] / n;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(*m, *n, *k, g, Layout::Normal, vb, Layout::Transposed, 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(*k, *m, *n, va, Layout::Transposed, g, Layout::Normal, 1.0, gb);
                }
            }
            Op::ConcatLast(a, b) => {
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*b).shape()[1];
                let w = ca + cb;
                if let Some(ga) = self.acc(grads, *a) {
                    if ca > 0 {
                        for (d, s) in ga.chunks_mut(ca).zip(g.chunks(w)) {
                            d.iter_mut().zip(&s[..ca]).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if cb > 0 {
                        for (d, s) in gb.chunks_mut(cb).zip(g.chunks(w)) {
                            d.iter_mut().zip(&s[ca..]).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::SelectRows(x, idx) => {
                let w = self.value(*x).row_len();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        for k in 0..w {
                            gx[src * w + k] += g[r * w + k];
                        }
                    }
                }
            }
            Op::Pick(x, idx) => {
                let c = self.value(*x).shape()[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * c + j] += g[r];
                    }
                }
            }
            Op::MaskedLogSumExp(x, mask) => {
                let tx = self.value(*x);
                let w = tx.shape()[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..tx.shape()[0] {
                        let lse = out.data()[r];
                        for k in 0..w {
                            if mask[r * w + k] {
                                gx[r * w + k] += g[r] * (tx.data()[r * w + k] - lse).exp();
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Conv1d { x, w, b, col, geom } => self.conv_backward(*x, *w, *b, col, geom, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                channels,
                inner,
            } => {
                let (channels, inner) = (*channels, *inner);
                let batch = self.value(*x).shape()[0];
                let n = (batch * inner) as f64;
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for bi in 0..batch {
                    for c in 0..channels {
                        let off = (bi * channels + c) * inner;
                        for k in off..off + inner {
                            sum_g[c] += g[k];
                            sum_gx[c] += g[k] * xhat[k];
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
                let gam = self.value(*gamma).data().to_vec();
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..batch {
                        for c in 0..channels {
                            let off = (bi * channels + c) * inner;
                            let k0 = gam[c] * inv_std[c];
                            for k in off..off + inner {
                                gx[k] += if *batch_stats {
                                    k0 * (g[k] - sum_g[c] / n - xhat[k] * sum_gx[c] / n)
                                } else {
                                    k0 * g[k]
                                };
                            }
                        }
                    }
                }
            }
            Op::MaxPool(x, argmax) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (&j, s) in argmax.iter().zip(g) {
                        gx[j] += s;
                    }
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        col: &[f64],
        geom: &ConvGeom,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ConvGeom {
            batch,
            in_ch,
            filters,
            kernel,
            out_len,
            ..
        } = *geom;
        let cols = batch * out_len;
        // [B, F, S'] -> [F, B*S']
        let mut gp = vec![0.0; filters * cols];
        for bi in 0..batch {
            for f in 0..filters {
                let src = &g[(bi * filters + f) * out_len..(bi * filters + f + 1) * out_len];
                gp[f * cols + bi * out_len..f * cols + (bi + 1) * out_len].copy_from_slice(src);
            }
        }
        if let Some(gb) = self.acc(grads, b) {
            for f in 0..filters {
                gb[f] += gp[f * cols..(f + 1) * cols].iter().sum::<f64>();
            }
        }
        if let Some(gw) = self.acc(grads, w) {
            gemm(
                filters,
                cols,
                in_ch * kernel,
                &gp,
                Layout::Normal,
                col,
                Layout::Transposed,
                1.0,
                gw,
            );
        }
        if self.tracked(x) {
            let wv = self.value(w).data();
            let mut dcol = vec![0.0; in_ch * kernel * cols];
            gemm(
                in_ch * kernel,
                filters,
                cols,
                wv,
                Layout::Transposed,
                &gp,
                Layout::Normal,
                0.0,
                &mut dcol,
            );
            if let Some(gx) = self.acc(grads, x) {
                col2im(&dcol, geom, gx);
            }
        }
    }
}

fn argmax_first(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom {
        batch,
        in_ch,
        len,
        kernel,
        out_len,
        stride,
        pad,
        ..
    } = *geom;
    let cols = batch * out_len;
    let mut col = vec![0.0; in_ch * kernel * cols];
    for c in 0..in_ch {
        for j in 0..kernel {
            let row = &mut col[(c * kernel + j) * cols..(c * kernel + j + 1) * cols];
            for bi in 0..batch {
                let src = &x[(bi * in_ch + c) * len..(bi * in_ch + c + 1) * len];
                let dst = &mut row[bi * out_len..(bi + 1) * out_len];
                for (t, d) in dst.iter_mut().enumerate() {
                    let p = (t * stride + j) as isize - pad as isize;
                    if p >= 0 && (p as usize) < len {
                        *d = src[p as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let ConvGeom {
        batch,
        in_ch,
        len,
        kernel,
        out_len,
        stride,
        pad,
        ..
    } = *geom;
    let cols = batch * out_len;
    for c in 0..in_ch {
        for j in 0..kernel {
            let row = &dcol[(c * kernel + j) * cols..(c * kernel + j + 1) * cols];
            for bi in 0..batch {
                let dst = &mut dx[(bi * in_ch + c) * len..(bi * in_ch + c + 1) * len];
                for (t, s) in row[bi * out_len..(bi + 1) * out_len].iter().enumerate() {
                    let p = (t * stride + j) as isize - pad as isize;
                    if p >= 0 && (p as usize) < len {
                        dst[p as usize] += s;
                    }
                }
            }
        }
    }
}

/// Right-aligned broadcasting: output shape and, per output element, the
/// flat source offsets into `a` and `b`.
fn broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for d in 0..rank {
        let (x, y) = (pa[d], pb[d]);
        out.push(if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            return Err(Error::shape(
                "broadcast",
                format!("dimension {d}: {a:?} vs {b:?}"),
            ));
        });
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    let n: usize = out.iter().product();
    let mut ia = Vec::with_capacity(n);
    let mut ib = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        ia.push(idx.iter().zip(&sa).map(|(i, s)| i * s).sum());
        ib.push(idx.iter().zip(&sb).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out, ia, ib))
}
