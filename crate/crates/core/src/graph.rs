//! Reverse-mode autodiff on a flat tape of tensor ops.
//!
//! A [`Graph`] owns every intermediate value; [`Var`] is a copyable handle into
//! it. `backward` walks the tape in reverse and accumulates gradients into a
//! side table, so one graph can be differentiated several times (the
//! discriminator and generator steps of a training iteration share nodes).
//! All reductions run in a fixed serial order: results do not depend on
//! thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-6;
/// Epsilon inside the instance-norm variance square root.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddConst(Var, S),
    OneMinus(Var),
    /// Elementwise multiply of a tensor by a single-element node.
    MulScalarNode { x: Var, s: Var },
    /// Concatenate rank-2 tensors along the last axis.
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    /// Concatenate along axis 0 (batch stacking).
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    /// Gather rows by index; repeated indices accumulate on backward.
    SelectRows { x: Var, idx: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample2x(Var),
    Relu(Var),
    LeakyRelu(Var, S),
    Tanh(Var),
    Sigmoid(Var),
    /// `ln(clamp(x, eps, 1-eps))`, or of `1 - x` when `complement`.
    ClampedLog { x: Var, complement: bool },
    InstanceNorm { x: Var, inv_std: Vec<S> },
    /// `y = x * (1 + scale[b,c]) + shift[b,c]` with per-sample channel params.
    ChannelAffineBc { x: Var, scale: Var, shift: Var },
    /// `y = x * gamma[c] + beta[c]` with shared channel params.
    ChannelAffineC { x: Var, gamma: Var, beta: Var },
    Linear { x: Var, w: Var, b: Var },
    GlobalAvgPool(Var),
    /// Mean over all elements of `|a - b|`.
    MeanAbsDiff(Var, Var),
    MeanAll(Var),
    /// Mean over rows of `0.5 * ||row||^2`.
    HalfMeanRowSq(Var),
    CrossEntropyMean { logits: Var, labels: Vec<usize>, probs: Vec<S> },
    /// Euclidean distance between rows `i` and `j` of a feature matrix.
    RowDist { f: Var, i: usize, j: usize },
    StackScalars(Vec<Var>),
    WeightedSum(Vec<(Var, S)>),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradient table produced by [`Graph::backward`]; indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor<S>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `x` into a fresh gradient-stopping leaf.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x + y);
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x - y);
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x * y);
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "elementwise op on mismatched shapes");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let value = self.nodes[x.0].value.map(|v| v * c);
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::Scale(x, c), ng)
    }

    pub fn add_const(&mut self, x: Var, c: S) -> Var {
        let value = self.nodes[x.0].value.map(|v| v + c);
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::AddConst(x, c), ng)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| S::one() - v);
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::OneMinus(x), ng)
    }

    pub fn mul_by_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.nodes[s.0].value.numel(), 1, "mul_by_scalar needs a scalar node");
        let sv = self.nodes[s.0].value.item();
        let value = self.nodes[x.0].value.map(|v| v * sv);
        let ng = self.any_grad(&[x, s]);
        self.push(value, Op::MulScalarNode { x, s }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.shape()[0];
        let mut cols = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            assert_eq!(s.len(), 2, "concat_cols expects rank-2 tensors");
            assert_eq!(s[0], rows, "concat_cols row count mismatch");
            cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let w = t.shape()[1];
                data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
        }
        let ng = self.any_grad(parts);
        self.push(Tensor::new(vec![rows, cols], data), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.shape();
        assert_eq!(s.len(), 2, "slice_cols expects a rank-2 tensor");
        let (rows, cols) = (s[0], s[1]);
        assert!(start + len <= cols, "slice_cols [{start}, {}) out of {cols}", start + len);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(Tensor::new(vec![rows, len], data), Op::SliceCols { x, start, len }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let value = Tensor::concat_rows(&tensors);
        let ng = self.any_grad(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.shape();
        assert!(start + len <= s[0], "slice_rows out of range");
        let row: usize = s[1..].iter().product();
        let mut shape = vec![len];
        shape.extend_from_slice(&s[1..]);
        let data = t.data()[start * row..(start + len) * row].to_vec();
        let ng = self.nodes[x.0].needs_grad;
        self.push(Tensor::new(shape, data), Op::SliceRows { x, start }, ng)
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.shape();
        let row: usize = s[1..].iter().product();
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&s[1..]);
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            assert!(i < s[0], "select_rows index {i} out of {}", s[0]);
            data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(Tensor::new(shape, data), Op::SelectRows { x, idx: idx.to_vec() }, ng)
    }

    /// 2-D convolution over `[B, H, W, Cin]` with weights `[kh, kw, Cin, Cout]`
    /// and bias `[Cout]`; zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let value = conv::forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        let ng = self.any_grad(&[x, w, b]);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// Nearest-neighbour 2x spatial upsampling of `[B, H, W, C]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.shape();
        assert_eq!(s.len(), 4, "upsample2x expects [B, H, W, C]");
        let (bn, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(vec![bn, 2 * h, 2 * w, c]);
        {
            let src = t.data();
            let dst = out.data_mut();
            for b in 0..bn {
                for y in 0..h {
                    for xx in 0..w {
                        let si = ((b * h + y) * w + xx) * c;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let di = ((b * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx) * c;
                            dst[di..di + c].copy_from_slice(&src[si..si + c]);
                        }
                    }
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(out, Op::Upsample2x(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| if v > S::zero() { v } else { S::zero() });
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Var {
        let value = self.nodes[x.0].value.map(|v| if v > S::zero() { v } else { v * slope });
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::LeakyRelu(x, slope), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.tanh());
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = S::one();
        let value = self.nodes[x.0].value.map(|v| one / (one + (-v).exp()));
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn log_clamped(&mut self, x: Var) -> Var {
        self.clamped_log_impl(x, false)
    }

    /// `ln(clamp(1 - x))` — the usual "fake" term of a probability loss.
    pub fn log1m_clamped(&mut self, x: Var) -> Var {
        self.clamped_log_impl(x, true)
    }

    fn clamped_log_impl(&mut self, x: Var, complement: bool) -> Var {
        let eps = S::of(PROB_EPS);
        let hi = S::one() - eps;
        let value = self.nodes[x.0].value.map(|p| {
            let t = if complement { S::one() - p } else { p };
            t.max(eps).min(hi).ln()
        });
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::ClampedLog { x, complement }, ng)
    }

    /// Instance normalization over the spatial extent of each `(sample, channel)` plane.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.shape();
        assert_eq!(s.len(), 4, "instance_norm expects [B, H, W, C]");
        let (bn, h, w, c) = (s[0], s[1], s[2], s[3]);
        let p = h * w;
        assert!(p > 0);
        let src = t.data();
        let mut out = vec![S::zero(); src.len()];
        let mut inv_std = vec![S::zero(); bn * c];
        let pn = S::of(p as f64);
        let eps = S::of(NORM_EPS);
        for b in 0..bn {
            for ch in 0..c {
                let mut mean = S::zero();
                for i in 0..p {
                    mean += src[(b * p + i) * c + ch];
                }
                mean /= pn;
                let mut var = S::zero();
                for i in 0..p {
                    let d = src[(b * p + i) * c + ch] - mean;
                    var += d * d;
                }
                var /= pn;
                let inv = S::one() / (var + eps).sqrt();
                inv_std[b * c + ch] = inv;
                for i in 0..p {
                    out[(b * p + i) * c + ch] = (src[(b * p + i) * c + ch] - mean) * inv;
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(
            Tensor::new(s.to_vec(), out),
            Op::InstanceNorm { x, inv_std },
            ng,
        )
    }

    /// Per-sample channel affine `y = x * (1 + scale[b,c]) + shift[b,c]`
    /// (adaptive normalization parameters predicted from an attribute code).
    pub fn channel_affine_bc(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (s, sc, sh) = (
            self.nodes[x.0].value.shape().to_vec(),
            self.nodes[scale.0].value.shape().to_vec(),
            self.nodes[shift.0].value.shape().to_vec(),
        );
        assert_eq!(s.len(), 4);
        let (bn, h, w, c) = (s[0], s[1], s[2], s[3]);
        assert_eq!(sc, vec![bn, c], "scale must be [B, C]");
        assert_eq!(sh, vec![bn, c], "shift must be [B, C]");
        let p = h * w;
        let x_d = self.nodes[x.0].value.data();
        let sc_d = self.nodes[scale.0].value.data();
        let sh_d = self.nodes[shift.0].value.data();
        let mut out = vec![S::zero(); x_d.len()];
        for b in 0..bn {
            for i in 0..p {
                let base = (b * p + i) * c;
                for ch in 0..c {
                    out[base + ch] =
                        x_d[base + ch] * (S::one() + sc_d[b * c + ch]) + sh_d[b * c + ch];
                }
            }
        }
        let ng = self.any_grad(&[x, scale, shift]);
        self.push(Tensor::new(s, out), Op::ChannelAffineBc { x, scale, shift }, ng)
    }

    /// Shared channel affine `y = x * gamma[c] + beta[c]` (learned norm parameters).
    pub fn channel_affine_c(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let s = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(s.len(), 4);
        let (bn, h, w, c) = (s[0], s[1], s[2], s[3]);
        assert_eq!(self.nodes[gamma.0].value.shape(), &[c]);
        assert_eq!(self.nodes[beta.0].value.shape(), &[c]);
        let p = h * w;
        let x_d = self.nodes[x.0].value.data();
        let g_d = self.nodes[gamma.0].value.data();
        let b_d = self.nodes[beta.0].value.data();
        let mut out = vec![S::zero(); x_d.len()];
        for b in 0..bn {
            for i in 0..p {
                let base = (b * p + i) * c;
                for ch in 0..c {
                    out[base + ch] = x_d[base + ch] * g_d[ch] + b_d[ch];
                }
            }
        }
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(Tensor::new(s, out), Op::ChannelAffineC { x, gamma, beta }, ng)
    }

    /// Fully connected layer `y = x · w + b` with `x: [B, din]`, `w: [din, dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [B, din]");
        assert_eq!(ws.len(), 2, "linear weight must be [din, dout]");
        assert_eq!(xs[1], ws[0], "linear: {} vs {}", xs[1], ws[0]);
        let (bn, din, dout) = (xs[0], ws[0], ws[1]);
        assert_eq!(self.nodes[b.0].value.shape(), &[dout]);
        let mut out = vec![S::zero(); bn * dout];
        S::gemm_nn(
            bn,
            din,
            dout,
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            S::zero(),
            &mut out,
        );
        let bias = self.nodes[b.0].value.data();
        for r in 0..bn {
            for j in 0..dout {
                out[r * dout + j] += bias[j];
            }
        }
        let ng = self.any_grad(&[x, w, b]);
        self.push(Tensor::new(vec![bn, dout], out), Op::Linear { x, w, b }, ng)
    }

    /// Spatial mean of `[B, H, W, C]` down to `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(s.len(), 4);
        let (bn, h, w, c) = (s[0], s[1], s[2], s[3]);
        let p = h * w;
        let src = self.nodes[x.0].value.data();
        let mut out = vec![S::zero(); bn * c];
        for b in 0..bn {
            for i in 0..p {
                for ch in 0..c {
                    out[b * c + ch] += src[(b * p + i) * c + ch];
                }
            }
        }
        let pn = S::of(p as f64);
        for v in &mut out {
            *v /= pn;
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(Tensor::new(vec![bn, c], out), Op::GlobalAvgPool(x), ng)
    }

    /// Mean absolute deviation per element between two same-shape tensors.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "mean_abs_diff on mismatched shapes");
        let n = S::of(ta.numel() as f64);
        let mut acc = S::zero();
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            acc += (x - y).abs();
        }
        let ng = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(acc / n), Op::MeanAbsDiff(a, b), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let n = S::of(t.numel() as f64);
        let mut acc = S::zero();
        for &v in t.data() {
            acc += v;
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(Tensor::scalar(acc / n), Op::MeanAll(x), ng)
    }

    /// Mean over rows of half the squared row norm: `(1/B) Σ_b 0.5 ||x_b||²`.
    pub fn half_mean_row_sq(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.shape();
        assert_eq!(s.len(), 2, "half_mean_row_sq expects [B, d]");
        let bn = S::of(s[0] as f64);
        let mut acc = S::zero();
        for &v in t.data() {
            acc += v * v;
        }
        let half = S::of(0.5);
        let ng = self.nodes[x.0].needs_grad;
        self.push(Tensor::scalar(half * acc / bn), Op::HalfMeanRowSq(x), ng)
    }

    /// Mean cross-entropy of integer labels under softmax of `logits: [B, N]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Var {
        let t = &self.nodes[logits.0].value;
        let s = t.shape();
        assert_eq!(s.len(), 2, "cross_entropy_mean expects [B, N] logits");
        let (bn, ncls) = (s[0], s[1]);
        assert_eq!(labels.len(), bn, "one label per row");
        let src = t.data();
        let mut probs = vec![S::zero(); bn * ncls];
        let mut loss = S::zero();
        for b in 0..bn {
            assert!(labels[b] < ncls, "label {} out of {} classes", labels[b], ncls);
            let row = &src[b * ncls..(b + 1) * ncls];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = S::zero();
            for &v in row {
                denom += (v - mx).exp();
            }
            let log_denom = denom.ln();
            for j in 0..ncls {
                probs[b * ncls + j] = (row[j] - mx - log_denom).exp();
            }
            loss += -(row[labels[b]] - mx - log_denom);
        }
        loss /= S::of(bn as f64);
        let ng = self.nodes[logits.0].needs_grad;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMean { logits, labels: labels.to_vec(), probs },
            ng,
        )
    }

    /// Euclidean distance between rows `i` and `j` of `f: [R, D]`.
    /// The gradient at exactly zero distance is defined as zero.
    pub fn row_distance(&mut self, f: Var, i: usize, j: usize) -> Var {
        let t = &self.nodes[f.0].value;
        let s = t.shape();
        assert_eq!(s.len(), 2);
        let (rows, d) = (s[0], s[1]);
        assert!(i < rows && j < rows);
        let data = t.data();
        let mut acc = S::zero();
        for k in 0..d {
            let diff = data[i * d + k] - data[j * d + k];
            acc += diff * diff;
        }
        let ng = self.nodes[f.0].needs_grad;
        self.push(Tensor::scalar(acc.sqrt()), Op::RowDist { f, i, j }, ng)
    }

    /// Stacks single-element nodes into a rank-1 vector.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::with_capacity(parts.len());
        for p in parts {
            data.push(self.nodes[p.0].value.item());
        }
        let ng = self.any_grad(parts);
        self.push(Tensor::new(vec![parts.len()], data), Op::StackScalars(parts.to_vec()), ng)
    }

    /// Weighted sum of single-element nodes: `Σ c_i · x_i`.
    pub fn weighted_sum(&mut self, terms: &[(Var, S)]) -> Var {
        let mut acc = S::zero();
        for &(v, c) in terms {
            acc += self.nodes[v.0].value.item() * c;
        }
        let vars: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        let ng = self.any_grad(&vars);
        self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Reverse-mode sweep from a single-element root. Returns one gradient slot
    /// per node; slots stay `None` for nodes the root does not depend on (or
    /// that do not require gradients).
    pub fn backward(&self, root: Var) -> Gradients<S> {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(vec![S::one()]);
        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let gy = grads[id].take().unwrap();
            self.propagate(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Gradients { grads }
    }

    /// Adds `gy`-weighted input gradients of node `id` into the table.
    fn propagate(&self, id: usize, gy: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        // Allocates (zeroed) the gradient slot of `v` on first touch.
        macro_rules! slot {
            ($v:expr) => {{
                let n = self.nodes[$v.0].value.numel();
                grads[$v.0].get_or_insert_with(|| vec![S::zero(); n])
            }};
        }
        // Skip work for inputs that do not require gradients.
        macro_rules! live {
            ($v:expr) => {
                self.nodes[$v.0].needs_grad
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if live!(a) {
                    for (g, &d) in slot!(a).iter_mut().zip(gy) {
                        *g += d;
                    }
                }
                if live!(b) {
                    for (g, &d) in slot!(b).iter_mut().zip(gy) {
                        *g += d;
                    }
                }
            }
            Op::Sub(a, b) => {
                if live!(a) {
                    for (g, &d) in slot!(a).iter_mut().zip(gy) {
                        *g += d;
                    }
                }
                if live!(b) {
                    for (g, &d) in slot!(b).iter_mut().zip(gy) {
                        *g -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if live!(a) {
                    let bv = self.nodes[b.0].value.data();
                    for ((g, &d), &vb) in slot!(a).iter_mut().zip(gy).zip(bv) {
                        *g += d * vb;
                    }
                }
                if live!(b) {
                    let av = self.nodes[a.0].value.data();
                    for ((g, &d), &va) in slot!(b).iter_mut().zip(gy).zip(av) {
                        *g += d * va;
                    }
                }
            }
            Op::Scale(x, c) => {
                if live!(x) {
                    for (g, &d) in slot!(x).iter_mut().zip(gy) {
                        *g += d * *c;
                    }
                }
            }
            Op::AddConst(x, _) => {
                if live!(x) {
                    for (g, &d) in slot!(x).iter_mut().zip(gy) {
                        *g += d;
                    }
                }
            }
            Op::OneMinus(x) => {
                if live!(x) {
                    for (g, &d) in slot!(x).iter_mut().zip(gy) {
                        *g -= d;
                    }
                }
            }
            Op::MulScalarNode { x, s } => {
                let sv = self.nodes[s.0].value.item();
                if live!(x) {
                    for (g, &d) in slot!(x).iter_mut().zip(gy) {
                        *g += d * sv;
                    }
                }
                if live!(s) {
                    let xv = self.nodes[x.0].value.data();
                    let mut acc = S::zero();
                    for (&d, &v) in gy.iter().zip(xv) {
                        acc += d * v;
                    }
                    slot!(s)[0] += acc;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if live!(p) {
                        let gp = slot!(p);
                        for r in 0..rows {
                            for k in 0..w {
                                gp[r * w + k] += gy[r * total + offset + k];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                if live!(x) {
                    let cols = self.nodes[x.0].value.shape()[1];
                    let rows = self.nodes[x.0].value.shape()[0];
                    let gp = slot!(x);
                    for r in 0..rows {
                        for k in 0..*len {
                            gp[r * cols + start + k] += gy[r * len + k];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if live!(p) {
                        for (g, &d) in slot!(p).iter_mut().zip(&gy[offset..offset + n]) {
                            *g += d;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                if live!(x) {
                    let row: usize = self.nodes[x.0].value.shape()[1..].iter().product();
                    let gp = slot!(x);
                    for (k, &d) in gy.iter().enumerate() {
                        gp[start * row + k] += d;
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                if live!(x) {
                    let row: usize = self.nodes[x.0].value.shape()[1..].iter().product();
                    let gp = slot!(x);
                    for (r, &i) in idx.iter().enumerate() {
                        for k in 0..row {
                            gp[i * row + k] += gy[r * row + k];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv::backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    gy,
                    *stride,
                    *pad,
                    live!(x),
                );
                if live!(x) {
                    let dx = dx.expect("dx requested");
                    for (g, d) in slot!(x).iter_mut().zip(dx) {
                        *g += d;
                    }
                }
                if live!(w) {
                    for (g, d) in slot!(w).iter_mut().zip(dw) {
                        *g += d;
                    }
                }
                if live!(b) {
                    for (g, d) in slot!(b).iter_mut().zip(db) {
                        *g += d;
                    }
                }
            }
            Op::Upsample2x(x) => {
                if live!(x) {
                    let s = self.nodes[x.0].value.shape();
                    let (bn, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let gp = slot!(x);
                    for b in 0..bn {
                        for y in 0..h {
                            for xx in 0..w {
                                let si = ((b * h + y) * w + xx) * c;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let di =
                                        ((b * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx) * c;
                                    for ch in 0..c {
                                        gp[si + ch] += gy[di + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if live!(x) {
                    let yv = node.value.data();
                    for ((g, &d), &y) in slot!(x).iter_mut().zip(gy).zip(yv) {
                        if y > S::zero() {
                            *g += d;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                if live!(x) {
                    let xv = self.nodes[x.0].value.data();
                    for ((g, &d), &v) in slot!(x).iter_mut().zip(gy).zip(xv) {
                        *g += if v > S::zero() { d } else { d * *slope };
                    }
                }
            }
            Op::Tanh(x) => {
                if live!(x) {
                    let yv = node.value.data();
                    for ((g, &d), &y) in slot!(x).iter_mut().zip(gy).zip(yv) {
                        *g += d * (S::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if live!(x) {
                    let yv = node.value.data();
                    for ((g, &d), &y) in slot!(x).iter_mut().zip(gy).zip(yv) {
                        *g += d * y * (S::one() - y);
                    }
                }
            }
            Op::ClampedLog { x, complement } => {
                if live!(x) {
                    let eps = S::of(PROB_EPS);
                    let hi = S::one() - eps;
                    let xv = self.nodes[x.0].value.data();
                    for ((g, &d), &p) in slot!(x).iter_mut().zip(gy).zip(xv) {
                        let t = if *complement { S::one() - p } else { p };
                        if t > eps && t < hi {
                            let dt = d / t;
                            *g += if *complement { -dt } else { dt };
                        }
                    }
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                if live!(x) {
                    let s = self.nodes[x.0].value.shape();
                    let (bn, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let p = h * w;
                    let pn = S::of(p as f64);
                    let yv = node.value.data();
                    let gp = slot!(x);
                    for b in 0..bn {
                        for ch in 0..c {
                            let inv = inv_std[b * c + ch];
                            let mut sum_dy = S::zero();
                            let mut sum_dyy = S::zero();
                            for i in 0..p {
                                let k = (b * p + i) * c + ch;
                                sum_dy += gy[k];
                                sum_dyy += gy[k] * yv[k];
                            }
                            let mean_dy = sum_dy / pn;
                            let mean_dyy = sum_dyy / pn;
                            for i in 0..p {
                                let k = (b * p + i) * c + ch;
                                gp[k] += inv * (gy[k] - mean_dy - yv[k] * mean_dyy);
                            }
                        }
                    }
                }
            }
            Op::ChannelAffineBc { x, scale, shift } => {
                let s = self.nodes[x.0].value.shape();
                let (bn, h, w, c) = (s[0], s[1], s[2], s[3]);
                let p = h * w;
                let xv = self.nodes[x.0].value.data();
                let sv = self.nodes[scale.0].value.data();
                if live!(x) {
                    let gp = slot!(x);
                    for b in 0..bn {
                        for i in 0..p {
                            let base = (b * p + i) * c;
                            for ch in 0..c {
                                gp[base + ch] += gy[base + ch] * (S::one() + sv[b * c + ch]);
                            }
                        }
                    }
                }
                if live!(scale) {
                    let gp = slot!(scale);
                    for b in 0..bn {
                        for i in 0..p {
                            let base = (b * p + i) * c;
                            for ch in 0..c {
                                gp[b * c + ch] += gy[base + ch] * xv[base + ch];
                            }
                        }
                    }
                }
                if live!(shift) {
                    let gp = slot!(shift);
                    for b in 0..bn {
                        for i in 0..p {
                            let base = (b * p + i) * c;
                            for ch in 0..c {
                                gp[b * c + ch] += gy[base + ch];
                            }
                        }
                    }
                }
            }
            Op::ChannelAffineC { x, gamma, beta } => {
                let s = self.nodes[x.0].value.shape();
                let (bn, h, w, c) = (s[0], s[1], s[2], s[3]);
                let p = h * w;
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gamma.0].value.data();
                if live!(x) {
                    let gp = slot!(x);
                    for b in 0..bn {
                        for i in 0..p {
                            let base = (b * p + i) * c;
                            for ch in 0..c {
                                gp[base + ch] += gy[base + ch] * gv[ch];
                            }
                        }
                    }
                }
                if live!(gamma) {
                    let gp = slot!(gamma);
                    for b in 0..bn {
                        for i in 0..p {
                            let base = (b * p + i) * c;
                            for ch in 0..c {
                                gp[ch] += gy[base + ch] * xv[base + ch];
                            }
                        }
                    }
                }
                if live!(beta) {
                    let gp = slot!(beta);
                    for b in 0..bn {
                        for i in 0..p {
                            let base = (b * p + i) * c;
                            for ch in 0..c {
                                gp[ch] += gy[base + ch];
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let (bn, din, dout) = (xs[0], ws[0], ws[1]);
                if live!(x) {
                    let mut dx = vec![S::zero(); bn * din];
                    S::gemm_nt(bn, dout, din, gy, self.nodes[w.0].value.data(), S::zero(), &mut dx);
                    for (g, d) in slot!(x).iter_mut().zip(dx) {
                        *g += d;
                    }
                }
                if live!(w) {
                    let mut dw = vec![S::zero(); din * dout];
                    S::gemm_tn(din, bn, dout, self.nodes[x.0].value.data(), gy, S::zero(), &mut dw);
                    for (g, d) in slot!(w).iter_mut().zip(dw) {
                        *g += d;
                    }
                }
                if live!(b) {
                    let gp = slot!(b);
                    for r in 0..bn {
                        for j in 0..dout {
                            gp[j] += gy[r * dout + j];
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if live!(x) {
                    let s = self.nodes[x.0].value.shape();
                    let (bn, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let p = h * w;
                    let pn = S::of(p as f64);
                    let gp = slot!(x);
                    for b in 0..bn {
                        for i in 0..p {
                            for ch in 0..c {
                                gp[(b * p + i) * c + ch] += gy[b * c + ch] / pn;
                            }
                        }
                    }
                }
            }
            Op::MeanAbsDiff(a, b) => {
                let d = gy[0];
                let n = S::of(self.nodes[a.0].value.numel() as f64);
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if live!(a) {
                    let gp = slot!(a);
                    for (k, g) in gp.iter_mut().enumerate() {
                        let diff = av[k] - bv[k];
                        if diff > S::zero() {
                            *g += d / n;
                        } else if diff < S::zero() {
                            *g -= d / n;
                        }
                    }
                }
                if live!(b) {
                    let gp = slot!(b);
                    for (k, g) in gp.iter_mut().enumerate() {
                        let diff = av[k] - bv[k];
                        if diff > S::zero() {
                            *g -= d / n;
                        } else if diff < S::zero() {
                            *g += d / n;
                        }
                    }
                }
            }
            Op::MeanAll(x) => {
                if live!(x) {
                    let n = S::of(self.nodes[x.0].value.numel() as f64);
                    let d = gy[0] / n;
                    for g in slot!(x).iter_mut() {
                        *g += d;
                    }
                }
            }
            Op::HalfMeanRowSq(x) => {
                if live!(x) {
                    let bn = S::of(self.nodes[x.0].value.shape()[0] as f64);
                    let d = gy[0];
                    let xv = self.nodes[x.0].value.data();
                    for (g, &v) in slot!(x).iter_mut().zip(xv) {
                        *g += d * v / bn;
                    }
                }
            }
            Op::CrossEntropyMean { logits, labels, probs } => {
                if live!(logits) {
                    let s = self.nodes[logits.0].value.shape();
                    let (bn, ncls) = (s[0], s[1]);
                    let d = gy[0] / S::of(bn as f64);
                    let gp = slot!(logits);
                    for b in 0..bn {
                        for j in 0..ncls {
                            let onehot = if labels[b] == j { S::one() } else { S::zero() };
                            gp[b * ncls + j] += d * (probs[b * ncls + j] - onehot);
                        }
                    }
                }
            }
            Op::RowDist { f, i, j } => {
                if live!(f) {
                    let dist = node.value.item();
                    if dist > S::zero() {
                        let dcols = self.nodes[f.0].value.shape()[1];
                        let fv = self.nodes[f.0].value.data();
                        let d = gy[0];
                        let gp = slot!(f);
                        for k in 0..dcols {
                            let diff = (fv[i * dcols + k] - fv[j * dcols + k]) / dist;
                            gp[i * dcols + k] += d * diff;
                            gp[j * dcols + k] -= d * diff;
                        }
                    }
                }
            }
            Op::StackScalars(parts) => {
                for (k, p) in parts.iter().enumerate() {
                    if live!(p) {
                        slot!(p)[0] += gy[k];
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if live!(&v) {
                        slot!(&v)[0] += gy[0] * c;
                    }
                }
            }
        }
    }
}

/// im2col + GEMM convolution kernels. Parallel over the batch with disjoint
/// output slices; weight-gradient reduction is a serial fold in batch order,
/// so results are identical at any thread count.
mod conv {
    use super::*;

    pub struct Dims {
        pub bn: usize,
        pub h: usize,
        pub w: usize,
        pub cin: usize,
        pub kh: usize,
        pub kw: usize,
        pub cout: usize,
        pub oh: usize,
        pub ow: usize,
    }

    pub fn dims<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, stride: usize, pad: usize) -> Dims {
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 4, "conv input must be [B, H, W, Cin]");
        assert_eq!(ws.len(), 4, "conv weight must be [kh, kw, Cin, Cout]");
        assert_eq!(xs[3], ws[2], "conv channel mismatch: {} vs {}", xs[3], ws[2]);
        assert!(stride >= 1);
        let (h, w_) = (xs[1], xs[2]);
        let (kh, kw) = (ws[0], ws[1]);
        assert!(h + 2 * pad >= kh && w_ + 2 * pad >= kw, "kernel larger than padded input");
        Dims {
            bn: xs[0],
            h,
            w: w_,
            cin: xs[3],
            kh,
            kw,
            cout: ws[3],
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w_ + 2 * pad - kw) / stride + 1,
        }
    }

    /// Lays out one sample's receptive fields as rows: `[oh*ow, kh*kw*cin]`.
    fn im2col<S: Scalar>(src: &[S], d: &Dims, stride: usize, pad: usize, col: &mut [S]) {
        let k = d.kh * d.kw * d.cin;
        debug_assert_eq!(col.len(), d.oh * d.ow * k);
        for v in col.iter_mut() {
            *v = S::zero();
        }
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let row = (oy * d.ow + ox) * k;
                for ky in 0..d.kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let src_off = ((iy as usize) * d.w + ix as usize) * d.cin;
                        let dst_off = row + (ky * d.kw + kx) * d.cin;
                        col[dst_off..dst_off + d.cin]
                            .copy_from_slice(&src[src_off..src_off + d.cin]);
                    }
                }
            }
        }
    }

    /// Scatter-adds a column gradient back onto one sample's input gradient.
    fn col2im<S: Scalar>(col: &[S], d: &Dims, stride: usize, pad: usize, dst: &mut [S]) {
        let k = d.kh * d.kw * d.cin;
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let row = (oy * d.ow + ox) * k;
                for ky in 0..d.kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let dst_off = ((iy as usize) * d.w + ix as usize) * d.cin;
                        let src_off = row + (ky * d.kw + kx) * d.cin;
                        for c in 0..d.cin {
                            dst[dst_off + c] += col[src_off + c];
                        }
                    }
                }
            }
        }
    }

    pub fn forward<S: Scalar>(
        x: &Tensor<S>,
        w: &Tensor<S>,
        bias: &Tensor<S>,
        stride: usize,
        pad: usize,
    ) -> Tensor<S> {
        let d = dims(x, w, stride, pad);
        assert_eq!(bias.shape(), &[d.cout], "conv bias must be [Cout]");
        let k = d.kh * d.kw * d.cin;
        let p = d.oh * d.ow;
        let mut out = Tensor::zeros(vec![d.bn, d.oh, d.ow, d.cout]);
        let in_plane = d.h * d.w * d.cin;
        let xd = x.data();
        let wd = w.data();
        let bd = bias.data();
        out.data_mut()
            .par_chunks_mut(p * d.cout)
            .enumerate()
            .for_each(|(b, out_b)| {
                let mut col = vec![S::zero(); p * k];
                im2col(&xd[b * in_plane..(b + 1) * in_plane], &d, stride, pad, &mut col);
                S::gemm_nn(p, k, d.cout, &col, wd, S::zero(), out_b);
                for r in 0..p {
                    for c in 0..d.cout {
                        out_b[r * d.cout + c] += bd[c];
                    }
                }
            });
        out
    }

    /// Returns `(dx (if wanted), dw, db)`.
    #[allow(clippy::type_complexity)]
    pub fn backward<S: Scalar>(
        x: &Tensor<S>,
        w: &Tensor<S>,
        gy: &[S],
        stride: usize,
        pad: usize,
        want_dx: bool,
    ) -> (Option<Vec<S>>, Vec<S>, Vec<S>) {
        let d = dims(x, w, stride, pad);
        let k = d.kh * d.kw * d.cin;
        let p = d.oh * d.ow;
        let in_plane = d.h * d.w * d.cin;
        let xd = x.data();
        let wd = w.data();

        let mut dx = if want_dx { Some(vec![S::zero(); xd.len()]) } else { None };

        // Per-sample weight/bias gradients collected in batch order, then
        // folded serially for determinism.
        let per_sample: Vec<(Vec<S>, Vec<S>)> = match dx.as_mut() {
            Some(dx_buf) => dx_buf
                .par_chunks_mut(in_plane)
                .enumerate()
                .map(|(b, dx_b)| {
                    let gy_b = &gy[b * p * d.cout..(b + 1) * p * d.cout];
                    let mut col = vec![S::zero(); p * k];
                    im2col(&xd[b * in_plane..(b + 1) * in_plane], &d, stride, pad, &mut col);
                    let mut dw_b = vec![S::zero(); k * d.cout];
                    S::gemm_tn(k, p, d.cout, &col, gy_b, S::zero(), &mut dw_b);
                    let mut db_b = vec![S::zero(); d.cout];
                    for r in 0..p {
                        for c in 0..d.cout {
                            db_b[c] += gy_b[r * d.cout + c];
                        }
                    }
                    let mut dcol = vec![S::zero(); p * k];
                    S::gemm_nt(p, d.cout, k, gy_b, wd, S::zero(), &mut dcol);
                    col2im(&dcol, &d, stride, pad, dx_b);
                    (dw_b, db_b)
                })
                .collect(),
            None => (0..d.bn)
                .into_par_iter()
                .map(|b| {
                    let gy_b = &gy[b * p * d.cout..(b + 1) * p * d.cout];
                    let mut col = vec![S::zero(); p * k];
                    im2col(&xd[b * in_plane..(b + 1) * in_plane], &d, stride, pad, &mut col);
                    let mut dw_b = vec![S::zero(); k * d.cout];
                    S::gemm_tn(k, p, d.cout, &col, gy_b, S::zero(), &mut dw_b);
                    let mut db_b = vec![S::zero(); d.cout];
                    for r in 0..p {
                        for c in 0..d.cout {
                            db_b[c] += gy_b[r * d.cout + c];
                        }
                    }
                    (dw_b, db_b)
                })
                .collect(),
        };

        let mut dw = vec![S::zero(); k * d.cout];
        let mut db = vec![S::zero(); d.cout];
        for (dw_b, db_b) in per_sample {
            for (g, d_) in dw.iter_mut().zip(dw_b) {
                *g += d_;
            }
            for (g, d_) in db.iter_mut().zip(db_b) {
                *g += d_;
            }
        }
        (dx, dw, db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Central finite difference of `build` (a scalar-producing graph closure)
    /// with respect to one leaf, compared against reverse-mode, elementwise.
    fn check_grad(
        build: impl Fn(&mut Graph<f64>, Var) -> Var,
        leaf_shape: Vec<usize>,
        seed: u64,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let numel: usize = leaf_shape.iter().product();
        let base: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(leaf_shape.clone(), base.clone()), true);
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.get(x).expect("leaf gradient").to_vec();

        let h = 1e-5;
        for i in 0..numel {
            let eval = |v: f64| {
                let mut data = base.clone();
                data[i] = v;
                let mut g2 = Graph::new();
                let x2 = g2.leaf(Tensor::new(leaf_shape.clone(), data), false);
                let y2 = build(&mut g2, x2);
                g2.value(y2).item()
            };
            let num = (eval(base[i] + h) - eval(base[i] - h)) / (2.0 * h);
            let denom = num.abs().max(analytic[i].abs());
            if denom > 1e-7 {
                let rel = (num - analytic[i]).abs() / denom;
                assert!(
                    rel < 1e-5,
                    "grad mismatch at {i}: analytic {} vs numeric {num} (rel {rel})",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        check_grad(
            |g, x| {
                let a = g.scale(x, 3.0);
                let b = g.add_const(x, 0.5);
                let c = g.mul(a, b);
                let d = g.sub(c, x);
                g.mean_all(d)
            },
            vec![2, 3],
            1,
        );
    }

    #[test]
    fn activation_grads() {
        check_grad(
            |g, x| {
                let a = g.tanh(x);
                let b = g.sigmoid(a);
                let c = g.leaky_relu(b, 0.2);
                let d = g.relu(c);
                g.mean_all(d)
            },
            vec![3, 4],
            2,
        );
    }

    #[test]
    fn conv_instance_norm_pipeline_grads() {
        // x -> conv -> instance norm -> relu -> pool -> mean
        let mut rng = StdRng::seed_from_u64(3);
        let w: Vec<f64> = (0..3 * 3 * 2 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.1..0.1)).collect();
        check_grad(
            move |g, x| {
                let wv = g.constant(Tensor::new(vec![3, 3, 2, 3], w.clone()));
                let bv = g.constant(Tensor::new(vec![3], b.clone()));
                let c = g.conv2d(x, wv, bv, 1, 1);
                let n = g.instance_norm(c);
                let r = g.relu(n);
                let p = g.global_avg_pool(r);
                g.half_mean_row_sq(p)
            },
            vec![2, 4, 4, 2],
            4,
        );
    }

    #[test]
    fn conv_weight_and_bias_grads() {
        let mut rng = StdRng::seed_from_u64(5);
        let x: Vec<f64> = (0..2 * 4 * 3 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Differentiate with respect to the weights this time.
        check_grad(
            move |g, w| {
                let xv = g.constant(Tensor::new(vec![2, 4, 3, 2], x.clone()));
                let bv = g.constant(Tensor::zeros(vec![4]));
                let c = g.conv2d(xv, w, bv, 2, 1);
                let t = g.tanh(c);
                g.mean_all(t)
            },
            vec![3, 3, 2, 4],
            6,
        );
    }

    #[test]
    fn strided_conv_output_shape() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![1, 64, 32, 3]));
        let w = g.constant(Tensor::zeros(vec![3, 3, 3, 8]));
        let b = g.constant(Tensor::zeros(vec![8]));
        let y = g.conv2d(x, w, b, 2, 1);
        assert_eq!(g.value(y).shape(), &[1, 32, 16, 8]);
    }

    #[test]
    fn upsample_adjoint_grads() {
        check_grad(
            |g, x| {
                let u = g.upsample2x(x);
                let t = g.tanh(u);
                g.mean_all(t)
            },
            vec![1, 2, 3, 2],
            7,
        );
    }

    #[test]
    fn linear_and_concat_grads() {
        let mut rng = StdRng::seed_from_u64(8);
        let w: Vec<f64> = (0..6 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        check_grad(
            move |g, x| {
                let left = g.slice_cols(x, 0, 2);
                let right = g.slice_cols(x, 2, 4);
                let re = g.concat_cols(&[right, left]);
                let wv = g.constant(Tensor::new(vec![6, 3], w.clone()));
                let bv = g.constant(Tensor::zeros(vec![3]));
                let y = g.linear(re, wv, bv);
                g.half_mean_row_sq(y)
            },
            vec![2, 6],
            9,
        );
    }

    #[test]
    fn row_ops_grads() {
        check_grad(
            |g, x| {
                let top = g.slice_rows(x, 0, 2);
                let gathered = g.select_rows(x, &[2, 0, 2]);
                let merged = g.concat_rows(&[top, gathered]);
                let d = g.row_distance(merged, 0, 3);
                let e = g.row_distance(merged, 1, 2);
                g.weighted_sum(&[(d, 1.0), (e, 0.5)])
            },
            vec![3, 4],
            10,
        );
    }

    #[test]
    fn clamped_log_grads() {
        // Keep probabilities inside the clamp region so FD is smooth.
        check_grad(
            |g, x| {
                let p = g.sigmoid(x);
                let lp = g.log_clamped(p);
                let lq = g.log1m_clamped(p);
                let a = g.mean_all(lp);
                let b = g.mean_all(lq);
                g.weighted_sum(&[(a, 1.0), (b, -2.0)])
            },
            vec![2, 3],
            11,
        );
    }

    #[test]
    fn clamped_log_zero_grad_outside_clamp() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![0.0, 1.0]), true);
        let lp = g.log_clamped(x);
        let y = g.mean_all(lp);
        // Values land on the clamp boundary: gradient must be exactly zero.
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0]);
        // And values are the clamped logs.
        assert!((g.value(lp).data()[0] - PROB_EPS.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_grads_and_value() {
        check_grad(
            |g, x| g.cross_entropy_mean(x, &[1, 0]),
            vec![2, 4],
            12,
        );
        // Uniform logits over N classes give ln(N) exactly.
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![3, 20]));
        let y = g.cross_entropy_mean(x, &[0, 5, 19]);
        assert!((g.value(y).item() - (20.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mean_abs_diff_grads() {
        let mut rng = StdRng::seed_from_u64(13);
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        check_grad(
            move |g, x| {
                let bv = g.constant(Tensor::new(vec![2, 3], b.clone()));
                g.mean_abs_diff(x, bv)
            },
            vec![2, 3],
            14,
        );
    }

    #[test]
    fn channel_affine_grads() {
        let mut rng = StdRng::seed_from_u64(15);
        let x: Vec<f64> = (0..2 * 2 * 2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Grad w.r.t. the per-sample scale/shift (packed as one [B, 2C] leaf).
        check_grad(
            move |g, packed| {
                let scale = g.slice_cols(packed, 0, 3);
                let shift = g.slice_cols(packed, 3, 3);
                let xv = g.constant(Tensor::new(vec![2, 2, 2, 3], x.clone()));
                let y = g.channel_affine_bc(xv, scale, shift);
                let t = g.tanh(y);
                g.mean_all(t)
            },
            vec![2, 6],
            16,
        );
    }

    #[test]
    fn channel_affine_c_grads() {
        let mut rng = StdRng::seed_from_u64(17);
        let x: Vec<f64> = (0..3 * 2 * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let beta: Vec<f64> = vec![0.3, -0.2];
        // FD over gamma (rank-1 [C] leaf), beta held constant.
        check_grad(
            move |g, gamma| {
                let xv = g.constant(Tensor::new(vec![3, 2, 2, 2], x.clone()));
                let bv = g.constant(Tensor::new(vec![2], beta.clone()));
                let y = g.channel_affine_c(xv, gamma, bv);
                let t = g.tanh(y);
                g.mean_all(t)
            },
            vec![2],
            18,
        );

        // Direct value check for the rank-1 variant.
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let gamma = g.leaf(Tensor::new(vec![2], vec![2.0, 0.5]), true);
        let beta = g.leaf(Tensor::new(vec![2], vec![1.0, -1.0]), true);
        let y = g.channel_affine_c(x, gamma, beta);
        assert_eq!(g.value(y).data(), &[3.0, 0.0, 7.0, 1.0]);
        let m = g.mean_all(y);
        let grads = g.backward(m);
        // dgamma[c] = mean-weighted sum of x over positions.
        assert_eq!(grads.get(gamma).unwrap(), &[(1.0 + 3.0) / 4.0, (2.0 + 4.0) / 4.0]);
        assert_eq!(grads.get(beta).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn mul_by_scalar_and_one_minus_grads() {
        check_grad(
            |g, x| {
                let s = g.slice_rows(x, 0, 1);
                let srow = g.slice_cols(s, 0, 1);
                let sflat = g.mean_all(srow); // scalar node carrying x[0,0]
                let rest = g.slice_rows(x, 1, 2);
                let scaled = g.mul_by_scalar(rest, sflat);
                let om = g.one_minus(sflat);
                let scaled2 = g.mul_by_scalar(scaled, om);
                g.mean_all(scaled2)
            },
            vec![3, 2],
            19,
        );
    }

    #[test]
    fn stack_scalars_grads() {
        check_grad(
            |g, x| {
                let a = g.row_distance(x, 0, 1);
                let b = g.row_distance(x, 1, 2);
                let st = g.stack_scalars(&[a, b]);
                let r = g.relu(st);
                g.mean_all(r)
            },
            vec![3, 3],
            20,
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]), true);
        let d = g.detach(x);
        let y = g.mul(x, d);
        let m = g.mean_all(y);
        let grads = g.backward(m);
        // d(mean(x * const))/dx = const / n
        assert_eq!(grads.get(x).unwrap(), &[0.5, 1.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn backward_twice_same_graph_is_consistent() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![0.3, -0.7]), true);
        let t = g.tanh(x);
        let y = g.mean_all(t);
        let g1 = g.backward(y);
        let g2 = g.backward(y);
        assert_eq!(g1.get(x).unwrap(), g2.get(x).unwrap());
    }

    #[test]
    fn instance_norm_normalizes_planes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(
            vec![1, 2, 2, 1],
            vec![1.0, 2.0, 3.0, 4.0],
        ));
        let y = g.instance_norm(x);
        let d = g.value(y).data();
        let mean: f64 = d.iter().sum::<f64>() / 4.0;
        let var: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps slightly shrinks the variance
    }
}
