//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] walks the tape in reverse and produces gradients for
//! every node that (transitively) depends on a leaf created with
//! `requires_grad = true`. Nodes that do not need gradients are skipped, which
//! keeps frozen base weights cheap.
//!
//! Images flow through the graph as `[C, H, W]` tensors, token sequences as
//! `[T, D]` matrices. There is no batch dimension; callers loop over samples.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
/// Epsilon used when unit-normalizing feature columns.
pub const FEATURE_NORM_EPS: f64 = 1e-10;
const ROW_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Silu(Var),
    Gelu(Var),
    Relu(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    Upsample2x(Var),
    AddChannel(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    WeightedSumRows {
        x: Var,
        weights: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ChannelUnitNorm {
        x: Var,
        norms: Vec<f64>,
    },
    MeanAbsDiff(Var, Var),
    SquaredDiffSum(Var, Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    reduced_precision: bool,
}

fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(inner);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Unrolls `[C, H, W]` into `[C·k·k, Ho·Wo]` patch columns.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, spec: Conv2dSpec) -> (Vec<f64>, usize, usize) {
    let k = spec.kernel;
    let ho = spec.output_size(h);
    let wo = spec.output_size(w);
    let mut cols = vec![0.0; c * k * k * ho * wo];
    let p = spec.padding as isize;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, spec: Conv2dSpec, out: &mut [f64]) {
    let k = spec.kernel;
    let ho = spec.output_size(h);
    let wo = spec.output_size(w);
    let p = spec.padding as isize;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - p;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rounds matmul and convolution outputs to `f32` precision.
    pub fn with_reduced_precision(mut self, enabled: bool) -> Self {
        self.reduced_precision = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::tanh);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    /// `a · b` (or `a · bᵀ` when `trans_b`), both 2-D.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects matrices");
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            0.0,
        );
        let mut out = Tensor::new(&[m, n], out);
        if self.reduced_precision {
            round_f32(&mut out);
        }
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::MatMul { a, b, trans_b }, rg)
    }

    /// `x · wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (sx, sw) = (self.shape(x), self.shape(w));
        assert_eq!(sx.len(), 2, "linear input must be [n, in]");
        let (n, din) = (sx[0], sx[1]);
        let dout = sw[0];
        assert_eq!(sw[1], din, "linear weight/input mismatch");
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), dout);
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            beta,
        );
        let mut out = Tensor::new(&[n, dout], out);
        if self.reduced_precision {
            round_f32(&mut out);
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    /// 2-D convolution. `x: [C, H, W]`, `w: [C_out, C·k·k]`, `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let sx = self.shape(x);
        assert_eq!(sx.len(), 3, "conv input must be [C, H, W]");
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let sw = self.shape(w);
        let cout = sw[0];
        assert_eq!(
            sw[1],
            c * spec.kernel * spec.kernel,
            "conv weight does not match input channels"
        );
        let (cols, ho, wo) = im2col(self.value(x).data(), c, h, wd, spec);
        let mut out = vec![0.0; cout * ho * wo];
        let beta = if let Some(b) = b {
            let bias = self.value(b).data();
            for (co, row) in out.chunks_mut(ho * wo).enumerate() {
                row.fill(bias[co]);
            }
            1.0
        } else {
            0.0
        };
        gemm(
            cout,
            c * spec.kernel * spec.kernel,
            ho * wo,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out,
            beta,
        );
        let mut out = Tensor::new(&[cout, ho, wo], out);
        if self.reduced_precision {
            round_f32(&mut out);
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push(out, Op::Conv2d { x, w, b, spec }, rg)
    }

    /// Nearest-neighbour 2× upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ci * 2 * h + y) * 2 * w + xx] = src[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(&[c, 2 * h, 2 * w], out), Op::Upsample2x(x), rg)
    }

    /// Adds `v[c]` to every element of channel `c` of `x: [C, ...]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let c = self.shape(x)[0];
        assert_eq!(self.value(v).len(), c, "channel bias length mismatch");
        let mut out = self.value(x).clone();
        let per = out.len() / c;
        let bias = self.value(v).data().to_vec();
        for (ci, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            for e in chunk {
                *e += bias[ci];
            }
        }
        let rg = self.any_grad(&[x, v]);
        self.push(out, Op::AddChannel(x, v), rg)
    }

    /// Layer normalization over the last axis of `x: [n, d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let s = self.shape(x);
        let d = *s.last().expect("layer_norm on scalar");
        let n = self.value(x).len() / d;
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        assert!(g.len() == d && bt.len() == d, "layer_norm parameter size mismatch");
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        let shape = s.to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            Tensor::new(&shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over projected inputs.
    /// `q: [nq, d]`, `k, v: [nk, d]`; returns `[nq, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (nq, d) = (self.shape(q)[0], self.shape(q)[1]);
        let nk = self.shape(k)[0];
        assert_eq!(self.shape(k)[1], d);
        assert_eq!(self.shape(v), &[nk, d]);
        assert!(heads >= 1 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        let mut qh = vec![0.0; nq * dh];
        let mut kh = vec![0.0; nk * dh];
        let mut vh = vec![0.0; nk * dh];
        let mut oh = vec![0.0; nq * dh];
        for h in 0..heads {
            gather_head(qd, nq, d, h, dh, &mut qh);
            gather_head(kd, nk, d, h, dh, &mut kh);
            gather_head(vd, nk, d, h, dh, &mut vh);
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(nq, dh, nk, &qh, false, &kh, true, p, 0.0);
            for row in p.chunks_mut(nk) {
                let mut max = f64::NEG_INFINITY;
                for e in row.iter_mut() {
                    *e *= scale;
                    if *e > max {
                        max = *e;
                    }
                }
                let mut sum = 0.0;
                for e in row.iter_mut() {
                    *e = libm::exp(*e - max);
                    sum += *e;
                }
                for e in row.iter_mut() {
                    *e /= sum;
                }
            }
            gemm(nq, nk, dh, p, false, &vh, false, &mut oh, 0.0);
            scatter_head(&oh, nq, d, h, dh, &mut out);
        }
        let rg = self.any_grad(&[q, k, v]);
        self.push(
            Tensor::new(&[nq, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Gathers rows of `table: [vocab, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let s = self.shape(table);
        let (vocab, d) = (s[0], s[1]);
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < vocab, "token id {id} out of vocabulary {vocab}");
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        self.push(
            Tensor::new(&[ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// `Σ_r weights[r] · x[r, :]` for `x: [n, d]`; returns `[d]`.
    pub fn weighted_sum_rows(&mut self, x: Var, weights: &[f64]) -> Var {
        let s = self.shape(x);
        let (n, d) = (s[0], s[1]);
        assert_eq!(weights.len(), n);
        let xs = self.value(x).data();
        let mut out = vec![0.0; d];
        for r in 0..n {
            if weights[r] == 0.0 {
                continue;
            }
            for j in 0..d {
                out[j] += weights[r] * xs[r * d + j];
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(
            Tensor::new(&[d], out),
            Op::WeightedSumRows {
                x,
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// Stacks equal-length vectors into `[n, d]`.
    pub fn concat_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let d = self.value(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert_eq!(self.value(r).len(), d, "concat_rows length mismatch");
            out.extend_from_slice(self.value(r).data());
        }
        let rg = self.any_grad(rows);
        self.push(
            Tensor::new(&[rows.len(), d], out),
            Op::ConcatRows(rows.to_vec()),
            rg,
        )
    }

    /// Divides each row of `x: [n, d]` by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = s[s.len() - 1];
        let n = self.value(x).len() / d;
        let xs = self.value(x).data();
        let mut norms = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let nrm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(ROW_NORM_FLOOR);
            norms[r] = nrm;
            for j in 0..d {
                out[r * d + j] = row[j] / nrm;
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(&s, out), Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Normalizes each spatial position of `x: [C, H, W]` to unit length
    /// across channels: `x / (‖x‖ + ε)`.
    pub fn channel_unit_norm(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let c = s[0];
        let p = self.value(x).len() / c;
        let xs = self.value(x).data();
        let mut norms = vec![0.0; p];
        for ci in 0..c {
            for j in 0..p {
                norms[j] += xs[ci * p + j] * xs[ci * p + j];
            }
        }
        for n in &mut norms {
            *n = libm::sqrt(*n);
        }
        let mut out = vec![0.0; c * p];
        for ci in 0..c {
            for j in 0..p {
                out[ci * p + j] = xs[ci * p + j] / (norms[j] + FEATURE_NORM_EPS);
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(&s, out), Op::ChannelUnitNorm { x, norms }, rg)
    }

    /// Mean of `|a − b|` over all elements; returns a scalar.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.zip_map(a, b, |x, y| libm::fabs(x - y));
        let mean = d.data().iter().sum::<f64>() / d.len() as f64;
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(mean), Op::MeanAbsDiff(a, b), rg)
    }

    /// `Σ (a − b)²`; returns a scalar.
    pub fn squared_diff_sum(&mut self, a: Var, b: Var) -> Var {
        let d = self.zip_map(a, b, |x, y| (x - y) * (x - y));
        let s = d.data().iter().sum::<f64>();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(s), Op::SquaredDiffSum(a, b), rg)
    }

    /// Mean cross-entropy of row-wise softmax over `logits: [n, c]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits);
        let (n, c) = (s[0], s[1]);
        assert_eq!(labels.len(), n);
        let ls = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &ls[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
            let lse = max + libm::log(sum);
            for j in 0..c {
                probs[r * c + j] = libm::exp(row[j] - lse);
            }
            loss += lse - row[labels[r]];
        }
        loss /= n as f64;
        let rg = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Sum of scalar nodes with weights.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                Some(a) => self.add(a, scaled),
                None => scaled,
            });
        }
        acc.expect("weighted_sum of no terms")
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![1.0]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let t = zip(g, self.value(*b), |x, y| x * y);
                    accumulate(grads, *a, t);
                }
                if self.wants(*b) {
                    let t = zip(g, self.value(*a), |x, y| x * y);
                    accumulate(grads, *b, t);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Tanh(a) => {
                let t = zip(g, &node.value, |gx, y| gx * (1.0 - y * y));
                accumulate(grads, *a, t);
            }
            Op::Silu(a) => {
                let t = zip(g, self.value(*a), |gx, x| {
                    let s = sigmoid(x);
                    gx * s * (1.0 + x * (1.0 - s))
                });
                accumulate(grads, *a, t);
            }
            Op::Gelu(a) => {
                let t = zip(g, self.value(*a), |gx, x| gx * gelu_grad(x));
                accumulate(grads, *a, t);
            }
            Op::Relu(a) => {
                let t = zip(g, self.value(*a), |gx, x| if x > 0.0 { gx } else { 0.0 });
                accumulate(grads, *a, t);
            }
            Op::Reshape(a) => {
                let t = g.clone().reshape(self.shape(*a));
                accumulate(grads, *a, t);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = g.shape()[1];
                if self.wants(*a) {
                    // da = g · op(b)ᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), !trans_b, &mut da, 0.0);
                    accumulate(grads, *a, Tensor::new(ta.shape(), da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // b: [n, k]; db = gᵀ · a
                        gemm(n, m, k, g.data(), true, ta.data(), false, &mut db, 0.0);
                    } else {
                        // b: [k, n]; db = aᵀ · g
                        gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, 0.0);
                    }
                    accumulate(grads, *b, Tensor::new(tb.shape(), db));
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, din) = (tx.shape()[0], tx.shape()[1]);
                let dout = tw.shape()[0];
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, g.data(), false, tw.data(), false, &mut dx, 0.0);
                    accumulate(grads, *x, Tensor::new(tx.shape(), dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, n, din, g.data(), true, tx.data(), false, &mut dw, 0.0);
                    accumulate(grads, *w, Tensor::new(tw.shape(), dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; dout];
                        for row in g.data().chunks(dout) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(grads, *b, Tensor::new(&[dout], db));
                    }
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let cout = tw.shape()[0];
                let ckk = tw.shape()[1];
                let hw = g.shape()[1] * g.shape()[2];
                if self.wants(*w) {
                    let (cols, _, _) = im2col(tx.data(), c, h, wd, *spec);
                    let mut dw = vec![0.0; cout * ckk];
                    gemm(cout, hw, ckk, g.data(), false, &cols, true, &mut dw, 0.0);
                    accumulate(grads, *w, Tensor::new(tw.shape(), dw));
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm(ckk, cout, hw, tw.data(), true, g.data(), false, &mut dcols, 0.0);
                    let mut dx = vec![0.0; c * h * wd];
                    col2im(&dcols, c, h, wd, *spec, &mut dx);
                    accumulate(grads, *x, Tensor::new(tx.shape(), dx));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = g.data().chunks(hw).map(|r| r.iter().sum()).collect();
                        accumulate(grads, *b, Tensor::new(&[cout], db));
                    }
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; c * h * w];
                let gd = g.data();
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ci * h + y / 2) * w + xx / 2] += gd[(ci * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(s, dx));
            }
            Op::AddChannel(x, v) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*v) {
                    let c = self.value(*v).len();
                    let per = g.len() / c;
                    let dv = g.data().chunks(per).map(|r| r.iter().sum()).collect();
                    accumulate(grads, *v, Tensor::new(self.shape(*v), dv));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let n = xhat.len() / d;
                let gm = self.value(*gamma).data();
                let gd = g.data();
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                    accumulate(grads, *gamma, Tensor::new(&[d], dg));
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            db[j] += gd[r * d + j];
                        }
                    }
                    accumulate(grads, *beta, Tensor::new(&[d], db));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gd[r * d + j] * gm[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[r * d + j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let dxh = gd[r * d + j] * gm[j];
                            dx[r * d + j] = rstd[r]
                                * (dxh - inv_d * sum_dxh - xhat[r * d + j] * inv_d * sum_dxh_xh);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let heads = *heads;
                let (nq, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let nk = self.shape(*k)[0];
                let dh = d / heads;
                let scale = 1.0 / libm::sqrt(dh as f64);
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; nq * d];
                let mut dk = vec![0.0; nk * d];
                let mut dv = vec![0.0; nk * d];
                let mut qh = vec![0.0; nq * dh];
                let mut kh = vec![0.0; nk * dh];
                let mut vh = vec![0.0; nk * dh];
                let mut goh = vec![0.0; nq * dh];
                let mut dp = vec![0.0; nq * nk];
                let mut tmp_q = vec![0.0; nq * dh];
                let mut tmp_k = vec![0.0; nk * dh];
                for h in 0..heads {
                    gather_head(qd, nq, d, h, dh, &mut qh);
                    gather_head(kd, nk, d, h, dh, &mut kh);
                    gather_head(vd, nk, d, h, dh, &mut vh);
                    gather_head(g.data(), nq, d, h, dh, &mut goh);
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    // dV = Pᵀ · dO
                    gemm(nk, nq, dh, p, true, &goh, false, &mut tmp_k, 0.0);
                    scatter_head(&tmp_k, nk, d, h, dh, &mut dv);
                    // dP = dO · Vᵀ, then softmax backward into dS (scaled)
                    gemm(nq, dh, nk, &goh, false, &vh, true, &mut dp, 0.0);
                    for r in 0..nq {
                        let prow = &p[r * nk..(r + 1) * nk];
                        let drow = &mut dp[r * nk..(r + 1) * nk];
                        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for (dv_, pv) in drow.iter_mut().zip(prow) {
                            *dv_ = pv * (*dv_ - dot) * scale;
                        }
                    }
                    gemm(nq, nk, dh, &dp, false, &kh, false, &mut tmp_q, 0.0);
                    scatter_head(&tmp_q, nq, d, h, dh, &mut dq);
                    gemm(nk, nq, dh, &dp, true, &qh, false, &mut tmp_k, 0.0);
                    scatter_head(&tmp_k, nk, d, h, dh, &mut dk);
                }
                if self.wants(*q) {
                    accumulate(grads, *q, Tensor::new(&[nq, d], dq));
                }
                if self.wants(*k) {
                    accumulate(grads, *k, Tensor::new(&[nk, d], dk));
                }
                if self.wants(*v) {
                    accumulate(grads, *v, Tensor::new(&[nk, d], dv));
                }
            }
            Op::Embedding { table, ids } => {
                let s = self.shape(*table);
                let d = s[1];
                let mut dt = vec![0.0; s[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.data()[r * d + j];
                    }
                }
                accumulate(grads, *table, Tensor::new(s, dt));
            }
            Op::WeightedSumRows { x, weights } => {
                let d = g.len();
                let mut dx = vec![0.0; weights.len() * d];
                for (r, &w) in weights.iter().enumerate() {
                    for j in 0..d {
                        dx[r * d + j] = w * g.data()[j];
                    }
                }
                accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
            }
            Op::ConcatRows(rows) => {
                let d = g.shape()[1];
                for (r, &v) in rows.iter().enumerate() {
                    if self.wants(v) {
                        let part = g.data()[r * d..(r + 1) * d].to_vec();
                        accumulate(grads, v, Tensor::new(self.shape(v), part));
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let d = node.value.len() / norms.len();
                let gd = g.data();
                let mut dx = vec![0.0; y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let dot: f64 = (0..d).map(|j| y[r * d + j] * gd[r * d + j]).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gd[r * d + j] - y[r * d + j] * dot) / nrm;
                    }
                }
                accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
            }
            Op::ChannelUnitNorm { x, norms } => {
                let xs = self.value(*x).data();
                let p = norms.len();
                let c = xs.len() / p;
                let gd = g.data();
                let mut dot = vec![0.0; p];
                for ci in 0..c {
                    for j in 0..p {
                        dot[j] += gd[ci * p + j] * xs[ci * p + j];
                    }
                }
                let mut dx = vec![0.0; xs.len()];
                for ci in 0..c {
                    for j in 0..p {
                        let r = norms[j];
                        let denom = r + FEATURE_NORM_EPS;
                        let mut v = gd[ci * p + j] / denom;
                        if r > 0.0 {
                            v -= xs[ci * p + j] * dot[j] / (denom * denom * r);
                        }
                        dx[ci * p + j] = v;
                    }
                }
                accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
            }
            Op::MeanAbsDiff(a, b) => {
                let n = self.value(*a).len() as f64;
                let s = g.item() / n;
                let sign = zip(self.value(*a), self.value(*b), |x, y| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        0.0
                    }
                });
                if self.wants(*b) {
                    accumulate(grads, *b, sign.map(|v| -v));
                }
                if self.wants(*a) {
                    accumulate(grads, *a, sign);
                }
            }
            Op::SquaredDiffSum(a, b) => {
                let s = 2.0 * g.item();
                let diff = zip(self.value(*a), self.value(*b), |x, y| s * (x - y));
                if self.wants(*b) {
                    accumulate(grads, *b, diff.map(|v| -v));
                }
                if self.wants(*a) {
                    accumulate(grads, *a, diff);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let s = g.item() / n as f64;
                let mut dl = probs.clone();
                for (r, &lab) in labels.iter().enumerate() {
                    dl[r * c + lab] -= 1.0;
                }
                for v in &mut dl {
                    *v *= s;
                }
                accumulate(grads, *logits, Tensor::new(&[n, c], dl));
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

fn gather_head(src: &[f64], n: usize, d: usize, h: usize, dh: usize, dst: &mut [f64]) {
    for r in 0..n {
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
}

fn scatter_head(src: &[f64], n: usize, d: usize, h: usize, dh: usize, dst: &mut [f64]) {
    for r in 0..n {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences on every input entry of a unary builder.
    fn check_grad(input: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.leaf(input.clone(), true);
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let h = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.leaf(t, false);
                let y = build(&mut g, x);
                g.value(y).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = libm::fabs(a - fd) / (libm::fabs(a).max(libm::fabs(fd)).max(1e-6));
            assert!(err < 1e-4, "entry {i}: analytic {a} vs fd {fd}");
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    fn weights_like(g: &mut Graph, shape: &[usize], seed: u64) -> Var {
        g.constant(rnd(shape, seed))
    }

    /// Contracts an arbitrary node against fixed random weights to a scalar.
    fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
        let shape = g.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let w = weights_like(g, &shape, seed);
        let a = g.reshape(y, &[1, n]);
        let b = g.reshape(w, &[1, n]);
        let out = g.matmul(a, b, true);
        g.reshape(out, &[1])
    }

    #[test]
    fn conv_grad() {
        check_grad(rnd(&[2, 5, 5], 1), |g, x| {
            let w = weights_like(g, &[3, 2 * 9], 2);
            let b = weights_like(g, &[3], 3);
            let y = g.conv2d(
                x,
                w,
                Some(b),
                Conv2dSpec {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            );
            project(g, y, 4)
        });
    }

    #[test]
    fn conv_weight_grad() {
        check_grad(rnd(&[3, 2 * 9], 5), |g, w| {
            let x = weights_like(g, &[2, 6, 6], 6);
            let y = g.conv2d(
                x,
                w,
                None,
                Conv2dSpec {
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
            );
            let y = g.silu(y);
            project(g, y, 7)
        });
    }

    #[test]
    fn attention_grad() {
        check_grad(rnd(&[4, 6], 8), |g, x| {
            let kv = weights_like(g, &[5, 6], 9);
            let k = g.add(kv, kv);
            let y = g.attention(x, k, kv, 2);
            project(g, y, 10)
        });
        check_grad(rnd(&[5, 6], 11), |g, kv| {
            let q = weights_like(g, &[4, 6], 12);
            let v = g.tanh(kv);
            let y = g.attention(q, kv, v, 3);
            project(g, y, 13)
        });
    }

    #[test]
    fn layer_norm_and_linear_grad() {
        check_grad(rnd(&[3, 8], 14), |g, x| {
            let gamma = weights_like(g, &[8], 15);
            let beta = weights_like(g, &[8], 16);
            let y = g.layer_norm(x, gamma, beta);
            let w = weights_like(g, &[5, 8], 17);
            let b = weights_like(g, &[5], 18);
            let y = g.linear(y, w, Some(b));
            let y = g.gelu(y);
            project(g, y, 19)
        });
    }

    #[test]
    fn normalization_and_losses_grad() {
        check_grad(rnd(&[3, 4, 4], 20), |g, x| {
            let y = g.channel_unit_norm(x);
            let other = weights_like(g, &[3, 4, 4], 21);
            let s = g.squared_diff_sum(y, other);
            let up = g.upsample2x(x);
            let t = g.tanh(up);
            let ref_ = weights_like(g, &[3, 8, 8], 22);
            let l1 = g.mean_abs_diff(t, ref_);
            g.weighted_sum(&[(s, 0.5), (l1, 2.0)])
        });
        check_grad(rnd(&[4, 5], 23), |g, x| {
            let n = g.l2_normalize_rows(x);
            let mu0 = g.weighted_sum_rows(n, &[0.5, 0.5, 0.0, 0.0]);
            let mu1 = g.weighted_sum_rows(n, &[0.0, 0.0, 0.5, 0.5]);
            let m = g.concat_rows(&[mu0, mu1]);
            let m = g.l2_normalize_rows(m);
            let logits = g.matmul(n, m, true);
            let logits = g.scale(logits, 3.0);
            g.softmax_cross_entropy(logits, &[0, 0, 1, 1])
        });
    }

    #[test]
    fn embedding_and_channel_grad() {
        check_grad(rnd(&[6, 3], 24), |g, table| {
            let e = g.embedding(table, &[1, 4, 1, 5]);
            let t = g.transpose(e);
            let bias = weights_like(g, &[3], 25);
            let y = g.add_channel(t, bias);
            let y = g.relu(y);
            project(g, y, 26)
        });
    }
}
