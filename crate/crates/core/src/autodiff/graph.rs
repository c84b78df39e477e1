//! Define-by-run computation graph.
//!
//! Every forward op appends a node holding its output values plus whatever
//! it needs for the backward rule. Nodes are topologically ordered by
//! construction, so `backward` is a single reverse sweep. The graph is
//! discarded after each step.

use crate::autodiff::conv::{col2im, im2col, ConvGeom};
use crate::autodiff::tensor::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dConfig {
    /// Stride 1, output spatially equal to input for odd kernels.
    pub fn same(kernel: usize) -> Self {
        Conv2dConfig {
            stride: 1,
            pad: kernel / 2,
        }
    }
}

/// Weights of one gated recurrent layer (update/reset/candidate gates
/// packed along the last axis in r, z, n order).
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    /// `[D, 3H]`
    pub w_input: Var,
    /// `[H, 3H]`
    pub w_hidden: Var,
    /// `[3H]`
    pub b_input: Var,
    /// `[3H]`
    pub b_hidden: Var,
}

struct GruCache<T> {
    x: usize,
    h: usize,
    w: GruWeights,
    batch: usize,
    input: usize,
    hidden: usize,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    hn: Vec<T>,
    mask: Option<Vec<T>>,
}

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        out_c: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: usize,
        /// Geometry of the forward convolution this op is the adjoint of.
        geom: ConvGeom,
        in_c: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Gru(Box<GruCache<T>>),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softmax {
        x: usize,
        cols: usize,
    },
    SquaredError {
        pred: usize,
        target: usize,
        weights: Option<Vec<T>>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
    },
    Concat {
        inputs: Vec<usize>,
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: usize,
        outer: usize,
        in_axis: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Add(usize, usize),
    WeightedSum {
        x: usize,
        weights: Vec<T>,
    },
    Reshape(usize),
    Triplet {
        emb: usize,
        dim: usize,
        triplets: Vec<[usize; 3]>,
        active: Vec<bool>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), beta, c);
}

/// `a [m,k] · bᵀ` where `b` is stored `[n,k]`.
fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), beta, c);
}

/// `aᵀ · b [k,n]` where `a` is stored `[k,m]`.
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(m, k, n, a, (1, m as isize), b, (n as isize, 1), beta, c);
}

fn add_row_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn sum_rows_into<T: Scalar>(g: &[T], cols: usize, acc: &mut [T]) {
    for row in g.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes hold valid shapes")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Option<T> {
        let n = &self.nodes[v.0];
        (n.value.len() == 1).then(|| n.value[0])
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tracked: bool, name: &'static str) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].tracked)
    }

    fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false, "constant")
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false, "constant")
    }

    /// Leaf bound to a parameter; gradients flow back into its buffer.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Result<Var> {
        let t = params.get(id);
        let tracked = t.requires_grad();
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param(id.index()),
            tracked,
            "param",
        )
    }

    /// `[M,K] · [K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.dims(a), self.dims(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a), self.value(b), T::zero(), &mut out);
        let tracked = self.tracked(&[a.0, b.0]);
        self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            tracked,
            "matmul",
        )
    }

    /// Affine layer `x · W + b` with `x [M,K]`, `W [K,N]`, `b [N]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.dims(x), self.dims(w), self.dims(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(Error::shape("dense", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(x), self.value(w), T::zero(), &mut out);
        add_row_bias(&mut out, self.value(b));
        let tracked = self.tracked(&[x.0, w.0, b.0]);
        self.push(
            vec![m, n],
            out,
            Op::Dense {
                x: x.0,
                w: w.0,
                b: b.0,
                m,
                k,
                n,
            },
            tracked,
            "dense",
        )
    }

    /// 2-D convolution over NHWC input `[B,H,W,C]` with weights `[K,K,C,F]`
    /// and bias `[F]`; output `[B,OH,OW,F]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, cfg: Conv2dConfig) -> Result<Var> {
        let (sx, sw, sb) = (self.dims(x), self.dims(w), self.dims(b));
        let bad = || Error::shape("conv2d", format!("x {sx:?}, w {sw:?}, b {sb:?}, {cfg:?}"));
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[3] || sb != [sw[3]] {
            return Err(bad());
        }
        let kernel = sw[0];
        let out_h = ConvGeom::conv_out(sx[1], kernel, cfg.stride, cfg.pad).ok_or_else(bad)?;
        let out_w = ConvGeom::conv_out(sx[2], kernel, cfg.stride, cfg.pad).ok_or_else(bad)?;
        let geom = ConvGeom {
            batch: sx[0],
            in_h: sx[1],
            in_w: sx[2],
            in_c: sx[3],
            out_h,
            out_w,
            kernel,
            stride: cfg.stride,
            pad: cfg.pad,
        };
        let out_c = sw[3];
        let mut cols = vec![T::zero(); geom.rows() * geom.col_width()];
        im2col(&geom, self.value(x), &mut cols);
        let mut out = vec![T::zero(); geom.rows() * out_c];
        gemm_nn(
            geom.rows(),
            geom.col_width(),
            out_c,
            &cols,
            self.value(w),
            T::zero(),
            &mut out,
        );
        add_row_bias(&mut out, self.value(b));
        let tracked = self.tracked(&[x.0, w.0, b.0]);
        self.push(
            vec![geom.batch, out_h, out_w, out_c],
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                geom,
                out_c,
                cols,
            },
            tracked,
            "conv2d",
        )
    }

    /// Transposed convolution (adjoint of [`Graph::conv2d`] in its input):
    /// `x [B,H,W,Cin]`, weights `[Cin,K,K,Cout]`, bias `[Cout]`; output
    /// `[B,(H-1)s-2p+K, (W-1)s-2p+K, Cout]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, cfg: Conv2dConfig) -> Result<Var> {
        let (sx, sw, sb) = (self.dims(x), self.dims(w), self.dims(b));
        let bad = || Error::shape("transposed_conv2d", format!("x {sx:?}, w {sw:?}, b {sb:?}, {cfg:?}"));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sw[2] || sw[0] != sx[3] || sb != [sw[3]] || cfg.stride == 0 {
            return Err(bad());
        }
        let kernel = sw[1];
        let out_h = ConvGeom::transposed_out(sx[1], kernel, cfg.stride, cfg.pad).ok_or_else(bad)?;
        let out_w = ConvGeom::transposed_out(sx[2], kernel, cfg.stride, cfg.pad).ok_or_else(bad)?;
        let in_c = sx[3];
        let out_c = sw[3];
        // The convolution mapping our output back onto our input grid.
        let geom = ConvGeom {
            batch: sx[0],
            in_h: out_h,
            in_w: out_w,
            in_c: out_c,
            out_h: sx[1],
            out_w: sx[2],
            kernel,
            stride: cfg.stride,
            pad: cfg.pad,
        };
        let mut cols = vec![T::zero(); geom.rows() * geom.col_width()];
        gemm_nn(
            geom.rows(),
            in_c,
            geom.col_width(),
            self.value(x),
            self.value(w),
            T::zero(),
            &mut cols,
        );
        let mut out = vec![T::zero(); geom.batch * out_h * out_w * out_c];
        col2im(&geom, &cols, &mut out);
        add_row_bias(&mut out, self.value(b));
        let tracked = self.tracked(&[x.0, w.0, b.0]);
        self.push(
            vec![geom.batch, out_h, out_w, out_c],
            out,
            Op::ConvTranspose2d {
                x: x.0,
                w: w.0,
                b: b.0,
                geom,
                in_c,
            },
            tracked,
            "transposed_conv2d",
        )
    }

    /// 2×2 max-pool with stride 2 over NHWC input; odd trailing rows and
    /// columns are dropped.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let sx = self.dims(x).to_vec();
        if sx.len() != 4 || sx[1] < 2 || sx[2] < 2 {
            return Err(Error::shape("max_pool2x2", format!("{sx:?}")));
        }
        let (b, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let input = self.value(x);
        let mut out = Vec::with_capacity(b * oh * ow * c);
        let mut argmax = Vec::with_capacity(b * oh * ow * c);
        for bi in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = ((bi * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                            if best == usize::MAX || input[idx] > input[best] {
                                best = idx;
                            }
                        }
                        out.push(input[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let tracked = self.tracked(&[x.0]);
        self.push(
            vec![b, oh, ow, c],
            out,
            Op::MaxPool { x: x.0, argmax },
            tracked,
            "max_pool2x2",
        )
    }

    /// One gated recurrent unit step.
    ///
    /// `x [B,D]`, `h [B,H]`; returns the next hidden state `[B,H]`. Rows with
    /// `mask = 0` carry `h` through unchanged.
    pub fn gru_cell_step(&mut self, x: Var, h: Var, w: GruWeights, mask: Option<&[T]>) -> Result<Var> {
        let (sx, sh) = (self.dims(x), self.dims(h));
        let (swx, swh) = (self.dims(w.w_input), self.dims(w.w_hidden));
        let (sbx, sbh) = (self.dims(w.b_input), self.dims(w.b_hidden));
        let ok = sx.len() == 2
            && sh.len() == 2
            && sx[0] == sh[0]
            && swx.len() == 2
            && swx[0] == sx[1]
            && swx[1] == 3 * sh[1]
            && swh == [sh[1], 3 * sh[1]]
            && sbx == [3 * sh[1]]
            && sbh == [3 * sh[1]]
            && mask.is_none_or(|m| m.len() == sx[0]);
        if !ok {
            return Err(Error::shape(
                "gru_cell_step",
                format!("x {sx:?}, h {sh:?}, w_input {swx:?}, w_hidden {swh:?}, b {sbx:?}/{sbh:?}"),
            ));
        }
        let (batch, input, hidden) = (sx[0], sx[1], sh[1]);
        let g3 = 3 * hidden;
        let mut gx = vec![T::zero(); batch * g3];
        gemm_nn(
            batch,
            input,
            g3,
            self.value(x),
            self.value(w.w_input),
            T::zero(),
            &mut gx,
        );
        add_row_bias(&mut gx, self.value(w.b_input));
        let mut gh = vec![T::zero(); batch * g3];
        gemm_nn(
            batch,
            hidden,
            g3,
            self.value(h),
            self.value(w.w_hidden),
            T::zero(),
            &mut gh,
        );
        add_row_bias(&mut gh, self.value(w.b_hidden));

        let hv = self.value(h);
        let n_el = batch * hidden;
        let (mut r, mut z, mut n, mut hn) = (
            Vec::with_capacity(n_el),
            Vec::with_capacity(n_el),
            Vec::with_capacity(n_el),
            Vec::with_capacity(n_el),
        );
        let mut out = Vec::with_capacity(n_el);
        for bi in 0..batch {
            let (gxr, ghr) = (&gx[bi * g3..(bi + 1) * g3], &gh[bi * g3..(bi + 1) * g3]);
            let keep = mask.map_or(T::one(), |m| m[bi]);
            for j in 0..hidden {
                let rj = sigmoid(gxr[j] + ghr[j]);
                let zj = sigmoid(gxr[hidden + j] + ghr[hidden + j]);
                let hnj = ghr[2 * hidden + j];
                let nj = (gxr[2 * hidden + j] + rj * hnj).tanh();
                let hprev = hv[bi * hidden + j];
                let hnew = (T::one() - zj) * nj + zj * hprev;
                out.push(keep * hnew + (T::one() - keep) * hprev);
                r.push(rj);
                z.push(zj);
                n.push(nj);
                hn.push(hnj);
            }
        }
        let tracked = self.tracked(&[x.0, h.0, w.w_input.0, w.w_hidden.0, w.b_input.0, w.b_hidden.0]);
        let cache = GruCache {
            x: x.0,
            h: h.0,
            w,
            batch,
            input,
            hidden,
            r,
            z,
            n,
            hn,
            mask: mask.map(<[T]>::to_vec),
        };
        self.push(
            vec![batch, hidden],
            out,
            Op::Gru(Box::new(cache)),
            tracked,
            "gru_cell_step",
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>, name: &'static str) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.dims(x).to_vec();
        let tracked = self.tracked(&[x.0]);
        self.push(shape, out, op, tracked, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x.0), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::tanh, Op::Tanh(x.0), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x.0), "sigmoid")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.dims(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = self.value(x).to_vec();
        out.chunks_exact_mut(cols).for_each(softmax_in_place);
        let tracked = self.tracked(&[x.0]);
        self.push(shape, out, Op::Softmax { x: x.0, cols }, tracked, "softmax")
    }

    /// `Σ wᵢ (predᵢ − targetᵢ)²` as a scalar; unit weights when `weights` is
    /// `None`.
    pub fn squared_error(&mut self, pred: Var, target: Var, weights: Option<Vec<T>>) -> Result<Var> {
        let (sp, st) = (self.dims(pred), self.dims(target));
        if sp != st || weights.as_ref().is_some_and(|w| w.len() != numel(sp)) {
            return Err(Error::shape(
                "squared_error",
                format!(
                    "pred {sp:?}, target {st:?}, weights {:?}",
                    weights.as_ref().map(Vec::len)
                ),
            ));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let total: T = match &weights {
            Some(w) => p
                .iter()
                .zip(t)
                .zip(w)
                .map(|((&a, &b), &wi)| wi * (a - b) * (a - b))
                .sum(),
            None => p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum(),
        };
        let tracked = self.tracked(&[pred.0, target.0]);
        self.push(
            Vec::new(),
            vec![total],
            Op::SquaredError {
                pred: pred.0,
                target: target.0,
                weights,
            },
            tracked,
            "squared_error",
        )
    }

    /// Mean multiclass log loss of `logits [B,C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.dims(logits);
        if s.len() != 2 || s[0] != labels.len() || s[1] < 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?}, {} labels", labels.len()),
            ));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (row, (&label, logits_row)) in probs
            .chunks_exact_mut(classes)
            .zip(labels.iter().zip(self.value(logits).chunks_exact(classes)))
        {
            total += log_softmax_at(logits_row, label).neg();
            softmax_in_place(row);
        }
        let batch = T::from_usize(labels.len()).expect("batch size fits");
        let tracked = self.tracked(&[logits.0]);
        self.push(
            Vec::new(),
            vec![total / batch],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
                classes,
            },
            tracked,
            "cross_entropy",
        )
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.dims(v).to_vec())
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.dims(v);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in inputs.iter().zip(&sizes) {
                let block = sz * inner;
                out.extend_from_slice(&self.value(v)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let tracked = self.tracked(&idx);
        self.push(
            shape,
            out,
            Op::Concat {
                inputs: idx,
                sizes,
                outer,
                inner,
            },
            tracked,
            "concat",
        )
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.dims(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("{s:?} axis {axis} range {start}..{}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let in_axis = s[axis];
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * in_axis + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let tracked = self.tracked(&[x.0]);
        self.push(
            shape,
            out,
            Op::Slice {
                x: x.0,
                outer,
                in_axis,
                start,
                len,
                inner,
            },
            tracked,
            "slice",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.dims(a), self.dims(b));
        if sa != sb {
            return Err(Error::shape("add", format!("{sa:?} + {sb:?}")));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = sa.to_vec();
        let tracked = self.tracked(&[a.0, b.0]);
        self.push(shape, out, Op::Add(a.0, b.0), tracked, "add")
    }

    /// Scalar `Σ wᵢ xᵢ` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {} weights", self.dims(x), weights.len()),
            ));
        }
        let total = self.value(x).iter().zip(&weights).map(|(&a, &w)| a * w).sum();
        let tracked = self.tracked(&[x.0]);
        self.push(
            Vec::new(),
            vec![total],
            Op::WeightedSum { x: x.0, weights },
            tracked,
            "weighted_sum",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.dims(x))));
        }
        let out = self.value(x).to_vec();
        let tracked = self.tracked(&[x.0]);
        self.push(shape, out, Op::Reshape(x.0), tracked, "reshape")
    }

    /// Mean triplet hinge `max(0, m + ‖eₐ−eₚ‖² − ‖eₐ−eₙ‖²)` over rows of an
    /// embedding matrix `[B,E]`; zero when `triplets` is empty.
    pub fn triplet_hinge(&mut self, emb: Var, triplets: &[[usize; 3]], margin: T) -> Result<Var> {
        let s = self.dims(emb);
        if s.len() != 2 || triplets.iter().flatten().any(|&i| i >= s[0]) {
            return Err(Error::shape("triplet_hinge", format!("embeddings {s:?}")));
        }
        let dim = s[1];
        let e = self.value(emb);
        let row = |i: usize| &e[i * dim..(i + 1) * dim];
        let sq = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>();
        let mut total = T::zero();
        let mut active = Vec::with_capacity(triplets.len());
        for &[a, p, n] in triplets {
            let h = margin + sq(row(a), row(p)) - sq(row(a), row(n));
            active.push(h > T::zero());
            total += h.max(T::zero());
        }
        if !triplets.is_empty() {
            total /= T::from_usize(triplets.len()).expect("count fits");
        }
        let tracked = self.tracked(&[emb.0]);
        self.push(
            Vec::new(),
            vec![total],
            Op::Triplet {
                emb: emb.0,
                dim,
                triplets: triplets.to_vec(),
                active,
            },
            tracked,
            "triplet_hinge",
        )
    }

    /// Reverse sweep from a scalar loss, accumulating into the gradient
    /// buffers of every parameter reachable from it.
    pub fn backward(&self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, params)?;
        }
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], idx: usize) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[idx];
        if !node.tracked {
            return None;
        }
        Some(grads[idx].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        params: &mut ParamSet<T>,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let p = &mut params.tensors_mut()[*id];
                let name_for_err = || format!("#{id}");
                if p.numel() != g.len() {
                    return Err(Error::shape("backward", format!("param #{id} changed shape")));
                }
                let buf = p.grad_mut().ok_or_else(|| Error::MissingGrad(name_for_err()))?;
                for (a, &v) in buf.iter_mut().zip(g) {
                    *a += v;
                }
            }
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    gemm_nt(m, n, k, g, &self.nodes[b].value, T::one(), ga);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm_tn(k, m, n, &self.nodes[a].value, g, T::one(), gb);
                }
            }
            &Op::Dense { x, w, b, m, k, n } => {
                if let Some(gx) = self.slot(grads, x) {
                    gemm_nt(m, n, k, g, &self.nodes[w].value, T::one(), gx);
                }
                if let Some(gw) = self.slot(grads, w) {
                    gemm_tn(k, m, n, &self.nodes[x].value, g, T::one(), gw);
                }
                if let Some(gb) = self.slot(grads, b) {
                    sum_rows_into(g, n, gb);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_c,
                cols,
            } => {
                let (rows, width) = (geom.rows(), geom.col_width());
                if let Some(gw) = self.slot(grads, *w) {
                    gemm_tn(width, rows, *out_c, cols, g, T::one(), gw);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    sum_rows_into(g, *out_c, gb);
                }
                if self.nodes[*x].tracked {
                    let mut dcols = vec![T::zero(); rows * width];
                    gemm_nt(rows, *out_c, width, g, &self.nodes[*w].value, T::zero(), &mut dcols);
                    if let Some(gx) = self.slot(grads, *x) {
                        col2im(geom, &dcols, gx);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, in_c } => {
                let (rows, width) = (geom.rows(), geom.col_width());
                let out_c = geom.in_c;
                if let Some(gb) = self.slot(grads, *b) {
                    sum_rows_into(g, out_c, gb);
                }
                let x_tracked = self.nodes[*x].tracked;
                let w_tracked = self.nodes[*w].tracked;
                if x_tracked || w_tracked {
                    let mut dcols = vec![T::zero(); rows * width];
                    im2col(geom, g, &mut dcols);
                    if let Some(gx) = self.slot(grads, *x) {
                        gemm_nt(rows, width, *in_c, &dcols, &self.nodes[*w].value, T::one(), gx);
                    }
                    if let Some(gw) = self.slot(grads, *w) {
                        gemm_tn(*in_c, rows, width, &self.nodes[*x].value, &dcols, T::one(), gw);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&src, &v) in argmax.iter().zip(g) {
                        gx[src] += v;
                    }
                }
            }
            Op::Gru(c) => self.backprop_gru(c, g, grads),
            &Op::Relu(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((a, &v), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                        if y > T::zero() {
                            *a += v;
                        }
                    }
                }
            }
            &Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((a, &v), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *a += v * (T::one() - y * y);
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((a, &v), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *a += v * y * (T::one() - y);
                    }
                }
            }
            &Op::Softmax { x, cols } => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((gxr, gr), yr) in gx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(node.value.chunks_exact(cols))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((a, &gv), &y) in gxr.iter_mut().zip(gr).zip(yr) {
                            *a += y * (gv - dot);
                        }
                    }
                }
            }
            Op::SquaredError { pred, target, weights } => {
                let two = T::from_f64_lossy(2.0) * g[0];
                let (p, t) = (&self.nodes[*pred].value, &self.nodes[*target].value);
                let w_at = |i: usize| weights.as_ref().map_or(T::one(), |w| w[i]);
                if let Some(gp) = self.slot(grads, *pred) {
                    for (i, a) in gp.iter_mut().enumerate() {
                        *a += two * w_at(i) * (p[i] - t[i]);
                    }
                }
                if let Some(gt) = self.slot(grads, *target) {
                    for (i, a) in gt.iter_mut().enumerate() {
                        *a -= two * w_at(i) * (p[i] - t[i]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                classes,
            } => {
                let scale = g[0] / T::from_usize(labels.len()).expect("batch size fits");
                if let Some(gl) = self.slot(grads, *logits) {
                    for (row, (pr, &label)) in gl
                        .chunks_exact_mut(*classes)
                        .zip(probs.chunks_exact(*classes).zip(labels))
                    {
                        for (j, (a, &p)) in row.iter_mut().zip(pr).enumerate() {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            *a += scale * (p - onehot);
                        }
                    }
                }
            }
            Op::Concat {
                inputs,
                sizes,
                outer,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&v, &sz) in inputs.iter().zip(sizes) {
                    if let Some(gv) = self.slot(grads, v) {
                        let block = sz * inner;
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..][..block];
                            for (a, &s) in gv[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *a += s;
                            }
                        }
                    }
                    offset += sz;
                }
            }
            &Op::Slice {
                x,
                outer,
                in_axis,
                start,
                len,
                inner,
            } => {
                if let Some(gx) = self.slot(grads, x) {
                    let block = len * inner;
                    for o in 0..outer {
                        let dst = &mut gx[(o * in_axis + start) * inner..][..block];
                        for (a, &s) in dst.iter_mut().zip(&g[o * block..(o + 1) * block]) {
                            *a += s;
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, v) {
                        for (acc, &s) in gv.iter_mut().zip(g) {
                            *acc += s;
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (a, &w) in gx.iter_mut().zip(weights) {
                        *a += g[0] * w;
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for (a, &s) in gx.iter_mut().zip(g) {
                        *a += s;
                    }
                }
            }
            Op::Triplet {
                emb,
                dim,
                triplets,
                active,
            } => {
                let e = &self.nodes[*emb].value;
                if let Some(ge) = self.slot(grads, *emb) {
                    let scale =
                        T::from_f64_lossy(2.0) * g[0] / T::from_usize(triplets.len().max(1)).expect("count fits");
                    for (&[a, p, n], &on) in triplets.iter().zip(active) {
                        if !on {
                            continue;
                        }
                        for d in 0..*dim {
                            let (ea, ep, en) = (e[a * dim + d], e[p * dim + d], e[n * dim + d]);
                            ge[a * dim + d] += scale * (en - ep);
                            ge[p * dim + d] -= scale * (ea - ep);
                            ge[n * dim + d] += scale * (ea - en);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn backprop_gru(&self, c: &GruCache<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (batch, hidden, input) = (c.batch, c.hidden, c.input);
        let g3 = 3 * hidden;
        let hv = &self.nodes[c.h].value;
        let mut dgx = vec![T::zero(); batch * g3];
        let mut dgh = vec![T::zero(); batch * g3];
        let mut dh_carry = vec![T::zero(); batch * hidden];
        for bi in 0..batch {
            let keep = c.mask.as_ref().map_or(T::one(), |m| m[bi]);
            for j in 0..hidden {
                let i = bi * hidden + j;
                let dout = g[i];
                let dnew = keep * dout;
                let (r, z, n, hn) = (c.r[i], c.z[i], c.n[i], c.hn[i]);
                let dn = dnew * (T::one() - z);
                let dz = dnew * (hv[i] - n);
                dh_carry[i] = dnew * z + (T::one() - keep) * dout;
                let dn_pre = dn * (T::one() - n * n);
                let dr = dn_pre * hn;
                let dr_pre = dr * r * (T::one() - r);
                let dz_pre = dz * z * (T::one() - z);
                let row = bi * g3;
                dgx[row + j] = dr_pre;
                dgx[row + hidden + j] = dz_pre;
                dgx[row + 2 * hidden + j] = dn_pre;
                dgh[row + j] = dr_pre;
                dgh[row + hidden + j] = dz_pre;
                dgh[row + 2 * hidden + j] = dn_pre * r;
            }
        }
        if let Some(gx) = self.slot(grads, c.x) {
            gemm_nt(batch, g3, input, &dgx, &self.nodes[c.w.w_input.0].value, T::one(), gx);
        }
        if let Some(gwx) = self.slot(grads, c.w.w_input.0) {
            gemm_tn(input, batch, g3, &self.nodes[c.x].value, &dgx, T::one(), gwx);
        }
        if let Some(gbx) = self.slot(grads, c.w.b_input.0) {
            sum_rows_into(&dgx, g3, gbx);
        }
        if let Some(gwh) = self.slot(grads, c.w.w_hidden.0) {
            gemm_tn(hidden, batch, g3, hv, &dgh, T::one(), gwh);
        }
        if let Some(gbh) = self.slot(grads, c.w.b_hidden.0) {
            sum_rows_into(&dgh, g3, gbh);
        }
        if let Some(gh) = self.slot(grads, c.h) {
            gemm_nt(batch, g3, hidden, &dgh, &self.nodes[c.w.w_hidden.0].value, T::one(), gh);
            for (a, &v) in gh.iter_mut().zip(&dh_carry) {
                *a += v;
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
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

pub(crate) fn log_softmax_at<T: Scalar>(row: &[T], idx: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[idx] - lse
}
