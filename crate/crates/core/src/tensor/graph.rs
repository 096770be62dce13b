//! Tape-based computation graph. Nodes are appended in execution order, so
//! the tape itself is a topological order and backward is one reverse sweep.

use super::gemm::{col2im, gemm, im2col, ConvGeom, Strides};
use super::{numel, shape_err, Shape, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Mul,
}

/// Interpolation taps of one output coordinate: `(i0, i1, w0, w1)`.
type Taps = Vec<(usize, usize, f64, f64)>;

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Resize {
        x: Var,
        ty: Taps,
        tx: Taps,
    },
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Gap(Var),
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    Concat(Vec<Var>),
    Affine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    ReflectPad {
        x: Var,
    },
    BatchNorm {
        x: Var,
        /// Normalized input, kept in `f64` for the backward pass.
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Crop {
        x: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<u8>,
        probs: Vec<f64>,
    },
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Per-pixel cross-entropy outputs.
pub struct CeMap {
    /// `[N, 1, H, W]` loss node; zero at ignored pixels.
    pub loss_map: Var,
    /// Softmax probability of the true class (detached); `1.0` at ignored
    /// pixels.
    pub prob_correct: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Per-channel batch statistics of a [`Graph::batch_norm`] node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
}

/// Gradients of a scalar output with respect to every node that needs one.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor of the given shape; zeros when the node received
    /// no gradient.
    pub fn tensor<T: Scalar>(&self, v: Var, shape: Shape) -> Tensor<T> {
        match self.get(v) {
            Some(g) => Tensor {
                shape,
                data: g.iter().map(|&x| T::of(x)).collect(),
            },
            None => Tensor::zeros(shape),
        }
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    relu_fault: Option<f64>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn bcast_ok(a: &Shape, b: &Shape) -> bool {
    a.iter().zip(b).all(|(x, y)| x == y || *y == 1)
}

/// Calls `f(ai, bi)` for every element of `a` with the matching index of the
/// broadcast operand `b`.
fn for_each_bcast(a: &Shape, b: &Shape, mut f: impl FnMut(usize, usize)) {
    let [n, c, h, w] = *a;
    let [bn, bc, bh, bw] = *b;
    let mut ai = 0;
    for i in 0..n {
        let i_b = if bn == 1 { 0 } else { i };
        for j in 0..c {
            let j_b = if bc == 1 { 0 } else { j };
            for y in 0..h {
                let y_b = if bh == 1 { 0 } else { y };
                let row = ((i_b * bc + j_b) * bh + y_b) * bw;
                if bw == 1 {
                    for _ in 0..w {
                        f(ai, row);
                        ai += 1;
                    }
                } else {
                    for x in 0..w {
                        f(ai, row + x);
                        ai += 1;
                    }
                }
            }
        }
    }
}

/// Half-pixel (align-corners false) bilinear taps, clamped at the borders.
fn resize_taps(input: usize, output: usize) -> Taps {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            relu_fault: None,
        }
    }

    /// Scales every ReLU backward by `factor`. Used only to demonstrate that
    /// gradient checking catches a broken backward pass.
    #[doc(hidden)]
    pub fn with_relu_backward_fault(mut self, factor: f64) -> Self {
        self.relu_fault = Some(factor);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Cross-correlation of `x [N,Cin,H,W]` with `w [Cout,Cin,k,k]`, plus an
    /// optional bias of `Cout` values.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, wcin, k, k2] = self.shape(w);
        if wcin != cin || k != k2 || k == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!("stride {stride} pad {pad} kernel {k} on {h}x{wd}"),
            ));
        }
        if let Some(b) = b {
            if numel(&self.shape(b)) != cout {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {cout} outputs", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let (kk, p) = (geom.rows(), geom.cols());
        let wv = self.value(w).to_f64();
        let bv = b.map(|b| self.value(b).to_f64());
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * cout * p);
        let mut cols = vec![0.0; kk * p];
        let mut acc_buf = vec![0.0; cout * p];
        let mut xs = vec![0.0; cin * h * wd];
        for s in 0..n {
            for (d, v) in xs
                .iter_mut()
                .zip(&xv.data[s * cin * h * wd..(s + 1) * cin * h * wd])
            {
                *d = v.widen();
            }
            im2col(&xs, &geom, &mut cols);
            match &bv {
                Some(bv) => {
                    for (co, row) in acc_buf.chunks_exact_mut(p).enumerate() {
                        row.fill(bv[co]);
                    }
                    gemm(
                        cout,
                        kk,
                        p,
                        &wv,
                        Strides::row_major(kk),
                        &cols,
                        Strides::row_major(p),
                        1.0,
                        &mut acc_buf,
                    );
                }
                None => gemm(
                    cout,
                    kk,
                    p,
                    &wv,
                    Strides::row_major(kk),
                    &cols,
                    Strides::row_major(p),
                    0.0,
                    &mut acc_buf,
                ),
            }
            out.extend(acc_buf.iter().map(|&v| T::of(v)));
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor {
            shape: [n, cout, geom.ho, geom.wo],
            data: out,
        };
        self.push(
            "conv2d",
            value,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        )
    }

    pub fn bilinear_resize(
        &mut self,
        x: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.shape(x);
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(shape_err(
                "bilinear_resize",
                format!("{h}x{w} -> {out_h}x{out_w}"),
            ));
        }
        let ty = resize_taps(h, out_h);
        let tx = resize_taps(w, out_w);
        let xv = &self.value(x).data;
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in xv.chunks_exact(h * w) {
            for &(y0, y1, wy0, wy1) in &ty {
                for &(x0, x1, wx0, wx1) in &tx {
                    let v = wy0
                        * (wx0 * plane[y0 * w + x0].widen() + wx1 * plane[y0 * w + x1].widen())
                        + wy1
                            * (wx0 * plane[y1 * w + x0].widen() + wx1 * plane[y1 * w + x1].widen());
                    out.push(T::of(v));
                }
            }
        }
        let needs = self.needs(x);
        let value = Tensor {
            shape: [n, c, out_h, out_w],
            data: out,
        };
        self.push("bilinear_resize", value, Op::Resize { x, ty, tx }, needs)
    }

    pub fn apply_unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let data = match kind {
            UnaryKind::Relu => xv
                .data
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            UnaryKind::Sigmoid => xv
                .data
                .iter()
                .map(|&v| T::of(1.0 / (1.0 + (-v.widen()).exp())))
                .collect(),
        };
        let value = Tensor {
            shape: xv.shape,
            data,
        };
        let needs = self.needs(x);
        self.push("unary", value, Op::Unary { x, kind }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.apply_unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.apply_unary(UnaryKind::Sigmoid, x)
    }

    /// Elementwise `a ∘ b`; every dimension of `b` must equal `a`'s or be 1.
    pub fn apply_binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !bcast_ok(&sa, &sb) {
            return Err(shape_err("binary", format!("{sa:?} with {sb:?}")));
        }
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut data = vec![T::zero(); numel(&sa)];
        match kind {
            BinaryKind::Add => for_each_bcast(&sa, &sb, |i, j| data[i] = av[i] + bv[j]),
            BinaryKind::Mul => for_each_bcast(&sa, &sb, |i, j| data[i] = av[i] * bv[j]),
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "binary",
            Tensor { shape: sa, data },
            Op::Binary { a, b, kind },
            needs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply_binary(BinaryKind::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply_binary(BinaryKind::Mul, a, b)
    }

    /// Sums several same-shape nodes left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var, TensorError> {
        let (first, rest) = vars
            .split_first()
            .ok_or_else(|| shape_err("add_all", "no operands"))?;
        let mut s = *first;
        for &v in rest {
            s = self.add(s, v)?;
        }
        Ok(s)
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let data = self
            .value(x)
            .data
            .chunks_exact(hw)
            .map(|p| T::of(p.iter().map(|v| v.widen()).sum::<f64>() / hw as f64))
            .collect();
        let needs = self.needs(x);
        self.push(
            "global_avg_pool",
            Tensor {
                shape: [n, c, 1, 1],
                data,
            },
            Op::Gap(x),
            needs,
        )
    }

    /// Mean over channels: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(n * hw);
        for s in 0..n {
            for p in 0..hw {
                let sum: f64 = (0..c).map(|ch| xv[(s * c + ch) * hw + p].widen()).sum();
                data.push(T::of(sum / c as f64));
            }
        }
        let needs = self.needs(x);
        self.push(
            "channel_mean",
            Tensor {
                shape: [n, 1, h, w],
                data,
            },
            Op::ChannelMean(x),
            needs,
        )
    }

    /// Max over channels: `[N,C,H,W] -> [N,1,H,W]`; the gradient goes to the
    /// first maximal channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(n * hw);
        let mut argmax = Vec::with_capacity(n * hw);
        for s in 0..n {
            for p in 0..hw {
                let mut best = 0;
                for ch in 1..c {
                    if xv[(s * c + ch) * hw + p] > xv[(s * c + best) * hw + p] {
                        best = ch;
                    }
                }
                data.push(xv[(s * c + best) * hw + p]);
                argmax.push(best as u32);
            }
        }
        let needs = self.needs(x);
        self.push(
            "channel_max",
            Tensor {
                shape: [n, 1, h, w],
                data,
            },
            Op::ChannelMax { x, argmax },
            needs,
        )
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = xs
            .first()
            .ok_or_else(|| shape_err("concat", "no operands"))?;
        let [n, _, h, w] = self.shape(*first);
        let mut ctot = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.shape(v);
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?}", self.shape(v), self.shape(*first)),
                ));
            }
            ctot += vc;
        }
        let mut data = Vec::with_capacity(n * ctot * h * w);
        for s in 0..n {
            for &v in xs {
                let [_, vc, _, _] = self.shape(v);
                let chunk = vc * h * w;
                data.extend_from_slice(&self.value(v).data[s * chunk..(s + 1) * chunk]);
            }
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(
            "concat",
            Tensor {
                shape: [n, ctot, h, w],
                data,
            },
            Op::Concat(xs.to_vec()),
            needs,
        )
    }

    /// Per-channel affine map `x * scale[c] + shift[c]`.
    pub fn affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.shape(x);
        if numel(&self.shape(scale)) != c || numel(&self.shape(shift)) != c {
            return Err(shape_err(
                "affine",
                format!("{c} channels, scale {:?}", self.shape(scale)),
            ));
        }
        let (xv, sv, tv) = (
            &self.value(x).data,
            &self.value(scale).data,
            &self.value(shift).data,
        );
        let hw = h * w;
        let mut data = Vec::with_capacity(xv.len());
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                data.extend(xv[base..base + hw].iter().map(|&v| v * sv[ch] + tv[ch]));
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        self.push(
            "affine",
            Tensor {
                shape: [n, c, h, w],
                data,
            },
            Op::Affine { x, scale, shift },
            needs,
        )
    }

    /// Reflection padding on the bottom and right edges.
    pub fn reflect_pad(&mut self, x: Var, bottom: usize, right: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.shape(x);
        if bottom >= h.max(1) || right >= w.max(1) {
            return Err(shape_err(
                "reflect_pad",
                format!("pad ({bottom}, {right}) on {h}x{w}"),
            ));
        }
        let (ho, wo) = (h + bottom, w + right);
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(n * c * ho * wo);
        for plane in xv.chunks_exact(h * w) {
            for y in 0..ho {
                let row = &plane[reflect(y, h) * w..(reflect(y, h) + 1) * w];
                data.extend((0..wo).map(|xx| row[reflect(xx, w)]));
            }
        }
        let needs = self.needs(x);
        self.push(
            "reflect_pad",
            Tensor {
                shape: [n, c, ho, wo],
                data,
            },
            Op::ReflectPad { x },
            needs,
        )
    }

    /// Normalizes each channel to zero mean and unit variance over the batch
    /// and spatial axes: `(x - mean) / sqrt(var + eps)`.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, BatchMoments), TensorError> {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let count = (n * hw) as f64;
        if count == 0.0 {
            return Err(shape_err("batch_norm", "empty input"));
        }
        let xv = &self.value(x).data;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, plane) in xv.chunks_exact(hw).enumerate() {
            mean[i % c] += plane.iter().map(|v| v.widen()).sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, plane) in xv.chunks_exact(hw).enumerate() {
            let m = mean[i % c];
            var[i % c] += plane.iter().map(|v| (v.widen() - m).powi(2)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xv.len());
        for (i, plane) in xv.chunks_exact(hw).enumerate() {
            let (m, s) = (mean[i % c], inv_std[i % c]);
            xhat.extend(plane.iter().map(|v| (v.widen() - m) * s));
        }
        let value = Tensor {
            shape: [n, c, h, w],
            data: xhat.iter().map(|&v| T::of(v)).collect(),
        };
        let needs = self.needs(x);
        let v = self.push(
            "batch_norm",
            value,
            Op::BatchNorm { x, xhat, inv_std },
            needs,
        )?;
        Ok((v, BatchMoments { mean, var }))
    }

    /// Keeps the top-left `h × w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let [n, c, hi, wi] = self.shape(x);
        if h > hi || w > wi || h == 0 || w == 0 {
            return Err(shape_err("crop", format!("{h}x{w} from {hi}x{wi}")));
        }
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in xv.chunks_exact(hi * wi) {
            for y in 0..h {
                data.extend_from_slice(&plane[y * wi..y * wi + w]);
            }
        }
        let needs = self.needs(x);
        self.push(
            "crop",
            Tensor {
                shape: [n, c, h, w],
                data,
            },
            Op::Crop { x },
            needs,
        )
    }

    /// Per-pixel softmax cross-entropy of `logits [N,K,H,W]` against
    /// `labels [N·H·W]`; label `ignore` marks pixels without a target.
    pub fn softmax_ce_map(
        &mut self,
        logits: Var,
        labels: &[u8],
        ignore: u8,
    ) -> Result<CeMap, TensorError> {
        let [n, k, h, w] = self.shape(logits);
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(shape_err(
                "softmax_ce_map",
                format!("{} labels for {n}x{h}x{w}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= k) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let lv = &self.value(logits).data;
        let mut probs = vec![0.0; n * k * hw];
        let mut loss = Vec::with_capacity(n * hw);
        let mut prob_correct = Vec::with_capacity(n * hw);
        let mut valid = Vec::with_capacity(n * hw);
        let mut z = vec![0.0; k];
        for s in 0..n {
            for p in 0..hw {
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc = lv[(s * k + c) * hw + p].widen();
                }
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let lse = m + sum.ln();
                for (c, zc) in z.iter().enumerate() {
                    probs[(s * k + c) * hw + p] = (zc - lse).exp();
                }
                let lab = labels[s * hw + p];
                if lab == ignore {
                    loss.push(T::zero());
                    prob_correct.push(1.0);
                    valid.push(false);
                } else {
                    loss.push(T::of(lse - z[lab as usize]));
                    prob_correct.push((z[lab as usize] - lse).exp());
                    valid.push(true);
                }
            }
        }
        let needs = self.needs(logits);
        let loss_map = self.push(
            "softmax_ce_map",
            Tensor {
                shape: [n, 1, h, w],
                data: loss,
            },
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        )?;
        Ok(CeMap {
            loss_map,
            prob_correct,
            valid,
        })
    }

    /// Softmax probabilities kept by a [`Graph::softmax_ce_map`] node.
    pub fn softmax_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::SoftmaxCe { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean of the elements selected by `mask`; zero when nothing is selected.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let xv = &self.value(x).data;
        if mask.len() != xv.len() {
            return Err(shape_err(
                "masked_mean",
                format!("mask {} for {} values", mask.len(), xv.len()),
            ));
        }
        let count = mask.iter().filter(|m| **m).count();
        let sum: f64 = xv
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| v.widen())
            .sum();
        let mean = if count == 0 { 0.0 } else { sum / count as f64 };
        let needs = self.needs(x);
        self.push(
            "masked_mean",
            Tensor::scalar(T::of(mean)),
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                count,
            },
            needs,
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape,
            data: xv.data.iter().map(|&v| T::of(v.widen() * factor)).collect(),
        };
        let needs = self.needs(x);
        self.push("scale", value, Op::Scale { x, factor }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: f64 = self.value(x).data.iter().map(|v| v.widen()).sum();
        let needs = self.needs(x);
        self.push("sum", Tensor::scalar(T::of(s)), Op::Sum(x), needs)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads, TensorError> {
        let shape = self.shape(out);
        if numel(&shape) != 1 {
            return Err(TensorError::NonScalarOutput(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        // Interior grads were consumed; leaves keep theirs.
        Ok(Grads { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_backward(node, g, *x, *w, *b, *stride, *pad, grads),
            Op::Resize { x, ty, tx } => {
                if !self.needs(*x) {
                    return;
                }
                let [_, _, h, w] = self.shape(*x);
                let (oh, ow) = (ty.len(), tx.len());
                let len = numel(&self.shape(*x));
                let dx = acc(grads, *x, len);
                for (plane, gp) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(oh * ow)) {
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let gv = gp[oy * ow + ox];
                            plane[y0 * w + x0] += gv * wy0 * wx0;
                            plane[y0 * w + x1] += gv * wy0 * wx1;
                            plane[y1 * w + x0] += gv * wy1 * wx0;
                            plane[y1 * w + x1] += gv * wy1 * wx1;
                        }
                    }
                }
            }
            Op::BatchNorm { x, xhat, inv_std } => {
                if !self.needs(*x) {
                    return;
                }
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let count = (n * hw) as f64;
                let mut g_mean = vec![0.0; c];
                let mut gx_mean = vec![0.0; c];
                for (i, (gp, xp)) in g.chunks_exact(hw).zip(xhat.chunks_exact(hw)).enumerate() {
                    g_mean[i % c] += gp.iter().sum::<f64>();
                    gx_mean[i % c] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                }
                let dx = acc(grads, *x, g.len());
                for (i, ((dp, gp), xp)) in dx
                    .chunks_exact_mut(hw)
                    .zip(g.chunks_exact(hw))
                    .zip(xhat.chunks_exact(hw))
                    .enumerate()
                {
                    let ch = i % c;
                    let (gm, gxm, s) = (g_mean[ch] / count, gx_mean[ch] / count, inv_std[ch]);
                    for ((d, gv), xh) in dp.iter_mut().zip(gp).zip(xp) {
                        *d += s * (gv - gm - xh * gxm);
                    }
                }
            }
            Op::Unary { x, kind } => {
                if !self.needs(*x) {
                    return;
                }
                let len = g.len();
                let dx = acc(grads, *x, len);
                match kind {
                    UnaryKind::Relu => {
                        let f = self.relu_fault.unwrap_or(1.0);
                        for ((d, &gv), xv) in dx.iter_mut().zip(g).zip(&self.value(*x).data) {
                            if *xv > T::zero() {
                                *d += gv * f;
                            }
                        }
                    }
                    UnaryKind::Sigmoid => {
                        for ((d, &gv), y) in dx.iter_mut().zip(g).zip(&node.value.data) {
                            let y = y.widen();
                            *d += gv * y * (1.0 - y);
                        }
                    }
                }
            }
            Op::Binary { a, b, kind } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if self.needs(*a) {
                    let da = acc(grads, *a, numel(&sa));
                    match kind {
                        BinaryKind::Add => da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv),
                        BinaryKind::Mul => {
                            let bv = &self.value(*b).data;
                            for_each_bcast(&sa, &sb, |i, j| da[i] += g[i] * bv[j].widen());
                        }
                    }
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; numel(&sb)];
                    match kind {
                        BinaryKind::Add => for_each_bcast(&sa, &sb, |i, j| db[j] += g[i]),
                        BinaryKind::Mul => {
                            let av = &self.value(*a).data;
                            for_each_bcast(&sa, &sb, |i, j| db[j] += g[i] * av[i].widen());
                        }
                    }
                    let slot = acc(grads, *b, db.len());
                    slot.iter_mut().zip(db).for_each(|(d, v)| *d += v);
                }
            }
            Op::Gap(x) => {
                if !self.needs(*x) {
                    return;
                }
                let [_, _, h, w] = self.shape(*x);
                let hw = h * w;
                let len = numel(&self.shape(*x));
                let dx = acc(grads, *x, len);
                for (plane, gv) in dx.chunks_exact_mut(hw).zip(g) {
                    let v = gv / hw as f64;
                    plane.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::ChannelMean(x) => {
                if !self.needs(*x) {
                    return;
                }
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let dx = acc(grads, *x, n * c * hw);
                for s in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            dx[(s * c + ch) * hw + p] += g[s * hw + p] / c as f64;
                        }
                    }
                }
            }
            Op::ChannelMax { x, argmax } => {
                if !self.needs(*x) {
                    return;
                }
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let dx = acc(grads, *x, n * c * hw);
                for s in 0..n {
                    for p in 0..hw {
                        let ch = argmax[s * hw + p] as usize;
                        dx[(s * c + ch) * hw + p] += g[s * hw + p];
                    }
                }
            }
            Op::Concat(xs) => {
                let [n, ctot, h, w] = node.value.shape;
                let hw = h * w;
                let mut off = 0;
                for &v in xs {
                    let [_, vc, _, _] = self.shape(v);
                    if self.needs(v) {
                        let dv = acc(grads, v, n * vc * hw);
                        for s in 0..n {
                            let src = &g[(s * ctot + off) * hw..(s * ctot + off + vc) * hw];
                            dv[s * vc * hw..(s + 1) * vc * hw]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, gv)| *d += gv);
                        }
                    }
                    off += vc;
                }
            }
            Op::Affine { x, scale, shift } => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                if self.needs(*x) {
                    let sv = self.value(*scale).to_f64();
                    let dx = acc(grads, *x, n * c * hw);
                    for s in 0..n {
                        for (ch, &k) in sv.iter().enumerate() {
                            let base = (s * c + ch) * hw;
                            for p in base..base + hw {
                                dx[p] += g[p] * k;
                            }
                        }
                    }
                }
                if self.needs(*scale) {
                    let xv = &self.value(*x).data;
                    let mut ds = vec![0.0; c];
                    for s in 0..n {
                        for (ch, d) in ds.iter_mut().enumerate() {
                            let base = (s * c + ch) * hw;
                            *d += (base..base + hw).map(|p| g[p] * xv[p].widen()).sum::<f64>();
                        }
                    }
                    let slot = acc(grads, *scale, c);
                    slot.iter_mut().zip(ds).for_each(|(d, v)| *d += v);
                }
                if self.needs(*shift) {
                    let mut dt = vec![0.0; c];
                    for s in 0..n {
                        for (ch, d) in dt.iter_mut().enumerate() {
                            let base = (s * c + ch) * hw;
                            *d += g[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    let slot = acc(grads, *shift, c);
                    slot.iter_mut().zip(dt).for_each(|(d, v)| *d += v);
                }
            }
            Op::ReflectPad { x } => {
                if !self.needs(*x) {
                    return;
                }
                let [_, _, h, w] = self.shape(*x);
                let [_, _, ho, wo] = node.value.shape;
                let len = numel(&self.shape(*x));
                let dx = acc(grads, *x, len);
                for (plane, gp) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(ho * wo)) {
                    for y in 0..ho {
                        let ry = reflect(y, h);
                        for xx in 0..wo {
                            plane[ry * w + reflect(xx, w)] += gp[y * wo + xx];
                        }
                    }
                }
            }
            Op::Crop { x } => {
                if !self.needs(*x) {
                    return;
                }
                let [_, _, hi, wi] = self.shape(*x);
                let [_, _, h, w] = node.value.shape;
                let len = numel(&self.shape(*x));
                let dx = acc(grads, *x, len);
                for (plane, gp) in dx.chunks_exact_mut(hi * wi).zip(g.chunks_exact(h * w)) {
                    for y in 0..h {
                        plane[y * wi..y * wi + w]
                            .iter_mut()
                            .zip(&gp[y * w..(y + 1) * w])
                            .for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                if !self.needs(*logits) {
                    return;
                }
                let [n, k, h, w] = self.shape(*logits);
                let hw = h * w;
                let dl = acc(grads, *logits, n * k * hw);
                for s in 0..n {
                    for p in 0..hw {
                        let lab = labels[s * hw + p] as usize;
                        let gv = g[s * hw + p];
                        if lab >= k || gv == 0.0 {
                            continue;
                        }
                        for c in 0..k {
                            let i = (s * k + c) * hw + p;
                            let t = if c == lab { 1.0 } else { 0.0 };
                            dl[i] += gv * (probs[i] - t);
                        }
                    }
                }
            }
            Op::MaskedMean { x, mask, count } => {
                if !self.needs(*x) || *count == 0 {
                    return;
                }
                let v = g[0] / *count as f64;
                let dx = acc(grads, *x, mask.len());
                for (d, m) in dx.iter_mut().zip(mask) {
                    if *m {
                        *d += v;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if !self.needs(*x) {
                    return;
                }
                let dx = acc(grads, *x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * factor);
            }
            Op::Sum(x) => {
                if !self.needs(*x) {
                    return;
                }
                let len = numel(&self.shape(*x));
                let dx = acc(grads, *x, len);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        node: &Node<T>,
        g: &[f64],
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, _, k, _] = self.shape(w);
        let [_, _, ho, wo] = node.value.shape;
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let (kk, p) = (geom.rows(), geom.cols());
        let (need_x, need_w) = (self.needs(x), self.needs(w));
        if let Some(b) = b.filter(|&b| self.needs(b)) {
            let mut db = vec![0.0; cout];
            for s in 0..n {
                for (co, d) in db.iter_mut().enumerate() {
                    *d += g[(s * cout + co) * p..(s * cout + co + 1) * p]
                        .iter()
                        .sum::<f64>();
                }
            }
            let slot = acc(grads, b, cout);
            slot.iter_mut().zip(db).for_each(|(d, v)| *d += v);
        }
        if !need_x && !need_w {
            return;
        }
        let wv = self.value(w).to_f64();
        let xv = &self.value(x).data;
        let mut cols = vec![0.0; kk * p];
        let mut dw = if need_w {
            vec![0.0; cout * kk]
        } else {
            Vec::new()
        };
        let mut dx = if need_x {
            vec![0.0; n * cin * h * wd]
        } else {
            Vec::new()
        };
        let mut xs = vec![0.0; cin * h * wd];
        for s in 0..n {
            let gs = &g[s * cout * p..(s + 1) * cout * p];
            if need_w {
                for (d, v) in xs
                    .iter_mut()
                    .zip(&xv[s * cin * h * wd..(s + 1) * cin * h * wd])
                {
                    *d = v.widen();
                }
                im2col(&xs, &geom, &mut cols);
                // dW += gout · colsᵀ
                gemm(
                    cout,
                    p,
                    kk,
                    gs,
                    Strides::row_major(p),
                    &cols,
                    Strides::col_major(p),
                    1.0,
                    &mut dw,
                );
            }
            if need_x {
                // dcols = Wᵀ · gout
                gemm(
                    kk,
                    cout,
                    p,
                    &wv,
                    Strides::col_major(kk),
                    gs,
                    Strides::row_major(p),
                    0.0,
                    &mut cols,
                );
                col2im(
                    &cols,
                    &geom,
                    &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd],
                );
            }
        }
        if need_w {
            let slot = acc(grads, w, cout * kk);
            slot.iter_mut().zip(dw).for_each(|(d, v)| *d += v);
        }
        if need_x {
            let slot = acc(grads, x, dx.len());
            slot.iter_mut().zip(dx).for_each(|(d, v)| *d += v);
        }
    }
}
