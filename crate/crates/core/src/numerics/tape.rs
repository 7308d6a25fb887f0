//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node holding its forward value and whatever
//! it needs for the backward pass. Nodes only reference earlier nodes, so the
//! tape is already a topological order and [`Tape::backward`] simply walks it
//! in reverse, visiting each node once.

use super::gemm::{gemm, Mat};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_len(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, image: &[f32], cols: &mut [f32]) {
        let l = self.col_len();
        for c in 0..self.cin {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], image: &mut [f32]) {
        let l = self.col_len();
        for c in 0..self.cin {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        /// im2col buffers, kept only when the kernel needs a gradient.
        cols: Vec<f32>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Log(Var),
    Log1p(Var),
    SoftmaxChannel(Var),
    SpatialMaxPool { input: Var, argmax: Vec<usize> },
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumAxis { input: Var, axis: usize },
    GatherCells { input: Var, maps: Vec<Vec<usize>> },
    SliceBatch { input: Var, start: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
    LayerNorm { input: Var, normalized: Vec<f32>, inv_std: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Epsilon used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t`; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, needs)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", k, 4)?;
        let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kcin, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding || kh == 0 || kw == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit padded input {h}x{w} (padding {padding})"),
            ));
        }
        if let Some(b) = bias {
            let b = self.value(b);
            if b.shape() != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{cout}]", b.shape()),
                ));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let keep_cols = self.needs(kernel);
        let (ck, l) = (geom.col_rows(), geom.col_len());
        let mut out = vec![0.0f32; n * cout * l];
        let mut cols = vec![0.0f32; if keep_cols { n * ck * l } else { ck * l }];
        let xd = x.data();
        let kd = k.data();
        for i in 0..n {
            let col = if keep_cols {
                &mut cols[i * ck * l..(i + 1) * ck * l]
            } else {
                &mut cols[..]
            };
            geom.im2col(&xd[i * cin * h * w..(i + 1) * cin * h * w], col);
            gemm(
                Mat::new(kd, cout, ck),
                Mat::new(col, ck, l),
                &mut out[i * cout * l..(i + 1) * cout * l],
                0.0,
            );
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for i in 0..n {
                for (c, bv) in bd.iter().enumerate() {
                    let start = (i * cout + c) * l;
                    out[start..start + l].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        if !keep_cols {
            cols = Vec::new();
        }
        let needs = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![n, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            needs,
        ))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, make(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, Op::Tanh(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f32::ln, Op::Log(x))
    }

    pub fn log1p(&mut self, x: Var) -> Var {
        self.unary(x, f32::ln_1p, Op::Log1p(x))
    }

    /// Softmax over axis 1 of an `[N, P, H, W]` tensor.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        expect_rank("softmax_channel", t, 4)?;
        let (n, p) = (t.shape()[0], t.shape()[1]);
        if p == 0 {
            return Err(Error::shape("softmax_channel", "need at least one channel"));
        }
        let s = t.shape()[2] * t.shape()[3];
        let xd = t.data();
        let mut out = vec![0.0f32; xd.len()];
        let mut buf = vec![0.0f64; p];
        for i in 0..n {
            let base = i * p * s;
            for loc in 0..s {
                let max = (0..p)
                    .map(|c| xd[base + c * s + loc])
                    .fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut total = 0.0f64;
                for (c, b) in buf.iter_mut().enumerate() {
                    *b = (xd[base + c * s + loc] as f64 - max).exp();
                    total += *b;
                }
                for (c, b) in buf.iter().enumerate() {
                    out[base + c * s + loc] = (b / total) as f32;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SoftmaxChannel(x), needs))
    }

    /// Max over the spatial axes of `[N, P, H, W]`, giving `[N, P]`.
    ///
    /// Also returns, per `(n, p)`, the flat `h * W + w` index of the first
    /// maximum in row-major scan order.
    pub fn spatial_max_pool(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let t = self.value(x);
        expect_rank("spatial_max_pool", t, 4)?;
        let (n, p) = (t.shape()[0], t.shape()[1]);
        let s = t.shape()[2] * t.shape()[3];
        if s == 0 {
            return Err(Error::shape("spatial_max_pool", "empty spatial grid"));
        }
        let (values, argmax) = max_pool_planes(t.data(), n * p, s);
        let value = Tensor::new(vec![n, p], values)?;
        let needs = self.needs(x);
        let v = self.push(
            value,
            Op::SpatialMaxPool {
                input: x,
                argmax: argmax.clone(),
            },
            needs,
        );
        Ok((v, argmax))
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul", ta, 2)?;
        expect_rank("matmul", tb, 2)?;
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = (tb.shape()[0], tb.shape()[1]);
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(Mat::new(ta.data(), m, k), Mat::new(tb.data(), k, n), &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total as f32), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let total: f64 = t.data().iter().map(|&v| v as f64).sum();
        let mean = total / t.numel().max(1) as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(mean as f32), Op::Mean(x), needs)
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} out of range for {:?}", t.shape()),
            ));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let xd = t.data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|k| xd[(o * len + k) * inner + i] as f64).sum();
                out[o * inner + i] = s as f32;
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SumAxis { input: x, axis }, needs))
    }

    /// Reorders the spatial cells of `[N, C, H, W]` per sample:
    /// `out[n, c, s] = x[n, c, maps[n][s]]` with `s` a flat cell index.
    pub fn gather_cells(&mut self, x: Var, maps: Vec<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        expect_rank("gather_cells", t, 4)?;
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let s = t.shape()[2] * t.shape()[3];
        if maps.len() != n || maps.iter().any(|m| m.len() != s || m.iter().any(|&j| j >= s)) {
            return Err(Error::shape(
                "gather_cells",
                format!("need {n} maps of {s} in-range cell indices"),
            ));
        }
        let xd = t.data();
        let mut out = vec![0.0f32; xd.len()];
        for (i, map) in maps.iter().enumerate() {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for (dst, &src) in map.iter().enumerate() {
                    out[base + dst] = xd[base + src];
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::GatherCells { input: x, maps }, needs))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || start + len > t.shape()[0] {
            return Err(Error::shape(
                "slice_batch",
                format!("rows {start}..{} of {:?}", start + len, t.shape()),
            ));
        }
        let row: usize = t.shape()[1..].iter().product();
        let data = t.data()[start * row..(start + len) * row].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceBatch { input: x, start }, needs))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` row-wise.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        expect_rank("cross_entropy", t, 2)?;
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if targets.len() != n || targets.iter().any(|&y| y >= c) || n == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), t.shape()),
            ));
        }
        let xd = t.data();
        let mut probs = vec![0.0f32; n * c];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
            for j in 0..c {
                probs[i * c + j] = (row[j] as f64 - lse).exp() as f32;
            }
            loss -= row[targets[i]] as f64 - lse;
        }
        let value = Tensor::scalar((loss / n as f64) as f32);
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Per-sample standardization over all non-leading axes (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(Error::shape("layer_norm", "need a batch axis and features"));
        }
        let n = t.shape()[0];
        let m = t.numel() / n.max(1);
        let xd = t.data();
        let mut normalized = vec![0.0f32; xd.len()];
        let mut inv_std = vec![0.0f32; n];
        for i in 0..n {
            let row = &xd[i * m..(i + 1) * m];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv as f32;
            for (o, &v) in normalized[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = ((v as f64 - mean) * inv) as f32;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), normalized.clone())?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: x,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    /// Differentiates the scalar `loss` with respect to every recorded leaf
    /// that requires a gradient. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.needs_grad => {
                    Some(g.unwrap_or_else(|| vec![0.0; node.value.numel()]))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (ck, l) = (geom.col_rows(), geom.col_len());
                let cout = geom.cout;
                if let Some(b) = bias {
                    acc(*b, &mut |db| {
                        for i in 0..geom.n {
                            for (c, d) in db.iter_mut().enumerate() {
                                let start = (i * cout + c) * l;
                                *d += g[start..start + l].iter().map(|&v| v as f64).sum::<f64>()
                                    as f32;
                            }
                        }
                    });
                }
                acc(*kernel, &mut |dk| {
                    for i in 0..geom.n {
                        gemm(
                            Mat::new(&g[i * cout * l..(i + 1) * cout * l], cout, l),
                            Mat::new(&cols[i * ck * l..(i + 1) * ck * l], ck, l).t(),
                            dk,
                            1.0,
                        );
                    }
                });
                let kd = val(*kernel);
                let img = geom.cin * geom.h * geom.w;
                acc(*input, &mut |dx| {
                    let mut dcols = vec![0.0f32; ck * l];
                    for i in 0..geom.n {
                        gemm(
                            Mat::new(kd, cout, ck).t(),
                            Mat::new(&g[i * cout * l..(i + 1) * cout * l], cout, l),
                            &mut dcols,
                            0.0,
                        );
                        geom.col2im(&dcols, &mut dx[i * img..(i + 1) * img]);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)
            }),
            Op::AddScalar(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((d, g), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((d, g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((d, g), &v) in d.iter_mut().zip(g).zip(xv) {
                        *d += g / v;
                    }
                });
            }
            Op::Log1p(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((d, g), &v) in d.iter_mut().zip(g).zip(xv) {
                        *d += g / (1.0 + v);
                    }
                });
            }
            Op::SoftmaxChannel(x) => {
                let y = &node.value;
                let (n, p) = (y.shape()[0], y.shape()[1]);
                let s = y.shape()[2] * y.shape()[3];
                let yd = y.data();
                acc(*x, &mut |d| {
                    for i in 0..n {
                        let base = i * p * s;
                        for loc in 0..s {
                            let dot: f64 = (0..p)
                                .map(|c| {
                                    let k = base + c * s + loc;
                                    yd[k] as f64 * g[k] as f64
                                })
                                .sum();
                            for c in 0..p {
                                let k = base + c * s + loc;
                                d[k] += (yd[k] as f64 * (g[k] as f64 - dot)) as f32;
                            }
                        }
                    }
                });
            }
            Op::SpatialMaxPool { input, argmax } => {
                let t = &nodes[input.0].value;
                let s = t.shape()[2] * t.shape()[3];
                acc(*input, &mut |d| {
                    for (plane, (&a, &gv)) in argmax.iter().zip(g).enumerate() {
                        d[plane * s + a] += gv;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                acc(*a, &mut |d| {
                    gemm(Mat::new(g, m, n), Mat::new(tb.data(), k, n).t(), d, 1.0)
                });
                acc(*b, &mut |d| {
                    gemm(Mat::new(ta.data(), m, k).t(), Mat::new(g, m, n), d, 1.0)
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let scale = g[0] / nodes[x.0].value.numel().max(1) as f32;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += scale));
            }
            Op::SumAxis { input, axis } => {
                let (outer, len, inner) = axis_split(nodes[input.0].value.shape(), *axis);
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                d[(o * len + k) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::GatherCells { input, maps } => {
                let t = &nodes[input.0].value;
                let c = t.shape()[1];
                let s = t.shape()[2] * t.shape()[3];
                acc(*input, &mut |d| {
                    for (i, map) in maps.iter().enumerate() {
                        for ch in 0..c {
                            let base = (i * c + ch) * s;
                            for (dst, &src) in map.iter().enumerate() {
                                d[base + src] += g[base + dst];
                            }
                        }
                    }
                });
            }
            Op::SliceBatch { input, start } => {
                let t = &nodes[input.0].value;
                let row: usize = t.shape()[1..].iter().product();
                acc(*input, &mut |d| {
                    add_into(&mut d[start * row..start * row + g.len()], g);
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f32;
                acc(*logits, &mut |d| {
                    for i in 0..n {
                        for j in 0..c {
                            let onehot = if targets[i] == j { 1.0 } else { 0.0 };
                            d[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                normalized,
                inv_std,
            } => {
                let n = inv_std.len();
                let m = normalized.len() / n;
                acc(*input, &mut |d| {
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        let xh = &normalized[i * m..(i + 1) * m];
                        let mean_g = gr.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
                        let mean_gx = gr
                            .iter()
                            .zip(xh)
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum::<f64>()
                            / m as f64;
                        let inv = inv_std[i] as f64;
                        for k in 0..m {
                            d[i * m + k] += (inv
                                * (gr[k] as f64 - mean_g - xh[k] as f64 * mean_gx))
                                as f32;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(d: &mut [f32], g: &[f32]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Per-plane maximum with first-index tie-breaking.
pub(crate) fn max_pool_planes(data: &[f32], planes: usize, plane_len: usize) -> (Vec<f32>, Vec<usize>) {
    let mut values = Vec::with_capacity(planes);
    let mut argmax = Vec::with_capacity(planes);
    for plane in data.chunks_exact(plane_len).take(planes) {
        let mut best = 0;
        for (j, &v) in plane.iter().enumerate().skip(1) {
            if v > plane[best] {
                best = j;
            }
        }
        values.push(plane[best]);
        argmax.push(best);
    }
    (values, argmax)
}

/// Gradients of recorded leaves, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `target.grad`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}
