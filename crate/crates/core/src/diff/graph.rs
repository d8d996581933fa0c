use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{DiffError, ParamId, ParamStore, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Tanh,
    Abs,
    Square,
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Relu => "relu",
            Self::Tanh => "tanh",
            Self::Abs => "abs",
            Self::Square => "square",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    AvgDown2,
    BilinearUp2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    /// Stride 1 with `k / 2` padding, i.e. "same" output size for odd `k`.
    pub fn same(k: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            padding: k / 2,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Unary(Elementwise, Var),
    Binary(Elementwise, Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Narrow { input: Var, offset: usize },
    Concat(Vec<Var>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        spec: Conv2dSpec,
    },
    AvgDown2(Var),
    BilinearUp2(Var),
    BilinearSample { texture: Var, coords: Var, mask: Var },
    Dft2(Var),
    FilterValid { input: Var, kernel: Arc<Tensor> },
    ShiftDiff(Var, Axis),
    Linear { x: Var, weight: Var, bias: Var },
    GatherMean { table: Var, ids: Vec<usize> },
    MeanSpatial(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Reverse-mode tape. Nodes are recorded in execution order and the
/// backward pass visits them once in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    store_tag: Option<u64>,
}

thread_local! {
    static FFT_PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_plan(n: usize) -> Arc<dyn Fft<f64>> {
    FFT_PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf not backed by a parameter store; its gradient is
    /// read from the [`Gradients`] returned by `backward`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a learnable parameter. A graph binds to one store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        match self.store_tag {
            None => self.store_tag = Some(store.tag()),
            Some(tag) => assert_eq!(tag, store.tag(), "graph mixes parameter stores"),
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn chw(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize), DiffError> {
        match self.shape(v) {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(DiffError::RankMismatch {
                op,
                expected: 3,
                got: s.len(),
            }),
        }
    }

    // ---------------------------------------------------------------- pointwise

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var, DiffError> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => self.unary(op, a),
            (true, None) => Err(DiffError::InvalidArgument(format!(
                "{} needs two operands",
                op.name()
            ))),
            (false, Some(_)) => Err(DiffError::InvalidArgument(format!(
                "{} takes one operand",
                op.name()
            ))),
        }
    }

    fn unary(&mut self, op: Elementwise, a: Var) -> Result<Var, DiffError> {
        let f: fn(f64) -> f64 = match op {
            Elementwise::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Elementwise::Tanh => f64::tanh,
            Elementwise::Abs => f64::abs,
            Elementwise::Square => |x| x * x,
            _ => unreachable!(),
        };
        let value = self.value(a).map(f);
        self.push(op.name(), value, Op::Unary(op, a), &[a])
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = tb.is_scalar() && !ta.is_scalar();
        if !broadcast && ta.shape() != tb.shape() {
            return Err(DiffError::ShapeMismatch {
                op: op.name(),
                expected: ta.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        let f: fn(f64, f64) -> f64 = match op {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
            Elementwise::Div => |x, y| x / y,
            _ => unreachable!(),
        };
        let data: Vec<f64> = if broadcast {
            let y = tb.item();
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::new(ta.shape(), data)?;
        self.push(op.name(), value, Op::Binary(op, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Elementwise::Div, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Elementwise::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Elementwise::Tanh, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Elementwise::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Elementwise::Square, a)
    }

    /// `a * k` for a constant `k`.
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        let value = self.value(a).map(|x| x * k);
        self.push("scale", value, Op::Scale(a, k), &[a])
    }

    /// `a + k` for a constant `k`.
    pub fn offset(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        let value = self.value(a).map(|x| x + k);
        self.push("offset", value, Op::Offset(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", value, Op::Mean(a), &[a])
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Slice `len` entries starting at `start` along the leading axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let t = self.value(a);
        let lead = t.shape()[0];
        if len == 0 || start + len > lead {
            return Err(DiffError::InvalidArgument(format!(
                "narrow {start}..{} out of range for leading dim {lead}",
                start + len
            )));
        }
        let inner = t.len() / lead;
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let value = Tensor::new(&shape, data)?;
        self.push(
            "narrow",
            value,
            Op::Narrow {
                input: a,
                offset: start * inner,
            },
            &[a],
        )
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::InvalidArgument("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    expected: tail.clone(),
                    got: t.shape()[1..].to_vec(),
                });
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        self.push("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    // ---------------------------------------------------------------- convolution

    /// 2D cross-correlation of `input [C_in, H, W]` with `weight [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv2dSpec) -> Result<Var, DiffError> {
        let (ci, h, w) = self.chw(input, "conv2d")?;
        let ws = self.shape(weight).to_vec();
        let [co, wci, k, k2] = ws[..] else {
            return Err(DiffError::RankMismatch {
                op: "conv2d",
                expected: 4,
                got: ws.len(),
            });
        };
        if wci != ci || k != k2 || k % 2 == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                expected: vec![co, ci, k, k],
                got: ws,
            });
        }
        if self.shape(bias) != [co] {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d bias",
                expected: vec![co],
                got: self.shape(bias).to_vec(),
            });
        }
        let geo = ConvGeometry::new(ci, h, w, k, spec)?;
        let cols = geo.im2col(self.value(input).data());
        let n = geo.out_h * geo.out_w;
        let kk = ci * k * k;
        let mut out = vec![0.0; co * n];
        for (o, &b) in self.value(bias).data().iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = b);
        }
        gemm(
            co,
            kk,
            n,
            self.value(weight).data(),
            (kk as isize, 1),
            &cols,
            (n as isize, 1),
            &mut out,
            1.0,
        );
        let value = Tensor::new(&[co, geo.out_h, geo.out_w], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            &[input, weight, bias],
        )
    }

    // ---------------------------------------------------------------- resampling

    pub fn resample(&mut self, input: Var, mode: Resample) -> Result<Var, DiffError> {
        match mode {
            Resample::AvgDown2 => self.avg_down2(input),
            Resample::BilinearUp2 => self.bilinear_up2(input),
        }
    }

    pub fn avg_down2(&mut self, input: Var) -> Result<Var, DiffError> {
        let (c, h, w) = self.chw(input, "avg_down2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(DiffError::OddDimensions { h, w });
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(input).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * x;
                    out[ch * oh * ow + y * ow + x] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let value = Tensor::new(&[c, oh, ow], out)?;
        self.push("avg_down2", value, Op::AvgDown2(input), &[input])
    }

    pub fn bilinear_up2(&mut self, input: Var) -> Result<Var, DiffError> {
        let (c, h, w) = self.chw(input, "bilinear_up2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let ry = up2_taps(h);
        let rx = up2_taps(w);
        let src = self.value(input).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (y, &(y0, y1, fy)) in ry.iter().enumerate() {
                for (x, &(x0, x1, fx)) in rx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out[ch * oh * ow + y * ow + x] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::new(&[c, oh, ow], out)?;
        self.push("bilinear_up2", value, Op::BilinearUp2(input), &[input])
    }

    /// Bilinear texture lookup at `coords [2, H, W]` (u, v in `[0, 1]`) with
    /// edge clamping. Pixels where `mask` is zero produce zero. Coordinates
    /// are treated as constants.
    pub fn bilinear_sample(&mut self, texture: Var, coords: Var, mask: Var) -> Result<Var, DiffError> {
        let (c, th, tw) = self.chw(texture, "bilinear_sample")?;
        let (cc, h, w) = self.chw(coords, "bilinear_sample coords")?;
        if cc != 2 || self.shape(mask) != [1, h, w] {
            return Err(DiffError::ShapeMismatch {
                op: "bilinear_sample",
                expected: vec![2, h, w],
                got: self.shape(coords).to_vec(),
            });
        }
        let taps = sample_taps(self.value(coords).data(), self.value(mask).data(), th, tw)?;
        let tex = self.value(texture).data();
        let n = h * w;
        let mut out = vec![0.0; c * n];
        for (p, tap) in taps.iter().enumerate() {
            let Some(tap) = tap else { continue };
            for ch in 0..c {
                let plane = &tex[ch * th * tw..];
                out[ch * n + p] = tap.idx.iter().zip(&tap.wt).map(|(&i, &wt)| plane[i] * wt).sum();
            }
        }
        let value = Tensor::new(&[c, h, w], out)?;
        self.push(
            "bilinear_sample",
            value,
            Op::BilinearSample {
                texture,
                coords,
                mask,
            },
            &[texture],
        )
    }

    // ---------------------------------------------------------------- spectral

    /// Per-channel 2D DFT. Returns `(re, im)`, each shaped like the input.
    pub fn dft2(&mut self, input: Var) -> Result<(Var, Var), DiffError> {
        let (c, h, w) = self.chw(input, "dft2")?;
        let src = self.value(input).data();
        let mut out = vec![0.0; 2 * c * h * w];
        let n = h * w;
        for ch in 0..c {
            let mut buf: Vec<Complex<f64>> = src[ch * n..(ch + 1) * n]
                .iter()
                .map(|&v| Complex::new(v, 0.0))
                .collect();
            fft2_in_place(&mut buf, h, w);
            for (i, z) in buf.iter().enumerate() {
                out[ch * n + i] = z.re;
                out[c * n + ch * n + i] = z.im;
            }
        }
        let value = Tensor::new(&[2, c, h, w], out)?;
        let both = self.push("dft2", value, Op::Dft2(input), &[input])?;
        let re = self.narrow(both, 0, 1)?;
        let re = self.reshape(re, &[c, h, w])?;
        let im = self.narrow(both, 1, 1)?;
        let im = self.reshape(im, &[c, h, w])?;
        Ok((re, im))
    }

    // ---------------------------------------------------------------- filters

    /// Depthwise "valid" correlation of every channel with a constant `[k, k]` kernel.
    pub fn filter_valid(&mut self, input: Var, kernel: Arc<Tensor>) -> Result<Var, DiffError> {
        let (c, h, w) = self.chw(input, "filter_valid")?;
        let [k, k2] = kernel.shape()[..] else {
            return Err(DiffError::RankMismatch {
                op: "filter_valid",
                expected: 2,
                got: kernel.shape().len(),
            });
        };
        if k != k2 || h < k || w < k {
            return Err(DiffError::InvalidArgument(format!(
                "{h}x{w} input too small for {k}x{k2} window"
            )));
        }
        let (oh, ow) = (h - k + 1, w - k + 1);
        let src = self.value(input).data();
        let kd = kernel.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for ky in 0..k {
                for kx in 0..k {
                    let wt = kd[ky * k + kx];
                    for y in 0..oh {
                        let row = &plane[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                        let orow = &mut dst[y * ow..(y + 1) * ow];
                        for (o, &s) in orow.iter_mut().zip(row) {
                            *o += wt * s;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[c, oh, ow], out)?;
        self.push("filter_valid", value, Op::FilterValid { input, kernel }, &[input])
    }

    /// Forward difference `x[i + 1] - x[i]` along rows or columns of `[C, H, W]`.
    pub fn shift_diff(&mut self, input: Var, axis: Axis) -> Result<Var, DiffError> {
        let (c, h, w) = self.chw(input, "shift_diff")?;
        let src = self.value(input).data();
        let (oh, ow, step) = match axis {
            Axis::Cols => (h, w.saturating_sub(1), 1),
            Axis::Rows => (h.saturating_sub(1), w, w),
        };
        if oh == 0 || ow == 0 {
            return Err(DiffError::InvalidArgument("shift_diff on a unit axis".into()));
        }
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let i = ch * h * w + y * w + x;
                    out.push(src[i + step] - src[i]);
                }
            }
        }
        let value = Tensor::new(&[c, oh, ow], out)?;
        self.push("shift_diff", value, Op::ShiftDiff(input, axis), &[input])
    }

    // ---------------------------------------------------------------- dense

    /// `weight [O, N] · x [N] + bias [O]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, DiffError> {
        let n = self.value(x).len();
        let ws = self.shape(weight).to_vec();
        let [o, wn] = ws[..] else {
            return Err(DiffError::RankMismatch {
                op: "linear",
                expected: 2,
                got: ws.len(),
            });
        };
        if wn != n || self.shape(bias) != [o] {
            return Err(DiffError::ShapeMismatch {
                op: "linear",
                expected: vec![o, n],
                got: ws,
            });
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(weight).data(), self.value(bias).data());
        let out: Vec<f64> = (0..o)
            .map(|r| bv[r] + wv[r * n..(r + 1) * n].iter().zip(xv).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let value = Tensor::new(&[o], out)?;
        self.push("linear", value, Op::Linear { x, weight, bias }, &[x, weight, bias])
    }

    /// Mean of the listed rows of `table [N, E]`; the zero vector for an empty list.
    pub fn gather_mean(&mut self, table: Var, ids: &[usize]) -> Result<Var, DiffError> {
        let ts = self.shape(table).to_vec();
        let [rows, e] = ts[..] else {
            return Err(DiffError::RankMismatch {
                op: "gather_mean",
                expected: 2,
                got: ts.len(),
            });
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(DiffError::InvalidArgument(format!(
                "row {bad} out of range for {rows} rows"
            )));
        }
        let mut out = vec![0.0; e];
        if !ids.is_empty() {
            let t = self.value(table).data();
            let inv = 1.0 / ids.len() as f64;
            for &i in ids {
                for (o, &v) in out.iter_mut().zip(&t[i * e..(i + 1) * e]) {
                    *o += v * inv;
                }
            }
        }
        let value = Tensor::new(&[e], out)?;
        self.push(
            "gather_mean",
            value,
            Op::GatherMean {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Global average pool `[C, H, W] -> [C]`.
    pub fn mean_spatial(&mut self, input: Var) -> Result<Var, DiffError> {
        let (c, h, w) = self.chw(input, "mean_spatial")?;
        let n = h * w;
        let src = self.value(input).data();
        let out: Vec<f64> = (0..c).map(|ch| src[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let value = Tensor::new(&[c], out)?;
        self.push("mean_spatial", value, Op::MeanSpatial(input), &[input])
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates d`loss`/dθ into every parameter of `store` reached by the
    /// graph, and returns the per-node gradients. Repeated calls accumulate.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients, DiffError> {
        if !self.value(loss).is_scalar() {
            return Err(DiffError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        if let Some(tag) = self.store_tag {
            assert_eq!(tag, store.tag(), "backward into a different parameter store");
        }
        let grads = self.gradients(loss);
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                for (acc, v) in store.get_mut(*id).grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
        Ok(grads)
    }

    /// Backward pass for graphs without parameters.
    pub fn backward_inputs(&self, loss: Var) -> Result<Gradients, DiffError> {
        if !self.value(loss).is_scalar() {
            return Err(DiffError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        Ok(self.gradients(loss))
    }

    fn gradients(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                let y = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        let d = match op {
                            Elementwise::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Elementwise::Tanh => 1.0 - y[k] * y[k],
                            Elementwise::Abs => {
                                if x[k] > 0.0 {
                                    1.0
                                } else if x[k] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Elementwise::Square => 2.0 * x[k],
                            _ => unreachable!(),
                        };
                        ga[k] += g[k] * d;
                    }
                }
            }
            Op::Binary(op, a, b) => {
                let (op, a, b) = (*op, *a, *b);
                let xa = self.value(a).data();
                let xb = self.value(b).data();
                let bcast = xb.len() == 1 && xa.len() != 1;
                let bv = |k: usize| if bcast { xb[0] } else { xb[k] };
                if let Some(ga) = self.acc(grads, a) {
                    for k in 0..g.len() {
                        ga[k] += match op {
                            Elementwise::Add | Elementwise::Sub => g[k],
                            Elementwise::Mul => g[k] * bv(k),
                            Elementwise::Div => g[k] / bv(k),
                            _ => unreachable!(),
                        };
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for k in 0..g.len() {
                        let d = match op {
                            Elementwise::Add => g[k],
                            Elementwise::Sub => -g[k],
                            Elementwise::Mul => g[k] * xa[k],
                            Elementwise::Div => -g[k] * xa[k] / (bv(k) * bv(k)),
                            _ => unreachable!(),
                        };
                        gb[if bcast { 0 } else { k }] += d;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * s);
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Narrow { input, offset } => {
                let offset = *offset;
                if let Some(ga) = self.acc(grads, *input) {
                    ga[offset..offset + g.len()].iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(o, v)| *o += v);
                    }
                    offset += n;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => self.conv2d_backward(*input, *weight, *bias, *spec, g, grads),
            Op::AvgDown2(a) => {
                let (c, h, w) = self.value(*a).chw().expect("rank checked");
                let (oh, ow) = (h / 2, w / 2);
                if let Some(ga) = self.acc(grads, *a) {
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let v = 0.25 * g[ch * oh * ow + y * ow + x];
                                let base = ch * h * w + 2 * y * w + 2 * x;
                                ga[base] += v;
                                ga[base + 1] += v;
                                ga[base + w] += v;
                                ga[base + w + 1] += v;
                            }
                        }
                    }
                }
            }
            Op::BilinearUp2(a) => {
                let (c, h, w) = self.value(*a).chw().expect("rank checked");
                let (oh, ow) = (2 * h, 2 * w);
                let ry = up2_taps(h);
                let rx = up2_taps(w);
                if let Some(ga) = self.acc(grads, *a) {
                    for ch in 0..c {
                        let plane = &mut ga[ch * h * w..(ch + 1) * h * w];
                        for (y, &(y0, y1, fy)) in ry.iter().enumerate() {
                            for (x, &(x0, x1, fx)) in rx.iter().enumerate() {
                                let v = g[ch * oh * ow + y * ow + x];
                                plane[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                                plane[y0 * w + x1] += v * (1.0 - fy) * fx;
                                plane[y1 * w + x0] += v * fy * (1.0 - fx);
                                plane[y1 * w + x1] += v * fy * fx;
                            }
                        }
                    }
                }
            }
            Op::BilinearSample {
                texture,
                coords,
                mask,
            } => {
                let (c, th, tw) = self.value(*texture).chw().expect("rank checked");
                let taps = sample_taps(self.value(*coords).data(), self.value(*mask).data(), th, tw)
                    .expect("validated in forward");
                let n = taps.len();
                if let Some(gt) = self.acc(grads, *texture) {
                    for (p, tap) in taps.iter().enumerate() {
                        let Some(tap) = tap else { continue };
                        for ch in 0..c {
                            let v = g[ch * n + p];
                            let plane = &mut gt[ch * th * tw..(ch + 1) * th * tw];
                            for (&i, &wt) in tap.idx.iter().zip(&tap.wt) {
                                plane[i] += v * wt;
                            }
                        }
                    }
                }
            }
            Op::Dft2(a) => {
                let (c, h, w) = self.value(*a).chw().expect("rank checked");
                let n = h * w;
                if let Some(ga) = self.acc(grads, *a) {
                    for ch in 0..c {
                        let mut buf: Vec<Complex<f64>> = (0..n)
                            .map(|i| Complex::new(g[ch * n + i], -g[c * n + ch * n + i]))
                            .collect();
                        fft2_in_place(&mut buf, h, w);
                        for (o, z) in ga[ch * n..(ch + 1) * n].iter_mut().zip(&buf) {
                            *o += z.re;
                        }
                    }
                }
            }
            Op::FilterValid { input, kernel } => {
                let (c, h, w) = self.value(*input).chw().expect("rank checked");
                let k = kernel.shape()[0];
                let (oh, ow) = (h - k + 1, w - k + 1);
                let kd = kernel.data();
                if let Some(ga) = self.acc(grads, *input) {
                    for ch in 0..c {
                        let gsrc = &g[ch * oh * ow..(ch + 1) * oh * ow];
                        let plane = &mut ga[ch * h * w..(ch + 1) * h * w];
                        for ky in 0..k {
                            for kx in 0..k {
                                let wt = kd[ky * k + kx];
                                for y in 0..oh {
                                    let grow = &gsrc[y * ow..(y + 1) * ow];
                                    let prow = &mut plane[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                                    for (p, &v) in prow.iter_mut().zip(grow) {
                                        *p += wt * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ShiftDiff(a, axis) => {
                let (c, h, w) = self.value(*a).chw().expect("rank checked");
                let (oh, ow, step) = match axis {
                    Axis::Cols => (h, w - 1, 1),
                    Axis::Rows => (h - 1, w, w),
                };
                if let Some(ga) = self.acc(grads, *a) {
                    let mut k = 0;
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let i = ch * h * w + y * w + x;
                                ga[i + step] += g[k];
                                ga[i] -= g[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
            Op::Linear { x, weight, bias } => {
                let n = self.value(*x).len();
                let xv = self.value(*x).data();
                let wv = self.value(*weight).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &gr) in g.iter().enumerate() {
                        for (o, &wgt) in gx.iter_mut().zip(&wv[r * n..(r + 1) * n]) {
                            *o += gr * wgt;
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *weight) {
                    for (r, &gr) in g.iter().enumerate() {
                        for (o, &xi) in gw[r * n..(r + 1) * n].iter_mut().zip(xv) {
                            *o += gr * xi;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::GatherMean { table, ids } => {
                let e = g.len();
                if ids.is_empty() {
                    return;
                }
                let inv = 1.0 / ids.len() as f64;
                if let Some(gt) = self.acc(grads, *table) {
                    for &r in ids {
                        for (o, &v) in gt[r * e..(r + 1) * e].iter_mut().zip(g) {
                            *o += v * inv;
                        }
                    }
                }
            }
            Op::MeanSpatial(a) => {
                let (c, h, w) = self.value(*a).chw().expect("rank checked");
                let n = h * w;
                if let Some(ga) = self.acc(grads, *a) {
                    for ch in 0..c {
                        let v = g[ch] / n as f64;
                        ga[ch * n..(ch + 1) * n].iter_mut().for_each(|o| *o += v);
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        spec: Conv2dSpec,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (ci, h, w) = self.value(input).chw().expect("rank checked");
        let ws = self.shape(weight);
        let (co, k) = (ws[0], ws[2]);
        let geo = ConvGeometry::new(ci, h, w, k, spec).expect("validated in forward");
        let n = geo.out_h * geo.out_w;
        let kk = ci * k * k;
        if let Some(gb) = self.acc(grads, bias) {
            for (o, b) in gb.iter_mut().enumerate() {
                *b += g[o * n..(o + 1) * n].iter().sum::<f64>();
            }
        }
        if self.needs(weight) {
            let cols = geo.im2col(self.value(input).data());
            let gw = self.acc(grads, weight).expect("needs grad");
            // dW[co, kk] += dOut[co, n] · cols[kk, n]^T
            gemm(co, n, kk, g, (n as isize, 1), &cols, (1, n as isize), gw, 1.0);
        }
        if self.needs(input) {
            let mut dcols = vec![0.0; kk * n];
            // dcols[kk, n] = W[co, kk]^T · dOut[co, n]
            gemm(
                kk,
                co,
                n,
                self.value(weight).data(),
                (1, kk as isize),
                g,
                (n as isize, 1),
                &mut dcols,
                0.0,
            );
            let gi = self.acc(grads, input).expect("needs grad");
            geo.col2im(&dcols, gi);
        }
    }
}

/// `c[m, n] = a[m, k] · b[k, n] + beta · c` with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    // SAFETY: the strides above describe row-major or transposed row-major
    // views that lie entirely inside `a`, `b` and `c`, whose lengths the
    // callers derive from the same dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeometry {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(ci: usize, h: usize, w: usize, k: usize, spec: Conv2dSpec) -> Result<Self, DiffError> {
        let Conv2dSpec { stride, padding } = spec;
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if stride == 0 || ph < k || pw < k || (ph - k) % stride != 0 || (pw - k) % stride != 0 {
            return Err(DiffError::InvalidArgument(format!(
                "conv2d geometry {h}x{w}, k={k}, stride={stride}, padding={padding} is not integral"
            )));
        }
        Ok(ConvGeometry {
            ci,
            h,
            w,
            k,
            stride,
            pad: padding,
            out_h: (ph - k) / stride + 1,
            out_w: (pw - k) / stride + 1,
        })
    }

    /// Valid output-x range `[lo, hi)` for kernel column `kx`.
    fn x_range(&self, kx: usize) -> (usize, usize) {
        range_for(kx, self.pad, self.stride, self.w, self.out_w)
    }

    fn y_range(&self, ky: usize) -> (usize, usize) {
        range_for(ky, self.pad, self.stride, self.h, self.out_h)
    }

    fn im2col(&self, src: &[f64]) -> Vec<f64> {
        let n = self.out_h * self.out_w;
        let mut cols = vec![0.0; self.ci * self.k * self.k * n];
        for c in 0..self.ci {
            let plane = &src[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (y0, y1) = self.y_range(ky);
                for kx in 0..self.k {
                    let (x0, x1) = self.x_range(kx);
                    let row = ((c * self.k + ky) * self.k + kx) * n;
                    for oy in y0..y1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let dst = &mut cols[row + oy * self.out_w..row + (oy + 1) * self.out_w];
                        if self.stride == 1 {
                            let ix0 = x0 + kx - self.pad;
                            dst[x0..x1].copy_from_slice(&plane[iy * self.w + ix0..iy * self.w + ix0 + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                dst[ox] = plane[iy * self.w + ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dst: &mut [f64]) {
        let n = self.out_h * self.out_w;
        for c in 0..self.ci {
            let plane = &mut dst[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (y0, y1) = self.y_range(ky);
                for kx in 0..self.k {
                    let (x0, x1) = self.x_range(kx);
                    let row = ((c * self.k + ky) * self.k + kx) * n;
                    for oy in y0..y1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &cols[row + oy * self.out_w..row + (oy + 1) * self.out_w];
                        for ox in x0..x1 {
                            plane[iy * self.w + ox * self.stride + kx - self.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output indices `o` with `0 <= o*stride + kpos - pad < size`.
fn range_for(kpos: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let lo = if kpos >= pad { 0 } else { (pad - kpos).div_ceil(stride) };
    let hi = if size + pad > kpos {
        ((size + pad - kpos - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Source taps `(i0, i1, frac)` for 2x bilinear upsampling with pixel-centre alignment.
fn up2_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let s = ((o as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

struct Tap {
    idx: [usize; 4],
    wt: [f64; 4],
}

fn sample_taps(coords: &[f64], mask: &[f64], th: usize, tw: usize) -> Result<Vec<Option<Tap>>, DiffError> {
    let n = mask.len();
    (0..n)
        .map(|p| {
            if mask[p] <= 0.5 {
                return Ok(None);
            }
            let (u, v) = (coords[p], coords[n + p]);
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                return Err(DiffError::CoordOutOfRange { u, v });
            }
            let x = (u * tw as f64 - 0.5).clamp(0.0, (tw - 1) as f64);
            let y = (v * th as f64 - 0.5).clamp(0.0, (th - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(tw - 1), (y0 + 1).min(th - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            Ok(Some(Tap {
                idx: [y0 * tw + x0, y0 * tw + x1, y1 * tw + x0, y1 * tw + x1],
                wt: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            }))
        })
        .collect()
}

/// Unnormalised forward 2D FFT of a row-major `h x w` buffer.
pub(crate) fn fft2_in_place(buf: &mut [Complex<f64>], h: usize, w: usize) {
    let row_fft = fft_plan(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = fft_plan(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}
