//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation evaluates eagerly and appends a node recording its
//! inputs. [`Tape::backward`] walks the nodes in exact reverse order. The
//! tape is never mutated by the backward pass, so it can be replayed.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Boundary handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Periodic boundary: the image lives on a torus.
    Wrap,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleBatch(Var, Vec<T>),
    AddChannel { x: Var, bias: Var },
    Conv2d { input: Var, kernel: Var, stride: usize, padding: Padding },
    Linear { input: Var, weight: Var, bias: Var },
    LeakyRelu(Var, T),
    Silu(Var),
    Tanh(Var),
    AvgPool(Var, usize),
    Upsample(Var, usize),
    Concat(Vec<Var>),
    Sum(Var),
    PeriodicDiff { x: Var, axis: usize },
    Warp { image: Var, disp: Var },
    Reshape(Var),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
}

/// Record of executed operations for one forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node on the tape.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`; exact zeros if `var` did not contribute.
    pub fn get(&self, var: Var) -> Tensor<T> {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Precomputed source index (or `None` for zero padding) for every
/// (kernel tap, output pixel) pair of a 2-D convolution.
struct ConvGeometry {
    k: usize,
    out_h: usize,
    out_w: usize,
    taps: Vec<Option<usize>>,
}

impl ConvGeometry {
    fn new(h: usize, w: usize, k: usize, stride: usize, padding: Padding) -> Self {
        let p = (k / 2) as isize;
        let out_h = (h + 2 * (k / 2) - k) / stride + 1;
        let out_w = (w + 2 * (k / 2) - k) / stride + 1;
        let mut taps = Vec::with_capacity(k * k * out_h * out_w);
        for ky in 0..k {
            for kx in 0..k {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let iy = (oy * stride) as isize + ky as isize - p;
                        let ix = (ox * stride) as isize + kx as isize - p;
                        let src = match padding {
                            Padding::Wrap => Some(
                                iy.rem_euclid(h as isize) as usize * w
                                    + ix.rem_euclid(w as isize) as usize,
                            ),
                            Padding::Zero => {
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    None
                                } else {
                                    Some(iy as usize * w + ix as usize)
                                }
                            }
                        };
                        taps.push(src);
                    }
                }
            }
        }
        Self {
            k,
            out_h,
            out_w,
            taps,
        }
    }

    fn im2col<T: Real>(&self, x: &[T], cin: usize, hw: usize, col: &mut [T]) {
        let kk = self.k * self.k;
        let o = self.out_h * self.out_w;
        for ci in 0..cin {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for t in 0..kk {
                let row = &mut col[(ci * kk + t) * o..(ci * kk + t + 1) * o];
                let taps = &self.taps[t * o..(t + 1) * o];
                for (dst, src) in row.iter_mut().zip(taps) {
                    *dst = src.map_or(T::zero(), |s| plane[s]);
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], cin: usize, hw: usize, dx: &mut [T]) {
        let kk = self.k * self.k;
        let o = self.out_h * self.out_w;
        for ci in 0..cin {
            let plane = &mut dx[ci * hw..(ci + 1) * hw];
            for t in 0..kk {
                let row = &col[(ci * kk + t) * o..(ci * kk + t + 1) * o];
                let taps = &self.taps[t * o..(t + 1) * o];
                for (g, src) in row.iter().zip(taps) {
                    if let Some(s) = src {
                        plane[*s] += *g;
                    }
                }
            }
        }
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::contract(op, format!("expected a 4-d tensor, got {shape:?}"))),
    }
}

/// Periodic bilinear sample of `plane` (`h`×`w`) at (`py`, `px`).
/// Returns the value together with the four corner indices and weights.
#[inline]
fn bilinear_taps<T: Real>(h: usize, w: usize, py: T, px: T) -> ([usize; 4], [T; 4], T, T) {
    let y0f = py.floor();
    let x0f = px.floor();
    let fy = py - y0f;
    let fx = px - x0f;
    let y0 = y0f.to_i64().unwrap_or(0).rem_euclid(h as i64) as usize;
    let x0 = x0f.to_i64().unwrap_or(0).rem_euclid(w as i64) as usize;
    let y1 = (y0 + 1) % h;
    let x1 = (x0 + 1) % w;
    let one = T::one();
    (
        [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        [
            (one - fy) * (one - fx),
            (one - fy) * fx,
            fy * (one - fx),
            fy * fx,
        ],
        fy,
        fx,
    )
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    /// Register a leaf (parameter or constant input).
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    /// Scalar value of a rank-0 node.
    pub fn item(&self, var: Var) -> T {
        self.nodes.borrow()[var.0].value.data()[0]
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.push(Tensor::new(va.shape().to_vec(), data)?, make(a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    /// Multiply batch entry `i` (leading axis) by the constant `scales[i]`.
    pub fn scale_batch(&self, a: Var, scales: Vec<T>) -> Result<Var> {
        let va = self.value(a);
        let b = va.shape().first().copied().unwrap_or(0);
        if scales.len() != b {
            return Err(Error::shape("scale_batch", va.shape(), &[scales.len()]));
        }
        let inner = va.numel() / b.max(1);
        let data = va
            .data()
            .chunks(inner.max(1))
            .zip(&scales)
            .flat_map(|(chunk, &s)| chunk.iter().map(move |&x| x * s))
            .collect();
        Ok(self.push(Tensor::new(va.shape().to_vec(), data)?, Op::ScaleBatch(a, scales)))
    }

    /// `x[b, c, ...] + bias[c]` or `x[b, c, ...] + bias[b, c]`.
    pub fn add_channel(&self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let xs = vx.shape();
        if xs.len() < 2 {
            return Err(Error::shape("add_channel", xs, vb.shape()));
        }
        let (b, c) = (xs[0], xs[1]);
        let per_batch = match vb.shape() {
            [n] if *n == c => false,
            [nb, n] if *nb == b && *n == c => true,
            other => return Err(Error::shape("add_channel", xs, other)),
        };
        let inner: usize = xs[2..].iter().product();
        let mut out = vx.data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let add = vb.data()[if per_batch { bi * c + ci } else { ci }];
                for v in &mut out[(bi * c + ci) * inner..(bi * c + ci + 1) * inner] {
                    *v += add;
                }
            }
        }
        Ok(self.push(Tensor::new(xs.to_vec(), out)?, Op::AddChannel { x, bias }))
    }

    /// Cross-correlation of `input[B,Cin,H,W]` with `kernel[Cout,Cin,k,k]`,
    /// padding `k/2` on each side.
    pub fn conv2d(&self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (vx, vk) = (self.value(input), self.value(kernel));
        let (b, cin, h, w) = dims4("conv2d", vx.shape())?;
        let (cout, kcin, k, k2) = dims4("conv2d", vk.shape())?;
        if kcin != cin || k != k2 {
            return Err(Error::shape("conv2d", vx.shape(), vk.shape()));
        }
        if k % 2 == 0 || stride == 0 {
            return Err(Error::contract(
                "conv2d",
                format!("kernel size must be odd and stride positive (k={k}, stride={stride})"),
            ));
        }
        let geo = ConvGeometry::new(h, w, k, stride, padding);
        let (hw, o, kdim) = (h * w, geo.out_h * geo.out_w, cin * k * k);
        let mut col = vec![T::zero(); kdim * o];
        let mut out = vec![T::zero(); b * cout * o];
        for bi in 0..b {
            geo.im2col(&vx.data()[bi * cin * hw..(bi + 1) * cin * hw], cin, hw, &mut col);
            T::gemm(
                cout,
                kdim,
                o,
                vk.data(),
                (kdim as isize, 1),
                &col,
                (o as isize, 1),
                T::zero(),
                &mut out[bi * cout * o..(bi + 1) * cout * o],
            );
        }
        let shape = vec![b, cout, geo.out_h, geo.out_w];
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    /// `input[B,N] · weight[M,N]ᵀ + bias[M]`.
    pub fn linear(&self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(input), self.value(weight), self.value(bias));
        let (b, n) = match *vx.shape() {
            [b, n] => (b, n),
            _ => return Err(Error::shape("linear", vx.shape(), vw.shape())),
        };
        let m = match *vw.shape() {
            [m, wn] if wn == n => m,
            _ => return Err(Error::shape("linear", vx.shape(), vw.shape())),
        };
        if vb.shape() != [m] {
            return Err(Error::shape("linear", vw.shape(), vb.shape()));
        }
        let mut out: Vec<T> = (0..b).flat_map(|_| vb.data().iter().copied()).collect();
        T::gemm(
            b,
            n,
            m,
            vx.data(),
            (n as isize, 1),
            vw.data(),
            (1, n as isize),
            T::one(),
            &mut out,
        );
        Ok(self.push(
            Tensor::new(vec![b, m], out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn leaky_relu(&self, x: Var, slope: T) -> Var {
        let out = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope))
    }

    pub fn silu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push(out, Op::Silu(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x))
    }

    /// Block mean over `factor`×`factor` windows of a `[B,C,H,W]` tensor.
    pub fn avg_pool(&self, x: Var, factor: usize) -> Result<Var> {
        let vx = self.value(x);
        let (b, c, h, w) = dims4("avg_pool", vx.shape())?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::contract(
                "avg_pool",
                format!("extents {h}x{w} not divisible by factor {factor}"),
            ));
        }
        let (oh, ow) = (h / factor, w / factor);
        let norm = T::one() / T::lit((factor * factor) as f64);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for plane in 0..b * c {
            let src = &vx.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += src[(oy * factor + dy) * w + ox * factor + dx];
                        }
                    }
                    out[plane * oh * ow + oy * ow + ox] = acc * norm;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b, c, oh, ow], out)?, Op::AvgPool(x, factor)))
    }

    /// Nearest-neighbour upsampling of a `[B,C,H,W]` tensor.
    pub fn upsample(&self, x: Var, factor: usize) -> Result<Var> {
        let vx = self.value(x);
        let (b, c, h, w) = dims4("upsample", vx.shape())?;
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for plane in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[plane * oh * ow + oy * ow + ox] =
                        vx.data()[plane * h * w + (oy / factor) * w + ox / factor];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b, c, oh, ow], out)?, Op::Upsample(x, factor)))
    }

    /// Concatenate along axis 1.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values.first().ok_or(Error::Empty("concat input"))?;
        let shape0 = first.shape();
        if shape0.len() < 2 {
            return Err(Error::contract("concat", "needs rank >= 2"));
        }
        let b = shape0[0];
        let inner: usize = shape0[2..].iter().product();
        let mut channels = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != shape0.len() || s[0] != b || s[2..] != shape0[2..] {
                return Err(Error::shape("concat", shape0, s));
            }
            channels += s[1];
        }
        let mut out = Vec::with_capacity(b * channels * inner);
        for bi in 0..b {
            for v in &values {
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[bi * c * inner..(bi + 1) * c * inner]);
            }
        }
        let mut shape = shape0.to_vec();
        shape[1] = channels;
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec())))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn sum_squares(&self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        Ok(self.sum(sq))
    }

    /// Central difference `(x[i+1] - x[i-1]) / 2` along `axis`, periodic.
    pub fn periodic_diff(&self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        if axis >= shape.len() {
            return Err(Error::contract("periodic_diff", format!("axis {axis} out of range")));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let half = T::lit(0.5);
        let mut out = vec![T::zero(); vx.numel()];
        let src = vx.data();
        for o in 0..outer {
            for i in 0..n {
                let (ip, im) = ((i + 1) % n, (i + n - 1) % n);
                for j in 0..inner {
                    out[(o * n + i) * inner + j] =
                        (src[(o * n + ip) * inner + j] - src[(o * n + im) * inner + j]) * half;
                }
            }
        }
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::PeriodicDiff { x, axis }))
    }

    /// Periodic bilinear resampling: `out[b,c,y,x] = image[b,c](y + u0, x + u1)`
    /// where `u = disp[b,:,y,x]`.
    pub fn warp(&self, image: Var, disp: Var) -> Result<Var> {
        let (vi, vd) = (self.value(image), self.value(disp));
        let (b, c, h, w) = dims4("warp", vi.shape())?;
        let (db, dc, dh, dw) = dims4("warp", vd.shape())?;
        if db != b || dc != 2 || dh != h || dw != w {
            return Err(Error::shape("warp", vi.shape(), vd.shape()));
        }
        let hw = h * w;
        let mut out = vec![T::zero(); b * c * hw];
        for bi in 0..b {
            let d = &vd.data()[bi * 2 * hw..(bi + 1) * 2 * hw];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let py = T::lit(y as f64) + d[p];
                    let px = T::lit(x as f64) + d[hw + p];
                    let (idx, wts, _, _) = bilinear_taps(h, w, py, px);
                    for ci in 0..c {
                        let plane = &vi.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        let mut acc = T::zero();
                        for k in 0..4 {
                            acc += wts[k] * plane[idx[k]];
                        }
                        out[(bi * c + ci) * hw + p] = acc;
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b, c, h, w], out)?, Op::Warp { image, disp }))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        let out = (*vx).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop(&nodes, node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    var: Var,
) -> &'a mut Vec<T> {
    grads[var.0].get_or_insert_with(|| vec![T::zero(); nodes[var.0].value.numel()])
}

fn backprop<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) -> Result<()> {
    let val = |v: Var| nodes[v.0].value.clone();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (d, &gi) in slot(grads, nodes, *a).iter_mut().zip(g) {
                *d += gi;
            }
            for (d, &gi) in slot(grads, nodes, *b).iter_mut().zip(g) {
                *d += gi;
            }
        }
        Op::Sub(a, b) => {
            for (d, &gi) in slot(grads, nodes, *a).iter_mut().zip(g) {
                *d += gi;
            }
            for (d, &gi) in slot(grads, nodes, *b).iter_mut().zip(g) {
                *d -= gi;
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            for ((d, &gi), &y) in slot(grads, nodes, *a).iter_mut().zip(g).zip(vb.data()) {
                *d += gi * y;
            }
            for ((d, &gi), &x) in slot(grads, nodes, *b).iter_mut().zip(g).zip(va.data()) {
                *d += gi * x;
            }
        }
        Op::Scale(a, c) => {
            for (d, &gi) in slot(grads, nodes, *a).iter_mut().zip(g) {
                *d += gi * *c;
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            for (d, &gi) in slot(grads, nodes, *a).iter_mut().zip(g) {
                *d += gi;
            }
        }
        Op::ScaleBatch(a, scales) => {
            let inner = g.len() / scales.len().max(1);
            let da = slot(grads, nodes, *a);
            for (bi, &s) in scales.iter().enumerate() {
                for j in bi * inner..(bi + 1) * inner {
                    da[j] += g[j] * s;
                }
            }
        }
        Op::AddChannel { x, bias } => {
            for (d, &gi) in slot(grads, nodes, *x).iter_mut().zip(g) {
                *d += gi;
            }
            let xs = node.value.shape();
            let (b, c) = (xs[0], xs[1]);
            let inner: usize = xs[2..].iter().product();
            let per_batch = val(*bias).shape().len() == 2;
            let db = slot(grads, nodes, *bias);
            for bi in 0..b {
                for ci in 0..c {
                    let s: T = g[(bi * c + ci) * inner..(bi * c + ci + 1) * inner]
                        .iter()
                        .fold(T::zero(), |acc, &v| acc + v);
                    db[if per_batch { bi * c + ci } else { ci }] += s;
                }
            }
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => {
            let (vx, vk) = (val(*input), val(*kernel));
            let (b, cin, h, w) = dims4("conv2d", vx.shape())?;
            let (cout, _, k, _) = dims4("conv2d", vk.shape())?;
            let geo = ConvGeometry::new(h, w, k, *stride, *padding);
            let (hw, o, kdim) = (h * w, geo.out_h * geo.out_w, cin * k * k);
            let mut col = vec![T::zero(); kdim * o];
            let mut dk = vec![T::zero(); cout * kdim];
            let mut dx = vec![T::zero(); b * cin * hw];
            for bi in 0..b {
                let gy = &g[bi * cout * o..(bi + 1) * cout * o];
                geo.im2col(&vx.data()[bi * cin * hw..(bi + 1) * cin * hw], cin, hw, &mut col);
                // dK += gy · colᵀ
                T::gemm(
                    cout,
                    o,
                    kdim,
                    gy,
                    (o as isize, 1),
                    &col,
                    (1, o as isize),
                    T::one(),
                    &mut dk,
                );
                // dcol = Kᵀ · gy
                T::gemm(
                    kdim,
                    cout,
                    o,
                    vk.data(),
                    (1, kdim as isize),
                    gy,
                    (o as isize, 1),
                    T::zero(),
                    &mut col,
                );
                geo.col2im(&col, cin, hw, &mut dx[bi * cin * hw..(bi + 1) * cin * hw]);
            }
            for (d, v) in slot(grads, nodes, *input).iter_mut().zip(dx) {
                *d += v;
            }
            for (d, v) in slot(grads, nodes, *kernel).iter_mut().zip(dk) {
                *d += v;
            }
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let (vx, vw) = (val(*input), val(*weight));
            let (b, n) = (vx.shape()[0], vx.shape()[1]);
            let m = vw.shape()[0];
            let mut dx = vec![T::zero(); b * n];
            T::gemm(b, m, n, g, (m as isize, 1), vw.data(), (n as isize, 1), T::zero(), &mut dx);
            let mut dw = vec![T::zero(); m * n];
            T::gemm(m, b, n, g, (1, m as isize), vx.data(), (n as isize, 1), T::zero(), &mut dw);
            for (d, v) in slot(grads, nodes, *input).iter_mut().zip(dx) {
                *d += v;
            }
            for (d, v) in slot(grads, nodes, *weight).iter_mut().zip(dw) {
                *d += v;
            }
            let db = slot(grads, nodes, *bias);
            for bi in 0..b {
                for j in 0..m {
                    db[j] += g[bi * m + j];
                }
            }
        }
        Op::LeakyRelu(x, slope) => {
            let vx = val(*x);
            for ((d, &gi), &v) in slot(grads, nodes, *x).iter_mut().zip(g).zip(vx.data()) {
                *d += if v >= T::zero() { gi } else { gi * *slope };
            }
        }
        Op::Silu(x) => {
            let vx = val(*x);
            for ((d, &gi), &v) in slot(grads, nodes, *x).iter_mut().zip(g).zip(vx.data()) {
                let s = T::one() / (T::one() + (-v).exp());
                *d += gi * s * (T::one() + v * (T::one() - s));
            }
        }
        Op::Tanh(x) => {
            for ((d, &gi), &y) in slot(grads, nodes, *x)
                .iter_mut()
                .zip(g)
                .zip(node.value.data())
            {
                *d += gi * (T::one() - y * y);
            }
        }
        Op::AvgPool(x, f) => {
            let xs = val(*x).shape().to_vec();
            let (h, w) = (xs[2], xs[3]);
            let (oh, ow) = (h / f, w / f);
            let norm = T::one() / T::lit((f * f) as f64);
            let dx = slot(grads, nodes, *x);
            for plane in 0..xs[0] * xs[1] {
                for y in 0..h {
                    for xx in 0..w {
                        dx[plane * h * w + y * w + xx] +=
                            g[plane * oh * ow + (y / f) * ow + xx / f] * norm;
                    }
                }
            }
        }
        Op::Upsample(x, f) => {
            let xs = val(*x).shape().to_vec();
            let (h, w) = (xs[2], xs[3]);
            let (oh, ow) = (h * f, w * f);
            let dx = slot(grads, nodes, *x);
            for plane in 0..xs[0] * xs[1] {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dx[plane * h * w + (oy / f) * w + ox / f] +=
                            g[plane * oh * ow + oy * ow + ox];
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let shape = node.value.shape();
            let (b, total) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            let mut offset = 0;
            for &p in parts {
                let c = val(p).shape()[1];
                let dp = slot(grads, nodes, p);
                for bi in 0..b {
                    let src = &g[(bi * total + offset) * inner..(bi * total + offset + c) * inner];
                    for (d, &s) in dp[bi * c * inner..(bi + 1) * c * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                offset += c;
            }
        }
        Op::Sum(x) => {
            let g0 = g[0];
            for d in slot(grads, nodes, *x).iter_mut() {
                *d += g0;
            }
        }
        Op::PeriodicDiff { x, axis } => {
            let shape = node.value.shape().to_vec();
            let n = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let half = T::lit(0.5);
            let dx = slot(grads, nodes, *x);
            for o in 0..outer {
                for i in 0..n {
                    let (ip, im) = ((i + 1) % n, (i + n - 1) % n);
                    for j in 0..inner {
                        let gi = g[(o * n + i) * inner + j] * half;
                        dx[(o * n + ip) * inner + j] += gi;
                        dx[(o * n + im) * inner + j] -= gi;
                    }
                }
            }
        }
        Op::Warp { image, disp } => {
            let (vi, vd) = (val(*image), val(*disp));
            let (b, c, h, w) = dims4("warp", vi.shape())?;
            let hw = h * w;
            let mut dimg = vec![T::zero(); b * c * hw];
            let mut ddisp = vec![T::zero(); b * 2 * hw];
            let one = T::one();
            for bi in 0..b {
                let d = &vd.data()[bi * 2 * hw..(bi + 1) * 2 * hw];
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        let py = T::lit(y as f64) + d[p];
                        let px = T::lit(x as f64) + d[hw + p];
                        let (idx, wts, fy, fx) = bilinear_taps(h, w, py, px);
                        let (mut gy_acc, mut gx_acc) = (T::zero(), T::zero());
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let gi = g[base + p];
                            let plane = &vi.data()[base..base + hw];
                            for k in 0..4 {
                                dimg[base + idx[k]] += wts[k] * gi;
                            }
                            let (v00, v01, v10, v11) =
                                (plane[idx[0]], plane[idx[1]], plane[idx[2]], plane[idx[3]]);
                            gy_acc += gi * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                            gx_acc += gi * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                        }
                        ddisp[bi * 2 * hw + p] += gy_acc;
                        ddisp[bi * 2 * hw + hw + p] += gx_acc;
                    }
                }
            }
            for (dst, v) in slot(grads, nodes, *image).iter_mut().zip(dimg) {
                *dst += v;
            }
            for (dst, v) in slot(grads, nodes, *disp).iter_mut().zip(ddisp) {
                *dst += v;
            }
        }
    }
    Ok(())
}
