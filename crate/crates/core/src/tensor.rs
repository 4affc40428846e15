//! Rank-4 tensor in batch, channel, height, width layout.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub const fn with_hw(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense contiguous row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.dims().contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                detail: format!("zero-sized dimension in {shape}"),
            });
        }
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape {
                op: "tensor",
                detail: format!("{} values for shape {shape}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Builds a tensor from `f(n, c, y, x)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Uniform values in `[lo, hi)`.
    pub fn random_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel()).map(|_| T::of(rng.random_range(lo..hi))).collect();
        Self { shape, data }
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape::new(1, 1, 1, 1), v)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Copy of batch item `n` as a single-item tensor.
    pub fn item(&self, n: usize) -> Tensor<T> {
        let per = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape { n: 1, ..self.shape },
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub(crate) fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn zip_with<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(x: &Tensor<T>, s: T) -> Tensor<T> {
    x.map(|v| v * s)
}

pub fn clamp<T: Scalar>(x: &Tensor<T>, lo: T, hi: T) -> Tensor<T> {
    x.map(|v| v.max(lo).min(hi))
}

/// Multiplies every channel of `x` by the single-channel map `gate`.
pub fn gate<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let (s, g) = (x.shape(), gate.shape());
    if g.c != 1 || g.n != s.n || g.h != s.h || g.w != s.w {
        return Err(Error::Shape {
            op: "gate",
            lhs: s,
            rhs: g,
        });
    }
    let mut out = x.clone();
    let p = s.plane();
    for n in 0..s.n {
        let gp = gate.plane(n, 0);
        for c in 0..s.c {
            let start = (n * s.c + c) * p;
            for (o, &gv) in out.data[start..start + p].iter_mut().zip(gp) {
                *o *= gv;
            }
        }
    }
    Ok(out)
}

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidShape {
        op: "concat_channels",
        detail: "no inputs".into(),
    })?;
    let base = first.shape();
    for p in parts {
        let s = p.shape();
        if s.n != base.n || s.h != base.h || s.w != base.w {
            return Err(Error::Shape {
                op: "concat_channels",
                lhs: base,
                rhs: s,
            });
        }
    }
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let shape = base.with_c(c);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..base.n {
        for p in parts {
            let per = p.shape().c * base.plane();
            data.extend_from_slice(&p.data[n * per..(n + 1) * per]);
        }
    }
    Ok(Tensor { shape, data })
}

pub fn split_channels<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    if groups == 0 || s.c % groups != 0 {
        return Err(Error::Arity {
            op: "split_channels",
            channels: s.c,
            groups,
        });
    }
    Ok((0..groups)
        .map(|g| channel_slice(x, g * s.c / groups, s.c / groups))
        .collect())
}

/// Channels `[start, start + count)` of `x`.
pub(crate) fn channel_slice<T: Scalar>(x: &Tensor<T>, start: usize, count: usize) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let shape = s.with_c(count);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..s.n {
        let from = (n * s.c + start) * p;
        data.extend_from_slice(&x.data[from..from + count * p]);
    }
    Tensor { shape, data }
}

/// Adds `part` into channels `[start, start + part.c)` of `dst`.
pub(crate) fn add_into_channels<T: Scalar>(dst: &mut Tensor<T>, part: &Tensor<T>, start: usize) {
    let s = dst.shape();
    let ps = part.shape();
    let p = s.plane();
    for n in 0..s.n {
        let from = n * ps.c * p;
        let to = (n * s.c + start) * p;
        for (d, &v) in dst.data[to..to + ps.c * p]
            .iter_mut()
            .zip(&part.data[from..from + ps.c * p])
        {
            *d += v;
        }
    }
}

/// Convolution weights `(c_out, c_in, k, k)` plus bias `(1, c_out, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        check_kernel(&weight, &bias)?;
        Ok(Self { weight, bias })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(Shape::new(c_out, c_in, k, k)),
            Tensor::zeros(Shape::new(1, c_out, 1, 1)),
        )
    }

    /// Kaiming-uniform weights, `U(-b, b)` with `b = sqrt(6 / fan_in)`; the bias
    /// uses `1 / sqrt(fan_in)`.
    pub fn kaiming_uniform(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        let wb = (6.0 / fan_in).sqrt();
        let bb = 1.0 / fan_in.sqrt();
        Self::new(
            Tensor::random_uniform(Shape::new(c_out, c_in, k, k), -wb, wb, rng),
            Tensor::random_uniform(Shape::new(1, c_out, 1, 1), -bb, bb, rng),
        )
    }

    /// 1x1 identity mapping on `c` channels.
    pub fn identity(c: usize) -> Self {
        let weight = Tensor::from_fn(
            Shape::new(c, c, 1, 1),
            |o, i, _, _| {
                if o == i {
                    T::one()
                } else {
                    T::zero()
                }
            },
        );
        Self {
            weight,
            bias: Tensor::zeros(Shape::new(1, c, 1, 1)),
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn k(&self) -> usize {
        self.weight.shape().h
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> ConvKernel<U> {
        ConvKernel {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(input, &self.weight, &self.bias)
    }
}

pub(crate) fn check_kernel<T: Scalar>(weight: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let ws = weight.shape();
    if ws.h != ws.w || !(ws.h == 1 || ws.h == 3) {
        return Err(Error::InvalidShape {
            op: "conv2d",
            detail: format!("kernel {ws} must be 1x1 or 3x3"),
        });
    }
    if bias.shape() != Shape::new(1, ws.n, 1, 1) {
        return Err(Error::Shape {
            op: "conv2d bias",
            lhs: ws,
            rhs: bias.shape(),
        });
    }
    Ok(())
}

/// `dst[y][x] += a * src[y + dy][x + dx]` wherever the source index is in range.
#[inline]
fn shifted_axpy<T: Scalar>(dst: &mut [T], src: &[T], h: usize, w: usize, dy: isize, dx: isize, a: T) {
    let (y_lo, y_hi) = valid_range(h, dy);
    let (x_lo, x_hi) = valid_range(w, dx);
    if x_lo >= x_hi {
        return;
    }
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + x_lo..y * w + x_hi];
        let so = sy * w + (x_lo as isize + dx) as usize;
        let s = &src[so..so + (x_hi - x_lo)];
        for (d, &s) in d.iter_mut().zip(s) {
            *d += a * s;
        }
    }
}

/// `sum_{y,x} a[y][x] * b[y + dy][x + dx]` over in-range source indices.
#[inline]
fn shifted_dot<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, dy: isize, dx: isize) -> T {
    let (y_lo, y_hi) = valid_range(h, dy);
    let (x_lo, x_hi) = valid_range(w, dx);
    let mut total = T::zero();
    if x_lo >= x_hi {
        return total;
    }
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let ar = &a[y * w + x_lo..y * w + x_hi];
        let bo = sy * w + (x_lo as isize + dx) as usize;
        let br = &b[bo..bo + (x_hi - x_lo)];
        let mut row = T::zero();
        for (&p, &q) in ar.iter().zip(br) {
            row += p * q;
        }
        total += row;
    }
    total
}

/// Destination indices `i` for which `i + d` stays inside `0..len`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo.min(len), hi)
}

/// Stride-1 "same" convolution with zero padding of `k / 2`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    check_kernel(weight, bias)?;
    let s = input.shape();
    let ws = weight.shape();
    if s.c != ws.c {
        return Err(Error::Shape {
            op: "conv2d",
            lhs: s,
            rhs: ws,
        });
    }
    let (c_out, c_in, k) = (ws.n, ws.c, ws.h);
    let pad = (k / 2) as isize;
    let (h, w) = (s.h, s.w);
    let p = s.plane();
    let out_shape = s.with_c(c_out);
    let mut out = Tensor::zeros(out_shape);
    let wd = weight.data();
    out.data.par_chunks_mut(p).enumerate().for_each(|(idx, plane)| {
        let (n, co) = (idx / c_out, idx % c_out);
        plane.fill(bias.data[co]);
        for ci in 0..c_in {
            let src = input.plane(n, ci);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((co * c_in + ci) * k + ky) * k + kx];
                    shifted_axpy(plane, src, h, w, ky as isize - pad, kx as isize - pad, wv);
                }
            }
        }
    });
    Ok(out)
}

/// Gradient of [`conv2d`] with respect to its input.
pub(crate) fn conv2d_backward_input<T: Scalar>(grad_out: &Tensor<T>, weight: &Tensor<T>) -> Tensor<T> {
    let s = grad_out.shape();
    let ws = weight.shape();
    let (c_out, c_in, k) = (ws.n, ws.c, ws.h);
    let pad = (k / 2) as isize;
    let (h, w) = (s.h, s.w);
    let mut gin = Tensor::zeros(s.with_c(c_in));
    let wd = weight.data();
    gin.data.par_chunks_mut(s.plane()).enumerate().for_each(|(idx, plane)| {
        let (n, ci) = (idx / c_in, idx % c_in);
        for co in 0..c_out {
            let g = grad_out.plane(n, co);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[((co * c_in + ci) * k + ky) * k + kx];
                    shifted_axpy(plane, g, h, w, pad - ky as isize, pad - kx as isize, wv);
                }
            }
        }
    });
    gin
}

/// Gradients of [`conv2d`] with respect to weight and bias.
pub(crate) fn conv2d_backward_params<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    k: usize,
) -> (Tensor<T>, Tensor<T>) {
    let s = input.shape();
    let c_in = s.c;
    let c_out = grad_out.shape().c;
    let pad = (k / 2) as isize;
    let (h, w) = (s.h, s.w);
    let mut gw = Tensor::zeros(Shape::new(c_out, c_in, k, k));
    gw.data.par_chunks_mut(k * k).enumerate().for_each(|(idx, taps)| {
        let (co, ci) = (idx / c_in, idx % c_in);
        for ky in 0..k {
            for kx in 0..k {
                let mut acc = T::zero();
                for n in 0..s.n {
                    acc += shifted_dot(
                        grad_out.plane(n, co),
                        input.plane(n, ci),
                        h,
                        w,
                        ky as isize - pad,
                        kx as isize - pad,
                    );
                }
                taps[ky * k + kx] = acc;
            }
        }
    });
    let mut gb = Tensor::zeros(Shape::new(1, c_out, 1, 1));
    for co in 0..c_out {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc += grad_out.plane(n, co).iter().copied().sum::<T>();
        }
        gb.data[co] = acc;
    }
    (gw, gb)
}

/// Source taps for one output coordinate under half-pixel sampling.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
}

fn resize_taps<T: Scalar>(src: usize, dst: usize) -> Vec<Tap<T>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            Tap {
                i0,
                i1,
                frac: T::of(pos - i0 as f64),
            }
        })
        .collect()
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    (a + t * (b - a)).max(a.min(b)).min(a.max(b))
}

/// Bilinear resize with half-pixel centers (align-corners off).
pub fn bilinear_resize<T: Scalar>(input: &Tensor<T>, target_h: usize, target_w: usize) -> Result<Tensor<T>> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidShape {
            op: "bilinear_resize",
            detail: format!("target size {target_h}x{target_w} must be positive"),
        });
    }
    let s = input.shape();
    if s.h == target_h && s.w == target_w {
        return Ok(input.clone());
    }
    let ty = resize_taps::<T>(s.h, target_h);
    let tx = resize_taps::<T>(s.w, target_w);
    let mut out = Tensor::zeros(s.with_hw(target_h, target_w));
    out.data
        .par_chunks_mut(target_h * target_w)
        .enumerate()
        .for_each(|(idx, plane)| {
            let src = input.plane(idx / s.c, idx % s.c);
            for (oy, ry) in ty.iter().enumerate() {
                let r0 = &src[ry.i0 * s.w..(ry.i0 + 1) * s.w];
                let r1 = &src[ry.i1 * s.w..(ry.i1 + 1) * s.w];
                let row = &mut plane[oy * target_w..(oy + 1) * target_w];
                for (o, rx) in row.iter_mut().zip(&tx) {
                    let top = lerp(r0[rx.i0], r0[rx.i1], rx.frac);
                    let bot = lerp(r1[rx.i0], r1[rx.i1], rx.frac);
                    *o = lerp(top, bot, ry.frac);
                }
            }
        });
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: scatters each output gradient back onto
/// its four source pixels with the interpolation weights.
pub(crate) fn bilinear_resize_backward<T: Scalar>(grad_out: &Tensor<T>, src_h: usize, src_w: usize) -> Tensor<T> {
    let gs = grad_out.shape();
    if gs.h == src_h && gs.w == src_w {
        return grad_out.clone();
    }
    let ty = resize_taps::<T>(src_h, gs.h);
    let tx = resize_taps::<T>(src_w, gs.w);
    let mut gin = Tensor::zeros(gs.with_hw(src_h, src_w));
    gin.data
        .par_chunks_mut(src_h * src_w)
        .enumerate()
        .for_each(|(idx, plane)| {
            let g = grad_out.plane(idx / gs.c, idx % gs.c);
            for (oy, ry) in ty.iter().enumerate() {
                let wy1 = ry.frac;
                let wy0 = T::one() - wy1;
                for (ox, rx) in tx.iter().enumerate() {
                    let v = g[oy * gs.w + ox];
                    let wx1 = rx.frac;
                    let wx0 = T::one() - wx1;
                    plane[ry.i0 * src_w + rx.i0] += v * wy0 * wx0;
                    plane[ry.i0 * src_w + rx.i1] += v * wy0 * wx1;
                    plane[ry.i1 * src_w + rx.i0] += v * wy1 * wx0;
                    plane[ry.i1 * src_w + rx.i1] += v * wy1 * wx1;
                }
            }
        });
    gin
}
