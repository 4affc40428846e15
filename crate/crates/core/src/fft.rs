//! Real 2-D Fourier transforms over tensor planes.
//!
//! Lengths that are powers of two use an iterative radix-2 kernel; every other
//! length goes through Bluestein's chirp-z algorithm on a power-of-two
//! convolution. The forward transform is unnormalized and the inverse carries
//! the `1 / (h * w)` factor, so `irfft2(rfft2(x)) == x`.

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Forward plan for one transform length.
#[derive(Clone, Debug)]
pub struct FftPlan<T> {
    len: usize,
    kind: PlanKind<T>,
}

#[derive(Clone, Debug)]
enum PlanKind<T> {
    Trivial,
    Radix2(Radix2<T>),
    Bluestein(Box<Bluestein<T>>),
}

#[derive(Clone, Debug)]
struct Radix2<T> {
    /// `exp(-2 pi i k / len)` for `k < len / 2`.
    twiddles: Vec<Complex<T>>,
    bitrev: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Bluestein<T> {
    inner: Radix2<T>,
    /// `exp(-i pi n^2 / len)` for `n < len`.
    chirp: Vec<Complex<T>>,
    /// Forward transform of the conjugate chirp, wrapped to the inner length.
    kernel: Vec<Complex<T>>,
}

fn twiddle<T: Scalar>(num: u64, den: u64) -> Complex<T> {
    // Reduce before the float conversion so large lengths keep full precision.
    let angle = -2.0 * std::f64::consts::PI * (num % den) as f64 / den as f64;
    Complex::new(T::of(angle.cos()), T::of(angle.sin()))
}

impl<T: Scalar> Radix2<T> {
    fn new(len: usize) -> Self {
        debug_assert!(len.is_power_of_two());
        let bits = len.trailing_zeros();
        let bitrev = (0..len)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        let twiddles = (0..len / 2).map(|k| twiddle(k as u64, len as u64)).collect();
        Self { twiddles, bitrev }
    }

    fn process(&self, buf: &mut [Complex<T>]) {
        let n = buf.len();
        for (i, &j) in self.bitrev.iter().enumerate() {
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut half = 1;
        while half < n {
            let stride = n / (2 * half);
            for start in (0..n).step_by(2 * half) {
                for k in 0..half {
                    let t = self.twiddles[k * stride] * buf[start + k + half];
                    let u = buf[start + k];
                    buf[start + k] = u + t;
                    buf[start + k + half] = u - t;
                }
            }
            half *= 2;
        }
    }
}

impl<T: Scalar> Bluestein<T> {
    fn new(len: usize) -> Self {
        let m = (2 * len - 1).next_power_of_two();
        let inner = Radix2::new(m);
        let two_n = 2 * len as u64;
        let chirp: Vec<Complex<T>> = (0..len as u64).map(|n| twiddle::<T>(n * n % two_n, two_n)).collect();
        let mut kernel = vec![Complex::new(T::zero(), T::zero()); m];
        kernel[0] = chirp[0].conj();
        for n in 1..len {
            kernel[n] = chirp[n].conj();
            kernel[m - n] = chirp[n].conj();
        }
        inner.process(&mut kernel);
        Self { inner, chirp, kernel }
    }

    fn process(&self, buf: &mut [Complex<T>], scratch: &mut Vec<Complex<T>>) {
        let len = buf.len();
        let m = self.kernel.len();
        scratch.clear();
        scratch.resize(m, Complex::new(T::zero(), T::zero()));
        for ((s, &x), &c) in scratch.iter_mut().zip(buf.iter()).zip(&self.chirp) {
            *s = x * c;
        }
        self.inner.process(scratch);
        for (s, &k) in scratch.iter_mut().zip(&self.kernel) {
            *s = (*s * k).conj();
        }
        // Inverse via conjugation: ifft(z) = conj(fft(conj(z))) / m.
        self.inner.process(scratch);
        let inv_m = T::one() / T::of(m as f64);
        for k in 0..len {
            buf[k] = scratch[k].conj() * self.chirp[k] * inv_m;
        }
    }
}

impl<T: Scalar> FftPlan<T> {
    pub fn new(len: usize) -> Self {
        let kind = match len {
            0 | 1 => PlanKind::Trivial,
            n if n.is_power_of_two() => PlanKind::Radix2(Radix2::new(n)),
            n => PlanKind::Bluestein(Box::new(Bluestein::new(n))),
        };
        Self { len, kind }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// In-place unnormalized forward DFT, `X_k = sum_n x_n exp(-2 pi i k n / len)`.
    pub fn forward(&self, buf: &mut [Complex<T>], scratch: &mut Vec<Complex<T>>) {
        assert_eq!(buf.len(), self.len, "buffer length does not match plan");
        match &self.kind {
            PlanKind::Trivial => {}
            PlanKind::Radix2(r) => r.process(buf),
            PlanKind::Bluestein(b) => b.process(buf, scratch),
        }
    }

    /// In-place unnormalized inverse DFT (positive exponent, no `1 / len`).
    pub fn inverse(&self, buf: &mut [Complex<T>], scratch: &mut Vec<Complex<T>>) {
        buf.iter_mut().for_each(|v| *v = v.conj());
        self.forward(buf, scratch);
        buf.iter_mut().for_each(|v| *v = v.conj());
    }
}

/// Width of the non-redundant half spectrum for a real signal of width `w`.
pub const fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Magnitude and phase planes of a real 2-D spectrum, shape `(n, c, h, w / 2 + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralPair<T = f32> {
    pub magnitude: Tensor<T>,
    pub phase: Tensor<T>,
}

/// Complex half spectrum, row-major `(n, c, h, w / 2 + 1)`.
#[derive(Clone, Debug)]
pub(crate) struct HalfSpectrum<T> {
    pub shape: Shape,
    pub data: Vec<Complex<T>>,
}

struct Plans2d<T> {
    rows: FftPlan<T>,
    cols: FftPlan<T>,
}

impl<T: Scalar> Plans2d<T> {
    fn new(h: usize, w: usize) -> Self {
        Self {
            rows: FftPlan::new(w),
            cols: FftPlan::new(h),
        }
    }
}

fn zero<T: Scalar>() -> Complex<T> {
    Complex::new(T::zero(), T::zero())
}

pub(crate) fn rfft2_complex<T: Scalar>(x: &Tensor<T>) -> HalfSpectrum<T> {
    let s = x.shape();
    let (h, w) = (s.h, s.w);
    let wf = half_width(w);
    let plans = Plans2d::<T>::new(h, w);
    let mut data = vec![zero(); s.n * s.c * h * wf];
    data.par_chunks_mut(h * wf).enumerate().for_each(|(idx, out)| {
        let plane = x.plane(idx / s.c, idx % s.c);
        let mut scratch = Vec::new();
        let mut row = vec![zero(); w];
        for y in 0..h {
            for (r, &v) in row.iter_mut().zip(&plane[y * w..(y + 1) * w]) {
                *r = Complex::new(v, T::zero());
            }
            plans.rows.forward(&mut row, &mut scratch);
            out[y * wf..(y + 1) * wf].copy_from_slice(&row[..wf]);
        }
        let mut col = vec![zero(); h];
        for kw in 0..wf {
            for (y, c) in col.iter_mut().enumerate() {
                *c = out[y * wf + kw];
            }
            plans.cols.forward(&mut col, &mut scratch);
            for (y, &c) in col.iter().enumerate() {
                out[y * wf + kw] = c;
            }
        }
        // Bins that are their own conjugate mirror are exactly real for real input.
        let self_conj_rows: &[usize] = if h % 2 == 0 && h > 1 { &[0, h / 2] } else { &[0] };
        let self_conj_cols: &[usize] = if w % 2 == 0 && w > 1 { &[0, w / 2] } else { &[0] };
        for &ky in self_conj_rows {
            for &kx in self_conj_cols {
                out[ky * wf + kx].im = T::zero();
            }
        }
    });
    HalfSpectrum {
        shape: s.with_hw(h, wf),
        data,
    }
}

/// Inverse of [`rfft2_complex`]. The imaginary parts of the DC and Nyquist
/// columns are ignored after the column pass, as in a standard C2R transform.
pub(crate) fn irfft2_complex<T: Scalar>(spec: &HalfSpectrum<T>, out_w: usize) -> Tensor<T> {
    let s = spec.shape;
    let (h, wf, w) = (s.h, s.w, out_w);
    debug_assert_eq!(wf, half_width(w));
    let plans = Plans2d::<T>::new(h, w);
    let norm = T::one() / T::of((h * w) as f64);
    let mut out = Tensor::zeros(s.with_hw(h, w));
    out.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(idx, plane)| {
            let src = &spec.data[idx * h * wf..(idx + 1) * h * wf];
            let mut scratch = Vec::new();
            let mut cols = src.to_vec();
            let mut col = vec![zero(); h];
            for kw in 0..wf {
                for (y, c) in col.iter_mut().enumerate() {
                    *c = cols[y * wf + kw];
                }
                plans.cols.inverse(&mut col, &mut scratch);
                for (y, &c) in col.iter().enumerate() {
                    cols[y * wf + kw] = c;
                }
            }
            let mut row = vec![zero(); w];
            for y in 0..h {
                let half = &cols[y * wf..(y + 1) * wf];
                row[0] = Complex::new(half[0].re, T::zero());
                for kw in 1..wf {
                    if 2 * kw == w {
                        row[kw] = Complex::new(half[kw].re, T::zero());
                    } else {
                        row[kw] = half[kw];
                        row[w - kw] = half[kw].conj();
                    }
                }
                plans.rows.inverse(&mut row, &mut scratch);
                for (o, r) in plane[y * w..(y + 1) * w].iter_mut().zip(&row) {
                    *o = r.re * norm;
                }
            }
        });
    out
}

/// Scales column `kw` of a half spectrum by `edge` for the DC/Nyquist columns
/// and by `middle` for every other column.
fn weight_columns<T: Scalar>(spec: &mut HalfSpectrum<T>, w: usize, edge: T, middle: T) {
    let wf = spec.shape.w;
    for row in spec.data.chunks_mut(wf) {
        for (kw, v) in row.iter_mut().enumerate() {
            let is_edge = kw == 0 || 2 * kw == w;
            *v = *v * if is_edge { edge } else { middle };
        }
    }
}

/// Adjoint of [`rfft2_complex`] with respect to the real input, given the
/// gradient on the real and imaginary parts of each half-spectrum bin.
pub(crate) fn rfft2_adjoint<T: Scalar>(grad: HalfSpectrum<T>, w: usize) -> Tensor<T> {
    let h = grad.shape.h;
    let mut g = grad;
    let hw = T::of((h * w) as f64);
    weight_columns(&mut g, w, hw, hw * T::of(0.5));
    irfft2_complex(&g, w)
}

/// Adjoint of [`irfft2_complex`] with respect to the real and imaginary parts
/// of its half-spectrum input.
pub(crate) fn irfft2_adjoint<T: Scalar>(grad: &Tensor<T>) -> HalfSpectrum<T> {
    let s = grad.shape();
    let mut spec = rfft2_complex(grad);
    let inv = T::one() / T::of((s.h * s.w) as f64);
    weight_columns(&mut spec, s.w, inv, inv + inv);
    spec
}

pub(crate) fn to_polar<T: Scalar>(spec: &HalfSpectrum<T>) -> SpectralPair<T> {
    let mag = spec.data.iter().map(|z| z.re.hypot(z.im)).collect();
    let pha = spec.data.iter().map(|z| wrap_phase(z.im.atan2(z.re))).collect();
    SpectralPair {
        magnitude: Tensor::new(spec.shape, mag).expect("spectrum shape"),
        phase: Tensor::new(spec.shape, pha).expect("spectrum shape"),
    }
}

pub(crate) fn from_polar<T: Scalar>(pair: &SpectralPair<T>) -> HalfSpectrum<T> {
    let data = pair
        .magnitude
        .data()
        .iter()
        .zip(pair.phase.data())
        .map(|(&m, &p)| Complex::new(m * p.cos(), m * p.sin()))
        .collect();
    HalfSpectrum {
        shape: pair.magnitude.shape(),
        data,
    }
}

/// Maps `-pi` onto `pi` so phases lie in `(-pi, pi]`.
#[inline]
fn wrap_phase<T: Scalar>(p: T) -> T {
    if p <= -T::PI() {
        T::PI()
    } else {
        p
    }
}

/// Forward real 2-D DFT of every `(n, c)` plane, as magnitude and phase.
pub fn rfft2<T: Scalar>(x: &Tensor<T>) -> SpectralPair<T> {
    to_polar(&rfft2_complex(x))
}

/// Inverse of [`rfft2`] producing an `out_h x out_w` real tensor.
pub fn irfft2<T: Scalar>(spec: &SpectralPair<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let ms = spec.magnitude.shape();
    if spec.phase.shape() != ms {
        return Err(Error::Shape {
            op: "irfft2",
            lhs: ms,
            rhs: spec.phase.shape(),
        });
    }
    if ms.h != out_h || ms.w != half_width(out_w) || out_w == 0 {
        return Err(Error::InvalidShape {
            op: "irfft2",
            detail: format!("spectrum {ms} is inconsistent with output {out_h}x{out_w}"),
        });
    }
    Ok(irfft2_complex(&from_polar(spec), out_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// O(N^2) DFT used as the independent reference.
    fn naive_dft(x: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let a = -2.0 * std::f64::consts::PI * ((k * j) % n) as f64 / n as f64;
                        v * Complex::new(a.cos(), a.sin())
                    })
                    .sum()
            })
            .collect()
    }

    /// Naive real 2-D DFT restricted to the half spectrum.
    fn naive_rfft2(plane: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
        let wf = half_width(w);
        let mut out = Vec::with_capacity(h * wf);
        for ky in 0..h {
            for kx in 0..wf {
                let mut acc = Complex::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let a = -2.0
                            * std::f64::consts::PI
                            * (((ky * y) % h) as f64 / h as f64 + ((kx * x) % w) as f64 / w as f64);
                        acc += plane[y * w + x] * Complex::new(a.cos(), a.sin());
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn plans_match_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for len in [1, 2, 3, 5, 7, 8, 12, 16, 17, 31, 45, 64, 80, 97, 100] {
            let x: Vec<Complex<f64>> = (0..len)
                .map(|_| {
                    Complex::new(
                        rand::Rng::random_range(&mut rng, -1.0..1.0),
                        rand::Rng::random_range(&mut rng, -1.0..1.0),
                    )
                })
                .collect();
            let want = naive_dft(&x);
            let mut got = x.clone();
            FftPlan::new(len).forward(&mut got, &mut Vec::new());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).norm() < 1e-11 * len as f64, "len {len}");
            }
            FftPlan::new(len).inverse(&mut got, &mut Vec::new());
            for (g, v) in got.iter().zip(&x) {
                assert!((g / len as f64 - v).norm() < 1e-12 * len as f64, "len {len}");
            }
        }
    }

    #[test]
    fn rfft2_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (h, w) in [(1, 1), (3, 5), (4, 6), (7, 8), (6, 9)] {
            let x = Tensor::<f64>::random_uniform(Shape::new(1, 2, h, w), -1.0, 1.0, &mut rng);
            let spec = rfft2_complex(&x);
            for c in 0..2 {
                let want = naive_rfft2(x.plane(0, c), h, w);
                let got = &spec.data[c * want.len()..(c + 1) * want.len()];
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_image_is_dc_only() {
        let (h, w, v) = (6, 10, 0.3);
        let x = Tensor::<f64>::full(Shape::new(1, 1, h, w), v);
        let spec = rfft2(&x);
        assert!((spec.magnitude.at(0, 0, 0, 0) - v * (h * w) as f64).abs() < 1e-12);
        assert_eq!(spec.phase.at(0, 0, 0, 0), 0.0);
        let rest: f64 = spec.magnitude.data()[1..].iter().map(|m| m.abs()).sum();
        assert!(rest < 1e-12);
    }

    #[test]
    fn cosine_concentrates_at_bin_one() {
        let (h, w) = (4, 16);
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, h, w), |_, _, _, xx| {
            (2.0 * std::f64::consts::PI * xx as f64 / w as f64).cos()
        });
        let spec = rfft2(&x);
        let wf = half_width(w);
        for ky in 0..h {
            for kx in 0..wf {
                let m = spec.magnitude.at(0, 0, ky, kx);
                let want = if ky == 0 && kx == 1 { (h * w) as f64 / 2.0 } else { 0.0 };
                assert!((m - want).abs() < 1e-11, "({ky},{kx}) = {m}");
            }
        }
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let (h, w, v) = (5, 7, 0.8);
        let shape = Shape::new(1, 1, h, half_width(w));
        let mut magnitude = Tensor::<f64>::zeros(shape);
        magnitude.data_mut()[0] = v * (h * w) as f64;
        let pair = SpectralPair {
            magnitude,
            phase: Tensor::zeros(shape),
        };
        let x = irfft2(&pair, h, w).unwrap();
        assert!(x.data().iter().all(|&p| (p - v).abs() < 1e-14));
        let zero = SpectralPair {
            magnitude: Tensor::<f64>::zeros(shape),
            phase: Tensor::zeros(shape),
        };
        assert!(irfft2(&zero, h, w).unwrap().data().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn irfft2_rejects_inconsistent_shape() {
        let shape = Shape::new(1, 1, 4, 3);
        let pair = SpectralPair {
            magnitude: Tensor::<f64>::zeros(shape),
            phase: Tensor::zeros(shape),
        };
        assert!(irfft2(&pair, 4, 8).is_err());
        assert!(irfft2(&pair, 5, 4).is_err());
        assert!(irfft2(&pair, 4, 4).is_ok());
        assert!(irfft2(&pair, 4, 5).is_ok());
    }

    #[test]
    fn phase_range_and_nonnegative_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::random_uniform(Shape::new(2, 3, 8, 6), -1.0, 1.0, &mut rng);
        let spec = rfft2(&x);
        assert!(spec.magnitude.data().iter().all(|&m| m >= 0.0));
        let pi = std::f64::consts::PI;
        assert!(spec.phase.data().iter().all(|&p| p > -pi && p <= pi));
    }

    #[test]
    fn round_trip_720p_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(720);
        let x = Tensor::<f32>::random_uniform(Shape::new(1, 1, 720, 1280), 0.0, 1.0, &mut rng);
        let y = irfft2(&rfft2(&x), 720, 1280).unwrap();
        let err = y.max_abs_diff(&x);
        assert!(err < 1e-5, "max abs error {err}");
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (h, w) in [(4, 6), (5, 7), (3, 8), (1, 5)] {
            let x = Tensor::<f64>::random_uniform(Shape::new(1, 1, h, w), -1.0, 1.0, &mut rng);
            let gshape = Shape::new(1, 1, h, half_width(w));
            let g = HalfSpectrum {
                shape: gshape,
                data: (0..gshape.numel())
                    .map(|_| {
                        Complex::new(
                            rand::Rng::random_range(&mut rng, -1.0..1.0),
                            rand::Rng::random_range(&mut rng, -1.0..1.0),
                        )
                    })
                    .collect(),
            };
            // <rfft2(x), g> in the real sense equals <x, rfft2*(g)>.
            let fx = rfft2_complex(&x);
            let lhs: f64 = fx
                .data
                .iter()
                .zip(&g.data)
                .map(|(a, b)| a.re * b.re + a.im * b.im)
                .sum();
            let rhs: f64 = x
                .data()
                .iter()
                .zip(rfft2_adjoint(g.clone(), w).data())
                .map(|(a, b)| a * b)
                .sum();
            assert!((lhs - rhs).abs() < 1e-10, "rfft2 {h}x{w}: {lhs} vs {rhs}");

            // <irfft2(g), x> equals <g, irfft2*(x)>.
            let ig = irfft2_complex(&g, w);
            let lhs: f64 = ig.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let adj = irfft2_adjoint(&x);
            let rhs: f64 = g
                .data
                .iter()
                .zip(&adj.data)
                .map(|(a, b)| a.re * b.re + a.im * b.im)
                .sum();
            assert!((lhs - rhs).abs() < 1e-10, "irfft2 {h}x{w}: {lhs} vs {rhs}");
        }
    }
}
