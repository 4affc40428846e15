//! Full-reference (PSNR, MSE, SSIM) and no-reference (UCIQE, UIQM) quality metrics.
//!
//! All metrics take RGB tensors in `[0, 1]` and compute in f64. Batched
//! inputs are scored per image and averaged, except MSE/PSNR, which pool
//! every element.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{same_shape, Tensor};

pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

const UCIQE_COEFFS: [f64; 3] = [0.4680, 0.2745, 0.2576];
const UIQM_COEFFS: [f64; 3] = [0.0282, 0.2953, 3.5753];
const UICM_TRIM: f64 = 0.1;
pub const UIQM_BLOCK: usize = 8;

pub fn mse<T: Scalar>(reference: &Tensor<T>, test: &Tensor<T>) -> Result<f64> {
    same_shape("mse", reference, test)?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum();
    Ok(sum / reference.len() as f64)
}

/// Peak signal-to-noise ratio in dB for unit peak, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(reference: &Tensor<T>, test: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(reference, test)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn check_rgb<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<()> {
    let s = x.shape();
    if s.c != 3 {
        return Err(Error::Shape {
            op,
            lhs: s,
            rhs: s.with_c(3),
        });
    }
    Ok(())
}

/// Image `n` as row-major `[r, g, b]` pixels.
fn pixels<T: Scalar>(x: &Tensor<T>, n: usize) -> Vec<[f64; 3]> {
    let (r, g, b) = (x.plane(n, 0), x.plane(n, 1), x.plane(n, 2));
    (0..r.len()).map(|i| [r[i].f64(), g[i].f64(), b[i].f64()]).collect()
}

fn luma<T: Scalar>(x: &Tensor<T>, n: usize) -> Vec<f64> {
    pixels(x, n)
        .iter()
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

fn per_image<T: Scalar>(x: &Tensor<T>, f: impl Fn(usize) -> Result<f64>) -> Result<f64> {
    let n = x.shape().n;
    let mut sum = 0.0;
    for i in 0..n {
        sum += f(i)?;
    }
    Ok(sum / n as f64)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean structural similarity of the BT.601 luma planes over every position
/// where the 11x11 Gaussian window fits.
pub fn ssim<T: Scalar>(reference: &Tensor<T>, test: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", reference, test)?;
    check_rgb("ssim", reference)?;
    let s = reference.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::TooSmall {
            h: s.h,
            w: s.w,
            min_h: SSIM_WINDOW,
            min_w: SSIM_WINDOW,
        });
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    per_image(reference, |n| {
        let x = luma(reference, n);
        let y = luma(test, n);
        let (oh, ow) = (s.h - SSIM_WINDOW + 1, s.w - SSIM_WINDOW + 1);
        let mut total = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    let row = (oy + ky) * s.w + ox;
                    for kx in 0..SSIM_WINDOW {
                        let w = win[ky * SSIM_WINDOW + kx];
                        let (a, b) = (x[row + kx], y[row + kx]);
                        mx += w * a;
                        my += w * b;
                        xx += w * a * a;
                        yy += w * b * b;
                        xy += w * a * b;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        Ok(total / (oh * ow) as f64)
    })
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// CIELab under D65 for one sRGB pixel.
pub fn srgb_to_lab(p: [f64; 3]) -> [f64; 3] {
    const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];
    let [r, g, b] = p.map(srgb_to_linear);
    let xyz = [
        0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b,
        0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b,
        0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b,
    ];
    let f = |t: f64| {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D {
            t.cbrt()
        } else {
            t / (3.0 * D * D) + 4.0 / 29.0
        }
    };
    let [fx, fy, fz] = [f(xyz[0] / WHITE[0]), f(xyz[1] / WHITE[1]), f(xyz[2] / WHITE[2])];
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn hsv_saturation(p: [f64; 3]) -> f64 {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    if max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

/// Population standard deviation; exactly zero for constant input.
fn stddev(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    if v.iter().all(|&x| x == v[0]) {
        return 0.0;
    }
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// `0.4680 sigma_c + 0.2745 con_l + 0.2576 mu_s` with lightness and chroma
/// scaled to `[0, 1]` (divided by 100) and luminance contrast taken between
/// the means of the top and bottom 1% of lightness values.
pub fn uciqe<T: Scalar>(image: &Tensor<T>) -> Result<f64> {
    check_rgb("uciqe", image)?;
    per_image(image, |n| {
        let px = pixels(image, n);
        let lab: Vec<[f64; 3]> = px.iter().map(|&p| srgb_to_lab(p)).collect();
        let chroma: Vec<f64> = lab.iter().map(|l| l[1].hypot(l[2]) / 100.0).collect();
        let mut light: Vec<f64> = lab.iter().map(|l| l[0] / 100.0).collect();
        light.sort_by(f64::total_cmp);
        let k = (light.len() / 100).max(1);
        let bottom = light[..k].iter().sum::<f64>() / k as f64;
        let top = light[light.len() - k..].iter().sum::<f64>() / k as f64;
        let sat = px.iter().map(|&p| hsv_saturation(p)).sum::<f64>() / px.len() as f64;
        let [a, b, c] = UCIQE_COEFFS;
        Ok(a * stddev(&chroma) + b * (top - bottom) + c * sat)
    })
}

/// Colorfulness from alpha-trimmed opponent statistics.
fn uicm(px: &[[f64; 3]]) -> f64 {
    let stats = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let k = v.len() as f64;
        let lo = (UICM_TRIM * k).ceil() as usize;
        let hi = (UICM_TRIM * k).floor() as usize;
        let kept = &v[lo..v.len() - hi];
        let mu = kept.iter().sum::<f64>() / kept.len() as f64;
        let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / k;
        (mu, var)
    };
    let (mu_rg, var_rg) = stats(px.iter().map(|p| p[0] - p[1]).collect());
    let (mu_yb, var_yb) = stats(px.iter().map(|p| (p[0] + p[1]) / 2.0 - p[2]).collect());
    -0.0268 * mu_rg.hypot(mu_yb) + 0.1586 * (var_rg + var_yb).sqrt()
}

/// Sobel magnitude with edge-replicated borders.
fn sobel(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| plane[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = gx.hypot(gy);
        }
    }
    out
}

/// Full 8x8 blocks; trailing partial blocks are dropped.
fn blocks(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let (by, bx) = (h / UIQM_BLOCK, w / UIQM_BLOCK);
    (0..by).flat_map(move |i| (0..bx).map(move |j| (i * UIQM_BLOCK, j * UIQM_BLOCK)))
}

fn block_range(planes: &[&[f64]], w: usize, y0: usize, x0: usize) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in planes {
        for y in y0..y0 + UIQM_BLOCK {
            for &v in &p[y * w + x0..y * w + x0 + UIQM_BLOCK] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    (lo, hi)
}

fn eme(plane: &[f64], h: usize, w: usize) -> f64 {
    let n = (h / UIQM_BLOCK) * (w / UIQM_BLOCK);
    let sum: f64 = blocks(h, w)
        .map(|(y, x)| {
            let (lo, hi) = block_range(&[plane], w, y, x);
            if lo > 0.0 && hi > 0.0 {
                (hi / lo).ln()
            } else {
                0.0
            }
        })
        .sum();
    2.0 / n as f64 * sum
}

fn uism(planes: &[Vec<f64>; 3], h: usize, w: usize) -> f64 {
    const WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];
    planes
        .iter()
        .zip(WEIGHTS)
        .map(|(p, wt)| {
            let edges: Vec<f64> = sobel(p, h, w).iter().zip(p).map(|(e, v)| e * v).collect();
            wt * eme(&edges, h, w)
        })
        .sum()
}

fn uiconm(planes: &[Vec<f64>; 3], h: usize, w: usize) -> f64 {
    let n = (h / UIQM_BLOCK) * (w / UIQM_BLOCK);
    let refs = [planes[0].as_slice(), planes[1].as_slice(), planes[2].as_slice()];
    let sum: f64 = blocks(h, w)
        .map(|(y, x)| {
            let (lo, hi) = block_range(&refs, w, y, x);
            let (top, bot) = (hi - lo, hi + lo);
            if top > 0.0 && bot > 0.0 {
                (top / bot) * (top / bot).ln()
            } else {
                0.0
            }
        })
        .sum();
    -sum / n as f64
}

/// `0.0282 UICM + 0.2953 UISM + 3.5753 UIConM` on the 0..255 scale.
pub fn uiqm<T: Scalar>(image: &Tensor<T>) -> Result<f64> {
    check_rgb("uiqm", image)?;
    let s = image.shape();
    if s.h < UIQM_BLOCK || s.w < UIQM_BLOCK {
        return Err(Error::TooSmall {
            h: s.h,
            w: s.w,
            min_h: UIQM_BLOCK,
            min_w: UIQM_BLOCK,
        });
    }
    per_image(image, |n| {
        let px: Vec<[f64; 3]> = pixels(image, n).iter().map(|p| p.map(|v| v * 255.0)).collect();
        let planes = [0, 1, 2].map(|c| px.iter().map(|p| p[c]).collect::<Vec<_>>());
        let [a, b, c] = UIQM_COEFFS;
        Ok(a * uicm(&px) + b * uism(&planes, s.h, s.w) + c * uiconm(&planes, s.h, s.w))
    })
}

/// Scores for one image; full-reference fields are absent without a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageQuality {
    pub name: String,
    pub psnr: Option<f64>,
    pub mse: Option<f64>,
    pub ssim: Option<f64>,
    pub uciqe: f64,
    pub uiqm: f64,
}

impl ImageQuality {
    pub fn evaluate<T: Scalar>(
        name: impl Into<String>,
        test: &Tensor<T>,
        reference: Option<&Tensor<T>>,
    ) -> Result<Self> {
        let (psnr, mse, ssim) = match reference {
            Some(r) => {
                let m = mse(r, test)?;
                (Some(psnr_from_mse(m)), Some(m), Some(ssim(r, test)?))
            }
            None => (None, None, None),
        };
        Ok(Self {
            name: name.into(),
            psnr,
            mse,
            ssim,
            uciqe: uciqe(test)?,
            uiqm: uiqm(test)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Some(Self {
            mean,
            stddev: stddev(values),
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub params: usize,
    pub gflops: f64,
    pub runtime_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub images: Vec<ImageQuality>,
    /// Mean and standard deviation per metric, keyed by metric name.
    pub aggregate: BTreeMap<String, Stat>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub efficiency: Option<Efficiency>,
}

impl QualityReport {
    pub fn new(images: Vec<ImageQuality>) -> Self {
        let mut aggregate = BTreeMap::new();
        let columns: [(&str, fn(&ImageQuality) -> Option<f64>); 5] = [
            ("psnr", |q| q.psnr),
            ("mse", |q| q.mse),
            ("ssim", |q| q.ssim),
            ("uciqe", |q| Some(q.uciqe)),
            ("uiqm", |q| Some(q.uiqm)),
        ];
        for (name, get) in columns {
            let values: Vec<f64> = images.iter().filter_map(get).collect();
            if let Some(s) = Stat::of(&values) {
                aggregate.insert(name.to_string(), s);
            }
        }
        Self {
            images,
            aggregate,
            skipped: Vec::new(),
            efficiency: None,
        }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregate.get(metric).map(|s| s.mean)
    }
}
