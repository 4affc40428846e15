//! Synthetic underwater degradation with a Beer-Lambert attenuation and
//! veiling-light model, plus procedural clean sources.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{bilinear_resize, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthMode {
    /// One depth for the whole image.
    Constant,
    /// Depth grows linearly from `d_min` at the top row to `d_max` at the bottom.
    VerticalRamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    /// Per-channel attenuation (R, G, B) per depth unit.
    pub beta: [f64; 3],
    /// Veiling light per channel.
    pub background: [f64; 3],
    pub depth_mode: DepthMode,
    pub depth_range: [f64; 2],
    pub seed: u64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            beta: [1.0, 0.35, 0.25],
            background: [0.10, 0.60, 0.70],
            depth_mode: DepthMode::Constant,
            depth_range: [0.5, 2.5],
            seed: 0,
        }
    }
}

impl DegradeParams {
    pub fn validate(&self) -> Result<()> {
        let [r, g, b] = self.beta;
        let clear = self.beta == [0.0; 3];
        if self.beta.iter().any(|v| !v.is_finite() || *v < 0.0) || !(clear || (r > g && g >= b)) {
            return Err(Error::Config(format!(
                "beta {:?} must satisfy R > G >= B >= 0 (or be all zero)",
                self.beta
            )));
        }
        if self.background.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!(
                "background {:?} outside [0, 1]",
                self.background
            )));
        }
        let [lo, hi] = self.depth_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "depth range {:?} must satisfy 0 <= min <= max",
                self.depth_range
            )));
        }
        Ok(())
    }

    /// Depth used by [`DepthMode::Constant`]: the middle of the range.
    pub fn constant_depth(&self) -> f64 {
        (self.depth_range[0] + self.depth_range[1]) / 2.0
    }
}

fn check_image<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<()> {
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

/// `out = clean * t + background * (1 - t)` with `t = exp(-beta * depth(row))`.
fn apply<T: Scalar>(clean: &Tensor<T>, params: &DegradeParams, depth: impl Fn(usize) -> f64) -> Result<Tensor<T>> {
    params.validate()?;
    check_image("degrade", clean)?;
    let s = clean.shape();
    let mut out = clean.clone();
    for n in 0..s.n {
        for c in 0..3 {
            let bg = params.background[c];
            let plane = out.plane_mut(n, c);
            for y in 0..s.h {
                let t = (-params.beta[c] * depth(y)).exp();
                for v in &mut plane[y * s.w..(y + 1) * s.w] {
                    *v = T::of((v.f64() * t + bg * (1.0 - t)).clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(out)
}

pub fn degrade<T: Scalar>(clean: &Tensor<T>, params: &DegradeParams) -> Result<Tensor<T>> {
    let [lo, hi] = params.depth_range;
    match params.depth_mode {
        DepthMode::Constant => degrade_at_depth(clean, params, params.constant_depth()),
        DepthMode::VerticalRamp => {
            let h = clean.shape().h;
            apply(clean, params, |y| {
                if h == 1 {
                    lo
                } else {
                    lo + (hi - lo) * y as f64 / (h - 1) as f64
                }
            })
        }
    }
}

/// Degrades at one explicit depth, ignoring `depth_mode` and `depth_range`.
pub fn degrade_at_depth<T: Scalar>(clean: &Tensor<T>, params: &DegradeParams, depth: f64) -> Result<Tensor<T>> {
    if !(depth.is_finite() && depth >= 0.0) {
        return Err(Error::Config(format!("depth {depth} must be finite and >= 0")));
    }
    apply(clean, params, |_| depth)
}

/// A smooth color field with a few flat shapes and striped texture on top.
pub fn procedural_clean<T: Scalar>(size: usize, rng: &mut impl Rng) -> Tensor<T> {
    let grid = Tensor::<f64>::random_uniform(Shape::new(1, 3, 4, 4), 0.05, 0.95, rng);
    let mut img = bilinear_resize(&grid, size, size).expect("nonzero size");
    let s = size as f64;
    for _ in 0..rng.random_range(3..=6) {
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let r = rng.random_range(0.08..0.25) * s;
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= r * r
                } else {
                    dy.abs() <= r && dx.abs() <= r * 0.6
                };
                if inside {
                    for (c, v) in color.iter().enumerate() {
                        let i = img.index(0, c, y, x);
                        img.data_mut()[i] = *v;
                    }
                }
            }
        }
    }
    let freq = rng.random_range(0.15..0.6);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let amp = rng.random_range(0.02..0.08);
    let (ca, sa) = (angle.cos(), angle.sin());
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let stripe = amp * ((x as f64 * ca + y as f64 * sa) * freq).sin();
                let noise = rng.random_range(-0.02..0.02);
                let i = img.index(0, c, y, x);
                let v = &mut img.data_mut()[i];
                *v = (*v + stripe + noise).clamp(0.0, 1.0);
            }
        }
    }
    img.cast()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair<T = f32> {
    pub clean: Tensor<T>,
    pub degraded: Tensor<T>,
    /// Depth drawn for this pair (constant mode) or `None` for a ramp.
    pub depth: Option<f64>,
}

/// RNG for item `index`; independent of generation order.
pub fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `count` procedural clean images of `size x size` and their degraded copies.
/// In constant mode each pair draws its own depth uniformly from the range.
pub fn make_pairs<T: Scalar>(
    count: usize,
    size: usize,
    params: &DegradeParams,
    seed: u64,
) -> Result<Vec<ImagePair<T>>> {
    params.validate()?;
    if count == 0 {
        return Err(Error::Config("pair count must be >= 1".into()));
    }
    if size < 32 {
        return Err(Error::Config(format!("image size {size} must be >= 32")));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(seed, i);
            let clean = procedural_clean::<f64>(size, &mut rng);
            let (degraded, depth) = match params.depth_mode {
                DepthMode::Constant => {
                    let [lo, hi] = params.depth_range;
                    let d = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                    (degrade_at_depth(&clean, params, d)?, Some(d))
                }
                DepthMode::VerticalRamp => (degrade(&clean, params)?, None),
            };
            Ok(ImagePair {
                clean: clean.cast(),
                degraded: degraded.cast(),
                depth,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{psnr, PSNR_CAP};

    fn image(seed: u64) -> Tensor<f64> {
        procedural_clean(32, &mut item_rng(seed, 0))
    }

    #[test]
    fn zero_depth_is_identity() {
        let x = image(1);
        assert_eq!(degrade_at_depth(&x, &DegradeParams::default(), 0.0).unwrap(), x);
    }

    #[test]
    fn deep_water_is_background() {
        // Blue keeps exp(-0.25 * 50) ~ 3.7e-6 of its signal at depth 50, so the
        // 1e-8 asymptote is only reached around depth 100.
        let p = DegradeParams::default();
        let x = image(2);
        let mid = degrade_at_depth(&x, &p, 50.0).unwrap();
        let deep = degrade_at_depth(&x, &p, 100.0).unwrap();
        for c in 0..3 {
            let t = (-p.beta[c] * 50.0).exp();
            for ((src, m), d) in x.plane(0, c).iter().zip(mid.plane(0, c)).zip(deep.plane(0, c)) {
                assert!((m - p.background[c]).abs() <= (src - p.background[c]).abs() * t + 1e-15);
                assert!((d - p.background[c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn white_at_unit_depth() {
        let white = Tensor::<f64>::full(Shape::new(1, 3, 2, 2), 1.0);
        let out = degrade_at_depth(&white, &DegradeParams::default(), 1.0).unwrap();
        let want = [
            0.1 + 0.9 * (-1.0f64).exp(),
            0.6 + 0.4 * (-0.35f64).exp(),
            0.7 + 0.3 * (-0.25f64).exp(),
        ];
        for c in 0..3 {
            assert!((out.at(0, c, 0, 0) - want[c]).abs() < 1e-12);
        }
        assert!((out.at(0, 0, 0, 0) - 0.4311).abs() < 1e-4);
        assert!((out.at(0, 1, 0, 0) - 0.8819).abs() < 1e-4);
        assert!((out.at(0, 2, 0, 0) - 0.9336).abs() < 1e-4);
    }

    #[test]
    fn red_keeps_least_signal() {
        let white = Tensor::<f64>::full(Shape::new(1, 3, 1, 1), 1.0);
        let p = DegradeParams::default();
        for d in [0.1, 0.5, 1.0, 3.0] {
            let out = degrade_at_depth(&white, &p, d).unwrap();
            let retained: Vec<f64> = (0..3)
                .map(|c| (out.at(0, c, 0, 0) - p.background[c]) / (1.0 - p.background[c]))
                .collect();
            assert!(retained[0] < retained[1] && retained[1] <= retained[2], "{retained:?}");
        }
    }

    #[test]
    fn ramp_goes_top_to_bottom() {
        let p = DegradeParams {
            depth_mode: DepthMode::VerticalRamp,
            ..Default::default()
        };
        let white = Tensor::<f64>::full(Shape::new(1, 3, 5, 1), 1.0);
        let out = degrade(&white, &p).unwrap();
        let top = degrade_at_depth(&white, &p, 0.5).unwrap();
        let bottom = degrade_at_depth(&white, &p, 2.5).unwrap();
        assert_eq!(out.at(0, 0, 0, 0), top.at(0, 0, 0, 0));
        assert_eq!(out.at(0, 0, 4, 0), bottom.at(0, 0, 0, 0));
    }

    #[test]
    fn invalid_params() {
        let bad = [
            DegradeParams {
                beta: [0.2, 0.35, 0.25],
                ..Default::default()
            },
            DegradeParams {
                beta: [1.0, 0.2, 0.25],
                ..Default::default()
            },
            DegradeParams {
                background: [0.1, 1.2, 0.7],
                ..Default::default()
            },
            DegradeParams {
                depth_range: [2.0, 1.0],
                ..Default::default()
            },
            DegradeParams {
                depth_range: [-1.0, 1.0],
                ..Default::default()
            },
        ];
        for p in bad {
            assert!(matches!(degrade(&image(3), &p), Err(Error::Config(_))), "{p:?}");
        }
        assert!(make_pairs::<f32>(0, 64, &DegradeParams::default(), 1).is_err());
        assert!(make_pairs::<f32>(2, 16, &DegradeParams::default(), 1).is_err());
    }

    #[test]
    fn pairs_deterministic_and_degraded() {
        let p = DegradeParams::default();
        let a = make_pairs::<f32>(6, 32, &p, 9).unwrap();
        let b = make_pairs::<f32>(6, 32, &p, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_pairs::<f32>(6, 32, &p, 10).unwrap());
        for pair in &a {
            assert!(psnr(&pair.clean, &pair.degraded).unwrap() < PSNR_CAP);
            let d = pair.depth.unwrap();
            assert!((0.5..=2.5).contains(&d));
            assert!(pair.clean.min_value() >= 0.0 && pair.clean.max_value() <= 1.0);
        }
        // Streams are per index, so a shorter run is a prefix.
        assert_eq!(make_pairs::<f32>(3, 32, &p, 9).unwrap(), a[..3]);
    }

    #[test]
    fn clear_water_pairs_identical() {
        let p = DegradeParams {
            beta: [0.0; 3],
            ..Default::default()
        };
        for pair in make_pairs::<f64>(4, 32, &p, 5).unwrap() {
            assert_eq!(pair.clean, pair.degraded);
        }
    }

    proptest::proptest! {
        #[test]
        fn monotone_in_depth(seed in 0u64..100, d1 in 0.0f64..5.0, extra in 0.0f64..5.0) {
            let x = image(seed);
            let p = DegradeParams::default();
            let a = degrade_at_depth(&x, &p, d1).unwrap();
            let b = degrade_at_depth(&x, &p, d1 + extra).unwrap();
            for c in 0..3 {
                let bg = p.background[c];
                for ((src, va), vb) in x.plane(0, c).iter().zip(a.plane(0, c)).zip(b.plane(0, c)) {
                    proptest::prop_assert!((vb - bg).abs() <= (va - bg).abs() + 1e-12);
                    proptest::prop_assert!((va - bg).abs() <= (src - bg).abs() + 1e-12);
                }
            }
        }
    }
}
