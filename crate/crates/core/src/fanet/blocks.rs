use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Graph};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvKernel, Tensor};

/// Square target sizes of the multi-scale pyramid branches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpmConfig {
    pub target_sizes: Vec<usize>,
}

impl Default for MpmConfig {
    fn default() -> Self {
        Self {
            target_sizes: vec![32, 64, 128],
        }
    }
}

impl MpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_sizes.is_empty() {
            return Err(Error::Config("pyramid needs at least one branch".into()));
        }
        if self.target_sizes.iter().any(|&s| s < 2) {
            return Err(Error::Config(format!(
                "pyramid sizes {:?} must be >= 2",
                self.target_sizes
            )));
        }
        if self.target_sizes.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(format!(
                "pyramid sizes {:?} must be strictly increasing",
                self.target_sizes
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

fn param_vars<T: Scalar>(kernels: &[&ConvKernel<T>]) -> Vec<Tensor<T>> {
    kernels
        .iter()
        .flat_map(|k| [k.weight.clone(), k.bias.clone()])
        .collect()
}

/// One color branch: 1x1 conv, ReLU, 1x1 conv on a quarter of the channels.
#[derive(Clone, Debug, PartialEq)]
pub struct McemBranch<T = f32> {
    pub expand: ConvKernel<T>,
    pub project: ConvKernel<T>,
}

/// Four weight-independent per-pixel color branches with a residual.
#[derive(Clone, Debug, PartialEq)]
pub struct McemBlock<T = f32> {
    pub branches: [McemBranch<T>; 4],
}

impl<T: Scalar> McemBlock<T> {
    pub const KERNELS: usize = 8;

    pub fn init(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let g = channels / 4;
        let mut branch = || -> Result<McemBranch<T>> {
            Ok(McemBranch {
                expand: ConvKernel::kaiming_uniform(g, g, 1, rng)?,
                project: ConvKernel::kaiming_uniform(g, g, 1, rng)?,
            })
        };
        Ok(Self {
            branches: [branch()?, branch()?, branch()?, branch()?],
        })
    }

    pub fn kernels(&self, prefix: &str) -> Vec<(String, &ConvKernel<T>)> {
        self.branches
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                [
                    (format!("{prefix}.branch{i}.expand"), &b.expand),
                    (format!("{prefix}.branch{i}.project"), &b.project),
                ]
            })
            .collect()
    }

    pub(crate) fn kernels_mut(&mut self) -> Vec<&mut ConvKernel<T>> {
        self.branches
            .iter_mut()
            .flat_map(|b| [&mut b.expand, &mut b.project])
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> McemBlock<U> {
        McemBlock {
            branches: self.branches.clone().map(|b| McemBranch {
                expand: b.expand.cast(),
                project: b.project.cast(),
            }),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let kernels: Vec<_> = self.kernels("").into_iter().map(|(_, k)| k).collect();
        mcem_graph(&mut Eager, &param_vars(&kernels), input)
    }
}

pub(crate) fn mcem_graph<T: Scalar, G: Graph<T>>(g: &mut G, p: &[G::Var], x: &G::Var) -> Result<G::Var> {
    let parts = g.split_channels(x, 4)?;
    let mut outs = Vec::with_capacity(4);
    for (i, part) in parts.iter().enumerate() {
        let w = &p[4 * i..4 * i + 4];
        let hidden = g.conv2d(part, &w[0], &w[1])?;
        let hidden = g.relu(&hidden);
        outs.push(g.conv2d(&hidden, &w[2], &w[3])?);
    }
    let merged = g.concat_channels(&outs)?;
    g.add(x, &merged)
}

/// Pyramid: per target size, resize down, 3x3 conv + ReLU, resize back; the
/// branch outputs are summed onto the input.
pub fn mpm_forward<T: Scalar>(input: &Tensor<T>, cfg: &MpmConfig, kernels: &[ConvKernel<T>]) -> Result<Tensor<T>> {
    cfg.validate()?;
    if kernels.len() != cfg.target_sizes.len() {
        return Err(Error::Param(format!(
            "{} pyramid kernels for {} branches",
            kernels.len(),
            cfg.target_sizes.len()
        )));
    }
    let refs: Vec<_> = kernels.iter().collect();
    mpm_graph(&mut Eager, &cfg.target_sizes, &param_vars(&refs), input)
}

pub(crate) fn mpm_graph<T: Scalar, G: Graph<T>>(
    g: &mut G,
    sizes: &[usize],
    p: &[G::Var],
    x: &G::Var,
) -> Result<G::Var> {
    let s = g.value(x).shape();
    let mut acc: Option<G::Var> = None;
    for (i, &size) in sizes.iter().enumerate() {
        let small = g.bilinear_resize(x, size, size)?;
        let conv = g.conv2d(&small, &p[2 * i], &p[2 * i + 1])?;
        let act = g.relu(&conv);
        let back = g.bilinear_resize(&act, s.h, s.w)?;
        acc = Some(match acc {
            None => back,
            Some(a) => g.add(&a, &back)?,
        });
    }
    match acc {
        Some(a) => g.add(x, &a),
        None => Ok(x.clone()),
    }
}

/// Spatial-frequency fusion: `alpha * ifft(conv(|F|), conv(arg F)) + (1 - alpha) * F`
/// with `F = x + y`.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfimBlock<T = f32> {
    pub alpha: f64,
    pub mag_conv: ConvKernel<T>,
    pub pha_conv: ConvKernel<T>,
}

impl<T: Scalar> SdfimBlock<T> {
    pub fn init(channels: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            mag_conv: ConvKernel::kaiming_uniform(channels, channels, 1, rng)?,
            pha_conv: ConvKernel::kaiming_uniform(channels, channels, 1, rng)?,
        })
    }

    /// Identity frequency path on `channels` channels.
    pub fn identity(channels: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            mag_conv: ConvKernel::identity(channels),
            pha_conv: ConvKernel::identity(channels),
        })
    }

    pub fn cast<U: Scalar>(&self) -> SdfimBlock<U> {
        SdfimBlock {
            alpha: self.alpha,
            mag_conv: self.mag_conv.cast(),
            pha_conv: self.pha_conv.cast(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        check_alpha(self.alpha)?;
        for k in [&self.mag_conv, &self.pha_conv] {
            if k.c_in() != k.c_out() || k.k() != 1 {
                return Err(Error::Param(
                    "frequency convolutions must be channel-preserving 1x1".into(),
                ));
            }
        }
        let p = param_vars(&[&self.mag_conv, &self.pha_conv]);
        sdfim_graph(&mut Eager, T::of(self.alpha), &p, x, y)
    }
}

pub(crate) fn sdfim_graph<T: Scalar, G: Graph<T>>(
    g: &mut G,
    alpha: T,
    p: &[G::Var],
    x: &G::Var,
    y: &G::Var,
) -> Result<G::Var> {
    let fused = g.add(x, y)?;
    let s = g.value(&fused).shape();
    let spec = g.rfft2(&fused);
    let halves = g.split_channels(&spec, 2)?;
    let mag = g.conv2d(&halves[0], &p[0], &p[1])?;
    let mag = g.relu(&mag);
    let pha = g.conv2d(&halves[1], &p[2], &p[3])?;
    let merged = g.concat_channels(&[mag, pha])?;
    let spatial = g.irfft2(&merged, s.h, s.w)?;
    let freq_part = g.scale(&spatial, alpha);
    let space_part = g.scale(&fused, T::one() - alpha);
    g.add(&freq_part, &space_part)
}

/// Single-channel sigmoid gate from two 1x1 convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelAttention<T = f32> {
    pub squeeze: ConvKernel<T>,
    pub excite: ConvKernel<T>,
}

impl<T: Scalar> PixelAttention<T> {
    pub fn hidden(channels: usize) -> usize {
        (channels / 4).max(1)
    }

    pub fn init(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = Self::hidden(channels);
        Ok(Self {
            squeeze: ConvKernel::kaiming_uniform(hidden, channels, 1, rng)?,
            excite: ConvKernel::kaiming_uniform(1, hidden, 1, rng)?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> PixelAttention<U> {
        PixelAttention {
            squeeze: self.squeeze.cast(),
            excite: self.excite.cast(),
        }
    }

    /// The `(n, 1, h, w)` gate map in `(0, 1)`.
    pub fn gate_map(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let g = &mut Eager;
        let p = param_vars(&[&self.squeeze, &self.excite]);
        gate_graph(g, &p, input)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let p = param_vars(&[&self.squeeze, &self.excite]);
        pixel_attention_graph(&mut Eager, &p, input)
    }
}

fn gate_graph<T: Scalar, G: Graph<T>>(g: &mut G, p: &[G::Var], x: &G::Var) -> Result<G::Var> {
    let squeezed = g.conv2d(x, &p[0], &p[1])?;
    let squeezed = g.relu(&squeezed);
    let logits = g.conv2d(&squeezed, &p[2], &p[3])?;
    Ok(g.sigmoid(&logits))
}

pub(crate) fn pixel_attention_graph<T: Scalar, G: Graph<T>>(g: &mut G, p: &[G::Var], x: &G::Var) -> Result<G::Var> {
    let gate = gate_graph(g, p, x)?;
    g.gate(x, &gate)
}

pub fn mcem_forward<T: Scalar>(input: &Tensor<T>, block: &McemBlock<T>) -> Result<Tensor<T>> {
    block.forward(input)
}

pub fn sdfim_forward<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, block: &SdfimBlock<T>) -> Result<Tensor<T>> {
    block.forward(x, y)
}

pub fn pixel_attention_forward<T: Scalar>(input: &Tensor<T>, pa: &PixelAttention<T>) -> Result<Tensor<T>> {
    pa.forward(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, Shape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Applies a 1x1 kernel to one pixel's channel vector.
    fn dense(k: &ConvKernel<f64>, v: &[f64]) -> Vec<f64> {
        (0..k.c_out())
            .map(|o| {
                k.bias.data()[o]
                    + v.iter()
                        .enumerate()
                        .map(|(i, x)| k.weight.at(o, i, 0, 0) * x)
                        .sum::<f64>()
            })
            .collect()
    }

    fn pixel(x: &Tensor<f64>, n: usize, y: usize, xx: usize) -> Vec<f64> {
        (0..x.shape().c).map(|c| x.at(n, c, y, xx)).collect()
    }

    #[test]
    fn mpm_zero_in_zero_out() {
        let mut kernels: Vec<ConvKernel<f64>> = (0..3)
            .map(|_| ConvKernel::kaiming_uniform(4, 4, 3, &mut rng(1)).unwrap())
            .collect();
        for k in &mut kernels {
            k.bias = Tensor::zeros(k.bias.shape());
        }
        let x = Tensor::<f64>::zeros(Shape::new(1, 4, 40, 24));
        let y = mpm_forward(&x, &MpmConfig::default(), &kernels).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn mpm_constant_closed_form() {
        // Center-tap-only kernels keep zero padding out of the result, so a
        // constant input maps to input + sum_i relu(W_i v + b_i) everywhere.
        let c = 4;
        let v = [0.2, -0.4, 0.7, 0.1];
        let mut r = rng(2);
        let kernels: Vec<ConvKernel<f64>> = (0..3)
            .map(|_| {
                let mut k = ConvKernel::<f64>::kaiming_uniform(c, c, 3, &mut r).unwrap();
                let wd = k.weight.clone();
                k.weight = Tensor::from_fn(
                    wd.shape(),
                    |o, i, ky, kx| if ky == 1 && kx == 1 { wd.at(o, i, 1, 1) } else { 0.0 },
                );
                k
            })
            .collect();
        let x = Tensor::from_fn(Shape::new(1, c, 50, 30), |_, ch, _, _| v[ch]);
        let y = mpm_forward(&x, &MpmConfig::default(), &kernels).unwrap();
        let mut want = v.to_vec();
        for k in &kernels {
            let center = ConvKernel::new(
                Tensor::from_fn(Shape::new(c, c, 1, 1), |o, i, _, _| k.weight.at(o, i, 1, 1)),
                k.bias.clone(),
            )
            .unwrap();
            for (w, d) in want.iter_mut().zip(dense(&center, &v)) {
                *w += d.max(0.0);
            }
        }
        for ch in 0..c {
            for &val in y.plane(0, ch) {
                assert!((val - want[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mpm_branch_shapes() {
        struct Probe(Vec<(usize, usize)>);
        impl Graph<f64> for Probe {
            type Var = Tensor<f64>;
            fn value<'a>(&'a self, v: &'a Tensor<f64>) -> &'a Tensor<f64> {
                v
            }
            fn constant(&mut self, t: Tensor<f64>) -> Tensor<f64> {
                t
            }
            fn param(&mut self, _: usize, t: &Tensor<f64>) -> Tensor<f64> {
                t.clone()
            }
            fn conv2d(&mut self, x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
                self.0.push((x.shape().h, x.shape().w));
                conv2d(x, w, b)
            }
            fn bilinear_resize(&mut self, x: &Tensor<f64>, h: usize, w: usize) -> Result<Tensor<f64>> {
                Eager.bilinear_resize(x, h, w)
            }
            fn relu(&mut self, x: &Tensor<f64>) -> Tensor<f64> {
                Eager.relu(x)
            }
            fn sigmoid(&mut self, x: &Tensor<f64>) -> Tensor<f64> {
                Eager.sigmoid(x)
            }
            fn add(&mut self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
                Eager.add(a, b)
            }
            fn sub(&mut self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
                Eager.sub(a, b)
            }
            fn mul(&mut self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
                Eager.mul(a, b)
            }
            fn gate(&mut self, x: &Tensor<f64>, g: &Tensor<f64>) -> Result<Tensor<f64>> {
                Eager.gate(x, g)
            }
            fn scale(&mut self, x: &Tensor<f64>, s: f64) -> Tensor<f64> {
                Eager.scale(x, s)
            }
            fn clamp(&mut self, x: &Tensor<f64>, lo: f64, hi: f64) -> Tensor<f64> {
                Eager.clamp(x, lo, hi)
            }
            fn concat_channels(&mut self, p: &[Tensor<f64>]) -> Result<Tensor<f64>> {
                Eager.concat_channels(p)
            }
            fn split_channels(&mut self, x: &Tensor<f64>, g: usize) -> Result<Vec<Tensor<f64>>> {
                Eager.split_channels(x, g)
            }
            fn rfft2(&mut self, x: &Tensor<f64>) -> Tensor<f64> {
                Eager.rfft2(x)
            }
            fn irfft2(&mut self, s: &Tensor<f64>, h: usize, w: usize) -> Result<Tensor<f64>> {
                Eager.irfft2(s, h, w)
            }
            fn l1_loss(&mut self, p: &Tensor<f64>, t: &Tensor<f64>) -> Result<Tensor<f64>> {
                Eager.l1_loss(p, t)
            }
            fn sum(&mut self, x: &Tensor<f64>) -> Tensor<f64> {
                Eager.sum(x)
            }
        }
        let kernels: Vec<ConvKernel<f64>> = (0..3).map(|_| ConvKernel::zeros(2, 2, 3).unwrap()).collect();
        let refs: Vec<_> = kernels.iter().collect();
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 256, 256));
        let mut probe = Probe(Vec::new());
        let y = mpm_graph(&mut probe, &[32, 64, 128], &param_vars(&refs), &x).unwrap();
        assert_eq!(probe.0, vec![(32, 32), (64, 64), (128, 128)]);
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn mcem_identity_when_projection_zero() {
        let mut block = McemBlock::<f64>::init(8, &mut rng(3)).unwrap();
        for b in &mut block.branches {
            b.project = ConvKernel::zeros(2, 2, 1).unwrap();
        }
        let x = Tensor::<f64>::random_uniform(Shape::new(2, 8, 5, 6), -1.0, 1.0, &mut rng(4));
        assert_eq!(mcem_forward(&x, &block).unwrap(), x);
    }

    #[test]
    fn mcem_matches_per_pixel_mlp() {
        let block = McemBlock::<f64>::init(8, &mut rng(5)).unwrap();
        let x = Tensor::<f64>::random_uniform(Shape::new(1, 8, 4, 4), -1.0, 1.0, &mut rng(6));
        let y = mcem_forward(&x, &block).unwrap();
        for yy in 0..4 {
            for xx in 0..4 {
                let v = pixel(&x, 0, yy, xx);
                let mut want = Vec::new();
                for (i, b) in block.branches.iter().enumerate() {
                    let hidden: Vec<f64> = dense(&b.expand, &v[2 * i..2 * i + 2])
                        .into_iter()
                        .map(|h| h.max(0.0))
                        .collect();
                    want.extend(dense(&b.project, &hidden));
                }
                for (c, w) in want.iter().enumerate() {
                    assert!((y.at(0, c, yy, xx) - (v[c] + w)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mcem_rejects_indivisible_channels() {
        let block = McemBlock::<f64>::init(8, &mut rng(5)).unwrap();
        let x = Tensor::<f64>::zeros(Shape::new(1, 6, 4, 4));
        assert!(matches!(mcem_forward(&x, &block), Err(Error::Arity { .. })));
    }

    #[test]
    fn sdfim_alpha_zero_is_exact_sum() {
        let mut block = SdfimBlock::<f64>::init(4, 0.0, &mut rng(7)).unwrap();
        block.alpha = 0.0;
        let x = Tensor::<f64>::random_uniform(Shape::new(1, 4, 9, 10), -1.0, 1.0, &mut rng(8));
        let y = Tensor::<f64>::random_uniform(Shape::new(1, 4, 9, 10), -1.0, 1.0, &mut rng(9));
        assert_eq!(
            sdfim_forward(&x, &y, &block).unwrap(),
            crate::tensor::add(&x, &y).unwrap()
        );
    }

    #[test]
    fn sdfim_identity_path_alpha_one() {
        let block = SdfimBlock::<f64>::identity(4, 1.0).unwrap();
        let x = Tensor::<f64>::random_uniform(Shape::new(1, 4, 9, 10), -1.0, 1.0, &mut rng(8));
        let y = Tensor::<f64>::random_uniform(Shape::new(1, 4, 9, 10), -1.0, 1.0, &mut rng(9));
        let out = sdfim_forward(&x, &y, &block).unwrap();
        assert!(out.max_abs_diff(&crate::tensor::add(&x, &y).unwrap()) < 1e-10);
    }

    #[test]
    fn sdfim_shape_mismatch() {
        let block = SdfimBlock::<f64>::identity(4, 0.4).unwrap();
        let x = Tensor::<f64>::zeros(Shape::new(1, 4, 9, 10));
        let y = Tensor::<f64>::zeros(Shape::new(1, 4, 9, 11));
        assert!(matches!(sdfim_forward(&x, &y, &block), Err(Error::Shape { .. })));
        assert!(SdfimBlock::<f64>::identity(4, -0.1).is_err());
    }

    #[test]
    fn attention_half_gate_with_zero_excite() {
        let mut pa = PixelAttention::<f64>::init(8, &mut rng(10)).unwrap();
        pa.excite = ConvKernel::zeros(1, 2, 1).unwrap();
        let x = Tensor::<f64>::random_uniform(Shape::new(1, 8, 4, 4), -1.0, 1.0, &mut rng(11));
        let out = pixel_attention_forward(&x, &pa).unwrap();
        assert!(out.max_abs_diff(&x.map(|v| v / 2.0)) == 0.0);
    }

    #[test]
    fn attention_matches_per_pixel_oracle() {
        let pa = PixelAttention::<f64>::init(8, &mut rng(12)).unwrap();
        let x = Tensor::<f64>::random_uniform(Shape::new(1, 8, 4, 4), -2.0, 2.0, &mut rng(13));
        let out = pixel_attention_forward(&x, &pa).unwrap();
        let gates = pa.gate_map(&x).unwrap();
        assert_eq!(gates.shape(), Shape::new(1, 1, 4, 4));
        for yy in 0..4 {
            for xx in 0..4 {
                let v = pixel(&x, 0, yy, xx);
                let hidden: Vec<f64> = dense(&pa.squeeze, &v).into_iter().map(|h| h.max(0.0)).collect();
                let logit = dense(&pa.excite, &hidden)[0];
                let gate = 1.0 / (1.0 + (-logit).exp());
                assert!(gate > 0.0 && gate < 1.0);
                for c in 0..8 {
                    assert!((out.at(0, c, yy, xx) - v[c] * gate).abs() < 1e-12);
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn mcem_commutes_with_spatial_permutation(seed in 0u64..500) {
            use rand::seq::SliceRandom;
            let mut r = rng(seed);
            let block = McemBlock::<f64>::init(8, &mut r).unwrap();
            let x = Tensor::<f64>::random_uniform(Shape::new(1, 8, 5, 6), -1.0, 1.0, &mut r);
            let mut perm: Vec<usize> = (0..30).collect();
            perm.shuffle(&mut r);
            let permute = |t: &Tensor<f64>| {
                Tensor::from_fn(t.shape(), |n, c, y, xx| {
                    let src = perm[y * 6 + xx];
                    t.at(n, c, src / 6, src % 6)
                })
            };
            let a = mcem_forward(&permute(&x), &block).unwrap();
            let b = permute(&mcem_forward(&x, &block).unwrap());
            proptest::prop_assert_eq!(a, b);
        }
    }
}
