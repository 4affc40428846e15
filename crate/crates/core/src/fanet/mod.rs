//! The two-stage enhancement network.
//!
//! ```text
//! image -> stem(3x3) -> { MCEM || MPM } -> SDFIM -> MCEM -> pixel attention -> head(3x3)
//!   \______________________________________________________________________/ + clamp
//! ```
//!
//! Every block is written once against [`Graph`] so the same code serves
//! inference and training.

mod blocks;
mod flops;
mod format;

pub use blocks::{
    mcem_forward, mpm_forward, pixel_attention_forward, sdfim_forward, McemBlock, McemBranch, MpmConfig,
    PixelAttention, SdfimBlock,
};
pub use flops::{count_flops, count_gflops, FlopBreakdown};
pub use format::{decode_weights, encode_weights, load_weights, save_weights, FORMAT_NAME, FORMAT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_eager, Graph, GraphFn};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvKernel, Tensor};

/// Default feature width. The largest multiple of 4 that keeps the assembled
/// network inside the 8000..=9500 parameter budget.
pub const DEFAULT_CHANNELS: usize = 16;
pub const DEFAULT_ALPHA: f64 = 0.4;
pub const PARAM_BUDGET: std::ops::RangeInclusive<usize> = 8000..=9500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub channels: usize,
    pub alpha: f64,
    pub mpm: MpmConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: DEFAULT_CHANNELS,
            alpha: DEFAULT_ALPHA,
            mpm: MpmConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 || self.channels % 4 != 0 {
            return Err(Error::Config(format!(
                "channel width {} must be a positive multiple of 4",
                self.channels
            )));
        }
        blocks::check_alpha(self.alpha)?;
        self.mpm.validate()
    }
}

/// Every kernel of the network plus the fusion ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights<T = f32> {
    pub config: NetworkConfig,
    pub stem: ConvKernel<T>,
    pub prior_mcem: McemBlock<T>,
    pub pyramid: Vec<ConvKernel<T>>,
    pub sdfim: SdfimBlock<T>,
    pub fine_mcem: McemBlock<T>,
    pub attention: PixelAttention<T>,
    pub head: ConvKernel<T>,
}

/// Block-level parameter tally, in network order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCount {
    pub block: String,
    pub params: usize,
}

impl<T: Scalar> NetworkWeights<T> {
    /// Kaiming-uniform initialization everywhere except the head, which starts
    /// at zero so the untrained network is the identity.
    pub fn init(config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        Ok(Self {
            stem: ConvKernel::kaiming_uniform(c, 3, 3, rng)?,
            prior_mcem: McemBlock::init(c, rng)?,
            pyramid: config
                .mpm
                .target_sizes
                .iter()
                .map(|_| ConvKernel::kaiming_uniform(c, c, 3, rng))
                .collect::<Result<_>>()?,
            sdfim: SdfimBlock::init(c, config.alpha, rng)?,
            fine_mcem: McemBlock::init(c, rng)?,
            attention: PixelAttention::init(c, rng)?,
            head: ConvKernel::zeros(3, c, 3)?,
            config,
        })
    }

    /// [`init`](Self::init) from a ChaCha8 generator seeded with `seed`.
    pub fn seeded(config: NetworkConfig, seed: u64) -> Result<Self> {
        Self::init(
            config,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed),
        )
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn alpha(&self) -> f64 {
        self.sdfim.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        blocks::check_alpha(alpha)?;
        self.sdfim.alpha = alpha;
        self.config.alpha = alpha;
        Ok(())
    }

    /// Named kernels in serialization order.
    pub fn kernels(&self) -> Vec<(String, &ConvKernel<T>)> {
        let mut out = vec![("stem".to_string(), &self.stem)];
        out.extend(self.prior_mcem.kernels("prior_mcem"));
        for (i, k) in self.pyramid.iter().enumerate() {
            out.push((format!("mpm.{i}"), k));
        }
        out.push(("sdfim.mag".into(), &self.sdfim.mag_conv));
        out.push(("sdfim.pha".into(), &self.sdfim.pha_conv));
        out.extend(self.fine_mcem.kernels("fine_mcem"));
        out.push(("attention.squeeze".into(), &self.attention.squeeze));
        out.push(("attention.excite".into(), &self.attention.excite));
        out.push(("head".into(), &self.head));
        out
    }

    fn kernels_mut(&mut self) -> Vec<&mut ConvKernel<T>> {
        let mut out = vec![&mut self.stem];
        out.extend(self.prior_mcem.kernels_mut());
        out.extend(self.pyramid.iter_mut());
        out.push(&mut self.sdfim.mag_conv);
        out.push(&mut self.sdfim.pha_conv);
        out.extend(self.fine_mcem.kernels_mut());
        out.push(&mut self.attention.squeeze);
        out.push(&mut self.attention.excite);
        out.push(&mut self.head);
        out
    }

    /// Trainable tensors as `(name, tensor)`, weight before bias for each kernel.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.kernels()
            .into_iter()
            .flat_map(|(name, k)| [(format!("{name}.weight"), &k.weight), (format!("{name}.bias"), &k.bias)])
            .collect()
    }

    pub fn param_tensors(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.kernels_mut()
            .into_iter()
            .flat_map(|k| [&mut k.weight, &mut k.bias])
            .collect()
    }

    /// Replaces every trainable tensor; shapes must match the current layout.
    pub fn set_params(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::Param(format!(
                "expected {} tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.iter().zip(&values) {
            if slot.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "set_params",
                    lhs: slot.shape(),
                    rhs: v.shape(),
                });
            }
        }
        for (slot, v) in slots.into_iter().zip(values) {
            *slot = v;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.kernels().iter().map(|(_, k)| k.param_count()).sum()
    }

    pub fn block_counts(&self) -> Vec<BlockCount> {
        let tally = |block: &str, kernels: &[&ConvKernel<T>]| BlockCount {
            block: block.to_string(),
            params: kernels.iter().map(|k| k.param_count()).sum(),
        };
        vec![
            tally("stem", &[&self.stem]),
            tally(
                "prior_mcem",
                &self
                    .prior_mcem
                    .kernels("")
                    .into_iter()
                    .map(|(_, k)| k)
                    .collect::<Vec<_>>(),
            ),
            tally("mpm", &self.pyramid.iter().collect::<Vec<_>>()),
            tally("sdfim", &[&self.sdfim.mag_conv, &self.sdfim.pha_conv]),
            tally(
                "fine_mcem",
                &self
                    .fine_mcem
                    .kernels("")
                    .into_iter()
                    .map(|(_, k)| k)
                    .collect::<Vec<_>>(),
            ),
            tally("attention", &[&self.attention.squeeze, &self.attention.excite]),
            tally("head", &[&self.head]),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> NetworkWeights<U> {
        NetworkWeights {
            config: self.config.clone(),
            stem: self.stem.cast(),
            prior_mcem: self.prior_mcem.cast(),
            pyramid: self.pyramid.iter().map(ConvKernel::cast).collect(),
            sdfim: self.sdfim.cast(),
            fine_mcem: self.fine_mcem.cast(),
            attention: self.attention.cast(),
            head: self.head.cast(),
        }
    }

    /// Enhances a batch of RGB images in `[0, 1]`.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        forward_eager(self, &self.param_tensors(), image.clone())
    }
}

/// Number of parameter tensors (weight + bias) consumed by `kernels` convolutions.
const fn tensors(kernels: usize) -> usize {
    2 * kernels
}

impl<T: Scalar> GraphFn<T> for NetworkWeights<T> {
    fn run<G: Graph<T>>(&self, g: &mut G, params: &[G::Var], image: G::Var) -> Result<G::Var> {
        let s = g.value(&image).shape();
        if s.c != 3 {
            return Err(Error::Shape {
                op: "fanet_forward",
                lhs: s,
                rhs: s.with_c(3),
            });
        }
        let mut rest = params;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        let stem = take(tensors(1));
        let prior = take(tensors(McemBlock::<T>::KERNELS));
        let pyramid = take(tensors(self.pyramid.len()));
        let sdfim = take(tensors(2));
        let fine = take(tensors(McemBlock::<T>::KERNELS));
        let attention = take(tensors(2));
        let head = take(tensors(1));

        let features = g.conv2d(&image, &stem[0], &stem[1])?;
        let color = blocks::mcem_graph(g, prior, &features)?;
        let detail = blocks::mpm_graph(g, &self.config.mpm.target_sizes, pyramid, &features)?;
        let fused = blocks::sdfim_graph(g, T::of(self.sdfim.alpha), sdfim, &color, &detail)?;
        let refined = blocks::mcem_graph(g, fine, &fused)?;
        let attended = blocks::pixel_attention_graph(g, attention, &refined)?;
        let residual = g.conv2d(&attended, &head[0], &head[1])?;
        let out = g.add(&image, &residual)?;
        Ok(g.clamp(&out, T::zero(), T::one()))
    }
}

/// Runs the full network without recording.
pub fn fanet_forward<T: Scalar>(image: &Tensor<T>, weights: &NetworkWeights<T>) -> Result<Tensor<T>> {
    weights.forward(image)
}

pub fn count_params<T: Scalar>(weights: &NetworkWeights<T>) -> usize {
    weights.param_count()
}
