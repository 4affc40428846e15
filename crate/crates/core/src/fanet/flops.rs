use serde::{Deserialize, Serialize};

use super::NetworkWeights;
use crate::fft::half_width;
use crate::scalar::Scalar;
use crate::tensor::ConvKernel;

/// Floating-point operations of one forward pass, split by where they happen.
///
/// Convolutions count two operations per multiply-accumulate. A length-`n`
/// complex FFT is charged `5 n log2 n`. Elementwise work (activations,
/// residual adds, resize interpolation, polar conversion) is not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    /// Convolutions evaluated at the input resolution.
    pub full_res: f64,
    /// 1x1 convolutions over the `h x (w/2 + 1)` half spectrum.
    pub spectral: f64,
    /// Convolutions inside the fixed-size pyramid branches.
    pub pyramid: f64,
    /// Forward and inverse 2-D real FFTs.
    pub fft: f64,
}

impl FlopBreakdown {
    pub fn total(&self) -> f64 {
        self.full_res + self.spectral + self.pyramid + self.fft
    }

    /// The part that is linear in pixel count.
    pub fn linear(&self) -> f64 {
        self.full_res + self.spectral
    }
}

fn conv_flops<T: Scalar>(k: &ConvKernel<T>, positions: usize) -> f64 {
    2.0 * (k.c_out() * k.c_in() * k.k() * k.k()) as f64 * positions as f64
}

fn fft_1d(n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        5.0 * n as f64 * (n as f64).log2()
    }
}

pub fn count_flops<T: Scalar>(weights: &NetworkWeights<T>, h: usize, w: usize) -> FlopBreakdown {
    let pixels = h * w;
    let wf = half_width(w);
    let bins = h * wf;
    let mut out = FlopBreakdown::default();

    let mut full: Vec<&ConvKernel<T>> = vec![
        &weights.stem,
        &weights.attention.squeeze,
        &weights.attention.excite,
        &weights.head,
    ];
    full.extend(weights.prior_mcem.kernels("").into_iter().map(|(_, k)| k));
    full.extend(weights.fine_mcem.kernels("").into_iter().map(|(_, k)| k));
    out.full_res = full.iter().map(|k| conv_flops(k, pixels)).sum();

    out.spectral = conv_flops(&weights.sdfim.mag_conv, bins) + conv_flops(&weights.sdfim.pha_conv, bins);

    out.pyramid = weights
        .pyramid
        .iter()
        .zip(&weights.config.mpm.target_sizes)
        .map(|(k, &s)| conv_flops(k, s * s))
        .sum();

    // Row transforms over h rows of length w, then column transforms over wf columns.
    let per_plane = h as f64 * fft_1d(w) + wf as f64 * fft_1d(h);
    out.fft = 2.0 * weights.channels() as f64 * per_plane;
    out
}

pub fn count_gflops<T: Scalar>(weights: &NetworkWeights<T>, h: usize, w: usize) -> f64 {
    count_flops(weights, h, w).total() / 1e9
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fanet::NetworkConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> NetworkWeights<f32> {
        NetworkWeights::init(NetworkConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn hand_count_720p() {
        let f = count_flops(&net(), 720, 1280);
        // Per pixel MACs: stem 432, mcem 2 * 128, attention 64 + 4, head 432.
        assert_eq!(f.full_res, 2.0 * 1188.0 * 921_600.0);
        assert_eq!(f.spectral, 2.0 * 512.0 * 720.0 * 641.0);
        assert_eq!(f.pyramid, 2.0 * 2304.0 * (32.0 * 32.0 + 64.0 * 64.0 + 128.0 * 128.0));
        let g = count_gflops(&net(), 720, 1280);
        assert!(g > 4.0 && g <= 10.0, "{g}");
    }

    #[test]
    fn linear_part_scales_with_pixels() {
        let n = net();
        let a = count_flops(&n, 720, 1280).linear();
        let b = count_flops(&n, 1080, 1920).linear();
        assert!((b / a - 2.25).abs() / 2.25 < 0.01);
    }

    #[test]
    fn pyramid_independent_of_resolution() {
        let n = net();
        assert_eq!(count_flops(&n, 64, 64).pyramid, count_flops(&n, 1080, 1920).pyramid);
    }
}
