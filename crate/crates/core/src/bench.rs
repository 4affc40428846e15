//! Wall-clock throughput of the forward pass on a fixed random input.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fanet::{count_flops, FlopBreakdown, NetworkWeights};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const MIN_ITERS: usize = 10;
pub const MIN_WARMUP: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub iters: usize,
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            height: 1080,
            width: 1920,
            warmup: MIN_WARMUP,
            iters: MIN_ITERS,
            threads: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters < MIN_ITERS {
            return Err(Error::Config(format!(
                "need at least {MIN_ITERS} timed iterations, got {}",
                self.iters
            )));
        }
        if self.warmup < MIN_WARMUP {
            return Err(Error::Config(format!(
                "need at least {MIN_WARMUP} warmup iterations, got {}",
                self.warmup
            )));
        }
        if self.height == 0 || self.width == 0 || self.threads == 0 {
            return Err(Error::Config("height, width and threads must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub iters: usize,
    pub threads: usize,
    pub min_s: f64,
    pub median_s: f64,
    pub mean_s: f64,
    pub fps: f64,
    pub gflops: f64,
    pub flops: FlopBreakdown,
    pub params: usize,
}

pub fn run_bench<T: Scalar>(weights: &NetworkWeights<T>, cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let input = Tensor::<T>::random_uniform(
        Shape::new(1, 3, cfg.height, cfg.width),
        0.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    let mut times = pool.install(|| -> Result<Vec<f64>> {
        for _ in 0..cfg.warmup {
            weights.forward(&input)?;
        }
        (0..cfg.iters)
            .map(|_| {
                let start = Instant::now();
                weights.forward(&input)?;
                Ok(start.elapsed().as_secs_f64())
            })
            .collect()
    })?;
    times.sort_by(f64::total_cmp);
    let median = if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        (times[times.len() / 2 - 1] + times[times.len() / 2]) / 2.0
    };
    let flops = count_flops(weights, cfg.height, cfg.width);
    Ok(BenchReport {
        height: cfg.height,
        width: cfg.width,
        warmup: cfg.warmup,
        iters: cfg.iters,
        threads: cfg.threads,
        min_s: times[0],
        median_s: median,
        mean_s: times.iter().sum::<f64>() / times.len() as f64,
        fps: 1.0 / median,
        gflops: flops.total() / 1e9,
        flops,
        params: weights.param_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fanet::{count_gflops, NetworkConfig};

    #[test]
    fn small_run_reports_consistent_numbers() {
        let net = NetworkWeights::<f32>::init(NetworkConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cfg = BenchConfig {
            height: 24,
            width: 40,
            ..Default::default()
        };
        let r = run_bench(&net, &cfg).unwrap();
        assert_eq!(r.iters, 10);
        assert!(r.fps > 0.0 && r.min_s <= r.median_s);
        assert_eq!(r.gflops, count_gflops(&net, 24, 40));
        assert_eq!(r.params, net.param_count());
    }

    #[test]
    fn too_few_iterations() {
        let net = NetworkWeights::<f32>::init(NetworkConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for cfg in [
            BenchConfig {
                iters: 9,
                ..Default::default()
            },
            BenchConfig {
                warmup: 2,
                ..Default::default()
            },
        ] {
            assert!(matches!(run_bench(&net, &cfg), Err(Error::Config(_))));
        }
    }
}
