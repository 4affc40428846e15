//! Central finite-difference checks for every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Tape, Var};
use crate::error::{Error, Result};
use crate::fft::half_width;
use crate::tensor::{Shape, Tensor};

const EPS: f64 = 1e-5;
/// Inputs closer than this to a kink (ReLU, clamp bounds, L1 at zero) are resampled.
const KINK_MARGIN: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub trials: usize,
    /// `max |analytic - numeric| / max(|analytic|, |numeric|)` over all leaves, by infinity norm.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest analytic gradient magnitude seen.
    pub max_grad: f64,
}

type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
type Sample = fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;

struct Case {
    name: &'static str,
    sample: Sample,
    build: Build,
}

const BASE: Shape = Shape::new(1, 2, 5, 7);

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::random_uniform(shape, lo, hi, rng)
}

/// Uniform values kept at least [`KINK_MARGIN`] away from every point in `kinks`.
fn away_from(shape: Shape, lo: f64, hi: f64, kinks: &[f64], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.numel())
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() >= KINK_MARGIN) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn conv_leaves(k: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![
        uniform(BASE, -1.0, 1.0, rng),
        uniform(Shape::new(3, 2, k, k), -1.0, 1.0, rng),
        uniform(Shape::new(1, 3, 1, 1), -1.0, 1.0, rng),
    ]
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "conv2d_1x1",
            sample: |r| conv_leaves(1, r),
            build: |t, v| t.conv2d(&v[0], &v[1], &v[2]),
        },
        Case {
            name: "conv2d_3x3",
            sample: |r| conv_leaves(3, r),
            build: |t, v| t.conv2d(&v[0], &v[1], &v[2]),
        },
        Case {
            name: "bilinear_resize_down",
            sample: |r| vec![uniform(BASE, -1.0, 1.0, r)],
            build: |t, v| t.bilinear_resize(&v[0], 3, 4),
        },
        Case {
            name: "bilinear_resize_up",
            sample: |r| vec![uniform(BASE, -1.0, 1.0, r)],
            build: |t, v| t.bilinear_resize(&v[0], 9, 11),
        },
        Case {
            name: "relu",
            sample: |r| vec![away_from(BASE, -1.0, 1.0, &[0.0], r)],
            build: |t, v| Ok(t.relu(&v[0])),
        },
        Case {
            name: "sigmoid",
            sample: |r| vec![uniform(BASE, -3.0, 3.0, r)],
            build: |t, v| Ok(t.sigmoid(&v[0])),
        },
        Case {
            name: "add",
            sample: |r| vec![uniform(BASE, -1.0, 1.0, r), uniform(BASE, -1.0, 1.0, r)],
            build: |t, v| t.add(&v[0], &v[1]),
        },
        Case {
            name: "sub",
            sample: |r| vec![uniform(BASE, -1.0, 1.0, r), uniform(BASE, -1.0, 1.0, r)],
            build: |t, v| t.sub(&v[0], &v[1]),
        },
        Case {
            name: "mul",
            sample: |r| vec![uniform(BASE, -1.0, 1.0, r), uniform(BASE, -1.0, 1.0, r)],
            build: |t, v| t.mul(&v[0], &v[1]),
        },
        Case {
            name: "gate",
            sample: |r| vec![uniform(BASE, -1.0, 1.0, r), uniform(BASE.with_c(1), 0.0, 1.0, r)],
            build: |t, v| t.gate(&v[0], &v[1]),
        },
        Case {
            name: "scale",
            sample: |r| vec![uniform(BASE, -1.0, 1.0, r)],
            build: |t, v| Ok(t.scale(&v[0], 0.37)),
        },
        Case {
            name: "clamp",
            sample: |r| vec![away_from(BASE, -0.5, 1.5, &[0.0, 1.0], r)],
            build: |t, v| Ok(t.clamp(&v[0], 0.0, 1.0)),
        },
        Case {
            name: "concat_channels",
            sample: |r| vec![uniform(BASE, -1.0, 1.0, r), uniform(BASE.with_c(1), -1.0, 1.0, r)],
            build: |t, v| t.concat_channels(&[v[0], v[1]]),
        },
        Case {
            name: "split_channels",
            sample: |r| vec![uniform(BASE.with_c(4), -1.0, 1.0, r)],
            build: |t, v| {
                let parts = t.split_channels(&v[0], 2)?;
                t.concat_channels(&[parts[1], parts[0]])
            },
        },
        Case {
            name: "rfft2",
            sample: |r| vec![uniform(BASE, -1.0, 1.0, r)],
            build: |t, v| Ok(t.rfft2(&v[0])),
        },
        Case {
            name: "irfft2",
            sample: |r| {
                let shape = Shape::new(1, 2, BASE.h, half_width(BASE.w));
                let mag = uniform(shape, 0.5, 1.5, r);
                let pha = uniform(shape, -3.0, 3.0, r);
                vec![crate::tensor::concat_channels(&[&mag, &pha]).expect("shape")]
            },
            build: |t, v| t.irfft2(&v[0], BASE.h, BASE.w),
        },
        Case {
            name: "rfft2_irfft2_roundtrip",
            sample: |r| vec![uniform(BASE, -1.0, 1.0, r)],
            // Composite whose Jacobian is the identity, so the probe comes back unchanged.
            build: |t, v| {
                let spec = t.rfft2(&v[0]);
                t.irfft2(&spec, BASE.h, BASE.w)
            },
        },
        Case {
            name: "l1_loss",
            sample: |r| {
                let target = uniform(BASE, -1.0, 1.0, r);
                let offset = away_from(BASE, -1.0, 1.0, &[0.0], r);
                let pred = crate::tensor::add(&target, &offset).expect("shape");
                vec![pred, target]
            },
            build: |t, v| t.l1_loss(&v[0], &v[1]),
        },
        Case {
            name: "sum",
            sample: |r| vec![uniform(BASE, -1.0, 1.0, r)],
            build: |t, v| Ok(t.sum(&v[0])),
        },
    ]
}

/// Names accepted by [`grad_check`].
pub fn registered_ops() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// `sum(probe * op(leaves))`, recorded on a fresh tape.
fn projected(case: &Case, leaves: &[Tensor<f64>], probe: Option<&Tensor<f64>>) -> Result<(Tape<f64>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<_> = leaves.iter().enumerate().map(|(i, t)| tape.param(i, t)).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = match probe {
        Some(p) => {
            let p = tape.constant(p.clone());
            let prod = tape.mul(&out, &p)?;
            tape.sum(&prod)
        }
        None => tape.sum(&out),
    };
    Ok((tape, loss))
}

fn loss_value(case: &Case, leaves: &[Tensor<f64>], probe: Option<&Tensor<f64>>) -> Result<f64> {
    let (tape, loss) = projected(case, leaves, probe)?;
    Ok(tape.value(&loss).data()[0])
}

/// Compares analytic gradients of `op` with central finite differences
/// (64-bit, step 1e-5) over `trials` random instances.
pub fn grad_check(op: &str, trials: usize) -> Result<GradCheckReport> {
    let all = cases();
    let case = all
        .iter()
        .find(|c| c.name == op)
        .ok_or_else(|| Error::UnsupportedOp(op.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut report = GradCheckReport {
        op: op.to_string(),
        trials,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        max_grad: 0.0,
    };
    for _ in 0..trials {
        let leaves = (case.sample)(&mut rng);
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<_> = leaves.iter().enumerate().map(|(i, t)| tape.param(i, t)).collect();
            let out = (case.build)(&mut tape, &vars)?;
            let shape = tape.value(&out).shape();
            (shape.numel() > 1).then(|| uniform(shape, -1.0, 1.0, &mut rng))
        };
        let (mut tape, loss) = projected(case, &leaves, probe.as_ref())?;
        let grads = tape.backward_scalar(loss)?;

        let mut diff_max: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (i, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(i).expect("every leaf is registered");
            let mut bumped = leaves.clone();
            for j in 0..leaf.len() {
                let orig = leaf.data()[j];
                bumped[i].data_mut()[j] = orig + EPS;
                let up = loss_value(case, &bumped, probe.as_ref())?;
                bumped[i].data_mut()[j] = orig - EPS;
                let down = loss_value(case, &bumped, probe.as_ref())?;
                bumped[i].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * EPS);
                let a = analytic.data()[j];
                diff_max = diff_max.max((a - numeric).abs());
                scale = scale.max(a.abs()).max(numeric.abs());
                report.max_grad = report.max_grad.max(a.abs());
            }
        }
        report.max_abs_err = report.max_abs_err.max(diff_max);
        if scale > 0.0 {
            report.max_rel_err = report.max_rel_err.max(diff_max / scale);
        }
    }
    Ok(report)
}
