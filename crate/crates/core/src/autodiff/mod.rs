//! Reverse-mode differentiation over the tensor kernel set.
//!
//! Model code is written once against [`Graph`]. [`Eager`] evaluates it
//! directly; [`Tape`] evaluates the same kernels while recording enough to run
//! a backward pass.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, registered_ops, GradCheckReport};
pub use tape::{GradientSet, Tape, Var};

use crate::error::{Error, Result};
use crate::fft;
use crate::scalar::Scalar;
use crate::tensor::{self, Shape, Tensor};

/// Kernel set shared by eager evaluation and tape recording.
pub trait Graph<T: Scalar> {
    type Var: Clone;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T>;

    /// Value that never receives a gradient (inputs, targets).
    fn constant(&mut self, t: Tensor<T>) -> Self::Var;

    /// Trainable leaf identified by `id`.
    fn param(&mut self, id: usize, t: &Tensor<T>) -> Self::Var;

    fn conv2d(&mut self, x: &Self::Var, weight: &Self::Var, bias: &Self::Var) -> Result<Self::Var>;
    fn bilinear_resize(&mut self, x: &Self::Var, h: usize, w: usize) -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// Multiplies every channel of `x` by the single-channel `gate`.
    fn gate(&mut self, x: &Self::Var, gate: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, x: &Self::Var, s: T) -> Self::Var;
    fn clamp(&mut self, x: &Self::Var, lo: T, hi: T) -> Self::Var;
    fn concat_channels(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;
    fn split_channels(&mut self, x: &Self::Var, groups: usize) -> Result<Vec<Self::Var>>;
    /// Magnitude planes stacked on top of phase planes along channels.
    fn rfft2(&mut self, x: &Self::Var) -> Self::Var;
    /// Inverse of [`Graph::rfft2`]; expects the stacked magnitude/phase layout.
    fn irfft2(&mut self, spec: &Self::Var, out_h: usize, out_w: usize) -> Result<Self::Var>;
    /// Mean absolute error, shape `(1, 1, 1, 1)`.
    fn l1_loss(&mut self, pred: &Self::Var, target: &Self::Var) -> Result<Self::Var>;
    /// Sum of all elements, shape `(1, 1, 1, 1)`.
    fn sum(&mut self, x: &Self::Var) -> Self::Var;

    /// Applies a parameter-free op by name.
    fn apply(&mut self, op: &str, inputs: &[Self::Var]) -> Result<Self::Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Config(format!("`{op}` takes {n} inputs, got {}", inputs.len())));
            }
            Ok(())
        };
        match op {
            "identity" => {
                arity(1)?;
                Ok(inputs[0].clone())
            }
            "relu" => arity(1).map(|_| self.relu(&inputs[0])),
            "sigmoid" => arity(1).map(|_| self.sigmoid(&inputs[0])),
            "sum" => arity(1).map(|_| self.sum(&inputs[0])),
            "rfft2" => arity(1).map(|_| self.rfft2(&inputs[0])),
            "add" => arity(2).and_then(|_| self.add(&inputs[0], &inputs[1])),
            "sub" => arity(2).and_then(|_| self.sub(&inputs[0], &inputs[1])),
            "mul" => arity(2).and_then(|_| self.mul(&inputs[0], &inputs[1])),
            "gate" => arity(2).and_then(|_| self.gate(&inputs[0], &inputs[1])),
            "l1_loss" => arity(2).and_then(|_| self.l1_loss(&inputs[0], &inputs[1])),
            "conv2d" => arity(3).and_then(|_| self.conv2d(&inputs[0], &inputs[1], &inputs[2])),
            "concat_channels" => self.concat_channels(inputs),
            other => Err(Error::UnsupportedOp(other.to_string())),
        }
    }
}

/// A computation over a [`Graph`] taking parameters and one input.
pub trait GraphFn<T: Scalar> {
    fn run<G: Graph<T>>(&self, g: &mut G, params: &[G::Var], input: G::Var) -> Result<G::Var>;
}

/// Evaluates `f` without recording anything.
pub fn forward_eager<T: Scalar, F: GraphFn<T>>(f: &F, params: &[Tensor<T>], input: Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Eager;
    let p: Vec<_> = params.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
    let x = g.constant(input);
    f.run(&mut g, &p, x)
}

/// Evaluates `f` on a fresh tape; parameter `i` becomes leaf `i`.
pub fn forward_record<T: Scalar, F: GraphFn<T>>(
    f: &F,
    params: &[Tensor<T>],
    input: Tensor<T>,
) -> Result<(Tensor<T>, Var, Tape<T>)> {
    let mut tape = Tape::new();
    let p: Vec<_> = params.iter().enumerate().map(|(i, t)| tape.param(i, t)).collect();
    let x = tape.constant(input);
    let out = f.run(&mut tape, &p, x)?;
    Ok((tape.value(&out).clone(), out, tape))
}

/// Direct evaluation; every variable is its own value.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Scalar> Graph<T> for Eager {
    type Var = Tensor<T>;

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn param(&mut self, _id: usize, t: &Tensor<T>) -> Tensor<T> {
        t.clone()
    }

    fn conv2d(&mut self, x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::conv2d(x, weight, bias)
    }

    fn bilinear_resize(&mut self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        tensor::bilinear_resize(x, h, w)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        tensor::relu(x)
    }

    fn sigmoid(&mut self, x: &Tensor<T>) -> Tensor<T> {
        tensor::sigmoid(x)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::add(a, b)
    }

    fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::sub(a, b)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::mul(a, b)
    }

    fn gate(&mut self, x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::gate(x, gate)
    }

    fn scale(&mut self, x: &Tensor<T>, s: T) -> Tensor<T> {
        tensor::scale(x, s)
    }

    fn clamp(&mut self, x: &Tensor<T>, lo: T, hi: T) -> Tensor<T> {
        tensor::clamp(x, lo, hi)
    }

    fn concat_channels(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let refs: Vec<_> = parts.iter().collect();
        tensor::concat_channels(&refs)
    }

    fn split_channels(&mut self, x: &Tensor<T>, groups: usize) -> Result<Vec<Tensor<T>>> {
        tensor::split_channels(x, groups)
    }

    fn rfft2(&mut self, x: &Tensor<T>) -> Tensor<T> {
        rfft2_stacked(x)
    }

    fn irfft2(&mut self, spec: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        irfft2_stacked(spec, out_h, out_w)
    }

    fn l1_loss(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        l1_value(pred, target)
    }

    fn sum(&mut self, x: &Tensor<T>) -> Tensor<T> {
        Tensor::scalar(x.sum())
    }
}

pub(crate) fn rfft2_stacked<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    stack_pair(&fft::rfft2(x))
}

pub(crate) fn stack_pair<T: Scalar>(pair: &fft::SpectralPair<T>) -> Tensor<T> {
    tensor::concat_channels(&[&pair.magnitude, &pair.phase]).expect("magnitude and phase share a shape")
}

pub(crate) fn unstack_pair<T: Scalar>(spec: &Tensor<T>) -> Result<fft::SpectralPair<T>> {
    let mut halves = tensor::split_channels(spec, 2)?;
    let phase = halves.pop().expect("two halves");
    let magnitude = halves.pop().expect("two halves");
    Ok(fft::SpectralPair { magnitude, phase })
}

pub(crate) fn irfft2_stacked<T: Scalar>(spec: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    fft::irfft2(&unstack_pair(spec)?, out_h, out_w)
}

pub(crate) fn l1_value<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    tensor::same_shape("l1_loss", pred, target)?;
    let total: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs())
        .sum();
    Ok(Tensor::scalar(total / T::of(pred.len() as f64)))
}

pub(crate) fn scalar_shape() -> Shape {
    Shape::new(1, 1, 1, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Identity;

    impl<T: Scalar> GraphFn<T> for Identity {
        fn run<G: Graph<T>>(&self, _g: &mut G, _p: &[G::Var], x: G::Var) -> Result<G::Var> {
            Ok(x)
        }
    }

    struct ReluConv;

    impl<T: Scalar> GraphFn<T> for ReluConv {
        fn run<G: Graph<T>>(&self, g: &mut G, p: &[G::Var], x: G::Var) -> Result<G::Var> {
            let y = g.conv2d(&x, &p[0], &p[1])?;
            Ok(g.relu(&y))
        }
    }

    struct Unknown;

    impl<T: Scalar> GraphFn<T> for Unknown {
        fn run<G: Graph<T>>(&self, g: &mut G, _p: &[G::Var], x: G::Var) -> Result<G::Var> {
            g.apply("fused_softmax", &[x])
        }
    }

    #[test]
    fn identity_records_one_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::random_uniform(Shape::new(1, 2, 3, 4), 0.0, 1.0, &mut rng);
        let (out, _, tape) = forward_record(&Identity, &[], x.clone()).unwrap();
        assert_eq!(out, x);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn recording_is_transparent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::random_uniform(Shape::new(2, 3, 5, 5), -1.0, 1.0, &mut rng);
        let k = tensor::ConvKernel::<f64>::kaiming_uniform(4, 3, 1, &mut rng).unwrap();
        let params = [k.weight, k.bias];
        let eager = forward_eager(&ReluConv, &params, x.clone()).unwrap();
        let (recorded, _, _) = forward_record(&ReluConv, &params, x).unwrap();
        assert_eq!(eager, recorded);
    }

    #[test]
    fn unknown_op_is_named() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let err = forward_eager(&Unknown, &[], x.clone()).unwrap_err();
        assert!(matches!(&err, Error::UnsupportedOp(name) if name == "fused_softmax"));
        assert!(forward_record(&Unknown, &[], x).is_err());
    }
}
