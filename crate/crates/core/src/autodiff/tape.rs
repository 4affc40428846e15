use std::collections::BTreeMap;

use num_complex::Complex;

use super::{irfft2_stacked, l1_value, scalar_shape, unstack_pair, Graph};
use crate::error::{Error, Result};
use crate::fft::{self, HalfSpectrum};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param,
    Conv2d { x: usize, weight: usize, bias: usize },
    Resize { x: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Gate { x: usize, gate: usize },
    Scale { x: usize, s: T },
    Clamp { x: usize, lo: T, hi: T },
    Concat { parts: Vec<usize> },
    SplitPart { x: usize, start: usize },
    Rfft2 { x: usize, spectrum: HalfSpectrum<T> },
    Irfft2 { spec: usize },
    L1 { pred: usize, target: usize },
    Sum { x: usize },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Append-only record of a forward pass. Nodes are stored in creation order,
/// which is a topological order because every op only refers to existing
/// nodes.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<usize, usize>,
    consumed: bool,
}

/// Gradient of the loss for every parameter registered on the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> GradientSet<T> {
    /// Gradients keyed by position, for driving an optimizer by hand.
    pub fn from_tensors(grads: Vec<Tensor<T>>) -> Self {
        Self {
            grads: grads.into_iter().enumerate().collect(),
        }
    }

    pub fn get(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn into_vec(self) -> Vec<Tensor<T>> {
        self.grads.into_values().collect()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[usize]) -> Var {
        let needs_grad = matches!(op, Op::Param) || inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: usize) -> &Tensor<T> {
        &self.nodes[v].value
    }

    /// Backpropagates from a `(1, 1, 1, 1)` loss with unit seed.
    pub fn backward_scalar(&mut self, loss: Var) -> Result<GradientSet<T>> {
        self.backward(loss, &Tensor::scalar(T::one()))
    }

    /// Backpropagates `loss_grad` from `output` to every registered parameter.
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, output: Var, loss_grad: &Tensor<T>) -> Result<GradientSet<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let out_shape = self.val(output.0).shape();
        if loss_grad.shape() != out_shape {
            return Err(Error::Shape {
                op: "backward",
                lhs: out_shape,
                rhs: loss_grad.shape(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(loss_grad.clone());
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if let Op::Param = self.nodes[id].op {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        let grads = self
            .params
            .iter()
            .map(|(&pid, &node)| {
                let g = grads[node]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[node].value.shape()));
                (pid, g)
            })
            .collect();
        Ok(GradientSet { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Conv2d { x, weight, bias } => {
                let w = self.val(*weight);
                if self.wants(*weight) || self.wants(*bias) {
                    let (gw, gb) = tensor::conv2d_backward_params(self.val(*x), g, w.shape().h);
                    self.accumulate(grads, *weight, gw);
                    self.accumulate(grads, *bias, gb);
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, tensor::conv2d_backward_input(g, w));
                }
            }
            Op::Resize { x } => {
                let s = self.val(*x).shape();
                self.accumulate(grads, *x, tensor::bilinear_resize_backward(g, s.h, s.w));
            }
            Op::Relu { x } => {
                let gx = zip(g, &node.value, |gv, y| if y > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid { x } => {
                let gx = zip(g, &node.value, |gv, y| gv * y * (T::one() - y));
                self.accumulate(grads, *x, gx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip(g, self.val(*b), |gv, bv| gv * bv));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip(g, self.val(*a), |gv, av| gv * av));
                }
            }
            Op::Gate { x, gate } => {
                let gt = self.val(*gate);
                if self.wants(*x) {
                    self.accumulate(grads, *x, tensor::gate(g, gt).expect("recorded shapes"));
                }
                if self.wants(*gate) {
                    let xv = self.val(*x);
                    let s = xv.shape();
                    let mut gg = Tensor::zeros(gt.shape());
                    for n in 0..s.n {
                        let dst = gg.plane_mut(n, 0);
                        for c in 0..s.c {
                            for ((d, &gv), &xv) in dst.iter_mut().zip(g.plane(n, c)).zip(xv.plane(n, c)) {
                                *d += gv * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *gate, gg);
                }
            }
            Op::Scale { x, s } => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let gx = zip(
                    g,
                    self.val(*x),
                    |gv, xv| if xv >= lo && xv <= hi { gv } else { T::zero() },
                );
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts } => {
                let mut start = 0;
                for &p in parts {
                    let c = self.val(p).shape().c;
                    if self.wants(p) {
                        self.accumulate(grads, p, tensor::channel_slice(g, start, c));
                    }
                    start += c;
                }
            }
            Op::SplitPart { x, start } => {
                if self.wants(*x) {
                    let slot = grads[*x].get_or_insert_with(|| Tensor::zeros(self.val(*x).shape()));
                    tensor::add_into_channels(slot, g, *start);
                }
            }
            Op::Rfft2 { x, spectrum } => {
                let c = spectrum.shape.c;
                let gm = tensor::channel_slice(g, 0, c);
                let gp = tensor::channel_slice(g, c, c);
                let data = spectrum
                    .data
                    .iter()
                    .zip(gm.data().iter().zip(gp.data()))
                    .map(|(z, (&gm, &gp))| {
                        let r = z.re.hypot(z.im);
                        if r == T::zero() {
                            return Complex::new(T::zero(), T::zero());
                        }
                        let (cos, sin) = (z.re / r, z.im / r);
                        Complex::new(gm * cos - gp * sin / r, gm * sin + gp * cos / r)
                    })
                    .collect();
                let w = self.val(*x).shape().w;
                let gx = fft::rfft2_adjoint(
                    HalfSpectrum {
                        shape: spectrum.shape,
                        data,
                    },
                    w,
                );
                self.accumulate(grads, *x, gx);
            }
            Op::Irfft2 { spec } => {
                let pair = unstack_pair(self.val(*spec)).expect("recorded shapes");
                let gz = fft::irfft2_adjoint(g);
                let mut gm = Vec::with_capacity(gz.data.len());
                let mut gp = Vec::with_capacity(gz.data.len());
                for ((z, &m), &p) in gz.data.iter().zip(pair.magnitude.data()).zip(pair.phase.data()) {
                    let (sin, cos) = p.sin_cos();
                    gm.push(z.re * cos + z.im * sin);
                    gp.push(m * (z.im * cos - z.re * sin));
                }
                let shape = pair.magnitude.shape();
                let gm = Tensor::new(shape, gm).expect("spectrum shape");
                let gp = Tensor::new(shape, gp).expect("spectrum shape");
                let stacked = tensor::concat_channels(&[&gm, &gp]).expect("spectrum shape");
                self.accumulate(grads, *spec, stacked);
            }
            Op::L1 { pred, target } => {
                let (p, t) = (self.val(*pred), self.val(*target));
                let k = g.data()[0] / T::of(p.len() as f64);
                let gp = zip(p, t, |pv, tv| {
                    let d = pv - tv;
                    if d > T::zero() {
                        k
                    } else if d < T::zero() {
                        -k
                    } else {
                        T::zero()
                    }
                });
                if self.wants(*target) {
                    self.accumulate(grads, *target, gp.map(|v| -v));
                }
                self.accumulate(grads, *pred, gp);
            }
            Op::Sum { x } => {
                let s = self.val(*x).shape();
                self.accumulate(grads, *x, Tensor::full(s, g.data()[0]));
            }
        }
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("matching shapes")
}

impl<T: Scalar> Graph<T> for Tape<T> {
    type Var = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Constant, t, &[])
    }

    fn param(&mut self, id: usize, t: &Tensor<T>) -> Var {
        if let Some(&node) = self.params.get(&id) {
            return Var(node);
        }
        let v = self.push(Op::Param, t.clone(), &[]);
        self.params.insert(id, v.0);
        v
    }

    fn conv2d(&mut self, x: &Var, weight: &Var, bias: &Var) -> Result<Var> {
        let out = tensor::conv2d(self.val(x.0), self.val(weight.0), self.val(bias.0))?;
        let op = Op::Conv2d {
            x: x.0,
            weight: weight.0,
            bias: bias.0,
        };
        Ok(self.push(op, out, &[x.0, weight.0, bias.0]))
    }

    fn bilinear_resize(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let out = tensor::bilinear_resize(self.val(x.0), h, w)?;
        Ok(self.push(Op::Resize { x: x.0 }, out, &[x.0]))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let out = tensor::relu(self.val(x.0));
        self.push(Op::Relu { x: x.0 }, out, &[x.0])
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let out = tensor::sigmoid(self.val(x.0));
        self.push(Op::Sigmoid { x: x.0 }, out, &[x.0])
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::add(self.val(a.0), self.val(b.0))?;
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, out, &[a.0, b.0]))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::sub(self.val(a.0), self.val(b.0))?;
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, out, &[a.0, b.0]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::mul(self.val(a.0), self.val(b.0))?;
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, out, &[a.0, b.0]))
    }

    fn gate(&mut self, x: &Var, gate: &Var) -> Result<Var> {
        let out = tensor::gate(self.val(x.0), self.val(gate.0))?;
        Ok(self.push(Op::Gate { x: x.0, gate: gate.0 }, out, &[x.0, gate.0]))
    }

    fn scale(&mut self, x: &Var, s: T) -> Var {
        let out = tensor::scale(self.val(x.0), s);
        self.push(Op::Scale { x: x.0, s }, out, &[x.0])
    }

    fn clamp(&mut self, x: &Var, lo: T, hi: T) -> Var {
        let out = tensor::clamp(self.val(x.0), lo, hi);
        self.push(Op::Clamp { x: x.0, lo, hi }, out, &[x.0])
    }

    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<_> = parts.iter().map(|p| self.val(p.0)).collect();
        let out = tensor::concat_channels(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Op::Concat { parts: ids.clone() }, out, &ids))
    }

    fn split_channels(&mut self, x: &Var, groups: usize) -> Result<Vec<Var>> {
        let pieces = tensor::split_channels(self.val(x.0), groups)?;
        let per = self.val(x.0).shape().c / groups;
        Ok(pieces
            .into_iter()
            .enumerate()
            .map(|(i, t)| self.push(Op::SplitPart { x: x.0, start: i * per }, t, &[x.0]))
            .collect())
    }

    fn rfft2(&mut self, x: &Var) -> Var {
        let spectrum = fft::rfft2_complex(self.val(x.0));
        let out = super::stack_pair(&fft::to_polar(&spectrum));
        self.push(Op::Rfft2 { x: x.0, spectrum }, out, &[x.0])
    }

    fn irfft2(&mut self, spec: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = irfft2_stacked(self.val(spec.0), out_h, out_w)?;
        Ok(self.push(Op::Irfft2 { spec: spec.0 }, out, &[spec.0]))
    }

    fn l1_loss(&mut self, pred: &Var, target: &Var) -> Result<Var> {
        let out = l1_value(self.val(pred.0), self.val(target.0))?;
        let op = Op::L1 {
            pred: pred.0,
            target: target.0,
        };
        Ok(self.push(op, out, &[pred.0, target.0]))
    }

    fn sum(&mut self, x: &Var) -> Var {
        let out = Tensor::scalar(self.val(x.0).sum());
        debug_assert_eq!(out.shape(), scalar_shape());
        self.push(Op::Sum { x: x.0 }, out, &[x.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(0, &Tensor::full(Shape::new(1, 2, 3, 3), 0.7));
        let loss = tape.sum(&x);
        let grads = tape.backward_scalar(loss).unwrap();
        assert!(grads.get(0).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn relu_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(0, &Tensor::new(Shape::new(1, 1, 1, 2), vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(&x);
        let loss = tape.sum(&r);
        let grads = tape.backward_scalar(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x + 3x) -> dx = 2x + 3
        let xv = Tensor::new(Shape::new(1, 1, 1, 3), vec![0.5, -2.0, 4.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.param(0, &xv);
        let sq = tape.mul(&x, &x).unwrap();
        let lin = tape.scale(&x, 3.0);
        let tot = tape.add(&sq, &lin).unwrap();
        let loss = tape.sum(&tot);
        let g = tape.backward_scalar(loss).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[4.0, -1.0, 11.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(0, &Tensor::full(Shape::new(1, 2, 4, 4), 0.3));
        let w = tape.param(1, &Tensor::full(Shape::new(2, 2, 3, 3), 0.1));
        let b = tape.param(2, &Tensor::full(Shape::new(1, 2, 1, 1), 0.1));
        let y = tape.conv2d(&x, &w, &b).unwrap();
        let s = tape.sigmoid(&y);
        let grads = tape.backward(s, &Tensor::zeros(Shape::new(1, 2, 4, 4))).unwrap();
        assert_eq!(grads.len(), 3);
        for (_, g) in grads.iter() {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(0, &Tensor::scalar(1.0));
        let loss = tape.sum(&x);
        tape.backward_scalar(loss).unwrap();
        assert!(matches!(tape.backward_scalar(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn seed_shape_must_match() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(0, &Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(tape.backward(x, &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn unreached_params_get_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(0, &Tensor::scalar(2.0));
        let _unused = tape.param(1, &Tensor::zeros(Shape::new(1, 3, 1, 1)));
        let loss = tape.sum(&x);
        let g = tape.backward_scalar(loss).unwrap();
        assert_eq!(g.get(1).unwrap().shape(), Shape::new(1, 3, 1, 1));
    }
}
