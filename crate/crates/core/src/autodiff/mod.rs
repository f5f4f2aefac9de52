//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in execution order. Calling
//! [`Graph::backward`] on a scalar node replays the adjoints in exact
//! reverse order and leaves a gradient on every node that requires one and
//! is reachable from the loss. Only first-order gradients are supported, and
//! a graph can be differentiated once: build a new graph for the next
//! forward pass.
//!
//! ```
//! use sparseseg::autodiff::Graph;
//! use sparseseg::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_f64(vec![2], &[-1.0, 2.0]).unwrap());
//! let y = g.relu(x);
//! let loss = g.sum(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.value(y).data(), &[0.0, 2.0]);
//! assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
//! ```

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{gradcheck, gradcheck_with, GradcheckOptions, GradcheckReport, GRADCHECK_STEP};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation defined outside this module (the losses) that plugs into
/// the tape. The op computes its value eagerly and keeps whatever it needs
/// to produce input gradients later.
pub trait CustomOp<F: Real>: Send {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> Vec<Var>;
    /// Gradients for each of `inputs()`, in order, given the output gradient.
    fn backward(&self, output_grad: &Tensor<F>, inputs: &[&Tensor<F>]) -> Vec<Tensor<F>>;
}

enum Op<F: Real> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        ksize: usize,
        /// im2col of the input; empty for 1x1 kernels, which use the input as-is.
        cols: Vec<F>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: F,
    },
    WeightedSum {
        input: Var,
        weights: Vec<F>,
    },
    Custom(Box<dyn CustomOp<F>>),
}

impl<F: Real> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![*input, *kernel, *bias],
            Op::MaxPool2 { input, .. }
            | Op::Relu { input }
            | Op::Upsample { input, .. }
            | Op::Scale { input, .. }
            | Op::WeightedSum { input, .. } => vec![*input],
            Op::Add { a, b } => vec![*a, *b],
            Op::Custom(op) => op.inputs(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Relu { .. } => "relu",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Custom(op) => op.name(),
        }
    }
}

struct Node<F: Real> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Record of one forward pass.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    differentiated: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, requires_grad, op)
    }

    fn push_node(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push_node(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the loss with respect to `v`, once [`Graph::backward`] ran.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Registers an externally defined operation whose value is already
    /// computed.
    pub fn custom(&mut self, value: Tensor<F>, op: Box<dyn CustomOp<F>>) -> Var {
        self.push(value, Op::Custom(op))
    }

    /// Same-padded, stride-1 cross-correlation of `[H, W, Cin]` with a
    /// `[k, k, Cin, Cout]` kernel (`k` is 1 or 3) plus a `[Cout]` bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (h, w, cin) = self.value(input).hwc()?;
        let kd = self.value(kernel).dims().to_vec();
        let [kh, kw, kcin, cout] = kd[..] else {
            return Err(shape_err!("conv2d kernel must be [k, k, Cin, Cout], got {kd:?}"));
        };
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(shape_err!("conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}"));
        }
        if kcin != cin {
            return Err(shape_err!(
                "conv2d channel mismatch: input has {cin}, kernel expects {kcin}"
            ));
        }
        if self.value(bias).dims() != [cout] {
            return Err(shape_err!(
                "conv2d bias must be [{cout}], got {:?}",
                self.value(bias).dims()
            ));
        }
        let x = self.value(input).data();
        let kdata = self.value(kernel).data();
        let bdata = self.value(bias).data();
        let cols = if kh == 1 {
            Vec::new()
        } else {
            kernels::im2col(x, h, w, cin, kh)
        };
        let row_len = kh * kh * cin;
        let lhs: &[F] = if kh == 1 { x } else { &cols };
        let mut out = Vec::with_capacity(h * w * cout);
        for _ in 0..h * w {
            out.extend_from_slice(bdata);
        }
        F::gemm(
            h * w,
            row_len,
            cout,
            F::one(),
            lhs,
            (row_len as isize, 1),
            kdata,
            (cout as isize, 1),
            F::one(),
            &mut out,
            (cout as isize, 1),
        );
        let value = Tensor::new(vec![h, w, cout], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                ksize: kh,
                cols,
            },
        ))
    }

    /// Non-overlapping 2x2 max pooling of `[H, W, C]`; `H` and `W` must be even.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (h, w, c) = self.value(input).hwc()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("maxpool2 needs even height and width, got {h}x{w}"));
        }
        let (out, argmax) = kernels::maxpool2(self.value(input).data(), h, w, c);
        let value = Tensor::new(vec![h / 2, w / 2, c], out)?;
        Ok(self.push(value, Op::MaxPool2 { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| if x > F::zero() { x } else { F::zero() });
        self.push(value, Op::Relu { input })
    }

    /// Fixed bilinear upsampling by 2, 4 or 8 with half-pixel centres,
    /// clamped at the borders.
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        if !matches!(factor, 2 | 4 | 8) {
            return Err(Error::Param(format!(
                "upsample factor must be 2, 4 or 8, got {factor}"
            )));
        }
        let (h, w, c) = self.value(input).hwc()?;
        let out = kernels::upsample(self.value(input).data(), h, w, c, factor);
        let value = Tensor::new(vec![h * factor, w * factor, c], out)?;
        Ok(self.push(value, Op::Upsample { input, factor }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(shape_err!(
                "add needs identical dims, got {:?} and {:?}",
                ta.dims(),
                tb.dims()
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.dims().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: F) -> Var {
        let value = self.value(input).map(|x| x * factor);
        self.push(value, Op::Scale { input, factor })
    }

    /// `sum_k weights[k] * input[k]`, a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<F>) -> Result<Var> {
        let x = self.value(input);
        if weights.len() != x.len() {
            return Err(shape_err!(
                "weighted_sum needs {} weights, got {}",
                x.len(),
                weights.len()
            ));
        }
        let total = x.data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { input, weights }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let n = self.value(input).len();
        self.weighted_sum(input, vec![F::one(); n])
            .expect("weights sized to input")
    }

    /// Back-propagates from the scalar `loss`.
    ///
    /// Fails if `loss` is not a one-element tensor or if this graph was
    /// already differentiated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::Graph(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        self.differentiated = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let dims = self.value(loss).dims().to_vec();
        self.grads[loss.0] = Some(Tensor::full(&dims, F::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(out_grad) = self.grads[idx].take() else {
                continue;
            };
            let inputs = self.nodes[idx].op.inputs();
            if !inputs.is_empty() {
                let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                let input_grads = self.adjoint(idx, &out_grad, &needs)?;
                for ((v, need), g) in inputs.iter().zip(&needs).zip(input_grads) {
                    if !need {
                        continue;
                    }
                    let Some(g) = g else { continue };
                    match &mut self.grads[v.0] {
                        Some(acc) => {
                            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            self.grads[idx] = Some(out_grad);
        }
        Ok(())
    }

    /// Input gradients of node `idx`. Entries for inputs that do not need a
    /// gradient may be `None`.
    fn adjoint(&self, idx: usize, g: &Tensor<F>, needs: &[bool]) -> Result<Vec<Option<Tensor<F>>>> {
        let node = &self.nodes[idx];
        let gd = g.data();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias: _,
                ksize,
                cols,
            } => {
                let (h, w, cin) = self.value(*input).hwc()?;
                let kt = self.value(*kernel);
                let cout = kt.dims()[3];
                let row_len = ksize * ksize * cin;
                let lhs: &[F] = if *ksize == 1 {
                    self.value(*input).data()
                } else {
                    cols
                };
                let d_input = needs[0].then(|| {
                    let mut dcols = vec![F::zero(); h * w * row_len];
                    F::gemm(
                        h * w,
                        cout,
                        row_len,
                        F::one(),
                        gd,
                        (cout as isize, 1),
                        kt.data(),
                        (1, cout as isize),
                        F::zero(),
                        &mut dcols,
                        (row_len as isize, 1),
                    );
                    let data = if *ksize == 1 {
                        dcols
                    } else {
                        kernels::col2im(&dcols, h, w, cin, *ksize)
                    };
                    Tensor::new(vec![h, w, cin], data).expect("input dims")
                });
                let d_kernel = needs[1].then(|| {
                    let mut dk = vec![F::zero(); row_len * cout];
                    F::gemm(
                        row_len,
                        h * w,
                        cout,
                        F::one(),
                        lhs,
                        (1, row_len as isize),
                        gd,
                        (cout as isize, 1),
                        F::zero(),
                        &mut dk,
                        (cout as isize, 1),
                    );
                    Tensor::new(kt.dims().to_vec(), dk).expect("kernel dims")
                });
                let d_bias = needs[2].then(|| {
                    let mut db = vec![F::zero(); cout];
                    for px in gd.chunks_exact(cout) {
                        for (b, &v) in db.iter_mut().zip(px) {
                            *b += v;
                        }
                    }
                    Tensor::new(vec![cout], db).expect("bias dims")
                });
                vec![d_input, d_kernel, d_bias]
            }
            Op::MaxPool2 { input, argmax } => {
                let x = self.value(*input);
                let mut d = vec![F::zero(); x.len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    d[src] += gv;
                }
                vec![Some(Tensor::new(x.dims().to_vec(), d)?)]
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let d = x
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                vec![Some(Tensor::new(x.dims().to_vec(), d)?)]
            }
            Op::Upsample { input, factor } => {
                let (h, w, c) = self.value(*input).hwc()?;
                let d = kernels::upsample_adjoint(gd, h, w, c, *factor);
                vec![Some(Tensor::new(vec![h, w, c], d)?)]
            }
            Op::Add { .. } => vec![Some(g.clone()), Some(g.clone())],
            Op::Scale { factor, .. } => vec![Some(g.map(|v| v * *factor))],
            Op::WeightedSum { input, weights } => {
                let s = gd[0];
                let d = weights.iter().map(|&wv| wv * s).collect();
                vec![Some(Tensor::new(self.value(*input).dims().to_vec(), d)?)]
            }
            Op::Custom(op) => {
                let vars = op.inputs();
                let values: Vec<&Tensor<F>> = vars.iter().map(|v| self.value(*v)).collect();
                op.backward(g, &values).into_iter().map(Some).collect()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims.to_vec(), data).unwrap()
    }

    fn conv(input: Tensor<f64>, kernel: Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let cout = kernel.dims()[3];
        let x = g.constant(input);
        let k = g.constant(kernel);
        let b = g.constant(Tensor::zeros(&[cout]));
        let y = g.conv2d(x, k, b).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn conv_single_pixel_sees_only_centre_tap() {
        let out = conv(t(&[1, 1, 1], &[1.0]), Tensor::full(&[3, 3, 1, 1], 1.0));
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        k.data_mut()[4] = 1.0;
        let input = t(&[3, 4, 1], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]);
        assert_eq!(conv(input.clone(), k), input);
    }

    #[test]
    fn conv_all_ones_on_2x2() {
        // Each output sees the whole 2x2 image inside its padded window.
        let out = conv(t(&[2, 2, 1], &[1., 2., 3., 4.]), Tensor::full(&[3, 3, 1, 1], 1.0));
        let direct: f64 = [1., 2., 3., 4.].iter().sum();
        assert_eq!(out.data(), &[direct; 4]);
        assert_eq!(direct, 10.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 2, 3]));
        let k = g.constant(Tensor::zeros(&[3, 3, 2, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, k, b), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 2, 1], &[1., 2., 3., 4.]));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let n = g.param(t(&[2, 2, 1], &[-1., -2., -3., -4.]));
        let m = g.maxpool2(n).unwrap();
        assert_eq!(g.value(m).data(), &[-1.0]);

        let odd = g.constant(Tensor::zeros(&[3, 2, 1]));
        assert!(matches!(g.maxpool2(odd), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_ties_route_to_top_left() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[4, 4, 1], 7.0));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[7.0; 4]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap().data().to_vec();
        let mut expected = vec![0.0; 16];
        for idx in [0, 2, 8, 10] {
            expected[idx] = 1.0;
        }
        assert_eq!(grad, expected);
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[-1., 2.]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
        let z = g.param(Tensor::zeros(&[3]));
        let rz = g.relu(z);
        let five = g.param(t(&[1], &[5.0]));
        let r5 = g.relu(five);
        assert_eq!(g.value(r5).data(), &[5.0]);
        let loss = g.sum(rz);
        g.backward(loss).unwrap();
        assert_eq!(g.value(rz).data(), &[0.0; 3]);
        assert_eq!(g.grad(z).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn upsample_examples() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[1, 1, 1], &[3.5]));
        for f in [2, 4, 8] {
            let u = g.upsample_bilinear(c, f).unwrap();
            assert_eq!(g.value(u).dims(), &[f, f, 1]);
            assert!(g.value(u).data().iter().all(|&v| v == 3.5));
        }
        let row = g.constant(t(&[1, 2, 1], &[0., 2.]));
        let u = g.upsample_bilinear(row, 2).unwrap();
        assert_eq!(g.value(u).dims(), &[2, 4, 1]);
        assert_eq!(g.value(u).data(), &[0., 0.5, 1.5, 2., 0., 0.5, 1.5, 2.]);
        assert!(matches!(g.upsample_bilinear(c, 3), Err(Error::Param(_))));
    }

    #[test]
    fn add_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1., 2.]));
        let b = g.param(t(&[2], &[3., 4.]));
        let z = g.constant(Tensor::zeros(&[2]));
        let az = g.add(a, z).unwrap();
        assert_eq!(g.value(az).data(), &[1., 2.]);
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4., 6.]);
        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, bad).is_err());
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1., 1.]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1., 2.]));
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(a), Err(Error::Usage(_))));
    }

    #[test]
    fn reachable_params_get_gradients_even_when_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[-1., -2.]));
        let unused = g.param(t(&[1], &[1.]));
        let r = g.relu(a);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.0, 0.0]);
        assert!(g.grad(unused).is_none());
    }
}
