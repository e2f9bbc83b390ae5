//! A small reverse-mode tape covering exactly the operations the U-Net and
//! its losses need.
//!
//! Nodes are appended in execution order, so the tape is already a
//! topological order and [`Tape::backward`] walks it once in reverse.

use crate::error::{contract_err, shape_err, Result};
use crate::ops;
use crate::quant::{self, QuantMeta};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat {
        a: Var,
        b: Var,
        a_channels: usize,
    },
    RoundSte(Var),
    FakeQuantWeight {
        weight: Var,
        bits: Var,
        meta: QuantMeta,
        bits_grad: f64,
    },
    FakeQuantAct {
        input: Var,
        meta: QuantMeta,
    },
    /// Rounds onto a fixed grid; identity gradient.
    FakeQuantBias(Var),
    AvgBitwidth(Vec<(Var, f64)>),
    Bce {
        pred: Var,
        target: Var,
    },
    Dice {
        pred: Var,
        target: Var,
        smooth: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Probability clamp used by the BCE loss.
pub const BCE_EPS: f64 = 1e-7;

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not require
    /// gradients or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (inputs, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let y = ops::conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            padding,
        )?;
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
            &[input, kernel, bias],
        ))
    }

    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let y = ops::conv_transpose2d(self.value(input), self.value(kernel), self.value(bias))?;
        Ok(self.push(
            y,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
            },
            &[input, kernel, bias],
        ))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (y, argmax) = ops::maxpool2d(self.value(input))?;
        Ok(self.push(y, Op::MaxPool2d { input, argmax }, &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = ops::relu(self.value(input));
        self.push(y, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let y = ops::sigmoid(self.value(input));
        self.push(y, Op::Sigmoid(input), &[input])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        let a_channels = self.value(a).shape()[1];
        Ok(self.push(y, Op::Concat { a, b, a_channels }, &[a, b]))
    }

    /// Round half to even with a straight-through (identity) gradient.
    pub fn round_ste(&mut self, input: Var) -> Var {
        let y = quant::round_ste(self.value(input));
        self.push(y, Op::RoundSte(input), &[input])
    }

    /// Fake-quantizes `weight` with the bitwidth held by the scalar leaf
    /// `bits` (its value is the continuous `b_param`).
    ///
    /// Gradients: w.r.t. the weight, 1 inside the clamp range and 0 outside;
    /// w.r.t. `b_param`, the chain through `Q = 2^(b-1) - 1` with rounding
    /// treated as identity and the scale numerator `max|W|` held constant.
    /// Inside the range this gives `dW_q/dQ = (W - W_q) / Q`; saturated
    /// elements contribute 0.
    pub fn fake_quant_weight(&mut self, weight: Var, bits: Var) -> Result<Var> {
        Ok(self.fake_quant_weight_meta(weight, bits)?.0)
    }

    /// [`Tape::fake_quant_weight`], also returning the grid that was used.
    pub fn fake_quant_weight_meta(&mut self, weight: Var, bits: Var) -> Result<(Var, QuantMeta)> {
        let b = self.value(bits);
        if b.len() != 1 {
            return shape_err(format!("bitwidth must be a scalar, got {:?}", b.shape()));
        }
        let p = quant::QuantParams::new(b.data()[0].as_f64());
        let w = self.value(weight);
        let meta = QuantMeta::for_weights(w, quant::effective_bitwidth(&p));
        let y = w.map(|v| T::lit(meta.fake(v.as_f64())));
        let bits_grad = quant::effective_bitwidth_grad(&p);
        let v = self.push(
            y,
            Op::FakeQuantWeight {
                weight,
                bits,
                meta,
                bits_grad,
            },
            &[weight, bits],
        );
        Ok((v, meta))
    }

    /// Fake-quantizes onto a fixed grid; gradient passes where the input is
    /// inside `[q_min * s, q_max * s]`.
    pub fn fake_quant_act(&mut self, input: Var, meta: QuantMeta) -> Var {
        let y = self.value(input).map(|v| T::lit(meta.fake(v.as_f64())));
        self.push(y, Op::FakeQuantAct { input, meta }, &[input])
    }

    /// Rounds a bias onto the accumulator grid `scale` (32-bit range).
    pub fn fake_quant_bias(&mut self, input: Var, scale: f64) -> Var {
        let y = self
            .value(input)
            .map(|v| T::lit(scale * bias_level(v.as_f64(), scale) as f64));
        self.push(y, Op::FakeQuantBias(input), &[input])
    }

    /// Mean of the clamped scalar bitwidth leaves.
    pub fn avg_bitwidth(&mut self, bits: &[Var]) -> Result<Var> {
        if bits.is_empty() {
            return contract_err("avg_bitwidth over an empty layer list");
        }
        let mut params = Vec::with_capacity(bits.len());
        let mut terms = Vec::with_capacity(bits.len());
        let inv = 1.0 / bits.len() as f64;
        for &b in bits {
            let p = quant::QuantParams::new(self.value(b).data()[0].as_f64());
            terms.push((b, if p.is_unclamped() { inv } else { 0.0 }));
            params.push(p);
        }
        let avg = quant::avg_bitwidth(&params)?;
        Ok(self.push(Tensor::scalar(T::lit(avg)), Op::AvgBitwidth(terms), bits))
    }

    /// Mean binary cross-entropy over all elements; `pred` clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = crate::loss::bce_loss(self.value(pred), self.value(target))?;
        Ok(self.push(
            Tensor::scalar(T::lit(loss)),
            Op::Bce { pred, target },
            &[pred],
        ))
    }

    /// Soft Dice loss `1 - (2 sum(p t) + s) / (sum p + sum t + s)`.
    pub fn dice_loss(&mut self, pred: Var, target: Var, smooth: f64) -> Result<Var> {
        let loss = crate::loss::dice_loss(self.value(pred), self.value(target), smooth)?;
        Ok(self.push(
            Tensor::scalar(T::lit(loss)),
            Op::Dice {
                pred,
                target,
                smooth,
            },
            &[pred],
        ))
    }

    /// `sum_i coef_i * x_i` over scalar nodes, accumulated left to right in f64.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = 0.0f64;
        for &(v, c) in terms {
            let x = self.value(v);
            if x.len() != 1 {
                return shape_err("weighted_sum takes scalar operands");
            }
            acc += c * x.data()[0].as_f64();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Tensor::scalar(T::lit(acc)),
            Op::WeightedSum(terms.to_vec()),
            &inputs,
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).sum();
        self.push(Tensor::scalar(T::lit(total)), Op::Sum(input), &[input])
    }

    /// Reverse-mode gradients of the scalar `loss` w.r.t. every node that
    /// requires gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::ONE));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
        }
        // Only leaves keep their gradients.
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            } => {
                let r = ops::conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    padding,
                    g,
                    self.needs(input),
                )?;
                if let Some(dx) = r.input {
                    self.accumulate(grads, input, dx)?;
                }
                self.accumulate(grads, kernel, r.kernel)?;
                self.accumulate(grads, bias, r.bias)?;
            }
            &Op::ConvTranspose2d {
                input,
                kernel,
                bias,
            } => {
                let r = ops::conv_transpose2d_backward(
                    self.value(input),
                    self.value(kernel),
                    g,
                    self.needs(input),
                )?;
                if let Some(dx) = r.input {
                    self.accumulate(grads, input, dx)?;
                }
                self.accumulate(grads, kernel, r.kernel)?;
                self.accumulate(grads, bias, r.bias)?;
            }
            Op::MaxPool2d { input, argmax } => {
                let dx = ops::maxpool2d_backward(self.value(*input).shape(), argmax, g)?;
                self.accumulate(grads, *input, dx)?;
            }
            &Op::Relu(input) => {
                let dx = ops::relu_backward(self.value(input), g);
                self.accumulate(grads, input, dx)?;
            }
            &Op::Sigmoid(input) => {
                let dx = ops::sigmoid_backward(out, g);
                self.accumulate(grads, input, dx)?;
            }
            &Op::Concat { a, b, a_channels } => {
                let (ga, gb) = ops::split_channels(g, a_channels)?;
                self.accumulate(grads, a, ga)?;
                self.accumulate(grads, b, gb)?;
            }
            &Op::RoundSte(input) | &Op::FakeQuantBias(input) => {
                self.accumulate(grads, input, g.clone())?;
            }
            &Op::FakeQuantWeight {
                weight,
                bits,
                ref meta,
                bits_grad,
            } => {
                let w = self.value(weight);
                let q = meta.q_max as f64;
                let mut dw = Vec::with_capacity(w.len());
                let mut dq = 0.0f64;
                for ((&wi, &wq), &gi) in w.data().iter().zip(out.data()).zip(g.data()) {
                    let wi64 = wi.as_f64();
                    if meta.passes(wi64) {
                        dw.push(gi);
                        dq += gi.as_f64() * (wi64 - wq.as_f64()) / q;
                    } else {
                        dw.push(T::ZERO);
                    }
                }
                self.accumulate(grads, weight, Tensor::new(w.shape().to_vec(), dw)?)?;
                // dQ/db for Q = 2^(b-1) - 1, evaluated at the effective bitwidth.
                let dq_db = 2f64.powi(meta.b_eff as i32 - 1) * std::f64::consts::LN_2;
                let db = dq * dq_db * bits_grad;
                self.accumulate(grads, bits, Tensor::scalar(T::lit(db)))?;
            }
            &Op::FakeQuantAct { input, ref meta } => {
                let x = self.value(input);
                let dx = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| {
                        if meta.passes(xi.as_f64()) {
                            gi
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                self.accumulate(grads, input, Tensor::new(x.shape().to_vec(), dx)?)?;
            }
            Op::AvgBitwidth(terms) | Op::WeightedSum(terms) => {
                let g0 = g.data()[0].as_f64();
                for &(v, c) in terms {
                    let shape = self.value(v).shape().to_vec();
                    self.accumulate(grads, v, Tensor::full(shape, T::lit(g0 * c)))?;
                }
            }
            &Op::Sum(input) => {
                let shape = self.value(input).shape().to_vec();
                self.accumulate(grads, input, Tensor::full(shape, g.data()[0]))?;
            }
            &Op::Bce { pred, target } => {
                let dp = crate::loss::bce_grad(
                    self.value(pred),
                    self.value(target),
                    g.data()[0].as_f64(),
                );
                self.accumulate(grads, pred, dp)?;
            }
            &Op::Dice {
                pred,
                target,
                smooth,
            } => {
                let dp = crate::loss::dice_grad(
                    self.value(pred),
                    self.value(target),
                    smooth,
                    g.data()[0].as_f64(),
                );
                self.accumulate(grads, pred, dp)?;
            }
        }
        Ok(())
    }
}

/// Integer bias level on the accumulator grid, saturated to `i32`.
pub fn bias_level(b: f64, scale: f64) -> i32 {
    quant::round_half_even(b / scale).clamp(i32::MIN as f64, i32::MAX as f64) as i32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sum_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new([2], vec![1.0, -1.0]).unwrap());
        let y = t.relu(x);
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn sigmoid_sum_gradient_at_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::zeros([3]));
        let y = t.sigmoid(x);
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 3]);
    }

    #[test]
    fn concat_sum_routes_ones() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Tensor::ones([1, 2, 2, 2]));
        let b = t.param(Tensor::ones([1, 3, 2, 2]));
        let c = t.concat_channels(a, b).unwrap();
        let l = t.sum(c);
        let g = t.backward(l).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.get(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::ones([3]));
        assert!(matches!(t.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn round_ste_passes_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(2.7));
        let r = t.round_ste(x);
        assert_eq!(t.value(r).data(), &[3.0]);
        let l = t.weighted_sum(&[(r, 1.0)]).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::scalar(1.0));
        let w = t.param(Tensor::scalar(2.0));
        let l = t.weighted_sum(&[(x, 3.0), (w, 0.5)]).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[0.5]);
        assert!(g.get(l).is_none());
    }

    #[test]
    fn avg_bitwidth_gradient_is_inverse_layer_count() {
        let mut t = Tape::<f64>::new();
        let bits: Vec<Var> = (0..23)
            .map(|i| t.param(Tensor::scalar(2.5 + 0.2 * i as f64)))
            .collect();
        let avg = t.avg_bitwidth(&bits).unwrap();
        let g = t.backward(avg).unwrap();
        for (i, &b) in bits.iter().enumerate() {
            let want = if 2.5 + 0.2 * i as f64 >= 8.0 {
                0.0
            } else {
                1.0 / 23.0
            };
            assert_eq!(g.get(b).unwrap().data()[0], want);
        }
    }
}
