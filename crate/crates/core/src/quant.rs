//! Fake quantization with a learnable per-layer weight bitwidth.
//!
//! Weights use symmetric per-tensor quantization with a dynamic scale
//! `s = max|W| / Q`, `Q = 2^(b-1) - 1`. Activations use an unsigned grid (or a
//! symmetric one for the signed transposed-convolution outputs) whose scale
//! follows an exponential running maximum.
//!
//! The gradient rules (straight-through for every rounding) live in
//! [`crate::graph`]; this module holds the forward math and the state types.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::tensor::{Scalar, Tensor};

pub const MIN_BITS: f64 = 2.0;
pub const MAX_BITS: f64 = 8.0;
/// Floor applied to every scale numerator so all-zero tensors stay finite.
pub const SCALE_EPS: f64 = 1e-8;

/// Round half to even.
#[inline]
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

/// Forward half of the straight-through rounding op; the backward pass is
/// the identity (see [`crate::graph::Tape::round_ste`]).
pub fn round_ste<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::lit(round_half_even(v.as_f64())))
}

/// The learnable continuous bitwidth of one weight layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub b_param: f64,
    pub b_min: f64,
    pub b_max: f64,
}

impl QuantParams {
    pub fn new(b_param: f64) -> Self {
        Self {
            b_param,
            b_min: MIN_BITS,
            b_max: MAX_BITS,
        }
    }

    pub fn clamped(&self) -> f64 {
        self.b_param.clamp(self.b_min, self.b_max)
    }

    /// True when the clamp is inactive, i.e. gradients reach `b_param`.
    pub fn is_unclamped(&self) -> bool {
        self.b_param > self.b_min && self.b_param < self.b_max
    }
}

impl Default for QuantParams {
    fn default() -> Self {
        Self::new(4.0)
    }
}

/// `round(clamp(b_param, 2, 8))`, always in `2..=8`.
pub fn effective_bitwidth(p: &QuantParams) -> u32 {
    bits_from_param(p.b_param, p.b_min, p.b_max)
}

pub(crate) fn bits_from_param(b_param: f64, b_min: f64, b_max: f64) -> u32 {
    let b = round_half_even(b_param.clamp(b_min, b_max)) as u32;
    b.clamp(MIN_BITS as u32, MAX_BITS as u32)
}

/// Derivative of the effective bitwidth w.r.t. `b_param` under the
/// straight-through rule: 1 strictly inside the clamp range, 0 on the rails.
pub fn effective_bitwidth_grad(p: &QuantParams) -> f64 {
    if p.is_unclamped() {
        1.0
    } else {
        0.0
    }
}

/// Largest signed weight level for `bits`: `2^(bits-1) - 1`.
pub fn weight_qmax(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Largest unsigned activation level for `bits`: `2^bits - 1`.
pub fn act_qmax(bits: u32) -> i64 {
    (1i64 << bits) - 1
}

/// Scale and integer grid used by one fake-quantization call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantMeta {
    pub scale: f64,
    /// Real value of the top level (`scale * q_max`, up to rounding).
    pub range: f64,
    pub q_min: i64,
    pub q_max: i64,
    pub b_eff: u32,
    pub signed: bool,
}

impl QuantMeta {
    pub fn for_weights<T: Scalar>(w: &Tensor<T>, bits: u32) -> Self {
        let q = weight_qmax(bits);
        let range = w.max_abs().max(SCALE_EPS);
        Self {
            scale: range / q as f64,
            range,
            q_min: -q,
            q_max: q,
            b_eff: bits,
            signed: true,
        }
    }

    /// Integer level of `v` on this grid (rounded half-even, clamped).
    #[inline]
    pub fn level(&self, v: f64) -> f64 {
        round_half_even(v / self.scale).clamp(self.q_min as f64, self.q_max as f64)
    }

    /// Dequantized value of `v`. Computed as `range * (level / q_max)` so the
    /// top level maps back to `range` exactly, which makes re-quantization of
    /// an already quantized tensor reproduce the same scale bit for bit.
    #[inline]
    pub fn fake(&self, v: f64) -> f64 {
        self.dequant(self.level(v))
    }

    #[inline]
    pub fn dequant(&self, level: f64) -> f64 {
        self.range * (level / self.q_max as f64)
    }

    /// Whether `v` lies inside the clamp range (straight-through mask).
    /// Compared against the dequantized end points so the element that set
    /// the scale always passes.
    #[inline]
    pub fn passes(&self, v: f64) -> bool {
        v >= self.dequant(self.q_min as f64) && v <= self.dequant(self.q_max as f64)
    }
}

/// Symmetric per-tensor fake quantization of a weight tensor.
pub fn fake_quant_weight<T: Scalar>(w: &Tensor<T>, p: &QuantParams) -> (Tensor<T>, QuantMeta) {
    let meta = QuantMeta::for_weights(w, effective_bitwidth(p));
    (w.map(|v| T::lit(meta.fake(v.as_f64()))), meta)
}

/// Integer weight levels (`round(W / s)`) together with their grid.
pub fn quantize_weight_ints<T: Scalar>(w: &Tensor<T>, p: &QuantParams) -> (Vec<i32>, QuantMeta) {
    let meta = QuantMeta::for_weights(w, effective_bitwidth(p));
    let ints = w
        .data()
        .iter()
        .map(|v| meta.level(v.as_f64()) as i32)
        .collect();
    (ints, meta)
}

/// Running-maximum statistics that fix an activation scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuantState {
    pub running_max: f64,
    pub momentum: f64,
    pub frozen: bool,
    /// False until the first observation; the first batch seeds the maximum.
    pub initialized: bool,
    /// Signed (symmetric) grid over `max|X|` instead of unsigned over `max X`.
    pub signed: bool,
}

impl ActQuantState {
    pub fn unsigned() -> Self {
        Self {
            running_max: SCALE_EPS,
            momentum: 0.9,
            frozen: false,
            initialized: false,
            signed: false,
        }
    }

    pub fn signed() -> Self {
        Self {
            signed: true,
            ..Self::unsigned()
        }
    }

    /// Folds one batch statistic into the running maximum. No-op when frozen.
    pub fn observe(&mut self, batch_max: f64) {
        if self.frozen {
            return;
        }
        let batch_max = if batch_max.is_finite() {
            batch_max
        } else {
            0.0
        };
        self.running_max = if self.initialized {
            self.momentum * self.running_max + (1.0 - self.momentum) * batch_max
        } else {
            batch_max
        }
        .max(SCALE_EPS);
        self.initialized = true;
    }

    pub fn observe_tensor<T: Scalar>(&mut self, x: &Tensor<T>) {
        let m = if self.signed { x.max_abs() } else { x.max() };
        self.observe(m);
    }

    pub fn meta(&self, bits: u32) -> QuantMeta {
        let running_max = self.running_max.max(SCALE_EPS);
        if self.signed {
            let q = weight_qmax(bits);
            QuantMeta {
                scale: running_max / q as f64,
                range: running_max,
                q_min: -q,
                q_max: q,
                b_eff: bits,
                signed: true,
            }
        } else {
            let q = act_qmax(bits);
            QuantMeta {
                scale: running_max / q as f64,
                range: running_max,
                q_min: 0,
                q_max: q,
                b_eff: bits,
                signed: false,
            }
        }
    }
}

impl Default for ActQuantState {
    fn default() -> Self {
        Self::unsigned()
    }
}

/// Fake-quantizes an activation tensor; updates `state` first when training.
pub fn fake_quant_activation<T: Scalar>(
    x: &Tensor<T>,
    bits: u32,
    state: &mut ActQuantState,
    training: bool,
) -> Tensor<T> {
    if training {
        state.observe_tensor(x);
    }
    let meta = state.meta(bits);
    x.map(|v| T::lit(meta.fake(v.as_f64())))
}

/// Mean of the clamped continuous bitwidths of all quantized weight layers.
pub fn avg_bitwidth(params: &[QuantParams]) -> Result<f64> {
    if params.is_empty() {
        return contract_err("avg_bitwidth over an empty layer list");
    }
    let sum: f64 = params.iter().map(QuantParams::clamped).sum();
    Ok(sum / params.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_ties_to_even() {
        assert_eq!(round_half_even(2.7), 3.0);
        assert_eq!(round_half_even(-0.5), 0.0);
        assert_eq!(round_half_even(2.5), 2.0);
        assert_eq!(round_half_even(3.5), 4.0);
        let t = Tensor::<f64>::new([3], vec![2.7, -0.5, 2.5]).unwrap();
        assert_eq!(round_ste(&t).data(), &[3.0, 0.0, 2.0]);
    }

    #[test]
    fn effective_bitwidth_clamps() {
        assert_eq!(effective_bitwidth(&QuantParams::new(4.3)), 4);
        assert_eq!(effective_bitwidth(&QuantParams::new(9.7)), 8);
        assert_eq!(effective_bitwidth(&QuantParams::new(1.2)), 2);
        assert_eq!(effective_bitwidth_grad(&QuantParams::new(4.3)), 1.0);
        assert_eq!(effective_bitwidth_grad(&QuantParams::new(9.7)), 0.0);
        assert_eq!(effective_bitwidth_grad(&QuantParams::new(2.0)), 0.0);
    }

    #[test]
    fn weight_example_on_two_bit_grid() {
        let w = Tensor::<f64>::new([3], vec![0.5, -0.25, 0.1]).unwrap();
        let (wq, meta) = fake_quant_weight(&w, &QuantParams::new(2.0));
        assert_eq!((meta.q_min, meta.q_max), (-1, 1));
        assert_eq!(meta.scale, 0.5);
        assert_eq!(wq.data(), &[0.5, 0.0, 0.0]);
    }

    #[test]
    fn all_zero_weights() {
        let w = Tensor::<f32>::zeros([4, 4]);
        let (wq, meta) = fake_quant_weight(&w, &QuantParams::new(4.0));
        assert!(wq.data().iter().all(|&v| v == 0.0));
        assert_eq!(meta.scale, SCALE_EPS / 7.0);
    }

    #[test]
    fn activation_example() {
        let mut st = ActQuantState {
            running_max: 1.0,
            initialized: true,
            ..ActQuantState::unsigned()
        };
        let x = Tensor::<f64>::new([3], vec![0.5, 0.0, 2.0]).unwrap();
        let y = fake_quant_activation(&x, 8, &mut st, false);
        assert_eq!(y.data()[0], 128.0 / 255.0);
        assert!((y.data()[0] - 0.501961).abs() < 1e-6);
        assert_eq!(y.data()[1], 0.0);
        assert_eq!(y.data()[2], 1.0);
        assert_eq!(st.running_max, 1.0);
    }

    #[test]
    fn ema_update_and_freeze() {
        let mut st = ActQuantState::unsigned();
        st.observe(2.0);
        assert_eq!(st.running_max, 2.0);
        st.observe(1.0);
        assert!((st.running_max - 1.9).abs() < 1e-15);
        st.frozen = true;
        st.observe(100.0);
        assert!((st.running_max - 1.9).abs() < 1e-15);
        st.frozen = false;
        st.initialized = false;
        st.observe(0.0);
        assert_eq!(st.running_max, SCALE_EPS);
    }

    #[test]
    fn avg_bitwidth_examples() {
        assert_eq!(avg_bitwidth(&vec![QuantParams::new(4.0); 23]).unwrap(), 4.0);
        assert_eq!(
            avg_bitwidth(&[QuantParams::new(2.0), QuantParams::new(8.0)]).unwrap(),
            5.0
        );
        assert_eq!(avg_bitwidth(&[QuantParams::new(10.0)]).unwrap(), 8.0);
        assert!(matches!(avg_bitwidth(&[]), Err(crate::Error::Contract(_))));
    }

    fn weights() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 1..64)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn grid_membership(w in weights(), b in 0.0f64..10.0) {
            let t = Tensor::new([w.len()], w).unwrap();
            let (wq, meta) = fake_quant_weight(&t, &QuantParams::new(b));
            prop_assert!((2..=8).contains(&meta.b_eff));
            for &v in wq.data() {
                let level = v / meta.scale;
                prop_assert!((level - level.round()).abs() < 1e-9);
                prop_assert!(level.round() >= meta.q_min as f64 && level.round() <= meta.q_max as f64);
            }
            let (ints, _) = quantize_weight_ints(&t, &QuantParams::new(b));
            for (&q, &v) in ints.iter().zip(wq.data()) {
                prop_assert_eq!(meta.dequant(q as f64), v);
            }
        }

        #[test]
        fn idempotent(w in weights(), b in 2.0f64..8.0) {
            let p = QuantParams::new(b);
            let t = Tensor::new([w.len()], w).unwrap();
            let (once, _) = fake_quant_weight(&t, &p);
            let (twice, _) = fake_quant_weight(&once, &p);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn error_bounded_and_monotone_in_bits(w in weights()) {
            let t = Tensor::new([w.len()], w).unwrap();
            let err = |b: f64| {
                let (wq, meta) = fake_quant_weight(&t, &QuantParams::new(b));
                let e = t.data().iter().zip(wq.data()).fold(0.0f64, |m, (a, q)| m.max((a - q).abs()));
                (e, meta.scale)
            };
            let (e8, s8) = err(8.0);
            let (e2, _) = err(2.0);
            prop_assert!(e8 <= e2);
            prop_assert!(e8 <= s8 / 2.0 + 1e-12);
        }
    }
}
