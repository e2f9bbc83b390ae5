//! U-Net builder and forward pass, in floating-point or fake-quantized mode.
//!
//! Layer order (also the order of [`QuantUNet::quant_layer_names`]):
//! `enc1.conv1, enc1.conv2, … enc4.conv2, bottleneck.conv1, bottleneck.conv2,
//! up4, dec4.conv1, dec4.conv2, …, up1, dec1.conv1, dec1.conv2, outseg`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Tape, Var};
use crate::quant::{ActQuantState, QuantMeta, QuantParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub out_channels: usize,
    pub quantized: bool,
    pub act_bitwidth: u32,
    pub init_bitwidth: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            depth: 4,
            out_channels: 1,
            quantized: true,
            act_bitwidth: 8,
            init_bitwidth: 4.0,
        }
    }
}

impl UNetConfig {
    /// The full-width model of the reference architecture (64 base channels).
    pub fn full() -> Self {
        Self {
            base_channels: 64,
            ..Self::default()
        }
    }

    pub fn with_base(base_channels: usize) -> Self {
        Self {
            base_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_channels < 1 {
            return bad("base_channels must be at least 1".into());
        }
        if self.in_channels < 1 || self.out_channels < 1 {
            return bad("in_channels and out_channels must be at least 1".into());
        }
        if !(1..=6).contains(&self.depth) {
            return bad(format!("depth must be in 1..=6, got {}", self.depth));
        }
        if !(2..=16).contains(&self.act_bitwidth) {
            return bad(format!(
                "act_bitwidth must be in 2..=16, got {}",
                self.act_bitwidth
            ));
        }
        if !self.init_bitwidth.is_finite() {
            return bad("init_bitwidth must be finite".into());
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// 3x3 convolution followed by ReLU.
    Conv,
    /// 2x2 stride-2 transposed convolution.
    UpConv,
    /// 1x1 convolution followed by sigmoid.
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub quant: QuantParams,
    /// Output activation statistics; `None` for the head.
    pub act: Option<ActQuantState>,
}

impl QuantLayer {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn bitwidth(&self) -> u32 {
        crate::quant::effective_bitwidth(&self.quant)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantUNet {
    pub config: UNetConfig,
    pub input_act: ActQuantState,
    pub layers: Vec<QuantLayer>,
}

/// Tape handles of every trainable tensor, one entry per layer.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    /// Empty in floating-point mode.
    pub bits: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub output: Var,
    /// Pre-sigmoid head output.
    pub logits: Var,
    pub params: ParamVars,
}

/// An activation on the tape together with its quantization grid.
#[derive(Clone, Copy)]
struct Act {
    var: Var,
    meta: Option<QuantMeta>,
}

/// Grid with the same level range as `src` but step `scale`.
pub fn rescaled_meta(src: &QuantMeta, scale: f64) -> QuantMeta {
    QuantMeta {
        scale,
        range: scale * src.q_max as f64,
        ..*src
    }
}

pub fn layer_names(depth: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(5 * depth + 3);
    for i in 1..=depth {
        names.push(format!("enc{i}.conv1"));
        names.push(format!("enc{i}.conv2"));
    }
    names.push("bottleneck.conv1".into());
    names.push("bottleneck.conv2".into());
    for i in (1..=depth).rev() {
        names.push(format!("up{i}"));
        names.push(format!("dec{i}.conv1"));
        names.push(format!("dec{i}.conv2"));
    }
    names.push("outseg".into());
    names
}

/// `(name, kind, weight shape)` for every layer in forward order.
pub fn layer_specs(config: &UNetConfig) -> Vec<(String, LayerKind, [usize; 4])> {
    let names = layer_names(config.depth);
    let mut specs = Vec::with_capacity(names.len());
    let mut names = names.into_iter();
    let mut push = |kind, shape| specs.push((names.next().expect("name per layer"), kind, shape));
    let mut cin = config.in_channels;
    for level in 0..=config.depth {
        let c = config.channels(level);
        push(LayerKind::Conv, [c, cin, 3, 3]);
        push(LayerKind::Conv, [c, c, 3, 3]);
        cin = c;
    }
    for level in (0..config.depth).rev() {
        let c = config.channels(level);
        push(LayerKind::UpConv, [2 * c, c, 2, 2]);
        push(LayerKind::Conv, [c, 2 * c, 3, 3]);
        push(LayerKind::Conv, [c, c, 3, 3]);
    }
    push(
        LayerKind::Head,
        [config.out_channels, config.base_channels, 1, 1],
    );
    specs
}

impl QuantUNet {
    /// Builds the network with Kaiming-normal kernels (fan-in scaled) and
    /// zero biases, deterministically from `seed`.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = layer_specs(&config)
            .into_iter()
            .enumerate()
            .map(|(idx, (name, kind, shape))| {
                let fan_in = shape[1] * shape[2] * shape[3];
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(idx as u64);
                let weight = Tensor::from_fn(shape, |_| normal.sample(&mut rng) as f32);
                let bias_len = match kind {
                    LayerKind::UpConv => shape[1],
                    _ => shape[0],
                };
                let act = match kind {
                    LayerKind::Conv => Some(ActQuantState::unsigned()),
                    LayerKind::UpConv => Some(ActQuantState::signed()),
                    LayerKind::Head => None,
                };
                QuantLayer {
                    name,
                    kind,
                    weight,
                    bias: Tensor::zeros([bias_len]),
                    quant: QuantParams::new(config.init_bitwidth),
                    act,
                }
            })
            .collect();
        Ok(Self {
            config,
            input_act: ActQuantState::unsigned(),
            layers,
        })
    }

    pub fn quant_layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(QuantLayer::param_count).sum()
    }

    pub fn quant_params(&self) -> Vec<QuantParams> {
        self.layers.iter().map(|l| l.quant).collect()
    }

    pub fn avg_bitwidth(&self) -> Result<f64> {
        crate::quant::avg_bitwidth(&self.quant_params())
    }

    /// Freezes (eval/export) or unfreezes (training) every activation state.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.input_act.frozen = frozen;
        for act in self.layers.iter_mut().filter_map(|l| l.act.as_mut()) {
            act.frozen = frozen;
        }
    }

    pub fn act_states(&self) -> impl Iterator<Item = &ActQuantState> {
        std::iter::once(&self.input_act).chain(self.layers.iter().filter_map(|l| l.act.as_ref()))
    }

    pub fn is_frozen(&self) -> bool {
        self.act_states().all(|a| a.frozen)
    }

    pub fn is_calibrated(&self) -> bool {
        self.act_states().all(|a| a.initialized)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return shape_err(format!("expected [N, C, H, W] input, got {shape:?}"));
        };
        let m = self.config.spatial_multiple();
        if *c != self.config.in_channels {
            return shape_err(format!(
                "input has {c} channels, model expects {}",
                self.config.in_channels
            ));
        }
        if h % m != 0 || w % m != 0 || *h == 0 || *w == 0 {
            return shape_err(format!("input {h}x{w} must be a non-zero multiple of {m}"));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. With `training` set, activation
    /// statistics of unfrozen states are updated from this batch first.
    pub fn forward<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        training: bool,
    ) -> Result<ForwardOutput> {
        self.check_input(tape.value(x).shape())?;
        let quantized = self.config.quantized;
        let act_bits = self.config.act_bitwidth;
        let mut params = ParamVars {
            weights: Vec::with_capacity(self.layers.len()),
            biases: Vec::with_capacity(self.layers.len()),
            bits: Vec::new(),
        };
        for layer in &self.layers {
            params.weights.push(tape.param(layer.weight.cast()));
            params.biases.push(tape.param(layer.bias.cast()));
            if quantized {
                params
                    .bits
                    .push(tape.param(Tensor::scalar(T::lit(layer.quant.b_param))));
            }
        }

        let mut cur = if quantized {
            if training {
                self.input_act.observe_tensor(tape.value(x));
            }
            let meta = self.input_act.meta(act_bits);
            Act {
                var: tape.fake_quant_act(x, meta),
                meta: Some(meta),
            }
        } else {
            Act { var: x, meta: None }
        };

        let depth = self.config.depth;
        let mut idx = 0;
        let mut skips = Vec::with_capacity(depth);
        for level in 0..=depth {
            cur = self.layer(tape, &params, idx, cur, training)?;
            cur = self.layer(tape, &params, idx + 1, cur, training)?;
            idx += 2;
            if level < depth {
                skips.push(cur);
                cur = Act {
                    var: tape.maxpool2d(cur.var)?,
                    meta: cur.meta,
                };
            }
        }
        for _ in 0..depth {
            let up = self.layer(tape, &params, idx, cur, training)?;
            let skip = skips.pop().expect("one skip per level");
            cur = concat(tape, up, skip)?;
            cur = self.layer(tape, &params, idx + 1, cur, training)?;
            cur = self.layer(tape, &params, idx + 2, cur, training)?;
            idx += 3;
        }
        let logits = self.layer(tape, &params, idx, cur, training)?.var;
        let output = tape.sigmoid(logits);
        Ok(ForwardOutput {
            output,
            logits,
            params,
        })
    }

    fn layer<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamVars,
        idx: usize,
        input: Act,
        training: bool,
    ) -> Result<Act> {
        let quantized = self.config.quantized;
        let act_bits = self.config.act_bitwidth;
        let layer = &mut self.layers[idx];
        let (w, b) = if quantized {
            let (wq, w_meta) =
                tape.fake_quant_weight_meta(params.weights[idx], params.bits[idx])?;
            let s_x = input
                .meta
                .expect("quantized activations carry a grid")
                .scale;
            let bq = tape.fake_quant_bias(params.biases[idx], s_x * w_meta.scale);
            (wq, bq)
        } else {
            (params.weights[idx], params.biases[idx])
        };
        let y = match layer.kind {
            LayerKind::Conv => {
                let y = tape.conv2d(input.var, w, b, 1)?;
                tape.relu(y)
            }
            LayerKind::UpConv => tape.conv_transpose2d(input.var, w, b)?,
            LayerKind::Head => {
                return Ok(Act {
                    var: tape.conv2d(input.var, w, b, 0)?,
                    meta: None,
                })
            }
        };
        if !quantized {
            return Ok(Act { var: y, meta: None });
        }
        let state = layer
            .act
            .as_mut()
            .expect("conv layers carry activation state");
        if training {
            state.observe_tensor(tape.value(y));
        }
        let meta = state.meta(act_bits);
        Ok(Act {
            var: tape.fake_quant_act(y, meta),
            meta: Some(meta),
        })
    }

    /// Eval-mode forward of a batch in precision `T`; returns probabilities.
    pub fn predict<T: Scalar>(&mut self, x: &Tensor<f32>) -> Result<Tensor<T>> {
        let mut tape = Tape::<T>::new();
        let xv = tape.constant(x.cast());
        let out = self.forward(&mut tape, xv, false)?;
        Ok(tape.value(out.output).clone())
    }
}

/// Concatenates `[up, skip]`; in quantized mode both branches are first
/// brought onto the coarser of the two grids.
fn concat<T: Scalar>(tape: &mut Tape<T>, up: Act, skip: Act) -> Result<Act> {
    let (Some(mu), Some(ms)) = (up.meta, skip.meta) else {
        return Ok(Act {
            var: tape.concat_channels(up.var, skip.var)?,
            meta: None,
        });
    };
    let scale = mu.scale.max(ms.scale);
    let mut align = |a: Act, m: QuantMeta| {
        if m.scale == scale {
            a.var
        } else {
            tape.fake_quant_act(a.var, rescaled_meta(&m, scale))
        }
    };
    let u = align(up, mu);
    let s = align(skip, ms);
    let var = tape.concat_channels(u, s)?;
    Ok(Act {
        var,
        meta: Some(QuantMeta {
            scale,
            range: scale * ms.q_max as f64,
            q_min: mu.q_min,
            q_max: ms.q_max,
            b_eff: ms.b_eff,
            signed: true,
        }),
    })
}
