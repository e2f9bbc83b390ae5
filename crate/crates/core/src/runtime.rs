//! Integer-only inference for exported models.
//!
//! Activations are carried as integer levels on per-tensor grids. Every
//! convolution multiplies integer levels into 64-bit accumulators that start
//! from the 32-bit bias level; the accumulator is requantized to the next
//! grid with a single real multiply `s_x * s_w / s_y` and round-half-even.
//! Only the head output is dequantized, for the final sigmoid.
//!
//! Model file layout (integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `QUNT` |
//! | 4 | u32 format version |
//! | 8 | u64 manifest length `n` |
//! | n | UTF-8 JSON manifest ([`IntManifest`]) |
//! | rest | packed weight blob |
//!
//! Each layer's weights occupy `ceil(count * bits / 8)` bytes starting at its
//! manifest `offset` (byte aligned), packed as in [`crate::pack`].

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{shape_err, Error, Result};
use crate::graph::bias_level;
use crate::model::{layer_specs, LayerKind, QuantUNet, UNetConfig};
use crate::ops::sigmoid_scalar;
use crate::pack::{pack_bits, packed_len, unpack_bits};
use crate::quant::{quantize_weight_ints, round_half_even, QuantMeta};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"QUNT";
pub const MODEL_VERSION: u32 = 1;

/// An integer activation grid: real value = `scale * level`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActGrid {
    pub scale: f64,
    pub q_min: i64,
    pub q_max: i64,
}

impl From<QuantMeta> for ActGrid {
    fn from(m: QuantMeta) -> Self {
        Self {
            scale: m.scale,
            q_min: m.q_min,
            q_max: m.q_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntLayer {
    pub name: String,
    pub kind: LayerKind,
    pub weight_shape: [usize; 4],
    pub bits: u32,
    /// Weight step `s_w`.
    pub w_scale: f64,
    /// Scale of the incoming activation `s_x`.
    pub in_scale: f64,
    /// Output grid; `None` for the head, whose output is dequantized.
    pub out: Option<ActGrid>,
    /// Bias levels at scale `s_x * s_w`.
    pub bias: Vec<i32>,
    pub offset: usize,
    pub len: usize,
    #[serde(skip)]
    pub weights: Vec<i32>,
}

impl IntLayer {
    pub fn weight_count(&self) -> usize {
        self.weight_shape.iter().product()
    }

    fn q_w(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntManifest {
    pub version: u32,
    pub config: UNetConfig,
    pub input: ActGrid,
    pub layers: Vec<IntLayer>,
    pub blob_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntModel {
    pub manifest: IntManifest,
    pub blob: Vec<u8>,
}

/// `clamp(round_half_even(acc * multiplier), q_min, q_max)`.
#[inline]
pub fn requantize(acc: i64, multiplier: f64, q_min: i64, q_max: i64) -> i64 {
    (round_half_even(acc as f64 * multiplier) as i64).clamp(q_min, q_max)
}

fn export_err(msg: impl Into<String>) -> Error {
    Error::Export(msg.into())
}

/// Integer activation tensor `[N, C, H, W]` on grid `grid`.
#[derive(Debug, Clone)]
struct IntAct {
    shape: [usize; 4],
    data: Vec<i64>,
    grid: ActGrid,
}

/// Exports a trained model. Activation states must be frozen; states that
/// never saw data are set from `calibration` (run in eval order through a
/// copy of the model) and export fails if none is given.
pub fn export_int_model(model: &QuantUNet, calibration: Option<&Tensor<f32>>) -> Result<IntModel> {
    if !model.config.quantized {
        return Err(export_err("model is not in quantized mode"));
    }
    if !model.is_frozen() {
        return Err(export_err("activation statistics are not frozen"));
    }
    let mut model = model.clone();
    if !model.is_calibrated() {
        let batch = calibration.ok_or_else(|| {
            export_err("activation scales were never observed and no calibration batch was given")
        })?;
        let mut states: Vec<_> = std::iter::once(&mut model.input_act)
            .chain(model.layers.iter_mut().filter_map(|l| l.act.as_mut()))
            .collect();
        for s in states.iter_mut() {
            s.frozen = s.initialized;
        }
        let mut tape = crate::graph::Tape::<f64>::new();
        let x = tape.constant(batch.cast());
        model.forward(&mut tape, x, true)?;
        model.set_frozen(true);
    }

    let act_bits = model.config.act_bitwidth;
    let grid_of = |m: &QuantUNet, idx: usize| -> ActGrid {
        m.layers[idx]
            .act
            .expect("non-head layers carry activation state")
            .meta(act_bits)
            .into()
    };
    let input: ActGrid = model.input_act.meta(act_bits).into();

    // Walk the wiring once to find each layer's input scale.
    let depth = model.config.depth;
    let mut in_scales = vec![0.0; model.layers.len()];
    let mut cur = input;
    let mut skips = Vec::new();
    let mut idx = 0;
    for level in 0..=depth {
        in_scales[idx] = cur.scale;
        cur = grid_of(&model, idx);
        in_scales[idx + 1] = cur.scale;
        cur = grid_of(&model, idx + 1);
        idx += 2;
        if level < depth {
            skips.push(cur);
        }
    }
    for _ in 0..depth {
        in_scales[idx] = cur.scale;
        let up = grid_of(&model, idx);
        let skip = skips.pop().expect("one skip per level");
        let scale = up.scale.max(skip.scale);
        in_scales[idx + 1] = scale;
        cur = grid_of(&model, idx + 1);
        in_scales[idx + 2] = cur.scale;
        cur = grid_of(&model, idx + 2);
        idx += 3;
    }
    in_scales[idx] = cur.scale;

    let mut layers = Vec::with_capacity(model.layers.len());
    let mut blob = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        let (ints, meta) = quantize_weight_ints(&l.weight.cast::<f64>(), &l.quant);
        let s_x = in_scales[i];
        let acc_scale = s_x * meta.scale;
        let bias = l
            .bias
            .data()
            .iter()
            .map(|&b| bias_level(b as f64, acc_scale))
            .collect();
        let packed = pack_bits(&ints, meta.b_eff)?;
        let shape: [usize; 4] = l
            .weight
            .shape()
            .try_into()
            .map_err(|_| export_err(format!("{}: weight is not 4-d", l.name)))?;
        layers.push(IntLayer {
            name: l.name.clone(),
            kind: l.kind,
            weight_shape: shape,
            bits: meta.b_eff,
            w_scale: meta.scale,
            in_scale: s_x,
            out: l.act.map(|a| a.meta(act_bits).into()),
            bias,
            offset: blob.len(),
            len: packed.len(),
            weights: ints,
        });
        blob.extend_from_slice(&packed);
    }
    let m = IntModel {
        manifest: IntManifest {
            version: MODEL_VERSION,
            config: model.config.clone(),
            input,
            layers,
            blob_len: blob.len(),
        },
        blob,
    };
    m.check_accumulators()?;
    Ok(m)
}

impl IntModel {
    /// Worst-case accumulator magnitude per layer must fit in 64 bits.
    pub fn check_accumulators(&self) -> Result<()> {
        let mut act_max = self.manifest.input.q_max.max(-self.manifest.input.q_min) as i128;
        for l in &self.manifest.layers {
            let [a, b, kh, kw] = l.weight_shape;
            let cin = if l.kind == LayerKind::UpConv { a } else { b };
            let bias_max = l.bias.iter().map(|&v| (v as i128).abs()).max().unwrap_or(0);
            let worst = (cin * kh * kw) as i128 * act_max.max(255) * l.q_w() as i128 + bias_max;
            if worst > i64::MAX as i128 {
                return Err(export_err(format!(
                    "{}: accumulator may overflow 64 bits",
                    l.name
                )));
            }
            if let Some(g) = l.out {
                act_max = act_max.max(g.q_max.max(-g.q_min) as i128);
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let json =
            serde_json::to_vec_pretty(&self.manifest).map_err(|e| export_err(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + self.blob.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.blob);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |field: &str, message: String| Error::ModelFile {
            field: field.into(),
            message,
        };
        if bytes.len() < 16 {
            return Err(err("header", format!("truncated: {} bytes", bytes.len())));
        }
        if &bytes[..4] != MODEL_MAGIC {
            return Err(err("magic", "not a QUNT model file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != MODEL_VERSION {
            return Err(err("version", format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| err("manifest", "truncated".into()))?;
        let mut manifest: IntManifest =
            serde_json::from_slice(json).map_err(|e| err("manifest", e.to_string()))?;
        let blob = bytes[16 + len..].to_vec();
        if blob.len() != manifest.blob_len {
            return Err(err(
                "blob",
                format!("expected {} bytes, found {}", manifest.blob_len, blob.len()),
            ));
        }
        manifest.config.validate()?;
        let specs = layer_specs(&manifest.config);
        if specs.len() != manifest.layers.len() {
            return Err(err("layers", format!("expected {} layers", specs.len())));
        }
        for (i, (l, (name, kind, shape))) in manifest.layers.iter_mut().zip(&specs).enumerate() {
            if &l.name != name || l.kind != *kind || &l.weight_shape != shape {
                return Err(err(
                    &format!("layers[{i}]"),
                    format!("does not match the {name} layer"),
                ));
            }
            let field = blob
                .get(l.offset..l.offset + l.len)
                .filter(|f| f.len() == packed_len(l.weight_count(), l.bits))
                .ok_or_else(|| err(&format!("layers[{i}].offset"), "field outside blob".into()))?;
            l.weights = unpack_bits(field, l.bits, l.weight_count())?;
            let q = l.q_w();
            if l.weights.iter().any(|&w| (w as i64).abs() > q) {
                return Err(err(
                    &format!("layers[{i}].weights"),
                    "value outside grid".into(),
                ));
            }
            let bias_len = if l.kind == LayerKind::UpConv {
                shape[1]
            } else {
                shape[0]
            };
            if l.bias.len() != bias_len {
                return Err(err(&format!("layers[{i}].bias"), "wrong length".into()));
            }
            if !(l.w_scale > 0.0 && l.in_scale > 0.0 && l.out.is_none_or(|g| g.scale > 0.0)) {
                return Err(err(
                    &format!("layers[{i}]"),
                    "scales must be positive".into(),
                ));
            }
        }
        let m = Self { manifest, blob };
        m.check_accumulators()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Integer-only forward; returns probabilities `[N, out, H, W]`.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f64>> {
        let cfg = &self.manifest.config;
        let (n, c, h, w) = x.dims4()?;
        let m = cfg.spatial_multiple();
        if c != cfg.in_channels || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return shape_err(format!(
                "input [{n}, {c}, {h}, {w}] does not fit a model with {} input channels and spatial multiple {m}",
                cfg.in_channels
            ));
        }
        let input = self.manifest.input;
        let mut cur = IntAct {
            shape: [n, c, h, w],
            data: x
                .data()
                .iter()
                .map(|&v| {
                    (round_half_even(v as f64 / input.scale) as i64).clamp(input.q_min, input.q_max)
                })
                .collect(),
            grid: input,
        };
        let layers = &self.manifest.layers;
        let mut idx = 0;
        let mut skips = Vec::with_capacity(cfg.depth);
        for level in 0..=cfg.depth {
            cur = conv_layer(&layers[idx], &cur, 1)?;
            cur = conv_layer(&layers[idx + 1], &cur, 1)?;
            idx += 2;
            if level < cfg.depth {
                skips.push(cur.clone());
                cur = maxpool_int(&cur)?;
            }
        }
        for _ in 0..cfg.depth {
            let up = upconv_layer(&layers[idx], &cur)?;
            let skip = skips.pop().expect("one skip per level");
            cur = concat_int(&up, &skip, layers[idx + 1].in_scale)?;
            cur = conv_layer(&layers[idx + 1], &cur, 1)?;
            cur = conv_layer(&layers[idx + 2], &cur, 1)?;
            idx += 3;
        }
        let head = &layers[idx];
        let (acc, shape) = conv_acc(head, &cur, 0)?;
        let s = head.in_scale * head.w_scale;
        Tensor::new(
            shape,
            acc.into_iter()
                .map(|a| sigmoid_scalar(a as f64 * s))
                .collect(),
        )
    }

    pub fn size_report(&self) -> SizeReport {
        let layers: Vec<(usize, u32)> = self
            .manifest
            .layers
            .iter()
            .map(|l| (l.weight_count(), l.bits))
            .collect();
        let biases = self.manifest.layers.iter().map(|l| l.bias.len()).sum();
        let mut r = SizeReport::from_layers(&layers, biases);
        r.packed_bytes = Some(self.blob.len());
        r
    }
}

/// Weight-storage comparison against a 32-bit float model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub weight_params: usize,
    pub bias_params: usize,
    /// `sum(params_l * bits_l)` over weight tensors.
    pub quantized_bits: u64,
    /// Biases at 32 bits each, reported separately.
    pub bias_bits: u64,
    pub float32_bits: u64,
    /// `float32_bits / quantized_bits` over weights.
    pub ratio: f64,
    /// Parameter-weighted mean weight bitwidth.
    pub avg_bitwidth: f64,
    pub packed_bytes: Option<usize>,
}

impl SizeReport {
    /// From `(weight count, bits)` per layer plus the total bias count.
    pub fn from_layers(layers: &[(usize, u32)], bias_params: usize) -> Self {
        let weight_params: usize = layers.iter().map(|l| l.0).sum();
        let quantized_bits: u64 = layers.iter().map(|&(n, b)| n as u64 * b as u64).sum();
        let float32_bits = 32 * weight_params as u64;
        Self {
            weight_params,
            bias_params,
            quantized_bits,
            bias_bits: 32 * bias_params as u64,
            float32_bits,
            ratio: float32_bits as f64 / quantized_bits as f64,
            avg_bitwidth: quantized_bits as f64 / weight_params as f64,
            packed_bytes: None,
        }
    }
}

/// `[n, c, h, w]` im2col for a stride-1 square kernel with zero padding.
fn im2col(x: &[i64], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<i64> {
    let hw = h * w;
    let mut cols = vec![0i64; c * k * k * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[y * w + xo] = x[(ci * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Integer convolution accumulators (bias included) and output shape.
fn conv_acc(l: &IntLayer, x: &IntAct, pad: usize) -> Result<(Vec<i64>, [usize; 4])> {
    let [n, c, h, w] = x.shape;
    let [co, ci, k, _] = l.weight_shape;
    if ci != c {
        return shape_err(format!("{}: expected {ci} input channels, got {c}", l.name));
    }
    let (hw, kk) = (h * w, ci * k * k);
    let weights: Vec<i64> = l.weights.iter().map(|&v| v as i64).collect();
    let mut out = vec![0i64; n * co * hw];
    out.par_chunks_mut(co * hw)
        .enumerate()
        .for_each(|(s, dst)| {
            let xs = &x.data[s * c * hw..(s + 1) * c * hw];
            let cols = im2col(xs, c, h, w, k, pad);
            for o in 0..co {
                let acc = &mut dst[o * hw..(o + 1) * hw];
                acc.fill(l.bias[o] as i64);
                for r in 0..kk {
                    let wv = weights[o * kk + r];
                    if wv == 0 {
                        continue;
                    }
                    for (a, &v) in acc.iter_mut().zip(&cols[r * hw..(r + 1) * hw]) {
                        *a += wv * v;
                    }
                }
            }
        });
    Ok((out, [n, co, h, w]))
}

fn requantize_all(acc: Vec<i64>, l: &IntLayer, shape: [usize; 4]) -> IntAct {
    let grid = l.out.expect("only the head lacks an output grid");
    let mult = l.in_scale * l.w_scale / grid.scale;
    IntAct {
        shape,
        data: acc
            .into_iter()
            .map(|a| requantize(a, mult, grid.q_min, grid.q_max))
            .collect(),
        grid,
    }
}

fn conv_layer(l: &IntLayer, x: &IntAct, pad: usize) -> Result<IntAct> {
    let (acc, shape) = conv_acc(l, x, pad)?;
    Ok(requantize_all(acc, l, shape))
}

/// 2x2 stride-2 transposed convolution, weight `[ci, co, 2, 2]`.
fn upconv_layer(l: &IntLayer, x: &IntAct) -> Result<IntAct> {
    let [n, c, h, w] = x.shape;
    let [ci, co, _, _] = l.weight_shape;
    if ci != c {
        return shape_err(format!("{}: expected {ci} input channels, got {c}", l.name));
    }
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0i64; n * co * oh * ow];
    out.par_chunks_mut(co * oh * ow)
        .enumerate()
        .for_each(|(s, dst)| {
            for o in 0..co {
                dst[o * oh * ow..(o + 1) * oh * ow].fill(l.bias[o] as i64);
            }
            for i in 0..ci {
                let src = &x.data[(s * c + i) * h * w..(s * c + i + 1) * h * w];
                for o in 0..co {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let wv = l.weights[((i * co + o) * 2 + dy) * 2 + dx] as i64;
                            if wv == 0 {
                                continue;
                            }
                            for y in 0..h {
                                let row = &mut dst[(o * oh + 2 * y + dy) * ow..];
                                for xx in 0..w {
                                    row[2 * xx + dx] += wv * src[y * w + xx];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(requantize_all(out, l, [n, co, oh, ow]))
}

fn maxpool_int(x: &IntAct) -> Result<IntAct> {
    let [n, c, h, w] = x.shape;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("maxpool needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut data = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data.chunks(h * w) {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| plane[(2 * y + dy) * w + 2 * xx + dx];
                data.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    Ok(IntAct {
        shape: [n, c, oh, ow],
        data,
        grid: x.grid,
    })
}

/// Moves levels from `x.grid` to step `scale`, keeping the level bounds.
fn rescale(x: &IntAct, scale: f64) -> IntAct {
    if x.grid.scale == scale {
        return x.clone();
    }
    let ratio = x.grid.scale / scale;
    IntAct {
        shape: x.shape,
        data: x
            .data
            .iter()
            .map(|&v| requantize(v, ratio, x.grid.q_min, x.grid.q_max))
            .collect(),
        grid: ActGrid { scale, ..x.grid },
    }
}

fn concat_int(up: &IntAct, skip: &IntAct, scale: f64) -> Result<IntAct> {
    let [n, ca, h, w] = up.shape;
    let [n2, cb, h2, w2] = skip.shape;
    if (n, h, w) != (n2, h2, w2) {
        return shape_err(format!(
            "cannot concat {:?} with {:?}",
            up.shape, skip.shape
        ));
    }
    let (u, s) = (rescale(up, scale), rescale(skip, scale));
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * hw);
    for i in 0..n {
        data.extend_from_slice(&u.data[i * ca * hw..(i + 1) * ca * hw]);
        data.extend_from_slice(&s.data[i * cb * hw..(i + 1) * cb * hw]);
    }
    Ok(IntAct {
        shape: [n, ca + cb, h, w],
        data,
        grid: ActGrid {
            scale,
            q_min: u.grid.q_min.min(s.grid.q_min),
            q_max: u.grid.q_max.max(s.grid.q_max),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requantize_examples() {
        assert_eq!(requantize(1000, 0.001, 0, 255), 1);
        assert_eq!(requantize(5, 0.5, 0, 255), 2);
        assert_eq!(requantize(300, 1.0, 0, 255), 255);
        assert_eq!(requantize(-7, 1.0, 0, 255), 0);
        assert_eq!(requantize(-300, 1.0, -127, 127), -127);
    }

    #[test]
    fn size_ratios() {
        let r8 = SizeReport::from_layers(&[(1000, 8), (24, 8)], 10);
        assert_eq!(r8.ratio, 4.0);
        let r2 = SizeReport::from_layers(&[(1000, 2)], 0);
        assert_eq!(r2.ratio, 16.0);
        let mixed = SizeReport::from_layers(&[(76, 4), (24, 5)], 0);
        assert!((mixed.avg_bitwidth - 4.24).abs() < 1e-12);
        assert!((mixed.ratio - 32.0 / 4.24).abs() < 1e-12);
    }

    fn calibrated(base: usize, seed: u64) -> (QuantUNet, Tensor<f32>) {
        let mut m = QuantUNet::build(UNetConfig::with_base(base), seed).unwrap();
        let x = Tensor::<f32>::from_fn([2, 1, 32, 32], |i| ((i * 7919 + 13) % 256) as f32 / 255.0);
        let mut tape = crate::graph::Tape::<f64>::new();
        let xv = tape.constant(x.cast());
        m.forward(&mut tape, xv, true).unwrap();
        m.set_frozen(true);
        (m, x)
    }

    #[test]
    fn unfrozen_model_rejected() {
        let m = QuantUNet::build(UNetConfig::with_base(2), 0).unwrap();
        assert!(matches!(export_int_model(&m, None), Err(Error::Export(_))));
    }

    #[test]
    fn uncalibrated_needs_batch() {
        let mut m = QuantUNet::build(UNetConfig::with_base(2), 0).unwrap();
        m.set_frozen(true);
        assert!(matches!(export_int_model(&m, None), Err(Error::Export(_))));
        let x = Tensor::<f32>::full([1, 1, 16, 16], 0.5);
        let im = export_int_model(&m, Some(&x)).unwrap();
        assert_eq!(im.manifest.layers.len(), 23);
    }

    #[test]
    fn file_round_trip() {
        let (m, _) = calibrated(2, 1);
        let im = export_int_model(&m, None).unwrap();
        let back = IntModel::decode(&im.encode().unwrap()).unwrap();
        assert_eq!(back, im);
        let bytes = im.encode().unwrap();
        assert!(IntModel::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn matches_float_quantized_forward() {
        let (mut m, x) = calibrated(4, 2);
        let im = export_int_model(&m, None).unwrap();
        let a = im.forward(&x).unwrap();
        let b = m.predict::<f64>(&x).unwrap();
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-3, "{diff}");
    }
}
