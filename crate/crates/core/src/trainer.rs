//! Training and validation loops, Adam, and the per-epoch logs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{batch_iter, sequential_batches, Batch, Sample};
use crate::error::{contract_err, Error, Result};
use crate::graph::Tape;
use crate::loss::{self, total_loss, LossBreakdown, DEFAULT_LAMBDA, DEFAULT_SMOOTH};
use crate::model::QuantUNet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate for the bitwidth parameters; `None` shares `lr`.
    pub bit_lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
    pub smooth: f64,
    pub seed: u64,
    pub train_weights: bool,
    pub train_bits: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr: 1e-3,
            bit_lr: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: DEFAULT_LAMBDA,
            smooth: DEFAULT_SMOOTH,
            seed: 0,
            train_weights: true,
            train_bits: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.lr > 0.0) || self.bit_lr.is_some_and(|l| !(l > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if !(self.smooth > 0.0) {
            return bad("smooth must be positive".into());
        }
        Ok(())
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub val_accuracy: f64,
    pub avg_bitwidth: f64,
}

/// Per-epoch layer bitwidths and training loss components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    /// `(layer name, clamped continuous bitwidth)` in layer order.
    pub layers: Vec<(String, f64)>,
    pub train: LossBreakdown,
}

pub type BitwidthTrace = Vec<TraceEntry>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationMetrics {
    pub loss: LossBreakdown,
    pub dice: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: QuantUNet,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub history: Vec<EpochMetrics>,
    pub trace: BitwidthTrace,
    /// `(epoch, val_dice)` of every checkpoint save, in order.
    pub saves: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Adam state for every weight, bias, and bitwidth parameter of a model.
#[derive(Debug, Clone)]
pub struct Adam {
    step: u64,
    weights: Vec<Moments>,
    biases: Vec<Moments>,
    bits: Vec<Moments>,
}

impl Adam {
    pub fn new(model: &QuantUNet) -> Self {
        Self {
            step: 0,
            weights: model
                .layers
                .iter()
                .map(|l| Moments::new(l.weight.len()))
                .collect(),
            biases: model
                .layers
                .iter()
                .map(|l| Moments::new(l.bias.len()))
                .collect(),
            bits: model.layers.iter().map(|_| Moments::new(1)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

struct StepRule {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
}

impl StepRule {
    fn apply(
        &self,
        st: &mut Moments,
        grad: impl Iterator<Item = f64>,
        mut update: impl FnMut(usize, f64),
    ) {
        for (i, g) in grad.enumerate() {
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
            st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = st.m[i] / self.bc1;
            let v_hat = st.v[i] / self.bc2;
            update(i, self.lr * m_hat / (v_hat.sqrt() + self.eps));
        }
    }
}

fn check_finite(b: &LossBreakdown, epoch: usize, batch: usize) -> Result<()> {
    if b.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite {
        epoch,
        batch,
        detail: format!("bce={} dice={} bitwidth={}", b.bce, b.dice, b.bitwidth),
    })
}

/// One forward/backward pass and optimizer step; returns the batch losses.
pub fn train_step(
    model: &mut QuantUNet,
    opt: &mut Adam,
    batch: &Batch,
    config: &TrainConfig,
    epoch: usize,
    batch_index: usize,
) -> Result<LossBreakdown> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(batch.images.clone());
    let y = tape.constant(batch.masks.clone());
    let out = model.forward(&mut tape, x, true)?;
    let (loss, breakdown) = total_loss(
        &mut tape,
        out.output,
        y,
        &out.params.bits,
        config.lambda,
        config.smooth,
    )?;
    check_finite(&breakdown, epoch, batch_index)?;
    let grads = tape.backward(loss)?;

    let grad_of = |v| grads.get(v).map(Tensor::data);
    let nonfinite = out
        .params
        .weights
        .iter()
        .chain(&out.params.biases)
        .chain(&out.params.bits)
        .any(|&v| grad_of(v).is_some_and(|g| g.iter().any(|x| !x.is_finite())));
    if nonfinite {
        return Err(Error::NonFinite {
            epoch,
            batch: batch_index,
            detail: "non-finite gradient".into(),
        });
    }

    opt.step += 1;
    let t = opt.step as i32;
    let rule = |lr| StepRule {
        lr,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.eps,
        bc1: 1.0 - config.beta1.powi(t),
        bc2: 1.0 - config.beta2.powi(t),
    };
    let weight_rule = rule(config.lr);
    let bit_rule = rule(config.bit_lr.unwrap_or(config.lr));

    for (idx, layer) in model.layers.iter_mut().enumerate() {
        if config.train_weights {
            if let Some(g) = grad_of(out.params.weights[idx]) {
                let w = layer.weight.data_mut();
                weight_rule.apply(
                    &mut opt.weights[idx],
                    g.iter().map(|&x| x as f64),
                    |i, d| w[i] = (w[i] as f64 - d) as f32,
                );
            }
            if let Some(g) = grad_of(out.params.biases[idx]) {
                let b = layer.bias.data_mut();
                weight_rule.apply(&mut opt.biases[idx], g.iter().map(|&x| x as f64), |i, d| {
                    b[i] = (b[i] as f64 - d) as f32
                });
            }
        }
        if config.train_bits {
            if let Some(g) = out.params.bits.get(idx).and_then(|&v| grad_of(v)) {
                let q = &mut layer.quant;
                bit_rule.apply(&mut opt.bits[idx], g.iter().map(|&x| x as f64), |_, d| {
                    q.b_param -= d
                });
            }
        }
    }
    Ok(breakdown)
}

/// One pass over `train` in the epoch's shuffled order; returns the
/// batch-size-weighted mean losses. `epoch` is 1-based.
pub fn train_epoch(
    model: &mut QuantUNet,
    opt: &mut Adam,
    train: &[Sample],
    config: &TrainConfig,
    epoch: usize,
) -> Result<LossBreakdown> {
    model.set_frozen(false);
    let mut parts = Vec::new();
    for (i, batch) in batch_iter(train, config.batch_size, config.seed, epoch as u64)?.enumerate() {
        let batch = batch?;
        let b = train_step(model, opt, &batch, config, epoch, i)?;
        parts.push((b, batch.len() as f64));
    }
    LossBreakdown::weighted_mean(&parts)
        .ok_or_else(|| Error::Contract("empty training split".into()))
}

/// Evaluates with frozen activation statistics. Dice and accuracy use
/// thresholded masks, computed per batch and averaged weighted by batch size.
pub fn validate(
    model: &mut QuantUNet,
    val: &[Sample],
    config: &TrainConfig,
) -> Result<ValidationMetrics> {
    if val.is_empty() {
        return contract_err("validation split is empty");
    }
    let was_frozen = model.is_frozen();
    model.set_frozen(true);
    let result = (|| {
        let bits = if model.config.quantized {
            model.avg_bitwidth()?
        } else {
            0.0
        };
        let mut parts = Vec::new();
        let (mut dice, mut acc, mut n) = (0.0, 0.0, 0.0);
        for batch in sequential_batches(val, config.batch_size)? {
            let pred = model.predict::<f32>(&batch.images)?;
            let w = batch.len() as f64;
            let mut b = LossBreakdown::new(
                loss::bce_loss(&pred, &batch.masks)?,
                loss::dice_loss(&pred, &batch.masks, config.smooth)?,
                bits,
                config.lambda,
                pred.len(),
            );
            b.smooth = config.smooth;
            parts.push((b, w));
            let mask = loss::threshold(&pred);
            dice += w * loss::dice_coeff(&mask, &batch.masks, config.smooth)?;
            acc += w * loss::pixel_accuracy(&mask, &batch.masks)?;
            n += w;
        }
        Ok(ValidationMetrics {
            loss: LossBreakdown::weighted_mean(&parts).expect("non-empty split"),
            dice: dice / n,
            accuracy: acc / n,
        })
    })();
    model.set_frozen(was_frozen);
    result
}

pub fn layer_bitwidths(model: &QuantUNet) -> Vec<(String, f64)> {
    model
        .layers
        .iter()
        .map(|l| (l.name.clone(), l.quant.clamped()))
        .collect()
}

/// Trains for `config.epochs` epochs, keeping the model with the best
/// validation Dice (strict improvement). When `checkpoint` is given, the
/// best model is saved there on every improvement.
pub fn fit(
    model: &mut QuantUNet,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<FitResult> {
    fit_with(model, train, val, config, checkpoint, |_| {})
}

/// [`fit`] with a callback invoked after each epoch's metrics are final.
pub fn fit_with(
    model: &mut QuantUNet,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return contract_err("fit needs non-empty training and validation splits");
    }
    let mut opt = Adam::new(model);
    let mut history = Vec::with_capacity(config.epochs);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut saves = Vec::new();
    let mut best: Option<(QuantUNet, usize, f64)> = None;

    for epoch in 1..=config.epochs {
        let train_loss = train_epoch(model, &mut opt, train, config, epoch)?;
        let v = validate(model, val, config)?;
        let avg_bitwidth = if model.config.quantized {
            model.avg_bitwidth()?
        } else {
            0.0
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: train_loss.total,
            val_loss: v.loss.total,
            val_dice: v.dice,
            val_accuracy: v.accuracy,
            avg_bitwidth,
        };
        trace.push(TraceEntry {
            epoch,
            layers: layer_bitwidths(model),
            train: train_loss,
        });
        if best.as_ref().is_none_or(|b| v.dice > b.2) {
            let mut snapshot = model.clone();
            snapshot.set_frozen(true);
            if let Some(path) = checkpoint {
                save_checkpoint(&snapshot, path)?;
            }
            saves.push((epoch, v.dice));
            best = Some((snapshot, epoch, v.dice));
        }
        on_epoch(&metrics);
        history.push(metrics);
    }
    model.set_frozen(true);
    let (best, best_epoch, best_val_dice) = best.expect("at least one epoch");
    Ok(FitResult {
        best,
        best_epoch,
        best_val_dice,
        history,
        trace,
        saves,
    })
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_rows(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

pub const METRICS_HEADER: [&str; 6] = [
    "epoch",
    "train_loss",
    "val_loss",
    "val_dice",
    "val_accuracy",
    "avg_bitwidth",
];
pub const LAYER_BITWIDTHS_HEADER: [&str; 3] = ["epoch", "layer", "bitwidth"];
pub const LOSS_COMPONENTS_HEADER: [&str; 4] = ["epoch", "bce", "dice", "bitwidth_term"];

pub fn write_metrics_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    write_rows(
        path,
        &METRICS_HEADER,
        history.iter().map(|m| {
            vec![
                m.epoch.to_string(),
                f4(m.train_loss),
                f4(m.val_loss),
                f4(m.val_dice),
                f4(m.val_accuracy),
                f4(m.avg_bitwidth),
            ]
        }),
    )
}

pub fn write_layer_bitwidths_csv(path: &Path, trace: &[TraceEntry]) -> Result<()> {
    write_rows(
        path,
        &LAYER_BITWIDTHS_HEADER,
        trace.iter().flat_map(|t| {
            t.layers
                .iter()
                .map(move |(name, b)| vec![t.epoch.to_string(), name.clone(), f4(*b)])
        }),
    )
}

pub fn write_loss_components_csv(path: &Path, trace: &[TraceEntry]) -> Result<()> {
    write_rows(
        path,
        &LOSS_COMPONENTS_HEADER,
        trace.iter().map(|t| {
            vec![
                t.epoch.to_string(),
                f4(t.train.bce),
                f4(t.train.dice),
                f4(t.train.bitwidth_term()),
            ]
        }),
    )
}

/// Writes `metrics.csv`, `layer_bitwidths.csv` and `loss_components.csv`.
pub fn write_logs(dir: &Path, fit: &FitResult) -> Result<()> {
    write_metrics_csv(&dir.join("metrics.csv"), &fit.history)?;
    write_layer_bitwidths_csv(&dir.join("layer_bitwidths.csv"), &fit.trace)?;
    write_loss_components_csv(&dir.join("loss_components.csv"), &fit.trace)
}
