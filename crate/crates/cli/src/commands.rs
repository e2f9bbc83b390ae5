use std::path::{Path, PathBuf};

use image::GrayImage;
use thiserror::Error;

use qunet_core::checkpoint::load_checkpoint;
use qunet_core::data::{
    generate_synthetic, image_tensor, load_samples, sequential_batches, stratified_split,
    write_busi_layout, Sample, SplitSpec, SynthConfig,
};
use qunet_core::loss::{self, LossBreakdown};
use qunet_core::runtime::export_int_model;
use qunet_core::trainer::{fit_with, validate, write_logs};
use qunet_core::{IntModel, QuantUNet, Tensor};

use crate::settings::RunConfig;
use crate::SplitName;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] qunet_core::Error),

    #[error("{}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}, line {line}: {message}", .path.display())]
    Csv {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn gen_synth(out: &Path, n: usize, seed: u64, img_size: usize, noise: f64) -> Result<()> {
    let cfg = SynthConfig {
        n_samples: n,
        image_size: img_size,
        noise,
        seed,
        ..SynthConfig::default()
    };
    let samples = generate_synthetic(&cfg)?;
    write_busi_layout(&samples, out)?;
    let text = toml::to_string(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::write(out.join("synth-config.toml"), text)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn load_splits(cfg: &RunConfig) -> Result<qunet_core::data::Splits> {
    let samples = load_samples(cfg.require_data()?, cfg.img_size())?;
    Ok(stratified_split(
        samples,
        &SplitSpec::new(cfg.train_config().seed),
    )?)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    cfg.require_data()?;
    let out = cfg.require_out()?;
    std::fs::create_dir_all(out)?;
    cfg.write_effective(out)?;
    let tc = cfg.train_config();
    tc.validate()?;
    let splits = load_splits(cfg)?;
    let mut model = QuantUNet::build(cfg.unet_config(), tc.seed)?;
    let fit = fit_with(
        &mut model,
        &splits.train,
        &splits.val,
        &tc,
        Some(&out.join("best.ckpt")),
        |m| {
            eprintln!(
                "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_dice {:.4}  val_acc {:.4}  avg_bits {:.4}",
                m.epoch, m.train_loss, m.val_loss, m.val_dice, m.val_accuracy, m.avg_bitwidth
            )
        },
    )?;
    write_logs(out, &fit)?;
    println!(
        "best val_dice {:.4} at epoch {}; checkpoint {}",
        fit.best_val_dice,
        fit.best_epoch,
        out.join("best.ckpt").display()
    );
    Ok(())
}

fn pick(splits: qunet_core::data::Splits, which: SplitName) -> Vec<Sample> {
    match which {
        SplitName::Train => splits.train,
        SplitName::Val => splits.val,
        SplitName::Test => splits.test,
    }
}

pub fn eval(
    checkpoint: Option<&Path>,
    model: Option<&Path>,
    split: SplitName,
    cfg: &RunConfig,
) -> Result<()> {
    let tc = cfg.train_config();
    let samples = pick(load_splits(cfg)?, split);
    let (dice, accuracy, loss) = match (checkpoint, model) {
        (Some(path), _) => {
            let mut m = load_checkpoint(path)?;
            let v = validate(&mut m, &samples, &tc)?;
            (v.dice, v.accuracy, v.loss)
        }
        (None, Some(path)) => {
            let m = IntModel::load(path)?;
            // Exported layers carry integer widths; the regularizer uses their mean.
            let bits = m.size_report().avg_bitwidth;
            let (mut parts, mut dice, mut acc, mut n) = (Vec::new(), 0.0, 0.0, 0.0);
            for batch in sequential_batches(&samples, tc.batch_size)? {
                let pred = m.forward(&batch.images)?;
                let target = batch.masks.cast::<f64>();
                let w = batch.len() as f64;
                parts.push((
                    LossBreakdown::new(
                        loss::bce_loss(&pred, &target)?,
                        loss::dice_loss(&pred, &target, tc.smooth)?,
                        bits,
                        tc.lambda,
                        pred.len(),
                    ),
                    w,
                ));
                let mask = loss::threshold(&pred);
                dice += w * loss::dice_coeff(&mask, &target, tc.smooth)?;
                acc += w * loss::pixel_accuracy(&mask, &target)?;
                n += w;
            }
            let loss = LossBreakdown::weighted_mean(&parts)
                .ok_or_else(|| CliError::Usage("empty split".into()))?;
            (dice / n, acc / n, loss)
        }
        (None, None) => return Err(CliError::Usage("need --checkpoint or --model".into())),
    };
    println!(
        "split={:?} samples={} loss={:.4} bce={:.4} dice_loss={:.4} dice={:.4} accuracy={:.4}",
        split,
        samples.len(),
        loss.total,
        loss.bce,
        loss.dice,
        dice,
        accuracy
    );
    Ok(())
}

pub fn export(checkpoint: &Path, out: &Path, data: Option<&Path>, img_size: usize) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let calibration = match data {
        Some(root) => {
            let samples = load_samples(root, img_size)?;
            let take: Vec<&Tensor<f32>> = samples.iter().take(8).map(|s| &s.image).collect();
            Some(Tensor::stack(&take)?)
        }
        None => None,
    };
    let im = export_int_model(&model, calibration.as_ref())?;
    im.save(out)?;
    let r = im.size_report();
    println!(
        "wrote {}: {} weights, avg {:.4} bits, {} packed bytes, weight size ratio vs f32 {:.4}",
        out.display(),
        r.weight_params,
        r.avg_bitwidth,
        r.packed_bytes.unwrap_or(0),
        r.ratio
    );
    for l in &im.manifest.layers {
        println!("  {:<18} {} bits", l.name, l.bits);
    }
    Ok(())
}

pub fn infer(model: &Path, image_path: &Path, out: &Path, img_size: usize) -> Result<()> {
    let m = IntModel::load(model)?;
    let img = image::open(image_path)
        .map_err(|source| CliError::Image {
            path: image_path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let x = image_tensor(&img, img_size)?.reshape([1, 1, img_size, img_size])?;
    let prob = m.forward(&x)?;
    std::fs::create_dir_all(out)?;
    let size = img_size as u32;
    let to_png = |f: &dyn Fn(f64) -> u8| {
        GrayImage::from_raw(size, size, prob.data().iter().map(|&p| f(p)).collect())
            .expect("buffer matches dimensions")
    };
    let mask = to_png(&|p| if p > loss::MASK_THRESHOLD { 255 } else { 0 });
    let probs = to_png(&|p| (p * 255.0).round().clamp(0.0, 255.0) as u8);
    for (name, img) in [("mask.png", mask), ("prob.png", probs)] {
        let path = out.join(name);
        img.save(&path)
            .map_err(|source| CliError::Image { path, source })?;
    }
    println!(
        "wrote {} and {}",
        out.join("mask.png").display(),
        out.join("prob.png").display()
    );
    Ok(())
}
