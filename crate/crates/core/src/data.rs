//! Dataset ingestion: the breast-ultrasound directory layout, preprocessing,
//! stratified splitting, a synthetic stand-in generator, and batching.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Benign = 0,
    Malignant = 1,
    Normal = 2,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [
        ClassLabel::Benign,
        ClassLabel::Malignant,
        ClassLabel::Normal,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            ClassLabel::Benign => "benign",
            ClassLabel::Malignant => "malignant",
            ClassLabel::Normal => "normal",
        }
    }

    pub fn index(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// One decoded image with its merged binary mask (0/1 per pixel).
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub image: GrayImage,
    pub mask: GrayImage,
    pub label: ClassLabel,
    pub source_id: String,
}

/// A preprocessed image/mask pair, both `[1, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub label: ClassLabel,
    pub source_id: String,
}

fn decode(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_luma8())
}

/// Splits `"<stem>_mask"` / `"<stem>_mask_<n>"` into `<stem>`.
fn mask_owner(stem: &str) -> Option<&str> {
    let pos = stem.rfind("_mask")?;
    let suffix = &stem[pos + "_mask".len()..];
    let ok = suffix.is_empty()
        || suffix
            .strip_prefix('_')
            .is_some_and(|n| !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()));
    ok.then(|| &stem[..pos])
}

fn binarize(img: &GrayImage) -> GrayImage {
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        Luma([(img.get_pixel(x, y)[0] > 127) as u8])
    })
}

/// Pixelwise union of two binary masks.
pub fn mask_union(a: &GrayImage, b: &GrayImage) -> Result<GrayImage> {
    if a.dimensions() != b.dimensions() {
        return contract_err(format!(
            "cannot merge masks of size {:?} and {:?}",
            a.dimensions(),
            b.dimensions()
        ));
    }
    Ok(GrayImage::from_fn(a.width(), a.height(), |x, y| {
        Luma([(a.get_pixel(x, y)[0] != 0 || b.get_pixel(x, y)[0] != 0) as u8])
    }))
}

/// Loads `root/{benign,malignant,normal}/*.png`. Masks named
/// `<stem>_mask.png`, `<stem>_mask_1.png`, … are merged by union; images
/// without a mask get an all-zero mask. Records are sorted by path.
pub fn load_busi(root: &Path) -> Result<Vec<RawRecord>> {
    if !root.is_dir() {
        return Err(Error::Ingestion {
            message: "dataset root is not a directory".into(),
            paths: vec![root.to_path_buf()],
        });
    }
    let mut records = Vec::new();
    let mut offending = Vec::new();
    for label in ClassLabel::ALL {
        let dir = root.join(label.dir_name());
        let Ok(entries) = std::fs::read_dir(&dir) else {
            offending.push(dir);
            continue;
        };
        let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut masks: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
        for entry in entries {
            let path = entry?.path();
            let is_png = path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !is_png {
                continue;
            }
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            match mask_owner(&stem) {
                Some(owner) => masks.entry(owner.to_string()).or_default().push(path),
                None => {
                    images.insert(stem, path);
                }
            }
        }
        if images.is_empty() {
            offending.push(dir);
            continue;
        }
        if let Some(orphan) = masks.keys().find(|k| !images.contains_key(*k)) {
            return Err(Error::Ingestion {
                message: "mask without a matching image".into(),
                paths: masks[orphan].clone(),
            });
        }
        for (stem, path) in images {
            let image = decode(&path)?;
            let mut mask = GrayImage::new(image.width(), image.height());
            if let Some(mask_paths) = masks.get_mut(&stem) {
                mask_paths.sort();
                for mp in mask_paths.iter() {
                    let m = binarize(&decode(mp)?);
                    mask = mask_union(&mask, &m).map_err(|_| Error::Ingestion {
                        message: "mask size differs from image size".into(),
                        paths: vec![mp.clone()],
                    })?;
                }
            }
            records.push(RawRecord {
                image,
                mask,
                label,
                source_id: format!("{}/{stem}", label.dir_name()),
            });
        }
    }
    if !offending.is_empty() {
        return Err(Error::Ingestion {
            message: "missing or empty class directories".into(),
            paths: offending,
        });
    }
    Ok(records)
}

/// Bilinear resize with half-pixel centers and edge clamping. Returns values
/// in the input's units (0..=255), row-major.
pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> Vec<f32> {
    let (in_w, in_h) = (img.width() as usize, img.height() as usize);
    let src = |x: usize, y: usize| img.get_pixel(x as u32, y as u32)[0] as f64;
    let coord = |d: usize, n_in: usize, n_out: usize| {
        let c = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, c - lo as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, in_h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, in_w, out_w);
            let top = src(x0, y0) * (1.0 - fx) + src(x1, y0) * fx;
            let bot = src(x0, y1) * (1.0 - fx) + src(x1, y1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

/// Nearest-neighbour resize (pixel-center sampling).
pub fn resize_nearest(img: &GrayImage, out_w: usize, out_h: usize) -> Vec<u8> {
    let (in_w, in_h) = (img.width() as usize, img.height() as usize);
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let sy = (((y as f64 + 0.5) * in_h as f64 / out_h as f64) as usize).min(in_h - 1);
        for x in 0..out_w {
            let sx = (((x as f64 + 0.5) * in_w as f64 / out_w as f64) as usize).min(in_w - 1);
            out.push(img.get_pixel(sx as u32, sy as u32)[0]);
        }
    }
    out
}

/// Bilinear resize to `[1, size, size]` scaled to `[0, 1]`.
pub fn image_tensor(img: &GrayImage, size: usize) -> Result<Tensor<f32>> {
    if img.width() == 0 || img.height() == 0 {
        return contract_err("zero-sized image");
    }
    if size == 0 {
        return contract_err("target size must be positive");
    }
    let data = resize_bilinear(img, size, size)
        .into_iter()
        .map(|v| v / 255.0)
        .collect();
    Tensor::new([1, size, size], data)
}

/// Resizes to `size x size`, scales the image by 1/255, and re-binarizes
/// the nearest-resized mask at 0.5.
pub fn preprocess(record: &RawRecord, size: usize) -> Result<Sample> {
    if record.image.width() == 0 || record.image.height() == 0 {
        return contract_err(format!("{}: zero-sized image", record.source_id));
    }
    let image = image_tensor(&record.image, size)?;
    let mask: Vec<f32> = resize_nearest(&record.mask, size, size)
        .into_iter()
        .map(|v| if v as f32 >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    Ok(Sample {
        image,
        mask: Tensor::new([1, size, size], mask)?,
        label: record.label,
        source_id: record.source_id.clone(),
    })
}

/// Loads and preprocesses a dataset directory in one step.
pub fn load_samples(root: &Path, size: usize) -> Result<Vec<Sample>> {
    load_busi(root)?
        .iter()
        .map(|r| preprocess(r, size))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
            seed,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// `fraction * n` rounded to the nearest integer, ties down. Rounding both
/// held-out shares this way keeps every split within one sample of its
/// exact share, which flooring does not (flooring both can push up to two
/// extra samples into training).
fn share_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 - 0.5 - 1e-9).ceil().max(0.0) as usize
}

/// Per class: shuffle by seed, take `test·n` for test and `val·n` for
/// validation (each rounded to nearest, ties down), the remainder for
/// training.
pub fn stratified_split(samples: Vec<Sample>, spec: &SplitSpec) -> Result<Splits> {
    let total = spec.train + spec.val + spec.test;
    if (total - 1.0).abs() > 1e-9 || spec.train < 0.0 || spec.val < 0.0 || spec.test < 0.0 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {}/{}/{}",
            spec.train, spec.val, spec.test
        )));
    }
    let mut by_class: BTreeMap<ClassLabel, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.label).or_default().push(s);
    }
    let mut out = Splits::default();
    for (label, mut group) in by_class {
        let n = group.len();
        if n < 3 {
            return Err(Error::Split {
                class: label.to_string(),
                count: n,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(label.index() as u64);
        group.shuffle(&mut rng);
        let n_test = share_count(spec.test, n);
        let n_val = share_count(spec.val, n);
        let mut it = group.into_iter();
        out.test.extend(it.by_ref().take(n_test));
        out.val.extend(it.by_ref().take(n_val));
        out.train.extend(it);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub image_size: usize,
    /// Standard deviation of the additive Gaussian intensity noise.
    pub noise: f64,
    /// Relative weights of benign / malignant / normal samples.
    pub class_mix: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            image_size: 64,
            noise: 0.05,
            // proportions of the public dataset: 437 / 210 / 133 images
            class_mix: [437.0, 210.0, 133.0],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Rotation in radians.
    pub angle: f64,
}

impl Ellipse {
    /// Whether the pixel center `(x + 0.5, y + 0.5)` lies inside.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Rasterizes a binary mask of the union of `blobs`.
pub fn rasterize(size: usize, blobs: &[Ellipse]) -> Vec<f32> {
    let mut mask = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            if blobs.iter().any(|b| b.contains(x, y)) {
                mask[y * size + x] = 1.0;
            }
        }
    }
    mask
}

fn class_counts(n: usize, mix: &[f64; 3]) -> [usize; 3] {
    let total: f64 = mix.iter().sum();
    let mut counts = [0usize; 3];
    let mut rem = [0f64; 3];
    for i in 0..3 {
        let exact = n as f64 * mix[i] / total;
        counts[i] = exact.floor() as usize;
        rem[i] = exact - counts[i] as f64;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Dark noisy backgrounds with 0–2 bright elliptical blobs; the mask is the
/// exact blob support. Benign samples carry one blob, malignant one or two,
/// normal none. Pixel values are multiples of 1/255 so the samples survive a
/// PNG round trip unchanged.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<Sample>> {
    if config.image_size == 0 {
        return contract_err("synthetic image size must be positive");
    }
    if config.class_mix.iter().any(|w| !(*w >= 0.0)) || config.class_mix.iter().sum::<f64>() <= 0.0
    {
        return Err(Error::Config(
            "class_mix weights must be non-negative with a positive sum".into(),
        ));
    }
    let size = config.image_size;
    let sz = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let counts = class_counts(config.n_samples, &config.class_mix);
    let mut labels: Vec<ClassLabel> = ClassLabel::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&l, c)| std::iter::repeat_n(l, c))
        .collect();
    labels.shuffle(&mut rng);
    let noise =
        Normal::new(0.0, config.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let mut samples = Vec::with_capacity(labels.len());
    for (i, label) in labels.into_iter().enumerate() {
        let n_blobs = match label {
            ClassLabel::Normal => 0,
            ClassLabel::Benign => 1,
            ClassLabel::Malignant => rng.gen_range(1..=2),
        };
        let blobs: Vec<Ellipse> = (0..n_blobs)
            .map(|_| {
                let rx = rng.gen_range(0.08..0.2) * sz;
                let ry = rng.gen_range(0.08..0.2) * sz;
                let margin = rx.max(ry) + 1.0;
                Ellipse {
                    cx: rng.gen_range(margin..(sz - margin).max(margin + 1e-9)),
                    cy: rng.gen_range(margin..(sz - margin).max(margin + 1e-9)),
                    rx,
                    ry,
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                }
            })
            .collect();
        let mask = rasterize(size, &blobs);
        let background = rng.gen_range(0.10..0.25);
        let brightness = rng.gen_range(0.65..0.85);
        let image: Vec<f32> = mask
            .iter()
            .map(|&m| {
                let base = if m > 0.0 { brightness } else { background };
                let v = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                ((v * 255.0).round() / 255.0) as f32
            })
            .collect();
        samples.push(Sample {
            image: Tensor::new([1, size, size], image)?,
            mask: Tensor::new([1, size, size], mask)?,
            label,
            source_id: format!("{}/{}_{i:04}", label.dir_name(), label.dir_name()),
        });
    }
    Ok(samples)
}

/// Writes samples in the loader's directory layout
/// (`root/<class>/<name>.png` plus `<name>_mask.png` for non-empty masks).
pub fn write_busi_layout(samples: &[Sample], root: &Path) -> Result<()> {
    for label in ClassLabel::ALL {
        std::fs::create_dir_all(root.join(label.dir_name()))?;
    }
    for s in samples {
        let [_, h, w] = s.image.shape() else {
            return contract_err("sample image must be [1, H, W]");
        };
        let (h, w) = (*h as u32, *w as u32);
        let to_u8 = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        let img = GrayImage::from_raw(w, h, s.image.data().iter().map(|&v| to_u8(v)).collect())
            .expect("buffer matches dimensions");
        let path = root.join(format!("{}.png", s.source_id));
        img.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        if s.mask.data().iter().any(|&m| m > 0.5) {
            let mask = GrayImage::from_raw(
                w,
                h,
                s.mask
                    .data()
                    .iter()
                    .map(|&m| if m > 0.5 { 255 } else { 0 })
                    .collect(),
            )
            .expect("buffer matches dimensions");
            let mpath = root.join(format!("{}_mask.png", s.source_id));
            mask.save(&mpath).map_err(|source| Error::Image {
                path: mpath.clone(),
                source,
            })?;
        }
    }
    Ok(())
}

/// One mini-batch: images and masks stacked to `[N, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub masks: Tensor<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
        let masks: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.mask).collect();
        Ok(Self {
            images: Tensor::stack(&images)?,
            masks: Tensor::stack(&masks)?,
        })
    }
}

/// Sample order for `epoch`, reshuffled deterministically from `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

/// Shuffled mini-batches for one epoch; the final partial batch is kept.
pub fn batch_iter<'a>(
    split: &'a [Sample],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    if split.is_empty() {
        return contract_err("cannot batch an empty split");
    }
    if batch_size == 0 {
        return contract_err("batch size must be at least 1");
    }
    let order = epoch_order(split.len(), seed, epoch);
    Ok((0..split.len().div_ceil(batch_size)).map(move |b| {
        let idx = &order[b * batch_size..((b + 1) * batch_size).min(order.len())];
        let picked: Vec<&Sample> = idx.iter().map(|&i| &split[i]).collect();
        Batch::from_samples(&picked)
    }))
}

/// Batches in the split's own order (evaluation).
pub fn sequential_batches(split: &[Sample], batch_size: usize) -> Result<Vec<Batch>> {
    if split.is_empty() {
        return contract_err("cannot batch an empty split");
    }
    if batch_size == 0 {
        return contract_err("batch size must be at least 1");
    }
    split
        .chunks(batch_size)
        .map(|c| Batch::from_samples(&c.iter().collect::<Vec<_>>()))
        .collect()
}
