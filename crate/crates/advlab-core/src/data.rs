//! Deterministic desk-scale datasets: a synthetic grating classifier task,
//! a raw binary container, seeded augmentation, and epoch batching.
//!
//! Pixels are quantized to bytes at generation time and stay bytes until a
//! batch is assembled, so saving and reloading a dataset is lossless and
//! every consumer sees exactly the same floats.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::Tensor;

/// Errors from dataset generation and the raw container.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad dataset parameters: {0}")]
    BadParams(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Labeled images stored as bytes, one label byte per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// count * channels * height * width bytes, sample-major.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_bytes(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Assembles the indexed samples into a float batch in [0,1].
    pub fn batch(&self, idxs: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.sample_bytes();
        let mut vals = Vec::with_capacity(idxs.len() * per);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            if i >= self.len() {
                return Err(DataError::BadParams(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            vals.extend(
                self.pixels[i * per..(i + 1) * per]
                    .iter()
                    .map(|&b| b as f64 / 255.0),
            );
            labels.push(self.labels[i] as usize);
        }
        let t = Tensor::new(
            &[idxs.len(), self.channels, self.height, self.width],
            vals,
        )
        .map_err(|e| DataError::BadParams(e.to_string()))?;
        Ok((t, labels))
    }

    /// Whole dataset as one batch.
    pub fn full_batch(&self) -> Result<(Tensor, Vec<usize>)> {
        let idxs: Vec<usize> = (0..self.len()).collect();
        self.batch(&idxs)
    }
}

/// Synthetic task: each class is an oriented sinusoidal grating with a
/// class-specific orientation, frequency, and phase, plus Gaussian pixel
/// noise. Samples are interleaved by class so every prefix of the dataset
/// is nearly class-balanced.
pub fn synth_generate(
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    synth_generate_with_noise(classes, per_class, size, seed, 0.1)
}

/// Same generator with the noise level exposed.
pub fn synth_generate_with_noise(
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
    sigma: f64,
) -> Result<Dataset> {
    if classes < 2 || classes > 255 {
        return Err(DataError::BadParams(format!(
            "need between 2 and 255 classes, got {classes}"
        )));
    }
    if per_class == 0 {
        return Err(DataError::BadParams("need at least one sample per class".into()));
    }
    if size < 8 {
        return Err(DataError::BadParams(format!(
            "image size must be at least 8, got {size}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DataError::BadParams(format!("bad noise level {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).expect("positive sigma"))
    } else {
        None
    };
    let per = size * size;
    let mut pixels = Vec::with_capacity(classes * per_class * per);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for k in 0..classes {
            let theta = std::f64::consts::PI * k as f64 / classes as f64;
            let freq = 2.0 + (k % 3) as f64;
            let phase = 0.9 * k as f64;
            let (cos_t, sin_t) = (theta.cos(), theta.sin());
            for r in 0..size {
                for c in 0..size {
                    let t = (c as f64 * cos_t + r as f64 * sin_t) / size as f64;
                    let mut v = 0.5
                        + 0.35 * (2.0 * std::f64::consts::PI * freq * t + phase).sin();
                    if let Some(n) = &noise {
                        v += n.sample(&mut rng);
                    }
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
            labels.push(k as u8);
        }
    }
    Ok(Dataset {
        channels: 1,
        height: size,
        width: size,
        classes,
        pixels,
        labels,
    })
}

const DATASET_MAGIC: &[u8; 8] = b"ADVLABDS";
const DATASET_VERSION: u32 = 1;

/// Writes the raw container: magic, version, counts, then per-sample
/// pixel bytes followed by one label byte.
pub fn save_raw(ds: &Dataset, path: &Path) -> Result<()> {
    let per = ds.sample_bytes();
    let mut buf = Vec::with_capacity(32 + ds.len() * (per + 1));
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [ds.len(), ds.channels, ds.height, ds.width, ds.classes] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for i in 0..ds.len() {
        buf.extend_from_slice(&ds.pixels[i * per..(i + 1) * per]);
        buf.push(ds.labels[i]);
    }
    Ok(fs::write(path, buf)?)
}

/// Reads the raw container back, validating the payload byte count and
/// every label.
pub fn load_raw(path: &Path) -> Result<Dataset> {
    let buf = fs::read(path)?;
    if buf.len() < 8 || &buf[..8] != DATASET_MAGIC {
        return Err(DataError::Format("bad magic, not a dataset file".into()));
    }
    let mut off = 8;
    let mut read_u32 = |what: &str| -> Result<u32> {
        if buf.len() < off + 4 {
            return Err(DataError::Format(format!(
                "truncated reading {what}: need 4 bytes at offset {off}, have {}",
                buf.len().saturating_sub(off)
            )));
        }
        let v = u32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]);
        off += 4;
        Ok(v)
    };
    let version = read_u32("version")?;
    if version != DATASET_VERSION {
        return Err(DataError::Format(format!(
            "unsupported version {version}, expected {DATASET_VERSION}"
        )));
    }
    let count = read_u32("sample count")? as usize;
    let channels = read_u32("channels")? as usize;
    let height = read_u32("height")? as usize;
    let width = read_u32("width")? as usize;
    let classes = read_u32("class count")? as usize;
    if channels == 0 || height == 0 || width == 0 || classes == 0 || classes > 255 {
        return Err(DataError::Format(format!(
            "implausible geometry: {channels} channels, {height}x{width}, {classes} classes"
        )));
    }
    let per = channels * height * width;
    let want = count * (per + 1);
    let have = buf.len() - off;
    if have != want {
        return Err(DataError::Format(format!(
            "payload is {have} bytes, {count} samples need {want}"
        )));
    }
    let mut pixels = Vec::with_capacity(count * per);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let start = off + i * (per + 1);
        pixels.extend_from_slice(&buf[start..start + per]);
        let label = buf[start + per];
        if label as usize >= classes {
            return Err(DataError::Format(format!(
                "sample {i} has label {label}, dataset claims {classes} classes"
            )));
        }
        labels.push(label);
    }
    Ok(Dataset {
        channels,
        height,
        width,
        classes,
        pixels,
        labels,
    })
}

/// Random pad-crop and horizontal flip, seeded.
#[derive(Debug, Clone)]
pub struct AugmentationConfig {
    pub pad_crop: usize,
    pub horizontal_flip: bool,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            pad_crop: 4,
            horizontal_flip: true,
            seed: 0,
        }
    }
}

/// Copies one sample shifted by (dy, dx) out of a zero-padded frame,
/// optionally mirrored left-right.
fn crop_flip(
    src: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    pad: usize,
    dy: usize,
    dx: usize,
    flip: bool,
    dst: &mut Vec<f64>,
) {
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for r in 0..h {
            // Source row in unpadded coordinates; outside is zero.
            let sr = (r + dy) as isize - pad as isize;
            for col in 0..w {
                let logical = if flip { w - 1 - col } else { col };
                let sc = (logical + dx) as isize - pad as isize;
                let v = if sr >= 0 && (sr as usize) < h && sc >= 0 && (sc as usize) < w {
                    plane[sr as usize * w + sc as usize]
                } else {
                    0.0
                };
                dst.push(v);
            }
        }
    }
}

/// Applies the augmentation to a float batch shaped [n, c, h, w]. With
/// zero padding and flipping disabled this is the identity.
pub fn augment(batch: &Tensor, cfg: &AugmentationConfig) -> Result<Tensor> {
    if batch.shape().len() != 4 {
        return Err(DataError::BadParams(format!(
            "augment expects [n, c, h, w], got {:?}",
            batch.shape()
        )));
    }
    if cfg.pad_crop == 0 && !cfg.horizontal_flip {
        return Ok(batch.detach());
    }
    let (n, c, h, w) = (
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(batch.len());
    let per = c * h * w;
    for i in 0..n {
        let dy = if cfg.pad_crop > 0 {
            rng.random_range(0..=2 * cfg.pad_crop)
        } else {
            0
        };
        let dx = if cfg.pad_crop > 0 {
            rng.random_range(0..=2 * cfg.pad_crop)
        } else {
            0
        };
        let flip = cfg.horizontal_flip && rng.random_range(0.0..1.0) < 0.5;
        crop_flip(
            &batch.values()[i * per..(i + 1) * per],
            c,
            h,
            w,
            cfg.pad_crop,
            dy,
            dx,
            flip,
            &mut out,
        );
    }
    Tensor::new(batch.shape(), out).map_err(|e| DataError::BadParams(e.to_string()))
}

/// Shuffled index batches for one epoch, a pure function of the inputs.
/// The final batch may be short.
pub fn epoch_batches(
    n_samples: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut idxs: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    idxs.shuffle(&mut rng);
    idxs.chunks(batch_size).map(|c| c.to_vec()).collect()
}
