//! Model assembly: a small convolutional classifier with dual-statistics
//! batch normalization, tagged activation capture, and per-tag predictor
//! heads.
//!
//! The network keeps a single set of weights but two independent batch
//! norm branches, Main and Aux. Each branch owns its affine parameters and
//! running statistics; which branch a forward pass reads is chosen per
//! call. That lets the same weights serve two input distributions without
//! mixing their normalization statistics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

/// Errors from model construction, forwarding, and checkpoint io.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad architecture: {0}")]
    BadArch(String),
    #[error("unknown capture tag {0}")]
    UnknownTag(String),
    #[error("input shape {got:?} does not match model (want {want})")]
    BadInput { got: Vec<usize>, want: String },
    #[error("empty batch in train mode")]
    EmptyBatch,
    #[error("parameter {0} missing from bound set")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Selects which batch norm branch a forward pass reads and updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Main,
    Aux,
}

impl Branch {
    /// Lowercase name used in parameter keys and metric records.
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Main => "main",
            Branch::Aux => "aux",
        }
    }
}

/// Train normalizes with batch statistics and advances the running
/// averages; Eval reads the stored averages and mutates nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Network shape: input geometry, stage widths, blocks per stage, classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    pub in_channels: usize,
    pub image_hw: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub classes: usize,
}

impl Arch {
    /// Default desk-scale network: three stages of two blocks, 16/32/64 wide.
    pub fn desk(classes: usize) -> Arch {
        Arch {
            in_channels: 1,
            image_hw: 16,
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            classes,
        }
    }

    /// Rejects degenerate descriptors before any allocation happens.
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.image_hw == 0
            || self.widths.is_empty()
            || self.widths.contains(&0)
            || self.blocks_per_stage == 0
            || self.classes == 0
        {
            return Err(ModelError::BadArch(format!(
                "all dimensions must be positive, got {self:?}"
            )));
        }
        let pools = self.widths.len() - 1;
        if self.image_hw % (1 << pools) != 0 {
            return Err(ModelError::BadArch(format!(
                "image size {} not divisible by {} for {} pooling steps",
                self.image_hw,
                1 << pools,
                pools
            )));
        }
        Ok(())
    }

    /// Capture tags in forward order: s1b1, s1b2, s2b1, ...
    pub fn tags(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in 1..=self.widths.len() {
            for b in 1..=self.blocks_per_stage {
                out.push(format!("s{s}b{b}"));
            }
        }
        out
    }

    /// Channel width of the block a tag names, if the tag exists.
    pub fn tag_width(&self, tag: &str) -> Option<usize> {
        for (si, &w) in self.widths.iter().enumerate() {
            for b in 1..=self.blocks_per_stage {
                if tag == format!("s{}b{}", si + 1, b) {
                    return Some(w);
                }
            }
        }
        None
    }

    /// Width of the pooled feature vector feeding the classifier.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }
}

/// Hidden width of a predictor head for a d-dimensional representation.
pub fn predictor_hidden_dim(d: usize) -> usize {
    d.div_ceil(4)
}

/// One running-average step: keep `momentum` of the old value, take the
/// rest from the fresh batch value.
pub fn running_update(old: &[f64], batch: &[f64], momentum: f64) -> Vec<f64> {
    old.iter()
        .zip(batch)
        .map(|(o, b)| momentum * o + (1.0 - momentum) * b)
        .collect()
}

/// Per-channel batch statistics observed by one batch norm application.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStat {
    pub layer: String,
    pub branch: Branch,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Which batch norm branch the pass ran on.
    pub branch: Branch,
    pub logits: Tensor,
    /// Requested capture tags mapped to pooled representations, batch x d.
    pub reps: BTreeMap<String, Tensor>,
    /// Pooled input to the classifier, batch x feature_dim.
    pub penultimate: Tensor,
    /// Batch statistics per batch norm application, in forward order.
    /// Empty in Eval mode.
    pub bn_batch: Vec<BnBatchStat>,
}

/// Parameters bound for one tape's forward passes, keyed by name.
pub type BoundParams = BTreeMap<String, Tensor>;

/// Train-mode batch normalization of `[n, c, h, w]` with batch statistics.
/// Returns the normalized output plus the per-channel mean and biased
/// variance it was computed from, both live on the tape.
pub fn batch_norm_train(
    tape: &mut Tape,
    x: &Tensor,
    g: &Tensor,
    b: &Tensor,
    eps: f64,
) -> crate::tensor::Result<(Tensor, Tensor, Tensor)> {
    let m = tape.channel_mean(x)?;
    let xm = tape.sub_channel(x, &m)?;
    let sq = tape.mul(&xm, &xm)?;
    let v = tape.channel_mean(&sq)?;
    let veps = tape.add_scalar(&v, eps)?;
    let s = tape.sqrt(&veps)?;
    let xhat = tape.div_channel(&xm, &s)?;
    let scaled = tape.mul_channel(&xhat, g)?;
    let y = tape.add_channel(&scaled, b)?;
    Ok((y, m, v))
}

/// All learnable parameters plus batch norm running statistics.
#[derive(Debug, Clone)]
pub struct ModelState {
    arch: Arch,
    bn_momentum: f64,
    bn_eps: f64,
    params: BTreeMap<String, Tensor>,
    stats: BTreeMap<String, Tensor>,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, vals).expect("shape matches length")
}

impl ModelState {
    /// Deterministic initialization: conv and dense weights fan-in scaled
    /// normal, biases zero, both BN branches identical (scale 1, shift 0,
    /// running mean 0, running variance 1).
    pub fn init(arch: &Arch, seed: u64) -> Result<ModelState> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut stats = BTreeMap::new();
        let mut prev = arch.in_channels;
        for (si, &w) in arch.widths.iter().enumerate() {
            for bi in 1..=arch.blocks_per_stage {
                let name = format!("s{}b{}", si + 1, bi);
                params.insert(
                    format!("{name}.conv.w"),
                    he_normal(&mut rng, &[w, prev, 3, 3], prev * 9),
                );
                for br in ["main", "aux"] {
                    params.insert(format!("{name}.bn.{br}.g"), Tensor::filled(&[w], 1.0));
                    params.insert(format!("{name}.bn.{br}.b"), Tensor::zeros(&[w]));
                    stats.insert(format!("{name}.bn.{br}.mean"), Tensor::zeros(&[w]));
                    stats.insert(format!("{name}.bn.{br}.var"), Tensor::filled(&[w], 1.0));
                }
                prev = w;
            }
        }
        let d = arch.feature_dim();
        params.insert("fc.w".into(), he_normal(&mut rng, &[d, arch.classes], d));
        params.insert("fc.b".into(), Tensor::zeros(&[arch.classes]));
        for tag in arch.tags() {
            let dl = arch.tag_width(&tag).expect("tag from arch");
            let h = predictor_hidden_dim(dl);
            params.insert(format!("pred.{tag}.w1"), he_normal(&mut rng, &[dl, h], dl));
            params.insert(format!("pred.{tag}.b1"), Tensor::zeros(&[h]));
            params.insert(format!("pred.{tag}.w2"), he_normal(&mut rng, &[h, dl], h));
            params.insert(format!("pred.{tag}.b2"), Tensor::zeros(&[dl]));
        }
        Ok(ModelState {
            arch: arch.clone(),
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            params,
            stats,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn bn_momentum(&self) -> f64 {
        self.bn_momentum
    }

    pub fn bn_eps(&self) -> f64 {
        self.bn_eps
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn stats(&self) -> &BTreeMap<String, Tensor> {
        &self.stats
    }

    /// Resets running statistics to mean 0, variance 1, for recalibration.
    pub fn reset_running_stats(&mut self) {
        for (name, t) in self.stats.iter_mut() {
            let fill = if name.ends_with(".var") { 1.0 } else { 0.0 };
            *t = Tensor::filled(t.shape(), fill);
        }
    }

    /// Binds every parameter once as a trainable leaf on `tape`. All
    /// forward passes sharing this bound set accumulate gradients into the
    /// same leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v)))
            .collect()
    }

    /// Presents every parameter as a constant. Gradients will not reach
    /// them, and the bound set works on any tape.
    pub fn bind_frozen(&self) -> BoundParams {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.detach()))
            .collect()
    }

    /// Full forward pass. Train mode advances the selected branch's
    /// running statistics; the other branch is untouched.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: &Tensor,
        branch: Branch,
        mode: Mode,
        capture: &[&str],
    ) -> Result<ForwardOutput> {
        let (out, updates) = self.forward_core(tape, bound, x, branch, mode, capture)?;
        for (name, t) in updates {
            self.stats.insert(name, t);
        }
        Ok(out)
    }

    /// Read-only Eval forward; running statistics cannot change.
    pub fn forward_eval(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: &Tensor,
        branch: Branch,
        capture: &[&str],
    ) -> Result<ForwardOutput> {
        let (out, updates) = self.forward_core(tape, bound, x, branch, Mode::Eval, capture)?;
        debug_assert!(updates.is_empty());
        Ok(out)
    }

    fn forward_core(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: &Tensor,
        branch: Branch,
        mode: Mode,
        capture: &[&str],
    ) -> Result<(ForwardOutput, Vec<(String, Tensor)>)> {
        let hw = self.arch.image_hw;
        let shape_ok = x.shape().len() == 4
            && x.shape()[1] == self.arch.in_channels
            && x.shape()[2] == hw
            && x.shape()[3] == hw;
        if !shape_ok {
            return Err(ModelError::BadInput {
                got: x.shape().to_vec(),
                want: format!("[n, {}, {}, {}]", self.arch.in_channels, hw, hw),
            });
        }
        if mode == Mode::Train && x.shape()[0] == 0 {
            return Err(ModelError::EmptyBatch);
        }
        for tag in capture {
            if self.arch.tag_width(tag).is_none() {
                return Err(ModelError::UnknownTag((*tag).to_string()));
            }
        }

        let get = |name: String| -> Result<&Tensor> {
            bound
                .get(&name)
                .ok_or(ModelError::MissingParam(name.clone()))
        };

        let mut reps = BTreeMap::new();
        let mut bn_batch = Vec::new();
        let mut updates = Vec::new();
        let mut cur = x.clone();
        let stages = self.arch.widths.len();
        for si in 1..=stages {
            for bi in 1..=self.arch.blocks_per_stage {
                let name = format!("s{si}b{bi}");
                let w = get(format!("{name}.conv.w"))?;
                cur = tape.conv2d(&cur, w, 1)?;
                cur = self.batch_norm(
                    tape,
                    bound,
                    &cur,
                    &name,
                    branch,
                    mode,
                    &mut bn_batch,
                    &mut updates,
                )?;
                cur = tape.relu(&cur)?;
                if capture.contains(&name.as_str()) {
                    reps.insert(name.clone(), tape.global_avg_pool(&cur)?);
                }
            }
            if si < stages {
                cur = tape.avg_pool2(&cur)?;
            }
        }
        let penultimate = tape.global_avg_pool(&cur)?;
        let fc_w = get("fc.w".into())?;
        let fc_b = get("fc.b".into())?;
        let pre = tape.matmul(&penultimate, fc_w)?;
        let logits = tape.add_bias(&pre, fc_b)?;
        Ok((
            ForwardOutput {
                branch,
                logits,
                reps,
                penultimate,
                bn_batch,
            },
            updates,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: &Tensor,
        layer: &str,
        branch: Branch,
        mode: Mode,
        log: &mut Vec<BnBatchStat>,
        updates: &mut Vec<(String, Tensor)>,
    ) -> Result<Tensor> {
        let br = branch.as_str();
        let g = bound
            .get(&format!("{layer}.bn.{br}.g"))
            .ok_or_else(|| ModelError::MissingParam(format!("{layer}.bn.{br}.g")))?;
        let b = bound
            .get(&format!("{layer}.bn.{br}.b"))
            .ok_or_else(|| ModelError::MissingParam(format!("{layer}.bn.{br}.b")))?;
        let mean_name = format!("{layer}.bn.{br}.mean");
        let var_name = format!("{layer}.bn.{br}.var");
        match mode {
            Mode::Train => {
                let (y, m, v) = batch_norm_train(tape, x, g, b, self.bn_eps)?;
                log.push(BnBatchStat {
                    layer: layer.to_string(),
                    branch,
                    mean: m.values().to_vec(),
                    var: v.values().to_vec(),
                });
                let old_m = self.stats[&mean_name].values();
                let old_v = self.stats[&var_name].values();
                let new_m = running_update(old_m, m.values(), self.bn_momentum);
                let new_v = running_update(old_v, v.values(), self.bn_momentum);
                let c = new_m.len();
                updates.push((mean_name, Tensor::new(&[c], new_m)?));
                updates.push((var_name, Tensor::new(&[c], new_v)?));
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.stats[&mean_name].detach();
                let rv = self.stats[&var_name].values();
                let denom: Vec<f64> = rv.iter().map(|v| (v + self.bn_eps).sqrt()).collect();
                let s = Tensor::new(&[denom.len()], denom)?;
                let xm = tape.sub_channel(x, &rm)?;
                let xhat = tape.div_channel(&xm, &s)?;
                let scaled = tape.mul_channel(&xhat, g)?;
                Ok(tape.add_channel(&scaled, b)?)
            }
        }
    }

    /// Runs the two-layer head attached to a capture tag: dense to a
    /// quarter width, ReLU, dense back to full width.
    pub fn predictor_forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tag: &str,
        z: &Tensor,
    ) -> Result<Tensor> {
        let d = self
            .arch
            .tag_width(tag)
            .ok_or_else(|| ModelError::UnknownTag(tag.to_string()))?;
        if z.shape().len() != 2 || z.shape()[1] != d {
            return Err(ModelError::BadInput {
                got: z.shape().to_vec(),
                want: format!("[n, {d}]"),
            });
        }
        let get = |name: String| -> Result<&Tensor> {
            bound
                .get(&name)
                .ok_or(ModelError::MissingParam(name.clone()))
        };
        let w1 = get(format!("pred.{tag}.w1"))?;
        let b1 = get(format!("pred.{tag}.b1"))?;
        let w2 = get(format!("pred.{tag}.w2"))?;
        let b2 = get(format!("pred.{tag}.b2"))?;
        let h = tape.matmul(z, w1)?;
        let h = tape.add_bias(&h, b1)?;
        let h = tape.relu(&h)?;
        let out = tape.matmul(&h, w2)?;
        Ok(tape.add_bias(&out, b2)?)
    }

    /// Serializes the checkpoint container: magic, version, architecture,
    /// then one record per parameter and running statistic.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            self.arch.in_channels,
            self.arch.image_hw,
            self.arch.classes,
            self.arch.blocks_per_stage,
            self.arch.widths.len(),
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &w in &self.arch.widths {
            buf.extend_from_slice(&(w as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.bn_momentum.to_le_bytes());
        buf.extend_from_slice(&self.bn_eps.to_le_bytes());
        let count = self.params.len() + self.stats.len();
        buf.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in self.params.iter().chain(self.stats.iter()) {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.values() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }

    /// Parses a checkpoint container, validating structure against the
    /// declared architecture.
    pub fn from_bytes(full: &[u8]) -> Result<ModelState> {
        let mut buf = full;
        let magic = take(&mut buf, 8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint(
                "bad magic, not a checkpoint file".into(),
            ));
        }
        let version = read_u32(&mut buf, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let in_channels = read_u32(&mut buf, "in_channels")? as usize;
        let image_hw = read_u32(&mut buf, "image_hw")? as usize;
        let classes = read_u32(&mut buf, "classes")? as usize;
        let blocks_per_stage = read_u32(&mut buf, "blocks_per_stage")? as usize;
        let n_stages = read_u32(&mut buf, "stage count")? as usize;
        if n_stages > 64 {
            return Err(ModelError::Checkpoint(format!(
                "implausible stage count {n_stages}"
            )));
        }
        let mut widths = Vec::with_capacity(n_stages);
        for _ in 0..n_stages {
            widths.push(read_u32(&mut buf, "stage width")? as usize);
        }
        let arch = Arch {
            in_channels,
            image_hw,
            widths,
            blocks_per_stage,
            classes,
        };
        arch.validate()?;
        let bn_momentum = read_f64(&mut buf, "bn momentum")?;
        let bn_eps = read_f64(&mut buf, "bn eps")?;
        if !(0.0 < bn_momentum && bn_momentum < 1.0) || bn_eps <= 0.0 {
            return Err(ModelError::Checkpoint(format!(
                "bad normalization constants: momentum {bn_momentum}, eps {bn_eps}"
            )));
        }
        let count = read_u32(&mut buf, "record count")? as usize;

        let skeleton = ModelState::init(&arch, 0)?;
        let mut params = BTreeMap::new();
        let mut stats = BTreeMap::new();
        for i in 0..count {
            let nlen = read_u16(&mut buf, "name length")? as usize;
            let nb = take(&mut buf, nlen, "record name")?;
            let name = std::str::from_utf8(nb)
                .map_err(|_| ModelError::Checkpoint(format!("record {i} name not UTF-8")))?
                .to_string();
            let rank = take(&mut buf, 1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut buf, "dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut buf, n * 4, &format!("values of {name}"))?;
            let vals: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let expected = if name.ends_with(".mean") || name.ends_with(".var") {
                skeleton.stats.get(&name)
            } else {
                skeleton.params.get(&name)
            };
            let Some(proto) = expected else {
                return Err(ModelError::Checkpoint(format!(
                    "record {name} does not belong to this architecture"
                )));
            };
            if proto.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "record {name} has shape {shape:?}, architecture wants {:?}",
                    proto.shape()
                )));
            }
            let t = Tensor::new(&shape, vals)?;
            if name.ends_with(".mean") || name.ends_with(".var") {
                stats.insert(name, t);
            } else {
                params.insert(name, t);
            }
        }
        if !buf.is_empty() {
            return Err(ModelError::Checkpoint(format!(
                "{} trailing bytes after last record",
                buf.len()
            )));
        }
        if params.len() != skeleton.params.len() || stats.len() != skeleton.stats.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter and {} statistic records, got {} and {}",
                skeleton.params.len(),
                skeleton.stats.len(),
                params.len(),
                stats.len()
            )));
        }
        Ok(ModelState {
            arch,
            bn_momentum,
            bn_eps,
            params,
            stats,
        })
    }

    /// Writes the checkpoint to a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    /// Reads a checkpoint from a file.
    pub fn load(path: &Path) -> Result<ModelState> {
        ModelState::from_bytes(&fs::read(path)?)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ADVLABCK";
const CHECKPOINT_VERSION: u32 = 1;

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(ModelError::Checkpoint(format!(
            "truncated reading {what}: need {n} bytes, have {}",
            buf.len()
        )));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn read_u16(buf: &mut &[u8], what: &str) -> Result<u16> {
    let b = take(buf, 2, what)?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(buf: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(buf, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_f64(buf: &mut &[u8], what: &str) -> Result<f64> {
    let b = take(buf, 8, what)?;
    Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
}
