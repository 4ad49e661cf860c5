//! Training loop: SGD with momentum and weight decay, a step learning-rate
//! schedule, per-epoch weighting of the loss terms from the previous
//! epoch's clean accuracy, optional weight averaging, and instrument
//! sampling on the first batch of every epoch.
//!
//! Everything is deterministic: batch order, attack seeds, and
//! augmentation seeds are all derived from the config, so two runs with
//! the same config and dataset produce bit-identical checkpoints.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::attacks::{self, AttackConfig, AttackError, AttackNorm};
use crate::data::{self, AugmentationConfig, DataError, Dataset};
use crate::diagnostics::{self, DiagnosticsError, GradMap, Granularity, MetricRecord};
use crate::losses::{self, LossAssembly, LossError, Variant};
use crate::nn::{BnBatchStat, Branch, Mode, ModelError, ModelState};
use crate::tensor::{Tape, Tensor, TensorError};

/// Errors raised while training or evaluating.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("previous-epoch accuracy {0} is outside [0, 1]")]
    BadAccuracy(f64),
    #[error("snapshot does not match accumulated shapes at '{0}'")]
    SnapshotShape(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Everything a run needs besides the model and the data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Epochs at which the learning rate is multiplied by the drop factor.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Attack used to craft training examples.
    pub attack: AttackConfig,
    pub loss: LossAssembly,
    /// Re-weight (alpha, beta) each epoch from the previous epoch's clean
    /// training accuracy.
    pub auto_balance: bool,
    /// First epoch at which weight averaging starts accumulating.
    pub swa_start: Option<usize>,
    pub seed: u64,
    /// Attack used when evaluating robustness.
    pub eval_attack: AttackConfig,
}

impl TrainConfig {
    /// Desk-scale defaults: 30 epochs, step drops at 22 and 27, batch 64,
    /// a 3-step training attack and a 20-step evaluation attack, both at
    /// radius 8/255.
    pub fn desk(loss: LossAssembly) -> Self {
        let auto_balance = loss.variant == Variant::V3;
        TrainConfig {
            epochs: 30,
            base_lr: 0.05,
            lr_drop_epochs: vec![22, 27],
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            attack: AttackConfig {
                norm: AttackNorm::Linf,
                epsilon: 8.0 / 255.0,
                step_size: 4.0 / 255.0,
                iterations: 3,
                random_init: true,
                loss_kind: Default::default(),
                branch: Branch::Main,
                seed: 0,
            },
            loss,
            auto_balance,
            swa_start: None,
            seed: 0,
            eval_attack: AttackConfig {
                norm: AttackNorm::Linf,
                epsilon: 8.0 / 255.0,
                step_size: 2.0 / 255.0,
                iterations: 20,
                random_init: true,
                loss_kind: Default::default(),
                branch: Branch::Main,
                seed: 1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "base learning rate {} must be finite and non-negative",
                self.base_lr
            )));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "drop factor {} must be finite and positive",
                self.lr_drop_factor
            )));
        }
        for pair in self.lr_drop_epochs.windows(2) {
            if pair[1] <= pair[0] {
                return Err(TrainError::BadConfig(format!(
                    "drop epochs must be strictly increasing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if let Some(&last) = self.lr_drop_epochs.last() {
            if last >= self.epochs {
                return Err(TrainError::BadConfig(format!(
                    "drop epoch {last} is not before the final epoch {}",
                    self.epochs
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::BadConfig(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "weight decay {} must be finite and non-negative",
                self.weight_decay
            )));
        }
        if let Some(start) = self.swa_start {
            if start >= self.epochs {
                return Err(TrainError::BadConfig(format!(
                    "weight averaging start {start} is past the last epoch"
                )));
            }
        }
        self.attack.validate()?;
        self.eval_attack.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

/// New loss-term weights from the previous epoch's clean training
/// accuracy: alpha follows the accuracy, beta is its complement.
pub fn auto_balance_update(prev_clean_acc: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&prev_clean_acc) {
        return Err(TrainError::BadAccuracy(prev_clean_acc));
    }
    Ok((prev_clean_acc, 1.0 - prev_clean_acc))
}

/// Learning rate in effect at epoch `t`: the base rate times the drop
/// factor once per drop epoch already reached.
pub fn lr_at_epoch(cfg: &TrainConfig, t: usize) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&d| d <= t).count();
    cfg.base_lr * cfg.lr_drop_factor.powi(drops as i32)
}

/// One in-place SGD update on a single parameter tensor:
/// v <- momentum * v + g, then p <- p - lr * (v + weight_decay * p).
/// The decay term rides outside the momentum buffer.
pub fn sgd_step(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, wd: f64) {
    for i in 0..p.len() {
        v[i] = momentum * v[i] + g[i];
        p[i] -= lr * (v[i] + wd * p[i]);
    }
}

/// Rows of `logits` whose running argmax matches the label. Ties resolve
/// to the first maximum.
fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.values()[i * k..(i + 1) * k];
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct
}

/// Arithmetic mean of accumulated parameter snapshots.
#[derive(Debug, Clone, Default)]
pub struct SwaState {
    avg: BTreeMap<String, Tensor>,
    count: usize,
}

impl SwaState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Folds one parameter snapshot into the running mean.
    pub fn update(&mut self, model: &ModelState) -> Result<()> {
        if self.count == 0 {
            self.avg = model.params().clone();
            self.count = 1;
            return Ok(());
        }
        if self.avg.len() != model.params().len() {
            return Err(TrainError::SnapshotShape("parameter count".into()));
        }
        let n = self.count as f64;
        for (name, t) in self.avg.iter_mut() {
            let p = model
                .params()
                .get(name)
                .ok_or_else(|| TrainError::SnapshotShape(name.clone()))?;
            if p.shape() != t.shape() {
                return Err(TrainError::SnapshotShape(name.clone()));
            }
            let vals: Vec<f64> = t
                .values()
                .iter()
                .zip(p.values())
                .map(|(a, b)| (a * n + b) / (n + 1.0))
                .collect();
            *t = Tensor::new(t.shape(), vals)?;
        }
        self.count += 1;
        Ok(())
    }

    /// A copy of `template` carrying the averaged parameters, with running
    /// statistics reset; recalibrate before evaluating it.
    pub fn averaged_model(&self, template: &ModelState) -> Result<ModelState> {
        let mut m = template.clone();
        if self.count == 0 {
            return Err(TrainError::SnapshotShape("no snapshots accumulated".into()));
        }
        for (name, t) in &self.avg {
            let slot = m
                .params_mut()
                .get_mut(name)
                .ok_or_else(|| TrainError::SnapshotShape(name.clone()))?;
            if slot.shape() != t.shape() {
                return Err(TrainError::SnapshotShape(name.clone()));
            }
            *slot = t.clone();
        }
        m.reset_running_stats();
        Ok(m)
    }
}

/// Replays the training stream once to rebuild BN running statistics,
/// crafting adversarial batches against the model as training would.
pub fn calibrate_bn(model: &mut ModelState, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let clean_branch = cfg.loss.variant.clean_branch();
    for (bi, idxs) in data::epoch_batches(data.len(), cfg.batch_size, cfg.seed, cfg.epochs)
        .iter()
        .enumerate()
    {
        let (x, y) = data.batch(idxs)?;
        let mut acfg = cfg.attack.clone();
        acfg.seed = cfg.attack.seed ^ 0xCA11B8 ^ ((bi as u64) << 1);
        let x_adv = attacks::pgd(model, &x, &y, &acfg)?;
        let bound = model.bind_frozen();
        let mut tape = Tape::new();
        model.forward(&mut tape, &bound, &x_adv, Branch::Main, Mode::Train, &[])?;
        model.forward(&mut tape, &bound, &x, clean_branch, Mode::Train, &[])?;
    }
    Ok(())
}

/// Accuracy of `model` on `data` through `branch`: clean, and under the
/// attack crafted against that same branch. `None` reports the clean
/// accuracy twice. The model is not mutated.
pub fn evaluate(
    model: &ModelState,
    data: &Dataset,
    branch: Branch,
    attack: Option<&AttackConfig>,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(TrainError::BadConfig("cannot evaluate on an empty dataset".into()));
    }
    let bound = model.bind_frozen();
    let idxs: Vec<usize> = (0..data.len()).collect();
    let mut clean_correct = 0;
    let mut robust_correct = 0;
    for (ci, chunk) in idxs.chunks(64).enumerate() {
        let (x, y) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let out = model.forward_eval(&mut tape, &bound, &x, branch, &[])?;
        let chunk_clean = count_correct(&out.logits, &y);
        clean_correct += chunk_clean;
        match attack {
            None => robust_correct += chunk_clean,
            Some(a) => {
                let mut acfg = a.clone();
                acfg.branch = branch;
                acfg.seed = a.seed.wrapping_add(ci as u64);
                let x_adv = attacks::pgd(model, &x, &y, &acfg)?;
                let out_adv = model.forward_eval(&mut tape, &bound, &x_adv, branch, &[])?;
                robust_correct += count_correct(&out_adv.logits, &y);
            }
        }
    }
    let n = data.len() as f64;
    Ok((clean_correct as f64 / n, robust_correct as f64 / n))
}

/// What one epoch reports back.
#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub batches: usize,
    pub mean_total: f64,
    pub mean_adv_cls: f64,
    pub mean_clean_cls: f64,
    pub mean_invariance: f64,
    pub train_clean_acc: f64,
    pub train_adv_acc: f64,
    /// Instrument stream for the metrics file.
    pub records: Vec<MetricRecord>,
    /// Batch statistics seen by the clean stream, per batch, for replay
    /// checks of branch isolation.
    pub bn_clean_log: Vec<Vec<BnBatchStat>>,
    /// Batch statistics seen by the adversarial stream, same layout.
    pub bn_adv_log: Vec<Vec<BnBatchStat>>,
}

const PROBE_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const PROBE_ATTACK_SALT: u64 = 0xD1B5_4A32_D192_ED03;

/// Drives epochs over a model, carrying momentum buffers, the loss-term
/// weights, the instrument probe batch, and any weight-averaging state.
#[derive(Debug)]
pub struct Trainer {
    pub model: ModelState,
    pub cfg: TrainConfig,
    velocity: BTreeMap<String, Vec<f64>>,
    alpha: f64,
    beta: f64,
    last_clean_acc: Option<f64>,
    probe: Option<(Tensor, Vec<usize>)>,
    prev_probe_adv: Option<Tensor>,
    pub swa: Option<SwaState>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: ModelState) -> Result<Self> {
        cfg.validate()?;
        let alpha = cfg.loss.alpha;
        let beta = cfg.loss.beta;
        Ok(Trainer {
            model,
            cfg,
            velocity: BTreeMap::new(),
            alpha,
            beta,
            last_clean_acc: None,
            probe: None,
            prev_probe_adv: None,
            swa: None,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn probe_batch(&mut self, data: &Dataset) -> Result<(Tensor, Vec<usize>)> {
        if self.probe.is_none() {
            let size = data.len().min(64);
            let idxs = data::epoch_batches(data.len(), size, self.cfg.seed ^ PROBE_SEED_SALT, 0)
                .into_iter()
                .next()
                .expect("non-empty dataset");
            self.probe = Some(data.batch(&idxs)?);
        }
        Ok(self.probe.clone().expect("just set"))
    }

    /// Runs one full epoch of adversarial training and instrument
    /// sampling. Epochs must be fed in order starting at zero for the
    /// weight re-balancing to see the right history.
    pub fn run_epoch(
        &mut self,
        data: &Dataset,
        augment: Option<&AugmentationConfig>,
        epoch: usize,
    ) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(TrainError::BadConfig("cannot train on an empty dataset".into()));
        }
        if self.cfg.auto_balance {
            if epoch == 0 {
                self.alpha = 1.0;
                self.beta = 1.0;
            } else if let Some(acc) = self.last_clean_acc {
                let (a, b) = auto_balance_update(acc)?;
                self.alpha = a;
                self.beta = b;
            }
        }
        let lr = lr_at_epoch(&self.cfg, epoch);
        let mut assembly = self.cfg.loss.clone();
        assembly.alpha = self.alpha;
        assembly.beta = self.beta;
        let clean_branch = assembly.variant.clean_branch();
        let tags: Vec<&str> = if assembly.variant == Variant::AsymTrades {
            Vec::new()
        } else {
            assembly.capture_tags.iter().map(|s| s.as_str()).collect()
        };

        let batches = data::epoch_batches(data.len(), self.cfg.batch_size, self.cfg.seed, epoch);
        let mut records = Vec::new();
        let mut bn_clean_log = Vec::with_capacity(batches.len());
        let mut bn_adv_log = Vec::with_capacity(batches.len());
        let mut seen = 0usize;
        let mut clean_correct = 0usize;
        let mut adv_correct = 0usize;
        let mut sums = [0.0f64; 4];
        let mut tag_sums: BTreeMap<String, f64> = BTreeMap::new();

        for (bi, idxs) in batches.iter().enumerate() {
            let (x_raw, y) = data.batch(idxs)?;
            let x = match augment {
                Some(a) => {
                    let mut acfg = a.clone();
                    acfg.seed = a.seed ^ ((epoch as u64) << 32) ^ bi as u64;
                    data::augment(&x_raw, &acfg)?
                }
                None => x_raw,
            };
            let mut atk = self.cfg.attack.clone();
            atk.seed = self.cfg.attack.seed ^ ((epoch as u64) << 32) ^ bi as u64;
            let x_adv = attacks::pgd(&self.model, &x, &y, &atk)?;

            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape);
            let adv_out =
                self.model
                    .forward(&mut tape, &bound, &x_adv, Branch::Main, Mode::Train, &tags)?;
            let clean_out =
                self.model
                    .forward(&mut tape, &bound, &x, clean_branch, Mode::Train, &tags)?;
            bn_clean_log.push(clean_out.bn_batch.clone());
            bn_adv_log.push(adv_out.bn_batch.clone());

            let breakdown = losses::assemble_loss(
                &mut tape,
                &self.model,
                &bound,
                &assembly,
                &adv_out,
                &clean_out,
                &y,
            )?;
            let total = breakdown.total.values()[0];
            if !total.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi });
            }

            let nb = y.len() as f64;
            sums[0] += total * nb;
            sums[1] += breakdown.adv_cls.values()[0] * nb;
            sums[2] += breakdown.clean_cls.values()[0] * nb;
            sums[3] += breakdown.invariance.values()[0] * nb;
            for (tag, v) in &breakdown.per_tag_invariance {
                *tag_sums.entry(tag.clone()).or_default() += v * nb;
            }
            clean_correct += count_correct(&clean_out.logits, &y);
            adv_correct += count_correct(&adv_out.logits, &y);
            seen += y.len();

            // Conflict meter on the first batch, before the update.
            if bi == 0 {
                let cls_a = tape.scale(&breakdown.adv_cls, self.alpha)?;
                let cls_b = tape.scale(&breakdown.clean_cls, self.beta)?;
                let cls = tape.add(&cls_a, &cls_b)?;
                let pair = diagnostics::gradient_pair(&tape, &bound, &cls, &breakdown.invariance)?;
                let conflict = diagnostics::conflict_report(&pair, Granularity::Block)?;
                records.push(MetricRecord::new(epoch, "grad_cosine", conflict.global_cosine));
                records.push(MetricRecord::new(
                    epoch,
                    "grad_conflict_fraction",
                    conflict.conflict_fraction,
                ));
            }

            let grads = tape.backward(&breakdown.total)?;
            if bi == 0 {
                let map: GradMap = bound
                    .iter()
                    .map(|(k, leaf)| (k.clone(), grads.wrt(leaf)))
                    .collect();
                records.push(MetricRecord::new(
                    epoch,
                    "grad_norm",
                    diagnostics::loss_gradient_norm(&map),
                ));
            }
            for (name, p) in self.model.params_mut().iter_mut() {
                let g = grads.wrt(&bound[name]);
                let v = self
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                sgd_step(
                    p.values_mut(),
                    g.values(),
                    v,
                    lr,
                    self.cfg.momentum,
                    self.cfg.weight_decay,
                );
            }
        }

        let train_clean_acc = clean_correct as f64 / seen as f64;
        let train_adv_acc = adv_correct as f64 / seen as f64;
        self.last_clean_acc = Some(train_clean_acc);

        let n = seen as f64;
        for (label, value) in [
            ("loss_total", sums[0] / n),
            ("loss_adv_cls", sums[1] / n),
            ("loss_clean_cls", sums[2] / n),
            ("loss_invariance", sums[3] / n),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lr", lr),
            ("train_clean_acc", train_clean_acc),
            ("train_adv_acc", train_adv_acc),
        ] {
            records.push(MetricRecord::new(epoch, label, value));
        }
        for (tag, sum) in &tag_sums {
            records.push(MetricRecord::new(epoch, "invariance_distance", sum / n).with_layer(tag));
        }

        // Probe instruments on the epoch's final model.
        let (px, py) = self.probe_batch(data)?;
        let mut probe_atk = self.cfg.attack.clone();
        probe_atk.seed = self.cfg.seed ^ PROBE_ATTACK_SALT;
        let (z, z_adv) = diagnostics::penultimate_pair(&self.model, &px, &py, &probe_atk, clean_branch)?;
        let dist = diagnostics::row_l2_distances(&z, &z_adv)?;
        records.push(MetricRecord::new(
            epoch,
            "feature_distance",
            dist.iter().sum::<f64>() / dist.len() as f64,
        ));
        let cos = diagnostics::row_cosines(&z, &z_adv)?;
        records.push(MetricRecord::new(
            epoch,
            "representation_similarity",
            cos.iter().sum::<f64>() / cos.len() as f64,
        ));
        if let Some(prev) = &self.prev_probe_adv {
            records.push(MetricRecord::new(
                epoch,
                "representation_drift",
                diagnostics::representation_drift(prev, &z_adv)?,
            ));
        }
        self.prev_probe_adv = Some(z_adv);

        for (name, t) in self.model.stats() {
            if let Some(rest) = name.strip_suffix(".mean") {
                let mut parts = rest.split('.');
                let layer = parts.next().unwrap_or_default();
                let branch = match parts.nth(1) {
                    Some("aux") => Branch::Aux,
                    _ => Branch::Main,
                };
                records.push(
                    MetricRecord::new(
                        epoch,
                        "bn_stat_variance",
                        diagnostics::population_variance(t.values()),
                    )
                    .with_layer(layer)
                    .with_branch(branch),
                );
            }
        }

        if let Some(start) = self.cfg.swa_start {
            if epoch >= start {
                self.swa.get_or_insert_with(SwaState::new).update(&self.model)?;
            }
        }

        Ok(EpochReport {
            epoch,
            lr,
            alpha: self.alpha,
            beta: self.beta,
            batches: batches.len(),
            mean_total: sums[0] / n,
            mean_adv_cls: sums[1] / n,
            mean_clean_cls: sums[2] / n,
            mean_invariance: sums[3] / n,
            train_clean_acc,
            train_adv_acc,
            records,
            bn_clean_log,
            bn_adv_log,
        })
    }
}

/// A finished run: the trained model, the averaged model when weight
/// averaging was on, and every epoch's report.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub swa_model: Option<ModelState>,
    pub reports: Vec<EpochReport>,
}

/// Runs every epoch in order and finalizes weight averaging.
pub fn train_full(
    cfg: &TrainConfig,
    model: ModelState,
    train: &Dataset,
    augment: Option<&AugmentationConfig>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), model)?;
    let mut reports = Vec::with_capacity(cfg.epochs);
    for t in 0..cfg.epochs {
        reports.push(trainer.run_epoch(train, augment, t)?);
    }
    let swa_model = match &trainer.swa {
        Some(swa) if swa.count() > 0 => {
            let mut m = swa.averaged_model(&trainer.model)?;
            calibrate_bn(&mut m, train, cfg)?;
            Some(m)
        }
        _ => None,
    };
    Ok(TrainOutcome {
        model: trainer.model,
        swa_model,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{running_update, Arch};

    fn tiny_assembly(variant: Variant) -> LossAssembly {
        let arch = tiny_arch();
        LossAssembly {
            variant,
            alpha: 1.0,
            beta: 1.0,
            gamma: 2.0,
            capture_tags: arch.tags(),
        }
    }

    fn tiny_arch() -> Arch {
        Arch {
            in_channels: 1,
            image_hw: 8,
            widths: vec![2, 2],
            blocks_per_stage: 1,
            classes: 2,
        }
    }

    fn tiny_cfg(variant: Variant, epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig::desk(tiny_assembly(variant));
        cfg.epochs = epochs;
        cfg.lr_drop_epochs = vec![];
        cfg.batch_size = 4;
        cfg.base_lr = 0.01;
        cfg.attack.iterations = 1;
        cfg.attack.epsilon = 0.03;
        cfg.attack.step_size = 0.02;
        cfg.eval_attack.iterations = 2;
        cfg
    }

    fn tiny_data(seed: u64) -> Dataset {
        data::synth_generate(2, 4, 8, seed).unwrap()
    }

    #[test]
    fn balance_rule_known_values() {
        assert_eq!(auto_balance_update(0.6).unwrap(), (0.6, 0.4));
        assert_eq!(auto_balance_update(0.0).unwrap(), (0.0, 1.0));
        assert_eq!(auto_balance_update(1.0).unwrap(), (1.0, 0.0));
        assert!(auto_balance_update(1.5).is_err());
        assert!(auto_balance_update(-0.1).is_err());
    }

    #[test]
    fn lr_schedule_steps_down_at_drops() {
        let mut cfg = TrainConfig::desk(tiny_assembly(Variant::V1));
        cfg.epochs = 100;
        cfg.base_lr = 0.1;
        cfg.lr_drop_epochs = vec![75, 90];
        cfg.lr_drop_factor = 0.1;
        assert!((lr_at_epoch(&cfg, 0) - 0.1).abs() < 1e-15);
        assert!((lr_at_epoch(&cfg, 74) - 0.1).abs() < 1e-15);
        assert!((lr_at_epoch(&cfg, 75) - 0.01).abs() < 1e-15);
        assert!((lr_at_epoch(&cfg, 90) - 0.001).abs() < 1e-15);
        cfg.lr_drop_epochs.clear();
        assert_eq!(lr_at_epoch(&cfg, 99), 0.1);
    }

    #[test]
    fn config_validation_rejects_bad_schedules() {
        let mut cfg = TrainConfig::desk(tiny_assembly(Variant::V1));
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk(tiny_assembly(Variant::V1));
        cfg.lr_drop_epochs = vec![10, 10];
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk(tiny_assembly(Variant::V1));
        cfg.lr_drop_epochs = vec![40];
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk(tiny_assembly(Variant::V1));
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk(tiny_assembly(Variant::V1));
        cfg.swa_start = Some(30);
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::desk(tiny_assembly(Variant::V3)).validate().is_ok());
    }

    #[test]
    fn sgd_step_matches_hand_computation() {
        // Plain step: p - lr * g.
        let mut p = [2.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[3.0], &mut v, 0.1, 0.0, 0.0);
        assert!((p[0] - 1.7).abs() < 1e-15);

        // Momentum 0.9, decay 0.1, two steps, worked by hand.
        let mut p = [2.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[3.0], &mut v, 0.1, 0.9, 0.1);
        assert!((v[0] - 3.0).abs() < 1e-15);
        assert!((p[0] - 1.68).abs() < 1e-12);
        sgd_step(&mut p, &[-1.0], &mut v, 0.1, 0.9, 0.1);
        assert!((v[0] - 1.7).abs() < 1e-12);
        assert!((p[0] - 1.4932).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut cfg = tiny_cfg(Variant::V1, 1);
        cfg.base_lr = 0.0;
        let model = ModelState::init(&tiny_arch(), 3).unwrap();
        let before = model.params().clone();
        let mut trainer = Trainer::new(cfg, model).unwrap();
        trainer.run_epoch(&tiny_data(1), None, 0).unwrap();
        for (name, p) in trainer.model.params() {
            assert_eq!(p.values(), before[name].values(), "{name} moved");
        }
    }

    #[test]
    fn auto_balance_tracks_previous_epoch_accuracy() {
        let mut cfg = tiny_cfg(Variant::V3, 2);
        cfg.auto_balance = true;
        let model = ModelState::init(&tiny_arch(), 5).unwrap();
        let data = tiny_data(2);
        let mut trainer = Trainer::new(cfg, model).unwrap();
        let r0 = trainer.run_epoch(&data, None, 0).unwrap();
        assert_eq!((r0.alpha, r0.beta), (1.0, 1.0));
        let r1 = trainer.run_epoch(&data, None, 1).unwrap();
        assert_eq!(r1.alpha, r0.train_clean_acc);
        assert_eq!(r1.beta, 1.0 - r0.train_clean_acc);
        assert!((r1.alpha + r1.beta - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_configs_produce_identical_runs() {
        let cfg = tiny_cfg(Variant::V3, 2);
        let data = tiny_data(3);
        let run = |seed| {
            let model = ModelState::init(&tiny_arch(), seed).unwrap();
            train_full(&cfg, model, &data, None).unwrap()
        };
        let a = run(7);
        let b = run(7);
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
        for (ra, rb) in a.reports.iter().zip(&b.reports) {
            assert_eq!(ra.records, rb.records);
        }
        let c = run(8);
        assert_ne!(a.model.to_bytes(), c.model.to_bytes());
    }

    #[test]
    fn averaged_snapshots_equal_brute_force_mean() {
        let arch = tiny_arch();
        let snaps: Vec<ModelState> = (0..3)
            .map(|s| ModelState::init(&arch, 100 + s).unwrap())
            .collect();
        let mut swa = SwaState::new();
        swa.update(&snaps[0]).unwrap();
        let single = swa.averaged_model(&snaps[0]).unwrap();
        for (name, p) in single.params() {
            assert_eq!(p.values(), snaps[0].params()[name].values());
        }
        swa.update(&snaps[1]).unwrap();
        swa.update(&snaps[2]).unwrap();
        assert_eq!(swa.count(), 3);
        let avg = swa.averaged_model(&snaps[0]).unwrap();
        for (name, p) in avg.params() {
            let brute: Vec<f64> = (0..p.len())
                .map(|i| {
                    snaps.iter().map(|m| m.params()[name].values()[i]).sum::<f64>() / 3.0
                })
                .collect();
            for (a, b) in p.values().iter().zip(&brute) {
                assert!((a - b).abs() < 1e-12, "{name}");
            }
        }

        // Mismatched architectures are rejected.
        let other = ModelState::init(
            &Arch {
                widths: vec![3, 3],
                ..tiny_arch()
            },
            0,
        )
        .unwrap();
        assert!(swa.update(&other).is_err());
        assert!(SwaState::new().averaged_model(&snaps[0]).is_err());
    }

    #[test]
    fn two_snapshot_average_is_the_midpoint() {
        let arch = tiny_arch();
        let a = ModelState::init(&arch, 1).unwrap();
        let b = ModelState::init(&arch, 2).unwrap();
        let mut swa = SwaState::new();
        swa.update(&a).unwrap();
        swa.update(&b).unwrap();
        let avg = swa.averaged_model(&a).unwrap();
        for (name, p) in avg.params() {
            for i in 0..p.len() {
                let want = (a.params()[name].values()[i] + b.params()[name].values()[i]) / 2.0;
                assert!((p.values()[i] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_batch_index() {
        let cfg = tiny_cfg(Variant::V1, 1);
        let mut model = ModelState::init(&tiny_arch(), 4).unwrap();
        let poisoned = model.params_mut().get_mut("fc.w").unwrap();
        poisoned.values_mut()[0] = f64::NAN;
        let mut trainer = Trainer::new(cfg, model).unwrap();
        let err = trainer.run_epoch(&tiny_data(4), None, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("batch 0"), "{msg}");
        assert!(msg.contains("epoch 0"), "{msg}");
    }

    #[test]
    fn evaluate_degenerate_attacks_match_clean() {
        let model = ModelState::init(&tiny_arch(), 6).unwrap();
        let data = tiny_data(5);
        let before = model.to_bytes();
        let (clean, robust) = evaluate(&model, &data, Branch::Main, None).unwrap();
        assert_eq!(clean, robust);

        let mut zero = TrainConfig::desk(tiny_assembly(Variant::V1)).eval_attack;
        zero.epsilon = 0.0;
        zero.iterations = 2;
        let (c2, r2) = evaluate(&model, &data, Branch::Main, Some(&zero)).unwrap();
        assert_eq!(c2, clean);
        assert_eq!(c2, r2);

        let mut real = zero.clone();
        real.epsilon = 0.05;
        real.step_size = 0.02;
        let _ = evaluate(&model, &data, Branch::Aux, Some(&real)).unwrap();
        assert_eq!(model.to_bytes(), before);
    }

    #[test]
    fn aux_running_stats_replay_from_the_clean_log() {
        // Under the asymmetric variant the aux branch sees only the clean
        // stream, so replaying the logged clean batch statistics through
        // the running-update rule lands exactly on the stored stats.
        let cfg = tiny_cfg(Variant::V3, 2);
        let model = ModelState::init(&tiny_arch(), 9).unwrap();
        let momentum = model.bn_momentum();
        let data = tiny_data(6);
        let mut trainer = Trainer::new(cfg, model).unwrap();
        let mut log = Vec::new();
        for t in 0..2 {
            log.extend(trainer.run_epoch(&data, None, t).unwrap().bn_clean_log);
        }
        let mut replay: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for batch in &log {
            for stat in batch {
                assert_eq!(stat.branch, Branch::Aux);
                let entry = replay.entry(stat.layer.clone()).or_insert_with(|| {
                    (vec![0.0; stat.mean.len()], vec![1.0; stat.var.len()])
                });
                entry.0 = running_update(&entry.0, &stat.mean, momentum);
                entry.1 = running_update(&entry.1, &stat.var, momentum);
            }
        }
        for (layer, (mean, var)) in &replay {
            let stored_mean = &trainer.model.stats()[&format!("{layer}.bn.aux.mean")];
            let stored_var = &trainer.model.stats()[&format!("{layer}.bn.aux.var")];
            assert_eq!(stored_mean.values(), mean.as_slice(), "{layer} mean");
            assert_eq!(stored_var.values(), var.as_slice(), "{layer} var");
        }
        assert!(!replay.is_empty());
    }

    #[test]
    fn swa_runs_end_to_end_and_recalibrates() {
        let mut cfg = tiny_cfg(Variant::V1, 2);
        cfg.swa_start = Some(0);
        let model = ModelState::init(&tiny_arch(), 11).unwrap();
        let data = tiny_data(7);
        let out = train_full(&cfg, model, &data, None).unwrap();
        let swa = out.swa_model.expect("swa model");
        // Recalibration moved the running stats away from the reset state.
        let moved = swa
            .stats()
            .iter()
            .any(|(name, t)| name.ends_with(".mean") && t.values().iter().any(|&v| v != 0.0));
        assert!(moved);
        assert_ne!(swa.to_bytes(), out.model.to_bytes());
    }
}
