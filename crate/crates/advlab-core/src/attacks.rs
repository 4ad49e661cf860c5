//! Adversarial example generation: FGSM and iterative PGD under Linf or
//! L2 constraints.
//!
//! Attacks run against a frozen model: parameters are presented as
//! constants and batch norm reads running statistics, so crafting a
//! perturbation can never mutate the model. Every call owns its RNG,
//! seeded from the config, leaving caller streams untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::losses::{cross_entropy, LossError};
use crate::nn::{Branch, ModelError, ModelState};
use crate::tensor::{Tape, Tensor, TensorError};

/// Errors from attack configuration and execution.
#[derive(Debug, Error)]
pub enum AttackError {
    #[error("bad attack config: {0}")]
    BadConfig(String),
    #[error("cannot attack an empty batch")]
    ZeroBatch,
    #[error("labels: {want} expected, got {got}")]
    LabelMismatch { want: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

/// Perturbation constraint set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackNorm {
    Linf,
    L2,
}

impl AttackNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackNorm::Linf => "linf",
            AttackNorm::L2 => "l2",
        }
    }
}

/// Objective maximized while crafting the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

/// Everything one attack needs to run reproducibly.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub norm: AttackNorm,
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub random_init: bool,
    pub loss_kind: LossKind,
    pub branch: Branch,
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(AttackError::BadConfig(format!(
                "epsilon must be finite and nonnegative, got {}",
                self.epsilon
            )));
        }
        if self.iterations > 0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(AttackError::BadConfig(format!(
                "step_size must be positive when iterating, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects a perturbation back into the epsilon ball. Linf clamps each
/// coordinate; L2 rescales any too-long row of the batch axis and leaves
/// shorter ones untouched.
pub fn project(delta: &Tensor, epsilon: f64, norm: AttackNorm) -> Result<Tensor> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(AttackError::BadConfig(format!(
            "epsilon must be finite and nonnegative, got {epsilon}"
        )));
    }
    if delta.shape().is_empty() {
        return Err(AttackError::BadConfig(
            "projection needs a batch axis".into(),
        ));
    }
    let mut out = delta.detach();
    let n = delta.shape()[0];
    let per = if n == 0 { 0 } else { delta.len() / n };
    let vals = out.values_mut();
    match norm {
        AttackNorm::Linf => {
            for v in vals.iter_mut() {
                *v = v.clamp(-epsilon, epsilon);
            }
        }
        AttackNorm::L2 => {
            for i in 0..n {
                let row = &mut vals[i * per..(i + 1) * per];
                let len = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if len > epsilon {
                    let scale = epsilon / len;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Iterative projected gradient ascent on an arbitrary differentiable
/// logits function. `logits_fn` must treat everything except the input as
/// constant. Pixels are assumed to live in [0,1] and stay there.
pub fn pgd_with<F>(mut logits_fn: F, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    if x.shape().is_empty() || x.shape()[0] == 0 {
        return Err(AttackError::ZeroBatch);
    }
    let n = x.shape()[0];
    if y.len() != n {
        return Err(AttackError::LabelMismatch {
            want: n,
            got: y.len(),
        });
    }
    let per = x.len() / n;
    let x0 = x.values();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut cur = x0.to_vec();
    if cfg.random_init && cfg.epsilon > 0.0 {
        let mut delta = vec![0.0; x.len()];
        match cfg.norm {
            AttackNorm::Linf => {
                for d in delta.iter_mut() {
                    *d = rng.random_range(-cfg.epsilon..cfg.epsilon);
                }
            }
            AttackNorm::L2 => {
                // Gaussian direction scaled by a radius with the density of
                // a uniform draw from the ball.
                for i in 0..n {
                    let row = &mut delta[i * per..(i + 1) * per];
                    for d in row.iter_mut() {
                        *d = rng.sample(StandardNormal);
                    }
                    let len = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-20);
                    let radius =
                        cfg.epsilon * rng.random_range(0.0..1.0f64).powf(1.0 / per as f64);
                    for d in row.iter_mut() {
                        *d *= radius / len;
                    }
                }
            }
        }
        apply_delta(&mut cur, x0, &delta, cfg, x.shape())?;
    }

    for _ in 0..cfg.iterations {
        let mut tape = Tape::new();
        let leaf = tape.leaf(&Tensor::new(x.shape(), cur.clone())?);
        let logits = logits_fn(&mut tape, &leaf)?;
        let loss = match cfg.loss_kind {
            LossKind::CrossEntropy => cross_entropy(&mut tape, &logits, y)?,
        };
        let grads = tape.backward(&loss)?;
        let g = grads.wrt(&leaf);
        let gv = g.values();
        match cfg.norm {
            AttackNorm::Linf => {
                for (c, &gr) in cur.iter_mut().zip(gv) {
                    *c += cfg.step_size * sign(gr);
                }
            }
            AttackNorm::L2 => {
                for i in 0..n {
                    let row = &gv[i * per..(i + 1) * per];
                    let len = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if len > 1e-20 {
                        for (c, &gr) in cur[i * per..(i + 1) * per].iter_mut().zip(row) {
                            *c += cfg.step_size * gr / len;
                        }
                    }
                }
            }
        }
        let delta: Vec<f64> = cur.iter().zip(x0).map(|(c, o)| c - o).collect();
        apply_delta(&mut cur, x0, &delta, cfg, x.shape())?;
    }
    Ok(Tensor::new(x.shape(), cur)?)
}

/// Projects delta into the ball, re-applies it to the clean input, and
/// clips to the valid pixel range.
fn apply_delta(
    cur: &mut [f64],
    x0: &[f64],
    delta: &[f64],
    cfg: &AttackConfig,
    shape: &[usize],
) -> Result<()> {
    let d = Tensor::new(shape, delta.to_vec())?;
    let projected = project(&d, cfg.epsilon, cfg.norm)?;
    for ((c, &o), &p) in cur.iter_mut().zip(x0).zip(projected.values()) {
        *c = (o + p).clamp(0.0, 1.0);
    }
    Ok(())
}

/// PGD against a model, crafting on the configured batch norm branch with
/// frozen statistics. The model is untouched.
pub fn pgd(model: &ModelState, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    let bound = model.bind_frozen();
    pgd_with(
        |tape, input| {
            let out = model.forward_eval(tape, &bound, input, cfg.branch, &[])?;
            Ok(out.logits)
        },
        x,
        y,
        cfg,
    )
}

/// Single sign step of size epsilon: PGD with one iteration and no random
/// start.
pub fn fgsm(
    model: &ModelState,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    branch: Branch,
) -> Result<Tensor> {
    if epsilon == 0.0 {
        // Zero radius admits no step at all.
        return Ok(x.detach());
    }
    let cfg = AttackConfig {
        norm: AttackNorm::Linf,
        epsilon,
        step_size: epsilon,
        iterations: 1,
        random_init: false,
        loss_kind: LossKind::CrossEntropy,
        branch,
        seed: 0,
    };
    pgd(model, x, y, &cfg)
}
