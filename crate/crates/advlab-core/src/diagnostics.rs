//! Measurement instruments for watching a run from the side: gradient
//! conflict between the classification and invariance terms, feature
//! distance between clean and adversarial representations, the spread of
//! BatchNorm running statistics, representation similarity and drift, and
//! plain gradient norms.
//!
//! Everything here is read-only. Instruments take frozen models, captured
//! representations, or already-computed gradient maps, and none of them
//! touch running statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{self, AttackConfig, AttackError};
use crate::nn::{Branch, BoundParams, ModelError, ModelState};
use crate::tensor::{Tape, Tensor, TensorError, NORM_EPS};

/// Errors from instrument construction and evaluation.
#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("gradient maps disagree on parameter ids near '{0}'")]
    IdMismatch(String),
    #[error("gradient maps disagree on the shape of '{0}'")]
    BlockShape(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("row count mismatch: {left} vs {right}")]
    RowMismatch { left: usize, right: usize },
    #[error("expected a [n, d] matrix, got {0:?}")]
    NotMatrix(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

/// Gradient tensors keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// The two gradient fields the conflict meter compares: the weighted
/// classification terms and the bare (weight-free) invariance term, taken
/// with respect to the same parameters.
#[derive(Debug)]
pub struct GradientPair {
    pub grad_cls: GradMap,
    pub grad_inv: GradMap,
}

/// Unit over which the conflict fraction is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Granularity {
    /// One unit per parameter tensor (weight matrix, bias vector).
    #[default]
    Block,
    /// One unit per scalar entry.
    Scalar,
}

/// What the conflict meter reports for one gradient pair.
#[derive(Debug, Clone)]
pub struct ConflictReport {
    /// Cosine between the two fully flattened gradient vectors.
    pub global_cosine: f64,
    /// Fraction of units whose dot product is negative. Units where either
    /// side is exactly zero are left out of the denominator.
    pub conflict_fraction: f64,
    /// Per-tensor cosines, skipping tensors where either side is zero.
    pub per_parameter: Vec<(String, f64)>,
}

/// Runs backward once per loss term and collects gradients for every bound
/// parameter, so both maps cover the same ids (zeros where a term does not
/// reach a parameter).
pub fn gradient_pair(
    tape: &Tape,
    bound: &BoundParams,
    cls_term: &Tensor,
    inv_term: &Tensor,
) -> Result<GradientPair> {
    let g_cls = tape.backward(cls_term)?;
    let g_inv = tape.backward(inv_term)?;
    let mut grad_cls = GradMap::new();
    let mut grad_inv = GradMap::new();
    for (name, leaf) in bound {
        grad_cls.insert(name.clone(), g_cls.wrt(leaf));
        grad_inv.insert(name.clone(), g_inv.wrt(leaf));
    }
    Ok(GradientPair { grad_cls, grad_inv })
}

/// Measures directional agreement between the pair's two gradient fields.
pub fn conflict_report(pair: &GradientPair, granularity: Granularity) -> Result<ConflictReport> {
    if pair.grad_cls.is_empty() || pair.grad_inv.is_empty() {
        return Err(DiagnosticsError::Empty("gradient map"));
    }
    if pair.grad_cls.len() != pair.grad_inv.len() {
        let name = pair
            .grad_cls
            .keys()
            .find(|k| !pair.grad_inv.contains_key(*k))
            .or_else(|| pair.grad_inv.keys().find(|k| !pair.grad_cls.contains_key(*k)))
            .cloned()
            .unwrap_or_default();
        return Err(DiagnosticsError::IdMismatch(name));
    }

    let mut global_dot = 0.0;
    let mut global_a2 = 0.0;
    let mut global_b2 = 0.0;
    let mut per_parameter = Vec::new();
    let mut units = 0usize;
    let mut conflicts = 0usize;

    for (name, a) in &pair.grad_cls {
        let b = pair
            .grad_inv
            .get(name)
            .ok_or_else(|| DiagnosticsError::IdMismatch(name.clone()))?;
        if a.shape() != b.shape() {
            return Err(DiagnosticsError::BlockShape(name.clone()));
        }
        let mut dot = 0.0;
        let mut a2 = 0.0;
        let mut b2 = 0.0;
        for (&av, &bv) in a.values().iter().zip(b.values()) {
            dot += av * bv;
            a2 += av * av;
            b2 += bv * bv;
            if granularity == Granularity::Scalar && av != 0.0 && bv != 0.0 {
                units += 1;
                if av * bv < 0.0 {
                    conflicts += 1;
                }
            }
        }
        global_dot += dot;
        global_a2 += a2;
        global_b2 += b2;
        if a2 > 0.0 && b2 > 0.0 {
            per_parameter.push((name.clone(), dot / (a2.sqrt() * b2.sqrt())));
            if granularity == Granularity::Block {
                units += 1;
                if dot < 0.0 {
                    conflicts += 1;
                }
            }
        }
    }

    let denom = global_a2.sqrt() * global_b2.sqrt();
    let global_cosine = if denom > 0.0 { global_dot / denom } else { 0.0 };
    let conflict_fraction = if units > 0 {
        conflicts as f64 / units as f64
    } else {
        0.0
    };
    Ok(ConflictReport {
        global_cosine,
        conflict_fraction,
        per_parameter,
    })
}

/// Global L2 norm of a gradient map, over the flattened concatenation.
pub fn loss_gradient_norm(map: &GradMap) -> f64 {
    map.values()
        .flat_map(|t| t.values())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Population variance of one running-mean snapshot across channels.
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64
}

/// Per-epoch variance across channels of a BN layer's running means.
pub fn bn_stat_variance(snapshots: &[Vec<f64>]) -> Vec<f64> {
    snapshots.iter().map(|s| population_variance(s)).collect()
}

fn check_matrix_pair(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if a.shape().len() != 2 {
        return Err(DiagnosticsError::NotMatrix(a.shape().to_vec()));
    }
    if b.shape().len() != 2 {
        return Err(DiagnosticsError::NotMatrix(b.shape().to_vec()));
    }
    if a.shape() != b.shape() {
        return Err(DiagnosticsError::RowMismatch {
            left: a.shape()[0],
            right: b.shape()[0],
        });
    }
    Ok((a.shape()[0], a.shape()[1]))
}

/// Per-row L2 distances between two [n, d] matrices.
pub fn row_l2_distances(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = check_matrix_pair(a, b)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..d {
            let diff = a.values()[i * d + j] - b.values()[i * d + j];
            s += diff * diff;
        }
        out.push(s.sqrt());
    }
    Ok(out)
}

/// Per-row cosine similarities between two [n, d] matrices, with the same
/// epsilon guard the invariance losses use.
pub fn row_cosines(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = check_matrix_pair(a, b)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut dot = 0.0;
        let mut a2 = 0.0;
        let mut b2 = 0.0;
        for j in 0..d {
            let (av, bv) = (a.values()[i * d + j], b.values()[i * d + j]);
            dot += av * bv;
            a2 += av * av;
            b2 += bv * bv;
        }
        out.push(dot / (a2.sqrt() * b2.sqrt() + NORM_EPS));
    }
    Ok(out)
}

/// Penultimate pooled representations of a batch and its adversarial
/// counterpart: `(z_clean, z_adv)`. The clean pass runs through
/// `clean_branch`, the adversarial pass through the attacked branch, both
/// with frozen statistics.
pub fn penultimate_pair(
    model: &ModelState,
    x: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    clean_branch: Branch,
) -> Result<(Tensor, Tensor)> {
    let x_adv = attacks::pgd(model, x, labels, attack)?;
    let bound = model.bind_frozen();
    let mut tape = Tape::new();
    let clean = model.forward_eval(&mut tape, &bound, x, clean_branch, &[])?;
    let adv = model.forward_eval(&mut tape, &bound, &x_adv, attack.branch, &[])?;
    Ok((clean.penultimate.detach(), adv.penultimate.detach()))
}

/// Mean L2 distance between clean and adversarial penultimate features.
pub fn feature_distance(
    model: &ModelState,
    x: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    clean_branch: Branch,
) -> Result<f64> {
    let (z, z_adv) = penultimate_pair(model, x, labels, attack, clean_branch)?;
    let d = row_l2_distances(&z, &z_adv)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Mean cosine similarity between clean and adversarial penultimate
/// features over a batch.
pub fn representation_similarity(
    model: &ModelState,
    x: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    clean_branch: Branch,
) -> Result<f64> {
    let (z, z_adv) = penultimate_pair(model, x, labels, attack, clean_branch)?;
    let c = row_cosines(&z, &z_adv)?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

/// Mean cosine distance between representations of the same probe batch
/// captured at two different points in training.
pub fn representation_drift(earlier: &Tensor, later: &Tensor) -> Result<f64> {
    let c = row_cosines(earlier, later)?;
    Ok(c.iter().map(|v| 1.0 - v).sum::<f64>() / c.len() as f64)
}

/// One measurement, as written to the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub instrument: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch: Option<String>,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(epoch: usize, instrument: &str, value: f64) -> Self {
        MetricRecord {
            epoch,
            instrument: instrument.to_string(),
            layer: None,
            branch: None,
            value,
        }
    }

    pub fn with_layer(mut self, layer: &str) -> Self {
        self.layer = Some(layer.to_string());
        self
    }

    pub fn with_branch(mut self, branch: Branch) -> Self {
        self.branch = Some(branch.as_str().to_string());
        self
    }
}
