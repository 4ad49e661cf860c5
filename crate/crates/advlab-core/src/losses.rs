//! Scalar objectives: cross-entropy, KL divergence, cosine distance, and
//! the assembled two-pass training losses.
//!
//! An assembled loss always combines an adversarial classification term, a
//! clean classification term, and an invariance term that ties the two
//! passes' representations together. The variants differ in where the
//! gradient is allowed to flow (stop-gradient on the clean side), whether a
//! predictor head transforms the adversarial representation first, and
//! which batch norm branch the clean pass ran on.

use thiserror::Error;

use crate::nn::{Branch, BoundParams, ForwardOutput, ModelError, ModelState};
use crate::tensor::{stop_gradient, Tape, Tensor, TensorError, NORM_EPS};

/// Errors from loss assembly and the scalar objectives.
#[derive(Debug, Error)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("{what}: {want} rows expected, got {got}")]
    BatchMismatch {
        what: &'static str,
        want: usize,
        got: usize,
    },
    #[error("{variant} needs the clean pass on branch {want}, got {got}")]
    WrongBranch {
        variant: &'static str,
        want: &'static str,
        got: &'static str,
    },
    #[error("adversarial pass must run on branch main, got {0}")]
    AdvBranch(&'static str),
    #[error("capture tag {0} missing from a forward output")]
    MissingRep(String),
    #[error("bad assembly: {0}")]
    BadAssembly(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// The five assembled training objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Naive siamese: both passes live, gradient flows everywhere.
    V0,
    /// V0 plus stop-gradient on the clean representation.
    V1,
    /// V1 plus a predictor head on the adversarial representation.
    V2,
    /// V2 with the clean pass on the aux batch norm branch.
    V3,
    /// Logit-level KL against the stopped aux clean pass, no predictor.
    AsymTrades,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::V0 => "v0",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::AsymTrades => "asym-trades",
        }
    }

    /// Which branch the clean pass must run on.
    pub fn clean_branch(self) -> Branch {
        match self {
            Variant::V0 | Variant::V1 | Variant::V2 => Branch::Main,
            Variant::V3 | Variant::AsymTrades => Branch::Aux,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Variant, String> {
        match s {
            "v0" => Ok(Variant::V0),
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            "asym-trades" => Ok(Variant::AsymTrades),
            other => Err(format!(
                "unknown variant {other}, expected v0|v1|v2|v3|asym-trades"
            )),
        }
    }
}

/// Weights and wiring for one assembled objective.
#[derive(Debug, Clone)]
pub struct LossAssembly {
    pub variant: Variant,
    /// Weight on the adversarial classification term.
    pub alpha: f64,
    /// Weight on the clean classification term.
    pub beta: f64,
    /// Weight on the invariance term.
    pub gamma: f64,
    /// Tags whose pooled representations are regularized, in order.
    pub capture_tags: Vec<String>,
}

impl LossAssembly {
    /// Checks weights and tag list before any compute.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::BadAssembly(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.variant != Variant::AsymTrades && self.capture_tags.is_empty() {
            return Err(LossError::BadAssembly(format!(
                "variant {} needs at least one capture tag",
                self.variant.as_str()
            )));
        }
        Ok(())
    }
}

/// The assembled scalar plus its pieces, all live on the tape.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// alpha * adv_cls + beta * clean_cls + gamma * invariance.
    pub total: Tensor,
    pub adv_cls: Tensor,
    pub clean_cls: Tensor,
    pub invariance: Tensor,
    /// Forward value of the distance at each regularized tag.
    pub per_tag_invariance: Vec<(String, f64)>,
}

/// Mean over the batch of -log softmax(logits)[label].
pub fn cross_entropy(tape: &mut Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(TensorError::BadRank {
            op: "cross_entropy",
            expected: 2,
            shape: logits.shape().to_vec(),
        }
        .into());
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(LossError::BatchMismatch {
            what: "cross_entropy labels",
            want: n,
            got: labels.len(),
        });
    }
    let mut onehot = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(LossError::BadLabel {
                label: y,
                classes: k,
            });
        }
        onehot[i * k + y] = 1.0;
    }
    let mask = Tensor::new(&[n, k], onehot)?;
    let ls = tape.log_softmax(logits)?;
    let picked = tape.mul(&ls, &mask)?;
    let sum = tape.sum_all(&picked)?;
    Ok(tape.scale(&sum, -1.0 / n as f64)?)
}

/// Mean over the batch of 1 - (u.v)/(|u||v| + eps). Scale-invariant, so it
/// normalizes the representations it compares.
pub fn cosine_distance(tape: &mut Tape, u: &Tensor, v: &Tensor) -> Result<Tensor> {
    if u.shape() != v.shape() || u.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_distance",
            lhs: u.shape().to_vec(),
            rhs: v.shape().to_vec(),
        }
        .into());
    }
    let prod = tape.mul(u, v)?;
    let dots = tape.sum_axis(&prod, 1)?;
    let nu = tape.row_l2_norm(u)?;
    let nv = tape.row_l2_norm(v)?;
    let nn = tape.mul(&nu, &nv)?;
    let denom = tape.add_scalar(&nn, NORM_EPS)?;
    let cos = tape.div(&dots, &denom)?;
    let neg = tape.scale(&cos, -1.0)?;
    let one_minus = tape.add_scalar(&neg, 1.0)?;
    Ok(tape.mean_all(&one_minus)?)
}

/// Mean over the batch of KL(softmax(p_logits) || softmax(q_logits)).
pub fn kl_div(tape: &mut Tape, p_logits: &Tensor, q_logits: &Tensor) -> Result<Tensor> {
    if p_logits.shape() != q_logits.shape() || p_logits.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "kl_div",
            lhs: p_logits.shape().to_vec(),
            rhs: q_logits.shape().to_vec(),
        }
        .into());
    }
    let n = p_logits.shape()[0];
    let lp = tape.log_softmax(p_logits)?;
    let lq = tape.log_softmax(q_logits)?;
    let p = tape.exp(&lp)?;
    let diff = tape.sub(&lp, &lq)?;
    let terms = tape.mul(&p, &diff)?;
    let sum = tape.sum_all(&terms)?;
    Ok(tape.scale(&sum, 1.0 / n as f64)?)
}

/// Assembles the configured objective from an adversarial pass and a clean
/// pass over the same labeled batch.
pub fn assemble_loss(
    tape: &mut Tape,
    model: &ModelState,
    bound: &BoundParams,
    assembly: &LossAssembly,
    adv: &ForwardOutput,
    clean: &ForwardOutput,
    labels: &[usize],
) -> Result<LossBreakdown> {
    assembly.validate()?;
    if adv.branch != Branch::Main {
        return Err(LossError::AdvBranch(adv.branch.as_str()));
    }
    let want = assembly.variant.clean_branch();
    if clean.branch != want {
        return Err(LossError::WrongBranch {
            variant: assembly.variant.as_str(),
            want: want.as_str(),
            got: clean.branch.as_str(),
        });
    }

    let adv_cls = cross_entropy(tape, &adv.logits, labels)?;
    let clean_cls = cross_entropy(tape, &clean.logits, labels)?;

    let mut per_tag_invariance = Vec::new();
    let invariance = match assembly.variant {
        Variant::AsymTrades => {
            let frozen_clean = stop_gradient(&clean.logits);
            kl_div(tape, &adv.logits, &frozen_clean)?
        }
        _ => {
            let mut acc: Option<Tensor> = None;
            for tag in &assembly.capture_tags {
                let z_adv = adv
                    .reps
                    .get(tag)
                    .ok_or_else(|| LossError::MissingRep(tag.clone()))?;
                let z_clean = clean
                    .reps
                    .get(tag)
                    .ok_or_else(|| LossError::MissingRep(tag.clone()))?;
                let left = match assembly.variant {
                    Variant::V0 | Variant::V1 => z_adv.clone(),
                    Variant::V2 | Variant::V3 => {
                        model.predictor_forward(tape, bound, tag, z_adv)?
                    }
                    Variant::AsymTrades => unreachable!("handled above"),
                };
                let right = match assembly.variant {
                    Variant::V0 => z_clean.clone(),
                    _ => stop_gradient(z_clean),
                };
                let d = cosine_distance(tape, &left, &right)?;
                per_tag_invariance.push((tag.clone(), d.item()));
                acc = Some(match acc {
                    None => d,
                    Some(a) => tape.add(&a, &d)?,
                });
            }
            let sum = acc.expect("validated non-empty tags");
            tape.scale(&sum, 1.0 / assembly.capture_tags.len() as f64)?
        }
    };

    let a_term = tape.scale(&adv_cls, assembly.alpha)?;
    let b_term = tape.scale(&clean_cls, assembly.beta)?;
    let g_term = tape.scale(&invariance, assembly.gamma)?;
    let ab = tape.add(&a_term, &b_term)?;
    let total = tape.add(&ab, &g_term)?;

    Ok(LossBreakdown {
        total,
        adv_cls,
        clean_cls,
        invariance,
        per_tag_invariance,
    })
}

/// Splits the live distance into its two one-sided terms. All three use
/// the same argument order, so the value identity d_full = (d_purify +
/// d_corrupt)/2 holds bit-exactly for a symmetric distance. Gradients add
/// without the halving: each one-sided term carries the full gradient for
/// its live argument, so backward(d_purify + d_corrupt) = backward(d_full).
pub fn decomposition_terms(
    tape: &mut Tape,
    z_adv: &Tensor,
    z_clean: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d_purify = cosine_distance(tape, z_adv, &stop_gradient(z_clean))?;
    let d_corrupt = cosine_distance(tape, &stop_gradient(z_adv), z_clean)?;
    let d_full = cosine_distance(tape, z_adv, z_clean)?;
    Ok((d_purify, d_corrupt, d_full))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Arch, Mode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn seeded(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape, vals).unwrap()
    }

    fn tiny_arch() -> Arch {
        Arch {
            in_channels: 1,
            image_hw: 4,
            widths: vec![2, 3],
            blocks_per_stage: 1,
            classes: 2,
        }
    }

    #[test]
    fn cross_entropy_known_values() {
        let mut tape = Tape::new();
        let zero = Tensor::zeros(&[3, 10]);
        let ce = cross_entropy(&mut tape, &zero, &[0, 5, 9]).unwrap();
        assert!((ce.item() - (10.0f64).ln()).abs() <= 1e-12);

        let mut vals = vec![0.0; 2 * 4];
        vals[0] = 50.0;
        vals[4 + 2] = 50.0;
        let confident = Tensor::new(&[2, 4], vals).unwrap();
        let ce = cross_entropy(&mut tape, &confident, &[0, 2]).unwrap();
        assert!(ce.item() < 1e-9);
        assert!(ce.item() >= 0.0);
    }

    #[test]
    fn cross_entropy_matches_naive_oracle() {
        let logits = seeded(&[5, 3], 2, -2.0, 2.0);
        let labels = [2usize, 0, 1, 1, 2];
        let mut tape = Tape::new();
        let ce = cross_entropy(&mut tape, &logits, &labels).unwrap();
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits.values()[i * 3..(i + 1) * 3];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[y].exp() / denom).ln();
        }
        want /= labels.len() as f64;
        assert!((ce.item() - want).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let logits = Tensor::zeros(&[2, 3]);
        let err = cross_entropy(&mut tape, &logits, &[0, 3]).unwrap_err();
        assert!(err.to_string().contains("label 3"));
        let err = cross_entropy(&mut tape, &logits, &[0]).unwrap_err();
        assert!(matches!(err, LossError::BatchMismatch { .. }));
    }

    #[test]
    fn cosine_distance_known_geometry() {
        let mut tape = Tape::new();
        let u = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        let d = cosine_distance(&mut tape, &u, &u).unwrap();
        assert!(d.item().abs() <= 1e-9);

        let neg = Tensor::new(&[1, 2], vec![-3.0, -4.0]).unwrap();
        let d = cosine_distance(&mut tape, &u, &neg).unwrap();
        assert!((d.item() - 2.0).abs() <= 1e-9);

        let ex = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let ey = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let d = cosine_distance(&mut tape, &ex, &ey).unwrap();
        assert!((d.item() - 1.0).abs() <= 1e-12);

        let bad = Tensor::zeros(&[1, 3]);
        assert!(cosine_distance(&mut tape, &u, &bad).is_err());
    }

    #[test]
    fn kl_known_values_and_asymmetry() {
        let mut tape = Tape::new();
        let p = seeded(&[4, 5], 3, -1.0, 1.0);
        let same = kl_div(&mut tape, &p, &p).unwrap();
        assert!(same.item().abs() <= 1e-12);

        let pl = Tensor::new(&[1, 2], vec![(3.0f64).ln(), 0.0]).unwrap();
        let ql = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let kl = kl_div(&mut tape, &pl, &ql).unwrap();
        let want = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        assert!((kl.item() - want).abs() <= 1e-12);
        assert!((want - 0.130812).abs() < 1e-6);

        let rev = kl_div(&mut tape, &ql, &pl).unwrap();
        assert!((kl.item() - rev.item()).abs() > 1e-3);
        assert!(kl.item() >= 0.0 && rev.item() >= 0.0);
    }

    /// Fabricates a forward output with given logits and one tagged rep.
    fn fake_out(branch: Branch, logits: Tensor, tag: &str, rep: Tensor) -> ForwardOutput {
        let mut reps = BTreeMap::new();
        let pen = rep.clone();
        reps.insert(tag.to_string(), rep);
        ForwardOutput {
            branch,
            logits,
            reps,
            penultimate: pen,
            bn_batch: Vec::new(),
        }
    }

    fn plain_assembly(variant: Variant, gamma: f64) -> LossAssembly {
        LossAssembly {
            variant,
            alpha: 0.7,
            beta: 0.3,
            gamma,
            capture_tags: vec!["t".into()],
        }
    }

    #[test]
    fn v0_with_coincident_representations_has_zero_invariance() {
        let model = ModelState::init(&tiny_arch(), 1).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind_frozen();
        let z = tape.leaf(&seeded(&[4, 3], 5, 0.1, 1.0));
        let mut logit_vals = vec![0.0; 4 * 2];
        for (i, lv) in logit_vals.iter_mut().enumerate() {
            if i % 2 == 0 {
                *lv = 50.0;
            }
        }
        let logits = Tensor::new(&[4, 2], logit_vals).unwrap();
        let adv = fake_out(Branch::Main, logits.clone(), "t", z.clone());
        let clean = fake_out(Branch::Main, logits, "t", z);
        let asm = plain_assembly(Variant::V0, 30.0);
        let out = assemble_loss(&mut tape, &model, &bound, &asm, &adv, &clean, &[0, 0, 0, 0])
            .unwrap();
        assert!(out.invariance.item().abs() <= 1e-9);
        let want = asm.alpha * out.adv_cls.item() + asm.beta * out.clean_cls.item();
        assert!((out.total.item() - want).abs() <= 1e-10);
        assert_eq!(out.per_tag_invariance.len(), 1);
    }

    #[test]
    fn breakdown_total_is_weighted_sum_and_linear_in_gamma() {
        let model = ModelState::init(&tiny_arch(), 2).unwrap();
        let bound = model.bind_frozen();
        let mut tape = Tape::new();
        let adv = fake_out(
            Branch::Main,
            seeded(&[4, 2], 6, -1.0, 1.0),
            "t",
            seeded(&[4, 3], 7, -1.0, 1.0),
        );
        let clean = fake_out(
            Branch::Main,
            seeded(&[4, 2], 8, -1.0, 1.0),
            "t",
            seeded(&[4, 3], 9, -1.0, 1.0),
        );
        let labels = [0usize, 1, 0, 1];
        let asm1 = plain_assembly(Variant::V1, 30.0);
        let out1 =
            assemble_loss(&mut tape, &model, &bound, &asm1, &adv, &clean, &labels).unwrap();
        let want = asm1.alpha * out1.adv_cls.item()
            + asm1.beta * out1.clean_cls.item()
            + asm1.gamma * out1.invariance.item();
        assert!((out1.total.item() - want).abs() <= 1e-10);

        let asm2 = plain_assembly(Variant::V1, 60.0);
        let out2 =
            assemble_loss(&mut tape, &model, &bound, &asm2, &adv, &clean, &labels).unwrap();
        let diff = out2.total.item() - out1.total.item();
        assert!((diff - 30.0 * out1.invariance.item()).abs() <= 1e-10);
    }

    #[test]
    fn stop_gradient_blocks_clean_path_from_v1_invariance() {
        let model = ModelState::init(&tiny_arch(), 3).unwrap();
        let bound = model.bind_frozen();
        let mut tape = Tape::new();
        let z_adv = tape.leaf(&seeded(&[4, 3], 10, 0.1, 1.0));
        let z_clean = tape.leaf(&seeded(&[4, 3], 11, 0.1, 1.0));
        let logits_a = tape.leaf(&seeded(&[4, 2], 12, -1.0, 1.0));
        let logits_c = tape.leaf(&seeded(&[4, 2], 13, -1.0, 1.0));
        let adv = fake_out(Branch::Main, logits_a, "t", z_adv.clone());
        let clean = fake_out(Branch::Main, logits_c, "t", z_clean.clone());
        let labels = [0usize, 1, 0, 1];

        let v1 = plain_assembly(Variant::V1, 30.0);
        let out = assemble_loss(&mut tape, &model, &bound, &v1, &adv, &clean, &labels).unwrap();
        let g = tape.backward(&out.invariance).unwrap();
        assert!(g.reached(&z_adv));
        assert!(!g.reached(&z_clean), "stop-gradient must block the clean rep");

        let v0 = plain_assembly(Variant::V0, 30.0);
        let out = assemble_loss(&mut tape, &model, &bound, &v0, &adv, &clean, &labels).unwrap();
        let g = tape.backward(&out.invariance).unwrap();
        assert!(g.reached(&z_clean), "live variant must reach the clean rep");
        assert!(g.wrt(&z_clean).values().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn branch_routing_is_enforced() {
        let model = ModelState::init(&tiny_arch(), 4).unwrap();
        let bound = model.bind_frozen();
        let mut tape = Tape::new();
        let adv = fake_out(
            Branch::Main,
            seeded(&[2, 2], 20, -1.0, 1.0),
            "t",
            seeded(&[2, 3], 21, 0.1, 1.0),
        );
        let clean_main = fake_out(
            Branch::Main,
            seeded(&[2, 2], 22, -1.0, 1.0),
            "t",
            seeded(&[2, 3], 23, 0.1, 1.0),
        );
        let clean_aux = ForwardOutput {
            branch: Branch::Aux,
            ..clean_main.clone()
        };
        let labels = [0usize, 1];

        let v3 = plain_assembly(Variant::V3, 30.0);
        let err = assemble_loss(&mut tape, &model, &bound, &v3, &adv, &clean_main, &labels)
            .unwrap_err();
        assert!(err.to_string().contains("aux"));

        let v0 = plain_assembly(Variant::V0, 30.0);
        let err = assemble_loss(&mut tape, &model, &bound, &v0, &adv, &clean_aux, &labels)
            .unwrap_err();
        assert!(err.to_string().contains("main"));

        let adv_on_aux = ForwardOutput {
            branch: Branch::Aux,
            ..adv.clone()
        };
        let err = assemble_loss(&mut tape, &model, &bound, &v0, &adv_on_aux, &clean_main, &labels)
            .unwrap_err();
        assert!(matches!(err, LossError::AdvBranch(_)));

        let no_tags = LossAssembly {
            capture_tags: vec![],
            ..v3.clone()
        };
        assert!(assemble_loss(&mut tape, &model, &bound, &no_tags, &adv, &clean_aux, &labels)
            .is_err());
    }

    /// The mechanically assembled V3 objective must equal a straight-line
    /// composition written out by hand from the same forward outputs.
    #[test]
    fn v3_matches_straight_line_composition() {
        let mut model = ModelState::init(&tiny_arch(), 5).unwrap();
        let x_adv = seeded(&[4, 1, 4, 4], 30, 0.0, 1.0);
        let x_clean = seeded(&[4, 1, 4, 4], 31, 0.0, 1.0);
        let labels = [0usize, 1, 1, 0];
        let tag = "s2b1";

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let adv = model
            .forward(&mut tape, &bound, &x_adv, Branch::Main, Mode::Train, &[tag])
            .unwrap();
        let clean = model
            .forward(&mut tape, &bound, &x_clean, Branch::Aux, Mode::Train, &[tag])
            .unwrap();
        let asm = LossAssembly {
            variant: Variant::V3,
            alpha: 1.0,
            beta: 1.0,
            gamma: 30.0,
            capture_tags: vec![tag.into()],
        };
        let out =
            assemble_loss(&mut tape, &model, &bound, &asm, &adv, &clean, &labels).unwrap();

        // Straight-line re-composition from the same forward outputs.
        let ce = |tape: &mut Tape, logits: &Tensor| -> f64 {
            let ls = tape.log_softmax(logits).unwrap();
            let mut s = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                s -= ls.values()[i * 2 + y];
            }
            s / labels.len() as f64
        };
        let adv_ce = ce(&mut tape, &adv.logits);
        let clean_ce = ce(&mut tape, &clean.logits);
        let z_adv = &adv.reps[tag];
        let w1 = &bound[&format!("pred.{tag}.w1")];
        let b1 = &bound[&format!("pred.{tag}.b1")];
        let w2 = &bound[&format!("pred.{tag}.w2")];
        let b2 = &bound[&format!("pred.{tag}.b2")];
        let h = tape.matmul(z_adv, w1).unwrap();
        let h = tape.add_bias(&h, b1).unwrap();
        let h = tape.relu(&h).unwrap();
        let p = tape.matmul(&h, w2).unwrap();
        let p = tape.add_bias(&p, b2).unwrap();
        let zc = &clean.reps[tag];
        let mut dist = 0.0;
        for i in 0..4 {
            let pr = &p.values()[i * 3..(i + 1) * 3];
            let cr = &zc.values()[i * 3..(i + 1) * 3];
            let dot: f64 = pr.iter().zip(cr).map(|(a, b)| a * b).sum();
            let np: f64 = pr.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nc: f64 = cr.iter().map(|v| v * v).sum::<f64>().sqrt();
            dist += 1.0 - dot / (np * nc + NORM_EPS);
        }
        dist /= 4.0;
        let want = adv_ce + clean_ce + 30.0 * dist;
        assert!(
            (out.total.item() - want).abs() <= 1e-10,
            "{} vs {want}",
            out.total.item()
        );
    }

    #[test]
    fn v3_classification_gradients_respect_branch_boundaries() {
        let mut model = ModelState::init(&tiny_arch(), 6).unwrap();
        let x_adv = seeded(&[3, 1, 4, 4], 40, 0.0, 1.0);
        let x_clean = seeded(&[3, 1, 4, 4], 41, 0.0, 1.0);
        let labels = [0usize, 1, 0];
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let adv = model
            .forward(
                &mut tape, &bound, &x_adv, Branch::Main, Mode::Train, &["s2b1"],
            )
            .unwrap();
        let clean = model
            .forward(
                &mut tape, &bound, &x_clean, Branch::Aux, Mode::Train, &["s2b1"],
            )
            .unwrap();
        let asm = LossAssembly {
            variant: Variant::V3,
            alpha: 1.0,
            beta: 1.0,
            gamma: 30.0,
            capture_tags: vec!["s2b1".into()],
        };
        let out =
            assemble_loss(&mut tape, &model, &bound, &asm, &adv, &clean, &labels).unwrap();

        let g_clean = tape.backward(&out.clean_cls).unwrap();
        let g_adv = tape.backward(&out.adv_cls).unwrap();
        for (name, leaf) in &bound {
            if name.contains(".bn.main.") {
                assert!(
                    !g_clean.reached(leaf),
                    "clean classification leaked into {name}"
                );
            }
            if name.contains(".bn.aux.") {
                assert!(
                    !g_adv.reached(leaf),
                    "adversarial classification leaked into {name}"
                );
            }
            if name.contains("conv.w") {
                assert!(g_clean.reached(leaf), "shared weight {name} unreachable");
                assert!(g_adv.reached(leaf), "shared weight {name} unreachable");
            }
        }
    }

    #[test]
    fn asym_trades_uses_logit_kl_with_stopped_clean_side() {
        let model = ModelState::init(&tiny_arch(), 7).unwrap();
        let bound = model.bind_frozen();
        let mut tape = Tape::new();
        let la = tape.leaf(&seeded(&[4, 2], 50, -1.0, 1.0));
        let lc = tape.leaf(&seeded(&[4, 2], 51, -1.0, 1.0));
        let adv = fake_out(Branch::Main, la.clone(), "t", seeded(&[4, 3], 52, 0.1, 1.0));
        let clean = fake_out(Branch::Aux, lc.clone(), "t", seeded(&[4, 3], 53, 0.1, 1.0));
        let asm = LossAssembly {
            variant: Variant::AsymTrades,
            alpha: 1.0,
            beta: 1.0,
            gamma: 6.0,
            capture_tags: vec![],
        };
        let out =
            assemble_loss(&mut tape, &model, &bound, &asm, &adv, &clean, &[0, 1, 0, 1]).unwrap();
        assert!(out.per_tag_invariance.is_empty());
        assert!(out.invariance.item() >= 0.0);

        let g = tape.backward(&out.invariance).unwrap();
        assert!(g.reached(&la));
        assert!(!g.reached(&lc), "KL target must be stopped");

        // Reference value straight from the softmax definition.
        let mut want = 0.0;
        for i in 0..4 {
            let pr = &la.values()[i * 2..(i + 1) * 2];
            let qr = &lc.values()[i * 2..(i + 1) * 2];
            let pz: f64 = pr.iter().map(|v| v.exp()).sum();
            let qz: f64 = qr.iter().map(|v| v.exp()).sum();
            for k in 0..2 {
                let p = pr[k].exp() / pz;
                let q = qr[k].exp() / qz;
                want += p * (p / q).ln();
            }
        }
        want /= 4.0;
        assert!((out.invariance.item() - want).abs() <= 1e-12);
    }

    #[test]
    fn decomposition_identity_holds_in_value_and_gradient() {
        let mut tape = Tape::new();
        let zp = tape.leaf(&seeded(&[6, 4], 60, -1.0, 1.0));
        let zc = tape.leaf(&seeded(&[6, 4], 61, -1.0, 1.0));
        let (dp, dc, df) = decomposition_terms(&mut tape, &zp, &zc).unwrap();

        // Symmetric distance: all three agree in value, bit for bit.
        assert_eq!(dp.item().to_bits(), dc.item().to_bits());
        assert_eq!(dp.item().to_bits(), df.item().to_bits());
        assert_eq!((dp.item() + dc.item()) / 2.0, df.item());

        // One-sided terms only reach their live argument.
        let gp = tape.backward(&dp).unwrap();
        assert!(gp.reached(&zp) && !gp.reached(&zc));
        let gc = tape.backward(&dc).unwrap();
        assert!(gc.reached(&zc) && !gc.reached(&zp));

        // Each one-sided term carries the full gradient for its live side,
        // so the sum without halving reproduces backward(d_full).
        let sum = tape.add(&dp, &dc).unwrap();
        let gf = tape.backward(&df).unwrap();
        let gs = tape.backward(&sum).unwrap();
        for leaf in [&zp, &zc] {
            let a = gf.wrt(leaf);
            let b = gs.wrt(leaf);
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// The averaging identity survives arbitrary nonzero inputs.
        #[test]
        fn decomposition_identity_random(seed in 0u64..10_000, n in 1usize..5, d in 2usize..6) {
            let mut tape = Tape::new();
            let zp = tape.leaf(&seeded(&[n, d], seed, 0.1, 2.0));
            let zc = tape.leaf(&seeded(&[n, d], seed.wrapping_add(1), 0.1, 2.0));
            let (dp, dc, df) = decomposition_terms(&mut tape, &zp, &zc).unwrap();
            prop_assert_eq!(dp.item().to_bits(), dc.item().to_bits());
            prop_assert_eq!(((dp.item() + dc.item()) / 2.0).to_bits(), df.item().to_bits());
        }
    }
}
