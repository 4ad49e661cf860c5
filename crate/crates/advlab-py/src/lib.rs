//! Python bindings for the adversarial training laboratory.
//!
//! The module mirrors the core types a notebook session needs: datasets,
//! dual-branch models, PGD attacks, a training entry point, and the
//! penultimate feature-shift instrument. Images cross the boundary as flat
//! float lists in [0,1]; everything heavier stays in Rust.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use advlab_core::attacks::{self, AttackConfig, AttackNorm};
use advlab_core::data::{self, Dataset as CoreDataset};
use advlab_core::diagnostics;
use advlab_core::losses::{LossAssembly, Variant};
use advlab_core::nn::{Arch, Branch, ModelState};
use advlab_core::tensor::Tape;
use advlab_core::trainer::{self, TrainConfig};

fn val_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn parse_branch(s: &str) -> PyResult<Branch> {
    match s {
        "main" => Ok(Branch::Main),
        "aux" => Ok(Branch::Aux),
        _ => Err(PyValueError::new_err(format!(
            "unknown branch '{s}', expected 'main' or 'aux'"
        ))),
    }
}

/// Labeled byte-image dataset.
#[pyclass]
#[derive(Clone)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Synthetic class-template images with Gaussian pixel noise.
    #[staticmethod]
    #[pyo3(signature = (classes, per_class, size, seed, noise=0.1))]
    fn generate(
        classes: usize,
        per_class: usize,
        size: usize,
        seed: u64,
        noise: f64,
    ) -> PyResult<Self> {
        let inner = data::synth_generate_with_noise(classes, per_class, size, seed, noise)
            .map_err(val_err)?;
        Ok(Dataset { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Dataset {
            inner: data::load_raw(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_raw(&self.inner, &path).map_err(io_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    /// (channels, height, width) of every sample.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.channels, self.inner.height, self.inner.width)
    }

    /// Flat pixel floats in [0,1] and the label of one sample.
    fn sample(&self, i: usize) -> PyResult<(Vec<f64>, usize)> {
        let (x, y) = self.inner.batch(&[i]).map_err(val_err)?;
        Ok((x.values().to_vec(), y[0]))
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels.iter().map(|&b| b as usize).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} samples, {} classes, {}x{}x{})",
            self.inner.len(),
            self.inner.classes,
            self.inner.channels,
            self.inner.height,
            self.inner.width
        )
    }
}

/// Projected gradient attack settings.
#[pyclass]
#[derive(Clone)]
struct Attack {
    inner: AttackConfig,
}

#[pymethods]
impl Attack {
    #[new]
    #[pyo3(signature = (epsilon=8.0/255.0, step_size=2.0/255.0, iterations=10, norm="linf", random_init=true, seed=0))]
    fn new(
        epsilon: f64,
        step_size: f64,
        iterations: usize,
        norm: &str,
        random_init: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let norm = match norm {
            "linf" => AttackNorm::Linf,
            "l2" => AttackNorm::L2,
            _ => {
                return Err(PyValueError::new_err(format!(
                    "unknown norm '{norm}', expected 'linf' or 'l2'"
                )))
            }
        };
        Ok(Attack {
            inner: AttackConfig {
                norm,
                epsilon,
                step_size,
                iterations,
                random_init,
                loss_kind: Default::default(),
                branch: Branch::Main,
                seed,
            },
        })
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    #[getter]
    fn step_size(&self) -> f64 {
        self.inner.step_size
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    fn __repr__(&self) -> String {
        format!(
            "Attack({:?}, eps={}, step={}, iters={})",
            self.inner.norm, self.inner.epsilon, self.inner.step_size, self.inner.iterations
        )
    }
}

/// Convolutional classifier with one batch-norm branch per input stream.
#[pyclass]
struct Model {
    inner: ModelState,
}

impl Model {
    fn batch_of(
        &self,
        data: &Dataset,
        indices: Option<Vec<usize>>,
    ) -> PyResult<(advlab_core::tensor::Tensor, Vec<usize>)> {
        let idxs = indices.unwrap_or_else(|| (0..data.inner.len()).collect());
        data.inner.batch(&idxs).map_err(val_err)
    }
}

#[pymethods]
impl Model {
    /// Fresh random weights for the given architecture.
    #[staticmethod]
    #[pyo3(signature = (in_channels=1, image_hw=16, widths=vec![16, 32, 64], blocks_per_stage=1, classes=8, seed=0))]
    fn init(
        in_channels: usize,
        image_hw: usize,
        widths: Vec<usize>,
        blocks_per_stage: usize,
        classes: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let arch = Arch {
            in_channels,
            image_hw,
            widths,
            blocks_per_stage,
            classes,
        };
        Ok(Model {
            inner: ModelState::init(&arch, seed).map_err(val_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: ModelState::load(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(io_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params().values().map(|t| t.values().len()).sum()
    }

    /// Predicted labels through the requested batch-norm branch.
    #[pyo3(signature = (data, indices=None, branch="main"))]
    fn predict(
        &self,
        data: &Dataset,
        indices: Option<Vec<usize>>,
        branch: &str,
    ) -> PyResult<Vec<usize>> {
        let branch = parse_branch(branch)?;
        let (x, _) = self.batch_of(data, indices)?;
        let bound = self.inner.bind_frozen();
        let mut tape = Tape::new();
        let out = self
            .inner
            .forward_eval(&mut tape, &bound, &x, branch, &[])
            .map_err(val_err)?;
        let classes = self.inner.arch().classes;
        let rows = out.logits.values().len() / classes;
        let mut preds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &out.logits.values()[r * classes..(r + 1) * classes];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            preds.push(best);
        }
        Ok(preds)
    }

    /// (clean accuracy, robust accuracy); robust repeats clean when no
    /// attack is given.
    #[pyo3(signature = (data, branch="main", attack=None))]
    fn evaluate(&self, data: &Dataset, branch: &str, attack: Option<&Attack>) -> PyResult<(f64, f64)> {
        trainer::evaluate(
            &self.inner,
            &data.inner,
            parse_branch(branch)?,
            attack.map(|a| &a.inner),
        )
        .map_err(val_err)
    }

    /// Adversarial versions of the indexed samples, one flat float list per
    /// sample.
    #[pyo3(signature = (data, indices, attack, branch="main"))]
    fn perturb(
        &self,
        data: &Dataset,
        indices: Vec<usize>,
        attack: &Attack,
        branch: &str,
    ) -> PyResult<Vec<Vec<f64>>> {
        let (x, y) = self.batch_of(data, Some(indices))?;
        let mut acfg = attack.inner.clone();
        acfg.branch = parse_branch(branch)?;
        let adv = attacks::pgd(&self.inner, &x, &y, &acfg).map_err(val_err)?;
        let per = adv.values().len() / y.len();
        Ok(adv.values().chunks(per).map(|c| c.to_vec()).collect())
    }

    /// Mean penultimate-feature displacement under attack: (l2 distance,
    /// cosine similarity), clean side read through `clean_branch`.
    #[pyo3(signature = (data, indices, attack, clean_branch="main"))]
    fn feature_shift(
        &self,
        data: &Dataset,
        indices: Vec<usize>,
        attack: &Attack,
        clean_branch: &str,
    ) -> PyResult<(f64, f64)> {
        let (x, y) = self.batch_of(data, Some(indices))?;
        let (clean, adv) =
            diagnostics::penultimate_pair(&self.inner, &x, &y, &attack.inner, parse_branch(clean_branch)?)
                .map_err(val_err)?;
        let l2 = diagnostics::row_l2_distances(&clean, &adv).map_err(val_err)?;
        let cos = diagnostics::row_cosines(&clean, &adv).map_err(val_err)?;
        let n = l2.len().max(1) as f64;
        Ok((l2.iter().sum::<f64>() / n, cos.iter().sum::<f64>() / n))
    }

    fn __repr__(&self) -> String {
        let a = self.inner.arch();
        format!(
            "Model(widths={:?}, blocks={}, classes={}, params={})",
            a.widths,
            a.blocks_per_stage,
            a.classes,
            self.num_params()
        )
    }
}

/// Adversarial training loop. Returns the trained model, the weight-averaged
/// model when averaging was enabled, and one summary dict per epoch.
#[pyfunction]
#[pyo3(signature = (data, model, variant="v3", tags=vec!["s3b1".to_string()], epochs=10, batch_size=64,
    lr=0.05, lr_drop_epochs=None, gamma=30.0, alpha=1.0, beta=1.0, auto_balance=None,
    attack=None, eval_attack=None, swa_start=None, augment=false, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    data: &Dataset,
    model: &Model,
    variant: &str,
    tags: Vec<String>,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    lr_drop_epochs: Option<Vec<usize>>,
    gamma: f64,
    alpha: f64,
    beta: f64,
    auto_balance: Option<bool>,
    attack: Option<&Attack>,
    eval_attack: Option<&Attack>,
    swa_start: Option<usize>,
    augment: bool,
    seed: u64,
) -> PyResult<(Model, Option<Model>, Vec<Py<PyDict>>)> {
    let variant: Variant = variant.parse().map_err(val_err)?;
    let assembly = LossAssembly {
        variant,
        alpha,
        beta,
        gamma,
        capture_tags: tags,
    };
    let mut cfg = TrainConfig::desk(assembly);
    cfg.epochs = epochs;
    cfg.base_lr = lr;
    cfg.batch_size = batch_size;
    cfg.seed = seed;
    cfg.swa_start = swa_start;
    if let Some(drops) = lr_drop_epochs {
        cfg.lr_drop_epochs = drops;
    }
    if let Some(b) = auto_balance {
        cfg.auto_balance = b;
    }
    if let Some(a) = attack {
        cfg.attack = a.inner.clone();
        cfg.attack.branch = Branch::Main;
    }
    if let Some(a) = eval_attack {
        cfg.eval_attack = a.inner.clone();
    }

    let aug = augment.then(data::AugmentationConfig::default);
    let outcome =
        trainer::train_full(&cfg, model.inner.clone(), &data.inner, aug.as_ref()).map_err(val_err)?;

    let mut reports = Vec::with_capacity(outcome.reports.len());
    for r in &outcome.reports {
        let d = PyDict::new(py);
        d.set_item("epoch", r.epoch)?;
        d.set_item("lr", r.lr)?;
        d.set_item("alpha", r.alpha)?;
        d.set_item("beta", r.beta)?;
        d.set_item("loss", r.mean_total)?;
        d.set_item("adv_cls", r.mean_adv_cls)?;
        d.set_item("clean_cls", r.mean_clean_cls)?;
        d.set_item("invariance", r.mean_invariance)?;
        d.set_item("clean_acc", r.train_clean_acc)?;
        d.set_item("adv_acc", r.train_adv_acc)?;
        reports.push(d.unbind());
    }
    Ok((
        Model {
            inner: outcome.model,
        },
        outcome.swa_model.map(|m| Model { inner: m }),
        reports,
    ))
}

/// Laboratory bindings: datasets, models, attacks, training.
#[pymodule]
fn advlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Attack>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
