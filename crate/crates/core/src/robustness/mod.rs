//! Robustness of surrogate and noise, delusiveness and stability, the
//! `ρ_a ≥ ρᵤ` cancellation check, and correlation statistics.
//!
//! The two robustness quantities are computed by their iterative
//! procedures, not as exact saddle points, and are reported as negated mean
//! losses so that larger means more robust.

mod stats;

use serde::{Deserialize, Serialize};

use crate::datastore::DatasetSplit;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::evaluate::{adv_train, TrainConfig};
use crate::models::{init_model, mean_loss, ModelSpec, ModelState};
use crate::noisegen::{poison_dataset, GenConfig, NoiseBank};
use crate::perturb::{eot_noise_grad, pgd, sample_uniform_each, LinfBall, NoiseSource};
use crate::sampler::{cosine_lr, MinibatchSampler};
use crate::scalar::Scalar;
use crate::seed::SeedTree;
use crate::transforms::{apply_each, sample_transform, TransformInstance};

pub use stats::{correlate, ranks, CorrelationMetric};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSample {
    pub step: usize,
    pub r_theta: f64,
    pub r_delta: f64,
    pub f: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub pearson: f64,
    pub spearman: f64,
    pub kendall: f64,
}

impl Coefficients {
    pub fn compute(xs: &[f64], ys: &[f64]) -> Result<Self> {
        Ok(Coefficients {
            pearson: correlate(xs, ys, CorrelationMetric::Pearson)?,
            spearman: correlate(xs, ys, CorrelationMetric::Spearman)?,
            kendall: correlate(xs, ys, CorrelationMetric::Kendall)?,
        })
    }
}

/// Correlation of each robustness series with `F`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub theta: Coefficients,
    pub delta: Coefficients,
}

impl CorrelationReport {
    pub fn from_samples(samples: &[RobustnessSample]) -> Result<Self> {
        let f: Vec<f64> = samples.iter().map(|s| s.f).collect();
        let rt: Vec<f64> = samples.iter().map(|s| s.r_theta).collect();
        let rd: Vec<f64> = samples.iter().map(|s| s.r_delta).collect();
        Ok(CorrelationReport { theta: Coefficients::compute(&rt, &f)?, delta: Coefficients::compute(&rd, &f)? })
    }
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric { detail, .. } => Error::Numeric { step, detail },
        other => other,
    }
}

fn seeds(tree: SeedTree, label: &str, n: usize) -> Vec<SeedTree> {
    (0..n).map(|i| tree.child(label).index(i as u64)).collect()
}

fn transformed_attack<T: Scalar>(
    x: &Tensor<T>,
    y: &[usize],
    model: &ModelState<T>,
    cfg: &GenConfig,
    tree: SeedTree,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let instances: Vec<TransformInstance> = seeds(tree, "t", s.n)
        .iter()
        .map(|t| sample_transform(&cfg.transforms, (s.h, s.w), &mut t.rng()))
        .collect::<Result<_>>()?;
    let moved = apply_each(&instances, x)?;
    if cfg.steps_a == 0 || cfg.rho_a == 0.0 {
        return Ok(moved);
    }
    let d = pgd(&moved, y, model, &cfg.attack_pgd(), &seeds(tree, "a", s.n))?;
    moved.add(&d)
}

/// Robustness of a fixed surrogate: for each of `cfg.steps` minibatches,
/// noise is re-crafted from a random start against the model with a PGD
/// attack inside every EOT sample, then the attacked loss is recorded.
/// Returns the negated mean loss.
pub fn surrogate_robustness<T: Scalar>(theta: &ModelState<T>, data: &DatasetSplit<T>, cfg: &GenConfig) -> Result<f64> {
    cfg.validate()?;
    let root = SeedTree::new(cfg.seed).child("r_theta");
    let mut sampler = MinibatchSampler::new(data.len(), cfg.batch_size, root.child("batches"));
    let source = if cfg.steps_a > 0 && cfg.rho_a > 0.0 { NoiseSource::Adversarial(cfg.attack_pgd()) } else { NoiseSource::None };
    let (rho_u, alpha_u) = (T::of(cfg.rho_u), T::of(cfg.alpha_u));
    let mut total = 0.0;
    for step in 0..cfg.steps {
        let (x, y) = data.batch(&sampler.next_batch());
        let tree = root.child("step").index(step as u64);
        let n = y.len();
        let mut delta = if cfg.steps_u == 0 {
            Tensor::zeros(x.shape())
        } else {
            sample_uniform_each(x.shape(), LinfBall::new(cfg.rho_u)?, &seeds(tree, "init", n))?
        };
        for k in 0..cfg.steps_u {
            let s: Vec<SeedTree> = seeds(tree, "eot", n).iter().map(|t| t.index(k as u64)).collect();
            let g = eot_noise_grad(&x, &delta, &y, theta, cfg.eot_samples, &source, &cfg.transforms, &s)
                .map_err(|e| at_step(step, e))?;
            for (d, &gv) in delta.data_mut().iter_mut().zip(g.data()) {
                *d = (*d - alpha_u * gv.signum0()).max(-rho_u).min(rho_u);
            }
        }
        let input = transformed_attack(&x.add(&delta)?, &y, theta, cfg, tree).map_err(|e| at_step(step, e))?;
        let loss = theta.loss(&input, &y).map_err(|e| at_step(step, e))?;
        if !loss.is_finite() {
            return Err(Error::Numeric { step, detail: format!("loss {loss}") });
        }
        total += loss;
    }
    Ok(-total / cfg.steps as f64)
}

/// Robustness of fixed noise: a freshly initialized model is adversarially
/// trained on `t(x + δᵘ) + δᵃ` for `cfg.steps` minibatches, and the attacked
/// loss after each update is recorded. Returns the negated mean loss.
pub fn noise_robustness<T: Scalar>(delta_u: &NoiseBank<T>, data: &DatasetSplit<T>, cfg: &GenConfig) -> Result<f64> {
    cfg.validate()?;
    if delta_u.deltas.shape() != data.images.shape() {
        return Err(Error::State(format!("noise bank {} does not match data {}", delta_u.deltas.shape(), data.images.shape())));
    }
    let root = SeedTree::new(cfg.seed).child("r_delta");
    let mut model = init_model::<T>(&cfg.surrogate, root.child("model").state())?;
    let mut sampler = MinibatchSampler::new(data.len(), cfg.batch_size, root.child("batches"));
    let mut total = 0.0;
    for step in 0..cfg.steps {
        let idx = sampler.next_batch();
        let (x, y) = data.batch(&idx);
        let protected = x.add(&delta_u.deltas.select(&idx))?;
        let tree = root.child("step").index(step as u64);
        let input = transformed_attack(&protected, &y, &model, cfg, tree).map_err(|e| at_step(step, e))?;
        let (_, g) = model.param_gradients(&input, &y).map_err(|e| at_step(step, e))?;
        model.sgd_step(&g, T::of(cosine_lr(cfg.lr, step, cfg.steps)), T::of(cfg.momentum))?;
        let loss = model.loss(&input, &y).map_err(|e| at_step(step, e))?;
        if !loss.is_finite() || !model.all_finite() {
            return Err(Error::Numeric { step, detail: format!("loss {loss}") });
        }
        total += loss;
    }
    Ok(-total / cfg.steps as f64)
}

/// Clean test loss of a model trained on `t(x + δᵘ)` without attack.
pub fn delusiveness<T: Scalar>(
    delta_u: &NoiseBank<T>,
    data: &DatasetSplit<T>,
    test: &DatasetSplit<T>,
    spec: &ModelSpec,
    train_cfg: &TrainConfig,
) -> Result<f64> {
    let protected = poison_dataset(data, delta_u, 1.0, 0)?;
    let cfg = TrainConfig { rho_a: 0.0, early_stop: None, ..train_cfg.clone() };
    let (model, _) = adv_train(&protected, None, test, spec, &cfg)?;
    mean_loss(&model, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Smallest delusiveness found. It bounds the true minimum from above.
    pub approximate: f64,
    /// Running minimum after each candidate.
    pub running_min: Vec<f64>,
    /// Delusiveness of each candidate in evaluation order.
    pub values: Vec<f64>,
}

/// Candidate perturbations in evaluation order: zero, `−clip(δᵘ, ρ_a)`,
/// then random sign corners of radius `ρ_a`.
pub fn stability_candidates<T: Scalar>(delta_u: &NoiseBank<T>, rho_a: f64, count: usize, seed: u64) -> Vec<Tensor<T>> {
    let r = T::of(rho_a);
    let shape = delta_u.deltas.shape();
    let mut out = Vec::with_capacity(count);
    let tree = SeedTree::new(seed).child("stability");
    for k in 0..count {
        out.push(match k {
            0 => Tensor::zeros(shape),
            1 => delta_u.deltas.map(|v| -(v.max(-r).min(r))),
            _ => {
                use rand::Rng;
                let mut rng = tree.index(k as u64).rng();
                Tensor::from_fn(shape, |_| if rng.random::<bool>() { r } else { -r })
            }
        });
    }
    out
}

/// Approximate worst-case delusiveness of `δᵘ + δᵃ` over `‖δᵃ‖∞ ≤ ρ_a`,
/// taken over [`stability_candidates`].
pub fn stability<T: Scalar>(
    delta_u: &NoiseBank<T>,
    rho_a: f64,
    candidates: usize,
    data: &DatasetSplit<T>,
    test: &DatasetSplit<T>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<StabilityReport> {
    if candidates == 0 {
        return Err(Error::Domain("stability needs at least one candidate".into()));
    }
    LinfBall::new(rho_a)?;
    let mut values = Vec::with_capacity(candidates);
    let mut running_min = Vec::with_capacity(candidates);
    let mut best = f64::INFINITY;
    for cand in stability_candidates(delta_u, rho_a, candidates, cfg.seed) {
        let bank = NoiseBank { deltas: delta_u.deltas.add(&cand)?, ..delta_u.clone() };
        let d = delusiveness(&bank, data, test, spec, cfg)?;
        best = best.min(d);
        values.push(d);
        running_min.push(best);
    }
    Ok(StabilityReport { approximate: best, running_min, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Verdict {
    /// Largest per-example `|ℓ(f(x + δᵘ − δᵘ), y) − ℓ(f(x), y)|`.
    pub cancellation_gap: f64,
    /// Smallest per-example `max_cand ℓ(f(x + δᵘ + δᵃ), y) − ℓ(f(x), y)`.
    pub candidate_margin: f64,
    pub passed: bool,
}

pub const CANCELLATION_TOLERANCE: f64 = 1e-6;

/// Checks that with `ρ_a ≥ ρᵤ` the attacker can undo the noise: adding
/// `−δᵘ` restores the clean loss, so the attacked loss on protected data is
/// never below the clean loss. Candidates are `−δᵘ`, zero, and
/// `±ρ_a·sign(δᵘ)`.
pub fn theorem1_check<T: Scalar>(
    model: &ModelState<T>,
    data: &DatasetSplit<T>,
    delta_u: &Tensor<T>,
    rho_a: f64,
    rho_u: f64,
) -> Result<Theorem1Verdict> {
    if rho_a < rho_u {
        return Err(Error::Precondition(format!("attack radius {rho_a} below noise radius {rho_u}")));
    }
    if delta_u.shape() != data.images.shape() {
        return Err(Error::shapes("theorem1_check", data.images.shape(), delta_u.shape()));
    }
    if delta_u.linf_norm() > T::of(rho_u) {
        return Err(Error::Domain(format!("noise exceeds radius {rho_u}")));
    }
    let x = &data.images;
    let y = &data.labels;
    let clean = model.per_example_loss(x, y)?;
    let protected = x.add(delta_u)?;
    let ra = T::of(rho_a);
    let candidates = [
        delta_u.map(|v| -v),
        Tensor::zeros(x.shape()),
        delta_u.map(|v| ra * v.signum0()),
        delta_u.map(|v| -ra * v.signum0()),
    ];
    let mut best = vec![f64::NEG_INFINITY; clean.len()];
    let mut gap: f64 = 0.0;
    for (k, c) in candidates.iter().enumerate() {
        let l = model.per_example_loss(&protected.add(c)?, y)?;
        if k == 0 {
            gap = l.iter().zip(&clean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        }
        for (b, v) in best.iter_mut().zip(l) {
            *b = b.max(v);
        }
    }
    let margin = best.iter().zip(&clean).map(|(b, c)| b - c).fold(f64::INFINITY, f64::min);
    Ok(Theorem1Verdict {
        cancellation_gap: gap,
        candidate_margin: margin,
        passed: gap <= CANCELLATION_TOLERANCE && margin >= -CANCELLATION_TOLERANCE,
    })
}
