//! The attacker's side: standard and adversarial training on (possibly
//! protected) data, protection measurement, and low-pass filtering.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datastore::DatasetSplit;
use crate::diff::{backward_passes, Tensor};
use crate::error::{Error, Result};
use crate::models::{accuracy, init_model, mean_loss, ModelSpec, ModelState};
use crate::perturb::{pgd, PgdConfig, PgdMode};
use crate::sampler::{cosine_lr, MinibatchSampler};
use crate::scalar::Scalar;
use crate::seed::SeedTree;
use crate::transforms::{apply_each, sample_transform, TransformInstance, TransformPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStop {
    /// Steps without validation improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop { patience: 500, eval_every: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    /// Attack radius; 0 means standard training.
    pub rho_a: f64,
    /// Attack step; `None` means `rho_a / 5`.
    pub alpha_a: Option<f64>,
    pub attack_steps: usize,
    pub transforms: TransformPolicy,
    pub early_stop: Option<EarlyStop>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 150,
            batch_size: 64,
            lr: 0.05,
            schedule: LrSchedule::Cosine,
            momentum: 0.9,
            rho_a: 0.0,
            alpha_a: None,
            attack_steps: 10,
            transforms: TransformPolicy::default(),
            early_stop: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Domain("training needs at least one step".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be at least 1".into()));
        }
        if !(self.rho_a >= 0.0) {
            return Err(Error::Domain(format!("rho_a {} must be ≥ 0", self.rho_a)));
        }
        if let Some(es) = self.early_stop {
            if es.eval_every == 0 {
                return Err(Error::Domain("early_stop.eval_every must be at least 1".into()));
            }
        }
        if self.rho_a > 0.0 {
            self.attack().validate()?;
        }
        Ok(())
    }

    pub fn attack(&self) -> PgdConfig {
        PgdConfig {
            radius: self.rho_a,
            step: self.alpha_a.unwrap_or(self.rho_a / 5.0),
            steps: self.attack_steps,
            mode: PgdMode::Maximize,
            random_start: true,
        }
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => cosine_lr(self.lr, step, self.steps),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_accuracy: f64,
    /// `1 − test_accuracy`.
    pub protection: f64,
    pub train_losses: Vec<f64>,
    /// `(step, loss)` for each validation evaluation.
    pub validation_losses: Vec<(usize, f64)>,
    pub backward_passes: u64,
    pub steps_run: usize,
    /// Step of the returned parameters when early stopping was active.
    pub selected_step: usize,
    pub config: TrainConfig,
}

/// Plain minibatch SGD on the data as given. Shares seeds with
/// [`adv_train`] so the two coincide when attack and transforms are off.
pub fn erm_train<T: Scalar>(data: &DatasetSplit<T>, spec: &ModelSpec, cfg: &TrainConfig) -> Result<(ModelState<T>, Vec<f64>)> {
    cfg.validate()?;
    let root = SeedTree::new(cfg.seed).child("train");
    let mut model = init_model::<T>(spec, root.child("model").state())?;
    let mut sampler = MinibatchSampler::new(data.len(), cfg.batch_size, root.child("batches"));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x, y) = data.batch(&sampler.next_batch());
        let (loss, g) = model.param_gradients(&x, &y).map_err(|e| at_step(step, e))?;
        model.sgd_step(&g, T::of(cfg.lr_at(step)), T::of(cfg.momentum))?;
        check(step, loss, &model)?;
        losses.push(loss);
    }
    Ok((model, losses))
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric { detail, .. } => Error::Numeric { step, detail },
        other => other,
    }
}

fn check<T: Scalar>(step: usize, loss: f64, model: &ModelState<T>) -> Result<()> {
    if !loss.is_finite() || !model.all_finite() {
        return Err(Error::Numeric { step, detail: format!("training diverged (loss {loss})") });
    }
    Ok(())
}

/// Transformed minibatch at `step`, with the attack added when `rho_a > 0`.
pub(crate) fn attacked_batch<T: Scalar>(
    x: &Tensor<T>,
    y: &[usize],
    model: &ModelState<T>,
    policy: &TransformPolicy,
    attack: Option<&PgdConfig>,
    tree: SeedTree,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let instances: Vec<TransformInstance> = (0..s.n)
        .map(|i| sample_transform(policy, (s.h, s.w), &mut tree.child("t").index(i as u64).rng()))
        .collect::<Result<_>>()?;
    let moved = if policy.enabled { apply_each(&instances, x)? } else { x.clone() };
    match attack {
        None => Ok(moved),
        Some(cfg) => {
            let seeds: Vec<SeedTree> = (0..s.n).map(|i| tree.child("a").index(i as u64)).collect();
            let d = pgd(&moved, y, model, cfg, &seeds)?;
            moved.add(&d)
        }
    }
}

/// Madry-style training: per minibatch sample transforms, craft a
/// random-start PGD attack of radius `rho_a`, take an SGD step on the
/// attacked batch. With `validation` and `cfg.early_stop`, the parameters with
/// the best validation loss are returned.
pub fn adv_train<T: Scalar>(
    data: &DatasetSplit<T>,
    validation: Option<&DatasetSplit<T>>,
    test: &DatasetSplit<T>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<(ModelState<T>, EvalReport)> {
    cfg.validate()?;
    cfg.transforms.validate(spec.input.height, spec.input.width)?;
    let start = backward_passes();
    let root = SeedTree::new(cfg.seed).child("train");
    let mut model = init_model::<T>(spec, root.child("model").state())?;
    let mut sampler = MinibatchSampler::new(data.len(), cfg.batch_size, root.child("batches"));
    let attack = (cfg.rho_a > 0.0).then(|| cfg.attack());
    let early = match (validation, cfg.early_stop) {
        (Some(v), Some(es)) => Some((v, es)),
        _ => None,
    };
    let mut best: Option<(f64, usize, ModelState<T>)> = None;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut val_losses = Vec::new();
    let mut steps_run = 0;
    for step in 0..cfg.steps {
        let (x, y) = data.batch(&sampler.next_batch());
        let tree = root.child("step").index(step as u64);
        let input = attacked_batch(&x, &y, &model, &cfg.transforms, attack.as_ref(), tree).map_err(|e| at_step(step, e))?;
        let (loss, g) = model.param_gradients(&input, &y).map_err(|e| at_step(step, e))?;
        model.sgd_step(&g, T::of(cfg.lr_at(step)), T::of(cfg.momentum))?;
        check(step, loss, &model)?;
        losses.push(loss);
        steps_run = step + 1;
        if let Some((v, es)) = early {
            if steps_run % es.eval_every == 0 || steps_run == cfg.steps {
                let vl = mean_loss(&model, v)?;
                val_losses.push((steps_run, vl));
                if best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                    best = Some((vl, steps_run, model.clone()));
                }
                let since = steps_run - best.as_ref().map_or(0, |b| b.1);
                if since >= es.patience {
                    break;
                }
            }
        }
    }
    let (model, selected) = match best {
        Some((_, s, m)) => (m, s),
        None => (model, steps_run),
    };
    let acc = accuracy(&model, test)?;
    let report = EvalReport {
        test_accuracy: acc,
        protection: 1.0 - acc,
        train_losses: losses,
        validation_losses: val_losses,
        backward_passes: backward_passes() - start,
        steps_run,
        selected_step: selected,
        config: cfg.clone(),
    };
    Ok((model, report))
}

/// `F = 1 − accuracy` on clean test data.
pub fn protection_performance<T: Scalar>(model: &ModelState<T>, test: &DatasetSplit<T>) -> Result<f64> {
    Ok(1.0 - accuracy(model, test)?)
}

/// Splits off a held-out validation set of `size` examples. `protected`
/// and `clean` are two versions of the same examples; a `clean_ratio` share
/// of the held-out examples is taken in its clean version and the rest in
/// its protected version. Returns `(remaining protected training data,
/// validation)`.
pub fn holdout_validation<T: Scalar>(
    protected: &DatasetSplit<T>,
    clean: &DatasetSplit<T>,
    clean_ratio: f64,
    size: usize,
    seed: u64,
) -> Result<(DatasetSplit<T>, DatasetSplit<T>)> {
    if !(0.0..=1.0).contains(&clean_ratio) {
        return Err(Error::Domain(format!("clean_ratio {clean_ratio} outside [0, 1]")));
    }
    if protected.images.shape() != clean.images.shape() || protected.labels != clean.labels {
        return Err(Error::State("protected and clean splits do not describe the same examples".into()));
    }
    if size == 0 || size >= protected.len() {
        return Err(Error::Domain(format!("cannot hold out {size} of {} examples", protected.len())));
    }
    let mut order: Vec<usize> = (0..protected.len()).collect();
    order.shuffle(&mut SeedTree::new(seed).child("validation").rng());
    let n_clean = (clean_ratio * size as f64).round() as usize;
    let mut val = protected.subset(&order[..size]);
    for (k, &i) in order[..n_clean].iter().enumerate() {
        val.images.example_mut(k).copy_from_slice(clean.images.example(i));
        val.provenance.poisoned[k] = false;
    }
    let mut rest = order[size..].to_vec();
    rest.sort_unstable();
    Ok((protected.subset(&rest), val))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Mean,
    Median,
    Gaussian,
}

impl FilterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterKind::Mean => "mean",
            FilterKind::Median => "median",
            FilterKind::Gaussian => "gaussian",
        }
    }
}

fn binomial_row(window: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for _ in 1..window {
        let mut next = vec![1.0; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let s: f64 = row.iter().sum();
    row.iter().map(|v| v / s).collect()
}

/// Per-channel `window × window` filter with edge replication. The
/// Gaussian kernel is the binomial outer product (`[1,2,1]⊗[1,2,1]/16` at
/// window 3).
pub fn lowpass<T: Scalar>(data: &DatasetSplit<T>, kind: FilterKind, window: usize) -> Result<DatasetSplit<T>> {
    if window % 2 == 0 {
        return Err(Error::Domain(format!("filter window {window} must be odd")));
    }
    let s = data.images.shape();
    let r = (window / 2) as isize;
    let row = binomial_row(window);
    let mut out = data.clone();
    let mut neigh: Vec<T> = Vec::with_capacity(window * window);
    for plane in 0..s.n * s.c {
        let base = plane * s.h * s.w;
        let src = &data.images.data()[base..base + s.h * s.w];
        let dst = &mut out.images.data_mut()[base..base + s.h * s.w];
        for y in 0..s.h {
            for x in 0..s.w {
                neigh.clear();
                for dy in -r..=r {
                    let yy = (y as isize + dy).clamp(0, s.h as isize - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x as isize + dx).clamp(0, s.w as isize - 1) as usize;
                        neigh.push(src[yy * s.w + xx]);
                    }
                }
                dst[y * s.w + x] = match kind {
                    FilterKind::Mean => {
                        let sum: f64 = neigh.iter().map(|v| v.widen()).sum();
                        T::of(sum / neigh.len() as f64)
                    }
                    FilterKind::Gaussian => {
                        let mut sum = 0.0;
                        for (k, v) in neigh.iter().enumerate() {
                            sum += row[k / window] * row[k % window] * v.widen();
                        }
                        T::of(sum)
                    }
                    FilterKind::Median => {
                        neigh.sort_by(|a, b| a.partial_cmp(b).expect("finite pixels"));
                        neigh[neigh.len() / 2]
                    }
                };
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{synth_dataset, SynthSpec};
    use crate::models::InputShape;

    fn setup() -> (DatasetSplit<f32>, DatasetSplit<f32>, ModelSpec) {
        let spec = SynthSpec { height: 8, width: 8, train_count: 64, test_count: 16, ..SynthSpec::default() };
        let (a, b) = synth_dataset(&spec, 2).unwrap();
        (a, b, ModelSpec::mlp(InputShape { channels: 1, height: 8, width: 8 }, 4))
    }

    #[test]
    fn standard_adv_train_matches_erm() {
        let (train, test, spec) = setup();
        let cfg = TrainConfig { steps: 20, batch_size: 16, transforms: TransformPolicy::disabled(), ..Default::default() };
        let (a, report) = adv_train(&train, None, &test, &spec, &cfg).unwrap();
        let (b, losses) = erm_train(&train, &spec, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(report.train_losses, losses);
        assert_eq!(report.protection, 1.0 - report.test_accuracy);
        assert_eq!(report.backward_passes, 20);
    }

    #[test]
    fn adversarial_training_counts_attack_passes() {
        let (train, test, spec) = setup();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 16,
            rho_a: 4.0 / 255.0,
            transforms: TransformPolicy { pad: 1, crop_h: 8, crop_w: 8, ..Default::default() },
            ..Default::default()
        };
        let (_, report) = adv_train(&train, None, &test, &spec, &cfg).unwrap();
        assert_eq!(report.backward_passes, 3 * 11);
    }

    #[test]
    fn early_stop_keeps_best_checkpoint() {
        let (train, test, spec) = setup();
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 16,
            lr: 0.5,
            early_stop: Some(EarlyStop { patience: 20, eval_every: 10 }),
            transforms: TransformPolicy::disabled(),
            ..Default::default()
        };
        let (m, report) = adv_train(&train, Some(&test), &test, &spec, &cfg).unwrap();
        let best = report.validation_losses.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        assert_eq!(mean_loss(&m, &test).unwrap(), best);
        let stop = report.validation_losses.last().unwrap().1;
        assert!(best <= stop);
    }

    #[test]
    fn constant_predictor_protection() {
        let (_, test, spec) = setup();
        let mut m = init_model::<f32>(&spec, 0).unwrap();
        for (k, p) in m.params.iter_mut() {
            if k.starts_with("head") {
                *p = Tensor::zeros(p.shape());
            }
        }
        assert!((protection_performance(&m, &test).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn filters_on_constant_and_impulse() {
        let (train, _, _) = setup();
        let mut d = train.subset(&[0]);
        d.images = Tensor::full(d.images.shape(), 0.25);
        for kind in [FilterKind::Mean, FilterKind::Median, FilterKind::Gaussian] {
            let f = lowpass(&d, kind, 3).unwrap();
            assert!(f.images.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        }
        let mut imp = d.clone();
        imp.images = Tensor::zeros(d.images.shape());
        imp.images.data_mut()[3 * 8 + 3] = 0.45;
        let f = lowpass(&imp, FilterKind::Mean, 3).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let near = (2..=4).contains(&y) && (2..=4).contains(&x);
                let want = if near { 0.45 / 9.0 } else { 0.0 };
                assert!((f.images.at(0, 0, y, x) - want).abs() < 1e-7);
            }
        }
        assert!(lowpass(&imp, FilterKind::Mean, 2).is_err());
    }

    #[test]
    fn holdout_keeps_examples_apart() {
        let (clean, _, _) = setup();
        let bank = crate::noisegen::sc_noise(&clean, 2, crate::perturb::LinfBall::new(0.03).unwrap(), 0).unwrap();
        let prot = crate::noisegen::poison_dataset(&clean, &bank, 1.0, 0).unwrap();
        let (rest, val) = holdout_validation(&prot, &clean, 0.25, 16, 0).unwrap();
        assert_eq!(rest.len() + val.len(), clean.len());
        assert_eq!(val.poisoned_count(), 12);
        assert!(holdout_validation(&prot, &clean, 0.5, 64, 0).is_err());
    }
}
