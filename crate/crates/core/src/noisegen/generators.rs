//! Surrogate training for SEM, REM and EM, and the final regeneration pass.

use crate::datastore::DatasetSplit;
use crate::diff::{backward_passes, Tensor};
use crate::error::{Error, Result};
use crate::models::{init_model, ModelState};
use crate::noisegen::{GenConfig, Method, NoiseBank};
use crate::perturb::{eot_noise_grad, pgd, sample_uniform_each, LinfBall, NoiseSource};
use crate::sampler::{cosine_lr, MinibatchSampler};
use crate::scalar::Scalar;
use crate::seed::SeedTree;
use crate::transforms::{apply_each, sample_transform, TransformInstance, TransformPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmVariant {
    /// Minimize-mode PGD on `x + δᵘ`, as in the original formulation.
    Plain,
    /// The same step routed through the J-sample EOT estimator with no
    /// transform and no perturbation.
    Eot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    Sem,
    Rem,
    Em(EmVariant),
}

/// Result of a generator training run.
#[derive(Clone, Debug)]
pub struct GeneratorRun<T> {
    pub surrogate: ModelState<T>,
    /// Surrogate training loss per outer step.
    pub losses: Vec<f64>,
    /// Parameter fingerprint after each outer step.
    pub fingerprints: Vec<u64>,
    /// Backward passes spent on each minibatch.
    pub backward_per_batch: Vec<u64>,
    /// `(outer step, surrogate)` saved every `checkpoint_every` steps.
    pub checkpoints: Vec<(usize, ModelState<T>)>,
}

fn example_seeds(step_tree: SeedTree, n: usize, label: &str) -> Vec<SeedTree> {
    (0..n).map(|i| step_tree.child(label).index(i as u64)).collect()
}

fn sign_step<T: Scalar>(delta: &mut Tensor<T>, grad: &Tensor<T>, alpha: T, radius: T) {
    for (d, &g) in delta.data_mut().iter_mut().zip(grad.data()) {
        *d = (*d - alpha * g.signum0()).max(-radius).min(radius);
    }
}

fn nonfinite(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric { detail, .. } => Error::Numeric { step, detail },
        other => other,
    }
}

/// Shared outer loop of the three min-min(-max) generators.
pub fn train_generator<T: Scalar>(train: &DatasetSplit<T>, cfg: &GenConfig, kind: GeneratorKind) -> Result<GeneratorRun<T>> {
    cfg.validate()?;
    let root = SeedTree::new(cfg.seed);
    let mut model = init_model::<T>(&cfg.surrogate, root.child("surrogate").state())?;
    let mut sampler = MinibatchSampler::new(train.len(), cfg.batch_size, root.child("batches"));
    let (h, w) = (cfg.surrogate.input.height, cfg.surrogate.input.width);
    let rho_u = T::of(cfg.rho_u);
    let alpha_u = T::of(cfg.alpha_u);
    let attack = cfg.attack_pgd();
    let source = match kind {
        GeneratorKind::Sem => NoiseSource::Random { radius: cfg.rho_r() },
        GeneratorKind::Rem if cfg.steps_a > 0 => NoiseSource::Adversarial(attack),
        GeneratorKind::Rem | GeneratorKind::Em(_) => NoiseSource::None,
    };
    let noise_policy = match kind {
        GeneratorKind::Em(_) => TransformPolicy::disabled(),
        _ => cfg.transforms,
    };
    let mut run = GeneratorRun {
        surrogate: model.clone(),
        losses: Vec::with_capacity(cfg.steps),
        fingerprints: Vec::with_capacity(cfg.steps),
        backward_per_batch: Vec::with_capacity(cfg.steps),
        checkpoints: Vec::new(),
    };
    for step in 0..cfg.steps {
        let before = backward_passes();
        let idx = sampler.next_batch();
        let (x, y) = train.batch(&idx);
        let tree = root.child("gen").index(step as u64);
        let n = idx.len();

        let mut delta_u = if cfg.steps_u == 0 {
            Tensor::zeros(x.shape())
        } else {
            sample_uniform_each(x.shape(), LinfBall::new(cfg.rho_u)?, &example_seeds(tree, n, "init"))?
        };
        for k in 0..cfg.steps_u {
            let g = match kind {
                GeneratorKind::Em(EmVariant::Plain) => model.input_gradient(&x.add(&delta_u)?, &y).map_err(|e| nonfinite(step, e))?.1,
                _ => {
                    let seeds: Vec<SeedTree> = example_seeds(tree, n, "eot").iter().map(|s| s.index(k as u64)).collect();
                    eot_noise_grad(&x, &delta_u, &y, &model, cfg.eot_samples, &source, &noise_policy, &seeds)
                        .map_err(|e| nonfinite(step, e))?
                }
            };
            sign_step(&mut delta_u, &g, alpha_u, rho_u);
        }

        let protected = x.add(&delta_u)?;
        let input = match kind {
            GeneratorKind::Em(_) => protected,
            GeneratorKind::Sem | GeneratorKind::Rem => {
                let instances: Vec<TransformInstance> = example_seeds(tree, n, "outer_t")
                    .iter()
                    .map(|s| sample_transform(&cfg.transforms, (h, w), &mut s.rng()))
                    .collect::<Result<_>>()?;
                let moved = apply_each(&instances, &protected)?;
                if cfg.steps_a == 0 {
                    moved
                } else {
                    let adv = pgd(&moved, &y, &model, &attack, &example_seeds(tree, n, "outer_a"))
                        .map_err(|e| nonfinite(step, e))?;
                    moved.add(&adv)?
                }
            }
        };
        let (loss, grads) = model.param_gradients(&input, &y).map_err(|e| nonfinite(step, e))?;
        let lr = T::of(cosine_lr(cfg.lr, step, cfg.steps));
        model.sgd_step(&grads, lr, T::of(cfg.momentum))?;
        if !model.all_finite() {
            return Err(Error::Numeric { step, detail: "surrogate parameters became non-finite".into() });
        }
        run.losses.push(loss);
        run.fingerprints.push(model.fingerprint());
        run.backward_per_batch.push(backward_passes() - before);
        if let Some(every) = cfg.checkpoint_every {
            if every > 0 && (step + 1) % every == 0 {
                run.checkpoints.push((step + 1, model.clone()));
            }
        }
    }
    run.surrogate = model;
    Ok(run)
}

/// Noise step against random perturbations inside random transforms.
pub fn train_sem_generator<T: Scalar>(train: &DatasetSplit<T>, cfg: &GenConfig) -> Result<GeneratorRun<T>> {
    train_generator(train, cfg, GeneratorKind::Sem)
}

/// Noise step against a full PGD attack per EOT sample.
pub fn train_rem_generator<T: Scalar>(train: &DatasetSplit<T>, cfg: &GenConfig) -> Result<GeneratorRun<T>> {
    train_generator(train, cfg, GeneratorKind::Rem)
}

/// Alternating min-min without transforms or attack.
pub fn train_em_generator<T: Scalar>(train: &DatasetSplit<T>, cfg: &GenConfig, variant: EmVariant) -> Result<GeneratorRun<T>> {
    train_generator(train, cfg, GeneratorKind::Em(variant))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegenSource {
    /// SEM: uniform perturbations of radius `ρ_r`.
    Random,
    /// REM: a PGD attack per EOT sample.
    Adversarial,
    /// EM: no perturbation and no transforms.
    None,
}

/// Crafts fresh noise for every example against a fixed generator.
///
/// Example `i` draws all of its randomness from
/// `seed.child("regen").index(i)`, so the result does not depend on how the
/// data is batched.
pub fn regenerate_noise<T: Scalar>(
    generator: &ModelState<T>,
    data: &DatasetSplit<T>,
    cfg: &GenConfig,
    source: RegenSource,
) -> Result<NoiseBank<T>> {
    cfg.validate()?;
    let root = SeedTree::new(cfg.seed).child("regen");
    let rho_u = T::of(cfg.rho_u);
    let alpha_u = T::of(cfg.alpha_u);
    let (noise_source, policy, samples, method) = match source {
        RegenSource::Random => (NoiseSource::Random { radius: cfg.rho_r() }, cfg.transforms, cfg.eot_samples, Method::Sem),
        RegenSource::Adversarial => {
            let s = if cfg.steps_a > 0 { NoiseSource::Adversarial(cfg.attack_pgd()) } else { NoiseSource::None };
            (s, cfg.transforms, cfg.eot_samples, Method::Rem)
        }
        RegenSource::None => (NoiseSource::None, TransformPolicy::disabled(), 1, Method::Em),
    };
    let mut deltas = Tensor::zeros(data.images.shape());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(cfg.batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let trees: Vec<SeedTree> = chunk.iter().map(|&i| root.index(i as u64)).collect();
        let inits: Vec<SeedTree> = trees.iter().map(|t| t.child("init")).collect();
        let mut delta_u = sample_uniform_each(x.shape(), LinfBall::new(cfg.rho_u)?, &inits)?;
        for k in 0..cfg.steps_u {
            let seeds: Vec<SeedTree> = trees.iter().map(|t| t.child("eot").index(k as u64)).collect();
            let g = eot_noise_grad(&x, &delta_u, &y, generator, samples, &noise_source, &policy, &seeds)
                .map_err(|e| nonfinite(k, e))?;
            sign_step(&mut delta_u, &g, alpha_u, rho_u);
        }
        deltas.scatter_examples(chunk, &delta_u)?;
    }
    Ok(NoiseBank { deltas, radius: cfg.rho_u, method, seed: cfg.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{synth_dataset, SynthSpec};
    use crate::models::{Architecture, InputShape, ModelSpec};

    fn setup(n: usize) -> (DatasetSplit<f32>, GenConfig) {
        let spec = SynthSpec { height: 8, width: 8, train_count: n, test_count: 4, ..SynthSpec::default() };
        let (train, _) = synth_dataset(&spec, 1).unwrap();
        let model = ModelSpec {
            architecture: Architecture::Mlp { hidden: vec![16] },
            input: InputShape { channels: 1, height: 8, width: 8 },
            num_classes: 4,
        };
        let mut cfg = GenConfig::new(model);
        cfg.steps = 3;
        cfg.batch_size = 8;
        cfg.steps_u = 2;
        cfg.steps_a = 2;
        cfg.transforms = crate::transforms::TransformPolicy { pad: 1, crop_h: 8, crop_w: 8, ..Default::default() };
        (train, cfg)
    }

    #[test]
    fn degenerate_config_is_one_plain_sgd_step() {
        let (train, mut cfg) = setup(8);
        cfg.steps = 1;
        cfg.steps_u = 0;
        cfg.steps_a = 0;
        cfg.transforms = TransformPolicy::disabled();
        let run = train_sem_generator(&train, &cfg).unwrap();

        let root = SeedTree::new(cfg.seed);
        let mut model = init_model::<f32>(&cfg.surrogate, root.child("surrogate").state()).unwrap();
        let idx = MinibatchSampler::new(8, 8, root.child("batches")).next_batch();
        let (x, y) = train.batch(&idx);
        let (_, g) = model.param_gradients(&x, &y).unwrap();
        model.sgd_step(&g, cfg.lr as f32, cfg.momentum as f32).unwrap();
        assert_eq!(run.surrogate, model);
    }

    #[test]
    fn counters_follow_the_formulas() {
        let (train, mut cfg) = setup(16);
        cfg.eot_samples = 2;
        let sem = train_sem_generator(&train, &cfg).unwrap();
        assert!(sem.backward_per_batch.iter().all(|&c| c == cfg.sem_backward_count()));
        let rem = train_rem_generator(&train, &cfg).unwrap();
        assert!(rem.backward_per_batch.iter().all(|&c| c == cfg.rem_backward_count()));
        assert_eq!(cfg.sem_backward_count(), 2 * 2 + 2 + 1);
        assert_eq!(cfg.rem_backward_count(), 2 * 2 * 3 + 2 + 1);
    }

    #[test]
    fn rem_without_attack_equals_sem_without_random_noise() {
        let (train, mut cfg) = setup(16);
        cfg.steps_a = 0;
        cfg.rho_r = Some(0.0);
        let sem = train_sem_generator(&train, &cfg).unwrap();
        let rem = train_rem_generator(&train, &cfg).unwrap();
        assert_eq!(sem.fingerprints, rem.fingerprints);
        assert_eq!(sem.surrogate, rem.surrogate);
    }

    #[test]
    fn em_with_zero_noise_steps_is_plain_erm() {
        let (train, mut cfg) = setup(16);
        cfg.steps_u = 0;
        let run = train_em_generator(&train, &cfg, EmVariant::Plain).unwrap();
        let root = SeedTree::new(cfg.seed);
        let mut model = init_model::<f32>(&cfg.surrogate, root.child("surrogate").state()).unwrap();
        let mut s = MinibatchSampler::new(16, 8, root.child("batches"));
        for step in 0..cfg.steps {
            let (x, y) = train.batch(&s.next_batch());
            let (_, g) = model.param_gradients(&x, &y).unwrap();
            model.sgd_step(&g, cosine_lr(cfg.lr, step, cfg.steps) as f32, cfg.momentum as f32).unwrap();
        }
        assert_eq!(run.surrogate, model);
    }

    #[test]
    fn regeneration_without_steps_returns_the_initialization() {
        let (train, mut cfg) = setup(8);
        cfg.steps_u = 0;
        let m = init_model::<f32>(&cfg.surrogate, 0).unwrap();
        let bank = regenerate_noise(&m, &train, &cfg, RegenSource::Random).unwrap();
        let root = SeedTree::new(cfg.seed).child("regen");
        let inits: Vec<SeedTree> = (0..8).map(|i| root.index(i).child("init")).collect();
        let expect: Tensor<f32> = sample_uniform_each(train.images.shape(), LinfBall::new(cfg.rho_u).unwrap(), &inits).unwrap();
        assert_eq!(bank.deltas, expect);
        assert!(bank.within_ball());
    }

    #[test]
    fn regeneration_is_deterministic_and_batch_independent() {
        let (train, mut cfg) = setup(12);
        let m = train_sem_generator(&train, &cfg).unwrap().surrogate;
        let a = regenerate_noise(&m, &train, &cfg, RegenSource::Random).unwrap();
        let b = regenerate_noise(&m, &train, &cfg, RegenSource::Random).unwrap();
        assert_eq!(a, b);
        assert!(a.within_ball());
        cfg.batch_size = 5;
        let c = regenerate_noise(&m, &train, &cfg, RegenSource::Random).unwrap();
        for i in 0..12 {
            let d: f32 = a.deltas.example(i).iter().zip(c.deltas.example(i)).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
            assert!(d <= 2.0 * cfg.alpha_u as f32, "example {i} moved by {d}");
        }
        for src in [RegenSource::Adversarial, RegenSource::None] {
            assert!(regenerate_noise(&m, &train, &cfg, src).unwrap().within_ball());
        }
    }
}
