//! ℓ∞ projection, uniform sampling, signed-gradient PGD, and the J-sample
//! expectation-over-transformation gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::models::ModelState;
use crate::scalar::Scalar;
use crate::seed::SeedTree;
use crate::transforms::{apply_each, backprop_each, sample_transform, TransformInstance, TransformPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinfBall {
    pub radius: f64,
}

impl LinfBall {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::Domain(format!("ball radius {radius} must be ≥ 0")));
        }
        Ok(LinfBall { radius })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdMode {
    Maximize,
    Minimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub radius: f64,
    pub step: f64,
    pub steps: usize,
    pub mode: PgdMode,
    pub random_start: bool,
}

impl PgdConfig {
    /// Attack PGD with step `ρ/5`, 10 iterations, random start.
    pub fn attack(radius: f64) -> Self {
        PgdConfig { radius, step: radius / 5.0, steps: 10, mode: PgdMode::Maximize, random_start: true }
    }

    /// Error-minimizing PGD with step `ρ/5`, 10 iterations, zero start.
    pub fn defense(radius: f64) -> Self {
        PgdConfig { radius, step: radius / 5.0, steps: 10, mode: PgdMode::Minimize, random_start: false }
    }

    /// Step `α` must be positive whenever the radius is; a zero-radius
    /// config may carry a zero step.
    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 0.0) {
            return Err(Error::Domain(format!("pgd radius {} must be ≥ 0", self.radius)));
        }
        if self.steps == 0 {
            return Err(Error::Domain("pgd needs at least one step".into()));
        }
        if !(self.step > 0.0 || (self.radius == 0.0 && self.step == 0.0)) {
            return Err(Error::Domain(format!("pgd step {} must be > 0", self.step)));
        }
        Ok(())
    }
}

/// Elementwise clamp to `[−ρ, ρ]`.
pub fn project_linf<T: Scalar>(delta: &Tensor<T>, ball: LinfBall) -> Tensor<T> {
    let r = T::of(ball.radius);
    delta.clamp(-r, r)
}

fn project_in_place<T: Scalar>(delta: &mut Tensor<T>, radius: T) {
    for v in delta.data_mut() {
        *v = v.max(-radius).min(radius);
    }
}

/// I.i.d. `U(−ρ, ρ)` entries.
pub fn sample_uniform<T: Scalar, R: Rng + ?Sized>(shape: Shape, ball: LinfBall, rng: &mut R) -> Tensor<T> {
    if ball.radius == 0.0 {
        return Tensor::zeros(shape);
    }
    let r = ball.radius;
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-r..=r)))
}

/// Uniform noise where example `i` draws from `seeds[i]`.
pub fn sample_uniform_each<T: Scalar>(shape: Shape, ball: LinfBall, seeds: &[SeedTree]) -> Result<Tensor<T>> {
    if seeds.len() != shape.n {
        return Err(Error::dim("sample_uniform_each", format!("{} seeds for {shape}", seeds.len())));
    }
    let mut out = Tensor::zeros(shape);
    if ball.radius == 0.0 {
        return Ok(out);
    }
    let one = shape.with_n(1);
    for (i, s) in seeds.iter().enumerate() {
        let mut rng = s.rng();
        let t: Tensor<T> = sample_uniform(one, ball, &mut rng);
        out.example_mut(i).copy_from_slice(t.data());
    }
    Ok(out)
}

fn renumber(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric { detail, .. } => Error::Numeric { step, detail },
        other => other,
    }
}

/// Runs `cfg.steps` signed-gradient iterations from `delta0`.
pub fn pgd_from<T: Scalar>(
    x: &Tensor<T>,
    labels: &[usize],
    model: &ModelState<T>,
    cfg: &PgdConfig,
    delta0: Tensor<T>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if delta0.shape() != x.shape() {
        return Err(Error::shapes("pgd", x.shape(), delta0.shape()));
    }
    let radius = T::of(cfg.radius);
    let alpha = T::of(cfg.step);
    let dir = match cfg.mode {
        PgdMode::Maximize => T::one(),
        PgdMode::Minimize => -T::one(),
    };
    let mut delta = delta0;
    project_in_place(&mut delta, radius);
    for step in 0..cfg.steps {
        let input = x.add(&delta)?;
        let (loss, grad) = model.input_gradient(&input, labels).map_err(|e| renumber(e, step))?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::Numeric { step, detail: format!("pgd loss {loss}") });
        }
        for (d, &g) in delta.data_mut().iter_mut().zip(grad.data()) {
            *d += dir * alpha * g.signum0();
        }
        project_in_place(&mut delta, radius);
    }
    Ok(delta)
}

/// PGD over a batch. With `random_start`, example `i` draws its start from
/// `seeds[i]`; otherwise the start is zero.
pub fn pgd<T: Scalar>(
    x: &Tensor<T>,
    labels: &[usize],
    model: &ModelState<T>,
    cfg: &PgdConfig,
    seeds: &[SeedTree],
) -> Result<Tensor<T>> {
    let delta0 = if cfg.random_start {
        let starts: Vec<SeedTree> = seeds.iter().map(|s| s.child("pgd_start")).collect();
        sample_uniform_each(x.shape(), LinfBall::new(cfg.radius)?, &starts)?
    } else {
        Tensor::zeros(x.shape())
    };
    pgd_from(x, labels, model, cfg, delta0)
}

/// What is added after the transform inside each EOT sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSource {
    None,
    Random { radius: f64 },
    Adversarial(PgdConfig),
}

/// Averages `samples` gradients of `ℓ(f(t_j(x + δᵘ) + δ_j), y)` with respect
/// to `δᵘ`. Example `i` of sample `j` draws its transform and perturbation
/// from `seeds[i].index(j)`.
#[allow(clippy::too_many_arguments)]
pub fn eot_noise_grad<T: Scalar>(
    x: &Tensor<T>,
    delta_u: &Tensor<T>,
    labels: &[usize],
    model: &ModelState<T>,
    samples: usize,
    source: &NoiseSource,
    policy: &TransformPolicy,
    seeds: &[SeedTree],
) -> Result<Tensor<T>> {
    let mut sum = Tensor::zeros(x.shape());
    for g in eot_sample_grads(x, delta_u, labels, model, samples, source, policy, seeds)? {
        sum.add_assign(&g)?;
    }
    let j = T::of(samples as f64);
    Ok(sum.map(|v| v / j))
}

/// The individual per-sample gradients that [`eot_noise_grad`] averages.
#[allow(clippy::too_many_arguments)]
pub fn eot_sample_grads<T: Scalar>(
    x: &Tensor<T>,
    delta_u: &Tensor<T>,
    labels: &[usize],
    model: &ModelState<T>,
    samples: usize,
    source: &NoiseSource,
    policy: &TransformPolicy,
    seeds: &[SeedTree],
) -> Result<Vec<Tensor<T>>> {
    if samples == 0 {
        return Err(Error::Domain("eot needs at least one sample".into()));
    }
    let s = x.shape();
    if seeds.len() != s.n {
        return Err(Error::dim("eot_noise_grad", format!("{} seeds for {s}", seeds.len())));
    }
    let protected = x.add(delta_u)?;
    let mut out = Vec::with_capacity(samples);
    for j in 0..samples {
        let sample_seeds: Vec<SeedTree> = seeds.iter().map(|t| t.index(j as u64)).collect();
        let instances: Vec<TransformInstance> = sample_seeds
            .iter()
            .map(|t| sample_transform(policy, (s.h, s.w), &mut t.child("t").rng()))
            .collect::<Result<_>>()?;
        let moved = apply_each(&instances, &protected)?;
        let input = match source {
            NoiseSource::None => moved,
            NoiseSource::Random { radius } => {
                let rs: Vec<SeedTree> = sample_seeds.iter().map(|t| t.child("r")).collect();
                let r = sample_uniform_each(moved.shape(), LinfBall::new(*radius)?, &rs)?;
                moved.add(&r)?
            }
            NoiseSource::Adversarial(cfg) => {
                let as_: Vec<SeedTree> = sample_seeds.iter().map(|t| t.child("a")).collect();
                let a = pgd(&moved, labels, model, cfg, &as_)?;
                moved.add(&a)?
            }
        };
        let (loss, g_in) = model.input_gradient(&input, labels)?;
        if !loss.is_finite() {
            return Err(Error::Numeric { step: j, detail: format!("eot loss {loss}") });
        }
        out.push(backprop_each(&instances, &g_in)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_model, Architecture, InputShape, ModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> ModelSpec {
        ModelSpec {
            architecture: Architecture::Mlp { hidden: vec![6] },
            input: InputShape { channels: 1, height: 4, width: 4 },
            num_classes: 3,
        }
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let d = Tensor::<f32>::from_vec(Shape::flat(1, 2), vec![0.05, -0.02]).unwrap();
        let ball = LinfBall::new(0.03).unwrap();
        let p = project_linf(&d, ball);
        assert_eq!(p.data(), &[0.03, -0.02]);
        assert_eq!(project_linf(&p, ball), p);
    }

    #[test]
    fn uniform_zero_radius_and_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z: Tensor<f32> = sample_uniform(Shape::flat(2, 5), LinfBall::new(0.0).unwrap(), &mut rng);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let u: Tensor<f32> = sample_uniform(Shape::flat(10, 100), LinfBall::new(0.1).unwrap(), &mut rng);
        assert!(u.linf_norm() <= 0.1);
    }

    #[test]
    fn uniform_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rho = 0.25;
        let u: Tensor<f64> = sample_uniform(Shape::flat(1, 100_000), LinfBall::new(rho).unwrap(), &mut rng);
        let n = u.len() as f64;
        let mean = u.data().iter().sum::<f64>() / n;
        let var = u.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sigma_mean = (rho * rho / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * sigma_mean);
        assert!((var - rho * rho / 3.0).abs() / (rho * rho / 3.0) < 0.1);
    }

    #[test]
    fn zero_radius_pgd_is_zero() {
        let m = init_model::<f32>(&spec(), 1).unwrap();
        let x = Tensor::full(Shape::new(2, 1, 4, 4), 0.1);
        let cfg = PgdConfig { radius: 0.0, step: 0.0, steps: 3, mode: PgdMode::Maximize, random_start: true };
        let seeds = [SeedTree::new(1), SeedTree::new(2)];
        let d = pgd(&x, &[0, 1], &m, &cfg, &seeds).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preset_step_sizes() {
        let a = PgdConfig::attack(4.0 / 255.0);
        assert_eq!(a.steps, 10);
        assert!((a.step - 4.0 / 255.0 / 5.0).abs() < 1e-15);
        assert!(a.random_start);
        let d = PgdConfig::defense(8.0 / 255.0);
        assert_eq!((d.steps, d.mode), (10, PgdMode::Minimize));
    }

    #[test]
    fn invalid_pgd_configs() {
        let bad = PgdConfig { steps: 0, ..PgdConfig::attack(0.1) };
        assert!(bad.validate().is_err());
        let bad = PgdConfig { step: 0.0, ..PgdConfig::attack(0.1) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn degenerate_eot_is_plain_input_gradient() {
        let m = init_model::<f64>(&spec(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(Shape::new(3, 1, 4, 4), |_| rng.random_range(-0.4..0.4));
        let du = Tensor::from_fn(x.shape(), |_| rng.random_range(-0.03..0.03));
        let y = [0, 1, 2];
        let seeds: Vec<_> = (0..3).map(SeedTree::new).collect();
        let g = eot_noise_grad(&x, &du, &y, &m, 1, &NoiseSource::None, &TransformPolicy::disabled(), &seeds).unwrap();
        let (_, plain) = m.input_gradient(&x.add(&du).unwrap(), &y).unwrap();
        assert_eq!(g, plain);
    }

    #[test]
    fn eot_is_the_mean_of_its_samples() {
        let m = init_model::<f32>(&spec(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::from_fn(Shape::new(2, 1, 4, 4), |_| rng.random_range(-0.4..0.4));
        let du = Tensor::zeros(x.shape());
        let y = [2, 0];
        let seeds: Vec<_> = (10..12).map(SeedTree::new).collect();
        let policy = TransformPolicy { pad: 1, crop_h: 4, crop_w: 4, ..TransformPolicy::default() };
        let src = NoiseSource::Random { radius: 0.02 };
        let g = eot_noise_grad(&x, &du, &y, &m, 4, &src, &policy, &seeds).unwrap();
        let parts = eot_sample_grads(&x, &du, &y, &m, 4, &src, &policy, &seeds).unwrap();
        let mut sum = Tensor::zeros(x.shape());
        for p in &parts {
            sum.add_assign(p).unwrap();
        }
        assert_eq!(g, sum.map(|v| v / 4.0));
    }
}
