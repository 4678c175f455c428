//! Defensive-noise generators and partial-poisoning assembly.

mod baselines;
mod generators;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::perturb::{PgdConfig, PgdMode};
use crate::scalar::Scalar;
use crate::transforms::TransformPolicy;

pub use baselines::{poison_dataset, sc_noise, tap_noise, tap_target};
pub use generators::{
    regenerate_noise, train_em_generator, train_generator, train_rem_generator, train_sem_generator, EmVariant,
    GeneratorKind, GeneratorRun, RegenSource,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Em,
    Rem,
    Sem,
    Tap,
    Sc,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Em => "em",
            Method::Rem => "rem",
            Method::Sem => "sem",
            Method::Tap => "tap",
            Method::Sc => "sc",
        }
    }
}

/// Per-example defensive noise with its radius.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBank<T> {
    pub deltas: Tensor<T>,
    pub radius: f64,
    pub method: Method,
    pub seed: u64,
}

impl<T: Scalar> NoiseBank<T> {
    pub fn zeros_like(data: &Tensor<T>, radius: f64) -> Self {
        NoiseBank { deltas: Tensor::zeros(data.shape()), radius, method: Method::Em, seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.deltas.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when every entry lies in the closed ball of radius `radius`.
    pub fn within_ball(&self) -> bool {
        let r = T::of(self.radius);
        self.deltas.data().iter().all(|v| v.abs() <= r)
    }

    pub fn cast<U: Scalar>(&self) -> NoiseBank<U> {
        NoiseBank { deltas: self.deltas.cast(), radius: self.radius, method: self.method, seed: self.seed }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapDirection {
    Maximize,
    Minimize,
}

impl From<TapDirection> for PgdMode {
    fn from(d: TapDirection) -> Self {
        match d {
            TapDirection::Maximize => PgdMode::Maximize,
            TapDirection::Minimize => PgdMode::Minimize,
        }
    }
}

/// Hyperparameters of every generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Outer steps `M` (minibatches).
    pub steps: usize,
    pub batch_size: usize,
    pub rho_u: f64,
    pub alpha_u: f64,
    pub steps_u: usize,
    pub rho_a: f64,
    pub alpha_a: f64,
    pub steps_a: usize,
    /// Random-perturbation radius; `None` means `rho_a`.
    pub rho_r: Option<f64>,
    pub eot_samples: usize,
    pub transforms: TransformPolicy,
    pub surrogate: ModelSpec,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Save the surrogate every this many outer steps.
    pub checkpoint_every: Option<usize>,
    pub tap_direction: TapDirection,
    pub tap_alpha: f64,
    pub tap_steps: usize,
    pub sc_frame: usize,
}

impl GenConfig {
    /// Global radii `ρᵤ = 8/255`, `ρ_a = 4/255` and the PGD table
    /// (`α = ρ/5`, 10 steps; TAP `ρᵤ/125`, 250 steps).
    pub fn new(surrogate: ModelSpec) -> Self {
        let rho_u = 8.0 / 255.0;
        let rho_a = 4.0 / 255.0;
        GenConfig {
            steps: 300,
            batch_size: 64,
            rho_u,
            alpha_u: rho_u / 5.0,
            steps_u: 10,
            rho_a,
            alpha_a: rho_a / 5.0,
            steps_a: 10,
            rho_r: None,
            eot_samples: 1,
            transforms: TransformPolicy::default(),
            surrogate,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
            checkpoint_every: None,
            tap_direction: TapDirection::Minimize,
            tap_alpha: rho_u / 125.0,
            tap_steps: 250,
            sc_frame: 8,
        }
    }

    pub fn rho_r(&self) -> f64 {
        self.rho_r.unwrap_or(self.rho_a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho_a > self.rho_u {
            return Err(Error::Precondition(format!(
                "adversarial radius {} exceeds defensive radius {}",
                self.rho_a, self.rho_u
            )));
        }
        if self.steps == 0 {
            return Err(Error::Domain("generator needs at least one outer step".into()));
        }
        if self.eot_samples == 0 {
            return Err(Error::Domain("eot_samples must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be at least 1".into()));
        }
        if !(self.rho_u >= 0.0) || !(self.rho_a >= 0.0) || !(self.rho_r() >= 0.0) {
            return Err(Error::Domain("radii must be ≥ 0".into()));
        }
        if self.steps_u > 0 && self.rho_u > 0.0 && !(self.alpha_u > 0.0) {
            return Err(Error::Domain("alpha_u must be > 0".into()));
        }
        if self.steps_a > 0 && self.rho_a > 0.0 && !(self.alpha_a > 0.0) {
            return Err(Error::Domain("alpha_a must be > 0".into()));
        }
        self.surrogate.validate()?;
        self.transforms.validate(self.surrogate.input.height, self.surrogate.input.width)?;
        Ok(())
    }

    pub(crate) fn attack_pgd(&self) -> PgdConfig {
        PgdConfig { radius: self.rho_a, step: self.alpha_a, steps: self.steps_a, mode: PgdMode::Maximize, random_start: true }
    }

    /// Backward passes per minibatch of SEM: `J·Kᵤ + K_a + 1`.
    pub fn sem_backward_count(&self) -> u64 {
        (self.eot_samples * self.steps_u + self.steps_a + 1) as u64
    }

    /// Backward passes per minibatch of REM: `J·Kᵤ·(K_a+1) + K_a + 1`.
    pub fn rem_backward_count(&self) -> u64 {
        (self.eot_samples * self.steps_u * (self.steps_a + 1) + self.steps_a + 1) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::InputShape;

    fn cfg() -> GenConfig {
        GenConfig::new(ModelSpec::small_cnn(InputShape { channels: 1, height: 16, width: 16 }, 4))
    }

    #[test]
    fn defaults_mirror_global_setting() {
        let c = cfg();
        assert!((c.rho_u - 8.0 / 255.0).abs() < 1e-15);
        assert!((c.rho_a - 4.0 / 255.0).abs() < 1e-15);
        assert_eq!(c.rho_r(), c.rho_a);
        assert!((c.alpha_u - c.rho_u / 5.0).abs() < 1e-15);
        assert_eq!((c.steps_u, c.steps_a), (10, 10));
        assert!((c.tap_alpha - c.rho_u / 125.0).abs() < 1e-15);
        assert_eq!(c.tap_steps, 250);
        assert_eq!(c.sc_frame, 8);
    }

    #[test]
    fn radius_ordering_is_checked() {
        let mut c = cfg();
        c.rho_a = c.rho_u * 1.5;
        assert!(matches!(c.validate(), Err(Error::Precondition(_))));
    }

    #[test]
    fn backward_count_arithmetic() {
        let c = cfg();
        assert_eq!(c.sem_backward_count(), 21);
        assert_eq!(c.rem_backward_count(), 121);
        assert!((c.rem_backward_count() as f64 / c.sem_backward_count() as f64 - 5.7619).abs() < 1e-3);
    }
}
