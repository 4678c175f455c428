//! Run configuration: JSON file, environment overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datastore::SynthSpec;
use crate::error::{Error, Result};
use crate::evaluate::{EarlyStop, FilterKind, LrSchedule, TrainConfig};
use crate::models::{Architecture, InputShape, ModelSpec};
use crate::noisegen::{GenConfig, Method, TapDirection};
use crate::transforms::TransformPolicy;

/// Prefix of environment overrides. `FORGE__GENERATOR__RHO_A=0.01` sets
/// `generator.rho_a`; a double underscore separates path segments.
pub const ENV_PREFIX: &str = "FORGE__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgmSource {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    pub num_classes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub synthetic: SynthSpec,
    /// When set, images are read from PGM directories instead.
    pub pgm: Option<PgmSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    pub architecture: Architecture,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        SurrogateSection { architecture: Architecture::SmallCnn { channels: vec![8, 16], dense: 64 } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub method: Method,
    /// Outer steps `M`.
    pub steps: usize,
    pub batch_size: usize,
    /// EOT samples `J`.
    pub eot_samples: usize,
    pub rho_u: f64,
    pub alpha_u: Option<f64>,
    pub steps_u: usize,
    pub rho_a: f64,
    pub alpha_a: Option<f64>,
    pub steps_a: usize,
    pub rho_r: Option<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub checkpoint_every: Option<usize>,
    pub tap_direction: TapDirection,
    pub tap_alpha: Option<f64>,
    pub tap_steps: usize,
    /// Training steps of the clean model that TAP attacks.
    pub tap_clean_steps: usize,
    pub sc_frame: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            method: Method::Sem,
            steps: 300,
            batch_size: 64,
            eot_samples: 1,
            rho_u: 8.0 / 255.0,
            alpha_u: None,
            steps_u: 10,
            rho_a: 4.0 / 255.0,
            alpha_a: None,
            steps_a: 10,
            rho_r: None,
            lr: 0.05,
            momentum: 0.9,
            checkpoint_every: None,
            tap_direction: TapDirection::Minimize,
            tap_alpha: None,
            tap_steps: 250,
            tap_clean_steps: 150,
            sc_frame: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopSection {
    /// Patience in steps.
    pub patience: usize,
    pub eval_every: usize,
    /// Share of clean examples in the held-out validation split.
    pub clean_ratio: f64,
    pub validation_size: usize,
}

impl Default for EarlyStopSection {
    fn default() -> Self {
        EarlyStopSection { patience: 500, eval_every: 50, clean_ratio: 0.0, validation_size: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackerSection {
    /// Grid of adversarial-training radii; 0 is standard training.
    pub rho_a: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
    pub attack_steps: usize,
    pub early_stop: Option<EarlyStopSection>,
    /// Target architecture; defaults to the surrogate's.
    pub architecture: Option<Architecture>,
}

impl Default for AttackerSection {
    fn default() -> Self {
        AttackerSection {
            rho_a: vec![0.0],
            steps: 150,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            schedule: LrSchedule::Cosine,
            attack_steps: 10,
            early_stop: None,
            architecture: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterChoice {
    None,
    Mean,
    Median,
    Gaussian,
}

impl FilterChoice {
    pub fn kind(self) -> Option<FilterKind> {
        match self {
            FilterChoice::None => None,
            FilterChoice::Mean => Some(FilterKind::Mean),
            FilterChoice::Median => Some(FilterKind::Median),
            FilterChoice::Gaussian => Some(FilterKind::Gaussian),
        }
    }

    pub fn as_str(self) -> &'static str {
        self.kind().map_or("none", FilterKind::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub root: u64,
    /// Training seeds of the evaluation grid; empty means `[root]`.
    pub eval: Vec<u64>,
}

impl Default for SeedSection {
    fn default() -> Self {
        SeedSection { root: 0, eval: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    /// Minibatches per robustness estimate.
    pub robustness_steps: usize,
    /// Radius of the adversarial training that measures `F`; defaults to
    /// `generator.rho_a`.
    pub rho_a: Option<f64>,
    /// Training steps behind each `F`; defaults to `attacker.steps`.
    pub train_steps: Option<usize>,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection { robustness_steps: 20, rho_a: None, train_steps: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub surrogate: SurrogateSection,
    pub generator: GeneratorSection,
    pub transforms: TransformPolicy,
    pub attacker: AttackerSection,
    pub protect_fraction: Vec<f64>,
    pub filter: Vec<FilterChoice>,
    pub seeds: SeedSection,
    pub analyze: AnalyzeSection,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSection::default(),
            surrogate: SurrogateSection::default(),
            generator: GeneratorSection::default(),
            transforms: TransformPolicy::default(),
            attacker: AttackerSection::default(),
            protect_fraction: vec![1.0],
            filter: vec![FilterChoice::None],
            seeds: SeedSection::default(),
            analyze: AnalyzeSection::default(),
            output: PathBuf::from("forge-out"),
        }
    }
}

fn pointer_of(path: &str) -> String {
    if path == "." || path.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    for seg in path.split('.') {
        out.push('/');
        let seg = seg.trim_start_matches('[').trim_end_matches(']');
        out.push_str(&seg.replace('~', "~0").replace('/', "~1"));
    }
    out
}

/// Sets `value` at a dotted `key`, creating objects along the way.
pub fn apply_override(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let segs: Vec<&str> = key.split('.').filter(|s| !s.is_empty()).collect();
    if segs.is_empty() {
        return Err(Error::config("", format!("empty override key {key:?}")));
    }
    let mut cur = doc;
    for (i, seg) in segs.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => return Err(Error::config(pointer_of(&segs[..i].join(".")), "override path crosses a non-object")),
        };
        if i + 1 == segs.len() {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Overrides from `(name, value)` pairs: names with [`ENV_PREFIX`] map to
/// dotted lower-case keys; values parse as JSON, falling back to a string.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, Value)> {
    let mut out: Vec<(String, Value)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let key = rest.split("__").map(str::to_ascii_lowercase).collect::<Vec<_>>().join(".");
            let value = serde_json::from_str(&v).unwrap_or(Value::String(v));
            Some((key, value))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

impl RunConfig {
    /// Parses and validates a document after applying `overrides`.
    pub fn from_value(mut doc: Value, overrides: &[(String, Value)]) -> Result<Self> {
        for (k, v) in overrides {
            apply_override(&mut doc, k, v.clone())?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(doc)
            .map_err(|e| Error::config(pointer_of(&e.path().to_string()), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str, overrides: &[(String, Value)]) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::config("", e.to_string()))?;
        Self::from_value(doc, overrides)
    }

    /// Reads `path` and applies process environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &env_overrides(std::env::vars()))
    }

    pub fn input_shape(&self) -> InputShape {
        let s = &self.dataset.synthetic;
        InputShape { channels: s.channels, height: s.height, width: s.width }
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.pgm.as_ref().map_or(self.dataset.synthetic.classes, |p| p.num_classes)
    }

    pub fn surrogate_spec(&self, input: InputShape, num_classes: usize) -> ModelSpec {
        ModelSpec { architecture: self.surrogate.architecture.clone(), input, num_classes }
    }

    pub fn target_spec(&self, input: InputShape, num_classes: usize) -> ModelSpec {
        let architecture = self.attacker.architecture.clone().unwrap_or_else(|| self.surrogate.architecture.clone());
        ModelSpec { architecture, input, num_classes }
    }

    pub fn gen_config(&self, surrogate: ModelSpec, seed: u64) -> GenConfig {
        let g = &self.generator;
        GenConfig {
            steps: g.steps,
            batch_size: g.batch_size,
            rho_u: g.rho_u,
            alpha_u: g.alpha_u.unwrap_or(g.rho_u / 5.0),
            steps_u: g.steps_u,
            rho_a: g.rho_a,
            alpha_a: g.alpha_a.unwrap_or(g.rho_a / 5.0),
            steps_a: g.steps_a,
            rho_r: g.rho_r,
            eot_samples: g.eot_samples,
            transforms: self.transforms,
            surrogate,
            lr: g.lr,
            momentum: g.momentum,
            seed,
            checkpoint_every: g.checkpoint_every,
            tap_direction: g.tap_direction,
            tap_alpha: g.tap_alpha.unwrap_or(g.rho_u / 125.0),
            tap_steps: g.tap_steps,
            sc_frame: g.sc_frame,
        }
    }

    pub fn train_config(&self, rho_a: f64, seed: u64) -> TrainConfig {
        let a = &self.attacker;
        TrainConfig {
            steps: a.steps,
            batch_size: a.batch_size,
            lr: a.lr,
            schedule: a.schedule,
            momentum: a.momentum,
            rho_a,
            alpha_a: None,
            attack_steps: a.attack_steps,
            transforms: self.transforms,
            early_stop: a.early_stop.map(|e| EarlyStop { patience: e.patience, eval_every: e.eval_every }),
            seed,
        }
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        if self.seeds.eval.is_empty() {
            vec![self.seeds.root]
        } else {
            self.seeds.eval.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.generator;
        if g.rho_a > g.rho_u {
            return Err(Error::config(
                "/generator/rho_a",
                format!("adversarial radius {} exceeds defensive radius {}", g.rho_a, g.rho_u),
            ));
        }
        let checks: [(&str, bool, &str); 8] = [
            ("/generator/steps", g.steps >= 1, "must be at least 1"),
            ("/generator/batch_size", g.batch_size >= 1, "must be at least 1"),
            ("/generator/eot_samples", g.eot_samples >= 1, "must be at least 1"),
            ("/generator/rho_u", g.rho_u >= 0.0, "must be ≥ 0"),
            ("/generator/rho_a", g.rho_a >= 0.0, "must be ≥ 0"),
            ("/attacker/steps", self.attacker.steps >= 1, "must be at least 1"),
            ("/attacker/batch_size", self.attacker.batch_size >= 1, "must be at least 1"),
            ("/generator/sc_frame", g.sc_frame >= 1, "must be at least 1"),
        ];
        for (ptr, ok, msg) in checks {
            if !ok {
                return Err(Error::config(ptr, msg));
            }
        }
        if let Some(r) = g.rho_r {
            if !(r >= 0.0) {
                return Err(Error::config("/generator/rho_r", "must be ≥ 0"));
            }
        }
        for (i, r) in self.attacker.rho_a.iter().enumerate() {
            if !(*r >= 0.0) {
                return Err(Error::config(format!("/attacker/rho_a/{i}"), "must be ≥ 0"));
            }
        }
        if self.attacker.rho_a.is_empty() {
            return Err(Error::config("/attacker/rho_a", "grid is empty"));
        }
        for (i, f) in self.protect_fraction.iter().enumerate() {
            if !(0.0..=1.0).contains(f) {
                return Err(Error::config(format!("/protect_fraction/{i}"), "must lie in [0, 1]"));
            }
        }
        if self.protect_fraction.is_empty() {
            return Err(Error::config("/protect_fraction", "list is empty"));
        }
        if self.filter.is_empty() {
            return Err(Error::config("/filter", "list is empty"));
        }
        if let Some(es) = &self.attacker.early_stop {
            if !(0.0..=1.0).contains(&es.clean_ratio) {
                return Err(Error::config("/attacker/early_stop/clean_ratio", "must lie in [0, 1]"));
            }
            if es.eval_every == 0 || es.validation_size == 0 {
                return Err(Error::config("/attacker/early_stop", "eval_every and validation_size must be positive"));
            }
        }
        self.dataset.synthetic.validate().map_err(|e| Error::config("/dataset/synthetic", e.to_string()))?;
        let spec = self.surrogate_spec(self.input_shape(), self.num_classes());
        if self.dataset.pgm.is_none() {
            spec.validate().map_err(|e| Error::config("/surrogate", e.to_string()))?;
            self.target_spec(self.input_shape(), self.num_classes())
                .validate()
                .map_err(|e| Error::config("/attacker/architecture", e.to_string()))?;
            self.transforms
                .validate(self.input_shape().height, self.input_shape().width)
                .map_err(|e| Error::config("/transforms", e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json_str("{}", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_report_their_pointer() {
        let err = RunConfig::from_json_str(r#"{"generator": {"rho_x": 1}}"#, &[]).unwrap_err();
        match err {
            Error::Config { pointer, .. } => assert_eq!(pointer, "/generator/rho_x"),
            e => panic!("{e}"),
        }
        let err = RunConfig::from_json_str(r#"{"generator": {"steps": "many"}}"#, &[]).unwrap_err();
        assert!(matches!(err, Error::Config { ref pointer, .. } if pointer == "/generator/steps"), "{err}");
    }

    #[test]
    fn radius_ordering_is_gated() {
        let err = RunConfig::from_json_str(r#"{"generator": {"rho_a": 0.1, "rho_u": 0.05}}"#, &[]).unwrap_err();
        assert!(matches!(err, Error::Config { ref pointer, .. } if pointer == "/generator/rho_a"));
    }

    #[test]
    fn env_overrides_take_precedence() {
        let vars = vec![
            ("FORGE__GENERATOR__STEPS".to_string(), "7".to_string()),
            ("FORGE__GENERATOR__METHOD".to_string(), "rem".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let ov = env_overrides(vars);
        assert_eq!(ov.len(), 2);
        let cfg = RunConfig::from_json_str(r#"{"generator": {"steps": 3}}"#, &ov).unwrap();
        assert_eq!(cfg.generator.steps, 7);
        assert_eq!(cfg.generator.method, Method::Rem);
    }
}
