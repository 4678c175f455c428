//! The `generate`, `evaluate` and `analyze` commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cli::config::RunConfig;
use crate::datastore::{import_pgm_dir, read_container, synth_dataset, write_container, DatasetSplit, Payload};
use crate::diff::{backward_passes, fingerprint};
use crate::error::{Error, Result};
use crate::evaluate::{adv_train, holdout_validation, lowpass, EvalReport};
use crate::models::{InputShape, ModelSpec, ModelState};
use crate::noisegen::{
    poison_dataset, regenerate_noise, sc_noise, tap_noise, train_generator, EmVariant, GeneratorKind, Method, NoiseBank,
    RegenSource,
};
use crate::perturb::LinfBall;
use crate::robustness::{noise_robustness, surrogate_robustness, CorrelationReport, RobustnessSample};
use crate::seed::SeedTree;

pub const TRAIN_FILE: &str = "train.unl";
pub const TEST_FILE: &str = "test.unl";
pub const SURROGATE_FILE: &str = "surrogate.unl";
pub const NOISE_FILE: &str = "noise.unl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn poisoned_file(fraction: f64) -> String {
    format!("poisoned-{fraction}.unl")
}

fn checkpoint_file(step: usize) -> String {
    format!("ckpt-{step:08}.unl")
}

/// Seeds derived from the root for each purpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedSeeds {
    pub root: u64,
    pub dataset: u64,
    pub generator: u64,
    pub poison: u64,
}

impl DerivedSeeds {
    pub fn new(root: u64) -> Self {
        let t = SeedTree::new(root);
        DerivedSeeds {
            root,
            dataset: t.child("dataset").state(),
            generator: t.child("generator").state(),
            poison: t.child("poison").state(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub method: Method,
    pub seeds: DerivedSeeds,
    /// Backward passes spent on each generator minibatch.
    pub backward_per_batch: Vec<u64>,
    /// The closed-form count for SEM and REM.
    pub expected_backward_per_batch: Option<u64>,
    pub total_backward_passes: u64,
    pub noise_fingerprint: String,
    pub files: Vec<String>,
    pub wall_time_seconds: f64,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::State(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_dataset(path: &Path) -> Result<DatasetSplit<f32>> {
    match read_container(path)? {
        Payload::Dataset(d) => Ok(d),
        _ => Err(Error::State(format!("{} does not hold a dataset", path.display()))),
    }
}

fn read_model(path: &Path) -> Result<ModelState<f32>> {
    match read_container(path)? {
        Payload::Model(m) => Ok(m),
        _ => Err(Error::State(format!("{} does not hold a model", path.display()))),
    }
}

pub fn read_noise(path: &Path) -> Result<NoiseBank<f32>> {
    match read_container(path)? {
        Payload::Noise(n) => Ok(n),
        _ => Err(Error::State(format!("{} does not hold a noise bank", path.display()))),
    }
}

fn input_of(d: &DatasetSplit<f32>) -> InputShape {
    let s = d.example_shape();
    InputShape { channels: s.c, height: s.h, width: s.w }
}

fn load_data(cfg: &RunConfig, seeds: DerivedSeeds) -> Result<(DatasetSplit<f32>, DatasetSplit<f32>)> {
    match &cfg.dataset.pgm {
        Some(p) => Ok((import_pgm_dir(&p.train_dir, p.num_classes)?, import_pgm_dir(&p.test_dir, p.num_classes)?)),
        None => synth_dataset(&cfg.dataset.synthetic, seeds.dataset),
    }
}

fn regen_source(method: Method) -> RegenSource {
    match method {
        Method::Rem => RegenSource::Adversarial,
        Method::Em => RegenSource::None,
        _ => RegenSource::Random,
    }
}

fn generator_kind(method: Method) -> Option<GeneratorKind> {
    match method {
        Method::Sem => Some(GeneratorKind::Sem),
        Method::Rem => Some(GeneratorKind::Rem),
        Method::Em => Some(GeneratorKind::Em(EmVariant::Plain)),
        Method::Tap | Method::Sc => None,
    }
}

/// Trains the generator, crafts the noise bank, and writes clean splits,
/// surrogate, checkpoints, noise, poisoned splits and a manifest.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Manifest> {
    let start = Instant::now();
    let seeds = DerivedSeeds::new(cfg.seeds.root);
    let out = &cfg.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (train, test) = load_data(cfg, seeds)?;
    let spec = cfg.surrogate_spec(input_of(&train), train.num_classes);
    let gen = cfg.gen_config(spec.clone(), seeds.generator);
    gen.validate()?;
    let mut files = vec![TRAIN_FILE.to_string(), TEST_FILE.to_string()];
    write_container(out.join(TRAIN_FILE), &Payload::Dataset(train.clone()))?;
    write_container(out.join(TEST_FILE), &Payload::Dataset(test.clone()))?;

    let method = cfg.generator.method;
    let before = backward_passes();
    let mut per_batch = Vec::new();
    let bank = match generator_kind(method) {
        Some(kind) => {
            let run = train_generator(&train, &gen, kind)?;
            per_batch = run.backward_per_batch.clone();
            write_container(out.join(SURROGATE_FILE), &Payload::Model(run.surrogate.clone()))?;
            files.push(SURROGATE_FILE.into());
            if !run.checkpoints.is_empty() {
                let dir = out.join(CHECKPOINT_DIR);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (step, m) in &run.checkpoints {
                    let name = checkpoint_file(*step);
                    write_container(dir.join(&name), &Payload::Model(m.clone()))?;
                    files.push(format!("{CHECKPOINT_DIR}/{name}"));
                }
            }
            regenerate_noise(&run.surrogate, &train, &gen, regen_source(method))?
        }
        None if method == Method::Tap => {
            let mut tc = cfg.train_config(0.0, seeds.generator);
            tc.steps = cfg.generator.tap_clean_steps;
            let (clean, _) = adv_train(&train, None, &test, &spec, &tc)?;
            write_container(out.join(SURROGATE_FILE), &Payload::Model(clean.clone()))?;
            files.push(SURROGATE_FILE.into());
            tap_noise(&clean, &train, &gen)?
        }
        None => sc_noise(&train, gen.sc_frame, LinfBall::new(gen.rho_u)?, seeds.generator)?,
    };
    write_container(out.join(NOISE_FILE), &Payload::Noise(bank.clone()))?;
    files.push(NOISE_FILE.into());
    for &f in &cfg.protect_fraction {
        let poisoned = poison_dataset(&train, &bank, f, seeds.poison)?;
        write_container(out.join(poisoned_file(f)), &Payload::Dataset(poisoned))?;
        files.push(poisoned_file(f));
    }
    let expected = match method {
        Method::Sem => Some(gen.sem_backward_count()),
        Method::Rem => Some(gen.rem_backward_count()),
        _ => None,
    };
    let manifest = Manifest {
        config: cfg.clone(),
        method,
        seeds,
        backward_per_batch: per_batch,
        expected_backward_per_batch: expected,
        total_backward_passes: backward_passes() - before,
        noise_fingerprint: format!("{:016x}", fingerprint(&bank.deltas)),
        files,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// One row of the results ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub method: String,
    pub rho_u: f64,
    pub rho_a: f64,
    pub rho_r: f64,
    pub fraction: f64,
    pub filter: String,
    pub seed: u64,
    pub acc: f64,
    #[serde(rename = "F")]
    pub f: f64,
    pub backward_passes: u64,
    pub wall_time_seconds: f64,
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    fraction: f64,
    rho_a: f64,
    filter: crate::cli::config::FilterChoice,
    seed: u64,
}

/// Schedules `jobs` onto at most `workers` threads and returns results in
/// job order.
fn run_parallel<T: Send, F: Fn(usize) -> Result<T> + Sync>(count: usize, workers: usize, f: F) -> Vec<Result<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, count.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= count {
                    break;
                }
                let r = f(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every job ran")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub rows: Vec<LedgerRow>,
    pub reports: Vec<EvalReport>,
}

/// Runs adversarial training over the grid (fraction × ρ_a × filter ×
/// seed) on the poisoned splits written by [`cmd_generate`], appends one
/// ledger row per run, and writes the reports.
pub fn cmd_evaluate(cfg: &RunConfig, jobs: usize) -> Result<EvaluateSummary> {
    let out = &cfg.output;
    let test = read_dataset(&out.join(TEST_FILE))?;
    let clean = read_dataset(&out.join(TRAIN_FILE))?;
    let noise_meta = read_noise(&out.join(NOISE_FILE))?;
    let mut poisoned = Vec::new();
    for &f in &cfg.protect_fraction {
        poisoned.push((f, read_dataset(&out.join(poisoned_file(f)))?));
    }
    let spec = cfg.target_spec(input_of(&clean), clean.num_classes);
    let mut cells = Vec::new();
    for &fraction in &cfg.protect_fraction {
        for &rho_a in &cfg.attacker.rho_a {
            for &filter in &cfg.filter {
                for seed in cfg.eval_seeds() {
                    cells.push(Cell { fraction, rho_a, filter, seed });
                }
            }
        }
    }
    let results = run_parallel(cells.len(), jobs, |i| {
        let c = cells[i];
        let start = Instant::now();
        let data = &poisoned.iter().find(|p| p.0 == c.fraction).expect("loaded above").1;
        let data = match c.filter.kind() {
            Some(k) => lowpass(data, k, 3)?,
            None => data.clone(),
        };
        let tc = cfg.train_config(c.rho_a, c.seed);
        let (_, report) = match cfg.attacker.early_stop {
            Some(es) => {
                let clean_f = match c.filter.kind() {
                    Some(k) => lowpass(&clean, k, 3)?,
                    None => clean.clone(),
                };
                let (rest, val) = holdout_validation(&data, &clean_f, es.clean_ratio, es.validation_size, c.seed)?;
                adv_train(&rest, Some(&val), &test, &spec, &tc)?
            }
            None => adv_train(&data, None, &test, &spec, &tc)?,
        };
        let row = LedgerRow {
            method: noise_meta.method.as_str().into(),
            rho_u: cfg.generator.rho_u,
            rho_a: c.rho_a,
            rho_r: cfg.generator.rho_r.unwrap_or(cfg.generator.rho_a),
            fraction: c.fraction,
            filter: c.filter.as_str().into(),
            seed: c.seed,
            acc: report.test_accuracy,
            f: report.protection,
            backward_passes: report.backward_passes,
            wall_time_seconds: start.elapsed().as_secs_f64(),
        };
        Ok((row, report))
    });
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for r in results {
        let (row, report) = r?;
        rows.push(row);
        reports.push(report);
    }
    append_ledger(&out.join(LEDGER_FILE), &rows)?;
    let summary = EvaluateSummary { rows, reports };
    write_json(&out.join("evaluate.json"), &summary)?;
    Ok(summary)
}

fn append_ledger(path: &Path, rows: &[LedgerRow]) -> Result<()> {
    let exists = path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Checkpoint files under `dir`, ordered by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(step) = name.strip_prefix("ckpt-").and_then(|s| s.strip_suffix(".unl")).and_then(|s| s.parse().ok()) {
            out.push((step, e.path()));
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOutput {
    pub samples: Vec<RobustnessSample>,
    pub correlation: CorrelationReport,
}

/// Robustness and protection for one surrogate checkpoint: noise is
/// regenerated from it, `R_θ` measures the surrogate, `R_δ` the noise, and
/// `F` comes from adversarial training on the fully protected split.
pub fn analyze_checkpoint(
    cfg: &RunConfig,
    step: usize,
    theta: &ModelState<f32>,
    train: &DatasetSplit<f32>,
    test: &DatasetSplit<f32>,
    seeds: DerivedSeeds,
) -> Result<RobustnessSample> {
    let mut gen = cfg.gen_config(theta.spec.clone(), seeds.generator);
    let bank = regenerate_noise(theta, train, &gen, regen_source(cfg.generator.method))?;
    gen.steps = cfg.analyze.robustness_steps;
    let r_theta = surrogate_robustness(theta, train, &gen)?;
    let r_delta = noise_robustness(&bank, train, &gen)?;
    let poisoned = poison_dataset(train, &bank, 1.0, seeds.poison)?;
    let mut tc = cfg.train_config(cfg.analyze.rho_a.unwrap_or(cfg.generator.rho_a), seeds.root);
    tc.early_stop = None;
    if let Some(s) = cfg.analyze.train_steps {
        tc.steps = s;
    }
    let spec: ModelSpec = cfg.target_spec(input_of(train), train.num_classes);
    let (_, report) = adv_train(&poisoned, None, test, &spec, &tc)?;
    Ok(RobustnessSample { step, r_theta, r_delta, f: report.protection })
}

/// Computes `(R_θ, R_δ, F)` for every saved checkpoint and their
/// correlations; writes `robustness.csv` and `correlation.json`.
pub fn cmd_analyze(cfg: &RunConfig, jobs: usize) -> Result<AnalyzeOutput> {
    let out = &cfg.output;
    let seeds = DerivedSeeds::new(cfg.seeds.root);
    let ckpts = list_checkpoints(&out.join(CHECKPOINT_DIR))?;
    if ckpts.len() < 3 {
        return Err(Error::Domain(format!("analysis needs at least 3 checkpoints, found {}", ckpts.len())));
    }
    let train = read_dataset(&out.join(TRAIN_FILE))?;
    let test = read_dataset(&out.join(TEST_FILE))?;
    let results = run_parallel(ckpts.len(), jobs, |i| {
        let (step, path) = &ckpts[i];
        let theta = read_model(path)?;
        analyze_checkpoint(cfg, *step, &theta, &train, &test, seeds)
    });
    let samples = results.into_iter().collect::<Result<Vec<_>>>()?;
    let path = out.join("robustness.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
    w.write_record(["step", "R_theta", "R_delta", "F"])
        .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
    for s in &samples {
        w.write_record([s.step.to_string(), s.r_theta.to_string(), s.r_delta.to_string(), s.f.to_string()])
            .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let correlation = CorrelationReport::from_samples(&samples)?;
    write_json(&out.join("correlation.json"), &correlation)?;
    Ok(AnalyzeOutput { samples, correlation })
}
