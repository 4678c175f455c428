//! Datasets, the synthetic benchmark, and the on-disk container format.

mod container;
mod pgm;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::SeedTree;

pub use container::{decode, encode, read_container, write_container, ContainerError, Payload, MAGIC};
pub use pgm::import_pgm_dir;

pub const PIXEL_MIN: f64 = -0.5;
pub const PIXEL_MAX: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
    /// One flag per example; true when defensive noise was added.
    pub poisoned: Vec<bool>,
}

/// Labelled images on the `[−0.5, 0.5]` pixel scale.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl<T: Scalar> DatasetSplit<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize, source: impl Into<String>, seed: u64) -> Result<Self> {
        let n = images.shape().n;
        let split = DatasetSplit {
            images,
            labels,
            num_classes,
            provenance: Provenance { source: source.into(), seed, poisoned: vec![false; n] },
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.shape().n;
        if n == 0 {
            return Err(Error::Domain("dataset split has no examples".into()));
        }
        if self.labels.len() != n || self.provenance.poisoned.len() != n {
            return Err(Error::dim(
                "dataset",
                format!("{n} images, {} labels, {} flags", self.labels.len(), self.provenance.poisoned.len()),
            ));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Domain(format!("label {y} outside [0, {})", self.num_classes)));
        }
        let (lo, hi) = (T::of(PIXEL_MIN), T::of(PIXEL_MAX));
        if self.images.data().iter().any(|&v| !(v >= lo && v <= hi)) {
            return Err(Error::Domain("pixel outside [-0.5, 0.5]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_shape(&self) -> Shape {
        self.images.shape().with_n(1)
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        (self.images.select(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Sub-split with the listed examples, flags carried along.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.batch(indices);
        DatasetSplit {
            images,
            labels,
            num_classes: self.num_classes,
            provenance: Provenance {
                source: self.provenance.source.clone(),
                seed: self.provenance.seed,
                poisoned: indices.iter().map(|&i| self.provenance.poisoned[i]).collect(),
            },
        }
    }

    pub fn poisoned_count(&self) -> usize {
        self.provenance.poisoned.iter().filter(|&&p| p).count()
    }

    pub fn cast<U: Scalar>(&self) -> DatasetSplit<U> {
        DatasetSplit {
            images: self.images.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        }
    }
}

const WAVES: usize = 4;
const FREQ_RANGE: std::ops::Range<f64> = 0.25..1.25;

/// Parameters of the synthetic benchmark.
///
/// Each class prototype is a smooth, horizontally symmetric envelope of
/// low-frequency cosine waves multiplied by a column-alternating ±1
/// carrier, scaled to standard deviation `contrast` per pixel. Odd
/// horizontal shifts and mirror flips negate the carrier, so under the
/// default crop/flip augmentation the class signal is only recoverable
/// nonlinearly. Examples add i.i.d. Gaussian pixel noise of standard
/// deviation `sigma` and are clamped to range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub prototype_seed: u64,
    pub contrast: f64,
    pub sigma: f64,
    pub train_count: usize,
    pub test_count: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            channels: 1,
            height: 16,
            width: 16,
            prototype_seed: 0,
            contrast: 0.07,
            sigma: 0.08,
            train_count: 2000,
            test_count: 500,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Domain("synthetic benchmark needs at least 2 classes".into()));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Domain("synthetic image extents must be positive".into()));
        }
        if !(self.sigma >= 0.0) || !(self.contrast > 0.0) {
            return Err(Error::Domain("sigma must be ≥ 0 and contrast > 0".into()));
        }
        if self.train_count < self.classes || self.test_count < self.classes {
            return Err(Error::Domain("each split needs at least one example per class".into()));
        }
        Ok(())
    }

    fn prototypes(&self) -> Vec<Vec<f64>> {
        let tree = SeedTree::new(self.prototype_seed).child("prototypes");
        let (c, h, w) = (self.channels, self.height, self.width);
        (0..self.classes)
            .map(|k| {
                let mut rng = tree.index(k as u64).rng();
                let mut wave = vec![0.0; c * h * w];
                for ch in 0..c {
                    for _ in 0..WAVES {
                        let fy: f64 = rng.random_range(FREQ_RANGE);
                        let fx: f64 = rng.random_range(FREQ_RANGE);
                        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                        let amp: f64 = rng.random_range(0.5..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                        for y in 0..h {
                            for x in 0..w {
                                let arg = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase;
                                wave[(ch * h + y) * w + x] += amp * arg.cos();
                            }
                        }
                    }
                }
                let envelope: Vec<f64> = (0..wave.len())
                    .map(|i| {
                        let (row, x) = (i / w, i % w);
                        0.5 * (wave[i] + wave[row * w + w - 1 - x])
                    })
                    .collect();
                let mean = envelope.iter().sum::<f64>() / envelope.len() as f64;
                let std = (envelope.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / envelope.len() as f64).sqrt();
                envelope
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let carrier = if (i % w) % 2 == 0 { 1.0 } else { -1.0 };
                        (v - mean) / std * self.contrast * carrier
                    })
                    .collect()
            })
            .collect()
    }
}

/// Builds balanced train and test splits (labels cycle through classes).
pub fn synth_dataset<T: Scalar>(spec: &SynthSpec, seed: u64) -> Result<(DatasetSplit<T>, DatasetSplit<T>)> {
    spec.validate()?;
    let protos = spec.prototypes();
    let tree = SeedTree::new(seed).child("synth");
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let make = |count: usize, label: &str| -> Result<DatasetSplit<T>> {
        let mut rng = tree.child(label).rng();
        let shape = Shape::new(count, spec.channels, spec.height, spec.width);
        let mut data = Vec::with_capacity(shape.numel());
        let labels: Vec<usize> = (0..count).map(|i| i % spec.classes).collect();
        for &y in &labels {
            for &p in &protos[y] {
                let v = if spec.sigma > 0.0 { p + noise.sample(&mut rng) } else { p };
                data.push(T::of(v.clamp(PIXEL_MIN, PIXEL_MAX)));
            }
        }
        DatasetSplit::new(Tensor::from_vec(shape, data)?, labels, spec.classes, format!("synthetic:{label}"), seed)
    };
    Ok((make(spec.train_count, "train")?, make(spec.test_count, "test")?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_gives_identical_class_members() {
        let spec = SynthSpec { sigma: 0.0, train_count: 12, test_count: 8, ..SynthSpec::default() };
        let (train, _) = synth_dataset::<f32>(&spec, 1).unwrap();
        assert_eq!(train.images.example(0), train.images.example(4));
        assert_ne!(train.images.example(0), train.images.example(1));
    }

    #[test]
    fn same_seed_same_splits() {
        let spec = SynthSpec { train_count: 40, test_count: 8, ..SynthSpec::default() };
        let a = synth_dataset::<f32>(&spec, 5).unwrap();
        let b = synth_dataset::<f32>(&spec, 5).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset::<f32>(&spec, 6).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn prototypes_are_pairwise_distinct() {
        let spec = SynthSpec::default();
        let p = spec.prototypes();
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let d: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d > 0.5, "prototypes {i} and {j} too close: {d}");
            }
        }
    }

    #[test]
    fn split_validation_rejects_bad_labels_and_pixels() {
        let img = Tensor::<f32>::zeros(Shape::new(2, 1, 2, 2));
        assert!(DatasetSplit::new(img.clone(), vec![0, 2], 2, "t", 0).is_err());
        let bright = Tensor::<f32>::full(Shape::new(1, 1, 2, 2), 0.6);
        assert!(DatasetSplit::new(bright, vec![0], 2, "t", 0).is_err());
        let empty = Tensor::<f32>::zeros(Shape::new(0, 1, 2, 2));
        assert!(DatasetSplit::new(empty, vec![], 2, "t", 0).is_err());
    }
}
