//! Baselines that need no generator training loop, and poisoned-set assembly.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::datastore::{DatasetSplit, PIXEL_MAX, PIXEL_MIN};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::models::ModelState;
use crate::noisegen::{GenConfig, Method, NoiseBank};
use crate::perturb::{pgd_from, LinfBall, PgdConfig};
use crate::scalar::Scalar;
use crate::seed::SeedTree;

/// Target class `(y + 1) mod K`.
pub fn tap_target(y: usize, num_classes: usize) -> usize {
    (y + 1) % num_classes
}

/// Targeted PGD against a model trained on clean data, starting from zero.
pub fn tap_noise<T: Scalar>(clean_model: &ModelState<T>, data: &DatasetSplit<T>, cfg: &GenConfig) -> Result<NoiseBank<T>> {
    let pgd_cfg = PgdConfig {
        radius: cfg.rho_u,
        step: cfg.tap_alpha,
        steps: cfg.tap_steps,
        mode: cfg.tap_direction.into(),
        random_start: false,
    };
    pgd_cfg.validate()?;
    let mut deltas = Tensor::zeros(data.images.shape());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(cfg.batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let target: Vec<usize> = y.iter().map(|&c| tap_target(c, data.num_classes)).collect();
        let d = pgd_from(&x, &target, clean_model, &pgd_cfg, Tensor::zeros(x.shape()))?;
        deltas.scatter_examples(chunk, &d)?;
    }
    Ok(NoiseBank { deltas, radius: cfg.rho_u, method: Method::Tap, seed: cfg.seed })
}

/// Class-wise patches: a `frame × frame` sign pattern per class and channel,
/// tiled over the image and scaled to the ball radius.
pub fn sc_noise<T: Scalar>(data: &DatasetSplit<T>, frame: usize, ball: LinfBall, seed: u64) -> Result<NoiseBank<T>> {
    if frame == 0 {
        return Err(Error::Domain("sc frame must be positive".into()));
    }
    let s = data.images.shape();
    let tree = SeedTree::new(seed).child("sc");
    let r = T::of(ball.radius);
    let patches: Vec<Vec<T>> = (0..data.num_classes)
        .map(|k| {
            let mut rng = tree.index(k as u64).rng();
            (0..s.c * frame * frame).map(|_| if rng.random::<bool>() { r } else { -r }).collect()
        })
        .collect();
    let mut deltas = Tensor::zeros(s);
    let per = s.per_example();
    for (i, &y) in data.labels.iter().enumerate() {
        let patch = &patches[y];
        let ex = &mut deltas.data_mut()[i * per..(i + 1) * per];
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    ex[(c * s.h + h) * s.w + w] = patch[(c * frame + h % frame) * frame + w % frame];
                }
            }
        }
    }
    Ok(NoiseBank { deltas, radius: ball.radius, method: Method::Sc, seed })
}

/// Adds noise to exactly `⌊fraction·N⌋` uniformly chosen examples and clamps
/// them to the pixel range.
pub fn poison_dataset<T: Scalar>(data: &DatasetSplit<T>, bank: &NoiseBank<T>, fraction: f64, seed: u64) -> Result<DatasetSplit<T>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Domain(format!("protect fraction {fraction} outside [0, 1]")));
    }
    if bank.deltas.shape() != data.images.shape() {
        return Err(Error::State(format!(
            "noise bank {} does not match dataset {}",
            bank.deltas.shape(),
            data.images.shape()
        )));
    }
    let n = data.len();
    let count = ((fraction * n as f64).floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedTree::new(seed).child("poison").rng());
    let mut out = data.clone();
    let (lo, hi) = (T::of(PIXEL_MIN), T::of(PIXEL_MAX));
    for &i in &order[..count] {
        let noise = bank.deltas.example(i);
        for (p, &d) in out.images.example_mut(i).iter_mut().zip(noise) {
            *p = (*p + d).max(lo).min(hi);
        }
        out.provenance.poisoned[i] = true;
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{synth_dataset, SynthSpec};
    use crate::models::{init_model, ModelSpec, InputShape};
    use crate::noisegen::TapDirection;

    fn data(n: usize) -> DatasetSplit<f32> {
        let spec = SynthSpec { height: 8, width: 8, train_count: n, test_count: 4, ..SynthSpec::default() };
        synth_dataset(&spec, 3).unwrap().0
    }

    #[test]
    fn tap_targets_cycle() {
        assert_eq!(tap_target(0, 2), 1);
        assert_eq!(tap_target(1, 2), 0);
        assert_eq!(tap_target(3, 4), 0);
    }

    #[test]
    fn tap_moves_toward_the_target() {
        let d = data(16);
        let spec = ModelSpec::mlp(InputShape { channels: 1, height: 8, width: 8 }, 4);
        let m = init_model::<f32>(&spec, 5).unwrap();
        let mut cfg = GenConfig::new(spec);
        cfg.tap_steps = 20;
        cfg.tap_alpha = cfg.rho_u / 10.0;
        cfg.tap_direction = TapDirection::Minimize;
        let bank = tap_noise(&m, &d, &cfg).unwrap();
        assert!(bank.within_ball());
        let target: Vec<usize> = d.labels.iter().map(|&y| tap_target(y, 4)).collect();
        let before = m.loss(&d.images, &target).unwrap();
        let after = m.loss(&d.images.add(&bank.deltas).unwrap(), &target).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn sc_is_classwise_tiled_and_saturated() {
        let d = data(12);
        let r = 8.0 / 255.0;
        let bank = sc_noise(&d, 3, LinfBall::new(r).unwrap(), 1).unwrap();
        let s = d.images.shape();
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d.labels[i] == d.labels[j] {
                    assert_eq!(bank.deltas.example(i), bank.deltas.example(j));
                }
            }
            for h in 0..s.h {
                for w in 0..s.w {
                    let v = bank.deltas.at(i, 0, h, w);
                    assert_eq!(v.abs(), r as f32);
                    assert_eq!(v, bank.deltas.at(i, 0, h % 3, w % 3));
                }
            }
        }
        assert_eq!(bank.method, Method::Sc);
    }

    #[test]
    fn poisoning_counts_and_clamps() {
        let d = data(100);
        let bank = sc_noise(&d, 4, LinfBall::new(0.1).unwrap(), 2).unwrap();
        assert_eq!(poison_dataset(&d, &bank, 0.0, 0).unwrap(), d);
        let half = poison_dataset(&d, &bank, 0.5, 0).unwrap();
        assert_eq!(half.poisoned_count(), 50);
        half.validate().unwrap();
        for i in 0..100 {
            if !half.provenance.poisoned[i] {
                assert_eq!(half.images.example(i), d.images.example(i));
            }
        }
        let all = poison_dataset(&d, &bank, 1.0, 0).unwrap();
        assert_eq!(all.poisoned_count(), 100);
        for (k, (&a, &b)) in all.images.data().iter().zip(d.images.data()).enumerate() {
            let want = (b + bank.deltas.data()[k]).clamp(-0.5, 0.5);
            assert_eq!(a, want);
        }
        assert!(matches!(poison_dataset(&d, &bank, 1.5, 0), Err(Error::Domain(_))));
        let small = data(8);
        assert!(matches!(poison_dataset(&small, &bank, 0.5, 0), Err(Error::State(_))));
    }
}
