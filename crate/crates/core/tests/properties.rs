use proptest::prelude::*;

use sem_forge::datastore::{decode, encode, synth_dataset, Payload, SynthSpec};
use sem_forge::diff::{Shape, Tensor};
use sem_forge::noisegen::{poison_dataset, Method, NoiseBank};
use sem_forge::perturb::{project_linf, LinfBall};
use sem_forge::robustness::{correlate, CorrelationMetric};

fn tensor(values: Vec<f64>) -> Tensor<f64> {
    let n = values.len();
    Tensor::from_vec(Shape::new(1, 1, 1, n), values).unwrap()
}

proptest! {
    #[test]
    fn projection_lands_in_the_ball(values in prop::collection::vec(-1.0f64..1.0, 1..64), radius in 0.0f64..0.5) {
        let p = project_linf(&tensor(values.clone()), LinfBall::new(radius).unwrap());
        prop_assert!(p.data().iter().all(|v| v.abs() <= radius));
        for (a, b) in p.data().iter().zip(&values) {
            if b.abs() <= radius {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn projection_is_idempotent(values in prop::collection::vec(-1.0f64..1.0, 1..64), radius in 0.0f64..0.5) {
        let ball = LinfBall::new(radius).unwrap();
        let once = project_linf(&tensor(values), ball);
        prop_assert_eq!(project_linf(&once, ball), once);
    }

    #[test]
    fn poisoning_touches_exactly_the_floor_count(n in 4usize..40, fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let spec = SynthSpec { height: 4, width: 4, train_count: n, test_count: 4, ..SynthSpec::default() };
        let (train, _) = synth_dataset::<f32>(&spec, seed).unwrap();
        let bank = NoiseBank { deltas: Tensor::full(train.images.shape(), 0.01f32), radius: 0.01, method: Method::Sc, seed };
        let out = poison_dataset(&train, &bank, fraction, seed).unwrap();
        prop_assert_eq!(out.poisoned_count(), (fraction * n as f64).floor() as usize);
        for i in 0..n {
            let changed = out.images.example(i) != train.images.example(i);
            prop_assert!(!changed || out.provenance.poisoned[i]);
        }
    }

    #[test]
    fn noise_container_roundtrips(values in prop::collection::vec(-0.1f32..0.1, 1..128), seed in any::<u64>(), radius in 0.0f64..1.0) {
        let n = values.len();
        let deltas = Tensor::from_vec(Shape::new(n, 1, 1, 1), values).unwrap();
        let p = Payload::Noise(NoiseBank { deltas, radius, method: Method::Rem, seed });
        prop_assert_eq!(decode(&encode(&p)).unwrap(), p);
    }

    #[test]
    fn correlations_are_affine_invariant(
        xs in prop::collection::vec(-10.0f64..10.0, 5..30),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        prop_assume!(xs.iter().any(|&v| v != xs[0]));
        let ys: Vec<f64> = xs.iter().map(|v| (v * 1.3).sin() + v * 0.1).collect();
        prop_assume!(ys.iter().any(|&v| v != ys[0]));
        let moved: Vec<f64> = xs.iter().map(|v| v * scale + shift).collect();
        for metric in [CorrelationMetric::Pearson, CorrelationMetric::Spearman, CorrelationMetric::Kendall] {
            let a = correlate(&xs, &ys, metric).unwrap();
            let b = correlate(&moved, &ys, metric).unwrap();
            prop_assert!((a - b).abs() < 1e-9, "{:?}: {} vs {}", metric, a, b);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
        }
    }
}
