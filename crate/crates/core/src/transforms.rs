//! Random pad-crop-flip augmentation with exact gradient routing.
//!
//! A sampled [`TransformInstance`] is a pure index gather: every output pixel
//! either copies one input pixel or reads the zero padding. Its adjoint
//! scatters gradients back along the same map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformPolicy {
    pub pad: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub flip_prob: f64,
    pub enabled: bool,
}

impl Default for TransformPolicy {
    fn default() -> Self {
        TransformPolicy { pad: 2, crop_h: 16, crop_w: 16, flip_prob: 0.5, enabled: true }
    }
}

impl TransformPolicy {
    pub fn disabled() -> Self {
        TransformPolicy { enabled: false, ..Self::default() }
    }

    pub fn validate(&self, in_h: usize, in_w: usize) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Domain(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if self.crop_h == 0 || self.crop_w == 0 || self.crop_h > in_h + 2 * self.pad || self.crop_w > in_w + 2 * self.pad {
            return Err(Error::Domain(format!(
                "crop {}x{} does not fit padded {}x{}",
                self.crop_h,
                self.crop_w,
                in_h + 2 * self.pad,
                in_w + 2 * self.pad
            )));
        }
        Ok(())
    }
}

const ABSENT: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformInstance {
    pub flip: bool,
    pub crop_offset: (usize, usize),
    pad: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    /// Source pixel (row-major within a plane) per output pixel.
    index_map: Vec<u32>,
}

impl TransformInstance {
    pub fn new(in_hw: (usize, usize), pad: usize, out_hw: (usize, usize), crop_offset: (usize, usize), flip: bool) -> Result<Self> {
        let (ph, pw) = (in_hw.0 + 2 * pad, in_hw.1 + 2 * pad);
        if crop_offset.0 + out_hw.0 > ph || crop_offset.1 + out_hw.1 > pw {
            return Err(Error::dim("transform", format!("crop {out_hw:?} at {crop_offset:?} leaves padded {ph}x{pw}")));
        }
        let mut index_map = Vec::with_capacity(out_hw.0 * out_hw.1);
        for oy in 0..out_hw.0 {
            for ox in 0..out_hw.1 {
                let cx = if flip { out_hw.1 - 1 - ox } else { ox };
                let py = (oy + crop_offset.0) as isize - pad as isize;
                let px = (cx + crop_offset.1) as isize - pad as isize;
                let inside = py >= 0 && px >= 0 && (py as usize) < in_hw.0 && (px as usize) < in_hw.1;
                index_map.push(if inside { (py as usize * in_hw.1 + px as usize) as u32 } else { ABSENT });
            }
        }
        Ok(TransformInstance { flip, crop_offset, pad, in_hw, out_hw, index_map })
    }

    pub fn identity(h: usize, w: usize) -> Self {
        Self::new((h, w), 0, (h, w), (0, 0), false).expect("identity fits")
    }

    pub fn is_identity(&self) -> bool {
        self.in_hw == self.out_hw && self.index_map.iter().enumerate().all(|(i, &s)| s as usize == i)
    }

    /// Source index for each output pixel; `None` marks padding.
    pub fn source_of(&self, out_pixel: usize) -> Option<usize> {
        let s = self.index_map[out_pixel];
        (s != ABSENT).then_some(s as usize)
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        Shape::new(input.n, input.c, self.out_hw.0, self.out_hw.1)
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        if (s.h, s.w) != self.in_hw {
            return Err(Error::dim("transform", format!("batch {s} against input {}x{}", self.in_hw.0, self.in_hw.1)));
        }
        Ok(())
    }

    fn check_output(&self, s: Shape) -> Result<()> {
        if (s.h, s.w) != self.out_hw {
            return Err(Error::dim("transform", format!("gradient {s} against output {}x{}", self.out_hw.0, self.out_hw.1)));
        }
        Ok(())
    }

    fn gather_plane<T: Scalar>(&self, src: &[T], dst: &mut [T]) {
        for (d, &s) in dst.iter_mut().zip(&self.index_map) {
            *d = if s == ABSENT { T::zero() } else { src[s as usize] };
        }
    }

    fn scatter_plane<T: Scalar>(&self, grad: &[T], dst: &mut [T]) {
        for (&g, &s) in grad.iter().zip(&self.index_map) {
            if s != ABSENT {
                dst[s as usize] += g;
            }
        }
    }
}

pub fn sample_transform<R: Rng + ?Sized>(policy: &TransformPolicy, in_hw: (usize, usize), rng: &mut R) -> Result<TransformInstance> {
    if !policy.enabled {
        return Ok(TransformInstance::identity(in_hw.0, in_hw.1));
    }
    policy.validate(in_hw.0, in_hw.1)?;
    let flip = rng.random_bool(policy.flip_prob);
    let max_dy = in_hw.0 + 2 * policy.pad - policy.crop_h;
    let max_dx = in_hw.1 + 2 * policy.pad - policy.crop_w;
    let dy = rng.random_range(0..=max_dy);
    let dx = rng.random_range(0..=max_dx);
    TransformInstance::new(in_hw, policy.pad, (policy.crop_h, policy.crop_w), (dy, dx), flip)
}

/// Applies one instance to every example of the batch.
pub fn apply<T: Scalar>(instance: &TransformInstance, batch: &Tensor<T>) -> Result<Tensor<T>> {
    instance.check_input(batch.shape())?;
    let out_shape = instance.output_shape(batch.shape());
    let mut out = Tensor::zeros(out_shape);
    let (ip, op) = (instance.in_hw.0 * instance.in_hw.1, instance.out_hw.0 * instance.out_hw.1);
    for (src, dst) in batch.data().chunks_exact(ip).zip(out.data_mut().chunks_exact_mut(op)) {
        instance.gather_plane(src, dst);
    }
    Ok(out)
}

/// Adjoint of [`apply`].
pub fn backprop_through<T: Scalar>(instance: &TransformInstance, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    instance.check_output(grad_out.shape())?;
    let s = grad_out.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, instance.in_hw.0, instance.in_hw.1));
    let (ip, op) = (instance.in_hw.0 * instance.in_hw.1, instance.out_hw.0 * instance.out_hw.1);
    for (g, dst) in grad_out.data().chunks_exact(op).zip(out.data_mut().chunks_exact_mut(ip)) {
        instance.scatter_plane(g, dst);
    }
    Ok(out)
}

fn check_each(instances: &[TransformInstance], n: usize) -> Result<&TransformInstance> {
    if instances.len() != n || n == 0 {
        return Err(Error::dim("transform", format!("{} instances for {n} examples", instances.len())));
    }
    let first = &instances[0];
    if instances.iter().any(|t| t.in_hw != first.in_hw || t.out_hw != first.out_hw) {
        return Err(Error::dim("transform", "instances disagree on extents"));
    }
    Ok(first)
}

/// Applies `instances[i]` to example `i`.
pub fn apply_each<T: Scalar>(instances: &[TransformInstance], batch: &Tensor<T>) -> Result<Tensor<T>> {
    let first = check_each(instances, batch.shape().n)?;
    first.check_input(batch.shape())?;
    let s = batch.shape();
    let mut out = Tensor::zeros(first.output_shape(s));
    let (ip, op) = (first.in_hw.0 * first.in_hw.1, first.out_hw.0 * first.out_hw.1);
    for (n, t) in instances.iter().enumerate() {
        let src = batch.example(n);
        let dst = out.example_mut(n);
        for c in 0..s.c {
            t.gather_plane(&src[c * ip..(c + 1) * ip], &mut dst[c * op..(c + 1) * op]);
        }
    }
    Ok(out)
}

/// Adjoint of [`apply_each`].
pub fn backprop_each<T: Scalar>(instances: &[TransformInstance], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let first = check_each(instances, grad_out.shape().n)?;
    first.check_output(grad_out.shape())?;
    let s = grad_out.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, first.in_hw.0, first.in_hw.1));
    let (ip, op) = (first.in_hw.0 * first.in_hw.1, first.out_hw.0 * first.out_hw.1);
    for (n, t) in instances.iter().enumerate() {
        let g = grad_out.example(n);
        let dst = out.example_mut(n);
        for c in 0..s.c {
            t.scatter_plane(&g[c * op..(c + 1) * op], &mut dst[c * ip..(c + 1) * ip]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(n, c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn disabled_policy_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_transform(&TransformPolicy::disabled(), (16, 16), &mut rng).unwrap();
        assert!(!t.flip);
        assert_eq!(t.crop_offset, (0, 0));
        assert!(t.is_identity());
        let x = batch(2, 1, 16, 16, 1);
        assert_eq!(apply(&t, &x).unwrap(), x);
        assert_eq!(backprop_through(&t, &x).unwrap(), x);
    }

    #[test]
    fn flip_probability_one_always_flips() {
        let p = TransformPolicy { flip_prob: 1.0, ..TransformPolicy::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert!(sample_transform(&p, (16, 16), &mut rng).unwrap().flip);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let t = TransformInstance::new((6, 5), 0, (6, 5), (0, 0), true).unwrap();
        let x = batch(2, 3, 6, 5, 2);
        assert_eq!(apply(&t, &apply(&t, &x).unwrap()).unwrap(), x);
    }

    #[test]
    fn central_crop_recovers_input() {
        let t = TransformInstance::new((16, 16), 4, (16, 16), (4, 4), false).unwrap();
        let x = batch(1, 1, 16, 16, 4);
        assert_eq!(apply(&t, &x).unwrap(), x);
    }

    #[test]
    fn discarded_border_row_gets_no_gradient() {
        // offset (pad+1) shifts the window down by one row, dropping input row 0
        let t = TransformInstance::new((8, 8), 2, (8, 8), (3, 2), false).unwrap();
        let g = Tensor::<f64>::full(Shape::new(1, 1, 8, 8), 1.0);
        let back = backprop_through(&t, &g).unwrap();
        assert!(back.example(0)[..8].iter().all(|&v| v == 0.0));
        assert!(back.example(0)[8..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn out_of_range_offsets_are_rejected() {
        assert!(TransformInstance::new((8, 8), 2, (8, 8), (5, 0), false).is_err());
        let t = TransformInstance::identity(8, 8);
        assert!(apply(&t, &Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4))).is_err());
    }

    #[test]
    fn per_example_application_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = TransformPolicy::default();
        let ts: Vec<_> = (0..3).map(|_| sample_transform(&p, (16, 16), &mut rng).unwrap()).collect();
        let x = batch(3, 2, 16, 16, 5);
        let all = apply_each(&ts, &x).unwrap();
        for (i, t) in ts.iter().enumerate() {
            let single = apply(t, &x.select(&[i])).unwrap();
            assert_eq!(all.example(i), single.data());
        }
        let back = backprop_each(&ts, &all).unwrap();
        for (i, t) in ts.iter().enumerate() {
            let single = backprop_through(t, &all.select(&[i])).unwrap();
            assert_eq!(back.example(i), single.data());
        }
    }
}
