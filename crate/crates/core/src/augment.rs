//! Time-domain augmentation policies.
//!
//! Weak views use jitter-and-scale, strong views use
//! permutation-and-jitter. Both are pure functions of the policy seed and a
//! per-draw stream id.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{mix, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugKind {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugPolicy {
    pub kind: AugKind,
    /// Noise standard deviation as a fraction of each channel's own std.
    pub jitter_sigma: f64,
    pub scale_low: f64,
    pub scale_high: f64,
    /// Upper bound on the number of shuffled segments (strong only).
    pub max_segments: usize,
    pub seed: u64,
}

impl AugPolicy {
    pub fn weak(seed: u64) -> Self {
        Self {
            kind: AugKind::Weak,
            jitter_sigma: 0.05,
            scale_low: 0.9,
            scale_high: 1.1,
            max_segments: 1,
            seed,
        }
    }

    pub fn strong(seed: u64) -> Self {
        Self {
            kind: AugKind::Strong,
            jitter_sigma: 0.1,
            scale_low: 1.0,
            scale_high: 1.0,
            max_segments: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::InvalidArgument("jitter_sigma must be >= 0".into()));
        }
        if !(self.scale_low > 0.0 && self.scale_low <= self.scale_high) {
            return Err(Error::InvalidArgument(format!(
                "scale range [{}, {}] must satisfy 0 < low <= high",
                self.scale_low, self.scale_high
            )));
        }
        if self.max_segments == 0 {
            return Err(Error::InvalidArgument("max_segments must be >= 1".into()));
        }
        Ok(())
    }
}

/// Stream id for sample `index` at `epoch`, view `view`.
pub fn stream_id(global_seed: u64, epoch: u64, index: u64, view: u64) -> u64 {
    mix(&[global_seed, epoch, index, view])
}

fn channel_std(ch: &[f64]) -> f64 {
    let n = ch.len() as f64;
    let m = ch.iter().sum::<f64>() / n;
    (ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

fn add_jitter(out: &mut [f64], original: &[f64], len: usize, sigma: f64, rng: &mut impl Rng) {
    if sigma == 0.0 {
        return;
    }
    for (o, x) in out.chunks_mut(len).zip(original.chunks(len)) {
        let sd = sigma * channel_std(x);
        if sd > 0.0 {
            let normal = Normal::new(0.0, sd).expect("positive std");
            for v in o.iter_mut() {
                *v += normal.sample(rng);
            }
        }
    }
}

/// `x' = s * x + noise` with one scale per sample and per-element Gaussian
/// noise scaled to each channel's std.
pub fn jitter_scale(x: &[f64], channels: usize, policy: &AugPolicy, stream_id: u64) -> Vec<f64> {
    debug_assert_eq!(policy.kind, AugKind::Weak);
    let len = x.len() / channels.max(1);
    let mut rng = stream(&[policy.seed, stream_id, 1]);
    let s = if policy.scale_low == policy.scale_high {
        policy.scale_low
    } else {
        rng.random_range(policy.scale_low..policy.scale_high)
    };
    let mut out: Vec<f64> = x.iter().map(|v| v * s).collect();
    add_jitter(&mut out, x, len, policy.jitter_sigma, &mut rng);
    out
}

/// Splits the time axis into `m ~ U{1..max_segments}` contiguous segments,
/// shuffles them (the same order for every channel), then adds jitter.
pub fn permute_jitter(x: &[f64], channels: usize, policy: &AugPolicy, stream_id: u64) -> Vec<f64> {
    debug_assert_eq!(policy.kind, AugKind::Strong);
    let len = x.len() / channels.max(1);
    let mut rng = stream(&[policy.seed, stream_id, 2]);
    let max_seg = policy.max_segments.clamp(1, len.max(1));
    let m = rng.random_range(1..=max_seg);
    let mut out = x.to_vec();
    if m > 1 {
        let mut cuts: Vec<usize> = index::sample(&mut rng, len - 1, m - 1)
            .into_iter()
            .map(|c| c + 1)
            .collect();
        cuts.sort_unstable();
        let mut bounds = vec![0];
        bounds.extend(cuts);
        bounds.push(len);
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        for (o, src) in out.chunks_mut(len).zip(x.chunks(len)) {
            let mut pos = 0;
            for &seg in &order {
                let piece = &src[bounds[seg]..bounds[seg + 1]];
                o[pos..pos + piece.len()].copy_from_slice(piece);
                pos += piece.len();
            }
        }
    }
    add_jitter(&mut out, x, len, policy.jitter_sigma, &mut rng);
    out
}

/// Applies the policy's own transform.
pub fn apply(x: &[f64], channels: usize, policy: &AugPolicy, stream_id: u64) -> Vec<f64> {
    match policy.kind {
        AugKind::Weak => jitter_scale(x, channels, policy, stream_id),
        AugKind::Strong => permute_jitter(x, channels, policy, stream_id),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64) -> Vec<f64> {
        let mut r = stream(&[seed]);
        (0..2 * 64).map(|_| r.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn zero_weak_policy_is_identity() {
        let x = sample(1);
        let p = AugPolicy {
            jitter_sigma: 0.0,
            scale_low: 1.0,
            scale_high: 1.0,
            ..AugPolicy::weak(3)
        };
        assert_eq!(jitter_scale(&x, 2, &p, 9), x);
    }

    #[test]
    fn weak_is_deterministic_per_stream() {
        let x = sample(2);
        let p = AugPolicy::weak(5);
        assert_eq!(jitter_scale(&x, 2, &p, 1), jitter_scale(&x, 2, &p, 1));
        assert_ne!(jitter_scale(&x, 2, &p, 1), jitter_scale(&x, 2, &p, 2));
    }

    #[test]
    fn scale_draws_average_to_midpoint() {
        let p = AugPolicy {
            jitter_sigma: 0.0,
            scale_low: 0.5,
            scale_high: 1.5,
            ..AugPolicy::weak(8)
        };
        let mean = (0..10_000u64)
            .map(|i| jitter_scale(&[1.0], 1, &p, i)[0])
            .sum::<f64>()
            / 10_000.0;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn one_segment_without_jitter_is_identity() {
        let x = sample(3);
        let p = AugPolicy {
            max_segments: 1,
            jitter_sigma: 0.0,
            ..AugPolicy::strong(1)
        };
        assert_eq!(permute_jitter(&x, 2, &p, 4), x);
    }

    #[test]
    fn permutation_preserves_each_channel_multiset() {
        let x = sample(4);
        let p = AugPolicy {
            jitter_sigma: 0.0,
            max_segments: 8,
            ..AugPolicy::strong(2)
        };
        let mut moved = false;
        for sid in 0..20 {
            let y = permute_jitter(&x, 2, &p, sid);
            moved |= y != x;
            for (a, b) in x.chunks(64).zip(y.chunks(64)) {
                let mut a = a.to_vec();
                let mut b = b.to_vec();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                assert_eq!(a, b);
            }
        }
        assert!(moved);
    }

    #[test]
    fn strong_is_deterministic_per_stream() {
        let x = sample(5);
        let p = AugPolicy::strong(7);
        assert_eq!(permute_jitter(&x, 2, &p, 3), permute_jitter(&x, 2, &p, 3));
    }

    #[test]
    fn validation() {
        assert!(AugPolicy::weak(0).validate().is_ok());
        let bad = AugPolicy {
            scale_low: 2.0,
            scale_high: 1.0,
            ..AugPolicy::weak(0)
        };
        assert!(bad.validate().is_err());
    }
}
