use proptest::collection::vec;
use proptest::prelude::*;

use tfda::augment::{apply, jitter_scale, permute_jitter, stream_id, AugPolicy};
use tfda::curriculum::CurriculumState;
use tfda::data::{generate_synthetic, load_dataset, save_dataset, ShiftSpec};
use tfda::diffcore::{softmax, ParamSet, Tensor};
use tfda::losses::{consistency_kl, info_nce_masked, total_loss, tsallis_uncertainty, Coefficients, KL_EPS};
use tfda::model::{argmax, ema_update, fuse_predictions};
use tfda::pseudo::{exclusion_set, MemoryBank, TemporalQueue};
use tfda::select::partition;
use tfda::spectral::{freq_augment, rfft, FreqAugMode, Spectrum};

fn prob_vec(c: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(0.01f64..1.0, c).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(-1.0f64..1.0, d).prop_filter_map("nonzero", |v| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (n > 1e-3).then(|| v.into_iter().map(|x| x / n).collect())
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in vec(-30.0f64..30.0, 35)) {
        let t = Tensor::new(vec![rows, cols], seed[..rows * cols].to_vec()).unwrap();
        let s = softmax(&t);
        for i in 0..rows {
            let r = s.row(i);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rfft_edge_bins_are_real(x in vec(-5.0f64..5.0, 2..200)) {
        let s = rfft(&x);
        prop_assert!(s[0].im.abs() <= 1e-9);
        if x.len() % 2 == 0 {
            prop_assert!(s[x.len() / 2].im.abs() <= 1e-9);
        }
    }

    #[test]
    fn freq_augment_is_nonnegative(x in vec(-5.0f64..5.0, 16..64), count in 0usize..10, amp in 0.0f64..2.0, seed: u64) {
        let s = Spectrum::of_sample(&x, 1).unwrap();
        for mode in [FreqAugMode::Remove, FreqAugMode::Add] {
            let removed = freq_augment(&s, FreqAugMode::Remove, count, amp, seed);
            let out = freq_augment(&removed, mode, count, amp, seed ^ 1);
            prop_assert!(out.magnitudes().iter().all(|&m| m >= 0.0));
        }
    }

    #[test]
    fn augmentation_identities(x in vec(-3.0f64..3.0, 24), sid: u64) {
        let weak = AugPolicy { jitter_sigma: 0.0, scale_low: 1.0, scale_high: 1.0, ..AugPolicy::weak(0) };
        prop_assert_eq!(jitter_scale(&x, 2, &weak, sid), x.clone());
        let strong = AugPolicy { jitter_sigma: 0.0, max_segments: 1, ..AugPolicy::strong(0) };
        prop_assert_eq!(permute_jitter(&x, 2, &strong, sid), x);
    }

    #[test]
    fn augmentation_is_order_independent(xs in vec(vec(-3.0f64..3.0, 16), 1..6), seed: u64, epoch in 0u64..50) {
        let p = AugPolicy::strong(0);
        let forward: Vec<Vec<f64>> = xs.iter().enumerate()
            .map(|(i, x)| apply(x, 2, &p, stream_id(seed, epoch, i as u64, 0))).collect();
        let mut backward: Vec<Vec<f64>> = xs.iter().enumerate().rev()
            .map(|(i, x)| apply(x, 2, &p, stream_id(seed, epoch, i as u64, 0))).collect();
        backward.reverse();
        prop_assert_eq!(forward, backward);
    }

    #[test]
    fn fusion_keeps_shared_argmax_and_bounds(p in prob_vec(4), q in prob_vec(4)) {
        let f = fuse_predictions(&p, &q);
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for c in 0..4 {
            prop_assert!(f[c] >= p[c].min(q[c]) - 1e-15 && f[c] <= p[c].max(q[c]) + 1e-15);
        }
        if argmax(&p) == argmax(&q) {
            prop_assert_eq!(argmax(&f), argmax(&p));
        }
    }

    #[test]
    fn ema_is_linear(t in vec(-2.0f64..2.0, 6), s in vec(-2.0f64..2.0, 6), alpha in 0.0f64..1.0) {
        let ps = |v: &[f64]| {
            let mut p = ParamSet::new();
            p.insert("w", Tensor::new(vec![2, 3], v.to_vec()).unwrap()).unwrap();
            p
        };
        let twice = |v: &[f64]| v.iter().map(|x| 2.0 * x).collect::<Vec<_>>();
        let one = ema_update(&ps(&t), &ps(&s), alpha).unwrap();
        let two = ema_update(&ps(&twice(&t)), &ps(&twice(&s)), alpha).unwrap();
        for (a, b) in one.get("w").unwrap().data().iter().zip(two.get("w").unwrap().data()) {
            prop_assert!((2.0 * a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn knn_matches_brute_force_and_is_permutation_covariant(
        feats in vec(unit_vec(3), 4..12),
        query in unit_vec(3),
        k in 1usize..4,
        rot in 0usize..12,
    ) {
        let n = feats.len();
        let probs = vec![vec![0.5, 0.5]; n];
        let mk = |order: &[usize]| {
            let mut b = MemoryBank::new(n, 3, 2).unwrap();
            let f = Tensor::from_rows(&order.iter().map(|&i| feats[i].clone()).collect::<Vec<_>>()).unwrap();
            let p = Tensor::from_rows(&order.iter().map(|&i| probs[i].clone()).collect::<Vec<_>>()).unwrap();
            b.update(&f, &p).unwrap();
            b
        };
        let ident: Vec<usize> = (0..n).collect();
        let got = mk(&ident).knn(&query, k).unwrap();
        let mut brute: Vec<(f64, usize)> = feats.iter().enumerate().map(|(j, f)| (dot(&query, f), j)).collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let sims: Vec<f64> = brute.iter().take(k).map(|x| x.0).collect();
        let got_sims: Vec<f64> = got.iter().map(|&j| dot(&query, &feats[j])).collect();
        for (a, b) in sims.iter().zip(&got_sims) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        // A rotated bank returns the same samples in rotated slots, barring ties.
        let distinct = brute.windows(2).all(|w| (w[0].0 - w[1].0).abs() > 1e-9);
        if distinct {
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let rotated = mk(&perm).knn(&query, k).unwrap();
            let mapped: Vec<usize> = rotated.iter().map(|&slot| perm[slot]).collect();
            prop_assert_eq!(mapped, got);
        }
    }

    #[test]
    fn refined_label_in_convex_hull(
        probs in vec(prob_vec(3), 3..10),
        feats in vec(unit_vec(2), 10),
        query in unit_vec(2),
        k in 1usize..4,
    ) {
        let n = probs.len();
        let mut b = MemoryBank::new(n, 2, 3).unwrap();
        b.update(&Tensor::from_rows(&feats[..n]).unwrap(), &Tensor::from_rows(&probs).unwrap()).unwrap();
        let r = b.refine(&query, k).unwrap();
        for c in 0..3 {
            let lo = r.neighbors.iter().map(|&j| b.probs(j)[c]).fold(f64::INFINITY, f64::min);
            let hi = r.neighbors.iter().map(|&j| b.probs(j)[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.probs[c] >= lo - 1e-12 && r.probs[c] <= hi + 1e-12);
        }
        prop_assert!((r.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn exclusion_shrinks_with_longer_history(
        hist in vec(vec((0u64..10, 0usize..3), 0..8), 1..10),
        query in vec((0u64..10, 0usize..3), 1..8),
        now in 5u64..10,
        t1 in 1u64..5,
        extra in 0u64..5,
    ) {
        let t2 = t1 + extra;
        let window = |h: &[(u64, usize)], t: u64| -> Vec<(u64, usize)> {
            h.iter().copied().filter(|&(e, _)| e <= now && e + t > now).collect()
        };
        let run = |t: u64| {
            let hs: Vec<Vec<(u64, usize)>> = hist.iter().map(|h| window(h, t)).collect();
            exclusion_set(hs.iter().map(Vec::as_slice), &window(&query, t))
        };
        let short = run(t1);
        for j in run(t2) {
            prop_assert!(short.contains(&j));
        }
    }

    #[test]
    fn stores_keep_their_shape(ids in vec(0usize..20, 1..30), epochs in 1u64..6) {
        let mut q = TemporalQueue::new(8, 3, 2).unwrap();
        let mut b = MemoryBank::new(5, 2, 3).unwrap();
        for e in 1..=epochs {
            let keys = Tensor::new(vec![ids.len(), 2], (0..2 * ids.len()).map(|i| 1.0 + i as f64).collect()).unwrap();
            let labels: Vec<usize> = ids.iter().map(|i| (i + e as usize) % 3).collect();
            q.record(&ids, &keys, &labels, e).unwrap();
            let probs = Tensor::new(vec![ids.len(), 3], vec![1.0 / 3.0; 3 * ids.len()]).unwrap();
            b.update(&keys, &probs).unwrap();
            prop_assert!(q.len() <= q.capacity() && q.capacity() == 8 && q.history_len() == 3);
            prop_assert!(q.entries().all(|en| en.history.len() <= 3 && en.key.len() == 2));
            prop_assert!(b.len() <= 5 && b.capacity() == 5 && b.dim() == 2 && b.classes() == 3);
            prop_assert_eq!(q.keys_transposed().shape().to_vec(), vec![2, q.len()]);
        }
    }

    #[test]
    fn partition_invariants(
        conf in vec(0.0f64..1.0, 1..20),
        seed_u in vec(0.0f64..0.3, 20),
        seed_y in vec(0usize..4, 20),
        shift in -0.5f64..0.5,
    ) {
        let n = conf.len();
        let u = &seed_u[..n];
        let y = &seed_y[..n];
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let p = partition(&conf, u, mean(&conf), mean(u), y).unwrap();
        let mut all: Vec<usize> = p.reliable.iter().chain(&p.non_reliable).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let flagged = p.flags.iter().filter(|&&f| f).count();
        prop_assert!(p.reliable.len() >= flagged);
        prop_assert!(p.reliable.len() - flagged <= 2 * 4);
        for (i, &f) in p.flags.iter().enumerate() {
            if f {
                prop_assert!(p.reliable.contains(&i));
            }
        }
        let shifted: Vec<f64> = conf.iter().map(|c| c + shift).collect();
        let q = partition(&shifted, u, mean(&shifted), mean(u), y).unwrap();
        // Adding a constant moves the mean by the same amount; exact ties
        // can flip through rounding, so compare away from the threshold.
        for i in 0..n {
            if (conf[i] - mean(&conf)).abs() > 1e-9 {
                prop_assert_eq!(p.flags[i], q.flags[i]);
            }
        }
    }

    #[test]
    fn info_nce_monotone(q in unit_vec(3), pos in unit_vec(3), negs in vec(unit_vec(3), 1..5), tau in 0.05f64..2.0) {
        let n = negs.len();
        let inc: Vec<usize> = (0..n).collect();
        let base = info_nce_masked(&q, &pos, &negs, &inc, tau).unwrap();
        let toward: Vec<f64> = pos.iter().zip(&q).map(|(p, x)| p + 0.1 * (x - p)).collect();
        let closer = info_nce_masked(&q, &toward, &negs, &inc, tau).unwrap();
        if dot(&q, &toward) > dot(&q, &pos) + 1e-9 {
            prop_assert!(closer < base);
        }
        let mut negs2 = negs.clone();
        negs2[0] = negs[0].iter().zip(&q).map(|(p, x)| p + 0.1 * (x - p)).collect();
        if dot(&q, &negs2[0]) > dot(&q, &negs[0]) + 1e-9 {
            prop_assert!(info_nce_masked(&q, &pos, &negs2, &inc, tau).unwrap() > base);
        }
    }

    #[test]
    fn tsallis_single_sample_constant(p in prob_vec(5)) {
        let t = Tensor::new(vec![1, 5], p).unwrap();
        prop_assert!((tsallis_uncertainty(&t, 2.0).unwrap() + 0.2).abs() <= 1e-9);
    }

    #[test]
    fn kl_nonnegative_and_zero_on_equal(p in prob_vec(4), q in prob_vec(4)) {
        let a = Tensor::new(vec![1, 4], p.clone()).unwrap();
        let b = Tensor::new(vec![1, 4], q).unwrap();
        prop_assert!(consistency_kl(&a, &b, KL_EPS).unwrap() >= 0.0);
        prop_assert!(consistency_kl(&a, &a, KL_EPS).unwrap().abs() <= 1e-15);
    }

    #[test]
    fn total_loss_linear(c in vec(-3.0f64..3.0, 5), d in vec(-3.0f64..3.0, 5), mu in vec(0.0f64..1.0, 4), s in -2.0f64..2.0) {
        let m = Coefficients { mu_r: mu[0], mu_c: mu[1], mu_cons: mu[2], mu_u: mu[3] };
        let f = |v: &[f64]| total_loss(v[0], v[1], v[2], v[3], v[4], &m);
        let mix: Vec<f64> = c.iter().zip(&d).map(|(a, b)| a + s * b).collect();
        prop_assert!((f(&mix) - (f(&c) + s * f(&d))).abs() <= 1e-9);
    }

    #[test]
    fn curriculum_positive_and_nonincreasing(taus in vec((0.01f64..1.0, 0.0f64..1.0), 1..60)) {
        let mut s = CurriculumState::default();
        for (tc, tu) in taus {
            let next = s.step_mu_r(tc, tu).unwrap().decay_aux();
            let (a, b) = (s.coefficients(), next.coefficients());
            prop_assert!(b.mu_r > 0.0 && b.mu_c > 0.0 && b.mu_cons > 0.0 && b.mu_u > 0.0);
            prop_assert!(b.mu_r <= a.mu_r && b.mu_c <= a.mu_c && b.mu_cons <= a.mu_cons && b.mu_u <= a.mu_u);
            s = next;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn datasets_balanced_and_round_trip(classes in 2usize..4, per in 1usize..6, seed: u64) {
        let ds = generate_synthetic(classes, 2, 128, per, &ShiftSpec::default(), seed).unwrap();
        let labels = ds.labels().unwrap();
        for c in 0..classes {
            let n = labels.iter().filter(|&&y| y == c).count();
            prop_assert!(n.abs_diff(per) <= 1);
        }
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        prop_assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }
}
