//! Confidence and view-uncertainty per sample, batch-mean thresholds, and
//! the reliable / non-reliable split.

use crate::augment::{jitter_scale, stream_id, AugPolicy};
use crate::diffcore::{BatchStats, Tensor};
use crate::error::{Error, Result};
use crate::model::{predict_mode, DualBranchModel, Fusion, Mode, Prediction};

/// `sqrt(mean((x - mean)^2))`.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

fn row_max(t: &Tensor, i: usize) -> f64 {
    t.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Confidence is the top fused probability of the clean input; uncertainty
/// is the population std of the top probability across the views.
pub fn confidence_stats(clean: &Tensor, views: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let b = clean.shape()[0];
    let conf = (0..b).map(|i| row_max(clean, i)).collect();
    let u = (0..b)
        .map(|i| {
            let c: Vec<f64> = views.iter().map(|v| row_max(v, i)).collect();
            population_std(&c)
        })
        .collect();
    (conf, u)
}

/// Teacher outputs on a batch and its weak views.
#[derive(Clone, Debug)]
pub struct ViewStats {
    pub clean: Prediction,
    /// Batch statistics of the clean pass (time, frequency).
    pub clean_stats: [Vec<BatchStats>; 2],
    pub views: Vec<Prediction>,
    pub confidences: Vec<f64>,
    pub uncertainties: Vec<f64>,
}

/// Runs `model` on the clean batch and on `views` weak augmentations of it.
/// Sample `ids[i]` at `epoch` uses stream `mix(seed, epoch, id, view)`.
#[allow(clippy::too_many_arguments)]
pub fn prediction_stats(
    model: &DualBranchModel,
    x: &Tensor,
    ids: &[usize],
    views: usize,
    policy: &AugPolicy,
    seed: u64,
    epoch: u64,
    mode: Mode,
    fusion: Fusion,
) -> Result<ViewStats> {
    if views < 2 {
        return Err(Error::InvalidArgument("need at least 2 augmented views".into()));
    }
    if x.rank() != 3 || x.shape()[0] != ids.len() {
        return Err(Error::shape("prediction_stats", format!("{:?} with {} ids", x.shape(), ids.len())));
    }
    let (clean, clean_stats) = predict_mode(model, x, fusion, mode)?;
    let ch = x.shape()[1];
    let per = x.shape()[1] * x.shape()[2];
    let mut outs = Vec::with_capacity(views);
    for l in 0..views {
        let mut data = Vec::with_capacity(x.numel());
        for (i, &id) in ids.iter().enumerate() {
            let sid = stream_id(seed, epoch, id as u64, l as u64);
            data.extend(jitter_scale(&x.data()[i * per..(i + 1) * per], ch, policy, sid));
        }
        let xv = Tensor::new(x.shape().to_vec(), data)?;
        outs.push(predict_mode(model, &xv, fusion, mode)?.0);
    }
    let fused: Vec<Tensor> = outs.iter().map(|p| p.fused.clone()).collect();
    let (confidences, uncertainties) = confidence_stats(&clean.fused, &fused);
    Ok(ViewStats {
        clean,
        clean_stats,
        views: outs,
        confidences,
        uncertainties,
    })
}

/// Batch means of confidence and uncertainty.
pub fn thresholds(confidences: &[f64], uncertainties: &[f64]) -> Result<(f64, f64)> {
    if confidences.is_empty() || uncertainties.is_empty() {
        return Err(Error::InvalidArgument("thresholds of an empty batch".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(confidences), mean(uncertainties)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityPartition {
    pub reliable: Vec<usize>,
    pub non_reliable: Vec<usize>,
    pub tau_c: f64,
    pub tau_u: f64,
    pub confidences: Vec<f64>,
    pub uncertainties: Vec<f64>,
    /// Flags before promotion.
    pub flags: Vec<bool>,
}

/// `r_i = conf_i >= tau_c && u_i <= tau_u`; then, for every class, the two
/// most confident non-reliable samples predicted as that class are moved to
/// the reliable group.
pub fn partition(
    confidences: &[f64],
    uncertainties: &[f64],
    tau_c: f64,
    tau_u: f64,
    predicted: &[usize],
) -> Result<ReliabilityPartition> {
    let b = confidences.len();
    if uncertainties.len() != b || predicted.len() != b {
        return Err(Error::shape(
            "partition",
            format!("{b} confidences, {} uncertainties, {} labels", uncertainties.len(), predicted.len()),
        ));
    }
    let flags: Vec<bool> = (0..b)
        .map(|i| confidences[i] >= tau_c && uncertainties[i] <= tau_u)
        .collect();
    let mut reliable = flags.clone();
    let classes = predicted.iter().copied().max().map_or(0, |m| m + 1);
    for c in 0..classes {
        let mut cand: Vec<usize> = (0..b).filter(|&i| !flags[i] && predicted[i] == c).collect();
        cand.sort_by(|&a, &z| confidences[z].total_cmp(&confidences[a]).then(a.cmp(&z)));
        for &i in cand.iter().take(2) {
            reliable[i] = true;
        }
    }
    Ok(ReliabilityPartition {
        reliable: (0..b).filter(|&i| reliable[i]).collect(),
        non_reliable: (0..b).filter(|&i| !reliable[i]).collect(),
        tau_c,
        tau_u,
        confidences: confidences.to_vec(),
        uncertainties: uncertainties.to_vec(),
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Arch};
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn std_examples() {
        assert!((population_std(&[0.8, 0.9, 1.0, 0.9]) - 0.005f64.sqrt()).abs() < 1e-12);
        assert_eq!(population_std(&[0.4; 4]), 0.0);
    }

    #[test]
    fn threshold_examples() {
        let (c, u) = thresholds(&[0.6, 0.8], &[0.0, 0.2]).unwrap();
        assert!((c - 0.7).abs() < 1e-15 && (u - 0.1).abs() < 1e-15);
        let (c, u) = thresholds(&[0.42], &[0.03]).unwrap();
        let p = partition(&[0.42], &[0.03], c, u, &[0]).unwrap();
        assert_eq!(p.flags, vec![true]);
        assert!(thresholds(&[], &[]).is_err());
    }

    #[test]
    fn flags_follow_both_tests() {
        let p = partition(&[0.9, 0.7], &[0.05, 0.05], 0.8, 0.1, &[0, 0]).unwrap();
        assert_eq!(p.flags, vec![true, false]);
    }

    #[test]
    fn promotion_takes_two_per_class() {
        let conf = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let p = partition(&conf, &[1.0; 6], 0.9, 0.0, &[0, 0, 0, 1, 1, 2]).unwrap();
        assert!(p.flags.iter().all(|f| !f));
        assert_eq!(p.reliable, vec![1, 2, 3, 4, 5]);
        assert_eq!(p.non_reliable, vec![0]);
    }

    #[test]
    fn stats_are_seeded() {
        let arch = Arch {
            widths: [2, 2, 2],
            proj_hidden: 2,
            proj_dim: 2,
            ..Arch::new(1, 16, 2)
        };
        let m = build_model(&arch, 0).unwrap();
        let mut r = stream(&[4]);
        let x = Tensor::new(vec![3, 1, 16], (0..48).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let run = || {
            prediction_stats(&m, &x, &[5, 6, 7], 4, &AugPolicy::weak(1), 2, 0, Mode::Eval, Fusion::Confidence)
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.confidences, b.confidences);
        assert_eq!(a.uncertainties, b.uncertainties);
        assert!(a.uncertainties.iter().all(|&u| u >= 0.0));
    }
}
