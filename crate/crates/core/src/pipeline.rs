//! The synthetic desk-scale benchmark: pretrain on the source domain,
//! score source-only transfer, adapt, and score again.

use std::time::Instant;

use crate::data::{synthetic_pair, BenchmarkSpec, DomainPair};
use crate::error::{Error, Result};
use crate::model::{build_model, pretrain_source, Arch, DualBranchModel, Fusion, PretrainConfig};
use crate::rng::mix;
use crate::trainer::{evaluate, run_adaptation, AdaptConfig, AdaptReport};

#[derive(Clone, Debug, PartialEq)]
pub struct DeskConfig {
    pub bench: BenchmarkSpec,
    /// Channels, length, and classes must match `bench`.
    pub arch: Arch,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        let bench = BenchmarkSpec::default();
        let arch = Arch {
            widths: [16, 32, 32],
            proj_hidden: 32,
            proj_dim: 32,
            dropout: 0.1,
            ..Arch::new(bench.channels, bench.length, bench.classes)
        };
        Self {
            bench,
            arch,
            pretrain: PretrainConfig {
                epochs: 6,
                lr: 3e-3,
                ..PretrainConfig::default()
            },
            adapt: AdaptConfig {
                epochs: 4,
                lr: 1e-4,
                ema_alpha: 0.99,
                bank_capacity: Some(600),
                queue_capacity: 256,
                ..AdaptConfig::default()
            },
        }
    }
}

impl DeskConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.bench;
        let a = &self.arch;
        if (a.channels, a.length, a.classes) != (b.channels, b.length, b.classes) {
            return Err(Error::Config(format!(
                "arch ({}, {}, {}) does not match benchmark ({}, {}, {})",
                a.channels, a.length, a.classes, b.channels, b.length, b.classes
            )));
        }
        a.validate()
    }

    /// Same run with the frequency branch switched off during adaptation.
    pub fn time_only(&self) -> Self {
        let mut c = self.clone();
        c.adapt.use_freq = false;
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeskResult {
    pub seed: u64,
    /// Pretrained model on held-out source data.
    pub source_f1: f64,
    /// Pretrained model on held-out target data.
    pub source_only_f1: f64,
    /// Adapted teacher on held-out target data.
    pub adapted_f1: f64,
    pub report: AdaptReport,
    pub seconds: f64,
}

/// Generates the domain pair and pretrains a source model for `seed`.
pub fn prepare(cfg: &DeskConfig, seed: u64) -> Result<(DomainPair, DualBranchModel)> {
    cfg.validate()?;
    let pair = synthetic_pair(&cfg.bench, seed)?;
    let init = build_model(&cfg.arch, mix(&[seed, 10]))?;
    let pcfg = PretrainConfig {
        seed: mix(&[seed, 11]),
        ..cfg.pretrain.clone()
    };
    let (model, _) = pretrain_source(&init, &pair.source_train, &pcfg)?;
    Ok((pair, model))
}

/// Adapts an already pretrained `model` on `pair` and scores it.
pub fn adapt_and_score(cfg: &DeskConfig, pair: &DomainPair, model: &DualBranchModel, seed: u64) -> Result<DeskResult> {
    let start = Instant::now();
    let acfg = AdaptConfig {
        seed: mix(&[seed, 12]),
        ..cfg.adapt.clone()
    };
    let target = pair.target_train.without_labels();
    let (ts, report) = run_adaptation(model, &target, &acfg, None)?;
    let fusion = if acfg.use_freq { Fusion::Confidence } else { Fusion::TimeOnly };
    Ok(DeskResult {
        seed,
        source_f1: evaluate(model, &pair.source_test, Fusion::Confidence)?,
        source_only_f1: evaluate(model, &pair.target_test, Fusion::Confidence)?,
        adapted_f1: evaluate(&ts.teacher, &pair.target_test, fusion)?,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Full benchmark for one seed.
pub fn run_desk(cfg: &DeskConfig, seed: u64) -> Result<DeskResult> {
    let start = Instant::now();
    let (pair, model) = prepare(cfg, seed)?;
    let mut r = adapt_and_score(cfg, &pair, &model, seed)?;
    r.seconds = start.elapsed().as_secs_f64();
    Ok(r)
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn mismatched_arch_rejected() {
        let cfg = DeskConfig {
            arch: Arch::new(1, 128, 3),
            ..DeskConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(DeskConfig::default().validate().is_ok());
    }
}
