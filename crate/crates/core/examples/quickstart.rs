//! Smallest end-to-end run: generate a shifted pair, pretrain on the
//! source, adapt on unlabeled target samples, compare target macro-F1.

use tfda::data::{synthetic_pair, BenchmarkSpec};
use tfda::model::{build_model, pretrain_source, Arch, Fusion, PretrainConfig};
use tfda::trainer::{evaluate, run_adaptation, AdaptConfig};

fn main() -> tfda::Result<()> {
    let spec = BenchmarkSpec {
        train_per_class: 40,
        test_per_class: 20,
        ..BenchmarkSpec::default()
    };
    let pair = synthetic_pair(&spec, 7)?;
    let arch = Arch {
        widths: [8, 16, 16],
        proj_hidden: 16,
        proj_dim: 16,
        dropout: 0.1,
        ..Arch::new(spec.channels, spec.length, spec.classes)
    };
    let pretrain = PretrainConfig {
        epochs: 8,
        lr: 3e-3,
        ..PretrainConfig::default()
    };
    let (model, _) = pretrain_source(&build_model(&arch, 1)?, &pair.source_train, &pretrain)?;
    println!("source test     {:.4}", evaluate(&model, &pair.source_test, Fusion::Confidence)?);
    println!("target, before  {:.4}", evaluate(&model, &pair.target_test, Fusion::Confidence)?);

    let cfg = AdaptConfig {
        epochs: 3,
        lr: 1e-4,
        ema_alpha: 0.99,
        queue_capacity: 64,
        ..AdaptConfig::default()
    };
    let target = pair.target_train.without_labels();
    let (ts, report) = run_adaptation(&model, &target, &cfg, Some(&pair.target_test))?;
    for e in &report.epochs {
        println!("epoch {} loss {:.4} target F1 {:.4}", e.epoch, e.losses.all, e.macro_f1);
    }
    println!("target, after   {:.4}", evaluate(&ts.teacher, &pair.target_test, Fusion::Confidence)?);
    Ok(())
}
