//! Drives the command-line entry point in-process: synth, pretrain,
//! adapt, eval.

use tfda::cli::run_cli;

fn main() {
    let dir = std::env::temp_dir().join(format!("tfda-cli-{}", std::process::id()));
    let d = |p: &str| dir.join(p).to_string_lossy().into_owned();
    let cfg = d("small.cfg");
    std::fs::create_dir_all(&dir).expect("temp dir");
    std::fs::write(&cfg, "train_per_class=30\ntest_per_class=15\nepochs=2\npretrain_epochs=4\nwidths=8,16,16\n")
        .expect("config");
    let steps: [Vec<String>; 4] = [
        vec!["synth".into(), "--out".into(), d("data")],
        vec!["pretrain".into(), "--data".into(), d("data/source_train"), "--out".into(), d("m.bin")],
        vec![
            "adapt".into(),
            "--model".into(),
            d("m.bin"),
            "--target".into(),
            d("data/target_train"),
            "--out".into(),
            d("a.bin"),
            "--report".into(),
            d("report.csv"),
        ],
        vec!["eval".into(), "--model".into(), d("a.bin"), "--data".into(), d("data/target_test")],
    ];
    for step in steps {
        let argv = ["tfda".to_string()]
            .into_iter()
            .chain(step.iter().cloned())
            .chain(["--config".into(), cfg.clone(), "--seed".into(), "3".into()]);
        let code = run_cli(argv);
        assert_eq!(code, 0, "{} failed", step[0]);
    }
    std::fs::remove_dir_all(&dir).expect("cleanup");
}
