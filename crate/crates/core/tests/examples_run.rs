//! Runs the quick cargo examples that `cargo test` has already built.

use std::path::PathBuf;
use std::process::Command;

const QUICK: [&str; 10] = [
    "autodiff_basics",
    "augmentations",
    "spectral_views",
    "pseudo_labels",
    "losses_tour",
    "curriculum_schedule",
    "model_io",
    "gradient_suite",
    "complexity_bench",
    "cli_session",
];

fn examples_dir() -> PathBuf {
    // target/<profile>/deps/<this test> -> target/<profile>/examples
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().join("examples")
}

/// `cargo test` builds examples only when no target filter is given; build
/// them here otherwise.
fn ensure_built(dir: &std::path::Path) {
    if QUICK.iter().all(|n| dir.join(format!("{n}{}", std::env::consts::EXE_SUFFIX)).exists()) {
        return;
    }
    let status = Command::new(env!("CARGO"))
        .args(["build", "--profile", "test", "-p", "tfda", "--examples"])
        .status()
        .unwrap();
    assert!(status.success(), "building examples failed");
}

#[test]
fn quick_examples_succeed() {
    let dir = examples_dir();
    ensure_built(&dir);
    for name in QUICK {
        let path = dir.join(format!("{name}{}", std::env::consts::EXE_SUFFIX));
        assert!(path.exists(), "example binary {} not built", path.display());
        let out = Command::new(&path).output().unwrap();
        assert!(
            out.status.success(),
            "{name} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!out.stdout.is_empty() || name == "cli_session", "{name} printed nothing");
    }
}
