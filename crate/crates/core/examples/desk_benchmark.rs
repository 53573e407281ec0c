//! Runs the synthetic desk-scale benchmark for a few seeds and prints
//! source, source-only, adapted, and time-branch-only adapted macro-F1.
//!
//! Usage: cargo run --release --example desk_benchmark -- [SEEDS] [ADAPT_EPOCHS] [FREQ_SHIFT]

use tfda::pipeline::{adapt_and_score, median, prepare, DeskConfig};

fn main() -> tfda::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(3);
    let mut cfg = DeskConfig::default();
    if let Some(e) = args.get(1).and_then(|s| s.parse().ok()) {
        cfg.adapt.epochs = e;
    }
    if let Some(f) = args.get(2).and_then(|s| s.parse().ok()) {
        cfg.bench.shift.frequency_shift = f;
    }
    let (mut gains, mut full, mut ablated) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..seeds {
        let (pair, model) = prepare(&cfg, seed)?;
        let r = adapt_and_score(&cfg, &pair, &model, seed)?;
        let t = adapt_and_score(&cfg.time_only(), &pair, &model, seed)?;
        println!(
            "seed {seed}: source {:.4} source-only {:.4} adapted {:.4} time-only {:.4}",
            r.source_f1, r.source_only_f1, r.adapted_f1, t.adapted_f1
        );
        gains.push(r.adapted_f1 - r.source_only_f1);
        full.push(r.adapted_f1);
        ablated.push(t.adapted_f1);
    }
    println!(
        "median gain {:.4}, median adapted {:.4}, median time-only {:.4}",
        median(&gains),
        median(&full),
        median(&ablated)
    );
    Ok(())
}
