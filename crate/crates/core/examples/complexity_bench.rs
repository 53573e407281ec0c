//! Per-sample adaptation time at two target sizes.

use tfda::model::Arch;
use tfda::trainer::{bench_complexity, AdaptConfig};

fn main() -> tfda::Result<()> {
    let arch = Arch {
        widths: [4, 8, 8],
        proj_hidden: 8,
        proj_dim: 8,
        ..Arch::new(2, 128, 3)
    };
    let cfg = AdaptConfig {
        epochs: 1,
        lr: 1e-4,
        queue_capacity: 32,
        ..AdaptConfig::default()
    };
    let table = bench_complexity(&arch, &[60, 240], &cfg)?;
    print!("{}", table.to_csv());
    println!("grows faster than linear: {}", table.nonlinear);
    Ok(())
}
