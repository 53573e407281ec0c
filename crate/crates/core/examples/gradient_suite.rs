//! Runs the seeded gradient checks over every op, loss, and both branches.

use tfda::gradsuite::{run_suite, TOLERANCE};

fn main() -> tfda::Result<()> {
    let results = run_suite(3, 0)?;
    let total: usize = results.iter().map(|r| r.instances).sum();
    for r in &results {
        println!("{:<20} {:.2e}", r.name, r.max_rel_err);
    }
    let ok = results.iter().all(|r| r.pass(TOLERANCE));
    println!("{total} instances, all within {TOLERANCE:e}: {ok}");
    Ok(())
}
