//! Coefficient trajectories under easy and hard batches.

use tfda::curriculum::CurriculumState;

fn main() -> tfda::Result<()> {
    for (label, tau_c, tau_u) in [("easy", 0.9, 0.01), ("hard", 0.4, 0.4)] {
        let mut s = CurriculumState::default();
        for _ in 0..100 {
            s = s.step_mu_r(tau_c, tau_u)?.decay_aux();
        }
        println!("{label}: after {} epochs mu_r {:.6} mu_c {:.6}", s.epoch, s.mu_r, s.mu_c);
    }
    Ok(())
}
