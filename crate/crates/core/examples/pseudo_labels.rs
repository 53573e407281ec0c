//! Neighbor-refined pseudo-labels from the memory bank and negative
//! exclusion from the temporal queue.

use tfda::diffcore::Tensor;
use tfda::pseudo::{MemoryBank, TemporalQueue};

fn main() -> tfda::Result<()> {
    let mut bank = MemoryBank::new(8, 2, 2)?;
    let features = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]])?;
    let probs = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4], vec![0.2, 0.8], vec![0.3, 0.7]])?;
    bank.update(&features, &probs)?;
    let r = bank.refine(&[0.8, 0.2], 2)?;
    println!("neighbors {:?} refined {:?} label {}", r.neighbors, r.probs, r.label);

    let mut queue = TemporalQueue::new(4, 2, 2)?;
    queue.record(&[10, 11, 12], &features.select_rows(&[0, 1, 2]), &[0, 0, 1], 1)?;
    queue.record(&[11], &features.select_rows(&[1]), &[1], 2)?;
    let keep = queue.exclusion_set(&[(1, 0), (2, 0)]);
    let ids: Vec<usize> = keep.iter().map(|&j| queue.entry(j).id).collect();
    println!("negatives kept for a class-0 query: {ids:?}");
    Ok(())
}
