//! Each adaptation loss evaluated on small hand-made inputs.

use tfda::diffcore::{Graph, Tensor};
use tfda::losses::{
    class_balanced_ce_graph, combined_contrastive, consistency_kl, info_nce_masked, label_propagation_graph,
    total_loss, tsallis_uncertainty, Coefficients, KL_EPS,
};

fn main() -> tfda::Result<()> {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_rows(&[vec![0.6, 0.4]])?);
    let lp = label_propagation_graph(&mut g, p, &[0])?;
    let ce = class_balanced_ce_graph(&mut g, p, &[0], &[1, 0])?;
    println!("label propagation {:.6}", g.item(lp));
    println!("class-balanced CE {:.6}", g.item(ce));

    let nce = info_nce_masked(&[1.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0]], &[0], 1.0)?;
    println!("InfoNCE {nce:.6}");
    let cl = combined_contrastive(0.4, 0.6, 1.0, 0.5, 0.5);
    println!("combined contrastive {:.6}", cl.total);

    let a = Tensor::from_rows(&[vec![0.5, 0.5]])?;
    let b = Tensor::from_rows(&[vec![0.9, 0.1]])?;
    println!("consistency KL {:.6}", consistency_kl(&a, &b, KL_EPS)?);
    println!("Tsallis (a=2) {:.6}", tsallis_uncertainty(&b, 2.0)?);

    let mu = Coefficients {
        mu_r: 0.5,
        mu_c: 0.5,
        mu_cons: 0.5,
        mu_u: 0.5,
    };
    println!("total {:.6}", total_loss(1.0, 1.0, 1.0, 1.0, 1.0, &mu));
    Ok(())
}
