//! Builds a tiny graph, runs backward, and compares against central
//! differences.

use tfda::diffcore::{grad_check, Graph, ParamSet, Tensor};

fn main() -> tfda::Result<()> {
    let mut g = Graph::new();
    let w = g.param(Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]])?);
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]])?);
    let h = g.matmul(x, w)?;
    let p = g.softmax(h);
    let loss = g.pick(p, &[1])?;
    let loss = g.log_clamped(loss, 1e-12);
    let loss = g.scale(loss, -1.0);
    let loss = g.mean(loss);
    let grads = g.backward(loss)?;
    println!("loss {:.6}", g.item(loss));
    println!("dloss/dw {:?}", grads.get(w));

    let mut params = ParamSet::new();
    params.insert("w", g.value(w).clone())?;
    let report = grad_check(
        |g, b| {
            let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]])?);
            let h = g.matmul(x, b.get("w")?)?;
            let p = g.softmax(h);
            let l = g.pick(p, &[1])?;
            let l = g.log_clamped(l, 1e-12);
            let l = g.scale(l, -1.0);
            Ok(g.mean(l))
        },
        &params,
        1e-6,
        1e-6,
    );
    println!("max relative error {:.2e}, pass {}", report.max_rel_err(), report.pass);
    Ok(())
}
