//! Seeded central-difference checks for every differentiable op, every
//! loss, and the model graph.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffcore::{grad_check, BatchNormMode, BoundParams, GradReport, Graph, ParamSet, Tensor, Var};
use crate::error::Result;
use crate::losses::{
    class_balanced_ce_graph, combined_contrastive_graph, consistency_kl_graph, info_nce_graph,
    label_propagation_graph, total_loss_graph, tsallis_fixed_weights_graph, tsallis_weights, Coefficients, KL_EPS,
};
use crate::model::{build_model, cross_entropy_graph, fuse_graph, fusion_alpha, Arch, Branch, Fusion, Mode};
use crate::rng::{mix, stream};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// Names of all checked cases, in run order.
pub const CASES: [&str; 34] = [
    "add", "sub", "mul", "div", "scale", "relu", "exp", "log", "powf", "sum", "mean", "sum_last", "mean_last",
    "max_last", "softmax", "l2_normalize", "row_norm", "matmul", "concat_last", "select_rows", "pick",
    "masked_logsumexp", "reshape", "conv1d", "batchnorm_batch", "batchnorm_running", "maxpool1d", "dropout",
    "cross_entropy", "class_balanced_ce", "label_propagation", "info_nce", "consistency_kl", "tsallis",
];

/// Loss cases, checked on 4-sample batches.
pub const LOSS_CASES: [&str; 6] = [
    "cross_entropy",
    "class_balanced_ce",
    "label_propagation",
    "info_nce",
    "consistency_kl",
    "tsallis",
];

/// Cases beyond single ops: composite losses and the model.
pub const COMPOSITE_CASES: [&str; 4] = ["fusion", "contrastive_total", "branch_projector", "freq_branch"];

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl CaseResult {
    pub fn pass(&self, tol: f64) -> bool {
        self.failures.is_empty() && self.max_rel_err <= tol
    }
}

/// Uniform values with magnitude in `[0.2, 1]` and random sign, away from
/// the kinks of relu and norms.
fn signed(shape: &[usize], seed: u64) -> Tensor {
    let mut r = stream(&[seed]);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.2..1.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let mut r = stream(&[seed]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(0.3..2.0)).collect()).expect("sized")
}

/// Rows whose entries are spaced at least 0.1 apart, so maxima are unique.
fn spaced(shape: &[usize], seed: u64) -> Tensor {
    let mut r = stream(&[seed]);
    let last = *shape.last().expect("rank >= 1");
    let rows: usize = shape.iter().product::<usize>() / last;
    let mut data = Vec::with_capacity(rows * last);
    for _ in 0..rows {
        let mut v: Vec<f64> = (0..last).map(|k| 0.1 * k as f64 + r.random_range(0.0..0.02)).collect();
        v.shuffle(&mut r);
        data.extend(v);
    }
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn dims(seed: u64, lo: usize, hi: usize) -> usize {
    stream(&[seed, 0xD1]).random_range(lo..=hi)
}

fn params(entries: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (k, v) in entries {
        p.insert(k, v).expect("unique names");
    }
    p
}

/// Contracts an output with fixed random weights.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(signed(g.shape(y), mix(&[seed, 0xEE])));
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

fn labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut r = stream(&[seed, 0x1A]);
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

fn check<F>(p: &ParamSet, f: F) -> GradReport
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    grad_check(f, p, STEP, TOLERANCE)
}

/// One random instance of case `name`.
pub fn run_case(name: &str, seed: u64) -> Result<GradReport> {
    let b = if LOSS_CASES.contains(&name) { 4 } else { dims(seed, 2, 4) };
    let d = dims(seed ^ 1, 2, 5);
    let s = |k: u64| mix(&[seed, k]);
    let two = |g: &mut Graph, bp: &BoundParams, op: fn(&mut Graph, Var, Var) -> Result<Var>| -> Result<Var> {
        let x = bp.get("x")?;
        let y = bp.get("y")?;
        let z = op(g, x, y)?;
        weighted(g, z, seed)
    };
    let xy = params(vec![("x", signed(&[b, d], s(1))), ("y", signed(&[d], s(2)))]);
    let r = match name {
        "add" => check(&xy, |g, bp| two(g, bp, Graph::add)),
        "sub" => check(&xy, |g, bp| two(g, bp, Graph::sub)),
        "mul" => check(&xy, |g, bp| two(g, bp, Graph::mul)),
        "div" => {
            let p = params(vec![("x", signed(&[b, d], s(1))), ("y", positive(&[b, 1], s(2)))]);
            check(&p, |g, bp| two(g, bp, Graph::div))
        }
        "matmul" => {
            let p = params(vec![("x", signed(&[b, d], s(1))), ("y", signed(&[d, 3], s(2)))]);
            check(&p, |g, bp| two(g, bp, Graph::matmul))
        }
        "concat_last" => {
            let p = params(vec![("x", signed(&[b, d], s(1))), ("y", signed(&[b, 2], s(2)))]);
            check(&p, |g, bp| two(g, bp, Graph::concat_last))
        }
        "scale" | "relu" | "exp" | "sum" | "mean" | "sum_last" | "mean_last" | "softmax" | "l2_normalize"
        | "row_norm" | "reshape" => {
            let p = params(vec![("x", signed(&[b, d, 2], s(1)))]);
            check(&p, |g, bp| {
                let x = bp.get("x")?;
                let y = match name {
                    "scale" => g.scale(x, -1.7),
                    "relu" => g.relu(x),
                    "exp" => g.exp(x),
                    "sum" => g.sum(x),
                    "mean" => g.mean(x),
                    "sum_last" => g.sum_last(x),
                    "mean_last" => g.mean_last(x),
                    "softmax" => g.softmax(x),
                    "l2_normalize" => g.l2_normalize(x, 1e-12),
                    "row_norm" => g.row_norm(x),
                    _ => g.reshape(x, &[2 * d, b])?,
                };
                weighted(g, y, seed)
            })
        }
        "log" | "powf" => {
            let p = params(vec![("x", positive(&[b, d], s(1)))]);
            check(&p, |g, bp| {
                let x = bp.get("x")?;
                let y = if name == "log" { g.log_clamped(x, 1e-12) } else { g.powf(x, 2.5) };
                weighted(g, y, seed)
            })
        }
        "max_last" => {
            let p = params(vec![("x", spaced(&[b, d], s(1)))]);
            check(&p, |g, bp| {
                let y = g.max_last(bp.get("x")?)?;
                weighted(g, y, seed)
            })
        }
        "maxpool1d" => {
            let p = params(vec![("x", spaced(&[b, 2, 2 * d + 1], s(1)))]);
            check(&p, |g, bp| {
                let y = g.maxpool1d(bp.get("x")?, 2)?;
                weighted(g, y, seed)
            })
        }
        "select_rows" | "pick" => {
            let idx = labels(b + 1, b, s(3));
            let cols = labels(b + 1, d, s(4));
            let p = params(vec![("x", signed(&[b, d], s(1)))]);
            check(&p, |g, bp| {
                let sel = g.select_rows(bp.get("x")?, &idx)?;
                let y = if name == "pick" { g.pick(sel, &cols)? } else { sel };
                weighted(g, y, seed)
            })
        }
        "masked_logsumexp" => {
            let mut r = stream(&[s(5)]);
            let mut mask: Vec<bool> = (0..b * d).map(|_| r.random_bool(0.6)).collect();
            for i in 0..b {
                mask[i * d] = true;
            }
            let p = params(vec![("x", signed(&[b, d], s(1)))]);
            check(&p, |g, bp| {
                let y = g.masked_logsumexp(bp.get("x")?, mask.clone())?;
                weighted(g, y, seed)
            })
        }
        "conv1d" => {
            let k = dims(seed ^ 2, 1, 4);
            let p = params(vec![
                ("x", signed(&[b, 2, 7], s(1))),
                ("w", signed(&[3, 2, k], s(2))),
                ("b", signed(&[3], s(3))),
            ]);
            let stride = dims(seed ^ 3, 1, 2);
            check(&p, |g, bp| {
                let y = g.conv1d(bp.get("x")?, bp.get("w")?, bp.get("b")?, stride, k / 2)?;
                weighted(g, y, seed)
            })
        }
        "batchnorm_batch" | "batchnorm_running" => {
            let mode = if name == "batchnorm_batch" {
                BatchNormMode::Batch
            } else {
                BatchNormMode::Running
            };
            let p = params(vec![
                ("x", signed(&[b, 3, 5], s(1))),
                ("gamma", positive(&[3], s(2))),
                ("beta", signed(&[3], s(3))),
            ]);
            let rm = signed(&[3], s(4)).into_data();
            let rv = positive(&[3], s(5)).into_data();
            check(&p, |g, bp| {
                let (y, _) = g.batchnorm1d(bp.get("x")?, bp.get("gamma")?, bp.get("beta")?, mode, &rm, &rv, 1e-5)?;
                weighted(g, y, seed)
            })
        }
        "dropout" => {
            let p = params(vec![("x", signed(&[b, d], s(1)))]);
            check(&p, |g, bp| {
                let y = g.dropout(bp.get("x")?, 0.4, s(6))?;
                weighted(g, y, seed)
            })
        }
        "cross_entropy" | "class_balanced_ce" | "label_propagation" => {
            let c = d.max(3);
            let y = labels(b, c, s(3));
            let mut counts = vec![0usize; c];
            y.iter().for_each(|&l| counts[l] += 1);
            let p = params(vec![("z", signed(&[b, c], s(1)))]);
            check(&p, |g, bp| {
                let probs = g.softmax(bp.get("z")?);
                match name {
                    "cross_entropy" => cross_entropy_graph(g, probs, &y),
                    "class_balanced_ce" => class_balanced_ce_graph(g, probs, &y, &counts),
                    _ => label_propagation_graph(g, probs, &y),
                }
            })
        }
        "info_nce" => {
            let n = dims(seed ^ 4, 1, 6);
            let mut r = stream(&[s(5)]);
            let included: Vec<Vec<usize>> = (0..b).map(|_| (0..n).filter(|_| r.random_bool(0.6)).collect()).collect();
            let tau = r.random_range(0.1..1.0);
            let p = params(vec![
                ("q", signed(&[b, d], s(1))),
                ("k", signed(&[b, d], s(2))),
                ("neg", signed(&[d, n], s(3))),
            ]);
            check(&p, |g, bp| {
                let q = g.l2_normalize(bp.get("q")?, 1e-12);
                let k = g.l2_normalize(bp.get("k")?, 1e-12);
                info_nce_graph(g, q, k, bp.get("neg")?, &included, tau)
            })
        }
        "consistency_kl" => {
            let p = params(vec![("a", signed(&[b, d], s(1))), ("b", signed(&[b, d], s(2)))]);
            check(&p, |g, bp| {
                let pa = g.softmax(bp.get("a")?);
                let pb = g.softmax(bp.get("b")?);
                consistency_kl_graph(g, pa, pb, KL_EPS)
            })
        }
        "tsallis" => {
            let z = signed(&[b, d], s(1));
            let (eta, beta) = tsallis_weights(&crate::diffcore::softmax(&z));
            let a = stream(&[s(5)]).random_range(1.5..3.0);
            let p = params(vec![("z", z)]);
            check(&p, |g, bp| {
                let h = g.softmax(bp.get("z")?);
                tsallis_fixed_weights_graph(g, h, a, &eta, &beta)
            })
        }
        "fusion" => {
            // The mixing weight carries no gradient, so the reference freezes
            // it at the base point.
            let (za, zb) = (signed(&[b, d], s(1)), signed(&[b, d], s(2)));
            let (pa0, pb0) = (crate::diffcore::softmax(&za), crate::diffcore::softmax(&zb));
            let alpha: Vec<f64> = (0..b).map(|i| fusion_alpha(pa0.row(i), pb0.row(i))).collect();
            let p = params(vec![("a", za), ("b", zb)]);
            check(&p, |g, bp| {
                let pa = g.softmax(bp.get("a")?);
                let pb = g.softmax(bp.get("b")?);
                let f = if g.value(pa) == &pa0 && g.value(pb) == &pb0 {
                    fuse_graph(g, pa, pb, Fusion::Confidence)?
                } else {
                    let al = g.constant(Tensor::new(vec![b, 1], alpha.clone())?);
                    let one = g.scalar(1.0);
                    let bl = g.sub(one, al)?;
                    let x = g.mul(pa, al)?;
                    let y = g.mul(pb, bl)?;
                    g.add(x, y)?
                };
                weighted(g, f, seed)
            })
        }
        "contrastive_total" => {
            let p = params(vec![("v", signed(&[5], s(1)))]);
            let mu = Coefficients {
                mu_r: 0.9,
                mu_c: 0.4,
                mu_cons: 0.3,
                mu_u: 0.2,
            };
            check(&p, |g, bp| {
                let v = bp.get("v")?;
                let terms: Vec<Var> = (0..5)
                    .map(|i| {
                        let sel = g.reshape(v, &[5, 1])?;
                        let row = g.select_rows(sel, &[i])?;
                        let e = g.exp(row);
                        Ok(g.sum(e))
                    })
                    .collect::<Result<_>>()?;
                let cl = combined_contrastive_graph(g, terms[0], terms[1], terms[2], 0.5, 0.5)?;
                total_loss_graph(g, [terms[3], terms[4], cl, terms[1], terms[2]], &mu)
            })
        }
        "branch_projector" | "freq_branch" => {
            let arch = Arch {
                widths: [3, 4, 4],
                proj_hidden: 8,
                proj_dim: 4,
                dropout: 0.0,
                ..Arch::new(2, 16, 3)
            };
            let branch = if name == "freq_branch" { Branch::Freq } else { Branch::Time };
            let model = build_model(&arch, s(1))?;
            let x = signed(&[3, 2, arch.input_len(branch)], s(2));
            let y = labels(3, 3, s(3));
            return Ok(check(&model.params, |g, bp| {
                let xv = g.constant(x.clone());
                let out = model.branch_graph(g, bp, branch, xv, Mode::Train { dropout_seed: None })?;
                let z = model.projector_graph(g, bp, branch, out.features)?;
                let ce = cross_entropy_graph(g, out.probs, &y)?;
                let wz = weighted(g, z, seed)?;
                g.add(ce, wz)
            }));
        }
        other => {
            return Err(crate::Error::InvalidArgument(format!("unknown gradient case {other}")));
        }
    };
    Ok(r)
}

/// Runs every case `instances` times with seeds derived from `seed`.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CaseResult>> {
    CASES
        .iter()
        .chain(COMPOSITE_CASES.iter())
        .enumerate()
        .map(|(ci, &name)| {
            let mut out = CaseResult {
                name,
                instances,
                max_rel_err: 0.0,
                failures: Vec::new(),
            };
            for i in 0..instances {
                let rep = run_case(name, mix(&[seed, ci as u64, i as u64]))?;
                out.max_rel_err = out.max_rel_err.max(rep.max_rel_err());
                if let Some(f) = rep.failure {
                    out.failures.push(f);
                }
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_once() {
        for r in run_suite(1, 7).unwrap() {
            assert!(r.pass(TOLERANCE), "{r:?}");
        }
    }

    #[test]
    fn unknown_case_is_an_error() {
        assert!(run_case("nope", 0).is_err());
    }
}
