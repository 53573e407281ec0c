//! Loss terms of the adaptation objective.
//!
//! Each term is available as a graph builder (`*_graph`) used for training
//! and as a plain function on values.

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const CE_EPS: f64 = 1e-12;
pub const KL_EPS: f64 = 1e-8;

/// Per-class weights `N / (C_present * n_c)`; absent classes get 0.
pub fn class_weights(class_counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = class_counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("class-balanced CE with all counts zero".into()));
    }
    let present = class_counts.iter().filter(|&&n| n > 0).count() as f64;
    Ok(class_counts
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { total as f64 / (present * n as f64) })
        .collect())
}

/// Mean over rows of `w[y_i] * -ln p[i, y_i]`.
pub fn class_balanced_ce_graph(g: &mut Graph, probs: Var, labels: &[usize], class_counts: &[usize]) -> Result<Var> {
    let w = class_weights(class_counts)?;
    if labels.is_empty() {
        return Ok(g.scalar(0.0));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= w.len()) {
        return Err(Error::InvalidArgument(format!("label {bad} outside the {} counted classes", w.len())));
    }
    let py = g.pick(probs, labels)?;
    let lp = g.log_clamped(py, CE_EPS);
    let wv = g.constant(Tensor::from_vec(labels.iter().map(|&y| w[y]).collect()));
    let weighted = g.mul(lp, wv)?;
    let m = g.mean(weighted);
    Ok(g.scale(m, -1.0))
}

/// `(1 / 2n) * sum_i ||p_i - onehot(y_i)||`; 0 for an empty group.
pub fn label_propagation_graph(g: &mut Graph, probs: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape("label_propagation", format!("{shape:?} with {} targets", targets.len())));
    }
    let c = shape[1];
    let mut onehot = vec![0.0; targets.len() * c];
    for (i, &y) in targets.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidArgument(format!("target {y} outside [0, {c})")));
        }
        onehot[i * c + y] = 1.0;
    }
    let t = g.constant(Tensor::new(shape, onehot)?);
    let d = g.sub(probs, t)?;
    let n = g.row_norm(d);
    let s = g.sum(n);
    Ok(g.scale(s, 0.5 / targets.len() as f64))
}

/// Batched masked InfoNCE. `queries` and `positives` are `[B, d]`,
/// `keys_t` is the `[d, n]` negative bank, and `included[i]` lists the
/// negatives kept for row `i`. The positive is part of the denominator.
pub fn info_nce_graph(
    g: &mut Graph,
    queries: Var,
    positives: Var,
    keys_t: Var,
    included: &[Vec<usize>],
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be > 0")));
    }
    let b = g.shape(queries)[0];
    if included.len() != b {
        return Err(Error::shape("info_nce", format!("{b} queries, {} exclusion sets", included.len())));
    }
    if b == 0 {
        return Ok(g.scalar(0.0));
    }
    let n = g.shape(keys_t)[1];
    let qk = g.mul(queries, positives)?;
    let pos = g.sum_last(qk);
    let pos = g.reshape(pos, &[b, 1])?;
    let neg = g.matmul(queries, keys_t)?;
    let logits = g.concat_last(pos, neg)?;
    let logits = g.scale(logits, 1.0 / tau);
    let mut mask = vec![false; b * (n + 1)];
    for (i, inc) in included.iter().enumerate() {
        mask[i * (n + 1)] = true;
        for &j in inc {
            if j >= n {
                return Err(Error::InvalidArgument(format!("negative {j} outside queue of {n}")));
            }
            mask[i * (n + 1) + 1 + j] = true;
        }
    }
    let lse = g.masked_logsumexp(logits, mask)?;
    let pos = g.reshape(pos, &[b])?;
    let pos = g.scale(pos, 1.0 / tau);
    let per = g.sub(lse, pos)?;
    Ok(g.mean(per))
}

/// Single-query InfoNCE on plain vectors.
pub fn info_nce_masked(query: &[f64], positive: &[f64], keys: &[Vec<f64>], included: &[usize], tau: f64) -> Result<f64> {
    let d = query.len();
    let n = keys.len();
    let mut kt = vec![0.0; d * n];
    for (j, k) in keys.iter().enumerate() {
        if k.len() != d {
            return Err(Error::shape("info_nce", format!("key {j} has dim {}", k.len())));
        }
        for (r, &v) in k.iter().enumerate() {
            kt[r * n + j] = v;
        }
    }
    let mut g = Graph::new();
    let q = g.constant(Tensor::new(vec![1, d], query.to_vec())?);
    let p = g.constant(Tensor::new(vec![1, d], positive.to_vec())?);
    let k = g.constant(Tensor::new(vec![d, n], kt)?);
    let l = info_nce_graph(&mut g, q, p, k, &[included.to_vec()], tau)?;
    Ok(g.item(l))
}

/// Contrastive components and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contrastive {
    pub time: f64,
    pub freq: f64,
    pub joint: f64,
    pub total: f64,
}

/// `a1 * (freq + time) + a2 * joint`.
pub fn combined_contrastive(time: f64, freq: f64, joint: f64, a1: f64, a2: f64) -> Contrastive {
    Contrastive {
        time,
        freq,
        joint,
        total: a1 * (freq + time) + a2 * joint,
    }
}

pub fn combined_contrastive_graph(g: &mut Graph, time: Var, freq: Var, joint: Var, a1: f64, a2: f64) -> Result<Var> {
    let tf = g.add(freq, time)?;
    let tf = g.scale(tf, a1);
    let j = g.scale(joint, a2);
    g.add(tf, j)
}

/// Batch mean of `KL(p || q) + KL(q || p)` with logs clamped at `eps`.
pub fn consistency_kl_graph(g: &mut Graph, p: Var, q: Var, eps: f64) -> Result<Var> {
    if g.shape(p) != g.shape(q) {
        return Err(Error::shape("consistency_kl", format!("{:?} vs {:?}", g.shape(p), g.shape(q))));
    }
    if g.shape(p)[0] == 0 {
        return Ok(g.scalar(0.0));
    }
    let lp = g.log_clamped(p, eps);
    let lq = g.log_clamped(q, eps);
    let d = g.sub(p, q)?;
    let dl = g.sub(lp, lq)?;
    let m = g.mul(d, dl)?;
    let rows = g.sum_last(m);
    Ok(g.mean(rows))
}

pub fn consistency_kl(p: &Tensor, q: &Tensor, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (pv, qv) = (g.constant(p.clone()), g.constant(q.clone()));
    let l = consistency_kl_graph(&mut g, pv, qv, eps)?;
    Ok(g.item(l))
}

/// Shannon entropy with `0 ln 0 = 0`.
pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Entropy-aware sample weights `eta` and class masses `beta` of `h`.
pub fn tsallis_weights(h: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (h.shape()[0], h.shape()[1]);
    let raw: Vec<f64> = (0..n).map(|i| 1.0 + (-entropy(h.row(i))).exp()).collect();
    let total: f64 = raw.iter().sum();
    let eta = raw.iter().map(|r| n as f64 * r / total).collect();
    let mut beta = vec![0.0; c];
    for i in 0..n {
        for (b, v) in beta.iter_mut().zip(h.row(i)) {
            *b += v;
        }
    }
    (eta, beta)
}

/// `-(1/(a-1)) (1/C) sum_i sum_k eta_i h_ik^a / beta_k`, with `eta` and
/// `beta` taken from the current values as constants.
pub fn tsallis_uncertainty_graph(g: &mut Graph, h: Var, a: f64) -> Result<Var> {
    let th = g.value(h).clone();
    if th.rank() != 2 {
        return Err(Error::shape("tsallis_uncertainty", format!("{:?}", th.shape())));
    }
    let (eta, beta) = tsallis_weights(&th);
    tsallis_fixed_weights_graph(g, h, a, &eta, &beta)
}

/// The Tsallis term with caller-supplied `eta` and `beta`; a class with
/// `beta_k = 0` contributes nothing.
pub fn tsallis_fixed_weights_graph(g: &mut Graph, h: Var, a: f64, eta: &[f64], beta: &[f64]) -> Result<Var> {
    if !(a > 1.0) {
        return Err(Error::InvalidArgument(format!("Tsallis exponent {a} must be > 1")));
    }
    let shape = g.shape(h).to_vec();
    if shape.len() != 2 || eta.len() != shape[0] || beta.len() != shape[1] {
        return Err(Error::shape(
            "tsallis_uncertainty",
            format!("{shape:?} with {} sample and {} class weights", eta.len(), beta.len()),
        ));
    }
    let (n, c) = (shape[0], shape[1]);
    if n == 0 {
        return Ok(g.scalar(0.0));
    }
    let mut w = Vec::with_capacity(n * c);
    for e in eta {
        for b in beta {
            w.push(if *b > 0.0 { e / b } else { 0.0 });
        }
    }
    let wv = g.constant(Tensor::new(vec![n, c], w)?);
    let ha = g.powf(h, a);
    let m = g.mul(ha, wv)?;
    let s = g.sum(m);
    Ok(g.scale(s, -1.0 / ((a - 1.0) * c as f64)))
}

pub fn tsallis_uncertainty(h: &Tensor, a: f64) -> Result<f64> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let l = tsallis_uncertainty_graph(&mut g, hv, a)?;
    Ok(g.item(l))
}

/// Curriculum coefficients applied to the loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub mu_r: f64,
    pub mu_c: f64,
    pub mu_cons: f64,
    pub mu_u: f64,
}

/// `mu_r ce + (1 - mu_r) lp + mu_c cl + mu_cons cons + mu_u ul`.
pub fn total_loss(ce: f64, lp: f64, cl: f64, cons: f64, ul: f64, mu: &Coefficients) -> f64 {
    mu.mu_r * ce + (1.0 - mu.mu_r) * lp + mu.mu_c * cl + mu.mu_cons * cons + mu.mu_u * ul
}

pub fn total_loss_graph(g: &mut Graph, terms: [Var; 5], mu: &Coefficients) -> Result<Var> {
    let w = [mu.mu_r, 1.0 - mu.mu_r, mu.mu_c, mu.mu_cons, mu.mu_u];
    let mut acc = g.scale(terms[0], w[0]);
    for (t, c) in terms.iter().zip(w).skip(1) {
        let s = g.scale(*t, c);
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

/// Values of every loss term for one batch or averaged over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub ce: f64,
    pub lp: f64,
    pub cl_time: f64,
    pub cl_freq: f64,
    pub cl_tf: f64,
    pub cl: f64,
    pub cons: f64,
    pub ul: f64,
    pub all: f64,
}

impl LossBundle {
    pub const NAMES: [&'static str; 9] = ["ce", "lp", "cl_time", "cl_freq", "cl_tf", "cl", "cons", "ul", "all"];

    pub fn values(&self) -> [f64; 9] {
        [
            self.ce, self.lp, self.cl_time, self.cl_freq, self.cl_tf, self.cl, self.cons, self.ul, self.all,
        ]
    }

    /// Name of the first non-finite term.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }

    pub fn add_scaled(&mut self, other: &LossBundle, s: f64) {
        self.ce += s * other.ce;
        self.lp += s * other.lp;
        self.cl_time += s * other.cl_time;
        self.cl_freq += s * other.cl_freq;
        self.cl_tf += s * other.cl_tf;
        self.cl += s * other.cl;
        self.cons += s * other.cons;
        self.ul += s * other.ul;
        self.all += s * other.all;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, ParamSet};
    use crate::rng::stream;
    use rand::Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn ce(probs: &Tensor, labels: &[usize], counts: &[usize]) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(probs.clone());
        let l = class_balanced_ce_graph(&mut g, p, labels, counts).unwrap();
        g.item(l)
    }

    #[test]
    fn ce_examples() {
        let p = t(&[&[0.7, 0.3], &[0.2, 0.8]]);
        let plain = -(0.7f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((ce(&p, &[0, 1], &[5, 5]) - plain).abs() < 1e-15);
        let half = t(&[&[0.5, 0.5]]);
        assert!((ce(&half, &[1], &[3, 1]) - 2.0 * 2f64.ln()).abs() < 1e-12);
        let onehot = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(ce(&onehot, &[0, 1], &[1, 1]).abs() < 1e-15);
        let mut g = Graph::new();
        let pv = g.constant(p);
        assert!(class_balanced_ce_graph(&mut g, pv, &[0, 1], &[0, 0]).is_err());
    }

    fn lp(probs: &Tensor, y: &[usize]) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(probs.clone());
        let l = label_propagation_graph(&mut g, p, y).unwrap();
        g.item(l)
    }

    #[test]
    fn lp_examples() {
        assert_eq!(lp(&t(&[&[1.0, 0.0]]), &[0]), 0.0);
        assert!((lp(&t(&[&[0.6, 0.4]]), &[0]) - 0.32f64.sqrt() / 2.0).abs() < 1e-15);
        assert!((lp(&t(&[&[0.6, 0.4]]), &[0]) - 0.282843).abs() < 1e-6);
        assert_eq!(lp(&Tensor::zeros(&[0, 2]), &[]), 0.0);
    }

    #[test]
    fn info_nce_examples() {
        let q = [1.0, 0.0];
        assert_eq!(info_nce_masked(&q, &q, &[vec![0.0, 1.0]], &[], 0.07).unwrap(), 0.0);
        let one = info_nce_masked(&q, &q, &[vec![0.0, 1.0]], &[0], 1.0).unwrap();
        assert!((one - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((one - 0.313262).abs() < 1e-6);
        let keys = [vec![0.0, 1.0], vec![0.0, -1.0]];
        let two = info_nce_masked(&q, &q, &keys, &[0, 1], 1.0).unwrap();
        let e = 1f64.exp();
        assert!((two - ((e + 2.0) / e).ln()).abs() < 1e-15);
    }

    #[test]
    fn contrastive_combination() {
        assert_eq!(combined_contrastive(0.0, 0.0, 0.0, 0.5, 0.5).total, 0.0);
        assert!((combined_contrastive(0.4, 0.6, 1.0, 0.5, 0.5).total - 1.0).abs() < 1e-15);
        assert_eq!(
            combined_contrastive(0.4, 0.6, 7.0, 0.5, 0.0).total,
            combined_contrastive(0.4, 0.6, 1.0, 0.5, 0.0).total
        );
    }

    #[test]
    fn kl_examples() {
        let p = t(&[&[0.5, 0.5]]);
        let q = t(&[&[0.25, 0.75]]);
        assert_eq!(consistency_kl(&p, &p, KL_EPS).unwrap(), 0.0);
        let want = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln() + 0.25 * (0.25f64 / 0.5).ln()
            + 0.75 * (0.75f64 / 0.5).ln();
        let v = consistency_kl(&p, &q, KL_EPS).unwrap();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.274653).abs() < 1e-5);
        assert_eq!(v, consistency_kl(&q, &p, KL_EPS).unwrap());
    }

    #[test]
    fn tsallis_examples() {
        let mut r = stream(&[17]);
        for c in 2..6 {
            let raw: Vec<f64> = (0..c).map(|_| r.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let h = Tensor::new(vec![1, c], raw.iter().map(|v| v / s).collect()).unwrap();
            assert!((tsallis_uncertainty(&h, 2.0).unwrap() + 1.0 / c as f64).abs() < 1e-12);
        }
        assert!((tsallis_uncertainty(&t(&[&[1.0, 0.0], &[0.0, 1.0]]), 2.0).unwrap() + 1.0).abs() < 1e-15);
        let h = t(&[&[1.0, 0.0], &[0.5, 0.5]]);
        let (eta, beta) = tsallis_weights(&h);
        assert!((eta[0] - 8.0 / 7.0).abs() < 1e-15 && (eta[1] - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(beta, vec![1.5, 0.5]);
        assert!((tsallis_uncertainty(&h, 2.0).unwrap() + 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(tsallis_uncertainty(&t(&[&[1.0, 0.0]]), 2.0).unwrap(), -0.5);
    }

    #[test]
    fn total_examples() {
        let mu = Coefficients {
            mu_r: 0.5,
            mu_c: 0.5,
            mu_cons: 0.5,
            mu_u: 0.5,
        };
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0, &mu), 0.0);
        assert!((total_loss(1.0, 1.0, 1.0, 1.0, 1.0, &mu) - 2.5).abs() < 1e-15);
        let one = Coefficients { mu_r: 1.0, ..mu };
        assert_eq!(total_loss(1.0, 5.0, 0.0, 0.0, 0.0, &one), 1.0);
        let mut g = Graph::new();
        let terms = [1.0, 2.0, 3.0, 4.0, 5.0].map(|v| g.scalar(v));
        let l = total_loss_graph(&mut g, terms, &mu).unwrap();
        assert_eq!(g.item(l), total_loss(1.0, 2.0, 3.0, 4.0, 5.0, &mu));
    }

    fn logits(seed: u64, b: usize, c: usize) -> ParamSet {
        let mut r = stream(&[seed]);
        let mut p = ParamSet::new();
        p.insert("z", Tensor::new(vec![b, c], (0..b * c).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap())
            .unwrap();
        p.insert("w", Tensor::new(vec![b, c], (0..b * c).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn loss_gradients() {
        let params = logits(3, 4, 3);
        let y = [0, 2, 1, 2];
        let (eta, beta) = tsallis_weights(&crate::diffcore::softmax(params.get("z").unwrap()));
        let report = grad_check(
            |g, b| {
                let p = b.get("z")?;
                let p = g.softmax(p);
                let q = b.get("w")?;
                let q = g.softmax(q);
                let a = class_balanced_ce_graph(g, p, &y, &[1, 1, 2])?;
                let l = label_propagation_graph(g, q, &y)?;
                let k = consistency_kl_graph(g, p, q, KL_EPS)?;
                let u = tsallis_fixed_weights_graph(g, p, 2.0, &eta, &beta)?;
                let zq = b.get("z")?;
                let zq = g.l2_normalize(zq, 1e-12);
                let zk = b.get("w")?;
                let zk = g.l2_normalize(zk, 1e-12);
                let kt = g.constant(Tensor::new(vec![3, 2], vec![0.6, 0.0, 0.8, 1.0, 0.0, 0.0]).unwrap());
                let n = info_nce_graph(g, zq, zk, kt, &[vec![0, 1], vec![1], vec![], vec![0]], 0.5)?;
                let cl = combined_contrastive_graph(g, n, n, n, 0.5, 0.5)?;
                let mu = Coefficients {
                    mu_r: 0.7,
                    mu_c: 0.5,
                    mu_cons: 0.5,
                    mu_u: 0.5,
                };
                total_loss_graph(g, [a, l, cl, k, u], &mu)
            },
            &params,
            1e-6,
            1e-4,
        );
        assert!(report.pass, "{report:?}");
    }
}
