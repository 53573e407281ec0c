//! Dual-branch classifier: a time encoder over raw windows and a frequency
//! encoder over magnitude spectra, each followed by a pooled linear head,
//! plus projectors into a shared embedding space.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::data::{batches, Dataset};
use crate::diffcore::{
    adam_step, AdamConfig, AdamMoments, BatchNormMode, BatchStats, BoundParams, Graph,
    ParamSet, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::rng::{mix, stream};
use crate::spectral::magnitude_batch;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const NORM_EPS: f64 = 1e-12;
const LOG_EPS: f64 = 1e-12;
const MODEL_MAGIC: &[u8; 8] = b"TFDAMODL";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Time,
    Freq,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Time => "time",
            Branch::Freq => "freq",
        }
    }

    fn projector(self) -> &'static str {
        match self {
            Branch::Time => "proj_time",
            Branch::Freq => "proj_freq",
        }
    }
}

/// Architecture descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
    /// Filters of the three conv blocks; the last one is the feature dim.
    pub widths: [usize; 3],
    pub kernel: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub dropout: f64,
}

impl Arch {
    pub fn new(channels: usize, length: usize, classes: usize) -> Self {
        Self {
            channels,
            length,
            classes,
            widths: [64, 128, 128],
            kernel: 8,
            proj_hidden: 128,
            proj_dim: 128,
            dropout: 0.5,
        }
    }

    pub fn input_len(&self, branch: Branch) -> usize {
        match branch {
            Branch::Time => self.length,
            Branch::Freq => self.length / 2 + 1,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[2]
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Temporal length left after the three blocks, if any.
    pub fn encoded_len(&self, len: usize) -> Option<usize> {
        let mut l = len;
        for _ in 0..3 {
            let padded = l + 2 * self.pad();
            if padded < self.kernel {
                return None;
            }
            l = (padded - self.kernel + 1) / 2;
            if l == 0 {
                return None;
            }
        }
        Some(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.length == 0 || self.classes == 0 {
            return Err(Error::InvalidArgument("channels, length and classes must be >= 1".into()));
        }
        if self.widths.contains(&0) || self.kernel == 0 || self.proj_hidden == 0 || self.proj_dim == 0 {
            return Err(Error::InvalidArgument("layer widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for b in [Branch::Time, Branch::Freq] {
            if self.encoded_len(self.input_len(b)).is_none() {
                return Err(Error::InvalidArgument(format!(
                    "length {} too short for three blocks of kernel {}",
                    self.length, self.kernel
                )));
            }
        }
        Ok(())
    }
}

/// Model parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBranchModel {
    pub arch: Arch,
    pub params: ParamSet,
    pub buffers: ParamSet,
}

fn he_uniform(shape: &[usize], fan_in: usize, seed: u64, index: u64) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = stream(&[seed, index]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

pub fn build_model(arch: &Arch, seed: u64) -> Result<DualBranchModel> {
    arch.validate()?;
    let mut params = ParamSet::new();
    let mut buffers = ParamSet::new();
    let mut idx = 0u64;
    let mut next = || {
        idx += 1;
        idx
    };
    let d = arch.feature_dim();
    for b in [Branch::Time, Branch::Freq] {
        let p = b.prefix();
        let mut in_ch = arch.channels;
        for (i, &f) in arch.widths.iter().enumerate() {
            let i = i + 1;
            params.insert(
                format!("{p}.conv{i}.weight"),
                he_uniform(&[f, in_ch, arch.kernel], in_ch * arch.kernel, seed, next()),
            )?;
            params.insert(format!("{p}.conv{i}.bias"), Tensor::zeros(&[f]))?;
            params.insert(format!("{p}.bn{i}.gamma"), Tensor::filled(&[f], 1.0))?;
            params.insert(format!("{p}.bn{i}.beta"), Tensor::zeros(&[f]))?;
            buffers.insert(format!("{p}.bn{i}.running_mean"), Tensor::zeros(&[f]))?;
            buffers.insert(format!("{p}.bn{i}.running_var"), Tensor::filled(&[f], 1.0))?;
            in_ch = f;
        }
        params.insert(
            format!("{p}.head.weight"),
            he_uniform(&[d, arch.classes], d, seed, next()),
        )?;
        params.insert(format!("{p}.head.bias"), Tensor::zeros(&[arch.classes]))?;

        let q = b.projector();
        params.insert(
            format!("{q}.fc1.weight"),
            he_uniform(&[d, arch.proj_hidden], d, seed, next()),
        )?;
        params.insert(format!("{q}.fc1.bias"), Tensor::zeros(&[arch.proj_hidden]))?;
        params.insert(
            format!("{q}.fc2.weight"),
            he_uniform(&[arch.proj_hidden, arch.proj_dim], arch.proj_hidden, seed, next()),
        )?;
        params.insert(format!("{q}.fc2.bias"), Tensor::zeros(&[arch.proj_dim]))?;
    }
    Ok(DualBranchModel {
        arch: arch.clone(),
        params,
        buffers,
    })
}

/// Forward-pass behaviour of batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; dropout only when a seed is given.
    Train { dropout_seed: Option<u64> },
    /// Running statistics, no dropout.
    Eval,
}

/// Graph nodes produced by one branch.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    /// Pooled encoder output, `[B, D]`.
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
    /// Per-block batch statistics (train mode only).
    pub stats: Vec<BatchStats>,
}

impl DualBranchModel {
    /// Records `x` for `branch` on `g`, reading parameters from `bound`.
    pub fn branch_graph(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        branch: Branch,
        x: Var,
        mode: Mode,
    ) -> Result<BranchOutput> {
        let arch = &self.arch;
        let shape = g.shape(x).to_vec();
        let want = arch.input_len(branch);
        if shape.len() != 3 || shape[1] != arch.channels || shape[2] != want {
            return Err(Error::shape(
                "forward_branch",
                format!(
                    "{} branch expects [B, {}, {want}], got {shape:?}",
                    branch.prefix(),
                    arch.channels
                ),
            ));
        }
        let p = branch.prefix();
        let mut h = x;
        let mut stats = Vec::new();
        for i in 1..=3 {
            let w = bound.get(&format!("{p}.conv{i}.weight"))?;
            let b = bound.get(&format!("{p}.conv{i}.bias"))?;
            h = g.conv1d(h, w, b, 1, arch.pad())?;
            let gamma = bound.get(&format!("{p}.bn{i}.gamma"))?;
            let beta = bound.get(&format!("{p}.bn{i}.beta"))?;
            let rm = self.buffers.require(&format!("{p}.bn{i}.running_mean"))?;
            let rv = self.buffers.require(&format!("{p}.bn{i}.running_var"))?;
            let bn_mode = match mode {
                Mode::Train { .. } => BatchNormMode::Batch,
                Mode::Eval => BatchNormMode::Running,
            };
            let (y, s) = g.batchnorm1d(h, gamma, beta, bn_mode, rm.data(), rv.data(), BN_EPS)?;
            stats.extend(s);
            h = g.relu(y);
            h = g.maxpool1d(h, 2)?;
            if let Mode::Train {
                dropout_seed: Some(seed),
            } = mode
            {
                h = g.dropout(h, arch.dropout, mix(&[seed, i as u64]))?;
            }
        }
        let features = g.mean_last(h);
        let hw = bound.get(&format!("{p}.head.weight"))?;
        let hb = bound.get(&format!("{p}.head.bias"))?;
        let z = g.matmul(features, hw)?;
        let logits = g.add(z, hb)?;
        let probs = g.softmax(logits);
        Ok(BranchOutput {
            features,
            logits,
            probs,
            stats,
        })
    }

    /// Projector output for `features`, L2-normalized per row.
    pub fn projector_graph(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        branch: Branch,
        features: Var,
    ) -> Result<Var> {
        let q = branch.projector();
        let w1 = bound.get(&format!("{q}.fc1.weight"))?;
        let b1 = bound.get(&format!("{q}.fc1.bias"))?;
        let w2 = bound.get(&format!("{q}.fc2.weight"))?;
        let b2 = bound.get(&format!("{q}.fc2.bias"))?;
        let h = g.matmul(features, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let h = g.matmul(h, w2)?;
        let h = g.add(h, b2)?;
        Ok(g.l2_normalize(h, NORM_EPS))
    }

    /// Folds batch statistics from a train-mode pass into the running
    /// estimates: `r <- (1 - m) r + m s`.
    pub fn update_running_stats(&mut self, branch: Branch, stats: &[BatchStats], momentum: f64) -> Result<()> {
        if stats.len() != 3 {
            return Err(Error::shape(
                "update_running_stats",
                format!("{} block statistics, expected 3", stats.len()),
            ));
        }
        let p = branch.prefix();
        for (i, s) in stats.iter().enumerate() {
            let i = i + 1;
            for (key, src) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let t = self
                    .buffers
                    .get_mut(&format!("{p}.bn{i}.{key}"))
                    .ok_or_else(|| Error::InvalidArgument(format!("missing buffer {p}.bn{i}.{key}")))?;
                if t.numel() != src.len() {
                    return Err(Error::shape("update_running_stats", "channel dimension"));
                }
                for (r, v) in t.data_mut().iter_mut().zip(src) {
                    *r = (1.0 - momentum) * *r + momentum * v;
                }
            }
        }
        Ok(())
    }
}

/// Magnitude spectra of a `[B, Ch, S]` batch, shaped `[B, Ch, S/2 + 1]`.
pub fn frequency_input(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape("frequency_input", format!("rank {} != 3", x.rank())));
    }
    let (b, c, s) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::new(vec![b, c, s / 2 + 1], magnitude_batch(x.data(), b, c, s))
}

/// Features `[B, D]` and class probabilities `[B, C]` for one branch.
pub fn forward_branch(
    model: &DualBranchModel,
    branch: Branch,
    batch: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Tensor)> {
    let arch = &model.arch;
    if batch.rank() == 3 && batch.shape()[0] == 0 {
        if batch.shape()[1] != arch.channels || batch.shape()[2] != arch.input_len(branch) {
            return Err(Error::shape("forward_branch", format!("input {:?}", batch.shape())));
        }
        return Ok((
            Tensor::zeros(&[0, arch.feature_dim()]),
            Tensor::zeros(&[0, arch.classes]),
        ));
    }
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let x = g.constant(batch.clone());
    let out = model.branch_graph(&mut g, &bound, branch, x, mode)?;
    Ok((g.value(out.features).clone(), g.value(out.probs).clone()))
}

/// Projects `[B, D]` features into the joint space with unit-norm rows.
pub fn project_joint(model: &DualBranchModel, features: &Tensor, branch: Branch) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let f = g.constant(features.clone());
    let z = model.projector_graph(&mut g, &bound, branch, f)?;
    Ok(g.value(z).clone())
}

/// How the two branch outputs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Weights proportional to each branch's top probability.
    Confidence,
    /// Frequency weight forced to zero.
    TimeOnly,
}

/// `max p / (max p + max p_F)`, or 0.5 when both maxima are zero.
pub fn fusion_alpha(p: &[f64], p_f: &[f64]) -> f64 {
    let a = p.iter().copied().fold(0.0, f64::max);
    let b = p_f.iter().copied().fold(0.0, f64::max);
    if a + b == 0.0 {
        0.5
    } else {
        a / (a + b)
    }
}

pub fn fuse_predictions(p: &[f64], p_f: &[f64]) -> Vec<f64> {
    let alpha = fusion_alpha(p, p_f);
    p.iter()
        .zip(p_f)
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect()
}

/// Row-wise fusion on the graph. The weights are computed from the current
/// values and enter as constants.
pub fn fuse_graph(g: &mut Graph, p: Var, p_f: Var, fusion: Fusion) -> Result<Var> {
    if fusion == Fusion::TimeOnly {
        return Ok(p);
    }
    let (tp, tf) = (g.value(p).clone(), g.value(p_f).clone());
    if tp.shape() != tf.shape() || tp.rank() != 2 {
        return Err(Error::shape("fuse", format!("{:?} vs {:?}", tp.shape(), tf.shape())));
    }
    let rows = tp.shape()[0];
    let alpha: Vec<f64> = (0..rows).map(|i| fusion_alpha(tp.row(i), tf.row(i))).collect();
    let beta: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
    let a = g.constant(Tensor::new(vec![rows, 1], alpha)?);
    let b = g.constant(Tensor::new(vec![rows, 1], beta)?);
    let wp = g.mul(p, a)?;
    let wf = g.mul(p_f, b)?;
    g.add(wp, wf)
}

/// Eval-mode outputs of both branches for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub time_probs: Tensor,
    pub freq_probs: Tensor,
    pub fused: Tensor,
    pub time_features: Tensor,
    pub freq_features: Tensor,
}

pub fn predict(model: &DualBranchModel, x: &Tensor, fusion: Fusion) -> Result<Prediction> {
    Ok(predict_mode(model, x, fusion, Mode::Eval)?.0)
}

/// Both branches and their fusion in `mode`, with the per-branch batch
/// statistics (time, then frequency) measured in train mode.
pub fn predict_mode(
    model: &DualBranchModel,
    x: &Tensor,
    fusion: Fusion,
    mode: Mode,
) -> Result<(Prediction, [Vec<BatchStats>; 2])> {
    let xf = frequency_input(x)?;
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let xfv = g.constant(xf);
    let seeded = |s: u64| match mode {
        Mode::Train {
            dropout_seed: Some(d),
        } => Mode::Train {
            dropout_seed: Some(mix(&[d, s])),
        },
        m => m,
    };
    let ot = model.branch_graph(&mut g, &bound, Branch::Time, xv, seeded(0))?;
    let of = model.branch_graph(&mut g, &bound, Branch::Freq, xfv, seeded(1))?;
    let fused = fuse_graph(&mut g, ot.probs, of.probs, fusion)?;
    let pred = Prediction {
        time_probs: g.value(ot.probs).clone(),
        freq_probs: g.value(of.probs).clone(),
        fused: g.value(fused).clone(),
        time_features: g.value(ot.features).clone(),
        freq_features: g.value(of.features).clone(),
    };
    Ok((pred, [ot.stats, of.stats]))
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fused eval-mode predictions for every sample of `ds`.
pub fn predict_dataset(model: &DualBranchModel, ds: &Dataset, fusion: Fusion) -> Result<Prediction> {
    check_compatible(&model.arch, ds)?;
    let mut parts: Vec<Prediction> = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(64) {
        parts.push(predict(model, &ds.batch_tensor(chunk), fusion)?);
    }
    let cat = |f: fn(&Prediction) -> &Tensor| -> Result<Tensor> {
        let w = f(&parts[0]).shape()[1];
        let data: Vec<f64> = parts.iter().flat_map(|p| f(p).data().iter().copied()).collect();
        Tensor::new(vec![ds.len(), w], data)
    };
    Ok(Prediction {
        time_probs: cat(|p| &p.time_probs)?,
        freq_probs: cat(|p| &p.freq_probs)?,
        fused: cat(|p| &p.fused)?,
        time_features: cat(|p| &p.time_features)?,
        freq_features: cat(|p| &p.freq_features)?,
    })
}

pub fn predict_labels(model: &DualBranchModel, ds: &Dataset, fusion: Fusion) -> Result<Vec<usize>> {
    let p = predict_dataset(model, ds, fusion)?;
    Ok((0..ds.len()).map(|i| argmax(p.fused.row(i))).collect())
}

pub fn check_compatible(arch: &Arch, ds: &Dataset) -> Result<()> {
    let m = &ds.meta;
    if m.channels != arch.channels || m.length != arch.length || m.classes != arch.classes {
        return Err(Error::InvalidArgument(format!(
            "model expects {}x{} samples with {} classes, dataset has {}x{} with {}",
            arch.channels, arch.length, arch.classes, m.channels, m.length, m.classes
        )));
    }
    Ok(())
}

/// `alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &ParamSet, student: &ParamSet, alpha: f64) -> Result<ParamSet> {
    teacher.ensure_compatible(student, "ema_update")?;
    let mut out = teacher.clone();
    for (name, t) in out.iter_mut() {
        let s = student.require(name)?;
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudent {
    pub teacher: DualBranchModel,
    pub student: DualBranchModel,
    pub ema_alpha: f64,
}

impl TeacherStudent {
    pub fn new(source: &DualBranchModel, ema_alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema_alpha) {
            return Err(Error::InvalidArgument(format!("ema_alpha {ema_alpha} outside [0, 1]")));
        }
        Ok(Self {
            teacher: source.clone(),
            student: source.clone(),
            ema_alpha,
        })
    }

    /// Moves the teacher's parameters toward the student's.
    pub fn ema_step(&mut self) -> Result<()> {
        self.teacher.params = ema_update(&self.teacher.params, &self.student.params, self.ema_alpha)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Mean of `-ln p[i, y_i]` with the log clamped.
pub fn cross_entropy_graph(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let py = g.pick(probs, labels)?;
    let lp = g.log_clamped(py, LOG_EPS);
    let m = g.mean(lp);
    Ok(g.scale(m, -1.0))
}

/// Supervised training of both branches on labelled source data with
/// `CE(fused) + CE(time) + CE(freq)`. Returns the model and the loss of
/// every step.
pub fn pretrain_source(
    model: &DualBranchModel,
    source: &Dataset,
    cfg: &PretrainConfig,
) -> Result<(DualBranchModel, Vec<f64>)> {
    check_compatible(&model.arch, source)?;
    let labels = source
        .labels()
        .ok_or_else(|| Error::InvalidArgument("source pretraining needs labels".into()))?;
    let mut model = model.clone();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut moments = AdamMoments::zeros_like(&model.params);
    let mut losses = Vec::new();
    let mut t = 0;
    for epoch in 0..cfg.epochs {
        for (step, idx) in batches(source.len(), cfg.batch_size, cfg.seed, epoch as u64)
            .into_iter()
            .enumerate()
        {
            if idx.len() < 2 {
                continue;
            }
            let x = source.batch_tensor(&idx);
            let xf = frequency_input(&x)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, true);
            let seed = mix(&[cfg.seed, epoch as u64, step as u64]);
            let xv = g.constant(x);
            let xfv = g.constant(xf);
            let ot = model.branch_graph(&mut g, &bound, Branch::Time, xv, Mode::Train {
                dropout_seed: Some(mix(&[seed, 0])),
            })?;
            let of = model.branch_graph(&mut g, &bound, Branch::Freq, xfv, Mode::Train {
                dropout_seed: Some(mix(&[seed, 1])),
            })?;
            let fused = fuse_graph(&mut g, ot.probs, of.probs, Fusion::Confidence)?;
            let l0 = cross_entropy_graph(&mut g, fused, &y)?;
            let l1 = cross_entropy_graph(&mut g, ot.probs, &y)?;
            let l2 = cross_entropy_graph(&mut g, of.probs, &y)?;
            let s = g.add(l0, l1)?;
            let loss = g.add(s, l2)?;
            let value = g.item(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    component: format!("pretrain loss at epoch {epoch}, step {step}"),
                });
            }
            let grads = g.backward(loss)?;
            let grads = model.params.collect_grads(&bound, &grads);
            t += 1;
            let (p, m) = adam_step(&model.params, &grads, &moments, &adam, t)?;
            model.params = p;
            moments = m;
            model.update_running_stats(Branch::Time, &ot.stats, BN_MOMENTUM)?;
            model.update_running_stats(Branch::Freq, &of.stats, BN_MOMENTUM)?;
            losses.push(value);
        }
    }
    Ok((model, losses))
}

impl DualBranchModel {
    /// Arch header (magic, `u32` LE dims, `f64` LE dropout) followed by the
    /// parameter and buffer tensors.
    pub fn to_bytes(&self) -> Vec<u8> {
        let a = &self.arch;
        let mut out = MODEL_MAGIC.to_vec();
        for v in [
            a.channels,
            a.length,
            a.classes,
            a.widths[0],
            a.widths[1],
            a.widths[2],
            a.kernel,
            a.proj_hidden,
            a.proj_dim,
        ] {
            out.extend((v as u32).to_le_bytes());
        }
        out.extend(a.dropout.to_le_bytes());
        let mut all = self.params.clone();
        for (k, v) in self.buffers.iter() {
            all.insert(k, v.clone()).expect("buffer names are distinct from parameter names");
        }
        out.extend(all.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::InvalidArgument(format!("model file: {d}"));
        let header = MODEL_MAGIC.len() + 9 * 4 + 8;
        if bytes.len() < header || &bytes[..8] != MODEL_MAGIC {
            return Err(bad("missing header"));
        }
        let u = |i: usize| {
            let o = 8 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        };
        let dropout = f64::from_le_bytes(bytes[44..52].try_into().expect("8 bytes"));
        let arch = Arch {
            channels: u(0),
            length: u(1),
            classes: u(2),
            widths: [u(3), u(4), u(5)],
            kernel: u(6),
            proj_hidden: u(7),
            proj_dim: u(8),
            dropout,
        };
        let template = build_model(&arch, 0)?;
        let mut all = ParamSet::from_bytes(&bytes[header..])?;
        let mut buffers = ParamSet::new();
        for name in template.buffers.names() {
            let t = all.remove(name).ok_or_else(|| bad(&format!("missing `{name}`")))?;
            buffers.insert(name, t)?;
        }
        template.params.ensure_compatible(&all, "load_model")?;
        template.buffers.ensure_compatible(&buffers, "load_model")?;
        Ok(Self {
            arch,
            params: all,
            buffers,
        })
    }
}

pub fn save_model(model: &DualBranchModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<DualBranchModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DualBranchModel::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
