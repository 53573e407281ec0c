//! Source-free adaptation loop and the complexity bench.
//!
//! Only a pretrained model and target samples enter the loop. Target labels,
//! when present, are used for reporting macro-F1 and nothing else.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::augment::{permute_jitter, stream_id, AugPolicy};
use crate::curriculum::CurriculumState;
use crate::data::{batches, generate_synthetic, Dataset, ShiftSpec};
use crate::diffcore::{adam_step, l2_normalize, AdamConfig, AdamMoments, Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{
    class_balanced_ce_graph, combined_contrastive_graph, consistency_kl_graph, info_nce_graph,
    label_propagation_graph, total_loss_graph, tsallis_uncertainty_graph, Coefficients, LossBundle, KL_EPS,
};
use crate::metrics::macro_f1;
use crate::model::{
    build_model, check_compatible, forward_branch, frequency_input, predict_labels, predict_mode,
    project_joint, Arch, Branch, DualBranchModel, Fusion, Mode, TeacherStudent,
};
use crate::pseudo::{MemoryBank, TemporalQueue};
use crate::rng::mix;
use crate::select::{partition, prediction_stats, thresholds};
use crate::spectral::{random_freq_view, Spectrum};

const NORM_EPS: f64 = 1e-12;
const VIEW_STRONG_QUERY: u64 = 100;
const VIEW_STRONG_KEY: u64 = 101;
const VIEW_FREQ_QUERY: u64 = 102;
const VIEW_FREQ_KEY: u64 = 103;

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` resolves to `min(N, 1024)`.
    pub bank_capacity: Option<usize>,
    pub queue_capacity: usize,
    /// Epochs of pseudo-label history kept per queue entry.
    pub history_len: usize,
    pub neighbors: usize,
    /// Weak views per sample for the uncertainty estimate.
    pub views: usize,
    pub temperature: f64,
    pub lr: f64,
    pub ema_alpha: f64,
    pub seed: u64,
    pub weak: AugPolicy,
    pub strong: AugPolicy,
    /// Bins removed (and possibly re-added) in a frequency view.
    pub freq_aug_count: usize,
    pub freq_aug_scale: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub tsallis_a: f64,
    pub curriculum: CurriculumState,
    /// When false the frequency branch is ignored: time-only fusion and no
    /// frequency, joint, or consistency terms.
    pub use_freq: bool,
    pub bn_momentum: f64,
    /// Record wall-clock seconds in the report (otherwise 0).
    pub timing: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            bank_capacity: None,
            queue_capacity: 512,
            history_len: 5,
            neighbors: 10,
            views: 4,
            temperature: 0.07,
            lr: 1e-6,
            ema_alpha: 0.999,
            seed: 0,
            weak: AugPolicy::weak(0),
            strong: AugPolicy::strong(0),
            freq_aug_count: 1,
            freq_aug_scale: 0.1,
            alpha1: 0.5,
            alpha2: 0.5,
            tsallis_a: 2.0,
            curriculum: CurriculumState::default(),
            use_freq: true,
            bn_momentum: 0.1,
            timing: false,
        }
    }
}

impl AdaptConfig {
    pub fn bank_capacity_for(&self, n: usize) -> usize {
        self.bank_capacity.unwrap_or(n.min(1024))
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let m = self.bank_capacity_for(n);
        if self.batch_size == 0 || self.queue_capacity == 0 || self.history_len == 0 || self.neighbors == 0 {
            return bad("batch_size, queue_capacity, history_len and neighbors must be >= 1".into());
        }
        if m == 0 || self.neighbors > m {
            return bad(format!("neighbors {} exceeds bank capacity {m}", self.neighbors));
        }
        if self.neighbors > n {
            return bad(format!("neighbors {} exceeds target size {n}", self.neighbors));
        }
        if self.views < 2 {
            return bad("views must be >= 2".into());
        }
        if !(self.temperature > 0.0) || !(self.lr > 0.0) || !(self.tsallis_a > 1.0) {
            return bad("temperature > 0, lr > 0 and tsallis_a > 1 required".into());
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("ema_alpha and bn_momentum must lie in [0, 1]".into());
        }
        self.weak.validate()?;
        self.strong.validate()?;
        Ok(())
    }

    fn fusion(&self) -> Fusion {
        if self.use_freq {
            Fusion::Confidence
        } else {
            Fusion::TimeOnly
        }
    }
}

/// Everything the loop carries between batches.
#[derive(Clone, Debug)]
pub struct AdaptState {
    pub ts: TeacherStudent,
    pub bank: MemoryBank,
    /// Time, frequency, and joint negative queues.
    pub queues: [TemporalQueue; 3],
    pub curriculum: CurriculumState,
    pub moments: AdamMoments,
    pub step: u64,
}

impl AdaptState {
    pub fn new(source: &DualBranchModel, n: usize, cfg: &AdaptConfig) -> Result<Self> {
        let arch = &source.arch;
        let d = arch.feature_dim();
        let q = |dim| TemporalQueue::new(cfg.queue_capacity, cfg.history_len, dim);
        Ok(Self {
            ts: TeacherStudent::new(source, cfg.ema_alpha)?,
            bank: MemoryBank::new(cfg.bank_capacity_for(n), d, arch.classes)?,
            queues: [q(d)?, q(d)?, q(arch.proj_dim)?],
            curriculum: cfg.curriculum.clone(),
            moments: AdamMoments::zeros_like(&source.params),
            step: 0,
        })
    }

    /// Fills the bank with eval-mode teacher outputs over the whole target
    /// set, in index order.
    pub fn warm_up(&mut self, target: &Dataset, cfg: &AdaptConfig) -> Result<()> {
        let idx: Vec<usize> = (0..target.len()).collect();
        for chunk in idx.chunks(cfg.batch_size) {
            let (p, _) = predict_mode(&self.ts.teacher, &target.batch_tensor(chunk), cfg.fusion(), Mode::Eval)?;
            self.bank.update(&p.time_features, &p.fused)?;
        }
        Ok(())
    }
}

fn strong_batch(x: &Tensor, ids: &[usize], policy: &AugPolicy, seed: u64, epoch: u64, view: u64) -> Result<Tensor> {
    let ch = x.shape()[1];
    let per = ch * x.shape()[2];
    let mut data = Vec::with_capacity(x.numel());
    for (i, &id) in ids.iter().enumerate() {
        let sid = stream_id(seed, epoch, id as u64, view);
        data.extend(permute_jitter(&x.data()[i * per..(i + 1) * per], ch, policy, sid));
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn freq_view_batch(x: &Tensor, ids: &[usize], cfg: &AdaptConfig, epoch: u64, view: u64) -> Result<Tensor> {
    let (b, ch, s) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let per = ch * s;
    let mut data = Vec::with_capacity(b * ch * (s / 2 + 1));
    for (i, &id) in ids.iter().enumerate() {
        let spec = Spectrum::of_sample(&x.data()[i * per..(i + 1) * per], ch)?;
        let sid = stream_id(cfg.seed, epoch, id as u64, view);
        data.extend(random_freq_view(&spec, cfg.freq_aug_count, cfg.freq_aug_scale, sid).into_magnitudes());
    }
    Tensor::new(vec![b, ch, s / 2 + 1], data)
}

/// Negatives kept for each query: entries that never shared the query's
/// pseudo-label at a common epoch, minus the query's own entry.
fn included_negatives(q: &TemporalQueue, ids: &[usize], labels: &[usize], epoch: u64) -> Vec<Vec<usize>> {
    let t = q.history_len() as u64;
    ids.iter()
        .zip(labels)
        .map(|(&id, &y)| {
            let mut h: Vec<(u64, usize)> = q
                .history_of(id)
                .map(<[_]>::to_vec)
                .unwrap_or_default()
                .into_iter()
                .filter(|&(e, _)| e != epoch && e + t > epoch)
                .collect();
            h.push((epoch, y));
            q.exclusion_set(&h)
                .into_iter()
                .filter(|&j| q.entry(j).id != id)
                .collect()
        })
        .collect()
}

/// Per-batch results.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome {
    pub losses: LossBundle,
    pub tau_c: f64,
    pub tau_u: f64,
    pub pseudo_labels: Vec<usize>,
    pub reliable: usize,
}

/// One optimisation step on the target samples `ids`.
pub fn adapt_batch(
    state: &mut AdaptState,
    target: &Dataset,
    ids: &[usize],
    cfg: &AdaptConfig,
    epoch: u64,
    batch: u64,
) -> Result<BatchOutcome> {
    let fusion = cfg.fusion();
    let x = target.batch_tensor(ids);
    let batch_mode = Mode::Train { dropout_seed: None };

    // Teacher: clean and weak views, refined pseudo-labels, reliability split.
    let teacher = &state.ts.teacher;
    let vs = prediction_stats(teacher, &x, ids, cfg.views, &cfg.weak, cfg.seed, epoch, batch_mode, fusion)?;
    let weak0 = &vs.views[0];
    let labels = (0..ids.len())
        .map(|i| Ok(state.bank.refine(weak0.time_features.row(i), cfg.neighbors)?.label))
        .collect::<Result<Vec<usize>>>()?;
    let (tau_c, tau_u) = thresholds(&vs.confidences, &vs.uncertainties)?;
    let part = partition(&vs.confidences, &vs.uncertainties, tau_c, tau_u, &labels)?;

    // Contrastive views and detached teacher keys.
    let xs_q = strong_batch(&x, ids, &cfg.strong, cfg.seed, epoch, VIEW_STRONG_QUERY)?;
    let xs_k = strong_batch(&x, ids, &cfg.strong, cfg.seed, epoch, VIEW_STRONG_KEY)?;
    let key_time = l2_normalize(&forward_branch(teacher, Branch::Time, &xs_k, batch_mode)?.0, NORM_EPS);
    let freq_views = if cfg.use_freq {
        let xf_q = freq_view_batch(&x, ids, cfg, epoch, VIEW_FREQ_QUERY)?;
        let xf_k = freq_view_batch(&x, ids, cfg, epoch, VIEW_FREQ_KEY)?;
        let key_freq = l2_normalize(&forward_branch(teacher, Branch::Freq, &xf_k, batch_mode)?.0, NORM_EPS);
        let key_joint = project_joint(teacher, &vs.clean.freq_features, Branch::Freq)?;
        Some((xf_q, key_freq, key_joint))
    } else {
        None
    };
    let inc_time = included_negatives(&state.queues[0], ids, &labels, epoch);

    // Student graph.
    let student = &state.ts.student;
    let mut g = Graph::new();
    let bound = student.params.bind(&mut g, true);
    let dseed = mix(&[cfg.seed, epoch, batch]);
    let train = |k: u64| Mode::Train {
        dropout_seed: Some(mix(&[dseed, k])),
    };
    let xv = g.constant(x.clone());
    let ot = student.branch_graph(&mut g, &bound, Branch::Time, xv, train(0))?;
    let of = if cfg.use_freq {
        let xfv = g.constant(frequency_input(&x)?);
        Some(student.branch_graph(&mut g, &bound, Branch::Freq, xfv, train(1))?)
    } else {
        None
    };
    let fused = match &of {
        Some(of) => crate::model::fuse_graph(&mut g, ot.probs, of.probs, fusion)?,
        None => ot.probs,
    };

    let zero = g.scalar(0.0);
    let ce = if part.reliable.is_empty() {
        zero
    } else {
        let yr: Vec<usize> = part.reliable.iter().map(|&i| labels[i]).collect();
        let mut counts = vec![0usize; student.arch.classes];
        yr.iter().for_each(|&y| counts[y] += 1);
        let fr = g.select_rows(fused, &part.reliable)?;
        class_balanced_ce_graph(&mut g, fr, &yr, &counts)?
    };
    let lp = if part.non_reliable.is_empty() {
        zero
    } else {
        let yn: Vec<usize> = part.non_reliable.iter().map(|&i| labels[i]).collect();
        let fnr = g.select_rows(fused, &part.non_reliable)?;
        label_propagation_graph(&mut g, fnr, &yn)?
    };

    let xsv = g.constant(xs_q);
    let qt = student.branch_graph(&mut g, &bound, Branch::Time, xsv, train(2))?;
    let qt = g.l2_normalize(qt.features, NORM_EPS);
    let kt = g.constant(key_time.clone());
    let negt = g.constant(state.queues[0].keys_transposed());
    let cl_time = info_nce_graph(&mut g, qt, kt, negt, &inc_time, cfg.temperature)?;

    let (cl_freq, cl_tf, cons) = match (&freq_views, &of) {
        (Some((xf_q, key_freq, _)), Some(of)) => {
            let inc_freq = included_negatives(&state.queues[1], ids, &labels, epoch);
            let inc_joint = included_negatives(&state.queues[2], ids, &labels, epoch);
            let xfq = g.constant(xf_q.clone());
            let qf = student.branch_graph(&mut g, &bound, Branch::Freq, xfq, train(3))?;
            let qf = g.l2_normalize(qf.features, NORM_EPS);
            let kf = g.constant(key_freq.clone());
            let negf = g.constant(state.queues[1].keys_transposed());
            let cl_freq = info_nce_graph(&mut g, qf, kf, negf, &inc_freq, cfg.temperature)?;

            let zj = student.projector_graph(&mut g, &bound, Branch::Time, ot.features)?;
            let zjf = student.projector_graph(&mut g, &bound, Branch::Freq, of.features)?;
            let negj = g.constant(state.queues[2].keys_transposed());
            let cl_tf = info_nce_graph(&mut g, zj, zjf, negj, &inc_joint, cfg.temperature)?;
            let cons = consistency_kl_graph(&mut g, ot.probs, of.probs, KL_EPS)?;
            (cl_freq, cl_tf, cons)
        }
        _ => (zero, zero, zero),
    };
    let cl = combined_contrastive_graph(&mut g, cl_time, cl_freq, cl_tf, cfg.alpha1, cfg.alpha2)?;
    let ul = tsallis_uncertainty_graph(&mut g, fused, cfg.tsallis_a)?;
    let coeffs = state.curriculum.coefficients();
    let all = total_loss_graph(&mut g, [ce, lp, cl, cons, ul], &coeffs)?;

    let losses = LossBundle {
        ce: g.item(ce),
        lp: g.item(lp),
        cl_time: g.item(cl_time),
        cl_freq: g.item(cl_freq),
        cl_tf: g.item(cl_tf),
        cl: g.item(cl),
        cons: g.item(cons),
        ul: g.item(ul),
        all: g.item(all),
    };
    if let Some(name) = losses.first_non_finite() {
        return Err(Error::NonFinite {
            component: format!("{name} (epoch {epoch}, batch {batch})"),
        });
    }

    // Student step, teacher EMA, running statistics.
    let grads = g.backward(all)?;
    let grads = student.params.collect_grads(&bound, &grads);
    state.step += 1;
    let (params, moments) = adam_step(
        &state.ts.student.params,
        &grads,
        &state.moments,
        &AdamConfig::with_lr(cfg.lr),
        state.step,
    )?;
    let student_time_stats = ot.stats;
    let student_freq_stats = of.map(|o| o.stats);
    state.moments = moments;
    state.ts.student.params = params;
    state.ts.student.update_running_stats(Branch::Time, &student_time_stats, cfg.bn_momentum)?;
    if let Some(s) = student_freq_stats {
        state.ts.student.update_running_stats(Branch::Freq, &s, cfg.bn_momentum)?;
    }
    let [t_stats, f_stats] = &vs.clean_stats;
    state.ts.teacher.update_running_stats(Branch::Time, t_stats, cfg.bn_momentum)?;
    state.ts.teacher.update_running_stats(Branch::Freq, f_stats, cfg.bn_momentum)?;
    state.ts.ema_step()?;

    // Queues and bank.
    state.queues[0].record(ids, &key_time, &labels, epoch)?;
    if let Some((_, key_freq, key_joint)) = &freq_views {
        state.queues[1].record(ids, key_freq, &labels, epoch)?;
        state.queues[2].record(ids, key_joint, &labels, epoch)?;
    }
    state.bank.update(&weak0.time_features, &weak0.fused)?;

    Ok(BatchOutcome {
        losses,
        tau_c,
        tau_u,
        pseudo_labels: labels,
        reliable: part.reliable.len(),
    })
}

/// Aggregates of one pass over the target set.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochOutcome {
    /// Sample-weighted mean of the batch losses.
    pub losses: LossBundle,
    pub tau_c: f64,
    pub tau_u: f64,
    /// Coefficients in force during the epoch.
    pub coefficients: Coefficients,
}

/// One epoch over shuffled batches, then the curriculum update.
pub fn adapt_epoch(state: &mut AdaptState, target: &Dataset, cfg: &AdaptConfig, epoch: u64) -> Result<EpochOutcome> {
    let coefficients = state.curriculum.coefficients();
    let mut losses = LossBundle::default();
    let (mut tc, mut tu) = (0.0, 0.0);
    let plan = batches(target.len(), cfg.batch_size, cfg.seed, epoch);
    let nb = plan.len() as f64;
    for (b, ids) in plan.iter().enumerate() {
        let out = adapt_batch(state, target, ids, cfg, epoch, b as u64)?;
        losses.add_scaled(&out.losses, ids.len() as f64 / target.len() as f64);
        tc += out.tau_c / nb;
        tu += out.tau_u / nb;
    }
    state.curriculum = state.curriculum.step_mu_r(tc, tu)?.decay_aux();
    Ok(EpochOutcome {
        losses,
        tau_c: tc,
        tau_u: tu,
        coefficients,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBundle,
    pub coefficients: Coefficients,
    pub tau_c: f64,
    pub tau_u: f64,
    /// Teacher macro-F1 on the evaluation set, NaN without labels.
    pub macro_f1: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptReport {
    pub epochs: Vec<EpochRecord>,
}

pub const REPORT_HEADER: &str =
    "epoch,ce,lp,cl_time,cl_freq,cl_tf,cl,cons,ul,all,mu_r,mu_c,mu_cons,mu_u,tau_c,tau_u,macro_f1,seconds";

impl AdaptReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let c = &r.coefficients;
            let _ = write!(s, "{}", r.epoch);
            for v in r.losses.values() {
                let _ = write!(s, ",{v}");
            }
            for v in [c.mu_r, c.mu_c, c.mu_cons, c.mu_u, r.tau_c, r.tau_u, r.macro_f1, r.seconds] {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Macro-F1 of the teacher's fused eval-mode prediction.
pub fn evaluate(model: &DualBranchModel, ds: &Dataset, fusion: Fusion) -> Result<f64> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::InvalidArgument("evaluation needs a labeled dataset".into()))?;
    let pred = predict_labels(model, ds, fusion)?;
    Ok(macro_f1(labels, &pred, model.arch.classes)?.macro_f1)
}

/// Adapts `source` to the unlabeled `target` samples. `eval`, when given
/// and labeled, is scored after every epoch.
pub fn run_adaptation(
    source: &DualBranchModel,
    target: &Dataset,
    cfg: &AdaptConfig,
    eval: Option<&Dataset>,
) -> Result<(TeacherStudent, AdaptReport)> {
    check_compatible(&source.arch, target)?;
    if let Some(e) = eval {
        check_compatible(&source.arch, e)?;
    }
    cfg.validate(target.len())?;
    let mut state = AdaptState::new(source, target.len(), cfg)?;
    let mut report = AdaptReport::default();
    if cfg.epochs == 0 {
        return Ok((state.ts, report));
    }
    state.warm_up(target, cfg)?;
    for e in 1..=cfg.epochs {
        let start = Instant::now();
        let out = adapt_epoch(&mut state, target, cfg, e as u64)?;
        let seconds = if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 };
        let f1 = match eval {
            Some(ds) if ds.is_labeled() => evaluate(&state.ts.teacher, ds, cfg.fusion())?,
            _ => f64::NAN,
        };
        report.epochs.push(EpochRecord {
            epoch: e,
            losses: out.losses,
            coefficients: out.coefficients,
            tau_c: out.tau_c,
            tau_u: out.tau_u,
            macro_f1: f1,
            seconds,
        });
    }
    Ok((state.ts, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub seconds: f64,
    pub per_sample: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    /// Per-sample time at the largest N exceeds the smallest N's by > 25%.
    pub nonlinear: bool,
}

impl BenchTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,seconds,per_sample\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.n, r.seconds, r.per_sample);
        }
        s
    }
}

/// Times `run_adaptation` on synthetic targets of each size in `sizes`.
/// Epochs are fixed, and the bank and queue capacities are capped at the
/// smallest size so every run works with full stores of the same size.
pub fn bench_complexity(arch: &Arch, sizes: &[usize], cfg: &AdaptConfig) -> Result<BenchTable> {
    let smallest = *sizes
        .iter()
        .min()
        .ok_or_else(|| Error::InvalidArgument("bench needs at least one size".into()))?;
    let smallest = (smallest / arch.classes).max(1) * arch.classes;
    let cfg = &AdaptConfig {
        bank_capacity: Some(cfg.bank_capacity_for(smallest).min(smallest)),
        queue_capacity: cfg.queue_capacity.min(smallest),
        ..cfg.clone()
    };
    let model = build_model(arch, cfg.seed)?;
    let mut rows = Vec::new();
    for &n in sizes {
        let per_class = (n / arch.classes).max(1);
        let ds = generate_synthetic(arch.classes, arch.channels, arch.length, per_class, &ShiftSpec::identity(), cfg.seed)?
            .without_labels();
        let start = Instant::now();
        run_adaptation(&model, &ds, cfg, None)?;
        let seconds = start.elapsed().as_secs_f64();
        let samples = (ds.len() * cfg.epochs.max(1)) as f64;
        rows.push(BenchRow {
            n: ds.len(),
            seconds,
            per_sample: seconds / samples,
        });
    }
    let lo = rows.iter().min_by_key(|r| r.n).expect("non-empty");
    let hi = rows.iter().max_by_key(|r| r.n).expect("non-empty");
    let nonlinear = hi.per_sample > 1.25 * lo.per_sample;
    Ok(BenchTable { rows, nonlinear })
}
