//! Teacher-student training on the synthetic task.
//!
//! Each step draws `B` labeled and `B` unlabeled images. The teacher supplies
//! probabilities, the entropy partition, positive centers and negatives; the
//! student supplies logits and the gradient-carrying anchor representations.
//! After the gradient step the teacher follows the student by EMA.

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod model;
pub mod schedule;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ContrastiveLoss, EvalModel, GammaScope, RunConfig};
use crate::error::{Error, Result};
use crate::losses::{bce_alternative, cross_entropy, info_nce, ContrastiveClass};
use crate::memorybank::MemoryBank;
use crate::partition::{
    adaptive_weight, assign_pseudo_labels_with, compute_entropy, dpa_alpha, entropy_threshold,
    reliable_fraction, EntropyMap,
};
use crate::rng::{stream, Stream};
use crate::sampling::{
    category_order, collect_negatives, negative_indicator_labeled,
    negative_indicator_unlabeled_with, positive_center, sample_anchors, AnchorSet, CategoryOrder,
    NegativeMasks, PixelRef, Source,
};
use crate::tensor::{LabelMap, ProbBatch, ReprBatch};

use data::SyntheticDataset;
use metrics::MiouReport;
use model::{Activations, ModelShape, ToyModel};
use schedule::{ema_update, poly_lr, ramped_momentum};

pub const METRICS_HEADER: &str = "epoch,lr,alpha_t,gamma_t,lambda_u,loss_s,loss_u,loss_c,miou_val";

pub fn model_shape(cfg: &RunConfig) -> ModelShape {
    ModelShape {
        input: cfg.feature_dim,
        hidden: cfg.hidden,
        classes: cfg.classes,
        repr: cfg.repr_dim,
    }
}

#[derive(Debug, Clone)]
struct Streams {
    labeled: ChaCha8Rng,
    unlabeled: ChaCha8Rng,
    anchors: ChaCha8Rng,
    bank: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: ToyModel,
    pub teacher: ToyModel,
    velocity: Vec<f64>,
    pub epoch: usize,
    pub total_epochs: usize,
    /// Gradient steps taken so far.
    pub iteration: usize,
    /// Teacher updates since warm start ended.
    teacher_updates: usize,
    pub bank: MemoryBank,
    pub seed: u64,
    streams: Streams,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let student = ToyModel::init(model_shape(cfg), &mut stream(cfg.seed, Stream::Init));
        let bank = MemoryBank::with_background(
            cfg.repr_dim,
            cfg.classes,
            cfg.background_class,
            cfg.bank_background,
            cfg.bank_foreground,
        )?;
        Ok(Self {
            teacher: student.clone(),
            velocity: vec![0.0; student.params().len()],
            student,
            epoch: 0,
            total_epochs: cfg.epochs,
            iteration: 0,
            teacher_updates: 0,
            bank,
            seed: cfg.seed,
            streams: Streams {
                labeled: stream(cfg.seed, Stream::LabeledBatch),
                unlabeled: stream(cfg.seed, Stream::UnlabeledBatch),
                anchors: stream(cfg.seed, Stream::AnchorSampling),
                bank: stream(cfg.seed, Stream::BankSampling),
            },
        })
    }

    pub fn eval_model(&self, which: EvalModel) -> &ToyModel {
        match which {
            EvalModel::Student => &self.student,
            EvalModel::Teacher => &self.teacher,
        }
    }
}

/// Image indices for every step of one epoch.
///
/// When the pool covers the epoch's demand the images are a fresh
/// permutation; otherwise they are drawn uniformly with replacement.
pub fn batch_plan<R: Rng>(pool: &[usize], steps: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    if pool.is_empty() {
        return vec![Vec::new(); steps];
    }
    let demand = steps * batch;
    let flat: Vec<usize> = if pool.len() >= demand {
        let mut p = pool.to_vec();
        p.shuffle(rng);
        p.truncate(demand);
        p
    } else {
        (0..demand).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    };
    flat.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Per-epoch averages plus counters used by tests and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub alpha: f64,
    /// Mean threshold over steps that computed one, NaN if none did.
    pub gamma: f64,
    /// Mean adaptive weight over semi-supervised steps, 0 if none.
    pub lambda_u: f64,
    pub loss_s: f64,
    pub loss_u: f64,
    pub loss_c: f64,
    pub steps: usize,
    pub semi_steps: usize,
    pub anchors: usize,
    pub labeled_negatives: usize,
    pub unlabeled_negatives: usize,
    pub skipped: usize,
    /// Smallest per-batch reliable fraction, 1 if no partition ran.
    pub min_reliable_fraction: f64,
}

impl EpochStats {
    fn new(epoch: usize, alpha: f64) -> Self {
        Self {
            epoch,
            lr: 0.0,
            alpha,
            gamma: 0.0,
            lambda_u: 0.0,
            loss_s: 0.0,
            loss_u: 0.0,
            loss_c: 0.0,
            steps: 0,
            semi_steps: 0,
            anchors: 0,
            labeled_negatives: 0,
            unlabeled_negatives: 0,
            skipped: 0,
            min_reliable_fraction: 1.0,
        }
    }

    fn finish(&mut self) {
        let n = self.steps.max(1) as f64;
        self.loss_s /= n;
        self.loss_u /= n;
        self.loss_c /= n;
        if self.semi_steps > 0 {
            self.gamma /= self.semi_steps as f64;
            self.lambda_u /= self.semi_steps as f64;
        } else {
            self.gamma = f64::NAN;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub stats: EpochStats,
    pub miou_val: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let s = &self.stats;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            s.epoch, s.lr, s.alpha, s.gamma, s.lambda_u, s.loss_s, s.loss_u, s.loss_c, self.miou_val
        )
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in history {
        writeln!(out, "{}", row.csv_row()).unwrap();
    }
    out
}

/// Teacher outputs on one batch.
struct TeacherView {
    probs: ProbBatch,
    reprs: ReprBatch,
}

fn teacher_view(teacher: &ToyModel, data: &SyntheticDataset, images: usize, x: &[f64]) -> Result<TeacherView> {
    let act = teacher.forward(x);
    let dims = data.batch_dims(images);
    Ok(TeacherView {
        probs: ProbBatch::from_logits(dims, data.classes(), &act.logits)?,
        reprs: ReprBatch::new(dims, teacher.shape().repr, act.reprs)?,
    })
}

struct UnlabeledView {
    teacher: TeacherView,
    entropy: EntropyMap,
    gamma: f64,
    pseudo: LabelMap,
    order: CategoryOrder,
}

/// Gradients of the weighted contrastive term on student representations.
struct ContrastiveOut {
    value: f64,
    d_labeled: Vec<f64>,
    d_unlabeled: Vec<f64>,
}

fn invariant(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Invariant(msg()))
    }
}

#[allow(clippy::too_many_arguments)]
fn contrastive_step(
    state: &mut TrainState,
    cfg: &RunConfig,
    y_l: &LabelMap,
    t_l: &TeacherView,
    s_l: &Activations,
    unl: Option<(&UnlabeledView, &Activations)>,
    stats: &mut EpochStats,
) -> Result<ContrastiveOut> {
    let classes = cfg.classes;
    let samp = cfg.sampling();
    let dim = cfg.repr_dim;
    let order_l = category_order(&t_l.probs);

    let anchors = AnchorSet::build(
        Some((y_l, &t_l.probs)),
        unl.map(|(u, _)| (&u.pseudo, &u.teacher.probs)),
        classes,
        cfg.delta_p,
    );

    let masks_l: Vec<Vec<bool>> = (0..classes)
        .map(|c| negative_indicator_labeled(y_l, &order_l, c, &samp))
        .collect();
    let masks_u: Option<Vec<Vec<bool>>> = unl.map(|(u, _)| {
        (0..classes)
            .map(|c| {
                negative_indicator_unlabeled_with(
                    cfg.negative_filter,
                    &u.entropy,
                    u.gamma,
                    &u.order,
                    c,
                    &samp,
                )
            })
            .collect()
    });
    let negatives = collect_negatives(
        Some(NegativeMasks {
            masks: &masks_l,
            reprs: &t_l.reprs,
        }),
        match (&masks_u, unl) {
            (Some(m), Some((u, _))) => Some(NegativeMasks {
                masks: m,
                reprs: &u.teacher.reprs,
            }),
            _ => None,
        },
        classes,
    )?;
    stats.labeled_negatives += negatives.count_from(Source::Labeled);
    stats.unlabeled_negatives += negatives.count_from(Source::Unlabeled);

    let student_repr = |at: &PixelRef| -> &[f64] {
        let (reprs, px) = match at.source {
            Source::Labeled => (&s_l.reprs, at.pixel),
            Source::Unlabeled => (&unl.expect("unlabeled anchor without batch").1.reprs, at.pixel),
        };
        &reprs[px * dim..(px + 1) * dim]
    };
    let teacher_repr = |at: &PixelRef| -> &[f64] {
        match at.source {
            Source::Labeled => t_l.reprs.pixel(at.pixel),
            Source::Unlabeled => unl.expect("unlabeled anchor without batch").0.teacher.reprs.pixel(at.pixel),
        }
    };

    if cfg.check_invariants {
        for (c, cands) in anchors.per_class.iter().enumerate() {
            for a in cands {
                let (labels, probs) = match a.source {
                    Source::Labeled => (y_l, &t_l.probs),
                    Source::Unlabeled => {
                        let u = unl.unwrap().0;
                        (&u.pseudo, &u.teacher.probs)
                    }
                };
                invariant(
                    labels.get(a.pixel) == Some(c) && probs.pixel(a.pixel)[c] > cfg.delta_p,
                    || format!("anchor {a:?} of class {c} fails its predicate"),
                )?;
                if let (Source::Unlabeled, Some((u, _))) = (a.source, unl) {
                    invariant(u.entropy.as_slice()[a.pixel] < u.gamma, || {
                        format!("unlabeled anchor {a:?} is not reliable")
                    })?;
                }
            }
        }
        let r_h = samp.effective_r_h(classes);
        for (c, negs) in negatives.per_class.iter().enumerate() {
            for n in negs {
                let ok = match n.at.source {
                    Source::Labeled => {
                        y_l.get(n.at.pixel) != Some(c) && order_l.rank(n.at.pixel, c) < cfg.r_l
                    }
                    Source::Unlabeled => {
                        let u = unl.unwrap().0;
                        let r = u.order.rank(n.at.pixel, c);
                        cfg.negative_filter
                            .admits(u.entropy.as_slice()[n.at.pixel], u.gamma)
                            && cfg.r_l <= r
                            && r < r_h
                    }
                };
                invariant(ok, || format!("negative {:?} of class {c} fails its indicator", n.at))?;
            }
        }
    }

    for (c, negs) in negatives.per_class.iter().enumerate() {
        let vectors: Vec<&[f64]> = negs.iter().map(|n| n.vector.as_slice()).collect();
        state.bank.push(c, &vectors)?;
    }

    let bank = &state.bank;
    let streams = &mut state.streams;
    let mut terms = Vec::new();
    let mut owners: Vec<Vec<PixelRef>> = Vec::new();
    for c in 0..classes {
        let cands = &anchors.per_class[c];
        if cands.is_empty() {
            stats.skipped += 1;
            continue;
        }
        let sampled = sample_anchors(cands, cfg.anchors_per_class, &mut streams.anchors);
        let center_from: Vec<&[f64]> = cands.iter().map(teacher_repr).collect();
        let positive = match positive_center(&center_from) {
            Ok(p) => p,
            Err(_) => {
                stats.skipped += 1;
                continue;
            }
        };
        let mut per_anchor = Vec::with_capacity(sampled.len());
        for _ in &sampled {
            match bank.sample(c, cfg.negatives_per_anchor, &mut streams.bank) {
                Some(v) => per_anchor.push(v),
                None => break,
            }
        }
        if per_anchor.len() != sampled.len() {
            stats.skipped += 1;
            continue;
        }
        stats.anchors += sampled.len();
        terms.push(ContrastiveClass {
            anchors: sampled.iter().map(student_repr).collect::<Vec<&[f64]>>(),
            positive,
            negatives: per_anchor,
        });
        owners.push(sampled);
    }

    let loss = match cfg.contrastive_loss {
        ContrastiveLoss::Infonce => info_nce(&terms, cfg.tau)?,
        ContrastiveLoss::Bce => bce_alternative(&terms, cfg.tau)?,
    };
    let mut d_labeled = vec![0.0; s_l.reprs.len()];
    let mut d_unlabeled = vec![0.0; unl.map_or(0, |(_, s)| s.reprs.len())];
    for (slot, at) in owners.iter().flatten().enumerate() {
        let g = &loss.grad[slot * dim..(slot + 1) * dim];
        let target = match at.source {
            Source::Labeled => &mut d_labeled,
            Source::Unlabeled => &mut d_unlabeled,
        };
        for (t, &v) in target[at.pixel * dim..(at.pixel + 1) * dim].iter_mut().zip(g) {
            *t += cfg.lambda_c * v;
        }
    }
    Ok(ContrastiveOut {
        value: loss.value,
        d_labeled,
        d_unlabeled,
    })
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
}

fn epoch_gamma(teacher: &ToyModel, data: &SyntheticDataset, alpha: f64) -> Result<f64> {
    let x = data.gather_features(&data.unlabeled);
    let view = teacher_view(teacher, data, data.unlabeled.len(), &x)?;
    entropy_threshold(compute_entropy(&view.probs).as_slice(), alpha)
}

/// One pass of `cfg.steps_per_epoch()` steps. Advances `state.epoch`.
pub fn train_epoch(state: &mut TrainState, data: &SyntheticDataset, cfg: &RunConfig) -> Result<EpochStats> {
    if state.epoch >= state.total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {} beyond total {}",
            state.epoch, state.total_epochs
        )));
    }
    if data.classes() != cfg.classes || data.feature_dim != cfg.feature_dim {
        return Err(Error::Shape("dataset does not match configuration".into()));
    }
    let epoch = state.epoch;
    let steps = cfg.steps_per_epoch();
    let total_iters = steps * cfg.epochs;
    let alpha = dpa_alpha(cfg.alpha0, epoch, cfg.epochs)?;
    let semi = cfg.semi_supervised() && epoch >= cfg.warm_start;
    let classes = cfg.classes;
    let b = cfg.batch_size;

    let labeled_plan = batch_plan(&data.labeled, steps, b, &mut state.streams.labeled);
    let unlabeled_plan = if semi {
        batch_plan(&data.unlabeled, steps, b, &mut state.streams.unlabeled)
    } else {
        vec![Vec::new(); steps]
    };
    let fixed_gamma = match (semi && !data.unlabeled.is_empty(), cfg.gamma_scope) {
        (true, GammaScope::Epoch) => Some(epoch_gamma(&state.teacher, data, alpha)?),
        _ => None,
    };

    let mut stats = EpochStats::new(epoch, alpha);
    for (l_idx, u_idx) in labeled_plan.iter().zip(&unlabeled_plan) {
        let lr = poly_lr(cfg.base_lr, state.iteration, total_iters)?;
        if stats.steps == 0 {
            stats.lr = lr;
        }
        let x_l = data.gather_features(l_idx);
        let y_l = data.gather_labels(l_idx);
        let s_l = state.student.forward(&x_l);
        let sup = cross_entropy(&s_l.logits, classes, y_l.as_slice())?;
        let d_logits_l = sup.grad;
        let mut d_reprs_l: Option<Vec<f64>> = None;
        let mut loss_u = 0.0;
        let mut loss_c = 0.0;
        let mut lambda_u = 0.0;
        let mut unlabeled_grad: Option<(Vec<f64>, Activations, Vec<f64>, Option<Vec<f64>>)> = None;

        if semi {
            stats.semi_steps += 1;
            let t_l = teacher_view(&state.teacher, data, l_idx.len(), &x_l)?;
            let mut unl: Option<(UnlabeledView, Vec<f64>, Activations)> = None;
            if !u_idx.is_empty() {
                let x_u = data.gather_features(u_idx);
                let t_u = teacher_view(&state.teacher, data, u_idx.len(), &x_u)?;
                let entropy = compute_entropy(&t_u.probs);
                let gamma = match fixed_gamma {
                    Some(g) => g,
                    None => entropy_threshold(entropy.as_slice(), alpha)?,
                };
                let pseudo = assign_pseudo_labels_with(&t_u.probs, &entropy, gamma);
                let frac = reliable_fraction(&pseudo);
                stats.min_reliable_fraction = stats.min_reliable_fraction.min(frac);
                if cfg.check_invariants && fixed_gamma.is_none() {
                    let n = pseudo.as_slice().len() as f64;
                    let mut sorted = entropy.as_slice().to_vec();
                    sorted.sort_by(f64::total_cmp);
                    let distinct = sorted.windows(2).all(|w| w[0] < w[1]);
                    invariant(!distinct || frac >= 1.0 - alpha - 1.0 / n - 1e-12, || {
                        format!("reliable fraction {frac} below 1 - alpha - 1/n at alpha {alpha}")
                    })?;
                }
                lambda_u = adaptive_weight(&pseudo, cfg.eta);
                stats.gamma += gamma;
                let s_u = state.student.forward(&x_u);
                let order = category_order(&t_u.probs);
                unl = Some((
                    UnlabeledView {
                        teacher: t_u,
                        entropy,
                        gamma,
                        pseudo,
                        order,
                    },
                    x_u,
                    s_u,
                ));
            }
            stats.lambda_u += lambda_u;

            let mut d_logits_u = None;
            if let Some((u, _, s_u)) = &unl {
                let ce = cross_entropy(&s_u.logits, classes, u.pseudo.as_slice())?;
                loss_u = ce.value;
                d_logits_u = Some(ce.grad.into_iter().map(|g| g * lambda_u).collect::<Vec<_>>());
            }

            let mut d_reprs_u = None;
            if cfg.lambda_c > 0.0 {
                let out = contrastive_step(
                    state,
                    cfg,
                    &y_l,
                    &t_l,
                    &s_l,
                    unl.as_ref().map(|(u, _, s)| (u, s)),
                    &mut stats,
                )?;
                loss_c = out.value;
                d_reprs_l = Some(out.d_labeled);
                if unl.is_some() {
                    d_reprs_u = Some(out.d_unlabeled);
                }
            }
            if let Some((_, x_u, s_u)) = unl {
                let n = s_u.logits.len();
                unlabeled_grad = Some((x_u, s_u, d_logits_u.unwrap_or_else(|| vec![0.0; n]), d_reprs_u));
            }
        }

        let total = sup.value + lambda_u * loss_u + cfg.lambda_c * loss_c;
        let mut grad = state.student.backward(&x_l, &s_l, &d_logits_l, d_reprs_l.as_deref());
        if let Some((x_u, s_u, d_logits_u, d_reprs_u)) = unlabeled_grad.take() {
            add_into(&mut grad, &state.student.backward(&x_u, &s_u, &d_logits_u, d_reprs_u.as_deref()));
        }
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let norm = state.student.params().iter().map(|p| p * p).sum::<f64>().sqrt();
            return Err(Error::NonFinite {
                epoch,
                step: stats.steps,
                detail: format!(
                    "L_s={} L_u={loss_u} L_c={loss_c} lambda_u={lambda_u} lr={lr} |theta_s|={norm}",
                    sup.value
                ),
            });
        }
        if cfg.weight_decay > 0.0 {
            for (g, &p) in grad.iter_mut().zip(state.student.params()) {
                *g += cfg.weight_decay * p;
            }
        }
        if cfg.sgd_momentum > 0.0 {
            for (v, &g) in state.velocity.iter_mut().zip(&grad) {
                *v = cfg.sgd_momentum * *v + g;
            }
            grad.copy_from_slice(&state.velocity);
        }
        for (p, &g) in state.student.params_mut().iter_mut().zip(&grad) {
            *p -= lr * g;
        }

        let m = if epoch < cfg.warm_start {
            0.0
        } else {
            let m = ramped_momentum(state.teacher_updates, cfg.ema_momentum);
            state.teacher_updates += 1;
            m
        };
        ema_update(state.teacher.params_mut(), state.student.params(), m)?;

        state.iteration += 1;
        stats.steps += 1;
        stats.loss_s += sup.value;
        stats.loss_u += loss_u;
        stats.loss_c += loss_c;
    }
    stats.finish();
    state.epoch += 1;
    Ok(stats)
}

/// Pixel predictions of `model` over the listed images.
pub fn predict(model: &ToyModel, data: &SyntheticDataset, images: &[usize]) -> Vec<i32> {
    model.predict(&data.gather_features(images))
}

pub fn evaluate_miou(model: &ToyModel, data: &SyntheticDataset, images: &[usize]) -> Result<MiouReport> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let pred = predict(model, data, images);
    let truth = data.gather_labels(images);
    Ok(metrics::miou(&pred, truth.as_slice(), data.classes()))
}

/// Teacher representations of every image in `data`, as `[n, H, W, D]`.
pub fn representations(model: &ToyModel, data: &SyntheticDataset) -> Result<ReprBatch> {
    let images: Vec<usize> = (0..data.images()).collect();
    let act = model.forward(&data.gather_features(&images));
    ReprBatch::new(data.batch_dims(images.len()), model.shape().repr, act.reprs)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: TrainState,
    pub history: Vec<EpochMetrics>,
}

impl RunOutput {
    pub fn final_miou(&self) -> f64 {
        self.history.last().map_or(0.0, |h| h.miou_val)
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.history)
    }
}

/// Trains for `cfg.epochs` epochs, evaluating on `val` after each.
pub fn run_on(cfg: &RunConfig, train: &SyntheticDataset, val: &SyntheticDataset) -> Result<RunOutput> {
    let mut state = TrainState::new(cfg)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let val_images: Vec<usize> = (0..val.images()).collect();
    for _ in 0..cfg.epochs {
        let stats = train_epoch(&mut state, train, cfg)?;
        let miou = evaluate_miou(state.eval_model(cfg.eval_model), val, &val_images)?.mean;
        history.push(EpochMetrics {
            stats,
            miou_val: miou,
        });
    }
    Ok(RunOutput { state, history })
}

pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, val) = data::generate_for_run(cfg)?;
    run_on(cfg, &train, &val)
}
