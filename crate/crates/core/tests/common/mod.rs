#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use u2pl::config::EvalModel;
use u2pl::losses::cross_entropy;
use u2pl::partition::argmax;
use u2pl::rng::{stream, Stream};
use u2pl::sampling::SamplingConfig;
use u2pl::tensor::GridDims;
use u2pl::trainer::data::generate_for_run;
use u2pl::trainer::model::ToyModel;
use u2pl::trainer::{model_shape, METRICS_HEADER};
use u2pl::{LabelMap, ProbBatch, RunConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random point of the simplex, sometimes peaked, sometimes flat.
pub fn simplex<R: Rng>(rng: &mut R, classes: usize) -> Vec<f64> {
    let sharp = [0.2, 1.0, 5.0][rng.gen_range(0..3)];
    let w: Vec<f64> = (0..classes).map(|_| (sharp * rng.gen_range(-3.0..3.0f64)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Probabilities for a random batch; some pixels are copies of earlier ones
/// so that ties in entropy and rank occur.
pub fn prob_batch<R: Rng>(rng: &mut R, dims: GridDims, classes: usize) -> ProbBatch {
    let mut probs: Vec<f64> = Vec::with_capacity(dims.pixels() * classes);
    for px in 0..dims.pixels() {
        if px > 0 && rng.gen_bool(0.1) {
            let j = rng.gen_range(0..px);
            let copy = probs[j * classes..(j + 1) * classes].to_vec();
            probs.extend(copy);
        } else if rng.gen_bool(0.05) {
            probs.extend(std::iter::repeat_n(1.0 / classes as f64, classes));
        } else {
            probs.extend(simplex(rng, classes));
        }
    }
    ProbBatch::new(dims, classes, probs).unwrap()
}

/// Quantile by explicit sort and interpolation between neighbours.
pub fn quantile_oracle(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let i = pos as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    let t = pos - i as f64;
    v[i] * (1.0 - t) + v[i + 1] * t
}

/// Rank of `class` in a descending sort that breaks ties by index.
pub fn rank_oracle(p: &[f64], class: usize) -> usize {
    (0..p.len())
        .filter(|&k| p[k] > p[class] || (p[k] == p[class] && k < class))
        .count()
}

/// Entropy in nats, kept inside its range `[0, ln C]`.
pub fn entropy_oracle(p: &[f64]) -> f64 {
    let h = -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
    h.max(0.0).min((p.len() as f64).ln())
}

/// Central difference of `f` along every coordinate of `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error, with an absolute floor for near-zero entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

fn plan<R: Rng>(pool: &[usize], steps: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let need = steps * batch;
    let mut flat = pool.to_vec();
    if pool.len() >= need {
        flat.shuffle(rng);
        flat.truncate(need);
    } else {
        flat = (0..need).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
    }
    flat.chunks(batch).map(|c| c.to_vec()).collect()
}

fn miou(pred: &[i32], truth: &[i32], classes: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..classes as i32 {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        if tp + fp + fneg > 0 {
            ious.push(tp as f64 / (tp + fp + fneg) as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

/// Plain labeled-only training written out step by step, producing the
/// metrics CSV a run with no unlabeled terms should produce.
pub fn supervised_reference_csv(cfg: &RunConfig) -> String {
    let (train, val) = generate_for_run(cfg).unwrap();
    let mut student = ToyModel::init(model_shape(cfg), &mut stream(cfg.seed, Stream::Init));
    let mut teacher = student.clone();
    let mut velocity = vec![0.0; student.params().len()];
    let mut batches = stream(cfg.seed, Stream::LabeledBatch);
    let n_l = train.labeled.len();
    let steps = n_l.max(cfg.images - n_l).div_ceil(cfg.batch_size);
    let total = steps * cfg.epochs;
    let mut iter = 0;
    let mut updates = 0;
    let val_x = val.gather_features(&(0..val.images()).collect::<Vec<_>>());

    let mut csv = format!("{METRICS_HEADER}\n");
    for epoch in 0..cfg.epochs {
        let mut first_lr = 0.0;
        let mut loss_sum = 0.0;
        for (k, batch) in plan(&train.labeled, steps, cfg.batch_size, &mut batches).iter().enumerate() {
            let lr = cfg.base_lr * (1.0 - iter as f64 / total as f64).powf(0.9);
            if k == 0 {
                first_lr = lr;
            }
            let x = train.gather_features(batch);
            let y = train.gather_labels(batch);
            let act = student.forward(&x);
            let ce = cross_entropy(&act.logits, cfg.classes, y.as_slice()).unwrap();
            loss_sum += ce.value;
            let mut g = student.backward(&x, &act, &ce.grad, None);
            for (gi, &p) in g.iter_mut().zip(student.params()) {
                *gi += cfg.weight_decay * p;
            }
            if cfg.sgd_momentum > 0.0 {
                for (v, gi) in velocity.iter_mut().zip(g.iter_mut()) {
                    *v = cfg.sgd_momentum * *v + *gi;
                    *gi = *v;
                }
            }
            for (p, gi) in student.params_mut().iter_mut().zip(&g) {
                *p -= lr * gi;
            }
            let m = if epoch < cfg.warm_start {
                0.0
            } else {
                updates += 1;
                (1.0 - 1.0 / updates as f64).min(cfg.ema_momentum)
            };
            for (t, s) in teacher.params_mut().iter_mut().zip(student.params()) {
                *t = m * *t + (1.0 - m) * s;
            }
            iter += 1;
        }
        let model = match cfg.eval_model {
            EvalModel::Student => &student,
            EvalModel::Teacher => &teacher,
        };
        let pred: Vec<i32> = model
            .forward(&val_x)
            .logits
            .chunks(cfg.classes)
            .map(|row| argmax(row) as i32)
            .collect();
        let alpha = cfg.alpha0 * (1.0 - epoch as f64 / cfg.epochs as f64);
        csv.push_str(&format!(
            "{epoch},{first_lr:.6},{alpha:.6},NaN,{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            0.0,
            loss_sum / steps as f64,
            0.0,
            0.0,
            miou(&pred, val.labels.as_slice(), cfg.classes)
        ));
    }
    csv
}

/// Every `(class, source, pixel)` negative, source 0 labeled and 1 unlabeled,
/// found by testing each pair directly.
pub fn brute_force_negatives(
    y: &LabelMap,
    p_l: &ProbBatch,
    p_u: &ProbBatch,
    gamma: f64,
    cfg: &SamplingConfig,
) -> BTreeSet<(usize, u8, usize)> {
    let c_n = p_l.classes();
    let mut set = BTreeSet::new();
    for c in 0..c_n {
        for i in 0..p_l.pixels() {
            if y.as_slice()[i] != c as i32 && rank_oracle(p_l.pixel(i), c) < cfg.r_l {
                set.insert((c, 0, i));
            }
        }
        for i in 0..p_u.pixels() {
            let rank = rank_oracle(p_u.pixel(i), c);
            let h = entropy_oracle(p_u.pixel(i));
            if h > gamma && cfg.r_l <= rank && rank < cfg.r_h.min(c_n) {
                set.insert((c, 1, i));
            }
        }
    }
    set
}
