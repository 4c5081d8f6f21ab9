//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::collections::{BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::Rng;

use common::*;
use u2pl::losses::{bce_alternative, cross_entropy, info_nce, ContrastiveClass};
use u2pl::memorybank::MemoryBank;
use u2pl::partition::{
    adaptive_weight, assign_pseudo_labels_with, compute_entropy, dpa_alpha, entropy, entropy_threshold,
    reliable_fraction,
};
use u2pl::rng::{stream, Stream};
use u2pl::sampling::{
    category_order, collect_negatives, negative_indicator_labeled, negative_indicator_unlabeled,
    NegativeMasks, SamplingConfig, Source,
};
use u2pl::tensor::{GridDims, Tensor, TensorData};
use u2pl::trainer::ablation::{ablate_reliability, AblationMode};
use u2pl::trainer::run;
use u2pl::trainer::schedule::poly_lr;
use u2pl::{LabelMap, ReprBatch, RunConfig, IGNORE};

const REFERENCE: &str = include_str!("../../../configs/reference.toml");

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;
type ContrastiveLoss = fn(&[ContrastiveClass], f64) -> u2pl::Result<u2pl::losses::LossOutput>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_vec<R: Rng>(r: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn anchors_replaced(classes: &[ContrastiveClass], flat: &[f64], d: usize) -> Vec<ContrastiveClass> {
    let mut out = classes.to_vec();
    let mut k = 0;
    for c in &mut out {
        for a in &mut c.anchors {
            a.copy_from_slice(&flat[k * d..(k + 1) * d]);
            k += 1;
        }
    }
    out
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        let c = r.gen_range(2..9);
        let rows = r.gen_range(1..8);
        let logits: Vec<f64> = (0..rows * c).map(|_| r.gen_range(-5.0..5.0)).collect();
        let targets: Vec<i32> =
            (0..rows).map(|_| if r.gen_bool(0.15) { IGNORE } else { r.gen_range(0..c as i32) }).collect();
        let out = cross_entropy(&logits, c, &targets).map_err(|e| e.to_string())?;
        let fd = numeric_grad(&logits, 1e-6, |x| cross_entropy(x, c, &targets).unwrap().value);
        worst[0] = worst[0].max(max_rel_err(&out.grad, &fd));

        let d = r.gen_range(2..9);
        let classes: Vec<ContrastiveClass> = (0..r.gen_range(1..4))
            .map(|_| {
                let m = r.gen_range(1..4);
                let n = r.gen_range(1..8);
                ContrastiveClass {
                    anchors: (0..m).map(|_| random_vec(&mut r, d)).collect(),
                    positive: random_vec(&mut r, d),
                    negatives: (0..m).map(|_| (0..n).map(|_| random_vec(&mut r, d)).collect()).collect(),
                }
            })
            .collect();
        let tau = r.gen_range(0.1..1.0);
        let flat: Vec<f64> = classes.iter().flat_map(|c| c.anchors.iter().flatten().copied()).collect();
        let losses: [(usize, ContrastiveLoss); 2] = [(1, info_nce), (2, bce_alternative)];
        for (slot, loss) in losses {
            let out = loss(&classes, tau).map_err(|e| e.to_string())?;
            let fd = numeric_grad(&flat, 1e-6, |x| loss(&anchors_replaced(&classes, x, d), tau).unwrap().value);
            worst[slot] = worst[slot].max(max_rel_err(&out.grad, &fd));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst.iter().all(|&w| w < 1e-4), || format!("max relative error {worst:?}"))?;
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "100 instances each, max rel err ce {:.1e} infonce {:.1e} bce {:.1e}, {secs:.2}s",
        worst[0], worst[1], worst[2]
    ))
}

fn quantile() -> Outcome {
    let mut r = rng(102);
    let mut worst = 0.0f64;
    let mut distinct_maps = 0;
    let mut worst_frac = 0.0f64;
    for _ in 0..1000 {
        let dims = GridDims::new(r.gen_range(1..3), r.gen_range(1..12), r.gen_range(1..12));
        let c = r.gen_range(2..8);
        let p = prob_batch(&mut r, dims, c);
        let e = compute_entropy(&p);
        let alpha = if r.gen_bool(0.05) { 0.0 } else { r.gen_range(0.0..1.0) };
        let gamma = entropy_threshold(e.as_slice(), alpha).map_err(|e| e.to_string())?;
        if alpha == 0.0 {
            ensure(gamma == f64::INFINITY, || "alpha 0 must give an infinite threshold".into())?;
        } else {
            worst = worst.max((gamma - quantile_oracle(e.as_slice(), 1.0 - alpha)).abs());
        }
        let values: BTreeSet<u64> = e.as_slice().iter().map(|v| v.to_bits()).collect();
        if values.len() == dims.pixels() {
            distinct_maps += 1;
            let frac = reliable_fraction(&assign_pseudo_labels_with(&p, &e, gamma));
            let dev = (frac - (1.0 - alpha)).abs();
            let bound = 1.0 / dims.pixels() as f64;
            ensure(dev < bound, || format!("reliable fraction off by {dev} > {bound} at alpha {alpha}"))?;
            worst_frac = worst_frac.max(dev / bound);
        }
    }
    ensure(worst <= 1e-12, || format!("threshold differs from oracle by {worst:e}"))?;
    ensure(distinct_maps > 100, || format!("only {distinct_maps} maps had distinct entropies"))?;
    Ok(format!(
        "1000 maps, max |gamma - oracle| {worst:.1e}, {distinct_maps} distinct maps, worst deviation {worst_frac:.2} of 1/(BHW)"
    ))
}

fn negatives() -> Outcome {
    let mut r = rng(103);
    let mut total = 0;
    for _ in 0..200 {
        let c_n = r.gen_range(2..=8);
        let dims = GridDims::new(1, r.gen_range(1..=16), r.gen_range(1..=16));
        let r_l = r.gen_range(1..=c_n);
        let cfg = SamplingConfig {
            r_l,
            r_h: r.gen_range(r_l..=c_n + 4),
            ..SamplingConfig::default()
        };
        let p_l = prob_batch(&mut r, dims, c_n);
        let p_u = prob_batch(&mut r, dims, c_n);
        let labels = (0..dims.pixels()).map(|_| r.gen_range(0..c_n as i32)).collect();
        let y = LabelMap::new(dims, c_n, labels).map_err(|e| e.to_string())?;
        let e_u = compute_entropy(&p_u);
        let gamma = entropy_threshold(e_u.as_slice(), r.gen_range(0.0..1.0)).map_err(|e| e.to_string())?;
        let z_l = ReprBatch::new(dims, 2, random_vec(&mut r, dims.pixels() * 2)).map_err(|e| e.to_string())?;
        let z_u = ReprBatch::new(dims, 2, random_vec(&mut r, dims.pixels() * 2)).map_err(|e| e.to_string())?;
        let (o_l, o_u) = (category_order(&p_l), category_order(&p_u));
        let m_l: Vec<Vec<bool>> = (0..c_n).map(|c| negative_indicator_labeled(&y, &o_l, c, &cfg)).collect();
        let m_u: Vec<Vec<bool>> =
            (0..c_n).map(|c| negative_indicator_unlabeled(&e_u, gamma, &o_u, c, &cfg)).collect();
        let got = collect_negatives(
            Some(NegativeMasks { masks: &m_l, reprs: &z_l }),
            Some(NegativeMasks { masks: &m_u, reprs: &z_u }),
            c_n,
        )
        .map_err(|e| e.to_string())?;
        let mut got_set = BTreeSet::new();
        for (c, negs) in got.per_class.iter().enumerate() {
            for n in negs {
                let (tag, z) = match n.at.source {
                    Source::Labeled => (0u8, &z_l),
                    Source::Unlabeled => (1u8, &z_u),
                };
                ensure(n.vector.as_slice() == z.pixel(n.at.pixel), || "negative vector mismatch".into())?;
                ensure(got_set.insert((c, tag, n.at.pixel)), || "duplicate negative".into())?;
            }
        }
        let want = brute_force_negatives(&y, &p_l, &p_u, gamma, &cfg);
        ensure(got_set == want, || {
            format!("{} negatives selected, brute force found {}", got_set.len(), want.len())
        })?;
        total += want.len();
    }
    Ok(format!("200 instances, {total} negatives, exact set equality"))
}

fn landmarks() -> Outcome {
    let sym = ContrastiveClass {
        anchors: vec![vec![1.0, 0.0]],
        positive: vec![1.0, 1.0],
        negatives: vec![vec![vec![1.0, -1.0]]],
    };
    let v = info_nce(&[sym], 0.5).map_err(|e| e.to_string())?.value;
    ensure((v - 2f64.ln()).abs() <= 1e-9, || format!("symmetric InfoNCE {v}"))?;

    let mut r = rng(104);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = r.gen_range(2..10);
        let class = ContrastiveClass {
            anchors: vec![random_vec(&mut r, d)],
            positive: random_vec(&mut r, d),
            negatives: vec![vec![random_vec(&mut r, d)]],
        };
        let tau = r.gen_range(0.05..2.0);
        let a = info_nce(std::slice::from_ref(&class), tau).map_err(|e| e.to_string())?.value;
        let b = bce_alternative(std::slice::from_ref(&class), tau).map_err(|e| e.to_string())?.value;
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-12, || format!("bce and InfoNCE differ by {worst:e} at N=1"))?;

    for c in 2..=64 {
        let logits = vec![0.37; 3 * c];
        let v = cross_entropy(&logits, c, &[0, (c - 1) as i32, 1]).map_err(|e| e.to_string())?.value;
        ensure((v - (c as f64).ln()).abs() <= 1e-9, || format!("uniform CE {v} for C={c}"))?;
    }
    Ok(format!("InfoNCE {v:.12} = ln 2, bce/InfoNCE gap {worst:.1e}, uniform CE = ln C for C in 2..=64"))
}

fn schedules() -> Outcome {
    for total in [1usize, 2, 40, 80, 1000] {
        for alpha0 in [0.0, 0.2, 1.0] {
            ensure(dpa_alpha(alpha0, 0, total).unwrap() == alpha0, || "alpha_0 endpoint".into())?;
            ensure(dpa_alpha(alpha0, total, total).unwrap() == 0.0, || "alpha end".into())?;
        }
        ensure(poly_lr(0.01, 0, total).unwrap() == 0.01, || "lr start".into())?;
        ensure(poly_lr(0.01, total, total).unwrap() == 0.0, || "lr end".into())?;
    }
    for total in [2usize, 80, 1000] {
        let mid = poly_lr(0.01, total / 2, total).unwrap();
        ensure((mid - 0.01 * 0.5f64.powf(0.9)).abs() <= 1e-12, || format!("midpoint {mid}"))?;
    }
    let dims = GridDims::new(2, 4, 4);
    let reliable = LabelMap::new(dims, 3, (0..32).map(|i| i % 3).collect()).unwrap();
    let ignored = LabelMap::new(dims, 3, vec![IGNORE; 32]).unwrap();
    for eta in [0.5, 1.0, 3.0] {
        ensure(adaptive_weight(&reliable, eta) == eta, || "all-reliable weight".into())?;
        ensure(adaptive_weight(&ignored, eta) == 0.0, || "all-ignore weight".into())?;
    }
    Ok("alpha and lr endpoints exact, lr midpoint within 1e-12, lambda_u = eta / 0".into())
}

fn memory_bank() -> Outcome {
    let mut r = rng(106);
    for _ in 0..100 {
        let cap = r.gen_range(1..40);
        let dim = r.gen_range(1..5);
        let mut bank = MemoryBank::new(dim, vec![cap]).map_err(|e| e.to_string())?;
        let mut replay: VecDeque<Vec<f64>> = VecDeque::new();
        let mut pushed = 0;
        while pushed < cap || r.gen_bool(0.5) {
            let batch: Vec<Vec<f64>> = (0..r.gen_range(0..cap + 5)).map(|_| random_vec(&mut r, dim)).collect();
            pushed += batch.len();
            bank.push(0, &batch).map_err(|e| e.to_string())?;
            replay.extend(batch);
        }
        let want: Vec<Vec<f64>> = replay.iter().skip(replay.len() - cap).cloned().collect();
        let got: Vec<Vec<f64>> = bank.iter(0).map(<[f64]>::to_vec).collect();
        ensure(got == want, || format!("bank contents differ after {pushed} pushes into capacity {cap}"))?;

        let n = r.gen_range(1..2 * cap + 2);
        let seed = r.gen();
        let a = bank.sample(0, n, &mut stream(seed, Stream::BankSampling));
        let b = bank.sample(0, n, &mut stream(seed, Stream::BankSampling));
        ensure(a == b, || "sampling is not deterministic".into())?;
        ensure(a.map(|s| s.len()) == Some(n), || "wrong sample size".into())?;
    }
    Ok("100 push sequences match replay, sampling repeatable".into())
}

fn ablation() -> Outcome {
    let base = RunConfig::from_toml_str(REFERENCE).map_err(|e| e.to_string())?;
    let modes = AblationMode::ALL;
    let seeds: Vec<u64> = (0..5).collect();
    let start = Instant::now();
    let table = ablate_reliability(&base, &modes, &seeds).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let mean = |m: &str| table.mean(m.parse().unwrap()).unwrap() * 100.0;
    let (u, rel, all, sup) = (mean("unreliable"), mean("reliable"), mean("all"), mean("supervised"));
    let summary = format!(
        "mIoU unreliable {u:.2}, reliable {rel:.2}, all {all:.2}, supervised {sup:.2}; {secs:.0}s"
    );
    ensure(u >= rel + 1.0 && u >= sup + 1.0 && secs < 900.0, || summary.clone())?;
    Ok(summary)
}

fn degenerate_equivalence() -> Outcome {
    let base = RunConfig::from_toml_str(REFERENCE).map_err(|e| e.to_string())?;
    for seed in 0..3 {
        let cfg = RunConfig {
            eta: 0.0,
            lambda_c: 0.0,
            seed,
            ..base.clone()
        };
        let got = run(&cfg).map_err(|e| e.to_string())?.metrics_csv();
        let want = supervised_reference_csv(&cfg);
        ensure(got == want, || format!("metrics differ at seed {seed}"))?;
    }
    Ok("reference config, seeds 0..3, byte-identical metrics CSV".into())
}

fn format_round_trip() -> Outcome {
    let mut r = rng(109);
    let mut zero = 0;
    let mut bytes_u8 = 0;
    for i in 0..1000 {
        let ndim = r.gen_range(0..=4);
        let shape: Vec<usize> = (0..ndim).map(|_| r.gen_range(if i % 10 == 0 { 0 } else { 1 }..5)).collect();
        let n: usize = shape.iter().product();
        let data = match r.gen_range(0..4) {
            0 => TensorData::F32((0..n).map(|_| f32::from_bits(r.gen())).collect()),
            1 => TensorData::F64((0..n).map(|_| f64::from_bits(r.gen())).collect()),
            2 => TensorData::I32((0..n).map(|_| r.gen()).collect()),
            _ => {
                bytes_u8 += 1;
                TensorData::U8((0..n).map(|_| r.gen()).collect())
            }
        };
        if n == 0 {
            zero += 1;
        }
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        let bytes = t.to_bytes();
        let back = Tensor::read_from(bytes.as_slice()).map_err(|e| e.to_string())?;
        ensure(back.to_bytes() == bytes && back.shape() == t.shape() && back.dtype() == t.dtype(), || {
            format!("tensor {i} changed in a round trip")
        })?;
    }
    ensure(zero > 0 && bytes_u8 > 0, || "missing zero-element or u8 cases".into())?;
    Ok(format!("1000 tensors bit-exact, {zero} zero-element, {bytes_u8} u8"))
}

fn entropy_bounds() -> Outcome {
    let mut r = rng(110);
    for _ in 0..10_000 {
        let c = r.gen_range(2..=32);
        let p = simplex(&mut r, c);
        let h = entropy(&p);
        ensure((0.0..=(c as f64).ln()).contains(&h), || format!("H = {h} outside [0, ln {c}]"))?;
    }
    for c in 2..=32 {
        let mut onehot = vec![0.0; c];
        onehot[c / 2] = 1.0;
        ensure(entropy(&onehot) == 0.0, || format!("one-hot entropy for C={c}"))?;
        let h = entropy(&vec![1.0 / c as f64; c]);
        ensure((h - (c as f64).ln()).abs() <= 1e-12, || format!("uniform entropy {h} for C={c}"))?;
    }
    Ok("10000 pixels within [0, ln C]; one-hot = 0 and uniform = ln C for C in 2..=32".into())
}

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("gradient correctness", gradients),
        ("quantile oracle", quantile),
        ("negative-selection oracle", negatives),
        ("loss landmarks", landmarks),
        ("schedules", schedules),
        ("memory bank", memory_bank),
        ("directional ablation", ablation),
        ("degenerate-config equivalence", degenerate_equivalence),
        ("tensor format", format_round_trip),
        ("entropy bounds", entropy_bounds),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
