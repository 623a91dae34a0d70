//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs as a plain binary (`harness = false`).

mod common;

use std::time::{Duration, Instant};

use common::*;
use pcs_core::classifier::DEFAULT_SOURCE_ONLY_EPOCHS;
use pcs_core::eval::{DEFAULT_KNN_K, DEFAULT_KNN_TAU};
use pcs_core::geometry::{cosine_sim, l2_normalize};
use pcs_core::losses::{empirical_mutual_information, mim_loss_exact, PriorTracker};
use pcs_core::{
    ablation_run, apcu_update, build_confidence_sets, classification_loss, cross_domain_loss,
    generate_synthetic_fuda, in_domain_proto_loss, mi_identity_check, mim_loss, purity,
    prototype_similarity_sum, read_checkpoint, spherical_kmeans, total_loss, train,
    weighted_knn_classify, write_checkpoint, write_metrics, ApcuBranch, ApcuConfig,
    ClassEstimates, Components, CosineClassifier, Domain, KMeansParams, LossWeights,
    SynthConfig, TrainConfig,
};
use rand::Rng;

const SEEDS: u64 = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let mut worst_name = "";
    for s in 0..20 {
        for (name, err) in gradient_errors(&grad_instance(1000 + s)) {
            if err > worst {
                worst = err;
                worst_name = name;
            }
        }
    }
    outcome(
        worst < 1e-4,
        format!("20 instances x 6 terms, worst relative error {worst:.2e} ({worst_name}), limit 1e-4"),
    )
}

// ---------------------------------------------------------------- 2

fn mi_identity() -> Outcome {
    let mut r = rng(2);
    let mut worst_gap = 0.0f64;
    let mut bounds_ok = true;
    for _ in 0..1000 {
        let n_c = r.random_range(2..=20);
        let n = r.random_range(1..=64);
        let batch: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut r, n_c)).collect();
        worst_gap = worst_gap.max(mi_identity_check(&batch));
        let mi = -mim_loss_exact(&batch).unwrap().value;
        let direct = empirical_mutual_information(&batch);
        bounds_ok &= mi >= -1e-12 && mi <= (n_c as f64).ln() + 1e-12 && (mi - direct).abs() < 1e-12;
    }
    outcome(
        worst_gap < 1e-10 && bounds_ok,
        format!("1000 batches, worst identity gap {worst_gap:.2e} (limit 1e-10), 0 <= I <= log n_c: {bounds_ok}"),
    )
}

// ---------------------------------------------------------------- 3

fn oracle_equivalence() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    let mut worst_name = "";
    let mut note = |name: &'static str, a: f64, b: f64| {
        let d = (a - b).abs();
        if d > worst {
            worst = d;
            worst_name = name;
        }
    };
    for _ in 0..100 {
        let d = r.random_range(2..=16);
        let k = r.random_range(1..=8);
        let n_c = r.random_range(2..=8);
        let batch = r.random_range(1..=8);
        let bank = 16;
        let phi = r.random_range(0.1..1.0);
        let tau = r.random_range(0.1..1.0);
        let temp = r.random_range(0.05..1.0);
        let feats: Vec<Vec<f64>> = (0..batch).map(|_| random_unit(&mut r, d)).collect();
        let idx: Vec<usize> = (0..batch).map(|_| r.random_range(0..bank)).collect();
        let models: Vec<_> = (0..r.random_range(1..=4))
            .map(|_| random_model(&mut r, k, bank, d, phi, Domain::Target))
            .collect();
        let protos: Vec<Vec<f64>> = (0..k).map(|_| random_unit(&mut r, d)).collect();
        let clf = random_classifier(&mut r, n_c, d, temp);
        let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..n_c)).collect();
        let mut prior = PriorTracker::uniform(n_c, 0.9);
        prior.update(&[random_simplex(&mut r, n_c)]).unwrap();

        let preds: Vec<Vec<f64>> = feats.iter().map(|f| clf.predict(f)).collect();
        let naive_preds: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| naive::predict(clf.columns(), clf.temperature(), f))
            .collect();
        for (p, q) in preds.iter().zip(&naive_preds) {
            for (a, b) in p.iter().zip(q) {
                note("classifier softmax", *a, *b);
            }
        }

        let ins = in_domain_proto_loss(&feats, &idx, &models, Domain::Target).unwrap();
        note("in-domain", ins.value, naive::in_domain(&feats, &idx, &models));
        let cross = cross_domain_loss(&feats, &protos, tau).unwrap();
        note("cross-domain", cross.value, naive::cross_domain(&feats, &protos, tau));
        let cls = classification_loss(&preds, &labels).unwrap();
        note("classification", cls.value, naive::classification(&naive_preds, &labels));
        let mim = mim_loss(&preds, &prior).unwrap();
        note("mim", mim.value, naive::mim(&naive_preds, prior.prior().unwrap()));
        let mim_x = mim_loss_exact(&preds).unwrap();
        note("mim (exact prior)", mim_x.value, naive::mim_exact(&naive_preds));
        let w = LossWeights {
            lambda_in: r.random_range(0.0..2.0),
            lambda_cross: r.random_range(0.0..2.0),
            lambda_mim: r.random_range(0.0..0.2),
        };
        let total = total_loss(
            &logits_to_features(&clf, &feats, cls.clone()),
            &ins,
            &cross,
            &logits_to_features(&clf, &feats, mim.clone()),
            &w,
        )
        .unwrap();
        let naive_total = naive::classification(&naive_preds, &labels)
            + w.lambda_in * naive::in_domain(&feats, &idx, &models)
            + w.lambda_cross * naive::cross_domain(&feats, &protos, tau)
            + w.lambda_mim * naive::mim(&naive_preds, prior.prior().unwrap());
        note("total", total.value, naive_total);
    }
    outcome(
        worst <= 1e-12,
        format!("100 instances, worst |fast - naive| {worst:.2e} ({worst_name}), limit 1e-12"),
    )
}

// ---------------------------------------------------------------- 4

/// `k` groups around mutually orthogonal centers; every member lies within
/// about 3.6 degrees of its center.
fn separated_mixture(seed: u64, k: usize, per_group: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let mut centers: Vec<Vec<f64>> = Vec::new();
    while centers.len() < k {
        let mut v = gaussian(&mut r, dim);
        for c in &centers {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(c) {
                *x -= p * y;
            }
        }
        if let Ok(u) = l2_normalize(&v) {
            centers.push(u);
        }
    }
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for (g, c) in centers.iter().enumerate() {
        for _ in 0..per_group {
            let noise = random_unit(&mut r, dim);
            let v: Vec<f64> = c.iter().zip(&noise).map(|(a, b)| a + 0.06 * b).collect();
            vectors.push(l2_normalize(&v).unwrap());
            labels.push(g);
        }
    }
    (vectors, labels)
}

fn clustering_recovery() -> Outcome {
    let mut min_purity = 1.0f64;
    let mut monotone = true;
    let (mut min_within, mut max_between) = (1.0f64, -1.0f64);
    for k in 2..=8 {
        for seed in 0..10 {
            let (vectors, labels) = separated_mixture(400 + 10 * k as u64 + seed, k, 20, 16);
            for i in 0..vectors.len() {
                for j in i + 1..vectors.len() {
                    let c = cosine_sim(&vectors[i], &vectors[j]);
                    if labels[i] == labels[j] {
                        min_within = min_within.min(c);
                    } else {
                        max_between = max_between.max(c);
                    }
                }
            }
            let model = spherical_kmeans(&vectors, k, seed, KMeansParams::default()).unwrap();
            min_purity = min_purity.min(purity(&model.assignments, &labels));
            monotone &= model.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12);
        }
    }
    let valid = min_within > 0.95 && max_between < 0.2;
    outcome(
        valid && min_purity == 1.0 && monotone,
        format!(
            "k=2..8 x 10 seeds (within cos >= {min_within:.3}, between cos <= {max_between:.3}): \
             min purity {min_purity}, inertia non-increasing: {monotone}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn apcu_behavior() -> Outcome {
    let e = |i: usize| {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    };
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    // Strict boundary: exactly t is not confident, just above is.
    let sets = build_confidence_sets(
        &[vec![0.9, 0.1], vec![0.9 + 1e-12, 0.1 - 1e-12]],
        &[vec![0.1, 0.9], vec![0.05, 0.95]],
        &[0, 1],
        2,
        0.9,
    )
    .unwrap();
    check("p = t excluded", sets.source_unlabeled[0] == vec![1]);
    check("p > t included", sets.target[1] == vec![1] && sets.target[0].is_empty());

    let mut clf = CosineClassifier::new(vec![e(0), e(1), e(2)], 0.05).unwrap();
    let est = ClassEstimates {
        source: vec![vec![2.0, 0.0, 0.0, 0.0], vec![0.0, 3.0, 0.0, 0.0], vec![0.0, 0.0, 0.5, 0.0]],
        target: vec![Some(vec![0.0, 0.0, 0.0, 4.0]), Some(vec![1.0, 1.0, 0.0, 0.0]), None],
        target_counts: vec![10, 9, 50],
    };
    let cfg = ApcuConfig {
        t_w: 10,
        source_only_epochs: DEFAULT_SOURCE_ONLY_EPOCHS,
    };
    check("warm-up default is 5 epochs", DEFAULT_SOURCE_ONLY_EPOCHS == 5);

    // Warm-up: every epoch < 5 takes the source branch regardless of counts.
    for epoch in 0..5 {
        let b = apcu_update(&mut clf, &est, &cfg, epoch).unwrap();
        check("warm-up uses source", b.iter().all(|&x| x == ApcuBranch::Source));
        check("source column is unit(w_s)", clf.columns()[0] == e(0) && clf.columns()[1] == e(1));
    }
    let b = apcu_update(&mut clf, &est, &cfg, 5).unwrap();
    check("count == t_w switches to target", b[0] == ApcuBranch::Target && clf.columns()[0] == e(3));
    let s = std::f64::consts::FRAC_1_SQRT_2;
    check("count < t_w stays on source", b[1] == ApcuBranch::Source && clf.columns()[1] == e(1));
    check("absent target estimate falls back", b[2] == ApcuBranch::Source && clf.columns()[2] == e(2));
    let cfg9 = ApcuConfig { t_w: 9, ..cfg };
    let b = apcu_update(&mut clf, &est, &cfg9, 6).unwrap();
    check("lower t_w switches class 1", b[1] == ApcuBranch::Target && close(&clf.columns()[1], &[s, s, 0.0, 0.0]));

    let n = failures.len();
    outcome(
        n == 0,
        if n == 0 {
            "both branches, strict threshold, absent-estimate fallback, 5-epoch warm-up: exact".to_string()
        } else {
            format!("failed: {}", failures.join("; "))
        },
    )
}

// ---------------------------------------------------------------- 6, 7, 8

struct Ladder {
    names: [&'static str; 5],
    means: [f64; 5],
    sim_trained: f64,
    sim_random: f64,
    so_pcs_time: Duration,
    total_time: Duration,
}

fn run_ladder() -> Ladder {
    let variants = [
        ("SO", Components::NONE),
        ("+InSelf", Components { in_self: true, ..Components::NONE }),
        ("+CrossSelf", Components { in_self: true, cross_self: true, ..Components::NONE }),
        ("+MIM", Components { apcu: false, ..Components::ALL }),
        ("PCS", Components::ALL),
    ];
    let mut means = [0.0; 5];
    let mut so_pcs_time = Duration::ZERO;
    let (mut sim_trained, mut sim_random) = (0.0, 0.0);
    let start = Instant::now();
    for (v, (_, enabled)) in variants.iter().enumerate() {
        let t = Instant::now();
        for seed in 0..SEEDS {
            let data = generate_synthetic_fuda(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
            let cfg = TrainConfig { seed, ..TrainConfig::default() };
            let (model, metrics) = ablation_run(&data, &cfg, *enabled).unwrap();
            means[v] += metrics.last().and_then(|m| m.target_acc).unwrap() / SEEDS as f64;
            if v == 4 {
                sim_trained += prototype_similarity_sum(model.classifier.columns()).unwrap() / SEEDS as f64;
                let random = CosineClassifier::random(data.n_classes(), cfg.feature_dim, cfg.temperature, 9000 + seed)
                    .unwrap();
                sim_random += prototype_similarity_sum(random.columns()).unwrap() / SEEDS as f64;
            }
        }
        if v == 0 || v == 4 {
            so_pcs_time += t.elapsed();
        }
    }
    Ladder {
        names: variants.map(|(n, _)| n),
        means,
        sim_trained,
        sim_random,
        so_pcs_time,
        total_time: start.elapsed(),
    }
}

fn end_to_end(l: &Ladder) -> Outcome {
    let (so, pcs) = (100.0 * l.means[0], 100.0 * l.means[4]);
    let ok = pcs >= 85.0 && pcs - so >= 10.0 && l.so_pcs_time < Duration::from_secs(180);
    outcome(
        ok,
        format!(
            "{SEEDS}-seed mean target accuracy PCS {pcs:.2}% vs SO {so:.2}% (+{:.2} points; need >= 85% and >= +10) [{:.1}s, limit 180s]",
            pcs - so,
            l.so_pcs_time.as_secs_f64()
        ),
    )
}

fn ablation_trend(l: &Ladder) -> Outcome {
    let steps_ok = l.means.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let ok = steps_ok && l.means[4] > l.means[0] && l.total_time < Duration::from_secs(900);
    let ladder: Vec<String> = l
        .names
        .iter()
        .zip(&l.means)
        .map(|(n, m)| format!("{n} {:.2}%", 100.0 * m))
        .collect();
    outcome(
        ok,
        format!(
            "{} (each step within 2 points, PCS > SO) [{:.1}s, limit 900s]",
            ladder.join(" <= "),
            l.total_time.as_secs_f64()
        ),
    )
}

fn prototype_quality(l: &Ladder) -> Outcome {
    outcome(
        l.sim_trained < l.sim_random,
        format!(
            "{SEEDS}-seed mean pairwise column similarity: trained {:.4} < random {:.4}",
            l.sim_trained, l.sim_random
        ),
    )
}

// ---------------------------------------------------------------- 9

fn knn_evaluator() -> Outcome {
    let mut r = rng(9);
    let dim = 8;
    let bank: Vec<Vec<f64>> = (0..300).map(|_| random_unit(&mut r, dim)).collect();
    let labels: Vec<usize> = (0..300).map(|_| r.random_range(0..10)).collect();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let q = random_unit(&mut r, dim);
        let nearest = (0..bank.len())
            .max_by(|&a, &b| cosine_sim(&q, &bank[a]).total_cmp(&cosine_sim(&q, &bank[b])))
            .unwrap();
        if weighted_knn_classify(&q, &bank, &labels, 1, DEFAULT_KNN_TAU).unwrap() != labels[nearest] {
            mismatches += 1;
        }
    }

    // k = 200 on a 50-entry bank: every entry votes with weight exp(s / tau).
    let small: Vec<Vec<f64>> = bank[..50].to_vec();
    let small_labels: Vec<usize> = labels[..50].to_vec();
    let mut capped_ok = DEFAULT_KNN_K == 200 && DEFAULT_KNN_TAU == 0.07;
    for _ in 0..100 {
        let q = random_unit(&mut r, dim);
        let mut votes = [0.0f64; 10];
        for (v, &y) in small.iter().zip(&small_labels) {
            votes[y] += (cosine_sim(&q, v) / 0.07).exp();
        }
        let expected = (0..10).max_by(|&a, &b| votes[a].total_cmp(&votes[b])).unwrap();
        let got = weighted_knn_classify(&q, &small, &small_labels, DEFAULT_KNN_K, DEFAULT_KNN_TAU);
        capped_ok &= got.ok() == Some(expected);
    }
    outcome(
        mismatches == 0 && capped_ok,
        format!(
            "k=1 vs nearest neighbour on 1000 queries: {mismatches} mismatches; \
             k={DEFAULT_KNN_K}, tau={DEFAULT_KNN_TAU} on a 50-entry bank equals all-entry vote: {capped_ok}"
        ),
    )
}

// ---------------------------------------------------------------- 10

fn determinism() -> Outcome {
    let start = Instant::now();
    let data = generate_synthetic_fuda(&SynthConfig { seed: 11, ..SynthConfig::default() }).unwrap();
    let cfg = TrainConfig {
        seed: 11,
        epochs: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let (model, metrics) = train(&data, &cfg).unwrap();
        let mut log = Vec::new();
        write_metrics(&metrics, &mut log).unwrap();
        (model, log)
    };
    let (model_a, log_a) = run();
    let (_, log_b) = run();
    let logs_equal = log_a == log_b && !log_a.is_empty();

    let mut bytes = Vec::new();
    write_checkpoint(&model_a, &mut bytes).unwrap();
    let back = read_checkpoint(bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let params_equal = bits(model_a.encoder.params()) == bits(back.encoder.params())
        && model_a.classifier.columns() == back.classifier.columns()
        && model_a.source_bank.vectors() == back.source_bank.vectors()
        && model_a.target_bank.vectors() == back.target_bank.vectors();
    let round_trip = bytes == again && params_equal;
    let elapsed = start.elapsed();
    outcome(
        logs_equal && round_trip && elapsed < Duration::from_secs(60),
        format!(
            "byte-identical metrics logs: {logs_equal}; bit-exact checkpoint round trip: {round_trip} [{:.1}s, limit 60s]",
            elapsed.as_secs_f64()
        ),
    )
}

/// Runs a criterion and fails it if it exceeds its runtime budget.
fn timed(limit_secs: u64, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let t = start.elapsed();
    o.pass &= t < Duration::from_secs(limit_secs);
    o.detail = format!("{} [{:.2}s, limit {limit_secs}s]", o.detail, t.as_secs_f64());
    o
}

fn main() {
    let mut failed = 0;
    let mut report = |n: u32, name: &str, o: Outcome| {
        println!("{} {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    report(1, "gradient correctness", timed(30, gradient_correctness));
    report(2, "MI identity", timed(10, mi_identity));
    report(3, "oracle equivalence", timed(10, oracle_equivalence));
    report(4, "clustering recovery", timed(20, clustering_recovery));
    report(5, "APCU behavior", timed(5, apcu_behavior));
    let ladder = run_ladder();
    report(6, "end-to-end synthetic FUDA", end_to_end(&ladder));
    report(7, "ablation monotone trend", ablation_trend(&ladder));
    report(8, "prototype-quality direction", prototype_quality(&ladder));
    report(9, "kNN evaluator", timed(10, knn_evaluator));
    report(10, "determinism and persistence", determinism());
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
