//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::time::{Duration, Instant};

use lsdml::config::{ExperimentConfig, LsdTarget};
use lsdml::output;
use lsdml::train::{train, TrainOutcome};
use lsdml_core::eval::{embedding_density, mean_average_precision, recall_at_k};
use lsdml_core::losses::EmbeddingBatch;
use lsdml_core::lsd::{
    alpha_schedule, listwise_distribution, lsd_gradient, lsd_value, pair_contribution,
    similarity_matrix, teacher_distribution, ListwiseDistribution, LsdConfig, MetricKind,
    SimilaritySource,
};
use lsdml_core::numerics::{Matrix, Rng};

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

fn gaussian(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn unit_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn batch(m: Matrix, labels: Vec<usize>) -> EmbeddingBatch {
    EmbeddingBatch::new(m, labels).expect("non-degenerate batch")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Regularizer value written out from its definition: normalize, cosine,
/// log-softmax with temperature, cross-entropy against teacher rows.
fn oracle_value(v: &Matrix, teacher_rows: &[Vec<f64>], tau: f64, alpha: f64) -> f64 {
    let z = unit_rows(v);
    let n = z.len() as f64;
    let mut total = 0.0;
    for (zi, s_row) in z.iter().zip(teacher_rows) {
        let scores: Vec<f64> = z.iter().map(|zj| dot(zi, zj) / tau).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        for (s, target) in scores.iter().zip(s_row) {
            total -= target * (s - lse);
        }
    }
    alpha * total / (n * n)
}

fn criterion_gradient_oracle() -> Outcome {
    let mut rng = Rng::new(101);
    let sizes = [4usize, 8, 13, 20, 27, 32];
    let mut worst = 0.0f64;
    let mut trials = 0;
    for &n in &sizes {
        for tau in [0.5, 1.0, 2.0] {
            for (t, total) in [(1usize, 10usize), (5, 10), (10, 10)] {
                let dim = 6;
                let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
                let v = gaussian(&mut rng, n, dim);
                let tm = gaussian(&mut rng, n, dim);
                let metric = if trials % 2 == 0 {
                    MetricKind::Dot
                } else {
                    MetricKind::Euclidean
                };
                let cfg = LsdConfig::new(tau, 1.0, total, metric).unwrap();
                let tb = batch(tm, labels.clone());
                let analytic = lsd_gradient(&batch(v.clone(), labels), &tb, &cfg, t).unwrap();
                let teacher = teacher_distribution(&tb, &cfg).unwrap();
                let rows: Vec<Vec<f64>> = teacher.p().iter_rows().map(|r| r.to_vec()).collect();
                let alpha = t as f64 / total as f64;
                let h = 1e-6;
                let mut probe = v.clone();
                let mut diff = 0.0f64;
                let mut scale = 0.0f64;
                for k in 0..v.as_slice().len() {
                    let orig = probe.as_slice()[k];
                    probe.as_mut_slice()[k] = orig + h;
                    let up = oracle_value(&probe, &rows, tau, alpha);
                    probe.as_mut_slice()[k] = orig - h;
                    let down = oracle_value(&probe, &rows, tau, alpha);
                    probe.as_mut_slice()[k] = orig;
                    let fd = (up - down) / (2.0 * h);
                    diff = diff.max((analytic.as_slice()[k] - fd).abs());
                    scale = scale.max(fd.abs());
                }
                worst = worst.max(diff / scale.max(1e-8));
                trials += 1;
            }
        }
    }
    outcome(
        worst < 1e-4,
        format!("{trials} trials, worst relative error {worst:.2e} (limit 1e-4)"),
    )
}

fn criterion_metric_branches() -> Outcome {
    let mut rng = Rng::new(202);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 2 + rng.below(31);
        let dim = 2 + rng.below(14);
        let b = batch(gaussian(&mut rng, n, dim), vec![0; n]);
        let d = similarity_matrix(&b, MetricKind::Dot, SimilaritySource::Student).s;
        let e = similarity_matrix(&b, MetricKind::Euclidean, SimilaritySource::Student).s;
        for (x, y) in d.as_slice().iter().zip(e.as_slice()) {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(
        worst < 1e-9,
        format!("1000 batches, max elementwise gap {worst:.2e} (limit 1e-9)"),
    )
}

fn criterion_fixed_point() -> Outcome {
    let mut rng = Rng::new(303);
    let mut max_grad = 0.0f64;
    let mut violations = 0;
    for _ in 0..20 {
        let n = 4 + rng.below(13);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let m = gaussian(&mut rng, n, 5);
        let cfg = LsdConfig::new(1.0, 1.0, 4, MetricKind::Dot).unwrap();
        let b = batch(m.clone(), labels.clone());
        max_grad = max_grad.max(lsd_gradient(&b, &b, &cfg, 3).unwrap().max_abs());
        let teacher = teacher_distribution(&b, &cfg).unwrap();
        let base = lsd_value(&teacher, &teacher, 3, 4).unwrap();
        for _ in 0..100 {
            let mut v = m.clone();
            v.add_scaled(&gaussian(&mut rng, n, 5), rng.uniform_range(1e-3, 1.0))
                .unwrap();
            let student = teacher_distribution(&batch(v, labels.clone()), &cfg).unwrap();
            if lsd_value(&student, &teacher, 3, 4).unwrap() < base {
                violations += 1;
            }
        }
    }
    outcome(
        max_grad < 1e-9 && violations == 0,
        format!("max |grad| at fixed point {max_grad:.2e}, {violations} perturbations below the fixed-point value"),
    )
}

fn criterion_hard_sample_emphasis() -> Outcome {
    let mut rng = Rng::new(404);
    let mut failures = 0;
    for _ in 0..20 {
        // anchor, two positives at different angles, three negatives, in 4D
        let theta1 = rng.uniform_range(0.1, 0.6);
        let theta2 = rng.uniform_range(theta1 + 0.1, 1.4);
        let mut rows = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![theta1.cos(), theta1.sin(), 0.0, 0.0],
            vec![theta2.cos(), 0.0, theta2.sin(), 0.0],
        ];
        for _ in 0..3 {
            rows.push((0..4).map(|_| rng.normal()).collect());
        }
        let b = batch(Matrix::from_rows(&rows).unwrap(), vec![0, 0, 0, 1, 1, 2]);
        let cfg = LsdConfig::new(1.0, 1.0, 1, MetricKind::Dot).unwrap();
        let student = listwise_distribution(
            &similarity_matrix(&b, MetricKind::Dot, SimilaritySource::Student),
            1.0,
        )
        .unwrap();
        // teacher row 0 moves the same mass δ off both positives onto the anchor
        let mut s = student.p().clone();
        let delta = 0.5 * student.p()[(0, 1)].min(student.p()[(0, 2)]);
        s.as_mut_slice()[1] -= delta;
        s.as_mut_slice()[2] -= delta;
        s.as_mut_slice()[0] += 2.0 * delta;
        let teacher = ListwiseDistribution::from_rows(s).unwrap();
        let norm = |j: usize| {
            let g = pair_contribution(&b, &student, &teacher, &cfg, 1, 0, j).unwrap();
            g.iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        let gap1 = (student.p()[(0, 1)] - teacher.p()[(0, 1)]).abs();
        let gap2 = (student.p()[(0, 2)] - teacher.p()[(0, 2)]).abs();
        if (gap1 - gap2).abs() > 1e-15
            || norm(2).partial_cmp(&norm(1)) != Some(std::cmp::Ordering::Greater)
        {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("20 constructions, {failures} without strictly larger lower-cosine contribution"),
    )
}

fn criterion_alpha() -> Outcome {
    let mut bad = 0;
    for total in [1usize, 50, 150] {
        for t in 1..=total {
            if alpha_schedule(t, total).unwrap() != t as f64 / total as f64 {
                bad += 1;
            }
        }
    }
    outcome(bad == 0, format!("T in {{1, 50, 150}}, {bad} mismatches"))
}

fn run(cfg: &ExperimentConfig) -> TrainOutcome {
    train(cfg).expect("training run")
}

fn synth_hard(seed: u64, noise: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        ..Default::default()
    };
    cfg.data.noise_ratio = noise;
    cfg.eval.per_epoch = false;
    cfg
}

fn baseline(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.lsd.enabled = false;
    cfg
}

fn criterion_hard_vs_soft() -> Outcome {
    let mut wins = 0;
    let mut gaps = vec![];
    for seed in 0..10 {
        let soft = run(&synth_hard(seed, 0.3)).final_report.recall_at_1();
        let mut cfg = synth_hard(seed, 0.3);
        cfg.lsd.target = LsdTarget::HardLabels;
        let hard = run(&cfg).final_report.recall_at_1();
        gaps.push(soft - hard);
        if soft > hard {
            wins += 1;
        }
    }
    outcome(
        wins >= 8,
        format!(
            "teacher targets win {wins}/10 seeds, median R@1 gap {:+.4}",
            median(gaps)
        ),
    )
}

struct NoiseRuns {
    gaps: Vec<(f64, f64)>,
    density_wins: Vec<(f64, usize)>,
}

fn noise_runs() -> NoiseRuns {
    let mut gaps = vec![];
    let mut density_wins = vec![];
    for ratio in [0.1, 0.2, 0.3, 0.4] {
        let mut diffs = vec![];
        let mut wins = 0;
        for seed in 0..10 {
            let lsd = run(&synth_hard(seed, ratio));
            let base = run(&baseline(synth_hard(seed, ratio)));
            diffs.push(lsd.final_report.recall_at_1() - base.final_report.recall_at_1());
            if lsd.train_density.pi_ratio > base.train_density.pi_ratio {
                wins += 1;
            }
        }
        gaps.push((ratio, median(diffs)));
        density_wins.push((ratio, wins));
    }
    NoiseRuns { gaps, density_wins }
}

fn criterion_noise(runs: &NoiseRuns) -> Outcome {
    let all_positive = runs.gaps.iter().all(|&(_, g)| g > 0.0);
    let growing = runs.gaps[3].1 > runs.gaps[0].1;
    let detail = runs
        .gaps
        .iter()
        .map(|(r, g)| format!("{r}: {g:+.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        all_positive && growing,
        format!("median R@1 gap by noise ratio [{detail}]"),
    )
}

fn criterion_density(runs: &NoiseRuns) -> Outcome {
    let ok = runs.density_wins.iter().all(|&(_, w)| w >= 8);
    let detail = runs
        .density_wins
        .iter()
        .map(|(r, w)| format!("{r}: {w}/10"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        ok,
        format!("training-embedding pi_ratio higher with LSD [{detail}]"),
    )
}

fn criterion_tau() -> Outcome {
    let mut spreads = vec![];
    let mut gaps = vec![];
    for seed in 0..5 {
        let r1 = |tau: f64| {
            let mut cfg = synth_hard(seed, 0.0);
            cfg.lsd.tau = tau;
            run(&cfg).final_report.recall_at_1()
        };
        let high: Vec<f64> = [1.0, 2.0, 4.0, 8.0].iter().map(|&t| r1(t)).collect();
        let max = high.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = high.iter().cloned().fold(f64::INFINITY, f64::min);
        spreads.push(max - min);
        gaps.push((high[0] - r1(0.1)).abs());
    }
    let (spread, gap) = (median(spreads), median(gaps));
    outcome(
        spread < gap,
        format!("median spread over tau>=1 {spread:.4} vs median |R@1(1) - R@1(0.1)| {gap:.4}"),
    )
}

// Brute-force evaluation oracles, straight from the definitions.
fn oracle_retrieval(e: &Matrix, labels: &[usize], k: usize) -> (f64, Option<f64>) {
    let z = unit_rows(e);
    let n = z.len();
    let mut hits = 0usize;
    let mut ap_sum = 0.0;
    let mut ap_count = 0usize;
    for q in 0..n {
        // position of j in q's ranking: number of items strictly ahead of it
        let rank = |j: usize| {
            (0..n)
                .filter(|&m| m != q && m != j)
                .filter(|&m| {
                    let (sm, sj) = (dot(&z[q], &z[m]), dot(&z[q], &z[j]));
                    sm > sj || (sm == sj && m < j)
                })
                .count()
        };
        let mut pos_ranks: Vec<usize> = (0..n)
            .filter(|&j| j != q && labels[j] == labels[q])
            .map(rank)
            .collect();
        if pos_ranks.iter().any(|&r| r < k.min(n - 1)) {
            hits += 1;
        }
        if !pos_ranks.is_empty() {
            pos_ranks.sort();
            let ap: f64 = pos_ranks
                .iter()
                .enumerate()
                .map(|(i, &r)| (i + 1) as f64 / (r + 1) as f64)
                .sum();
            ap_sum += ap / pos_ranks.len() as f64;
            ap_count += 1;
        }
    }
    (
        hits as f64 / n as f64,
        (ap_count > 0).then(|| ap_sum / ap_count as f64),
    )
}

fn oracle_density(e: &Matrix, labels: &[usize]) -> Option<(f64, f64)> {
    let z = unit_rows(e);
    let mut classes = labels.to_vec();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return None;
    }
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let members = |c: usize| (0..z.len()).filter(move |&i| labels[i] == c);
    let mut intra = (0.0, 0usize);
    for &c in &classes {
        let m: Vec<usize> = members(c).collect();
        for a in 0..m.len() {
            for b in a + 1..m.len() {
                intra.0 += dist(&z[m[a]], &z[m[b]]);
                intra.1 += 1;
            }
        }
    }
    if intra.1 == 0 {
        return None;
    }
    let means: Vec<Vec<f64>> = classes
        .iter()
        .map(|&c| {
            let m: Vec<usize> = members(c).collect();
            let mut mu = vec![0.0; e.cols()];
            for &i in &m {
                for (acc, x) in mu.iter_mut().zip(&z[i]) {
                    *acc += x;
                }
            }
            mu.iter().map(|x| x / m.len() as f64).collect()
        })
        .collect();
    let mut inter = (0.0, 0usize);
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            inter.0 += dist(&means[a], &means[b]);
            inter.1 += 1;
        }
    }
    Some((intra.0 / intra.1 as f64, inter.0 / inter.1 as f64))
}

fn criterion_eval_oracles() -> Outcome {
    let mut rng = Rng::new(1010);
    let mut mismatches = 0;
    for instance in 0..1000 {
        let n = 2 + rng.below(49);
        let classes = 1 + rng.below(6);
        let dim = 2 + rng.below(4);
        // every other instance uses a coarse grid so exact ties occur
        let e = if instance % 2 == 0 {
            gaussian(&mut rng, n, dim)
        } else {
            Matrix::from_fn(n, dim, |_, _| rng.below(5) as f64 - 1.95)
        };
        let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        for k in [1, 2, 4, 8] {
            let (r, _) = oracle_retrieval(&e, &labels, k);
            if recall_at_k(&e, &labels, k).unwrap() != r {
                mismatches += 1;
            }
        }
        match (
            oracle_retrieval(&e, &labels, 1).1,
            mean_average_precision(&e, &labels),
        ) {
            (Some(m), Ok(v)) if m == v => {}
            (None, Err(_)) => {}
            _ => mismatches += 1,
        }
        match (oracle_density(&e, &labels), embedding_density(&e, &labels)) {
            (Some((intra, inter)), Ok(d)) if d.pi_intra == intra && d.pi_inter == inter => {}
            (None, Err(_)) => {}
            _ => mismatches += 1,
        }
    }
    outcome(
        mismatches == 0,
        format!("1000 instances (n <= 50), {mismatches} mismatches"),
    )
}

fn criterion_determinism() -> Outcome {
    let mut cfg = ExperimentConfig {
        seed: 11,
        ..Default::default()
    };
    cfg.data.noise_ratio = 0.2;
    cfg.train.epochs = 10;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        output::write_run(d.path(), &cfg, &run(&cfg)).unwrap();
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    let csv_same = read(&dirs[0], output::EPOCHS_CSV) == read(&dirs[1], output::EPOCHS_CSV);
    let ckpt_same = read(&dirs[0], output::CHECKPOINT) == read(&dirs[1], output::CHECKPOINT);
    outcome(
        csv_same && ckpt_same,
        format!("epochs.csv identical: {csv_same}, checkpoint identical: {ckpt_same}"),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome, Duration, Duration)> = vec![];
    let mut timed = |id: usize, name: &'static str, budget: u64, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        results.push((id, name, o, start.elapsed(), Duration::from_secs(budget)));
    };
    timed(1, "gradient oracle", 30, &criterion_gradient_oracle);
    timed(
        2,
        "metric-branch equivalence",
        5,
        &criterion_metric_branches,
    );
    timed(3, "fixed point and Gibbs", 10, &criterion_fixed_point);
    timed(
        4,
        "hard-sample emphasis",
        5,
        &criterion_hard_sample_emphasis,
    );
    timed(5, "alpha schedule", 1, &criterion_alpha);
    timed(
        6,
        "teacher vs hard-label targets",
        1200,
        &criterion_hard_vs_soft,
    );
    let start = Instant::now();
    let runs = noise_runs();
    let shared = start.elapsed();
    results.push((
        7,
        "noise robustness",
        criterion_noise(&runs),
        shared,
        Duration::from_secs(3600),
    ));
    results.push((
        8,
        "embedding density",
        criterion_density(&runs),
        Duration::ZERO,
        Duration::from_secs(3600),
    ));
    let mut timed = |id: usize, name: &'static str, budget: u64, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        results.push((id, name, o, start.elapsed(), Duration::from_secs(budget)));
    };
    timed(9, "temperature insensitivity", 2400, &criterion_tau);
    timed(10, "evaluation oracles", 60, &criterion_eval_oracles);
    timed(11, "determinism", 300, &criterion_determinism);

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, o, took, budget) in &results {
        let in_time = took <= budget;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        let timing = if *took == Duration::ZERO {
            "shared with 7".to_string()
        } else {
            format!("{:.1}s of {}s", took.as_secs_f64(), budget.as_secs())
        };
        println!(
            "[{}] {id:>2} {name}: {} ({timing}{})",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            if in_time { "" } else { ", over budget" }
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
