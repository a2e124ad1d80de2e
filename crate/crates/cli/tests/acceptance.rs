//! Acceptance criteria, each checked at its stated tolerance and time
//! budget. Prints one PASS/FAIL line per criterion and exits non-zero when
//! any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viralscope::agreement::{fleiss_kappa, RatingMatrix};
use viralscope::codebook::{AnnotationRecord, Codebook, QuestionKind, Selections};
use viralscope::features::{
    ks_two_sample, select_threshold, slot_index, vectorize, WordCount, WordSource, N_FEATURES,
};
use viralscope::learners::{
    auc, cross_validate, feature_importance, logistic_gradient, logistic_objective, train,
    transfer_evaluate, Dataset, ModelKind, ModelSpec,
};
use viralscope::pipeline::ExperimentConfig;
use viralscope::store::{consensus, ViralityClass};
use viralscope::synthetic::{synthetic_vectors, word_count_fixture};

const SEED: u64 = 2021;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(start: Instant, budget: Duration, mut o: Outcome) -> Outcome {
    let took = start.elapsed();
    o.detail = format!("{}; {:.2?} (budget {:?})", o.detail, took, budget);
    o.pass &= took < budget;
    o
}

// Fleiss' kappa straight from the textbook formula, in plain floats.
fn kappa_oracle(n: u32, counts: &[Vec<u32>]) -> f64 {
    let n = n as f64;
    let items = counts.len() as f64;
    let k = counts[0].len();
    let p_bar = counts
        .iter()
        .map(|row| (row.iter().map(|&c| (c * c) as f64).sum::<f64>() - n) / (n * (n - 1.0)))
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..k)
        .map(|j| {
            let pj = counts.iter().map(|r| r[j] as f64).sum::<f64>() / (items * n);
            pj * pj
        })
        .sum();
    (p_bar - p_e) / (1.0 - p_e)
}

fn random_counts(rng: &mut ChaCha8Rng, n: u32, items: usize, k: usize) -> Vec<Vec<u32>> {
    (0..items)
        .map(|_| {
            let mut row = vec![0; k];
            for _ in 0..n {
                row[rng.gen_range(0..k)] += 1;
            }
            row
        })
        .collect()
}

fn fleiss() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 100 {
        let n = rng.gen_range(2..=8);
        let items = rng.gen_range(2..=60);
        let k = rng.gen_range(2..=5);
        let counts = random_counts(&mut rng, n, items, k);
        let used = (0..k).filter(|&j| counts.iter().any(|r| r[j] > 0)).count();
        if used < 2 {
            continue;
        }
        let got = fleiss_kappa(&RatingMatrix::new(n, counts.clone()).unwrap()).unwrap();
        worst = worst.max((got - kappa_oracle(n, &counts)).abs());
        done += 1;
    }
    let unanimous = (0..20).all(|i| {
        let k = 2 + i % 4;
        let counts: Vec<Vec<u32>> = (0..10)
            .map(|item| {
                let mut row = vec![0; k];
                row[item % k] = 6;
                row
            })
            .collect();
        fleiss_kappa(&RatingMatrix::new(6, counts).unwrap()) == Ok(1.0)
    });
    let worked = fleiss_kappa(&RatingMatrix::new(3, vec![vec![3, 0], vec![0, 3], vec![2, 1]]).unwrap()).unwrap();
    within(
        start,
        Duration::from_secs(1),
        check(
            worst < 1e-12 && unanimous && worked == 0.55,
            format!("max oracle gap {worst:.1e} over 100 matrices, unanimous -> 1: {unanimous}, worked example {worked}"),
        ),
    )
}

fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        if !yi {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if !yj {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn random_scored(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(2..=300);
    let levels = rng.gen_range(2..=50);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
    (scores, labels)
}

fn auc_criterion() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (s, y) = random_scored(&mut rng);
        worst = worst.max((auc(&s, &y).unwrap() - auc_oracle(&s, &y)).abs());
    }
    let example = auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();

    // Random strictly increasing maps: each distinct score moves to a
    // cumulative sum of random positive gaps.
    let mut invariant = 0;
    for _ in 0..50 {
        let (s, y) = random_scored(&mut rng);
        let mut distinct: Vec<f64> = s.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut acc = rng.gen_range(-10.0..10.0);
        let image: Vec<f64> = distinct
            .iter()
            .map(|_| {
                acc += rng.gen_range(1e-3..5.0);
                acc
            })
            .collect();
        let mapped: Vec<f64> = s
            .iter()
            .map(|v| image[distinct.binary_search_by(|d| d.total_cmp(v)).unwrap()])
            .collect();
        invariant += (auc(&s, &y).unwrap() == auc(&mapped, &y).unwrap()) as usize;
    }
    within(
        start,
        Duration::from_secs(5),
        check(
            worst < 1e-12 && example == 0.75 && invariant == 50,
            format!("max oracle gap {worst:.1e} over 200 sets, example {example}, {invariant}/50 monotone maps invariant"),
        ),
    )
}

fn ks_oracle(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    a.iter().chain(b).map(|&x| (cdf(a, x) - cdf(b, x)).abs()).fold(0.0, f64::max)
}

fn ks_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let na = rng.gen_range(1..80);
        let nb = rng.gen_range(1..80);
        let levels = rng.gen_range(2..40);
        let a: Vec<f64> = (0..na).map(|_| rng.gen_range(0..levels) as f64).collect();
        let b: Vec<f64> = (0..nb).map(|_| rng.gen_range(0..levels) as f64 + rng.gen_range(0..3) as f64).collect();
        worst = worst.max((ks_two_sample(&a, &b).unwrap().statistic - ks_oracle(&a, &b)).abs());
    }
    let a: Vec<f64> = (0..30).map(|i| (i % 7) as f64).collect();
    let identical = ks_two_sample(&a, &a).unwrap().statistic;
    let far: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
    let disjoint = ks_two_sample(&a, &far).unwrap().statistic;

    // Fixed sizes n = m; shifting one sample by j points sets D = j / n.
    let mut strict = true;
    let mut checked = 0;
    for n in [10usize, 20, 40] {
        let base: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut last = f64::INFINITY;
        for j in 1..=n {
            let shifted: Vec<f64> = base.iter().map(|v| v + j as f64).collect();
            let r = ks_two_sample(&base, &shifted).unwrap();
            strict &= (r.statistic - j as f64 / n as f64).abs() < 1e-12 && r.p_value < last;
            last = r.p_value;
            checked += 1;
        }
    }
    check(
        worst < 1e-12 && identical == 0.0 && disjoint == 1.0 && strict,
        format!(
            "max D gap {worst:.1e} over 200 pairs, identical {identical}, disjoint {disjoint}, p strictly decreasing over {checked} D values: {strict}"
        ),
    )
}

fn threshold_criterion() -> Outcome {
    let start = Instant::now();
    let mut thresholds = Vec::new();
    let mut worst_p: f64 = 0.0;
    let mut shares_ok = true;
    for s in 0..20 {
        let (v, nv) = word_count_fixture(SEED + s);
        let below = v.iter().filter(|&&c| c < 15).count() as f64 / v.len() as f64;
        let above = nv.iter().filter(|&&c| c > 15).count() as f64 / nv.len() as f64;
        shares_ok &= (below - 0.94).abs() < 1e-9 && (above - 0.3191).abs() < 5e-5;
        let a = select_threshold(&v, &nv).unwrap();
        thresholds.push(a.threshold);
        worst_p = worst_p.max(a.p_value);
    }
    let in_range = thresholds.iter().all(|t| (12..=18).contains(t));
    let distinct: BTreeSet<u32> = thresholds.iter().copied().collect();
    within(
        start,
        Duration::from_secs(5),
        check(
            in_range && worst_p < 0.005 && shares_ok,
            format!("thresholds {distinct:?} over 20 seeds, max p {worst_p:.2e}, fixture shares hold: {shares_ok}"),
        ),
    )
}

fn random_selections(cb: &Codebook, rng: &mut ChaCha8Rng) -> Selections {
    let mut sel = Selections::new();
    loop {
        let pending = cb.pending_questions(&sel).unwrap();
        let Some(q) = pending.first() else { break };
        let chosen: BTreeSet<String> = match q.kind {
            QuestionKind::Exclusive => [q.options.choose(rng).unwrap().id.clone()].into(),
            QuestionKind::Multi => {
                let open: Vec<_> = q.options.iter().filter(|o| !o.exclusive).collect();
                if rng.gen_bool(0.15) || open.is_empty() {
                    q.options.iter().filter(|o| o.exclusive).take(1).map(|o| o.id.clone()).collect()
                } else {
                    let mut pick: BTreeSet<String> = open.iter().filter(|_| rng.gen_bool(0.35)).map(|o| o.id.clone()).collect();
                    if pick.is_empty() {
                        pick.insert(open.choose(rng).unwrap().id.clone());
                    }
                    pick
                }
            }
        };
        sel.insert(q.id.clone(), chosen);
    }
    sel
}

fn vectorization_criterion() -> Outcome {
    let cb = Codebook::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let words = slot_index("words_over_threshold").unwrap();
    let mut records = 0;
    let mut failures = Vec::new();
    let mut image = 0;
    while records < 1000 {
        let id = format!("img{image}");
        image += 1;
        let raters = rng.gen_range(1..=6);
        let recs: Vec<AnnotationRecord> = (0..raters)
            .map(|a| AnnotationRecord {
                image_id: id.clone(),
                annotator_id: format!("a{a}"),
                timestamp: 0,
                selections: random_selections(&cb, &mut rng),
            })
            .collect();
        records += recs.len();
        if let Some(r) = recs.iter().find(|r| !cb.validate_record(r).is_empty()) {
            failures.push(format!("{id}: generated invalid record {:?}", r.selections));
            continue;
        }
        let refs: Vec<&AnnotationRecord> = recs.iter().collect();
        let labels = consensus(&cb, &id, &refs).unwrap();
        let count = rng.gen_range(0..60);
        let threshold = rng.gen_range(1..40);
        let wc = WordCount { image_id: id.clone(), count, source: WordSource::Manual };
        let class = if rng.gen_bool(0.5) { ViralityClass::Viral } else { ViralityClass::Nonviral };
        match vectorize(&labels, &wc, threshold, class) {
            Ok(v) => {
                let mut problems = v.invariant_violations();
                if v.values.len() != N_FEATURES {
                    problems.push(format!("{} slots", v.values.len()));
                }
                if v.values[words] != (count > threshold) as u8 as f64 {
                    problems.push("word slot disagrees with count".into());
                }
                if !problems.is_empty() {
                    failures.push(format!("{id}: {problems:?}"));
                }
            }
            Err(e) => failures.push(format!("{id}: {e}")),
        }
    }
    check(
        failures.is_empty(),
        format!("{records} records over {image} images, {} failure(s){}", failures.len(), failures.first().map(|f| format!(": {f}")).unwrap_or_default()),
    )
}

fn benchmark_criterion() -> Outcome {
    let start = Instant::now();
    let data = Dataset::from_vectors(&synthetic_vectors(50, 50, SEED)).unwrap();
    let rf = cross_validate(&ModelSpec::new(ModelKind::RandomForest, SEED), &data, 10, 10, SEED).unwrap();
    let knn = cross_validate(&ModelSpec::new(ModelKind::Knn, SEED), &data, 10, 10, SEED).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst_fd: f64 = 0.0;
    for _ in 0..10 {
        let w: Vec<f64> = (0..N_FEATURES).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b = rng.gen_range(-0.5..0.5);
        let f = |w: &[f64], b: f64| logistic_objective(w, b, &data.rows, &data.labels, 0.01);
        let (gw, gb) = logistic_gradient(&w, b, &data.rows, &data.labels, 0.01);
        let h = 1e-5;
        let mut diff = 0.0;
        let mut norm = 0.0;
        for i in 0..=N_FEATURES {
            let (num, ana) = if i < N_FEATURES {
                let (mut hi, mut lo) = (w.clone(), w.clone());
                hi[i] += h;
                lo[i] -= h;
                ((f(&hi, b) - f(&lo, b)) / (2.0 * h), gw[i])
            } else {
                ((f(&w, b + h) - f(&w, b - h)) / (2.0 * h), gb)
            };
            diff += (num - ana) * (num - ana);
            norm += ana * ana;
        }
        worst_fd = worst_fd.max((diff / norm).sqrt());
    }
    let pass = rf.auc_mean >= 0.80 && (0.74..=1.0).contains(&rf.auc_mean) && knn.auc_mean >= 0.75 && worst_fd < 1e-5;
    within(
        start,
        Duration::from_secs(60),
        check(
            pass,
            format!(
                "random_forest auc {:.3} +- {:.3}, knn auc {:.3} +- {:.3}, gradient rel. error {worst_fd:.1e}",
                rf.auc_mean, rf.auc_std, knn.auc_mean, knn.auc_std
            ),
        ),
    )
}

fn importance_criterion() -> Outcome {
    let mut hits = 0;
    let mut ranks = Vec::new();
    for s in 0..20 {
        let seed = SEED + s;
        let data = Dataset::from_vectors(&synthetic_vectors(50, 50, seed)).unwrap();
        let model = train(&ModelSpec::new(ModelKind::RandomForest, seed), &data).unwrap();
        let imp = feature_importance(&model).unwrap();
        let mut order: Vec<(&String, &f64)> = imp.iter().collect();
        order.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
        let rank = order.iter().position(|(n, _)| n.as_str() == "attr_facial_expression").unwrap() + 1;
        hits += (rank <= 3) as usize;
        ranks.push(rank);
    }
    check(hits >= 18, format!("facial expression in top 3 in {hits}/20 seeds (ranks {ranks:?})"))
}

fn transfer_criterion() -> Outcome {
    let mut good = 0;
    let mut per_seed = Vec::new();
    for s in 0..20 {
        let seed = SEED + s;
        let data = Dataset::from_vectors(&synthetic_vectors(50, 50, seed)).unwrap();
        let model = train(&ModelSpec::new(ModelKind::Knn, seed), &data).unwrap();
        let holdout = synthetic_vectors(20, 0, seed.wrapping_mul(31).wrapping_add(7));
        let report = transfer_evaluate(&model, &holdout).unwrap();
        good += (report.predicted_viral >= 18) as usize;
        per_seed.push(report.predicted_viral);
    }
    check(good >= 18, format!("knn >= 18/20 viral in {good}/20 seeds (per seed {per_seed:?})"))
}

fn viralscope(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_viralscope")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism_criterion() -> Outcome {
    let run = || -> Result<Outcome, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let d = dir.path().to_str().unwrap();
        viralscope(&["--data-dir", d, "--seed", &SEED.to_string(), "synth"])?;
        let cfg_a = dir.path().join("config.json");
        let mut cfg = ExperimentConfig::load(&cfg_a).map_err(|e| e.to_string())?;
        cfg.output_dir = "run_b".into();
        let cfg_b = dir.path().join("config_b.json");
        fs::write(&cfg_b, serde_json::to_string_pretty(&cfg).unwrap()).map_err(|e| e.to_string())?;
        viralscope(&["--data-dir", d, "--config", cfg_a.to_str().unwrap(), "run"])?;
        viralscope(&["--data-dir", d, "--config", cfg_b.to_str().unwrap(), "run"])?;

        let same = |rel: &str| -> bool {
            let a = fs::read(dir.path().join("run").join(rel));
            let b = fs::read(dir.path().join("run_b").join(rel));
            matches!((a, b), (Ok(a), Ok(b)) if a == b)
        };
        let mut compared = vec!["vectors.csv".to_string()];
        compared.extend(cfg.models.iter().map(|k| format!("eval/{}.json", k.as_str())));
        let differing: Vec<&String> = compared.iter().filter(|r| !same(r)).collect();
        Ok(check(
            differing.is_empty() && Path::new(&dir.path().join("run/vectors.csv")).is_file(),
            format!("{} artifacts compared byte for byte, differing: {differing:?}", compared.len()),
        ))
    };
    run().unwrap_or_else(|e| check(false, e))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("fleiss_kappa", fleiss),
        ("auc", auc_criterion),
        ("ks", ks_criterion),
        ("threshold", threshold_criterion),
        ("vectorization", vectorization_criterion),
        ("classifier_benchmark", benchmark_criterion),
        ("feature_importance", importance_criterion),
        ("transfer", transfer_criterion),
        ("pipeline_determinism", determinism_criterion),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let o = f();
        failed += !o.pass as usize;
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
