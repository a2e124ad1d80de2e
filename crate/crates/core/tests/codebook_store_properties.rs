use std::collections::BTreeSet;
use std::path::PathBuf;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use viralscope::codebook::{load_codebook, AnnotationRecord, Codebook, QuestionKind, Selections};
use viralscope::store::{
    consensus, ingest_manifest, medoid, AnnotationStore, ClusterManifest, ManifestEntry, Platform,
    SamplingPlan,
};

/// An acyclic codebook: rules only point from earlier to later questions,
/// never at the first one.
fn random_codebook(seed: u64) -> Codebook {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nq = rng.gen_range(2..7);
    let questions: Vec<_> = (0..nq)
        .map(|q| {
            let multi = rng.gen_bool(0.5);
            let n_opts = rng.gen_range(2..5);
            let options: Vec<_> = (0..n_opts)
                .map(|o| {
                    json!({
                        "id": format!("o{o}"),
                        "label": format!("Option {o}"),
                        "feature_key": format!("q{q}_o{o}"),
                        "exclusive": multi && o == n_opts - 1 && rng.gen_bool(0.5),
                    })
                })
                .collect();
            json!({
                "id": format!("q{q}"),
                "prompt": format!("Question {q}?"),
                "kind": if multi { "multi" } else { "exclusive" },
                "feature_group": format!("G{q}"),
                "options": options,
            })
        })
        .collect();
    let mut rules = Vec::new();
    let mut targets = BTreeSet::new();
    for to in 1..nq {
        if rng.gen_bool(0.4) {
            let from = rng.gen_range(0..to);
            let n_from = questions[from]["options"].as_array().unwrap().len();
            targets.insert(to);
            rules.push(json!({
                "when_question": format!("q{from}"),
                "when_option_any_of": [format!("o{}", rng.gen_range(0..n_from))],
                "then_ask": format!("q{to}"),
            }));
        }
    }
    let groups: Vec<_> = (0..nq).map(|q| json!({ "id": format!("G{q}"), "name": format!("Group {q}") })).collect();
    let doc = json!({ "version": "test", "feature_groups": groups, "questions": questions, "rules": rules });
    load_codebook(&doc.to_string()).expect("generated codebook is valid")
}

/// Answers every reachable question, as an annotator completing the form.
fn complete_selections(cb: &Codebook, rng: &mut ChaCha8Rng) -> Selections {
    let mut sel = Selections::new();
    while let Some(q) = cb.pending_questions(&sel).unwrap().first().copied() {
        let open: Vec<_> = q.options.iter().filter(|o| !o.exclusive).collect();
        let chosen: BTreeSet<String> = match q.kind {
            QuestionKind::Exclusive => [q.options.choose(rng).unwrap().id.clone()].into(),
            QuestionKind::Multi if open.is_empty() || rng.gen_bool(0.2) => {
                [q.options.choose(rng).unwrap().id.clone()].into()
            }
            QuestionKind::Multi => {
                let mut s: BTreeSet<String> = open.iter().filter(|_| rng.gen_bool(0.4)).map(|o| o.id.clone()).collect();
                if s.is_empty() {
                    s.insert(open[0].id.clone());
                }
                s
            }
        };
        sel.insert(q.id.clone(), chosen);
    }
    sel
}

/// Any options of any questions, valid or not.
fn arbitrary_selections(cb: &Codebook, rng: &mut ChaCha8Rng) -> Selections {
    let mut sel = Selections::new();
    for q in cb.questions() {
        if rng.gen_bool(0.6) {
            sel.insert(q.id.clone(), q.options.iter().filter(|_| rng.gen_bool(0.4)).map(|o| o.id.clone()).collect());
        }
    }
    sel
}

fn record(image: &str, annotator: &str, selections: Selections) -> AnnotationRecord {
    AnnotationRecord { image_id: image.into(), annotator_id: annotator.into(), timestamp: 1, selections }
}

fn codebooks(seed: u64) -> [Codebook; 2] {
    [Codebook::canonical(), random_codebook(seed)]
}

proptest! {
    #[test]
    fn validation_survives_roundtrip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for cb in codebooks(seed) {
            let complete = complete_selections(&cb, &mut rng);
            let valid = record("i", "a", complete);
            prop_assert!(cb.validate_record(&valid).is_empty());
            for rec in [valid, record("i", "a", arbitrary_selections(&cb, &mut rng))] {
                let back: AnnotationRecord = serde_json::from_str(&serde_json::to_string(&rec).unwrap()).unwrap();
                prop_assert_eq!(&back, &rec);
                prop_assert_eq!(cb.validate_record(&back), cb.validate_record(&rec));
            }
        }
    }

    #[test]
    fn reachability_is_monotone(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for cb in codebooks(seed) {
            let small = arbitrary_selections(&cb, &mut rng);
            let mut large = small.clone();
            for (q, extra) in arbitrary_selections(&cb, &mut rng) {
                large.entry(q).or_default().extend(extra);
            }
            let ids = |s: &Selections| -> BTreeSet<String> {
                cb.reachable_questions(s).unwrap().into_iter().map(|q| q.id.clone()).collect()
            };
            let before = ids(&small);
            let after = ids(&large);
            for q in before.iter().filter(|q| small.get(*q).is_some_and(|s| !s.is_empty())) {
                prop_assert!(after.contains(q), "{q} lost after adding selections");
            }
        }
    }

    #[test]
    fn ranking_ignores_positive_scaling(
        counts in prop::collection::vec(1u64..10_000, 4..40),
        k in 2u64..1000,
        seed in any::<u64>(),
    ) {
        let entries = |scale: u64| -> ClusterManifest {
            ClusterManifest::new(
                counts
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| ManifestEntry {
                        cluster_id: format!("c{i:03}"),
                        post_count: c * scale,
                        platform: Platform::Reddit,
                        medoid_path: PathBuf::from(format!("{i}.png")),
                    })
                    .collect(),
            )
            .unwrap()
        };
        let pool = counts.len() / 2;
        let plan = SamplingPlan { top_k: pool, bottom_k: pool, sample_from_top: pool / 2, sample_from_bottom: pool / 2, seed };
        let a = ingest_manifest(&entries(1), &plan).unwrap();
        let b = ingest_manifest(&entries(k), &plan).unwrap();
        let classes = |t: &[viralscope::store::ImageTask]| t.iter().map(|t| (t.image_id.clone(), t.virality_class)).collect::<Vec<_>>();
        prop_assert_eq!(classes(&a), classes(&b));
    }

    #[test]
    fn medoid_is_mean_distance_argmin(n in 1usize..=100, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<String> = (0..n).map(|i| format!("p{i:03}")).collect();
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(0..20) as f64, rng.gen_range(0..20) as f64)).collect();
        let d: Vec<Vec<f64>> = pts
            .iter()
            .map(|a| pts.iter().map(|b| (a.0 - b.0).abs() + (a.1 - b.1).abs()).collect())
            .collect();
        let got = medoid(&ids, &d).unwrap();
        let mean = |i: usize| d[i].iter().sum::<f64>() / n as f64;
        let best = (0..n).map(mean).fold(f64::INFINITY, f64::min);
        let expected = (0..n).find(|&i| mean(i) == best).unwrap();
        prop_assert_eq!(got, ids[expected].as_str());
    }

    #[test]
    fn consensus_ignores_submission_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::canonical();
        let raters = rng.gen_range(1..=7);
        let recs: Vec<AnnotationRecord> =
            (0..raters).map(|a| record("img", &format!("a{a}"), complete_selections(&cb, &mut rng))).collect();
        let mut shuffled: Vec<&AnnotationRecord> = recs.iter().collect();
        let reference = consensus(&cb, "img", &shuffled).unwrap();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(consensus(&cb, "img", &shuffled).unwrap(), reference);
    }
}

#[test]
fn replay_reproduces_consensus() {
    let cb = Codebook::canonical();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut live = AnnotationStore::open(cb.clone(), &path).unwrap();
    for step in 0..300 {
        let image = format!("img{}", rng.gen_range(0..25));
        let annotator = format!("a{}", rng.gen_range(0..5));
        let mut rec = record(&image, &annotator, complete_selections(&cb, &mut rng));
        rec.timestamp = step;
        live.append_record(rec).unwrap();
    }
    let replayed = AnnotationStore::replay(cb.clone(), &path).unwrap();
    assert_eq!(replayed.live_count(), live.live_count());
    assert_eq!(replayed.last_seq(), 300);
    for i in 0..25 {
        let id = format!("img{i}");
        match (live.consensus(&id), replayed.consensus(&id)) {
            (Ok(a), Ok(b)) => assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            other => panic!("{id}: {other:?}"),
        }
    }
}
