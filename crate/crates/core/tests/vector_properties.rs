use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viralscope::codebook::{AnnotationRecord, Codebook, QuestionKind, Selections, ViolationKind};
use viralscope::features::{vectorize, WordCount, WordSource, N_FEATURES};
use viralscope::store::{consensus, ViralityClass};

/// A uniformly random valid answer set, walking the codebook in order.
fn random_selections(cb: &Codebook, rng: &mut ChaCha8Rng) -> Selections {
    let mut sel = Selections::new();
    for q in cb.questions() {
        let reachable = cb.reachable_questions(&sel).unwrap().iter().any(|r| r.id == q.id);
        if !reachable {
            continue;
        }
        let answer: BTreeSet<String> = match q.kind {
            QuestionKind::Exclusive => [q.options.choose(rng).unwrap().id.clone()].into(),
            QuestionKind::Multi => {
                let exclusive: Vec<_> = q.options.iter().filter(|o| o.exclusive).collect();
                if !exclusive.is_empty() && rng.gen_bool(0.2) {
                    [exclusive[0].id.clone()].into()
                } else {
                    let open: Vec<_> = q.options.iter().filter(|o| !o.exclusive).collect();
                    let mut pick: BTreeSet<String> =
                        open.iter().filter(|_| rng.gen_bool(0.3)).map(|o| o.id.clone()).collect();
                    if pick.is_empty() {
                        pick.insert(open.choose(rng).unwrap().id.clone());
                    }
                    pick
                }
            }
        };
        sel.insert(q.id.clone(), answer);
    }
    sel
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn consensus_vectors_hold_invariants(seed in any::<u64>(), raters in 1usize..=6, words in 0u32..60, threshold in 1u32..30) {
        let cb = Codebook::canonical();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<AnnotationRecord> = (0..raters)
            .map(|a| AnnotationRecord {
                image_id: "img".into(),
                annotator_id: format!("a{a}"),
                timestamp: 0,
                selections: random_selections(&cb, &mut rng),
            })
            .collect();
        for r in &records {
            prop_assert!(cb.validate_record(r).is_empty());
        }
        let refs: Vec<&AnnotationRecord> = records.iter().collect();
        let labels = consensus(&cb, "img", &refs).unwrap();
        let merged = AnnotationRecord {
            image_id: "img".into(),
            annotator_id: "consensus".into(),
            timestamp: 0,
            selections: labels.selections(&cb),
        };
        let unreachable = cb
            .validate_record(&merged)
            .into_iter()
            .any(|v| v.kind == ViolationKind::UnreachableAnswer);
        prop_assert!(!unreachable);

        let wc = WordCount { image_id: "img".into(), count: words, source: WordSource::Manual };
        let v = vectorize(&labels, &wc, threshold, ViralityClass::Viral).unwrap();
        prop_assert_eq!(v.values.len(), N_FEATURES);
        prop_assert!(v.invariant_violations().is_empty(), "{:?}", v.invariant_violations());
        prop_assert_eq!(v.value("words_over_threshold"), Some((words > threshold) as u8 as f64));
        let again = vectorize(&labels, &wc, threshold, ViralityClass::Viral).unwrap();
        prop_assert_eq!(v, again);
    }
}
