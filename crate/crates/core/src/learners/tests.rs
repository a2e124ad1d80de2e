use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn names(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("f{i}")).collect()
}

/// Two well-separated clusters: the first ten slots are all 1 for viral
/// rows and all 0 otherwise; five noisy slots follow.
fn separable(n_per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for class in [true, false] {
        for _ in 0..n_per_class {
            let mut r = vec![0.0; 30];
            for v in r.iter_mut().take(10) {
                *v = class as u8 as f64;
            }
            for v in r.iter_mut().skip(10).take(5) {
                *v = rng.gen_range(0..2) as f64;
            }
            rows.push(r);
            labels.push(class);
        }
    }
    let ids = (0..rows.len()).map(|i| format!("item{i:03}")).collect();
    Dataset::new(names(30), ids, rows, labels).unwrap()
}

#[test]
fn every_kind_fits_separable_data() {
    let d = separable(15, 1);
    for kind in ModelKind::ALL {
        let m = train(&ModelSpec::new(kind, 7), &d).unwrap();
        for (x, &y) in d.rows.iter().zip(&d.labels) {
            assert_eq!(m.predict_viral(x).unwrap(), y, "{kind}");
        }
        let mut probe = vec![0.0; 30];
        probe[..10].iter_mut().for_each(|v| *v = 1.0);
        assert!(m.predict_score(&probe).unwrap() > 0.5, "{kind}");
    }
}

#[test]
fn single_class_and_dimension_errors() {
    let mut d = separable(3, 2);
    d.labels.iter_mut().for_each(|l| *l = true);
    assert_eq!(train(&ModelSpec::new(ModelKind::Knn, 0), &d), Err(LearnerError::SingleClassData));

    let d = separable(3, 2);
    let m = train(&ModelSpec::new(ModelKind::Knn, 0), &d).unwrap();
    assert_eq!(
        m.predict_score(&[0.0; 29]),
        Err(LearnerError::DimensionMismatch { expected: 30, found: 29 })
    );
    assert!(Dataset::new(names(2), vec!["a".into()], vec![vec![0.0]], vec![true]).is_err());
}

#[test]
fn knn_with_k_equal_to_size_scores_base_rate() {
    let mut d = separable(6, 3);
    d.labels[0] = false;
    let n = d.len();
    let spec = ModelSpec::new(ModelKind::Knn, 0).with("k", n as f64).unwrap();
    let m = train(&spec, &d).unwrap();
    let rate = d.n_viral() as f64 / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let x: Vec<f64> = (0..30).map(|_| rng.gen_range(0..4) as f64).collect();
        assert_eq!(m.predict_score(&x).unwrap(), rate);
    }
}

#[test]
fn knn_one_neighbour_recalls_training_items() {
    let d = separable(5, 5);
    let spec = ModelSpec::new(ModelKind::Knn, 0).with("k", 1.0).unwrap();
    let m = train(&spec, &d).unwrap();
    assert!(m.predict_viral(&d.rows[0]).unwrap());
}

#[test]
fn zeroed_mlp_scores_half() {
    let m = mlp_model(Mlp::zeroed(30, 16), names(30), 0);
    assert_eq!(m.predict_score(&[1.0; 30]).unwrap(), 0.5);
    assert_eq!(m.predict_score(&[0.0; 30]).unwrap(), 0.5);
}

#[test]
fn hyperparameters() {
    let spec = ModelSpec::new(ModelKind::RandomForest, 0);
    assert_eq!(spec.hyperparameters["n_trees"], 100.0);
    assert_eq!(spec.hyperparameters["max_features"], 6.0);
    assert!(matches!(spec.clone().with("k", 3.0), Err(LearnerError::UnknownHyperparameter { .. })));
    assert!(matches!(spec.clone().with("n_trees", 0.0), Err(LearnerError::InvalidHyperparameter { .. })));
    assert!(matches!(spec.with("n_trees", 2.5), Err(LearnerError::InvalidHyperparameter { .. })));
    assert_eq!("svm_linear".parse::<ModelKind>().unwrap(), ModelKind::SvmLinear);
    assert!("svm".parse::<ModelKind>().is_err());
}

#[test]
fn model_json_roundtrip() {
    let d = separable(8, 6);
    for kind in ModelKind::ALL {
        let m = train(&ModelSpec::new(kind, 3), &d).unwrap();
        let back = TrainedModel::from_json(&m.to_json()).unwrap();
        for x in &d.rows {
            assert_eq!(m.predict_score(x).unwrap(), back.predict_score(x).unwrap(), "{kind}");
        }
    }
}

#[test]
fn importance_requires_forest() {
    let d = separable(5, 7);
    let m = train(&ModelSpec::new(ModelKind::Knn, 0), &d).unwrap();
    assert_eq!(feature_importance(&m), Err(LearnerError::WrongModelKind(ModelKind::Knn)));
}

#[test]
fn fold_arithmetic() {
    let d = separable(50, 8);
    let folds = stratified_folds(&d, 10, 42, 0);
    for f in 0..10 {
        let members: Vec<usize> = (0..d.len()).filter(|&i| folds[i] == f).collect();
        assert_eq!(members.len(), 10);
        assert_eq!(members.iter().filter(|&&i| d.labels[i]).count(), 5);
    }
    assert_ne!(folds, stratified_folds(&d, 10, 42, 1));
    assert_eq!(folds, stratified_folds(&d, 10, 42, 0));
}

#[test]
fn cross_validation_counts_and_errors() {
    let d = separable(10, 9);
    let spec = ModelSpec::new(ModelKind::GaussianNb, 0);
    let r = cross_validate(&spec, &d, 5, 3, 1).unwrap();
    assert_eq!(r.fold_aucs.len(), 15);
    assert_eq!(r.fold_assignments.len(), 3);
    assert_eq!(r.auc_mean, 1.0);
    assert!(r.importance.is_none());
    assert_eq!(
        cross_validate(&spec, &d, 11, 1, 1).unwrap_err(),
        LearnerError::TooFewExamples { folds: 11, smallest: 10 }
    );
    let table = eval_table(&[r]);
    assert!(table.lines().next().unwrap().contains("f1-score"));
    assert!(table.contains("gaussian_nb"));
}
