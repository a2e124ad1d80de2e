use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{auc, classification_metrics, ClassificationMetrics};
use super::{train, Dataset, LearnerError, ModelKind, ModelSpec, TrainedModel};
use crate::features::{FeatureVector, N_FEATURES};
use crate::store::ViralityClass;

/// Fold index for every item. Each class is ordered by id, shuffled with a
/// stream keyed by `(seed, repeat)`, then dealt round-robin, viral first.
pub fn stratified_folds(data: &Dataset, folds: usize, seed: u64, repeat: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(repeat as u64);
    let mut class = |want: bool| {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == want).collect();
        idx.sort_by(|&a, &b| data.ids[a].cmp(&data.ids[b]));
        idx.shuffle(&mut rng);
        idx
    };
    let viral = class(true);
    let nonviral = class(false);
    let mut out = vec![0; data.len()];
    for (pos, i) in viral.into_iter().chain(nonviral).enumerate() {
        out[i] = pos % folds;
    }
    out
}

fn derive_seed(seed: u64, repeat: usize, fold: usize) -> u64 {
    // splitmix64 finaliser over the combined key
    let mut z = seed ^ ((repeat as u64) << 32 | fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelKind,
    pub hyperparameters: BTreeMap<String, f64>,
    pub seed: u64,
    pub model_seed: u64,
    pub folds: usize,
    pub repeats: usize,
    pub n_items: usize,
    pub auc_mean: f64,
    /// Population standard deviation over all fold evaluations.
    pub auc_std: f64,
    pub fold_aucs: Vec<f64>,
    /// Pooled out-of-fold predictions across every repeat.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Metrics of a model fit to all items, scored on those same items.
    pub training: ClassificationMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub importance: Option<BTreeMap<String, f64>>,
    /// Per repeat, the fold of each item in input order.
    pub fold_assignments: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Repeated stratified k-fold evaluation.
pub fn cross_validate(
    spec: &ModelSpec,
    data: &Dataset,
    folds: usize,
    repeats: usize,
    seed: u64,
) -> Result<EvalReport, LearnerError> {
    if folds < 2 {
        return Err(LearnerError::InvalidHyperparameter { key: "folds".into(), value: folds as f64 });
    }
    if repeats < 1 {
        return Err(LearnerError::InvalidHyperparameter { key: "repeats".into(), value: 0.0 });
    }
    let viral = data.n_viral();
    let smallest = viral.min(data.len() - viral);
    if smallest < folds {
        return Err(LearnerError::TooFewExamples { folds, smallest });
    }

    let assignments: Vec<Vec<usize>> = (0..repeats).map(|r| stratified_folds(data, folds, seed, r)).collect();
    let jobs: Vec<(usize, usize)> = (0..repeats).flat_map(|r| (0..folds).map(move |f| (r, f))).collect();
    let results: Vec<(f64, Vec<(f64, bool)>)> = jobs
        .par_iter()
        .map(|&(r, f)| {
            let (test, fit): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| assignments[r][i] == f);
            let mut fold_spec = spec.clone();
            fold_spec.seed = derive_seed(spec.seed, r, f);
            let model = train(&fold_spec, &data.subset(&fit))?;
            let preds: Vec<(f64, bool)> = test.iter().map(|&i| (model.score(&data.rows[i]), data.labels[i])).collect();
            let (s, y): (Vec<f64>, Vec<bool>) = preds.iter().copied().unzip();
            Ok((auc(&s, &y)?, preds))
        })
        .collect::<Result<_, LearnerError>>()?;

    let fold_aucs: Vec<f64> = results.iter().map(|(a, _)| *a).collect();
    let k = fold_aucs.len() as f64;
    let auc_mean = fold_aucs.iter().sum::<f64>() / k;
    let auc_std = (fold_aucs.iter().map(|a| (a - auc_mean).powi(2)).sum::<f64>() / k).sqrt();
    let (scores, labels): (Vec<f64>, Vec<bool>) = results.iter().flat_map(|(_, p)| p.iter().copied()).unzip();
    let pooled = classification_metrics(&scores, &labels);

    let full = train(spec, data)?;
    let train_scores: Vec<f64> = data.rows.iter().map(|x| full.score(x)).collect();
    let importance = feature_importance(&full).ok();

    Ok(EvalReport {
        model: spec.kind,
        hyperparameters: spec.hyperparameters.clone(),
        seed,
        model_seed: spec.seed,
        folds,
        repeats,
        n_items: data.len(),
        auc_mean,
        auc_std,
        fold_aucs,
        accuracy: pooled.accuracy,
        precision: pooled.precision,
        recall: pooled.recall,
        f1: pooled.f1,
        training: classification_metrics(&train_scores, &data.labels),
        importance,
        fold_assignments: assignments,
    })
}

/// Random-forest impurity importances by feature name.
pub fn feature_importance(model: &TrainedModel) -> Result<BTreeMap<String, f64>, LearnerError> {
    let imp = model.forest_importances().ok_or(LearnerError::WrongModelKind(model.kind()))?;
    Ok(model.feature_names.iter().cloned().zip(imp.iter().copied()).collect())
}

/// Text table with one row per model.
pub fn eval_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<20} {:>6} {:>6} {:>6} {:>9} {:>6} {:>8} {:>9}",
        "model", "AUC", "std", "acc", "precision", "recall", "f1-score", "train-acc"
    )
    .unwrap();
    for r in reports {
        writeln!(
            out,
            "{:<20} {:>6.2} {:>6.2} {:>6.2} {:>9.2} {:>6.2} {:>8.2} {:>9.2}",
            r.model.as_str(),
            r.auc_mean,
            r.auc_std,
            r.accuracy,
            r.precision,
            r.recall,
            r.f1,
            r.training.accuracy
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferItem {
    pub image_id: String,
    pub score: f64,
    pub predicted_viral: bool,
    pub label: ViralityClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub model: ModelKind,
    pub n_items: usize,
    pub n_labeled_viral: usize,
    /// Items labeled viral that the model also predicts viral.
    pub hits: usize,
    pub predicted_viral: usize,
    pub items: Vec<TransferItem>,
}

/// Scores every holdout item; labels may be absent or all one class.
pub fn transfer_evaluate(model: &TrainedModel, holdout: &[FeatureVector]) -> Result<TransferReport, LearnerError> {
    if model.n_features() != N_FEATURES {
        return Err(LearnerError::DimensionMismatch { expected: model.n_features(), found: N_FEATURES });
    }
    let items: Vec<TransferItem> = holdout
        .iter()
        .map(|v| {
            let score = model.score(&v.values);
            TransferItem { image_id: v.image_id.clone(), score, predicted_viral: score > 0.5, label: v.label }
        })
        .collect();
    let labeled_viral = || items.iter().filter(|i| i.label == ViralityClass::Viral);
    Ok(TransferReport {
        model: model.kind(),
        n_items: items.len(),
        n_labeled_viral: labeled_viral().count(),
        hits: labeled_viral().filter(|i| i.predicted_viral).count(),
        predicted_viral: items.iter().filter(|i| i.predicted_viral).count(),
        items,
    })
}
