//! Binary classifiers over feature vectors, written from scratch, plus the
//! repeated stratified cross-validation harness used to compare them.

mod boost;
mod cv;
mod knn;
mod linear;
mod metrics;
mod mlp;
mod nb;
mod tree;

pub use cv::{
    cross_validate, eval_table, feature_importance, stratified_folds, transfer_evaluate, EvalReport,
    TransferItem, TransferReport,
};
pub use linear::{fit_logistic, logistic_gradient, logistic_objective, LinearModel};
pub use metrics::{auc, classification_metrics, ClassificationMetrics};
pub use mlp::Mlp;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureVector, FEATURE_NAMES};
use crate::store::ViralityClass;

#[derive(Debug, Error, PartialEq)]
pub enum LearnerError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training data contains a single class")]
    SingleClassData,
    #[error("labels contain a single class")]
    SingleClassLabels,
    #[error("each class needs at least 2 examples, found {viral} viral and {nonviral} non-viral")]
    TooFewPerClass { viral: usize, nonviral: usize },
    #[error("expected {expected} features, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{0} scores but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("feature value is not finite in row `{0}`")]
    NonFinite(String),
    #[error("example `{0}` has no virality label")]
    UnlabeledExample(String),
    #[error("unknown model kind `{0}`")]
    UnknownModel(String),
    #[error("`{key}` is not a hyperparameter of {kind}")]
    UnknownHyperparameter { kind: ModelKind, key: String },
    #[error("invalid value {value} for `{key}`")]
    InvalidHyperparameter { key: String, value: f64 },
    #[error("{folds}-fold validation needs at least {folds} examples per class, smallest class has {smallest}")]
    TooFewExamples { folds: usize, smallest: usize },
    #[error("feature importance needs a random_forest model, got {0}")]
    WrongModelKind(ModelKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    RandomForest,
    Adaboost,
    Knn,
    SvmLinear,
    LogisticRegression,
    GaussianNb,
    DecisionTree,
    Mlp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::RandomForest,
        ModelKind::Adaboost,
        ModelKind::Knn,
        ModelKind::SvmLinear,
        ModelKind::LogisticRegression,
        ModelKind::GaussianNb,
        ModelKind::DecisionTree,
        ModelKind::Mlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::RandomForest => "random_forest",
            ModelKind::Adaboost => "adaboost",
            ModelKind::Knn => "knn",
            ModelKind::SvmLinear => "svm_linear",
            ModelKind::LogisticRegression => "logistic_regression",
            ModelKind::GaussianNb => "gaussian_nb",
            ModelKind::DecisionTree => "decision_tree",
            ModelKind::Mlp => "mlp",
        }
    }

    fn defaults(self) -> &'static [(&'static str, f64)] {
        match self {
            ModelKind::RandomForest => &[
                ("n_trees", 100.0),
                ("max_features", 6.0),
                ("max_depth", 0.0),
                ("min_samples_leaf", 1.0),
            ],
            ModelKind::Adaboost => &[("n_estimators", 50.0)],
            ModelKind::Knn => &[("k", 5.0)],
            ModelKind::SvmLinear => &[("c", 1.0), ("epochs", 200.0), ("eta0", 0.1)],
            ModelKind::LogisticRegression => &[("lambda", 0.01), ("epochs", 500.0)],
            ModelKind::GaussianNb => &[("var_smoothing", 1e-9)],
            ModelKind::DecisionTree => &[("max_depth", 0.0), ("min_samples_leaf", 1.0)],
            ModelKind::Mlp => &[
                ("hidden", 16.0),
                ("epochs", 500.0),
                ("learning_rate", 0.5),
                ("init_scale", 0.5),
            ],
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = LearnerError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| LearnerError::UnknownModel(s.to_string()))
    }
}

/// Which model to train, with every hyperparameter filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hyperparameters: BTreeMap<String, f64>,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, seed: u64) -> Self {
        let hyperparameters = kind.defaults().iter().map(|(k, v)| (k.to_string(), *v)).collect();
        ModelSpec { kind, hyperparameters, seed }
    }

    pub fn with(mut self, key: &str, value: f64) -> Result<Self, LearnerError> {
        let Some(slot) = self.hyperparameters.get_mut(key) else {
            return Err(LearnerError::UnknownHyperparameter { kind: self.kind, key: key.to_string() });
        };
        let whole = value.fract() == 0.0;
        let ok = value.is_finite()
            && match key {
                "max_depth" => value >= 0.0 && whole,
                "init_scale" => value >= 0.0,
                "c" | "eta0" | "lambda" | "var_smoothing" | "learning_rate" => value > 0.0,
                _ => value >= 1.0 && whole,
            };
        if !ok {
            return Err(LearnerError::InvalidHyperparameter { key: key.to_string(), value });
        }
        *slot = value;
        Ok(self)
    }

    fn get(&self, key: &str) -> f64 {
        self.hyperparameters[key]
    }

    fn count(&self, key: &str) -> usize {
        self.get(key) as usize
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Labeled rows sharing one feature naming.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// `true` = viral.
    pub labels: Vec<bool>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        ids: Vec<String>,
        rows: Vec<Vec<f64>>,
        labels: Vec<bool>,
    ) -> Result<Self, LearnerError> {
        if rows.len() != labels.len() || rows.len() != ids.len() {
            return Err(LearnerError::LengthMismatch(rows.len(), labels.len()));
        }
        for (id, row) in ids.iter().zip(&rows) {
            if row.len() != feature_names.len() {
                return Err(LearnerError::DimensionMismatch { expected: feature_names.len(), found: row.len() });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(LearnerError::NonFinite(id.clone()));
            }
        }
        Ok(Dataset { feature_names, ids, rows, labels })
    }

    /// Builds a dataset from labeled vectors; unlabeled ones are an error.
    pub fn from_vectors(vectors: &[FeatureVector]) -> Result<Self, LearnerError> {
        let mut labels = Vec::with_capacity(vectors.len());
        for v in vectors {
            labels.push(match v.label {
                ViralityClass::Viral => true,
                ViralityClass::Nonviral => false,
                ViralityClass::Unlabeled => return Err(LearnerError::UnlabeledExample(v.image_id.clone())),
            });
        }
        Dataset::new(
            FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            vectors.iter().map(|v| v.image_id.clone()).collect(),
            vectors.iter().map(|v| v.values.to_vec()).collect(),
            labels,
        )
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_viral(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Share of each class taking a given value in one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuePrevalence {
    pub value: f64,
    pub viral: f64,
    pub nonviral: f64,
}

impl ValuePrevalence {
    pub fn delta(&self) -> f64 {
        self.viral - self.nonviral
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
enum Fitted {
    RandomForest(tree::Forest),
    Adaboost(boost::AdaBoost),
    Knn(knn::Knn),
    SvmLinear(linear::LinearModel),
    LogisticRegression(linear::LinearModel),
    GaussianNb(nb::GaussianNb),
    DecisionTree(tree::Tree),
    Mlp(Mlp),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub feature_names: Vec<String>,
    /// Per feature, the class-conditional share of each observed value in
    /// the training set.
    pub prevalence: Vec<Vec<ValuePrevalence>>,
    fitted: Fitted,
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Score in `[0, 1]`; higher means more likely viral.
    pub fn predict_score(&self, x: &[f64]) -> Result<f64, LearnerError> {
        if x.len() != self.n_features() {
            return Err(LearnerError::DimensionMismatch { expected: self.n_features(), found: x.len() });
        }
        Ok(self.score(x))
    }

    pub fn predict_viral(&self, x: &[f64]) -> Result<bool, LearnerError> {
        Ok(self.predict_score(x)? > 0.5)
    }

    fn score(&self, x: &[f64]) -> f64 {
        match &self.fitted {
            Fitted::RandomForest(m) => m.score(x),
            Fitted::Adaboost(m) => m.score(x),
            Fitted::Knn(m) => m.score(x),
            Fitted::SvmLinear(m) | Fitted::LogisticRegression(m) => m.score(x),
            Fitted::GaussianNb(m) => m.score(x),
            Fitted::DecisionTree(m) => m.predict(x),
            Fitted::Mlp(m) => m.score(x),
        }
    }

    /// Normalised impurity importances, random forests only.
    pub fn forest_importances(&self) -> Option<&[f64]> {
        match &self.fitted {
            Fitted::RandomForest(f) => Some(&f.importances),
            _ => None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Wraps a fitted MLP, e.g. one built with [`Mlp::zeroed`].
pub fn mlp_model(mlp: Mlp, feature_names: Vec<String>, seed: u64) -> TrainedModel {
    TrainedModel {
        spec: ModelSpec::new(ModelKind::Mlp, seed),
        prevalence: vec![Vec::new(); feature_names.len()],
        feature_names,
        fitted: Fitted::Mlp(mlp),
    }
}

fn prevalence(data: &Dataset) -> Vec<Vec<ValuePrevalence>> {
    let nv = data.n_viral().max(1) as f64;
    let nn = (data.len() - data.n_viral()).max(1) as f64;
    (0..data.n_features())
        .map(|j| {
            let mut counts: BTreeMap<u64, (f64, usize, usize)> = BTreeMap::new();
            for (row, &y) in data.rows.iter().zip(&data.labels) {
                let v = row[j];
                // Ordered key for finite floats.
                let key = if v >= 0.0 { v.to_bits() ^ (1 << 63) } else { !v.to_bits() };
                let e = counts.entry(key).or_insert((v, 0, 0));
                if y { e.1 += 1 } else { e.2 += 1 }
            }
            counts
                .into_values()
                .map(|(value, a, b)| ValuePrevalence { value, viral: a as f64 / nv, nonviral: b as f64 / nn })
                .collect()
        })
        .collect()
}

/// Trains one model. Needs at least two examples of each class.
pub fn train(spec: &ModelSpec, data: &Dataset) -> Result<TrainedModel, LearnerError> {
    if data.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    let viral = data.n_viral();
    let nonviral = data.len() - viral;
    if viral == 0 || nonviral == 0 {
        return Err(LearnerError::SingleClassData);
    }
    if viral < 2 || nonviral < 2 {
        return Err(LearnerError::TooFewPerClass { viral, nonviral });
    }
    let fitted = match spec.kind {
        ModelKind::RandomForest => Fitted::RandomForest(tree::Forest::fit(
            data,
            spec.count("n_trees"),
            spec.count("max_features"),
            tree::TreeParams::new(spec.count("max_depth"), spec.count("min_samples_leaf")),
            spec.seed,
        )),
        ModelKind::Adaboost => Fitted::Adaboost(boost::AdaBoost::fit(data, spec.count("n_estimators"))),
        ModelKind::Knn => Fitted::Knn(knn::Knn::fit(data, spec.count("k"))),
        ModelKind::SvmLinear => Fitted::SvmLinear(linear::fit_svm(
            data,
            spec.get("c"),
            spec.count("epochs"),
            spec.get("eta0"),
        )),
        ModelKind::LogisticRegression => Fitted::LogisticRegression(
            fit_logistic(&data.rows, &data.labels, spec.get("lambda"), spec.count("epochs")).0,
        ),
        ModelKind::GaussianNb => Fitted::GaussianNb(nb::GaussianNb::fit(data, spec.get("var_smoothing"))),
        ModelKind::DecisionTree => Fitted::DecisionTree(tree::Tree::fit_all(
            data,
            tree::TreeParams::new(spec.count("max_depth"), spec.count("min_samples_leaf")),
        )),
        ModelKind::Mlp => Fitted::Mlp(Mlp::fit(
            data,
            spec.count("hidden"),
            spec.count("epochs"),
            spec.get("learning_rate"),
            spec.get("init_scale"),
            &mut spec.rng(),
        )),
    };
    Ok(TrainedModel {
        spec: spec.clone(),
        feature_names: data.feature_names.clone(),
        prevalence: prevalence(data),
        fitted,
    })
}

#[cfg(test)]
mod tests;
