//! End-to-end experiment runs: manifest to tasks, annotations to agreement
//! and consensus, captions to the word threshold, then vectors, evaluation
//! and transfer. Every artifact carries the seed and configuration hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agreement::{agreement_table, AgreementError, AgreementReport, Band};
use crate::codebook::{load_codebook, AnnotationRecord, Codebook, CodebookError};
use crate::features::{
    extract_all, read_vectors_csv, select_threshold, vectorize, write_cdf_csv, write_vectors_csv,
    write_word_counts_csv, read_word_counts_csv, FeatureError, WordCount, FeatureVector, OcrAdapter, SlotKind, ThresholdAnalysis,
    WordCountRow, FEATURE_SCHEMA,
};
use crate::learners::{
    cross_validate, eval_table, train, transfer_evaluate, Dataset, EvalReport, LearnerError, ModelKind,
    ModelSpec, TrainedModel, TransferReport,
};
use crate::store::{
    consensus, ingest_manifest, write_consensus_csv, AnnotationStore, ClusterManifest, ImageTask,
    SamplingPlan, StoreError, ViralityClass,
};

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage `{stage}`: {} image(s) lack annotations{}", images.len(), preview(images))]
    MissingAnnotations { stage: &'static str, images: Vec<String> },
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: StageError,
    },
}

fn preview(images: &[String]) -> String {
    if images.is_empty() {
        return String::new();
    }
    let head: Vec<&str> = images.iter().take(5).map(String::as_str).collect();
    let more = if images.len() > 5 { ", ..." } else { "" };
    format!(" ({}{more})", head.join(", "))
}

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageError>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Stage { stage, source: e.into() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub top_k: usize,
    pub bottom_k: usize,
    pub sample_from_top: usize,
    pub sample_from_bottom: usize,
}

fn default_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}

fn ten() -> usize {
    10
}

/// Run configuration. Relative paths resolve against the data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    /// Codebook document; the bundled one when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook: Option<PathBuf>,
    pub annotations: PathBuf,
    /// Directory of caption transcripts named after the images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_dir: Option<PathBuf>,
    /// OCR command line; the image path is appended as the last argument.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_command: Option<String>,
    pub sampling: Sampling,
    pub seed: u64,
    /// Word threshold to use instead of the selected one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<u32>,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    #[serde(default = "ten")]
    pub folds: usize,
    #[serde(default = "ten")]
    pub repeats: usize,
    /// Vectors CSV scored by every trained model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|_| PipelineError::MissingInput(path.to_path_buf()))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON form, ignoring `output_dir` so that a
    /// rerun elsewhere carries the same hash.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("output_dir");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { seed: self.seed, config_hash: self.config_hash() }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.models.is_empty() {
            return bad("no models listed");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if self.repeats < 1 {
            return bad("repeats must be at least 1");
        }
        if self.threshold == Some(0) {
            return bad("threshold must be at least 1");
        }
        if self.text_dir.is_some() == self.ocr_command.is_some() {
            return bad("set exactly one of text_dir and ocr_command");
        }
        Ok(())
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    /// Comment line placed at the top of CSV artifacts.
    pub fn csv_line(&self) -> String {
        format!("seed={},config_hash={}", self.seed, self.config_hash)
    }
}

/// A JSON artifact: provenance next to the payload's own fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_artifact<T: Serialize>(path: &Path, provenance: &Provenance, body: &T) -> Result<(), StageError> {
    let wrapped = Artifact { provenance: provenance.clone(), body };
    let mut text = serde_json::to_string_pretty(&wrapped)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_artifact<T: DeserializeOwned>(path: &Path) -> Result<Artifact<T>, StageError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_text(path: &Path, provenance: &Provenance, body: &str) -> Result<(), StageError> {
    fs::write(path, format!("# {}\n{body}", provenance.csv_line()))?;
    Ok(())
}

fn csv_file<F>(path: &Path, f: F) -> Result<(), StageError>
where
    F: FnOnce(&mut Vec<u8>) -> Result<(), StageError>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskList {
    pub tasks: Vec<ImageTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdArtifact {
    pub analysis: ThresholdAnalysis,
    /// Threshold used for vectorization.
    pub threshold: u32,
    pub overridden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: ModelKind,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub accuracy: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transfer_hits: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_tasks: usize,
    pub n_records: usize,
    pub n_raters: usize,
    pub band_counts: BTreeMap<String, usize>,
    pub threshold: u32,
    pub threshold_p_value: f64,
    pub models: Vec<ModelSummary>,
    pub best_model: ModelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_items: Option<usize>,
}

impl RunSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "tasks: {}  records: {}  raters per image: {}", self.n_tasks, self.n_records, self.n_raters).unwrap();
        let bands: Vec<String> = self.band_counts.iter().map(|(b, n)| format!("{b}={n}")).collect();
        writeln!(s, "agreement bands: {}", bands.join(" ")).unwrap();
        writeln!(s, "word threshold: {} (KS p = {:.3e})", self.threshold, self.threshold_p_value).unwrap();
        for m in &self.models {
            write!(s, "{:<20} auc {:.3} +- {:.3}  acc {:.3}  f1 {:.3}", m.model.as_str(), m.auc_mean, m.auc_std, m.accuracy, m.f1).unwrap();
            if let (Some(h), Some(n)) = (m.transfer_hits, self.holdout_items) {
                write!(s, "  transfer {h}/{n}").unwrap();
            }
            s.push('\n');
        }
        writeln!(s, "best: {}", self.best_model).unwrap();
        s
    }
}

/// Paths of the artifacts inside a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }
    pub fn tasks(&self) -> PathBuf {
        self.root.join("tasks.json")
    }
    pub fn agreement(&self) -> PathBuf {
        self.root.join("agreement.json")
    }
    pub fn agreement_table(&self) -> PathBuf {
        self.root.join("agreement.txt")
    }
    pub fn consensus(&self) -> PathBuf {
        self.root.join("consensus.csv")
    }
    pub fn word_counts(&self) -> PathBuf {
        self.root.join("word_counts.csv")
    }
    pub fn threshold(&self) -> PathBuf {
        self.root.join("threshold.json")
    }
    pub fn cdf(&self) -> PathBuf {
        self.root.join("cdf.csv")
    }
    pub fn vectors(&self) -> PathBuf {
        self.root.join("vectors.csv")
    }
    pub fn eval(&self, kind: ModelKind) -> PathBuf {
        self.root.join("eval").join(format!("{kind}.json"))
    }
    pub fn eval_table(&self) -> PathBuf {
        self.root.join("eval_table.txt")
    }
    pub fn model(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(format!("{kind}.json"))
    }
    pub fn transfer(&self) -> PathBuf {
        self.root.join("transfer.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn summary_text(&self) -> PathBuf {
        self.root.join("summary.txt")
    }
}

fn require(path: PathBuf) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingInput(path))
    }
}

pub fn load_config_codebook(cfg: &ExperimentConfig, base: &Path) -> Result<Codebook, PipelineError> {
    match &cfg.codebook {
        None => Ok(Codebook::canonical()),
        Some(p) => {
            let path = require(resolve(base, p))?;
            let text = fs::read_to_string(&path).stage("codebook")?;
            load_codebook(&text).stage("codebook")
        }
    }
}

/// Replays an annotation log without creating or modifying it.
pub fn read_annotation_log(cb: &Codebook, path: &Path) -> Result<Vec<AnnotationRecord>, PipelineError> {
    let path = require(path.to_path_buf())?;
    let store = AnnotationStore::replay(cb.clone(), &path).stage("annotations")?;
    Ok(store.records().cloned().collect())
}

/// One configured run: every stage reads its inputs from the configuration
/// or from artifacts of earlier stages, and writes its own artifacts.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub base: PathBuf,
    pub layout: RunLayout,
    pub provenance: Provenance,
    pub codebook: Codebook,
}

/// Live annotation records grouped by image.
pub type RecordsByImage = BTreeMap<String, Vec<AnnotationRecord>>;

impl Run {
    pub fn new(cfg: ExperimentConfig, base: &Path) -> Result<Run, PipelineError> {
        cfg.validate()?;
        let layout = RunLayout::new(resolve(base, &cfg.output_dir));
        fs::create_dir_all(layout.root.join("eval")).stage("setup")?;
        fs::create_dir_all(layout.root.join("models")).stage("setup")?;
        let codebook = load_config_codebook(&cfg, base)?;
        Ok(Run { provenance: cfg.provenance(), cfg, base: base.to_path_buf(), layout, codebook })
    }

    fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.base, p)
    }

    /// Samples tasks from the manifest and writes the task list.
    pub fn ingest(&self) -> Result<Vec<ImageTask>, PipelineError> {
        let manifest = ClusterManifest::load(&require(self.path(&self.cfg.manifest))?).stage("ingest")?;
        let s = &self.cfg.sampling;
        let plan = SamplingPlan {
            top_k: s.top_k,
            bottom_k: s.bottom_k,
            sample_from_top: s.sample_from_top,
            sample_from_bottom: s.sample_from_bottom,
            seed: self.cfg.seed,
        };
        let tasks = ingest_manifest(&manifest, &plan).stage("ingest")?;
        if tasks.is_empty() {
            return Err(PipelineError::MissingAnnotations { stage: "ingest", images: Vec::new() });
        }
        write_artifact(&self.layout.tasks(), &self.provenance, &TaskList { tasks: tasks.clone() }).stage("ingest")?;
        Ok(tasks)
    }

    pub fn load_tasks(&self) -> Result<Vec<ImageTask>, PipelineError> {
        let a: Artifact<TaskList> = read_artifact(&require(self.layout.tasks())?).stage("ingest")?;
        Ok(a.body.tasks)
    }

    /// Records for every task; fails listing the tasks nobody annotated.
    pub fn annotations(&self, tasks: &[ImageTask]) -> Result<RecordsByImage, PipelineError> {
        let records = read_annotation_log(&self.codebook, &self.path(&self.cfg.annotations))?;
        let mut by_image = RecordsByImage::new();
        for r in records {
            by_image.entry(r.image_id.clone()).or_default().push(r);
        }
        let missing: Vec<String> =
            tasks.iter().filter(|t| !by_image.contains_key(&t.image_id)).map(|t| t.image_id.clone()).collect();
        if !missing.is_empty() {
            return Err(PipelineError::MissingAnnotations { stage: "annotations", images: missing });
        }
        by_image.retain(|id, _| tasks.iter().any(|t| &t.image_id == id));
        Ok(by_image)
    }

    pub fn agreement(&self, by_image: &RecordsByImage) -> Result<AgreementReport, PipelineError> {
        let report = agreement_table(by_image.values().flatten(), &self.codebook).stage("agreement")?;
        write_artifact(&self.layout.agreement(), &self.provenance, &report).stage("agreement")?;
        write_text(&self.layout.agreement_table(), &self.provenance, &report.to_table(&self.codebook)).stage("agreement")?;
        Ok(report)
    }

    /// Word counts for every task image from the caption source.
    pub fn words(&self, tasks: &[ImageTask]) -> Result<Vec<WordCountRow>, PipelineError> {
        let adapter = match (&self.cfg.text_dir, &self.cfg.ocr_command) {
            (Some(dir), _) => OcrAdapter::SidecarDir(require(self.path(dir))?),
            (None, Some(cmd)) => {
                OcrAdapter::command(cmd).ok_or_else(|| PipelineError::InvalidConfig("empty ocr_command".into()))?
            }
            (None, None) => unreachable!("validated"),
        };
        let images: Vec<(String, PathBuf)> =
            tasks.iter().map(|t| (t.image_id.clone(), self.path(&t.image_path))).collect();
        let counts: Vec<_> = extract_all(&images, &adapter).into_iter().collect::<Result<_, _>>().stage("words")?;
        let rows: Vec<WordCountRow> = counts
            .into_iter()
            .zip(tasks)
            .map(|(wc, t)| WordCountRow {
                image_id: wc.image_id,
                count: wc.count,
                source: wc.source,
                virality_class: t.virality_class,
            })
            .collect();
        let line = self.provenance.csv_line();
        csv_file(&self.layout.word_counts(), |buf| Ok(write_word_counts_csv(&rows, buf, Some(&line))?)).stage("words")?;
        Ok(rows)
    }

    pub fn load_words(&self) -> Result<Vec<WordCountRow>, PipelineError> {
        let f = fs::File::open(require(self.layout.word_counts())?).stage("words")?;
        read_word_counts_csv(f).stage("words")
    }

    pub fn threshold(&self, rows: &[WordCountRow]) -> Result<ThresholdArtifact, PipelineError> {
        let class_counts = |c: ViralityClass| -> Vec<u32> {
            rows.iter().filter(|r| r.virality_class == c).map(|r| r.count).collect()
        };
        let analysis = select_threshold(&class_counts(ViralityClass::Viral), &class_counts(ViralityClass::Nonviral))
            .stage("threshold")?;
        let line = self.provenance.csv_line();
        csv_file(&self.layout.cdf(), |buf| Ok(write_cdf_csv(&analysis.cdf, buf, Some(&line))?)).stage("threshold")?;
        let artifact = ThresholdArtifact {
            threshold: self.cfg.threshold.unwrap_or(analysis.threshold),
            analysis,
            overridden: self.cfg.threshold.is_some(),
        };
        write_artifact(&self.layout.threshold(), &self.provenance, &artifact).stage("threshold")?;
        Ok(artifact)
    }

    pub fn load_threshold(&self) -> Result<ThresholdArtifact, PipelineError> {
        Ok(read_artifact::<ThresholdArtifact>(&require(self.layout.threshold())?).stage("threshold")?.body)
    }

    /// Consensus labels and feature vectors, in task order.
    pub fn vectorize(
        &self,
        tasks: &[ImageTask],
        by_image: &RecordsByImage,
        rows: &[WordCountRow],
        threshold: u32,
    ) -> Result<Vec<FeatureVector>, PipelineError> {
        let labels: Vec<_> = tasks
            .iter()
            .map(|t| {
                let records: Vec<&AnnotationRecord> = by_image.get(&t.image_id).into_iter().flatten().collect();
                consensus(&self.codebook, &t.image_id, &records).map(|l| (l, t.virality_class))
            })
            .collect::<Result<_, _>>()
            .stage("consensus")?;
        let line = self.provenance.csv_line();
        csv_file(&self.layout.consensus(), |buf| {
            use std::io::Write;
            writeln!(buf, "# {line}")?;
            Ok(write_consensus_csv(&self.codebook, &labels, &mut *buf)?)
        })
        .stage("consensus")?;

        let vectors: Vec<FeatureVector> = labels
            .iter()
            .map(|(l, class)| {
                let row = rows
                    .iter()
                    .find(|r| r.image_id == l.image_id)
                    .ok_or_else(|| PipelineError::UnknownImage(l.image_id.clone()))?;
                let wc = WordCount { image_id: row.image_id.clone(), count: row.count, source: row.source };
                vectorize(l, &wc, threshold, *class).stage("vectorize")
            })
            .collect::<Result<_, _>>()?;
        csv_file(&self.layout.vectors(), |buf| Ok(write_vectors_csv(&vectors, buf, Some(&line))?)).stage("vectorize")?;
        Ok(vectors)
    }

    pub fn load_vectors(&self) -> Result<Vec<FeatureVector>, PipelineError> {
        read_vectors_file(&self.layout.vectors())
    }

    /// Cross-validates every configured model.
    pub fn evaluate(&self, vectors: &[FeatureVector]) -> Result<Vec<EvalReport>, PipelineError> {
        let data = Dataset::from_vectors(vectors).stage("evaluate")?;
        let mut reports = Vec::new();
        for &kind in &self.cfg.models {
            let spec = ModelSpec::new(kind, self.cfg.seed);
            let report = cross_validate(&spec, &data, self.cfg.folds, self.cfg.repeats, self.cfg.seed).stage("evaluate")?;
            write_artifact(&self.layout.eval(kind), &self.provenance, &report).stage("evaluate")?;
            reports.push(report);
        }
        write_text(&self.layout.eval_table(), &self.provenance, &eval_table(&reports)).stage("evaluate")?;
        Ok(reports)
    }

    pub fn load_reports(&self) -> Result<Vec<EvalReport>, PipelineError> {
        self.cfg
            .models
            .iter()
            .map(|&k| Ok(read_artifact::<EvalReport>(&require(self.layout.eval(k))?).stage("evaluate")?.body))
            .collect()
    }

    /// Fits every configured model on all vectors.
    pub fn train(&self, vectors: &[FeatureVector]) -> Result<Vec<TrainedModel>, PipelineError> {
        let data = Dataset::from_vectors(vectors).stage("train")?;
        self.cfg
            .models
            .iter()
            .map(|&kind| {
                let model = train(&ModelSpec::new(kind, self.cfg.seed), &data).stage("train")?;
                write_artifact(&self.layout.model(kind), &self.provenance, &model).stage("train")?;
                Ok(model)
            })
            .collect()
    }

    pub fn load_model(&self, kind: ModelKind) -> Result<TrainedModel, PipelineError> {
        Ok(read_artifact::<TrainedModel>(&require(self.layout.model(kind))?).stage("train")?.body)
    }

    /// Scores the configured holdout with every model; `None` without one.
    pub fn transfer(&self, models: &[TrainedModel]) -> Result<Option<Vec<TransferReport>>, PipelineError> {
        let Some(p) = &self.cfg.holdout else {
            return Ok(None);
        };
        let holdout = read_vectors_file(&self.path(p))?;
        let reports: Vec<TransferReport> =
            models.iter().map(|m| transfer_evaluate(m, &holdout)).collect::<Result<_, _>>().stage("transfer")?;
        write_artifact(&self.layout.transfer(), &self.provenance, &TransferArtifact { reports: reports.clone() })
            .stage("transfer")?;
        Ok(Some(reports))
    }

    pub fn summarize(
        &self,
        tasks: &[ImageTask],
        by_image: &RecordsByImage,
        agreement: &AgreementReport,
        threshold: &ThresholdArtifact,
        reports: &[EvalReport],
        transfers: Option<&[TransferReport]>,
    ) -> Result<RunSummary, PipelineError> {
        let holdout_items = transfers.and_then(|t| t.first()).map(|t| t.n_items);
        let n_records = by_image.values().map(Vec::len).sum();
        let summary = summarize(tasks.len(), n_records, agreement, threshold, reports, transfers.unwrap_or(&[]), holdout_items);
        write_artifact(&self.layout.summary(), &self.provenance, &summary).stage("summary")?;
        write_text(&self.layout.summary_text(), &self.provenance, &summary.to_text()).stage("summary")?;
        Ok(summary)
    }
}

pub fn read_vectors_file(path: &Path) -> Result<Vec<FeatureVector>, PipelineError> {
    let f = fs::File::open(require(path.to_path_buf())?).stage("vectorize")?;
    read_vectors_csv(f).stage("vectorize")
}

/// Runs every stage and writes all artifacts under `cfg.output_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig, base: &Path) -> Result<RunSummary, PipelineError> {
    let run = Run::new(cfg.clone(), base)?;
    let tasks = run.ingest()?;
    let by_image = run.annotations(&tasks)?;
    let agreement = run.agreement(&by_image)?;
    let rows = run.words(&tasks)?;
    let threshold = run.threshold(&rows)?;
    let vectors = run.vectorize(&tasks, &by_image, &rows, threshold.threshold)?;
    let reports = run.evaluate(&vectors)?;
    let models = run.train(&vectors)?;
    let transfers = run.transfer(&models)?;
    run.summarize(&tasks, &by_image, &agreement, &threshold, &reports, transfers.as_deref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferArtifact {
    pub reports: Vec<TransferReport>,
}

fn summarize(
    n_tasks: usize,
    n_records: usize,
    agreement: &AgreementReport,
    threshold: &ThresholdArtifact,
    reports: &[EvalReport],
    transfers: &[TransferReport],
    holdout_items: Option<usize>,
) -> RunSummary {
    let mut band_counts = BTreeMap::new();
    for b in agreement.band.values() {
        *band_counts.entry(band_name(*b).to_string()).or_insert(0) += 1;
    }
    let models: Vec<ModelSummary> = reports
        .iter()
        .map(|r| ModelSummary {
            model: r.model,
            auc_mean: r.auc_mean,
            auc_std: r.auc_std,
            accuracy: r.accuracy,
            f1: r.f1,
            transfer_hits: transfers.iter().find(|t| t.model == r.model).map(|t| t.hits),
        })
        .collect();
    let best_model = models
        .iter()
        .fold(None::<&ModelSummary>, |best, m| match best {
            Some(b) if b.auc_mean >= m.auc_mean => Some(b),
            _ => Some(m),
        })
        .map(|m| m.model)
        .expect("at least one model");
    RunSummary {
        n_tasks,
        n_records,
        n_raters: agreement.n_raters,
        band_counts,
        threshold: threshold.threshold,
        threshold_p_value: threshold.analysis.p_value,
        models,
        best_model,
        holdout_items,
    }
}

fn band_name(b: Band) -> &'static str {
    match b {
        Band::AlmostPerfect => "almost_perfect",
        Band::Substantial => "substantial",
        Band::Moderate => "moderate",
        Band::FairOrBelow => "fair_or_below",
        Band::Undefined => "undefined",
    }
}

/// Minimum class-prevalence gap for a trait to count as typical of viral
/// images.
pub const MIN_TRAIT_DELTA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitReport {
    /// `slot` for binary traits, `slot=level` for coded ones.
    pub name: String,
    pub slot: String,
    /// Forest importance of the slot, or the prevalence gap for models
    /// without importances.
    pub weight: f64,
    /// 1-based position among the image's traits.
    pub rank: usize,
    /// Viral minus non-viral training share of this exact value.
    pub prevalence_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub image_id: String,
    pub model: ModelKind,
    pub score: f64,
    pub predicted_viral: bool,
    pub traits: Vec<TraitReport>,
    pub top_contributors: Vec<String>,
    /// Traits the model treats as typical of viral images.
    pub characteristic_traits: Vec<String>,
    pub lacks_characteristic_traits: bool,
    pub verdict: String,
}

fn trait_name(slot: usize, value: f64) -> Option<String> {
    let def = &FEATURE_SCHEMA[slot];
    match def.kind {
        SlotKind::Binary(_) | SlotKind::WordsOverThreshold => (value == 1.0).then(|| def.name.to_string()),
        SlotKind::Code { levels, first_code, .. } => {
            let code = value as usize;
            (code >= first_code as usize)
                .then(|| levels.get(code - first_code as usize))
                .flatten()
                .map(|l| format!("{}={l}", def.name))
        }
    }
}

/// Describes why `model` scores one vectorized image as it does.
pub fn explain(image_id: &str, vectors: &[FeatureVector], model: &TrainedModel) -> Result<ExplanationReport, PipelineError> {
    let v = vectors
        .iter()
        .find(|v| v.image_id == image_id)
        .ok_or_else(|| PipelineError::UnknownImage(image_id.to_string()))?;
    let score = model.predict_score(&v.values).stage("explain")?;
    let delta = |slot: usize, value: f64| {
        model
            .prevalence
            .get(slot)
            .and_then(|p| p.iter().find(|x| x.value == value))
            .map_or(0.0, |x| x.delta())
    };
    let importances = model.forest_importances();

    // Every (slot, value) that can be a trait, with its weight.
    let mut candidates: Vec<(usize, f64, String, f64)> = Vec::new();
    for slot in 0..FEATURE_SCHEMA.len() {
        let values: Vec<f64> = model.prevalence.get(slot).map(|p| p.iter().map(|x| x.value).collect()).unwrap_or_default();
        for value in values {
            if let Some(name) = trait_name(slot, value) {
                let w = importances.map_or_else(|| delta(slot, value), |imp| imp[slot]);
                candidates.push((slot, value, name, w));
            }
        }
    }
    let characteristic: Vec<String> = match importances {
        Some(imp) => {
            let mut slots: Vec<usize> = (0..imp.len()).collect();
            slots.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]).then(a.cmp(&b)));
            slots.truncate(5);
            candidates
                .iter()
                .filter(|(s, val, _, _)| slots.contains(s) && delta(*s, *val) >= MIN_TRAIT_DELTA)
                .map(|c| c.2.clone())
                .collect()
        }
        None => {
            let mut c: Vec<_> = candidates.iter().filter(|c| c.3 >= MIN_TRAIT_DELTA).collect();
            c.sort_by(|a, b| b.3.total_cmp(&a.3).then(a.0.cmp(&b.0)));
            c.into_iter().take(5).map(|c| c.2.clone()).collect()
        }
    };

    let mut present: Vec<(usize, String, f64, f64)> = (0..FEATURE_SCHEMA.len())
        .filter_map(|slot| {
            let value = v.values[slot];
            let name = trait_name(slot, value)?;
            let w = importances.map_or_else(|| delta(slot, value), |imp| imp[slot]);
            Some((slot, name, w, delta(slot, value)))
        })
        .collect();
    present.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let traits: Vec<TraitReport> = present
        .into_iter()
        .enumerate()
        .map(|(i, (slot, name, weight, d))| TraitReport {
            name,
            slot: FEATURE_SCHEMA[slot].name.to_string(),
            weight,
            rank: i + 1,
            prevalence_delta: d,
        })
        .collect();
    let top_contributors: Vec<String> = traits.iter().take(5).map(|t| t.name.clone()).collect();
    let lacks = !traits.iter().any(|t| characteristic.contains(&t.name));
    let predicted_viral = score > 0.5;

    let shown: Vec<&str> = traits
        .iter()
        .filter(|t| characteristic.contains(&t.name))
        .map(|t| t.name.as_str())
        .collect();
    let verdict = format!(
        "predicted {} (score {score:.2}); {}",
        if predicted_viral { "viral" } else { "non-viral" },
        if lacks {
            "lacks characteristic traits of virality".to_string()
        } else {
            format!("shows characteristic traits of virality: {}", shown.join(", "))
        }
    );
    Ok(ExplanationReport {
        image_id: image_id.to_string(),
        model: model.kind(),
        score,
        predicted_viral,
        traits,
        top_contributors,
        characteristic_traits: characteristic,
        lacks_characteristic_traits: lacks,
        verdict,
    })
}
