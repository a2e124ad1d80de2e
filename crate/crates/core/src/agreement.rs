//! Fleiss' kappa per annotation label and the agreement bands used to
//! summarize it.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{AnnotationRecord, Codebook};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgreementError {
    #[error("invalid rating matrix: {0}")]
    InvalidMatrix(String),
    #[error("expected agreement is 1 while observed agreement is {observed}")]
    DegenerateExpectedAgreement { observed: f64 },
    #[error("need at least two common raters, found {0}")]
    InsufficientRaters(usize),
}

/// Category counts per item for a fixed number of raters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingMatrix {
    n_raters: u32,
    counts: Vec<Vec<u32>>,
}

impl RatingMatrix {
    pub fn new(n_raters: u32, counts: Vec<Vec<u32>>) -> Result<Self, AgreementError> {
        if n_raters < 2 {
            return Err(AgreementError::InvalidMatrix("fewer than two raters".into()));
        }
        if counts.is_empty() {
            return Err(AgreementError::InvalidMatrix("no items".into()));
        }
        let k = counts[0].len();
        if k == 0 {
            return Err(AgreementError::InvalidMatrix("no categories".into()));
        }
        for (i, row) in counts.iter().enumerate() {
            if row.len() != k {
                return Err(AgreementError::InvalidMatrix(format!(
                    "item {i} has {} categories, expected {k}",
                    row.len()
                )));
            }
            let total: u32 = row.iter().sum();
            if total != n_raters {
                return Err(AgreementError::InvalidMatrix(format!(
                    "item {i} has {total} ratings, expected {n_raters}"
                )));
            }
        }
        Ok(RatingMatrix { n_raters, counts })
    }

    /// Two-category matrix from the number of raters applying a label to
    /// each item.
    pub fn binary(n_raters: u32, applied: &[u32]) -> Result<Self, AgreementError> {
        if let Some(&bad) = applied.iter().find(|&&a| a > n_raters) {
            return Err(AgreementError::InvalidMatrix(format!(
                "{bad} ratings exceed {n_raters} raters"
            )));
        }
        Self::new(n_raters, applied.iter().map(|&a| vec![a, n_raters - a]).collect())
    }

    pub fn n_raters(&self) -> u32 {
        self.n_raters
    }

    pub fn n_items(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u32>] {
        &self.counts
    }

    pub fn is_unanimous(&self) -> bool {
        self.counts
            .iter()
            .all(|row| row.contains(&self.n_raters))
    }
}

/// Fleiss' kappa.
///
/// The observed and expected agreement are rationals with integer numerator
/// and denominator, so the statistic is assembled in integer arithmetic and
/// divided once. Perfect observed agreement yields 1 even when every rating
/// falls into one category.
pub fn fleiss_kappa(m: &RatingMatrix) -> Result<f64, AgreementError> {
    let n = m.n_raters as i128;
    let items = m.counts.len() as i128;
    let k = m.counts[0].len();

    let mut sum_sq: i128 = 0;
    let mut cols = vec![0i128; k];
    for row in &m.counts {
        for (j, &c) in row.iter().enumerate() {
            sum_sq += (c as i128) * (c as i128);
            cols[j] += c as i128;
        }
    }
    let col_sq: i128 = cols.iter().map(|c| c * c).sum();

    // mean observed agreement = a / b, expected agreement = c / d
    let a = sum_sq - items * n;
    let b = items * n * (n - 1);
    let c = col_sq;
    let d = (items * n) * (items * n);

    if a == b {
        return Ok(1.0);
    }
    if c == d {
        return Err(AgreementError::DegenerateExpectedAgreement {
            observed: a as f64 / b as f64,
        });
    }
    let exact = a
        .checked_mul(d)
        .zip(c.checked_mul(b))
        .and_then(|(ad, cb)| ad.checked_sub(cb))
        .zip(d.checked_sub(c).and_then(|dc| dc.checked_mul(b)));
    match exact {
        Some((num, den)) => Ok(num as f64 / den as f64),
        None => {
            let p_obs = a as f64 / b as f64;
            let p_exp = c as f64 / d as f64;
            Ok((p_obs - p_exp) / (1.0 - p_exp))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    AlmostPerfect,
    Substantial,
    Moderate,
    FairOrBelow,
    Undefined,
}

impl Band {
    /// Above 0.8 is almost perfect; [0.6, 0.8] substantial; [0.4, 0.6)
    /// moderate.
    pub fn of(kappa: f64) -> Band {
        if kappa.is_nan() {
            Band::Undefined
        } else if kappa > 0.8 {
            Band::AlmostPerfect
        } else if kappa >= 0.6 {
            Band::Substantial
        } else if kappa >= 0.4 {
            Band::Moderate
        } else {
            Band::FairOrBelow
        }
    }

    pub fn stars(self) -> &'static str {
        match self {
            Band::AlmostPerfect => "***",
            Band::Substantial => "**",
            Band::Moderate => "*",
            Band::FairOrBelow => "",
            Band::Undefined => "n/a",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub feature_group: String,
    pub question_id: String,
    pub feature_key: String,
    pub label: String,
    pub kappa: Option<f64>,
    pub band: Band,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedImage {
    pub image_id: String,
    pub raters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n_raters: usize,
    pub n_items: usize,
    pub rows: Vec<AgreementRow>,
    pub kappa: BTreeMap<String, Option<f64>>,
    pub band: BTreeMap<String, Band>,
    /// Images whose rater count differs from the common one.
    pub excluded: Vec<ExcludedImage>,
}

impl AgreementReport {
    /// Text table grouped by feature group: label, kappa, stars.
    pub fn to_table(&self, cb: &Codebook) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Inter-annotator agreement ({} raters, {} images)",
            self.n_raters, self.n_items
        );
        let _ = writeln!(out, "{:<28} {:<28} {:>7}  band", "Feature", "Label", "Fleiss");
        let mut last_group = None;
        for row in &self.rows {
            if last_group != Some(&row.feature_group) {
                let name = cb
                    .feature_groups()
                    .iter()
                    .find(|g| g.id == row.feature_group)
                    .map(|g| format!("{} {}", g.id, g.name))
                    .unwrap_or_else(|| row.feature_group.clone());
                let _ = writeln!(out, "{name}");
                last_group = Some(&row.feature_group);
            }
            let k = row
                .kappa
                .map(|k| format!("{k:.3}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{:<28} {:<28} {:>7}  {}", "", row.label, k, row.band.stars());
        }
        if !self.excluded.is_empty() {
            let _ = writeln!(out, "excluded {} image(s) without a full rater complement", self.excluded.len());
        }
        out
    }
}

/// One binary rating matrix per feature key: how many raters selected the
/// option on each image. Only images rated by the most common number of
/// raters contribute; the rest are listed as excluded.
pub fn agreement_table<'a, I>(records: I, cb: &Codebook) -> Result<AgreementReport, AgreementError>
where
    I: IntoIterator<Item = &'a AnnotationRecord>,
{
    let mut by_image: BTreeMap<&str, BTreeMap<&str, &AnnotationRecord>> = BTreeMap::new();
    for r in records {
        by_image
            .entry(r.image_id.as_str())
            .or_default()
            .insert(r.annotator_id.as_str(), r);
    }

    let mut freq: HashMap<usize, usize> = HashMap::new();
    for raters in by_image.values() {
        *freq.entry(raters.len()).or_default() += 1;
    }
    let n_raters = freq
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)))
        .map(|(&n, _)| n)
        .unwrap_or(0);
    if n_raters < 2 {
        return Err(AgreementError::InsufficientRaters(n_raters));
    }

    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for (image, raters) in &by_image {
        if raters.len() == n_raters {
            included.push(raters);
        } else {
            excluded.push(ExcludedImage {
                image_id: image.to_string(),
                raters: raters.len(),
            });
        }
    }

    let mut rows = Vec::new();
    for q in cb.questions() {
        for o in &q.options {
            let applied: Vec<u32> = included
                .iter()
                .map(|raters| {
                    raters
                        .values()
                        .filter(|r| r.selections.get(&q.id).is_some_and(|s| s.contains(&o.id)))
                        .count() as u32
                })
                .collect();
            let m = RatingMatrix::binary(n_raters as u32, &applied)?;
            let kappa = fleiss_kappa(&m).ok();
            rows.push(AgreementRow {
                feature_group: q.feature_group.clone(),
                question_id: q.id.clone(),
                feature_key: o.feature_key.clone(),
                label: o.label.clone(),
                kappa,
                band: kappa.map(Band::of).unwrap_or(Band::Undefined),
            });
        }
    }

    Ok(AgreementReport {
        n_raters,
        n_items: included.len(),
        kappa: rows.iter().map(|r| (r.feature_key.clone(), r.kappa)).collect(),
        band: rows.iter().map(|r| (r.feature_key.clone(), r.band)).collect(),
        rows,
        excluded,
    })
}
