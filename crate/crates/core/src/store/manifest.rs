use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Fourchan,
    Twitter,
    Reddit,
    Gab,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cluster_id: String,
    /// Number of posts containing an image of the cluster.
    pub post_count: u64,
    pub platform: Platform,
    pub medoid_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterManifest {
    pub entries: Vec<ManifestEntry>,
}

impl ClusterManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, StoreError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.cluster_id.is_empty() {
                return Err(StoreError::MalformedManifest("empty cluster_id".into()));
            }
            if !seen.insert(e.cluster_id.as_str()) {
                return Err(StoreError::MalformedManifest(format!(
                    "duplicate cluster_id `{}`",
                    e.cluster_id
                )));
            }
        }
        Ok(ClusterManifest { entries })
    }

    pub fn from_json(text: &str) -> Result<Self, StoreError> {
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(text).map_err(|e| StoreError::MalformedManifest(e.to_string()))?;
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViralityClass {
    Viral,
    Nonviral,
    Unlabeled,
}

impl ViralityClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ViralityClass::Viral => "viral",
            ViralityClass::Nonviral => "nonviral",
            ViralityClass::Unlabeled => "unlabeled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "viral" | "1" => Some(ViralityClass::Viral),
            "nonviral" | "non-viral" | "0" => Some(ViralityClass::Nonviral),
            "unlabeled" | "" => Some(ViralityClass::Unlabeled),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTask {
    pub image_id: String,
    pub cluster_id: String,
    pub virality_class: ViralityClass,
    pub post_count: u64,
    pub platform: Platform,
    pub image_path: PathBuf,
    #[serde(default)]
    pub assigned_annotators: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// Size of the most-posted pool that viral images are drawn from.
    pub top_k: usize,
    /// Size of the least-posted pool that non-viral images are drawn from.
    pub bottom_k: usize,
    pub sample_from_top: usize,
    pub sample_from_bottom: usize,
    pub seed: u64,
}

/// Indices of `entries` ordered by post count, most posted first. Equal
/// counts are ordered by cluster id.
pub fn rank_entries(entries: &[ManifestEntry]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        entries[b]
            .post_count
            .cmp(&entries[a].post_count)
            .then_with(|| entries[a].cluster_id.cmp(&entries[b].cluster_id))
    });
    order
}

/// Ranks the manifest and samples viral tasks from the top pool and
/// non-viral tasks from the bottom pool. Clusters outside the samples are
/// not turned into tasks.
pub fn ingest_manifest(
    manifest: &ClusterManifest,
    plan: &SamplingPlan,
) -> Result<Vec<ImageTask>, StoreError> {
    if manifest.is_empty() {
        return Err(StoreError::EmptyManifest);
    }
    let n = manifest.len();
    if plan.top_k + plan.bottom_k > n {
        return Err(StoreError::PoolTooSmall(format!(
            "pools of {} + {} exceed {} manifest entries",
            plan.top_k, plan.bottom_k, n
        )));
    }
    if plan.sample_from_top > plan.top_k || plan.sample_from_bottom > plan.bottom_k {
        return Err(StoreError::PoolTooSmall(format!(
            "samples {}/{} exceed pools {}/{}",
            plan.sample_from_top, plan.sample_from_bottom, plan.top_k, plan.bottom_k
        )));
    }

    let ranked = rank_entries(&manifest.entries);
    let top = &ranked[..plan.top_k];
    let bottom = &ranked[n - plan.bottom_k..];

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut pick = |pool: &[usize], k: usize| {
        let mut chosen = index::sample(&mut rng, pool.len(), k).into_vec();
        chosen.sort_unstable();
        chosen.into_iter().map(|i| pool[i]).collect::<Vec<_>>()
    };
    let viral = pick(top, plan.sample_from_top);
    let nonviral = pick(bottom, plan.sample_from_bottom);

    let task = |i: usize, class: ViralityClass| {
        let e = &manifest.entries[i];
        ImageTask {
            image_id: e.cluster_id.clone(),
            cluster_id: e.cluster_id.clone(),
            virality_class: class,
            post_count: e.post_count,
            platform: e.platform,
            image_path: e.medoid_path.clone(),
            assigned_annotators: BTreeSet::new(),
        }
    };
    Ok(viral
        .into_iter()
        .map(|i| task(i, ViralityClass::Viral))
        .chain(nonviral.into_iter().map(|i| task(i, ViralityClass::Nonviral)))
        .collect())
}

pub fn write_tasks(path: &Path, tasks: &[ImageTask]) -> Result<(), StoreError> {
    let mut text = serde_json::to_string_pretty(tasks)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_tasks(path: &Path) -> Result<Vec<ImageTask>, StoreError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Returns the id with the smallest mean distance to all points; ties go to
/// the lexicographically smallest id.
///
/// `distances` is a row-major `n x n` table aligned with `ids`.
pub fn medoid<'a, S: AsRef<str>>(ids: &'a [S], distances: &[Vec<f64>]) -> Result<&'a str, StoreError> {
    let n = ids.len();
    if n == 0 {
        return Err(StoreError::EmptyInput);
    }
    if distances.len() != n || distances.iter().any(|row| row.len() != n) {
        return Err(StoreError::InvalidDistance(format!("expected a {n}x{n} table")));
    }
    for i in 0..n {
        if distances[i][i] != 0.0 {
            return Err(StoreError::InvalidDistance(format!(
                "non-zero diagonal at `{}`",
                ids[i].as_ref()
            )));
        }
        for j in (i + 1)..n {
            let (a, b) = (distances[i][j], distances[j][i]);
            if a.is_nan() || b.is_nan() || a < 0.0 {
                return Err(StoreError::InvalidDistance(format!(
                    "invalid entry at ({}, {})",
                    ids[i].as_ref(),
                    ids[j].as_ref()
                )));
            }
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(StoreError::AsymmetricDistance(
                    ids[i].as_ref().to_string(),
                    ids[j].as_ref().to_string(),
                ));
            }
        }
    }

    let mut best: Option<(f64, &str)> = None;
    for (i, row) in distances.iter().enumerate() {
        let mean = row.iter().sum::<f64>() / n as f64;
        let id = ids[i].as_ref();
        best = match best {
            None => Some((mean, id)),
            Some((m, b)) if mean < m || (mean == m && id < b) => Some((mean, id)),
            keep => keep,
        };
    }
    Ok(best.expect("non-empty").1)
}
