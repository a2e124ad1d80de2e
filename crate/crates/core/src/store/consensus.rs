use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{StoreError, ViralityClass};
use crate::codebook::{AnnotationRecord, Codebook, QuestionKind, Selections};

/// Majority-vote aggregation of the records submitted for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusLabels {
    pub image_id: String,
    pub n_records: usize,
    /// Multi-question options: feature key to presence.
    pub present: BTreeMap<String, bool>,
    /// Exclusive questions that are reachable under the consensus:
    /// question id to chosen option id.
    pub exclusive: BTreeMap<String, String>,
    /// Votes per feature key across all records.
    pub support: BTreeMap<String, usize>,
}

impl ConsensusLabels {
    pub fn is_present(&self, feature_key: &str) -> bool {
        self.present.get(feature_key).copied().unwrap_or(false)
    }

    /// The consensus as a selections map, suitable for reachability checks.
    pub fn selections(&self, cb: &Codebook) -> Selections {
        let mut out = Selections::new();
        for q in cb.questions() {
            match q.kind {
                QuestionKind::Exclusive => {
                    if let Some(o) = self.exclusive.get(&q.id) {
                        out.insert(q.id.clone(), [o.clone()].into());
                    }
                }
                QuestionKind::Multi => {
                    let chosen: std::collections::BTreeSet<String> = q
                        .options
                        .iter()
                        .filter(|o| self.is_present(&o.feature_key))
                        .map(|o| o.id.clone())
                        .collect();
                    if !chosen.is_empty() {
                        out.insert(q.id.clone(), chosen);
                    }
                }
            }
        }
        out
    }
}

/// Aggregates records for one image.
///
/// A multi-question option is present iff strictly more than half of the
/// records selected it. An exclusive question takes its plurality option,
/// ties going to the option listed first. Questions enter the consensus only
/// when reachable under the consensus answers of earlier questions, so the
/// result always respects the branch rules.
pub fn consensus(
    cb: &Codebook,
    image_id: &str,
    records: &[&AnnotationRecord],
) -> Result<ConsensusLabels, StoreError> {
    if records.is_empty() {
        return Err(StoreError::NoRecords(image_id.to_string()));
    }
    let n = records.len();

    let mut support: BTreeMap<String, usize> =
        cb.feature_keys().map(|k| (k.to_string(), 0)).collect();
    for rec in records {
        for (qid, chosen) in &rec.selections {
            let Some(q) = cb.question(qid) else { continue };
            for o in chosen {
                if let Some(opt) = q.option(o) {
                    *support.get_mut(&opt.feature_key).expect("known key") += 1;
                }
            }
        }
    }

    let mut decided: HashSet<&str> = HashSet::new();
    let mut chosen = Selections::new();
    let mut present = BTreeMap::new();
    let mut exclusive = BTreeMap::new();
    loop {
        let reachable = cb
            .reachable_questions(&chosen)
            .expect("consensus selections come from the codebook");
        let fresh: Vec<_> = reachable
            .into_iter()
            .filter(|q| !decided.contains(q.id.as_str()))
            .collect();
        if fresh.is_empty() {
            break;
        }
        for q in fresh {
            decided.insert(q.id.as_str());
            match q.kind {
                QuestionKind::Multi => {
                    let picked: std::collections::BTreeSet<String> = q
                        .options
                        .iter()
                        .filter(|o| 2 * support[&o.feature_key] > n)
                        .map(|o| o.id.clone())
                        .collect();
                    if !picked.is_empty() {
                        chosen.insert(q.id.clone(), picked);
                    }
                }
                QuestionKind::Exclusive => {
                    // max_by_key keeps the last maximum, so scan in reverse.
                    let best = q
                        .options
                        .iter()
                        .rev()
                        .max_by_key(|o| support[&o.feature_key])
                        .filter(|o| support[&o.feature_key] > 0);
                    if let Some(o) = best {
                        chosen.insert(q.id.clone(), [o.id.clone()].into());
                        exclusive.insert(q.id.clone(), o.id.clone());
                    }
                }
            }
        }
    }

    for q in cb.questions().iter().filter(|q| q.kind == QuestionKind::Multi) {
        let picked = chosen.get(&q.id);
        for o in &q.options {
            present.insert(
                o.feature_key.clone(),
                picked.is_some_and(|p| p.contains(&o.id)),
            );
        }
    }

    Ok(ConsensusLabels {
        image_id: image_id.to_string(),
        n_records: n,
        present,
        exclusive,
        support,
    })
}

/// Writes one row per image: the 35 feature keys as 0/1, the chosen option
/// of each exclusive question, and the virality class.
pub fn write_consensus_csv<W: Write>(
    cb: &Codebook,
    rows: &[(ConsensusLabels, ViralityClass)],
    out: W,
) -> Result<(), StoreError> {
    let mut w = csv::Writer::from_writer(out);
    let exclusive_qs: Vec<_> = cb
        .questions()
        .iter()
        .filter(|q| q.kind == QuestionKind::Exclusive)
        .collect();
    let mut header = vec!["image_id".to_string()];
    header.extend(cb.feature_keys().map(str::to_string));
    header.extend(exclusive_qs.iter().map(|q| q.id.clone()));
    header.push("virality_class".into());
    w.write_record(&header)?;

    for (labels, class) in rows {
        let mut row = vec![labels.image_id.clone()];
        for q in cb.questions() {
            for o in &q.options {
                let on = match q.kind {
                    QuestionKind::Multi => labels.is_present(&o.feature_key),
                    QuestionKind::Exclusive => labels.exclusive.get(&q.id) == Some(&o.id),
                };
                row.push(if on { "1" } else { "0" }.to_string());
            }
        }
        for q in &exclusive_qs {
            row.push(labels.exclusive.get(&q.id).cloned().unwrap_or_default());
        }
        row.push(class.as_str().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
