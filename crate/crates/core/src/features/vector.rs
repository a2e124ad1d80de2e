use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{FeatureError, WordCount};
use crate::store::{ConsensusLabels, ViralityClass};

pub const N_FEATURES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// 1 iff the multi-question option with this feature key is present.
    Binary(&'static str),
    /// Integer code of an exclusive question: option `levels[i]` maps to
    /// `first_code + i`. A code of 0 below `first_code` means "not asked".
    Code {
        question: &'static str,
        levels: &'static [&'static str],
        first_code: u8,
    },
    /// 1 iff the word count exceeds the threshold.
    WordsOverThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotDef {
    pub name: &'static str,
    pub kind: SlotKind,
}

const fn bin(key: &'static str) -> SlotDef {
    SlotDef { name: key, kind: SlotKind::Binary(key) }
}

pub const FEATURE_SCHEMA: [SlotDef; N_FEATURES] = [
    SlotDef {
        name: "panels",
        kind: SlotKind::Code { question: "panels", levels: &["single", "multiple"], first_code: 0 },
    },
    bin("type_photo"),
    bin("type_illustration"),
    bin("type_screenshot"),
    bin("type_none"),
    SlotDef {
        name: "scale",
        kind: SlotKind::Code { question: "scale", levels: &["close_up", "medium", "long"], first_code: 0 },
    },
    bin("movement_physical"),
    bin("movement_emotional"),
    bin("movement_causal"),
    bin("movement_none"),
    bin("subject_object"),
    bin("subject_character"),
    bin("subject_scene"),
    bin("subject_creature"),
    bin("subject_none"),
    bin("attr_facial_expression"),
    bin("attr_posture"),
    bin("attr_poster"),
    bin("attr_sign"),
    bin("attr_screenshot"),
    bin("attr_situation"),
    bin("attr_unprocessed_photo"),
    bin("attr_other"),
    SlotDef {
        name: "emotion",
        kind: SlotKind::Code { question: "emotion", levels: &["neutral", "positive", "negative"], first_code: 1 },
    },
    SlotDef { name: "words_over_threshold", kind: SlotKind::WordsOverThreshold },
    SlotDef {
        name: "audience",
        kind: SlotKind::Code { question: "audience", levels: &["human_common", "culture_specific"], first_code: 0 },
    },
    bin("culture_hateful"),
    bin("culture_political"),
    bin("culture_racist"),
    bin("culture_none"),
];

pub const FEATURE_NAMES: [&str; N_FEATURES] = {
    let mut names = [""; N_FEATURES];
    let mut i = 0;
    while i < N_FEATURES {
        names[i] = FEATURE_SCHEMA[i].name;
        i += 1;
    }
    names
};

pub fn slot_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|n| *n == name)
}

const FACIAL: usize = 15;
const POSTURE: usize = 16;
const EMOTION: usize = 23;
const AUDIENCE: usize = 25;
const CULTURE: std::ops::Range<usize> = 26..30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub image_id: String,
    pub values: [f64; N_FEATURES],
    pub label: ViralityClass,
    /// Raw word count behind the thresholded slot, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_count: Option<u32>,
}

impl FeatureVector {
    pub fn value(&self, name: &str) -> Option<f64> {
        slot_index(name).map(|i| self.values[i])
    }

    /// Names of the invariants this vector breaks; empty when valid.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, slot) in FEATURE_SCHEMA.iter().enumerate() {
            let v = self.values[i];
            let ok = match slot.kind {
                SlotKind::Binary(_) | SlotKind::WordsOverThreshold => v == 0.0 || v == 1.0,
                SlotKind::Code { levels, first_code, .. } => {
                    let max = (first_code as usize + levels.len() - 1) as f64;
                    v.fract() == 0.0 && (0.0..=max).contains(&v) && (first_code == 0 || v == 0.0 || v >= first_code as f64)
                }
            };
            if !ok {
                out.push(format!("slot `{}` out of range: {v}", slot.name));
            }
        }
        if self.values[EMOTION] != 0.0 && self.values[FACIAL] != 1.0 && self.values[POSTURE] != 1.0 {
            out.push("emotion set without facial expression or posture".into());
        }
        if self.values[AUDIENCE] == 0.0 && CULTURE.clone().any(|i| self.values[i] != 0.0) {
            out.push("culture tags set for a human-common audience".into());
        }
        out
    }
}

/// Encodes consensus labels and a word count into the 30 named slots.
pub fn vectorize(
    labels: &ConsensusLabels,
    wc: &WordCount,
    threshold: u32,
    class: ViralityClass,
) -> Result<FeatureVector, FeatureError> {
    if threshold < 1 {
        return Err(FeatureError::InvalidThreshold(threshold));
    }
    let binary_keys: BTreeSet<&str> = FEATURE_SCHEMA
        .iter()
        .filter_map(|s| match s.kind {
            SlotKind::Binary(k) => Some(k),
            _ => None,
        })
        .collect();
    if let Some(k) = labels.present.keys().find(|k| !binary_keys.contains(k.as_str())) {
        return Err(FeatureError::UnknownFeatureKey(k.clone()));
    }

    let mut values = [0.0; N_FEATURES];
    for (i, slot) in FEATURE_SCHEMA.iter().enumerate() {
        values[i] = match slot.kind {
            SlotKind::Binary(key) => labels.is_present(key) as u8 as f64,
            SlotKind::WordsOverThreshold => (wc.count > threshold) as u8 as f64,
            SlotKind::Code { .. } => continue,
        };
    }
    let triggered = values[FACIAL] == 1.0 || values[POSTURE] == 1.0;

    for (i, slot) in FEATURE_SCHEMA.iter().enumerate() {
        let SlotKind::Code { question, levels, first_code } = slot.kind else { continue };
        let answer = labels.exclusive.get(question);
        if i == EMOTION && !triggered {
            if answer.is_some() {
                return Err(FeatureError::InconsistentLabels(
                    "emotion given without facial expression or posture".into(),
                ));
            }
            values[i] = 0.0;
            continue;
        }
        let option = answer.ok_or_else(|| FeatureError::IncompleteLabels(question.to_string()))?;
        let level = levels
            .iter()
            .position(|l| l == option)
            .ok_or_else(|| FeatureError::UnknownFeatureKey(format!("{question}.{option}")))?;
        values[i] = (first_code as usize + level) as f64;
    }

    if values[AUDIENCE] == 0.0 && CULTURE.clone().any(|i| values[i] != 0.0) {
        return Err(FeatureError::InconsistentLabels(
            "culture tags present for a human-common audience".into(),
        ));
    }

    Ok(FeatureVector {
        image_id: labels.image_id.clone(),
        values,
        label: class,
        word_count: Some(wc.count),
    })
}

/// Writes `image_id`, the 30 named slots, `word_count` and `label`. An
/// optional provenance line is emitted first as a `#` comment.
pub fn write_vectors_csv<W: Write>(
    vectors: &[FeatureVector],
    mut out: W,
    provenance: Option<&str>,
) -> Result<(), FeatureError> {
    if let Some(p) = provenance {
        writeln!(out, "# {p}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["image_id"];
    header.extend(FEATURE_NAMES);
    header.extend(["word_count", "label"]);
    w.write_record(&header)?;
    for v in vectors {
        let mut row = vec![v.image_id.clone()];
        row.extend(v.values.iter().map(|x| format!("{x}")));
        row.push(v.word_count.map(|c| c.to_string()).unwrap_or_default());
        row.push(v.label.as_str().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads vectors by column name; `word_count` and `label` are optional.
pub fn read_vectors_csv<R: Read>(input: R) -> Result<Vec<FeatureVector>, FeatureError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let slots: Vec<usize> = FEATURE_NAMES
        .iter()
        .map(|n| col(n).ok_or_else(|| FeatureError::MalformedVectors(format!("missing column `{n}`"))))
        .collect::<Result<_, _>>()?;
    let id_col = col("image_id");
    let wc_col = col("word_count");
    let label_col = col("label");

    let mut out = Vec::new();
    for (row_no, rec) in r.records().enumerate() {
        let rec = rec?;
        let mut values = [0.0; N_FEATURES];
        for (i, &c) in slots.iter().enumerate() {
            let cell = rec.get(c).unwrap_or("");
            values[i] = cell.trim().parse().map_err(|_| {
                FeatureError::MalformedVectors(format!("row {}: `{}` = `{cell}`", row_no + 1, FEATURE_NAMES[i]))
            })?;
        }
        let label = match label_col.and_then(|c| rec.get(c)) {
            Some(s) => ViralityClass::parse(s)
                .ok_or_else(|| FeatureError::MalformedVectors(format!("row {}: label `{s}`", row_no + 1)))?,
            None => ViralityClass::Unlabeled,
        };
        out.push(FeatureVector {
            image_id: id_col
                .and_then(|c| rec.get(c))
                .map(str::to_string)
                .unwrap_or_else(|| format!("row{}", row_no + 1)),
            values,
            label,
            word_count: wc_col
                .and_then(|c| rec.get(c))
                .filter(|s| !s.is_empty())
                .and_then(|s| s.parse().ok()),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{selections, AnnotationRecord, Codebook};
    use crate::features::WordSource;
    use crate::store::consensus;

    fn labels(pairs: Vec<(&str, Vec<&str>)>) -> ConsensusLabels {
        let cb = Codebook::canonical();
        let rec = AnnotationRecord {
            image_id: "img".into(),
            annotator_id: "a".into(),
            timestamp: 0,
            selections: selections(pairs),
        };
        assert!(cb.validate_record(&rec).is_empty());
        consensus(&cb, "img", &[&rec]).unwrap()
    }

    fn words(count: u32) -> WordCount {
        WordCount { image_id: "img".into(), count, source: WordSource::Manual }
    }

    fn smug_frog() -> ConsensusLabels {
        labels(vec![
            ("panels", vec!["single"]),
            ("image_type", vec!["illustration"]),
            ("scale", vec!["close_up"]),
            ("movement", vec!["emotional"]),
            ("subject", vec!["character"]),
            ("attributes", vec!["facial_expression", "posture"]),
            ("emotion", vec!["positive"]),
            ("audience", vec!["human_common"]),
        ])
    }

    #[test]
    fn schema_is_thirty_named_slots() {
        assert_eq!(FEATURE_NAMES.len(), 30);
        let unique: BTreeSet<_> = FEATURE_NAMES.iter().collect();
        assert_eq!(unique.len(), 30);
        let cb = Codebook::canonical();
        for slot in FEATURE_SCHEMA {
            match slot.kind {
                SlotKind::Binary(k) => assert!(cb.feature(k).is_some(), "{k}"),
                SlotKind::Code { question, levels, .. } => {
                    let q = cb.question(question).unwrap();
                    assert_eq!(q.options.len(), levels.len());
                    assert!(levels.iter().all(|l| q.option(l).is_some()));
                }
                SlotKind::WordsOverThreshold => {}
            }
        }
        assert_eq!(FEATURE_NAMES[FACIAL], "attr_facial_expression");
        assert_eq!(FEATURE_NAMES[EMOTION], "emotion");
        assert_eq!(FEATURE_NAMES[24], "words_over_threshold");
    }

    #[test]
    fn smug_frog_vector() {
        let v = vectorize(&smug_frog(), &words(0), 15, ViralityClass::Viral).unwrap();
        let get = |n: &str| v.value(n).unwrap();
        assert_eq!(get("panels"), 0.0);
        assert_eq!(get("type_illustration"), 1.0);
        assert_eq!(get("scale"), 0.0);
        assert_eq!(get("subject_character"), 1.0);
        assert_eq!(get("attr_facial_expression"), 1.0);
        assert_eq!(get("attr_posture"), 1.0);
        assert_eq!(get("emotion"), 2.0);
        assert_eq!(get("words_over_threshold"), 0.0);
        assert_eq!(get("audience"), 0.0);
        assert!(v.invariant_violations().is_empty());
    }

    #[test]
    fn word_threshold_is_strict() {
        let l = smug_frog();
        let at = |c| vectorize(&l, &words(c), 15, ViralityClass::Viral).unwrap().values[24];
        assert_eq!(at(16), 1.0);
        assert_eq!(at(15), 0.0);
        assert_eq!(at(14), 0.0);
    }

    #[test]
    fn human_common_clears_culture() {
        let v = vectorize(&smug_frog(), &words(3), 15, ViralityClass::Viral).unwrap();
        assert!(v.values[26..30].iter().all(|&x| x == 0.0));

        let l = labels(vec![
            ("panels", vec!["multiple"]),
            ("image_type", vec!["screenshot"]),
            ("scale", vec!["long"]),
            ("movement", vec!["none"]),
            ("subject", vec!["scene"]),
            ("attributes", vec!["sign"]),
            ("audience", vec!["culture_specific"]),
            ("culture", vec!["political", "racist"]),
        ]);
        let v = vectorize(&l, &words(40), 15, ViralityClass::Nonviral).unwrap();
        assert_eq!(v.value("audience"), Some(1.0));
        assert_eq!(v.value("culture_political"), Some(1.0));
        assert_eq!(v.value("culture_racist"), Some(1.0));
        assert_eq!(v.value("emotion"), Some(0.0));
        assert_eq!(v.value("panels"), Some(1.0));
        assert_eq!(v.value("scale"), Some(2.0));
        assert_eq!(v.value("words_over_threshold"), Some(1.0));
    }

    #[test]
    fn errors() {
        let mut l = smug_frog();
        assert!(matches!(
            vectorize(&l, &words(0), 0, ViralityClass::Viral),
            Err(FeatureError::InvalidThreshold(0))
        ));
        l.exclusive.remove("emotion");
        assert!(matches!(
            vectorize(&l, &words(0), 15, ViralityClass::Viral),
            Err(FeatureError::IncompleteLabels(q)) if q == "emotion"
        ));
        let mut l = smug_frog();
        l.present.insert("attr_sparkles".into(), true);
        assert!(matches!(
            vectorize(&l, &words(0), 15, ViralityClass::Viral),
            Err(FeatureError::UnknownFeatureKey(_))
        ));
        let mut l = smug_frog();
        l.exclusive.insert("scale".into(), "extreme".into());
        assert!(matches!(
            vectorize(&l, &words(0), 15, ViralityClass::Viral),
            Err(FeatureError::UnknownFeatureKey(_))
        ));
        let mut l = smug_frog();
        l.present.insert("culture_hateful".into(), true);
        assert!(matches!(
            vectorize(&l, &words(0), 15, ViralityClass::Viral),
            Err(FeatureError::InconsistentLabels(_))
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let v = vectorize(&smug_frog(), &words(7), 15, ViralityClass::Viral).unwrap();
        let mut buf = Vec::new();
        write_vectors_csv(std::slice::from_ref(&v), &mut buf, Some("seed=1")).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# seed=1\nimage_id,panels,"));
        let back = read_vectors_csv(&buf[..]).unwrap();
        assert_eq!(back, vec![v]);
    }

    #[test]
    fn csv_without_optional_columns() {
        let mut header: Vec<&str> = FEATURE_NAMES.to_vec();
        header.insert(0, "image_id");
        let row: Vec<String> = std::iter::once("x".to_string())
            .chain((0..30).map(|_| "0".to_string()))
            .collect();
        let text = format!("{}\n{}\n", header.join(","), row.join(","));
        let back = read_vectors_csv(text.as_bytes()).unwrap();
        assert_eq!(back[0].label, ViralityClass::Unlabeled);
        assert_eq!(back[0].word_count, None);
        assert!(read_vectors_csv("image_id,panels\nx,0\n".as_bytes()).is_err());
    }
}
