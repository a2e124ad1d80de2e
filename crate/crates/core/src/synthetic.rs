//! Seeded generators that stand in for an annotated meme corpus.
//!
//! Each class draws a handful of traits with the prevalences observed for
//! viral and non-viral memes; every other answer is uniform and
//! class-independent.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codebook::{AnnotationRecord, Codebook, QuestionKind, Selections};
use crate::features::{vectorize, FeatureVector, WordCount, WordSource};
use crate::store::{consensus, ClusterManifest, ManifestEntry, Platform, StoreError, ViralityClass};

/// Trait prevalences for one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassPrevalence {
    pub facial_expression: f64,
    pub posture: f64,
    /// Marginal shares of positive and negative emotion. Emotion is only
    /// asked about faces and postures, so it is drawn conditionally.
    pub positive: f64,
    pub negative: f64,
    pub character: f64,
    pub close_up: f64,
    pub long: f64,
    /// Share of images with fewer than 15 words.
    pub short_text: f64,
}

pub const VIRAL: ClassPrevalence = ClassPrevalence {
    facial_expression: 0.84,
    posture: 0.46,
    positive: 0.39,
    negative: 0.27,
    character: 0.93,
    close_up: 0.34,
    long: 0.046,
    short_text: 0.94,
};

pub const NONVIRAL: ClassPrevalence = ClassPrevalence {
    facial_expression: 0.38,
    posture: 0.30,
    positive: 0.15,
    negative: 0.17,
    character: 0.67,
    close_up: 0.14,
    long: 0.27,
    short_text: 0.6809,
};

impl ClassPrevalence {
    pub fn of(class: ViralityClass) -> ClassPrevalence {
        match class {
            ViralityClass::Nonviral => NONVIRAL,
            _ => VIRAL,
        }
    }
}

fn one_of<R: Rng>(rng: &mut R, options: &[&str]) -> String {
    options.choose(rng).expect("non-empty").to_string()
}

fn put(sel: &mut Selections, q: &str, options: impl IntoIterator<Item = String>) {
    sel.insert(q.to_string(), options.into_iter().collect());
}

/// A complete, valid set of answers for one image of the given class.
pub fn sample_selections<R: Rng>(p: &ClassPrevalence, rng: &mut R) -> Selections {
    let mut s = Selections::new();
    put(&mut s, "panels", [one_of(rng, &["single", "multiple"])]);
    put(&mut s, "image_type", [one_of(rng, &["photo", "illustration", "screenshot", "none"])]);

    let u: f64 = rng.gen();
    let scale = if u < p.close_up {
        "close_up"
    } else if u < p.close_up + p.long {
        "long"
    } else {
        "medium"
    };
    put(&mut s, "scale", [scale.to_string()]);
    put(&mut s, "movement", [one_of(rng, &["physical", "emotional", "causal", "none"])]);

    let subject = if rng.gen_bool(p.character) {
        "character".to_string()
    } else {
        one_of(rng, &["object", "scene", "creature", "none"])
    };
    put(&mut s, "subject", [subject]);

    let facial = rng.gen_bool(p.facial_expression);
    let posture = rng.gen_bool(p.posture);
    let mut attrs = BTreeSet::new();
    if facial {
        attrs.insert("facial_expression".to_string());
    }
    if posture {
        attrs.insert("posture".to_string());
    }
    if attrs.is_empty() {
        attrs.insert(one_of(rng, &["poster", "sign", "screenshot", "situation", "unprocessed_photo", "other"]));
    }
    s.insert("attributes".into(), attrs);

    if facial || posture {
        let asked = 1.0 - (1.0 - p.facial_expression) * (1.0 - p.posture);
        let u: f64 = rng.gen();
        let emotion = if u < p.positive / asked {
            "positive"
        } else if u < (p.positive + p.negative) / asked {
            "negative"
        } else {
            "neutral"
        };
        put(&mut s, "emotion", [emotion.to_string()]);
    }

    if rng.gen_bool(0.5) {
        put(&mut s, "audience", ["human_common".to_string()]);
    } else {
        put(&mut s, "audience", ["culture_specific".to_string()]);
        put(&mut s, "culture", [one_of(rng, &["hateful", "political", "racist", "none"])]);
    }
    s
}

/// Word count for one image of the class. Short captions cluster at zero
/// and just under 15 words; long ones spread upward.
pub fn sample_word_count<R: Rng>(class: ViralityClass, rng: &mut R) -> u32 {
    let short = rng.gen_bool(ClassPrevalence::of(class).short_text);
    match (class, short) {
        (ViralityClass::Nonviral, true) => match rng.gen_range(0..32) {
            0..=3 => 0,
            4..=7 => rng.gen_range(1..=5),
            _ => rng.gen_range(13..=14),
        },
        (ViralityClass::Nonviral, false) => rng.gen_range(16..=60),
        (_, true) => {
            if rng.gen_bool(25.0 / 47.0) {
                0
            } else {
                rng.gen_range(6..=14)
            }
        }
        (_, false) => rng.gen_range(16..=40),
    }
}

/// Fixed-composition word counts: 50 viral images (47 under 15 words) and
/// 47 non-viral ones (15 over 15 words). The seed places values inside
/// each band; every band value appears at least twice.
pub fn word_count_fixture(seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut band = |lo: u32, hi: u32, n: usize| -> Vec<u32> {
        let span: Vec<u32> = (lo..=hi).collect();
        let mut out: Vec<u32> = span.iter().cycle().take(n.min(2 * span.len())).copied().collect();
        while out.len() < n {
            out.push(rng.gen_range(lo..=hi));
        }
        out
    };
    let mut viral = vec![0; 25];
    viral.extend(band(6, 14, 22));
    viral.extend(band(16, 40, 3));
    let mut nonviral = vec![0; 4];
    nonviral.extend(band(1, 5, 4));
    nonviral.extend(band(13, 14, 24));
    nonviral.extend(band(16, 60, 15));
    viral.shuffle(&mut rng);
    nonviral.shuffle(&mut rng);
    (viral, nonviral)
}

/// Ground-truth answers and word count for one synthetic image.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub image_id: String,
    pub class: ViralityClass,
    pub selections: Selections,
    pub words: u32,
}

pub fn sample_image<R: Rng>(image_id: &str, class: ViralityClass, rng: &mut R) -> SyntheticImage {
    SyntheticImage {
        image_id: image_id.to_string(),
        class,
        selections: sample_selections(&ClassPrevalence::of(class), rng),
        words: sample_word_count(class, rng),
    }
}

impl SyntheticImage {
    pub fn record(&self, annotator: &str) -> AnnotationRecord {
        AnnotationRecord {
            image_id: self.image_id.clone(),
            annotator_id: annotator.to_string(),
            timestamp: 0,
            selections: self.selections.clone(),
        }
    }

    pub fn vector(&self, cb: &Codebook, threshold: u32) -> FeatureVector {
        let rec = self.record("truth");
        let labels = consensus(cb, &self.image_id, &[&rec]).expect("one record");
        let wc = WordCount { image_id: self.image_id.clone(), count: self.words, source: WordSource::Manual };
        vectorize(&labels, &wc, threshold, self.class).expect("generated answers are complete")
    }
}

/// `n_viral` then `n_nonviral` vectors, ids `v000`.. and `n000`..
pub fn synthetic_vectors(n_viral: usize, n_nonviral: usize, seed: u64) -> Vec<FeatureVector> {
    let cb = Codebook::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let viral = (0..n_viral).map(|i| (format!("v{i:03}"), ViralityClass::Viral));
    let nonviral = (0..n_nonviral).map(|i| (format!("n{i:03}"), ViralityClass::Nonviral));
    viral
        .chain(nonviral)
        .collect::<Vec<_>>()
        .into_iter()
        .map(|(id, class)| sample_image(&id, class, &mut rng).vector(&cb, 15))
        .collect()
}

/// One annotator's record for an image: each reachable question keeps the
/// true answer with probability `1 - noise`, otherwise gets a random one.
/// Questions are answered in codebook order, so branching stays valid.
pub fn noisy_record<R: Rng>(
    cb: &Codebook,
    truth: &SyntheticImage,
    annotator: &str,
    noise: f64,
    rng: &mut R,
) -> AnnotationRecord {
    let mut sel = Selections::new();
    for q in cb.questions() {
        let reachable = cb
            .reachable_questions(&sel)
            .expect("selections come from the codebook")
            .iter()
            .any(|r| r.id == q.id);
        if !reachable {
            continue;
        }
        let keep = truth.selections.get(&q.id).filter(|_| !rng.gen_bool(noise));
        let answer = match keep {
            Some(a) => a.clone(),
            None => {
                let o = q.options.choose(rng).expect("questions have options");
                let mut set: BTreeSet<String> = [o.id.clone()].into();
                if q.kind == QuestionKind::Multi && !o.exclusive && rng.gen_bool(0.2) {
                    if let Some(extra) = q.options.iter().filter(|x| !x.exclusive).collect::<Vec<_>>().choose(rng) {
                        set.insert(extra.id.clone());
                    }
                }
                set
            }
        };
        sel.insert(q.id.clone(), answer);
    }
    AnnotationRecord { image_id: truth.image_id.clone(), annotator_id: annotator.to_string(), timestamp: 0, selections: sel }
}

/// Layout of a generated data directory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusConfig {
    /// Clusters in each of the most- and least-posted pools.
    pub pool: usize,
    /// Clusters ranked between the two pools, never annotated.
    pub middle: usize,
    pub annotators: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { pool: 100, middle: 50, annotators: 6, noise: 0.1, seed: 2021 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub manifest: PathBuf,
    pub annotations: PathBuf,
    pub images_dir: PathBuf,
    pub text_dir: PathBuf,
    pub clusters: usize,
    pub records: usize,
}

// 1x1 transparent PNG.
const PIXEL_PNG: &[u8] = &[
    0x89, 0x50, 0x4E, 0x47, 0x0D, 0x0A, 0x1A, 0x0A, 0x00, 0x00, 0x00, 0x0D, 0x49, 0x48, 0x44, 0x52,
    0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x06, 0x00, 0x00, 0x00, 0x1F, 0x15, 0xC4,
    0x89, 0x00, 0x00, 0x00, 0x0D, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9C, 0x63, 0x00, 0x01, 0x00, 0x00,
    0x05, 0x00, 0x01, 0x0D, 0x0A, 0x2D, 0xB4, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4E, 0x44, 0xAE,
    0x42, 0x60, 0x82,
];

const FILLER: [&str; 8] = ["when", "you", "finally", "get", "the", "joke", "one", "more"];

/// Writes a manifest, placeholder images, caption transcripts and a noisy
/// multi-annotator log for a synthetic corpus.
///
/// The most-posted pool is drawn from the viral profile and the
/// least-posted one from the non-viral profile; every pool image gets one
/// record per annotator.
pub fn write_corpus(dir: &Path, cfg: &CorpusConfig) -> Result<CorpusSummary, StoreError> {
    let cb = Codebook::canonical();
    let images_dir = dir.join("images");
    let text_dir = dir.join("text");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&text_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = 2 * cfg.pool + cfg.middle;
    let platforms = [Platform::Fourchan, Platform::Twitter, Platform::Reddit, Platform::Gab];
    let mut entries = Vec::with_capacity(total);
    let mut truths = Vec::new();
    for rank in 0..total {
        let id = format!("c{:04}", rank + 1);
        // Strictly decreasing post counts keep the ranking unambiguous.
        let post_count = (10 * (total - rank)) as u64;
        // Relative to the corpus directory so the corpus can be moved.
        let image_path = PathBuf::from("images").join(format!("{id}.png"));
        fs::write(dir.join(&image_path), PIXEL_PNG)?;
        entries.push(ManifestEntry {
            cluster_id: id.clone(),
            post_count,
            platform: platforms[rank % platforms.len()],
            medoid_path: image_path,
        });
        let class = if rank < cfg.pool {
            ViralityClass::Viral
        } else if rank >= cfg.pool + cfg.middle {
            ViralityClass::Nonviral
        } else {
            ViralityClass::Unlabeled
        };
        let img = sample_image(&id, class, &mut rng);
        let caption: Vec<&str> = (0..img.words).map(|i| FILLER[i as usize % FILLER.len()]).collect();
        fs::write(text_dir.join(format!("{id}.txt")), caption.join(" "))?;
        if class != ViralityClass::Unlabeled {
            truths.push(img);
        }
    }
    let manifest = ClusterManifest::new(entries)?;
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

    let log_path = dir.join("annotations.jsonl");
    let mut log = fs::File::create(&log_path)?;
    let mut records = 0;
    for (i, truth) in truths.iter().enumerate() {
        for a in 0..cfg.annotators {
            let mut rec = noisy_record(&cb, truth, &format!("annotator{}", a + 1), cfg.noise, &mut rng);
            rec.timestamp = 1_600_000_000 + (i * cfg.annotators + a) as i64;
            debug_assert!(cb.validate_record(&rec).is_empty());
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            records += 1;
        }
    }
    Ok(CorpusSummary {
        manifest: manifest_path,
        annotations: log_path,
        images_dir,
        text_dir,
        clusters: total,
        records,
    })
}
