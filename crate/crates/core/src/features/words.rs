use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FeatureError;
use crate::store::ViralityClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordSource {
    Ocr,
    Sidecar,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordCount {
    pub image_id: String,
    pub count: u32,
    pub source: WordSource,
}

/// Where extracted text comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OcrAdapter {
    /// An external program that prints the recognised text of the image
    /// path passed as its final argument.
    Command { program: String, args: Vec<String> },
    /// A directory of `<image_id>.txt` (or `<file stem>.txt`) transcripts.
    SidecarDir(PathBuf),
}

impl OcrAdapter {
    /// Splits a command line on whitespace into program and arguments.
    pub fn command(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace().map(str::to_string);
        let program = parts.next()?;
        Some(OcrAdapter::Command { program, args: parts.collect() })
    }
}

pub fn count_words(text: &str) -> u32 {
    text.split_whitespace().count() as u32
}

pub fn extract_word_count(
    image_id: &str,
    image_path: &Path,
    adapter: &OcrAdapter,
) -> Result<WordCount, FeatureError> {
    if !image_path.is_file() {
        return Err(FeatureError::ImageMissing(image_path.to_path_buf()));
    }
    let fail = |reason: String| FeatureError::AdapterFailure { image_id: image_id.to_string(), reason };
    match adapter {
        OcrAdapter::Command { program, args } => {
            let out = Command::new(program)
                .args(args)
                .arg(image_path)
                .output()
                .map_err(|e| fail(format!("could not run `{program}`: {e}")))?;
            if !out.status.success() {
                let stderr = String::from_utf8_lossy(&out.stderr);
                return Err(fail(format!("`{program}` exited with {}: {}", out.status, stderr.trim())));
            }
            Ok(WordCount {
                image_id: image_id.to_string(),
                count: count_words(&String::from_utf8_lossy(&out.stdout)),
                source: WordSource::Ocr,
            })
        }
        OcrAdapter::SidecarDir(dir) => {
            let mut candidates = vec![dir.join(format!("{image_id}.txt"))];
            if let Some(stem) = image_path.file_stem() {
                candidates.push(dir.join(stem).with_extension("txt"));
            }
            let path = candidates
                .iter()
                .find(|p| p.is_file())
                .ok_or_else(|| fail(format!("no transcript in {}", dir.display())))?;
            let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
            Ok(WordCount {
                image_id: image_id.to_string(),
                count: count_words(&text),
                source: WordSource::Sidecar,
            })
        }
    }
}

/// Runs the adapter over many images in parallel; results keep input order.
pub fn extract_all(
    images: &[(String, PathBuf)],
    adapter: &OcrAdapter,
) -> Vec<Result<WordCount, FeatureError>> {
    images
        .par_iter()
        .map(|(id, path)| extract_word_count(id, path, adapter))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordCountRow {
    pub image_id: String,
    pub count: u32,
    pub source: WordSource,
    pub virality_class: ViralityClass,
}

pub fn write_word_counts_csv<W: Write>(
    rows: &[WordCountRow],
    mut out: W,
    provenance: Option<&str>,
) -> Result<(), FeatureError> {
    if let Some(p) = provenance {
        writeln!(out, "# {p}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_word_counts_csv<R: Read>(input: R) -> Result<Vec<WordCountRow>, FeatureError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
