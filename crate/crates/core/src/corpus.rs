//! On-disk corpus format.
//!
//! ```text
//! <dir>/manifest.json        generator settings, vocabulary, format version
//! <dir>/records.jsonl        one record per line (labels, tokens, image checksum)
//! <dir>/images/<id>.bin      H·W little-endian f64 pixels
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::synth::{Corpus, CorpusManifest, Record, Split, Vocabulary, GENERATOR_VERSION};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    format_version: u32,
    counts: [usize; 3],
    #[serde(flatten)]
    manifest: CorpusManifest,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: u64,
    split: Split,
    conditions: Vec<bool>,
    findings: Vec<u32>,
    impressions: Vec<u32>,
    image_sha256: String,
}

fn image_bytes(img: &Image) -> Vec<u8> {
    img.pixels.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn corpus_err(msg: String) -> Error {
    Error::Corpus(msg)
}

/// Writes `corpus` into `dir`, creating it if needed.
pub fn save(corpus: &Corpus, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).at(&images)?;
    let manifest = ManifestFile {
        format_version: FORMAT_VERSION,
        counts: corpus.manifest.data.counts,
        manifest: corpus.manifest.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").at(&path)?;

    let path = dir.join("records.jsonl");
    let file = fs::File::create(&path).at(&path)?;
    let mut out = BufWriter::new(file);
    for rec in &corpus.records {
        let bytes = image_bytes(&rec.image);
        let line = RecordLine {
            id: rec.id,
            split: rec.split,
            conditions: rec.conditions.clone(),
            findings: rec.findings.clone(),
            impressions: rec.impressions.clone(),
            image_sha256: sha256(&bytes),
        };
        serde_json::to_writer(&mut out, &line).expect("record serializes");
        out.write_all(b"\n").at(&path)?;
        let img_path = images.join(format!("{}.bin", rec.id));
        fs::write(&img_path, bytes).at(&img_path)?;
    }
    out.flush().at(&path)?;
    Ok(())
}

/// Reads a corpus written by [`save`], verifying versions, counts, blob
/// lengths and checksums.
pub fn load(dir: &Path) -> Result<Corpus> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).at(&path)?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if file.format_version != FORMAT_VERSION {
        return Err(corpus_err(format!(
            "format version mismatch: expected {FORMAT_VERSION}, found {}",
            file.format_version
        )));
    }
    if file.manifest.generator_version != GENERATOR_VERSION {
        return Err(corpus_err(format!(
            "generator version mismatch: expected {GENERATOR_VERSION}, found {}",
            file.manifest.generator_version
        )));
    }
    if file.counts != file.manifest.data.counts {
        return Err(corpus_err(format!(
            "manifest counts {:?} disagree with generator counts {:?}",
            file.counts, file.manifest.data.counts
        )));
    }
    let vocab = Vocabulary::new(file.manifest.vocabulary.clone())?;
    let size = file.manifest.image_size;
    let expected_len = size * size * 8;

    let path = dir.join("records.jsonl");
    let reader = BufReader::new(fs::File::open(&path).at(&path)?);
    let mut records = Vec::new();
    let mut counts = [0usize; 3];
    for (n, line) in reader.lines().enumerate() {
        let line = line.at(&path)?;
        if line.trim().is_empty() {
            continue;
        }
        let rl: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.clone(),
            msg: format!("line {}: {e}", n + 1),
        })?;
        let img_path = dir.join("images").join(format!("{}.bin", rl.id));
        let bytes = fs::read(&img_path).at(&img_path)?;
        if bytes.len() != expected_len {
            return Err(corpus_err(format!(
                "record {}: image blob has {} bytes, expected {expected_len}",
                rl.id,
                bytes.len()
            )));
        }
        let actual = sha256(&bytes);
        if actual != rl.image_sha256 {
            return Err(corpus_err(format!(
                "record {}: image checksum mismatch (expected {}, actual {actual})",
                rl.id, rl.image_sha256
            )));
        }
        let pixels = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        for &t in rl.findings.iter().chain(&rl.impressions) {
            if t as usize >= vocab.len() {
                return Err(Error::OutOfVocabulary {
                    token: t,
                    vocab: vocab.len(),
                });
            }
        }
        if rl.conditions.len() != file.manifest.data.k {
            return Err(corpus_err(format!(
                "record {}: {} condition labels, expected {}",
                rl.id,
                rl.conditions.len(),
                file.manifest.data.k
            )));
        }
        let rec = Record {
            id: rl.id,
            split: rl.split,
            conditions: rl.conditions,
            image: Image::new(size, size, pixels),
            findings: rl.findings,
            impressions: rl.impressions,
        };
        rec.check_report()?;
        rec.image.check_range()?;
        counts[rec.split as usize] += 1;
        records.push(rec);
    }
    if counts != file.counts {
        return Err(corpus_err(format!(
            "manifest lists {:?} records per split but records.jsonl holds {:?}",
            file.counts, counts
        )));
    }
    records.sort_by_key(|r| (r.split as usize, r.id));
    Ok(Corpus {
        manifest: file.manifest,
        vocab,
        records,
    })
}
