//! Deterministic synthetic image-report corpus.
//!
//! Each record carries a set of latent conditions. The image shows one
//! textured blob per active condition over a noisy background; the findings
//! describe every blob (descriptor, size, intensity, region) mixed with
//! filler and per-style phrasing tokens; the impressions name the
//! conditions only.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

/// Bumped whenever generation changes in a way that alters output.
pub const GENERATOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Texture {
    Disk,
    Ring,
    Checker,
    Diffuse,
    Cluster,
    Stripes,
    Square,
    Cross,
}

/// Condition name, finding descriptor, rendered texture.
const CONDITIONS: [(&str, &str, Texture); 8] = [
    ("nodule", "rounded", Texture::Disk),
    ("cavity", "annular", Texture::Ring),
    ("fibrosis", "reticular", Texture::Checker),
    ("edema", "hazy", Texture::Diffuse),
    ("calcification", "punctate", Texture::Cluster),
    ("atelectasis", "linear", Texture::Stripes),
    ("mass", "lobulated", Texture::Square),
    ("scarring", "crossed", Texture::Cross),
];

pub const MAX_CONDITIONS: usize = CONDITIONS.len();

const SIZES: [(&str, f64); 3] = [("small", 3.0), ("moderate", 4.5), ("large", 6.0)];
const INTENSITIES: [(&str, f64); 2] = [("faint", 0.35), ("dense", 0.7)];
const FILLER: [&str; 12] = [
    "lungs",
    "clear",
    "heart",
    "normal",
    "size",
    "mediastinum",
    "unremarkable",
    "osseous",
    "structures",
    "intact",
    "view",
    "frontal",
];
const STYLE_WORDS: usize = 3;
const BACKGROUND: f64 = 0.1;

/// Token strings and their ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Corpus(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The generator's vocabulary for `k` conditions and `styles` styles,
    /// padded with unused tokens to `size`.
    pub fn build(k: usize, styles: usize, size: usize) -> Result<Self> {
        if k > MAX_CONDITIONS {
            return Err(Error::Config(format!("at most {MAX_CONDITIONS} conditions are supported, got {k}")));
        }
        let mut tokens: Vec<String> = ["no", "finding"].iter().map(|s| s.to_string()).collect();
        tokens.extend(SIZES.iter().map(|s| s.0.to_string()));
        tokens.extend(INTENSITIES.iter().map(|s| s.0.to_string()));
        tokens.extend(["upper", "lower", "left", "right"].iter().map(|s| s.to_string()));
        tokens.extend(FILLER.iter().map(|s| s.to_string()));
        for &(name, desc, _) in &CONDITIONS[..k] {
            tokens.push(name.to_string());
            tokens.push(desc.to_string());
        }
        for s in 0..styles {
            for w in 0..STYLE_WORDS {
                tokens.push(format!("style{s}.{w}"));
            }
        }
        if tokens.len() > size {
            return Err(Error::Config(format!(
                "vocabulary of {size} tokens is too small for {k} conditions and {styles} styles (needs {})",
                tokens.len()
            )));
        }
        let used = tokens.len();
        tokens.extend((used..size).map(|i| format!("unused{i}")));
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn must(&self, token: &str) -> u32 {
        self.id(token).expect("generator token present in vocabulary")
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or("?")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: u64,
    pub split: Split,
    pub conditions: Vec<bool>,
    pub image: Image,
    pub findings: Vec<u32>,
    pub impressions: Vec<u32>,
}

impl Record {
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.conditions.iter().enumerate().filter(|c| *c.1).map(|c| c.0)
    }

    /// Findings followed by impressions.
    pub fn report(&self) -> Vec<u32> {
        let mut r = self.findings.clone();
        r.extend_from_slice(&self.impressions);
        r
    }

    /// A report needs at least three tokens across both sections.
    pub fn check_report(&self) -> Result<()> {
        let n = self.findings.len() + self.impressions.len();
        if n < 3 || self.findings.is_empty() || self.impressions.is_empty() {
            return Err(Error::ShortReport(n));
        }
        Ok(())
    }
}

/// Everything needed to regenerate a corpus bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub generator_version: u32,
    pub image_size: usize,
    pub data: DataConfig,
    pub vocabulary: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub vocab: Vocabulary,
    /// All records in id order: train, then valid, then test.
    pub records: Vec<Record>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Record] {
        let c = self.manifest.data.counts;
        match split {
            Split::Train => &self.records[..c[0]],
            Split::Valid => &self.records[c[0]..c[0] + c[1]],
            Split::Test => &self.records[c[0] + c[1]..],
        }
    }

    pub fn k(&self) -> usize {
        self.manifest.data.k
    }

    pub fn condition_names(&self) -> Vec<&'static str> {
        CONDITIONS[..self.k()].iter().map(|c| c.0).collect()
    }
}

pub fn condition_names(k: usize) -> Vec<&'static str> {
    CONDITIONS[..k.min(MAX_CONDITIONS)].iter().map(|c| c.0).collect()
}

fn check_config(data: &DataConfig, image_size: usize) -> Result<()> {
    if data.k < 2 {
        return Err(Error::Config(format!("need at least 2 conditions, got {}", data.k)));
    }
    if data.counts.contains(&0) {
        return Err(Error::Config(format!("every split needs a record: {:?}", data.counts)));
    }
    if !(0.0..=1.0).contains(&data.rate) {
        return Err(Error::Config(format!("condition rate must lie in [0, 1], got {}", data.rate)));
    }
    if !(data.noise >= 0.0) {
        return Err(Error::Config("noise must be non-negative".into()));
    }
    if image_size < 16 {
        return Err(Error::Config(format!("image size {image_size} too small to place blobs")));
    }
    Ok(())
}

/// Builds the whole corpus. Every record uses its own derived stream, so
/// records can be produced in any order.
pub fn generate(data: &DataConfig, image_size: usize) -> Result<Corpus> {
    check_config(data, image_size)?;
    let vocab = Vocabulary::build(data.k, data.styles, data.vocab_size)?;
    let total: usize = data.counts.iter().sum();
    let mut records = Vec::with_capacity(total);
    for id in 0..total as u64 {
        let split = if (id as usize) < data.counts[0] {
            Split::Train
        } else if (id as usize) < data.counts[0] + data.counts[1] {
            Split::Valid
        } else {
            Split::Test
        };
        records.push(generate_record(data, image_size, &vocab, id, split));
    }
    Ok(Corpus {
        manifest: CorpusManifest {
            generator_version: GENERATOR_VERSION,
            image_size,
            data: data.clone(),
            vocabulary: vocab.tokens().to_vec(),
        },
        vocab,
        records,
    })
}

struct Blob {
    texture: Texture,
    cy: f64,
    cx: f64,
    radius: f64,
    amp: f64,
    dots: Vec<(f64, f64)>,
}

fn soft_disk(d: f64, r: f64) -> f64 {
    (r - d + 0.5).clamp(0.0, 1.0)
}

impl Blob {
    fn mask(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let d = (dy * dy + dx * dx).sqrt();
        let r = self.radius;
        let parity = |v: f64| (v / 2.0).floor().rem_euclid(2.0);
        match self.texture {
            Texture::Disk => soft_disk(d, r),
            Texture::Ring => (1.5 - (d - 0.75 * r).abs()).clamp(0.0, 1.0),
            Texture::Checker => soft_disk(d, r) * (parity(dx) + parity(dy)).rem_euclid(2.0),
            Texture::Diffuse => (-d * d / (2.0 * (0.6 * r).powi(2))).exp(),
            Texture::Cluster => self
                .dots
                .iter()
                .map(|&(oy, ox)| soft_disk(((dy - oy).powi(2) + (dx - ox).powi(2)).sqrt(), 1.2))
                .fold(0.0, f64::max),
            Texture::Stripes => soft_disk(d, r) * parity(dx),
            Texture::Square => {
                let e = 0.8 * r;
                ((e - dx.abs() + 0.5).clamp(0.0, 1.0)) * ((e - dy.abs() + 0.5).clamp(0.0, 1.0))
            }
            Texture::Cross => {
                let bar = |a: f64, b: f64| ((1.0 - a.abs()).clamp(0.0, 1.0)) * soft_disk(b.abs(), r);
                bar(dx, dy).max(bar(dy, dx))
            }
        }
    }
}

fn generate_record(data: &DataConfig, size: usize, vocab: &Vocabulary, id: u64, split: Split) -> Record {
    let mut r = rng::stream(data.seed, "record", &[id]);
    let conditions: Vec<bool> = (0..data.k).map(|_| r.gen_bool(data.rate)).collect();
    let style = if data.styles > 0 { Some(r.gen_range(0..data.styles)) } else { None };

    let mut blobs = Vec::new();
    let mut findings = Vec::new();
    let side = size as f64;
    for (k, _) in conditions.iter().enumerate().filter(|c| *c.1) {
        let (_, desc, texture) = CONDITIONS[k];
        let (size_tok, radius) = SIZES[r.gen_range(0..SIZES.len())];
        let (int_tok, amp) = INTENSITIES[r.gen_range(0..INTENSITIES.len())];
        let margin = radius + 1.0;
        let cy = r.gen_range(margin..side - 1.0 - margin);
        let cx = r.gen_range(margin..side - 1.0 - margin);
        let dots = if texture == Texture::Cluster {
            (0..4)
                .map(|_| (r.gen_range(-0.7..0.7) * radius, r.gen_range(-0.7..0.7) * radius))
                .collect()
        } else {
            Vec::new()
        };
        blobs.push(Blob {
            texture,
            cy,
            cx,
            radius,
            amp,
            dots,
        });
        let vertical = if cy < side / 2.0 { "upper" } else { "lower" };
        let horizontal = if cx < side / 2.0 { "left" } else { "right" };
        for t in [desc, size_tok, int_tok, vertical, horizontal] {
            findings.push(vocab.must(t));
        }
    }
    if findings.is_empty() {
        findings.push(vocab.must("lungs"));
        findings.push(vocab.must("clear"));
    }
    let filler_count = r.gen_range(1..=3);
    for t in FILLER.choose_multiple(&mut r, filler_count) {
        findings.push(vocab.must(t));
    }
    if let Some(s) = style {
        let mut words: Vec<usize> = (0..STYLE_WORDS).collect();
        words.shuffle(&mut r);
        for w in &words[..2] {
            findings.push(vocab.must(&format!("style{s}.{w}")));
        }
    }

    let impressions: Vec<u32> = if blobs.is_empty() {
        vec![vocab.must("no"), vocab.must("finding")]
    } else {
        conditions
            .iter()
            .enumerate()
            .filter(|c| *c.1)
            .map(|(k, _)| vocab.must(CONDITIONS[k].0))
            .collect()
    };

    let noise = Normal::new(0.0, data.noise.max(1e-300)).expect("valid noise");
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut v = BACKGROUND;
            if data.noise > 0.0 {
                v += noise.sample(&mut r);
            }
            for b in &blobs {
                v += b.amp * b.mask(y as f64, x as f64);
            }
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    Record {
        id,
        split,
        conditions,
        image: Image::new(size, size, pixels),
        findings,
        impressions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            counts: [40, 10, 10],
            ..DataConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small(), 32).unwrap(), generate(&small(), 32).unwrap());
        let other = DataConfig { seed: 8, ..small() };
        assert_ne!(generate(&small(), 32).unwrap().records, generate(&other, 32).unwrap().records);
    }

    #[test]
    fn empty_condition_set_reads_no_finding() {
        let c = generate(&DataConfig { rate: 0.0, ..small() }, 32).unwrap();
        for rec in &c.records {
            assert_eq!(c.vocab.decode(&rec.impressions), vec!["no", "finding"]);
            rec.check_report().unwrap();
        }
    }

    #[test]
    fn impressions_follow_conditions() {
        let c = generate(&DataConfig { counts: [300, 1, 1], ..small() }, 32).unwrap();
        let mut seen: HashMap<Vec<bool>, Vec<u32>> = HashMap::new();
        for rec in &c.records {
            let mut imp = rec.impressions.clone();
            imp.sort_unstable();
            if let Some(prev) = seen.insert(rec.conditions.clone(), imp.clone()) {
                assert_eq!(prev, imp);
            }
        }
    }

    #[test]
    fn images_in_range_and_sized() {
        let c = generate(&small(), 32).unwrap();
        for rec in &c.records {
            assert_eq!((rec.image.height, rec.image.width), (32, 32));
            rec.image.check_range().unwrap();
            assert!(rec.findings.iter().chain(&rec.impressions).all(|&t| (t as usize) < c.vocab.len()));
        }
    }

    #[test]
    fn rejects_small_vocabulary() {
        let err = generate(&DataConfig { vocab_size: 20, ..small() }, 32).unwrap_err();
        assert!(err.to_string().contains("too small"));
        assert!(generate(&DataConfig { k: 9, ..small() }, 32).is_err());
        assert!(generate(&DataConfig { k: 1, ..small() }, 32).is_err());
    }

    #[test]
    fn splits_partition_ids() {
        let c = generate(&small(), 32).unwrap();
        assert_eq!(c.split(Split::Train).len(), 40);
        assert!(c.split(Split::Valid).iter().all(|r| r.split == Split::Valid));
        assert!(c.split(Split::Test).iter().all(|r| r.split == Split::Test && r.id >= 50));
    }
}
