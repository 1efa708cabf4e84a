//! Run configuration, serialized as a single TOML document.
//!
//! Every section rejects unknown keys. Missing keys take the desk-scale
//! defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::hier_agg::keep_count;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run directory; `None` lets the caller choose.
    pub output: Option<PathBuf>,
    /// Corpus directory; `None` generates the corpus in memory from `[data]`.
    pub corpus: Option<PathBuf>,
    pub encoders: EncoderConfig,
    pub aggregator: AggregatorConfig,
    pub objective: ObjectiveConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Square image side; must be a multiple of 16 (four stride-2 stages).
    pub image_size: usize,
    /// Channel widths of the four vision stages.
    pub widths: Vec<usize>,
    /// Width of the frozen token embedding table.
    pub token_dim: usize,
    /// Hidden width of the frozen text map.
    pub text_hidden: usize,
    /// Output width of the text encoder (d_t).
    pub text_dim: usize,
    pub frozen_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            widths: vec![16, 32, 64, 128],
            token_dim: 256,
            text_hidden: 256,
            text_dim: 128,
            frozen_seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    /// Pooling grid side G; tokens have dimension G².
    pub grid: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Output width d_m. The visual projector is shared with the high-level
    /// feature, so this must equal the last vision width.
    pub output_dim: usize,
    /// Per-stage channel drop ratios, shallowest first.
    pub drop_ratios: Vec<f64>,
    /// Seed for the fixed drop masks used at evaluation time.
    pub eval_seed: u64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            grid: 4,
            heads: 4,
            ffn_hidden: 32,
            output_dim: 128,
            drop_ratios: vec![0.85, 0.9, 0.9, 0.9],
            eval_seed: 4242,
        }
    }
}

/// Map from raw report correlation to soft alignment target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// `1 - exp(-λR)`.
    Exponential,
    /// `exp(-R² / (2λ²))`.
    Gaussian,
    /// `exp(-|R| / λ)`.
    Laplacian,
    /// `2σ(R/λ) - 1`.
    Sigmoid,
    /// Zero off-diagonal: the classic one-hot contrastive target.
    Identity,
}

impl Kernel {
    pub const ALL: [Kernel; 5] = [
        Kernel::Exponential,
        Kernel::Gaussian,
        Kernel::Laplacian,
        Kernel::Sigmoid,
        Kernel::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Exponential => "exponential",
            Kernel::Gaussian => "gaussian",
            Kernel::Laplacian => "laplacian",
            Kernel::Sigmoid => "sigmoid",
            Kernel::Identity => "identity",
        }
    }
}

/// Which report part each visual level is aligned against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// High-level ↔ Impressions, multi-level ↔ Findings.
    Full,
    /// Both levels ↔ Impressions.
    ImpressionsOnly,
    /// Both levels ↔ Findings and Impressions encoded as one sequence.
    Concatenated,
    /// High-level ↔ Findings, multi-level ↔ Impressions.
    Reversed,
}

impl Alignment {
    pub fn name(self) -> &'static str {
        match self {
            Alignment::Full => "full",
            Alignment::ImpressionsOnly => "impressions_only",
            Alignment::Concatenated => "concatenated",
            Alignment::Reversed => "reversed",
        }
    }
}

/// Loss-term switches, named after the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermToggles {
    /// High-level, vision-vision.
    pub vvh: bool,
    /// High-level, vision-language (both views).
    pub vlh: bool,
    /// Multi-level, vision-vision.
    pub vvm: bool,
    /// Multi-level, vision-language (both views).
    pub vlm: bool,
}

impl Default for TermToggles {
    fn default() -> Self {
        Self {
            vvh: true,
            vlh: true,
            vvm: true,
            vlm: true,
        }
    }
}

impl TermToggles {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [(self.vvh, "VVH"), (self.vlh, "VLH"), (self.vvm, "VVM"), (self.vlm, "VLM")] {
            if on {
                parts.push(name);
            }
        }
        parts.join("+")
    }

    pub fn any(&self) -> bool {
        self.vvh || self.vlh || self.vvm || self.vlm
    }

    pub fn uses_aggregator(&self) -> bool {
        self.vvm || self.vlm
    }

    /// Inverse of [`label`](Self::label); accepts `+` or `,` separators in
    /// any case.
    pub fn parse(label: &str) -> Result<Self> {
        let mut t = Self {
            vvh: false,
            vlh: false,
            vvm: false,
            vlm: false,
        };
        for part in label.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_uppercase().as_str() {
                "VVH" => t.vvh = true,
                "VLH" => t.vlh = true,
                "VVM" => t.vvm = true,
                "VLM" => t.vlm = true,
                other => return Err(invalid(format!("unknown loss term `{other}` (expected VVH, VLH, VVM, VLM)"))),
            }
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Smoothing coefficient λ.
    pub lambda: f64,
    pub kernel: Kernel,
    pub terms: TermToggles,
    pub alignment: Alignment,
    pub projector_hidden: usize,
    /// Shared latent width d_s.
    pub shared_dim: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 0.2,
            kernel: Kernel::Exponential,
            terms: TermToggles::default(),
            alignment: Alignment::Full,
            projector_hidden: 128,
            shared_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    /// Number of latent conditions K.
    pub k: usize,
    /// Bernoulli prevalence of each condition.
    pub rate: f64,
    /// Records per split: train, valid, test.
    pub counts: [usize; 3],
    pub vocab_size: usize,
    /// Number of reporting styles; each style adds its own phrasing tokens.
    pub styles: usize,
    /// Standard deviation of the additive background noise.
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            k: 5,
            rate: 0.3,
            counts: [2000, 500, 500],
            vocab_size: 96,
            styles: 4,
            noise: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of all steps spent in the linear warm-up.
    pub warmup_frac: f64,
    /// Validation passes without improvement before stopping; 0 disables.
    pub patience: usize,
    /// Steps between validation passes; 0 means once per epoch.
    pub eval_every: usize,
    /// Cap on validation records used per pass; 0 uses all.
    pub val_max_records: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            batch_size: 32,
            epochs: 30,
            lr: 1e-3,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.05,
            patience: 5,
            eval_every: 0,
            val_max_records: 256,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output: None,
            corpus: None,
            encoders: EncoderConfig::default(),
            aggregator: AggregatorConfig::default(),
            objective: ObjectiveConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self;
        if d.k < 2 {
            return Err(invalid(format!("data.k must be at least 2, got {}", d.k)));
        }
        if !(0.0..=1.0).contains(&d.rate) {
            return Err(invalid(format!("data.rate must lie in [0, 1], got {}", d.rate)));
        }
        if d.counts.contains(&0) {
            return Err(invalid(format!("data.counts needs at least one record per split: {:?}", d.counts)));
        }
        if !(d.noise >= 0.0) {
            return Err(invalid("data.noise must be non-negative"));
        }
        Ok(())
    }
}

impl RunConfig {
    /// Parses TOML; syntax and unknown-key errors carry line/column positions.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Total sequence length after channel dropping, excluding [CLS].
    pub fn token_count(&self) -> usize {
        self.encoders
            .widths
            .iter()
            .zip(&self.aggregator.drop_ratios)
            .map(|(&c, &r)| keep_count(c, r))
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoders;
        if e.widths.len() != 4 {
            return Err(invalid(format!("encoders.widths needs 4 stages, got {}", e.widths.len())));
        }
        if e.widths.contains(&0) || e.widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!("encoders.widths must be positive and strictly increasing: {:?}", e.widths)));
        }
        if e.image_size == 0 || e.image_size % 16 != 0 {
            return Err(invalid(format!("encoders.image_size must be a positive multiple of 16, got {}", e.image_size)));
        }
        if e.token_dim == 0 || e.text_hidden == 0 || e.text_dim < 2 {
            return Err(invalid("text encoder widths must be positive (text_dim >= 2)"));
        }
        let a = &self.aggregator;
        if a.grid == 0 || a.heads == 0 || a.ffn_hidden == 0 {
            return Err(invalid("aggregator grid, heads and ffn_hidden must be positive"));
        }
        if (a.grid * a.grid) % a.heads != 0 {
            return Err(invalid(format!(
                "aggregator.heads={} must divide the token width {}",
                a.heads,
                a.grid * a.grid
            )));
        }
        if a.output_dim != e.widths[3] {
            return Err(invalid(format!(
                "aggregator.output_dim={} must equal the last vision width {} (shared visual projector)",
                a.output_dim, e.widths[3]
            )));
        }
        if a.drop_ratios.len() != 4 || a.drop_ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(invalid(format!("aggregator.drop_ratios needs 4 values in [0, 1): {:?}", a.drop_ratios)));
        }
        let o = &self.objective;
        if !(o.tau > 0.0) {
            return Err(invalid(format!("objective.tau must be positive, got {}", o.tau)));
        }
        if !(o.lambda > 0.0) {
            return Err(invalid(format!("objective.lambda must be positive, got {}", o.lambda)));
        }
        if !o.terms.any() {
            return Err(invalid("objective.terms enables no loss term"));
        }
        if o.projector_hidden == 0 || o.shared_dim == 0 {
            return Err(invalid("projector widths must be positive"));
        }
        self.data.validate()?;
        let d = &self.data;
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(invalid(format!("train.batch_size must be at least 2, got {}", t.batch_size)));
        }
        if t.batch_size > d.counts[0] {
            return Err(invalid(format!(
                "train.batch_size={} exceeds the {} training records",
                t.batch_size, d.counts[0]
            )));
        }
        if !(t.lr >= 0.0) || !(t.weight_decay >= 0.0) || !(0.0..=1.0).contains(&t.warmup_frac) {
            return Err(invalid("train.lr, weight_decay must be non-negative and warmup_frac in [0, 1]"));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(invalid("train.beta1/beta2 must lie in [0, 1) and eps be positive"));
        }
        Ok(())
    }
}
