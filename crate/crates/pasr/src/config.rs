//! Model and run configuration, serialized as a flat key=value file so
//! resolved configs diff cleanly in regression tests.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{PasrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Uniform,
    KnnUniform,
    KnnPopularity,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SamplerKind::Uniform => "uniform",
            SamplerKind::KnnUniform => "knn-uniform",
            SamplerKind::KnnPopularity => "knn-popularity",
        };
        f.write_str(s)
    }
}

impl FromStr for SamplerKind {
    type Err = PasrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SamplerKind::Uniform),
            "knn-uniform" | "knn_uniform" => Ok(SamplerKind::KnnUniform),
            "knn-popularity" | "knn_popularity" => Ok(SamplerKind::KnnPopularity),
            other => Err(PasrError::Config(format!("unknown sampler '{other}'"))),
        }
    }
}

/// Whether kNN candidate pools are keyed by the positive (next)
/// location or by the current input location.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnnAnchor {
    NextLocation,
    InputLocation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Embedding width per table.
    pub d: usize,
    /// FFN hidden width.
    pub d_h: usize,
    /// Self-attention layer count (encoder and geography encoder).
    pub layers: usize,
    /// Fixed sequence length.
    pub m: usize,
    /// Geohash n-gram order.
    pub ngram: usize,
    /// Geohash prefix length fed to the geography encoder.
    pub geohash_prefix_len: usize,
    /// Grid intervals per axis.
    pub grid_intervals: usize,
    /// kNN pool size for proximity-aware samplers.
    pub knn: usize,
    /// Negatives per supervised step.
    pub neg_count: usize,
    /// Importance-weight temperature.
    pub temperature: f64,
    pub use_geo_encoder: bool,
    pub use_grid_mapper: bool,
    pub use_target_decoder: bool,
    pub weighted_loss: bool,
    pub sampler: SamplerKind,
    /// Propagate gradients through the importance weights instead of
    /// detaching them.
    pub propagate_weights: bool,
    /// Add positional embeddings inside the geography encoder.
    pub geo_positional: bool,
    /// Mask padded positions out of attention keys (off: pads are
    /// attendable, only the loss skips them).
    pub pad_key_mask: bool,
    pub knn_anchor: KnnAnchor,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 50,
            d_h: 128,
            layers: 2,
            m: 50,
            ngram: 3,
            geohash_prefix_len: 6,
            grid_intervals: 5000,
            knn: 2000,
            neg_count: 5,
            temperature: 1.0,
            use_geo_encoder: true,
            use_grid_mapper: true,
            use_target_decoder: true,
            weighted_loss: true,
            sampler: SamplerKind::KnnUniform,
            propagate_weights: false,
            geo_positional: false,
            pad_key_mask: false,
            knn_anchor: KnnAnchor::NextLocation,
        }
    }
}

impl ModelConfig {
    /// Concatenated embedding width, accounting for ablations.
    /// Location always contributes d; the geography encoder adds d;
    /// the grid mapper adds d for the row and d for the column.
    pub fn width(&self) -> usize {
        let mut tables = 1;
        if self.use_geo_encoder {
            tables += 1;
        }
        if self.use_grid_mapper {
            tables += 2;
        }
        tables * self.d
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("d", self.d),
            ("d_h", self.d_h),
            ("layers", self.layers),
            ("m", self.m),
            ("ngram", self.ngram),
            ("geohash_prefix_len", self.geohash_prefix_len),
            ("grid_intervals", self.grid_intervals),
            ("knn", self.knn),
            ("neg_count", self.neg_count),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(PasrError::Config(format!("{name} must be positive")));
            }
        }
        if self.temperature <= 0.0 {
            return Err(PasrError::Config("temperature must be positive".into()));
        }
        if self.ngram > self.geohash_prefix_len {
            return Err(PasrError::Config("ngram exceeds geohash prefix length".into()));
        }
        if self.geohash_prefix_len > 16 {
            return Err(PasrError::Config("geohash prefix length exceeds 16".into()));
        }
        Ok(())
    }
}

/// Full training/evaluation run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            dataset: String::new(),
            seed: 42,
            epochs: 20,
            batch_size: 128,
            learning_rate: 0.001,
            weight_decay: 0.0001,
            output_dir: ".".into(),
        }
    }
}

impl RunConfig {
    pub fn to_flat_text(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("d", m.d.to_string());
        kv("d_h", m.d_h.to_string());
        kv("layers", m.layers.to_string());
        kv("m", m.m.to_string());
        kv("ngram", m.ngram.to_string());
        kv("geohash_prefix_len", m.geohash_prefix_len.to_string());
        kv("grid_intervals", m.grid_intervals.to_string());
        kv("knn", m.knn.to_string());
        kv("neg_count", m.neg_count.to_string());
        kv("temperature", format!("{}", m.temperature));
        kv("use_geo_encoder", m.use_geo_encoder.to_string());
        kv("use_grid_mapper", m.use_grid_mapper.to_string());
        kv("use_target_decoder", m.use_target_decoder.to_string());
        kv("weighted_loss", m.weighted_loss.to_string());
        kv("sampler", m.sampler.to_string());
        kv("propagate_weights", m.propagate_weights.to_string());
        kv("geo_positional", m.geo_positional.to_string());
        kv("pad_key_mask", m.pad_key_mask.to_string());
        kv(
            "knn_anchor",
            match m.knn_anchor {
                KnnAnchor::NextLocation => "next".into(),
                KnnAnchor::InputLocation => "input".into(),
            },
        );
        kv("dataset", self.dataset.clone());
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", format!("{}", self.learning_rate));
        kv("weight_decay", format!("{}", self.weight_decay));
        kv("output_dir", self.output_dir.clone());
        out
    }

    pub fn from_flat_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| PasrError::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, val) = (key.trim(), val.trim());
            let bad = |e: &dyn fmt::Display| PasrError::Config(format!("key '{key}': {e}"));
            macro_rules! parse {
                ($t:ty) => {
                    val.parse::<$t>().map_err(|e| bad(&e))?
                };
            }
            let m = &mut cfg.model;
            match key {
                "d" => m.d = parse!(usize),
                "d_h" => m.d_h = parse!(usize),
                "layers" => m.layers = parse!(usize),
                "m" => m.m = parse!(usize),
                "ngram" => m.ngram = parse!(usize),
                "geohash_prefix_len" => m.geohash_prefix_len = parse!(usize),
                "grid_intervals" => m.grid_intervals = parse!(usize),
                "knn" => m.knn = parse!(usize),
                "neg_count" => m.neg_count = parse!(usize),
                "temperature" => m.temperature = parse!(f64),
                "use_geo_encoder" => m.use_geo_encoder = parse!(bool),
                "use_grid_mapper" => m.use_grid_mapper = parse!(bool),
                "use_target_decoder" => m.use_target_decoder = parse!(bool),
                "weighted_loss" => m.weighted_loss = parse!(bool),
                "sampler" => m.sampler = val.parse()?,
                "propagate_weights" => m.propagate_weights = parse!(bool),
                "geo_positional" => m.geo_positional = parse!(bool),
                "pad_key_mask" => m.pad_key_mask = parse!(bool),
                "knn_anchor" => {
                    m.knn_anchor = match val {
                        "next" => KnnAnchor::NextLocation,
                        "input" => KnnAnchor::InputLocation,
                        other => return Err(PasrError::Config(format!("unknown knn_anchor '{other}'"))),
                    }
                }
                "dataset" => cfg.dataset = val.to_string(),
                "seed" => cfg.seed = parse!(u64),
                "epochs" => cfg.epochs = parse!(usize),
                "batch_size" => cfg.batch_size = parse!(usize),
                "learning_rate" => cfg.learning_rate = parse!(f64),
                "weight_decay" => cfg.weight_decay = parse!(f64),
                "output_dir" => cfg.output_dir = val.to_string(),
                other => return Err(PasrError::Config(format!("unknown key '{other}'"))),
            }
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_flat_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_flat_text())?;
        Ok(())
    }
}
