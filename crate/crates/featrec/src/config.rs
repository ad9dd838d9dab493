//! Resolved run configuration and its line-oriented `key=value` file format.

use std::path::Path;

use crate::backbone::PaddingMode;
use crate::cae::TrainConfig;
use crate::error::{Error, Result};
use crate::regional::ScaleRange;

/// Everything a run needs, recorded in full for provenance. The initial
/// image resize filter is fixed (bilinear) and echoed so emitted score maps
/// are attributable to an exact preprocessing chain.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scales: ScaleRange,
    pub padding: PaddingMode,
    pub agg_k: usize,
    pub agg_stride: usize,
    pub image_side: usize,
    pub train: TrainConfig,
    pub acceptable_fpr: f64,
    pub seed: u64,
    /// Regional features sampled per training image for PCA sizing.
    pub pca_per_image: usize,
    /// Hard cap on the pooled PCA sample count.
    pub pca_sample_cap: usize,
    pub pca_target_variance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scales: ScaleRange { lo: 1, hi: 16 },
            padding: PaddingMode::Zero,
            agg_k: 4,
            agg_stride: 4,
            image_side: 256,
            train: TrainConfig::default(),
            acceptable_fpr: 0.005,
            seed: 0,
            pca_per_image: 50,
            pca_sample_cap: 20_000,
            pca_target_variance: 0.9,
        }
    }
}

pub const IMAGE_RESIZE_FILTER: &str = "bilinear";

impl RunConfig {
    /// Propagate the shared seed into the optimizer config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn to_key_value(&self) -> String {
        let pairs = self.echo_pairs();
        let mut out = String::from("# resolved run configuration\n");
        for (k, v) in pairs {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Key/value pairs, also embedded in evaluation reports.
    pub fn echo_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("scales".into(), self.scales.to_string()),
            ("padding".into(), self.padding.to_string()),
            ("agg".into(), format!("{}:{}", self.agg_k, self.agg_stride)),
            ("image_side".into(), self.image_side.to_string()),
            ("image_resize".into(), IMAGE_RESIZE_FILTER.into()),
            ("learning_rate".into(), self.train.learning_rate.to_string()),
            ("batch_size".into(), self.train.batch_size.to_string()),
            ("epochs".into(), self.train.epochs.to_string()),
            ("adam_beta1".into(), self.train.adam_beta1.to_string()),
            ("adam_beta2".into(), self.train.adam_beta2.to_string()),
            ("adam_eps".into(), self.train.adam_eps.to_string()),
            ("acceptable_fpr".into(), self.acceptable_fpr.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("pca_per_image".into(), self.pca_per_image.to_string()),
            ("pca_sample_cap".into(), self.pca_sample_cap.to_string()),
            (
                "pca_target_variance".into(),
                self.pca_target_variance.to_string(),
            ),
        ]
    }

    pub fn from_key_value(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::validation(format!(
                    "config line {}: expected key=value, got '{line}'",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::validation(format!("config line {}: bad {what} '{value}'", lineno + 1))
            };
            match key {
                "scales" => cfg.scales = value.parse()?,
                "padding" => cfg.padding = value.parse()?,
                "agg" => {
                    let (k, s) = value
                        .split_once(':')
                        .ok_or_else(|| bad("aggregation (want K:S)"))?;
                    cfg.agg_k = k.parse().map_err(|_| bad("aggregation window"))?;
                    cfg.agg_stride = s.parse().map_err(|_| bad("aggregation stride"))?;
                }
                "image_side" => cfg.image_side = value.parse().map_err(|_| bad("image side"))?,
                "image_resize" => {
                    if value != IMAGE_RESIZE_FILTER {
                        return Err(bad("image resize filter (only bilinear is supported)"));
                    }
                }
                "learning_rate" => {
                    cfg.train.learning_rate = value.parse().map_err(|_| bad("learning rate"))?
                }
                "batch_size" => {
                    cfg.train.batch_size = value.parse().map_err(|_| bad("batch size"))?
                }
                "epochs" => cfg.train.epochs = value.parse().map_err(|_| bad("epoch count"))?,
                "adam_beta1" => {
                    cfg.train.adam_beta1 = value.parse().map_err(|_| bad("beta1"))?
                }
                "adam_beta2" => {
                    cfg.train.adam_beta2 = value.parse().map_err(|_| bad("beta2"))?
                }
                "adam_eps" => cfg.train.adam_eps = value.parse().map_err(|_| bad("epsilon"))?,
                "acceptable_fpr" => {
                    cfg.acceptable_fpr = value.parse().map_err(|_| bad("FPR"))?
                }
                "seed" => {
                    cfg.seed = value.parse().map_err(|_| bad("seed"))?;
                    cfg.train.seed = cfg.seed;
                }
                "pca_per_image" => {
                    cfg.pca_per_image = value.parse().map_err(|_| bad("PCA sample count"))?
                }
                "pca_sample_cap" => {
                    cfg.pca_sample_cap = value.parse().map_err(|_| bad("PCA cap"))?
                }
                "pca_target_variance" => {
                    cfg.pca_target_variance = value.parse().map_err(|_| bad("PCA target"))?
                }
                other => {
                    return Err(Error::validation(format!(
                        "config line {}: unknown key '{other}'",
                        lineno + 1
                    )));
                }
            }
        }
        Ok(cfg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_key_value()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_key_value(&text)
    }
}
