//! Segmentation evaluation: per-pixel ROC-AUC and the normalized
//! per-region-overlap (PRO) curve truncated at an average false-positive
//! rate cap.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scoring::{AnomalyMap, Resolution, Threshold};
use crate::tensor::Tensor3;

/// Flattened scores with aligned binary labels; `region_ids` optionally maps
/// every pixel to a ground-truth region (0 = background).
#[derive(Debug, Clone)]
pub struct LabeledScores {
    pub scores: Vec<f32>,
    pub labels: Vec<bool>,
    pub region_ids: Option<Vec<u32>>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f32>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::validation(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        Ok(LabeledScores {
            scores,
            labels,
            region_ids: None,
        })
    }
}

/// Trapezoidal area under the ROC curve, sweeping every distinct score as a
/// threshold; tied scores collapse into a single threshold step.
pub fn roc_auc(data: &LabeledScores) -> Result<f64> {
    let n_pos = data.labels.iter().filter(|&&l| l).count();
    let n_neg = data.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric {
            message: format!("ROC needs both classes, got {n_pos} positive / {n_neg} negative"),
        });
    }

    let mut order: Vec<usize> = (0..data.scores.len()).collect();
    order.sort_unstable_by(|&a, &b| data.scores[b].total_cmp(&data.scores[a]));

    let mut auc = 0.0f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    let mut i = 0usize;
    while i < order.len() {
        let value = data.scores[order[i]];
        while i < order.len() && data.scores[order[i]] == value {
            if data.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // Trapezoid between the previous and current curve point.
        auc += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(auc / (n_pos as f64 * n_neg as f64))
}

/// Label 8-connected components of positive pixels: background is 0, each
/// region gets a distinct id starting at 1. Returns the id grid and count.
pub fn label_regions(mask: &Tensor3) -> Result<(Vec<u32>, usize)> {
    if mask.channels() != 1 {
        return Err(Error::shape(format!(
            "mask must have one channel, got {}",
            mask.channels()
        )));
    }
    if let Some(bad) = mask.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::validation(format!(
            "mask must be binary, found {bad}"
        )));
    }
    let (h, w, _) = mask.dims();
    let mut ids = vec![0u32; h * w];
    let mut next_id = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.as_slice()[start] != 1.0 || ids[start] != 0 {
            continue;
        }
        next_id += 1;
        ids[start] = next_id;
        stack.push(start);
        while let Some(at) = stack.pop() {
            let (y, x) = (at / w, at % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let ni = ny as usize * w + nx as usize;
                    if mask.as_slice()[ni] == 1.0 && ids[ni] == 0 {
                        ids[ni] = next_id;
                        stack.push(ni);
                    }
                }
            }
        }
    }
    Ok((ids, next_id as usize))
}

/// One point of the per-region-overlap curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProCurvePoint {
    /// Pooled per-pixel false positive rate across all images.
    pub fpr: f64,
    /// Mean overlap across all ground-truth regions, each weighted equally.
    pub mean_pro: f64,
}

struct PixelRecord {
    score: f32,
    /// 0 = negative pixel, otherwise 1-based global region index.
    region: u32,
}

fn collect_records(per_image: &[(AnomalyMap, Tensor3)]) -> Result<(Vec<PixelRecord>, Vec<usize>)> {
    let mut records = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for (map, mask) in per_image {
        if map.resolution != Resolution::Pixel {
            return Err(Error::validation(
                "PRO evaluation expects pixel-resolution maps",
            ));
        }
        let (h, w) = map.dims();
        if (mask.height(), mask.width()) != (h, w) {
            return Err(Error::validation(format!(
                "mask {}x{} does not match map {h}x{w}",
                mask.height(),
                mask.width()
            )));
        }
        let (ids, count) = label_regions(mask)?;
        let base = region_sizes.len() as u32;
        region_sizes.extend(std::iter::repeat_n(0usize, count));
        for (i, &score) in map.scores().iter().enumerate() {
            let region = if ids[i] == 0 { 0 } else { base + ids[i] };
            if region != 0 {
                region_sizes[(region - 1) as usize] += 1;
            }
            records.push(PixelRecord { score, region });
        }
    }
    Ok((records, region_sizes))
}

/// Sweep thresholds over the pooled scores, descending; a pixel is detected
/// when its score is >= the threshold. `max_thresholds` limits the sweep to
/// that many quantile levels (`None` = every distinct value, the exact curve).
pub fn pro_curve_with(
    per_image: &[(AnomalyMap, Tensor3)],
    max_thresholds: Option<usize>,
) -> Result<Vec<ProCurvePoint>> {
    let (mut records, region_sizes) = collect_records(per_image)?;
    let n_regions = region_sizes.len();
    if n_regions == 0 {
        return Err(Error::UndefinedMetric {
            message: "PRO needs at least one ground-truth region".to_string(),
        });
    }
    let total_neg = records.iter().filter(|r| r.region == 0).count();
    if total_neg == 0 {
        return Err(Error::UndefinedMetric {
            message: "PRO needs at least one negative pixel".to_string(),
        });
    }

    records.sort_unstable_by(|a, b| b.score.total_cmp(&a.score));

    // Optional quantile subsampling of the emitted threshold levels.
    let keep_levels: Option<Vec<f32>> = max_thresholds.map(|k| {
        let k = k.max(2);
        let mut levels: Vec<f32> = (0..k)
            .map(|i| records[i * (records.len() - 1) / (k - 1)].score)
            .collect();
        levels.dedup();
        levels
    });

    let mut curve = vec![ProCurvePoint {
        fpr: 0.0,
        mean_pro: 0.0,
    }];
    let mut fp = 0usize;
    let mut detected = vec![0usize; n_regions];
    let mut pro_sum = 0.0f64;
    let mut keep_at = 0usize;
    let mut i = 0usize;
    while i < records.len() {
        let value = records[i].score;
        while i < records.len() && records[i].score == value {
            let r = records[i].region;
            if r == 0 {
                fp += 1;
            } else {
                let idx = (r - 1) as usize;
                detected[idx] += 1;
                pro_sum += 1.0 / region_sizes[idx] as f64;
            }
            i += 1;
        }
        let emit = match &keep_levels {
            None => true,
            Some(levels) => {
                if keep_at < levels.len() && value <= levels[keep_at] {
                    while keep_at < levels.len() && value <= levels[keep_at] {
                        keep_at += 1;
                    }
                    true
                } else {
                    i == records.len()
                }
            }
        };
        if emit {
            curve.push(ProCurvePoint {
                fpr: fp as f64 / total_neg as f64,
                mean_pro: pro_sum / n_regions as f64,
            });
        }
    }
    Ok(curve)
}

/// The exact per-region-overlap curve (every distinct pooled score value).
pub fn pro_curve(per_image: &[(AnomalyMap, Tensor3)]) -> Result<Vec<ProCurvePoint>> {
    pro_curve_with(per_image, None)
}

/// Trapezoidal integral of mean PRO over `fpr in [0, cap]`, with linear
/// interpolation at the cap, normalized by the cap.
pub fn pro_auc(curve: &[ProCurvePoint], fpr_cap: f64) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::validation("empty PRO curve"));
    }
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(Error::validation(format!(
            "FPR cap must be in (0, 1], got {fpr_cap}"
        )));
    }
    let mut area = 0.0f64;
    for pair in curve.windows(2) {
        let (p0, p1) = (pair[0], pair[1]);
        if p1.fpr <= p0.fpr {
            continue;
        }
        if p0.fpr >= fpr_cap {
            break;
        }
        if p1.fpr <= fpr_cap {
            area += (p1.fpr - p0.fpr) * (p0.mean_pro + p1.mean_pro) / 2.0;
        } else {
            let t = (fpr_cap - p0.fpr) / (p1.fpr - p0.fpr);
            let pro_at_cap = p0.mean_pro + (p1.mean_pro - p0.mean_pro) * t;
            area += (fpr_cap - p0.fpr) * (p0.mean_pro + pro_at_cap) / 2.0;
            break;
        }
    }
    Ok(area / fpr_cap)
}

/// Everything one evaluation run reports.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub category: String,
    pub roc_auc: f64,
    pub pro_auc: f64,
    pub fpr_cap: f64,
    pub n_test_images: usize,
    pub n_regions: usize,
    /// Thresholds calibrated on the training data at several FPR levels.
    pub thresholds: Vec<Threshold>,
    /// Mean end-to-end scoring time per image, seconds (excludes decoding).
    pub seconds_per_image: f64,
    pub curve: Vec<ProCurvePoint>,
    /// Resolved configuration, echoed for provenance.
    pub config_echo: Vec<(String, String)>,
}

impl EvalReport {
    /// Line-oriented `key=value` rendering.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("category", self.category.clone());
        push("roc_auc", format!("{:.6}", self.roc_auc));
        push("pro_auc", format!("{:.6}", self.pro_auc));
        push("pro_fpr_cap", format!("{}", self.fpr_cap));
        push("test_images", self.n_test_images.to_string());
        push("ground_truth_regions", self.n_regions.to_string());
        push("seconds_per_image", format!("{:.6}", self.seconds_per_image));
        if self.seconds_per_image > 0.0 {
            push("fps", format!("{:.2}", 1.0 / self.seconds_per_image));
        }
        for t in &self.thresholds {
            push(
                &format!("threshold_fpr_{}", t.calibration_fpr),
                format!("{}", t.value),
            );
        }
        for (k, v) in &self.config_echo {
            push(&format!("config.{k}"), v.clone());
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_key_value()).map_err(|e| Error::io(path, e))
    }

    /// Comma-separated curve dump for plotting.
    pub fn write_curve_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        writeln!(f, "fpr,mean_pro").map_err(|e| Error::io(path, e))?;
        for p in &self.curve {
            writeln!(f, "{},{}", p.fpr, p.mean_pro).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}
