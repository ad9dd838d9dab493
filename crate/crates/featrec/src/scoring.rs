//! Anomaly maps, FPR-calibrated segmentation thresholds, and binary masks.

use std::path::Path;

use crate::dfrc::{Container, Entry};
use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, Tensor3};

/// Whether a map lives at regional (cell) or pixel resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Regional,
    Pixel,
}

/// Rank-2 grid of nonnegative anomaly scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    scores: Vec<f32>,
    h: usize,
    w: usize,
    pub resolution: Resolution,
}

impl AnomalyMap {
    pub fn new(h: usize, w: usize, scores: Vec<f32>, resolution: Resolution) -> Result<Self> {
        if scores.len() != h * w {
            return Err(Error::shape(format!(
                "score length {} does not match {h}x{w}",
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::validation(format!(
                "anomaly scores must be finite and nonnegative, got {bad}"
            )));
        }
        Ok(AnomalyMap {
            scores,
            h,
            w,
            resolution,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.scores[y * self.w + x]
    }

    pub fn max_score(&self) -> f32 {
        self.scores.iter().copied().fold(0.0, f32::max)
    }

    /// Store the raw grid as a DFRC file (single f32 entry plus resolution).
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        c.insert(
            "scores",
            Entry::F32 {
                dims: vec![self.h as u32, self.w as u32],
                data: self.scores.clone(),
            },
        );
        c.insert(
            "resolution",
            Entry::text(match self.resolution {
                Resolution::Regional => "regional",
                Resolution::Pixel => "pixel",
            }),
        );
        c.save(path)
    }
}

/// A calibrated segmentation threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub value: f32,
    pub calibration_fpr: f64,
    pub calibration_pixel_count: usize,
}

/// Per-cell Euclidean distance between a regional map and its reconstruction.
pub fn anomaly_map(truth: &Tensor3, recon: &Tensor3) -> Result<AnomalyMap> {
    if truth.dims() != recon.dims() {
        return Err(Error::validation(format!(
            "shape mismatch: {:?} vs {:?}",
            truth.dims(),
            recon.dims()
        )));
    }
    let (h, w, c) = truth.dims();
    let mut scores = Vec::with_capacity(h * w);
    for (a, b) in truth
        .as_slice()
        .chunks_exact(c)
        .zip(recon.as_slice().chunks_exact(c))
    {
        let mut sq = 0.0f64;
        for (&x, &y) in a.iter().zip(b) {
            let d = (x - y) as f64;
            sq += d * d;
        }
        scores.push(sq.sqrt() as f32);
    }
    AnomalyMap::new(h, w, scores, Resolution::Regional)
}

/// Bilinearly upsample a regional map to pixel resolution.
pub fn to_pixel_map(regional: &AnomalyMap, img_h: usize, img_w: usize) -> Result<AnomalyMap> {
    if regional.resolution != Resolution::Regional {
        return Err(Error::validation(
            "to_pixel_map expects a regional-resolution input",
        ));
    }
    let (h, w) = regional.dims();
    let t = Tensor3::from_vec(h, w, 1, regional.scores.clone())?;
    let up = resize_bilinear(&t, img_h, img_w);
    // Interpolation of nonnegative values stays nonnegative; clamp away
    // any -0.0 artifacts.
    let scores = up.into_vec().iter().map(|&v| v.max(0.0)).collect();
    AnomalyMap::new(img_h, img_w, scores, Resolution::Pixel)
}

/// Smallest threshold such that the fraction of calibration scores strictly
/// above it is at most `acceptable_fpr`; for 0 this is the maximum score.
pub fn calibrate_threshold(normal_scores: &[f32], acceptable_fpr: f64) -> Result<Threshold> {
    if normal_scores.is_empty() {
        return Err(Error::validation("no calibration scores"));
    }
    if !(0.0..1.0).contains(&acceptable_fpr) {
        return Err(Error::validation(format!(
            "acceptable FPR must be in [0, 1), got {acceptable_fpr}"
        )));
    }
    let n = normal_scores.len();
    let allowed = (acceptable_fpr * n as f64).floor() as usize;
    let mut sorted = normal_scores.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    // The (allowed+1)-th largest value admits at most `allowed` strictly
    // greater scores; anything smaller admits more.
    Ok(Threshold {
        value: sorted[allowed.min(n - 1)],
        calibration_fpr: acceptable_fpr,
        calibration_pixel_count: n,
    })
}

/// Binary mask of pixels strictly above the threshold.
pub fn segment(pixel_map: &AnomalyMap, t: &Threshold) -> Result<Tensor3> {
    if pixel_map.resolution != Resolution::Pixel {
        return Err(Error::validation("segment expects a pixel-resolution map"));
    }
    let (h, w) = pixel_map.dims();
    let data = pixel_map
        .scores
        .iter()
        .map(|&s| if s > t.value { 1.0 } else { 0.0 })
        .collect();
    Tensor3::from_vec(h, w, 1, data)
}

/// Min-max normalize to `[0, 1]` for display. A constant map has no usable
/// range and comes back as all zeros with the warning flag set.
pub fn normalize_for_display(pixel_map: &AnomalyMap) -> (Tensor3, bool) {
    let (h, w) = pixel_map.dims();
    let lo = pixel_map.scores.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = pixel_map
        .scores
        .iter()
        .copied()
        .fold(f32::NEG_INFINITY, f32::max);
    if hi - lo <= 0.0 {
        return (Tensor3::zeros(h, w, 1), true);
    }
    let inv = 1.0 / (hi - lo);
    let data = pixel_map.scores.iter().map(|&v| (v - lo) * inv).collect();
    (
        Tensor3::from_vec(h, w, 1, data).expect("finite affine rescale"),
        false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, scores: Vec<f32>) -> AnomalyMap {
        AnomalyMap::new(h, w, scores, Resolution::Pixel).unwrap()
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let t = Tensor3::from_vec(2, 3, 4, (0..24).map(|v| v as f32).collect()).unwrap();
        let am = anomaly_map(&t, &t).unwrap();
        assert!(am.scores().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_difference_is_its_norm() {
        let truth = Tensor3::zeros(2, 2, 2);
        let mut recon = Tensor3::zeros(2, 2, 2);
        recon.cell_mut(1, 0).copy_from_slice(&[3.0, 4.0]);
        let am = anomaly_map(&truth, &recon).unwrap();
        assert_eq!(am.get(1, 0), 5.0);
        assert_eq!(am.get(0, 0), 0.0);
        assert_eq!(am.get(0, 1), 0.0);
        assert_eq!(am.get(1, 1), 0.0);
    }

    #[test]
    fn anomaly_map_matches_percell_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor3::from_vec(5, 4, 6, (0..120).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let am = anomaly_map(&a, &b).unwrap();
        for y in 0..5 {
            for x in 0..4 {
                let mut sq = 0.0f64;
                for ch in 0..6 {
                    let d = (a.get(y, x, ch) - b.get(y, x, ch)) as f64;
                    sq += d * d;
                }
                let expect = sq.sqrt() as f32;
                let denom = expect.abs().max(1.0);
                assert!((am.get(y, x) - expect).abs() / denom < 1e-6);
            }
        }
    }

    #[test]
    fn anomaly_map_equivariant_under_cell_shuffle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor3::from_vec(2, 2, 3, (0..12).map(|_| rng.random_range(0.0f32..1.0)).collect())
            .unwrap();
        let b = Tensor3::from_vec(2, 2, 3, (0..12).map(|_| rng.random_range(0.0f32..1.0)).collect())
            .unwrap();
        let base = anomaly_map(&a, &b).unwrap();

        let swap = |t: &Tensor3| {
            let mut s = t.clone();
            let c0: Vec<f32> = s.cell(0, 0).to_vec();
            let c1: Vec<f32> = s.cell(1, 1).to_vec();
            s.cell_mut(0, 0).copy_from_slice(&c1);
            s.cell_mut(1, 1).copy_from_slice(&c0);
            s
        };
        let swapped = anomaly_map(&swap(&a), &swap(&b)).unwrap();
        assert_eq!(base.get(0, 0), swapped.get(1, 1));
        assert_eq!(base.get(1, 1), swapped.get(0, 0));
        assert_eq!(base.get(0, 1), swapped.get(0, 1));
    }

    #[test]
    fn pixel_upsample_preserves_constants_and_bounds() {
        let reg = AnomalyMap::new(4, 4, vec![0.7; 16], Resolution::Regional).unwrap();
        let pix = to_pixel_map(&reg, 16, 16).unwrap();
        assert_eq!(pix.dims(), (16, 16));
        assert!(pix.scores().iter().all(|&v| (v - 0.7).abs() < 1e-6));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let reg = AnomalyMap::new(
            8,
            8,
            (0..64).map(|_| rng.random_range(0.0f32..2.0)).collect(),
            Resolution::Regional,
        )
        .unwrap();
        let pix = to_pixel_map(&reg, 32, 32).unwrap();
        assert!(pix.max_score() <= reg.max_score() + 1e-6);

        // 64x64 regional to 256x256 pixel is the paper-default geometry.
        let reg = AnomalyMap::new(64, 64, vec![0.0; 64 * 64], Resolution::Regional).unwrap();
        assert_eq!(to_pixel_map(&reg, 256, 256).unwrap().dims(), (256, 256));
    }

    #[test]
    fn threshold_examples() {
        let scores: Vec<f32> = (1..=10).map(|v| v as f32).collect();
        let t0 = calibrate_threshold(&scores, 0.0).unwrap();
        assert_eq!(t0.value, 10.0);
        let t2 = calibrate_threshold(&scores, 0.2).unwrap();
        assert_eq!(t2.value, 8.0);
        assert_eq!(scores.iter().filter(|&&s| s > t2.value).count(), 2);

        let scores: Vec<f32> = (1..=1000).map(|v| v as f32 * 0.001).collect();
        let t = calibrate_threshold(&scores, 0.005).unwrap();
        assert_eq!(scores.iter().filter(|&&s| s > t.value).count(), 5);
    }

    #[test]
    fn threshold_monotone_in_fpr() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores: Vec<f32> = (0..500).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let mut last = f32::INFINITY;
        for fpr in [0.0, 0.01, 0.05, 0.1, 0.3, 0.7] {
            let t = calibrate_threshold(&scores, fpr).unwrap().value;
            assert!(t <= last, "fpr {fpr}: {t} > {last}");
            last = t;
        }
    }

    #[test]
    fn fpr_zero_gives_empty_mask_on_calibration_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f32> = (0..256).map(|_| rng.random_range(0.0f32..3.0)).collect();
        let t = calibrate_threshold(&scores, 0.0).unwrap();
        let pm = map(16, 16, scores);
        let mask = segment(&pm, &t).unwrap();
        assert!(mask.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segment_examples() {
        let t = Threshold {
            value: 0.6,
            calibration_fpr: 0.0,
            calibration_pixel_count: 1,
        };
        let pm = map(2, 2, vec![0.1, 0.9, 0.5, 0.7]);
        let mask = segment(&pm, &t).unwrap();
        assert_eq!(mask.as_slice(), &[0.0, 1.0, 0.0, 1.0]);

        let all_below = map(1, 3, vec![0.1, 0.2, 0.6]);
        assert!(segment(&all_below, &t).unwrap().as_slice().iter().all(|&v| v == 0.0));
        let all_above = map(1, 3, vec![0.7, 0.8, 0.9]);
        assert!(all_above.scores().iter().all(|&s| s > t.value));
    }

    #[test]
    fn display_normalization() {
        let pm = map(1, 3, vec![2.0, 3.0, 4.0]);
        let (norm, warn) = normalize_for_display(&pm);
        assert!(!warn);
        assert_eq!(norm.as_slice(), &[0.0, 0.5, 1.0]);

        let already = map(1, 2, vec![0.0, 1.0]);
        let (norm, warn) = normalize_for_display(&already);
        assert!(!warn);
        assert_eq!(norm.as_slice(), &[0.0, 1.0]);

        let constant = map(2, 2, vec![0.4; 4]);
        let (norm, warn) = normalize_for_display(&constant);
        assert!(warn);
        assert!(norm.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_scores_rejected() {
        assert!(AnomalyMap::new(1, 2, vec![0.0, -1.0], Resolution::Pixel).is_err());
        assert!(AnomalyMap::new(1, 2, vec![0.0, f32::NAN], Resolution::Pixel).is_err());
        assert!(AnomalyMap::new(2, 2, vec![0.0; 3], Resolution::Pixel).is_err());
    }
}
