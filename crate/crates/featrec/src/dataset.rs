//! Dataset ingestion for the MVTec-style directory layout plus a seeded
//! synthetic texture generator with planted defects.
//!
//! Expected tree:
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/good/*.png
//! <root>/<category>/test/<type>/*.png
//! <root>/<category>/ground_truth/<type>/<stem>_mask.png
//! ```

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{save_mask_png, save_rgb8_png, Tensor3};

/// One test image with its optional ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TestEntry {
    pub image: PathBuf,
    /// Present exactly when the image is anomalous.
    pub mask: Option<PathBuf>,
    /// Subdirectory name; "good" marks normal test images.
    pub anomaly_type: String,
}

impl TestEntry {
    pub fn is_anomalous(&self) -> bool {
        self.anomaly_type != "good"
    }
}

/// Enumerated contents of one dataset category.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub category: String,
    pub train_normal: Vec<PathBuf>,
    pub test: Vec<TestEntry>,
    pub anomaly_types: Vec<String>,
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
    )
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            dirs.push((name, path));
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Enumerate a category, lexicographically sorted. Anomalous test images
/// must have a ground-truth mask; all offenders are listed in the error.
pub fn scan_mvtec(root: &Path, category: &str) -> Result<DatasetManifest> {
    let base = root.join(category);
    let train_dir = base.join("train").join("good");
    if !train_dir.is_dir() {
        return Err(Error::manifest(format!(
            "missing train/good directory under {}",
            base.display()
        )));
    }
    let train_normal = sorted_images(&train_dir)?;
    if train_normal.is_empty() {
        return Err(Error::manifest(format!(
            "no training images in {}",
            train_dir.display()
        )));
    }

    let test_dir = base.join("test");
    if !test_dir.is_dir() {
        return Err(Error::manifest(format!(
            "missing test directory under {}",
            base.display()
        )));
    }
    let gt_dir = base.join("ground_truth");

    let mut test = Vec::new();
    let mut anomaly_types = Vec::new();
    let mut missing_masks = Vec::new();
    for (type_name, type_dir) in sorted_subdirs(&test_dir)? {
        let images = sorted_images(&type_dir)?;
        if type_name != "good" {
            anomaly_types.push(type_name.clone());
        }
        for image in images {
            let mask = if type_name == "good" {
                None
            } else {
                let stem = image
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default();
                let candidates = [
                    gt_dir.join(&type_name).join(format!("{stem}_mask.png")),
                    gt_dir.join(&type_name).join(format!("{stem}.png")),
                ];
                match candidates.iter().find(|p| p.is_file()) {
                    Some(found) => Some(found.clone()),
                    None => {
                        missing_masks.push(image.display().to_string());
                        None
                    }
                }
            };
            test.push(TestEntry {
                image,
                mask,
                anomaly_type: type_name.clone(),
            });
        }
    }
    if !missing_masks.is_empty() {
        return Err(Error::manifest(format!(
            "anomalous test images without ground-truth masks: {}",
            missing_masks.join(", ")
        )));
    }

    Ok(DatasetManifest {
        category: category.to_string(),
        train_normal,
        test,
        anomaly_types,
    })
}

/// Bounds on the planted per-defect mask area, as a fraction of image area.
pub const DEFECT_AREA_FRACTION: (f64, f64) = (0.0016, 0.0432);

struct Grating {
    angle: f64,
    freq: f64,
    phase: f64,
    amp: [f64; 3],
}

fn texture_pixel(gratings: &[Grating], phases: &[f64], x: usize, y: usize, side: usize) -> [f64; 3] {
    let mut px = [0.5f64; 3];
    for (g, &jitter) in gratings.iter().zip(phases) {
        let t = (x as f64 * g.angle.cos() + y as f64 * g.angle.sin()) / side as f64;
        let s = (2.0 * PI * g.freq * t + g.phase + jitter).sin();
        for (p, &a) in px.iter_mut().zip(&g.amp) {
            *p += a * s;
        }
    }
    px
}

#[derive(Clone, Copy)]
struct Defect {
    cy: f64,
    cx: f64,
    half_h: f64,
    half_w: f64,
    elliptical: bool,
    shift_mag: [f64; 3],
}

impl Defect {
    fn covers(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 - self.cy) / self.half_h;
        let dx = (x as f64 - self.cx) / self.half_w;
        if self.elliptical {
            dy * dy + dx * dx <= 1.0
        } else {
            dy.abs() <= 1.0 && dx.abs() <= 1.0
        }
    }

    fn area_pixels(&self, side: usize) -> usize {
        let mut n = 0;
        for y in 0..side {
            for x in 0..side {
                if self.covers(y, x) {
                    n += 1;
                }
            }
        }
        n
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        (
            self.cy - self.half_h,
            self.cy + self.half_h,
            self.cx - self.half_w,
            self.cx + self.half_w,
        )
    }

    fn overlaps(&self, other: &Defect) -> bool {
        let (t0, b0, l0, r0) = self.bbox();
        let (t1, b1, l1, r1) = other.bbox();
        t0 <= b1 && t1 <= b0 && l0 <= r1 && l1 <= r0
    }
}

fn draw_defects(rng: &mut ChaCha8Rng, side: usize) -> Vec<Defect> {
    let count = rng.random_range(1usize..=3);
    let mut defects: Vec<Defect> = Vec::new();
    let (lo_frac, hi_frac) = DEFECT_AREA_FRACTION;
    while defects.len() < count {
        let mut placed = false;
        for _ in 0..200 {
            let half_h = rng.random_range(0.04..=0.12) * side as f64 / 2.0;
            let half_w = rng.random_range(0.04..=0.12) * side as f64 / 2.0;
            let elliptical = rng.random_bool(0.5);
            let cy = rng.random_range(half_h + 1.0..side as f64 - half_h - 2.0);
            let cx = rng.random_range(half_w + 1.0..side as f64 - half_w - 2.0);
            let shift_mag = [
                rng.random_range(0.25..=0.5),
                rng.random_range(0.25..=0.5),
                rng.random_range(0.25..=0.5),
            ];
            let d = Defect {
                cy,
                cx,
                half_h,
                half_w,
                elliptical,
                shift_mag,
            };
            let frac = d.area_pixels(side) as f64 / (side * side) as f64;
            if frac < lo_frac || frac > hi_frac {
                continue;
            }
            if defects.iter().any(|e| e.overlaps(&d)) {
                continue;
            }
            defects.push(d);
            placed = true;
            break;
        }
        if !placed {
            break; // crowded; accept fewer defects (at least one always fits)
        }
    }
    defects
}

/// Generate a seeded synthetic category in the MVTec layout and return its
/// manifest. Normal images are smooth periodic textures (three sinusoidal
/// gratings plus 2% noise); anomalous test images carry 1-3 planted
/// rectangular or elliptical patches with shifted color/intensity, with
/// exact masks written alongside.
pub fn make_synthetic_category(
    root: &Path,
    category: &str,
    seed: u64,
    n_train: usize,
    n_test: usize,
    side: usize,
) -> Result<DatasetManifest> {
    if side < 32 {
        return Err(Error::validation(format!(
            "synthetic image side must be at least 32, got {side}"
        )));
    }
    if n_train == 0 || n_test == 0 {
        return Err(Error::validation(
            "synthetic category needs at least one train and one test image",
        ));
    }
    let base = root.join(category);
    let train_dir = base.join("train").join("good");
    let test_good_dir = base.join("test").join("good");
    let test_defect_dir = base.join("test").join("defect");
    let gt_dir = base.join("ground_truth").join("defect");
    for dir in [&train_dir, &test_good_dir, &test_defect_dir, &gt_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.as_path(), e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gratings: Vec<Grating> = (0..3)
        .map(|_| Grating {
            angle: rng.random_range(0.0..PI),
            freq: rng.random_range(2.0..6.0),
            phase: rng.random_range(0.0..2.0 * PI),
            amp: [
                rng.random_range(0.06..0.14),
                rng.random_range(0.06..0.14),
                rng.random_range(0.06..0.14),
            ],
        })
        .collect();

    let mut render_normal = |rng: &mut ChaCha8Rng| -> Tensor3 {
        let phases: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let mut img = Tensor3::zeros(side, side, 3);
        for y in 0..side {
            for x in 0..side {
                let px = texture_pixel(&gratings, &phases, x, y, side);
                let cell = img.cell_mut(y, x);
                for (c, &v) in cell.iter_mut().zip(&px) {
                    let noise = rng.random_range(-0.02f64..=0.02);
                    *c = (v + noise).clamp(0.0, 1.0) as f32;
                }
            }
        }
        img
    };

    for i in 0..n_train {
        let img = render_normal(&mut rng);
        save_rgb8_png(&img, &train_dir.join(format!("{i:03}.png")))?;
    }

    let n_good = (n_test / 4).max(1).min(n_test - 1).max(1);
    let n_defect = n_test - n_good;
    for i in 0..n_good {
        let img = render_normal(&mut rng);
        save_rgb8_png(&img, &test_good_dir.join(format!("{i:03}.png")))?;
    }

    for i in 0..n_defect {
        let mut img = render_normal(&mut rng);
        let defects = draw_defects(&mut rng, side);
        let mut mask = Tensor3::zeros(side, side, 1);
        for d in &defects {
            // Push each channel toward the farther intensity bound so the
            // shift survives clamping.
            let (t, b, l, r) = d.bbox();
            for y in (t.floor().max(0.0) as usize)..=(b.ceil() as usize).min(side - 1) {
                for x in (l.floor().max(0.0) as usize)..=(r.ceil() as usize).min(side - 1) {
                    if !d.covers(y, x) {
                        continue;
                    }
                    mask.set(y, x, 0, 1.0);
                    let cell = img.cell_mut(y, x);
                    for (ch, v) in cell.iter_mut().enumerate() {
                        let shift = if *v > 0.5 {
                            -d.shift_mag[ch]
                        } else {
                            d.shift_mag[ch]
                        };
                        *v = (*v as f64 + shift).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
        save_rgb8_png(&img, &test_defect_dir.join(format!("{i:03}.png")))?;
        save_mask_png(&mask, &gt_dir.join(format!("{i:03}_mask.png")))?;
    }

    scan_mvtec(root, category)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::load_mask;

    #[test]
    fn scan_toy_tree() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let base = root.join("widget");
        for sub in ["train/good", "test/good", "test/hole", "ground_truth/hole"] {
            std::fs::create_dir_all(base.join(sub)).unwrap();
        }
        let img = image::RgbImage::new(8, 8);
        img.save(base.join("train/good/000.png")).unwrap();
        img.save(base.join("train/good/001.png")).unwrap();
        img.save(base.join("test/good/000.png")).unwrap();
        img.save(base.join("test/hole/000.png")).unwrap();
        image::GrayImage::new(8, 8)
            .save(base.join("ground_truth/hole/000_mask.png"))
            .unwrap();

        let m = scan_mvtec(root, "widget").unwrap();
        assert_eq!(m.train_normal.len(), 2);
        assert_eq!(m.test.len(), 2);
        assert_eq!(m.anomaly_types, vec!["hole".to_string()]);
        let hole = m.test.iter().find(|t| t.anomaly_type == "hole").unwrap();
        assert!(hole.is_anomalous());
        assert!(hole.mask.is_some());
        let good = m.test.iter().find(|t| t.anomaly_type == "good").unwrap();
        assert!(good.mask.is_none());
    }

    #[test]
    fn missing_mask_lists_offender() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("widget");
        for sub in ["train/good", "test/crack"] {
            std::fs::create_dir_all(base.join(sub)).unwrap();
        }
        let img = image::RgbImage::new(8, 8);
        img.save(base.join("train/good/000.png")).unwrap();
        img.save(base.join("test/crack/007.png")).unwrap();
        let err = scan_mvtec(dir.path(), "widget").unwrap_err();
        assert!(err.to_string().contains("007"));
    }

    #[test]
    fn empty_train_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("widget");
        std::fs::create_dir_all(base.join("train/good")).unwrap();
        std::fs::create_dir_all(base.join("test/good")).unwrap();
        assert!(scan_mvtec(dir.path(), "widget").is_err());
    }

    #[test]
    fn synthetic_is_bitwise_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let ma = make_synthetic_category(dir_a.path(), "tex", 11, 3, 4, 32).unwrap();
        let mb = make_synthetic_category(dir_b.path(), "tex", 11, 3, 4, 32).unwrap();
        assert_eq!(ma.train_normal.len(), mb.train_normal.len());
        for (a, b) in ma.train_normal.iter().zip(&mb.train_normal) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        for (a, b) in ma.test.iter().zip(&mb.test) {
            assert_eq!(
                std::fs::read(&a.image).unwrap(),
                std::fs::read(&b.image).unwrap()
            );
            if let (Some(am), Some(bm)) = (&a.mask, &b.mask) {
                assert_eq!(std::fs::read(am).unwrap(), std::fs::read(bm).unwrap());
            }
        }

        let dir_c = tempfile::tempdir().unwrap();
        let mc = make_synthetic_category(dir_c.path(), "tex", 12, 3, 4, 32).unwrap();
        assert_ne!(
            std::fs::read(&ma.train_normal[0]).unwrap(),
            std::fs::read(&mc.train_normal[0]).unwrap()
        );
    }

    #[test]
    fn synthetic_defects_have_bounded_area_and_positive_masks() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_synthetic_category(dir.path(), "tex", 5, 2, 8, 64).unwrap();
        let defects: Vec<_> = m.test.iter().filter(|t| t.is_anomalous()).collect();
        assert!(!defects.is_empty());
        let (lo, hi) = DEFECT_AREA_FRACTION;
        for entry in defects {
            let mask = load_mask(entry.mask.as_ref().unwrap(), 64).unwrap();
            let positive = mask.as_slice().iter().filter(|&&v| v == 1.0).count();
            assert!(positive > 0, "{}", entry.image.display());
            // Union of up to three non-overlapping defects.
            let frac = positive as f64 / (64.0 * 64.0);
            assert!(frac >= lo && frac <= 3.0 * hi, "fraction {frac}");
            // Per-defect areas are within the stated bounds.
            let (_, count) = crate::metrics::label_regions(&mask).unwrap();
            assert!((1..=3).contains(&count));
            let (ids, _) = crate::metrics::label_regions(&mask).unwrap();
            for region in 1..=count as u32 {
                let area = ids.iter().filter(|&&i| i == region).count() as f64 / (64.0 * 64.0);
                assert!(
                    area >= lo && area <= hi,
                    "region {region} fraction {area}"
                );
            }
        }
    }

    #[test]
    fn synthetic_split_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_synthetic_category(dir.path(), "tex", 1, 4, 8, 32).unwrap();
        assert_eq!(m.train_normal.len(), 4);
        assert_eq!(m.test.len(), 8);
        let good = m.test.iter().filter(|t| !t.is_anomalous()).count();
        assert_eq!(good, 2);
        assert_eq!(m.anomaly_types, vec!["defect".to_string()]);
    }
}
