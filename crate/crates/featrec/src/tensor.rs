//! Dense rank-3 arrays, image I/O, and the resize/filter primitives the
//! rest of the pipeline is built on.
//!
//! Layout is row-major `(row, column, channel)` with the channel index
//! fastest, so the per-cell channel vector is a contiguous slice.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Dense `height x width x channels` array of 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    /// All-zero tensor of the given shape.
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        assert!(h > 0 && w > 0 && c > 0, "tensor dims must be positive");
        Tensor3 {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    /// Wrap an existing buffer. Fails on length mismatch or non-finite values.
    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::shape(format!(
                "tensor dims must be positive, got {h}x{w}x{c}"
            )));
        }
        if data.len() != h * w * c {
            return Err(Error::shape(format!(
                "data length {} does not match {h}x{w}x{c} = {}",
                data.len(),
                h * w * c
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "tensor data contains non-finite value {bad}"
            )));
        }
        Ok(Tensor3 { h, w, c, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    /// Contiguous channel vector at cell `(y, x)`.
    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &[f32] {
        let base = (y * self.w + x) * self.c;
        &self.data[base..base + self.c]
    }

    #[inline]
    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let base = (y * self.w + x) * self.c;
        &mut self.data[base..base + self.c]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Whether an image is a normal sample, an anomalous one, or unlabeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Normal,
    Anomalous,
    Unknown,
}

/// A loaded image plus optional ground-truth mask, both at working resolution.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub path: PathBuf,
    /// `side x side x 3`, values in `[0, 1]`.
    pub pixels: Tensor3,
    pub label: Label,
    /// Binary mask (`channels == 1`, values 0 or 1) aligned to `pixels`.
    pub mask: Option<Tensor3>,
}

/// Decode a raster file, resize to `target_side` square, normalize to `[0, 1]`.
///
/// Grayscale sources have their single channel copied into all three output
/// channels. The resize uses bilinear interpolation; this choice is echoed
/// into run metadata by the pipeline.
pub fn load_image(path: &Path, target_side: usize) -> Result<ImageRecord> {
    let pixels = load_rgb_tensor(path, target_side)?;
    Ok(ImageRecord {
        path: path.to_path_buf(),
        pixels,
        label: Label::Unknown,
        mask: None,
    })
}

fn decode_rgb(path: &Path) -> Result<Tensor3> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    // to_rgb32f triplicates grayscale channels and scales to [0, 1].
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Tensor3::from_vec(h, w, 3, rgb.into_raw())
}

fn load_rgb_tensor(path: &Path, target_side: usize) -> Result<Tensor3> {
    assert!(target_side > 0, "target_side must be positive");
    let full = decode_rgb(path)?;
    if full.height() == target_side && full.width() == target_side {
        Ok(full)
    } else {
        Ok(resize_bilinear(&full, target_side, target_side))
    }
}

/// Load a ground-truth mask: any nonzero pixel is 1. Resized with nearest
/// neighbor so the mask stays binary.
pub fn load_mask(path: &Path, target_side: usize) -> Result<Tensor3> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let gray = img.to_luma32f();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let full = Tensor3::from_vec(h, w, 1, gray.into_raw())?;
    let resized = if h == target_side && w == target_side {
        full
    } else {
        resize_nearest(&full, target_side, target_side)
    };
    let data = resized
        .as_slice()
        .iter()
        .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
        .collect();
    Tensor3::from_vec(target_side, target_side, 1, data)
}

/// Nearest-neighbor resize. Source index for output row `i` is
/// `floor(i * src_h / out_h)`; same rule for columns.
pub fn resize_nearest(src: &Tensor3, out_h: usize, out_w: usize) -> Tensor3 {
    assert!(out_h > 0 && out_w > 0, "output dims must be positive");
    let (src_h, src_w, c) = src.dims();
    if (src_h, src_w) == (out_h, out_w) {
        return src.clone();
    }
    let mut out = Tensor3::zeros(out_h, out_w, c);
    for oy in 0..out_h {
        let sy = oy * src_h / out_h;
        for ox in 0..out_w {
            let sx = ox * src_w / out_w;
            out.cell_mut(oy, ox).copy_from_slice(src.cell(sy, sx));
        }
    }
    out
}

/// Bilinear resize under the half-pixel-center convention: output cell `i`
/// samples source position `(i + 0.5) * src / out - 0.5`, clamped to the
/// valid range. Output values are bounded by the source min/max.
pub fn resize_bilinear(src: &Tensor3, out_h: usize, out_w: usize) -> Tensor3 {
    assert!(out_h > 0 && out_w > 0, "output dims must be positive");
    let (src_h, src_w, c) = src.dims();
    let mut out = Tensor3::zeros(out_h, out_w, c);

    // Precompute per-axis sample indices and fractions.
    let axis = |out_n: usize, src_n: usize| -> Vec<(usize, usize, f32)> {
        (0..out_n)
            .map(|i| {
                let pos = (i as f32 + 0.5) * src_n as f32 / out_n as f32 - 0.5;
                let pos = pos.clamp(0.0, (src_n - 1) as f32);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src_n - 1);
                (i0, i1, pos - i0 as f32)
            })
            .collect()
    };
    let ys = axis(out_h, src_h);
    let xs = axis(out_w, src_w);

    for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
            let c00 = src.cell(y0, x0);
            let c01 = src.cell(y0, x1);
            let c10 = src.cell(y1, x0);
            let c11 = src.cell(y1, x1);
            let dst = out.cell_mut(oy, ox);
            for ch in 0..c {
                let top = c00[ch] + (c01[ch] - c00[ch]) * tx;
                let bot = c10[ch] + (c11[ch] - c10[ch]) * tx;
                dst[ch] = top + (bot - top) * ty;
            }
        }
    }
    out
}

/// Per-channel mean over `k x k` windows moved by `stride`.
///
/// Requires `(src - k)` divisible by `stride` in both spatial dimensions so
/// output shapes are predictable; violations report the offending dimension.
pub fn mean_filter(src: &Tensor3, k: usize, stride: usize) -> Result<Tensor3> {
    assert!(k > 0 && stride > 0, "k and stride must be positive");
    let (src_h, src_w, c) = src.dims();
    if src_h < k || (src_h - k) % stride != 0 {
        return Err(Error::shape(format!(
            "height {src_h} is not compatible with window {k} and stride {stride}"
        )));
    }
    if src_w < k || (src_w - k) % stride != 0 {
        return Err(Error::shape(format!(
            "width {src_w} is not compatible with window {k} and stride {stride}"
        )));
    }
    let out_h = (src_h - k) / stride + 1;
    let out_w = (src_w - k) / stride + 1;
    let inv = 1.0 / (k * k) as f64;
    let mut out = Tensor3::zeros(out_h, out_w, c);
    // 64-bit window sums keep the means exact enough to compare against
    // reference computations regardless of window size.
    let mut acc = vec![0.0f64; c];
    for oy in 0..out_h {
        for ox in 0..out_w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for wy in 0..k {
                for wx in 0..k {
                    let cell = src.cell(oy * stride + wy, ox * stride + wx);
                    for (a, &v) in acc.iter_mut().zip(cell) {
                        *a += v as f64;
                    }
                }
            }
            let dst = out.cell_mut(oy, ox);
            for (d, &a) in dst.iter_mut().zip(acc.iter()) {
                *d = (a * inv) as f32;
            }
        }
    }
    Ok(out)
}

/// Write a single-channel tensor (values in `[0, 1]`) as 16-bit grayscale PNG.
pub fn save_gray16_png(map: &Tensor3, path: &Path) -> Result<()> {
    if map.channels() != 1 {
        return Err(Error::shape(format!(
            "expected single channel, got {}",
            map.channels()
        )));
    }
    let (h, w, _) = map.dims();
    let buf: Vec<u16> = map
        .as_slice()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf)
            .expect("buffer sized from tensor dims");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Write an RGB tensor (values in `[0, 1]`) as 8-bit PNG.
pub fn save_rgb8_png(img: &Tensor3, path: &Path) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::shape(format!(
            "expected three channels, got {}",
            img.channels()
        )));
    }
    let (h, w, _) = img.dims();
    let buf: Vec<u8> = img
        .as_slice()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let out: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized from tensor dims");
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Write a binary mask (single channel, values 0/1) as 1-bit grayscale PNG.
pub fn save_mask_png(mask: &Tensor3, path: &Path) -> Result<()> {
    if mask.channels() != 1 {
        return Err(Error::shape(format!(
            "expected single channel, got {}",
            mask.channels()
        )));
    }
    let (h, w, _) = mask.dims();
    let row_bytes = w.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x, 0) > 0.5 {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header().map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    writer.write_image_data(&packed).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
