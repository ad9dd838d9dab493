//! Fuses the hierarchical feature maps into one dense multi-scale regional
//! representation: each map is aligned to image resolution by nearest-neighbor
//! resize, aggregated with a mean filter, and the results are concatenated
//! along the channel axis in ascending scale order.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::dfrc::{Container, Entry};
use crate::error::{Error, Result};
use crate::tensor::{mean_filter, resize_nearest, Tensor3};

/// Contiguous inclusive range of scale (tap) indices, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleRange {
    pub lo: usize,
    pub hi: usize,
}

impl ScaleRange {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo == 0 || lo > hi {
            return Err(Error::validation(format!(
                "invalid scale range {lo}:{hi} (need 1 <= lo <= hi)"
            )));
        }
        Ok(ScaleRange { lo, hi })
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// 0-based indices into a feature list of length `available`.
    pub fn indices(&self, available: usize) -> Result<std::ops::Range<usize>> {
        if self.hi > available {
            return Err(Error::validation(format!(
                "scale range {self} exceeds the {available} available feature maps"
            )));
        }
        Ok(self.lo - 1..self.hi)
    }
}

impl fmt::Display for ScaleRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

impl FromStr for ScaleRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s.split_once(':').ok_or_else(|| {
            Error::validation(format!("scale range '{s}' must look like A:B"))
        })?;
        let lo = lo
            .parse()
            .map_err(|_| Error::validation(format!("bad scale range bound '{lo}'")))?;
        let hi = hi
            .parse()
            .map_err(|_| Error::validation(format!("bad scale range bound '{hi}'")))?;
        ScaleRange::new(lo, hi)
    }
}

/// The fused multi-scale regional feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionalFeatureMap {
    /// `h_o x w_o x c_o`.
    pub map: Tensor3,
    /// Image pixels per regional cell, vertically.
    pub region_h: usize,
    /// Image pixels per regional cell, horizontally.
    pub region_w: usize,
    pub scale_range: ScaleRange,
    /// Starting channel index per scale, with a final sentinel equal to c_o.
    pub channel_offsets: Vec<usize>,
}

impl RegionalFeatureMap {
    pub fn cells(&self) -> (usize, usize) {
        (self.map.height(), self.map.width())
    }

    pub fn feature_dim(&self) -> usize {
        self.map.channels()
    }

    /// The c_o-vector describing the region at cell `(i, j)`.
    pub fn feature_at(&self, i: usize, j: usize) -> Result<&[f32]> {
        let (h, w) = self.cells();
        if i >= h || j >= w {
            return Err(Error::validation(format!(
                "cell ({i}, {j}) out of bounds for {h}x{w} map"
            )));
        }
        Ok(self.map.cell(i, j))
    }

    /// The slice of a cell's feature belonging to one scale of the range.
    pub fn scale_slice<'a>(&self, feature: &'a [f32], scale: usize) -> Result<&'a [f32]> {
        if scale < self.scale_range.lo || scale > self.scale_range.hi {
            return Err(Error::validation(format!(
                "scale {scale} outside range {}",
                self.scale_range
            )));
        }
        let k = scale - self.scale_range.lo;
        Ok(&feature[self.channel_offsets[k]..self.channel_offsets[k + 1]])
    }

    /// Dump to a DFRC file, one entry per field.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let (h, w) = self.cells();
        let mut c = Container::new();
        c.insert(
            "map",
            Entry::F32 {
                dims: vec![h as u32, w as u32, self.feature_dim() as u32],
                data: self.map.as_slice().to_vec(),
            },
        );
        c.insert("region_h", Entry::scalar_u32(self.region_h as u32));
        c.insert("region_w", Entry::scalar_u32(self.region_w as u32));
        c.insert("scale_lo", Entry::scalar_u32(self.scale_range.lo as u32));
        c.insert("scale_hi", Entry::scalar_u32(self.scale_range.hi as u32));
        c.insert(
            "channel_offsets",
            Entry::U32 {
                dims: vec![self.channel_offsets.len() as u32],
                data: self.channel_offsets.iter().map(|&v| v as u32).collect(),
            },
        );
        c.save(path)
    }
}

/// Align, aggregate, and concatenate the selected feature maps.
///
/// Each selected map is nearest-resized to `img_h x img_w`, mean-filtered
/// with window `agg_k` and stride `agg_stride`, then all results are
/// channel-concatenated in ascending scale order.
pub fn generate(
    features: &[Tensor3],
    range: ScaleRange,
    img_h: usize,
    img_w: usize,
    agg_k: usize,
    agg_stride: usize,
) -> Result<RegionalFeatureMap> {
    let idx = range.indices(features.len())?;
    let selected = &features[idx];

    let mut aggregated = Vec::with_capacity(selected.len());
    for feat in selected {
        let aligned = resize_nearest(feat, img_h, img_w);
        aggregated.push(mean_filter(&aligned, agg_k, agg_stride)?);
    }

    let (h_o, w_o, _) = aggregated[0].dims();
    let c_o: usize = aggregated.iter().map(|t| t.channels()).sum();
    let mut offsets = Vec::with_capacity(aggregated.len() + 1);
    let mut acc = 0usize;
    for t in &aggregated {
        offsets.push(acc);
        acc += t.channels();
    }
    offsets.push(acc);

    if img_h % h_o != 0 || img_w % w_o != 0 {
        return Err(Error::validation(format!(
            "aggregation {agg_k}:{agg_stride} yields {h_o}x{w_o} cells that do not tile \
             the {img_h}x{img_w} image"
        )));
    }

    // Scale-major interleave: each cell's vector is the concatenation of the
    // per-scale vectors, so per-scale slices of a cell are contiguous.
    let mut map = Tensor3::zeros(h_o, w_o, c_o);
    for y in 0..h_o {
        for x in 0..w_o {
            let dst = map.cell_mut(y, x);
            let mut at = 0usize;
            for t in &aggregated {
                let src = t.cell(y, x);
                dst[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
    }

    Ok(RegionalFeatureMap {
        map,
        region_h: img_h / h_o,
        region_w: img_w / w_o,
        scale_range: range,
        channel_offsets: offsets,
    })
}
