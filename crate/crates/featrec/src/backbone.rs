//! Pretrained convolutional backbone: checkpoint loading, forward-only
//! inference producing the hierarchical feature maps, and receptive-field
//! arithmetic.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dfrc::{Container, Entry};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// How convolutions treat pixels outside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingMode {
    Zero,
    Reflect,
}

impl fmt::Display for PaddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PaddingMode::Zero => write!(f, "zero"),
            PaddingMode::Reflect => write!(f, "reflect"),
        }
    }
}

impl FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PaddingMode::Zero),
            "reflect" => Ok(PaddingMode::Reflect),
            other => Err(Error::validation(format!(
                "unknown padding mode '{other}' (expected zero|reflect)"
            ))),
        }
    }
}

/// One layer of the backbone topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
        pad: usize,
        /// Whether this conv's post-activation output is exported as a
        /// numbered feature map.
        tap: bool,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

/// Receptive-field metadata for one exported feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    /// 1-based tap index.
    pub layer_index: usize,
    /// Side length, in input pixels, of the patch one output cell sees.
    pub size: usize,
    /// Input-pixel distance between adjacent output cells.
    pub jump: usize,
}

/// Walk the layer chain with `size' = size + (kernel - 1) * jump` and
/// `jump' = jump * stride`, starting from `size = 1, jump = 1`. Pooling
/// layers grow the field like any other kernel; one record is emitted per
/// tapped conv layer.
pub fn compute_receptive_fields(layers: &[LayerSpec]) -> Vec<ReceptiveField> {
    let mut size = 1usize;
    let mut jump = 1usize;
    let mut fields = Vec::new();
    let mut tap_index = 0usize;
    for layer in layers {
        let (kernel, stride, tapped) = match *layer {
            LayerSpec::Conv {
                kernel,
                stride,
                tap,
                ..
            } => (kernel, stride, tap),
            LayerSpec::Relu => (1, 1, false),
            LayerSpec::MaxPool { kernel, stride } => (kernel, stride, false),
        };
        size += (kernel - 1) * jump;
        jump *= stride;
        if tapped {
            tap_index += 1;
            fields.push(ReceptiveField {
                layer_index: tap_index,
                size,
                jump,
            });
        }
    }
    fields
}

/// The 16-conv trimmed VGG19 topology (dense layers stripped), every conv
/// tapped, 3x3 stride-1 pad-1 convs and 2x2 stride-2 max pooling.
pub fn vgg19_layers() -> Vec<LayerSpec> {
    let conv = |cin: usize, cout: usize| LayerSpec::Conv {
        kernel: 3,
        stride: 1,
        in_channels: cin,
        out_channels: cout,
        pad: 1,
        tap: true,
    };
    let pool = LayerSpec::MaxPool {
        kernel: 2,
        stride: 2,
    };
    let mut layers = Vec::new();
    let blocks: [(usize, usize); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)];
    let mut cin = 3;
    for (reps, cout) in blocks {
        for _ in 0..reps {
            layers.push(conv(cin, cout));
            layers.push(LayerSpec::Relu);
            cin = cout;
        }
        layers.push(pool.clone());
    }
    layers
}

/// Weights for one conv layer. Runtime layout is `[out][ky][kx][in]` so the
/// innermost products run over contiguous input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// An immutable, loaded backbone ready for inference.
#[derive(Debug, Clone)]
pub struct Backbone {
    layers: Vec<LayerSpec>,
    convs: Vec<ConvParams>,
    mean: [f32; 3],
    std: [f32; 3],
    padding_mode: PaddingMode,
}

impl Backbone {
    /// Validate topology and weight shapes and assemble a backbone.
    pub fn new(
        layers: Vec<LayerSpec>,
        convs: Vec<ConvParams>,
        mean: [f32; 3],
        std: [f32; 3],
        padding_mode: PaddingMode,
    ) -> Result<Self> {
        let conv_specs: Vec<_> = layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .collect();
        if conv_specs.len() != convs.len() {
            return Err(Error::validation(format!(
                "{} conv layers but {} weight sets",
                conv_specs.len(),
                convs.len()
            )));
        }
        // Channel counts must chain, and every tapped conv must be followed
        // by a relu since taps export post-activation maps.
        let mut channels: Option<usize> = None;
        let mut conv_idx = 0usize;
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    tap,
                    ..
                } => {
                    if let Some(c) = channels {
                        if c != in_channels {
                            return Err(Error::validation(format!(
                                "conv layer {} expects {in_channels} input channels, got {c}",
                                conv_idx + 1
                            )));
                        }
                    }
                    let p = &convs[conv_idx];
                    if p.weight.len() != out_channels * in_channels * kernel * kernel {
                        return Err(Error::validation(format!(
                            "conv layer {} weight length {} does not match {}x{}x{}x{}",
                            conv_idx + 1,
                            p.weight.len(),
                            out_channels,
                            in_channels,
                            kernel,
                            kernel
                        )));
                    }
                    if p.bias.len() != out_channels {
                        return Err(Error::validation(format!(
                            "conv layer {} bias length {} does not match {out_channels}",
                            conv_idx + 1,
                            p.bias.len()
                        )));
                    }
                    if tap && !matches!(layers.get(i + 1), Some(LayerSpec::Relu)) {
                        return Err(Error::validation(format!(
                            "tapped conv layer {} is not followed by relu",
                            conv_idx + 1
                        )));
                    }
                    channels = Some(out_channels);
                    conv_idx += 1;
                }
                LayerSpec::Relu | LayerSpec::MaxPool { .. } => {
                    if channels.is_none() {
                        return Err(Error::validation(
                            "topology must start with a conv layer".to_string(),
                        ));
                    }
                }
            }
        }
        if conv_idx == 0 {
            return Err(Error::validation("topology has no conv layers".to_string()));
        }
        Ok(Backbone {
            layers,
            convs,
            mean,
            std,
            padding_mode,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn padding_mode(&self) -> PaddingMode {
        self.padding_mode
    }

    pub fn set_padding_mode(&mut self, mode: PaddingMode) {
        self.padding_mode = mode;
    }

    pub fn normalization(&self) -> ([f32; 3], [f32; 3]) {
        (self.mean, self.std)
    }

    /// Number of exported feature maps (L).
    pub fn tap_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { tap: true, .. }))
            .count()
    }

    /// Channel width of each tap, in export order.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::Conv {
                    out_channels,
                    tap: true,
                    ..
                } => Some(out_channels),
                _ => None,
            })
            .collect()
    }

    pub fn receptive_fields(&self) -> Vec<ReceptiveField> {
        compute_receptive_fields(&self.layers)
    }

    /// Run the image through the network and return the tapped feature maps,
    /// in tap order. Taps are post-ReLU, so every value is nonnegative.
    pub fn extract_features(&self, image: &Tensor3) -> Result<Vec<Tensor3>> {
        let first_in = self
            .layers
            .iter()
            .find_map(|l| match *l {
                LayerSpec::Conv { in_channels, .. } => Some(in_channels),
                _ => None,
            })
            .expect("validated topology has a conv");
        if image.channels() != first_in {
            return Err(Error::validation(format!(
                "image has {} channels but the backbone expects {first_in}",
                image.channels()
            )));
        }

        let mut current = self.normalize_input(image);
        let mut taps = Vec::with_capacity(self.tap_count());
        let mut conv_idx = 0usize;
        let mut pending_tap = false;
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv {
                    kernel,
                    stride,
                    pad,
                    tap,
                    ..
                } => {
                    current = conv_forward(
                        &current,
                        &self.convs[conv_idx],
                        kernel,
                        stride,
                        pad,
                        self.padding_mode,
                    )?;
                    conv_idx += 1;
                    pending_tap = tap;
                }
                LayerSpec::Relu => {
                    for v in current.as_mut_slice() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    if pending_tap {
                        taps.push(current.clone());
                        pending_tap = false;
                    }
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    current = maxpool_forward(&current, kernel, stride)?;
                }
            }
        }
        Ok(taps)
    }

    fn normalize_input(&self, image: &Tensor3) -> Tensor3 {
        let mut out = image.clone();
        let c = out.channels();
        for cell in out.as_mut_slice().chunks_exact_mut(c) {
            for (ch, v) in cell.iter_mut().enumerate() {
                *v = (*v - self.mean[ch % 3]) / self.std[ch % 3];
            }
        }
        out
    }

    /// Persist to a DFRC checkpoint. Weights are stored in
    /// `out x in x kernel x kernel` order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        c.insert("topology", Entry::text(&self.topology_text()));
        c.insert(
            "normalization.mean",
            Entry::F32 {
                dims: vec![3],
                data: self.mean.to_vec(),
            },
        );
        c.insert(
            "normalization.std",
            Entry::F32 {
                dims: vec![3],
                data: self.std.to_vec(),
            },
        );
        let mut conv_idx = 0usize;
        for layer in &self.layers {
            if let LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
                ..
            } = *layer
            {
                let p = &self.convs[conv_idx];
                conv_idx += 1;
                c.insert(
                    &format!("conv{conv_idx}.weight"),
                    Entry::F32 {
                        dims: vec![
                            out_channels as u32,
                            in_channels as u32,
                            kernel as u32,
                            kernel as u32,
                        ],
                        data: runtime_to_checkpoint(&p.weight, out_channels, in_channels, kernel),
                    },
                );
                c.insert(
                    &format!("conv{conv_idx}.bias"),
                    Entry::F32 {
                        dims: vec![out_channels as u32],
                        data: p.bias.clone(),
                    },
                );
            }
        }
        c.save(path)
    }

    fn topology_text(&self) -> String {
        let mut lines = vec![format!("padding {}", self.padding_mode)];
        for layer in &self.layers {
            lines.push(match *layer {
                LayerSpec::Conv {
                    kernel,
                    stride,
                    in_channels,
                    out_channels,
                    pad,
                    tap,
                } => format!(
                    "conv k={kernel} s={stride} p={pad} in={in_channels} out={out_channels} tap={}",
                    u8::from(tap)
                ),
                LayerSpec::Relu => "relu".to_string(),
                LayerSpec::MaxPool { kernel, stride } => {
                    format!("maxpool k={kernel} s={stride}")
                }
            });
        }
        lines.join("\n") + "\n"
    }

    /// Load a DFRC checkpoint, folding any stored batch-norm parameters into
    /// the conv weights and biases.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let topo = c.text_entry("topology", path)?;
        let mut padding_mode = PaddingMode::Zero;
        let mut layers = Vec::new();
        for (lineno, raw) in topo.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap();
            let fields: std::collections::HashMap<&str, &str> = parts
                .filter_map(|kv| kv.split_once('='))
                .collect();
            let get = |key: &str| -> Result<usize> {
                fields
                    .get(key)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| {
                        Error::format(
                            path,
                            format!("topology line {}: missing field '{key}'", lineno + 1),
                        )
                    })
            };
            match head {
                "padding" => {
                    let value = line.split_whitespace().nth(1).unwrap_or("");
                    padding_mode = value.parse()?;
                }
                "conv" => layers.push(LayerSpec::Conv {
                    kernel: get("k")?,
                    stride: get("s")?,
                    pad: get("p")?,
                    in_channels: get("in")?,
                    out_channels: get("out")?,
                    tap: get("tap")? != 0,
                }),
                "relu" => layers.push(LayerSpec::Relu),
                "maxpool" => layers.push(LayerSpec::MaxPool {
                    kernel: get("k")?,
                    stride: get("s")?,
                }),
                other => {
                    return Err(Error::format(
                        path,
                        format!("topology line {}: unknown layer '{other}'", lineno + 1),
                    ));
                }
            }
        }

        let mean = read_triple(&c, "normalization.mean", path)?;
        let std = read_triple(&c, "normalization.std", path)?;

        let mut convs = Vec::new();
        let mut conv_no = 0usize;
        for layer in &layers {
            if let LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
                ..
            } = *layer
            {
                conv_no += 1;
                let (dims, data) = c.f32_entry(&format!("conv{conv_no}.weight"), path)?;
                let expect = [
                    out_channels as u32,
                    in_channels as u32,
                    kernel as u32,
                    kernel as u32,
                ];
                if dims != expect {
                    return Err(Error::validation(format!(
                        "conv layer {conv_no}: weight dims {dims:?} do not match topology {expect:?}"
                    )));
                }
                let (bdims, bias) = c.f32_entry(&format!("conv{conv_no}.bias"), path)?;
                if bdims != [out_channels as u32] {
                    return Err(Error::validation(format!(
                        "conv layer {conv_no}: bias dims {bdims:?} do not match {out_channels}"
                    )));
                }
                let mut weight = data.to_vec();
                let mut bias = bias.to_vec();
                fold_batchnorm(&c, conv_no, out_channels, kernel, in_channels, &mut weight, &mut bias, path)?;
                convs.push(ConvParams {
                    weight: checkpoint_to_runtime(&weight, out_channels, in_channels, kernel),
                    bias,
                });
            }
        }
        Backbone::new(layers, convs, mean, std, padding_mode)
    }
}

fn read_triple(c: &Container, name: &str, path: &Path) -> Result<[f32; 3]> {
    let (dims, data) = c.f32_entry(name, path)?;
    if dims != [3] {
        return Err(Error::format(path, format!("entry '{name}' must have 3 values")));
    }
    Ok([data[0], data[1], data[2]])
}

const BN_EPS: f64 = 1e-5;

/// Fold `w' = w * g / sqrt(v + eps)` and `b' = (b - m) * g / sqrt(v + eps) + beta`
/// when the checkpoint stores batch-norm statistics for this conv.
#[allow(clippy::too_many_arguments)]
fn fold_batchnorm(
    c: &Container,
    conv_no: usize,
    out_channels: usize,
    kernel: usize,
    in_channels: usize,
    weight: &mut [f32],
    bias: &mut [f32],
    path: &Path,
) -> Result<()> {
    let gamma_name = format!("conv{conv_no}.bn.gamma");
    if c.get(&gamma_name).is_none() {
        return Ok(());
    }
    let fetch = |suffix: &str| -> Result<Vec<f32>> {
        let (dims, data) = c.f32_entry(&format!("conv{conv_no}.bn.{suffix}"), path)?;
        if dims != [out_channels as u32] {
            return Err(Error::validation(format!(
                "conv layer {conv_no}: bn.{suffix} dims {dims:?} do not match {out_channels}"
            )));
        }
        Ok(data.to_vec())
    };
    let gamma = fetch("gamma")?;
    let beta = fetch("beta")?;
    let mean = fetch("mean")?;
    let var = fetch("var")?;
    let per_out = in_channels * kernel * kernel;
    for o in 0..out_channels {
        let scale = gamma[o] as f64 / ((var[o] as f64 + BN_EPS).sqrt());
        for w in &mut weight[o * per_out..(o + 1) * per_out] {
            *w = (*w as f64 * scale) as f32;
        }
        bias[o] = ((bias[o] as f64 - mean[o] as f64) * scale + beta[o] as f64) as f32;
    }
    Ok(())
}

/// Checkpoint `[out][in][ky][kx]` -> runtime `[out][ky][kx][in]`.
fn checkpoint_to_runtime(w: &[f32], out_c: usize, in_c: usize, k: usize) -> Vec<f32> {
    let mut r = vec![0.0f32; w.len()];
    for o in 0..out_c {
        for i in 0..in_c {
            for ky in 0..k {
                for kx in 0..k {
                    r[((o * k + ky) * k + kx) * in_c + i] = w[((o * in_c + i) * k + ky) * k + kx];
                }
            }
        }
    }
    r
}

fn runtime_to_checkpoint(w: &[f32], out_c: usize, in_c: usize, k: usize) -> Vec<f32> {
    let mut r = vec![0.0f32; w.len()];
    for o in 0..out_c {
        for i in 0..in_c {
            for ky in 0..k {
                for kx in 0..k {
                    r[((o * in_c + i) * k + ky) * k + kx] = w[((o * k + ky) * k + kx) * in_c + i];
                }
            }
        }
    }
    r
}

/// Map a (possibly out-of-range) index into the valid range for the given
/// padding mode; `None` means the contribution is zero.
#[inline]
fn pad_index(i: isize, n: usize, mode: PaddingMode) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match mode {
        PaddingMode::Zero => None,
        PaddingMode::Reflect => {
            // Mirror about the edge without repeating the border sample.
            let idx = if i < 0 { -i } else { 2 * (n as isize - 1) - i };
            debug_assert!(idx >= 0 && (idx as usize) < n, "pad exceeds input size");
            Some(idx as usize)
        }
    }
}

/// Direct convolution. Weights use the runtime `[out][ky][kx][in]` layout.
pub fn conv_forward(
    input: &Tensor3,
    params: &ConvParams,
    kernel: usize,
    stride: usize,
    pad: usize,
    mode: PaddingMode,
) -> Result<Tensor3> {
    let (ih, iw, ic) = input.dims();
    if ih + 2 * pad < kernel || iw + 2 * pad < kernel {
        return Err(Error::shape(format!(
            "input {ih}x{iw} too small for kernel {kernel} with pad {pad}"
        )));
    }
    if mode == PaddingMode::Reflect && pad >= ih.min(iw) {
        return Err(Error::shape(format!(
            "reflect pad {pad} requires input larger than the pad on both axes"
        )));
    }
    let oc = params.bias.len();
    let oh = (ih + 2 * pad - kernel) / stride + 1;
    let ow = (iw + 2 * pad - kernel) / stride + 1;
    let mut out = Tensor3::zeros(oh, ow, oc);

    // Resolve padded indices once per axis.
    let map_axis = |out_n: usize, in_n: usize| -> Vec<Option<usize>> {
        let mut v = Vec::with_capacity(out_n * kernel);
        for o in 0..out_n {
            for kk in 0..kernel {
                v.push(pad_index(
                    (o * stride + kk) as isize - pad as isize,
                    in_n,
                    mode,
                ));
            }
        }
        v
    };
    let ymap = map_axis(oh, ih);
    let xmap = map_axis(ow, iw);

    let per_k = kernel * kernel * ic;
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = out.cell_mut(oy, ox);
            dst.copy_from_slice(&params.bias);
            for ky in 0..kernel {
                let Some(iy) = ymap[oy * kernel + ky] else {
                    continue;
                };
                for kx in 0..kernel {
                    let Some(ix) = xmap[ox * kernel + kx] else {
                        continue;
                    };
                    let cell = input.cell(iy, ix);
                    let wbase = (ky * kernel + kx) * ic;
                    for (o, d) in dst.iter_mut().enumerate() {
                        let wrow = &params.weight[o * per_k + wbase..o * per_k + wbase + ic];
                        let mut acc = 0.0f32;
                        for (&x, &w) in cell.iter().zip(wrow) {
                            acc += x * w;
                        }
                        *d += acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Max pooling over `kernel x kernel` windows with the given stride, floor
/// semantics on the output size.
pub fn maxpool_forward(input: &Tensor3, kernel: usize, stride: usize) -> Result<Tensor3> {
    let (ih, iw, c) = input.dims();
    if ih < kernel || iw < kernel {
        return Err(Error::shape(format!(
            "input {ih}x{iw} too small for {kernel}x{kernel} pooling"
        )));
    }
    let oh = (ih - kernel) / stride + 1;
    let ow = (iw - kernel) / stride + 1;
    let mut out = Tensor3::zeros(oh, ow, c);
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = out.cell_mut(oy, ox);
            dst.fill(f32::NEG_INFINITY);
            for wy in 0..kernel {
                for wx in 0..kernel {
                    let cell = input.cell(oy * stride + wy, ox * stride + wx);
                    for (d, &v) in dst.iter_mut().zip(cell) {
                        if v > *d {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Deterministic 4-conv fixture backbone: channels 8, 8, 16, 16 with one
/// 2x2 pool after the second conv; all convs 3x3 stride 1 pad 1 and tapped.
pub fn make_tiny_backbone(seed: u64) -> Backbone {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = |cin: usize, cout: usize| LayerSpec::Conv {
        kernel: 3,
        stride: 1,
        in_channels: cin,
        out_channels: cout,
        pad: 1,
        tap: true,
    };
    let layers = vec![
        conv(3, 8),
        LayerSpec::Relu,
        conv(8, 8),
        LayerSpec::Relu,
        LayerSpec::MaxPool {
            kernel: 2,
            stride: 2,
        },
        conv(8, 16),
        LayerSpec::Relu,
        conv(16, 16),
        LayerSpec::Relu,
    ];
    let mut convs = Vec::new();
    for layer in &layers {
        if let LayerSpec::Conv {
            kernel,
            in_channels,
            out_channels,
            ..
        } = *layer
        {
            let fan_in = in_channels * kernel * kernel;
            let fan_out = out_channels * kernel * kernel;
            let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
            let weight: Vec<f32> = (0..out_channels * kernel * kernel * in_channels)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            let bias: Vec<f32> = (0..out_channels)
                .map(|_| rng.random_range(-0.05f32..=0.05))
                .collect();
            convs.push(ConvParams { weight, bias });
        }
    }
    Backbone::new(layers, convs, [0.0; 3], [1.0; 3], PaddingMode::Zero)
        .expect("fixture topology is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Table-style reference: expected receptive-field sizes of the trimmed
    /// VGG19, one per conv tap.
    const VGG19_RF: [usize; 16] = [
        3, 5, 10, 14, 24, 32, 40, 48, 68, 84, 100, 116, 156, 188, 220, 252,
    ];

    /// Naive convolution oracle: quintuple loop over output position, output
    /// channel, kernel window and input channel, in checkpoint weight order.
    fn conv_oracle(
        input: &Tensor3,
        weight_oihw: &[f32],
        bias: &[f32],
        kernel: usize,
        stride: usize,
        pad: usize,
        mode: PaddingMode,
    ) -> Tensor3 {
        let (ih, iw, ic) = input.dims();
        let oc = bias.len();
        let oh = (ih + 2 * pad - kernel) / stride + 1;
        let ow = (iw + 2 * pad - kernel) / stride + 1;
        let fetch = |y: isize, x: isize, ch: usize| -> f32 {
            let reflect = |i: isize, n: usize| -> Option<usize> {
                if i >= 0 && (i as usize) < n {
                    Some(i as usize)
                } else {
                    match mode {
                        PaddingMode::Zero => None,
                        PaddingMode::Reflect => Some(if i < 0 {
                            (-i) as usize
                        } else {
                            2 * (n - 1) - i as usize
                        }),
                    }
                }
            };
            match (reflect(y, ih), reflect(x, iw)) {
                (Some(yy), Some(xx)) => input.get(yy, xx, ch),
                _ => 0.0,
            }
        };
        let mut out = Tensor3::zeros(oh, ow, oc);
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..oc {
                    let mut acc = bias[o] as f64;
                    for i in 0..ic {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let x = (ox * stride + kx) as isize - pad as isize;
                                let w = weight_oihw[((o * ic + i) * kernel + ky) * kernel + kx];
                                acc += (fetch(y, x, i) * w) as f64;
                            }
                        }
                    }
                    out.set(oy, ox, o, acc as f32);
                }
            }
        }
        out
    }

    #[test]
    fn vgg19_receptive_fields_match_reference() {
        let fields = compute_receptive_fields(&vgg19_layers());
        assert_eq!(fields.len(), 16);
        for (f, &expect) in fields.iter().zip(VGG19_RF.iter()) {
            assert_eq!(f.size, expect, "tap {}", f.layer_index);
        }
        // Size strictly increases with depth.
        for pair in fields.windows(2) {
            assert!(pair[1].size > pair[0].size);
        }
    }

    #[test]
    fn single_conv_receptive_field_base_case() {
        let layers = vec![LayerSpec::Conv {
            kernel: 3,
            stride: 1,
            in_channels: 1,
            out_channels: 1,
            pad: 1,
            tap: true,
        }];
        let fields = compute_receptive_fields(&layers);
        assert_eq!(fields, vec![ReceptiveField { layer_index: 1, size: 3, jump: 1 }]);
    }

    #[test]
    fn conv_pool_conv_receptive_fields() {
        // conv3 -> pool2(stride 2) -> conv3. Applying the recurrence by hand:
        // conv1: size 3, jump 1; pool: size 4, jump 2; conv2: size 4 + 2*2 = 8.
        let conv = |cin: usize| LayerSpec::Conv {
            kernel: 3,
            stride: 1,
            in_channels: cin,
            out_channels: 4,
            pad: 1,
            tap: true,
        };
        let layers = vec![
            conv(1),
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            conv(4),
            LayerSpec::Relu,
        ];
        let fields = compute_receptive_fields(&layers);
        assert_eq!(fields.len(), 2);
        assert_eq!(fields[0].size, 3);
        assert_eq!(fields[1].size, 8);
        assert_eq!(fields[1].jump, 2);
    }

    fn single_conv_backbone(
        weight_oihw: Vec<f32>,
        bias: Vec<f32>,
        cin: usize,
        cout: usize,
        kernel: usize,
        pad: usize,
        mode: PaddingMode,
    ) -> Backbone {
        let layers = vec![
            LayerSpec::Conv {
                kernel,
                stride: 1,
                in_channels: cin,
                out_channels: cout,
                pad,
                tap: true,
            },
            LayerSpec::Relu,
        ];
        let convs = vec![ConvParams {
            weight: checkpoint_to_runtime(&weight_oihw, cout, cin, kernel),
            bias,
        }];
        Backbone::new(layers, convs, [0.0; 3], [1.0; 3], mode).unwrap()
    }

    #[test]
    fn identity_kernel_extracts_relu_of_input() {
        // 1x1 conv with identity weights over 3 channels.
        let mut w = vec![0.0f32; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let bb = single_conv_backbone(w, vec![0.0; 3], 3, 3, 1, 0, PaddingMode::Zero);
        let data = vec![0.5, -0.25, 1.5, -1.0, 0.0, 2.0];
        let t = Tensor3::from_vec(1, 2, 3, data.clone()).unwrap();
        let taps = bb.extract_features(&t).unwrap();
        assert_eq!(taps.len(), 1);
        let expect: Vec<f32> = data.iter().map(|v| v.max(0.0)).collect();
        assert_eq!(taps[0].as_slice(), expect.as_slice());
    }

    #[test]
    fn ones_kernel_constant_input_border_behavior() {
        let v = 0.3f32;
        let input = Tensor3::from_vec(4, 4, 1, vec![v; 16]).unwrap();
        let w = vec![1.0f32; 9];

        let zero = single_conv_backbone(w.clone(), vec![0.0], 1, 1, 3, 1, PaddingMode::Zero);
        let out = &zero.extract_features(&input).unwrap()[0];
        assert!((out.get(1, 1, 0) - 9.0 * v).abs() < 1e-5);
        assert!((out.get(0, 0, 0) - 4.0 * v).abs() < 1e-5);
        assert!((out.get(0, 3, 0) - 4.0 * v).abs() < 1e-5);

        let refl = single_conv_backbone(w, vec![0.0], 1, 1, 3, 1, PaddingMode::Reflect);
        let out = &refl.extract_features(&input).unwrap()[0];
        for &cell in out.as_slice() {
            assert!((cell - 9.0 * v).abs() < 1e-5);
        }
    }

    #[test]
    fn tiny_backbone_is_deterministic() {
        let a = make_tiny_backbone(42);
        let b = make_tiny_backbone(42);
        for (pa, pb) in a.convs.iter().zip(b.convs.iter()) {
            assert_eq!(pa, pb);
        }
        let c = make_tiny_backbone(43);
        assert_ne!(a.convs[0].weight, c.convs[0].weight);
    }

    #[test]
    fn tiny_backbone_channel_sum_and_fields() {
        let bb = make_tiny_backbone(0);
        assert_eq!(bb.tap_channels(), vec![8, 8, 16, 16]);
        assert_eq!(bb.tap_channels().iter().sum::<usize>(), 48);
        let sizes: Vec<usize> = bb.receptive_fields().iter().map(|f| f.size).collect();
        assert_eq!(sizes, vec![3, 5, 10, 14]);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bb.dfrc");
        let bb = make_tiny_backbone(7);
        bb.save(&p).unwrap();
        let back = Backbone::load(&p).unwrap();
        assert_eq!(back.convs.len(), bb.convs.len());
        for (a, b) in bb.convs.iter().zip(back.convs.iter()) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
        }
        assert_eq!(back.layers, bb.layers);
        assert_eq!((back.mean, back.std), (bb.mean, bb.std));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bb.dfrc");
        let bb = make_tiny_backbone(7);
        bb.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Backbone::load(&p).is_err());
    }

    #[test]
    fn batchnorm_identity_fold_keeps_weights() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bb.dfrc");
        let bb = make_tiny_backbone(3);
        bb.save(&p).unwrap();

        // Inject identity BN stats (gamma 1, beta 0, mean 0, var 1 - eps)
        // for conv 1 and re-stamp the file.
        let mut c = Container::load(&p).unwrap();
        let out_c = 8u32;
        let ones = Entry::F32 { dims: vec![out_c], data: vec![1.0; 8] };
        let zeros = Entry::F32 { dims: vec![out_c], data: vec![0.0; 8] };
        let var = Entry::F32 {
            dims: vec![out_c],
            data: vec![(1.0 - BN_EPS) as f32; 8],
        };
        c.insert("conv1.bn.gamma", ones);
        c.insert("conv1.bn.beta", zeros.clone());
        c.insert("conv1.bn.mean", zeros);
        c.insert("conv1.bn.var", var);
        c.save(&p).unwrap();

        let folded = Backbone::load(&p).unwrap();
        assert_eq!(folded.convs[0].weight, bb.convs[0].weight);
        assert_eq!(folded.convs[0].bias, bb.convs[0].bias);
    }

    #[test]
    fn conv_forward_matches_quintuple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..40 {
            let kernel = [1, 3, 5][case % 3];
            let stride = 1 + case % 2;
            let pad = if kernel == 1 { 0 } else { kernel / 2 };
            let mode = if case % 4 < 2 {
                PaddingMode::Zero
            } else {
                PaddingMode::Reflect
            };
            let (ih, iw, ic, oc) = (8, 8, 3, 4);
            let input = Tensor3::from_vec(
                ih,
                iw,
                ic,
                (0..ih * iw * ic).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            )
            .unwrap();
            let weight: Vec<f32> = (0..oc * ic * kernel * kernel)
                .map(|_| rng.random_range(-0.5f32..0.5))
                .collect();
            let bias: Vec<f32> = (0..oc).map(|_| rng.random_range(-0.5f32..0.5)).collect();

            let params = ConvParams {
                weight: checkpoint_to_runtime(&weight, oc, ic, kernel),
                bias: bias.clone(),
            };
            let got = conv_forward(&input, &params, kernel, stride, pad, mode).unwrap();
            let expect = conv_oracle(&input, &weight, &bias, kernel, stride, pad, mode);
            assert_eq!(got.dims(), expect.dims());
            for (a, b) in got.as_slice().iter().zip(expect.as_slice()) {
                let denom = b.abs().max(1.0);
                assert!((a - b).abs() / denom < 1e-4, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn padding_modes_agree_on_interior_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor3::from_vec(
            10,
            10,
            3,
            (0..300).map(|_| rng.random_range(0.0f32..1.0)).collect(),
        )
        .unwrap();
        let weight: Vec<f32> = (0..4 * 3 * 9).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        let bias = vec![0.1f32; 4];
        let params = ConvParams {
            weight: checkpoint_to_runtime(&weight, 4, 3, 3),
            bias,
        };
        let zero = conv_forward(&input, &params, 3, 1, 1, PaddingMode::Zero).unwrap();
        let refl = conv_forward(&input, &params, 3, 1, 1, PaddingMode::Reflect).unwrap();
        // Cells whose 3x3 window stays inside the image are identical.
        for y in 1..9 {
            for x in 1..9 {
                for ch in 0..4 {
                    assert_eq!(zero.get(y, x, ch), refl.get(y, x, ch));
                }
            }
        }
    }

    #[test]
    fn tap_outputs_are_nonnegative() {
        let bb = make_tiny_backbone(11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor3::from_vec(
            16,
            16,
            3,
            (0..16 * 16 * 3).map(|_| rng.random_range(0.0f32..1.0)).collect(),
        )
        .unwrap();
        let taps = bb.extract_features(&img).unwrap();
        assert_eq!(taps.len(), 4);
        assert_eq!(taps[0].dims(), (16, 16, 8));
        assert_eq!(taps[2].dims(), (8, 8, 16));
        for tap in &taps {
            assert!(tap.as_slice().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn channel_mismatch_is_validation_error() {
        let bb = make_tiny_backbone(0);
        let img = Tensor3::zeros(8, 8, 1);
        assert!(bb.extract_features(&img).is_err());
    }

    #[test]
    fn maxpool_basics() {
        let t = Tensor3::from_vec(2, 2, 1, vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let out = maxpool_forward(&t, 2, 2).unwrap();
        assert_eq!(out.dims(), (1, 1, 1));
        assert_eq!(out.get(0, 0, 0), 5.0);
        // Odd input floors.
        let t = Tensor3::zeros(5, 7, 2);
        let out = maxpool_forward(&t, 2, 2).unwrap();
        assert_eq!(out.dims(), (2, 3, 2));
    }
}
