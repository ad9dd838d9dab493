//! The feature-reconstruction core: PCA-based latent sizing, the six-layer
//! pointwise (1x1 convolution) autoencoder, analytic backpropagation, and
//! the Adam training loop.
//!
//! A 1x1 convolution is exactly a per-cell affine map, so the autoencoder
//! treats a regional feature map as `n = h_o * w_o` independent vectors of
//! width `c_o` and never mixes cells.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::regional::RegionalFeatureMap;
use crate::tensor::Tensor3;

pub const LAYER_COUNT: usize = 6;

/// ReLU placement: after layers 1, 2, 4, 5; the latent layer (3) and the
/// output layer (6) are linear.
pub const RELU_AFTER: [bool; LAYER_COUNT] = [true, true, false, true, true, false];

/// The pointwise autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CaeModel {
    /// Output width of each layer:
    /// `(c_o+c_d)/2, 2*c_d, c_d, 2*c_d, (c_o+c_d)/2, c_o`.
    pub widths: [usize; LAYER_COUNT],
    pub relu_after: [bool; LAYER_COUNT],
    /// Per-layer `out x in` matrices, row-major.
    pub weights: Vec<Vec<f32>>,
    pub biases: Vec<Vec<f32>>,
    pub c_o: usize,
    pub c_d: usize,
}

impl CaeModel {
    /// Input width of each layer.
    pub fn in_widths(&self) -> [usize; LAYER_COUNT] {
        [
            self.c_o,
            self.widths[0],
            self.widths[1],
            self.widths[2],
            self.widths[3],
            self.widths[4],
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 700,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::validation(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// First/second moment estimates for every parameter, in 64-bit.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: usize,
    pub weight_m: Vec<Vec<f64>>,
    pub weight_v: Vec<Vec<f64>>,
    pub bias_m: Vec<Vec<f64>>,
    pub bias_v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_model(model: &CaeModel) -> Self {
        AdamState {
            step: 0,
            weight_m: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            weight_v: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            bias_m: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            bias_v: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// One bias-corrected Adam step over the whole model.
    pub fn apply(&mut self, model: &mut CaeModel, grads: &Gradients, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let corr1 = 1.0 - cfg.adam_beta1.powi(t);
        let corr2 = 1.0 - cfg.adam_beta2.powi(t);
        for l in 0..LAYER_COUNT {
            adam_update(
                &mut model.weights[l],
                &grads.weights[l],
                &mut self.weight_m[l],
                &mut self.weight_v[l],
                cfg,
                corr1,
                corr2,
            );
            adam_update(
                &mut model.biases[l],
                &grads.biases[l],
                &mut self.bias_m[l],
                &mut self.bias_v[l],
                cfg,
                corr1,
                corr2,
            );
        }
    }
}

fn adam_update(
    params: &mut [f32],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &TrainConfig,
    corr1: f64,
    corr2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g;
        v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g * g;
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        let update = cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        params[i] = (params[i] as f64 - update) as f32;
    }
}

/// Analytic parameter gradients, accumulated in 64-bit.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &CaeModel) -> Self {
        Gradients {
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn reset(&mut self) {
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// A dense `rows x cols` sample matrix of regional features.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl SampleMatrix {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Uniformly sample `per_image` cells (without replacement, clamped to the
/// cell count) from every regional map; fully determined by `seed`.
pub fn sample_features(
    maps: &[RegionalFeatureMap],
    per_image: usize,
    seed: u64,
) -> Result<SampleMatrix> {
    if maps.is_empty() {
        return Err(Error::validation("no regional maps to sample from"));
    }
    let cols = maps[0].feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut rows = 0usize;
    for map in maps {
        if map.feature_dim() != cols {
            return Err(Error::validation(format!(
                "regional maps disagree on feature width: {} vs {cols}",
                map.feature_dim()
            )));
        }
        let (h, w) = map.cells();
        let n_cells = h * w;
        let amount = per_image.min(n_cells);
        let mut picked = rand::seq::index::sample(&mut rng, n_cells, amount).into_vec();
        picked.sort_unstable();
        for idx in picked {
            data.extend_from_slice(map.feature_at(idx / w, idx % w)?);
            rows += 1;
        }
    }
    Ok(SampleMatrix { rows, cols, data })
}

/// Result of the PCA latent sizing step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentEstimate {
    pub dim: usize,
    /// Set when the samples carry no variance at all; `dim` is then 1.
    pub degenerate: bool,
    /// Fraction of variance the returned dimension explains.
    pub explained: f64,
}

/// Smallest latent width whose leading principal components explain at least
/// `target_variance` of the sample variance.
///
/// Eigenvalues come from the mean-centered sample covariance; covariance
/// accumulation runs in 64-bit.
pub fn estimate_latent_dim(samples: &SampleMatrix, target_variance: f64) -> Result<LatentEstimate> {
    if samples.rows < 2 {
        return Err(Error::validation(format!(
            "need at least 2 samples for PCA, got {}",
            samples.rows
        )));
    }
    if !(target_variance > 0.0 && target_variance <= 1.0) {
        return Err(Error::validation(format!(
            "target variance must be in (0, 1], got {target_variance}"
        )));
    }
    let (n, c) = (samples.rows, samples.cols);
    let mut mean = vec![0.0f64; c];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(samples.row(r)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(c, c);
    let mut centered = vec![0.0f64; c];
    for r in 0..n {
        for (d, (&v, &m)) in centered.iter_mut().zip(samples.row(r).iter().zip(mean.iter())) {
            *d = v as f64 - m;
        }
        for i in 0..c {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..c {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..c {
        for j in i..c {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let total: f64 = (0..c).map(|i| cov[(i, i)]).sum();
    if total <= 0.0 || !total.is_finite() {
        return Ok(LatentEstimate {
            dim: 1,
            degenerate: true,
            explained: 0.0,
        });
    }

    let mut eigen: Vec<f64> = nalgebra::SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0))
        .collect();
    eigen.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let sum: f64 = eigen.iter().sum();

    let mut cum = 0.0f64;
    for (k, &lambda) in eigen.iter().enumerate() {
        cum += lambda;
        if cum / sum >= target_variance {
            return Ok(LatentEstimate {
                dim: (k + 1).min(c),
                degenerate: false,
                explained: cum / sum,
            });
        }
    }
    Ok(LatentEstimate {
        dim: c,
        degenerate: false,
        explained: 1.0,
    })
}

/// Build the six-layer autoencoder with seeded uniform
/// `+-sqrt(6 / (fan_in + fan_out))` weights and zero biases.
pub fn build_cae(c_o: usize, c_d: usize, seed: u64) -> Result<CaeModel> {
    if c_d == 0 || c_d >= c_o {
        return Err(Error::validation(format!(
            "latent width must satisfy 1 <= c_d < c_o, got c_d={c_d}, c_o={c_o}"
        )));
    }
    let widths = [
        (c_o + c_d) / 2,
        2 * c_d,
        c_d,
        2 * c_d,
        (c_o + c_d) / 2,
        c_o,
    ];
    let in_widths = [c_o, widths[0], widths[1], widths[2], widths[3], widths[4]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(LAYER_COUNT);
    let mut biases = Vec::with_capacity(LAYER_COUNT);
    for l in 0..LAYER_COUNT {
        let (fan_in, fan_out) = (in_widths[l], widths[l]);
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        weights.push(
            (0..fan_out * fan_in)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
        );
        biases.push(vec![0.0f32; fan_out]);
    }
    Ok(CaeModel {
        widths,
        relu_after: RELU_AFTER,
        weights,
        biases,
        c_o,
        c_d,
    })
}

/// `y = W x + b` for `n` independent cells.
fn affine_forward(x: &[f32], n: usize, w: &[f32], b: &[f32], y: &mut [f32]) {
    let cin = x.len() / n;
    let cout = b.len();
    for cell in 0..n {
        let xr = &x[cell * cin..(cell + 1) * cin];
        let yr = &mut y[cell * cout..(cell + 1) * cout];
        for (o, out) in yr.iter_mut().enumerate() {
            let wr = &w[o * cin..(o + 1) * cin];
            let mut acc = 0.0f32;
            for (&xv, &wv) in xr.iter().zip(wr) {
                acc += xv * wv;
            }
            *out = acc + b[o];
        }
    }
}

fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Run every cell of the regional map through the autoencoder.
pub fn cae_forward(model: &CaeModel, map: &Tensor3) -> Result<Tensor3> {
    if map.channels() != model.c_o {
        return Err(Error::validation(format!(
            "map has {} channels but the model expects {}",
            map.channels(),
            model.c_o
        )));
    }
    let (h, w, _) = map.dims();
    let n = h * w;
    let mut cur = map.as_slice().to_vec();
    for l in 0..LAYER_COUNT {
        let mut next = vec![0.0f32; n * model.widths[l]];
        affine_forward(&cur, n, &model.weights[l], &model.biases[l], &mut next);
        if model.relu_after[l] {
            relu_inplace(&mut next);
        }
        cur = next;
    }
    Tensor3::from_vec(h, w, model.c_o, cur)
}

/// Mean per-cell Euclidean distance between a regional map and its
/// reconstruction: `sum_cells ||f - f_hat||_2 / (h_o * w_o)`.
pub fn reconstruction_loss(truth: &Tensor3, recon: &Tensor3) -> Result<f64> {
    if truth.dims() != recon.dims() {
        return Err(Error::validation(format!(
            "shape mismatch: {:?} vs {:?}",
            truth.dims(),
            recon.dims()
        )));
    }
    let (h, w, c) = truth.dims();
    let mut sum = 0.0f64;
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
        sum += sq.sqrt();
    }
    Ok(sum / (h * w) as f64)
}

/// Forward pass keeping every layer's post-activation output; index 0 is the
/// input itself.
fn forward_with_caches(model: &CaeModel, input: &[f32], n: usize) -> Vec<Vec<f32>> {
    let mut acts = Vec::with_capacity(LAYER_COUNT + 1);
    acts.push(input.to_vec());
    for l in 0..LAYER_COUNT {
        let mut next = vec![0.0f32; n * model.widths[l]];
        affine_forward(acts.last().unwrap(), n, &model.weights[l], &model.biases[l], &mut next);
        if model.relu_after[l] {
            relu_inplace(&mut next);
        }
        acts.push(next);
    }
    acts
}

/// Loss and analytic gradients for one regional map, scaled by `scale`
/// (1 / batch size during training). Returns the unscaled per-image loss.
fn accumulate_gradients(
    model: &CaeModel,
    map: &Tensor3,
    scale: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    if map.channels() != model.c_o {
        return Err(Error::validation(format!(
            "map has {} channels but the model expects {}",
            map.channels(),
            model.c_o
        )));
    }
    let (h, w, c) = map.dims();
    let n = h * w;
    let acts = forward_with_caches(model, map.as_slice(), n);
    let output = acts.last().unwrap();

    // Per-cell residual: d||r||/dy = r / ||r||, and the loss divides by n.
    let mut loss = 0.0f64;
    let mut delta = vec![0.0f32; n * c];
    for cell in 0..n {
        let x = &map.as_slice()[cell * c..(cell + 1) * c];
        let y = &output[cell * c..(cell + 1) * c];
        let mut sq = 0.0f64;
        for (&xv, &yv) in x.iter().zip(y) {
            let d = (yv - xv) as f64;
            sq += d * d;
        }
        let norm = sq.sqrt();
        loss += norm;
        if norm > 1e-12 {
            let coef = (scale / (n as f64 * norm)) as f32;
            let dr = &mut delta[cell * c..(cell + 1) * c];
            for (d, (&yv, &xv)) in dr.iter_mut().zip(y.iter().zip(x)) {
                *d = (yv - xv) * coef;
            }
        }
    }

    // Backward through the affine/ReLU chain.
    for l in (0..LAYER_COUNT).rev() {
        let cout = model.widths[l];
        let cin = model.weights[l].len() / cout;
        let prev = &acts[l];
        let gw = &mut grads.weights[l];
        let gb = &mut grads.biases[l];
        for cell in 0..n {
            let d = &delta[cell * cout..(cell + 1) * cout];
            let a = &prev[cell * cin..(cell + 1) * cin];
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                gb[o] += dv as f64;
                let dvf = dv as f64;
                let gwr = &mut gw[o * cin..(o + 1) * cin];
                for (g, &av) in gwr.iter_mut().zip(a) {
                    *g += dvf * av as f64;
                }
            }
        }
        if l == 0 {
            break;
        }
        // delta_prev = W^T delta, masked by the previous layer's ReLU.
        let mut prev_delta = vec![0.0f32; n * cin];
        let wl = &model.weights[l];
        for cell in 0..n {
            let d = &delta[cell * cout..(cell + 1) * cout];
            let pd = &mut prev_delta[cell * cin..(cell + 1) * cin];
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                let wr = &wl[o * cin..(o + 1) * cin];
                for (p, &wv) in pd.iter_mut().zip(wr) {
                    *p += dv * wv;
                }
            }
            if model.relu_after[l - 1] {
                let a = &prev[cell * cin..(cell + 1) * cin];
                for (p, &av) in pd.iter_mut().zip(a) {
                    if av <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
        }
        delta = prev_delta;
    }

    Ok(loss / n as f64)
}

/// Loss and gradients for a single map (no batch scaling); exposed for
/// finite-difference verification.
pub fn loss_and_gradients(model: &CaeModel, map: &Tensor3) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(model);
    let loss = accumulate_gradients(model, map, 1.0, &mut grads)?;
    Ok((loss, grads))
}

/// Train the autoencoder in place on precomputed regional maps.
///
/// Per batch: forward, reconstruction loss, analytic gradients averaged over
/// the batch's images, one Adam step. Epoch ordering is a seeded permutation.
/// Returns one mean batch loss per epoch.
pub fn train(
    model: &mut CaeModel,
    maps: &[RegionalFeatureMap],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if maps.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    for map in maps {
        if map.feature_dim() != model.c_o {
            return Err(Error::validation(format!(
                "regional map width {} does not match model c_o {}",
                map.feature_dim(),
                model.c_o
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..maps.len()).collect();
    let mut state = AdamState::for_model(model);
    let mut grads = Gradients::zeros_like(model);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.reset();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0f64;
            for &i in batch {
                batch_loss += scale * accumulate_gradients(model, &maps[i].map, scale, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss,
                });
            }
            state.apply(model, &grads, cfg);
            epoch_loss += batch_loss;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok(history)
}
