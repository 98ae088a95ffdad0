//! VAE that predicts a two-channel VMS map from an image.
//!
//! The encoder folds the image through stride-2 convolutions into a diagonal
//! Gaussian over the latent code; the decoder mirrors it back up to the VMS
//! resolution with a sigmoid output so every cell lands in [0, 1]. The map
//! reduces to a scalar memorability score (mean of the true-schema channel)
//! or to a small spatial target via exact area averaging. Inference always
//! decodes the posterior mean, so scores are deterministic.

use std::path::Path;

use ndarray::{Array2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageArray, ImageRecord, VmsMap};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::nn::{randn, Adam, Conv, Dense, ParamRecord, Params};

/// Scalar memorability in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct MemorabilityScore(f64);

impl MemorabilityScore {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Numeric(format!("memorability {value} outside [0, 1]")));
        }
        Ok(MemorabilityScore(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Posterior parameters produced by the encoder.
#[derive(Clone, Debug)]
pub struct LatentVars {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentVars {
    /// Reparameterized sample for a recorded standard-normal draw.
    pub fn sample(&self, noise: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.logvar)
            .zip(noise)
            .map(|((m, lv), n)| m + (lv / 2.0).exp() * n)
            .collect()
    }
}

/// Closed-form KL divergence of a diagonal Gaussian from the standard prior:
/// `0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::Shape(format!(
            "kl_divergence lengths differ: {} vs {}",
            mu.len(),
            logvar.len()
        )));
    }
    if mu.iter().chain(logvar.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("kl_divergence on non-finite input".into()));
    }
    Ok(mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub image_resolution: usize,
    pub vms_resolution: usize,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub leaky_slope: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            image_resolution: 64,
            vms_resolution: 64,
            latent_dim: 64,
            base_channels: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 64,
            epochs: 50,
            leaky_slope: 0.2,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, res) in [
            ("image_resolution", self.image_resolution),
            ("vms_resolution", self.vms_resolution),
        ] {
            if res < 4 || !res.is_power_of_two() {
                return Err(Error::Config(format!(
                    "{name} must be a power of two >= 4, got {res}"
                )));
            }
        }
        if self.latent_dim == 0 || self.base_channels == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "latent_dim/base_channels/batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    fn encoder_blocks(&self) -> usize {
        (self.image_resolution / 4).trailing_zeros() as usize
    }

    fn decoder_blocks(&self) -> usize {
        (self.vms_resolution / 4).trailing_zeros() as usize
    }

    fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(128)
    }
}

/// Image -> VMS predictor with a diagonal-Gaussian latent.
#[derive(Clone, Debug)]
pub struct VaePredictor {
    config: PredictorConfig,
    params: Params,
    enc_convs: Vec<Conv>,
    enc_mu: Dense,
    enc_logvar: Dense,
    dec_fc: Dense,
    dec_convs: Vec<Conv>,
    dec_out: Conv,
}

/// Per-epoch training statistics.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Loss terms for one batch; `total = reconstruction + kl` exactly.
#[derive(Clone, Copy, Debug)]
pub struct VaeLossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

impl VaePredictor {
    pub fn new(config: PredictorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let mut enc_convs = Vec::new();
        let mut in_c = 3;
        for i in 0..config.encoder_blocks() {
            let out_c = config.channels(i);
            enc_convs.push(Conv::new(&mut params, rng, &format!("enc{i}"), in_c, out_c, 3, 2, 1));
            in_c = out_c;
        }
        let enc_top = 4 * 4 * in_c;
        let enc_mu = Dense::new(&mut params, rng, "enc_mu", enc_top, config.latent_dim);
        let enc_logvar = Dense::new(&mut params, rng, "enc_logvar", enc_top, config.latent_dim);

        let dec_blocks = config.decoder_blocks();
        // Channel widths mirror the encoder: widest at the 4x4 bottleneck.
        let width = |i: usize| config.channels(dec_blocks - i - 1).max(config.base_channels);
        let dec_c0 = if dec_blocks == 0 { config.base_channels } else { width(0) };
        let dec_fc = Dense::new(&mut params, rng, "dec_fc", config.latent_dim, 4 * 4 * dec_c0);
        let mut dec_convs = Vec::new();
        let mut c = dec_c0;
        for i in 0..dec_blocks {
            let out_c = if i + 1 == dec_blocks { config.base_channels } else { width(i + 1) };
            dec_convs.push(Conv::new(&mut params, rng, &format!("dec{i}"), c, out_c, 3, 1, 1));
            c = out_c;
        }
        let dec_out = Conv::new(&mut params, rng, "dec_out", c, 2, 3, 1, 1);
        Ok(VaePredictor {
            config,
            params,
            enc_convs,
            enc_mu,
            enc_logvar,
            dec_fc,
            dec_convs,
            dec_out,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    // ---- graph-side forward passes ----

    /// Encoder: images [N, R, R, 3] -> (mu, logvar) both [N, d_z].
    fn encode_nodes(&self, g: &mut Graph, vars: &[Var], images: Var) -> (Var, Var) {
        let n = g.value(images).shape()[0];
        let mut h = images;
        for conv in &self.enc_convs {
            h = conv.apply(g, vars, h);
            h = g.leaky_relu(h, self.config.leaky_slope);
        }
        let flat_len = g.value(h).len() / n;
        let flat = g.reshape(h, &[n, flat_len]);
        let mu = self.enc_mu.apply(g, vars, flat);
        let logvar = self.enc_logvar.apply(g, vars, flat);
        (mu, logvar)
    }

    /// Decoder logits: latent [N, d_z] -> [N, V, V, 2].
    fn decode_logit_nodes(&self, g: &mut Graph, vars: &[Var], z: Var) -> Var {
        let n = g.value(z).shape()[0];
        let dec_c0 = g.value(vars[self.dec_fc.w]).shape()[1] / 16;
        let mut h = self.dec_fc.apply(g, vars, z);
        h = g.leaky_relu(h, self.config.leaky_slope);
        h = g.reshape(h, &[n, 4, 4, dec_c0]);
        for conv in &self.dec_convs {
            h = g.upsample2x(h);
            h = conv.apply(g, vars, h);
            h = g.leaky_relu(h, self.config.leaky_slope);
        }
        self.dec_out.apply(g, vars, h)
    }

    /// Deterministic per-image score nodes for generated batches:
    /// images [N, R, R, 3] -> [N, 1] with values in (0, 1).
    ///
    /// Parameters enter as constants, so gradients flow through the
    /// predictor into the images but never into the predictor itself.
    pub fn score_nodes(&self, g: &mut Graph, images: Var) -> Var {
        let vars = self.params.bind(g);
        let (mu, _) = self.encode_nodes(g, &vars, images);
        let logits = self.decode_logit_nodes(g, &vars, mu);
        let map = g.sigmoid(logits);
        let true_ch = g.slice_axis(map, 3, 0, 1);
        let n = g.value(true_ch).shape()[0];
        let cells = self.config.vms_resolution * self.config.vms_resolution;
        let flat = g.reshape(true_ch, &[n, cells]);
        let ones = g.leaf(Tensor::from_elem(IxDyn(&[cells, 1]), 1.0 / cells as f64));
        g.matmul(flat, ones)
    }

    /// Spatial targets for generated batches: [N, R, R, 3] -> [N, T*T].
    pub fn spatial_nodes(&self, g: &mut Graph, images: Var, target: usize) -> Var {
        let vars = self.params.bind(g);
        let (mu, _) = self.encode_nodes(g, &vars, images);
        let logits = self.decode_logit_nodes(g, &vars, mu);
        let map = g.sigmoid(logits);
        let true_ch = g.slice_axis(map, 3, 0, 1);
        let n = g.value(true_ch).shape()[0];
        let v = self.config.vms_resolution;
        let flat = g.reshape(true_ch, &[n, v * v]);
        let resize = g.leaf(area_resize_matrix(v, v, target).into_dyn());
        g.matmul(flat, resize)
    }

    /// Full loss graph for a batch with an explicit reparameterization draw.
    fn loss_nodes(
        &self,
        g: &mut Graph,
        vars: &[Var],
        images: Var,
        targets: Var,
        noise: &Tensor,
    ) -> (Var, Var, Var) {
        let n = g.value(images).shape()[0];
        let (mu, logvar) = self.encode_nodes(g, vars, images);
        let half_lv = g.mul_scalar(logvar, 0.5);
        let std = g.exp(half_lv);
        let eps = g.leaf(noise.clone());
        let scaled = g.mul(std, eps);
        let z = g.add(mu, scaled);
        let logits = self.decode_logit_nodes(g, vars, z);

        // Reconstruction: Bernoulli NLL summed over cells and channels,
        // averaged over the batch.
        let bce = g.bce_with_logits(logits, targets);
        let recon_sum = g.sum_all(bce);
        let recon = g.mul_scalar(recon_sum, 1.0 / n as f64);

        // KL: 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar), batch mean.
        let mu_sq = g.square(mu);
        let var = g.exp(logvar);
        let sum_terms = g.add(mu_sq, var);
        let minus_lv = g.affine(logvar, -1.0, -1.0);
        let all = g.add(sum_terms, minus_lv);
        let kl_sum = g.sum_all(all);
        let kl = g.mul_scalar(kl_sum, 0.5 / n as f64);

        let total = g.add(recon, kl);
        (total, recon, kl)
    }

    // ---- public inference ----

    fn check_image(&self, image: &ImageArray) -> Result<()> {
        let r = self.config.image_resolution;
        if image.dim() != (r, r, 3) {
            return Err(Error::Shape(format!(
                "image is {:?}, predictor expects ({r}, {r}, 3)",
                image.dim()
            )));
        }
        Ok(())
    }

    /// Deterministic encoder pass for one image.
    pub fn encode(&self, image: &ImageArray) -> Result<LatentVars> {
        self.check_image(image)?;
        let batch = image.view().insert_axis(Axis(0)).to_owned().into_dyn();
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let images = g.leaf(batch);
        let (mu, logvar) = self.encode_nodes(&mut g, &vars, images);
        Ok(LatentVars {
            mu: g.value(mu).iter().copied().collect(),
            logvar: g.value(logvar).iter().copied().collect(),
        })
    }

    /// Decode a latent code into a VMS map (cells in [0, 1]).
    pub fn decode(&self, z: &[f64]) -> Result<VmsMap> {
        if z.len() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent has length {}, expected {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let zt = Tensor::from_shape_vec(IxDyn(&[1, z.len()]), z.to_vec()).unwrap();
        let zv = g.leaf(zt);
        let logits = self.decode_logit_nodes(&mut g, &vars, zv);
        let map = g.sigmoid(logits);
        let v = self.config.vms_resolution;
        let out = g.value(map);
        let mut true_schema = Array2::zeros((v, v));
        let mut false_schema = Array2::zeros((v, v));
        for y in 0..v {
            for x in 0..v {
                true_schema[[y, x]] = out[[0, y, x, 0]];
                false_schema[[y, x]] = out[[0, y, x, 1]];
            }
        }
        VmsMap::new(true_schema, false_schema)
    }

    /// Mean of a predicted map's true-schema channel.
    pub fn score_of_map(map: &VmsMap) -> f64 {
        let ch = map.true_schema();
        ch.sum() / ch.len() as f64
    }

    /// Predict the scalar memorability of one image (posterior mean path).
    pub fn predict_score(&self, image: &ImageArray) -> Result<MemorabilityScore> {
        let latent = self.encode(image)?;
        let map = self.decode(&latent.mu)?;
        MemorabilityScore::new(Self::score_of_map(&map))
    }

    /// Predict a `target x target` spatial memorability map by area-mean
    /// downsampling of the predicted true-schema channel.
    pub fn predict_spatial(&self, image: &ImageArray, target: usize) -> Result<Array2<f64>> {
        if target == 0 {
            return Err(Error::Config("spatial target resolution must be positive".into()));
        }
        let latent = self.encode(image)?;
        let map = self.decode(&latent.mu)?;
        Ok(area_resize(map.true_schema(), target))
    }

    /// Loss terms for an image/target batch with a recorded noise draw.
    pub fn vae_loss_batch(
        &self,
        images: &Tensor,
        targets: &Tensor,
        noise: &Tensor,
    ) -> Result<VaeLossBreakdown> {
        let n = images.shape()[0];
        let v = self.config.vms_resolution;
        if targets.shape() != [n, v, v, 2] {
            return Err(Error::Shape(format!(
                "targets are {:?}, expected [{n}, {v}, {v}, 2]",
                targets.shape()
            )));
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let iv = g.leaf(images.clone());
        let tv = g.leaf(targets.clone());
        let (total, recon, kl) = self.loss_nodes(&mut g, &vars, iv, tv, noise);
        Ok(VaeLossBreakdown {
            total: g.scalar_value(total),
            reconstruction: g.scalar_value(recon),
            kl: g.scalar_value(kl),
        })
    }

    /// Convenience wrapper for a single image/VMS pair.
    pub fn vae_loss(
        &self,
        image: &ImageArray,
        target: &VmsMap,
        noise: &[f64],
    ) -> Result<VaeLossBreakdown> {
        self.check_image(image)?;
        let images = image.view().insert_axis(Axis(0)).to_owned().into_dyn();
        let rec = ImageRecord {
            image: image.clone(),
            vms: Some(target.clone()),
            category: crate::dataset::Category::Isolated,
            responses: None,
        };
        let targets = crate::dataset::vms_batch(&[&rec])?;
        let noise_t = Tensor::from_shape_vec(IxDyn(&[1, noise.len()]), noise.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        self.vae_loss_batch(&images, &targets, &noise_t)
    }

    /// Gradient of the batch loss with respect to all parameters, plus the
    /// loss terms. Used by training and by the finite-difference checks.
    pub fn loss_and_grads(
        &self,
        images: &Tensor,
        targets: &Tensor,
        noise: &Tensor,
    ) -> (VaeLossBreakdown, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let iv = g.leaf(images.clone());
        let tv = g.leaf(targets.clone());
        let (total, recon, kl) = self.loss_nodes(&mut g, &vars, iv, tv, noise);
        let breakdown = VaeLossBreakdown {
            total: g.scalar_value(total),
            reconstruction: g.scalar_value(recon),
            kl: g.scalar_value(kl),
        };
        let grads = g.backward(total, &vars);
        let grads = grads.into_iter().map(|v| g.value(v).clone()).collect();
        (breakdown, grads)
    }

    // ---- checkpointing ----

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ckpt = PredictorCheckpoint {
            format: CHECKPOINT_FORMAT,
            config: self.config.clone(),
            params: self.params.to_records(),
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: PredictorCheckpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported predictor checkpoint format {}",
                ckpt.format
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut predictor = VaePredictor::new(ckpt.config, &mut rng)?;
        let params = Params::from_records(ckpt.params)?;
        if params.len() != predictor.params.len() {
            return Err(Error::Checkpoint("parameter layout mismatch".into()));
        }
        for i in 0..params.len() {
            if params.name(i) != predictor.params.name(i)
                || params.value(i).shape() != predictor.params.value(i).shape()
            {
                return Err(Error::Checkpoint(format!(
                    "parameter {} does not match the architecture",
                    params.name(i)
                )));
            }
        }
        predictor.params = params;
        Ok(predictor)
    }
}

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PredictorCheckpoint {
    format: u32,
    config: PredictorConfig,
    params: Vec<ParamRecord>,
}

/// Train a predictor on records that all carry VMS maps.
pub fn train_predictor(
    records: &[ImageRecord],
    config: PredictorConfig,
    seed: u64,
) -> Result<(VaePredictor, Vec<EpochStats>)> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(i) = records.iter().position(|r| r.vms.is_none()) {
        return Err(Error::Record { index: i, message: "record lacks a VMS map".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut predictor = VaePredictor::new(config.clone(), &mut rng)?;
    let mut adam = Adam::new(
        &predictor.params,
        config.lr,
        config.beta1,
        config.beta2,
        config.adam_epsilon,
    );
    let mut stats = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..records.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&ImageRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let images = crate::dataset::image_batch(&refs);
            let targets = crate::dataset::vms_batch(&refs)?;
            let noise = randn(&mut rng, &[refs.len(), config.latent_dim], 1.0);
            let (breakdown, grads) = predictor.loss_and_grads(&images, &targets, &noise);
            if !breakdown.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite VAE loss at epoch {epoch}")));
            }
            adam.update(&mut predictor.params, &grads);
            sums.0 += breakdown.total;
            sums.1 += breakdown.reconstruction;
            sums.2 += breakdown.kl;
            batches += 1;
        }
        stats.push(EpochStats {
            epoch,
            total: sums.0 / batches as f64,
            reconstruction: sums.1 / batches as f64,
            kl: sums.2 / batches as f64,
        });
    }
    Ok((predictor, stats))
}

/// Exact box-filter weights mapping a `src_h x src_w` grid onto a square
/// `dst x dst` grid. Every source cell distributes its full area, so the
/// global mean is preserved for any size combination.
pub fn area_resize_matrix(src_h: usize, src_w: usize, dst: usize) -> Array2<f64> {
    assert!(dst > 0 && src_h > 0 && src_w > 0);
    let mut m = Array2::<f64>::zeros((src_h * src_w, dst * dst));
    let cell_h = src_h as f64 / dst as f64;
    let cell_w = src_w as f64 / dst as f64;
    let overlap = |s: usize, a: f64, b: f64| -> f64 {
        let lo = (s as f64).max(a);
        let hi = ((s + 1) as f64).min(b);
        (hi - lo).max(0.0)
    };
    for dy in 0..dst {
        let y0 = dy as f64 * cell_h;
        let y1 = y0 + cell_h;
        for dx in 0..dst {
            let x0 = dx as f64 * cell_w;
            let x1 = x0 + cell_w;
            for sy in y0.floor() as usize..(y1.ceil() as usize).min(src_h) {
                let oy = overlap(sy, y0, y1);
                if oy == 0.0 {
                    continue;
                }
                for sx in x0.floor() as usize..(x1.ceil() as usize).min(src_w) {
                    let ox = overlap(sx, x0, x1);
                    if ox == 0.0 {
                        continue;
                    }
                    m[[sy * src_w + sx, dy * dst + dx]] = oy * ox / (cell_h * cell_w);
                }
            }
        }
    }
    m
}

/// Area-mean downsampling of one channel.
pub fn area_resize(src: &Array2<f64>, dst: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let m = area_resize_matrix(h, w, dst);
    let flat = src.view().into_shape_with_order(h * w).unwrap();
    let out = flat.dot(&m);
    out.into_shape_with_order((dst, dst)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_synthetic_dataset;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_config(res: usize) -> PredictorConfig {
        PredictorConfig {
            image_resolution: res,
            vms_resolution: res,
            latent_dim: 4,
            base_channels: 4,
            epochs: 1,
            batch_size: 4,
            ..PredictorConfig::default()
        }
    }

    fn rand_image(rng: &mut ChaCha8Rng, res: usize) -> ImageArray {
        Array3::from_shape_fn((res, res, 3), |_| rng.gen_range(-1.0..1.0))
    }

    /// Independent oracle: KL(N(mu, sigma^2) || N(0,1)) by Simpson quadrature
    /// of the defining integral.
    fn kl_quadrature(mu: f64, logvar: f64) -> f64 {
        let sigma = (logvar / 2.0).exp();
        let q = |x: f64| {
            (-((x - mu) * (x - mu)) / (2.0 * sigma * sigma)).exp()
                / (sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let log_ratio =
            |x: f64| -((x - mu) * (x - mu)) / (2.0 * sigma * sigma) - sigma.ln() + (x * x) / 2.0;
        let (a, b, n) = (mu - 12.0 * sigma - 12.0, mu + 12.0 * sigma + 12.0, 40_000);
        let h = (b - a) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * q(x) * log_ratio(x);
        }
        acc * h / 3.0
    }

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(kl_divergence(&[0.0], &[0.0]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0], &[0.0]).unwrap() - 0.5).abs() < 1e-12);
        let expect = 0.5 * (std::f64::consts::E - 2.0);
        assert!((kl_divergence(&[0.0], &[1.0]).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_quadrature_oracle() {
        for (mu, lv) in [(0.0, 1.0), (1.5, -0.7), (-0.3, 0.4)] {
            let closed = kl_divergence(&[mu], &[lv]).unwrap();
            let numeric = kl_quadrature(mu, lv);
            assert!(
                (closed - numeric).abs() < 1e-6,
                "mu={mu} lv={lv}: {closed} vs {numeric}"
            );
        }
    }

    #[test]
    fn kl_rejects_bad_input() {
        assert!(kl_divergence(&[0.0], &[0.0, 1.0]).is_err());
        assert!(kl_divergence(&[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn kl_nonnegative_and_zero_only_at_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mu: f64 = rng.gen_range(-3.0..3.0);
            let lv: f64 = rng.gen_range(-3.0..3.0);
            let kl = kl_divergence(&[mu], &[lv]).unwrap();
            assert!(kl >= 0.0);
            if mu != 0.0 || lv != 0.0 {
                assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn encode_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = VaePredictor::new(toy_config(8), &mut rng).unwrap();
        let img = rand_image(&mut rng, 8);
        let a = p.encode(&img).unwrap();
        let b = p.encode(&img).unwrap();
        assert_eq!(a.mu.len(), 4);
        assert_eq!(a.logvar.len(), 4);
        assert_eq!(a.mu, b.mu);
        assert_eq!(a.logvar, b.logvar);
        assert!(a.mu.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_rejects_wrong_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = VaePredictor::new(toy_config(8), &mut rng).unwrap();
        let img = rand_image(&mut rng, 16);
        assert!(p.encode(&img).is_err());
    }

    #[test]
    fn batch_rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = VaePredictor::new(toy_config(8), &mut rng).unwrap();
        let img0 = rand_image(&mut rng, 8);
        let img1 = rand_image(&mut rng, 8);
        let rec = |image: ImageArray| ImageRecord {
            image,
            vms: None,
            category: crate::dataset::Category::Big,
            responses: None,
        };
        let (r0, r1) = (rec(img0.clone()), rec(img1));
        let mut g = Graph::new();
        let vars = p.params.bind(&mut g);
        let batch = crate::dataset::image_batch(&[&r0, &r1]);
        let iv = g.leaf(batch);
        let (mu, _) = p.encode_nodes(&mut g, &vars, iv);
        let row0: Vec<f64> = g.value(mu).index_axis(Axis(0), 0).iter().copied().collect();
        let single = p.encode(&img0).unwrap();
        for (a, b) in row0.iter().zip(&single.mu) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_range_and_latent_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = VaePredictor::new(toy_config(8), &mut rng).unwrap();
        let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let map = p.decode(&z).unwrap();
        assert!(map.true_schema().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(map.false_schema().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(p.decode(&z).unwrap(), map);
        assert!(p.decode(&[0.0]).is_err());
    }

    #[test]
    fn decode_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = VaePredictor::new(toy_config(8), &mut rng).unwrap();
        let z0: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // scalar projection: weighted sum of the decoded map
        let w = randn(&mut rng, &[8 * 8 * 2, 1], 1.0);
        let project = |p: &VaePredictor, z: &[f64]| -> (f64, Option<Vec<f64>>, &'static str) {
            let mut g = Graph::new();
            let vars = p.params.bind(&mut g);
            let zt = Tensor::from_shape_vec(IxDyn(&[1, 4]), z.to_vec()).unwrap();
            let zv = g.leaf(zt);
            let logits = p.decode_logit_nodes(&mut g, &vars, zv);
            let map = g.sigmoid(logits);
            let flat = g.reshape(map, &[1, 8 * 8 * 2]);
            let wt = g.leaf(w.clone());
            let out = g.matmul(flat, wt);
            let s = g.sum_all(out);
            let val = g.scalar_value(s);
            let grad = g.backward(s, &[zv])[0];
            (val, Some(g.value(grad).iter().copied().collect()), "")
        };
        let (_, grad, _) = project(&p, &z0);
        let analytic = grad.unwrap();
        let h = 1e-5;
        for i in 0..4 {
            let mut zp = z0.clone();
            zp[i] += h;
            let mut zm = z0.clone();
            zm[i] -= h;
            let fd = (project(&p, &zp).0 - project(&p, &zm).0) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (fd - analytic[i]).abs() / denom < 1e-3,
                "latent {i}: fd={fd} vs {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn vae_loss_decomposes_and_handles_extreme_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = VaePredictor::new(toy_config(8), &mut rng).unwrap();
        let img = rand_image(&mut rng, 8);

        // Force a saturated decoder: zero weights, huge bias on channel 0.
        let w_idx = p.dec_out.w;
        let b_idx = p.dec_out.b;
        p.params.value_mut(w_idx).fill(0.0);
        {
            let b = p.params.value_mut(b_idx);
            b[[0, 0]] = 40.0;
            b[[0, 1]] = -40.0;
        }
        let target = VmsMap::new(
            Array2::from_elem((8, 8), 1.0),
            Array2::from_elem((8, 8), 0.0),
        )
        .unwrap();
        let noise = vec![0.0; 4];
        let loss = p.vae_loss(&img, &target, &noise).unwrap();
        assert!(loss.reconstruction < 1e-9, "saturated recon {}", loss.reconstruction);
        assert!((loss.total - (loss.reconstruction + loss.kl)).abs() < 1e-12);

        // Mid-gray prediction: logits 0 -> per-cell ln 2.
        {
            let b = p.params.value_mut(b_idx);
            b.fill(0.0);
        }
        let loss = p.vae_loss(&img, &target, &noise).unwrap();
        let expect = (8 * 8 * 2) as f64 * std::f64::consts::LN_2;
        assert!((loss.reconstruction - expect).abs() < 1e-9);
    }

    #[test]
    fn vae_loss_gradients_match_finite_differences_on_toy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = PredictorConfig {
            image_resolution: 4,
            vms_resolution: 4,
            latent_dim: 3,
            base_channels: 2,
            ..PredictorConfig::default()
        };
        let p = VaePredictor::new(cfg, &mut rng).unwrap();
        let img = rand_image(&mut rng, 4);
        let images = img.view().insert_axis(Axis(0)).to_owned().into_dyn();
        let targets = Tensor::from_shape_fn(IxDyn(&[1, 4, 4, 2]), |_| rng.gen_range(0.0..1.0));
        let noise = randn(&mut rng, &[1, 3], 1.0);

        let (_, grads) = p.loss_and_grads(&images, &targets, &noise);
        let flat_grads: Vec<f64> = grads.iter().flat_map(|t| t.iter().copied()).collect();

        let flat0 = p.params.to_flat();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..flat0.len() {
            let mut pp = p.clone();
            let mut fp = flat0.clone();
            fp[i] += h;
            pp.params.set_flat(&fp);
            let lp = pp.vae_loss_batch(&images, &targets, &noise).unwrap().total;
            fp[i] -= 2.0 * h;
            pp.params.set_flat(&fp);
            let lm = pp.vae_loss_batch(&images, &targets, &noise).unwrap().total;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(flat_grads[i].abs()).max(1e-6);
            worst = worst.max((fd - flat_grads[i]).abs() / denom);
        }
        assert!(worst < 1e-3, "worst relative gradient error {worst}");
    }

    #[test]
    fn score_reduction_examples() {
        let ones = VmsMap::new(Array2::from_elem((4, 4), 1.0), Array2::zeros((4, 4))).unwrap();
        assert_eq!(VaePredictor::score_of_map(&ones), 1.0);
        let mut half = Array2::zeros((4, 4));
        half.slice_mut(ndarray::s![..2, ..]).fill(1.0);
        let half_map = VmsMap::new(half, Array2::zeros((4, 4))).unwrap();
        assert_eq!(VaePredictor::score_of_map(&half_map), 0.5);
        // arbitrary map vs independent re-summation
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let arb = Array2::from_shape_fn((5, 3), |_| rng.gen_range(0.0..1.0));
        let arb_map = VmsMap::new(arb.clone(), Array2::zeros((5, 3))).unwrap();
        let manual: f64 = arb.iter().sum::<f64>() / 15.0;
        assert!((VaePredictor::score_of_map(&arb_map) - manual).abs() < 1e-15);
    }

    #[test]
    fn score_ignores_false_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
        let f1 = Array2::zeros((4, 4));
        let f2 = Array2::from_elem((4, 4), 1.0);
        let a = VmsMap::new(t.clone(), f1).unwrap();
        let b = VmsMap::new(t, f2).unwrap();
        assert_eq!(VaePredictor::score_of_map(&a), VaePredictor::score_of_map(&b));
    }

    #[test]
    fn predict_score_in_unit_interval_and_matches_decode_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = VaePredictor::new(toy_config(8), &mut rng).unwrap();
        let img = rand_image(&mut rng, 8);
        let s = p.predict_score(&img).unwrap();
        assert!((0.0..=1.0).contains(&s.value()));
        let latent = p.encode(&img).unwrap();
        let map = p.decode(&latent.mu).unwrap();
        assert!((s.value() - VaePredictor::score_of_map(&map)).abs() < 1e-12);
    }

    #[test]
    fn area_resize_constant_and_block_examples() {
        let c = Array2::from_elem((20, 20), 0.37);
        let out = area_resize(&c, 10);
        assert!(out.iter().all(|v| (v - 0.37).abs() < 1e-12));

        // 20x20 of 2x2 constant blocks -> the block values.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let blocks = Array2::from_shape_fn((10, 10), |_| rng.gen_range(0.0..1.0));
        let mut big = Array2::zeros((20, 20));
        for y in 0..20 {
            for x in 0..20 {
                big[[y, x]] = blocks[[y / 2, x / 2]];
            }
        }
        let out = area_resize(&big, 10);
        for y in 0..10 {
            for x in 0..10 {
                assert!((out[[y, x]] - blocks[[y, x]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_spatial_mean_matches_predict_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = VaePredictor::new(toy_config(8), &mut rng).unwrap();
        let img = rand_image(&mut rng, 8);
        let spatial = p.predict_spatial(&img, 4).unwrap();
        let score = p.predict_score(&img).unwrap().value();
        let mean = spatial.sum() / 16.0;
        assert!((mean - score).abs() < 1e-6);
        assert!(p.predict_spatial(&img, 0).is_err());
    }

    #[test]
    fn train_zero_epochs_returns_initial_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (records, _) = make_synthetic_dataset(8, 8, &mut rng).unwrap();
        let mut cfg = toy_config(8);
        cfg.epochs = 0;
        let (trained, stats) = train_predictor(&records, cfg.clone(), 123).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(123);
        let fresh = VaePredictor::new(cfg, &mut rng2).unwrap();
        assert!(stats.is_empty());
        for i in 0..fresh.params.len() {
            assert_eq!(fresh.params.value(i), trained.params.value(i));
        }
    }

    #[test]
    fn train_rejects_records_without_vms() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (mut records, _) = make_synthetic_dataset(4, 8, &mut rng).unwrap();
        records[2].vms = None;
        let err = train_predictor(&records, toy_config(8), 1).unwrap_err();
        match err {
            Error::Record { index, .. } => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn train_loss_curve_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (records, _) = make_synthetic_dataset(16, 8, &mut rng).unwrap();
        let mut cfg = toy_config(8);
        cfg.epochs = 2;
        let (_, s1) = train_predictor(&records, cfg.clone(), 7).unwrap();
        let (_, s2) = train_predictor(&records, cfg, 7).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = VaePredictor::new(toy_config(8), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.json");
        p.save_checkpoint(&path).unwrap();
        let q = VaePredictor::load_checkpoint(&path).unwrap();
        assert_eq!(p.config, q.config);
        for i in 0..p.params.len() {
            let a = p.params.value(i);
            let b = q.params.value(i);
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn resize_preserves_global_mean(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = Array2::from_shape_fn((100, 100), |_| rng.gen_range(0.0..1.0));
            let out = area_resize(&src, 10);
            let src_mean = src.sum() / src.len() as f64;
            let out_mean = out.sum() / out.len() as f64;
            prop_assert!((src_mean - out_mean).abs() < 1e-12);
        }

        #[test]
        fn latent_sample_satisfies_reparameterization(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lv = LatentVars {
                mu: (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                logvar: (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            };
            let noise: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let z = lv.sample(&noise);
            for i in 0..4 {
                let expect = lv.mu[i] + (lv.logvar[i] / 2.0).exp() * noise[i];
                prop_assert!((z[i] - expect).abs() < 1e-15);
            }
        }
    }
}
