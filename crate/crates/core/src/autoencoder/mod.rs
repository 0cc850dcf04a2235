//! Fully connected autoencoder with batch normalisation, trained by Adam.
//!
//! Hidden layers are `affine → batch norm → ReLU`; the latent layer is a
//! plain affine map and the reconstruction layer ends in a sigmoid, which
//! matches inputs scaled to [0, 1]. Weight matrices are stored `out × in`.

mod gradcheck;
mod train;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{write_file, ExpressionMatrix};
use crate::error::{Error, Result};
use crate::seed;

pub use gradcheck::{
    analytic_gradients, compare_gradients, gradient_check, max_relative_error, numeric_gradients,
};
pub use train::train;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;
const CHECKPOINT_FORMAT: &str = "lkfs-ae/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeArchitecture {
    /// Layer widths from input to latent, e.g. `[d, 200, 100, 50]`.
    pub encoder_layers: Vec<usize>,
    /// Layer widths from latent to reconstruction, e.g. `[50, 100, 200, d]`.
    pub decoder_layers: Vec<usize>,
}

impl AeArchitecture {
    /// `d → 200 → 100 → 50` and its mirror.
    pub fn standard(input_dim: usize) -> Self {
        Self::mirrored(&[input_dim, 200, 100, 50])
    }

    /// Encoder with the given widths, decoder the reverse.
    pub fn mirrored(encoder_layers: &[usize]) -> Self {
        Self {
            encoder_layers: encoder_layers.to_vec(),
            decoder_layers: encoder_layers.iter().rev().copied().collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_layers[0]
    }

    pub fn latent_dim(&self) -> usize {
        *self.encoder_layers.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        let (enc, dec) = (&self.encoder_layers, &self.decoder_layers);
        if enc.len() < 2 || dec.len() < 2 {
            return Err(Error::invalid_arg("encoder and decoder need at least two widths each"));
        }
        if enc.iter().chain(dec).any(|&w| w == 0) {
            return Err(Error::invalid_arg("layer widths must be >= 1"));
        }
        if enc.last() != dec.first() {
            return Err(Error::invalid_arg("encoder output must equal decoder input (latent dim)"));
        }
        if dec.last() != enc.first() {
            return Err(Error::invalid_arg("decoder output must equal input dimension"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeHyperparams {
    pub learning_rate: f64,
    /// Coefficient of the squared-L2 weight penalty.
    pub beta_l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for AeHyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta_l2: 1e-4,
            epochs: 200,
            batch_size: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl AeHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid_arg(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.beta_l2 >= 0.0) {
            return bad("beta_l2 must be >= 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 (batch normalisation needs batch statistics)");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0)
            || !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0)
        {
            return bad("adam betas must lie in (0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => out * (1.0 - out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            shift: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub batch_norm: Option<BatchNorm>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; any batch size including 1.
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeModel {
    pub architecture: AeArchitecture,
    /// Encoder layers followed by decoder layers.
    pub layers: Vec<Layer>,
    /// Mean training objective per epoch.
    pub loss_history: Vec<f64>,
}

/// Latent coordinates of each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRepresentation {
    pub z_values: Array2<f64>,
    pub sample_ids: Vec<String>,
}

/// Glorot-uniform weights, zero biases, identity batch norm.
pub fn init_model(arch: &AeArchitecture, seed: u64) -> Result<AeModel> {
    arch.validate()?;
    let mut rng = seed::rng(seed);
    let mut layers = Vec::new();
    for (widths, last_activation) in [
        (&arch.encoder_layers, Activation::Identity),
        (&arch.decoder_layers, Activation::Sigmoid),
    ] {
        let count = widths.len() - 1;
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights =
                Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit));
            let hidden = i + 1 < count;
            layers.push(Layer {
                weights,
                bias: Array1::zeros(fan_out),
                batch_norm: hidden.then(|| BatchNorm::new(fan_out)),
                activation: if hidden { Activation::Relu } else { last_activation },
            });
        }
    }
    Ok(AeModel {
        architecture: arch.clone(),
        layers,
        loss_history: Vec::new(),
    })
}

/// Everything the backward pass needs from one layer.
pub(crate) struct LayerCache {
    pub input: Array2<f64>,
    /// Normalised pre-activation and batch statistics (train mode only).
    pub bn: Option<BnCache>,
    pub output: Array2<f64>,
}

pub(crate) struct BnCache {
    pub xhat: Array2<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn reconstruction(&self) -> &Array2<f64> {
        &self.layers.last().expect("at least one layer").output
    }
}

impl AeModel {
    pub fn n_encoder_layers(&self) -> usize {
        self.architecture.encoder_layers.len() - 1
    }

    fn check_input(&self, batch: ArrayView2<'_, f64>, mode: Mode) -> Result<()> {
        let d = self.architecture.input_dim();
        if batch.ncols() != d {
            return Err(Error::shape(format!("{d} input columns"), batch.ncols()));
        }
        if batch.nrows() == 0 {
            return Err(Error::invalid_arg("empty batch"));
        }
        if mode == Mode::Train && batch.nrows() < 2 {
            return Err(Error::invalid_arg("train-mode batches need at least 2 rows"));
        }
        Ok(())
    }

    /// Runs layers `range` without touching running statistics.
    pub(crate) fn forward_cached(
        &self,
        batch: ArrayView2<'_, f64>,
        mode: Mode,
        range: std::ops::Range<usize>,
    ) -> ForwardCache {
        let mut caches = Vec::with_capacity(range.len());
        let mut current = batch.to_owned();
        for layer in &self.layers[range] {
            let mut pre = current.dot(&layer.weights.t());
            pre += &layer.bias;
            let bn_cache = match (&layer.batch_norm, mode) {
                (Some(bn), Mode::Train) => {
                    let mean = pre.mean_axis(Axis(0)).expect("non-empty batch");
                    let var = pre.var_axis(Axis(0), 0.0);
                    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    let xhat = (&pre - &mean) * &inv_std;
                    pre = &xhat * &bn.gamma + &bn.shift;
                    Some(BnCache { xhat, mean, var })
                }
                (Some(bn), Mode::Inference) => {
                    let inv_std = bn.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    pre = (&pre - &bn.running_mean) * &inv_std * &bn.gamma + &bn.shift;
                    None
                }
                (None, _) => None,
            };
            let act = layer.activation;
            let output = pre.mapv(|v| act.apply(v));
            caches.push(LayerCache {
                input: std::mem::replace(&mut current, output.clone()),
                bn: bn_cache,
                output,
            });
        }
        ForwardCache { layers: caches }
    }

    /// Folds the batch statistics of a train-mode pass into the running ones.
    pub(crate) fn update_running_stats(&mut self, cache: &ForwardCache, batch_rows: usize) {
        let unbias = if batch_rows > 1 {
            batch_rows as f64 / (batch_rows - 1) as f64
        } else {
            1.0
        };
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(bn), Some(c)) = (layer.batch_norm.as_mut(), lc.bn.as_ref()) {
                bn.running_mean = &bn.running_mean * BN_MOMENTUM + &c.mean * (1.0 - BN_MOMENTUM);
                bn.running_var =
                    &bn.running_var * BN_MOMENTUM + &c.var * ((1.0 - BN_MOMENTUM) * unbias);
            }
        }
    }

    /// Full pass. Returns the latent codes and the reconstruction.
    pub fn forward(
        &mut self,
        batch: ArrayView2<'_, f64>,
        mode: Mode,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(batch, mode)?;
        let cache = self.forward_cached(batch, mode, 0..self.layers.len());
        if mode == Mode::Train {
            self.update_running_stats(&cache, batch.nrows());
        }
        let z = cache.layers[self.n_encoder_layers() - 1].output.clone();
        let recon = cache.reconstruction().clone();
        Ok((z, recon))
    }

    /// Inference-mode encoder pass.
    pub fn encode_values(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x, Mode::Inference)?;
        let cache = self.forward_cached(x, Mode::Inference, 0..self.n_encoder_layers());
        Ok(cache.layers.into_iter().last().expect("encoder has layers").output)
    }

    /// Σ w² over every weight matrix (biases and batch-norm parameters excluded).
    pub fn weight_penalty(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    pub fn weight_norms(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>().sqrt())
            .collect()
    }

    pub fn save(&self, hp: &AeHyperparams, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            hyperparams: hp.clone(),
            model: self.clone(),
        };
        write_file(path.as_ref(), serde_json::to_string(&ckpt)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(AeModel, AeHyperparams)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                path: path.to_owned(),
                message: format!("unsupported checkpoint format {:?}", ckpt.format),
            });
        }
        ckpt.model.architecture.validate()?;
        Ok((ckpt.model, ckpt.hyperparams))
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    hyperparams: AeHyperparams,
    model: AeModel,
}

/// Mean over samples of the squared Euclidean reconstruction error.
pub fn loss_mse(x: ArrayView2<'_, f64>, x_reconstructed: ArrayView2<'_, f64>) -> Result<f64> {
    if x.dim() != x_reconstructed.dim() {
        return Err(Error::shape(format!("{:?}", x.dim()), format!("{:?}", x_reconstructed.dim())));
    }
    if x.nrows() == 0 {
        return Err(Error::invalid_arg("empty batch"));
    }
    let sq: f64 = x
        .iter()
        .zip(x_reconstructed.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / x.nrows() as f64)
}

/// `loss_mse + beta_l2 · Σ w²`.
pub fn loss_regularized(
    model: &AeModel,
    x: ArrayView2<'_, f64>,
    x_reconstructed: ArrayView2<'_, f64>,
    beta_l2: f64,
) -> Result<f64> {
    if !(beta_l2 >= 0.0) {
        return Err(Error::invalid_arg("beta_l2 must be >= 0"));
    }
    let mse = loss_mse(x, x_reconstructed)?;
    if beta_l2 == 0.0 {
        return Ok(mse);
    }
    Ok(mse + beta_l2 * model.weight_penalty())
}

pub fn encode(model: &AeModel, x: &ExpressionMatrix) -> Result<LatentRepresentation> {
    Ok(LatentRepresentation {
        z_values: model.encode_values(x.values().view())?,
        sample_ids: x.sample_ids().to_vec(),
    })
}
