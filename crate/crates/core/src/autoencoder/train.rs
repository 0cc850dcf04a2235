use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use super::{init_model, AeArchitecture, AeHyperparams, AeModel, ForwardCache, Mode};
use crate::dataio::ExpressionMatrix;
use crate::error::{Error, Result};
use crate::seed;

/// Gradient of the training objective, shaped like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub shift: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

impl Gradients {
    /// Parameter blocks in the canonical order (per layer: W, b, γ, δ).
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weights.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
            if let (Some(g), Some(s)) = (&l.gamma, &l.shift) {
                out.push(g.as_slice().expect("standard layout"));
                out.push(s.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
            if let (Some(g), Some(s)) = (&mut l.gamma, &mut l.shift) {
                out.push(g.as_slice_mut().expect("standard layout"));
                out.push(s.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }
}

impl AeModel {
    /// Parameter blocks in the same order as [`Gradients::blocks`].
    pub(crate) fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
            if let Some(bn) = &mut l.batch_norm {
                out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                out.push(bn.shift.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    /// Train-mode objective and its gradient for one batch. Pure: running
    /// statistics are left untouched and the forward cache is returned.
    pub(crate) fn loss_and_gradients(
        &self,
        batch: ArrayView2<'_, f64>,
        beta_l2: f64,
    ) -> Result<(f64, Gradients, ForwardCache)> {
        self.check_input(batch, Mode::Train)?;
        let cache = self.forward_cached(batch, Mode::Train, 0..self.layers.len());
        let recon = cache.reconstruction();
        let rows = batch.nrows() as f64;
        let diff = recon - &batch;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / rows + beta_l2 * self.weight_penalty();

        let mut upstream = diff * (2.0 / rows);
        let mut grads = Vec::with_capacity(self.layers.len());
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            let act = layer.activation;
            let mut delta = upstream;
            delta.zip_mut_with(&lc.output, |g, &o| *g *= act.derivative_from_output(o));

            let (dpre, gamma, shift) = match (&layer.batch_norm, &lc.bn) {
                (Some(bn), Some(c)) => {
                    let dshift = delta.sum_axis(Axis(0));
                    let dgamma = (&delta * &c.xhat).sum_axis(Axis(0));
                    let dxhat = &delta * &bn.gamma;
                    let inv_std = c.var.mapv(|v| 1.0 / (v + super::BN_EPS).sqrt());
                    let sum_dxhat = dxhat.sum_axis(Axis(0));
                    let sum_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(0));
                    let dpre = (&dxhat * rows - &sum_dxhat - &c.xhat * &sum_dxhat_xhat)
                        * &(inv_std / rows);
                    (dpre, Some(dgamma), Some(dshift))
                }
                _ => (delta, None, None),
            };

            let mut dw = dpre.t().dot(&lc.input);
            if beta_l2 > 0.0 {
                dw.scaled_add(2.0 * beta_l2, &layer.weights);
            }
            let db = dpre.sum_axis(Axis(0));
            upstream = dpre.dot(&layer.weights);
            grads.push(LayerGradients {
                weights: dw,
                bias: db,
                gamma,
                shift,
            });
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }, cache))
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(model: &mut AeModel, hp: &AeHyperparams) -> Self {
        let sizes: Vec<usize> = model.param_blocks_mut().iter().map(|b| b.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr: hp.learning_rate,
            beta1: hp.adam_beta1,
            beta2: hp.adam_beta2,
            eps: hp.adam_epsilon,
        }
    }

    fn step(&mut self, model: &mut AeModel, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((params, g), m), v) in model
            .param_blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..params.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Splits a shuffled index order into mini-batches. A trailing batch of a
/// single row is merged into the one before it.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("len > 1") = &order[start..];
    }
    out
}

/// Mini-batch Adam on the regularised reconstruction objective.
///
/// Each epoch reshuffles the rows with a generator seeded from `hp.seed`
/// and records the row-weighted mean batch objective.
pub fn train(x: &ExpressionMatrix, arch: &AeArchitecture, hp: &AeHyperparams) -> Result<AeModel> {
    hp.validate()?;
    arch.validate()?;
    if x.n_features() != arch.input_dim() {
        return Err(Error::shape(
            format!("{} input features", arch.input_dim()),
            x.n_features(),
        ));
    }
    let n = x.n_samples();
    if n < hp.batch_size {
        return Err(Error::invalid_arg(format!(
            "{n} samples is fewer than batch_size {}",
            hp.batch_size
        )));
    }
    let mut model = init_model(arch, seed::derive(hp.seed, 0))?;
    let mut adam = Adam::new(&mut model, hp);
    let mut rng = seed::rng(seed::derive(hp.seed, 1));
    let mut order: Vec<usize> = (0..n).collect();
    let values = x.values();

    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, rows) in batches(&order, hp.batch_size).into_iter().enumerate() {
            let batch = values.select(Axis(0), rows);
            let (loss, grads, cache) = model.loss_and_gradients(batch.view(), hp.beta_l2)?;
            if !loss.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite training loss at epoch {epoch}, batch {b}"
                )));
            }
            adam.step(&mut model, &grads);
            model.update_running_stats(&cache, rows.len());
            total += loss * rows.len() as f64;
        }
        model.loss_history.push(total / n as f64);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, minmax_scale};

    #[test]
    fn batching_merges_singleton_tail() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&order[..8], 4);
        assert_eq!(b.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![4, 4]);
        let b = batches(&order[..7], 4);
        assert_eq!(b.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![4, 3]);
    }

    fn fixture() -> ExpressionMatrix {
        let (x, _) = generate_synthetic(200, 100, 10, 4.0, 1).unwrap();
        minmax_scale(&x)
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let x = fixture();
        let arch = AeArchitecture::standard(100);
        let hp = AeHyperparams {
            epochs: 30,
            seed: 4,
            ..Default::default()
        };
        let a = train(&x, &arch, &hp).unwrap();
        assert_eq!(a.loss_history.len(), 30);
        assert!(a.loss_history.iter().all(|l| l.is_finite()));
        assert!(a.loss_history.last().unwrap() < a.loss_history.first().unwrap());
        let b = train(&x, &arch, &hp).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a, b);
        let z = crate::autoencoder::encode(&a, &x).unwrap();
        assert_eq!(z.z_values.dim(), (200, 50));
    }

    #[test]
    fn precondition_violations_rejected() {
        let x = fixture();
        let arch = AeArchitecture::standard(100);
        let zero_epochs = AeHyperparams {
            epochs: 0,
            ..Default::default()
        };
        assert!(train(&x, &arch, &zero_epochs).is_err());
        let big_batch = AeHyperparams {
            batch_size: 500,
            ..Default::default()
        };
        assert!(train(&x, &arch, &big_batch).is_err());
        assert!(train(&x, &AeArchitecture::standard(99), &AeHyperparams::default()).is_err());
    }

    #[test]
    fn strong_l2_shrinks_weights() {
        let x = fixture();
        let arch = AeArchitecture::mirrored(&[100, 20, 5]);
        let base = AeHyperparams {
            epochs: 20,
            beta_l2: 0.0,
            seed: 2,
            ..Default::default()
        };
        let heavy = AeHyperparams {
            beta_l2: 1e3,
            ..base.clone()
        };
        let a = train(&x, &arch, &base).unwrap();
        let b = train(&x, &arch, &heavy).unwrap();
        for (na, nb) in a.weight_norms().iter().zip(b.weight_norms()) {
            assert!(nb < *na, "{nb} !< {na}");
        }
    }
}
