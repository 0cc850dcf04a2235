//! Central finite-difference verification of the backward pass.

use ndarray::ArrayView2;

use super::train::Gradients;
use super::AeModel;
use crate::error::Result;

/// Gradients whose magnitudes are both below this are compared absolutely.
const MAGNITUDE_FLOOR: f64 = 1e-6;

/// Analytic train-mode objective and gradient for `batch`.
pub fn analytic_gradients(
    model: &AeModel,
    batch: ArrayView2<'_, f64>,
    beta_l2: f64,
) -> Result<(f64, Gradients)> {
    let (loss, grads, _) = model.loss_and_gradients(batch, beta_l2)?;
    Ok((loss, grads))
}

/// (f(θ + h) − f(θ − h)) / 2h for every parameter, in train mode.
pub fn numeric_gradients(
    model: &AeModel,
    batch: ArrayView2<'_, f64>,
    beta_l2: f64,
    step: f64,
) -> Result<Gradients> {
    let (_, mut out) = analytic_gradients(model, batch, beta_l2)?;
    let mut probe = model.clone();
    let shape: Vec<usize> = out.blocks().iter().map(|b| b.len()).collect();
    let mut numeric: Vec<Vec<f64>> = shape.iter().map(|&n| vec![0.0; n]).collect();
    for (block, len) in shape.iter().enumerate() {
        for i in 0..*len {
            let original = probe.param_blocks_mut()[block][i];
            probe.param_blocks_mut()[block][i] = original + step;
            let (plus, _) = analytic_gradients(&probe, batch, beta_l2)?;
            probe.param_blocks_mut()[block][i] = original - step;
            let (minus, _) = analytic_gradients(&probe, batch, beta_l2)?;
            probe.param_blocks_mut()[block][i] = original;
            numeric[block][i] = (plus - minus) / (2.0 * step);
        }
    }
    for (dst, src) in out.blocks_mut().into_iter().zip(numeric) {
        dst.copy_from_slice(&src);
    }
    Ok(out)
}

/// Largest |a − n| / max(|a|, |n|, 1e-6) over all parameters.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    analytic
        .blocks()
        .iter()
        .zip(numeric.blocks())
        .flat_map(|(a, n)| a.iter().zip(n.iter()))
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(MAGNITUDE_FLOOR))
        .fold(0.0, f64::max)
}

pub fn compare_gradients(analytic: &Gradients, numeric: &Gradients, tolerance: f64) -> bool {
    let same_shape = analytic
        .blocks()
        .iter()
        .map(|b| b.len())
        .eq(numeric.blocks().iter().map(|b| b.len()));
    same_shape && max_relative_error(analytic, numeric) <= tolerance
}

/// True iff every analytic gradient of the regularised objective matches
/// central differences with step 1e-5 within `tolerance`.
pub fn gradient_check(
    model: &AeModel,
    batch: ArrayView2<'_, f64>,
    beta_l2: f64,
    tolerance: f64,
) -> Result<bool> {
    let (_, analytic) = analytic_gradients(model, batch, beta_l2)?;
    let numeric = numeric_gradients(model, batch, beta_l2, 1e-5)?;
    Ok(compare_gradients(&analytic, &numeric, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{init_model, AeArchitecture};
    use crate::seed;
    use ndarray::Array2;
    use rand::Rng;

    fn tiny() -> (AeModel, Array2<f64>) {
        let mut model = init_model(&AeArchitecture::mirrored(&[6, 4, 2]), 17).unwrap();
        let mut rng = seed::rng(99);
        // non-trivial batch-norm parameters so their gradients are exercised
        for l in &mut model.layers {
            l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            if let Some(bn) = &mut l.batch_norm {
                bn.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
                bn.shift.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
        }
        let batch = Array2::from_shape_fn((4, 6), |_| rng.random_range(0.0..1.0));
        (model, batch)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (model, batch) = tiny();
        assert!(gradient_check(&model, batch.view(), 0.0, 1e-4).unwrap());
        assert!(gradient_check(&model, batch.view(), 1e-3, 1e-4).unwrap());
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (model, batch) = tiny();
        let (_, mut analytic) = analytic_gradients(&model, batch.view(), 1e-3).unwrap();
        let numeric = numeric_gradients(&model, batch.view(), 1e-3, 1e-5).unwrap();
        assert!(compare_gradients(&analytic, &numeric, 1e-4));
        analytic.layers[1].weights[[0, 0]] += 1e-2;
        assert!(!compare_gradients(&analytic, &numeric, 1e-4));
    }
}
