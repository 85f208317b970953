use super::loss::cross_entropy_from_logits;
use super::mlp::{Mode, MlpModel};
use crate::error::{Error, Result};

fn loss_at(model: &MlpModel, x: &[f64], label: u8) -> Result<f64> {
    let (_, cache) = model.forward(x, Mode::Infer)?;
    let logits = cache.logits().row(0).to_vec();
    Ok(cross_entropy_from_logits(&logits, label as usize))
}

/// `k`-th parameter of layer `l` in canonical order (weights row-major, then bias).
fn param_mut(model: &mut MlpModel, l: usize, k: usize) -> &mut f64 {
    let layer = &mut model.layers_mut()[l];
    let n_weights = layer.weights.len();
    if k < n_weights {
        layer.weights.iter_mut().nth(k).expect("weight index")
    } else {
        &mut layer.bias[k - n_weights]
    }
}

/// Largest relative disagreement between backprop gradients and central
/// differences with step `h`, over every parameter. Dropout is not applied.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(model: &MlpModel, x: &[f64], label: u8, h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h}")));
    }
    let (_, cache) = model.forward(x, Mode::Infer)?;
    let analytic = model.backward(&cache, &[label])?.flatten();

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut idx = 0;
    for l in 0..model.layers().len() {
        for k in 0..model.layers()[l].param_count() {
            let original = *param_mut(&mut probe, l, k);
            *param_mut(&mut probe, l, k) = original + h;
            let plus = loss_at(&probe, x, label)?;
            *param_mut(&mut probe, l, k) = original - h;
            let minus = loss_at(&probe, x, label)?;
            *param_mut(&mut probe, l, k) = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
            idx += 1;
        }
    }
    Ok(worst)
}
