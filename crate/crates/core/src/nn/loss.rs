use crate::error::{Error, Result};

/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty vector".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// `-ln(max(probs[label], 1e-12))` for a two-class probability vector.
pub fn cross_entropy(probs: &[f64], label: u8) -> Result<f64> {
    let label = label as usize;
    if label > 1 {
        return Err(Error::InvalidArgument(format!("label {label} outside {{0, 1}}")));
    }
    if probs.len() != 2 {
        return Err(Error::dim("cross_entropy probabilities", 2, probs.len()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Numeric("invalid probability vector".into()));
    }
    Ok(-probs[label].max(PROB_FLOOR).ln())
}

/// `logsumexp(z) - z[label]`; agrees with [`cross_entropy`] away from the floor.
pub(crate) fn cross_entropy_from_logits(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}
