use ndarray::Zip;

use super::mlp::{Dense, Gradients, MlpModel};
use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments for every parameter of an [`MlpModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Dense>,
    pub v: Vec<Dense>,
    pub t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(model: &MlpModel, learning_rate: f64) -> Self {
        let zeros = || {
            model
                .layers()
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            learning_rate,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// One Adam update. A non-finite gradient aborts before anything is touched.
pub fn adam_step(model: &mut MlpModel, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if !model.same_shape(&grads.layers) || !model.same_shape(&state.m) || !model.same_shape(&state.v) {
        return Err(Error::InvalidArgument("gradient/optimizer shapes do not match the model".into()));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient at optimizer step {}", state.t + 1)));
    }

    state.t += 1;
    let t = state.t as f64;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let update = |p: &mut f64, &g: &f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for (((layer, g), m), v) in model
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        Zip::from(&mut layer.weights)
            .and(&g.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .for_each(update);
        Zip::from(&mut layer.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(update);
    }

    if !model.is_finite() {
        return Err(Error::Numeric(format!("non-finite parameter after optimizer step {}", state.t)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    /// A model whose only interesting parameter is the output bias of class 0.
    fn scalar_model() -> MlpModel {
        MlpModel::zeros(1, &[], 0.0).unwrap()
    }

    fn grads_with(model: &MlpModel, g: f64) -> Gradients {
        let mut grads = Gradients::zeros_like(model);
        grads.layers[0].bias[0] = g;
        grads
    }

    /// Plain scalar Adam, written out longhand.
    fn scalar_adam(theta: f64, gs: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut th, mut m, mut v) = (theta, 0.0, 0.0);
        for (i, g) in gs.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            th -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        th
    }

    #[test]
    fn single_step_by_hand() {
        let mut model = scalar_model();
        let mut state = AdamState::new(&model, 0.01);
        { let g = grads_with(&model, 1.0); adam_step(&mut model, &g, &mut state) }.unwrap();
        assert_eq!(state.t, 1);
        assert!((state.m[0].bias[0] - 0.1).abs() < 1e-15);
        assert!((state.v[0].bias[0] - 0.001).abs() < 1e-15);
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((model.layers()[0].bias[0] - expected).abs() < 1e-12);
        assert_eq!(model.layers()[0].bias[1], 0.0);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        let mut model = scalar_model();
        model.layers_mut()[0].bias[0] = 0.3;
        let mut state = AdamState::new(&model, 0.01);
        for _ in 0..2 {
            { let g = grads_with(&model, 0.7); adam_step(&mut model, &g, &mut state) }.unwrap();
        }
        let oracle = scalar_adam(0.3, &[0.7, 0.7], 0.01);
        assert!((model.layers()[0].bias[0] - oracle).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameters() {
        let mut model = MlpModel::init(3, &[4], 0.0, 1).unwrap();
        let before = model.clone();
        let mut state = AdamState::new(&model, 0.01);
        state.t = 17;
        adam_step(&mut model, &Gradients::zeros_like(&before), &mut state).unwrap();
        assert_eq!(model, before);
        assert_eq!(state.t, 18);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut model = scalar_model();
        let before = model.clone();
        let mut state = AdamState::new(&model, 0.01);
        let err = { let g = grads_with(&model, f64::NAN); adam_step(&mut model, &g, &mut state) }.unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(model, before);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut model = scalar_model();
        let mut state = AdamState::new(&model, 0.01);
        let mut grads = Gradients::zeros_like(&model);
        grads.layers[0].weights = Array2::zeros((3, 1));
        assert!(adam_step(&mut model, &grads, &mut state).is_err());
    }
}
