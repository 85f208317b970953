use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::softmax_in_place;
use crate::error::{Error, Result};

/// The classifier always separates relevant from non-relevant.
pub const OUTPUT_DIM: usize = 2;

/// Fully connected layer; `weights` is `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Self {
            weights: Array2::zeros((output_dim, input_dim)),
            bias: Array1::zeros(output_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.weights.dim() == other.weights.dim() && self.bias.len() == other.bias.len()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

pub enum Mode<'a> {
    Infer,
    /// Dropout active; masks are drawn from the supplied generator.
    Train(&'a mut dyn RngCore),
}

/// Everything backprop needs from a forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each linear layer, after dropout.
    pub inputs: Vec<Array2<f64>>,
    /// Inverted-dropout multipliers (0 or 1/keep) per linear layer input.
    pub masks: Vec<Option<Array2<f64>>>,
    /// Pre-activations per linear layer; the last entry holds the logits.
    pub pre_activations: Vec<Array2<f64>>,
    pub probs: Array2<f64>,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn logits(&self) -> &Array2<f64> {
        self.pre_activations.last().expect("at least one layer")
    }
}

/// Parameter-shaped gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    /// Parameters in canonical order: per layer, weights row-major then bias.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

pub(crate) fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(Dense::param_count).sum());
    for l in layers {
        out.extend(l.weights.iter());
        out.extend(l.bias.iter());
    }
    out
}

/// Feed-forward classifier: linear layers with rectifier activations on the
/// hidden ones, inverted dropout on the input of every linear layer, softmax
/// over two classes.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Dense>,
    dropout_rate: f64,
}

fn check_dropout(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

impl MlpModel {
    /// All-zero parameters with the chain `input_dim → hidden.. → 2`.
    pub fn zeros(input_dim: usize, hidden_dims: &[usize], dropout_rate: f64) -> Result<Self> {
        check_dropout(dropout_rate)?;
        let dims = Self::chain(input_dim, hidden_dims)?;
        let layers = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self { layers, dropout_rate })
    }

    /// Kaiming-uniform weights (`U(±sqrt(6 / fan_in))`), zero biases.
    pub fn init(input_dim: usize, hidden_dims: &[usize], dropout_rate: f64, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(input_dim, hidden_dims, dropout_rate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let bound = (6.0 / layer.input_dim() as f64).sqrt();
            layer
                .weights
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-bound..bound));
        }
        Ok(model)
    }

    pub fn from_layers(layers: Vec<Dense>, dropout_rate: f64) -> Result<Self> {
        check_dropout(dropout_rate)?;
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::dim(format!("layer {} input", i + 1), w[0].output_dim(), w[1].input_dim()));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::dim(format!("layer {i} bias"), l.output_dim(), l.bias.len()));
            }
        }
        let out = layers.last().unwrap().output_dim();
        if out != OUTPUT_DIM {
            return Err(Error::dim("output layer", OUTPUT_DIM, out));
        }
        Ok(Self { layers, dropout_rate })
    }

    fn chain(input_dim: usize, hidden_dims: &[usize]) -> Result<Vec<usize>> {
        let mut dims = Vec::with_capacity(hidden_dims.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden_dims);
        dims.push(OUTPUT_DIM);
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("layer widths must be positive: {dims:?}")));
        }
        Ok(dims)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Dense::output_dim)
            .collect()
    }

    /// `[input, hidden.., 2]`
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Dense::output_dim));
        d
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub(crate) fn same_shape(&self, other: &[Dense]) -> bool {
        self.layers.len() == other.len() && self.layers.iter().zip(other).all(|(a, b)| a.same_shape(b))
    }

    /// Forward pass over the rows of `x`.
    pub fn forward_batch(&self, x: ArrayView2<f64>, mode: Mode<'_>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("forward input", self.input_dim(), x.ncols()));
        }
        let keep = 1.0 - self.dropout_rate;
        let mut rng = match mode {
            Mode::Train(rng) if self.dropout_rate > 0.0 => Some(rng),
            _ => None,
        };

        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut masks = Vec::with_capacity(n_layers);
        let mut pre_activations = Vec::with_capacity(n_layers);
        let mut current = x.to_owned();

        for (l, layer) in self.layers.iter().enumerate() {
            let mask = rng.as_mut().map(|rng| {
                let scale = 1.0 / keep;
                Array2::from_shape_simple_fn(current.dim(), || {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        0.0
                    }
                })
            });
            if let Some(m) = &mask {
                current *= m;
            }
            let mut z = current.dot(&layer.weights.t());
            z += &layer.bias;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activation in layer {l}")));
            }
            let next = if l + 1 < n_layers {
                z.mapv(|v| v.max(0.0))
            } else {
                Array2::zeros((0, 0))
            };
            inputs.push(std::mem::replace(&mut current, next));
            masks.push(mask);
            pre_activations.push(z);
        }

        let mut probs = pre_activations.last().unwrap().clone();
        for mut row in probs.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("standard layout"));
        }
        Ok(ForwardCache {
            inputs,
            masks,
            pre_activations,
            probs,
        })
    }

    /// Single-example forward pass returning the class probabilities.
    pub fn forward(&self, x: &[f64], mode: Mode<'_>) -> Result<(Vec<f64>, ForwardCache)> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let cache = self.forward_batch(view, mode)?;
        let probs = cache.probs.row(0).to_vec();
        Ok((probs, cache))
    }

    /// Inference-mode class probabilities for every row of `x`.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_batch(x, Mode::Infer)?.probs)
    }

    /// Gradients of `Σ_i coeff_i · CE(probs_i, label_i)` for a cached batch.
    pub fn backward_weighted(&self, cache: &ForwardCache, labels: &[u8], coeffs: &[f64]) -> Result<Gradients> {
        let n = cache.batch_len();
        if labels.len() != n || coeffs.len() != n {
            return Err(Error::dim("backward labels", n, labels.len().min(coeffs.len())));
        }
        if cache.inputs.len() != self.layers.len()
            || cache
                .inputs
                .iter()
                .zip(&self.layers)
                .any(|(x, l)| x.ncols() != l.input_dim())
        {
            return Err(Error::InvalidArgument("forward cache does not match model shape".into()));
        }

        let mut dz = cache.probs.clone();
        for ((mut row, &label), &c) in dz.rows_mut().into_iter().zip(labels).zip(coeffs) {
            if label > 1 {
                return Err(Error::InvalidArgument(format!("label {label} outside {{0, 1}}")));
            }
            row[label as usize] -= 1.0;
            row *= c;
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            grads.push(Dense {
                weights: dz.t().dot(&cache.inputs[l]),
                bias: dz.sum_axis(Axis(0)),
            });
            if l > 0 {
                let mut da = dz.dot(&layer.weights);
                if let Some(mask) = &cache.masks[l] {
                    da *= mask;
                }
                Zip::from(&mut da)
                    .and(&cache.pre_activations[l - 1])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                dz = da;
            }
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Gradients of the summed cross-entropy over the cached batch.
    pub fn backward(&self, cache: &ForwardCache, labels: &[u8]) -> Result<Gradients> {
        self.backward_weighted(cache, labels, &vec![1.0; labels.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::cross_entropy;
    use ndarray::array;

    #[test]
    fn zero_model_is_uniform() {
        let m = MlpModel::zeros(5, &[4, 3], 0.4).unwrap();
        let (p, _) = m.forward(&[1.0, -2.0, 3.0, 0.5, 9.0], Mode::Infer).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn one_dimensional_chain_by_hand() {
        // 1 → 1 → 1 → 2, all weights 1, biases 0, x = 1: hidden = 1, 1; logits [1, 1]
        let ones = |i, o| Dense {
            weights: Array2::ones((o, i)),
            bias: Array1::zeros(o),
        };
        let m = MlpModel::from_layers(vec![ones(1, 1), ones(1, 1), ones(1, 2)], 0.0).unwrap();
        let (p, cache) = m.forward(&[1.0], Mode::Infer).unwrap();
        assert_eq!(cache.logits(), &array![[1.0, 1.0]]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn zero_dropout_train_equals_infer() {
        let m = MlpModel::init(6, &[5, 4], 0.0, 3).unwrap();
        let x = [0.1, -0.4, 0.9, 1.5, -2.0, 0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (train, _) = m.forward(&x, Mode::Train(&mut rng)).unwrap();
        let (infer, _) = m.forward(&x, Mode::Infer).unwrap();
        assert_eq!(train, infer);
    }

    #[test]
    fn forward_is_deterministic_given_seed() {
        let m = MlpModel::init(6, &[5, 4], 0.4, 3).unwrap();
        let x = [0.1, -0.4, 0.9, 1.5, -2.0, 0.3];
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            m.forward(&x, Mode::Train(&mut rng)).unwrap().0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = MlpModel::zeros(3, &[2], 0.0).unwrap();
        assert!(matches!(m.forward(&[1.0, 2.0], Mode::Infer), Err(Error::Dimension { .. })));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut m = MlpModel::zeros(1, &[1], 0.0).unwrap();
        m.layers_mut()[0].weights[[0, 0]] = f64::MAX;
        let err = m.forward(&[f64::MAX], Mode::Infer).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn zero_model_output_bias_gradient() {
        let m = MlpModel::zeros(3, &[4, 2], 0.0).unwrap();
        let (_, cache) = m.forward(&[0.3, 0.2, 0.1], Mode::Infer).unwrap();
        let g1 = m.backward(&cache, &[1]).unwrap();
        assert_eq!(g1.layers[2].bias, array![0.5, -0.5]);
        let g0 = m.backward(&cache, &[0]).unwrap();
        assert_eq!(g0.layers[2].bias, array![-0.5, 0.5]);
    }

    #[test]
    fn masked_input_has_zero_gradient() {
        // Single input feature; when dropout zeroes it every first-layer weight is dead.
        let m = MlpModel::init(1, &[3], 0.5, 0).unwrap();
        let mut seed = 0;
        loop {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, cache) = m.forward(&[2.0], Mode::Train(&mut rng)).unwrap();
            if cache.masks[0].as_ref().unwrap()[[0, 0]] == 0.0 {
                let g = m.backward(&cache, &[1]).unwrap();
                assert!(g.layers[0].weights.iter().all(|&v| v == 0.0));
                break;
            }
            seed += 1;
        }
    }

    #[test]
    fn batch_backward_sums_examples() {
        let m = MlpModel::init(4, &[3, 3], 0.0, 5).unwrap();
        let x = array![[0.1, 0.2, -0.3, 0.4], [1.0, -1.0, 0.5, 0.0]];
        let cache = m.forward_batch(x.view(), Mode::Infer).unwrap();
        let both = m.backward(&cache, &[0, 1]).unwrap();
        let mut sum = Gradients::zeros_like(&m);
        for (i, label) in [0u8, 1].into_iter().enumerate() {
            let (_, c) = m.forward(x.row(i).as_slice().unwrap(), Mode::Infer).unwrap();
            sum.add_assign(&m.backward(&c, &[label]).unwrap());
        }
        for (a, b) in both.flatten().iter().zip(sum.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = cache.probs.row(1).to_vec();
        assert!(cross_entropy(&p, 1).unwrap() > 0.0);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let m = MlpModel::init(8, &[6, 5], 0.4, 2).unwrap();
        let x: Vec<f64> = (0..8).map(|i| 0.25 * i as f64 - 0.7).collect();
        let (_, reference) = m.forward(&x, Mode::Infer).unwrap();
        // Layer-0 dropout acts on the features themselves; average the masked inputs.
        let draws = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut acc = Array2::<f64>::zeros((1, 8));
        for _ in 0..draws {
            let (_, c) = m.forward(&x, Mode::Train(&mut rng)).unwrap();
            acc += &c.inputs[0];
        }
        acc /= draws as f64;
        for (a, b) in acc.iter().zip(reference.inputs[0].iter()) {
            if b.abs() > 1e-9 {
                assert!(((a - b) / b).abs() < 0.02, "{a} vs {b}");
            }
        }
    }
}
