use crate::error::{Error, Result};
use crate::models::params::{fnv1a, ParamVector};
use crate::models::{check_batch, softmax_ce_delta, uniform_init, Backward, Classifier};
use crate::numkit::{self, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

/// Fully connected ReLU network. Layer `l` maps `dims[l] → dims[l+1]`; the
/// last layer is linear and produces logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    params: Vec<f64>,
    slots: Vec<LayerSlot>,
}

impl MlpModel {
    /// All-zero network with the given layer widths `[d, hidden.., K]`.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "MLP needs at least input and output widths, all positive; got {dims:?}"
            )));
        }
        let mut slots = Vec::with_capacity(dims.len() - 1);
        let mut off = 0;
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            slots.push(LayerSlot {
                fan_in,
                fan_out,
                w: off,
                b: off + fan_in * fan_out,
            });
            off += fan_in * fan_out + fan_out;
        }
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; off],
            slots,
        })
    }

    pub fn init(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(dims)?;
        for s in m.slots.clone() {
            let end = s.b + s.fan_out;
            uniform_init(&mut m.params[s.w..end], s.fan_in, 1.0, rng);
        }
        Ok(m)
    }

    /// Builds a network from explicit `(weights d_l×d_{l+1}, bias)` pairs.
    pub fn from_layers(layers: &[(Matrix, Vec<f64>)]) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Config("MLP needs at least one layer".into()));
        };
        let mut dims = vec![first.0.rows()];
        for (i, (w, b)) in layers.iter().enumerate() {
            if w.rows() != *dims.last().unwrap() || b.len() != w.cols() {
                return Err(Error::dims(
                    "MlpModel::from_layers",
                    format!("layer {i} weights {} bias {}", w.shape_str(), b.len()),
                    format!("expected fan-in {}", dims.last().unwrap()),
                ));
            }
            dims.push(w.cols());
        }
        let mut m = Self::zeros(&dims)?;
        for (s, (w, b)) in m.slots.clone().iter().zip(layers) {
            m.params[s.w..s.b].copy_from_slice(w.as_slice());
            m.params[s.b..s.b + s.fan_out].copy_from_slice(b);
        }
        Ok(m)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layer_count(&self) -> usize {
        self.slots.len()
    }

    pub fn weights(&self, layer: usize) -> Matrix {
        let s = self.slots[layer];
        Matrix::from_parts(s.fan_in, s.fan_out, self.params[s.w..s.b].to_vec())
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.slots[layer];
        &self.params[s.b..s.b + s.fan_out]
    }

    /// Widths of the hidden layers (those subject to dropout).
    pub fn hidden_dims(&self) -> &[usize] {
        &self.dims[1..self.dims.len() - 1]
    }

    /// Activations per layer: `acts[0]` is the input, `acts[L]` the logits.
    fn forward_cached(&self, batch: &Matrix, masks: Option<&DropoutMasks>) -> Vec<Vec<f64>> {
        let n = batch.rows();
        let last = self.slots.len() - 1;
        let mut acts = Vec::with_capacity(self.slots.len() + 1);
        acts.push(batch.as_slice().to_vec());
        for (l, s) in self.slots.iter().enumerate() {
            let mut out = vec![0.0; n * s.fan_out];
            numkit::affine_into(
                &acts[l],
                n,
                s.fan_in,
                &self.params[s.w..s.b],
                s.fan_out,
                &self.params[s.b..s.b + s.fan_out],
                &mut out,
            );
            if l < last {
                numkit::relu_in_place(&mut out);
                if let Some(m) = masks {
                    for (v, keep) in out.iter_mut().zip(m.layers[l].as_slice()) {
                        *v *= keep;
                    }
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Propagates `delta` (∂loss/∂logits) back through the cached activations.
    fn backprop(
        &self,
        acts: &[Vec<f64>],
        n: usize,
        mut delta: Vec<f64>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let mut grads = want_params.then(|| vec![0.0; self.params.len()]);
        for l in (0..self.slots.len()).rev() {
            let s = self.slots[l];
            if let Some(g) = grads.as_mut() {
                let (gw, gb) = g[s.w..s.b + s.fan_out].split_at_mut(s.fan_in * s.fan_out);
                numkit::accumulate_affine_grads(&acts[l], n, s.fan_in, &delta, s.fan_out, gw, gb);
            }
            if l == 0 && !want_input {
                break;
            }
            let mut prev = vec![0.0; n * s.fan_in];
            numkit::backprop_input(&delta, n, s.fan_out, &self.params[s.w..s.b], s.fan_in, &mut prev);
            if l > 0 {
                for (p, a) in prev.iter_mut().zip(&acts[l]) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        (grads, want_input.then_some(delta))
    }

    fn input_gradients_from(&self, acts: &[Vec<f64>], logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        let (loss, delta) = softmax_ce_delta(logits, labels)?;
        let (_, dx) = self.backprop(acts, logits.rows(), delta.into_vec(), false, true);
        let grads = Matrix::new(logits.rows(), self.dims[0], dx.unwrap())
            .map_err(|_| Error::Divergence("non-finite input gradient".into()))?;
        Ok((loss, grads))
    }

    pub fn forward_with_masks(&self, batch: &Matrix, masks: &DropoutMasks) -> Result<Matrix> {
        check_batch("mlp_forward", batch, self.dims[0])?;
        masks.check(self, batch.rows())?;
        let mut acts = self.forward_cached(batch, Some(masks));
        let logits = acts.pop().unwrap();
        logits_matrix(batch.rows(), *self.dims.last().unwrap(), logits)
    }
}

fn logits_matrix(n: usize, k: usize, data: Vec<f64>) -> Result<Matrix> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite logits".into()));
    }
    Ok(Matrix::from_parts(n, k, data))
}

impl Classifier for MlpModel {
    fn input_dim(&self) -> usize {
        self.dims[0]
    }

    fn class_count(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn layout_hash(&self) -> u64 {
        fnv1a(b"mlp", &self.dims)
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        check_batch("mlp_forward", batch, self.dims[0])?;
        let mut acts = self.forward_cached(batch, None);
        logits_matrix(batch.rows(), self.class_count(), acts.pop().unwrap())
    }

    fn input_vjp(&self, batch: &Matrix, cotangent: &Matrix) -> Result<Matrix> {
        check_batch("mlp_input_vjp", batch, self.dims[0])?;
        if cotangent.shape() != (batch.rows(), self.class_count()) {
            return Err(Error::dims(
                "mlp_input_vjp",
                format!("cotangent {}", cotangent.shape_str()),
                format!("{}x{}", batch.rows(), self.class_count()),
            ));
        }
        let acts = self.forward_cached(batch, None);
        let (_, dx) = self.backprop(&acts, batch.rows(), cotangent.as_slice().to_vec(), false, true);
        Matrix::new(batch.rows(), self.dims[0], dx.unwrap())
            .map_err(|_| Error::Divergence("non-finite input gradient".into()))
    }

    fn input_gradients(&self, batch: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        check_batch("mlp_input_gradients", batch, self.dims[0])?;
        let mut acts = self.forward_cached(batch, None);
        let logits = logits_matrix(batch.rows(), self.class_count(), acts.pop().unwrap())?;
        self.input_gradients_from(&acts, &logits, labels)
    }

    fn pseudo_labelled_input_gradients(&self, batch: &Matrix) -> Result<(Vec<usize>, f64, Matrix)> {
        check_batch("mlp_input_gradients", batch, self.dims[0])?;
        let mut acts = self.forward_cached(batch, None);
        let logits = logits_matrix(batch.rows(), self.class_count(), acts.pop().unwrap())?;
        let labels = logits.argmax_rows();
        let (loss, grads) = self.input_gradients_from(&acts, &logits, &labels)?;
        Ok((labels, loss, grads))
    }

    fn loss_and_param_grads(&self, batch: &Matrix, labels: &[usize]) -> Result<(f64, ParamVector)> {
        check_batch("mlp_backward", batch, self.dims[0])?;
        let mut acts = self.forward_cached(batch, None);
        let logits = logits_matrix(batch.rows(), self.class_count(), acts.pop().unwrap())?;
        let (loss, delta) = softmax_ce_delta(&logits, labels)?;
        let (g, _) = self.backprop(&acts, batch.rows(), delta.into_vec(), true, false);
        Ok((loss, ParamVector::new(g.unwrap(), self.layout_hash())))
    }

    fn backward(&self, batch: &Matrix, labels: &[usize]) -> Result<Backward> {
        check_batch("mlp_backward", batch, self.dims[0])?;
        let mut acts = self.forward_cached(batch, None);
        let logits = logits_matrix(batch.rows(), self.class_count(), acts.pop().unwrap())?;
        let (loss, delta) = softmax_ce_delta(&logits, labels)?;
        let (g, dx) = self.backprop(&acts, batch.rows(), delta.into_vec(), true, true);
        Ok(Backward {
            loss,
            param_grads: ParamVector::new(g.unwrap(), self.layout_hash()),
            input_grads: Matrix::new(batch.rows(), self.dims[0], dx.unwrap())
                .map_err(|_| Error::Divergence("non-finite input gradient".into()))?,
        })
    }
}

/// Per-hidden-layer multiplicative masks: each entry is `0` (dropped) or
/// `1/(1-rate)` (kept, inverted scaling).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    layers: Vec<Matrix>,
}

impl DropoutMasks {
    pub fn from_layers(layers: Vec<Matrix>) -> Self {
        Self { layers }
    }

    /// Draw order: hidden layer, then row, then unit; one uniform per unit,
    /// dropped when `u < rate`.
    pub fn sample(model: &MlpModel, n: usize, rate: f64, rng: &mut Rng) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let layers = model
            .hidden_dims()
            .iter()
            .map(|&h| {
                let data = (0..n * h)
                    .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
                    .collect();
                Matrix::from_parts(n, h, data)
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    fn check(&self, model: &MlpModel, n: usize) -> Result<()> {
        let hidden = model.hidden_dims();
        if self.layers.len() != hidden.len()
            || self
                .layers
                .iter()
                .zip(hidden)
                .any(|(m, &h)| m.shape() != (n, h))
        {
            return Err(Error::dims(
                "dropout masks",
                format!("{} mask layers", self.layers.len()),
                format!("hidden dims {hidden:?} with {n} rows"),
            ));
        }
        Ok(())
    }
}

/// `passes` stochastic forward passes with hidden-unit dropout; returns the
/// elementwise mean and population standard deviation of the softmax outputs.
pub fn mc_dropout_predict(
    model: &MlpModel,
    batch: &Matrix,
    passes: usize,
    rate: f64,
    rng: &mut Rng,
) -> Result<(Matrix, Matrix)> {
    if passes == 0 {
        return Err(Error::Config("MC dropout needs at least one pass".into()));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    check_batch("mc_dropout_predict", batch, model.input_dim())?;
    let n = batch.rows();
    let k = model.class_count();
    let mut mean = vec![0.0; n * k];
    let mut m2 = vec![0.0; n * k];
    for pass in 0..passes {
        let masks = DropoutMasks::sample(model, n, rate, rng);
        let probs = numkit::softmax(&model.forward_with_masks(batch, &masks)?);
        let count = (pass + 1) as f64;
        for ((mu, s), &p) in mean.iter_mut().zip(m2.iter_mut()).zip(probs.as_slice()) {
            let d = p - *mu;
            *mu += d / count;
            *s += d * (p - *mu);
        }
    }
    let std = m2.iter().map(|s| (s / passes as f64).max(0.0).sqrt()).collect();
    Ok((Matrix::from_parts(n, k, mean), Matrix::from_parts(n, k, std)))
}
