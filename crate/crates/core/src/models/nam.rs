use crate::error::{Error, Result};
use crate::models::params::{fnv1a, ParamVector};
use crate::models::{check_batch, softmax_ce_delta, uniform_init, Backward, Classifier};
use crate::numkit::{self, Matrix, Rng};

/// How per-feature contributions are read off a NAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContributionMode {
    /// `subnet_j(x_j)` at the predicted class. Sums (with the bias) to the logit.
    Value,
    /// `∂ logit_pred / ∂ x_j`.
    #[default]
    Gradient,
}

impl std::str::FromStr for ContributionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "value" => Ok(Self::Value),
            "gradient" => Ok(Self::Gradient),
            other => Err(Error::Config(format!("unknown contribution mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ContributionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Value => "value",
            Self::Gradient => "gradient",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Slot {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

/// Multi-class neural additive model:
/// `logits(x) = bias + Σ_j subnet_j(x_j)` with one independent
/// `1 → hidden.. → K` ReLU network per input feature.
///
/// Parameter layout: subnet 0, subnet 1, …, subnet d−1, then the global
/// bias. Within a subnet each layer stores weights then bias.
#[derive(Debug, Clone, PartialEq)]
pub struct NamModel {
    features: usize,
    classes: usize,
    subnet_dims: Vec<usize>,
    slots: Vec<Slot>,
    subnet_len: usize,
    params: Vec<f64>,
}

impl NamModel {
    pub fn zeros(features: usize, classes: usize, hidden: &[usize]) -> Result<Self> {
        if features == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::Config(format!(
                "NAM needs positive sizes; got d={features}, K={classes}, hidden={hidden:?}"
            )));
        }
        let mut subnet_dims = vec![1];
        subnet_dims.extend_from_slice(hidden);
        subnet_dims.push(classes);
        let mut slots = Vec::new();
        let mut off = 0;
        for pair in subnet_dims.windows(2) {
            slots.push(Slot {
                fan_in: pair[0],
                fan_out: pair[1],
                w: off,
                b: off + pair[0] * pair[1],
            });
            off += pair[0] * pair[1] + pair[1];
        }
        Ok(Self {
            features,
            classes,
            subnet_dims,
            slots,
            subnet_len: off,
            params: vec![0.0; features * off + classes],
        })
    }

    /// Uniform fan-in init; each subnet's output layer is shrunk by `1/√d`
    /// so the summed logits start at unit scale.
    pub fn init(features: usize, classes: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(features, classes, hidden)?;
        let last = m.slots.len() - 1;
        let shrink = 1.0 / (features as f64).sqrt();
        for j in 0..features {
            let base = j * m.subnet_len;
            for (l, s) in m.slots.clone().iter().enumerate() {
                let scale = if l == last { shrink } else { 1.0 };
                uniform_init(
                    &mut m.params[base + s.w..base + s.b + s.fan_out],
                    s.fan_in,
                    scale,
                    rng,
                );
            }
        }
        Ok(m)
    }

    pub fn feature_count(&self) -> usize {
        self.features
    }

    pub fn subnet_dims(&self) -> &[usize] {
        &self.subnet_dims
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.features * self.subnet_len..]
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        let start = self.features * self.subnet_len;
        &mut self.params[start..]
    }

    pub fn subnet_params(&self, j: usize) -> &[f64] {
        &self.params[j * self.subnet_len..(j + 1) * self.subnet_len]
    }

    pub fn subnet_params_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.params[j * self.subnet_len..(j + 1) * self.subnet_len]
    }

    /// Evaluates subnet `j` alone on a column of feature values; `n×K`.
    pub fn subnet_output(&self, j: usize, xs: &[f64]) -> Result<Matrix> {
        if j >= self.features {
            return Err(Error::Index {
                what: "NAM feature",
                index: j,
                bound: self.features,
            });
        }
        let mut acts = self.subnet_cached(j, xs);
        Ok(Matrix::from_parts(xs.len(), self.classes, acts.pop().unwrap()))
    }

    fn subnet_cached(&self, j: usize, xs: &[f64]) -> Vec<Vec<f64>> {
        let n = xs.len();
        let p = self.subnet_params(j);
        let last = self.slots.len() - 1;
        let mut acts = Vec::with_capacity(self.slots.len() + 1);
        acts.push(xs.to_vec());
        for (l, s) in self.slots.iter().enumerate() {
            let mut out = vec![0.0; n * s.fan_out];
            numkit::affine_into(&acts[l], n, s.fan_in, &p[s.w..s.b], s.fan_out, &p[s.b..s.b + s.fan_out], &mut out);
            if l < last {
                numkit::relu_in_place(&mut out);
            }
            acts.push(out);
        }
        acts
    }

    /// Backpropagates `delta` (n×K) through subnet `j`, accumulating its
    /// parameter gradient into `grads` and returning `∂/∂x_j` when asked.
    fn subnet_backprop(
        &self,
        j: usize,
        acts: &[Vec<f64>],
        delta: &[f64],
        grads: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let n = acts[0].len();
        let p = self.subnet_params(j);
        let mut grads = grads;
        let mut delta = delta.to_vec();
        for l in (0..self.slots.len()).rev() {
            let s = self.slots[l];
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = g[s.w..s.b + s.fan_out].split_at_mut(s.fan_in * s.fan_out);
                numkit::accumulate_affine_grads(&acts[l], n, s.fan_in, &delta, s.fan_out, gw, gb);
            }
            if l == 0 && !want_input {
                return None;
            }
            let mut prev = vec![0.0; n * s.fan_in];
            numkit::backprop_input(&delta, n, s.fan_out, &p[s.w..s.b], s.fan_in, &mut prev);
            if l > 0 {
                for (v, a) in prev.iter_mut().zip(&acts[l]) {
                    if *a <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Some(delta)
    }

    fn column(batch: &Matrix, j: usize) -> Vec<f64> {
        batch.iter_rows().map(|r| r[j]).collect()
    }

    fn logits_and_cache(&self, batch: &Matrix) -> Result<Matrix> {
        check_batch("nam_forward", batch, self.features)?;
        let n = batch.rows();
        let k = self.classes;
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(self.bias());
        }
        for j in 0..self.features {
            let acts = self.subnet_cached(j, &Self::column(batch, j));
            for (o, v) in out.iter_mut().zip(acts.last().unwrap()) {
                *o += v;
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite NAM logits".into()));
        }
        Ok(Matrix::from_parts(n, k, out))
    }

    fn backprop_all(
        &self,
        batch: &Matrix,
        delta: &Matrix,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Vec<f64>>, Option<Matrix>) {
        let n = batch.rows();
        let d = self.features;
        let mut grads = want_params.then(|| vec![0.0; self.params.len()]);
        let mut dx = want_input.then(|| vec![0.0; n * d]);
        for j in 0..d {
            let acts = self.subnet_cached(j, &Self::column(batch, j));
            let block = grads
                .as_mut()
                .map(|g| &mut g[j * self.subnet_len..(j + 1) * self.subnet_len]);
            if let Some(col) = self.subnet_backprop(j, &acts, delta.as_slice(), block, want_input) {
                let dx = dx.as_mut().unwrap();
                for (i, v) in col.into_iter().enumerate() {
                    dx[i * d + j] = v;
                }
            }
        }
        if let Some(g) = grads.as_mut() {
            let gb = &mut g[d * self.subnet_len..];
            for row in delta.iter_rows() {
                for (b, v) in gb.iter_mut().zip(row) {
                    *b += v;
                }
            }
        }
        (grads, dx.map(|v| Matrix::from_parts(n, d, v)))
    }

    /// Per-feature contribution scores for each row's predicted class.
    pub fn contributions(&self, batch: &Matrix, mode: ContributionMode) -> Result<Matrix> {
        let logits = self.logits_and_cache(batch)?;
        let preds = logits.argmax_rows();
        let n = batch.rows();
        let d = self.features;
        match mode {
            ContributionMode::Value => {
                let mut out = vec![0.0; n * d];
                for j in 0..d {
                    let acts = self.subnet_cached(j, &Self::column(batch, j));
                    let o = acts.last().unwrap();
                    for (i, &c) in preds.iter().enumerate() {
                        out[i * d + j] = o[i * self.classes + c];
                    }
                }
                Ok(Matrix::from_parts(n, d, out))
            }
            ContributionMode::Gradient => {
                let mut onehot = Matrix::zeros(n, self.classes);
                for (i, &c) in preds.iter().enumerate() {
                    onehot.data_mut()[i * self.classes + c] = 1.0;
                }
                self.input_vjp(batch, &onehot)
            }
        }
    }
}

impl Classifier for NamModel {
    fn input_dim(&self) -> usize {
        self.features
    }

    fn class_count(&self) -> usize {
        self.classes
    }

    fn layout_hash(&self) -> u64 {
        let mut words = vec![self.features];
        words.extend_from_slice(&self.subnet_dims);
        fnv1a(b"nam", &words)
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        self.logits_and_cache(batch)
    }

    fn input_vjp(&self, batch: &Matrix, cotangent: &Matrix) -> Result<Matrix> {
        check_batch("nam_input_vjp", batch, self.features)?;
        if cotangent.shape() != (batch.rows(), self.classes) {
            return Err(Error::dims(
                "nam_input_vjp",
                format!("cotangent {}", cotangent.shape_str()),
                format!("{}x{}", batch.rows(), self.classes),
            ));
        }
        let (_, dx) = self.backprop_all(batch, cotangent, false, true);
        let dx = dx.unwrap();
        Matrix::new(dx.rows(), dx.cols(), dx.into_vec())
            .map_err(|_| Error::Divergence("non-finite input gradient".into()))
    }

    fn loss_and_param_grads(&self, batch: &Matrix, labels: &[usize]) -> Result<(f64, ParamVector)> {
        let logits = self.logits_and_cache(batch)?;
        let (loss, delta) = softmax_ce_delta(&logits, labels)?;
        let (g, _) = self.backprop_all(batch, &delta, true, false);
        Ok((loss, ParamVector::new(g.unwrap(), self.layout_hash())))
    }

    fn backward(&self, batch: &Matrix, labels: &[usize]) -> Result<Backward> {
        let logits = self.logits_and_cache(batch)?;
        let (loss, delta) = softmax_ce_delta(&logits, labels)?;
        let (g, dx) = self.backprop_all(batch, &delta, true, true);
        Ok(Backward {
            loss,
            param_grads: ParamVector::new(g.unwrap(), self.layout_hash()),
            input_grads: dx.unwrap(),
        })
    }
}
