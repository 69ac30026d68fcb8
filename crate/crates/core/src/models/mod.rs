//! Classifiers: the MLP backbone, the multi-class neural additive model, and
//! Monte Carlo dropout on top of the backbone.
//!
//! Both model kinds keep their parameters in one flat buffer whose order is
//! the serialization order, so flatten/unflatten is a copy and an SGD step is
//! an axpy over the buffer.

mod mlp;
mod nam;
mod params;

pub use mlp::{mc_dropout_predict, DropoutMasks, MlpModel};
pub use nam::{ContributionMode, NamModel};
pub use params::{ParamVector, CHECKPOINT_MAGIC};

use crate::error::{Error, Result};
use crate::numkit::{self, Matrix};

/// Result of a full backward pass on mean cross-entropy.
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub param_grads: ParamVector,
    pub input_grads: Matrix,
}

/// Common surface the federated loop, conformal wrapper and interpretation
/// code rely on.
pub trait Classifier: Clone + Send + Sync {
    fn input_dim(&self) -> usize;
    fn class_count(&self) -> usize;
    fn layout_hash(&self) -> u64;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn forward(&self, batch: &Matrix) -> Result<Matrix>;

    /// Vector-Jacobian product of the logits with respect to the input:
    /// `out[i, j] = Σ_c cotangent[i, c] · ∂logit[i, c] / ∂x[i, j]`.
    fn input_vjp(&self, batch: &Matrix, cotangent: &Matrix) -> Result<Matrix>;

    /// Mean cross-entropy and its parameter gradient (input gradient skipped).
    fn loss_and_param_grads(&self, batch: &Matrix, labels: &[usize]) -> Result<(f64, ParamVector)>;

    /// Loss, parameter gradient and input gradient of mean cross-entropy.
    fn backward(&self, batch: &Matrix, labels: &[usize]) -> Result<Backward>;

    fn param_count(&self) -> usize {
        self.params().len()
    }

    fn flatten(&self) -> ParamVector {
        ParamVector::new(self.params().to_vec(), self.layout_hash())
    }

    fn unflatten(&mut self, params: &ParamVector) -> Result<()> {
        if params.layout_hash() != self.layout_hash() || params.len() != self.param_count() {
            return Err(Error::Consistency(format!(
                "parameter layout {:016x}/{} does not match model {:016x}/{}",
                params.layout_hash(),
                params.len(),
                self.layout_hash(),
                self.param_count()
            )));
        }
        self.params_mut().copy_from_slice(params.values());
        Ok(())
    }

    fn probabilities(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(numkit::softmax(&self.forward(batch)?))
    }

    fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        Ok(self.forward(batch)?.argmax_rows())
    }

    fn loss(&self, batch: &Matrix, labels: &[usize]) -> Result<f64> {
        let loss = numkit::cross_entropy(&self.probabilities(batch)?, labels)?;
        check_loss(loss)
    }

    /// Loss and `∂loss/∂X` without forming parameter gradients.
    fn input_gradients(&self, batch: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        let logits = self.forward(batch)?;
        let (loss, delta) = softmax_ce_delta(&logits, labels)?;
        Ok((loss, self.input_vjp(batch, &delta)?))
    }

    /// Argmax pseudo-labels together with the loss and input gradient they
    /// induce.
    fn pseudo_labelled_input_gradients(&self, batch: &Matrix) -> Result<(Vec<usize>, f64, Matrix)> {
        let labels = self.predict(batch)?;
        let (loss, grads) = self.input_gradients(batch, &labels)?;
        Ok((labels, loss, grads))
    }

    /// `params ← params − lr · grads`.
    fn sgd_step(&mut self, grads: &ParamVector, lr: f64) -> Result<()> {
        if grads.layout_hash() != self.layout_hash() {
            return Err(Error::Consistency("gradient layout does not match model".into()));
        }
        for (p, g) in self.params_mut().iter_mut().zip(grads.values()) {
            *p -= lr * g;
        }
        Ok(())
    }

    fn accuracy(&self, batch: &Matrix, labels: &[usize]) -> Result<f64> {
        let preds = self.predict(batch)?;
        let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

pub(crate) fn check_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Divergence(format!("loss evaluated to {loss}")))
    }
}

/// Mean cross-entropy of `softmax(logits)` and its gradient with respect to
/// the logits, `(p − onehot(y)) / n`.
pub(crate) fn softmax_ce_delta(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let probs = numkit::softmax(logits);
    let loss = check_loss(numkit::cross_entropy(&probs, labels)?)?;
    let n = labels.len() as f64;
    let k = probs.cols();
    let mut delta = probs.into_vec();
    for (i, &y) in labels.iter().enumerate() {
        delta[i * k + y] -= 1.0;
    }
    for v in &mut delta {
        *v /= n;
    }
    Ok((loss, Matrix::from_parts(labels.len(), k, delta)))
}

pub(crate) fn check_batch(op: &'static str, batch: &Matrix, input_dim: usize) -> Result<()> {
    if batch.cols() != input_dim {
        return Err(Error::dims(
            op,
            format!("batch {}", batch.shape_str()),
            format!("model input dim {input_dim}"),
        ));
    }
    Ok(())
}

/// PyTorch-style default init: `U(-1/√fan_in, 1/√fan_in)` for weights and biases.
pub(crate) fn uniform_init(buf: &mut [f64], fan_in: usize, scale: f64, rng: &mut numkit::Rng) {
    let bound = scale / (fan_in as f64).sqrt();
    for v in buf {
        *v = rng.uniform_range(-bound, bound);
    }
}
