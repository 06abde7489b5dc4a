//! Small encoder/classifier pair producing features, logits and
//! probabilities for a batch, with inspectable class weights, a classical
//! momentum optimizer, and the frozen-encoder diagnostic probe.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};
use crate::training::cross_entropy;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Network sizes. The defaults are the smallest at which cluster geometry
/// on the planar benchmark is nontrivial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { input_dim: 2, hidden_dim: 64, feature_dim: 16, num_classes: 4 }
    }
}

/// Fully-connected layer with weights stored `[out x in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Scalar> LinearLayer<F> {
    /// Uniform init in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: Tensor::rand_uniform(vec![out_dim, in_dim], -bound, bound, rng),
            bias: Tensor::rand_uniform(vec![out_dim], -bound, bound, rng),
        }
    }
}

/// Encoder (three linear layers, tanh on the two hidden activations) plus a
/// bias-free linear classifier whose rows are the class weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub encoder: Vec<LinearLayer<F>>,
    pub classifier: Tensor<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelConfig { input_dim, hidden_dim, feature_dim, num_classes } = config;
        let encoder = vec![
            LinearLayer::init(input_dim, hidden_dim, &mut rng),
            LinearLayer::init(hidden_dim, hidden_dim, &mut rng),
            LinearLayer::init(hidden_dim, feature_dim, &mut rng),
        ];
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let classifier = Tensor::rand_uniform(vec![num_classes, feature_dim], -bound, bound, &mut rng);
        Self { config, encoder, classifier }
    }

    /// Parameters in the fixed order the optimizer uses: encoder weights and
    /// biases layer by layer, then the class weights.
    pub fn parameters(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::with_capacity(self.encoder.len() * 2 + 1);
        for layer in &self.encoder {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.classifier);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::with_capacity(self.encoder.len() * 2 + 1);
        for layer in &mut self.encoder {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.classifier);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.parameters().iter().all(|t| t.is_finite())
    }

    /// Records all parameters on a tape once; forward passes for any number
    /// of views then share the same parameter variables, so gradients
    /// accumulate correctly.
    pub fn bind(&self, tape: &Tape<F>) -> ModelBinding {
        let encoder = self
            .encoder
            .iter()
            .map(|l| BoundLinear { weight: tape.param(&l.weight), bias: tape.param(&l.bias) })
            .collect();
        ModelBinding { encoder, classifier: tape.param(&self.classifier) }
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

/// Tape-bound model parameters.
pub struct ModelBinding {
    pub encoder: Vec<BoundLinear>,
    pub classifier: Var,
}

/// Features, logits (`features · Wᵀ`) and row-softmax probabilities for one
/// batch.
#[derive(Clone, Copy)]
pub struct ModelOutputs {
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
}

impl ModelBinding {
    /// Parameter variables in the same order as `Model::parameters`.
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.encoder.len() * 2 + 1);
        for l in &self.encoder {
            out.push(l.weight);
            out.push(l.bias);
        }
        out.push(self.classifier);
        out
    }

    pub fn encode<F: Scalar>(&self, tape: &Tape<F>, batch: Var) -> Result<Var> {
        let mut x = batch;
        let last = self.encoder.len() - 1;
        for (i, layer) in self.encoder.iter().enumerate() {
            let wt = tape.transpose(layer.weight)?;
            x = tape.add_row_vec(tape.matmul(x, wt)?, layer.bias)?;
            if i < last {
                x = tape.tanh(x);
            }
        }
        Ok(x)
    }

    pub fn forward<F: Scalar>(&self, tape: &Tape<F>, batch: &Tensor<F>) -> Result<ModelOutputs> {
        let in_dim = tape.shape(self.encoder[0].weight)[1];
        if batch.rank() != 2 || batch.cols() != in_dim {
            return Err(ModelError::Numerics(NumericsError::Dimension(format!(
                "batch shape {:?}, expected [N x {in_dim}]",
                batch.shape()
            ))));
        }
        let x = tape.constant(batch);
        let features = self.encode(tape, x)?;
        let logits = tape.matmul(features, tape.transpose(self.classifier)?)?;
        let probs = tape.softmax_rows(logits)?;
        Ok(ModelOutputs { features, logits, probs })
    }
}

/// Classical momentum update: `v <- mu*v + g + wd*theta; theta <- theta - lr*v`.
pub struct SgdMomentum<F> {
    pub lr: F,
    pub momentum: F,
    pub weight_decay: F,
    velocity: Vec<Vec<F>>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(lr: F, momentum: F, weight_decay: F) -> Self {
        Self { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[Tensor<F>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(ModelError::Contract(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![F::zero(); p.numel()]).collect();
        }
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if param.shape() != grad.shape() {
                return Err(ModelError::Contract(format!(
                    "parameter shape {:?} vs gradient shape {:?}",
                    param.shape(),
                    grad.shape()
                )));
            }
            let theta = param.data_mut();
            for i in 0..theta.len() {
                vel[i] = self.momentum * vel[i] + grad.data()[i] + self.weight_decay * theta[i];
                theta[i] = theta[i] - self.lr * vel[i];
            }
        }
        Ok(())
    }
}

/// Frozen-encoder diagnostic probe: keeps the encoder untouched, trains a
/// fresh classifier on the frozen features with ground-truth labels
/// (an evaluation-only privilege), and reports the accuracy that classifier
/// reaches. The gap between this and the actual accuracy measures how far
/// the features sit from the class weights actually in use.
pub fn freeze_encoder_retrain_classifier<F: Scalar>(
    model: &Model<F>,
    points: &Tensor<F>,
    labels: &[usize],
    steps: usize,
    lr: F,
    seed: u64,
) -> Result<F> {
    if points.rows() == 0 {
        return Err(ModelError::Contract("empty probe dataset".into()));
    }
    if points.rows() != labels.len() {
        return Err(ModelError::Contract(format!(
            "{} points vs {} labels",
            points.rows(),
            labels.len()
        )));
    }

    // Frozen features: one pass through the untouched encoder.
    let frozen = {
        let tape: Tape<F> = Tape::new();
        let binding = model.bind(&tape);
        let outputs = binding.forward(&tape, points)?;
        tape.value(outputs.features)
    };

    let classes = model.config.num_classes;
    let dim = model.config.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (dim as f64).sqrt();
    let mut weights: Tensor<F> = Tensor::rand_uniform(vec![classes, dim], -bound, bound, &mut rng);

    let mut optimizer = SgdMomentum::new(lr, F::lit(0.9), F::zero());
    for _ in 0..steps {
        let tape: Tape<F> = Tape::new();
        let w = tape.param(&weights);
        let x = tape.constant(&frozen);
        let logits = tape.matmul(x, tape.transpose(w)?)?;
        let probs = tape.softmax_rows(logits)?;
        let loss = cross_entropy(&tape, probs, labels)
            .map_err(|e| ModelError::Contract(e.to_string()))?;
        tape.backward(loss)?;
        let grad = tape.grad(w).expect("classifier participates in the loss");
        optimizer.step(&mut [&mut weights], &[grad])?;
    }

    // Accuracy of the retrained classifier on the same frozen features.
    let logits = frozen.matmul(&transpose_host(&weights))?;
    let predictions = logits.argmax_rows();
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(F::lit(correct as f64 / labels.len() as f64))
}

fn transpose_host<F: Scalar>(t: &Tensor<F>) -> Tensor<F> {
    let (n, m) = (t.rows(), t.cols());
    let mut out = vec![F::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = t.at(i, j);
        }
    }
    Tensor::matrix(m, n, out).expect("transpose preserves element count")
}
