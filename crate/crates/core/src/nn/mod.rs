//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Batches are row-major `(samples, features)` matrices. Layer `l` holds an
//! `(in, out)` weight matrix so a forward step is `x · W + b`.

mod optimum;
mod train;

pub use optimum::{
    bce_domain_loss, js_divergence, js_objective_check, optimal_discriminator, ToyDistribution,
    PROB_EPS,
};
pub use train::{
    discriminator_loss, discriminator_step, train_adversarial, train_source, AdversarialOutcome,
    EpochLosses, SourceModel, TrainConfig,
};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Linear,
    Sigmoid,
    Softmax,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// What to differentiate in [`Mlp::backward`].
#[derive(Debug, Clone, Copy)]
pub enum Loss<'a> {
    /// The linear functional `sum(upstream ∘ output)`. Its gradient with respect to the
    /// network output is `upstream` itself, so this is how an outer network feeds its
    /// input gradient back into an inner one.
    Upstream(&'a Array2<f64>),
    /// Mean softmax cross entropy against class indices. Softmax head only.
    SoftmaxCrossEntropy(&'a [usize]),
    /// `sum_i w_i * BCE(sigmoid(z_i), y_i)` for a single sigmoid output.
    WeightedBce {
        targets: &'a [f64],
        weights: &'a [f64],
    },
}

/// Per-layer parameter gradients plus the gradient with respect to the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub input: Array2<f64>,
}

impl Gradients {
    /// Parameter gradients in the same order as [`Mlp::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

/// Activations recorded by a forward pass. `layer_inputs[l]` is what layer `l` consumed.
struct Trace {
    layer_inputs: Vec<Array2<f64>>,
    pre_output: Array2<f64>,
    output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "NetFile", try_from = "NetFile")]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    hidden: Activation,
    head: Head,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        head: Head,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden, head)?;
        for w in &mut net.weights {
            let (fan_in, fan_out) = w.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, head: Head) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!(
                "layer sizes must list at least two positive sizes, got {sizes:?}"
            )));
        }
        let weights = sizes.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect();
        let biases = sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        let net = Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            hidden,
            head,
        };
        net.check_head()?;
        Ok(net)
    }

    pub fn from_parts(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        hidden: Activation,
        head: Head,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Shape("need one bias vector per weight matrix".into()));
        }
        let mut sizes = vec![weights[0].nrows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != *sizes.last().unwrap() || w.ncols() != b.len() {
                return Err(Error::Shape(format!(
                    "layer {l}: weight {:?} does not chain with bias {}",
                    w.dim(),
                    b.len()
                )));
            }
            sizes.push(w.ncols());
        }
        let net = Self {
            sizes,
            weights,
            biases,
            hidden,
            head,
        };
        net.check_head()?;
        net.check_finite()?;
        Ok(net)
    }

    fn check_head(&self) -> Result<()> {
        if self.head == Head::Sigmoid && self.output_dim() != 1 {
            return Err(Error::Shape("sigmoid head must have a single output".into()));
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if !w.iter().chain(b.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn hidden(&self) -> Activation {
        self.hidden
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Weights then biases per layer, row-major.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|v| *v = it.next().unwrap());
            b.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        self.check_finite()
    }

    fn check_batch(&self, batch: &Array2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn apply_head(&self, mut z: Array2<f64>) -> Array2<f64> {
        match self.head {
            Head::Linear => {}
            Head::Sigmoid => z.mapv_inplace(sigmoid),
            Head::Softmax => {
                for mut row in z.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|v| v / sum);
                }
            }
        }
        z
    }

    fn trace(&self, batch: &Array2<f64>) -> Result<Trace> {
        self.check_batch(batch)?;
        let last = self.weights.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.weights.len());
        let mut a = batch.clone();
        for l in 0..last {
            let mut z = a.dot(&self.weights[l]) + &self.biases[l];
            z.mapv_inplace(|v| self.hidden.apply(v));
            layer_inputs.push(a);
            a = z;
        }
        let pre_output = a.dot(&self.weights[last]) + &self.biases[last];
        layer_inputs.push(a);
        let output = self.apply_head(pre_output.clone());
        Ok(Trace {
            layer_inputs,
            pre_output,
            output,
        })
    }

    pub fn forward(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.trace(batch)?.output)
    }

    fn check_loss(&self, rows: usize, loss: &Loss<'_>) -> Result<()> {
        match *loss {
            Loss::Upstream(u) => {
                if u.dim() != (rows, self.output_dim()) {
                    return Err(Error::Shape(format!(
                        "upstream gradient {:?} does not match output ({rows}, {})",
                        u.dim(),
                        self.output_dim()
                    )));
                }
            }
            Loss::SoftmaxCrossEntropy(labels) => {
                if self.head != Head::Softmax {
                    return Err(Error::Shape("cross entropy needs a softmax head".into()));
                }
                if labels.len() != rows {
                    return Err(Error::Shape(format!(
                        "{} labels for {rows} rows",
                        labels.len()
                    )));
                }
                if let Some(bad) = labels.iter().find(|&&y| y >= self.output_dim()) {
                    return Err(Error::Shape(format!(
                        "label index {bad} out of range for {} outputs",
                        self.output_dim()
                    )));
                }
            }
            Loss::WeightedBce { targets, weights } => {
                if self.head != Head::Sigmoid {
                    return Err(Error::Shape("binary cross entropy needs a sigmoid head".into()));
                }
                if targets.len() != rows || weights.len() != rows {
                    return Err(Error::Shape(format!(
                        "{} targets / {} weights for {rows} rows",
                        targets.len(),
                        weights.len()
                    )));
                }
            }
        }
        Ok(())
    }

    fn loss_of(trace: &Trace, loss: &Loss<'_>) -> f64 {
        match *loss {
            Loss::Upstream(u) => (u * &trace.output).sum(),
            Loss::SoftmaxCrossEntropy(labels) => {
                let n = labels.len() as f64;
                trace
                    .pre_output
                    .rows()
                    .into_iter()
                    .zip(labels)
                    .map(|(z, &y)| {
                        let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                        lse - z[y]
                    })
                    .sum::<f64>()
                    / n
            }
            Loss::WeightedBce { targets, weights } => trace
                .pre_output
                .column(0)
                .iter()
                .zip(targets.iter().zip(weights))
                .map(|(&z, (&y, &w))| w * (y * softplus(-z) + (1.0 - y) * softplus(z)))
                .sum(),
        }
    }

    /// Gradient with respect to the head's pre-activation.
    fn pre_output_grad(&self, trace: &Trace, loss: &Loss<'_>) -> Array2<f64> {
        let p = &trace.output;
        match *loss {
            Loss::Upstream(u) => match self.head {
                Head::Linear => u.clone(),
                Head::Sigmoid => {
                    let mut g = u.clone();
                    g.zip_mut_with(p, |g, &p| *g *= p * (1.0 - p));
                    g
                }
                Head::Softmax => {
                    let mut g = u.clone();
                    for (mut g_row, p_row) in g.rows_mut().into_iter().zip(p.rows()) {
                        let dot: f64 = g_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum();
                        g_row.zip_mut_with(&p_row, |g, &p| *g = p * (*g - dot));
                    }
                    g
                }
            },
            Loss::SoftmaxCrossEntropy(labels) => {
                let n = labels.len() as f64;
                let mut g = p.clone();
                for (mut row, &y) in g.rows_mut().into_iter().zip(labels) {
                    row[y] -= 1.0;
                    row.mapv_inplace(|v| v / n);
                }
                g
            }
            Loss::WeightedBce { targets, weights } => {
                let mut g = p.clone();
                for ((v, &y), &w) in g.column_mut(0).iter_mut().zip(targets).zip(weights) {
                    *v = w * (*v - y);
                }
                g
            }
        }
    }

    pub fn loss(&self, batch: &Array2<f64>, loss: &Loss<'_>) -> Result<f64> {
        self.check_loss(batch.nrows(), loss)?;
        Ok(Self::loss_of(&self.trace(batch)?, loss))
    }

    /// Loss value and its gradients with respect to every parameter and the input.
    pub fn backward(&self, batch: &Array2<f64>, loss: &Loss<'_>) -> Result<(f64, Gradients)> {
        self.check_loss(batch.nrows(), loss)?;
        let trace = self.trace(batch)?;
        let value = Self::loss_of(&trace, loss);

        let layers = self.weights.len();
        let mut d_weights = vec![Array2::zeros((0, 0)); layers];
        let mut d_biases = vec![Array1::zeros(0); layers];
        let mut dz = self.pre_output_grad(&trace, loss);
        let mut d_input = Array2::zeros((0, 0));
        for l in (0..layers).rev() {
            let a = &trace.layer_inputs[l];
            d_weights[l] = a.t().dot(&dz);
            d_biases[l] = dz.sum_axis(Axis(0));
            let da = dz.dot(&self.weights[l].t());
            if l == 0 {
                d_input = da;
            } else {
                let hidden = self.hidden;
                dz = da;
                dz.zip_mut_with(a, |g, &act| *g *= hidden.derivative_from_output(act));
            }
        }
        Ok((
            value,
            Gradients {
                weights: d_weights,
                biases: d_biases,
                input: d_input,
            },
        ))
    }

    /// Plain gradient descent step. Fails if any parameter becomes non-finite.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) -> Result<()> {
        if grads.weights.len() != self.weights.len() {
            return Err(Error::Shape("gradient layer count mismatch".into()));
        }
        for (l, (w, g)) in self.weights.iter_mut().zip(&grads.weights).enumerate() {
            if w.dim() != g.dim() || self.biases[l].len() != grads.biases[l].len() {
                return Err(Error::Shape(format!("gradient shape mismatch in layer {l}")));
            }
            w.scaled_add(-learning_rate, g);
            self.biases[l].scaled_add(-learning_rate, &grads.biases[l]);
        }
        self.check_finite()
    }
}

#[derive(Serialize, Deserialize)]
struct NetFile {
    layer_sizes: Vec<usize>,
    hidden: Activation,
    head: Head,
    params: Vec<f64>,
}

impl From<Mlp> for NetFile {
    fn from(net: Mlp) -> Self {
        NetFile {
            params: net.params_flat(),
            layer_sizes: net.sizes,
            hidden: net.hidden,
            head: net.head,
        }
    }
}

impl TryFrom<NetFile> for Mlp {
    type Error = Error;

    fn try_from(file: NetFile) -> Result<Self> {
        let mut net = Mlp::zeros(&file.layer_sizes, file.hidden, file.head)?;
        net.set_params_flat(&file.params)?;
        Ok(net)
    }
}
