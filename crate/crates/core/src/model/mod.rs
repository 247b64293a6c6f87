//! Differentiable models: logistic regression and the small CNN, with
//! first-order training/evaluation and the second-order contract used by
//! gradient inversion (see [`ig`]).

mod ig;
mod network;

pub use ig::{ig_evaluate, ig_pixel_grad, total_variation, tv_gradient, IgEval};
pub use network::{Backward, Network, ParamBlock, Trace};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, ImageDims, Shard};
use crate::error::{invalid, Error, Result};
use crate::params::ParamVector;
use crate::rng::{rng_from, Rng};

/// Rows processed per forward pass when streaming over large sets.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Logreg,
    SmallCnn,
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logreg" => Ok(Self::Logreg),
            "small-cnn" => Ok(Self::SmallCnn),
            other => Err(invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub input: ImageDims,
    pub classes: usize,
    pub feature_width: usize,
}

impl ModelSpec {
    pub fn logreg(input: ImageDims, classes: usize) -> Self {
        Self { arch: Architecture::Logreg, input, classes, feature_width: 0 }
    }

    pub fn small_cnn(input: ImageDims, classes: usize) -> Self {
        Self { arch: Architecture::SmallCnn, input, classes, feature_width: 64 }
    }

    pub fn build(&self) -> Result<Model> {
        let net = match self.arch {
            Architecture::Logreg => Network::logreg(self.input.size(), self.classes),
            Architecture::SmallCnn => Network::cnn(
                self.input.channels,
                self.input.height,
                self.input.width,
                [16, 32],
                self.feature_width,
                self.classes,
            )?,
        };
        Ok(Model { spec: *self, net })
    }
}

/// A network bound to its spec; parameters live outside, in [`ParamVector`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub net: Network,
}

impl Model {
    /// Wraps an arbitrary network (used for tiny test architectures).
    pub fn from_network(spec: ModelSpec, net: Network) -> Self {
        Self { spec, net }
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// Uniform `±1/√fan_in` initialisation for weights and biases.
    pub fn init(&self, seed: u64) -> ParamVector {
        init_network(&self.net, seed)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if batch.dims.size() != self.net.input_size() {
            return Err(Error::DimensionMismatch { expected: self.net.input_size(), actual: batch.dims.size() });
        }
        if batch.classes != self.net.outputs() {
            return Err(Error::DimensionMismatch { expected: self.net.outputs(), actual: batch.classes });
        }
        Ok(())
    }

    /// Mean cross-entropy over `batch` and its parameter gradient.
    pub fn loss_and_grad(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
        self.check_batch(batch)?;
        params.check_len(self.num_params())?;
        if let Some(block) = self.net.first_non_finite_block(params) {
            return Err(Error::NonFinite(format!("parameter block {block}")));
        }
        let n = batch.len();
        let d = batch.dims.size();
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.num_params()];
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let m = end - start;
            let trace = self.net.forward(params, &batch.inputs[start * d..end * d], m);
            let xe = softmax_xent(trace.output(), &batch.labels[start..end], self.net.outputs());
            let back = self.net.backward(params, &trace, xe.d_logits, false);
            let w = m as f64 / n as f64;
            loss += w * xe.loss;
            if start == 0 && end == n {
                grad = back.grad;
            } else {
                crate::linalg::axpy(w, &back.grad, &mut grad);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        if let Some(block) = self.net.first_non_finite_block(&grad) {
            return Err(Error::NonFinite(format!("gradient block {block}")));
        }
        Ok((loss, ParamVector(grad)))
    }

    /// `steps` SGD steps of size `lr` on mini-batches of `shard`.
    ///
    /// Mini-batches walk a seeded permutation of the shard, reshuffling once it
    /// is exhausted. A batch size covering the whole shard uses the shard in
    /// its natural order, so one such step is exactly `θ − lr·∇F(θ)`.
    pub fn local_train(
        &self,
        params: &ParamVector,
        shard: Shard<'_>,
        lr: f64,
        steps: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<ParamVector> {
        if shard.is_empty() {
            return Err(Error::Empty("shard"));
        }
        if !(lr >= 0.0) {
            return Err(invalid(format!("learning rate must be non-negative, got {lr}")));
        }
        if steps == 0 || batch_size == 0 {
            return Err(invalid("local training needs at least one step and a positive batch size"));
        }
        let mut theta = params.clone();
        if lr == 0.0 {
            return Ok(theta);
        }
        let n = shard.len();
        let full = batch_size >= n;
        let mut rng: Rng = rng_from(seed, &[]);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        for step in 0..steps {
            let batch = if full {
                shard.to_batch()
            } else {
                if cursor + batch_size > n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let b = shard.gather(&order[cursor..cursor + batch_size]);
                cursor += batch_size;
                b
            };
            let (_, g) = self.loss_and_grad(&theta, &batch)?;
            theta.axpy(-lr, &g);
            if let Some(block) = self.net.first_non_finite_block(&theta) {
                return Err(Error::NonFinite(format!("parameters after step {step}, block {block}")));
            }
        }
        Ok(theta)
    }

    /// Mean loss and argmax accuracy over `data`.
    pub fn evaluate(&self, params: &ParamVector, data: Shard<'_>) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let n = data.len();
        let mut loss = 0.0;
        let mut correct = 0usize;
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let batch = data.gather_range(start, end);
            self.check_batch(&batch)?;
            let trace = self.net.forward(params, &batch.inputs, batch.len());
            let xe = softmax_xent(trace.output(), &batch.labels, self.net.outputs());
            loss += xe.loss * batch.len() as f64;
            correct += xe.correct;
        }
        Ok((loss / n as f64, correct as f64 / n as f64))
    }

    /// Penultimate-layer activations (`n × feature_width`), row-major.
    pub fn features(&self, params: &ParamVector, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        let op = self.net.feature_op().ok_or_else(|| invalid("architecture has no feature layer"))?;
        if inputs.len() != n * self.net.input_size() {
            return Err(Error::DimensionMismatch { expected: n * self.net.input_size(), actual: inputs.len() });
        }
        let d = self.net.input_size();
        let mut out = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let trace = self.net.forward_until(params, &inputs[start * d..end * d], end - start, Some(op));
            out.extend_from_slice(trace.output());
        }
        Ok(out)
    }
}

pub fn init_network(net: &Network, seed: u64) -> ParamVector {
    let mut rng: Rng = rng_from(seed, &[crate::rng::stream::INIT]);
    let mut p = vec![0.0; net.num_params()];
    for (fan_in, wr, br) in net.init_layout() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for x in &mut p[wr] {
            *x = rng.gen_range(-bound..bound);
        }
        for x in &mut p[br] {
            *x = rng.gen_range(-bound..bound);
        }
    }
    ParamVector(p)
}

pub(crate) struct Xent {
    pub loss: f64,
    pub d_logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub correct: usize,
}

/// Mean softmax cross-entropy; `d_logits` is the gradient of the mean.
pub(crate) fn softmax_xent(logits: &[f64], labels: &[usize], classes: usize) -> Xent {
    let n = labels.len();
    let mut probs = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let mut correct = 0;
    for (r, &y) in labels.iter().enumerate() {
        let z = &logits[r * classes..(r + 1) * classes];
        let mut best = 0;
        for j in 1..classes {
            if z[j] > z[best] {
                best = j;
            }
        }
        correct += usize::from(best == y);
        let zmax = z[best];
        let p = &mut probs[r * classes..(r + 1) * classes];
        let mut s = 0.0;
        for (pj, &zj) in p.iter_mut().zip(z) {
            *pj = (zj - zmax).exp();
            s += *pj;
        }
        p.iter_mut().for_each(|pj| *pj /= s);
        loss += s.ln() + zmax - z[y];
    }
    let inv = 1.0 / n as f64;
    let mut d_logits = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        d_logits[r * classes + y] -= 1.0;
    }
    d_logits.iter_mut().for_each(|g| *g *= inv);
    Xent { loss: loss * inv, d_logits, probs, correct }
}
