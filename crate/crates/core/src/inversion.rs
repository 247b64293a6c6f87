//! Inverting-gradients reconstruction of a client's data from its upload.

use rand::Rng as _;

use crate::data::Batch;
use crate::error::{invalid, Error, Result};
use crate::model::{ig_evaluate, Model};
use crate::optim::Adam;
use crate::params::ParamVector;
use crate::rng::{rng_from, stream, Rng};

/// Batch gradient encoded by an upload, `(θ − θ_k)/α`: for `θ_k = θ − α·g`
/// this is exactly `g`.
pub fn batch_gradient_from_update(theta_k: &ParamVector, theta: &ParamVector, lr: f64) -> Result<ParamVector> {
    if !(lr > 0.0) {
        return Err(invalid(format!("learning rate must be positive, got {lr}")));
    }
    theta.check_len(theta_k.len())?;
    Ok(theta.sub(theta_k).scale(1.0 / lr))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionConfig {
    pub images: usize,
    pub max_iters: usize,
    pub lr: f64,
    pub beta: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig { images: 16, max_iters: 30, lr: 0.05, beta: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub images: Batch,
    /// Cosine between the reconstruction's gradient and the target gradient.
    pub s_r: f64,
    pub objective: f64,
    pub initial_objective: f64,
    /// Iterations actually run (fewer than requested after a non-finite step).
    pub iterations: usize,
}

/// Labels of the dummy batch, uniform over the classes.
pub fn dummy_labels(count: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng: Rng = rng_from(seed, &[stream::INVERT]);
    (0..count).map(|_| rng.gen_range(0..classes)).collect()
}

/// Reconstructs `cfg.images` inputs whose gradient at `params` aligns with
/// `target`.
///
/// Pixels start at zero and follow Adam on the inversion objective; labels
/// stay fixed. The images with the lowest objective seen are returned. A
/// non-finite objective or a vanishing dummy gradient ends the run early.
pub fn invert_gradients(
    model: &Model,
    target: &ParamVector,
    params: &ParamVector,
    cfg: &InversionConfig,
    seed: u64,
) -> Result<Reconstruction> {
    if cfg.images == 0 {
        return Err(invalid("inversion needs at least one dummy image"));
    }
    if target.norm() == 0.0 {
        return Err(Error::ZeroVector("target gradient"));
    }
    let dims = model.spec.input;
    let classes = model.spec.classes;
    let labels = dummy_labels(cfg.images, classes, seed);
    let mut dummy = Batch::new(dims, classes, vec![0.0; cfg.images * dims.size()], labels)?;
    let mut adam = Adam::new(dummy.inputs.len(), cfg.lr);

    let first = ig_evaluate(model, params, &dummy, target, cfg.beta, cfg.max_iters > 0)?;
    let initial_objective = first.objective;
    let mut best = (first.objective, first.cosine, dummy.inputs.clone());
    let mut pending = first.pixel_grad;
    let mut iterations = 0;
    while let Some(grad) = pending.take() {
        adam.step(&mut dummy.inputs, &grad);
        iterations += 1;
        let want_grad = iterations < cfg.max_iters;
        let eval = match ig_evaluate(model, params, &dummy, target, cfg.beta, want_grad) {
            Ok(e) => e,
            Err(Error::NonFinite(_) | Error::ZeroVector(_)) => break,
            Err(e) => return Err(e),
        };
        if eval.objective < best.0 {
            best = (eval.objective, eval.cosine, dummy.inputs.clone());
        }
        pending = eval.pixel_grad;
    }
    let (objective, s_r, inputs) = best;
    dummy.inputs = inputs;
    Ok(Reconstruction { images: dummy, s_r, objective, initial_objective, iterations })
}
