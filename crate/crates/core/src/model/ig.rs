//! Gradient-inversion objective:
//!
//! `J(x) = 1 − cos(∇_θF(x; θ), ḡ) + (β / B′) · Σᵢ TV(xᵢ)`
//!
//! with `F` the mean cross-entropy of the dummy batch under fixed labels. The
//! pixel gradient of the cosine term is `J_gᵀ u` with `u = ∂cos/∂g`, which
//! equals `∇ₓ ⟨u, ∇_θF⟩` and comes out of one tangent pass through the network.

use crate::data::Batch;
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::model::{softmax_xent, Model};
use crate::params::ParamVector;

/// Anisotropic total variation with forward differences.
pub fn total_variation(image: &[f64], height: usize, width: usize) -> Result<f64> {
    if height < 2 || width < 2 {
        return Err(invalid(format!("total variation needs at least 2x2, got {height}x{width}")));
    }
    if !image.len().is_multiple_of(height * width) || image.is_empty() {
        return Err(Error::DimensionMismatch { expected: height * width, actual: image.len() });
    }
    let mut tv = 0.0;
    for plane in image.chunks(height * width) {
        for y in 0..height {
            for x in 0..width {
                let v = plane[y * width + x];
                if y + 1 < height {
                    tv += (plane[(y + 1) * width + x] - v).abs();
                }
                if x + 1 < width {
                    tv += (plane[y * width + x + 1] - v).abs();
                }
            }
        }
    }
    Ok(tv)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adds `scale · ∂TV/∂image` into `out`; ties contribute 0.
pub fn tv_gradient(image: &[f64], height: usize, width: usize, scale: f64, out: &mut [f64]) {
    for (plane, g) in image.chunks(height * width).zip(out.chunks_mut(height * width)) {
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                if y + 1 < height {
                    let s = scale * sign(plane[i + width] - plane[i]);
                    g[i + width] += s;
                    g[i] -= s;
                }
                if x + 1 < width {
                    let s = scale * sign(plane[i + 1] - plane[i]);
                    g[i + 1] += s;
                    g[i] -= s;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct IgEval {
    pub objective: f64,
    /// Cosine between the dummy batch gradient and the target gradient.
    pub cosine: f64,
    /// Objective gradient w.r.t. the dummy pixels (sample-major), if requested.
    pub pixel_grad: Option<Vec<f64>>,
}

/// Evaluates the inversion objective at `dummy` and optionally its exact pixel
/// gradient.
pub fn ig_evaluate(
    model: &Model,
    params: &ParamVector,
    dummy: &Batch,
    target_grad: &[f64],
    beta: f64,
    with_grad: bool,
) -> Result<IgEval> {
    if dummy.is_empty() {
        return Err(Error::Empty("dummy batch"));
    }
    let net = &model.net;
    params.check_len(net.num_params())?;
    if target_grad.len() != net.num_params() {
        return Err(Error::DimensionMismatch { expected: net.num_params(), actual: target_grad.len() });
    }
    let target_norm = linalg::norm(target_grad);
    if target_norm == 0.0 {
        return Err(Error::ZeroVector("target gradient"));
    }
    let n = dummy.len();
    let (h, w) = (dummy.dims.height, dummy.dims.width);
    let trace = net.forward(params, &dummy.inputs, n);
    let xe = softmax_xent(trace.output(), &dummy.labels, net.outputs());
    let probs = xe.probs;
    let back = net.backward(params, &trace, xe.d_logits, false);
    let g = &back.grad;
    let g_norm = linalg::norm(g);
    if g_norm == 0.0 {
        return Err(Error::ZeroVector("dummy batch gradient"));
    }
    let cos = linalg::dot(g, target_grad) / (g_norm * target_norm);
    let tv_scale = beta / n as f64;
    let mut tv = 0.0;
    if beta != 0.0 {
        tv = total_variation(&dummy.inputs, h, w)?;
    }
    let objective = 1.0 - cos + tv_scale * tv;
    if !objective.is_finite() {
        return Err(Error::NonFinite("inversion objective".into()));
    }
    if !with_grad {
        return Ok(IgEval { objective, cosine: cos, pixel_grad: None });
    }

    // ∂cos/∂g
    let u: Vec<f64> =
        g.iter().zip(target_grad).map(|(gi, ti)| ti / (g_norm * target_norm) - cos * gi / (g_norm * g_norm)).collect();
    let tangents = net.tangent_forward(params, &u, &trace);
    let z_dot = tangents.last().expect("tangent of the logits");
    let m = net.outputs();
    // tangent of (p − onehot)/n is p ⊙ (ż − ⟨p, ż⟩) / n
    let mut d_logits_dot = vec![0.0; n * m];
    for r in 0..n {
        let p = &probs[r * m..(r + 1) * m];
        let zd = &z_dot[r * m..(r + 1) * m];
        let mean = linalg::dot(p, zd);
        for j in 0..m {
            d_logits_dot[r * m + j] = p[j] * (zd[j] - mean) / n as f64;
        }
    }
    let dcos_dx = net.tangent_backward(params, &u, &trace, &back, d_logits_dot);
    let mut grad: Vec<f64> = dcos_dx.iter().map(|v| -v).collect();
    if beta != 0.0 {
        tv_gradient(&dummy.inputs, h, w, tv_scale, &mut grad);
    }
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("inversion pixel gradient".into()));
    }
    Ok(IgEval { objective, cosine: cos, pixel_grad: Some(grad) })
}

/// Exact gradient of the inversion objective w.r.t. the dummy pixels; labels
/// stay fixed.
pub fn ig_pixel_grad(
    model: &Model,
    dummy: &Batch,
    target_grad: &ParamVector,
    params: &ParamVector,
    beta: f64,
) -> Result<Vec<f64>> {
    let eval = ig_evaluate(model, params, dummy, target_grad, beta, true)?;
    Ok(eval.pixel_grad.expect("requested"))
}
