use crate::error::{Error, Result};
use crate::linalg::Real;

/// Adam moments for one group of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn for_params(params: &[&[T]]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }
}

/// One bias-corrected Adam update. Weight decay is folded into the gradient
/// (`g + wd * p`) before the moments are updated.
pub fn adam_step<T: Real>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameter tensors, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first[i].len() {
            return Err(Error::Shape(format!(
                "adam: tensor {i} has {} params, {} grads, {} moments",
                p.len(),
                g.len(),
                state.first[i].len()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::lit(1.0 - state.beta1.powi(t));
    let c2 = T::lit(1.0 - state.beta2.powi(t));
    let (lr, wd, eps) = (T::lit(lr), T::lit(weight_decay), T::lit(state.eps));

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for j in 0..p.len() {
            let grad = g[j] + wd * p[j];
            m[j] = b1 * m[j] + (T::one() - b1) * grad;
            v[j] = b2 * v[j] + (T::one() - b2) * grad * grad;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
