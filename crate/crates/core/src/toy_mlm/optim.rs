use std::collections::HashMap;

use ndarray::{ArrayViewD, ArrayViewMutD, Zip};

use super::{ModelError, Params, Scalar, TrainConfig};

/// Adam hyperparameters for one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            epsilon: c.adam_epsilon,
            weight_decay: c.weight_decay,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Params<T>,
    pub v: Params<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Params<T>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update of a single tensor at 1-based `step`.
/// With `decay`, also applies decoupled weight decay `p -= lr * wd * p`,
/// using the parameter value from before the update.
pub fn adam_update<T: Scalar>(
    param: ArrayViewMutD<'_, T>,
    grad: ArrayViewD<'_, T>,
    m: ArrayViewMutD<'_, T>,
    v: ArrayViewMutD<'_, T>,
    step: u64,
    hyper: &AdamHyper,
    decay: bool,
) {
    let b1 = T::lit(hyper.beta1);
    let b2 = T::lit(hyper.beta2);
    let one = T::one();
    let c1 = T::lit(1.0 - hyper.beta1.powi(step as i32));
    let c2 = T::lit(1.0 - hyper.beta2.powi(step as i32));
    let lr = T::lit(hyper.learning_rate);
    let eps = T::lit(hyper.epsilon);
    let wd = if decay { T::lit(hyper.weight_decay) } else { T::zero() };
    Zip::from(param).and(grad).and(m).and(v).for_each(|p, &g, m, v| {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        let decayed = *p - lr * wd * *p;
        *p = decayed - lr * m_hat / (v_hat.sqrt() + eps);
    });
}

/// Applies one Adam step to every parameter that has a gradient. Weight
/// decay covers the weight matrices (every 2-D tensor, embeddings
/// included) and skips biases and layer-norm parameters.
pub fn optimizer_step<T: Scalar>(
    state: &mut AdamState<T>,
    params: &mut Params<T>,
    grads: &Params<T>,
    cfg: &TrainConfig,
) -> Result<(), ModelError> {
    let hyper = AdamHyper::from(cfg);
    let grad_map: HashMap<String, ArrayViewD<'_, T>> =
        grads.tensors().into_iter().map(|t| (t.name, t.tensor)).collect();

    // Validate everything before mutating anything.
    let param_views = params.tensors();
    let m_views = state.m.tensors();
    let v_views = state.v.tensors();
    if m_views.len() != param_views.len() || v_views.len() != param_views.len() {
        return Err(ModelError::InvalidBatch("optimizer state does not match parameters".into()));
    }
    for ((p, m), v) in param_views.iter().zip(&m_views).zip(&v_views) {
        if m.tensor.shape() != p.tensor.shape() || v.tensor.shape() != p.tensor.shape() {
            return Err(ModelError::ShapeMismatch {
                name: format!("adam state {}", p.name),
                expected: p.tensor.shape().to_vec(),
                found: m.tensor.shape().to_vec(),
            });
        }
        if let Some(g) = grad_map.get(&p.name) {
            if g.shape() != p.tensor.shape() {
                return Err(ModelError::ShapeMismatch {
                    name: format!("gradient {}", p.name),
                    expected: p.tensor.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
        }
    }
    if let Some(extra) = grad_map.keys().find(|k| !param_views.iter().any(|p| &p.name == *k)) {
        return Err(ModelError::InvalidBatch(format!("gradient for unknown parameter {extra}")));
    }
    drop((param_views, m_views, v_views));

    state.step += 1;
    let step = state.step;
    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    for ((p, m), v) in params.tensors_mut().into_iter().zip(m_all).zip(v_all) {
        let Some(g) = grad_map.get(&p.name) else { continue };
        let decay = p.tensor.ndim() == 2;
        adam_update(p.tensor, g.view(), m.tensor, v.tensor, step, &hyper, decay);
    }
    Ok(())
}
