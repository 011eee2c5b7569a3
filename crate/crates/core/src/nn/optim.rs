use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tensor::Real;

/// Adam moments and hyper-parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn adam(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-7, step: 0, first: Vec::new(), second: Vec::new() }
    }
}

/// One bias-corrected Adam update over every trainable parameter.
///
/// Fails without touching anything if a trainable parameter has no
/// gradient.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>) -> Result<()> {
    for p in store.iter().filter(|p| p.trainable) {
        if p.grad.is_none() {
            return Err(Error::MissingGrad(p.name.clone()));
        }
    }
    if state.first.len() < store.len() {
        state.first.resize(store.len(), None);
        state.second.resize(store.len(), None);
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - state.beta1.powi(t));
    let c2 = T::from_f64(1.0 - state.beta2.powi(t));
    let lr = T::from_f64(state.learning_rate);
    let eps = T::from_f64(state.epsilon);

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let grad = p.grad.as_ref().expect("checked above").data().to_vec();
        let k = id.index();
        let m = state.first[k].get_or_insert_with(|| vec![T::zero(); grad.len()]);
        let v = state.second[k].get_or_insert_with(|| vec![T::zero(); grad.len()]);
        for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
