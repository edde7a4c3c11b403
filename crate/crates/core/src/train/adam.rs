use crate::diff::{GradientMap, Real, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Real> {
    pub step: u64,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = || params.iter().map(|(_, p)| zeros_like(&p.value)).collect::<Vec<_>>();
        AdamState { step: 0, first: zeros(), second: zeros() }
    }
}

fn zeros_like<F: Real>(t: &Tensor<F>) -> Tensor<F> {
    Tensor::from_vec(t.shape(), vec![F::zero(); t.len()]).expect("shape of an existing tensor")
}

/// One bias-corrected Adam update of every trainable parameter that has a
/// gradient in `grads`.
pub fn adam_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &GradientMap<F>,
    state: &mut AdamState<F>,
    hyper: &AdamHyper,
) -> Result<()> {
    if state.first.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.first.len(),
            params.len()
        )));
    }
    for (id, g) in grads.iter() {
        if id.0 >= params.len() {
            return Err(Error::Contract(format!("gradient for unknown parameter {}", id.0)));
        }
        let p = params.get(id);
        if p.value.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient {:?} does not match parameter {:?} {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = F::lit(hyper.beta1);
    let b2 = F::lit(hyper.beta2);
    let c1 = F::lit(1.0 - hyper.beta1.powi(t));
    let c2 = F::lit(1.0 - hyper.beta2.powi(t));
    let lr = F::lit(hyper.learning_rate);
    let eps = F::lit(hyper.epsilon);
    for (id, g) in grads.iter() {
        if !params.get(id).trainable {
            continue;
        }
        let m = state.first[id.0].data_mut();
        let v = state.second[id.0].data_mut();
        let w = params.value_mut(id).data_mut();
        for i in 0..w.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (F::one() - b1) * gi;
            v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
