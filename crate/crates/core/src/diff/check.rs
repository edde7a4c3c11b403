use super::graph::{Graph, ParamId, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn evaluate<S>(scalar_fn: &S, params: &[Tensor<f64>]) -> Result<(Graph<f64>, Var)>
where
    S: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| g.param(ParamId(i), p.clone()))
        .collect();
    let out = scalar_fn(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok((g, out))
}

fn scalar_at<S>(scalar_fn: &S, params: &[Tensor<f64>]) -> Result<f64>
where
    S: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, out) = evaluate(scalar_fn, params)?;
    Ok(g.value(out).data()[0])
}

/// Compares reverse-mode gradients of `scalar_fn` against central
/// differences with step `eps`. Parameter `i` is registered as `ParamId(i)`.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// over all parameter elements.
pub fn finite_diff_check<S>(scalar_fn: S, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    S: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let (g, out) = evaluate(&scalar_fn, params)?;
    let base = g.value(out).data()[0];
    let again = scalar_at(&scalar_fn, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "scalar function is not deterministic ({base} vs {again})"
        )));
    }
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads
            .get(ParamId(pi))
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter {pi}")))?;
        for k in 0..param.len() {
            let orig = param.data()[k];
            probe[pi].data_mut()[k] = orig + eps;
            let plus = scalar_at(&scalar_fn, &probe)?;
            probe[pi].data_mut()[k] = orig - eps;
            let minus = scalar_at(&scalar_fn, &probe)?;
            probe[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
