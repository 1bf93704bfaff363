//! Central-difference gradient checking.
//!
//! The checker rebuilds the graph from scratch for every perturbed
//! evaluation, so it shares nothing with the backward pass it validates
//! except the forward kernels.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Smallest denominator used when turning an absolute difference into a
/// relative one. Central differences at `eps = 1e-5` carry roundoff of
/// roughly `1e-11 * |f|`, so smaller gradients cannot be resolved.
pub const REL_FLOOR: f64 = 1e-6;

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference eps {eps} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

fn eval<F>(f: &F, leaves: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(Error::Graph(format!("checked function returned shape {:?}", v.shape())));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(Error::Numerical("checked function is not finite at a perturbed point".into()));
    }
    Ok(y)
}

/// Analytic gradients of `f` with respect to each leaf.
pub fn analytic_grad<F>(f: &F, leaves: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone().with_requires_grad())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars.iter().map(|&v| g.grad(v).expect("leaf grad").to_vec()).collect())
}

/// Central-difference gradients of `f` with respect to each leaf.
pub fn numeric_grad<F>(f: &F, leaves: &[Tensor], eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut out = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut grads = vec![0.0; leaves[li].numel()];
        for (k, slot) in grads.iter_mut().enumerate() {
            let orig = work[li].data()[k];
            work[li].data_mut()[k] = orig + eps;
            let plus = eval(f, &work)?;
            work[li].data_mut()[k] = orig - eps;
            let minus = eval(f, &work)?;
            work[li].data_mut()[k] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        out.push(grads);
    }
    Ok(out)
}

/// Largest elementwise `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares analytic gradients of the scalar function `f` against central
/// differences and returns the maximum relative error.
pub fn finite_diff_check<F>(f: F, leaves: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grad(&f, leaves)?;
    let numeric = numeric_grad(&f, leaves, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Same check over every scalar of every parameter in `store`. `f` binds
/// parameters itself through [`Graph::param`].
pub fn finite_diff_check_store<F>(f: F, store: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let (analytic, numeric) = store_gradients(&f, store, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Analytic and central-difference gradients for every parameter of
/// `store`, in `store.ids()` order. `f` receives a perturbed copy of the
/// store for the numeric part, so it must read weights from its argument.
pub fn store_gradients<F>(f: &F, store: &ParamStore, eps: f64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| match g.bound_param(store, id).and_then(|v| g.grad(v)) {
            Some(d) => d.to_vec(),
            None => vec![0.0; store.get(id).numel()],
        })
        .collect();

    let value = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        let y = g.value(out).data()[0];
        if !y.is_finite() {
            return Err(Error::Numerical("checked function is not finite at a perturbed point".into()));
        }
        Ok(y)
    };
    let mut work = store.clone();
    let mut numeric = Vec::with_capacity(store.len());
    for id in store.ids() {
        let mut grads = vec![0.0; store.get(id).numel()];
        for (k, slot) in grads.iter_mut().enumerate() {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let plus = value(&work)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let minus = value(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        numeric.push(grads);
    }
    Ok((analytic, numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_eps_out_of_range() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_check(|g, v| Ok(g.sum(v[0])), &[x.clone()], 1e-2).is_err());
        assert!(finite_diff_check(|g, v| Ok(g.sum(v[0])), &[x], 1e-9).is_err());
    }

    #[test]
    fn non_finite_perturbation_is_an_error() {
        // ln(x) at x = 1e-6 with eps 1e-5 steps below zero.
        let x = Tensor::scalar(1e-6);
        let r = finite_diff_check(
            |g, v| {
                let y = g.ln(v[0])?;
                Ok(g.sum(y))
            },
            &[x],
            1e-5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // gradient_reversal deliberately breaks the chain rule.
        let x = Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |g, v| {
                let r = g.gradient_reversal(v[0], 1.0);
                Ok(g.sum(r))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err > 1.0);
    }
}
