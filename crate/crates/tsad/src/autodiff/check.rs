//! Finite-difference gradient checking. Runs in f64 only: central
//! differences at f32 lose too many digits to resolve a 1e-4 tolerance.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Loss value of `f` at `x` (no gradients).
pub fn grad_check_value<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let loss = f(&mut g, xv)?;
    Ok(g.value(loss).item())
}

/// Central-difference gradient of `f` w.r.t. every element of `x`.
pub fn finite_diff_grad<F>(f: &F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fp = grad_check_value(f, &plus)?;
        let fm = grad_check_value(f, &minus)?;
        out.data_mut()[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(out)
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// finite differences, with denominator max(|a|, |b|, 1e-8).
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .take_grad(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let numeric = finite_diff_grad(&f, x, eps)?;
    Ok(max_rel_err(analytic.data(), numeric.data()))
}

/// Gradient check restricted to chosen coordinates of `x`; the analytic
/// gradient still comes from one full backward pass. Keeps large-input
/// composites (whole frames) affordable.
pub fn grad_check_subset<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .take_grad(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fp = grad_check_value(&f, &plus)?;
        let fm = grad_check_value(&f, &minus)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
    }
    Ok(worst)
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, 1e-8)
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
