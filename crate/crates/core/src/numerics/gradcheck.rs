//! Central-difference verification of recorded gradients.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Analytic and central-difference gradients of a scalar map at a point.
#[derive(Debug, Clone)]
pub struct GradComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradComparison {
    /// `max_i |a_i - n_i| / max(1e-12, |a_i| + |n_i|)`
    pub fn max_relative_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-12))
            .fold(0.0, f64::max)
    }
}

fn eval<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point);
    let y = f(&mut g, x)?;
    if g.value(y).len() != 1 {
        return Err(Error::NotScalar(g.shape(y).to_vec()));
    }
    let v = g.item(y);
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    Ok(v)
}

pub fn compare_gradients<F>(f: F, point: &Tensor, step: f64) -> Result<GradComparison>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let x = g.param(point);
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let base = point.data()[i];
        probe.data_mut()[i] = base + step;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = base - step;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = base;
        numeric.push((up - down) / (2.0 * step));
    }
    Ok(GradComparison { analytic, numeric })
}

/// Maximum relative disagreement between the recorded gradient of `f` at
/// `point` and its central-difference estimate with step `step`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    Ok(compare_gradients(f, point, step)?.max_relative_error())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = finite_diff_check(|g, x| g.mul(x, x), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff_check(|g, x| g.mul(x, x), &Tensor::scalar(3.0), 0.0).is_err());
    }

    #[test]
    fn reports_non_finite_probe() {
        // log(x) at x = 1e-7 with step 1e-6 probes a negative argument
        let r = finite_diff_check(|g, x| g.log(x), &Tensor::scalar(1e-7), 1e-6);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // detach hides the second factor, so the recorded gradient is half the true one
        let err = finite_diff_check(
            |g, x| {
                let d = g.detach(x);
                g.mul(x, d)
            },
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err > 0.3);
    }
}
