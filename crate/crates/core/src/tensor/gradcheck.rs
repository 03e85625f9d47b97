use super::{Graph, Tensor, Var};
use crate::error::TensorError;

/// Central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over all coordinates of all inputs.
    pub max_rel_error: f64,
    /// Worst relative error per input tensor.
    pub per_input: Vec<f64>,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub non_finite: bool,
    pub tol: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences at `points`.
///
/// `f` receives a fresh graph and one leaf per point, and must return a
/// scalar node. Non-finite values anywhere produce a failed report rather
/// than an error.
pub fn grad_check<F>(f: F, points: &[Tensor], tol: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if tol <= 0.0 {
        return Err(TensorError::Argument {
            op: "grad_check",
            msg: format!("tolerance must be positive, got {tol}"),
        });
    }
    let eval = |pts: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data().iter().sum())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_finite() {
        return Ok(GradCheckReport::non_finite(points.len(), tol));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();
    compare_gradients(eval, &analytic, points, tol)
}

/// Compares supplied `analytic` gradients against central differences of
/// `eval` at `points`.
pub fn compare_gradients<E>(
    eval: E,
    analytic: &[Tensor],
    points: &[Tensor],
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    E: Fn(&[Tensor]) -> Result<f64, TensorError>,
{
    if analytic.len() != points.len() {
        return Err(TensorError::dim("grad_check", "input", points.len(), analytic.len()));
    }
    let mut report = GradCheckReport::non_finite(points.len(), tol);
    report.non_finite = false;
    report.max_rel_error = 0.0;
    let mut work = points.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        if grad.len() != points[input].len() {
            return Err(TensorError::dim("grad_check", "gradient", points[input].len(), grad.len()));
        }
        for idx in 0..grad.len() {
            let orig = work[input].data()[idx];
            work[input].data_mut()[idx] = orig + GRAD_CHECK_STEP;
            let plus = eval(&work)?;
            work[input].data_mut()[idx] = orig - GRAD_CHECK_STEP;
            let minus = eval(&work)?;
            work[input].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let a = grad.data()[idx];
            report.coordinates += 1;
            if !numeric.is_finite() || !a.is_finite() {
                report.non_finite = true;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.per_input[input] = report.per_input[input].max(rel);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((input, idx));
            }
        }
    }
    if report.non_finite {
        report.max_rel_error = f64::NAN;
    }
    report.passed = !report.non_finite && report.max_rel_error < tol;
    Ok(report)
}

impl GradCheckReport {
    fn non_finite(inputs: usize, tol: f64) -> Self {
        Self {
            max_rel_error: f64::NAN,
            per_input: vec![0.0; inputs],
            worst: None,
            coordinates: 0,
            non_finite: true,
            tol,
            passed: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes() {
        let r = grad_check(
            |g, v| g.hadamard(v[0], v[0]),
            &[Tensor::scalar(3.0)],
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn non_finite_is_reported() {
        let r = grad_check(
            |g, v| {
                let s = g.scale(v[0], f64::INFINITY);
                Ok(g.sum(s))
            },
            &[Tensor::scalar(1.0)],
            1e-4,
        )
        .unwrap();
        assert!(r.non_finite);
        assert!(!r.passed);
    }

    #[test]
    fn corrupted_adjoint_fails() {
        let point = Tensor::vector(vec![1.5, -0.5]);
        let eval = |p: &[Tensor]| -> Result<f64, TensorError> {
            let mut g = Graph::new();
            let x = g.leaf(p[0].clone());
            let y = g.tanh(x);
            let s = g.sum(y);
            Ok(g.value(s).item())
        };
        let mut g = Graph::new();
        let x = g.leaf(point.clone());
        let y = g.tanh(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let good = g.grad(x);
        let ok = compare_gradients(eval, std::slice::from_ref(&good), std::slice::from_ref(&point), 1e-4).unwrap();
        assert!(ok.passed);
        let bad = good.map(|v| v * 1.01);
        let r = compare_gradients(eval, &[bad], &[point], 1e-4).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 1e-3);
    }

    #[test]
    fn rejects_non_positive_tolerance() {
        assert!(grad_check(|g, v| Ok(g.sum(v[0])), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
