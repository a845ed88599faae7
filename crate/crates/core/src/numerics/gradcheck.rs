use super::Tensor;
use crate::error::{LlipError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// `(tensor index, flat offset)` of the worst coordinate
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares `analytic` gradients against central differences of `f` at `params`.
///
/// `f` is evaluated `2 · numel` times; it receives the full parameter list with
/// exactly one coordinate perturbed by `±h`.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor<f64>],
    analytic: &[Vec<f64>],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    if analytic.len() != params.len()
        || params.iter().zip(analytic).any(|(p, g)| p.numel() != g.len())
    {
        return Err(LlipError::Dimension(
            "analytic gradients do not match parameter shapes".into(),
        ));
    }
    if !(h > 0.0) {
        return Err(LlipError::Parameter(format!("step must be positive, got {}", h)));
    }
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        for off in 0..grad.len() {
            let orig = work[ti].data()[off];
            work[ti].data_mut()[off] = orig + h;
            let plus = f(&work)?;
            work[ti].data_mut()[off] = orig - h;
            let minus = f(&work)?;
            work[ti].data_mut()[off] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(LlipError::Evaluation(format!(
                    "objective is not finite near tensor {} offset {}",
                    ti, off
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = (grad[off] - numeric).abs() / grad[off].abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, off);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn quad(p: &[Tensor<f64>]) -> Result<f64> {
        // f(x) = Σ c_i x_i² + x_0 x_1
        let x = p[0].data();
        Ok(x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>() + x[0] * x[1])
    }

    fn quad_grad(x: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        g[0] += x[1];
        g[1] += x[0];
        g
    }

    #[test]
    fn quadratic_form_is_exact() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.5, 0.7]).unwrap();
        let g = quad_grad(x.data());
        let r = finite_difference_check(quad, &[x], &[g], 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-8, "{:?}", r);
        assert_eq!(r.coordinates, 4);
    }

    #[test]
    fn halved_gradient_is_flagged() {
        let x = Tensor::new(&[3], vec![3.0, -4.0, 5.0]).unwrap();
        let g: Vec<f64> = quad_grad(x.data()).iter().map(|v| v / 2.0).collect();
        let r = finite_difference_check(quad, &[x], &[g], 1e-5).unwrap();
        assert!((r.max_rel_error - 1.0).abs() < 1e-6, "{:?}", r);
    }

    #[test]
    fn log_sigmoid_of_dot_product() {
        let u = Tensor::new(&[1, 5], vec![0.4, -0.3, 1.1, 0.2, -0.9]).unwrap().with_grad();
        let v = Tensor::new(&[5, 1], vec![-0.5, 0.8, 0.3, 1.5, 0.1]).unwrap().with_grad();
        let build = |p: &[Tensor<f64>]| -> Result<(Tape<f64>, crate::numerics::Var, Vec<crate::numerics::Var>)> {
            let mut tape = Tape::new();
            let a = tape.leaf(p[0].clone())?;
            let b = tape.leaf(p[1].clone())?;
            let d = tape.matmul(a, b)?;
            let l = tape.log_sigmoid(d)?;
            let s = tape.sum(l)?;
            Ok((tape, s, vec![a, b]))
        };
        let params = vec![u, v];
        let (tape, loss, vars) = build(&params).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get(*v).unwrap().to_vec()).collect();
        let f = |p: &[Tensor<f64>]| {
            let (tape, loss, _) = build(p)?;
            Ok(tape.value(loss).item())
        };
        let r = finite_difference_check(f, &params, &analytic, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{:?}", r);
    }

    #[test]
    fn nan_objective_is_an_evaluation_error() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let r = finite_difference_check(|_| Ok(f64::NAN), &[x], &[vec![0.0]], 1e-5);
        assert!(matches!(r, Err(LlipError::Evaluation(_))));
    }
}
