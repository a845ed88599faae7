use crate::error::{LlipError, Result};
use crate::model::Model;
use crate::numerics::Tensor;

use super::{format_sig9, image_tokens};

/// Stop when the off-diagonal norm falls below this fraction of the matrix norm.
pub const JACOBI_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 100;

/// Singular values of a feature covariance, largest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    pub effective_rank: f64,
    pub source: String,
    pub samples: usize,
}

/// Eigenvalues of a symmetric `n × n` row-major matrix by cyclic Jacobi
/// rotations, unsorted.
pub fn symmetric_eigenvalues(matrix: &[f64], n: usize) -> Vec<f64> {
    let mut a = matrix.to_vec();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; n];
    }
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| 2.0 * a[p * n + q] * a[p * n + q])
            .sum();
        if off.sqrt() <= JACOBI_TOL * norm {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// `exp` of the entropy of the normalized spectrum; 0 for an all-zero spectrum.
pub fn effective_rank(values: &[f64]) -> f64 {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let h: f64 = values
        .iter()
        .map(|v| v / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.exp()
}

/// Spectrum of the centered covariance of `rows` (`n × dim`, row-major).
pub fn spectrum_of_features(rows: &[f64], dim: usize, source: &str) -> Result<SpectrumReport> {
    if dim == 0 || rows.len() % dim != 0 {
        return Err(LlipError::Dimension(format!("{} values do not form rows of {}", rows.len(), dim)));
    }
    let n = rows.len() / dim;
    if n < dim {
        return Err(LlipError::DegenerateInput(format!(
            "{} samples cannot estimate a {}-dimensional covariance",
            n, dim
        )));
    }
    let mut mean = vec![0.0; dim];
    for r in rows.chunks_exact(dim) {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; dim * dim];
    let mut c = vec![0.0; dim];
    for r in rows.chunks_exact(dim) {
        c.iter_mut().zip(r.iter().zip(&mean)).for_each(|(c, (x, m))| *c = x - m);
        for i in 0..dim {
            let ci = c[i];
            for j in i..dim {
                cov[i * dim + j] += ci * c[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / n as f64;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    let mut values: Vec<f64> = symmetric_eigenvalues(&cov, dim).into_iter().map(f64::abs).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(SpectrumReport {
        effective_rank: effective_rank(&values),
        singular_values: values,
        source: source.to_string(),
        samples: n,
    })
}

/// Raw token outputs with the tokens of each image stacked as separate
/// samples: `[N·T, D]` rows.
pub fn token_features(model: &Model, images: &Tensor<f32>) -> Result<(Vec<f64>, usize)> {
    let h = image_tokens(model, images)?;
    let d = *h.shape().last().expect("token axis");
    Ok((h.data().iter().map(|&x| f64::from(x)).collect(), d))
}

/// Token-feature spectrum of a model over `images`.
pub fn spectrum(model: &Model, images: &Tensor<f32>, source: &str) -> Result<SpectrumReport> {
    let n = images.shape().first().copied().unwrap_or(0);
    let d = model.cfg.vit.width;
    if n < d {
        return Err(LlipError::DegenerateInput(format!(
            "{} images cannot estimate a {}-dimensional covariance",
            n, d
        )));
    }
    let (rows, dim) = token_features(model, images)?;
    spectrum_of_features(&rows, dim, source)
}

/// `rank,singular_value` CSV, ranks from 1.
pub fn spectrum_csv(report: &SpectrumReport) -> String {
    let mut s = String::from("rank,singular_value\n");
    for (i, v) in report.singular_values.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, format_sig9(*v)));
    }
    s
}
