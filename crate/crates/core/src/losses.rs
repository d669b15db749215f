//! Losses over softmax outputs and their analytic gradients.
//!
//! Every loss accepts arbitrary real label rows, not only one-hot rows:
//! enhancement labels carry values above one on the true class and
//! negative values elsewhere. Scalar losses are means over the rows of the
//! batch; gradient functions return per-row gradients (`∂J_i/∂·`) and leave
//! batch scaling to the caller.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
    Focal {
        gamma: f64,
        /// Per-class weights; `None` means all ones.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<Vec<f64>>,
    },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Mse => "mse",
            LossKind::Focal { .. } => "focal",
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let LossKind::Focal { gamma, alpha } = self {
            check_gamma(*gamma)?;
            if let Some(a) = alpha {
                alpha_weights(Some(a), num_classes)?;
            }
        }
        Ok(())
    }

    /// Mean loss over the batch.
    pub fn value(&self, labels: &Matrix, outputs: &Matrix) -> Result<f64> {
        match self {
            LossKind::CrossEntropy => cross_entropy(labels, outputs),
            LossKind::Mse => mse(labels, outputs),
            LossKind::Focal { gamma, alpha } => {
                let a = alpha_weights(alpha.as_deref(), outputs.cols())?;
                focal_loss(labels, outputs, *gamma, &a)
            }
        }
    }

    /// Per-row gradient with respect to the pre-softmax logits.
    pub fn grad_logits(&self, labels: &Matrix, outputs: &Matrix) -> Result<Matrix> {
        match self {
            LossKind::CrossEntropy => softmax_ce_grad_logits(labels, outputs),
            LossKind::Mse => softmax_backward(outputs, &mse_grad_outputs(labels, outputs)?),
            LossKind::Focal { gamma, alpha } => {
                let a = alpha_weights(alpha.as_deref(), outputs.cols())?;
                let dy = focal_grad_outputs(labels, outputs, *gamma, &a)?;
                softmax_backward(outputs, &dy)
            }
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!(
            "focal gamma must be finite and >= 0, got {gamma}"
        )));
    }
    Ok(())
}

fn alpha_weights(alpha: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    match alpha {
        None => Ok(vec![1.0; n]),
        Some(a) if a.len() != n => Err(Error::invalid(format!(
            "focal alpha has {} entries for {n} classes",
            a.len()
        ))),
        Some(a) if a.iter().any(|&w| !(w > 0.0 && w.is_finite())) => {
            Err(Error::invalid("focal alpha entries must be positive"))
        }
        Some(a) => Ok(a.to_vec()),
    }
}

fn check_same(op: &'static str, labels: &Matrix, outputs: &Matrix) -> Result<()> {
    if labels.shape() != outputs.shape() {
        return Err(Error::Shape {
            op,
            lhs: labels.shape(),
            rhs: outputs.shape(),
        });
    }
    Ok(())
}

fn mean_over_rows(m: &Matrix, per_row: impl Fn(usize) -> f64) -> f64 {
    if m.rows() == 0 {
        return 0.0;
    }
    (0..m.rows()).map(per_row).sum::<f64>() / m.rows() as f64
}

#[inline]
fn ln_clamped(y: f64) -> f64 {
    y.max(LOG_CLAMP).ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Pulls an output gradient back through the softmax Jacobian:
/// `∂J/∂z_k = y_k·(∂J/∂y_k − Σ_q ∂J/∂y_q · y_q)`.
pub fn softmax_backward(outputs: &Matrix, grad_outputs: &Matrix) -> Result<Matrix> {
    check_same("softmax_backward", grad_outputs, outputs)?;
    let mut dz = Matrix::zeros(outputs.rows(), outputs.cols());
    for r in 0..outputs.rows() {
        let y = outputs.row(r);
        let dy = grad_outputs.row(r);
        let inner: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
        for (k, d) in dz.row_mut(r).iter_mut().enumerate() {
            *d = y[k] * (dy[k] - inner);
        }
    }
    Ok(dz)
}

/// Mean over rows of `−Σ_q l_q ln y_q`.
pub fn cross_entropy(labels: &Matrix, outputs: &Matrix) -> Result<f64> {
    check_same("cross_entropy", labels, outputs)?;
    Ok(mean_over_rows(outputs, |r| {
        -labels
            .row(r)
            .iter()
            .zip(outputs.row(r))
            .map(|(&l, &y)| l * ln_clamped(y))
            .sum::<f64>()
    }))
}

/// Per-row `∂J_i/∂y = −l/y`.
pub fn cross_entropy_grad_outputs(labels: &Matrix, outputs: &Matrix) -> Result<Matrix> {
    labels.zip_with(outputs, "cross_entropy_grad_outputs", |l, y| {
        -l / y.max(LOG_CLAMP)
    })
}

/// Per-row cross-entropy gradient at the logits of a softmax layer.
///
/// In general this is `y·Σ_q l_q − l`; for label rows that sum to one
/// (one-hot rows and full-mode enhancement rows) it is exactly `y − l`.
pub fn softmax_ce_grad_logits(labels: &Matrix, outputs: &Matrix) -> Result<Matrix> {
    check_same("softmax_ce_grad_logits", labels, outputs)?;
    let mut dz = Matrix::zeros(outputs.rows(), outputs.cols());
    for r in 0..outputs.rows() {
        let l = labels.row(r);
        let y = outputs.row(r);
        let mass: f64 = l.iter().sum();
        for (k, d) in dz.row_mut(r).iter_mut().enumerate() {
            *d = y[k] * mass - l[k];
        }
    }
    Ok(dz)
}

/// Mean over rows of `(1/N)·Σ_q (y_q − l_q)²`.
pub fn mse(labels: &Matrix, outputs: &Matrix) -> Result<f64> {
    check_same("mse", labels, outputs)?;
    let n = outputs.cols() as f64;
    Ok(mean_over_rows(outputs, |r| {
        labels
            .row(r)
            .iter()
            .zip(outputs.row(r))
            .map(|(&l, &y)| (y - l) * (y - l))
            .sum::<f64>()
            / n
    }))
}

/// Per-row `∂J_i/∂y = (2/N)(y − l)`.
pub fn mse_grad_outputs(labels: &Matrix, outputs: &Matrix) -> Result<Matrix> {
    let n = outputs.cols() as f64;
    labels.zip_with(outputs, "mse_grad_outputs", |l, y| 2.0 / n * (y - l))
}

/// Mean over rows of `−Σ_q α_q l_q (1 − y_q)^γ ln y_q`.
pub fn focal_loss(labels: &Matrix, outputs: &Matrix, gamma: f64, alpha: &[f64]) -> Result<f64> {
    check_same("focal_loss", labels, outputs)?;
    check_gamma(gamma)?;
    let alpha = alpha_weights(Some(alpha), outputs.cols())?;
    Ok(mean_over_rows(outputs, |r| {
        -labels
            .row(r)
            .iter()
            .zip(outputs.row(r))
            .zip(&alpha)
            .map(|((&l, &y), &a)| a * l * (1.0 - y).powf(gamma) * ln_clamped(y))
            .sum::<f64>()
    }))
}

/// Per-row focal-loss gradient with respect to the outputs:
/// `−α l [(1 − y)^γ / y − γ (1 − y)^(γ−1) ln y]`.
pub fn focal_grad_outputs(
    labels: &Matrix,
    outputs: &Matrix,
    gamma: f64,
    alpha: &[f64],
) -> Result<Matrix> {
    check_same("focal_grad_outputs", labels, outputs)?;
    check_gamma(gamma)?;
    let alpha = alpha_weights(Some(alpha), outputs.cols())?;
    let mut dy = Matrix::zeros(outputs.rows(), outputs.cols());
    for r in 0..outputs.rows() {
        let l = labels.row(r);
        let y = outputs.row(r);
        for (q, d) in dy.row_mut(r).iter_mut().enumerate() {
            let yq = y[q].max(LOG_CLAMP);
            let rest = 1.0 - yq;
            // (1 − y)^(γ−1)·ln y vanishes as y → 1 for every γ > 0.
            let focus_term = if gamma == 0.0 || rest <= 0.0 {
                0.0
            } else {
                gamma * rest.powf(gamma - 1.0) * yq.ln()
            };
            *d = -alpha[q] * l[q] * (rest.powf(gamma) / yq - focus_term);
        }
    }
    Ok(dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{cost_matrix, EncodingMode, GeneratorState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn random_logits(rng: &mut impl Rng, n: usize, spread: f64) -> Matrix {
        Matrix::from_vec(
            1,
            n,
            (0..n).map(|_| rng.random_range(-spread..spread)).collect(),
        )
        .unwrap()
    }

    /// Label row of class `p`: one-hot, or the matching row of a random
    /// full-mode generator.
    fn random_label(rng: &mut impl Rng, n: usize, enhanced: bool) -> Matrix {
        let p = rng.random_range(0..n);
        let mut l = Matrix::zeros(1, n);
        l.set(0, p, 1.0);
        if !enhanced {
            return l;
        }
        let mut s = Matrix::zeros(n, n);
        for i in 0..n {
            let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
            let t: f64 = r.iter().sum();
            for (j, v) in r.into_iter().enumerate() {
                s.set(i, j, v / t);
            }
        }
        let mut g =
            GeneratorState::new(n, 1.0, rng.random_range(0.1..2.0), EncodingMode::Full).unwrap();
        g.update(&cost_matrix(&s).unwrap()).unwrap();
        l.matmul(g.matrix()).unwrap()
    }

    /// Central difference of `f` at every entry of `x`.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_rel(analytic: &Matrix, numeric: &Matrix, tol: f64) {
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!((a - n).abs() / denom <= tol, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let y = m(&[&[0.5, 0.5]]);
        assert!((cross_entropy(&m(&[&[0.0, 1.0]]), &y).unwrap() - LN2).abs() < 1e-15);
        assert!((cross_entropy(&m(&[&[1.2, -0.2]]), &y).unwrap() - LN2).abs() < 1e-15);
        let near = m(&[&[1.0 - 1e-12, 1e-12]]);
        assert!(cross_entropy(&m(&[&[1.0, 0.0]]), &near).unwrap().abs() < 1e-11);
        assert!(cross_entropy(&m(&[&[1.0]]), &y).is_err());
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let v = cross_entropy(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]])).unwrap();
        assert!((v - 12.0 * std::f64::consts::LN_10).abs() < 1e-9);
    }

    #[test]
    fn ce_logit_gradient_examples() {
        let y = m(&[&[0.5, 0.5]]);
        assert_eq!(softmax_ce_grad_logits(&y, &y).unwrap(), Matrix::zeros(1, 2));
        let g = softmax_ce_grad_logits(&m(&[&[1.0, 0.0]]), &y).unwrap();
        assert_eq!(g, m(&[&[-0.5, 0.5]]));
        let g = softmax_ce_grad_logits(&m(&[&[1.2, -0.2]]), &y).unwrap();
        assert!(g.max_abs_diff(&m(&[&[-0.7, 0.7]])).unwrap() < 1e-15);
    }

    #[test]
    fn mse_examples() {
        let y = m(&[&[0.5, 0.5]]);
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        assert_eq!(mse_grad_outputs(&y, &y).unwrap(), Matrix::zeros(1, 2));
        let l = m(&[&[1.0, 0.0]]);
        assert!((mse(&l, &y).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(mse_grad_outputs(&l, &y).unwrap(), m(&[&[-0.5, 0.5]]));
        let le = m(&[&[1.3, -0.3]]);
        let g = mse_grad_outputs(&le, &y).unwrap();
        assert!(g.max_abs_diff(&m(&[&[-0.8, 0.8]])).unwrap() < 1e-15);
    }

    #[test]
    fn focal_examples() {
        let l = m(&[&[0.0, 1.0]]);
        let y = m(&[&[0.2, 0.8]]);
        let got = focal_loss(&l, &y, 2.0, &[1.0, 1.0]).unwrap();
        // −(1 − 0.8)²·ln 0.8
        assert!((got - 0.008_925_742_052_568_39).abs() < 1e-12);
        assert_eq!(
            focal_loss(&l, &y, 0.0, &[1.0, 1.0]).unwrap(),
            cross_entropy(&l, &y).unwrap()
        );
        assert!(focal_loss(&l, &y, -1.0, &[1.0, 1.0]).is_err());
        assert!(focal_loss(&l, &y, 1.0, &[1.0]).is_err());
        assert!(focal_loss(&l, &y, 1.0, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn focal_gradient_finite_at_saturation() {
        let l = m(&[&[1.0, 0.0]]);
        let y = m(&[&[1.0, 0.0]]);
        for gamma in [0.0, 0.5, 1.0, 2.0] {
            let g = focal_grad_outputs(&l, &y, gamma, &[1.0, 1.0]).unwrap();
            assert!(g.is_finite(), "gamma {gamma}: {g:?}");
        }
    }

    #[test]
    fn softmax_rows_on_simplex() {
        let z = m(&[
            &[1000.0, -1000.0, 0.0],
            &[0.1, 0.2, 0.3],
            &[-750.0, -750.0, -750.0],
        ]);
        let y = softmax(&z);
        assert!(y.is_finite());
        for s in y.row_sums() {
            assert!((s - 1.0).abs() <= 1e-9);
        }
        let y = softmax(&m(&[&[3.0, -2.0, 0.5, 1.0]]));
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn output_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..100 {
            let n = rng.random_range(2..8);
            // The central difference of ln y has truncation error h²/(3y²)
            // relative to 1/y, so outputs stay above ~0.008 here.
            let y = softmax(&random_logits(&mut rng, n, 1.5));
            let l = random_label(&mut rng, n, i % 2 == 1);
            let ce = cross_entropy_grad_outputs(&l, &y).unwrap();
            assert_rel(
                &ce,
                &numeric_grad(&y, |y| cross_entropy(&l, y).unwrap()),
                1e-6,
            );
            let se = mse_grad_outputs(&l, &y).unwrap();
            assert_rel(&se, &numeric_grad(&y, |y| mse(&l, y).unwrap()), 1e-6);
            let gamma = rng.random_range(0.0..3.0);
            let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
            let fl = focal_grad_outputs(&l, &y, gamma, &alpha).unwrap();
            let num = numeric_grad(&y, |y| focal_loss(&l, y, gamma, &alpha).unwrap());
            assert_rel(&fl, &num, 1e-6);
        }
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let kinds = [
            LossKind::CrossEntropy,
            LossKind::Mse,
            LossKind::Focal {
                gamma: 2.0,
                alpha: None,
            },
        ];
        for i in 0..100 {
            let n = rng.random_range(2..8);
            let z = random_logits(&mut rng, n, 3.0);
            let l = random_label(&mut rng, n, i % 2 == 0);
            for kind in &kinds {
                let analytic = kind.grad_logits(&l, &softmax(&z)).unwrap();
                let numeric = numeric_grad(&z, |z| kind.value(&l, &softmax(z)).unwrap());
                assert_rel(&analytic, &numeric, 1e-6);
            }
        }
    }

    #[test]
    fn ce_logit_gradient_handles_unnormalized_labels() {
        // Re-weighting rows do not sum to one.
        let z = m(&[&[0.3, -0.2, 1.1]]);
        let l = m(&[&[0.0, 1.4, 0.0]]);
        let analytic = softmax_ce_grad_logits(&l, &softmax(&z)).unwrap();
        let numeric = numeric_grad(&z, |z| cross_entropy(&l, &softmax(z)).unwrap());
        assert_rel(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn loss_kind_serde_names() {
        let json = serde_json::to_string(&LossKind::Focal {
            gamma: 2.0,
            alpha: None,
        })
        .unwrap();
        assert_eq!(json, r#"{"kind":"focal","gamma":2.0}"#);
        assert_eq!(LossKind::CrossEntropy.to_string(), "cross_entropy");
    }
}
