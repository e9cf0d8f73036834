//! Closed-form diagnostics: baseline error formulas, the data orthogonality
//! defect and the sandwich covariance estimate of the trained parameters.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::augmentation::{predict_states, AugmentedModel, Structure, TrainingContext};
use crate::error::{check_len, Error, Result};
use crate::linalg::{exact_dot, norm2, Matrix, RegressorFactorization};
use crate::regressor::Dataset;

/// Entries below this magnitude count as numerically zero.
pub const ZERO_THRESHOLD: f64 = 1e-6;

/// `Phi^T delta` with exactly summed columns, so sign-symmetric data cancel to zero.
fn exact_tr_matvec(phi: &Matrix, delta: &[f64]) -> Result<Vec<f64>> {
    check_len("orthogonality defect", phi.rows(), delta.len())?;
    Ok((0..phi.cols())
        .map(|j| exact_dot(&phi.column(j), delta))
        .collect())
}

/// `||Phi^T delta||_2`.
pub fn orthogonality_defect(phi: &Matrix, delta: &[f64]) -> Result<f64> {
    Ok(norm2(&exact_tr_matvec(phi, delta)?))
}

/// `||(Phi^T Phi)^-1 Phi^T delta||_2`: baseline error of the orthogonal structure.
pub fn theoretical_orth_error(fact: &RegressorFactorization, delta: &[f64]) -> Result<f64> {
    if exact_tr_matvec(fact.phi(), delta)?
        .iter()
        .all(|&v| v == 0.0)
    {
        return Ok(0.0);
    }
    Ok(norm2(&fact.solve_least_squares(delta)?))
}

/// `||(Phi^T Phi)^-1 Phi^T (F - delta)||_2`: baseline error of the standard structure.
pub fn theoretical_std_error(
    fact: &RegressorFactorization,
    f_ann: &[f64],
    delta: &[f64],
) -> Result<f64> {
    check_len("theoretical_std_error", f_ann.len(), delta.len())?;
    let diff: Vec<f64> = f_ann.iter().zip(delta).map(|(f, d)| f - d).collect();
    Ok(norm2(&fact.solve_least_squares(&diff)?))
}

pub fn theta_b_error(theta_star: &[f64], theta_hat: &[f64]) -> Result<f64> {
    check_len("theta_b_error", theta_star.len(), theta_hat.len())?;
    Ok(theta_star
        .iter()
        .zip(theta_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub theta_b_error: f64,
    pub theoretical_orth_error: f64,
    pub theoretical_std_error: Option<f64>,
    pub orthogonality_defect: f64,
}

impl ErrorReport {
    /// `delta` is the stacked unmodeled part of the true system on the training states.
    /// The standard-structure formula is filled in for standard models, using their network output.
    pub fn compute(
        ctx: &TrainingContext,
        model: &AugmentedModel,
        theta_star: &[f64],
        delta: &[f64],
    ) -> Result<Self> {
        check_len("ErrorReport delta", ctx.phi().rows(), delta.len())?;
        let theoretical_std_error = match model.structure {
            Structure::Standard => {
                let f = model.mlp.forward_batch(ctx.states())?;
                Some(theoretical_std_error(ctx.fact(), &f, delta)?)
            }
            Structure::Orthogonal => None,
        };
        Ok(Self {
            theta_b_error: theta_b_error(theta_star, &model.theta_b)?,
            theoretical_orth_error: theoretical_orth_error(ctx.fact(), delta)?,
            theoretical_std_error,
            orthogonality_defect: orthogonality_defect(ctx.phi(), delta)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    /// Asymptotic covariance `P_hat`; `Cov(theta) ~ P_hat / N`.
    pub p_hat: Matrix,
    pub n_theta_b: usize,
    /// Largest `|entry|` of the `theta_b x theta_a` blocks of `p_hat`.
    pub max_cross_block: f64,
    /// Residual covariance with off-diagonals zeroed, as used in `p_hat`.
    pub sigma_hat: Matrix,
    pub sigma_full: Matrix,
    pub n_samples: usize,
    /// Largest `|entry|` of the cross blocks of `(1/N) sum psi^T psi`.
    pub gram_cross_block: f64,
    /// Eigenvalue spread of the baseline Gram block and of the retained network Schur complement.
    pub gram_condition: [f64; 2],
    /// Retained eigenvalues of the network Schur complement.
    pub network_rank: usize,
}

impl CovarianceReport {
    pub fn covariance(&self) -> Matrix {
        let mut c = self.p_hat.clone();
        c.scale(1.0 / self.n_samples as f64);
        c
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Plain CSV dump of `p_hat`, one row per line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for i in 0..self.p_hat.rows() {
            let row: Vec<String> = self
                .p_hat
                .row(i)
                .iter()
                .map(|v| format!("{v:.16e}"))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub fn estimate_covariance(model: &AugmentedModel, ds: &Dataset) -> Result<CovarianceReport> {
    let ctx = TrainingContext::from_dataset(model.basis.clone(), ds)?;
    estimate_covariance_ctx(model, &ctx)
}

/// Sandwich estimate `H^- M H^-` with `H = (1/N) sum psi_k^T psi_k` and
/// `M = (2/N) sum psi_k^T Sigma psi_k`, `psi_k = d y_hat_k / d theta`.
pub fn estimate_covariance_ctx(
    model: &AugmentedModel,
    ctx: &TrainingContext,
) -> Result<CovarianceReport> {
    if !model.is_frozen() {
        return Err(Error::MissingThetaAux);
    }
    let psi = stacked_jacobian(model, ctx)?;
    let y_hat = predict_states(model, ctx.states())?;
    let residuals: Vec<f64> = ctx
        .targets()
        .iter()
        .zip(&y_hat)
        .map(|(y, p)| y - p)
        .collect();
    sandwich_covariance(
        &psi,
        model.theta_b.len(),
        &residuals,
        ctx.states().output_dim(),
    )
}

/// Relative eigenvalue cutoff for the pseudo-inverse of the network block.
pub const PINV_RCOND: f64 = 1e-12;

/// Sandwich estimate from the stacked `N * n_y x n_theta` prediction Jacobian (baseline
/// columns first) and the stacked residuals.
///
/// The baseline block is inverted exactly; the network Schur complement is
/// pseudo-inverted, since a smooth network's Jacobian columns are nearly collinear.
pub fn sandwich_covariance(
    psi: &Matrix,
    n_theta_b: usize,
    residuals: &[f64],
    n_y: usize,
) -> Result<CovarianceReport> {
    check_len("sandwich residuals", psi.rows(), residuals.len())?;
    if n_y == 0 || psi.rows() % n_y != 0 || n_theta_b == 0 || n_theta_b > psi.cols() {
        return Err(Error::InvalidSpec("covariance shapes".into()));
    }
    let n = psi.rows() / n_y;
    let n_b = n_theta_b;
    let n_theta = psi.cols();

    let mut sigma_full = Matrix::zeros(n_y, n_y);
    for r in residuals.chunks(n_y) {
        for i in 0..n_y {
            for j in 0..n_y {
                sigma_full[(i, j)] += r[i] * r[j] / n as f64;
            }
        }
    }
    let mut sigma_hat = Matrix::zeros(n_y, n_y);
    for i in 0..n_y {
        sigma_hat[(i, i)] = sigma_full[(i, i)];
    }

    let psi_na = DMatrix::from_row_slice(psi.rows(), n_theta, psi.as_slice());
    let h = psi_na.tr_mul(&psi_na) / n as f64;
    let mut weighted = psi_na.clone();
    for (r, mut row) in weighted.row_iter_mut().enumerate() {
        row *= sigma_hat[(r % n_y, r % n_y)];
    }
    let m = psi_na.tr_mul(&weighted) * (2.0 / n as f64);

    let (g, network_rank, gram_condition) = block_generalized_inverse(&h, n_b)?;
    let p = &g * m * &g;
    let p = (&p + p.transpose()) * 0.5;

    let p_hat = Matrix::from_vec(n_theta, n_theta, p.transpose().as_slice().to_vec())
        .map_err(|_| Error::NonFinite("covariance estimate"))?;
    Ok(CovarianceReport {
        max_cross_block: cross_block_max(&p, n_b),
        p_hat,
        n_theta_b: n_b,
        sigma_hat,
        sigma_full,
        n_samples: n,
        gram_cross_block: cross_block_max(&h, n_b),
        gram_condition,
        network_rank,
    })
}

fn cross_block_max(a: &DMatrix<f64>, n_b: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n_b {
        for j in n_b..a.ncols() {
            worst = worst.max(a[(i, j)].abs()).max(a[(j, i)].abs());
        }
    }
    worst
}

// Generalized inverse of [[A, B], [B^T, C]] through the Schur complement
// S = C - B^T A^-1 B, with S pseudo-inverted. Exact when S is invertible.
fn block_generalized_inverse(
    h: &DMatrix<f64>,
    n_b: usize,
) -> Result<(DMatrix<f64>, usize, [f64; 2])> {
    let n = h.nrows();
    let n_a = n - n_b;
    let a = h.view((0, 0), (n_b, n_b)).into_owned();
    let b = h.view((0, n_b), (n_b, n_a)).into_owned();
    let c = h.view((n_b, n_b), (n_a, n_a)).into_owned();

    let a_eig = SymmetricEigen::new(a.clone()).eigenvalues;
    let a_max = a_eig.max();
    let a_min = a_eig.min();
    let a_inv = match a.cholesky() {
        Some(ch) if a_min > 1e-14 * a_max => ch.inverse(),
        _ => return Err(Error::SingularGram { block: "baseline" }),
    };
    let mut g = DMatrix::zeros(n, n);
    g.view_mut((0, 0), (n_b, n_b)).copy_from(&a_inv);
    if n_a == 0 {
        return Ok((g, 0, [a_max / a_min, f64::NAN]));
    }

    let ainv_b = &a_inv * &b;
    let mut s = &c - b.transpose() * &ainv_b;
    s = (&s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(s);
    let s_max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if s_max == 0.0 {
        return Err(Error::SingularGram { block: "network" });
    }
    let cutoff = PINV_RCOND * s_max;
    let mut rank = 0;
    let mut s_min = f64::INFINITY;
    let inv_vals = eig.eigenvalues.map(|v| {
        if v > cutoff {
            rank += 1;
            s_min = s_min.min(v);
            1.0 / v
        } else {
            0.0
        }
    });
    let s_pinv =
        &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();

    let top_right = -&ainv_b * &s_pinv;
    let top_left = &a_inv - &top_right * ainv_b.transpose();
    g.view_mut((0, 0), (n_b, n_b)).copy_from(&top_left);
    g.view_mut((0, n_b), (n_b, n_a)).copy_from(&top_right);
    g.view_mut((n_b, 0), (n_a, n_b))
        .copy_from(&top_right.transpose());
    g.view_mut((n_b, n_b), (n_a, n_a)).copy_from(&s_pinv);
    Ok((g, rank, [a_max / a_min, s_max / s_min]))
}

/// `[Phi | J]` with `J` the stacked network Jacobian, projected column-wise for orthogonal models.
pub fn stacked_jacobian(model: &AugmentedModel, ctx: &TrainingContext) -> Result<Matrix> {
    let phi = ctx.phi();
    let j = model.mlp.jacobian_batch(ctx.states())?;
    let (rows, n_b, n_a) = (phi.rows(), phi.cols(), j.cols());
    let mut psi = Matrix::zeros(rows, n_b + n_a);
    for r in 0..rows {
        psi.row_mut(r)[..n_b].copy_from_slice(phi.row(r));
        psi.row_mut(r)[n_b..].copy_from_slice(j.row(r));
    }
    if model.structure == Structure::Orthogonal {
        for c in 0..n_a {
            let col = ctx.fact().apply_projector(&j.column(c))?;
            psi.set_column(n_b + c, &col);
        }
    }
    Ok(psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::factorize;
    use proptest::prelude::*;

    fn column_matrix(cols: &[Vec<f64>]) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..cols[0].len())
            .map(|r| cols.iter().map(|c| c[r]).collect())
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    fn grid(n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| -0.9 + 1.7 * k as f64 / (n - 1) as f64 + 0.01 * ((k * 7) % 5) as f64)
            .collect()
    }

    fn odd_cubic_phi(u: &[f64]) -> Matrix {
        column_matrix(&[u.to_vec(), u.iter().map(|v| v * v * v).collect()])
    }

    #[test]
    fn single_column_example() {
        let phi = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let fact = factorize(&phi).unwrap();
        assert_eq!(orthogonality_defect(&phi, &[1.0, 1.0]).unwrap(), 3.0);
        assert!((theoretical_orth_error(&fact, &[1.0, 1.0]).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn representable_delta_moves_the_baseline_fully() {
        let u = grid(20);
        let phi = odd_cubic_phi(&u);
        let fact = factorize(&phi).unwrap();
        let delta = phi.matvec(&[0.3, -0.4]).unwrap();
        assert!((theoretical_orth_error(&fact, &delta).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn symmetric_design_has_zero_defect() {
        let half = grid(16);
        let u: Vec<f64> = half
            .iter()
            .copied()
            .chain(half.iter().map(|v| -v))
            .collect();
        let phi = odd_cubic_phi(&u);
        let delta: Vec<f64> = u.iter().map(|v| 0.01 - 0.5 * v * v).collect();
        assert_eq!(orthogonality_defect(&phi, &delta).unwrap(), 0.0);
        assert_eq!(
            theoretical_orth_error(&factorize(&phi).unwrap(), &delta).unwrap(),
            0.0
        );
    }

    #[test]
    fn theta_b_error_is_euclidean() {
        assert_eq!(theta_b_error(&[1.0, 0.1], &[1.0, 0.1]).unwrap(), 0.0);
        assert!((theta_b_error(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 5.0).abs() < 1e-15);
        assert!(theta_b_error(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn inv2(a: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        [
            [a[1][1] / det, -a[0][1] / det],
            [-a[1][0] / det, a[0][0] / det],
        ]
    }

    #[test]
    fn baseline_only_sandwich_is_twice_sigma_times_inverse_gram() {
        let u = grid(40);
        let phi = odd_cubic_phi(&u);
        let r: Vec<f64> = (0..40)
            .map(|k| if k % 3 == 0 { 0.02 } else { -0.01 })
            .collect();
        let rep = sandwich_covariance(&phi, 2, &r, 1).unwrap();
        let n = 40.0;
        let sigma = r.iter().map(|v| v * v).sum::<f64>() / n;
        let g = phi.gram();
        let h = inv2([
            [g[(0, 0)] / n, g[(0, 1)] / n],
            [g[(1, 0)] / n, g[(1, 1)] / n],
        ]);
        for i in 0..2 {
            for j in 0..2 {
                let want = 2.0 * sigma * h[i][j];
                assert!(
                    (rep.p_hat[(i, j)] - want).abs() <= 1e-10 * want.abs().max(1e-12),
                    "{i}{j}"
                );
            }
        }
        assert!((rep.sigma_hat[(0, 0)] - sigma).abs() < 1e-18);
        assert_eq!(rep.network_rank, 0);
        assert_eq!(rep.max_cross_block, 0.0);
        let c = rep.covariance();
        assert!((c[(0, 0)] - rep.p_hat[(0, 0)] / n).abs() < 1e-18);
    }

    #[test]
    fn orthogonal_network_columns_give_block_diagonal_estimate() {
        let u = grid(50);
        let phi = odd_cubic_phi(&u);
        let fact = factorize(&phi).unwrap();
        let raw = [
            u.iter().map(|v| v.tanh()).collect::<Vec<_>>(),
            u.iter().map(|v| (2.0 * v).sin() + 0.3).collect(),
            u.iter().map(|v| v * v).collect(),
        ];
        let mut cols = vec![phi.column(0), phi.column(1)];
        cols.extend(raw.iter().map(|c| fact.apply_projector(c).unwrap()));
        let psi = column_matrix(&cols);
        let r: Vec<f64> = u.iter().map(|v| 0.01 * (5.0 * v).cos()).collect();
        let rep = sandwich_covariance(&psi, 2, &r, 1).unwrap();
        let scale = rep.p_hat.max_abs();
        assert!(
            rep.max_cross_block <= 1e-9 * scale,
            "{} vs {scale}",
            rep.max_cross_block
        );
        assert!(rep.gram_cross_block <= 1e-12);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(rep.p_hat[(i, j)], rep.p_hat[(j, i)]);
            }
        }
    }

    #[test]
    fn zero_residuals_give_zero_covariance() {
        let u = grid(12);
        let phi = odd_cubic_phi(&u);
        let psi = column_matrix(&[
            phi.column(0),
            phi.column(1),
            u.iter().map(|v| v.tanh()).collect(),
        ]);
        let rep = sandwich_covariance(&psi, 2, &[0.0; 12], 1).unwrap();
        assert!(rep.p_hat.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(rep.max_cross_block, 0.0);
    }

    #[test]
    fn collinear_network_columns_are_pseudo_inverted() {
        let u = grid(30);
        let t: Vec<f64> = u.iter().map(|v| (1.3 * v).tanh()).collect();
        let psi = column_matrix(&[
            u.clone(),
            u.iter().map(|v| v * v * v).collect(),
            t.clone(),
            t,
        ]);
        let r: Vec<f64> = u.iter().map(|v| 0.05 * v * v - 0.01).collect();
        let rep = sandwich_covariance(&psi, 2, &r, 1).unwrap();
        assert_eq!(rep.network_rank, 1);
        assert!(rep.p_hat.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn singular_baseline_block_is_reported() {
        let u = grid(10);
        let psi = column_matrix(&[u.clone(), u.clone(), u.iter().map(|v| v.tanh()).collect()]);
        let err = sandwich_covariance(&psi, 2, &[0.1; 10], 1).unwrap_err();
        assert_eq!(err, Error::SingularGram { block: "baseline" });
        assert!(sandwich_covariance(&psi, 4, &[0.1; 10], 1).is_err());
        assert!(sandwich_covariance(&psi, 2, &[0.1; 9], 1).is_err());
    }

    proptest! {
        #[test]
        fn worst_case_standard_error_equals_true_parameter_norm(
            u in prop::collection::vec(-1.0f64..1.0, 8..40),
            a in prop::array::uniform2(-2.0f64..2.0),
            c in prop::array::uniform3(-0.5f64..0.5),
        ) {
            let phi = odd_cubic_phi(&u);
            let Ok(fact) = factorize(&phi) else { return Ok(()) };
            prop_assume!(fact.cond_estimate() < 1e6);
            let delta: Vec<f64> = u.iter().map(|v| c[0] + c[1] * v * v + c[2] * (3.0 * v).sin()).collect();
            let base = phi.matvec(&a).unwrap();
            let f: Vec<f64> = base.iter().zip(&delta).map(|(x, d)| x + d).collect();
            let e = theoretical_std_error(&fact, &f, &delta).unwrap();
            let want = norm2(&a);
            prop_assert!((e - want).abs() <= 1e-9 * want.max(1.0), "{} vs {}", e, want);
        }
    }
}
