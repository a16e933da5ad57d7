//! Per-node linear model engine.
//!
//! Fits the Gaussian node model by Householder QR, exposes the fitted
//! objective (negative log-likelihood at the maximum-likelihood variance),
//! the per-observation score contributions used by the instability tests,
//! and Wald inference for the coefficients. Rank problems are diagnosed
//! before solving and reported with the offending column names so callers
//! (notably the stratified-intercept split guard) can tell *why* a candidate
//! model is unfittable.

use nalgebra::DMatrix;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

/// Residual-variance floor: a perfect fit reports this variance instead of
/// zero so the Gaussian objective stays finite. Shared as a documented
/// convention with the reference implementations used in tests.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Relative tolerance (against the largest Gram diagonal) below which a
/// pivoted-elimination diagonal is treated as zero, i.e. the design is
/// declared rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// A dense design, stored column by column with a label per column.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    labels: Vec<String>,
    columns: Vec<Vec<f64>>,
    n_rows: usize,
}

impl DesignMatrix {
    /// Panics if column lengths disagree (caller contract).
    pub fn new(labels: Vec<String>, columns: Vec<Vec<f64>>) -> Self {
        assert_eq!(labels.len(), columns.len(), "one label per column");
        let n_rows = columns.first().map_or(0, Vec::len);
        for c in &columns {
            assert_eq!(c.len(), n_rows, "ragged design columns");
        }
        DesignMatrix {
            labels,
            columns,
            n_rows,
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_rows, self.columns.len(), |i, j| self.columns[j][i])
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FittedLinearModel {
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    /// y - (X beta + offset).
    pub residuals: Vec<f64>,
    /// X beta + offset.
    pub fitted: Vec<f64>,
    pub rss: f64,
    /// Maximum-likelihood residual variance, RSS / n (unfloored).
    pub sigma_sq_ml: f64,
    /// Gaussian negative log-likelihood at the floored ML variance; the
    /// quantity split search minimizes.
    pub objective: f64,
    /// Per-observation score contributions, scores[i][j] = x_ij * r_i.
    pub scores: Vec<Vec<f64>>,
    /// Coefficient covariance s^2 (X'X)^-1 with s^2 = RSS / (n - p).
    pub covariance: Vec<Vec<f64>>,
    pub n_obs: usize,
    pub df_residual: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct CoefficientInference {
    pub label: String,
    pub estimate: f64,
    pub std_error: f64,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Error)]
pub enum LinRegError {
    #[error("design has no columns")]
    EmptyDesign,
    #[error("design has {n} rows for {p} coefficients; need more rows than coefficients")]
    Underdetermined { n: usize, p: usize },
    #[error("design is rank deficient; dependent columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },
}

/// Gaussian negative log-likelihood at the floored ML variance `rss / n`.
pub fn gaussian_objective(rss: f64, n: usize) -> f64 {
    let nf = n as f64;
    let sigma_sq = (rss / nf).max(VARIANCE_FLOOR);
    0.5 * nf * (2.0 * std::f64::consts::PI * sigma_sq).ln() + rss / (2.0 * sigma_sq)
}

/// Diagnose rank deficiency by pivoted elimination on the Gram matrix.
/// On failure the error names every column left unpivoted — exactly the
/// collectively dependent set (an all-zero column, e.g. an intercept for a
/// trial level absent from the node, always lands there).
pub(crate) fn check_rank(gram: &DMatrix<f64>, labels: &[String]) -> Result<(), LinRegError> {
    let p = gram.nrows();
    let mut work = gram.clone();
    let max_diag = (0..p).map(|j| work[(j, j)]).fold(0.0_f64, f64::max);
    let tol = RANK_TOLERANCE * max_diag.max(f64::MIN_POSITIVE);
    let mut pivoted = vec![false; p];
    for _ in 0..p {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..p {
            if !pivoted[j] {
                let d = work[(j, j)];
                if best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((j, d));
                }
            }
        }
        let (j, d) = best.expect("at least one unpivoted column remains");
        if d <= tol {
            let columns = (0..p)
                .filter(|&k| !pivoted[k])
                .map(|k| labels[k].clone())
                .collect();
            return Err(LinRegError::RankDeficient { columns });
        }
        pivoted[j] = true;
        for a in 0..p {
            if pivoted[a] {
                continue;
            }
            let f = work[(a, j)] / d;
            if f != 0.0 {
                for b in 0..p {
                    if !pivoted[b] {
                        let w = work[(j, b)];
                        work[(a, b)] -= f * w;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Fit ordinary least squares of `y - offset` on the design by Householder
/// QR. Requires strictly more rows than columns and a full-rank design.
pub fn fit_ols(
    design: &DesignMatrix,
    y: &[f64],
    offset: Option<&[f64]>,
) -> Result<FittedLinearModel, LinRegError> {
    let n = design.n_rows();
    let p = design.n_cols();
    if p == 0 {
        return Err(LinRegError::EmptyDesign);
    }
    assert_eq!(y.len(), n, "response length must match design rows");
    if let Some(o) = offset {
        assert_eq!(o.len(), n, "offset length must match design rows");
    }
    if n <= p {
        return Err(LinRegError::Underdetermined { n, p });
    }

    let x = design.to_matrix();
    let gram = x.transpose() * &x;
    check_rank(&gram, design.labels())?;

    let target: Vec<f64> = match offset {
        Some(o) => y.iter().zip(o).map(|(a, b)| a - b).collect(),
        None => y.to_vec(),
    };
    let yv = nalgebra::DVector::from_column_slice(&target);

    let qr = x.clone().qr();
    let qty = qr.q().transpose() * &yv;
    let r = qr.r();
    let beta = r
        .solve_upper_triangular(&qty)
        .expect("triangular solve after rank check");

    let fitted_adj = &x * &beta;
    let residuals: Vec<f64> = (0..n).map(|i| target[i] - fitted_adj[i]).collect();
    let fitted: Vec<f64> = match offset {
        Some(o) => (0..n).map(|i| fitted_adj[i] + o[i]).collect(),
        None => fitted_adj.iter().copied().collect(),
    };
    let rss: f64 = residuals.iter().map(|r| r * r).sum();

    let scores: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..p).map(|j| design.columns()[j][i] * residuals[i]).collect())
        .collect();

    let df_residual = n - p;
    let s_sq = rss / df_residual as f64;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .expect("triangular solve after rank check");
    let xtx_inv = &r_inv * r_inv.transpose();
    let covariance: Vec<Vec<f64>> = (0..p)
        .map(|i| (0..p).map(|j| s_sq * xtx_inv[(i, j)]).collect())
        .collect();

    Ok(FittedLinearModel {
        labels: design.labels().to_vec(),
        coefficients: beta.iter().copied().collect(),
        residuals,
        fitted,
        rss,
        sigma_sq_ml: rss / n as f64,
        objective: gaussian_objective(rss, n),
        scores,
        covariance,
        n_obs: n,
        df_residual,
    })
}

/// Wald t-inference for every coefficient of a fitted model. A degenerate
/// (zero-variance) fit reports p = 1 for zero estimates and p = 0 otherwise.
pub fn wald_inference(fit: &FittedLinearModel) -> Vec<CoefficientInference> {
    let df = fit.df_residual as f64;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df_residual >= 1");
    fit.coefficients
        .iter()
        .enumerate()
        .map(|(j, &estimate)| {
            let var = fit.covariance[j][j].max(0.0);
            let std_error = var.sqrt();
            let (statistic, p_value) = if std_error > 0.0 {
                let t = estimate / std_error;
                (t, (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0))
            } else if estimate == 0.0 {
                (0.0, 1.0)
            } else {
                (f64::INFINITY.copysign(estimate), 0.0)
            };
            CoefficientInference {
                label: fit.labels[j].clone(),
                estimate,
                std_error,
                statistic,
                p_value,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use oracles::DeskRng;

    fn random_instance(rng: &mut DeskRng, n: usize, p: usize) -> (DesignMatrix, Vec<f64>) {
        let mut columns = vec![vec![1.0; n]];
        let mut labels = vec!["intercept".to_string()];
        for j in 1..p {
            columns.push((0..n).map(|_| rng.normal()).collect());
            labels.push(format!("x{j}"));
        }
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let mut v = rng.normal();
                for (j, col) in columns.iter().enumerate() {
                    v += (j as f64 + 0.5) * col[i];
                }
                v
            })
            .collect();
        (DesignMatrix::new(labels, columns), y)
    }

    #[test]
    fn qr_fit_matches_normal_equations_oracle() {
        let mut rng = DeskRng::new(11);
        for rep in 0..60 {
            let n = 20 + (rng.uniform() * 40.0) as usize;
            let p = 1 + rep % 5;
            let (design, y) = random_instance(&mut rng, n, p);
            let fit = fit_ols(&design, &y, None).unwrap();
            let oracle = oracles::ols_normal_equations(design.columns(), &y, None).unwrap();
            for (a, b) in fit.coefficients.iter().zip(&oracle.coefficients) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
            }
            assert!((fit.rss - oracle.rss).abs() <= 1e-10 * (1.0 + oracle.rss));
            assert!((fit.objective - oracle.objective).abs() <= 1e-9 * (1.0 + oracle.objective.abs()));
        }
    }

    #[test]
    fn offset_fit_equals_fit_on_shifted_response() {
        let mut rng = DeskRng::new(22);
        let (design, y) = random_instance(&mut rng, 40, 3);
        let offset: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
        let shifted: Vec<f64> = y.iter().zip(&offset).map(|(a, b)| a - b).collect();
        let with_offset = fit_ols(&design, &y, Some(&offset)).unwrap();
        let on_shifted = fit_ols(&design, &shifted, None).unwrap();
        assert_eq!(with_offset.coefficients, on_shifted.coefficients);
        assert_eq!(with_offset.rss, on_shifted.rss);
        for i in 0..40 {
            assert!((with_offset.fitted[i] - (on_shifted.fitted[i] + offset[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn covariance_matches_inverted_gram_oracle() {
        let mut rng = DeskRng::new(33);
        let (design, y) = random_instance(&mut rng, 50, 4);
        let fit = fit_ols(&design, &y, None).unwrap();
        let p = design.n_cols();
        let gram: Vec<Vec<f64>> = (0..p)
            .map(|i| {
                (0..p)
                    .map(|j| {
                        design.columns()[i]
                            .iter()
                            .zip(&design.columns()[j])
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let inv = oracles::invert_gauss_jordan(gram).unwrap();
        let s_sq = fit.rss / fit.df_residual as f64;
        for i in 0..p {
            for j in 0..p {
                let want = s_sq * inv[i][j];
                let got = fit.covariance[i][j];
                assert!((want - got).abs() <= 1e-9 * (1.0 + want.abs()), "{want} vs {got}");
            }
        }
    }

    #[test]
    fn wald_p_values_match_quadrature_oracle() {
        let mut rng = DeskRng::new(44);
        let (design, y) = random_instance(&mut rng, 35, 3);
        let fit = fit_ols(&design, &y, None).unwrap();
        for inf in wald_inference(&fit) {
            let oracle_p =
                oracles::t_two_sided_p_quadrature(inf.statistic, fit.df_residual as f64);
            assert!(
                (inf.p_value - oracle_p).abs() < 1e-6,
                "{} vs {}",
                inf.p_value,
                oracle_p
            );
        }
    }

    #[test]
    fn scores_sum_to_zero_over_each_design_column() {
        let mut rng = DeskRng::new(55);
        let (design, y) = random_instance(&mut rng, 45, 4);
        let fit = fit_ols(&design, &y, None).unwrap();
        for j in 0..design.n_cols() {
            let s: f64 = fit.scores.iter().map(|row| row[j]).sum();
            assert!(s.abs() < 1e-8, "column {j} score sum {s}");
        }
    }

    #[test]
    fn duplicate_column_is_reported_with_its_label() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let design = DesignMatrix::new(
            vec!["intercept".into(), "x".into(), "x_copy".into()],
            vec![vec![1.0; 5], x.clone(), x],
        );
        let err = fit_ols(&design, &[1.0, 2.0, 3.0, 4.0, 5.0], None).unwrap_err();
        match err {
            LinRegError::RankDeficient { columns } => {
                assert!(!columns.is_empty());
                assert!(columns.iter().all(|c| c == "x" || c == "x_copy"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn all_zero_column_is_always_named() {
        let design = DesignMatrix::new(
            vec!["intercept".into(), "ghost".into()],
            vec![vec![1.0; 6], vec![0.0; 6]],
        );
        let err = fit_ols(&design, &[1.0, 2.0, 1.5, 2.5, 1.0, 2.0], None).unwrap_err();
        match err {
            LinRegError::RankDeficient { columns } => assert_eq!(columns, vec!["ghost"]),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn underdetermined_design_is_rejected() {
        let design = DesignMatrix::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 2.0], vec![3.0, 1.0]],
        );
        let err = fit_ols(&design, &[1.0, 2.0], None).unwrap_err();
        assert!(matches!(err, LinRegError::Underdetermined { n: 2, p: 2 }));
    }

    #[test]
    fn perfect_fit_keeps_objective_finite() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let design = DesignMatrix::new(
            vec!["intercept".into(), "x".into()],
            vec![vec![1.0; 4], x],
        );
        let fit = fit_ols(&design, &y, None).unwrap();
        assert!(fit.rss < 1e-20);
        assert!(fit.objective.is_finite());
        let inf = wald_inference(&fit);
        assert!(inf.iter().all(|c| c.p_value >= 0.0 && c.p_value <= 1.0));
    }
}
