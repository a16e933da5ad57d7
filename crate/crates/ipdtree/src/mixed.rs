//! Linear mixed-model engine for trial-level random effects.
//!
//! Fits y = X beta + b0[trial] + b1[trial] * treatment + noise by restricted
//! maximum likelihood, with the random intercept and random treatment-slope
//! components switchable per model. The variance ratios are profiled out of
//! the criterion analytically (per-trial Woodbury identities on cached
//! cross-products make one evaluation O(K p^2)), the remaining one- or
//! two-dimensional problem is solved by multistart Nelder-Mead in
//! log-ratio space, and every boundary subset is then re-polished with the
//! corresponding ratios pinned at zero — so a variance component that belongs
//! on the boundary comes back as an exact 0.0, not a tiny positive number.

use crate::linreg::{CoefficientInference, DesignMatrix, VARIANCE_FLOOR};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Which trial-level random components the model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RandomSpec {
    InterceptOnly,
    TreatmentOnly,
    InterceptAndTreatment,
}

impl RandomSpec {
    fn active(self) -> Vec<usize> {
        match self {
            RandomSpec::InterceptOnly => vec![0],
            RandomSpec::TreatmentOnly => vec![1],
            RandomSpec::InterceptAndTreatment => vec![0, 1],
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MixedModelFit {
    pub labels: Vec<String>,
    pub fixed_coefficients: Vec<f64>,
    /// GLS covariance sigma_hat^2 (X' W^-1 X)^-1.
    pub covariance: Vec<Vec<f64>>,
    /// Random-intercept variance; exactly 0.0 when the component is off or
    /// the optimum sits on the boundary.
    pub tau0_sq: f64,
    /// Random treatment-slope variance; same exact-zero convention.
    pub tau1_sq: f64,
    pub sigma_sq: f64,
    /// Predicted random intercept per trial (length = number of trials).
    pub blup_intercept: Vec<f64>,
    /// Predicted random treatment slope per trial.
    pub blup_slope: Vec<f64>,
    /// -2 times the profiled restricted log-likelihood at the optimum.
    pub reml_objective: f64,
    pub converged: bool,
    pub n_obs: usize,
    pub n_trials: usize,
}

#[derive(Debug, Error)]
pub enum MixedError {
    #[error("design has no columns")]
    EmptyDesign,
    #[error("design has {n} rows for {p} coefficients; need more rows than coefficients")]
    Underdetermined { n: usize, p: usize },
    #[error("fixed-effect design is rank deficient; dependent columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },
    #[error("restricted-likelihood evaluation failed at the optimum")]
    Degenerate,
}

/// Per-trial cross-product caches; everything the criterion needs that does
/// not depend on the variance ratios.
struct RemlWorkspace {
    n: usize,
    p: usize,
    n_trials: usize,
    /// U'U per trial with U = [1, treatment]: [[n_k, s_k], [s_k, s_k]].
    c_uu: Vec<Matrix2<f64>>,
    /// U'X per trial (2 x p).
    c_ux: Vec<DMatrix<f64>>,
    /// U'y per trial.
    c_uy: Vec<Vector2<f64>>,
    /// Global X'X.
    g_xx: DMatrix<f64>,
    /// Global X'y.
    g_xy: DVector<f64>,
    /// Global y'y.
    q_yy: f64,
}

struct RemlPoint {
    neg2: f64,
    beta: DVector<f64>,
    sigma_sq: f64,
}

struct RemlFull {
    point: RemlPoint,
    covariance: DMatrix<f64>,
    /// S_k = (I + D U'U)^-1 D per trial; exact zero rows/columns for
    /// zero-ratio components.
    s_per_trial: Vec<Matrix2<f64>>,
}

impl RemlWorkspace {
    fn build(
        design: &DesignMatrix,
        y: &[f64],
        trial_of: &[u32],
        treatment: &[f64],
        n_trials: usize,
    ) -> Self {
        let n = design.n_rows();
        let p = design.n_cols();
        let mut c_uu = vec![Matrix2::zeros(); n_trials];
        let mut c_ux = vec![DMatrix::zeros(2, p); n_trials];
        let mut c_uy = vec![Vector2::zeros(); n_trials];
        let mut g_xx = DMatrix::zeros(p, p);
        let mut g_xy = DVector::zeros(p);
        let mut q_yy = 0.0;
        for i in 0..n {
            let k = trial_of[i] as usize;
            let t = treatment[i];
            c_uu[k][(0, 0)] += 1.0;
            c_uu[k][(0, 1)] += t;
            c_uu[k][(1, 0)] += t;
            c_uu[k][(1, 1)] += t * t;
            for j in 0..p {
                let x = design.columns()[j][i];
                c_ux[k][(0, j)] += x;
                c_ux[k][(1, j)] += t * x;
                g_xy[j] += x * y[i];
                for l in 0..=j {
                    g_xx[(j, l)] += x * design.columns()[l][i];
                }
            }
            c_uy[k][0] += y[i];
            c_uy[k][1] += t * y[i];
            q_yy += y[i] * y[i];
        }
        for j in 0..p {
            for l in 0..j {
                g_xx[(l, j)] = g_xx[(j, l)];
            }
        }
        RemlWorkspace {
            n,
            p,
            n_trials,
            c_uu,
            c_ux,
            c_uy,
            g_xx,
            g_xy,
            q_yy,
        }
    }

    /// S_k = (I + D C_uu)^-1 D and ln|I + D C_uu| for one trial. The
    /// determinant equals ln|W_k| by the matrix determinant lemma.
    fn trial_s(&self, k: usize, theta0: f64, theta1: f64) -> Option<(Matrix2<f64>, f64)> {
        let c = &self.c_uu[k];
        let m = Matrix2::new(
            1.0 + theta0 * c[(0, 0)],
            theta0 * c[(0, 1)],
            theta1 * c[(1, 0)],
            1.0 + theta1 * c[(1, 1)],
        );
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        let minv = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det;
        let mut s = minv * Matrix2::new(theta0, 0.0, 0.0, theta1);
        // Mathematically symmetric; make it so bit-for-bit.
        let off = 0.5 * (s[(0, 1)] + s[(1, 0)]);
        s[(0, 1)] = off;
        s[(1, 0)] = off;
        Some((s, det.ln()))
    }

    /// Profiled criterion at the given variance ratios:
    /// (n-p) ln sigma_hat^2 + ln|W| + ln|X'W^-1 X| + (n-p)(1 + ln 2 pi).
    fn evaluate(&self, theta0: f64, theta1: f64) -> Option<RemlPoint> {
        let mut a_xx = self.g_xx.clone();
        let mut a_xy = self.g_xy.clone();
        let mut a_yy = self.q_yy;
        let mut logdet_w = 0.0;
        for k in 0..self.n_trials {
            let (s, ld) = self.trial_s(k, theta0, theta1)?;
            logdet_w += ld;
            let ux = &self.c_ux[k];
            let uy = &self.c_uy[k];
            let s_ux = s * ux; // 2 x p
            a_xx -= ux.transpose() * &s_ux;
            a_xy -= ux.transpose() * (s * uy);
            a_yy -= (uy.transpose() * (s * uy))[(0, 0)];
        }
        let chol = a_xx.clone().cholesky()?;
        let logdet_a: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let beta = chol.solve(&a_xy);
        let quad = (a_yy - a_xy.dot(&beta)).max(0.0);
        let df = (self.n - self.p) as f64;
        let sigma_sq = (quad / df).max(VARIANCE_FLOOR);
        let neg2 = df * sigma_sq.ln()
            + logdet_w
            + logdet_a
            + df * (1.0 + (2.0 * std::f64::consts::PI).ln());
        if !neg2.is_finite() {
            return None;
        }
        Some(RemlPoint {
            neg2,
            beta,
            sigma_sq,
        })
    }

    fn finalize(&self, theta0: f64, theta1: f64) -> Option<RemlFull> {
        let point = self.evaluate(theta0, theta1)?;
        let mut a_xx = self.g_xx.clone();
        let mut s_per_trial = Vec::with_capacity(self.n_trials);
        for k in 0..self.n_trials {
            let (s, _) = self.trial_s(k, theta0, theta1)?;
            let ux = &self.c_ux[k];
            a_xx -= ux.transpose() * (s * ux);
            s_per_trial.push(s);
        }
        let inv = a_xx.cholesky()?.inverse();
        Some(RemlFull {
            covariance: inv * point.sigma_sq,
            point,
            s_per_trial,
        })
    }
}

// ---------------------------------------------------------------------------
// Nelder-Mead over the active log-ratios
// ---------------------------------------------------------------------------

const NM_BUDGET: usize = 500;
const NM_TOL: f64 = 1e-8;
/// Candidates whose criterion is within this of the best are considered tied;
/// ties resolve toward more exact-zero components.
const BOUNDARY_PREFERENCE_TOL: f64 = 1e-8;

struct NmOutcome {
    point: Vec<f64>,
    value: f64,
    converged: bool,
}

fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    start: &[f64],
    step: f64,
) -> NmOutcome {
    let dim = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((start.to_vec(), f(start)));
    for d in 0..dim {
        let mut v = start.to_vec();
        v[d] += step;
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let mut evals = dim + 1;
    let mut converged = false;
    while evals < NM_BUDGET {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[dim].1 - simplex[0].1;
        if spread.abs() < NM_TOL {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|j| simplex[..dim].iter().map(|(v, _)| v[j]).sum::<f64>() / dim as f64)
            .collect();
        let worst = simplex[dim].clone();
        let reflect: Vec<f64> = (0..dim)
            .map(|j| centroid[j] + (centroid[j] - worst.0[j]))
            .collect();
        let fr = f(&reflect);
        evals += 1;
        if fr < simplex[0].1 {
            let expand: Vec<f64> = (0..dim)
                .map(|j| centroid[j] + 2.0 * (centroid[j] - worst.0[j]))
                .collect();
            let fe = f(&expand);
            evals += 1;
            simplex[dim] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflect, fr);
        } else {
            let contract: Vec<f64> = (0..dim)
                .map(|j| centroid[j] + 0.5 * (worst.0[j] - centroid[j]))
                .collect();
            let fc = f(&contract);
            evals += 1;
            if fc < worst.1 {
                simplex[dim] = (contract, fc);
            } else {
                for i in 1..=dim {
                    let shrunk: Vec<f64> = (0..dim)
                        .map(|j| simplex[0].0[j] + 0.5 * (simplex[i].0[j] - simplex[0].0[j]))
                        .collect();
                    let fs = f(&shrunk);
                    evals += 1;
                    simplex[i] = (shrunk, fs);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    NmOutcome {
        point: simplex[0].0.clone(),
        value: simplex[0].1,
        converged,
    }
}

fn theta_from_log(u: f64) -> f64 {
    u.clamp(-700.0, 60.0).exp()
}

#[derive(Clone, Debug)]
struct Candidate {
    theta: [f64; 2],
    value: f64,
    converged: bool,
    exact_zeros: usize,
}

/// Optimize the profiled criterion over the active ratios: multistart
/// Nelder-Mead on the interior, then one polish per boundary subset with
/// those ratios pinned at exactly zero.
fn optimize(ws: &RemlWorkspace, active: &[usize]) -> Option<Candidate> {
    let eval_theta = |theta: &[f64; 2]| -> f64 {
        ws.evaluate(theta[0], theta[1])
            .map_or(f64::INFINITY, |pt| pt.neg2)
    };

    let mut candidates: Vec<Candidate> = Vec::new();

    // A "free set" is the subset of active components allowed off the
    // boundary; every other active component is pinned at zero. The full
    // free set is the interior search, the empty one is the origin.
    let subsets: Vec<Vec<usize>> = match active.len() {
        1 => vec![vec![active[0]], vec![]],
        2 => vec![
            vec![active[0], active[1]],
            vec![active[0]],
            vec![active[1]],
            vec![],
        ],
        _ => unreachable!("at most two random components"),
    };

    for free in &subsets {
        if free.is_empty() {
            let theta = [0.0, 0.0];
            let value = eval_theta(&theta);
            candidates.push(Candidate {
                theta,
                value,
                converged: true,
                exact_zeros: active.len(),
            });
            continue;
        }
        let mut f = |u: &[f64]| -> f64 {
            let mut theta = [0.0, 0.0];
            for (slot, &comp) in free.iter().enumerate() {
                theta[comp] = theta_from_log(u[slot]);
            }
            eval_theta(&theta)
        };
        let starts: Vec<Vec<f64>> = if free.len() == 1 {
            [0.01_f64, 0.1, 1.0, 10.0]
                .iter()
                .map(|t| vec![t.ln()])
                .collect()
        } else {
            [
                (0.01_f64, 0.01_f64),
                (0.1, 0.1),
                (1.0, 1.0),
                (1.0, 0.01),
                (0.01, 1.0),
            ]
            .iter()
            .map(|(a, b)| vec![a.ln(), b.ln()])
            .collect()
        };
        let mut best: Option<NmOutcome> = None;
        for start in &starts {
            let out = nelder_mead(&mut f, start, 1.0);
            if best.as_ref().is_none_or(|b| out.value < b.value) {
                best = Some(out);
            }
        }
        let best = best.expect("at least one start");
        let mut theta = [0.0, 0.0];
        for (slot, &comp) in free.iter().enumerate() {
            theta[comp] = theta_from_log(best.point[slot]);
        }
        candidates.push(Candidate {
            theta,
            value: best.value,
            converged: best.converged,
            exact_zeros: active.len() - free.len(),
        });
    }

    let best_value = candidates
        .iter()
        .map(|c| c.value)
        .min_by(f64::total_cmp)?;
    if !best_value.is_finite() {
        return None;
    }
    candidates
        .into_iter()
        .filter(|c| c.value <= best_value + BOUNDARY_PREFERENCE_TOL)
        .max_by(|a, b| {
            a.exact_zeros
                .cmp(&b.exact_zeros)
                .then(b.value.total_cmp(&a.value))
        })
}

/// Fit the mixed model by profiled REML.
pub fn fit_lmm(
    design: &DesignMatrix,
    y: &[f64],
    trial_of: &[u32],
    treatment: &[f64],
    n_trials: usize,
    spec: RandomSpec,
) -> Result<MixedModelFit, MixedError> {
    let n = design.n_rows();
    let p = design.n_cols();
    if p == 0 {
        return Err(MixedError::EmptyDesign);
    }
    assert_eq!(y.len(), n, "response length must match design rows");
    assert_eq!(trial_of.len(), n, "trial labels must match design rows");
    assert_eq!(treatment.len(), n, "treatment must match design rows");
    assert!(n_trials >= 1, "need at least one trial");
    assert!(
        trial_of.iter().all(|&k| (k as usize) < n_trials),
        "trial code out of range"
    );
    if n <= p {
        return Err(MixedError::Underdetermined { n, p });
    }

    let ws = RemlWorkspace::build(design, y, trial_of, treatment, n_trials);
    if let Err(crate::linreg::LinRegError::RankDeficient { columns }) =
        crate::linreg::check_rank(&ws.g_xx, design.labels())
    {
        return Err(MixedError::RankDeficient { columns });
    }

    let active = spec.active();
    let winner = optimize(&ws, &active).ok_or(MixedError::Degenerate)?;
    let full = ws
        .finalize(winner.theta[0], winner.theta[1])
        .ok_or(MixedError::Degenerate)?;

    let sigma_sq = full.point.sigma_sq;
    let beta = &full.point.beta;

    // BLUPs per trial: theta_m * [ (I - C_uu S) (U'y - U'X beta) ]_m ; the
    // multiplication by theta_m keeps switched-off components at exact zero.
    let mut blup_intercept = vec![0.0; n_trials];
    let mut blup_slope = vec![0.0; n_trials];
    for k in 0..n_trials {
        let u_r = ws.c_uy[k] - &ws.c_ux[k] * beta;
        let w_ur = u_r - ws.c_uu[k] * (full.s_per_trial[k] * u_r);
        // Guard against -0.0 from 0.0 * negative: boundary components must
        // predict a literal zero offset.
        blup_intercept[k] = if winner.theta[0] == 0.0 {
            0.0
        } else {
            winner.theta[0] * w_ur[0]
        };
        blup_slope[k] = if winner.theta[1] == 0.0 {
            0.0
        } else {
            winner.theta[1] * w_ur[1]
        };
    }

    let covariance: Vec<Vec<f64>> = (0..p)
        .map(|i| (0..p).map(|j| full.covariance[(i, j)]).collect())
        .collect();

    Ok(MixedModelFit {
        labels: design.labels().to_vec(),
        fixed_coefficients: beta.iter().copied().collect(),
        covariance,
        tau0_sq: winner.theta[0] * sigma_sq,
        tau1_sq: winner.theta[1] * sigma_sq,
        sigma_sq,
        blup_intercept,
        blup_slope,
        reml_objective: winner.value,
        converged: winner.converged,
        n_obs: n,
        n_trials,
    })
}

/// Per-row predicted random offset b0[trial] + b1[trial] * treatment.
/// Exactly 0.0 for every row when both variance components are zero.
pub fn predict_random_offset(fit: &MixedModelFit, trial_of: &[u32], treatment: &[f64]) -> Vec<f64> {
    trial_of
        .iter()
        .zip(treatment)
        .map(|(&k, &t)| fit.blup_intercept[k as usize] + fit.blup_slope[k as usize] * t)
        .collect()
}

/// Wald inference for the fixed effects with normal reference (the REML
/// covariance already accounts for the estimated variance components).
pub fn lmm_inference(fit: &MixedModelFit) -> Vec<CoefficientInference> {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    fit.fixed_coefficients
        .iter()
        .enumerate()
        .map(|(j, &estimate)| {
            let var = fit.covariance[j][j].max(0.0);
            let std_error = var.sqrt();
            let (statistic, p_value) = if std_error > 0.0 {
                let z = estimate / std_error;
                (z, (2.0 * normal.cdf(-z.abs())).clamp(0.0, 1.0))
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

    struct Instance {
        design: DesignMatrix,
        y: Vec<f64>,
        trial_of: Vec<u32>,
        treatment: Vec<f64>,
        n_trials: usize,
    }

    /// K trials of m rows each; y = 1 + 0.5 x - 1 t + b0[k] + b1[k] t + e.
    fn simulate(seed: u64, k: usize, m: usize, tau0: f64, tau1: f64, sigma: f64) -> Instance {
        let mut rng = DeskRng::new(seed);
        let b0: Vec<f64> = (0..k).map(|_| tau0 * rng.normal()).collect();
        let b1: Vec<f64> = (0..k).map(|_| tau1 * rng.normal()).collect();
        let n = k * m;
        let mut trial_of = Vec::with_capacity(n);
        let mut treatment = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for kk in 0..k {
            for i in 0..m {
                let t = (i % 2) as f64;
                let xv = rng.normal();
                trial_of.push(kk as u32);
                treatment.push(t);
                x.push(xv);
                y.push(1.0 + 0.5 * xv - 1.0 * t + b0[kk] + b1[kk] * t + sigma * rng.normal());
            }
        }
        let design = DesignMatrix::new(
            vec!["intercept".into(), "x".into(), "treatment".into()],
            vec![vec![1.0; n], x, treatment.clone()],
        );
        Instance {
            design,
            y,
            trial_of,
            treatment,
            n_trials: k,
        }
    }

    #[test]
    fn criterion_matches_dense_oracle_on_a_grid() {
        let inst = simulate(101, 3, 16, 1.5, 0.8, 1.0);
        let ws = RemlWorkspace::build(
            &inst.design,
            &inst.y,
            &inst.trial_of,
            &inst.treatment,
            inst.n_trials,
        );
        let trial_usize: Vec<usize> = inst.trial_of.iter().map(|&k| k as usize).collect();
        for &t0 in &[0.0, 0.3, 1.2] {
            for &t1 in &[0.0, 0.5, 2.0] {
                let got = ws.evaluate(t0, t1).unwrap();
                let want = oracles::reml_profile_dense(
                    inst.design.columns(),
                    &inst.y,
                    &trial_usize,
                    &inst.treatment,
                    t0,
                    t1,
                )
                .unwrap();
                assert!(
                    (got.neg2 - want.neg2_reml).abs() < 1e-8 * (1.0 + want.neg2_reml.abs()),
                    "theta=({t0},{t1}): {} vs {}",
                    got.neg2,
                    want.neg2_reml
                );
                assert!((got.sigma_sq - want.sigma_sq).abs() < 1e-8 * (1.0 + want.sigma_sq));
                for (a, b) in got.beta.iter().zip(&want.beta) {
                    assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()));
                }
            }
        }
    }

    #[test]
    fn random_intercept_optimum_matches_grid_oracle() {
        let inst = simulate(202, 6, 12, 2.0, 0.0, 1.0);
        let fit = fit_lmm(
            &inst.design,
            &inst.y,
            &inst.trial_of,
            &inst.treatment,
            inst.n_trials,
            RandomSpec::InterceptOnly,
        )
        .unwrap();
        let trial_usize: Vec<usize> = inst.trial_of.iter().map(|&k| k as usize).collect();
        let grid = oracles::reml_grid_1d(
            inst.design.columns(),
            &inst.y,
            &trial_usize,
            &inst.treatment,
            true,
            30.0,
            1e-3,
        )
        .unwrap();
        assert!(
            fit.reml_objective <= grid.neg2_reml + 1e-6,
            "optimizer ({}) should not lose to the grid ({})",
            fit.reml_objective,
            grid.neg2_reml
        );
        assert!(
            (fit.tau0_sq - grid.tau0_sq).abs() < 5e-3 * (1.0 + grid.tau0_sq),
            "tau0^2 {} vs grid {}",
            fit.tau0_sq,
            grid.tau0_sq
        );
        assert!((fit.sigma_sq - grid.sigma_sq).abs() < 5e-3 * (1.0 + grid.sigma_sq));
        assert_eq!(fit.tau1_sq, 0.0);
        assert!(fit.blup_slope.iter().all(|&b| b == 0.0));
        assert!(fit.converged);
    }

    #[test]
    fn both_components_match_two_stage_grid_oracle() {
        let inst = simulate(303, 5, 14, 1.2, 1.5, 1.0);
        let fit = fit_lmm(
            &inst.design,
            &inst.y,
            &inst.trial_of,
            &inst.treatment,
            inst.n_trials,
            RandomSpec::InterceptAndTreatment,
        )
        .unwrap();
        let trial_usize: Vec<usize> = inst.trial_of.iter().map(|&k| k as usize).collect();
        let grid = oracles::reml_grid_2d(
            inst.design.columns(),
            &inst.y,
            &trial_usize,
            &inst.treatment,
            12.0,
            0.25,
            5e-3,
        )
        .unwrap();
        assert!(fit.reml_objective <= grid.neg2_reml + 1e-6);
        assert!(
            (fit.tau0_sq - grid.tau0_sq).abs() < 2e-2 * (1.0 + grid.tau0_sq),
            "tau0^2 {} vs {}",
            fit.tau0_sq,
            grid.tau0_sq
        );
        assert!(
            (fit.tau1_sq - grid.tau1_sq).abs() < 2e-2 * (1.0 + grid.tau1_sq),
            "tau1^2 {} vs {}",
            fit.tau1_sq,
            grid.tau1_sq
        );
    }

    #[test]
    fn balanced_one_way_matches_closed_form() {
        // Intercept-only fixed part, pure random-intercept structure.
        let k = 5;
        let m = 8;
        let mut rng = DeskRng::new(404);
        let shifts = [0.0, 4.0, -3.0, 2.0, -5.0];
        let mut y = Vec::new();
        let mut trial_of = Vec::new();
        for kk in 0..k {
            for _ in 0..m {
                trial_of.push(kk as u32);
                y.push(10.0 + shifts[kk] + rng.normal());
            }
        }
        let n = y.len();
        let design = DesignMatrix::new(vec!["intercept".into()], vec![vec![1.0; n]]);
        let treatment = vec![0.0; n];
        let fit = fit_lmm(&design, &y, &trial_of, &treatment, k, RandomSpec::InterceptOnly)
            .unwrap();
        let groups: Vec<usize> = trial_of.iter().map(|&g| g as usize).collect();
        let closed = oracles::balanced_oneway_reml(&y, &groups, k);
        assert!(
            (fit.tau0_sq - closed.tau_sq).abs() < 1e-5 * (1.0 + closed.tau_sq),
            "tau^2 {} vs {}",
            fit.tau0_sq,
            closed.tau_sq
        );
        assert!((fit.sigma_sq - closed.sigma_sq).abs() < 1e-5 * (1.0 + closed.sigma_sq));
        for (a, b) in fit.blup_intercept.iter().zip(&closed.blups) {
            assert!((a - b).abs() < 1e-4 * (1.0 + b.abs()), "blup {a} vs {b}");
        }
    }

    #[test]
    fn absent_slope_heterogeneity_lands_exactly_on_zero() {
        // Strong intercept heterogeneity, identical treatment effect across
        // trials: the slope variance belongs on the boundary.
        let inst = simulate(505, 6, 20, 3.0, 0.0, 1.0);
        let fit = fit_lmm(
            &inst.design,
            &inst.y,
            &inst.trial_of,
            &inst.treatment,
            inst.n_trials,
            RandomSpec::InterceptAndTreatment,
        )
        .unwrap();
        assert_eq!(fit.tau1_sq.to_bits(), 0.0_f64.to_bits());
        assert!(fit.blup_slope.iter().all(|&b| b.to_bits() == 0.0_f64.to_bits()));
        assert!(fit.tau0_sq > 1.0, "intercept variance should stay large");
    }

    #[test]
    fn treatment_only_spec_keeps_intercepts_at_zero() {
        let inst = simulate(606, 4, 18, 0.0, 1.5, 1.0);
        let fit = fit_lmm(
            &inst.design,
            &inst.y,
            &inst.trial_of,
            &inst.treatment,
            inst.n_trials,
            RandomSpec::TreatmentOnly,
        )
        .unwrap();
        assert_eq!(fit.tau0_sq, 0.0);
        assert!(fit.blup_intercept.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn variance_ratio_is_scale_invariant() {
        let inst = simulate(707, 5, 16, 1.5, 0.7, 1.2);
        let fit = |scale: f64| {
            let y: Vec<f64> = inst.y.iter().map(|v| v * scale).collect();
            fit_lmm(
                &inst.design,
                &y,
                &inst.trial_of,
                &inst.treatment,
                inst.n_trials,
                RandomSpec::InterceptAndTreatment,
            )
            .unwrap()
        };
        let base = fit(1.0);
        let scaled = fit(10.0);
        let ratio0 = base.tau0_sq / base.sigma_sq;
        let ratio0_scaled = scaled.tau0_sq / scaled.sigma_sq;
        assert!((ratio0 - ratio0_scaled).abs() < 1e-4 * (1.0 + ratio0));
        assert!((scaled.sigma_sq - 100.0 * base.sigma_sq).abs() < 1e-2 * scaled.sigma_sq);
        for (a, b) in base
            .fixed_coefficients
            .iter()
            .zip(&scaled.fixed_coefficients)
        {
            assert!((10.0 * a - b).abs() < 1e-4 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn gls_standard_errors_match_curvature_oracle() {
        let inst = simulate(808, 4, 15, 1.0, 0.8, 1.0);
        let fit = fit_lmm(
            &inst.design,
            &inst.y,
            &inst.trial_of,
            &inst.treatment,
            inst.n_trials,
            RandomSpec::InterceptAndTreatment,
        )
        .unwrap();
        let trial_usize: Vec<usize> = inst.trial_of.iter().map(|&k| k as usize).collect();
        let theta0 = fit.tau0_sq / fit.sigma_sq;
        let theta1 = fit.tau1_sq / fit.sigma_sq;
        for j in 0..fit.fixed_coefficients.len() {
            let se_engine = fit.covariance[j][j].sqrt();
            let se_oracle = oracles::profile_curvature_se(
                inst.design.columns(),
                &inst.y,
                &trial_usize,
                &inst.treatment,
                theta0,
                theta1,
                fit.sigma_sq,
                j,
                1e-4,
            )
            .unwrap();
            assert!(
                (se_engine - se_oracle).abs() < 0.05 * se_oracle,
                "coef {j}: {se_engine} vs {se_oracle}"
            );
        }
    }

    #[test]
    fn rank_deficient_fixed_design_is_named() {
        let inst = simulate(909, 3, 10, 1.0, 0.0, 1.0);
        let n = inst.design.n_rows();
        let mut cols = inst.design.columns().to_vec();
        let mut labels: Vec<String> = inst.design.labels().to_vec();
        cols.push(cols[0].clone());
        labels.push("intercept_copy".into());
        let design = DesignMatrix::new(labels, cols);
        let err = fit_lmm(
            &design,
            &inst.y[..n],
            &inst.trial_of,
            &inst.treatment,
            inst.n_trials,
            RandomSpec::InterceptOnly,
        )
        .unwrap_err();
        assert!(matches!(err, MixedError::RankDeficient { .. }));
    }

    #[test]
    fn single_trial_fit_is_permitted() {
        let inst = simulate(111, 1, 30, 0.0, 0.0, 1.0);
        let fit = fit_lmm(
            &inst.design,
            &inst.y,
            &inst.trial_of,
            &inst.treatment,
            inst.n_trials,
            RandomSpec::InterceptAndTreatment,
        )
        .unwrap();
        assert!(fit.sigma_sq > 0.0);
        let offsets = predict_random_offset(&fit, &inst.trial_of, &inst.treatment);
        assert_eq!(offsets.len(), inst.y.len());
    }
}
