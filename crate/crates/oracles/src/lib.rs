//! Reference implementations used only by test suites.
//!
//! Every routine here is written directly from the mathematical definition it
//! checks, with its own elementary linear algebra (Gram solves, dense
//! Cholesky, Gauss-Jordan inversion, quadrature). Nothing in this crate is
//! shared with the main library, so a test that compares the two is comparing
//! genuinely independent code paths. Everything runs at desk scale (n in the
//! tens to hundreds); clarity wins over speed throughout.

use statrs::distribution::{ContinuousCDF, Gamma, Normal};

/// Variance floor shared as a *documented convention* with the main library:
/// a perfect fit reports this residual variance instead of zero so the
/// Gaussian objective stays finite.
pub const VARIANCE_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Small deterministic RNG for oracle-internal sampling
// ---------------------------------------------------------------------------

/// Sequential splitmix64 stream; used only to fabricate test instances and
/// Monte-Carlo reference samples inside this crate.
pub struct DeskRng {
    state: u64,
}

impl DeskRng {
    pub fn new(seed: u64) -> Self {
        DeskRng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw strictly inside (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * 2f64.powi(-53)
    }

    /// Standard normal via the inverse CDF.
    pub fn normal(&mut self) -> f64 {
        let n = Normal::new(0.0, 1.0).unwrap();
        n.inverse_cdf(self.uniform())
    }
}

// ---------------------------------------------------------------------------
// Elementary dense linear algebra (row-major Vec<Vec<f64>>)
// ---------------------------------------------------------------------------

/// Solve `a x = b` by Gaussian elimination with partial pivoting.
/// Returns `None` when a pivot falls below `tol` times the largest initial
/// pivot candidate (treated as singular).
pub fn solve_gauss(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = a.len();
    if n == 0 {
        return Some(Vec::new());
    }
    let scale = a
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(0.0_f64, f64::max)
        .max(1e-300);
    let tol = 1e-12 * scale;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot_row][col].abs() <= tol {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// Invert a symmetric positive-definite-ish matrix by Gauss-Jordan with
/// partial pivoting. Returns `None` on singularity.
pub fn invert_gauss_jordan(mut a: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(0.0_f64, f64::max)
        .max(1e-300);
    let tol = 1e-12 * scale;
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot_row][col].abs() <= tol {
            return None;
        }
        a.swap(col, pivot_row);
        inv.swap(col, pivot_row);
        let d = a[col][col];
        for k in 0..n {
            a[col][k] /= d;
            inv[col][k] /= d;
        }
        for row in 0..n {
            if row != col {
                let f = a[row][col];
                if f != 0.0 {
                    for k in 0..n {
                        a[row][k] -= f * a[col][k];
                        inv[row][k] -= f * inv[col][k];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Dense Cholesky factorization (lower triangle). Returns `None` when the
/// matrix is not positive definite.
pub fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

/// Solve `L L' x = b` given the lower Cholesky factor.
pub fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l[i][k] * y[k];
        }
        y[i] = acc / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = y[i];
        for k in i + 1..n {
            acc -= l[k][i] * x[k];
        }
        x[i] = acc / l[i][i];
    }
    x
}

// ---------------------------------------------------------------------------
// Ordinary least squares via normal equations
// ---------------------------------------------------------------------------

pub struct OlsSolution {
    pub coefficients: Vec<f64>,
    pub rss: f64,
    /// Gaussian negative log-likelihood at the MLE variance (floored).
    pub objective: f64,
    pub residuals: Vec<f64>,
}

/// Direct normal-equations OLS: form the Gram matrix and solve it by Gaussian
/// elimination. `columns` holds the design column by column. Returns `None`
/// when the Gram system is singular.
pub fn ols_normal_equations(
    columns: &[Vec<f64>],
    y: &[f64],
    offset: Option<&[f64]>,
) -> Option<OlsSolution> {
    let p = columns.len();
    let n = y.len();
    if n < p || p == 0 {
        return None;
    }
    let yw: Vec<f64> = match offset {
        Some(o) => y.iter().zip(o).map(|(a, b)| a - b).collect(),
        None => y.to_vec(),
    };
    let mut gram = vec![vec![0.0; p]; p];
    let mut rhs = vec![0.0; p];
    for i in 0..p {
        for j in 0..p {
            gram[i][j] = dot(&columns[i], &columns[j]);
        }
        rhs[i] = dot(&columns[i], &yw);
    }
    let beta = solve_gauss(gram, rhs)?;
    let mut residuals = yw;
    for (j, col) in columns.iter().enumerate() {
        for (r, &x) in residuals.iter_mut().zip(col.iter()) {
            *r -= beta[j] * x;
        }
    }
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    Some(OlsSolution {
        coefficients: beta,
        rss,
        objective: gaussian_nll(rss, n),
        residuals,
    })
}

/// Gaussian negative log-likelihood at the MLE variance `rss / n`, with the
/// shared variance floor applied.
pub fn gaussian_nll(rss: f64, n: usize) -> f64 {
    let nf = n as f64;
    let sigma_sq = (rss / nf).max(VARIANCE_FLOOR);
    0.5 * nf * (2.0 * std::f64::consts::PI * sigma_sq).ln() + rss / (2.0 * sigma_sq)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Student-t tail probability by quadrature
// ---------------------------------------------------------------------------

/// Two-sided t-distribution p-value computed by Simpson quadrature.
///
/// Substituting u = sqrt(df) * tan(phi) turns the t density into
/// c * cos(phi)^(df-1) on (-pi/2, pi/2); the normalizing constant is obtained
/// by integrating the same function, so the whole computation is
/// self-contained.
pub fn t_two_sided_p_quadrature(t: f64, df: f64) -> f64 {
    assert!(df > 0.0);
    let f = |phi: f64| phi.cos().powf(df - 1.0);
    let half = std::f64::consts::FRAC_PI_2;
    let total = simpson(&f, -half, half, 40_000);
    let upper_limit = (t.abs() / df.sqrt()).atan();
    let upper = simpson(&f, upper_limit, half, 40_000);
    (2.0 * upper / total).clamp(0.0, 1.0)
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let m = if intervals % 2 == 0 { intervals } else { intervals + 1 };
    let h = (b - a) / m as f64;
    let mut acc = f(a) + f(b);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

// ---------------------------------------------------------------------------
// Profiled REML criterion, dense-matrix route
// ---------------------------------------------------------------------------

pub struct RemlEval {
    /// -2 * restricted log-likelihood, profiled over sigma^2, constants
    /// included: (n-p) ln sigma_hat^2 + ln|W| + ln|X'W^-1 X| + (n-p)(1+ln 2pi).
    pub neg2_reml: f64,
    pub beta: Vec<f64>,
    pub sigma_sq: f64,
}

/// Evaluate the profiled REML criterion at variance ratios
/// `theta0 = tau0^2/sigma^2` (intercept component) and `theta1` (treatment
/// slope component) by building the full n-by-n scaled covariance
/// W = I + theta0 Z0 Z0' + theta1 Z1 Z1' and factoring it densely.
pub fn reml_profile_dense(
    columns: &[Vec<f64>],
    y: &[f64],
    trial_of: &[usize],
    treatment: &[f64],
    theta0: f64,
    theta1: f64,
) -> Option<RemlEval> {
    let n = y.len();
    let p = columns.len();
    if n <= p {
        return None;
    }
    let mut w = vec![vec![0.0; n]; n];
    for i in 0..n {
        w[i][i] = 1.0;
        for j in 0..n {
            if trial_of[i] == trial_of[j] {
                w[i][j] += theta0 + theta1 * treatment[i] * treatment[j];
            }
        }
    }
    let l = cholesky(&w)?;
    let log_det_w: f64 = l.iter().enumerate().map(|(i, row)| 2.0 * row[i].ln()).sum();

    // W^-1 applied to each design column and to y.
    let winv_cols: Vec<Vec<f64>> = columns.iter().map(|c| cholesky_solve(&l, c)).collect();
    let winv_y = cholesky_solve(&l, y);

    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for i in 0..p {
        for j in 0..p {
            a[i][j] = dot(&columns[i], &winv_cols[j]);
        }
        b[i] = dot(&columns[i], &winv_y);
    }
    let la = cholesky(&a)?;
    let log_det_a: f64 = la.iter().enumerate().map(|(i, row)| 2.0 * row[i].ln()).sum();
    let beta = cholesky_solve(&la, &b);

    let y_winv_y = dot(y, &winv_y);
    let quad = (y_winv_y - dot(&b, &beta)).max(0.0);
    let df = (n - p) as f64;
    let sigma_sq = (quad / df).max(VARIANCE_FLOOR);
    let neg2 = df * sigma_sq.ln()
        + log_det_w
        + log_det_a
        + df * (1.0 + (2.0 * std::f64::consts::PI).ln());
    Some(RemlEval {
        neg2_reml: neg2,
        beta,
        sigma_sq,
    })
}

pub struct GridArgmax {
    pub tau0_sq: f64,
    pub tau1_sq: f64,
    pub sigma_sq: f64,
    pub neg2_reml: f64,
}

/// Dense one-dimensional grid search over a single variance ratio
/// (the intercept component when `intercept_component` is true, otherwise the
/// treatment-slope component). Step and range are caller-chosen; every grid
/// point is evaluated.
pub fn reml_grid_1d(
    columns: &[Vec<f64>],
    y: &[f64],
    trial_of: &[usize],
    treatment: &[f64],
    intercept_component: bool,
    max_ratio: f64,
    step: f64,
) -> Option<GridArgmax> {
    let mut best: Option<GridArgmax> = None;
    let steps = (max_ratio / step).round() as usize;
    for i in 0..=steps {
        let theta = i as f64 * step;
        let (t0, t1) = if intercept_component { (theta, 0.0) } else { (0.0, theta) };
        let eval = reml_profile_dense(columns, y, trial_of, treatment, t0, t1)?;
        if best.as_ref().map_or(true, |b| eval.neg2_reml < b.neg2_reml) {
            best = Some(GridArgmax {
                tau0_sq: t0 * eval.sigma_sq,
                tau1_sq: t1 * eval.sigma_sq,
                sigma_sq: eval.sigma_sq,
                neg2_reml: eval.neg2_reml,
            });
        }
    }
    best
}

/// Two-stage dense grid over both variance ratios: a coarse pass over
/// [0, coarse_max]^2, then a fine pass on a window of one coarse step around
/// the coarse argmax (clamped at zero). Both passes evaluate every point of
/// their grid.
pub fn reml_grid_2d(
    columns: &[Vec<f64>],
    y: &[f64],
    trial_of: &[usize],
    treatment: &[f64],
    coarse_max: f64,
    coarse_step: f64,
    fine_step: f64,
) -> Option<GridArgmax> {
    let mut best_coarse: Option<(f64, f64, f64)> = None; // theta0, theta1, value
    let csteps = (coarse_max / coarse_step).round() as usize;
    for i in 0..=csteps {
        for j in 0..=csteps {
            let t0 = i as f64 * coarse_step;
            let t1 = j as f64 * coarse_step;
            let eval = reml_profile_dense(columns, y, trial_of, treatment, t0, t1)?;
            if best_coarse.map_or(true, |(_, _, v)| eval.neg2_reml < v) {
                best_coarse = Some((t0, t1, eval.neg2_reml));
            }
        }
    }
    let (c0, c1, _) = best_coarse?;
    let lo0 = (c0 - coarse_step).max(0.0);
    let lo1 = (c1 - coarse_step).max(0.0);
    let fsteps = (2.0 * coarse_step / fine_step).round() as usize;
    let mut best: Option<GridArgmax> = None;
    for i in 0..=fsteps {
        for j in 0..=fsteps {
            let t0 = lo0 + i as f64 * fine_step;
            let t1 = lo1 + j as f64 * fine_step;
            let eval = reml_profile_dense(columns, y, trial_of, treatment, t0, t1)?;
            if best.as_ref().map_or(true, |b| eval.neg2_reml < b.neg2_reml) {
                best = Some(GridArgmax {
                    tau0_sq: t0 * eval.sigma_sq,
                    tau1_sq: t1 * eval.sigma_sq,
                    sigma_sq: eval.sigma_sq,
                    neg2_reml: eval.neg2_reml,
                });
            }
        }
    }
    best
}

/// Closed-form REML for the balanced one-way layout (intercept-only fixed
/// part, one random intercept per group, equal group sizes):
/// tau^2 = max(0, (MSB - MSW)/m), sigma^2 = MSW, and the BLUP for group k is
/// the shrunken group-mean deviation.
pub struct BalancedOneWay {
    pub tau_sq: f64,
    pub sigma_sq: f64,
    pub blups: Vec<f64>,
}

pub fn balanced_oneway_reml(y: &[f64], group_of: &[usize], k: usize) -> BalancedOneWay {
    let n = y.len();
    let m = n / k;
    assert_eq!(m * k, n, "groups must be balanced");
    let mut means = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (v, &g) in y.iter().zip(group_of) {
        means[g] += v;
        counts[g] += 1;
    }
    for (mean, &c) in means.iter_mut().zip(&counts) {
        assert_eq!(c, m, "groups must be balanced");
        *mean /= m as f64;
    }
    let grand: f64 = y.iter().sum::<f64>() / n as f64;
    let msb = m as f64 * means.iter().map(|g| (g - grand).powi(2)).sum::<f64>() / (k as f64 - 1.0);
    let msw = y
        .iter()
        .zip(group_of)
        .map(|(v, &g)| (v - means[g]).powi(2))
        .sum::<f64>()
        / (n - k) as f64;
    let tau_sq = ((msb - msw) / m as f64).max(0.0);
    let shrink = if tau_sq > 0.0 {
        tau_sq / (tau_sq + msw / m as f64)
    } else {
        0.0
    };
    let blups = means.iter().map(|g| shrink * (g - grand)).collect();
    BalancedOneWay {
        tau_sq,
        sigma_sq: msw,
        blups,
    }
}

/// Finite-difference curvature oracle for a fixed-effect standard error in the
/// mixed model: pin coefficient `j` at its GLS estimate +/- h, re-profile the
/// remaining coefficients under the generalized residual sum of squares with
/// all variance parameters held at the supplied values, and convert the
/// second difference into a standard error via se = sqrt(2 / curvature).
pub fn profile_curvature_se(
    columns: &[Vec<f64>],
    y: &[f64],
    trial_of: &[usize],
    treatment: &[f64],
    theta0: f64,
    theta1: f64,
    sigma_sq: f64,
    j: usize,
    h: f64,
) -> Option<f64> {
    let n = y.len();
    let p = columns.len();
    let mut w = vec![vec![0.0; n]; n];
    for a in 0..n {
        w[a][a] = 1.0;
        for b in 0..n {
            if trial_of[a] == trial_of[b] {
                w[a][b] += theta0 + theta1 * treatment[a] * treatment[b];
            }
        }
    }
    let l = cholesky(&w)?;
    let winv_cols: Vec<Vec<f64>> = columns.iter().map(|c| cholesky_solve(&l, c)).collect();
    let winv_y = cholesky_solve(&l, y);
    let mut a_full = vec![vec![0.0; p]; p];
    let mut b_full = vec![0.0; p];
    for i in 0..p {
        for jj in 0..p {
            a_full[i][jj] = dot(&columns[i], &winv_cols[jj]);
        }
        b_full[i] = dot(&columns[i], &winv_y);
    }
    let beta = solve_gauss(a_full.clone(), b_full.clone())?;

    // Generalized RSS with coefficient j pinned at value b, others profiled.
    let q = |pinned: f64| -> Option<f64> {
        let rest: Vec<usize> = (0..p).filter(|&i| i != j).collect();
        let target: Vec<f64> = y
            .iter()
            .zip(&columns[j])
            .map(|(yy, xx)| yy - pinned * xx)
            .collect();
        let winv_target = cholesky_solve(&l, &target);
        let mut a_sub = vec![vec![0.0; rest.len()]; rest.len()];
        let mut b_sub = vec![0.0; rest.len()];
        for (ri, &i) in rest.iter().enumerate() {
            for (rj, &jj) in rest.iter().enumerate() {
                a_sub[ri][rj] = a_full[i][jj];
            }
            b_sub[ri] = dot(&columns[i], &winv_target);
        }
        let gamma = solve_gauss(a_sub, b_sub.clone())?;
        let mut resid = target;
        for (ri, &i) in rest.iter().enumerate() {
            for (r, &x) in resid.iter_mut().zip(&columns[i]) {
                *r -= gamma[ri] * x;
            }
        }
        let winv_resid = cholesky_solve(&l, &resid);
        Some(dot(&resid, &winv_resid) / sigma_sq)
    };

    let center = beta[j];
    let q0 = q(center)?;
    let qp = q(center + h)?;
    let qm = q(center - h)?;
    let curvature = (qp - 2.0 * q0 + qm) / (h * h);
    if curvature <= 0.0 {
        return None;
    }
    Some((2.0 / curvature).sqrt())
}

// ---------------------------------------------------------------------------
// Parameter-instability statistic, literal scan
// ---------------------------------------------------------------------------

/// Literal evaluation of the ordered-cumulative-score supremum statistic:
/// center the score columns, order rows by z, and for every admissible cut
/// fraction pi in [trim, 1-trim] that falls on a boundary between distinct z
/// values, evaluate [pi(1-pi)]^-1 B(pi)' J^-1 B(pi) with
/// B(pi) = n^-1/2 * (cumulative ordered score sum) and J the full-sample
/// mean outer product of the centered scores. Assumes nondegenerate scores;
/// returns `None` if J is singular or no cut is admissible.
pub fn suplm_scan(scores: &[Vec<f64>], z: &[f64], trim: f64) -> Option<f64> {
    let n = scores.len();
    let p = scores[0].len();
    let mut centered: Vec<Vec<f64>> = scores.to_vec();
    for j in 0..p {
        let mean: f64 = centered.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        for row in centered.iter_mut() {
            row[j] -= mean;
        }
    }
    let mut jmat = vec![vec![0.0; p]; p];
    for row in &centered {
        for a in 0..p {
            for b in 0..p {
                jmat[a][b] += row[a] * row[b];
            }
        }
    }
    for row in jmat.iter_mut() {
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    let jinv = invert_gauss_jordan(jmat)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));

    let lo = (trim * n as f64).ceil() as usize;
    let hi = ((1.0 - trim) * n as f64).floor() as usize;
    let mut cum = vec![0.0; p];
    let mut best: Option<f64> = None;
    for i in 1..n {
        let idx = order[i - 1];
        for j in 0..p {
            cum[j] += centered[idx][j];
        }
        if i < lo || i > hi {
            continue;
        }
        if z[order[i - 1]] == z[order[i]] {
            continue;
        }
        let pi = i as f64 / n as f64;
        let b: Vec<f64> = cum.iter().map(|c| c / (n as f64).sqrt()).collect();
        let mut quad = 0.0;
        for a in 0..p {
            for c in 0..p {
                quad += b[a] * jinv[a][c] * b[c];
            }
        }
        let stat = quad / (pi * (1.0 - pi));
        if best.map_or(true, |v| stat > v) {
            best = Some(stat);
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Exhaustive split re-fit
// ---------------------------------------------------------------------------

pub struct SplitScan {
    pub threshold: f64,
    pub objective: f64,
}

/// Exhaustive objective scan over every candidate threshold (midpoints of
/// adjacent distinct order statistics of z). Each side of each cut is re-fit
/// from scratch through `ols_normal_equations`; a cut is admissible when both
/// sides have at least `min_size` rows and both fits are nonsingular. Ties are
/// broken toward the smaller threshold.
pub fn split_scan(
    columns: &[Vec<f64>],
    y: &[f64],
    offset: Option<&[f64]>,
    z: &[f64],
    min_size: usize,
) -> Option<SplitScan> {
    let n = y.len();
    let mut distinct: Vec<f64> = z.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut best: Option<SplitScan> = None;
    for w in distinct.windows(2) {
        let threshold = (w[0] + w[1]) / 2.0;
        let left: Vec<usize> = (0..n).filter(|&i| z[i] <= threshold).collect();
        let right: Vec<usize> = (0..n).filter(|&i| z[i] > threshold).collect();
        if left.len() < min_size || right.len() < min_size {
            continue;
        }
        let fit_side = |rows: &[usize]| -> Option<f64> {
            let cols: Vec<Vec<f64>> = columns
                .iter()
                .map(|c| rows.iter().map(|&i| c[i]).collect())
                .collect();
            let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            let off: Option<Vec<f64>> =
                offset.map(|o| rows.iter().map(|&i| o[i]).collect());
            ols_normal_equations(&cols, &ys, off.as_deref()).map(|s| s.objective)
        };
        let (Some(lo), Some(ro)) = (fit_side(&left), fit_side(&right)) else {
            continue;
        };
        let objective = lo + ro;
        if best.as_ref().map_or(true, |b| objective < b.objective) {
            best = Some(SplitScan {
                threshold,
                objective,
            });
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Monte-Carlo reference for the instability statistic's null distribution
// ---------------------------------------------------------------------------

/// Simulate the large-sample null distribution of the trimmed supremum
/// statistic: for a process dimension p, the statistic converges to
/// sup over pi in [trim, 1-trim] of ||B0_p(pi)||^2 / (pi (1-pi)) where B0_p is
/// a p-dimensional standard Brownian bridge. Returns one sample vector per
/// (trim, dimension) pair: `samples[trim_idx][p-1]`.
pub fn bridge_suplm_samples(
    p_max: usize,
    trims: &[f64],
    n_grid: usize,
    replicates: usize,
    seed: u64,
) -> Vec<Vec<Vec<f64>>> {
    let mut out = vec![vec![Vec::with_capacity(replicates); p_max]; trims.len()];
    let mut rng = DeskRng::new(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut acc = vec![0.0_f64; n_grid]; // cumulative squared-bridge norm over dims
    let mut bridge = vec![0.0_f64; n_grid];
    for _ in 0..replicates {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for d in 0..p_max {
            let mut sum = 0.0;
            for b in bridge.iter_mut() {
                sum += normal.inverse_cdf(rng.uniform());
                *b = sum;
            }
            let total = bridge[n_grid - 1];
            let scale = 1.0 / (n_grid as f64).sqrt();
            for (j, b) in bridge.iter().enumerate() {
                let t = (j + 1) as f64 / n_grid as f64;
                let val = (b - t * total) * scale;
                acc[j] += val * val;
            }
            for (ti, &trim) in trims.iter().enumerate() {
                let lo = (trim * n_grid as f64).ceil() as usize;
                let hi = ((1.0 - trim) * n_grid as f64).floor() as usize;
                let mut best = 0.0_f64;
                for j in lo..hi.min(n_grid - 1) {
                    let t = (j + 1) as f64 / n_grid as f64;
                    let v = acc[j] / (t * (1.0 - t));
                    if v > best {
                        best = v;
                    }
                }
                out[ti][d].push(best);
            }
        }
    }
    out
}

/// Empirical upper-tail probability P(sample > x) from an unsorted sample.
pub fn empirical_tail(sample: &[f64], x: f64) -> f64 {
    sample.iter().filter(|&&v| v > x).count() as f64 / sample.len() as f64
}

/// Empirical upper-tail quantile: smallest x with P(sample > x) <= alpha.
pub fn empirical_upper_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let m = sorted.len();
    let idx = ((1.0 - alpha) * (m as f64 - 1.0)).round() as usize;
    sorted[idx.min(m - 1)]
}

/// Fit a gamma (shape, rate) tail approximation to a sample by weighted least
/// squares on log tail probabilities at fixed upper-tail design points,
/// minimized with a small Nelder-Mead over (ln shape, ln rate). The design
/// weights concentrate accuracy where decisions are made (5% and below).
pub fn fit_gamma_tail(sample: &mut [f64]) -> (f64, f64) {
    sample.sort_by(f64::total_cmp);
    let m = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / m;
    let var = sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    let init_shape = (mean * mean / var).max(0.05);
    let init_rate = (mean / var).max(1e-4);

    let alphas = [0.5, 0.25, 0.1, 0.05, 0.025, 0.01];
    let weights = [0.5, 0.5, 1.0, 2.0, 2.0, 1.5];
    let quantiles: Vec<f64> = alphas
        .iter()
        .map(|&a| empirical_upper_quantile(sample, a))
        .collect();

    let objective = |params: &[f64]| -> f64 {
        let shape = params[0].exp();
        let rate = params[1].exp();
        let Ok(g) = Gamma::new(shape, rate) else {
            return f64::INFINITY;
        };
        let mut acc = 0.0;
        for ((&q, &a), &w) in quantiles.iter().zip(&alphas).zip(&weights) {
            let tail = (1.0 - g.cdf(q)).max(1e-12);
            let d = tail.ln() - a.ln();
            acc += w * d * d;
        }
        acc
    };

    let start = [init_shape.ln(), init_rate.ln()];
    let best = nelder_mead_2d(&objective, start, 0.3, 400);
    (best[0].exp(), best[1].exp())
}

fn nelder_mead_2d(f: &dyn Fn(&[f64]) -> f64, start: [f64; 2], step: f64, budget: usize) -> [f64; 2] {
    let mut simplex = vec![
        (start, f(&start)),
        ([start[0] + step, start[1]], f(&[start[0] + step, start[1]])),
        ([start[0], start[1] + step], f(&[start[0], start[1] + step])),
    ];
    let mut evals = 3;
    while evals < budget {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if (simplex[2].1 - simplex[0].1).abs() < 1e-12 {
            break;
        }
        let centroid = [
            (simplex[0].0[0] + simplex[1].0[0]) / 2.0,
            (simplex[0].0[1] + simplex[1].0[1]) / 2.0,
        ];
        let worst = simplex[2];
        let reflect = [
            centroid[0] + (centroid[0] - worst.0[0]),
            centroid[1] + (centroid[1] - worst.0[1]),
        ];
        let fr = f(&reflect);
        evals += 1;
        if fr < simplex[0].1 {
            let expand = [
                centroid[0] + 2.0 * (centroid[0] - worst.0[0]),
                centroid[1] + 2.0 * (centroid[1] - worst.0[1]),
            ];
            let fe = f(&expand);
            evals += 1;
            simplex[2] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[1].1 {
            simplex[2] = (reflect, fr);
        } else {
            let contract = [
                centroid[0] + 0.5 * (worst.0[0] - centroid[0]),
                centroid[1] + 0.5 * (worst.0[1] - centroid[1]),
            ];
            let fc = f(&contract);
            evals += 1;
            if fc < worst.1 {
                simplex[2] = (contract, fc);
            } else {
                for i in 1..3 {
                    let shrunk = [
                        simplex[0].0[0] + 0.5 * (simplex[i].0[0] - simplex[0].0[0]),
                        simplex[0].0[1] + 0.5 * (simplex[i].0[1] - simplex[0].0[1]),
                    ];
                    simplex[i] = (shrunk, f(&shrunk));
                    evals += 1;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0].0
}
