//! Least-squares and correlation helpers shared by the mapping and evaluation stages.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Sample Pearson correlation with a 95% interval from the Fisher z-transform.
pub fn pearson_with_ci(x: &[f64], y: &[f64]) -> Result<(f64, (f64, f64))> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "pearson: {} vs {} values",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 4 {
        return Err(Error::InsufficientData {
            what: "correlation pairs",
            needed: 4,
            got: n,
        });
    }
    let r = pearson(x, y)?;
    Ok((r, fisher_ci(r, n)))
}

/// Sample Pearson correlation; errors when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // relative to the magnitude of the data, so rounding residue on a constant
    // vector does not count as variance
    let tiny = |ss: f64, m: f64| ss <= (f64::EPSILON * m.abs().max(f64::MIN_POSITIVE)).powi(2) * n;
    if tiny(sxx, mx) || tiny(syy, my) {
        let which = if tiny(sxx, mx) { "first" } else { "second" };
        return Err(Error::ConstantVector(format!("{which} input of the correlation")));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn fisher_ci(r: f64, n: usize) -> (f64, f64) {
    if r.abs() >= 1.0 || n <= 3 {
        return (r, r);
    }
    let z = r.atanh();
    let half = 1.959_963_984_540_054 / ((n - 3) as f64).sqrt();
    ((z - half).tanh(), (z + half).tanh())
}

/// Lawson-Hanson active-set solver for `min ‖A x − b‖` subject to `x_j ≥ 0`
/// for every `j` with `constrained[j]`; the remaining variables are free.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, constrained: &[bool]) -> Result<DVector<f64>> {
    let n = a.ncols();
    if a.nrows() != b.len() || constrained.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "nnls: A is {}x{}, b has {}, mask has {}",
            a.nrows(),
            n,
            b.len(),
            constrained.len()
        )));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let tol = 1e-12 * scale * scale * (a.nrows().max(n) as f64) * b.norm().max(1.0);
    let mut passive: Vec<bool> = constrained.iter().map(|c| !c).collect();
    let mut x = DVector::zeros(n);
    if passive.iter().any(|p| *p) {
        x = solve_subset(a, b, &passive);
    }
    let max_iter = 30 * n.max(1) + 30;
    for _ in 0..max_iter {
        let w = a.transpose() * (b - a * &x);
        let pick = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = pick else { break };
        passive[j] = true;
        loop {
            let z = solve_subset(a, b, &passive);
            let bad: Vec<usize> = (0..n)
                .filter(|&k| passive[k] && constrained[k] && z[k] <= 0.0)
                .collect();
            if bad.is_empty() {
                x = z;
                break;
            }
            let mut alpha = 1.0f64;
            for &k in &bad {
                let denom = x[k] - z[k];
                if denom > 0.0 {
                    alpha = alpha.min(x[k] / denom);
                }
            }
            x = &x + (&z - &x) * alpha;
            for k in 0..n {
                if passive[k] && constrained[k] && x[k] <= 1e-15 * scale {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
        }
    }
    for k in 0..n {
        if constrained[k] && x[k] < 0.0 {
            x[k] = 0.0;
        }
    }
    Ok(x)
}

fn solve_subset(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..passive.len()).filter(|&j| passive[j]).collect();
    let mut out = DVector::zeros(passive.len());
    if cols.is_empty() {
        return out;
    }
    let sub = a.select_columns(&cols);
    let svd = sub.svd(true, true);
    let eps = 1e-12 * svd.singular_values.max().max(1e-300);
    let sol = svd.solve(b, eps).expect("svd computed with both factors");
    for (i, &j) in cols.iter().enumerate() {
        out[j] = sol[i];
    }
    out
}

/// Minimum-norm `z` with `G z ≥ h`, via the NNLS dual. `None` when infeasible.
pub fn least_distance(g: &DMatrix<f64>, h: &DVector<f64>) -> Option<DVector<f64>> {
    let (m, n) = (g.nrows(), g.ncols());
    let mut e = DMatrix::zeros(n + 1, m);
    for i in 0..m {
        for j in 0..n {
            e[(j, i)] = g[(i, j)];
        }
        e[(n, i)] = h[i];
    }
    let mut f = DVector::zeros(n + 1);
    f[n] = 1.0;
    let u = nnls(&e, &f, &vec![true; m]).ok()?;
    let r = &e * &u - &f;
    if r.norm() <= 1e-12 || r[n].abs() <= 1e-14 {
        return None;
    }
    Some(DVector::from_fn(n, |j, _| -r[j] / r[n]))
}

/// `min ‖A x − b‖` subject to `G x ≥ h`, for full-column-rank `A`.
pub fn least_squares_inequality(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = a.ncols();
    if a.nrows() < n {
        return Err(Error::RankDeficient(format!("{} rows for {} unknowns", a.nrows(), n)));
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let diag_max = (0..n).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..n).any(|i| r[(i, i)].abs() <= 1e-12 * diag_max.max(1e-300)) {
        return Err(Error::RankDeficient("design matrix columns are dependent".into()));
    }
    let f1 = qr.q().transpose() * b;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("triangular factor is singular".into()))?;
    let gr = g * &r_inv;
    let h_bar = h - &gr * &f1;
    let z = least_distance(&gr, &h_bar)
        .ok_or_else(|| Error::Degenerate("inequality constraints are infeasible".into()))?;
    Ok(r_inv * (z + f1))
}
