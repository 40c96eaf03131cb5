//! Hard-margin linear SVM oracle: dual solver and classical KKT checker.
//!
//! The dual is solved as a box-constrained problem `0 ≤ α ≤ cap`. On
//! separable data every multiplier is at most `Σα = 1/margin²`, so with the
//! default cap of 1e4 any margin above 0.01 is solved exactly; on
//! non-separable data the dual is unbounded and the multipliers run into
//! the cap. The first multiplier to reach the cap stops the solver with an
//! infeasibility report.

use crate::error::{Error, Result};

/// How the bias enters the primal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BiasMode {
    /// Separate bias; the dual keeps `Σ α y = 0` (SMO pair updates).
    #[default]
    Explicit,
    /// Bias folded into the weights via `x̃ = [x; 1]`, which also regularizes
    /// it; the dual has no equality constraint (coordinate ascent).
    Folded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmOptions {
    pub mode: BiasMode,
    /// Stopping tolerance on the maximal KKT violation.
    pub tol: f64,
    pub alpha_cap: f64,
    pub max_iter: usize,
}

impl Default for SvmOptions {
    fn default() -> Self {
        SvmOptions {
            mode: BiasMode::Explicit,
            tol: 1e-8,
            alpha_cap: 1e4,
            max_iter: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmSolution {
    pub w: Vec<f64>,
    pub b: f64,
    pub alpha: Vec<f64>,
    /// Indices with `α > 1e-7·max α`.
    pub support: Vec<usize>,
    /// Geometric margin `1 / ‖w‖` (`1 / ‖w̃‖` when folded).
    pub margin: f64,
    pub mode: BiasMode,
    pub iterations: usize,
}

impl SvmSolution {
    /// `[w; b]`.
    pub fn w_tilde(&self) -> Vec<f64> {
        let mut v = self.w.clone();
        v.push(self.b);
        v
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn validate(rows: &[Vec<f64>], y: &[f64]) -> Result<()> {
    if rows.is_empty() || rows.len() != y.len() {
        return Err(Error::Dataset("SVM needs matching non-empty rows and labels".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Dataset("rows of unequal length".into()));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Dataset("SVM labels must be ±1".into()));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(Error::Dataset("SVM needs both labels present".into()));
    }
    Ok(())
}

/// Maximum-margin separating hyperplane of `rows` with labels `y ∈ {±1}`.
pub fn solve_hard_margin(rows: &[Vec<f64>], y: &[f64], opts: &SvmOptions) -> Result<SvmSolution> {
    validate(rows, y)?;
    let n = rows.len();
    let extra = if opts.mode == BiasMode::Folded { 1.0 } else { 0.0 };
    let kernel: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| dot(&rows[i], &rows[j]) + extra)
        .collect();
    let q = |i: usize, j: usize| y[i] * y[j] * kernel[i * n + j];
    let cap = opts.alpha_cap;
    let mut alpha = vec![0.0; n];
    // gradient of ½ αᵀQα − Σα
    let mut grad = vec![-1.0; n];
    let mut iterations = 0;

    match opts.mode {
        BiasMode::Explicit => loop {
            let up = |t: usize, a: &[f64]| (y[t] > 0.0 && a[t] < cap) || (y[t] < 0.0 && a[t] > 0.0);
            let low = |t: usize, a: &[f64]| (y[t] > 0.0 && a[t] > 0.0) || (y[t] < 0.0 && a[t] < cap);
            let mut i = usize::MAX;
            let mut gmax = f64::NEG_INFINITY;
            let mut gmin = f64::INFINITY;
            for t in 0..n {
                let v = -y[t] * grad[t];
                if up(t, &alpha) && v > gmax {
                    gmax = v;
                    i = t;
                }
                if low(t, &alpha) && v < gmin {
                    gmin = v;
                }
            }
            if i == usize::MAX || gmax - gmin < opts.tol {
                break;
            }
            // second-order working-set choice
            let mut j = usize::MAX;
            let mut best = f64::INFINITY;
            for t in 0..n {
                let v = -y[t] * grad[t];
                if !low(t, &alpha) || v >= gmax {
                    continue;
                }
                let b = gmax - v;
                let a = (kernel[i * n + i] + kernel[t * n + t] - 2.0 * kernel[i * n + t]).max(1e-12);
                let score = -b * b / a;
                if score < best {
                    best = score;
                    j = t;
                }
            }
            if j == usize::MAX {
                break;
            }
            iterations += 1;
            if iterations > opts.max_iter {
                return Err(Error::NotConverged(opts.max_iter));
            }
            let (old_i, old_j) = (alpha[i], alpha[j]);
            let quad = (kernel[i * n + i] + kernel[j * n + j] - 2.0 * kernel[i * n + j]).max(1e-12);
            if y[i] != y[j] {
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = alpha[i] - alpha[j];
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = diff;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > 0.0 {
                    if alpha[i] > cap {
                        alpha[i] = cap;
                        alpha[j] = cap - diff;
                    }
                } else if alpha[j] > cap {
                    alpha[j] = cap;
                    alpha[i] = cap + diff;
                }
            } else {
                let delta = (grad[i] - grad[j]) / quad;
                let sum = alpha[i] + alpha[j];
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > cap {
                    if alpha[i] > cap {
                        alpha[i] = cap;
                        alpha[j] = sum - cap;
                    }
                } else if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if sum > cap {
                    if alpha[j] > cap {
                        alpha[j] = cap;
                        alpha[i] = sum - cap;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
            let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
            for t in 0..n {
                grad[t] += q(t, i) * di + q(t, j) * dj;
            }
            if alpha[i] >= cap || alpha[j] >= cap {
                break;
            }
        },
        BiasMode::Folded => loop {
            let violation = |t: usize, a: &[f64], g: &[f64]| {
                if a[t] <= 0.0 {
                    (-g[t]).max(0.0)
                } else if a[t] >= cap {
                    g[t].max(0.0)
                } else {
                    g[t].abs()
                }
            };
            let (i, worst) = (0..n)
                .map(|t| (t, violation(t, &alpha, &grad)))
                .fold((0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
            if worst < opts.tol {
                break;
            }
            iterations += 1;
            if iterations > opts.max_iter {
                return Err(Error::NotConverged(opts.max_iter));
            }
            let old = alpha[i];
            alpha[i] = (old - grad[i] / q(i, i).max(1e-12)).clamp(0.0, cap);
            let d = alpha[i] - old;
            for t in 0..n {
                grad[t] += q(t, i) * d;
            }
            if alpha[i] >= cap {
                break;
            }
        },
    }

    let capped = alpha.iter().filter(|&&a| a >= cap).count();
    if capped > 0 {
        return Err(Error::Infeasible { capped, cap });
    }
    let d = rows[0].len();
    let mut w = vec![0.0; d];
    for (k, row) in rows.iter().enumerate() {
        for (wj, xj) in w.iter_mut().zip(row) {
            *wj += alpha[k] * y[k] * xj;
        }
    }
    let max_alpha = alpha.iter().cloned().fold(0.0, f64::max);
    let support: Vec<usize> = (0..n).filter(|&k| alpha[k] > 1e-7 * max_alpha).collect();
    let b = match opts.mode {
        BiasMode::Explicit => support.iter().map(|&k| y[k] - dot(&w, &rows[k])).sum::<f64>() / support.len().max(1) as f64,
        BiasMode::Folded => (0..n).map(|k| alpha[k] * y[k]).sum(),
    };
    let norm = match opts.mode {
        BiasMode::Explicit => dot(&w, &w).sqrt(),
        BiasMode::Folded => (dot(&w, &w) + b * b).sqrt(),
    };
    Ok(SvmSolution {
        w,
        b,
        alpha,
        support,
        margin: 1.0 / norm,
        mode: opts.mode,
        iterations,
    })
}

/// Residuals of the four classical KKT conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalKktReport {
    /// `max (1 − y w̃ᵀx̃)₊`.
    pub primal_violation: f64,
    pub min_alpha: f64,
    /// `max (−α)₊`.
    pub dual_violation: f64,
    /// `max |α (y w̃ᵀx̃ − 1)|`.
    pub slackness: f64,
    /// `‖w − Σ α y x‖₂`, including the bias row when folded.
    pub stationarity: f64,
    /// `|Σ α y|` for the explicit-bias dual; `None` when folded.
    pub equality: Option<f64>,
}

impl ClassicalKktReport {
    pub fn max_residual(&self) -> f64 {
        [self.primal_violation, self.dual_violation, self.slackness, self.stationarity, self.equality.unwrap_or(0.0)]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

pub fn check_classical_kkt(sol: &SvmSolution, rows: &[Vec<f64>], y: &[f64]) -> ClassicalKktReport {
    let mut primal: f64 = 0.0;
    let mut slack: f64 = 0.0;
    let mut min_alpha = f64::INFINITY;
    let d = sol.w.len();
    let mut combo = vec![0.0; d + 1];
    for (k, row) in rows.iter().enumerate() {
        let a = sol.alpha.get(k).copied().unwrap_or(0.0);
        let m = y[k] * sol.decision(row);
        primal = primal.max(1.0 - m);
        slack = slack.max((a * (m - 1.0)).abs());
        min_alpha = min_alpha.min(a);
        for j in 0..d {
            combo[j] += a * y[k] * row[j];
        }
        combo[d] += a * y[k];
    }
    let mut diff: f64 = (0..d).map(|j| (sol.w[j] - combo[j]).powi(2)).sum();
    let equality = match sol.mode {
        BiasMode::Explicit => Some(combo[d].abs()),
        BiasMode::Folded => {
            diff += (sol.b - combo[d]).powi(2);
            None
        }
    };
    ClassicalKktReport {
        primal_violation: primal.max(0.0),
        min_alpha,
        dual_violation: (-min_alpha).max(0.0),
        slackness: slack,
        stationarity: diff.sqrt(),
        equality,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_analytic() {
        let rows = vec![vec![1.0], vec![-1.0]];
        let y = vec![1.0, -1.0];
        let s = solve_hard_margin(&rows, &y, &SvmOptions::default()).unwrap();
        assert!((s.w[0] - 1.0).abs() < 1e-9);
        assert!(s.b.abs() < 1e-9);
        assert!((s.alpha[0] - 0.5).abs() < 1e-9 && (s.alpha[1] - 0.5).abs() < 1e-9);
        assert!(check_classical_kkt(&s, &rows, &y).max_residual() < 1e-8);
    }

    #[test]
    fn folded_two_points() {
        // folded: x̃ = (±1, 1); maximal margin of w̃ with b regularized
        let rows = vec![vec![1.0], vec![-1.0]];
        let y = vec![1.0, -1.0];
        let opts = SvmOptions {
            mode: BiasMode::Folded,
            ..SvmOptions::default()
        };
        let s = solve_hard_margin(&rows, &y, &opts).unwrap();
        assert!((s.w[0] - 1.0).abs() < 1e-8 && s.b.abs() < 1e-8);
        assert!(check_classical_kkt(&s, &rows, &y).max_residual() < 1e-8);
    }

    #[test]
    fn xor_is_infeasible() {
        let rows = vec![vec![1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0], vec![-1.0, 1.0]];
        let y = vec![1.0, 1.0, -1.0, -1.0];
        let err = solve_hard_margin(&rows, &y, &SvmOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Infeasible { .. }), "{err}");
    }

    #[test]
    fn overlapping_blobs_are_infeasible() {
        let d = crate::data::gen_blobs2d(2, 40, 0.0, 3).unwrap();
        let err = solve_hard_margin(&d.rows(), &d.signed_labels().unwrap(), &SvmOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Infeasible { .. }), "{err}");
    }

    #[test]
    fn perturbed_and_scaled_reports() {
        let rows = vec![vec![1.0], vec![-1.0], vec![3.0]];
        let y = vec![1.0, -1.0, 1.0];
        let s = solve_hard_margin(&rows, &y, &SvmOptions::default()).unwrap();
        assert_eq!(s.support, vec![0, 1]);
        let mut p = s.clone();
        p.alpha[2] += 0.1;
        let gap = y[2] * s.decision(&rows[2]) - 1.0;
        assert!((check_classical_kkt(&p, &rows, &y).slackness - 0.1 * gap).abs() < 1e-9);
        let mut scaled = s.clone();
        scaled.w[0] *= 2.0;
        scaled.b *= 2.0;
        for (k, r) in rows.iter().enumerate() {
            assert!((y[k] * scaled.decision(r) - 2.0 * y[k] * s.decision(r)).abs() < 1e-12);
        }
        assert!(check_classical_kkt(&scaled, &rows, &y).stationarity > 0.5);
    }
}
