//! Convex sparse recovery with optional partial support knowledge, plus the
//! add/least-squares/delete support refinement.
//!
//! The core program is
//!
//! ```text
//!   minimize ‖s_offT‖₁   subject to  ‖y − A s‖₂ ≤ ε
//! ```
//!
//! where `offT` are the coordinates outside the known-support set T (T = ∅
//! gives ordinary ℓ1 recovery). It is solved by alternating-direction
//! splitting over the pair (s, r) with r the data residual: one half-step
//! projects onto the affine set {A s + r = y} through a cached Cholesky
//! factorization of (AA' + I), the other applies the separable proximal map —
//! soft-thresholding off T, identity on T, Euclidean-ball projection on r.
//! The penalty is rebalanced whenever primal and dual residuals drift apart.

use ndarray::prelude::*;
use ndarray_linalg::cholesky::{CholeskyFactorized, FactorizeC, SolveC};
use ndarray_linalg::{Diag, JobSvd, SolveTriangular, SVDDC, QR, UPLO};

use crate::error::{Error, Result};
use crate::support;

/// A partial-support sparse recovery problem.
#[derive(Debug, Clone)]
pub struct ModCsProblem {
    /// Measurement vector y of length m.
    pub measurements: Array1<f64>,
    /// Measurement matrix A, m×n.
    pub matrix: Array2<f64>,
    /// Known-part support T (canonical sorted indices; may be empty).
    pub known_support: Vec<usize>,
    /// Radius ε ≥ 0 of the data-fit ball.
    pub epsilon: f64,
}

/// Outcome of one solve.
#[derive(Debug, Clone)]
pub struct SolverReport {
    /// Recovered vector of length n.
    pub solution: Array1<f64>,
    /// Final data residual ‖y − A s‖₂.
    pub residual_norm: f64,
    /// Iterations consumed.
    pub iterations: usize,
    /// Whether the stopping test was met within the iteration budget.
    pub converged: bool,
}

/// Relative slack allowed on the ball constraint at convergence.
pub const FEASIBILITY_SLACK: f64 = 1e-9;

/// Absolute feasibility floor relative to ‖y‖: with a zero (or vanishingly
/// small) radius the residual can only be driven to rounding level, so a
/// converged solve is allowed ‖y − A s‖ up to this fraction of ‖y‖.
pub const FEASIBILITY_FLOOR: f64 = 1e-11;

/// Options controlling a solve.
#[derive(Debug, Clone, Default)]
pub struct SolverOptions {
    /// Stopping tolerance on primal and dual residuals (default 1e-6).
    pub tol: Option<f64>,
    /// Iteration cap (default 2000).
    pub max_iter: Option<usize>,
    /// Previous-frame solution to warm-start from.
    pub warm_start: Option<Array1<f64>>,
}

const DEFAULT_TOL: f64 = 1e-6;
const DEFAULT_MAX_ITER: usize = 2000;
/// Residual-balancing trigger ratio and the penalty scaling factor.
const BALANCE_RATIO: f64 = 10.0;
const BALANCE_FACTOR: f64 = 2.0;
/// Balancing cadence and lifetime cap. Rescaling perturbs the dual state, so
/// adjustments are rationed; once the cap is spent the penalty stays fixed
/// and the fixed-penalty convergence guarantee covers the tail.
const BALANCE_PERIOD: usize = 10;
const BALANCE_MAX_ADJUSTMENTS: usize = 30;

/// Reusable solver bound to one measurement matrix: the affine-projection
/// factorization is computed once and shared across frames.
pub struct ModCsSolver {
    matrix: Array2<f64>,
    /// Cholesky factor of AA' + I (affine projection).
    projection_factor: CholeskyFactorized<ndarray::OwnedRepr<f64>>,
    /// Cholesky factor of AA' (feasibility polish), present when AA' is
    /// positive definite, i.e. A has full row rank.
    gram_factor: Option<CholeskyFactorized<ndarray::OwnedRepr<f64>>>,
}

impl ModCsSolver {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        let m = matrix.nrows();
        if m == 0 || matrix.ncols() == 0 {
            return Err(Error::invalid("measurement matrix must be nonempty"));
        }
        let gram = matrix.dot(&matrix.t());
        let projection_factor = (&gram + &Array2::<f64>::eye(m)).factorizec(UPLO::Lower)?;
        let gram_factor = gram.factorizec(UPLO::Lower).ok();
        Ok(ModCsSolver {
            matrix,
            projection_factor,
            gram_factor,
        })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Solves for the given measurements, known support, and ball radius.
    pub fn solve(
        &self,
        y: &Array1<f64>,
        known_support: &[usize],
        epsilon: f64,
        options: &SolverOptions,
    ) -> Result<SolverReport> {
        self.solve_traced(y, known_support, epsilon, options, None)
    }

    /// As [`solve`](Self::solve), also recording the per-iteration merit
    /// (the splitting fixed-point residual) and penalty-change flags.
    pub fn solve_traced(
        &self,
        y: &Array1<f64>,
        known_support: &[usize],
        epsilon: f64,
        options: &SolverOptions,
        mut trace: Option<&mut Vec<(f64, bool)>>,
    ) -> Result<SolverReport> {
        let (m, n) = self.matrix.dim();
        if y.len() != m {
            return Err(Error::dim("solve_modcs measurements", m, y.len()));
        }
        if let Some(&max) = known_support.iter().max() {
            if max >= n {
                return Err(Error::invalid(format!(
                    "known support index {max} out of range for n = {n}"
                )));
            }
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be finite ≥ 0, got {epsilon}")));
        }
        let tol = options.tol.unwrap_or(DEFAULT_TOL);
        let max_iter = options.max_iter.unwrap_or(DEFAULT_MAX_ITER);
        if !(tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }

        let y_norm = norm(y);
        if y_norm <= epsilon {
            // Zero is feasible and has the minimal possible objective.
            return Ok(SolverReport {
                solution: Array1::zeros(n),
                residual_norm: y_norm,
                iterations: 0,
                converged: true,
            });
        }

        let mut on_known = vec![false; n];
        for &i in known_support {
            on_known[i] = true;
        }

        // Split state: x = (s, r) on the affine set, xh its proximal copy,
        // u the scaled dual.
        let mut s = match &options.warm_start {
            Some(w) if w.len() == n => w.clone(),
            _ => Array1::zeros(n),
        };
        let mut r = y - &self.matrix.dot(&s);
        project_ball(&mut r, epsilon);
        let mut sh = s.clone();
        let mut rh = r.clone();
        let mut us = Array1::<f64>::zeros(n);
        let mut ur = Array1::<f64>::zeros(m);
        let mut rho = 1.0 / y_norm.max(1e-300);

        let mut iterations = 0;
        let mut converged = false;
        // Fixed-point tracking of z = x̂ + u, whose drift is non-increasing
        // for a fixed penalty (the splitting map is firmly nonexpansive).
        let mut prev_zs = &sh + &us;
        let mut prev_zr = &rh + &ur;
        let mut penalty_changed = false;
        let mut adjustments = 0usize;
        for it in 1..=max_iter {
            iterations = it;
            // Affine projection of (sh - us, rh - ur) onto {A s + r = y}.
            let ts = &sh - &us;
            let tr = &rh - &ur;
            let gap = &self.matrix.dot(&ts) + &tr - y;
            let mu = self.projection_factor.solvec(&gap)?;
            s = &ts - &self.matrix.t().dot(&mu);
            r = &tr - &mu;

            // Proximal half-step.
            let kappa = 1.0 / rho;
            let new_sh = Array1::from_shape_fn(n, |i| {
                let v = s[i] + us[i];
                if on_known[i] {
                    v
                } else {
                    soft_threshold(v, kappa)
                }
            });
            let mut new_rh = &r + &ur;
            project_ball(&mut new_rh, epsilon);

            // Residuals and dual update.
            let primal = (norm2(&(&s - &new_sh)) + norm2(&(&r - &new_rh))).sqrt();
            let dual = rho * (norm2(&(&new_sh - &sh)) + (norm2(&(&new_rh - &rh)))).sqrt();
            sh = new_sh;
            rh = new_rh;
            us += &(&s - &sh);
            ur += &(&r - &rh);

            if let Some(tr_vec) = trace.as_deref_mut() {
                let zs = &sh + &us;
                let zr = &rh + &ur;
                let drift = (norm2(&(&zs - &prev_zs)) + norm2(&(&zr - &prev_zr))).sqrt();
                tr_vec.push((drift, penalty_changed));
                penalty_changed = false;
                prev_zs = zs;
                prev_zr = zr;
            }

            // Relative thresholds with rounding-noise floors: the dual
            // residual cannot be resolved below ρ · (machine noise in x̂), so
            // a large penalty must not keep an otherwise stationary iterate
            // from certifying.
            let x_scale = (norm2(&s) + norm2(&r)).sqrt().max((norm2(&sh) + norm2(&rh)).sqrt());
            let u_scale = rho * (norm2(&us) + norm2(&ur)).sqrt();
            let noise = 100.0 * f64::EPSILON * (y_norm + x_scale);
            let eps_pri = tol * (y_norm + x_scale) + noise;
            let eps_dua = tol * (y_norm + u_scale) + rho * noise;
            if primal <= eps_pri && dual <= eps_dua {
                converged = true;
                break;
            }

            // Residual balancing with dual rescaling.
            if it % BALANCE_PERIOD == 0 && adjustments < BALANCE_MAX_ADJUSTMENTS {
                if primal > BALANCE_RATIO * dual {
                    rho *= BALANCE_FACTOR;
                    us /= BALANCE_FACTOR;
                    ur /= BALANCE_FACTOR;
                    penalty_changed = true;
                    adjustments += 1;
                } else if dual > BALANCE_RATIO * primal {
                    rho /= BALANCE_FACTOR;
                    us *= BALANCE_FACTOR;
                    ur *= BALANCE_FACTOR;
                    penalty_changed = true;
                    adjustments += 1;
                }
            }
        }

        // Report the proximal copy: it carries exact zeros. Nudge it back to
        // feasibility if the ball constraint is violated by the splitting gap.
        let feasibility_limit = (epsilon * (1.0 + FEASIBILITY_SLACK)).max(FEASIBILITY_FLOOR * y_norm);
        let mut solution = sh;
        let mut residual = y - &self.matrix.dot(&solution);
        let mut residual_norm = norm(&residual);
        if converged && residual_norm > feasibility_limit {
            if let Some(gram) = &self.gram_factor {
                // Aim slightly inside the ball so the rounding error of the
                // correction itself cannot push the result back outside.
                let target_radius = (epsilon - 2.0 * FEASIBILITY_FLOOR * y_norm).max(0.0);
                let mut target = residual.clone();
                project_ball(&mut target, target_radius);
                let shift = self.gram_factor_solve(gram, &(&residual - &target))?;
                solution += &self.matrix.t().dot(&shift);
                residual = y - &self.matrix.dot(&solution);
                residual_norm = norm(&residual);
            }
            if residual_norm > feasibility_limit {
                converged = false;
            }
        }
        Ok(SolverReport {
            solution,
            residual_norm,
            iterations,
            converged,
        })
    }

    fn gram_factor_solve(
        &self,
        factor: &CholeskyFactorized<ndarray::OwnedRepr<f64>>,
        rhs: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        Ok(factor.solvec(rhs)?)
    }
}

/// One-shot solve building the cached factorization internally.
pub fn solve_modcs(problem: &ModCsProblem, tol: f64, max_iter: usize) -> Result<SolverReport> {
    let solver = ModCsSolver::new(problem.matrix.clone())?;
    solver.solve(
        &problem.measurements,
        &problem.known_support,
        problem.epsilon,
        &SolverOptions {
            tol: Some(tol),
            max_iter: Some(max_iter),
            warm_start: None,
        },
    )
}

fn soft_threshold(v: f64, kappa: f64) -> f64 {
    if v > kappa {
        v - kappa
    } else if v < -kappa {
        v + kappa
    } else {
        0.0
    }
}

fn project_ball(v: &mut Array1<f64>, radius: f64) {
    let n = norm(v);
    if n > radius {
        if radius == 0.0 {
            v.fill(0.0);
        } else {
            *v *= radius / n;
        }
    }
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

fn norm2(v: &Array1<f64>) -> f64 {
    v.dot(v)
}

/// Thresholds for the add/least-squares/delete refinement.
#[derive(Debug, Clone, Copy)]
pub struct AddLsDelParams {
    /// Candidates with |value| strictly above this enter the enlarged support.
    pub alpha_add: f64,
    /// Entries with |LS value| strictly below this are deleted.
    pub alpha_del: f64,
    /// Smallest acceptable singular value of the column-normalized submatrix.
    pub conditioning_floor: f64,
}

impl Default for AddLsDelParams {
    fn default() -> Self {
        AddLsDelParams {
            alpha_add: 0.0,
            alpha_del: 0.0,
            conditioning_floor: 0.1,
        }
    }
}

/// Diagnostics from one refinement pass.
#[derive(Debug, Clone, Copy)]
pub struct AddLsDelReport {
    /// Size of the enlarged support after the add step.
    pub add_support_len: usize,
    /// Smallest singular value of the column-normalized enlarged submatrix.
    pub smallest_normalized_sv: f64,
    /// Whether the automatic doubled-threshold retry was taken.
    pub retried: bool,
}

/// Support refinement: threshold-add candidates from `s_hat`, least-squares
/// re-estimate on the enlarged support, threshold-delete, final least squares.
///
/// Returns the final support (canonical), the estimate with exact zeros
/// off-support, and diagnostics.
pub fn add_ls_del(
    s_hat: &Array1<f64>,
    a: &Array2<f64>,
    y: &Array1<f64>,
    known_support: &[usize],
    params: &AddLsDelParams,
) -> Result<(Vec<usize>, Array1<f64>, AddLsDelReport)> {
    let (m, n) = a.dim();
    if s_hat.len() != n {
        return Err(Error::dim("add_ls_del estimate", n, s_hat.len()));
    }
    if y.len() != m {
        return Err(Error::dim("add_ls_del measurements", m, y.len()));
    }
    if !(params.alpha_add >= 0.0 && params.alpha_del >= 0.0 && params.conditioning_floor > 0.0) {
        return Err(Error::invalid("add_ls_del thresholds must be nonnegative"));
    }

    let candidates: Vec<usize> = (0..n)
        .filter(|&i| !support::contains(known_support, i) && s_hat[i].abs() > params.alpha_add)
        .collect();
    let add_support = support::union(known_support, &candidates);
    if add_support.is_empty() {
        return Ok((
            Vec::new(),
            Array1::zeros(n),
            AddLsDelReport {
                add_support_len: 0,
                smallest_normalized_sv: f64::INFINITY,
                retried: false,
            },
        ));
    }

    let (sub, smallest) = conditioned_submatrix(a, &add_support, params.conditioning_floor)?;
    let ls = ls_by_qr(&sub, y)?;

    let kept: Vec<usize> = add_support
        .iter()
        .zip(ls.iter())
        .filter(|(_, v)| v.abs() >= params.alpha_del)
        .map(|(&i, _)| i)
        .collect();

    let mut estimate = Array1::<f64>::zeros(n);
    if !kept.is_empty() {
        let (sub_final, _) = conditioned_submatrix(a, &kept, params.conditioning_floor)?;
        let final_ls = ls_by_qr(&sub_final, y)?;
        for (&i, &v) in kept.iter().zip(final_ls.iter()) {
            estimate[i] = v;
        }
    }
    Ok((
        kept,
        estimate,
        AddLsDelReport {
            add_support_len: add_support.len(),
            smallest_normalized_sv: smallest,
            retried: false,
        },
    ))
}

/// [`add_ls_del`] with one automatic retry at doubled `alpha_add` when the
/// enlarged support is ill-conditioned.
pub fn add_ls_del_with_retry(
    s_hat: &Array1<f64>,
    a: &Array2<f64>,
    y: &Array1<f64>,
    known_support: &[usize],
    params: &AddLsDelParams,
) -> Result<(Vec<usize>, Array1<f64>, AddLsDelReport)> {
    match add_ls_del(s_hat, a, y, known_support, params) {
        Err(Error::IllConditionedLs { .. }) => {
            let retry_params = AddLsDelParams {
                alpha_add: 2.0 * params.alpha_add,
                ..*params
            };
            let (support, estimate, report) =
                add_ls_del(s_hat, a, y, known_support, &retry_params)?;
            Ok((
                support,
                estimate,
                AddLsDelReport {
                    retried: true,
                    ..report
                },
            ))
        }
        other => other,
    }
}

/// Extracts `a[:, support]`, failing if the column-normalized copy has a
/// singular value below `floor`.
fn conditioned_submatrix(
    a: &Array2<f64>,
    support: &[usize],
    floor: f64,
) -> Result<(Array2<f64>, f64)> {
    let m = a.nrows();
    let k = support.len();
    let mut sub = Array2::<f64>::zeros((m, k));
    for (j, &i) in support.iter().enumerate() {
        sub.column_mut(j).assign(&a.column(i));
    }
    let mut normalized = sub.clone();
    for mut col in normalized.columns_mut() {
        let cn = col.dot(&col).sqrt();
        if cn > 0.0 {
            col /= cn;
        }
    }
    let smallest = if k > m {
        0.0
    } else {
        let (_, sv, _) = normalized.svddc(JobSvd::None)?;
        sv.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    if smallest < floor {
        return Err(Error::IllConditionedLs {
            smallest,
            floor,
            support_len: k,
        });
    }
    Ok((sub, smallest))
}

/// Least squares through a thin QR factorization.
fn ls_by_qr(a: &Array2<f64>, y: &Array1<f64>) -> Result<Array1<f64>> {
    let (q, r) = a.qr()?;
    let rhs = q.t().dot(y);
    Ok(r.solve_triangular(UPLO::Upper, Diag::NonUnit, &rhs)?)
}

/// Data-fit radius schedule: ε_t = max(scale · r̂_{t−1}, floor · ‖y‖), where
/// r̂ is an exponentially smoothed residual norm seeded by the first observed
/// value; before any observation the configured initial radius is used.
#[derive(Debug, Clone)]
pub struct EpsilonRule {
    /// Multiplier on the smoothed residual (default 1.5).
    pub scale: f64,
    /// Relative floor against ‖y‖ (default 1e-6).
    pub floor_fraction: f64,
    /// Exponential smoothing weight on the previous estimate (default 0.9).
    pub smoothing: f64,
    /// Radius used before the first residual observation.
    pub epsilon_init: f64,
    residual_estimate: Option<f64>,
}

impl EpsilonRule {
    pub fn new(scale: f64, floor_fraction: f64, smoothing: f64, epsilon_init: f64) -> Self {
        EpsilonRule {
            scale,
            floor_fraction,
            smoothing,
            epsilon_init,
            residual_estimate: None,
        }
    }

    /// Radius for the next solve given the current measurement norm.
    pub fn epsilon(&self, y_norm: f64) -> f64 {
        match self.residual_estimate {
            None => self.epsilon_init,
            Some(r) => (self.scale * r).max(self.floor_fraction * y_norm),
        }
    }

    /// Smoothed residual estimate r̂ (None before any observation).
    pub fn residual_estimate(&self) -> Option<f64> {
        self.residual_estimate
    }

    /// Folds the residual norm of a completed solve into the estimate.
    pub fn observe(&mut self, residual_norm: f64) {
        self.residual_estimate = Some(match self.residual_estimate {
            None => residual_norm,
            Some(prev) => self.smoothing * prev + (1.0 - self.smoothing) * residual_norm,
        });
    }
}

impl Default for EpsilonRule {
    fn default() -> Self {
        EpsilonRule::new(1.5, 1e-6, 0.9, 1e-3)
    }
}
