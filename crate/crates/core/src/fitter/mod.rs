//! Multi-start quasi-Newton fitting of the transfer law.
//!
//! Every start of the initial-guess grid is refined with BFGS; the winner is
//! the converged local fit with the lowest objective, ties going to the
//! lowest start index. Starts run in parallel but the reduction is ordered,
//! so results do not depend on the thread count.

mod bfgs;
pub mod objective;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Observation;
use crate::model::{FormId, LawForm, LawParams};

pub use objective::{gradient, huber, objective, Layout, Penalty};
use objective::{value_and_gradient, Prepared, FINETUNE_EXP, PRETRAIN_EXP};

/// Per-parameter lists of initial guesses. Their cartesian product is the
/// start grid, enumerated with the last list varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartGrid {
    /// `a = log A`
    pub log_coef: Vec<f64>,
    pub pretrain_exp: Vec<f64>,
    /// `g = log G`
    pub log_gap: Vec<f64>,
    pub finetune_exp: Vec<f64>,
    /// `e = log E`; ignored by forms without an irreducible term.
    pub log_irreducible: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl Default for StartGrid {
    fn default() -> Self {
        StartGrid {
            log_coef: linspace(0.0, 8.0, 5),
            pretrain_exp: linspace(0.0, 1.0, 4),
            log_gap: linspace(-5.0, 5.0, 7),
            finetune_exp: linspace(0.0, 1.0, 4),
            log_irreducible: linspace(0.0, 3.0, 4),
        }
    }
}

impl StartGrid {
    /// Corners and midpoints of the default ranges: 3 x 2 x 3 x 2 x 2 starts.
    pub fn coarse() -> Self {
        StartGrid {
            log_coef: vec![0.0, 4.0, 8.0],
            pretrain_exp: vec![1.0 / 3.0, 2.0 / 3.0],
            log_gap: vec![-5.0, 0.0, 5.0],
            finetune_exp: vec![1.0 / 3.0, 2.0 / 3.0],
            log_irreducible: vec![0.0, 2.0],
        }
    }

    fn lists(&self) -> [&[f64]; 5] {
        [
            &self.log_coef,
            &self.pretrain_exp,
            &self.log_gap,
            &self.finetune_exp,
            &self.log_irreducible,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.lists().iter().any(|l| l.is_empty()) {
            return Err(Error::InvalidArgument("every start-grid list must be non-empty".into()));
        }
        Ok(())
    }

    /// Number of starts for a form (the `e` list is skipped when unused).
    pub fn len(&self, form: FormId) -> usize {
        let n: usize = self.lists()[..4].iter().map(|l| l.len()).product();
        if form.has_irreducible() {
            n * self.log_irreducible.len()
        } else {
            n
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lists().iter().any(|l| l.is_empty())
    }

    /// Transformed start vectors; shift slots take the form's current shifts.
    pub fn starts(&self, form: &LawForm) -> Vec<Vec<f64>> {
        let layout = Layout::of(form.id);
        let e_list: &[f64] = if form.has_irreducible() {
            &self.log_irreducible
        } else {
            &[0.0]
        };
        let mut out = Vec::with_capacity(self.len(form.id));
        for &a in &self.log_coef {
            for &alpha in &self.pretrain_exp {
                for &g in &self.log_gap {
                    for &beta in &self.finetune_exp {
                        for &e in e_list {
                            let mut theta = vec![a, alpha, g, beta];
                            if layout.log_irreducible.is_some() {
                                theta.push(e);
                            }
                            if layout.pretrain_shift.is_some() {
                                theta.push(form.shifts.pretrain);
                            }
                            if layout.finetune_shift.is_some() {
                                theta.push(form.shifts.finetune);
                            }
                            out.push(theta);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Huber threshold, in log-loss units.
    pub huber_delta: f64,
    pub start_grid: StartGrid,
    pub max_iterations: usize,
    /// Gradient-norm threshold for convergence.
    pub convergence_tol: f64,
    /// Weight of the `alpha^2 + beta^2` penalty.
    pub reg_exponents: f64,
    /// Weight of the `a^2 + g^2` penalty.
    pub reg_coefficients: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            huber_delta: 1e-3,
            start_grid: StartGrid::default(),
            max_iterations: 2000,
            convergence_tol: 1e-9,
            reg_exponents: 0.0,
            reg_coefficients: 0.0,
        }
    }
}

impl FitConfig {
    pub fn penalty(&self) -> Penalty {
        Penalty {
            huber_delta: self.huber_delta,
            reg_exponents: self.reg_exponents,
            reg_coefficients: self.reg_coefficients,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.huber_delta > 0.0) {
            return Err(Error::InvalidArgument("huber_delta must be > 0".into()));
        }
        if self.reg_exponents < 0.0 || self.reg_coefficients < 0.0 {
            return Err(Error::InvalidArgument("regularization weights must be >= 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        self.start_grid.validate()
    }
}

/// Gradient norms below this count as stationary when the line search can
/// make no further progress in floating point.
const STALL_GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// The form with fitted shifts.
    pub form: LawForm,
    pub params: LawParams,
    pub objective: f64,
    pub converged: bool,
    pub start_index: usize,
    /// Objective evaluations summed over all starts.
    pub n_evaluations: usize,
    pub grad_norm: f64,
    /// Winning point in the transformed space.
    pub theta: Vec<f64>,
}

impl FitResult {
    pub fn predict(&self, p: f64, f: f64) -> f64 {
        crate::model::eval_raw(&self.form, &self.params, p, f)
    }
}

/// Outcome of one local refinement.
#[derive(Debug, Clone)]
struct LocalFit {
    theta: Vec<f64>,
    value: f64,
    grad_norm: f64,
    evaluations: usize,
    converged: bool,
}

fn local_fit(layout: &Layout, data: &Prepared, config: &FitConfig, start: Vec<f64>) -> LocalFit {
    let penalty = config.penalty();
    let opts = bfgs::Options {
        max_iterations: config.max_iterations,
        grad_tol: config.convergence_tol,
    };
    let out = bfgs::minimize(|x| value_and_gradient(layout, x, data, &penalty, true), start, &opts);
    let converged = match out.status {
        bfgs::Status::GradientTolerance => true,
        bfgs::Status::Stalled => out.grad_norm <= STALL_GRAD_TOL,
        bfgs::Status::MaxIterations | bfgs::Status::BadStart => false,
    };
    log::trace!(
        "local fit {:?} after {} iterations, objective {:e}",
        out.status,
        out.iterations,
        out.value
    );
    LocalFit {
        theta: out.x,
        value: out.value,
        grad_norm: out.grad_norm,
        evaluations: out.evaluations,
        converged,
    }
}

fn admissible(fit: &LocalFit) -> bool {
    fit.converged
        && fit.value.is_finite()
        && fit.theta[PRETRAIN_EXP] > 0.0
        && fit.theta[FINETUNE_EXP] > 0.0
        && fit.theta.iter().all(|v| v.is_finite())
}

fn check_points(points: &[Observation], form: FormId) -> Result<()> {
    let k = form.n_params();
    if points.len() < k {
        return Err(Error::Precondition(format!(
            "form {form} has {k} free parameters but only {} points were given",
            points.len()
        )));
    }
    let distinct = |key: fn(&Observation) -> f64| {
        let mut v: Vec<u64> = points.iter().map(|o| key(o).to_bits()).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    if distinct(|o| o.point.p) < 2 || distinct(|o| o.point.f) < 2 {
        log::warn!("points lie on a single pre-training or fine-tuning level; the fit is rank-deficient");
    }
    Ok(())
}

/// Refines every start and reduces to the best admissible local fit.
pub fn fit_from_starts(
    points: &[Observation],
    form: &LawForm,
    config: &FitConfig,
    starts: &[Vec<f64>],
) -> Result<FitResult> {
    config.validate()?;
    check_points(points, form.id)?;
    let layout = Layout::of(form.id);
    if let Some(bad) = starts.iter().find(|s| s.len() != layout.len) {
        return Err(Error::InvalidArgument(format!(
            "start has {} entries, form {} needs {}",
            bad.len(),
            form.id,
            layout.len
        )));
    }
    let data = Prepared::new(points);
    let fits: Vec<LocalFit> = starts
        .par_iter()
        .map(|s| local_fit(&layout, &data, config, s.clone()))
        .collect();

    let n_evaluations = fits.iter().map(|f| f.evaluations).sum();
    let mut best: Option<(usize, &LocalFit)> = None;
    for (i, fit) in fits.iter().enumerate() {
        if !admissible(fit) {
            continue;
        }
        // strict comparison keeps the lowest index on ties
        if best.is_none_or(|(_, b)| fit.value < b.value) {
            best = Some((i, fit));
        }
    }
    let (start_index, winner) = best.ok_or(Error::NoStartConverged {
        attempted: starts.len(),
    })?;
    let (params, fitted_form) = layout.decode(form.id, &winner.theta);
    Ok(FitResult {
        form: fitted_form,
        params,
        objective: winner.value,
        converged: true,
        start_index,
        n_evaluations,
        grad_norm: winner.grad_norm,
        theta: winner.theta.clone(),
    })
}

/// Fits `form` to `points` from every start of the configured grid.
pub fn fit(points: &[Observation], form: &LawForm, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    fit_from_starts(points, form, config, &config.start_grid.starts(form))
}
