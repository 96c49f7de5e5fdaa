//! Huber objective on log residuals, in the transformed parameter space.
//!
//! Coefficients are optimized as logarithms (`A = exp(a)`, `G = exp(g)`,
//! `E = exp(e)`); exponents and shifts are optimized directly. The vector
//! layout is `[a, alpha, g, beta, e?, p_shift?, f_shift?]`, where the
//! optional slots exist only for forms that carry them.

use crate::error::{Error, Result};
use crate::ingest::Observation;
use crate::model::{FormId, LawForm, LawParams, Shifts};

/// Slot indices of a form's transformed parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub len: usize,
    pub log_irreducible: Option<usize>,
    pub pretrain_shift: Option<usize>,
    pub finetune_shift: Option<usize>,
}

pub const LOG_COEF: usize = 0;
pub const PRETRAIN_EXP: usize = 1;
pub const LOG_GAP: usize = 2;
pub const FINETUNE_EXP: usize = 3;

impl Layout {
    pub fn of(form: FormId) -> Layout {
        let mut next = 4;
        let mut slot = |present: bool| {
            present.then(|| {
                next += 1;
                next - 1
            })
        };
        let log_irreducible = slot(form.has_irreducible());
        let pretrain_shift = slot(form.has_pretrain_shift());
        let finetune_shift = slot(form.has_finetune_shift());
        Layout {
            len: next,
            log_irreducible,
            pretrain_shift,
            finetune_shift,
        }
    }

    /// Back-transforms to natural parameters. `E` is zero for forms without it.
    pub fn decode(&self, form: FormId, theta: &[f64]) -> (LawParams, LawForm) {
        let params = LawParams::new(
            theta[LOG_COEF].exp(),
            theta[LOG_GAP].exp(),
            theta[PRETRAIN_EXP],
            theta[FINETUNE_EXP],
            self.log_irreducible.map_or(0.0, |i| theta[i].exp()),
        );
        let shifts = Shifts {
            pretrain: self.pretrain_shift.map_or(0.0, |i| theta[i]),
            finetune: self.finetune_shift.map_or(0.0, |i| theta[i]),
        };
        (params, LawForm::with_shifts(form, shifts))
    }

    /// Transforms natural parameters; zero coefficients map to a very
    /// negative logarithm rather than `-inf`.
    pub fn encode(&self, params: &LawParams, form: &LawForm) -> Vec<f64> {
        let log = |v: f64| if v > 0.0 { v.ln() } else { -700.0 };
        let mut theta = vec![0.0; self.len];
        theta[LOG_COEF] = log(params.pretrain_coef);
        theta[PRETRAIN_EXP] = params.pretrain_exp;
        theta[LOG_GAP] = log(params.transfer_gap);
        theta[FINETUNE_EXP] = params.finetune_exp;
        if let Some(i) = self.log_irreducible {
            theta[i] = log(params.irreducible);
        }
        if let Some(i) = self.pretrain_shift {
            theta[i] = form.shifts.pretrain;
        }
        if let Some(i) = self.finetune_shift {
            theta[i] = form.shifts.finetune;
        }
        theta
    }
}

/// Loss settings shared by the objective and its gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalty {
    pub huber_delta: f64,
    /// Weight on `alpha^2 + beta^2`.
    pub reg_exponents: f64,
    /// Weight on `a^2 + g^2`.
    pub reg_coefficients: f64,
}

pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[inline]
fn huber_slope(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}

/// Observations with logarithms precomputed.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub p: Vec<f64>,
    pub f: Vec<f64>,
    pub ln_p: Vec<f64>,
    pub ln_f: Vec<f64>,
    pub ln_loss: Vec<f64>,
}

impl Prepared {
    pub fn new(points: &[Observation]) -> Self {
        Prepared {
            p: points.iter().map(|o| o.point.p).collect(),
            f: points.iter().map(|o| o.point.f).collect(),
            ln_p: points.iter().map(|o| o.point.p.ln()).collect(),
            ln_f: points.iter().map(|o| o.point.f.ln()).collect(),
            ln_loss: points.iter().map(|o| o.loss.ln()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }
}

/// Objective value and gradient; `None` if the model is undefined or not
/// finite anywhere on the data.
pub(crate) fn value_and_gradient(
    layout: &Layout,
    theta: &[f64],
    data: &Prepared,
    penalty: &Penalty,
    want_grad: bool,
) -> Option<(f64, Vec<f64>)> {
    let a = theta[LOG_COEF];
    let alpha = theta[PRETRAIN_EXP];
    let gap = theta[LOG_GAP].exp();
    let beta = theta[FINETUNE_EXP];
    let irreducible = layout.log_irreducible.map_or(0.0, |i| theta[i].exp());
    let p_shift = layout.pretrain_shift.map(|i| theta[i]);
    let f_shift = layout.finetune_shift.map(|i| theta[i]);
    let delta = penalty.huber_delta;

    let mut value = 0.0;
    let mut grad = vec![0.0; if want_grad { layout.len } else { 0 }];
    for i in 0..data.len() {
        let (pb, ln_p) = match p_shift {
            Some(s) => {
                let pb = data.p[i] + s;
                if !(pb > 0.0) {
                    return None;
                }
                (pb, pb.ln())
            }
            None => (data.p[i], data.ln_p[i]),
        };
        let (fb, ln_f) = match f_shift {
            Some(s) => {
                let fb = data.f[i] + s;
                if !(fb > 0.0) {
                    return None;
                }
                (fb, fb.ln())
            }
            None => (data.f[i], data.ln_f[i]),
        };
        let pre = (a - alpha * ln_p).exp();
        let ft = (-beta * ln_f).exp();
        let inner = pre + gap;
        let model = inner * ft + irreducible;
        let r = model.ln() - data.ln_loss[i];
        if !r.is_finite() {
            return None;
        }
        value += huber(r, delta);
        if want_grad {
            let k = huber_slope(r, delta) / model;
            let pre_ft = pre * ft;
            grad[LOG_COEF] += k * pre_ft;
            grad[PRETRAIN_EXP] -= k * ln_p * pre_ft;
            grad[LOG_GAP] += k * gap * ft;
            grad[FINETUNE_EXP] -= k * ln_f * inner * ft;
            if let Some(j) = layout.log_irreducible {
                grad[j] += k * irreducible;
            }
            if let Some(j) = layout.pretrain_shift {
                grad[j] -= k * alpha * pre_ft / pb;
            }
            if let Some(j) = layout.finetune_shift {
                grad[j] -= k * beta * inner * ft / fb;
            }
        }
    }

    let (le, lc) = (penalty.reg_exponents, penalty.reg_coefficients);
    value += le * (alpha * alpha + beta * beta) + lc * (a * a + theta[LOG_GAP] * theta[LOG_GAP]);
    if want_grad {
        grad[PRETRAIN_EXP] += 2.0 * le * alpha;
        grad[FINETUNE_EXP] += 2.0 * le * beta;
        grad[LOG_COEF] += 2.0 * lc * a;
        grad[LOG_GAP] += 2.0 * lc * theta[LOG_GAP];
        if grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
    }
    value.is_finite().then_some((value, grad))
}

fn check_theta(layout: &Layout, theta: &[f64]) -> Result<()> {
    if theta.len() != layout.len {
        return Err(Error::InvalidArgument(format!(
            "expected {} transformed parameters, got {}",
            layout.len,
            theta.len()
        )));
    }
    Ok(())
}

/// Huber objective at transformed parameters `theta`.
pub fn objective(form: FormId, theta: &[f64], points: &[Observation], penalty: &Penalty) -> Result<f64> {
    let layout = Layout::of(form);
    check_theta(&layout, theta)?;
    value_and_gradient(&layout, theta, &Prepared::new(points), penalty, false)
        .map(|(v, _)| v)
        .ok_or_else(|| Error::NonFinite("objective is not finite at these parameters".into()))
}

/// Analytic gradient of [`objective`].
pub fn gradient(form: FormId, theta: &[f64], points: &[Observation], penalty: &Penalty) -> Result<Vec<f64>> {
    let layout = Layout::of(form);
    check_theta(&layout, theta)?;
    value_and_gradient(&layout, theta, &Prepared::new(points), penalty, true)
        .map(|(_, g)| g)
        .ok_or_else(|| Error::NonFinite("gradient is not finite at these parameters".into()))
}
