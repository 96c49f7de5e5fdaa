//! Dense BFGS with a strong-Wolfe line search.
//!
//! The objective closure returns `None` when the model is not finite at the
//! trial point; the line search treats that as an infinitely bad step and
//! backs off.

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_BRACKET: usize = 40;
const MAX_ZOOM: usize = 50;
const STALL_ITERS: usize = 10;
const APPROX_EPS: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Status {
    /// Gradient norm fell below the tolerance.
    GradientTolerance,
    /// No further decrease is representable in floating point.
    Stalled,
    MaxIterations,
    /// The objective was not finite at the starting point.
    BadStart,
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: Status,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Trial {
    step: f64,
    x: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
    slope: f64,
}

struct Search<'a, F> {
    func: &'a mut F,
    x: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    slope0: f64,
    evaluations: usize,
}

impl<F> Search<'_, F>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    fn eval(&mut self, step: f64) -> Option<Trial> {
        let x: Vec<f64> = self.x.iter().zip(self.dir).map(|(xi, di)| xi + step * di).collect();
        self.evaluations += 1;
        let (value, grad) = (self.func)(&x)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        let slope = dot(&grad, self.dir);
        Some(Trial {
            step,
            x,
            value,
            grad,
            slope,
        })
    }

    /// Sufficient decrease, or its approximate form once the decrease is
    /// below the resolution of `f` (then the slope must have dropped enough).
    fn armijo_ok(&self, t: &Trial) -> bool {
        t.value <= self.f0 + C1 * t.step * self.slope0
            || (t.value <= self.f0 + APPROX_EPS * self.f0.abs() && t.slope <= (2.0 * C1 - 1.0) * self.slope0)
    }

    fn noise(&self) -> f64 {
        APPROX_EPS * self.f0.abs()
    }

    fn curvature_ok(&self, t: &Trial) -> bool {
        t.slope.abs() <= -C2 * self.slope0
    }

    fn run(&mut self, initial: f64) -> Option<Trial> {
        let mut prev: Option<Trial> = None;
        let mut step = initial;
        for i in 0..MAX_BRACKET {
            let trial = self.eval(step);
            let prev_value = prev.as_ref().map_or(self.f0, |p| p.value);
            match trial {
                None => return self.zoom(prev, step, None),
                Some(t) if !self.armijo_ok(&t) || (i > 0 && t.value > prev_value + self.noise()) => {
                    let hi_step = t.step;
                    return self.zoom(prev, hi_step, Some(t));
                }
                Some(t) => {
                    if self.curvature_ok(&t) {
                        return Some(t);
                    }
                    if t.slope >= 0.0 {
                        let hi = prev;
                        let hi_step = hi.as_ref().map_or(0.0, |h| h.step);
                        return self.zoom(Some(t), hi_step, hi);
                    }
                    step = t.step * 2.0;
                    prev = Some(t);
                }
            }
        }
        prev
    }

    /// Narrows `[lo, hi]` until a strong-Wolfe point is found. `lo = None`
    /// means the origin. Falls back to the best Armijo point seen.
    fn zoom(&mut self, mut lo: Option<Trial>, mut hi_step: f64, mut hi: Option<Trial>) -> Option<Trial> {
        for _ in 0..MAX_ZOOM {
            let (lo_step, lo_value, lo_slope) = lo
                .as_ref()
                .map_or((0.0, self.f0, self.slope0), |t| (t.step, t.value, t.slope));
            let width = (hi_step - lo_step).abs();
            if width <= 1e-16 * lo_step.abs().max(1e-300) || width == 0.0 {
                break;
            }
            let step = match &hi {
                Some(h) => cubic_step(lo_step, lo_value, lo_slope, h.step, h.value, h.slope),
                None => 0.5 * (lo_step + hi_step),
            };
            match self.eval(step) {
                None => {
                    hi_step = step;
                    hi = None;
                }
                Some(t) if !self.armijo_ok(&t) || t.value > lo_value + self.noise() => {
                    hi_step = t.step;
                    hi = Some(t);
                }
                Some(t) => {
                    if self.curvature_ok(&t) {
                        return Some(t);
                    }
                    if t.slope * (hi_step - lo_step) >= 0.0 {
                        hi_step = lo_step;
                        hi = lo.take();
                    }
                    lo = Some(t);
                }
            }
        }
        lo.filter(|t| t.value < self.f0)
    }
}

/// Minimizer of the cubic interpolating both ends, clamped into the
/// interior of the bracket. Degenerate fits fall back to bisection.
fn cubic_step(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (hi - lo);
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let mid = 0.5 * (a + b);
    if !disc.is_finite() || disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let step = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    if step.is_finite() && step >= lo + margin && step <= hi - margin {
        step
    } else {
        mid
    }
}

pub(crate) struct Options {
    pub max_iterations: usize,
    pub grad_tol: f64,
}

pub(crate) fn minimize<F>(mut func: F, x0: Vec<f64>, opts: &Options) -> Outcome
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut evaluations = 1;
    let Some((mut fx, mut g)) = func(&x0).filter(|(v, g)| v.is_finite() && g.iter().all(|x| x.is_finite())) else {
        return Outcome {
            x: x0,
            value: f64::INFINITY,
            grad_norm: f64::INFINITY,
            iterations: 0,
            evaluations,
            status: Status::BadStart,
        };
    };
    let mut x = x0;
    // inverse Hessian approximation, row-major
    let mut h = identity(n);
    let mut fresh = true;
    let mut stall = 0;
    let mut best_gnorm = f64::INFINITY;
    let mut status = Status::MaxIterations;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        let gnorm = norm(&g);
        if gnorm <= opts.grad_tol {
            status = Status::GradientTolerance;
            break;
        }
        iterations += 1;

        let mut dir = mat_vec_neg(&h, &g, n);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            h = identity(n);
            fresh = true;
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let initial = if fresh { (1.0 / gnorm).min(1.0) } else { 1.0 };

        let mut search = Search {
            func: &mut func,
            x: &x,
            dir: &dir,
            f0: fx,
            slope0: slope,
            evaluations: 0,
        };
        let found = search.run(initial);
        evaluations += search.evaluations;

        let Some(t) = found else {
            if fresh {
                status = Status::Stalled;
                break;
            }
            // retry along steepest descent with a fresh model
            h = identity(n);
            fresh = true;
            continue;
        };

        let s: Vec<f64> = t.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = t.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
        let decrease = fx - t.value;
        x = t.x;
        g = t.grad;
        fx = t.value;

        let gnorm_new = norm(&g);
        if gnorm_new < best_gnorm {
            best_gnorm = gnorm_new;
            stall = 0;
        } else if decrease <= f64::EPSILON * fx.abs() {
            stall += 1;
            if stall >= STALL_ITERS {
                status = Status::Stalled;
                break;
            }
        } else {
            stall = 0;
        }

        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if fresh {
                let yy = dot(&y, &y);
                let scale = sy / yy;
                h = identity(n);
                for i in 0..n {
                    h[i * n + i] = scale;
                }
                fresh = false;
            }
            bfgs_update(&mut h, &s, &y, sy, n);
        }
    }

    let grad_norm = norm(&g);
    if status == Status::MaxIterations && grad_norm <= opts.grad_tol {
        status = Status::GradientTolerance;
    }
    Outcome {
        x,
        value: fx,
        grad_norm,
        iterations,
        evaluations,
        status,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec_neg(h: &[f64], g: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], g)).collect()
}

// H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64, n: usize) {
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    let coef = (1.0 + rho * yhy) * rho;
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Some((f, g))
    }

    #[test]
    fn solves_rosenbrock() {
        let out = minimize(
            rosenbrock,
            vec![-1.2, 1.0],
            &Options {
                max_iterations: 500,
                grad_tol: 1e-10,
            },
        );
        assert_eq!(out.status, Status::GradientTolerance);
        assert!(
            (out.x[0] - 1.0).abs() < 1e-8 && (out.x[1] - 1.0).abs() < 1e-8,
            "{:?}",
            out.x
        );
    }

    #[test]
    fn backs_off_from_non_finite_region() {
        // log barrier: undefined for x <= 0, minimum at x = 1
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                None
            } else {
                Some((x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]]))
            }
        };
        let out = minimize(
            f,
            vec![8.0],
            &Options {
                max_iterations: 200,
                grad_tol: 1e-12,
            },
        );
        assert_eq!(out.status, Status::GradientTolerance);
        assert!((out.x[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn bad_start_is_reported() {
        let out = minimize(
            |_: &[f64]| None,
            vec![0.0],
            &Options {
                max_iterations: 10,
                grad_tol: 1e-9,
            },
        );
        assert_eq!(out.status, Status::BadStart);
    }

    #[test]
    fn quadratic_in_few_iterations() {
        let f = |x: &[f64]| {
            let v = 3.0 * x[0] * x[0] + 0.5 * x[1] * x[1] + x[0] * x[1] - x[0];
            Some((v, vec![6.0 * x[0] + x[1] - 1.0, x[1] + x[0]]))
        };
        let out = minimize(
            f,
            vec![5.0, -3.0],
            &Options {
                max_iterations: 50,
                grad_tol: 1e-12,
            },
        );
        assert_eq!(out.status, Status::GradientTolerance);
        assert!(out.iterations < 20);
    }
}
