//! Budget allocation, sweeps, iso-loss curves and compute estimates.
//!
//! Allocation solves `min L(p, f)` subject to
//! `C_p * steps + C_f * f = B`, where `p = steps * p_units_per_step + 1`.
//! Because the law is strictly decreasing in both inputs the budget is
//! always spent in full, which reduces the problem to a search over `f`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::RunRecord;
use crate::model::LawParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    /// Total budget in dollars.
    pub budget: f64,
    /// Dollars per pre-training step.
    pub cost_per_pretrain_step: f64,
    /// Dollars per fine-tuning data point.
    pub cost_per_finetune_point: f64,
    pub params: LawParams,
    /// Law units of `p` contributed by one pre-training step.
    pub p_units_per_step: f64,
}

impl AllocationProblem {
    pub fn new(budget: f64, cost_per_pretrain_step: f64, cost_per_finetune_point: f64, params: LawParams) -> Self {
        AllocationProblem {
            budget,
            cost_per_pretrain_step,
            cost_per_finetune_point,
            params,
            p_units_per_step: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("budget", self.budget),
            ("cost_per_pretrain_step", self.cost_per_pretrain_step),
            ("cost_per_finetune_point", self.cost_per_finetune_point),
            ("p_units_per_step", self.p_units_per_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        self.params.validate()?;
        if self.budget < self.cost_per_finetune_point {
            return Err(Error::Infeasible(format!(
                "budget {} cannot buy a single fine-tuning point at {}",
                self.budget, self.cost_per_finetune_point
            )));
        }
        Ok(())
    }

    /// Largest affordable fine-tuning set.
    pub fn max_finetune(&self) -> f64 {
        self.budget / self.cost_per_finetune_point
    }

    /// Pre-training steps bought with what is left after `f` points.
    pub fn steps_for(&self, f: f64) -> f64 {
        self.steps_for_dollars(self.cost_per_finetune_point * f)
    }

    pub fn p_for(&self, f: f64) -> f64 {
        self.steps_for(f) * self.p_units_per_step + 1.0
    }

    /// Loss along the budget line.
    pub fn loss_at(&self, f: f64) -> f64 {
        law(&self.params, self.p_for(f), f)
    }

    fn steps_for_dollars(&self, finetune_dollars: f64) -> f64 {
        ((self.budget - finetune_dollars) / self.cost_per_pretrain_step).max(0.0)
    }

    /// `L - E` along the budget line, up to the positive factor `C_f^beta`,
    /// as a function of fine-tuning dollars. Minimizing it is equivalent to
    /// minimizing the loss and does not involve `C_f`.
    fn scaled_excess(&self, dollars: f64) -> f64 {
        let p = self.steps_for_dollars(dollars) * self.p_units_per_step + 1.0;
        let LawParams {
            pretrain_coef: a,
            transfer_gap: g,
            pretrain_exp: alpha,
            finetune_exp: beta,
            ..
        } = self.params;
        (a * p.powf(-alpha) + g) * dollars.powf(-beta)
    }

    /// Derivative of `ln scaled_excess` with respect to fine-tuning dollars.
    fn log_slope(&self, dollars: f64) -> f64 {
        let p = self.steps_for_dollars(dollars) * self.p_units_per_step + 1.0;
        let LawParams {
            pretrain_coef: a,
            transfer_gap: g,
            pretrain_exp: alpha,
            finetune_exp: beta,
            ..
        } = self.params;
        let pre = a * p.powf(-alpha);
        alpha * pre / (pre + g) * self.p_units_per_step / (self.cost_per_pretrain_step * p) - beta / dollars
    }
}

fn law(params: &LawParams, p: f64, f: f64) -> f64 {
    (params.pretrain_coef * p.powf(-params.pretrain_exp) + params.transfer_gap) * f.powf(-params.finetune_exp)
        + params.irreducible
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub steps_star: f64,
    pub p_star: f64,
    pub f_star: f64,
    pub loss_at_optimum: f64,
    /// Share of the budget spent on fine-tuning data.
    pub finetune_budget_fraction: f64,
    pub pretrain_dollars: f64,
}

/// Scan resolution over fine-tuning dollars, in points per factor of e.
const SCAN_DENSITY: f64 = 128.0;

fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut v: Vec<f64> = (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect();
    v[0] = lo;
    v[n - 1] = hi;
    v
}

/// Fine-tuning dollar levels `B * exp(-k / SCAN_DENSITY)` down to `lo`, in
/// ascending order. Problems that share `B` share every level above their
/// own lower bound, so their scans agree wherever their ranges overlap.
fn dollar_scan(lo: f64, budget: f64) -> Vec<f64> {
    let mut v = vec![budget];
    let mut k = 1.0;
    loop {
        let x = budget * (-k / SCAN_DENSITY).exp();
        if x <= lo {
            break;
        }
        v.push(x);
        k += 1.0;
    }
    if lo < budget {
        v.push(lo);
    }
    v.reverse();
    v
}

/// Bisects on the sign of the slope until the bracket cannot shrink.
fn bisect_slope(problem: &AllocationProblem, mut a: f64, mut b: f64) -> f64 {
    loop {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            return a;
        }
        if problem.log_slope(m) < 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
}

/// Best fine-tuning dollar amount near a scan minimum at `mid`.
fn refine(problem: &AllocationProblem, lo: f64, mid: f64, hi: f64) -> f64 {
    let mut candidates = vec![mid];
    // a sign change of the slope brackets an interior stationary point
    for (a, b) in [(lo, mid), (mid, hi)] {
        if a < b && problem.log_slope(a) < 0.0 && problem.log_slope(b) > 0.0 {
            candidates.push(bisect_slope(problem, a, b));
        }
    }
    candidates
        .into_iter()
        .min_by(|x, y| {
            problem
                .scaled_excess(*x)
                .total_cmp(&problem.scaled_excess(*y))
                .then(x.total_cmp(y))
        })
        .unwrap_or(mid)
}

pub fn optimize_allocation(problem: &AllocationProblem) -> Result<AllocationResult> {
    problem.validate()?;
    let grid = dollar_scan(problem.cost_per_finetune_point, problem.budget);
    let values: Vec<f64> = grid.iter().map(|&x| problem.scaled_excess(x)).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss along the budget line".into()));
    }
    let mut k = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[k] {
            k = i;
        }
    }
    let c = problem.cost_per_finetune_point.powf(problem.params.finetune_exp);
    let spread = c * (values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - values[k]);
    if spread < 1e-12 * (c * values[k] + problem.params.irreducible).max(1.0) {
        log::warn!("loss varies by less than 1e-12 over the feasible budget line; the allocation is arbitrary");
    }
    let dollars = if grid.len() == 1 {
        grid[0]
    } else {
        refine(
            problem,
            grid[k.saturating_sub(1)],
            grid[k],
            grid[(k + 1).min(grid.len() - 1)],
        )
    };
    let f_star = dollars / problem.cost_per_finetune_point;
    let steps_star = problem.steps_for_dollars(dollars);
    Ok(AllocationResult {
        steps_star,
        p_star: steps_star * problem.p_units_per_step + 1.0,
        f_star,
        loss_at_optimum: problem.loss_at(f_star),
        finetune_budget_fraction: dollars / problem.budget,
        pretrain_dollars: problem.budget - dollars,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Value of the swept quantity.
    pub value: f64,
    pub allocation: AllocationResult,
}

fn check_sweep(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty()
        || values.iter().any(|v| !(*v > 0.0) || !v.is_finite())
        || values.windows(2).any(|w| w[0] > w[1])
    {
        return Err(Error::InvalidArgument(format!(
            "{name} must be non-empty, positive and sorted"
        )));
    }
    Ok(())
}

fn sweep(values: &[f64], make: impl Fn(f64) -> AllocationProblem + Sync) -> Result<Vec<SweepPoint>> {
    values
        .par_iter()
        .map(|&v| optimize_allocation(&make(v)).map(|allocation| SweepPoint { value: v, allocation }))
        .collect()
}

/// Re-solves the allocation with `G` replaced by each value.
pub fn sweep_gap(problem: &AllocationProblem, gaps: &[f64]) -> Result<Vec<SweepPoint>> {
    check_sweep("gap values", gaps)?;
    sweep(gaps, |g| AllocationProblem {
        params: LawParams {
            transfer_gap: g,
            ..problem.params
        },
        ..*problem
    })
}

/// Re-solves the allocation with `C_f = ratio * C_p` for each ratio.
pub fn sweep_cost_ratio(problem: &AllocationProblem, ratios: &[f64]) -> Result<Vec<SweepPoint>> {
    check_sweep("cost ratios", ratios)?;
    sweep(ratios, |r| AllocationProblem {
        cost_per_finetune_point: r * problem.cost_per_pretrain_step,
        ..*problem
    })
}

/// `n` log-spaced values between `lo` and `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "bad log grid [{lo}, {hi}] with {n} points"
        )));
    }
    Ok(log_space(lo, hi, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoLossCurve {
    pub target_loss: f64,
    /// `(p, f)` pairs ordered by increasing `p`.
    pub points: Vec<(f64, f64)>,
}

/// Solves for `f` at log-spaced `p` so that `L(p, f) = target_loss`.
pub fn iso_loss(params: &LawParams, target_loss: f64, p_range: (f64, f64), n_points: usize) -> Result<IsoLossCurve> {
    params.validate()?;
    if !target_loss.is_finite() || target_loss <= params.irreducible {
        return Err(Error::Unachievable(format!(
            "target {target_loss} is not above the irreducible loss {}",
            params.irreducible
        )));
    }
    if !(p_range.0 >= 1.0) {
        return Err(Error::InvalidArgument("p range must start at 1 or above".into()));
    }
    let gap = target_loss - params.irreducible;
    let points: Vec<(f64, f64)> = log_grid(p_range.0, p_range.1, n_points)?
        .into_iter()
        .filter_map(|p| {
            let head = params.pretrain_coef * p.powf(-params.pretrain_exp) + params.transfer_gap;
            let f = (head / gap).powf(1.0 / params.finetune_exp);
            (f.is_finite() && f >= 1.0).then_some((p, f))
        })
        .collect();
    if points.is_empty() {
        return Err(Error::Unachievable(format!(
            "target {target_loss} is not reached anywhere in p range {p_range:?}"
        )));
    }
    Ok(IsoLossCurve { target_loss, points })
}

/// Training compute as `6 * sum(epochs * n_params * finetune_tokens)`.
pub fn estimate_compute(records: &[RunRecord], n_params: f64) -> Result<f64> {
    if !(n_params > 0.0) || !n_params.is_finite() {
        return Err(Error::InvalidArgument(format!("n_params must be > 0, got {n_params}")));
    }
    records.iter().enumerate().try_fold(0.0, |acc, (i, r)| {
        let epochs = r.epochs.ok_or(Error::MissingEpochs(i))?;
        Ok(acc + 6.0 * f64::from(epochs) * n_params * r.finetune_tokens)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{evaluate, EvalPoint, LawForm, PRESETS};
    use proptest::prelude::*;

    fn fictional() -> LawParams {
        PRESETS[0].params
    }

    fn budget_error(p: &AllocationProblem, r: &AllocationResult) -> f64 {
        let spent = p.cost_per_pretrain_step * r.steps_star + p.cost_per_finetune_point * r.f_star;
        (spent - p.budget).abs() / p.budget
    }

    #[test]
    fn matches_exhaustive_integer_scan() {
        let problem = AllocationProblem::new(1e6, 1.0, 1.0, fictional());
        let r = optimize_allocation(&problem).unwrap();
        let best = (1..=1_000_000u32)
            .map(f64::from)
            .min_by(|a, b| problem.loss_at(*a).total_cmp(&problem.loss_at(*b)))
            .unwrap();
        assert!((r.f_star - best).abs() <= 1.0, "f* {} vs scan {best}", r.f_star);
        assert!(r.loss_at_optimum <= problem.loss_at(best) + 1e-15);
        assert!(budget_error(&problem, &r) <= 1e-9);
    }

    #[test]
    fn pure_finetuning_law_spends_everything_on_data() {
        let params = LawParams::new(1e-12, 50.0, 0.5, 0.3, 1.0);
        let problem = AllocationProblem::new(1e5, 1.0, 1.0, params);
        let r = optimize_allocation(&problem).unwrap();
        assert!(
            r.finetune_budget_fraction > 1.0 - 1e-9,
            "fraction {}",
            r.finetune_budget_fraction
        );
    }

    #[test]
    fn pure_pretraining_law_buys_minimal_data() {
        let params = LawParams::new(100.0, 1e-12, 0.5, 1e-9, 1.0);
        let problem = AllocationProblem::new(1e5, 1.0, 1.0, params);
        let r = optimize_allocation(&problem).unwrap();
        assert!((r.f_star - 1.0).abs() < 1e-6, "f* {}", r.f_star);
    }

    #[test]
    fn infeasible_budget() {
        let problem = AllocationProblem::new(0.5, 1.0, 1.0, fictional());
        assert!(matches!(optimize_allocation(&problem), Err(Error::Infeasible(_))));
        let single = AllocationProblem::new(1.0, 1.0, 1.0, fictional());
        let r = optimize_allocation(&single).unwrap();
        assert_eq!((r.f_star, r.steps_star), (1.0, 0.0));
    }

    #[test]
    fn scale_invariance() {
        let base = AllocationProblem::new(3e5, 2.0, 0.7, fictional());
        let a = optimize_allocation(&base).unwrap();
        let scaled = AllocationProblem {
            budget: 3e8,
            cost_per_pretrain_step: 2e3,
            cost_per_finetune_point: 700.0,
            ..base
        };
        let b = optimize_allocation(&scaled).unwrap();
        assert!((a.f_star - b.f_star).abs() <= 1e-8 * a.f_star);
        assert!((a.p_star - b.p_star).abs() <= 1e-8 * a.p_star);
    }

    #[test]
    fn gap_sweep_is_monotone_and_consistent() {
        let problem = AllocationProblem::new(1e6, 1.0, 1.0, fictional());
        let gaps = log_grid(0.1, 10.0, 40).unwrap();
        let curve = sweep_gap(&problem, &gaps).unwrap();
        for w in curve.windows(2) {
            assert!(w[1].allocation.finetune_budget_fraction >= w[0].allocation.finetune_budget_fraction);
        }
        let single = sweep_gap(&problem, &[fictional().transfer_gap]).unwrap();
        assert_eq!(single[0].allocation, optimize_allocation(&problem).unwrap());
        let twice = sweep_gap(&problem, &[2.0, 2.0]).unwrap();
        assert_eq!(twice[0].allocation, twice[1].allocation);
    }

    #[test]
    fn ratio_sweep_is_monotone_and_consistent() {
        let problem = AllocationProblem::new(1e6, 1.0, 1.0, fictional());
        let curve = sweep_cost_ratio(&problem, &log_grid(0.1, 10.0, 40).unwrap()).unwrap();
        for w in curve.windows(2) {
            assert!(w[1].allocation.pretrain_dollars >= w[0].allocation.pretrain_dollars);
        }
        let unit = sweep_cost_ratio(&problem, &[1.0]).unwrap();
        assert_eq!(unit[0].allocation, optimize_allocation(&problem).unwrap());
        let extreme = sweep_cost_ratio(&problem, &[1e6]).unwrap();
        assert_eq!(extreme[0].allocation.f_star, 1.0);
    }

    #[test]
    fn sweep_rejects_bad_values() {
        let problem = AllocationProblem::new(1e6, 1.0, 1.0, fictional());
        assert!(sweep_gap(&problem, &[]).is_err());
        assert!(sweep_gap(&problem, &[2.0, 1.0]).is_err());
        assert!(sweep_cost_ratio(&problem, &[-1.0]).is_err());
    }

    #[test]
    fn iso_loss_corner_and_residuals() {
        let params = fictional();
        let top = params.pretrain_coef + params.transfer_gap + params.irreducible;
        let corner = iso_loss(&params, top, (1.0, 1.0), 1).unwrap();
        assert_eq!(corner.points.len(), 1);
        assert!((corner.points[0].1 - 1.0).abs() < 1e-12);

        let curve = iso_loss(&params, 2.0, (1.0, 143_001.0), 200).unwrap();
        assert!(!curve.points.is_empty());
        assert!(curve.points.windows(2).all(|w| w[0].0 < w[1].0));
        for &(p, f) in &curve.points {
            let l = evaluate(&LawForm::standard(), &params, EvalPoint::new(p, f).unwrap()).unwrap();
            assert!((l - 2.0).abs() <= 1e-6 * 2.0);
        }
    }

    #[test]
    fn iso_loss_below_floor() {
        let params = fictional();
        assert!(matches!(
            iso_loss(&params, params.irreducible, (1.0, 10.0), 5),
            Err(Error::Unachievable(_))
        ));
        assert!(matches!(
            iso_loss(&params, 1e6, (1.0, 10.0), 5),
            Err(Error::Unachievable(_))
        ));
    }

    fn record(epochs: Option<u32>, tokens: f64) -> RunRecord {
        RunRecord {
            dataset: "d".into(),
            pretrain_tokens: 0.0,
            finetune_tokens: tokens,
            val_loss: 1.0,
            epochs,
            trial: None,
        }
    }

    #[test]
    fn compute_estimate() {
        assert_eq!(estimate_compute(&[record(Some(1), 1.0)], 1.0).unwrap(), 6.0);
        assert!(matches!(
            estimate_compute(&[record(Some(1), 1.0), record(None, 2.0)], 1.0),
            Err(Error::MissingEpochs(1))
        ));
        assert!(estimate_compute(&[record(Some(1), 1.0)], 0.0).is_err());

        let ledger: Vec<RunRecord> = (0..750)
            .map(|i| record(Some(1 + i % 7), 10.0 * (1 + i % 10) as f64))
            .collect();
        let mut by_hand = 0.0;
        for r in &ledger {
            by_hand += r.finetune_tokens * r.epochs.unwrap() as f64;
        }
        let expected = 6.0 * 2.8e9 * by_hand;
        let got = estimate_compute(&ledger, 2.8e9).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn optimum_beats_scan_and_spends_budget(
            a in 1.0f64..500.0, g in 0.05f64..10.0, alpha in 0.05f64..1.0, beta in 0.05f64..0.8, e in 0.0f64..3.0,
            budget in 1e3f64..1e8, cp in 0.1f64..10.0, cf in 0.1f64..10.0,
        ) {
            let problem = AllocationProblem::new(budget, cp, cf, LawParams::new(a, g, alpha, beta, e));
            let r = optimize_allocation(&problem).unwrap();
            prop_assert!(budget_error(&problem, &r) <= 1e-9);
            let f_max = problem.max_finetune();
            let scan_best = (0..=2000)
                .map(|i| 1.0 + (f_max - 1.0) * i as f64 / 2000.0)
                .map(|f| problem.loss_at(f))
                .fold(f64::INFINITY, f64::min);
            prop_assert!(r.loss_at_optimum <= scan_best * (1.0 + 1e-12));
        }
    }
}
