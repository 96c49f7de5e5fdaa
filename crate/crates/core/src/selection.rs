//! Step-wise cross-validation for comparing law forms.
//!
//! Each threshold pair `(p_thr, f_thr)` splits the records into a lower-left
//! training block (both axes at or below the thresholds) and a test set made
//! of everything else. A form is fitted on the block and scored on how well
//! it extrapolates to the test set. Every threshold pair is crossed with every
//! pair of regularization weights.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::{fit, fit_from_starts, FitConfig, FitResult, StartGrid};
use crate::ingest::{to_eval_points, Observation, RunRecord, DEFAULT_TOKENS_PER_STEP};
use crate::model::{FormId, LawForm};
use crate::synth::cell_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    /// Pre-training cut values in tokens. Empty means the observed levels.
    pub p_thresholds: Vec<f64>,
    /// Fine-tuning cut values in tokens. Empty means the observed levels.
    pub f_thresholds: Vec<f64>,
    /// Only every `skip_number`-th threshold pair is evaluated.
    pub skip_number: usize,
    pub lambda_exp_grid: Vec<f64>,
    pub lambda_coef_grid: Vec<f64>,
    /// Lower bound on the training block; the form's parameter count is
    /// always enforced as well.
    pub min_train_size: usize,
    pub min_test_size: usize,
    /// Random restarts around the best multi-start result.
    pub restarts: usize,
    /// Standard deviation of restart perturbations, in transformed space.
    pub perturbation_scale: f64,
    pub seed: u64,
    /// Settings for each training-block fit. The penalty weights are
    /// overwritten by the lambda grids.
    pub fit: FitConfig,
    pub tokens_per_step: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            p_thresholds: Vec::new(),
            f_thresholds: Vec::new(),
            skip_number: 1,
            lambda_exp_grid: vec![0.0, 0.01, 0.1, 1.0, 5.0, 10.0, 50.0],
            lambda_coef_grid: vec![0.0, 1e-4, 1e-3, 0.01, 0.1],
            min_train_size: 0,
            min_test_size: 1,
            restarts: 8,
            perturbation_scale: 0.5,
            seed: 0,
            fit: FitConfig {
                start_grid: StartGrid::coarse(),
                ..FitConfig::default()
            },
            tokens_per_step: DEFAULT_TOKENS_PER_STEP,
        }
    }
}

fn strictly_increasing(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) || v.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "{name} must be finite and strictly increasing"
        )));
    }
    Ok(())
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        strictly_increasing("p_thresholds", &self.p_thresholds)?;
        strictly_increasing("f_thresholds", &self.f_thresholds)?;
        if self.skip_number == 0 {
            return Err(Error::InvalidArgument("skip_number must be >= 1".into()));
        }
        for (name, grid) in [
            ("lambda_exp_grid", &self.lambda_exp_grid),
            ("lambda_coef_grid", &self.lambda_coef_grid),
        ] {
            if grid.is_empty() || grid.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-empty with finite values >= 0"
                )));
            }
        }
        if !(self.perturbation_scale >= 0.0) || !self.perturbation_scale.is_finite() {
            return Err(Error::InvalidArgument("perturbation_scale must be >= 0".into()));
        }
        if !(self.tokens_per_step > 0.0) {
            return Err(Error::InvalidArgument("tokens_per_step must be > 0".into()));
        }
        self.fit.validate()
    }
}

/// One evaluated (threshold pair, lambda pair) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub p_index: usize,
    pub f_index: usize,
    pub p_threshold: f64,
    pub f_threshold: f64,
    pub lambda_exp: f64,
    pub lambda_coef: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub rmse: f64,
    pub mae: f64,
}

/// A combination that could not be scored. Lambdas are absent when the
/// split itself was rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSplit {
    pub p_index: usize,
    pub f_index: usize,
    pub p_threshold: f64,
    pub f_threshold: f64,
    pub lambda_exp: Option<f64>,
    pub lambda_coef: Option<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub form_id: FormId,
    pub splits: Vec<SplitScore>,
    pub skipped: Vec<SkippedSplit>,
    pub lowest_rmse: f64,
    pub lowest_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormRanking {
    pub form_id: FormId,
    pub lowest_rmse: f64,
    pub lowest_mae: f64,
}

/// Splits records into the lower-left training block and its complement.
/// Both sides keep the input order.
pub fn split(
    records: &[RunRecord],
    p_threshold: f64,
    f_threshold: f64,
    min_train: usize,
    min_test: usize,
) -> Result<(Vec<RunRecord>, Vec<RunRecord>)> {
    let (train, test): (Vec<RunRecord>, Vec<RunRecord>) = records
        .iter()
        .cloned()
        .partition(|r| r.pretrain_tokens <= p_threshold && r.finetune_tokens <= f_threshold);
    if train.is_empty() || train.len() < min_train {
        return Err(Error::Split(format!(
            "training block has {} records, need {}",
            train.len(),
            min_train.max(1)
        )));
    }
    if test.is_empty() || test.len() < min_test {
        return Err(Error::Split(format!(
            "test set has {} records, need {}",
            test.len(),
            min_test.max(1)
        )));
    }
    Ok((train, test))
}

fn levels(records: &[RunRecord], key: fn(&RunRecord) -> f64) -> Vec<f64> {
    let mut v: Vec<f64> = records.iter().map(key).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn canonical_order(records: &[RunRecord]) -> Vec<RunRecord> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| {
        a.dataset
            .cmp(&b.dataset)
            .then(a.pretrain_tokens.total_cmp(&b.pretrain_tokens))
            .then(a.finetune_tokens.total_cmp(&b.finetune_tokens))
            .then(a.trial.cmp(&b.trial))
    });
    sorted
}

/// Grid multi-start followed by seeded restarts, each perturbing the current
/// best point and keeping the result only if it lowers the objective.
pub fn basin_hop<R: Rng>(
    points: &[Observation],
    form: &LawForm,
    config: &FitConfig,
    restarts: usize,
    scale: f64,
    rng: &mut R,
) -> Result<FitResult> {
    let mut best = fit(points, form, config)?;
    for _ in 0..restarts {
        let start: Vec<f64> = best
            .theta
            .iter()
            .map(|v| v + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Ok(candidate) = fit_from_starts(points, &best.form, config, &[start]) {
            if candidate.objective < best.objective {
                best = FitResult {
                    n_evaluations: best.n_evaluations + candidate.n_evaluations,
                    ..candidate
                };
            }
        }
    }
    Ok(best)
}

/// Root-mean-square and mean absolute error of predictions in loss units.
pub fn prediction_errors(fit: &FitResult, test: &[Observation]) -> Result<(f64, f64)> {
    let n = test.len() as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    for o in test {
        let err = fit.predict(o.point.p, o.point.f) - o.loss;
        if !err.is_finite() {
            return Err(Error::NonFinite(format!(
                "prediction at p = {}, f = {}",
                o.point.p, o.point.f
            )));
        }
        sq += err * err;
        abs += err.abs();
    }
    Ok(((sq / n).sqrt(), abs / n))
}

enum Outcome {
    Scored(SplitScore),
    Skipped(SkippedSplit),
}

/// Cross-validates one form over every selected threshold pair and lambda pair.
pub fn run_cv(records: &[RunRecord], form: &LawForm, config: &CvConfig) -> Result<CvReport> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Precondition("cross-validation needs at least one record".into()));
    }
    let records = canonical_order(records);
    let p_thr = if config.p_thresholds.is_empty() {
        levels(&records, |r| r.pretrain_tokens)
    } else {
        config.p_thresholds.clone()
    };
    let f_thr = if config.f_thresholds.is_empty() {
        levels(&records, |r| r.finetune_tokens)
    } else {
        config.f_thresholds.clone()
    };
    let min_train = config.min_train_size.max(form.n_params());

    let pairs: Vec<(usize, usize)> = (0..p_thr.len())
        .flat_map(|i| (0..f_thr.len()).map(move |j| (i, j)))
        .step_by(config.skip_number)
        .collect();
    let lambdas: Vec<(f64, f64)> = config
        .lambda_exp_grid
        .iter()
        .flat_map(|&le| config.lambda_coef_grid.iter().map(move |&lc| (le, lc)))
        .collect();

    let mut outcomes: Vec<Outcome> = Vec::new();
    let mut work = Vec::new();
    for &(i, j) in &pairs {
        match split(&records, p_thr[i], f_thr[j], min_train, config.min_test_size) {
            Ok((train, test)) => work.push((i, j, train, test)),
            Err(e) => {
                log::info!("skipping split ({}, {}): {e}", p_thr[i], f_thr[j]);
                outcomes.push(Outcome::Skipped(SkippedSplit {
                    p_index: i,
                    f_index: j,
                    p_threshold: p_thr[i],
                    f_threshold: f_thr[j],
                    lambda_exp: None,
                    lambda_coef: None,
                    reason: e.to_string(),
                }));
            }
        }
    }

    let items: Vec<(usize, usize)> = (0..work.len())
        .flat_map(|w| (0..lambdas.len()).map(move |l| (w, l)))
        .collect();
    let scored: Vec<Outcome> = items
        .par_iter()
        .map(|&(w, l)| {
            let (i, j, train, test) = &work[w];
            let (lambda_exp, lambda_coef) = lambdas[l];
            let fit_config = FitConfig {
                reg_exponents: lambda_exp,
                reg_coefficients: lambda_coef,
                ..config.fit.clone()
            };
            let stream = ((*i * f_thr.len() + *j) * lambdas.len() + l) as u64;
            let mut rng = cell_rng(config.seed, stream);
            let train_pts = to_eval_points(train, config.tokens_per_step);
            let test_pts = to_eval_points(test, config.tokens_per_step);
            let result = basin_hop(
                &train_pts,
                form,
                &fit_config,
                config.restarts,
                config.perturbation_scale,
                &mut rng,
            )
            .and_then(|fit| prediction_errors(&fit, &test_pts));
            match result {
                Ok((rmse, mae)) => Outcome::Scored(SplitScore {
                    p_index: *i,
                    f_index: *j,
                    p_threshold: p_thr[*i],
                    f_threshold: f_thr[*j],
                    lambda_exp,
                    lambda_coef,
                    train_size: train.len(),
                    test_size: test.len(),
                    rmse,
                    mae,
                }),
                Err(e) => {
                    log::warn!(
                        "form {} split ({}, {}) lambdas ({lambda_exp}, {lambda_coef}) failed: {e}",
                        form.id,
                        p_thr[*i],
                        f_thr[*j]
                    );
                    Outcome::Skipped(SkippedSplit {
                        p_index: *i,
                        f_index: *j,
                        p_threshold: p_thr[*i],
                        f_threshold: f_thr[*j],
                        lambda_exp: Some(lambda_exp),
                        lambda_coef: Some(lambda_coef),
                        reason: e.to_string(),
                    })
                }
            }
        })
        .collect();
    outcomes.extend(scored);

    let mut splits = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Scored(s) => splits.push(s),
            Outcome::Skipped(s) => skipped.push(s),
        }
    }
    if splits.is_empty() {
        return Err(Error::AllSkipped(skipped.len()));
    }
    let lambda_rank = |le: Option<f64>, lc: Option<f64>| {
        let pos = |grid: &[f64], v: Option<f64>| v.and_then(|v| grid.iter().position(|g| *g == v));
        (pos(&config.lambda_exp_grid, le), pos(&config.lambda_coef_grid, lc))
    };
    splits.sort_by_key(|s| {
        (
            s.p_index,
            s.f_index,
            lambda_rank(Some(s.lambda_exp), Some(s.lambda_coef)),
        )
    });
    skipped.sort_by_key(|s| (s.p_index, s.f_index, lambda_rank(s.lambda_exp, s.lambda_coef)));
    let lowest_rmse = splits.iter().map(|s| s.rmse).fold(f64::INFINITY, f64::min);
    let lowest_mae = splits.iter().map(|s| s.mae).fold(f64::INFINITY, f64::min);
    Ok(CvReport {
        form_id: form.id,
        splits,
        skipped,
        lowest_rmse,
        lowest_mae,
    })
}

/// Orders reports by lowest RMSE, then lowest MAE, then form id.
pub fn rank(reports: &[CvReport]) -> Vec<FormRanking> {
    let mut out: Vec<FormRanking> = reports
        .iter()
        .map(|r| FormRanking {
            form_id: r.form_id,
            lowest_rmse: r.lowest_rmse,
            lowest_mae: r.lowest_mae,
        })
        .collect();
    out.sort_by(|a, b| {
        a.lowest_rmse
            .total_cmp(&b.lowest_rmse)
            .then(a.lowest_mae.total_cmp(&b.lowest_mae))
            .then(a.form_id.cmp(&b.form_id))
    });
    out
}

/// Cross-validates each form and ranks them.
pub fn compare_forms(
    records: &[RunRecord],
    forms: &[LawForm],
    config: &CvConfig,
) -> Result<(Vec<FormRanking>, Vec<CvReport>)> {
    if forms.is_empty() {
        return Err(Error::InvalidArgument("compare_forms needs at least one form".into()));
    }
    let reports = forms
        .iter()
        .map(|f| run_cv(records, f, config))
        .collect::<Result<Vec<_>>>()?;
    Ok((rank(&reports), reports))
}
