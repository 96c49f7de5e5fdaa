//! Bootstrap standard errors and percentile intervals, plus the
//! cross-dataset coefficient of variation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::{fit, fit_from_starts, FitConfig, FitResult};
use crate::ingest::Observation;
use crate::model::{LawForm, LawParams};
use crate::synth::cell_rng;

pub const DEFAULT_RESAMPLES: usize = 4000;
const MAX_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub seed: u64,
    /// Confidence level of the percentile interval.
    pub level: f64,
    /// Grid starts (nearest to the full-data optimum) added to each refit.
    pub nearest_grid_starts: usize,
    pub fit: FitConfig,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_resamples: DEFAULT_RESAMPLES,
            seed: 0,
            level: 0.95,
            nearest_grid_starts: 4,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub point_estimate: f64,
    pub standard_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub form: LawForm,
    pub n_resamples: usize,
    pub n_failed: usize,
    pub seed: u64,
    pub level: f64,
    pub parameters: Vec<ParamSummary>,
}

impl BootstrapReport {
    pub fn parameter(&self, name: &str) -> Option<&ParamSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Named natural-scale values of a fit, in column order A, G, alpha, beta,
/// E, then any shifts.
pub fn named_values(fit: &FitResult) -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64)> = LawParams::NAMES.iter().copied().zip(fit.params.to_array()).collect();
    if !fit.form.has_irreducible() {
        out.pop();
    }
    if fit.form.id.has_pretrain_shift() {
        out.push(("p_shift", fit.form.shifts.pretrain));
    }
    if fit.form.id.has_finetune_shift() {
        out.push(("f_shift", fit.form.shifts.finetune));
    }
    out
}

/// Linear interpolation between order statistics of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Sample standard deviation (n - 1 denominator).
fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// The full-data optimum followed by the `k` grid starts closest to it.
fn refit_starts(full: &FitResult, config: &BootstrapConfig) -> Vec<Vec<f64>> {
    let grid = config.fit.start_grid.starts(&LawForm::new(full.form.id));
    let dist = |s: &Vec<f64>| s.iter().zip(&full.theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&i, &j| dist(&grid[i]).total_cmp(&dist(&grid[j])).then(i.cmp(&j)));
    let mut starts = vec![full.theta.clone()];
    starts.extend(
        order
            .into_iter()
            .take(config.nearest_grid_starts)
            .map(|i| grid[i].clone()),
    );
    starts
}

fn resample(points: &[Observation], seed: u64, index: u64) -> Vec<Observation> {
    let mut rng = cell_rng(seed, index);
    (0..points.len())
        .map(|_| points[rng.random_range(0..points.len())])
        .collect()
}

/// Bootstraps `form` on `points`: refits `n_resamples` resamples drawn with
/// replacement. Resample `i` uses random stream `i` of `seed`.
pub fn bootstrap(points: &[Observation], form: &LawForm, config: &BootstrapConfig) -> Result<BootstrapReport> {
    if points.is_empty() {
        return Err(Error::Precondition("bootstrap needs at least one record".into()));
    }
    if config.n_resamples < 2 {
        return Err(Error::InvalidArgument("n_resamples must be >= 2".into()));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(Error::InvalidArgument("level must be in (0, 1)".into()));
    }
    let full = fit(points, form, &config.fit)?;
    bootstrap_around(points, &full, config)
}

/// Bootstrap with an already computed full-data fit.
pub fn bootstrap_around(points: &[Observation], full: &FitResult, config: &BootstrapConfig) -> Result<BootstrapReport> {
    let starts = refit_starts(full, config);
    let base_form = LawForm::new(full.form.id);
    let refits: Vec<Option<Vec<f64>>> = (0..config.n_resamples as u64)
        .into_par_iter()
        .map(|i| {
            let sample = resample(points, config.seed, i);
            match fit_from_starts(&sample, &base_form, &config.fit, &starts) {
                Ok(r) => Some(named_values(&r).into_iter().map(|(_, v)| v).collect()),
                Err(e) => {
                    log::debug!("resample {i} failed: {e}");
                    None
                }
            }
        })
        .collect();

    let n_failed = refits.iter().filter(|r| r.is_none()).count();
    if n_failed as f64 > MAX_FAILURE_RATE * config.n_resamples as f64 {
        return Err(Error::BootstrapFailures {
            failed: n_failed,
            total: config.n_resamples,
        });
    }
    if n_failed > 0 {
        log::warn!(
            "{n_failed} of {} bootstrap refits failed and were excluded",
            config.n_resamples
        );
    }
    let ok: Vec<&Vec<f64>> = refits.iter().flatten().collect();
    if ok.len() < 2 {
        return Err(Error::BootstrapFailures {
            failed: n_failed,
            total: config.n_resamples,
        });
    }

    let tail = 0.5 * (1.0 - config.level);
    let parameters = named_values(full)
        .into_iter()
        .enumerate()
        .map(|(j, (name, point_estimate))| {
            let mut column: Vec<f64> = ok.iter().map(|r| r[j]).collect();
            column.sort_by(f64::total_cmp);
            ParamSummary {
                name: name.to_string(),
                point_estimate,
                standard_error: sample_sd(&column),
                ci_low: percentile(&column, tail),
                ci_high: percentile(&column, 1.0 - tail),
            }
        })
        .collect();
    Ok(BootstrapReport {
        form: full.form,
        n_resamples: config.n_resamples,
        n_failed,
        seed: config.seed,
        level: config.level,
        parameters,
    })
}

/// Denominator convention for the standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dispersion {
    /// n - 1
    #[default]
    Sample,
    /// n
    Population,
}

/// Coefficient of variation (SD / mean) of each parameter across datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterCv {
    #[serde(rename = "A")]
    pub pretrain_coef: f64,
    #[serde(rename = "G")]
    pub transfer_gap: f64,
    #[serde(rename = "alpha")]
    pub pretrain_exp: f64,
    #[serde(rename = "beta")]
    pub finetune_exp: f64,
    #[serde(rename = "E")]
    pub irreducible: f64,
}

impl ParameterCv {
    pub fn to_array(&self) -> [f64; 5] {
        [
            self.pretrain_coef,
            self.transfer_gap,
            self.pretrain_exp,
            self.finetune_exp,
            self.irreducible,
        ]
    }
}

pub fn coefficient_of_variation(sets: &[LawParams], dispersion: Dispersion) -> Result<ParameterCv> {
    if sets.len() < 2 {
        return Err(Error::Precondition(
            "coefficient of variation needs >= 2 parameter sets".into(),
        ));
    }
    let n = sets.len() as f64;
    let denom = match dispersion {
        Dispersion::Sample => n - 1.0,
        Dispersion::Population => n,
    };
    let mut cv = [0.0; 5];
    for (j, name) in LawParams::NAMES.iter().enumerate() {
        let column: Vec<f64> = sets.iter().map(|p| p.to_array()[j]).collect();
        let mean = column.iter().sum::<f64>() / n;
        if mean == 0.0 {
            return Err(Error::ZeroMean(name.to_string()));
        }
        let sd = (column.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / denom).sqrt();
        cv[j] = sd / mean;
    }
    Ok(ParameterCv {
        pretrain_coef: cv[0],
        transfer_gap: cv[1],
        pretrain_exp: cv[2],
        finetune_exp: cv[3],
        irreducible: cv[4],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitter::StartGrid;
    use crate::ingest::to_eval_points;
    use crate::model::PRESETS;
    use crate::synth::{generate, SynthSpec};

    fn quick_config(n: usize, seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            n_resamples: n,
            seed,
            fit: FitConfig {
                start_grid: StartGrid::coarse(),
                ..FitConfig::default()
            },
            ..BootstrapConfig::default()
        }
    }

    fn points(sigma: f64, seed: u64) -> Vec<Observation> {
        let spec = SynthSpec::new("fe", PRESETS[0].params).with_noise(sigma, seed);
        to_eval_points(&generate(&spec).unwrap(), spec.tokens_per_step)
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 0.1), 1.4);
        assert_eq!(percentile(&v, 1.0), 5.0);
    }

    #[test]
    fn cv_of_identical_sets_is_zero() {
        let sets = [PRESETS[0].params; 3];
        for d in [Dispersion::Sample, Dispersion::Population] {
            assert!(coefficient_of_variation(&sets, d)
                .unwrap()
                .to_array()
                .iter()
                .all(|&c| c == 0.0));
        }
    }

    #[test]
    fn cv_two_point_set() {
        let x = LawParams::new(2.0, 0.5, 0.3, 0.1, 1.0);
        let three_x = LawParams::from_array(x.to_array().map(|v| 3.0 * v));
        let pop = coefficient_of_variation(&[x, three_x], Dispersion::Population).unwrap();
        for c in pop.to_array() {
            assert!((c - 0.5).abs() < 1e-15);
        }
        let sample = coefficient_of_variation(&[x, three_x], Dispersion::Sample).unwrap();
        for c in sample.to_array() {
            assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        }
    }

    #[test]
    fn cv_errors() {
        assert!(coefficient_of_variation(&[PRESETS[0].params], Dispersion::Sample).is_err());
        let zero_gap = LawParams {
            transfer_gap: 0.0,
            ..PRESETS[0].params
        };
        assert!(matches!(
            coefficient_of_variation(&[zero_gap, zero_gap], Dispersion::Sample),
            Err(Error::ZeroMean(name)) if name == "G"
        ));
    }

    #[test]
    fn table_rows_cv() {
        let sets: Vec<_> = PRESETS.iter().map(|p| p.params).collect();
        let cv = coefficient_of_variation(&sets, Dispersion::Sample).unwrap();
        assert!((cv.pretrain_exp - 0.094).abs() < 0.002);
        assert!(cv.pretrain_exp / cv.finetune_exp < 0.25);
    }

    #[test]
    fn two_resamples_are_reproducible() {
        let pts = points(0.02, 5);
        let a = bootstrap(&pts, &LawForm::standard(), &quick_config(2, 9)).unwrap();
        let b = bootstrap(&pts, &LawForm::standard(), &quick_config(2, 9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_resamples, 2);
        assert_eq!(a.parameters.len(), 5);
        for p in &a.parameters {
            assert!(p.ci_low <= p.ci_high && p.standard_error >= 0.0);
        }
    }

    #[test]
    fn noiseless_has_no_spread() {
        let pts = points(0.0, 0);
        let rep = bootstrap(&pts, &LawForm::standard(), &quick_config(20, 1)).unwrap();
        for p in &rep.parameters {
            assert!(p.standard_error <= 1e-6 * p.point_estimate.abs().max(1.0), "{p:?}");
            assert!(p.ci_high - p.ci_low <= 1e-6 * p.point_estimate.abs().max(1.0), "{p:?}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let pts = points(0.0, 0);
        assert!(bootstrap(&pts, &LawForm::standard(), &quick_config(1, 0)).is_err());
        assert!(bootstrap(&[], &LawForm::standard(), &quick_config(10, 0)).is_err());
    }

    #[test]
    fn refit_starts_lead_with_optimum() {
        let pts = points(0.0, 0);
        let config = quick_config(2, 0);
        let full = fit(&pts, &LawForm::standard(), &config.fit).unwrap();
        let starts = refit_starts(&full, &config);
        assert_eq!(starts.len(), 5);
        assert_eq!(starts[0], full.theta);
    }
}
