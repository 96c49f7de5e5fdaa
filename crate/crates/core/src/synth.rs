//! Synthetic experiments from known parameters.
//!
//! Each grid cell gets `loss = exp(log L(p, f) + eps)` with
//! `eps ~ Normal(0, sigma^2)`. Every cell draws from its own ChaCha stream
//! (selected by cell index), so the output does not depend on generation
//! order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{pretrain_magnitude, ExperimentGrid, RunRecord};
use crate::model::{evaluate, EvalPoint, LawForm, LawParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dataset: String,
    pub params: LawParams,
    pub form: LawForm,
    pub grid: ExperimentGrid,
    /// Standard deviation of the additive noise on log-loss.
    pub noise_sigma: f64,
    pub seed: u64,
    pub tokens_per_step: f64,
    /// Constant epochs value written to every record, if any.
    pub epochs: Option<u32>,
}

impl SynthSpec {
    pub fn new(dataset: impl Into<String>, params: LawParams) -> Self {
        SynthSpec {
            dataset: dataset.into(),
            params,
            form: LawForm::standard(),
            grid: ExperimentGrid::reference(),
            noise_sigma: 0.0,
            seed: 0,
            tokens_per_step: crate::ingest::DEFAULT_TOKENS_PER_STEP,
            epochs: None,
        }
    }

    pub fn with_noise(mut self, sigma: f64, seed: u64) -> Self {
        self.noise_sigma = sigma;
        self.seed = seed;
        self
    }
}

/// Random stream for one cell of one seed.
pub(crate) fn cell_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<RunRecord>> {
    if !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma must be >= 0, got {}",
            spec.noise_sigma
        )));
    }
    if !(spec.tokens_per_step > 0.0) {
        return Err(Error::InvalidArgument("tokens_per_step must be > 0".into()));
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    spec.grid
        .cells()
        .enumerate()
        .map(|(i, (pretrain_tokens, finetune_tokens))| {
            let point = EvalPoint::new(
                pretrain_magnitude(pretrain_tokens, spec.tokens_per_step),
                finetune_tokens,
            )?;
            let clean = evaluate(&spec.form, &spec.params, point)?;
            let val_loss = if spec.noise_sigma > 0.0 {
                let eps = noise.sample(&mut cell_rng(spec.seed, i as u64));
                (clean.ln() + eps).exp()
            } else {
                clean
            };
            if !(val_loss > 0.0) {
                return Err(Error::Domain(format!("generated loss {val_loss} is not positive")));
            }
            Ok(RunRecord {
                dataset: spec.dataset.clone(),
                pretrain_tokens,
                finetune_tokens,
                val_loss,
                epochs: spec.epochs,
                trial: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{to_eval_points, write_csv};
    use crate::model::{FormId, PRESETS};

    fn fictional() -> SynthSpec {
        SynthSpec::new("fictional-encyclopedia", PRESETS[0].params)
    }

    #[test]
    fn noiseless_equals_law() {
        let spec = fictional();
        let records = generate(&spec).unwrap();
        assert_eq!(records.len(), 150);
        for o in to_eval_points(&records, spec.tokens_per_step) {
            assert_eq!(o.loss, evaluate(&spec.form, &spec.params, o.point).unwrap());
        }
    }

    #[test]
    fn minimum_at_largest_corner() {
        let records = generate(&fictional()).unwrap();
        let min = records.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).unwrap();
        assert_eq!((min.pretrain_tokens, min.finetune_tokens), (2.99e11, 1100.0));
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = fictional().with_noise(0.02, 11);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_csv(&generate(&spec).unwrap(), &mut a).unwrap();
        write_csv(&generate(&spec).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let other = generate(&fictional().with_noise(0.02, 12)).unwrap();
        assert_ne!(generate(&spec).unwrap(), other);
    }

    #[test]
    fn noise_sd_matches_sigma() {
        let sigma = 0.02;
        let big = ExperimentGrid {
            pretrain_levels: (0..100).map(|i| 5e8 * (1.0 + i as f64)).collect(),
            finetune_levels: (0..100).map(|i| 10.0 + 10.0 * i as f64).collect(),
        };
        let spec = SynthSpec {
            grid: big,
            ..fictional().with_noise(sigma, 3)
        };
        let records = generate(&spec).unwrap();
        assert_eq!(records.len(), 10_000);
        let resid: Vec<f64> = to_eval_points(&records, spec.tokens_per_step)
            .iter()
            .map(|o| o.loss.ln() - evaluate(&spec.form, &spec.params, o.point).unwrap().ln())
            .collect();
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - sigma).abs() <= 0.05 * sigma, "sd = {sd}");
    }

    #[test]
    fn epochs_and_form_carried() {
        let spec = SynthSpec {
            epochs: Some(4),
            form: LawForm::new(FormId::NoIrreducible),
            ..fictional()
        };
        let records = generate(&spec).unwrap();
        assert!(records.iter().all(|r| r.epochs == Some(4)));
        assert!(records.iter().all(|r| r.val_loss > 0.0));
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(generate(&fictional().with_noise(-1.0, 0)).is_err());
    }
}
