//! The transfer scaling law and its closed-form consequences.
//!
//! The canonical form is
//!
//! ```text
//! L(p, f) = (A * p^-alpha + G) * f^-beta + E
//! ```
//!
//! where `p` is the pre-training magnitude (optimizer steps + 1) and `f` is
//! the fine-tuning data size. Four alternative forms add shifts inside the
//! power-law bases or drop the irreducible term; they exist for model
//! selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the five-term law. Loss quantities are in nats/token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawParams {
    /// Pre-training coefficient `A`.
    #[serde(rename = "A")]
    pub pretrain_coef: f64,
    /// Transfer gap `G`.
    #[serde(rename = "G")]
    pub transfer_gap: f64,
    /// Pre-training exponent `alpha`.
    #[serde(rename = "alpha")]
    pub pretrain_exp: f64,
    /// Fine-tuning exponent `beta`.
    #[serde(rename = "beta")]
    pub finetune_exp: f64,
    /// Irreducible loss `E`.
    #[serde(rename = "E")]
    pub irreducible: f64,
}

impl LawParams {
    pub const fn new(a: f64, g: f64, alpha: f64, beta: f64, e: f64) -> Self {
        LawParams {
            pretrain_coef: a,
            transfer_gap: g,
            pretrain_exp: alpha,
            finetune_exp: beta,
            irreducible: e,
        }
    }

    /// `C = A + G`, the coefficient of the fine-tuning power law without
    /// any pre-training.
    pub fn no_pretrain_coef(&self) -> f64 {
        self.pretrain_coef + self.transfer_gap
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.pretrain_coef,
            self.transfer_gap,
            self.pretrain_exp,
            self.finetune_exp,
            self.irreducible,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite parameter in {self:?}")));
        }
        if self.pretrain_coef <= 0.0 {
            return Err(Error::InvalidArgument("A must be > 0".into()));
        }
        if self.pretrain_exp <= 0.0 || self.finetune_exp <= 0.0 {
            return Err(Error::InvalidArgument("alpha and beta must be > 0".into()));
        }
        if self.transfer_gap < 0.0 || self.irreducible < 0.0 {
            return Err(Error::InvalidArgument("G and E must be >= 0".into()));
        }
        Ok(())
    }

    /// Values in the column order A, G, alpha, beta, E.
    pub fn to_array(&self) -> [f64; 5] {
        [
            self.pretrain_coef,
            self.transfer_gap,
            self.pretrain_exp,
            self.finetune_exp,
            self.irreducible,
        ]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        LawParams::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub const NAMES: [&'static str; 5] = ["A", "G", "alpha", "beta", "E"];
}

/// The five candidate functional forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum FormId {
    /// `(a0 p^-a1 + a2) f^-a3 + a4`
    Standard = 1,
    /// `(a0 p^-a1 + a2) (f + a3)^-a4 + a5`
    FinetuneShift = 2,
    /// `(a0 (p + a1)^-a2 + a3) f^-a4 + a5`
    PretrainShift = 3,
    /// `(a0 (p + a1)^-a2 + a3) (f + a4)^-a5 + a6`
    BothShifts = 4,
    /// `(a0 p^-a1 + a2) f^-a3`
    NoIrreducible = 5,
}

impl FormId {
    pub const ALL: [FormId; 5] = [
        FormId::Standard,
        FormId::FinetuneShift,
        FormId::PretrainShift,
        FormId::BothShifts,
        FormId::NoIrreducible,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn n_params(self) -> usize {
        match self {
            FormId::Standard => 5,
            FormId::FinetuneShift | FormId::PretrainShift => 6,
            FormId::BothShifts => 7,
            FormId::NoIrreducible => 4,
        }
    }

    pub fn has_irreducible(self) -> bool {
        self != FormId::NoIrreducible
    }

    pub fn has_pretrain_shift(self) -> bool {
        matches!(self, FormId::PretrainShift | FormId::BothShifts)
    }

    pub fn has_finetune_shift(self) -> bool {
        matches!(self, FormId::FinetuneShift | FormId::BothShifts)
    }

    pub fn formula(self) -> &'static str {
        match self {
            FormId::Standard => "(a0*p^-a1 + a2)*f^-a3 + a4",
            FormId::FinetuneShift => "(a0*p^-a1 + a2)*(f + a3)^-a4 + a5",
            FormId::PretrainShift => "(a0*(p + a1)^-a2 + a3)*f^-a4 + a5",
            FormId::BothShifts => "(a0*(p + a1)^-a2 + a3)*(f + a4)^-a5 + a6",
            FormId::NoIrreducible => "(a0*p^-a1 + a2)*f^-a3",
        }
    }
}

impl TryFrom<u8> for FormId {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(FormId::Standard),
            2 => Ok(FormId::FinetuneShift),
            3 => Ok(FormId::PretrainShift),
            4 => Ok(FormId::BothShifts),
            5 => Ok(FormId::NoIrreducible),
            other => Err(Error::InvalidArgument(format!("form id must be 1..=5, got {other}"))),
        }
    }
}

impl From<FormId> for u8 {
    fn from(id: FormId) -> u8 {
        id as u8
    }
}

impl std::fmt::Display for FormId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

/// Additive shifts inside the power-law bases. Only meaningful for the
/// forms that carry them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Shifts {
    pub pretrain: f64,
    pub finetune: f64,
}

/// A functional form together with its (possibly fitted) shifts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawForm {
    pub id: FormId,
    #[serde(default)]
    pub shifts: Shifts,
}

impl LawForm {
    pub fn new(id: FormId) -> Self {
        LawForm {
            id,
            shifts: Shifts::default(),
        }
    }

    pub fn standard() -> Self {
        LawForm::new(FormId::Standard)
    }

    pub fn with_shifts(id: FormId, shifts: Shifts) -> Self {
        LawForm { id, shifts }
    }

    pub fn has_irreducible(&self) -> bool {
        self.id.has_irreducible()
    }

    pub fn n_params(&self) -> usize {
        self.id.n_params()
    }

    /// Effective pre-training shift (zero for forms without one).
    pub fn pretrain_shift(&self) -> f64 {
        if self.id.has_pretrain_shift() {
            self.shifts.pretrain
        } else {
            0.0
        }
    }

    pub fn finetune_shift(&self) -> f64 {
        if self.id.has_finetune_shift() {
            self.shifts.finetune
        } else {
            0.0
        }
    }
}

/// A point in the (pre-training, fine-tuning) input space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Pre-training magnitude, steps + 1.
    pub p: f64,
    /// Fine-tuning data size.
    pub f: f64,
}

impl EvalPoint {
    pub fn new(p: f64, f: f64) -> Result<Self> {
        if !(p >= 1.0) || !(f >= 1.0) || !p.is_finite() || !f.is_finite() {
            return Err(Error::Domain(format!(
                "evaluation point needs p >= 1 and f >= 1, got p={p}, f={f}"
            )));
        }
        Ok(EvalPoint { p, f })
    }
}

/// Evaluates the law without input validation. Returns NaN for invalid bases.
#[inline]
pub(crate) fn eval_raw(form: &LawForm, params: &LawParams, p: f64, f: f64) -> f64 {
    let pb = p + form.pretrain_shift();
    let fb = f + form.finetune_shift();
    let pre = params.pretrain_coef * pb.powf(-params.pretrain_exp);
    let ft = fb.powf(-params.finetune_exp);
    let e = if form.has_irreducible() {
        params.irreducible
    } else {
        0.0
    };
    (pre + params.transfer_gap) * ft + e
}

/// Predicted loss of `form` at `point`.
pub fn evaluate(form: &LawForm, params: &LawParams, point: EvalPoint) -> Result<f64> {
    let pb = point.p + form.pretrain_shift();
    let fb = point.f + form.finetune_shift();
    if !(pb > 0.0) || !(fb > 0.0) {
        return Err(Error::Domain(format!(
            "power-law base must be positive (p + shift = {pb}, f + shift = {fb})"
        )));
    }
    let value = eval_raw(form, params, point.p, point.f);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("law evaluated to {value} at {point:?}")));
    }
    Ok(value)
}

/// `G * f^-beta + E`: the loss with unlimited pre-training.
pub fn limit_infinite_pretraining(params: &LawParams, f: f64) -> f64 {
    params.transfer_gap * f.powf(-params.finetune_exp) + params.irreducible
}

/// Fine-tuning data size that, with zero pre-training (`p = 1`), reaches the
/// same loss as `(p, f1)`.
///
/// Solves `(A p^-alpha + G) f1^-beta = (A + G) f2^-beta` for `f2`.
pub fn effective_finetuning_data(params: &LawParams, p: f64, f1: f64) -> Result<f64> {
    let c = params.no_pretrain_coef();
    if params.finetune_exp == 0.0 || c == 0.0 {
        return Err(Error::DegenerateParams(
            "effective data needs beta != 0 and A + G != 0".into(),
        ));
    }
    EvalPoint::new(p, f1)?;
    let with_pretrain = params.pretrain_coef * p.powf(-params.pretrain_exp) + params.transfer_gap;
    Ok(f1 * (with_pretrain / c).powf(-1.0 / params.finetune_exp))
}

/// A named row of reference parameters (with their reported standard errors).
#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub label: &'static str,
    pub params: LawParams,
    pub standard_errors: [f64; 5],
}

/// Reference parameter rows for five fine-tuning datasets.
pub const PRESETS: [Preset; 5] = [
    Preset {
        name: "fictional-encyclopedia",
        label: "Fictional encyclopedia",
        params: LawParams::new(284.766, 2.570, 0.730, 0.123, 0.538),
        standard_errors: [38.55, 0.18, 0.02, 0.01, 0.19],
    },
    Preset {
        name: "math-arxiv",
        label: "Math arXiv",
        params: LawParams::new(317.966, 0.166, 0.756, 0.059, 1.758),
        standard_errors: [29.31, 0.04, 0.02, 0.01, 0.04],
    },
    Preset {
        name: "statistics-textbook",
        label: "Statistics textbook",
        params: LawParams::new(177.321, 1.305, 0.627, 0.126, 1.367),
        standard_errors: [20.93, 0.26, 0.02, 0.02, 0.19],
    },
    Preset {
        name: "enron-emails",
        label: "Enron emails",
        params: LawParams::new(181.482, 0.595, 0.611, 0.159, 1.373),
        standard_errors: [19.32, 0.11, 0.02, 0.01, 0.07],
    },
    Preset {
        name: "house-cat-genome",
        label: "House cat genome",
        params: LawParams::new(43.556, 0.548, 0.718, 0.228, 2.677),
        standard_errors: [7.85, 0.02, 0.05, 0.03, 0.04],
    },
];

pub fn preset(name: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<_> = PRESETS.iter().map(|p| p.name).collect();
        Error::InvalidArgument(format!("unknown preset {name:?}; expected one of {names:?}"))
    })
}
