//! Study reports: one serializable document per run, rendered as JSON, a
//! plain-text table layout, or CSV blocks.
//!
//! JSON keeps full precision and validates against
//! `schema/study_report.schema.json`. Text tables print parameters with 3
//! decimals and cross-validation errors with 6. CSV output is a sequence of
//! blocks, each introduced by a `# <section>` line and separated by a blank
//! line.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::FitResult;
use crate::model::LawParams;
use crate::planner::{AllocationProblem, AllocationResult, IsoLossCurve, SweepPoint};
use crate::selection::{CvReport, FormRanking};
use crate::uncertainty::{named_values, BootstrapReport, ParameterCv};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// The JSON schema every rendered JSON report satisfies.
pub const SCHEMA: &str = include_str!("../schema/study_report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSection {
    pub ranking: Vec<FormRanking>,
    pub reports: Vec<CvReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub dataset: String,
    pub n_records: usize,
    pub fit: Option<FitResult>,
    pub bootstrap: Option<BootstrapReport>,
    pub cv: Option<CvSection>,
}

impl DatasetSection {
    pub fn new(dataset: impl Into<String>, n_records: usize) -> Self {
        DatasetSection {
            dataset: dataset.into(),
            n_records,
            fit: None,
            bootstrap: None,
            cv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub problem: AllocationProblem,
    pub result: AllocationResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    /// Name of the swept quantity, `G` or `cost_ratio`.
    pub variable: String,
    pub problem: AllocationProblem,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeEstimate {
    pub n_records: usize,
    pub n_params: f64,
    pub flops: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanSection {
    pub allocation: Option<Allocation>,
    pub sweeps: Vec<Sweep>,
    pub iso_loss: Vec<IsoLossCurve>,
    pub compute: Option<ComputeEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub version: String,
    /// Effective configuration of the run that produced the report.
    pub config: serde_json::Value,
    pub datasets: Vec<DatasetSection>,
    /// Coefficient of variation of each parameter across the fitted datasets.
    pub cross_dataset_cv: Option<ParameterCv>,
    pub plan: Option<PlanSection>,
}

impl Default for StudyReport {
    fn default() -> Self {
        StudyReport {
            version: VERSION.to_string(),
            config: serde_json::Value::Null,
            datasets: Vec::new(),
            cross_dataset_cv: None,
            plan: None,
        }
    }
}

impl StudyReport {
    pub fn with_config<T: Serialize>(config: &T) -> Result<Self> {
        Ok(StudyReport {
            config: serde_json::to_value(config)?,
            ..StudyReport::default()
        })
    }

    /// Fitted parameter sets of every dataset that has a fit.
    pub fn fitted_params(&self) -> Vec<LawParams> {
        self.datasets
            .iter()
            .filter_map(|d| d.fit.as_ref().map(|f| f.params))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Text,
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "text" | "table" | "text-table" => Ok(Format::Text),
            "csv" => Ok(Format::Csv),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

pub fn parse_json(text: &str) -> Result<StudyReport> {
    serde_json::from_str(text).map_err(Error::from)
}

pub fn render(report: &StudyReport, format: Format) -> Result<String> {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        Format::Text => Ok(render_text(report)),
        Format::Csv => render_csv(report),
    }
}

/// Left-aligned first column, right-aligned others.
fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let n = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, cell) in cells.iter().enumerate().take(n) {
            if i == 0 {
                let _ = write!(s, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(s, "  {cell:>w$}", w = widths[i]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out += &("-".repeat(widths.iter().sum::<usize>() + 2 * (n - 1)) + "\n");
    for row in rows {
        out += &line(row);
    }
    out
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn render_text(report: &StudyReport) -> String {
    let mut out = format!("transfer-law report (version {})\n", report.version);

    let fitted: Vec<&DatasetSection> = report.datasets.iter().filter(|d| d.fit.is_some()).collect();
    if !fitted.is_empty() {
        let mut rows = Vec::new();
        for d in &fitted {
            let fit = d.fit.as_ref().expect("filtered on fit");
            let mut row = vec![d.dataset.clone()];
            for (i, v) in fit.params.to_array().iter().enumerate() {
                let se = d.bootstrap.as_ref().and_then(|b| b.parameter(LawParams::NAMES[i]));
                row.push(match se {
                    Some(s) => format!("{v:.3} ({:.3})", s.standard_error),
                    None => format!("{v:.3}"),
                });
            }
            rows.push(row);
        }
        if let Some(cv) = &report.cross_dataset_cv {
            let mut row = vec!["Coefficient of variation".to_string()];
            row.extend(cv.to_array().iter().map(|v| format!("{v:.3}")));
            rows.push(row);
        }
        out += "\nFitted parameters (standard errors in parentheses)\n";
        out += &table(&strings(&["Dataset", "A", "G", "alpha", "beta", "E"]), &rows);
    }

    let booted: Vec<&DatasetSection> = report.datasets.iter().filter(|d| d.bootstrap.is_some()).collect();
    if !booted.is_empty() {
        let mut rows = Vec::new();
        let mut level = 0.95;
        for d in &booted {
            let b = d.bootstrap.as_ref().expect("filtered on bootstrap");
            level = b.level;
            let mut row = vec![d.dataset.clone()];
            for name in LawParams::NAMES {
                row.push(match b.parameter(name) {
                    Some(s) => format!("[{:.3}, {:.3}]", s.ci_low, s.ci_high),
                    None => "-".to_string(),
                });
            }
            row.push(format!("{}/{}", b.n_resamples - b.n_failed, b.n_resamples));
            rows.push(row);
        }
        out += &format!("\n{}% bootstrap confidence intervals\n", level * 100.0);
        out += &table(&strings(&["Dataset", "A", "G", "alpha", "beta", "E", "Refits"]), &rows);
    }

    for d in report.datasets.iter().filter(|d| d.cv.is_some()) {
        let cv = d.cv.as_ref().expect("filtered on cv");
        let rows: Vec<Vec<String>> = cv
            .ranking
            .iter()
            .map(|r| {
                vec![
                    r.form_id.to_string(),
                    r.form_id.formula().to_string(),
                    format!("{:.6}", r.lowest_rmse),
                    format!("{:.6}", r.lowest_mae),
                ]
            })
            .collect();
        out += &format!("\nCross-validation: {} ({} records)\n", d.dataset, d.n_records);
        out += &table(&strings(&["Form", "Formula", "Lowest RMSE", "Lowest MAE"]), &rows);
        let skipped: usize = cv.reports.iter().map(|r| r.skipped.len()).sum();
        if skipped > 0 {
            out += &format!("{skipped} combinations skipped\n");
        }
    }

    if let Some(plan) = &report.plan {
        if let Some(a) = &plan.allocation {
            let r = &a.result;
            let rows = vec![vec![
                format!("{}", a.problem.budget),
                format!("{:.6e}", r.steps_star),
                format!("{:.6e}", r.f_star),
                format!("{:.6}", r.loss_at_optimum),
                format!("{:.6}", r.finetune_budget_fraction),
                format!("{:.6e}", r.pretrain_dollars),
            ]];
            out += "\nOptimal allocation\n";
            out += &table(
                &strings(&[
                    "Budget",
                    "Steps",
                    "Fine-tuning points",
                    "Loss",
                    "Fine-tuning share",
                    "Pre-training dollars",
                ]),
                &rows,
            );
        }
        for s in &plan.sweeps {
            let rows: Vec<Vec<String>> = s
                .points
                .iter()
                .map(|p| {
                    vec![
                        format!("{:.6}", p.value),
                        format!("{:.6e}", p.allocation.f_star),
                        format!("{:.6}", p.allocation.finetune_budget_fraction),
                        format!("{:.6e}", p.allocation.pretrain_dollars),
                    ]
                })
                .collect();
            out += &format!("\nAllocation sweep over {}\n", s.variable);
            out += &table(
                &[
                    s.variable.clone(),
                    "Fine-tuning points".into(),
                    "Fine-tuning share".into(),
                    "Pre-training dollars".into(),
                ],
                &rows,
            );
        }
        for c in &plan.iso_loss {
            let rows: Vec<Vec<String>> = c
                .points
                .iter()
                .map(|(p, f)| vec![format!("{p:.6e}"), format!("{f:.6e}")])
                .collect();
            out += &format!("\nIso-loss curve at {:.6}\n", c.target_loss);
            out += &table(&strings(&["p", "f"]), &rows);
        }
        if let Some(c) = &plan.compute {
            out += &format!(
                "\nEstimated training compute: {:.6e} FLOP over {} runs\n",
                c.flops, c.n_records
            );
        }
    }
    out
}

struct CsvBlocks {
    out: String,
}

impl CsvBlocks {
    fn block(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        w.write_record(header).map_err(ser)?;
        for row in rows {
            w.write_record(&row).map_err(ser)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
        self.out += &format!("\n# {name}\n");
        self.out += &String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(())
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn render_csv(report: &StudyReport) -> Result<String> {
    let mut b = CsvBlocks {
        out: format!("# transfer-law report version {}\n", report.version),
    };

    let fit_rows: Vec<Vec<String>> = report
        .datasets
        .iter()
        .filter_map(|d| d.fit.as_ref().map(|f| (d, f)))
        .map(|(d, f)| {
            let mut row = vec![d.dataset.clone(), f.form.id.to_string()];
            row.extend(f.params.to_array().iter().map(|v| num(*v)));
            row.push(num(f.form.pretrain_shift()));
            row.push(num(f.form.finetune_shift()));
            row.push(num(f.objective));
            row
        })
        .collect();
    if !fit_rows.is_empty() {
        b.block(
            "fit",
            &[
                "dataset",
                "form",
                "A",
                "G",
                "alpha",
                "beta",
                "E",
                "p_shift",
                "f_shift",
                "objective",
            ],
            fit_rows,
        )?;
    }

    let mut boot_rows = Vec::new();
    for d in &report.datasets {
        if let Some(boot) = &d.bootstrap {
            for s in &boot.parameters {
                boot_rows.push(vec![
                    d.dataset.clone(),
                    s.name.clone(),
                    num(s.point_estimate),
                    num(s.standard_error),
                    num(s.ci_low),
                    num(s.ci_high),
                ]);
            }
        }
    }
    if !boot_rows.is_empty() {
        b.block(
            "bootstrap",
            &[
                "dataset",
                "parameter",
                "point_estimate",
                "standard_error",
                "ci_low",
                "ci_high",
            ],
            boot_rows,
        )?;
    }

    if let Some(cv) = &report.cross_dataset_cv {
        b.block(
            "cross_dataset_cv",
            &LawParams::NAMES,
            vec![cv.to_array().iter().map(|v| num(*v)).collect()],
        )?;
    }

    let mut rank_rows = Vec::new();
    let mut split_rows = Vec::new();
    for d in &report.datasets {
        let Some(cv) = &d.cv else { continue };
        for (i, r) in cv.ranking.iter().enumerate() {
            rank_rows.push(vec![
                d.dataset.clone(),
                (i + 1).to_string(),
                r.form_id.to_string(),
                num(r.lowest_rmse),
                num(r.lowest_mae),
            ]);
        }
        for rep in &cv.reports {
            for s in &rep.splits {
                split_rows.push(vec![
                    d.dataset.clone(),
                    rep.form_id.to_string(),
                    num(s.p_threshold),
                    num(s.f_threshold),
                    num(s.lambda_exp),
                    num(s.lambda_coef),
                    s.train_size.to_string(),
                    s.test_size.to_string(),
                    num(s.rmse),
                    num(s.mae),
                ]);
            }
        }
    }
    if !rank_rows.is_empty() {
        b.block(
            "cv_ranking",
            &["dataset", "rank", "form", "lowest_rmse", "lowest_mae"],
            rank_rows,
        )?;
        b.block(
            "cv_splits",
            &[
                "dataset",
                "form",
                "p_threshold",
                "f_threshold",
                "lambda_exp",
                "lambda_coef",
                "train_size",
                "test_size",
                "rmse",
                "mae",
            ],
            split_rows,
        )?;
    }

    if let Some(plan) = &report.plan {
        if let Some(a) = &plan.allocation {
            let (p, r) = (&a.problem, &a.result);
            b.block(
                "allocation",
                &[
                    "budget",
                    "cost_per_pretrain_step",
                    "cost_per_finetune_point",
                    "steps_star",
                    "p_star",
                    "f_star",
                    "loss_at_optimum",
                    "finetune_budget_fraction",
                    "pretrain_dollars",
                ],
                vec![vec![
                    num(p.budget),
                    num(p.cost_per_pretrain_step),
                    num(p.cost_per_finetune_point),
                    num(r.steps_star),
                    num(r.p_star),
                    num(r.f_star),
                    num(r.loss_at_optimum),
                    num(r.finetune_budget_fraction),
                    num(r.pretrain_dollars),
                ]],
            )?;
        }
        for s in &plan.sweeps {
            let rows = s
                .points
                .iter()
                .map(|p| {
                    vec![
                        num(p.value),
                        num(p.allocation.steps_star),
                        num(p.allocation.f_star),
                        num(p.allocation.finetune_budget_fraction),
                        num(p.allocation.pretrain_dollars),
                    ]
                })
                .collect();
            b.block(
                &format!("sweep_{}", s.variable),
                &[
                    &s.variable,
                    "steps_star",
                    "f_star",
                    "finetune_budget_fraction",
                    "pretrain_dollars",
                ],
                rows,
            )?;
        }
        if !plan.iso_loss.is_empty() {
            let rows = plan
                .iso_loss
                .iter()
                .flat_map(|c| {
                    c.points
                        .iter()
                        .map(move |(p, f)| vec![num(c.target_loss), num(*p), num(*f)])
                })
                .collect();
            b.block("iso_loss", &["target_loss", "p", "f"], rows)?;
        }
        if let Some(c) = &plan.compute {
            b.block(
                "compute",
                &["n_records", "n_params", "flops"],
                vec![vec![c.n_records.to_string(), num(c.n_params), num(c.flops)]],
            )?;
        }
    }
    Ok(b.out)
}

/// Natural-scale values of a fit keyed by name, for quick lookups.
pub fn fit_value(fit: &FitResult, name: &str) -> Option<f64> {
    named_values(fit).into_iter().find(|(n, _)| *n == name).map(|(_, v)| v)
}
