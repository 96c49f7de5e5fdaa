//! Subcommand implementations. Each one builds a [`StudyReport`] whose
//! `config` field echoes the effective flags, then renders it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{json, Value};

use transfer_law::fitter::{fit, FitConfig, StartGrid};
use transfer_law::ingest::{load_records, to_eval_points, write_csv, RunRecord};
use transfer_law::model::{preset, FormId, LawForm, LawParams};
use transfer_law::planner::{
    estimate_compute, iso_loss, log_grid, optimize_allocation, sweep_cost_ratio, sweep_gap, AllocationProblem,
};
use transfer_law::report::{
    parse_json, render, Allocation, ComputeEstimate, CvSection, DatasetSection, Format, PlanSection, StudyReport, Sweep,
};
use transfer_law::selection::{compare_forms, CvConfig};
use transfer_law::synth::{generate, SynthSpec};
use transfer_law::uncertainty::{bootstrap_around, coefficient_of_variation, BootstrapConfig, Dispersion};

use crate::args::{
    BootstrapArgs, Cli, Command, ComputeArgs, CvArgs, DataArgs, DispersionArg, FitArgs, FitFlags, OutputFormat,
    ParamsArgs, PlanCommand, ProblemArgs, ReportArgs, SweepArgs, SynthArgs,
};
use crate::InputError;

struct Sink<'a> {
    format: OutputFormat,
    output: Option<&'a Path>,
    json: Option<&'a Path>,
}

impl Sink<'_> {
    fn write_document(&self, text: &str) -> Result<()> {
        match self.output {
            Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(text.as_bytes())?;
                out.flush().map_err(Into::into)
            }
        }
    }

    fn emit(&self, report: &StudyReport) -> Result<()> {
        let format = match self.format {
            OutputFormat::Json => Format::Json,
            OutputFormat::Text => Format::Text,
            OutputFormat::Csv => Format::Csv,
        };
        self.write_document(&render(report, format)?)?;
        if let Some(path) = self.json {
            std::fs::write(path, render(report, Format::Json)?)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(InputError("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    // thread count and output paths do not affect results, so they stay out of the echo
    let echo = json!({ "seed": cli.seed, "command": &cli.command });
    let sink = Sink {
        format: cli.format,
        output: cli.output.as_deref(),
        json: cli.json.as_deref(),
    };
    let report = match &cli.command {
        Command::Fit(a) => cmd_fit(a, echo)?,
        Command::Bootstrap(a) => cmd_bootstrap(a, cli.seed, echo)?,
        Command::Cv(a) => cmd_cv(a, cli.seed, echo)?,
        Command::Plan(p) => cmd_plan(p, echo)?,
        Command::Report(a) => cmd_report(a)?,
        Command::Synth(a) => {
            let mut bytes = Vec::new();
            write_csv(&cmd_synth(a, cli.seed)?, &mut bytes)?;
            return sink.write_document(&String::from_utf8(bytes)?);
        }
    };
    sink.emit(&report)
}

fn form_of(id: u8) -> Result<LawForm> {
    let id = FormId::try_from(id).map_err(|e| InputError(e.to_string()))?;
    Ok(LawForm::new(id))
}

fn dispersion(d: DispersionArg) -> Dispersion {
    match d {
        DispersionArg::Sample => Dispersion::Sample,
        DispersionArg::Population => Dispersion::Population,
    }
}

/// Records of every input file, grouped by dataset name.
fn load_groups(data: &DataArgs) -> Result<BTreeMap<String, Vec<RunRecord>>> {
    let mut groups: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    for path in &data.data {
        for r in load_records(path)? {
            if data.dataset.as_ref().is_none_or(|d| *d == r.dataset) {
                groups.entry(r.dataset.clone()).or_default().push(r);
            }
        }
    }
    if groups.is_empty() {
        return Err(InputError("no records to process".into()).into());
    }
    Ok(groups)
}

fn fit_config(flags: &FitFlags) -> FitConfig {
    FitConfig {
        huber_delta: flags.huber_delta,
        start_grid: if flags.coarse_starts {
            StartGrid::coarse()
        } else {
            StartGrid::default()
        },
        max_iterations: flags.max_iterations,
        convergence_tol: flags.convergence_tol,
        reg_exponents: flags.reg_exponents,
        reg_coefficients: flags.reg_coefficients,
    }
}

fn with_variation(mut report: StudyReport, d: DispersionArg) -> Result<StudyReport> {
    let sets = report.fitted_params();
    if sets.len() >= 2 {
        report.cross_dataset_cv = Some(coefficient_of_variation(&sets, dispersion(d))?);
    }
    Ok(report)
}

fn cmd_fit(a: &FitArgs, echo: Value) -> Result<StudyReport> {
    let form = form_of(a.form)?;
    let config = fit_config(&a.fit);
    let mut report = StudyReport::with_config(&echo)?;
    for (name, records) in load_groups(&a.data)? {
        let points = to_eval_points(&records, a.data.tokens_per_step);
        let result = fit(&points, &form, &config).with_context(|| format!("fitting dataset {name}"))?;
        let mut section = DatasetSection::new(name, records.len());
        section.fit = Some(result);
        report.datasets.push(section);
    }
    with_variation(report, a.dispersion)
}

fn cmd_bootstrap(a: &BootstrapArgs, seed: u64, echo: Value) -> Result<StudyReport> {
    let form = form_of(a.form)?;
    let config = BootstrapConfig {
        n_resamples: a.resamples,
        seed,
        level: a.level,
        nearest_grid_starts: a.nearest_starts,
        fit: fit_config(&a.fit),
    };
    let mut report = StudyReport::with_config(&echo)?;
    for (name, records) in load_groups(&a.data)? {
        let points = to_eval_points(&records, a.data.tokens_per_step);
        let full = fit(&points, &form, &config.fit).with_context(|| format!("fitting dataset {name}"))?;
        let boot =
            bootstrap_around(&points, &full, &config).with_context(|| format!("bootstrapping dataset {name}"))?;
        let mut section = DatasetSection::new(name, records.len());
        section.fit = Some(full);
        section.bootstrap = Some(boot);
        report.datasets.push(section);
    }
    Ok(report)
}

fn cmd_cv(a: &CvArgs, seed: u64, echo: Value) -> Result<StudyReport> {
    let forms = a.forms.iter().map(|&f| form_of(f)).collect::<Result<Vec<_>>>()?;
    let defaults = CvConfig::default();
    let config = CvConfig {
        p_thresholds: a.p_thresholds.clone(),
        f_thresholds: a.f_thresholds.clone(),
        skip_number: a.skip,
        lambda_exp_grid: a.lambda_exp.clone(),
        lambda_coef_grid: a.lambda_coef.clone(),
        min_train_size: a.min_train,
        min_test_size: a.min_test,
        restarts: a.restarts,
        perturbation_scale: a.perturbation,
        seed,
        fit: FitConfig {
            huber_delta: a.huber_delta,
            max_iterations: a.max_iterations,
            start_grid: if a.full_starts {
                StartGrid::default()
            } else {
                StartGrid::coarse()
            },
            ..defaults.fit
        },
        tokens_per_step: a.data.tokens_per_step,
    };
    let mut report = StudyReport::with_config(&echo)?;
    for (name, records) in load_groups(&a.data)? {
        let (ranking, reports) =
            compare_forms(&records, &forms, &config).with_context(|| format!("cross-validating dataset {name}"))?;
        let mut section = DatasetSection::new(name, records.len());
        section.cv = Some(CvSection { ranking, reports });
        report.datasets.push(section);
    }
    Ok(report)
}

fn resolve_params(p: &ParamsArgs) -> Result<LawParams> {
    let Some(path) = &p.params else {
        return Ok(preset(&p.preset)?.params);
    };
    let text = std::fs::read_to_string(path).map_err(|e| InputError(format!("cannot read {}: {e}", path.display())))?;
    if let Ok(report) = parse_json(&text) {
        let section = report
            .datasets
            .iter()
            .filter(|d| d.fit.is_some())
            .find(|d| p.params_dataset.as_ref().is_none_or(|name| *name == d.dataset))
            .ok_or_else(|| InputError(format!("{} has no matching fitted dataset", path.display())))?;
        let fitted = section.fit.as_ref().expect("filtered on fit");
        if fitted.form.id != FormId::Standard {
            log::warn!(
                "planning with form {} parameters under the standard law",
                fitted.form.id
            );
        }
        return Ok(fitted.params);
    }
    let params: LawParams = serde_json::from_str(&text).map_err(|e| {
        InputError(format!(
            "{} is neither a report nor a parameter object: {e}",
            path.display()
        ))
    })?;
    params.validate()?;
    Ok(params)
}

fn problem_of(a: &ProblemArgs) -> Result<AllocationProblem> {
    Ok(AllocationProblem {
        budget: a.budget,
        cost_per_pretrain_step: a.cp,
        cost_per_finetune_point: a.cf,
        params: resolve_params(&a.params)?,
        p_units_per_step: a.p_units_per_step,
    })
}

fn sweep_of(a: &SweepArgs, variable: &str) -> Result<Sweep> {
    let problem = problem_of(&a.problem)?;
    let values = log_grid(a.from, a.to, a.points)?;
    let points = if variable == "G" {
        sweep_gap(&problem, &values)?
    } else {
        sweep_cost_ratio(&problem, &values)?
    };
    Ok(Sweep {
        variable: variable.to_string(),
        problem,
        points,
    })
}

fn cmd_plan(p: &PlanCommand, echo: Value) -> Result<StudyReport> {
    let mut plan = PlanSection::default();
    match p {
        PlanCommand::Allocate(a) => {
            let problem = problem_of(a)?;
            plan.allocation = Some(Allocation {
                problem,
                result: optimize_allocation(&problem)?,
            });
        }
        PlanCommand::SweepGap(a) => plan.sweeps.push(sweep_of(a, "G")?),
        PlanCommand::SweepCost(a) => plan.sweeps.push(sweep_of(a, "cost_ratio")?),
        PlanCommand::Isoloss(a) => {
            let params = resolve_params(&a.params)?;
            for &target in &a.target {
                plan.iso_loss
                    .push(iso_loss(&params, target, (a.p_min, a.p_max), a.points)?);
            }
        }
        PlanCommand::Compute(ComputeArgs { data, n_params }) => {
            let records: Vec<RunRecord> = load_groups(data)?.into_values().flatten().collect();
            let flops = estimate_compute(&records, *n_params)?;
            plan.compute = Some(ComputeEstimate {
                n_records: records.len(),
                n_params: *n_params,
                flops,
            });
        }
    }
    Ok(StudyReport {
        plan: Some(plan),
        ..StudyReport::with_config(&echo)?
    })
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> Result<Vec<RunRecord>> {
    let preset = preset(&a.preset)?;
    let spec = SynthSpec {
        form: form_of(a.form)?,
        noise_sigma: a.sigma,
        seed,
        tokens_per_step: a.tokens_per_step,
        epochs: a.epochs,
        ..SynthSpec::new(
            a.dataset.clone().unwrap_or_else(|| preset.name.to_string()),
            preset.params,
        )
    };
    Ok(generate(&spec)?)
}

fn cmd_report(a: &ReportArgs) -> Result<StudyReport> {
    let mut inputs = Vec::new();
    for path in &a.reports {
        let text =
            std::fs::read_to_string(path).map_err(|e| InputError(format!("cannot read {}: {e}", path.display())))?;
        inputs.push(parse_json(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))?);
    }
    if inputs.len() == 1 {
        return Ok(inputs.pop().expect("one input"));
    }
    let mut merged = StudyReport {
        config: json!({ "merged": inputs.iter().map(|r| r.config.clone()).collect::<Vec<_>>() }),
        ..StudyReport::default()
    };
    for r in inputs {
        merged.datasets.extend(r.datasets);
        if let Some(p) = r.plan {
            let plan = merged.plan.get_or_insert_with(PlanSection::default);
            plan.allocation = plan.allocation.take().or(p.allocation);
            plan.sweeps.extend(p.sweeps);
            plan.iso_loss.extend(p.iso_loss);
            plan.compute = plan.compute.take().or(p.compute);
        }
    }
    with_variation(merged, a.dispersion)
}
