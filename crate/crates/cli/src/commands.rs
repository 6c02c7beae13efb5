use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use log::{info, warn};
use mgqda::simgen::{self, BenchmarkConfig, SimulationSpec, Tuning};
use mgqda::{build_model, compute_group_stats, cross_validate, data_io, fit as fit_omega, persist};
use mgqda::{CovMode, CvConfig, Dataset, FittedModel, PenaltySpec};

use crate::config::{pick, FileConfig};
use crate::{CvArgs, CvSettings, DataArgs, FitArgs, PredictArgs, SimulateArgs, SolverArgs, UserError};

fn cov_mode(args: &DataArgs, file: &FileConfig) -> anyhow::Result<CovMode> {
    match args.cov_mode.as_deref().or(file.cov_mode.as_deref()) {
        Some(s) => Ok(s.parse()?),
        None => Ok(CovMode::default()),
    }
}

fn load_training(args: &DataArgs, file: &FileConfig) -> anyhow::Result<Dataset<f64>> {
    let label_col = args
        .label_col
        .as_deref()
        .or(file.label_col.as_deref())
        .ok_or_else(|| UserError("--label-col is required".into()))?;
    let features = args.features.as_deref().or(file.features.as_deref());
    let data = data_io::read_labeled_path(&args.train, label_col, features)
        .with_context(|| format!("reading {}", args.train.display()))?;
    info!("read {} observations, {} features, {} groups", data.n(), data.p(), data.g_count());
    Ok(data)
}

fn penalty(lambda: f64, alpha: f64, solver: &SolverArgs, file: &FileConfig) -> PenaltySpec<f64> {
    let defaults = PenaltySpec::<f64>::default();
    PenaltySpec::new(lambda, alpha)
        .with_tol(pick(solver.tol, file.tol, defaults.tol))
        .with_max_sweeps(pick(solver.max_sweeps, file.max_sweeps, defaults.max_sweeps))
}

fn attach_names(model: FittedModel<f64>, data: &Dataset<f64>) -> anyhow::Result<FittedModel<f64>> {
    let model = model.with_labels(data.labels().to_vec())?;
    Ok(match data.feature_names() {
        Some(names) => model.with_feature_names(names.to_vec())?,
        None => model,
    })
}

fn report_support(model: &FittedModel<f64>) {
    eprintln!("support: {} of {} variables", model.support().len(), model.p_full());
    for (label, s) in model.labels().iter().zip(model.group_supports()) {
        eprintln!("  group {label}: {}", s.len());
    }
    if model.is_prior_only() {
        eprintln!("warning: no variables selected; the model classifies by prior probabilities alone");
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn fit(args: FitArgs, file: &FileConfig) -> anyhow::Result<()> {
    let data = load_training(&args.data, file)?;
    let stats = compute_group_stats(&data, cov_mode(&args.data, file)?)?;
    let lambda = args
        .lambda
        .or(file.lambda)
        .ok_or_else(|| UserError("--lambda is required".into()))?;
    let pen = penalty(lambda, pick(args.alpha, file.alpha, 0.5), &args.solver, file);
    pen.validate()?;
    let (omega, report) = fit_omega(&stats, &pen, None)?;
    if !report.converged {
        warn!("solver stopped after {} sweeps without converging (KKT residual {:.3e})", report.sweeps_used, report.kkt_residual);
    }
    let model = attach_names(build_model(&omega, &stats, &pen)?, &data)?;
    report_support(&model);
    if let Some(obj) = report.objective_trace.last() {
        eprintln!("objective: {obj:.10e}");
    }
    persist::save(&model, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn cv_config(
    settings: &CvSettings,
    alpha: Option<f64>,
    seed: Option<u64>,
    mode: CovMode,
    solver: &SolverArgs,
    file: &FileConfig,
) -> CvConfig<f64> {
    let d = CvConfig::<f64>::default();
    CvConfig {
        folds: pick(settings.folds, file.folds, d.folds),
        n_lambda: pick(settings.n_lambda, file.n_lambda, d.n_lambda),
        ratio: pick(settings.ratio, file.ratio, d.ratio),
        alpha: pick(alpha, file.alpha, d.alpha),
        stratified: if settings.no_stratify { false } else { file.stratified.unwrap_or(d.stratified) },
        seed: seed.or(file.seed),
        cov_mode: mode,
        tol: pick(solver.tol, file.tol, d.tol),
        max_sweeps: pick(solver.max_sweeps, file.max_sweeps, d.max_sweeps),
    }
}

pub fn cv(args: CvArgs, file: &FileConfig) -> anyhow::Result<()> {
    let data = load_training(&args.data, file)?;
    let cfg = cv_config(&args.cv, args.alpha, args.seed, cov_mode(&args.data, file)?, &args.solver, file);
    let result = cross_validate(&data, &cfg)?;
    eprintln!(
        "selected lambda {:.6e} (index {} of {}), mean CV error {:.4}",
        result.lambda(),
        result.best_index + 1,
        result.lambdas.len(),
        result.mean_errors[result.best_index]
    );
    report_support(&result.model);
    if let Some(path) = &args.report {
        let mut w = create(path)?;
        result.write_report(&mut w)?;
        w.flush()?;
    }
    persist::save(&result.model, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn write_predictions<W: Write>(writer: W, model: &FittedModel<f64>, x: ndarray::ArrayView2<'_, f64>, scores: bool) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["row".to_string(), "predicted_label".to_string()];
    if scores {
        header.extend(model.labels().iter().map(|l| format!("score_{l}")));
    }
    w.write_record(&header)?;
    let s = model.score_batch(x)?;
    for (i, row) in s.outer_iter().enumerate() {
        let g = mgqda::classifier::argmin(row);
        let mut rec = vec![(i + 1).to_string(), model.labels()[g].clone()];
        if scores {
            rec.extend(row.iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn predict(args: PredictArgs) -> anyhow::Result<()> {
    let model: FittedModel<f64> =
        persist::load(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let x = data_io::read_features_path::<f64>(&args.data, model.feature_names())
        .with_context(|| format!("reading {}", args.data.display()))?;
    if x.ncols() != model.p_full() {
        return Err(UserError(format!("data has {} feature columns but the model expects {}", x.ncols(), model.p_full())).into());
    }
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            write_predictions(&mut w, &model, x.view(), args.scores)?;
            w.flush()?;
        }
        None => write_predictions(std::io::stdout().lock(), &model, x.view(), args.scores)?,
    }
    Ok(())
}

pub fn simulate(args: SimulateArgs, file: &FileConfig) -> anyhow::Result<()> {
    let seed = args
        .seed
        .or(file.seed)
        .ok_or_else(|| UserError("--seed is required".into()))?;
    let spec = simgen::model_spec(args.model_id, args.p)?;
    let mut sim = SimulationSpec::new(args.model_id, args.p, seed, pick(args.reps, file.reps, 1));
    sim.n_test = pick(args.n_test, file.n_test, sim.n_test);
    let alpha = pick(args.alpha, file.alpha, 0.5);
    let tuning = match args.lambda.or(if args.cv { None } else { file.lambda }) {
        Some(lambda) => Tuning::Fixed { lambda, alpha },
        None => {
            let solver = SolverArgs { tol: None, max_sweeps: None };
            let mut cfg = cv_config(&args.cv_settings, Some(alpha), Some(seed), CovMode::default(), &solver, file);
            if let Some(m) = &file.cov_mode {
                cfg.cov_mode = m.parse()?;
            }
            Tuning::Cv(cfg)
        }
    };
    let cfg = BenchmarkConfig { sim, tuning, baseline: args.baseline, timing: args.timing };
    let rows = simgen::run_benchmark(&cfg)?;
    let failed = rows.iter().filter(|r| r.status.starts_with("error")).count();
    if failed > 0 {
        warn!("{failed} of {} replications failed; see the status column", rows.len());
    }
    let mut w = create(&args.out)?;
    simgen::write_benchmark_csv(&mut w, &rows, spec.g_count, args.baseline)?;
    w.flush()?;

    let mut meta_path = args.out.clone().into_os_string();
    meta_path.push(".meta.json");
    let mut m = create(Path::new(&meta_path))?;
    serde_json::to_writer_pretty(&mut m, &simgen::benchmark_metadata(&cfg))?;
    writeln!(m)?;
    m.flush()?;
    Ok(())
}
