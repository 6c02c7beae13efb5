//! Synthetic benchmark suite: covariance families, Models 1–8, Gaussian
//! sampling, selection/error metrics and the replication harness.
//!
//! Randomness comes from ChaCha20 seeded with the run seed, with one stream
//! per (replication, group, purpose); see [`stream_rng`].

use std::io::Write;
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::baseline::DiagonalLda;
use crate::classifier::{build_model, FittedModel};
use crate::cv::{cross_validate, CvConfig};
use crate::error::{MgqdaError, Result};
use crate::linalg::{psd_factor, sym_eigen, SymMatrix};
use crate::scalar::Scalar;
use crate::solver::{fit, PenaltySpec};
use crate::stats::{compute_group_stats, CovMode, Dataset};

pub const RNG_NAME: &str = "ChaCha20 (rand_chacha 0.9), seed_from_u64(seed), set_stream(rep << 16 | group << 4 | purpose)";

/// Purpose codes of the per-(rep, group) random streams.
pub const PURPOSE_COVARIANCE: u64 = 0;
pub const PURPOSE_TRAIN: u64 = 1;
pub const PURPOSE_TEST: u64 = 2;

/// Generator for one (replication, group, purpose) triple.
pub fn stream_rng(seed: u64, rep: usize, group: usize, purpose: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((rep as u64) << 16) | ((group as u64) << 4) | purpose);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceFamily {
    /// `diag{ρI_b + (1−ρ)11ᵀ, I}`.
    BlockEquicorrelation { b: usize, rho: f64 },
    /// `diag{Σ̃_b, I}` with `Σ̃_ij = ρ^|i−j|`.
    BlockAutocorrelation { b: usize, rho: f64 },
    /// `a1 q1q1ᵀ + a2 q2q2ᵀ + I`; q1, q2 are normalized before use.
    Spiked { q1: Vec<f64>, q2: Vec<f64>, a1: f64, a2: f64 },
    /// `diag{UᵀΛU, I}` with U standard normal and `λ_i ~ U[1, 2]`, drawn
    /// from the generator passed to [`make_covariance`].
    BlockModel { b: usize },
}

impl CovarianceFamily {
    /// Spiked family with `q1 ∝ (1, …, b, 0, …)` and `q2 ∝ (b, …, 1, 0, …)`.
    pub fn spiked_linear(p: usize, b: usize, a1: f64, a2: f64) -> Self {
        Self::spiked_with(p, b, a1, a2, |i| i as f64)
    }

    /// Spiked family with `q1 ∝ (√1, …, √b, 0, …)` and q2 the reverse.
    pub fn spiked_sqrt(p: usize, b: usize, a1: f64, a2: f64) -> Self {
        Self::spiked_with(p, b, a1, a2, |i| (i as f64).sqrt())
    }

    fn spiked_with(p: usize, b: usize, a1: f64, a2: f64, f: impl Fn(usize) -> f64) -> Self {
        let b = b.min(p);
        let mut q1 = vec![0.0; p];
        let mut q2 = vec![0.0; p];
        for i in 0..b {
            q1[i] = f(i + 1);
            q2[i] = f(b - i);
        }
        CovarianceFamily::Spiked { q1, q2, a1, a2 }
    }
}

fn unit(q: &[f64]) -> Result<Vec<f64>> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(MgqdaError::Construction("spike direction must be a non-zero finite vector".into()));
    }
    Ok(q.iter().map(|v| v / n).collect())
}

/// Realizes a covariance family in dimension p.
pub fn make_covariance<R: Rng + ?Sized>(family: &CovarianceFamily, p: usize, rng: &mut R) -> Result<SymMatrix<f64>> {
    let check_block = |b: usize| {
        if b == 0 || b > p {
            Err(MgqdaError::Construction(format!("block size {b} must lie in 1..={p}")))
        } else {
            Ok(())
        }
    };
    let check_rho = |rho: f64| {
        if (0.0..=1.0).contains(&rho) {
            Ok(())
        } else {
            Err(MgqdaError::Construction(format!("rho = {rho} outside [0, 1]")))
        }
    };
    let mut m = Array2::<f64>::eye(p);
    match family {
        CovarianceFamily::BlockEquicorrelation { b, rho } => {
            check_block(*b)?;
            check_rho(*rho)?;
            m.slice_mut(s![..*b, ..*b]).fill(1.0 - rho);
            for i in 0..*b {
                m[[i, i]] = 1.0;
            }
        }
        CovarianceFamily::BlockAutocorrelation { b, rho } => {
            check_block(*b)?;
            check_rho(*rho)?;
            for i in 0..*b {
                for j in 0..*b {
                    m[[i, j]] = rho.powi(i.abs_diff(j) as i32);
                }
            }
        }
        CovarianceFamily::Spiked { q1, q2, a1, a2 } => {
            if q1.len() != p || q2.len() != p {
                return Err(MgqdaError::Construction(format!("spike directions must have length {p}")));
            }
            let (u1, u2) = (unit(q1)?, unit(q2)?);
            for i in 0..p {
                for j in 0..p {
                    m[[i, j]] += a1 * u1[i] * u1[j] + a2 * u2[i] * u2[j];
                }
            }
        }
        CovarianceFamily::BlockModel { b } => {
            check_block(*b)?;
            let u = Array2::from_shape_simple_fn((*b, *b), || rng.sample::<f64, _>(StandardNormal));
            let lam: Array1<f64> = (0..*b).map(|_| rng.random_range(1.0..=2.0)).collect();
            let scaled = &u * &lam.view().insert_axis(ndarray::Axis(1));
            m.slice_mut(s![..*b, ..*b]).assign(&u.t().dot(&scaled));
        }
    }
    let cov = SymMatrix::from_lower(m)?;
    let k = active_dim(&cov);
    if k > 0 {
        let eig = sym_eigen(&cov.submatrix(&(0..k).collect::<Vec<_>>())?)?;
        if eig.min_value() < -1e-8 * eig.max_value().abs() {
            return Err(MgqdaError::Construction(format!(
                "covariance is not PSD (min eigenvalue {})",
                eig.min_value()
            )));
        }
    }
    Ok(cov)
}

/// One past the last row that differs from the identity.
fn active_dim(cov: &SymMatrix<f64>) -> usize {
    let v = cov.view();
    (0..cov.dim())
        .rev()
        .find(|&j| v.row(j).iter().enumerate().any(|(i, &x)| x != if i == j { 1.0 } else { 0.0 }))
        .map_or(0, |j| j + 1)
}

/// Draws n rows from `N(mean, cov)` as `mean + Lz`, factoring only the
/// leading block of `cov` that differs from the identity.
pub fn sample_gaussian<R: Rng + ?Sized>(mean: ArrayView1<'_, f64>, cov: &SymMatrix<f64>, n: usize, rng: &mut R) -> Result<Array2<f64>> {
    let p = mean.len();
    if cov.dim() != p {
        return Err(MgqdaError::invalid(format!("mean has length {p} but covariance is {}×{}", cov.dim(), cov.dim())));
    }
    let k = active_dim(cov);
    let factor = if k > 0 { psd_factor(&cov.submatrix(&(0..k).collect::<Vec<_>>())?)? } else { Array2::zeros((0, 0)) };
    let mut out = Array2::zeros((n, p));
    let mut z = Array1::<f64>::zeros(p);
    for mut row in out.outer_iter_mut() {
        z.mapv_inplace(|_| rng.sample(StandardNormal));
        row.slice_mut(s![..k]).assign(&factor.dot(&z.slice(s![..k])));
        row.slice_mut(s![k..]).assign(&z.slice(s![k..]));
        row += &mean;
    }
    Ok(out)
}

/// Means and covariance families of one benchmark model.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub model_id: u8,
    pub p: usize,
    pub g_count: usize,
    pub block: usize,
    /// G × p.
    pub means: Array2<f64>,
    pub families: Vec<CovarianceFamily>,
}

impl ModelSpec {
    /// Realizes each group's covariance; block-model draws use the
    /// covariance stream of (seed, rep, group).
    pub fn covariances(&self, seed: u64, rep: usize) -> Result<Vec<SymMatrix<f64>>> {
        self.families
            .iter()
            .enumerate()
            .map(|(g, fam)| make_covariance(fam, self.p, &mut stream_rng(seed, rep, g, PURPOSE_COVARIANCE)))
            .collect()
    }
}

pub const MIN_P: usize = 50;

/// Models 1–8 of the benchmark suite in dimension `p ≥ 50`.
pub fn model_spec(model_id: u8, p: usize) -> Result<ModelSpec> {
    if !(1..=8).contains(&model_id) {
        return Err(MgqdaError::invalid(format!("model id {model_id} is not in 1..=8")));
    }
    if p < MIN_P {
        return Err(MgqdaError::invalid(format!("p = {p} is below the minimum {MIN_P}")));
    }
    let g_count = if model_id <= 5 { 3 } else { 5 };
    let b = if model_id <= 4 { 30 } else { 50 };
    let mut means = Array2::<f64>::zeros((g_count, p));
    let mut set = |g: usize, from: usize, to: usize, v: f64| means.slice_mut(s![g, from..to]).fill(v);
    use CovarianceFamily::*;
    let families = match model_id {
        1..=3 => {
            let m = if model_id == 2 { 0.5 } else { 1.0 };
            set(1, 0, 10, m);
            set(1, 10, 20, -m);
            set(2, 0, 10, -m);
            set(2, 10, 20, m);
            if model_id == 3 {
                vec![
                    BlockEquicorrelation { b, rho: 0.3 },
                    BlockAutocorrelation { b, rho: 0.7 },
                    BlockModel { b },
                ]
            } else {
                vec![
                    BlockEquicorrelation { b, rho: 0.8 },
                    BlockAutocorrelation { b, rho: 0.8 },
                    CovarianceFamily::spiked_linear(p, b, 100.0, 10.0),
                ]
            }
        }
        4 | 5 => {
            for g in 0..3 {
                set(g, 10 * g, 10 * (g + 1), 1.0);
            }
            if model_id == 4 {
                vec![
                    BlockEquicorrelation { b, rho: 0.3 },
                    BlockAutocorrelation { b, rho: 0.7 },
                    CovarianceFamily::spiked_sqrt(p, b, 30.0, 5.0),
                ]
            } else {
                let rho0 = 0.8;
                vec![
                    BlockAutocorrelation { b, rho: rho0 },
                    BlockAutocorrelation { b, rho: 0.7 * rho0 },
                    BlockAutocorrelation { b, rho: 0.3 * rho0 },
                ]
            }
        }
        _ => {
            match model_id {
                6 | 7 => {
                    let m = if model_id == 7 { 0.5 } else { 1.0 };
                    for g in 0..5 {
                        set(g, 10 * g, 10 * (g + 1), m);
                    }
                }
                _ => {
                    set(1, 0, 20, 1.0);
                    set(2, 0, 10, 0.2);
                    set(2, 10, 20, -0.2);
                    set(3, 20, 22, 5.0);
                    set(4, 25, 26, -10.0);
                    set(4, 26, 27, 10.0);
                }
            }
            vec![
                BlockEquicorrelation { b, rho: 0.5 },
                BlockAutocorrelation { b, rho: 0.5 },
                CovarianceFamily::spiked_linear(p, b, 100.0, 10.0),
                CovarianceFamily::spiked_linear(p, b, 10.0, 100.0),
                BlockModel { b },
            ]
        }
    };
    Ok(ModelSpec { model_id, p, g_count, block: b, means, families })
}

/// True supports: `S_g` holds the coordinates where group g's mean differs
/// from some other group's mean, plus the rows of `Σ_g` that differ from the
/// identity; `S = ∪ S_g`.
pub fn true_supports(means: ArrayView2<'_, f64>, covs: &[SymMatrix<f64>]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let (g_count, p) = means.dim();
    let mut group_sets = Vec::with_capacity(g_count);
    for g in 0..g_count {
        let cov = covs[g].view();
        let set: Vec<usize> = (0..p)
            .filter(|&j| {
                let mean_differs = (0..g_count).any(|h| means[[h, j]] != means[[g, j]]);
                let cov_differs = cov.row(j).iter().enumerate().any(|(i, &v)| v != if i == j { 1.0 } else { 0.0 });
                mean_differs || cov_differs
            })
            .collect();
        group_sets.push(set);
    }
    let mut union: Vec<usize> = group_sets.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    (union, group_sets)
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSpec {
    pub model_id: u8,
    pub p: usize,
    pub n_g: usize,
    pub n_test: usize,
    pub seed: u64,
    pub reps: usize,
}

impl SimulationSpec {
    pub fn new(model_id: u8, p: usize, seed: u64, reps: usize) -> Self {
        SimulationSpec { model_id, p, n_g: 100, n_test: 1000, seed, reps }
    }
}

/// Test observations per group: equal split, remainder to the first groups.
pub fn test_allocation(n_test: usize, g_count: usize) -> Vec<usize> {
    (0..g_count).map(|g| n_test / g_count + usize::from(g < n_test % g_count)).collect()
}

/// One sampled replication with its ground truth.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub train: Dataset<f64>,
    pub test: Dataset<f64>,
    pub support: Vec<usize>,
    pub group_supports: Vec<Vec<usize>>,
}

/// Draws replication `rep`; fully determined by `(spec.seed, rep)`.
pub fn sample(spec: &SimulationSpec, rep: usize) -> Result<Replicate> {
    if spec.n_g < 2 {
        return Err(MgqdaError::invalid("n_g must be at least 2"));
    }
    let ms = model_spec(spec.model_id, spec.p)?;
    let covs = ms.covariances(spec.seed, rep)?;
    let (support, group_supports) = true_supports(ms.means.view(), &covs);
    let labels: Vec<String> = (1..=ms.g_count).map(|g| g.to_string()).collect();
    let test_counts = test_allocation(spec.n_test, ms.g_count);
    let mut train_blocks = Vec::new();
    let mut test_blocks = Vec::new();
    let (mut train_groups, mut test_groups) = (Vec::new(), Vec::new());
    for g in 0..ms.g_count {
        let mean = ms.means.row(g);
        let mut rng = stream_rng(spec.seed, rep, g, PURPOSE_TRAIN);
        train_blocks.push(sample_gaussian(mean, &covs[g], spec.n_g, &mut rng)?);
        train_groups.extend(std::iter::repeat_n(g, spec.n_g));
        let mut rng = stream_rng(spec.seed, rep, g, PURPOSE_TEST);
        test_blocks.push(sample_gaussian(mean, &covs[g], test_counts[g], &mut rng)?);
        test_groups.extend(std::iter::repeat_n(g, test_counts[g]));
    }
    let stack = |blocks: &[Array2<f64>]| {
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| MgqdaError::invalid(e.to_string()))
    };
    Ok(Replicate {
        train: Dataset::new(stack(&train_blocks)?, train_groups, labels.clone(), None)?,
        test: Dataset::new(stack(&test_blocks)?, test_groups, labels, None)?,
        support,
        group_supports,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub error_rate: f64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub tpr_g: Vec<Option<f64>>,
    pub fpr_g: Vec<Option<f64>>,
}

/// `(|Ŝ∩S|/|S|, |Ŝ∖S|/(p−|S|))`; each is `None` when its denominator is 0.
/// Both index lists must be sorted.
pub fn selection_rates(selected: &[usize], truth: &[usize], p: usize) -> (Option<f64>, Option<f64>) {
    let hits = selected.iter().filter(|j| truth.binary_search(j).is_ok()).count();
    let false_hits = selected.len() - hits;
    let tpr = (!truth.is_empty()).then(|| hits as f64 / truth.len() as f64);
    let fpr = (truth.len() < p).then(|| false_hits as f64 / (p - truth.len()) as f64);
    (tpr, fpr)
}

/// Test error and selection rates of a fitted model against the truth.
pub fn evaluate<T: Scalar>(
    model: &FittedModel<T>,
    test: &Dataset<T>,
    support: &[usize],
    group_supports: &[Vec<usize>],
) -> Result<Metrics> {
    let pred = model.predict(test.x())?;
    let wrong = pred.iter().zip(test.groups()).filter(|(a, b)| a != b).count();
    let p = model.p_full();
    let (tpr, fpr) = selection_rates(model.support(), support, p);
    let (tpr_g, fpr_g) = model
        .group_supports()
        .iter()
        .zip(group_supports)
        .map(|(sel, truth)| selection_rates(sel, truth, p))
        .unzip();
    Ok(Metrics { error_rate: wrong as f64 / test.n().max(1) as f64, tpr, fpr, tpr_g, fpr_g })
}

#[derive(Debug, Clone)]
pub enum Tuning {
    Fixed { lambda: f64, alpha: f64 },
    Cv(CvConfig<f64>),
}

impl Tuning {
    pub fn alpha(&self) -> f64 {
        match self {
            Tuning::Fixed { alpha, .. } => *alpha,
            Tuning::Cv(cfg) => cfg.alpha,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub sim: SimulationSpec,
    pub tuning: Tuning,
    /// Adds a diagonal-LDA `baseline_error` column.
    pub baseline: bool,
    /// Records wall-clock fit time; off by default so output is reproducible
    /// byte for byte.
    pub timing: bool,
}

#[derive(Debug, Clone)]
pub struct BenchmarkRow {
    pub rep: usize,
    pub seed: u64,
    pub model_id: u8,
    pub p: usize,
    pub lambda: Option<f64>,
    pub alpha: f64,
    pub metrics: Option<Metrics>,
    pub fit_ms: Option<f64>,
    pub status: String,
    pub baseline_error: Option<f64>,
}

/// Samples, fits and evaluates one replication. Failures are reported in
/// the row's status rather than returned.
pub fn run_replicate(cfg: &BenchmarkConfig, rep: usize) -> BenchmarkRow {
    let mut row = BenchmarkRow {
        rep,
        seed: cfg.sim.seed,
        model_id: cfg.sim.model_id,
        p: cfg.sim.p,
        lambda: None,
        alpha: cfg.tuning.alpha(),
        metrics: None,
        fit_ms: None,
        status: String::new(),
        baseline_error: None,
    };
    match replicate_inner(cfg, rep, &mut row) {
        Ok(status) => row.status = status.into(),
        Err(e) => {
            log::warn!("replication {rep} failed: {e}");
            row.status = format!("error: {e}");
        }
    }
    row
}

fn replicate_inner(cfg: &BenchmarkConfig, rep: usize, row: &mut BenchmarkRow) -> Result<&'static str> {
    let data = sample(&cfg.sim, rep)?;
    let start = Instant::now();
    let (model, converged) = match &cfg.tuning {
        Tuning::Fixed { lambda, alpha } => {
            let stats = compute_group_stats(&data.train, CovMode::default())?;
            let pen = PenaltySpec::new(*lambda, *alpha);
            let (coef, report) = fit(&stats, &pen, None)?;
            row.lambda = Some(*lambda);
            (build_model(&coef, &stats, &pen)?, report.converged)
        }
        Tuning::Cv(cv) => {
            let res = cross_validate(&data.train, cv)?;
            row.lambda = Some(res.lambda());
            let converged = res.report.converged;
            (res.model, converged)
        }
    };
    if cfg.timing {
        row.fit_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    }
    row.metrics = Some(evaluate(&model, &data.test, &data.support, &data.group_supports)?);
    if cfg.baseline {
        let base = DiagonalLda::fit(&data.train)?;
        let pred = base.predict(data.test.x())?;
        let wrong = pred.iter().zip(data.test.groups()).filter(|(a, b)| a != b).count();
        row.baseline_error = Some(wrong as f64 / data.test.n().max(1) as f64);
    }
    Ok(if converged { "ok" } else { "not_converged" })
}

/// Runs every replication (in parallel) and returns rows ordered by rep.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    model_spec(cfg.sim.model_id, cfg.sim.p)?;
    Ok((0..cfg.sim.reps).into_par_iter().map(|rep| run_replicate(cfg, rep)).collect())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the replication table with header
/// `rep,seed,model_id,p,lambda,alpha,error_rate,tpr,fpr,tpr_g1..,fpr_g1..,fit_ms,status`
/// (plus `baseline_error` when requested). Missing values are empty.
pub fn write_benchmark_csv<W: Write>(writer: W, rows: &[BenchmarkRow], g_count: usize, baseline: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["rep", "seed", "model_id", "p", "lambda", "alpha", "error_rate", "tpr", "fpr"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=g_count).map(|g| format!("tpr_g{g}")));
    header.extend((1..=g_count).map(|g| format!("fpr_g{g}")));
    header.push("fit_ms".into());
    header.push("status".into());
    if baseline {
        header.push("baseline_error".into());
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.rep.to_string(), r.seed.to_string(), r.model_id.to_string(), r.p.to_string(), opt(r.lambda), r.alpha.to_string()];
        match &r.metrics {
            Some(m) => {
                rec.push(m.error_rate.to_string());
                rec.push(opt(m.tpr));
                rec.push(opt(m.fpr));
                rec.extend(m.tpr_g.iter().map(|v| opt(*v)));
                rec.extend(m.fpr_g.iter().map(|v| opt(*v)));
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 3 + 2 * g_count)),
        }
        rec.push(r.fit_ms.map(|t| format!("{t:.3}")).unwrap_or_default());
        rec.push(r.status.clone());
        if baseline {
            rec.push(opt(r.baseline_error));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Description of how a benchmark was generated, for a sidecar file.
pub fn benchmark_metadata(cfg: &BenchmarkConfig) -> serde_json::Value {
    let tuning = match &cfg.tuning {
        Tuning::Fixed { lambda, alpha } => serde_json::json!({ "kind": "fixed", "lambda": lambda, "alpha": alpha }),
        Tuning::Cv(c) => serde_json::json!({
            "kind": "cv",
            "folds": c.folds,
            "n_lambda": c.n_lambda,
            "ratio": c.ratio,
            "alpha": c.alpha,
            "stratified": c.stratified,
            "seed": c.seed,
        }),
    };
    serde_json::json!({
        "simulation": cfg.sim,
        "tuning": tuning,
        "rng": RNG_NAME,
        "streams": { "covariance": PURPOSE_COVARIANCE, "train": PURPOSE_TRAIN, "test": PURPOSE_TEST },
        "crate_version": env!("CARGO_PKG_VERSION"),
    })
}
