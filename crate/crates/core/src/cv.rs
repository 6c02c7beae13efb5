//! K-fold cross-validation over a warm-started λ path.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classifier::{build_model, FittedModel};
use crate::error::{MgqdaError, Result};
use crate::scalar::Scalar;
use crate::solver::{lambda_path, Coefficients, PenaltySpec, SolveReport, Solver};
use crate::stats::{compute_group_stats, CovMode, Dataset};

/// Mean errors closer than this are treated as tied.
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct CvConfig<T> {
    pub folds: usize,
    pub n_lambda: usize,
    pub ratio: T,
    pub alpha: T,
    pub stratified: bool,
    /// Shuffles observations before fold assignment; `None` keeps file order.
    pub seed: Option<u64>,
    pub cov_mode: CovMode,
    pub tol: T,
    pub max_sweeps: usize,
}

impl<T: Scalar> Default for CvConfig<T> {
    fn default() -> Self {
        let pen = PenaltySpec::<T>::default();
        CvConfig {
            folds: 5,
            n_lambda: 30,
            ratio: T::of(0.01),
            alpha: T::of(0.5),
            stratified: true,
            seed: None,
            cov_mode: CovMode::default(),
            tol: pen.tol,
            max_sweeps: pen.max_sweeps,
        }
    }
}

impl<T: Scalar> CvConfig<T> {
    fn penalty(&self) -> PenaltySpec<T> {
        PenaltySpec::new(T::zero(), self.alpha)
            .with_tol(self.tol)
            .with_max_sweeps(self.max_sweeps)
    }
}

#[derive(Debug, Clone)]
pub struct CvResult<T> {
    /// Descending λ grid.
    pub lambdas: Vec<T>,
    pub mean_errors: Vec<f64>,
    /// folds × λ validation error rates.
    pub fold_errors: Vec<Vec<f64>>,
    /// Support size of each fold fit, averaged over folds, per λ.
    pub mean_support: Vec<f64>,
    pub best_index: usize,
    pub coefficients: Coefficients<T>,
    pub report: SolveReport<T>,
    pub model: FittedModel<T>,
}

impl<T: Scalar> CvResult<T> {
    pub fn lambda(&self) -> T {
        self.lambdas[self.best_index]
    }

    /// Writes `lambda,mean_error,mean_support,fold_1..fold_K,selected`, one
    /// row per λ.
    pub fn write_report<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["lambda".to_string(), "mean_error".into(), "mean_support".into()];
        header.extend((1..=self.fold_errors.len()).map(|k| format!("fold_{k}")));
        header.push("selected".into());
        w.write_record(&header)?;
        for (l, lambda) in self.lambdas.iter().enumerate() {
            let mut row = vec![lambda.as_f64().to_string(), self.mean_errors[l].to_string(), self.mean_support[l].to_string()];
            row.extend(self.fold_errors.iter().map(|f| f[l].to_string()));
            row.push(u8::from(l == self.best_index).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Assigns each observation a fold in `0..folds`.
///
/// Stratified assignment deals each group's members round-robin, continuing
/// the rotation from group to group so fold sizes stay balanced overall.
pub fn make_folds(groups: &[usize], g_count: usize, folds: usize, stratified: bool, seed: Option<u64>) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(MgqdaError::Folds("at least 2 folds are required".into()));
    }
    let n = groups.len();
    let mut counts = vec![0usize; g_count];
    for &g in groups {
        counts[g] += 1;
    }
    if let Some((g, &m)) = counts.iter().enumerate().find(|(_, &m)| m < folds) {
        return Err(MgqdaError::Folds(format!("{folds} folds but group {g} has only {m} observation(s)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut assign = vec![0; n];
    if stratified {
        let mut next = 0;
        for g in 0..g_count {
            for &i in order.iter().filter(|&&i| groups[i] == g) {
                assign[i] = next % folds;
                next += 1;
            }
        }
    } else {
        for (rank, &i) in order.iter().enumerate() {
            assign[i] = rank % folds;
        }
    }
    for k in 0..folds {
        for g in 0..g_count {
            let train = (0..n).filter(|&i| groups[i] == g && assign[i] != k).count();
            if train < 2 {
                return Err(MgqdaError::Folds(format!(
                    "fold {} leaves {train} training observation(s) in group {g}; use fewer folds",
                    k + 1
                )));
            }
        }
    }
    Ok(assign)
}

/// Runs K-fold CV on a λ path computed from the full data, picks the λ with
/// the smallest mean validation error (ties go to the larger λ), and refits
/// on all observations.
pub fn cross_validate<T: Scalar>(data: &Dataset<T>, cfg: &CvConfig<T>) -> Result<CvResult<T>> {
    let g_count = data.g_count();
    let counts = data.group_counts();
    if cfg.stratified {
        if let Some(&min) = counts.iter().min() {
            if cfg.folds > min {
                return Err(MgqdaError::Folds(format!("{} folds exceed the smallest group size {min}", cfg.folds)));
            }
        }
    }
    let full_stats = compute_group_stats(data, cfg.cov_mode)?;
    let lambdas = lambda_path(&full_stats, cfg.alpha, cfg.n_lambda, cfg.ratio)?;
    let assign = make_folds(data.groups(), g_count, cfg.folds, cfg.stratified, cfg.seed)?;
    let base = cfg.penalty();
    base.validate()?;

    let per_fold: Vec<(Vec<f64>, Vec<usize>)> = (0..cfg.folds)
        .into_par_iter()
        .map(|k| {
            let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = (0..data.n()).partition(|&i| assign[i] != k);
            let train = data.subset(&train_idx);
            let val = data.subset(&val_idx);
            let stats = compute_group_stats(&train, cfg.cov_mode)?;
            let path = Solver::new(&stats).fit_path(&base, &lambdas)?;
            let mut errors = Vec::with_capacity(lambdas.len());
            let mut supports = Vec::with_capacity(lambdas.len());
            for (&lambda, (coef, rep)) in lambdas.iter().zip(&path) {
                let model = build_model(coef, &stats, &base.with_lambda(lambda))?;
                let pred = model.predict(val.x())?;
                let wrong = pred.iter().zip(val.groups()).filter(|(a, b)| a != b).count();
                errors.push(wrong as f64 / val.n().max(1) as f64);
                supports.push(rep.support.len());
            }
            Ok((errors, supports))
        })
        .collect::<Result<Vec<_>>>()?;

    let n_l = lambdas.len();
    let k = cfg.folds as f64;
    let mean_errors: Vec<f64> = (0..n_l).map(|l| per_fold.iter().map(|(e, _)| e[l]).sum::<f64>() / k).collect();
    let mean_support: Vec<f64> = (0..n_l)
        .map(|l| per_fold.iter().map(|(_, s)| s[l] as f64).sum::<f64>() / k)
        .collect();
    let best_index = select_index(&mean_errors);

    let stats = full_stats;
    let mut path = Solver::new(&stats).fit_path(&base, &lambdas[..=best_index])?;
    let (coefficients, report) = path.pop().expect("non-empty path");
    let model = build_model(&coefficients, &stats, &base.with_lambda(lambdas[best_index]))?
        .with_labels(data.labels().to_vec())?;
    let model = match data.feature_names() {
        Some(names) => model.with_feature_names(names.to_vec())?,
        None => model,
    };
    log::info!(
        "selected lambda {} (index {best_index}) with mean CV error {:.4}",
        lambdas[best_index].as_f64(),
        mean_errors[best_index]
    );
    Ok(CvResult {
        lambdas,
        mean_errors,
        fold_errors: per_fold.into_iter().map(|(e, _)| e).collect(),
        mean_support,
        best_index,
        coefficients,
        report,
        model,
    })
}

/// First index attaining the minimum (up to [`TIE_TOL`]); on a descending
/// grid that is the largest tied λ.
fn select_index(errors: &[f64]) -> usize {
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    errors.iter().position(|&e| e <= min + TIE_TOL).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn separated(seed: u64, n_per: usize) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups: Vec<usize> = (0..2 * n_per).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((2 * n_per, 6), |(i, j)| {
            let c = if j < 2 { if groups[i] == 0 { -10.0 } else { 10.0 } } else { 0.0 };
            c + rng.sample::<f64, _>(StandardNormal)
        });
        Dataset::new(x, groups, vec!["neg".into(), "pos".into()], None).unwrap()
    }

    #[test]
    fn stratified_folds_are_balanced() {
        let groups: Vec<usize> = (0..50).map(|i| (i * 7 % 11) % 3).collect();
        let assign = make_folds(&groups, 3, 3, true, None).unwrap();
        for g in 0..3 {
            let mut sizes = [0; 3];
            for (i, &k) in assign.iter().enumerate() {
                if groups[i] == g {
                    sizes[k] += 1;
                }
            }
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
        assert_eq!(make_folds(&groups, 3, 3, true, Some(4)).unwrap(), make_folds(&groups, 3, 3, true, Some(4)).unwrap());
    }

    #[test]
    fn impossible_folds_are_rejected() {
        let groups = vec![0, 0, 0, 1, 1, 1];
        assert!(matches!(make_folds(&groups, 2, 1, true, None), Err(MgqdaError::Folds(_))));
        assert!(make_folds(&groups, 2, 3, true, None).is_ok());
        assert!(matches!(make_folds(&groups, 2, 4, false, None), Err(MgqdaError::Folds(_))));
        assert!(matches!(make_folds(&[0, 0, 1, 1, 1], 2, 2, true, None), Err(MgqdaError::Folds(_))));
        let d = separated(1, 3);
        let cfg = CvConfig { folds: 4, ..CvConfig::default() };
        assert!(matches!(cross_validate(&d, &cfg), Err(MgqdaError::Folds(_))));
    }

    #[test]
    fn separable_data_reaches_zero_error() {
        let d = separated(2, 30);
        let cfg = CvConfig { n_lambda: 8, ratio: 0.05, ..CvConfig::default() };
        let res = cross_validate(&d, &cfg).unwrap();
        assert_eq!(res.mean_errors[res.best_index], 0.0);
        assert_eq!(res.model.labels(), d.labels());
        assert_eq!(res.model.predict(d.x()).unwrap(), d.groups());
    }

    #[test]
    fn two_point_path_gives_two_report_rows() {
        let d = separated(3, 20);
        let cfg = CvConfig { n_lambda: 2, ..CvConfig::default() };
        let res = cross_validate(&d, &cfg).unwrap();
        let mut buf = Vec::new();
        res.write_report(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("lambda,mean_error,mean_support,fold_1,"));
    }

    #[test]
    fn ties_prefer_larger_lambda() {
        assert_eq!(select_index(&[0.3, 0.1, 0.1, 0.2]), 1);
        assert_eq!(select_index(&[0.1, 0.1]), 0);
        assert_eq!(select_index(&[0.5, 0.2 + 1e-15, 0.2]), 1);
    }

    #[test]
    fn repeated_runs_agree() {
        let d = separated(4, 25);
        let cfg = CvConfig { n_lambda: 6, seed: Some(9), ..CvConfig::default() };
        let a = cross_validate(&d, &cfg).unwrap();
        let b = cross_validate(&d, &cfg).unwrap();
        assert_eq!(a.mean_errors, b.mean_errors);
        assert_eq!(a.coefficients.as_array(), b.coefficients.as_array());
    }
}
