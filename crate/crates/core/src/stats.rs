//! Labeled data and the per-group sample moments the estimator is built on.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MgqdaError, Result};
use crate::linalg::SymMatrix;
use crate::scalar::Scalar;

/// Observations (rows of `x`) with group memberships `0..G`.
///
/// `labels[g]` is the display name of group `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    x: Array2<T>,
    groups: Vec<usize>,
    labels: Vec<String>,
    feature_names: Option<Vec<String>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        x: Array2<T>,
        groups: Vec<usize>,
        labels: Vec<String>,
        feature_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if x.nrows() != groups.len() {
            return Err(MgqdaError::invalid(format!(
                "{} rows but {} group assignments",
                x.nrows(),
                groups.len()
            )));
        }
        if let Some(&bad) = groups.iter().find(|&&g| g >= labels.len()) {
            return Err(MgqdaError::invalid(format!(
                "group index {bad} out of range for {} labels",
                labels.len()
            )));
        }
        if let Some(names) = &feature_names {
            if names.len() != x.ncols() {
                return Err(MgqdaError::invalid(format!(
                    "{} feature names for {} columns",
                    names.len(),
                    x.ncols()
                )));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MgqdaError::invalid("feature matrix contains non-finite values"));
        }
        Ok(Dataset { x, groups, labels, feature_names })
    }

    /// Maps raw labels to groups in order of first appearance.
    pub fn from_raw_labels<S: AsRef<str>>(
        x: Array2<T>,
        raw: &[S],
        feature_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let mut labels: Vec<String> = Vec::new();
        let groups = raw
            .iter()
            .map(|l| {
                let l = l.as_ref();
                match labels.iter().position(|k| k == l) {
                    Some(g) => g,
                    None => {
                        labels.push(l.to_string());
                        labels.len() - 1
                    }
                }
            })
            .collect();
        Self::new(x, groups, labels, feature_names)
    }

    pub fn x(&self) -> ArrayView2<'_, T> {
        self.x.view()
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn g_count(&self) -> usize {
        self.labels.len()
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.g_count()];
        for &g in &self.groups {
            counts[g] += 1;
        }
        counts
    }

    /// Rows `idx` in the given order, keeping the label set.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Dataset {
            x: self.x.select(Axis(0), idx),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
            labels: self.labels.clone(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Columns `cols` in the given order.
    pub fn select_features(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.p()) {
            return Err(MgqdaError::invalid(format!("feature index {bad} out of range")));
        }
        Ok(Dataset {
            x: self.x.select(Axis(1), cols),
            groups: self.groups.clone(),
            labels: self.labels.clone(),
            feature_names: self
                .feature_names
                .as_ref()
                .map(|n| cols.iter().map(|&c| n[c].clone()).collect()),
        })
    }
}

/// Covariance divisor: `Sample` uses `n_g − 1`, `Ml` uses `n_g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovMode {
    Sample,
    #[default]
    Ml,
}

impl std::str::FromStr for CovMode {
    type Err = MgqdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(CovMode::Sample),
            "ml" => Ok(CovMode::Ml),
            other => Err(MgqdaError::invalid(format!("unknown covariance mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for CovMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CovMode::Sample => "sample",
            CovMode::Ml => "ml",
        })
    }
}

/// Group counts, means, covariances, between-group covariance and its
/// low-rank factor `Γ̂` (p × (G−1), `Γ̂Γ̂ᵀ = Σ̂_B`).
#[derive(Debug, Clone)]
pub struct GroupStats<T> {
    pub g_count: usize,
    pub n: usize,
    pub counts: Vec<usize>,
    pub priors: Array1<T>,
    /// G × p, row g is the mean of group g.
    pub means: Array2<T>,
    pub grand_mean: Array1<T>,
    pub covariances: Vec<SymMatrix<T>>,
    pub between: SymMatrix<T>,
    pub gamma: Array2<T>,
    pub cov_mode: CovMode,
}

impl<T: Scalar> GroupStats<T> {
    pub fn p(&self) -> usize {
        self.grand_mean.len()
    }

    pub fn mean(&self, g: usize) -> ArrayView1<'_, T> {
        self.means.row(g)
    }
}

pub fn compute_group_stats<T: Scalar>(data: &Dataset<T>, cov_mode: CovMode) -> Result<GroupStats<T>> {
    let g_count = data.g_count();
    if g_count < 2 {
        return Err(MgqdaError::invalid("at least two groups are required"));
    }
    let counts = data.group_counts();
    if let Some((group, &count)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(MgqdaError::InsufficientGroupSize { group, count });
    }
    let n = data.n();
    let p = data.p();
    let x = data.x();

    let members: Vec<Vec<usize>> = (0..g_count)
        .map(|g| (0..n).filter(|&i| data.groups()[i] == g).collect())
        .collect();

    let mut means = Array2::zeros((g_count, p));
    let mut covariances = Vec::with_capacity(g_count);
    for (g, rows) in members.iter().enumerate() {
        let xg = x.select(Axis(0), rows);
        let mean = xg.sum_axis(Axis(0)) / T::of(rows.len() as f64);
        let centered = &xg - &mean.view().insert_axis(Axis(0));
        let divisor = match cov_mode {
            CovMode::Sample => rows.len() - 1,
            CovMode::Ml => rows.len(),
        };
        let cov = centered.t().dot(&centered) / T::of(divisor as f64);
        covariances.push(SymMatrix::from_lower(cov)?);
        means.row_mut(g).assign(&mean);
    }

    let nf = T::of(n as f64);
    let priors = Array1::from_iter(counts.iter().map(|&c| T::of(c as f64) / nf));
    let mut grand_mean = Array1::zeros(p);
    for g in 0..g_count {
        grand_mean.scaled_add(priors[g], &means.row(g));
    }

    let mut between = Array2::zeros((p, p));
    for g in 0..g_count {
        let d = &means.row(g) - &grand_mean;
        let col = d.view().insert_axis(Axis(1));
        between.scaled_add(priors[g], &col.dot(&col.t()));
    }

    let gamma = compute_gamma(&counts, means.view());
    Ok(GroupStats {
        g_count,
        n,
        counts,
        priors,
        means,
        grand_mean,
        covariances,
        between: SymMatrix::from_lower(between)?,
        gamma,
        cov_mode,
    })
}

/// Helmert-type contrast factor of the between-group covariance.
///
/// Column r (0-based) is
/// `√n_{r+1} · Σ_{i≤r} n_i (X̄_i − X̄_{r+1}) / √(n · Σ_{i≤r} n_i · Σ_{i≤r+1} n_i)`.
pub fn compute_gamma<T: Scalar>(counts: &[usize], means: ArrayView2<'_, T>) -> Array2<T> {
    let g_count = counts.len();
    assert!(g_count >= 2, "gamma needs at least two groups");
    assert_eq!(means.nrows(), g_count);
    let p = means.ncols();
    let n: usize = counts.iter().sum();
    let mut gamma = Array2::zeros((p, g_count - 1));
    let mut cum = 0usize;
    for r in 0..g_count - 1 {
        cum += counts[r];
        let next = r + 1;
        let mut col = Array1::<T>::zeros(p);
        for (i, &c) in counts[..=r].iter().enumerate() {
            let diff = &means.row(i) - &means.row(next);
            col.scaled_add(T::of(c as f64), &diff);
        }
        let num_scale = T::of(counts[next] as f64).sqrt();
        let denom = (T::of(n as f64) * T::of(cum as f64) * T::of((cum + counts[next]) as f64)).sqrt();
        gamma.slice_mut(s![.., r]).assign(&(col * (num_scale / denom)));
    }
    gamma
}

/// `M_g = Σ̂_g + Γ̂Γ̂ᵀ` for each group.
pub fn gram_products<T: Scalar>(stats: &GroupStats<T>) -> Vec<SymMatrix<T>> {
    let ggt = stats.gamma.dot(&stats.gamma.t());
    stats
        .covariances
        .iter()
        .map(|c| SymMatrix::from_lower(&c.view() + &ggt).expect("square"))
        .collect()
}
