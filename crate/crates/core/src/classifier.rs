//! Projected quadratic discriminant rule built from a sparse Ω̂.
//!
//! Everything is stored restricted to the support S of Ω̂. Off-support rows of
//! Ω̂ are exactly zero, so `Ω̂ᵀ(x − X̄_g) = Ω̂_Sᵀ(x_S − X̄_{g,S})` and the
//! restricted model scores identically to the full p-dimensional one.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{MgqdaError, Result};
use crate::linalg::{sym_eigen, SymMatrix};
use crate::scalar::Scalar;
use crate::solver::{extract_support, Coefficients, PenaltySpec};
use crate::stats::{CovMode, GroupStats};

/// Per-group projected covariance `A_g = Ω̂_SᵀΣ̂_{g,SS}Ω̂_S` with its
/// (pseudo)inverse and log-(pseudo)determinant.
#[derive(Debug, Clone)]
pub struct ProjectedCov<T> {
    pub a: SymMatrix<T>,
    pub a_pinv: SymMatrix<T>,
    pub log_pdet: T,
    /// True when every eigenvalue of `A_g` clears the rank cutoff, in which
    /// case `a_pinv` is the ordinary inverse.
    pub full_rank: bool,
}

/// The stored ingredients of a fitted model, independent of any cached
/// projections. This is what gets persisted.
#[derive(Debug, Clone)]
pub struct ModelParts<T> {
    pub p_full: usize,
    pub g_count: usize,
    pub labels: Vec<String>,
    pub priors: Vec<T>,
    pub support: Vec<usize>,
    pub group_supports: Vec<Vec<usize>>,
    /// s × G(G−1).
    pub omega_s: Array2<T>,
    /// G × s.
    pub means_s: Array2<T>,
    pub cov_s: Vec<SymMatrix<T>>,
    pub alpha: T,
    pub lambda: T,
    pub cov_mode: CovMode,
    pub feature_names: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct FittedModel<T> {
    parts: ModelParts<T>,
    projected: Vec<ProjectedCov<T>>,
    /// Row g is `X̄_{g,S}ᵀΩ̂_S`.
    projected_means: Array2<T>,
    /// `log_pdet(A_g) − 2 log π̂_g`.
    offsets: Vec<T>,
}

impl<T: Scalar> FittedModel<T> {
    /// Validates the parts and computes the projected caches.
    pub fn from_parts(parts: ModelParts<T>) -> Result<Self> {
        validate_parts(&parts)?;
        let tol = T::default_rank_tol();
        let mut projected = Vec::with_capacity(parts.g_count);
        for cov in &parts.cov_s {
            let a = cov.congruence(parts.omega_s.view())?;
            let eig = sym_eigen(&a)?;
            let full_rank = eig.rank(tol) == eig.dim();
            projected.push(ProjectedCov {
                a_pinv: eig.pseudo_inverse(tol),
                log_pdet: eig.log_pdet(tol),
                full_rank,
                a,
            });
        }
        let projected_means = parts.means_s.dot(&parts.omega_s);
        let two = T::of(2.0);
        let offsets = projected
            .iter()
            .zip(&parts.priors)
            .map(|(pc, &pi)| pc.log_pdet - two * pi.ln())
            .collect();
        Ok(FittedModel { parts, projected, projected_means, offsets })
    }

    pub fn parts(&self) -> &ModelParts<T> {
        &self.parts
    }

    pub fn into_parts(self) -> ModelParts<T> {
        self.parts
    }

    pub fn p_full(&self) -> usize {
        self.parts.p_full
    }

    pub fn g_count(&self) -> usize {
        self.parts.g_count
    }

    pub fn labels(&self) -> &[String] {
        &self.parts.labels
    }

    pub fn priors(&self) -> &[T] {
        &self.parts.priors
    }

    pub fn support(&self) -> &[usize] {
        &self.parts.support
    }

    pub fn group_supports(&self) -> &[Vec<usize>] {
        &self.parts.group_supports
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.parts.feature_names.as_deref()
    }

    pub fn projected(&self) -> &[ProjectedCov<T>] {
        &self.projected
    }

    /// Empty support: every discriminant term vanishes and only the priors
    /// decide.
    pub fn is_prior_only(&self) -> bool {
        self.parts.support.is_empty()
    }

    /// Replaces the labels (one per group, distinct).
    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        check_labels(&labels, self.parts.g_count)?;
        self.parts.labels = labels;
        Ok(self)
    }

    /// Attaches names for the p_full input columns.
    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.parts.p_full {
            return Err(MgqdaError::invalid(format!("{} feature names for {} features", names.len(), self.parts.p_full)));
        }
        self.parts.feature_names = Some(names);
        Ok(self)
    }

    /// Discriminant scores for one observation; the prediction is the argmin.
    pub fn score(&self, x: ArrayView1<'_, T>) -> Result<Array1<T>> {
        let m = x.len();
        let scores = self.score_batch(x.into_shape_with_order((1, m)).map_err(|e| MgqdaError::invalid(e.to_string()))?)?;
        Ok(scores.row(0).to_owned())
    }

    /// Scores for each row of `x` (m × p_full), returned as m × G.
    pub fn score_batch(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if x.ncols() != self.parts.p_full {
            return Err(MgqdaError::invalid(format!("expected {} features, got {}", self.parts.p_full, x.ncols())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MgqdaError::invalid("non-finite value in input"));
        }
        let m = x.nrows();
        let g_count = self.parts.g_count;
        let mut out = Array2::zeros((m, g_count));
        if self.is_prior_only() {
            for (g, &off) in self.offsets.iter().enumerate() {
                out.column_mut(g).fill(off);
            }
            return Ok(out);
        }
        let proj = x.select(Axis(1), &self.parts.support).dot(&self.parts.omega_s);
        for g in 0..g_count {
            let z = &proj - &self.projected_means.row(g);
            let w = z.dot(&self.projected[g].a_pinv.view());
            let off = self.offsets[g];
            for (i, (zr, wr)) in z.outer_iter().zip(w.outer_iter()).enumerate() {
                out[[i, g]] = zr.dot(&wr) + off;
            }
        }
        Ok(out)
    }

    /// Group index per row; ties go to the smaller index.
    pub fn predict(&self, x: ArrayView2<'_, T>) -> Result<Vec<usize>> {
        let scores = self.score_batch(x)?;
        Ok(scores.outer_iter().map(|row| argmin(row)).collect())
    }

    pub fn predict_labels(&self, x: ArrayView2<'_, T>) -> Result<Vec<String>> {
        Ok(self.predict(x)?.into_iter().map(|g| self.parts.labels[g].clone()).collect())
    }
}

/// Index of the smallest entry, first one on ties.
pub fn argmin<T: Scalar>(row: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (g, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = g;
        }
    }
    best
}

/// Assembles the support-restricted rule from a fit. Labels default to
/// "1".."G"; replace them with [`FittedModel::with_labels`].
pub fn build_model<T: Scalar>(omega: &Coefficients<T>, stats: &GroupStats<T>, pen: &PenaltySpec<T>) -> Result<FittedModel<T>> {
    let p = stats.p();
    if omega.p() != p || omega.g_count() != stats.g_count {
        return Err(MgqdaError::invalid(format!(
            "coefficients are {}×{} but statistics have p = {}, G = {}",
            omega.p(),
            omega.g_count(),
            p,
            stats.g_count
        )));
    }
    let (support, group_supports) = extract_support(omega, T::zero());
    let omega_s = omega.as_array().select(Axis(0), &support);
    let means_s = stats.means.select(Axis(1), &support);
    let cov_s = stats
        .covariances
        .iter()
        .map(|c| if support.is_empty() { Ok(SymMatrix::zeros(0)) } else { c.submatrix(&support) })
        .collect::<Result<Vec<_>>>()?;
    FittedModel::from_parts(ModelParts {
        p_full: p,
        g_count: stats.g_count,
        labels: (1..=stats.g_count).map(|g| g.to_string()).collect(),
        priors: stats.priors.to_vec(),
        support,
        group_supports,
        omega_s,
        means_s,
        cov_s,
        alpha: pen.alpha,
        lambda: pen.lambda,
        cov_mode: stats.cov_mode,
        feature_names: None,
    })
}

/// Builds the rule from basis Ω̂ and from Ω̂·R and reports whether the two
/// agree on every row of `grid`.
pub fn basis_invariance_check<T: Scalar>(
    omega: &Coefficients<T>,
    stats: &GroupStats<T>,
    pen: &PenaltySpec<T>,
    r: ArrayView2<'_, T>,
    grid: ArrayView2<'_, T>,
) -> Result<bool> {
    let k = omega.as_array().ncols();
    if r.dim() != (k, k) {
        return Err(MgqdaError::invalid(format!("basis change must be {k}×{k}, got {:?}", r.dim())));
    }
    let rotated = Coefficients::from_array(omega.as_array().dot(&r), omega.g_count())?;
    let base = build_model(omega, stats, pen)?.predict(grid)?;
    let other = build_model(&rotated, stats, pen)?.predict(grid)?;
    Ok(base == other)
}

fn check_labels(labels: &[String], g_count: usize) -> Result<()> {
    if labels.len() != g_count {
        return Err(MgqdaError::invalid(format!("{} labels for {} groups", labels.len(), g_count)));
    }
    let mut sorted: Vec<&String> = labels.iter().collect();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(MgqdaError::invalid("duplicate group label"));
    }
    Ok(())
}

fn validate_parts<T: Scalar>(parts: &ModelParts<T>) -> Result<()> {
    let g = parts.g_count;
    if g < 2 {
        return Err(MgqdaError::invalid("a model needs at least two groups"));
    }
    check_labels(&parts.labels, g)?;
    if parts.priors.len() != g || parts.priors.iter().any(|&pi| !(pi > T::zero() && pi <= T::one())) {
        return Err(MgqdaError::invalid("priors must be G values in (0, 1]"));
    }
    let s = parts.support.len();
    if parts.support.windows(2).any(|w| w[0] >= w[1]) || parts.support.last().is_some_and(|&j| j >= parts.p_full) {
        return Err(MgqdaError::invalid("support must be strictly increasing indices below p"));
    }
    if parts.group_supports.len() != g || parts.group_supports.iter().flatten().any(|j| parts.support.binary_search(j).is_err()) {
        return Err(MgqdaError::invalid("group supports must be G subsets of the support"));
    }
    let k = g * (g - 1);
    if parts.omega_s.dim() != (s, k) {
        return Err(MgqdaError::invalid(format!("omega_s is {:?}, expected ({s}, {k})", parts.omega_s.dim())));
    }
    if parts.omega_s.outer_iter().any(|row| row.iter().all(|&v| v == T::zero())) {
        return Err(MgqdaError::invalid("omega_s has an all-zero row"));
    }
    if parts.means_s.dim() != (g, s) {
        return Err(MgqdaError::invalid(format!("means_s is {:?}, expected ({g}, {s})", parts.means_s.dim())));
    }
    if parts.cov_s.len() != g || parts.cov_s.iter().any(|c| c.dim() != s) {
        return Err(MgqdaError::invalid("cov_s must hold G matrices of the support dimension"));
    }
    if parts.feature_names.as_ref().is_some_and(|f| f.len() != parts.p_full) {
        return Err(MgqdaError::invalid("feature_names length differs from p"));
    }
    let finite = parts.omega_s.iter().chain(parts.means_s.iter()).all(|v| v.is_finite())
        && parts.cov_s.iter().all(|c| c.is_finite());
    if !finite {
        return Err(MgqdaError::invalid("non-finite model parameters"));
    }
    Ok(())
}
