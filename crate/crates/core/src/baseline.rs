//! Diagonal LDA reference classifier.
//!
//! `argmin_g Σ_j (x_j − X̄_{g,j})² / σ̂²_j − 2 log π̂_g` with pooled per-feature
//! variances (divisor n − G), zero variances floored at 1e−12.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::classifier::argmin;
use crate::error::{MgqdaError, Result};
use crate::scalar::Scalar;
use crate::stats::Dataset;

const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct DiagonalLda<T> {
    means: Array2<T>,
    inv_var: Array1<T>,
    prior_terms: Array1<T>,
}

impl<T: Scalar> DiagonalLda<T> {
    pub fn fit(data: &Dataset<T>) -> Result<Self> {
        let (n, p, g_count) = (data.n(), data.p(), data.g_count());
        let counts = data.group_counts();
        if g_count < 2 || counts.contains(&0) || n <= g_count {
            return Err(MgqdaError::invalid("diagonal LDA needs at least two non-empty groups and n > G"));
        }
        let x = data.x();
        let mut means = Array2::<T>::zeros((g_count, p));
        for (row, &g) in x.outer_iter().zip(data.groups()) {
            let mut m = means.row_mut(g);
            m += &row;
        }
        for (g, mut m) in means.outer_iter_mut().enumerate() {
            m /= T::of(counts[g] as f64);
        }
        let mut ss = Array1::<T>::zeros(p);
        for (row, &g) in x.outer_iter().zip(data.groups()) {
            ss.zip_mut_with(&(&row - &means.row(g)), |s, &d| *s += d * d);
        }
        let floor = T::of(VARIANCE_FLOOR);
        let denom = T::of((n - g_count) as f64);
        let inv_var = ss.mapv(|s| T::one() / (s / denom).max(floor));
        let prior_terms = counts.iter().map(|&c| T::of(-2.0 * (c as f64 / n as f64).ln())).collect();
        Ok(DiagonalLda { means, inv_var, prior_terms })
    }

    /// m × G discriminant values.
    pub fn score_batch(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if x.ncols() != self.means.ncols() {
            return Err(MgqdaError::invalid(format!("expected {} features, got {}", self.means.ncols(), x.ncols())));
        }
        let mut out = Array2::zeros((x.nrows(), self.means.nrows()));
        for (g, mean) in self.means.outer_iter().enumerate() {
            let d = &x - &mean.insert_axis(Axis(0));
            let q = (&d * &d).dot(&self.inv_var);
            out.column_mut(g).assign(&(q + self.prior_terms[g]));
        }
        Ok(out)
    }

    pub fn predict(&self, x: ArrayView2<'_, T>) -> Result<Vec<usize>> {
        Ok(self.score_batch(x)?.outer_iter().map(argmin).collect())
    }
}
