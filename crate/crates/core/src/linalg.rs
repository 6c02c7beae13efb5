//! Dense symmetric linear algebra: eigendecomposition, pseudo-inverse,
//! pseudo-determinant and PSD square-root factors.
//!
//! The eigensolver is a Householder tridiagonalization followed by the
//! implicit QL iteration (the EISPACK `tred2`/`tql2` pair, by way of JAMA).

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{MgqdaError, Result};
use crate::scalar::Scalar;

/// Square symmetric matrix. Symmetry is exact: the lower triangle is the
/// source of truth and is mirrored onto the upper one at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix<T> {
    data: Array2<T>,
}

impl<T: Scalar> SymMatrix<T> {
    /// Builds from a square array, reflecting the lower triangle.
    pub fn from_lower(mut data: Array2<T>) -> Result<Self> {
        let (r, c) = data.dim();
        if r != c {
            return Err(MgqdaError::invalid(format!("matrix is {r}x{c}, expected square")));
        }
        if r == 0 {
            return Err(MgqdaError::invalid("matrix dimension must be at least 1"));
        }
        for i in 0..r {
            for j in 0..i {
                data[[j, i]] = data[[i, j]];
            }
        }
        Ok(SymMatrix { data })
    }

    /// Builds from the lower triangle stored row-major: (0,0), (1,0), (1,1), (2,0), ...
    pub fn from_packed_lower(dim: usize, packed: &[T]) -> Result<Self> {
        if packed.len() != dim * (dim + 1) / 2 {
            return Err(MgqdaError::invalid(format!(
                "packed lower triangle has {} entries, expected {}",
                packed.len(),
                dim * (dim + 1) / 2
            )));
        }
        let mut data = Array2::zeros((dim, dim));
        let mut k = 0;
        for i in 0..dim {
            for j in 0..=i {
                data[[i, j]] = packed[k];
                k += 1;
            }
        }
        Self::from_lower(data)
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix { data: Array2::zeros((dim, dim)) }
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix { data: Array2::eye(dim) }
    }

    pub fn from_diag(diag: &[T]) -> Self {
        SymMatrix { data: Array2::from_diag(&Array1::from(diag.to_vec())) }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, T> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<T> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[[i, j]]
    }

    pub fn packed_lower(&self) -> Vec<T> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                out.push(self.data[[i, j]]);
            }
        }
        out
    }

    /// Principal submatrix on `idx` (in the given order).
    pub fn submatrix(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(MgqdaError::invalid("empty index set for submatrix"));
        }
        let sub = self.data.select(Axis(0), idx).select(Axis(1), idx);
        Ok(SymMatrix { data: sub })
    }

    /// `Bᵀ A B` for a rectangular `B`.
    pub fn congruence(&self, b: ArrayView2<'_, T>) -> Result<Self> {
        if b.nrows() != self.dim() {
            return Err(MgqdaError::invalid(format!(
                "basis has {} rows, matrix has dimension {}",
                b.nrows(),
                self.dim()
            )));
        }
        let prod = b.t().dot(&self.data.dot(&b));
        SymMatrix::from_lower(prod)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn frobenius_norm<T: Scalar>(a: ArrayView2<'_, T>) -> T {
    a.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// Eigenpairs of a symmetric matrix; `values` descending, `vectors` columns
/// orthonormal and aligned with `values`.
#[derive(Debug, Clone)]
pub struct EigenDecomposition<T> {
    pub values: Array1<T>,
    pub vectors: Array2<T>,
}

impl<T: Scalar> EigenDecomposition<T> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn max_value(&self) -> T {
        self.values.first().copied().unwrap_or_else(T::zero)
    }

    pub fn min_value(&self) -> T {
        self.values.last().copied().unwrap_or_else(T::zero)
    }

    /// Spectral cutoff `factor · dim · λ_max`; eigenvalues at or below it
    /// are treated as zero.
    pub fn cutoff(&self, rank_tol_factor: T) -> T {
        let lmax = self.max_value().max(T::zero());
        rank_tol_factor * T::of(self.dim() as f64) * lmax
    }

    pub fn rank(&self, rank_tol_factor: T) -> usize {
        let tau = self.cutoff(rank_tol_factor);
        self.values.iter().filter(|&&v| v > tau).count()
    }

    pub fn reconstruct(&self) -> Array2<T> {
        let scaled = &self.vectors * &self.values.view().insert_axis(Axis(0));
        scaled.dot(&self.vectors.t())
    }

    pub fn pseudo_inverse(&self, rank_tol_factor: T) -> SymMatrix<T> {
        let tau = self.cutoff(rank_tol_factor);
        let inv = self.values.mapv(|v| if v > tau { T::one() / v } else { T::zero() });
        let scaled = &self.vectors * &inv.view().insert_axis(Axis(0));
        let data = scaled.dot(&self.vectors.t());
        SymMatrix::from_lower(data).expect("square by construction")
    }

    /// Log of the product of the eigenvalues above the cutoff (0 when none are).
    pub fn log_pdet(&self, rank_tol_factor: T) -> T {
        let tau = self.cutoff(rank_tol_factor);
        self.values.iter().filter(|&&v| v > tau).map(|v| v.ln()).sum()
    }
}

/// Symmetric eigendecomposition, eigenvalues sorted descending.
pub fn sym_eigen<T: Scalar>(a: &SymMatrix<T>) -> Result<EigenDecomposition<T>> {
    if !a.is_finite() {
        return Err(MgqdaError::invalid("matrix has non-finite entries"));
    }
    let n = a.dim();
    let mut vectors = a.data.clone();
    let mut values = Array1::zeros(n);
    let mut work = vec![T::zero(); n];
    if n == 1 {
        values[0] = vectors[[0, 0]];
        vectors[[0, 0]] = T::one();
    } else {
        tridiagonalize(&mut values, &mut vectors, &mut work);
        tridiagonal_ql(&mut values, &mut vectors, &mut work)?;
    }
    sort_descending(&mut values, &mut vectors);
    Ok(EigenDecomposition { values, vectors })
}

/// Moore–Penrose pseudo-inverse of a PSD matrix via its eigendecomposition.
pub fn pseudo_inverse<T: Scalar>(a: &SymMatrix<T>, rank_tol_factor: T) -> Result<SymMatrix<T>> {
    Ok(sym_eigen(a)?.pseudo_inverse(rank_tol_factor))
}

/// Log pseudo-determinant: sum of logs of the eigenvalues above the cutoff.
pub fn pseudo_det<T: Scalar>(a: &SymMatrix<T>, rank_tol_factor: T) -> Result<T> {
    Ok(sym_eigen(a)?.log_pdet(rank_tol_factor))
}

/// Square-root factor `L = V diag(√λ⁺)` with `L Lᵀ = A`. Singular inputs are
/// accepted; clearly indefinite ones are rejected.
pub fn psd_factor<T: Scalar>(a: &SymMatrix<T>) -> Result<Array2<T>> {
    let eig = sym_eigen(a)?;
    let lmax = eig.max_value();
    let lmin = eig.min_value();
    if lmin < -T::of(1e-8) * lmax.abs() || (lmax < T::zero()) {
        return Err(MgqdaError::NotPsd { min_eigenvalue: lmin.as_f64() });
    }
    let roots = eig.values.mapv(|v| v.max(T::zero()).sqrt());
    Ok(&eig.vectors * &roots.view().insert_axis(Axis(0)))
}

fn sort_descending<T: Scalar>(values: &mut Array1<T>, vectors: &mut Array2<T>) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap_or(std::cmp::Ordering::Equal));
    let sorted_vals = Array1::from_iter(order.iter().map(|&i| values[i]));
    let sorted_vecs = vectors.select(Axis(1), &order);
    *values = sorted_vals;
    *vectors = sorted_vecs;
}

// Householder reduction to tridiagonal form (tred2).
#[allow(clippy::needless_range_loop)]
fn tridiagonalize<T: Scalar>(d: &mut Array1<T>, v: &mut Array2<T>, e: &mut [T]) {
    let n = d.len();
    let zero = T::zero();
    for j in 0..n {
        d[j] = v[[n - 1, j]];
    }
    for i in (1..n).rev() {
        let mut scale = zero;
        let mut h = zero;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == zero {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[[i - 1, j]];
                v[[i, j]] = zero;
                v[[j, i]] = zero;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > zero {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for j in 0..i {
                e[j] = zero;
            }
            for j in 0..i {
                f = d[j];
                v[[j, i]] = f;
                g = e[j] + v[[j, j]] * f;
                for k in (j + 1)..i {
                    g += v[[k, j]] * d[k];
                    e[k] += v[[k, j]] * f;
                }
                e[j] = g;
            }
            f = zero;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    let cur = v[[k, j]];
                    v[[k, j]] = cur - (f * e[k] + g * d[k]);
                }
                d[j] = v[[i - 1, j]];
                v[[i, j]] = zero;
            }
        }
        d[i] = h;
    }
    for i in 0..(n - 1) {
        v[[n - 1, i]] = v[[i, i]];
        v[[i, i]] = T::one();
        let h = d[i + 1];
        if h != zero {
            for k in 0..=i {
                d[k] = v[[k, i + 1]] / h;
            }
            for j in 0..=i {
                let mut g = zero;
                for k in 0..=i {
                    g += v[[k, i + 1]] * v[[k, j]];
                }
                for k in 0..=i {
                    let cur = v[[k, j]];
                    v[[k, j]] = cur - g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[[k, i + 1]] = zero;
        }
    }
    for j in 0..n {
        d[j] = v[[n - 1, j]];
        v[[n - 1, j]] = zero;
    }
    v[[n - 1, n - 1]] = T::one();
    e[0] = zero;
}

// Implicit QL on the tridiagonal form (tql2).
#[allow(clippy::many_single_char_names)]
fn tridiagonal_ql<T: Scalar>(d: &mut Array1<T>, v: &mut Array2<T>, e: &mut [T]) -> Result<()> {
    let n = d.len();
    let zero = T::zero();
    let one = T::one();
    let two = T::of(2.0);
    let eps = T::epsilon();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = zero;

    let mut f = zero;
    let mut tst1 = zero;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m == n {
            m = n - 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 60 {
                    return Err(MgqdaError::NoConvergence);
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(one);
                if p < zero {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for i in (l + 2)..n {
                    d[i] -= h;
                }
                f += h;

                p = d[m];
                let mut c = one;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = zero;
                let mut s2 = zero;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[[k, i + 1]];
                        v[[k, i + 1]] = s * v[[k, i]] + c * h;
                        v[[k, i]] = c * v[[k, i]] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = zero;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> SymMatrix<f64> {
        let b = Array2::from_shape_fn((n, rank), |_| rng.random_range(-1.0..1.0));
        SymMatrix::from_lower(b.dot(&b.t())).unwrap()
    }

    // Determinant by partial-pivot Gaussian elimination, for cross-checking pdet.
    fn det_by_elimination(a: &Array2<f64>) -> f64 {
        let mut m = a.clone();
        let n = m.nrows();
        let mut det = 1.0;
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| m[[i, col]].abs().partial_cmp(&m[[j, col]].abs()).unwrap())
                .unwrap();
            if piv != col {
                for k in 0..n {
                    m.swap([col, k], [piv, k]);
                }
                det = -det;
            }
            let d = m[[col, col]];
            det *= d;
            for i in (col + 1)..n {
                let f = m[[i, col]] / d;
                for k in col..n {
                    m[[i, k]] -= f * m[[col, k]];
                }
            }
        }
        det
    }

    #[test]
    fn diagonal_input() {
        let a = SymMatrix::<f64>::from_diag(&[3.0, 1.0]);
        let e = sym_eigen(&a).unwrap();
        assert_eq!(e.values.to_vec(), vec![3.0, 1.0]);
        assert_abs_diff_eq!(e.vectors[[0, 0]].abs(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.vectors[[1, 1]].abs(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn identity_and_two_by_two() {
        let e = sym_eigen(&SymMatrix::<f64>::identity(4)).unwrap();
        for v in e.values.iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-15);
        }
        let a = SymMatrix::<f64>::from_lower(array![[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let e = sym_eigen(&a).unwrap();
        assert_abs_diff_eq!(e.values[0], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e.values[1], 1.0, epsilon = 1e-14);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(e.vectors[[0, 0]].abs(), s, epsilon = 1e-14);
        assert_abs_diff_eq!(e.vectors[[1, 0]], e.vectors[[0, 0]], epsilon = 1e-14);
        assert_abs_diff_eq!(e.vectors[[1, 1]], -e.vectors[[0, 1]], epsilon = 1e-14);
    }

    #[test]
    fn rejects_non_finite() {
        let a = SymMatrix::from_lower(array![[1.0, 0.0], [f64::NAN, 1.0]]).unwrap();
        assert!(matches!(sym_eigen(&a), Err(MgqdaError::InvalidInput(_))));
    }

    #[test]
    fn reconstruction_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 2, 3, 7, 20, 45] {
            let raw = Array2::from_shape_fn((n, n), |_| rng.random_range(-5.0..5.0));
            let a = SymMatrix::from_lower(raw).unwrap();
            let e = sym_eigen(&a).unwrap();
            let err = frobenius_norm((&e.reconstruct() - &a.view()).view());
            assert!(err <= 1e-10 * (1.0 + frobenius_norm(a.view())), "n={n} err={err}");
            let vtv = e.vectors.t().dot(&e.vectors) - Array2::<f64>::eye(n);
            assert!(frobenius_norm(vtv.view()) <= 1e-10 * n as f64);
            for w in e.values.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn pseudo_inverse_examples() {
        let p = pseudo_inverse(&SymMatrix::from_diag(&[2.0, 0.0]), 1e-12).unwrap();
        assert_abs_diff_eq!(p.get(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(1, 1), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(0, 1), 0.0, epsilon = 1e-15);

        let z = pseudo_inverse(&SymMatrix::<f64>::zeros(3), 1e-12).unwrap();
        assert!(z.view().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pseudo_inverse_matches_inverse_for_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_psd(&mut rng, 6, 10);
        let inv = pseudo_inverse(&a, 1e-12).unwrap();
        // A · A⁺ should be the identity; this is the linear-solve residual.
        let prod = a.view().dot(&inv.view());
        let err = frobenius_norm((&prod - &Array2::<f64>::eye(6)).view());
        assert!(err < 1e-8, "err={err}");
    }

    #[test]
    fn moore_penrose_identities_on_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (n, r) in [(5, 2), (8, 8), (10, 3), (12, 1)] {
            let a = random_psd(&mut rng, n, r);
            let ap = pseudo_inverse(&a, 1e-12).unwrap();
            let (a, ap) = (a.view(), ap.view());
            let scale = 1.0 + frobenius_norm(a);
            let pscale = 1.0 + frobenius_norm(ap);
            let e1 = frobenius_norm((&a.dot(&ap).dot(&a) - &a).view());
            let e2 = frobenius_norm((&ap.dot(&a).dot(&ap) - &ap).view());
            let aap = a.dot(&ap);
            let apa = ap.dot(&a);
            let e3 = frobenius_norm((&aap - &aap.t()).view());
            let e4 = frobenius_norm((&apa - &apa.t()).view());
            assert!(e1 <= 1e-8 * scale, "AA+A {e1}");
            assert!(e2 <= 1e-8 * pscale, "A+AA+ {e2}");
            assert!(e3 <= 1e-8 && e4 <= 1e-8, "symmetry {e3} {e4}");
        }
    }

    #[test]
    fn pseudo_det_examples() {
        let v = pseudo_det(&SymMatrix::from_diag(&[2.0, 3.0, 0.0]), 1e-12).unwrap();
        assert_abs_diff_eq!(v, 6.0f64.ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(pseudo_det(&SymMatrix::<f64>::identity(5), 1e-12).unwrap(), 0.0);
        // τ = 1e-12 · 2 · 2 = 4e-12, so 1e-30 is dropped.
        let v = pseudo_det(&SymMatrix::from_diag(&[2.0, 1e-30]), 1e-12).unwrap();
        assert_abs_diff_eq!(v, 2.0f64.ln(), epsilon = 1e-14);
        assert_eq!(pseudo_det(&SymMatrix::<f64>::zeros(2), 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn pdet_matches_elimination_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [2, 4, 9] {
            let a = random_psd(&mut rng, n, n + 3);
            let det = det_by_elimination(&a.view().to_owned());
            let pdet = pseudo_det(&a, 1e-12).unwrap().exp();
            assert!((pdet - det).abs() <= 1e-8 * det.abs(), "{pdet} vs {det}");
        }
    }

    #[test]
    fn psd_factor_examples() {
        let l = psd_factor(&SymMatrix::<f64>::identity(4)).unwrap();
        let g = l.dot(&l.t());
        assert!(frobenius_norm((&g - &Array2::<f64>::eye(4)).view()) < 1e-12);

        let l = psd_factor(&SymMatrix::from_diag(&[4.0, 9.0])).unwrap();
        let g = l.dot(&l.t());
        assert_abs_diff_eq!(g[[0, 0]], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[[1, 1]], 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[[0, 1]], 0.0, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = random_psd(&mut rng, 5, 7);
        let l = psd_factor(&w).unwrap();
        let err = frobenius_norm((&l.dot(&l.t()) - &w.view()).view());
        assert!(err <= 1e-8 * (1.0 + frobenius_norm(w.view())));

        // Singular input is fine.
        let s = random_psd(&mut rng, 6, 2);
        let l = psd_factor(&s).unwrap();
        let err = frobenius_norm((&l.dot(&l.t()) - &s.view()).view());
        assert!(err <= 1e-8 * (1.0 + frobenius_norm(s.view())));
    }

    #[test]
    fn psd_factor_rejects_indefinite() {
        let a = SymMatrix::from_diag(&[1.0, -0.5]);
        assert!(matches!(psd_factor(&a), Err(MgqdaError::NotPsd { .. })));
    }

    #[test]
    fn works_in_single_precision() {
        let a = SymMatrix::from_lower(array![[2.0f32, 1.0], [1.0, 2.0]]).unwrap();
        let e = sym_eigen(&a).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-5);
        assert!((e.values[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn packed_lower_roundtrip() {
        let a = SymMatrix::from_lower(array![[1.0, 0.0, 0.0], [2.0, 3.0, 0.0], [4.0, 5.0, 6.0]]).unwrap();
        let packed = a.packed_lower();
        assert_eq!(packed, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(SymMatrix::from_packed_lower(3, &packed).unwrap(), a);
    }
}
