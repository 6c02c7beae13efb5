//! Penalized estimation of the stacked discriminant basis by block-coordinate
//! descent.
//!
//! The objective over `Ω = [Ω_1, …, Ω_G]` (p × G(G−1)) is
//!
//! ```text
//! ½ Σ_g { Tr(Ω_gᵀ Σ̂_g Ω_g) + ‖Γ̂ᵀΩ_g − I‖²_F }
//!   + αλ Σ_j ‖ω_j‖₂ + ((1−α)/√G) λ Σ_{j,g} ‖ω_jg‖₂
//! ```
//!
//! where `ω_j` is row j and `ω_jg` its (G−1)-wide slice for group g. The
//! smooth part separates across groups, so a block sees the rest of the
//! problem only through `v_jg` (its gradient with the diagonal term removed)
//! and through the norm of the other blocks on the same row.
//!
//! Each block is minimized exactly: its solution is collinear with `−v_jg`
//! and its norm solves a monotone scalar equation. A row that sits entirely
//! at zero can be stuck for blockwise moves even when the row penalty no
//! longer pins it, so such rows are also tested and, if needed, minimized
//! jointly.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1};

use crate::error::{MgqdaError, Result};
use crate::scalar::Scalar;
use crate::stats::{gram_products, GroupStats};

/// Penalty level, mixing weight and solver tolerances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySpec<T> {
    pub lambda: T,
    /// Share of the penalty on whole rows; the rest goes to per-group blocks.
    pub alpha: T,
    /// Convergence threshold on the largest block change in a sweep.
    pub tol: T,
    pub max_sweeps: usize,
    /// Accuracy of the scalar root solves.
    pub root_tol: T,
}

impl<T: Scalar> PenaltySpec<T> {
    pub fn new(lambda: T, alpha: T) -> Self {
        PenaltySpec {
            lambda,
            alpha,
            tol: T::of(1e-6),
            max_sweeps: 1000,
            root_tol: T::of(1e-10),
        }
    }

    pub fn with_lambda(mut self, lambda: T) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_tol(mut self, tol: T) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_sweeps(mut self, max_sweeps: usize) -> Self {
        self.max_sweeps = max_sweeps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda.is_finite()
            && self.lambda >= T::zero()
            && self.alpha > T::zero()
            && self.alpha <= T::one()
            && self.tol > T::zero()
            && self.root_tol > T::zero()
            && self.max_sweeps > 0;
        if ok {
            Ok(())
        } else {
            Err(MgqdaError::invalid(format!(
                "penalty needs lambda >= 0, alpha in (0, 1], positive tolerances and sweeps \
                 (lambda={:?}, alpha={:?}, tol={:?}, root_tol={:?}, max_sweeps={})",
                self.lambda, self.alpha, self.tol, self.root_tol, self.max_sweeps
            )))
        }
    }

    /// Weight on `‖ω_j‖₂`.
    pub fn row_weight(&self) -> T {
        self.alpha * self.lambda
    }

    /// Weight on `‖ω_jg‖₂`.
    pub fn block_weight(&self, g_count: usize) -> T {
        (T::one() - self.alpha) * self.lambda / T::of(g_count as f64).sqrt()
    }
}

impl<T: Scalar> Default for PenaltySpec<T> {
    fn default() -> Self {
        PenaltySpec::new(T::zero(), T::of(0.5))
    }
}

/// The stacked basis: p rows, G blocks of width G−1 per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients<T> {
    omega: Array2<T>,
    g_count: usize,
}

impl<T: Scalar> Coefficients<T> {
    pub fn zeros(p: usize, g_count: usize) -> Self {
        assert!(g_count >= 2, "need at least two groups");
        Coefficients { omega: Array2::zeros((p, g_count * (g_count - 1))), g_count }
    }

    pub fn from_array(omega: Array2<T>, g_count: usize) -> Result<Self> {
        if g_count < 2 || omega.ncols() != g_count * (g_count - 1) {
            return Err(MgqdaError::invalid(format!(
                "coefficient matrix has {} columns, expected G(G-1) = {} for G = {}",
                omega.ncols(),
                g_count * g_count.saturating_sub(1),
                g_count
            )));
        }
        Ok(Coefficients { omega: omega.as_standard_layout().into_owned(), g_count })
    }

    pub fn p(&self) -> usize {
        self.omega.nrows()
    }

    pub fn g_count(&self) -> usize {
        self.g_count
    }

    pub fn block_width(&self) -> usize {
        self.g_count - 1
    }

    pub fn as_array(&self) -> ArrayView2<'_, T> {
        self.omega.view()
    }

    pub fn into_array(self) -> Array2<T> {
        self.omega
    }

    pub fn block(&self, j: usize, g: usize) -> ArrayView1<'_, T> {
        let w = self.block_width();
        self.omega.slice(s![j, g * w..(g + 1) * w])
    }

    pub fn block_mut(&mut self, j: usize, g: usize) -> ArrayViewMut1<'_, T> {
        let w = self.block_width();
        self.omega.slice_mut(s![j, g * w..(g + 1) * w])
    }

    /// Columns of group g: p × (G−1).
    pub fn group(&self, g: usize) -> ArrayView2<'_, T> {
        let w = self.block_width();
        self.omega.slice(s![.., g * w..(g + 1) * w])
    }

    pub fn row(&self, j: usize) -> ArrayView1<'_, T> {
        self.omega.row(j)
    }

    pub fn is_zero(&self) -> bool {
        self.omega.iter().all(|&v| v == T::zero())
    }
}

/// Diagnostics from [`fit`].
#[derive(Debug, Clone)]
pub struct SolveReport<T> {
    /// Objective at the starting point followed by its value after each sweep.
    pub objective_trace: Vec<T>,
    pub sweeps_used: usize,
    pub converged: bool,
    /// Largest violation of the optimality conditions over all blocks.
    pub kkt_residual: T,
    pub support: Vec<usize>,
    pub group_supports: Vec<Vec<usize>>,
    /// Blocks pinned to zero because their diagonal curvature vanished.
    pub degenerate_blocks: usize,
}

impl<T: Scalar> SolveReport<T> {
    pub fn final_objective(&self) -> T {
        *self.objective_trace.last().expect("trace holds at least the initial value")
    }
}

fn check_dims<T: Scalar>(omega: &Coefficients<T>, stats: &GroupStats<T>) -> Result<()> {
    if omega.p() != stats.p() || omega.g_count() != stats.g_count {
        return Err(MgqdaError::invalid(format!(
            "coefficients are {}x{} (G={}), statistics have p={} and G={}",
            omega.p(),
            omega.as_array().ncols(),
            omega.g_count(),
            stats.p(),
            stats.g_count
        )));
    }
    Ok(())
}

fn penalty_value<T: Scalar>(omega: &Coefficients<T>, pen: &PenaltySpec<T>) -> T {
    let g_count = omega.g_count();
    let (rw, bw) = (pen.row_weight(), pen.block_weight(g_count));
    let mut total = T::zero();
    for j in 0..omega.p() {
        let row = omega.row(j);
        total += rw * norm(row);
        for g in 0..g_count {
            total += bw * norm(omega.block(j, g));
        }
    }
    total
}

/// Penalized objective evaluated from its definition.
pub fn objective<T: Scalar>(omega: &Coefficients<T>, stats: &GroupStats<T>, pen: &PenaltySpec<T>) -> Result<T> {
    check_dims(omega, stats)?;
    let w = omega.block_width();
    let eye = Array2::<T>::eye(w);
    let mut smooth = T::zero();
    for g in 0..stats.g_count {
        let og = omega.group(g);
        let quad = og.t().dot(&stats.covariances[g].view().dot(&og));
        smooth += quad.diag().sum();
        let fit = stats.gamma.t().dot(&og) - &eye;
        smooth += fit.iter().map(|&v| v * v).sum::<T>();
    }
    Ok(T::of(0.5) * smooth + penalty_value(omega, pen))
}

/// Gradient of the smooth part with respect to `ω_jg`, minus its own
/// diagonal contribution:
/// `Σ_{i≠j} Σ̂_{g,ji} ω_ig + Σ_{i≠j} (Γ̂Γ̂ᵀ)_{ji} ω_ig − Γ̂_j`.
pub fn block_gradient_v<T: Scalar>(j: usize, g: usize, omega: &Coefficients<T>, stats: &GroupStats<T>) -> Array1<T> {
    let og = omega.group(g);
    let cov_row = stats.covariances[g].view().row(j).to_owned();
    let gamma_j = stats.gamma.row(j);
    // Σ̂_g row j times Ω_g, and Γ̂_j (Γ̂ᵀ Ω_g).
    let mut v = cov_row.dot(&og) + gamma_j.dot(&stats.gamma.t().dot(&og));
    let a = stats.covariances[g].get(j, j) + gamma_j.dot(&gamma_j);
    v.scaled_add(-a, &og.row(j));
    v - gamma_j
}

fn norm<T: Scalar>(v: ArrayView1<'_, T>) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn slice_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Norm `x ≥ 0` of the minimizing block for curvature `a > 0`, other-block
/// row norm `b`, and gradient norm `c = ‖v_jg‖`.
///
/// With `b > 0`, `x` solves `a·x + αλ·x/√(b²+x²) + β = c` (β the block
/// weight) and is 0 when `c ≤ β`. With `b = 0` the row norm is also
/// non-smooth, so the threshold is `αλ + β` and `x = (c − αλ − β)/a`.
pub fn block_norm<T: Scalar>(a: T, b: T, c: T, row_weight: T, block_weight: T, root_tol: T) -> T {
    let zero = T::zero();
    if b == zero {
        let excess = c - row_weight - block_weight;
        return if excess > zero { excess / a } else { zero };
    }
    if c <= block_weight {
        return zero;
    }
    let target = c - block_weight;
    let f = |x: T| a * x + row_weight * x / (b * b + x * x).sqrt() - target;
    let df = |x: T| {
        let q = b * b + x * x;
        a + row_weight * b * b / (q * q.sqrt())
    };
    let (mut lo, mut hi) = (zero, target / a);
    // f is increasing and concave on x ≥ 0, so Newton from the left end
    // climbs monotonically to the root; the bracket only guards round-off.
    let mut x = lo;
    let eps = T::epsilon();
    for _ in 0..200 {
        let fx = f(x);
        if fx == zero {
            return x;
        }
        if fx < zero {
            lo = lo.max(x);
        } else {
            hi = hi.min(x);
        }
        let mut next = x - fx / df(x);
        if !(next > lo && next < hi) {
            next = T::of(0.5) * (lo + hi);
        }
        let step = (next - x).abs();
        x = next;
        if (step <= T::of(4.0) * eps * x.max(T::min_positive_value()) || hi - lo <= eps * hi)
            && f(x).abs() <= root_tol
        {
            break;
        }
    }
    x
}

/// Minimizer over `ω_jg` with every other block held fixed.
///
/// Returns the zero block (and logs a warning) when the diagonal curvature
/// `Σ̂_{g,jj} + (Γ̂Γ̂ᵀ)_{jj}` is not positive.
pub fn block_update<T: Scalar>(
    j: usize,
    g: usize,
    omega: &Coefficients<T>,
    stats: &GroupStats<T>,
    pen: &PenaltySpec<T>,
) -> Result<Array1<T>> {
    check_dims(omega, stats)?;
    pen.validate()?;
    let gamma_j = stats.gamma.row(j);
    let a = stats.covariances[g].get(j, j) + gamma_j.dot(&gamma_j);
    let v = block_gradient_v(j, g, omega, stats);
    let b = other_blocks_norm(omega.row(j).as_slice().expect("standard layout"), g, omega.block_width());
    Ok(match block_from_gradient(a, v.as_slice().unwrap(), b, pen, stats.g_count) {
        BlockOutcome::Degenerate => {
            log::warn!("feature {j}, group {g}: non-positive diagonal, block forced to zero");
            Array1::zeros(v.len())
        }
        BlockOutcome::Value(w) => Array1::from(w),
    })
}

enum BlockOutcome<T> {
    Degenerate,
    Value(Vec<T>),
}

fn other_blocks_norm<T: Scalar>(row: &[T], g: usize, w: usize) -> T {
    row.chunks(w)
        .enumerate()
        .filter(|(t, _)| *t != g)
        .flat_map(|(_, blk)| blk.iter())
        .map(|&x| x * x)
        .sum::<T>()
        .sqrt()
}

fn block_from_gradient<T: Scalar>(a: T, v: &[T], b: T, pen: &PenaltySpec<T>, g_count: usize) -> BlockOutcome<T> {
    if a <= T::zero() {
        return BlockOutcome::Degenerate;
    }
    let c = slice_norm(v);
    let x = block_norm(a, b, c, pen.row_weight(), pen.block_weight(g_count), pen.root_tol);
    if x == T::zero() {
        BlockOutcome::Value(vec![T::zero(); v.len()])
    } else {
        let scale = -x / c;
        BlockOutcome::Value(v.iter().map(|&vi| vi * scale).collect())
    }
}

/// Row norm `N` of the joint minimizer of an all-zero row whose blocks have
/// curvatures `a_g` and thresholded gradient norms `d_g = (c_g − β)₊`:
/// the root of `Σ_g (d_g / (a_g N + αλ))² = 1`. Requires `‖d‖ > αλ`.
fn row_norm_root<T: Scalar>(a: &[T], d: &[T], row_weight: T, root_tol: T) -> T {
    let one = T::one();
    let phi = |n: T| {
        a.iter()
            .zip(d)
            .map(|(&ag, &dg)| {
                let q = dg / (ag * n + row_weight);
                q * q
            })
            .sum::<T>()
            - one
    };
    let dphi = |n: T| {
        a.iter()
            .zip(d)
            .map(|(&ag, &dg)| {
                let den = ag * n + row_weight;
                -T::of(2.0) * dg * dg * ag / (den * den * den)
            })
            .sum::<T>()
    };
    let dnorm = slice_norm(d);
    let amin = a
        .iter()
        .zip(d)
        .filter(|(_, &dg)| dg > T::zero())
        .map(|(&ag, _)| ag)
        .fold(T::infinity(), T::min);
    let (mut lo, mut hi) = (T::zero(), dnorm / amin);
    let mut n = T::of(0.5) * hi;
    let eps = T::epsilon();
    for _ in 0..200 {
        let f = phi(n);
        if f == T::zero() {
            break;
        }
        if f > T::zero() {
            lo = n;
        } else {
            hi = n;
        }
        let mut next = n - f / dphi(n);
        if !(next > lo && next < hi) {
            next = T::of(0.5) * (lo + hi);
        }
        let step = (next - n).abs();
        n = next;
        if (step <= T::of(4.0) * eps * n || hi - lo <= eps * hi) && phi(n).abs() <= root_tol {
            break;
        }
    }
    n
}

/// λ at and above which the zero matrix solves the penalized problem:
/// `√G · max_j ‖Γ̂_j‖₂`.
///
/// At `Ω = 0` every block of row j has gradient `−Γ̂_j`, and the zero row
/// is optimal iff `√G (‖Γ̂_j‖ − (1−α)λ/√G)₊ ≤ αλ`, i.e. `λ ≥ √G ‖Γ̂_j‖`
/// for every α in (0, 1].
pub fn lambda_max<T: Scalar>(stats: &GroupStats<T>) -> T {
    let max_row = stats
        .gamma
        .rows()
        .into_iter()
        .map(norm)
        .fold(T::zero(), T::max);
    T::of(stats.g_count as f64).sqrt() * max_row
}

/// Descending geometric grid from [`lambda_max`] to `ratio · lambda_max`.
pub fn lambda_path<T: Scalar>(stats: &GroupStats<T>, alpha: T, n_lambda: usize, ratio: T) -> Result<Vec<T>> {
    if n_lambda < 2 {
        return Err(MgqdaError::invalid("lambda path needs at least 2 values"));
    }
    if !(ratio > T::zero() && ratio < T::one()) {
        return Err(MgqdaError::invalid("lambda ratio must lie in (0, 1)"));
    }
    if !(alpha > T::zero() && alpha <= T::one()) {
        return Err(MgqdaError::invalid("alpha must lie in (0, 1]"));
    }
    let top = lambda_max(stats);
    if top == T::zero() {
        return Ok(vec![T::zero()]);
    }
    let step = ratio.ln() / T::of((n_lambda - 1) as f64);
    Ok((0..n_lambda)
        .map(|k| {
            if k == 0 {
                top
            } else {
                top * (step * T::of(k as f64)).exp()
            }
        })
        .collect())
}

/// Overall support `{j : ω_j ≠ 0}` and group supports `{j : ‖ω_jg‖ > zero_tol}`.
pub fn extract_support<T: Scalar>(omega: &Coefficients<T>, zero_tol: T) -> (Vec<usize>, Vec<Vec<usize>>) {
    let g_count = omega.g_count();
    let mut groups = vec![Vec::new(); g_count];
    let mut union = Vec::new();
    for j in 0..omega.p() {
        let mut any = false;
        for (g, members) in groups.iter_mut().enumerate() {
            if norm(omega.block(j, g)) > zero_tol {
                members.push(j);
                any = true;
            }
        }
        if any {
            union.push(j);
        }
    }
    (union, groups)
}

/// Block-coordinate descent with the Gram matrices `M_g = Σ̂_g + Γ̂Γ̂ᵀ`
/// precomputed, for reuse across a λ path.
pub struct Solver<'a, T> {
    stats: &'a GroupStats<T>,
    grams: Vec<Array2<T>>,
}

impl<'a, T: Scalar> Solver<'a, T> {
    pub fn new(stats: &'a GroupStats<T>) -> Self {
        let grams = gram_products(stats)
            .into_iter()
            .map(|m| m.into_inner().as_standard_layout().into_owned())
            .collect();
        Solver { stats, grams }
    }

    pub fn stats(&self) -> &GroupStats<T> {
        self.stats
    }

    /// Fits from `init` (zero when `None`).
    pub fn fit(&self, pen: &PenaltySpec<T>, init: Option<&Coefficients<T>>) -> Result<(Coefficients<T>, SolveReport<T>)> {
        pen.validate()?;
        let stats = self.stats;
        let (p, g_count) = (stats.p(), stats.g_count);
        let omega = match init {
            Some(c) => {
                check_dims(c, stats)?;
                c.clone()
            }
            None => Coefficients::zeros(p, g_count),
        };
        let mut state = BcdState::new(self, omega, pen);
        let mut trace = vec![state.objective()];
        let mut converged = false;
        let mut sweeps = 0;
        while sweeps < pen.max_sweeps {
            let change = state.sweep();
            sweeps += 1;
            if sweeps % 50 == 0 {
                state.refresh_residuals();
            }
            trace.push(state.objective());
            // Small steps alone can leave a sizeable stationarity gap when the
            // curvature is large, so the dual check must also pass.
            if change <= pen.tol && state.kkt_residual() <= pen.tol {
                converged = true;
                break;
            }
        }
        state.refresh_residuals();
        if state.degenerate > 0 {
            log::warn!("{} block(s) had non-positive curvature and were held at zero", state.degenerate);
        }
        let kkt_residual = state.kkt_residual();
        let degenerate_blocks = state.degenerate;
        let coefs = Coefficients { omega: state.omega, g_count };
        let (support, group_supports) = extract_support(&coefs, T::zero());
        let report = SolveReport {
            objective_trace: trace,
            sweeps_used: sweeps,
            converged,
            kkt_residual,
            support,
            group_supports,
            degenerate_blocks,
        };
        Ok((coefs, report))
    }

    /// Fits each λ in order, warm-starting from the previous solution.
    pub fn fit_path(&self, base: &PenaltySpec<T>, lambdas: &[T]) -> Result<Vec<(Coefficients<T>, SolveReport<T>)>> {
        let mut out: Vec<(Coefficients<T>, SolveReport<T>)> = Vec::with_capacity(lambdas.len());
        for &lambda in lambdas {
            let pen = base.with_lambda(lambda);
            let init = out.last().map(|(c, _)| c);
            let res = self.fit(&pen, init)?;
            out.push(res);
        }
        Ok(out)
    }
}

/// One-shot fit; see [`Solver`] to reuse the Gram matrices.
pub fn fit<T: Scalar>(
    stats: &GroupStats<T>,
    pen: &PenaltySpec<T>,
    init: Option<&Coefficients<T>>,
) -> Result<(Coefficients<T>, SolveReport<T>)> {
    Solver::new(stats).fit(pen, init)
}

struct BcdState<'s, T> {
    grams: &'s [Array2<T>],
    gamma: ArrayView2<'s, T>,
    pen: PenaltySpec<T>,
    g_count: usize,
    width: usize,
    omega: Array2<T>,
    /// `M_g Ω_g` per group, each p × (G − 1) and contiguous.
    resid: Vec<Array2<T>>,
    degenerate: usize,
    scratch: Scratch<T>,
    /// Block change buffer for `apply`.
    delta: Vec<T>,
}

/// Per-row work buffers, reused across the sweep.
#[derive(Default)]
struct Scratch<T> {
    grads: Vec<T>,
    a: Vec<T>,
    d: Vec<T>,
    next: Vec<T>,
}

impl<'s, T: Scalar> BcdState<'s, T> {
    fn new(solver: &'s Solver<'_, T>, omega: Coefficients<T>, pen: &PenaltySpec<T>) -> Self {
        let g_count = solver.stats.g_count;
        let mut state = BcdState {
            grams: &solver.grams,
            gamma: solver.stats.gamma.view(),
            pen: *pen,
            g_count,
            width: g_count - 1,
            resid: vec![Array2::zeros((omega.omega.nrows(), g_count - 1)); g_count],
            omega: omega.omega,
            degenerate: 0,
            scratch: Scratch {
                grads: vec![T::zero(); g_count * (g_count - 1)],
                a: vec![T::zero(); g_count],
                d: vec![T::zero(); g_count],
                next: vec![T::zero(); g_count - 1],
            },
            delta: vec![T::zero(); g_count - 1],
        };
        state.refresh_residuals();
        state.degenerate = state
            .grams
            .iter()
            .map(|m| m.diag().iter().filter(|&&a| a <= T::zero()).count())
            .sum();
        state
    }

    fn refresh_residuals(&mut self) {
        let w = self.width;
        for g in 0..self.g_count {
            let og = self.omega.slice(s![.., g * w..(g + 1) * w]);
            self.resid[g] = self.grams[g].dot(&og);
        }
    }

    fn objective(&self) -> T {
        let w = self.width;
        let half = T::of(0.5);
        let mut smooth = T::zero();
        for g in 0..self.g_count {
            let og = self.omega.slice(s![.., g * w..(g + 1) * w]);
            let rg = &self.resid[g];
            // Tr(Ω_gᵀ M_g Ω_g) − 2 Tr(Γ̂ᵀ Ω_g) + (G − 1)
            let quad: T = og.iter().zip(rg.iter()).map(|(&a, &b)| a * b).sum();
            let lin: T = og.iter().zip(self.gamma.iter()).map(|(&a, &b)| a * b).sum();
            smooth += quad - T::of(2.0) * lin + T::of(w as f64);
        }
        let coefs = CoefView { omega: &self.omega, g_count: self.g_count };
        half * smooth + coefs.penalty(&self.pen)
    }

    /// One cyclic pass over the rows. Returns the largest block change.
    ///
    /// With `αλ > 0` the row penalty couples the G blocks of a row, and
    /// block-at-a-time moves crawl when a row is near zero (each block sees
    /// the others' tiny norm as b in its scalar equation). Each row is
    /// therefore minimized jointly and exactly; the fixed points are the
    /// same as those of the blockwise map. Without a row penalty the blocks
    /// decouple and are updated one at a time.
    fn sweep(&mut self) -> T {
        let p = self.omega.nrows();
        let (g_count, w) = (self.g_count, self.width);
        let row_w = self.pen.row_weight();
        let blk_w = self.pen.block_weight(g_count);
        let mut max_change = T::zero();
        let mut v = vec![T::zero(); w];
        for j in 0..p {
            if row_w > T::zero() {
                max_change = max_change.max(self.row_update(j, row_w, blk_w));
                continue;
            }
            for g in 0..g_count {
                let a = self.grams[g][[j, j]];
                let current: Vec<T> = self.omega.slice(s![j, g * w..(g + 1) * w]).to_vec();
                for k in 0..w {
                    v[k] = self.resid[g][[j, k]] - a * current[k] - self.gamma[[j, k]];
                }
                let b = other_blocks_norm(self.omega.row(j).as_slice().unwrap(), g, w);
                let next = match block_from_gradient(a, &v, b, &self.pen, g_count) {
                    BlockOutcome::Degenerate => vec![T::zero(); w],
                    BlockOutcome::Value(x) => x,
                };
                max_change = max_change.max(self.apply(j, g, &next));
            }
        }
        max_change
    }

    /// Sets block (j, g) to `next` and updates the cached residuals.
    /// Returns the ℓ₂ size of the change.
    fn apply(&mut self, j: usize, g: usize, next: &[T]) -> T {
        let w = self.width;
        let delta = &mut self.delta;
        {
            let row = self.omega.row(j);
            let cur = &row.as_slice().expect("standard layout")[g * w..(g + 1) * w];
            for k in 0..w {
                delta[k] = next[k] - cur[k];
            }
        }
        let change = slice_norm(delta);
        if change == T::zero() {
            return change;
        }
        self.omega.slice_mut(s![j, g * w..(g + 1) * w]).assign(&ArrayView1::from(next));
        let col = self.grams[g].row(j);
        let resid = self.resid[g].as_slice_mut().expect("standard layout");
        for (r, &m) in resid.chunks_exact_mut(w).zip(col.iter()) {
            for (x, &dk) in r.iter_mut().zip(delta.iter()) {
                *x += m * dk;
            }
        }
        change
    }

    /// Exact minimizer of the objective over row j with all other rows
    /// fixed. The data `v_jg` do not depend on row j; the row is zero iff
    /// `‖(c_g − β)₊‖ ≤ αλ`, and otherwise block g is `−t_g v_jg / c_g` with
    /// `t_g = d_g N / (a_g N + αλ)`, `d_g = (c_g − β)₊`, where the row norm
    /// N solves `Σ_g (d_g / (a_g N + αλ))² = 1`.
    fn row_update(&mut self, j: usize, row_w: T, blk_w: T) -> T {
        let (g_count, w) = (self.g_count, self.width);
        let mut sc = std::mem::take(&mut self.scratch);
        {
            let om = self.omega.row(j);
            let om = om.as_slice().expect("standard layout");
            let gam = self.gamma.row(j);
            for g in 0..g_count {
                let ag = self.grams[g][[j, j]];
                let rs = self.resid[g].row(j);
                let vg = &mut sc.grads[g * w..(g + 1) * w];
                for k in 0..w {
                    vg[k] = rs[k] - ag * om[g * w + k] - gam[k];
                }
                let positive = ag > T::zero();
                sc.a[g] = if positive { ag } else { T::one() };
                sc.d[g] = if positive { (slice_norm(vg) - blk_w).max(T::zero()) } else { T::zero() };
            }
        }
        let mut max_change = T::zero();
        // A few ulps of slack, on the scale of the gradients before the block
        // weight was subtracted, keep λ = λ_max itself on the zero side.
        let dn = slice_norm(&sc.d);
        let scale = row_w + dn + T::of(g_count as f64).sqrt() * blk_w;
        let zero_row = dn <= row_w + T::of(16.0) * T::epsilon() * scale;
        let n = if zero_row { T::zero() } else { row_norm_root(&sc.a, &sc.d, row_w, self.pen.root_tol) };
        let mut next = std::mem::take(&mut sc.next);
        for g in 0..g_count {
            if zero_row || sc.d[g] == T::zero() {
                next.fill(T::zero());
            } else {
                let vg = &sc.grads[g * w..(g + 1) * w];
                let scale = -(sc.d[g] * n / (sc.a[g] * n + row_w)) / slice_norm(vg);
                for k in 0..w {
                    next[k] = scale * vg[k];
                }
            }
            max_change = max_change.max(self.apply(j, g, &next));
        }
        sc.next = next;
        self.scratch = sc;
        max_change
    }

    fn kkt_residual(&self) -> T {
        let p = self.omega.nrows();
        let (g_count, w) = (self.g_count, self.width);
        let row_w = self.pen.row_weight();
        let blk_w = self.pen.block_weight(g_count);
        let mut worst = T::zero();
        for j in 0..p {
            let row = self.omega.row(j);
            let row_norm = norm(row);
            let mut excess_sq = T::zero();
            for g in 0..g_count {
                // Full smooth gradient of block (j, g): M_g,jj ω_jg + v_jg.
                let grad: Vec<T> = (0..w).map(|k| self.resid[g][[j, k]] - self.gamma[[j, k]]).collect();
                let blk = row.slice(s![g * w..(g + 1) * w]);
                let blk_norm = norm(blk);
                if row_norm == T::zero() {
                    let e = (slice_norm(&grad) - blk_w).max(T::zero());
                    excess_sq += e * e;
                } else if blk_norm == T::zero() {
                    worst = worst.max(slice_norm(&grad) - blk_w);
                } else {
                    let r: Vec<T> = (0..w)
                        .map(|k| grad[k] + row_w * blk[k] / row_norm + blk_w * blk[k] / blk_norm)
                        .collect();
                    worst = worst.max(slice_norm(&r));
                }
            }
            if row_norm == T::zero() {
                worst = worst.max(excess_sq.sqrt() - row_w);
            }
        }
        worst.max(T::zero())
    }
}

struct CoefView<'a, T> {
    omega: &'a Array2<T>,
    g_count: usize,
}

impl<T: Scalar> CoefView<'_, T> {
    fn penalty(&self, pen: &PenaltySpec<T>) -> T {
        let w = self.g_count - 1;
        let (rw, bw) = (pen.row_weight(), pen.block_weight(self.g_count));
        self.omega
            .rows()
            .into_iter()
            .map(|row| {
                let s = row.as_slice().expect("standard layout");
                rw * slice_norm(s) + s.chunks(w).map(|b| bw * slice_norm(b)).sum::<T>()
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{compute_group_stats, CovMode, Dataset};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stats(seed: u64, g: usize, p: usize, n_per: usize) -> GroupStats<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g * n_per;
        let groups: Vec<usize> = (0..n).map(|i| i % g).collect();
        let shifts = Array2::from_shape_fn((g, p), |_| rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((n, p), |(i, j)| rng.random_range(-1.0..1.0) + shifts[[groups[i], j]]);
        let labels = (1..=g).map(|i| i.to_string()).collect();
        compute_group_stats(&Dataset::new(x, groups, labels, None).unwrap(), CovMode::Ml).unwrap()
    }

    // Objective written with the Kronecker-structured matrices K_g and J_G,
    // independent of the blockwise form used by `objective`.
    fn objective_kronecker(omega: &Array2<f64>, st: &GroupStats<f64>, lambda: f64, alpha: f64) -> f64 {
        let g = st.g_count;
        let w = g - 1;
        let k = g * w;
        let mut smooth = 0.0;
        for gi in 0..g {
            let mut kg = Array2::<f64>::zeros((k, k));
            for t in 0..w {
                kg[[gi * w + t, gi * w + t]] = 1.0;
            }
            let m = omega.t().dot(&st.covariances[gi].view().dot(omega)).dot(&kg);
            smooth += m.diag().sum();
        }
        let mut jg = Array2::<f64>::zeros((w, k));
        for gi in 0..g {
            for t in 0..w {
                jg[[t, gi * w + t]] = 1.0;
            }
        }
        let resid = st.gamma.t().dot(omega) - jg;
        smooth += resid.iter().map(|v| v * v).sum::<f64>();
        let mut pen = 0.0;
        for j in 0..omega.nrows() {
            let row = omega.row(j);
            pen += alpha * lambda * row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for gi in 0..g {
                let blk = row.slice(s![gi * w..(gi + 1) * w]);
                pen += (1.0 - alpha) / (g as f64).sqrt() * lambda * blk.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
        }
        0.5 * smooth + pen
    }

    #[test]
    fn objective_at_zero() {
        for g in [2, 3, 5] {
            let st = random_stats(1, g, 4, 6);
            let pen = PenaltySpec::new(0.7, 0.5);
            let val = objective(&Coefficients::zeros(4, g), &st, &pen).unwrap();
            assert_abs_diff_eq!(val, 0.5 * (g * (g - 1)) as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn objective_matches_kronecker_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for g in [2, 3, 4] {
            let st = random_stats(10 + g as u64, g, 6, 8);
            let om = Array2::from_shape_fn((6, g * (g - 1)), |_| rng.random_range(-1.0..1.0));
            let coefs = Coefficients::from_array(om.clone(), g).unwrap();
            let pen = PenaltySpec::new(0.3, 0.4);
            let a = objective(&coefs, &st, &pen).unwrap();
            let b = objective_kronecker(&om, &st, 0.3, 0.4);
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn objective_rejects_bad_dims() {
        let st = random_stats(1, 3, 4, 6);
        let pen = PenaltySpec::new(0.1, 0.5);
        assert!(objective(&Coefficients::zeros(5, 3), &st, &pen).is_err());
        assert!(Coefficients::from_array(Array2::<f64>::zeros((4, 5)), 3).is_err());
    }

    #[test]
    fn gradient_at_zero_and_p1() {
        let st = random_stats(3, 3, 5, 7);
        let z = Coefficients::zeros(5, 3);
        for j in 0..5 {
            for g in 0..3 {
                let v = block_gradient_v(j, g, &z, &st);
                assert_eq!(v, -&st.gamma.row(j));
            }
        }
        let st1 = random_stats(4, 3, 1, 7);
        let mut c = Coefficients::zeros(1, 3);
        c.block_mut(0, 1).assign(&array![0.3, -2.0]);
        let v = block_gradient_v(0, 1, &c, &st1);
        assert_abs_diff_eq!(v[0], -st1.gamma[[0, 0]], epsilon = 1e-14);
        assert_abs_diff_eq!(v[1], -st1.gamma[[0, 1]], epsilon = 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = 3;
        let st = random_stats(7, g, 5, 9);
        let om = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0));
        let smooth = |m: &Array2<f64>| objective_kronecker(m, &st, 0.0, 0.5);
        let h = 1e-6;
        for (j, gi) in [(0, 0), (2, 1), (4, 2)] {
            let coefs = Coefficients::from_array(om.clone(), g).unwrap();
            let v = block_gradient_v(j, gi, &coefs, &st);
            let gj = st.gamma.row(j);
            let a = st.covariances[gi].get(j, j) + gj.dot(&gj);
            for t in 0..2 {
                let col = gi * 2 + t;
                let mut up = om.clone();
                up[[j, col]] += h;
                let mut dn = om.clone();
                dn[[j, col]] -= h;
                let fd = (smooth(&up) - smooth(&dn)) / (2.0 * h);
                let analytic = v[t] + a * om[[j, col]];
                assert!((fd - analytic).abs() < 1e-6, "fd {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn block_norm_closed_form_when_row_inactive() {
        // a=1, b=0, c=1, α=0.5, λ=1, G=4: thresholds 0.5 + 0.25.
        let pen = PenaltySpec::new(1.0, 0.5);
        let x = block_norm(1.0, 0.0, 1.0, pen.row_weight(), pen.block_weight(4), 1e-10);
        assert_abs_diff_eq!(x, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn block_norm_below_threshold() {
        let pen = PenaltySpec::new(1.0, 0.5);
        let x = block_norm(1.0, 1.0, 0.2, pen.row_weight(), pen.block_weight(4), 1e-10);
        assert_eq!(x, 0.0);
    }

    #[test]
    fn block_norm_matches_bisection() {
        // a=1, b=1, c=2, α=0.5, λ=1, G=4: x + 0.5x/√(1+x²) + 0.25 = 2.
        let f = |x: f64| x + 0.5 * x / (1.0 + x * x).sqrt() + 0.25 - 2.0;
        let (mut lo, mut hi) = (0.0f64, 1.75f64);
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        let x = block_norm(1.0, 1.0, 2.0, 0.5, 0.25, 1e-10);
        assert!(x > 0.0 && x <= 1.75);
        assert!((x - oracle).abs() < 1e-11, "{x} vs {oracle}");
        assert!(f(x).abs() <= 1e-10);
    }

    #[test]
    fn block_update_minimizes_block_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = 3;
        let st = random_stats(13, g, 6, 8);
        let om = Array2::from_shape_fn((6, 6), |_| rng.random_range(-0.5..0.5));
        let pen = PenaltySpec::new(0.05, 0.5);
        for (j, gi) in [(0, 0), (3, 2), (5, 1)] {
            let mut coefs = Coefficients::from_array(om.clone(), g).unwrap();
            let best = block_update(j, gi, &coefs, &st, &pen).unwrap();
            coefs.block_mut(j, gi).assign(&best);
            let f0 = objective(&coefs, &st, &pen).unwrap();
            for _ in 0..100 {
                let mut trial = coefs.clone();
                let scale = 10f64.powf(rng.random_range(-6.0..0.0));
                let dir = Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0) * scale);
                let moved = &best + &dir;
                trial.block_mut(j, gi).assign(&moved);
                let f1 = objective(&trial, &st, &pen).unwrap();
                assert!(f0 <= f1 + 1e-12, "perturbation improved objective: {f0} > {f1}");
            }
        }
    }

    #[test]
    fn large_lambda_gives_zero_in_one_sweep() {
        let st = random_stats(14, 3, 8, 10);
        let pen = PenaltySpec::new(lambda_max(&st) * 1.5, 0.5);
        let (c, rep) = fit(&st, &pen, None).unwrap();
        assert!(c.is_zero());
        assert!(rep.converged);
        assert_eq!(rep.sweeps_used, 1);
        assert!(rep.support.is_empty());
    }

    #[test]
    fn lambda_max_examples() {
        let mut st = random_stats(15, 4, 3, 5);
        st.gamma = array![[2.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.5, 0.5, 0.5]];
        assert_abs_diff_eq!(lambda_max(&st), 4.0, epsilon = 1e-14);
        let path = lambda_path(&st, 0.5, 5, 0.01).unwrap();
        assert_eq!(path.len(), 5);
        assert_abs_diff_eq!(path[0], 4.0);
        assert_abs_diff_eq!(path[4], 0.04, epsilon = 1e-14);
        for w in path.windows(2) {
            assert!(w[0] > w[1]);
        }
        st.gamma.fill(0.0);
        assert_eq!(lambda_path(&st, 0.5, 5, 0.01).unwrap(), vec![0.0]);
        assert!(lambda_path(&st, 0.5, 1, 0.01).is_err());
        assert!(lambda_path(&st, 0.5, 5, 1.0).is_err());
    }

    #[test]
    fn lambda_max_is_tight() {
        for (seed, alpha, g) in [(16, 0.2, 3), (16, 0.5, 3), (16, 1.0, 3), (17, 0.05, 2), (18, 0.01, 2), (19, 0.02, 4)] {
            let st = random_stats(seed, g, 10, 12);
            let top = lambda_max(&st);
            let (c, _) = fit(&st, &PenaltySpec::new(top, alpha), None).unwrap();
            assert!(c.is_zero(), "alpha {alpha}");
            let (c, _) = fit(&st, &PenaltySpec::new(top * 0.98, alpha), None).unwrap();
            assert!(!c.is_zero(), "alpha {alpha}");
        }
    }

    #[test]
    fn trace_non_increasing_and_kkt_small() {
        for seed in 0..5 {
            let st = random_stats(100 + seed, 3, 15, 10);
            let pen = PenaltySpec::new(0.2 * lambda_max(&st), 0.5);
            let (_, rep) = fit(&st, &pen, None).unwrap();
            assert!(rep.converged);
            for w in rep.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10);
            }
            assert!(rep.kkt_residual <= 10.0 * pen.tol, "kkt {}", rep.kkt_residual);
        }
    }

    #[test]
    fn zero_row_escape_reaches_optimum() {
        // One feature, five groups: at this λ no single block clears αλ + β
        // but the row as a whole must be active.
        let g = 5;
        let st = random_stats(21, g, 1, 6);
        let top = lambda_max(&st);
        let pen = PenaltySpec::new(0.9 * top, 0.9);
        let c = st.gamma.row(0).dot(&st.gamma.row(0)).sqrt();
        assert!(c <= pen.row_weight() + pen.block_weight(g), "setup should block single moves");
        let (coefs, rep) = fit(&st, &pen, None).unwrap();
        assert!(!coefs.is_zero());
        assert!(rep.kkt_residual <= 1e-8);
    }

    #[test]
    fn supports_from_coefficients() {
        let mut c = Coefficients::<f64>::zeros(5, 3);
        assert_eq!(extract_support(&c, 0.0), (vec![], vec![vec![], vec![], vec![]]));
        c.block_mut(2, 1).assign(&array![0.1, 0.0]);
        let (s, sg) = extract_support(&c, 0.0);
        assert_eq!(s, vec![2]);
        assert_eq!(sg, vec![vec![], vec![2], vec![]]);
    }

    #[test]
    fn solver_blocks_are_exact_zeros() {
        let st = random_stats(30, 3, 20, 8);
        let pen = PenaltySpec::new(0.3 * lambda_max(&st), 0.5);
        let (c, _) = fit(&st, &pen, None).unwrap();
        assert_eq!(extract_support(&c, 0.0), extract_support(&c, 1e-12));
    }

    #[test]
    fn degenerate_feature_is_held_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 30;
        let groups: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x = Array2::from_shape_fn((n, 4), |(i, j)| {
            if j == 2 {
                7.0
            } else {
                rng.random_range(-1.0..1.0) + groups[i] as f64
            }
        });
        let labels = vec!["a".into(), "b".into(), "c".into()];
        let st = compute_group_stats(&Dataset::new(x, groups, labels, None).unwrap(), CovMode::Ml).unwrap();
        let (c, rep) = fit(&st, &PenaltySpec::new(0.0, 0.5), None).unwrap();
        assert!(c.row(2).iter().all(|&v| v == 0.0));
        assert!(rep.degenerate_blocks > 0);
    }

    #[test]
    fn warm_path_matches_cold_fits() {
        let st = random_stats(40, 3, 12, 30);
        let lambdas = lambda_path(&st, 0.5, 6, 0.05).unwrap();
        let base = PenaltySpec::new(0.0, 0.5).with_tol(1e-10);
        let solver = Solver::new(&st);
        let path = solver.fit_path(&base, &lambdas).unwrap();
        for (lam, (warm, _)) in lambdas.iter().zip(&path) {
            let (cold, rep) = solver.fit(&base.with_lambda(*lam), None).unwrap();
            assert!(rep.converged);
            let diff = (&warm.as_array() - &cold.as_array()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-6, "lambda {lam}: {diff}");
        }
    }

    #[test]
    fn invalid_penalty_rejected() {
        let st = random_stats(1, 3, 3, 4);
        assert!(fit(&st, &PenaltySpec::new(-1.0, 0.5), None).is_err());
        assert!(fit(&st, &PenaltySpec::new(1.0, 0.0), None).is_err());
        assert!(fit(&st, &PenaltySpec::new(1.0, 1.5), None).is_err());
    }
}
