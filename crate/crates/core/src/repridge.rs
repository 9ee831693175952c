//! Replicable ridge regression: fit in the usual way, whiten with `V^{1/2}`,
//! snap the whitened estimate to the midpoint of a randomly shifted grid cell
//! and map back with `V^{-1/2}`.
//!
//! The grid width is `alpha = 2 beta sqrt(d) / (rho - 2 delta)`. Two runs on
//! the same design whose whitened estimates are close land in the same cell
//! with high probability, and the rounding moves the estimate by at most
//! `(alpha / 2) sqrt(d)` in the `V`-norm.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, inv_quad_form, log_det, matrix_sqrt_spd};
use crate::randomness::{Label, StreamHandle};

/// Updates between full recomputations of `ln det V`.
pub const LOG_DET_REFRESH: usize = 256;

/// Sufficient statistics for ridge regression: `V = lambda I + sum x x^T`,
/// `b = sum x y`, and the sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct GramState {
    v: DMatrix<f64>,
    b: DVector<f64>,
    n: usize,
    lambda: f64,
    log_det: f64,
    since_refresh: usize,
}

impl GramState {
    pub fn new(d: usize, lambda: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::input("dimension d must be at least 1"));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::input(format!("lambda must be > 0, got {lambda}")));
        }
        Ok(Self {
            v: DMatrix::identity(d, d) * lambda,
            b: DVector::zeros(d),
            n: 0,
            lambda,
            log_det: d as f64 * lambda.ln(),
            since_refresh: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn response_sum(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `ln det V`, maintained through the matrix determinant lemma.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `ln(det V / det(lambda I))`.
    pub fn log_det_ratio(&self) -> f64 {
        self.log_det - self.dim() as f64 * self.lambda.ln()
    }

    /// Adds one observation in place. Returns `||x||^2_{V^{-1}}` for the
    /// matrix before the update.
    pub fn update(&mut self, x: &DVector<f64>, y: f64) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::input(format!(
                "feature has dimension {}, expected {}",
                x.len(),
                self.dim()
            )));
        }
        let chol = cholesky(&self.v)?;
        let quad = inv_quad_form(&chol, x);
        self.v.ger(1.0, x, x, 1.0);
        self.b.axpy(y, x, 1.0);
        self.n += 1;
        self.since_refresh += 1;
        if self.since_refresh >= LOG_DET_REFRESH {
            self.log_det = log_det(&cholesky(&self.v)?);
            self.since_refresh = 0;
        } else {
            self.log_det += quad.ln_1p();
        }
        Ok(quad)
    }

    /// Functional form of [`GramState::update`].
    pub fn updated(&self, x: &DVector<f64>, y: f64) -> Result<GramState> {
        let mut next = self.clone();
        next.update(x, y)?;
        Ok(next)
    }
}

/// `theta_hat = V^{-1} b` via Cholesky.
pub fn ridge_fit(state: &GramState) -> Result<DVector<f64>> {
    Ok(cholesky(state.gram())?.solve(state.response_sum()))
}

/// `beta_n(delta) = sigma sqrt(2 ln(det(V)^{1/2} / (det(lambda I)^{1/2} delta))) + sqrt(lambda) S`.
pub fn beta_radius(state: &GramState, delta: f64, sigma: f64, s_bound: f64) -> f64 {
    let log_arg = 0.5 * state.log_det_ratio() - delta.ln();
    sigma * (2.0 * log_arg).sqrt() + state.lambda().sqrt() * s_bound
}

/// Coordinatewise midpoint of the cell of the grid `alpha Z^d + u` that contains `z`.
pub fn grid_round(z: &DVector<f64>, alpha: f64, shift: &DVector<f64>) -> Result<DVector<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::input(format!("grid width must be > 0, got {alpha}")));
    }
    if shift.len() != z.len() {
        return Err(Error::input(format!(
            "shift has dimension {}, expected {}",
            shift.len(),
            z.len()
        )));
    }
    if let Some(u) = shift.iter().find(|u| !(0.0..alpha).contains(*u)) {
        return Err(Error::input(format!("shift {u} outside [0, {alpha})")));
    }
    Ok(z.zip_map(shift, |zj, uj| round_scalar(zj, alpha, uj)))
}

/// One-dimensional grid rounding: `alpha floor((x - u) / alpha) + u + alpha / 2`.
#[inline]
pub fn round_scalar(x: f64, alpha: f64, shift: f64) -> f64 {
    alpha * ((x - shift) / alpha).floor() + shift + alpha / 2.0
}

/// `d` shifts uniform on `[0, alpha)`, drawn from the shared stream at `call_key`.
pub fn draw_shift(shared: &StreamHandle, call_key: &[Label], alpha: f64, d: usize) -> DVector<f64> {
    let mut stream = shared.child(call_key);
    DVector::from_fn(d, |_, _| {
        // alpha * u can round up to alpha when u is within an ulp of 1.
        let u = alpha * stream.next_uniform();
        if u < alpha {
            u
        } else {
            alpha * (1.0 - f64::EPSILON)
        }
    })
}

/// Confidence and replicability levels for one estimator call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepRidgeParams {
    pub delta: f64,
    pub rho: f64,
    pub sigma: f64,
    pub s_bound: f64,
}

impl RepRidgeParams {
    pub fn new(delta: f64, rho: f64, sigma: f64, s_bound: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::config(format!("delta must lie in (0, 1), got {delta}")));
        }
        if !(rho < 1.0) {
            return Err(Error::config(format!("rho must be < 1, got {rho}")));
        }
        if !(rho > 2.0 * delta) {
            return Err(Error::config(format!(
                "rho = {rho} must exceed 2 delta = {}; the grid width diverges at rho = 2 delta",
                2.0 * delta
            )));
        }
        if rho <= 3.0 * delta {
            log::warn!(
                "rho = {rho} <= 3 delta = {}: the coverage guarantee assumes rho > 3 delta",
                3.0 * delta
            );
        }
        if !(sigma >= 0.0 && s_bound >= 0.0) {
            return Err(Error::config("sigma and S must be non-negative"));
        }
        Ok(Self { delta, rho, sigma, s_bound })
    }

    /// `1 + d / (rho - 2 delta)`.
    pub fn inflation(&self, d: usize) -> f64 {
        1.0 + d as f64 / (self.rho - 2.0 * self.delta)
    }

    /// `2 beta sqrt(d) / (rho - 2 delta)`.
    pub fn grid_width(&self, beta: f64, d: usize) -> f64 {
        2.0 * beta * (d as f64).sqrt() / (self.rho - 2.0 * self.delta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicableEstimate {
    /// The rounded, replicable estimate.
    pub theta_tilde: DVector<f64>,
    /// The ordinary ridge estimate before rounding.
    pub theta_hat: DVector<f64>,
    /// `V^{1/2} theta_hat`.
    pub whitened: DVector<f64>,
    /// Grid midpoint the whitened estimate was snapped to.
    pub rounded: DVector<f64>,
    pub alpha: f64,
    pub shift: DVector<f64>,
    pub beta: f64,
    pub beta_inflated: f64,
}

impl ReplicableEstimate {
    /// Bitwise equality of the rounded estimates.
    pub fn same_output(&self, other: &ReplicableEstimate) -> bool {
        self.theta_tilde.len() == other.theta_tilde.len()
            && self
                .theta_tilde
                .iter()
                .zip(other.theta_tilde.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `||x||_V = sqrt(x^T V x)`.
pub fn v_norm(v: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(v * x)).max(0.0).sqrt()
}

/// The replicable ridge estimator.
pub fn rep_ridge(
    state: &GramState,
    params: &RepRidgeParams,
    shared: &StreamHandle,
    call_key: &[Label],
) -> Result<ReplicableEstimate> {
    let d = state.dim();
    let theta_hat = ridge_fit(state)?;
    let beta = beta_radius(state, params.delta, params.sigma, params.s_bound);
    let alpha = params.grid_width(beta, d);
    if !(alpha > 0.0) {
        return Err(Error::DegenerateGrid);
    }
    let shift = draw_shift(shared, call_key, alpha, d);
    let roots = matrix_sqrt_spd(state.gram())?;
    let whitened = &roots.sqrt * &theta_hat;
    let rounded = grid_round(&whitened, alpha, &shift)?;
    let theta_tilde = &roots.inv_sqrt * &rounded;
    Ok(ReplicableEstimate {
        theta_tilde,
        theta_hat,
        whitened,
        rounded,
        alpha,
        shift,
        beta,
        beta_inflated: beta * params.inflation(d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels;
    use crate::randomness::SeedPlan;
    use proptest::prelude::*;

    fn e(d: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        v
    }

    /// Gauss-Jordan inverse with partial pivoting, independent of the Cholesky path.
    fn gauss_jordan_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let mut a = m.clone();
        let mut inv = DMatrix::<f64>::identity(n, n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
                .unwrap();
            a.swap_rows(col, pivot);
            inv.swap_rows(col, pivot);
            let p = a[(col, col)];
            for j in 0..n {
                a[(col, j)] /= p;
                inv[(col, j)] /= p;
            }
            for i in 0..n {
                if i != col {
                    let f = a[(i, col)];
                    for j in 0..n {
                        a[(i, j)] -= f * a[(col, j)];
                        inv[(i, j)] -= f * inv[(col, j)];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn update_zero_vector_is_noop_on_v_and_b() {
        let s = GramState::new(3, 1.5).unwrap();
        let t = s.updated(&DVector::zeros(3), 4.0).unwrap();
        assert_eq!(t.gram(), s.gram());
        assert_eq!(t.response_sum(), s.response_sum());
        assert_eq!(t.count(), 1);
    }

    #[test]
    fn update_from_identity() {
        let s = GramState::new(3, 1.0).unwrap().updated(&e(3, 0), 2.0).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 1.0]));
        assert_eq!(s.gram(), &expected);
        assert_eq!(s.response_sum(), &DVector::from_vec(vec![2.0, 0.0, 0.0]));
    }

    #[test]
    fn dimension_mismatch() {
        let mut s = GramState::new(2, 1.0).unwrap();
        assert!(matches!(s.update(&e(3, 0), 1.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn determinant_lemma_matches_factorization() {
        let mut stream = SeedPlan::new(3, "gram").derive_stream(labels!["x"]);
        let mut s = GramState::new(4, 0.7).unwrap();
        for _ in 0..600 {
            let x = DVector::from_fn(4, |_, _| stream.next_normal());
            let before = s.log_det();
            let quad = s.update(&x, stream.next_normal()).unwrap();
            let direct = log_det(&cholesky(s.gram()).unwrap());
            assert!((s.log_det() - direct).abs() <= 1e-8 * direct.abs().max(1.0));
            // det(V') = det(V)(1 + ||x||^2_{V^-1})
            let lemma = before + quad.ln_1p();
            assert!((direct - lemma).abs() <= 1e-8 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn ridge_fit_edge_cases() {
        let s = GramState::new(3, 1.0).unwrap();
        assert_eq!(ridge_fit(&s).unwrap(), DVector::zeros(3));
        let s = s.updated(&e(3, 0), 1.0).unwrap();
        let theta = ridge_fit(&s).unwrap();
        assert!((theta - e(3, 0) * 0.5).norm() < 1e-15);
    }

    #[test]
    fn ridge_fit_matches_explicit_inverse() {
        let mut stream = SeedPlan::new(9, "ridge").derive_stream(labels!["x"]);
        for d in 1..=6 {
            let mut s = GramState::new(d, 1.0).unwrap();
            for _ in 0..(5 * d) {
                let x = DVector::from_fn(d, |_, _| stream.next_normal());
                s.update(&x, stream.next_normal()).unwrap();
            }
            let theta = ridge_fit(&s).unwrap();
            let oracle = gauss_jordan_inverse(s.gram()) * s.response_sum();
            assert!((&theta - &oracle).norm() < 1e-8, "d={d}");
            let resid = (s.gram() * &theta - s.response_sum()).norm();
            assert!(resid <= 1e-9 * (s.response_sum().norm() + 1.0));
        }
    }

    #[test]
    fn beta_examples() {
        let s = GramState::new(3, 4.0).unwrap();
        let b = beta_radius(&s, (-2.0f64).exp(), 1.0, 3.0);
        assert!((b - 8.0).abs() < 1e-12, "{b}");
        assert_eq!(beta_radius(&s, 0.1, 0.0, 0.0), 0.0);

        // sqrt(2 ln(sqrt(2)/0.1)) + 1 = 3.3018074130013650 (mpmath, 30 digits)
        let s = GramState::new(2, 1.0).unwrap().updated(&e(2, 0), 0.0).unwrap();
        let b = beta_radius(&s, 0.1, 1.0, 1.0);
        assert!((b - 3.301_807_413_001_365).abs() < 1e-12, "{b}");
    }

    #[test]
    fn grid_round_examples() {
        let zero = DVector::from_vec(vec![0.0]);
        let r = |z: f64| grid_round(&DVector::from_vec(vec![z]), 1.0, &zero).unwrap()[0];
        assert_eq!(r(0.3), 0.5);
        assert_eq!(r(-0.2), -0.5);
        assert_eq!(r(2.5), 2.5);
        assert!(grid_round(&zero, 0.0, &zero).is_err());
        assert!(grid_round(&zero, -1.0, &zero).is_err());
        assert!(grid_round(&zero, 1.0, &DVector::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn rep_ridge_regime_checks() {
        assert!(RepRidgeParams::new(0.1, 0.2, 1.0, 1.0).is_err());
        assert!(RepRidgeParams::new(0.1, 0.25, 1.0, 1.0).is_ok());
        let p = RepRidgeParams::new(0.05, 0.3, 0.0, 0.0).unwrap();
        let shared = SeedPlan::new(1, "t").derive_stream(labels!["s"]);
        let s = GramState::new(2, 1.0).unwrap();
        assert!(matches!(
            rep_ridge(&s, &p, &shared, &labels!["k"]),
            Err(Error::DegenerateGrid)
        ));
    }

    #[test]
    fn rep_ridge_invariants_and_determinism() {
        let mut stream = SeedPlan::new(4, "rr").derive_stream(labels!["x"]);
        let shared = SeedPlan::new(4, "rr").derive_stream(labels!["shared"]);
        let p = RepRidgeParams::new(0.05, 0.3, 0.1, 1.0).unwrap();
        let mut s = GramState::new(3, 1.0).unwrap();
        for _ in 0..50 {
            let x = DVector::from_fn(3, |_, _| stream.next_normal());
            s.update(&x, stream.next_normal()).unwrap();
        }
        let est = rep_ridge(&s, &p, &shared, &labels!["call", 0]).unwrap();
        let again = rep_ridge(&s, &p, &shared, &labels!["call", 0]).unwrap();
        assert_eq!(est, again);
        assert!(est.same_output(&again));

        let expected_alpha = 2.0 * est.beta * 3f64.sqrt() / (0.3 - 0.1);
        assert!((est.alpha - expected_alpha).abs() <= 1e-15 * expected_alpha);
        assert!((est.beta_inflated / est.beta - (1.0 + 3.0 / 0.2)).abs() < 1e-12);
        let dist = v_norm(s.gram(), &(&est.theta_tilde - &est.theta_hat));
        assert!(dist <= est.alpha / 2.0 * 3f64.sqrt() * (1.0 + 1e-9));
        assert!(est.shift.iter().all(|u| (0.0..est.alpha).contains(u)));

        let other = rep_ridge(&s, &p, &shared, &labels!["call", 1]).unwrap();
        assert_ne!(other.shift, est.shift);
    }

    proptest! {
        #[test]
        fn rounding_error_bounded(
            zs in proptest::collection::vec(-1e3f64..1e3, 1..=8),
            alpha in 1e-3f64..1e2,
            fracs in proptest::collection::vec(0.0f64..1.0, 8),
        ) {
            let d = zs.len();
            let z = DVector::from_vec(zs);
            let shift = DVector::from_fn(d, |i, _| fracs[i] * alpha);
            let q = grid_round(&z, alpha, &shift).unwrap();
            for j in 0..d {
                prop_assert!((q[j] - z[j]).abs() <= alpha / 2.0 * (1.0 + 1e-12) + 1e-12);
            }
            // Rounding is idempotent: a midpoint maps to itself.
            let again = grid_round(&q, alpha, &shift).unwrap();
            for j in 0..d {
                prop_assert!((again[j] - q[j]).abs() <= 1e-9 * (1.0 + q[j].abs()));
            }
        }
    }
}
