//! The control Hamiltonian `J^a`, its renormalization `H^eta` on the unit
//! sphere of `R^{d+1}`, and the full operator `min{y, sup_eta H^eta}`.
//!
//! Controls `a in R^d` are mapped to the sphere by
//! `lift(a) = (1, a) / sqrt(1 + |a|^2)`; the equator `eta^1 = 0` carries the
//! limit value `-A^{pp} / 2` so that `eta -> H^eta` is continuous.

use std::cmp::Ordering;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{check_state, MarketModel, Matrix, PricingMode, Vector};

const SPHERE_TOL: f64 = 1e-12;
const EQUATOR_TOL: f64 = 1e-14;
const SYMMETRY_TOL: f64 = 1e-12;

/// A point `eta` of the unit sphere in `R^{d+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereControl {
    eta: Vector,
}

impl SphereControl {
    pub fn new(eta: Vector) -> Result<Self> {
        if eta.len() < 2 {
            return Err(Error::Usage("sphere controls live in R^{d+1} with d >= 1".into()));
        }
        let n = eta.norm();
        if (n - 1.0).abs() > SPHERE_TOL {
            return Err(Error::Domain(format!("control is not on the unit sphere (norm {n})")));
        }
        Ok(Self { eta })
    }

    /// Equator point `(0, sign * e_i)`, `i` zero-based in `R^d`.
    pub fn equator(dim: usize, i: usize, sign: f64) -> Self {
        let mut eta = Vector::zeros(dim + 1);
        eta[i + 1] = sign.signum();
        Self { eta }
    }

    pub fn dim(&self) -> usize {
        self.eta.len() - 1
    }

    pub fn first(&self) -> f64 {
        self.eta[0]
    }

    pub fn as_vector(&self) -> &Vector {
        &self.eta
    }

    /// Membership in the equator `eta^1 = 0`.
    pub fn is_boundary(&self) -> bool {
        self.eta[0].abs() < EQUATOR_TOL
    }

    /// `(eta^2, ..., eta^{d+1}) / eta^1`, undefined on the equator.
    pub fn project(&self) -> Option<Vector> {
        if self.is_boundary() {
            None
        } else {
            Some(self.eta.rows(1, self.dim()).into_owned() / self.eta[0])
        }
    }
}

pub fn lift(a: &Vector) -> SphereControl {
    let s = (1.0 + a.norm_squared()).sqrt();
    let mut eta = Vector::zeros(a.len() + 1);
    eta[0] = 1.0 / s;
    eta.rows_mut(1, a.len()).copy_from(&(a / s));
    SphereControl { eta }
}

/// The argument `(t, x, y, b, q, A)` of the operator, with `q = (q^x, q^p)`
/// and `A` split into the blocks `A^{xx}`, `A^{xp}`, `A^{pp}`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorPoint {
    pub t: f64,
    pub x: Vector,
    pub y: f64,
    pub b: f64,
    pub q: Vector,
    pub a: Matrix,
}

impl OperatorPoint {
    pub fn new(t: f64, x: Vector, y: f64, b: f64, q: Vector, a: Matrix) -> Result<Self> {
        let d = x.len();
        check_state(&x, d)?;
        if q.len() != d + 1 || a.nrows() != d + 1 || a.ncols() != d + 1 {
            return Err(Error::Usage(format!("gradient/Hessian must have size {}", d + 1)));
        }
        if (&a - a.transpose()).abs().max() > SYMMETRY_TOL {
            return Err(Error::Domain("Hessian argument must be symmetric".into()));
        }
        Ok(Self { t, x, y, b, q, a })
    }

    /// Convenience constructor for `d = 1`.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(t: f64, x: f64, y: f64, b: f64, qx: f64, qp: f64, axx: f64, axp: f64, app: f64) -> Result<Self> {
        Self::new(
            t,
            Vector::from_element(1, x),
            y,
            b,
            Vector::from_vec(vec![qx, qp]),
            Matrix::from_row_slice(2, 2, &[axx, axp, axp, app]),
        )
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn q_x(&self) -> Vector {
        self.q.rows(0, self.dim()).into_owned()
    }

    pub fn q_p(&self) -> f64 {
        self.q[self.dim()]
    }

    pub fn a_pp(&self) -> f64 {
        let d = self.dim();
        self.a[(d, d)]
    }
}

/// `sigma_bar(x, a)`: the rows of `sigma_X(x)` stacked over `a'`.
fn sigma_bar(sigma_x: &Matrix, a: &Vector) -> Matrix {
    let d = a.len();
    let mut s = DMatrix::zeros(d + 1, d);
    s.rows_mut(0, d).copy_from(sigma_x);
    s.row_mut(d).copy_from(&a.transpose());
    s
}

/// `J^a(t, x, y, q, A) = mu_hat_Y - mu_X' q^x - Tr[sigma_bar sigma_bar' A] / 2`
/// with `mu_hat_Y = mu_Y(t, x, y, (q' sigma_bar sigma^{-1})')`.
pub fn j_a(theta: &OperatorPoint, model: &MarketModel, a: &Vector) -> Result<f64> {
    let d = theta.dim();
    if d != model.dim || a.len() != d {
        return Err(Error::Usage(format!("dimension mismatch: point {d}, model {}, control {}", model.dim, a.len())));
    }
    let diag = Matrix::from_diagonal(&theta.x);
    let mu_x = &diag * (model.mu)(&theta.x);
    let sigma_x = &diag * (model.sigma)(&theta.x);
    let sb = sigma_bar(&sigma_x, a);
    let upsilon = (model.sigma_inv)(&theta.x).transpose() * sb.transpose() * &theta.q;
    let mu_hat = model.mu_y(theta.t, &theta.x, theta.y, &upsilon);
    let trace = (&sb * sb.transpose() * &theta.a).trace();
    Ok(mu_hat - mu_x.dot(&theta.q_x()) - 0.5 * trace)
}

/// Renormalized operator: `(eta^1)^2 (-b + J^{proj(eta)})` off the equator
/// and `-A^{pp} / 2` on it.
pub fn eval_h(eta: &SphereControl, theta: &OperatorPoint, model: &MarketModel) -> Result<f64> {
    check_state(&theta.x, theta.dim())?;
    if eta.dim() != theta.dim() {
        return Err(Error::Usage("sphere control and operator point differ in dimension".into()));
    }
    match eta.project() {
        None => Ok(-0.5 * theta.a_pp()),
        Some(a) => {
            let e1 = eta.first();
            Ok(e1 * e1 * (-theta.b + j_a(theta, model, &a)?))
        }
    }
}

/// Real value or the `+infinity` sentinel of an unbounded supremum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extended {
    Finite(f64),
    PosInfinity,
}

impl Extended {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Extended::PosInfinity)
    }

    pub fn finite(&self) -> Option<f64> {
        match *self {
            Extended::Finite(v) => Some(v),
            Extended::PosInfinity => None,
        }
    }

    pub fn min(self, other: Extended) -> Extended {
        match (self, other) {
            (Extended::PosInfinity, o) | (o, Extended::PosInfinity) => o,
            (Extended::Finite(a), Extended::Finite(b)) => Extended::Finite(a.min(b)),
        }
    }

    pub fn max(self, other: Extended) -> Extended {
        match (self, other) {
            (Extended::PosInfinity, _) | (_, Extended::PosInfinity) => Extended::PosInfinity,
            (Extended::Finite(a), Extended::Finite(b)) => Extended::Finite(a.max(b)),
        }
    }
}

impl PartialOrd for Extended {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Extended::PosInfinity, Extended::PosInfinity) => Some(Ordering::Equal),
            (Extended::PosInfinity, _) => Some(Ordering::Greater),
            (_, Extended::PosInfinity) => Some(Ordering::Less),
            (Extended::Finite(a), Extended::Finite(b)) => a.partial_cmp(b),
        }
    }
}

/// Symmetric one-dimensional control grid `{0} U {+-sinh(u_j)}` with `u_j`
/// uniform on `[0, asinh(a_max)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    values: Vec<f64>,
    a_max: f64,
}

impl ControlGrid {
    pub const DEFAULT_A_MAX: f64 = 20.0;
    pub const DEFAULT_POINTS_PER_SIDE: usize = 65;

    pub fn new(a_max: f64, points_per_side: usize) -> Result<Self> {
        if !(a_max > 0.0 && a_max.is_finite()) || points_per_side < 2 {
            return Err(Error::Config(format!(
                "control grid needs a_max > 0 and at least 2 points per side, got a_max={a_max}, points={points_per_side}"
            )));
        }
        let umax = a_max.asinh();
        let n = points_per_side - 1;
        let mut values = Vec::with_capacity(2 * n + 1);
        for j in (1..=n).rev() {
            values.push(-(umax * j as f64 / n as f64).sinh());
        }
        values.push(0.0);
        for j in 1..=n {
            values.push((umax * j as f64 / n as f64).sinh());
        }
        // exact endpoint
        values[0] = -a_max;
        values[2 * n] = a_max;
        Ok(Self { values, a_max })
    }

    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Usage("control grid is empty".into()));
        }
        values.sort_by(|a, b| a.total_cmp(b));
        let n = values.len();
        for i in 0..n {
            if (values[i] + values[n - 1 - i]).abs() > 1e-12 * (1.0 + values[i].abs()) {
                return Err(Error::Usage("control grid must be symmetric about 0".into()));
            }
        }
        let a_max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(Self { values, a_max })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn a_max(&self) -> f64 {
        self.a_max
    }

    /// Tensor-product controls in `R^d`.
    pub fn controls(&self, dim: usize) -> Vec<Vector> {
        let mut out: Vec<Vec<f64>> = vec![Vec::new()];
        for _ in 0..dim {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    self.values.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        out.into_iter().map(Vector::from_vec).collect()
    }
}

impl Default for ControlGrid {
    fn default() -> Self {
        Self::new(Self::DEFAULT_A_MAX, Self::DEFAULT_POINTS_PER_SIDE).expect("default grid is valid")
    }
}

/// Exact supremum of `a -> J^a` for `d = 1` under linear pricing, where
/// `J^a = c0 + c1 a - A^{pp} a^2 / 2` with `c1 = zeta q^p - sigma_X A^{xp}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticSup {
    pub sup_j: Extended,
    /// Vertex `a* = c1 / A^{pp}` when `A^{pp} > 0`.
    pub argmax: Option<f64>,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

pub fn quadratic_sup(theta: &OperatorPoint, model: &MarketModel) -> Option<QuadraticSup> {
    if theta.dim() != 1 || model.dim != 1 || model.shift.is_some() {
        return None;
    }
    let rate = match model.mode {
        PricingMode::LinearPricing { rate } => rate,
        PricingMode::ZeroDrift => 0.0,
        _ => return None,
    };
    let nc = model.node_coeffs(theta.x[0]);
    let zeta = if matches!(model.mode, PricingMode::ZeroDrift) { 0.0 } else { nc.zeta };
    let (qx, qp) = (theta.q[0], theta.q[1]);
    let (axx, axp, app) = (theta.a[(0, 0)], theta.a[(0, 1)], theta.a[(1, 1)]);
    let c0 = rate * theta.y + zeta * nc.sigma_x * qx - nc.mu_x * qx - 0.5 * nc.sigma_x * nc.sigma_x * axx;
    let c1 = zeta * qp - nc.sigma_x * axp;
    let c2 = -0.5 * app;
    let (sup_j, argmax) = if app > 0.0 {
        let a_star = c1 / app;
        (Extended::Finite(c0 + c1 * c1 / (2.0 * app)), Some(a_star))
    } else if app < 0.0 || c1 != 0.0 {
        (Extended::PosInfinity, None)
    } else {
        (Extended::Finite(c0), None)
    };
    Some(QuadraticSup { sup_j, argmax, c0, c1, c2 })
}

/// Largest `J^a` over the grid controls, with its maximizer.
pub fn sup_j_grid(theta: &OperatorPoint, model: &MarketModel, grid: &ControlGrid) -> Result<(f64, Vector)> {
    let mut best: Option<(f64, Vector)> = None;
    for a in grid.controls(theta.dim()) {
        let v = j_a(theta, model, &a)?;
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, a));
        }
    }
    best.ok_or_else(|| Error::Usage("control grid is empty".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupH {
    pub value: f64,
    pub argmax: SphereControl,
    /// Supremum of `J^a` over `a in R`, available for linear pricing in `d = 1`.
    pub closed_form: Option<QuadraticSup>,
}

/// Maximum of `H^eta` over the lifted grid controls and the equator points
/// `(0, +-e_i)`; for linear pricing with `A^{pp} > 0` the lifted quadratic
/// vertex is an extra candidate.
pub fn sup_h(theta: &OperatorPoint, model: &MarketModel, grid: &ControlGrid) -> Result<SupH> {
    if grid.values().is_empty() {
        return Err(Error::Usage("control grid is empty".into()));
    }
    let d = theta.dim();
    let mut candidates: Vec<SphereControl> = grid.controls(d).iter().map(lift).collect();
    for i in 0..d {
        candidates.push(SphereControl::equator(d, i, 1.0));
        candidates.push(SphereControl::equator(d, i, -1.0));
    }
    let closed_form = quadratic_sup(theta, model);
    if let Some(a_star) = closed_form.and_then(|c| c.argmax) {
        candidates.push(lift(&Vector::from_element(1, a_star)));
    }
    let mut best: Option<(f64, SphereControl)> = None;
    for eta in candidates {
        let v = eval_h(&eta, theta, model)?;
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, eta));
        }
    }
    let (value, argmax) = best.expect("candidate set is non-empty");
    Ok(SupH { value, argmax, closed_form })
}

/// `min{y, sup_eta H^eta}`.
pub fn script_h(theta: &OperatorPoint, model: &MarketModel, grid: &ControlGrid) -> Result<f64> {
    Ok(theta.y.min(sup_h(theta, model, grid)?.value))
}

/// Model for `Y~ = e^{lambda t} Y`: its wealth drift is
/// `lambda y + e^{lambda t} mu_Y(t, x, e^{-lambda t} y, e^{-lambda t} upsilon)`,
/// strictly increasing in `y` whenever `lambda > L`.
pub fn lambda_shift(model: &MarketModel, lambda: f64) -> Result<MarketModel> {
    if !(lambda > model.lipschitz_l) || !lambda.is_finite() {
        return Err(Error::Usage(format!(
            "shift requires lambda > L = {}, got {lambda}",
            model.lipschitz_l
        )));
    }
    if model.shift.is_some() {
        return Err(Error::Usage("model is already shifted".into()));
    }
    let mut shifted = model.clone();
    shifted.shift = Some(lambda);
    Ok(shifted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bs_linear() -> MarketModel {
        MarketModel::black_scholes(0.08, 0.2, PricingMode::LinearPricing { rate: 0.0 }).unwrap()
    }

    #[test]
    fn lift_examples() {
        let e = lift(&Vector::zeros(1));
        assert_eq!(e.as_vector().as_slice(), &[1.0, 0.0]);
        let e = lift(&Vector::from_element(1, 1.0));
        assert_relative_eq!(e.as_vector()[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_relative_eq!(e.as_vector()[1], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        let back = lift(&Vector::from_element(1, 3.5)).project().unwrap();
        assert!((back[0] - 3.5).abs() <= 1e-12);
    }

    #[test]
    fn sphere_membership_is_enforced() {
        assert!(SphereControl::new(Vector::from_vec(vec![1.0, 1.0])).is_err());
        let eq = SphereControl::new(Vector::from_vec(vec![0.0, 1.0])).unwrap();
        assert!(eq.is_boundary());
        assert!(eq.project().is_none());
    }

    #[test]
    fn equator_branch() {
        let m = bs_linear();
        let theta = OperatorPoint::scalar(0.0, 1.0, 1.0, 0.3, 0.1, 0.2, 0.5, 0.1, 2.0).unwrap();
        let eq = SphereControl::equator(1, 0, 1.0);
        assert_eq!(eval_h(&eq, &theta, &m).unwrap(), -1.0);
    }

    #[test]
    fn zero_drift_time_term_only() {
        let m = MarketModel::black_scholes(0.1, 0.2, PricingMode::ZeroDrift).unwrap();
        let theta = OperatorPoint::scalar(0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(eval_h(&lift(&Vector::zeros(1)), &theta, &m).unwrap(), -1.0);
    }

    #[test]
    fn large_controls_approach_equator_value() {
        let m = MarketModel::black_scholes(0.1, 0.2, PricingMode::LinearPricing { rate: 0.0 }).unwrap();
        let theta = OperatorPoint::scalar(0.3, 1.2, 0.5, 0.4, 0.3, -0.2, 0.7, 0.1, 2.0).unwrap();
        let v = eval_h(&lift(&Vector::from_element(1, 1e6)), &theta, &m).unwrap();
        assert!((v + 1.0).abs() <= 1e-4, "{v}");
    }

    #[test]
    fn off_equator_matches_dense_trace_for_zero_drift() {
        let m = MarketModel::black_scholes(0.1, 0.3, PricingMode::ZeroDrift).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (axx, axp, app) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let x: f64 = rng.random_range(0.2..3.0);
            let a: f64 = rng.random_range(-10.0..10.0);
            let theta = OperatorPoint::scalar(0.0, x, 1.0, 0.0, 0.0, 0.0, axx, axp, app).unwrap();
            let eta = lift(&Vector::from_element(1, a));
            let sb = Matrix::from_row_slice(2, 1, &[0.3 * x, a]);
            let trace = (&sb * sb.transpose() * &theta.a).trace();
            let e1 = eta.first();
            let expected = -e1 * e1 * 0.5 * trace;
            let got = eval_h(&eta, &theta, &m).unwrap();
            assert!((got - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn closed_form_quadratic_sup() {
        // sigma_X = 1 at x = 5 with sigma = 0.2; zeta = mu / sigma = 0.4
        let m = bs_linear();
        let theta = OperatorPoint::scalar(0.0, 5.0, 3.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0).unwrap();
        let cf = quadratic_sup(&theta, &m).unwrap();
        assert_relative_eq!(cf.sup_j.finite().unwrap(), 0.04, epsilon = 1e-15);
        assert_relative_eq!(cf.argmax.unwrap(), 0.2, epsilon = 1e-15);
        let (grid_sup, _) = sup_j_grid(&theta, &m, &ControlGrid::default()).unwrap();
        assert!(grid_sup <= 0.04 + 1e-9);
        // dense grid search agrees to grid resolution
        let dense = ControlGrid::new(20.0, 4001).unwrap();
        let (dense_sup, a) = sup_j_grid(&theta, &m, &dense).unwrap();
        assert!((dense_sup - 0.04).abs() <= 1e-6, "{dense_sup} at {a}");
        let sh = sup_h(&theta, &m, &ControlGrid::default()).unwrap();
        let e1 = lift(&Vector::from_element(1, 0.2)).first();
        assert!(sh.value >= e1 * e1 * 0.04 - 1e-15);
    }

    #[test]
    fn negative_curvature_is_unbounded() {
        let m = bs_linear();
        let theta = OperatorPoint::scalar(0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0).unwrap();
        assert_eq!(quadratic_sup(&theta, &m).unwrap().sup_j, Extended::PosInfinity);
        let s10 = sup_j_grid(&theta, &m, &ControlGrid::new(10.0, 65).unwrap()).unwrap().0;
        let s100 = sup_j_grid(&theta, &m, &ControlGrid::new(100.0, 65).unwrap()).unwrap().0;
        let s1000 = sup_j_grid(&theta, &m, &ControlGrid::new(1000.0, 65).unwrap()).unwrap().0;
        assert!(s10 < s100 && s100 < s1000);
        assert!(s1000 > 4.0e5);
        // renormalized operator stays bounded: the equator value 1/2 dominates
        let sh = sup_h(&theta, &m, &ControlGrid::default()).unwrap();
        assert!(sh.value.is_finite());
        assert!(sh.value >= 0.5);
    }

    #[test]
    fn flat_curvature_with_linear_growth_is_unbounded() {
        let m = bs_linear();
        let theta = OperatorPoint::scalar(0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0).unwrap();
        assert!(quadratic_sup(&theta, &m).unwrap().sup_j.is_infinite());
        let theta = OperatorPoint::scalar(0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(quadratic_sup(&theta, &m).unwrap().sup_j, Extended::Finite(0.0));
    }

    #[test]
    fn zero_drift_sup_attained_on_equator() {
        let m = MarketModel::black_scholes(0.1, 0.2, PricingMode::ZeroDrift).unwrap();
        let theta = OperatorPoint::scalar(0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        let sh = sup_h(&theta, &m, &ControlGrid::default()).unwrap();
        assert_eq!(sh.value, 0.0);
        assert!(sh.argmax.is_boundary());
    }

    #[test]
    fn script_h_takes_minimum_with_y() {
        let m = bs_linear();
        let zero_y = OperatorPoint::scalar(0.0, 5.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0).unwrap();
        assert_eq!(script_h(&zero_y, &m, &ControlGrid::default()).unwrap(), 0.0);
        let big_y = OperatorPoint::scalar(0.0, 5.0, 10.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0).unwrap();
        let sup = sup_h(&big_y, &m, &ControlGrid::default()).unwrap().value;
        assert_eq!(script_h(&big_y, &m, &ControlGrid::default()).unwrap(), sup);
        let small_y = OperatorPoint::scalar(0.0, 5.0, 0.01, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0).unwrap();
        assert!(sup_h(&small_y, &m, &ControlGrid::default()).unwrap().value > 0.01);
        assert_eq!(script_h(&small_y, &m, &ControlGrid::default()).unwrap(), 0.01);
    }

    #[test]
    fn empty_grid_is_usage_error() {
        assert!(matches!(ControlGrid::from_values(vec![]), Err(Error::Usage(_))));
        assert!(matches!(ControlGrid::from_values(vec![-1.0, 2.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn control_grid_layout() {
        let g = ControlGrid::default();
        assert_eq!(g.values().len(), 129);
        assert_eq!(g.values()[64], 0.0);
        assert_eq!(g.values()[128], 20.0);
        assert_eq!(g.values()[0], -20.0);
        assert!(g.values().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn lambda_shift_preconditions() {
        let m = MarketModel::black_scholes(0.1, 0.2, PricingMode::TwoRate { lend: 0.02, borrow: 0.06 }).unwrap();
        assert!(matches!(lambda_shift(&m, 0.0), Err(Error::Usage(_))));
        assert!(matches!(lambda_shift(&m, m.lipschitz_l), Err(Error::Usage(_))));
        let s = lambda_shift(&m, m.lipschitz_l + 1.0).unwrap();
        assert!(matches!(lambda_shift(&s, 5.0), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_drift_shift_adds_lambda_y() {
        let m = MarketModel::black_scholes(0.1, 0.2, PricingMode::ZeroDrift).unwrap();
        let s = lambda_shift(&m, 1.0).unwrap();
        let t0 = OperatorPoint::scalar(0.4, 1.0, 2.0, 0.0, 0.3, 0.1, 0.2, 0.0, 1.0).unwrap();
        let mut t1 = t0.clone();
        t1.y = 3.0;
        let a = Vector::from_element(1, 0.7);
        let d = j_a(&t1, &s, &a).unwrap() - j_a(&t0, &s, &a).unwrap();
        assert_relative_eq!(d, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn shifted_hamiltonian_matches_rescaling_identity() {
        let m = MarketModel::black_scholes(0.1, 0.2, PricingMode::TwoRate { lend: 0.02, borrow: 0.06 }).unwrap();
        let lambda = 1.3;
        let s = lambda_shift(&m, lambda).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t: f64 = rng.random_range(0.0..1.0);
            let theta = OperatorPoint::scalar(
                t,
                rng.random_range(0.3..3.0),
                rng.random_range(0.0..5.0),
                0.0,
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                0.0,
                rng.random_range(-3.0..3.0),
            )
            .unwrap();
            let a = Vector::from_element(1, rng.random_range(-5.0..5.0));
            let damp = (-lambda * t).exp();
            let mut scaled = theta.clone();
            scaled.y *= damp;
            scaled.q *= damp;
            scaled.a *= damp;
            let expected = lambda * theta.y + j_a(&scaled, &m, &a).unwrap() / damp;
            let got = j_a(&theta, &s, &a).unwrap();
            assert!((got - expected).abs() <= 1e-10 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn shifted_two_rate_is_strictly_increasing_in_y() {
        let m = MarketModel::black_scholes(0.1, 0.2, PricingMode::TwoRate { lend: 0.02, borrow: 0.06 }).unwrap();
        let lambda = m.lipschitz_l + 1.0;
        let s = lambda_shift(&m, lambda).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-4;
        for _ in 0..1000 {
            let theta = OperatorPoint::scalar(
                rng.random_range(0.0..1.0),
                rng.random_range(0.3..3.0),
                rng.random_range(0.0..5.0),
                0.0,
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                0.0,
                rng.random_range(-5.0..5.0),
            )
            .unwrap();
            let a = Vector::from_element(1, rng.random_range(-5.0..5.0));
            let mut up = theta.clone();
            up.y += h;
            let slope = (j_a(&up, &s, &a).unwrap() - j_a(&theta, &s, &a).unwrap()) / h;
            assert!(slope >= lambda - m.lipschitz_l - 1e-6, "slope {slope}");
        }
    }

    proptest::proptest! {
        #[test]
        fn lift_projection_round_trip(a in -1e3f64..1e3) {
            let eta = lift(&Vector::from_element(1, a));
            proptest::prop_assert!((eta.as_vector().norm() - 1.0).abs() <= 1e-12);
            proptest::prop_assert!(eta.first() > 0.0);
            let back = eta.project().unwrap()[0];
            proptest::prop_assert!((back - a).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
