//! Market dynamics of the state `X` and the wealth `Y`, payoffs, loss
//! structures and exercise schedules.
//!
//! The state follows `dX = diag[X] mu(X) dt + diag[X] sigma(X) dW` on the
//! positive orthant and the wealth `dY = mu_Y(t, X, Y, nu) dt + nu' sigma(X) dW`.
//! Models are supplied as closures together with the declared Lipschitz
//! constant `L` and bound `Lambda`; [`MarketModel::audit`] samples the
//! standing assumptions instead of proving them.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub type VecField = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
pub type MatField = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;
/// `(t, x, y, upsilon) -> mu_Y`.
pub type WealthDrift = Arc<dyn Fn(f64, &Vector, f64, &Vector) -> f64 + Send + Sync>;
/// `(t, x) -> g(t, x)`.
pub type PayoffFn = Arc<dyn Fn(f64, &Vector) -> f64 + Send + Sync>;
/// `(x, y) -> loss in [0, 1]`.
pub type LossFn = Arc<dyn Fn(&Vector, f64) -> f64 + Send + Sync>;

/// How the wealth drift `mu_Y` depends on the portfolio.
#[derive(Clone)]
pub enum PricingMode {
    /// `mu_Y = r y + zeta' sigma upsilon`, `zeta = sigma^{-1}(mu - r 1)`.
    LinearPricing { rate: f64 },
    /// Lending rate `r`, borrowing rate `R >= r`:
    /// `mu_Y = r y + zeta' sigma upsilon - (R - r) (y - upsilon' 1)^-`.
    TwoRate { lend: f64, borrow: f64 },
    ZeroDrift,
    Custom(WealthDrift),
}

impl fmt::Debug for PricingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PricingMode::LinearPricing { rate } => write!(f, "LinearPricing(r={rate})"),
            PricingMode::TwoRate { lend, borrow } => write!(f, "TwoRate(r={lend}, R={borrow})"),
            PricingMode::ZeroDrift => write!(f, "ZeroDrift"),
            PricingMode::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// Coefficients of the state and wealth dynamics at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Coeffs {
    pub mu_x: Vector,
    pub sigma_x: Matrix,
    pub mu_y: f64,
}

/// Scalar coefficients at a node of a one-dimensional grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeCoeffs {
    pub x: f64,
    pub mu: f64,
    pub sigma: f64,
    pub sigma_inv: f64,
    /// Risk premium `sigma^{-1}(mu - r)`.
    pub zeta: f64,
    pub mu_x: f64,
    pub sigma_x: f64,
}

#[derive(Clone)]
pub struct MarketModel {
    pub dim: usize,
    pub mu: VecField,
    pub sigma: MatField,
    pub sigma_inv: MatField,
    pub mode: PricingMode,
    pub lipschitz_l: f64,
    pub bound_lambda: f64,
    /// Exponential change of variable `Y~ = e^{lambda t} Y` applied to the
    /// wealth drift, see [`crate::hamiltonian::lambda_shift`].
    pub shift: Option<f64>,
}

impl fmt::Debug for MarketModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarketModel")
            .field("dim", &self.dim)
            .field("mode", &self.mode)
            .field("lipschitz_l", &self.lipschitz_l)
            .field("bound_lambda", &self.bound_lambda)
            .field("shift", &self.shift)
            .finish()
    }
}

fn negative_part(z: f64) -> f64 {
    if z < 0.0 {
        -z
    } else {
        0.0
    }
}

impl MarketModel {
    pub fn new(
        dim: usize,
        mu: VecField,
        sigma: MatField,
        sigma_inv: MatField,
        mode: PricingMode,
        lipschitz_l: f64,
        bound_lambda: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if !(lipschitz_l > 0.0 && lipschitz_l.is_finite()) {
            return Err(Error::Config(format!("Lipschitz constant must be positive, got {lipschitz_l}")));
        }
        if !(bound_lambda > 0.0 && bound_lambda.is_finite()) {
            return Err(Error::Config(format!("bound Lambda must be positive, got {bound_lambda}")));
        }
        match mode {
            PricingMode::TwoRate { lend, borrow } if !(borrow >= lend && lend >= 0.0) => {
                return Err(Error::Config(format!(
                    "two-rate pricing requires R >= r >= 0, got r={lend}, R={borrow}"
                )));
            }
            PricingMode::LinearPricing { rate } if !rate.is_finite() => {
                return Err(Error::Config("interest rate must be finite".into()));
            }
            _ => {}
        }
        Ok(Self { dim, mu, sigma, sigma_inv, mode, lipschitz_l, bound_lambda, shift: None })
    }

    /// One-dimensional Black–Scholes model with constant drift and volatility.
    /// `L` and `Lambda` are derived from the coefficients and the pricing mode.
    pub fn black_scholes(mu: f64, sigma: f64, mode: PricingMode) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) || !mu.is_finite() {
            return Err(Error::Config(format!("invalid Black-Scholes coefficients mu={mu}, sigma={sigma}")));
        }
        let base = mu.abs().max(sigma);
        let lipschitz = match &mode {
            PricingMode::LinearPricing { rate } => base.max((mu - rate).abs()).max(rate.abs()),
            PricingMode::TwoRate { lend, borrow } => {
                base.max((mu - lend).abs() + (borrow - lend).abs()).max(borrow.abs())
            }
            PricingMode::ZeroDrift => base,
            PricingMode::Custom(_) => {
                return Err(Error::Usage(
                    "custom wealth drifts must declare their constants through MarketModel::new".into(),
                ))
            }
        };
        let bound = mu.abs().max(sigma).max(1.0 / sigma);
        Self::new(
            1,
            Arc::new(move |_x: &Vector| Vector::from_element(1, mu)),
            Arc::new(move |_x: &Vector| Matrix::from_element(1, 1, sigma)),
            Arc::new(move |_x: &Vector| Matrix::from_element(1, 1, 1.0 / sigma)),
            mode,
            lipschitz,
            bound,
        )
    }

    /// Interest rate entering the risk premium.
    pub fn rate(&self) -> f64 {
        match self.mode {
            PricingMode::LinearPricing { rate } => rate,
            PricingMode::TwoRate { lend, .. } => lend,
            _ => 0.0,
        }
    }

    /// `zeta(x) = sigma^{-1}(x) (mu(x) - r 1)`.
    pub fn risk_premium(&self, x: &Vector) -> Vector {
        let r = self.rate();
        let excess = (self.mu)(x).map(|m| m - r);
        (self.sigma_inv)(x) * excess
    }

    /// True when `mu_Y` depends on `y`, in which case monotone stepping runs in
    /// exponentially shifted variables.
    pub fn is_y_dependent(&self) -> bool {
        match self.mode {
            PricingMode::LinearPricing { rate } => rate != 0.0,
            PricingMode::TwoRate { lend, borrow } => lend != 0.0 || borrow != 0.0,
            PricingMode::ZeroDrift => false,
            PricingMode::Custom(_) => true,
        }
    }

    fn base_mu_y(&self, t: f64, x: &Vector, y: f64, upsilon: &Vector) -> f64 {
        match &self.mode {
            PricingMode::ZeroDrift => 0.0,
            PricingMode::LinearPricing { rate } => {
                let zeta = self.risk_premium(x);
                let sig_ups = (self.sigma)(x) * upsilon;
                rate * y + zeta.dot(&sig_ups)
            }
            PricingMode::TwoRate { lend, borrow } => {
                let zeta = self.risk_premium(x);
                let sig_ups = (self.sigma)(x) * upsilon;
                lend * y + zeta.dot(&sig_ups) - (borrow - lend) * negative_part(y - upsilon.sum())
            }
            PricingMode::Custom(f) => f(t, x, y, upsilon),
        }
    }

    /// Wealth drift, including the exponential shift when present.
    pub fn mu_y(&self, t: f64, x: &Vector, y: f64, upsilon: &Vector) -> f64 {
        match self.shift {
            None => self.base_mu_y(t, x, y, upsilon),
            Some(lambda) => {
                let damp = (-lambda * t).exp();
                lambda * y + self.base_mu_y(t, x, damp * y, &(upsilon * damp)) / damp
            }
        }
    }

    /// Scalar wealth drift for `d = 1` using precomputed node coefficients.
    pub fn mu_y_1d(&self, t: f64, nc: &NodeCoeffs, y: f64, upsilon: f64) -> f64 {
        let base = |y: f64, ups: f64| -> f64 {
            match &self.mode {
                PricingMode::ZeroDrift => 0.0,
                PricingMode::LinearPricing { rate } => rate * y + nc.zeta * nc.sigma * ups,
                PricingMode::TwoRate { lend, borrow } => {
                    lend * y + nc.zeta * nc.sigma * ups - (borrow - lend) * negative_part(y - ups)
                }
                PricingMode::Custom(f) => {
                    f(t, &Vector::from_element(1, nc.x), y, &Vector::from_element(1, ups))
                }
            }
        };
        match self.shift {
            None => base(y, upsilon),
            Some(lambda) => {
                let damp = (-lambda * t).exp();
                lambda * y + base(damp * y, damp * upsilon) / damp
            }
        }
    }

    /// `mu_Y(t, x, ., .)` at a node as the minimum of affine maps
    /// `a0 + a_y y + a_u upsilon`, shift included. `None` for custom drifts.
    pub fn affine_pieces(&self, t: f64, nc: &NodeCoeffs) -> Option<Vec<[f64; 3]>> {
        let prem = nc.zeta * nc.sigma;
        let base = match &self.mode {
            PricingMode::ZeroDrift => vec![[0.0, 0.0, 0.0]],
            PricingMode::LinearPricing { rate } => vec![[0.0, *rate, prem]],
            PricingMode::TwoRate { lend, borrow } => {
                vec![[0.0, *lend, prem], [0.0, *borrow, prem - (borrow - lend)]]
            }
            PricingMode::Custom(_) => return None,
        };
        Some(match self.shift {
            None => base,
            Some(lambda) => {
                let damp = (-lambda * t).exp();
                base.into_iter().map(|[a0, ay, au]| [a0 / damp, lambda + ay, au]).collect()
            }
        })
    }

    pub fn node_coeffs(&self, x: f64) -> NodeCoeffs {
        let xv = Vector::from_element(1, x);
        let mu = (self.mu)(&xv)[0];
        let sigma = (self.sigma)(&xv)[(0, 0)];
        let sigma_inv = (self.sigma_inv)(&xv)[(0, 0)];
        let zeta = sigma_inv * (mu - self.rate());
        NodeCoeffs { x, mu, sigma, sigma_inv, zeta, mu_x: x * mu, sigma_x: x * sigma }
    }

    /// Multiplier turning a payoff into shifted-wealth units at time `t`.
    pub fn payoff_scale(&self, t: f64) -> f64 {
        self.shift.map_or(1.0, |lambda| (lambda * t).exp())
    }

    pub fn eval_coeffs(&self, t: f64, x: &Vector, y: f64, upsilon: &Vector) -> Result<Coeffs> {
        check_state(x, self.dim)?;
        if upsilon.len() != self.dim {
            return Err(Error::Usage(format!("portfolio has dimension {}, expected {}", upsilon.len(), self.dim)));
        }
        let diag = Matrix::from_diagonal(x);
        Ok(Coeffs {
            mu_x: &diag * (self.mu)(x),
            sigma_x: &diag * (self.sigma)(x),
            mu_y: self.mu_y(t, x, y, upsilon),
        })
    }

    /// Samples the standing assumptions: `sigma sigma^{-1} = I`, the bound
    /// `Lambda` on `mu`, `sigma`, `sigma^{-1}`, and the Lipschitz estimate on
    /// `mu_Y` with the declared `L`.
    pub fn audit(&self, samples: usize, seed: u64) -> ModelAudit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim;
        let mut identity_err: f64 = 0.0;
        let mut bound_violations = 0;
        let mut lipschitz_violations = 0;
        let mut worst_ratio: f64 = 0.0;
        let sample_x = |rng: &mut ChaCha8Rng| Vector::from_fn(d, |_, _| (rng.random_range(-3.0f64..3.0)).exp());
        for _ in 0..samples {
            let x = sample_x(&mut rng);
            let s = (self.sigma)(&x);
            let si = (self.sigma_inv)(&x);
            let err = (&s * &si - Matrix::identity(d, d)).abs().max();
            identity_err = identity_err.max(err);
            let tol = self.bound_lambda * (1.0 + 1e-12);
            if (self.mu)(&x).norm() > tol || s.norm() > tol * (d as f64).sqrt() || si.norm() > tol * (d as f64).sqrt()
            {
                bound_violations += 1;
            }

            let t = rng.random_range(0.0..1.0);
            let t2 = rng.random_range(0.0..1.0);
            let x2 = sample_x(&mut rng);
            let y = rng.random_range(0.0..10.0);
            let y2 = rng.random_range(0.0..10.0);
            let u = Vector::from_fn(d, |_, _| rng.random_range(-10.0..10.0));
            let u2 = Vector::from_fn(d, |_, _| rng.random_range(-10.0..10.0));
            let lhs = (self.mu_y(t2, &x2, y2, &u2) - self.mu_y(t, &x, y, &u)).abs();
            let rhs = self.lipschitz_l
                * ((t2 - t).abs() + (&x2 - &x).norm() * (1.0 + u.norm() + u2.norm()) + (&u2 - &u).norm() + (y2 - y).abs());
            if rhs > 0.0 {
                worst_ratio = worst_ratio.max(lhs / rhs);
            }
            if lhs > rhs * (1.0 + 1e-9) + 1e-12 {
                lipschitz_violations += 1;
            }
        }
        ModelAudit {
            samples,
            identity_err,
            bound_violations,
            lipschitz_violations,
            worst_lipschitz_ratio: worst_ratio,
            pass: identity_err <= 1e-10 && bound_violations == 0 && lipschitz_violations == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelAudit {
    pub samples: usize,
    pub identity_err: f64,
    pub bound_violations: usize,
    pub lipschitz_violations: usize,
    /// Largest observed `|d mu_Y| / (L * distance)`; at most 1 when the
    /// declared constant is valid.
    pub worst_lipschitz_ratio: f64,
    pub pass: bool,
}

pub(crate) fn check_state(x: &Vector, dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::Usage(format!("state has dimension {}, expected {dim}", x.len())));
    }
    if x.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
        return Err(Error::Domain(format!("state must be strictly positive, got {:?}", x.as_slice())));
    }
    Ok(())
}

/// Exercise payoff `g(t, x) >= 0`.
#[derive(Clone)]
pub struct Payoff {
    f: PayoffFn,
    label: String,
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Payoff({})", self.label)
    }
}

impl Payoff {
    pub fn from_fn(label: impl Into<String>, f: PayoffFn) -> Self {
        Self { f, label: label.into() }
    }

    /// `1_{x_1 >= K}`.
    pub fn digital(strike: f64) -> Self {
        Self::from_fn(format!("digital(K={strike})"), Arc::new(move |_t, x: &Vector| if x[0] >= strike { 1.0 } else { 0.0 }))
    }

    pub fn call(strike: f64) -> Self {
        Self::from_fn(format!("call(K={strike})"), Arc::new(move |_t, x: &Vector| (x[0] - strike).max(0.0)))
    }

    pub fn put(strike: f64) -> Self {
        Self::from_fn(format!("put(K={strike})"), Arc::new(move |_t, x: &Vector| (strike - x[0]).max(0.0)))
    }

    pub fn constant(c: f64) -> Self {
        Self::from_fn(format!("constant({c})"), Arc::new(move |_t, _x: &Vector| c))
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eval(&self, t: f64, x: &Vector) -> f64 {
        (self.f)(t, x)
    }

    pub fn eval_scalar(&self, t: f64, x: f64) -> f64 {
        (self.f)(t, &Vector::from_element(1, x))
    }
}

#[derive(Clone)]
pub enum LossKind {
    /// Quantile hedging: `1_{y >= g}`.
    Indicator,
    /// `min(y / g, 1)`.
    Ramp,
    /// User loss `(x, y) -> [0, 1]`, already rescaled to the unit interval.
    Custom(LossFn),
}

#[derive(Clone)]
pub struct LossSpec {
    pub kind: LossKind,
    pub payoff: Payoff,
}

impl fmt::Debug for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            LossKind::Indicator => "Indicator",
            LossKind::Ramp => "Ramp",
            LossKind::Custom(_) => "Custom",
        };
        write!(f, "LossSpec({kind}, {:?})", self.payoff)
    }
}

const INVERSE_TOL: f64 = 1e-10;

impl LossSpec {
    pub fn indicator(payoff: Payoff) -> Self {
        Self { kind: LossKind::Indicator, payoff }
    }

    pub fn ramp(payoff: Payoff) -> Self {
        Self { kind: LossKind::Ramp, payoff }
    }

    /// `l o G(x, y)` at time `t`.
    pub fn loss(&self, t: f64, x: &Vector, y: f64) -> f64 {
        match &self.kind {
            LossKind::Indicator => {
                if y >= self.payoff.eval(t, x) {
                    1.0
                } else {
                    0.0
                }
            }
            LossKind::Ramp => {
                let g = self.payoff.eval(t, x);
                if g <= 0.0 {
                    1.0
                } else {
                    (y / g).clamp(0.0, 1.0)
                }
            }
            LossKind::Custom(f) => f(x, y),
        }
    }

    /// Smallest `y >= 0` with `l o G(x, y) >= p`, evaluated at time `t`.
    pub fn terminal_value(&self, t: f64, x: &Vector, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("probability level must lie in [0, 1], got {p}")));
        }
        let g = self.payoff.eval(t, x);
        if let LossKind::Indicator = self.kind {
            // step inverse is exact
            return Ok(if p > 0.0 { g } else { 0.0 });
        }
        if self.loss(t, x, 0.0) >= p {
            return Ok(0.0);
        }
        let mut hi = g * (1.0 + 1e-6) + 1.0;
        if self.loss(t, x, hi) < p {
            return Err(Error::Domain(format!("loss never reaches level {p} on [0, {hi}]")));
        }
        let mut lo = 0.0;
        while hi - lo > INVERSE_TOL {
            let mid = 0.5 * (lo + hi);
            if self.loss(t, x, mid) >= p {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }
}

/// Generalized inverse of the loss at the terminal date `horizon`.
pub fn terminal_value_from_loss(loss: &LossSpec, horizon: f64, x: &Vector, p: f64) -> Result<f64> {
    check_state(x, x.len())?;
    loss.terminal_value(horizon, x, p)
}

/// Dates `0 = t_0 < t_1 < ... < t_n = T` and the exercise payoff.
#[derive(Debug, Clone)]
pub struct ExerciseSchedule {
    dates: Vec<f64>,
    pub payoff: Payoff,
}

impl ExerciseSchedule {
    /// `exercise_dates` are the dates in `(0, T]`; the origin is prepended
    /// when absent.
    pub fn new(exercise_dates: &[f64], payoff: Payoff) -> Result<Self> {
        let mut dates = Vec::with_capacity(exercise_dates.len() + 1);
        if exercise_dates.first().is_none_or(|&t| t != 0.0) {
            dates.push(0.0);
        }
        dates.extend_from_slice(exercise_dates);
        if dates.len() < 2 {
            return Err(Error::Config("schedule needs at least one exercise date after 0".into()));
        }
        if dates.iter().any(|t| !t.is_finite()) || dates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("exercise dates must be strictly increasing and positive: {dates:?}")));
        }
        Ok(Self { dates, payoff })
    }

    pub fn european(horizon: f64, payoff: Payoff) -> Result<Self> {
        Self::new(&[horizon], payoff)
    }

    /// All dates including `t_0 = 0`.
    pub fn dates(&self) -> &[f64] {
        &self.dates
    }

    pub fn exercise_dates(&self) -> &[f64] {
        &self.dates[1..]
    }

    pub fn horizon(&self) -> f64 {
        *self.dates.last().expect("schedule is non-empty")
    }
}
