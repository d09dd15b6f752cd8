//! Executable checks of lemma-level statements: the strict super-solution
//! bounds, the boundary counterexample family, continuity of the
//! renormalized operator at the equator, and monotonicity of the time step.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::csv::fmt_num;
use crate::error::{Error, Result};
use crate::hamiltonian::{eval_h, lift, quadratic_sup, sup_h, ControlGrid, Extended, OperatorPoint, SphereControl};
use crate::model::{MarketModel, Matrix, PricingMode, Vector};
use crate::scheme::{Grid2D, Stepper, ValueSurface};

/// Relative slack for round-off in the inequality checks.
const ROUND_OFF: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    pub name: String,
    pub samples: usize,
    pub violations: usize,
    /// Smallest slack over all samples; negative exactly when a check failed.
    pub worst_margin: f64,
    pub pass: bool,
}

impl LemmaReport {
    fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), samples: 0, violations: 0, worst_margin: f64::INFINITY, pass: true }
    }

    /// Records one check `value >= bound` with slack relative to `scale`.
    fn record(&mut self, value: f64, bound: f64, scale: f64) {
        let margin = value - bound;
        self.worst_margin = self.worst_margin.min(margin);
        if !(margin >= -ROUND_OFF * scale.abs().max(1.0)) {
            self.violations += 1;
        }
    }

    fn finish(mut self, samples: usize) -> Self {
        self.samples = samples;
        self.pass = self.violations == 0;
        self
    }
}

/// CSV `name,samples,violations,worst_margin,pass`.
pub fn reports_csv(reports: &[LemmaReport]) -> String {
    let mut s = String::from("name,samples,violations,worst_margin,pass\n");
    for r in reports {
        let _ = writeln!(s, "{},{},{},{},{}", r.name, r.samples, r.violations, fmt_num(r.worst_margin), r.pass);
    }
    s
}

/// Constants of the strict super-solution construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupersolutionConstants {
    /// `c = L Lambda`.
    pub c_bar: f64,
    /// `4 c^2 + 1`.
    pub theta: f64,
    pub kappa: f64,
}

impl SupersolutionConstants {
    pub fn new(model: &MarketModel, k: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::Usage("growth order k must be at least 1".into()));
        }
        let (l, big) = (model.lipschitz_l, model.bound_lambda);
        let kf = k as f64;
        let c_bar = l * big;
        let kappa = 2.0 * (kf + 1.0) * (l + big)
            + big * big * model.dim as f64 / 2.0 * (2.0 * kf * (2.0 * kf - 1.0) + 6.0)
            + 1.0;
        Ok(Self { c_bar, theta: 4.0 * c_bar * c_bar + 1.0, kappa })
    }
}

fn unit_sphere(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|z| z * z).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|z| z / norm).collect();
        }
    }
}

/// Samples `(t, x, p, eta)` with `t in [0, 1]`, `T = 1`, `x` log-uniform in
/// `[e^-4, e^4]^d`, `p in [0, 1]` and `eta` uniform on the sphere off the
/// equator, and checks the two displayed lower bounds
/// `A >= 2 xi c^2 e^{-4c}` and `B >= 0` of the proof, evaluated from the
/// explicit derivatives of `phi(t, p) = e^{kappa(T-t)}(theta - e^{-4cp}/2)`
/// and `h(t, x) = e^{kappa(T-t)}(|x|^{2k} + |x|^{-2})`.
pub fn check_strict_supersolution(model: &MarketModel, k: u32, xi: f64, samples: usize, seed: u64) -> Result<LemmaReport> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::Usage(format!("xi must be positive, got {xi}")));
    }
    let SupersolutionConstants { c_bar, theta, kappa } = SupersolutionConstants::new(model, k)?;
    let (l, d) = (model.lipschitz_l, model.dim);
    let kf = k as f64;
    let bound_a = 2.0 * xi * c_bar * c_bar * (-4.0 * c_bar).exp();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = LemmaReport::new(format!("strict_supersolution(k={k};xi={xi})"));
    for _ in 0..samples {
        let tau: f64 = rng.random();
        let p: f64 = rng.random();
        let x = Vector::from_iterator(d, (0..d).map(|_| (8.0 * rng.random::<f64>() - 4.0).exp()));
        let eta = loop {
            let e = unit_sphere(&mut rng, d + 1);
            if e[0].abs() > 1e-9 {
                break e;
            }
        };
        let e1_sq = eta[0] * eta[0];
        let proj: Vec<f64> = eta[1..].iter().map(|z| z / eta[0]).collect();
        let proj_norm_sq: f64 = proj.iter().map(|z| z * z).sum();
        let growth = (kappa * tau).exp();

        let decay = (-4.0 * c_bar * p).exp();
        let dt_phi = -kappa * growth * (theta - decay / 2.0);
        let dp_phi = 2.0 * c_bar * growth * decay;
        let dpp_phi = -8.0 * c_bar * c_bar * growth * decay;
        let term_a = xi * e1_sq * (-dt_phi - c_bar * dp_phi.abs() * proj_norm_sq.sqrt() - 0.5 * proj_norm_sq * dpp_phi);
        report.record(term_a, bound_a, term_a);

        let r = x.norm();
        let h = growth * (r.powf(2.0 * kf) + r.powi(-2));
        let dh = growth * (2.0 * kf * r.powf(2.0 * kf - 1.0) - 2.0 * r.powi(-3));
        let dxx = growth * (2.0 * kf * (2.0 * kf - 1.0) * r.powf(2.0 * kf - 2.0) + 6.0 * r.powi(-4));
        let diag = Matrix::from_diagonal(&x);
        let mu_x = &diag * (model.mu)(&x);
        let sigma_x = &diag * (model.sigma)(&x);
        let grad = Vector::from_element(d, dh);
        let term_b = xi
            * e1_sq
            * (kappa * h
                - l * x.component_mul(&grad).norm()
                - mu_x.dot(&grad).abs()
                - 0.5 * ((&sigma_x * sigma_x.transpose()).trace() * dxx).abs());
        report.record(term_b, 0.0, xi * e1_sq * kappa * h);
    }
    Ok(report.finish(samples))
}

/// `v(t, p) = 2 T kappa + (t - T)(lambda p + gamma (1 - p))` under a zero
/// wealth drift, at the `x`-independent operator point of `(t, p)`.
fn boundary_member(kappa: f64, lambda: f64, gamma: f64, horizon: f64, t: f64, p: f64) -> (f64, f64, f64) {
    let v = 2.0 * horizon * kappa + (t - horizon) * (lambda * p + gamma * (1.0 - p));
    let dt = lambda * p + gamma * (1.0 - p);
    let dp = (t - horizon) * (lambda - gamma);
    (v, dt, dp)
}

/// Checks the family `v_{lambda,gamma}` on `[0, T] x [0, 1]` at `samples`
/// points of a Kronecker sequence plus the four corners: the sub-solution
/// inequality `-dv/dt + F v <= 0`, the `+infinity` value of the
/// super-solution envelope under a perturbation `A^pp < 0`, `v >= 0` and
/// `v(T, .) = 2 T kappa`.
pub fn check_boundary_family(kappa: f64, lambda: f64, gamma: f64, horizon: f64, samples: usize) -> Result<LemmaReport> {
    if !(kappa > 0.0 && kappa.is_finite()) || !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Usage(format!("need kappa > 0 and T > 0, got kappa={kappa}, T={horizon}")));
    }
    for (name, c) in [("lambda", lambda), ("gamma", gamma)] {
        if !(0.0..=kappa).contains(&c) {
            return Err(Error::Usage(format!("{name} = {c} must lie in [0, kappa = {kappa}]")));
        }
    }
    let model = MarketModel::black_scholes(0.1, 0.2, PricingMode::ZeroDrift)?;
    let controls = ControlGrid::default();
    let mut report = LemmaReport::new(format!("boundary_family(kappa={kappa};lambda={lambda};gamma={gamma})"));
    let golden = [0.754_877_666_246_692_7, 0.569_840_290_998_053_3];
    let mut points: Vec<(f64, f64)> = vec![(0.0, 0.0), (0.0, 1.0), (horizon, 0.0), (horizon, 1.0)];
    points.extend((1..=samples).map(|i| {
        let i = i as f64;
        (horizon * (i * golden[0]).fract(), (i * golden[1]).fract())
    }));
    for &(t, p) in &points {
        let (v, dt, dp) = boundary_member(kappa, lambda, gamma, horizon, t, p);
        report.record(v, 0.0, v);
        let theta = OperatorPoint::scalar(t, 1.0, v, dt, 0.0, dp, 0.0, 0.0, 0.0)?;
        match quadratic_sup(&theta, &model).map(|q| q.sup_j) {
            Some(Extended::Finite(f)) => report.record(dt - f, 0.0, dt),
            _ => report.record(-1.0, 0.0, 1.0),
        }
        report.record(0.0, sup_h(&theta, &model, &controls)?.value, 1.0);
        let bent = OperatorPoint::scalar(t, 1.0, v, dt, 0.0, dp, 0.0, 0.0, -1e-8)?;
        if !quadratic_sup(&bent, &model).is_some_and(|q| q.sup_j.is_infinite()) {
            report.record(-1.0, 0.0, 1.0);
        }
        let (terminal, _, _) = boundary_member(kappa, lambda, gamma, horizon, horizon, p);
        if terminal != 2.0 * horizon * kappa {
            report.record(-(terminal - 2.0 * horizon * kappa).abs(), 0.0, 0.0);
        }
    }
    Ok(report.finish(points.len()))
}

/// Compares `H^{lift(t_probe e)}` with the equator value `H^{(0, e)}` at
/// random operator points whose entries are bounded by 5 in absolute value
/// (`x` in `(0, 5]`), for random unit directions `e`.
pub fn check_operator_continuity(model: &MarketModel, samples: usize, t_probe: f64, tol: f64, seed: u64) -> Result<LemmaReport> {
    if !(t_probe >= 1e3) {
        return Err(Error::Usage(format!("probe radius must be at least 1e3, got {t_probe}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Usage(format!("tolerance must be positive, got {tol}")));
    }
    let d = model.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounded = |rng: &mut ChaCha8Rng| 10.0 * rng.random::<f64>() - 5.0;
    let mut report = LemmaReport::new(format!("operator_continuity(t={t_probe})"));
    for _ in 0..samples {
        let x = Vector::from_iterator(d, (0..d).map(|_| 5.0 * (1.0 - rng.random::<f64>())));
        let (t, y, b) = (rng.random::<f64>(), bounded(&mut rng), bounded(&mut rng));
        let q = Vector::from_iterator(d + 1, (0..d + 1).map(|_| bounded(&mut rng)));
        let mut a = Matrix::zeros(d + 1, d + 1);
        for i in 0..=d {
            for j in i..=d {
                let z = bounded(&mut rng);
                a[(i, j)] = z;
                a[(j, i)] = z;
            }
        }
        let theta = OperatorPoint::new(t, x, y, b, q, a)?;
        let e = Vector::from_vec(unit_sphere(&mut rng, d));
        let mut eq = Vector::zeros(d + 1);
        eq.rows_mut(1, d).copy_from(&e);
        let far = eval_h(&lift(&(&e * t_probe)), &theta, model)?;
        let limit = eval_h(&SphereControl::new(eq)?, &theta, model)?;
        report.record(tol, (far - limit).abs(), tol);
    }
    Ok(report.finish(samples))
}

/// Steps random ordered pairs `v <= w` on a 41 x 21 grid over
/// `[0.5, 2] x [0, 1]` with `dt = 1e-2` and checks `step(v) <= step(w)`
/// nodewise up to `1e-12`. Even pairs use exact splits, odd pairs the
/// control grid; the first pair is the constant pair `0 <= 1`.
pub fn check_step_monotonicity(model: &MarketModel, pairs: usize, seed: u64) -> Result<LemmaReport> {
    let dt = 1e-2;
    if model.is_y_dependent() {
        let Some(lambda) = model.shift else {
            return Err(Error::Usage("wealth drift depends on y: pass the model through lambda_shift first".into()));
        };
        if dt * (lambda + model.lipschitz_l) >= 1.0 {
            return Err(Error::Usage(format!(
                "dt (lambda + L) = {} must stay below 1",
                dt * (lambda + model.lipschitz_l)
            )));
        }
    }
    let grid = Arc::new(Grid2D::log_uniform(0.5, 2.0, 41, 21, dt)?);
    let controls = ControlGrid::default();
    let base = Stepper::new(model, grid.clone(), &controls, dt)?.with_variance_matching(true)?;
    let steppers = [base.clone().with_exact_splits(true), base.with_exact_splits(false)];
    let n = grid.nx() * grid.np();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = LemmaReport::new("step_monotonicity");
    for pair in 0..pairs {
        let (lo, hi): (Vec<f64>, Vec<f64>) = if pair == 0 {
            (vec![0.0; n], vec![1.0; n])
        } else {
            (0..n)
                .map(|_| {
                    let v: f64 = rng.random();
                    let gap = if rng.random::<bool>() { 0.0 } else { rng.random::<f64>() };
                    (v, v + gap)
                })
                .unzip()
        };
        let lo = ValueSurface::from_values(grid.clone(), lo, 1.0)?;
        let hi = ValueSurface::from_values(grid.clone(), hi, 1.0)?;
        let stepper = &steppers[pair % 2];
        let a = stepper.step(&lo, 1.0 - dt).surface;
        let b = stepper.step(&hi, 1.0 - dt).surface;
        let worst = a.values().iter().zip(b.values()).map(|(x, y)| y - x).fold(f64::INFINITY, f64::min);
        report.worst_margin = report.worst_margin.min(worst);
        if worst < -1e-12 {
            report.violations += 1;
        }
    }
    Ok(report.finish(pairs))
}
