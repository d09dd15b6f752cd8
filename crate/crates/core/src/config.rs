//! Run configuration: `[section]` headers with `key = value` lines, parsed
//! as TOML. Unknown keys are rejected, and every cross-field constraint is
//! checked by [`Config::build`] before any computation starts.

use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::hamiltonian::ControlGrid;
use crate::model::{ExerciseSchedule, LossSpec, MarketModel, Payoff, PricingMode};
use crate::scheme::{check_cfl, Grid2D, SchemeOptions};
use crate::solver::{BoundaryMode, SolveParams};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub mu: f64,
    pub sigma: f64,
    /// `linear`, `two_rate` or `zero_drift`.
    pub pricing: String,
    pub rate: f64,
    pub lend: f64,
    pub borrow: f64,
    /// Initial state for reported values.
    pub x0: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { mu: 0.1, sigma: 0.2, pricing: "linear".into(), rate: 0.0, lend: 0.0, borrow: 0.0, x0: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorSection {
    pub a_max: f64,
    pub points_per_side: usize,
    /// Minimize over exact splits of `P` when the wealth drift allows it,
    /// falling back to the control grid otherwise.
    pub closed_form: bool,
    /// Shift for y-dependent wealth drifts; `L + 1` when absent.
    pub lambda: Option<f64>,
}

impl Default for OperatorSection {
    fn default() -> Self {
        Self {
            a_max: ControlGrid::DEFAULT_A_MAX,
            points_per_side: ControlGrid::DEFAULT_POINTS_PER_SIDE,
            closed_form: true,
            lambda: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeSection {
    pub nx: usize,
    pub np: usize,
    /// Explicit x-range; centred on `x0` with `width_sigmas` when absent.
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub dt: f64,
    /// Print clipping and shape diagnostics after a solve.
    pub clip_report: bool,
    pub variance_matching: bool,
    pub payoff_smoothing: bool,
    pub convexify: bool,
}

impl Default for SchemeSection {
    fn default() -> Self {
        Self {
            nx: 201,
            np: 101,
            x_min: None,
            x_max: None,
            dt: 1e-3,
            clip_report: true,
            variance_matching: true,
            payoff_smoothing: true,
            convexify: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundarySection {
    pub width_sigmas: f64,
    /// Slack allowed when auditing `vbar >= g` at exercise dates.
    pub obstacle_tol: f64,
    /// `natural` or `pinned`.
    pub mode: String,
    pub pinned_value: f64,
}

impl Default for BoundarySection {
    fn default() -> Self {
        Self { width_sigmas: 5.0, obstacle_tol: 1e-8, mode: "natural".into(), pinned_value: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub dates: Vec<f64>,
    /// `digital`, `call`, `put`, `constant` or `zero`.
    pub payoff: String,
    pub strike: f64,
    pub level: f64,
    /// `indicator` or `ramp`.
    pub loss: String,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { dates: vec![1.0], payoff: "digital".into(), strike: 1.0, level: 0.0, loss: "indicator".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Extra layers to export besides `0` and the exercise dates.
    pub times: Vec<f64>,
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { times: Vec::new(), dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub p_levels: Vec<f64>,
    pub tree_steps: usize,
    pub tree_p_points: usize,
    /// Paths of the Monte-Carlo Neyman-Pearson cross-check; 0 skips it.
    pub np_mc_paths: usize,
    /// Paths of the policy simulation; 0 skips it.
    pub mc_paths: usize,
    pub mc_p: f64,
    pub mc_tolerance: f64,
    pub seed: u64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            p_levels: vec![0.25, 0.5, 0.75, 0.9],
            tree_steps: 500,
            tree_p_points: 401,
            np_mc_paths: 0,
            mc_paths: 0,
            mc_p: 0.75,
            mc_tolerance: 0.01,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationSection {
    pub samples: usize,
    pub k: u32,
    pub xi: Vec<f64>,
    pub kappa: f64,
    pub horizon: f64,
    pub family_samples: usize,
    pub continuity_samples: usize,
    pub t_probe: f64,
    pub continuity_tol: f64,
    pub pairs: usize,
}

impl Default for VerificationSection {
    fn default() -> Self {
        Self {
            samples: 10_000,
            k: 1,
            xi: vec![0.1, 1.0],
            kappa: 1.0,
            horizon: 1.0,
            family_samples: 200,
            continuity_samples: 2000,
            t_probe: 1e5,
            continuity_tol: 1e-3,
            pairs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelSection,
    pub operator: OperatorSection,
    pub scheme: SchemeSection,
    pub boundary: BoundarySection,
    pub schedule: ScheduleSection,
    pub output: OutputSection,
    pub oracle: OracleSection,
    pub verification: VerificationSection,
}

/// Validated objects ready for the solver.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: MarketModel,
    pub schedule: ExerciseSchedule,
    pub loss: LossSpec,
    pub grid: Arc<Grid2D>,
    pub params: SolveParams,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn pricing_mode(&self) -> Result<PricingMode> {
        let m = &self.model;
        match m.pricing.as_str() {
            "linear" => Ok(PricingMode::LinearPricing { rate: m.rate }),
            "two_rate" => Ok(PricingMode::TwoRate { lend: m.lend, borrow: m.borrow }),
            "zero_drift" => Ok(PricingMode::ZeroDrift),
            other => Err(Error::Config(format!("unknown pricing `{other}` (linear, two_rate, zero_drift)"))),
        }
    }

    pub fn model(&self) -> Result<MarketModel> {
        MarketModel::black_scholes(self.model.mu, self.model.sigma, self.pricing_mode()?)
    }

    pub fn payoff(&self) -> Result<Payoff> {
        let s = &self.schedule;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        match s.payoff.as_str() {
            "digital" => Ok(Payoff::digital(positive("strike", s.strike)?)),
            "call" => Ok(Payoff::call(positive("strike", s.strike)?)),
            "put" => Ok(Payoff::put(positive("strike", s.strike)?)),
            "constant" if s.level >= 0.0 && s.level.is_finite() => Ok(Payoff::constant(s.level)),
            "constant" => Err(Error::Config(format!("constant payoff must be non-negative, got {}", s.level))),
            "zero" => Ok(Payoff::zero()),
            other => Err(Error::Config(format!("unknown payoff `{other}` (digital, call, put, constant, zero)"))),
        }
    }

    pub fn grid(&self) -> Result<Grid2D> {
        let s = &self.scheme;
        if s.nx < 3 || s.np < 3 {
            return Err(Error::Config(format!("grid needs at least 3 points per axis, got {} x {}", s.nx, s.np)));
        }
        let horizon = self.schedule.dates.last().copied().unwrap_or(0.0);
        let grid = match (s.x_min, s.x_max) {
            (Some(lo), Some(hi)) => Grid2D::log_uniform(lo, hi, s.nx, s.np, s.dt),
            (None, None) => {
                Grid2D::centered(self.model.x0, self.model.sigma, horizon, self.boundary.width_sigmas, s.nx, s.np, s.dt)
            }
            _ => return Err(Error::Config("set both scheme.x_min and scheme.x_max, or neither".into())),
        };
        grid.map_err(|e| Error::Config(e.to_string()))
    }

    /// Builds and cross-checks everything a solve needs.
    pub fn build(&self) -> Result<Setup> {
        let model = self.model()?;
        if !(self.model.x0 > 0.0 && self.model.x0.is_finite()) {
            return Err(Error::Config(format!("x0 must be positive, got {}", self.model.x0)));
        }
        let payoff = self.payoff()?;
        let schedule = ExerciseSchedule::new(&self.schedule.dates, payoff.clone()).map_err(|e| Error::Config(e.to_string()))?;
        let loss = match self.schedule.loss.as_str() {
            "indicator" => LossSpec::indicator(payoff),
            "ramp" => LossSpec::ramp(payoff),
            other => return Err(Error::Config(format!("unknown loss `{other}` (indicator, ramp)"))),
        };
        let grid = Arc::new(self.grid()?);
        let lambda = self.operator.lambda;
        if let Some(l) = lambda {
            if model.is_y_dependent() && !(l > model.lipschitz_l) {
                return Err(Error::Config(format!("operator.lambda = {l} must exceed L = {}", model.lipschitz_l)));
            }
        }
        let mut shifted = model.clone();
        if model.is_y_dependent() {
            shifted.shift = Some(lambda.unwrap_or(model.lipschitz_l + 1.0));
        }
        check_cfl(&shifted, self.scheme.dt)?;
        let boundary = match self.boundary.mode.as_str() {
            "natural" => BoundaryMode::Natural,
            "pinned" => BoundaryMode::Pinned(self.boundary.pinned_value),
            other => return Err(Error::Config(format!("unknown boundary mode `{other}` (natural, pinned)"))),
        };
        if !(self.boundary.obstacle_tol >= 0.0) {
            return Err(Error::Config("boundary.obstacle_tol must be non-negative".into()));
        }
        let horizon = schedule.horizon();
        if let Some(t) = self.output.times.iter().find(|t| !(0.0..=horizon).contains(*t)) {
            return Err(Error::Config(format!("output time {t} lies outside [0, {horizon}]")));
        }
        let controls = ControlGrid::new(self.operator.a_max, self.operator.points_per_side).map_err(|e| Error::Config(e.to_string()))?;
        let s = &self.scheme;
        let params = SolveParams {
            controls,
            lambda,
            options: SchemeOptions {
                variance_matching: s.variance_matching,
                payoff_smoothing: s.payoff_smoothing,
                convexify: s.convexify,
                exact_splits: self.operator.closed_form,
            },
            boundary,
            output_times: self.output.times.clone(),
            keep_all_layers: false,
        };
        Ok(Setup { model, schedule, loss, grid, params })
    }
}
