//! Monotone semi-Lagrangian time step for `d = 1` on a rectangular
//! `(x, p)` grid, log-uniform in `x` and uniform in `p`.
//!
//! One backward step replaces the Brownian increment by a four-node
//! kernel: two feet at `x + dt mu_X(x) +- rho sqrt(dt) sigma_X(x)`, each
//! split between its bracketing x-nodes, with `rho` chosen so that the
//! kernel variance (feet plus interpolation) equals `dt sigma_X^2`. With
//! `dw_k` the centred increment of landing node `k`, `P` moves to
//! `p + a dw_k`, so the controlled pair keeps its correlation exactly:
//!
//! ```text
//! v(t, x, p) = max(0, min_a { E_k[next(x_k, p + a dw_k)] - dt * mu_Y(t, x, E_k[...], upsilon) })
//! upsilon = sigma^{-1}(x) Cov_k(next, dw) / E_k[dw^2]
//! ```
//!
//! The portfolio argument is the regression slope of the successor values
//! on the increment. When the wealth drift is affine in `(y, upsilon)` on at
//! most two pieces, the minimum over all splits `P_k` with mean `p` is
//! computed exactly by merging the convex slices of the landing nodes;
//! otherwise the control grid is searched with `a` limited so that every
//! `P_k` stays in `[0, 1]`. Each new layer can be replaced by its lower
//! convex envelope in `p`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hamiltonian::ControlGrid;
use crate::model::{MarketModel, NodeCoeffs};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    x_nodes: Vec<f64>,
    p_nodes: Vec<f64>,
    dt: f64,
    log_x_min: f64,
    log_step: f64,
}

impl Grid2D {
    pub fn log_uniform(x_min: f64, x_max: f64, nx: usize, np: usize, dt: f64) -> Result<Self> {
        if !(x_min > 0.0 && x_max > x_min && x_max.is_finite()) {
            return Err(Error::Config(format!("need 0 < x_min < x_max, got [{x_min}, {x_max}]")));
        }
        if nx < 3 || np < 3 {
            return Err(Error::Config(format!("grid sizes must be at least 3, got N_x={nx}, N_p={np}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let log_x_min = x_min.ln();
        let log_step = (x_max.ln() - log_x_min) / (nx - 1) as f64;
        let mut x_nodes: Vec<f64> = (0..nx).map(|i| (log_x_min + log_step * i as f64).exp()).collect();
        x_nodes[0] = x_min;
        x_nodes[nx - 1] = x_max;
        let mut p_nodes: Vec<f64> = (0..np).map(|j| j as f64 / (np - 1) as f64).collect();
        p_nodes[np - 1] = 1.0;
        Ok(Self { x_nodes, p_nodes, dt, log_x_min, log_step })
    }

    /// Grid centred at `x0` spanning `width_sigmas` standard deviations of
    /// `ln X_T` on each side.
    pub fn centered(x0: f64, sigma: f64, horizon: f64, width_sigmas: f64, nx: usize, np: usize, dt: f64) -> Result<Self> {
        let half = width_sigmas * sigma * horizon.sqrt();
        Self::log_uniform(x0 * (-half).exp(), x0 * half.exp(), nx, np, dt)
    }

    pub fn nx(&self) -> usize {
        self.x_nodes.len()
    }

    pub fn np(&self) -> usize {
        self.p_nodes.len()
    }

    pub fn x_nodes(&self) -> &[f64] {
        &self.x_nodes
    }

    pub fn p_nodes(&self) -> &[f64] {
        &self.p_nodes
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn p_step(&self) -> f64 {
        1.0 / (self.np() - 1) as f64
    }

    pub fn log_step(&self) -> f64 {
        self.log_step
    }

    /// Index of a grid node whose abscissa is within rounding of `x`.
    pub fn x_index(&self, x: f64) -> Option<usize> {
        let (i, w) = self.locate_x(x);
        if w < 1e-9 {
            Some(i)
        } else if w > 1.0 - 1e-9 {
            Some(i + 1)
        } else {
            None
        }
    }

    /// Cell `i` and weight `w` such that `x = (1 - w) x_i + w x_{i+1}`, after
    /// clamping `x` to the grid hull.
    pub fn locate_x(&self, x: f64) -> (usize, f64) {
        let n = self.nx();
        if !(x > self.x_nodes[0]) {
            return (0, 0.0);
        }
        if x >= self.x_nodes[n - 1] {
            return (n - 2, 1.0);
        }
        let mut i = (((x.ln() - self.log_x_min) / self.log_step).floor().max(0.0) as usize).min(n - 2);
        while i + 1 < n - 1 && x >= self.x_nodes[i + 1] {
            i += 1;
        }
        while i > 0 && x < self.x_nodes[i] {
            i -= 1;
        }
        let w = ((x - self.x_nodes[i]) / (self.x_nodes[i + 1] - self.x_nodes[i])).clamp(0.0, 1.0);
        (i, w)
    }

    pub fn locate_p(&self, p: f64) -> (usize, f64) {
        locate_uniform(p, self.np())
    }

    /// Average of `f` over the dual cell of node `i`, bounded by the
    /// geometric midpoints of neighbouring nodes (half cells at the ends).
    pub fn cell_average(&self, i: usize, f: impl Fn(f64) -> f64) -> f64 {
        let s = self.cell_samples(i, f);
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// Midpoint samples of `f` over the dual cell of node `i`.
    pub fn cell_samples(&self, i: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
        const SAMPLES: usize = 64;
        let xs = &self.x_nodes;
        let lo = if i == 0 { xs[0] } else { (xs[i - 1] * xs[i]).sqrt() };
        let hi = if i + 1 == xs.len() { xs[i] } else { (xs[i] * xs[i + 1]).sqrt() };
        let width = (hi - lo) / SAMPLES as f64;
        (0..SAMPLES).map(|k| f(lo + (k as f64 + 0.5) * width)).collect()
    }
}

#[inline]
fn locate_uniform(p: f64, np: usize) -> (usize, f64) {
    let scaled = p.clamp(0.0, 1.0) * (np - 1) as f64;
    let j = (scaled.floor() as usize).min(np - 2);
    (j, scaled - j as f64)
}

#[inline]
fn interp_row(row: &[f64], p: f64) -> f64 {
    let (j, w) = locate_uniform(p, row.len());
    row[j] + w * (row[j + 1] - row[j])
}

/// `v(t, ., .)` on a [`Grid2D`], stored x-major so that `row(i)` is the
/// p-slice at `x_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface {
    grid: Arc<Grid2D>,
    values: Vec<f64>,
    pub time: f64,
}

impl ValueSurface {
    pub fn from_values(grid: Arc<Grid2D>, values: Vec<f64>, time: f64) -> Result<Self> {
        if values.len() != grid.nx() * grid.np() {
            return Err(Error::Usage(format!(
                "surface has {} values, grid needs {}",
                values.len(),
                grid.nx() * grid.np()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain(format!("surface value {} at index {bad} is negative or non-finite", values[bad])));
        }
        Ok(Self { grid, values, time })
    }

    pub fn from_fn(grid: Arc<Grid2D>, time: f64, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.nx() * grid.np());
        for &x in grid.x_nodes() {
            for &p in grid.p_nodes() {
                values.push(f(x, p));
            }
        }
        Self::from_values(grid, values, time)
    }

    pub fn constant(grid: Arc<Grid2D>, time: f64, c: f64) -> Result<Self> {
        let n = grid.nx() * grid.np();
        Self::from_values(grid, vec![c; n], time)
    }

    pub fn grid(&self) -> &Arc<Grid2D> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, ix: usize, jp: usize) -> f64 {
        self.values[ix * self.grid.np() + jp]
    }

    pub fn row(&self, ix: usize) -> &[f64] {
        let np = self.grid.np();
        &self.values[ix * np..(ix + 1) * np]
    }

    pub(crate) fn row_mut(&mut self, ix: usize) -> &mut [f64] {
        let np = self.grid.np();
        &mut self.values[ix * np..(ix + 1) * np]
    }

    /// Values along `x` at fixed `p` index.
    pub fn column(&self, jp: usize) -> Vec<f64> {
        (0..self.grid.nx()).map(|i| self.get(i, jp)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid.clone(), values: self.values.iter().map(|&v| f(v)).collect(), time: self.time }
    }

    pub fn max_abs_diff(&self, other: &ValueSurface) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Bilinear interpolation, clamping the query to the grid hull.
pub fn interpolate(surface: &ValueSurface, x: f64, p: f64) -> f64 {
    interpolate_values(surface.grid(), surface.values(), x, p)
}

/// Bilinear interpolation of x-major node values.
pub fn interpolate_values(grid: &Grid2D, v: &[f64], x: f64, p: f64) -> f64 {
    let (i, wx) = grid.locate_x(x);
    let (j, wp) = grid.locate_p(p);
    let np = grid.np();
    let v00 = v[i * np + j];
    let v01 = v[i * np + j + 1];
    let v10 = v[(i + 1) * np + j];
    let v11 = v[(i + 1) * np + j + 1];
    let lo = v00 + wp * (v01 - v00);
    let hi = v10 + wp * (v11 - v10);
    lo + wx * (hi - lo)
}

/// Linear interpolation along a log-uniform axis, clamped.
pub fn interpolate_x(grid: &Grid2D, values: &[f64], x: f64) -> f64 {
    let (i, w) = grid.locate_x(x);
    values[i] + w * (values[i + 1] - values[i])
}

/// Margins (`1 - ratio`) of the three conditions that make the step
/// monotone; all must be non-negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CflReport {
    /// Foot points stay positive: `dt Lambda + sqrt(dt) Lambda < 1`.
    pub foot_margin: f64,
    /// Portfolio sensitivity: `sqrt(dt) L Lambda <= 1`.
    pub gradient_margin: f64,
    /// Wealth sensitivity: `dt (L + lambda) < 1`.
    pub drift_margin: f64,
}

impl CflReport {
    pub fn min_margin(&self) -> f64 {
        self.foot_margin.min(self.gradient_margin).min(self.drift_margin)
    }
}

pub fn check_cfl(model: &MarketModel, dt: f64) -> Result<CflReport> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    let l = model.lipschitz_l;
    let lam = model.bound_lambda;
    let sdt = dt.sqrt();
    let report = CflReport {
        foot_margin: 1.0 - (dt * lam + sdt * lam),
        gradient_margin: 1.0 - sdt * l * lam,
        drift_margin: 1.0 - dt * (l + model.shift.unwrap_or(0.0)),
    };
    if report.foot_margin <= 0.0 || report.gradient_margin < 0.0 || report.drift_margin <= 0.0 {
        return Err(Error::Config(format!(
            "CFL violation for dt={dt} with L={l}, Lambda={lam}: {report:?}"
        )));
    }
    Ok(report)
}

/// Minimizing control at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeDecision {
    /// Unclipped minimum over controls.
    pub value: f64,
    pub control: f64,
    /// Effective volatility of `P` per unit Brownian increment.
    pub alpha: f64,
    /// Kernel average of the next layer.
    pub average: f64,
    /// Stock position: `sigma^{-1}` times the regression slope of the next
    /// layer on the Brownian increment.
    pub upsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub surface: ValueSurface,
    /// Interior nodes where the minimum was negative and clipped to 0.
    pub clipped: usize,
    /// Minimizing `alpha` per node (0 on boundary rows), when requested.
    pub alphas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeOptions {
    /// See [`Stepper::with_variance_matching`].
    pub variance_matching: bool,
    /// Replace node values of exercise payoffs by their averages over the
    /// dual cell (see [`Grid2D::cell_average`]).
    pub payoff_smoothing: bool,
    /// Replace every p-slice by its lower convex envelope after each step.
    /// A two-point split of `P` per step is a non-randomized control; the
    /// envelope restores randomization, under which the value is convex.
    pub convexify: bool,
    /// Minimize over every split of `P` across the landing nodes (exact for
    /// convex slices and piecewise-affine wealth drifts) instead of over the
    /// control grid.
    pub exact_splits: bool,
}

impl Default for SchemeOptions {
    fn default() -> Self {
        Self { variance_matching: true, payoff_smoothing: false, convexify: true, exact_splits: true }
    }
}

/// Spread factor `rho` for a foot pair at `centre +- rho * spread` such that
/// the quadrature variance plus the variance added by linear interpolation
/// between the bracketing nodes matches `spread^2`.
fn matched_rho(grid: &Grid2D, centre: f64, spread: f64, rho_min: f64) -> f64 {
    if spread <= 0.0 {
        return 1.0;
    }
    let xs = grid.x_nodes();
    let interp_var = |x: f64| -> f64 {
        let (i, w) = grid.locate_x(x);
        let h = xs[i + 1] - xs[i];
        w * (1.0 - w) * h * h
    };
    let target = spread * spread;
    let total = |rho: f64| -> f64 {
        let s = rho * spread;
        s * s + 0.5 * (interp_var(centre + s) + interp_var(centre - s))
    };
    const SCAN: usize = 400;
    let mut best = (f64::INFINITY, 1.0);
    for k in 0..=SCAN {
        let rho = 1.0 - (1.0 - rho_min) * k as f64 / SCAN as f64;
        let gap = (total(rho) - target).abs();
        if gap < best.0 {
            best = (gap, rho);
        }
    }
    best.1
}

/// Transition law of one x-node: each foot is split between its bracketing
/// nodes by the interpolation weights. `dw` is the centred Brownian
/// increment `(x_k - mean) / sigma_X` of each landing node, so that `P` can
/// move as `a dw_k`, fully correlated with the node actually reached.
#[derive(Debug, Clone, Copy)]
struct Kernel {
    nodes: [usize; 4],
    weights: [f64; 4],
    dw: [f64; 4],
    /// `E[dw^2]`; equals `dt` under variance matching.
    var: f64,
    dw_max: f64,
    dw_min: f64,
    rho: f64,
}

impl Kernel {
    /// Largest `a >= 0` keeping every `p + a dw_k` (resp. `p - a dw_k`) in `[0, 1]`.
    fn limits(&self, p: f64) -> (f64, f64) {
        let up = |room_hi: f64, room_lo: f64| -> f64 {
            let a = if self.dw_max > 0.0 { room_hi / self.dw_max } else { f64::INFINITY };
            let b = if self.dw_min < 0.0 { room_lo / -self.dw_min } else { f64::INFINITY };
            a.min(b)
        };
        (up(1.0 - p, p), up(p, 1.0 - p))
    }
}

fn lower_hull_row(p_nodes: &[f64], row: &[f64]) -> Vec<f64> {
    crate::facelift::lower_convex_envelope(p_nodes, row).unwrap_or_else(|_| row.to_vec())
}

/// Infimum of `sum_k c_k V_k(P_k)` subject to `sum_k w_k P_k = p` on the
/// uniform p-axis, for convex piecewise-linear `V_k` sampled on that axis.
/// In `u_k = w_k P_k` the problem is an infimal convolution, so its graph
/// strings together the segments of all slices in order of slope. Writes
/// the optimal `P_k` per node into `shares` when given.
fn merge_slices(rows: &[&[f64]; 4], w: &[f64; 4], c: &[f64; 4], out: &mut [f64], mut shares: Option<&mut [[f64; 4]]>) {
    let np = out.len();
    let h = 1.0 / (np - 1) as f64;
    let slope = |k: usize, j: usize| c[k] * (rows[k][j + 1] - rows[k][j]) / (w[k] * h);
    let mut idx = [0usize; 4];
    let mut used = [0.0; 4];
    let mut pos = 0.0;
    let mut val: f64 = (0..4).filter(|&k| w[k] > 0.0).map(|k| c[k] * rows[k][0]).sum();
    let share_at = |used: &[f64; 4], extra: Option<(usize, f64)>| -> [f64; 4] {
        let mut s = [0.0; 4];
        for k in 0..4 {
            if w[k] > 0.0 {
                let u = used[k] + extra.filter(|e| e.0 == k).map_or(0.0, |e| e.1);
                s[k] = (u / w[k]).clamp(0.0, 1.0);
            }
        }
        s
    };
    out[0] = val;
    if let Some(sh) = shares.as_deref_mut() {
        sh[0] = share_at(&used, None);
    }
    let mut j = 1;
    loop {
        let mut pick: Option<(usize, f64)> = None;
        for k in 0..4 {
            if w[k] > 0.0 && idx[k] < np - 1 {
                let s = slope(k, idx[k]);
                if pick.is_none_or(|(_, b)| s < b) {
                    pick = Some((k, s));
                }
            }
        }
        let Some((k, s)) = pick else { break };
        let len = w[k] * h;
        let end = pos + len;
        while j < np && j as f64 * h <= end + 1e-12 {
            let d = j as f64 * h - pos;
            out[j] = val + s * d;
            if let Some(sh) = shares.as_deref_mut() {
                sh[j] = share_at(&used, Some((k, d.min(len))));
            }
            j += 1;
        }
        pos = end;
        val += s * len;
        used[k] += len;
        idx[k] += 1;
    }
    // rounding can leave the last node unvisited
    for jj in j..np {
        out[jj] = val;
        if let Some(sh) = shares.as_deref_mut() {
            sh[jj] = share_at(&used, None);
        }
    }
}

/// Reusable per-`(model, grid, dt)` precomputation for [`step`].
#[derive(Clone)]
pub struct Stepper<'a> {
    model: &'a MarketModel,
    grid: Arc<Grid2D>,
    dt: f64,
    sqrt_dt: f64,
    magnitudes: Vec<f64>,
    a_max: f64,
    nodes: Vec<NodeCoeffs>,
    kernels: Vec<Kernel>,
    rho_min: Option<f64>,
    exact: bool,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a MarketModel, grid: Arc<Grid2D>, a_grid: &ControlGrid, dt: f64) -> Result<Self> {
        if model.dim != 1 {
            return Err(Error::Unsupported("the grid scheme is implemented for d = 1".into()));
        }
        check_cfl(model, dt)?;
        let sqrt_dt = dt.sqrt();
        let mut magnitudes: Vec<f64> = a_grid.values().iter().copied().filter(|&a| a > 0.0).collect();
        magnitudes.sort_by(|a, b| a.total_cmp(b));
        let nodes: Vec<NodeCoeffs> = grid.x_nodes().iter().map(|&x| model.node_coeffs(x)).collect();
        let mut stepper = Self {
            model,
            grid,
            dt,
            sqrt_dt,
            magnitudes,
            a_max: a_grid.a_max(),
            nodes,
            kernels: Vec::new(),
            rho_min: None,
            exact: false,
        };
        stepper.rebuild()?;
        Ok(stepper)
    }

    /// Shrinks the foot spread node by node so that quadrature plus
    /// interpolation variance in `x` equals `sigma_X^2 dt`.
    pub fn with_variance_matching(mut self, on: bool) -> Result<Self> {
        self.rho_min = on.then(|| (self.sqrt_dt * self.model.lipschitz_l * self.model.bound_lambda).clamp(0.5, 1.0));
        self.rebuild()?;
        Ok(self)
    }

    /// See [`SchemeOptions::exact_splits`]. Nodes whose wealth drift is not
    /// a minimum of at most two affine maps keep the control grid.
    pub fn with_exact_splits(mut self, on: bool) -> Self {
        self.exact = on;
        self
    }

    fn rebuild(&mut self) -> Result<()> {
        self.kernels = self.nodes.iter().map(|nc| self.kernel_at(nc)).collect();
        // the gradient term must not outweigh any kernel weight
        let worst = self
            .kernels
            .iter()
            .filter(|k| k.var > 0.0)
            .map(|k| self.dt * self.model.lipschitz_l * self.model.bound_lambda * k.dw_max.max(-k.dw_min) / k.var)
            .fold(0.0, f64::max);
        if worst > 1.0 {
            return Err(Error::Config(format!(
                "dt={} too small for the x spacing: gradient weight {worst:.3} exceeds 1",
                self.dt
            )));
        }
        Ok(())
    }

    fn kernel_at(&self, nc: &NodeCoeffs) -> Kernel {
        let centre = nc.x + self.dt * nc.mu_x;
        let spread = self.sqrt_dt * nc.sigma_x;
        let rho = self.rho_min.map_or(1.0, |lo| matched_rho(&self.grid, centre, spread, lo));
        let (ip, wp) = self.grid.locate_x(centre + rho * spread);
        let (im, wm) = self.grid.locate_x(centre - rho * spread);
        let nodes = [ip, ip + 1, im, im + 1];
        let weights = [0.5 * (1.0 - wp), 0.5 * wp, 0.5 * (1.0 - wm), 0.5 * wm];
        let xs = self.grid.x_nodes();
        let mean: f64 = nodes.iter().zip(&weights).map(|(&k, w)| w * xs[k]).sum();
        let mut dw = [0.0; 4];
        if nc.sigma_x > 0.0 {
            for (d, &k) in dw.iter_mut().zip(&nodes) {
                *d = (xs[k] - mean) / nc.sigma_x;
            }
        }
        let var = dw.iter().zip(&weights).map(|(d, w)| w * d * d).sum();
        let live = |k: usize| weights[k] > 0.0;
        let dw_max = (0..4).filter(|&k| live(k)).map(|k| dw[k]).fold(0.0, f64::max);
        let dw_min = (0..4).filter(|&k| live(k)).map(|k| dw[k]).fold(0.0, f64::min);
        Kernel { nodes, weights, dw, var, dw_max, dw_min, rho }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Spread factors per x-node (all 1 without variance matching).
    pub fn spread_factors(&self) -> Vec<f64> {
        self.kernels.iter().map(|k| k.rho).collect()
    }

    /// Kernel average and `upsilon` for landing values `v`.
    #[inline]
    fn evaluate(&self, t: f64, nc: &NodeCoeffs, kernel: &Kernel, v: &[f64; 4]) -> (f64, f64, f64) {
        let mut avg = 0.0;
        let mut cov = 0.0;
        for k in 0..4 {
            avg += kernel.weights[k] * v[k];
            cov += kernel.weights[k] * v[k] * kernel.dw[k];
        }
        let slope = if kernel.var > 0.0 { cov / kernel.var } else { 0.0 };
        let upsilon = nc.sigma_inv * slope;
        (avg - self.dt * self.model.mu_y_1d(t, nc, avg, upsilon), avg, upsilon)
    }

    /// Minimization over admissible controls at level `p`; `row(k, q)` is
    /// the next layer on landing node `k` of the kernel at level `q`.
    #[inline]
    fn optimize(&self, t: f64, nc: &NodeCoeffs, kernel: &Kernel, p: f64, row: impl Fn(usize, f64) -> f64) -> NodeDecision {
        let scale = if kernel.var > 0.0 { (kernel.var / self.dt).sqrt() } else { 0.0 };
        let eval = |a: f64| -> NodeDecision {
            let mut v = [0.0; 4];
            for (k, vk) in v.iter_mut().enumerate() {
                if kernel.weights[k] > 0.0 {
                    *vk = row(k, (p + a * kernel.dw[k]).clamp(0.0, 1.0));
                }
            }
            let (value, average, upsilon) = self.evaluate(t, nc, kernel, &v);
            NodeDecision { value, control: a, alpha: a * scale, average, upsilon }
        };
        let mut best = eval(0.0);
        let mut consider = |a: f64| {
            let cand = eval(a);
            if cand.value < best.value {
                best = cand;
            }
        };
        let (lim_up, lim_down) = kernel.limits(p);
        let (lim_up, lim_down) = (lim_up * (1.0 + 1e-12), lim_down * (1.0 + 1e-12));
        for &m in &self.magnitudes {
            if m <= lim_up {
                consider(m);
            }
            if m <= lim_down {
                consider(-m);
            }
            if m > lim_up && m > lim_down {
                break;
            }
        }
        // controls sending some landing node exactly to p = 0 or p = 1
        if p > 0.0 && p < 1.0 {
            let (up, down) = kernel.limits(p);
            if up <= self.a_max {
                consider(up);
            }
            if down <= self.a_max {
                consider(-down);
            }
        }
        best
    }

    /// One backward step from `next` (at `t + dt`) to time `t`. Rows `p = 0`
    /// and `p = 1` are copied from `next`.
    pub fn step(&self, next: &ValueSurface, t: f64) -> StepOutcome {
        self.step_full(next, t, false)
    }

    /// [`Stepper::step`], optionally recording the minimizing controls.
    pub fn step_full(&self, next: &ValueSurface, t: f64, record: bool) -> StepOutcome {
        let grid = &self.grid;
        let np = grid.np();
        let hulls: Option<Vec<Vec<f64>>> = self.exact.then(|| {
            (0..grid.nx())
                .into_par_iter()
                .map(|i| lower_hull_row(grid.p_nodes(), next.row(i)))
                .collect()
        });
        let results: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..grid.nx())
            .into_par_iter()
            .map(|i| {
                let nc = &self.nodes[i];
                let kernel = &self.kernels[i];
                let mut out = next.row(i).to_vec();
                let mut alphas = if record { vec![0.0; np] } else { Vec::new() };
                let exact = hulls.as_ref().and_then(|h| {
                    let rows = kernel.nodes.map(|k| h[k].as_slice());
                    self.exact_node(t, nc, kernel, rows, record.then_some(alphas.as_mut_slice()))
                });
                let raw = match exact {
                    Some(values) => values,
                    None => {
                        let rows = kernel.nodes.map(|k| next.row(k));
                        let mut values = vec![0.0; np];
                        for (j, &p) in grid.p_nodes().iter().enumerate().take(np - 1).skip(1) {
                            let d = self.optimize(t, nc, kernel, p, |k, q| interp_row(rows[k], q));
                            if record {
                                alphas[j] = d.alpha;
                            }
                            values[j] = d.value;
                        }
                        values
                    }
                };
                let mut clipped = 0;
                for j in 1..np - 1 {
                    // NaN passes through for the caller's finiteness check
                    out[j] = if raw[j] < 0.0 {
                        clipped += 1;
                        0.0
                    } else {
                        raw[j]
                    };
                }
                (out, alphas, clipped)
            })
            .collect();
        let mut values = Vec::with_capacity(grid.nx() * np);
        let mut alphas = Vec::with_capacity(if record { grid.nx() * np } else { 0 });
        let mut clipped = 0;
        for (row, a, c) in results {
            values.extend_from_slice(&row);
            alphas.extend_from_slice(&a);
            clipped += c;
        }
        StepOutcome {
            surface: ValueSurface { grid: grid.clone(), values, time: t },
            clipped,
            alphas: record.then_some(alphas),
        }
    }

    /// Exact minimization over splits at every `p` of one x-node. With an
    /// affine drift the objective is `sum_k c_k V_k(P_k)` under
    /// `sum_k w_k P_k = p`, whose infimum merges the slopes of the scaled
    /// slices. A minimum of two affine drifts is concave, so the value is the
    /// largest merge over mixtures of the two (minimax).
    fn exact_node(
        &self,
        t: f64,
        nc: &NodeCoeffs,
        kernel: &Kernel,
        rows: [&[f64]; 4],
        mut alphas: Option<&mut [f64]>,
    ) -> Option<Vec<f64>> {
        const MIXTURES: usize = 16;
        let pieces = self.model.affine_pieces(t, nc)?;
        let mixes: Vec<[f64; 3]> = match pieces.as_slice() {
            [one] => vec![*one],
            [a, b] => (0..=MIXTURES)
                .map(|m| {
                    let th = m as f64 / MIXTURES as f64;
                    [0, 1, 2].map(|c| th * a[c] + (1.0 - th) * b[c])
                })
                .collect(),
            _ => return None,
        };
        let np = rows[0].len();
        let mut best = vec![f64::NEG_INFINITY; np];
        let mut merged = vec![0.0; np];
        let mut shares = vec![[0.0; 4]; if alphas.is_some() { np } else { 0 }];
        let mut best_shares = shares.clone();
        for [a0, ay, au] in mixes {
            let mut coef = [0.0; 4];
            for k in 0..4 {
                let grad = if kernel.var > 0.0 { au * nc.sigma_inv * kernel.dw[k] / kernel.var } else { 0.0 };
                coef[k] = kernel.weights[k] * (1.0 - self.dt * ay - self.dt * grad);
                if coef[k] < 0.0 {
                    return None;
                }
            }
            merge_slices(&rows, &kernel.weights, &coef, &mut merged, alphas.is_some().then_some(shares.as_mut_slice()));
            for j in 0..np {
                let v = merged[j] - self.dt * a0;
                if v > best[j] {
                    best[j] = v;
                    if alphas.is_some() {
                        best_shares[j] = shares[j];
                    }
                }
            }
        }
        if let Some(out) = alphas.as_deref_mut() {
            let scale = if kernel.var > 0.0 { (kernel.var / self.dt).sqrt() } else { 0.0 };
            let h = 1.0 / (np - 1) as f64;
            for j in 1..np - 1 {
                let p = j as f64 * h;
                let mut cov = 0.0;
                for k in 0..4 {
                    if kernel.weights[k] > 0.0 {
                        cov += kernel.weights[k] * (best_shares[j][k] - p) * kernel.dw[k];
                    }
                }
                out[j] = if kernel.var > 0.0 { cov / kernel.var * scale } else { 0.0 };
            }
        }
        Some(best)
    }

    /// The same step with no `p` direction: used for the super-replication
    /// price on the x-axis. Returns the new row and the clip count.
    pub fn step_x(&self, next: &[f64], t: f64) -> (Vec<f64>, usize) {
        let mut clipped = 0;
        let out = self
            .nodes
            .iter()
            .zip(&self.kernels)
            .map(|(nc, kernel)| {
                let v = kernel.nodes.map(|k| next[k]);
                let (value, _, _) = self.evaluate(t, nc, kernel, &v);
                if value < 0.0 {
                    clipped += 1;
                    0.0
                } else {
                    value
                }
            })
            .collect();
        (out, clipped)
    }

    /// Minimizing control at an arbitrary point, reading `next` on the
    /// landing nodes of that point's kernel. Used for feedback policies.
    pub fn decide(&self, next: &ValueSurface, t: f64, x: f64, p: f64) -> NodeDecision {
        let nc = self.model.node_coeffs(x);
        let kernel = self.kernel_at(&nc);
        let rows = kernel.nodes.map(|k| next.row(k));
        self.optimize(t, &nc, &kernel, p, |k, q| interp_row(rows[k], q))
    }
}

/// One backward step with the grid's time step and default options.
pub fn step(next: &ValueSurface, t: f64, model: &MarketModel, a_grid: &ControlGrid) -> Result<StepOutcome> {
    let opts = SchemeOptions::default();
    let stepper = Stepper::new(model, next.grid().clone(), a_grid, next.grid().dt())?
        .with_variance_matching(opts.variance_matching)?
        .with_exact_splits(opts.exact_splits);
    Ok(stepper.step(next, t))
}

/// A backward interval `[start, end]` split into `steps` equal steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
    pub dt: f64,
}

/// Splits `[t_{i-1}, t_i]` for consecutive dates into steps no longer than
/// `dt_max`.
pub fn time_plan(dates: &[f64], dt_max: f64) -> Result<Vec<Interval>> {
    if !(dt_max > 0.0) {
        return Err(Error::Config(format!("time step must be positive, got {dt_max}")));
    }
    dates
        .windows(2)
        .map(|w| {
            let len = w[1] - w[0];
            if !(len > 0.0) {
                return Err(Error::Config(format!("dates must increase: {w:?}")));
            }
            let steps = ((len / dt_max) - 1e-9).ceil().max(1.0) as usize;
            Ok(Interval { start: w[0], end: w[1], steps, dt: len / steps as f64 })
        })
        .collect()
}
