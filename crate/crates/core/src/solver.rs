//! Bermudan backward induction: facelift at each exercise date, then the
//! grid scheme back to the previous date with boundary rows imposed after
//! every step.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::boundary::{impose_rows, payoff_on_grid, payoff_profiles, solve_vbar_with, BoundaryData};
use crate::csv::{fmt_num, write_atomic};
use crate::error::{Error, Result};
use crate::facelift::{convexity_defect, facelift_profiles, facelift_surface, lower_convex_envelope, FaceliftData};
use crate::hamiltonian::{lambda_shift, ControlGrid};
use crate::model::{ExerciseSchedule, LossKind, LossSpec, MarketModel, Vector};
use crate::scheme::{check_cfl, interpolate, Grid2D, Interval, SchemeOptions, Stepper, ValueSurface};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryMode {
    /// `v(., 0) = 0`, `v(., 1) = vbar`.
    Natural,
    /// Both boundary rows and the terminal layer held at a constant.
    Pinned(f64),
}

#[derive(Debug, Clone)]
pub struct SolveParams {
    pub controls: ControlGrid,
    /// Exponential shift used when the wealth drift depends on `y`;
    /// defaults to `L + 1`.
    pub lambda: Option<f64>,
    pub options: SchemeOptions,
    pub boundary: BoundaryMode,
    /// Extra times to keep besides `0` and the exercise dates.
    pub output_times: Vec<f64>,
    /// Keep every time layer (needed by the policy simulator).
    pub keep_all_layers: bool,
}

impl Default for SolveParams {
    fn default() -> Self {
        Self {
            controls: ControlGrid::default(),
            lambda: None,
            options: SchemeOptions::default(),
            boundary: BoundaryMode::Natural,
            output_times: Vec::new(),
            keep_all_layers: false,
        }
    }
}

/// A stored layer. At an exercise date, `left_limit` marks the facelifted
/// value `v(t_i-)`; the other layer is the continuation `v(t_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub t: f64,
    pub left_limit: bool,
    pub surface: ValueSurface,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveReport {
    pub steps: usize,
    pub clipped: usize,
    pub vbar_clipped: usize,
    pub fallback_rows: usize,
    /// Interior nodes lowered by the convex envelope in `p`.
    pub convexified: usize,
    /// Worst discrete convexity defect in `p` over all layers.
    pub max_convexity_defect: f64,
    /// Worst decrease in `p` along any slice.
    pub max_monotonicity_defect: f64,
    /// Worst `v - vbar` over interior nodes.
    pub max_excess_over_vbar: f64,
    pub min_cfl_margin: f64,
    pub lambda: Option<f64>,
}

/// Every layer of one interval, `layers[k]` at `start + k dt` in original
/// units; the last one is the facelifted left limit at the interval end.
/// `alphas[k]` holds the minimizing `P`-volatility of the step from
/// `start + k dt`, x-major like the surfaces, and `lowered[k]` flags the
/// nodes of `layers[k]` that the convex envelope moved (empty when the
/// envelope is off).
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalLayers {
    pub interval: Interval,
    pub layers: Vec<ValueSurface>,
    pub alphas: Vec<Vec<f64>>,
    pub lowered: Vec<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub grid: Arc<Grid2D>,
    pub model: MarketModel,
    pub schedule: ExerciseSchedule,
    pub options: SchemeOptions,
    pub controls: ControlGrid,
    /// Sorted by time; at equal times the left limit comes first.
    pub layers: Vec<Layer>,
    pub facelifts: Vec<(f64, FaceliftData)>,
    pub vbar: BoundaryData,
    pub report: SolveReport,
    pub trajectory: Option<Vec<IntervalLayers>>,
}

impl Solution {
    pub fn layer(&self, t: f64, left_limit: bool) -> Option<&ValueSurface> {
        self.layers.iter().find(|l| (l.t - t).abs() <= 1e-9 && l.left_limit == left_limit).map(|l| &l.surface)
    }

    pub fn initial(&self) -> &ValueSurface {
        self.layer(0.0, false).expect("t = 0 layer is always stored")
    }

    /// `v(0, x, p)` by bilinear interpolation.
    pub fn value(&self, x: f64, p: f64) -> f64 {
        interpolate(self.initial(), x, p)
    }

    pub fn facelift_at(&self, t: f64) -> Option<&FaceliftData> {
        self.facelifts.iter().find(|(s, _)| (s - t).abs() <= 1e-9).map(|(_, f)| f)
    }

    /// `vbar(t, .)` in original units.
    pub fn vbar_row(&self, t: f64, left_limit: bool) -> Result<Vec<f64>> {
        let scale = (-self.vbar_shift() * t).exp();
        Ok(self.vbar.vbar(t, left_limit)?.into_iter().map(|v| v * scale).collect())
    }

    fn vbar_shift(&self) -> f64 {
        self.report.lambda.unwrap_or(0.0)
    }
}

fn unshift(surface: &ValueSurface, lambda: Option<f64>) -> ValueSurface {
    match lambda {
        None => surface.clone(),
        Some(l) => {
            let damp = (-l * surface.time).exp();
            surface.map(|v| v * damp)
        }
    }
}

fn check_finite(surface: &ValueSurface, layer: usize) -> Result<()> {
    if let Some(k) = surface.values().iter().position(|v| !v.is_finite()) {
        let np = surface.grid().np();
        return Err(Error::Numerical {
            layer,
            msg: format!("non-finite value at t = {} (x index {}, p index {})", surface.time, k / np, k % np),
        });
    }
    Ok(())
}

fn slice_diagnostics(surface: &ValueSurface, vbar: &[f64], report: &mut SolveReport) {
    let grid = surface.grid();
    let np = grid.np();
    for (i, &vb) in vbar.iter().enumerate() {
        let row = surface.row(i);
        report.max_convexity_defect = report.max_convexity_defect.max(convexity_defect(grid.p_nodes(), row));
        for w in row.windows(2) {
            report.max_monotonicity_defect = report.max_monotonicity_defect.max(w[0] - w[1]);
        }
        for &v in &row[1..np - 1] {
            report.max_excess_over_vbar = report.max_excess_over_vbar.max(v - vb);
        }
    }
}

/// Lower convex envelope of every p-slice; returns the mask of nodes that
/// moved by more than rounding.
fn convexify_slices(surface: &mut ValueSurface) -> Vec<bool> {
    let grid = surface.grid().clone();
    let mut mask = vec![false; grid.nx() * grid.np()];
    for i in 0..grid.nx() {
        let row = surface.row(i).to_vec();
        let Ok(env) = lower_convex_envelope(grid.p_nodes(), &row) else { continue };
        let scale = row.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        for (j, (&v, &e)) in row.iter().zip(&env).enumerate() {
            mask[i * grid.np() + j] = v - e > 1e-13 * scale;
        }
        surface.row_mut(i).copy_from_slice(&env);
    }
    mask
}

/// Terminal left limit `v(T-)` for a general loss: the envelope in `p` of
/// the generalized inverse of the loss.
fn terminal_envelope(loss: &LossSpec, horizon: f64, grid: &Arc<Grid2D>, scale: f64) -> Result<ValueSurface> {
    let mut values = Vec::with_capacity(grid.nx() * grid.np());
    for &x in grid.x_nodes() {
        let xv = Vector::from_element(1, x);
        let raw: Vec<f64> = grid
            .p_nodes()
            .iter()
            .map(|&p| loss.terminal_value(horizon, &xv, p).map(|v| v * scale))
            .collect::<Result<_>>()?;
        values.extend(lower_convex_envelope(grid.p_nodes(), &raw)?);
    }
    ValueSurface::from_values(grid.clone(), values, horizon)
}

fn snap_outputs(times: &[f64], iv: &Interval) -> Vec<usize> {
    times
        .iter()
        .filter(|&&t| t > iv.start && t < iv.end)
        .map(|&t| ((t - iv.start) / iv.dt).round() as usize)
        .filter(|&k| k > 0 && k < iv.steps)
        .collect()
}

pub fn solve(
    model: &MarketModel,
    loss: &LossSpec,
    schedule: &ExerciseSchedule,
    grid: Arc<Grid2D>,
    params: &SolveParams,
) -> Result<Solution> {
    if model.dim != 1 {
        return Err(Error::Unsupported("the solver is implemented for d = 1".into()));
    }
    let indicator = matches!(loss.kind, LossKind::Indicator);
    if !indicator && schedule.exercise_dates().len() > 1 {
        return Err(Error::Unsupported("losses other than the indicator are supported for a single date".into()));
    }
    if schedule.payoff.label() != loss.payoff.label() {
        return Err(Error::Usage(format!(
            "loss payoff `{}` differs from schedule payoff `{}`",
            loss.payoff.label(),
            schedule.payoff.label()
        )));
    }
    let lambda = if model.is_y_dependent() && model.shift.is_none() {
        Some(params.lambda.unwrap_or(model.lipschitz_l + 1.0))
    } else {
        None
    };
    let stepping = match lambda {
        Some(l) => lambda_shift(model, l)?,
        None => model.clone(),
    };
    let bdata = match params.boundary {
        BoundaryMode::Natural => solve_vbar_with(&stepping, schedule, grid.clone(), params.options)?,
        BoundaryMode::Pinned(c) => BoundaryData::pinned(&stepping, schedule, grid.clone(), c)?,
    };
    let plan = bdata.plan().to_vec();
    let mut report = SolveReport {
        vbar_clipped: bdata.clipped,
        lambda,
        min_cfl_margin: f64::INFINITY,
        ..Default::default()
    };
    for iv in &plan {
        report.min_cfl_margin = report.min_cfl_margin.min(check_cfl(&stepping, iv.dt)?.min_margin());
    }

    let horizon = schedule.horizon();
    let mut current = match params.boundary {
        BoundaryMode::Pinned(c) => ValueSurface::constant(grid.clone(), horizon, c * stepping.payoff_scale(horizon))?,
        BoundaryMode::Natural => ValueSurface::constant(grid.clone(), horizon, 0.0)?,
    };
    let mut layers = Vec::new();
    let mut facelifts = Vec::new();
    let mut trajectory = params.keep_all_layers.then(Vec::new);

    for (i, iv) in plan.iter().enumerate().rev() {
        let t_i = iv.end;
        let scale = stepping.payoff_scale(t_i);
        layers.push(Layer { t: t_i, left_limit: false, surface: unshift(&current, lambda) });

        let mut lifted = if indicator || matches!(params.boundary, BoundaryMode::Pinned(_)) {
            let payoff: Vec<f64> = payoff_on_grid(&schedule.payoff, t_i, &grid, params.options.payoff_smoothing)
                .into_iter()
                .map(|g| g * scale)
                .collect();
            let mut fl = facelift_surface(&current, &payoff)?;
            report.fallback_rows += fl.fallback_rows;
            if params.options.payoff_smoothing && matches!(params.boundary, BoundaryMode::Natural) {
                let profiles: Vec<Vec<f64>> = payoff_profiles(&schedule.payoff, t_i, &grid)
                    .into_iter()
                    .map(|row| row.into_iter().map(|g| g * scale).collect())
                    .collect();
                fl.lifted = facelift_profiles(&current, &profiles)?;
            }
            let mut lifted = fl.lifted.clone();
            let damp = lambda.map_or(1.0, |l| (-l * t_i).exp());
            facelifts.push((
                t_i,
                FaceliftData {
                    p_g: fl.p_g,
                    q_g: fl.q_g.iter().map(|q| q * damp).collect(),
                    lifted: unshift(&fl.lifted, lambda),
                    fallback_rows: fl.fallback_rows,
                },
            ));
            lifted.time = t_i;
            lifted
        } else {
            terminal_envelope(loss, t_i, &grid, scale)?
        };
        impose_rows(&mut lifted, bdata.lower(t_i), &bdata.row_at(i, iv.steps));
        slice_diagnostics(&lifted, &bdata.row_at(i, iv.steps), &mut report);
        layers.push(Layer { t: t_i, left_limit: true, surface: unshift(&lifted, lambda) });

        let stepper = Stepper::new(&stepping, grid.clone(), &params.controls, iv.dt)?
            .with_variance_matching(params.options.variance_matching)?
            .with_exact_splits(params.options.exact_splits && params.options.convexify);
        let outputs = snap_outputs(&params.output_times, iv);
        let mut kept = trajectory.as_ref().map(|_| {
            let mut v = vec![None; iv.steps + 1];
            v[iv.steps] = Some(unshift(&lifted, lambda));
            (v, vec![Vec::new(); iv.steps], vec![Vec::new(); iv.steps + 1])
        });
        current = lifted;
        for k in (0..iv.steps).rev() {
            let t = iv.start + k as f64 * iv.dt;
            let out = stepper.step_full(&current, t, kept.is_some());
            let mut surface = out.surface;
            surface.time = t;
            check_finite(&surface, report.steps)?;
            let upper = bdata.row_at(i, k);
            impose_rows(&mut surface, bdata.lower(t), &upper);
            report.clipped += out.clipped;
            report.steps += 1;
            slice_diagnostics(&surface, &upper, &mut report);
            let lowered = if params.options.convexify { convexify_slices(&mut surface) } else { Vec::new() };
            report.convexified += lowered.iter().filter(|&&b| b).count();
            if outputs.contains(&k) {
                layers.push(Layer { t, left_limit: false, surface: unshift(&surface, lambda) });
            }
            if let Some((kept, alphas, masks)) = kept.as_mut() {
                kept[k] = Some(unshift(&surface, lambda));
                alphas[k] = out.alphas.unwrap_or_default();
                masks[k] = lowered;
            }
            current = surface;
        }
        if let (Some(traj), Some((kept, alphas, lowered))) = (trajectory.as_mut(), kept) {
            let layers = kept.into_iter().map(|s| s.expect("every step stored")).collect();
            traj.push(IntervalLayers { interval: *iv, layers, alphas, lowered });
        }
    }
    layers.push(Layer { t: 0.0, left_limit: false, surface: unshift(&current, lambda) });
    layers.sort_by(|a, b| a.t.total_cmp(&b.t).then(b.left_limit.cmp(&a.left_limit)));
    facelifts.reverse();
    if let Some(traj) = trajectory.as_mut() {
        traj.reverse();
    }
    Ok(Solution {
        grid,
        model: model.clone(),
        schedule: schedule.clone(),
        options: params.options,
        controls: params.controls.clone(),
        layers,
        facelifts,
        vbar: bdata,
        report,
        trajectory,
    })
}

/// Rows `t,x,p,v` in lexicographic `(t, x, p)` order.
pub fn surface_csv(layers: &[&Layer]) -> String {
    let mut out = String::from("t,x,p,v\n");
    for layer in layers {
        let grid = layer.surface.grid();
        for (i, &x) in grid.x_nodes().iter().enumerate() {
            for (j, &p) in grid.p_nodes().iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", fmt_num(layer.t), fmt_num(x), fmt_num(p), fmt_num(layer.surface.get(i, j)));
            }
        }
    }
    out
}

pub fn facelift_csv(grid: &Grid2D, data: &FaceliftData) -> String {
    let mut out = String::from("x,p_g,q_g\n");
    for ((x, pg), qg) in grid.x_nodes().iter().zip(&data.p_g).zip(&data.q_g) {
        let _ = writeln!(out, "{},{},{}", fmt_num(*x), fmt_num(*pg), fmt_num(*qg));
    }
    out
}

pub fn write_surface_csv(path: &Path, layers: &[&Layer]) -> Result<()> {
    write_atomic(path, &surface_csv(layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Payoff, PricingMode};

    fn small_grid(dt: f64) -> Arc<Grid2D> {
        Arc::new(Grid2D::centered(1.0, 0.2, 1.0, 5.0, 41, 21, dt).unwrap())
    }

    fn bs(mode: PricingMode) -> MarketModel {
        MarketModel::black_scholes(0.1, 0.2, mode).unwrap()
    }

    #[test]
    fn terminal_facelift_is_p_times_payoff() {
        let m = bs(PricingMode::LinearPricing { rate: 0.0 });
        let s = ExerciseSchedule::european(1.0, Payoff::call(1.0)).unwrap();
        let g = small_grid(1e-2);
        let sol = solve(&m, &LossSpec::indicator(Payoff::call(1.0)), &s, g.clone(), &SolveParams::default()).unwrap();
        let top = sol.layer(1.0, true).unwrap();
        for (i, &x) in g.x_nodes().iter().enumerate() {
            for (j, &p) in g.p_nodes().iter().enumerate() {
                assert!((top.get(i, j) - p * (x - 1.0).max(0.0)).abs() <= 1e-12);
            }
        }
        assert!(sol.layer(1.0, false).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pinned_constant_is_stationary() {
        let m = bs(PricingMode::ZeroDrift);
        let s = ExerciseSchedule::european(1.0, Payoff::zero()).unwrap();
        let params = SolveParams { boundary: BoundaryMode::Pinned(2.0), keep_all_layers: true, ..Default::default() };
        let sol = solve(&m, &LossSpec::indicator(Payoff::zero()), &s, small_grid(1e-2), &params).unwrap();
        for iv in sol.trajectory.as_ref().unwrap() {
            for l in &iv.layers {
                assert!(l.values().iter().all(|v| (v - 2.0).abs() <= 1e-10));
            }
        }
    }

    #[test]
    fn boundary_rows_and_shape() {
        let m = bs(PricingMode::LinearPricing { rate: 0.0 });
        let s = ExerciseSchedule::new(&[0.5, 1.0], Payoff::digital(1.0)).unwrap();
        let g = small_grid(1e-2);
        let sol = solve(&m, &LossSpec::indicator(Payoff::digital(1.0)), &s, g.clone(), &SolveParams::default()).unwrap();
        let v0 = sol.initial();
        let vbar0 = sol.vbar_row(0.0, false).unwrap();
        for i in 0..g.nx() {
            assert_eq!(v0.get(i, 0), 0.0);
            assert_eq!(v0.get(i, g.np() - 1), vbar0[i]);
        }
        assert!(sol.report.max_monotonicity_defect <= 1e-9, "{:?}", sol.report);
        assert!(sol.report.max_excess_over_vbar <= 1e-9, "{:?}", sol.report);
        assert_eq!(sol.facelifts.len(), 2);
        assert_eq!(sol.layers.first().unwrap().t, 0.0);
    }

    #[test]
    fn shifted_solve_unshifts_output() {
        let lin = bs(PricingMode::LinearPricing { rate: 0.02 });
        let two = bs(PricingMode::TwoRate { lend: 0.02, borrow: 0.02 });
        let s = ExerciseSchedule::european(1.0, Payoff::digital(1.0)).unwrap();
        let loss = LossSpec::indicator(Payoff::digital(1.0));
        let params = SolveParams { lambda: Some(1.0), ..Default::default() };
        let a = solve(&lin, &loss, &s, small_grid(1e-2), &params).unwrap();
        let b = solve(&two, &loss, &s, small_grid(1e-2), &params).unwrap();
        assert_eq!(a.report.lambda, Some(1.0));
        assert!(a.initial().max_abs_diff(b.initial()) <= 1e-10);
        let top = a.layer(1.0, true).unwrap();
        let g = small_grid(1e-2);
        let i = g.x_index(1.0).unwrap();
        assert!((top.get(i, g.np() - 1) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn ramp_loss_single_date() {
        let m = bs(PricingMode::LinearPricing { rate: 0.0 });
        let s = ExerciseSchedule::european(1.0, Payoff::call(1.0)).unwrap();
        let g = small_grid(1e-2);
        let sol = solve(&m, &LossSpec::ramp(Payoff::call(1.0)), &s, g.clone(), &SolveParams::default()).unwrap();
        let top = sol.layer(1.0, true).unwrap();
        for (i, &x) in g.x_nodes().iter().enumerate() {
            for (j, &p) in g.p_nodes().iter().enumerate() {
                assert!((top.get(i, j) - p * (x - 1.0).max(0.0)).abs() <= 1e-9);
            }
        }
        let two = ExerciseSchedule::new(&[0.5, 1.0], Payoff::call(1.0)).unwrap();
        assert!(matches!(
            solve(&m, &LossSpec::ramp(Payoff::call(1.0)), &two, g, &SolveParams::default()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let m = bs(PricingMode::ZeroDrift);
        let s = ExerciseSchedule::european(0.1, Payoff::digital(1.0)).unwrap();
        let g = Arc::new(Grid2D::log_uniform(0.5, 2.0, 3, 3, 0.01).unwrap());
        let sol = solve(&m, &LossSpec::indicator(Payoff::digital(1.0)), &s, g, &SolveParams::default()).unwrap();
        let text = surface_csv(&[&sol.layers[0]]);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,x,p,v"));
        assert_eq!(text.lines().count(), 10);
        let csv = facelift_csv(&sol.grid, sol.facelift_at(0.1).unwrap());
        assert!(csv.starts_with("x,p_g,q_g\n"));
    }
}
