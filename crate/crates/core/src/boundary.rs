//! Boundary rows in `p`: `v(t, x, 0) = 0` and `v(t, x, 1) = vbar(t, x)`, where
//! `vbar` is the Bermudan super-replication price solved on the x-axis.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hamiltonian::ControlGrid;
use crate::model::{ExerciseSchedule, MarketModel, Payoff};
use crate::scheme::{time_plan, Grid2D, Interval, SchemeOptions, Stepper, ValueSurface};

/// `vbar` on one interval `[t_{i-1}, t_i]`. `rows[k]` is the value at
/// `start + k dt`; `rows[steps]` is the left limit at `t_i` (after the max
/// with the payoff).
#[derive(Debug, Clone, PartialEq)]
pub struct VbarInterval {
    pub interval: Interval,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
enum UpperRow {
    Computed { intervals: Vec<VbarInterval>, terminal: Vec<f64> },
    /// Constant in original units, scaled by `e^{lambda t}` under a shift.
    Pinned(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    grid: Arc<Grid2D>,
    dates: Vec<f64>,
    plan: Vec<Interval>,
    lower: f64,
    upper: UpperRow,
    shift: Option<f64>,
    /// Nodes clipped at 0 while solving `vbar`.
    pub clipped: usize,
}

const TIME_TOL: f64 = 1e-9;

impl BoundaryData {
    /// Both rows held at the constant `c` at every time (the terminal layer
    /// is pinned by the solver as well).
    pub fn pinned(model: &MarketModel, schedule: &ExerciseSchedule, grid: Arc<Grid2D>, c: f64) -> Result<Self> {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(Error::Domain(format!("pinned boundary value must be finite and non-negative, got {c}")));
        }
        let plan = time_plan(schedule.dates(), grid.dt())?;
        Ok(Self {
            grid,
            dates: schedule.dates().to_vec(),
            plan,
            lower: c,
            upper: UpperRow::Pinned(c),
            shift: model.shift,
            clipped: 0,
        })
    }

    pub fn grid(&self) -> &Arc<Grid2D> {
        &self.grid
    }

    pub fn plan(&self) -> &[Interval] {
        &self.plan
    }

    pub fn is_pinned(&self) -> bool {
        matches!(self.upper, UpperRow::Pinned(_))
    }

    fn scale(&self, t: f64) -> f64 {
        self.shift.map_or(1.0, |lambda| (lambda * t).exp())
    }

    /// Value of the `p = 0` row at time `t`.
    pub fn lower(&self, t: f64) -> f64 {
        self.lower * self.scale(t)
    }

    /// `vbar` at step `k` of interval `i` (0-based, interval `i` ends at
    /// `dates[i + 1]`).
    pub fn row_at(&self, i: usize, k: usize) -> Vec<f64> {
        match &self.upper {
            UpperRow::Computed { intervals, .. } => intervals[i].rows[k].clone(),
            UpperRow::Pinned(c) => {
                let iv = &self.plan[i];
                let t = iv.start + k as f64 * iv.dt;
                vec![c * self.scale(t); self.grid.nx()]
            }
        }
    }

    /// `vbar(t, .)`; at an exercise date `left_limit` selects `vbar(t_i-)`
    /// (after the max with the payoff) over the continuation `vbar(t_i)`.
    pub fn vbar(&self, t: f64, left_limit: bool) -> Result<Vec<f64>> {
        let n = self.plan.len();
        if let Some(pos) = self.dates.iter().position(|&d| (d - t).abs() <= TIME_TOL) {
            if pos == 0 {
                return Ok(self.row_at(0, 0));
            }
            if left_limit {
                return Ok(self.row_at(pos - 1, self.plan[pos - 1].steps));
            }
            if pos == n {
                return Ok(match &self.upper {
                    UpperRow::Computed { terminal, .. } => terminal.clone(),
                    UpperRow::Pinned(c) => vec![c * self.scale(t); self.grid.nx()],
                });
            }
            return Ok(self.row_at(pos, 0));
        }
        for (i, iv) in self.plan.iter().enumerate() {
            if t > iv.start && t < iv.end {
                let k = ((t - iv.start) / iv.dt).round();
                if (iv.start + k * iv.dt - t).abs() <= TIME_TOL {
                    return Ok(self.row_at(i, k as usize));
                }
            }
        }
        Err(Error::Usage(format!("no boundary layer stored at t = {t}")))
    }

    /// Largest `vbar(t, x) / (1 + |x|^k)` over all stored layers.
    pub fn growth_constant(&self, k: f64) -> f64 {
        let x = self.grid.x_nodes();
        let fit = |row: &[f64]| row.iter().zip(x).fold(0.0f64, |m, (v, x)| m.max(v / (1.0 + x.abs().powf(k))));
        match &self.upper {
            UpperRow::Computed { intervals, .. } => {
                intervals.iter().flat_map(|iv| iv.rows.iter()).fold(0.0, |m, row| m.max(fit(row)))
            }
            UpperRow::Pinned(c) => *c * self.scale(*self.dates.last().unwrap_or(&0.0)).max(1.0),
        }
    }
}

/// Backward explicit solve of the super-replication price with
/// `vbar(T) = 0` and `vbar(t_i-) = max(vbar(t_i), g(t_i, .))`.
pub fn solve_vbar(model: &MarketModel, schedule: &ExerciseSchedule, grid: Arc<Grid2D>) -> Result<BoundaryData> {
    solve_vbar_with(model, schedule, grid, SchemeOptions::default())
}

pub fn solve_vbar_with(
    model: &MarketModel,
    schedule: &ExerciseSchedule,
    grid: Arc<Grid2D>,
    options: SchemeOptions,
) -> Result<BoundaryData> {
    let plan = time_plan(schedule.dates(), grid.dt())?;
    let controls = ControlGrid::from_values(vec![0.0])?;
    let nx = grid.nx();
    let terminal: Vec<f64> = vec![0.0; nx];
    let mut next = terminal.clone();
    let mut intervals: Vec<VbarInterval> = Vec::with_capacity(plan.len());
    let mut clipped = 0;
    for iv in plan.iter().rev() {
        let stepper =
            Stepper::new(model, grid.clone(), &controls, iv.dt)?.with_variance_matching(options.variance_matching)?
            .with_exact_splits(options.exact_splits && options.convexify);
        let scale = model.payoff_scale(iv.end);
        let payoff = payoff_on_grid(&schedule.payoff, iv.end, &grid, options.payoff_smoothing);
        let lifted: Vec<f64> = payoff.iter().zip(&next).map(|(&g, &v)| v.max(scale * g)).collect();
        let mut rows = vec![Vec::new(); iv.steps + 1];
        rows[iv.steps] = lifted;
        for k in (0..iv.steps).rev() {
            let t = iv.start + k as f64 * iv.dt;
            let (row, c) = stepper.step_x(&rows[k + 1], t);
            if let Some(bad) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical { layer: k, msg: format!("super-replication price non-finite at x index {bad}") });
            }
            clipped += c;
            rows[k] = row;
        }
        next = rows[0].clone();
        intervals.push(VbarInterval { interval: *iv, rows });
    }
    intervals.reverse();
    Ok(BoundaryData {
        grid,
        dates: schedule.dates().to_vec(),
        plan,
        lower: 0.0,
        upper: UpperRow::Computed { intervals, terminal },
        shift: model.shift,
        clipped,
    })
}

/// Payoff at time `t` on the x-nodes, optionally cell-averaged.
pub fn payoff_on_grid(payoff: &Payoff, t: f64, grid: &Grid2D, smoothing: bool) -> Vec<f64> {
    (0..grid.nx())
        .map(|i| {
            if smoothing {
                grid.cell_average(i, |x| payoff.eval_scalar(t, x))
            } else {
                payoff.eval_scalar(t, grid.x_nodes()[i])
            }
        })
        .collect()
}

/// Cheapest cost, per x-node, of meeting the target on a fraction `p` of
/// the node's dual cell: the running mean of the sorted cell samples of the
/// payoff, evaluated on the p-axis. Equals the cell average at `p = 1`.
pub fn payoff_profiles(payoff: &Payoff, t: f64, grid: &Grid2D) -> Vec<Vec<f64>> {
    (0..grid.nx())
        .map(|i| {
            let mut s = grid.cell_samples(i, |x| payoff.eval_scalar(t, x));
            s.sort_by(|a, b| a.total_cmp(b));
            let n = s.len() as f64;
            let mut cum = vec![0.0; s.len() + 1];
            for (k, v) in s.iter().enumerate() {
                cum[k + 1] = cum[k] + v;
            }
            grid.p_nodes()
                .iter()
                .map(|&p| {
                    let pos = p * n;
                    let k = (pos.floor() as usize).min(s.len() - 1);
                    (cum[k] + (pos - k as f64) * s[k]) / n
                })
                .collect()
        })
        .collect()
}

/// Overwrites the `p = 0` row with the lower boundary value and the `p = 1`
/// row with `upper`.
pub(crate) fn impose_rows(surface: &mut ValueSurface, lower: f64, upper: &[f64]) {
    let np = surface.grid().np();
    for (i, &u) in upper.iter().enumerate() {
        let row = surface.row_mut(i);
        row[0] = lower;
        row[np - 1] = u;
    }
}

/// Returns `surface` with `p = 0` and `p = 1` rows taken from `bdata` at
/// time `t`.
pub fn apply_p_boundaries(surface: &ValueSurface, bdata: &BoundaryData, t: f64, left_limit: bool) -> Result<ValueSurface> {
    if surface.grid().nx() != bdata.grid().nx() || surface.grid().np() != bdata.grid().np() {
        return Err(Error::Usage("surface and boundary data live on different grids".into()));
    }
    let upper = bdata.vbar(t, left_limit)?;
    let mut out = surface.clone();
    impose_rows(&mut out, bdata.lower(t), &upper);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PricingMode;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn bs() -> MarketModel {
        MarketModel::black_scholes(0.1, 0.2, PricingMode::LinearPricing { rate: 0.0 }).unwrap()
    }

    fn digital_grid(dt: f64) -> Arc<Grid2D> {
        Arc::new(Grid2D::centered(1.0, 0.2, 1.0, 5.0, 201, 11, dt).unwrap())
    }

    #[test]
    fn zero_payoff_gives_zero_price() {
        let s = ExerciseSchedule::new(&[0.5, 1.0], Payoff::zero()).unwrap();
        let b = solve_vbar(&bs(), &s, digital_grid(1e-2)).unwrap();
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            for left in [false, true] {
                assert!(b.vbar(t, left).unwrap().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn european_digital_matches_risk_neutral_price() {
        let s = ExerciseSchedule::european(1.0, Payoff::digital(1.0)).unwrap();
        let g = digital_grid(1e-3);
        let options = SchemeOptions { payoff_smoothing: true, ..SchemeOptions::default() };
        let b = solve_vbar_with(&bs(), &s, g.clone(), options).unwrap();
        let i = g.x_index(1.0).unwrap();
        let got = b.vbar(0.0, false).unwrap()[i];
        let exact = Normal::standard().cdf(-0.1);
        assert!((got / exact - 1.0).abs() <= 5e-3, "{got} vs {exact}");
    }

    #[test]
    fn layers_at_exercise_dates() {
        let s = ExerciseSchedule::new(&[0.5, 1.0], Payoff::digital(1.0)).unwrap();
        let g = digital_grid(1e-2);
        let b = solve_vbar(&bs(), &s, g.clone()).unwrap();
        let terminal = b.vbar(1.0, false).unwrap();
        assert!(terminal.iter().all(|&v| v == 0.0));
        let lifted = b.vbar(1.0, true).unwrap();
        for (x, v) in g.x_nodes().iter().zip(&lifted) {
            assert!((*v - if *x >= 1.0 { 1.0 } else { 0.0 }).abs() <= 1e-12);
        }
        let cont = b.vbar(0.5, false).unwrap();
        let left = b.vbar(0.5, true).unwrap();
        for ((x, c), l) in g.x_nodes().iter().zip(&cont).zip(&left) {
            assert!(*l >= *c);
            if *x >= 1.0 {
                assert!((*l - 1.0).abs() <= 1e-12);
            }
        }
        assert!(b.vbar(0.123456, false).is_err());
    }

    #[test]
    fn zero_drift_price_decreases_in_time() {
        let m = MarketModel::black_scholes(0.1, 0.2, PricingMode::ZeroDrift).unwrap();
        let s = ExerciseSchedule::new(&[0.5, 1.0], Payoff::call(1.0)).unwrap();
        let g = digital_grid(1e-2);
        let b = solve_vbar(&m, &s, g).unwrap();
        for iv in 0..2 {
            let steps = b.plan()[iv].steps;
            for k in 0..steps {
                let early = b.row_at(iv, k);
                let late = b.row_at(iv, k + 1);
                // away from the clamped x-edges
                assert!(early[50..150].iter().zip(&late[50..150]).all(|(e, l)| *e >= l - 1e-12));
            }
        }
    }

    #[test]
    fn rows_are_imposed_and_interior_untouched() {
        let s = ExerciseSchedule::european(1.0, Payoff::digital(1.0)).unwrap();
        let g = digital_grid(1e-2);
        let b = solve_vbar(&bs(), &s, g.clone()).unwrap();
        let surface = ValueSurface::constant(g.clone(), 0.0, 3.0).unwrap();
        let out = apply_p_boundaries(&surface, &b, 0.0, false).unwrap();
        let vbar0 = b.vbar(0.0, false).unwrap();
        for i in 0..g.nx() {
            assert_eq!(out.get(i, 0), 0.0);
            assert_eq!(out.get(i, g.np() - 1), vbar0[i]);
            for j in 1..g.np() - 1 {
                assert_eq!(out.get(i, j), 3.0);
            }
        }
        assert!(apply_p_boundaries(&surface, &b, 0.3333333, false).is_err());
    }

    #[test]
    fn growth_constant_bounds_every_layer() {
        let s = ExerciseSchedule::new(&[0.5, 1.0], Payoff::call(1.0)).unwrap();
        let g = digital_grid(1e-2);
        let b = solve_vbar(&bs(), &s, g.clone()).unwrap();
        let beta = b.growth_constant(1.0);
        assert!(beta > 0.0);
        for t in [0.0, 0.3, 0.5, 0.8] {
            let row = b.vbar(t, false).unwrap();
            for (x, v) in g.x_nodes().iter().zip(&row) {
                assert!(*v <= beta * (1.0 + x) + 1e-12);
            }
        }
    }
}
