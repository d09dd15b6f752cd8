//! Independent references: the Neyman-Pearson price of a digital claim, a
//! recombining-tree dynamic program over `(node, p)`, and a Monte-Carlo
//! simulator for the feedback policy read off a solved surface.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::csv::fmt_num;
use crate::error::{Error, Result};
use crate::model::{MarketModel, Payoff};
use crate::scheme::{interpolate, interpolate_values};
use crate::solver::Solution;

fn std_normal() -> Normal {
    Normal::standard()
}

fn check_digital_inputs(mu: f64, sigma: f64, horizon: f64, x0: f64, strike: f64, p: f64) -> Result<()> {
    if !(sigma > 0.0 && horizon > 0.0 && x0 > 0.0 && strike > 0.0) {
        return Err(Error::Domain(format!(
            "need sigma, T, x0, K > 0, got sigma={sigma}, T={horizon}, x0={x0}, K={strike}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability level must lie in [0, 1], got {p}")));
    }
    if !(mu > 0.0) {
        return Err(Error::Unsupported(format!("the digital closed form needs mu > 0, got {mu}")));
    }
    Ok(())
}

/// Quantile-hedging price of `1_{X_T >= K}` under zero-rate Black-Scholes.
///
/// `dQ/dP` decreases in `X_T` when `mu > 0`, so the cheapest success set is
/// `{X_T < K}` (free) together with the upper tail `{X_T >= c}` carrying the
/// remaining physical mass `p - P(X_T < K)`. The price is `Q(X_T >= c)`.
pub fn np_digital_price(mu: f64, sigma: f64, horizon: f64, x0: f64, strike: f64, p: f64) -> Result<f64> {
    check_digital_inputs(mu, sigma, horizon, x0, strike, p)?;
    let n = std_normal();
    let vol = sigma * horizon.sqrt();
    let drift = (mu - 0.5 * sigma * sigma) * horizon;
    let p_below = n.cdf(((strike / x0).ln() - drift) / vol);
    let needed = p - p_below;
    if needed <= 0.0 {
        return Ok(0.0);
    }
    let d2 = |c: f64| ((x0 / c).ln() - 0.5 * sigma * sigma * horizon) / vol;
    if needed >= 1.0 - p_below {
        return Ok(n.cdf(d2(strike)));
    }
    // P(X_T >= c) = needed
    let c = x0 * (drift - vol * n.inverse_cdf(needed)).exp();
    Ok(n.cdf(d2(c.max(strike))))
}

/// Monte-Carlo Neyman-Pearson: builds the cheapest success set sample by
/// sample, ranking paths with a positive payoff by their likelihood ratio
/// `dQ/dP`. Returns the price estimate and its standard error.
pub fn mc_np_digital(
    mu: f64,
    sigma: f64,
    horizon: f64,
    x0: f64,
    strike: f64,
    p: f64,
    n_paths: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_digital_inputs(mu, sigma, horizon, x0, strike, p)?;
    if n_paths == 0 {
        return Err(Error::Usage("need at least one path".into()));
    }
    let theta = mu / sigma;
    let sqrt_t = horizon.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut free = 0usize;
    let mut ratios = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let z: f64 = rng.sample(StandardNormal);
        let x = x0 * ((mu - 0.5 * sigma * sigma) * horizon + sigma * sqrt_t * z).exp();
        if x < strike {
            free += 1;
        } else {
            ratios.push((-theta * sqrt_t * z - 0.5 * theta * theta * horizon).exp());
        }
    }
    ratios.sort_by(|a, b| a.total_cmp(b));
    let target = (p * n_paths as f64).ceil() as usize;
    let take = target.saturating_sub(free).min(ratios.len());
    let n = n_paths as f64;
    let sum = ratios[..take].iter().fold(0.0, |a, r| a + r);
    let sum_sq = ratios[..take].iter().fold(0.0, |a, r| a + r * r);
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Recombining binomial tree for `X` with physical up-probability and
/// zero-rate pricing probability `q = (1 - down) / (up - down)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSpec {
    pub steps: usize,
    pub up: f64,
    pub down: f64,
    pub phys_prob: f64,
    /// Step indices at which the claim can be exercised.
    pub exercise_steps: Vec<usize>,
    /// Calendar length of one step (used to evaluate time-dependent payoffs).
    pub step_length: f64,
    /// Use node-cell averages of the payoff.
    pub smooth_payoff: bool,
    /// Allow randomized splits: every node function is replaced by its lower
    /// convex envelope in `p`, and exercise dates apply the facelift. Off,
    /// splits are deterministic and the value need not be convex.
    pub randomized: bool,
}

impl TreeSpec {
    /// Cox-Ross-Rubinstein tree for Black-Scholes drift `mu`, volatility
    /// `sigma`, with exercise dates mapped to the nearest step.
    pub fn crr(mu: f64, sigma: f64, horizon: f64, steps: usize, exercise_dates: &[f64]) -> Result<Self> {
        if steps == 0 || !(horizon > 0.0) || !(sigma > 0.0) {
            return Err(Error::Usage("tree needs steps > 0, T > 0, sigma > 0".into()));
        }
        let dt = horizon / steps as f64;
        let up = (sigma * dt.sqrt()).exp();
        let down = 1.0 / up;
        let phys_prob = ((mu * dt).exp() - down) / (up - down);
        let exercise_steps = exercise_dates.iter().map(|&t| (t / dt).round() as usize).collect();
        let spec = Self {
            steps,
            up,
            down,
            phys_prob,
            exercise_steps,
            step_length: dt,
            smooth_payoff: false,
            randomized: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn pricing_prob(&self) -> f64 {
        (1.0 - self.down) / (self.up - self.down)
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.pricing_prob();
        if !(self.down < 1.0 && 1.0 < self.up && self.down > 0.0) || !(q > 0.0 && q < 1.0) {
            return Err(Error::Usage(format!("invalid tree: up={}, down={}, q={q}", self.up, self.down)));
        }
        if !(self.phys_prob > 0.0 && self.phys_prob < 1.0) {
            return Err(Error::Usage(format!("physical probability must lie in (0, 1), got {}", self.phys_prob)));
        }
        if self.exercise_steps.iter().any(|&s| s > self.steps) {
            return Err(Error::Usage("exercise step beyond the tree".into()));
        }
        Ok(())
    }

    fn payoff_at(&self, g: &Payoff, n: usize, x: f64) -> f64 {
        let t = n as f64 * self.step_length;
        if !self.smooth_payoff {
            return g.eval_scalar(t, x);
        }
        let s = self.cell_samples(g, n, x);
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// Payoff samples over the node's cell `[x sqrt(down), x sqrt(up)]`
    /// (uniform in `ln x`), sorted ascending.
    fn cell_samples(&self, g: &Payoff, n: usize, x: f64) -> Vec<f64> {
        const SAMPLES: usize = 64;
        let t = n as f64 * self.step_length;
        let (llo, lhi) = ((x * self.down.sqrt()).ln(), (x * self.up.sqrt()).ln());
        let w = (lhi - llo) / SAMPLES as f64;
        let mut s: Vec<f64> = (0..SAMPLES).map(|k| g.eval_scalar(t, (llo + (k as f64 + 0.5) * w).exp())).collect();
        s.sort_by(|a, b| a.total_cmp(b));
        s
    }

    /// Cheapest cost of meeting the target on a fraction `p` of the cell:
    /// the running mean of the sorted samples.
    fn cell_profile(&self, g: &Payoff, n: usize, x: f64, p_axis: &[f64]) -> Vec<f64> {
        let s = self.cell_samples(g, n, x);
        let len = s.len() as f64;
        let mut cum = vec![0.0; s.len() + 1];
        for (k, v) in s.iter().enumerate() {
            cum[k + 1] = cum[k] + v;
        }
        p_axis
            .iter()
            .map(|&p| {
                let pos = p * len;
                let k = (pos.floor() as usize).min(s.len() - 1);
                (cum[k] + (pos - k as f64) * s[k]) / len
            })
            .collect()
    }
}

#[inline]
fn interp_uniform(w: &[f64], p: f64) -> f64 {
    let m = w.len();
    let s = p.clamp(0.0, 1.0) * (m - 1) as f64;
    let j = (s.floor() as usize).min(m - 2);
    let f = s - j as f64;
    w[j] + f * (w[j + 1] - w[j])
}

/// One backward node update: `min` over splits `pi p_u + (1 - pi) p_d = p`.
fn split_min(up: &[f64], down: &[f64], pi: f64, q: f64, out: &mut [f64]) {
    let m = up.len();
    let h = 1.0 / (m - 1) as f64;
    for (k, o) in out.iter_mut().enumerate() {
        let p = k as f64 * h;
        if k == 0 {
            *o = q * up[0] + (1.0 - q) * down[0];
            continue;
        }
        // feasible p_u: p_d = (p - pi p_u) / (1 - pi) in [0, 1]
        let lo = ((p - (1.0 - pi)) / pi).max(0.0);
        let hi = (p / pi).min(1.0);
        let mut best = q * interp_uniform(up, p) + (1.0 - q) * interp_uniform(down, p);
        let j0 = (lo / h).ceil() as usize;
        let j1 = ((hi / h).floor() as usize).min(m - 1);
        for (j, &wu) in up.iter().enumerate().take(j1 + 1).skip(j0) {
            let pu = j as f64 * h;
            let pd = (p - pi * pu) / (1.0 - pi);
            let c = q * wu + (1.0 - q) * interp_uniform(down, pd);
            if c < best {
                best = c;
            }
        }
        *o = best;
    }
}

/// Exact split infimum for convex piecewise-linear children sampled on a
/// uniform grid: the epigraph of the result is the Minkowski sum of the
/// epigraphs of `q w_u(a / pi)` and `(1 - q) w_d(b / (1 - pi))`, so its
/// segments are those of the two scaled children sorted by slope.
fn split_merge(up: &[f64], down: &[f64], pi: f64, q: f64, out: &mut [f64]) {
    let m = up.len();
    let h = 1.0 / (m - 1) as f64;
    let seg = |w: &[f64], len: f64, weight: f64| -> Vec<(f64, f64)> {
        w.windows(2).map(|d| (len * h, weight * (d[1] - d[0]) / (len * h))).collect()
    };
    let a = seg(up, pi, q);
    let b = seg(down, 1.0 - pi, 1.0 - q);
    let (mut ia, mut ib) = (0, 0);
    let (mut pos, mut val) = (0.0, q * up[0] + (1.0 - q) * down[0]);
    out[0] = val;
    let mut k = 1;
    loop {
        let (len, slope) = match (a.get(ia), b.get(ib)) {
            (Some(&sa), Some(&sb)) if sa.1 <= sb.1 => {
                ia += 1;
                sa
            }
            (_, Some(&sb)) => {
                ib += 1;
                sb
            }
            (Some(&sa), None) => {
                ia += 1;
                sa
            }
            (None, None) => break,
        };
        let end = pos + len;
        while k < m && k as f64 * h <= end + 1e-12 {
            out[k] = val + slope * (k as f64 * h - pos);
            k += 1;
        }
        pos = end;
        val += slope * len;
    }
    // rounding can leave the last node unvisited
    for o in &mut out[k..] {
        *o = val;
    }
}

fn convexify(w: &mut [f64], m: usize) {
    let h = 1.0 / (m - 1) as f64;
    let p: Vec<f64> = (0..m).map(|k| k as f64 * h).collect();
    for row in w.chunks_mut(m) {
        if let Ok(env) = crate::facelift::lower_convex_envelope(&p, row) {
            row.copy_from_slice(&env);
        }
    }
}

/// Backward induction over `(node, p)` with `w(T) = g 1_{p > 0}` (when `T`
/// is an exercise step) and `w <- max(w, g 1_{p > 0})` at exercise steps.
/// Returns the root value function on the uniform `p` grid.
pub fn tree_quantile_curve(tree: &TreeSpec, g: &Payoff, x0: f64, p_grid_size: usize) -> Result<Vec<f64>> {
    tree.validate()?;
    if p_grid_size < 3 {
        return Err(Error::Usage(format!("p grid needs at least 3 points, got {p_grid_size}")));
    }
    let m = p_grid_size;
    let (pi, q) = (tree.phys_prob, tree.pricing_prob());
    let node_x = |n: usize, j: usize| x0 * tree.up.powi(j as i32) * tree.down.powi((n - j) as i32);
    let exercise = |n: usize| tree.exercise_steps.contains(&n);
    let p_axis: Vec<f64> = (0..m).map(|k| k as f64 / (m - 1) as f64).collect();
    let obstacle = |n: usize, w: &mut [f64]| {
        for (j, row) in w.chunks_mut(m).enumerate() {
            let x = node_x(n, j);
            if tree.smooth_payoff {
                let profile = tree.cell_profile(g, n, x, &p_axis);
                for (v, gv) in row.iter_mut().zip(profile) {
                    *v = v.max(gv);
                }
                if tree.randomized {
                    if let Ok(env) = crate::facelift::lower_convex_envelope(&p_axis, row) {
                        row.copy_from_slice(&env);
                    }
                }
                continue;
            }
            let gv = g.eval_scalar(n as f64 * tree.step_length, x);
            if tree.randomized {
                if let Ok(env) = crate::facelift::direct_envelope(&p_axis, row, gv) {
                    row.copy_from_slice(&env);
                    continue;
                }
            }
            for v in &mut row[1..] {
                *v = v.max(gv);
            }
        }
    };
    let n_steps = tree.steps;
    let mut w = vec![0.0; (n_steps + 1) * m];
    if exercise(n_steps) {
        obstacle(n_steps, &mut w);
    }
    if tree.randomized {
        convexify(&mut w, m);
    }
    for n in (0..n_steps).rev() {
        let mut next = vec![0.0; (n + 1) * m];
        next.par_chunks_mut(m).enumerate().for_each(|(j, out)| {
            let down = &w[j * m..(j + 1) * m];
            let up = &w[(j + 1) * m..(j + 2) * m];
            if down.iter().chain(up).all(|&v| v == 0.0) {
                return;
            }
            if tree.randomized {
                split_merge(up, down, pi, q, out);
            } else {
                split_min(up, down, pi, q, out);
            }
        });
        if exercise(n) {
            obstacle(n, &mut next);
        }
        w = next;
    }
    Ok(w)
}

pub fn tree_quantile_price(tree: &TreeSpec, g: &Payoff, x0: f64, p: f64, p_grid_size: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability level must lie in [0, 1], got {p}")));
    }
    let curve = tree_quantile_curve(tree, g, x0, p_grid_size)?;
    Ok(interp_uniform(&curve, p))
}

/// Snell envelope under the pricing probability (super-replication price).
pub fn tree_snell_price(tree: &TreeSpec, g: &Payoff, x0: f64) -> Result<f64> {
    tree.validate()?;
    let q = tree.pricing_prob();
    let node_x = |n: usize, j: usize| x0 * tree.up.powi(j as i32) * tree.down.powi((n - j) as i32);
    let n_steps = tree.steps;
    let mut w: Vec<f64> = (0..=n_steps)
        .map(|j| if tree.exercise_steps.contains(&n_steps) { tree.payoff_at(g, n_steps, node_x(n_steps, j)) } else { 0.0 })
        .collect();
    for n in (0..n_steps).rev() {
        w = (0..=n)
            .map(|j| {
                let cont = q * w[j + 1] + (1.0 - q) * w[j];
                if tree.exercise_steps.contains(&n) {
                    cont.max(tree.payoff_at(g, n, node_x(n, j)))
                } else {
                    cont
                }
            })
            .collect();
    }
    Ok(w[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyMode {
    /// Controls read off the solved surface, starting from `y = v(t, x, p)`.
    Feedback,
    /// `alpha = 0` and the hedge of the `p = 1` row, starting from
    /// `y = vbar(t, x)`.
    SuperReplication,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheck {
    pub n_paths: usize,
    pub seed: u64,
    pub success_estimate: f64,
    pub std_error: f64,
    /// Success frequency of the same paths with no wealth tolerance.
    pub strict_estimate: f64,
    /// Initial capital handed to the policy.
    pub initial_wealth: f64,
    /// Mean of `P` at the horizon (a martingale check).
    pub mean_terminal_p: f64,
}

impl PolicyCheck {
    pub fn csv_row(&self, method: &str, t: f64, x: f64, p: f64) -> String {
        format!("{method},{},{},{},{},{}", fmt_num(t), fmt_num(x), fmt_num(p), fmt_num(self.success_estimate), fmt_num(self.std_error))
    }
}

/// Crossing `sup{p : row(p) <= g}` of a slice interpolated in `p`.
fn crossing(p_nodes: &[f64], row: &[f64], g: f64) -> f64 {
    let Some(j) = row.iter().rposition(|&v| v <= g) else {
        return 0.0;
    };
    if j + 1 == row.len() {
        return 1.0;
    }
    let (v0, v1) = (row[j], row[j + 1]);
    let w = if v1 > v0 { ((g - v0) / (v1 - v0)).clamp(0.0, 1.0) } else { 0.0 };
    p_nodes[j] + w * (p_nodes[j + 1] - p_nodes[j])
}

/// Simulates the hedging policy from `(t, x, p)` with Rademacher increments
/// `+-sqrt(dt)` on the solver's time steps. `X` and `P` move together
/// (`dP = alpha dW`), and the wealth follows the self-financing dynamics
/// with the hedge that replicates the solved value across the two
/// successors. At an exercise date with `Y < g(X)` the hedger randomizes
/// fairly: with probability `Y / g` it moves to `(max(P, p_g), g)`, where
/// `p_g` is the crossing level of the continuation, otherwise to `(0, 0)`.
/// A path succeeds when
/// `Y >= g(t_i, X) - tolerance` at every date.
#[allow(clippy::too_many_arguments)]
pub fn mc_policy_success(
    model: &MarketModel,
    solution: &Solution,
    t: f64,
    x: f64,
    p: f64,
    n_paths: usize,
    seed: u64,
    mode: PolicyMode,
    tolerance: f64,
) -> Result<PolicyCheck> {
    let traj = solution
        .trajectory
        .as_ref()
        .ok_or_else(|| Error::Usage("policy simulation needs a solution with all layers kept".into()))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability level must lie in [0, 1], got {p}")));
    }
    if n_paths == 0 {
        return Err(Error::Usage("need at least one path".into()));
    }
    if !(tolerance >= 0.0 && tolerance.is_finite()) {
        return Err(Error::Domain(format!("wealth tolerance must be finite and non-negative, got {tolerance}")));
    }
    let grid = solution.grid.clone();
    let (start_iv, start_k) = traj
        .iter()
        .enumerate()
        .find_map(|(i, il)| {
            let iv = il.interval;
            let k = ((t - iv.start) / iv.dt).round();
            (t >= iv.start - 1e-12 && t < iv.end - 1e-12 && (iv.start + k * iv.dt - t).abs() <= 1e-9).then_some((i, k as usize))
        })
        .ok_or_else(|| Error::Usage(format!("t = {t} is not a time step of the solution")))?;

    let p_eff = match mode {
        PolicyMode::Feedback => p,
        PolicyMode::SuperReplication => 1.0,
    };
    let y0 = interpolate(&traj[start_iv].layers[start_k], x, p_eff);
    let payoff = &solution.schedule.payoff;
    let continuations = traj
        .iter()
        .map(|il| {
            solution
                .layer(il.interval.end, false)
                .ok_or_else(|| Error::Usage(format!("no continuation layer stored at t = {}", il.interval.end)))
        })
        .collect::<Result<Vec<_>>>()?;

    let outcomes: Vec<(f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|path| -> Result<(f64, f64)> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(path as u64);
            let (mut xs, mut ps, mut ys) = (x, p_eff, y0);
            let mut margin = f64::INFINITY;
            for (i, il) in traj.iter().enumerate().skip(start_iv) {
                let iv = il.interval;
                let sdt = iv.dt.sqrt();
                let k0 = if i == start_iv { start_k } else { 0 };
                for k in k0..iv.steps {
                    let tk = iv.start + k as f64 * iv.dt;
                    let next = &il.layers[k + 1];
                    let room = ps.min(1.0 - ps).max(0.0);
                    let alpha = match mode {
                        PolicyMode::SuperReplication => 0.0,
                        PolicyMode::Feedback => interpolate_values(&grid, &il.alphas[k], xs, ps).clamp(-room / sdt, room / sdt),
                    };
                    let nc = model.node_coeffs(xs);
                    let centre = xs + iv.dt * nc.mu_x;
                    let spread = sdt * nc.sigma_x;
                    let vp = interpolate(next, centre + spread, ps + alpha * sdt);
                    let vm = interpolate(next, centre - spread, ps - alpha * sdt);
                    let upsilon = nc.sigma_inv * (vp - vm) / (2.0 * sdt);
                    let xi = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    ys += iv.dt * model.mu_y_1d(tk, &nc, ys, upsilon) + xi * 0.5 * (vp - vm);
                    xs = centre + xi * spread;
                    ps = (ps + xi * alpha * sdt).clamp(0.0, 1.0);
                    if !(xs > 0.0 && ys.is_finite()) {
                        return Err(Error::Numerical {
                            layer: k,
                            msg: format!("path {path} left the state space: x={xs}, y={ys}"),
                        });
                    }
                }
                let t_i = iv.end;
                let g = payoff.eval_scalar(t_i, xs);
                if mode == PolicyMode::Feedback && g > 0.0 && ys < g {
                    let (ix, wx) = grid.locate_x(xs);
                    let (lo, hi) = (continuations[i].row(ix), continuations[i].row(ix + 1));
                    let row: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| a + wx * (b - a)).collect();
                    let p_g = crossing(grid.p_nodes(), &row, g);
                    if rng.random::<f64>() * g < ys {
                        ys = g;
                        ps = ps.max(p_g);
                    } else {
                        ys = ys.min(0.0);
                        ps = 0.0;
                    }
                }
                margin = margin.min(ys - g);
            }
            Ok((margin, ps))
        })
        .collect::<Result<_>>()?;
    let n = n_paths as f64;
    let rate = |tol: f64| outcomes.iter().filter(|o| o.0 >= -tol).count() as f64 / n;
    let est = rate(tolerance);
    Ok(PolicyCheck {
        n_paths,
        seed,
        success_estimate: est,
        std_error: (est * (1.0 - est) / n).sqrt(),
        strict_estimate: rate(0.0),
        initial_wealth: y0,
        mean_terminal_p: outcomes.iter().map(|o| o.1).sum::<f64>() / n,
    })
}

/// CSV line for a scalar oracle value.
pub fn oracle_csv(method: &str, t: f64, x: f64, p: f64, value: f64, std_error: f64) -> String {
    let mut s = String::from("method,t,x,p,value,std_error\n");
    let _ = writeln!(s, "{method},{},{},{},{},{}", fmt_num(t), fmt_num(x), fmt_num(p), fmt_num(value), fmt_num(std_error));
    s
}
