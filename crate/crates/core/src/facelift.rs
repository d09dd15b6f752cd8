//! Exercise-date operator in `p`: the lower convex envelope of
//! `max(v, g 1_{p > 0})`, written as `max(v, q_g p)` with `q_g = g / p_g`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scheme::{Grid2D, ValueSurface};

/// Tolerance on discrete second differences when checking convexity.
pub const CONVEXITY_TOL: f64 = 1e-8;

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Vertices of the lower hull of points sorted by abscissa.
fn lower_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for &pt in points {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], pt) <= 0.0 {
            hull.pop();
        }
        hull.push(pt);
    }
    hull
}

fn eval_hull(hull: &[(f64, f64)], p: f64) -> f64 {
    let k = hull.partition_point(|h| h.0 < p);
    if k == 0 {
        return hull[0].1;
    }
    if k == hull.len() {
        return hull[k - 1].1;
    }
    let (a, b) = (hull[k - 1], hull[k]);
    if b.0 == p {
        return b.1;
    }
    a.1 + (b.1 - a.1) * (p - a.0) / (b.0 - a.0)
}

fn check_nodes(p_nodes: &[f64], values: &[f64]) -> Result<()> {
    if p_nodes.len() != values.len() {
        return Err(Error::Usage(format!("{} nodes but {} values", p_nodes.len(), values.len())));
    }
    if p_nodes.is_empty() {
        return Err(Error::Usage("empty slice".into()));
    }
    if p_nodes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Usage("nodes must be strictly increasing".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("slice contains non-finite values".into()));
    }
    Ok(())
}

/// Greatest convex function below the points `(p_j, values_j)`, sampled at
/// the same nodes.
pub fn lower_convex_envelope(p_nodes: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    check_nodes(p_nodes, values)?;
    let points: Vec<(f64, f64)> = p_nodes.iter().copied().zip(values.iter().copied()).collect();
    let hull = lower_hull(&points);
    Ok(p_nodes.iter().map(|&p| eval_hull(&hull, p)).collect())
}

/// Envelope of `max(v, g 1_{p > 0})` where `v` is the piecewise-linear
/// interpolant of the slice. Crossings of `v` with `g` are added as
/// breakpoints, so this is exact for the interpolant.
pub fn direct_envelope(p_nodes: &[f64], v_slice: &[f64], g: f64) -> Result<Vec<f64>> {
    check_nodes(p_nodes, v_slice)?;
    let mut points = vec![(p_nodes[0], v_slice[0])];
    for j in 1..p_nodes.len() {
        let (p0, v0) = (p_nodes[j - 1], v_slice[j - 1]);
        let (p1, v1) = (p_nodes[j], v_slice[j]);
        if j > 1 && (v0 - g) * (v1 - g) < 0.0 {
            let pc = p0 + (g - v0) / (v1 - v0) * (p1 - p0);
            points.push((pc, g));
        }
        points.push((p1, v1.max(g)));
    }
    let hull = lower_hull(&points);
    Ok(p_nodes.iter().map(|&p| eval_hull(&hull, p)).collect())
}

/// Largest discrete convexity defect, `max(-second difference)` on a
/// possibly non-uniform grid (0 for convex input).
pub fn convexity_defect(p_nodes: &[f64], values: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 1..p_nodes.len().saturating_sub(1) {
        let left = (values[j] - values[j - 1]) / (p_nodes[j] - p_nodes[j - 1]);
        let right = (values[j + 1] - values[j]) / (p_nodes[j + 1] - p_nodes[j]);
        worst = worst.max(left - right);
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceliftSlice {
    pub p_g: f64,
    pub q_g: f64,
    pub lifted: Vec<f64>,
}

/// `p_g = sup{p : v(p) <= g} ^ 1` on the interpolant of the slice.
fn crossing(p_nodes: &[f64], v_slice: &[f64], g: f64) -> f64 {
    let n = p_nodes.len();
    let Some(j) = v_slice.iter().rposition(|&v| v <= g) else {
        return 0.0;
    };
    if j == n - 1 {
        return 1.0;
    }
    let (v0, v1) = (v_slice[j], v_slice[j + 1]);
    let w = if v1 > v0 { ((g - v0) / (v1 - v0)).clamp(0.0, 1.0) } else { 0.0 };
    p_nodes[j] + w * (p_nodes[j + 1] - p_nodes[j])
}

fn lift_with(p_nodes: &[f64], v_slice: &[f64], g: f64) -> (f64, f64, Vec<f64>) {
    let p_g = crossing(p_nodes, v_slice, g);
    let q_g = if p_g > 0.0 && g > 0.0 { g / p_g } else { 0.0 };
    let lifted = p_nodes.iter().zip(v_slice).map(|(&p, &v)| v.max(q_g * p)).collect();
    (p_g, q_g, lifted)
}

/// Closed-form facelift of a convex slice with `v(0) = 0`.
pub fn facelift_slice(p_nodes: &[f64], v_slice: &[f64], g: f64) -> Result<FaceliftSlice> {
    check_nodes(p_nodes, v_slice)?;
    if !(g >= 0.0 && g.is_finite()) {
        return Err(Error::Domain(format!("payoff must be finite and non-negative, got {g}")));
    }
    if v_slice[0].abs() > 1e-12 {
        return Err(Error::Diagnostic(format!("slice must vanish at p = 0, got {}", v_slice[0])));
    }
    let defect = convexity_defect(p_nodes, v_slice);
    if defect > CONVEXITY_TOL {
        return Err(Error::Diagnostic(format!("slice is not convex in p (defect {defect:.3e})")));
    }
    let (p_g, q_g, lifted) = lift_with(p_nodes, v_slice, g);
    Ok(FaceliftSlice { p_g, q_g, lifted })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceliftData {
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
    pub lifted: ValueSurface,
    /// Rows that failed the closed-form preconditions and were lifted by the
    /// direct envelope instead.
    pub fallback_rows: usize,
}

/// Facelift of every x-row of `continuation` against `payoff[i]`.
pub fn facelift_surface(continuation: &ValueSurface, payoff: &[f64]) -> Result<FaceliftData> {
    let grid: &Arc<Grid2D> = continuation.grid();
    if payoff.len() != grid.nx() {
        return Err(Error::Usage(format!("payoff row has {} values, grid has {} x-nodes", payoff.len(), grid.nx())));
    }
    let p_nodes = grid.p_nodes();
    let mut values = Vec::with_capacity(grid.nx() * grid.np());
    let (mut p_gs, mut q_gs) = (Vec::with_capacity(grid.nx()), Vec::with_capacity(grid.nx()));
    let mut fallback_rows = 0;
    for (i, &g) in payoff.iter().enumerate() {
        let row = continuation.row(i);
        match facelift_slice(p_nodes, row, g) {
            Ok(s) => {
                p_gs.push(s.p_g);
                q_gs.push(s.q_g);
                values.extend_from_slice(&s.lifted);
            }
            Err(Error::Diagnostic(_)) => {
                fallback_rows += 1;
                let lifted = direct_envelope(p_nodes, row, g)?;
                let p_g = crossing(p_nodes, row, g);
                p_gs.push(p_g);
                q_gs.push(if p_g > 0.0 && g > 0.0 { g / p_g } else { 0.0 });
                values.extend_from_slice(&lifted);
            }
            Err(e) => return Err(e),
        }
    }
    let lifted = ValueSurface::from_values(grid.clone(), values, continuation.time)?;
    Ok(FaceliftData { p_g: p_gs, q_g: q_gs, lifted, fallback_rows })
}

/// Facelift against a p-dependent obstacle per x-row:
/// `conv_p(max(v, profile))`.
pub fn facelift_profiles(continuation: &ValueSurface, profiles: &[Vec<f64>]) -> Result<ValueSurface> {
    let grid: &Arc<Grid2D> = continuation.grid();
    if profiles.len() != grid.nx() {
        return Err(Error::Usage(format!("{} profiles for {} x-nodes", profiles.len(), grid.nx())));
    }
    let mut values = Vec::with_capacity(grid.nx() * grid.np());
    for (i, profile) in profiles.iter().enumerate() {
        let raised: Vec<f64> = continuation.row(i).iter().zip(profile).map(|(v, g)| v.max(*g)).collect();
        values.extend(lower_convex_envelope(grid.p_nodes(), &raised)?);
    }
    ValueSurface::from_values(grid.clone(), values, continuation.time)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(n: usize) -> Vec<f64> {
        (0..n).map(|j| j as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn envelope_of_step_obstacle_is_linear() {
        let p = uniform(11);
        let v: Vec<f64> = p.iter().map(|&q| if q > 0.0 { 5.0 } else { 0.0 }).collect();
        let env = lower_convex_envelope(&p, &v).unwrap();
        for (e, q) in env.iter().zip(&p) {
            assert!((e - 5.0 * q).abs() <= 1e-12);
        }
    }

    #[test]
    fn envelope_exhaustive_chords() {
        let p = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        let env = lower_convex_envelope(&p, &[0.0, 1.0, 0.2, 1.5]).unwrap();
        let expected = [0.0, 0.1, 0.2, 1.5];
        for (e, x) in env.iter().zip(expected) {
            assert!((e - x).abs() <= 1e-14, "{env:?}");
        }
    }

    #[test]
    fn envelope_leaves_convex_input() {
        let p = uniform(21);
        let v: Vec<f64> = p.iter().map(|q| q * q).collect();
        assert_eq!(lower_convex_envelope(&p, &v).unwrap(), v);
    }

    #[test]
    fn envelope_rejects_bad_input() {
        assert!(matches!(lower_convex_envelope(&[0.0, 1.0], &[0.0]), Err(Error::Usage(_))));
        assert!(lower_convex_envelope(&[0.0, 1.0], &[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn slice_quadratic_crossing() {
        let p = uniform(101);
        let v: Vec<f64> = p.iter().map(|q| q * q).collect();
        let s = facelift_slice(&p, &v, 0.25).unwrap();
        assert!((s.p_g - 0.5).abs() <= 1e-12);
        assert!((s.q_g - 0.5).abs() <= 1e-12);
        for ((l, q), vv) in s.lifted.iter().zip(&p).zip(&v) {
            let expect = if *q <= 0.5 { 0.5 * q } else { *vv };
            assert!((l - expect).abs() <= 1e-12);
        }
        let direct = direct_envelope(&p, &v, 0.25).unwrap();
        let env = lower_convex_envelope(&p, &v.iter().zip(&p).map(|(a, q)| if *q > 0.0 { a.max(0.25) } else { *a }).collect::<Vec<_>>()).unwrap();
        for ((l, d), e) in s.lifted.iter().zip(&direct).zip(&env) {
            assert!((l - d).abs() <= 1e-8);
            assert!((l - e).abs() <= 1e-8);
        }
    }

    #[test]
    fn slice_zero_obstacle_and_clamp() {
        let p = uniform(11);
        let v: Vec<f64> = p.iter().map(|q| q * q).collect();
        let s = facelift_slice(&p, &v, 0.0).unwrap();
        assert_eq!(s.q_g, 0.0);
        assert_eq!(s.lifted, v);

        let zero = vec![0.0; 11];
        let s = facelift_slice(&p, &zero, 5.0).unwrap();
        assert_eq!(s.p_g, 1.0);
        assert_eq!(s.q_g, 5.0);
        for (l, q) in s.lifted.iter().zip(&p) {
            assert!((l - 5.0 * q).abs() <= 1e-15);
        }
    }

    #[test]
    fn slice_preconditions() {
        let p = uniform(5);
        assert!(matches!(facelift_slice(&p, &[0.0, 1.0, 0.2, 1.5, 2.0], 0.1), Err(Error::Diagnostic(_))));
        assert!(matches!(facelift_slice(&p, &[0.1, 0.2, 0.3, 0.4, 0.5], 0.1), Err(Error::Diagnostic(_))));
    }

    #[test]
    fn surface_falls_back_on_nonconvex_rows() {
        let g = Arc::new(Grid2D::log_uniform(0.5, 2.0, 3, 5, 0.01).unwrap());
        let s = ValueSurface::from_fn(g.clone(), 1.0, |x, p| if x > 1.5 && p == 0.5 { 3.0 } else { p * p }).unwrap();
        let f = facelift_surface(&s, &[0.1, 0.1, 0.1]).unwrap();
        assert_eq!(f.fallback_rows, 1);
        for i in 0..3 {
            assert!(convexity_defect(g.p_nodes(), f.lifted.row(i)) <= 1e-12);
        }
    }

    fn convex_slice() -> impl Strategy<Value = Vec<f64>> {
        // cumulative sums of non-decreasing slopes starting at 0
        prop::collection::vec(0.0f64..3.0, 20).prop_map(|mut inc| {
            inc.sort_by(|a, b| a.total_cmp(b));
            let h = 1.0 / 20.0;
            let mut v = vec![0.0];
            for d in inc {
                let last = *v.last().unwrap();
                v.push(last + d * h);
            }
            v
        })
    }

    proptest! {
        #[test]
        fn envelope_properties(values in prop::collection::vec(-5.0f64..5.0, 2..40)) {
            let p = uniform(values.len());
            let env = lower_convex_envelope(&p, &values).unwrap();
            for (e, v) in env.iter().zip(&values) {
                prop_assert!(*e <= v + 1e-12);
            }
            prop_assert!(convexity_defect(&p, &env) <= 1e-10);
            let again = lower_convex_envelope(&p, &env).unwrap();
            for (a, b) in again.iter().zip(&env) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn closed_form_matches_direct_envelope(v in convex_slice(), g in 0.0f64..4.0) {
            let p = uniform(v.len());
            let s = facelift_slice(&p, &v, g).unwrap();
            let direct = direct_envelope(&p, &v, g).unwrap();
            for (a, b) in s.lifted.iter().zip(&direct) {
                prop_assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
            }
            if s.p_g > 0.0 && g > 0.0 {
                prop_assert!((s.q_g * s.p_g - g).abs() <= 1e-8);
            }
        }
    }
}
