//! Command-line front-end. Every subcommand reads one config file, writes
//! its CSV artifacts atomically under the output directory and prints one
//! summary line per artifact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::boundary::{payoff_on_grid, solve_vbar_with};
use crate::config::{Config, Setup};
use crate::csv::{self, fmt_num, write_atomic};
use crate::error::{Error, Result};
use crate::hamiltonian::lambda_shift;
use crate::model::{MarketModel, PricingMode};
use crate::oracle::{
    mc_np_digital, mc_policy_success, np_digital_price, tree_quantile_price, PolicyMode, TreeSpec,
};
use crate::scheme::{interpolate, ValueSurface};
use crate::solver::{facelift_csv, solve, surface_csv, Layer, Solution};
use crate::verification::{
    check_boundary_family, check_operator_continuity, check_step_monotonicity, check_strict_supersolution,
    reports_csv, LemmaReport,
};

#[derive(Parser, Debug)]
#[command(name = "qhedge", version, about = "Quantile hedging prices of Bermudan claims")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the value surface and write `surface_t0.csv` and `facelift_T.csv`.
    Solve(Common),
    /// Solve only the `p = 1` row and write `vbar_t0.csv`.
    Superreplicate(Common),
    /// Run the independent oracles and write `oracle.csv`.
    Oracle(Common),
    /// Run the property suites and write `lemmas.csv`.
    #[command(alias = "check")]
    Verify(Common),
    /// Tabulate the solved value against the oracles in `compare.csv`.
    Compare(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Cap on worker threads.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Output directory (overrides `[output] dir`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for every random component (overrides `[oracle] seed`).
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

/// Runs one command and returns the process exit code: 0 on success, 2 on
/// invalid input, 3 on a numerical abort or a failed check, 1 on I/O errors.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("qhedge")).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("qhedge: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    let (common, f): (_, fn(&Config, &Path) -> Result<i32>) = match command {
        Command::Solve(c) => (c, cmd_solve),
        Command::Superreplicate(c) => (c, cmd_superreplicate),
        Command::Oracle(c) => (c, cmd_oracle),
        Command::Verify(c) => (c, cmd_verify),
        Command::Compare(c) => (c, cmd_compare),
    };
    let mut cfg = Config::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.oracle.seed = seed;
    }
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = common.out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    f(&cfg, &out)
}

fn emit(path: &Path, contents: &str, summary: &str) -> Result<()> {
    write_atomic(path, contents)?;
    println!("{}: {summary}", path.display());
    Ok(())
}

fn time_tag(t: f64) -> String {
    format!("{t}").replace('.', "_")
}

fn solve_setup(cfg: &Config, setup: &Setup, keep_all: bool) -> Result<Solution> {
    let mut params = setup.params.clone();
    params.keep_all_layers = keep_all;
    let solution = solve(&setup.model, &setup.loss, &setup.schedule, setup.grid.clone(), &params)?;
    if cfg.scheme.clip_report {
        let r = &solution.report;
        eprintln!(
            "steps {} clipped {} vbar_clipped {} convexified {} fallback_rows {} convexity_defect {:.3e} \
             monotonicity_defect {:.3e} excess_over_vbar {:.3e} cfl_margin {:.3e}",
            r.steps,
            r.clipped,
            r.vbar_clipped,
            r.convexified,
            r.fallback_rows,
            r.max_convexity_defect,
            r.max_monotonicity_defect,
            r.max_excess_over_vbar,
            r.min_cfl_margin
        );
    }
    Ok(solution)
}

fn layer_at(solution: &Solution, t: f64, left_limit: bool) -> Result<&Layer> {
    solution
        .layers
        .iter()
        .find(|l| (l.t - t).abs() <= 1e-9 && l.left_limit == left_limit)
        .ok_or_else(|| Error::Diagnostic(format!("no stored layer at t = {t}")))
}

fn cmd_solve(cfg: &Config, out: &Path) -> Result<i32> {
    let setup = cfg.build()?;
    let solution = solve_setup(cfg, &setup, false)?;
    let x0 = cfg.model.x0;
    let t0 = layer_at(&solution, 0.0, false)?;
    emit(
        &out.join("surface_t0.csv"),
        &surface_csv(&[t0]),
        &format!("{} nodes, v(0, {x0}, 0.5) = {:.6}", solution.grid.nx() * solution.grid.np(), solution.value(x0, 0.5)),
    )?;
    for &t in &cfg.output.times {
        if t == 0.0 {
            continue;
        }
        let layer = layer_at(&solution, t, false)?;
        emit(&out.join(format!("surface_t{}.csv", time_tag(t))), &surface_csv(&[layer]), &format!("layer at t = {t}"))?;
    }
    let dates = setup.schedule.exercise_dates();
    for (k, &t) in dates.iter().enumerate() {
        let data = solution.facelift_at(t).ok_or_else(|| Error::Diagnostic(format!("no facelift stored at {t}")))?;
        let name = if k + 1 == dates.len() { "facelift_T.csv".to_string() } else { format!("facelift_t{}.csv", time_tag(t)) };
        emit(&out.join(name), &facelift_csv(&solution.grid, data), &format!("crossing levels at t = {t}"))?;
    }
    Ok(0)
}

fn cmd_superreplicate(cfg: &Config, out: &Path) -> Result<i32> {
    let setup = cfg.build()?;
    let stepping = shifted(&setup.model, cfg.operator.lambda)?;
    let bdata = solve_vbar_with(&stepping, &setup.schedule, setup.grid.clone(), setup.params.options)?;
    let grid = &setup.grid;
    let row = bdata.vbar(0.0, false)?;
    let mut text = String::from("t,x,p,v\n");
    for (x, v) in grid.x_nodes().iter().zip(&row) {
        let _ = writeln!(text, "{},{},{},{}", fmt_num(0.0), fmt_num(*x), fmt_num(1.0), fmt_num(*v));
    }
    // vbar(t_i-) >= g(t_i, .) at every date, in original units
    let mut worst = f64::INFINITY;
    for &t in setup.schedule.exercise_dates() {
        let scale = (-stepping.shift.unwrap_or(0.0) * t).exp();
        let g = payoff_on_grid(&setup.schedule.payoff, t, grid, setup.params.options.payoff_smoothing);
        for (v, g) in bdata.vbar(t, true)?.iter().zip(&g) {
            worst = worst.min(v * scale - g);
        }
    }
    let v0 = crate::scheme::interpolate_x(grid, &row, cfg.model.x0);
    emit(
        &out.join("vbar_t0.csv"),
        &text,
        &format!("vbar(0, {}) = {v0:.6}, obstacle margin {worst:.3e}, clipped {}", cfg.model.x0, bdata.clipped),
    )?;
    if worst < -cfg.boundary.obstacle_tol {
        eprintln!("qhedge: vbar falls below the payoff by {:.3e}", -worst);
        return Ok(3);
    }
    Ok(0)
}

fn shifted(model: &MarketModel, lambda: Option<f64>) -> Result<MarketModel> {
    if model.is_y_dependent() {
        lambda_shift(model, lambda.unwrap_or(model.lipschitz_l + 1.0))
    } else {
        Ok(model.clone())
    }
}

/// Digital inputs when the closed-form Neyman-Pearson price applies.
fn digital_strike(cfg: &Config, setup: &Setup) -> Option<f64> {
    let zero_rate = matches!(setup.model.mode, PricingMode::LinearPricing { rate } if rate == 0.0)
        || matches!(setup.model.mode, PricingMode::ZeroDrift);
    let single = setup.schedule.exercise_dates().len() == 1;
    (zero_rate && single && cfg.schedule.payoff == "digital" && cfg.schedule.loss == "indicator" && cfg.model.mu > 0.0)
        .then_some(cfg.schedule.strike)
}

fn tree_spec(cfg: &Config, setup: &Setup) -> Result<Option<TreeSpec>> {
    let zero_rate = matches!(setup.model.mode, PricingMode::LinearPricing { rate } if rate == 0.0);
    if !zero_rate || cfg.schedule.loss != "indicator" {
        return Ok(None);
    }
    let mut tree = TreeSpec::crr(
        cfg.model.mu,
        cfg.model.sigma,
        setup.schedule.horizon(),
        cfg.oracle.tree_steps,
        setup.schedule.exercise_dates(),
    )?;
    tree.randomized = true;
    tree.smooth_payoff = true;
    Ok(Some(tree))
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() || levels.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config(format!("oracle.p_levels must be a non-empty list in [0, 1], got {levels:?}")));
    }
    Ok(())
}

fn cmd_oracle(cfg: &Config, out: &Path) -> Result<i32> {
    let setup = cfg.build()?;
    check_levels(&cfg.oracle.p_levels)?;
    let o = &cfg.oracle;
    let (x0, horizon) = (cfg.model.x0, setup.schedule.horizon());
    let mut text = String::from("method,t,x,p,value,std_error\n");
    let mut row = |method: &str, p: f64, value: f64, se: f64| {
        let _ = writeln!(text, "{method},{},{},{},{},{}", fmt_num(0.0), fmt_num(x0), fmt_num(p), fmt_num(value), fmt_num(se));
    };
    let mut rows = 0;
    if let Some(k) = digital_strike(cfg, &setup) {
        for &p in &o.p_levels {
            row("np_closed_form", p, np_digital_price(cfg.model.mu, cfg.model.sigma, horizon, x0, k, p)?, 0.0);
            rows += 1;
            if o.np_mc_paths > 0 {
                let (v, se) = mc_np_digital(cfg.model.mu, cfg.model.sigma, horizon, x0, k, p, o.np_mc_paths, o.seed)?;
                row("np_monte_carlo", p, v, se);
                rows += 1;
            }
        }
    }
    if let Some(tree) = tree_spec(cfg, &setup)? {
        for &p in &o.p_levels {
            row("tree", p, tree_quantile_price(&tree, &setup.schedule.payoff, x0, p, o.tree_p_points)?, 0.0);
            rows += 1;
        }
    }
    let mut status = 0;
    let mut policy_note = String::new();
    if o.mc_paths > 0 {
        let solution = solve_setup(cfg, &setup, true)?;
        let check = mc_policy_success(
            &setup.model,
            &solution,
            0.0,
            x0,
            o.mc_p,
            o.mc_paths,
            o.seed,
            PolicyMode::Feedback,
            o.mc_tolerance,
        )?;
        row("policy_success", o.mc_p, check.success_estimate, check.std_error);
        row("policy_success_strict", o.mc_p, check.strict_estimate, check.std_error);
        rows += 2;
        let floor = o.mc_p - 3.0 * check.std_error - 0.02;
        let _ = write!(policy_note, ", policy success {:.4} (floor {floor:.4})", check.success_estimate);
        if check.success_estimate < floor {
            status = 3;
        }
    }
    if rows == 0 {
        return Err(Error::Unsupported(
            "no oracle applies: closed form and tree need zero-rate linear pricing, and mc_paths is 0".into(),
        ));
    }
    emit(&out.join("oracle.csv"), &text, &format!("{rows} rows{policy_note}"))?;
    Ok(status)
}

fn lemma_reports(cfg: &Config, model: &MarketModel, seed: u64) -> Result<Vec<LemmaReport>> {
    let v = &cfg.verification;
    let mut reports = Vec::new();
    for &xi in &v.xi {
        reports.push(check_strict_supersolution(model, v.k, xi, v.samples, seed)?);
    }
    let kappa = v.kappa;
    for lambda in [0.0, 0.5 * kappa, kappa] {
        for gamma in [0.0, 0.5 * kappa, kappa] {
            reports.push(check_boundary_family(kappa, lambda, gamma, v.horizon, v.family_samples)?);
        }
    }
    reports.push(check_operator_continuity(model, v.continuity_samples, v.t_probe, v.continuity_tol, seed)?);
    let stepping = shifted(model, cfg.operator.lambda)?;
    reports.push(check_step_monotonicity(&stepping, v.pairs, seed)?);
    Ok(reports)
}

fn cmd_verify(cfg: &Config, out: &Path) -> Result<i32> {
    let model = cfg.model()?;
    let reports = lemma_reports(cfg, &model, cfg.oracle.seed)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    let summary = if failed.is_empty() {
        format!("{} checks, all pass", reports.len())
    } else {
        format!("{} checks, failed: {}", reports.len(), failed.join(" "))
    };
    emit(&out.join("lemmas.csv"), &reports_csv(&reports), &summary)?;
    Ok(if failed.is_empty() { 0 } else { 3 })
}

fn cmd_compare(cfg: &Config, out: &Path) -> Result<i32> {
    let setup = cfg.build()?;
    check_levels(&cfg.oracle.p_levels)?;
    let solution = solve_setup(cfg, &setup, false)?;
    let path = out.join("surface_t0.csv");
    let t0 = layer_at(&solution, 0.0, false)?;
    emit(&path, &surface_csv(&[t0]), "initial layer")?;

    // everything below works from the file, not the in-memory solution
    let table = csv::read(&path)?;
    let col = table.column("v")?;
    let values = (0..table.rows.len()).map(|r| table.numeric(r, col)).collect::<Result<Vec<f64>>>()?;
    if values.len() != t0.surface.values().len()
        || values.iter().zip(t0.surface.values()).any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(Error::Diagnostic(format!("{} does not round-trip", path.display())));
    }
    let reread = ValueSurface::from_values(setup.grid.clone(), values, 0.0)?;

    let x0 = cfg.model.x0;
    let horizon = setup.schedule.horizon();
    let strike = digital_strike(cfg, &setup);
    let tree = tree_spec(cfg, &setup)?;
    let mut text = String::from("p,pde_value,np_oracle,tree_oracle\n");
    let mut worst = 0.0_f64;
    for &p in &cfg.oracle.p_levels {
        let pde = interpolate(&reread, x0, p);
        let np = match strike {
            Some(k) => np_digital_price(cfg.model.mu, cfg.model.sigma, horizon, x0, k, p)?,
            None => f64::NAN,
        };
        let tr = match &tree {
            Some(t) => tree_quantile_price(t, &setup.schedule.payoff, x0, p, cfg.oracle.tree_p_points)?,
            None => f64::NAN,
        };
        for reference in [np, tr] {
            // relative gaps are meaningless against a vanishing price
            if reference > 1e-6 {
                worst = worst.max((pde - reference).abs() / reference);
            }
        }
        let _ = writeln!(text, "{},{},{},{}", fmt_num(p), fmt_num(pde), fmt_num(np), fmt_num(tr));
    }
    emit(
        &out.join("compare.csv"),
        &text,
        &format!("{} levels, worst relative gap {:.2}%", cfg.oracle.p_levels.len(), 100.0 * worst),
    )?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(dir: &Path, name: &str, text: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    const SMALL: &str = "[model]\nmu = 0.1\nsigma = 0.2\n\n[scheme]\nnx = 41\nnp = 11\ndt = 0.01\nclip_report = false\n\n\
                         [oracle]\np_levels = [0.5, 0.9]\ntree_steps = 50\ntree_p_points = 21\n";

    fn args(cmd: &str, cfg: &Path, out: &Path) -> Vec<String> {
        vec![cmd.into(), "--config".into(), cfg.display().to_string(), "--out".into(), out.display().to_string()]
    }

    #[test]
    fn solve_writes_declared_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_cfg(dir.path(), "a.cfg", SMALL);
        assert_eq!(run(args("solve", &cfg, dir.path())), 0);
        let surface = csv::read(&dir.path().join("surface_t0.csv")).unwrap();
        assert_eq!(surface.header, ["t", "x", "p", "v"]);
        assert_eq!(surface.rows.len(), 41 * 11);
        let facelift = csv::read(&dir.path().join("facelift_T.csv")).unwrap();
        assert_eq!(facelift.header, ["x", "p_g", "q_g"]);
    }

    #[test]
    fn outputs_are_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_cfg(dir.path(), "a.cfg", SMALL);
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        assert_eq!(run(args("compare", &cfg, &a)), 0);
        assert_eq!(run(args("compare", &cfg, &b)), 0);
        for name in ["surface_t0.csv", "compare.csv"] {
            assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
        }
        let table = csv::read(&a.join("compare.csv")).unwrap();
        assert_eq!(table.header, ["p", "pde_value", "np_oracle", "tree_oracle"]);
        assert_eq!(table.rows.len(), 2);
    }

    #[test]
    fn oracle_and_superreplicate() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_cfg(dir.path(), "a.cfg", SMALL);
        assert_eq!(run(args("oracle", &cfg, dir.path())), 0);
        let table = csv::read(&dir.path().join("oracle.csv")).unwrap();
        assert_eq!(table.header, ["method", "t", "x", "p", "value", "std_error"]);
        assert_eq!(table.rows.len(), 4);
        assert_eq!(run(args("superreplicate", &cfg, dir.path())), 0);
        let vbar = csv::read(&dir.path().join("vbar_t0.csv")).unwrap();
        assert_eq!(vbar.rows.len(), 41);
    }

    #[test]
    fn verify_passes_and_alias_works() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_cfg(
            dir.path(),
            "l.cfg",
            "[verification]\nsamples = 200\nfamily_samples = 20\ncontinuity_samples = 50\npairs = 4\n",
        );
        assert_eq!(run(args("verify", &cfg, dir.path())), 0);
        let table = csv::read(&dir.path().join("lemmas.csv")).unwrap();
        assert_eq!(table.rows.len(), 2 + 9 + 2);
        let pass = table.column("pass").unwrap();
        assert!(table.rows.iter().all(|r| r[pass] == "true"));
        assert_eq!(run(args("check", &cfg, dir.path())), 0);
    }

    #[test]
    fn exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let bad = write_cfg(dir.path(), "bad.cfg", "[scheme]\nbogus = 1\n");
        assert_eq!(run(args("solve", &bad, dir.path())), 2);
        let missing = dir.path().join("missing.cfg");
        assert_eq!(run(args("solve", &missing, dir.path())), 1);
        assert_eq!(run(["frobnicate"]), 2);
        assert_eq!(run(Vec::<String>::new()), 2);
    }
}
