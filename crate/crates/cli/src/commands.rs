//! Subcommands. Each writes its CSV artifacts into the output directory and
//! finishes with a manifest, also when a verification step fails.

use std::fmt::Write as _;
use std::path::PathBuf;

use mfchain::bsde::{solve_bsde, verify_comparison, PolicyDriver};
use mfchain::chain::measure::{tv_distance, ProbVector};
use mfchain::chain::moments::{compute_kappa0, DEFAULT_LOG_CAP};
use mfchain::chain::paths::simulate_paths;
use mfchain::control::{
    brute_force_oracle, certify_near_optimal, evaluate_cost, minimize_hamiltonian, solve_control, CostMethod, Players,
};
use mfchain::export::{self, fmt_f64};
use mfchain::game::{default_isaacs_samples, isaacs_check, solve_game, verify_saddle, DeviationBudget, GameSpec};
use mfchain::girsanov::{reweight_ensemble_unchecked, TiltContext};
use mfchain::mean_field::{fixed_point_residual, picard_fixed_point, picard_iterate, random_law};
use mfchain::model::{ControlSchedule, CostModel, IntensityModel, QuadraticCost};
use mfchain::rng::{derive_seed, stream};
use mfchain::stats::Estimate;

use crate::config::{self, control_grid, Built, ExperimentConfig};
use crate::manifest::{Manifest, OutputDir};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    FixedPoint,
    Bsde,
    Control,
    Game,
    Validate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::FixedPoint => "fixed-point",
            Command::Bsde => "bsde",
            Command::Control => "control",
            Command::Game => "game",
            Command::Validate => "validate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub config: PathBuf,
    /// Output directory; falls back to `output.dir`, then `./out/<subcommand>`.
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: usize,
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
}

/// Parse the config, run `cmd` and write the manifest.
pub fn run(cmd: Command, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let mut overrides = opts.overrides.clone();
    if let Some(s) = opts.seed {
        overrides.push(format!("seed={s}"));
    }
    let (cfg, canonical) = config::load(&opts.config, &overrides)?;
    let built = config::build(&cfg)?;
    let out_dir =
        opts.out.clone().or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| PathBuf::from("out").join(cmd.name()));
    let mut out = OutputDir::create(&out_dir)?;
    let ctx = Ctx { cfg: &cfg, built: &built, workers: opts.workers };
    let deferred = match cmd {
        Command::Simulate => simulate(&ctx, &mut out)?,
        Command::FixedPoint => fixed_point(&ctx, &mut out)?,
        Command::Bsde => bsde(&ctx, &mut out)?,
        Command::Control => control(&ctx, &mut out)?,
        Command::Game => game(&ctx, &mut out)?,
        Command::Validate => validate(&ctx, &mut out)?,
    };
    let status = if deferred.is_some() { "failed" } else { "ok" };
    let manifest = out.finish(cmd.name(), config::config_hash(&canonical), cfg.seed, opts.workers, status)?;
    match deferred {
        Some(e) => Err(e),
        None => Ok(RunOutcome { out_dir, manifest }),
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    built: &'a Built,
    workers: usize,
}

/// An error to report after the outputs and manifest are written.
type Deferred = Option<CliError>;

fn summary(out: &mut OutputDir, entries: Vec<(&str, String)>) -> Result<(), CliError> {
    out.write("summary.csv", |w| export::write_summary(w, &entries))
}

fn no_controls(b: &Built) -> ControlSchedule {
    ControlSchedule::none(b.grid.cells(), b.model.n())
}

fn simulate(ctx: &Ctx<'_>, out: &mut OutputDir) -> Result<Deferred, CliError> {
    let b = ctx.built;
    let seed = ctx.cfg.require_seed("simulate")?;
    let sim = &ctx.cfg.simulate;
    let sched = no_controls(b);
    let fp = picard_fixed_point(&b.model, &b.xi, &b.grid, &sched, &b.picard)?;
    let ens = simulate_paths(&b.gen, &b.xi, b.grid.horizon(), sim.n_paths, derive_seed(seed, 1), ctx.workers)?;
    let tilt = TiltContext::new(&b.model, &b.gen, &fp.flow, &sched)?;
    let lw = tilt.log_weights(&ens, ctx.workers)?;
    let lt = lw.mean_estimate();
    let rw = reweight_ensemble_unchecked(&ens, &lw, &b.grid, b.model.n())?;
    let tv_t = tv_distance(rw.flow.terminal(), fp.flow.terminal())?;
    let bound = compute_kappa0(&b.gen, b.space(), &b.xi, b.grid.horizon(), sim.alpha, DEFAULT_LOG_CAP)?;
    let moments: Vec<f64> =
        ens.paths.iter().map(|p| (0.5 * sim.alpha * p.sup_abs_label(b.space()) as f64).exp()).collect();
    let m = Estimate::from_samples(&moments);

    if sim.write_paths {
        out.write("paths.csv", |w| export::write_paths(w, &ens))?;
    }
    out.write("weights.csv", |w| export::write_weights(w, &lw))?;
    out.write("flow.csv", |w| export::write_flow(w, &fp.flow))?;
    out.write("reweighted_flow.csv", |w| export::write_flow(w, &rw.flow))?;
    summary(
        out,
        vec![
            ("n_paths", sim.n_paths.to_string()),
            ("density_mean", fmt_f64(lt.mean)),
            ("density_se", fmt_f64(lt.se)),
            ("ess", fmt_f64(rw.ess)),
            ("tv_terminal_reweighted_vs_forward", fmt_f64(tv_t)),
            ("alpha", fmt_f64(sim.alpha)),
            ("kappa0", fmt_f64(bound.kappa0)),
            ("exp_moment_mean", fmt_f64(m.mean)),
            ("exp_moment_se", fmt_f64(m.se)),
        ],
    )?;
    Ok(None)
}

fn fixed_point(ctx: &Ctx<'_>, out: &mut OutputDir) -> Result<Deferred, CliError> {
    let b = ctx.built;
    let sched = no_controls(b);
    let fp = picard_iterate(&b.model, &b.xi, &b.grid, &sched, &b.picard)?;
    let residual = fixed_point_residual(&b.model, &fp.flow, &sched)?;
    out.write("flow.csv", |w| export::write_flow(w, &fp.flow))?;
    out.write("gaps.csv", |w| export::write_gaps(w, &fp))?;
    let final_gap = fp.gaps.last().copied().unwrap_or(f64::NAN);
    summary(
        out,
        vec![
            ("iterations", fp.iterations.to_string()),
            ("converged", fp.converged.to_string()),
            ("tol", fmt_f64(b.picard.tol)),
            ("final_gap", fmt_f64(final_gap)),
            ("residual", fmt_f64(residual)),
        ],
    )?;
    if !fp.converged {
        return Ok(Some(CliError::Solver(mfchain::Error::NotConverged {
            gaps: fp.gaps,
            detail: format!("Picard gap above {} after {} iterations", b.picard.tol, b.picard.max_iter),
        })));
    }
    Ok(None)
}

fn bsde(ctx: &Ctx<'_>, out: &mut OutputDir) -> Result<Deferred, CliError> {
    let b = ctx.built;
    let sched = no_controls(b);
    let fp = picard_fixed_point(&b.model, &b.xi, &b.grid, &sched, &b.picard)?;
    let driver = PolicyDriver { model: &b.model, cost: &b.cost, flow: &fp.flow, schedule: &sched };
    let vf = solve_bsde(&driver)?;
    out.write("flow.csv", |w| export::write_flow(w, &fp.flow))?;
    out.write("value_field.csv", |w| export::write_value_field(w, &vf))?;
    summary(
        out,
        vec![
            ("initial_value", fmt_f64(vf.initial_value(&b.xi))),
            ("lipschitz_stand_in", fmt_f64(driver.lipschitz_stand_in()?)),
            ("substeps", vf.substeps().iter().sum::<usize>().to_string()),
        ],
    )?;
    Ok(None)
}

fn control(ctx: &Ctx<'_>, out: &mut OutputDir) -> Result<Deferred, CliError> {
    let b = ctx.built;
    let cc = ctx.cfg.control.as_ref().ok_or_else(|| CliError::Config("`control` section is required".into()))?;
    let grid = control_grid(&cc.actions, "control.actions")?;
    let problem = b.problem();
    let players = Players { u: &grid, v: None };
    let sol = solve_control(&problem, &grid, &b.solve)?;
    out.write("policy.csv", |w| export::write_policy(w, &sol.u_policy, b.grid.times(), &grid))?;
    out.write("value_field.csv", |w| export::write_value_field(w, &sol.value))?;
    out.write("flow.csv", |w| export::write_flow(w, &sol.flow))?;
    let mut entries = vec![
        ("cost", fmt_f64(sol.cost)),
        ("iterations", sol.iterations.to_string()),
        ("damped_passes", sol.damped_at.len().to_string()),
    ];
    let mut failures = Vec::new();
    if let Some(seed) = ctx.cfg.seed {
        let mc = evaluate_cost(
            &problem,
            players,
            &sol.u_policy,
            None,
            CostMethod::MonteCarlo { n_paths: cc.mc_paths, seed: derive_seed(seed, 2), workers: ctx.workers },
        )?;
        let se = mc.se.unwrap_or(f64::NAN);
        let agree = (mc.value - sol.cost).abs() <= 3.0 * se;
        entries.push(("mc_cost", fmt_f64(mc.value)));
        entries.push(("mc_se", fmt_f64(se)));
        entries.push(("mc_agrees_3se", agree.to_string()));
        if !agree {
            failures.push(format!("field cost {} vs Monte Carlo {} (se {se})", sol.cost, mc.value));
        }
    }
    if let Some(coarse) = cc.coarse_cells {
        let oracle = brute_force_oracle(&problem, &grid, coarse, ctx.workers)?;
        out.write("oracle.csv", |w| export::write_oracle_table(w, &oracle.table))?;
        let cert = certify_near_optimal(sol.cost, cc.eps, &oracle);
        let (passed, slack) = match &cert {
            Ok(r) => (true, r.slack),
            Err(_) => (false, sol.cost - oracle.best_cost),
        };
        let mut text = String::new();
        writeln!(text, "passed = {passed}").ok();
        writeln!(text, "cost = {}", fmt_f64(sol.cost)).ok();
        writeln!(text, "oracle_min = {}", fmt_f64(oracle.best_cost)).ok();
        writeln!(text, "oracle_policy_id = {}", oracle.best).ok();
        writeln!(text, "eps = {}", fmt_f64(cc.eps)).ok();
        writeln!(text, "slack = {}", fmt_f64(slack)).ok();
        out.write("certification.txt", |w| w.write_all(text.as_bytes()))?;
        entries.push(("oracle_min", fmt_f64(oracle.best_cost)));
        entries.push(("certified", passed.to_string()));
        if let Err(e) = cert {
            failures.push(e.to_string());
        }
    }
    summary(out, entries)?;
    Ok((!failures.is_empty()).then(|| CliError::Verification(failures.join("; "))))
}

fn game(ctx: &Ctx<'_>, out: &mut OutputDir) -> Result<Deferred, CliError> {
    let b = ctx.built;
    let gc = ctx.cfg.game.as_ref().ok_or_else(|| CliError::Config("`game` section is required".into()))?;
    let ug = control_grid(&gc.u_actions, "game.u_actions")?;
    let vg = control_grid(&gc.v_actions, "game.v_actions")?;
    let game = GameSpec { problem: b.problem(), u: &ug, v: &vg };
    let seed = ctx.cfg.seed.unwrap_or(0);
    let pre = isaacs_check(&game, &default_isaacs_samples(&game, seed)?)?;
    if !pre.certified(gc.isaacs_tol) {
        summary(out, vec![("isaacs_gap_max", fmt_f64(pre.max_gap)), ("isaacs_certified", "false".into())])?;
        return Ok(Some(CliError::Solver(mfchain::Error::IsaacsViolated { gap: pre.max_gap })));
    }
    let sol = solve_game(&game, &b.solve, gc.isaacs_tol, seed)?;
    out.write("value_field.csv", |w| export::write_value_field(w, &sol.value_field))?;
    out.write("upper_field.csv", |w| export::write_value_field(w, &sol.upper_field))?;
    out.write("lower_field.csv", |w| export::write_value_field(w, &sol.lower_field))?;
    out.write("policy_u.csv", |w| export::write_policy(w, &sol.u_policy, b.grid.times(), &ug))?;
    out.write("policy_v.csv", |w| export::write_policy(w, &sol.v_policy, b.grid.times(), &vg))?;
    out.write("flow.csv", |w| export::write_flow(w, &sol.flow))?;
    let budget = DeviationBudget { coarse_cells: gc.coarse_cells, tol: gc.saddle_tol, workers: ctx.workers };
    let mut entries = vec![
        ("value", fmt_f64(sol.value)),
        ("isaacs_gap_max", fmt_f64(sol.isaacs_gap_max)),
        ("isaacs_certified", "true".to_string()),
        ("lower_upper_diff", fmt_f64(sol.lower_upper_diff)),
        ("iterations", sol.iterations.to_string()),
    ];
    let deferred = match verify_saddle(&game, &sol.u_policy, &sol.v_policy, &budget) {
        Ok(rep) => {
            out.write("deviations.csv", |w| export::write_deviations(w, &rep))?;
            entries.push(("deviations", rep.deviations.len().to_string()));
            entries.push(("min_margin", fmt_f64(rep.min_margin)));
            entries.push(("saddle_verified", "true".to_string()));
            None
        }
        Err(e @ mfchain::Error::SaddleViolated { .. }) => {
            entries.push(("saddle_verified", "false".to_string()));
            Some(CliError::Solver(e))
        }
        Err(e) => return Err(e.into()),
    };
    summary(out, entries)?;
    Ok(deferred)
}

struct Report {
    lines: Vec<(bool, String, String)>,
}

impl Report {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        self.lines.push((ok, name.to_string(), detail));
    }
}

fn validate(ctx: &Ctx<'_>, out: &mut OutputDir) -> Result<Deferred, CliError> {
    let b = ctx.built;
    let n = b.model.n();
    let sched = no_controls(b);
    let mut rep = Report { lines: Vec::new() };

    let fp = picard_iterate(&b.model, &b.xi, &b.grid, &sched, &b.picard)?;
    let residual = fixed_point_residual(&b.model, &fp.flow, &sched)?;
    rep.check(
        "fixed_point",
        fp.converged && residual <= 2.0 * b.picard.tol,
        format!("iterations {} converged {} residual {}", fp.iterations, fp.converged, fmt_f64(residual)),
    );
    let worst_mass = fp.flow.nodes().iter().map(|m| (m.mass().iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    let nonneg = fp.flow.nodes().iter().all(|m| m.mass().iter().all(|x| *x >= 0.0));
    rep.check("mass_conservation", worst_mass <= 1e-12 && nonneg, format!("max |sum - 1| {}", fmt_f64(worst_mass)));
    let ckp_ok = fp.gaps.iter().zip(fp.ckp_bounds()).all(|(g, b)| b.is_none_or(|b| *g <= b + 1e-8));
    rep.check("ckp_picard", ckp_ok, "TV gap <= sqrt(2 H) at every iterate with an entropy".into());

    let mut r = stream(ctx.cfg.seed.unwrap_or(0), 7);
    let mut tv_ok = true;
    for _ in 0..100 {
        let (p, q, s) = (random_law(&mut r, n), random_law(&mut r, n), random_law(&mut r, n));
        let d = |a: &ProbVector, c: &ProbVector| tv_distance(a, c).unwrap_or(f64::NAN);
        tv_ok &= d(&p, &p) == 0.0 && d(&p, &q) == d(&q, &p) && d(&p, &s) <= d(&p, &q) + d(&q, &s) + 1e-15;
        tv_ok &= d(&p, &q) <= 2.0 + 1e-15;
    }
    rep.check("tv_metric", tv_ok, "identity, symmetry, triangle and range on 100 random triples".into());

    let terminal_only = QuadraticCost {
        state: vec![0.0; n],
        u_quad: 0.0,
        u_lin: 0.0,
        v_quad: 0.0,
        v_lin: 0.0,
        uv: 0.0,
        mean: 0.0,
        ..b.cost.clone()
    };
    let driver = PolicyDriver { model: &b.model, cost: &terminal_only, flow: &fp.flow, schedule: &sched };
    let vf = solve_bsde(&driver)?;
    let mu_t = fp.flow.terminal();
    let forward: f64 = (0..n).map(|i| mu_t.get(i) * CostModel::terminal(&terminal_only, i, mu_t)).sum();
    let fk = (vf.initial_value(&b.xi) - forward).abs();
    rep.check("feynman_kac", fk <= 1e-8, format!("|y0 - E h(x_T)| = {}", fmt_f64(fk)));

    let lifted = QuadraticCost {
        state: b.cost.state.iter().map(|a| a + 0.5).collect(),
        terminal: b.cost.terminal.iter().map(|a| a + 1.0).collect(),
        ..b.cost.clone()
    };
    let d1 = PolicyDriver { model: &b.model, cost: &lifted, flow: &fp.flow, schedule: &sched };
    let d2 = PolicyDriver { model: &b.model, cost: &b.cost, flow: &fp.flow, schedule: &sched };
    let cmp = verify_comparison(&solve_bsde(&d1)?, &solve_bsde(&d2)?, &d1, &d2)?;
    rep.check("comparison", cmp.holds, format!("min margin {}", fmt_f64(cmp.min_margin)));

    if let Some(cc) = &ctx.cfg.control {
        let grid = control_grid(&cc.actions, "control.actions")?;
        let problem = b.problem();
        let sol = solve_control(&problem, &grid, &b.solve)?;
        let mut ok = true;
        for k in 0..b.grid.nodes() {
            for i in 0..n {
                let z = sol.hamiltonian_field.z_row(k, i);
                let (a, _) = minimize_hamiltonian(
                    problem.model,
                    problem.cost,
                    problem.gen,
                    b.grid.t(k),
                    i,
                    sol.flow.at_node(k),
                    &z,
                    &grid,
                )?;
                ok &= a == sol.u_policy.at(k, i);
            }
        }
        rep.check("pointwise_min", ok, format!("cost {}", fmt_f64(sol.cost)));
    }
    if let Some(gc) = &ctx.cfg.game {
        let ug = control_grid(&gc.u_actions, "game.u_actions")?;
        let vg = control_grid(&gc.v_actions, "game.v_actions")?;
        let game = GameSpec { problem: b.problem(), u: &ug, v: &vg };
        let is = isaacs_check(&game, &default_isaacs_samples(&game, ctx.cfg.seed.unwrap_or(0))?)?;
        rep.check(
            "isaacs",
            is.certified(gc.isaacs_tol),
            format!("max gap {} over {} samples", fmt_f64(is.max_gap), is.samples),
        );
    }

    let mut text = String::new();
    for (ok, name, detail) in &rep.lines {
        writeln!(text, "{} {name}: {detail}", if *ok { "PASS" } else { "FAIL" }).ok();
    }
    out.write("report.txt", |w| w.write_all(text.as_bytes()))?;
    let failed: Vec<&str> = rep.lines.iter().filter(|l| !l.0).map(|l| l.1.as_str()).collect();
    Ok((!failed.is_empty()).then(|| CliError::Verification(format!("failed checks: {}", failed.join(", ")))))
}
