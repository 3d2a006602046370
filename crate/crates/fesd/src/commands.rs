use std::fs;
use std::path::{Path, PathBuf};

use fesd_core::catalog::{load_catalog, CatalogEntry};
use fesd_core::model::{validate_model, NonsmoothModel};
use fesd_core::ocp::{grid_search, sliding_ocp, solve_ocp, transcribe, OcpSettings, OcpSpec};
use fesd_core::reformulate::{complexity_formula_rows, complexity_report};
use fesd_core::simulate::{
    integrate, order_study, ErrorNorm, Method, OrderCell, OrderStudyResult, SimOptions, Trajectory,
};
use fesd_core::solve::HomotopySettings;
use fesd_core::tableau::{tableau, tableau_for_order, Family};
use serde_json::json;

use crate::model_json::{model_from_json, model_to_json, ocp_from_json, parse_variant};
use crate::output::{self, num};
use crate::{BenchArgs, CliError, Command, Common, ComplexityArgs, Norm, OcpArgs, RunConfig, Scheme, SimulateArgs, ValidateArgs};

/// A model together with its default initial state and horizon.
pub struct LoadedModel {
    pub model: NonsmoothModel,
    pub x0: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    pub catalog: Option<CatalogEntry>,
}

/// Resolve `source` as a JSON file if it names one, otherwise as a catalog id.
pub fn load_model(source: &str) -> Result<LoadedModel, CliError> {
    let path = Path::new(source);
    if path.extension().is_some_and(|e| e == "json") || path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {}", source, e)))?;
        let (model, j) = model_from_json(&text)?;
        return Ok(LoadedModel { model, x0: j.x0, horizon: j.horizon, catalog: None });
    }
    let entry = load_catalog(source).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(LoadedModel {
        model: entry.model.clone(),
        x0: Some(entry.x0.clone()),
        horizon: Some(entry.horizon),
        catalog: Some(entry),
    })
}

fn family(s: Scheme) -> Family {
    match s {
        Scheme::RadauIia => Family::RadauIIA,
        Scheme::GaussLegendre => Family::GaussLegendre,
    }
}

fn homotopy(c: &Common) -> Result<HomotopySettings, CliError> {
    let mut h = HomotopySettings::default();
    if let Some(v) = c.sigma0 {
        h.sigma0 = v;
    }
    if let Some(v) = c.sigma_min {
        h.sigma_min = v;
    }
    if let Some(v) = c.kappa {
        h.kappa = v;
    }
    if !(h.sigma0 > 0.0 && h.sigma_min > 0.0 && h.sigma_min <= h.sigma0 && h.kappa > 0.0 && h.kappa < 1.0) {
        return Err(CliError::Config("homotopy needs 0 < sigma_min <= sigma0 and 0 < kappa < 1".into()));
    }
    Ok(h)
}

fn out_dir(out: &Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
    match out {
        None => Ok(None),
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| CliError::Config(format!("output directory {}: {}", d.display(), e)))?;
            Ok(Some(d.clone()))
        }
    }
}

struct Setup {
    loaded: LoadedModel,
    opts: SimOptions,
    x0: Vec<f64>,
}

fn setup(c: &Common, n_sim: usize) -> Result<Setup, CliError> {
    let loaded = load_model(&c.model)?;
    let horizon = c
        .horizon
        .or(loaded.horizon)
        .ok_or_else(|| CliError::Config("no horizon given and the model has no default (--T)".into()))?;
    let x0 = c
        .x0
        .clone()
        .or_else(|| loaded.x0.clone())
        .ok_or_else(|| CliError::Config("no initial state given and the model has no default (--x0)".into()))?;
    if x0.len() != loaded.model.n_x {
        return Err(CliError::Config(format!("--x0 has {} entries, the model has {} states", x0.len(), loaded.model.n_x)));
    }
    if c.nfe == 0 || n_sim == 0 || !(horizon > 0.0) {
        return Err(CliError::Config("need --nfe >= 1, --nsim >= 1 and --T > 0".into()));
    }
    let tab = tableau(family(c.scheme), c.stages)?;
    let mut opts = SimOptions::new(tab, c.nfe, n_sim, horizon);
    opts.homotopy = homotopy(c)?;
    Ok(Setup { loaded, opts, x0 })
}

pub fn simulate(a: &SimulateArgs) -> Result<Trajectory, CliError> {
    let Setup { loaded, mut opts, x0 } = setup(&a.common, a.nsim)?;
    let dir = out_dir(&a.common.out)?;
    if a.fixed_grid {
        opts.method = Method::FixedGrid;
    }
    opts.sensitivities = a.sensitivity;
    let controls = match &a.controls {
        Some(p) => output::read_controls(p)?,
        None => Vec::new(),
    };
    if loaded.model.n_u > 0 && controls.is_empty() {
        return Err(CliError::Config("the model has controls; pass them with --controls".into()));
    }
    let dcs = parse_variant(&a.common.variant)?.build(&loaded.model)?;
    let tr = integrate(&dcs, &opts, &x0, &controls)?;
    let mut report = output::trajectory_summary(&tr);
    report["command"] = json!("simulate");
    report["model"] = json!(loaded.model.name);
    report["scheme"] = json!(opts.tableau.label());
    report["n_fe"] = json!(opts.n_fe);
    report["n_sim"] = json!(opts.n_sim);
    report["horizon"] = json!(opts.t_sim);
    if let Some(s) = &tr.sensitivity {
        let rows: Vec<Vec<f64>> = (0..s.nrows()).map(|i| s.row(i).iter().copied().collect()).collect();
        report["sensitivity"] = json!(rows);
    }
    match &dir {
        Some(d) => {
            output::write_trajectory(&d.join("trajectory.csv"), &tr.grid, &tr.states)?;
            output::write_switches(&d.join("switches.csv"), &tr.switches)?;
            output::write_json(&d.join("report.json"), &report)?;
        }
        None => {
            println!("terminal state: {}", tr.terminal().iter().map(|v| num(*v)).collect::<Vec<_>>().join(", "));
            for s in &tr.switches {
                println!("switch t = {} psi {} {}", num(s.t), s.psi_index, s.kind.name());
            }
        }
    }
    if let Some((k, msg)) = &tr.failure {
        return Err(CliError::Solver(format!("step {}: {}", k, msg)));
    }
    Ok(tr)
}

/// Terminal-state reference for an order study.
fn reference(setup: &Setup, a: &BenchArgs, dcs: &fesd_core::dcs::Dcs) -> Result<(Trajectory, String), CliError> {
    let t = setup.opts.t_sim;
    if let Some(r) = setup.loaded.catalog.as_ref().and_then(|c| c.reference.as_ref()) {
        if a.norm == Norm::Terminal {
            let sol = r.solve(setup.x0[0], t);
            let mut end = vec![sol.state(t)];
            if setup.x0.len() == 2 {
                end.push(setup.x0[1] + t);
            }
            let tr = Trajectory {
                n_x: setup.x0.len(),
                grid: vec![0.0, t],
                states: vec![setup.x0.clone(), end],
                ..Trajectory::default()
            };
            return Ok((tr, "analytic".into()));
        }
    }
    let finest = a.nsim.iter().copied().max().unwrap_or(1);
    let mut o = setup.opts.clone();
    o.method = Method::Fesd;
    o.tableau = tableau(Family::RadauIIA, 4)?;
    o.n_sim = finest * a.reference_factor.max(1);
    let tr = integrate(dcs, &o, &setup.x0, &[])?;
    if let Some((k, msg)) = &tr.failure {
        return Err(CliError::Solver(format!("reference run, step {}: {}", k, msg)));
    }
    Ok((tr, format!("{} at n_sim = {}", o.tableau.label(), o.n_sim)))
}

pub fn bench_order(a: &BenchArgs) -> Result<OrderStudyResult, CliError> {
    let setup = setup(&a.common, 1)?;
    let dir = out_dir(&a.common.out)?;
    if setup.loaded.model.n_u > 0 {
        return Err(CliError::Config("order studies need a model without controls".into()));
    }
    if a.nsim.is_empty() || a.nsim.contains(&0) || a.orders.is_empty() {
        return Err(CliError::Config("need a non-empty --nsim list of positive counts and --orders".into()));
    }
    let dcs = parse_variant(&a.common.variant)?.build(&setup.loaded.model)?;
    let (reference, ref_label) = reference(&setup, a, &dcs)?;
    let mut cells = Vec::new();
    for &p in &a.orders {
        let tab = tableau_for_order(p)?;
        for &n in &a.nsim {
            cells.push(OrderCell { tableau: tab.clone(), n_sim: n });
        }
    }
    let mut base = setup.opts.clone();
    if a.fixed_grid {
        base.method = Method::FixedGrid;
    }
    let norm = match a.norm {
        Norm::Terminal => ErrorNorm::Terminal,
        Norm::Max => ErrorNorm::MaxOverGrid,
    };
    let res = order_study(&dcs, &base, &cells, &setup.x0, &[], &reference, norm)?;
    let fits: Vec<_> = res
        .fits
        .iter()
        .map(|f| json!({"scheme": f.scheme, "order_nominal": f.order_nominal, "slope": f.slope,
                        "intercept": f.intercept, "points_used": f.points_used}))
        .collect();
    let report = json!({
        "command": "bench-order",
        "model": setup.loaded.model.name,
        "method": if a.fixed_grid { "fixed-grid" } else { "fesd" },
        "n_fe": base.n_fe,
        "horizon": base.t_sim,
        "reference": ref_label,
        "fits": fits,
    });
    match &dir {
        Some(d) => {
            output::write_order_study(&d.join("order_study.csv"), &res)?;
            output::write_json(&d.join("report.json"), &report)?;
        }
        None => {
            for r in &res.rows {
                println!("{} n_sim={} h={} err={}", r.scheme, r.n_sim, num(r.h_avg), num(r.err));
            }
            for f in &res.fits {
                println!("{} nominal {} slope {:?}", f.scheme, f.order_nominal, f.slope);
            }
        }
    }
    Ok(res)
}

fn ocp_spec(a: &OcpArgs) -> Result<OcpSpec, CliError> {
    if a.model == "sliding" {
        if a.nctrl == 0 || a.nfe == 0 {
            return Err(CliError::Config("need --nctrl >= 1 and --nfe >= 1".into()));
        }
        return Ok(sliding_ocp(a.nctrl, a.nfe, tableau(Family::RadauIIA, a.stages)?));
    }
    let text = fs::read_to_string(&a.model).map_err(|e| CliError::Config(format!("{}: {}", a.model, e)))?;
    ocp_from_json(&text)
}

pub fn ocp(a: &OcpArgs) -> Result<serde_json::Value, CliError> {
    let spec = ocp_spec(a)?;
    let dir = out_dir(&a.out)?;
    let t = transcribe(&spec)?;
    let settings = OcpSettings::default();
    let sol = solve_ocp(&t, &settings)?;
    let mut report = json!({
        "command": "ocp",
        "model": spec.model.name,
        "n_ctrl": spec.n_ctrl,
        "n_fe": spec.n_fe,
        "objective": sol.objective,
        "kkt_residual": sol.kkt_residual,
        "complementarity_residual": sol.complementarity_residual,
        "equality_residual": sol.equality_residual,
        "converged": sol.converged,
        "controls": sol.controls,
        "terminal_state": sol.states.last(),
        "homotopy": sol.log.iter().map(|s| json!({
            "barrier": s.barrier, "sigma": s.sigma, "objective": s.objective,
            "newton_iters": s.newton_iters, "gradient_inf": s.gradient_inf
        })).collect::<Vec<_>>(),
    });
    if a.grid_levels > 0 {
        let (best, q) = grid_search(&t, &settings, a.grid_levels)?;
        report["grid_search"] = json!({"levels": a.grid_levels, "objective": best, "controls": q});
    }
    let ctrl_grid: Vec<f64> = (0..=spec.n_ctrl).map(|k| spec.horizon * k as f64 / spec.n_ctrl as f64).collect();
    match &dir {
        Some(d) => {
            output::write_trajectory(&d.join("trajectory.csv"), &sol.grid, &sol.trajectory)?;
            output::write_controls(&d.join("controls.csv"), &ctrl_grid, &sol.controls)?;
            output::write_json(&d.join("report.json"), &report)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report).expect("JSON values serialise")),
    }
    if !sol.converged {
        return Err(CliError::Solver(format!(
            "OCP did not converge (KKT residual {}, complementarity {})",
            num(sol.kkt_residual),
            num(sol.complementarity_residual)
        )));
    }
    Ok(report)
}

pub fn report_complexity(a: &ComplexityArgs) -> Result<Vec<fesd_core::reformulate::ComplexityRow>, CliError> {
    let loaded = load_model(&a.model)?;
    let dir = out_dir(&a.out)?;
    let mut rows = complexity_report(&loaded.model, a.depth)?;
    for n in 1..=a.table_up_to {
        rows.extend(complexity_formula_rows(n, None));
    }
    match &dir {
        Some(d) => {
            output::write_complexity(&d.join("complexity.csv"), &rows)?;
            let list: Vec<_> = rows
                .iter()
                .map(|r| json!({"model": r.model, "variant": r.variant, "n_comp_pairs": r.n_comp_pairs,
                                "n_comp_scalar": r.n_comp_scalar, "n_eq": r.n_eq, "n_alg": r.n_alg}))
                .collect();
            output::write_json(&d.join("report.json"), &json!({"command": "report-complexity", "rows": list}))?;
        }
        None => {
            for r in &rows {
                println!(
                    "{} {}: {} complementarity pairs ({} scalar), {} equalities, {} algebraic",
                    r.model, r.variant, r.n_comp_pairs, r.n_comp_scalar, r.n_eq, r.n_alg
                );
            }
        }
    }
    Ok(rows)
}

pub fn validate(a: &ValidateArgs) -> Result<(), CliError> {
    let loaded = load_model(&a.model)?;
    let violations = validate_model(&loaded.model);
    if let Some(d) = out_dir(&a.out)? {
        fs::write(d.join("model.json"), model_to_json(&loaded.model) + "\n")
            .map_err(|e| CliError::Io(e.to_string()))?;
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        output::write_json(&d.join("report.json"), &json!({"command": "validate", "violations": list}))?;
    }
    if violations.is_empty() {
        println!("{}: valid ({} states, {} switching functions)", loaded.model.name, loaded.model.n_x, loaded.model.n_psi());
        Ok(())
    } else {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        Err(CliError::Config(format!("{} is invalid: {}", loaded.model.name, list.join("; "))))
    }
}

/// Execute one command.
pub fn run(config: &RunConfig) -> Result<(), CliError> {
    match &config.command {
        Command::Simulate(a) => simulate(a).map(|_| ()),
        Command::BenchOrder(a) => bench_order(a).map(|_| ()),
        Command::Ocp(a) => ocp(a).map(|_| ()),
        Command::ReportComplexity(a) => report_complexity(a).map(|_| ()),
        Command::Validate(a) => validate(a),
    }
}
