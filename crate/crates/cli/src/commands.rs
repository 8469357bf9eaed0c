//! One function per subcommand. Each writes its primary tables under the output
//! directory; tables start with `# config_hash:` and `# seed:` lines.

use crate::config::{PolicyKind, RunConfig};
use pdmpnet_core::control_projection::verify_projection_exponent;
use pdmpnet_core::hjb::{greedy_policy, hjb_residual, restrict_field, solve_value_extended, Mdp, SchemeParams, ValueField};
use pdmpnet_core::linearize::{
    assemble_subsolution, build_occupation_lp, check_subsolution, dual_certificate, duality_report, mollify_edgewise, solve_lp,
};
use pdmpnet_core::model::{audit_assumptions, extend_dynamics, shake, shaking_scales, AuditReport, PdmpModel};
use pdmpnet_core::network::extend;
use pdmpnet_core::simulate::{mc_cost, random_feedback, simulate, Policy, RngStream, StopRule};
use pdmpnet_core::Model;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit 2.
    Config(String),
    /// Exit 1.
    Audit(Vec<String>),
    /// Exit 1.
    Run(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Audit(_) | CliError::Run(_) => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            CliError::Config(m) => json!({ "error": "config", "message": m }),
            CliError::Audit(f) => json!({ "error": "audit", "message": format!("assumptions failed: {}", f.join(", ")), "failed": f }),
            CliError::Run(m) => json!({ "error": "run", "message": m }),
        }
    }
}

impl From<pdmpnet_core::Error> for CliError {
    fn from(e: pdmpnet_core::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub out: PathBuf,
    pub quiet: bool,
}

/// Assumptions every downstream command relies on.
const CORE_ASSUMPTIONS: [&str; 6] = ["A1", "A2", "A3", "A4", "Aa", "Ab"];
/// Additionally needed by the projection and shaking constructions.
const PROJECTION_ASSUMPTIONS: [&str; 4] = ["Ab'", "Ac", "Ac'", "C"];

impl Ctx {
    pub fn new(config_text: &str, seed: u64, out: PathBuf, quiet: bool) -> CliResult<Self> {
        let cfg = RunConfig::parse(config_text).map_err(CliError::Config)?;
        Ok(Ctx { cfg, config_hash: hex_digest(config_text.as_bytes()), seed, out, quiet })
    }

    fn model(&self) -> CliResult<Arc<Model>> {
        self.cfg.model().map_err(CliError::Config)
    }

    fn header(&self) -> String {
        format!("# config_hash: {}\n# seed: {}\n", self.config_hash, self.seed)
    }

    fn write(&self, name: &str, body: &str) -> CliResult<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::Run(format!("{}: {e}", self.out.display())))?;
        let path = self.out.join(name);
        std::fs::write(&path, body).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
    }

    fn write_csv(&self, name: &str, body: &str) -> CliResult<()> {
        self.write(name, &format!("{}{body}", self.header()))
    }

    fn write_json(&self, name: &str, body: impl Serialize) -> CliResult<Value> {
        let mut v = serde_json::to_value(body).map_err(|e| CliError::Run(e.to_string()))?;
        if let Value::Object(map) = &mut v {
            map.insert("config_hash".into(), json!(self.config_hash));
            map.insert("seed".into(), json!(self.seed));
        }
        let text = serde_json::to_string_pretty(&v).map_err(|e| CliError::Run(e.to_string()))?;
        self.write(name, &(text + "\n"))?;
        Ok(v)
    }

    fn say(&self, line: &str) {
        if !self.quiet {
            println!("{line}");
        }
    }

    fn params(&self, model: &Model, dx: f64) -> SchemeParams<f64> {
        let g = &self.cfg.grid;
        let mut p = SchemeParams::for_model(model, dx);
        if let Some(h) = g.h {
            p = p.with_h(h);
        }
        p.n_a = g.n_a;
        p
    }

    fn run_audit(&self, model: &Model) -> AuditReport {
        audit_assumptions(model, self.cfg.audit.samples, self.seed)
    }

    fn require(&self, model: &Model, projection: bool) -> CliResult<()> {
        let report = self.run_audit(model);
        let mut needed: Vec<&str> = CORE_ASSUMPTIONS.to_vec();
        if projection {
            needed.extend(PROJECTION_ASSUMPTIONS);
        }
        let failed: Vec<String> = needed.iter().filter(|a| !report.passed(a)).map(|a| a.to_string()).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(CliError::Audit(failed))
        }
    }
}

pub fn audit(ctx: &Ctx) -> CliResult<()> {
    let m = ctx.model()?;
    let report = ctx.run_audit(&m);
    let failures: Vec<String> = report.failures().iter().map(|s| s.to_string()).collect();
    ctx.write_json("audit.json", json!({ "passed": failures.is_empty(), "failures": failures, "entries": report.entries }))?;
    for e in &report.entries {
        ctx.say(&format!("{:<4} {}", e.assumption, if e.passed { "pass" } else { "FAIL" }));
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Audit(failures))
    }
}

fn solve_field(ctx: &Ctx, m: &Model) -> CliResult<(Mdp<f64>, ValueField<f64>)> {
    let mdp = Mdp::build(m, &ctx.params(m, ctx.cfg.grid.dx))?;
    let v = mdp.solve()?;
    Ok((mdp, v))
}

pub fn solve(ctx: &Ctx) -> CliResult<()> {
    let m = ctx.model()?;
    ctx.require(&m, false)?;
    let (mdp, v) = solve_field(ctx, &m)?;
    let r = hjb_residual(&mdp, &v.values);
    ctx.write_csv("value.csv", &v.to_csv())?;
    ctx.write_json(
        "solve.json",
        json!({
            "scheme": v.scheme,
            "sup_norm": v.sup_norm(),
            "hjb": {
                "max_sub": r.max_sub,
                "max_super": r.max_super,
                "max_interior": r.max_interior,
                "junction_sub": r.junction_sub,
                "junction_super": r.junction_super,
            },
        }),
    )?;
    ctx.say(&format!("solved {} states in {} outer iterations; sup|v| = {:.6}", mdp.n_states(), v.scheme.outer_iterations, v.sup_norm()));
    Ok(())
}

pub fn simulate_cmd(ctx: &Ctx) -> CliResult<()> {
    let m = ctx.model()?;
    ctx.require(&m, false)?;
    let o = &ctx.cfg.simulate;
    let g = &ctx.cfg.grid;
    let policy: Policy<f64> = match o.policy {
        PolicyKind::Greedy => {
            let (_, v) = solve_field(ctx, &m)?;
            let h = v.scheme.h;
            greedy_policy(m.clone(), Arc::new(v), g.n_a, Vec::new(), h, o.hold)
        }
        PolicyKind::Random => random_feedback(m.clone(), g.n_a, 0.25, o.hold, ctx.seed),
    };
    let (x, mode) = (o.start.point(), o.start.mode);
    let est = mc_cost(&*m, x, mode, &policy, o.n_paths, o.horizon, g.flow_h, ctx.seed)?;
    // stream ids below n_paths belong to the estimate
    let path = simulate(&*m, x, mode, &policy, StopRule::horizon(o.horizon), g.flow_h, RngStream::new(ctx.seed, o.n_paths as u64))?;
    let mut csv = String::from("t,edge,coord,mode,a0,a1\n");
    for arc in &path.arcs {
        for s in &arc.samples {
            let u = &arc.controls[s.control];
            let edge = s.x.edge.map_or(-1, |e| e as i64);
            let _ = writeln!(csv, "{:.9e},{},{:.12e},{},{:.6e},{:.6e}", s.t, edge, s.x.coord, arc.mode, u.a[0], u.a[1]);
        }
    }
    ctx.write_csv("trajectory.csv", &csv)?;
    ctx.write_json(
        "simulate.json",
        json!({ "policy": o.policy, "cost": est.estimate, "stderr": est.stderr, "tail_bound": est.tail_bound, "jumps": path.jump_times.len() }),
    )?;
    ctx.say(&format!("discounted cost {:.6} ± {:.6} over {} paths", est.estimate, est.stderr, o.n_paths));
    Ok(())
}

pub fn project(ctx: &Ctx) -> CliResult<()> {
    let m = ctx.model()?;
    ctx.require(&m, true)?;
    let o = &ctx.cfg.project;
    let mut csv = String::from("edge,mode,slope,intercept,radius,sup_deviation,cost_gap,cases\n");
    let mut fits = Vec::new();
    for c in &o.cases {
        let fit = verify_projection_exponent(m.clone(), c.edge, c.mode, &o.radii, o.seeds, ctx.cfg.grid.epsilon, o.h)?;
        for r in &fit.rows {
            let cases: Vec<String> = r.cases.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(
                csv,
                "{},{},{:.6},{:.6},{:.6e},{:.6e},{:.6e},{}",
                c.edge,
                c.mode,
                fit.slope,
                fit.intercept,
                r.radius,
                r.sup_deviation,
                r.cost_gap,
                cases.join(";")
            );
        }
        let active = m.modes().is_active(c.edge, c.mode);
        ctx.say(&format!("edge {} mode {} ({}): slope {:.3}", c.edge, c.mode, if active { "active" } else { "inactive" }, fit.slope));
        fits.push(json!({
            "edge": c.edge,
            "mode": c.mode,
            "active": active,
            "slope": fit.slope,
            "intercept": fit.intercept,
            "residual": fit.residual,
            "case_a_runs": fit.case_a_runs,
            "case_a_violations": fit.case_a_violations,
        }));
    }
    ctx.write_csv("exponents.csv", &csv)?;
    ctx.write_json("project.json", json!({ "fits": fits }))?;
    Ok(())
}

/// One rung of the shaking ladder.
#[derive(Debug, Clone, Serialize)]
struct Rung {
    epsilon: f64,
    rho: f64,
    t_eps: f64,
    /// `sup |v_ext - v|` on the base nodes.
    sup_gap: f64,
    /// `max (v_ext - v)`.
    excess: f64,
    omega: f64,
    subsolution_violation: f64,
}

pub fn extend_cmd(ctx: &Ctx) -> CliResult<()> {
    let m = ctx.model()?;
    ctx.require(&m, true)?;
    let p = ctx.params(&m, ctx.cfg.extend.dx);
    let base = Mdp::build(&*m, &p)?.solve()?;
    let mut rungs = Vec::new();
    for &eps in &ctx.cfg.extend.epsilons {
        let sc = shaking_scales(&*m, eps)?;
        let rho = ctx.cfg.grid.rho.unwrap_or(sc.rho_ext);
        let xnet = extend(m.network(), eps)?;
        let em = extend_dynamics(&*m, xnet.clone())?;
        let sm = shake(&em, rho)?;
        let ext = solve_value_extended(&sm, &p)?;
        let restricted = restrict_field(&ext.field, base.grid.clone());
        let diffs = restricted.values.iter().zip(&base.values).map(|(a, b)| a - b);
        let (sup_gap, excess) = diffs.fold((0.0f64, f64::NEG_INFINITY), |(s, e), d| (s.max(d.abs()), e.max(d)));
        let w = assemble_subsolution(mollify_edgewise(&ext.field, &xnet, rho)?, &base, rho, m.constants().lambda_bound, m.discount());
        let check = check_subsolution(&*m, &w, &base.grid, ctx.cfg.grid.n_a);
        ctx.say(&format!("epsilon {eps}: rho {rho:.4e}, sup gap {sup_gap:.4e}, subsolution violation {:.3e}", check.max_violation));
        rungs.push(Rung { epsilon: eps, rho, t_eps: sc.t_eps, sup_gap, excess, omega: w.diagnostics.omega, subsolution_violation: check.max_violation });
    }
    let mut csv = String::from("epsilon,rho,t_eps,sup_gap,excess,omega,subsolution_violation\n");
    for r in &rungs {
        let _ = writeln!(
            csv,
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            r.epsilon, r.rho, r.t_eps, r.sup_gap, r.excess, r.omega, r.subsolution_violation
        );
    }
    ctx.write_csv("shaking.csv", &csv)?;
    ctx.write_json("extend.json", json!({ "rungs": rungs }))?;
    Ok(())
}

pub fn linearize(ctx: &Ctx) -> CliResult<()> {
    let m = ctx.model()?;
    ctx.require(&m, false)?;
    let o = &ctx.cfg.linearize;
    let p = ctx.params(&m, o.dx).with_tolerances(1e-12, 1e-11);
    let mdp = Mdp::build(&*m, &p)?;
    let v = mdp.solve()?;
    let points: Vec<_> = o.points.iter().map(|q| (q.point(), q.mode)).collect();
    let rows = duality_report(&mdp, &v, &points, o.max_pivots)?;
    let mut csv = String::from("edge,coord,mode,delta_v,primal,dual,gap,value_gap,pivots,certificate_violation\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{:.6},{},{:.15e},{:.15e},{:.15e},{:.6e},{:.6e},{},{:.6e}",
            r.edge, r.coord, r.mode, r.delta_v, r.primal, r.dual, r.primal_dual_gap, r.value_gap, r.pivots, r.certificate_violation
        );
        ctx.say(&format!("({}, {:.3}, {}): primal {:.9} dual {:.9} delta*v {:.9}", r.edge, r.coord, r.mode, r.primal, r.dual, r.delta_v));
    }
    ctx.write_csv("duality_report.csv", &csv)?;
    if let Some(&(x, mode)) = points.first() {
        let occ = build_occupation_lp(&mdp, &x, mode);
        let sol = solve_lp(&occ.lp, o.max_pivots)?;
        let psi = dual_certificate(&mdp, &sol);
        let mut cert = String::from("edge,coord,mode,psi\n");
        for (s, value) in psi.iter().enumerate() {
            let (node, g) = mdp.split(s);
            let q = mdp.grid.point(node);
            let _ = writeln!(cert, "{},{:.12e},{},{:.15e}", q.edge.map_or(-1, |e| e as i64), q.coord, g, value);
        }
        ctx.write_csv("certificate.csv", &cert)?;
    }
    ctx.write_json("linearize.json", json!({ "rows": rows }))?;
    Ok(())
}

/// Artifacts summarized by `report`, in output order.
const ARTIFACTS: [&str; 12] = [
    "audit.json",
    "solve.json",
    "value.csv",
    "simulate.json",
    "trajectory.csv",
    "project.json",
    "exponents.csv",
    "extend.json",
    "shaking.csv",
    "linearize.json",
    "duality_report.csv",
    "certificate.csv",
];

pub fn report(ctx: &Ctx) -> CliResult<()> {
    let mut files = Vec::new();
    let mut summaries = serde_json::Map::new();
    for name in ARTIFACTS {
        let path = ctx.out.join(name);
        let Ok(bytes) = std::fs::read(&path) else { continue };
        let same_config = String::from_utf8_lossy(&bytes).contains(&ctx.config_hash);
        files.push(json!({ "file": name, "sha256": hex_digest(&bytes), "same_config": same_config }));
        if name.ends_with(".json") {
            let v: Value = serde_json::from_slice(&bytes).map_err(|e| CliError::Run(format!("{name}: {e}")))?;
            summaries.insert(name.trim_end_matches(".json").into(), summarize(name, &v));
        }
    }
    if files.is_empty() {
        return Err(CliError::Run(format!("no artifacts under {}", ctx.out.display())));
    }
    ctx.say(&format!("{} artifacts summarized", files.len()));
    ctx.write_json("report.json", json!({ "files": files, "summary": summaries }))?;
    Ok(())
}

fn summarize(name: &str, v: &Value) -> Value {
    match name {
        "audit.json" => json!({ "passed": v["passed"], "failures": v["failures"] }),
        "solve.json" => json!({ "sup_norm": v["sup_norm"], "hjb": v["hjb"] }),
        "simulate.json" => json!({ "cost": v["cost"], "stderr": v["stderr"] }),
        "project.json" => json!(v["fits"].as_array().map(|a| a.iter().map(|f| json!({ "edge": f["edge"], "mode": f["mode"], "slope": f["slope"] })).collect::<Vec<_>>())),
        "extend.json" => json!(v["rungs"].as_array().map(|a| a.iter().map(|r| json!({ "epsilon": r["epsilon"], "sup_gap": r["sup_gap"] })).collect::<Vec<_>>())),
        "linearize.json" => {
            let worst = v["rows"].as_array().map(|a| a.iter().filter_map(|r| r["gap"].as_f64().or(r["primal_dual_gap"].as_f64())).fold(0.0f64, |m, g| m.max(g.abs())));
            json!({ "max_primal_dual_gap": worst })
        }
        _ => v.clone(),
    }
}
