#![allow(clippy::needless_range_loop)]

//! The ten acceptance criteria, run in order. Later criteria reuse constants fitted by
//! earlier ones, so everything lives in one test that prints one line per criterion.

use pdmpnet_core::control_projection::{fit_line, verify_projection_exponent};
use pdmpnet_core::hjb::{
    bellman_jump_operator, dpp_residual, hjb_residual, restrict_field, scheme_constant, solve_value, solve_value_extended, DppOptions, Mdp,
    SchemeParams, ValueField,
};
use pdmpnet_core::linearize::{
    assemble_subsolution, check_subsolution, duality_report, mollify_edgewise, occupation_row_residuals, GridFunction, Shifted,
    SmoothSubsolution, TestFunction,
};
use pdmpnet_core::model::{extend_dynamics, shake, shaking_scales, traffic3_model, Constants, Control, ModelBuilder, PdmpModel};
use pdmpnet_core::network::{extend, NetworkPoint};
use pdmpnet_core::simulate::{flow, random_feedback, simulate, Policy, RngStream, Schedule, StopRule};
use pdmpnet_core::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

type Outcome = (bool, String);

fn traffic() -> Model {
    traffic3_model(0.1, 1.0, 1.0).unwrap()
}

/// Two modes switching at constant rate `rate` under a thinning bound `bound`, no drift.
fn constant_rate(rate: f64, bound: f64) -> Model {
    ModelBuilder::<f64>::new(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2)
        .unwrap()
        .constants(Constants { lambda_bound: bound, l_bound: 1.0, f_bound: 1.0, ..Default::default() })
        .rate(move |_, _, _| rate)
        .cost(|_, _, _| 1.0)
        .discount(0.5)
        .build()
        .unwrap()
}

fn still() -> Policy<f64> {
    Policy::schedule(Schedule::constant(Control::new(vec![0.0, 0.0], 0)))
}

fn simulator_laws() -> Outcome {
    let started = Instant::now();
    let rate = 1.5;
    let m = constant_rate(rate, 4.0);
    let p = still();
    let n = 100_000;
    let mut taus: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| simulate(&m, NetworkPoint::junction(), 0, &p, StopRule::jumps(100.0, 1), 1.0, RngStream::new(1, i)).unwrap().jump_times[0])
        .collect();
    taus.sort_by(f64::total_cmp);
    let ks = taus
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let f = 1.0 - (-rate * t).exp();
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    let band = ((2.0f64 / 0.01).ln() / (2.0 * n as f64)).sqrt();
    let law_time = started.elapsed().as_secs_f64();

    let horizon = 2.0;
    let counts: Vec<f64> = (0..10_000u64)
        .into_par_iter()
        .map(|i| simulate(&m, NetworkPoint::junction(), 0, &p, StopRule::horizon(horizon), 1.0, RngStream::new(2, i)).unwrap().jump_times.len() as f64)
        .collect();
    let k = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / k;
    let sd = (counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (k - 1.0)).sqrt();
    let stderr = sd / k.sqrt();
    let expected = rate * horizon;
    let ok = ks <= band && law_time < 5.0 && (mean - expected).abs() <= 3.0 * stderr;
    (ok, format!("KS {ks:.5} vs DKW band {band:.5} in {law_time:.2}s; mean count {mean:.4} vs {expected} (stderr {stderr:.4})"))
}

fn flow_accuracy() -> Outcome {
    let m = traffic();
    let p = Policy::schedule(Schedule::constant(Control::new(vec![0.0, 1.0], 0)));
    let arc = flow(&m, 1, NetworkPoint::on(0, 0.25), &p, 1.5, 1e-3).unwrap();
    let worst = arc
        .samples
        .iter()
        .map(|s| {
            let exact = if s.t < 1.0 { (0.5 - s.t / 2.0).powi(2) } else { 0.0 };
            (s.x.coord - exact).abs()
        })
        .fold(0.0, f64::max);
    (worst <= 1e-8 && arc.samples.len() > 10, format!("max error {worst:.3e} over {} samples at h = 1e-3", arc.samples.len()))
}

fn contraction() -> Outcome {
    let m = traffic();
    let p = SchemeParams::for_model(&m, 1.0 / 50.0);
    let mdp = Mdp::build(&m, &p).unwrap();
    let k = m.constants();
    let q = k.lambda_bound / (k.lambda_bound + m.discount());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let top = k.l_bound / m.discount();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let v: Vec<f64> = (0..mdp.n_states()).map(|_| rng.gen::<f64>() * top).collect();
        let w: Vec<f64> = (0..mdp.n_states()).map(|_| rng.gen::<f64>() * top).collect();
        let tv = bellman_jump_operator(&mdp, &v, 1e-12).unwrap();
        let tw = bellman_jump_operator(&mdp, &w, 1e-12).unwrap();
        let num = tv.iter().zip(&tw).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let den = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(num / den);
    }
    let decay = mdp.solve().unwrap().scheme.decay_ratio(1e-6);
    let ok = worst <= q + 0.05 && decay <= q + 0.05;
    (ok, format!("worst ratio {worst:.4}, increment decay {decay:.4}, bound {:.4}", q + 0.05))
}

fn ladder(m: &Model) -> Vec<ValueField<f64>> {
    [25.0, 50.0, 100.0].iter().map(|n| solve_value(m, &SchemeParams::for_model(m, 1.0 / n)).unwrap()).collect()
}

fn dpp(c_scheme: &mut f64) -> Outcome {
    let started = Instant::now();
    let m = Arc::new(traffic());
    let levels = ladder(&m);
    *c_scheme = scheme_constant(&levels);
    let v = Arc::new(levels[1].clone());
    let margin = *c_scheme * (v.scheme.dx + v.scheme.h);
    let pts: Vec<_> = (0..10).map(|k| (NetworkPoint::on(k % 3, 0.1 + 0.08 * k as f64), k % 4)).collect();
    let opts = DppOptions { horizon: 0.5, n_mc: 200, n_random: 20, n_a: 9, hold: 0.02, cell: 0.25, h: 1e-2, seed: 0 };
    let rows = dpp_residual(m, v, &pts, &opts).unwrap();
    let bad = rows.iter().filter(|r| r.residual > margin + 3.0 * r.stderr).count();
    let worst = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
    let secs = started.elapsed().as_secs_f64();
    (bad == 0 && secs < 120.0, format!("C_scheme {c_scheme:.4}; worst residual {worst:.4e} vs margin {margin:.4e} + 3 stderr; {bad} violations; {secs:.1}s"))
}

fn hjb_ladder(c_res: &mut f64) -> Outcome {
    let m = traffic();
    let mut scales = Vec::new();
    let mut interior = Vec::new();
    let mut junction = Vec::new();
    for n in [25.0, 50.0, 100.0] {
        let p = SchemeParams::for_model(&m, 1.0 / n).with_tolerances(1e-12, 1e-11);
        let mdp = Mdp::build(&m, &p).unwrap();
        let v = mdp.solve().unwrap();
        let r = hjb_residual(&mdp, &v.values);
        scales.push(p.dx + p.h);
        interior.push(r.max_interior);
        junction.push(r.junction_sub);
    }
    *c_res = scales.iter().zip(interior.iter().zip(&junction)).map(|(s, (i, j))| i.max(*j) / s).fold(0.0, f64::max);
    let logs: Vec<f64> = scales.iter().map(|s| s.ln()).collect();
    let (order, _, _) = fit_line(&logs, &interior.iter().map(|r| r.max(1e-300).ln()).collect::<Vec<_>>());
    let ok = order >= 0.8 && junction.iter().zip(&scales).all(|(j, s)| *j <= *c_res * s);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" ");
    (ok, format!("interior [{}], junction sub [{}], C_res {c_res:.4}, fitted order {order:.3}", fmt(&interior), fmt(&junction)))
}

fn projection_exponents() -> Outcome {
    let m = Arc::new(traffic());
    let radii = [1e-2, 3e-3, 1e-3];
    let inactive = verify_projection_exponent(m.clone(), 0, 1, &radii, 100, 0.1, 1e-3).unwrap();
    let active = verify_projection_exponent(m, 1, 3, &radii, 100, 0.1, 1e-3).unwrap();
    let violations = inactive.case_a_violations + active.case_a_violations;
    let runs = inactive.case_a_runs + active.case_a_runs;
    let ok = inactive.slope >= 0.20 && active.slope >= 0.45 && violations == 0 && runs > 0;
    (ok, format!("inactive slope {:.3}, active slope {:.3}; case (a) violations {violations} of {runs}", inactive.slope, active.slope))
}

struct Rung {
    eps: f64,
    excess: f64,
    gap: f64,
    w: SmoothSubsolution<f64>,
}

const LADDER_DX: f64 = 0.0125;

fn shaking_ladder(m: &Model, base: &ValueField<f64>) -> Vec<Rung> {
    let p = SchemeParams::for_model(m, LADDER_DX);
    [0.2, 0.1, 0.05]
        .iter()
        .map(|&eps| {
            let sc = shaking_scales(m, eps).unwrap();
            let xnet = extend(m.network(), eps).unwrap();
            let em = extend_dynamics(m, xnet.clone()).unwrap();
            let sm = shake(&em, sc.rho_ext).unwrap();
            let ext = solve_value_extended(&sm, &p).unwrap();
            let restricted = restrict_field(&ext.field, base.grid.clone());
            let diffs: Vec<f64> = restricted.values.iter().zip(&base.values).map(|(a, b)| a - b).collect();
            let excess = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let gap = diffs.iter().map(|d| d.abs()).fold(0.0, f64::max);
            let w = assemble_subsolution(mollify_edgewise(&ext.field, &xnet, sc.rho_ext).unwrap(), base, sc.rho_ext, m.constants().lambda_bound, m.discount());
            Rung { eps, excess, gap, w }
        })
        .collect()
}

fn shaking_convergence(rungs: &[Rung], base: &ValueField<f64>, c_scheme: f64) -> Outcome {
    let margin = c_scheme * (base.scheme.dx + base.scheme.h);
    let below = rungs.iter().all(|r| r.excess <= margin);
    let monotone = rungs.windows(2).all(|w| w[1].gap <= 1.1 * w[0].gap);
    let gaps: Vec<String> = rungs.iter().map(|r| format!("eps {}: gap {:.4e}, excess {:.3e}", r.eps, r.gap, r.excess)).collect();
    (below && monotone, format!("{}; margin {margin:.3e}", gaps.join("; ")))
}

fn tol_sub(c_res: f64, base: &ValueField<f64>, eps: f64) -> f64 {
    c_res * (base.scheme.dx + base.scheme.h + eps)
}

fn subsolutions(m: &Model, rungs: &[Rung], base: &ValueField<f64>, c_res: f64) -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    for r in rungs {
        let check = check_subsolution(m, &r.w, &base.grid, 5);
        worst = worst.max(check.max_violation);
        ok &= check.max_violation <= tol_sub(c_res, base, r.eps);
    }
    let planted = Shifted { inner: GridFunction(base), shift: 1.0 };
    let caught = check_subsolution(m, &planted, &base.grid, 5).max_violation;
    let loosest = tol_sub(c_res, base, 0.2);
    ok &= caught > loosest;
    (ok, format!("worst assembled violation {worst:.3e} (tol_sub up to {loosest:.3e}); planted v + 1 violation {caught:.3e}"))
}

/// Values of every stationary deterministic policy by direct linear solves.
fn enumerate_policies(mdp: &Mdp<f64>, start: usize) -> (f64, usize) {
    let n = mdp.n_states();
    let sizes: Vec<usize> = (0..n).map(|s| mdp.actions(s).len()).collect();
    let total: usize = sizes.iter().product();
    let mut best = f64::INFINITY;
    let mut choice = vec![0usize; n];
    for _ in 0..total {
        // (I - βP_π) v = κ_h c_π
        let mut a = vec![vec![0.0; n + 1]; n];
        for s in 0..n {
            let act = &mdp.actions(s)[choice[s]];
            a[s][s] += 1.0;
            for (t, p) in mdp.transitions(s, act) {
                a[s][t] -= mdp.beta * p;
            }
            a[s][n] = mdp.kappa_h * act.cost;
        }
        for k in 0..n {
            let piv = (k..n).max_by(|&x, &y| a[x][k].abs().total_cmp(&a[y][k].abs())).unwrap();
            a.swap(k, piv);
            for i in 0..n {
                if i != k {
                    let f = a[i][k] / a[k][k];
                    for j in k..=n {
                        a[i][j] -= f * a[k][j];
                    }
                }
            }
        }
        best = best.min(a[start][n] / a[start][start]);
        for s in 0..n {
            choice[s] += 1;
            if choice[s] < sizes[s] {
                break;
            }
            choice[s] = 0;
        }
    }
    (best, total)
}

fn micro_line() -> Model {
    ModelBuilder::<f64>::new(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 1)
        .unwrap()
        .constants(Constants { l_bound: 2.5, f_bound: 1.0, ..Default::default() })
        .drift(|_, _, a| a.to_vec())
        .cost(|x, _, a| 1.0 + x[0] * x[0] + 0.3 * a[0] + 0.2 * x[0])
        .discount(0.7)
        .build()
        .unwrap()
}

fn linearization(m: &Model, rungs: &[Rung], base: &ValueField<f64>, c_res: f64, c_scheme: f64) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let p = SchemeParams::for_model(m, 0.125).with_tolerances(1e-12, 1e-11);
    let mdp = Mdp::build(m, &p).unwrap();
    let v = mdp.solve().unwrap();
    let pts = [(NetworkPoint::junction(), 3), (NetworkPoint::on(0, 0.5), 1), (NetworkPoint::on(2, 0.75), 0)];
    let rows = duality_report(&mdp, &v, &pts, 1_000_000).unwrap();
    let pd = rows.iter().map(|r| r.primal_dual_gap.abs()).fold(0.0, f64::max);
    let vg = rows.iter().map(|r| r.value_gap.abs()).fold(0.0, f64::max);
    ok &= pd <= 1e-8 && vg <= 1e-8;
    notes.push(format!("primal-dual {pd:.1e}, LP vs delta*v {vg:.1e}"));

    let line = micro_line();
    let lp = SchemeParams::for_model(&line, 0.5).with_tolerances(1e-13, 1e-12);
    let micro = Mdp::build(&line, &{
        let mut q = lp;
        q.n_a = 3;
        q
    })
    .unwrap();
    let mv = micro.solve().unwrap();
    let start = (NetworkPoint::on(0, 0.5), 0);
    let lrow = &duality_report(&micro, &mv, &[start], 100_000).unwrap()[0];
    let (enumerated, count) = enumerate_policies(&micro, micro.state(micro.grid.index(0, 1), 0));
    let enum_gap = (lrow.primal - micro.delta * enumerated).abs();
    ok &= enum_gap <= 1e-8 && count <= 20_000 && micro.n_nodes() == 5;
    notes.push(format!("enumeration of {count} policies vs LP {enum_gap:.1e}"));

    let greedy = random_feedback(Arc::new(traffic()), 5, 0.25, 0.05, 3);
    let phi: Vec<Vec<f64>> = (0..3)
        .map(|k| {
            (0..mdp.n_states())
                .map(|s| {
                    let (node, g) = mdp.split(s);
                    let r = mdp.grid.point(node).coord;
                    (std::f64::consts::PI * (k as f64 + 1.0) * r / 2.0).cos() * (1.0 + 0.25 * g as f64)
                })
                .collect()
        })
        .collect();
    let (_, combos) = occupation_row_residuals(&mdp, m, &greedy, &NetworkPoint::on(1, 0.4), 2, &phi, 2000, 12.0, 1e-3, 5).unwrap();
    // each combination has Lipschitz constant at most 1.25·3π/2
    let slack = 1.25 * 1.5 * std::f64::consts::PI * (p.dx + p.h);
    let worst = combos.iter().map(|c| c.residual.abs() - 3.0 * c.stderr).fold(f64::NEG_INFINITY, f64::max);
    ok &= worst <= slack;
    notes.push(format!("smooth rows within {worst:.2e} beyond 3 stderr (slack {slack:.2e})"));

    let mut perron = f64::NEG_INFINITY;
    for r in rungs {
        let tol = tol_sub(c_res, base, r.eps) + m.discount() * c_scheme * (p.dx + p.h);
        for (row, (x, g)) in rows.iter().zip(&pts) {
            perron = perron.max(m.discount() * r.w.value(x, *g) - row.dual - tol);
        }
    }
    ok &= perron <= 0.0;
    notes.push(format!("Perron slack {perron:.3e}"));
    (ok, notes.join("; "))
}

fn run_all(bin: &Path, config: &Path, out: &Path) {
    for cmd in ["audit", "solve", "simulate", "project", "extend", "linearize", "report"] {
        let status = Command::new(bin)
            .args([cmd, "--quiet", "--seed", "7", "--config"])
            .arg(config)
            .arg("--out")
            .arg(out)
            .env("PDMPNET_THREADS", "1")
            .status()
            .unwrap();
        assert!(status.success(), "{cmd} failed");
    }
}

fn determinism() -> Outcome {
    let root = std::env::temp_dir().join(format!("pdmpnet-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let config = root.join("config.json");
    std::fs::write(&config, r#"{"simulate": {"n_paths": 50, "horizon": 3.0}, "project": {"seeds": 8}}"#).unwrap();
    let bin = Path::new(env!("CARGO_BIN_EXE_pdmpnet"));
    let (a, b) = (root.join("a"), root.join("b"));
    run_all(bin, &config, &a);
    run_all(bin, &config, &b);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let differing: Vec<String> =
        names.iter().filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok()).map(|n| n.to_string_lossy().into_owned()).collect();
    let _ = std::fs::remove_dir_all(&root);
    (differing.is_empty() && names.len() >= 12, format!("{} files compared; differing: {differing:?}", names.len()))
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |k: usize, name: &'static str, o: Outcome| {
        println!("criterion {k:>2} {name}: {} ({})", if o.0 { "PASS" } else { "FAIL" }, o.1);
        results.push((k, name, o));
    };
    report(1, "simulator laws", simulator_laws());
    report(2, "flow accuracy", flow_accuracy());
    report(3, "bellman contraction", contraction());
    let mut c_scheme = 0.0;
    report(4, "dpp residual", dpp(&mut c_scheme));
    let mut c_res = 0.0;
    report(5, "hjb residual", hjb_ladder(&mut c_res));
    report(6, "projection exponents", projection_exponents());
    let m = traffic();
    let base = solve_value(&m, &SchemeParams::for_model(&m, LADDER_DX)).unwrap();
    let rungs = shaking_ladder(&m, &base);
    report(7, "shaking convergence", shaking_convergence(&rungs, &base, c_scheme));
    report(8, "subsolution suite", subsolutions(&m, &rungs, &base, c_res));
    report(9, "linearization", linearization(&m, &rungs, &base, c_res, c_scheme));
    report(10, "determinism", determinism());
    let failed: Vec<usize> = results.iter().filter(|r| !r.2 .0).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
