//! Constructive projection of controls: from one starting point to a nearby one on
//! the same edge, from the shaken extended model to an unshaken follower, and from
//! the extended network back to the base network. Every construction replays the
//! input control and repairs it with distinguished controls where a plain copy would
//! leave the network, so the outputs are open-loop schedules admissible by design.

use crate::error::{Error, Result};
use crate::model::{
    audit_assumptions, junction_branch, locally_admissible, shaking_scales, velocity, Control, ExtendedModel,
    PdmpModel, ShakenModel,
};
use crate::network::{geodesic_distance, Branches, ExtendedNetwork, NetworkPoint, StarNetwork};
use crate::scalar::Scalar;
use crate::simulate::{flow, random_feedback, record_schedule, run_constant, FlowArc, Policy, RngStream, Schedule, Stop};
use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::sync::Arc;

const TIME_TOL: f64 = 1e-12;
const EVENT_TOL: f64 = 1e-11;
/// Time beyond `t_ε` over which base projections are built and stay admissible.
const MARGIN: f64 = 1.0;
/// Control discretization used by the argmax chases and null-control searches.
const N_A: usize = 9;

/// A projected control. `schedule` is admissible from the projected start on
/// `[0, horizon]`; beyond it the last control is merely held.
#[derive(Debug, Clone)]
pub struct ProjectionResult<S: Scalar> {
    pub policy: Policy<S>,
    pub schedule: Schedule<S>,
    pub case_trace: Vec<String>,
    /// Starts and ends of the repaired stretches.
    pub splice_times: Vec<S>,
    /// Times at which a repaired follower met its target again.
    pub renewals: Vec<S>,
    pub horizon: S,
}

impl<S: Scalar> ProjectionResult<S> {
    fn from_schedule(schedule: Schedule<S>, case: &str, splice_times: Vec<S>, horizon: S) -> Self {
        ProjectionResult {
            policy: Policy::schedule(schedule.clone()),
            schedule,
            case_trace: vec![case.to_string()],
            splice_times,
            renewals: Vec::new(),
            horizon,
        }
    }
}

/// Signed coordinate along the line of `branch`: positive on it, negative elsewhere.
fn signed_coord<S: Scalar>(p: &NetworkPoint<S>, branch: usize) -> S {
    match p.edge {
        None => S::zero(),
        Some(b) if b == branch => p.coord,
        Some(_) => -p.coord,
    }
}

fn at_end<S: Scalar, G: Branches<S> + ?Sized>(net: &G, p: &NetworkPoint<S>) -> bool {
    p.edge.is_some_and(|b| p.coord >= net.length(b) - S::tol(1e-12))
}

/// Constant control for `dt`; the returned duration is the time actually flowed.
fn step<S, M>(model: &M, mode: usize, p: NetworkPoint<S>, u: &Control<S>, dt: S, h: S) -> Result<(NetworkPoint<S>, S, Stop)>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let (q, used, stop) = run_constant(model, p, mode, u, dt, h, |_, _| {})?;
    Ok((q, if stop == Stop::Elapsed { dt } else { used }, stop))
}

/// First time the constant control `u` from `p` brings the signed coordinate along
/// `branch` to `z`, searched on `[0, t_max]`.
fn time_to_reach<S, M>(
    model: &M,
    mode: usize,
    p: NetworkPoint<S>,
    u: &Control<S>,
    branch: usize,
    z: S,
    t_max: S,
    h: S,
) -> Result<Option<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let gap = |q: &NetworkPoint<S>| signed_coord(q, branch) - z;
    let g0 = gap(&p);
    if g0.abs() <= S::tol(1e-12) {
        return Ok(Some(S::zero()));
    }
    let side = g0 > S::zero();
    let crossed = |q: &NetworkPoint<S>| {
        let g = gap(q);
        g.abs() <= S::tol(1e-12) || (g > S::zero()) != side
    };
    let (mut t, mut x) = (S::zero(), p);
    while t_max - t > S::c(TIME_TOL) {
        let dt = h.min(t_max - t);
        let (x1, used, stop) = step(model, mode, x, u, dt, h)?;
        if crossed(&x1) {
            let (mut lo, mut hi) = (S::zero(), used);
            while hi - lo > S::c(EVENT_TOL) {
                let mid = S::c(0.5) * (lo + hi);
                if crossed(&step(model, mode, x, u, mid, h)?.0) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(Some(t + hi));
        }
        // an autonomous flow that does not move never will
        if x1 == x || (stop != Stop::Elapsed && used <= S::c(TIME_TOL)) {
            return Ok(None);
        }
        t = t + used;
        x = x1;
    }
    Ok(None)
}

/// Replays `sched` from `p` until the path reaches `O` or a branch end, or until `t_max`.
fn copy_until_boundary<S, M>(
    model: &M,
    mode: usize,
    p: NetworkPoint<S>,
    sched: &Schedule<S>,
    t_max: S,
    h: S,
) -> Result<(S, NetworkPoint<S>, Option<Stop>)>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let (mut t, mut x) = (S::zero(), p);
    while t_max - t > S::c(TIME_TOL) {
        let (u, end) = sched.at(t);
        let dt = end.min(t_max) - t;
        let (x1, used, stop) = step(model, mode, x, u, dt, h)?;
        if stop != Stop::Elapsed {
            return Ok((t + used, x1, Some(stop)));
        }
        t = t + used;
        x = x1;
    }
    Ok((t, x, None))
}

fn position_at<S, M>(model: &M, mode: usize, p: NetworkPoint<S>, sched: &Schedule<S>, t: S, h: S) -> Result<NetworkPoint<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    Ok(flow(model, mode, p, &Policy::schedule(sched.clone()), t, h)?.end())
}

fn first_junction_time<S: Scalar>(arc: &FlowArc<S>) -> Option<S> {
    arc.samples.iter().find(|s| s.t > S::zero() && s.x.is_junction()).map(|s| s.t)
}

/// `recorded` on `[0, t0)`, then `lead` for `s` (forever when `None`), then
/// `recorded` from `resume` on.
fn repair<S: Scalar>(recorded: &Schedule<S>, t0: S, lead: Control<S>, s: Option<S>, resume: S) -> (Schedule<S>, Vec<S>) {
    let rest = match s {
        Some(s) => recorded.tail(resume).delayed(s, lead),
        None => Schedule::constant(lead),
    };
    let splices = match s {
        Some(s) if s > S::zero() => vec![t0, t0 + s],
        Some(_) if resume == t0 => Vec::new(),
        _ => vec![t0],
    };
    (recorded.splice(t0, &rest), splices)
}

fn canonical_control<S, M>(model: &M, mode: usize, x: &NetworkPoint<S>) -> Result<Control<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let net = model.network();
    let missing = |what: &str| Error::MissingPrecondition(format!("no {what} control for the cycling schedule in mode {mode}"));
    match x.edge {
        None => {
            let n = net.branch_count();
            if let Some((j, a)) = (0..n)
                .filter(|&j| model.is_active(j, mode))
                .find_map(|j| model.controls(mode, j).plus.clone().map(|a| (j, a)))
            {
                return Ok(Control::new(a, j));
            }
            (0..n)
                .find_map(|j| model.controls(mode, j).zero.clone().map(|a| Control::new(a, j)))
                .ok_or_else(|| missing("rest"))
        }
        Some(j) => {
            let c = model.controls(mode, j);
            let a = if at_end(net, x) {
                c.endpoint.clone()
            } else if model.is_active(j, mode) {
                c.plus.clone()
            } else {
                c.minus.clone()
            };
            a.map(|a| Control::new(a, j)).ok_or_else(|| missing("distinguished"))
        }
    }
}

/// The cycling control spliced in after `t_ε`: out along an active branch with `a^+`,
/// back with the endpoint control, and on inactive branches `a^-` to `O`. Without an
/// active branch it rests at `O` with `a^0`.
pub fn canonical_schedule<S, M>(model: &M, mode: usize, p: NetworkPoint<S>, horizon: S, h: S) -> Result<Schedule<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let mut segments: Vec<(S, Control<S>)> = Vec::new();
    let (mut t, mut x) = (S::zero(), p);
    loop {
        let u = canonical_control(model, mode, &x)?;
        let left = horizon - t;
        if left <= S::c(TIME_TOL) {
            segments.push((S::infinity(), u));
            break;
        }
        let (x1, used, stop) = step(model, mode, x, &u, left, h)?;
        if used <= S::c(TIME_TOL) || stop == Stop::Elapsed {
            segments.push((S::infinity(), u));
            break;
        }
        segments.push((used, u));
        t = t + used;
        x = x1;
    }
    Schedule::new(merge(segments))
}

fn merge<S: Scalar>(segments: Vec<(S, Control<S>)>) -> Vec<(S, Control<S>)> {
    let mut out: Vec<(S, Control<S>)> = Vec::with_capacity(segments.len());
    for (d, u) in segments {
        match out.last_mut() {
            Some((dl, ul)) if *ul == u => *dl = *dl + d,
            _ => out.push((d, u)),
        }
    }
    out
}

/// Projects `α` from `x` to a nearby `y` on the same edge. The input must satisfy
/// `|x - y| ≤ ρ_ε^{2/(1-κ)}`, with `κ` taken as zero on active edges.
pub fn project_control<S, M>(
    model: &M,
    mode: usize,
    x: NetworkPoint<S>,
    y: NetworkPoint<S>,
    alpha: &Policy<S>,
    eps: S,
    h: S,
) -> Result<ProjectionResult<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let scales = shaking_scales(model, eps)?;
    let edge = common_edge(&x, &y)?;
    let kappa = match edge {
        Some(j) if model.is_active(j, mode) => S::zero(),
        _ => model.constants().kappa,
    };
    let radius = scales.base_radius(kappa);
    let d = geodesic_distance(&x, &y);
    if d > radius * (S::one() + S::c(1e-9)) {
        return Err(Error::ScaleViolated { distance: d.f64(), radius: radius.f64() });
    }
    project_unchecked(model, mode, x, y, alpha, scales.t_eps, h)
}

fn common_edge<S: Scalar>(x: &NetworkPoint<S>, y: &NetworkPoint<S>) -> Result<Option<usize>> {
    match (x.edge, y.edge) {
        (Some(a), Some(b)) if a != b => Err(Error::InvalidArgument("x and y must lie on one edge".into())),
        (a, b) => Ok(a.or(b)),
    }
}

/// The case machine without the radius check, for scaling studies beyond the radius.
pub fn project_unchecked<S, M>(
    model: &M,
    mode: usize,
    x: NetworkPoint<S>,
    y: NetworkPoint<S>,
    alpha: &Policy<S>,
    t_eps: S,
    h: S,
) -> Result<ProjectionResult<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let edge = common_edge(&x, &y)?;
    let horizon = t_eps + S::c(MARGIN);
    let recorded =
        record_schedule(model, mode, x, alpha, horizon, h).map_err(|e| Error::InadmissibleInput(e.to_string()))?;
    let Some(j) = edge.filter(|_| geodesic_distance(&x, &y) > S::zero()) else {
        return Ok(ProjectionResult {
            policy: alpha.clone(),
            schedule: recorded,
            case_trace: vec!["identity".into()],
            splice_times: Vec::new(),
            renewals: Vec::new(),
            horizon,
        });
    };
    let net = model.network();
    let c = model.controls(mode, j);
    let need = |a: &Option<Vec<S>>, name: &str| {
        a.clone()
            .map(|a| Control::new(a, j))
            .ok_or_else(|| Error::MissingPrecondition(format!("edge {j} has no {name} control in mode {mode}")))
    };
    let active = model.is_active(j, mode);
    let done = |(schedule, splices): (Schedule<S>, Vec<S>), case: &str| {
        Ok(ProjectionResult::from_schedule(schedule, case, splices, horizon))
    };

    if x.is_junction() {
        let lead = need(&c.minus, "a^-")?;
        let s = time_to_reach(model, mode, y, &lead, j, S::zero(), horizon, h)?;
        return done(repair(&recorded, S::zero(), lead, s, S::zero()), "(a)");
    }
    let target = flow(model, mode, x, &Policy::schedule(recorded.clone()), horizon, h)?;
    let t_xo = first_junction_time(&target);
    if y.is_junction() {
        if active {
            let lead = need(&c.plus, "a^+")?;
            let s = time_to_reach(model, mode, y, &lead, j, x.coord, horizon, h)?;
            return done(repair(&recorded, S::zero(), lead, s, S::zero()), "(b2)");
        }
        let lead = need(&c.zero, "a^0")?;
        return done(repair(&recorded, S::zero(), lead, t_xo, t_xo.unwrap_or(S::zero())), "(b1)");
    }
    if at_end(net, &y) {
        let lead = need(&c.endpoint, "endpoint")?;
        let s = time_to_reach(model, mode, y, &lead, j, x.coord, horizon, h)?;
        return done(repair(&recorded, S::zero(), lead, s, S::zero()), "(d)");
    }

    let (t_f, p_f, stop) = copy_until_boundary(model, mode, y, &recorded, t_eps, h)?;
    let t_x = t_xo.unwrap_or(S::infinity());
    if stop.is_none() && t_x >= t_eps {
        let alpha0 = canonical_schedule(model, mode, p_f, horizon - t_eps, h)?;
        return Ok(ProjectionResult::from_schedule(recorded.splice(t_eps, &alpha0), "(c1)", vec![t_eps], horizon));
    }
    if stop.is_none() || t_x <= t_f {
        let (_, p, _) = copy_until_boundary(model, mode, y, &recorded, t_x, h)?;
        let lead = need(&c.minus, "a^-")?;
        let s = time_to_reach(model, mode, p, &lead, j, S::zero(), horizon, h)?;
        return done(repair(&recorded, t_x, lead, s, t_x), "(c4)");
    }
    let z = signed_coord(&position_at(model, mode, x, &recorded, t_f, h)?, j);
    if p_f.is_junction() {
        if active {
            let lead = need(&c.plus, "a^+")?;
            let s = time_to_reach(model, mode, p_f, &lead, j, z, horizon, h)?;
            return done(repair(&recorded, t_f, lead, s, t_f), "(c3.1)");
        }
        let lead = need(&c.zero, "a^0")?;
        let wait = t_xo.map(|t| t - t_f);
        return done(repair(&recorded, t_f, lead, wait, t_x.min(horizon)), "(c3.2)");
    }
    let lead = need(&c.endpoint, "endpoint")?;
    let s = time_to_reach(model, mode, p_f, &lead, j, z, horizon, h)?;
    done(repair(&recorded, t_f, lead, s, t_f), "(c2)")
}

/// Sup gaps between two recorded paths on a common time grid: position (geodesic),
/// discounted partial cost, jump rate and jump distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceGap<S> {
    pub trajectory: S,
    pub cost: S,
    pub rate: S,
    pub jump: S,
}

impl<S: Scalar> TraceGap<S> {
    pub fn max(&self) -> S {
        self.trajectory.max(self.cost).max(self.rate).max(self.jump)
    }
}

/// Compares `arc_a` under `model_a` with `arc_b` under `model_b` on `[0, T]`. The
/// cost gap is `sup_t |∫_0^t e^{-δs} (l_a - l_b) ds|` by the trapezoid rule.
pub fn compare_traces<S, A, B>(
    model_a: &A,
    arc_a: &FlowArc<S>,
    model_b: &B,
    arc_b: &FlowArc<S>,
    horizon: S,
    dt: S,
) -> TraceGap<S>
where
    S: Scalar,
    A: PdmpModel<S> + ?Sized,
    B: PdmpModel<S> + ?Sized,
{
    let n = (horizon / dt).ceil().to_usize().unwrap_or(0).max(1);
    let delta = model_a.discount();
    let mut gap = TraceGap { trajectory: S::zero(), cost: S::zero(), rate: S::zero(), jump: S::zero() };
    let (mut integral, mut prev) = (S::zero(), None::<(S, S)>);
    for k in 0..=n {
        let t = (dt * S::c(k as f64)).min(horizon);
        let (pa, ua) = arc_a.at(t);
        let (pb, ub) = arc_b.at(t);
        gap.trajectory = gap.trajectory.max(geodesic_distance(&pa, &pb));
        let dl = (model_a.cost(&pa, arc_a.mode, ua) - model_b.cost(&pb, arc_b.mode, ub)) * (-delta * t).exp();
        if let Some((t0, d0)) = prev {
            integral = integral + S::c(0.5) * (t - t0) * (d0 + dl);
        }
        prev = Some((t, dl));
        gap.cost = gap.cost.max(integral.abs());
        gap.rate = gap.rate.max((model_a.rate(&pa, arc_a.mode, ua) - model_b.rate(&pb, arc_b.mode, ub)).abs());
        let qa = model_a.jump_row(&pa, arc_a.mode, ua);
        let qb = model_b.jump_row(&pb, arc_b.mode, ub);
        for (a, b) in qa.iter().zip(&qb) {
            gap.jump = gap.jump.max((*a - *b).abs());
        }
    }
    gap
}

/// One radius of an exponent study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentRow {
    pub radius: f64,
    pub sup_deviation: f64,
    pub cost_gap: f64,
    pub cases: BTreeMap<String, usize>,
}

/// Log-log fit of the sup-deviation against `|x - y|`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit in log space.
    pub residual: f64,
    pub rows: Vec<ExponentRow>,
    /// Case-(a) runs whose deviation or cost gap exceeded the explicit case-(a) bounds.
    pub case_a_violations: usize,
    pub case_a_runs: usize,
}

impl ExponentFit {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("radius,sup_deviation,cost_gap,cases\n");
        for r in &self.rows {
            let cases: Vec<String> = r.cases.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(&format!("{:.6e},{:.6e},{:.6e},{}\n", r.radius, r.sup_deviation, r.cost_gap, cases.join(";")));
        }
        out
    }
}

/// Least-squares slope, intercept and rms residual of `ys` against `xs`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    (slope, intercept, (rss / n).sqrt())
}

/// Projects random feedback controls between pairs at each radius on `edge` and fits
/// `log sup_t d_geo` against `log |x - y|`. Half of the pairs have an end at `O`, and
/// odd seeds swap the pair, so every case of the machine is exercised.
pub fn verify_projection_exponent<S, M>(
    model: Arc<M>,
    edge: usize,
    mode: usize,
    radii: &[S],
    seeds: usize,
    eps: S,
    h: S,
) -> Result<ExponentFit>
where
    S: Scalar,
    M: PdmpModel<S> + 'static,
{
    if radii.len() < 3 || radii.windows(2).any(|w| !(w[1] < w[0])) || radii.iter().any(|&r| !(r > S::zero() && r < S::one())) {
        return Err(Error::InvalidArgument("radii must be at least three decreasing values in (0, 1)".into()));
    }
    if edge >= model.network().branch_count() || seeds == 0 {
        return Err(Error::InvalidArgument("edge out of range or no seeds".into()));
    }
    let scales = shaking_scales(&*model, eps)?;
    let t_eps = scales.t_eps;
    let k = model.constants();
    let kappa = if model.is_active(edge, mode) { S::zero() } else { k.kappa };
    let one_minus = S::one() - kappa;
    let dev_factor = S::c(2.0) * k.f_bound / (one_minus * k.beta) + S::one();
    let cost_factor = S::c(4.0) * k.l_bound / (one_minus * k.beta);
    let (mut rows, mut violations, mut runs) = (Vec::new(), 0usize, 0usize);
    for (level, &r) in radii.iter().enumerate() {
        let mut row = ExponentRow { radius: r.f64(), sup_deviation: 0.0, cost_gap: 0.0, cases: BTreeMap::new() };
        for seed in 0..seeds as u64 {
            let mut rng = RngStream::new(seed, level as u64).rng();
            let anchor = if seed % 4 < 2 { S::zero() } else { S::c(rng.gen::<f64>()) * (S::one() - r) };
            let (mut x, mut y) = (NetworkPoint::on(edge, anchor), NetworkPoint::on(edge, anchor + r));
            if seed % 2 == 1 {
                std::mem::swap(&mut x, &mut y);
            }
            // cells long enough that the target outlasts the lead-in delays
            let alpha = random_feedback(model.clone(), 5, S::c(0.5), S::c(0.5), seed);
            let res = project_unchecked(&*model, mode, x, y, &alpha, t_eps, h)?;
            let target = flow(&*model, mode, x, &alpha, t_eps, h)?;
            let follower = flow(&*model, mode, y, &res.policy, t_eps, h)?;
            let gap = compare_traces(&*model, &target, &*model, &follower, t_eps, h);
            row.sup_deviation = row.sup_deviation.max(gap.trajectory.f64());
            row.cost_gap = row.cost_gap.max(gap.cost.f64());
            for case in &res.case_trace {
                *row.cases.entry(case.clone()).or_default() += 1;
            }
            if res.case_trace.first().map(String::as_str) == Some("(a)") {
                runs += 1;
                let scale = r.powf(one_minus);
                if gap.trajectory > dev_factor * scale || gap.cost > cost_factor * scale {
                    violations += 1;
                }
            }
        }
        rows.push(row);
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.radius.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.sup_deviation.ln()).collect();
    let (slope, intercept, residual) = fit_line(&xs, &ys);
    Ok(ExponentFit { slope, intercept, residual, rows, case_a_violations: violations, case_a_runs: runs })
}

/// A follower built against a recorded target path, with both paths and their gaps.
#[derive(Debug, Clone)]
pub struct Tracking<S: Scalar> {
    pub projection: ProjectionResult<S>,
    pub target: FlowArc<S>,
    pub follower: FlowArc<S>,
    pub gap: TraceGap<S>,
}

#[derive(Debug, Clone, PartialEq)]
enum Repair<S> {
    Copy,
    /// Argmax chase along `branch`, away from `O` or back from its end.
    Chase { branch: usize, outward: bool },
    Hold(Control<S>),
    Retreat(usize),
    /// Short excursion along `branch` turning at `turn`; `from_end` starts at the branch end.
    Trip { branch: usize, turn: S, back: bool, from_end: bool },
}

#[derive(Clone, Copy)]
enum Kind<'a, S> {
    /// Follower on the same extended network as the target.
    Extended,
    /// Follower on the base network under the target's extension.
    Restrict(&'a ExtendedNetwork<S>),
}

struct Track<S> {
    segments: Vec<(S, Control<S>)>,
    trace: Vec<String>,
    splices: Vec<S>,
    renewals: Vec<S>,
}

impl<S: Scalar> Track<S> {
    fn push(&mut self, d: S, u: &Control<S>) {
        if d <= S::zero() {
            return;
        }
        match self.segments.last_mut() {
            Some((dl, ul)) if ul == u => *dl = *dl + d,
            _ => self.segments.push((d, u.clone())),
        }
    }

    fn note(&mut self, label: &str) {
        self.trace.push(label.to_string());
    }
}

/// Copy of `u` usable at `p`, relabelled to the branch its junction drift enters.
fn copy_at<S, M>(model: &M, p: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> Option<Control<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    match p.edge {
        None => match junction_branch(model.network(), &model.drift(p, mode, u)) {
            Ok(None) => Some(u.clone()),
            Ok(Some((k, _))) if model.controls(mode, k).contains(&u.a) => Some(Control::new(u.a.clone(), k)),
            _ => None,
        },
        Some(_) => locally_admissible(model, p, mode, u).then(|| u.clone()),
    }
}

/// Control of `A^{γ,branch}` maximizing the speed away from `O` (or toward it), among
/// those usable at `p`.
fn chase_control<S, M>(model: &M, mode: usize, p: &NetworkPoint<S>, branch: usize, outward: bool) -> Result<Control<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let sign = if outward { S::one() } else { -S::one() };
    model
        .controls(mode, branch)
        .discretize(N_A)
        .into_iter()
        .map(|a| Control::new(a, branch))
        .filter(|u| match p.edge {
            None => matches!(junction_branch(model.network(), &model.drift(p, mode, u)), Ok(None)) || {
                matches!(junction_branch(model.network(), &model.drift(p, mode, u)), Ok(Some((k, _))) if k == branch)
            },
            Some(_) => locally_admissible(model, p, mode, u),
        })
        .map(|u| (sign * velocity(model, branch, p, mode, &u), u))
        .fold(None::<(S, Control<S>)>, |best, (v, u)| match best {
            Some((bv, _)) if bv >= v => best,
            _ => Some((v, u)),
        })
        .map(|(_, u)| u)
        .ok_or_else(|| Error::MissingPrecondition(format!("no usable control on branch {branch} in mode {mode}")))
}

/// A control with zero velocity at `p`, preferring `a^0` of `prefer`.
fn null_control<S, M>(model: &M, mode: usize, p: &NetworkPoint<S>, prefer: Option<usize>) -> Option<Control<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let net = model.network();
    let branches: Vec<usize> = match p.edge {
        Some(b) => vec![b],
        None => prefer.into_iter().chain(0..net.branch_count()).collect(),
    };
    let still = |u: &Control<S>| match p.edge {
        None => matches!(junction_branch(net, &model.drift(p, mode, u)), Ok(None)),
        Some(b) => velocity(model, b, p, mode, u).abs() <= S::tol(1e-12),
    };
    for &j in &branches {
        let c = model.controls(mode, j);
        let candidates = c.zero.iter().cloned().chain(c.discretize(N_A));
        for a in candidates {
            let u = Control::new(a, j);
            if still(&u) {
                return Some(u);
            }
        }
    }
    None
}

fn active_trip_branch<S, M>(model: &M, mode: usize) -> Option<usize>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    (0..model.network().branch_count())
        .find(|&j| model.is_active(j, mode) && model.controls(mode, j).plus.is_some() && model.controls(mode, j).minus.is_some())
}

fn distinguished<S: Scalar>(a: &Option<Vec<S>>, branch: usize, mode: usize, name: &str) -> Result<Control<S>> {
    a.clone()
        .map(|a| Control::new(a, branch))
        .ok_or_else(|| Error::MissingPrecondition(format!("branch {branch} has no {name} control in mode {mode}")))
}

/// Which repair starts when the copy fails at `p` with the target at `q`.
fn choose_repair<S, M>(model: &M, mode: usize, kind: Kind<'_, S>, p: &NetworkPoint<S>, q: &NetworkPoint<S>, t: S, trip: S) -> Result<(Repair<S>, &'static str)>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let net = model.network();
    let micro = |from_end: bool, branch: usize| Repair::Trip { branch, turn: t + trip, back: false, from_end };
    match (kind, p.edge) {
        (Kind::Extended, None) => match q.edge {
            Some(i) if model.is_active(i, mode) => Ok((Repair::Chase { branch: i, outward: true }, "case1")),
            Some(i) => match null_control(model, mode, p, Some(i)) {
                Some(u) => Ok((Repair::Hold(u), "case1")),
                None => active_trip_branch(model, mode)
                    .map(|b| (micro(false, b), "micro-trip"))
                    .ok_or_else(|| Error::MissingPrecondition("no way to stay near O".into())),
            },
            None => match active_trip_branch(model, mode) {
                Some(b) => Ok((micro(false, b), "micro-trip")),
                None => null_control(model, mode, p, None)
                    .map(|u| (Repair::Hold(u), "case1"))
                    .ok_or_else(|| Error::MissingPrecondition("no way to stay near O".into())),
            },
        },
        (Kind::Extended, Some(i)) if at_end(net, p) => Ok((Repair::Chase { branch: i, outward: false }, "case2")),
        (Kind::Extended, Some(i)) => Ok((Repair::Retreat(i), "case3")),
        (Kind::Restrict(_), None) => match null_control(model, mode, p, None) {
            Some(u) => Ok((Repair::Hold(u), "hold-O")),
            None => active_trip_branch(model, mode)
                .map(|b| (micro(false, b), "micro-trip"))
                .ok_or_else(|| Error::MissingPrecondition("no way to stay near O".into())),
        },
        (Kind::Restrict(_), Some(j)) if at_end(net, p) => match null_control(model, mode, p, Some(j)) {
            Some(u) => Ok((Repair::Hold(u), "hold-end")),
            None => Ok((micro(true, j), "micro-trip")),
        },
        (Kind::Restrict(xnet), Some(j)) => {
            let beyond_end = q.edge == Some(j) && !xnet.is_fictive(j) && q.coord > S::one();
            if beyond_end {
                Ok((Repair::Chase { branch: j, outward: true }, "hurry-end"))
            } else {
                Ok((Repair::Retreat(j), "hurry-O"))
            }
        }
    }
}

/// Comparison of follower and target along a common line, when they share one.
fn side<S: Scalar>(p: &NetworkPoint<S>, q: &NetworkPoint<S>) -> Option<bool> {
    let b = match (p.edge, q.edge) {
        (Some(a), Some(b)) if a != b => return None,
        (a, b) => a.or(b)?,
    };
    Some(signed_coord(p, b) > signed_coord(q, b))
}

/// Earliest meeting of the follower (constant `u` from `p`) with the target within
/// `[t, t + dt]`: distance below `tol` at the end, or a crossing located by bisection.
#[allow(clippy::too_many_arguments)]
fn meeting<S, M>(
    model: &M,
    mode: usize,
    p: NetworkPoint<S>,
    u: &Control<S>,
    target: &FlowArc<S>,
    t: S,
    dt: S,
    tol: S,
    h: S,
) -> Result<Option<(S, NetworkPoint<S>)>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let (p1, used, _) = step(model, mode, p, u, dt, h)?;
    let q0 = target.at(t).0;
    let q1 = target.at(t + used).0;
    let s0 = side(&p, &q0);
    let s1 = side(&p1, &q1);
    if let (Some(a), Some(b)) = (s0, s1) {
        if a != b {
            let (mut lo, mut hi) = (S::zero(), used);
            while hi - lo > S::c(EVENT_TOL) {
                let mid = S::c(0.5) * (lo + hi);
                let pm = step(model, mode, p, u, mid, h)?.0;
                if side(&pm, &target.at(t + mid).0) == Some(a) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Ok(Some((hi, step(model, mode, p, u, hi, h)?.0)));
        }
    }
    if geodesic_distance(&p1, &q1) < tol {
        return Ok(Some((used, p1)));
    }
    Ok(None)
}

/// Builds the follower step by step against the recorded target, aligned with the
/// target's sample times so that copied controls switch exactly when the target's do.
#[allow(clippy::too_many_arguments)]
fn track<S, M>(model: &M, mode: usize, x: NetworkPoint<S>, target: &FlowArc<S>, kind: Kind<'_, S>, r_prime: S, h: S) -> Result<Track<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let net = model.network();
    let horizon = target.t_end();
    let tol = S::c(1e-9).max(r_prime * S::c(1e-3));
    let trip = r_prime / (S::c(2.0) * model.constants().f_bound);
    let times: Vec<S> = target.samples.iter().map(|s| s.t).collect();
    let mut tr = Track { segments: Vec::new(), trace: vec!["copy".into()], splices: Vec::new(), renewals: Vec::new() };
    let (mut t, mut p, mut state) = (S::zero(), x, Repair::Copy);
    let mut stalls = 0usize;
    while horizon - t > S::c(TIME_TOL) {
        let (q, tu) = target.at(t);
        let k = times.partition_point(|&s| s <= t + S::c(TIME_TOL));
        let next = times.get(k).copied().unwrap_or(horizon).min(horizon);
        let dt = h.min(next - t).max(S::c(TIME_TOL));
        let u = match &state {
            Repair::Copy => {
                let label = match kind {
                    Kind::Restrict(xnet) => xnet.parent(tu.branch),
                    Kind::Extended => tu.branch,
                };
                let inside = match kind {
                    Kind::Restrict(xnet) => xnet.restrict(&q).is_some(),
                    Kind::Extended => true,
                };
                let copy = if inside { copy_at(model, &p, mode, &Control::new(tu.a.clone(), label)) } else { None };
                match copy {
                    Some(u) => u,
                    None => {
                        let (repair, label) = choose_repair(model, mode, kind, &p, &q, t, trip)?;
                        state = repair;
                        tr.note(label);
                        tr.splices.push(t);
                        continue;
                    }
                }
            }
            Repair::Chase { branch, outward } => chase_control(model, mode, &p, *branch, *outward)?,
            Repair::Hold(u) => u.clone(),
            Repair::Retreat(b) => distinguished(&model.controls(mode, *b).minus, *b, mode, "a^-")?,
            Repair::Trip { branch, back, from_end, .. } => {
                let c = model.controls(mode, *branch);
                match (*from_end, *back) {
                    (false, false) => distinguished(&c.plus, *branch, mode, "a^+")?,
                    (false, true) => distinguished(&c.minus, *branch, mode, "a^-")?,
                    (true, false) => distinguished(&c.endpoint, *branch, mode, "endpoint")?,
                    (true, true) => chase_control(model, mode, &p, *branch, true)?,
                }
            }
        };
        let dt = match &state {
            Repair::Trip { turn, back: false, .. } => dt.min(*turn - t).max(S::c(TIME_TOL)),
            _ => dt,
        };

        if state != Repair::Copy {
            if let Some((tau, pm)) = meeting(model, mode, p, &u, target, t, dt, tol, h)? {
                tr.push(tau, &u);
                t = t + tau;
                p = pm;
                state = Repair::Copy;
                tr.renewals.push(t);
                tr.splices.push(t);
                tr.note("renewal");
                stalls = 0;
                continue;
            }
        }
        let (p1, used, stop) = step(model, mode, p, &u, dt, h)?;
        tr.push(used, &u);
        if used <= S::c(TIME_TOL) {
            stalls += 1;
            if stalls > 4 {
                return Err(Error::LeftNetwork { branch: p.edge, t: t.f64() });
            }
        } else {
            stalls = 0;
        }
        t = t + used;
        p = p1;
        let leave = match &state {
            Repair::Copy | Repair::Hold(_) => false,
            Repair::Chase { branch, outward: true } => {
                let goal = match kind {
                    Kind::Restrict(_) => net.length(*branch) - S::tol(1e-12),
                    Kind::Extended => r_prime,
                };
                signed_coord(&p, *branch) >= goal
            }
            Repair::Chase { branch, outward: false } => signed_coord(&p, *branch) <= net.length(*branch) - r_prime,
            Repair::Retreat(_) => p.is_junction(),
            Repair::Trip { turn, back, from_end, .. } => {
                if !*back && t >= *turn - S::c(TIME_TOL) {
                    if let Repair::Trip { back, .. } = &mut state {
                        *back = true;
                    }
                    false
                } else if *back {
                    if *from_end {
                        at_end(net, &p)
                    } else {
                        p.is_junction()
                    }
                } else {
                    false
                }
            }
        };
        if leave || (state == Repair::Copy && stop == Stop::Blocked) {
            if state != Repair::Copy {
                tr.splices.push(t);
            }
            state = Repair::Copy;
        }
    }
    Ok(tr)
}

fn finish<S: Scalar>(tr: Track<S>, alpha: &Policy<S>, horizon: S) -> Result<ProjectionResult<S>> {
    let mut segments = tr.segments;
    if let Some(last) = segments.last_mut() {
        last.0 = S::infinity();
    }
    let schedule = Schedule::new(segments)?;
    let identity = tr.trace.len() == 1;
    Ok(ProjectionResult {
        policy: if identity { alpha.clone() } else { Policy::schedule(schedule.clone()) },
        schedule,
        case_trace: if identity { vec!["identity".into()] } else { tr.trace },
        splice_times: tr.splices,
        renewals: tr.renewals,
        horizon,
    })
}

/// Follower with zero shaking component for a shaken target started at `x`, tracked
/// on `[0, t_ε]`. The follower copies the target's control and repairs with argmax
/// chases (same branch), a retreat to `O` (different branches) and micro-trips at `O`.
pub fn project_control_extended<S, B>(
    shaken: &ShakenModel<S, ExtendedModel<S, B>>,
    mode: usize,
    x: NetworkPoint<S>,
    alpha: &Policy<S>,
    eps: S,
    h: S,
) -> Result<Tracking<S>>
where
    S: Scalar,
    B: PdmpModel<S, Net = StarNetwork<S>>,
{
    let net = shaken.network();
    if (net.epsilon() - eps).abs() > S::tol(1e-12) {
        return Err(Error::InvalidArgument(format!("epsilon {} differs from the network's {}", eps, net.epsilon())));
    }
    if !net.contains(&x, S::zero()) {
        return Err(Error::InvalidArgument("start point is not on the extended network".into()));
    }
    let base = shaken.inner().base();
    let scales = shaking_scales(base, eps)?;
    if shaken.rho() > scales.rho_ext * (S::one() + S::c(1e-9)) {
        return Err(Error::ScaleViolated { distance: shaken.rho().f64(), radius: scales.rho_ext.f64() });
    }
    let audit = audit_assumptions(base, 64, 0);
    if !audit.passed("C") {
        return Err(Error::AssumptionCViolated(format!("{:?}", audit.entry("C").map(|e| e.note.clone()))));
    }
    let horizon = scales.t_eps;
    let target = flow(shaken, mode, x, alpha, horizon, h).map_err(|e| Error::InadmissibleInput(e.to_string()))?;
    let tr = track(shaken, mode, x, &target, Kind::Extended, scales.r_prime, h)?;
    let projection = finish(tr, alpha, horizon)?;
    let follower = flow(shaken, mode, x, &projection.policy, horizon, h)?;
    let gap = compare_traces(shaken, &target, shaken, &follower, horizon, h);
    Ok(Tracking { projection, target, follower, gap })
}

/// Base-network follower for a target on the extended network started in `𝒢̄`. The
/// follower copies the target inside `𝒢̄`, waits at `O` (or at `e_j`) while the target
/// is on a fictive branch (or a prolongation), and resumes when they meet.
pub fn restrict_to_network<S, B>(
    extended: &ExtendedModel<S, B>,
    mode: usize,
    x: NetworkPoint<S>,
    alpha: &Policy<S>,
    horizon: S,
    h: S,
) -> Result<Tracking<S>>
where
    S: Scalar,
    B: PdmpModel<S, Net = StarNetwork<S>>,
{
    let xnet = extended.network();
    if xnet.restrict(&x).is_none() {
        let outside = match x.edge {
            Some(b) if xnet.is_fictive(b) => x.coord,
            _ => x.coord - S::one(),
        };
        return Err(Error::ScaleViolated { distance: outside.f64(), radius: 0.0 });
    }
    if !(horizon > S::zero() && horizon.is_finite()) {
        return Err(Error::InvalidArgument("horizon must be positive and finite".into()));
    }
    let base = extended.base();
    let scales = shaking_scales(base, xnet.epsilon())?;
    let target = flow(extended, mode, x, alpha, horizon, h).map_err(|e| Error::InadmissibleInput(e.to_string()))?;
    let tr = track(base, mode, x, &target, Kind::Restrict(xnet), scales.r_prime, h)?;
    let projection = finish(tr, alpha, horizon)?;
    let follower = flow(base, mode, x, &projection.policy, horizon, h)?;
    let gap = compare_traces(extended, &target, base, &follower, horizon, h);
    Ok(Tracking { projection, target, follower, gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{extend_dynamics, shake, traffic3_model, CoefficientModel, ModelBuilder};
    use crate::network::extend;
    use crate::simulate::random_shaken_feedback;

    fn t3() -> CoefficientModel<f64> {
        traffic3_model(0.1, 1.0, 1.0).unwrap()
    }

    fn on(e: usize, r: f64) -> NetworkPoint<f64> {
        NetworkPoint::on(e, r)
    }

    #[test]
    fn coincident_points_give_the_input_back() {
        let m = Arc::new(t3());
        let alpha = random_feedback(m.clone(), 5, 0.05, 0.05, 3);
        let res = project_control(&*m, 1, on(0, 0.3), on(0, 0.3), &alpha, 0.1, 1e-3).unwrap();
        assert_eq!(res.case_trace, vec!["identity".to_string()]);
        assert!(res.splice_times.is_empty());
        let a = flow(&*m, 1, on(0, 0.3), &alpha, 2.0, 1e-3).unwrap();
        let b = flow(&*m, 1, on(0, 0.3), &res.policy, 2.0, 1e-3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn radius_is_enforced() {
        let m = Arc::new(t3());
        let alpha = random_feedback(m.clone(), 5, 0.05, 0.05, 0);
        // inactive edge: radius 0.125^4 ≈ 2.44e-4
        let err = project_control(&*m, 1, on(0, 0.3), on(0, 0.3005), &alpha, 0.1, 1e-3).unwrap_err();
        assert!(matches!(err, Error::ScaleViolated { .. }));
        // active edge in mode 3: radius 0.125^2
        assert!(project_control(&*m, 3, on(0, 0.3), on(0, 0.31), &alpha, 0.1, 1e-3).is_ok());
        let err = project_control(&*m, 1, on(0, 0.3), on(1, 0.3), &alpha, 0.1, 1e-3).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn case_a_meets_its_explicit_bounds() {
        let m = Arc::new(t3());
        let k = m.constants().clone();
        let t_eps = shaking_scales(&*m, 0.1).unwrap().t_eps;
        for (seed, r) in [(0u64, 2.4e-4), (1, 1e-4), (2, 3e-5), (3, 1e-6)] {
            let alpha = random_feedback(m.clone(), 5, 0.05, 0.05, seed);
            let y = on(0, r);
            let res = project_control(&*m, 1, NetworkPoint::junction(), y, &alpha, 0.1, 1e-3).unwrap();
            assert_eq!(res.case_trace, vec!["(a)".to_string()]);
            // closed-form lead-in on the inactive edge: r(t) = (sqrt(r0) - t/2)^2
            let lead = res.splice_times[1];
            assert!((lead / (2.0 * r.sqrt()) - 1.0).abs() < 1e-3, "lead {lead}");
            let scale = r.powf(1.0 - k.kappa);
            assert!(lead <= scale / ((1.0 - k.kappa) * k.beta));
            let target = flow(&*m, 1, NetworkPoint::junction(), &alpha, t_eps, 1e-3).unwrap();
            let follower = flow(&*m, 1, y, &res.policy, t_eps, 1e-3).unwrap();
            let gap = compare_traces(&*m, &target, &*m, &follower, t_eps, 1e-3);
            let dev_bound = (2.0 * k.f_bound / ((1.0 - k.kappa) * k.beta) + 1.0) * scale;
            let cost_bound = 4.0 * k.l_bound * scale / ((1.0 - k.kappa) * k.beta);
            assert!(gap.trajectory <= dev_bound, "{} > {}", gap.trajectory, dev_bound);
            assert!(gap.cost <= cost_bound, "{} > {}", gap.cost, cost_bound);
        }
    }

    #[test]
    fn zero_drift_deviation_is_the_distance() {
        let m = Arc::new(ModelBuilder::new(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1).unwrap().build().unwrap());
        let fit = verify_projection_exponent(m, 0, 0, &[1e-2, 3e-3, 1e-3], 8, 0.1, 1e-2).unwrap();
        for row in &fit.rows {
            assert!((row.sup_deviation - row.radius).abs() < 1e-12, "{row:?}");
        }
        assert!((fit.slope - 1.0).abs() < 1e-9);
        assert!(fit.residual < 1e-9);
    }

    #[test]
    fn every_case_replays_without_leaving_the_network() {
        let m = Arc::new(t3());
        let t_eps = shaking_scales(&*m, 0.1).unwrap().t_eps;
        let mut seen = BTreeMap::new();
        for seed in 0..60u64 {
            let mut rng = RngStream::new(seed, 99).rng();
            let mode = (seed % 4) as usize;
            let edge = (seed / 4 % 3) as usize;
            let r = [1e-2, 1e-3, 1e-4][(seed % 3) as usize];
            let s = match seed % 5 {
                0 => 0.0,
                1 => 1.0 - r,
                _ => rng.gen::<f64>() * (1.0 - r),
            };
            let (mut x, mut y) = (on(edge, s), on(edge, s + r));
            if seed % 2 == 0 {
                std::mem::swap(&mut x, &mut y);
            }
            let alpha = random_feedback(m.clone(), 5, 0.05, 0.05, seed);
            let res = project_unchecked(&*m, mode, x, y, &alpha, t_eps, 1e-3).unwrap();
            assert!(!res.case_trace.is_empty());
            *seen.entry(res.case_trace[0].clone()).or_insert(0) += 1;
            flow(&*m, mode, y, &res.policy, res.horizon, 1e-3).unwrap();
        }
        for case in ["(a)", "(b1)", "(b2)", "(d)"] {
            assert!(seen.contains_key(case), "{seen:?}");
        }
        assert!(seen.keys().any(|k| k.starts_with("(c")), "{seen:?}");
    }

    #[test]
    fn projection_is_deterministic() {
        let m = Arc::new(t3());
        let run = || {
            let alpha = random_feedback(m.clone(), 5, 0.05, 0.05, 11);
            project_control(&*m, 3, on(1, 0.4), on(1, 0.41), &alpha, 0.1, 1e-3).unwrap().schedule
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn active_and_inactive_exponents() {
        let m = Arc::new(t3());
        let radii = [1e-2, 3e-3, 1e-3];
        let inactive = verify_projection_exponent(m.clone(), 0, 1, &radii, 12, 0.1, 1e-3).unwrap();
        assert!(inactive.slope >= 0.2, "{inactive:?}");
        assert_eq!(inactive.case_a_violations, 0);
        let active = verify_projection_exponent(m, 1, 3, &radii, 12, 0.1, 1e-3).unwrap();
        assert!(active.slope >= 0.45, "{active:?}");
        assert_eq!(active.case_a_violations, 0);
    }

    fn shaken_t3(eps: f64) -> ShakenModel<f64, ExtendedModel<f64, CoefficientModel<f64>>> {
        let m = t3();
        let xnet = extend(m.network(), eps).unwrap();
        let rho = shaking_scales(&m, eps).unwrap().rho_ext;
        shake(extend_dynamics(m, xnet).unwrap(), rho).unwrap()
    }

    #[test]
    fn unshaken_target_is_copied() {
        let sm = Arc::new(shaken_t3(0.1));
        let alpha = random_feedback(sm.clone(), 5, 0.05, 0.05, 4);
        let tr = project_control_extended(&*sm, 3, on(1, 0.5), &alpha, 0.1, 1e-3).unwrap();
        assert_eq!(tr.projection.case_trace, vec!["identity".to_string()]);
        assert_eq!(tr.gap.trajectory, 0.0);
    }

    #[test]
    fn shaken_targets_stay_within_the_extended_bound() {
        for eps in [0.2, 0.1] {
            let sm = Arc::new(shaken_t3(eps));
            let scales = shaking_scales(sm.inner().base(), eps).unwrap();
            let bound = scales.extended_bound(sm.constants().lip_f);
            for seed in 0..6u64 {
                let alpha = random_shaken_feedback(sm.clone(), 5, vec![-1.0, 0.0, 1.0], 0.05, 0.05, seed);
                let mode = (seed % 4) as usize;
                let x = on((seed % 3) as usize, 0.05 * seed as f64);
                let tr = project_control_extended(&*sm, mode, x, &alpha, eps, 1e-3).unwrap();
                assert!(tr.projection.schedule.segments.iter().all(|(_, u)| u.b == 0.0));
                assert!(tr.gap.trajectory <= bound, "eps {eps} seed {seed}: {:?}", tr.gap);
            }
        }
    }

    #[test]
    fn rho_above_the_extended_scale_is_rejected() {
        let m = t3();
        let xnet = extend(m.network(), 0.1).unwrap();
        let sm = Arc::new(shake(extend_dynamics(m, xnet).unwrap(), 0.09).unwrap());
        let alpha = random_feedback(sm.clone(), 5, 0.05, 0.05, 0);
        let err = project_control_extended(&*sm, 0, on(0, 0.5), &alpha, 0.1, 1e-3).unwrap_err();
        assert!(matches!(err, Error::ScaleViolated { .. }));
    }

    #[test]
    fn dip_into_a_fictive_branch_is_waited_out_at_the_junction() {
        let m = t3();
        let xnet = extend(m.network(), 0.1).unwrap();
        let em = extend_dynamics(m, xnet).unwrap();
        // mode 3: edge 0 active; its fictive branch is 3, frozen at O with speed 1
        let down = Control::new(vec![0.0, -1.0], 3);
        let up = Control::new(vec![0.0, 1.0], 3);
        let on_edge = Control::new(vec![0.0, 1.0], 0);
        let alpha = Policy::schedule(Schedule::new(vec![(0.05, down), (0.05, up), (f64::INFINITY, on_edge)]).unwrap());
        let tr = restrict_to_network(&em, 3, NetworkPoint::junction(), &alpha, 0.5, 1e-3).unwrap();
        assert_eq!(tr.projection.case_trace[1], "hold-O");
        assert!(tr.projection.renewals.iter().any(|&t| (t - 0.1).abs() < 1e-9), "{:?}", tr.projection.renewals);
        assert!((tr.gap.trajectory - 0.05).abs() < 1e-9 && tr.gap.trajectory <= 0.1);
        assert_eq!(tr.gap.rate, 0.0);
        assert_eq!(tr.gap.jump, 0.0);
        assert!(tr.follower.samples.iter().all(|s| s.x.edge.is_none_or(|e| e < 3 && s.x.coord <= 1.0)));
    }

    #[test]
    fn restriction_is_the_identity_inside_the_base_network() {
        let m = t3();
        let xnet = extend(m.network(), 0.1).unwrap();
        let em = extend_dynamics(m, xnet).unwrap();
        let alpha = Policy::schedule(Schedule::new(vec![(0.3, Control::new(vec![1.0, 0.0], 1)), (f64::INFINITY, Control::new(vec![-1.0, 0.0], 1))]).unwrap());
        let tr = restrict_to_network(&em, 3, NetworkPoint::junction(), &alpha, 1.0, 1e-3).unwrap();
        assert_eq!(tr.projection.case_trace, vec!["identity".to_string()]);
        assert_eq!(tr.gap.max(), 0.0);
    }

    #[test]
    fn prolongation_excursion_waits_at_the_endpoint() {
        let m = t3();
        let xnet = extend(m.network(), 0.1).unwrap();
        let em = extend_dynamics(m, xnet).unwrap();
        let out = Control::new(vec![1.0, 0.0], 1);
        let back = Control::new(vec![-1.0, 0.0], 1);
        let alpha = Policy::schedule(Schedule::new(vec![(0.55, out), (f64::INFINITY, back)]).unwrap());
        let tr = restrict_to_network(&em, 3, on(1, 0.5), &alpha, 1.0, 1e-3).unwrap();
        assert!(tr.projection.case_trace.iter().any(|c| c == "hold-end"), "{:?}", tr.projection.case_trace);
        assert!((tr.gap.trajectory - 0.05).abs() < 1e-6, "{:?}", tr.gap);
        let end = tr.follower.end();
        assert!((end.coord - 0.6).abs() < 1e-6 && end.edge == Some(1), "{end:?}");
    }
}
