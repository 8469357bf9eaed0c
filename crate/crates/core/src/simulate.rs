//! Constrained flow between jumps, thinning of jump times, post-jump mode draws and
//! Monte Carlo estimators of discounted costs and occupation measures.

use crate::error::{Error, Result};
use crate::model::{junction_branch, velocity, Control, PdmpModel};
use crate::network::{geodesic_distance, Branches, NetworkPoint};
use crate::scalar::Scalar;
use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

/// Time below which an interval is treated as empty.
const TIME_TOL: f64 = 1e-12;
/// Event localization tolerance in time.
const EVENT_TOL: f64 = 1e-10;
/// Distance to `O` below which a point without radial velocity is at the junction.
const SNAP_TOL: f64 = 1e-9;
/// Remaining hold below which an outward push at an endpoint is ignored.
const HOLD_SLACK: f64 = 1e-9;

/// Seeded generator contract: equal `(seed, stream_id)` pairs give equal draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

fn exp_draw<S: Scalar>(rng: &mut ChaCha8Rng, rate: S) -> S {
    if rate <= S::zero() {
        return S::infinity();
    }
    let u: f64 = rng.sample(Open01);
    S::c(-u.ln()) / rate
}

/// Piecewise-constant open-loop control. The last control is held forever.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule<S> {
    pub segments: Vec<(S, Control<S>)>,
}

impl<S: Scalar> Schedule<S> {
    pub fn new(segments: Vec<(S, Control<S>)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidArgument("empty schedule".into()));
        }
        if segments.iter().any(|(d, _)| !(*d > S::zero())) {
            return Err(Error::InvalidArgument("schedule durations must be positive".into()));
        }
        Ok(Schedule { segments })
    }

    pub fn constant(u: Control<S>) -> Self {
        Schedule { segments: vec![(S::infinity(), u)] }
    }

    /// Control in force at time `t` and the end of its segment.
    pub fn at(&self, t: S) -> (&Control<S>, S) {
        let mut end = S::zero();
        for (k, (d, u)) in self.segments.iter().enumerate() {
            end = end + *d;
            if t < end || k + 1 == self.segments.len() {
                let end = if k + 1 == self.segments.len() { S::infinity() } else { end };
                return (u, end);
            }
        }
        unreachable!("schedules are non-empty")
    }

    /// `lead` on `[0, d)` followed by `self` delayed by `d`.
    pub fn delayed(&self, d: S, lead: Control<S>) -> Self {
        let mut segments = Vec::with_capacity(self.segments.len() + 1);
        if d > S::zero() {
            segments.push((d, lead));
        }
        segments.extend(self.segments.iter().cloned());
        Schedule { segments }
    }

    /// `self` restricted to `[t, ∞)` and shifted back to start at zero.
    pub fn tail(&self, t: S) -> Self {
        let mut out = Vec::new();
        let mut start = S::zero();
        for (k, (d, u)) in self.segments.iter().enumerate() {
            let end = start + *d;
            let last = k + 1 == self.segments.len();
            if last {
                out.push((S::infinity(), u.clone()));
            } else if end > t {
                out.push((end - start.max(t), u.clone()));
            }
            start = end;
        }
        Schedule { segments: out }
    }

    /// `self` on `[0, t)` followed by `rest`.
    pub fn splice(&self, t: S, rest: &Schedule<S>) -> Self {
        let mut out = Vec::new();
        let mut start = S::zero();
        for (d, u) in &self.segments {
            if start >= t {
                break;
            }
            let end = (start + *d).min(t);
            if end > start {
                out.push((end - start, u.clone()));
            }
            start = start + *d;
        }
        out.extend(rest.segments.iter().cloned());
        Schedule { segments: out }
    }

    /// Times at which the control changes.
    pub fn switch_times(&self) -> Vec<S> {
        let mut t = S::zero();
        let mut out = Vec::new();
        for (d, _) in &self.segments[..self.segments.len() - 1] {
            t = t + *d;
            out.push(t);
        }
        out
    }
}

pub type ScheduleRule<S> = Arc<dyn Fn(&NetworkPoint<S>, usize) -> Schedule<S> + Send + Sync>;
pub type FeedbackRule<S> = Arc<dyn Fn(&NetworkPoint<S>, usize) -> Control<S> + Send + Sync>;

/// A policy restarts after every jump from the post-jump pair.
#[derive(Clone)]
pub enum Policy<S> {
    /// A schedule chosen from the starting pair, as `α(t; x, γ)`.
    OpenLoop(ScheduleRule<S>),
    /// Sample-and-hold feedback, re-decided every `hold` and at every boundary event.
    Feedback { rule: FeedbackRule<S>, hold: S },
}

impl<S: Scalar> Policy<S> {
    /// The same schedule from every starting pair.
    pub fn schedule(s: Schedule<S>) -> Self {
        Policy::OpenLoop(Arc::new(move |_, _| s.clone()))
    }

    pub fn feedback(rule: impl Fn(&NetworkPoint<S>, usize) -> Control<S> + Send + Sync + 'static, hold: S) -> Self {
        Policy::Feedback { rule: Arc::new(rule), hold }
    }
}

impl<S: Scalar> std::fmt::Debug for Policy<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::OpenLoop(_) => write!(f, "Policy::OpenLoop"),
            Policy::Feedback { hold, .. } => write!(f, "Policy::Feedback {{ hold: {hold} }}"),
        }
    }
}

/// One recorded state. `control` indexes the arc's control list and applies on the
/// interval that starts at this sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample<S> {
    pub t: S,
    pub x: NetworkPoint<S>,
    pub control: usize,
}

/// A deterministic stretch between jumps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowArc<S> {
    pub t_start: S,
    pub mode: usize,
    pub samples: Vec<Sample<S>>,
    pub controls: Vec<Control<S>>,
}

impl<S: Scalar> FlowArc<S> {
    fn new(t_start: S, mode: usize) -> Self {
        FlowArc { t_start, mode, samples: Vec::new(), controls: Vec::new() }
    }

    fn push(&mut self, t: S, x: NetworkPoint<S>, u: &Control<S>) {
        if let Some(last) = self.samples.last() {
            if last.t == t && last.x == x && self.controls.get(last.control) == Some(u) {
                return;
            }
        }
        if self.controls.last() != Some(u) {
            self.controls.push(u.clone());
        }
        self.samples.push(Sample { t, x, control: self.controls.len() - 1 });
    }

    pub fn t_end(&self) -> S {
        self.samples.last().map_or(self.t_start, |s| s.t)
    }

    pub fn end(&self) -> NetworkPoint<S> {
        self.samples.last().map_or_else(NetworkPoint::junction, |s| s.x)
    }

    /// Position and control at time `t`, by linear interpolation between samples.
    pub fn at(&self, t: S) -> (NetworkPoint<S>, &Control<S>) {
        let k = self.samples.partition_point(|s| s.t <= t).max(1) - 1;
        let a = &self.samples[k];
        let u = &self.controls[a.control];
        let Some(b) = self.samples.get(k + 1) else { return (a.x, u) };
        let span = b.t - a.t;
        if span <= S::zero() {
            return (a.x, u);
        }
        let w = ((t - a.t) / span).max(S::zero()).min(S::one());
        let edge = a.x.edge.or(b.x.edge);
        let ca = if a.x.edge == edge { a.x.coord } else { S::zero() };
        let cb = if b.x.edge == edge { b.x.coord } else { S::zero() };
        (edge.map_or_else(NetworkPoint::junction, |e| NetworkPoint::on(e, ca + w * (cb - ca))), u)
    }
}

/// A simulated path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory<S> {
    pub arcs: Vec<FlowArc<S>>,
    pub jump_times: Vec<S>,
    /// Post-jump pairs `(Y_i, Υ_i)`.
    pub postjump: Vec<(NetworkPoint<S>, usize)>,
    /// Time at which the path was truncated.
    pub horizon: S,
}

impl<S: Scalar> Trajectory<S> {
    pub fn end(&self) -> (NetworkPoint<S>, usize) {
        let arc = self.arcs.last().expect("trajectories have an arc");
        (arc.end(), arc.mode)
    }

    /// CSV rows `t,edge,coord,mode,control...`; the junction has edge `-1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,edge,coord,mode,control\n");
        for arc in &self.arcs {
            for s in &arc.samples {
                let edge = s.x.edge.map_or(-1, |e| e as i64);
                let u = &arc.controls[s.control];
                let a: Vec<String> = u.a.iter().map(|v| format!("{:.12e}", v.f64())).collect();
                out.push_str(&format!(
                    "{:.12e},{},{:.12e},{},{};{:.12e}\n",
                    s.t.f64(),
                    edge,
                    s.x.coord.f64(),
                    arc.mode,
                    a.join(";"),
                    u.b.f64()
                ));
            }
        }
        out
    }
}

/// Why a constant-control stretch ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stop {
    Elapsed,
    Junction,
    Endpoint,
    /// Drift leaves the network at the current point.
    Blocked,
}

/// Observer of integration steps.
trait Recorder<S: Scalar> {
    fn sample(&mut self, t: S, x: &NetworkPoint<S>, mode: usize, u: &Control<S>);
}

fn rk4<S: Scalar>(v: &impl Fn(S) -> S, r: S, dt: S, len: S) -> S {
    let clamp = |x: S| x.max(S::zero()).min(len);
    let half = S::c(0.5) * dt;
    let k1 = v(r);
    let k2 = v(clamp(r + half * k1));
    let k3 = v(clamp(r + half * k2));
    let k4 = v(clamp(r + dt * k3));
    clamp(r + dt / S::c(6.0) * (k1 + S::c(2.0) * (k2 + k3) + k4))
}

/// Integrates `r' = ⟨f(r e_b), e_b⟩` for up to `dt`, stopping at `0` or `len`.
fn run_edge<S, M>(
    model: &M,
    b: usize,
    r0: S,
    mode: usize,
    u: &Control<S>,
    dt: S,
    h: S,
    mut sink: impl FnMut(S, S),
) -> Result<(S, S, Stop)>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let len = model.network().length(b);
    let vel = |r: S| velocity(model, b, &NetworkPoint::on(b, r), mode, u);
    let (mut t, mut r) = (S::zero(), r0);
    let h_min = S::c(1e-13);
    loop {
        // inside the canonicalization band the drift is evaluated at `O`; just outside it a
        // drift transversal to `b` would otherwise hold the point off the junction forever
        if r > S::zero() && (NetworkPoint::on(b, r).is_junction() || (r <= S::c(SNAP_TOL) && vel(r).abs() <= S::c(TIME_TOL))) {
            sink(t, S::zero());
            return Ok((S::zero(), t, Stop::Junction));
        }
        let left = dt - t;
        if left <= S::c(TIME_TOL) {
            return Ok((r, t, Stop::Elapsed));
        }
        let v = vel(r);
        let gap = if v < S::zero() {
            r
        } else if v > S::zero() && r < len {
            len - r
        } else {
            S::infinity()
        };
        if gap.is_finite() {
            let hit = gap / v.abs();
            if hit <= S::c(EVENT_TOL) && hit <= left {
                t = t + hit;
                let (r1, stop) = if v < S::zero() { (S::zero(), Stop::Junction) } else { (len, Stop::Endpoint) };
                sink(t, r1);
                return Ok((r1, t, stop));
            }
        }
        let mut step = h.min(left);
        if gap.is_finite() {
            step = step.min((S::c(0.5) * gap / v.abs()).max(h_min));
        }
        let r1 = rk4(&vel, r, step, len);
        let to_zero = r1 <= S::zero() && r > S::zero();
        let to_end = r1 >= len && r < len;
        if r1 <= S::zero() && r <= S::zero() {
            // started at the junction and was pushed straight back
            return Ok((S::zero(), t, Stop::Junction));
        }
        if to_zero || to_end {
            let (mut lo, mut hi) = (S::zero(), step);
            let mut iterations = 0;
            while hi - lo > S::c(EVENT_TOL) {
                iterations += 1;
                if iterations > 100 {
                    return Err(Error::StalledEvent);
                }
                let mid = S::c(0.5) * (lo + hi);
                let rm = rk4(&vel, r, mid, len);
                if (to_zero && rm <= S::zero()) || (to_end && rm >= len) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            t = t + hi;
            let (r1, stop) = if to_zero { (S::zero(), Stop::Junction) } else { (len, Stop::Endpoint) };
            sink(t, r1);
            return Ok((r1, t, stop));
        }
        t = t + step;
        r = r1;
        sink(t, r);
    }
}

/// Integrates a constant control from `x` for up to `dt`.
pub(crate) fn run_constant<S, M>(
    model: &M,
    x: NetworkPoint<S>,
    mode: usize,
    u: &Control<S>,
    dt: S,
    h: S,
    mut sink: impl FnMut(S, NetworkPoint<S>),
) -> Result<(NetworkPoint<S>, S, Stop)>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let net = model.network();
    let (b, r0) = match x.edge {
        None => match junction_branch(net, &model.drift(&x, mode, u)) {
            Err(()) => return Ok((x, S::zero(), Stop::Blocked)),
            Ok(None) => return Ok((x, dt, Stop::Elapsed)),
            Ok(Some((b, _))) => (b, S::zero()),
        },
        Some(b) => {
            if x.coord >= net.length(b) - S::tol(1e-12) && velocity(model, b, &x, mode, u) > S::tol(1e-12) {
                return Ok((x, S::zero(), Stop::Blocked));
            }
            (b, x.coord)
        }
    };
    let (r, t, stop) = run_edge(model, b, r0, mode, u, dt, h, |t, r| sink(t, NetworkPoint::on(b, r)))?;
    if x.edge.is_none() && stop == Stop::Junction && t <= S::c(TIME_TOL) {
        // the branch pushes back immediately: the flow rests at the junction
        return Ok((x, dt, Stop::Elapsed));
    }
    Ok((NetworkPoint::on(b, r), t, stop))
}

/// Policy-driven flow in one mode; jumps are handled by the caller.
struct Driver<'a, S: Scalar, M: ?Sized> {
    model: &'a M,
    policy: &'a Policy<S>,
    h: S,
    mode: usize,
    x: NetworkPoint<S>,
    t: S,
    schedule: Option<(Schedule<S>, S)>,
    u: Control<S>,
    until: S,
}

impl<'a, S: Scalar, M: PdmpModel<S> + ?Sized> Driver<'a, S, M> {
    fn new(model: &'a M, policy: &'a Policy<S>, x: NetworkPoint<S>, mode: usize, t: S, h: S) -> Self {
        let mut d = Driver {
            model,
            policy,
            h,
            mode,
            x,
            t,
            schedule: None,
            u: Control::new(Vec::new(), 0),
            until: t,
        };
        d.restart();
        d
    }

    /// Starts the policy afresh from the current pair.
    fn restart(&mut self) {
        match self.policy {
            Policy::OpenLoop(rule) => {
                let s = rule(&self.x, self.mode);
                let (u, end) = s.at(S::zero());
                self.u = u.clone();
                self.until = self.t + end;
                self.schedule = Some((s, self.t));
            }
            Policy::Feedback { .. } => self.decide(),
        }
    }

    fn decide(&mut self) {
        match self.policy {
            Policy::Feedback { rule, hold } => {
                self.u = rule(&self.x, self.mode);
                self.until = self.t + *hold;
            }
            Policy::OpenLoop(_) => {
                let (s, start) = self.schedule.as_ref().expect("open-loop drivers carry a schedule");
                let (u, end) = s.at(self.t - *start);
                self.u = u.clone();
                self.until = *start + end;
            }
        }
    }

    fn advance(&mut self, target: S, rec: &mut impl Recorder<S>) -> Result<()> {
        let mut stalls = 0usize;
        while target - self.t > S::c(TIME_TOL) {
            if self.until - self.t <= S::c(TIME_TOL) {
                self.decide();
                rec.sample(self.t, &self.x, self.mode, &self.u);
            }
            let end = target.min(self.until);
            let (t0, mode, u) = (self.t, self.mode, self.u.clone());
            let (x, dt, stop) = run_constant(self.model, self.x, mode, &u, end - t0, self.h, |s, p| {
                rec.sample(t0 + s, &p, mode, &u)
            })?;
            self.x = x;
            self.t = if stop == Stop::Elapsed { end } else { t0 + dt };
            rec.sample(self.t, &self.x, self.mode, &self.u);
            if dt > S::c(TIME_TOL) {
                stalls = 0;
            }
            match stop {
                Stop::Elapsed => {}
                Stop::Junction | Stop::Endpoint => {
                    if let Policy::Feedback { .. } = self.policy {
                        self.decide();
                        rec.sample(self.t, &self.x, self.mode, &self.u);
                    }
                }
                Stop::Blocked => {
                    stalls += 1;
                    let feedback = matches!(self.policy, Policy::Feedback { .. });
                    if feedback && stalls == 1 {
                        self.decide();
                        rec.sample(self.t, &self.x, self.mode, &self.u);
                        continue;
                    }
                    let rest = self.until.min(target) - self.t;
                    if rest <= S::c(HOLD_SLACK) {
                        self.t = self.until.min(target);
                        rec.sample(self.t, &self.x, self.mode, &self.u);
                        continue;
                    }
                    return Err(Error::LeftNetwork { branch: self.x.edge, t: self.t.f64() });
                }
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Recorder<S> for FlowArc<S> {
    fn sample(&mut self, t: S, x: &NetworkPoint<S>, _mode: usize, u: &Control<S>) {
        self.push(t, *x, u);
    }
}

/// Deterministic arc on `[0, T]` in a frozen mode.
pub fn flow<S, M>(model: &M, mode: usize, x0: NetworkPoint<S>, policy: &Policy<S>, horizon: S, h: S) -> Result<FlowArc<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    if !(h > S::zero()) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let mut d = Driver::new(model, policy, x0, mode, S::zero(), h);
    let mut arc = FlowArc::new(S::zero(), mode);
    arc.push(S::zero(), x0, &d.u);
    d.advance(horizon, &mut arc)?;
    if arc.t_end() < horizon {
        arc.push(horizon, d.x, &d.u);
    }
    Ok(arc)
}

/// Outcome of thinning along a recorded arc.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum JumpDraw<S> {
    At { tau: S, x: NetworkPoint<S>, control: Control<S> },
    NoJumpWithinArc,
}

/// Thinning against the declared bound `|λ|_0` along a recorded arc.
pub fn sample_jump<S, M>(model: &M, arc: &FlowArc<S>, rng: &mut ChaCha8Rng) -> Result<JumpDraw<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let bound = model.constants().lambda_bound;
    let mut t = arc.t_start;
    loop {
        t = t + exp_draw(rng, bound);
        if !(t <= arc.t_end()) {
            return Ok(JumpDraw::NoJumpWithinArc);
        }
        let (x, u) = arc.at(t);
        let rate = model.rate(&x, arc.mode, u);
        check_rate(rate, bound)?;
        let accept: f64 = rng.gen();
        if S::c(accept) * bound < rate {
            return Ok(JumpDraw::At { tau: t, x, control: u.clone() });
        }
    }
}

fn check_rate<S: Scalar>(rate: S, bound: S) -> Result<()> {
    if rate > bound * S::c(1.0 + 1e-9) || rate < S::zero() {
        return Err(Error::RateBoundViolated { rate: rate.f64(), bound: bound.f64() });
    }
    Ok(())
}

/// Inverse-CDF draw from a row of `Q`, modes in declaration order.
fn draw_mode<S: Scalar>(row: &[S], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &q) in row.iter().enumerate() {
        if q > S::zero() {
            acc += q.f64();
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

/// Truncation rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StopRule<S> {
    pub horizon: S,
    /// Stop right after this many jumps.
    pub max_jumps: Option<usize>,
}

impl<S: Scalar> StopRule<S> {
    pub fn horizon(horizon: S) -> Self {
        StopRule { horizon, max_jumps: None }
    }

    pub fn jumps(horizon: S, n: usize) -> Self {
        StopRule { horizon, max_jumps: Some(n) }
    }
}

/// Runs the jump loop, reporting every sample and jump to the recorder.
fn run_path<S, M>(
    model: &M,
    x: NetworkPoint<S>,
    mode: usize,
    policy: &Policy<S>,
    stop: StopRule<S>,
    h: S,
    rng: &mut ChaCha8Rng,
    rec: &mut impl PathRecorder<S>,
) -> Result<()>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let bound = model.constants().lambda_bound;
    let mut d = Driver::new(model, policy, x, mode, S::zero(), h);
    rec.sample(S::zero(), &d.x, d.mode, &d.u);
    let mut jumps = 0usize;
    let allow = |n: usize| stop.max_jumps.is_none_or(|m| n < m);
    let mut candidate = if allow(0) { exp_draw(rng, bound) } else { S::infinity() };
    loop {
        let target = stop.horizon.min(candidate);
        d.advance(target, rec)?;
        if candidate > stop.horizon {
            return Ok(());
        }
        let rate = model.rate(&d.x, d.mode, &d.u);
        check_rate(rate, bound)?;
        let accept: f64 = rng.gen();
        if S::c(accept) * bound < rate {
            let row = model.jump_row(&d.x, d.mode, &d.u);
            let next = draw_mode(&row, rng.gen());
            rec.jump(d.t, &d.x, next);
            jumps += 1;
            d.mode = next;
            d.restart();
            rec.sample(d.t, &d.x, d.mode, &d.u);
            if !allow(jumps) {
                return Ok(());
            }
        }
        candidate = candidate + exp_draw(rng, bound);
    }
}

trait PathRecorder<S: Scalar>: Recorder<S> {
    fn jump(&mut self, t: S, y: &NetworkPoint<S>, mode: usize);
}

struct TrajectoryRecorder<S: Scalar> {
    traj: Trajectory<S>,
}

impl<S: Scalar> Recorder<S> for TrajectoryRecorder<S> {
    fn sample(&mut self, t: S, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) {
        if self.traj.arcs.is_empty() {
            self.traj.arcs.push(FlowArc::new(t, mode));
        }
        let arc = self.traj.arcs.last_mut().expect("arc pushed above");
        arc.push(t, *x, u);
        self.traj.horizon = t;
    }
}

impl<S: Scalar> PathRecorder<S> for TrajectoryRecorder<S> {
    fn jump(&mut self, t: S, y: &NetworkPoint<S>, mode: usize) {
        self.traj.jump_times.push(t);
        self.traj.postjump.push((*y, mode));
        self.traj.arcs.push(FlowArc::new(t, mode));
    }
}

/// One path of the controlled switched process.
pub fn simulate<S, M>(
    model: &M,
    x: NetworkPoint<S>,
    mode: usize,
    policy: &Policy<S>,
    stop: StopRule<S>,
    h: S,
    stream: RngStream,
) -> Result<Trajectory<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let mut rng = stream.rng();
    let mut rec = TrajectoryRecorder {
        traj: Trajectory { arcs: Vec::new(), jump_times: Vec::new(), postjump: Vec::new(), horizon: S::zero() },
    };
    run_path(model, x, mode, policy, stop, h, &mut rng, &mut rec)?;
    Ok(rec.traj)
}

/// `∫_a^{a+H} e^{-δt} (l_0 + (l_1 - l_0)(t - a)/H) dt`, exact in the discount factor.
pub(crate) fn discounted_linear<S: Scalar>(delta: S, a: S, span: S, l0: S, l1: S) -> S {
    let x = delta * span;
    let (flat, ramp) = if x < S::c(1e-3) {
        (S::one() - x / S::c(2.0) + x * x / S::c(6.0), S::c(0.5) - x / S::c(3.0) + x * x / S::c(8.0))
    } else {
        ((S::one() - (-x).exp()) / x, (S::one() - (-x).exp() * (S::one() + x)) / (x * x))
    };
    (-delta * a).exp() * span * (l0 * flat + (l1 - l0) * ramp)
}

/// Discounted running cost along a path: the cost is interpolated linearly between
/// recorded samples, with the left sample's control and mode on each interval.
struct CostRecorder<'a, S: Scalar, M: ?Sized> {
    model: &'a M,
    delta: S,
    total: S,
    prev: Option<(S, NetworkPoint<S>, usize, Control<S>)>,
}

impl<'a, S: Scalar, M: PdmpModel<S> + ?Sized> Recorder<S> for CostRecorder<'a, S, M> {
    fn sample(&mut self, t: S, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) {
        if let Some((tp, xp, mp, up)) = &self.prev {
            let span = t - *tp;
            if span > S::zero() {
                let l0 = self.model.cost(xp, *mp, up);
                let l1 = self.model.cost(x, *mp, up);
                self.total = self.total + discounted_linear(self.delta, *tp, span, l0, l1);
            }
        }
        self.prev = Some((t, *x, mode, u.clone()));
    }
}

impl<'a, S: Scalar, M: PdmpModel<S> + ?Sized> PathRecorder<S> for CostRecorder<'a, S, M> {
    fn jump(&mut self, _: S, _: &NetworkPoint<S>, _: usize) {}
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// Bound on the neglected tail `|l|_0 e^{-δT}/δ`.
    pub tail_bound: f64,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Partial cost `∫_0^{T∧τ} e^{-δt} l dt` and the state at `T∧τ`, where `τ` is the
/// `max_jumps`-th jump.
pub fn path_cost<S, M>(
    model: &M,
    x: NetworkPoint<S>,
    mode: usize,
    policy: &Policy<S>,
    stop: StopRule<S>,
    h: S,
    stream: RngStream,
) -> Result<(S, S, NetworkPoint<S>, usize)>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let mut rng = stream.rng();
    let mut rec = CostRecorder { model, delta: model.discount(), total: S::zero(), prev: None };
    run_path(model, x, mode, policy, stop, h, &mut rng, &mut rec)?;
    let (t, xe, me, _) = rec.prev.expect("paths record their start");
    Ok((rec.total, t, xe, me))
}

/// Mean discounted cost over `n_paths` independent paths truncated at `t_trunc`.
/// Path `i` draws from stream `i` of `seed`.
pub fn mc_cost<S, M>(
    model: &M,
    x: NetworkPoint<S>,
    mode: usize,
    policy: &Policy<S>,
    n_paths: usize,
    t_trunc: S,
    h: S,
    seed: u64,
) -> Result<McEstimate>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let costs = (0..n_paths)
        .into_par_iter()
        .map(|i| path_cost(model, x, mode, policy, StopRule::horizon(t_trunc), h, RngStream::new(seed, i as u64)).map(|c| c.0.f64()))
        .collect::<Result<Vec<f64>>>()?;
    let (estimate, stderr) = mean_stderr(&costs);
    let delta = model.discount().f64();
    let tail_bound = model.constants().l_bound.f64() * (-delta * t_trunc.f64()).exp() / delta;
    Ok(McEstimate { estimate, stderr, tail_bound })
}

/// Integrand `g(x, mode, u)` with one component per estimated functional.
pub type Integrand<'a, S> = &'a (dyn Fn(&NetworkPoint<S>, usize, &Control<S>) -> Vec<f64> + Sync);

struct IntegralRecorder<'a, S: Scalar> {
    delta: S,
    g: Integrand<'a, S>,
    total: Vec<f64>,
    prev: Option<(S, NetworkPoint<S>, usize, Control<S>, Vec<f64>)>,
}

impl<'a, S: Scalar> Recorder<S> for IntegralRecorder<'a, S> {
    fn sample(&mut self, t: S, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) {
        if let Some((tp, _, mp, up, g0)) = &self.prev {
            let span = t - *tp;
            if span > S::zero() {
                let g1 = (self.g)(x, *mp, up);
                for (k, tot) in self.total.iter_mut().enumerate() {
                    *tot += discounted_linear(self.delta, *tp, span, S::c(g0[k]), S::c(g1[k])).f64();
                }
            }
        }
        let g = (self.g)(x, mode, u);
        self.prev = Some((t, *x, mode, u.clone(), g));
    }
}

impl<'a, S: Scalar> PathRecorder<S> for IntegralRecorder<'a, S> {
    fn jump(&mut self, _: S, _: &NetworkPoint<S>, _: usize) {}
}

/// `E ∫_0^T e^{-δt} g(X_t, Γ_t, u_t) dt` per component of `g`, over `n_paths` paths
/// on streams `0..n_paths` of `seed`.
pub fn mc_discounted<S, M>(
    model: &M,
    x: NetworkPoint<S>,
    mode: usize,
    policy: &Policy<S>,
    g: Integrand<'_, S>,
    n_paths: usize,
    t_trunc: S,
    h: S,
    seed: u64,
) -> Result<Vec<McEstimate>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let dim = g(&x, mode, &Control::new(vec![S::zero(); model.network().dim()], 0)).len();
    let per_path = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, i as u64).rng();
            let mut rec = IntegralRecorder { delta: model.discount(), g, total: vec![0.0; dim], prev: None };
            run_path(model, x, mode, policy, StopRule::horizon(t_trunc), h, &mut rng, &mut rec)?;
            Ok(rec.total)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let delta = model.discount().f64();
    Ok((0..dim)
        .map(|k| {
            let xs: Vec<f64> = per_path.iter().map(|p| p[k]).collect();
            let (estimate, stderr) = mean_stderr(&xs);
            McEstimate { estimate, stderr, tail_bound: (-delta * t_trunc.f64()).exp() / delta }
        })
        .collect())
}

/// Discounted occupation measure over caller-defined cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupationMeasure {
    pub weights: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `e^{-δT}`: mass not covered by the truncated paths.
    pub deficit: f64,
    pub n_paths: usize,
}

impl OccupationMeasure {
    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Nonzero atoms as `(cell, weight)` pairs.
    pub fn atoms(&self) -> Vec<(usize, f64)> {
        self.weights.iter().copied().enumerate().filter(|(_, w)| *w != 0.0).collect()
    }

    /// Weighted sum `Σ w_k g_k` with its standard error, from the per-path sums.
    pub fn integrate(&self, per_path: &[Vec<(usize, f64)>], g: &[f64]) -> (f64, f64) {
        let sums: Vec<f64> = per_path.iter().map(|p| p.iter().map(|&(k, w)| w * g[k]).sum()).collect();
        mean_stderr(&sums)
    }
}

struct OccupationRecorder<'a, S: Scalar, F> {
    delta: S,
    cell: &'a F,
    acc: Vec<(usize, f64)>,
    prev: Option<(S, NetworkPoint<S>, usize, Control<S>)>,
}

impl<'a, S: Scalar, F: Fn(&NetworkPoint<S>, usize, &Control<S>) -> usize> Recorder<S> for OccupationRecorder<'a, S, F> {
    fn sample(&mut self, t: S, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) {
        if let Some((tp, xp, mp, up)) = &self.prev {
            if t > *tp {
                let w = (-self.delta * *tp).exp() - (-self.delta * t).exp();
                self.acc.push(((self.cell)(xp, *mp, up), w.f64()));
            }
        }
        self.prev = Some((t, *x, mode, u.clone()));
    }
}

impl<'a, S: Scalar, F: Fn(&NetworkPoint<S>, usize, &Control<S>) -> usize> PathRecorder<S> for OccupationRecorder<'a, S, F> {
    fn jump(&mut self, _: S, _: &NetworkPoint<S>, _: usize) {}
}

/// `δ ∫ e^{-δt} 1{cell} dt` averaged over paths. Each interval between recorded
/// samples is credited to the cell of its left end. Returns the per-path sparse
/// contributions as well, for standard errors of derived integrals.
pub fn mc_occupation<S, M, F>(
    model: &M,
    x: NetworkPoint<S>,
    mode: usize,
    policy: &Policy<S>,
    n_paths: usize,
    t_trunc: S,
    h: S,
    n_cells: usize,
    cell: &F,
    seed: u64,
) -> Result<(OccupationMeasure, Vec<Vec<(usize, f64)>>)>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
    F: Fn(&NetworkPoint<S>, usize, &Control<S>) -> usize + Sync,
{
    let delta = model.discount();
    let per_path = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, i as u64).rng();
            let mut rec = OccupationRecorder { delta, cell, acc: Vec::new(), prev: None };
            run_path(model, x, mode, policy, StopRule::horizon(t_trunc), h, &mut rng, &mut rec)?;
            let mut acc = rec.acc;
            acc.sort_by_key(|a| a.0);
            let mut merged: Vec<(usize, f64)> = Vec::new();
            for (k, w) in acc {
                match merged.last_mut() {
                    Some(last) if last.0 == k => last.1 += w,
                    _ => merged.push((k, w)),
                }
            }
            Ok(merged)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = n_paths as f64;
    let mut sum = vec![0.0; n_cells];
    let mut sq = vec![0.0; n_cells];
    for p in &per_path {
        for &(k, w) in p {
            sum[k] += w;
            sq[k] += w * w;
        }
    }
    let weights: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stderr = weights
        .iter()
        .zip(&sq)
        .map(|(m, s)| if n > 1.0 { ((s / n - m * m).max(0.0) / (n - 1.0)).sqrt() } else { 0.0 })
        .collect();
    let deficit = (-delta.f64() * t_trunc.f64()).exp();
    Ok((OccupationMeasure { weights, stderr, deficit, n_paths }, per_path))
}

/// Discrete controls usable at `x`: `A^{γ,j}` on branch `j` (inward only at the end),
/// and at the junction every `a ∈ A^{γ,j}` whose drift points along `e_j` or vanishes.
pub fn admissible_controls<S, M>(model: &M, x: &NetworkPoint<S>, mode: usize, n_a: usize, b_grid: &[S]) -> Vec<Control<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let net = model.network();
    let branches: Vec<usize> = match x.edge {
        Some(b) => vec![b],
        None => (0..net.branch_count()).collect(),
    };
    let bs: Vec<S> = if model.shake_radius() > S::zero() && !b_grid.is_empty() { b_grid.to_vec() } else { vec![S::zero()] };
    let mut out = Vec::new();
    for j in branches {
        for a in model.controls(mode, j).discretize(n_a) {
            for &b in &bs {
                let u = Control::shaken(a.clone(), b, j);
                let ok = match x.edge {
                    None => match junction_branch(net, &model.drift(x, mode, &u)) {
                        Ok(None) => true,
                        Ok(Some((k, _))) => k == j,
                        Err(()) => false,
                    },
                    Some(_) => x.coord < net.length(j) - S::tol(1e-12) || velocity(model, j, x, mode, &u) <= S::tol(1e-12),
                };
                if ok {
                    out.push(u);
                }
            }
        }
    }
    out
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stationary random feedback: a fixed random choice among the admissible discrete
/// controls per (branch, cell of width `cell`, mode), drawn from `seed`.
pub fn random_feedback<S, M>(model: Arc<M>, n_a: usize, cell: S, hold: S, seed: u64) -> Policy<S>
where
    S: Scalar,
    M: PdmpModel<S> + 'static,
{
    random_shaken_feedback(model, n_a, Vec::new(), cell, hold, seed)
}

/// [`random_feedback`] drawing the shaking component from `b_grid` as well.
pub fn random_shaken_feedback<S, M>(model: Arc<M>, n_a: usize, b_grid: Vec<S>, cell: S, hold: S, seed: u64) -> Policy<S>
where
    S: Scalar,
    M: PdmpModel<S> + 'static,
{
    Policy::feedback(
        move |x, mode| {
            let options = admissible_controls(&*model, x, mode, n_a, &b_grid);
            let k = (x.coord / cell).floor().to_i64().unwrap_or(0) as u64;
            let branch = x.edge.map_or(u64::MAX, |e| e as u64);
            let key = splitmix(seed ^ splitmix(branch ^ splitmix(k ^ splitmix(mode as u64))));
            options[(key % options.len().max(1) as u64) as usize].clone()
        },
        hold,
    )
}

/// Replays a policy in a frozen mode and records the applied controls as a schedule.
pub fn record_schedule<S, M>(model: &M, mode: usize, x0: NetworkPoint<S>, policy: &Policy<S>, horizon: S, h: S) -> Result<Schedule<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let arc = flow(model, mode, x0, policy, horizon, h)?;
    let mut segments: Vec<(S, Control<S>)> = Vec::new();
    let mut start = S::zero();
    let mut current = arc.samples[0].control;
    for s in &arc.samples[1..] {
        if s.control != current {
            if s.t > start {
                segments.push((s.t - start, arc.controls[current].clone()));
                start = s.t;
            }
            current = s.control;
        }
    }
    segments.push((S::infinity(), arc.controls[current].clone()));
    Ok(Schedule { segments })
}

/// `sup_t d_geo` between two arcs sampled on a common time grid of step `dt` over `[0, T]`.
pub fn sup_distance<S: Scalar>(a: &FlowArc<S>, b: &FlowArc<S>, horizon: S, dt: S) -> S {
    let n = (horizon / dt).ceil().to_usize().unwrap_or(0);
    (0..=n)
        .map(|k| {
            let t = (dt * S::c(k as f64)).min(horizon);
            geodesic_distance(&a.at(t).0, &b.at(t).0)
        })
        .fold(S::zero(), S::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{traffic3_model, ModelBuilder};

    fn t3() -> crate::model::CoefficientModel<f64> {
        traffic3_model(0.1, 1.0, 1.0).unwrap()
    }

    #[test]
    fn unit_speed_from_junction() {
        let m = t3();
        let p = Policy::schedule(Schedule::constant(Control::new(vec![1.0, 0.0], 1)));
        let arc = flow(&m, 3, NetworkPoint::junction(), &p, 0.5, 1e-3).unwrap();
        let end = arc.end();
        assert_eq!(end.edge, Some(1));
        assert!((end.coord - 0.5).abs() < 1e-12);
    }

    #[test]
    fn square_root_clearing_then_rest() {
        let m = t3();
        let p = Policy::schedule(Schedule::constant(Control::new(vec![0.0, 1.0], 0)));
        let arc = flow(&m, 1, NetworkPoint::on(0, 0.25), &p, 1.5, 1e-3).unwrap();
        let mut worst: f64 = 0.0;
        for s in &arc.samples {
            let exact = if s.t < 1.0 { (0.5 - s.t / 2.0).powi(2) } else { 0.0 };
            worst = worst.max((s.x.coord - exact).abs());
        }
        assert!(worst <= 1e-8, "{worst}");
        assert!(arc.end().is_junction());
    }

    #[test]
    fn arrival_at_the_junction_mid_segment_continues_on_the_next_branch() {
        let m = t3();
        let s = Schedule::new(vec![
            (0.1, Control::new(vec![0.0, 1.0], 0)),
            (f64::INFINITY, Control::new(vec![1.0, 0.0], 1)),
        ])
        .unwrap();
        let arc = flow(&m, 1, NetworkPoint::on(0, 0.0026), &Policy::schedule(s), 0.2, 1e-3).unwrap();
        let end = arc.end();
        assert_eq!(end.edge, Some(1));
        assert!(end.coord > 0.09, "{end:?}");
    }

    #[test]
    fn transversal_drift_next_to_the_junction_leaves_along_its_branch() {
        let m = t3();
        let p = Policy::schedule(Schedule::constant(Control::new(vec![0.0, 1.0], 0)));
        let arc = flow(&m, 3, NetworkPoint::on(1, 5e-12), &p, 0.3, 1e-3).unwrap();
        let end = arc.end();
        assert_eq!(end.edge, Some(0));
        assert!((end.coord - 0.3).abs() < 1e-9, "{end:?}");
    }

    #[test]
    fn zero_drift_is_static() {
        let m = ModelBuilder::<f64>::new(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1).unwrap().build().unwrap();
        let p = Policy::schedule(Schedule::constant(Control::new(vec![0.0, 0.0], 0)));
        let arc = flow(&m, 0, NetworkPoint::on(0, 0.3), &p, 2.0, 1e-2).unwrap();
        assert!(arc.samples.iter().all(|s| s.x == NetworkPoint::on(0, 0.3)));
    }

    #[test]
    fn outward_push_at_endpoint_is_rejected() {
        let m = t3();
        let p = Policy::schedule(Schedule::constant(Control::new(vec![0.0, 1.0], 0)));
        let err = flow(&m, 3, NetworkPoint::on(0, 0.9), &p, 1.0, 1e-3).unwrap_err();
        assert!(matches!(err, Error::LeftNetwork { branch: Some(0), .. }));
    }

    #[test]
    fn schedule_editing() {
        let u = |k: usize| Control::new(vec![k as f64], 0);
        let s = Schedule::new(vec![(1.0, u(0)), (2.0, u(1)), (1.0, u(2))]).unwrap();
        assert_eq!(s.at(0.5).0, &u(0));
        assert_eq!(s.at(2.5), (&u(1), 3.0));
        assert_eq!(s.at(10.0).1, f64::INFINITY);
        assert_eq!(s.switch_times(), vec![1.0, 3.0]);
        let t = s.tail(2.0);
        assert_eq!(t.segments[0], (1.0, u(1)));
        assert_eq!(t.segments[1].1, u(2));
        let d = s.delayed(0.5, u(9));
        assert_eq!(d.at(0.2).0, &u(9));
        assert_eq!(d.at(1.2).0, &u(0));
        let sp = s.splice(1.5, &Schedule::constant(u(7)));
        assert_eq!(sp.segments.len(), 3);
        assert_eq!(sp.at(1.6).0, &u(7));
        assert!(Schedule::<f64>::new(vec![(0.0, u(0))]).is_err());
    }

    #[test]
    fn no_jumps_without_rate() {
        let m = ModelBuilder::<f64>::new(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2).unwrap().build().unwrap();
        let p = Policy::schedule(Schedule::constant(Control::new(vec![0.0, 0.0], 0)));
        let tr = simulate(&m, NetworkPoint::junction(), 0, &p, StopRule::horizon(5.0), 1e-2, RngStream::new(1, 0)).unwrap();
        assert!(tr.jump_times.is_empty());
        assert_eq!(tr.arcs.len(), 1);
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| RngStream::new(3, 1).rng().gen()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let b: u64 = RngStream::new(3, 2).rng().gen();
        assert_ne!(a[0], b);
    }

    #[test]
    fn mode_draw_follows_declaration_order() {
        let row = [0.0, 0.25, 0.0, 0.75];
        assert_eq!(draw_mode(&row, 0.1), 1);
        assert_eq!(draw_mode(&row, 0.3), 3);
        assert_eq!(draw_mode(&row, 0.999_999), 3);
    }

    fn constant_rate(rate: f64, bound: f64) -> crate::model::CoefficientModel<f64> {
        let mut b = ModelBuilder::<f64>::new(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2).unwrap();
        let mut k = crate::model::Constants { lambda_bound: bound, l_bound: 1.0, ..Default::default() };
        k.f_bound = 1.0;
        b = b.constants(k).rate(move |_, _, _| rate).cost(|_, _, _| 1.0).discount(0.5);
        b.build().unwrap()
    }

    #[test]
    fn thinned_first_jump_is_exponential() {
        let m = constant_rate(1.5, 4.0);
        let p = Policy::schedule(Schedule::constant(Control::new(vec![0.0, 0.0], 0)));
        let n = 4000;
        let taus: Vec<f64> = (0..n)
            .map(|i| {
                let tr = simulate(&m, NetworkPoint::junction(), 0, &p, StopRule::jumps(50.0, 1), 0.1, RngStream::new(9, i)).unwrap();
                tr.jump_times[0]
            })
            .collect();
        let mean = taus.iter().sum::<f64>() / n as f64;
        // mean 2/3 with standard error (2/3)/sqrt(n) ≈ 0.0105
        assert!((mean - 2.0 / 3.0).abs() < 0.045, "{mean}");
        let tail = taus.iter().filter(|&&t| t > 1.0).count() as f64 / n as f64;
        assert!((tail - (-1.5f64).exp()).abs() < 0.03, "{tail}");
    }

    #[test]
    fn two_modes_alternate() {
        let m = constant_rate(1.0, 1.0);
        let p = Policy::schedule(Schedule::constant(Control::new(vec![0.0, 0.0], 0)));
        let tr = simulate(&m, NetworkPoint::junction(), 0, &p, StopRule::horizon(20.0), 0.1, RngStream::new(2, 0)).unwrap();
        assert!(!tr.jump_times.is_empty());
        for (k, (_, mode)) in tr.postjump.iter().enumerate() {
            assert_eq!(*mode, (k + 1) % 2);
        }
        assert!(tr.jump_times.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(tr.arcs.len(), tr.jump_times.len() + 1);
    }

    #[test]
    fn understated_bound_is_reported() {
        let m = constant_rate(2.0, 1.0);
        let p = Policy::schedule(Schedule::constant(Control::new(vec![0.0, 0.0], 0)));
        let err = simulate(&m, NetworkPoint::junction(), 0, &p, StopRule::horizon(50.0), 0.1, RngStream::new(1, 0)).unwrap_err();
        assert!(matches!(err, Error::RateBoundViolated { .. }));
    }

    #[test]
    fn discounted_linear_matches_quadrature() {
        for &(d, a, h, l0, l1) in &[(0.5, 0.0, 2.0, 1.0, 3.0), (2.0, 1.0, 1e-5, -1.0, 4.0), (0.1, 3.0, 0.3, 2.0, 2.0)] {
            let n = 20000;
            let q: f64 = (0..n)
                .map(|k| {
                    let s = (k as f64 + 0.5) / n as f64;
                    (-d * (a + s * h)).exp() * (l0 + (l1 - l0) * s) * h / n as f64
                })
                .sum();
            let v = discounted_linear(d, a, h, l0, l1);
            assert!((v - q).abs() <= 1e-8 * (1.0 + q.abs()), "{v} {q}");
        }
    }

    #[test]
    fn unit_cost_integrates_exactly() {
        let m = constant_rate(1.0, 1.0);
        let p = Policy::schedule(Schedule::constant(Control::new(vec![0.0, 0.0], 0)));
        let est = mc_cost(&m, NetworkPoint::junction(), 0, &p, 16, 8.0, 0.05, 3).unwrap();
        let exact = (1.0 - (-0.5f64 * 8.0).exp()) / 0.5;
        assert!((est.estimate - exact).abs() < 1e-9, "{est:?}");
        assert!(est.stderr < 1e-9);
        assert!((est.tail_bound - (-4.0f64).exp() / 0.5).abs() < 1e-12);
    }

    #[test]
    fn discounted_integral_along_a_deterministic_arc() {
        let m = crate::model::NoJumps(t3());
        let p = Policy::schedule(Schedule::constant(Control::new(vec![1.0, 0.0], 1)));
        let g = |x: &NetworkPoint<f64>, _: usize, _: &Control<f64>| vec![x.coord, 1.0];
        let est = mc_discounted(&m, NetworkPoint::junction(), 3, &p, &g, 4, 0.5, 1e-3, 0).unwrap();
        let t = 0.5f64;
        assert!((est[0].estimate - (1.0 - (-t).exp() * (1.0 + t))).abs() < 1e-9, "{est:?}");
        assert!((est[1].estimate - (1.0 - (-t).exp())).abs() < 1e-12);
        assert!(est[0].stderr < 1e-12);
    }

    #[test]
    fn occupation_has_full_mass() {
        let m = t3();
        let p = random_feedback(Arc::new(t3()), 3, 0.1, 0.1, 5);
        let cell = |x: &NetworkPoint<f64>, mode: usize, _: &Control<f64>| mode * 4 + x.edge.map_or(0, |e| e + 1);
        let (occ, per_path) = mc_occupation(&m, NetworkPoint::on(0, 0.5), 1, &p, 32, 10.0, 0.01, 16, &cell, 4).unwrap();
        assert!((occ.mass() + occ.deficit - 1.0).abs() < 1e-9);
        assert_eq!(per_path.len(), 32);
        let (total, se) = occ.integrate(&per_path, &[1.0; 16]);
        assert!((total - occ.mass()).abs() < 1e-12 && se < 1e-9);
    }

    #[test]
    fn traffic_paths_stay_on_the_network() {
        let m = Arc::new(t3());
        for seed in 0..8 {
            let p = random_feedback(m.clone(), 5, 0.05, 0.05, seed);
            let tr = simulate(&*m, NetworkPoint::on(2, 0.7), 2, &p, StopRule::horizon(15.0), 1e-2, RngStream::new(seed, 0)).unwrap();
            for arc in &tr.arcs {
                for s in &arc.samples {
                    assert!(s.x.coord >= 0.0 && s.x.coord <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn recorded_schedule_replays_the_feedback_arc() {
        let m = Arc::new(t3());
        let fb = random_feedback(m.clone(), 3, 0.1, 0.1, 11);
        let x0 = NetworkPoint::on(1, 0.4);
        let sched = record_schedule(&*m, 3, x0, &fb, 2.0, 1e-3).unwrap();
        let a = flow(&*m, 3, x0, &fb, 2.0, 1e-3).unwrap();
        let b = flow(&*m, 3, x0, &Policy::schedule(sched), 2.0, 1e-3).unwrap();
        assert!(sup_distance(&a, &b, 2.0, 1e-3) < 1e-6);
    }
}
