//! Semi-Lagrangian discretization of the discounted control problem on a star network.
//!
//! The scheme is a finite Markov decision process on `(node, mode)` states. One step of
//! length `h` under action `a` costs `κ_h·l` with `κ_h = (1 - e^{-δh})/δ`, then, after
//! discounting by `β = e^{-δh}`, either moves along the drift with probability `1 - λh`
//! (landing between two nodes, split by linear interpolation) or switches mode at the
//! current node with probability `λh`. Value iteration, the occupation-measure LP and
//! policy enumeration all act on this one table of actions.

use crate::error::{Error, Result};
use crate::model::{junction_branch, velocity, Control, NoJumps, PdmpModel};
use crate::network::{Branches, ExtendedNetwork, NetworkPoint};
use crate::scalar::Scalar;
use crate::simulate::{admissible_controls, path_cost, random_feedback, Policy, RngStream, StopRule};
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

/// Up to two interpolation nodes with weights summing to one.
pub type Foot<S> = [(usize, S); 2];

/// Uniform nodes on every branch; node `0` is the junction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid<S> {
    dx: S,
    lengths: Vec<S>,
    counts: Vec<usize>,
    offsets: Vec<usize>,
    owner: Vec<(usize, usize)>,
}

impl<S: Scalar> Grid<S> {
    /// `dx` must divide every branch length and leave at least two nodes per branch.
    pub fn new<G: Branches<S> + ?Sized>(net: &G, dx: S) -> Result<Self> {
        if !(dx > S::zero()) {
            return Err(Error::Grid(format!("spacing {dx} must be positive")));
        }
        let mut lengths = Vec::new();
        let mut counts = Vec::new();
        let mut offsets = Vec::new();
        let mut owner = vec![(usize::MAX, 0)];
        for b in 0..net.branch_count() {
            let len = net.length(b);
            let n = (len / dx).round();
            if (n * dx - len).abs() > S::tol(1e-9) * len.max(S::one()) {
                return Err(Error::Grid(format!("spacing {dx} does not divide branch {b} of length {len}")));
            }
            let n = n.to_usize().unwrap_or(0);
            if n < 2 {
                return Err(Error::Grid(format!("branch {b} would carry fewer than three nodes")));
            }
            offsets.push(owner.len());
            owner.extend((1..=n).map(|k| (b, k)));
            lengths.push(len);
            counts.push(n);
        }
        Ok(Grid { dx, lengths, counts, offsets, owner })
    }

    pub fn dx(&self) -> S {
        self.dx
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn branch_count(&self) -> usize {
        self.counts.len()
    }

    /// Nodes on branch `b` besides the junction.
    pub fn count(&self, b: usize) -> usize {
        self.counts[b]
    }

    pub fn length(&self, b: usize) -> S {
        self.lengths[b]
    }

    /// Node `k·dx` on branch `b`.
    pub fn index(&self, b: usize, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            self.offsets[b] + k - 1
        }
    }

    /// `(branch, k)` of a non-junction node.
    pub fn locate(&self, i: usize) -> Option<(usize, usize)> {
        if i == 0 {
            None
        } else {
            Some(self.owner[i])
        }
    }

    pub fn point(&self, i: usize) -> NetworkPoint<S> {
        match self.locate(i) {
            None => NetworkPoint::junction(),
            Some((b, k)) => NetworkPoint::on(b, self.dx * S::c(k as f64)),
        }
    }

    pub fn is_endpoint(&self, i: usize) -> bool {
        self.locate(i).is_some_and(|(b, k)| k == self.counts[b])
    }

    /// Interpolation weights of coordinate `r` on branch `b`, clamped to the branch.
    pub fn foot(&self, b: usize, r: S) -> Foot<S> {
        let r = r.max(S::zero()).min(self.lengths[b]);
        let s = r / self.dx;
        let k = s.floor().to_usize().unwrap_or(0).min(self.counts[b] - 1);
        let w = (s - S::c(k as f64)).max(S::zero()).min(S::one());
        [(self.index(b, k), S::one() - w), (self.index(b, k + 1), w)]
    }

    pub fn foot_at(&self, x: &NetworkPoint<S>) -> Foot<S> {
        match x.edge {
            None => [(0, S::one()), (0, S::zero())],
            Some(b) => self.foot(b, x.coord),
        }
    }

    /// Piecewise-linear interpolant of one mode's node values.
    pub fn interpolate(&self, values: &[S], x: &NetworkPoint<S>) -> S {
        let [(i, wi), (j, wj)] = self.foot_at(x);
        wi * values[i] + wj * values[j]
    }
}

/// Discretization parameters shared by every solver acting on the same MDP.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeParams<S> {
    pub dx: S,
    pub h: S,
    /// Evenly spaced controls per declared segment.
    pub n_a: usize,
    /// Interior weights of pairwise junction mixtures.
    pub mix_weights: Vec<S>,
    /// Shaking components `b`, used only by models with a positive shake radius.
    pub b_grid: Vec<S>,
    /// Inner fixed-point tolerance.
    pub tol: S,
    /// Outer (jump) iteration tolerance.
    pub tol_outer: S,
    pub max_outer: usize,
    pub max_sweeps: usize,
}

impl<S: Scalar> SchemeParams<S> {
    /// Defaults with `h = dx/(2|f|_0)`.
    pub fn new(dx: S, f_bound: S) -> Self {
        SchemeParams {
            dx,
            h: dx / (S::c(2.0) * f_bound.max(S::tol(1e-12))),
            n_a: 5,
            mix_weights: vec![S::c(0.25), S::c(0.5), S::c(0.75)],
            b_grid: vec![-S::one(), S::c(-0.5), S::zero(), S::c(0.5), S::one()],
            tol: S::c(1e-8),
            tol_outer: S::c(1e-7),
            max_outer: 10_000,
            max_sweeps: 1_000_000,
        }
    }

    pub fn for_model<M: PdmpModel<S> + ?Sized>(model: &M, dx: S) -> Self {
        Self::new(dx, model.constants().f_bound)
    }

    pub fn with_h(mut self, h: S) -> Self {
        self.h = h;
        self
    }

    pub fn with_tolerances(mut self, tol: S, tol_outer: S) -> Self {
        self.tol = tol;
        self.tol_outer = tol_outer;
        self
    }

    /// Identifies the discrete control set.
    pub fn control_set_id(&self, shaken: bool) -> String {
        let w: Vec<String> = self.mix_weights.iter().map(|w| format!("{w}")).collect();
        let b: Vec<String> = if shaken { self.b_grid.iter().map(|b| format!("{b}")).collect() } else { vec!["0".into()] };
        format!("n_a={};W={{{}}};b={{{}}}", self.n_a, w.join(","), b.join(","))
    }

    /// Whether two parameter sets induce the same MDP.
    pub fn same_scheme(&self, other: &Self) -> bool {
        self.dx == other.dx && self.h == other.h && self.n_a == other.n_a && self.mix_weights == other.mix_weights && self.b_grid == other.b_grid
    }
}

/// What an action applies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ActionKind<S> {
    Plain(Control<S>),
    /// Time-sharing `w·first + (1-w)·second` at the junction.
    Mix { w: S, first: Control<S>, second: Control<S> },
}

/// One discrete action at one state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Action<S> {
    pub cost: S,
    pub rate: S,
    pub qrow: Vec<S>,
    pub foot: Foot<S>,
    /// Branch the drift points along, with its signed speed; `None` for zero drift at `O`.
    pub branch: Option<usize>,
    pub speed: S,
    pub kind: ActionKind<S>,
}

/// The finite MDP induced by the scheme. States are `mode·n_nodes + node`.
#[derive(Debug, Clone, Serialize)]
pub struct Mdp<S> {
    pub grid: Grid<S>,
    pub n_modes: usize,
    pub delta: S,
    pub h: S,
    pub beta: S,
    pub kappa_h: S,
    pub params: SchemeParams<S>,
    pub control_set: String,
    actions: Vec<Action<S>>,
    starts: Vec<usize>,
}

fn dedupe_key<S: Scalar>(u: &Control<S>) -> (Vec<u64>, u64, usize) {
    let bits = |v: S| v.f64().to_bits();
    let branch = if u.b == S::zero() { usize::MAX } else { u.branch };
    (u.a.iter().map(|&v| bits(v + S::zero())).collect(), bits(u.b + S::zero()), branch)
}

fn candidate_controls<S, M>(model: &M, x: &NetworkPoint<S>, mode: usize, params: &SchemeParams<S>) -> Vec<Control<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let branches: Vec<usize> = match x.edge {
        Some(b) => vec![b],
        None => (0..model.network().branch_count()).collect(),
    };
    let bs = if model.shake_radius() > S::zero() && !params.b_grid.is_empty() { params.b_grid.clone() } else { vec![S::zero()] };
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for j in branches {
        for a in model.controls(mode, j).discretize(params.n_a) {
            for &b in &bs {
                let u = Control::shaken(a.clone(), b, j);
                if seen.insert(dedupe_key(&u)) {
                    out.push(u);
                }
            }
        }
    }
    out
}

fn state_actions<S, M>(model: &M, grid: &Grid<S>, node: usize, mode: usize, params: &SchemeParams<S>) -> Result<Vec<Action<S>>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let net = model.network();
    let x = grid.point(node);
    let h = params.h;
    let tiny = S::tol(1e-12);
    let mut out = Vec::new();
    let candidates = candidate_controls(model, &x, mode, params);
    match x.edge {
        Some(b) => {
            let at_end = grid.is_endpoint(node);
            for u in candidates {
                let c = velocity(model, b, &x, mode, &u);
                if at_end && c > tiny {
                    continue;
                }
                let rate = model.rate(&x, mode, &u);
                out.push(Action {
                    cost: model.cost(&x, mode, &u),
                    rate,
                    qrow: model.jump_row(&x, mode, &u),
                    foot: grid.foot(b, x.coord + h * c),
                    branch: Some(b),
                    speed: c,
                    kind: ActionKind::Plain(u),
                });
            }
        }
        None => {
            struct Triple<S> {
                f: Vec<S>,
                l: S,
                lq: Vec<S>,
                u: Control<S>,
            }
            let triples: Vec<Triple<S>> = candidates
                .into_iter()
                .map(|u| {
                    let rate = model.rate(&x, mode, &u);
                    let lq = model.jump_row(&x, mode, &u).into_iter().map(|q| q * rate).collect();
                    Triple { f: model.drift(&x, mode, &u), l: model.cost(&x, mode, &u), lq, u }
                })
                .collect();
            let mut push = |f: &[S], l: S, lq: Vec<S>, kind: ActionKind<S>| {
                let Ok(dir) = junction_branch(net, f) else { return };
                let rate: S = lq.iter().copied().sum();
                let qrow = if rate > S::zero() { lq.iter().map(|&v| v / rate).collect() } else { lq };
                let (foot, branch, speed) = match dir {
                    None => ([(0, S::one()), (0, S::zero())], None, S::zero()),
                    Some((j, c)) => (grid.foot(j, h * c), Some(j), c),
                };
                out.push(Action { cost: l, rate, qrow, foot, branch, speed, kind });
            };
            for t in &triples {
                push(&t.f, t.l, t.lq.clone(), ActionKind::Plain(t.u.clone()));
            }
            for (i, p) in triples.iter().enumerate() {
                for q in &triples[i + 1..] {
                    if p.u.branch == q.u.branch {
                        continue;
                    }
                    for &w in &params.mix_weights {
                        let v = S::one() - w;
                        let f: Vec<S> = p.f.iter().zip(&q.f).map(|(&a, &b)| w * a + v * b).collect();
                        if junction_branch(net, &f).is_err() {
                            continue;
                        }
                        let lq = p.lq.iter().zip(&q.lq).map(|(&a, &b)| w * a + v * b).collect();
                        let kind = ActionKind::Mix { w, first: p.u.clone(), second: q.u.clone() };
                        push(&f, w * p.l + v * q.l, lq, kind);
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoAdmissibleControl { node, mode });
    }
    Ok(out)
}

impl<S: Scalar> Mdp<S> {
    /// Builds the action tables on the grid of `model`'s network.
    pub fn build<M: PdmpModel<S> + ?Sized>(model: &M, params: &SchemeParams<S>) -> Result<Self> {
        let grid = Grid::new(model.network(), params.dx)?;
        Self::build_on(model, grid, params)
    }

    pub fn build_on<M: PdmpModel<S> + ?Sized>(model: &M, grid: Grid<S>, params: &SchemeParams<S>) -> Result<Self> {
        let h = params.h;
        if !(h > S::zero()) {
            return Err(Error::InvalidArgument("time step must be positive".into()));
        }
        let lh = h * model.constants().lambda_bound;
        if lh >= S::one() {
            return Err(Error::StepTooLarge(lh.f64()));
        }
        let n = grid.len();
        let n_modes = model.mode_count();
        let per_state = (0..n * n_modes)
            .into_par_iter()
            .map(|s| state_actions(model, &grid, s % n, s / n, params))
            .collect::<Result<Vec<_>>>()?;
        let mut starts = Vec::with_capacity(per_state.len() + 1);
        let mut actions = Vec::new();
        for list in per_state {
            starts.push(actions.len());
            actions.extend(list);
        }
        starts.push(actions.len());
        let delta = model.discount();
        let beta = (-delta * h).exp();
        Ok(Mdp {
            grid,
            n_modes,
            delta,
            h,
            beta,
            kappa_h: -(-delta * h).exp_m1() / delta,
            params: params.clone(),
            control_set: params.control_set_id(model.shake_radius() > S::zero()),
            actions,
            starts,
        })
    }

    pub fn n_states(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.len()
    }

    pub fn state(&self, node: usize, mode: usize) -> usize {
        mode * self.grid.len() + node
    }

    /// `(node, mode)` of a state.
    pub fn split(&self, s: usize) -> (usize, usize) {
        (s % self.grid.len(), s / self.grid.len())
    }

    pub fn actions(&self, s: usize) -> &[Action<S>] {
        &self.actions[self.starts[s]..self.starts[s + 1]]
    }

    /// Range of global action indices at state `s`.
    pub fn action_range(&self, s: usize) -> std::ops::Range<usize> {
        self.starts[s]..self.starts[s + 1]
    }

    pub fn all_actions(&self) -> &[Action<S>] {
        &self.actions
    }

    pub fn action_count(&self) -> usize {
        self.actions.len()
    }

    /// Transition law `(state, probability)` of action `a` taken at state `s`,
    /// before discounting.
    pub fn transitions(&self, s: usize, a: &Action<S>) -> Vec<(usize, S)> {
        let (node, mode) = self.split(s);
        let stay = S::one() - a.rate * self.h;
        let mut out: Vec<(usize, S)> = Vec::with_capacity(2 + self.n_modes);
        for &(i, w) in &a.foot {
            if w > S::zero() {
                out.push((self.state(i, mode), stay * w));
            }
        }
        if a.rate > S::zero() {
            for (g, &q) in a.qrow.iter().enumerate() {
                if q > S::zero() {
                    out.push((self.state(node, g), a.rate * self.h * q));
                }
            }
        }
        out
    }

    /// One-step value `κ_h l + β E[v(next)]`.
    pub fn q_value(&self, s: usize, a: &Action<S>, v: &[S]) -> S {
        let next: S = self.transitions(s, a).into_iter().map(|(t, p)| p * v[t]).sum();
        self.kappa_h * a.cost + self.beta * next
    }

    /// The full Bellman operator and a minimizing action per state (local index).
    pub fn bellman(&self, v: &[S]) -> (Vec<S>, Vec<usize>) {
        (0..self.n_states())
            .into_par_iter()
            .map(|s| {
                let mut best = (S::infinity(), 0);
                for (k, a) in self.actions(s).iter().enumerate() {
                    let q = self.q_value(s, a, v);
                    if q < best.0 {
                        best = (q, k);
                    }
                }
                best
            })
            .unzip()
    }

    /// Jump-stage operator: the fixed point `v` of
    /// `v(x,γ) = min_a [κ_h l + βλh ΣQ v_prev(x,·) + β(1-λh) I(v)(x + hf)]`,
    /// by alternating Gauss-Seidel sweeps with exact elimination of self-loops,
    /// started from `warm`. Returns the field and the sweep count.
    pub fn jump_operator(&self, v_prev: &[S], warm: Option<&[S]>, tol: S) -> Result<(Vec<S>, usize)> {
        let n = self.grid.len();
        let src: Vec<S> = (0..self.n_states())
            .into_par_iter()
            .flat_map_iter(|s| {
                let node = s % n;
                self.actions(s).iter().map(move |a| {
                    let jump: S = a.qrow.iter().enumerate().map(|(g, &q)| q * v_prev[g * n + node]).sum();
                    self.kappa_h * a.cost + self.beta * a.rate * self.h * jump
                })
            })
            .collect();
        let mut v = warm.map_or_else(|| vec![S::zero(); self.n_states()], <[S]>::to_vec);
        let threshold = tol * (S::one() - self.beta).max(S::tol(1e-12));
        let sweeps = v
            .par_chunks_mut(n)
            .enumerate()
            .map(|(mode, vm)| self.gauss_seidel(mode, vm, &src, threshold))
            .collect::<Result<Vec<usize>>>()?;
        Ok((v, sweeps.into_iter().max().unwrap_or(0)))
    }

    fn gauss_seidel(&self, mode: usize, v: &mut [S], src: &[S], threshold: S) -> Result<usize> {
        let n = v.len();
        for sweep in 1..=self.params.max_sweeps {
            let mut change = S::zero();
            for step in 0..n {
                let node = if sweep % 2 == 1 { step } else { n - 1 - step };
                let s = mode * n + node;
                let mut best = S::infinity();
                for ai in self.action_range(s) {
                    let a = &self.actions[ai];
                    let cw = self.beta * (S::one() - a.rate * self.h);
                    let (mut own, mut other) = (S::zero(), S::zero());
                    for &(i, w) in &a.foot {
                        if i == node {
                            own = own + w;
                        } else {
                            other = other + w * v[i];
                        }
                    }
                    let val = (src[ai] + cw * other) / (S::one() - cw * own);
                    if val < best {
                        best = val;
                    }
                }
                change = change.max((best - v[node]).abs());
                v[node] = best;
            }
            if change <= threshold {
                return Ok(sweep);
            }
        }
        Err(Error::InvalidArgument(format!("inner iteration did not converge in {} sweeps", self.params.max_sweeps)))
    }

    /// Iterates the jump-stage operator from `v ≡ 0` until the increment drops below
    /// `tol_outer`.
    pub fn solve(&self) -> Result<ValueField<S>> {
        let mut v = vec![S::zero(); self.n_states()];
        let mut increments = Vec::new();
        let mut sweeps = 0;
        for _ in 0..self.params.max_outer {
            let (next, k) = self.jump_operator(&v, Some(&v), self.params.tol)?;
            sweeps += k;
            let inc = sup_diff(&next, &v);
            v = next;
            increments.push(inc.f64());
            if inc < self.params.tol_outer {
                return Ok(self.field(v, increments, sweeps));
            }
        }
        Err(Error::InvalidArgument(format!("outer iteration did not converge in {} steps", self.params.max_outer)))
    }

    /// Wraps raw state values with this scheme's metadata.
    pub fn field(&self, values: Vec<S>, increments: Vec<f64>, inner_sweeps: usize) -> ValueField<S> {
        ValueField {
            grid: self.grid.clone(),
            n_modes: self.n_modes,
            values,
            scheme: SchemeInfo {
                h: self.h.f64(),
                dx: self.grid.dx().f64(),
                control_set: self.control_set.clone(),
                outer_iterations: increments.len(),
                inner_sweeps,
                increments,
            },
        }
    }
}

pub(crate) fn sup_diff<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).fold(S::zero(), S::max)
}

/// Metadata of a solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeInfo {
    pub h: f64,
    pub dx: f64,
    pub control_set: String,
    pub outer_iterations: usize,
    pub inner_sweeps: usize,
    /// Sup-norm increments of the outer iteration.
    pub increments: Vec<f64>,
}

impl SchemeInfo {
    /// Largest ratio of consecutive increments above `floor`.
    pub fn decay_ratio(&self, floor: f64) -> f64 {
        self.increments
            .windows(2)
            .filter(|w| w[0] > floor && w[1] > floor)
            .map(|w| w[1] / w[0])
            .fold(0.0, f64::max)
    }
}

/// Node values per mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueField<S> {
    pub grid: Grid<S>,
    pub n_modes: usize,
    /// Mode-major: `values[mode·n_nodes + node]`.
    pub values: Vec<S>,
    pub scheme: SchemeInfo,
}

impl<S: Scalar> ValueField<S> {
    pub fn mode(&self, mode: usize) -> &[S] {
        let n = self.grid.len();
        &self.values[mode * n..(mode + 1) * n]
    }

    pub fn at_node(&self, node: usize, mode: usize) -> S {
        self.values[mode * self.grid.len() + node]
    }

    /// Piecewise-linear evaluation at a network point.
    pub fn eval(&self, x: &NetworkPoint<S>, mode: usize) -> S {
        self.grid.interpolate(self.mode(mode), x)
    }

    pub fn sup_norm(&self) -> S {
        self.values.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest difference of values at geodesic lag `lag·dx`, over branches and through
    /// the junction.
    pub fn modulus(&self, lag: usize) -> S {
        let g = &self.grid;
        let mut worst = S::zero();
        for mode in 0..self.n_modes {
            let v = self.mode(mode);
            for b in 0..g.branch_count() {
                for k in 0..=g.count(b) {
                    if k + lag <= g.count(b) {
                        worst = worst.max((v[g.index(b, k + lag)] - v[g.index(b, k)]).abs());
                    }
                    for b2 in (b + 1)..g.branch_count() {
                        if k <= lag && lag - k <= g.count(b2) {
                            worst = worst.max((v[g.index(b, k)] - v[g.index(b2, lag - k)]).abs());
                        }
                    }
                }
            }
        }
        worst
    }

    /// CSV rows `edge,coord,mode,value`; the junction has edge `-1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("edge,coord,mode,value\n");
        for mode in 0..self.n_modes {
            for i in 0..self.grid.len() {
                let p = self.grid.point(i);
                let edge = p.edge.map_or(-1, |e| e as i64);
                out.push_str(&format!("{},{:.12e},{},{:.15e}\n", edge, p.coord.f64(), mode, self.at_node(i, mode).f64()));
            }
        }
        out
    }
}

/// Value iteration for the full problem.
pub fn solve_value<S, M>(model: &M, params: &SchemeParams<S>) -> Result<ValueField<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    Mdp::build(model, params)?.solve()
}

/// One application of the jump-stage operator to `v_prev`.
pub fn bellman_jump_operator<S: Scalar>(mdp: &Mdp<S>, v_prev: &[S], tol: S) -> Result<Vec<S>> {
    Ok(mdp.jump_operator(v_prev, None, tol)?.0)
}

/// The frozen-mode value `v_0` for one mode (jumps switched off).
pub fn solve_deterministic<S, M>(model: &M, mode: usize, params: &SchemeParams<S>) -> Result<Vec<S>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let frozen = NoJumps(model);
    let mdp = Mdp::build(&frozen, params)?;
    let (v, _) = mdp.jump_operator(&vec![S::zero(); mdp.n_states()], None, params.tol)?;
    let n = mdp.n_nodes();
    Ok(v[mode * n..(mode + 1) * n].to_vec())
}

/// Signed residual of the Hamilton-Jacobi system at every state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HjbResidual<S> {
    pub residual: Vec<S>,
    /// Largest positive part over all states (subsolution violation).
    pub max_sub: S,
    pub max_sub_state: usize,
    /// Largest negative part over non-junction states (supersolution violation).
    pub max_super: S,
    /// Largest negative part at the junction, reported only.
    pub junction_super: S,
    /// Largest positive part at the junction.
    pub junction_sub: S,
    /// Largest absolute residual away from the junction.
    pub max_interior: S,
}

/// `δv + max_a{-c·Dv - l - λΣQ(v(γ') - v(γ))}` with one-sided differences taken on the
/// side the drift points to, over the same action set as the scheme.
pub fn hjb_residual<S: Scalar>(mdp: &Mdp<S>, v: &[S]) -> HjbResidual<S> {
    let g = &mdp.grid;
    let n = g.len();
    let dx = g.dx();
    let residual: Vec<S> = (0..mdp.n_states())
        .into_par_iter()
        .map(|s| {
            let (node, mode) = mdp.split(s);
            let here = v[s];
            let k = g.locate(node).map_or(0, |(_, k)| k);
            let mut best = S::neg_infinity();
            for a in mdp.actions(s) {
                let dv = match a.branch {
                    Some(b) if a.speed > S::zero() => (v[mode * n + g.index(b, k + 1)] - here) / dx,
                    Some(b) if a.speed < S::zero() => (here - v[mode * n + g.index(b, k - 1)]) / dx,
                    _ => S::zero(),
                };
                let jump: S = a.qrow.iter().enumerate().map(|(gm, &q)| q * (v[gm * n + node] - here)).sum();
                let term = -a.speed * dv - a.cost - a.rate * jump;
                best = best.max(term);
            }
            mdp.delta * here + best
        })
        .collect();
    let mut out = HjbResidual {
        max_sub: S::zero(),
        max_sub_state: 0,
        max_super: S::zero(),
        junction_super: S::zero(),
        junction_sub: S::zero(),
        max_interior: S::zero(),
        residual,
    };
    for (s, &r) in out.residual.iter().enumerate() {
        let (node, _) = mdp.split(s);
        if r > out.max_sub {
            out.max_sub = r;
            out.max_sub_state = s;
        }
        if node == 0 {
            out.junction_sub = out.junction_sub.max(r);
            out.junction_super = out.junction_super.max(-r);
        } else {
            out.max_super = out.max_super.max(-r);
            out.max_interior = out.max_interior.max(r.abs());
        }
    }
    out
}

/// One-step lookahead `κ_h l + β[(1-λh)V(x+hf) + λh ΣQ V(x,·)]` of a plain control.
pub fn lookahead<S, M>(model: &M, field: &ValueField<S>, x: &NetworkPoint<S>, mode: usize, u: &Control<S>, h: S) -> Option<S>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let delta = model.discount();
    let beta = (-delta * h).exp();
    let kappa = -(-delta * h).exp_m1() / delta;
    let foot = match x.edge {
        Some(b) => NetworkPoint::on(b, (x.coord + h * velocity(model, b, x, mode, u)).max(S::zero())),
        None => match junction_branch(model.network(), &model.drift(x, mode, u)) {
            Err(()) => return None,
            Ok(None) => *x,
            Ok(Some((j, c))) => NetworkPoint::on(j, h * c),
        },
    };
    let lh = model.rate(x, mode, u) * h;
    let jump: S = model.jump_row(x, mode, u).iter().enumerate().map(|(g, &q)| q * field.eval(x, g)).sum();
    Some(kappa * model.cost(x, mode, u) + beta * ((S::one() - lh) * field.eval(&foot, mode) + lh * jump))
}

/// Sample-and-hold feedback minimizing the one-step lookahead over the admissible
/// discrete controls at the current point.
pub fn greedy_policy<S, M>(model: Arc<M>, field: Arc<ValueField<S>>, n_a: usize, b_grid: Vec<S>, h: S, hold: S) -> Policy<S>
where
    S: Scalar,
    M: PdmpModel<S> + 'static,
{
    Policy::feedback(
        move |x, mode| {
            let options = admissible_controls(&*model, x, mode, n_a, &b_grid);
            let mut best: Option<(S, Control<S>)> = None;
            for u in options {
                if let Some(q) = lookahead(&*model, &field, x, mode, &u, h) {
                    if best.as_ref().is_none_or(|(b, _)| q < *b) {
                        best = Some((q, u));
                    }
                }
            }
            best.map(|b| b.1).expect("admissible control sets are non-empty")
        },
        hold,
    )
}

/// Extended-network solve and its restriction to the original network's nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtendedSolve<S> {
    pub field: ValueField<S>,
    pub restricted: ValueField<S>,
}

/// Solves on `𝒢^{+,ε}` with the shaking grid and restricts to the base nodes.
pub fn solve_value_extended<S, M>(model: &M, params: &SchemeParams<S>) -> Result<ExtendedSolve<S>>
where
    S: Scalar,
    M: PdmpModel<S, Net = ExtendedNetwork<S>> + ?Sized,
{
    let field = solve_value(model, params)?;
    let base = Grid::new(model.network().base(), params.dx)?;
    let restricted = restrict_field(&field, base);
    Ok(ExtendedSolve { field, restricted })
}

/// Evaluates `field` at the nodes of `grid`, branch indices carried over.
pub fn restrict_field<S: Scalar>(field: &ValueField<S>, grid: Grid<S>) -> ValueField<S> {
    let values = (0..field.n_modes)
        .flat_map(|mode| (0..grid.len()).map(move |i| (mode, i)))
        .map(|(mode, i)| field.eval(&grid.point(i), mode))
        .collect();
    ValueField { grid, n_modes: field.n_modes, values, scheme: field.scheme.clone() }
}

/// Largest `sup|v_coarse - v_fine|/(dx + h)` over consecutive levels of a refinement,
/// the fine field evaluated at the coarse nodes.
pub fn scheme_constant<S: Scalar>(levels: &[ValueField<S>]) -> f64 {
    levels
        .windows(2)
        .map(|w| {
            let (c, f) = (&w[0], &w[1]);
            let mut gap = 0.0f64;
            for mode in 0..c.n_modes {
                for i in 0..c.grid.len() {
                    gap = gap.max((c.at_node(i, mode) - f.eval(&c.grid.point(i), mode)).abs().f64());
                }
            }
            gap / (c.scheme.dx + c.scheme.h)
        })
        .fold(0.0, f64::max)
}

/// Candidate policies and sampling sizes of a dynamic-programming check.
#[derive(Debug, Clone, PartialEq)]
pub struct DppOptions<S> {
    pub horizon: S,
    pub n_mc: usize,
    /// Random feedbacks tried next to the greedy one.
    pub n_random: usize,
    pub n_a: usize,
    pub hold: S,
    /// Random feedbacks are constant on cells of this length.
    pub cell: S,
    pub h: S,
    pub seed: u64,
}

/// Dynamic-programming check at one starting pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DppPoint {
    pub edge: Option<usize>,
    pub coord: f64,
    pub mode: usize,
    pub value: f64,
    /// Smallest candidate mean of the cost up to `T∧τ_1` plus the discounted continuation.
    pub rhs: f64,
    pub stderr: f64,
    pub residual: f64,
    /// Minimizing candidate; `0` is the greedy policy.
    pub best: usize,
}

/// Compares `v(x, γ)` with `min_α E[∫_0^{T∧τ_1} e^{-δt} l dt + e^{-δ(T∧τ_1)} v(X, Γ)]`, the
/// minimum taken over the greedy feedback of `field` and `n_random` random feedbacks.
/// Every candidate sees the same jump streams.
pub fn dpp_residual<S, M>(model: Arc<M>, field: Arc<ValueField<S>>, points: &[(NetworkPoint<S>, usize)], opts: &DppOptions<S>) -> Result<Vec<DppPoint>>
where
    S: Scalar,
    M: PdmpModel<S> + 'static,
{
    if opts.n_mc == 0 || !(opts.horizon >= S::zero()) {
        return Err(Error::InvalidArgument("dpp check needs paths and a non-negative horizon".into()));
    }
    let mut candidates = vec![greedy_policy(model.clone(), field.clone(), opts.n_a, Vec::new(), S::c(field.scheme.h), opts.hold)];
    for k in 0..opts.n_random {
        candidates.push(random_feedback(model.clone(), opts.n_a, opts.cell, opts.hold, opts.seed ^ (k as u64 + 1)));
    }
    let delta = model.discount();
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, mode))| {
            let mut best: Option<(usize, f64, f64)> = None;
            for (c, policy) in candidates.iter().enumerate() {
                let samples = (0..opts.n_mc)
                    .into_par_iter()
                    .map(|j| {
                        let stream = RngStream::new(opts.seed, (i * opts.n_mc + j) as u64);
                        let (cost, t, xe, me) = path_cost(&*model, x, mode, policy, StopRule::jumps(opts.horizon, 1), opts.h, stream)?;
                        Ok((cost + (-delta * t).exp() * field.eval(&xe, me)).f64())
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let n = samples.len() as f64;
                let mean = samples.iter().sum::<f64>() / n;
                let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0).max(1.0);
                if best.is_none_or(|b| mean < b.1) {
                    best = Some((c, mean, (var / n).sqrt()));
                }
            }
            let (best, rhs, stderr) = best.expect("the greedy candidate is always present");
            let value = field.eval(&x, mode).f64();
            Ok(DppPoint { edge: x.edge, coord: x.coord.f64(), mode, value, rhs, stderr, residual: (value - rhs).abs(), best })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{traffic3_model, Constants, ModelBuilder};
    use crate::network::{extend, make_network};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Two opposite unit edges, `f = a ∈ [-1,1]`, constant cost, optional constant rate.
    fn line_model(cost: f64, rate: f64, delta: f64) -> crate::model::CoefficientModel<f64> {
        ModelBuilder::<f64>::new(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 2)
            .unwrap()
            .constants(Constants { lambda_bound: rate.max(1e-12), l_bound: cost.abs(), f_bound: 1.0, ..Default::default() })
            .discount(delta)
            .drift(|_, _, a| a.to_vec())
            .rate(move |_, _, _| rate)
            .cost(move |_, _, _| cost)
            .build()
            .unwrap()
    }

    fn t3() -> crate::model::CoefficientModel<f64> {
        traffic3_model(0.1, 1.0, 1.0).unwrap()
    }

    fn dpp_opts(horizon: f64) -> DppOptions<f64> {
        DppOptions { horizon, n_mc: 40, n_random: 3, n_a: 5, hold: 0.05, cell: 0.25, h: 1e-2, seed: 3 }
    }

    #[test]
    fn dpp_with_zero_horizon_is_exact_at_nodes() {
        let m = Arc::new(t3());
        let v = Arc::new(solve_value(&*m, &SchemeParams::for_model(&*m, 0.1)).unwrap());
        let pts = [(NetworkPoint::junction(), 0), (NetworkPoint::on(1, 0.3), 2), (NetworkPoint::on(2, 1.0), 3)];
        for r in dpp_residual(m, v, &pts, &dpp_opts(0.0)).unwrap() {
            assert!(r.residual < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn dpp_with_constant_cost_is_within_noise() {
        let m = Arc::new(line_model(2.0, 0.7, 0.5));
        let v = Arc::new(solve_value(&*m, &SchemeParams::new(0.1, 1.0).with_tolerances(1e-12, 1e-11)).unwrap());
        let pts = [(NetworkPoint::on(0, 0.45), 0), (NetworkPoint::junction(), 1)];
        for r in dpp_residual(m, v, &pts, &dpp_opts(1.0)).unwrap() {
            assert!(r.residual <= r.stderr + 1e-6, "{r:?}");
        }
    }

    #[test]
    fn grid_layout() {
        let net = make_network(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let g = Grid::new(&net, 0.25).unwrap();
        assert_eq!(g.len(), 13);
        assert_eq!(g.point(g.index(1, 2)), NetworkPoint::on(1, 0.5));
        assert!(g.is_endpoint(g.index(2, 4)));
        let [(i, wi), (j, wj)] = g.foot(0, 0.3);
        assert_eq!((i, j), (g.index(0, 1), g.index(0, 2)));
        assert_abs_diff_eq!(wi, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(wj, 0.2, epsilon = 1e-12);
        assert!(matches!(Grid::new(&net, 0.3), Err(Error::Grid(_))));
        assert!(matches!(Grid::new(&net, 1.0), Err(Error::Grid(_))));
    }

    #[test]
    fn extended_grid_covers_prolongations() {
        let net = make_network(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let x = extend(&net, 0.1).unwrap();
        let g = Grid::new(&x, 0.025).unwrap();
        assert_eq!(g.count(0), 44);
        assert_eq!(g.count(3), 4);
    }

    #[test]
    fn constant_cost_gives_constant_value() {
        let m = line_model(2.0, 0.7, 0.5);
        let p = SchemeParams::new(0.1, 1.0).with_tolerances(1e-12, 1e-11);
        let v = solve_value(&m, &p).unwrap();
        for &x in &v.values {
            assert_abs_diff_eq!(x, 4.0, epsilon = 1e-8);
        }
        let r = hjb_residual(&Mdp::build(&m, &p).unwrap(), &v.values);
        assert!(r.max_sub < 1e-7 && r.max_super < 1e-7);
    }

    #[test]
    fn first_jump_stage_resolvent() {
        // v_1 with v_0 ≡ 0, constant λ = μ: c·κ_h/(1 - β(1-μh)) → c/(δ+μ)
        let (c, mu, delta) = (1.5, 0.8, 0.6);
        let m = line_model(c, mu, delta);
        let p = SchemeParams::new(0.05, 1.0);
        let mdp = Mdp::build(&m, &p).unwrap();
        let v1 = bellman_jump_operator(&mdp, &vec![0.0; mdp.n_states()], 1e-12).unwrap();
        let exact_discrete = c * mdp.kappa_h / (1.0 - mdp.beta * (1.0 - mu * mdp.h));
        for &x in &v1 {
            assert_abs_diff_eq!(x, exact_discrete, epsilon = 1e-9);
            assert_abs_diff_eq!(x, c / (delta + mu), epsilon = 2e-2);
        }
    }

    #[test]
    fn no_jumps_reduces_to_deterministic() {
        let m = t3();
        let p = SchemeParams::for_model(&m, 0.1);
        let frozen = NoJumps(&m);
        let mdp = Mdp::build(&frozen, &p).unwrap();
        let full = mdp.solve().unwrap();
        for mode in 0..4 {
            let d = solve_deterministic(&m, mode, &p).unwrap();
            assert!(sup_diff(&d, full.mode(mode)) < 1e-6);
        }
    }

    #[test]
    fn step_too_large_is_rejected() {
        let m = t3();
        let p = SchemeParams::for_model(&m, 0.1).with_h(0.5);
        assert!(matches!(Mdp::build(&m, &p), Err(Error::StepTooLarge(_))));
    }

    #[test]
    fn one_dimensional_hand_solution() {
        // f = a ∈ [-1,1], l = 1 + |x|, δ = 1: run to O at unit speed and rest there,
        // v(r) = ∫_0^r e^{-t}(1 + r - t) dt + e^{-r} = r + e^{-r}
        let m = ModelBuilder::<f64>::new(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 1)
            .unwrap()
            .constants(Constants { l_bound: 2.0, f_bound: 1.0, ..Default::default() })
            .discount(1.0)
            .drift(|_, _, a| a.to_vec())
            .cost(|x, _, _| 1.0 + x[0].abs())
            .build()
            .unwrap();
        for &dx in &[0.1, 0.05] {
            let p = SchemeParams::for_model(&m, dx).with_tolerances(1e-12, 1e-11);
            let mdp = Mdp::build(&m, &p).unwrap();
            let v = mdp.solve().unwrap();
            for i in 0..mdp.n_nodes() {
                let r = mdp.grid.point(i).coord;
                assert!((v.at_node(i, 0) - (r + (-r).exp())).abs() <= 2.0 * (dx + p.h), "dx={dx} r={r}");
            }
            let res = hjb_residual(&mdp, &v.values);
            assert!(res.max_sub.max(res.max_super) <= 2.0 * (dx + p.h), "{res:?}");
        }
    }

    #[test]
    fn traffic_bound_and_decay() {
        let m = t3();
        let p = SchemeParams::for_model(&m, 0.05);
        let v = solve_value(&m, &p).unwrap();
        let k = m.constants();
        assert!(v.sup_norm() <= k.l_bound / m.discount() + 1e-9);
        let q = k.lambda_bound / (k.lambda_bound + m.discount());
        assert!(v.scheme.decay_ratio(1e-6) <= q + 0.05, "{}", v.scheme.decay_ratio(1e-6));
    }

    #[test]
    fn monotone_in_cost() {
        let lo = line_model(1.0, 0.0, 1.0);
        let m2 = ModelBuilder::<f64>::new(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 2)
            .unwrap()
            .constants(Constants { l_bound: 2.0, f_bound: 1.0, ..Default::default() })
            .drift(|_, _, a| a.to_vec())
            .cost(|x, _, _| 1.0 + x[0] * x[0])
            .build()
            .unwrap();
        let p = SchemeParams::new(0.1, 1.0);
        let a = solve_value(&lo, &p).unwrap();
        let b = solve_value(&m2, &p).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x <= &(y + 1e-9)));
    }

    #[test]
    fn junction_mixtures_are_tangent() {
        let m = t3();
        let p = SchemeParams::for_model(&m, 0.1);
        let mdp = Mdp::build(&m, &p).unwrap();
        for mode in 0..4 {
            let s = mdp.state(0, mode);
            assert!(mdp.actions(s).iter().any(|a| matches!(a.kind, ActionKind::Mix { .. })));
            for a in mdp.actions(s) {
                assert!(a.speed >= 0.0);
                let total: f64 = a.qrow.iter().sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn modulus_of_affine_field() {
        let m = line_model(1.0, 0.0, 1.0);
        let p = SchemeParams::new(0.1, 1.0);
        let mdp = Mdp::build(&m, &p).unwrap();
        let values: Vec<f64> = (0..mdp.n_states()).map(|s| 3.0 * mdp.grid.point(s % mdp.n_nodes()).coord).collect();
        let f = mdp.field(values, vec![], 0);
        assert_abs_diff_eq!(f.modulus(2), 0.6, epsilon = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn jump_operator_is_monotone_and_contracting(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let m = t3();
            let p = SchemeParams::for_model(&m, 0.1);
            let mdp = Mdp::build(&m, &p).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let bound = 1.1;
            let v: Vec<f64> = (0..mdp.n_states()).map(|_| rng.gen_range(-bound..bound)).collect();
            let bump: Vec<f64> = (0..mdp.n_states()).map(|_| rng.gen_range(0.0..0.5)).collect();
            let w: Vec<f64> = v.iter().zip(&bump).map(|(a, b)| a + b).collect();
            let tv = bellman_jump_operator(&mdp, &v, 1e-10).unwrap();
            let tw = bellman_jump_operator(&mdp, &w, 1e-10).unwrap();
            prop_assert!(tv.iter().zip(&tw).all(|(a, b)| *a <= b + 1e-8));
            let k = m.constants();
            let q = k.lambda_bound / (k.lambda_bound + m.discount());
            prop_assert!(sup_diff(&tv, &tw) <= q * sup_diff(&v, &w) + 5e-8);
        }
    }
}
