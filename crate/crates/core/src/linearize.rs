//! Smooth subsolutions by edgewise mollification, and the occupation-measure linear
//! program of the discrete scheme with a dense revised simplex.

use crate::error::{Error, Result};
use crate::hjb::{Mdp, ValueField};
use crate::model::{junction_branch, velocity, Control, PdmpModel};
use crate::network::{Branches, ExtendedNetwork, NetworkPoint};
use crate::scalar::Scalar;
use crate::simulate::{admissible_controls, mc_discounted, McEstimate, Policy};
use rayon::prelude::*;
use serde::Serialize;

/// Quadrature of the bump `ψ(y) ∝ exp(-1/(1-y²))` on `(-1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Kernel {
    pub nodes: Vec<f64>,
    /// Value weights, summing to one.
    pub weights: Vec<f64>,
    /// Derivative weights, normalized so that `-Σ y_i w'_i = 1`.
    pub dweights: Vec<f64>,
}

impl Kernel {
    /// Composite trapezoid rule with `n` nodes, endpoints included.
    pub fn bump(n: usize) -> Self {
        let n = n.max(3);
        let step = 2.0 / (n - 1) as f64;
        let nodes: Vec<f64> = (0..n).map(|i| -1.0 + i as f64 * step).collect();
        let psi = |y: f64| if y.abs() < 1.0 { (-1.0 / (1.0 - y * y)).exp() } else { 0.0 };
        let dpsi = |y: f64| if y.abs() < 1.0 { psi(y) * (-2.0 * y / (1.0 - y * y).powi(2)) } else { 0.0 };
        let raw: Vec<f64> = nodes.iter().map(|&y| psi(y)).collect();
        let mass: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / mass).collect();
        let draw: Vec<f64> = nodes.iter().map(|&y| dpsi(y)).collect();
        let moment: f64 = -nodes.iter().zip(&draw).map(|(y, d)| y * d).sum::<f64>();
        let dweights = draw.iter().map(|d| d / moment).collect();
        Kernel { nodes, weights, dweights }
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Edgewise mollification of an extended-network field along the lines through the
/// original edges.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mollified<S> {
    pub field: ValueField<S>,
    pub net: ExtendedNetwork<S>,
    pub kernel: Kernel,
    pub radius: S,
}

/// Mollifies `v_ext` with radius `radius` on every original edge. The stencil of each
/// point of `[0, 1]e_j` must stay inside `𝒢^{+,ε}`.
pub fn mollify_edgewise<S: Scalar>(v_ext: &ValueField<S>, net: &ExtendedNetwork<S>, radius: S) -> Result<Mollified<S>> {
    if !(radius > S::zero()) {
        return Err(Error::InvalidArgument("mollification radius must be positive".into()));
    }
    let slack = S::tol(1e-12);
    for j in 0..net.base().edge_count() {
        for s in [-radius, S::one() + radius] {
            let ok = net.line_point(j, s).is_some_and(|p| net.contains(&p, slack));
            if !ok {
                return Err(Error::MarginViolated(format!("edge {j}, line coordinate {s}")));
            }
        }
    }
    Ok(Mollified { field: v_ext.clone(), net: net.clone(), kernel: Kernel::bump(64), radius })
}

impl<S: Scalar> Mollified<S> {
    fn stencil(&self, j: usize, s: S, mode: usize) -> impl Iterator<Item = S> + '_ {
        self.kernel.nodes.iter().map(move |&y| {
            let p = self.net.line_point(j, s - self.radius * S::c(y)).unwrap_or_else(NetworkPoint::junction);
            self.field.eval(&p, mode)
        })
    }

    /// Mollified value at coordinate `s ∈ [0, 1]` of edge `j`.
    pub fn value(&self, j: usize, s: S, mode: usize) -> S {
        self.stencil(j, s, mode).zip(&self.kernel.weights).map(|(v, &w)| S::c(w) * v).sum()
    }

    /// Derivative along `e_j`, by differentiating the quadrature.
    pub fn derivative(&self, j: usize, s: S, mode: usize) -> S {
        let sum: S = self.stencil(j, s, mode).zip(&self.kernel.dweights).map(|(v, &w)| S::c(w) * v).sum();
        sum / self.radius
    }
}

/// A function on `𝒢̄ × modes` with one-sided derivatives along each branch.
pub trait TestFunction<S: Scalar>: Sync {
    fn value(&self, x: &NetworkPoint<S>, mode: usize) -> S;
    /// `⟨f, Dφ⟩` for a drift of signed speed `speed` along `branch` at `x`.
    fn directional(&self, x: &NetworkPoint<S>, mode: usize, branch: usize, speed: S) -> S;
}

/// A grid field with one-sided differences on the side the drift points to.
#[derive(Debug, Clone)]
pub struct GridFunction<'a, S>(pub &'a ValueField<S>);

impl<S: Scalar> TestFunction<S> for GridFunction<'_, S> {
    fn value(&self, x: &NetworkPoint<S>, mode: usize) -> S {
        self.0.eval(x, mode)
    }

    fn directional(&self, x: &NetworkPoint<S>, mode: usize, branch: usize, speed: S) -> S {
        let g = &self.0.grid;
        let b = x.edge.unwrap_or(branch);
        let s = x.coord;
        let step = if speed > S::zero() { (g.length(b) - s).min(g.dx()) } else { s.min(g.dx()) };
        if speed == S::zero() || step <= S::zero() {
            return S::zero();
        }
        let other = NetworkPoint::on(b, if speed > S::zero() { s + step } else { s - step });
        let here = self.0.eval(x, mode);
        let there = self.0.eval(&other, mode);
        speed.abs() * (there - here) / step
    }
}

/// `φ + shift`.
#[derive(Debug, Clone)]
pub struct Shifted<T, S> {
    pub inner: T,
    pub shift: S,
}

impl<S: Scalar, T: TestFunction<S>> TestFunction<S> for Shifted<T, S> {
    fn value(&self, x: &NetworkPoint<S>, mode: usize) -> S {
        self.inner.value(x, mode) + self.shift
    }

    fn directional(&self, x: &NetworkPoint<S>, mode: usize, branch: usize, speed: S) -> S {
        self.inner.directional(x, mode, branch, speed)
    }
}

/// Measured quantities behind the junction correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubsolutionDiagnostics {
    /// `sup |v_ext - v^δ|` over the original nodes.
    pub gap: f64,
    /// Empirical modulus at lag `ρ`, the larger of the two fields' values.
    pub modulus: f64,
    pub omega: f64,
    /// `4(|λ|_0/δ)ω`.
    pub correction: f64,
    /// Largest `|∂_s m_j|` sampled on 65 points per edge and mode.
    pub lipschitz: f64,
}

/// Aligned mollified branches: `m_j - m_j(O) + min_j' m_j'(O) - 4(|λ|_0/δ)ω` on edge `j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothSubsolution<S> {
    pub mollified: Mollified<S>,
    /// `offsets[mode][j]`, added to `m_j` on edge `j`.
    pub offsets: Vec<Vec<S>>,
    /// Common value at `O` per mode.
    pub junction: Vec<S>,
    pub diagnostics: SubsolutionDiagnostics,
}

/// Assembles the smooth subsolution candidate from a mollified extended field and
/// the base value `v^δ` on its own grid.
pub fn assemble_subsolution<S: Scalar>(mollified: Mollified<S>, base: &ValueField<S>, rho: S, lambda_bound: S, delta: S) -> SmoothSubsolution<S> {
    let ext = &mollified.field;
    let gap = (0..base.n_modes)
        .flat_map(|mode| (0..base.grid.len()).map(move |i| (mode, i)))
        .map(|(mode, i)| (ext.eval(&base.grid.point(i), mode) - base.at_node(i, mode)).abs())
        .fold(S::zero(), S::max);
    let lag = (rho / base.grid.dx()).ceil().to_usize().unwrap_or(1).max(1);
    let lag_ext = (rho / ext.grid.dx()).ceil().to_usize().unwrap_or(1).max(1);
    let modulus = base.modulus(lag).max(ext.modulus(lag_ext));
    let omega = gap + modulus;
    let correction = S::c(4.0) * lambda_bound / delta * omega;
    let n_edges = mollified.net.base().edge_count();
    let mut offsets = Vec::with_capacity(base.n_modes);
    let mut junction = Vec::with_capacity(base.n_modes);
    for mode in 0..base.n_modes {
        let at_o: Vec<S> = (0..n_edges).map(|j| mollified.value(j, S::zero(), mode)).collect();
        let low = at_o.iter().copied().fold(S::infinity(), S::min);
        offsets.push(at_o.iter().map(|&m| low - correction - m).collect());
        junction.push(low - correction);
    }
    let lipschitz = (0..base.n_modes)
        .flat_map(|mode| (0..n_edges).flat_map(move |j| (0..=64).map(move |k| (mode, j, k))))
        .map(|(mode, j, k)| mollified.derivative(j, S::c(k as f64 / 64.0), mode).abs().f64())
        .fold(0.0, f64::max);
    let diagnostics = SubsolutionDiagnostics { gap: gap.f64(), modulus: modulus.f64(), omega: omega.f64(), correction: correction.f64(), lipschitz };
    SmoothSubsolution { mollified, offsets, junction, diagnostics }
}

impl<S: Scalar> TestFunction<S> for SmoothSubsolution<S> {
    fn value(&self, x: &NetworkPoint<S>, mode: usize) -> S {
        match x.edge {
            None => self.junction[mode],
            Some(j) => self.mollified.value(j, x.coord, mode) + self.offsets[mode][j],
        }
    }

    fn directional(&self, x: &NetworkPoint<S>, mode: usize, branch: usize, speed: S) -> S {
        let j = x.edge.unwrap_or(branch);
        speed * self.mollified.derivative(j, x.coord, mode)
    }
}

/// Largest violation of `δw - ⟨f, Dw⟩ - l - λΣQ(w(γ') - w(γ)) ≤ 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsolutionCheck<S> {
    pub max_violation: S,
    pub node: usize,
    pub mode: usize,
    pub control: Option<Control<S>>,
}

/// Evaluates the subsolution inequality at every node of `grid` and every admissible
/// discrete control there.
pub fn check_subsolution<S, M, W>(model: &M, w: &W, grid: &crate::hjb::Grid<S>, n_a: usize) -> SubsolutionCheck<S>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
    W: TestFunction<S> + ?Sized,
{
    let delta = model.discount();
    let n_modes = model.mode_count();
    (0..grid.len() * n_modes)
        .into_par_iter()
        .map(|s| {
            let (node, mode) = (s % grid.len(), s / grid.len());
            let x = grid.point(node);
            let here = w.value(&x, mode);
            let others: Vec<S> = (0..n_modes).map(|g| w.value(&x, g)).collect();
            let mut worst = SubsolutionCheck { max_violation: S::neg_infinity(), node, mode, control: None };
            for u in admissible_controls(model, &x, mode, n_a, &[]) {
                let transport = match x.edge {
                    Some(b) => w.directional(&x, mode, b, velocity(model, b, &x, mode, &u)),
                    None => match junction_branch(model.network(), &model.drift(&x, mode, &u)) {
                        Ok(Some((j, c))) => w.directional(&x, mode, j, c),
                        _ => S::zero(),
                    },
                };
                let rate = model.rate(&x, mode, &u);
                let jump: S = model.jump_row(&x, mode, &u).iter().zip(&others).map(|(&q, &o)| q * (o - here)).sum();
                let r = delta * here - transport - model.cost(&x, mode, &u) - rate * jump;
                if r > worst.max_violation {
                    worst.max_violation = r;
                    worst.control = Some(u);
                }
            }
            worst
        })
        .reduce_with(|a, b| if b.max_violation > a.max_violation || (b.max_violation == a.max_violation && (b.mode, b.node) < (a.mode, a.node)) { b } else { a })
        .expect("grids are non-empty")
}

/// `min c·x` subject to `Ax = b`, `x ≥ 0`, with sparse columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearProgram<S> {
    pub n_rows: usize,
    pub cols: Vec<Vec<(usize, S)>>,
    pub b: Vec<S>,
    pub c: Vec<S>,
}

/// Optimal basic solution with its duals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpSolution<S> {
    pub x: Vec<S>,
    /// One dual per row.
    pub y: Vec<S>,
    pub objective: S,
    pub dual_objective: S,
    pub pivots: usize,
    /// `max |Ax - b|`.
    pub primal_residual: S,
    /// `max (y·A_j - c_j)^+`.
    pub dual_violation: S,
    /// `max x_j |c_j - y·A_j|`.
    pub complementarity: S,
}

struct Simplex<'a, S> {
    lp: &'a LinearProgram<S>,
    sign: Vec<S>,
    rhs: Vec<S>,
    basis: Vec<usize>,
    binv: Vec<Vec<S>>,
    xb: Vec<S>,
    pivots: usize,
    since_refactor: usize,
    max_pivots: usize,
}

impl<'a, S: Scalar> Simplex<'a, S> {
    fn n(&self) -> usize {
        self.lp.cols.len()
    }

    /// Column `j` in row-flipped form; indices past `n` are artificials.
    fn column(&self, j: usize) -> Vec<(usize, S)> {
        if j >= self.n() {
            vec![(j - self.n(), S::one())]
        } else {
            self.lp.cols[j].iter().map(|&(i, v)| (i, self.sign[i] * v)).collect()
        }
    }

    fn ftran(&self, j: usize) -> Vec<S> {
        let col = self.column(j);
        self.binv.iter().map(|row| col.iter().map(|&(i, v)| row[i] * v).sum()).collect()
    }

    fn refactor(&mut self) -> Result<()> {
        let m = self.basis.len();
        let mut a = vec![vec![S::zero(); 2 * m]; m];
        for (k, &j) in self.basis.iter().enumerate() {
            for (i, v) in self.column(j) {
                a[i][k] = v;
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[m + i] = S::one();
        }
        for k in 0..m {
            let p = (k..m).max_by(|&x, &y| a[x][k].abs().partial_cmp(&a[y][k].abs()).unwrap_or(std::cmp::Ordering::Equal)).unwrap_or(k);
            if a[p][k].abs() < S::tol(1e-14) {
                return Err(Error::InvalidArgument("singular simplex basis".into()));
            }
            a.swap(k, p);
            let d = a[k][k];
            for v in a[k].iter_mut() {
                *v = *v / d;
            }
            let pivot_row = a[k].clone();
            for (i, row) in a.iter_mut().enumerate() {
                if i != k && row[k] != S::zero() {
                    let f = row[k];
                    for (v, &p) in row.iter_mut().zip(&pivot_row) {
                        *v = *v - f * p;
                    }
                }
            }
        }
        // rows of a are now [I | B^{-1}] indexed by basis position
        self.binv = a.into_iter().map(|row| row[m..].to_vec()).collect();
        self.xb = self.binv.iter().map(|row| row.iter().zip(&self.rhs).map(|(&r, &b)| r * b).sum()).collect();
        self.since_refactor = 0;
        Ok(())
    }

    fn pivot(&mut self, r: usize, j: usize, col: &[S]) -> Result<()> {
        let d = col[r];
        let pivot_row: Vec<S> = self.binv[r].iter().map(|&v| v / d).collect();
        let theta = self.xb[r] / d;
        for (i, row) in self.binv.iter_mut().enumerate() {
            if i != r && col[i] != S::zero() {
                for (v, &p) in row.iter_mut().zip(&pivot_row) {
                    *v = *v - col[i] * p;
                }
                self.xb[i] = self.xb[i] - col[i] * theta;
            }
        }
        self.binv[r] = pivot_row;
        self.xb[r] = theta;
        self.basis[r] = j;
        self.pivots += 1;
        self.since_refactor += 1;
        if self.pivots > self.max_pivots {
            return Err(Error::IterationLimit(self.max_pivots));
        }
        if self.since_refactor >= 50 {
            self.refactor()?;
        }
        Ok(())
    }

    fn duals(&self, cost: &dyn Fn(usize) -> S) -> Vec<S> {
        let m = self.basis.len();
        (0..m).map(|k| (0..m).map(|i| cost(self.basis[i]) * self.binv[i][k]).sum()).collect()
    }

    fn reduced_cost(&self, j: usize, y: &[S], cost: &dyn Fn(usize) -> S) -> S {
        cost(j) - self.column(j).iter().map(|&(i, v)| y[i] * v).sum::<S>()
    }

    /// Bland's rule over the structural columns until no improving column remains.
    fn run(&mut self, cost: &dyn Fn(usize) -> S) -> Result<()> {
        let scale = (0..self.n()).map(|j| cost(j).abs()).fold(S::one(), S::max);
        let tol_d = S::tol(1e-9) * scale;
        loop {
            let y = self.duals(cost);
            let mut in_basis = vec![false; self.n() + self.basis.len()];
            for &j in &self.basis {
                in_basis[j] = true;
            }
            let Some(j) = (0..self.n()).find(|&j| !in_basis[j] && self.reduced_cost(j, &y, cost) < -tol_d) else {
                return Ok(());
            };
            let col = self.ftran(j);
            // entries below this are roundoff; pivoting on them makes the basis singular
            let tol_p = S::tol(1e-9) * col.iter().fold(S::one(), |a, v| a.max(v.abs()));
            let mut leave: Option<(usize, S)> = None;
            for (i, &d) in col.iter().enumerate() {
                if d > tol_p {
                    let theta = self.xb[i].max(S::zero()) / d;
                    leave = match leave {
                        None => Some((i, theta)),
                        Some((r, best)) => {
                            let tie = (theta - best).abs() <= S::tol(1e-12) * (S::one() + best);
                            if theta < best && !tie || tie && self.basis[i] < self.basis[r] {
                                Some((i, theta))
                            } else {
                                Some((r, best))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = leave else { return Err(Error::Unbounded) };
            self.pivot(r, j, &col)?;
        }
    }
}

/// Indices of a maximal independent set of rows of `[A | b]`; errors if a dependent
/// row has an inconsistent right-hand side.
fn independent_rows<S: Scalar>(lp: &LinearProgram<S>) -> Result<Vec<usize>> {
    let n = lp.cols.len();
    let mut dense = vec![vec![S::zero(); n + 1]; lp.n_rows];
    for (j, col) in lp.cols.iter().enumerate() {
        for &(i, v) in col {
            dense[i][j] = dense[i][j] + v;
        }
    }
    for (row, &b) in dense.iter_mut().zip(&lp.b) {
        row[n] = b;
    }
    let mut pivots: Vec<(usize, Vec<S>)> = Vec::new();
    let mut keep = Vec::new();
    for (i, mut r) in dense.into_iter().enumerate() {
        let scale = r[..n].iter().fold(S::zero(), |a, v| a.max(v.abs()));
        for (p, row) in &pivots {
            let f = r[*p];
            if f != S::zero() {
                for (v, &q) in r.iter_mut().zip(row) {
                    *v = *v - f * q;
                }
            }
        }
        let (p, big) = r[..n].iter().enumerate().fold((0, S::zero()), |(k, m), (j, v)| if v.abs() > m { (j, v.abs()) } else { (k, m) });
        if big <= S::tol(1e-10) * scale.max(S::one()) {
            if r[n].abs() > S::tol(1e-9) * lp.b.iter().fold(S::one(), |a, v| a.max(v.abs())) {
                return Err(Error::Infeasible);
            }
            continue;
        }
        let d = r[p];
        for v in r.iter_mut() {
            *v = *v / d;
        }
        pivots.push((p, r));
        keep.push(i);
    }
    Ok(keep)
}

/// Two-phase revised simplex with Bland's rule and an explicit basis inverse,
/// refactorized every 50 pivots. Dependent rows are dropped first and get zero duals.
pub fn solve_lp<S: Scalar>(lp: &LinearProgram<S>, max_pivots: usize) -> Result<LpSolution<S>> {
    if lp.b.len() != lp.n_rows || lp.c.len() != lp.cols.len() || lp.cols.iter().flatten().any(|e| e.0 >= lp.n_rows) {
        return Err(Error::InvalidArgument("LP dimensions disagree".into()));
    }
    let keep = independent_rows(lp)?;
    if keep.len() == lp.n_rows {
        return solve_full_rank(lp, max_pivots);
    }
    let mut new_index = vec![None; lp.n_rows];
    for (k, &i) in keep.iter().enumerate() {
        new_index[i] = Some(k);
    }
    let reduced = LinearProgram {
        n_rows: keep.len(),
        cols: lp.cols.iter().map(|col| col.iter().filter_map(|&(i, v)| new_index[i].map(|k| (k, v))).collect()).collect(),
        b: keep.iter().map(|&i| lp.b[i]).collect(),
        c: lp.c.clone(),
    };
    let mut sol = solve_full_rank(&reduced, max_pivots)?;
    let mut y = vec![S::zero(); lp.n_rows];
    for (k, &i) in keep.iter().enumerate() {
        y[i] = sol.y[k];
    }
    sol.y = y;
    let mut ax = vec![S::zero(); lp.n_rows];
    for (col, &xj) in lp.cols.iter().zip(&sol.x) {
        for &(i, v) in col {
            ax[i] = ax[i] + v * xj;
        }
    }
    sol.primal_residual = ax.iter().zip(&lp.b).map(|(&a, &b)| (a - b).abs()).fold(S::zero(), S::max);
    Ok(sol)
}

/// Charnes perturbation of the flipped right-hand side: distinct positive shifts make
/// every vertex nondegenerate, so floating-point Bland pivots cannot cycle.
fn perturbation<S: Scalar>(m: usize, scale: S) -> Vec<S> {
    (0..m).map(|i| S::c(1e-7 * (1.0 + (i as f64 * 0.618_033_988_75).fract())) * scale).collect()
}

fn solve_full_rank<S: Scalar>(lp: &LinearProgram<S>, max_pivots: usize) -> Result<LpSolution<S>> {
    let bscale = lp.b.iter().fold(S::one(), |a, v| a.max(v.abs()));
    let mut used = 0;
    if let Ok(mut sx) = optimize(lp, max_pivots, Some(perturbation(lp.n_rows, bscale))) {
        used = sx.pivots;
        // reduced costs do not depend on b: the basis stays optimal if it stays feasible
        sx.rhs = lp.b.iter().zip(&sx.sign).map(|(&b, &s)| b * s).collect();
        sx.refactor()?;
        let n = lp.cols.len();
        let feasible = sx.basis.iter().zip(&sx.xb).all(|(&j, &v)| v >= -S::tol(1e-9) * bscale && (j < n || v <= S::tol(1e-9) * bscale));
        if feasible {
            return finish(lp, sx);
        }
    }
    let mut sx = optimize(lp, max_pivots.saturating_sub(used), None)?;
    sx.pivots += used;
    finish(lp, sx)
}

fn optimize<'a, S: Scalar>(lp: &'a LinearProgram<S>, max_pivots: usize, shift: Option<Vec<S>>) -> Result<Simplex<'a, S>> {
    let m = lp.n_rows;
    let n = lp.cols.len();
    let sign: Vec<S> = lp.b.iter().map(|&b| if b < S::zero() { -S::one() } else { S::one() }).collect();
    let mut rhs: Vec<S> = lp.b.iter().zip(&sign).map(|(&b, &s)| b * s).collect();
    if let Some(shift) = shift {
        for (r, e) in rhs.iter_mut().zip(shift) {
            *r = *r + e;
        }
    }
    let mut identity = vec![vec![S::zero(); m]; m];
    for (i, row) in identity.iter_mut().enumerate() {
        row[i] = S::one();
    }
    let mut sx = Simplex {
        lp,
        sign,
        xb: rhs.clone(),
        rhs,
        basis: (n..n + m).collect(),
        binv: identity,
        pivots: 0,
        since_refactor: 0,
        max_pivots,
    };
    let phase1 = |j: usize| if j >= n { S::one() } else { S::zero() };
    sx.run(&phase1)?;
    let infeasibility: S = sx.basis.iter().zip(&sx.xb).filter(|(&j, _)| j >= n).map(|(_, &v)| v.abs()).sum();
    let bscale = sx.rhs.iter().fold(S::one(), |a, v| a.max(v.abs()));
    if infeasibility > S::tol(1e-9) * bscale {
        return Err(Error::Infeasible);
    }
    // drive artificials out where a structural column can replace them
    for r in 0..m {
        if sx.basis[r] < n {
            continue;
        }
        sx.xb[r] = S::zero();
        let in_basis: std::collections::HashSet<usize> = sx.basis.iter().copied().collect();
        let found = (0..n).filter(|j| !in_basis.contains(j)).find_map(|j| {
            let col = sx.ftran(j);
            (col[r].abs() > S::tol(1e-9)).then_some((j, col))
        });
        if let Some((j, col)) = found {
            sx.pivot(r, j, &col)?;
        }
    }
    let phase2 = |j: usize| if j >= n { S::zero() } else { lp.c[j] };
    sx.run(&phase2)?;
    Ok(sx)
}

fn finish<S: Scalar>(lp: &LinearProgram<S>, mut sx: Simplex<'_, S>) -> Result<LpSolution<S>> {
    let m = lp.n_rows;
    let n = lp.cols.len();
    let phase2 = |j: usize| if j >= n { S::zero() } else { lp.c[j] };
    sx.refactor()?;
    let mut x = vec![S::zero(); n];
    for (&j, &v) in sx.basis.iter().zip(&sx.xb) {
        if j < n {
            x[j] = v.max(S::zero());
        }
    }
    let y_flipped = sx.duals(&phase2);
    let y: Vec<S> = y_flipped.iter().zip(&sx.sign).map(|(&v, &s)| v * s).collect();
    let objective: S = x.iter().zip(&lp.c).map(|(&a, &c)| a * c).sum();
    let dual_objective: S = y.iter().zip(&lp.b).map(|(&a, &b)| a * b).sum();
    let mut ax = vec![S::zero(); m];
    let mut dual_violation = S::zero();
    let mut complementarity = S::zero();
    for (j, col) in lp.cols.iter().enumerate() {
        let mut ya = S::zero();
        for &(i, v) in col {
            ax[i] = ax[i] + v * x[j];
            ya = ya + y[i] * v;
        }
        let d = lp.c[j] - ya;
        dual_violation = dual_violation.max(-d);
        complementarity = complementarity.max(x[j] * d.abs());
    }
    let primal_residual = ax.iter().zip(&lp.b).map(|(&a, &b)| (a - b).abs()).fold(S::zero(), S::max);
    Ok(LpSolution { x, y, objective, dual_objective, pivots: sx.pivots, primal_residual, dual_violation, complementarity })
}

/// Occupation-measure LP of the scheme's MDP started at `(x, γ)`. Columns are atoms
/// `(state, action)`; row `s'` reads `Σ μ (1{s=s'} - βP(s'|s,a))/κ_h = δ·hat_{s'}(x, γ)`,
/// and the last row is the total mass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupationLP<S> {
    pub lp: LinearProgram<S>,
    /// `(state, local action index)` per column.
    pub atoms: Vec<(usize, usize)>,
    pub start: (NetworkPoint<S>, usize),
    pub mass_row: usize,
}

pub fn build_occupation_lp<S: Scalar>(mdp: &Mdp<S>, x: &NetworkPoint<S>, mode: usize) -> OccupationLP<S> {
    let n_states = mdp.n_states();
    let per_state: Vec<Vec<((usize, usize), Vec<(usize, S)>, S)>> = (0..n_states)
        .into_par_iter()
        .map(|s| {
            mdp.actions(s)
                .iter()
                .enumerate()
                .map(|(k, a)| {
                    let mut col: Vec<(usize, S)> = vec![(s, S::one() / mdp.kappa_h)];
                    for (t, p) in mdp.transitions(s, a) {
                        let v = -mdp.beta * p / mdp.kappa_h;
                        match col.iter_mut().find(|e| e.0 == t) {
                            Some(e) => e.1 = e.1 + v,
                            None => col.push((t, v)),
                        }
                    }
                    col.sort_by_key(|e| e.0);
                    col.push((n_states, S::one()));
                    ((s, k), col, a.cost)
                })
                .collect()
        })
        .collect();
    let mut atoms = Vec::new();
    let mut cols = Vec::new();
    let mut c = Vec::new();
    for (atom, col, cost) in per_state.into_iter().flatten() {
        atoms.push(atom);
        cols.push(col);
        c.push(cost);
    }
    let mut b = vec![S::zero(); n_states + 1];
    for (node, w) in mdp.grid.foot_at(x) {
        let s = mdp.state(node, mode);
        b[s] = b[s] + mdp.delta * w;
    }
    b[n_states] = S::one();
    OccupationLP { lp: LinearProgram { n_rows: n_states + 1, cols, b, c }, atoms, start: (*x, mode), mass_row: n_states }
}

/// Dual certificate `ψ = φ + η/δ`, a discrete subsolution `ψ ≤ T(ψ)` with `δψ(x) =` dual value.
pub fn dual_certificate<S: Scalar>(mdp: &Mdp<S>, sol: &LpSolution<S>) -> Vec<S> {
    let n = mdp.n_states();
    let eta = sol.y[n];
    sol.y[..n].iter().map(|&p| p + eta / mdp.delta).collect()
}

/// One row of the duality report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityRow {
    pub edge: i64,
    pub coord: f64,
    pub mode: usize,
    /// `δ·v` from value iteration.
    pub delta_v: f64,
    pub primal: f64,
    pub dual: f64,
    pub primal_dual_gap: f64,
    /// `primal - δ·v`.
    pub value_gap: f64,
    pub pivots: usize,
    pub primal_residual: f64,
    pub dual_violation: f64,
    /// `max (ψ - T(ψ))^+` of the dual certificate.
    pub certificate_violation: f64,
}

/// Solves the occupation LP at each point and compares with `δ·v`.
pub fn duality_report<S: Scalar>(mdp: &Mdp<S>, field: &ValueField<S>, points: &[(NetworkPoint<S>, usize)], max_pivots: usize) -> Result<Vec<DualityRow>> {
    if field.scheme.control_set != mdp.control_set || field.scheme.h != mdp.h.f64() || field.scheme.dx != mdp.grid.dx().f64() {
        return Err(Error::SchemeMismatch(format!(
            "value field (dx={}, h={}, {}) vs LP (dx={}, h={}, {})",
            field.scheme.dx,
            field.scheme.h,
            field.scheme.control_set,
            mdp.grid.dx(),
            mdp.h,
            mdp.control_set
        )));
    }
    points
        .iter()
        .map(|(x, mode)| {
            let occ = build_occupation_lp(mdp, x, *mode);
            let sol = solve_lp(&occ.lp, max_pivots)?;
            let psi = dual_certificate(mdp, &sol);
            let (t_psi, _) = mdp.bellman(&psi);
            let certificate_violation = psi.iter().zip(&t_psi).map(|(&p, &t)| (p - t).max(S::zero())).fold(S::zero(), S::max);
            let delta_v = (mdp.delta * field.eval(x, *mode)).f64();
            Ok(DualityRow {
                edge: x.edge.map_or(-1, |e| e as i64),
                coord: x.coord.f64(),
                mode: *mode,
                delta_v,
                primal: sol.objective.f64(),
                dual: sol.dual_objective.f64(),
                primal_dual_gap: (sol.objective - sol.dual_objective).f64(),
                value_gap: sol.objective.f64() - delta_v,
                pivots: sol.pivots,
                primal_residual: sol.primal_residual.f64(),
                dual_violation: sol.dual_violation.f64(),
                certificate_violation: certificate_violation.f64(),
            })
        })
        .collect()
}

/// Monte Carlo check of `∫[𝒰^a φ - δ(φ - φ(x,γ))] dμ = 0` for one test function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdjointResidual {
    /// Signed estimate of the integral.
    pub residual: f64,
    pub stderr: f64,
    /// `δ e^{-δT}(|φ|_0 + |φ(x,γ)|)`: effect of truncating paths at `T`.
    pub truncation: f64,
}

/// Generator `𝒰^u φ = ⟨f, Dφ⟩ + λ Σ_γ' Q(γ')(φ(·,γ') - φ(·,γ))` at a point.
pub fn generator<S, M, W>(model: &M, phi: &W, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> S
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
    W: TestFunction<S> + ?Sized,
{
    let transport = match x.edge {
        Some(b) => phi.directional(x, mode, b, velocity(model, b, x, mode, u)),
        None => match junction_branch(model.network(), &model.drift(x, mode, u)) {
            Ok(Some((j, c))) => phi.directional(x, mode, j, c),
            _ => S::zero(),
        },
    };
    let here = phi.value(x, mode);
    let jump: S = model.jump_row(x, mode, u).iter().enumerate().map(|(g, &q)| q * (phi.value(x, g) - here)).sum();
    transport + model.rate(x, mode, u) * jump
}

/// Integrates `𝒰φ - δ(φ - φ(x,γ))` against the discounted occupation measure of
/// `policy`, `δ E∫_0^T e^{-δt}(…) dt`, for each test function on shared paths.
#[allow(clippy::too_many_arguments)]
pub fn adjoint_identity_check<S, M>(
    model: &M,
    policy: &Policy<S>,
    x: &NetworkPoint<S>,
    mode: usize,
    tests: &[&(dyn TestFunction<S> + Sync)],
    sup_norms: &[f64],
    n_paths: usize,
    t_trunc: S,
    h: S,
    seed: u64,
) -> Result<Vec<AdjointResidual>>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let delta = model.discount();
    let anchors: Vec<S> = tests.iter().map(|t| t.value(x, mode)).collect();
    let g = |y: &NetworkPoint<S>, g: usize, u: &Control<S>| -> Vec<f64> {
        tests
            .iter()
            .zip(&anchors)
            .map(|(t, &a)| (generator(model, *t, y, g, u) - delta * (t.value(y, g) - a)).f64())
            .collect()
    };
    let est: Vec<McEstimate> = mc_discounted(model, *x, mode, policy, &g, n_paths, t_trunc, h, seed)?;
    let d = delta.f64();
    let decay = (-d * t_trunc.f64()).exp();
    Ok(est
        .iter()
        .zip(&anchors)
        .zip(sup_norms)
        .map(|((e, a), sup)| AdjointResidual { residual: d * e.estimate, stderr: d * e.stderr, truncation: d * decay * (sup + a.f64().abs()) })
        .collect())
}

/// Coefficients over states of the LP rows' functional at an off-grid pair `(y, γ, u)`,
/// using the scheme's one-step law: `(hat(y,γ) - β[(1-λh)hat(next,γ) + λhΣQ hat(y,γ')])/κ_h`.
pub fn lp_row_weights<S, M>(mdp: &Mdp<S>, model: &M, y: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> Vec<(usize, S)>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let h = mdp.h;
    let next = match y.edge {
        Some(b) => NetworkPoint::on(b, (y.coord + h * velocity(model, b, y, mode, u)).max(S::zero()).min(mdp.grid.length(b))),
        None => match junction_branch(model.network(), &model.drift(y, mode, u)) {
            Ok(Some((j, c))) => NetworkPoint::on(j, h * c),
            _ => *y,
        },
    };
    let lh = model.rate(y, mode, u) * h;
    let scale = S::one() / mdp.kappa_h;
    let mut out: Vec<(usize, S)> = Vec::with_capacity(4 + 2 * mdp.n_modes);
    let mut add = |s: usize, w: S| match out.iter_mut().find(|e| e.0 == s) {
        Some(e) => e.1 = e.1 + w,
        None => out.push((s, w)),
    };
    for (node, w) in mdp.grid.foot_at(y) {
        add(mdp.state(node, mode), scale * w);
    }
    for (node, w) in mdp.grid.foot_at(&next) {
        add(mdp.state(node, mode), -scale * mdp.beta * (S::one() - lh) * w);
    }
    for (g, q) in model.jump_row(y, mode, u).into_iter().enumerate() {
        if q != S::zero() {
            for (node, w) in mdp.grid.foot_at(y) {
                add(mdp.state(node, g), -scale * mdp.beta * lh * q * w);
            }
        }
    }
    out
}

/// `Σ_s' φ(s')·row_s'` at an off-grid pair.
pub fn lp_row_functional<S, M>(mdp: &Mdp<S>, model: &M, phi: &[S], y: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> S
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    lp_row_weights(mdp, model, y, mode, u).into_iter().map(|(s, w)| w * phi[s]).sum()
}

/// Residual of one LP constraint under a simulated occupation measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RowResidual {
    /// State index of the row.
    pub row: usize,
    /// `∫ row dμ - δ·hat_row(x, γ)`.
    pub residual: f64,
    pub stderr: f64,
}

/// Evaluates every state row of the occupation LP on the discounted occupation measure
/// of `policy` for the continuous process, and the smooth combinations `Σ φ_k(s)·row_s`.
#[allow(clippy::too_many_arguments)]
pub fn occupation_row_residuals<S, M>(
    mdp: &Mdp<S>,
    model: &M,
    policy: &Policy<S>,
    x: &NetworkPoint<S>,
    mode: usize,
    combinations: &[Vec<S>],
    n_paths: usize,
    t_trunc: S,
    h: S,
    seed: u64,
) -> Result<(Vec<RowResidual>, Vec<RowResidual>)>
where
    S: Scalar,
    M: PdmpModel<S> + ?Sized,
{
    let n = mdp.n_states();
    let g = |y: &NetworkPoint<S>, gm: usize, u: &Control<S>| -> Vec<f64> {
        let mut dense = vec![0.0; n + combinations.len()];
        for (s, w) in lp_row_weights(mdp, model, y, gm, u) {
            dense[s] += w.f64();
            for (k, phi) in combinations.iter().enumerate() {
                dense[n + k] += (w * phi[s]).f64();
            }
        }
        dense
    };
    let est = mc_discounted(model, *x, mode, policy, &g, n_paths, t_trunc, h, seed)?;
    let d = mdp.delta.f64();
    let mut target = vec![0.0; n];
    for (node, w) in mdp.grid.foot_at(x) {
        target[mdp.state(node, mode)] += d * w.f64();
    }
    let rows = (0..n).map(|s| RowResidual { row: s, residual: d * est[s].estimate - target[s], stderr: d * est[s].stderr }).collect();
    let combos = combinations
        .iter()
        .enumerate()
        .map(|(k, phi)| {
            let goal: f64 = target.iter().zip(phi).map(|(t, p)| t * p.f64()).sum();
            RowResidual { row: k, residual: d * est[n + k].estimate - goal, stderr: d * est[n + k].stderr }
        })
        .collect();
    Ok((rows, combos))
}
