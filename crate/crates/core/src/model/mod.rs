//! Characteristic triple `(f, λ, Q)`, running cost `l`, control geometry and the
//! assumption constants, together with the built-in traffic example, the extension
//! to `𝒢^{+,ε}`, and coefficient shaking.

mod audit;
mod coefficient;
mod extend;

pub use audit::{audit_assumptions, AuditEntry, AuditReport, Witness};
pub use coefficient::{traffic3_model, CoefficientModel, ModelBuilder, ScalarMap, VecMap};
pub use extend::{extend_dynamics, shake, ExtendedModel, NoJumps, ShakenModel};

use crate::error::{Error, Result};
use crate::network::{Branches, NetworkPoint};
use crate::scalar::{dist, dot, Scalar};
use serde::Serialize;

/// Finite mode set `E` with the active/inactive partition per edge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSpace {
    labels: Vec<String>,
    /// `active[edge][mode]`.
    active: Vec<Vec<bool>>,
}

impl ModeSpace {
    pub fn new(labels: Vec<String>, active: Vec<Vec<bool>>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("mode set is empty".into()));
        }
        if active.iter().any(|row| row.len() != labels.len()) {
            return Err(Error::InvalidArgument("partition must classify every mode".into()));
        }
        Ok(ModeSpace { labels, active })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, mode: usize) -> &str {
        &self.labels[mode]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn is_active(&self, edge: usize, mode: usize) -> bool {
        self.active[edge][mode]
    }

    pub fn edge_count(&self) -> usize {
        self.active.len()
    }
}

/// A control value. `b` is the shaking component (zero for unshaken models) and
/// `branch` names the set `A^{γ,branch}` the control is drawn from, which fixes the
/// shaking direction at the junction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Control<S> {
    pub a: Vec<S>,
    pub b: S,
    pub branch: usize,
}

impl<S: Scalar> Control<S> {
    pub fn new(a: Vec<S>, branch: usize) -> Self {
        Control { a, b: S::zero(), branch }
    }

    pub fn shaken(a: Vec<S>, b: S, branch: usize) -> Self {
        Control { a, b, branch }
    }

    pub fn magnitude(&self) -> S {
        dot(&self.a, &self.a).sqrt()
    }
}

/// `A^{γ,j}` as a finite union of closed segments, plus the distinguished controls.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeControls<S> {
    pub segments: Vec<[Vec<S>; 2]>,
    /// `a^+_{γ,j}` (active edges).
    pub plus: Option<Vec<S>>,
    /// `a^-_{γ,j}`: moves toward `O`.
    pub minus: Option<Vec<S>>,
    /// `a^0_{γ,j}` (inactive edges): rest at `O`.
    pub zero: Option<Vec<S>>,
    /// `a_{γ,j}`: strictly inward at the endpoint `e_j`.
    pub endpoint: Option<Vec<S>>,
}

impl<S: Scalar> EdgeControls<S> {
    pub fn segment(from: Vec<S>, to: Vec<S>) -> Self {
        EdgeControls { segments: vec![[from, to]], plus: None, minus: None, zero: None, endpoint: None }
    }

    pub fn contains(&self, a: &[S]) -> bool {
        self.segments.iter().any(|[p, q]| {
            let pq: Vec<S> = q.iter().zip(p).map(|(&x, &y)| x - y).collect();
            let ap: Vec<S> = a.iter().zip(p).map(|(&x, &y)| x - y).collect();
            let len2 = dot(&pq, &pq);
            let t = if len2 > S::zero() { (dot(&ap, &pq) / len2).max(S::zero()).min(S::one()) } else { S::zero() };
            let proj: Vec<S> = p.iter().zip(&pq).map(|(&x, &d)| x + t * d).collect();
            a.len() == p.len() && dist(a, &proj) <= S::tol(1e-12)
        })
    }

    pub fn distinguished(&self) -> impl Iterator<Item = &Vec<S>> {
        [&self.plus, &self.minus, &self.zero, &self.endpoint].into_iter().flatten()
    }

    /// `n_a` evenly spaced points on every segment (ends included) followed by the
    /// distinguished controls, without duplicates.
    pub fn discretize(&self, n_a: usize) -> Vec<Vec<S>> {
        let n_a = n_a.max(2);
        let mut out: Vec<Vec<S>> = Vec::new();
        let mut push = |v: Vec<S>| {
            if !out.iter().any(|w| dist(w, &v) <= S::tol(1e-12)) {
                out.push(v);
            }
        };
        for [p, q] in &self.segments {
            for k in 0..n_a {
                let t = S::c(k as f64 / (n_a - 1) as f64);
                push(p.iter().zip(q).map(|(&x, &y)| x + t * (y - x)).collect());
            }
        }
        for d in self.distinguished() {
            push(d.clone());
        }
        out
    }

    /// Equality as sets of generating segments (orientation-insensitive).
    pub fn same_set(&self, other: &Self) -> bool {
        let covers = |x: &Self, y: &Self| {
            y.segments.iter().all(|[p, q]| {
                x.contains(p) && x.contains(q) && {
                    let mid: Vec<S> = p.iter().zip(q).map(|(&u, &v)| (u + v) * S::c(0.5)).collect();
                    x.contains(&mid)
                }
            })
        };
        covers(self, other) && covers(other, self)
    }
}

/// Declared structural constants. They are verified, not derived, by
/// [`audit_assumptions`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Constants<S> {
    pub beta: S,
    pub eta: S,
    pub kappa: S,
    pub f_bound: S,
    pub lambda_bound: S,
    pub l_bound: S,
    /// One-sided Lipschitz constant of `f` along edges, as in (A1).
    pub lip_f: S,
    pub lip_l: S,
    pub lip_lambda: S,
    pub lip_q: S,
}

/// Coefficient maps of a controlled switched PDMP on a star network.
pub trait PdmpModel<S: Scalar>: Send + Sync {
    type Net: Branches<S>;

    fn network(&self) -> &Self::Net;
    fn modes(&self) -> &ModeSpace;
    /// Activity of `branch` in `mode`; fictive branches inherit from their parent edge.
    fn is_active(&self, branch: usize, mode: usize) -> bool;
    fn controls(&self, mode: usize, branch: usize) -> &EdgeControls<S>;
    fn constants(&self) -> &Constants<S>;
    fn discount(&self) -> S;

    fn drift(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> Vec<S>;
    fn rate(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> S;
    fn jump_row(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> Vec<S>;
    fn cost(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> S;

    /// Shaking radius `ρ`; zero unless the model is a [`ShakenModel`].
    fn shake_radius(&self) -> S {
        S::zero()
    }

    fn mode_count(&self) -> usize {
        self.modes().len()
    }
}

/// Coordinate velocity `⟨f, e_b⟩` along branch `b`.
pub fn velocity<S: Scalar, M: PdmpModel<S> + ?Sized>(
    model: &M,
    b: usize,
    x: &NetworkPoint<S>,
    mode: usize,
    u: &Control<S>,
) -> S {
    dot(&model.drift(x, mode, u), model.network().direction(b))
}

/// Branch into which a junction drift points: `Ok(None)` for zero drift,
/// `Err(())` when the drift is not tangent to any branch.
#[allow(clippy::result_unit_err)]
pub fn junction_branch<S: Scalar, G: Branches<S> + ?Sized>(net: &G, f: &[S]) -> std::result::Result<Option<(usize, S)>, ()> {
    let speed = dot(f, f).sqrt();
    if speed <= S::tol(1e-12) {
        return Ok(None);
    }
    for b in 0..net.branch_count() {
        let e = net.direction(b);
        let c = dot(f, e);
        if c > S::zero() {
            let off = f.iter().zip(e).map(|(&fi, &ei)| (fi - c * ei) * (fi - c * ei)).sum::<S>().sqrt();
            if off <= S::tol(1e-12) * (S::one() + speed) {
                return Ok(Some((b, c)));
            }
        }
    }
    Err(())
}

/// Whether `u` may be applied at `x` in `mode` without leaving the network:
/// tangent drift at the junction, non-outward drift at branch ends.
pub fn locally_admissible<S: Scalar, M: PdmpModel<S> + ?Sized>(
    model: &M,
    x: &NetworkPoint<S>,
    mode: usize,
    u: &Control<S>,
) -> bool {
    let net = model.network();
    match x.edge {
        None => junction_branch(net, &model.drift(x, mode, u)).is_ok(),
        Some(b) => {
            if !model.controls(mode, b).contains(&u.a) {
                return false;
            }
            if x.coord >= net.length(b) - S::tol(1e-12) {
                velocity(model, b, x, mode, u) <= S::tol(1e-12)
            } else {
                true
            }
        }
    }
}

/// All four coefficients at one point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation<S> {
    pub drift: Vec<S>,
    pub rate: S,
    pub qrow: Vec<S>,
    pub cost: S,
}

/// Evaluates the model after checking `a ∈ A^{γ,j}` (and `|b| ≤ 1`) for the branch
/// of `x`, or for `u.branch` at the junction.
pub fn evaluate<S: Scalar, M: PdmpModel<S> + ?Sized>(
    model: &M,
    x: &NetworkPoint<S>,
    mode: usize,
    u: &Control<S>,
) -> Result<Evaluation<S>> {
    let branch = x.edge.unwrap_or(u.branch);
    let shaken_ok = model.shake_radius() > S::zero() || u.b == S::zero();
    if branch >= model.network().branch_count()
        || !model.controls(mode, branch).contains(&u.a)
        || u.b.abs() > S::one()
        || !shaken_ok
    {
        return Err(Error::InadmissibleControl {
            mode,
            branch,
            control: u.a.iter().map(|v| v.f64()).collect(),
        });
    }
    Ok(Evaluation {
        drift: model.drift(x, mode, u),
        rate: model.rate(x, mode, u),
        qrow: model.jump_row(x, mode, u),
        cost: model.cost(x, mode, u),
    })
}

/// Time and space scales of the projection constructions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShakingScales<S> {
    /// `t_ε = -(1/δ) ln(εδ / (2|f|_0))`.
    pub t_eps: S,
    /// Radius `(η/4) e^{-Lip(f) t_ε}` of the base projection.
    pub rho_base: S,
    /// Shaking radius `-ε^{1 + 2Lip(f)/((1-κ)δ)} / ln ε` on the extended network.
    pub rho_ext: S,
    /// `r'_ε = ρ_ε / 2`.
    pub r_prime: S,
    /// `Φ(ε)`.
    pub phi: S,
}

impl<S: Scalar> ShakingScales<S> {
    /// `ω_ε(t; r) = e^{Lip(f) t} (r + max(2ρ_ε, 4r'_ε) Lip(f) t)`.
    pub fn omega(&self, lip_f: S, t: S, r: S) -> S {
        (lip_f * t).exp() * (r + (S::c(2.0) * self.rho_ext).max(S::c(4.0) * self.r_prime) * lip_f * t)
    }

    /// The extended projection bound `ω_ε(t_ε; Φ(ε))`.
    pub fn extended_bound(&self, lip_f: S) -> S {
        self.omega(lip_f, self.t_eps, self.phi)
    }

    /// Radius `ρ_ε^{2/(1-κ)}` below which the base projection estimate applies.
    pub fn base_radius(&self, kappa: S) -> S {
        self.rho_base.powf(S::c(2.0) / (S::one() - kappa))
    }
}

/// Evaluates every scale from the declared constants.
pub fn shaking_scales<S: Scalar, M: PdmpModel<S> + ?Sized>(model: &M, epsilon: S) -> Result<ShakingScales<S>> {
    let k = model.constants();
    scales_from(epsilon, model.discount(), k.f_bound, k.lip_f, k.eta, k.kappa, k.beta)
}

pub(crate) fn scales_from<S: Scalar>(
    epsilon: S,
    delta: S,
    f_bound: S,
    lip_f: S,
    eta: S,
    kappa: S,
    beta: S,
) -> Result<ShakingScales<S>> {
    let two = S::c(2.0);
    let arg = epsilon * delta / (two * f_bound);
    if !(epsilon > S::zero() && epsilon < S::one()) || !(arg > S::zero() && arg < S::one()) {
        return Err(Error::BadEpsilon(epsilon.f64()));
    }
    let t_eps = -arg.ln() / delta;
    let rho_base = eta / S::c(4.0) * (-lip_f * t_eps).exp();
    let one_minus_kappa = S::one() - kappa;
    let rho_ext = -epsilon.powf(S::one() + two * lip_f / (one_minus_kappa * delta)) / epsilon.ln();
    let r_prime = rho_ext / two;
    let mut s = ShakingScales { t_eps, rho_base, rho_ext, r_prime, phi: S::zero() };
    let w = s.omega(lip_f, t_eps, r_prime);
    s.phi = (f_bound / (one_minus_kappa * beta) + S::one()) * w.powf(one_minus_kappa);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scales_match_hand_values() {
        let s = scales_from::<f64>(0.4, 1.0, 2.0, 1.0, 0.4, 0.5, 1.0).unwrap();
        assert!((s.t_eps - std::f64::consts::LN_10).abs() < 1e-12);
        assert!((s.rho_base - 0.01).abs() < 1e-12);
        // rho_ext = -0.4^{1+4} / ln 0.4
        assert!((s.rho_ext - 0.4f64.powi(5) / -(0.4f64.ln())).abs() < 1e-15);
        assert!((s.r_prime - s.rho_ext / 2.0).abs() < 1e-18);
    }

    #[test]
    fn scales_reject_degenerate_epsilon() {
        assert_eq!(scales_from(0.5, 4.0, 1.0, 0.0, 0.5, 0.5, 0.5), Err(Error::BadEpsilon(0.5)));
        assert!(scales_from(0.0, 1.0, 1.0, 0.0, 0.5, 0.5, 0.5).is_err());
    }

    #[test]
    fn zero_lipschitz_scales() {
        let s = scales_from::<f64>(0.1, 1.0, 1.0, 0.0, 0.5, 0.5, 0.5).unwrap();
        assert!((s.rho_base - 0.125).abs() < 1e-15);
        assert!((s.omega(0.0, 3.0, 0.2) - 0.2).abs() < 1e-15);
        let expect = (1.0 / 0.25 + 1.0) * s.r_prime.sqrt();
        assert!((s.phi - expect).abs() < 1e-14);
    }

    #[test]
    fn segment_membership_and_discretization() {
        let c = EdgeControls::segment(vec![-1.0, 0.0], vec![1.0, 0.0]);
        assert!(c.contains(&[0.3, 0.0]));
        assert!(!c.contains(&[0.3, 0.1]));
        assert!(!c.contains(&[1.5, 0.0]));
        let d = c.discretize(5);
        assert_eq!(d.len(), 5);
        assert!(d.iter().any(|v| v == &vec![0.0, 0.0]));
        let mut c2 = c.clone();
        c2.segments = vec![[vec![1.0, 0.0], vec![-1.0, 0.0]]];
        assert!(c.same_set(&c2));
        assert!(!c.same_set(&EdgeControls::segment(vec![0.0, -1.0], vec![0.0, 1.0])));
    }
}
