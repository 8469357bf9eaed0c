use super::{audit_assumptions, Constants, Control, EdgeControls, ModeSpace, PdmpModel};
use crate::error::{Error, Result};
use crate::network::{Branches, ExtendedNetwork, NetworkPoint, StarNetwork};
use crate::scalar::Scalar;

impl<S: Scalar, M: PdmpModel<S> + ?Sized> PdmpModel<S> for &M {
    type Net = M::Net;

    fn network(&self) -> &M::Net {
        (**self).network()
    }
    fn modes(&self) -> &ModeSpace {
        (**self).modes()
    }
    fn is_active(&self, branch: usize, mode: usize) -> bool {
        (**self).is_active(branch, mode)
    }
    fn controls(&self, mode: usize, branch: usize) -> &EdgeControls<S> {
        (**self).controls(mode, branch)
    }
    fn constants(&self) -> &Constants<S> {
        (**self).constants()
    }
    fn discount(&self) -> S {
        (**self).discount()
    }
    fn drift(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> Vec<S> {
        (**self).drift(x, mode, u)
    }
    fn rate(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> S {
        (**self).rate(x, mode, u)
    }
    fn jump_row(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> Vec<S> {
        (**self).jump_row(x, mode, u)
    }
    fn cost(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> S {
        (**self).cost(x, mode, u)
    }
    fn shake_radius(&self) -> S {
        (**self).shake_radius()
    }
}

/// A model on `𝒢^{+,ε}`: coefficients frozen at `e_j` on prolongations, mirrored
/// (inactive) or frozen at `O` (active) on fictive branches.
#[derive(Debug, Clone)]
pub struct ExtendedModel<S: Scalar, M> {
    base: M,
    xnet: ExtendedNetwork<S>,
    /// `controls[mode][branch]`; fictive branches reuse their parent's set.
    controls: Vec<Vec<EdgeControls<S>>>,
}

/// Extends a base model to `xnet`. Requires (Ab') and (B) to pass the audit.
pub fn extend_dynamics<S: Scalar, M>(model: M, xnet: ExtendedNetwork<S>) -> Result<ExtendedModel<S, M>>
where
    M: PdmpModel<S, Net = StarNetwork<S>>,
{
    if xnet.base() != model.network() {
        return Err(Error::MissingPrecondition("extended network does not extend the model network".into()));
    }
    let report = audit_assumptions(&model, 64, 0);
    for name in ["Ab'", "B"] {
        if !report.passed(name) {
            return Err(Error::MissingPrecondition(format!("assumption ({name}) failed the audit")));
        }
    }
    let net = model.network();
    let n = net.edge_count();
    let controls = (0..model.mode_count())
        .map(|mode| {
            let mut row: Vec<EdgeControls<S>> = (0..n).map(|j| model.controls(mode, j).clone()).collect();
            for j in 0..net.free_count() {
                let c = model.controls(mode, j);
                let mut f = c.clone();
                if model.is_active(j, mode) {
                    f.plus = c.minus.clone();
                    f.minus = c.plus.clone();
                    f.endpoint = c.plus.clone();
                } else {
                    f.endpoint = c.minus.clone();
                }
                row.push(f);
            }
            row
        })
        .collect();
    Ok(ExtendedModel { base: model, xnet, controls })
}

enum Source<S> {
    /// Evaluate the base model at this point.
    Base(NetworkPoint<S>),
    /// Fictive branch of an inactive edge: mirrored drift from this base point,
    /// other coefficients frozen at `O`.
    Mirror(NetworkPoint<S>),
    /// Fictive branch of an active edge: everything frozen at `O`.
    Junction,
}

impl<S: Scalar, M: PdmpModel<S, Net = StarNetwork<S>>> ExtendedModel<S, M> {
    pub fn base(&self) -> &M {
        &self.base
    }

    pub fn epsilon(&self) -> S {
        self.xnet.epsilon()
    }

    fn source(&self, x: &NetworkPoint<S>, mode: usize) -> Source<S> {
        match x.edge {
            None => Source::Base(*x),
            Some(b) if !self.xnet.is_fictive(b) => Source::Base(NetworkPoint::on(b, x.coord.min(S::one()))),
            Some(b) => {
                let j = self.xnet.parent(b);
                if self.base.is_active(j, mode) {
                    Source::Junction
                } else {
                    Source::Mirror(NetworkPoint::on(j, x.coord.min(S::one())))
                }
            }
        }
    }

    fn frozen(&self, x: &NetworkPoint<S>, mode: usize) -> NetworkPoint<S> {
        match self.source(x, mode) {
            Source::Base(p) => p,
            _ => NetworkPoint::junction(),
        }
    }
}

impl<S: Scalar, M: PdmpModel<S, Net = StarNetwork<S>>> PdmpModel<S> for ExtendedModel<S, M> {
    type Net = ExtendedNetwork<S>;

    fn network(&self) -> &ExtendedNetwork<S> {
        &self.xnet
    }
    fn modes(&self) -> &ModeSpace {
        self.base.modes()
    }
    fn is_active(&self, branch: usize, mode: usize) -> bool {
        self.base.is_active(self.xnet.parent(branch), mode)
    }
    fn controls(&self, mode: usize, branch: usize) -> &EdgeControls<S> {
        &self.controls[mode][branch]
    }
    fn constants(&self) -> &Constants<S> {
        self.base.constants()
    }
    fn discount(&self) -> S {
        self.base.discount()
    }
    fn drift(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> Vec<S> {
        match self.source(x, mode) {
            Source::Base(p) => self.base.drift(&p, mode, u),
            Source::Mirror(p) => self.base.drift(&p, mode, u).into_iter().map(|v| -v).collect(),
            Source::Junction => self.base.drift(&NetworkPoint::junction(), mode, u),
        }
    }
    fn rate(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> S {
        self.base.rate(&self.frozen(x, mode), mode, u)
    }
    fn jump_row(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> Vec<S> {
        self.base.jump_row(&self.frozen(x, mode), mode, u)
    }
    fn cost(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> S {
        self.base.cost(&self.frozen(x, mode), mode, u)
    }
}

/// Coefficients evaluated at `x + ρb` along the line of the current branch (of
/// `u.branch` at the junction).
#[derive(Debug, Clone)]
pub struct ShakenModel<S: Scalar, M> {
    inner: M,
    rho: S,
}

pub fn shake<S: Scalar, M>(model: M, rho: S) -> Result<ShakenModel<S, M>>
where
    M: PdmpModel<S, Net = ExtendedNetwork<S>>,
{
    let eps = model.network().epsilon();
    if !(rho > S::zero() && rho <= eps) {
        return Err(Error::BadRho { rho: rho.f64(), epsilon: eps.f64() });
    }
    Ok(ShakenModel { inner: model, rho })
}

impl<S: Scalar, M: PdmpModel<S, Net = ExtendedNetwork<S>>> ShakenModel<S, M> {
    pub fn inner(&self) -> &M {
        &self.inner
    }

    pub fn rho(&self) -> S {
        self.rho
    }

    /// The shifted evaluation point `x + ρb`.
    pub fn shifted(&self, x: &NetworkPoint<S>, u: &Control<S>) -> NetworkPoint<S> {
        if u.b == S::zero() {
            return *x;
        }
        let line = x.edge.unwrap_or(u.branch);
        self.inner
            .network()
            .line_point(line, x.coord + self.rho * u.b)
            .unwrap_or_else(NetworkPoint::junction)
    }
}

impl<S: Scalar, M: PdmpModel<S, Net = ExtendedNetwork<S>>> PdmpModel<S> for ShakenModel<S, M> {
    type Net = ExtendedNetwork<S>;

    fn network(&self) -> &ExtendedNetwork<S> {
        self.inner.network()
    }
    fn modes(&self) -> &ModeSpace {
        self.inner.modes()
    }
    fn is_active(&self, branch: usize, mode: usize) -> bool {
        self.inner.is_active(branch, mode)
    }
    fn controls(&self, mode: usize, branch: usize) -> &EdgeControls<S> {
        self.inner.controls(mode, branch)
    }
    fn constants(&self) -> &Constants<S> {
        self.inner.constants()
    }
    fn discount(&self) -> S {
        self.inner.discount()
    }
    fn drift(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> Vec<S> {
        self.inner.drift(&self.shifted(x, u), mode, u)
    }
    fn rate(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> S {
        self.inner.rate(&self.shifted(x, u), mode, u)
    }
    fn jump_row(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> Vec<S> {
        self.inner.jump_row(&self.shifted(x, u), mode, u)
    }
    fn cost(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> S {
        self.inner.cost(&self.shifted(x, u), mode, u)
    }
    fn shake_radius(&self) -> S {
        self.rho
    }
}

/// The same model with jumps switched off (`λ ≡ 0`): the mode is frozen.
#[derive(Debug, Clone)]
pub struct NoJumps<M>(pub M);

impl<S: Scalar, M: PdmpModel<S>> PdmpModel<S> for NoJumps<M> {
    type Net = M::Net;

    fn network(&self) -> &M::Net {
        self.0.network()
    }
    fn modes(&self) -> &ModeSpace {
        self.0.modes()
    }
    fn is_active(&self, branch: usize, mode: usize) -> bool {
        self.0.is_active(branch, mode)
    }
    fn controls(&self, mode: usize, branch: usize) -> &EdgeControls<S> {
        self.0.controls(mode, branch)
    }
    fn constants(&self) -> &Constants<S> {
        self.0.constants()
    }
    fn discount(&self) -> S {
        self.0.discount()
    }
    fn drift(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> Vec<S> {
        self.0.drift(x, mode, u)
    }
    fn rate(&self, _x: &NetworkPoint<S>, _mode: usize, _u: &Control<S>) -> S {
        S::zero()
    }
    fn jump_row(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> Vec<S> {
        self.0.jump_row(x, mode, u)
    }
    fn cost(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> S {
        self.0.cost(x, mode, u)
    }
    fn shake_radius(&self) -> S {
        self.0.shake_radius()
    }
}
