use super::{Constants, Control, EdgeControls, ModeSpace, PdmpModel};
use crate::error::{Error, Result};
use crate::network::{embed, make_network, Branches, NetworkPoint, StarNetwork};
use crate::scalar::{norm, Scalar};
use std::sync::Arc;

/// Vector-valued coefficient map on `R^m × E × A`.
pub type VecMap<S> = Arc<dyn Fn(&[S], usize, &[S]) -> Vec<S> + Send + Sync>;
/// Scalar coefficient map on `R^m × E × A`.
pub type ScalarMap<S> = Arc<dyn Fn(&[S], usize, &[S]) -> S + Send + Sync>;

/// A model given by closed-form coefficient maps on the ambient space, restricted to
/// a base network.
#[derive(Clone)]
pub struct CoefficientModel<S: Scalar> {
    name: String,
    net: StarNetwork<S>,
    modes: ModeSpace,
    /// `controls[mode][edge]`.
    controls: Vec<Vec<EdgeControls<S>>>,
    constants: Constants<S>,
    delta: S,
    drift: VecMap<S>,
    rate: ScalarMap<S>,
    jump: VecMap<S>,
    cost: ScalarMap<S>,
}

impl<S: Scalar> std::fmt::Debug for CoefficientModel<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientModel")
            .field("name", &self.name)
            .field("modes", &self.modes.labels())
            .field("delta", &self.delta)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> CoefficientModel<S> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base_network(&self) -> &StarNetwork<S> {
        &self.net
    }

    pub fn with_constants(mut self, constants: Constants<S>) -> Self {
        self.constants = constants;
        self
    }

    pub fn with_drift(mut self, drift: VecMap<S>) -> Self {
        self.drift = drift;
        self
    }

    pub fn with_rate(mut self, rate: ScalarMap<S>) -> Self {
        self.rate = rate;
        self
    }

    pub fn with_jump(mut self, jump: VecMap<S>) -> Self {
        self.jump = jump;
        self
    }

    pub fn with_cost(mut self, cost: ScalarMap<S>) -> Self {
        self.cost = cost;
        self
    }

    pub fn with_controls(mut self, mode: usize, edge: usize, c: EdgeControls<S>) -> Self {
        self.controls[mode][edge] = c;
        self
    }

    pub fn drift_map(&self) -> VecMap<S> {
        self.drift.clone()
    }

    pub fn rate_map(&self) -> ScalarMap<S> {
        self.rate.clone()
    }

    pub fn jump_map(&self) -> VecMap<S> {
        self.jump.clone()
    }

    pub fn cost_map(&self) -> ScalarMap<S> {
        self.cost.clone()
    }

    pub fn set_discount(&mut self, delta: S) {
        self.delta = delta;
    }
}

impl<S: Scalar> PdmpModel<S> for CoefficientModel<S> {
    type Net = StarNetwork<S>;

    fn network(&self) -> &StarNetwork<S> {
        &self.net
    }
    fn modes(&self) -> &ModeSpace {
        &self.modes
    }
    fn is_active(&self, branch: usize, mode: usize) -> bool {
        self.modes.is_active(branch, mode)
    }
    fn controls(&self, mode: usize, branch: usize) -> &EdgeControls<S> {
        &self.controls[mode][branch]
    }
    fn constants(&self) -> &Constants<S> {
        &self.constants
    }
    fn discount(&self) -> S {
        self.delta
    }
    fn drift(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> Vec<S> {
        (self.drift)(&embed(&self.net, x), mode, &u.a)
    }
    fn rate(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> S {
        (self.rate)(&embed(&self.net, x), mode, &u.a)
    }
    fn jump_row(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> Vec<S> {
        (self.jump)(&embed(&self.net, x), mode, &u.a)
    }
    fn cost(&self, x: &NetworkPoint<S>, mode: usize, u: &Control<S>) -> S {
        (self.cost)(&embed(&self.net, x), mode, &u.a)
    }
}

/// Builder for small hand-made models. Defaults: every edge active in every mode,
/// controls `A^{γ,j} = [-1,1]·e_j` with `a^± = ±e_j`, zero drift, zero rate,
/// uniform switching to the other modes, zero cost, `δ = 1`.
pub struct ModelBuilder<S: Scalar> {
    name: String,
    net: StarNetwork<S>,
    labels: Vec<String>,
    active: Vec<Vec<bool>>,
    controls: Option<Vec<Vec<EdgeControls<S>>>>,
    constants: Constants<S>,
    delta: S,
    drift: Option<VecMap<S>>,
    rate: Option<ScalarMap<S>>,
    jump: Option<VecMap<S>>,
    cost: Option<ScalarMap<S>>,
}

impl<S: Scalar> ModelBuilder<S> {
    pub fn new(directions: &[Vec<S>], n_modes: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::InvalidArgument("at least one mode is required".into()));
        }
        let net = make_network(directions)?;
        let n = net.edge_count();
        Ok(ModelBuilder {
            name: "custom".into(),
            labels: (0..n_modes).map(|k| format!("m{k}")).collect(),
            active: vec![vec![true; n_modes]; n],
            net,
            controls: None,
            constants: Constants {
                beta: S::c(0.5),
                eta: S::c(0.5),
                kappa: S::zero(),
                f_bound: S::one(),
                lambda_bound: S::zero(),
                l_bound: S::zero(),
                lip_f: S::zero(),
                lip_l: S::zero(),
                lip_lambda: S::zero(),
                lip_q: S::zero(),
            },
            delta: S::one(),
            drift: None,
            rate: None,
            jump: None,
            cost: None,
        })
    }

    pub fn name(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    pub fn labels(mut self, labels: Vec<String>) -> Self {
        self.labels = labels;
        self
    }

    pub fn inactive(mut self, edge: usize, mode: usize) -> Self {
        self.active[edge][mode] = false;
        self
    }

    pub fn controls(mut self, controls: Vec<Vec<EdgeControls<S>>>) -> Self {
        self.controls = Some(controls);
        self
    }

    pub fn constants(mut self, constants: Constants<S>) -> Self {
        self.constants = constants;
        self
    }

    pub fn discount(mut self, delta: S) -> Self {
        self.delta = delta;
        self
    }

    pub fn drift(mut self, f: impl Fn(&[S], usize, &[S]) -> Vec<S> + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn rate(mut self, f: impl Fn(&[S], usize, &[S]) -> S + Send + Sync + 'static) -> Self {
        self.rate = Some(Arc::new(f));
        self
    }

    pub fn jump(mut self, f: impl Fn(&[S], usize, &[S]) -> Vec<S> + Send + Sync + 'static) -> Self {
        self.jump = Some(Arc::new(f));
        self
    }

    pub fn cost(mut self, f: impl Fn(&[S], usize, &[S]) -> S + Send + Sync + 'static) -> Self {
        self.cost = Some(Arc::new(f));
        self
    }

    pub fn build(self) -> Result<CoefficientModel<S>> {
        let n_modes = self.labels.len();
        let m = self.net.dim();
        let net = self.net;
        let controls = match self.controls {
            Some(c) => c,
            None => (0..n_modes)
                .map(|mode| {
                    (0..net.edge_count())
                        .map(|j| {
                            let e = net.direction(j).to_vec();
                            let neg: Vec<S> = e.iter().map(|&x| -x).collect();
                            let mut c = EdgeControls::segment(neg.clone(), e.clone());
                            if self.active[j][mode] {
                                c.plus = Some(e);
                                c.minus = Some(neg.clone());
                                c.endpoint = Some(neg);
                            } else {
                                c.minus = Some(e);
                                c.zero = Some(vec![S::zero(); m]);
                            }
                            c
                        })
                        .collect()
                })
                .collect(),
        };
        if controls.len() != n_modes || controls.iter().any(|row| row.len() != net.edge_count()) {
            return Err(Error::InvalidArgument("control table must be modes x edges".into()));
        }
        let flip = move |_: &[S], mode: usize, _: &[S]| -> Vec<S> {
            if n_modes == 1 {
                return vec![S::one()];
            }
            let w = S::one() / S::c((n_modes - 1) as f64);
            (0..n_modes).map(|g| if g == mode { S::zero() } else { w }).collect()
        };
        Ok(CoefficientModel {
            name: self.name,
            modes: ModeSpace::new(self.labels, self.active)?,
            controls,
            constants: self.constants,
            delta: self.delta,
            drift: self.drift.unwrap_or_else(|| Arc::new(move |_, _, _| vec![S::zero(); m])),
            rate: self.rate.unwrap_or_else(|| Arc::new(|_, _, _| S::zero())),
            jump: self.jump.unwrap_or_else(|| Arc::new(flip)),
            cost: self.cost.unwrap_or_else(|| Arc::new(|_, _, _| S::zero())),
            net,
        })
    }
}

/// The three-road example: `e_1 = (0,1)`, `e_2 = (1,0)`, `e_3 = -e_2`, modes
/// `(0,0,0), (0,1,1), (1,0,0), (1,1,1)`, square-root clearing drift on inactive roads
/// and propensity-driven switching.
pub fn traffic3_model<S: Scalar>(l0: S, lambda0: S, delta: S) -> Result<CoefficientModel<S>> {
    if !(l0 > S::zero() && lambda0 > S::zero() && delta > S::zero()) {
        return Err(Error::InvalidArgument("traffic3 parameters must be positive".into()));
    }
    let (z, o) = (S::zero(), S::one());
    let dirs = vec![vec![z, o], vec![o, z], vec![-o, z]];
    let bits: [(u8, u8); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];
    let labels: Vec<String> = bits.iter().map(|&(g1, g2)| format!("({g1},{g2},{g2})")).collect();
    let mut builder = ModelBuilder::new(&dirs, 4)?.name("traffic3").labels(labels).discount(delta);
    for (mode, &(g1, g2)) in bits.iter().enumerate() {
        if g1 == 0 {
            builder = builder.inactive(0, mode);
        }
        if g2 == 0 {
            builder = builder.inactive(1, mode).inactive(2, mode);
        }
    }
    let e1 = vec![z, o];
    let e2 = vec![o, z];
    let neg = |v: &Vec<S>| v.iter().map(|&x| -x).collect::<Vec<S>>();
    let zero = vec![z, z];
    let controls = bits
        .iter()
        .map(|&(g1, g2)| {
            let mut c1 = EdgeControls::segment(neg(&e1), e1.clone());
            if g1 == 1 {
                c1.plus = Some(e1.clone());
                c1.minus = Some(neg(&e1));
                c1.endpoint = Some(neg(&e1));
            } else {
                c1.minus = Some(e1.clone());
                c1.zero = Some(zero.clone());
                c1.endpoint = Some(e1.clone());
            }
            let mut c2 = EdgeControls::segment(neg(&e2), e2.clone());
            let mut c3 = c2.clone();
            if g2 == 1 {
                c2.plus = Some(e2.clone());
                c2.minus = Some(neg(&e2));
                c2.endpoint = Some(neg(&e2));
                c3.plus = Some(neg(&e2));
                c3.minus = Some(e2.clone());
                c3.endpoint = Some(e2.clone());
            } else {
                for c in [&mut c2, &mut c3] {
                    c.minus = Some(e2.clone());
                    c.zero = Some(zero.clone());
                    c.endpoint = Some(e2.clone());
                }
            }
            vec![c1, c2, c3]
        })
        .collect();
    let gamma = move |mode: usize| -> (S, S) {
        let (g1, g2) = bits[mode];
        (S::c(g1 as f64), S::c(g2 as f64))
    };
    let cost_of = move |x: &[S], mode: usize, a: &[S]| -> S {
        let (g1, g2) = gamma(mode);
        let r = norm(x);
        l0 + (S::one() - r) * (S::one() - r) / (g1 + g2 + S::one()) + norm(a) * (r - r * r)
    };
    let rate_of = move |x: &[S], mode: usize, a: &[S]| -> S {
        (0..4).filter(|&g| g != mode).map(|g| lambda0 * cost_of(x, g, a)).sum()
    };
    let l_bound = l0 + o;
    let lambda_bound = lambda0 * (S::c(3.0) * l0 + S::c(2.0));
    builder
        .controls(controls)
        .constants(Constants {
            beta: S::c(0.5),
            eta: S::c(0.5),
            kappa: S::c(0.5),
            f_bound: o,
            lambda_bound,
            l_bound,
            lip_f: z,
            lip_l: S::c(3.0),
            lip_lambda: S::c(9.0) * lambda0,
            lip_q: S::c(4.0) / l0,
        })
        .drift(move |x, mode, a| {
            let (g1, g2) = gamma(mode);
            let na = norm(a);
            let fy = g1 * a[1] - na * (S::one() - g1) * x[1].pos().sqrt();
            let fx = g2 * a[0] - na * (S::one() - g2) * x[0].pos().sqrt()
                + na * (S::one() - g2) * (-x[0]).pos().sqrt();
            vec![fx, fy]
        })
        .cost(cost_of)
        .rate(rate_of)
        .jump(move |x, mode, a| {
            let total = rate_of(x, mode, a);
            (0..4).map(|g| if g == mode { S::zero() } else { lambda0 * cost_of(x, g, a) / total }).collect()
        })
        .build()
}
