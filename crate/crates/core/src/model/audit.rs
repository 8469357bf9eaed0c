use super::{junction_branch, velocity, Control, EdgeControls, PdmpModel};
use crate::network::{NetworkPoint, StarNetwork};
use crate::scalar::{norm, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// A sampled input at which an assumption failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub mode: usize,
    pub edge: usize,
    pub coord: f64,
    pub control: Vec<f64>,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    pub assumption: String,
    pub passed: bool,
    /// Largest sampled value of the audited quantity, when it is a constant.
    pub estimate: Option<f64>,
    pub witness: Option<Witness>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn entry(&self, name: &str) -> Option<&AuditEntry> {
        self.entries.iter().find(|e| e.assumption == name)
    }

    pub fn passed(&self, name: &str) -> bool {
        self.entry(name).is_some_and(|e| e.passed)
    }

    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| !e.passed).map(|e| e.assumption.as_str()).collect()
    }
}

/// Accumulates `value <= bound` checks and keeps the worst violation.
struct Check {
    name: &'static str,
    worst: Option<(f64, Witness)>,
    estimate: Option<f64>,
    note: Option<String>,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Check { name, worst: None, estimate: None, note: None }
    }

    fn le<S: Scalar>(&mut self, value: S, bound: S, at: (usize, usize, S, &[S])) {
        let (v, b) = (value.f64(), bound.f64());
        if !(v <= b + 1e-9 * (1.0 + b.abs())) {
            self.record(v, b, at);
        }
    }

    /// Strict `value < bound`, no tolerance.
    fn lt<S: Scalar>(&mut self, value: S, bound: S, at: (usize, usize, S, &[S])) {
        if !(value < bound) {
            self.record(value.f64(), bound.f64(), at);
        }
    }

    fn record<S: Scalar>(&mut self, v: f64, b: f64, at: (usize, usize, S, &[S])) {
        {
            let excess = if v.is_nan() { f64::INFINITY } else { (v - b).max(0.0) };
            if self.worst.as_ref().is_none_or(|(w, _)| excess > *w) {
                let witness = Witness {
                    mode: at.0,
                    edge: at.1,
                    coord: at.2.f64(),
                    control: at.3.iter().map(|x| x.f64()).collect(),
                    value: v,
                    bound: b,
                };
                self.worst = Some((excess, witness));
            }
        }
    }

    fn fail_with(&mut self, note: String) {
        self.note = Some(note);
        if self.worst.is_none() {
            self.worst = Some((f64::INFINITY, Witness { mode: 0, edge: 0, coord: 0.0, control: vec![], value: f64::NAN, bound: f64::NAN }));
        }
    }

    fn track(&mut self, v: f64) {
        self.estimate = Some(self.estimate.map_or(v, |e: f64| e.max(v)));
    }

    fn finish(self) -> AuditEntry {
        let passed = self.worst.is_none();
        AuditEntry {
            assumption: self.name.to_string(),
            passed,
            estimate: self.estimate,
            witness: self.worst.and_then(|(_, w)| if w.value.is_nan() && w.control.is_empty() { None } else { Some(w) }),
            note: self.note,
        }
    }
}

fn sample_control<S: Scalar>(c: &EdgeControls<S>, rng: &mut ChaCha8Rng) -> Vec<S> {
    let [p, q] = &c.segments[rng.gen_range(0..c.segments.len())];
    let t = S::c(rng.gen::<f64>());
    p.iter().zip(q).map(|(&x, &y)| x + t * (y - x)).collect()
}

/// Samples every assumption of the model at random points and controls.
pub fn audit_assumptions<S, M>(model: &M, n_samples: usize, seed: u64) -> AuditReport
where
    S: Scalar,
    M: PdmpModel<S, Net = StarNetwork<S>> + ?Sized,
{
    let net = model.network();
    let k = model.constants().clone();
    let n_modes = model.mode_count();
    let n_edges = net.edge_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_samples.max(8);
    let o = NetworkPoint::<S>::junction();

    let mut a1 = Check::new("A1");
    let mut a2 = Check::new("A2");
    let mut a3 = Check::new("A3");
    let mut a4 = Check::new("A4");
    let mut aa = Check::new("Aa");
    let mut ab = Check::new("Ab");
    let mut abp = Check::new("Ab'");
    let mut ac = Check::new("Ac");
    let mut acp = Check::new("Ac'");
    let mut bb = Check::new("B");
    let mut cc = Check::new("C");
    let mut two_sided = 0.0_f64;

    for mode in 0..n_modes {
        // junction controls gathered across branches, for (Aa) and (C)
        let mut junction_costs: Vec<S> = Vec::new();
        let mut junction_nonempty = false;
        for j in 0..n_edges {
            let set = model.controls(mode, j);
            let mut controls = set.discretize(9);
            for _ in 0..n {
                controls.push(sample_control(set, &mut rng));
            }
            let ctl = |a: &Vec<S>| Control::new(a.clone(), j);

            for s in 0..n {
                let a = &controls[s % controls.len()];
                let u = ctl(a);
                let r = S::c(rng.gen::<f64>());
                let r2 = S::c(rng.gen::<f64>());
                let x = NetworkPoint::on(j, r);
                let y = NetworkPoint::on(j, r2);
                let at = (mode, j, r, a.as_slice());

                let (fx, fy) = (model.drift(&x, mode, &u), model.drift(&y, mode, &u));
                a1.le(norm(&fx), k.f_bound, at);
                let dr = r - r2;
                if dr.abs() > S::c(1e-9) {
                    let vx = velocity(model, j, &x, mode, &u);
                    let vy = velocity(model, j, &y, mode, &u);
                    a1.le((vx - vy) * dr / (dr * dr), k.lip_f, at);
                    let q2 = fx.iter().zip(&fy).map(|(&p, &q)| (p - q) * (p - q)).sum::<S>().sqrt() / dr.abs();
                    two_sided = two_sided.max(q2.f64());
                }

                let lx = model.rate(&x, mode, &u);
                a2.le(-lx, S::zero(), at);
                a2.le(lx, k.lambda_bound, at);
                a2.track(lx.f64());
                let cx = model.cost(&x, mode, &u);
                a4.le(cx.abs(), k.l_bound, at);
                a4.track(cx.abs().f64());
                let qx = model.jump_row(&x, mode, &u);
                let sum: S = qx.iter().copied().sum();
                a3.le((sum - S::one()).abs(), S::c(1e-12), at);
                a3.le(qx[mode].abs(), S::zero(), at);
                for &q in &qx {
                    a3.le(-q, S::zero(), at);
                    a3.le(q, S::one(), at);
                }

                // Lipschitz quotients, against a point on the same edge and on another edge
                let other = (j + 1 + s % (n_edges.max(2) - 1)) % n_edges;
                for z in [y, NetworkPoint::on(other, r2)] {
                    let d = crate::scalar::dist(&crate::network::embed(net, &x), &crate::network::embed(net, &z));
                    if d <= S::c(1e-9) {
                        continue;
                    }
                    let uz = if z.edge == Some(j) { u.clone() } else { Control::new(a.clone(), other) };
                    if z.edge != Some(j) && !model.controls(mode, other).contains(a) {
                        continue;
                    }
                    let ql = (model.rate(&z, mode, &uz) - lx).abs() / d;
                    a2.le(ql, k.lip_lambda, at);
                    let qc = (model.cost(&z, mode, &uz) - cx).abs() / d;
                    a4.le(qc, k.lip_l, at);
                    let qz = model.jump_row(&z, mode, &uz);
                    let qq = qz.iter().zip(&qx).map(|(&p, &q)| (p - q).abs()).fold(S::zero(), S::max) / d;
                    a3.le(qq, k.lip_q, at);
                }
            }

            // (Aa) at the endpoint and the junction
            let e = NetworkPoint::on(j, S::one());
            let mut pushes_out = false;
            let mut endpoint_nonempty = false;
            for a in &controls {
                let v = velocity(model, j, &e, mode, &ctl(a));
                if v > S::zero() {
                    pushes_out = true;
                } else {
                    endpoint_nonempty = true;
                }
                match junction_branch(net, &model.drift(&o, mode, &ctl(a))) {
                    Ok(None) => junction_nonempty = true,
                    Ok(Some((b, _))) if b == j => junction_nonempty = true,
                    _ => {}
                }
                junction_costs.push(model.cost(&o, mode, &ctl(a)));
                let le = model.cost(&e, mode, &ctl(a));
                let le0 = model.cost(&e, mode, &ctl(&controls[0]));
                cc.le((le - le0).abs(), S::c(1e-12), (mode, j, S::one(), a.as_slice()));
            }
            if !endpoint_nonempty {
                aa.fail_with(format!("A at e_{j} is empty in mode {mode}"));
            }
            if pushes_out {
                match &set.endpoint {
                    Some(a) if set.contains(a) => {
                        let v = velocity(model, j, &e, mode, &ctl(a));
                        aa.lt(v, -k.beta, (mode, j, S::one(), a.as_slice()));
                    }
                    _ => aa.fail_with(format!("missing endpoint control for edge {j}, mode {mode}")),
                }
            }

            // (Ab)
            if model.is_active(j, mode) {
                match (&set.plus, &set.minus) {
                    (Some(p), Some(m)) if set.contains(p) && set.contains(m) => {
                        let vp = velocity(model, j, &o, mode, &ctl(p));
                        let vm = velocity(model, j, &o, mode, &ctl(m));
                        ab.lt(k.beta, vp, (mode, j, S::zero(), p.as_slice()));
                        ab.lt(vm, -k.beta, (mode, j, S::zero(), m.as_slice()));
                    }
                    _ => ab.fail_with(format!("missing a^+/a^- for edge {j}, mode {mode}")),
                }
            } else {
                match (&set.minus, &set.zero) {
                    (Some(m), Some(z)) if set.contains(m) && set.contains(z) => {
                        for s in 1..=n {
                            let r = k.eta * S::c(s as f64 / n as f64);
                            let x = NetworkPoint::on(j, r);
                            let v = velocity(model, j, &x, mode, &ctl(m));
                            ab.le(v, -k.beta * r.powf(k.kappa), (mode, j, r, m.as_slice()));
                            let a = &controls[s % controls.len()];
                            ab.le(velocity(model, j, &x, mode, &ctl(a)), S::zero(), (mode, j, r, a.as_slice()));
                        }
                        ab.le(norm(&model.drift(&o, mode, &ctl(z))), S::c(1e-12), (mode, j, S::zero(), z.as_slice()));
                    }
                    _ => ab.fail_with(format!("missing a^-/a^0 for edge {j}, mode {mode}")),
                }

                // (Ab'), (Ac), (Ac') at the junction
                let c0 = model.cost(&o, mode, &ctl(&controls[0]));
                let l0 = model.rate(&o, mode, &ctl(&controls[0]));
                let q0 = model.jump_row(&o, mode, &ctl(&controls[0]));
                let all_outgoing = controls.iter().all(|a| {
                    matches!(junction_branch(net, &model.drift(&o, mode, &ctl(a))), Ok(None))
                        || matches!(junction_branch(net, &model.drift(&o, mode, &ctl(a))), Ok(Some((b, _))) if b == j)
                });
                for a in &controls {
                    let u = ctl(a);
                    let at = (mode, j, S::zero(), a.as_slice());
                    if j < net.free_count() {
                        abp.le(norm(&model.drift(&o, mode, &u)), S::c(1e-12), at);
                    }
                    ac.le((model.cost(&o, mode, &u) - c0).abs(), S::c(1e-12), at);
                    if !all_outgoing {
                        acp.le((model.rate(&o, mode, &u) - l0).abs(), S::c(1e-12), at);
                        let dq = model.jump_row(&o, mode, &u).iter().zip(&q0).map(|(&p, &q)| (p - q).abs()).fold(S::zero(), S::max);
                        acp.le(dq, S::c(1e-12), at);
                    }
                }
            }

            // (B)
            if let Some(jp) = net.antipode(j) {
                if !set.same_set(model.controls(mode, jp)) {
                    bb.fail_with(format!("A^(mode {mode}) differs on antipodal edges {j} and {jp}"));
                    bb.le(S::one(), S::zero(), (mode, j, S::zero(), &[]));
                }
            }
        }
        if !junction_nonempty {
            aa.fail_with(format!("no admissible control at O in mode {mode}"));
        }
        if let Some(&first) = junction_costs.first() {
            for &c in &junction_costs {
                cc.le((c - first).abs(), S::c(1e-12), (mode, 0, S::zero(), &[]));
            }
        }
    }

    a1.track(two_sided);
    if two_sided > k.lip_f.f64() * (1.0 + 1e-9) + 1e-12 {
        a1.note = Some(format!(
            "f is not Lipschitz with constant {} (sampled quotient {two_sided:.3e}); the one-sided inner-product form was checked",
            k.lip_f
        ));
    }
    AuditReport { entries: [a1, a2, a3, a4, aa, ab, abp, ac, acp, bb, cc].into_iter().map(Check::finish).collect() }
}
