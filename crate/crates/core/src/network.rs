//! Star-shaped networks: edges `[0,1]·e_j` glued at the junction `O`, the geodesic
//! metric, tangent cones, and the extended network with prolongations and fictive
//! branches.

use crate::error::{Error, Result};
use crate::scalar::{dist, dot, norm, Scalar};
use serde::Serialize;

/// Coordinates closer than this to zero are identified with the junction.
pub const CANON_TOL: f64 = 1e-12;

/// A position on a star network. `edge == None` is the junction `O`, whose
/// coordinate is always zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NetworkPoint<S> {
    pub edge: Option<usize>,
    pub coord: S,
}

impl<S: Scalar> NetworkPoint<S> {
    pub fn junction() -> Self {
        NetworkPoint { edge: None, coord: S::zero() }
    }

    /// Point `coord·e_edge`, canonicalized to the junction when `|coord| < 1e-12`.
    pub fn on(edge: usize, coord: S) -> Self {
        if coord.abs() < S::tol(CANON_TOL) {
            Self::junction()
        } else {
            NetworkPoint { edge: Some(edge), coord }
        }
    }

    pub fn is_junction(&self) -> bool {
        self.edge.is_none()
    }

    /// Distance to the junction.
    pub fn radius(&self) -> S {
        self.coord.abs()
    }
}

/// Geodesic distance through the junction.
pub fn geodesic_distance<S: Scalar>(p: &NetworkPoint<S>, q: &NetworkPoint<S>) -> S {
    match (p.edge, q.edge) {
        (Some(a), Some(b)) if a == b => (p.coord - q.coord).abs(),
        _ => p.coord.abs() + q.coord.abs(),
    }
}

/// Common view of base and extended networks as a set of branches leaving `O`.
pub trait Branches<S: Scalar>: Send + Sync {
    fn dim(&self) -> usize;
    fn branch_count(&self) -> usize;
    fn direction(&self, b: usize) -> &[S];
    fn length(&self, b: usize) -> S;
    /// Branch whose direction is `-direction(b)`, if the network has one.
    fn opposite(&self, b: usize) -> Option<usize>;

    /// The point at signed coordinate `s` on the line through branch `b`.
    fn line_point(&self, b: usize, s: S) -> Option<NetworkPoint<S>> {
        if s >= S::zero() {
            Some(NetworkPoint::on(b, s))
        } else {
            self.opposite(b).map(|o| NetworkPoint::on(o, -s))
        }
    }

    /// Whether `p` lies within the legal interval of its branch, up to `slack`.
    fn contains(&self, p: &NetworkPoint<S>, slack: S) -> bool {
        match p.edge {
            None => true,
            Some(b) => {
                b < self.branch_count() && p.coord >= -slack && p.coord <= self.length(b) + slack
            }
        }
    }
}

/// The base network `𝒢̄`: unit-length edges. Antipode-free edges come first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StarNetwork<S> {
    dim: usize,
    directions: Vec<Vec<S>>,
    antipode: Vec<Option<usize>>,
    free: usize,
}

/// Builds the network, normalizing directions and ordering antipode-free edges first.
pub fn make_network<S: Scalar>(directions: &[Vec<S>]) -> Result<StarNetwork<S>> {
    if directions.len() < 2 {
        return Err(Error::BadNetwork("at least two directions are required".into()));
    }
    let dim = directions[0].len();
    if dim < 2 {
        return Err(Error::BadNetwork("ambient dimension must be at least 2".into()));
    }
    let mut unit = Vec::with_capacity(directions.len());
    for (i, d) in directions.iter().enumerate() {
        if d.len() != dim {
            return Err(Error::BadDimension { index: i, expected: dim, found: d.len() });
        }
        let n = norm(d);
        if !(n > S::zero()) || !n.is_finite() {
            return Err(Error::BadNetwork(format!("direction {i} is zero or not finite")));
        }
        unit.push(d.iter().map(|&x| x / n).collect::<Vec<S>>());
    }
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            if dist(&unit[i], &unit[j]) < S::tol(1e-9) {
                return Err(Error::DuplicateDirection(i, j));
            }
        }
    }
    let is_antipodal = |a: &[S], b: &[S]| {
        a.iter().zip(b).map(|(&x, &y)| (x + y) * (x + y)).sum::<S>().sqrt() < S::tol(1e-12)
    };
    let has_antipode: Vec<bool> = (0..unit.len())
        .map(|i| (0..unit.len()).any(|j| j != i && is_antipodal(&unit[i], &unit[j])))
        .collect();
    let order: Vec<usize> = (0..unit.len())
        .filter(|&i| !has_antipode[i])
        .chain((0..unit.len()).filter(|&i| has_antipode[i]))
        .collect();
    let directions: Vec<Vec<S>> = order.iter().map(|&i| unit[i].clone()).collect();
    let antipode = (0..directions.len())
        .map(|i| {
            (0..directions.len()).find(|&j| j != i && is_antipodal(&directions[i], &directions[j]))
        })
        .collect();
    let free = has_antipode.iter().filter(|&&h| !h).count();
    Ok(StarNetwork { dim, directions, antipode, free })
}

impl<S: Scalar> StarNetwork<S> {
    /// Number of edges `N`.
    pub fn edge_count(&self) -> usize {
        self.directions.len()
    }

    /// Number `M` of edges without an antipode; these are edges `0..M`.
    pub fn free_count(&self) -> usize {
        self.free
    }

    pub fn antipode(&self, j: usize) -> Option<usize> {
        self.antipode[j]
    }

    pub fn directions(&self) -> &[Vec<S>] {
        &self.directions
    }
}

impl<S: Scalar> Branches<S> for StarNetwork<S> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn branch_count(&self) -> usize {
        self.directions.len()
    }
    fn direction(&self, b: usize) -> &[S] {
        &self.directions[b]
    }
    fn length(&self, _b: usize) -> S {
        S::one()
    }
    fn opposite(&self, b: usize) -> Option<usize> {
        self.antipode[b]
    }
}

/// `𝒢^{+,ε}`: every edge prolonged to `1+ε`, plus a fictive branch `N+j` of length `ε`
/// in direction `-e_j` for each antipode-free edge `j < M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtendedNetwork<S> {
    base: StarNetwork<S>,
    epsilon: S,
    fictive_dirs: Vec<Vec<S>>,
}

pub fn extend<S: Scalar>(net: &StarNetwork<S>, epsilon: S) -> Result<ExtendedNetwork<S>> {
    if !(epsilon > S::zero() && epsilon < S::one()) {
        return Err(Error::BadEpsilon(epsilon.f64()));
    }
    let fictive_dirs = (0..net.free_count())
        .map(|j| net.directions[j].iter().map(|&x| -x).collect())
        .collect();
    Ok(ExtendedNetwork { base: net.clone(), epsilon, fictive_dirs })
}

impl<S: Scalar> ExtendedNetwork<S> {
    pub fn base(&self) -> &StarNetwork<S> {
        &self.base
    }

    pub fn epsilon(&self) -> S {
        self.epsilon
    }

    pub fn is_fictive(&self, b: usize) -> bool {
        b >= self.base.edge_count()
    }

    /// Original edge a branch belongs to (a fictive branch `N+j` maps to `j`).
    pub fn parent(&self, b: usize) -> usize {
        let n = self.base.edge_count();
        if b >= n {
            b - n
        } else {
            b
        }
    }

    /// Drops the extensions. Returns `None` for points outside `𝒢̄`.
    pub fn restrict(&self, p: &NetworkPoint<S>) -> Option<NetworkPoint<S>> {
        match p.edge {
            None => Some(*p),
            Some(b) if !self.is_fictive(b) && p.coord <= S::one() + S::tol(CANON_TOL) => {
                Some(NetworkPoint::on(b, p.coord.min(S::one())))
            }
            _ => None,
        }
    }
}

impl<S: Scalar> Branches<S> for ExtendedNetwork<S> {
    fn dim(&self) -> usize {
        self.base.dim
    }
    fn branch_count(&self) -> usize {
        self.base.edge_count() + self.fictive_dirs.len()
    }
    fn direction(&self, b: usize) -> &[S] {
        let n = self.base.edge_count();
        if b < n {
            &self.base.directions[b]
        } else {
            &self.fictive_dirs[b - n]
        }
    }
    fn length(&self, b: usize) -> S {
        if self.is_fictive(b) {
            self.epsilon
        } else {
            S::one() + self.epsilon
        }
    }
    fn opposite(&self, b: usize) -> Option<usize> {
        let n = self.base.edge_count();
        if b >= n {
            Some(b - n)
        } else if b < self.base.free_count() {
            Some(n + b)
        } else {
            self.base.antipode[b]
        }
    }
}

/// `r·e_j` as a vector of `R^m`.
pub fn embed<S: Scalar, G: Branches<S> + ?Sized>(net: &G, p: &NetworkPoint<S>) -> Vec<S> {
    match p.edge {
        None => vec![S::zero(); net.dim()],
        Some(b) => net.direction(b).iter().map(|&e| e * p.coord).collect(),
    }
}

/// Nearest network point in Euclidean distance. Ties go to the lowest branch index.
pub fn project_to_network<S: Scalar, G: Branches<S> + ?Sized>(y: &[S], net: &G) -> NetworkPoint<S> {
    let mut best: Option<(S, NetworkPoint<S>)> = None;
    for b in 0..net.branch_count() {
        let e = net.direction(b);
        let t = dot(y, e).max(S::zero()).min(net.length(b));
        let d = y.iter().zip(e).map(|(&yi, &ei)| (yi - t * ei) * (yi - t * ei)).sum::<S>().sqrt();
        let p = NetworkPoint::on(b, t);
        let better = match &best {
            None => true,
            Some((bd, bp)) => {
                let slack = S::tol(1e-12) * (S::one() + *bd);
                d < *bd - slack || (d <= *bd + slack && p.radius() < bp.radius() - slack)
            }
        };
        if better {
            best = Some((d, p));
        }
    }
    best.map(|(_, p)| p).unwrap_or_else(NetworkPoint::junction)
}

/// Inverse of [`embed`] for points lying on the network.
pub fn locate<S: Scalar, G: Branches<S> + ?Sized>(net: &G, y: &[S]) -> NetworkPoint<S> {
    project_to_network(y, net)
}

/// A signed edge direction `±e_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SignedDirection {
    pub edge: usize,
    pub outward: bool,
}

/// Tangent cone of the base network at `p`.
pub fn tangent_cone<S: Scalar>(net: &StarNetwork<S>, p: &NetworkPoint<S>) -> Vec<SignedDirection> {
    match p.edge {
        None => (0..net.edge_count()).map(|edge| SignedDirection { edge, outward: true }).collect(),
        Some(edge) if p.coord >= S::one() - S::tol(CANON_TOL) => {
            vec![SignedDirection { edge, outward: false }]
        }
        Some(edge) => vec![
            SignedDirection { edge, outward: true },
            SignedDirection { edge, outward: false },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traffic() -> StarNetwork<f64> {
        make_network(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap()
    }

    #[test]
    fn traffic_network_shape() {
        let net = traffic();
        assert_eq!(net.edge_count(), 3);
        assert_eq!(net.free_count(), 1);
        assert_eq!(net.antipode(1), Some(2));
        assert_eq!(net.antipode(2), Some(1));
        assert_eq!(net.antipode(0), None);
        assert_eq!(net.direction(0), &[0.0, 1.0]);
    }

    #[test]
    fn free_edges_are_reordered_first() {
        let net = make_network(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![-3.0, 0.0]]).unwrap();
        assert_eq!(net.direction(0), &[0.0, 1.0]);
        assert_eq!(net.direction(1), &[1.0, 0.0]);
        assert_eq!(net.free_count(), 1);
    }

    #[test]
    fn line_network_has_no_free_edge() {
        let net = make_network(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!((net.edge_count(), net.free_count()), (2, 0));
        assert_eq!(net.antipode(0), Some(1));
    }

    #[test]
    fn construction_errors() {
        assert_eq!(
            make_network(&[vec![1.0, 0.0], vec![1.0, 0.0]]),
            Err(Error::DuplicateDirection(0, 1))
        );
        assert!(matches!(
            make_network(&[vec![1.0, 0.0], vec![1.0, 0.0, 0.0]]),
            Err(Error::BadDimension { index: 1, .. })
        ));
        assert!(make_network(&[vec![1.0, 0.0], vec![0.0, 0.0]]).is_err());
        assert!(make_network(&[vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn geodesic_examples() {
        let p = NetworkPoint::<f64>::on(0, 0.3);
        assert!((geodesic_distance(&p, &NetworkPoint::on(0, 0.8)) - 0.5).abs() < 1e-15);
        assert!((geodesic_distance(&p, &NetworkPoint::on(1, 0.4)) - 0.7).abs() < 1e-15);
        let o = NetworkPoint::<f64>::junction();
        assert_eq!(geodesic_distance(&o, &o), 0.0);
    }

    #[test]
    fn canonicalization() {
        assert!(NetworkPoint::on(2, 1e-13_f64).is_junction());
        assert!(!NetworkPoint::on(2, 1e-11_f64).is_junction());
    }

    #[test]
    fn projection_examples() {
        let net = traffic();
        assert_eq!(project_to_network(&[0.0, 0.5], &net), NetworkPoint::on(0, 0.5));
        assert_eq!(project_to_network(&[0.0, 1.2], &net), NetworkPoint::on(0, 1.0));
        assert_eq!(project_to_network(&[0.5, 0.5], &net), NetworkPoint::on(0, 0.5));
        assert!(project_to_network(&[0.0, -0.5], &net).is_junction());
    }

    #[test]
    fn projection_matches_dense_search() {
        let net = traffic();
        let samples: Vec<NetworkPoint<f64>> = (0..3)
            .flat_map(|b| (0..=2000).map(move |k| NetworkPoint::on(b, k as f64 / 2000.0)))
            .collect();
        for y in [[0.3, 0.3], [0.7, 0.71], [-0.2, 0.9], [0.01, -0.4], [1.5, 1.5]] {
            let p = project_to_network(&y, &net);
            let dp = dist(&embed(&net, &p), &y);
            let best = samples.iter().map(|q| dist(&embed(&net, q), &y)).fold(f64::INFINITY, f64::min);
            assert!(dp <= best + 1e-12, "{y:?}");
        }
    }

    #[test]
    fn tangent_cones() {
        let net = traffic();
        let c = tangent_cone(&net, &NetworkPoint::on(1, 0.5));
        assert_eq!(c.len(), 2);
        assert_eq!(tangent_cone(&net, &NetworkPoint::on(0, 1.0)), vec![SignedDirection { edge: 0, outward: false }]);
        let o = tangent_cone(&net, &NetworkPoint::junction());
        assert_eq!(o.iter().filter(|d| d.outward).count(), 3);
    }

    #[test]
    fn extension_of_traffic_network() {
        let net = traffic();
        let x = extend(&net, 0.1).unwrap();
        assert_eq!(x.branch_count(), 4);
        assert_eq!(x.direction(3), &[-0.0, -1.0]);
        assert!((x.length(0) - 1.1).abs() < 1e-15);
        assert!((x.length(3) - 0.1).abs() < 1e-15);
        assert_eq!(x.opposite(0), Some(3));
        assert_eq!(x.opposite(3), Some(0));
        assert_eq!(x.opposite(1), Some(2));
        assert_eq!(x.line_point(0, -0.05), Some(NetworkPoint::on(3, 0.05)));
        assert_eq!(x.line_point(1, -1.05), Some(NetworkPoint::on(2, 1.05)));
        assert_eq!(x.base(), &net);
        assert_eq!(x.restrict(&NetworkPoint::on(3, 0.05)), None);
        assert_eq!(x.restrict(&NetworkPoint::on(1, 0.5)), Some(NetworkPoint::on(1, 0.5)));
        assert_eq!(extend(&net, 0.0), Err(Error::BadEpsilon(0.0)));
        assert!(extend(&net, 1.0).is_err());
        for b in 0..4 {
            let o = x.opposite(b).unwrap();
            for k in 0..2 {
                assert!((x.direction(b)[k] + x.direction(o)[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generic_over_f32() {
        let net = make_network(&[vec![0.0_f32, 1.0], vec![1.0, 0.0]]).unwrap();
        let p = project_to_network(&[0.2_f32, 0.9], &net);
        assert_eq!(p.edge, Some(0));
    }

    fn arb_point() -> impl Strategy<Value = NetworkPoint<f64>> {
        (0usize..4, 0.0..=1.0f64).prop_map(|(b, r)| if b == 3 { NetworkPoint::junction() } else { NetworkPoint::on(b, r) })
    }

    proptest! {
        #[test]
        fn geodesic_is_a_metric(p in arb_point(), q in arb_point(), r in arb_point()) {
            let d = |a: &NetworkPoint<f64>, b: &NetworkPoint<f64>| geodesic_distance(a, b);
            prop_assert!(d(&p, &q) >= 0.0);
            prop_assert_eq!(d(&p, &q), d(&q, &p));
            prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-12);
            prop_assert_eq!(d(&p, &q) == 0.0, p == q);
        }

        #[test]
        fn projection_inverts_embedding(p in arb_point()) {
            let net = traffic();
            let back = locate(&net, &embed(&net, &p));
            prop_assert!(geodesic_distance(&back, &p) < 1e-12);
            prop_assert_eq!(back.edge, p.edge);
        }
    }
}
