//! Run configuration. Every section rejects unknown keys; omitted sections take defaults.

use pdmpnet_core::model::traffic3_model;
use pdmpnet_core::{Model, Point};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub audit: AuditOpts,
    pub simulate: SimulateOpts,
    pub project: ProjectOpts,
    pub extend: ExtendOpts,
    pub linearize: LinearizeOpts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub name: String,
    pub l0: f64,
    pub lambda0: f64,
    pub delta: f64,
    /// Jump mass moved onto the current mode; any positive value breaks the kernel.
    pub self_jump: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { name: "traffic3".into(), l0: 0.1, lambda0: 1.0, delta: 1.0, self_jump: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub dx: f64,
    /// Defaults to `dx/(2|f|_0)`.
    pub h: Option<f64>,
    pub n_a: usize,
    pub epsilon: f64,
    /// Defaults to the extended shaking radius of `epsilon`.
    pub rho: Option<f64>,
    /// Integration step of simulated paths.
    pub flow_h: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { dx: 0.05, h: None, n_a: 5, epsilon: 0.1, rho: None, flow_h: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditOpts {
    pub samples: usize,
}

impl Default for AuditOpts {
    fn default() -> Self {
        AuditOpts { samples: 400 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSpec {
    /// `None` is the junction.
    pub edge: Option<usize>,
    pub coord: f64,
    pub mode: usize,
}

impl PointSpec {
    pub fn point(&self) -> Point {
        match self.edge {
            Some(e) => Point::on(e, self.coord),
            None => Point::junction(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Greedy,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateOpts {
    pub start: PointSpec,
    pub policy: PolicyKind,
    pub horizon: f64,
    pub n_paths: usize,
    pub hold: f64,
}

impl Default for SimulateOpts {
    fn default() -> Self {
        SimulateOpts {
            start: PointSpec { edge: Some(0), coord: 0.5, mode: 1 },
            policy: PolicyKind::Greedy,
            horizon: 10.0,
            n_paths: 200,
            hold: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeMode {
    pub edge: usize,
    pub mode: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectOpts {
    pub cases: Vec<EdgeMode>,
    pub radii: Vec<f64>,
    pub seeds: usize,
    /// Integration step of the projected pairs.
    pub h: f64,
}

impl Default for ProjectOpts {
    fn default() -> Self {
        ProjectOpts {
            cases: vec![EdgeMode { edge: 0, mode: 1 }, EdgeMode { edge: 1, mode: 3 }],
            radii: vec![1e-2, 3e-3, 1e-3],
            seeds: 20,
            h: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtendOpts {
    pub epsilons: Vec<f64>,
    /// Shared by every rung; must split each fictive branch into at least two cells.
    pub dx: f64,
}

impl Default for ExtendOpts {
    fn default() -> Self {
        ExtendOpts { epsilons: vec![0.2, 0.1, 0.05], dx: 0.0125 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearizeOpts {
    /// The LP is dense; keep the grid coarse.
    pub dx: f64,
    pub points: Vec<PointSpec>,
    pub max_pivots: usize,
}

impl Default for LinearizeOpts {
    fn default() -> Self {
        LinearizeOpts {
            dx: 0.25,
            points: vec![PointSpec { edge: None, coord: 0.0, mode: 3 }, PointSpec { edge: Some(0), coord: 0.5, mode: 1 }],
            max_pivots: 1_000_000,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        let m = &self.model;
        if m.name != "traffic3" {
            return Err(format!("unknown model '{}'", m.name));
        }
        if !(m.l0 > 0.0 && m.lambda0 > 0.0 && m.delta > 0.0) {
            return Err("model parameters l0, lambda0, delta must be positive".into());
        }
        if !(0.0..1.0).contains(&m.self_jump) {
            return Err("self_jump must lie in [0, 1)".into());
        }
        let g = &self.grid;
        if !(g.dx > 0.0 && g.dx <= 0.5) || g.h.is_some_and(|h| !(h > 0.0)) || g.n_a < 2 || !(g.flow_h > 0.0) {
            return Err("grid needs 0 < dx <= 0.5, h > 0, n_a >= 2 and flow_h > 0".into());
        }
        if !(g.epsilon > 0.0 && g.epsilon < 1.0) || g.rho.is_some_and(|r| !(r > 0.0)) {
            return Err("grid needs 0 < epsilon < 1 and rho > 0".into());
        }
        let modes = 4;
        let points = self.linearize.points.iter().chain([&self.simulate.start]);
        for p in points {
            if p.mode >= modes || p.edge.is_some_and(|e| e >= 3) || !(0.0..=1.0).contains(&p.coord) {
                return Err(format!("point {p:?} is not on the network"));
            }
        }
        if self.project.cases.iter().any(|c| c.edge >= 3 || c.mode >= modes) || self.project.radii.len() < 2 || !(self.project.h > 0.0) {
            return Err("project needs valid (edge, mode) pairs and at least two radii".into());
        }
        if self.extend.epsilons.iter().any(|e| !(*e > 0.0 && *e < 1.0)) || !(self.linearize.dx > 0.0 && self.extend.dx > 0.0) {
            return Err("extend epsilons must lie in (0, 1) and grid steps must be positive".into());
        }
        if self.simulate.n_paths == 0 || !(self.simulate.horizon > 0.0 && self.simulate.hold > 0.0) {
            return Err("simulate needs paths, a positive horizon and a positive hold".into());
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Arc<Model>, String> {
        let m = &self.model;
        let base = traffic3_model(m.l0, m.lambda0, m.delta).map_err(|e| e.to_string())?;
        if m.self_jump == 0.0 {
            return Ok(Arc::new(base));
        }
        let w = m.self_jump;
        let inner = base.jump_map();
        let broken = base.with_jump(Arc::new(move |x: &[f64], mode, a: &[f64]| {
            let mut row: Vec<f64> = inner(x, mode, a).iter().map(|q| q * (1.0 - w)).collect();
            row[mode] = w;
            row
        }));
        Ok(Arc::new(broken))
    }
}
