//! TOML scenario documents and end-to-end experiment drivers.
//!
//! A scenario names the lattice, the obstacle primitives with their
//! annotations, the risk pipeline, filter and solver parameters, the
//! nominal controller and the simulation horizon. Primitives are
//! rasterized at load, together with a signed clearance channel taken from
//! their exact distance functions.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backstep::{k_v_smooth, BackstepConfig, ExtendedState};
use crate::boundary::{extract_boundary, BoundarySet};
use crate::elliptic::{
    solve_guidance, solve_laplace_component, solve_poisson, Forcing, SolveStats, SolverConfig,
    SolverMethod,
};
use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::{CellState, Lattice, OccupancyGrid};
use crate::riskmap::{
    assign_flux, node_features, smooth_flux, FeatureKind, FluxMap, PriorityRule, RiskAssign,
    DEFAULT_LABEL_PRIORITIES,
};
use crate::safety::{activation, activation_zone, FilterConfig, GuidanceFieldBundle, SafetyFunction};
use crate::sim::{
    integrate_double, integrate_single, run_dynamic, time_derivative, DynamicConfig, DynamicRun,
    Frame, Nominal, SimConfig, Trajectory,
};
use crate::Vec2;

type P2 = [f64; 2];

fn v2(p: P2) -> Vec2 {
    Vec2::new(p[0], p[1])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub grid: GridSpec,
    #[serde(default, rename = "obstacle")]
    pub obstacles: Vec<ObstacleSpec>,
    /// Constant Poisson forcing, strictly negative.
    #[serde(default = "default_forcing")]
    pub forcing: f64,
    #[serde(default)]
    pub risk: RiskSpec,
    #[serde(default)]
    pub filter: FilterSpec,
    #[serde(default)]
    pub backstep: BackstepSpec,
    pub nominal: NominalSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    pub sim: SimSpec,
    pub oracle: Option<OracleSpec>,
    pub sweep: Option<SweepSpec>,
}

fn default_forcing() -> f64 {
    -4.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub d: f64,
    #[serde(default)]
    pub origin: P2,
    /// Occupied one-cell ring around the lattice.
    #[serde(default = "yes")]
    pub border: bool,
    #[serde(default = "wall")]
    pub border_label: String,
}

fn yes() -> bool {
    true
}

fn wall() -> String {
    "wall".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObstacleSpec {
    #[serde(flatten)]
    pub shape: Shape,
    pub label: Option<String>,
    pub probability: Option<ProbabilitySpec>,
    pub motion: Option<MotionSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Rect { min: P2, max: P2 },
    Disk { center: P2, radius: f64 },
    /// Everything outside the disk is occupied.
    InvertedDisk { center: P2, radius: f64 },
    Polyline { points: Vec<P2>, thickness: f64 },
    /// Raw cell indices.
    Cells { cells: Vec<[usize; 2]> },
    /// `#` marks occupied cells; the first row is the top of the lattice.
    Ascii { rows: Vec<String> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProbabilitySpec {
    Constant(f64),
    /// `min + (max - min) (1 + cos angle) / 2`, with the angle measured
    /// between `direction` and the ray from the obstacle center.
    Angular { min: f64, max: f64, direction: P2 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    pub heading: P2,
    /// `(t, speed)` knots of a piecewise-linear speed; held constant after
    /// the last knot.
    pub speed: Vec<P2>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpec {
    #[default]
    None,
    Probability,
    Speed,
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AssignSpec {
    #[default]
    Identity,
    Saturating,
    Exponential,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskSpec {
    #[serde(default)]
    pub feature: FeatureSpec,
    #[serde(default)]
    pub assign: AssignSpec,
    pub v_ref: Option<f64>,
    pub alpha: Option<f64>,
    #[serde(default = "one")]
    pub beta_min: f64,
    #[serde(default = "six")]
    pub beta_max: f64,
    pub smooth_window: Option<usize>,
    pub labels: Option<BTreeMap<String, f64>>,
}

fn one() -> f64 {
    1.0
}

fn six() -> f64 {
    6.0
}

impl Default for RiskSpec {
    fn default() -> Self {
        Self {
            feature: FeatureSpec::None,
            assign: AssignSpec::Identity,
            v_ref: None,
            alpha: None,
            beta_min: 1.0,
            beta_max: 6.0,
            smooth_window: None,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "tenth")]
    pub epsilon: f64,
}

fn tenth() -> f64 {
    0.1
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self { gamma: 1.0, epsilon: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackstepSpec {
    #[serde(default = "two")]
    pub mu: f64,
    #[serde(default = "tenth")]
    pub sigma_s: f64,
    /// Gain of the nominal acceleration `kd (k_nom - y')`.
    #[serde(default = "four")]
    pub kd: f64,
}

fn two() -> f64 {
    2.0
}

fn four() -> f64 {
    4.0
}

impl Default for BackstepSpec {
    fn default() -> Self {
        Self { mu: 2.0, sigma_s: 0.1, kd: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NominalKind {
    Goal,
    Adversarial,
    Zero,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NominalSpec {
    pub kind: NominalKind,
    pub goal: Option<P2>,
    #[serde(default = "one")]
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MethodSpec {
    #[default]
    Sor,
    GaussSeidel,
    DenseDirect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default)]
    pub method: MethodSpec,
    #[serde(default = "omega")]
    pub omega: f64,
    #[serde(default = "tol")]
    pub tol: f64,
    pub max_iters: Option<usize>,
}

fn omega() -> f64 {
    1.9
}

fn tol() -> f64 {
    1e-8
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self { method: MethodSpec::Sor, omega: 1.9, tol: 1e-8, max_iters: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub y0: P2,
    /// Initial velocity of double-integrator runs; defaults to `k_v(y0)`,
    /// where `h_B = h`.
    pub ydot0: Option<P2>,
    pub dt: f64,
    pub t_final: f64,
    /// Field refresh period of dynamic runs.
    pub dt_frame: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub center: P2,
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// A point inside the obstacle whose flux is scaled.
    pub target: P2,
    #[serde(default = "scales")]
    pub flux_scales: Vec<f64>,
    #[serde(default)]
    pub gammas: Vec<f64>,
}

fn scales() -> Vec<f64> {
    vec![1.0, 2.0, 3.0]
}

/// Signed distance of a primitive, negative inside.
fn segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let t = if ab.norm_squared() > 0.0 {
        ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + t * ab)).norm()
}

fn box_sdf(p: Vec2, lo: Vec2, hi: Vec2) -> f64 {
    let c = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let q = (p - c).abs() - half;
    let outside = Vec2::new(q.x.max(0.0), q.y.max(0.0)).norm();
    outside + q.x.max(q.y).min(0.0)
}

/// Validated primitive with its rasterization helpers.
#[derive(Debug, Clone)]
struct Primitive {
    spec: ObstacleSpec,
    cells: HashSet<(usize, usize)>,
    center: Vec2,
    /// Displacement added on top of the motion profile.
    nudge: Vec2,
}

impl Primitive {
    fn new(spec: ObstacleSpec, lattice: &Lattice) -> Result<Self> {
        let mut cells = HashSet::new();
        let center = match &spec.shape {
            Shape::Rect { min, max } => {
                if !(min[0] < max[0] && min[1] < max[1]) {
                    return Err(Error::MalformedDocument("rect needs min < max".into()));
                }
                0.5 * (v2(*min) + v2(*max))
            }
            Shape::Disk { center, radius } | Shape::InvertedDisk { center, radius } => {
                if !(*radius > 0.0) {
                    return Err(Error::MalformedDocument("disk radius must be positive".into()));
                }
                v2(*center)
            }
            Shape::Polyline { points, thickness } => {
                if points.len() < 2 || !(*thickness > 0.0) {
                    return Err(Error::MalformedDocument(
                        "polyline needs two points and a positive thickness".into(),
                    ));
                }
                points.iter().map(|p| v2(*p)).sum::<Vec2>() / points.len() as f64
            }
            Shape::Cells { cells: list } => {
                for &[i, j] in list {
                    if i >= lattice.nx || j >= lattice.ny {
                        return Err(Error::MalformedDocument(format!("cell ({i}, {j}) outside the lattice")));
                    }
                    cells.insert((i, j));
                }
                Self::cell_center(&cells, lattice)?
            }
            Shape::Ascii { rows } => {
                if rows.len() != lattice.ny || rows.iter().any(|r| r.chars().count() != lattice.nx) {
                    return Err(Error::MalformedDocument(format!(
                        "ascii rows must be {} rows of {} characters",
                        lattice.ny, lattice.nx
                    )));
                }
                for (r, row) in rows.iter().enumerate() {
                    for (i, ch) in row.chars().enumerate() {
                        match ch {
                            '#' => {
                                cells.insert((i, lattice.ny - 1 - r));
                            }
                            '.' | ' ' => {}
                            other => {
                                return Err(Error::MalformedDocument(format!("unexpected map character {other:?}")))
                            }
                        }
                    }
                }
                Self::cell_center(&cells, lattice)?
            }
        };
        if let Some(p) = &spec.probability {
            let (lo, hi) = match *p {
                ProbabilitySpec::Constant(c) => (c, c),
                ProbabilitySpec::Angular { min, max, .. } => (min, max),
            };
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
                return Err(Error::MalformedDocument("probabilities must lie in [0, 1]".into()));
            }
        }
        if let Some(m) = &spec.motion {
            if v2(m.heading).norm() == 0.0 || m.speed.is_empty() {
                return Err(Error::MalformedDocument("motion needs a heading and speed knots".into()));
            }
            if m.speed.iter().any(|k| !(k[1] >= 0.0)) {
                return Err(Error::MalformedDocument("speeds must be nonnegative".into()));
            }
            if m.speed.windows(2).any(|w| !(w[1][0] > w[0][0])) || m.speed[0][0] != 0.0 {
                return Err(Error::MalformedDocument("speed knots must start at t = 0 and increase".into()));
            }
        }
        Ok(Self { spec, cells, center, nudge: Vec2::zeros() })
    }

    fn cell_center(cells: &HashSet<(usize, usize)>, lattice: &Lattice) -> Result<Vec2> {
        if cells.is_empty() {
            return Err(Error::MalformedDocument("cell primitive lists no cells".into()));
        }
        Ok(cells.iter().map(|&(i, j)| lattice.center(i, j)).sum::<Vec2>() / cells.len() as f64)
    }

    fn sdf(&self, p: Vec2, lattice: &Lattice) -> f64 {
        match &self.spec.shape {
            Shape::Rect { min, max } => box_sdf(p, v2(*min), v2(*max)),
            Shape::Disk { center, radius } => (p - v2(*center)).norm() - radius,
            Shape::InvertedDisk { center, radius } => radius - (p - v2(*center)).norm(),
            Shape::Polyline { points, thickness } => {
                points
                    .windows(2)
                    .map(|w| segment_distance(p, v2(w[0]), v2(w[1])))
                    .fold(f64::INFINITY, f64::min)
                    - thickness / 2.0
            }
            Shape::Cells { .. } | Shape::Ascii { .. } => {
                // union of cell squares near p; far cells only bound the distance
                let d = lattice.d;
                let fx = ((p.x - lattice.origin.x) / d).round() as isize;
                let fy = ((p.y - lattice.origin.y) / d).round() as isize;
                let mut best = 2.5 * d;
                for dj in -2..=2 {
                    for di in -2..=2 {
                        let (i, j) = (fx + di, fy + dj);
                        if i < 0 || j < 0 || !self.cells.contains(&(i as usize, j as usize)) {
                            continue;
                        }
                        let c = lattice.center(i as usize, j as usize);
                        let half = Vec2::new(d / 2.0, d / 2.0);
                        best = best.min(box_sdf(p, c - half, c + half));
                    }
                }
                best
            }
        }
    }

    fn speed(&self, t: f64) -> f64 {
        let Some(m) = &self.spec.motion else { return 0.0 };
        let k = &m.speed;
        match k.iter().position(|p| p[0] > t) {
            None => k[k.len() - 1][1],
            Some(0) => k[0][1],
            Some(n) => {
                let (a, b) = (k[n - 1], k[n]);
                a[1] + (b[1] - a[1]) * (t - a[0]) / (b[0] - a[0])
            }
        }
    }

    fn heading(&self) -> Vec2 {
        self.spec.motion.as_ref().map_or(Vec2::zeros(), |m| v2(m.heading).normalize())
    }

    /// Displacement at time `t`: the exact integral of the speed profile.
    fn offset(&self, t: f64) -> Vec2 {
        let Some(m) = &self.spec.motion else { return self.nudge };
        let k = &m.speed;
        let mut dist = 0.0;
        for w in k.windows(2) {
            let (a, b) = (w[0], w[1]);
            if t <= a[0] {
                break;
            }
            let tb = t.min(b[0]);
            let sb = self.speed(tb);
            dist += 0.5 * (a[1] + sb) * (tb - a[0]);
        }
        let last = k[k.len() - 1];
        if t > last[0] {
            dist += last[1] * (t - last[0]);
        }
        dist * self.heading() + self.nudge
    }

    fn probability(&self, p: Vec2, shift: Vec2) -> f64 {
        match self.spec.probability {
            None => 1.0,
            Some(ProbabilitySpec::Constant(c)) => c,
            Some(ProbabilitySpec::Angular { min, max, direction }) => {
                let r = p - (self.center + shift);
                let dir = v2(direction);
                let cos = if r.norm() > 0.0 && dir.norm() > 0.0 {
                    r.dot(&dir) / (r.norm() * dir.norm())
                } else {
                    1.0
                };
                min + (max - min) * (1.0 + cos) / 2.0
            }
        }
    }
}

/// Placement override used to probe moving obstacles away from their
/// scheduled trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    /// Time used for obstacle positions.
    pub t_position: f64,
    /// Time used for obstacle speeds.
    pub t_speed: f64,
}

impl Placement {
    pub fn at(t: f64) -> Self {
        Self { t_position: t, t_speed: t }
    }
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    doc: ScenarioDoc,
    source: String,
    lattice: Lattice,
    primitives: Vec<Primitive>,
    label_ids: BTreeMap<String, u16>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: ScenarioDoc =
            toml::from_str(text).map_err(|e| Error::MalformedDocument(e.to_string()))?;
        Self::from_doc(doc, text.to_owned())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    fn from_doc(doc: ScenarioDoc, source: String) -> Result<Self> {
        let g = &doc.grid;
        let lattice = Lattice::new(g.nx, g.ny, g.d, v2(g.origin))?;
        if !(doc.forcing < 0.0) {
            return Err(Error::NegativeForcingViolation { i: 0, j: 0, value: doc.forcing });
        }
        let primitives = doc
            .obstacles
            .iter()
            .cloned()
            .map(|o| Primitive::new(o, &lattice))
            .collect::<Result<Vec<_>>>()?;

        let mut label_ids = BTreeMap::new();
        let mut used: Vec<&str> = vec![g.border_label.as_str()];
        used.extend(primitives.iter().filter_map(|p| p.spec.label.as_deref()));
        if let Some(table) = &doc.risk.labels {
            for name in table.keys() {
                let id = label_ids.len() as u16;
                label_ids.entry(name.clone()).or_insert(id);
            }
        }
        for name in &used {
            let id = label_ids.len() as u16;
            label_ids.entry((*name).to_owned()).or_insert(id);
        }
        if doc.risk.feature == FeatureSpec::Label {
            for name in &used {
                let mapped = match &doc.risk.labels {
                    Some(t) => t.contains_key(*name),
                    None => DEFAULT_LABEL_PRIORITIES.iter().any(|(n, _)| n == name),
                };
                if !mapped {
                    return Err(Error::MalformedDocument(format!("label {name:?} has no priority")));
                }
            }
        }
        match doc.nominal.kind {
            NominalKind::Goal if doc.nominal.goal.is_none() => {
                return Err(Error::MalformedDocument("goal controller needs a goal".into()))
            }
            _ => {}
        }

        let sc = Self { doc, source, lattice, primitives, label_ids };
        sc.risk_pipeline()?;
        sc.filter_config().validate()?;
        sc.solver_config().validate()?;
        sc.nominal().validate()?;
        // every primitive must cover at least one cell at t = 0
        for (n, p) in sc.primitives.iter().enumerate() {
            let l = &sc.lattice;
            let shift = p.offset(0.0);
            if !(0..l.len()).any(|k| p.sdf(l.center_of(k) - shift, l) <= 0.0) {
                return Err(Error::MalformedDocument(format!("obstacle {n} covers no cell of the lattice")));
            }
        }
        Ok(sc)
    }

    pub fn doc(&self) -> &ScenarioDoc {
        &self.doc
    }

    pub fn name(&self) -> &str {
        &self.doc.name
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn label_ids(&self) -> &BTreeMap<String, u16> {
        &self.label_ids
    }

    pub fn has_motion(&self) -> bool {
        self.primitives.iter().any(|p| p.spec.motion.is_some())
    }

    /// SHA-256 of the scenario text, hex encoded.
    pub fn config_hash(&self) -> String {
        Sha256::digest(self.source.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn forcing(&self) -> Forcing {
        Forcing::Constant(self.doc.forcing)
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            gamma: self.doc.filter.gamma,
            epsilon: self.doc.filter.epsilon,
            ..Default::default()
        }
    }

    pub fn backstep_config(&self) -> BackstepConfig {
        BackstepConfig {
            mu: self.doc.backstep.mu,
            gamma: self.doc.filter.gamma,
            sigma_s: self.doc.backstep.sigma_s,
            ..Default::default()
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.doc.solver;
        SolverConfig {
            method: match s.method {
                MethodSpec::Sor => SolverMethod::Sor,
                MethodSpec::GaussSeidel => SolverMethod::GaussSeidel,
                MethodSpec::DenseDirect => SolverMethod::DenseDirect,
            },
            omega: s.omega,
            tol: s.tol,
            max_iters: s.max_iters,
        }
    }

    pub fn nominal(&self) -> Nominal {
        let n = &self.doc.nominal;
        match n.kind {
            NominalKind::Goal => Nominal::Goal {
                goal: v2(n.goal.expect("checked at load")),
                mu: n.mu,
            },
            NominalKind::Adversarial => Nominal::Adversarial { mu: n.mu },
            NominalKind::Zero => Nominal::Zero,
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            dt: self.doc.sim.dt,
            t_final: self.doc.sim.t_final,
        }
    }

    pub fn y0(&self) -> Vec2 {
        v2(self.doc.sim.y0)
    }

    /// Initial extended state for `nominal` on the built fields.
    pub fn start_state(&self, built: &BuiltFilter, nominal: &Nominal) -> Result<ExtendedState> {
        let y = self.y0();
        let ydot = match self.doc.sim.ydot0 {
            Some(v) => v2(v),
            None => k_v_smooth(y, nominal.eval(y, &built.sf)?, &built.sf, &built.gf, &self.backstep_config())?,
        };
        Ok(ExtendedState::new(y, ydot))
    }

    /// Speed of obstacle `n` at `t`.
    pub fn obstacle_speed(&self, n: usize, t: f64) -> f64 {
        self.primitives[n].speed(t)
    }

    pub fn obstacle_count(&self) -> usize {
        self.primitives.len()
    }

    /// Signed distance to obstacle `n` at time `t`, negative inside.
    pub fn obstacle_distance(&self, n: usize, y: Vec2, t: f64) -> f64 {
        let p = &self.primitives[n];
        p.sdf(y - p.offset(t), &self.lattice)
    }

    /// Index of the obstacle whose footprint contains `y` at `t = 0`.
    pub fn obstacle_at(&self, y: Vec2) -> Option<usize> {
        (0..self.primitives.len())
            .map(|n| (n, self.obstacle_distance(n, y, 0.0)))
            .filter(|(_, s)| *s <= 0.0)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, _)| n)
    }

    pub fn rasterize(&self, t: f64) -> Result<OccupancyGrid> {
        self.rasterize_with(Placement::at(t))
    }

    /// Occupancy with clearance, probability, label and velocity channels.
    pub fn rasterize_with(&self, place: Placement) -> Result<OccupancyGrid> {
        let l = self.lattice;
        let shifts: Vec<Vec2> = self
            .primitives
            .iter()
            .map(|p| p.offset(place.t_position))
            .collect();
        let (x0, x1) = (l.origin.x + 0.5 * l.d, l.origin.x + (l.nx as f64 - 1.5) * l.d);
        let (y0, y1) = (l.origin.y + 0.5 * l.d, l.origin.y + (l.ny as f64 - 1.5) * l.d);
        let n = l.len();
        let mut clearance = vec![0.0; n];
        let mut owner: Vec<Option<usize>> = vec![None; n];
        for k in 0..n {
            let y = l.center_of(k);
            let mut best = if self.doc.grid.border {
                (y.x - x0).min(x1 - y.x).min(y.y - y0).min(y1 - y.y)
            } else {
                f64::INFINITY
            };
            let mut who = None;
            for (m, p) in self.primitives.iter().enumerate() {
                let s = p.sdf(y - shifts[m], &l);
                if s < best {
                    best = s;
                    who = Some(m);
                }
            }
            if !best.is_finite() {
                best = 1e3 * l.d;
            }
            clearance[k] = best;
            owner[k] = who;
        }
        let state: Vec<CellState> = clearance
            .iter()
            .map(|&c| if c <= 0.0 { CellState::Occupied } else { CellState::Free })
            .collect();
        let prob: Vec<f64> = (0..n)
            .map(|k| match owner[k] {
                Some(m) if state[k] == CellState::Occupied => {
                    self.primitives[m].probability(l.center_of(k), shifts[m])
                }
                _ => 1.0,
            })
            .collect();
        let border_id = self.label_ids[&self.doc.grid.border_label];
        let labels: Vec<u16> = (0..n)
            .map(|k| match owner[k].and_then(|m| self.primitives[m].spec.label.as_ref()) {
                Some(name) => self.label_ids[name],
                None => border_id,
            })
            .collect();
        let vel: Vec<Vec2> = (0..n)
            .map(|k| match owner[k] {
                Some(m) if state[k] == CellState::Occupied => {
                    let p = &self.primitives[m];
                    p.speed(place.t_speed) * p.heading()
                }
                _ => Vec2::zeros(),
            })
            .collect();
        OccupancyGrid::new(l, state)?
            .with_clearance(clearance)?
            .with_probability(prob)?
            .with_labels(labels)?
            .with_velocity(vel)
    }

    fn risk_pipeline(&self) -> Result<Option<(FeatureKind, PriorityRule, RiskAssign, FluxMap)>> {
        let r = &self.doc.risk;
        let phi = FluxMap::new(r.beta_min, r.beta_max)?;
        let w = match r.assign {
            AssignSpec::Identity => RiskAssign::Identity,
            AssignSpec::Saturating => RiskAssign::Saturating {
                v_ref: r.v_ref.ok_or_else(|| Error::MalformedDocument("saturating risk needs v_ref".into()))?,
            },
            AssignSpec::Exponential => RiskAssign::Exponential {
                alpha: r.alpha.ok_or_else(|| Error::MalformedDocument("exponential risk needs alpha".into()))?,
            },
        };
        w.validate()?;
        if let Some(win) = r.smooth_window {
            if win % 2 == 0 {
                return Err(Error::InvalidParameter(format!("smoothing window must be odd, got {win}")));
            }
        }
        Ok(match r.feature {
            FeatureSpec::None => None,
            FeatureSpec::Probability => Some((FeatureKind::Probability, PriorityRule::Probability, w, phi)),
            FeatureSpec::Speed => Some((FeatureKind::Speed, PriorityRule::Speed, w, phi)),
            FeatureSpec::Label => {
                let table: Vec<(u16, f64)> = match &r.labels {
                    Some(t) => t.iter().map(|(n, p)| (self.label_ids[n], *p)).collect(),
                    None => DEFAULT_LABEL_PRIORITIES
                        .iter()
                        .filter_map(|(n, p)| self.label_ids.get(*n).map(|id| (*id, *p)))
                        .collect(),
                };
                Some((FeatureKind::Label, PriorityRule::label_table(table)?, w, phi))
            }
        })
    }

    /// Boundary extraction and the feature, priority, risk, flux loop.
    pub fn assign_boundary_flux(&self, grid: &OccupancyGrid) -> Result<BoundarySet> {
        let boundary = extract_boundary(grid)?;
        let assigned = match self.risk_pipeline()? {
            None => {
                let n = boundary.len();
                boundary.with_flux(vec![self.doc.risk.beta_min; n])?
            }
            Some((kind, rule, w, phi)) => {
                let features = node_features(grid, &boundary, kind)?;
                assign_flux(&boundary, &features, &rule, w, phi)?
            }
        };
        match self.doc.risk.smooth_window {
            Some(win) if win > 1 => smooth_flux(&assigned, win),
            _ => Ok(assigned),
        }
    }
}

/// Order in which [`build_filter`] runs its stages.
pub const STAGES: [&str; 5] = ["discretize", "flux", "poisson", "laplace", "filter"];

#[derive(Debug, Clone, Serialize)]
pub struct BuildReport {
    pub stages: Vec<&'static str>,
    pub cells: usize,
    pub free_cells: usize,
    pub boundary_nodes: usize,
    pub components: usize,
    pub flux_min: f64,
    pub flux_max: f64,
    /// Ten equal-width bins over `[flux_min, flux_max]`.
    pub flux_histogram: Vec<usize>,
    pub poisson: StatsReport,
    pub laplace: [StatsReport; 2],
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StatsReport {
    pub method: &'static str,
    pub unknowns: usize,
    pub iterations: usize,
    pub residual: f64,
}

impl From<SolveStats> for StatsReport {
    fn from(s: SolveStats) -> Self {
        Self {
            method: match s.method {
                SolverMethod::Sor => "sor",
                SolverMethod::GaussSeidel => "gauss_seidel",
                SolverMethod::DenseDirect => "dense_direct",
            },
            unknowns: s.unknowns,
            iterations: s.iterations,
            residual: s.residual,
        }
    }
}

/// Everything the filter needs, plus the build report.
#[derive(Debug, Clone)]
pub struct BuiltFilter {
    pub grid: OccupancyGrid,
    pub sf: SafetyFunction,
    pub gf: GuidanceFieldBundle,
    pub cfg: FilterConfig,
    pub report: BuildReport,
}

impl BuiltFilter {
    pub fn boundary(&self) -> &BoundarySet {
        self.gf.boundary()
    }
}

/// Runs the whole construction at time 0.
pub fn build_filter(sc: &Scenario) -> Result<BuiltFilter> {
    build_filter_with(sc, Placement::at(0.0))
}

pub fn build_filter_with(sc: &Scenario, place: Placement) -> Result<BuiltFilter> {
    let mut stages = Vec::with_capacity(STAGES.len());
    let grid = sc.rasterize_with(place).map_err(|e| e.at_stage(STAGES[0]))?;
    stages.push(STAGES[0]);
    let boundary = sc.assign_boundary_flux(&grid).map_err(|e| e.at_stage(STAGES[1]))?;
    stages.push(STAGES[1]);
    let solver = sc.solver_config();
    let (h, ps) = solve_poisson(&grid, &sc.forcing(), &solver).map_err(|e| e.at_stage(STAGES[2]))?;
    stages.push(STAGES[2]);
    let (v, ls) = solve_guidance(&grid, &boundary, &solver).map_err(|e| e.at_stage(STAGES[3]))?;
    stages.push(STAGES[3]);
    let cfg = sc.filter_config();
    cfg.validate().map_err(|e| e.at_stage(STAGES[4]))?;
    let sf = SafetyFunction::new(h);
    let flux = boundary.flux();
    let flux_min = flux.iter().copied().fold(f64::INFINITY, f64::min);
    let flux_max = flux.iter().copied().fold(0.0, f64::max);
    let mut flux_histogram = vec![0; 10];
    for &b in flux {
        let bin = if flux_max > flux_min {
            (((b - flux_min) / (flux_max - flux_min)) * 10.0).floor() as usize
        } else {
            0
        };
        flux_histogram[bin.min(9)] += 1;
    }
    let report = BuildReport {
        stages: Vec::new(),
        cells: grid.lattice().len(),
        free_cells: grid.free_count(),
        boundary_nodes: boundary.len(),
        components: boundary.component_count(),
        flux_min,
        flux_max,
        flux_histogram,
        poisson: ps.into(),
        laplace: [ls[0].into(), ls[1].into()],
    };
    let gf = GuidanceFieldBundle::new(v, boundary).map_err(|e| e.at_stage(STAGES[4]))?;
    stages.push(STAGES[4]);
    Ok(BuiltFilter {
        grid,
        sf,
        gf,
        cfg,
        report: BuildReport { stages, ..report },
    })
}

/// Largest deviation from the disk solution `(-f / 4) (R^2 - r^2)` over
/// the free cells, when the scenario declares a disk oracle.
pub fn oracle_error(sc: &Scenario, built: &BuiltFilter) -> Option<f64> {
    let o = sc.doc.oracle.as_ref()?;
    let l = built.grid.lattice();
    let c = v2(o.center);
    let scale = -sc.doc.forcing / 4.0;
    Some(
        (0..l.len())
            .filter(|&k| built.grid.is_free_idx(k))
            .map(|k| {
                let r2 = (l.center_of(k) - c).norm_squared();
                (built.sf.h().values()[k] - scale * (o.radius * o.radius - r2)).abs()
            })
            .fold(0.0, f64::max),
    )
}

/// Closed-loop run of the scenario's nominal controller.
pub fn simulate(sc: &Scenario, built: &BuiltFilter, nominal: &Nominal) -> Result<Trajectory> {
    integrate_single(sc.y0(), nominal, &built.grid, &built.sf, &built.gf, &built.cfg, &sc.sim_config())
}

/// Double-integrator run with the backstepping filter.
pub fn simulate_double(sc: &Scenario, built: &BuiltFilter, nominal: &Nominal) -> Result<Trajectory> {
    integrate_double(
        sc.start_state(built, nominal)?,
        nominal,
        sc.doc.backstep.kd,
        &built.grid,
        &built.sf,
        &built.gf,
        &sc.backstep_config(),
        &sc.sim_config(),
    )
}

/// Fields of one frame of the scenario's moving scene.
pub fn frame(sc: &Scenario, t: f64) -> Result<Frame> {
    let b = build_filter_with(sc, Placement::at(t))?;
    Ok(Frame { t, grid: b.grid, sf: b.sf, gf: b.gf })
}

/// Dynamic run; `frames` overrides the horizon with that many frame periods.
pub fn simulate_dynamic(sc: &Scenario, frames: Option<usize>) -> Result<DynamicRun> {
    let dt_frame = sc.doc.sim.dt_frame.unwrap_or(0.1);
    let t_final = frames.map_or(sc.doc.sim.t_final, |n| n as f64 * dt_frame);
    let dcfg = DynamicConfig { dt_frame, dt_sim: sc.doc.sim.dt, t_final };
    run_dynamic(|t| frame(sc, t), sc.y0(), &sc.nominal(), &sc.filter_config(), &dcfg)
}

/// Activation zone of one moving-obstacle configuration at equal position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeedZone {
    pub t: f64,
    pub speed: f64,
    pub zone_cells: usize,
}

/// Zone sizes at times `times`, each evaluated with the obstacles held at
/// their position at `t_ref` but carrying the speed (and so the flux and
/// the rate of change of `h`) of time `t`. `dh/dt` comes from a sub-cell
/// displacement along the heading.
pub fn speed_zone_profile(sc: &Scenario, t_ref: f64, times: &[f64]) -> Result<Vec<SpeedZone>> {
    let l = sc.lattice;
    let nominal = sc.nominal();
    let cfg = sc.filter_config();
    times
        .par_iter()
        .map(|&t| {
            let speed = (0..sc.obstacle_count())
                .map(|n| sc.obstacle_speed(n, t))
                .fold(0.0, f64::max);
            let place = Placement { t_position: t_ref, t_speed: t };
            let base = build_filter_with(sc, place)?;
            let dh_dt = if speed > 0.0 {
                let dt = 0.05 * l.d / speed;
                let mut shifted = sc.clone();
                shifted.shift_moving(t, dt);
                let moved = build_filter_with(&shifted, place)?;
                time_derivative(base.sf.h(), moved.sf.h(), dt)?.0
            } else {
                ScalarField::new(l, vec![0.0; l.len()], vec![true; l.len()])?
            };
            let zone = activation_zone(
                &base.grid,
                |y| nominal.eval(y, &base.sf),
                &base.sf,
                &base.gf,
                &cfg,
                Some(&dh_dt),
            )?;
            Ok(SpeedZone { t, speed, zone_cells: zone.active_count() })
        })
        .collect()
}

impl Scenario {
    /// Moves every moving obstacle forward by `speed(t) * dt` along its
    /// heading.
    fn shift_moving(&mut self, t: f64, dt: f64) {
        for p in &mut self.primitives {
            if p.spec.motion.is_some() {
                p.nudge += p.speed(t) * dt * p.heading();
            }
        }
    }
}

/// Mean depth of the activation zone in front of each label class. The
/// depth at a boundary node is the distance walked from the node against
/// its normal while `a <= 0`.
pub fn zone_depth_by_label(
    sc: &Scenario,
    built: &BuiltFilter,
    nominal: &Nominal,
) -> Result<BTreeMap<String, f64>> {
    let grid = &built.grid;
    let labels = grid
        .labels()
        .ok_or_else(|| Error::MalformedDocument("map has no label channel".into()))?;
    let l = grid.lattice();
    let step = l.d / 4.0;
    let max_walk = (l.nx.max(l.ny) as f64) * l.d;
    let mut sums: BTreeMap<u16, (f64, usize)> = BTreeMap::new();
    for node in built.boundary().nodes() {
        let face = node
            .occupied_faces()
            .filter_map(|(di, dj)| l.offset(node.i, node.j, di, dj))
            .map(|(a, b)| l.index(a, b))
            .next()
            .expect("boundary node has an occupied face");
        let mut depth = 0.0;
        let mut y = node.position;
        while depth < max_walk {
            let a = nominal
                .eval(y, &built.sf)
                .and_then(|k| activation(y, k, &built.sf, &built.gf, &built.cfg));
            match a {
                Ok(a) if a <= 0.0 => {
                    depth += step;
                    y -= step * node.normal;
                }
                _ => break,
            }
        }
        let e = sums.entry(labels[face]).or_insert((0.0, 0));
        e.0 += depth;
        e.1 += 1;
    }
    let names: BTreeMap<u16, &String> = sc.label_ids.iter().map(|(n, id)| (*id, n)).collect();
    Ok(sums
        .into_iter()
        .map(|(id, (s, c))| (names[&id].clone(), s / c as f64))
        .collect())
}

/// Mean flux per label class.
pub fn flux_by_label(sc: &Scenario, built: &BuiltFilter) -> Result<BTreeMap<String, f64>> {
    let b = built.boundary();
    let grid = &built.grid;
    let labels = grid
        .labels()
        .ok_or_else(|| Error::MalformedDocument("map has no label channel".into()))?;
    let l = grid.lattice();
    let mut sums: BTreeMap<u16, (f64, usize)> = BTreeMap::new();
    for (node, &beta) in b.nodes().iter().zip(b.flux()) {
        for (di, dj) in node.occupied_faces() {
            let (a, c) = l.offset(node.i, node.j, di, dj).expect("face on lattice");
            let e = sums.entry(labels[l.index(a, c)]).or_insert((0.0, 0));
            e.0 += beta;
            e.1 += 1;
        }
    }
    let names: BTreeMap<u16, &String> = sc.label_ids.iter().map(|(n, id)| (*id, n)).collect();
    Ok(sums
        .into_iter()
        .map(|(id, (s, c))| (names[&id].clone(), s / c as f64))
        .collect())
}

/// One row of a flux-scale by gamma sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub flux_scale: f64,
    pub gamma: f64,
    /// Free cells with `a <= 0`.
    pub zone_cells: usize,
    /// Active cells where the scaled obstacle's own guidance contribution
    /// opposes the nominal input.
    pub restricted_cells: usize,
    pub min_h: f64,
    /// Smallest distance from the trajectory to the scaled obstacle.
    pub min_clearance: f64,
    pub path_length: f64,
    pub termination: &'static str,
}

/// Runs every (flux scale, gamma) pair of the sweep section in parallel.
pub fn sweep(sc: &Scenario) -> Result<Vec<SweepRow>> {
    let spec = sc
        .doc
        .sweep
        .as_ref()
        .ok_or_else(|| Error::MalformedDocument("scenario has no sweep section".into()))?;
    let target = v2(spec.target);
    let obstacle = sc
        .obstacle_at(target)
        .ok_or_else(|| Error::MalformedDocument("sweep target lies outside every obstacle".into()))?;
    let base = build_filter(sc)?;
    let grid = &base.grid;
    let l = *grid.lattice();
    let (comp, _) = grid.obstacle_components();
    let (ti, tj) = l
        .cell_of(target)
        .ok_or_else(|| Error::out_of_domain(target))?;
    let component = comp[l.index(ti, tj)]
        .ok_or_else(|| Error::MalformedDocument("sweep target cell is not on an obstacle surface".into()))?;

    // guidance contribution of the target component alone
    let boundary = base.boundary();
    let (mut bx, mut by) = boundary.guidance_values();
    for (k, n) in boundary.nodes().iter().enumerate() {
        if n.component != component {
            bx[k] = 0.0;
            by[k] = 0.0;
        }
    }
    let solver = sc.solver_config();
    let (cx, _) = solve_laplace_component(grid, boundary, &bx, &solver)?;
    let (cy, _) = solve_laplace_component(grid, boundary, &by, &solver)?;
    let vc = VectorField::new(cx, cy)?;
    let nominal = sc.nominal();

    let gammas = if spec.gammas.is_empty() { vec![sc.doc.filter.gamma] } else { spec.gammas.clone() };
    let pairs: Vec<(f64, f64)> = spec
        .flux_scales
        .iter()
        .flat_map(|&c| gammas.iter().map(move |&g| (c, g)))
        .collect();
    pairs
        .par_iter()
        .map(|&(scale, gamma)| {
            let mut b = boundary.clone();
            b.scale_component_flux(component, scale)?;
            let (v, _) = solve_guidance(grid, &b, &solver)?;
            let gf = GuidanceFieldBundle::new(v, b)?;
            let cfg = FilterConfig { gamma, ..base.cfg };
            let zone = activation_zone(grid, |y| nominal.eval(y, &base.sf), &base.sf, &gf, &cfg, None)?;
            let restricted = zone.count_where(|k| {
                let (i, j) = l.coords(k);
                nominal
                    .eval(l.center(i, j), &base.sf)
                    .is_ok_and(|u| vc.at(i, j).dot(&u) <= 0.0)
            });
            let tr = integrate_single(sc.y0(), &nominal, grid, &base.sf, &gf, &cfg, &sc.sim_config())?;
            let min_clearance = tr
                .samples
                .iter()
                .map(|s| sc.obstacle_distance(obstacle, s.y, 0.0))
                .fold(f64::INFINITY, f64::min);
            Ok(SweepRow {
                flux_scale: scale,
                gamma,
                zone_cells: zone.active_count(),
                restricted_cells: restricted,
                min_h: tr.min_h(),
                min_clearance,
                path_length: tr.path_length(),
                termination: tr.termination.as_str(),
            })
        })
        .collect()
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub scenario: String,
    pub config_hash: String,
    pub version: &'static str,
    pub seed: u64,
    pub command: String,
}

impl Manifest {
    pub fn new(sc: &Scenario, command: &str, seed: Option<u64>) -> Self {
        Self {
            scenario: sc.name().to_owned(),
            config_hash: sc.config_hash(),
            version: env!("CARGO_PKG_VERSION"),
            seed: seed.unwrap_or(sc.doc.seed),
            command: command.to_owned(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ROOM: &str = r#"
name = "room"
[grid]
nx = 41
ny = 41
d = 0.05
[[obstacle]]
shape = "disk"
center = [1.0, 1.0]
radius = 0.25
label = "chair"
probability = { min = 0.2, max = 1.0, direction = [1.0, 0.0] }
[risk]
feature = "probability"
[nominal]
kind = "goal"
goal = [1.7, 1.7]
[sim]
y0 = [0.3, 0.3]
dt = 0.005
t_final = 4.0
"#;

    #[test]
    fn parses_and_rasterizes() {
        let sc = Scenario::from_toml_str(ROOM).unwrap();
        let g = sc.rasterize(0.0).unwrap();
        let l = g.lattice();
        assert!(!g.is_free(0, 5));
        assert!(!g.is_free(20, 20) && g.is_free(10, 10));
        assert!(g.clearance().is_some());
        assert_eq!(sc.config_hash().len(), 64);
        let c = l.center(20, 20);
        assert!(sc.obstacle_distance(0, c, 0.0) < 0.0);
    }

    #[test]
    fn stage_log_follows_construction_order() {
        let sc = Scenario::from_toml_str(ROOM).unwrap();
        let b = build_filter(&sc).unwrap();
        assert_eq!(b.report.stages, STAGES.to_vec());
        assert_eq!(b.report.flux_histogram.iter().sum::<usize>(), b.report.boundary_nodes);
    }

    #[test]
    fn flux_anticorrelates_with_probability() {
        let sc = Scenario::from_toml_str(ROOM).unwrap();
        let b = build_filter(&sc).unwrap();
        let feats = node_features(&b.grid, b.boundary(), FeatureKind::Probability).unwrap();
        for (f, &beta) in feats.iter().zip(b.boundary().flux()) {
            let crate::riskmap::FeatureReading::Probability(p) = *f else { unreachable!() };
            assert!((beta - (1.0 + 5.0 * (1.0 - p))).abs() < 1e-12);
        }
    }

    #[test]
    fn malformed_documents_are_rejected() {
        assert!(matches!(Scenario::from_toml_str("name = 3"), Err(Error::MalformedDocument(_))));
        let bad_label = ROOM.replace("feature = \"probability\"", "feature = \"label\"\nlabels = { wall = 1.0 }");
        assert!(Scenario::from_toml_str(&bad_label).is_err());
        let no_goal = ROOM.replace("goal = [1.7, 1.7]\n", "");
        assert!(Scenario::from_toml_str(&no_goal).is_err());
        let outside = ROOM.replace("center = [1.0, 1.0]", "center = [9.0, 9.0]");
        assert!(Scenario::from_toml_str(&outside).is_err());
    }

    #[test]
    fn stage_errors_are_attributed() {
        let open = ROOM.replace("nx = 41", "nx = 41\nborder = false");
        let sc = Scenario::from_toml_str(&open).unwrap();
        match build_filter(&sc) {
            Err(Error::Stage { stage, source }) => {
                assert_eq!(stage, "discretize");
                assert!(matches!(*source, Error::OpenWorkspace { .. }));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn motion_offsets_integrate_the_speed_profile() {
        let doc = ROOM.replace(
            "label = \"chair\"",
            "label = \"chair\"\nmotion = { heading = [1.0, 0.0], speed = [[0.0, 0.0], [1.0, 0.2], [2.0, 0.2], [3.0, 0.0]] }",
        );
        let sc = Scenario::from_toml_str(&doc).unwrap();
        assert!(sc.has_motion());
        let p = &sc.primitives[0];
        assert!((p.offset(1.0).x - 0.1).abs() < 1e-15);
        assert!((p.offset(2.0).x - 0.3).abs() < 1e-15);
        assert!((p.offset(3.0).x - 0.4).abs() < 1e-15);
        assert!((p.offset(5.0).x - 0.4).abs() < 1e-15);
        assert!((sc.obstacle_speed(0, 0.5) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn label_classes_give_three_flux_plateaus() {
        let sc = Scenario::from_toml_str(include_str!("../scenarios/semantic_room.toml")).unwrap();
        let b = build_filter(&sc).unwrap();
        let mut levels: Vec<f64> = b.boundary().flux().to_vec();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        // saturating risk r / (3 + r) of priorities 1, 3, 6 mapped into [1, 6]
        let expected = [1.0 + 5.0 * 0.25, 1.0 + 5.0 * 0.5, 1.0 + 5.0 * 6.0 / 9.0];
        assert_eq!(levels.len(), 3);
        for (a, b) in levels.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{levels:?}");
        }
    }

    #[test]
    fn empty_room_flux_is_uniform_and_guidance_is_rotation_symmetric() {
        let sc = Scenario::from_toml_str(include_str!("../scenarios/empty_room.toml")).unwrap();
        let b = build_filter(&sc).unwrap();
        assert!(b.boundary().flux().iter().all(|&x| x == 1.0));
        let c = Vec2::new(2.0, 2.0);
        let rot = |p: Vec2| Vec2::new(-p.y, p.x);
        for p in [Vec2::new(0.3, 0.0), Vec2::new(0.2, 0.35), Vec2::new(-0.4, 0.1)] {
            let v = b.gf.at(c + p).unwrap();
            let w = b.gf.at(c + rot(p)).unwrap();
            assert!((rot(v) - w).norm() < 1e-6 * (1.0 + v.norm()), "{v} {w}");
        }
        assert!(b.gf.at(c).unwrap().norm() < 1e-6);
    }
}
