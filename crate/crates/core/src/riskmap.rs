//! Feature → priority → risk → flux assignment for boundary nodes.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::boundary::BoundarySet;
use crate::error::{Error, Result};
use crate::grid::OccupancyGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureReading {
    /// Occupancy probability in `[0, 1]`.
    Probability(f64),
    /// Obstacle speed in m/s.
    Speed(f64),
    Label(u16),
}

impl FeatureReading {
    pub fn kind(&self) -> FeatureKind {
        match self {
            FeatureReading::Probability(_) => FeatureKind::Probability,
            FeatureReading::Speed(_) => FeatureKind::Speed,
            FeatureReading::Label(_) => FeatureKind::Label,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            FeatureReading::Probability(p) if !(0.0..=1.0).contains(&p) => Err(
                Error::InvalidParameter(format!("probability reading {p} outside [0, 1]")),
            ),
            FeatureReading::Speed(s) if !(s >= 0.0 && s.is_finite()) => Err(
                Error::InvalidParameter(format!("speed reading {s} must be finite and >= 0")),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Probability,
    Speed,
    Label,
}

pub type PriorityFn = Arc<dyn Fn(&[FeatureReading]) -> Result<f64> + Send + Sync>;

/// Maps feature readings to a nonnegative priority.
#[derive(Clone)]
pub enum PriorityRule {
    /// `1 - p`: uncertain surfaces get high priority.
    Probability,
    /// Speed passes through unchanged.
    Speed,
    /// Lookup table from label id to priority.
    Label(BTreeMap<u16, f64>),
    /// Largest priority among the sub-rules.
    Max(Vec<PriorityRule>),
    Custom(PriorityFn),
}

impl std::fmt::Debug for PriorityRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PriorityRule::Probability => write!(f, "Probability"),
            PriorityRule::Speed => write!(f, "Speed"),
            PriorityRule::Label(t) => f.debug_tuple("Label").field(t).finish(),
            PriorityRule::Max(r) => f.debug_tuple("Max").field(r).finish(),
            PriorityRule::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Priorities used for semantic maps when none are configured.
pub const DEFAULT_LABEL_PRIORITIES: [(&str, f64); 3] = [("wall", 1.0), ("chair", 3.0), ("person", 6.0)];

impl PriorityRule {
    pub fn label_table(table: impl IntoIterator<Item = (u16, f64)>) -> Result<Self> {
        let table: BTreeMap<u16, f64> = table.into_iter().collect();
        if let Some((id, p)) = table.iter().find(|(_, p)| !(**p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "priority {p} for label {id} must be finite and >= 0"
            )));
        }
        Ok(PriorityRule::Label(table))
    }

    pub fn priority(&self, readings: &[FeatureReading]) -> Result<f64> {
        let find = |kind: FeatureKind| {
            readings
                .iter()
                .find(|r| r.kind() == kind)
                .copied()
                .ok_or_else(|| Error::InvalidParameter(format!("no {kind:?} reading for rule")))
        };
        let p = match self {
            PriorityRule::Probability => match find(FeatureKind::Probability)? {
                FeatureReading::Probability(p) => 1.0 - p,
                _ => unreachable!(),
            },
            PriorityRule::Speed => match find(FeatureKind::Speed)? {
                FeatureReading::Speed(s) => s,
                _ => unreachable!(),
            },
            PriorityRule::Label(table) => match find(FeatureKind::Label)? {
                FeatureReading::Label(id) => *table.get(&id).ok_or(Error::UnmappedLabel(id))?,
                _ => unreachable!(),
            },
            PriorityRule::Max(rules) => {
                let mut best = 0.0f64;
                for r in rules {
                    best = best.max(r.priority(readings)?);
                }
                best
            }
            PriorityRule::Custom(f) => f(readings)?,
        };
        if !(p >= 0.0 && p.is_finite()) {
            return Err(Error::InvalidParameter(format!("priority {p} must be finite and >= 0")));
        }
        Ok(p)
    }
}

/// Normalization of priorities into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskAssign {
    /// Clamped to `[0, 1]`.
    Identity,
    /// `r / (v_ref + r)`; equals 0.5 at `r = v_ref`.
    Saturating { v_ref: f64 },
    /// `1 - exp(-alpha r)`.
    Exponential { alpha: f64 },
}

impl RiskAssign {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RiskAssign::Saturating { v_ref } if !(v_ref > 0.0) => Err(Error::InvalidParameter(
                format!("reference speed must be positive, got {v_ref}"),
            )),
            RiskAssign::Exponential { alpha } if !(alpha > 0.0) => Err(Error::InvalidParameter(
                format!("exponential rate must be positive, got {alpha}"),
            )),
            _ => Ok(()),
        }
    }
}

pub fn risk_value(r: f64, w: RiskAssign) -> f64 {
    let r = r.max(0.0);
    match w {
        RiskAssign::Identity => r.clamp(0.0, 1.0),
        RiskAssign::Saturating { v_ref } => {
            if r.is_infinite() {
                1.0
            } else {
                r / (v_ref + r)
            }
        }
        RiskAssign::Exponential { alpha } => 1.0 - (-alpha * r).exp(),
    }
}

/// Affine map from risk to flux magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxMap {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl FluxMap {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "flux range must satisfy 0 < beta_min <= beta_max, got [{beta_min}, {beta_max}]"
            )));
        }
        Ok(Self { beta_min, beta_max })
    }

    pub fn apply(&self, risk: f64) -> f64 {
        let risk = risk.clamp(0.0, 1.0);
        self.beta_min + (self.beta_max - self.beta_min) * risk
    }
}

/// Sets `beta(y) = Φ(w(P(F(y))))` at every node from one reading per node.
pub fn assign_flux(
    boundary: &BoundarySet,
    features: &[FeatureReading],
    rule: &PriorityRule,
    w: RiskAssign,
    phi: FluxMap,
) -> Result<BoundarySet> {
    let fused: Vec<[FeatureReading; 1]> = features.iter().map(|f| [*f]).collect();
    assign_flux_fused(boundary, &fused, rule, w, phi)
}

/// As [`assign_flux`], with several readings per node for fused rules.
pub fn assign_flux_fused<R: AsRef<[FeatureReading]>>(
    boundary: &BoundarySet,
    features: &[R],
    rule: &PriorityRule,
    w: RiskAssign,
    phi: FluxMap,
) -> Result<BoundarySet> {
    if features.len() != boundary.len() {
        return Err(Error::InvalidParameter(format!(
            "{} feature readings for {} boundary nodes",
            features.len(),
            boundary.len()
        )));
    }
    w.validate()?;
    let flux = features
        .iter()
        .map(|readings| {
            let readings = readings.as_ref();
            for r in readings {
                r.validate()?;
            }
            let priority = rule.priority(readings)?;
            Ok(phi.apply(risk_value(priority, w)))
        })
        .collect::<Result<Vec<f64>>>()?;
    boundary.clone().with_flux(flux)
}

/// Circular moving average of the flux along each component's chain.
pub fn smooth_flux(boundary: &BoundarySet, window: usize) -> Result<BoundarySet> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "smoothing window must be odd, got {window}"
        )));
    }
    let chains = boundary.chains()?;
    let src = boundary.flux();
    let mut out = src.to_vec();
    let half = (window / 2) as isize;
    for chain in chains {
        let n = chain.len() as isize;
        if n == 0 {
            continue;
        }
        for (pos, &node) in chain.iter().enumerate() {
            let sum: f64 = (-half..=half)
                .map(|k| src[chain[(pos as isize + k).rem_euclid(n) as usize]])
                .sum();
            out[node] = sum / window as f64;
        }
    }
    boundary.clone().with_flux(out)
}

/// Reads one feature per boundary node from the grid channels, using the
/// occupied face cells of the node's own obstacle component.
///
/// Probability is the mean over those cells (1 when the channel is absent),
/// speed the largest velocity magnitude (0 when absent), and the label the
/// first face cell's label.
pub fn node_features(
    grid: &OccupancyGrid,
    boundary: &BoundarySet,
    kind: FeatureKind,
) -> Result<Vec<FeatureReading>> {
    let l = grid.lattice();
    let (component_of, _) = grid.obstacle_components();
    boundary
        .nodes()
        .iter()
        .map(|node| {
            let faces: Vec<usize> = node
                .occupied_faces()
                .filter_map(|(di, dj)| l.offset(node.i, node.j, di, dj))
                .map(|(a, b)| l.index(a, b))
                .collect();
            let own: Vec<usize> = faces
                .iter()
                .copied()
                .filter(|&c| component_of[c] == Some(node.component))
                .collect();
            let cells = if own.is_empty() { faces } else { own };
            Ok(match kind {
                FeatureKind::Probability => {
                    let p = grid.probability().map_or(1.0, |prob| {
                        cells.iter().map(|&c| prob[c]).sum::<f64>() / cells.len() as f64
                    });
                    FeatureReading::Probability(p)
                }
                FeatureKind::Speed => {
                    let s = grid.velocity().map_or(0.0, |vel| {
                        cells.iter().map(|&c| vel[c].norm()).fold(0.0, f64::max)
                    });
                    FeatureReading::Speed(s)
                }
                FeatureKind::Label => {
                    let labels = grid.labels().ok_or_else(|| {
                        Error::MalformedDocument("map has no label channel".into())
                    })?;
                    FeatureReading::Label(labels[cells[0]])
                }
            })
        })
        .collect()
}
