//! Safety constraint evaluation: activation function, closed-form filter
//! and activation zones, static and time-varying.

use rayon::prelude::*;

use crate::boundary::BoundarySet;
use crate::contour::zero_contours;
use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::OccupancyGrid;
use crate::Vec2;

/// Safety function `h` with its lattice gradient cached.
#[derive(Debug, Clone)]
pub struct SafetyFunction {
    h: ScalarField,
    grad: VectorField,
}

impl SafetyFunction {
    pub fn new(h: ScalarField) -> Self {
        let grad = h.gradient_field();
        Self { h, grad }
    }

    pub fn h(&self) -> &ScalarField {
        &self.h
    }

    pub fn grad(&self) -> &VectorField {
        &self.grad
    }

    pub fn value(&self, y: Vec2) -> Result<f64> {
        self.h.sample(y)
    }

    pub fn gradient(&self, y: Vec2) -> Result<Vec2> {
        self.grad.sample(y)
    }

    /// Smallest `|Dh|` over the boundary nodes.
    pub fn min_boundary_gradient(&self, boundary: &BoundarySet) -> f64 {
        boundary
            .nodes()
            .iter()
            .map(|n| self.grad.at(n.i, n.j).norm())
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct GuidanceFieldBundle {
    v: VectorField,
    boundary: BoundarySet,
}

impl GuidanceFieldBundle {
    pub fn new(v: VectorField, boundary: BoundarySet) -> Result<Self> {
        if v.lattice() != boundary.lattice() {
            return Err(Error::GridMismatch);
        }
        Ok(Self { v, boundary })
    }

    pub fn v(&self) -> &VectorField {
        &self.v
    }

    pub fn boundary(&self) -> &BoundarySet {
        &self.boundary
    }

    pub fn at(&self, y: Vec2) -> Result<Vec2> {
        self.v.sample(y)
    }

    /// Largest `|v + beta n|` over the boundary nodes.
    pub fn trace_error(&self) -> f64 {
        self.boundary
            .nodes()
            .iter()
            .zip(self.boundary.flux())
            .map(|(n, &beta)| (self.v.at(n.i, n.j) + beta * n.normal).norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Slope of the linear class-K term, 1/s.
    pub gamma: f64,
    /// Saturation level of the transition `sigma`.
    pub epsilon: f64,
    /// Floor on `|v|` below which no correction direction exists.
    pub eta_v: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            epsilon: 0.1,
            eta_v: 1e-6,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("epsilon", self.epsilon), ("eta_v", self.eta_v)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// `epsilon (1 - e^{-s})`, evaluated at `max(s, 0)`.
    pub fn sigma(&self, s: f64) -> f64 {
        self.epsilon * (1.0 - (-s.max(0.0)).exp())
    }
}

/// `a = v . k_nom + gamma h` at `y`.
pub fn activation(
    y: Vec2,
    k_nom: Vec2,
    sf: &SafetyFunction,
    gf: &GuidanceFieldBundle,
    cfg: &FilterConfig,
) -> Result<f64> {
    Ok(gf.at(y)?.dot(&k_nom) + cfg.gamma * sf.value(y)?)
}

/// Minimum-norm correction of `k_nom` satisfying `v . k >= v . k_nom - a`.
pub fn closed_form(k_nom: Vec2, v: Vec2, a: f64, eta_v: f64) -> Result<Vec2> {
    if a >= 0.0 {
        return Ok(k_nom);
    }
    let n2 = v.norm_squared();
    if n2.sqrt() < eta_v {
        return Err(Error::VanishingGuidance { norm: n2.sqrt() });
    }
    Ok(k_nom + (-a / n2) * v)
}

pub fn filter_control(
    y: Vec2,
    k_nom: Vec2,
    sf: &SafetyFunction,
    gf: &GuidanceFieldBundle,
    cfg: &FilterConfig,
) -> Result<Vec2> {
    let v = gf.at(y)?;
    let a = v.dot(&k_nom) + cfg.gamma * sf.value(y)?;
    closed_form(k_nom, v, a, cfg.eta_v)
}

/// Rate term `|v| / (|Dh| + sigma(h)) * dh/dt` of the time-varying constraint.
pub fn rate_term(v: Vec2, grad_h: Vec2, h: f64, dh_dt: f64, cfg: &FilterConfig) -> f64 {
    if dh_dt == 0.0 {
        return 0.0;
    }
    let denom = (grad_h.norm() + cfg.sigma(h)).max(cfg.eta_v);
    v.norm() / denom * dh_dt
}

/// Activation with the time-varying safe set correction.
pub fn activation_dynamic(
    y: Vec2,
    k_nom: Vec2,
    sf: &SafetyFunction,
    dh_dt: &ScalarField,
    gf: &GuidanceFieldBundle,
    cfg: &FilterConfig,
) -> Result<f64> {
    let v = gf.at(y)?;
    let h = sf.value(y)?;
    let rate = rate_term(v, sf.gradient(y)?, h, dh_dt.sample(y)?, cfg);
    Ok(v.dot(&k_nom) + rate + cfg.gamma * h)
}

pub fn filter_control_dynamic(
    y: Vec2,
    k_nom: Vec2,
    sf: &SafetyFunction,
    dh_dt: &ScalarField,
    gf: &GuidanceFieldBundle,
    cfg: &FilterConfig,
) -> Result<Vec2> {
    let a = activation_dynamic(y, k_nom, sf, dh_dt, gf, cfg)?;
    closed_form(k_nom, gf.at(y)?, a, cfg.eta_v)
}

/// Activation values over the free cells and the zero contour of `a`.
#[derive(Debug, Clone)]
pub struct ActivationZone {
    a: ScalarField,
    vk: Vec<f64>,
    contours: Vec<Vec<Vec2>>,
}

impl ActivationZone {
    /// Activation at each free cell center, NaN elsewhere.
    pub fn a(&self) -> &ScalarField {
        &self.a
    }

    /// `v . k_nom` at each free cell center, NaN elsewhere.
    pub fn vk(&self) -> &[f64] {
        &self.vk
    }

    pub fn contours(&self) -> &[Vec<Vec2>] {
        &self.contours
    }

    pub fn is_active(&self, idx: usize) -> bool {
        self.a.mask()[idx] && self.a.values()[idx] <= 0.0
    }

    /// Number of free cells where the filter intervenes (`a <= 0`).
    pub fn active_count(&self) -> usize {
        (0..self.vk.len()).filter(|&k| self.is_active(k)).count()
    }

    /// Active cells where the nominal input does not move along `v`.
    pub fn restricted_count(&self) -> usize {
        self.count_where(|k| self.vk[k] <= 0.0)
    }

    /// Active cells satisfying `pred`.
    pub fn count_where(&self, pred: impl Fn(usize) -> bool) -> usize {
        (0..self.vk.len()).filter(|&k| self.is_active(k) && pred(k)).count()
    }

    /// Sign grid, one row per `j`: `-1` where active, `1` where inactive and
    /// `nan` off the free set.
    pub fn sign_csv(&self) -> String {
        let l = self.a.lattice();
        let mut out = String::new();
        for j in 0..l.ny {
            let row: Vec<&str> = (0..l.nx)
                .map(|i| {
                    let k = l.index(i, j);
                    if !self.a.mask()[k] {
                        "nan"
                    } else if self.is_active(k) {
                        "-1"
                    } else {
                        "1"
                    }
                })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Contour points as `polyline,x,y` rows.
    pub fn contours_csv(&self) -> String {
        let mut out = String::from("polyline,x,y\n");
        for (n, line) in self.contours.iter().enumerate() {
            for p in line {
                out.push_str(&format!("{n},{:?},{:?}\n", p.x, p.y));
            }
        }
        out
    }
}

/// Evaluates the activation at every free cell center for the controller
/// `k_nom` and extracts its zero contour. With `dh_dt` the time-varying
/// activation is used.
pub fn activation_zone<F>(
    grid: &OccupancyGrid,
    k_nom: F,
    sf: &SafetyFunction,
    gf: &GuidanceFieldBundle,
    cfg: &FilterConfig,
    dh_dt: Option<&ScalarField>,
) -> Result<ActivationZone>
where
    F: Fn(Vec2) -> Result<Vec2> + Sync,
{
    let l = *grid.lattice();
    if sf.h().lattice() != &l || gf.v().lattice() != &l {
        return Err(Error::GridMismatch);
    }
    let rows: Vec<Vec<(f64, f64)>> = (0..l.ny)
        .into_par_iter()
        .map(|j| {
            (0..l.nx)
                .map(|i| {
                    if !grid.is_free(i, j) {
                        return Ok((f64::NAN, f64::NAN));
                    }
                    let y = l.center(i, j);
                    let v = gf.v().at(i, j);
                    let h = sf.h().at(i, j);
                    let vk = v.dot(&k_nom(y)?);
                    let rate = match dh_dt {
                        Some(dt) => rate_term(v, sf.grad().at(i, j), h, dt.at(i, j), cfg),
                        None => 0.0,
                    };
                    Ok((vk + rate + cfg.gamma * h, vk))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let (a, vk): (Vec<f64>, Vec<f64>) = rows.into_iter().flatten().unzip();
    let mask = grid.free_mask();
    let contours = zero_contours(&l, &a, &mask);
    Ok(ActivationZone {
        a: ScalarField::new(l, a, mask)?,
        vk,
        contours,
    })
}
