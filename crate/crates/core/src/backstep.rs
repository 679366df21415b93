//! Relative-degree-two extension for double integrators `y'' = w`.
//!
//! A smooth safe velocity `k_v` is tracked through the barrier
//! `h_B = h - |y' - k_v|^2 / (2 mu)`, and the acceleration is filtered so
//! that `dh_B/dt >= -gamma h_B`.

use crate::error::{Error, Result};
use crate::safety::{GuidanceFieldBundle, SafetyFunction};
use crate::{Mat2, Vec2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackstepConfig {
    /// Backstepping gain.
    pub mu: f64,
    pub gamma: f64,
    /// Sharpness of the smooth velocity filter; the min-norm filter is the
    /// `sigma_s -> 0` limit.
    pub sigma_s: f64,
    /// Floor on the acceleration coefficient norm.
    pub eta_c: f64,
    pub eta_v: f64,
}

impl Default for BackstepConfig {
    fn default() -> Self {
        Self {
            mu: 2.0,
            gamma: 1.0,
            sigma_s: 0.1,
            eta_c: 1e-9,
            eta_v: 1e-6,
        }
    }
}

impl BackstepConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mu", self.mu),
            ("gamma", self.gamma),
            ("sigma_s", self.sigma_s),
            ("eta_c", self.eta_c),
            ("eta_v", self.eta_v),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtendedState {
    pub y: Vec2,
    pub ydot: Vec2,
}

impl ExtendedState {
    pub fn new(y: Vec2, ydot: Vec2) -> Self {
        Self { y, ydot }
    }

    pub fn at_rest(y: Vec2) -> Self {
        Self::new(y, Vec2::zeros())
    }
}

/// `(-a + sqrt(a^2 + s^2)) / 2`, written to avoid cancellation for `a > 0`.
pub fn smooth_lambda(a: f64, sigma_s: f64) -> f64 {
    let r = a.hypot(sigma_s);
    if a > 0.0 {
        sigma_s * sigma_s / (2.0 * (a + r))
    } else {
        (r - a) / 2.0
    }
}

/// Smooth safe velocity `k_nom + lambda / |v|^2 v`.
pub fn k_v_smooth(
    y: Vec2,
    k_nom: Vec2,
    sf: &SafetyFunction,
    gf: &GuidanceFieldBundle,
    cfg: &BackstepConfig,
) -> Result<Vec2> {
    let v = gf.at(y)?;
    let n2 = v.norm_squared();
    if n2.sqrt() < cfg.eta_v {
        return Err(Error::VanishingGuidance { norm: n2.sqrt() });
    }
    let a = v.dot(&k_nom) + cfg.gamma * sf.value(y)?;
    Ok(k_nom + smooth_lambda(a, cfg.sigma_s) / n2 * v)
}

fn k_v_at<F>(y: Vec2, k_nom: &F, sf: &SafetyFunction, gf: &GuidanceFieldBundle, cfg: &BackstepConfig) -> Result<Vec2>
where
    F: Fn(Vec2) -> Result<Vec2>,
{
    k_v_smooth(y, k_nom(y)?, sf, gf, cfg)
}

/// Finite-difference Jacobian of `y -> k_v(y, k_nom(y))` with step `d / 2`.
pub fn k_v_jacobian<F>(
    y: Vec2,
    k_nom: &F,
    sf: &SafetyFunction,
    gf: &GuidanceFieldBundle,
    cfg: &BackstepConfig,
) -> Result<Mat2>
where
    F: Fn(Vec2) -> Result<Vec2>,
{
    k_v_jacobian_with_step(y, k_nom, sf, gf, cfg, sf.h().lattice().d / 2.0)
}

/// As [`k_v_jacobian`] with an explicit step. Falls back to a one-sided
/// difference when one of the probes leaves the sampled domain.
pub fn k_v_jacobian_with_step<F>(
    y: Vec2,
    k_nom: &F,
    sf: &SafetyFunction,
    gf: &GuidanceFieldBundle,
    cfg: &BackstepConfig,
    step: f64,
) -> Result<Mat2>
where
    F: Fn(Vec2) -> Result<Vec2>,
{
    let mut jac = Mat2::zeros();
    let mut center = None;
    for axis in 0..2 {
        let mut e = Vec2::zeros();
        e[axis] = step;
        let fwd = k_v_at(y + e, k_nom, sf, gf, cfg);
        let bwd = k_v_at(y - e, k_nom, sf, gf, cfg);
        let col = match (fwd, bwd) {
            (Ok(f), Ok(b)) => (f - b) / (2.0 * step),
            (Ok(f), Err(_)) => {
                let c = *get_or_eval(&mut center, || k_v_at(y, k_nom, sf, gf, cfg))?;
                (f - c) / step
            }
            (Err(_), Ok(b)) => {
                let c = *get_or_eval(&mut center, || k_v_at(y, k_nom, sf, gf, cfg))?;
                (c - b) / step
            }
            (Err(e), Err(_)) => return Err(e),
        };
        jac.set_column(axis, &col);
    }
    Ok(jac)
}

fn get_or_eval(slot: &mut Option<Vec2>, f: impl FnOnce() -> Result<Vec2>) -> Result<&Vec2> {
    if slot.is_none() {
        *slot = Some(f()?);
    }
    Ok(slot.as_ref().expect("filled above"))
}

/// `h - |y' - k_v|^2 / (2 mu)`.
pub fn h_b<F>(
    state: &ExtendedState,
    k_nom: &F,
    sf: &SafetyFunction,
    gf: &GuidanceFieldBundle,
    cfg: &BackstepConfig,
) -> Result<f64>
where
    F: Fn(Vec2) -> Result<Vec2>,
{
    let kv = k_v_at(state.y, k_nom, sf, gf, cfg)?;
    Ok(sf.value(state.y)? - (state.ydot - kv).norm_squared() / (2.0 * cfg.mu))
}

/// Result of the acceleration-level filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelFilter {
    pub w: Vec2,
    pub h: f64,
    pub h_b: f64,
    /// `dh_B/dt + gamma h_B` under the nominal acceleration.
    pub margin_nominal: f64,
    /// Same quantity under the returned acceleration.
    pub margin: f64,
}

impl AccelFilter {
    pub fn active(&self) -> bool {
        self.margin_nominal < 0.0
    }
}

/// Minimal correction of `w_nom` such that `dh_B/dt >= -gamma h_B`, with
/// `dh_B/dt = v . y' - (y' - k_v) . (w - J y') / mu`. The guidance field
/// stands in for `Dh`, so at `y' = k_v` the constraint reduces to the strict
/// margin of `k_v`.
pub fn filter_accel<F>(
    state: &ExtendedState,
    w_nom: Vec2,
    k_nom: &F,
    sf: &SafetyFunction,
    gf: &GuidanceFieldBundle,
    cfg: &BackstepConfig,
) -> Result<AccelFilter>
where
    F: Fn(Vec2) -> Result<Vec2>,
{
    let y = state.y;
    let kv = k_v_at(y, k_nom, sf, gf, cfg)?;
    let jac = k_v_jacobian(y, k_nom, sf, gf, cfg)?;
    let h = sf.value(y)?;
    let v = gf.at(y)?;
    let e = state.ydot - kv;
    let hb = h - e.norm_squared() / (2.0 * cfg.mu);
    let c = -e / cfg.mu;
    let b0 = v.dot(&state.ydot) + e.dot(&(jac * state.ydot)) / cfg.mu + cfg.gamma * hb;
    let margin_nominal = b0 + c.dot(&w_nom);
    let mut out = AccelFilter {
        w: w_nom,
        h,
        h_b: hb,
        margin_nominal,
        margin: margin_nominal,
    };
    if margin_nominal >= 0.0 {
        return Ok(out);
    }
    let c2 = c.norm_squared();
    if c2.sqrt() < cfg.eta_c {
        return Err(Error::DegenerateCoefficient {
            residual: margin_nominal,
        });
    }
    out.w = w_nom + (-margin_nominal / c2) * c;
    out.margin = b0 + c.dot(&out.w);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::extract_boundary;
    use crate::field::{ScalarField, VectorField};
    use crate::grid::OccupancyGrid;
    use crate::safety::{filter_control, FilterConfig};
    use proptest::prelude::*;

    fn open_room(n: usize, d: f64) -> OccupancyGrid {
        let rows: Vec<String> = (0..n)
            .map(|r| {
                if r == 0 || r == n - 1 {
                    "#".repeat(n)
                } else {
                    format!("#{}#", ".".repeat(n - 2))
                }
            })
            .collect();
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        OccupancyGrid::from_ascii(&refs, d, Vec2::zeros()).unwrap()
    }

    /// Fields `h = h0 + g . y` and `v = A y + b` on a full lattice.
    fn linear_fields(
        grid: &OccupancyGrid,
        h0: f64,
        g: Vec2,
        a: Mat2,
        b: Vec2,
    ) -> (SafetyFunction, GuidanceFieldBundle) {
        let l = *grid.lattice();
        let h = ScalarField::from_fn(l, |y| h0 + g.dot(&y)).unwrap();
        let vx = ScalarField::from_fn(l, |y| (a * y + b).x).unwrap();
        let vy = ScalarField::from_fn(l, |y| (a * y + b).y).unwrap();
        let bs = extract_boundary(grid).unwrap();
        (
            SafetyFunction::new(h),
            GuidanceFieldBundle::new(VectorField::new(vx, vy).unwrap(), bs).unwrap(),
        )
    }

    fn analytic_jacobian(y: Vec2, k: Vec2, h0: f64, g: Vec2, a: Mat2, b: Vec2, cfg: &BackstepConfig) -> Mat2 {
        let v = a * y + b;
        let n2 = v.norm_squared();
        let act = v.dot(&k) + cfg.gamma * (h0 + g.dot(&y));
        let lam = smooth_lambda(act, cfg.sigma_s);
        let dlam = (-1.0 + act / act.hypot(cfg.sigma_s)) / 2.0;
        let grad_a = a.transpose() * k + cfg.gamma * g;
        let grad_ratio = dlam * grad_a / n2 - lam * 2.0 * (a.transpose() * v) / (n2 * n2);
        v * grad_ratio.transpose() + (lam / n2) * a
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(smooth_lambda(0.0, 0.3), 0.15);
        assert!(smooth_lambda(1e3, 0.1) < 1e-5);
        let lam = smooth_lambda(-1.0, 0.1);
        assert!((lam - (1.0 + 1.01f64.sqrt()) / 2.0).abs() < 1e-15);
        assert!((lam - 1.0024937810560445).abs() < 1e-12);
    }

    #[test]
    fn correction_example() {
        let g = open_room(10, 0.1);
        let (sf, gf) = linear_fields(&g, 1.0, Vec2::zeros(), Mat2::zeros(), Vec2::new(1.0, 0.0));
        let cfg = BackstepConfig::default();
        // a = -2 + 1 = -1
        let kv = k_v_smooth(Vec2::new(0.4, 0.4), Vec2::new(-2.0, 0.0), &sf, &gf, &cfg).unwrap();
        assert!((kv.x - (-2.0 + 1.0024937810560445)).abs() < 1e-12);
        assert_eq!(kv.y, 0.0);
    }

    #[test]
    fn h_b_examples() {
        let g = open_room(10, 0.1);
        let (sf, gf) = linear_fields(&g, 1.0, Vec2::zeros(), Mat2::zeros(), Vec2::new(1.0, 0.0));
        let k_nom = |_: Vec2| Ok(Vec2::new(3.0, 0.0));
        let mut cfg = BackstepConfig { mu: 0.5, ..Default::default() };
        let y = Vec2::new(0.3, 0.5);
        let kv = k_v_smooth(y, Vec2::new(3.0, 0.0), &sf, &gf, &cfg).unwrap();
        assert_eq!(h_b(&ExtendedState::new(y, kv), &k_nom, &sf, &gf, &cfg).unwrap(), 1.0);
        let off = ExtendedState::new(y, kv + Vec2::new(0.0, 1.0));
        assert!(h_b(&off, &k_nom, &sf, &gf, &cfg).unwrap().abs() < 1e-15);
        cfg.mu = 1e12;
        assert!((h_b(&off, &k_nom, &sf, &gf, &cfg).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn jacobian_of_constant_fields_vanishes() {
        let g = open_room(10, 0.1);
        let (sf, gf) = linear_fields(&g, 0.7, Vec2::zeros(), Mat2::zeros(), Vec2::new(0.3, -0.8));
        let k = |_: Vec2| Ok(Vec2::new(0.5, 0.5));
        let j = k_v_jacobian(Vec2::new(0.42, 0.37), &k, &sf, &gf, &BackstepConfig::default()).unwrap();
        assert_eq!(j, Mat2::zeros());
    }

    #[test]
    fn jacobian_matches_chain_rule_and_refines() {
        let g = open_room(60, 0.01);
        let (h0, gv) = (0.2, Vec2::new(0.5, -0.3));
        let a = Mat2::new(1.0, 0.4, -0.2, 0.8);
        let b = Vec2::new(0.6, 0.9);
        let (sf, gf) = linear_fields(&g, h0, gv, a, b);
        let kc = Vec2::new(-0.7, -0.2);
        let k = |_: Vec2| Ok(kc);
        let cfg = BackstepConfig { sigma_s: 0.5, ..Default::default() };
        let y = Vec2::new(0.3, 0.25);
        let exact = analytic_jacobian(y, kc, h0, gv, a, b, &cfg);
        let j = k_v_jacobian(y, &k, &sf, &gf, &cfg).unwrap();
        assert!((j - exact).norm() <= 1e-4 * exact.norm(), "{j} vs {exact}");

        let e1 = (k_v_jacobian_with_step(y, &k, &sf, &gf, &cfg, 0.04).unwrap() - exact).norm();
        let e2 = (k_v_jacobian_with_step(y, &k, &sf, &gf, &cfg, 0.02).unwrap() - exact).norm();
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn jacobian_falls_back_at_domain_edge() {
        let g = open_room(10, 0.1);
        let (sf, gf) = linear_fields(&g, 0.5, Vec2::zeros(), Mat2::identity(), Vec2::new(1.0, 1.0));
        let k = |_: Vec2| Ok(Vec2::zeros());
        assert!(k_v_jacobian(Vec2::new(0.0, 0.5), &k, &sf, &gf, &BackstepConfig::default()).is_ok());
    }

    #[test]
    fn accel_filter_matches_one_dimensional_qp() {
        // flat wall: h = 1 - x, v = (-1, 0)
        let g = open_room(20, 0.1);
        let (sf, gf) = linear_fields(&g, 1.0, Vec2::new(-1.0, 0.0), Mat2::zeros(), Vec2::new(-1.0, 0.0));
        let k = |_: Vec2| Ok(Vec2::new(1.0, 0.0));
        let cfg = BackstepConfig { mu: 1.0, ..Default::default() };
        let state = ExtendedState::new(Vec2::new(0.5, 0.9), Vec2::new(1.2, 0.0));
        let w_nom = Vec2::new(4.0, 0.0);
        let out = filter_accel(&state, w_nom, &k, &sf, &gf, &cfg).unwrap();
        assert!(out.active());

        // generic QP: min |w - w_nom|^2 s.t. c . w + b0 >= 0, solved by the KKT system
        let kv = k_v_smooth(state.y, Vec2::new(1.0, 0.0), &sf, &gf, &cfg).unwrap();
        let e = state.ydot - kv;
        let c = -e / cfg.mu;
        let hb = 0.5 - e.norm_squared() / (2.0 * cfg.mu);
        let jac = k_v_jacobian(state.y, &k, &sf, &gf, &cfg).unwrap();
        let b0 = gf.at(state.y).unwrap().dot(&state.ydot) + e.dot(&(jac * state.ydot)) / cfg.mu + cfg.gamma * hb;
        let kkt = nalgebra::Matrix3::new(2.0, 0.0, -c.x, 0.0, 2.0, -c.y, c.x, c.y, 0.0);
        let rhs = nalgebra::Vector3::new(2.0 * w_nom.x, 2.0 * w_nom.y, -b0);
        let sol = kkt.lu().solve(&rhs).unwrap();
        assert!((out.w - Vec2::new(sol[0], sol[1])).norm() <= 1e-6);
        assert!(out.margin.abs() < 1e-9);
    }

    #[test]
    fn accel_filter_inactive_on_tracking_state() {
        let g = open_room(20, 0.1);
        let (sf, gf) = linear_fields(&g, 1.0, Vec2::new(-1.0, 0.0), Mat2::zeros(), Vec2::new(-1.0, 0.0));
        let k = |_: Vec2| Ok(Vec2::new(0.2, 0.0));
        let cfg = BackstepConfig::default();
        let y = Vec2::new(0.5, 0.5);
        let kv = k_v_smooth(y, Vec2::new(0.2, 0.0), &sf, &gf, &cfg).unwrap();
        let out = filter_accel(&ExtendedState::new(y, kv), Vec2::zeros(), &k, &sf, &gf, &cfg).unwrap();
        assert!(!out.active());
        assert_eq!(out.w, Vec2::zeros());
    }

    #[test]
    fn degenerate_coefficient_is_reported() {
        // on the tracking manifold the margin is the strict k_v margin, so
        // only a coefficient below the floor can leave nothing to correct with
        let g = open_room(20, 0.1);
        let (sf, gf) = linear_fields(&g, 1.0, Vec2::new(-1.0, 0.0), Mat2::zeros(), Vec2::new(-1.0, 0.0));
        let k = |_: Vec2| Ok(Vec2::new(1.0, 0.0));
        let y = Vec2::new(0.5, 0.5);
        let kv = k_v_smooth(y, Vec2::new(1.0, 0.0), &sf, &gf, &BackstepConfig::default()).unwrap();
        let on_manifold = filter_accel(&ExtendedState::new(y, kv), Vec2::new(4.0, 0.0), &k, &sf, &gf, &BackstepConfig::default()).unwrap();
        assert!(on_manifold.margin_nominal > 0.0);

        let cfg = BackstepConfig { eta_c: 10.0, ..Default::default() };
        let state = ExtendedState::new(y, Vec2::new(3.0, 0.0));
        let r = filter_accel(&state, Vec2::new(4.0, 0.0), &k, &sf, &gf, &cfg);
        assert!(matches!(r, Err(Error::DegenerateCoefficient { .. })));
    }

    proptest! {
        #[test]
        fn strict_margin_and_shrunken_set(kx in -4.0..4.0f64, ky in -4.0..4.0f64, h0 in 0.0..1.0f64, vx in -2.0..2.0f64, vy in 0.1..2.0f64, dx in -2.0..2.0f64, dy in -2.0..2.0f64) {
            let g = open_room(10, 0.1);
            let (sf, gf) = linear_fields(&g, h0, Vec2::zeros(), Mat2::zeros(), Vec2::new(vx, vy));
            let cfg = BackstepConfig::default();
            let y = Vec2::new(0.4, 0.4);
            let k = Vec2::new(kx, ky);
            let kv = k_v_smooth(y, k, &sf, &gf, &cfg).unwrap();
            prop_assert!(Vec2::new(vx, vy).dot(&kv) + cfg.gamma * h0 > 0.0);
            let nominal = move |_: Vec2| Ok(k);
            let s = ExtendedState::new(y, kv + Vec2::new(dx, dy));
            prop_assert!(h_b(&s, &nominal, &sf, &gf, &cfg).unwrap() <= h0);
        }

        #[test]
        fn smooth_filter_converges_to_min_norm(kx in -4.0..4.0f64, ky in -4.0..4.0f64, h0 in 0.0..1.0f64, vx in -2.0..2.0f64, vy in 0.5..2.0f64) {
            let g = open_room(10, 0.1);
            let (sf, gf) = linear_fields(&g, h0, Vec2::zeros(), Mat2::zeros(), Vec2::new(vx, vy));
            let y = Vec2::new(0.4, 0.4);
            let k = Vec2::new(kx, ky);
            let qp = filter_control(y, k, &sf, &gf, &FilterConfig::default()).unwrap();
            let dev = |s: f64| {
                let cfg = BackstepConfig { sigma_s: s, ..Default::default() };
                (k_v_smooth(y, k, &sf, &gf, &cfg).unwrap() - qp).norm()
            };
            let (d1, d2, d3) = (dev(1e-1), dev(1e-2), dev(1e-3));
            prop_assert!(d2 <= d1 && d3 <= d2);
            prop_assert!(d3 <= 1e-3 / (2.0 * 0.5));
        }
    }
}
