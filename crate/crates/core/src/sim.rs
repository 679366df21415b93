//! Closed-loop simulation of single and double integrators under the
//! filtered controllers, for static maps and for maps re-solved per frame.

use rayon::prelude::*;

use crate::backstep::{filter_accel, h_b, k_v_smooth, BackstepConfig, ExtendedState};
use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::grid::OccupancyGrid;
use crate::safety::{closed_form, rate_term, FilterConfig, GuidanceFieldBundle, SafetyFunction};
use crate::Vec2;

/// `-mu (y - goal)`.
pub fn nominal_goal(y: Vec2, mu: f64, goal: Vec2) -> Vec2 {
    -mu * (y - goal)
}

/// `-mu Dh(y)`, the direction that decreases `h` fastest.
pub fn nominal_adversarial(y: Vec2, mu: f64, sf: &SafetyFunction) -> Result<Vec2> {
    Ok(-mu * sf.gradient(y)?)
}

/// Nominal velocity controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Nominal {
    Goal { goal: Vec2, mu: f64 },
    Adversarial { mu: f64 },
    Zero,
}

impl Nominal {
    pub fn eval(&self, y: Vec2, sf: &SafetyFunction) -> Result<Vec2> {
        match *self {
            Nominal::Goal { goal, mu } => Ok(nominal_goal(y, mu, goal)),
            Nominal::Adversarial { mu } => nominal_adversarial(y, mu, sf),
            Nominal::Zero => Ok(Vec2::zeros()),
        }
    }

    pub fn goal(&self) -> Option<Vec2> {
        match *self {
            Nominal::Goal { goal, .. } => Some(goal),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Nominal::Goal { mu, .. } | Nominal::Adversarial { mu } if !(mu > 0.0) => Err(
                Error::InvalidParameter(format!("nominal gain must be positive, got {mu}")),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub t_final: f64,
}

impl SimConfig {
    fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need dt > 0 and T >= 0, got dt = {}, T = {}",
                self.dt, self.t_final
            )));
        }
        Ok((self.t_final / self.dt + 1e-9).floor() as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    TimeLimit,
    GoalReached,
    LeftDomain,
    Degenerate,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::TimeLimit => "TIME_LIMIT",
            Termination::GoalReached => "GOAL_REACHED",
            Termination::LeftDomain => "LEFT_DOMAIN",
            Termination::Degenerate => "DEGENERATE",
        }
    }
}

pub const FLAG_ACTIVE: u8 = 1;
/// First sample after the fields were replaced.
pub const FLAG_FRAME: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub y: Vec2,
    pub ydot: Option<Vec2>,
    pub u_nom: Vec2,
    pub u: Vec2,
    pub h: f64,
    pub h_b: Option<f64>,
    /// Activation under the nominal input.
    pub a: f64,
    /// Constraint left side minus right side under the applied input.
    pub margin: f64,
    pub flags: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub dt: f64,
    pub termination: Termination,
}

impl Trajectory {
    pub fn min_h(&self) -> f64 {
        self.samples.iter().map(|s| s.h).fold(f64::INFINITY, f64::min)
    }

    pub fn min_h_b(&self) -> Option<f64> {
        self.samples
            .iter()
            .filter_map(|s| s.h_b)
            .reduce(f64::min)
    }

    pub fn min_margin(&self) -> f64 {
        self.samples.iter().map(|s| s.margin).fold(f64::INFINITY, f64::min)
    }

    pub fn final_position(&self) -> Vec2 {
        self.samples.last().map_or(Vec2::zeros(), |s| s.y)
    }

    pub fn path_length(&self) -> f64 {
        self.samples.windows(2).map(|w| (w[1].y - w[0].y).norm()).sum()
    }

    /// Smallest distance from a sampled position to any of `points`.
    pub fn min_distance_to(&self, points: &[Vec2]) -> f64 {
        self.samples
            .iter()
            .flat_map(|s| points.iter().map(move |p| (s.y - p).norm()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn filter_ever_active(&self) -> bool {
        self.samples.iter().any(|s| s.flags & FLAG_ACTIVE != 0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,y,vx,vy,unom_x,unom_y,u_x,u_y,h,h_B,a,margin,flags\n");
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:?}"));
        for s in &self.samples {
            out.push_str(&format!(
                "{:?},{:?},{:?},{},{},{:?},{:?},{:?},{:?},{:?},{},{:?},{:?},{}\n",
                s.t,
                s.y.x,
                s.y.y,
                opt(s.ydot.map(|v| v.x)),
                opt(s.ydot.map(|v| v.y)),
                s.u_nom.x,
                s.u_nom.y,
                s.u.x,
                s.u.y,
                s.h,
                opt(s.h_b),
                s.a,
                s.margin,
                s.flags
            ));
        }
        out
    }
}

/// Fields used by the first-order loop at one instant.
#[derive(Clone, Copy)]
struct Fields<'a> {
    sf: &'a SafetyFunction,
    gf: &'a GuidanceFieldBundle,
    dh_dt: Option<&'a ScalarField>,
}

struct Eval {
    u_nom: Vec2,
    u: Vec2,
    h: f64,
    a: f64,
    margin: f64,
}

fn eval_first_order(y: Vec2, nominal: &Nominal, f: Fields<'_>, cfg: &FilterConfig) -> Result<Eval> {
    let u_nom = nominal.eval(y, f.sf)?;
    let v = f.gf.at(y)?;
    let h = f.sf.value(y)?;
    let rate = match f.dh_dt {
        Some(dt) => rate_term(v, f.sf.gradient(y)?, h, dt.sample(y)?, cfg),
        None => 0.0,
    };
    let a = v.dot(&u_nom) + rate + cfg.gamma * h;
    let u = closed_form(u_nom, v, a, cfg.eta_v)?;
    let margin = v.dot(&u) + rate + cfg.gamma * h;
    Ok(Eval { u_nom, u, h, a, margin })
}

enum Stop {
    Terminate(Termination),
    Fail(Error),
}

fn classify(e: Error) -> Stop {
    match e {
        Error::OutOfDomain { .. } => Stop::Terminate(Termination::LeftDomain),
        Error::VanishingGuidance { .. } | Error::DegenerateCoefficient { .. } => {
            Stop::Terminate(Termination::Degenerate)
        }
        e => Stop::Fail(e),
    }
}

/// Largest filtered speed over the free cell centers; used for the step
/// guard `dt <= d / (4 u_max)`.
fn max_filtered_speed(grid: &OccupancyGrid, nominal: &Nominal, f: Fields<'_>, cfg: &FilterConfig) -> f64 {
    let l = *grid.lattice();
    (0..l.len())
        .into_par_iter()
        .filter(|&k| grid.is_free_idx(k))
        .filter_map(|k| eval_first_order(l.center_of(k), nominal, f, cfg).ok())
        .map(|e| e.u.norm().max(e.u_nom.norm()))
        .reduce(|| 0.0, f64::max)
}

fn check_step(dt: f64, d: f64, u_max: f64) -> Result<()> {
    if u_max > 0.0 {
        let limit = d / (4.0 * u_max);
        if dt > limit {
            return Err(Error::StepTooLarge { dt, limit });
        }
    }
    Ok(())
}

/// RK4 on `y' = u(y)` where the fields used at step `n` are `fields(n)`.
fn run_first_order<'a>(
    y0: Vec2,
    nominal: &Nominal,
    cfg: &FilterConfig,
    sim: &SimConfig,
    goal_tol: f64,
    fields: impl Fn(usize) -> (Fields<'a>, bool),
) -> Result<Trajectory> {
    let steps = sim.steps()?;
    let dt = sim.dt;
    let mut samples = Vec::with_capacity(steps + 1);
    let mut y = y0;
    let mut termination = Termination::TimeLimit;
    for n in 0..=steps {
        let (f, new_frame) = fields(n);
        let e = match eval_first_order(y, nominal, f, cfg) {
            Ok(e) => e,
            Err(err) => match classify(err) {
                Stop::Terminate(t) => {
                    termination = t;
                    break;
                }
                Stop::Fail(err) => return Err(err),
            },
        };
        let mut flags = 0;
        if e.a < 0.0 {
            flags |= FLAG_ACTIVE;
        }
        if new_frame {
            flags |= FLAG_FRAME;
        }
        samples.push(Sample {
            t: n as f64 * dt,
            y,
            ydot: None,
            u_nom: e.u_nom,
            u: e.u,
            h: e.h,
            h_b: None,
            a: e.a,
            margin: e.margin,
            flags,
        });
        if nominal.goal().is_some_and(|g| (y - g).norm() < goal_tol) {
            termination = Termination::GoalReached;
            break;
        }
        if n == steps {
            break;
        }
        let rhs = |p: Vec2| eval_first_order(p, nominal, f, cfg).map(|e| e.u);
        let step = (|| {
            let k1 = e.u;
            let k2 = rhs(y + 0.5 * dt * k1)?;
            let k3 = rhs(y + 0.5 * dt * k2)?;
            let k4 = rhs(y + dt * k3)?;
            Ok(y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        })();
        match step {
            Ok(next) => y = next,
            Err(err) => match classify(err) {
                Stop::Terminate(t) => {
                    termination = t;
                    break;
                }
                Stop::Fail(err) => return Err(err),
            },
        }
    }
    Ok(Trajectory {
        samples,
        dt,
        termination,
    })
}

/// Single integrator `y' = k_QP(y)` integrated with classical RK4.
pub fn integrate_single(
    y0: Vec2,
    nominal: &Nominal,
    grid: &OccupancyGrid,
    sf: &SafetyFunction,
    gf: &GuidanceFieldBundle,
    cfg: &FilterConfig,
    sim: &SimConfig,
) -> Result<Trajectory> {
    let h0 = sf.value(y0)?;
    if !(h0 > 0.0) {
        return Err(Error::StartUnsafe { value: h0 });
    }
    let f = Fields { sf, gf, dh_dt: None };
    check_step(sim.dt, grid.d(), max_filtered_speed(grid, nominal, f, cfg))?;
    run_first_order(y0, nominal, cfg, sim, grid.d(), |_| (f, false))
}

/// Nominal acceleration `kd (k_nom(y) - y')`, tracking the nominal velocity.
pub fn nominal_accel(state: &ExtendedState, nominal: &Nominal, kd: f64, sf: &SafetyFunction) -> Result<Vec2> {
    Ok(kd * (nominal.eval(state.y, sf)? - state.ydot))
}

/// Double integrator `y'' = w` with the backstepping filter on `w`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_double(
    state0: ExtendedState,
    nominal: &Nominal,
    kd: f64,
    grid: &OccupancyGrid,
    sf: &SafetyFunction,
    gf: &GuidanceFieldBundle,
    cfg: &BackstepConfig,
    sim: &SimConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let k_nom = |y: Vec2| nominal.eval(y, sf);
    let hb0 = h_b(&state0, &k_nom, sf, gf, cfg)?;
    if hb0 < 0.0 {
        return Err(Error::StartUnsafe { value: hb0 });
    }
    let l = *grid.lattice();
    let u_max = (0..l.len())
        .into_par_iter()
        .filter(|&k| grid.is_free_idx(k))
        .filter_map(|k| {
            let y = l.center_of(k);
            k_v_smooth(y, nominal.eval(y, sf).ok()?, sf, gf, cfg).ok()
        })
        .map(|v| v.norm())
        .reduce(|| 0.0, f64::max)
        .max(state0.ydot.norm());
    check_step(sim.dt, grid.d(), u_max)?;

    let steps = sim.steps()?;
    let dt = sim.dt;
    let rhs = |s: &ExtendedState| -> Result<(Vec2, Vec2)> {
        let w_nom = nominal_accel(s, nominal, kd, sf)?;
        let out = filter_accel(s, w_nom, &k_nom, sf, gf, cfg)?;
        Ok((s.ydot, out.w))
    };
    let mut samples = Vec::with_capacity(steps + 1);
    let mut s = state0;
    let mut termination = Termination::TimeLimit;
    for n in 0..=steps {
        let eval = (|| {
            let w_nom = nominal_accel(&s, nominal, kd, sf)?;
            let out = filter_accel(&s, w_nom, &k_nom, sf, gf, cfg)?;
            Ok::<_, Error>((w_nom, out))
        })();
        let (w_nom, out) = match eval {
            Ok(e) => e,
            Err(err) => match classify(err) {
                Stop::Terminate(t) => {
                    termination = t;
                    break;
                }
                Stop::Fail(err) => return Err(err),
            },
        };
        samples.push(Sample {
            t: n as f64 * dt,
            y: s.y,
            ydot: Some(s.ydot),
            u_nom: w_nom,
            u: out.w,
            h: out.h,
            h_b: Some(out.h_b),
            a: out.margin_nominal,
            margin: out.margin,
            flags: if out.active() { FLAG_ACTIVE } else { 0 },
        });
        if nominal.goal().is_some_and(|g| (s.y - g).norm() < grid.d()) {
            termination = Termination::GoalReached;
            break;
        }
        if n == steps {
            break;
        }
        let advance = |s0: &ExtendedState, k: (Vec2, Vec2), h: f64| ExtendedState {
            y: s0.y + h * k.0,
            ydot: s0.ydot + h * k.1,
        };
        let step = (|| {
            let k1 = (s.ydot, out.w);
            let k2 = rhs(&advance(&s, k1, 0.5 * dt))?;
            let k3 = rhs(&advance(&s, k2, 0.5 * dt))?;
            let k4 = rhs(&advance(&s, k3, dt))?;
            Ok(ExtendedState {
                y: s.y + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
                ydot: s.ydot + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
            })
        })();
        match step {
            Ok(next) => s = next,
            Err(err) => match classify(err) {
                Stop::Terminate(t) => {
                    termination = t;
                    break;
                }
                Stop::Fail(err) => return Err(err),
            },
        }
    }
    Ok(Trajectory {
        samples,
        dt,
        termination,
    })
}

/// Forward difference `(h_next - h_prev) / dt` and a per-cell flag marking
/// cells valued in only one of the two fields. There the missing side is
/// taken as the surface value 0.
pub fn time_derivative(
    h_prev: &ScalarField,
    h_next: &ScalarField,
    dt: f64,
) -> Result<(ScalarField, Vec<bool>)> {
    if h_prev.lattice() != h_next.lattice() {
        return Err(Error::GridMismatch);
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
    }
    let n = h_prev.values().len();
    let mut out = vec![f64::NAN; n];
    let mut flagged = vec![false; n];
    for k in 0..n {
        let (p, q) = (h_prev.values()[k], h_next.values()[k]);
        out[k] = match (p.is_finite(), q.is_finite()) {
            (true, true) => (q - p) / dt,
            (true, false) => {
                flagged[k] = true;
                -p / dt
            }
            (false, true) => {
                flagged[k] = true;
                q / dt
            }
            (false, false) => f64::NAN,
        };
    }
    let mask: Vec<bool> = (0..n)
        .map(|k| h_next.mask()[k] && out[k].is_finite())
        .collect();
    Ok((ScalarField::new(*h_prev.lattice(), out, mask)?, flagged))
}

/// Solved fields of one frame of a dynamic scene.
#[derive(Debug, Clone)]
pub struct Frame {
    pub t: f64,
    pub grid: OccupancyGrid,
    pub sf: SafetyFunction,
    pub gf: GuidanceFieldBundle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicConfig {
    pub dt_frame: f64,
    pub dt_sim: f64,
    pub t_final: f64,
}

#[derive(Debug, Clone)]
pub struct DynamicRun {
    pub trajectory: Trajectory,
    pub frames: Vec<Frame>,
    /// `dh/dt` attached to each frame.
    pub dh_dt: Vec<ScalarField>,
    /// Largest `|h_{k+1} - h_k|` over cells valued in both frames.
    pub frame_jumps: Vec<f64>,
}

/// Rebuilds the fields at every frame time with `build`, differences
/// consecutive safety functions in time and integrates the single
/// integrator with the time-varying filter, holding each frame's fields
/// until the next.
pub fn run_dynamic<B>(
    build: B,
    y0: Vec2,
    nominal: &Nominal,
    cfg: &FilterConfig,
    dcfg: &DynamicConfig,
) -> Result<DynamicRun>
where
    B: Fn(f64) -> Result<Frame> + Sync,
{
    let per_frame = dcfg.dt_frame / dcfg.dt_sim;
    let per_frame_n = per_frame.round();
    if !(dcfg.dt_sim > 0.0 && per_frame_n >= 1.0 && (per_frame - per_frame_n).abs() < 1e-9) {
        return Err(Error::InvalidParameter(format!(
            "simulation step {} must divide the frame step {}",
            dcfg.dt_sim, dcfg.dt_frame
        )));
    }
    let per_frame = per_frame_n as usize;
    let sim = SimConfig {
        dt: dcfg.dt_sim,
        t_final: dcfg.t_final,
    };
    let steps = sim.steps()?;
    let n_frames = steps / per_frame + 2;
    let frames: Vec<Frame> = (0..n_frames)
        .into_par_iter()
        .map(|k| build(k as f64 * dcfg.dt_frame))
        .collect::<Result<_>>()?;
    let mut dh_dt = Vec::with_capacity(n_frames);
    let mut frame_jumps = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let (a, b) = if k + 1 < n_frames { (k, k + 1) } else { (k - 1, k) };
        let (dt_field, _) = time_derivative(frames[a].sf.h(), frames[b].sf.h(), dcfg.dt_frame)?;
        let (ha, hb) = (frames[a].sf.h().values(), frames[b].sf.h().values());
        let jump = ha
            .iter()
            .zip(hb)
            .filter(|(p, q)| p.is_finite() && q.is_finite())
            .map(|(p, q)| (q - p).abs())
            .fold(0.0, f64::max);
        dh_dt.push(dt_field);
        frame_jumps.push(jump);
    }

    let f0 = &frames[0];
    let h0 = f0.sf.value(y0)?;
    if !(h0 > 0.0) {
        return Err(Error::StartUnsafe { value: h0 });
    }
    let fields0 = Fields {
        sf: &f0.sf,
        gf: &f0.gf,
        dh_dt: Some(&dh_dt[0]),
    };
    check_step(sim.dt, f0.grid.d(), max_filtered_speed(&f0.grid, nominal, fields0, cfg))?;
    let trajectory = run_first_order(y0, nominal, cfg, &sim, f0.grid.d(), |n| {
        let k = n / per_frame;
        (
            Fields {
                sf: &frames[k].sf,
                gf: &frames[k].gf,
                dh_dt: Some(&dh_dt[k]),
            },
            n > 0 && n % per_frame == 0,
        )
    })?;
    Ok(DynamicRun {
        trajectory,
        frames,
        dh_dt,
        frame_jumps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::extract_boundary;
    use crate::elliptic::{solve_guidance, solve_poisson, Forcing, SolverConfig};

    fn ascii_grid(rows: &[String], d: f64) -> OccupancyGrid {
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        OccupancyGrid::from_ascii(&refs, d, Vec2::zeros()).unwrap()
    }

    fn room_with_block(n: usize, block: Option<(usize, usize, usize)>) -> OccupancyGrid {
        let rows: Vec<String> = (0..n)
            .map(|r| {
                (0..n)
                    .map(|c| {
                        let wall = r == 0 || c == 0 || r == n - 1 || c == n - 1;
                        let blk = block.is_some_and(|(bi, bj, s)| {
                            c >= bi && c < bi + s && (n - 1 - r) >= bj && (n - 1 - r) < bj + s
                        });
                        if wall || blk { '#' } else { '.' }
                    })
                    .collect()
            })
            .collect();
        ascii_grid(&rows, 0.05)
    }

    fn solve(grid: &OccupancyGrid) -> (SafetyFunction, GuidanceFieldBundle) {
        let cfg = SolverConfig::default();
        let (h, _) = solve_poisson(grid, &Forcing::default(), &cfg).unwrap();
        let b = extract_boundary(grid).unwrap();
        let (v, _) = solve_guidance(grid, &b, &cfg).unwrap();
        (SafetyFunction::new(h), GuidanceFieldBundle::new(v, b).unwrap())
    }

    #[test]
    fn nominal_examples() {
        let g = Vec2::new(1.0, 2.0);
        assert_eq!(nominal_goal(g, 3.0, g), Vec2::zeros());
        assert_eq!(nominal_goal(Vec2::new(3.0, 2.0), 1.0, g), Vec2::new(-2.0, 0.0));
        let y = Vec2::new(-0.5, 0.7);
        assert!(nominal_goal(y, 0.7, g).dot(&(g - y)) > 0.0);
    }

    #[test]
    fn adversarial_points_down_the_gradient() {
        let grid = room_with_block(21, None);
        let (sf, _) = solve(&grid);
        for k in 0..grid.lattice().len() {
            if grid.is_free_idx(k) {
                let y = grid.lattice().center_of(k);
                let u = nominal_adversarial(y, 1.5, &sf).unwrap();
                assert!(u.dot(&sf.gradient(y).unwrap()) <= 0.0);
            }
        }
        // symmetric room: the center is the maximum of h
        let c = grid.lattice().center(10, 10);
        assert!(nominal_adversarial(c, 1.0, &sf).unwrap().norm() < 1e-9);
    }

    #[test]
    fn empty_room_run_is_straight_and_idle() {
        let grid = room_with_block(21, None);
        let (sf, gf) = solve(&grid);
        let goal = grid.lattice().center(10, 10);
        let y0 = goal + Vec2::new(0.1, 0.05);
        let nominal = Nominal::Goal { goal, mu: 1.0 };
        let sim = SimConfig { dt: 0.01, t_final: 5.0 };
        let tr = integrate_single(y0, &nominal, &grid, &sf, &gf, &FilterConfig::default(), &sim).unwrap();
        assert_eq!(tr.termination, Termination::GoalReached);
        assert!(!tr.filter_ever_active());
        for s in &tr.samples {
            assert_eq!(s.u, s.u_nom);
            let dir = (s.y - goal).normalize();
            assert!((dir - Vec2::new(0.1, 0.05).normalize()).norm() < 1e-9);
        }
    }

    #[test]
    fn sample_count_and_monotone_time() {
        let grid = room_with_block(21, None);
        let (sf, gf) = solve(&grid);
        let sim = SimConfig { dt: 0.01, t_final: 0.5 };
        let y0 = grid.lattice().center(5, 5);
        let tr = integrate_single(y0, &Nominal::Zero, &grid, &sf, &gf, &FilterConfig::default(), &sim).unwrap();
        assert_eq!(tr.samples.len(), 51);
        assert_eq!(tr.termination, Termination::TimeLimit);
        assert!(tr.samples.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn unsafe_start_and_large_steps_are_rejected() {
        let grid = room_with_block(21, None);
        let (sf, gf) = solve(&grid);
        let cfg = FilterConfig::default();
        let nominal = Nominal::Adversarial { mu: 1.0 };
        let wall = grid.lattice().center(0, 5);
        let sim = SimConfig { dt: 0.001, t_final: 1.0 };
        assert!(matches!(
            integrate_single(wall, &nominal, &grid, &sf, &gf, &cfg, &sim),
            Err(Error::StartUnsafe { .. })
        ));
        let y0 = grid.lattice().center(5, 5);
        let big = SimConfig { dt: 1.0, t_final: 1.0 };
        assert!(matches!(
            integrate_single(y0, &nominal, &grid, &sf, &gf, &cfg, &big),
            Err(Error::StepTooLarge { .. })
        ));
    }

    #[test]
    fn adversarial_run_stays_safe_and_is_deterministic() {
        let grid = room_with_block(25, Some((10, 10, 5)));
        let (sf, gf) = solve(&grid);
        let cfg = FilterConfig::default();
        let nominal = Nominal::Adversarial { mu: 2.0 };
        let sim = SimConfig { dt: 0.002, t_final: 3.0 };
        let y0 = grid.lattice().center(8, 12);
        let a = integrate_single(y0, &nominal, &grid, &sf, &gf, &cfg, &sim).unwrap();
        let b = integrate_single(y0, &nominal, &grid, &sf, &gf, &cfg, &sim).unwrap();
        assert_eq!(a, b);
        assert!(a.min_h() >= -grid.d());
        assert!(a.min_margin() >= -1e-6);
        assert!(a.filter_ever_active());
    }

    #[test]
    fn double_integrator_rest_is_equilibrium() {
        let grid = room_with_block(21, None);
        let (sf, gf) = solve(&grid);
        // off-center, where the guidance field does not vanish
        let y0 = grid.lattice().center(6, 10);
        let sim = SimConfig { dt: 0.01, t_final: 1.0 };
        let tr = integrate_double(
            ExtendedState::at_rest(y0), &Nominal::Zero, 2.0, &grid, &sf, &gf, &BackstepConfig::default(), &sim,
        )
        .unwrap();
        let hb0 = tr.samples[0].h_b.unwrap();
        for s in &tr.samples {
            assert!((s.y - y0).norm() < 1e-12);
            assert!((s.h_b.unwrap() - hb0).abs() < 1e-12);
        }
    }

    #[test]
    fn double_integrator_pushed_at_wall_stays_safe() {
        let grid = room_with_block(25, Some((10, 10, 5)));
        let (sf, gf) = solve(&grid);
        let nominal = Nominal::Adversarial { mu: 3.0 };
        let cfg = BackstepConfig::default();
        let y0 = grid.lattice().center(7, 12);
        let sim = SimConfig { dt: 0.002, t_final: 3.0 };
        let tr = integrate_double(ExtendedState::at_rest(y0), &nominal, 4.0, &grid, &sf, &gf, &cfg, &sim).unwrap();
        assert_ne!(tr.termination, Termination::Degenerate);
        assert!(tr.min_h() >= -grid.d(), "{}", tr.min_h());
    }

    #[test]
    fn larger_mu_is_less_conservative() {
        let grid = room_with_block(21, None);
        let (sf, gf) = solve(&grid);
        let nominal = Nominal::Goal { goal: grid.lattice().center(10, 10), mu: 1.0 };
        let k = |y: Vec2| nominal.eval(y, &sf);
        let s = ExtendedState::new(grid.lattice().center(4, 6), Vec2::new(0.3, -0.2));
        let hb: Vec<f64> = [0.5, 2.0, 8.0]
            .iter()
            .map(|&mu| h_b(&s, &k, &sf, &gf, &BackstepConfig { mu, ..Default::default() }).unwrap())
            .collect();
        let h = sf.value(s.y).unwrap();
        assert!(hb[0] < hb[1] && hb[1] < hb[2] && hb[2] <= h);
    }

    #[test]
    fn time_derivative_cases() {
        let grid = room_with_block(21, None);
        let (sf, _) = solve(&grid);
        let (z, flags) = time_derivative(sf.h(), sf.h(), 0.1).unwrap();
        assert!(z.values().iter().all(|v| !v.is_finite() || *v == 0.0));
        assert!(flags.iter().all(|f| !f));
        let other = room_with_block(23, None);
        let (sf2, _) = solve(&other);
        assert!(matches!(time_derivative(sf.h(), sf2.h(), 0.1), Err(Error::GridMismatch)));
    }

    #[test]
    fn moving_block_sign_pattern() {
        // corridor with a block moving +x by one cell per frame
        let at = |t: f64| {
            let shift = (t / 0.1).round() as usize;
            let grid = room_with_block(31, Some((8 + shift, 12, 5)));
            let (sf, gf) = solve(&grid);
            Frame { t, grid, sf, gf }
        };
        let (f0, f1) = (at(0.0), at(0.1));
        let (dh, _) = time_derivative(f0.sf.h(), f1.sf.h(), 0.1).unwrap();
        let l = f0.grid.lattice();
        // ahead of the block (x increasing) h drops, behind it rises
        assert!(dh.at(15, 14) < 0.0);
        assert!(dh.at(6, 14) > 0.0);
        assert!(l.nx == 31);
    }

    #[test]
    fn static_frames_reduce_to_static_run() {
        let grid = room_with_block(25, Some((10, 10, 5)));
        let (sf, gf) = solve(&grid);
        let cfg = FilterConfig::default();
        let nominal = Nominal::Goal { goal: grid.lattice().center(20, 18), mu: 1.0 };
        let y0 = grid.lattice().center(4, 6);
        let st = integrate_single(y0, &nominal, &grid, &sf, &gf, &cfg, &SimConfig { dt: 0.005, t_final: 2.0 }).unwrap();
        let build = |t: f64| {
            Ok(Frame { t, grid: grid.clone(), sf: sf.clone(), gf: gf.clone() })
        };
        let dcfg = DynamicConfig { dt_frame: 0.1, dt_sim: 0.005, t_final: 2.0 };
        let dy = run_dynamic(build, y0, &nominal, &cfg, &dcfg).unwrap();
        assert_eq!(st.samples.len(), dy.trajectory.samples.len());
        for (a, b) in st.samples.iter().zip(&dy.trajectory.samples) {
            assert_eq!(a.y, b.y);
            assert_eq!(a.u, b.u);
            assert_eq!(a.a, b.a);
        }
    }
}
