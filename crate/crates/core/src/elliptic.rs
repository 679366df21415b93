//! Dirichlet solvers on the free mask.
//!
//! Both problems use the 5-point Laplacian. For the Poisson safety function
//! the zero Dirichlet value sits on the obstacle surface: at the occupied
//! neighbor's center by default, or at the sub-cell crossing given by the
//! grid's clearance channel (symmetric ghost-fluid treatment). For the
//! guidance components the Dirichlet data is imposed directly on the
//! boundary nodes.

use std::sync::Arc;

use crate::boundary::BoundarySet;
use crate::error::{Error, Result};
use crate::field::{halo_cells, ScalarField, VectorField};
use crate::grid::{Lattice, OccupancyGrid, NEIGHBORS4, NEIGHBORS8};
use crate::Vec2;

/// Forcing term of the Poisson problem. Must be strictly negative on the
/// free set.
#[derive(Clone)]
pub enum Forcing {
    Constant(f64),
    Function(Arc<dyn Fn(Vec2) -> f64 + Send + Sync>),
}

impl Default for Forcing {
    /// `-4`, for which the unit-disk solution is `1 - r^2`.
    fn default() -> Self {
        Forcing::Constant(-4.0)
    }
}

impl std::fmt::Debug for Forcing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Forcing::Constant(c) => write!(f, "Constant({c})"),
            Forcing::Function(_) => write!(f, "Function(..)"),
        }
    }
}

impl Forcing {
    pub fn eval(&self, y: Vec2) -> f64 {
        match self {
            Forcing::Constant(c) => *c,
            Forcing::Function(f) => f(y),
        }
    }

    fn check(&self, grid: &OccupancyGrid) -> Result<()> {
        let l = grid.lattice();
        for k in 0..l.len() {
            if grid.is_free_idx(k) {
                let value = self.eval(l.center_of(k));
                if !(value < 0.0) {
                    let (i, j) = l.coords(k);
                    return Err(Error::NegativeForcingViolation { i, j, value });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMethod {
    /// Red-black successive over-relaxation.
    Sor,
    /// Lexicographic Gauss-Seidel.
    GaussSeidel,
    /// Banded Cholesky factorization; exact up to rounding.
    DenseDirect,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub omega: f64,
    /// Max-norm residual threshold in field units; the Laplacian residual
    /// is accepted once it is below `tol * 4 / d^2`.
    pub tol: f64,
    /// Defaults to `200 * max(nx, ny)`.
    pub max_iters: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Sor,
            omega: 1.9,
            tol: 1e-8,
            max_iters: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega < 2.0) {
            return Err(Error::InvalidParameter(format!(
                "relaxation factor must lie in (0, 2), got {}",
                self.omega
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tolerance must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub method: SolverMethod,
    pub unknowns: usize,
    pub iterations: usize,
    /// Final max-norm residual of the discrete Laplacian equation.
    pub residual: f64,
}

const NONE: u32 = u32::MAX;

/// `diag[p] * x[p] - sum(x[nbr]) = rhs[p]`, i.e. `-d^2` times the
/// discrete Laplacian equation.
struct System {
    cells: Vec<usize>,
    nbrs: Vec<[u32; 4]>,
    diag: Vec<f64>,
    rhs: Vec<f64>,
}

impl System {
    fn len(&self) -> usize {
        self.cells.len()
    }

    fn row_residual(&self, x: &[f64], p: usize) -> f64 {
        let mut r = self.rhs[p] - self.diag[p] * x[p];
        for &q in &self.nbrs[p] {
            if q != NONE {
                r += x[q as usize];
            }
        }
        r
    }

    fn max_residual(&self, x: &[f64]) -> f64 {
        (0..self.len())
            .map(|p| self.row_residual(x, p).abs())
            .fold(0.0, f64::max)
    }

    fn relax(&self, x: &mut [f64], p: usize, omega: f64) {
        let mut s = self.rhs[p];
        for &q in &self.nbrs[p] {
            if q != NONE {
                s += x[q as usize];
            }
        }
        x[p] += omega * (s / self.diag[p] - x[p]);
    }

    fn solve(&self, lattice: &Lattice, cfg: &SolverConfig, x0: f64) -> Result<(Vec<f64>, SolveStats)> {
        cfg.validate()?;
        let d2 = lattice.d * lattice.d;
        let mut x = vec![x0; self.len()];
        let stats = |iterations, residual| SolveStats {
            method: cfg.method,
            unknowns: self.len(),
            iterations,
            residual,
        };
        if self.len() == 0 {
            return Ok((x, stats(0, 0.0)));
        }
        // row residuals are d^2 times the Laplacian residual
        let threshold = 4.0 * cfg.tol;
        match cfg.method {
            SolverMethod::DenseDirect => {
                x = self.banded_cholesky()?;
                let r = self.max_residual(&x);
                Ok((x, stats(1, r / d2)))
            }
            SolverMethod::Sor | SolverMethod::GaussSeidel => {
                let max_iters = cfg
                    .max_iters
                    .unwrap_or(200 * lattice.nx.max(lattice.ny));
                let (omega, colors) = match cfg.method {
                    SolverMethod::Sor => {
                        let mut red = Vec::new();
                        let mut black = Vec::new();
                        for (p, &c) in self.cells.iter().enumerate() {
                            let (i, j) = lattice.coords(c);
                            if (i + j) % 2 == 0 {
                                red.push(p);
                            } else {
                                black.push(p);
                            }
                        }
                        (cfg.omega, vec![red, black])
                    }
                    _ => (1.0, vec![(0..self.len()).collect()]),
                };
                let mut r = self.max_residual(&x);
                let mut it = 0;
                while r > threshold {
                    if it == max_iters {
                        return Err(Error::NonConvergence {
                            iterations: it,
                            residual: r / d2,
                        });
                    }
                    for color in &colors {
                        for &p in color {
                            self.relax(&mut x, p, omega);
                        }
                    }
                    it += 1;
                    r = self.max_residual(&x);
                }
                Ok((x, stats(it, r / d2)))
            }
        }
    }

    /// Cholesky factorization in band storage. Unknowns are numbered in
    /// lattice order so the half-bandwidth is at most `nx`.
    fn banded_cholesky(&self) -> Result<Vec<f64>> {
        let n = self.len();
        let bw = self
            .nbrs
            .iter()
            .enumerate()
            .flat_map(|(p, ns)| ns.iter().filter(|&&q| q != NONE).map(move |&q| p.abs_diff(q as usize)))
            .max()
            .unwrap_or(0);
        let w = bw + 1;
        // band[p * w + k] holds A[p][p - k]
        let mut band = vec![0.0; n * w];
        for p in 0..n {
            band[p * w] = self.diag[p];
            for &q in &self.nbrs[p] {
                if q != NONE && (q as usize) < p {
                    band[p * w + (p - q as usize)] = -1.0;
                }
            }
        }
        for p in 0..n {
            let lo = p.saturating_sub(bw);
            for q in lo..=p {
                let mut s = band[p * w + (p - q)];
                let k_lo = lo.max(q.saturating_sub(bw));
                for k in k_lo..q {
                    s -= band[p * w + (p - k)] * band[q * w + (q - k)];
                }
                if q == p {
                    if !(s > 0.0) {
                        return Err(Error::NonConvergence {
                            iterations: 0,
                            residual: f64::NAN,
                        });
                    }
                    band[p * w] = s.sqrt();
                } else {
                    band[p * w + (p - q)] = s / band[q * w];
                }
            }
        }
        let mut y = self.rhs.clone();
        for p in 0..n {
            let lo = p.saturating_sub(bw);
            let mut s = y[p];
            for k in lo..p {
                s -= band[p * w + (p - k)] * y[k];
            }
            y[p] = s / band[p * w];
        }
        for p in (0..n).rev() {
            let hi = (p + bw).min(n - 1);
            let mut s = y[p];
            for k in p + 1..=hi {
                s -= band[k * w + (k - p)] * y[k];
            }
            y[p] = s / band[p * w];
        }
        Ok(y)
    }
}

fn number_unknowns(lattice: &Lattice, is_unknown: impl Fn(usize) -> bool) -> (Vec<usize>, Vec<u32>) {
    let mut cells = Vec::new();
    let mut index = vec![NONE; lattice.len()];
    for (k, slot) in index.iter_mut().enumerate() {
        if is_unknown(k) {
            *slot = cells.len() as u32;
            cells.push(k);
        }
    }
    (cells, index)
}

fn poisson_system(grid: &OccupancyGrid, forcing: &Forcing) -> System {
    let l = grid.lattice();
    let d2 = l.d * l.d;
    let (cells, index) = number_unknowns(l, |k| grid.is_free_idx(k));
    let mut nbrs = Vec::with_capacity(cells.len());
    let mut diag = Vec::with_capacity(cells.len());
    let mut rhs = Vec::with_capacity(cells.len());
    for &c in &cells {
        let (i, j) = l.coords(c);
        let mut row = [NONE; 4];
        let mut dg = 0.0;
        for (k, &(di, dj)) in NEIGHBORS4.iter().enumerate() {
            let (a, b) = l.offset(i, j, di, dj).expect("free cells are interior");
            let n = l.index(a, b);
            if grid.is_free_idx(n) {
                row[k] = index[n];
                dg += 1.0;
            } else {
                dg += 1.0 / grid.interface_fraction(c, n);
            }
        }
        nbrs.push(row);
        diag.push(dg);
        rhs.push(-forcing.eval(l.center_of(c)) * d2);
    }
    System {
        cells,
        nbrs,
        diag,
        rhs,
    }
}

/// Solves `Δh = f` on the free set with `h = 0` on the obstacle surface.
///
/// Occupied cells bordering free space receive the linearly extrapolated
/// ghost value, which is zero when no clearance channel is present.
pub fn solve_poisson(
    grid: &OccupancyGrid,
    forcing: &Forcing,
    cfg: &SolverConfig,
) -> Result<(ScalarField, SolveStats)> {
    forcing.check(grid)?;
    let l = *grid.lattice();
    let system = poisson_system(grid, forcing);
    let (x, stats) = system.solve(&l, cfg, 0.0)?;

    let mut values = vec![f64::NAN; l.len()];
    for (p, &c) in system.cells.iter().enumerate() {
        if !(x[p] > 0.0) {
            let (i, j) = l.coords(c);
            return Err(Error::PositivityViolation { i, j, value: x[p] });
        }
        values[c] = x[p];
    }
    for o in halo_cells(grid) {
        let (i, j) = l.coords(o);
        let mut acc = 0.0;
        let mut n = 0;
        for &(di, dj) in &NEIGHBORS4 {
            if let Some((a, b)) = l.offset(i, j, di, dj) {
                let p = l.index(a, b);
                if grid.is_free_idx(p) {
                    let theta = grid.interface_fraction(p, o);
                    acc += values[p] * (theta - 1.0) / theta;
                    n += 1;
                }
            }
        }
        values[o] = if n > 0 { acc / n as f64 } else { 0.0 };
    }
    Ok((ScalarField::new(l, values, grid.free_mask())?, stats))
}

/// Solves `Δu = 0` on the free cells that are not boundary nodes, with
/// `u = values[k]` imposed at boundary node `k`.
pub fn solve_laplace_component(
    grid: &OccupancyGrid,
    boundary: &BoundarySet,
    values: &[f64],
    cfg: &SolverConfig,
) -> Result<(ScalarField, SolveStats)> {
    let l = *grid.lattice();
    if values.len() != boundary.len() {
        return Err(Error::InvalidParameter(format!(
            "{} Dirichlet values for {} boundary nodes",
            values.len(),
            boundary.len()
        )));
    }
    if boundary.lattice() != grid.lattice() {
        return Err(Error::GridMismatch);
    }
    let (cells, index) =
        number_unknowns(&l, |k| grid.is_free_idx(k) && boundary.node_at(k).is_none());
    let mut nbrs = Vec::with_capacity(cells.len());
    let mut diag = Vec::with_capacity(cells.len());
    let mut rhs = Vec::with_capacity(cells.len());
    for &c in &cells {
        let (i, j) = l.coords(c);
        let mut row = [NONE; 4];
        let mut r = 0.0;
        for (k, &(di, dj)) in NEIGHBORS4.iter().enumerate() {
            let (a, b) = l.offset(i, j, di, dj).expect("free cells are interior");
            let n = l.index(a, b);
            match boundary.node_at(n) {
                Some(node) => r += values[node],
                None => row[k] = index[n],
            }
        }
        nbrs.push(row);
        diag.push(4.0);
        rhs.push(r);
    }
    let system = System {
        cells,
        nbrs,
        diag,
        rhs,
    };
    let mean = if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    let (x, stats) = system.solve(&l, cfg, mean)?;

    let mut field = vec![f64::NAN; l.len()];
    for (p, &c) in system.cells.iter().enumerate() {
        field[c] = x[p];
    }
    for (k, node) in boundary.nodes().iter().enumerate() {
        field[l.index(node.i, node.j)] = values[k];
    }
    for o in halo_cells(grid) {
        let (i, j) = l.coords(o);
        let avg = |offsets: &[(isize, isize)]| -> Option<f64> {
            let picked: Vec<f64> = offsets
                .iter()
                .filter_map(|&(di, dj)| l.offset(i, j, di, dj))
                .filter_map(|(a, b)| boundary.node_at(l.index(a, b)))
                .map(|k| values[k])
                .collect();
            (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
        };
        field[o] = avg(&NEIGHBORS4).or_else(|| avg(&NEIGHBORS8)).unwrap_or(f64::NAN);
    }
    Ok((ScalarField::new(l, field, grid.free_mask())?, stats))
}

/// Harmonic extension of `-beta * n` into the free set, one Laplace solve
/// per axis.
pub fn solve_guidance(
    grid: &OccupancyGrid,
    boundary: &BoundarySet,
    cfg: &SolverConfig,
) -> Result<(VectorField, [SolveStats; 2])> {
    let (bx, by) = boundary.guidance_values();
    let (rx, ry) = rayon::join(
        || solve_laplace_component(grid, boundary, &bx, cfg),
        || solve_laplace_component(grid, boundary, &by, cfg),
    );
    let (vx, sx) = rx?;
    let (vy, sy) = ry?;
    Ok((VectorField::new(vx, vy)?, [sx, sy]))
}

/// Relative mismatch between the integrated forcing and the outward flux
/// of `h` through the obstacle surface.
///
/// The flux is summed over every free/occupied face using the one-sided
/// normal derivative `(0 - h) / (theta d)` times the face length `d`.
pub fn check_divergence_identity(
    grid: &OccupancyGrid,
    h: &ScalarField,
    forcing: &Forcing,
    boundary: &BoundarySet,
) -> f64 {
    let l = grid.lattice();
    let d2 = l.d * l.d;
    let volume: f64 = (0..l.len())
        .filter(|&k| grid.is_free_idx(k))
        .map(|k| forcing.eval(l.center_of(k)) * d2)
        .sum();
    let mut flux = 0.0;
    for node in boundary.nodes() {
        let p = l.index(node.i, node.j);
        for (di, dj) in node.occupied_faces() {
            let (a, b) = l.offset(node.i, node.j, di, dj).expect("face on lattice");
            let theta = grid.interface_fraction(p, l.index(a, b));
            flux += -h.values()[p] / (theta * l.d) * l.d;
        }
    }
    ((volume - flux) / volume).abs()
}

/// Max-norm residual of `Δh - f` over the free set, using the same stencil
/// as [`solve_poisson`].
pub fn poisson_residual(grid: &OccupancyGrid, h: &ScalarField, forcing: &Forcing) -> f64 {
    let system = poisson_system(grid, forcing);
    let x: Vec<f64> = system.cells.iter().map(|&c| h.values()[c]).collect();
    system.max_residual(&x) / (grid.d() * grid.d())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::extract_boundary;
    use crate::grid::CellState;

    fn grid(rows: &[&str], d: f64) -> OccupancyGrid {
        OccupancyGrid::from_ascii(rows, d, Vec2::zeros()).unwrap()
    }

    fn tight() -> SolverConfig {
        SolverConfig {
            tol: 1e-13,
            ..Default::default()
        }
    }

    #[test]
    fn single_free_cell() {
        let g = grid(&["###", "#.#", "###"], 1.0);
        let (h, _) = solve_poisson(&g, &Forcing::default(), &tight()).unwrap();
        assert!((h.at(1, 1) - 1.0).abs() < 1e-12);
        // the lone cell has no well-defined normal, so assemble its node by hand
        let node = crate::boundary::BoundaryNode {
            i: 1,
            j: 1,
            position: Vec2::new(1.0, 1.0),
            normal: Vec2::new(1.0, 0.0),
            arc_weight: 4.0,
            component: 0,
            faces: 0b1111,
        };
        let b = BoundarySet::new(*g.lattice(), vec![node], 1).unwrap();
        let r = check_divergence_identity(&g, &h, &Forcing::default(), &b);
        assert!(r < 1e-12);
    }

    #[test]
    fn positive_forcing_is_rejected() {
        let g = grid(&["####", "#..#", "#..#", "####"], 1.0);
        let err = solve_poisson(&g, &Forcing::Constant(0.5), &tight()).unwrap_err();
        assert!(matches!(err, Error::NegativeForcingViolation { .. }));
    }

    #[test]
    fn iteration_cap_reports_nonconvergence() {
        let rows: Vec<String> = (0..30)
            .map(|r| if r == 0 || r == 29 { "#".repeat(30) } else { format!("#{}#", ".".repeat(28)) })
            .collect();
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        let g = grid(&refs, 0.1);
        let cfg = SolverConfig {
            max_iters: Some(3),
            ..Default::default()
        };
        assert!(matches!(
            solve_poisson(&g, &Forcing::default(), &cfg),
            Err(Error::NonConvergence { iterations: 3, .. })
        ));
    }

    #[test]
    fn bad_relaxation_factor() {
        let g = grid(&["###", "#.#", "###"], 1.0);
        let cfg = SolverConfig {
            omega: 2.0,
            ..Default::default()
        };
        assert!(matches!(
            solve_poisson(&g, &Forcing::default(), &cfg),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn constant_dirichlet_data_gives_constant_field() {
        let g = grid(
            &["########", "#......#", "#......#", "#..##..#", "#......#", "#......#", "########"],
            0.5,
        );
        let b = extract_boundary(&g).unwrap();
        let (u, _) = solve_laplace_component(&g, &b, &vec![2.5; b.len()], &tight()).unwrap();
        for k in 0..g.lattice().len() {
            if g.is_free_idx(k) {
                assert!((u.values()[k] - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn direct_and_iterative_agree() {
        let n = 20;
        let l = Lattice::new(n, n, 0.1, Vec2::zeros()).unwrap();
        let state = (0..l.len())
            .map(|k| {
                let (i, j) = l.coords(k);
                let c = Vec2::new(i as f64 - 9.5, j as f64 - 9.5);
                if l.on_perimeter(i, j) || c.norm() < 3.0 {
                    CellState::Occupied
                } else {
                    CellState::Free
                }
            })
            .collect();
        let g = OccupancyGrid::new(l, state).unwrap();
        let sor = SolverConfig { tol: 1e-12, ..Default::default() };
        let gs = SolverConfig { method: SolverMethod::GaussSeidel, tol: 1e-12, max_iters: Some(100_000), ..Default::default() };
        let direct = SolverConfig { method: SolverMethod::DenseDirect, ..Default::default() };
        let (a, _) = solve_poisson(&g, &Forcing::default(), &sor).unwrap();
        let (b, _) = solve_poisson(&g, &Forcing::default(), &gs).unwrap();
        let (c, sc) = solve_poisson(&g, &Forcing::default(), &direct).unwrap();
        assert!(sc.residual < 1e-9);
        for k in 0..l.len() {
            if g.is_free_idx(k) {
                assert!((a.values()[k] - c.values()[k]).abs() < 1e-10);
                assert!((b.values()[k] - c.values()[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn solves_are_bit_reproducible() {
        let g = grid(
            &["#########", "#.......#", "#...#...#", "#..###..#", "#.......#", "#########"],
            0.25,
        );
        let (a, _) = solve_poisson(&g, &Forcing::default(), &SolverConfig::default()).unwrap();
        let (b, _) = solve_poisson(&g, &Forcing::default(), &SolverConfig::default()).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
