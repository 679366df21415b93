//! Occupancy lattices.
//!
//! Cells are addressed by `(i, j)` with `i` along world x and `j` along world
//! y. Storage is row-major in `j`, so the flat index is `j * nx + i`. Cell
//! `(0, 0)` is centered at `origin`.

use crate::error::{Error, Result};
use crate::Vec2;

/// 4-neighborhood offsets in the fixed order east, north, west, south.
pub const NEIGHBORS4: [(isize, isize); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

/// 8-neighborhood offsets.
pub const NEIGHBORS8: [(isize, isize); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

/// Geometry of a rectangular lattice of square cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub nx: usize,
    pub ny: usize,
    pub d: f64,
    pub origin: Vec2,
}

/// Location of a world point inside the bilinear stencil of four cell centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub i: usize,
    pub j: usize,
    pub tx: f64,
    pub ty: f64,
}

impl Stencil {
    /// Flat indices of the four corners: (i,j), (i+1,j), (i,j+1), (i+1,j+1).
    pub fn corners(&self, lattice: &Lattice) -> [usize; 4] {
        let base = lattice.index(self.i, self.j);
        [base, base + 1, base + lattice.nx, base + lattice.nx + 1]
    }

    pub fn weights(&self) -> [f64; 4] {
        let (tx, ty) = (self.tx, self.ty);
        [
            (1.0 - tx) * (1.0 - ty),
            tx * (1.0 - ty),
            (1.0 - tx) * ty,
            tx * ty,
        ]
    }
}

impl Lattice {
    pub fn new(nx: usize, ny: usize, d: f64, origin: Vec2) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::MalformedDocument(format!(
                "lattice must be at least 3x3, got {nx}x{ny}"
            )));
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::MalformedDocument(format!(
                "cell size must be positive, got {d}"
            )));
        }
        if !(origin.x.is_finite() && origin.y.is_finite()) {
            return Err(Error::MalformedDocument("origin must be finite".into()));
        }
        Ok(Self { nx, ny, d, origin })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(
            self.origin.x + i as f64 * self.d,
            self.origin.y + j as f64 * self.d,
        )
    }

    #[inline]
    pub fn center_of(&self, idx: usize) -> Vec2 {
        let (i, j) = self.coords(idx);
        self.center(i, j)
    }

    /// Neighbor of `(i, j)` at offset `(di, dj)`, if it lies on the lattice.
    #[inline]
    pub fn offset(&self, i: usize, j: usize, di: isize, dj: isize) -> Option<(usize, usize)> {
        let ni = i.checked_add_signed(di)?;
        let nj = j.checked_add_signed(dj)?;
        (ni < self.nx && nj < self.ny).then_some((ni, nj))
    }

    #[inline]
    pub fn on_perimeter(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.nx || j + 1 == self.ny
    }

    /// Cell whose square contains `y`, if any.
    pub fn cell_of(&self, y: Vec2) -> Option<(usize, usize)> {
        let fx = ((y.x - self.origin.x) / self.d + 0.5).floor();
        let fy = ((y.y - self.origin.y) / self.d + 0.5).floor();
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (i, j) = (fx as usize, fy as usize);
        (i < self.nx && j < self.ny).then_some((i, j))
    }

    /// Bilinear stencil for `y`, or `None` outside the hull of cell centers.
    pub fn stencil(&self, y: Vec2) -> Option<Stencil> {
        let fx = (y.x - self.origin.x) / self.d;
        let fy = (y.y - self.origin.y) / self.d;
        let max_x = (self.nx - 1) as f64;
        let max_y = (self.ny - 1) as f64;
        if !(fx >= 0.0 && fy >= 0.0 && fx <= max_x && fy <= max_y) {
            return None;
        }
        let mut i = fx.floor() as usize;
        let mut j = fy.floor() as usize;
        if i >= self.nx - 1 {
            i = self.nx - 2;
        }
        if j >= self.ny - 1 {
            j = self.ny - 2;
        }
        Some(Stencil {
            i,
            j,
            tx: fx - i as f64,
            ty: fy - j as f64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellState {
    Free,
    Occupied,
}

/// A validated occupancy map with optional annotation channels.
///
/// The free region is a single 4-connected component and every perimeter
/// cell is occupied. `clearance`, when present, is a signed distance to the
/// nearest obstacle surface (positive in free space) used to place the
/// Dirichlet interface between cell centers.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    lattice: Lattice,
    state: Vec<CellState>,
    prob: Option<Vec<f64>>,
    label: Option<Vec<u16>>,
    vel: Option<Vec<Vec2>>,
    clearance: Option<Vec<f64>>,
}

impl OccupancyGrid {
    pub fn new(lattice: Lattice, state: Vec<CellState>) -> Result<Self> {
        if state.len() != lattice.len() {
            return Err(Error::MalformedDocument(format!(
                "expected {} cells, got {}",
                lattice.len(),
                state.len()
            )));
        }
        let grid = Self {
            lattice,
            state,
            prob: None,
            label: None,
            vel: None,
            clearance: None,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Parses an ASCII map: `#` occupied, `.` free, first row is the top
    /// (largest `j`).
    pub fn from_ascii(rows: &[&str], d: f64, origin: Vec2) -> Result<Self> {
        let ny = rows.len();
        let nx = rows.first().map_or(0, |r| r.chars().count());
        let lattice = Lattice::new(nx, ny, d, origin)?;
        let mut state = vec![CellState::Free; lattice.len()];
        for (row, text) in rows.iter().enumerate() {
            if text.chars().count() != nx {
                return Err(Error::MalformedDocument(format!(
                    "row {row} has {} columns, expected {nx}",
                    text.chars().count()
                )));
            }
            let j = ny - 1 - row;
            for (i, c) in text.chars().enumerate() {
                state[lattice.index(i, j)] = match c {
                    '#' => CellState::Occupied,
                    '.' => CellState::Free,
                    other => {
                        return Err(Error::MalformedDocument(format!(
                            "unexpected map character {other:?}"
                        )))
                    }
                };
            }
        }
        Self::new(lattice, state)
    }

    fn validate(&self) -> Result<()> {
        let l = &self.lattice;
        for j in 0..l.ny {
            for i in 0..l.nx {
                if l.on_perimeter(i, j) && self.is_free(i, j) {
                    return Err(Error::OpenWorkspace { i, j });
                }
            }
        }
        let components = self.free_component_count();
        if components != 1 {
            return Err(Error::DisconnectedFreeSpace { components });
        }
        Ok(())
    }

    fn free_component_count(&self) -> usize {
        let l = &self.lattice;
        let mut seen = vec![false; l.len()];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..l.len() {
            if seen[start] || self.state[start] != CellState::Free {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(idx) = stack.pop() {
                let (i, j) = l.coords(idx);
                for &(di, dj) in &NEIGHBORS4 {
                    if let Some((ni, nj)) = l.offset(i, j, di, dj) {
                        let n = l.index(ni, nj);
                        if !seen[n] && self.state[n] == CellState::Free {
                            seen[n] = true;
                            stack.push(n);
                        }
                    }
                }
            }
        }
        count
    }

    pub fn with_probability(mut self, prob: Vec<f64>) -> Result<Self> {
        self.check_len(prob.len(), "probability")?;
        if let Some(p) = prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::MalformedDocument(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        self.prob = Some(prob);
        Ok(self)
    }

    pub fn with_labels(mut self, label: Vec<u16>) -> Result<Self> {
        self.check_len(label.len(), "label")?;
        self.label = Some(label);
        Ok(self)
    }

    pub fn with_velocity(mut self, vel: Vec<Vec2>) -> Result<Self> {
        self.check_len(vel.len(), "velocity")?;
        if vel.iter().any(|v| !(v.x.is_finite() && v.y.is_finite())) {
            return Err(Error::MalformedDocument("non-finite velocity".into()));
        }
        self.vel = Some(vel);
        Ok(self)
    }

    /// Attaches a signed clearance channel. Its sign must agree with the
    /// cell states: positive on free cells, non-positive on occupied ones.
    pub fn with_clearance(mut self, clearance: Vec<f64>) -> Result<Self> {
        self.check_len(clearance.len(), "clearance")?;
        for (idx, (&c, &s)) in clearance.iter().zip(&self.state).enumerate() {
            let consistent = match s {
                CellState::Free => c > 0.0,
                CellState::Occupied => c <= 0.0,
            };
            if !consistent || c.is_nan() {
                let (i, j) = self.lattice.coords(idx);
                return Err(Error::MalformedDocument(format!(
                    "clearance {c} at ({i}, {j}) disagrees with cell state {s:?}"
                )));
            }
        }
        self.clearance = Some(clearance);
        Ok(self)
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.lattice.len() {
            return Err(Error::MalformedDocument(format!(
                "{what} channel has {len} cells, expected {}",
                self.lattice.len()
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    #[inline]
    pub fn d(&self) -> f64 {
        self.lattice.d
    }

    #[inline]
    pub fn state(&self, i: usize, j: usize) -> CellState {
        self.state[self.lattice.index(i, j)]
    }

    #[inline]
    pub fn is_free(&self, i: usize, j: usize) -> bool {
        self.state(i, j) == CellState::Free
    }

    #[inline]
    pub fn is_free_idx(&self, idx: usize) -> bool {
        self.state[idx] == CellState::Free
    }

    pub fn states(&self) -> &[CellState] {
        &self.state
    }

    pub fn free_count(&self) -> usize {
        self.state.iter().filter(|s| **s == CellState::Free).count()
    }

    pub fn free_mask(&self) -> Vec<bool> {
        self.state.iter().map(|s| *s == CellState::Free).collect()
    }

    pub fn probability(&self) -> Option<&[f64]> {
        self.prob.as_deref()
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.label.as_deref()
    }

    pub fn velocity(&self) -> Option<&[Vec2]> {
        self.vel.as_deref()
    }

    pub fn clearance(&self) -> Option<&[f64]> {
        self.clearance.as_deref()
    }

    /// Fraction of the way from free cell `free` to occupied neighbor `occ`
    /// at which the obstacle surface lies, in `(0, 1]`.
    pub fn interface_fraction(&self, free: usize, occ: usize) -> f64 {
        const MIN_FRACTION: f64 = 1e-3;
        match &self.clearance {
            Some(c) => {
                let (cf, co) = (c[free], c[occ]);
                (cf / (cf - co)).clamp(MIN_FRACTION, 1.0)
            }
            None => 1.0,
        }
    }

    /// Free cell with at least one occupied 4-neighbor.
    pub fn is_interface(&self, i: usize, j: usize) -> bool {
        self.is_free(i, j)
            && NEIGHBORS4.iter().any(|&(di, dj)| {
                self.lattice
                    .offset(i, j, di, dj)
                    .is_some_and(|(ni, nj)| !self.is_free(ni, nj))
            })
    }

    /// Labels the 8-connected components of the occupied set that touch free
    /// space. Returns the per-cell component id and the component count.
    pub fn obstacle_components(&self) -> (Vec<Option<usize>>, usize) {
        let l = &self.lattice;
        let mut comp = vec![None; l.len()];
        let mut seen = vec![false; l.len()];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..l.len() {
            if seen[start] || self.state[start] != CellState::Occupied {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let mut touches_free = false;
            let mut members = vec![start];
            while let Some(idx) = stack.pop() {
                let (i, j) = l.coords(idx);
                for &(di, dj) in &NEIGHBORS8 {
                    if let Some((ni, nj)) = l.offset(i, j, di, dj) {
                        let n = l.index(ni, nj);
                        match self.state[n] {
                            CellState::Occupied if !seen[n] => {
                                seen[n] = true;
                                members.push(n);
                                stack.push(n);
                            }
                            CellState::Free if di == 0 || dj == 0 => touches_free = true,
                            _ => {}
                        }
                    }
                }
            }
            if touches_free {
                for m in members {
                    comp[m] = Some(count);
                }
                count += 1;
            }
        }
        (comp, count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room(n: usize) -> Vec<String> {
        (0..n)
            .map(|r| {
                (0..n)
                    .map(|c| {
                        if r == 0 || c == 0 || r == n - 1 || c == n - 1 {
                            '#'
                        } else {
                            '.'
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn ascii(rows: &[String]) -> Result<OccupancyGrid> {
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        OccupancyGrid::from_ascii(&refs, 1.0, Vec2::zeros())
    }

    #[test]
    fn smallest_enclosed_domain() {
        let g = ascii(&room(5)).unwrap();
        assert_eq!(g.free_count(), 9);
    }

    #[test]
    fn rejects_split_free_space() {
        let rows = ["#######", "#..#..#", "#..#..#", "#######"];
        let err = OccupancyGrid::from_ascii(&rows, 1.0, Vec2::zeros()).unwrap_err();
        assert!(matches!(err, Error::DisconnectedFreeSpace { components: 2 }));
    }

    #[test]
    fn rejects_open_perimeter() {
        let rows = ["#####", "#...#", "#....", "#####"];
        let err = OccupancyGrid::from_ascii(&rows, 1.0, Vec2::zeros()).unwrap_err();
        assert!(matches!(err, Error::OpenWorkspace { i: 4, j: 1 }));
    }

    #[test]
    fn rejects_tiny_lattice() {
        let rows = ["##", "##"];
        assert!(matches!(
            OccupancyGrid::from_ascii(&rows, 1.0, Vec2::zeros()),
            Err(Error::MalformedDocument(_))
        ));
    }

    #[test]
    fn probability_range_checked() {
        let g = ascii(&room(5)).unwrap();
        let mut p = vec![0.5; 25];
        p[3] = 1.5;
        assert!(g.with_probability(p).is_err());
    }

    #[test]
    fn obstacle_components_of_room_with_pillar() {
        let mut rows = room(9);
        rows[4].replace_range(4..5, "#");
        let g = ascii(&rows).unwrap();
        let (comp, count) = g.obstacle_components();
        assert_eq!(count, 2);
        let pillar = comp[g.lattice().index(4, 4)].unwrap();
        let wall = comp[0].unwrap();
        assert_ne!(pillar, wall);
    }

    #[test]
    fn stencil_and_cell_lookup() {
        let l = Lattice::new(4, 4, 0.5, Vec2::new(1.0, 2.0)).unwrap();
        let s = l.stencil(Vec2::new(1.25, 2.0)).unwrap();
        assert_eq!((s.i, s.j), (0, 0));
        assert!((s.tx - 0.5).abs() < 1e-15 && s.ty == 0.0);
        // last center clamps into the final stencil
        let s = l.stencil(l.center(3, 3)).unwrap();
        assert_eq!((s.i, s.j, s.tx, s.ty), (2, 2, 1.0, 1.0));
        assert!(l.stencil(Vec2::new(0.9, 2.0)).is_none());
        assert_eq!(l.cell_of(Vec2::new(1.74, 2.26)), Some((1, 1)));
        assert_eq!(l.cell_of(Vec2::new(0.5, 2.0)), None);
    }
}
