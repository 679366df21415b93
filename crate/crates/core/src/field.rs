//! Lattice-sampled scalar and vector fields with bilinear evaluation.
//!
//! A field stores one value per cell. Free cells (the mask) always carry a
//! value; occupied cells next to free space may carry a ghost value so that
//! interpolation stays continuous up to the obstacle surface. Cells without a
//! value hold NaN and make any stencil touching them out of domain.

use crate::error::{Error, Result};
use crate::grid::{Lattice, OccupancyGrid, Stencil, NEIGHBORS8};
use crate::Vec2;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    lattice: Lattice,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl ScalarField {
    /// Builds a field from raw values. Masked cells must be finite.
    pub fn new(lattice: Lattice, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != lattice.len() || mask.len() != lattice.len() {
            return Err(Error::GridMismatch);
        }
        if let Some(idx) = (0..values.len()).find(|&k| mask[k] && !values[k].is_finite()) {
            let (i, j) = lattice.coords(idx);
            return Err(Error::MalformedDocument(format!(
                "field value at masked cell ({i}, {j}) is not finite"
            )));
        }
        Ok(Self {
            lattice,
            values,
            mask,
        })
    }

    /// Samples `f` at every cell center; every cell is in the mask.
    pub fn from_fn(lattice: Lattice, f: impl Fn(Vec2) -> f64) -> Result<Self> {
        let values = (0..lattice.len()).map(|k| f(lattice.center_of(k))).collect();
        Self::new(lattice, values, vec![true; lattice.len()])
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.lattice.index(i, j)]
    }

    #[inline]
    pub fn is_valued(&self, idx: usize) -> bool {
        self.values[idx].is_finite()
    }

    pub fn same_geometry(&self, other: &ScalarField) -> bool {
        self.lattice == other.lattice && self.mask == other.mask
    }

    /// Minimum and maximum over the mask.
    pub fn masked_range(&self) -> (f64, f64) {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, m)| **m)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (v, _)| {
                (lo.min(*v), hi.max(*v))
            })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        let values = self
            .values
            .iter()
            .map(|&v| if v.is_finite() { f(v) } else { f64::NAN })
            .collect();
        Self {
            lattice: self.lattice,
            values,
            mask: self.mask.clone(),
        }
    }

    /// Bilinear interpolation at `y`. Unvalued corners are dropped and the
    /// remaining weights renormalized; `y` is out of the domain when its
    /// nearest cell carries no value.
    pub fn sample(&self, y: Vec2) -> Result<f64> {
        let s = self
            .lattice
            .stencil(y)
            .ok_or_else(|| Error::out_of_domain(y))?;
        let (corners, w) = self.valued_weights(&s, y)?;
        Ok(corners
            .iter()
            .zip(w)
            .filter(|(_, w)| *w != 0.0)
            .map(|(&c, w)| w * self.values[c])
            .sum())
    }

    /// Stencil weights renormalized over the valued corners. The point must
    /// be closest to a valued corner.
    fn valued_weights(&self, s: &Stencil, y: Vec2) -> Result<([usize; 4], [f64; 4])> {
        let corners = s.corners(&self.lattice);
        let mut w = s.weights();
        let nearest = (0..4).max_by(|&a, &b| w[a].total_cmp(&w[b])).expect("four corners");
        if !self.values[corners[nearest]].is_finite() {
            return Err(Error::out_of_domain(y));
        }
        if corners.iter().all(|&c| self.values[c].is_finite()) {
            return Ok((corners, w));
        }
        for (k, &c) in corners.iter().enumerate() {
            if !self.values[c].is_finite() {
                w[k] = 0.0;
            }
        }
        let total: f64 = w.iter().sum();
        Ok((corners, w.map(|x| x / total)))
    }

    /// Finite-difference gradient at a valued cell: central where both axis
    /// neighbors carry values, one-sided where only one does, zero otherwise.
    pub fn gradient_at(&self, i: usize, j: usize) -> Vec2 {
        let l = &self.lattice;
        let center = self.at(i, j);
        let axis = |di: isize, dj: isize| -> f64 {
            let fwd = l
                .offset(i, j, di, dj)
                .map(|(a, b)| self.at(a, b))
                .filter(|v| v.is_finite());
            let bwd = l
                .offset(i, j, -di, -dj)
                .map(|(a, b)| self.at(a, b))
                .filter(|v| v.is_finite());
            match (fwd, bwd) {
                (Some(f), Some(b)) => (f - b) / (2.0 * l.d),
                (Some(f), None) => (f - center) / l.d,
                (None, Some(b)) => (center - b) / l.d,
                (None, None) => 0.0,
            }
        };
        Vec2::new(axis(1, 0), axis(0, 1))
    }

    /// Bilinear interpolation of the lattice gradient at `y`.
    pub fn sample_gradient(&self, y: Vec2) -> Result<Vec2> {
        let s = self
            .lattice
            .stencil(y)
            .ok_or_else(|| Error::out_of_domain(y))?;
        let (corners, w) = self.valued_weights(&s, y)?;
        let mut acc = Vec2::zeros();
        for (&c, w) in corners.iter().zip(w) {
            if w != 0.0 {
                let (i, j) = self.lattice.coords(c);
                acc += w * self.gradient_at(i, j);
            }
        }
        Ok(acc)
    }

    /// Gradient components as a vector field over the valued cells.
    pub fn gradient_field(&self) -> VectorField {
        let n = self.lattice.len();
        let mut gx = vec![f64::NAN; n];
        let mut gy = vec![f64::NAN; n];
        for k in 0..n {
            if self.values[k].is_finite() {
                let (i, j) = self.lattice.coords(k);
                let g = self.gradient_at(i, j);
                gx[k] = g.x;
                gy[k] = g.y;
            }
        }
        VectorField {
            x: ScalarField {
                lattice: self.lattice,
                values: gx,
                mask: self.mask.clone(),
            },
            y: ScalarField {
                lattice: self.lattice,
                values: gy,
                mask: self.mask.clone(),
            },
        }
    }

    /// CSV matrix, one row per `j`, `nan` where no value is stored.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 20);
        for j in 0..self.lattice.ny {
            for i in 0..self.lattice.nx {
                if i > 0 {
                    out.push(',');
                }
                let v = self.at(i, j);
                if v.is_finite() {
                    out.push_str(&format!("{v:?}"));
                } else {
                    out.push_str("nan");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Reads a matrix written by [`ScalarField::to_csv`]; the mask is the
    /// free set of `grid`.
    pub fn from_csv(grid: &OccupancyGrid, text: &str) -> Result<Self> {
        let lattice = *grid.lattice();
        let mut values = Vec::with_capacity(lattice.len());
        let mut rows = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let before = values.len();
            for tok in line.split(',') {
                let tok = tok.trim();
                let v = if tok.eq_ignore_ascii_case("nan") {
                    f64::NAN
                } else {
                    tok.parse::<f64>().map_err(|e| {
                        Error::MalformedDocument(format!("bad field value {tok:?}: {e}"))
                    })?
                };
                values.push(v);
            }
            if values.len() - before != lattice.nx {
                return Err(Error::GridMismatch);
            }
            rows += 1;
        }
        if rows != lattice.ny {
            return Err(Error::GridMismatch);
        }
        Self::new(lattice, values, grid.free_mask())
    }
}

/// Occupied cells that share a stencil with some free cell (8-neighborhood).
pub fn halo_cells(grid: &OccupancyGrid) -> Vec<usize> {
    let l = grid.lattice();
    (0..l.len())
        .filter(|&k| {
            if grid.is_free_idx(k) {
                return false;
            }
            let (i, j) = l.coords(k);
            NEIGHBORS8.iter().any(|&(di, dj)| {
                l.offset(i, j, di, dj)
                    .is_some_and(|(a, b)| grid.is_free(a, b))
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub x: ScalarField,
    pub y: ScalarField,
}

impl VectorField {
    pub fn new(x: ScalarField, y: ScalarField) -> Result<Self> {
        if !x.same_geometry(&y) {
            return Err(Error::GridMismatch);
        }
        Ok(Self { x, y })
    }

    pub fn lattice(&self) -> &Lattice {
        self.x.lattice()
    }

    pub fn at(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(self.x.at(i, j), self.y.at(i, j))
    }

    pub fn sample(&self, y: Vec2) -> Result<Vec2> {
        Ok(Vec2::new(self.x.sample(y)?, self.y.sample(y)?))
    }

    pub fn scaled(&self, c: f64) -> VectorField {
        VectorField {
            x: self.x.map(|v| c * v),
            y: self.y.map(|v| c * v),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lattice() -> Lattice {
        Lattice::new(12, 10, 0.25, Vec2::new(-1.0, 0.5)).unwrap()
    }

    #[test]
    fn sample_at_center_is_stored_value() {
        let f = ScalarField::from_fn(lattice(), |p| p.x * p.x + p.y).unwrap();
        let c = f.lattice().center(4, 7);
        assert_eq!(f.sample(c).unwrap(), f.at(4, 7));
    }

    #[test]
    fn midpoint_is_average() {
        let l = lattice();
        let mut vals = vec![0.0; l.len()];
        vals[l.index(3, 3)] = 0.0;
        vals[l.index(4, 3)] = 1.0;
        let f = ScalarField::new(l, vals, vec![true; l.len()]).unwrap();
        let mid = (l.center(3, 3) + l.center(4, 3)) / 2.0;
        assert!((f.sample(mid).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_field_has_zero_gradient() {
        let f = ScalarField::from_fn(lattice(), |_| 2.5).unwrap();
        let g = f.sample_gradient(Vec2::new(0.1, 1.3)).unwrap();
        assert_eq!(g, Vec2::zeros());
    }

    #[test]
    fn out_of_lattice_is_rejected() {
        let f = ScalarField::from_fn(lattice(), |_| 1.0).unwrap();
        assert!(matches!(
            f.sample(Vec2::new(-2.0, 1.0)),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn nan_corner_is_out_of_domain() {
        let l = lattice();
        let mut vals = vec![1.0; l.len()];
        vals[l.index(5, 5)] = f64::NAN;
        let mut mask = vec![true; l.len()];
        mask[l.index(5, 5)] = false;
        let f = ScalarField::new(l, vals, mask).unwrap();
        let y = l.center(5, 5) + Vec2::new(0.1, 0.1);
        assert!(f.sample(y).is_err());
        assert!(f.sample(l.center(2, 2)).is_ok());
    }

    #[test]
    fn nan_corner_is_dropped_near_valued_cells() {
        let l = lattice();
        let mut vals: Vec<f64> = (0..l.len()).map(|k| l.coords(k).0 as f64).collect();
        vals[l.index(5, 5)] = f64::NAN;
        let mut mask = vec![true; l.len()];
        mask[l.index(5, 5)] = false;
        let f = ScalarField::new(l, vals, mask).unwrap();
        // weights 0.36, 0.24, 0.24, 0.16 with the NaN corner at 0.16
        let y = l.center(4, 4) + Vec2::new(0.1, 0.1);
        let expected = (0.36 * 4.0 + 0.24 * 5.0 + 0.24 * 4.0) / 0.84;
        assert!((f.sample(y).unwrap() - expected).abs() < 1e-12);
        assert!(f.sample_gradient(y).is_ok());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let l = lattice();
        let mut f = ScalarField::from_fn(l, |p| (p.x * 3.7).sin() / 7.0 + p.y.exp()).unwrap();
        f.values[5] = f64::NAN;
        f.mask[5] = false;
        let text = f.to_csv();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), l.ny);
        for (a, b) in text
            .lines()
            .flat_map(|r| r.split(','))
            .zip(f.values.iter())
        {
            let parsed: f64 = if a == "nan" { f64::NAN } else { a.parse().unwrap() };
            assert!(parsed.to_bits() == b.to_bits() || (parsed.is_nan() && b.is_nan()));
        }
    }

    proptest! {
        #[test]
        fn affine_fields_are_reproduced(a in -5.0..5.0f64, b in -5.0..5.0f64, c in -5.0..5.0f64,
                                        u in 0.0..1.0f64, v in 0.0..1.0f64) {
            let l = lattice();
            let f = ScalarField::from_fn(l, |p| a * p.x + b * p.y + c).unwrap();
            // interior point, away from the one-sided lattice edges
            let y = Vec2::new(l.origin.x + (2.0 + 6.0 * u) * l.d, l.origin.y + (2.0 + 5.0 * v) * l.d);
            let exact = a * y.x + b * y.y + c;
            prop_assert!((f.sample(y).unwrap() - exact).abs() < 1e-12);
            let g = f.sample_gradient(y).unwrap();
            prop_assert!((g.x - a).abs() < 1e-12 && (g.y - b).abs() < 1e-12);
        }

        #[test]
        fn interpolation_stays_within_stencil_bounds(seed in 0u64..1000, u in 0.0..1.0f64, v in 0.0..1.0f64) {
            let l = lattice();
            let f = ScalarField::from_fn(l, |p| ((p.x * 13.1 + p.y * 7.7 + seed as f64).sin() * 43758.5).fract()).unwrap();
            let y = Vec2::new(l.origin.x + u * (l.nx - 1) as f64 * l.d, l.origin.y + v * (l.ny - 1) as f64 * l.d);
            let s = l.stencil(y).unwrap();
            let vals: Vec<f64> = s.corners(&l).iter().map(|&k| f.values()[k]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let got = f.sample(y).unwrap();
            prop_assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
        }
    }
}
