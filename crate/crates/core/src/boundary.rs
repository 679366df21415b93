//! Discretized obstacle surfaces: boundary nodes, outward normals and the
//! per-node flux magnitudes that drive the guidance field.

use crate::error::{Error, Result};
use crate::grid::{Lattice, OccupancyGrid, NEIGHBORS4, NEIGHBORS8};
use crate::Vec2;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryNode {
    pub i: usize,
    pub j: usize,
    pub position: Vec2,
    /// Unit normal pointing from free space into the obstacle.
    pub normal: Vec2,
    /// Surface length represented by the node, `d` per occupied face.
    pub arc_weight: f64,
    /// Obstacle component the node is attributed to.
    pub component: usize,
    /// Occupied 4-neighbors as a bitmask in [`NEIGHBORS4`] order.
    pub faces: u8,
}

impl BoundaryNode {
    pub fn occupied_faces(&self) -> impl Iterator<Item = (isize, isize)> + '_ {
        NEIGHBORS4
            .iter()
            .enumerate()
            .filter(move |(k, _)| self.faces & (1 << k) != 0)
            .map(|(_, &o)| o)
    }
}

/// Boundary nodes with flux magnitudes `beta > 0`; the signed flux imposed
/// on the guidance field is `-beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySet {
    lattice: Lattice,
    nodes: Vec<BoundaryNode>,
    flux: Vec<f64>,
    components: usize,
    chains: Option<Vec<Vec<usize>>>,
    cell_to_node: Vec<Option<usize>>,
}

impl BoundarySet {
    /// Assembles a set from explicit nodes. Flux defaults to 1 and no chain
    /// ordering is attached.
    pub fn new(lattice: Lattice, nodes: Vec<BoundaryNode>, components: usize) -> Result<Self> {
        let mut cell_to_node = vec![None; lattice.len()];
        for (k, n) in nodes.iter().enumerate() {
            if n.i >= lattice.nx || n.j >= lattice.ny {
                return Err(Error::MalformedDocument(format!(
                    "boundary node ({}, {}) outside the lattice",
                    n.i, n.j
                )));
            }
            if (n.normal.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::DegenerateNormal {
                    x: n.position.x,
                    y: n.position.y,
                });
            }
            if n.component >= components {
                return Err(Error::MalformedDocument(format!(
                    "node component {} out of range",
                    n.component
                )));
            }
            cell_to_node[lattice.index(n.i, n.j)] = Some(k);
        }
        let flux = vec![1.0; nodes.len()];
        Ok(Self {
            lattice,
            nodes,
            flux,
            components,
            chains: None,
            cell_to_node,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn nodes(&self) -> &[BoundaryNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn component_count(&self) -> usize {
        self.components
    }

    pub fn flux(&self) -> &[f64] {
        &self.flux
    }

    pub fn node_at(&self, idx: usize) -> Option<usize> {
        self.cell_to_node[idx]
    }

    pub fn set_flux(&mut self, flux: Vec<f64>) -> Result<()> {
        if flux.len() != self.nodes.len() {
            return Err(Error::InvalidParameter(format!(
                "{} flux values for {} nodes",
                flux.len(),
                self.nodes.len()
            )));
        }
        if let Some(b) = flux.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "flux magnitude must be positive, got {b}"
            )));
        }
        self.flux = flux;
        Ok(())
    }

    pub fn with_flux(mut self, flux: Vec<f64>) -> Result<Self> {
        self.set_flux(flux)?;
        Ok(self)
    }

    /// Multiplies the flux of every node attributed to `component` by `c`.
    pub fn scale_component_flux(&mut self, component: usize, c: f64) -> Result<()> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!("flux scale {c}")));
        }
        for (n, b) in self.nodes.iter().zip(self.flux.iter_mut()) {
            if n.component == component {
                *b *= c;
            }
        }
        Ok(())
    }

    /// Closed node chains, one per obstacle component, ordered along the
    /// surface.
    pub fn chains(&self) -> Result<&[Vec<usize>]> {
        self.chains.as_deref().ok_or(Error::UnorderedBoundary)
    }

    pub fn component_nodes(&self, component: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(move |&k| self.nodes[k].component == component)
    }

    /// Dirichlet data `-beta * n` for the guidance field, per axis.
    pub fn guidance_values(&self) -> (Vec<f64>, Vec<f64>) {
        self.nodes
            .iter()
            .zip(&self.flux)
            .map(|(n, b)| (-b * n.normal.x, -b * n.normal.y))
            .unzip()
    }
}

/// Twice box-blurred occupancy indicator in integer units (scale 1/81).
/// Cells beyond the lattice count as occupied.
fn blurred_indicator(grid: &OccupancyGrid) -> Vec<i64> {
    let l = grid.lattice();
    let blur = |src: &dyn Fn(isize, isize) -> i64| -> Vec<i64> {
        let mut out = vec![0; l.len()];
        for j in 0..l.ny as isize {
            for i in 0..l.nx as isize {
                let mut s = 0;
                for dj in -1..=1 {
                    for di in -1..=1 {
                        s += src(i + di, j + dj);
                    }
                }
                out[l.index(i as usize, j as usize)] = s;
            }
        }
        out
    };
    let inside = |i: isize, j: isize| i >= 0 && j >= 0 && (i as usize) < l.nx && (j as usize) < l.ny;
    let once = blur(&|i, j| {
        if !inside(i, j) || !grid.is_free(i as usize, j as usize) {
            1
        } else {
            0
        }
    });
    blur(&|i, j| {
        if inside(i, j) {
            once[l.index(i as usize, j as usize)]
        } else {
            9
        }
    })
}

fn indicator_gradient(l: &Lattice, b: &[i64], i: usize, j: usize) -> Vec2 {
    let axis = |di: isize, dj: isize| -> f64 {
        let c = b[l.index(i, j)];
        match (l.offset(i, j, di, dj), l.offset(i, j, -di, -dj)) {
            (Some((a1, b1)), Some((a2, b2))) => (b[l.index(a1, b1)] - b[l.index(a2, b2)]) as f64 / 2.0,
            (Some((a1, b1)), None) => (b[l.index(a1, b1)] - c) as f64,
            (None, Some((a2, b2))) => (c - b[l.index(a2, b2)]) as f64,
            (None, None) => 0.0,
        }
    };
    Vec2::new(axis(1, 0), axis(0, 1)) / (81.0 * l.d)
}

/// Centered difference of a cell channel, one-sided on the lattice edge.
fn central_gradient(l: &Lattice, c: &[f64], i: usize, j: usize) -> Vec2 {
    let axis = |di: isize, dj: isize| match (l.offset(i, j, di, dj), l.offset(i, j, -di, -dj)) {
        (Some((a1, b1)), Some((a2, b2))) => (c[l.index(a1, b1)] - c[l.index(a2, b2)]) / (2.0 * l.d),
        (Some((a1, b1)), None) => (c[l.index(a1, b1)] - c[l.index(i, j)]) / l.d,
        (None, Some((a2, b2))) => (c[l.index(i, j)] - c[l.index(a2, b2)]) / l.d,
        (None, None) => 0.0,
    };
    Vec2::new(axis(1, 0), axis(0, 1))
}

/// Outward unit normals at the given interface positions.
///
/// The normal is the normalized gradient of the twice-blurred occupancy
/// indicator, bilinearly interpolated at the position. Grids carrying a
/// clearance channel use minus its gradient instead. Where that gradient
/// vanishes, the mean direction towards occupied 4-neighbors is used.
pub fn estimate_normals(grid: &OccupancyGrid, positions: &[Vec2]) -> Result<Vec<Vec2>> {
    let l = grid.lattice();
    let blurred = blurred_indicator(grid);
    positions
        .iter()
        .map(|&y| {
            let s = l.stencil(y).ok_or_else(|| Error::out_of_domain(y))?;
            let w = s.weights();
            let mut g = Vec2::zeros();
            for (k, &c) in s.corners(l).iter().enumerate() {
                if w[k] != 0.0 {
                    let (i, j) = l.coords(c);
                    g += w[k] * match grid.clearance() {
                        Some(phi) => -central_gradient(l, phi, i, j),
                        None => indicator_gradient(l, &blurred, i, j),
                    };
                }
            }
            let (i, j) = l.cell_of(y).ok_or_else(|| Error::out_of_domain(y))?;
            let mut fallback = Vec2::zeros();
            for &(di, dj) in &NEIGHBORS4 {
                if let Some((a, b)) = l.offset(i, j, di, dj) {
                    if !grid.is_free(a, b) {
                        fallback += Vec2::new(di as f64, dj as f64);
                    }
                }
            }
            // In gaps narrower than the blur support the indicator gradient
            // can point away from the adjacent obstacle.
            let fallback_ok = fallback.norm() >= 1e-12;
            if g.norm() >= 1e-8 && !(fallback_ok && g.dot(&fallback) <= 0.0) {
                return Ok(g.normalize());
            }
            if !fallback_ok {
                return Err(Error::DegenerateNormal { x: y.x, y: y.y });
            }
            Ok(fallback.normalize())
        })
        .collect()
}

/// One node per free cell with an occupied 4-neighbor, grouped by obstacle
/// component and chained along each component's surface.
pub fn extract_boundary(grid: &OccupancyGrid) -> Result<BoundarySet> {
    let l = *grid.lattice();
    let (component_of, components) = grid.obstacle_components();

    let mut cells = Vec::new();
    for j in 0..l.ny {
        for i in 0..l.nx {
            if !grid.is_free(i, j) {
                continue;
            }
            let mut faces = 0u8;
            for (k, &(di, dj)) in NEIGHBORS4.iter().enumerate() {
                if let Some((a, b)) = l.offset(i, j, di, dj) {
                    if !grid.is_free(a, b) {
                        faces |= 1 << k;
                    }
                }
            }
            if faces != 0 {
                cells.push((i, j, faces));
            }
        }
    }

    let positions: Vec<Vec2> = cells.iter().map(|&(i, j, _)| l.center(i, j)).collect();
    let normals = estimate_normals(grid, &positions)?;

    let nodes: Vec<BoundaryNode> = cells
        .iter()
        .zip(positions.iter().zip(&normals))
        .map(|(&(i, j, faces), (&position, &normal))| {
            // attribute the node to the occupied neighbor best aligned with n
            let mut best = (f64::NEG_INFINITY, 0);
            for (k, &(di, dj)) in NEIGHBORS4.iter().enumerate() {
                if faces & (1 << k) == 0 {
                    continue;
                }
                let (a, b) = l.offset(i, j, di, dj).expect("face on lattice");
                let score = normal.dot(&Vec2::new(di as f64, dj as f64));
                if score > best.0 {
                    best = (score, component_of[l.index(a, b)].expect("face touches free space"));
                }
            }
            BoundaryNode {
                i,
                j,
                position,
                normal,
                arc_weight: l.d * faces.count_ones() as f64,
                component: best.1,
                faces,
            }
        })
        .collect();

    let mut set = BoundarySet::new(l, nodes, components)?;
    let chains = (0..components).map(|c| order_chain(&set, c)).collect();
    set.chains = Some(chains);
    Ok(set)
}

/// Greedy surface walk: step to the nearest unvisited node of the same
/// component, preferring the smallest turn; jump to the nearest remaining
/// node at dead ends.
fn order_chain(set: &BoundarySet, component: usize) -> Vec<usize> {
    let l = set.lattice;
    let members: Vec<usize> = set.component_nodes(component).collect();
    let Some(&start) = members.first() else {
        return Vec::new();
    };
    let mut visited = vec![false; set.nodes.len()];
    let mut chain = Vec::with_capacity(members.len());
    let mut current = start;
    let mut heading: Option<Vec2> = None;
    visited[current] = true;
    chain.push(current);

    while chain.len() < members.len() {
        let node = &set.nodes[current];
        let mut best: Option<(f64, f64, usize)> = None;
        for &(di, dj) in &NEIGHBORS8 {
            let Some((a, b)) = l.offset(node.i, node.j, di, dj) else {
                continue;
            };
            let Some(k) = set.cell_to_node[l.index(a, b)] else {
                continue;
            };
            if visited[k] || set.nodes[k].component != component {
                continue;
            }
            let step = Vec2::new(di as f64, dj as f64);
            let dist = step.norm();
            let turn = heading.map_or(0.0, |h| 1.0 - h.dot(&step) / dist);
            let better = match best {
                None => true,
                Some((bd, bt, _)) => dist < bd - 1e-12 || (dist < bd + 1e-12 && turn < bt - 1e-12),
            };
            if better {
                best = Some((dist, turn, k));
            }
        }
        let next = match best {
            Some((_, _, k)) => k,
            None => *members
                .iter()
                .filter(|&&k| !visited[k])
                .min_by(|&&p, &&q| {
                    let dp = (set.nodes[p].position - node.position).norm_squared();
                    let dq = (set.nodes[q].position - node.position).norm_squared();
                    dp.total_cmp(&dq)
                })
                .expect("unvisited member remains"),
        };
        let step = set.nodes[next].position - node.position;
        heading = Some(step / step.norm());
        visited[next] = true;
        chain.push(next);
        current = next;
    }
    chain
}
