//! Zero level sets of cell-centered scalars by marching squares.

use std::collections::HashMap;

use crate::grid::Lattice;
use crate::Vec2;

// Corner bits: 0 = (i,j), 1 = (i+1,j), 2 = (i+1,j+1), 3 = (i,j+1).
// Edges: 0 bottom, 1 right, 2 top, 3 left.
const SEGMENTS: [&[(u8, u8)]; 16] = [
    &[],
    &[(3, 0)],
    &[(0, 1)],
    &[(3, 1)],
    &[(1, 2)],
    &[], // saddle
    &[(0, 2)],
    &[(3, 2)],
    &[(2, 3)],
    &[(0, 2)],
    &[], // saddle
    &[(1, 2)],
    &[(1, 3)],
    &[(0, 1)],
    &[(3, 0)],
    &[],
];

/// Polylines along `values = 0`, where a cell counts as inside when its
/// value is `<= 0`. Only squares whose four corners are `valid` contribute.
/// Saddles are resolved with the mean of the four corners. Closed loops
/// repeat their first point at the end.
pub fn zero_contours(lattice: &Lattice, values: &[f64], valid: &[bool]) -> Vec<Vec<Vec2>> {
    let (nx, ny) = (lattice.nx, lattice.ny);
    let mut points: Vec<[Vec2; 2]> = Vec::new();
    let mut keys: Vec<[usize; 2]> = Vec::new();

    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let c = [
                lattice.index(i, j),
                lattice.index(i + 1, j),
                lattice.index(i + 1, j + 1),
                lattice.index(i, j + 1),
            ];
            if !c.iter().all(|&k| valid[k]) {
                continue;
            }
            let v = c.map(|k| values[k]);
            let case = (0..4).fold(0usize, |acc, b| acc | (usize::from(v[b] <= 0.0) << b));
            let segs: &[(u8, u8)] = match case {
                5 | 10 => {
                    let center_inside = v.iter().sum::<f64>() / 4.0 <= 0.0;
                    match (case, center_inside) {
                        (5, true) | (10, false) => &[(0, 1), (2, 3)],
                        _ => &[(3, 0), (1, 2)],
                    }
                }
                _ => SEGMENTS[case],
            };
            for &(ea, eb) in segs {
                let p = |e: u8| {
                    let (a, b) = match e {
                        0 => (0, 1),
                        1 => (1, 2),
                        2 => (3, 2),
                        _ => (0, 3),
                    };
                    let t = v[a] / (v[a] - v[b]);
                    let pa = lattice.center_of(c[a]);
                    let pb = lattice.center_of(c[b]);
                    let key = match e {
                        0 => 2 * c[0],
                        1 => 2 * c[1] + 1,
                        2 => 2 * c[3],
                        _ => 2 * c[0] + 1,
                    };
                    (pa + t * (pb - pa), key)
                };
                let (pa, ka) = p(ea);
                let (pb, kb) = p(eb);
                points.push([pa, pb]);
                keys.push([ka, kb]);
            }
        }
    }

    let mut by_edge: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
    for (s, k) in keys.iter().enumerate() {
        by_edge.entry(k[0]).or_default().push((s, 0));
        by_edge.entry(k[1]).or_default().push((s, 1));
    }
    let mut used = vec![false; points.len()];
    let mut lines = Vec::new();
    for start in 0..points.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let mut line = vec![points[start][0], points[start][1]];
        // forward from end 1, then backward from end 0
        for (end, forward) in [(1usize, true), (0usize, false)] {
            let mut key = keys[start][end];
            while let Some(&(s, e)) = by_edge[&key].iter().find(|(s, _)| !used[*s]) {
                used[s] = true;
                let other = 1 - e;
                if forward {
                    line.push(points[s][other]);
                } else {
                    line.insert(0, points[s][other]);
                }
                key = keys[s][other];
            }
        }
        lines.push(line);
    }
    lines
}
