//! Synthetic closed hand-sized template with the standard level counts.
//!
//! Each level is a Fibonacci-sphere point set triangulated by its convex
//! hull and stretched into an ellipsoid. Upsampling rows are the barycentric
//! coordinates of a fine vertex's radial projection onto the coarse hull.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::topology::{MeshLevel, MeshTopology, UpsampleMatrix, HAND_LEVELS};

/// Ellipsoid semi-axes in meters, roughly an open hand.
pub const HAND_EXTENT: [f64; 3] = [0.045, 0.09, 0.025];

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub topology: MeshTopology,
    /// Rest positions per level, meters.
    pub positions: Vec<Vec<[f64; 3]>>,
}

pub fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            [r * th.cos(), y, r * th.sin()]
        })
        .collect()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Outward-oriented convex hull triangles of points in convex position.
pub fn convex_hull(points: &[[f64; 3]]) -> Result<Vec<[u32; 3]>> {
    const EPS: f64 = 1e-12;
    let n = points.len();
    if n < 4 {
        return Err(Error::invalid("hull needs at least four points"));
    }
    // initial tetrahedron
    let (a, b) = (0usize, 1usize);
    let c = (2..n)
        .max_by(|&i, &j| {
            let ni = cross(sub(points[b], points[a]), sub(points[i], points[a]));
            let nj = cross(sub(points[b], points[a]), sub(points[j], points[a]));
            dot(ni, ni).total_cmp(&dot(nj, nj))
        })
        .unwrap();
    let normal = cross(sub(points[b], points[a]), sub(points[c], points[a]));
    let d = (2..n)
        .filter(|&i| i != c)
        .max_by(|&i, &j| {
            dot(normal, sub(points[i], points[a]))
                .abs()
                .total_cmp(&dot(normal, sub(points[j], points[a])).abs())
        })
        .unwrap();
    if dot(normal, sub(points[d], points[a])).abs() < EPS {
        return Err(Error::invalid("points are coplanar"));
    }
    let centroid = [a, b, c, d].iter().fold([0.0; 3], |s, &i| {
        [s[0] + points[i][0] / 4.0, s[1] + points[i][1] / 4.0, s[2] + points[i][2] / 4.0]
    });
    let orient = |f: [usize; 3]| -> [usize; 3] {
        let nrm = cross(sub(points[f[1]], points[f[0]]), sub(points[f[2]], points[f[0]]));
        if dot(nrm, sub(points[f[0]], centroid)) < 0.0 {
            [f[0], f[2], f[1]]
        } else {
            f
        }
    };
    let mut faces: Vec<Option<[usize; 3]>> = [[a, b, c], [a, b, d], [a, c, d], [b, c, d]]
        .into_iter()
        .map(|f| Some(orient(f)))
        .collect();
    let mut edge_face: HashMap<(usize, usize), usize> = HashMap::new();
    for (i, f) in faces.iter().enumerate() {
        let f = f.unwrap();
        for k in 0..3 {
            edge_face.insert((f[k], f[(k + 1) % 3]), i);
        }
    }
    let visible = |f: [usize; 3], p: [f64; 3]| {
        let nrm = cross(sub(points[f[1]], points[f[0]]), sub(points[f[2]], points[f[0]]));
        dot(nrm, sub(p, points[f[0]])) > EPS
    };
    for p in 0..n {
        if [a, b, c, d].contains(&p) {
            continue;
        }
        let vis: Vec<usize> = faces
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.filter(|f| visible(*f, points[p])).map(|_| i))
            .collect();
        if vis.is_empty() {
            return Err(Error::invalid(format!("point {p} is not in convex position")));
        }
        let vis_set: std::collections::HashSet<usize> = vis.iter().copied().collect();
        let mut horizon = Vec::new();
        for &fi in &vis {
            let f = faces[fi].unwrap();
            for k in 0..3 {
                let (u, v) = (f[k], f[(k + 1) % 3]);
                match edge_face.get(&(v, u)) {
                    Some(other) if vis_set.contains(other) => {}
                    _ => horizon.push((u, v)),
                }
            }
        }
        for &fi in &vis {
            let f = faces[fi].take().unwrap();
            for k in 0..3 {
                edge_face.remove(&(f[k], f[(k + 1) % 3]));
            }
        }
        for (u, v) in horizon {
            let id = faces.len();
            faces.push(Some([u, v, p]));
            for e in [(u, v), (v, p), (p, u)] {
                edge_face.insert(e, id);
            }
        }
    }
    Ok(faces
        .into_iter()
        .flatten()
        .map(|f| [f[0] as u32, f[1] as u32, f[2] as u32])
        .collect())
}

fn upsample_rows(coarse: &[[f64; 3]], faces: &[[u32; 3]], fine: &[[f64; 3]]) -> UpsampleMatrix {
    let mut entries = Vec::new();
    for (r, &p) in fine.iter().enumerate() {
        let mut best: Option<(f64, [u32; 3], [f64; 3])> = None;
        for f in faces {
            let [a, b, c] = [coarse[f[0] as usize], coarse[f[1] as usize], coarse[f[2] as usize]];
            let nrm = cross(sub(b, a), sub(c, a));
            let denom = dot(nrm, p);
            if denom <= 0.0 {
                continue;
            }
            // ray t·p hits the face plane at t = n·a / n·p
            let q = {
                let t = dot(nrm, a) / denom;
                [p[0] * t, p[1] * t, p[2] * t]
            };
            let area = dot(nrm, nrm);
            let wa = dot(cross(sub(b, q), sub(c, q)), nrm) / area;
            let wb = dot(cross(sub(c, q), sub(a, q)), nrm) / area;
            let wc = 1.0 - wa - wb;
            let score = wa.min(wb).min(wc);
            if best.is_none_or(|(s, _, _)| score > s) {
                best = Some((score, *f, [wa, wb, wc]));
            }
        }
        let (_, f, w) = best.expect("closed hull covers every direction");
        let w = w.map(|x| x.max(0.0));
        let total: f64 = w.iter().sum();
        let mut merged: Vec<(usize, f64)> = Vec::new();
        for k in 0..3 {
            let col = f[k] as usize;
            let wk = w[k] / total;
            if wk == 0.0 {
                continue;
            }
            match merged.iter_mut().find(|(c, _)| *c == col) {
                Some(e) => e.1 += wk,
                None => merged.push((col, wk)),
            }
        }
        merged.sort_by_key(|e| e.0);
        entries.extend(merged.into_iter().map(|(c, v)| (r, c, v)));
    }
    UpsampleMatrix {
        rows: fine.len(),
        cols: coarse.len(),
        entries,
    }
}

/// Builds a template with the given coarse-to-fine vertex counts.
pub fn synthetic_template(levels: &[usize]) -> Result<Template> {
    let spheres: Vec<Vec<[f64; 3]>> = levels.iter().map(|&n| fibonacci_sphere(n)).collect();
    let faces = spheres
        .iter()
        .map(|p| convex_hull(p))
        .collect::<Result<Vec<_>>>()?;
    let mut mesh_levels = Vec::with_capacity(levels.len());
    for i in 0..levels.len() {
        let upsample = (i + 1 < levels.len()).then(|| upsample_rows(&spheres[i], &faces[i], &spheres[i + 1]));
        mesh_levels.push(MeshLevel {
            vertices: levels[i],
            faces: faces[i].clone(),
            upsample,
        });
    }
    let topology = MeshTopology::new(mesh_levels)?;
    let positions = spheres
        .iter()
        .map(|pts| {
            pts.iter()
                .map(|p| [p[0] * HAND_EXTENT[0], p[1] * HAND_EXTENT[1], p[2] * HAND_EXTENT[2]])
                .collect()
        })
        .collect();
    Ok(Template { topology, positions })
}

/// Five-level template, 49 → 778 vertices.
pub fn hand_template() -> Template {
    synthetic_template(&HAND_LEVELS).expect("fixed template levels are valid")
}
