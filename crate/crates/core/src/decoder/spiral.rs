//! Spiral vertex orderings.
//!
//! A spiral is `[v]`, then v's one-ring counter-clockwise (orientation from
//! face winding) starting at its smallest-index neighbor, then each further
//! ring in the order its vertices are reached from the previous ring,
//! truncated or padded with `v` to the requested length. Vertices whose
//! neighborhood is not a single fan fall back to breadth-first order by
//! `(hop distance, index)`.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

use super::topology::MeshTopology;

/// `V × L` spiral indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpiralTable {
    vertices: usize,
    len: usize,
    data: Vec<u32>,
}

impl SpiralTable {
    pub fn new(vertices: usize, len: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != vertices * len {
            return Err(Error::ShapeMismatch {
                expected: vec![vertices, len],
                actual: vec![data.len()],
            });
        }
        if let Some(&bad) = data.iter().find(|&&d| d as usize >= vertices) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                len: vertices,
            });
        }
        Ok(Self { vertices, len, data })
    }

    /// Every row `[v, v, …]`.
    pub fn identity(vertices: usize, len: usize) -> Self {
        let data = (0..vertices as u32)
            .flat_map(|v| std::iter::repeat_n(v, len))
            .collect();
        Self { vertices, len, data }
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, v: usize) -> &[u32] {
        &self.data[v * self.len..(v + 1) * self.len]
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }
}

/// Per-vertex neighbor lists ordered as one-ring spirals.
pub struct RingIndex {
    rings: Vec<Option<Vec<u32>>>,
    adjacency: Vec<BTreeSet<u32>>,
}

impl RingIndex {
    pub fn new(vertices: usize, faces: &[[u32; 3]]) -> Self {
        let mut adjacency = vec![BTreeSet::new(); vertices];
        let mut succ: Vec<Vec<(u32, u32)>> = vec![Vec::new(); vertices];
        for f in faces {
            for i in 0..3 {
                let (v, a, b) = (f[i], f[(i + 1) % 3], f[(i + 2) % 3]);
                adjacency[v as usize].insert(a);
                adjacency[v as usize].insert(b);
                succ[v as usize].push((a, b));
            }
        }
        let rings = (0..vertices)
            .map(|v| ordered_fan(&adjacency[v], &succ[v]))
            .collect();
        Self { rings, adjacency }
    }

    /// Ordered one-ring, or `None` when the neighborhood is not a single fan.
    pub fn ring(&self, v: usize) -> Option<&[u32]> {
        self.rings[v].as_deref()
    }

    pub fn neighbors(&self, v: usize) -> &BTreeSet<u32> {
        &self.adjacency[v]
    }

    /// Neighbors in spiral order, or ascending for non-manifold vertices.
    fn ring_or_sorted(&self, v: usize) -> Vec<u32> {
        match &self.rings[v] {
            Some(r) => r.clone(),
            None => self.adjacency[v].iter().copied().collect(),
        }
    }

    pub fn spiral(&self, v: usize, len: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        out.push(v as u32);
        if self.rings[v].is_none() {
            self.bfs(v, len, &mut out);
        } else {
            let mut seen = BTreeSet::from([v as u32]);
            let mut frontier = vec![v as u32];
            while out.len() < len && !frontier.is_empty() {
                let mut next = Vec::new();
                for &u in &frontier {
                    for w in self.ring_or_sorted(u as usize) {
                        if seen.insert(w) {
                            next.push(w);
                        }
                    }
                }
                out.extend(next.iter().take(len - out.len()));
                frontier = next;
            }
        }
        out.resize(len, v as u32);
        out
    }

    fn bfs(&self, v: usize, len: usize, out: &mut Vec<u32>) {
        let mut seen = BTreeSet::from([v as u32]);
        let mut frontier = vec![v as u32];
        while out.len() < len && !frontier.is_empty() {
            let mut next = BTreeSet::new();
            for &u in &frontier {
                for &w in &self.adjacency[u as usize] {
                    if !seen.contains(&w) {
                        next.insert(w);
                    }
                }
            }
            seen.extend(next.iter().copied());
            out.extend(next.iter().take(len - out.len()));
            frontier = next.into_iter().collect();
        }
    }
}

fn ordered_fan(neighbors: &BTreeSet<u32>, pairs: &[(u32, u32)]) -> Option<Vec<u32>> {
    let first = *neighbors.first()?;
    let mut next: BTreeMap<u32, u32> = BTreeMap::new();
    let mut has_prev = BTreeSet::new();
    for &(a, b) in pairs {
        if next.insert(a, b).is_some() || !has_prev.insert(b) {
            return None;
        }
    }
    let mut order = Vec::with_capacity(neighbors.len());
    let mut seen = BTreeSet::new();
    let walk = |start: u32, order: &mut Vec<u32>, seen: &mut BTreeSet<u32>| {
        let mut cur = Some(start);
        while let Some(c) = cur {
            if !seen.insert(c) {
                break;
            }
            order.push(c);
            cur = next.get(&c).copied();
        }
    };
    walk(first, &mut order, &mut seen);
    if order.len() < neighbors.len() {
        // open fan: continue from the chain start up to `first`
        let starts: Vec<u32> = neighbors
            .iter()
            .copied()
            .filter(|n| !has_prev.contains(n))
            .collect();
        if starts.len() != 1 {
            return None;
        }
        walk(starts[0], &mut order, &mut seen);
    }
    (order.len() == neighbors.len()).then_some(order)
}

/// Spiral table for one topology level.
pub fn build_spiral_table(topology: &MeshTopology, level: usize, len: usize) -> Result<SpiralTable> {
    let l = topology.levels.get(level).ok_or(Error::IndexOutOfRange {
        index: level,
        len: topology.levels.len(),
    })?;
    spiral_table_from_faces(l.vertices, &l.faces, len)
}

pub fn spiral_table_from_faces(vertices: usize, faces: &[[u32; 3]], len: usize) -> Result<SpiralTable> {
    if len == 0 {
        return Err(Error::invalid("spiral length must be at least 1"));
    }
    if faces.iter().flatten().any(|&v| v as usize >= vertices) {
        return Err(Error::invalid("face index out of range"));
    }
    let rings = RingIndex::new(vertices, faces);
    let data = (0..vertices).flat_map(|v| rings.spiral(v, len)).collect();
    SpiralTable::new(vertices, len, data)
}
