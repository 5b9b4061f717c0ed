//! Multi-level mesh topology with row-stochastic upsampling matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Standard hand template vertex counts, coarse to fine.
pub const HAND_LEVELS: [usize; 5] = [49, 98, 195, 389, 778];
const ROW_SUM_TOL: f64 = 1e-6;

/// Sparse `rows × cols` matrix as `(row, col, value)` triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsampleMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl UpsampleMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            entries: (0..n).map(|i| (i, i, 1.0)).collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rows * self.cols];
        for &(r, c, v) in &self.entries {
            d[r * self.cols + c] += v;
        }
        d
    }

    fn validate(&self, level: usize) -> Result<()> {
        let err = |message: String| Error::Topology { level, message };
        let mut sums = vec![0.0f64; self.rows];
        for &(r, c, v) in &self.entries {
            if r >= self.rows || c >= self.cols {
                return Err(err(format!(
                    "upsample entry ({r}, {c}) outside {}×{}",
                    self.rows, self.cols
                )));
            }
            if !(v >= 0.0 && v.is_finite()) {
                return Err(err(format!("row {r}: negative or non-finite weight {v}")));
            }
            sums[r] += v;
        }
        for (r, s) in sums.iter().enumerate() {
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(err(format!("row {r}: weights sum to {s}, expected 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshLevel {
    pub vertices: usize,
    pub faces: Vec<[u32; 3]>,
    /// Map to the next finer level; absent on the finest level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upsample: Option<UpsampleMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshTopology {
    pub levels: Vec<MeshLevel>,
}

impl MeshTopology {
    pub fn new(levels: Vec<MeshLevel>) -> Result<Self> {
        let t = Self { levels };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Topology {
                level: 0,
                message: "no levels".into(),
            });
        }
        let last = self.levels.len() - 1;
        for (i, level) in self.levels.iter().enumerate() {
            let err = |message: String| Error::Topology { level: i, message };
            for (f, face) in level.faces.iter().enumerate() {
                if face.iter().any(|&v| v as usize >= level.vertices) {
                    return Err(err(format!(
                        "face {f} {face:?} indexes past {} vertices",
                        level.vertices
                    )));
                }
                if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                    return Err(err(format!("face {f} {face:?} is degenerate")));
                }
            }
            match (&level.upsample, i == last) {
                (Some(_), true) => return Err(err("finest level cannot upsample".into())),
                (None, false) => return Err(err("missing upsample matrix".into())),
                (Some(u), false) => {
                    let next = self.levels[i + 1].vertices;
                    if u.rows != next || u.cols != level.vertices {
                        return Err(err(format!(
                            "upsample is {}×{}, expected {}×{}",
                            u.rows, u.cols, next, level.vertices
                        )));
                    }
                    u.validate(i)?;
                }
                (None, true) => {}
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: MeshTopology = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn vertex_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.vertices).collect()
    }

    pub fn finest(&self) -> &MeshLevel {
        self.levels.last().expect("validated topology has levels")
    }

    /// Undirected face edges of `level`, each once, as `(low, high)`.
    pub fn edges(&self, level: usize) -> Vec<(usize, usize)> {
        crate::metrics::edges_from_faces(&self.levels[level].faces)
    }
}

/// Sparse product `U · features` for `features` of shape `(cols, C)`.
pub fn mesh_upsample(features: &DenseTensor, u: &UpsampleMatrix) -> Result<DenseTensor> {
    let &[v, c] = features.shape() else {
        return Err(Error::invalid("mesh features must be (V, C)"));
    };
    if v != u.cols {
        return Err(Error::ShapeMismatch {
            expected: vec![u.cols, c],
            actual: vec![v, c],
        });
    }
    let f = features.data();
    let mut acc = vec![0.0f64; u.rows * c];
    for &(r, col, w) in &u.entries {
        for (a, &x) in acc[r * c..(r + 1) * c].iter_mut().zip(&f[col * c..(col + 1) * c]) {
            *a += w * x as f64;
        }
    }
    DenseTensor::new(vec![u.rows, c], acc.into_iter().map(|a| a as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TETRA: &str = r#"{"levels":[{"vertices":4,"faces":[[0,1,2],[0,2,3],[0,3,1],[1,3,2]]}]}"#;

    #[test]
    fn tetrahedron_parses() {
        let t = MeshTopology::from_json(TETRA).unwrap();
        assert_eq!(t.vertex_counts(), vec![4]);
        assert_eq!(t.edges(0).len(), 6);
    }

    #[test]
    fn bad_row_sum_names_level_and_row() {
        let text = r#"{"levels":[
            {"vertices":2,"faces":[],"upsample":{"rows":3,"cols":2,"entries":[[0,0,1.0],[1,1,1.0],[2,0,0.5],[2,1,0.49]]}},
            {"vertices":3,"faces":[]}]}"#;
        match MeshTopology::from_json(text) {
            Err(Error::Topology { level, message }) => {
                assert_eq!(level, 0);
                assert!(message.contains("row 2"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn face_out_of_range_is_rejected() {
        let text = r#"{"levels":[{"vertices":3,"faces":[[0,1,3]]}]}"#;
        assert!(matches!(MeshTopology::from_json(text), Err(Error::Topology { level: 0, .. })));
    }

    #[test]
    fn upsample_identity_and_average() {
        let f = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(mesh_upsample(&f, &UpsampleMatrix::identity(2)).unwrap(), f);
        let avg = UpsampleMatrix {
            rows: 1,
            cols: 2,
            entries: vec![(0, 0, 0.5), (0, 1, 0.5)],
        };
        assert_eq!(mesh_upsample(&f, &avg).unwrap().data(), &[2.0, 4.0]);
    }
}
