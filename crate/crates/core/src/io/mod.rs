//! File formats: weight store, mesh topology, intrinsics and predictions.

pub mod store;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use store::{StoredTensor, WeightStore};

use crate::decoder::MeshTopology;
use crate::error::{Error, Result};
use crate::lifting::CameraIntrinsics;
use crate::quant::ActivationParams;
use crate::tensor::{activation_params, quantize_affine, Granularity};

const ACT_PREFIX: &str = "quant.act.";
const ACT_SUFFIX: &str = ".range";

pub fn load_topology(text: &str) -> Result<MeshTopology> {
    MeshTopology::from_json(text)
}

pub fn load_topology_file(path: impl AsRef<Path>) -> Result<MeshTopology> {
    load_topology(&std::fs::read_to_string(path)?)
}

pub fn save_topology_file(path: impl AsRef<Path>, topology: &MeshTopology) -> Result<()> {
    std::fs::write(path, topology.to_json()?)?;
    Ok(())
}

pub fn load_intrinsics_file(path: impl AsRef<Path>) -> Result<CameraIntrinsics> {
    let k: CameraIntrinsics = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    k.validate()?;
    Ok(k)
}

pub fn save_intrinsics_file(path: impl AsRef<Path>, k: &CameraIntrinsics) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(k)?)?;
    Ok(())
}

/// One inference result; serialized as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    /// Camera-frame joints, meters.
    pub joints: Vec<[f64; 3]>,
    /// Camera-frame mesh vertices, meters.
    pub vertices: Vec<[f64; 3]>,
    /// Joint locations in input pixels.
    pub keypoints_2d: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        let finite = self.joints.iter().flatten().all(|v| v.is_finite())
            && self.vertices.iter().flatten().all(|v| v.is_finite())
            && self.keypoints_2d.iter().flatten().all(|v| v.is_finite())
            && self.confidence.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("prediction record"));
        }
        let k = self.joints.len();
        if self.keypoints_2d.len() != k || self.confidence.len() != k {
            return Err(Error::invalid(format!(
                "record {}: per-joint arrays disagree in length",
                self.image_id
            )));
        }
        Ok(())
    }

    pub fn to_line(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(line)?;
        r.validate()?;
        Ok(r)
    }
}

pub fn write_predictions(mut out: impl Write, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_line()?)?;
    }
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(PredictionRecord::from_line(&line)?);
        }
    }
    Ok(out)
}

/// Int8 copy of `store`: every f32 tensor of rank ≥ 2 becomes per-channel
/// symmetric int8; vectors (biases, norm statistics, calibration ranges) and
/// existing int8 entries are kept as they are.
pub fn quantize_store(store: &WeightStore) -> Result<WeightStore> {
    let mut out = WeightStore::new();
    for (name, t) in store.iter() {
        let q = match t {
            StoredTensor::F32(d) if d.rank() >= 2 => {
                StoredTensor::I8(quantize_affine(d, Granularity::PerChannel)?)
            }
            other => other.clone(),
        };
        out.insert(name.clone(), q);
    }
    Ok(out)
}

/// Records calibrated activation ranges as `quant.act.<boundary>.range`.
pub fn set_activation_ranges<'a>(
    store: &mut WeightStore,
    ranges: impl IntoIterator<Item = (&'a String, &'a (f32, f32))>,
) {
    for (name, &(lo, hi)) in ranges {
        store
            .insert_f32(format!("{ACT_PREFIX}{name}{ACT_SUFFIX}"), vec![2], vec![lo, hi])
            .expect("two-element range");
    }
}

/// Activation parameters stored in `store`, if any.
pub fn activation_ranges(store: &WeightStore) -> Result<Option<ActivationParams>> {
    let mut params = ActivationParams::default();
    for name in store.names() {
        let Some(boundary) = name
            .strip_prefix(ACT_PREFIX)
            .and_then(|n| n.strip_suffix(ACT_SUFFIX))
        else {
            continue;
        };
        let r = store.f32_shaped(name, &[2])?;
        let (lo, hi) = (r.data()[0], r.data()[1]);
        params
            .params
            .insert(boundary.to_string(), activation_params(lo, hi));
    }
    Ok((!params.params.is_empty()).then_some(params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_store_is_about_a_quarter() {
        let mut s = WeightStore::new();
        let data = (0..1_000_000u64).map(|i| ((i * 7919) % 2001) as f32 / 1000.0 - 1.0).collect();
        s.insert_f32("big", vec![1000, 1000], data).unwrap();
        let f32_bytes = s.to_bytes().unwrap().len();
        let q = quantize_store(&s).unwrap();
        let q_bytes = q.to_bytes().unwrap().len();
        // 1 byte per weight, plus the granularity flag, 1000 scales and a zero point
        assert_eq!(q_bytes, f32_bytes - 3_000_000 + 1 + 4000 + 4);
        let ratio = q_bytes as f64 / f32_bytes as f64;
        assert!((0.25..0.252).contains(&ratio), "{ratio}");
    }

    #[test]
    fn int8_store_is_unchanged_and_vectors_stay_f32() {
        let mut s = WeightStore::new();
        s.insert_f32("w", vec![2, 3], vec![0.5, -1.0, 0.25, 2.0, 0.0, -2.0]).unwrap();
        s.insert_f32("b", vec![2], vec![0.1, 0.2]).unwrap();
        let q = quantize_store(&s).unwrap();
        assert!(matches!(q.get("b"), Some(StoredTensor::F32(_))));
        assert_eq!(quantize_store(&q).unwrap(), q);
        let StoredTensor::I8(qt) = q.get("w").unwrap() else { panic!() };
        let back = q.f32("w").unwrap();
        let orig = s.f32("w").unwrap();
        for (i, (a, b)) in back.data().iter().zip(orig.data()).enumerate() {
            assert!((a - b).abs() <= qt.scale_at(i) / 2.0 + 1e-7);
        }
    }

    #[test]
    fn activation_ranges_round_trip() {
        let mut s = WeightStore::new();
        assert!(activation_ranges(&s).unwrap().is_none());
        let ranges = [("stem".to_string(), (0.0f32, 4.0f32))];
        set_activation_ranges(&mut s, ranges.iter().map(|(a, b)| (a, b)));
        let p = activation_ranges(&s).unwrap().unwrap();
        assert_eq!(p.get("stem").unwrap(), activation_params(0.0, 4.0));
    }

    #[test]
    fn prediction_lines_round_trip() {
        let r = PredictionRecord {
            image_id: "a".into(),
            joints: vec![[0.1, 0.2, 0.3]],
            vertices: vec![[1.0, 2.0, 3.0]],
            keypoints_2d: vec![[4.0, 5.0]],
            confidence: vec![0.5],
        };
        let line = r.to_line().unwrap();
        assert!(!line.contains('\n'));
        assert_eq!(PredictionRecord::from_line(&line).unwrap(), r);
        let bad = PredictionRecord {
            joints: vec![[f64::NAN, 0.0, 0.0]],
            ..r
        };
        assert!(bad.to_line().is_err());
    }

    #[test]
    fn intrinsics_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.json");
        let k = CameraIntrinsics::default();
        save_intrinsics_file(&p, &k).unwrap();
        assert_eq!(load_intrinsics_file(&p).unwrap(), k);
        std::fs::write(&p, r#"{"fx":0,"fy":1,"cx":0,"cy":0}"#).unwrap();
        assert!(load_intrinsics_file(&p).is_err());
    }
}
