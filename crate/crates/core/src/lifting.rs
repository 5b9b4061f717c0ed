//! Heatmaps to landmarks, landmark-aligned feature pooling, keypoint-to-vertex
//! lifting and camera back-projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const NUM_KEYPOINTS: usize = 21;
/// Input pixels per feature-grid cell.
pub const GRID_STRIDE: f64 = 4.0;
/// Receptive-field center offset in pixels.
pub const GRID_OFFSET: f64 = 1.5;
/// Root depth when the depth logit is zero, meters.
pub const ROOT_DEPTH_PRIOR: f64 = 0.5;
/// Largest per-joint offset from the root depth, meters.
pub const RELATIVE_DEPTH_RANGE: f64 = 0.1;

/// 2D landmarks in feature-grid units with per-keypoint confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks2D {
    pub uv: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

impl Landmarks2D {
    pub fn len(&self) -> usize {
        self.uv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uv.is_empty()
    }

    /// Converts grid coordinates to input pixels.
    pub fn to_pixels(&self) -> Vec<[f64; 2]> {
        self.uv
            .iter()
            .map(|&[u, v]| [grid_to_pixel(u), grid_to_pixel(v)])
            .collect()
    }
}

pub fn grid_to_pixel(g: f64) -> f64 {
    g * GRID_STRIDE + GRID_OFFSET
}

/// Softmax expectation of grid coordinates per heatmap channel.
pub fn soft_argmax(heatmap_logits: &DenseTensor, temperature: f64) -> Result<Landmarks2D> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    if !heatmap_logits.is_finite() {
        return Err(Error::NonFinite("heatmap logits"));
    }
    let (k, h, w) = heatmap_logits.dims3()?;
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput);
    }
    let plane = h * w;
    let mut uv = Vec::with_capacity(k);
    let mut confidence = Vec::with_capacity(k);
    let mut p = vec![0.0f64; plane];
    for ch in heatmap_logits.data().chunks(plane) {
        let max = ch.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let mut total = 0.0;
        for (pi, &v) in p.iter_mut().zip(ch) {
            *pi = ((v as f64 - max) / temperature).exp();
            total += *pi;
        }
        let (mut eu, mut ev, mut peak) = (0.0, 0.0, 0.0f64);
        for (i, pi) in p.iter().enumerate() {
            let q = pi / total;
            eu += q * (i % w) as f64;
            ev += q * (i / w) as f64;
            peak = peak.max(q);
        }
        uv.push([eu, ev]);
        confidence.push(peak);
    }
    Ok(Landmarks2D { uv, confidence })
}

/// Bilinear sample of a `(C, H, W)` grid at each landmark; coordinates outside
/// the grid are clamped to the border. Returns `(K, C)`.
pub fn pose_pooling(feature_grid: &DenseTensor, landmarks: &Landmarks2D) -> Result<DenseTensor> {
    let (c, h, w) = feature_grid.dims3()?;
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput);
    }
    let plane = h * w;
    let f = feature_grid.data();
    let mut out = Vec::with_capacity(landmarks.len() * c);
    for &[u, v] in &landmarks.uv {
        let u = if u.is_finite() { u.clamp(0.0, (w - 1) as f64) } else { 0.0 };
        let v = if v.is_finite() { v.clamp(0.0, (h - 1) as f64) } else { 0.0 };
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (ax, ay) = (u - x0 as f64, v - y0 as f64);
        let taps = [
            (y0 * w + x0, (1.0 - ax) * (1.0 - ay)),
            (y0 * w + x1, ax * (1.0 - ay)),
            (y1 * w + x0, (1.0 - ax) * ay),
            (y1 * w + x1, ax * ay),
        ];
        for ch in 0..c {
            let base = ch * plane;
            let s: f64 = taps.iter().map(|&(i, wt)| wt * f[base + i] as f64).sum();
            out.push(s as f32);
        }
    }
    DenseTensor::new(vec![landmarks.len(), c], out)
}

/// Trainable map from keypoint features to coarse-mesh vertex features.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl LiftingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: vec![rows, cols],
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lifting matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_tensor(t: &DenseTensor) -> Result<Self> {
        match t.shape() {
            &[r, c] => Self::new(r, c, t.data().to_vec()),
            s => Err(Error::invalid(format!("lifting matrix must be rank 2, got {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// `M_lift · F_p`, giving `(V_sub, C)`.
pub fn pose_to_vertex(pooled: &DenseTensor, lift: &LiftingMatrix) -> Result<DenseTensor> {
    let &[k, c] = pooled.shape() else {
        return Err(Error::invalid("pooled features must be (K, C)"));
    };
    if k != lift.cols {
        return Err(Error::ShapeMismatch {
            expected: vec![lift.cols, c],
            actual: vec![k, c],
        });
    }
    let f = pooled.data();
    let mut out = vec![0.0f32; lift.rows * c];
    let mut acc = vec![0.0f64; c];
    for (r, dst) in out.chunks_mut(c.max(1)).enumerate().take(lift.rows) {
        acc.fill(0.0);
        for j in 0..k {
            let m = lift.data[r * k + j] as f64;
            if m == 0.0 {
                continue;
            }
            for (a, &x) in acc.iter_mut().zip(&f[j * c..(j + 1) * c]) {
                *a += m * x as f64;
            }
        }
        for (d, a) in dst.iter_mut().zip(&acc) {
            *d = *a as f32;
        }
    }
    DenseTensor::new(vec![lift.rows, c], out)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraIntrinsics {
    /// Roughly a 56° field of view over the 128-pixel network input.
    fn default() -> Self {
        Self {
            fx: 120.0,
            fy: 120.0,
            cx: 64.0,
            cy: 64.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::invalid("principal point must be finite"));
        }
        Ok(())
    }
}

/// Pixel coordinates and metric depth to camera-frame points.
pub fn backproject(uv: &[[f64; 2]], depth: &[f64], k: &CameraIntrinsics) -> Result<Vec<[f64; 3]>> {
    if uv.len() != depth.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![uv.len()],
            actual: vec![depth.len()],
        });
    }
    k.validate()?;
    uv.iter()
        .zip(depth)
        .enumerate()
        .map(|(i, (&[u, v], &d))| {
            if !(d > 0.0) {
                return Err(Error::NonPositiveDepth { index: i, depth: d });
            }
            Ok([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d])
        })
        .collect()
}

/// Absolute root depth and root-relative offsets from the depth head.
///
/// `d_root = prior · exp(tanh(l_0))`, `d_j = d_root + range · tanh(l_j)`.
/// Every depth stays above `prior / e − range > 0`.
pub fn depth_from_logits(logits: &[f32]) -> Vec<f64> {
    let Some(&root) = logits.first() else {
        return Vec::new();
    };
    let d_root = ROOT_DEPTH_PRIOR * (root as f64).tanh().exp();
    std::iter::once(d_root)
        .chain(
            logits[1..]
                .iter()
                .map(|&l| d_root + RELATIVE_DEPTH_RANGE * (l as f64).tanh()),
        )
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_channel(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> DenseTensor {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        DenseTensor::new(vec![1, h, w], data).unwrap()
    }

    #[test]
    fn soft_argmax_delta() {
        let t = one_channel(32, 32, |r, c| if (r, c) == (12, 7) { 50.0 } else { 0.0 });
        let lm = soft_argmax(&t, 1.0).unwrap();
        assert!((lm.uv[0][0] - 7.0).abs() < 1e-3 && (lm.uv[0][1] - 12.0).abs() < 1e-3);
        assert!((lm.confidence[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn soft_argmax_uniform_and_two_peaks() {
        let lm = soft_argmax(&one_channel(32, 32, |_, _| 0.3), 1.0).unwrap();
        assert!((lm.uv[0][0] - 15.5).abs() < 1e-9 && (lm.uv[0][1] - 15.5).abs() < 1e-9);
        assert!((lm.confidence[0] - 1.0 / 1024.0).abs() < 1e-12);

        let t = one_channel(32, 32, |r, c| if r == 0 && (c == 0 || c == 31) { 60.0 } else { 0.0 });
        let lm = soft_argmax(&t, 1.0).unwrap();
        assert!((lm.uv[0][0] - 15.5).abs() < 1e-3 && lm.uv[0][1].abs() < 1e-3);
    }

    #[test]
    fn soft_argmax_rejects_bad_input() {
        let t = one_channel(2, 2, |_, _| 0.0);
        assert!(soft_argmax(&t, 0.0).is_err());
        let t = one_channel(2, 2, |r, _| if r == 0 { f32::NAN } else { 0.0 });
        assert!(matches!(soft_argmax(&t, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn low_temperature_approaches_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let peak = rng.random_range(0..1024);
        let t = one_channel(32, 32, |r, c| {
            let v = rng.random_range(-1.0..1.0);
            if r * 32 + c == peak { 1.1 } else { v }
        });
        let (i, _) = t
            .data()
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        let lm = soft_argmax(&t, 1e-3).unwrap();
        assert!((lm.uv[0][0] - (i % 32) as f64).abs() < 1e-3);
        assert!((lm.uv[0][1] - (i / 32) as f64).abs() < 1e-3);
    }

    #[test]
    fn pooling_exact_at_integer_sites_and_midpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..3 * 5 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = DenseTensor::new(vec![3, 5, 6], data).unwrap();
        let lm = Landmarks2D {
            uv: vec![[2.0, 3.0], [2.5, 1.0], [-4.0, 99.0]],
            confidence: vec![1.0; 3],
        };
        let p = pose_pooling(&f, &lm).unwrap();
        for c in 0..3 {
            assert_eq!(p.data()[c], f.at3(c, 3, 2));
            let mid = (f.at3(c, 1, 2) as f64 + f.at3(c, 1, 3) as f64) / 2.0;
            assert!((p.data()[3 + c] as f64 - mid).abs() < 1e-6);
            assert_eq!(p.data()[6 + c], f.at3(c, 4, 0));
        }
    }

    #[test]
    fn lifting_selects_rows_and_checks_shapes() {
        let pooled = DenseTensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let sel = LiftingMatrix::new(2, 3, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(pose_to_vertex(&pooled, &sel).unwrap().data(), &[5.0, 6.0, 1.0, 2.0]);
        let zero = LiftingMatrix::new(4, 3, vec![0.0; 12]).unwrap();
        assert!(pose_to_vertex(&pooled, &zero).unwrap().data().iter().all(|v| *v == 0.0));
        let bad = LiftingMatrix::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(pose_to_vertex(&pooled, &bad).is_err());
    }

    #[test]
    fn backproject_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0).unwrap();
        assert_eq!(backproject(&[[64.0, 64.0]], &[1.0], &k).unwrap(), vec![[0.0, 0.0, 1.0]]);
        assert_eq!(backproject(&[[164.0, 64.0]], &[2.0], &k).unwrap(), vec![[2.0, 0.0, 2.0]]);
        assert!(matches!(
            backproject(&[[0.0, 0.0]], &[0.0], &k),
            Err(Error::NonPositiveDepth { index: 0, .. })
        ));
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn depth_decoding_is_positive() {
        let d = depth_from_logits(&[0.0, 100.0, -100.0]);
        assert_eq!(d[0], ROOT_DEPTH_PRIOR);
        assert!((d[1] - 0.6).abs() < 1e-12 && (d[2] - 0.4).abs() < 1e-12);
        let d = depth_from_logits(&[-1e9; 21]);
        assert!(d.iter().all(|&x| x > 0.0));
    }

    proptest::proptest! {
        #[test]
        fn pooling_is_linear(
            seed in 0u64..1000,
            alpha in -3.0f32..3.0,
            beta in -3.0f32..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand_grid = || {
                let d = (0..2 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
                DenseTensor::new(vec![2, 8, 8], d).unwrap()
            };
            let (f, g) = (rand_grid(), rand_grid());
            let lm = Landmarks2D { uv: vec![[3.3, 6.9], [0.1, 7.0]], confidence: vec![1.0; 2] };
            let mix = DenseTensor::new(
                vec![2, 8, 8],
                f.data().iter().zip(g.data()).map(|(a, b)| alpha * a + beta * b).collect(),
            ).unwrap();
            let lhs = pose_pooling(&mix, &lm).unwrap();
            let pf = pose_pooling(&f, &lm).unwrap();
            let pg = pose_pooling(&g, &lm).unwrap();
            for i in 0..lhs.len() {
                let rhs = alpha * pf.data()[i] + beta * pg.data()[i];
                proptest::prop_assert!((lhs.data()[i] - rhs).abs() < 1e-5);
            }
        }
    }
}
