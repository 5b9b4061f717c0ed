//! Training losses with analytic gradients and the PA-MPJPE metric.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::lifting::CameraIntrinsics;

pub type Point3 = [f64; 3];
pub type Point2 = [f64; 2];

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: vec![a],
            actual: vec![b],
        });
    }
    Ok(())
}

/// Pinhole projection `u = fx·x/z + cx`, `v = fy·y/z + cy`.
pub fn project(points: &[Point3], k: &CameraIntrinsics) -> Result<Vec<Point2>> {
    points
        .iter()
        .enumerate()
        .map(|(i, &[x, y, z])| {
            if !(z > 0.0) {
                return Err(Error::NonPositiveDepth { index: i, depth: z });
            }
            Ok([k.fx * x / z + k.cx, k.fy * y / z + k.cy])
        })
        .collect()
}

/// `Σ ‖π(P̂_i) − P_i‖²` in pixels² and its gradient with respect to `pred`.
pub fn reprojection_loss_grad(pred: &[Point3], gt2d: &[Point2], k: &CameraIntrinsics) -> Result<(f64, Vec<Point3>)> {
    check_len(pred.len(), gt2d.len())?;
    let uv = project(pred, k)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for ((&[x, y, z], [u, v]), [gu, gv]) in pred.iter().zip(&uv).zip(gt2d) {
        let (du, dv) = (u - gu, v - gv);
        loss += du * du + dv * dv;
        grad.push([
            2.0 * du * k.fx / z,
            2.0 * dv * k.fy / z,
            -2.0 * (du * k.fx * x + dv * k.fy * y) / (z * z),
        ]);
    }
    Ok((loss, grad))
}

pub fn reprojection_loss(pred: &[Point3], gt2d: &[Point2], k: &CameraIntrinsics) -> Result<f64> {
    Ok(reprojection_loss_grad(pred, gt2d, k)?.0)
}

/// `Σ ‖P̂_i − P_i‖²` in meters² and its gradient.
pub fn pose3d_loss_grad(pred: &[Point3], gt: &[Point3]) -> Result<(f64, Vec<Point3>)> {
    check_len(pred.len(), gt.len())?;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = [p[0] - g[0], p[1] - g[1], p[2] - g[2]];
            loss += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            [2.0 * d[0], 2.0 * d[1], 2.0 * d[2]]
        })
        .collect();
    Ok((loss, grad))
}

pub fn pose3d_loss(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    Ok(pose3d_loss_grad(pred, gt)?.0)
}

/// `Σ (d_i − d̂_i)²` and its gradient with respect to `pred`.
pub fn depth_loss_grad(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(pred.len(), gt.len())?;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            loss += (p - g) * (p - g);
            2.0 * (p - g)
        })
        .collect();
    Ok((loss, grad))
}

pub fn depth_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    Ok(depth_loss_grad(pred, gt)?.0)
}

/// `Σ_{(i,j)} ‖V_i − V_j‖²` over undirected edges and its gradient.
pub fn smoothness_loss_grad(verts: &[Point3], edges: &[(usize, usize)]) -> Result<(f64, Vec<Point3>)> {
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 3]; verts.len()];
    for &(i, j) in edges {
        let n = verts.len();
        if i >= n || j >= n {
            return Err(Error::IndexOutOfRange {
                index: i.max(j),
                len: n,
            });
        }
        for a in 0..3 {
            let d = verts[i][a] - verts[j][a];
            loss += d * d;
            grad[i][a] += 2.0 * d;
            grad[j][a] -= 2.0 * d;
        }
    }
    Ok((loss, grad))
}

pub fn smoothness_loss(verts: &[Point3], edges: &[(usize, usize)]) -> Result<f64> {
    Ok(smoothness_loss_grad(verts, edges)?.0)
}

/// Undirected edges of a triangle list, each once as `(low, high)`, sorted.
pub fn edges_from_faces(faces: &[[u32; 3]]) -> Vec<(usize, usize)> {
    let mut set = BTreeSet::new();
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k] as usize, f[(k + 1) % 3] as usize);
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
    }
    set.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub reprojection: f64,
    pub pose: f64,
    pub depth: f64,
    pub smoothness: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reprojection: 1.0,
            pose: 1.0,
            depth: 1.0,
            smoothness: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(reprojection: f64, pose: f64, depth: f64, smoothness: f64) -> Result<Self> {
        let w = Self {
            reprojection,
            pose,
            depth,
            smoothness,
        };
        if [reprojection, pose, depth, smoothness]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub reprojection: f64,
    pub pose: f64,
    pub depth: f64,
    pub smoothness: f64,
}

pub fn aggregate_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.reprojection * c.reprojection + w.pose * c.pose + w.depth * c.depth + w.smoothness * c.smoothness
}

/// Predictions and targets for the full training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets<'a> {
    pub keypoints2d: &'a [Point2],
    pub keypoints3d: &'a [Point3],
    pub depth: &'a [f64],
    pub edges: &'a [(usize, usize)],
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub keypoints: Vec<Point3>,
    pub depth: Vec<f64>,
    pub vertices: Vec<Point3>,
}

/// Weighted objective over predicted keypoints, depths and vertices.
pub fn total_loss_grad(
    keypoints: &[Point3],
    depth: &[f64],
    vertices: &[Point3],
    t: &LossTargets,
    w: &LossWeights,
) -> Result<(LossComponents, f64, LossGradients)> {
    let (lr, gr) = reprojection_loss_grad(keypoints, t.keypoints2d, &t.intrinsics)?;
    let (lp, gp) = pose3d_loss_grad(keypoints, t.keypoints3d)?;
    let (ld, gd) = depth_loss_grad(depth, t.depth)?;
    let (ls, gs) = smoothness_loss_grad(vertices, t.edges)?;
    let c = LossComponents {
        reprojection: lr,
        pose: lp,
        depth: ld,
        smoothness: ls,
    };
    let keypoints = gr
        .iter()
        .zip(&gp)
        .map(|(a, b)| std::array::from_fn(|i| w.reprojection * a[i] + w.pose * b[i]))
        .collect();
    let grads = LossGradients {
        keypoints,
        depth: gd.iter().map(|g| w.depth * g).collect(),
        vertices: gs
            .iter()
            .map(|g| std::array::from_fn(|i| w.smoothness * g[i]))
            .collect(),
    };
    Ok((c, aggregate_loss(&c, w), grads))
}

/// Central finite differences (`h = 1e-5`) against the analytic gradient of
/// `f`, which returns `(value, gradient)`. Returns the largest relative error
/// `|a − n| / max(|a|, |n|, 1)`.
pub fn grad_check<F>(f: F, x: &[f64]) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    const H: f64 = 1e-5;
    let (_, analytic) = f(x);
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + H;
        let fp = f(&probe).0;
        probe[i] = x[i] - H;
        let fm = f(&probe).0;
        probe[i] = x[i];
        let numeric = (fp - fm) / (2.0 * H);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        worst = worst.max(rel);
    }
    worst
}

pub fn flatten3(p: &[Point3]) -> Vec<f64> {
    p.iter().flatten().copied().collect()
}

pub fn unflatten3(x: &[f64]) -> Vec<Point3> {
    x.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Similarity `(s, R, t)` minimizing `Σ ‖s·R·p_i + t − q_i‖²` with
/// `det R = +1`. Coincident `p` keeps `s = 1`.
pub fn similarity_align(p: &[Point3], q: &[Point3]) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    check_len(p.len(), q.len())?;
    if p.is_empty() {
        return Err(Error::EmptyInput);
    }
    if p.iter().chain(q).flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("alignment points"));
    }
    let n = p.len() as f64;
    let v = |a: &Point3| Vector3::new(a[0], a[1], a[2]);
    let mp = p.iter().map(v).sum::<Vector3<f64>>() / n;
    let mq = q.iter().map(v).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (a, b) in p.iter().zip(q) {
        let (x, y) = (v(a) - mp, v(b) - mq);
        cov += y * x.transpose();
        var_p += x.norm_squared();
    }
    cov /= n;
    var_p /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let s = if var_p > 1e-300 {
        (Matrix3::from_diagonal(&svd.singular_values) * d).trace() / var_p
    } else {
        1.0
    };
    let t = mq - s * r * mp;
    Ok((s, r, t))
}

/// Mean point distance after similarity alignment, in millimeters.
pub fn pa_mpjpe_points(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    let (s, r, t) = similarity_align(pred, gt)?;
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let a = s * r * Vector3::new(p[0], p[1], p[2]) + t;
            (a - Vector3::new(g[0], g[1], g[2])).norm()
        })
        .sum();
    Ok(1000.0 * total / pred.len() as f64)
}

/// PA-MPJPE over keypoints, millimeters.
pub fn pa_mpjpe(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    pa_mpjpe_points(pred, gt)
}

/// PA-MPVPE over mesh vertices, millimeters.
pub fn pa_mpvpe(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    pa_mpjpe_points(pred, gt)
}

/// Mean Euclidean distance without alignment, millimeters.
pub fn mpjpe(pred: &[Point3], gt: &[Point3]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt())
        .sum();
    Ok(1000.0 * total / pred.len() as f64)
}
