//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use nalgebra::{Matrix4, SymmetricEigen, Vector3};
use rand::Rng;
use splite::backbone::ConvSpec;
use splite::lifting::{CameraIntrinsics, Landmarks2D};
use splite::metrics::{Point2, Point3};
use splite::tensor::DenseTensor;

/// Direct six-loop convolution of a `(C, H, W)` tensor with zero padding.
pub fn naive_conv(x: &DenseTensor, spec: &ConvSpec) -> DenseTensor {
    let (cin, h, w) = x.dims3().unwrap();
    let cout = spec.out_channels();
    let (kh, kw) = spec.kernel();
    let (ph, pw) = spec.padding();
    let s = spec.stride();
    let (oh, ow) = spec.output_extent(h, w);
    let wt = spec.weights();
    let mut out = vec![0.0f32; cout * oh * ow];
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = spec.bias()[o] as f64;
                for i in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * s + ky) as isize - ph as isize;
                            let ix = (ox * s + kx) as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = wt[((o * cin + i) * kh + ky) * kw + kx] as f64;
                            acc += wv * x.at3(i, iy as usize, ix as usize) as f64;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    DenseTensor::new(vec![cout, oh, ow], out).unwrap()
}

/// Random `(C, H, W)` tensor in which whole sites are zero with probability
/// `sparsity`.
pub fn random_sparse_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize, sparsity: f64) -> DenseTensor {
    let mut data = vec![0.0f32; c * h * w];
    for site in 0..h * w {
        if rng.random_bool(sparsity) {
            continue;
        }
        for ch in 0..c {
            let mut v: f32 = rng.random_range(-1.0..1.0);
            if v == 0.0 {
                v = 0.5;
            }
            data[ch * h * w + site] = v;
        }
    }
    DenseTensor::new(vec![c, h, w], data).unwrap()
}

/// Bilinear sample written out as four explicit neighbor weights.
pub fn pooling_oracle(grid: &DenseTensor, lm: &Landmarks2D) -> Vec<f64> {
    let (c, h, w) = grid.dims3().unwrap();
    let mut out = Vec::new();
    for &[u, v] in &lm.uv {
        let u = u.max(0.0).min((w - 1) as f64);
        let v = v.max(0.0).min((h - 1) as f64);
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = if x0 + 1 < w { x0 + 1 } else { x0 };
        let y1 = if y0 + 1 < h { y0 + 1 } else { y0 };
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        for ch in 0..c {
            let f = |y: usize, x: usize| grid.at3(ch, y, x) as f64;
            out.push(
                f(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + f(y0, x1) * fx * (1.0 - fy)
                    + f(y1, x0) * (1.0 - fx) * fy
                    + f(y1, x1) * fx * fy,
            );
        }
    }
    out
}

/// Plain triple-loop matrix product `A (n×k) · B (k×m)`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i * m + j] += a[i * k + t] * b[t * m + j];
            }
        }
    }
    out
}

fn next_permutation(p: &mut [u32]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// One-ring of `v` by exhaustive search: the arrangement of the neighbors,
/// starting at the smallest one, in which every incident face `(v, a, b)`
/// contributes a consecutive cyclic pair `a → b`.
pub fn brute_force_ring(v: u32, faces: &[[u32; 3]]) -> Vec<u32> {
    let mut pairs = HashSet::new();
    let mut nbrs = BTreeSet::new();
    for f in faces {
        for r in 0..3 {
            if f[r] == v {
                let (a, b) = (f[(r + 1) % 3], f[(r + 2) % 3]);
                pairs.insert((a, b));
                nbrs.insert(a);
                nbrs.insert(b);
            }
        }
    }
    let nbrs: Vec<u32> = nbrs.into_iter().collect();
    if nbrs.is_empty() {
        return Vec::new();
    }
    let first = nbrs[0];
    let mut rest = nbrs[1..].to_vec();
    let mut found = Vec::new();
    loop {
        let cand: Vec<u32> = std::iter::once(first).chain(rest.iter().copied()).collect();
        let n = cand.len();
        let hits = (0..n)
            .filter(|&i| pairs.contains(&(cand[i], cand[(i + 1) % n])))
            .count();
        if hits == pairs.len() {
            found.push(cand);
        }
        if !next_permutation(&mut rest) {
            break;
        }
    }
    assert_eq!(found.len(), 1, "ring of {v} is not unique: {found:?}");
    found.pop().unwrap()
}

/// Spiral built from brute-force rings: the center, its ring, then each
/// ring vertex's ring in order, skipping repeats, padded with the center.
pub fn brute_force_spiral(v: u32, faces: &[[u32; 3]], len: usize) -> Vec<u32> {
    let mut out = vec![v];
    let mut seen: HashSet<u32> = [v].into_iter().collect();
    let mut frontier = vec![v];
    while out.len() < len && !frontier.is_empty() {
        let mut next = Vec::new();
        for &u in &frontier {
            for n in brute_force_ring(u, faces) {
                if seen.insert(n) {
                    next.push(n);
                    out.push(n);
                }
            }
        }
        frontier = next;
    }
    out.truncate(len);
    out.resize(len, v);
    out
}

/// Outward-oriented tetrahedron.
pub fn tetrahedron() -> Vec<[u32; 3]> {
    vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]
}

/// `n × n` vertex grid, two triangles per cell.
pub fn grid_faces(n: u32) -> Vec<[u32; 3]> {
    let mut f = Vec::new();
    for r in 0..n - 1 {
        for c in 0..n - 1 {
            let (a, b, cc, d) = (r * n + c, r * n + c + 1, (r + 1) * n + c, (r + 1) * n + c + 1);
            f.push([a, b, d]);
            f.push([a, d, cc]);
        }
    }
    f
}

/// Horn's closed-form absolute orientation (unit quaternions) with the
/// least-squares scale; returns the mean aligned distance in millimeters.
pub fn horn_pa_mpjpe(pred: &[Point3], gt: &[Point3]) -> f64 {
    let n = pred.len() as f64;
    let v = |p: &Point3| Vector3::new(p[0], p[1], p[2]);
    let mp = pred.iter().map(v).sum::<Vector3<f64>>() / n;
    let mg = gt.iter().map(v).sum::<Vector3<f64>>() / n;
    let mut s = [[0.0; 3]; 3];
    let mut var = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = (v(p) - mp, v(g) - mg);
        var += a.norm_squared();
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += a[i] * b[j];
            }
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let m = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(m);
    let (imax, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |b, (i, &e)| if e > b.1 { (i, e) } else { b });
    let q = eig.eigenvectors.column(imax);
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let r = nalgebra::Matrix3::new(
        w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z,
    );
    let num: f64 = pred.iter().zip(gt).map(|(p, g)| (v(g) - mg).dot(&(r * (v(p) - mp)))).sum();
    let scale = if var > 0.0 { num / var } else { 1.0 };
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (scale * r * (v(p) - mp) + mg - v(g)).norm())
        .sum();
    1000.0 * total / n
}

pub fn reprojection_oracle(pred: &[Point3], gt: &[Point2], k: &CameraIntrinsics) -> f64 {
    let mut total = 0.0;
    for i in 0..pred.len() {
        let u = k.fx * pred[i][0] / pred[i][2] + k.cx;
        let v = k.fy * pred[i][1] / pred[i][2] + k.cy;
        total += (u - gt[i][0]).powi(2) + (v - gt[i][1]).powi(2);
    }
    total
}

pub fn pose_oracle(pred: &[Point3], gt: &[Point3]) -> f64 {
    let mut total = 0.0;
    for i in 0..pred.len() {
        for a in 0..3 {
            total += (pred[i][a] - gt[i][a]).powi(2);
        }
    }
    total
}

pub fn depth_oracle(pred: &[f64], gt: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..pred.len() {
        total += (gt[i] - pred[i]).powi(2);
    }
    total
}

/// Smoothness over the undirected edges of `faces`, each counted once.
pub fn smoothness_oracle(verts: &[Point3], faces: &[[u32; 3]]) -> f64 {
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k] as usize, f[(k + 1) % 3] as usize);
            let e = (a.min(b), a.max(b));
            if a != b && !edges.contains(&e) {
                edges.push(e);
            }
        }
    }
    let mut total = 0.0;
    for (i, j) in edges {
        for a in 0..3 {
            total += (verts[i][a] - verts[j][a]).powi(2);
        }
    }
    total
}

pub fn random_points(rng: &mut impl Rng, n: usize, z_min: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(z_min..z_min + 0.3),
            ]
        })
        .collect()
}

/// Random rotation from a normalized quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> nalgebra::Matrix3<f64> {
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    q.to_rotation_matrix().into_inner()
}

pub fn transform(points: &[Point3], s: f64, r: &nalgebra::Matrix3<f64>, t: [f64; 3]) -> Vec<Point3> {
    points
        .iter()
        .map(|p| {
            let q = s * r * Vector3::new(p[0], p[1], p[2]);
            [q[0] + t[0], q[1] + t[1], q[2] + t[2]]
        })
        .collect()
}
