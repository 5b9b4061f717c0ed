//! Training losses, a gradient check and Procrustes-aligned error.

use splite::lifting::CameraIntrinsics;
use splite::metrics::{
    aggregate_loss, flatten3, grad_check, pa_mpjpe, pose3d_loss_grad, total_loss_grad, unflatten3, LossTargets,
    LossWeights, Point3,
};

fn main() -> splite::Result<()> {
    let gt: Vec<Point3> = (0..21)
        .map(|i| {
            let t = i as f64 * 0.3;
            [0.03 * t.cos(), 0.04 * t.sin(), 0.5 + 0.01 * t]
        })
        .collect();
    let pred: Vec<Point3> = gt
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let e = 0.002 * ((i * 7 % 5) as f64 - 2.0);
            [p[0] + e, p[1] - 0.5 * e, p[2] + 0.003]
        })
        .collect();
    let k = CameraIntrinsics::default();
    let gt2d = splite::metrics::project(&gt, &k)?;
    let depth_gt: Vec<f64> = gt.iter().map(|p| p[2]).collect();
    let depth: Vec<f64> = pred.iter().map(|p| p[2]).collect();
    let edges: Vec<(usize, usize)> = (0..20).map(|i| (i, i + 1)).collect();
    let targets = LossTargets {
        keypoints2d: &gt2d,
        keypoints3d: &gt,
        depth: &depth_gt,
        edges: &edges,
        intrinsics: k,
    };
    let w = LossWeights::default();
    let (c, total, _) = total_loss_grad(&pred, &depth, &pred, &targets, &w)?;
    println!("{c:?}");
    println!("total {total:.6e} (= {:.6e})", aggregate_loss(&c, &w));

    let worst = grad_check(
        |x| {
            let (l, g) = pose3d_loss_grad(&unflatten3(x), &gt).unwrap();
            (l, flatten3(&g))
        },
        &flatten3(&pred),
    );
    println!("pose gradient check, worst relative error {worst:.2e}");

    // a rotated, scaled, shifted copy aligns back to zero error
    let (s, c, sn) = (1.7, 0.6f64.cos(), 0.6f64.sin());
    let moved: Vec<Point3> = gt.iter().map(|p| [s * (c * p[0] - sn * p[1]) + 0.1, s * (sn * p[0] + c * p[1]), s * p[2] - 0.2]).collect();
    println!("PA-MPJPE of a similarity copy {:.2e} mm", pa_mpjpe(&moved, &gt)?);
    println!("PA-MPJPE of the noisy prediction {:.3} mm", pa_mpjpe(&pred, &gt)?);
    Ok(())
}
