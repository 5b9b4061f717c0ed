//! Heatmap peaks to pixel keypoints, pooled features and camera-frame joints.

use splite::lifting::{backproject, depth_from_logits, pose_pooling, pose_to_vertex, soft_argmax, CameraIntrinsics, LiftingMatrix};
use splite::tensor::DenseTensor;

fn main() -> splite::Result<()> {
    let (k, h, w) = (3, 32, 32);
    let peaks = [(4.0, 20.0), (16.0, 16.0), (27.5, 9.0)];
    let mut heat = vec![0.0f32; k * h * w];
    for (j, &(py, px)) in peaks.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - py).powi(2) + (x as f64 - px).powi(2);
                heat[(j * h + y) * w + x] = (-d2 / 2.0) as f32 * 4.0;
            }
        }
    }
    let lm = soft_argmax(&DenseTensor::new(vec![k, h, w], heat)?, 1.0)?;
    for (j, (uv, c)) in lm.uv.iter().zip(&lm.confidence).enumerate() {
        println!("joint {j}: grid ({:.3}, {:.3}) confidence {c:.3}", uv[0], uv[1]);
    }

    // a feature map whose channel 0 is the column and channel 1 the row
    let coords: Vec<f32> = (0..2 * h * w)
        .map(|i| if i < h * w { (i % w) as f32 } else { ((i - h * w) / w) as f32 })
        .collect();
    let pooled = pose_pooling(&DenseTensor::new(vec![2, h, w], coords)?, &lm)?;
    println!("pooled {:?} first row {:?}", pooled.shape(), &pooled.data()[..2]);

    let lift = LiftingMatrix::new(2, 3, vec![0.5, 0.5, 0.0, 0.0, 0.0, 1.0])?;
    let verts = pose_to_vertex(&pooled, &lift)?;
    println!("vertex features {:?}", verts.data());

    let depth = depth_from_logits(&[0.0, 0.2, -0.2]);
    let joints = backproject(&lm.to_pixels(), &depth, &CameraIntrinsics::default())?;
    for j in &joints {
        println!("camera-frame [{:.4}, {:.4}, {:.4}] m", j[0], j[1], j[2]);
    }
    Ok(())
}
