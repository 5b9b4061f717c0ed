//! Two edge detectors fused into the sparse three-channel network input.

use splite::preproc::{canny_edges, early_fusion, ensure_gray, sobel_edges, Image, CANNY_HIGH, CANNY_LOW};
use splite::tensor::sparsity;

fn main() -> splite::Result<()> {
    // a bright palm-like blob with one finger on a dark background
    let mut img = Image::filled(128, 128, 1, 16);
    for y in 0..128 {
        for x in 0..128 {
            let (dy, dx) = (y as f64 - 76.0, x as f64 - 64.0);
            let palm = (dy / 34.0).powi(2) + (dx / 28.0).powi(2) <= 1.0;
            let finger = (50..62).contains(&x) && (8..50).contains(&y);
            if palm || finger {
                img.set(x, y, 0, 190);
            }
        }
    }
    let gray = ensure_gray(&img)?;
    let sobel = sobel_edges(&gray)?;
    let canny = canny_edges(&gray, CANNY_LOW, CANNY_HIGH)?;
    println!("sobel sparsity  {:.4}", sparsity(&sobel, 0.0)?);
    println!("canny sparsity  {:.4}", sparsity(&canny, 0.0)?);

    let (fused, site_sparsity) = early_fusion(&sobel, &canny)?;
    println!("fused shape     {:?}", fused.tensor().shape());
    println!("site sparsity   {site_sparsity:.4}");
    Ok(())
}
