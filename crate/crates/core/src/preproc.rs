//! Image preprocessing: grayscale conversion, Sobel and Canny edge maps, and
//! the early-fusion stack that forms the sparse network input.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{sparsity, DenseTensor};

/// Network input resolution.
pub const INPUT_SIZE: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{width}×{height}×{channels} image needs {} bytes, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            pixels: vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Reads PNG or binary PGM/PPM. Color inputs come back as RGB, gray as
    /// single channel.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            Self::new(w, h, 3, img.to_rgb8().into_raw())
        } else {
            Self::new(w, h, 1, img.to_luma8().into_raw())
        }
    }

    pub fn resized(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let filter = image::imageops::FilterType::Triangle;
        let (w, h) = (self.width as u32, self.height as u32);
        let pixels = if self.channels == 3 {
            let buf = image::RgbImage::from_raw(w, h, self.pixels.clone()).expect("buffer length");
            image::imageops::resize(&buf, width as u32, height as u32, filter).into_raw()
        } else {
            let buf = image::GrayImage::from_raw(w, h, self.pixels.clone()).expect("buffer length");
            image::imageops::resize(&buf, width as u32, height as u32, filter).into_raw()
        };
        Image {
            width,
            height,
            channels: self.channels,
            pixels,
        }
    }
}

/// ITU-R BT.601 luma, rounded half away from zero.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::invalid(format!(
            "grayscale conversion needs 3 channels, got {}",
            img.channels
        )));
    }
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|p| {
            let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(Image {
        width: img.width,
        height: img.height,
        channels: 1,
        pixels,
    })
}

/// Gray images pass through, RGB images are converted.
pub fn ensure_gray(img: &Image) -> Result<Image> {
    if img.channels == 1 {
        Ok(img.clone())
    } else {
        to_grayscale(img)
    }
}

// Symmetric reflection: (c b a | a b c | c b a)
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn sobel_gradients(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for ky in 0..3 {
                let yy = reflect(y as isize + ky as isize - 1, h);
                for kx in 0..3 {
                    let xx = reflect(x as isize + kx as isize - 1, w);
                    let v = plane[yy * w + xx];
                    sx += SOBEL_X[ky][kx] * v;
                    sy += SOBEL_Y[ky][kx] * v;
                }
            }
            gx[y * w + x] = sx;
            gy[y * w + x] = sy;
        }
    }
    (gx, gy)
}

fn gray_plane(gray: &Image) -> Result<Vec<f64>> {
    if gray.channels != 1 {
        return Err(Error::invalid("edge detection needs a single-channel image"));
    }
    if gray.width < 3 || gray.height < 3 {
        return Err(Error::invalid(format!(
            "image {}×{} is smaller than 3×3",
            gray.width, gray.height
        )));
    }
    Ok(gray.pixels.iter().map(|&p| p as f64).collect())
}

/// Sobel gradient magnitude normalized by its maximum to `[0, 1]`.
pub fn sobel_edges(gray: &Image) -> Result<DenseTensor> {
    let plane = gray_plane(gray)?;
    let (w, h) = (gray.width, gray.height);
    let (gx, gy) = sobel_gradients(&plane, w, h);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let data = if max > 0.0 {
        mag.iter().map(|m| (m / max) as f32).collect()
    } else {
        vec![0.0; w * h]
    };
    DenseTensor::new(vec![1, h, w], data)
}

fn gaussian_kernel_5(sigma: f64) -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

fn gaussian_blur(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel_5(sigma);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..5)
                .map(|i| k[i] * plane[y * w + reflect(x as isize + i as isize - 2, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..5)
                .map(|i| k[i] * tmp[reflect(y as isize + i as isize - 2, h) * w + x])
                .sum();
        }
    }
    out
}

pub const CANNY_SIGMA: f64 = 1.4;
pub const CANNY_LOW: f64 = 0.1;
pub const CANNY_HIGH: f64 = 0.3;

/// Classic Canny detector on intensities scaled to `[0, 1]`: 5×5 Gaussian
/// (σ = 1.4), Sobel gradients, non-maximum suppression over four directions,
/// then hysteresis between `low` and `high` on the gradient magnitude.
/// Output is binary.
pub fn canny_edges(gray: &Image, low: f64, high: f64) -> Result<DenseTensor> {
    if !(0.0 <= low && low <= high) {
        return Err(Error::invalid(format!(
            "canny thresholds need 0 <= low <= high, got low={low} high={high}"
        )));
    }
    let plane: Vec<f64> = gray_plane(gray)?.into_iter().map(|v| v / 255.0).collect();
    let (w, h) = (gray.width, gray.height);
    let smooth = gaussian_blur(&plane, w, h, CANNY_SIGMA);
    let (gx, gy) = sobel_gradients(&smooth, w, h);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();

    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };

    let mut thin = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let m = mag[y * w + x];
            if m <= 0.0 {
                continue;
            }
            let mut angle = gy[y * w + x].atan2(gx[y * w + x]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (dx, dy) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let (xi, yi) = (x as isize, y as isize);
            let ahead = at(xi + dx, yi + dy);
            let behind = at(xi - dx, yi - dy);
            // asymmetric tie-break keeps one pixel of a two-pixel plateau
            if m > behind && m >= ahead {
                thin[y * w + x] = m;
            }
        }
    }

    let mut out = vec![0.0f32; w * h];
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= high && m > 0.0 {
            out[i] = 1.0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0.0 && thin[j] >= low && thin[j] > 0.0 {
                    out[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    DenseTensor::new(vec![1, h, w], out)
}

/// Three-channel network input `[edge_a, edge_b, union_mask]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedInput {
    tensor: DenseTensor,
}

impl FusedInput {
    pub fn tensor(&self) -> &DenseTensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> DenseTensor {
        self.tensor
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn mask(&self) -> &[f32] {
        let plane = self.height() * self.width();
        &self.tensor.data()[2 * plane..]
    }

    /// Fraction of sites with an empty union mask.
    pub fn site_sparsity(&self) -> f64 {
        let mask = self.mask();
        mask.iter().filter(|v| **v == 0.0).count() as f64 / mask.len() as f64
    }

    /// Stacks one edge map with its binarized copy; used for synthetic workloads.
    pub fn from_edge_map(edge: &DenseTensor) -> Result<Self> {
        let binary: Vec<f32> = edge
            .data()
            .iter()
            .map(|&v| if v != 0.0 { 1.0 } else { 0.0 })
            .collect();
        let b = DenseTensor::new(edge.shape().to_vec(), binary)?;
        Ok(early_fusion(edge, &b)?.0)
    }
}

/// Channel-stacks two edge maps with their union mask. Returns the fused
/// input and its site sparsity (fraction of sites with neither edge).
pub fn early_fusion(edge_a: &DenseTensor, edge_b: &DenseTensor) -> Result<(FusedInput, f64)> {
    if edge_a.shape() != edge_b.shape() {
        return Err(Error::ShapeMismatch {
            expected: edge_a.shape().to_vec(),
            actual: edge_b.shape().to_vec(),
        });
    }
    let (c, h, w) = edge_a.dims3()?;
    if c != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            actual: c,
        });
    }
    let in_range = |t: &DenseTensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
    if !in_range(edge_a) || !in_range(edge_b) {
        return Err(Error::invalid("edge maps must lie in [0, 1]"));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    data.extend_from_slice(edge_a.data());
    data.extend_from_slice(edge_b.data());
    data.extend(
        edge_a
            .data()
            .iter()
            .zip(edge_b.data())
            .map(|(a, b)| if *a != 0.0 || *b != 0.0 { 1.0 } else { 0.0 }),
    );
    let fused = FusedInput {
        tensor: DenseTensor::new(vec![3, h, w], data)?,
    };
    let s = fused.site_sparsity();
    Ok((fused, s))
}

/// Sobel (modality A) and Canny (modality B) of one image, fused.
pub fn fuse_image(img: &Image) -> Result<(FusedInput, f64)> {
    let gray = ensure_gray(img)?;
    let a = sobel_edges(&gray)?;
    let b = canny_edges(&gray, CANNY_LOW, CANNY_HIGH)?;
    early_fusion(&a, &b)
}

// Fraction of pixels inside the stroke region that carry an edge.
const STROKE_FILL: f64 = 0.35;

/// Deterministic edge-like map of measured sparsity within ±0.01 of
/// `target_sparsity`.
///
/// Strokes are random-walk polylines confined to a centered disk sized so
/// that about a third of its pixels carry edges, which mimics a hand-centered
/// crop with an empty background. Edge intensities lie in `[0.3, 1]`.
pub fn synth_sparse_input(h: usize, w: usize, target_sparsity: f64, seed: u64) -> Result<DenseTensor> {
    if !(0.0..=1.0).contains(&target_sparsity) {
        return Err(Error::invalid("target sparsity must lie in [0, 1]"));
    }
    let total = h * w;
    if total == 0 {
        return Err(Error::EmptyInput);
    }
    let want = ((1.0 - target_sparsity) * total as f64).round() as usize;
    let achieved = 1.0 - want as f64 / total as f64;
    if (achieved - target_sparsity).abs() > 0.01 {
        return Err(Error::invalid(format!(
            "sparsity {target_sparsity} is not reachable on a {h}×{w} image"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; total];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let dist2 = |y: usize, x: usize| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);

    // grow the disk until it holds enough pixels at the stroke fill rate
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| {
        dist2(a / w, a % w)
            .partial_cmp(&dist2(b / w, b % w))
            .unwrap()
            .then(a.cmp(&b))
    });
    let region_len = ((want as f64 / STROKE_FILL).ceil() as usize).clamp(want, total);
    let radius2 = if region_len == 0 {
        -1.0
    } else {
        dist2(order[region_len - 1] / w, order[region_len - 1] % w)
    };
    let inside = |y: f64, x: f64| {
        y >= 0.0 && x >= 0.0 && y < h as f64 && x < w as f64 && {
            let (yi, xi) = (y as usize, x as usize);
            dist2(yi, xi) <= radius2
        }
    };
    let region: Vec<usize> = order.iter().copied().filter(|&i| dist2(i / w, i % w) <= radius2).collect();

    let mut active = 0usize;
    let budget = 50 * total;
    let mut steps = 0usize;
    while active < want && steps < budget {
        let start = region[rng.random_range(0..region.len())];
        let (mut y, mut x) = ((start / w) as f64 + 0.5, (start % w) as f64 + 0.5);
        let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let len = rng.random_range(8..40);
        for _ in 0..len {
            steps += 1;
            if !inside(y, x) {
                break;
            }
            let i = y as usize * w + x as usize;
            if data[i] == 0.0 {
                data[i] = rng.random_range(0.3f32..=1.0);
                active += 1;
                if active == want {
                    break;
                }
            }
            heading += rng.random_range(-0.35..0.35);
            y += heading.sin();
            x += heading.cos();
        }
    }
    if active < want {
        let mut rest: Vec<usize> = region.iter().copied().filter(|&i| data[i] == 0.0).collect();
        rest.shuffle(&mut rng);
        let mut outside: Vec<usize> = (0..total).filter(|&i| data[i] == 0.0 && dist2(i / w, i % w) > radius2).collect();
        outside.shuffle(&mut rng);
        for i in rest.into_iter().chain(outside).take(want - active) {
            data[i] = rng.random_range(0.3f32..=1.0);
        }
    }
    let t = DenseTensor::new(vec![1, h, w], data)?;
    debug_assert!((sparsity(&t, 0.0)? - target_sparsity).abs() <= 0.01);
    Ok(t)
}

/// Writes a single-channel map as binary PGM, values scaled from `[0, 1]`
/// to `0..=255`.
pub fn write_pgm(path: impl AsRef<Path>, map: &DenseTensor) -> Result<()> {
    let (c, h, w) = map.dims3()?;
    if c != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            actual: c,
        });
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        map.data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes)?;
    Ok(())
}
