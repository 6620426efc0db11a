//! Real-valued RGB images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// `height × width × 3` image, row-major with interleaved channels, values
/// nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("Image::new", "empty image"));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::dim(
                "Image::new",
                format!("{height}x{width}x3 needs {} values, got {}", height * width * CHANNELS, data.len()),
            ));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image { height, width, data: vec![value; height * width * CHANNELS] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Side length of a square image.
    pub fn square_size(&self) -> Result<usize> {
        if self.height != self.width {
            return Err(Error::dim(
                "square image",
                format!("{}x{} is not square", self.height, self.width),
            ));
        }
        Ok(self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// `[height, width, 3]` tensor with the same data.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, CHANNELS], self.data.clone())
            .expect("image buffer matches its shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, CHANNELS] => Image::new(h, w, t.data().to_vec()),
            _ => Err(Error::dim("Image::from_tensor", format!("shape {:?}", t.shape()))),
        }
    }

    /// Largest absolute per-element difference.
    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_within_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Rec. 601 luma plane.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }
}

/// Deterministic pseudo-natural test scene: a smooth two-color gradient with
/// a handful of soft colored blobs and mild pixel noise.
pub fn synthetic_scene(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { [rng.random(), rng.random(), rng.random()] };
    let top = color(&mut rng);
    let bottom = color(&mut rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let blobs: Vec<([f64; 3], f64, f64, f64)> = (0..rng.random_range(3..7))
        .map(|_| {
            let c = color(&mut rng);
            let cy = rng.random_range(0.0..1.0);
            let cx = rng.random_range(0.0..1.0);
            let r = rng.random_range(0.08..0.3);
            (c, cy, cx, r)
        })
        .collect();
    let noise: Vec<f64> = (0..size * size * CHANNELS)
        .map(|_| rng.random_range(-0.03..0.03))
        .collect();

    let s = size as f64;
    let (dy, dx) = (angle.sin(), angle.cos());
    Image::from_fn(size, size, |y, x, c| {
        let (fy, fx) = ((y as f64 + 0.5) / s, (x as f64 + 0.5) / s);
        let t = (0.5 + 0.5 * ((fy - 0.5) * dy + (fx - 0.5) * dx) * std::f64::consts::SQRT_2).clamp(0.0, 1.0);
        let mut v = top[c] * (1.0 - t) + bottom[c] * t;
        for (bc, cy, cx, r) in &blobs {
            let d2 = (fy - cy).powi(2) + (fx - cx).powi(2);
            let w = (-d2 / (2.0 * r * r)).exp();
            v = v * (1.0 - w) + bc[c] * w;
        }
        (v + noise[(y * size + x) * CHANNELS + c]).clamp(0.0, 1.0)
    })
}
