//! Progressive resolution processing: the stage schedule and stage-wise
//! target synthesis by down-then-up resampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Partition of `iterations` steps into `M = resolutions.len()` stages with
/// ascending target resolutions ending at the image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    iterations: usize,
    resolutions: Vec<usize>,
}

impl StageSchedule {
    pub fn new(iterations: usize, resolutions: Vec<usize>, image_size: usize) -> Result<Self> {
        let stages = resolutions.len();
        if stages == 0 {
            return Err(Error::Config("schedule needs at least one stage".into()));
        }
        if iterations < stages {
            return Err(Error::Config(format!(
                "iterations ({iterations}) must be at least the stage count ({stages})"
            )));
        }
        if resolutions[0] == 0 || resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "resolutions must be positive and strictly ascending, got {resolutions:?}"
            )));
        }
        if resolutions[stages - 1] != image_size {
            return Err(Error::Config(format!(
                "last resolution must equal the image size {image_size}, got {resolutions:?}"
            )));
        }
        Ok(StageSchedule { iterations, resolutions })
    }

    /// `{H/2^(M-1), …, H/2, H}`; for `M = 3` this is `{H/4, H/2, H}`.
    pub fn halving_resolutions(image_size: usize, stages: usize) -> Result<Vec<usize>> {
        if stages == 0 || stages > usize::BITS as usize {
            return Err(Error::Config(format!("invalid stage count {stages}")));
        }
        let res: Vec<usize> = (0..stages).rev().map(|k| image_size >> k).collect();
        if res[0] == 0 {
            return Err(Error::Config(format!(
                "image size {image_size} too small for {stages} halving stages"
            )));
        }
        Ok(res)
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn stages(&self) -> usize {
        self.resolutions.len()
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    /// Resolution of stage `m` (1-based).
    pub fn resolution(&self, m: usize) -> Result<usize> {
        m.checked_sub(1)
            .and_then(|i| self.resolutions.get(i).copied())
            .ok_or_else(|| Error::Contract(format!("stage {m} outside 1..={}", self.stages())))
    }

    pub fn stage_index(&self, t: usize) -> Result<usize> {
        stage_index(t, self)
    }
}

/// Stage of iteration `t ∈ [1, T]`: `min(⌊(t−1)·M/T⌋ + 1, M)`.
pub fn stage_index(t: usize, schedule: &StageSchedule) -> Result<usize> {
    let (total, stages) = (schedule.iterations, schedule.stages());
    if t == 0 || t > total {
        return Err(Error::Contract(format!("iteration {t} outside 1..={total}")));
    }
    Ok(((t - 1) * stages / total + 1).min(stages))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Nearest,
    Bilinear,
    Bicubic,
}

/// Pixel-center nearest-neighbor source index: `⌊(i + 0.5)·in/out⌋`, clamped.
pub fn nearest_index(i: usize, in_len: usize, out_len: usize) -> usize {
    (((2 * i + 1) * in_len) / (2 * out_len)).min(in_len - 1)
}

/// Nearest-neighbor resize to `out_size × out_size`.
pub fn nearest_resize(image: &Image, out_size: usize) -> Result<Image> {
    resize(image, out_size, Interpolation::Nearest)
}

pub fn resize(image: &Image, out_size: usize, method: Interpolation) -> Result<Image> {
    if out_size == 0 {
        return Err(Error::Contract("resize target must be at least 1 pixel".into()));
    }
    let (h, w) = (image.height(), image.width());
    Ok(match method {
        Interpolation::Nearest => {
            let ys: Vec<usize> = (0..out_size).map(|i| nearest_index(i, h, out_size)).collect();
            let xs: Vec<usize> = (0..out_size).map(|j| nearest_index(j, w, out_size)).collect();
            Image::from_fn(out_size, out_size, |y, x, c| image.get(ys[y], xs[x], c))
        }
        Interpolation::Bilinear => separable(image, out_size, 2, |t| (1.0 - t.abs()).max(0.0)),
        Interpolation::Bicubic => separable(image, out_size, 4, keys_cubic),
    })
}

/// Keys cubic kernel with `a = -0.5`.
fn keys_cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        (((t - 5.0) * t + 8.0) * t - 4.0) * A
    } else {
        0.0
    }
}

struct Taps {
    index: Vec<usize>,
    weight: Vec<f64>,
}

fn axis_taps(in_len: usize, out_len: usize, support: usize, kernel: impl Fn(f64) -> f64) -> Vec<Taps> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * ratio - 0.5;
            let first = center.floor() as isize - (support as isize / 2 - 1);
            let mut index = Vec::with_capacity(support);
            let mut weight = Vec::with_capacity(support);
            for k in 0..support as isize {
                let src = first + k;
                weight.push(kernel(center - src as f64));
                index.push(src.clamp(0, in_len as isize - 1) as usize);
            }
            let total: f64 = weight.iter().sum();
            weight.iter_mut().for_each(|w| *w /= total);
            Taps { index, weight }
        })
        .collect()
}

fn separable(image: &Image, out: usize, support: usize, kernel: impl Fn(f64) -> f64 + Copy) -> Image {
    let (h, w) = (image.height(), image.width());
    let xt = axis_taps(w, out, support, kernel);
    let yt = axis_taps(h, out, support, kernel);
    // Horizontal pass: h × out.
    let mut tmp = vec![0.0; h * out * CHANNELS];
    for y in 0..h {
        for (x, taps) in xt.iter().enumerate() {
            for c in 0..CHANNELS {
                tmp[(y * out + x) * CHANNELS + c] = taps
                    .index
                    .iter()
                    .zip(&taps.weight)
                    .map(|(&sx, wt)| wt * image.get(y, sx, c))
                    .sum();
            }
        }
    }
    Image::from_fn(out, out, |y, x, c| {
        let taps = &yt[y];
        let v: f64 = taps
            .index
            .iter()
            .zip(&taps.weight)
            .map(|(&sy, wt)| wt * tmp[(sy * out + x) * CHANNELS + c])
            .sum();
        v.clamp(0.0, 1.0)
    })
}

/// Stage target `T_{R}(x)`: nearest down-resize to `R×R`, then nearest
/// up-resize back to `H×H`.
pub fn synthesize_stage_target(target: &Image, resolution: usize, image_size: usize) -> Result<Image> {
    synthesize_stage_target_with(target, resolution, image_size, Interpolation::Nearest, Interpolation::Nearest)
}

/// [`synthesize_stage_target`] with configurable resampling for each leg.
pub fn synthesize_stage_target_with(
    target: &Image,
    resolution: usize,
    image_size: usize,
    down: Interpolation,
    up: Interpolation,
) -> Result<Image> {
    if resolution > image_size {
        return Err(Error::Config(format!(
            "stage resolution {resolution} exceeds image size {image_size}"
        )));
    }
    let small = resize(target, resolution, down)?;
    resize(&small, image_size, up)
}
