//! Perturbation visibility metrics.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::dim(
            op,
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("mse", a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10·log10(1 / MSE)` over all channels with peak 1.0; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * e.log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx / total);
        }
    }
    w
}

/// Mean SSIM on the Rec. 601 luma plane with an 11×11 Gaussian window
/// (σ = 1.5), `K1 = 0.01`, `K2 = 0.03` and dynamic range 1.0. Only windows
/// fully inside the image contribute.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("ssim", a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(
            "ssim",
            format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let (ya, yb) = (a.luma(), b.luma());
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;

    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wt = win[dy * SSIM_WINDOW + dx];
                    let i = (y0 + dy) * w + x0 + dx;
                    let (pa, pb) = (ya[i], yb[i]);
                    ma += wt * pa;
                    mb += wt * pb;
                    saa += wt * (pa * pa);
                    sbb += wt * (pb * pb);
                    sab += wt * (pa * pb);
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn psnr_json<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityEntry {
    pub reference: String,
    pub candidate: String,
    #[serde(serialize_with = "psnr_json")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct QualityReport {
    pub pairs: Vec<QualityEntry>,
}

impl QualityReport {
    pub fn push(&mut self, reference: impl Into<String>, candidate: impl Into<String>, a: &Image, b: &Image) -> Result<()> {
        self.pairs.push(QualityEntry {
            reference: reference.into(),
            candidate: candidate.into(),
            psnr_db: psnr(a, b)?,
            ssim: ssim(a, b)?,
        });
        Ok(())
    }

    /// Mean PSNR over pairs with finite PSNR.
    pub fn mean_psnr_db(&self) -> Option<f64> {
        let finite: Vec<f64> = self.pairs.iter().map(|p| p.psnr_db).filter(|v| v.is_finite()).collect();
        (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        (!self.pairs.is_empty()).then(|| self.pairs.iter().map(|p| p.ssim).sum::<f64>() / self.pairs.len() as f64)
    }
}
