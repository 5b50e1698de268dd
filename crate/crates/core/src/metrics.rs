//! Reconstruction metrics on `[0, 1]` frames.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for a perfect prediction.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse", pred.shape(), target.shape()));
    }
    let n = pred.numel().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(max^2 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP)
}

pub fn psnr(pred: &Tensor, target: &Tensor, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?, max_val))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect()
}

fn ssim_stats(x: &[f64], y: &[f64], weights: &[f64]) -> f64 {
    let (mut mx, mut my) = (0.0, 0.0);
    for ((a, b), w) in x.iter().zip(y).zip(weights) {
        mx += w * a;
        my += w * b;
    }
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for ((a, b), w) in x.iter().zip(y).zip(weights) {
        vx += w * (a - mx) * (a - mx);
        vy += w * (b - my) * (b - my);
        cxy += w * (a - mx) * (b - my);
    }
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// SSIM of one `h x w` image pair: mean over all valid 11x11 Gaussian
/// windows, or one uniform whole-frame window when the frame is smaller.
pub fn ssim_image(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let u = vec![1.0 / (h * w) as f64; h * w];
        return ssim_stats(x, y, &u);
    }
    let win = gaussian_window();
    let mut px = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut py = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut total = 0.0;
    let (ny, nx) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    for oy in 0..ny {
        for ox in 0..nx {
            for i in 0..SSIM_WINDOW {
                let src = (oy + i) * w + ox;
                px[i * SSIM_WINDOW..(i + 1) * SSIM_WINDOW].copy_from_slice(&x[src..src + SSIM_WINDOW]);
                py[i * SSIM_WINDOW..(i + 1) * SSIM_WINDOW].copy_from_slice(&y[src..src + SSIM_WINDOW]);
            }
            total += ssim_stats(&px, &py, &win);
        }
    }
    total / (ny * nx) as f64
}

/// Mean SSIM over every `H x W` plane of two equally shaped tensors.
pub fn ssim(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.ndim() < 2 {
        return Err(Error::shape("ssim", pred.shape(), target.shape()));
    }
    let s = pred.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let plane = h * w;
    let planes = pred.numel() / plane.max(1);
    if planes == 0 {
        return Ok(1.0);
    }
    let total: f64 = pred
        .data()
        .chunks(plane)
        .zip(target.data().chunks(plane))
        .map(|(a, b)| ssim_image(a, b, h, w))
        .sum();
    Ok(total / planes as f64)
}
