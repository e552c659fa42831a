//! PSNR and single-scale SSIM.
//!
//! Inputs are frame stacks: any tensor whose last three axes are C×H×W, with
//! all leading axes treated as frames. Both metrics are computed per frame in
//! f64 and averaged over frames.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Tensor};

/// Reported PSNR when the two inputs are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("frames of {h}x{w} are smaller than the {WINDOW}x{WINDOW} SSIM window")]
    TooSmall { h: usize, w: usize },
    #[error("invalid metric input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    /// Average over R, G and B.
    #[default]
    Rgb,
    /// Y of ITU-R BT.601 YCbCr (studio range, scaled back to [0, 1]).
    Luma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub frame_count: usize,
}

struct Frames {
    count: usize,
    channels: usize,
    h: usize,
    w: usize,
}

fn frames_of<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Frames> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let r = a.rank();
    if r < 3 || a.is_empty() {
        return Err(MetricError::Invalid(format!("need a nonempty C×H×W stack, got {:?}", a.shape())));
    }
    let s = a.shape();
    Ok(Frames {
        count: s[..r - 3].iter().product(),
        channels: s[r - 3],
        h: s[r - 2],
        w: s[r - 1],
    })
}

/// Mean over frames of `10·log10(max² / MSE)`; zero-MSE frames count as 99 dB.
pub fn psnr<S: Real>(a: &Tensor<S>, b: &Tensor<S>, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(MetricError::Invalid(format!("max_val {max_val}")));
    }
    let f = frames_of(a, b)?;
    let per = f.channels * f.h * f.w;
    let total: f64 = a
        .data()
        .chunks_exact(per)
        .zip(b.data().chunks_exact(per))
        .map(|(x, y)| {
            let mse = x
                .iter()
                .zip(y)
                .map(|(&p, &q)| (p.f64() - q.f64()).powi(2))
                .sum::<f64>()
                / per as f64;
            if mse == 0.0 {
                PSNR_CAP_DB
            } else {
                (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB)
            }
        })
        .sum();
    Ok(total / f.count as f64)
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian filter over the valid region only.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|k| g[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> f64 {
    let c1 = (K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (K2 * DYNAMIC_RANGE).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, h, w, g);
    let mu_y = filter_valid(y, h, w, g);
    let e_xx = filter_valid(&xx, h, w, g);
    let e_yy = filter_valid(&yy, h, w, g);
    let e_xy = filter_valid(&xy, h, w, g);
    let n = mu_x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    acc / n as f64
}

/// Single-scale SSIM: 11×11 Gaussian window (σ = 1.5), valid region, data
/// range 1, averaged over channels and frames.
pub fn ssim<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    let f = frames_of(a, b)?;
    if f.h < WINDOW || f.w < WINDOW {
        return Err(MetricError::TooSmall { h: f.h, w: f.w });
    }
    let g = gaussian_window();
    let plane = f.h * f.w;
    let to64 = |s: &[S]| s.iter().map(|v| v.f64()).collect::<Vec<_>>();
    let total: f64 = a
        .data()
        .chunks_exact(plane)
        .zip(b.data().chunks_exact(plane))
        .map(|(x, y)| ssim_plane(&to64(x), &to64(y), f.h, f.w, &g))
        .sum();
    Ok(total / (f.count * f.channels) as f64)
}

/// Converts an RGB stack (…×3×H×W) to its Y channel (…×1×H×W).
pub fn to_luma<S: Real>(rgb: &Tensor<S>) -> Result<Tensor<S>> {
    let r = rgb.rank();
    if r < 3 || rgb.shape()[r - 3] != 3 {
        return Err(MetricError::Invalid(format!("expected RGB frames, got {:?}", rgb.shape())));
    }
    let plane = rgb.shape()[r - 2] * rgb.shape()[r - 1];
    let mut out = Vec::with_capacity(rgb.len() / 3);
    for px in rgb.data().chunks_exact(3 * plane) {
        for i in 0..plane {
            let (cr, cg, cb) = (px[i].f64(), px[plane + i].f64(), px[2 * plane + i].f64());
            out.push(S::of((16.0 + 65.481 * cr + 128.553 * cg + 24.966 * cb) / 255.0));
        }
    }
    let mut shape = rgb.shape().to_vec();
    shape[r - 3] = 1;
    Tensor::from_vec(&shape, out).map_err(|e| MetricError::Invalid(e.to_string()))
}

pub fn evaluate<S: Real>(pred: &Tensor<S>, target: &Tensor<S>, mode: ColorMode) -> Result<MetricReport> {
    let frame_count = frames_of(pred, target)?.count;
    let (p, t) = match mode {
        ColorMode::Rgb => (pred.clone(), target.clone()),
        ColorMode::Luma => (to_luma(pred)?, to_luma(target)?),
    };
    Ok(MetricReport {
        psnr_db: psnr(&p, &t, 1.0)?,
        ssim: ssim(&p, &t)?,
        frame_count,
    })
}

/// Frame-weighted mean of several reports.
pub fn combine(reports: &[MetricReport]) -> Option<MetricReport> {
    let frames: usize = reports.iter().map(|r| r.frame_count).sum();
    if frames == 0 {
        return None;
    }
    let w = |f: fn(&MetricReport) -> f64| {
        reports.iter().map(|r| f(r) * r.frame_count as f64).sum::<f64>() / frames as f64
    };
    Some(MetricReport {
        psnr_db: w(|r| r.psnr_db),
        ssim: w(|r| r.ssim),
        frame_count: frames,
    })
}
