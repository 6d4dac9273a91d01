//! Image quality metrics, optionally restricted to a pixel mask, and the
//! per-run metric report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(pred: &Image, gt: &Image, mask: Option<&Mask>) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    if let Some(m) = mask {
        if m.width != gt.width || m.height != gt.height {
            return Err(Error::ShapeMismatch(format!(
                "mask is {}x{}, image {}x{}",
                m.width, m.height, gt.width, gt.height
            )));
        }
    }
    Ok(())
}

/// Mean squared error over all channels of the selected pixels.
pub fn mse(pred: &Image, gt: &Image, mask: Option<&Mask>) -> Result<f64> {
    check_shapes(pred, gt, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (p, g)) in pred.pixels.iter().zip(&gt.pixels).enumerate() {
        if mask.is_some_and(|m| !m.values[i]) {
            continue;
        }
        sum += (0..3).map(|c| (p[c] - g[c]).powi(2)).sum::<f64>();
        n += 3;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("mask selects no pixels".into()));
    }
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`; infinite on an exact match.
pub fn psnr(pred: &Image, gt: &Image, mask: Option<&Mask>) -> Result<f64> {
    let e = mse(pred, gt, mask)?;
    Ok(if e == 0.0 { f64::INFINITY } else { -10.0 * e.log10() })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), computed
/// at every window center that fits inside the image and averaged over the
/// three channels. With a mask, only centers on selected pixels count.
pub fn ssim(pred: &Image, gt: &Image, mask: Option<&Mask>) -> Result<f64> {
    check_shapes(pred, gt, mask)?;
    let (w, h) = (gt.width, gt.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, image is {w}x{h}"
        )));
    }
    let k = gaussian_kernel();
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut n = 0usize;
    for row in half..h - half {
        for col in half..w - half {
            if mask.is_some_and(|m| !m.values[row * w + col]) {
                continue;
            }
            for c in 0..3 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, ky) in k.iter().enumerate() {
                    for (dx, kx) in k.iter().enumerate() {
                        let idx = (row + dy - half) * w + col + dx - half;
                        let wgt = ky * kx;
                        let x = pred.pixels[idx][c];
                        let y = gt.pixels[idx][c];
                        mx += wgt * x;
                        my += wgt * y;
                        xx += wgt * x * x;
                        yy += wgt * y * y;
                        xy += wgt * x * y;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("mask selects no valid ssim window centers".into()));
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_id: usize,
    pub renderer: String,
    pub psnr_full: f64,
    pub psnr_static: f64,
    pub ssim_full: f64,
    pub ssim_static: f64,
}

impl FrameMetrics {
    pub fn compute(frame_id: usize, renderer: &str, pred: &Image, gt: &Image, static_mask: &Mask) -> Result<Self> {
        Ok(FrameMetrics {
            frame_id,
            renderer: renderer.to_string(),
            psnr_full: psnr(pred, gt, None)?,
            psnr_static: psnr(pred, gt, Some(static_mask))?,
            ssim_full: ssim(pred, gt, None)?,
            ssim_static: ssim(pred, gt, Some(static_mask))?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    pub fn mean(&self, f: impl Fn(&FrameMetrics) -> f64) -> f64 {
        if self.frames.is_empty() {
            return f64::NAN;
        }
        self.frames.iter().map(f).sum::<f64>() / self.frames.len() as f64
    }

    pub fn mean_psnr_static(&self) -> f64 {
        self.mean(|m| m.psnr_static)
    }

    pub fn mean_psnr_full(&self) -> f64 {
        self.mean(|m| m.psnr_full)
    }

    /// CSV with one row per frame and a trailing `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame_id,renderer,psnr_full,psnr_static,ssim_full,ssim_static\n");
        for m in &self.frames {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                m.frame_id,
                m.renderer,
                fmt_metric(m.psnr_full),
                fmt_metric(m.psnr_static),
                fmt_metric(m.ssim_full),
                fmt_metric(m.ssim_static)
            );
        }
        let renderer = self.frames.first().map(|m| m.renderer.as_str()).unwrap_or("");
        let _ = writeln!(
            s,
            "mean,{},{},{},{},{}",
            renderer,
            fmt_metric(self.mean(|m| m.psnr_full)),
            fmt_metric(self.mean(|m| m.psnr_static)),
            fmt_metric(self.mean(|m| m.ssim_full)),
            fmt_metric(self.mean(|m| m.ssim_static))
        );
        s
    }
}

/// Connected groups (4-neighborhood) of pixels whose channel-max absolute
/// difference from `reference` exceeds `threshold`, returned largest first.
pub fn deviation_clusters(pred: &Image, reference: &Image, threshold: f64) -> Result<Vec<usize>> {
    check_shapes(pred, reference, None)?;
    let (w, h) = (pred.width, pred.height);
    let hot: Vec<bool> = pred
        .pixels
        .iter()
        .zip(&reference.pixels)
        .map(|(p, r)| (0..3).any(|c| (p[c] - r[c]).abs() > threshold))
        .collect();
    let mut seen = vec![false; w * h];
    let mut sizes = Vec::new();
    for start in 0..w * h {
        if !hot[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (r, c) = (i / w, i % w);
            let mut push = |j: usize| {
                if hot[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                push(i - w);
            }
            if r + 1 < h {
                push(i + w);
            }
            if c > 0 {
                push(i - 1);
            }
            if c + 1 < w {
                push(i + 1);
            }
        }
        sizes.push(size);
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    Ok(sizes)
}
