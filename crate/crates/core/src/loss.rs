//! Photometric losses and depth-based gradient scaling.
//!
//! The robust loss follows the iteratively reweighted least squares recipe:
//! an inlier mask is computed from the current residuals of whole 16x16
//! patches, then held constant while the masked L2 loss is differentiated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PixelId, SampleSet};

pub const PATCH_SIZE: usize = 16;
pub const BLOCK_SIZE: usize = 8;
const PATCH_PIXELS: usize = PATCH_SIZE * PATCH_SIZE;

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub d_rgb: Vec<[f64; 3]>,
}

fn check_pair(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

pub fn squared_error(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

/// Mean over rays of the squared color error.
pub fn l2_loss(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<LossOutput> {
    masked_l2(pred, gt, None)
}

fn masked_l2(pred: &[[f64; 3]], gt: &[[f64; 3]], weights: Option<&[f64]>) -> Result<LossOutput> {
    check_pair(pred, gt)?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut d_rgb = Vec::with_capacity(pred.len());
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        let m = weights.map_or(1.0, |w| w[i]);
        loss += m * squared_error(p, g);
        d_rgb.push([0, 1, 2].map(|c| m * 2.0 * (p[c] - g[c]) / n));
    }
    Ok(LossOutput { loss: loss / n, d_rgb })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    pub enabled: bool,
    /// Minimum inlier fraction of a block's neighborhood.
    pub t_r: f64,
    /// Quantile of blurred residuals that separates inlier pixels.
    pub quantile: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig {
            enabled: false,
            t_r: 0.6,
            quantile: 0.5,
        }
    }
}

/// Residuals of a batch of 16x16 patches, row-major inside each patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub residuals: Vec<f64>,
    pub inlier_mask: Vec<bool>,
    pub origins: Vec<PixelId>,
}

impl PatchBatch {
    pub fn new(residuals: Vec<f64>, origins: Vec<PixelId>) -> Result<Self> {
        if residuals.len() != origins.len() * PATCH_PIXELS || origins.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} residuals do not form {} patches of {PATCH_SIZE}x{PATCH_SIZE}",
                residuals.len(),
                origins.len()
            )));
        }
        if let Some(r) = residuals.iter().find(|r| !(**r >= 0.0)) {
            return Err(Error::InvalidArgument(format!("residual {r} is not a nonnegative number")));
        }
        Ok(PatchBatch {
            inlier_mask: vec![true; residuals.len()],
            residuals,
            origins,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.origins.len()
    }
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn box_blur_patch(src: &[f64], dst: &mut [f64]) {
    let n = PATCH_SIZE as isize;
    let clamp = |v: isize| v.clamp(0, n - 1) as usize;
    for r in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    acc += src[clamp(r + dr) * PATCH_SIZE + clamp(c + dc)];
                }
            }
            dst[(r * n + c) as usize] = acc / 9.0;
        }
    }
}

/// Computes the inlier mask of every patch and stores it in `patches`.
/// Returns the per-pixel weights (1 inlier, 0 outlier).
pub fn robust_mask(patches: &mut PatchBatch, cfg: &RobustConfig) -> Result<Vec<f64>> {
    if patches.residuals.len() != patches.patch_count() * PATCH_PIXELS || patches.origins.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "robust mask needs {PATCH_SIZE}x{PATCH_SIZE} patches, got {} residuals for {} patches",
            patches.residuals.len(),
            patches.patch_count()
        )));
    }
    // 1. smooth residuals inside each patch
    let mut blurred = vec![0.0; patches.residuals.len()];
    for (src, dst) in patches
        .residuals
        .chunks_exact(PATCH_PIXELS)
        .zip(blurred.chunks_exact_mut(PATCH_PIXELS))
    {
        box_blur_patch(src, dst);
    }
    // 2. pixel labels against the batch quantile; ties count as inliers
    let threshold = quantile(&blurred, cfg.quantile);
    let labels: Vec<f64> = blurred.iter().map(|&b| if b <= threshold { 1.0 } else { 0.0 }).collect();

    // 3. each 8x8 block looks at the 16x16 window centered on it, clipped to the patch
    let half = (PATCH_SIZE - BLOCK_SIZE) / 2;
    let blocks = PATCH_SIZE / BLOCK_SIZE;
    let mut weights = vec![0.0; labels.len()];
    for (p, lab) in labels.chunks_exact(PATCH_PIXELS).enumerate() {
        for bi in 0..blocks {
            for bj in 0..blocks {
                let r0 = (bi * BLOCK_SIZE).saturating_sub(half);
                let r1 = (bi * BLOCK_SIZE + BLOCK_SIZE + half).min(PATCH_SIZE);
                let c0 = (bj * BLOCK_SIZE).saturating_sub(half);
                let c1 = (bj * BLOCK_SIZE + BLOCK_SIZE + half).min(PATCH_SIZE);
                let mut sum = 0.0;
                for r in r0..r1 {
                    sum += lab[r * PATCH_SIZE + c0..r * PATCH_SIZE + c1].iter().sum::<f64>();
                }
                let mean = sum / ((r1 - r0) * (c1 - c0)) as f64;
                let keep = if mean >= cfg.t_r { 1.0 } else { 0.0 };
                // 4. every pixel of the block takes the block's label
                for r in bi * BLOCK_SIZE..(bi + 1) * BLOCK_SIZE {
                    for c in bj * BLOCK_SIZE..(bj + 1) * BLOCK_SIZE {
                        weights[p * PATCH_PIXELS + r * PATCH_SIZE + c] = keep;
                    }
                }
            }
        }
    }
    patches.inlier_mask = weights.iter().map(|&w| w > 0.0).collect();
    Ok(weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustLossOutput {
    pub loss: f64,
    pub d_rgb: Vec<[f64; 3]>,
    pub patches: PatchBatch,
    pub weights: Vec<f64>,
}

/// Masked L2 over patch-sampled rays. `patch_origins` gives the top-left pixel
/// of each patch; rays must be ordered patch by patch, row-major.
pub fn robust_loss(
    pred: &[[f64; 3]],
    gt: &[[f64; 3]],
    patch_origins: Option<&[PixelId]>,
    cfg: &RobustConfig,
) -> Result<RobustLossOutput> {
    let origins = patch_origins
        .ok_or_else(|| Error::InvalidArgument("robust loss requires patch-sampled rays".into()))?;
    check_pair(pred, gt)?;
    let residuals = pred.iter().zip(gt).map(|(p, g)| squared_error(p, g)).collect();
    let mut patches = PatchBatch::new(residuals, origins.to_vec())?;
    let weights = robust_mask(&mut patches, cfg)?;
    let LossOutput { loss, d_rgb } = masked_l2(pred, gt, Some(&weights))?;
    Ok(RobustLossOutput {
        loss,
        d_rgb,
        patches,
        weights,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgsConfig {
    pub enabled: bool,
    /// Mean sample distance above which scaling is applied, world units.
    pub t_h: f64,
    /// Camera position; when absent each ray's origin is used.
    pub camera_origin: Option<[f64; 3]>,
    /// Skip the depth gate and always scale.
    pub force_open: bool,
}

impl Default for DgsConfig {
    fn default() -> Self {
        DgsConfig {
            enabled: false,
            t_h: 0.02,
            camera_origin: None,
            force_open: false,
        }
    }
}

/// Per-sample gradient multipliers `min(1, |c - p|^2)`, applied only when the
/// batch-mean camera distance exceeds the threshold.
pub fn dgs_scale(samples: &SampleSet, cfg: &DgsConfig) -> Result<Vec<f64>> {
    if !(cfg.t_h > 0.0) {
        return Err(Error::InvalidArgument(format!("dgs threshold must be positive, got {}", cfg.t_h)));
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let mut dist = Vec::with_capacity(samples.len());
    for r in 0..samples.n_rays() {
        let c = cfg.camera_origin.map_or(samples.origins[r], Into::into);
        for i in samples.range(r) {
            dist.push((samples.positions[i] - c).norm());
        }
    }
    let mean = dist.iter().sum::<f64>() / dist.len() as f64;
    if cfg.force_open || mean > cfg.t_h {
        Ok(dist.iter().map(|d| (d * d).min(1.0)).collect())
    } else {
        Ok(vec![1.0; dist.len()])
    }
}
