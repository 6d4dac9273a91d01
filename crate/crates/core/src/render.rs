//! Volume rendering: the standard transmittance-weighted compositor and the
//! single-surface compositor that replaces the weight profile of each ray by
//! a clamped Gaussian around its median depth.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldOutputs;
use crate::geometry::SampleSet;
use crate::loss::{dgs_scale, DgsConfig};

pub const DEPTH_EPS: f64 = 1e-10;
/// Cumulative weight a ray must exceed to have a surface.
pub const MEDIAN_LEVEL: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RendererKind {
    Baseline,
    SingleSurface,
}

impl std::str::FromStr for RendererKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(RendererKind::Baseline),
            "single_surface" => Ok(RendererKind::SingleSurface),
            other => Err(Error::InvalidArgument(format!(
                "unknown renderer `{other}` (expected baseline or single_surface)"
            ))),
        }
    }
}

impl std::fmt::Display for RendererKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RendererKind::Baseline => "baseline",
            RendererKind::SingleSurface => "single_surface",
        })
    }
}

/// Shape of the redistributed weight profile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceParams {
    /// Standard deviation of the Gaussian, world units.
    pub eta: f64,
    /// Offset added to the Gaussian density before clamping to its peak.
    pub base: f64,
    /// Divide the final weights of each ray by their sum.
    pub normalize_weights: bool,
}

impl Default for SurfaceParams {
    fn default() -> Self {
        SurfaceParams {
            eta: 0.5,
            base: 0.2,
            normalize_weights: false,
        }
    }
}

impl SurfaceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.base >= 0.0) {
            return Err(Error::InvalidArgument(format!("base must be nonnegative, got {}", self.base)));
        }
        Ok(())
    }

    pub fn peak(&self) -> f64 {
        1.0 / ((2.0 * std::f64::consts::PI).sqrt() * self.eta)
    }
}

/// Per-sample weights at every stage, flat with the sample set's stride.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightProfile {
    /// Raw weights `T_i (1 - exp(-sigma_i delta_i))`.
    pub w: Vec<f64>,
    /// Inclusive cumulative sums of `w` per ray.
    pub omega: Vec<f64>,
    /// Transmittance left after the last sample of each ray.
    pub transmittance: Vec<f64>,
    /// Median depth per ray; NaN when no surface was found.
    pub mu_t: Vec<f64>,
    /// Index of the first sample whose cumulative weight exceeds one half.
    pub crossing: Vec<Option<usize>>,
    pub surface_found: Vec<bool>,
    /// Weights actually used to composite color.
    pub w_hat: Vec<f64>,
    /// Sum of the unnormalized single-surface weights per ray (1 when unused).
    pub weight_sum: Vec<f64>,
    /// Compositor that produced `w_hat`; `None` until a render pass ran.
    pub renderer: Option<(RendererKind, SurfaceParams)>,
}

impl WeightProfile {
    pub fn surface_found_count(&self) -> usize {
        self.surface_found.iter().filter(|&&f| f).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderOutput {
    pub rgb: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub accumulation: Vec<f64>,
    /// True for rays rendered with the standard compositor because no surface was found.
    pub fallback: Vec<bool>,
}

fn check_shapes(samples: &SampleSet, len: usize, what: &str) -> Result<()> {
    if len != samples.len() {
        return Err(Error::ShapeMismatch(format!(
            "{len} {what} for {} samples",
            samples.len()
        )));
    }
    Ok(())
}

/// Discrete transmittance weights and their running sums.
pub fn compute_weights(samples: &SampleSet, sigma: &[f64]) -> Result<WeightProfile> {
    check_shapes(samples, sigma.len(), "densities")?;
    if let Some(i) = sigma.iter().position(|s| !(*s >= 0.0)) {
        return Err(Error::NegativeDensity {
            sample: i,
            value: sigma[i],
        });
    }
    let n = samples.per_ray;
    let mut w = vec![0.0_f64; samples.len()];
    let mut omega = vec![0.0; samples.len()];
    let transmittance: Vec<f64> = w
        .par_chunks_mut(n)
        .zip(omega.par_chunks_mut(n))
        .enumerate()
        .map(|(r, (w, omega))| {
            let range = samples.range(r);
            ray_weights(&sigma[range.clone()], &samples.delta[range], w, omega)
        })
        .collect();
    let n_rays = samples.n_rays();
    Ok(WeightProfile {
        w_hat: w.clone(),
        w,
        omega,
        transmittance,
        mu_t: vec![f64::NAN; n_rays],
        crossing: vec![None; n_rays],
        surface_found: vec![false; n_rays],
        weight_sum: vec![1.0; n_rays],
        renderer: None,
    })
}

fn ray_weights(sigma: &[f64], delta: &[f64], w: &mut [f64], omega: &mut [f64]) -> f64 {
    let mut optical = 0.0_f64;
    let mut cum = 0.0;
    for i in 0..sigma.len() {
        let tau = sigma[i] * delta[i];
        w[i] = (-optical).exp() * -(-tau).exp_m1();
        optical += tau;
        cum += w[i];
        omega[i] = cum;
    }
    (-optical).exp()
}

/// Median depth of one ray: linear interpolation inside the first interval
/// where the cumulative weight exceeds one half. Returns the depth and the
/// crossing index.
pub fn median_depth_ray(w: &[f64], omega: &[f64], t: &[f64], t_near: f64) -> Option<(f64, usize)> {
    let k = omega.iter().position(|&o| o > MEDIAN_LEVEL)?;
    let (t_prev, omega_prev) = if k == 0 { (t_near, 0.0) } else { (t[k - 1], omega[k - 1]) };
    let mu = t_prev + (MEDIAN_LEVEL - omega_prev) / w[k] * (t[k] - t_prev);
    Some((mu, k))
}

/// Fills `mu_t`, `crossing` and `surface_found` of a profile.
pub fn median_depth(profile: &mut WeightProfile, samples: &SampleSet) -> Result<()> {
    check_shapes(samples, profile.w.len(), "weights")?;
    for r in 0..samples.n_rays() {
        let range = samples.range(r);
        let found = median_depth_ray(
            &profile.w[range.clone()],
            &profile.omega[range.clone()],
            &samples.t[range],
            samples.t_near[r],
        );
        profile.mu_t[r] = found.map_or(f64::NAN, |(mu, _)| mu);
        profile.crossing[r] = found.map(|(_, k)| k);
        profile.surface_found[r] = found.is_some();
    }
    Ok(())
}

/// Gaussian density of depth `t` around `mu`.
pub fn gaussian_density(t: f64, mu: f64, eta: f64) -> f64 {
    let z = (t - mu) / eta;
    (-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * eta)
}

/// Final render weights `min(peak, gaussian + base) * delta` for one ray.
pub fn gaussian_weights(t: &[f64], delta: &[f64], mu: f64, eta: f64, base: f64) -> Result<Vec<f64>> {
    let params = SurfaceParams {
        eta,
        base,
        normalize_weights: false,
    };
    params.validate()?;
    if t.len() != delta.len() {
        return Err(Error::ShapeMismatch(format!("{} depths, {} intervals", t.len(), delta.len())));
    }
    let peak = params.peak();
    Ok(t.iter()
        .zip(delta)
        .map(|(&ti, &di)| peak.min(gaussian_density(ti, mu, eta) + base) * di)
        .collect())
}

fn composite(w: &[f64], rgb: &[[f64; 3]]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (wi, ci) in w.iter().zip(rgb) {
        for ch in 0..3 {
            out[ch] += wi * ci[ch];
        }
    }
    out
}

fn check_outputs(samples: &SampleSet, out: &FieldOutputs) -> Result<()> {
    check_shapes(samples, out.sigma.len(), "densities")?;
    check_shapes(samples, out.rgb.len(), "colors")
}

/// Standard compositing: color is the weight-averaged sample color, depth the
/// weight-averaged sample depth.
pub fn render_baseline(samples: &SampleSet, out: &FieldOutputs) -> Result<(RenderOutput, WeightProfile)> {
    check_outputs(samples, out)?;
    let mut profile = compute_weights(samples, &out.sigma)?;
    median_depth(&mut profile, samples)?;
    profile.renderer = Some((RendererKind::Baseline, SurfaceParams::default()));
    let n_rays = samples.n_rays();
    let mut result = RenderOutput {
        rgb: Vec::with_capacity(n_rays),
        depth: Vec::with_capacity(n_rays),
        accumulation: Vec::with_capacity(n_rays),
        fallback: vec![false; n_rays],
    };
    for r in 0..n_rays {
        let (rgb, depth, acc) = baseline_ray(samples, &profile.w, out, r);
        result.rgb.push(rgb);
        result.depth.push(depth);
        result.accumulation.push(acc);
    }
    Ok((result, profile))
}

fn baseline_ray(samples: &SampleSet, w: &[f64], out: &FieldOutputs, r: usize) -> ([f64; 3], f64, f64) {
    let range = samples.range(r);
    let w = &w[range.clone()];
    let acc: f64 = w.iter().sum();
    let depth = w.iter().zip(&samples.t[range.clone()]).map(|(a, b)| a * b).sum::<f64>() / acc.max(DEPTH_EPS);
    (composite(w, &out.rgb[range]), depth, acc)
}

/// Single-surface compositing. Rays without a surface fall back to the
/// standard compositor and are flagged in the output.
pub fn render_single_surface(
    samples: &SampleSet,
    out: &FieldOutputs,
    params: &SurfaceParams,
) -> Result<(RenderOutput, WeightProfile)> {
    params.validate()?;
    check_outputs(samples, out)?;
    let mut profile = compute_weights(samples, &out.sigma)?;
    median_depth(&mut profile, samples)?;
    let peak = params.peak();
    let n_rays = samples.n_rays();
    let mut result = RenderOutput {
        rgb: Vec::with_capacity(n_rays),
        depth: Vec::with_capacity(n_rays),
        accumulation: Vec::with_capacity(n_rays),
        fallback: Vec::with_capacity(n_rays),
    };
    for r in 0..n_rays {
        let range = samples.range(r);
        if !profile.surface_found[r] {
            let (rgb, depth, acc) = baseline_ray(samples, &profile.w, out, r);
            result.rgb.push(rgb);
            result.depth.push(depth);
            result.accumulation.push(acc);
            result.fallback.push(true);
            continue;
        }
        let mu = profile.mu_t[r];
        let w_hat = &mut profile.w_hat[range.clone()];
        for (i, wh) in range.clone().zip(w_hat.iter_mut()) {
            *wh = peak.min(gaussian_density(samples.t[i], mu, params.eta) + params.base) * samples.delta[i];
        }
        let sum: f64 = w_hat.iter().sum();
        if params.normalize_weights && sum > 0.0 {
            w_hat.iter_mut().for_each(|x| *x /= sum);
        }
        profile.weight_sum[r] = sum;
        result.rgb.push(composite(w_hat, &out.rgb[range]));
        result.depth.push(mu);
        result.accumulation.push(w_hat.iter().sum());
        result.fallback.push(false);
    }
    profile.renderer = Some((RendererKind::SingleSurface, *params));
    Ok((result, profile))
}

pub fn render(
    kind: RendererKind,
    samples: &SampleSet,
    out: &FieldOutputs,
    params: &SurfaceParams,
) -> Result<(RenderOutput, WeightProfile)> {
    match kind {
        RendererKind::Baseline => render_baseline(samples, out),
        RendererKind::SingleSurface => render_single_surface(samples, out, params),
    }
}

/// Per-sample gradients of a scalar loss with respect to the field outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleGradients {
    pub d_sigma: Vec<f64>,
    pub d_rgb: Vec<[f64; 3]>,
}

/// Backpropagates per-ray color gradients to per-sample density and color
/// gradients, optionally scaling each sample by its depth-based factor.
pub fn renderer_backward(
    samples: &SampleSet,
    out: &FieldOutputs,
    profile: &WeightProfile,
    d_rgb_upstream: &[[f64; 3]],
    dgs: Option<&DgsConfig>,
) -> Result<SampleGradients> {
    let (kind, params) = profile
        .renderer
        .ok_or_else(|| Error::MissingForward("weight profile was not produced by a render pass".into()))?;
    if profile.w.len() != samples.len() || profile.w_hat.len() != samples.len() {
        return Err(Error::MissingForward(format!(
            "profile covers {} samples, batch has {}",
            profile.w.len(),
            samples.len()
        )));
    }
    check_outputs(samples, out)?;
    if d_rgb_upstream.len() != samples.n_rays() {
        return Err(Error::ShapeMismatch(format!(
            "{} upstream gradients for {} rays",
            d_rgb_upstream.len(),
            samples.n_rays()
        )));
    }

    let n = samples.per_ray;
    let mut grads = SampleGradients {
        d_sigma: vec![0.0; samples.len()],
        d_rgb: vec![[0.0; 3]; samples.len()],
    };
    grads
        .d_sigma
        .par_chunks_mut(n)
        .zip(grads.d_rgb.par_chunks_mut(n))
        .enumerate()
        .for_each(|(r, (d_sigma, d_rgb))| {
            let single = kind == RendererKind::SingleSurface && profile.surface_found[r];
            if single {
                surface_ray_backward(samples, out, profile, &params, r, d_rgb_upstream[r], d_sigma, d_rgb);
            } else {
                let range = samples.range(r);
                let g = d_rgb_upstream[r];
                let mut g_w = vec![0.0; n];
                for (j, i) in range.clone().enumerate() {
                    let w = profile.w[i];
                    d_rgb[j] = g.map(|x| x * w);
                    g_w[j] = dot(&g, &out.rgb[i]);
                }
                weights_to_sigma(&out.sigma[range.clone()], &samples.delta[range.clone()], &profile.w[range], &g_w, d_sigma);
            }
        });

    if let Some(cfg) = dgs {
        if cfg.enabled {
            let scale = dgs_scale(samples, cfg)?;
            for (i, s) in scale.iter().enumerate() {
                grads.d_sigma[i] *= s;
                grads.d_rgb[i] = grads.d_rgb[i].map(|x| x * s);
            }
        }
    }
    Ok(grads)
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Chain rule from raw weights to densities:
/// `dL/dsigma_k = delta_k (T_{k+1} g_k - sum_{i>k} w_i g_i)`.
fn weights_to_sigma(sigma: &[f64], delta: &[f64], w: &[f64], g_w: &[f64], d_sigma: &mut [f64]) {
    let n = sigma.len();
    let mut trans_after = vec![0.0; n];
    let mut optical = 0.0_f64;
    for k in 0..n {
        optical += sigma[k] * delta[k];
        trans_after[k] = (-optical).exp();
    }
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        d_sigma[k] = delta[k] * (trans_after[k] * g_w[k] - suffix);
        suffix += w[k] * g_w[k];
    }
}

#[allow(clippy::too_many_arguments)]
fn surface_ray_backward(
    samples: &SampleSet,
    out: &FieldOutputs,
    profile: &WeightProfile,
    params: &SurfaceParams,
    r: usize,
    g: [f64; 3],
    d_sigma: &mut [f64],
    d_rgb: &mut [[f64; 3]],
) {
    let range = samples.range(r);
    let n = range.len();
    let t = &samples.t[range.clone()];
    let delta = &samples.delta[range.clone()];
    let w_final = &profile.w_hat[range.clone()];
    let colors = &out.rgb[range.clone()];
    let mu = profile.mu_t[r];
    let k = profile.crossing[r].expect("surface rays have a crossing index");

    let mut g_final = vec![0.0; n];
    for j in 0..n {
        d_rgb[j] = g.map(|x| x * w_final[j]);
        g_final[j] = dot(&g, &colors[j]);
    }
    // Undo the optional normalization: W' = W / S.
    if params.normalize_weights {
        let s = profile.weight_sum[r];
        let mean: f64 = g_final.iter().zip(w_final).map(|(a, b)| a * b).sum();
        g_final.iter_mut().for_each(|x| *x = (*x - mean) / s);
    }

    // Through the clamped Gaussian into the median depth.
    let peak = params.peak();
    let eta2 = params.eta * params.eta;
    let mut g_mu = 0.0;
    for j in 0..n {
        let gauss = gaussian_density(t[j], mu, params.eta);
        if gauss + params.base < peak {
            g_mu += g_final[j] * delta[j] * gauss * (t[j] - mu) / eta2;
        }
    }

    // Median depth interpolates inside interval k; k is held fixed.
    let w = &profile.w[range.clone()];
    let omega = &profile.omega[range.clone()];
    let (t_prev, omega_prev) = if k == 0 { (samples.t_near[r], 0.0) } else { (t[k - 1], omega[k - 1]) };
    let span = t[k] - t_prev;
    let mut g_w = vec![0.0; n];
    g_w[k] = -g_mu * (MEDIAN_LEVEL - omega_prev) * span / (w[k] * w[k]);
    for gj in g_w.iter_mut().take(k) {
        *gj = -g_mu * span / w[k];
    }
    weights_to_sigma(&out.sigma[range.clone()], delta, w, &g_w, d_sigma);
}

/// Writes one line per sample with the weight profile of every ray.
pub fn write_debug_csv<W: Write>(mut sink: W, samples: &SampleSet, profile: &WeightProfile) -> std::io::Result<()> {
    writeln!(sink, "ray,sample,t,delta,w,omega,mu_t,w_final")?;
    for r in 0..samples.n_rays() {
        for (j, i) in samples.range(r).enumerate() {
            writeln!(
                sink,
                "{r},{j},{},{},{},{},{},{}",
                samples.t[i], samples.delta[i], profile.w[i], profile.omega[i], profile.mu_t[r], profile.w_hat[i]
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn ray(t: &[f64], t_near: f64, t_far: f64) -> SampleSet {
        SampleSet::from_depths(
            vec![Vec3::zeros()],
            vec![Vec3::z()],
            vec![t_near],
            vec![t_far],
            t.len(),
            t.to_vec(),
        )
        .unwrap()
    }

    fn uniform(n: usize, near: f64, far: f64) -> SampleSet {
        let h = (far - near) / n as f64;
        ray(&(0..n).map(|i| near + (i as f64 + 0.5) * h).collect::<Vec<_>>(), near, far)
    }

    #[test]
    fn single_sample_half_opacity() {
        let s = ray(&[0.5], 0.0, 1.0);
        let p = compute_weights(&s, &[std::f64::consts::LN_2]).unwrap();
        assert!((p.w[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_samples_halve() {
        let s = ray(&[0.5, 1.5], 0.0, 2.0);
        let p = compute_weights(&s, &[std::f64::consts::LN_2; 2]).unwrap();
        assert!((p.w[0] - 0.5).abs() < 1e-15);
        assert!((p.w[1] - 0.25).abs() < 1e-15);
        assert!((p.transmittance[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn empty_space_has_no_weight() {
        let s = uniform(5, 0.0, 1.0);
        let p = compute_weights(&s, &[0.0; 5]).unwrap();
        assert!(p.w.iter().chain(&p.omega).all(|&x| x == 0.0));
    }

    #[test]
    fn negative_density_rejected() {
        let s = uniform(3, 0.0, 1.0);
        assert!(matches!(
            compute_weights(&s, &[0.0, -1.0, 0.0]),
            Err(Error::NegativeDensity { sample: 1, .. })
        ));
    }

    #[test]
    fn median_interpolates_crossing_interval() {
        let w = [0.1, 0.2, 0.3, 0.4];
        let omega = [0.1, 0.30000000000000004, 0.6000000000000001, 1.0];
        let (mu, k) = median_depth_ray(&w, &omega, &[1.0, 2.0, 3.0, 4.0], 0.5).unwrap();
        assert_eq!(k, 2);
        assert!((mu - (2.0 + 0.2 / 0.3)).abs() < 1e-12);
    }

    #[test]
    fn median_in_first_interval_starts_at_near() {
        let (mu, k) = median_depth_ray(&[1.0], &[1.0], &[2.0], 1.5).unwrap();
        assert_eq!(k, 0);
        assert!((mu - 1.75).abs() < 1e-15);
    }

    #[test]
    fn median_needs_strict_crossing() {
        assert!(median_depth_ray(&[0.0; 3], &[0.0; 3], &[1.0, 2.0, 3.0], 0.0).is_none());
        assert!(median_depth_ray(&[0.25, 0.25], &[0.25, 0.5], &[1.0, 2.0], 0.0).is_none());
    }

    #[test]
    fn gaussian_peak_and_one_sigma() {
        let peak = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * 0.5);
        assert!((gaussian_density(1.0, 1.0, 0.5) - peak).abs() < 1e-15);
        assert!((peak - 0.797_884_560_802_865_4).abs() < 1e-15);
        assert!((gaussian_density(1.5, 1.0, 0.5) - peak * (-0.5f64).exp()).abs() < 1e-15);
        assert!((gaussian_density(0.5, 1.0, 0.5) - 0.483_941_449_038_286_7).abs() < 1e-12);
    }

    #[test]
    fn far_tail_clamps_to_base() {
        let w = gaussian_weights(&[0.0, 10.0], &[1.0, 1.0], 10.0, 0.5, 0.2).unwrap();
        assert!((w[0] - 0.2).abs() < 1e-15);
        assert!((w[1] - 0.797_884_560_802_865_4).abs() < 1e-15);
        assert!(gaussian_weights(&[0.0], &[1.0], 0.0, 0.0, 0.2).is_err());
        assert!(gaussian_weights(&[0.0], &[1.0], 0.0, -1.0, 0.2).is_err());
    }

    #[test]
    fn opaque_sample_renders_its_color() {
        let s = ray(&[0.5, 1.5], 0.0, 2.0);
        let out = FieldOutputs {
            sigma: vec![1e6, 0.0],
            rgb: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        };
        let (r, _) = render_baseline(&s, &out).unwrap();
        assert!((r.rgb[0][0] - 1.0).abs() < 1e-12 && r.rgb[0][1].abs() < 1e-12);
        assert!((r.depth[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_ray_is_black() {
        let s = uniform(4, 0.0, 1.0);
        let out = FieldOutputs {
            sigma: vec![0.0; 4],
            rgb: vec![[0.7; 3]; 4],
        };
        let (r, _) = render_baseline(&s, &out).unwrap();
        assert_eq!(r.rgb[0], [0.0; 3]);
        assert_eq!(r.accumulation[0], 0.0);
        let (ss, _) = render_single_surface(&s, &out, &SurfaceParams::default()).unwrap();
        assert_eq!(ss, RenderOutput { fallback: vec![true], ..r });
    }

    #[test]
    fn half_and_half_is_gray() {
        // sigma*delta = ln 2 then infinite: w = [0.5, 0.5].
        let s = ray(&[0.5, 1.5], 0.0, 2.0);
        let out = FieldOutputs {
            sigma: vec![std::f64::consts::LN_2, 1e9],
            rgb: vec![[0.0; 3], [1.0; 3]],
        };
        let (r, _) = render_baseline(&s, &out).unwrap();
        for ch in 0..3 {
            assert!((r.rgb[0][ch] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_without_forward_is_rejected() {
        let s = uniform(3, 0.0, 1.0);
        let out = FieldOutputs {
            sigma: vec![1.0; 3],
            rgb: vec![[0.5; 3]; 3],
        };
        let profile = compute_weights(&s, &out.sigma).unwrap();
        assert!(matches!(
            renderer_backward(&s, &out, &profile, &[[1.0; 3]], None),
            Err(Error::MissingForward(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let s = uniform(8, 0.0, 4.0);
        let out = FieldOutputs {
            sigma: vec![0.1, 0.4, 2.0, 3.0, 0.2, 0.0, 1.0, 0.5],
            rgb: vec![[0.3, 0.6, 0.9]; 8],
        };
        let (_, profile) = render_single_surface(&s, &out, &SurfaceParams::default()).unwrap();
        let g = renderer_backward(&s, &out, &profile, &[[0.0; 3]], None).unwrap();
        assert!(g.d_sigma.iter().all(|&x| x == 0.0));
        assert!(g.d_rgb.iter().all(|c| *c == [0.0; 3]));
    }

    #[test]
    fn plateau_sample_has_no_depth_gradient() {
        // A sample sitting on mu is clamped: it only receives a color gradient.
        let s = uniform(8, 0.0, 4.0);
        let out = FieldOutputs {
            sigma: vec![0.0, 0.0, 0.0, 50.0, 50.0, 0.0, 0.0, 0.0],
            rgb: vec![[0.0; 3], [0.0; 3], [0.0; 3], [1.0; 3], [0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3]],
        };
        let (_, profile) = render_single_surface(&s, &out, &SurfaceParams::default()).unwrap();
        let mu = profile.mu_t[0];
        let p = SurfaceParams::default();
        let i = 3;
        assert!(gaussian_density(s.t[i], mu, p.eta) + p.base >= p.peak());
        // Only sample 3 has color, so only its term can feed the depth gradient.
        let g = renderer_backward(&s, &out, &profile, &[[1.0; 3]], None).unwrap();
        assert!(g.d_sigma.iter().all(|&x| x == 0.0), "{:?}", g.d_sigma);
    }

    #[test]
    fn debug_dump_has_row_per_sample() {
        let s = uniform(4, 0.0, 1.0);
        let out = FieldOutputs {
            sigma: vec![5.0; 4],
            rgb: vec![[0.5; 3]; 4],
        };
        let (_, profile) = render_single_surface(&s, &out, &SurfaceParams::default()).unwrap();
        let mut buf = Vec::new();
        write_debug_csv(&mut buf, &s, &profile).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("ray,sample,t,delta,w,omega,mu_t,w_final"));
    }
}
