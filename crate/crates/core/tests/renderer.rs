//! Compositor checks against brute-force evaluations written independently
//! of the library, plus randomized invariants.

use proptest::prelude::*;
use sealight::field::FieldOutputs;
use sealight::geometry::{SampleSet, Vec3};
use sealight::render::{
    compute_weights, gaussian_weights, median_depth_ray, render, render_baseline, render_single_surface,
    renderer_backward, RendererKind, SurfaceParams,
};

fn ray_samples(t_near: f64, t_far: f64, t: Vec<f64>) -> SampleSet {
    let n = t.len();
    SampleSet::from_depths(vec![Vec3::zeros()], vec![Vec3::z()], vec![t_near], vec![t_far], n, t).unwrap()
}

fn uniform(t_near: f64, t_far: f64, n: usize) -> SampleSet {
    let h = (t_far - t_near) / n as f64;
    ray_samples(t_near, t_far, (0..n).map(|i| t_near + (i as f64 + 0.5) * h).collect())
}

/// Straight transcription of the weight, median and Gaussian formulas.
struct Oracle {
    w: Vec<f64>,
    mu: Option<f64>,
    big_w: Vec<f64>,
}

fn oracle(t: &[f64], delta: &[f64], sigma: &[f64], t_near: f64, eta: f64, base: f64) -> Oracle {
    let mut w = Vec::new();
    let mut optical = 0.0_f64;
    for i in 0..t.len() {
        let trans = (-optical).exp();
        w.push(trans * (1.0 - (-sigma[i] * delta[i]).exp()));
        optical += sigma[i] * delta[i];
    }
    let mut acc = 0.0;
    let mut mu = None;
    for k in 0..t.len() {
        if acc + w[k] > 0.5 {
            let (t_prev, acc_prev) = if k == 0 { (t_near, 0.0) } else { (t[k - 1], acc) };
            mu = Some(t_prev + (0.5 - acc_prev) / w[k] * (t[k] - t_prev));
            break;
        }
        acc += w[k];
    }
    let peak = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * eta);
    let big_w = match mu {
        Some(m) => t
            .iter()
            .zip(delta)
            .map(|(&ti, &d)| {
                let g = peak * (-(ti - m) * (ti - m) / (2.0 * eta * eta)).exp();
                (g + base).min(peak) * d
            })
            .collect(),
        None => w.clone(),
    };
    Oracle { w, mu, big_w }
}

/// Density with two thin slabs: the first stops 60% of the light, the
/// second stops everything that is left, so raw weights are 0.6 and 0.4.
fn two_spikes(s: &SampleSet) -> FieldOutputs {
    let width = 0.1;
    let first = -(0.4f64).ln() / width;
    let second = 60.0;
    let mut out = FieldOutputs::default();
    for &t in &s.t {
        let (sigma, rgb) = if (t - 2.0).abs() < width / 2.0 {
            (first, [1.0, 0.0, 0.0])
        } else if (t - 4.0).abs() < width / 2.0 {
            (second, [0.0, 0.0, 1.0])
        } else {
            (0.0, [0.0, 0.0, 0.0])
        };
        out.sigma.push(sigma);
        out.rgb.push(rgb);
    }
    out
}

#[test]
fn two_spike_ray_matches_brute_force() {
    let params = SurfaceParams::default();
    let dense = uniform(0.0, 6.0, 6000);
    let field = two_spikes(&dense);
    let o = oracle(&dense.t, &dense.delta, &field.sigma, 0.0, params.eta, params.base);
    let (out, profile) = render_single_surface(&dense, &field, &params).unwrap();

    for (a, b) in profile.w.iter().zip(&o.w) {
        assert!((a - b).abs() < 1e-12);
    }
    let mu = o.mu.unwrap();
    assert!((profile.mu_t[0] - mu).abs() < 1e-9);
    assert!((1.95..=2.05).contains(&mu), "median {mu} outside the first slab");
    for (a, b) in profile.w_hat.iter().zip(&o.big_w) {
        assert!((a - b).abs() < 1e-12);
    }

    // Second slab: every sample weighted at the base level at most.
    let gauss_tail = 0.7979 * (-(1.9f64).powi(2) / 0.5).exp();
    for i in 0..dense.len() {
        if (dense.t[i] - 4.0).abs() < 0.05 {
            assert!(profile.w_hat[i] / dense.delta[i] <= params.base + gauss_tail + 1e-12);
        }
    }
    let share = |rgb: [f64; 3]| rgb[2] / (rgb[0] + rgb[2]);
    let (base_out, _) = render_baseline(&dense, &field).unwrap();
    assert!((share(base_out.rgb[0]) - 0.4).abs() < 1e-3);
    assert!(share(out.rgb[0]) < share(base_out.rgb[0]));
    assert!((out.depth[0] - mu).abs() < 1e-12);
}

#[test]
fn coarse_sampling_converges_to_dense_median() {
    let params = SurfaceParams::default();
    let dense = uniform(0.0, 6.0, 6000);
    let reference = oracle(&dense.t, &dense.delta, &two_spikes(&dense).sigma, 0.0, 0.5, 0.2).mu.unwrap();
    for n in [600, 1200, 3000] {
        let s = uniform(0.0, 6.0, n);
        let (out, _) = render_single_surface(&s, &two_spikes(&s), &params).unwrap();
        let spacing = 6.0 / n as f64;
        assert!((out.depth[0] - reference).abs() <= spacing, "{n} samples: {} vs {reference}", out.depth[0]);
    }
}

#[test]
fn opaque_wall_depth_is_exact_to_half_a_sample() {
    let s = uniform(0.0, 5.0, 2000);
    let field = FieldOutputs {
        sigma: s.t.iter().map(|&t| if t > 3.0 { 1e4 } else { 0.0 }).collect(),
        rgb: vec![[0.5; 3]; s.len()],
    };
    let (out, _) = render_single_surface(&s, &field, &SurfaceParams::default()).unwrap();
    assert!((out.depth[0] - 3.0).abs() <= 0.5 * 5.0 / 2000.0, "depth {}", out.depth[0]);
}

#[test]
fn empty_ray_falls_back_to_baseline() {
    let s = uniform(0.5, 3.0, 32);
    let field = FieldOutputs {
        sigma: vec![0.0; 32],
        rgb: vec![[0.3, 0.6, 0.9]; 32],
    };
    let (a, _) = render_single_surface(&s, &field, &SurfaceParams::default()).unwrap();
    let (b, _) = render_baseline(&s, &field).unwrap();
    assert_eq!(a.rgb, b.rgb);
    assert_eq!(a.accumulation, b.accumulation);
    assert!(a.fallback[0]);
}

#[test]
fn discrete_gaussian_has_unit_area() {
    for (mu, eta) in [(0.0, 0.5), (3.0, 0.1), (-2.0, 1.7)] {
        let s = uniform(mu - 6.0 * eta, mu + 6.0 * eta, 512);
        let w = gaussian_weights(&s.t, &s.delta, mu, eta, 0.0).unwrap();
        let area: f64 = w.iter().sum();
        assert!((0.99..=1.01).contains(&area), "area {area} for eta {eta}");
    }
}

/// Per-sample finite differences of the rendered color.
#[test]
fn color_derivatives_match_central_differences() {
    let h = 1e-4;
    let mut checked = 0;
    for seed in 0..40u64 {
        let mut x = seed as f64 * 0.7 + 0.3;
        let mut next = || {
            x = (x * 9301.0 + 49297.0) % 233280.0;
            x / 233280.0
        };
        let t: Vec<f64> = (0..8).map(|i| 0.5 + 0.4 * i as f64 + 0.3 * next()).collect();
        let s = ray_samples(0.3, 4.0, t);
        let field = FieldOutputs {
            sigma: (0..8).map(|_| 0.1 + 2.0 * next()).collect(),
            rgb: (0..8).map(|_| [next(), next(), next()]).collect(),
        };
        let params = SurfaceParams {
            eta: 0.2 + 0.4 * next(),
            base: 0.2,
            normalize_weights: false,
        };
        for kind in [RendererKind::Baseline, RendererKind::SingleSurface] {
            let (_, profile) = render(kind, &s, &field, &params).unwrap();
            for ch in 0..3 {
                let mut up = [0.0; 3];
                up[ch] = 1.0;
                let g = renderer_backward(&s, &field, &profile, &[up], None).unwrap();
                for j in 0..8 {
                    let eval = |d: f64| {
                        let mut f = field.clone();
                        f.sigma[j] += d;
                        render(kind, &s, &f, &params).unwrap()
                    };
                    let ((plus, pp), (minus, pm)) = (eval(h), eval(-h));
                    if pp.crossing != pm.crossing || pp.crossing != profile.crossing {
                        continue;
                    }
                    if kind == RendererKind::SingleSurface {
                        let clamped = |p: &sealight::render::WeightProfile| -> Vec<bool> {
                            (0..8)
                                .map(|i| {
                                    let gd = sealight::render::gaussian_density(s.t[i], p.mu_t[0], params.eta);
                                    gd + params.base >= params.peak()
                                })
                                .collect()
                        };
                        if clamped(&pp) != clamped(&pm) {
                            continue;
                        }
                    }
                    let numeric = (plus.rgb[0][ch] - minus.rgb[0][ch]) / (2.0 * h);
                    let analytic = g.d_sigma[j];
                    let scale = numeric.abs().max(analytic.abs());
                    if scale < 1e-6 {
                        assert!((numeric - analytic).abs() < 1e-9);
                        continue;
                    }
                    let rel = (numeric - analytic).abs() / scale;
                    assert!(rel <= 1e-4, "{kind} seed {seed} ch {ch} sample {j}: {analytic} vs {numeric}");
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 500, "only {checked} derivatives checked");
}

fn random_ray(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        proptest::collection::vec(0.01f64..0.5, n),
        proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..20.0], n),
    )
}

fn ray_from_gaps(gaps: &[f64]) -> SampleSet {
    let mut t = Vec::new();
    let mut acc = 0.2;
    for g in gaps {
        acc += g;
        t.push(acc);
    }
    ray_samples(0.2, acc + 0.1, t)
}

proptest! {
    #[test]
    fn weights_conserve_light((gaps, sigma) in random_ray(24)) {
        let s = ray_from_gaps(&gaps);
        let p = compute_weights(&s, &sigma).unwrap();
        let total: f64 = p.w.iter().sum();
        prop_assert!((total + p.transmittance[0] - 1.0).abs() < 1e-6);
        prop_assert!(p.w.iter().all(|&w| w >= 0.0));
        prop_assert!(p.omega.windows(2).all(|o| o[1] >= o[0]));
        prop_assert!(total <= 1.0 + 1e-6);
    }

    #[test]
    fn median_ignores_samples_after_the_crossing((gaps, sigma) in random_ray(16), seed in 0usize..1000) {
        let s = ray_from_gaps(&gaps);
        let p = compute_weights(&s, &sigma).unwrap();
        let Some((mu, k)) = median_depth_ray(&p.w, &p.omega, &s.t, s.t_near[0]) else {
            return Ok(());
        };
        let mut shuffled = sigma.clone();
        let tail = &mut shuffled[k + 1..];
        if !tail.is_empty() {
            let len = tail.len();
            tail.rotate_left(seed % len);
            tail.reverse();
        }
        let q = compute_weights(&s, &shuffled).unwrap();
        let (mu2, k2) = median_depth_ray(&q.w, &q.omega, &s.t, s.t_near[0]).unwrap();
        prop_assert_eq!(k, k2);
        prop_assert_eq!(mu, mu2);
    }

    #[test]
    fn single_surface_weights_are_nonnegative((gaps, sigma) in random_ray(16)) {
        let s = ray_from_gaps(&gaps);
        let field = FieldOutputs { sigma, rgb: vec![[0.5; 3]; 16] };
        let (out, p) = render_single_surface(&s, &field, &SurfaceParams::default()).unwrap();
        prop_assert!(p.w_hat.iter().all(|&w| w >= 0.0));
        prop_assert!(out.rgb[0].iter().all(|c| c.is_finite()));
        if p.surface_found[0] {
            prop_assert!(*p.omega.last().unwrap() > 0.5);
            prop_assert!(out.depth[0] >= s.t_near[0] && out.depth[0] <= s.t_far[0]);
        }
    }
}
