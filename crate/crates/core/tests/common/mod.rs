//! Full-chain finite-difference check shared by the gradient tests and the
//! acceptance suite: field parameters -> compositor -> L2 loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sealight::field::{GradientBuffer, VoxelField};
use sealight::geometry::{stratified_samples, Aabb, RayBatch, SampleSet, Vec3};
use sealight::loss::l2_loss;
use sealight::render::{render, renderer_backward, RendererKind, SurfaceParams, WeightProfile};

const H: f64 = 1e-6;

pub fn field(seed: u64) -> VoxelField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = VoxelField::new([4, 4, 4], Aabb::new([-1.0; 3], [1.0; 3])).unwrap();
    f.density.iter_mut().for_each(|d| *d = rng.random_range(-1.0..2.5));
    f.color.iter_mut().for_each(|c| *c = rng.random_range(-2.0..2.0));
    f
}

pub fn two_rays() -> SampleSet {
    let rays = RayBatch {
        origins: vec![Vec3::new(-0.9, 0.1, -0.2), Vec3::new(0.2, -0.8, 0.05)],
        directions: vec![Vec3::new(1.0, 0.05, 0.1).normalize(), Vec3::new(-0.1, 1.0, 0.2).normalize()],
        t_near: vec![0.0, 0.0],
        t_far: vec![1.7, 1.6],
        pixels: vec![Default::default(); 2],
    };
    stratified_samples(&rays, 8, true, 11).unwrap()
}

struct Eval {
    loss: f64,
    profile: WeightProfile,
}

fn eval(f: &VoxelField, s: &SampleSet, kind: RendererKind, params: &SurfaceParams, gt: &[[f64; 3]]) -> Eval {
    let out = f.query(s);
    let (r, profile) = render(kind, s, &out, params).unwrap();
    Eval {
        loss: l2_loss(&r.rgb, gt).unwrap().loss,
        profile,
    }
}

/// Same crossing index and same clamp pattern: the loss is smooth between the two points.
fn same_branch(a: &WeightProfile, b: &WeightProfile, s: &SampleSet, params: &SurfaceParams) -> bool {
    if a.crossing != b.crossing || a.surface_found != b.surface_found {
        return false;
    }
    let peak = params.peak();
    (0..s.len()).all(|i| {
        let r = i / s.per_ray;
        if !a.surface_found[r] {
            return true;
        }
        let clamp = |p: &WeightProfile| {
            sealight::render::gaussian_density(s.t[i], p.mu_t[r], params.eta) + params.base >= peak
        };
        clamp(a) == clamp(b)
    })
}

fn set(f: &mut VoxelField, is_color: bool, i: usize, v: f64) {
    if is_color {
        f.color[i] = v;
    } else {
        f.density[i] = v;
    }
}

/// Returns (checked, skipped) parameter counts, or the first mismatch.
pub fn check(kind: RendererKind, params: SurfaceParams, seed: u64) -> Result<(usize, usize), String> {
    let s = two_rays();
    let mut f = field(seed);
    let gt = [[0.2, 0.7, 0.4], [0.9, 0.1, 0.5]];
    let out = f.query(&s);
    let (r, profile) = render(kind, &s, &out, &params).unwrap();
    let l = l2_loss(&r.rgb, &gt).unwrap();
    let g = renderer_backward(&s, &out, &profile, &l.d_rgb, None).unwrap();
    let mut grads = GradientBuffer::for_field(&f);
    f.backward(&s, &g.d_sigma, &g.d_rgb, &mut grads).unwrap();

    let mut checked = 0;
    let mut skipped = 0;
    let blocks = [(false, f.density.len()), (true, f.color.len())];
    for (is_color, len) in blocks {
        for i in 0..len {
            let analytic = if is_color { grads.d_color[i] } else { grads.d_density[i] };
            let orig = if is_color { f.color[i] } else { f.density[i] };
            set(&mut f, is_color, i, orig + H);
            let plus = eval(&f, &s, kind, &params, &gt);
            set(&mut f, is_color, i, orig - H);
            let minus = eval(&f, &s, kind, &params, &gt);
            set(&mut f, is_color, i, orig);
            if !same_branch(&plus.profile, &minus.profile, &s, &params) {
                skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * H);
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-7 {
                if (analytic - numeric).abs() >= 1e-8 {
                    return Err(format!("param {i} color={is_color}: {analytic} vs {numeric}"));
                }
                continue;
            }
            let rel = (analytic - numeric).abs() / scale;
            if rel > 1e-3 {
                return Err(format!(
                    "{kind} param {i} color={is_color}: analytic {analytic:e} numeric {numeric:e} rel {rel:e}"
                ));
            }
            checked += 1;
        }
    }
    Ok((checked, skipped))
}

