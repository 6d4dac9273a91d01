//! Pinhole cameras, ray generation and sample placement along rays.
//!
//! Camera frames follow the usual computer-vision convention: `x` right,
//! `y` down, `z` along the optical axis. The pose rotation maps camera
//! coordinates to world coordinates and the translation is the camera
//! center in world units.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Floor added to every coarse weight before inverse-CDF sampling.
pub const PDF_FLOOR: f64 = 1e-5;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    /// Camera-to-world rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// Camera center in world units.
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn center(&self) -> Vec3 {
        Vec3::from(self.translation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

fn default_near() -> f64 {
    0.05
}

fn default_far() -> f64 {
    10.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub resolution: Resolution,
    /// Default ray interval before clipping to the scene box.
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with a vertical field of view in degrees.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        width: usize,
        height: usize,
        fov_y_deg: f64,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("up vector parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = [
            [right.x, down.x, forward.x],
            [right.y, down.y, forward.y],
            [right.z, down.z, forward.z],
        ];
        let focal = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        let camera = Camera {
            pose: Pose {
                rotation,
                translation: [eye.x, eye.y, eye.z],
            },
            intrinsics: Intrinsics {
                fx: focal,
                fy: focal,
                cx: 0.5 * width as f64,
                cy: 0.5 * height as f64,
            },
            resolution: Resolution { width, height },
            near: default_near(),
            far: default_far(),
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.pose.rotation_matrix();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidArgument(format!(
                "camera rotation is not orthonormal (max |R^T R - I| = {err:e})"
            )));
        }
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got ({}, {})",
                k.fx, k.fy
            )));
        }
        if self.resolution.width == 0 || self.resolution.height == 0 {
            return Err(Error::InvalidArgument("resolution must be at least 1x1".into()));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::InvalidArgument(format!(
                "invalid clip range [{}, {}]",
                self.near, self.far
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        self.pose.center()
    }

    /// Unit world-space direction through image coordinates `(u, v)` (pixels, `x` right, `y` down).
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let cam = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        (self.pose.rotation_matrix() * cam).normalize()
    }

    pub fn pixel_count(&self) -> usize {
        self.resolution.width * self.resolution.height
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelId {
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

/// Which pixels of an image to turn into rays.
#[derive(Clone, Debug, PartialEq)]
pub enum PixelSelection {
    Full,
    /// Square patches given by their top-left `(row, col)` corners.
    Patches { corners: Vec<(usize, usize)>, size: usize },
    /// Explicit `(row, col)` list.
    Pixels(Vec<(usize, usize)>),
    /// `count` pixels drawn uniformly with replacement.
    Random { count: usize },
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn size(&self) -> Vec3 {
        Vec3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
    }

    /// Slab test; returns the parametric entry and exit distances of the infinite line.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let inv = 1.0 / dir[a];
            let mut ta = (self.min[a] - origin[a]) * inv;
            let mut tb = (self.max[a] - origin[a]) * inv;
            if ta.is_nan() || tb.is_nan() {
                // Ray parallel to the slab and exactly on its plane.
                continue;
            }
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// Packed camera rays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub t_near: Vec<f64>,
    pub t_far: Vec<f64>,
    pub pixels: Vec<PixelId>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn extend(&mut self, other: RayBatch) {
        self.origins.extend(other.origins);
        self.directions.extend(other.directions);
        self.t_near.extend(other.t_near);
        self.t_far.extend(other.t_far);
        self.pixels.extend(other.pixels);
    }

    /// Restricts each ray's interval to the part inside `bounds`. Rays that miss
    /// the box (or would be left with an empty interval) keep their interval.
    pub fn clip_to_box(&mut self, bounds: &Aabb) {
        for i in 0..self.len() {
            if let Some((enter, exit)) = bounds.intersect(&self.origins[i], &self.directions[i]) {
                let near = self.t_near[i].max(enter);
                let far = self.t_far[i].min(exit);
                if near < far {
                    self.t_near[i] = near;
                    self.t_far[i] = far;
                }
            }
        }
    }
}

/// Generates one ray per selected pixel through its center, optionally jittered
/// within the pixel footprint.
pub fn generate_rays(
    camera: &Camera,
    image: usize,
    selection: &PixelSelection,
    jitter: bool,
    seed: u64,
) -> Result<RayBatch> {
    camera.validate()?;
    let Resolution { width, height } = camera.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let pixels: Vec<(usize, usize)> = match selection {
        PixelSelection::Full => (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .collect(),
        PixelSelection::Pixels(list) => list.clone(),
        PixelSelection::Patches { corners, size } => {
            let mut out = Vec::with_capacity(corners.len() * size * size);
            for &(r0, c0) in corners {
                for r in r0..r0 + size {
                    for c in c0..c0 + size {
                        out.push((r, c));
                    }
                }
            }
            out
        }
        PixelSelection::Random { count } => (0..*count)
            .map(|_| (rng.random_range(0..height), rng.random_range(0..width)))
            .collect(),
    };

    let mut batch = RayBatch {
        origins: Vec::with_capacity(pixels.len()),
        directions: Vec::with_capacity(pixels.len()),
        t_near: Vec::with_capacity(pixels.len()),
        t_far: Vec::with_capacity(pixels.len()),
        pixels: Vec::with_capacity(pixels.len()),
    };
    let center = camera.center();
    for (index, &(row, col)) in pixels.iter().enumerate() {
        if row >= height || col >= width {
            return Err(Error::PixelOutOfBounds {
                index,
                row,
                col,
                width,
                height,
            });
        }
        let (du, dv) = if jitter {
            (rng.random::<f64>(), rng.random::<f64>())
        } else {
            (0.5, 0.5)
        };
        batch.origins.push(center);
        batch
            .directions
            .push(camera.direction(col as f64 + du, row as f64 + dv));
        batch.t_near.push(camera.near);
        batch.t_far.push(camera.far);
        batch.pixels.push(PixelId { image, row, col });
    }
    Ok(batch)
}

/// Ordered samples along every ray of a batch, stored with a fixed stride.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub per_ray: usize,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub t_near: Vec<f64>,
    pub t_far: Vec<f64>,
}

impl SampleSet {
    pub fn n_rays(&self) -> usize {
        self.origins.len()
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn range(&self, ray: usize) -> std::ops::Range<usize> {
        ray * self.per_ray..(ray + 1) * self.per_ray
    }

    /// Builds a sample set from explicit per-ray depths. Intervals are the
    /// Voronoi cells of the depths inside `[t_near, t_far]`.
    pub fn from_depths(
        origins: Vec<Vec3>,
        directions: Vec<Vec3>,
        t_near: Vec<f64>,
        t_far: Vec<f64>,
        per_ray: usize,
        t: Vec<f64>,
    ) -> Result<Self> {
        let n_rays = origins.len();
        if directions.len() != n_rays
            || t_near.len() != n_rays
            || t_far.len() != n_rays
            || t.len() != n_rays * per_ray
        {
            return Err(Error::ShapeMismatch(format!(
                "{n_rays} rays with {per_ray} samples each but {} depths",
                t.len()
            )));
        }
        if per_ray == 0 {
            return Err(Error::InvalidArgument("need at least one sample per ray".into()));
        }
        let mut delta = vec![0.0; t.len()];
        let mut positions = Vec::with_capacity(t.len());
        for r in 0..n_rays {
            let ts = &t[r * per_ray..(r + 1) * per_ray];
            if ts.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidArgument(format!(
                    "sample depths of ray {r} are not strictly increasing"
                )));
            }
            voronoi_deltas(ts, t_near[r], t_far[r], &mut delta[r * per_ray..(r + 1) * per_ray]);
            positions.extend(ts.iter().map(|&ti| origins[r] + directions[r] * ti));
        }
        Ok(SampleSet {
            per_ray,
            t,
            delta,
            positions,
            origins,
            directions,
            t_near,
            t_far,
        })
    }
}

fn voronoi_deltas(t: &[f64], near: f64, far: f64, out: &mut [f64]) {
    let n = t.len();
    let mut lo = near;
    for i in 0..n {
        let hi = if i + 1 < n { 0.5 * (t[i] + t[i + 1]) } else { far };
        out[i] = hi - lo;
        lo = hi;
    }
}

/// `n` samples per ray, one in each of `n` equal bins of `[t_near, t_far]`.
/// Without jitter the samples sit at bin midpoints.
pub fn stratified_samples(rays: &RayBatch, n: usize, jitter: bool, seed: u64) -> Result<SampleSet> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "stratified sampling needs at least 2 samples per ray, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = rays.len() * n;
    let mut t = Vec::with_capacity(total);
    let mut delta = Vec::with_capacity(total);
    let mut positions = Vec::with_capacity(total);
    for r in 0..rays.len() {
        let (near, far) = (rays.t_near[r], rays.t_far[r]);
        if !(near >= 0.0 && near < far) {
            return Err(Error::InvalidArgument(format!(
                "ray {r} has degenerate bounds [{near}, {far}]"
            )));
        }
        let width = (far - near) / n as f64;
        for i in 0..n {
            let u = if jitter { rng.random::<f64>() } else { 0.5 };
            let ti = near + (i as f64 + u) * width;
            t.push(ti);
            delta.push(width);
            positions.push(rays.origins[r] + rays.directions[r] * ti);
        }
    }
    Ok(SampleSet {
        per_ray: n,
        t,
        delta,
        positions,
        origins: rays.origins.clone(),
        directions: rays.directions.clone(),
        t_near: rays.t_near.clone(),
        t_far: rays.t_far.clone(),
    })
}

/// Draws `n_fine` extra samples per ray from the piecewise-constant density
/// proportional to `weights + PDF_FLOOR` over the coarse intervals and merges
/// them with the coarse samples.
pub fn importance_resample(
    coarse: &SampleSet,
    weights: &[f64],
    n_fine: usize,
    seed: u64,
) -> Result<SampleSet> {
    if weights.len() != coarse.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} coarse samples",
            weights.len(),
            coarse.len()
        )));
    }
    if n_fine == 0 {
        return Ok(coarse.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_coarse = coarse.per_ray;
    let per_ray = n_coarse + n_fine;
    let mut all_t = Vec::with_capacity(coarse.n_rays() * per_ray);
    let mut cdf = vec![0.0; n_coarse + 1];
    let mut edges = vec![0.0; n_coarse + 1];
    let mut fine = vec![0.0; n_fine];
    let mut merged = Vec::with_capacity(per_ray);

    for r in 0..coarse.n_rays() {
        let range = coarse.range(r);
        let ts = &coarse.t[range.clone()];
        let ds = &coarse.delta[range.clone()];
        let ws = &weights[range];

        edges[0] = coarse.t_near[r];
        for i in 0..n_coarse {
            edges[i + 1] = edges[i] + ds[i];
        }
        let total: f64 = ws.iter().map(|w| w.max(0.0) + PDF_FLOOR).sum();
        cdf[0] = 0.0;
        for i in 0..n_coarse {
            cdf[i + 1] = cdf[i] + (ws[i].max(0.0) + PDF_FLOOR) / total;
        }
        cdf[n_coarse] = 1.0;

        for (k, slot) in fine.iter_mut().enumerate() {
            let u = (k as f64 + rng.random::<f64>()) / n_fine as f64;
            // First bin whose upper CDF bound exceeds u.
            let bin = cdf[1..].partition_point(|&c| c <= u).min(n_coarse - 1);
            let span = cdf[bin + 1] - cdf[bin];
            let frac = if span > 0.0 { ((u - cdf[bin]) / span).clamp(0.0, 1.0) } else { 0.5 };
            let lo = edges[bin];
            let hi = edges[bin + 1];
            *slot = (lo + frac * (hi - lo)).clamp(coarse.t_near[r], coarse.t_far[r]);
        }

        // Fine draws come out ascending already; merge keeps coarse first on ties.
        merged.clear();
        let (mut i, mut j) = (0, 0);
        while i < n_coarse || j < n_fine {
            if j >= n_fine || (i < n_coarse && ts[i] <= fine[j]) {
                merged.push(ts[i]);
                i += 1;
            } else {
                merged.push(fine[j]);
                j += 1;
            }
        }
        for k in 1..merged.len() {
            if merged[k] <= merged[k - 1] {
                merged[k] = merged[k - 1].next_up();
            }
        }
        all_t.extend_from_slice(&merged);
    }

    SampleSet::from_depths(
        coarse.origins.clone(),
        coarse.directions.clone(),
        coarse.t_near.clone(),
        coarse.t_far.clone(),
        per_ray,
        all_t,
    )
}
