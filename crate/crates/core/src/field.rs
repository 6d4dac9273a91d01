//! Trainable voxel-grid radiance field.
//!
//! Parameters live on grid vertices in pre-activation form and are
//! trilinearly interpolated before activation: softplus for density,
//! sigmoid for color. Color is view-independent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, SampleSet, Vec3};

pub const DEFAULT_MEDIUM_COLOR: [f64; 3] = [0.05, 0.15, 0.20];
pub const INITIAL_DENSITY: f64 = 0.01;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelField {
    /// Vertices per axis.
    pub resolution: [usize; 3],
    pub bounds: Aabb,
    /// Pre-activation density, one per vertex, x fastest.
    pub density: Vec<f64>,
    /// Pre-activation RGB, three per vertex.
    pub color: Vec<f64>,
    /// Color reported for samples outside the bounds.
    pub medium_color: [f64; 3],
}

/// Per-sample field values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldOutputs {
    pub sigma: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    pub d_density: Vec<f64>,
    pub d_color: Vec<f64>,
}

impl GradientBuffer {
    pub fn for_field(field: &VoxelField) -> Self {
        GradientBuffer {
            d_density: vec![0.0; field.density.len()],
            d_color: vec![0.0; field.color.len()],
        }
    }

    pub fn zero(&mut self) {
        self.d_density.fill(0.0);
        self.d_color.fill(0.0);
    }
}

/// The eight vertices touched by a point and their trilinear weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

impl VoxelField {
    /// Near-empty, mid-gray initialization.
    pub fn new(resolution: [usize; 3], bounds: Aabb) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(Error::InvalidArgument(format!(
                "grid resolution must be at least 2 per axis, got {resolution:?}"
            )));
        }
        if (0..3).any(|a| !(bounds.max[a] > bounds.min[a])) {
            return Err(Error::InvalidArgument(format!("empty field bounds {bounds:?}")));
        }
        let n = resolution.iter().product::<usize>();
        Ok(VoxelField {
            resolution,
            bounds,
            density: vec![softplus_inv(INITIAL_DENSITY); n],
            color: vec![0.0; 3 * n],
            medium_color: DEFAULT_MEDIUM_COLOR,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.density.len()
    }

    pub fn vertex_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let size = self.bounds.size();
        let idx = [i, j, k];
        Vec3::from_fn(|a, _| {
            self.bounds.min[a] + size[a] * idx[a] as f64 / (self.resolution[a] - 1) as f64
        })
    }

    pub(crate) fn stencil(&self, p: &Vec3) -> Option<Stencil> {
        if !self.bounds.contains(p) {
            return None;
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let cells = (self.resolution[a] - 1) as f64;
            let g = (p[a] - self.bounds.min[a]) / (self.bounds.max[a] - self.bounds.min[a]) * cells;
            let i0 = (g.floor() as usize).min(self.resolution[a] - 2);
            base[a] = i0;
            frac[a] = g - i0 as f64;
        }
        let (nx, nxy) = (self.resolution[0], self.resolution[0] * self.resolution[1]);
        let origin = base[0] + nx * base[1] + nxy * base[2];
        let mut st = Stencil {
            index: [0; 8],
            weight: [0.0; 8],
        };
        for corner in 0..8 {
            let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            st.index[corner] = origin + dx + nx * dy + nxy * dz;
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            st.weight[corner] = wx * wy * wz;
        }
        Some(st)
    }

    /// Interpolated pre-activation (density, rgb) at a point, or `None` outside the bounds.
    fn raw_at(&self, st: &Stencil) -> (f64, [f64; 3]) {
        let mut d = 0.0;
        let mut c = [0.0; 3];
        for (&v, &w) in st.index.iter().zip(&st.weight) {
            d += w * self.density[v];
            for ch in 0..3 {
                c[ch] += w * self.color[3 * v + ch];
            }
        }
        (d, c)
    }

    pub fn eval(&self, p: &Vec3) -> (f64, [f64; 3]) {
        match self.stencil(p) {
            None => (0.0, self.medium_color),
            Some(st) => {
                let (d, c) = self.raw_at(&st);
                (softplus(d), c.map(sigmoid))
            }
        }
    }

    pub fn query(&self, samples: &SampleSet) -> FieldOutputs {
        let (sigma, rgb) = samples.positions.par_iter().map(|p| self.eval(p)).unzip();
        FieldOutputs { sigma, rgb }
    }

    /// Accumulates parameter gradients given upstream gradients on the
    /// activated per-sample outputs. Samples are visited in order so the
    /// result does not depend on the thread pool.
    pub fn backward(
        &self,
        samples: &SampleSet,
        d_sigma: &[f64],
        d_rgb: &[[f64; 3]],
        grads: &mut GradientBuffer,
    ) -> Result<()> {
        let n = samples.len();
        if d_sigma.len() != n || d_rgb.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} samples but {} density and {} color gradients",
                d_sigma.len(),
                d_rgb.len()
            )));
        }
        if grads.d_density.len() != self.density.len() || grads.d_color.len() != self.color.len() {
            return Err(Error::ShapeMismatch("gradient buffer does not match field".into()));
        }
        if let Some(i) = (0..n).find(|&i| !d_sigma[i].is_finite() || d_rgb[i].iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFinite(format!("upstream gradient at sample {i}")));
        }

        // Chain through the activations in parallel, scatter sequentially.
        let local: Vec<Option<(Stencil, f64, [f64; 3])>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let gs = d_sigma[i];
                let gc = d_rgb[i];
                if gs == 0.0 && gc == [0.0; 3] {
                    return None;
                }
                let st = self.stencil(&samples.positions[i])?;
                let (d, c) = self.raw_at(&st);
                let g_density = gs * sigmoid(d);
                let g_color = [0, 1, 2].map(|ch| {
                    let s = sigmoid(c[ch]);
                    gc[ch] * s * (1.0 - s)
                });
                Some((st, g_density, g_color))
            })
            .collect();

        for (st, g_density, g_color) in local.into_iter().flatten() {
            for (&v, &w) in st.index.iter().zip(&st.weight) {
                grads.d_density[v] += w * g_density;
                for ch in 0..3 {
                    grads.d_color[3 * v + ch] += w * g_color[ch];
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(seed: u64, res: [usize; 3]) -> VoxelField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = VoxelField::new(res, Aabb::new([-1.0; 3], [1.0; 3])).unwrap();
        f.density.iter_mut().for_each(|d| *d = rng.random_range(-2.0..2.0));
        f.color.iter_mut().for_each(|c| *c = rng.random_range(-2.0..2.0));
        f
    }

    fn points(ps: &[Vec3]) -> SampleSet {
        let n = ps.len();
        SampleSet {
            per_ray: 1,
            t: vec![1.0; n],
            delta: vec![1.0; n],
            positions: ps.to_vec(),
            origins: ps.to_vec(),
            directions: vec![Vec3::z(); n],
            t_near: vec![0.0; n],
            t_far: vec![2.0; n],
        }
    }

    #[test]
    fn softplus_round_trips() {
        for y in [1e-6, 0.01, 1.0, 25.0, 80.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() <= 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn constant_field_gives_constant_density() {
        let mut f = VoxelField::new([3, 4, 5], Aabb::new([-1.0; 3], [1.0; 3])).unwrap();
        f.density.fill(softplus_inv(1.0));
        let out = f.query(&points(&[Vec3::new(0.1, -0.7, 0.33), Vec3::new(1.0, 1.0, -1.0)]));
        for s in out.sigma {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vertex_sample_is_exact() {
        let f = random_field(3, [4, 3, 5]);
        for (i, j, k) in [(0, 0, 0), (3, 2, 4), (1, 1, 2), (2, 0, 3)] {
            let p = f.vertex_position(i, j, k);
            let (s, c) = f.eval(&p);
            let v = f.vertex_index(i, j, k);
            assert!((s - softplus(f.density[v])).abs() < 1e-12);
            for ch in 0..3 {
                assert!((c[ch] - sigmoid(f.color[3 * v + ch])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outside_is_empty_medium() {
        let mut f = random_field(1, [3, 3, 3]);
        f.medium_color = [0.1, 0.2, 0.3];
        let (s, c) = f.eval(&Vec3::new(0.0, 1.01, 0.0));
        assert_eq!(s, 0.0);
        assert_eq!(c, [0.1, 0.2, 0.3]);
    }

    #[test]
    fn rejects_small_grid() {
        assert!(VoxelField::new([1, 4, 4], Aabb::new([0.0; 3], [1.0; 3])).is_err());
    }

    #[test]
    fn zero_upstream_leaves_grads() {
        let f = random_field(5, [3, 3, 3]);
        let s = points(&[Vec3::new(0.2, 0.1, -0.4)]);
        let mut g = GradientBuffer::for_field(&f);
        g.d_density[4] = 0.5;
        let before = g.clone();
        f.backward(&s, &[0.0], &[[0.0; 3]], &mut g).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn vertex_gradient_is_activation_slope() {
        let f = random_field(6, [3, 3, 3]);
        let v = f.vertex_index(1, 2, 0);
        let s = points(&[f.vertex_position(1, 2, 0)]);
        let mut g = GradientBuffer::for_field(&f);
        f.backward(&s, &[1.0], &[[0.0; 3]], &mut g).unwrap();
        for (i, &d) in g.d_density.iter().enumerate() {
            if i == v {
                assert!((d - sigmoid(f.density[v])).abs() < 1e-12);
            } else {
                assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn nan_upstream_names_sample() {
        let f = random_field(6, [3, 3, 3]);
        let s = points(&[Vec3::zeros(), Vec3::zeros()]);
        let mut g = GradientBuffer::for_field(&f);
        let err = f
            .backward(&s, &[0.0, f64::NAN], &[[0.0; 3]; 2], &mut g)
            .unwrap_err();
        assert!(err.to_string().contains("sample 1"), "{err}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..20 {
            let f = random_field(100 + trial, [4, 4, 4]);
            let p = Vec3::new(
                rng.random_range(-0.95..0.95),
                rng.random_range(-0.95..0.95),
                rng.random_range(-0.95..0.95),
            );
            let up_s: f64 = rng.random_range(-1.0..1.0);
            let up_c: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let objective = |field: &VoxelField| {
                let (s, c) = field.eval(&p);
                up_s * s + up_c[0] * c[0] + up_c[1] * c[1] + up_c[2] * c[2]
            };
            let mut g = GradientBuffer::for_field(&f);
            f.backward(&points(&[p]), &[up_s], &[up_c], &mut g).unwrap();
            let st = f.stencil(&p).unwrap();
            for &v in &st.index {
                let mut plus = f.clone();
                let mut minus = f.clone();
                plus.density[v] += h;
                minus.density[v] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = g.d_density[v];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "density v{v}: {fd} vs {an}");
                for ch in 0..3 {
                    let mut plus = f.clone();
                    let mut minus = f.clone();
                    plus.color[3 * v + ch] += h;
                    minus.color[3 * v + ch] -= h;
                    let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                    let an = g.d_color[3 * v + ch];
                    assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "color v{v}: {fd} vs {an}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn continuous_across_cell_faces(seed in 0u64..1000, y in -0.99f64..0.99, z in -0.99f64..0.99, face in 1usize..4) {
            let f = random_field(seed, [5, 4, 4]);
            // x = interior vertex plane; approach it from both cells.
            let x = -1.0 + 2.0 * face as f64 / 4.0;
            let left = f.eval(&Vec3::new(x.next_down(), y, z));
            let right = f.eval(&Vec3::new(x.next_up(), y, z));
            prop_assert!((left.0 - right.0).abs() < 1e-9);
            for ch in 0..3 {
                prop_assert!((left.1[ch] - right.1[ch]).abs() < 1e-9);
            }
        }

        #[test]
        fn backward_is_linear(seed in 0u64..1000, a in -4.0f64..4.0) {
            let f = random_field(seed, [3, 3, 3]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ps: Vec<Vec3> = (0..5).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let s = points(&ps);
            let ds: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dc: Vec<[f64; 3]> = (0..5).map(|_| [rng.random_range(-1.0..1.0), 0.3, -0.2]).collect();
            let mut g1 = GradientBuffer::for_field(&f);
            f.backward(&s, &ds, &dc, &mut g1).unwrap();
            let ds2: Vec<f64> = ds.iter().map(|x| a * x).collect();
            let dc2: Vec<[f64; 3]> = dc.iter().map(|c| c.map(|x| a * x)).collect();
            let mut g2 = GradientBuffer::for_field(&f);
            f.backward(&s, &ds2, &dc2, &mut g2).unwrap();
            for (x, y) in g1.d_density.iter().zip(&g2.d_density) {
                prop_assert!((a * x - y).abs() < 1e-9);
            }
            for (x, y) in g1.d_color.iter().zip(&g2.d_color) {
                prop_assert!((a * x - y).abs() < 1e-9);
            }
        }
    }
}
