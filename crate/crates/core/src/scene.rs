//! Declarative synthetic underwater scenes, the analytic ground-truth
//! renderer, and posed dataset generation with distractors.
//!
//! The medium is homogeneous, so attenuation along a ray of length `t` has
//! the closed form `exp(-sigma_m t)`. Surfaces are Lambertian and unlit:
//! a hit contributes its albedo, optionally modulated by a 3D checker
//! pattern so that multi-view photometric matching is well posed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Camera, Vec3};
use crate::raster::{Image, Mask};

const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checker: Option<Checker>,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        albedo: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checker: Option<Checker>,
    },
}

/// Solid checker texture: cells of edge `cell` alternate between the
/// primitive's albedo and `albedo`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checker {
    pub cell: f64,
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Box { albedo, .. } => *albedo,
        }
    }

    pub fn checker(&self) -> Option<&Checker> {
        match self {
            Primitive::Sphere { checker, .. } | Primitive::Box { checker, .. } => checker.as_ref(),
        }
    }

    /// Surface albedo at world point `p`.
    pub fn albedo_at(&self, p: &Vec3) -> [f64; 3] {
        match self.checker() {
            Some(c) => {
                let parity = p.iter().map(|v| (v / c.cell).floor() as i64).sum::<i64>().rem_euclid(2);
                if parity == 1 { c.albedo } else { self.albedo() }
            }
            None => self.albedo(),
        }
    }

    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                intersect_ellipsoid(origin, dir, &Vec3::from(*center), &Vec3::repeat(*radius))
            }
            Primitive::Box { min, max, .. } => {
                let (t0, _) = Aabb::new(*min, *max).intersect(origin, dir)?;
                (t0 > HIT_EPS).then_some(t0)
            }
        }
    }

    fn extent(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Primitive::Sphere { center, radius, .. } => (center.map(|c| c - radius), center.map(|c| c + radius)),
            Primitive::Box { min, max, .. } => (*min, *max),
        }
    }
}

/// Nearest positive hit with an axis-aligned ellipsoid.
pub fn intersect_ellipsoid(origin: &Vec3, dir: &Vec3, center: &Vec3, semi_axes: &Vec3) -> Option<f64> {
    let o = (origin - center).component_div(semi_axes);
    let d = dir.component_div(semi_axes);
    let a = d.dot(&d);
    let b = o.dot(&d);
    let c = o.dot(&o) - 1.0;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / a;
    let t1 = (-b + sq) / a;
    if t0 > HIT_EPS {
        Some(t0)
    } else if t1 > HIT_EPS {
        Some(t1)
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Medium {
    /// Extinction coefficient, per world unit.
    pub density: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distractor {
    /// Small particles re-drawn independently every frame inside that frame's
    /// view frustum, at `distance` from the camera.
    Floaters {
        count: usize,
        radius: [f64; 2],
        distance: [f64; 2],
        albedo: [f64; 3],
        #[serde(default)]
        seed: u64,
    },
    /// One ellipsoid swimming from `start` to `end` over the sequence with a
    /// sideways sinusoidal wiggle.
    Fish {
        semi_axes: [f64; 3],
        start: [f64; 3],
        end: [f64; 3],
        #[serde(default)]
        wiggle: f64,
        albedo: [f64; 3],
    },
}

fn default_fov() -> f64 {
    22.0
}

fn default_arc() -> f64 {
    360.0
}

/// Circular camera trajectory around a target point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Orbit {
    pub frames: usize,
    /// Horizontal distance from the target axis.
    pub radius: f64,
    /// Camera height (world y).
    pub elevation: f64,
    pub target: [f64; 3],
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    #[serde(default)]
    pub start_deg: f64,
    #[serde(default = "default_arc")]
    pub arc_deg: f64,
}

impl Orbit {
    pub fn camera(&self, frame: usize) -> Result<Camera> {
        let closed = (self.arc_deg - 360.0).abs() < 1e-9;
        let frac = if closed {
            frame as f64 / self.frames as f64
        } else if self.frames > 1 {
            frame as f64 / (self.frames - 1) as f64
        } else {
            0.0
        };
        let angle = (self.start_deg + frac * self.arc_deg).to_radians();
        let target = Vec3::from(self.target);
        let eye = Vec3::new(
            target.x + self.radius * angle.cos(),
            self.elevation,
            target.z + self.radius * angle.sin(),
        );
        Camera::look_at(eye, target, Vec3::y(), self.width, self.height, self.fov_deg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub name: String,
    pub static_primitives: Vec<Primitive>,
    pub medium: Medium,
    #[serde(default)]
    pub distractors: Vec<Distractor>,
    pub cameras: Orbit,
    /// Region covered by the learned field.
    pub field_bounds: Aabb,
}

/// Geometry of one distractor instance in a given frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistractorInstance {
    pub center: Vec3,
    pub semi_axes: Vec3,
    pub albedo: [f64; 3],
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = a ^ b.rotate_left(21) ^ c.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<SceneSpec> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scene: SceneSpec = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            detail: e.inner().to_string(),
        })?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let schema = |path: String, detail: &str| Error::Schema {
            path,
            detail: detail.to_string(),
        };
        for (i, p) in self.static_primitives.iter().enumerate() {
            let (lo, hi) = p.extent();
            if lo.iter().chain(&hi).any(|v| !(v.abs() <= 1.0 + 1e-12)) {
                return Err(schema(format!("static_primitives[{i}]"), "primitive leaves the unit cube [-1, 1]^3"));
            }
            if let Primitive::Sphere { radius, .. } = p {
                if !(*radius > 0.0) {
                    return Err(schema(format!("static_primitives[{i}].radius"), "radius must be positive"));
                }
            }
            if let Primitive::Box { min, max, .. } = p {
                if (0..3).any(|a| !(max[a] > min[a])) {
                    return Err(schema(format!("static_primitives[{i}]"), "box max must exceed min"));
                }
            }
            if p.albedo().iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(schema(format!("static_primitives[{i}].albedo"), "albedo outside [0, 1]"));
            }
            if let Some(c) = p.checker() {
                if !(c.cell > 0.0) || c.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                    return Err(schema(format!("static_primitives[{i}].checker"), "cell must be positive and albedo in [0, 1]"));
                }
            }
        }
        if !(self.medium.density >= 0.0) {
            return Err(schema("medium.density".into(), "density must be nonnegative"));
        }
        if self.cameras.frames == 0 {
            return Err(schema("cameras.frames".into(), "need at least one frame"));
        }
        if self.cameras.width == 0 || self.cameras.height == 0 {
            return Err(schema("cameras".into(), "image size must be at least 1x1"));
        }
        for (i, d) in self.distractors.iter().enumerate() {
            if let Distractor::Floaters { radius, distance, .. } = d {
                if !(radius[0] > 0.0 && radius[0] <= radius[1] && distance[0] > 0.0 && distance[0] <= distance[1]) {
                    return Err(schema(format!("distractors[{i}]"), "radius and distance ranges must be positive and ordered"));
                }
            }
        }
        Ok(())
    }

    pub fn camera(&self, frame: usize) -> Result<Camera> {
        self.cameras.camera(frame)
    }

    /// Distractors present in `frame` for dataset seed `seed`.
    pub fn distractors_at(&self, frame: usize, seed: u64) -> Result<Vec<DistractorInstance>> {
        let mut out = Vec::new();
        let n_frames = self.cameras.frames;
        for d in &self.distractors {
            match d {
                Distractor::Floaters {
                    count,
                    radius,
                    distance,
                    albedo,
                    seed: own_seed,
                } => {
                    let cam = self.camera(frame)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, *own_seed, frame as u64));
                    for _ in 0..*count {
                        let u = rng.random::<f64>() * cam.resolution.width as f64;
                        let v = rng.random::<f64>() * cam.resolution.height as f64;
                        let dist = rng.random_range(distance[0]..=distance[1]);
                        let r = rng.random_range(radius[0]..=radius[1]);
                        out.push(DistractorInstance {
                            center: cam.center() + cam.direction(u, v) * dist,
                            semi_axes: Vec3::repeat(r),
                            albedo: *albedo,
                        });
                    }
                }
                Distractor::Fish {
                    semi_axes,
                    start,
                    end,
                    wiggle,
                    albedo,
                } => {
                    let s = if n_frames > 1 { frame as f64 / (n_frames - 1) as f64 } else { 0.5 };
                    let (a, b) = (Vec3::from(*start), Vec3::from(*end));
                    let side = (b - a).cross(&Vec3::y()).try_normalize(1e-12).unwrap_or_else(Vec3::z);
                    let center = a + (b - a) * s + side * (wiggle * (2.0 * std::f64::consts::PI * s).sin());
                    out.push(DistractorInstance {
                        center,
                        semi_axes: Vec3::from(*semi_axes),
                        albedo: *albedo,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Medium-attenuated color seen at distance `t` on a surface of the given albedo.
    pub fn attenuate(&self, albedo: [f64; 3], t: f64) -> [f64; 3] {
        let trans = (-self.medium.density * t).exp();
        [0, 1, 2].map(|c| trans * albedo[c] + (1.0 - trans) * self.medium.color[c])
    }
}

/// Ground-truth render of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleView {
    pub image: Image,
    /// Distance to the nearest hit, infinite on a miss.
    pub depth: Vec<f64>,
    /// True where the nearest hit is a distractor.
    pub distractor_mask: Mask,
}

/// Nearest static hit along a ray: (distance, albedo).
pub fn trace_static(scene: &SceneSpec, origin: &Vec3, dir: &Vec3) -> Option<(f64, [f64; 3])> {
    scene
        .static_primitives
        .iter()
        .filter_map(|p| p.intersect(origin, dir).map(|t| (t, p)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(t, p)| (t, p.albedo_at(&(origin + dir * t))))
}

/// Analytic render through pixel centers. Distractors of `frame` are included
/// when `distractors` is given.
pub fn oracle_render(scene: &SceneSpec, camera: &Camera, distractors: &[DistractorInstance]) -> OracleView {
    let (w, h) = (camera.resolution.width, camera.resolution.height);
    let origin = camera.center();
    let mut view = OracleView {
        image: Image::new(w, h),
        depth: vec![f64::INFINITY; w * h],
        distractor_mask: Mask::full(w, h, false),
    };
    for row in 0..h {
        for col in 0..w {
            let dir = camera.direction(col as f64 + 0.5, row as f64 + 0.5);
            let mut best = trace_static(scene, &origin, &dir).map(|(t, a)| (t, a, false));
            for d in distractors {
                if let Some(t) = intersect_ellipsoid(&origin, &dir, &d.center, &d.semi_axes) {
                    if best.is_none_or(|(bt, _, _)| t < bt) {
                        best = Some((t, d.albedo, true));
                    }
                }
            }
            let idx = row * w + col;
            match best {
                Some((t, albedo, is_distractor)) => {
                    view.image.pixels[idx] = scene.attenuate(albedo, t);
                    view.depth[idx] = t;
                    view.distractor_mask.values[idx] = is_distractor;
                }
                None => view.image.pixels[idx] = scene.medium.color,
            }
        }
    }
    view
}

/// Renders frame `frame` of the scene's trajectory with its distractors.
pub fn oracle_frame(scene: &SceneSpec, frame: usize, seed: u64) -> Result<OracleView> {
    if frame >= scene.cameras.frames {
        return Err(Error::InvalidArgument(format!(
            "frame {frame} out of range (scene has {})",
            scene.cameras.frames
        )));
    }
    let camera = scene.camera(frame)?;
    Ok(oracle_render(scene, &camera, &scene.distractors_at(frame, seed)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Interleaved 80:10:10 assignment: within every run of ten frames the fifth
/// is validation and the tenth is test.
pub fn split_for(frame: usize) -> Split {
    match frame % 10 {
        4 => Split::Val,
        9 => Split::Test,
        _ => Split::Train,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub camera: Camera,
    pub image: Image,
    /// Diagnostics only; empty when loaded from disk.
    pub depth: Vec<f64>,
    /// True for pixels whose nearest hit is static geometry or open water.
    pub static_mask: Mask,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene: SceneSpec,
    pub seed: u64,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFrame {
    pub index: usize,
    pub split: Split,
    pub image: String,
    pub mask: String,
    pub depth: String,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub scene: SceneSpec,
    pub frames: Vec<ManifestFrame>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Renders every frame of the trajectory.
pub fn generate_dataset(scene: &SceneSpec, seed: u64) -> Result<Dataset> {
    scene.validate()?;
    let frames = (0..scene.cameras.frames)
        .into_par_iter()
        .map(|f| {
            let view = oracle_frame(scene, f, seed)?;
            Ok(Frame {
                index: f,
                camera: scene.camera(f)?,
                image: view.image,
                depth: view.depth,
                static_mask: Mask {
                    width: view.distractor_mask.width,
                    height: view.distractor_mask.height,
                    values: view.distractor_mask.values.iter().map(|d| !d).collect(),
                },
                split: split_for(f),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        scene: scene.clone(),
        seed,
        frames,
    })
}

fn write_pfm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let mut bytes = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for v in &values[row * width..(row + 1) * width] {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    pub fn split_count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Writes images, masks, depth maps and the manifest into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest {
            seed: self.seed,
            scene: self.scene.clone(),
            frames: Vec::with_capacity(self.frames.len()),
        };
        for f in &self.frames {
            let entry = ManifestFrame {
                index: f.index,
                split: f.split,
                image: format!("frame_{:03}.ppm", f.index),
                mask: format!("mask_{:03}.pgm", f.index),
                depth: format!("depth_{:03}.pfm", f.index),
                camera: f.camera,
            };
            f.image.save(&dir.join(&entry.image))?;
            f.static_mask.save(&dir.join(&entry.mask))?;
            if f.depth.len() == f.image.pixels.len() {
                write_pfm(&dir.join(&entry.depth), f.image.width, f.image.height, &f.depth)?;
            }
            manifest.frames.push(entry);
        }
        let path = dir.join(MANIFEST_FILE);
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        file.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
        file.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::MissingInput {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let missing: Vec<usize> = manifest
            .frames
            .iter()
            .filter(|e| !dir.join(&e.image).is_file() || !dir.join(&e.mask).is_file())
            .map(|e| e.index)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFrames(missing));
        }
        let frames = manifest
            .frames
            .iter()
            .map(|entry| {
                let image = Image::load(&dir.join(&entry.image))?;
                let static_mask = Mask::load(&dir.join(&entry.mask))?;
                if !image.width.eq(&entry.camera.resolution.width) || image.height != entry.camera.resolution.height {
                    return Err(Error::Corrupt {
                        path: dir.join(&entry.image),
                        detail: "image size disagrees with camera resolution".into(),
                    });
                }
                Ok(Frame {
                    index: entry.index,
                    camera: entry.camera,
                    image,
                    depth: Vec::new(),
                    static_mask,
                    split: entry.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            scene: manifest.scene,
            seed: manifest.seed,
            frames,
        })
    }

    /// Dataset directory files in a stable order, for reproducibility checks.
    pub fn files(dir: &Path) -> Result<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        Ok(files)
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 4] = ["coral_static", "coral_floaters", "coral_turbid", "coral_murky"];

/// Bundled scenes: a small reef patch on a sand floor seen from an orbit.
pub fn preset(name: &str) -> Option<SceneSpec> {
    let reef = vec![
        Primitive::Box {
            min: [-1.0, -1.0, -1.0],
            max: [1.0, -0.75, 1.0],
            albedo: [0.78, 0.70, 0.52],
            checker: Some(Checker {
                cell: 0.5,
                albedo: [0.45, 0.40, 0.30],
            }),
        },
        Primitive::Sphere {
            center: [-0.35, -0.5, -0.2],
            radius: 0.25,
            albedo: [0.85, 0.32, 0.28],
            checker: None,
        },
        Primitive::Sphere {
            center: [0.4, -0.57, 0.3],
            radius: 0.18,
            albedo: [0.55, 0.35, 0.78],
            checker: None,
        },
        Primitive::Box {
            min: [0.05, -0.75, -0.65],
            max: [0.45, -0.35, -0.3],
            albedo: [0.30, 0.72, 0.45],
            checker: None,
        },
        Primitive::Sphere {
            center: [-0.1, -0.68, 0.55],
            radius: 0.07,
            albedo: [0.95, 0.85, 0.25],
            checker: None,
        },
    ];
    let cameras = Orbit {
        frames: 20,
        radius: 1.2,
        elevation: 1.5,
        target: [0.0, -0.6, 0.0],
        width: 48,
        height: 48,
        fov_deg: 40.0,
        start_deg: 0.0,
        arc_deg: default_arc(),
    };
    let mut scene = SceneSpec {
        name: name.to_string(),
        static_primitives: reef,
        medium: Medium {
            density: 0.05,
            color: crate::field::DEFAULT_MEDIUM_COLOR,
        },
        distractors: Vec::new(),
        cameras,
        field_bounds: Aabb::new([-1.05; 3], [1.05; 3]),
    };
    match name {
        "coral_static" => {}
        "coral_turbid" => scene.medium.density = 0.2,
        "coral_murky" => scene.medium.density = 0.5,
        "coral_floaters" => {
            scene.distractors = vec![
                Distractor::Floaters {
                    count: 10,
                    radius: [0.015, 0.03],
                    distance: [1.0, 1.8],
                    albedo: [0.85, 0.88, 0.85],
                    seed: 0,
                },
                Distractor::Fish {
                    semi_axes: [0.16, 0.06, 0.07],
                    start: [-0.9, -0.25, 0.45],
                    end: [0.9, -0.25, -0.35],
                    wiggle: 0.15,
                    albedo: [0.95, 0.55, 0.12],
                },
            ]
        }
        _ => return None,
    }
    Some(scene)
}
