//! Training loop, full-view rendering, test-split evaluation and the
//! ablation harness.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RenderSettings};
use crate::error::{Error, Result};
use crate::field::{GradientBuffer, VoxelField};
use crate::geometry::{generate_rays, importance_resample, stratified_samples, Camera, PixelId, PixelSelection, RayBatch};
use crate::loss::{l2_loss, robust_loss, DgsConfig, RobustConfig, PATCH_SIZE};
use crate::metrics::{psnr, FrameMetrics, MetricReport};
use crate::optim::{radam_step, EarlyStopper, RAdamConfig, RAdamState, StopDecision};
use crate::raster::Image;
use crate::render::{compute_weights, render, renderer_backward, RenderOutput, RendererKind, SurfaceParams};
use crate::scene::{Dataset, Frame, Split};

/// Rays per chunk when rendering whole views.
const RENDER_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub renderer: RendererKind,
    pub surface: SurfaceParams,
    pub robust: RobustConfig,
    pub dgs: DgsConfig,
    pub optim: RAdamConfig,
    pub early_stop_interval: usize,
    /// Random rays per batch without the robust loss.
    pub batch_rays: usize,
    /// 16x16 patches per batch with the robust loss.
    pub batch_patches: usize,
    pub iterations: usize,
    pub seed: u64,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    /// Grid vertices per axis.
    pub field_resolution: [usize; 3],
    /// Progress line cadence on stdout; 0 is silent.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            renderer: RendererKind::SingleSurface,
            surface: SurfaceParams::default(),
            robust: RobustConfig::default(),
            dgs: DgsConfig::default(),
            optim: RAdamConfig::default(),
            early_stop_interval: 2000,
            batch_rays: 4096,
            batch_patches: 16,
            iterations: 20000,
            seed: 0,
            coarse_samples: 64,
            fine_samples: 64,
            field_resolution: [32, 32, 32],
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.surface.validate()?;
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.robust.enabled && self.batch_patches == 0 || !self.robust.enabled && self.batch_rays == 0 {
            return bad("batch size must be positive");
        }
        if self.early_stop_interval == 0 {
            return bad("early_stop.interval must be positive");
        }
        if self.coarse_samples < 2 {
            return bad("samples.coarse must be at least 2");
        }
        if !(self.robust.t_r >= 0.0 && self.robust.t_r <= 1.0) || !(0.0..=1.0).contains(&self.robust.quantile) {
            return bad("robust.t_r and robust.quantile must lie in [0, 1]");
        }
        if !(self.dgs.t_h > 0.0) {
            return bad("dgs.t_h must be positive");
        }
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return bad("optimizer hyperparameters out of range");
        }
        Ok(())
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            renderer: self.renderer,
            surface: self.surface,
            coarse_samples: self.coarse_samples,
            fine_samples: self.fine_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Wall-clock milliseconds per 100 iterations, keyed by the closing iteration.
    pub timing: Vec<(usize, f64)>,
    /// Iteration at which early stopping halted training.
    pub halted_at: Option<usize>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,val_psnr,ms_per_100\n");
        let mut timing = self.timing.iter().peekable();
        for r in &self.records {
            let val = r.val_psnr.map(|v| format!("{v:.6}")).unwrap_or_default();
            let ms = match timing.peek() {
                Some(&&(it, ms)) if it == r.iteration => {
                    timing.next();
                    format!("{ms:.1}")
                }
                _ => String::new(),
            };
            let _ = writeln!(s, "{},{:.9e},{},{}", r.iteration, r.loss, val, ms);
        }
        s
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(32);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One training batch: rays, their target colors, and patch corners when patch-sampled.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rays: RayBatch,
    pub targets: Vec<[f64; 3]>,
    pub patches: Option<Vec<PixelId>>,
}

impl Batch {
    fn describe(&self) -> String {
        let mut frames: Vec<usize> = self.rays.pixels.iter().map(|p| p.image).collect();
        frames.sort_unstable();
        frames.dedup();
        format!("{} rays from frames {frames:?}", self.rays.len())
    }
}

/// Draws a batch from the given frames: random pixels, or whole 16x16 patches
/// when `patches` is set.
pub fn sample_batch(frames: &[&Frame], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut rays = RayBatch::default();
    if cfg.robust.enabled {
        let mut corners = Vec::with_capacity(cfg.batch_patches);
        for _ in 0..cfg.batch_patches {
            let f = frames[rng.random_range(0..frames.len())];
            let (w, h) = (f.image.width, f.image.height);
            if w < PATCH_SIZE || h < PATCH_SIZE {
                return Err(Error::InvalidArgument(format!(
                    "frame {} is {w}x{h}, smaller than a {PATCH_SIZE}x{PATCH_SIZE} patch",
                    f.index
                )));
            }
            let row = rng.random_range(0..=h - PATCH_SIZE);
            let col = rng.random_range(0..=w - PATCH_SIZE);
            rays.extend(generate_rays(
                &f.camera,
                f.index,
                &PixelSelection::Patches {
                    corners: vec![(row, col)],
                    size: PATCH_SIZE,
                },
                false,
                0,
            )?);
            corners.push(PixelId { image: f.index, row, col });
        }
        let targets = gather(frames, &rays);
        return Ok(Batch {
            rays,
            targets,
            patches: Some(corners),
        });
    }
    let mut per_frame: Vec<Vec<(usize, usize)>> = vec![Vec::new(); frames.len()];
    for _ in 0..cfg.batch_rays {
        let k = rng.random_range(0..frames.len());
        let img = &frames[k].image;
        per_frame[k].push((rng.random_range(0..img.height), rng.random_range(0..img.width)));
    }
    for (f, pixels) in frames.iter().zip(per_frame) {
        if !pixels.is_empty() {
            rays.extend(generate_rays(&f.camera, f.index, &PixelSelection::Pixels(pixels), false, 0)?);
        }
    }
    let targets = gather(frames, &rays);
    Ok(Batch {
        rays,
        targets,
        patches: None,
    })
}

fn gather(frames: &[&Frame], rays: &RayBatch) -> Vec<[f64; 3]> {
    rays.pixels
        .iter()
        .map(|p| {
            let f = frames.iter().find(|f| f.index == p.image).expect("ray from a batch frame");
            f.image.get(p.row, p.col)
        })
        .collect()
}

/// Coarse pass, one importance-resampling round on baseline weights, then the
/// configured compositor on the fine samples.
pub struct ForwardPass {
    pub samples: crate::geometry::SampleSet,
    pub outputs: crate::field::FieldOutputs,
    pub render: RenderOutput,
    pub profile: crate::render::WeightProfile,
}

pub fn forward(
    field: &VoxelField,
    settings: &RenderSettings,
    rays: &RayBatch,
    jitter: bool,
    seed: u64,
) -> Result<ForwardPass> {
    let mut rays = rays.clone();
    rays.clip_to_box(&field.bounds);
    let coarse = stratified_samples(&rays, settings.coarse_samples, jitter, mix(seed, 1, 0))?;
    let coarse_out = field.query(&coarse);
    let coarse_w = compute_weights(&coarse, &coarse_out.sigma)?;
    let samples = importance_resample(&coarse, &coarse_w.w, settings.fine_samples, mix(seed, 2, 0))?;
    let outputs = field.query(&samples);
    let (render, profile) = render(settings.renderer, &samples, &outputs, &settings.surface)?;
    Ok(ForwardPass {
        samples,
        outputs,
        render,
        profile,
    })
}

/// Renders a full view. Deterministic: no jitter, fixed resampling seeds.
pub fn render_view(field: &VoxelField, settings: &RenderSettings, camera: &Camera) -> Result<(Image, Vec<f64>)> {
    let rays = generate_rays(camera, 0, &PixelSelection::Full, false, 0)?;
    let mut image = Image::new(camera.resolution.width, camera.resolution.height);
    let mut depth = Vec::with_capacity(rays.len());
    let mut offset = 0;
    for (chunk_index, start) in (0..rays.len()).step_by(RENDER_CHUNK).enumerate() {
        let end = (start + RENDER_CHUNK).min(rays.len());
        let chunk = RayBatch {
            origins: rays.origins[start..end].to_vec(),
            directions: rays.directions[start..end].to_vec(),
            t_near: rays.t_near[start..end].to_vec(),
            t_far: rays.t_far[start..end].to_vec(),
            pixels: rays.pixels[start..end].to_vec(),
        };
        let pass = forward(field, settings, &chunk, false, chunk_index as u64)?;
        for (k, rgb) in pass.render.rgb.iter().enumerate() {
            image.pixels[offset + k] = rgb.map(|v| v.clamp(0.0, 1.0));
        }
        depth.extend(pass.render.depth);
        offset = end;
    }
    Ok((image, depth))
}

/// Mean full-frame PSNR over the given frames.
pub fn validation_psnr(field: &VoxelField, settings: &RenderSettings, frames: &[&Frame]) -> Result<f64> {
    let mut total = 0.0;
    for f in frames {
        let (img, _) = render_view(field, settings, &f.camera)?;
        total += psnr(&img, &f.image, None)?;
    }
    Ok(total / frames.len() as f64)
}

pub fn initial_field(cfg: &TrainConfig, dataset: &Dataset) -> Result<VoxelField> {
    let mut field = VoxelField::new(cfg.field_resolution, dataset.scene.field_bounds)?;
    field.medium_color = dataset.scene.medium.color;
    Ok(field)
}

/// Trains a field on the dataset's train split, early-stopping on the
/// validation split. Returns the best checkpoint.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<(Checkpoint, TrainLog)> {
    train_from(cfg, dataset, initial_field(cfg, dataset)?)
}

pub fn train_from(cfg: &TrainConfig, dataset: &Dataset, mut field: VoxelField) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let train_frames: Vec<&Frame> = dataset.split(Split::Train).collect();
    let val_frames: Vec<&Frame> = dataset.split(Split::Val).collect();
    if train_frames.is_empty() || val_frames.is_empty() {
        return Err(Error::InvalidArgument("dataset needs nonempty train and val splits".into()));
    }
    let settings = cfg.render_settings();
    let mut log = TrainLog::default();
    if cfg.iterations == 0 {
        return Ok((
            Checkpoint {
                field,
                settings,
                iteration: 0,
                val_psnr: None,
            },
            log,
        ));
    }

    let mut state = RAdamState::new(cfg.optim, &[field.density.len(), field.color.len()]);
    let mut grads = GradientBuffer::for_field(&field);
    let mut stopper: EarlyStopper<VoxelField> = EarlyStopper::new(cfg.early_stop_interval)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clock = Instant::now();
    let numerical = |iteration: usize, detail: String| Error::Numerical { iteration, detail };
    let dgs = cfg.dgs.enabled.then_some(&cfg.dgs);

    let mut last_iteration = 0;
    for it in 1..=cfg.iterations {
        last_iteration = it;
        let batch = sample_batch(&train_frames, cfg, &mut rng)?;
        let pass = forward(&field, &settings, &batch.rays, true, mix(cfg.seed, it as u64, 7))?;
        let (loss, d_rgb) = if cfg.robust.enabled {
            let out = robust_loss(&pass.render.rgb, &batch.targets, batch.patches.as_deref(), &cfg.robust)?;
            (out.loss, out.d_rgb)
        } else {
            let out = l2_loss(&pass.render.rgb, &batch.targets)?;
            (out.loss, out.d_rgb)
        };
        if !loss.is_finite() {
            return Err(numerical(it, format!("loss is {loss} on batch of {}", batch.describe())));
        }
        let sample_grads = renderer_backward(&pass.samples, &pass.outputs, &pass.profile, &d_rgb, dgs)
            .map_err(|e| numerical(it, format!("{e} on batch of {}", batch.describe())))?;
        grads.zero();
        field
            .backward(&pass.samples, &sample_grads.d_sigma, &sample_grads.d_rgb, &mut grads)
            .map_err(|e| numerical(it, format!("{e} on batch of {}", batch.describe())))?;
        radam_step(
            &mut state,
            &mut [&mut field.density, &mut field.color],
            &[&grads.d_density, &grads.d_color],
        )
        .map_err(|e| numerical(it, format!("{e} on batch of {}", batch.describe())))?;

        let mut record = LogRecord {
            iteration: it,
            loss,
            val_psnr: None,
        };
        let mut halt = false;
        if it % cfg.early_stop_interval == 0 {
            let v = validation_psnr(&field, &settings, &val_frames)?;
            record.val_psnr = Some(v);
            halt = stopper.observe(it, v, || field.clone())? == StopDecision::Halt;
        }
        log.records.push(record);
        if it % 100 == 0 {
            log.timing.push((it, clock.elapsed().as_secs_f64() * 1e3));
            clock = Instant::now();
        }
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || halt) {
            let val = log.records.last().and_then(|r| r.val_psnr);
            match val {
                Some(v) => println!("iter {it:>6}  loss {loss:.6}  val_psnr {v:.3}"),
                None => println!("iter {it:>6}  loss {loss:.6}"),
            }
        }
        if halt {
            log.halted_at = Some(it);
            break;
        }
    }

    // Score the final parameters too when the run ended between checks.
    if log.halted_at.is_none() && last_iteration % cfg.early_stop_interval != 0 {
        let v = validation_psnr(&field, &settings, &val_frames)?;
        if let Some(r) = log.records.last_mut() {
            r.val_psnr = Some(v);
        }
        if stopper.best().is_none() || v >= stopper.state.best_psnr {
            return Ok((
                Checkpoint {
                    field,
                    settings,
                    iteration: last_iteration,
                    val_psnr: Some(v),
                },
                log,
            ));
        }
    }
    let best_iteration = stopper.state.best_iteration.expect("at least one validation check");
    let best_psnr = stopper.state.best_psnr;
    Ok((
        Checkpoint {
            field: stopper.into_best().expect("snapshot kept for best check"),
            settings,
            iteration: best_iteration,
            val_psnr: Some(best_psnr),
        },
        log,
    ))
}

/// Renders every test frame and scores it against the dataset images, with
/// and without the static mask.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, renderer: Option<RendererKind>) -> Result<MetricReport> {
    let mut settings = checkpoint.settings;
    if let Some(kind) = renderer {
        settings.renderer = kind;
    }
    let name = settings.renderer.to_string();
    let frames: Vec<&Frame> = dataset.split(Split::Test).collect();
    if frames.is_empty() {
        return Err(Error::InvalidArgument("dataset has no test frames".into()));
    }
    let mut report = MetricReport::default();
    for f in frames {
        let (img, _) = render_view(&checkpoint.field, &settings, &f.camera)?;
        report.frames.push(FrameMetrics::compute(f.index, &name, &img, &f.image, &f.static_mask)?);
    }
    Ok(report)
}

/// The five ablation variants: single-surface alone, with the robust loss,
/// with depth-based gradient scaling, with both, and the baseline renderer.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut out = Vec::new();
    for (name, kind, rl, dgs) in [
        ("single_surface", RendererKind::SingleSurface, false, false),
        ("single_surface+rl", RendererKind::SingleSurface, true, false),
        ("single_surface+dgs", RendererKind::SingleSurface, false, true),
        ("single_surface+rl+dgs", RendererKind::SingleSurface, true, true),
        ("baseline", RendererKind::Baseline, false, false),
    ] {
        let mut cfg = base.clone();
        cfg.renderer = kind;
        cfg.robust.enabled = rl;
        cfg.dgs.enabled = dgs;
        out.push((name.to_string(), cfg));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub config: TrainConfig,
    /// Summary metrics, or the error that stopped this variant.
    pub outcome: std::result::Result<MetricReport, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,frame_id,renderer,psnr_full,psnr_static,ssim_full,ssim_static,status\n");
        for row in &self.rows {
            match &row.outcome {
                Ok(report) => {
                    let _ = writeln!(
                        s,
                        "{},mean,{},{:.6},{:.6},{:.6},{:.6},ok",
                        row.variant,
                        row.config.renderer,
                        report.mean(|m| m.psnr_full),
                        report.mean(|m| m.psnr_static),
                        report.mean(|m| m.ssim_full),
                        report.mean(|m| m.ssim_static)
                    );
                }
                Err(e) => {
                    let clean = e.replace([',', '\n'], " ");
                    let _ = writeln!(s, "{},mean,{},,,,,error: {clean}", row.variant, row.config.renderer);
                }
            }
        }
        s
    }

    /// Variants ordered by mean masked-static PSNR, best first; failed variants last.
    pub fn ranking(&self) -> Vec<(String, f64)> {
        let mut r: Vec<(String, f64)> = self
            .rows
            .iter()
            .map(|row| {
                let v = row.outcome.as_ref().map_or(f64::NEG_INFINITY, |m| m.mean_psnr_static());
                (row.variant.clone(), v)
            })
            .collect();
        r.sort_by(|a, b| b.1.total_cmp(&a.1));
        r
    }

    pub fn get(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Trains and evaluates every variant; a failing variant is recorded and the
/// rest still run. `on_done` sees each finished variant with its checkpoint.
pub fn run_ablation(
    base: &TrainConfig,
    dataset: &Dataset,
    mut on_done: impl FnMut(&str, Option<&Checkpoint>, Option<&TrainLog>),
) -> AblationReport {
    let mut report = AblationReport::default();
    for (variant, cfg) in ablation_variants(base) {
        let result = train(&cfg, dataset).and_then(|(ck, log)| {
            let metrics = evaluate(&ck, dataset, None)?;
            Ok((ck, log, metrics))
        });
        let outcome = match result {
            Ok((ck, log, metrics)) => {
                on_done(&variant, Some(&ck), Some(&log));
                Ok(metrics)
            }
            Err(e) => {
                on_done(&variant, None, None);
                Err(e.to_string())
            }
        };
        report.rows.push(AblationRow {
            variant,
            config: cfg,
            outcome,
        });
    }
    report
}
