use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use sealight::checkpoint::Checkpoint;
use sealight::config;
use sealight::error::{Error, Result};
use sealight::geometry::Camera;
use sealight::render::RendererKind;
use sealight::scene::{generate_dataset, preset, Dataset, SceneSpec, PRESETS};
use sealight::trainer::{evaluate, render_view, run_ablation, train, TrainConfig};

#[derive(Parser)]
#[command(name = "sealight", version, about = "Train and evaluate single-surface radiance fields on synthetic underwater scenes")]
struct Cli {
    /// Seed for dataset generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "AQUA_THREADS")]
    threads: Option<usize>,
    /// Flat JSON config file with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene's camera orbit into a dataset directory.
    Generate {
        /// Scene JSON file or the name of a bundled preset.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a field on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render one view from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output image; `.png` for PNG, PPM otherwise.
        #[arg(long)]
        out: PathBuf,
        /// Camera JSON file.
        #[arg(long, conflicts_with_all = ["data", "frame", "angle"])]
        camera: Option<PathBuf>,
        /// Dataset whose cameras to use with --frame or --angle.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, requires = "data", conflicts_with = "angle")]
        frame: Option<usize>,
        /// Orbit angle in degrees for a novel view on the dataset's trajectory.
        #[arg(long, requires = "data")]
        angle: Option<f64>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        renderer: Option<RendererKind>,
    },
    /// Score a checkpoint on the dataset's test frames.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        renderer: Option<RendererKind>,
    },
    /// Train and score the five ablation variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    renderer: Option<RendererKind>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    base: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Any config key, as KEY=JSON_VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn resolve_config(cli: &Cli, overrides: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => config::load(path)?,
        None => TrainConfig::default(),
    };
    for item in &overrides.set {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{item}`")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        config::apply(&mut cfg, key, &value)?;
    }
    if let Some(r) = overrides.renderer {
        cfg.renderer = r;
    }
    if let Some(eta) = overrides.eta {
        cfg.surface.eta = eta;
    }
    if let Some(base) = overrides.base {
        cfg.surface.base = base;
    }
    if let Some(n) = overrides.iterations {
        cfg.iterations = n;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn load_scene(arg: &str) -> Result<SceneSpec> {
    if let Some(scene) = preset(arg) {
        return Ok(scene);
    }
    let path = Path::new(arg);
    let text = fs::read_to_string(path).map_err(|e| Error::MissingInput {
        path: path.into(),
        detail: format!("{e} (bundled presets: {})", PRESETS.join(", ")),
    })?;
    SceneSpec::from_json(&text)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { scene, out } => {
            let scene = load_scene(scene)?;
            let dataset = generate_dataset(&scene, cli.seed.unwrap_or(0))?;
            dataset.write(out)?;
            println!("wrote {} frames to {}", dataset.frames.len(), out.display());
        }
        Command::Train { data, out, overrides } => {
            let cfg = resolve_config(cli, overrides)?;
            let dataset = Dataset::load(data)?;
            create_dir(out)?;
            let resolved = config::to_json(&cfg);
            write(&out.join("config.json"), &(resolved.clone() + "\n"))?;
            println!("config {}", serde_json::to_string(&config::to_flat(&cfg)).expect("config serializes"));
            let (ck, log) = train(&cfg, &dataset)?;
            ck.save(&out.join("checkpoint.ckpt"))?;
            write(&out.join("train_log.csv"), &log.to_csv())?;
            match ck.val_psnr {
                Some(v) => println!("best iteration {} val_psnr {v:.3}", ck.iteration),
                None => println!("no training iterations; wrote initial checkpoint"),
            }
        }
        Command::Render {
            checkpoint,
            out,
            camera,
            data,
            frame,
            angle,
            width,
            height,
            renderer,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let mut cam: Camera = match (camera, data) {
                (Some(path), _) => {
                    let text = fs::read_to_string(path).map_err(|e| Error::MissingInput {
                        path: path.clone(),
                        detail: e.to_string(),
                    })?;
                    let de = &mut serde_json::Deserializer::from_str(&text);
                    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
                        path: e.path().to_string(),
                        detail: e.inner().to_string(),
                    })?
                }
                (None, Some(dir)) => {
                    let dataset = Dataset::load(dir)?;
                    match (frame, angle) {
                        (Some(f), _) => dataset
                            .frames
                            .iter()
                            .find(|fr| fr.index == *f)
                            .map(|fr| fr.camera)
                            .ok_or(Error::MissingFrames(vec![*f]))?,
                        (None, Some(deg)) => {
                            let mut orbit = dataset.scene.cameras;
                            orbit.start_deg = *deg;
                            orbit.camera(0)?
                        }
                        (None, None) => return Err(Error::InvalidArgument("--data needs --frame or --angle".into())),
                    }
                }
                (None, None) => {
                    return Err(Error::InvalidArgument("give --camera, or --data with --frame or --angle".into()))
                }
            };
            let (w0, h0) = (cam.resolution.width, cam.resolution.height);
            let (w, h) = (width.unwrap_or(w0), height.unwrap_or(h0));
            if (w, h) != (w0, h0) {
                eprintln!("warning: rendering at {w}x{h}, camera was defined for {w0}x{h0}; intrinsics rescaled");
                let (sx, sy) = (w as f64 / w0 as f64, h as f64 / h0 as f64);
                cam.intrinsics.fx *= sx;
                cam.intrinsics.cx *= sx;
                cam.intrinsics.fy *= sy;
                cam.intrinsics.cy *= sy;
                cam.resolution.width = w;
                cam.resolution.height = h;
            }
            let mut settings = ck.settings;
            if let Some(r) = renderer {
                settings.renderer = *r;
            }
            let (img, _) = render_view(&ck.field, &settings, &cam)?;
            img.save(out)?;
            println!("wrote {}x{} image to {}", img.width, img.height, out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            renderer,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let dataset = Dataset::load(data)?;
            let report = evaluate(&ck, &dataset, *renderer)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            write(out, &report.to_csv())?;
            println!(
                "mean psnr_full {:.3} psnr_static {:.3}",
                report.mean_psnr_full(),
                report.mean_psnr_static()
            );
        }
        Command::Ablate { data, out, overrides } => {
            let cfg = resolve_config(cli, overrides)?;
            let dataset = Dataset::load(data)?;
            create_dir(out)?;
            write(&out.join("config.json"), &(config::to_json(&cfg) + "\n"))?;
            println!("config {}", serde_json::to_string(&config::to_flat(&cfg)).expect("config serializes"));
            let mut failures = Vec::new();
            let report = run_ablation(&cfg, &dataset, |variant, ck, log| {
                let dir = out.join(variant.replace('+', "_"));
                let saved = (|| -> Result<()> {
                    create_dir(&dir)?;
                    if let (Some(ck), Some(log)) = (ck, log) {
                        ck.save(&dir.join("checkpoint.ckpt"))?;
                        write(&dir.join("train_log.csv"), &log.to_csv())?;
                    }
                    Ok(())
                })();
                if let Err(e) = saved {
                    failures.push(format!("{variant}: {e}"));
                }
                println!("variant {variant} done");
            });
            write(&out.join("ablation.csv"), &report.to_csv())?;
            for (rank, (variant, psnr)) in report.ranking().iter().enumerate() {
                println!("{}. {variant} psnr_static {psnr:.3}", rank + 1);
            }
            for f in failures {
                eprintln!("warning: could not save artifacts for {f}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
