//! Command-line frontend tying the pipeline together: synthesize a scene,
//! train a model, render views, extract depth, evaluate, augment.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use surfnerf_core::checkpoint::load_checkpoint;
use surfnerf_core::field::ModelKind;
use surfnerf_core::metrics::{altitude_mae, psnr, ssim, EvalReport, ImageEval, PsnrDb};
use surfnerf_core::scene::{
    load_dsm, load_image, load_manifest, save_dsm, save_manifest, save_raster, DsmGrid, Raster,
    SceneManifest, Split,
};
use surfnerf_core::threads::{thread_cap_from_env, THREADS_ENV};
use surfnerf_core::trainer::{
    render_topdown, render_view, run_training, Batching, SceneNorm, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "surfnerf",
    about = "Shadow-aware neural radiance fields over overhead scenes",
    long_about = None,
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an analytic box-and-plane scene (images, manifest, DSM)
    Synth(SynthArgs),
    /// Train a model on a scene
    Train(TrainArgs),
    /// Render views from a checkpoint
    Render(RenderArgs),
    /// Extract a top-down surface-altitude grid from a checkpoint
    Depth(DepthArgs),
    /// Evaluate a checkpoint (or pre-rendered images) against the test split
    Eval(EvalArgs),
    /// Generate zoom-and-crop augmented training views
    Augment(AugmentArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description JSON (defaults to the built-in two-box scene)
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory for the scene
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Nerf,
    Snerf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BatchingArg {
    AllRandom,
    PerImage,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene manifest (scene.json)
    #[arg(long)]
    scene: PathBuf,
    /// Run directory for config snapshot, metrics, checkpoints
    #[arg(long)]
    out: PathBuf,
    /// Training config JSON; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from a checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Shadow-term weight λ_s
    #[arg(long)]
    lambda_s: Option<f64>,
    #[arg(long, value_enum)]
    batching: Option<BatchingArg>,
    /// Drop the view-direction input
    #[arg(long)]
    no_viewdirs: bool,
    /// Positional-encoding frequency count for positions
    #[arg(long)]
    l_pos: Option<usize>,
    /// Positional-encoding frequency count for directions
    #[arg(long)]
    l_dir: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Which split to render
    #[arg(long, default_value = "test")]
    split: String,
    /// Render a single view by manifest index
    #[arg(long)]
    view: Option<usize>,
    #[arg(long, default_value_t = 64)]
    n_coarse: usize,
    #[arg(long, default_value_t = 128)]
    n_fine: usize,
}

#[derive(Args)]
struct DepthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Output .dsm path
    #[arg(long)]
    out: PathBuf,
    /// Also write a colormapped PNG (alt_min -> 0, alt_max -> 255)
    #[arg(long)]
    png: Option<PathBuf>,
    /// Take the grid geometry from an existing DSM (defaults to
    /// <scene dir>/dsm.dsm when present, else a square grid over the scene)
    #[arg(long)]
    grid_from: Option<PathBuf>,
    /// Cells per side when no grid template is available
    #[arg(long, default_value_t = 64)]
    cells: u32,
    #[arg(long, default_value_t = 64)]
    n_coarse: usize,
    #[arg(long, default_value_t = 128)]
    n_fine: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate (renders the test views)
    #[arg(long, required_unless_present = "pred")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scene: PathBuf,
    /// report.json output path
    #[arg(long)]
    out: PathBuf,
    /// Evaluate pre-rendered images from this directory (file names must
    /// match the manifest's test entries) instead of rendering
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Ground-truth DSM for the altitude MAE (defaults to
    /// <scene dir>/dsm.dsm when present)
    #[arg(long)]
    dsm: Option<PathBuf>,
    /// Directory for the rendered test views (default: alongside report)
    #[arg(long)]
    renders: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    n_coarse: usize,
    #[arg(long, default_value_t = 128)]
    n_fine: usize,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Output directory for the augmented scene (PNGs + updated manifest)
    #[arg(long)]
    out: PathBuf,
    /// Maximum zoom factor
    #[arg(long)]
    zoom: f64,
    /// Augmented views per source image (zoom levels spaced up to --zoom)
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0.0)]
    blur_sigma: f64,
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = thread_cap_from_env() {
        // applies to the whole process; every core loop runs inside rayon
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .unwrap_or_else(|e| eprintln!("warning: could not apply {THREADS_ENV}: {e}"));
    }
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Depth(args) => cmd_depth(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Augment(args) => cmd_augment(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(path) => surfnerf_core::synth::load_synth_spec(path)
            .with_context(|| format!("reading scene spec {}", path.display()))?,
        None => surfnerf_core::synth::SynthSceneSpec::default(),
    };
    let manifest = surfnerf_core::synth::synth_scene(&spec, &args.out)?;
    println!(
        "wrote scene '{}' with {} train / {} test views to {}",
        manifest.scene_id,
        manifest.train_entries().count(),
        manifest.test_entries().count(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    // flags win over the config file
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(iters) = args.iterations {
        cfg.iterations = iters;
    }
    if let Some(model) = args.model {
        cfg.model = match model {
            ModelArg::Nerf => ModelKind::Nerf,
            ModelArg::Snerf => ModelKind::Snerf,
        };
    }
    if let Some(l) = args.lambda_s {
        cfg.lambda_s = l;
    }
    if let Some(b) = args.batching {
        cfg.batching = match b {
            BatchingArg::AllRandom => Batching::AllRandom,
            BatchingArg::PerImage => Batching::PerImage,
        };
    }
    if args.no_viewdirs {
        cfg.use_viewdirs = false;
    }
    if let Some(l) = args.l_pos {
        cfg.l_pos = l;
    }
    if let Some(l) = args.l_dir {
        cfg.l_dir = l;
    }

    let manifest = load_manifest(&args.scene)
        .with_context(|| format!("loading scene {}", args.scene.display()))?;
    let outcome = run_training(&cfg, &manifest, &args.out, args.resume.as_deref())?;
    println!(
        "trained {} iterations; final checkpoint at {}",
        outcome.final_iteration,
        args.out.join("final.snrf").display()
    );
    Ok(())
}

fn load_model_and_scene(
    checkpoint: &Path,
    scene: &Path,
) -> Result<(surfnerf_core::field::Model<f32>, SceneManifest, SceneNorm)> {
    let (model, _, _) = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let manifest =
        load_manifest(scene).with_context(|| format!("loading scene {}", scene.display()))?;
    let norm = SceneNorm::from_manifest(&manifest);
    Ok((model, manifest, norm))
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let (model, manifest, norm) = load_model_and_scene(&args.checkpoint, &args.scene)?;
    std::fs::create_dir_all(&args.out)?;
    let selected: Vec<(usize, &surfnerf_core::scene::ImageEntry)> = manifest
        .images
        .iter()
        .enumerate()
        .filter(|(i, e)| {
            if let Some(v) = args.view {
                return *i == v;
            }
            match args.split.as_str() {
                "train" => e.split == Split::Train,
                "test" => e.split == Split::Test,
                _ => true,
            }
        })
        .collect();
    if selected.is_empty() {
        bail!("no views selected (split '{}', view {:?})", args.split, args.view);
    }
    for (i, entry) in selected {
        let view = render_view(
            &model,
            &norm,
            &entry.camera(),
            entry.sun_direction(),
            args.n_coarse,
            args.n_fine,
        );
        let stem = entry.file.file_stem().unwrap_or_default().to_string_lossy();
        let path = args.out.join(format!("render_{i:02}_{stem}.png"));
        save_raster(&view.color, &path)?;
        if let Some(albedo) = &view.albedo {
            save_raster(albedo, &args.out.join(format!("albedo_{i:02}_{stem}.png")))?;
        }
        if let Some(svis) = &view.sun_vis {
            let mut gray = Raster::new(view.color.width, view.color.height);
            for (px, s) in gray.data.iter_mut().zip(svis) {
                *px = [*s, *s, *s];
            }
            save_raster(&gray, &args.out.join(format!("sunvis_{i:02}_{stem}.png")))?;
        }
        println!("rendered view {i} -> {}", path.display());
    }
    Ok(())
}

fn depth_grid_template(args_grid: Option<&Path>, scene_dir: &Path, manifest: &SceneManifest, cells: u32) -> Result<DsmGrid> {
    if let Some(path) = args_grid {
        return Ok(load_dsm(path)?);
    }
    let default = scene_dir.join("dsm.dsm");
    if default.exists() {
        return Ok(load_dsm(&default)?);
    }
    // square grid over the normalization box
    let half = manifest.scene_scale;
    let cell = 2.0 * half / cells as f64;
    Ok(DsmGrid::new(
        cells,
        cells,
        cell,
        manifest.scene_origin[0] - half,
        manifest.scene_origin[1] - half,
        -9999.0,
    ))
}

fn cmd_depth(args: DepthArgs) -> Result<()> {
    let (model, manifest, norm) = load_model_and_scene(&args.checkpoint, &args.scene)?;
    let scene_dir = args.scene.parent().unwrap_or(Path::new("."));
    let template = depth_grid_template(args.grid_from.as_deref(), scene_dir, &manifest, args.cells)?;
    let (depth, _) = render_topdown(&model, &norm, &template, None, args.n_coarse, args.n_fine);
    save_dsm(&depth, &args.out)?;
    println!("wrote depth grid {}", args.out.display());
    if let Some(png) = &args.png {
        let mut img = Raster::new(depth.ncols, depth.nrows);
        let span = (manifest.alt_max - manifest.alt_min).max(1e-9);
        for (px, v) in img.data.iter_mut().zip(&depth.values) {
            let g = if depth.is_nodata(*v) {
                0.0
            } else {
                (((*v as f64 - manifest.alt_min) / span).clamp(0.0, 1.0)) as f32
            };
            *px = [g, g, g];
        }
        save_raster(&img, png)?;
        println!("wrote depth preview {}", png.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let manifest = load_manifest(&args.scene)
        .with_context(|| format!("loading scene {}", args.scene.display()))?;
    let scene_dir = args.scene.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut per_image = Vec::new();
    let mut depth_stats = None;

    match (&args.pred, &args.checkpoint) {
        (Some(pred_dir), _) => {
            for entry in manifest.test_entries() {
                let gt = load_image(&manifest, entry)?;
                let pred_path = pred_dir.join(&entry.file);
                let pred = surfnerf_core::scene::load_raster(&pred_path)
                    .with_context(|| format!("loading prediction {}", pred_path.display()))?;
                per_image.push(ImageEval {
                    file: entry.file.to_string_lossy().into_owned(),
                    psnr_db: PsnrDb(psnr(&pred, &gt)?),
                    ssim: ssim(&pred, &gt)?,
                    rendered: Some(pred_path.to_string_lossy().into_owned()),
                });
            }
        }
        (None, Some(ckpt)) => {
            let (model, _, norm) = load_model_and_scene(ckpt, &args.scene)?;
            let renders_dir = args
                .renders
                .clone()
                .unwrap_or_else(|| args.out.parent().unwrap_or(Path::new(".")).join("renders"));
            std::fs::create_dir_all(&renders_dir)?;
            for entry in manifest.test_entries() {
                let gt = load_image(&manifest, entry)?;
                let view = render_view(
                    &model,
                    &norm,
                    &entry.camera(),
                    entry.sun_direction(),
                    args.n_coarse,
                    args.n_fine,
                );
                let render_path = renders_dir.join(&entry.file);
                save_raster(&view.color, &render_path)?;
                per_image.push(ImageEval {
                    file: entry.file.to_string_lossy().into_owned(),
                    psnr_db: PsnrDb(psnr(&view.color, &gt)?),
                    ssim: ssim(&view.color, &gt)?,
                    rendered: Some(render_path.to_string_lossy().into_owned()),
                });
            }
            let dsm_path = args.dsm.clone().unwrap_or_else(|| scene_dir.join("dsm.dsm"));
            if dsm_path.exists() {
                let gt_dsm = load_dsm(&dsm_path)?;
                let (pred_dsm, _) =
                    render_topdown(&model, &norm, &gt_dsm, None, args.n_coarse, args.n_fine);
                depth_stats = Some(altitude_mae(&pred_dsm, &gt_dsm)?);
            }
        }
        (None, None) => bail!("need either --checkpoint or --pred"),
    }

    let report = EvalReport { scene_id: manifest.scene_id.clone(), per_image, depth: depth_stats };
    report.save(&args.out)?;
    println!("wrote report {}", args.out.display());
    Ok(())
}

fn cmd_augment(args: AugmentArgs) -> Result<()> {
    if args.count == 0 {
        bail!("--count must be at least 1");
    }
    let manifest = load_manifest(&args.scene)
        .with_context(|| format!("loading scene {}", args.scene.display()))?;
    std::fs::create_dir_all(&args.out)?;

    let mut augmented = manifest.clone();
    // copy source images so the output directory is a self-contained scene
    for entry in &manifest.images {
        std::fs::copy(manifest.image_path(entry), args.out.join(&entry.file))?;
    }
    let sources: Vec<surfnerf_core::scene::ImageEntry> =
        manifest.train_entries().filter(|e| !e.augmented).cloned().collect();
    let mut written = 0usize;
    for (si, entry) in sources.iter().enumerate() {
        let pixels = load_image(&manifest, entry)?;
        for k in 1..=args.count {
            // zoom levels spaced geometrically up to --zoom
            let zoom = args.zoom.powf(k as f64 / args.count as f64);
            let spec = surfnerf_core::augment::AugmentSpec {
                zoom,
                out_width: entry.width,
                out_height: entry.height,
                blur_sigma: args.blur_sigma,
            };
            let (raster, mut new_entry) = surfnerf_core::augment::zoom_and_crop(entry, &pixels, &spec)?;
            let file = format!("aug_{si:02}_{k}.png");
            save_raster(&raster, &args.out.join(&file))?;
            new_entry.file = file.into();
            augmented.images.push(new_entry);
            written += 1;
        }
    }
    augmented.base_dir = args.out.clone();
    save_manifest(&augmented, &args.out.join("scene.json"))?;
    println!(
        "wrote {written} augmented views and updated manifest to {}",
        args.out.join("scene.json").display()
    );
    Ok(())
}
