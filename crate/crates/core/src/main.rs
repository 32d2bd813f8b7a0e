use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gst_core::bench::{run_bench, BenchOptions};
use gst_core::body_model::{forward_lbs_unchecked, write_body_model, BodyModel};
use gst_core::config::{load_weights, RunConfig};
use gst_core::dataio::{generate_scene, load_scene, read_params, save_scene, write_params, RigConfig, SceneDataset};
use gst_core::error::{Error, Result};
use gst_core::fitting::{fit_scene_with, initial_avatar, FitInit, FitResult};
use gst_core::gaussian::ScaffoldConfig;
use gst_core::gradcheck::{run_suite, MODULES};
use gst_core::image::{read_png, write_png};
use gst_core::losses::LossReport;
use gst_core::metrics::evaluate_avatar;
use gst_core::pipeline::{forward, Avatar};
use gst_core::plots::{bar_chart, line_chart};
use gst_core::ply::export_ply;
use gst_core::predictor::{read_checkpoint, train, write_checkpoint, Predictor, TrainSample, Trainer};
use gst_core::raster::Camera;

const BODY_MODEL_FILE: &str = "body_model.gstb";

#[derive(Parser)]
#[command(name = "gst", version, about = "Gaussian splatting avatars anchored to a skinned body model")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Base seed for every random choice of the subcommand.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a random synthetic scene with ground truth to a directory.
    GenerateData(GenerateArgs),
    /// Fit pose, shape and Gaussians to a scene.
    Fit(FitArgs),
    /// Train the feed-forward predictor on synthetic samples.
    TrainToy(TrainArgs),
    /// Render stored parameters or a predictor's output.
    Render(RenderArgs),
    /// Image and pose metrics of parameters against a scene.
    Evaluate(EvaluateArgs),
    /// Finite-difference checks of the analytic gradients (JSON report).
    Gradcheck(GradcheckArgs),
    /// Rasterizer throughput table.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    views: Option<usize>,
    /// Square image size in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Defaults to --seed.
    #[arg(long)]
    pose_seed: Option<u64>,
    /// Defaults to --seed + 1.
    #[arg(long)]
    appearance_seed: Option<u64>,
    /// Existing body model to reference instead of writing the synthetic one.
    #[arg(long)]
    body_model: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    scene: PathBuf,
    /// gt, perturbed:<degrees> or tpose.
    #[arg(long, default_value = "perturbed:10")]
    init: String,
    #[arg(long)]
    steps: Option<usize>,
    /// TOML file with loss weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    lr_attributes: Option<f64>,
    #[arg(long)]
    lr_offsets: Option<f64>,
    #[arg(long)]
    lr_body: Option<f64>,
    /// Keep the shape coefficients fixed.
    #[arg(long)]
    fixed_shape: bool,
    #[arg(long)]
    out: PathBuf,
    /// Number of turntable frames to render.
    #[arg(long, default_value_t = 8)]
    turntable: usize,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    /// Also write loss-curve SVGs.
    #[arg(long)]
    emit_plots: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint to write; the trace goes next to it as CSV.
    #[arg(long)]
    out: PathBuf,
    /// Training scenes (repeatable). Without any, samples are generated.
    #[arg(long)]
    scene: Vec<PathBuf>,
    /// Number of generated samples when no scene is given.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Stop once the mean PSNR on the first sample reaches this value.
    #[arg(long)]
    target_psnr: Option<f64>,
    /// Steps between PSNR evaluations.
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    #[arg(long)]
    emit_plots: bool,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["params", "ckpt"]))]
struct RenderArgs {
    /// Scene providing cameras, background and body model.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Predictor input image (default: view 0 of the scene).
    #[arg(long, requires = "ckpt")]
    input: Option<PathBuf>,
    /// Render only this scene camera.
    #[arg(long, conflicts_with = "orbit")]
    camera: Option<usize>,
    /// Render this many orbit frames instead of the scene cameras.
    #[arg(long)]
    orbit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also export the scaffolded Gaussians as PLY.
    #[arg(long)]
    ply: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Parameters to evaluate (default: the scene's own ground truth).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Directory for metrics.json and metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, requires = "out")]
    emit_plots: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// One of rasterizer, scaffold, lbs, losses or all.
    #[arg(long, default_value = "all")]
    module: String,
    /// Consecutive seeds to run, starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Comma-separated thread counts to time.
    #[arg(long, value_delimiter = ',', default_value = "1,8")]
    thread_counts: Vec<usize>,
    #[arg(long)]
    no_backward: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn scene_with_model(dir: &Path) -> Result<(SceneDataset, BodyModel)> {
    let ds = load_scene(dir)?;
    let model = ds.load_body_model(dir)?;
    Ok((ds, model))
}

/// Orbit cameras around the root joint at the scene's resolution.
fn orbit_cameras(ds: &SceneDataset, model: &BodyModel, avatar: &Avatar, frames: usize) -> Result<Vec<Camera>> {
    let (width, height) = ds.resolution();
    let root = forward_lbs_unchecked(model, &avatar.pose, &avatar.betas).joints[0];
    RigConfig {
        views: frames,
        width,
        height,
        ..Default::default()
    }
    .cameras(&root)
}

fn write_frames(dir: &Path, prefix: &str, renders: &[gst_core::raster::ImageBuffer]) -> Result<()> {
    for (i, r) in renders.iter().enumerate() {
        write_png(&dir.join(format!("{prefix}_{i:03}.png")), &r.rgb, Some(&r.alpha))?;
    }
    Ok(())
}

fn loss_curve(title: &str, steps: &[(usize, &LossReport)]) -> String {
    let pick = |f: fn(&LossReport) -> f64| steps.iter().map(|(s, r)| (*s as f64, f(r))).collect::<Vec<_>>();
    line_chart(
        title,
        "step",
        &[
            ("total", pick(|r| r.total)),
            ("mse", pick(|r| r.mse)),
            ("perceptual", pick(|r| r.perceptual)),
            ("alpha_mask", pick(|r| r.alpha_mask)),
            ("tight", pick(|r| r.tight)),
        ],
        true,
    )
}

fn generate_data(cfg: &RunConfig, seed: u64, a: &GenerateArgs) -> Result<()> {
    let mut opts = cfg.generate.clone();
    if let Some(v) = a.views {
        opts.rig.views = v;
    }
    if let Some(s) = a.size {
        opts.rig.width = s;
        opts.rig.height = s;
    }
    create_dir(&a.out)?;
    let (model, model_ref) = match &a.body_model {
        Some(p) => (gst_core::body_model::read_body_model(p)?, fs::canonicalize(p).map_err(|e| Error::io(p, e))?),
        None => {
            let model = cfg.body.build()?;
            write_body_model(&model, &a.out.join(BODY_MODEL_FILE))?;
            (model, PathBuf::from(BODY_MODEL_FILE))
        }
    };
    let pose_seed = a.pose_seed.unwrap_or(seed);
    let appearance_seed = a.appearance_seed.unwrap_or(seed.wrapping_add(1));
    let ds = generate_scene(&model, pose_seed, appearance_seed, &opts, model_ref)?;
    save_scene(&ds, &a.out)?;
    eprintln!(
        "wrote {} views of {}x{} to {}",
        ds.num_views(),
        opts.rig.width,
        opts.rig.height,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FitSummary {
    init: String,
    steps: usize,
    best_step: usize,
    best_total: f64,
    initial_total: f64,
    metrics: gst_core::metrics::MetricsSummary,
}

fn fit(cfg: &RunConfig, seed: u64, a: &FitArgs) -> Result<()> {
    let (ds, model) = scene_with_model(&a.scene)?;
    let init: FitInit = a.init.parse()?;
    let mut opts = cfg.fit.clone();
    opts.seed = seed;
    if let Some(s) = a.steps {
        opts.steps = s;
    }
    if let Some(p) = &a.weights {
        opts.weights = load_weights(p)?;
    }
    if let Some(v) = a.lr_attributes {
        opts.lr_attributes = v;
    }
    if let Some(v) = a.lr_offsets {
        opts.lr_offsets = v;
    }
    if let Some(v) = a.lr_body {
        opts.lr_body = v;
    }
    if a.fixed_shape {
        opts.optimize_shape = false;
    }
    let scaffold_cfg = match (&init, &ds.gt) {
        (FitInit::GroundTruth, Some(gt)) => gt.scaffold,
        _ => cfg.scaffold,
    };
    let start = initial_avatar(&ds, &model, &scaffold_cfg, init, seed)?;
    let log_every = a.log_every.max(1);
    let res: FitResult = fit_scene_with(&ds, &model, &scaffold_cfg, &start, &opts, |e| {
        if e.step % log_every == 0 || e.step == opts.steps {
            eprintln!("step {:>5}  total {:.6e}  best {:.6e}", e.step, e.report.total, e.best_total);
        }
    })?;

    create_dir(&a.out)?;
    write_params(&a.out.join("params.json"), &res.avatar, &scaffold_cfg)?;
    write_text(&a.out.join("trace.csv"), &res.trace_csv())?;
    if a.turntable > 0 {
        let cams = orbit_cameras(&ds, &model, &res.avatar, a.turntable)?;
        let fwd = forward(&model, &res.avatar, &scaffold_cfg, &cams, &ds.background)?;
        write_frames(&a.out, "turntable", &fwd.renders)?;
    }
    let eval = evaluate_avatar(&model, &res.avatar, &scaffold_cfg, &ds)?;
    let summary = FitSummary {
        init: a.init.clone(),
        steps: opts.steps,
        best_step: res.best_step,
        best_total: res.best_total,
        initial_total: res.trace[0].report.total,
        metrics: eval.summary.clone(),
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    write_text(&a.out.join("metrics.csv"), &eval.csv())?;
    if a.emit_plots {
        let steps: Vec<(usize, &LossReport)> = res.trace.iter().map(|e| (e.step, &e.report)).collect();
        write_text(&a.out.join("loss_curve.svg"), &loss_curve("fit loss", &steps))?;
        write_text(&a.out.join("metrics.svg"), &metric_bars(&eval.summary))?;
    }
    emit(&(serde_json::to_string_pretty(&summary).expect("serializable") + "\n"));
    Ok(())
}

fn metric_bars(m: &gst_core::metrics::MetricsSummary) -> String {
    let mut bars = vec![("PSNR", m.psnr)];
    if let Some(v) = m.bbox_psnr {
        bars.push(("PSNR bbox", v));
    }
    if let Some(v) = m.ssim {
        bars.push(("SSIM", v));
    }
    if let Some(v) = m.mask_iou {
        bars.push(("mask IoU", v));
    }
    if let Some(v) = m.mpjpe_mm {
        bars.push(("MPJPE mm", v));
    }
    bar_chart("metrics", &bars)
}

fn train_toy(cfg: &RunConfig, seed: u64, a: &TrainArgs) -> Result<()> {
    let mut train_cfg = cfg.train.clone();
    if let Some(s) = a.steps {
        train_cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        train_cfg.lr = lr;
    }
    let (model, scenes) = if a.scene.is_empty() {
        if a.samples == 0 {
            return Err(Error::invalid("--samples must be at least 1"));
        }
        let model = cfg.body.build()?;
        let scenes = (0..a.samples as u64)
            .map(|k| {
                let s = seed.wrapping_add(2 * k);
                generate_scene(&model, s, s.wrapping_add(1), &cfg.generate, BODY_MODEL_FILE)
            })
            .collect::<Result<Vec<_>>>()?;
        (model, scenes)
    } else {
        let (first, model) = scene_with_model(&a.scene[0])?;
        let mut scenes = vec![first];
        for dir in &a.scene[1..] {
            scenes.push(load_scene(dir)?);
        }
        (model, scenes)
    };
    let mut pcfg = cfg.predictor.clone();
    pcfg.seed = seed;
    let predictor = Predictor::new(pcfg)?;
    let mut trainer = Trainer::from_config(predictor, cfg.scaffold, &train_cfg)?;
    let samples: Vec<TrainSample<'_>> = scenes
        .iter()
        .map(|s| TrainSample {
            input: &s.views[0].image,
            scene: s,
        })
        .collect();
    let eval_every = a.eval_every.max(1);
    let mut psnr_log: Vec<(usize, f64)> = Vec::new();
    let mut failure = None;
    let trace = train(&mut trainer, &model, &samples, &train_cfg, |step, r, t| {
        let last = step + 1 == train_cfg.steps;
        if (step + 1) % eval_every != 0 && !last {
            return true;
        }
        match t.psnr(&model, samples[0]) {
            Ok(p) => {
                eprintln!("step {:>5}  loss {:.6e}  grad {:.3e}  psnr {:.2} dB", step + 1, r.report.total, r.grad_norm, p);
                psnr_log.push((step + 1, p));
                a.target_psnr.is_none_or(|target| p < target)
            }
            Err(e) => {
                failure = Some(e);
                false
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    write_checkpoint(&trainer.predictor, &a.out)?;
    let mut csv = String::from("step,total,mse,perceptual,alpha_mask,tight,beta_reg,grad_norm\n");
    for (i, r) in trace.iter().enumerate() {
        csv.push_str(&format!("{},{:.9e}\n", r.report.csv_row(i), r.grad_norm));
    }
    write_text(&a.out.with_extension("csv"), &csv)?;
    if a.emit_plots {
        let steps: Vec<(usize, &LossReport)> = trace.iter().enumerate().map(|(i, r)| (i, &r.report)).collect();
        write_text(&a.out.with_extension("loss.svg"), &loss_curve("training loss", &steps))?;
        let pts: Vec<(f64, f64)> = psnr_log.iter().map(|&(s, p)| (s as f64, p)).collect();
        write_text(
            &a.out.with_extension("psnr.svg"),
            &line_chart("PSNR on sample 0 (dB)", "step", &[("psnr", pts)], false),
        )?;
    }
    emit(&format!(
        "{}\n",
        serde_json::json!({
            "steps": trace.len(),
            "final_loss": trace.last().map(|r| r.report.total),
            "psnr": psnr_log.last().map(|p| p.1),
            "checkpoint": a.out,
        })
    ));
    Ok(())
}

fn render_cmd(a: &RenderArgs) -> Result<()> {
    let (ds, model) = scene_with_model(&a.scene)?;
    let (avatar, scaffold_cfg) = match (&a.params, &a.ckpt) {
        (Some(p), _) => read_params(p)?,
        (None, Some(c)) => {
            let predictor = read_checkpoint(c)?;
            predictor.config.check_model(&model)?;
            let input = match &a.input {
                Some(p) => {
                    let (img, _) = read_png(p)?;
                    if img.channels != 3 {
                        return Err(Error::invalid(format!("{}: predictor input must be RGB", p.display())));
                    }
                    img
                }
                None => ds.views[0].image.clone(),
            };
            let (out, _) = predictor.forward(&input)?;
            let cfg = ScaffoldConfig {
                gaussians_per_vertex: predictor.config.gaussians_per_vertex,
                ..Default::default()
            };
            (out.to_avatar(), cfg)
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    avatar.validate(&model, &scaffold_cfg)?;
    let cameras = match (a.camera, a.orbit) {
        (Some(i), _) => vec![ds
            .views
            .get(i)
            .ok_or_else(|| Error::invalid(format!("camera {i} out of range (scene has {})", ds.num_views())))?
            .camera
            .clone()],
        (None, Some(n)) => orbit_cameras(&ds, &model, &avatar, n)?,
        (None, None) => ds.cameras(),
    };
    let fwd = forward(&model, &avatar, &scaffold_cfg, &cameras, &ds.background)?;
    create_dir(&a.out)?;
    write_frames(&a.out, "render", &fwd.renders)?;
    if a.ply {
        export_ply(&a.out.join("avatar.ply"), &fwd.lbs.vertices, &avatar.attrs, &scaffold_cfg)?;
    }
    eprintln!("wrote {} frames to {}", fwd.renders.len(), a.out.display());
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (ds, model) = scene_with_model(&a.scene)?;
    let (avatar, scaffold_cfg) = match &a.params {
        Some(p) => read_params(p)?,
        None => {
            let gt = ds
                .gt
                .as_ref()
                .ok_or_else(|| Error::invalid("scene has no ground truth; pass --params"))?;
            (gt.avatar.clone(), gt.scaffold)
        }
    };
    let eval = evaluate_avatar(&model, &avatar, &scaffold_cfg, &ds)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("metrics.json"), &eval)?;
        write_text(&out.join("metrics.csv"), &eval.csv())?;
        if a.emit_plots {
            write_text(&out.join("metrics.svg"), &metric_bars(&eval.summary))?;
        }
    }
    emit(&(serde_json::to_string_pretty(&eval.summary).expect("serializable") + "\n"));
    Ok(())
}

/// Returns whether every check passed.
fn gradcheck(seed: u64, a: &GradcheckArgs) -> Result<bool> {
    let modules: Vec<&str> = if a.module == "all" {
        MODULES.to_vec()
    } else {
        vec![a.module.as_str()]
    };
    let mut reports = Vec::new();
    for m in modules {
        reports.extend(run_suite(m, seed, a.seeds.max(1))?);
    }
    let pass = reports.iter().all(|r| r.pass);
    let doc = serde_json::json!({ "pass": pass, "reports": reports });
    let text = serde_json::to_string_pretty(&doc).expect("serializable");
    if let Some(p) = &a.out {
        write_text(p, &format!("{text}\n"))?;
    }
    emit(&(text + "\n"));
    Ok(pass)
}

fn bench(seed: u64, a: &BenchArgs) -> Result<()> {
    let report = run_bench(&BenchOptions {
        resolution: a.resolution,
        frames: a.frames,
        warmup: 2,
        threads: a.thread_counts.clone(),
        backward: !a.no_backward,
        seed,
    })?;
    emit(&report.table());
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::GenerateData(a) => generate_data(&cfg, cli.seed, a)?,
        Command::Fit(a) => fit(&cfg, cli.seed, a)?,
        Command::TrainToy(a) => train_toy(&cfg, cli.seed, a)?,
        Command::Render(a) => render_cmd(a)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Gradcheck(a) => {
            if !gradcheck(cli.seed, a)? {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Bench(a) => bench(cli.seed, a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
