//! `flowtrack`: command-line front end for the segmentation and tracking pipeline.
//!
//! Exit codes: 0 on success, 1 on configuration or usage errors, 2 when a
//! processing stage fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowtrack_core::background::foreground_mask;
use flowtrack_core::eval::{
    coco_to_gt, evaluate, read_gt_jsonl, read_pred_jsonl, EvalMode, GtFrame,
};
use flowtrack_core::frame_io::{load_masks, load_sequence, write_gray, write_mask_sequence, Frame};
use flowtrack_core::instances::write_jsonl;
use flowtrack_core::overlay::{render_overlays, Canvas};
use flowtrack_core::pipeline::{
    ablate, gray_frames, instance_records, records_to_frames, run_frames, stage_background,
    stage_extract, stage_label, stage_refine, stage_track, PipelineConfig, Variant,
};
use flowtrack_core::synth::{generate, suite};
use flowtrack_core::tracker::trajectories_csv;
use flowtrack_core::{Error, SoftMask};

#[derive(Parser)]
#[command(
    name = "flowtrack",
    version,
    about = "Unsupervised video object segmentation and tracking"
)]
struct Cli {
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-frame stages (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seed for synthetic scenes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log level filter, e.g. `info` or `debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic suite with ground truth.
    Synth(SynthArgs),
    /// Estimate the background and write foreground masks.
    Bg(BgCmd),
    /// Stage-1 pseudo-labels from background subtraction and flow gating.
    Label(LabelCmd),
    /// Moving-average refinement of existing labels.
    Refine(RefineCmd),
    /// Connected instances with rotated boxes, as JSON lines.
    Extract(ExtractCmd),
    /// SORT tracking over an instance dump.
    Track(TrackCmd),
    /// COCO-style AP/AR of predictions against ground truth.
    Eval(EvalCmd),
    /// The whole pipeline with a run manifest.
    Run(RunCmd),
    /// Compare stage-toggle variants against ground truth.
    Ablate(AblateCmd),
}

#[derive(Args)]
struct SynthArgs {
    /// Suite name, S1..S5.
    #[arg(long)]
    suite: String,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct InputArgs {
    /// Directory of .pgm/.ppm/.png frames in lexicographic order.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Glob for frame file names.
    #[arg(long)]
    pattern: Option<String>,
}

#[derive(Args, Default)]
struct BgArgs {
    /// Leading frames in the background median.
    #[arg(long)]
    n: Option<usize>,
    /// Adaptive-threshold window (odd).
    #[arg(long)]
    window: Option<usize>,
    /// Adaptive-threshold offset.
    #[arg(long = "c")]
    c_offset: Option<f64>,
}

#[derive(Args, Default)]
struct FlowArgs {
    /// Minimum flow magnitude, pixels per frame.
    #[arg(long = "mag-th")]
    mag_threshold: Option<f64>,
    /// Run flow on raw frames instead of background-gated ones.
    #[arg(long)]
    no_bg_gate: bool,
}

#[derive(Args, Default)]
struct RefineArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Stability threshold on the mean per-pixel change.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_rounds: Option<usize>,
}

#[derive(Args, Default)]
struct InstanceArgs {
    #[arg(long = "score-th")]
    score_threshold: Option<f64>,
    #[arg(long = "bin-th")]
    bin_threshold: Option<f64>,
    #[arg(long)]
    nms_sigma: Option<f64>,
    #[arg(long)]
    min_area: Option<usize>,
}

#[derive(Args, Default)]
struct TrackerArgs {
    #[arg(long)]
    max_age: Option<u32>,
    #[arg(long)]
    min_hits: Option<u32>,
    #[arg(long = "iou-th")]
    iou_threshold: Option<f64>,
}

#[derive(Args)]
struct BgCmd {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    bg: BgArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LabelCmd {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    bg: BgArgs,
    #[command(flatten)]
    flow: FlowArgs,
    /// Also write HSV flow images here.
    #[arg(long)]
    flow_viz: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RefineCmd {
    #[command(flatten)]
    input: InputArgs,
    /// Directory of 0/255 label masks, one per frame.
    #[arg(long)]
    labels: PathBuf,
    #[command(flatten)]
    refine: RefineArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractCmd {
    /// Directory of 0/255 masks, one per frame.
    #[arg(long)]
    masks: PathBuf,
    #[command(flatten)]
    inst: InstanceArgs,
    /// Output JSON-lines file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrackCmd {
    #[arg(long)]
    instances: PathBuf,
    #[command(flatten)]
    tracker: TrackerArgs,
    /// Output trajectory CSV.
    #[arg(long)]
    out: PathBuf,
    /// Write per-frame overlay PNGs here (needs --frames).
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth: JSON lines, or COCO JSON when the extension is `.json`.
    #[arg(long)]
    gt: PathBuf,
    /// `mask` or `box`.
    #[arg(long)]
    mode: Option<EvalMode>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the ground truth converted to JSON lines here.
    #[arg(long)]
    dump_gt: Option<PathBuf>,
}

#[derive(Args)]
struct RunCmd {
    #[command(flatten)]
    input: InputArgs,
    /// Synthesize the input from this suite instead of reading --frames.
    #[arg(long)]
    suite: Option<String>,
    /// Frame count for --suite.
    #[arg(long, default_value_t = 60)]
    n_frames: usize,
    /// Ground-truth JSON lines to evaluate against.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    no_overlays: bool,
    #[command(flatten)]
    bg: BgArgs,
    #[command(flatten)]
    flow: FlowArgs,
    #[command(flatten)]
    refine: RefineArgs,
    #[command(flatten)]
    inst: InstanceArgs,
    #[command(flatten)]
    tracker: TrackerArgs,
}

#[derive(Args)]
struct AblateCmd {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    suite: Option<String>,
    #[arg(long, default_value_t = 60)]
    n_frames: usize,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Comma-separated variants: `full`, `no-bg-gate`, `no-refine`, or
    /// `+`-joined combinations. Empty yields a header-only table.
    #[arg(long, default_value = "full,no-bg-gate")]
    variants: String,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

/// Error classified by exit code.
enum Failure {
    Config(String),
    Stage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Stage(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(Error::Config(msg.into()).to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn base_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_input(cfg: &mut PipelineConfig, a: &InputArgs) {
    if a.frames.is_some() {
        cfg.input.frames_dir = a.frames.clone();
    }
    set(&mut cfg.input.pattern, a.pattern.clone());
}

fn apply_bg(cfg: &mut PipelineConfig, a: &BgArgs) {
    set(&mut cfg.background.n_frames, a.n);
    if let Some(w) = a.window {
        cfg.background.threshold.window = w;
        cfg.background.threshold.gaussian_sigma = w as f64 / 6.0;
    }
    set(&mut cfg.background.threshold.c_offset, a.c_offset);
}

fn apply_flow(cfg: &mut PipelineConfig, a: &FlowArgs) {
    set(&mut cfg.flow.mag_threshold, a.mag_threshold);
    if a.no_bg_gate {
        cfg.flow.bg_gate = false;
    }
}

fn apply_refine(cfg: &mut PipelineConfig, a: &RefineArgs) {
    set(&mut cfg.refine.alpha, a.alpha);
    set(&mut cfg.refine.beta, a.beta);
    set(&mut cfg.refine.stability_eps, a.eps);
    set(&mut cfg.refine.max_rounds, a.max_rounds);
}

fn apply_instances(cfg: &mut PipelineConfig, a: &InstanceArgs) {
    set(&mut cfg.instances.score_threshold, a.score_threshold);
    set(&mut cfg.instances.bin_threshold, a.bin_threshold);
    set(&mut cfg.instances.nms_sigma, a.nms_sigma);
    set(&mut cfg.instances.min_area, a.min_area);
}

fn apply_tracker(cfg: &mut PipelineConfig, a: &TrackerArgs) {
    set(&mut cfg.tracker.max_age, a.max_age);
    set(&mut cfg.tracker.min_hits, a.min_hits);
    set(&mut cfg.tracker.iou_threshold, a.iou_threshold);
}

fn load_frames(cfg: &PipelineConfig) -> CliResult<Vec<Frame>> {
    let dir = cfg
        .input
        .frames_dir
        .as_deref()
        .ok_or_else(|| config_err("--frames (or input.frames_dir) is required"))?;
    Ok(load_sequence(dir, &cfg.input.pattern).map_err(|e| e.in_stage("load", None))?)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Stage(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Failure::Stage(format!("{}: {e}", path.display())))
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut cfg = base_config(&cli)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, cli.seed, &cfg),
        Command::Bg(a) => {
            apply_input(&mut cfg, &a.input);
            apply_bg(&mut cfg, &a.bg);
            cfg.validate()?;
            cfg.install(|| cmd_bg(a, &cfg))?
        }
        Command::Label(a) => {
            apply_input(&mut cfg, &a.input);
            apply_bg(&mut cfg, &a.bg);
            apply_flow(&mut cfg, &a.flow);
            cfg.validate()?;
            cfg.install(|| cmd_label(a, &cfg))?
        }
        Command::Refine(a) => {
            apply_input(&mut cfg, &a.input);
            apply_refine(&mut cfg, &a.refine);
            cfg.stages.refine = true;
            cfg.validate()?;
            cfg.install(|| cmd_refine(a, &cfg))?
        }
        Command::Extract(a) => {
            apply_instances(&mut cfg, &a.inst);
            cfg.validate()?;
            cfg.install(|| cmd_extract(a, &cfg))?
        }
        Command::Track(a) => {
            apply_input(&mut cfg, &a.input);
            apply_tracker(&mut cfg, &a.tracker);
            cfg.validate()?;
            cfg.install(|| cmd_track(a, &cfg))?
        }
        Command::Eval(a) => {
            set(&mut cfg.eval.mode, a.mode);
            cmd_eval(a, &cfg)
        }
        Command::Run(a) => {
            apply_input(&mut cfg, &a.input);
            apply_bg(&mut cfg, &a.bg);
            apply_flow(&mut cfg, &a.flow);
            apply_refine(&mut cfg, &a.refine);
            apply_instances(&mut cfg, &a.inst);
            apply_tracker(&mut cfg, &a.tracker);
            if a.no_refine {
                cfg.stages.refine = false;
            }
            if a.no_overlays {
                cfg.stages.overlays = false;
            }
            if a.out.is_some() {
                cfg.output.dir = a.out.clone();
            }
            if a.gt.is_some() {
                cfg.input.gt = a.gt.clone();
            }
            cfg.validate()?;
            cmd_run(a, cli.seed, &cfg)
        }
        Command::Ablate(a) => {
            apply_input(&mut cfg, &a.input);
            if a.gt.is_some() {
                cfg.input.gt = a.gt.clone();
            }
            cfg.validate()?;
            cmd_ablate(a, cli.seed, &cfg)
        }
    }
}

fn synth_input(
    name: &str,
    n_frames: usize,
    seed: Option<u64>,
) -> CliResult<(Vec<Frame>, Vec<GtFrame>)> {
    let mut spec = suite(name)?;
    if let Some(s) = seed {
        spec = spec.with_seed(s);
    }
    let (frames, truth) = generate(&spec, n_frames)?;
    Ok((frames, truth.to_gt()))
}

fn cmd_synth(a: &SynthArgs, seed: Option<u64>, cfg: &PipelineConfig) -> CliResult<()> {
    let mut spec = suite(&a.suite)?;
    if let Some(s) = seed {
        spec = spec.with_seed(s);
    }
    let (frames, truth) = cfg.install(|| generate(&spec, a.frames))??;
    ensure_dir(&a.out)?;
    flowtrack_core::frame_io::write_sequence(&frames, &a.out.join("frames"), "frame_")?;
    let unions: Vec<_> = (0..frames.len()).map(|t| truth.union_mask(t)).collect();
    write_mask_sequence(&unions, &a.out.join("truth"), "mask_")?;
    write_file(
        &a.out.join("gt.jsonl"),
        write_jsonl(&truth.to_gt())?.as_bytes(),
    )?;
    println!(
        "wrote {} frames of {} to {}",
        frames.len(),
        spec.name,
        a.out.display()
    );
    Ok(())
}

fn cmd_bg(a: &BgCmd, cfg: &PipelineConfig) -> CliResult<()> {
    let frames = load_frames(cfg)?;
    let grays = gray_frames(&frames)?;
    let bg = stage_background(&grays, cfg)?;
    ensure_dir(&a.out)?;
    write_gray(&bg.median_image, &a.out.join("background.pgm"))?;
    let masks = grays
        .iter()
        .enumerate()
        .map(|(t, g)| {
            foreground_mask(g, &bg, &cfg.background.threshold)
                .map_err(|e| e.in_stage("background", Some(t)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_mask_sequence(&masks, &a.out, "fg_")?;
    println!(
        "background from {} frames; {} masks in {}",
        bg.n_frames_used,
        masks.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_label(a: &LabelCmd, cfg: &PipelineConfig) -> CliResult<()> {
    let frames = load_frames(cfg)?;
    let grays = gray_frames(&frames)?;
    let bg = stage_background(&grays, cfg)?;
    let labelled = stage_label(&grays, &bg, cfg)?;
    let masks: Vec<_> = labelled.iter().map(|(m, _)| m.clone()).collect();
    write_mask_sequence(&masks, &a.out, "label_")?;
    if let Some(dir) = &a.flow_viz {
        ensure_dir(dir)?;
        // one magnitude scale for the whole sequence keeps frames comparable
        let max_mag = labelled
            .iter()
            .flat_map(|(_, f)| f.u.iter().zip(&f.v).map(|(u, v)| u.hypot(*v)))
            .fold(0.0f32, f32::max);
        for (t, (_, flow)) in labelled.iter().enumerate() {
            let canvas = Canvas {
                width: flow.width(),
                height: flow.height(),
                rgb: flow.to_rgb(max_mag),
            };
            canvas.write_png(&dir.join(format!("flow_{t:05}.png")))?;
        }
    }
    println!("{} labels in {}", masks.len(), a.out.display());
    Ok(())
}

fn cmd_refine(a: &RefineCmd, cfg: &PipelineConfig) -> CliResult<()> {
    let frames = load_frames(cfg)?;
    let labels = load_masks(&a.labels, "*.pgm").map_err(|e| e.in_stage("load", None))?;
    let (masks, _, info) = stage_refine(&frames, &labels, cfg)?;
    write_mask_sequence(&masks, &a.out, "mask_")?;
    if let Some((rounds, converged, log)) = info {
        write_file(&a.out.join("refine_log.csv"), log.as_bytes())?;
        println!("{rounds} rounds, converged: {converged}");
    }
    Ok(())
}

fn cmd_extract(a: &ExtractCmd, cfg: &PipelineConfig) -> CliResult<()> {
    let masks = load_masks(&a.masks, "*.pgm").map_err(|e| e.in_stage("load", None))?;
    let soft: Vec<SoftMask> = masks.iter().map(SoftMask::from_binary).collect();
    let records = instance_records(&stage_extract(&soft, cfg)?);
    write_file(&a.out, write_jsonl(&records)?.as_bytes())?;
    println!("{} instances over {} frames", records.len(), masks.len());
    Ok(())
}

fn cmd_track(a: &TrackCmd, cfg: &PipelineConfig) -> CliResult<()> {
    let records = read_pred_jsonl(&a.instances).map_err(|e| e.in_stage("load", None))?;
    let frames = match (&a.overlay, &cfg.input.frames_dir) {
        (None, _) => None,
        (Some(_), None) => return Err(config_err("--overlay needs --frames")),
        (Some(_), Some(_)) => Some(load_frames(cfg)?),
    };
    let n_frames = match &frames {
        Some(f) => f.len(),
        None => records.iter().map(|r| r.frame + 1).max().unwrap_or(0),
    };
    let per_frame = records_to_frames(&records, n_frames).map_err(|e| e.in_stage("track", None))?;
    let tracks = stage_track(&per_frame, cfg)?;
    write_file(&a.out, trajectories_csv(&tracks).as_bytes())?;
    if let (Some(dir), Some(frames)) = (&a.overlay, &frames) {
        ensure_dir(dir)?;
        for (t, c) in render_overlays(frames, &tracks, cfg.output.tail_length)
            .iter()
            .enumerate()
        {
            c.write_png(&dir.join(format!("overlay_{t:05}.png")))?;
        }
    }
    let ids: std::collections::BTreeSet<u64> = tracks.iter().map(|t| t.track_id).collect();
    println!("{} track ids over {n_frames} frames", ids.len());
    Ok(())
}

fn read_gt_any(path: &Path) -> CliResult<Vec<GtFrame>> {
    let is_coco = path.extension().and_then(|e| e.to_str()) == Some("json");
    let gt = if is_coco {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Stage(format!("{}: {e}", path.display())))?;
        let doc: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Stage(format!("{}: {e}", path.display())))?;
        coco_to_gt(&doc)
    } else {
        read_gt_jsonl(path)
    };
    Ok(gt.map_err(|e| e.in_stage("load", None))?)
}

fn cmd_eval(a: &EvalCmd, cfg: &PipelineConfig) -> CliResult<()> {
    let gt = read_gt_any(&a.gt)?;
    if let Some(p) = &a.dump_gt {
        write_file(p, write_jsonl(&gt)?.as_bytes())?;
    }
    let preds = read_pred_jsonl(&a.pred).map_err(|e| e.in_stage("load", None))?;
    let report = evaluate(&preds, &gt, cfg.eval.mode).map_err(|e| e.in_stage("eval", None))?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    if let Some(p) = &a.report {
        write_file(p, text.as_bytes())?;
    }
    println!("{text}");
    Ok(())
}

fn run_input(
    cfg: &PipelineConfig,
    suite_name: Option<&str>,
    n_frames: usize,
    seed: Option<u64>,
) -> CliResult<(Vec<Frame>, Option<Vec<GtFrame>>)> {
    if let Some(name) = suite_name {
        let (frames, gt) = cfg.install(|| synth_input(name, n_frames, seed))??;
        return Ok((frames, Some(gt)));
    }
    let frames = cfg.install(|| load_frames(cfg))??;
    let gt = match &cfg.input.gt {
        Some(p) => Some(read_gt_any(p)?),
        None => None,
    };
    Ok((frames, gt))
}

fn cmd_run(a: &RunCmd, seed: Option<u64>, cfg: &PipelineConfig) -> CliResult<()> {
    let (frames, gt) = run_input(cfg, a.suite.as_deref(), a.n_frames, seed)?;
    let out = run_frames(&frames, gt.as_deref(), cfg)?;
    let m = &out.manifest;
    println!(
        "{} frames in {:.1} ms ({:.2} frames/s)",
        m.frames, m.total_ms, m.fps
    );
    for s in &m.stages {
        println!("  {:<10} {:>10.1} ms", s.stage, s.ms);
    }
    if let Some(r) = &m.eval {
        for (k, v) in r.fields() {
            println!("  {k:<10} {v:.4}");
        }
    }
    Ok(())
}

fn cmd_ablate(a: &AblateCmd, seed: Option<u64>, cfg: &PipelineConfig) -> CliResult<()> {
    let variants = a
        .variants
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Variant::parse)
        .collect::<Result<Vec<_>, _>>()?;
    let (frames, gt) = run_input(cfg, a.suite.as_deref(), a.n_frames, seed)?;
    let gt = gt.ok_or_else(|| config_err("ablation needs ground truth: --gt or --suite"))?;
    let (csv, _) = ablate(&frames, &gt, cfg, &variants)?;
    write_file(&a.out, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}
