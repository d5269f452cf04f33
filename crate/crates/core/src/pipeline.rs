//! End-to-end orchestration: background, labels, refinement, instances,
//! tracking, overlays and a run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::background::{estimate_background, BackgroundModel, ThresholdParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, read_gt_jsonl, EvalMode, EvalReport, GtFrame};
use crate::flow::{pseudo_label_and_flow, FlowField, FlowParams};
use crate::frame_io::{
    load_sequence, to_gray, write_gray, write_mask_sequence, BinaryMask, Frame, GrayFrame,
};
use crate::instances::{
    binarize_and_extract, write_jsonl, Instance, InstanceParams, InstanceRecord, RotatedBox,
};
use crate::overlay::render_overlays;
use crate::refine::{refine_labels, RefineParams, SoftMask, Stage1Blend};
use crate::tracker::{track_sequence, trajectories_csv, TrackOutput, TrackerConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    pub frames_dir: Option<PathBuf>,
    pub pattern: String,
    /// Ground-truth JSONL; when present the run also writes an eval report.
    pub gt: Option<PathBuf>,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            frames_dir: None,
            pattern: "*".into(),
            gt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Artifact directory. Without one, `run` keeps everything in memory.
    pub dir: Option<PathBuf>,
    /// Centers kept in each overlay tail.
    pub tail_length: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: None,
            tail_length: 15,
        }
    }
}

/// Stage switches. Flow gating is `flow.bg_gate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageToggles {
    pub refine: bool,
    pub overlays: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            refine: true,
            overlays: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundConfig {
    /// Leading frames used for the median.
    pub n_frames: usize,
    pub threshold: ThresholdParams,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            n_frames: 10,
            threshold: ThresholdParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: EvalMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Mask,
        }
    }
}

/// Every tunable of the pipeline, one namespace per module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub input: InputConfig,
    pub output: OutputConfig,
    pub stages: StageToggles,
    pub background: BackgroundConfig,
    pub flow: FlowParams,
    pub refine: RefineParams,
    pub instances: InstanceParams,
    pub tracker: TrackerConfig,
    pub eval: EvalConfig,
    /// Worker threads for the per-frame stages; `None` uses all cores.
    pub workers: Option<usize>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let wrap =
            |module: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("{module}: {e}")));
        if self.background.n_frames == 0 {
            return Err(Error::Config("background: n_frames must be >= 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        glob::Pattern::new(&self.input.pattern)
            .map_err(|e| Error::Config(format!("input: bad pattern: {e}")))?;
        wrap("background", self.background.threshold.validate())?;
        wrap("flow", self.flow.validate())?;
        wrap("refine", self.refine.validate())?;
        wrap("instances", self.instances.validate())?;
        wrap("tracker", self.tracker.validate())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Runs `f` on a pool sized by `workers`.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.workers {
            None => Ok(f()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
                Ok(pool.install(f))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub frames: usize,
    pub stages: Vec<StageTiming>,
    pub total_ms: f64,
    pub fps: f64,
    pub refine_rounds: Option<usize>,
    pub refine_converged: Option<bool>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub eval: Option<EvalReport>,
}

impl RunManifest {
    /// Frames per second recomputed from the per-stage timings.
    pub fn recomputed_fps(&self) -> f64 {
        let total: f64 = self.stages.iter().map(|s| s.ms).sum();
        fps(self.frames, total)
    }
}

fn fps(frames: usize, total_ms: f64) -> f64 {
    if total_ms > 0.0 {
        frames as f64 / (total_ms / 1000.0)
    } else {
        0.0
    }
}

/// Everything a run produces, kept in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub background: BackgroundModel,
    pub stage1: Vec<BinaryMask>,
    pub refined: Vec<BinaryMask>,
    pub soft: Vec<SoftMask>,
    pub instances: Vec<InstanceRecord>,
    pub tracks: Vec<TrackOutput>,
}

pub fn gray_frames(frames: &[Frame]) -> Result<Vec<GrayFrame>> {
    frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| to_gray(f).map_err(|e| e.in_stage("load", Some(i))))
        .collect()
}

pub fn stage_background(grays: &[GrayFrame], cfg: &PipelineConfig) -> Result<BackgroundModel> {
    estimate_background(grays, cfg.background.n_frames).map_err(|e| e.in_stage("background", None))
}

/// Stage-1 label and flow for every frame.
///
/// Frame `t >= 1` is labelled from the pair `(t-1, t)`; frame 0 borrows the
/// pair `(1, 0)` so that every frame gets a label on its own grid.
pub fn stage_label(
    grays: &[GrayFrame],
    bg: &BackgroundModel,
    cfg: &PipelineConfig,
) -> Result<Vec<(BinaryMask, FlowField)>> {
    if grays.len() < 2 {
        return Err(
            Error::Empty("labelling needs at least two frames".into()).in_stage("label", None)
        );
    }
    (0..grays.len())
        .into_par_iter()
        .map(|t| {
            let (prev, cur) = if t == 0 { (1, 0) } else { (t - 1, t) };
            pseudo_label_and_flow(
                &grays[prev],
                &grays[cur],
                bg,
                &cfg.background.threshold,
                &cfg.flow,
            )
            .map_err(|e| e.in_stage("label", Some(t)))
        })
        .collect()
}

/// Refined masks and probabilities. With refinement off the stage-1 labels
/// pass through unchanged.
pub fn stage_refine(
    frames: &[Frame],
    stage1: &[BinaryMask],
    cfg: &PipelineConfig,
) -> Result<(
    Vec<BinaryMask>,
    Vec<SoftMask>,
    Option<(usize, bool, String)>,
)> {
    let soft1: Vec<SoftMask> = stage1.iter().map(SoftMask::from_binary).collect();
    if !cfg.stages.refine {
        return Ok((stage1.to_vec(), soft1, None));
    }
    let predictor = Stage1Blend {
        stage1: soft1.clone(),
    };
    let out = refine_labels(frames, &soft1, &predictor, &cfg.refine)
        .map_err(|e| e.in_stage("refine", None))?;
    let log = out.log_csv();
    Ok((out.masks, out.soft, Some((out.rounds, out.converged, log))))
}

pub fn stage_extract(
    soft: &[SoftMask],
    cfg: &PipelineConfig,
) -> Result<Vec<Vec<(Instance, RotatedBox)>>> {
    soft.par_iter()
        .enumerate()
        .map(|(t, s)| {
            binarize_and_extract(s, &cfg.instances).map_err(|e| e.in_stage("extract", Some(t)))
        })
        .collect()
}

pub fn instance_records(per_frame: &[Vec<(Instance, RotatedBox)>]) -> Vec<InstanceRecord> {
    per_frame
        .iter()
        .enumerate()
        .flat_map(|(t, v)| v.iter().map(move |(i, r)| InstanceRecord::new(t, i, r)))
        .collect()
}

/// Groups records by frame, producing `n_frames` detection lists.
pub fn records_to_frames(
    records: &[InstanceRecord],
    n_frames: usize,
) -> Result<Vec<Vec<(Instance, RotatedBox)>>> {
    let mut out = vec![Vec::new(); n_frames];
    for r in records {
        let slot = out.get_mut(r.frame).ok_or_else(|| {
            Error::InvalidParam(format!(
                "record for frame {} but only {n_frames} frames",
                r.frame
            ))
        })?;
        slot.push(r.to_instance()?);
    }
    Ok(out)
}

pub fn stage_track(
    per_frame: &[Vec<(Instance, RotatedBox)>],
    cfg: &PipelineConfig,
) -> Result<Vec<TrackOutput>> {
    track_sequence(per_frame, &cfg.tracker).map_err(|e| e.in_stage("track", None))
}

struct Clock {
    stages: Vec<StageTiming>,
    last: Instant,
}

impl Clock {
    fn new() -> Self {
        Clock {
            stages: Vec::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.stages.push(StageTiming {
            stage: stage.into(),
            ms: (now - self.last).as_secs_f64() * 1000.0,
        });
        self.last = now;
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs the pipeline on frames already in memory.
///
/// Artifacts are written under `cfg.output.dir` when it is set. `gt`, when
/// given, is evaluated against the extracted instances.
pub fn run_frames(
    frames: &[Frame],
    gt: Option<&[GtFrame]>,
    cfg: &PipelineConfig,
) -> Result<RunOutput> {
    cfg.validate()?;
    cfg.install(|| run_inner(frames, gt, cfg))?
}

fn run_inner(frames: &[Frame], gt: Option<&[GtFrame]>, cfg: &PipelineConfig) -> Result<RunOutput> {
    let mut clock = Clock::new();
    let mut artifacts = BTreeMap::new();
    let out_dir = cfg.output.dir.as_deref();
    let stage_io = |stage: &'static str| move |e: Error| e.in_stage(stage, None);

    if let Some(dir) = out_dir {
        create_dir(dir)?;
    }
    let grays = gray_frames(frames)?;
    clock.lap("load");

    let bg = stage_background(&grays, cfg)?;
    if let Some(dir) = out_dir {
        let p = dir.join("background.pgm");
        write_gray(&bg.median_image, &p).map_err(stage_io("background"))?;
        artifacts.insert("background".into(), p);
    }
    clock.lap("background");

    let labelled = stage_label(&grays, &bg, cfg)?;
    let stage1: Vec<BinaryMask> = labelled.into_iter().map(|(m, _)| m).collect();
    if let Some(dir) = out_dir {
        let p = dir.join("labels");
        write_mask_sequence(&stage1, &p, "label_").map_err(stage_io("label"))?;
        artifacts.insert("labels".into(), p);
    }
    clock.lap("label");

    let (refined, soft, refine_info) = stage_refine(frames, &stage1, cfg)?;
    if let Some(dir) = out_dir {
        let p = dir.join("refined");
        write_mask_sequence(&refined, &p, "mask_").map_err(stage_io("refine"))?;
        artifacts.insert("refined".into(), p);
        if let Some((_, _, log)) = &refine_info {
            let p = dir.join("refine_log.csv");
            write_text(&p, log).map_err(stage_io("refine"))?;
            artifacts.insert("refine_log".into(), p);
        }
    }
    clock.lap("refine");

    let per_frame = stage_extract(&soft, cfg)?;
    let records = instance_records(&per_frame);
    if let Some(dir) = out_dir {
        let p = dir.join("instances.jsonl");
        write_text(&p, &write_jsonl(&records)?).map_err(stage_io("extract"))?;
        artifacts.insert("instances".into(), p);
    }
    clock.lap("extract");

    let tracks = stage_track(&per_frame, cfg)?;
    if let Some(dir) = out_dir {
        let p = dir.join("trajectories.csv");
        write_text(&p, &trajectories_csv(&tracks)).map_err(stage_io("track"))?;
        artifacts.insert("trajectories".into(), p);
    }
    clock.lap("track");

    if cfg.stages.overlays {
        if let Some(dir) = out_dir {
            let p = dir.join("overlays");
            create_dir(&p)?;
            let canvases = render_overlays(frames, &tracks, cfg.output.tail_length);
            canvases
                .par_iter()
                .enumerate()
                .map(|(t, c)| {
                    c.write_png(&p.join(format!("overlay_{t:05}.png")))
                        .map_err(|e| e.in_stage("overlay", Some(t)))
                })
                .collect::<Result<()>>()?;
            artifacts.insert("overlays".into(), p);
        }
        clock.lap("overlay");
    }

    let report = match gt {
        Some(gt) => {
            let r = evaluate(&records, gt, cfg.eval.mode).map_err(|e| e.in_stage("eval", None))?;
            if let Some(dir) = out_dir {
                let p = dir.join("report.json");
                write_text(&p, &serde_json::to_string_pretty(&r)?).map_err(stage_io("eval"))?;
                artifacts.insert("report".into(), p);
            }
            clock.lap("eval");
            Some(r)
        }
        None => None,
    };

    let total_ms: f64 = clock.stages.iter().map(|s| s.ms).sum();
    let mut manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        config: cfg.clone(),
        frames: frames.len(),
        total_ms,
        fps: fps(frames.len(), total_ms),
        stages: clock.stages,
        refine_rounds: refine_info.as_ref().map(|r| r.0),
        refine_converged: refine_info.as_ref().map(|r| r.1),
        artifacts,
        eval: report,
    };
    if let Some(dir) = out_dir {
        let p = dir.join("manifest.json");
        manifest.artifacts.insert("manifest".into(), p.clone());
        write_atomic(&p, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    }
    Ok(RunOutput {
        manifest,
        background: bg,
        stage1,
        refined,
        soft,
        instances: records,
        tracks,
    })
}

/// Loads frames (and ground truth, if configured) and runs the pipeline.
pub fn run(cfg: &PipelineConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let dir = cfg
        .input
        .frames_dir
        .as_deref()
        .ok_or_else(|| Error::Config("input.frames_dir is required".into()))?;
    let frames = cfg
        .install(|| load_sequence(dir, &cfg.input.pattern))?
        .map_err(|e| e.in_stage("load", None))?;
    let gt = match &cfg.input.gt {
        Some(p) => Some(read_gt_jsonl(p).map_err(|e| e.in_stage("load", None))?),
        None => None,
    };
    run_frames(&frames, gt.as_deref(), cfg).map(|o| o.manifest)
}

/// One ablation setting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub bg_gate: bool,
    pub refine: bool,
}

impl Variant {
    pub fn full() -> Self {
        Variant {
            name: "full".into(),
            bg_gate: true,
            refine: true,
        }
    }

    /// Parses `full` or a `+`-joined list of `no-bg-gate` / `no-refine`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut v = Variant {
            name: s.to_string(),
            ..Variant::full()
        };
        if s == "full" {
            return Ok(v);
        }
        for part in s.split('+') {
            match part {
                "no-bg-gate" => v.bg_gate = false,
                "no-refine" => v.refine = false,
                other => return Err(Error::Config(format!("unknown ablation toggle `{other}`"))),
            }
        }
        Ok(v)
    }

    pub fn apply(&self, cfg: &PipelineConfig) -> PipelineConfig {
        let mut c = cfg.clone();
        c.flow.bg_gate = self.bg_gate;
        c.stages.refine = self.refine;
        c
    }
}

pub const ABLATION_HEADER: &str =
    "variant,bg_gate,refine,ap_mean,ap50,ap75,ap_large,ar_mean,ar_large,n_pred";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Runs each variant in memory, evaluates it and returns the CSV table
/// together with the reports.
pub fn ablate(
    frames: &[Frame],
    gt: &[GtFrame],
    cfg: &PipelineConfig,
    variants: &[Variant],
) -> Result<(String, Vec<EvalReport>)> {
    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    let mut reports = Vec::new();
    for v in variants {
        let mut c = v.apply(cfg);
        c.output.dir = None;
        c.stages.overlays = false;
        let out = run_frames(frames, Some(gt), &c)?;
        let r = out.manifest.eval.expect("ground truth was supplied");
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            v.name,
            v.bg_gate,
            v.refine,
            opt(r.ap_mean),
            opt(r.ap50),
            opt(r.ap75),
            opt(r.ap_large),
            opt(r.ar_mean),
            opt(r.ar_large),
            r.n_pred
        ));
        reports.push(r);
    }
    Ok((csv, reports))
}
