//! Shared fixtures for the stage benchmarks.

use flowtrack_core::background::BackgroundModel;
use flowtrack_core::pipeline::{gray_frames, stage_background, stage_label, PipelineConfig};
use flowtrack_core::synth::{generate, suite};
use flowtrack_core::{BinaryMask, Frame, GrayFrame, Result, SoftMask};

/// A synthetic sequence with its stage-1 outputs precomputed.
pub struct Fixture {
    pub frames: Vec<Frame>,
    pub grays: Vec<GrayFrame>,
    pub background: BackgroundModel,
    pub labels: Vec<BinaryMask>,
    pub soft: Vec<SoftMask>,
}

pub fn fixture(suite_name: &str, n_frames: usize) -> Result<Fixture> {
    let (frames, _) = generate(&suite(suite_name)?, n_frames)?;
    let cfg = PipelineConfig::default();
    let grays = gray_frames(&frames)?;
    let background = stage_background(&grays, &cfg)?;
    let labels: Vec<BinaryMask> = stage_label(&grays, &background, &cfg)?
        .into_iter()
        .map(|(m, _)| m)
        .collect();
    let soft = labels.iter().map(SoftMask::from_binary).collect();
    Ok(Fixture {
        frames,
        grays,
        background,
        labels,
        soft,
    })
}
