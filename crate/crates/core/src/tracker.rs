//! SORT-style online tracking: constant-velocity Kalman filter on
//! `[h, v, s, r, dh, dv, ds]`, IoU cost, Hungarian assignment.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{BBox, Instance, RotatedBox};

pub type StateVec = SVector<f64, 7>;
pub type StateCov = SMatrix<f64, 7, 7>;
type Meas = SVector<f64, 4>;
type MeasMat = SMatrix<f64, 4, 7>;

const MIN_SCALE: f64 = 1.0;
const MIN_RATIO: f64 = 1e-6;

/// Process (`q`) and measurement (`r`) noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanNoise {
    pub q: StateCov,
    pub r: SMatrix<f64, 4, 4>,
}

impl KalmanNoise {
    /// Reference SORT structure scaled by the given factors: unit position
    /// noise, velocity process noise damped by 100 (scale velocity by 1e4),
    /// and scale/aspect measurements ten times noisier than centers.
    pub fn new(process_scale: f64, measurement_scale: f64) -> Self {
        let mut q = StateCov::identity();
        q[(6, 6)] *= 0.01;
        for i in 4..7 {
            q[(i, i)] *= 0.01;
        }
        let mut r = SMatrix::<f64, 4, 4>::identity();
        r[(2, 2)] *= 10.0;
        r[(3, 3)] *= 10.0;
        KalmanNoise {
            q: q * process_scale,
            r: r * measurement_scale,
        }
    }
}

impl Default for KalmanNoise {
    fn default() -> Self {
        KalmanNoise::new(1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub x: StateVec,
    pub p: StateCov,
}

/// Converts a box to the measurement `[h, v, s, r]`.
pub fn box_to_measurement(b: &BBox) -> Result<[f64; 4]> {
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(Error::InvalidParam(format!(
            "degenerate detection {}x{}",
            b.w, b.h
        )));
    }
    let (cx, cy) = b.center();
    Ok([cx, cy, b.w * b.h, b.w / b.h])
}

pub fn transition() -> StateCov {
    let mut f = StateCov::identity();
    f[(0, 4)] = 1.0;
    f[(1, 5)] = 1.0;
    f[(2, 6)] = 1.0;
    f
}

fn observation() -> MeasMat {
    let mut h = MeasMat::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

impl KalmanState {
    /// New state at `b` with zero velocity and the reference initial
    /// covariance (velocities very uncertain).
    pub fn from_bbox(b: &BBox) -> Result<KalmanState> {
        let z = box_to_measurement(b)?;
        let mut p = StateCov::identity();
        for i in 4..7 {
            p[(i, i)] *= 1000.0;
        }
        Ok(KalmanState {
            x: StateVec::from_column_slice(&[z[0], z[1], z[2], z[3], 0.0, 0.0, 0.0]),
            p: p * 10.0,
        })
    }

    pub fn to_bbox(&self) -> BBox {
        let s = self.x[2].max(MIN_SCALE);
        let r = self.x[3].max(MIN_RATIO);
        let w = (s * r).sqrt();
        let h = s / w;
        BBox::new(self.x[0] - w / 2.0, self.x[1] - h / 2.0, w, h)
    }
}

/// `x' = F x`, `P' = F P F^T + Q`. Scale velocity is zeroed when it would
/// drive the area non-positive; the area is clamped to at least 1.
pub fn kalman_predict(state: &KalmanState, noise: &KalmanNoise) -> KalmanState {
    let mut x = state.x;
    if x[2] + x[6] <= 0.0 {
        x[6] = 0.0;
    }
    let f = transition();
    let mut x = f * x;
    x[2] = x[2].max(MIN_SCALE);
    KalmanState {
        x,
        p: f * state.p * f.transpose() + noise.q,
    }
}

/// Standard measurement update with `z = [h, v, s, r]` from the box.
pub fn kalman_update(
    state: &KalmanState,
    detection: &BBox,
    noise: &KalmanNoise,
) -> Result<KalmanState> {
    let z = Meas::from_column_slice(&box_to_measurement(detection)?);
    let h = observation();
    let y = z - h * state.x;
    let s = h * state.p * h.transpose() + noise.r;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::InvalidParam("singular innovation covariance".into()))?;
    let k = state.p * h.transpose() * s_inv;
    let mut x = state.x + k * y;
    let p = (StateCov::identity() - k * h) * state.p;
    let p = (p + p.transpose()) * 0.5;
    x[2] = x[2].max(MIN_SCALE);
    x[3] = x[3].max(MIN_RATIO);
    Ok(KalmanState { x, p })
}

/// Axis-aligned box IoU; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Minimum-cost one-to-one assignment of `min(m, n)` pairs for an `m x n`
/// matrix (rows as slices). Returns `(row, col)` pairs sorted by row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let m = cost.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let n = cost[0].len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidParam("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidParam("cost matrix must be finite".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if m > n {
        let t: Vec<Vec<f64>> = (0..n)
            .map(|j| (0..m).map(|i| cost[i][j]).collect())
            .collect();
        let mut pairs: Vec<(usize, usize)> =
            hungarian(&t)?.into_iter().map(|(j, i)| (i, j)).collect();
        pairs.sort_unstable();
        return Ok(pairs);
    }
    // shortest augmenting paths with potentials; rows 1..=m, cols 1..=n
    let mut u = vec![0.0f64; m + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub max_age: u32,
    pub min_hits: u32,
    pub iou_threshold: f64,
    pub process_noise: f64,
    pub measurement_noise: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            max_age: 3,
            min_hits: 3,
            iou_threshold: 0.3,
            process_noise: 1.0,
            measurement_noise: 1.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_age < 1 || self.min_hits < 1 {
            return Err(Error::InvalidParam(
                "max_age and min_hits must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::InvalidParam(
                "iou_threshold must be in [0, 1]".into(),
            ));
        }
        if !(self.process_noise > 0.0 && self.measurement_noise > 0.0) {
            return Err(Error::InvalidParam("noise scales must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub rbox: Option<RotatedBox>,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub state: KalmanState,
    /// Consecutive matched frames.
    pub hits: u32,
    pub age: u32,
    pub time_since_update: u32,
    pub history: Vec<TrackPoint>,
    last_rbox: Option<RotatedBox>,
    last_score: f64,
}

impl Track {
    pub fn bbox(&self) -> BBox {
        self.state.to_bbox()
    }
}

/// One reported track in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub frame: usize,
    pub track_id: u64,
    pub bbox: BBox,
    pub rbox: RotatedBox,
    pub score: f64,
}

/// Stateful tracker for one video. Not meant to be shared across threads;
/// independent videos use independent trackers.
#[derive(Debug, Clone)]
pub struct Tracker {
    config: TrackerConfig,
    noise: KalmanNoise,
    tracks: Vec<Track>,
    retired: Vec<Track>,
    next_id: u64,
    frame_count: u32,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Tracker {
            noise: KalmanNoise::new(config.process_noise, config.measurement_noise),
            config,
            tracks: Vec::new(),
            retired: Vec::new(),
            next_id: 1,
            frame_count: 0,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn live_tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Deleted tracks, in deletion order.
    pub fn retired_tracks(&self) -> &[Track] {
        &self.retired
    }

    /// Advances one frame. Reported tracks were matched in this frame and
    /// either have `min_hits` consecutive hits or the run is still within
    /// its first `min_hits` frames.
    pub fn step(
        &mut self,
        detections: &[(Instance, RotatedBox)],
        frame_index: usize,
    ) -> Result<Vec<TrackOutput>> {
        self.frame_count += 1;
        for t in &mut self.tracks {
            t.state = kalman_predict(&t.state, &self.noise);
            t.age += 1;
            if t.time_since_update > 0 {
                t.hits = 0;
            }
            t.time_since_update += 1;
        }
        let (dead, alive): (Vec<Track>, Vec<Track>) = std::mem::take(&mut self.tracks)
            .into_iter()
            .partition(|t| t.state.x.iter().any(|v| !v.is_finite()));
        self.retired.extend(dead);
        self.tracks = alive;

        let predicted: Vec<BBox> = self.tracks.iter().map(Track::bbox).collect();
        let cost: Vec<Vec<f64>> = detections
            .iter()
            .map(|(d, _)| {
                predicted
                    .iter()
                    .map(|p| 1.0 - iou(&d.bbox_axis_aligned, p))
                    .collect()
            })
            .collect();
        let mut det_matched = vec![false; detections.len()];
        if !predicted.is_empty() {
            for (di, ti) in hungarian(&cost)? {
                if 1.0 - cost[di][ti] < self.config.iou_threshold {
                    continue;
                }
                let (inst, rbox) = &detections[di];
                let t = &mut self.tracks[ti];
                t.state = kalman_update(&t.state, &inst.bbox_axis_aligned, &self.noise)?;
                t.time_since_update = 0;
                t.hits += 1;
                t.last_rbox = Some(*rbox);
                t.last_score = inst.score;
                det_matched[di] = true;
            }
        }
        for (di, (inst, rbox)) in detections.iter().enumerate() {
            if det_matched[di] {
                continue;
            }
            let state = KalmanState::from_bbox(&inst.bbox_axis_aligned)?;
            self.tracks.push(Track {
                id: self.next_id,
                state,
                hits: 0,
                age: 0,
                time_since_update: 0,
                history: Vec::new(),
                last_rbox: Some(*rbox),
                last_score: inst.score,
            });
            self.next_id += 1;
        }

        let grace = self.frame_count <= self.config.min_hits;
        let mut out = Vec::new();
        for t in &mut self.tracks {
            if t.time_since_update != 0 {
                continue;
            }
            let b = t.state.to_bbox();
            let (cx, cy) = b.center();
            t.history.push(TrackPoint {
                frame: frame_index,
                cx,
                cy,
                w: b.w,
                h: b.h,
                rbox: t.last_rbox,
                score: t.last_score,
            });
            if t.hits >= self.config.min_hits || grace {
                out.push(TrackOutput {
                    frame: frame_index,
                    track_id: t.id,
                    bbox: b,
                    rbox: t.last_rbox.expect("matched tracks carry a box"),
                    score: t.last_score,
                });
            }
        }
        let max_age = self.config.max_age;
        let (gone, keep): (Vec<Track>, Vec<Track>) = std::mem::take(&mut self.tracks)
            .into_iter()
            .partition(|t| t.time_since_update > max_age);
        self.retired.extend(gone);
        self.tracks = keep;
        out.sort_by_key(|o| o.track_id);
        Ok(out)
    }
}

/// Runs a fresh tracker over per-frame detections (`frames[i]` is frame `i`).
pub fn track_sequence(
    frames: &[Vec<(Instance, RotatedBox)>],
    config: &TrackerConfig,
) -> Result<Vec<TrackOutput>> {
    let mut tracker = Tracker::new(*config)?;
    let mut all = Vec::new();
    for (i, dets) in frames.iter().enumerate() {
        all.extend(
            tracker
                .step(dets, i)
                .map_err(|e| e.in_stage("track", Some(i)))?,
        );
    }
    Ok(all)
}

pub const TRAJECTORY_HEADER: &str = "frame,track_id,cx,cy,w,h,angle,score";

/// Trajectory CSV; geometry columns come from the rotated box.
pub fn trajectories_csv(outputs: &[TrackOutput]) -> String {
    let mut s = String::from(TRAJECTORY_HEADER);
    s.push('\n');
    for o in outputs {
        s.push_str(&format!(
            "{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.6}\n",
            o.frame, o.track_id, o.rbox.cx, o.rbox.cy, o.rbox.w, o.rbox.h, o.rbox.angle, o.score
        ));
    }
    s
}
