//! Iterative pseudo-label refinement.
//!
//! Every round each frame's label history is blended with a CRF-sharpened
//! prediction: `mva_k = (1 - alpha) * crf(prediction) + alpha * mva_{k-1}`.
//! Rounds stop once the mean per-pixel change drops below a tolerance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::frame_io::{BinaryMask, Frame};

/// Per-pixel foreground probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    width: usize,
    height: usize,
    prob: Vec<f64>,
}

impl SoftMask {
    pub fn new(width: usize, height: usize, prob: Vec<f64>) -> Result<Self> {
        if prob.len() != width * height {
            return Err(Error::InvalidParam(format!(
                "soft mask has {} values, expected {}",
                prob.len(),
                width * height
            )));
        }
        if let Some(p) = prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidParam(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        Ok(SoftMask {
            width,
            height,
            prob,
        })
    }

    pub fn filled(width: usize, height: usize, p: f64) -> Self {
        assert!((0.0..=1.0).contains(&p));
        SoftMask {
            width,
            height,
            prob: vec![p; width * height],
        }
    }

    pub fn from_binary(mask: &BinaryMask) -> Self {
        SoftMask {
            width: mask.width(),
            height: mask.height(),
            prob: mask.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn prob(&self) -> &[f64] {
        &self.prob
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.prob[y * self.width + x]
    }

    /// Foreground where the probability is strictly above `threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        let data = self.prob.iter().map(|&p| (p > threshold) as u8).collect();
        BinaryMask::from_vec(self.width, self.height, data).expect("0/1 data")
    }

    /// Pixelwise `wa * self + wb * other`, clamped into `[0, 1]`.
    pub fn blend(&self, wa: f64, other: &SoftMask, wb: f64) -> Result<SoftMask> {
        ensure_same_dims("soft mask blend", self.dims(), other.dims())?;
        Ok(SoftMask {
            width: self.width,
            height: self.height,
            prob: self
                .prob
                .iter()
                .zip(&other.prob)
                .map(|(&a, &b)| (wa * a + wb * b).clamp(0.0, 1.0))
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &SoftMask) -> f64 {
        self.prob
            .iter()
            .zip(&other.prob)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum_abs_diff(&self, other: &SoftMask) -> f64 {
        self.prob
            .iter()
            .zip(&other.prob)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfParams {
    pub spatial_sigma: f64,
    pub bilateral_sigma_xy: f64,
    pub bilateral_sigma_rgb: f64,
    /// `[spatial, bilateral]`
    pub pairwise_weights: [f64; 2],
    pub n_iterations: usize,
    pub window_radius: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            spatial_sigma: 3.0,
            bilateral_sigma_xy: 30.0,
            bilateral_sigma_rgb: 13.0,
            pairwise_weights: [3.0, 5.0],
            n_iterations: 5,
            window_radius: 11,
        }
    }
}

impl CrfParams {
    /// Parameters under which the CRF is the identity.
    pub fn disabled() -> Self {
        CrfParams {
            pairwise_weights: [0.0, 0.0],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.spatial_sigma,
            self.bilateral_sigma_xy,
            self.bilateral_sigma_rgb,
        ];
        if sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParam("CRF sigmas must be positive".into()));
        }
        if self.n_iterations == 0 {
            return Err(Error::InvalidParam(
                "CRF needs at least one iteration".into(),
            ));
        }
        if self
            .pairwise_weights
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::InvalidParam(
                "CRF weights must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.pairwise_weights == [0.0, 0.0]
    }
}

const PROB_CLAMP: f64 = 1e-4;
/// Pixels whose whole message window stays at or below this probability
/// keep their unary.
const INACTIVE_PROB: f64 = 1e-3;

/// Separable windowed sum with zero padding, excluding nothing.
fn window_sum(src: &[f32], w: usize, h: usize, k: &[f32]) -> Vec<f32> {
    let r = k.len() / 2;
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let mut acc = 0.0;
            for (sx, v) in row.iter().enumerate().take(hi + 1).skip(lo) {
                acc += k[sx + r - x] * v;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for sy in lo..=hi {
            let wt = k[sy + r - y];
            let src_row = &tmp[sy * w..(sy + 1) * w];
            for (d, s) in out[y * w..(y + 1) * w].iter_mut().zip(src_row) {
                *d += wt * s;
            }
        }
    }
    out
}

fn window_max(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            tmp[y * w + x] = src[y * w + lo..=y * w + hi]
                .iter()
                .copied()
                .fold(0.0, f64::max);
        }
    }
    let mut out = vec![0.0f64; src.len()];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|sy| tmp[sy * w + x]).fold(0.0, f64::max);
        }
    }
    out
}

/// Bilateral-kernel sums restricted to a square window.
struct Bilateral<'a> {
    image: &'a Frame,
    radius: usize,
    spatial: Vec<f32>,
    /// Indexed by squared color distance.
    color: Vec<f32>,
    /// Indexed by absolute gray difference.
    gray: Vec<f32>,
}

impl<'a> Bilateral<'a> {
    fn new(image: &'a Frame, p: &CrfParams) -> Self {
        let r = p.window_radius as isize;
        let side = 2 * p.window_radius + 1;
        let mut spatial = Vec::with_capacity(side * side);
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = (dx * dx + dy * dy) as f64;
                spatial.push((-d2 / (2.0 * p.bilateral_sigma_xy.powi(2))).exp() as f32);
            }
        }
        // indexed by squared color distance
        let max_d2 = image.channels() * 255 * 255;
        let color = (0..=max_d2)
            .map(|d2| (-(d2 as f64) / (2.0 * p.bilateral_sigma_rgb.powi(2))).exp() as f32)
            .collect();
        let gray = (0..256)
            .map(|d: i32| (-((d * d) as f64) / (2.0 * p.bilateral_sigma_rgb.powi(2))).exp() as f32)
            .collect();
        Bilateral {
            image,
            radius: p.window_radius,
            spatial,
            color,
            gray,
        }
    }

    /// `sum_{j != i} k(i, j) * q[j]`, exact for every active pixel.
    ///
    /// Each unordered pair within the window is visited once; row pairs
    /// without an active pixel are skipped.
    fn message(&self, q: &[f32], spans: &[Option<(usize, usize)>]) -> Vec<f32> {
        let (w, h) = self.image.dims();
        let c = self.image.channels();
        let data = self.image.data();
        let r = self.radius as isize;
        let side = 2 * self.radius + 1;
        let mut out = vec![0.0f32; w * h];
        let wi = w as isize;
        // rows outermost so the dozen rows a pair can touch stay in cache
        for y in 0..h {
            for dy in 0..=r.min((h - 1 - y) as isize) {
                let yj = y + dy as usize;
                for dx in -r..=r {
                    if dy == 0 && dx <= 0 {
                        continue;
                    }
                    let sp = self.spatial[((dy + r) as usize) * side + (dx + r) as usize];
                    // x range where i = (x, y) or j = (x + dx, yj) is active
                    let (mut lo, mut hi) = (isize::MAX, isize::MIN);
                    if let Some((a, b)) = spans[y] {
                        lo = lo.min(a as isize);
                        hi = hi.max(b as isize);
                    }
                    if let Some((a, b)) = spans[yj] {
                        lo = lo.min(a as isize - dx);
                        hi = hi.max(b as isize - dx);
                    }
                    lo = lo.max(0).max(-dx);
                    hi = hi.min(wi - 1).min(wi - 1 - dx);
                    if lo > hi {
                        continue;
                    }
                    let (lo, hi) = (lo as usize, hi as usize);
                    let i0 = y * w + lo;
                    let j0 = ((yj * w + lo) as isize + dx) as usize;
                    let len = hi - lo + 1;
                    if c == 1 && dy > 0 {
                        let (top, bottom) = out.split_at_mut(yj * w);
                        let oi = &mut top[i0..i0 + len];
                        let oj = &mut bottom[j0 - yj * w..j0 - yj * w + len];
                        let (di, dj) = (&data[i0..i0 + len], &data[j0..j0 + len]);
                        let (qi, qj) = (&q[i0..i0 + len], &q[j0..j0 + len]);
                        let gray: &[f32; 256] =
                            self.gray.as_slice().try_into().expect("256-entry table");
                        let pairs = oi
                            .iter_mut()
                            .zip(oj.iter_mut())
                            .zip(di.iter().zip(dj))
                            .zip(qi.iter().zip(qj));
                        for (((oi, oj), (&a, &b)), (&qa, &qb)) in pairs {
                            let wgt = sp * gray[a.abs_diff(b) as usize];
                            *oi += wgt * qb;
                            *oj += wgt * qa;
                        }
                        continue;
                    }
                    for k in 0..len {
                        let (i, j) = (i0 + k, j0 + k);
                        let d2: i32 = (0..c)
                            .map(|ch| (data[i * c + ch] as i32 - data[j * c + ch] as i32).pow(2))
                            .sum();
                        let wgt = sp * self.color[d2 as usize];
                        out[i] += wgt * q[j];
                        out[j] += wgt * q[i];
                    }
                }
            }
        }
        out
    }
}

/// Per-row `[first, last]` active column.
fn active_spans(active: &[bool], w: usize, h: usize) -> Vec<Option<(usize, usize)>> {
    (0..h)
        .map(|y| {
            let row = &active[y * w..(y + 1) * w];
            let first = row.iter().position(|&a| a)?;
            let last = row.iter().rposition(|&a| a)?;
            Some((first, last))
        })
        .collect()
}

/// Mean-field inference of a two-label dense CRF with a Gaussian spatial
/// kernel and a bilateral (position + color) kernel, both truncated to a
/// square window of `window_radius`.
///
/// Pixels with no probability above 1e-3 anywhere in their window keep
/// their unary value.
pub fn dense_crf(image: &Frame, unary: &SoftMask, p: &CrfParams) -> Result<SoftMask> {
    p.validate()?;
    ensure_same_dims("crf image/unary", image.dims(), unary.dims())?;
    if p.is_identity() {
        return Ok(unary.clone());
    }
    let (w, h) = unary.dims();
    let n = w * h;
    let clamped: Vec<f64> = unary
        .prob
        .iter()
        .map(|&v| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
        .collect();
    let unary_diff: Vec<f32> = clamped
        .iter()
        .map(|&v| ((-v.ln()) - (-(1.0 - v).ln())) as f32)
        .collect();
    let active: Vec<bool> = window_max(&unary.prob, w, h, p.window_radius)
        .iter()
        .map(|&m| m > INACTIVE_PROB)
        .collect();

    let r = p.window_radius as isize;
    let ks: Vec<f32> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * p.spatial_sigma.powi(2))).exp() as f32)
        .collect();
    let [w_s, w_b] = p.pairwise_weights.map(|v| v as f32);
    let ones = vec![1.0f32; n];
    let bilateral = Bilateral::new(image, p);
    let k_spatial: Vec<f32> = window_sum(&ones, w, h, &ks)
        .iter()
        .map(|v| v - 1.0)
        .collect();
    let spans = active_spans(&active, w, h);
    let k_bilateral = if w_b > 0.0 {
        bilateral.message(&ones, &spans)
    } else {
        vec![0.0; n]
    };

    let mut q: Vec<f32> = clamped.iter().map(|&v| v as f32).collect();
    for _ in 0..p.n_iterations {
        let m_s: Vec<f32> = if w_s > 0.0 {
            window_sum(&q, w, h, &ks)
                .iter()
                .zip(&q)
                .map(|(s, qi)| s - qi)
                .collect()
        } else {
            vec![0.0; n]
        };
        let m_b = if w_b > 0.0 {
            bilateral.message(&q, &spans)
        } else {
            vec![0.0; n]
        };
        let next: Vec<f32> = (0..n)
            .map(|i| {
                if !active[i] {
                    return q[i];
                }
                let e = unary_diff[i]
                    + w_s * (k_spatial[i] - 2.0 * m_s[i])
                    + w_b * (k_bilateral[i] - 2.0 * m_b[i]);
                1.0 / (1.0 + e.exp())
            })
            .collect();
        q = next;
    }
    let prob = (0..n)
        .map(|i| {
            if active[i] {
                (q[i] as f64).clamp(0.0, 1.0)
            } else {
                unary.prob[i]
            }
        })
        .collect();
    SoftMask::new(w, h, prob)
}

/// Moving-average state for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MvaState {
    pub mva: SoftMask,
    pub k: usize,
    pub alpha: f64,
}

impl MvaState {
    pub fn new(initial: SoftMask, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidParam(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(MvaState {
            mva: initial,
            k: 0,
            alpha,
        })
    }
}

/// One step of `mva = (1 - alpha) * crf(prediction) + alpha * mva`.
pub fn mva_update(
    state: &MvaState,
    prediction: &SoftMask,
    image: &Frame,
    p: &CrfParams,
) -> Result<MvaState> {
    ensure_same_dims("mva prediction", state.mva.dims(), prediction.dims())?;
    let sharpened = dense_crf(image, prediction, p)?;
    Ok(MvaState {
        mva: sharpened.blend(1.0 - state.alpha, &state.mva, state.alpha)?,
        k: state.k + 1,
        alpha: state.alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FBetaScore {
    pub beta: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub loss: f64,
}

/// Pixel-level F-beta of `pred` against `target`.
///
/// Empty denominators count as perfect: precision is 1 with no predicted
/// pixels, recall is 1 with no target pixels.
pub fn f_beta(pred: &BinaryMask, target: &BinaryMask, beta: f64) -> Result<FBetaScore> {
    ensure_same_dims("f_beta", pred.dims(), target.dims())?;
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidParam(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(target.data()) {
        match (a != 0, b != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    let f = if denom > 0.0 {
        (1.0 + b2) * precision * recall / denom
    } else {
        0.0
    };
    Ok(FBetaScore {
        beta,
        tp,
        fp,
        fn_,
        precision,
        recall,
        f,
        loss: 1.0 - f,
    })
}

/// Produces a per-frame prediction given the current label history.
pub trait Predictor: Sync {
    fn predict(&self, index: usize, frame: &Frame, current: &SoftMask) -> Result<SoftMask>;
}

/// Returns the same mask for a frame every round.
pub struct ConstantPredictor(pub Vec<SoftMask>);

impl Predictor for ConstantPredictor {
    fn predict(&self, index: usize, _frame: &Frame, _current: &SoftMask) -> Result<SoftMask> {
        self.0
            .get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidParam(format!("no prediction for frame {index}")))
    }
}

/// Default predictor: equal-weight blend of the stage-1 labels with the
/// current moving average.
pub struct Stage1Blend {
    pub stage1: Vec<SoftMask>,
}

impl Predictor for Stage1Blend {
    fn predict(&self, index: usize, _frame: &Frame, current: &SoftMask) -> Result<SoftMask> {
        let s = self
            .stage1
            .get(index)
            .ok_or_else(|| Error::InvalidParam(format!("no stage-1 label for frame {index}")))?;
        s.blend(0.5, current, 0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineParams {
    pub alpha: f64,
    pub beta: f64,
    pub stability_eps: f64,
    pub max_rounds: usize,
    #[serde(default)]
    pub crf: CrfParams,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            alpha: 0.7,
            beta: 1.0,
            stability_eps: 1e-3,
            max_rounds: 10,
            crf: CrfParams::default(),
        }
    }
}

impl RefineParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParam(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidParam(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.stability_eps > 0.0) {
            return Err(Error::InvalidParam("stability_eps must be positive".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::InvalidParam("max_rounds must be >= 1".into()));
        }
        self.crf.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub mean_l_beta: f64,
    pub mean_delta_mva: f64,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    /// Final moving averages binarized at 0.5.
    pub masks: Vec<BinaryMask>,
    pub soft: Vec<SoftMask>,
    pub rounds: usize,
    pub converged: bool,
    pub log: Vec<RoundLog>,
}

impl RefineOutcome {
    /// The per-round log as CSV with header `round,mean_L_beta,mean_delta_mva`.
    pub fn log_csv(&self) -> String {
        let mut s = String::from("round,mean_L_beta,mean_delta_mva\n");
        for r in &self.log {
            s.push_str(&format!(
                "{},{:.9},{:.9}\n",
                r.round, r.mean_l_beta, r.mean_delta_mva
            ));
        }
        s
    }
}

/// Runs moving-average rounds until the mean absolute change per pixel is
/// below `stability_eps` or `max_rounds` is reached.
pub fn refine_labels(
    frames: &[Frame],
    initial_labels: &[SoftMask],
    predictor: &dyn Predictor,
    params: &RefineParams,
) -> Result<RefineOutcome> {
    params.validate()?;
    if frames.len() != initial_labels.len() {
        return Err(Error::InvalidParam(format!(
            "{} frames but {} labels",
            frames.len(),
            initial_labels.len()
        )));
    }
    for (f, l) in frames.iter().zip(initial_labels) {
        ensure_same_dims("refine frame/label", f.dims(), l.dims())?;
    }
    let mut states: Vec<MvaState> = initial_labels
        .iter()
        .map(|l| MvaState::new(l.clone(), params.alpha))
        .collect::<Result<_>>()?;
    let total_pixels: usize = initial_labels.iter().map(|l| l.prob.len()).sum();
    let mut log = Vec::new();
    let mut converged = false;
    let mut rounds = 0;
    while rounds < params.max_rounds && !frames.is_empty() {
        rounds += 1;
        let results: Vec<(MvaState, f64, f64)> = states
            .par_iter()
            .zip(frames.par_iter())
            .enumerate()
            .map(|(i, (state, frame))| {
                let pred = predictor.predict(i, frame, &state.mva)?;
                let next = mva_update(state, &pred, frame, &params.crf)?;
                let delta = next.mva.sum_abs_diff(&state.mva);
                let score = f_beta(&pred.binarize(0.5), &state.mva.binarize(0.5), params.beta)?;
                Ok((next, delta, score.loss))
            })
            .collect::<Result<_>>()?;
        let mut delta_sum = 0.0;
        let mut loss_sum = 0.0;
        for (i, (next, delta, loss)) in results.into_iter().enumerate() {
            states[i] = next;
            delta_sum += delta;
            loss_sum += loss;
        }
        let mean_delta = delta_sum / total_pixels as f64;
        let entry = RoundLog {
            round: rounds,
            mean_l_beta: loss_sum / frames.len() as f64,
            mean_delta_mva: mean_delta,
        };
        log::debug!(
            "refine round {}: L_beta {:.4}, delta {:.6}",
            rounds,
            entry.mean_l_beta,
            mean_delta
        );
        log.push(entry);
        if mean_delta < params.stability_eps {
            converged = true;
            break;
        }
    }
    if !converged && !frames.is_empty() {
        log::warn!(
            "refinement did not stabilise within {} rounds; using last estimate",
            params.max_rounds
        );
    }
    let soft: Vec<SoftMask> = states.into_iter().map(|s| s.mva).collect();
    Ok(RefineOutcome {
        masks: soft.iter().map(|s| s.binarize(0.5)).collect(),
        soft,
        rounds,
        converged: converged || frames.is_empty(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disc(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| {
            (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r
        })
    }

    fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
        a.and(b).unwrap().count() as f64 / a.or(b).unwrap().count() as f64
    }

    fn two_tone(mask: &BinaryMask) -> Frame {
        let data = mask
            .data()
            .iter()
            .map(|&v| if v != 0 { 200 } else { 60 })
            .collect();
        Frame::new(mask.width(), mask.height(), 1, data).unwrap()
    }

    #[test]
    fn zero_coupling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = SoftMask::new(9, 7, (0..63).map(|_| rng.random::<f64>()).collect()).unwrap();
        let img = Frame::new(9, 7, 1, vec![100; 63]).unwrap();
        assert_eq!(dense_crf(&img, &u, &CrfParams::disabled()).unwrap(), u);
    }

    #[test]
    fn noisy_disc_is_cleaned() {
        let truth = disc(48, 48, 24.0, 24.0, 10.0);
        let img = two_tone(&truth);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noisy = BinaryMask::from_fn(48, 48, |x, y| truth.get(x, y) ^ rng.random_bool(0.1));
        let out = dense_crf(&img, &SoftMask::from_binary(&noisy), &CrfParams::default()).unwrap();
        let before = iou(&noisy, &truth);
        let after = iou(&out.binarize(0.5), &truth);
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn uniform_input_stays_uniform() {
        let img = Frame::new(20, 20, 1, vec![90; 400]).unwrap();
        let out = dense_crf(&img, &SoftMask::filled(20, 20, 0.5), &CrfParams::default()).unwrap();
        for &p in out.prob() {
            assert!((p - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn color_image_is_supported() {
        let truth = disc(24, 24, 12.0, 12.0, 6.0);
        let data: Vec<u8> = truth
            .data()
            .iter()
            .flat_map(|&v| if v != 0 { [220, 40, 40] } else { [30, 90, 160] })
            .collect();
        let img = Frame::new(24, 24, 3, data).unwrap();
        let mut noisy = truth.clone();
        noisy.set(2, 2, true);
        noisy.set(12, 12, false);
        let out = dense_crf(&img, &SoftMask::from_binary(&noisy), &CrfParams::default()).unwrap();
        assert_eq!(out.binarize(0.5), truth);
    }

    #[test]
    fn crf_dimension_mismatch() {
        let img = Frame::new(4, 4, 1, vec![0; 16]).unwrap();
        assert!(dense_crf(&img, &SoftMask::filled(3, 4, 0.2), &CrfParams::default()).is_err());
    }

    #[test]
    fn alpha_extremes() {
        let img = Frame::new(5, 5, 1, vec![10; 25]).unwrap();
        let pred = SoftMask::filled(5, 5, 0.8);
        let start = MvaState::new(SoftMask::filled(5, 5, 0.1), 0.0).unwrap();
        let crf = CrfParams::default();
        let next = mva_update(&start, &pred, &img, &crf).unwrap();
        assert_eq!(next.mva, dense_crf(&img, &pred, &crf).unwrap());
        assert_eq!(next.k, 1);
        let frozen = MvaState::new(SoftMask::filled(5, 5, 0.1), 1.0).unwrap();
        assert_eq!(
            mva_update(&frozen, &pred, &img, &crf).unwrap().mva,
            frozen.mva
        );
    }

    #[test]
    fn geometric_series_closed_form() {
        let img = Frame::new(4, 3, 1, vec![0; 12]).unwrap();
        let c = 0.6;
        let pred = SoftMask::filled(4, 3, c);
        let mut s = MvaState::new(SoftMask::filled(4, 3, 0.0), 0.5).unwrap();
        for k in 1..=12 {
            s = mva_update(&s, &pred, &img, &CrfParams::disabled()).unwrap();
            let want = c * (1.0 - 0.5f64.powi(k));
            for &p in s.mva.prob() {
                assert!((p - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn f_beta_cases() {
        let m = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        let s = f_beta(&m, &m, 1.0).unwrap();
        assert_eq!((s.precision, s.recall, s.f, s.loss), (1.0, 1.0, 1.0, 0.0));

        // TP=2, FP=1, FN=1
        let pred = BinaryMask::from_vec(4, 1, vec![1, 1, 1, 0]).unwrap();
        let target = BinaryMask::from_vec(4, 1, vec![1, 1, 0, 1]).unwrap();
        let s = f_beta(&pred, &target, 1.0).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (2, 1, 1));
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.loss - 1.0 / 3.0).abs() < 1e-15);

        let s = f_beta(&BinaryMask::zeros(4, 4), &m, 1.0).unwrap();
        assert_eq!((s.recall, s.f, s.loss), (0.0, 0.0, 1.0));

        let e = BinaryMask::zeros(3, 3);
        assert_eq!(f_beta(&e, &e, 2.0).unwrap().f, 1.0);
        assert!(f_beta(&e, &e, 0.0).is_err());
    }

    #[test]
    fn constant_predictor_converges_quickly() {
        let w = 16;
        let truth = disc(w, w, 8.0, 8.0, 5.0);
        let frames = vec![two_tone(&truth); 3];
        let pred = SoftMask::new(
            w,
            w,
            truth
                .data()
                .iter()
                .map(|&v| if v != 0 { 0.9 } else { 0.1 })
                .collect(),
        )
        .unwrap();
        let initial = vec![SoftMask::filled(w, w, 0.5); 3];
        let params = RefineParams {
            alpha: 0.7,
            crf: CrfParams::disabled(),
            max_rounds: 50,
            ..Default::default()
        };
        let out = refine_labels(
            &frames,
            &initial,
            &ConstantPredictor(vec![pred.clone(); 3]),
            &params,
        );
        let out = out.unwrap();
        let bound = (params.stability_eps.ln() / params.alpha.ln()).ceil() as usize + 1;
        assert!(out.converged);
        assert!(out.rounds <= bound, "{} > {bound}", out.rounds);
        for m in &out.masks {
            assert_eq!(m, &pred.binarize(0.5));
        }
    }

    #[test]
    fn no_history_converges_in_one_round() {
        let truth = disc(12, 12, 6.0, 6.0, 3.0);
        let frames = vec![two_tone(&truth)];
        let pred = SoftMask::from_binary(&truth);
        let params = RefineParams {
            alpha: 0.0,
            crf: CrfParams::disabled(),
            max_rounds: 5,
            ..Default::default()
        };
        let out = refine_labels(
            &frames,
            &[pred.clone()],
            &ConstantPredictor(vec![pred]),
            &params,
        )
        .unwrap();
        assert_eq!(out.rounds, 1);
        assert_eq!(out.masks[0], truth);
    }

    #[test]
    fn non_convergence_is_not_an_error() {
        let truth = disc(12, 12, 6.0, 6.0, 3.0);
        let frames = vec![two_tone(&truth)];
        let params = RefineParams {
            alpha: 0.99,
            crf: CrfParams::disabled(),
            max_rounds: 2,
            ..Default::default()
        };
        let out = refine_labels(
            &frames,
            &[SoftMask::filled(12, 12, 0.0)],
            &ConstantPredictor(vec![SoftMask::from_binary(&truth)]),
            &params,
        )
        .unwrap();
        assert!(!out.converged);
        assert_eq!(out.rounds, 2);
        assert_eq!(out.log.len(), 2);
        assert!(out
            .log_csv()
            .starts_with("round,mean_L_beta,mean_delta_mva\n"));
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let f = vec![Frame::new(2, 2, 1, vec![0; 4]).unwrap()];
        let p = ConstantPredictor(vec![]);
        assert!(refine_labels(&f, &[], &p, &RefineParams::default()).is_err());
    }

    proptest! {
        #[test]
        fn mva_stays_in_unit_interval(
            alpha in 0.0f64..=1.0,
            a in proptest::collection::vec(0.0f64..=1.0, 20),
            b in proptest::collection::vec(0.0f64..=1.0, 20),
        ) {
            let img = Frame::new(5, 4, 1, (0..20).map(|i| (i * 12) as u8).collect()).unwrap();
            let s = MvaState::new(SoftMask::new(5, 4, a).unwrap(), alpha).unwrap();
            let pred = SoftMask::new(5, 4, b).unwrap();
            for crf in [CrfParams::disabled(), CrfParams::default()] {
                let next = mva_update(&s, &pred, &img, &crf).unwrap();
                prop_assert!(next.mva.prob().iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }

        #[test]
        fn f_beta_one_is_symmetric(a in proptest::collection::vec(0u8..2, 30), b in proptest::collection::vec(0u8..2, 30)) {
            let pa = BinaryMask::from_vec(6, 5, a).unwrap();
            let pb = BinaryMask::from_vec(6, 5, b).unwrap();
            let x = f_beta(&pa, &pb, 1.0).unwrap().f;
            let y = f_beta(&pb, &pa, 1.0).unwrap().f;
            prop_assert!((x - y).abs() < 1e-15);
        }

        #[test]
        fn f_beta_monotone_in_true_positives(tp in 0usize..20, fp in 0usize..20, fn_ in 0usize..20, beta in 0.1f64..4.0) {
            // lay out tp, fp, fn pixels explicitly, then add one more tp pixel
            let build = |tp: usize| {
                let n = tp + fp + fn_ + 1;
                let pred = BinaryMask::from_fn(n, 1, |x, _| x < tp + fp);
                let target = BinaryMask::from_fn(n, 1, |x, _| x < tp || (x >= tp + fp && x < tp + fp + fn_));
                f_beta(&pred, &target, beta).unwrap().f
            };
            prop_assert!(build(tp + 1) >= build(tp) - 1e-15);
        }
    }
}
