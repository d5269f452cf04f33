//! Temporal-median background model and adaptive Gaussian thresholding.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::frame_io::{BinaryMask, GrayFrame};

/// Per-pixel background estimate built from the leading frames of a video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackgroundModel {
    pub median_image: GrayFrame,
    pub n_frames_used: usize,
}

impl BackgroundModel {
    pub fn dims(&self) -> (usize, usize) {
        self.median_image.dims()
    }
}

/// Adaptive-threshold parameters.
///
/// A pixel of the difference image is foreground when it exceeds the
/// Gaussian-weighted local mean minus `c_offset`. `min_diff` is an absolute
/// floor on the difference, applied by [`foreground_mask`] only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdParams {
    pub window: usize,
    pub c_offset: f64,
    pub gaussian_sigma: f64,
    #[serde(default = "default_min_diff")]
    pub min_diff: u8,
}

fn default_min_diff() -> u8 {
    12
}

impl Default for ThresholdParams {
    fn default() -> Self {
        ThresholdParams {
            window: 11,
            c_offset: 2.0,
            gaussian_sigma: 11.0 / 6.0,
            min_diff: default_min_diff(),
        }
    }
}

impl ThresholdParams {
    /// Window with the conventional sigma of `window / 6`.
    pub fn with_window(window: usize, c_offset: f64) -> Self {
        ThresholdParams {
            window,
            c_offset,
            gaussian_sigma: window as f64 / 6.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "threshold window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.gaussian_sigma > 0.0) || !self.gaussian_sigma.is_finite() {
            return Err(Error::InvalidParam(format!(
                "gaussian_sigma must be positive, got {}",
                self.gaussian_sigma
            )));
        }
        if !self.c_offset.is_finite() {
            return Err(Error::InvalidParam("c_offset must be finite".into()));
        }
        Ok(())
    }
}

/// Lower median of the first `min(n, frames.len())` frames, per pixel.
pub fn estimate_background(frames: &[GrayFrame], n: usize) -> Result<BackgroundModel> {
    let used = n.min(frames.len());
    if used == 0 {
        return Err(Error::Empty("background needs at least one frame".into()));
    }
    let head = &frames[..used];
    let dims = head[0].dims();
    for f in head {
        ensure_same_dims("background frames", dims, f.dims())?;
    }
    let mut column = vec![0u8; used];
    let mid = (used - 1) / 2;
    let data = (0..dims.0 * dims.1)
        .map(|i| {
            for (slot, f) in column.iter_mut().zip(head) {
                *slot = f.data()[i];
            }
            *column.select_nth_unstable(mid).1
        })
        .collect();
    Ok(BackgroundModel {
        median_image: GrayFrame::new(dims.0, dims.1, data)?,
        n_frames_used: used,
    })
}

/// Absolute difference between a frame and the background.
pub fn subtract(frame: &GrayFrame, bg: &BackgroundModel) -> Result<GrayFrame> {
    ensure_same_dims("subtract", frame.dims(), bg.dims())?;
    let data = frame
        .data()
        .iter()
        .zip(bg.median_image.data())
        .map(|(&a, &b)| a.abs_diff(b))
        .collect();
    GrayFrame::new(frame.width(), frame.height(), data)
}

pub(crate) fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Correlates every row with `k` (centered), replicating edge pixels.
pub(crate) fn filter_rows(src: &[f64], width: usize, height: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len() / 2;
    let w = width as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        let dst = &mut out[y * width..(y + 1) * width];
        for x in 0..width {
            if x >= r && x + r < width {
                dst[x] = row[x - r..=x + r].iter().zip(k).map(|(a, b)| a * b).sum();
            } else {
                let mut acc = 0.0;
                for (i, &wt) in k.iter().enumerate() {
                    let sx = (x as isize + i as isize - r as isize).clamp(0, w - 1) as usize;
                    acc += wt * row[sx];
                }
                dst[x] = acc;
            }
        }
    }
    out
}

/// Correlates every column with `k` (centered), replicating edge pixels.
pub(crate) fn filter_cols(src: &[f64], width: usize, height: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let h = height as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        let dst = &mut out[y as usize * width..(y as usize + 1) * width];
        for (i, &wt) in k.iter().enumerate() {
            let sy = (y + i as isize - r).clamp(0, h - 1) as usize;
            let src_row = &src[sy * width..(sy + 1) * width];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += wt * s;
            }
        }
    }
    out
}

pub(crate) fn separable_filter(
    src: &[f64],
    width: usize,
    height: usize,
    kx: &[f64],
    ky: &[f64],
) -> Vec<f64> {
    filter_cols(&filter_rows(src, width, height, kx), width, height, ky)
}

/// Gaussian-weighted local mean over a `window` x `window` neighbourhood.
pub fn gaussian_local_mean(img: &GrayFrame, window: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(window / 2, sigma);
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    separable_filter(&src, img.width(), img.height(), &k, &k)
}

/// Marks pixels brighter than their Gaussian local mean minus `c_offset`.
pub fn adaptive_gaussian_threshold(img: &GrayFrame, p: &ThresholdParams) -> Result<BinaryMask> {
    p.validate()?;
    if p.window > img.width() || p.window > img.height() {
        return Err(Error::InvalidParam(format!(
            "threshold window {} exceeds image {}x{}",
            p.window,
            img.width(),
            img.height()
        )));
    }
    let mean = gaussian_local_mean(img, p.window, p.gaussian_sigma);
    let data = img
        .data()
        .iter()
        .zip(&mean)
        .map(|(&v, &m)| (v as f64 > m - p.c_offset) as u8)
        .collect();
    BinaryMask::from_vec(img.width(), img.height(), data)
}

fn erode3(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(w, h, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                if !mask.get(nx, ny) {
                    return false;
                }
            }
        }
        true
    })
}

fn dilate3(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(w, h, |x, y| {
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                if mask.get(nx, ny) {
                    return true;
                }
            }
        }
        false
    })
}

/// Morphological opening with a 3x3 square; out-of-image neighbours are ignored.
pub fn open3x3(mask: &BinaryMask) -> BinaryMask {
    dilate3(&erode3(mask))
}

/// Background subtraction, adaptive threshold, difference floor, then a 3x3 open.
pub fn foreground_mask(
    frame: &GrayFrame,
    bg: &BackgroundModel,
    p: &ThresholdParams,
) -> Result<BinaryMask> {
    let diff = subtract(frame, bg)?;
    let adaptive = adaptive_gaussian_threshold(&diff, p)?;
    let floor = BinaryMask::from_vec(
        diff.width(),
        diff.height(),
        diff.data()
            .iter()
            .map(|&d| (d > p.min_diff) as u8)
            .collect(),
    )?;
    Ok(open3x3(&adaptive.and(&floor)?))
}
