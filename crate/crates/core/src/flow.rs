//! Mask-gated dense optical flow and flow-based pseudo-label cleanup.
//!
//! The estimator is a coarse-to-fine polynomial-expansion method: each
//! neighbourhood is approximated by a quadratic `x'Ax + b'x + c`, and the
//! displacement between two frames is solved from how `b` changes, averaged
//! over a Gaussian window. It sits behind [`FlowEstimator`] so a learned
//! model can replace it.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::background::{
    filter_cols, filter_rows, foreground_mask, gaussian_kernel, separable_filter, BackgroundModel,
    ThresholdParams,
};
use crate::error::{ensure_same_dims, Error, Result};
use crate::frame_io::{BinaryMask, GrayFrame};

/// Per-pixel displacement in pixels/frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
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

    pub fn magnitude(&self, x: usize, y: usize) -> f32 {
        let i = y * self.width + x;
        self.u[i].hypot(self.v[i])
    }

    /// Direction in radians in `(-pi, pi]`; `None` where there is no motion.
    pub fn angle(&self, x: usize, y: usize) -> Option<f32> {
        let i = y * self.width + x;
        (self.magnitude(x, y) > 0.0).then(|| self.v[i].atan2(self.u[i]))
    }

    /// Median `(u, v)` over the pixels of `mask`.
    pub fn median_over(&self, mask: &BinaryMask) -> Option<(f32, f32)> {
        let mut us = Vec::new();
        let mut vs = Vec::new();
        for (x, y) in mask.foreground() {
            let i = y * self.width + x;
            us.push(self.u[i]);
            vs.push(self.v[i]);
        }
        if us.is_empty() {
            return None;
        }
        let med = |v: &mut Vec<f32>| {
            v.sort_by(f32::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        };
        Some((med(&mut us), med(&mut vs)))
    }

    /// HSV rendering (hue = direction, value = magnitude / `max_mag`) as RGB bytes.
    pub fn to_rgb(&self, max_mag: f32) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.u.len() * 3);
        for (&u, &v) in self.u.iter().zip(&self.v) {
            let mag = u.hypot(v);
            if mag <= 0.0 || max_mag <= 0.0 {
                out.extend([0, 0, 0]);
                continue;
            }
            let hue = (v.atan2(u).to_degrees() + 360.0) % 360.0;
            let val = (mag / max_mag).min(1.0);
            out.extend(hsv_to_rgb(hue, 1.0, val));
        }
        out
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f32| ((t + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Frames with their background zeroed by the corresponding masks.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedFramePair {
    pub x_hat_t: GrayFrame,
    pub x_hat_t1: GrayFrame,
    pub m_t: BinaryMask,
    pub m_t1: BinaryMask,
}

fn apply_mask(x: &GrayFrame, m: &BinaryMask) -> GrayFrame {
    let data = x
        .data()
        .iter()
        .zip(m.data())
        .map(|(&p, &b)| if b != 0 { p } else { 0 })
        .collect();
    GrayFrame::new(x.width(), x.height(), data).expect("dimensions checked")
}

/// Multiplies each frame by its mask.
pub fn gate_frames(
    x_t: &GrayFrame,
    x_t1: &GrayFrame,
    m_t: &BinaryMask,
    m_t1: &BinaryMask,
) -> Result<GatedFramePair> {
    let d = x_t.dims();
    ensure_same_dims("gate x_t1", d, x_t1.dims())?;
    ensure_same_dims("gate m_t", d, m_t.dims())?;
    ensure_same_dims("gate m_t1", d, m_t1.dims())?;
    Ok(GatedFramePair {
        x_hat_t: apply_mask(x_t, m_t),
        x_hat_t1: apply_mask(x_t1, m_t1),
        m_t: m_t.clone(),
        m_t1: m_t1.clone(),
    })
}

/// Dense flow from one frame to the next: pixel `p` of `from` moves to
/// `p + (u, v)` in `to`.
pub trait FlowEstimator: Send + Sync {
    fn estimate(&self, from: &GrayFrame, to: &GrayFrame) -> Result<FlowField>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FarnebackParams {
    pub levels: usize,
    pub window: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
    /// Tikhonov weight pulling each solve toward the coarser estimate;
    /// keeps textureless interiors from collapsing to zero.
    pub regularization: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        FarnebackParams {
            levels: 3,
            window: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
            regularization: 1e-4,
        }
    }
}

impl FarnebackParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.iterations == 0 {
            return Err(Error::InvalidParam(
                "flow levels and iterations must be >= 1".into(),
            ));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "flow window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if self.poly_n < 1 || !(self.poly_sigma > 0.0) || !(self.regularization >= 0.0) {
            return Err(Error::InvalidParam(
                "invalid polynomial expansion parameters".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Farneback {
    pub params: FarnebackParams,
}

struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

/// Quadratic coefficients per pixel: `b = (bx, by)`, `A = [[axx, axy/2], [axy/2, ayy]]`.
struct PolyCoeffs {
    bx: Vec<f64>,
    by: Vec<f64>,
    axx: Vec<f64>,
    ayy: Vec<f64>,
    axy: Vec<f64>,
}

fn downsample(p: &Plane) -> Plane {
    let k = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let blurred = separable_filter(&p.data, p.w, p.h, &k, &k);
    let (w, h) = (p.w.div_ceil(2), p.h.div_ceil(2));
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(blurred[2 * y * p.w + 2 * x]);
        }
    }
    Plane { w, h, data }
}

fn poly_expand(p: &Plane, n: usize, sigma: f64) -> PolyCoeffs {
    let g: Vec<f64> = (-(n as isize)..=n as isize)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let k0 = g.clone();
    let k1: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(i, w)| w * (i as f64 - n as f64))
        .collect();
    let k2: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(i, w)| w * (i as f64 - n as f64).powi(2))
        .collect();

    // Gram matrix of the basis [1, x, y, x^2, y^2, xy] under the applicability
    let mut gram = Matrix6::<f64>::zeros();
    for (iy, &wy) in g.iter().enumerate() {
        for (ix, &wx) in g.iter().enumerate() {
            let (x, y) = (ix as f64 - n as f64, iy as f64 - n as f64);
            let basis = [1.0, x, y, x * x, y * y, x * y];
            for a in 0..6 {
                for b in 0..6 {
                    gram[(a, b)] += wx * wy * basis[a] * basis[b];
                }
            }
        }
    }
    let inv = gram
        .try_inverse()
        .expect("polynomial basis Gram matrix is invertible");

    let r0 = filter_rows(&p.data, p.w, p.h, &k0);
    let r1 = filter_rows(&p.data, p.w, p.h, &k1);
    let r2 = filter_rows(&p.data, p.w, p.h, &k2);
    let proj = [
        filter_cols(&r0, p.w, p.h, &k0),
        filter_cols(&r1, p.w, p.h, &k0),
        filter_cols(&r0, p.w, p.h, &k1),
        filter_cols(&r2, p.w, p.h, &k0),
        filter_cols(&r0, p.w, p.h, &k2),
        filter_cols(&r1, p.w, p.h, &k1),
    ];
    let len = p.data.len();
    let mut out = PolyCoeffs {
        bx: vec![0.0; len],
        by: vec![0.0; len],
        axx: vec![0.0; len],
        ayy: vec![0.0; len],
        axy: vec![0.0; len],
    };
    for i in 0..len {
        let v = Vector6::new(
            proj[0][i], proj[1][i], proj[2][i], proj[3][i], proj[4][i], proj[5][i],
        );
        let r = inv * v;
        out.bx[i] = r[1];
        out.by[i] = r[2];
        out.axx[i] = r[3];
        out.ayy[i] = r[4];
        out.axy[i] = r[5];
    }
    out
}

fn bilinear(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
    let bot = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn bilinear5(data: &[[f64; 5]], w: usize, h: usize, x: f64, y: f64) -> [f64; 5] {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let (w00, w01, w10, w11) = (
        (1.0 - fx) * (1.0 - fy),
        fx * (1.0 - fy),
        (1.0 - fx) * fy,
        fx * fy,
    );
    let (a, b, c, d) = (
        &data[y0 * w + x0],
        &data[y0 * w + x1],
        &data[y1 * w + x0],
        &data[y1 * w + x1],
    );
    std::array::from_fn(|k| a[k] * w00 + b[k] * w01 + c[k] * w10 + d[k] * w11)
}

impl Farneback {
    pub fn new(params: FarnebackParams) -> Self {
        Farneback { params }
    }

    fn refine_level(
        &self,
        p1: &PolyCoeffs,
        p2: &PolyCoeffs,
        w: usize,
        h: usize,
        flow_u: &mut [f64],
        flow_v: &mut [f64],
    ) {
        let win = gaussian_kernel(self.params.window / 2, self.params.window as f64 / 6.0);
        let lambda = self.params.regularization;
        let len = w * h;
        let mut g11 = vec![0.0; len];
        let mut g12 = vec![0.0; len];
        let mut g22 = vec![0.0; len];
        let mut h1 = vec![0.0; len];
        let mut h2 = vec![0.0; len];
        // second image's coefficients interleaved for one gather per pixel
        let packed: Vec<[f64; 5]> = (0..len)
            .map(|i| [p2.bx[i], p2.by[i], p2.axx[i], p2.ayy[i], p2.axy[i]])
            .collect();
        for _ in 0..self.params.iterations {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let (du, dv) = (flow_u[i], flow_v[i]);
                    let c = bilinear5(&packed, w, h, x as f64 + du, y as f64 + dv);
                    let a11 = 0.5 * (p1.axx[i] + c[2]);
                    let a22 = 0.5 * (p1.ayy[i] + c[3]);
                    let a12 = 0.25 * (p1.axy[i] + c[4]);
                    let db1 = -0.5 * (c[0] - p1.bx[i]) + a11 * du + a12 * dv;
                    let db2 = -0.5 * (c[1] - p1.by[i]) + a12 * du + a22 * dv;
                    g11[i] = a11 * a11 + a12 * a12;
                    g12[i] = a12 * (a11 + a22);
                    g22[i] = a12 * a12 + a22 * a22;
                    h1[i] = a11 * db1 + a12 * db2;
                    h2[i] = a12 * db1 + a22 * db2;
                }
            }
            let s11 = separable_filter(&g11, w, h, &win, &win);
            let s12 = separable_filter(&g12, w, h, &win, &win);
            let s22 = separable_filter(&g22, w, h, &win, &win);
            let t1 = separable_filter(&h1, w, h, &win, &win);
            let t2 = separable_filter(&h2, w, h, &win, &win);
            for i in 0..len {
                let a = s11[i] + lambda;
                let b = s12[i];
                let d = s22[i] + lambda;
                let r1 = t1[i] + lambda * flow_u[i];
                let r2 = t2[i] + lambda * flow_v[i];
                let det = a * d - b * b;
                if det.abs() > 1e-18 {
                    flow_u[i] = (d * r1 - b * r2) / det;
                    flow_v[i] = (a * r2 - b * r1) / det;
                }
            }
        }
    }
}

impl FlowEstimator for Farneback {
    fn estimate(&self, from: &GrayFrame, to: &GrayFrame) -> Result<FlowField> {
        self.params.validate()?;
        ensure_same_dims("flow frames", from.dims(), to.dims())?;
        let (w, h) = from.dims();
        if from.data().iter().all(|&v| v == 0) && to.data().iter().all(|&v| v == 0) {
            return Ok(FlowField::zeros(w, h));
        }
        let to_plane = |f: &GrayFrame| Plane {
            w,
            h,
            data: f.data().iter().map(|&v| v as f64 / 255.0).collect(),
        };
        let mut pyr1 = vec![to_plane(from)];
        let mut pyr2 = vec![to_plane(to)];
        while pyr1.len() < self.params.levels {
            let last = pyr1.last().unwrap();
            if last.w < 8 || last.h < 8 {
                break;
            }
            let next1 = downsample(last);
            let next2 = downsample(pyr2.last().unwrap());
            pyr1.push(next1);
            pyr2.push(next2);
        }

        let mut fu: Vec<f64> = Vec::new();
        let mut fv: Vec<f64> = Vec::new();
        let mut prev_dims = (0usize, 0usize);
        for (l1, l2) in pyr1.iter().zip(&pyr2).rev() {
            let (lw, lh) = (l1.w, l1.h);
            if fu.is_empty() {
                fu = vec![0.0; lw * lh];
                fv = vec![0.0; lw * lh];
            } else {
                let (pw, ph) = prev_dims;
                let mut nu = Vec::with_capacity(lw * lh);
                let mut nv = Vec::with_capacity(lw * lh);
                for y in 0..lh {
                    for x in 0..lw {
                        let cx = x as f64 / 2.0;
                        let cy = y as f64 / 2.0;
                        nu.push(2.0 * bilinear(&fu, pw, ph, cx, cy));
                        nv.push(2.0 * bilinear(&fv, pw, ph, cx, cy));
                    }
                }
                fu = nu;
                fv = nv;
            }
            let c1 = poly_expand(l1, self.params.poly_n, self.params.poly_sigma);
            let c2 = poly_expand(l2, self.params.poly_n, self.params.poly_sigma);
            self.refine_level(&c1, &c2, lw, lh, &mut fu, &mut fv);
            prev_dims = (lw, lh);
        }
        Ok(FlowField {
            width: w,
            height: h,
            u: fu.iter().map(|&v| v as f32).collect(),
            v: fv.iter().map(|&v| v as f32).collect(),
        })
    }
}

/// Flow from `x_hat_t` to `x_hat_t1` with the default estimator.
pub fn dense_flow(pair: &GatedFramePair) -> Result<FlowField> {
    dense_flow_with(&Farneback::default(), pair)
}

pub fn dense_flow_with(est: &dyn FlowEstimator, pair: &GatedFramePair) -> Result<FlowField> {
    est.estimate(&pair.x_hat_t, &pair.x_hat_t1)
}

/// Keeps mask pixels whose flow magnitude reaches `mag_threshold`.
pub fn flow_gate_mask(flow: &FlowField, m: &BinaryMask, mag_threshold: f64) -> Result<BinaryMask> {
    ensure_same_dims("flow gate", flow.dims(), m.dims())?;
    if !(mag_threshold >= 0.0) {
        return Err(Error::InvalidParam(format!(
            "magnitude threshold must be >= 0, got {mag_threshold}"
        )));
    }
    let data = m
        .data()
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let mag = (flow.u[i] as f64).hypot(flow.v[i] as f64);
            (b != 0 && mag >= mag_threshold) as u8
        })
        .collect();
    BinaryMask::from_vec(m.width(), m.height(), data)
}

/// Stage-1 labelling options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowParams {
    pub mag_threshold: f64,
    /// When false, flow runs on raw frames and every moving pixel is
    /// labelled (the "flow without background subtraction" ablation).
    pub bg_gate: bool,
    #[serde(default)]
    pub farneback: FarnebackParams,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            mag_threshold: 0.5,
            bg_gate: true,
            farneback: FarnebackParams::default(),
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mag_threshold >= 0.0) || !self.mag_threshold.is_finite() {
            return Err(Error::InvalidParam(format!(
                "mag_threshold must be finite and >= 0, got {}",
                self.mag_threshold
            )));
        }
        self.farneback.validate()
    }
}

/// Stage-1 pseudo-label for frame `t+1`, with default flow settings.
pub fn pseudo_label(
    x_t: &GrayFrame,
    x_t1: &GrayFrame,
    bg: &BackgroundModel,
    p: &ThresholdParams,
    mag_threshold: f64,
) -> Result<BinaryMask> {
    let fp = FlowParams {
        mag_threshold,
        ..Default::default()
    };
    pseudo_label_with(x_t, x_t1, bg, p, &fp)
}

/// Stage-1 pseudo-label for frame `t+1`, optionally returning the flow used.
pub fn pseudo_label_with(
    x_t: &GrayFrame,
    x_t1: &GrayFrame,
    bg: &BackgroundModel,
    p: &ThresholdParams,
    fp: &FlowParams,
) -> Result<BinaryMask> {
    pseudo_label_and_flow(x_t, x_t1, bg, p, fp).map(|(m, _)| m)
}

pub fn pseudo_label_and_flow(
    x_t: &GrayFrame,
    x_t1: &GrayFrame,
    bg: &BackgroundModel,
    p: &ThresholdParams,
    fp: &FlowParams,
) -> Result<(BinaryMask, FlowField)> {
    fp.validate()?;
    let est = Farneback::new(fp.farneback);
    // flow runs from t+1 back to t so that it lives on the labelled frame's grid
    if fp.bg_gate {
        let m_t = foreground_mask(x_t, bg, p)?;
        let m_t1 = foreground_mask(x_t1, bg, p)?;
        let pair = gate_frames(x_t1, x_t, &m_t1, &m_t)?;
        let flow = dense_flow_with(&est, &pair)?;
        Ok((flow_gate_mask(&flow, &m_t1, fp.mag_threshold)?, flow))
    } else {
        ensure_same_dims("label frames", x_t.dims(), x_t1.dims())?;
        let flow = est.estimate(x_t1, x_t)?;
        let all = BinaryMask::ones(x_t1.width(), x_t1.height());
        Ok((flow_gate_mask(&flow, &all, fp.mag_threshold)?, flow))
    }
}
