//! Instance extraction: connected components, Matrix NMS and minimum-area
//! rotated rectangles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame_io::BinaryMask;
use crate::refine::SoftMask;
use crate::rle::Rle;

/// Axis-aligned box, `(x, y)` top-left, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Tight bound of the mask's pixels (each pixel covers a unit square).
    pub fn of_mask(mask: &BinaryMask) -> Option<BBox> {
        let mut it = mask.foreground();
        let (x0, y0) = it.next()?;
        let (mut minx, mut maxx, mut miny, mut maxy) = (x0, x0, y0, y0);
        for (x, y) in it {
            minx = minx.min(x);
            maxx = maxx.max(x);
            miny = miny.min(y);
            maxy = maxy.max(y);
        }
        Some(BBox::new(
            minx as f64,
            miny as f64,
            (maxx - minx + 1) as f64,
            (maxy - miny + 1) as f64,
        ))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Rotated rectangle with `w >= h` and `angle` (degrees, `[0, 180)`) the
/// direction of the long side, measured from +x toward +y (image axes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub angle: f64,
}

impl RotatedBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.angle.to_radians().sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        let ux = (c * hw, s * hw);
        let uy = (-s * hh, c * hh);
        [
            (self.cx - ux.0 - uy.0, self.cy - ux.1 - uy.1),
            (self.cx + ux.0 - uy.0, self.cy + ux.1 - uy.1),
            (self.cx + ux.0 + uy.0, self.cy + ux.1 + uy.1),
            (self.cx - ux.0 + uy.0, self.cy - ux.1 + uy.1),
        ]
    }

    /// Whether `(x, y)` lies inside the box, up to `tol` pixels.
    pub fn contains(&self, x: f64, y: f64, tol: f64) -> bool {
        let (s, c) = self.angle.to_radians().sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= self.w / 2.0 + tol && across.abs() <= self.h / 2.0 + tol
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.cx, self.cy, self.w, self.h, self.angle]
    }
}

/// One segmented object. `mask` covers the full canvas but holds only this
/// object's pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub mask: BinaryMask,
    pub bbox_axis_aligned: BBox,
    pub score: f64,
    pub area: usize,
}

impl Instance {
    pub fn from_mask(mask: BinaryMask, score: f64) -> Result<Instance> {
        let bbox = BBox::of_mask(&mask)
            .ok_or_else(|| Error::Empty("instance mask has no foreground".into()))?;
        Ok(Instance {
            area: mask.count(),
            bbox_axis_aligned: bbox,
            mask,
            score,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    Eight,
}

fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> (Vec<u32>, Vec<Vec<usize>>) {
    let (w, h) = mask.dims();
    let mut labels = vec![0u32; w * h];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    let mut stack = Vec::new();
    let data = mask.data();
    for start in 0..w * h {
        if data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = comps.len() as u32 + 1;
        let mut pixels = Vec::new();
        labels[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let mut visit = |nx: isize, ny: isize| {
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    return;
                }
                let j = ny as usize * w + nx as usize;
                if data[j] != 0 && labels[j] == 0 {
                    labels[j] = id;
                    stack.push(j);
                }
            };
            visit(x - 1, y);
            visit(x + 1, y);
            visit(x, y - 1);
            visit(x, y + 1);
            if connectivity == Connectivity::Eight {
                visit(x - 1, y - 1);
                visit(x + 1, y - 1);
                visit(x - 1, y + 1);
                visit(x + 1, y + 1);
            }
        }
        pixels.sort_unstable();
        comps.push(pixels);
    }
    (labels, comps)
}

/// 4-connected components with at least `min_area` pixels, largest first
/// (ties by raster position of the first pixel). Scores are 1.0.
pub fn connected_components(mask: &BinaryMask, min_area: usize) -> Vec<Instance> {
    connected_components_with(mask, min_area, Connectivity::Four)
}

pub fn connected_components_with(
    mask: &BinaryMask,
    min_area: usize,
    connectivity: Connectivity,
) -> Vec<Instance> {
    let (w, h) = mask.dims();
    let (_, mut comps) = label_components(mask, connectivity);
    comps.retain(|c| c.len() >= min_area);
    // components are discovered in raster order of their first pixel
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
        .into_iter()
        .map(|pixels| {
            let mut m = BinaryMask::zeros(w, h);
            for &i in &pixels {
                m.set(i % w, i / w, true);
            }
            Instance::from_mask(m, 1.0).expect("component is non-empty")
        })
        .collect()
}

fn boxes_disjoint(a: &BBox, b: &BBox) -> bool {
    a.x + a.w <= b.x || b.x + b.w <= a.x || a.y + a.h <= b.y || b.y + b.h <= a.y
}

/// Mask IoU between two instances on the same canvas.
pub fn instance_iou(a: &Instance, b: &Instance) -> f64 {
    if boxes_disjoint(&a.bbox_axis_aligned, &b.bbox_axis_aligned) {
        return 0.0;
    }
    let inter = a
        .mask
        .data()
        .iter()
        .zip(b.mask.data())
        .filter(|(&x, &y)| x != 0 && y != 0)
        .count();
    let union = a.area + b.area - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Gaussian Matrix NMS.
///
/// With instances sorted by score, each instance `j` is decayed by
/// `min_i exp(-(iou(i, j)^2 - iou_max(i)^2) / sigma)` over higher-scored `i`,
/// where `iou_max(i)` is the largest IoU of `i` with any instance scored
/// above it. Survivors (decayed score `>= score_threshold`) come back sorted
/// by decayed score, descending.
pub fn matrix_nms(instances: &[Instance], sigma: f64, score_threshold: f64) -> Vec<Instance> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| instances[b].score.total_cmp(&instances[a].score));
    let sorted: Vec<&Instance> = order.iter().map(|&i| &instances[i]).collect();
    let n = sorted.len();
    let mut iou = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            iou[i * n + j] = instance_iou(sorted[i], sorted[j]);
        }
    }
    let cmax: Vec<f64> = (0..n)
        .map(|j| (0..j).map(|i| iou[i * n + j]).fold(0.0, f64::max))
        .collect();
    let mut out: Vec<Instance> = Vec::new();
    for j in 0..n {
        let decay = (0..j)
            .map(|i| (-(iou[i * n + j].powi(2) - cmax[i].powi(2)) / sigma).exp())
            .fold(1.0, f64::min);
        let score = sorted[j].score * decay;
        if score >= score_threshold {
            let mut inst = sorted[j].clone();
            inst.score = score;
            out.push(inst);
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Classic greedy NMS: keep the best, drop anything overlapping a kept one
/// by more than `iou_threshold`.
pub fn greedy_nms(instances: &[Instance], iou_threshold: f64) -> Vec<Instance> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| instances[b].score.total_cmp(&instances[a].score));
    let mut kept: Vec<Instance> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|k| instance_iou(k, &instances[i]) <= iou_threshold)
        {
            kept.push(instances[i].clone());
        }
    }
    kept
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull (counter-clockwise in image axes, no collinear points).
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn normalize_angle(deg: f64) -> f64 {
    let a = deg.rem_euclid(180.0);
    if a >= 180.0 - 1e-9 {
        0.0
    } else {
        a
    }
}

/// Minimum-area rectangle over the pixel centers of `mask`, by rotating
/// calipers on the convex hull. Extents are center-to-center, so a run of
/// `n` pixels measures `n - 1`.
pub fn min_area_rect(mask: &BinaryMask) -> Result<RotatedBox> {
    let pts: Vec<(i64, i64)> = mask
        .foreground()
        .map(|(x, y)| (x as i64, y as i64))
        .collect();
    if pts.is_empty() {
        return Err(Error::Empty("min_area_rect of an empty mask".into()));
    }
    let hull = convex_hull(&pts);
    if hull.len() == 1 {
        let (x, y) = hull[0];
        return Ok(RotatedBox {
            cx: x as f64,
            cy: y as f64,
            w: 0.0,
            h: 0.0,
            angle: 0.0,
        });
    }
    let hf: Vec<(f64, f64)> = hull.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    let mut best: Option<(f64, RotatedBox)> = None;
    for i in 0..hf.len() {
        let a = hf[i];
        let b = hf[(i + 1) % hf.len()];
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        if len == 0.0 {
            continue;
        }
        let e = ((b.0 - a.0) / len, (b.1 - a.1) / len);
        let nrm = (-e.1, e.0);
        let (mut lo_e, mut hi_e, mut lo_n, mut hi_n) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &hf {
            let pe = p.0 * e.0 + p.1 * e.1;
            let pn = p.0 * nrm.0 + p.1 * nrm.1;
            lo_e = lo_e.min(pe);
            hi_e = hi_e.max(pe);
            lo_n = lo_n.min(pn);
            hi_n = hi_n.max(pn);
        }
        let (w, h) = (hi_e - lo_e, hi_n - lo_n);
        let area = w * h;
        // strict improvement beyond rounding noise keeps the first edge on ties
        if best.as_ref().is_none_or(|(a, _)| area < *a - 1e-9) {
            let me = 0.5 * (lo_e + hi_e);
            let mn = 0.5 * (lo_n + hi_n);
            let mut angle = e.1.atan2(e.0).to_degrees();
            let (mut bw, mut bh) = (w, h);
            if bw < bh {
                std::mem::swap(&mut bw, &mut bh);
                angle += 90.0;
            }
            best = Some((
                area,
                RotatedBox {
                    cx: me * e.0 + mn * nrm.0,
                    cy: me * e.1 + mn * nrm.1,
                    w: bw,
                    h: bh,
                    angle: normalize_angle(angle),
                },
            ));
        }
    }
    Ok(best.expect("hull has an edge").1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceParams {
    pub score_threshold: f64,
    pub bin_threshold: f64,
    pub nms_sigma: f64,
    pub min_area: usize,
    pub connectivity: Connectivity,
}

impl Default for InstanceParams {
    fn default() -> Self {
        InstanceParams {
            score_threshold: 0.1,
            bin_threshold: 0.5,
            nms_sigma: 0.5,
            min_area: 25,
            connectivity: Connectivity::Four,
        }
    }
}

impl InstanceParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold)
            || !(0.0..=1.0).contains(&self.bin_threshold)
        {
            return Err(Error::InvalidParam(
                "instance thresholds must be in [0, 1]".into(),
            ));
        }
        if !(self.nms_sigma > 0.0) {
            return Err(Error::InvalidParam("nms_sigma must be positive".into()));
        }
        Ok(())
    }
}

fn mean_prob(soft: &SoftMask, mask: &BinaryMask) -> f64 {
    let (sum, n) = mask
        .foreground()
        .fold((0.0, 0usize), |(s, n), (x, y)| (s + soft.get(x, y), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn finish(survivors: Vec<Instance>) -> Vec<(Instance, RotatedBox)> {
    survivors
        .into_iter()
        .map(|inst| {
            let rbox = min_area_rect(&inst.mask).expect("instances are non-empty");
            (inst, rbox)
        })
        .collect()
}

/// Binarize, split into components scored by mean probability, suppress
/// duplicates, and fit a rotated box to each survivor.
pub fn binarize_and_extract(
    soft: &SoftMask,
    p: &InstanceParams,
) -> Result<Vec<(Instance, RotatedBox)>> {
    p.validate()?;
    let bin = soft.binarize(p.bin_threshold);
    let mut comps = connected_components_with(&bin, p.min_area, p.connectivity);
    for c in &mut comps {
        c.score = mean_prob(soft, &c.mask);
    }
    Ok(finish(matrix_nms(&comps, p.nms_sigma, p.score_threshold)))
}

/// Same pipeline for a set of candidate masks, one object hypothesis each
/// (possibly overlapping). Candidates scoring below `score_threshold` are
/// dropped before suppression.
pub fn extract_candidates(
    candidates: &[SoftMask],
    p: &InstanceParams,
) -> Result<Vec<(Instance, RotatedBox)>> {
    p.validate()?;
    let mut insts = Vec::new();
    for c in candidates {
        let bin = c.binarize(p.bin_threshold);
        if bin.count() < p.min_area.max(1) {
            continue;
        }
        let score = mean_prob(c, &bin);
        if score < p.score_threshold {
            continue;
        }
        insts.push(Instance::from_mask(bin, score)?);
    }
    Ok(finish(matrix_nms(&insts, p.nms_sigma, p.score_threshold)))
}

/// One line of the instance dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub frame: usize,
    pub score: f64,
    pub area: usize,
    pub bbox: [f64; 4],
    pub rbox: [f64; 5],
    pub mask_rle: Rle,
}

impl InstanceRecord {
    pub fn new(frame: usize, inst: &Instance, rbox: &RotatedBox) -> Self {
        InstanceRecord {
            frame,
            score: inst.score,
            area: inst.area,
            bbox: inst.bbox_axis_aligned.to_array(),
            rbox: rbox.to_array(),
            mask_rle: Rle::encode(&inst.mask),
        }
    }

    pub fn to_instance(&self) -> Result<(Instance, RotatedBox)> {
        let mask = self.mask_rle.decode()?;
        let mut inst = Instance::from_mask(mask, self.score)?;
        inst.score = self.score;
        let [cx, cy, w, h, angle] = self.rbox;
        Ok((
            inst,
            RotatedBox {
                cx,
                cy,
                w,
                h,
                angle,
            },
        ))
    }
}

/// Serializes records as JSON lines.
pub fn write_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
