//! COCO-style box and mask evaluation (single class).
//!
//! The "mean" fields average over IoU thresholds 0.50:0.05:0.95; they are not
//! the medium-area band. The large band keeps objects with area > 96².

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::frame_io::BinaryMask;
use crate::instances::InstanceRecord;
use crate::rle::Rle;

pub const LARGE_AREA: f64 = 96.0 * 96.0;
pub const MAX_DETS: usize = 100;

pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn recall_thresholds() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| i as f64 / 100.0)
}

/// `|a & b| / |a | b|`; 1 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    ensure_same_dims("mask_iou", a.dims(), b.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Box IoU on `[x, y, w, h]`.
pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Prediction indices in processing order (score descending, stable).
    pub order: Vec<usize>,
    /// `tp[k]` refers to prediction `order[k]`.
    pub tp: Vec<bool>,
    /// Matched GT index per processed prediction.
    pub gt_index: Vec<Option<usize>>,
    pub unmatched_gt: usize,
}

/// Stable descending order by score.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy matching core. `ious[d][g]`; ignored GTs are matched only when no
/// regular GT qualifies. GTs must be ordered regular-first.
fn greedy_match(ious: &[Vec<f64>], gt_ignore: &[bool], threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gt_ignore.len()];
    ious.iter()
        .map(|row| {
            let mut best = threshold.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for (g, &v) in row.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                if let Some(mi) = m {
                    if !gt_ignore[mi] && gt_ignore[g] {
                        break;
                    }
                }
                if v < best {
                    continue;
                }
                best = v;
                m = Some(g);
            }
            if let Some(g) = m {
                taken[g] = true;
            }
            m
        })
        .collect()
}

/// Each prediction, by descending score, takes the highest-IoU unmatched
/// GT with IoU at least `threshold`.
pub fn match_detections<P, G>(
    preds: &[(f64, P)],
    gts: &[G],
    iou_fn: impl Fn(&P, &G) -> f64,
    threshold: f64,
) -> MatchResult {
    let scores: Vec<f64> = preds.iter().map(|p| p.0).collect();
    let order = score_order(&scores);
    let ious: Vec<Vec<f64>> = order
        .iter()
        .map(|&d| gts.iter().map(|g| iou_fn(&preds[d].1, g)).collect())
        .collect();
    let gt_index = greedy_match(&ious, &vec![false; gts.len()], threshold);
    let matched = gt_index.iter().filter(|m| m.is_some()).count();
    MatchResult {
        tp: gt_index.iter().map(Option::is_some).collect(),
        order,
        gt_index,
        unmatched_gt: gts.len() - matched,
    }
}

struct PrPoints {
    recall: Vec<f64>,
    precision: Vec<f64>,
}

fn pr_points(tps: &[bool], n_gt: usize) -> PrPoints {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recall = Vec::with_capacity(tps.len());
    let mut precision = Vec::with_capacity(tps.len());
    for &t in tps {
        if t {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / n_gt as f64);
        precision.push(tp / (tp + fp));
    }
    PrPoints { recall, precision }
}

/// 101-point interpolated AP over detections already in score order.
fn interpolated_ap(tps: &[bool], n_gt: usize) -> f64 {
    let PrPoints {
        recall,
        mut precision,
    } = pr_points(tps, n_gt);
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let sum: f64 = recall_thresholds()
        .map(|r| {
            let idx = recall.partition_point(|&rc| rc < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    sum / 101.0
}

/// AP from `(score, is_tp)` pairs; `None` when there is no ground truth.
pub fn average_precision(detections: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let scores: Vec<f64> = detections.iter().map(|d| d.0).collect();
    let tps: Vec<bool> = score_order(&scores)
        .into_iter()
        .map(|i| detections[i].1)
        .collect();
    Some(interpolated_ap(&tps, n_gt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub id: u64,
    pub bbox: [f64; 4],
    pub area: usize,
    pub mask_rle: Rle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtFrame {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<GtObject>,
}

impl GtFrame {
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u64> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParam(format!(
                "duplicate object id in frame {}",
                self.frame
            )));
        }
        for o in &self.objects {
            if o.mask_rle.size != [self.height, self.width] {
                return Err(Error::DimensionMismatch(format!(
                    "object {} mask size {:?} in a {}x{} frame",
                    o.id, o.mask_rle.size, self.width, self.height
                )));
            }
            if o.mask_rle.area() != o.area {
                return Err(Error::InvalidParam(format!(
                    "object {} area {} disagrees with its mask ({})",
                    o.id,
                    o.area,
                    o.mask_rle.area()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Box,
    Mask,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" | "bbox" => Ok(EvalMode::Box),
            "mask" | "segm" => Ok(EvalMode::Mask),
            _ => Err(Error::Config(format!("unknown eval mode `{s}` (box|mask)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub iou_threshold: f64,
    pub ap: Option<f64>,
    pub recall: Option<f64>,
    pub ap_large: Option<f64>,
    pub recall_large: Option<f64>,
}

/// Undefined values (no ground truth in a stratum) are `None` and
/// serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub ap_mean: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_large: Option<f64>,
    pub ar_mean: Option<f64>,
    pub ar_large: Option<f64>,
    pub n_gt: usize,
    pub n_gt_large: usize,
    pub n_pred: usize,
    pub per_threshold: Vec<ThresholdResult>,
}

impl EvalReport {
    /// Defined headline values, by name.
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        [
            ("ap_mean", self.ap_mean),
            ("ap50", self.ap50),
            ("ap75", self.ap75),
            ("ap_large", self.ap_large),
            ("ar_mean", self.ar_mean),
            ("ar_large", self.ar_large),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

struct FrameData {
    gt_area: Vec<f64>,
    det_area: Vec<f64>,
    det_score: Vec<f64>,
    /// `ious[d][g]`, detections by descending score, truncated to MAX_DETS.
    ious: Vec<Vec<f64>>,
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// AP and recall for one area band and IoU threshold; `None` without GT.
fn accumulate(
    frames: &[FrameData],
    threshold: f64,
    in_band: impl Fn(f64) -> bool,
) -> (Option<f64>, Option<f64>) {
    let mut n_gt = 0;
    let mut dets: Vec<(f64, bool)> = Vec::new();
    for f in frames {
        // regular GTs first, as the matcher expects
        let mut gorder: Vec<usize> = (0..f.gt_area.len()).collect();
        gorder.sort_by_key(|&g| !in_band(f.gt_area[g]));
        let gt_ignore: Vec<bool> = gorder.iter().map(|&g| !in_band(f.gt_area[g])).collect();
        n_gt += gt_ignore.iter().filter(|&&i| !i).count();
        let ious: Vec<Vec<f64>> = f
            .ious
            .iter()
            .map(|row| gorder.iter().map(|&g| row[g]).collect())
            .collect();
        let matches = greedy_match(&ious, &gt_ignore, threshold);
        for (d, m) in matches.iter().enumerate() {
            let ignored = match m {
                Some(g) => gt_ignore[*g],
                None => !in_band(f.det_area[d]),
            };
            if !ignored {
                dets.push((f.det_score[d], m.is_some()));
            }
        }
    }
    if n_gt == 0 {
        return (None, None);
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.0).collect();
    let tps: Vec<bool> = score_order(&scores)
        .into_iter()
        .map(|i| dets[i].1)
        .collect();
    let recall = tps.iter().filter(|&&t| t).count() as f64 / n_gt as f64;
    (Some(interpolated_ap(&tps, n_gt)), Some(recall))
}

/// Evaluates predictions against ground truth. Every prediction frame must
/// exist in the ground truth.
pub fn evaluate(preds: &[InstanceRecord], gt: &[GtFrame], mode: EvalMode) -> Result<EvalReport> {
    use std::collections::BTreeMap;
    let mut by_frame: BTreeMap<usize, Vec<&InstanceRecord>> = BTreeMap::new();
    for p in preds {
        by_frame.entry(p.frame).or_default().push(p);
    }
    let gt_frames: BTreeMap<usize, &GtFrame> = gt.iter().map(|g| (g.frame, g)).collect();
    if gt_frames.len() != gt.len() {
        return Err(Error::InvalidParam("ground truth repeats a frame".into()));
    }
    for f in by_frame.keys() {
        if !gt_frames.contains_key(f) {
            return Err(Error::InvalidParam(format!(
                "prediction frame {f} has no ground truth"
            )));
        }
    }
    let mut frames = Vec::with_capacity(gt.len());
    for (&fi, g) in &gt_frames {
        g.validate()?;
        let mut dets: Vec<&InstanceRecord> = by_frame.remove(&fi).unwrap_or_default();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        dets = score_order(&scores)
            .into_iter()
            .map(|i| dets[i])
            .take(MAX_DETS)
            .collect();
        let ious: Vec<Vec<f64>> = match mode {
            EvalMode::Box => dets
                .iter()
                .map(|d| {
                    g.objects
                        .iter()
                        .map(|o| box_iou(&d.bbox, &o.bbox))
                        .collect()
                })
                .collect(),
            EvalMode::Mask => {
                let gm: Vec<BinaryMask> = g
                    .objects
                    .iter()
                    .map(|o| o.mask_rle.decode())
                    .collect::<Result<_>>()?;
                let mut rows = Vec::with_capacity(dets.len());
                for d in &dets {
                    if d.mask_rle.size != [g.height, g.width] {
                        return Err(Error::DimensionMismatch(format!(
                            "prediction mask {:?} in frame {fi} of size {}x{}",
                            d.mask_rle.size, g.width, g.height
                        )));
                    }
                    let dm = d.mask_rle.decode()?;
                    rows.push(
                        gm.iter()
                            .map(|m| mask_iou(&dm, m))
                            .collect::<Result<Vec<f64>>>()?,
                    );
                }
                rows
            }
        };
        frames.push(FrameData {
            gt_area: g.objects.iter().map(|o| o.area as f64).collect(),
            det_area: dets
                .iter()
                .map(|d| match mode {
                    EvalMode::Box => d.bbox[2] * d.bbox[3],
                    EvalMode::Mask => d.area as f64,
                })
                .collect(),
            det_score: dets.iter().map(|d| d.score).collect(),
            ious,
        });
    }
    let large = |a: f64| a > LARGE_AREA;
    let per_threshold: Vec<ThresholdResult> = iou_thresholds()
        .into_iter()
        .map(|t| {
            let (ap, recall) = accumulate(&frames, t, |_| true);
            let (ap_large, recall_large) = accumulate(&frames, t, large);
            ThresholdResult {
                iou_threshold: t,
                ap,
                recall,
                ap_large,
                recall_large,
            }
        })
        .collect();
    let n_gt: usize = gt.iter().map(|g| g.objects.len()).sum();
    let n_gt_large = gt
        .iter()
        .flat_map(|g| &g.objects)
        .filter(|o| large(o.area as f64))
        .count();
    Ok(EvalReport {
        mode,
        ap_mean: mean(per_threshold.iter().map(|r| r.ap)),
        ap50: per_threshold[0].ap,
        ap75: per_threshold[5].ap,
        ap_large: mean(per_threshold.iter().map(|r| r.ap_large)),
        ar_mean: mean(per_threshold.iter().map(|r| r.recall)),
        ar_large: mean(per_threshold.iter().map(|r| r.recall_large)),
        n_gt,
        n_gt_large,
        n_pred: preds.len(),
        per_threshold,
    })
}

pub fn read_gt_jsonl(path: &Path) -> Result<Vec<GtFrame>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    crate::instances::read_jsonl(&text)
}

pub fn read_pred_jsonl(path: &Path) -> Result<Vec<InstanceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    crate::instances::read_jsonl(&text)
}

pub fn evaluate_files(pred_path: &Path, gt_path: &Path, mode: EvalMode) -> Result<EvalReport> {
    evaluate(&read_pred_jsonl(pred_path)?, &read_gt_jsonl(gt_path)?, mode)
}

/// Builds a ground-truth object from its mask.
pub fn gt_object(id: u64, mask: &BinaryMask) -> Option<GtObject> {
    let bbox = crate::instances::BBox::of_mask(mask)?;
    Some(GtObject {
        id,
        bbox: bbox.to_array(),
        area: mask.count(),
        mask_rle: Rle::encode(mask),
    })
}

/// Decodes the compressed count string used by COCO RLE.
pub fn coco_rle_counts_from_string(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = bytes[p]
                .checked_sub(48)
                .ok_or_else(|| Error::Config("invalid character in RLE string".into()))?
                as i64;
            x |= (c & 0x1f) << (5 * k);
            let more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
            if p >= bytes.len() {
                return Err(Error::Config("truncated RLE string".into()));
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u64::try_from(c).map_err(|_| Error::Config("negative RLE count".into())))
        .collect()
}

/// Column-major COCO counts to a mask.
fn coco_counts_to_mask(counts: &[u64], w: usize, h: usize) -> Result<BinaryMask> {
    let total: u64 = counts.iter().sum();
    if total != (w * h) as u64 {
        return Err(Error::Config(format!(
            "RLE covers {total} pixels, image has {}",
            w * h
        )));
    }
    let mut m = BinaryMask::zeros(w, h);
    let mut pos = 0usize;
    for (i, &c) in counts.iter().enumerate() {
        if i % 2 == 1 {
            for k in pos..pos + c as usize {
                m.set(k / h, k % h, true);
            }
        }
        pos += c as usize;
    }
    Ok(m)
}

/// Even-odd fill of polygons, sampled at pixel centers.
fn rasterize_polygons(polys: &[Vec<f64>], w: usize, h: usize) -> BinaryMask {
    let mut m = BinaryMask::zeros(w, h);
    for poly in polys {
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        if pts.len() < 3 {
            continue;
        }
        for y in 0..h {
            let py = y as f64 + 0.5;
            let mut xs: Vec<f64> = Vec::new();
            for i in 0..pts.len() {
                let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                if (a.1 <= py) != (b.1 <= py) {
                    xs.push(a.0 + (py - a.1) / (b.1 - a.1) * (b.0 - a.0));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                for x in 0..w {
                    let px = x as f64 + 0.5;
                    if px >= pair[0] && px < pair[1] {
                        m.set(x, y, true);
                    }
                }
            }
        }
    }
    m
}

fn coco_segmentation(seg: &serde_json::Value, w: usize, h: usize) -> Result<BinaryMask> {
    use serde_json::Value;
    match seg {
        Value::Array(polys) => {
            let polys: Vec<Vec<f64>> = serde_json::from_value(Value::Array(polys.clone()))?;
            Ok(rasterize_polygons(&polys, w, h))
        }
        Value::Object(o) => {
            let counts = match o.get("counts") {
                Some(Value::String(s)) => coco_rle_counts_from_string(s)?,
                Some(v @ Value::Array(_)) => serde_json::from_value(v.clone())?,
                _ => return Err(Error::Config("RLE segmentation without counts".into())),
            };
            coco_counts_to_mask(&counts, w, h)
        }
        _ => Err(Error::Config("unsupported segmentation encoding".into())),
    }
}

/// Converts a COCO annotation document into per-frame ground truth. Images
/// are ordered by id and numbered from 0.
pub fn coco_to_gt(doc: &serde_json::Value) -> Result<Vec<GtFrame>> {
    #[derive(Deserialize)]
    struct Image {
        id: u64,
        width: usize,
        height: usize,
    }
    #[derive(Deserialize)]
    struct Ann {
        id: u64,
        image_id: u64,
        segmentation: serde_json::Value,
    }
    let mut images: Vec<Image> =
        serde_json::from_value(doc.get("images").cloned().unwrap_or_default())
            .map_err(|e| Error::Config(format!("COCO images: {e}")))?;
    let anns: Vec<Ann> =
        serde_json::from_value(doc.get("annotations").cloned().unwrap_or_default())
            .map_err(|e| Error::Config(format!("COCO annotations: {e}")))?;
    images.sort_by_key(|i| i.id);
    let mut frames: Vec<GtFrame> = images
        .iter()
        .enumerate()
        .map(|(i, img)| GtFrame {
            frame: i,
            width: img.width,
            height: img.height,
            objects: Vec::new(),
        })
        .collect();
    for a in anns {
        let fi = images
            .iter()
            .position(|i| i.id == a.image_id)
            .ok_or_else(|| {
                Error::Config(format!(
                    "annotation {} references unknown image {}",
                    a.id, a.image_id
                ))
            })?;
        let (w, h) = (frames[fi].width, frames[fi].height);
        let mask = coco_segmentation(&a.segmentation, w, h)?;
        if let Some(obj) = gt_object(a.id, &mask) {
            frames[fi].objects.push(obj);
        }
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{min_area_rect, Instance};
    use proptest::prelude::*;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, rw: usize, rh: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| {
            x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh
        })
    }

    fn record(frame: usize, mask: &BinaryMask, score: f64) -> InstanceRecord {
        let inst = Instance::from_mask(mask.clone(), score).unwrap();
        InstanceRecord::new(frame, &inst, &min_area_rect(mask).unwrap())
    }

    fn gt_frame(frame: usize, masks: &[BinaryMask]) -> GtFrame {
        let (w, h) = masks[0].dims();
        GtFrame {
            frame,
            width: w,
            height: h,
            objects: masks
                .iter()
                .enumerate()
                .map(|(i, m)| gt_object(i as u64 + 1, m).unwrap())
                .collect(),
        }
    }

    fn gt_as_preds(gt: &[GtFrame]) -> Vec<InstanceRecord> {
        gt.iter()
            .flat_map(|g| {
                g.objects.iter().map(move |o| {
                    record(
                        g.frame,
                        &o.mask_rle.decode().unwrap(),
                        0.5 + o.id as f64 * 0.01,
                    )
                })
            })
            .collect()
    }

    #[test]
    fn mask_iou_cases() {
        let a = rect(3, 2, 0, 0, 2, 2);
        let b = rect(3, 2, 1, 0, 2, 2);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert!((mask_iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(
            mask_iou(&rect(4, 4, 0, 0, 1, 1), &rect(4, 4, 3, 3, 1, 1)).unwrap(),
            0.0
        );
        let z = BinaryMask::zeros(3, 2);
        assert_eq!(mask_iou(&z, &z).unwrap(), 1.0);
        assert_eq!(mask_iou(&z, &a).unwrap(), 0.0);
        assert!(mask_iou(&a, &BinaryMask::zeros(2, 3)).is_err());
    }

    fn b(x: f64, y: f64, w: f64, h: f64) -> [f64; 4] {
        [x, y, w, h]
    }

    #[test]
    fn matching_cases() {
        let gts = vec![b(0.0, 0.0, 10.0, 10.0), b(20.0, 0.0, 10.0, 10.0)];
        let perfect: Vec<(f64, [f64; 4])> = vec![(0.9, gts[0]), (0.8, gts[1])];
        let r = match_detections(&perfect, &gts, |p, g| box_iou(p, g), 0.5);
        assert_eq!(r.tp, vec![true, true]);
        assert_eq!(r.unmatched_gt, 0);

        let covering = vec![(0.9, b(0.0, 0.0, 30.0, 10.0))];
        let r = match_detections(&covering, &gts, |p, g| box_iou(p, g), 0.3);
        assert_eq!(
            (r.tp.iter().filter(|&&t| t).count(), r.unmatched_gt),
            (1, 1)
        );
    }

    /// Replays the greedy rule over an explicit IoU table by enumerating all
    /// partial assignments and picking the one the rule would produce.
    fn greedy_oracle(ious: &[Vec<f64>], t: f64) -> Vec<Option<usize>> {
        let n_gt = ious[0].len();
        let mut free = vec![true; n_gt];
        let mut out = Vec::new();
        for row in ious {
            let cands: Vec<usize> = (0..n_gt).filter(|&g| free[g] && row[g] >= t).collect();
            let best = cands
                .iter()
                .copied()
                .fold(None::<usize>, |acc, g| match acc {
                    Some(a) if row[a] > row[g] => Some(a),
                    _ => Some(g),
                });
            if let Some(g) = best {
                free[g] = false;
            }
            out.push(best);
        }
        out
    }

    #[test]
    fn three_predictions_two_gts() {
        let gts = vec![b(0.0, 0.0, 10.0, 10.0), b(6.0, 0.0, 10.0, 10.0)];
        let preds = vec![
            (0.7, b(1.0, 0.0, 10.0, 10.0)),
            (0.9, b(5.0, 0.0, 10.0, 10.0)),
            (0.8, b(0.0, 0.0, 10.0, 10.0)),
        ];
        let r = match_detections(&preds, &gts, |p, g| box_iou(p, g), 0.5);
        assert_eq!(r.order, vec![1, 2, 0]);
        let table: Vec<Vec<f64>> = r
            .order
            .iter()
            .map(|&d| gts.iter().map(|g| box_iou(&preds[d].1, g)).collect())
            .collect();
        assert_eq!(r.gt_index, greedy_oracle(&table, 0.5));
        assert_eq!(r.tp, vec![true, true, false]);
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[(0.9, true), (0.8, true)], 2), Some(1.0));
        assert_eq!(average_precision(&[(0.9, false)], 1), Some(0.0));
        assert_eq!(average_precision(&[], 1), Some(0.0));
        assert_eq!(average_precision(&[(0.9, true)], 0), None);
    }

    #[test]
    fn five_detection_curve() {
        let dets = [
            (0.9, true),
            (0.8, false),
            (0.7, true),
            (0.6, true),
            (0.5, false),
        ];
        let ap = average_precision(&dets, 4).unwrap();
        // precision envelope: 1 up to recall .25, then .75 up to .75, then 0
        let mut sum = 0.0;
        for i in 0..=100 {
            sum += if i <= 25 {
                1.0
            } else if i <= 75 {
                0.75
            } else {
                0.0
            };
        }
        assert!((ap - sum / 101.0).abs() < 1e-15, "{ap}");
        assert!((ap - 63.5 / 101.0).abs() < 1e-12);
    }

    fn two_object_gt(frames: usize) -> Vec<GtFrame> {
        (0..frames)
            .map(|f| {
                gt_frame(
                    f,
                    &[
                        rect(160, 160, 2 + f, 4, 20, 12),
                        rect(160, 160, 40, 30 + f, 100, 97),
                    ],
                )
            })
            .collect()
    }

    #[test]
    fn gt_against_itself_is_perfect() {
        let gt = two_object_gt(3);
        assert_eq!(gt[0].objects[1].area, 9700);
        let preds = gt_as_preds(&gt);
        for mode in [EvalMode::Box, EvalMode::Mask] {
            let r = evaluate(&preds, &gt, mode).unwrap();
            assert_eq!(r.fields().len(), 6);
            for (k, v) in r.fields() {
                assert_eq!(v, 1.0, "{k} in {mode:?}");
            }
        }
    }

    #[test]
    fn undefined_large_band_is_null() {
        let gt = vec![gt_frame(0, &[rect(32, 32, 2, 2, 5, 5)])];
        let r = evaluate(&gt_as_preds(&gt), &gt, EvalMode::Mask).unwrap();
        assert_eq!(r.ap_large, None);
        assert_eq!(r.ar_large, None);
        assert_eq!(r.ap_mean, Some(1.0));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["ap_large"].is_null());
    }

    #[test]
    fn empty_predictions_score_zero() {
        let gt = two_object_gt(2);
        let r = evaluate(&[], &gt, EvalMode::Box).unwrap();
        assert_eq!(
            (r.ap_mean, r.ap50, r.ap75, r.ar_mean),
            (Some(0.0), Some(0.0), Some(0.0), Some(0.0))
        );
    }

    #[test]
    fn unknown_frame_is_an_error() {
        let gt = two_object_gt(1);
        let mut preds = gt_as_preds(&gt);
        preds[0].frame = 5;
        assert!(evaluate(&preds, &gt, EvalMode::Box).is_err());
    }

    #[test]
    fn jitter_hurts_strict_threshold_more() {
        let gt: Vec<GtFrame> = (0..10)
            .map(|f| gt_frame(f, &[rect(64, 64, 10, 10, 20, 20)]))
            .collect();
        let preds: Vec<InstanceRecord> = (0..10)
            .map(|f| {
                // shifts of 2..4 px give IoU between 0.54 and 0.82
                let s = 2 + f % 3;
                record(f, &rect(64, 64, 10 + s, 10 + s / 2, 20, 20), 0.9)
            })
            .collect();
        let r = evaluate(&preds, &gt, EvalMode::Box).unwrap();
        assert!(
            r.ap50.unwrap() > r.ap75.unwrap(),
            "{:?} {:?}",
            r.ap50,
            r.ap75
        );
    }

    #[test]
    fn duplicates_do_not_help() {
        let gt = two_object_gt(2);
        let preds = gt_as_preds(&gt);
        let base = evaluate(&preds, &gt, EvalMode::Mask).unwrap();
        let mut dup = preds.clone();
        dup.extend(preds.iter().map(|p| InstanceRecord {
            score: p.score * 0.5,
            ..p.clone()
        }));
        let r = evaluate(&dup, &gt, EvalMode::Mask).unwrap();
        assert!(r.ap_mean.unwrap() <= base.ap_mean.unwrap());
    }

    /// Inverse of the string decoder, written from the format description.
    fn encode_counts(counts: &[u64]) -> String {
        let mut s = String::new();
        for i in 0..counts.len() {
            let mut x = counts[i] as i64;
            if i > 2 {
                x -= counts[i - 2] as i64;
            }
            loop {
                let mut c = x & 0x1f;
                x >>= 5;
                let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    c |= 0x20;
                }
                s.push((c as u8 + 48) as char);
                if !more {
                    break;
                }
            }
        }
        s
    }

    #[test]
    fn coco_conversion() {
        // 4x3 image; object is the 2x2 block at x in 1..3, y in 0..2
        let counts = vec![3u64, 2, 1, 2, 4];
        let doc = serde_json::json!({
            "images": [{"id": 7, "width": 4, "height": 3}, {"id": 3, "width": 4, "height": 3}],
            "annotations": [
                {"id": 1, "image_id": 7, "segmentation": {"size": [3, 4], "counts": counts}},
                {"id": 2, "image_id": 7, "segmentation": {"size": [3, 4], "counts": encode_counts(&counts)}},
                {"id": 3, "image_id": 3, "segmentation": [[1.0, 0.0, 3.0, 0.0, 3.0, 2.0, 1.0, 2.0]]},
            ]
        });
        let frames = coco_to_gt(&doc).unwrap();
        let want = rect(4, 3, 1, 0, 2, 2);
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1].objects.len(), 2);
        for o in frames[1].objects.iter().chain(&frames[0].objects) {
            assert_eq!(o.mask_rle.decode().unwrap(), want);
            assert_eq!(o.bbox, [1.0, 0.0, 2.0, 2.0]);
        }
    }

    #[test]
    fn rle_string_round_trip() {
        let counts = vec![0u64, 5, 100, 3, 2000, 1, 1, 70000];
        assert_eq!(
            coco_rle_counts_from_string(&encode_counts(&counts)).unwrap(),
            counts
        );
    }

    proptest! {
        #[test]
        fn rank_only_dependence(scores in proptest::collection::vec(0.01f64..1.0, 6), shift in 0usize..4) {
            let gt = two_object_gt(3);
            let mut preds = gt_as_preds(&gt);
            for (p, s) in preds.iter_mut().zip(&scores) {
                p.score = *s;
            }
            // an off-target false positive per frame
            for f in 0..3 {
                preds.push(record(f, &rect(160, 160, 60 + shift, 0, 8, 8), scores[f]));
            }
            let a = evaluate(&preds, &gt, EvalMode::Mask).unwrap();
            let rescaled: Vec<InstanceRecord> = preds.iter().map(|p| InstanceRecord { score: p.score.powi(3) * 0.5 + 0.1, ..p.clone() }).collect();
            let b = evaluate(&rescaled, &gt, EvalMode::Mask).unwrap();
            prop_assert_eq!(a.fields(), b.fields());
        }

        #[test]
        fn mask_iou_symmetric_and_monotone(
            a in proptest::collection::vec(0u8..2, 64),
            c in proptest::collection::vec(0u8..2, 64),
            extra in 0usize..64,
        ) {
            let a = BinaryMask::from_vec(8, 8, a).unwrap();
            let c = BinaryMask::from_vec(8, 8, c).unwrap();
            let v = mask_iou(&a, &c).unwrap();
            prop_assert_eq!(v, mask_iou(&c, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&v));
            let mut a2 = a.clone();
            let mut c2 = c.clone();
            a2.set(extra % 8, extra / 8, true);
            c2.set(extra % 8, extra / 8, true);
            prop_assert!(mask_iou(&a2, &c2).unwrap() >= v - 1e-15);
        }
    }
}
