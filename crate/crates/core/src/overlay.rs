//! Track overlays: id-colored rotated boxes with fading trajectory tails.

use std::collections::BTreeMap;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::frame_io::Frame;
use crate::tracker::TrackOutput;

/// Fixed id palette; track `id` uses entry `(id - 1) % 12`.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
];

pub fn color_for(id: u64) -> [u8; 3] {
    PALETTE[(id.saturating_sub(1) % PALETTE.len() as u64) as usize]
}

/// Interleaved RGB canvas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn from_frame(frame: &Frame) -> Self {
        let rgb = if frame.channels() == 3 {
            frame.data().to_vec()
        } else {
            frame.data().iter().flat_map(|&v| [v, v, v]).collect()
        };
        Canvas {
            width: frame.width(),
            height: frame.height(),
            rgb,
        }
    }

    /// Alpha-blends `color` into pixel (x, y); out-of-bounds points are ignored.
    pub fn blend(&mut self, x: i64, y: i64, color: [u8; 3], alpha: f64) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = 3 * (y as usize * self.width + x as usize);
        for c in 0..3 {
            let v = alpha * color[c] as f64 + (1.0 - alpha) * self.rgb[i + c] as f64;
            self.rgb[i + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }

    /// Draws a segment with integer DDA stepping.
    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3], alpha: f64) {
        let (x0, y0) = (a.0.round() as i64, a.1.round() as i64);
        let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
        let steps = (x1 - x0).abs().max((y1 - y0).abs());
        if steps == 0 {
            self.blend(x0, y0, color, alpha);
            return;
        }
        for s in 0..=steps {
            let x = x0 as f64 + (x1 - x0) as f64 * s as f64 / steps as f64;
            let y = y0 as f64 + (y1 - y0) as f64 * s as f64 / steps as f64;
            self.blend(x.round() as i64, y.round() as i64, color, alpha);
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        PngEncoder::new(&mut out)
            .write_image(
                &self.rgb,
                self.width as u32,
                self.height as u32,
                ExtendedColorType::Rgb8,
            )
            .map_err(|e| Error::InvalidParam(format!("png encoding failed: {e}")))?;
        Ok(out)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))
    }
}

/// Renders one canvas per frame.
///
/// Each reported track gets its rotated box in its palette color and a tail
/// through its last `tail_length` reported centers, fading with age.
pub fn render_overlays(
    frames: &[Frame],
    tracks: &[TrackOutput],
    tail_length: usize,
) -> Vec<Canvas> {
    let mut by_frame: BTreeMap<usize, Vec<&TrackOutput>> = BTreeMap::new();
    for o in tracks {
        by_frame.entry(o.frame).or_default().push(o);
    }
    let mut trails: BTreeMap<u64, Vec<(usize, (f64, f64))>> = BTreeMap::new();
    frames
        .iter()
        .enumerate()
        .map(|(t, frame)| {
            let mut canvas = Canvas::from_frame(frame);
            let current = by_frame.get(&t).map(Vec::as_slice).unwrap_or(&[]);
            for o in current {
                trails
                    .entry(o.track_id)
                    .or_default()
                    .push((t, (o.rbox.cx, o.rbox.cy)));
            }
            for o in current {
                let color = color_for(o.track_id);
                let trail = &trails[&o.track_id];
                let start = trail.len().saturating_sub(tail_length + 1);
                let recent = &trail[start..];
                for (k, pair) in recent.windows(2).enumerate() {
                    let alpha = (k + 1) as f64 / recent.len() as f64;
                    canvas.line(pair[0].1, pair[1].1, color, alpha);
                }
                let corners = o.rbox.corners();
                for i in 0..4 {
                    canvas.line(corners[i], corners[(i + 1) % 4], color, 1.0);
                }
            }
            canvas
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{BBox, RotatedBox};

    fn output(frame: usize, id: u64, cx: f64) -> TrackOutput {
        TrackOutput {
            frame,
            track_id: id,
            bbox: BBox::new(cx - 4.0, 6.0, 8.0, 8.0),
            rbox: RotatedBox {
                cx,
                cy: 10.0,
                w: 8.0,
                h: 8.0,
                angle: 0.0,
            },
            score: 1.0,
        }
    }

    #[test]
    fn palette_wraps_every_twelve_ids() {
        assert_eq!(color_for(1), color_for(13));
        assert_ne!(color_for(1), color_for(2));
    }

    #[test]
    fn no_tracks_leaves_frame_untouched() {
        let f = Frame::new(16, 16, 1, (0..=255).collect()).unwrap();
        let c = render_overlays(&[f.clone()], &[], 5);
        assert_eq!(c[0], Canvas::from_frame(&f));
    }

    #[test]
    fn box_edges_use_palette_color() {
        let f = Frame::new(32, 24, 1, vec![0; 32 * 24]).unwrap();
        let frames = vec![f.clone(), f];
        let tracks = vec![output(0, 1, 10.0), output(1, 1, 14.0)];
        let c = render_overlays(&frames, &tracks, 5);
        let px = |c: &Canvas, x: usize, y: usize| {
            let i = 3 * (y * c.width + x);
            [c.rgb[i], c.rgb[i + 1], c.rgb[i + 2]]
        };
        // corner (cx - 4, cy - 4) of frame 1's box
        assert_eq!(px(&c[1], 10, 6), PALETTE[0]);
        // tail midpoint is blended, not fully saturated
        let mid = px(&c[1], 12, 10);
        assert!(mid != [0, 0, 0] && mid != PALETTE[0]);
    }

    #[test]
    fn png_encoding_is_deterministic() {
        let f = Frame::new(8, 8, 3, (0..192).map(|v| v as u8).collect()).unwrap();
        let c = Canvas::from_frame(&f);
        assert_eq!(c.encode_png().unwrap(), c.encode_png().unwrap());
        let back = image::load_from_memory(&c.encode_png().unwrap())
            .unwrap()
            .into_rgb8();
        assert_eq!(back.into_raw(), c.rgb);
    }
}
