//! Frame, gray-frame and mask rasters plus NetPBM / PNG I/O.
//!
//! NetPBM binary (P5/P6) is the canonical bit-exact format. PNG is accepted
//! on input only.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// A row-major 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
    /// Position within the sequence, 0-based.
    pub index: usize,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParam(format!(
                "frame must be at least 1x1, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::UnsupportedChannels(channels));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidParam(format!(
                "frame data has {} bytes, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Frame {
            width,
            height,
            channels,
            data,
            index: 0,
        })
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Channel values of pixel `(x, y)`.
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

impl From<GrayFrame> for Frame {
    fn from(g: GrayFrame) -> Self {
        Frame {
            width: g.width,
            height: g.height,
            channels: 1,
            data: g.data,
            index: 0,
        }
    }
}

/// Single-channel 8-bit raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParam(format!(
                "frame must be at least 1x1, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidParam(format!(
                "gray frame data has {} bytes, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(GrayFrame {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0);
        GrayFrame {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0);
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayFrame {
            width,
            height,
            data,
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }
}

/// Per-pixel foreground labels, each exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    /// Builds a mask from 0/1 bytes. Any other value is rejected.
    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidParam(format!(
                "mask data has {} entries, expected {}",
                data.len(),
                width * height
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidParam(format!("mask value {v} is not 0 or 1")));
        }
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        BinaryMask {
            width,
            height,
            data,
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Coordinates of every foreground pixel in raster order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        crate::error::ensure_same_dims("mask and", self.dims(), other.dims())?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a & b)
                .collect(),
        })
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        crate::error::ensure_same_dims("mask or", self.dims(), other.dims())?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a | b)
                .collect(),
        })
    }
}

/// Converts to gray with BT.601 luma weights, rounding half up.
pub fn to_gray(frame: &Frame) -> Result<GrayFrame> {
    match frame.channels {
        1 => Ok(GrayFrame {
            width: frame.width,
            height: frame.height,
            data: frame.data.clone(),
        }),
        3 => {
            // integer weights x1000 keep the half-up rounding exact
            let data = frame
                .data
                .chunks_exact(3)
                .map(|p| {
                    let y = 299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32;
                    ((y + 500) / 1000).min(255) as u8
                })
                .collect();
            Ok(GrayFrame {
                width: frame.width,
                height: frame.height,
                data,
            })
        }
        c => Err(Error::UnsupportedChannels(c)),
    }
}

// ---------------------------------------------------------------------------
// NetPBM

struct PnmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8]) -> std::result::Result<PnmHeader, String> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err("not a NetPBM file".into());
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header number")?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    Ok(PnmHeader {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        data_offset: pos,
    })
}

fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<Frame> {
    let h = parse_pnm_header(bytes).map_err(|r| Error::decode(path, r))?;
    let channels = match &h.magic {
        b"P5" => 1,
        b"P6" => 3,
        m => {
            return Err(Error::decode(
                path,
                format!("unsupported NetPBM type {}", String::from_utf8_lossy(m)),
            ))
        }
    };
    if h.maxval == 0 || h.maxval > 255 {
        return Err(Error::decode(
            path,
            format!("maxval {} is not 8-bit", h.maxval),
        ));
    }
    let n = h.width * h.height * channels;
    let raster = bytes
        .get(h.data_offset..h.data_offset + n)
        .ok_or_else(|| Error::decode(path, "truncated raster"))?;
    Frame::new(h.width, h.height, channels, raster.to_vec())
        .map_err(|e| Error::decode(path, e.to_string()))
}

fn encode_pnm(magic: &str, width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Reads a single NetPBM (P5/P6) or PNG image.
pub fn read_frame(path: &Path) -> Result<Frame> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    if ext == "png" {
        let img = image::open(path).map_err(|e| Error::decode(path, e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        return if img.color().channel_count() <= 2 {
            Frame::new(w, h, 1, img.into_luma8().into_raw())
        } else {
            Frame::new(w, h, 3, img.into_rgb8().into_raw())
        }
        .map_err(|e| Error::decode(path, e.to_string()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(path, &bytes)
}

/// Writes a gray frame as binary PGM (P5).
pub fn write_gray(frame: &GrayFrame, path: &Path) -> Result<()> {
    write_bytes(
        path,
        &encode_pnm("P5", frame.width, frame.height, &frame.data),
    )
}

/// Writes a frame as P5 (gray) or P6 (RGB).
pub fn write_frame(frame: &Frame, path: &Path) -> Result<()> {
    let magic = if frame.channels == 1 { "P5" } else { "P6" };
    write_bytes(
        path,
        &encode_pnm(magic, frame.width, frame.height, &frame.data),
    )
}

/// Writes a mask as binary PGM with foreground 255 and background 0.
pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let data: Vec<u8> = mask
        .data
        .iter()
        .map(|&v| if v != 0 { 255 } else { 0 })
        .collect();
    write_bytes(path, &encode_pnm("P5", mask.width, mask.height, &data))
}

/// Reads a 0/255 PGM mask. Any other pixel value is an error.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let frame = read_frame(path)?;
    if frame.channels != 1 {
        return Err(Error::decode(path, "mask must be single-channel"));
    }
    let mut data = Vec::with_capacity(frame.data.len());
    for (i, &v) in frame.data.iter().enumerate() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(Error::decode(
                    path,
                    format!(
                        "mask pixel ({}, {}) has value {other}, expected 0 or 255",
                        i % frame.width,
                        i / frame.width
                    ),
                ))
            }
        }
    }
    Ok(BinaryMask {
        width: frame.width,
        height: frame.height,
        data,
    })
}

/// Paths in `dir` matching `pattern`, sorted by file name.
pub fn list_matching(dir: &Path, pattern: &str) -> Result<Vec<PathBuf>> {
    let pat = glob::Pattern::new(pattern)
        .map_err(|e| Error::InvalidParam(format!("bad pattern `{pattern}`: {e}")))?;
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if pat.matches(name) && entry.path().is_file() {
            paths.push(entry.path());
        }
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(paths)
}

/// Loads every matching frame in lexicographic file-name order.
///
/// Indices are assigned 0.. in that order. All frames must share the
/// dimensions of the first one.
pub fn load_sequence(dir: &Path, pattern: &str) -> Result<Vec<Frame>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ));
    }
    let paths = list_matching(dir, pattern)?;
    if paths.is_empty() {
        return Err(Error::NoFrames {
            dir: dir.to_path_buf(),
            pattern: pattern.to_string(),
        });
    }
    let frames: Vec<Frame> = paths
        .par_iter()
        .map(|p| read_frame(p))
        .collect::<Result<_>>()?;
    let (w, h) = frames[0].dims();
    let mut out = Vec::with_capacity(frames.len());
    for (i, (f, p)) in frames.into_iter().zip(&paths).enumerate() {
        if f.dims() != (w, h) {
            return Err(Error::MixedDimensions {
                path: p.clone(),
                got_w: f.width,
                got_h: f.height,
                want_w: w,
                want_h: h,
            });
        }
        out.push(f.with_index(i));
    }
    Ok(out)
}

/// Loads every matching mask in file-name order.
pub fn load_masks(dir: &Path, pattern: &str) -> Result<Vec<BinaryMask>> {
    let paths = list_matching(dir, pattern)?;
    if paths.is_empty() {
        return Err(Error::NoFrames {
            dir: dir.to_path_buf(),
            pattern: pattern.to_string(),
        });
    }
    paths.par_iter().map(|p| read_mask(p)).collect()
}

/// File name used for frame `index` in written sequences.
pub fn sequence_name(prefix: &str, index: usize, ext: &str) -> String {
    format!("{prefix}{index:05}.{ext}")
}

/// Writes frames as `<prefix>NNNNN.pgm|ppm` into `dir`, creating it if needed.
pub fn write_sequence(frames: &[Frame], dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let ext = if f.channels == 1 { "pgm" } else { "ppm" };
            let path = dir.join(sequence_name(prefix, i, ext));
            write_frame(f, &path).map(|_| path)
        })
        .collect()
}

/// Writes masks as `<prefix>NNNNN.pgm` into `dir`, creating it if needed.
pub fn write_mask_sequence(masks: &[BinaryMask], dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let path = dir.join(sequence_name(prefix, i, "pgm"));
            write_mask(m, &path).map(|_| path)
        })
        .collect()
}
