//! On-disk dataset layout:
//!
//! ```text
//! <root>/<split>/<seq_id>/frame_000.ppm   8-bit RGB
//!                         mask_000.pgm    8-bit, 0 or 255
//!                         depth_000.pgm   16-bit, big-endian
//!                         flow_000.flo    Middlebury: f32 202021.25, u32 w, u32 h, (u, v) f32 LE
//!                         meta.json
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FlowQuality, GeneratorConfig, VideoSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FLO_MAGIC: f32 = 202021.25;

/// Contents of a sequence's `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub seed: u64,
    pub quality: FlowQuality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<GeneratorConfig>,
}

fn quantize(v: f64, max: f64) -> u32 {
    (v.clamp(0.0, 1.0) * max).round() as u32
}

/// Writes a `(3, H, W)` tensor in `[0, 1]` as binary PPM.
pub fn write_ppm(path: &Path, rgb: &Tensor) -> Result<()> {
    let s = rgb.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("write_ppm", format!("need (3, H, W), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..plane {
        for c in 0..3 {
            buf.push(quantize(rgb.data()[c * plane + i], 255.0) as u8);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes an `(H, W)` plane in `[0, 1]` as binary PGM with 8 or 16 bits.
pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[f64], sixteen_bit: bool) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::dim("write_pgm", format!("{} values for {h}x{w}", values.len())));
    }
    let max = if sixteen_bit { 65535 } else { 255 };
    let mut buf = format!("P5\n{w} {h}\n{max}\n").into_bytes();
    for &v in values {
        let q = quantize(v, max as f64);
        if sixteen_bit {
            buf.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            buf.push(q as u8);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// A decoded PNM image: `channels` interleaved samples per pixel, normalized by `maxval`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u32,
    pub samples: Vec<u32>,
}

impl Pnm {
    /// Channel-planar values in `[0, 1]`.
    pub fn planes(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * self.channels];
        for i in 0..plane {
            for c in 0..self.channels {
                out[c * plane + i] = self.samples[i * self.channels + c] as f64 / self.maxval as f64;
            }
        }
        out
    }
}

/// Reads a binary PGM (`P5`) or PPM (`P6`), 8- or 16-bit.
pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut pos = 0;
    let mut token = |allow_comment: bool| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if allow_comment && pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token(false)?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic '{m}'"))),
    };
    let num = |s: String| s.parse::<u32>().map_err(|_| bad(&format!("bad header number '{s}'")));
    let width = num(token(true)?)? as usize;
    let height = num(token(true)?)? as usize;
    let maxval = num(token(true)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(bad(&format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let wide = maxval > 255;
    let n = width * height * channels;
    let need = n * if wide { 2 } else { 1 };
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != need {
        return Err(bad(&format!("raster has {} bytes, expected {need}", raster.len())));
    }
    let samples: Vec<u32> = if wide {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect()
    } else {
        raster.iter().map(|&b| b as u32).collect()
    };
    if samples.iter().any(|&s| s > maxval) {
        return Err(bad("sample exceeds maxval"));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval,
        samples,
    })
}

/// Writes a `(2, H, W)` flow as a Middlebury `.flo` file.
pub fn write_flo(path: &Path, flow: &Tensor) -> Result<()> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::dim("write_flo", format!("need (2, H, W), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut buf = Vec::with_capacity(12 + 8 * plane);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    for i in 0..plane {
        buf.extend_from_slice(&(flow.data()[i] as f32).to_le_bytes());
        buf.extend_from_slice(&(flow.data()[plane + i] as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a Middlebury `.flo` file into `(2, H, W)`.
pub fn read_flo(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::format(path, m);
    if bytes.len() < 12 {
        return Err(bad("file shorter than the .flo header".into()));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(bad(format!("bad .flo magic {magic}")));
    }
    let w = u32::from_le_bytes(word(4)) as usize;
    let h = u32::from_le_bytes(word(8)) as usize;
    let plane = w * h;
    if bytes.len() != 12 + 8 * plane {
        return Err(bad(format!("{} bytes for a {w}x{h} field", bytes.len())));
    }
    let mut data = vec![0.0; 2 * plane];
    for i in 0..plane {
        data[i] = f32::from_le_bytes(word(12 + 8 * i)) as f64;
        data[plane + i] = f32::from_le_bytes(word(16 + 8 * i)) as f64;
    }
    Tensor::new(vec![2, h, w], data)
}

fn frame_path(dir: &Path, kind: &str, t: usize, ext: &str) -> PathBuf {
    dir.join(format!("{kind}_{t:03}.{ext}"))
}

/// Writes every file of one sequence into `dir`, creating it if needed.
pub fn write_sample(dir: &Path, sample: &VideoSample, meta: &SequenceMeta) -> Result<()> {
    sample.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = sample.size();
    for t in 0..sample.len() {
        let f = sample.frame(t).reshape(&[3, h, w])?;
        write_ppm(&frame_path(dir, "frame", t, "ppm"), &f)?;
        write_pgm(&frame_path(dir, "mask", t, "pgm"), h, w, sample.mask(t).data(), false)?;
        write_pgm(&frame_path(dir, "depth", t, "pgm"), h, w, sample.depth(t).data(), true)?;
        if t + 1 < sample.len() {
            write_flo(&frame_path(dir, "flow", t, "flo"), &sample.flow(t).reshape(&[2, h, w])?)?;
        }
    }
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::format(dir.join("meta.json"), e.to_string()))?;
    fs::write(dir.join("meta.json"), json).map_err(|e| Error::io(dir.join("meta.json"), e))
}

fn read_plane(path: &Path, channels: usize, h: Option<(usize, usize)>) -> Result<(usize, usize, Vec<f64>)> {
    let img = read_pnm(path)?;
    if img.channels != channels {
        return Err(Error::format(path, format!("expected {channels} channels, found {}", img.channels)));
    }
    if let Some((hh, ww)) = h {
        if (img.height, img.width) != (hh, ww) {
            return Err(Error::format(
                path,
                format!("size {}x{} differs from the first frame's {hh}x{ww}", img.height, img.width),
            ));
        }
    }
    Ok((img.height, img.width, img.planes()))
}

/// Reads a sequence directory written by [`write_sample`] or any writer following the same layout.
pub fn read_sample(dir: &Path) -> Result<(VideoSample, SequenceMeta)> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SequenceMeta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let mut t = 0;
    while frame_path(dir, "frame", t, "ppm").exists() {
        t += 1;
    }
    if t < 2 {
        return Err(Error::format(dir, format!("{t} frames found, need at least 2")));
    }
    let (h, w, first) = read_plane(&frame_path(dir, "frame", 0, "ppm"), 3, None)?;
    let size = Some((h, w));
    let mut frames = first;
    let mut masks = Vec::with_capacity(t * h * w);
    let mut depths = Vec::with_capacity(t * h * w);
    let mut flows = Vec::with_capacity((t - 1) * 2 * h * w);
    for i in 0..t {
        if i > 0 {
            frames.extend(read_plane(&frame_path(dir, "frame", i, "ppm"), 3, size)?.2);
        }
        let mpath = frame_path(dir, "mask", i, "pgm");
        let m = read_plane(&mpath, 1, size)?.2;
        if m.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::format(&mpath, "mask values must be 0 or maxval"));
        }
        masks.extend(m);
        depths.extend(read_plane(&frame_path(dir, "depth", i, "pgm"), 1, size)?.2);
        if i + 1 < t {
            let fpath = frame_path(dir, "flow", i, "flo");
            let f = read_flo(&fpath)?;
            if f.shape()[1..] != [h, w] {
                return Err(Error::format(&fpath, format!("flow {:?} vs frame {h}x{w}", f.shape())));
            }
            flows.extend(f.into_data());
        }
    }
    let sample = VideoSample {
        frames: Tensor::new(vec![t, 3, h, w], frames)?,
        masks: Tensor::new(vec![t, 1, h, w], masks)?,
        depths: Tensor::new(vec![t, 1, h, w], depths)?,
        flows: Tensor::new(vec![t - 1, 2, h, w], flows)?,
        quality: meta.quality,
    };
    Ok((sample, meta))
}

/// Sequence directories of `<root>/<split>`, sorted by name.
pub fn list_sequences(root: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let dir = root.join(split);
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(&dir, e))?;
        if e.path().is_dir() {
            out.push(e.path());
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Contract(format!("no sequences under {}", dir.display())));
    }
    Ok(out)
}

/// A loaded split: sequence names paired with their samples.
#[derive(Debug, Clone)]
pub struct Split {
    pub names: Vec<String>,
    pub samples: Vec<VideoSample>,
}

impl Split {
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let dirs = list_sequences(root, split)?;
        let mut names = Vec::with_capacity(dirs.len());
        let mut samples = Vec::with_capacity(dirs.len());
        for d in dirs {
            names.push(d.file_name().unwrap().to_string_lossy().into_owned());
            samples.push(read_sample(&d)?.0);
        }
        Ok(Split { names, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
