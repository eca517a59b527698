//! Synthetic moving-shape videos with exact masks, depth and flow.
//!
//! Moving objects translate by whole pixels per frame, so their masks and
//! flow are exact. The background texture and any static distractor shapes
//! drift with a sub-pixel camera motion. Distractors are drawn from the same
//! appearance distribution as the moving objects but are not part of the
//! ground truth, so a single frame cannot tell them apart.

pub mod io;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionMode {
    None,
    ZeroObject,
    BackgroundDominant,
    Noise,
}

impl CorruptionMode {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionMode::None => "none",
            CorruptionMode::ZeroObject => "zero-object",
            CorruptionMode::BackgroundDominant => "background-dominant",
            CorruptionMode::Noise => "noise",
        }
    }
}

impl fmt::Display for CorruptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            CorruptionMode::None,
            CorruptionMode::ZeroObject,
            CorruptionMode::BackgroundDominant,
            CorruptionMode::Noise,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown corruption mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Inclusive range of moving objects per sequence.
    pub objects: [usize; 2],
    /// Inclusive range of static distractor shapes per sequence.
    pub distractors: [usize; 2],
    pub shapes: Vec<ShapeKind>,
    /// Inclusive range of the shape half-extent, px.
    pub size: [usize; 2],
    /// Inclusive range of the larger velocity component, whole px/frame.
    pub speed: [usize; 2],
    /// Range of the background drift magnitude, px/frame.
    pub drift: [f64; 2],
    pub corruption: CorruptionMode,
    pub strength: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 64,
            width: 64,
            frames: 8,
            objects: [1, 2],
            distractors: [1, 2],
            shapes: vec![ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Triangle],
            size: [5, 9],
            speed: [1, 3],
            drift: [0.0, 0.5],
            corruption: CorruptionMode::None,
            strength: 0.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return bad(format!("image size {}x{} must be a positive multiple of 32", self.height, self.width));
        }
        if self.frames < 2 {
            return bad("sequences need at least 2 frames".into());
        }
        if self.objects[0] == 0 || self.objects[0] > self.objects[1] || self.objects[1] > 2 {
            return bad(format!("object count range {:?} must lie in 1..=2", self.objects));
        }
        if self.distractors[0] > self.distractors[1] {
            return bad(format!("distractor range {:?} is empty", self.distractors));
        }
        if self.shapes.is_empty() {
            return bad("no shapes enabled".into());
        }
        if self.size[0] == 0 || self.size[0] > self.size[1] {
            return bad(format!("size range {:?} is empty", self.size));
        }
        if self.speed[0] == 0 || self.speed[0] > self.speed[1] {
            return bad(format!("speed range {:?} must be positive", self.speed));
        }
        if !(self.drift[0] >= 0.0 && self.drift[0] <= self.drift[1] && self.drift[1].is_finite()) {
            return bad(format!("drift range {:?} is invalid", self.drift));
        }
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return bad(format!("corruption strength {} must be nonnegative", self.strength));
        }
        let travel = self.speed[1] * (self.frames - 1);
        let extent = 2 * self.size[1] + 1 + travel;
        if extent > self.height || extent > self.width {
            return bad(format!(
                "an object of half-extent {} moving {} px cannot stay inside {}x{}",
                self.size[1], travel, self.height, self.width
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowQuality {
    pub mode: CorruptionMode,
    pub strength: f64,
}

/// One generated sequence. Flow `t` maps frame `t` to frame `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    /// `(T, 3, H, W)` in `[0, 1]`.
    pub frames: Tensor,
    /// `(T, 1, H, W)`, values 0 or 1.
    pub masks: Tensor,
    /// `(T, 1, H, W)` in `[0, 1]`, larger is nearer.
    pub depths: Tensor,
    /// `(T - 1, 2, H, W)` displacement in px, `(u, v)` = (right, down).
    pub flows: Tensor,
    pub quality: FlowQuality,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> (usize, usize) {
        (self.frames.shape()[2], self.frames.shape()[3])
    }

    pub fn frame(&self, t: usize) -> Tensor {
        self.frames.select_batch(&[t])
    }

    pub fn mask(&self, t: usize) -> Tensor {
        self.masks.select_batch(&[t])
    }

    pub fn depth(&self, t: usize) -> Tensor {
        self.depths.select_batch(&[t])
    }

    pub fn flow(&self, t: usize) -> Tensor {
        self.flows.select_batch(&[t])
    }

    /// Checks shapes and value ranges of a sample read from disk or built by hand.
    pub fn validate(&self) -> Result<()> {
        let (t, c, h, w) = self.frames.dims4()?;
        let want = |x: &Tensor, s: [usize; 4], what: &str| {
            if x.shape() != s {
                Err(Error::dim("video_sample", format!("{what} {:?}, expected {s:?}", x.shape())))
            } else {
                Ok(())
            }
        };
        want(&self.frames, [t, 3, h, w], "frames")?;
        let _ = c;
        want(&self.masks, [t, 1, h, w], "masks")?;
        want(&self.depths, [t, 1, h, w], "depths")?;
        want(&self.flows, [t.saturating_sub(1), 2, h, w], "flows")?;
        if t < 2 {
            return Err(Error::Contract("a sequence needs at least 2 frames".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: ShapeKind,
    /// Half extents along x and y.
    rx: f64,
    ry: f64,
}

impl Shape {
    /// Whether the offset `(dx, dy)` from the shape center is inside.
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= self.rx * self.rx,
            ShapeKind::Rectangle => dx.abs() <= self.rx && dy.abs() <= self.ry,
            ShapeKind::Triangle => {
                // apex up, base at +ry
                if dy < -self.ry || dy > self.ry {
                    return false;
                }
                let half = self.rx * (dy + self.ry) / (2.0 * self.ry);
                dx.abs() <= half
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Look {
    color: [f64; 3],
    depth: f64,
    freq: (f64, f64),
    phase: f64,
}

impl Look {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let hue = rng.gen::<f64>();
        let sat = rng.gen_range(0.6..1.0);
        let val = rng.gen_range(0.65..0.95);
        Look {
            color: hsv_to_rgb(hue, sat, val),
            depth: rng.gen_range(0.7..0.9),
            freq: (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn shade(&self, dx: f64, dy: f64) -> f64 {
        1.0 + 0.08 * (std::f64::consts::TAU * (self.freq.0 * dx + self.freq.1 * dy) + self.phase).sin()
    }
}

#[derive(Debug, Clone)]
struct Mover {
    shape: Shape,
    look: Look,
    x0: i64,
    y0: i64,
    vx: i64,
    vy: i64,
}

#[derive(Debug, Clone)]
struct Distractor {
    shape: Shape,
    look: Look,
    x0: f64,
    y0: f64,
}

/// Low-frequency texture: base color plus three drifting sinusoids per channel.
#[derive(Debug, Clone)]
struct Background {
    base: [f64; 3],
    waves: Vec<([f64; 3], f64, f64, f64)>,
    depth_tilt: (f64, f64),
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let hue = rng.gen::<f64>();
        let base = hsv_to_rgb(hue, rng.gen_range(0.0..0.25), rng.gen_range(0.3..0.55));
        let waves = (0..3)
            .map(|_| {
                let amp = [rng.gen_range(0.0..0.06), rng.gen_range(0.0..0.06), rng.gen_range(0.0..0.06)];
                let period = rng.gen_range(16.0..40.0);
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / period;
                (amp, k * angle.cos(), k * angle.sin(), rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Background {
            base,
            waves,
            depth_tilt: (rng.gen_range(-0.1..0.1), rng.gen_range(0.0..0.15)),
        }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for (amp, kx, ky, ph) in &self.waves {
            let s = (kx * x + ky * y + ph).sin();
            for ch in 0..3 {
                c[ch] += amp[ch] * s;
            }
        }
        c
    }

    fn depth(&self, x: f64, y: f64, w: f64, h: f64) -> f64 {
        0.25 + self.depth_tilt.0 * (x / w - 0.5) + self.depth_tilt.1 * (y / h - 0.5)
    }
}

/// Standard HSV to RGB, all components in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn sample_shape(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Shape {
    let kind = cfg.shapes[rng.gen_range(0..cfg.shapes.len())];
    let r = rng.gen_range(cfg.size[0]..=cfg.size[1]) as f64;
    let ry = match kind {
        ShapeKind::Rectangle => rng.gen_range(cfg.size[0]..=cfg.size[1]) as f64,
        _ => r,
    };
    Shape { kind, rx: r, ry }
}

fn sample_velocity(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (i64, i64) {
    let major = rng.gen_range(cfg.speed[0]..=cfg.speed[1]) as i64;
    let minor = rng.gen_range(-major..=major);
    let sign = if rng.gen::<bool>() { 1 } else { -1 };
    if rng.gen::<bool>() {
        (sign * major, minor)
    } else {
        (minor, sign * major)
    }
}

/// Start coordinate keeping `[c - r, c + r]` inside `[0, n)` for every frame.
fn sample_start(n: usize, r: usize, v: i64, frames: usize, rng: &mut ChaCha8Rng) -> Option<i64> {
    let travel = v * (frames as i64 - 1);
    let lo = r as i64 - travel.min(0);
    let hi = n as i64 - 1 - r as i64 - travel.max(0);
    (lo <= hi).then(|| rng.gen_range(lo..=hi))
}

fn overlap_any_frame(a: &Mover, b: &Mover, frames: usize, h: usize, w: usize) -> bool {
    (0..frames as i64).any(|t| {
        let (ax, ay) = (a.x0 + a.vx * t, a.y0 + a.vy * t);
        let (bx, by) = (b.x0 + b.vx * t, b.y0 + b.vy * t);
        let reach = (a.shape.rx.max(a.shape.ry) + b.shape.rx.max(b.shape.ry) + 1.0) as i64;
        if (ax - bx).abs() > reach || (ay - by).abs() > reach {
            return false;
        }
        (0..h as i64).any(|y| {
            (0..w as i64).any(|x| {
                a.shape.contains((x - ax) as f64, (y - ay) as f64) && b.shape.contains((x - bx) as f64, (y - by) as f64)
            })
        })
    })
}

/// Generates one sequence; the same `(config, seed)` always yields the same bits.
pub fn generate_sequence(cfg: &GeneratorConfig, seed: u64) -> Result<VideoSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, frames) = (cfg.height, cfg.width, cfg.frames);
    let bg = Background::sample(&mut rng);
    let drift_mag = rng.gen_range(cfg.drift[0]..=cfg.drift[1]);
    let drift_dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let drift = (
        (drift_mag * drift_dir.cos()) as f32 as f64,
        (drift_mag * drift_dir.sin()) as f32 as f64,
    );

    let n_obj = rng.gen_range(cfg.objects[0]..=cfg.objects[1]);
    let mut movers: Vec<Mover> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let mut placed = None;
        for _ in 0..200 {
            let shape = sample_shape(cfg, &mut rng);
            let (vx, vy) = sample_velocity(cfg, &mut rng);
            let (Some(x0), Some(y0)) = (
                sample_start(w, shape.rx as usize, vx, frames, &mut rng),
                sample_start(h, shape.ry as usize, vy, frames, &mut rng),
            ) else {
                continue;
            };
            let m = Mover {
                shape,
                look: Look::sample(&mut rng),
                x0,
                y0,
                vx,
                vy,
            };
            if movers.iter().all(|o| !overlap_any_frame(o, &m, frames, h, w)) {
                placed = Some(m);
                break;
            }
        }
        movers.push(placed.ok_or_else(|| Error::Config("could not place non-overlapping objects".into()))?);
    }

    let n_dis = rng.gen_range(cfg.distractors[0]..=cfg.distractors[1]);
    let distractors: Vec<Distractor> = (0..n_dis)
        .map(|_| {
            let shape = sample_shape(cfg, &mut rng);
            Distractor {
                shape,
                look: Look::sample(&mut rng),
                x0: rng.gen_range(shape.rx..(w as f64 - shape.rx)),
                y0: rng.gen_range(shape.ry..(h as f64 - shape.ry)),
            }
        })
        .collect();

    let plane = h * w;
    let mut frames_t = Tensor::zeros(&[frames, 3, h, w]);
    let mut masks = Tensor::zeros(&[frames, 1, h, w]);
    let mut depths = Tensor::zeros(&[frames, 1, h, w]);
    let mut flows = Tensor::zeros(&[frames - 1, 2, h, w]);
    for t in 0..frames {
        let tf = t as f64;
        let (ox, oy) = (drift.0 * tf, drift.1 * tf);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let (bx, by) = (xf - ox, yf - oy);
                let mut color = bg.color(bx, by);
                let mut depth = bg.depth(bx, by, w as f64, h as f64);
                let mut flow = drift;
                let mut inside = false;
                for d in &distractors {
                    let (dx, dy) = (bx - d.x0, by - d.y0);
                    if d.shape.contains(dx, dy) {
                        let s = d.look.shade(dx, dy);
                        color = d.look.color.map(|c| c * s);
                        depth = d.look.depth;
                    }
                }
                for m in &movers {
                    let cx = m.x0 + m.vx * t as i64;
                    let cy = m.y0 + m.vy * t as i64;
                    let (dx, dy) = ((x as i64 - cx) as f64, (y as i64 - cy) as f64);
                    if m.shape.contains(dx, dy) {
                        let s = m.look.shade(dx, dy);
                        color = m.look.color.map(|c| c * s);
                        depth = m.look.depth;
                        flow = (m.vx as f64, m.vy as f64);
                        inside = true;
                    }
                }
                let i = y * w + x;
                for (ch, c) in color.iter().enumerate() {
                    frames_t.data_mut()[(t * 3 + ch) * plane + i] = c.clamp(0.0, 1.0);
                }
                masks.data_mut()[t * plane + i] = if inside { 1.0 } else { 0.0 };
                depths.data_mut()[t * plane + i] = depth.clamp(0.0, 1.0);
                if t + 1 < frames {
                    flows.data_mut()[(t * 2) * plane + i] = flow.0;
                    flows.data_mut()[(t * 2 + 1) * plane + i] = flow.1;
                }
            }
        }
    }

    let corrupt_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut corrupted = Vec::with_capacity(frames - 1);
    for t in 0..frames - 1 {
        let f = flows.select_batch(&[t]).reshape(&[2, h, w])?;
        let m = masks.select_batch(&[t]).reshape(&[h, w])?;
        let c = corrupt_flow(&f, &m, cfg.corruption, cfg.strength, corrupt_seed.wrapping_add(t as u64))?;
        corrupted.push(c.map(|v| v as f32 as f64).reshape(&[1, 2, h, w])?);
    }
    let flows = Tensor::cat_batch(&corrupted.iter().collect::<Vec<_>>())?;

    Ok(VideoSample {
        frames: frames_t,
        masks,
        depths,
        flows,
        quality: FlowQuality {
            mode: cfg.corruption,
            strength: cfg.strength,
        },
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// 3x3 box average with out-of-image neighbours ignored.
fn box_blur(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += plane[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = s / n;
        }
    }
    out
}

/// Degrades one `(2, H, W)` flow field. `mask` is `(H, W)` and marks the moving object.
///
/// - `none`: unchanged.
/// - `zero-object`: in-mask flow becomes the background flow (median outside the mask).
/// - `background-dominant`: adds a uniform drift of magnitude `strength` in a seeded direction.
/// - `noise`: adds Gaussian noise of std `strength` per component, smoothed by a 3x3 box filter.
pub fn corrupt_flow(flow: &Tensor, mask: &Tensor, mode: CorruptionMode, strength: f64, seed: u64) -> Result<Tensor> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::dim("corrupt_flow", format!("flow must be (2, H, W), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if mask.len() != h * w {
        return Err(Error::dim("corrupt_flow", format!("mask {:?} vs flow {s:?}", mask.shape())));
    }
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(Error::Config(format!("corruption strength {strength} must be nonnegative")));
    }
    let plane = h * w;
    let mut out = flow.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        CorruptionMode::None => {}
        CorruptionMode::ZeroObject => {
            for c in 0..2 {
                let comp = &flow.data()[c * plane..(c + 1) * plane];
                let bg = median(
                    comp.iter()
                        .zip(mask.data())
                        .filter(|(_, &m)| m < 0.5)
                        .map(|(&v, _)| v)
                        .collect(),
                );
                for (o, &m) in out.data_mut()[c * plane..(c + 1) * plane].iter_mut().zip(mask.data()) {
                    if m >= 0.5 {
                        *o = bg;
                    }
                }
            }
        }
        CorruptionMode::BackgroundDominant => {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let add = [strength * angle.cos(), strength * angle.sin()];
            for c in 0..2 {
                for o in &mut out.data_mut()[c * plane..(c + 1) * plane] {
                    *o += add[c];
                }
            }
        }
        CorruptionMode::Noise => {
            if strength > 0.0 {
                let normal = Normal::new(0.0, strength).map_err(|e| Error::Config(e.to_string()))?;
                for c in 0..2 {
                    let noise: Vec<f64> = (0..plane).map(|_| normal.sample(&mut rng)).collect();
                    let smooth = box_blur(&noise, h, w);
                    for (o, n) in out.data_mut()[c * plane..(c + 1) * plane].iter_mut().zip(smooth) {
                        *o += n;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Color-wheel rendering of a `(2, H, W)` flow as `(3, H, W)` in `[0, 1]`.
///
/// Hue is the flow angle, saturation is magnitude over the field's maximum, and value is
/// `0.5 + 0.5 * saturation`, so zero flow renders mid-gray.
pub fn flow_to_color(flow: &Tensor) -> Result<Tensor> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::dim("flow_to_color", format!("flow must be (2, H, W), got {s:?}")));
    }
    if !flow.is_finite() {
        return Err(Error::Contract("flow_to_color on non-finite flow".into()));
    }
    let plane = s[1] * s[2];
    let (u, v) = flow.data().split_at(plane);
    let max = u.iter().zip(v).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max);
    let mut out = vec![0.0; 3 * plane];
    for i in 0..plane {
        let rgb = if max > 0.0 {
            let m = u[i].hypot(v[i]) / max;
            let hue = v[i].atan2(u[i]) / std::f64::consts::TAU;
            hsv_to_rgb(hue, m, 0.5 + 0.5 * m)
        } else {
            [0.5; 3]
        };
        for c in 0..3 {
            out[c * plane + i] = rgb[c];
        }
    }
    Tensor::new(vec![3, s[1], s[2]], out)
}

/// Renders every flow of a `(N, 2, H, W)` batch into `(N, 3, H, W)`.
pub fn flows_to_color(flows: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = flows.dims4()?;
    if c != 2 {
        return Err(Error::dim("flow_to_color", format!("flow batch needs 2 channels, got {c}")));
    }
    let parts = (0..n)
        .map(|i| {
            let f = flows.select_batch(&[i]).reshape(&[2, h, w])?;
            flow_to_color(&f)?.reshape(&[1, 3, h, w])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::cat_batch(&parts.iter().collect::<Vec<_>>())
}

/// Mirrors flows along the width axis and negates the horizontal component.
pub fn flip_flow(flows: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = flows.dims4()?;
    if c != 2 {
        return Err(Error::dim("flip_flow", format!("flow batch needs 2 channels, got {c}")));
    }
    let mut out = flows.flip_width()?;
    let plane = h * w;
    for i in 0..n {
        for x in &mut out.data_mut()[i * 2 * plane..(i * 2 + 1) * plane] {
            *x = -*x;
        }
    }
    Ok(out)
}

/// Well-mixed 64-bit seed for item `index` of stream `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
