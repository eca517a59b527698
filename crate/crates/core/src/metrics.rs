//! Segmentation metrics: MAE, region similarity J, boundary F, and the
//! evaluation report that aggregates them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default binarization threshold for soft predictions.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// An `H x W` map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim(
                "mask",
                format!("{}x{} mask needs {} values, got {}", height, width, height * width, values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Mask { height, width, values })
    }

    pub fn from_bits(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        Self::new(height, width, bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Extracts plane `(batch, channel)` of a rank-4 tensor; values are clamped into `[0, 1]`.
    pub fn from_plane(t: &Tensor, batch: usize, channel: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if batch >= b || channel >= c {
            return Err(Error::dim("mask", format!("plane ({batch}, {channel}) outside {:?}", t.shape())));
        }
        let off = (batch * c + channel) * h * w;
        let values = t.data()[off..off + h * w].iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(h, w, values)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.values.clone()).expect("mask shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn binarize(&self, threshold: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v >= threshold).collect()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn flip_width(&self) -> Self {
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.width) {
            row.reverse();
        }
        Mask { values, ..*self }
    }

    fn same_dims(&self, other: &Mask, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim(
                op,
                format!("{}x{} vs {}x{}", self.height, self.width, other.height, other.width),
            ));
        }
        Ok(())
    }
}

/// Mean absolute pixel difference.
pub fn mae(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.same_dims(gt, "mae")?;
    let s: f64 = pred.values.iter().zip(&gt.values).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.values.len() as f64)
}

/// Intersection over union after binarizing both masks; 1 when both are empty.
pub fn region_j(pred: &Mask, gt: &Mask, threshold: f64) -> Result<f64> {
    pred.same_dims(gt, "region_j")?;
    let p = pred.binarize(threshold);
    let g = gt.binarize(threshold);
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in p.iter().zip(&g) {
        inter += (*a && *b) as usize;
        union += (*a || *b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Boundary pixels: the mask minus its 3x3 erosion. Out-of-image neighbours do not erode.
pub fn boundary(bits: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; bits.len()];
    for y in 0..height {
        for x in 0..width {
            if !bits[y * width + x] {
                continue;
            }
            let mut interior = true;
            'n: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= height as i64 || nx >= width as i64 {
                        continue;
                    }
                    if !bits[ny as usize * width + nx as usize] {
                        interior = false;
                        break 'n;
                    }
                }
            }
            out[y * width + x] = !interior;
        }
    }
    out
}

/// Dilation of `bits` by a Euclidean disk of radius `radius`.
fn dilate_disk(bits: &[bool], height: usize, width: usize, radius: f64) -> Vec<bool> {
    let r = radius.floor() as i64;
    let offsets: Vec<(i64, i64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= radius * radius)
        .collect();
    let mut out = vec![false; bits.len()];
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            if !bits[(y * width as i64 + x) as usize] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && ny < height as i64 && nx < width as i64 {
                    out[(ny * width as i64 + nx) as usize] = true;
                }
            }
        }
    }
    out
}

/// Default boundary tolerance in pixels: 0.8% of the image diagonal, at least 1.
pub fn default_boundary_tolerance(height: usize, width: usize) -> f64 {
    (0.008 * ((height * height + width * width) as f64).sqrt()).max(1.0)
}

/// Boundary F-measure with a pixel-distance tolerance.
pub fn boundary_f(pred: &Mask, gt: &Mask, tolerance: f64) -> Result<f64> {
    pred.same_dims(gt, "boundary_f")?;
    let (h, w) = (pred.height, pred.width);
    let pb = boundary(&pred.binarize(BINARIZE_THRESHOLD), h, w);
    let gb = boundary(&gt.binarize(BINARIZE_THRESHOLD), h, w);
    let np = pb.iter().filter(|&&b| b).count();
    let ng = gb.iter().filter(|&&b| b).count();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let gd = dilate_disk(&gb, h, w, tolerance);
    let pd = dilate_disk(&pb, h, w, tolerance);
    let hit_p = pb.iter().zip(&gd).filter(|(a, b)| **a && **b).count();
    let hit_g = gb.iter().zip(&pd).filter(|(a, b)| **a && **b).count();
    let precision = hit_p as f64 / np as f64;
    let recall = hit_g as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Scores of one sequence, each averaged over its frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub sequence: String,
    pub mean_j: f64,
    pub mean_f: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_j: f64,
    pub mean_f: f64,
    pub mae: f64,
}

/// Per-sequence and aggregate scores for one evaluated variant.
///
/// JSON schema: `{"variant": str, "per_sequence": [{"sequence", "mean_j", "mean_f", "mae"}],
/// "aggregate": {"mean_j", "mean_f", "mae"}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub per_sequence: Vec<SequenceScore>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    /// Builds a report whose aggregate is the arithmetic mean of the per-sequence rows.
    pub fn new(variant: impl Into<String>, per_sequence: Vec<SequenceScore>) -> Self {
        let n = per_sequence.len().max(1) as f64;
        let aggregate = Aggregate {
            mean_j: per_sequence.iter().map(|s| s.mean_j).sum::<f64>() / n,
            mean_f: per_sequence.iter().map(|s| s.mean_f).sum::<f64>() / n,
            mae: per_sequence.iter().map(|s| s.mae).sum::<f64>() / n,
        };
        EvalReport {
            variant: variant.into(),
            per_sequence,
            aggregate,
        }
    }

    /// Tab-separated table: header, one row per sequence, then an `ALL` row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\tsequence\tmean_j\tmean_f\tmae\n");
        for r in &self.per_sequence {
            let _ = writeln!(s, "{}\t{}\t{:.6}\t{:.6}\t{:.6}", self.variant, r.sequence, r.mean_j, r.mean_f, r.mae);
        }
        let a = &self.aggregate;
        let _ = writeln!(s, "{}\tALL\t{:.6}\t{:.6}\t{:.6}", self.variant, a.mean_j, a.mean_f, a.mae);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
