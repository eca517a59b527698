//! Stage 3: automatic predictor selection. A two-stream classifier scores each
//! frame; low scores trust the static saliency mask, high scores the motion mask.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{he_normal, Bound, Conv, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::metrics::{mae, Mask};
use crate::tensor::{Bins, Tape, Tensor, Var};

/// Channels of `cat(RGB, M_sos)`.
pub const RS_CHANNELS: usize = 4;
/// Channels of `cat(RGB, flow rendering, M_mos)`.
pub const RM_CHANNELS: usize = 7;
pub const SELECT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApsConfig {
    /// Output width of both first-layer convolutions and of the trunk.
    pub width: usize,
    pub blocks: usize,
}

impl Default for ApsConfig {
    fn default() -> Self {
        ApsConfig { width: 64, blocks: 3 }
    }
}

/// Stride-2 residual block: `relu(conv(relu(down(x))) + shortcut(x))`.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub down: Conv,
    pub conv: Conv,
    pub shortcut: Conv,
}

#[derive(Debug, Clone)]
pub struct ApsModel {
    config: ApsConfig,
    params: ParamSet,
    pub first_rs: Conv,
    pub first_rm: Conv,
    pub blocks: Vec<ResBlock>,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

impl ApsModel {
    pub fn new(config: ApsConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let c = config.width;
        let first_rs = Conv::new(&mut ps, "first_rs", RS_CHANNELS, c, 4, 2, 1, &mut rng);
        let first_rm = Conv::new(&mut ps, "first_rm", RM_CHANNELS, c, 4, 2, 1, &mut rng);
        let blocks = (0..config.blocks)
            .map(|i| ResBlock {
                down: Conv::down2(&mut ps, &format!("block{}.down", i + 1), c, c, &mut rng),
                conv: Conv::same3(&mut ps, &format!("block{}.conv", i + 1), c, c, &mut rng),
                shortcut: Conv::down2(&mut ps, &format!("block{}.shortcut", i + 1), c, c, &mut rng),
            })
            .collect();
        let fc_weight = ps.add("fc.weight", he_normal(&[1, c], &mut rng));
        let fc_bias = ps.add("fc.bias", Tensor::zeros(&[1]));
        ApsModel {
            config,
            params: ps,
            first_rs,
            first_rm,
            blocks,
            fc_weight,
            fc_bias,
        }
    }

    pub fn config(&self) -> &ApsConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Scores `(B, 1)` on a tape.
    pub fn forward_on(&self, tape: &mut Tape, p: &Bound, rs: Var, rm: Var) -> Result<Var> {
        let (b, cs, h, w) = tape.value(rs).dims4()?;
        let (bm, cm, hm, wm) = tape.value(rm).dims4()?;
        if cs != RS_CHANNELS || cm != RM_CHANNELS {
            return Err(Error::dim(
                "aps_forward",
                format!("rs needs {RS_CHANNELS} channels and rm {RM_CHANNELS}, got {cs} and {cm}"),
            ));
        }
        if (b, h, w) != (bm, hm, wm) {
            return Err(Error::dim(
                "aps_forward",
                format!("rs {:?} vs rm {:?}", tape.shape(rs), tape.shape(rm)),
            ));
        }
        let a = self.first_rs.forward(tape, p, rs)?;
        let m = self.first_rm.forward(tape, p, rm)?;
        let fused = tape.add(a, m)?;
        let mut x = tape.relu(fused);
        for blk in &self.blocks {
            let d = blk.down.forward(tape, p, x)?;
            let d = tape.relu(d);
            let c = blk.conv.forward(tape, p, d)?;
            let s = blk.shortcut.forward(tape, p, x)?;
            let sum = tape.add(c, s)?;
            x = tape.relu(sum);
        }
        let pooled = tape.adaptive_pool(x, Bins::Global)?;
        let flat = tape.reshape(pooled, &[b, self.config.width])?;
        let logit = tape.linear(flat, p[self.fc_weight], p[self.fc_bias])?;
        Ok(tape.sigmoid(logit))
    }

    /// One score in `(0, 1)` per batch element.
    pub fn forward(&self, rs: &Tensor, rm: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let a = tape.constant(rs.clone());
        let b = tape.constant(rm.clone());
        let s = self.forward_on(&mut tape, &p, a, b)?;
        Ok(tape.value(s).data().to_vec())
    }
}

/// Builds `rs = cat(frame, sos)` and `rm = cat(frame, flow_rgb, mos)` for `(B, ., H, W)` batches.
pub fn selector_inputs(frame: &Tensor, flow_rgb: &Tensor, sos: &Tensor, mos: &Tensor) -> Result<(Tensor, Tensor)> {
    let rs = Tensor::cat_channels(&[frame, sos])?;
    let rm = Tensor::cat_channels(&[frame, flow_rgb, mos])?;
    Ok((rs, rm))
}

/// Dynamic label: 0 when the static mask is strictly closer to `gt`, otherwise 1.
pub fn make_label(sos: &Mask, mos: &Mask, gt: &Mask) -> Result<u8> {
    let a = mae(sos, gt)?;
    let b = mae(mos, gt)?;
    Ok(u8::from(a >= b))
}

/// Which mask a score selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Predictor {
    Sos,
    Mos,
}

impl Predictor {
    pub fn name(self) -> &'static str {
        match self {
            Predictor::Sos => "sos",
            Predictor::Mos => "mos",
        }
    }

    pub fn from_score(score: f64, threshold: f64) -> Self {
        if score >= threshold {
            Predictor::Mos
        } else {
            Predictor::Sos
        }
    }

    pub fn from_label(y: u8) -> Self {
        if y == 0 {
            Predictor::Sos
        } else {
            Predictor::Mos
        }
    }
}

/// `mos` when `score >= threshold`, else `sos`.
pub fn select<'a>(sos: &'a Mask, mos: &'a Mask, score: f64, threshold: f64) -> &'a Mask {
    match Predictor::from_score(score, threshold) {
        Predictor::Sos => sos,
        Predictor::Mos => mos,
    }
}

/// Mean BCE of scores `(B, 1)` against 0/1 labels.
pub fn aps_loss(tape: &mut Tape, scores: Var, labels: &[u8]) -> Result<Var> {
    let target = Tensor::new(
        tape.shape(scores).to_vec(),
        labels.iter().map(|&y| f64::from(y)).collect(),
    )?;
    tape.bce(scores, &target)
}
