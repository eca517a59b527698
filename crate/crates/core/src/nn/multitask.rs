//! Stage 1: one shared encoder, two FPN-style decoders predicting depth and
//! static saliency from a single RGB frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_image, up2, Bound, Conv, Encoder, ParamSet, LEVELS};
use crate::error::{Error, Result};
use crate::losses::{bce_loss, l1_ssim_loss};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskConfig {
    /// Channel width of encoder levels 1..=5 (finest first).
    pub channels: [usize; LEVELS],
}

impl Default for MultiTaskConfig {
    fn default() -> Self {
        MultiTaskConfig {
            channels: [16, 32, 64, 64, 64],
        }
    }
}

/// Top-down decoder whose level-i feature has the encoder's level-i shape.
#[derive(Debug, Clone)]
struct Decoder {
    lateral: Vec<Conv>,
    reduce: Vec<Conv>,
    head: Conv,
}

impl Decoder {
    fn new(ps: &mut ParamSet, prefix: &str, channels: &[usize; LEVELS], rng: &mut ChaCha8Rng) -> Self {
        let lateral = (0..LEVELS)
            .map(|i| Conv::same3(ps, &format!("{prefix}.lat{}", i + 1), channels[i], channels[i], rng))
            .collect();
        let reduce = (0..LEVELS - 1)
            .map(|i| Conv::point(ps, &format!("{prefix}.reduce{}", i + 1), channels[i + 1], channels[i], rng))
            .collect();
        let head = Conv::same3(ps, &format!("{prefix}.head"), channels[0], 1, rng);
        Decoder { lateral, reduce, head }
    }

    /// Returns `(level features finest first, sigmoid map at (h, w))`.
    fn forward(&self, tape: &mut Tape, p: &Bound, enc: &[Var], (h, w): (usize, usize)) -> Result<(Vec<Var>, Var)> {
        let mut feats = vec![enc[LEVELS - 1]; LEVELS];
        let top = self.lateral[LEVELS - 1].forward(tape, p, enc[LEVELS - 1])?;
        let mut cur = tape.relu(top);
        feats[LEVELS - 1] = cur;
        for i in (0..LEVELS - 1).rev() {
            let skip = self.lateral[i].forward(tape, p, enc[i])?;
            let coarse = self.reduce[i].forward(tape, p, cur)?;
            let coarse = up2(tape, coarse)?;
            let sum = tape.add(skip, coarse)?;
            cur = tape.relu(sum);
            feats[i] = cur;
        }
        let logits = self.head.forward(tape, p, cur)?;
        let full = tape.upsample(logits, h, w)?;
        Ok((feats, tape.sigmoid(full)))
    }
}

/// Tape handles produced by a stage-1 forward pass.
#[derive(Debug, Clone)]
pub struct StageOneVars {
    pub depth: Var,
    pub saliency: Var,
    pub rgb: Vec<Var>,
    pub depth_feats: Vec<Var>,
    pub sal_feats: Vec<Var>,
}

/// Stage-1 predictions and the three feature pyramids, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOneOutput {
    pub depth: Tensor,
    pub saliency: Tensor,
    pub rgb: Vec<Tensor>,
    pub depth_feats: Vec<Tensor>,
    pub sal_feats: Vec<Tensor>,
}

impl StageOneVars {
    pub fn detach(&self, tape: &Tape) -> StageOneOutput {
        let take = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        StageOneOutput {
            depth: tape.value(self.depth).clone(),
            saliency: tape.value(self.saliency).clone(),
            rgb: take(&self.rgb),
            depth_feats: take(&self.depth_feats),
            sal_feats: take(&self.sal_feats),
        }
    }
}

impl StageOneOutput {
    /// Batch size and spatial size of the prediction maps.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.saliency.shape();
        (s[0], s[2], s[3])
    }

    /// Verifies the pyramids are complete and consistent with an `h x w` input of batch `b`.
    pub fn validate(&self, b: usize, h: usize, w: usize) -> Result<()> {
        if self.rgb.len() != LEVELS || self.depth_feats.len() != LEVELS || self.sal_feats.len() != LEVELS {
            return Err(Error::Contract("stage-1 output is missing feature levels".into()));
        }
        if self.dims() != (b, h, w) {
            return Err(Error::Contract(format!(
                "stage-1 output is for {:?}, frame is {}x{}x{}",
                self.dims(),
                b,
                h,
                w
            )));
        }
        for i in 0..LEVELS {
            let s = self.rgb[i].shape();
            if self.depth_feats[i].shape() != s || self.sal_feats[i].shape() != s {
                return Err(Error::Contract(format!("stage-1 level {} shapes disagree", i + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MultiTaskModel {
    config: MultiTaskConfig,
    params: ParamSet,
    encoder: Encoder,
    depth: Decoder,
    saliency: Decoder,
}

impl MultiTaskModel {
    pub fn new(config: MultiTaskConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::new(&mut params, "enc", 3, &config.channels, &mut rng);
        let depth = Decoder::new(&mut params, "depth_dec", &config.channels, &mut rng);
        let saliency = Decoder::new(&mut params, "sal_dec", &config.channels, &mut rng);
        MultiTaskModel {
            config,
            params,
            encoder,
            depth,
            saliency,
        }
    }

    pub fn config(&self) -> &MultiTaskConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Forward pass on an existing tape with already-bound parameters.
    pub fn forward_on(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<StageOneVars> {
        let (_, h, w) = check_image(tape.value(image), 3, "stage-1 image")?;
        let rgb = self.encoder.forward(tape, p, image)?;
        let (depth_feats, depth) = self.depth.forward(tape, p, &rgb, (h, w))?;
        let (sal_feats, saliency) = self.saliency.forward(tape, p, &rgb, (h, w))?;
        Ok(StageOneVars {
            depth,
            saliency,
            rgb,
            depth_feats,
            sal_feats,
        })
    }

    /// Inference on a `(B, 3, H, W)` batch.
    pub fn forward(&self, image: &Tensor) -> Result<StageOneOutput> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let vars = self.forward_on(&mut tape, &p, x)?;
        Ok(vars.detach(&tape))
    }

    /// Positions in [`Self::params`] of the depth decoder's tensors.
    pub fn depth_decoder_params(&self) -> impl Iterator<Item = usize> + '_ {
        self.params
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("depth_dec."))
            .map(|(i, _)| i)
    }
}

/// Saliency BCE plus depth L1+SSIM, weighted 1:1.
pub fn stage1_loss(tape: &mut Tape, saliency: Var, depth: Var, gt_mask: &Tensor, gt_depth: &Tensor) -> Result<Var> {
    let sal = bce_loss(tape, saliency, gt_mask)?;
    let dep = l1_ssim_loss(tape, depth, gt_depth)?;
    tape.add(sal, dep)
}
