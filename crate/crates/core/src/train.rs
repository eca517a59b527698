//! SGD training loops for the three stages.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{assemble, frame_refs, Batch, FrameRef};
use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::nn::aps::{aps_loss, make_label, selector_inputs, ApsConfig, ApsModel};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::fusion::{stage2_loss, AblationVariant, FusionConfig, FusionModel};
use crate::nn::multitask::{stage1_loss, MultiTaskConfig, MultiTaskModel};
use crate::nn::{Bound, ParamSet, LEVELS};
use crate::synth::io::Split;
use crate::tensor::{Tape, Tensor, Var};

/// `base * (1 - iter / max_iter)^power`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter == 0 || iter > max_iter {
        return Err(Error::Contract(format!("poly_lr: iter {iter} outside 0..={max_iter}")));
    }
    Ok(base * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Heavy-ball SGD with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// `v = momentum * v + (g + wd * w)`, then `w -= lr * v`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for ((w, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            if g.shape() != w.shape() {
                return Err(Error::dim("sgd_step", format!("grad {:?} vs param {:?}", g.shape(), w.shape())));
            }
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + (gi + self.weight_decay * *wi);
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
    Three,
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(Error::Config(format!("stage must be 1, 2 or 3, got {v}"))),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }
}

/// Training settings shared by the three stages. Field defaults are the desk-scale preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Dataset root containing `<split>/<seq_id>/...`.
    pub data: PathBuf,
    pub split: String,
    /// Where the trained checkpoint is written.
    pub out: PathBuf,
    pub stage1_ckpt: Option<PathBuf>,
    pub stage2_ckpt: Option<PathBuf>,
    /// Per-iteration loss log, one `iter<TAB>lr<TAB>loss` line each.
    pub loss_log: Option<PathBuf>,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    /// Gradients are rescaled to this global L2 norm when larger; 0 disables clipping.
    pub clip_norm: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub flip: bool,
    pub rotate: bool,
    pub color_jitter: bool,
    pub variant: AblationVariant,
    pub channels: [usize; LEVELS],
    pub c_mid: usize,
    pub aps_width: usize,
    pub aps_blocks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::One,
            data: PathBuf::from("dataset"),
            split: crate::data::TRAIN.into(),
            out: PathBuf::from("checkpoint.bin"),
            stage1_ckpt: None,
            stage2_ckpt: None,
            loss_log: None,
            batch_size: 4,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0005,
            power: 0.9,
            clip_norm: 1.0,
            max_iter: 600,
            seed: 0,
            flip: true,
            rotate: false,
            color_jitter: false,
            variant: AblationVariant::AllIsamFpm,
            channels: [8, 16, 32, 32, 32],
            c_mid: 16,
            aps_width: 32,
            aps_blocks: 3,
        }
    }
}

impl TrainConfig {
    /// Optimizer and width settings of the original full-resolution setup.
    pub fn full_scale_preset(stage: Stage) -> Self {
        TrainConfig {
            stage,
            lr: 0.005,
            channels: [64, 128, 256, 512, 512],
            c_mid: 256,
            aps_width: 64,
            max_iter: 30_000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.power < 0.0
            || !(self.clip_norm >= 0.0)
        {
            return bad("momentum must lie in [0, 1), weight_decay, power and clip_norm must be nonnegative".into());
        }
        if self.rotate || self.color_jitter {
            return bad("only horizontal flip augmentation is supported".into());
        }
        if self.channels.contains(&0) || self.c_mid == 0 || self.aps_width == 0 {
            return bad("channel widths must be positive".into());
        }
        Ok(())
    }

    pub fn multitask(&self) -> MultiTaskConfig {
        MultiTaskConfig {
            channels: self.channels,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            channels: self.channels,
            c_mid: self.c_mid,
            variant: self.variant,
        }
    }

    pub fn aps(&self) -> ApsConfig {
        ApsConfig {
            width: self.aps_width,
            blocks: self.aps_blocks,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss of every iteration, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub lr: Vec<f64>,
    pub loss: Vec<f64>,
}

impl LossLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("iter\tlr\tloss\n");
        for (i, (lr, l)) in self.lr.iter().zip(&self.loss).enumerate() {
            s.push_str(&format!("{i}\t{lr:.6e}\t{l:.9}\n"));
        }
        s
    }

    /// Mean loss over the first and last `window` iterations.
    pub fn head_tail(&self, window: usize) -> (f64, f64) {
        let n = self.loss.len();
        let w = window.min(n).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&self.loss[..w]), mean(&self.loss[n - w..]))
    }
}

/// Shuffled epochs of frame references, drawn batch by batch.
struct Sampler {
    refs: Vec<FrameRef>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    flip: bool,
}

impl Sampler {
    fn new(refs: Vec<FrameRef>, seed: u64, flip: bool) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::Contract("training split has no frames".into()));
        }
        let order = (0..refs.len()).collect();
        let mut s = Sampler {
            refs,
            order,
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            flip,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    fn next(&mut self, n: usize) -> (Vec<FrameRef>, Vec<bool>) {
        let mut refs = Vec::with_capacity(n);
        let mut flips = Vec::with_capacity(n);
        for _ in 0..n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            refs.push(self.refs[self.order[self.pos]]);
            self.pos += 1;
            flips.push(self.flip && self.rng.gen::<bool>());
        }
        (refs, flips)
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Runs `max_iter` SGD steps on `params`, with `loss_fn` building each batch's loss on a fresh tape.
pub fn run_sgd(
    params: &mut ParamSet,
    cfg: &TrainConfig,
    split: &Split,
    with_flow: bool,
    mut loss_fn: impl FnMut(&mut Tape, &Bound, &Batch) -> Result<Var>,
) -> Result<LossLog> {
    cfg.validate()?;
    let mut sampler = Sampler::new(frame_refs(split, with_flow), cfg.seed, cfg.flip)?;
    let mut opt = Sgd::new(params, cfg.momentum, cfg.weight_decay);
    let mut log = LossLog::default();
    for iter in 0..cfg.max_iter {
        let (refs, flips) = sampler.next(cfg.batch_size);
        let batch = assemble(split, &refs, &flips)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let loss = loss_fn(&mut tape, &bound, &batch)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { iter, loss: value });
        }
        tape.backward(loss)?;
        let mut grads = bound.grads(&tape);
        if cfg.clip_norm > 0.0 {
            clip_global_norm(&mut grads, cfg.clip_norm);
        }
        let lr = poly_lr(cfg.lr, iter, cfg.max_iter, cfg.power)?;
        opt.step(params, &grads, lr)?;
        log.lr.push(lr);
        log.loss.push(value);
        if iter % 100 == 0 {
            log::debug!("iter {iter} lr {lr:.5} loss {value:.5}");
        }
    }
    Ok(log)
}

pub fn train_stage1(cfg: &TrainConfig, split: &Split) -> Result<(MultiTaskModel, LossLog)> {
    let mut model = MultiTaskModel::new(cfg.multitask(), cfg.seed);
    let mut params = model.params().clone();
    let log = run_sgd(&mut params, cfg, split, false, |tape, p, b| {
        let x = tape.constant(b.frames.clone());
        let out = model.forward_on(tape, p, x)?;
        stage1_loss(tape, out.saliency, out.depth, &b.masks, &b.depths)
    })?;
    model.params_mut().load_from(&params)?;
    Ok((model, log))
}

pub fn train_stage2(cfg: &TrainConfig, split: &Split, stage1: &MultiTaskModel) -> Result<(FusionModel, LossLog)> {
    if stage1.config().channels != cfg.channels {
        return Err(Error::Contract(format!(
            "stage-1 widths {:?} differ from configured {:?}",
            stage1.config().channels,
            cfg.channels
        )));
    }
    let mut model = FusionModel::new(cfg.fusion(), cfg.seed);
    let mut params = model.params().clone();
    let log = run_sgd(&mut params, cfg, split, true, |tape, p, b| {
        let s1 = stage1.forward(&b.frames)?;
        let flow = tape.constant(b.flow_rgb()?.clone());
        let mos = model.forward_on(tape, p, flow, &s1)?;
        stage2_loss(tape, mos, &b.masks)
    })?;
    model.params_mut().load_from(&params)?;
    Ok((model, log))
}

/// Static and motion masks plus dynamic labels for a batch.
pub struct Predicted {
    pub sos: Tensor,
    pub mos: Tensor,
    pub labels: Vec<u8>,
}

pub fn predict_pair(stage1: &MultiTaskModel, stage2: &FusionModel, b: &Batch) -> Result<Predicted> {
    let s1 = stage1.forward(&b.frames)?;
    let mos = stage2.forward(&b.frames, b.flow_rgb()?, &s1)?;
    let sos = s1.saliency;
    let labels = (0..b.len())
        .map(|i| {
            make_label(
                &Mask::from_plane(&sos, i, 0)?,
                &Mask::from_plane(&mos, i, 0)?,
                &Mask::from_plane(&b.masks, i, 0)?,
            )
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(Predicted { sos, mos, labels })
}

pub fn train_stage3(
    cfg: &TrainConfig,
    split: &Split,
    stage1: &MultiTaskModel,
    stage2: &FusionModel,
) -> Result<(ApsModel, LossLog)> {
    let mut model = ApsModel::new(cfg.aps(), cfg.seed);
    let mut params = model.params().clone();
    let log = run_sgd(&mut params, cfg, split, true, |tape, p, b| {
        let pr = predict_pair(stage1, stage2, b)?;
        let (rs, rm) = selector_inputs(&b.frames, b.flow_rgb()?, &pr.sos, &pr.mos)?;
        let rs = tape.constant(rs);
        let rm = tape.constant(rm);
        let score = model.forward_on(tape, p, rs, rm)?;
        aps_loss(tape, score, &pr.labels)
    })?;
    model.params_mut().load_from(&params)?;
    Ok((model, log))
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("{what} checkpoint path is not configured")))?;
    if !p.exists() {
        return Err(Error::Contract(format!("{what} checkpoint {} does not exist", p.display())));
    }
    Ok(p.clone())
}

/// Loads the configured split and upstream checkpoints, trains, and writes the checkpoint and loss log.
pub fn train_stage(cfg: &TrainConfig) -> Result<LossLog> {
    cfg.validate()?;
    let stage1 = match cfg.stage {
        Stage::One => None,
        _ => Some(MultiTaskModel::load(&require(&cfg.stage1_ckpt, "stage-1")?)?),
    };
    let stage2 = match cfg.stage {
        Stage::Three => Some(FusionModel::load(&require(&cfg.stage2_ckpt, "stage-2")?)?),
        _ => None,
    };
    let split = Split::load(&cfg.data, &cfg.split)?;
    let log = match cfg.stage {
        Stage::One => {
            let (m, log) = train_stage1(cfg, &split)?;
            m.save(&cfg.out)?;
            log
        }
        Stage::Two => {
            let (m, log) = train_stage2(cfg, &split, stage1.as_ref().unwrap())?;
            m.save(&cfg.out)?;
            log
        }
        Stage::Three => {
            let (m, log) = train_stage3(cfg, &split, stage1.as_ref().unwrap(), stage2.as_ref().unwrap())?;
            m.save(&cfg.out)?;
            log
        }
    };
    if let Some(p) = &cfg.loss_log {
        write_text(p, &log.to_tsv())?;
    }
    Ok(log)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_endpoints() {
        assert_eq!(poly_lr(0.005, 0, 100, 0.9).unwrap(), 0.005);
        assert_eq!(poly_lr(0.005, 100, 100, 0.9).unwrap(), 0.0);
        assert!(poly_lr(0.005, 101, 100, 0.9).is_err());
        assert!(poly_lr(0.005, 0, 0, 0.9).is_err());
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(1.0));
        let mut opt = Sgd::new(&ps, 0.9, 0.1);
        opt.step(&mut ps, &[Tensor::scalar(2.0)], 0.5).unwrap();
        // v = 2 + 0.1 = 2.1, w = 1 - 1.05
        assert!((ps.tensors()[0].item() + 0.05).abs() < 1e-15);
        opt.step(&mut ps, &[Tensor::scalar(0.0)], 0.5).unwrap();
        // v = 0.9 * 2.1 - 0.005 = 1.885, w = -0.05 - 0.9425
        assert!((ps.tensors()[0].item() + 0.9925).abs() < 1e-12);
    }

    #[test]
    fn stage_parsing() {
        let cfg = TrainConfig::from_toml("stage = 2\nmax_iter = 5\nvariant = \"rgb+of\"").unwrap();
        assert_eq!(cfg.stage, Stage::Two);
        assert_eq!(cfg.variant, AblationVariant::RgbOf);
        assert!(TrainConfig::from_toml("stage = 4").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("rotate = true").is_err());
    }
}
