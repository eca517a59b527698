//! Stage 2: multi-source fusion. A flow encoder supplies motion features; per
//! level, interoceptive spatial attention re-weights each source and feature
//! purification subtracts an exclusive-context branch from a common one; a
//! top-down decoder turns the purified features into the moving-object mask.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::multitask::StageOneOutput;
use super::{check_image, up2, Bound, Conv, Encoder, ParamSet, LEVELS};
use crate::error::{Error, Result};
use crate::losses::bce_loss;
use crate::tensor::{Bins, Tape, Tensor, Var};

/// Pooling grids of the attention pyramid.
pub const ATTENTION_BINS: [Bins; 4] = [Bins::Grid(2), Bins::Grid(4), Bins::Grid(6), Bins::Global];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Rgb,
    Depth,
    Flow,
    Saliency,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Rgb, Source::Depth, Source::Flow, Source::Saliency];
}

/// One row of the fusion ablation: which sources feed the fusion and which modules are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationVariant {
    #[serde(rename = "rgb")]
    Rgb,
    #[serde(rename = "rgb+d")]
    RgbD,
    #[serde(rename = "rgb+sos")]
    RgbSos,
    #[serde(rename = "rgb+of")]
    RgbOf,
    #[serde(rename = "all")]
    All,
    #[serde(rename = "all+isam")]
    AllIsam,
    #[serde(rename = "all+isam+fpm")]
    AllIsamFpm,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        AblationVariant::Rgb,
        AblationVariant::RgbD,
        AblationVariant::RgbSos,
        AblationVariant::RgbOf,
        AblationVariant::All,
        AblationVariant::AllIsam,
        AblationVariant::AllIsamFpm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Rgb => "rgb",
            AblationVariant::RgbD => "rgb+d",
            AblationVariant::RgbSos => "rgb+sos",
            AblationVariant::RgbOf => "rgb+of",
            AblationVariant::All => "all",
            AblationVariant::AllIsam => "all+isam",
            AblationVariant::AllIsamFpm => "all+isam+fpm",
        }
    }

    /// Row label in the ablation table.
    pub fn table_label(self) -> &'static str {
        match self {
            AblationVariant::Rgb => "RGB",
            AblationVariant::RgbD => "RGB+D",
            AblationVariant::RgbSos => "RGB+SOS",
            AblationVariant::RgbOf => "RGB+OF",
            AblationVariant::All => "RGB+D+SOS+OF",
            AblationVariant::AllIsam => "+ISAM",
            AblationVariant::AllIsamFpm => "+FPM",
        }
    }

    pub fn sources(self) -> Vec<Source> {
        match self {
            AblationVariant::Rgb => vec![Source::Rgb],
            AblationVariant::RgbD => vec![Source::Rgb, Source::Depth],
            AblationVariant::RgbSos => vec![Source::Rgb, Source::Saliency],
            AblationVariant::RgbOf => vec![Source::Rgb, Source::Flow],
            _ => Source::ALL.to_vec(),
        }
    }

    pub fn isam(self) -> bool {
        matches!(self, AblationVariant::AllIsam | AblationVariant::AllIsamFpm)
    }

    pub fn fpm(self) -> bool {
        matches!(self, AblationVariant::AllIsamFpm)
    }

    pub fn uses_flow(self) -> bool {
        self.sources().contains(&Source::Flow)
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Must match the stage-1 encoder widths.
    pub channels: [usize; LEVELS],
    /// Width of the fused features (the full-scale preset uses 256).
    pub c_mid: usize,
    pub variant: AblationVariant,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            channels: [16, 32, 64, 64, 64],
            c_mid: 32,
            variant: AblationVariant::AllIsamFpm,
        }
    }
}

/// Attention parameters of one source at one level.
#[derive(Debug, Clone)]
pub struct IsamBranch {
    pub mix: Conv,
    pub squeeze: Conv,
    pub att: Conv,
}

/// One attention branch per active source.
#[derive(Debug, Clone)]
pub struct IsamLevel {
    pub branches: Vec<IsamBranch>,
}

/// Common and exclusive projections of one level. `exclu` is absent when purification is off.
#[derive(Debug, Clone)]
pub struct FpmLevel {
    pub comm: Conv,
    pub exclu: Option<Conv>,
}

#[derive(Debug, Clone)]
pub struct IsamOutput {
    pub enhanced: Vec<Var>,
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    config: FusionConfig,
    params: ParamSet,
    flow_encoder: Option<Encoder>,
    isam: Option<Vec<IsamLevel>>,
    fpm: Vec<FpmLevel>,
    dec_convs: Vec<Conv>,
    head: Conv,
}

fn source_tag(s: Source) -> &'static str {
    match s {
        Source::Rgb => "rgb",
        Source::Depth => "d",
        Source::Flow => "op",
        Source::Saliency => "ss",
    }
}

impl FusionModel {
    pub fn new(config: FusionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let v = config.variant;
        let sources = v.sources();
        let n = sources.len();
        let flow_encoder = v
            .uses_flow()
            .then(|| Encoder::new(&mut params, "flow_enc", 3, &config.channels, &mut rng));
        let isam = v.isam().then(|| {
            (0..LEVELS)
                .map(|i| {
                    let c = config.channels[i];
                    let branches = sources
                        .iter()
                        .map(|&s| {
                            let pre = format!("isam{}.{}", i + 1, source_tag(s));
                            IsamBranch {
                                mix: Conv::same3(&mut params, &format!("{pre}.mix"), n * c, config.c_mid, &mut rng),
                                squeeze: Conv::same3(&mut params, &format!("{pre}.squeeze"), config.c_mid, 1, &mut rng),
                                att: Conv::point(&mut params, &format!("{pre}.att"), ATTENTION_BINS.len(), 1, &mut rng),
                            }
                        })
                        .collect();
                    IsamLevel { branches }
                })
                .collect()
        });
        let fpm = (0..LEVELS)
            .map(|i| {
                let c = config.channels[i];
                let comm = Conv::same3(&mut params, &format!("fpm{}.comm", i + 1), n * c, config.c_mid, &mut rng);
                let exclu = v
                    .fpm()
                    .then(|| Conv::same3(&mut params, &format!("fpm{}.exclu", i + 1), n * c, config.c_mid, &mut rng));
                FpmLevel { comm, exclu }
            })
            .collect();
        let dec_convs = (0..LEVELS)
            .map(|i| Conv::same3(&mut params, &format!("dec{}", i + 1), config.c_mid, config.c_mid, &mut rng))
            .collect();
        let head = Conv::same3(&mut params, "dec.head", config.c_mid, 1, &mut rng);
        FusionModel {
            config,
            params,
            flow_encoder,
            isam,
            fpm,
            dec_convs,
            head,
        }
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn variant(&self) -> AblationVariant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn isam_level(&self, level: usize) -> Option<&IsamLevel> {
        self.isam.as_ref().map(|l| &l[level])
    }

    pub fn fpm_level(&self, level: usize) -> &FpmLevel {
        &self.fpm[level]
    }

    pub fn head(&self) -> &Conv {
        &self.head
    }

    /// Attention and enhancement for one level. `feats` are the active sources' features, in
    /// variant order, all of shape `(B, C, H, W)`.
    pub fn isam_forward(&self, tape: &mut Tape, p: &Bound, level: usize, feats: &[Var]) -> Result<IsamOutput> {
        let lvl = self
            .isam_level(level)
            .ok_or_else(|| Error::Contract(format!("variant {} has no attention module", self.variant())))?;
        isam_forward(tape, p, lvl, feats)
    }

    pub fn fpm_forward(&self, tape: &mut Tape, p: &Bound, level: usize, enhanced: &[Var]) -> Result<Var> {
        fpm_forward(tape, p, &self.fpm[level], enhanced)
    }

    /// Full stage-2 forward on a tape. Stage-1 features enter as constants.
    pub fn forward_on(&self, tape: &mut Tape, p: &Bound, flow_rgb: Var, stage1: &StageOneOutput) -> Result<Var> {
        let (b, h, w) = stage1.dims();
        let (fb, fh, fw) = check_image(tape.value(flow_rgb), 3, "flow rendering")?;
        if (fb, fh, fw) != (b, h, w) {
            return Err(Error::dim(
                "fusion_forward",
                format!("flow {:?} vs stage-1 maps {:?}", tape.shape(flow_rgb), stage1.saliency.shape()),
            ));
        }
        stage1.validate(b, h, w)?;
        let flow_feats = match &self.flow_encoder {
            Some(enc) => Some(enc.forward(tape, p, flow_rgb)?),
            None => None,
        };
        let sources = self.variant().sources();
        let mut purified = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            let feats = sources
                .iter()
                .map(|s| match s {
                    Source::Rgb => Ok(tape.constant(stage1.rgb[i].clone())),
                    Source::Depth => Ok(tape.constant(stage1.depth_feats[i].clone())),
                    Source::Saliency => Ok(tape.constant(stage1.sal_feats[i].clone())),
                    Source::Flow => flow_feats
                        .as_ref()
                        .map(|f| f[i])
                        .ok_or_else(|| Error::Contract("flow features missing".into())),
                })
                .collect::<Result<Vec<Var>>>()?;
            let enhanced = match &self.isam {
                Some(levels) => isam_forward(tape, p, &levels[i], &feats)?.enhanced,
                None => feats,
            };
            purified.push(fpm_forward(tape, p, &self.fpm[i], &enhanced)?);
        }
        let top = self.dec_convs[LEVELS - 1].forward(tape, p, purified[LEVELS - 1])?;
        let mut cur = tape.relu(top);
        for i in (0..LEVELS - 1).rev() {
            let up = up2(tape, cur)?;
            let sum = tape.add(purified[i], up)?;
            let c = self.dec_convs[i].forward(tape, p, sum)?;
            cur = tape.relu(c);
        }
        let logits = self.head.forward(tape, p, cur)?;
        let full = tape.upsample(logits, h, w)?;
        Ok(tape.sigmoid(full))
    }

    /// Moving-object mask `(B, 1, H, W)` for a frame batch, its flow rendering and frozen stage-1 output.
    pub fn forward(&self, frame: &Tensor, flow_rgb: &Tensor, stage1: &StageOneOutput) -> Result<Tensor> {
        let (b, h, w) = check_image(frame, 3, "frame")?;
        stage1.validate(b, h, w)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let f = tape.constant(flow_rgb.clone());
        let m = self.forward_on(&mut tape, &p, f, stage1)?;
        Ok(tape.value(m).clone())
    }
}

/// Attention maps and enhanced features for one level.
pub fn isam_forward(tape: &mut Tape, p: &Bound, level: &IsamLevel, feats: &[Var]) -> Result<IsamOutput> {
    if feats.len() != level.branches.len() {
        return Err(Error::dim(
            "isam_forward",
            format!("{} sources for {} branches", feats.len(), level.branches.len()),
        ));
    }
    let shape = tape.shape(feats[0]).to_vec();
    if feats.iter().any(|&f| tape.shape(f) != shape.as_slice()) {
        return Err(Error::dim("isam_forward", "source features disagree in shape"));
    }
    let (h, w) = (shape[2], shape[3]);
    let cat = tape.concat(feats)?;
    let mut enhanced = Vec::with_capacity(feats.len());
    let mut attention = Vec::with_capacity(feats.len());
    for (br, &f) in level.branches.iter().zip(feats) {
        let mixed = br.mix.forward(tape, p, cat)?;
        let mixed = tape.relu(mixed);
        let single = br.squeeze.forward(tape, p, mixed)?;
        let mut pyramid = Vec::with_capacity(ATTENTION_BINS.len());
        for bins in ATTENTION_BINS {
            let bins = match bins {
                Bins::Grid(n) => Bins::Grid(n.min(h).min(w)),
                g => g,
            };
            let pooled = tape.pyramid_pool(single, bins)?;
            pyramid.push(tape.upsample(pooled, h, w)?);
        }
        let stacked = tape.concat(&pyramid)?;
        let logits = br.att.forward(tape, p, stacked)?;
        let isa = tape.sigmoid(logits);
        let gated = tape.mul_channel_broadcast(f, isa)?;
        enhanced.push(tape.add(f, gated)?);
        attention.push(isa);
    }
    Ok(IsamOutput { enhanced, attention })
}

/// `comm(cat(E)) - exclu(cat(E))`, or just the common path when purification is off.
pub fn fpm_forward(tape: &mut Tape, p: &Bound, level: &FpmLevel, enhanced: &[Var]) -> Result<Var> {
    let shape = tape.shape(enhanced[0]).to_vec();
    if enhanced.iter().any(|&e| tape.shape(e) != shape.as_slice()) {
        return Err(Error::dim("fpm_forward", "enhanced features disagree in shape"));
    }
    let cat = tape.concat(enhanced)?;
    let comm = level.comm.forward(tape, p, cat)?;
    match &level.exclu {
        Some(ex) => {
            let exclu = ex.forward(tape, p, cat)?;
            tape.sub(comm, exclu)
        }
        None => Ok(comm),
    }
}

/// BCE of the moving-object mask against the ground truth.
pub fn stage2_loss(tape: &mut Tape, mos: Var, gt_mask: &Tensor) -> Result<Var> {
    bce_loss(tape, mos, gt_mask)
}
