//! Dataset configuration, generation to disk or memory, and batch assembly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::synth::io::{write_sample, SequenceMeta, Split};
use crate::synth::{derive_seed, flip_flow, flows_to_color, generate_sequence, CorruptionMode, GeneratorConfig, VideoSample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub mode: CorruptionMode,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub name: String,
    pub count: usize,
    /// Fraction of sequences whose flow is corrupted.
    #[serde(default)]
    pub corrupt_fraction: f64,
    /// Corruptions assigned in turn to the corrupted sequences.
    #[serde(default)]
    pub corruptions: Vec<Corruption>,
}

impl SplitSpec {
    pub fn clean(name: &str, count: usize) -> Self {
        SplitSpec {
            name: name.into(),
            count,
            corrupt_fraction: 0.0,
            corruptions: Vec::new(),
        }
    }

    pub fn corrupted(name: &str, count: usize) -> Self {
        SplitSpec {
            name: name.into(),
            count,
            corrupt_fraction: 0.5,
            corruptions: default_corruptions(),
        }
    }
}

fn default_corruptions() -> Vec<Corruption> {
    vec![
        Corruption {
            mode: CorruptionMode::Noise,
            strength: 6.0,
        },
        Corruption {
            mode: CorruptionMode::ZeroObject,
            strength: 0.0,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub splits: Vec<SplitSpec>,
}

pub const TRAIN: &str = "train";
pub const VAL: &str = "val";
pub const APS_TRAIN: &str = "aps_train";
pub const APS_VAL: &str = "aps_val";

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            generator: GeneratorConfig::default(),
            splits: vec![
                SplitSpec::clean(TRAIN, 200),
                SplitSpec::clean(VAL, 50),
                SplitSpec::corrupted(APS_TRAIN, 200),
                SplitSpec::corrupted(APS_VAL, 50),
            ],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        for s in &self.splits {
            if !(0.0..=1.0).contains(&s.corrupt_fraction) {
                return Err(Error::Config(format!("split {}: corrupt_fraction must lie in [0, 1]", s.name)));
            }
            if s.corrupt_fraction > 0.0 && s.corruptions.is_empty() {
                return Err(Error::Config(format!("split {}: corrupted split lists no corruptions", s.name)));
            }
            if s.name.is_empty() || s.name.contains(['/', '\\']) {
                return Err(Error::Config(format!("bad split name '{}'", s.name)));
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<(usize, &SplitSpec)> {
        self.splits
            .iter()
            .enumerate()
            .find(|(_, s)| s.name == name)
            .ok_or_else(|| Error::Config(format!("dataset has no split '{name}'")))
    }

    /// Corruption of every sequence of split `index`, `None` for clean ones.
    pub fn assignments(&self, index: usize) -> Vec<Option<Corruption>> {
        let spec = &self.splits[index];
        let n_bad = (spec.corrupt_fraction * spec.count as f64).round() as usize;
        let mut order: Vec<usize> = (0..spec.count).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 1000 + index as u64, 0)));
        let mut out = vec![None; spec.count];
        for (rank, &i) in order.iter().take(n_bad).enumerate() {
            out[i] = Some(spec.corruptions[rank % spec.corruptions.len()]);
        }
        out
    }

    /// Generates split `name` in memory as `(sequence name, meta, sample)`.
    pub fn generate_split(&self, name: &str) -> Result<Vec<(String, SequenceMeta, VideoSample)>> {
        self.validate()?;
        let (index, spec) = self.split(name)?;
        let assign = self.assignments(index);
        parallel::try_map_range(spec.count, |i| {
            let mut cfg = self.generator.clone();
            if let Some(c) = assign[i] {
                cfg.corruption = c.mode;
                cfg.strength = c.strength;
            }
            let seed = derive_seed(self.seed, index as u64, i as u64);
            let sample = generate_sequence(&cfg, seed)?;
            let meta = SequenceMeta {
                seed,
                quality: sample.quality,
                config: Some(cfg),
            };
            Ok((format!("seq_{i:04}"), meta, sample))
        })
    }

    pub fn load_split(&self, name: &str) -> Result<Split> {
        let (names, samples) = self.generate_split(name)?.into_iter().map(|(n, _, s)| (n, s)).unzip();
        Ok(Split { names, samples })
    }

    /// Writes every split under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for spec in &self.splits {
            for (name, meta, sample) in self.generate_split(&spec.name)? {
                write_sample(&root.join(&spec.name).join(name), &sample, &meta)?;
            }
        }
        Ok(())
    }
}

/// One frame of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRef {
    pub seq: usize,
    pub t: usize,
}

/// Frames of `split`; `with_flow` restricts to frames that have an outgoing flow.
pub fn frame_refs(split: &Split, with_flow: bool) -> Vec<FrameRef> {
    let mut out = Vec::new();
    for (seq, s) in split.samples.iter().enumerate() {
        let n = if with_flow { s.len() - 1 } else { s.len() };
        out.extend((0..n).map(|t| FrameRef { seq, t }));
    }
    out
}

/// Stacked inputs and targets for a set of frames.
#[derive(Debug, Clone)]
pub struct Batch {
    pub frames: Tensor,
    pub masks: Tensor,
    pub depths: Tensor,
    /// Raw flow, present only when every frame has one.
    pub flows: Option<Tensor>,
    pub flow_rgb: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flow_rgb(&self) -> Result<&Tensor> {
        self.flow_rgb
            .as_ref()
            .ok_or_else(|| Error::Contract("batch has no flow for its last frame".into()))
    }
}

/// Gathers `refs` into a batch, mirroring items whose `flip` flag is set.
pub fn assemble(split: &Split, refs: &[FrameRef], flip: &[bool]) -> Result<Batch> {
    let mut frames = Vec::with_capacity(refs.len());
    let mut masks = Vec::with_capacity(refs.len());
    let mut depths = Vec::with_capacity(refs.len());
    let mut flows = Vec::with_capacity(refs.len());
    let mut have_flow = true;
    for (k, r) in refs.iter().enumerate() {
        let s = &split.samples[r.seq];
        let f = flip.get(k).copied().unwrap_or(false);
        let m = |t: Tensor| if f { t.flip_width() } else { Ok(t) };
        frames.push(m(s.frame(r.t))?);
        masks.push(m(s.mask(r.t))?);
        depths.push(m(s.depth(r.t))?);
        if r.t + 1 < s.len() {
            let fl = s.flow(r.t);
            flows.push(if f { flip_flow(&fl)? } else { fl });
        } else {
            have_flow = false;
        }
    }
    let cat = |v: &[Tensor]| Tensor::cat_batch(&v.iter().collect::<Vec<_>>());
    let (flows, flow_rgb) = if have_flow {
        let fl = cat(&flows)?;
        let rgb = flows_to_color(&fl)?;
        (Some(fl), Some(rgb))
    } else {
        (None, None)
    };
    Ok(Batch {
        frames: cat(&frames)?,
        masks: cat(&masks)?,
        depths: cat(&depths)?,
        flows,
        flow_rgb,
    })
}
