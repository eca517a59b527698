//! Evaluation of the static, motion and selected predictions on a split.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{assemble, FrameRef};
use crate::error::{Error, Result};
use crate::metrics::{boundary_f, default_boundary_tolerance, mae, region_j, EvalReport, Mask, SequenceScore, BINARIZE_THRESHOLD};
use crate::nn::aps::{make_label, selector_inputs, ApsModel, Predictor, SELECT_THRESHOLD};
use crate::nn::fusion::FusionModel;
use crate::nn::multitask::MultiTaskModel;
use crate::parallel;
use crate::synth::io::Split;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Sos,
    Mos,
    Aps,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Sos => "sos",
            EvalMode::Mos => "mos",
            EvalMode::Aps => "aps",
        }
    }

    /// Row label in the selection table.
    pub fn label(self) -> &'static str {
        match self {
            EvalMode::Sos => "SOS",
            EvalMode::Mos => "MOS",
            EvalMode::Aps => "APS",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sos" => Ok(EvalMode::Sos),
            "mos" => Ok(EvalMode::Mos),
            "aps" => Ok(EvalMode::Aps),
            _ => Err(Error::Config(format!("unknown eval mode '{s}'"))),
        }
    }
}

/// Trained networks available to an evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub stage1: &'a MultiTaskModel,
    pub stage2: Option<&'a FusionModel>,
    pub stage3: Option<&'a ApsModel>,
}

impl Models<'_> {
    fn check(&self, mode: EvalMode) -> Result<()> {
        let missing = |what: &str| Err(Error::Contract(format!("mode {mode} needs a {what} checkpoint")));
        match mode {
            EvalMode::Sos => Ok(()),
            EvalMode::Mos if self.stage2.is_none() => missing("stage-2"),
            EvalMode::Aps if self.stage2.is_none() => missing("stage-2"),
            EvalMode::Aps if self.stage3.is_none() => missing("stage-3"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub t: usize,
    pub gt: Mask,
    pub sos: Mask,
    pub mos: Option<Mask>,
    pub score: Option<f64>,
    /// Dynamic label, present when both masks are.
    pub label: Option<u8>,
}

impl FramePrediction {
    pub fn chosen(&self, p: Predictor) -> Result<&Mask> {
        match p {
            Predictor::Sos => Ok(&self.sos),
            Predictor::Mos => self
                .mos
                .as_ref()
                .ok_or_else(|| Error::Contract("no motion prediction for this frame".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequencePredictions {
    pub name: String,
    pub frames: Vec<FramePrediction>,
}

/// Runs the available networks on every frame that has a flow, one sequence at a time.
pub fn predict(models: Models<'_>, split: &Split) -> Result<Vec<SequencePredictions>> {
    if models.stage3.is_some() && models.stage2.is_none() {
        return Err(Error::Contract("a stage-3 model needs a stage-2 model".into()));
    }
    parallel::try_map_range(split.len(), |seq| {
        let sample = &split.samples[seq];
        let refs: Vec<FrameRef> = (0..sample.len() - 1).map(|t| FrameRef { seq, t }).collect();
        let batch = assemble(split, &refs, &[])?;
        let s1 = models.stage1.forward(&batch.frames)?;
        let mos = match models.stage2 {
            Some(m) => Some(m.forward(&batch.frames, batch.flow_rgb()?, &s1)?),
            None => None,
        };
        let scores = match (models.stage3, &mos) {
            (Some(m), Some(mos)) => {
                let (rs, rm) = selector_inputs(&batch.frames, batch.flow_rgb()?, &s1.saliency, mos)?;
                Some(m.forward(&rs, &rm)?)
            }
            _ => None,
        };
        let frames = refs
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let gt = Mask::from_plane(&batch.masks, i, 0)?;
                let sos = Mask::from_plane(&s1.saliency, i, 0)?;
                let mos = mos.as_ref().map(|m| Mask::from_plane(m, i, 0)).transpose()?;
                let label = mos.as_ref().map(|m| make_label(&sos, m, &gt)).transpose()?;
                Ok(FramePrediction {
                    t: r.t,
                    gt,
                    sos,
                    mos,
                    score: scores.as_ref().map(|s| s[i]),
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SequencePredictions {
            name: split.names[seq].clone(),
            frames,
        })
    })
}

/// Frame-averaged J, F and MAE of one sequence.
pub fn score_sequence(name: &str, pairs: &[(&Mask, &Mask)]) -> Result<SequenceScore> {
    if pairs.is_empty() {
        return Err(Error::Contract(format!("sequence {name} has no frames to score")));
    }
    let (mut j, mut f, mut m) = (0.0, 0.0, 0.0);
    for (pred, gt) in pairs {
        let tol = default_boundary_tolerance(gt.height(), gt.width());
        j += region_j(pred, gt, BINARIZE_THRESHOLD)?;
        f += boundary_f(pred, gt, tol)?;
        m += mae(pred, gt)?;
    }
    let n = pairs.len() as f64;
    Ok(SequenceScore {
        sequence: name.to_string(),
        mean_j: j / n,
        mean_f: f / n,
        mae: m / n,
    })
}

/// Report for an arbitrary per-frame choice of predictor.
pub fn report_with(
    variant: &str,
    preds: &[SequencePredictions],
    choose: impl Fn(&FramePrediction) -> Result<Predictor>,
) -> Result<EvalReport> {
    let rows = preds
        .iter()
        .map(|s| {
            let chosen = s
                .frames
                .iter()
                .map(|f| Ok((f.chosen(choose(f)?)?, &f.gt)))
                .collect::<Result<Vec<_>>>()?;
            score_sequence(&s.name, &chosen)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(variant, rows))
}

fn score_choice(f: &FramePrediction) -> Result<Predictor> {
    f.score
        .map(|s| Predictor::from_score(s, SELECT_THRESHOLD))
        .ok_or_else(|| Error::Contract("no selector score for this frame".into()))
}

fn label_choice(f: &FramePrediction) -> Result<Predictor> {
    f.label
        .map(Predictor::from_label)
        .ok_or_else(|| Error::Contract("no dynamic label for this frame".into()))
}

/// Report of `mode` over precomputed predictions.
pub fn report(mode: EvalMode, preds: &[SequencePredictions]) -> Result<EvalReport> {
    match mode {
        EvalMode::Sos => report_with(mode.name(), preds, |_| Ok(Predictor::Sos)),
        EvalMode::Mos => report_with(mode.name(), preds, |_| Ok(Predictor::Mos)),
        EvalMode::Aps => report_with(mode.name(), preds, score_choice),
    }
}

/// Report when every frame takes the predictor its dynamic label names.
pub fn oracle_report(preds: &[SequencePredictions]) -> Result<EvalReport> {
    report_with("oracle", preds, label_choice)
}

pub fn evaluate(models: Models<'_>, split: &Split, mode: EvalMode) -> Result<EvalReport> {
    models.check(mode)?;
    let models = match mode {
        EvalMode::Sos => Models {
            stage2: None,
            stage3: None,
            ..models
        },
        EvalMode::Mos => Models { stage3: None, ..models },
        EvalMode::Aps => models,
    };
    report(mode, &predict(models, split)?)
}

/// One scored frame of a selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub sequence: String,
    pub frame: usize,
    pub score: f64,
    pub label: Option<u8>,
    pub chosen: Predictor,
}

pub fn selection_records(preds: &[SequencePredictions]) -> Result<Vec<SelectionRecord>> {
    let mut out = Vec::new();
    for s in preds {
        for f in &s.frames {
            let score = f.score.ok_or_else(|| Error::Contract("no selector score for this frame".into()))?;
            out.push(SelectionRecord {
                sequence: s.name.clone(),
                frame: f.t,
                score,
                label: f.label,
                chosen: Predictor::from_score(score, SELECT_THRESHOLD),
            });
        }
    }
    Ok(out)
}

/// Columns: `sequence, frame, score, label, chosen`; a missing label is written as `-`.
pub fn records_to_tsv(records: &[SelectionRecord]) -> String {
    let mut s = String::from("sequence\tframe\tscore\tlabel\tchosen\n");
    for r in records {
        let label = r.label.map_or("-".to_string(), |y| y.to_string());
        let _ = writeln!(s, "{}\t{}\t{:.6}\t{}\t{}", r.sequence, r.frame, r.score, label, r.chosen.name());
    }
    s
}

/// Fraction of labelled frames where the selector picks the labelled predictor.
pub fn agreement(records: &[SelectionRecord]) -> Option<f64> {
    let labelled: Vec<_> = records.iter().filter_map(|r| r.label.map(|y| (r.chosen, y))).collect();
    if labelled.is_empty() {
        return None;
    }
    let hits = labelled.iter().filter(|(c, y)| *c == Predictor::from_label(*y)).count();
    Some(hits as f64 / labelled.len() as f64)
}
