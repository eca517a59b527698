//! Fusion ablation over source/module variants and the predictor-selection comparison.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetConfig, APS_TRAIN, APS_VAL, TRAIN, VAL};
use crate::error::{Error, Result};
use crate::eval::{agreement, predict, report, selection_records, EvalMode, Models, SelectionRecord};
use crate::metrics::{Aggregate, EvalReport};
use crate::nn::fusion::{AblationVariant, FusionModel};
use crate::nn::multitask::MultiTaskModel;
use crate::train::{train_stage1, train_stage2, train_stage3, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub dataset: DatasetConfig,
    /// Shared optimizer and width settings; `max_iter` and `lr` are overridden per stage.
    pub train: TrainConfig,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub stage3_iters: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub stage3_lr: f64,
    /// Seeds of the stage-2 runs; the first also seeds stages 1 and 3.
    pub seeds: Vec<u64>,
    pub variants: Vec<AblationVariant>,
    /// Also train the selector and compare SOS, MOS and APS.
    pub selection: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            stage1_iters: 800,
            stage2_iters: 600,
            stage3_iters: 400,
            stage1_lr: 0.05,
            stage2_lr: 0.05,
            stage3_lr: 0.02,
            seeds: vec![0, 1, 2],
            variants: AblationVariant::ALL.to_vec(),
            selection: true,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        if self.variants.is_empty() && !self.selection {
            return Err(Error::Config("ablation has nothing to run".into()));
        }
        for split in [TRAIN, VAL] {
            self.dataset.split(split)?;
        }
        if self.selection {
            for split in [APS_TRAIN, APS_VAL] {
                self.dataset.split(split)?;
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: AblationConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn stage(&self, iters: usize, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            max_iter: iters,
            lr,
            seed,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub label: String,
    pub variant: AblationVariant,
    pub per_seed: Vec<Aggregate>,
    /// Metric-wise median over seeds.
    pub median: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub label: String,
    pub split: String,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub rows: Vec<SelectionRow>,
    /// Selector agreement with the dynamic labels, per split.
    pub agreement: Vec<(String, f64)>,
    pub records: Vec<SelectionRecord>,
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub variants: Vec<VariantRow>,
    pub selection: Option<SelectionOutcome>,
    pub seconds: f64,
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_aggregate(rows: &[Aggregate]) -> Aggregate {
    Aggregate {
        mean_j: median(rows.iter().map(|a| a.mean_j).collect()),
        mean_f: median(rows.iter().map(|a| a.mean_f).collect()),
        mae: median(rows.iter().map(|a| a.mae).collect()),
    }
}

impl AblationTable {
    pub fn row(&self, v: AblationVariant) -> Option<&VariantRow> {
        self.variants.iter().find(|r| r.variant == v)
    }

    /// Aggregate of a selection row (`SOS`, `MOS`, `APS`) on a split.
    pub fn selection(&self, label: &str, split: &str) -> Option<&Aggregate> {
        self.selection
            .as_ref()?
            .rows
            .iter()
            .find(|r| r.label == label && r.split == split)
            .map(|r| &r.aggregate)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("row\tsplit\tmean_j\tmean_f\tmae\tper_seed_j\n");
        for r in &self.variants {
            let seeds: Vec<String> = r.per_seed.iter().map(|a| format!("{:.4}", a.mean_j)).collect();
            let m = &r.median;
            let _ = writeln!(
                s,
                "{}\t{VAL}\t{:.6}\t{:.6}\t{:.6}\t{}",
                r.label,
                m.mean_j,
                m.mean_f,
                m.mae,
                seeds.join(",")
            );
        }
        if let Some(sel) = &self.selection {
            for r in &sel.rows {
                let a = &r.aggregate;
                let _ = writeln!(s, "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t-", r.label, r.split, a.mean_j, a.mean_f, a.mae);
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Trains every variant under every seed and, if configured, the selector.
pub fn ablate(cfg: &AblationConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let start = Instant::now();
    let train = cfg.dataset.load_split(TRAIN)?;
    let val = cfg.dataset.load_split(VAL)?;
    let seed0 = cfg.seeds[0];
    let (stage1, _) = train_stage1(&cfg.stage(cfg.stage1_iters, cfg.stage1_lr, seed0), &train)?;
    log::info!("stage 1 trained in {:.1}s", start.elapsed().as_secs_f64());

    let mut full: Option<FusionModel> = None;
    let mut variants = Vec::with_capacity(cfg.variants.len());
    for &variant in &cfg.variants {
        let mut per_seed = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let tc = TrainConfig {
                variant,
                ..cfg.stage(cfg.stage2_iters, cfg.stage2_lr, seed)
            };
            let (m2, _) = train_stage2(&tc, &train, &stage1)?;
            let models = Models {
                stage1: &stage1,
                stage2: Some(&m2),
                stage3: None,
            };
            let rep = report(EvalMode::Mos, &predict(models, &val)?)?;
            log::info!(
                "{variant} seed {seed}: J {:.4} ({:.1}s)",
                rep.aggregate.mean_j,
                start.elapsed().as_secs_f64()
            );
            per_seed.push(rep.aggregate);
            if variant == AblationVariant::AllIsamFpm && seed == seed0 {
                full = Some(m2);
            }
        }
        variants.push(VariantRow {
            label: variant.table_label().to_string(),
            variant,
            median: median_aggregate(&per_seed),
            per_seed,
        });
    }

    let selection = if cfg.selection {
        let m2 = match full {
            Some(m) => m,
            None => {
                let tc = TrainConfig {
                    variant: AblationVariant::AllIsamFpm,
                    ..cfg.stage(cfg.stage2_iters, cfg.stage2_lr, seed0)
                };
                train_stage2(&tc, &train, &stage1)?.0
            }
        };
        Some(run_selection(cfg, &stage1, &m2, &val)?)
    } else {
        None
    };
    Ok(AblationTable {
        variants,
        selection,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn run_selection(
    cfg: &AblationConfig,
    stage1: &MultiTaskModel,
    stage2: &FusionModel,
    clean: &crate::synth::io::Split,
) -> Result<SelectionOutcome> {
    let aps_train = cfg.dataset.load_split(APS_TRAIN)?;
    let aps_val = cfg.dataset.load_split(APS_VAL)?;
    let tc = cfg.stage(cfg.stage3_iters, cfg.stage3_lr, cfg.seeds[0]);
    let (m3, _) = train_stage3(&tc, &aps_train, stage1, stage2)?;
    let models = Models {
        stage1,
        stage2: Some(stage2),
        stage3: Some(&m3),
    };
    let mut rows = Vec::new();
    let mut agree = Vec::new();
    let mut records = Vec::new();
    let mut reports = Vec::new();
    for (name, split) in [(APS_VAL, &aps_val), (VAL, clean)] {
        let preds = predict(models, split)?;
        for mode in [EvalMode::Sos, EvalMode::Mos, EvalMode::Aps] {
            let mut rep = report(mode, &preds)?;
            rep.variant = format!("{}@{name}", mode.name());
            rows.push(SelectionRow {
                label: mode.label().to_string(),
                split: name.to_string(),
                aggregate: rep.aggregate.clone(),
            });
            reports.push(rep);
        }
        let recs = selection_records(&preds)?;
        if let Some(a) = agreement(&recs) {
            agree.push((name.to_string(), a));
        }
        if name == APS_VAL {
            records = recs;
        }
    }
    Ok(SelectionOutcome {
        rows,
        agreement: agree,
        records,
        reports,
    })
}
