//! `zvos` command-line driver.
//!
//! Failures print exactly one line to stderr, `error<TAB><kind><TAB><message>`,
//! and exit with a kind-specific nonzero code.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zvos_core::ablate::{ablate, AblationConfig};
use zvos_core::data::{DatasetConfig, VAL};
use zvos_core::eval::{predict, records_to_tsv, report, selection_records, EvalMode, Models};
use zvos_core::metrics::Mask;
use zvos_core::nn::aps::{select, selector_inputs, Predictor, SELECT_THRESHOLD};
use zvos_core::nn::checkpoint::Loaded;
use zvos_core::synth::flow_to_color;
use zvos_core::synth::io::{read_flo, read_pnm, write_pgm, Split};
use zvos_core::train::{train_stage, Stage, TrainConfig};
use zvos_core::{Error, Tensor};

#[derive(Parser)]
#[command(name = "zvos", version, about = "Zero-shot video object segmentation pipeline")]
struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset from a TOML dataset config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage from a TOML training config.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate checkpoints on a dataset split and print the report as TSV.
    Eval {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint files, in any order (kinds are recognised by magic).
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long, default_value = VAL)]
        split: String,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// With `--mode aps`, write per-frame selection records as TSV.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Run the fusion ablation and predictor-selection comparison.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Also write the full table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Segment one frame. One checkpoint gives the static mask, two the motion mask, three the selected one.
    Infer {
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Core(e) => e.kind(),
        }
    }

    fn code(&self) -> u8 {
        match self.kind() {
            "usage" => 2,
            "config" => 3,
            "dimension" => 4,
            "contract" => 5,
            "format" => 6,
            "divergence" => 7,
            _ => 8,
        }
    }

    fn message(&self) -> String {
        let raw = match self {
            Failure::Usage(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        };
        raw.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

fn read_config(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Core(Error::Io { path: path.into(), source: e }))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Core(Error::Io { path: path.into(), source: e }))
}

fn generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg: DatasetConfig =
        toml::from_str(&read_config(config)?).map_err(|e| Error::Config(e.message().to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.write(out)?;
    let total: usize = cfg.splits.iter().map(|s| s.count).sum();
    println!("generated\t{total}\tsequences\t{}", out.display());
    Ok(())
}

fn train(stage: u8, config: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = TrainConfig::from_toml(&read_config(config)?)?;
    cfg.stage = Stage::try_from(stage)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let log = train_stage(&cfg)?;
    let (first, last) = log.head_tail(50);
    println!(
        "trained\tstage{stage}\t{}\titers={}\tloss_first={first:.6}\tloss_last={last:.6}",
        cfg.out.display(),
        log.loss.len()
    );
    Ok(())
}

fn eval(
    mode: &str,
    data: &Path,
    ckpt: &[PathBuf],
    split: &str,
    json: Option<&Path>,
    records: Option<&Path>,
) -> Result<(), Failure> {
    let mode: EvalMode = mode.parse()?;
    let loaded = Loaded::from_paths(ckpt)?;
    let models = Models {
        stage1: loaded.stage1()?,
        stage2: match mode {
            EvalMode::Sos => None,
            _ => Some(
                loaded
                    .stage2
                    .as_ref()
                    .ok_or_else(|| Error::Contract(format!("mode {mode} needs a stage-2 checkpoint")))?,
            ),
        },
        stage3: match mode {
            EvalMode::Aps => Some(
                loaded
                    .stage3
                    .as_ref()
                    .ok_or_else(|| Error::Contract("mode aps needs a stage-3 checkpoint".into()))?,
            ),
            _ => None,
        },
    };
    let split = Split::load(data, split)?;
    let preds = predict(models, &split)?;
    let rep = report(mode, &preds)?;
    print!("{}", rep.to_tsv());
    if let Some(p) = json {
        write_file(p, &rep.to_json())?;
    }
    if let Some(p) = records {
        if mode != EvalMode::Aps {
            return Err(Failure::Usage("--records needs --mode aps".into()));
        }
        write_file(p, &records_to_tsv(&selection_records(&preds)?))?;
    }
    Ok(())
}

fn run_ablation(config: &Path, json: Option<&Path>, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = AblationConfig::from_toml(&read_config(config)?)?;
    if let Some(s) = seed {
        cfg.dataset.seed = s;
        cfg.seeds = (0..cfg.seeds.len() as u64).map(|i| s.wrapping_add(i)).collect();
    }
    let table = ablate(&cfg)?;
    print!("{}", table.to_tsv());
    if let Some(p) = json {
        write_file(p, &table.to_json())?;
    }
    Ok(())
}

fn infer(frame: &Path, flow: &Path, ckpt: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let loaded = Loaded::from_paths(ckpt)?;
    let img = read_pnm(frame)?;
    if img.channels != 3 {
        return Err(Error::Format {
            path: frame.into(),
            msg: "frame must be a colour PPM".into(),
        }
        .into());
    }
    let (h, w) = (img.height, img.width);
    let x = Tensor::new(vec![1, 3, h, w], img.planes())?;
    let f = read_flo(flow)?;
    if f.shape()[1..] != [h, w] {
        return Err(Error::Format {
            path: flow.into(),
            msg: format!("flow {:?} does not match frame {h}x{w}", f.shape()),
        }
        .into());
    }
    let flow_rgb = flow_to_color(&f)?.reshape(&[1, 3, h, w])?;
    let s1 = loaded.stage1()?.forward(&x)?;
    let sos = Mask::from_plane(&s1.saliency, 0, 0)?;
    let (mask, which, score) = match (&loaded.stage2, &loaded.stage3) {
        (None, None) => (sos, Predictor::Sos, None),
        (Some(m2), None) => (Mask::from_plane(&m2.forward(&x, &flow_rgb, &s1)?, 0, 0)?, Predictor::Mos, None),
        (Some(m2), Some(m3)) => {
            let mos_t = m2.forward(&x, &flow_rgb, &s1)?;
            let (rs, rm) = selector_inputs(&x, &flow_rgb, &s1.saliency, &mos_t)?;
            let score = m3.forward(&rs, &rm)?[0];
            let mos = Mask::from_plane(&mos_t, 0, 0)?;
            let which = Predictor::from_score(score, SELECT_THRESHOLD);
            (select(&sos, &mos, score, SELECT_THRESHOLD).clone(), which, Some(score))
        }
        (None, Some(_)) => return Err(Error::Contract("a stage-3 checkpoint needs a stage-2 checkpoint".into()).into()),
    };
    write_pgm(out, h, w, mask.values(), false)?;
    match score {
        Some(s) => println!("wrote\t{}\tpredictor={}\tscore={s:.6}", out.display(), which.name()),
        None => println!("wrote\t{}\tpredictor={}", out.display(), which.name()),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Generate { config, out } => generate(&config, &out, cli.seed),
        Cmd::Train { stage, config } => train(stage, &config, cli.seed),
        Cmd::Eval {
            mode,
            data,
            ckpt,
            split,
            json,
            records,
        } => eval(&mode, &data, &ckpt, &split, json.as_deref(), records.as_deref()),
        Cmd::Ablate { config, json } => run_ablation(&config, json.as_deref(), cli.seed),
        Cmd::Infer { frame, flow, ckpt, out } => infer(&frame, &flow, &ckpt, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            _ => Err(Failure::Usage(e.to_string().lines().next().unwrap_or("bad usage").to_string())),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error\t{}\t{}", f.kind(), f.message());
            ExitCode::from(f.code())
        }
    }
}
