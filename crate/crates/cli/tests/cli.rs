use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use zvos_core::data::{DatasetConfig, SplitSpec, TRAIN, VAL};
use zvos_core::synth::GeneratorConfig;
use zvos_core::train::{Stage, TrainConfig};

fn zvos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zvos"))
        .args(args)
        .output()
        .expect("spawn zvos")
}

/// Asserts the one-line error contract and returns the message part.
fn expect_failure(out: &Output, kind: &str, code: i32) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "stderr: {stderr}");
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    let fields: Vec<&str> = lines[0].splitn(3, '\t').collect();
    assert_eq!(fields.len(), 3, "stderr: {stderr}");
    assert_eq!(fields[0], "error");
    assert_eq!(fields[1], kind);
    assert!(!fields[2].is_empty());
    fields[2].to_string()
}

fn expect_success(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}, stderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_dataset() -> DatasetConfig {
    DatasetConfig {
        seed: 5,
        generator: GeneratorConfig {
            height: 32,
            width: 32,
            frames: 3,
            size: [3, 5],
            ..GeneratorConfig::default()
        },
        splits: vec![
            SplitSpec::clean(TRAIN, 3),
            SplitSpec::clean(VAL, 2),
            SplitSpec::corrupted("aps_train", 3),
        ],
    }
}

fn tiny_train(stage: Stage, data: &Path, split: &str, out: PathBuf) -> TrainConfig {
    TrainConfig {
        stage,
        data: data.into(),
        split: split.into(),
        out,
        max_iter: 3,
        batch_size: 2,
        channels: [4, 4, 6, 6, 6],
        c_mid: 4,
        aps_width: 4,
        aps_blocks: 2,
        ..TrainConfig::default()
    }
}

fn write_toml<T: serde::Serialize>(path: &Path, value: &T) {
    fs::write(path, toml::to_string(value).unwrap()).unwrap();
}

#[test]
fn bad_arguments_are_usage_errors() {
    expect_failure(&zvos(&[]), "usage", 2);
    expect_failure(&zvos(&["train", "--stage", "4", "--config", "x.toml"]), "usage", 2);
    expect_failure(&zvos(&["frobnicate"]), "usage", 2);
    assert!(zvos(&["--help"]).status.success());
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let msg = expect_failure(&zvos(&["generate", "--config", s(&missing), "--out", s(dir.path())]), "io", 8);
    assert!(msg.contains("nope.toml"), "{msg}");
}

#[test]
fn malformed_configs_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "max_iter = \"many\"\n").unwrap();
    expect_failure(&zvos(&["train", "--stage", "1", "--config", s(&p)]), "config", 3);
    fs::write(&p, "learning_rate = 0.1\n").unwrap();
    expect_failure(&zvos(&["train", "--stage", "1", "--config", s(&p)]), "config", 3);
    fs::write(&p, "lr = -1.0\n").unwrap();
    expect_failure(&zvos(&["train", "--stage", "1", "--config", s(&p)]), "config", 3);
    fs::write(&p, "[generator]\nheight = 0\n").unwrap();
    expect_failure(&zvos(&["generate", "--config", s(&p), "--out", s(dir.path())]), "config", 3);
}

#[test]
fn bad_checkpoint_and_eval_mode() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("junk.bin");
    fs::write(&ck, b"not a checkpoint at all").unwrap();
    let msg = expect_failure(
        &zvos(&["eval", "--mode", "sos", "--data", s(dir.path()), "--ckpt", s(&ck)]),
        "format",
        6,
    );
    assert!(msg.contains("junk.bin"), "{msg}");
    let out = zvos(&["eval", "--mode", "best", "--data", s(dir.path()), "--ckpt", s(&ck)]);
    assert_ne!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
}

#[test]
fn generate_train_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let ds_cfg = root.join("ds.toml");
    write_toml(&ds_cfg, &tiny_dataset());

    let out = expect_success(&zvos(&["generate", "--config", s(&ds_cfg), "--out", s(&data)]));
    assert!(out.starts_with("generated\t8\t"), "{out}");
    let first_seq = |root: &Path| fs::read_dir(root.join(TRAIN)).unwrap().map(|e| e.unwrap().path()).min().unwrap();
    let first = fs::read(first_seq(&data).join("frame_000.ppm")).unwrap();
    let again = root.join("again");
    expect_success(&zvos(&["generate", "--config", s(&ds_cfg), "--out", s(&again)]));
    assert_eq!(fs::read(first_seq(&again).join("frame_000.ppm")).unwrap(), first);

    let ck1 = root.join("s1.bin");
    let ck2 = root.join("s2.bin");
    let ck3 = root.join("s3.bin");
    let cfg1 = tiny_train(Stage::One, &data, TRAIN, ck1.clone());
    let cfg2 = TrainConfig {
        stage1_ckpt: Some(ck1.clone()),
        ..tiny_train(Stage::Two, &data, TRAIN, ck2.clone())
    };
    let cfg3 = TrainConfig {
        stage1_ckpt: Some(ck1.clone()),
        stage2_ckpt: Some(ck2.clone()),
        ..tiny_train(Stage::Three, &data, "aps_train", ck3.clone())
    };
    for (i, cfg) in [&cfg1, &cfg2, &cfg3].into_iter().enumerate() {
        let p = root.join(format!("t{}.toml", i + 1));
        write_toml(&p, cfg);
        let stage = (i + 1).to_string();
        if i == 1 {
            // stage 2 before its stage-1 checkpoint exists
            let early = root.join("early.toml");
            write_toml(
                &early,
                &TrainConfig {
                    stage1_ckpt: Some(root.join("absent.bin")),
                    ..cfg2.clone()
                },
            );
            expect_failure(&zvos(&["train", "--stage", "2", "--config", s(&early)]), "contract", 5);
            let none = root.join("none.toml");
            write_toml(
                &none,
                &TrainConfig {
                    stage1_ckpt: None,
                    ..cfg2.clone()
                },
            );
            expect_failure(&zvos(&["train", "--stage", "2", "--config", s(&none)]), "contract", 5);
        }
        let out = expect_success(&zvos(&["train", "--stage", &stage, "--config", s(&p)]));
        assert!(out.starts_with(&format!("trained\tstage{stage}\t")), "{out}");
    }

    let sos = expect_success(&zvos(&["eval", "--mode", "sos", "--data", s(&data), "--ckpt", s(&ck1)]));
    assert!(sos.lines().count() >= 2, "{sos}");
    expect_failure(
        &zvos(&["eval", "--mode", "mos", "--data", s(&data), "--ckpt", s(&ck1)]),
        "contract",
        5,
    );
    let both = format!("{},{}", s(&ck2), s(&ck1));
    expect_success(&zvos(&["eval", "--mode", "mos", "--data", s(&data), "--ckpt", &both]));
    let all = format!("{},{},{}", s(&ck3), s(&ck1), s(&ck2));
    let json = root.join("aps.json");
    let rec = root.join("rec.tsv");
    let aps = expect_success(&zvos(&[
        "eval",
        "--mode",
        "aps",
        "--data",
        s(&data),
        "--ckpt",
        &all,
        "--json",
        s(&json),
        "--records",
        s(&rec),
    ]));
    let aps_again = expect_success(&zvos(&["eval", "--mode", "aps", "--data", s(&data), "--ckpt", &all]));
    assert_eq!(aps, aps_again);
    assert!(fs::read_to_string(&json).unwrap().trim_start().starts_with('{'));
    assert!(fs::read_to_string(&rec).unwrap().lines().count() > 1);

    let seq = fs::read_dir(data.join(VAL)).unwrap().map(|e| e.unwrap().path()).min().unwrap();
    let frame = seq.join("frame_000.ppm");
    let flow = seq.join("flow_000.flo");
    let mask = root.join("mask.pgm");
    let out = expect_success(&zvos(&[
        "infer",
        "--frame",
        s(&frame),
        "--flow",
        s(&flow),
        "--ckpt",
        &all,
        "--out",
        s(&mask),
    ]));
    assert!(out.contains("predictor=") && out.contains("score="), "{out}");
    let img = zvos_core::synth::io::read_pnm(&mask).unwrap();
    assert_eq!((img.channels, img.height, img.width), (1, 32, 32));
    assert!(img.planes().iter().all(|&v| (0.0..=1.0).contains(&v)));

    let small = root.join("small.flo");
    let f = zvos_core::Tensor::zeros(&[2, 8, 8]);
    zvos_core::synth::io::write_flo(&small, &f).unwrap();
    expect_failure(
        &zvos(&[
            "infer",
            "--frame",
            s(&frame),
            "--flow",
            s(&small),
            "--ckpt",
            s(&ck1),
            "--out",
            s(&mask),
        ]),
        "format",
        6,
    );
}

#[test]
fn ablate_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = zvos_core::ablate::AblationConfig {
        dataset: tiny_dataset(),
        train: tiny_train(Stage::One, dir.path(), TRAIN, dir.path().join("unused.bin")),
        stage1_iters: 2,
        stage2_iters: 2,
        stage3_iters: 2,
        seeds: vec![0],
        variants: vec![zvos_core::nn::fusion::AblationVariant::Rgb],
        selection: false,
        ..Default::default()
    };
    let p = dir.path().join("ablate.toml");
    write_toml(&p, &cfg);
    let json = dir.path().join("table.json");
    let out = expect_success(&zvos(&["ablate", "--config", s(&p), "--json", s(&json), "--seed", "4"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2, "{out}");
    assert!(lines[0].starts_with("row\tsplit\tmean_j"));
    assert!(lines[1].starts_with("RGB\tval\t"));
    assert!(fs::read_to_string(&json).unwrap().contains("\"variants\""));
}
