use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
schema_version = 1

[schedule]
num_steps = 50

[guidance]
peak = 35

[sampling]
seeds = 4
conditions = [[0, 0], [1, 1]]

[compare]
gs_list = [2.0, 10.0]

[ablate]
gs = 10.0
seeds = 4
peaks = [10, 35]
"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

fn dog(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dog"))
        .args(args)
        .env_remove("DOG_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn run_ok(args: &[&str]) -> Output {
    let out = dog(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn body_without_digest(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap();
    let (first, rest) = text.split_once('\n').unwrap();
    assert!(first.starts_with("# config_digest="), "{first}");
    rest.to_string()
}

#[test]
fn train_without_dataset_section_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dog(&[
        "train",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset"));
}

#[test]
fn unknown_key_and_missing_version_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}\n[eval]\nbogus_knob = 1\n"));
    let out = dog(&[
        "sample",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_knob"));

    let cfg = write_config(dir.path(), "[sampling]\nseeds = 2\n");
    let out = dog(&[
        "sample",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));
}

#[test]
fn invalid_values_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("peak = 35", "peak = 80"));
    let out = dog(&[
        "sample",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("peak"));
}

#[test]
fn sample_is_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&[
            "sample",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--gs",
            "5",
        ]);
    }
    for name in [
        "samples.csv",
        "summary.csv",
        "trajectories/seed-0.csv",
        "trajectories/seed-3.csv",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let record = fs::read_to_string(a.join("trajectories/seed-0.csv")).unwrap();
    let lines: Vec<&str> = record.lines().collect();
    assert!(lines[0].starts_with("# seed=0 config_digest="));
    assert_eq!(lines[1], "t,x1,x2,g");
    assert_eq!(lines.len(), 2 + 51);
}

#[test]
fn dog_at_zero_scale_reproduces_unguided_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (dog_dir, none_dir) = (dir.path().join("dog"), dir.path().join("none"));
    run_ok(&[
        "sample",
        cfg.to_str().unwrap(),
        "--out",
        dog_dir.to_str().unwrap(),
        "--strategy",
        "dog",
        "--gs",
        "0",
    ]);
    run_ok(&[
        "sample",
        cfg.to_str().unwrap(),
        "--out",
        none_dir.to_str().unwrap(),
        "--strategy",
        "none",
    ]);
    assert_eq!(
        body_without_digest(&dog_dir.join("samples.csv")),
        body_without_digest(&none_dir.join("samples.csv"))
    );
}

#[test]
fn compare_writes_expected_columns_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    run_ok(&[
        "compare",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--strategies",
        "none,cfg,dog",
    ]);
    let body = body_without_digest(&out.join("compare.csv"));
    let lines: Vec<&str> = body.lines().collect();
    assert_eq!(
        lines[0],
        "strategy,gs,fidelity_w2,diversity,blowup_rate,n_samples"
    );
    assert_eq!(lines.len(), 1 + 3 * 2);
    assert!(lines[1].starts_with("none,2,") && lines[6].starts_with("dog,10,"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",8")));
    let svg = fs::read_to_string(out.join("compare.svg")).unwrap();
    assert!(svg.contains("fidelity_w2") && svg.contains("blowup_rate"));
    assert!(out.join("compare-manifest.toml").exists());
}

#[test]
fn ablate_labels_each_arm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    run_ok(&[
        "ablate",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--axis",
        "peak",
    ]);
    let body = body_without_digest(&out.join("ablate-peak.csv"));
    let labels: Vec<&str> = body
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(labels, ["dog/peak=10", "dog/peak=35"]);
    assert!(out.join("ablate-peak.svg").exists());
}

#[test]
fn output_directory_comes_from_the_environment_when_no_flag_is_given() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let env_out = dir.path().join("from-env");
    let status = Command::new(env!("CARGO_BIN_EXE_dog"))
        .args(["sample", cfg.to_str().unwrap(), "--seeds", "2"])
        .env("DOG_OUTPUT_DIR", &env_out)
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(env_out.join("samples.csv").exists());
}

#[test]
fn trained_checkpoint_round_trips_through_sample() {
    let dir = tempfile::tempdir().unwrap();
    let train_cfg = format!(
        "{SMALL}\n[dataset]\nper_slice = 8\nprobes = 50\n\n[training]\nepochs = 2\n\n[training.architecture]\nhidden = [16]\n"
    );
    let cfg = write_config(dir.path(), &train_cfg);
    let out = dir.path().join("train");
    run_ok(&[
        "train",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let loss = body_without_digest(&out.join("training_loss.csv"));
    assert_eq!(loss.lines().count(), 1 + 2);
    let ckpt = out.join("checkpoint.txt");
    assert!(fs::read_to_string(&ckpt)
        .unwrap()
        .starts_with("# config_digest="));

    let sample_cfg = format!(
        "{SMALL}\n[denoiser]\nkind = \"trained\"\ncheckpoint = {:?}\n",
        ckpt.to_str().unwrap()
    );
    let cfg = write_config(dir.path(), &sample_cfg);
    run_ok(&[
        "sample",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("s").to_str().unwrap(),
        "--strategy",
        "cfg",
    ]);
}

#[test]
fn trained_kind_without_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{SMALL}\n[denoiser]\nkind = \"trained\"\n"),
    );
    let out = dog(&[
        "sample",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("denoiser.checkpoint"));
}

#[test]
fn shipped_configs_parse_and_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["analytic", "train", "trained"] {
        let cfg = dog_cli::config::RunConfig::load(&root.join(format!("{name}.toml"))).unwrap();
        cfg.validate().unwrap();
    }
}
