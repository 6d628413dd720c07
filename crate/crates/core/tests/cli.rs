use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[paths]
images = "data/images"
annotations = "data/annotations.csv"
ground_truth = "data/gt"
archetypes = "data/archetypes.csv"
output = "out"

[phantoms]
count = 16
image_size = 96

[preprocess]
size = 32

[clustering]
k = 2
restarts = 2

[network]
stem_width = 2
widths = [2, 3, 3, 4]
decoder_width = 3

[train]
batch_size = 2
epochs = 1
iterations_per_epoch = 3
lr = 1e-3
eval_every = 3
"#;

fn coseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coseg")).current_dir(dir).args(["--config", "coseg.toml"]).args(args).output().unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("coseg.toml"), config).unwrap();
    dir
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn full_run_then_up_to_date() {
    let dir = setup(SMALL);
    let out = coseg(dir.path(), &["run", "--phantoms"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("gen-phantoms: done (34 outputs)"), "{stdout}");
    for f in ["model.ckpt", "loss_curve.csv", "split.csv", "pairs.csv", "report_table.txt", "report_grabcut.csv", "report_network_crf.json"] {
        assert!(dir.path().join("out").join(f).exists(), "{f} missing");
    }
    assert_eq!(fs::read_dir(dir.path().join("out/masks")).unwrap().count(), 16);
    assert!(dir.path().join("out/manifests/overlay.json").exists());

    let again = coseg(dir.path(), &["run", "--phantoms"]);
    assert!(again.status.success());
    let stdout = text(&again.stdout);
    assert_eq!(stdout.matches("up-to-date").count(), 10, "{stdout}");

    let table = coseg(dir.path(), &["evaluate", "--table"]);
    assert!(text(&table.stdout).contains("grabcut"));
}

#[test]
fn missing_upstream_reports_hint() {
    let dir = setup(SMALL);
    let out = coseg(dir.path(), &["cluster"]);
    assert_eq!(out.status.code(), Some(3));
    let err = text(&out.stderr);
    assert!(err.starts_with("error[missing-artifact]:"), "{err}");
    assert!(err.contains("coseg gen-phantoms"), "{err}");
}

#[test]
fn invalid_config_exits_2() {
    let dir = setup("[clustering]\nsplit_ratios = [0.5, 0.5, 0.5]\n");
    let out = coseg(dir.path(), &["gen-phantoms"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).starts_with("error[config]:"));
    let dir = setup("bogus = 1\n");
    assert_eq!(coseg(dir.path(), &["gen-phantoms"]).status.code(), Some(2));
}

#[test]
fn stale_upstream_needs_force() {
    let dir = setup(SMALL);
    for stage in ["gen-phantoms", "gen-masks", "cluster"] {
        assert!(coseg(dir.path(), &[stage]).status.success(), "{stage}");
    }
    let changed = SMALL.replace("restarts = 2", "restarts = 3");
    fs::write(dir.path().join("coseg.toml"), changed).unwrap();
    let out = coseg(dir.path(), &["split"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(text(&out.stderr).starts_with("error[stale-upstream]:"));
    let forced = coseg(dir.path(), &["split", "--force"]);
    assert!(forced.status.success());
    assert!(text(&forced.stderr).contains("warning:"));

    // a tampered upstream output is caught as well
    fs::write(dir.path().join("coseg.toml"), SMALL).unwrap();
    for stage in ["cluster", "split", "pair"] {
        assert!(coseg(dir.path(), &[stage]).status.success(), "{stage}");
    }
    let mask = fs::read_dir(dir.path().join("out/masks")).unwrap().next().unwrap().unwrap().path();
    fs::remove_file(mask).unwrap();
    let out = coseg(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(4), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("changed or missing"));
}

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_coseg")).arg("default-config").output().unwrap();
    assert!(out.status.success());
    fs::write(dir.path().join("coseg.toml"), &out.stdout).unwrap();
    let cfg = coseg_core::pipeline::PipelineConfig::from_toml(&text(&out.stdout)).unwrap();
    assert_eq!(cfg, coseg_core::pipeline::PipelineConfig::default());
}

#[test]
fn seed_override_changes_phantoms() {
    let dir = setup(SMALL);
    assert!(coseg(dir.path(), &["gen-phantoms"]).status.success());
    let a = fs::read(dir.path().join("data/images/lesion_0000.png")).unwrap();
    assert!(coseg(dir.path(), &["gen-phantoms", "--seed", "4", "--out", "out4"]).status.success());
    let b = fs::read(dir.path().join("data/images/lesion_0000.png")).unwrap();
    assert_ne!(a, b);
}
