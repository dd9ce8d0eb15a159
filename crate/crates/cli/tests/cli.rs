use std::path::Path;
use std::process::{Command, Output};

const MICRO: &str = r#"
seed = 3

[scene]
n_scenes = 5
holdout = 2
resolution = 16
extra_views = 1

[model]
width = 8
width_low = 16
blocks_low = 1
groups = 4

[teacher]
steps = 4
batch_size = 2

[recon]
steps = 2
batch_size = 1
novel_views = 1

[stage1]
steps = 2
lr_gen = 1e-4
lr_stu = 1e-4
sample_every = 0
checkpoint_every = 0

[stage2]
ddim_steps = 2
n_views = 3
epochs = 1
batch_size = 2
view_subset = 2
lr = 1e-4

[eval]
diversity_seeds = [1, 2]
"#;

fn geco(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geco")).arg("--home").arg(home).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(home: &Path, args: &[&str]) -> String {
    let out = geco(home, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    let home = tempfile::tempdir().unwrap();
    assert_eq!(geco(home.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(geco(home.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(geco(home.path(), &["config", "--set", "nosuch.key=1"]).status.code(), Some(2));
    let out = geco(home.path(), &["distill", "stage1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing parent"));
}

#[test]
fn config_reports_provenance() {
    let home = tempfile::tempdir().unwrap();
    let cfg = home.path().join("run.toml");
    std::fs::write(&cfg, "[scene]\nn_scenes = 40\n").unwrap();
    let text = ok(home.path(), &["--config", cfg.to_str().unwrap(), "--set", "stage2.lambda=0.5", "config"]);
    let line = |key: &str| text.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("{key} in {text}")).to_string();
    assert!(line("scene.n_scenes = 40").contains("file"));
    assert!(line("stage2.lambda_perceptual = 0.5").contains("override"));
    assert!(line("stage2.epochs = 10").contains("default"));
    let json: serde_json::Value = serde_json::from_str(&ok(home.path(), &["--json", "config"])).unwrap();
    assert_eq!(json["stage2"]["ddim_steps"], 75);
}

#[test]
fn micro_run_end_to_end() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    let cfg = h.join("micro.toml");
    std::fs::write(&cfg, MICRO).unwrap();
    let c = cfg.to_str().unwrap();
    for step in [&["dataset", "build"][..], &["train", "teacher"], &["train", "recon"], &["distill", "stage1"], &["pgt", "build"], &["distill", "stage2"]] {
        let mut args = vec!["--config", c, "--json"];
        args.extend_from_slice(step);
        let s: serde_json::Value = serde_json::from_str(&ok(h, &args)).unwrap();
        assert!(s["digest"].is_string(), "{step:?}: {s}");
    }
    assert!(h.join("checkpoints/stage2/config.toml").exists());

    let cond = h.join("dataset/scenes").read_dir().unwrap().next().unwrap().unwrap().path().join("cond.png");
    let out = h.join("infer");
    let s: serde_json::Value =
        serde_json::from_str(&ok(h, &["--config", c, "--json", "infer", "--condition", cond.to_str().unwrap(), "--seed", "4", "--out", out.to_str().unwrap()])).unwrap();
    assert_eq!(s["generator_evaluations"], 1);
    assert_eq!(s["reconstructor_evaluations"], 1);
    assert!(out.join("gaussians.gspl").exists());

    for arm in ["stage2", "stage1", "naive"] {
        let r: serde_json::Value = serde_json::from_str(&ok(h, &["--config", c, "--json", "eval", "--arm", arm])).unwrap();
        assert_eq!(r["label"], arm);
    }
    ok(h, &["--config", c, "compare", "stage2", "stage1", "--expect", "stage2>=stage2:psnr"]);
    let fail = geco(h, &["--config", c, "compare", "stage2", "stage1", "--expect", "stage2>stage2:psnr"]);
    assert_eq!(fail.status.code(), Some(3));
    assert_eq!(geco(h, &["--config", c, "compare", "stage2", "--expect", "nonsense"]).status.code(), Some(2));

    let d: serde_json::Value = serde_json::from_str(&ok(h, &["--config", c, "--json", "diversity"])).unwrap();
    assert_eq!(d["condition_psnr"].as_array().unwrap().len(), 2);
    ok(h, &["--config", c, "export", "--out", h.join("export").to_str().unwrap()]);
    assert_eq!(h.join("export").read_dir().unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "gspl")).count(), 2);

    // A different teacher invalidates Stage I unless forced.
    ok(h, &["--config", c, "--set", "teacher.seed=9", "train", "teacher"]);
    assert_eq!(geco(h, &["--config", c, "--set", "teacher.seed=9", "distill", "stage2"]).status.code(), Some(3));
}
