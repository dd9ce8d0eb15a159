mod common;

use common::lab::{micro_config, run_all};
use geco_core::error::Error;
use geco_core::eval::{Expectation, Metric};
use geco_core::models::Stage;
use geco_core::pipeline::{Arm, Lab};
use geco_core::scene::save_png;

#[test]
fn reruns_are_bit_identical_by_digest() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (da, db) = (run_all(a.path()), run_all(b.path()));
    assert_eq!(da, db);
    assert_eq!(da.len(), 6);
}

#[test]
fn steps_refuse_to_run_without_parents() {
    let home = tempfile::tempdir().unwrap();
    let lab = Lab::from_config(micro_config(), home.path());
    assert!(matches!(lab.train_teacher(), Err(Error::MissingParent(_))));
    lab.build_dataset().unwrap();
    assert!(matches!(lab.stage1(), Err(Error::MissingParent(_))));
    assert!(matches!(lab.build_pgt(), Err(Error::MissingParent(_))));
    assert!(matches!(lab.evaluate(Arm::Stage2), Err(Error::MissingParent(_))));
}

#[test]
fn replaced_teacher_breaks_stage1_lineage_unless_forced() {
    let home = tempfile::tempdir().unwrap();
    let lab = Lab::from_config(micro_config(), home.path());
    lab.build_dataset().unwrap();
    lab.train_teacher().unwrap();
    lab.stage1().unwrap();
    assert!(lab.load_stage1().is_ok());

    let mut other = micro_config();
    other.teacher.seed = 99;
    Lab::from_config(other, home.path()).train_teacher().unwrap();
    assert!(matches!(lab.load_stage1(), Err(Error::Checkpoint(_))));
    let mut forced = Lab::from_config(micro_config(), home.path());
    forced.force = true;
    assert!(forced.load_stage1().is_ok());
}

#[test]
fn infer_evaluates_each_network_once_and_writes_outputs() {
    let home = tempfile::tempdir().unwrap();
    run_all(home.path());
    let lab = Lab::from_config(micro_config(), home.path());
    let ds = lab.dataset().unwrap();
    let cond = home.path().join("cond.png");
    save_png(&ds.scenes.last().unwrap().condition, &cond).unwrap();
    let out = home.path().join("infer");
    let s = lab.infer(Arm::Stage2, &cond, 7, &out).unwrap();
    assert_eq!((s.generator_evaluations, s.reconstructor_evaluations), (1, 1));
    assert_eq!(s.renders, 15);
    assert!(s.timing.t_multiview_ms > 0.0 && s.timing.t_reconstruct_ms > 0.0);
    for f in ["gaussians.gspl", "multiview.png", "timing.json", "render_00.png", "config.toml", "provenance.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("timing.json")).unwrap()).unwrap();
    assert!(json["timing"]["t_multiview_ms"].is_number() && json["timing"]["t_reconstruct_ms"].is_number());
}

#[test]
fn evaluation_reports_and_comparison() {
    let home = tempfile::tempdir().unwrap();
    run_all(home.path());
    let lab = Lab::from_config(micro_config(), home.path());
    for arm in [Arm::Stage2, Arm::Stage1, Arm::Naive] {
        let r = lab.evaluate(arm).unwrap();
        assert_eq!(r.per_scene.len(), 2);
        assert!(lab.report_path(arm.label()).exists());
    }
    let labels: Vec<String> = [Arm::Stage2, Arm::Stage1, Arm::Naive].iter().map(|a| a.label().to_string()).collect();
    let exp = Expectation { better: labels[0].clone(), worse: labels[0].clone(), metric: Metric::Psnr, strict: false };
    let cmp = lab.compare(&labels, &[exp]).unwrap();
    assert_eq!(cmp.rows.len(), 3);
    assert!(cmp.expectations[0].pass);
    let (div, psnrs) = lab.diversity(Arm::Stage1).unwrap();
    assert!(div.mean_pairwise_l2.is_finite() && psnrs.len() == 2);
    assert!(lab.checkpoint_path(Stage::Stage2).exists());
}
