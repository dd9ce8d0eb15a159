//! A micro-scale run of the whole pipeline, small enough for every test target.

use std::collections::BTreeMap;
use std::path::Path;

use geco_core::config::RunConfig;
use geco_core::pipeline::Lab;

pub fn micro_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 3;
    c.scene.n_scenes = 5;
    c.scene.holdout = 2;
    c.scene.resolution = 16;
    c.scene.extra_views = 1;
    c.model.width = 8;
    c.model.width_low = 16;
    c.model.blocks_low = 1;
    c.model.groups = 4;
    c.teacher.steps = 4;
    c.teacher.batch_size = 2;
    c.recon.steps = 2;
    c.recon.batch_size = 1;
    c.recon.novel_views = 1;
    c.stage1.steps = 2;
    c.stage1.lr_gen = 1e-4;
    c.stage1.lr_stu = 1e-4;
    c.stage1.sample_every = 0;
    c.stage1.checkpoint_every = 0;
    c.stage2.ddim_steps = 2;
    c.stage2.n_views = 3;
    c.stage2.epochs = 1;
    c.stage2.batch_size = 2;
    c.stage2.view_subset = 2;
    c.stage2.lr = 1e-4;
    c.eval.diversity_seeds = vec![1, 2];
    c
}

/// Runs every producing step and returns the content digest of each output.
pub fn run_all(home: &Path) -> BTreeMap<&'static str, String> {
    let lab = Lab::from_config(micro_config(), home);
    let mut out = BTreeMap::new();
    let mut put = |k, s: geco_core::pipeline::StepSummary| {
        out.insert(k, s.digest.expect("step reports a digest"));
    };
    put("dataset", lab.build_dataset().unwrap());
    put("teacher", lab.train_teacher().unwrap());
    put("recon", lab.train_recon().unwrap());
    put("stage1", lab.stage1().unwrap());
    put("pgt", lab.build_pgt().unwrap());
    put("stage2", lab.stage2().unwrap());
    out
}
