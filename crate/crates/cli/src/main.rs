//! `geco`: dataset, training, distillation, inference and evaluation commands.
//!
//! Exit codes: 0 success, 2 usage or configuration error (including missing
//! parent artifacts), 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use geco_core::config::{lab_home, resolve_config, ResolvedConfig};
use geco_core::eval::{Expectation, Metric};
use geco_core::pipeline::{Arm, Lab};
use geco_core::Error;

#[derive(Parser)]
#[command(name = "geco", version, about = "One-step image-to-3D Gaussian generation: data, training, distillation and evaluation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; missing keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set stage2.lambda_perceptual=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Print a JSON result on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Serialize every reduction (the engine already runs single-threaded, so results are bit-exact either way).
    #[arg(long, global = true)]
    strict_determinism: bool,
    /// Accept checkpoints whose configuration or parent digests do not match.
    #[arg(long, global = true)]
    force: bool,
    /// Root for relative paths; defaults to $GECO_LAB_HOME or the working directory.
    #[arg(long, global = true)]
    home: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Procedural scene dataset.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Pretraining of the teacher and the reconstructor.
    Train {
        #[command(subcommand)]
        which: TrainCmd,
    },
    /// Stage I and Stage II distillation.
    Distill {
        #[command(subcommand)]
        stage: DistillCmd,
    },
    /// Pseudo ground truth for Stage II.
    Pgt {
        #[command(subcommand)]
        action: PgtCmd,
    },
    /// Condition image to Gaussians, renders and timing.
    Infer {
        #[arg(long)]
        condition: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "stage2")]
        arm: String,
    },
    /// Score an arm on the held-out scenes.
    Eval {
        #[arg(long, default_value = "stage2")]
        arm: String,
        /// `ring15` or `sixview`.
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        mask_bg: bool,
    },
    /// Align saved reports and check ordering expectations.
    Compare {
        /// Report labels, e.g. `stage2 stage1 naive`.
        #[arg(required = true)]
        labels: Vec<String>,
        /// `better>worse:metric`, or `better>=worse:metric` to allow ties. Repeatable.
        #[arg(long = "expect")]
        expect: Vec<String>,
    },
    /// Write the Gaussians of every held-out scene as GSPL files.
    Export {
        #[arg(long, default_value = "stage2")]
        arm: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distance of one-step samples to 75-step teacher samples before and after Stage I.
    Gap,
    /// Spread of unseen-view renders across `eval.diversity_seeds` on the first held-out scene.
    Diversity {
        #[arg(long, default_value = "stage2")]
        arm: String,
    },
    /// Print the resolved configuration with the source of every key.
    Config,
}

#[derive(Subcommand)]
enum DatasetCmd {
    Build,
}

#[derive(Subcommand)]
enum TrainCmd {
    Teacher,
    Recon,
}

#[derive(Args, Default)]
struct Stage2Flags {
    #[arg(long)]
    ddim_steps: Option<usize>,
    #[arg(long)]
    n_views: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    z_per_cond: Option<usize>,
}

impl Stage2Flags {
    fn overrides(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut push = |k: &str, val: Option<String>| {
            if let Some(x) = val {
                v.push(format!("stage2.{k}={x}"));
            }
        };
        push("ddim_steps", self.ddim_steps.map(|x| x.to_string()));
        push("n_views", self.n_views.map(|x| x.to_string()));
        push("lambda_perceptual", self.lambda.map(|x| format!("{x:?}")));
        push("epochs", self.epochs.map(|x| x.to_string()));
        push("batch_size", self.batch_size.map(|x| x.to_string()));
        push("z_per_condition", self.z_per_cond.map(|x| x.to_string()));
        v
    }
}

#[derive(Subcommand)]
enum DistillCmd {
    Stage1,
    Stage2 {
        #[command(flatten)]
        flags: Stage2Flags,
    },
}

#[derive(Subcommand)]
enum PgtCmd {
    Build {
        #[command(flatten)]
        flags: Stage2Flags,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::MissingParent(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn parse_expectation(s: &str) -> Result<Expectation, Failure> {
    let bad = || Failure::Config(format!("expectation {s:?} is not `better>worse:metric`"));
    let (pair, metric) = s.rsplit_once(':').ok_or_else(bad)?;
    let (strict, (better, worse)) = match pair.split_once(">=") {
        Some(p) => (false, p),
        None => (true, pair.split_once('>').ok_or_else(bad)?),
    };
    let metric: Metric = serde_json::from_value(serde_json::Value::String(metric.trim().to_lowercase())).map_err(|_| bad())?;
    Ok(Expectation { better: better.trim().into(), worse: worse.trim().into(), metric, strict })
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("result serializes"));
    } else {
        print!("{}", text());
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    let mut overrides = g.set.clone();
    match &cli.command {
        Command::Distill { stage: DistillCmd::Stage2 { flags } } | Command::Pgt { action: PgtCmd::Build { flags } } => overrides.extend(flags.overrides()),
        Command::Eval { protocol, mask_bg, .. } => {
            if let Some(p) = protocol {
                overrides.push(format!("eval.protocol=\"{p}\""));
            }
            if *mask_bg {
                overrides.push("eval.mask_bg=true".into());
            }
        }
        _ => {}
    }
    let resolved: ResolvedConfig = resolve_config(g.config.as_deref(), &overrides)?;
    let home = g.home.clone().unwrap_or_else(lab_home);
    let lab = Lab::new(&resolved, &home, g.force);
    if g.strict_determinism {
        log::info!("strict determinism requested; reductions are sequential");
    }
    let json = g.json;
    let step_text = |s: &geco_core::pipeline::StepSummary| {
        let mut t = format!("{} -> {}\n", s.step, s.dir.display());
        if let Some(d) = &s.digest {
            t.push_str(&format!("  digest {d}\n"));
        }
        for (k, v) in &s.metrics {
            t.push_str(&format!("  {k} {v:.6}\n"));
        }
        t
    };
    match cli.command {
        Command::Dataset { action: DatasetCmd::Build } => {
            let s = lab.build_dataset()?;
            emit(json, &s, || step_text(&s));
        }
        Command::Train { which } => {
            let s = match which {
                TrainCmd::Teacher => lab.train_teacher()?,
                TrainCmd::Recon => lab.train_recon()?,
            };
            emit(json, &s, || step_text(&s));
        }
        Command::Distill { stage } => {
            let s = match stage {
                DistillCmd::Stage1 => lab.stage1()?,
                DistillCmd::Stage2 { .. } => lab.stage2()?,
            };
            emit(json, &s, || step_text(&s));
        }
        Command::Pgt { action: PgtCmd::Build { .. } } => {
            let s = lab.build_pgt()?;
            emit(json, &s, || step_text(&s));
        }
        Command::Infer { condition, seed, out, arm } => {
            let s = lab.infer(Arm::parse(&arm)?, &condition, seed, &out)?;
            emit(json, &s, || {
                format!(
                    "{} gaussians, {} renders -> {}\n  multiview {:.1} ms, reconstruct {:.1} ms, render {:.1} ms\n",
                    s.gaussians,
                    s.renders,
                    out.display(),
                    s.timing.t_multiview_ms,
                    s.timing.t_reconstruct_ms,
                    s.timing.t_render_ms
                )
            });
        }
        Command::Eval { arm, .. } => {
            let r = lab.evaluate(Arm::parse(&arm)?)?;
            emit(json, &r, || r.table());
        }
        Command::Compare { labels, expect } => {
            let ex = expect.iter().map(|e| parse_expectation(e)).collect::<Result<Vec<_>, _>>()?;
            let c = lab.compare(&labels, &ex)?;
            emit(json, &c, || c.table());
            if c.expectations.iter().any(|e| !e.pass) {
                return Err(Failure::Runtime("an ordering expectation failed".into()));
            }
        }
        Command::Export { arm, out } => {
            let s = lab.export(Arm::parse(&arm)?, &out)?;
            emit(json, &s, || step_text(&s));
        }
        Command::Gap => {
            let g = lab.sample_gap()?;
            emit(json, &g, || {
                format!("init {:.4}\ntrained {:.4}\nteacher {:.4}\nratio {:.4}\n", g.init, g.trained, g.teacher, g.ratio())
            });
        }
        Command::Diversity { arm } => {
            let (d, psnrs) = lab.diversity(Arm::parse(&arm)?)?;
            #[derive(Serialize)]
            struct Out {
                mean_pairwise_l2: f64,
                per_pose: Vec<f64>,
                condition_psnr: Vec<f64>,
            }
            let out = Out { mean_pairwise_l2: d.mean_pairwise_l2, per_pose: d.per_pose, condition_psnr: psnrs };
            emit(json, &out, || {
                let p: Vec<String> = out.condition_psnr.iter().map(|v| format!("{v:.2}")).collect();
                format!("mean pairwise L2 {:.5}\ncondition-view PSNR {}\n", out.mean_pairwise_l2, p.join(" "))
            });
        }
        Command::Config => {
            emit(json, &resolved.config, || resolved.annotated());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
