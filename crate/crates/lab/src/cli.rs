//! Command-line interface.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use vsrdistill_core::data::Split;

use crate::checkpoint::{final_dir, latest_dir};
use crate::config::{load_config, ExperimentConfig};
use crate::error::{LabError, LabResult};
use crate::pipeline::{resolve_out, Lab, STAGES};

#[derive(Debug, Parser)]
#[command(name = "vsrdistill", version, about = "Three-stage one-step distillation of a toy video super-resolution model")]
pub struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root (falls back to $VSRDISTILL_OUT, then the config `out` key, then runs/default).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Use the tiny smoke preset instead of the defaults (ignored with --config).
    #[arg(long, global = true)]
    pub smoke: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    ThreeStage,
    Streams,
    Stability,
    All,
}

#[derive(Debug, clap::Args)]
pub struct ResumeArg {
    /// Continue from `<out>/<stage>/latest` (or an explicit checkpoint directory).
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    pub resume: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset under <out>/data.
    MakeData,
    /// Stage 0: train the multi-step teacher.
    Pretrain(ResumeArg),
    /// Stage 1: trajectory-preserving distillation.
    DistillInit(ResumeArg),
    /// Stage 2: dual-stream distillation.
    DistillDual {
        #[command(flatten)]
        resume: ResumeArg,
        /// Start from the raw teacher when no stage-1 checkpoint exists.
        #[arg(long)]
        allow_raw_init: bool,
    },
    /// Stage 3: preference refinement.
    Refine(ResumeArg),
    /// Evaluate every available model on a split.
    Eval {
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Gaussian score/gradient checks against closed forms.
    OracleBench,
    /// Ablation grids.
    Ablate {
        #[arg(long, value_enum, default_value = "all")]
        grid: Grid,
    },
    /// Write figures under <out>/plots.
    Plot,
    /// Data, all four stages and evaluation on both splits.
    RunAll,
    /// Print the effective config as TOML.
    ShowConfig,
}

impl Cli {
    pub fn experiment(&self) -> LabResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None if self.smoke => ExperimentConfig::smoke(),
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn resume_dir(lab: &Lab, stage: &str, arg: &ResumeArg) -> LabResult<Option<PathBuf>> {
    let Some(p) = &arg.resume else { return Ok(None) };
    let dir = if p.is_empty() {
        let stage_dir = lab.path(stage);
        let latest = latest_dir(&stage_dir);
        if latest.join("manifest.json").exists() { latest } else { final_dir(&stage_dir) }
    } else {
        PathBuf::from(p)
    };
    if !dir.join("manifest.json").exists() {
        return Err(LabError::Missing { path: dir, hint: "no checkpoint to resume from".into() });
    }
    Ok(Some(dir))
}

pub fn run(cli: Cli) -> LabResult<()> {
    let cfg = cli.experiment()?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let out = resolve_out(cli.out.clone(), &cfg);
    let lab = Lab::new(cfg, out)?;
    info!("output root {}", lab.out.display());
    match &cli.command {
        Command::MakeData => {
            lab.make_data()?;
        }
        Command::Pretrain(r) => {
            let data = lab.load_data()?;
            lab.pretrain(&data, resume_dir(&lab, STAGES[0], r)?.as_deref())?;
        }
        Command::DistillInit(r) => {
            let data = lab.load_data()?;
            lab.distill_init(&data, resume_dir(&lab, STAGES[1], r)?.as_deref())?;
        }
        Command::DistillDual { resume, allow_raw_init } => {
            let data = lab.load_data()?;
            lab.distill_dual(&data, resume_dir(&lab, STAGES[2], resume)?.as_deref(), *allow_raw_init)?;
        }
        Command::Refine(r) => {
            let data = lab.load_data()?;
            let o = lab.refine(&data, resume_dir(&lab, STAGES[3], r)?.as_deref())?;
            println!("pairs {} skipped {} margin {:.6} -> {:.6}", o.pairs, o.skipped, o.margin_before, o.margin_after);
        }
        Command::Eval { split } => {
            let data = lab.load_data()?;
            let split = match split {
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            for r in lab.evaluate(&data, split)? {
                println!("{:<20} psnr {:>8.3}  ssim {:.4}  warp {:>8.4}  hf {:.3}", r.label, r.psnr, r.ssim, r.warp, r.hf_ratio);
            }
        }
        Command::OracleBench => {
            let r = lab.oracle_bench()?;
            println!(
                "score max rel err {:.3e}; estimator max rel err {:.3e}; min cosine {:.5}; flow end {:?}",
                r.score_max_rel_error,
                r.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max),
                r.probes.iter().map(|p| p.cosine).fold(1.0, f64::min),
                r.flow_final
            );
            if !r.passed() {
                return Err(LabError::Check("oracle bench outside tolerance; see oracle/report.csv".into()));
            }
        }
        Command::Ablate { grid } => {
            let data = lab.load_data()?;
            if matches!(grid, Grid::ThreeStage | Grid::All) {
                for r in lab.ablate_three_stage(&data)? {
                    println!("{:<12} psnr {:>8.3}  hf_gap {:.3}", r.label, r.report.psnr, r.hf_gap());
                }
            }
            if matches!(grid, Grid::Streams | Grid::All) {
                for r in lab.ablate_streams(&data)? {
                    println!("{:<12} psnr {:>8.3}  hf_gap {:.3}", r.label, r.report.psnr, r.hf_gap());
                }
            }
            if matches!(grid, Grid::Stability | Grid::All) {
                for r in lab.ablate_stability(&data)? {
                    println!("seed {} {:<6} variance {:.4e} max/median {:.3}", r.seed, r.init, r.stats.variance, r.stats.max_over_median);
                }
            }
        }
        Command::Plot => {
            for p in lab.plot()? {
                println!("{}", p.display());
            }
        }
        Command::RunAll => {
            let s = lab.run_all()?;
            for r in &s.val {
                println!("val {:<20} psnr {:>8.3}", r.label, r.psnr);
            }
            lab.plot()?;
        }
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}
