//! Stage orchestration over an output directory.
//!
//! ```text
//! <out>/config.toml                 effective configuration
//! <out>/data/                       dataset directory (see dataset_io)
//! <out>/stage{0,1,2,3}/latest/      periodic checkpoint
//! <out>/stage{0,1,2,3}/final/       checkpoint after the last iteration
//! <out>/stage{0,1,2,3}/log.csv      full training log
//! <out>/stage3/preferences/         preference pairs
//! <out>/stage3/margin.csv           mean inner margin before/after
//! <out>/eval/<split>_{summary,items}.csv
//! <out>/ablate/*.csv
//! <out>/oracle/report.csv
//! <out>/plots/*.png
//! ```
//!
//! Each stage consumes the `final` checkpoint of the stage before it.

use std::path::{Path, PathBuf};

use log::{info, warn};
use vsrdistill_core::data::{make_dataset, Dataset, Split, VideoPair};
use vsrdistill_core::denoiser::{init_params, Codec, DenoiserParams};
use vsrdistill_core::dpo::{self, build_preference_dataset, mean_inner_margin, PreferenceSet, ProxyScorer, Stage3State};
use vsrdistill_core::dual::{self, run_stage2, run_stage2_sequential, DualStreamState, Stage2Config, StreamMode};
use vsrdistill_core::eval::{evaluate_model, restore, stability_diagnostic, temporal_profile, Line, MetricsReport, Sampler, TraceStats};
use vsrdistill_core::rng::{normal_video, prng, Stream};
use vsrdistill_core::oracle::{gaussian_oracle_bench, OracleReport};
use vsrdistill_core::pgd::{self, Stage0State, Stage1State};
use vsrdistill_core::train::{encode_items, LogRow, TrainItem, TrainLog};

use crate::checkpoint::{checkpoint_exists, final_dir, latest_dir, load_checkpoint, load_model, save_checkpoint, Checkpointable, Meta};
use crate::config::{ExperimentConfig, OUT_ENV};
use crate::dataset_io::{export_dataset, export_preferences, import_dataset, import_preferences};
use crate::error::{io_err, LabError, LabResult};
use crate::plot;
use crate::report::{log_from_csv, log_to_csv, metrics_items_csv, metrics_summary_csv, read_summary_psnr, table_csv, write_text};

pub const STAGES: [&str; 4] = ["stage0", "stage1", "stage2", "stage3"];

/// Picks the output root: explicit flag, then the environment variable, then
/// the config file, then `runs/default`.
pub fn resolve_out(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs/default"))
}

pub fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub student: DenoiserParams,
    pub log: TrainLog,
    pub pairs: usize,
    pub skipped: usize,
    pub margin_before: f64,
    pub margin_after: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub val: Vec<MetricsReport>,
    pub test: Vec<MetricsReport>,
    pub refine: RefineOutcome,
}

impl PipelineSummary {
    pub fn val_psnr(&self, label: &str) -> Option<f64> {
        self.val.iter().find(|r| r.label == label).map(|r| r.psnr)
    }
}

pub struct Lab {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Lab {
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> LabResult<Self> {
        cfg.validate().map_err(|e| LabError::Invariant { path: "config".into(), detail: e.to_string() })?;
        Ok(Self { cfg, out })
    }

    pub fn seed(&self) -> u64 {
        self.cfg.seed
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn codec(&self) -> Box<dyn Codec> {
        self.cfg.codec.build()
    }

    fn meta(&self) -> Meta {
        Meta { seed: self.seed(), config_hash: self.cfg.hash(), scaled: true }
    }

    fn save_config(&self) -> LabResult<()> {
        write_text(&self.path("config.toml"), &self.cfg.to_toml())
    }

    pub fn make_data(&self) -> LabResult<Dataset> {
        self.save_config()?;
        let d = &self.cfg.data;
        let data = make_dataset(d.total_items(), &d.dataset, self.seed())?;
        let dir = self.path("data");
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        export_dataset(&dir, &data, &d.dataset, self.seed())?;
        info!("wrote {} items to {}", data.items.len(), dir.display());
        Ok(data)
    }

    /// Reads `<out>/data`, checking it was generated from the current data
    /// section and seed.
    pub fn load_data(&self) -> LabResult<Dataset> {
        let dir = self.path("data");
        let (data, m) = import_dataset(&dir)?;
        if m.seed != self.seed() || m.config != self.cfg.data.dataset || data.items.len() != self.cfg.data.total_items() {
            return Err(LabError::ConfigMismatch {
                path: dir,
                found: format!("seed {} / {} items", m.seed, data.items.len()),
                expected: format!("seed {} / {} items", self.seed(), self.cfg.data.total_items()),
            });
        }
        Ok(data)
    }

    pub fn data_or_make(&self) -> LabResult<Dataset> {
        if self.path("data/manifest.json").exists() {
            self.load_data()
        } else {
            self.make_data()
        }
    }

    pub fn train_items(&self, data: &Dataset) -> LabResult<Vec<TrainItem>> {
        Ok(encode_items(data.train(), self.codec().as_ref())?)
    }

    fn resume<S: Checkpointable>(&self, dir: &Path, columns: &[&'static str]) -> LabResult<(S, TrainLog)> {
        let loaded = load_checkpoint::<S>(dir)?;
        let hash = self.cfg.hash();
        if loaded.manifest.config_hash != hash || loaded.manifest.rng.seed != self.seed() {
            return Err(LabError::ConfigMismatch { path: dir.into(), found: loaded.manifest.config_hash, expected: hash });
        }
        let log = match &loaded.log_csv {
            Some(text) => log_from_csv(text, columns, &dir.join("log.csv"))?,
            None => TrainLog::new(columns),
        };
        if log.rows.len() as u64 != loaded.state.iteration() {
            return Err(crate::error::format_err(dir.join("log.csv"), "log length differs from the checkpoint iteration"));
        }
        info!("resuming {} at iteration {}", S::STAGE, loaded.state.iteration());
        Ok((loaded.state, log))
    }

    /// Steps `state` to `total`, checkpointing every `run.checkpoint_every`
    /// iterations and once at the end.
    fn drive<S: Checkpointable>(
        &self,
        mut state: S,
        mut log: TrainLog,
        total: u64,
        mut step: impl FnMut(&mut S) -> vsrdistill_core::Result<LogRow>,
    ) -> LabResult<(S, TrainLog)> {
        let stage_dir = self.path(S::STAGE);
        let every = self.cfg.run.checkpoint_every;
        let meta = self.meta();
        let report_every = (total / 10).max(1);
        while state.iteration() < total {
            let row = step(&mut state)?;
            if state.iteration() % report_every == 0 {
                info!("{} {}/{} {} {:?}", S::STAGE, state.iteration(), total, row.phase, row.values);
            }
            log.push(row);
            if every > 0 && state.iteration() % every == 0 && state.iteration() < total {
                save_checkpoint(&latest_dir(&stage_dir), &state, &meta, Some(&log_to_csv(&log)))?;
            }
        }
        let csv = log_to_csv(&log);
        save_checkpoint(&final_dir(&stage_dir), &state, &meta, Some(&csv))?;
        write_text(&stage_dir.join("log.csv"), &csv)?;
        Ok((state, log))
    }

    fn require_model(&self, stage: &str, key: &str, hint: &str) -> LabResult<DenoiserParams> {
        let dir = final_dir(&self.path(stage));
        if !checkpoint_exists(&dir) {
            return Err(LabError::Missing { path: dir, hint: hint.into() });
        }
        load_model(&dir, key)
    }

    pub fn teacher(&self) -> LabResult<DenoiserParams> {
        self.require_model("stage0", "teacher", "run `pretrain` first")
    }

    pub fn pretrain(&self, data: &Dataset, resume: Option<&Path>) -> LabResult<(DenoiserParams, TrainLog)> {
        self.save_config()?;
        let cfg = &self.cfg.stage0;
        let items = self.train_items(data)?;
        let (state, log) = match resume {
            Some(dir) => self.resume::<Stage0State>(dir, &pgd::LOG_COLUMNS)?,
            None => (Stage0State::new(init_params(&self.cfg.model, self.seed())?, cfg), TrainLog::new(&pgd::LOG_COLUMNS)),
        };
        let seed = self.seed();
        let (state, log) = self.drive(state, log, cfg.iterations, |s| s.step(cfg, &items, seed))?;
        Ok((state.params, log))
    }

    pub fn distill_init(&self, data: &Dataset, resume: Option<&Path>) -> LabResult<(DenoiserParams, TrainLog)> {
        self.save_config()?;
        let sched = &self.cfg.stage1;
        let items = self.train_items(data)?;
        let (state, log) = match resume {
            Some(dir) => self.resume::<Stage1State>(dir, &pgd::LOG_COLUMNS)?,
            None => (Stage1State::new(self.teacher()?, sched), TrainLog::new(&pgd::LOG_COLUMNS)),
        };
        let seed = self.seed();
        let (state, log) = self.drive(state, log, sched.total_iterations(), |s| s.step(sched, &items, seed))?;
        Ok((state.student, log))
    }

    /// Student initialization for stage 2: the stage-1 student, or the raw
    /// teacher when explicitly allowed.
    pub fn stage2_init(&self, allow_raw_init: bool) -> LabResult<DenoiserParams> {
        let dir = final_dir(&self.path("stage1"));
        if checkpoint_exists(&dir) {
            return load_model(&dir, "student");
        }
        if !allow_raw_init {
            return Err(LabError::Refused(format!(
                "no stage-1 checkpoint at {}; dual-stream distillation from a raw teacher is unstable, \
                 run `distill-init` first or pass --allow-raw-init",
                dir.display()
            )));
        }
        warn!("initializing the stage-2 student from the raw teacher");
        self.teacher()
    }

    pub fn distill_dual(&self, data: &Dataset, resume: Option<&Path>, allow_raw_init: bool) -> LabResult<(DenoiserParams, TrainLog)> {
        self.save_config()?;
        let cfg = &self.cfg.stage2;
        let items = self.train_items(data)?;
        let (state, log) = match resume {
            Some(dir) => self.resume::<DualStreamState>(dir, &dual::LOG_COLUMNS)?,
            None => {
                let init = self.stage2_init(allow_raw_init)?;
                (DualStreamState::new(init, &self.teacher()?, cfg, self.seed())?, TrainLog::new(&dual::LOG_COLUMNS))
            }
        };
        let seed = self.seed();
        let (state, log) = self.drive(state, log, cfg.iterations, |s| s.step(cfg, &items, seed))?;
        Ok((state.student, log))
    }

    fn preferences(&self, student: &DenoiserParams, data: &Dataset, dir: &Path, reuse: bool) -> LabResult<PreferenceSet> {
        if reuse && dir.join("manifest.json").exists() {
            return import_preferences(dir);
        }
        let cfg = &self.cfg.stage3;
        let scorer = ProxyScorer { weights: cfg.weights, use_reference: true };
        let set = build_preference_dataset(student, data.train(), self.codec().as_ref(), &scorer, cfg, self.seed())?;
        for i in &set.skipped {
            warn!("item {i}: all candidates scored the same; no preference pair");
        }
        if set.pairs.is_empty() {
            return Err(LabError::Core(vsrdistill_core::Error::Contract("no preference pairs could be formed".into())));
        }
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
        let shape = set.pairs[0].z_w.shape();
        export_preferences(dir, &set, shape, cfg.candidates, self.seed())?;
        Ok(set)
    }

    pub fn refine(&self, data: &Dataset, resume: Option<&Path>) -> LabResult<RefineOutcome> {
        self.save_config()?;
        let cfg = &self.cfg.stage3;
        let pref_dir = self.path("stage3/preferences");
        let (state, log, init) = match resume {
            Some(dir) => {
                let (s, l) = self.resume::<Stage3State>(dir, &dpo::LOG_COLUMNS)?;
                let init = s.reference.clone();
                (s, l, init)
            }
            None => {
                let init = self.require_model("stage2", "student", "run `distill-dual` first")?;
                (Stage3State::new(init.clone(), cfg), TrainLog::new(&dpo::LOG_COLUMNS), init)
            }
        };
        let set = self.preferences(&init, data, &pref_dir, resume.is_some())?;
        let seed = self.seed();
        let margin_before = mean_inner_margin(&init, &init, &set.pairs, cfg, seed)?;
        let (state, log) = self.drive(state, log, cfg.iterations, |s| s.step(cfg, &set.pairs, seed))?;
        let margin_after = mean_inner_margin(&state.student, &state.reference, &set.pairs, cfg, seed)?;
        let table = table_csv(
            &["mean inner margin on the training preference pairs, one fixed (t, eps) draw per pair".into()],
            &["pairs", "skipped", "margin_before", "margin_after"],
            vec![vec![set.pairs.len().to_string(), set.skipped.len().to_string(), margin_before.to_string(), margin_after.to_string()]],
        );
        write_text(&self.path("stage3/margin.csv"), &table)?;
        Ok(RefineOutcome { student: state.student, log, pairs: set.pairs.len(), skipped: set.skipped.len(), margin_before, margin_after })
    }

    /// Models available under the output root, in pipeline order.
    pub fn available_models(&self) -> LabResult<Vec<(String, Option<DenoiserParams>, Option<(usize, f64)>)>> {
        let mut out: Vec<(String, Option<DenoiserParams>, Option<(usize, f64)>)> = vec![("upscaled".into(), None, None)];
        let e = &self.cfg.eval;
        if let Ok(t) = self.teacher() {
            out.push((format!("teacher_{}step", e.teacher_steps), Some(t), Some((e.teacher_steps, e.teacher_guidance))));
        }
        for stage in ["stage1", "stage2", "stage3"] {
            let dir = final_dir(&self.path(stage));
            if checkpoint_exists(&dir) {
                out.push((format!("{stage}_onestep"), Some(load_model(&dir, "student")?), None));
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, data: &Dataset, split: Split) -> LabResult<Vec<MetricsReport>> {
        let pairs = data.split(split);
        let codec = self.codec();
        let mut reports = Vec::new();
        for (label, model, multi) in self.available_models()? {
            let sampler = match (&model, multi) {
                (None, _) => Sampler::Upscaled,
                (Some(p), Some((steps, guidance))) => Sampler::MultiStep { params: p, steps, guidance },
                (Some(p), None) => Sampler::OneStep(p),
            };
            let r = evaluate_model(&label, sampler, pairs, codec.as_ref(), self.seed())?;
            info!("{} {}: psnr {:.3} ssim {:.4} warp {:.4} hf {:.3}", split_name(split), label, r.psnr, r.ssim, r.warp, r.hf_ratio);
            reports.push(r);
        }
        let name = split_name(split);
        write_text(&self.path(&format!("eval/{name}_summary.csv")), &metrics_summary_csv(&reports))?;
        write_text(&self.path(&format!("eval/{name}_items.csv")), &metrics_items_csv(&reports))?;
        Ok(reports)
    }

    pub fn oracle_bench(&self) -> LabResult<OracleReport> {
        let r = gaussian_oracle_bench(&self.cfg.oracle)?;
        let mut rows: Vec<Vec<String>> = r
            .probes
            .iter()
            .map(|p| {
                vec![
                    "estimator".into(),
                    format!("mu={} sigma={} t={}", p.probe.mu, p.probe.sigma, p.probe.t),
                    format!("{:.6e}", p.rel_error),
                    format!("{:.6}", p.cosine),
                    format!("{:?} vs {:?}", p.estimate, p.oracle),
                ]
            })
            .collect();
        rows.push(vec!["score_identity".into(), format!("{} points", self.cfg.oracle.grid_points), format!("{:.3e}", r.score_max_rel_error), String::new(), String::new()]);
        rows.push(vec!["matched_point".into(), "mu=0 sigma=1 t=0.5".into(), String::new(), String::new(), format!("{:?}", r.matched_estimate)]);
        rows.push(vec!["gradient_flow".into(), format!("{} steps", self.cfg.oracle.flow_steps), String::new(), String::new(), format!("{:?}", r.flow_final)]);
        let verdict = |b: bool| if b { "pass" } else { "FAIL" };
        let comments = vec![format!(
            "score {} | estimator {} | cosine {} | flow {}",
            verdict(r.score_pass),
            verdict(r.estimator_pass),
            verdict(r.cosine_pass),
            verdict(r.flow_pass)
        )];
        write_text(&self.path("oracle/report.csv"), &table_csv(&comments, &["check", "point", "rel_error", "cosine", "values"], rows))?;
        Ok(r)
    }

    pub fn run_all(&self) -> LabResult<PipelineSummary> {
        let data = self.data_or_make()?;
        self.pretrain(&data, None)?;
        self.distill_init(&data, None)?;
        self.distill_dual(&data, None, false)?;
        let refine = self.refine(&data, None)?;
        let val = self.evaluate(&data, Split::Val)?;
        let test = self.evaluate(&data, Split::Test)?;
        Ok(PipelineSummary { val, test, refine })
    }
}

/// One row of an ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub flags: Vec<bool>,
    pub report: MetricsReport,
}

impl AblationRow {
    /// Distance of the HF-energy ratio from that of the HR clips; lower reads
    /// as "more natural detail" in the proxy.
    pub fn hf_gap(&self) -> f64 {
        (1.0 - self.report.hf_ratio).abs()
    }
}

#[derive(Debug, Clone)]
pub struct StabilityRow {
    pub seed: u64,
    pub init: &'static str,
    pub stats: TraceStats,
    pub trace: Vec<f64>,
}

fn ablation_csv(comments: Vec<String>, flag_names: &[&str], rows: &[AblationRow]) -> String {
    let mut header = vec!["exp"];
    header.extend_from_slice(flag_names);
    header.extend_from_slice(&["psnr", "ssim", "warp", "hf_ratio", "hf_gap"]);
    let body = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.label.clone()];
            v.extend(r.flags.iter().map(|f| if *f { "x".to_string() } else { String::new() }));
            v.extend([r.report.psnr, r.report.ssim, r.report.warp, r.report.hf_ratio, r.hf_gap()].iter().map(|x| x.to_string()));
            v
        })
        .collect();
    table_csv(&comments, &header, body)
}

impl Lab {
    fn eval_one(&self, label: &str, student: &DenoiserParams, pairs: &[VideoPair]) -> LabResult<MetricsReport> {
        Ok(evaluate_model(label, Sampler::OneStep(student), pairs, self.codec().as_ref(), self.seed())?)
    }

    /// Stage on/off grid: base teacher, (a) I, (b) I+II, (c) II+III from the
    /// raw teacher, (d) I+II+III. Uses the pipeline's final checkpoints and
    /// trains the (c) branch under `<out>/ablate/raw_init`.
    pub fn ablate_three_stage(&self, data: &Dataset) -> LabResult<Vec<AblationRow>> {
        let hint = "run the full pipeline first";
        let teacher = self.teacher()?;
        let s1 = self.require_model("stage1", "student", hint)?;
        let s2 = self.require_model("stage2", "student", hint)?;
        let s3 = self.require_model("stage3", "student", hint)?;
        let items = self.train_items(data)?;
        let val = data.split(Split::Val);
        let codec = self.codec();

        let raw_dir = self.path("ablate/raw_init");
        let raw_meta = self.meta();
        let c_final = final_dir(&raw_dir.join("stage3"));
        let c_student = if checkpoint_exists(&c_final) {
            load_model(&c_final, "student")?
        } else {
            info!("ablation (c): stage 2 from the raw teacher");
            let (st2, _) = run_stage2(&teacher, &teacher, &self.cfg.stage2, &items, self.seed())?;
            let set = self.preferences(&st2.student, data, &raw_dir.join("preferences"), false)?;
            let (st3, _) = dpo::run_stage3(&st2.student, &set.pairs, &self.cfg.stage3, self.seed())?;
            save_checkpoint(&c_final, &st3, &raw_meta, None)?;
            st3.student
        };

        let e = &self.cfg.eval;
        let base = evaluate_model(
            "base",
            Sampler::MultiStep { params: &teacher, steps: e.teacher_steps, guidance: e.teacher_guidance },
            val,
            codec.as_ref(),
            self.seed(),
        )?;
        let rows = vec![
            AblationRow { label: "base".into(), flags: vec![false, false, false], report: base },
            AblationRow { label: "(a)".into(), flags: vec![true, false, false], report: self.eval_one("(a)", &s1, val)? },
            AblationRow { label: "(b)".into(), flags: vec![true, true, false], report: self.eval_one("(b)", &s2, val)? },
            AblationRow { label: "(c)".into(), flags: vec![false, true, true], report: self.eval_one("(c)", &c_student, val)? },
            AblationRow { label: "(d)".into(), flags: vec![true, true, true], report: self.eval_one("(d)", &s3, val)? },
        ];
        let comments = vec![
            "stage on/off grid on the validation split; base = multi-step teacher".to_string(),
            "claim: \"the Trajectory-Preserving Distillation (Stage I) provides a strong initialization that stabilizes subsequent training\"".into(),
        ];
        write_text(&self.path("ablate/three_stage.csv"), &ablation_csv(comments, &["I", "II", "III"], &rows))?;
        Ok(rows)
    }

    /// Stage-2 variants from the stage-1 student at `ablation.stage2_iterations`:
    /// joint dual-stream, DMD only, GAN only, sequential DMD then GAN.
    pub fn ablate_streams(&self, data: &Dataset) -> LabResult<Vec<AblationRow>> {
        let teacher = self.teacher()?;
        let init = self.require_model("stage1", "student", "run `distill-init` first")?;
        let items = self.train_items(data)?;
        let val = data.split(Split::Val);
        let base = Stage2Config { iterations: self.cfg.ablation.stage2_iterations, ..self.cfg.stage2.clone() };
        let mut rows = vec![AblationRow { label: "stage1_only".into(), flags: vec![false, false, false], report: self.eval_one("stage1_only", &init, val)? }];
        for (label, mode) in [("dmd_only", StreamMode::DmdOnly), ("gan_only", StreamMode::GanOnly), ("dual_joint", StreamMode::Dual)] {
            info!("ablation: {label}");
            let cfg = Stage2Config { mode, ..base.clone() };
            let (st, _) = run_stage2(&init, &teacher, &cfg, &items, self.seed())?;
            let flags = vec![mode != StreamMode::GanOnly, mode != StreamMode::DmdOnly, false];
            rows.push(AblationRow { label: label.into(), flags, report: self.eval_one(label, &st.student, val)? });
        }
        info!("ablation: sequential");
        let (st, _) = run_stage2_sequential(&init, &teacher, &base, &items, self.seed())?;
        rows.push(AblationRow { label: "sequential".into(), flags: vec![true, true, true], report: self.eval_one("sequential", &st.student, val)? });
        let comments = vec![
            format!("stage-2 variants at {} iterations from the stage-1 student; hf_gap = |1 - hf_ratio|, lower is better", base.iterations),
            "claim: \"the Dual-Stream configuration enables them to play complementary roles, achieving notably better performance across all perceptual metrics\"".into(),
            "claim: \"joint optimization allows the two objectives to interact more effectively during training\"".into(),
        ];
        write_text(&self.path("ablate/streams.csv"), &ablation_csv(comments, &["dmd", "gan", "sequential"], &rows))?;
        Ok(rows)
    }

    /// Student gradient-norm statistics of stage 2 with and without stage-1
    /// initialization, per seed.
    pub fn ablate_stability(&self, data: &Dataset) -> LabResult<Vec<StabilityRow>> {
        let teacher = self.teacher()?;
        let init = self.require_model("stage1", "student", "run `distill-init` first")?;
        let items = self.train_items(data)?;
        let cfg = Stage2Config { iterations: self.cfg.ablation.stability_iterations, ..self.cfg.stage2.clone() };
        let mut rows = Vec::new();
        for &seed in &self.cfg.ablation.stability_seeds {
            let mut pair = Vec::new();
            for (name, start) in [("stage1", &init), ("raw", &teacher)] {
                info!("stability: seed {seed}, {name} init");
                let (_, log) = run_stage2(start, &teacher, &cfg, &items, seed)?;
                pair.push((name, log.series("student_grad_norm", |p| p == "student")));
            }
            let rep = stability_diagnostic(&pair[0].1, &pair[1].1)?;
            for ((name, trace), stats) in pair.into_iter().zip([rep.a, rep.b]) {
                rows.push(StabilityRow { seed, init: name, stats, trace });
            }
        }
        let body = rows
            .iter()
            .map(|r| {
                let s = r.stats;
                vec![r.seed.to_string(), r.init.to_string(), s.len.to_string(), s.mean.to_string(), s.variance.to_string(), s.median.to_string(), s.max_over_median.to_string()]
            })
            .collect();
        let comments = vec![
            format!("pre-clip student gradient norms over {} stage-2 iterations; diagnostic only", cfg.iterations),
            "claim: \"more stable loss and gradient norm trends during the second-stage distillation\"".into(),
        ];
        write_text(
            &self.path("ablate/stability.csv"),
            &table_csv(&comments, &["seed", "init", "updates", "mean", "variance", "median", "max_over_median"], body),
        )?;
        let series: Vec<(String, Vec<f64>)> = rows.iter().map(|r| (format!("seed {} {}", r.seed, r.init), r.trace.clone())).collect();
        plot::line_plot(&self.path("plots/stability_grad_norm.png"), "stage-2 student gradient norm", "pre-clip norm", &series)?;
        Ok(rows)
    }
}

impl Lab {
    /// Figures from whatever exists under the output root: stage curves, the
    /// validation PSNR/HF bars and temporal profiles of the first test clip.
    pub fn plot(&self) -> LabResult<Vec<PathBuf>> {
        let dir = self.path("plots");
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut written = Vec::new();
        for (stage, cols) in [("stage0", &pgd::LOG_COLUMNS[..]), ("stage1", &pgd::LOG_COLUMNS[..]), ("stage2", &dual::LOG_COLUMNS[..]), ("stage3", &dpo::LOG_COLUMNS[..])] {
            let path = self.path(&format!("{stage}/log.csv"));
            if let Ok(text) = std::fs::read_to_string(&path) {
                written.extend(plot::log_figures(&dir, stage, &log_from_csv(&text, cols, &path)?)?);
            }
        }
        let summary = self.path("eval/val_summary.csv");
        if summary.exists() {
            let text = std::fs::read_to_string(&summary).map_err(io_err(&summary))?;
            let bars = read_summary_psnr(&text, &summary)?;
            let p = dir.join("val_psnr.png");
            plot::bar_plot(&p, "validation PSNR", "dB", &bars)?;
            written.push(p);
        }
        if self.path("data/manifest.json").exists() {
            let data = self.load_data()?;
            if let Some(pair) = data.split(Split::Test).first() {
                let line = Line::Row(pair.hr.shape().height / 2);
                let mut panels = vec![("hr".to_string(), temporal_profile(&pair.hr, line)?), ("lr_up".to_string(), temporal_profile(&pair.lr_up, line)?)];
                let codec = self.codec();
                let eps = normal_video(codec.latent_shape(pair.hr.shape()), &mut prng(self.seed(), Stream::Eval, 0));
                for (label, model, multi) in self.available_models()? {
                    let Some(p) = &model else { continue };
                    let sampler = match multi {
                        Some((steps, guidance)) => Sampler::MultiStep { params: p, steps, guidance },
                        None => Sampler::OneStep(p),
                    };
                    let out = restore(sampler, pair, codec.as_ref(), eps.clone())?;
                    panels.push((label, temporal_profile(&out, line)?));
                }
                let p = dir.join("test_profile.png");
                plot::profile_strip(&p, &panels)?;
                written.push(p);
            }
        }
        Ok(written)
    }
}
