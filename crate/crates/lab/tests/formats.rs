use std::fs;
use std::path::Path;

use vsrdistill::checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpointable, Meta};
use vsrdistill::dataset_io::{export_dataset, export_preferences, import_dataset, import_preferences};
use vsrdistill::LabError;
use vsrdistill_core::data::{make_dataset, DatasetConfig, SceneRanges};
use vsrdistill_core::denoiser::{init_params, DenoiserConfig, DenoiserParams, IdentityCodec};
use vsrdistill_core::dpo::{build_preference_dataset, ProxyScorer, Stage3Config, Stage3State};
use vsrdistill_core::dual::{DualStreamState, Stage2Config};
use vsrdistill_core::params::AdamConfig;
use vsrdistill_core::pgd::{PDSchedule, Stage0Config, Stage0State, Stage1State};
use vsrdistill_core::rng::{normal_video, prng, Stream};
use vsrdistill_core::train::{encode_items, jitter, TrainItem};
use vsrdistill_core::{CondLabel, ConditionBundle, Shape};

const SHAPE: Shape = Shape::new(2, 4, 4, 1);

fn model(seed: u64) -> DenoiserParams {
    let mut p = init_params(&DenoiserConfig { num_classes: 4, ..DenoiserConfig::tiny() }, seed).unwrap();
    jitter(&mut p.set, 0.05, seed);
    p
}

fn items() -> Vec<TrainItem> {
    (0..3)
        .map(|i| {
            let mut rng = prng(i, Stream::Eval, 8);
            TrainItem { z_hr: normal_video(SHAPE, &mut rng), cond: ConditionBundle::new(normal_video(SHAPE, &mut rng), CondLabel::Class(i as u32 % 2)) }
        })
        .collect()
}

fn meta() -> Meta {
    Meta { seed: 4, config_hash: "abc".into(), scaled: false }
}

/// Steps `a` to `k`, checkpoints, steps both the original and the reloaded
/// copy to `n`, and requires the two to agree bitwise.
fn round_trip<S>(mut a: S, k: usize, n: usize, mut step: impl FnMut(&mut S) -> f64)
where
    S: Checkpointable + PartialEq + std::fmt::Debug,
{
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    for _ in 0..k {
        step(&mut a);
    }
    save_checkpoint(&ck, &a, &meta(), Some("iteration,phase\n")).unwrap();
    let loaded = load_checkpoint::<S>(&ck).unwrap();
    assert_eq!(loaded.state, a, "{}", S::STAGE);
    assert_eq!(loaded.manifest.iteration, k as u64);
    assert_eq!(loaded.manifest.rng.seed, 4);
    assert_eq!(loaded.log_csv.as_deref(), Some("iteration,phase\n"));
    let mut b = loaded.state;
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    for _ in k..n {
        la.push(step(&mut a).to_bits());
        lb.push(step(&mut b).to_bits());
    }
    assert_eq!(la, lb);
    assert_eq!(a, b);
}

#[test]
fn every_stage_state_round_trips_and_resumes() {
    let train = items();
    let cfg0 = Stage0Config { batch: 2, ..Default::default() };
    round_trip(Stage0State::new(model(1), &cfg0), 3, 6, |s| s.step(&cfg0, &train, 2).unwrap().values[0]);

    let sched = PDSchedule { start_steps: 4, cfg_iterations: 2, iterations_per_phase: 3, teacher_refresh_interval: 2, batch: 1, ..Default::default() };
    round_trip(Stage1State::new(model(1), &sched), 4, 8, |s| s.step(&sched, &train, 2).unwrap().values[0]);

    let cfg2 = Stage2Config { batch: 1, head_hidden: 4, ..Default::default() };
    let s2 = DualStreamState::new(model(2), &model(1), &cfg2, 0).unwrap();
    round_trip(s2, 5, 9, |s| {
        let r = s.step(&cfg2, &train, 2).unwrap();
        r.values.iter().copied().filter(|v| v.is_finite()).sum()
    });

    let cfg3 = Stage3Config { batch: 1, pairs_total: 3, candidates: 3, adam: AdamConfig { lr: 1e-3, ..Default::default() }, ..Default::default() };
    let scene = SceneRanges { size: (2, 3), max_speed: 1, ..Default::default() };
    let data = make_dataset(5, &DatasetConfig { shape: SHAPE, scene, val: 1, test: 1, ..Default::default() }, 0).unwrap();
    let scorer = ProxyScorer { weights: cfg3.weights, use_reference: true };
    let set = build_preference_dataset(&model(2), data.train(), &IdentityCodec, &scorer, &cfg3, 0).unwrap();
    round_trip(Stage3State::new(model(2), &cfg3), 2, 5, |s| s.step(&cfg3, &set.pairs, 2).unwrap().values[0]);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    let cfg0 = Stage0Config::default();
    save_checkpoint(&ck, &Stage0State::new(model(1), &cfg0), &meta(), None).unwrap();
    assert!(!dir.path().join("ck.partial").exists());

    let m = read_manifest(&ck).unwrap();
    assert_eq!(m.stage, "stage0");
    assert!(m.arrays.iter().all(|a| a.dtype == "f64" && a.endian == "little"));
    // Wrong stage type.
    assert!(matches!(load_checkpoint::<Stage1State>(&ck), Err(LabError::Format { .. })));

    let blob = ck.join(&m.arrays[0].file);
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint::<Stage0State>(&ck), Err(LabError::Format { .. })));
    fs::write(&blob, &bytes).unwrap();
    load_checkpoint::<Stage0State>(&ck).unwrap();

    let mpath = ck.join("manifest.json");
    let text = fs::read_to_string(&mpath).unwrap();
    fs::write(&mpath, text.replacen("\"format\"", "\"extra\": 1, \"format\"", 1)).unwrap();
    assert!(matches!(load_checkpoint::<Stage0State>(&ck), Err(LabError::Format { .. })));

    assert!(matches!(load_checkpoint::<Stage0State>(Path::new("/nonexistent/ck")), Err(LabError::Missing { .. })));
}

#[test]
fn dataset_and_preferences_round_trip() {
    let cfg = DatasetConfig { shape: Shape::new(2, 8, 8, 3), val: 1, test: 1, ..Default::default() };
    let data = make_dataset(5, &cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(dir.path(), &data, &cfg, 3).unwrap();
    let (back, m) = import_dataset(dir.path()).unwrap();
    assert_eq!(back, data);
    assert_eq!((m.seed, &m.config), (3, &cfg));

    let mut model_cfg = DenoiserConfig::tiny();
    model_cfg.channels = 3;
    model_cfg.num_classes = 4;
    let student = init_params(&model_cfg, 1).unwrap();
    let s3 = Stage3Config { pairs_total: 3, candidates: 3, ..Default::default() };
    let scorer = ProxyScorer { weights: s3.weights, use_reference: true };
    let set = build_preference_dataset(&student, data.train(), &IdentityCodec, &scorer, &s3, 0).unwrap();
    let train = encode_items(data.train(), &IdentityCodec).unwrap();
    assert_eq!(train.len(), 3);
    let pdir = dir.path().join("prefs");
    export_preferences(&pdir, &set, cfg.shape, 3, 0).unwrap();
    assert_eq!(import_preferences(&pdir).unwrap(), set);
}
