//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json      stage tag, iteration, seed, config hash, model
//!                          configs, optimizer steps, counters, array index
//! <dir>/arrays/NNNNN.bin   one flat array per entry, f64 little-endian
//! <dir>/log.csv            training log up to `iteration`
//! ```
//!
//! Every random draw of a stage is derived from `(seed, iteration)`, so the
//! pair recorded in the manifest is the complete RNG state.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vsrdistill_core::denoiser::{DenoiserConfig, DenoiserParams};
use vsrdistill_core::dpo::Stage3State;
use vsrdistill_core::dual::DualStreamState;
use vsrdistill_core::heads::{DiscriminatorHeads, HeadConfig};
use vsrdistill_core::params::{Adam, AdamConfig, ParamSet};
use vsrdistill_core::pgd::{Stage0State, Stage1State};

use crate::error::{format_err, io_err, LabError, LabResult};

pub const FORMAT: &str = "vsrdistill-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub group: String,
    pub name: String,
    pub dtype: String,
    pub endian: String,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub config: AdamConfig,
    pub step: u64,
    /// Parameter group whose layout the moment buffers follow.
    pub params: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub next_iteration: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub stage: String,
    pub iteration: u64,
    pub rng: RngState,
    pub config_hash: String,
    /// Iteration counts come from the scaled desk defaults unless overridden.
    pub scaled: bool,
    pub models: BTreeMap<String, DenoiserConfig>,
    pub heads: Option<HeadConfig>,
    pub optimizers: BTreeMap<String, OptimizerEntry>,
    pub counters: BTreeMap<String, u64>,
    pub arrays: Vec<ArrayEntry>,
}

/// In-memory content of a checkpoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parts {
    pub models: BTreeMap<String, DenoiserParams>,
    pub heads: Option<DiscriminatorHeads>,
    pub optimizers: BTreeMap<String, (String, Adam)>,
    pub counters: BTreeMap<String, u64>,
}

impl Parts {
    fn model(&mut self, key: &str) -> LabResult<DenoiserParams> {
        self.models.remove(key).ok_or_else(|| missing_part(key))
    }

    fn optimizer(&mut self, key: &str) -> LabResult<Adam> {
        self.optimizers.remove(key).map(|(_, a)| a).ok_or_else(|| missing_part(key))
    }

    fn counter(&self, key: &str) -> LabResult<u64> {
        self.counters.get(key).copied().ok_or_else(|| missing_part(key))
    }
}

fn missing_part(key: &str) -> LabError {
    format_err("manifest.json", format!("checkpoint has no `{key}` entry"))
}

/// Training states that can be written to and restored from a checkpoint.
pub trait Checkpointable: Sized {
    const STAGE: &'static str;
    fn iteration(&self) -> u64;
    fn to_parts(&self) -> Parts;
    fn from_parts(parts: Parts) -> LabResult<Self>;
}

fn with_model(p: &mut Parts, key: &str, m: &DenoiserParams) {
    p.models.insert(key.into(), m.clone());
}

fn with_opt(p: &mut Parts, key: &str, params: &str, a: &Adam) {
    p.optimizers.insert(key.into(), (params.into(), a.clone()));
}

impl Checkpointable for Stage0State {
    const STAGE: &'static str = "stage0";

    fn iteration(&self) -> u64 {
        self.iteration
    }

    fn to_parts(&self) -> Parts {
        let mut p = Parts::default();
        with_model(&mut p, "teacher", &self.params);
        with_opt(&mut p, "teacher", "teacher", &self.opt);
        p.counters.insert("iteration".into(), self.iteration);
        p
    }

    fn from_parts(mut p: Parts) -> LabResult<Self> {
        Ok(Self { params: p.model("teacher")?, opt: p.optimizer("teacher")?, iteration: p.counter("iteration")? })
    }
}

impl Checkpointable for Stage1State {
    const STAGE: &'static str = "stage1";

    fn iteration(&self) -> u64 {
        self.iteration
    }

    fn to_parts(&self) -> Parts {
        let mut p = Parts::default();
        with_model(&mut p, "student", &self.student);
        with_model(&mut p, "teacher", &self.teacher);
        with_opt(&mut p, "student", "student", &self.opt);
        p.counters.insert("iteration".into(), self.iteration);
        p.counters.insert("refreshes".into(), self.refreshes);
        p
    }

    fn from_parts(mut p: Parts) -> LabResult<Self> {
        Ok(Self {
            student: p.model("student")?,
            teacher: p.model("teacher")?,
            opt: p.optimizer("student")?,
            iteration: p.counter("iteration")?,
            refreshes: p.counter("refreshes")?,
        })
    }
}

impl Checkpointable for DualStreamState {
    const STAGE: &'static str = "stage2";

    fn iteration(&self) -> u64 {
        self.iteration
    }

    fn to_parts(&self) -> Parts {
        let mut p = Parts::default();
        with_model(&mut p, "student", &self.student);
        with_model(&mut p, "real", &self.real);
        with_model(&mut p, "fake", &self.fake);
        p.heads = Some(self.heads.clone());
        with_opt(&mut p, "student", "student", &self.opt_student);
        with_opt(&mut p, "fake", "fake", &self.opt_fake);
        with_opt(&mut p, "heads", "heads", &self.opt_heads);
        p.counters.insert("iteration".into(), self.iteration);
        p.counters.insert("aux_updates".into(), self.aux_updates);
        p.counters.insert("student_updates".into(), self.student_updates);
        p
    }

    fn from_parts(mut p: Parts) -> LabResult<Self> {
        Ok(Self {
            student: p.model("student")?,
            real: p.model("real")?,
            fake: p.model("fake")?,
            heads: p.heads.take().ok_or_else(|| missing_part("heads"))?,
            opt_student: p.optimizer("student")?,
            opt_fake: p.optimizer("fake")?,
            opt_heads: p.optimizer("heads")?,
            iteration: p.counter("iteration")?,
            aux_updates: p.counter("aux_updates")?,
            student_updates: p.counter("student_updates")?,
        })
    }
}

impl Checkpointable for Stage3State {
    const STAGE: &'static str = "stage3";

    fn iteration(&self) -> u64 {
        self.iteration
    }

    fn to_parts(&self) -> Parts {
        let mut p = Parts::default();
        with_model(&mut p, "student", &self.student);
        with_model(&mut p, "reference", &self.reference);
        with_opt(&mut p, "student", "student", &self.opt);
        p.counters.insert("iteration".into(), self.iteration);
        p
    }

    fn from_parts(mut p: Parts) -> LabResult<Self> {
        Ok(Self {
            student: p.model("student")?,
            reference: p.model("reference")?,
            opt: p.optimizer("student")?,
            iteration: p.counter("iteration")?,
        })
    }
}

/// A bare model, as handed from one stage to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct Model(pub DenoiserParams);

impl Checkpointable for Model {
    const STAGE: &'static str = "model";

    fn iteration(&self) -> u64 {
        0
    }

    fn to_parts(&self) -> Parts {
        let mut p = Parts::default();
        with_model(&mut p, "model", &self.0);
        p
    }

    fn from_parts(mut p: Parts) -> LabResult<Self> {
        Ok(Self(p.model("model")?))
    }
}

/// Header fields that are not part of the state itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Meta {
    pub seed: u64,
    pub config_hash: String,
    pub scaled: bool,
}

fn write_array(dir: &Path, entries: &mut Vec<ArrayEntry>, group: &str, name: &str, shape: (usize, usize), data: &[f64]) -> LabResult<()> {
    let file = format!("arrays/{:05}.bin", entries.len());
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join(&file);
    fs::write(&path, bytes).map_err(io_err(&path))?;
    entries.push(ArrayEntry {
        group: group.into(),
        name: name.into(),
        dtype: "f64".into(),
        endian: "little".into(),
        shape: [shape.0, shape.1],
        file,
    });
    Ok(())
}

fn write_set(dir: &Path, entries: &mut Vec<ArrayEntry>, group: &str, set: &ParamSet) -> LabResult<()> {
    for (name, shape, data) in set.iter() {
        write_array(dir, entries, group, name, shape, data)?;
    }
    Ok(())
}

fn write_moments(dir: &Path, entries: &mut Vec<ArrayEntry>, group: &str, layout: &ParamSet, buf: &[Vec<f64>]) -> LabResult<()> {
    for (i, (name, shape, _)) in layout.iter().enumerate() {
        write_array(dir, entries, group, name, shape, &buf[i])?;
    }
    Ok(())
}

/// Writes `state` to `dir`, replacing any previous checkpoint there. The
/// directory is assembled next to the target and renamed into place.
pub fn save_checkpoint<S: Checkpointable>(dir: &Path, state: &S, meta: &Meta, log_csv: Option<&str>) -> LabResult<()> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir_all(tmp.join("arrays")).map_err(io_err(&tmp))?;
    let parts = state.to_parts();
    let mut arrays = Vec::new();
    for (key, m) in &parts.models {
        write_set(&tmp, &mut arrays, key, &m.set)?;
    }
    if let Some(h) = &parts.heads {
        write_set(&tmp, &mut arrays, "heads", &h.set)?;
    }
    let mut optimizers = BTreeMap::new();
    for (key, (params, adam)) in &parts.optimizers {
        let layout = layout_of(&parts, params).ok_or_else(|| missing_part(params))?;
        write_moments(&tmp, &mut arrays, &format!("{key}.adam_m"), layout, &adam.m)?;
        write_moments(&tmp, &mut arrays, &format!("{key}.adam_v"), layout, &adam.v)?;
        optimizers.insert(key.clone(), OptimizerEntry { config: adam.config, step: adam.step, params: params.clone() });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        format_version: FORMAT_VERSION,
        stage: S::STAGE.into(),
        iteration: state.iteration(),
        rng: RngState { seed: meta.seed, next_iteration: state.iteration() },
        config_hash: meta.config_hash.clone(),
        scaled: meta.scaled,
        models: parts.models.iter().map(|(k, m)| (k.clone(), m.config.clone())).collect(),
        heads: parts.heads.as_ref().map(|h| h.config.clone()),
        optimizers,
        counters: parts.counters.clone(),
        arrays,
    };
    let mpath = tmp.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&mpath))?;
    if let Some(text) = log_csv {
        let lpath = tmp.join("log.csv");
        fs::write(&lpath, text).map_err(io_err(&lpath))?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io_err(dir))
}

fn layout_of<'a>(parts: &'a Parts, group: &str) -> Option<&'a ParamSet> {
    if group == "heads" {
        parts.heads.as_ref().map(|h| &h.set)
    } else {
        parts.models.get(group).map(|m| &m.set)
    }
}

pub fn read_manifest(dir: &Path) -> LabResult<Manifest> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(LabError::Missing { path: mpath, hint: "not a checkpoint directory".into() });
    }
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| format_err(&mpath, e))?;
    if m.format != FORMAT || m.format_version != FORMAT_VERSION {
        return Err(format_err(&mpath, format!("format {} v{} is not {FORMAT} v{FORMAT_VERSION}", m.format, m.format_version)));
    }
    Ok(m)
}

fn read_array(dir: &Path, e: &ArrayEntry) -> LabResult<Vec<f64>> {
    let path = dir.join(&e.file);
    if e.dtype != "f64" || e.endian != "little" {
        return Err(format_err(&path, format!("unsupported dtype {} / {}", e.dtype, e.endian)));
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let n = e.shape[0] * e.shape[1];
    if bytes.len() != n * 8 {
        return Err(format_err(&path, format!("expected {} bytes for shape {:?}, found {}", n * 8, e.shape, bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Loaded checkpoint: manifest, state and the saved log text if any.
pub struct Loaded<S> {
    pub manifest: Manifest,
    pub state: S,
    pub log_csv: Option<String>,
}

pub fn load_checkpoint<S: Checkpointable>(dir: &Path) -> LabResult<Loaded<S>> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join("manifest.json");
    if manifest.stage != S::STAGE {
        return Err(format_err(&mpath, format!("checkpoint holds stage `{}`, expected `{}`", manifest.stage, S::STAGE)));
    }
    let mut groups: BTreeMap<String, ParamSet> = BTreeMap::new();
    for e in &manifest.arrays {
        let data = read_array(dir, e)?;
        groups.entry(e.group.clone()).or_default().push(e.name.clone(), e.shape[0], e.shape[1], data);
    }
    let mut take = |g: &str| groups.remove(g).ok_or_else(|| format_err(&mpath, format!("no arrays for group `{g}`")));
    let mut parts = Parts { counters: manifest.counters.clone(), ..Parts::default() };
    for (key, config) in &manifest.models {
        let set = take(key)?;
        let expected = vsrdistill_core::denoiser::init_params(config, 0)?;
        if !set.same_layout(&expected.set) {
            return Err(format_err(&mpath, format!("arrays of `{key}` do not match its model config")));
        }
        parts.models.insert(key.clone(), DenoiserParams { config: config.clone(), set });
    }
    if let Some(hc) = manifest.heads.clone() {
        let set = take("heads")?;
        let expected = vsrdistill_core::heads::init_heads(&hc, 0)?;
        if !set.same_layout(&expected.set) {
            return Err(format_err(&mpath, "head arrays do not match the head config"));
        }
        parts.heads = Some(DiscriminatorHeads { config: hc, set });
    }
    for (key, o) in &manifest.optimizers {
        let m = take(&format!("{key}.adam_m"))?;
        let v = take(&format!("{key}.adam_v"))?;
        let layout = layout_of(&parts, &o.params).ok_or_else(|| missing_part(&o.params))?;
        if !m.same_layout(layout) || !v.same_layout(layout) {
            return Err(format_err(&mpath, format!("optimizer `{key}` does not match `{}`", o.params)));
        }
        let unpack = |s: &ParamSet| (0..s.len()).map(|i| s.array(i).to_vec()).collect();
        let adam = Adam { config: o.config, step: o.step, m: unpack(&m), v: unpack(&v) };
        parts.optimizers.insert(key.clone(), (o.params.clone(), adam));
    }
    if let Some(g) = groups.keys().next() {
        return Err(format_err(&mpath, format!("unreferenced array group `{g}`")));
    }
    let state = S::from_parts(parts)?;
    let lpath = dir.join("log.csv");
    let log_csv = if lpath.exists() { Some(fs::read_to_string(&lpath).map_err(io_err(&lpath))?) } else { None };
    Ok(Loaded { manifest, state, log_csv })
}

/// Writes a bare model checkpoint.
pub fn save_model(dir: &Path, model: &DenoiserParams, meta: &Meta) -> LabResult<()> {
    save_checkpoint(dir, &Model(model.clone()), meta, None)
}

/// Reads the model stored under `key` from any checkpoint, e.g. the student
/// of a finished stage.
pub fn load_model(dir: &Path, key: &str) -> LabResult<DenoiserParams> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join("manifest.json");
    let config = manifest.models.get(key).ok_or_else(|| format_err(&mpath, format!("no model `{key}`")))?;
    let mut set = ParamSet::new();
    for e in manifest.arrays.iter().filter(|e| e.group == key) {
        set.push(e.name.clone(), e.shape[0], e.shape[1], read_array(dir, e)?);
    }
    let expected = vsrdistill_core::denoiser::init_params(config, 0)?;
    if !set.same_layout(&expected.set) {
        return Err(format_err(&mpath, format!("arrays of `{key}` do not match its model config")));
    }
    Ok(DenoiserParams { config: config.clone(), set })
}

pub fn checkpoint_exists(dir: &Path) -> bool {
    dir.join("manifest.json").exists()
}

pub fn final_dir(stage_dir: &Path) -> PathBuf {
    stage_dir.join("final")
}

pub fn latest_dir(stage_dir: &Path) -> PathBuf {
    stage_dir.join("latest")
}
