//! Dataset and preference-set directories.
//!
//! ```text
//! <dir>/manifest.json        seed, config, per-item scene/degradation/split
//! <dir>/items/NNNNN_hr.bin   T x H x W x C, f64 little-endian
//! <dir>/items/NNNNN_lr.bin   bicubic-upscaled degraded input, same layout
//! ```
//!
//! Preference sets use the same layout with `pairs/NNNNN_{cond,w,l}.bin` and
//! per-pair scores in the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vsrdistill_core::data::{Dataset, DatasetConfig, DegradationDraw, SceneSpec, Split, VideoPair};
use vsrdistill_core::dpo::{PreferencePair, PreferenceSet};
use vsrdistill_core::{CondLabel, ConditionBundle, LatentVideo, Shape};

use crate::error::{format_err, io_err, LabError, LabResult};

pub const DATASET_FORMAT: &str = "vsrdistill-dataset";
pub const PREFERENCE_FORMAT: &str = "vsrdistill-preferences";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemEntry {
    pub index: usize,
    pub split: Split,
    pub scene: SceneSpec,
    pub draw: DegradationDraw,
    pub hr: String,
    pub lr_up: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub config: DatasetConfig,
    pub items: Vec<ItemEntry>,
}

fn write_video(dir: &Path, file: &str, v: &LatentVideo) -> LabResult<()> {
    let path = dir.join(file);
    let mut bytes = Vec::with_capacity(v.len() * 8);
    for x in v.as_slice() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&path, bytes).map_err(io_err(&path))
}

fn read_video(dir: &Path, file: &str, shape: Shape) -> LabResult<LatentVideo> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() != shape.numel() * 8 {
        return Err(format_err(&path, format!("expected {} bytes for {shape:?}, found {}", shape.numel() * 8, bytes.len())));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(LatentVideo::new(shape, data)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path) -> LabResult<T> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(LabError::Missing { path, hint: "run the producing command first".into() });
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| format_err(&path, e))
}

fn write_json<T: Serialize>(dir: &Path, value: &T) -> LabResult<()> {
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(value).expect("manifest serializes")).map_err(io_err(&path))
}

pub fn export_dataset(dir: &Path, data: &Dataset, cfg: &DatasetConfig, seed: u64) -> LabResult<()> {
    fs::create_dir_all(dir.join("items")).map_err(io_err(dir))?;
    let mut items = Vec::with_capacity(data.items.len());
    for (i, p) in data.items.iter().enumerate() {
        let hr = format!("items/{i:05}_hr.bin");
        let lr_up = format!("items/{i:05}_lr.bin");
        write_video(dir, &hr, &p.hr)?;
        write_video(dir, &lr_up, &p.lr_up)?;
        items.push(ItemEntry { index: i, split: data.split_of(i), scene: p.scene.clone(), draw: p.draw, hr, lr_up });
    }
    write_json(dir, &DatasetManifest { format: DATASET_FORMAT.into(), seed, config: cfg.clone(), items })
}

pub fn import_dataset(dir: &Path) -> LabResult<(Dataset, DatasetManifest)> {
    let m: DatasetManifest = read_json(dir)?;
    let mpath = dir.join("manifest.json");
    if m.format != DATASET_FORMAT {
        return Err(format_err(&mpath, format!("format `{}` is not {DATASET_FORMAT}", m.format)));
    }
    let shape = m.config.shape;
    let mut items = Vec::with_capacity(m.items.len());
    for (i, e) in m.items.iter().enumerate() {
        if e.index != i || e.scene.shape() != shape {
            return Err(format_err(&mpath, format!("item {i} is out of order or has the wrong shape")));
        }
        items.push(VideoPair { hr: read_video(dir, &e.hr, shape)?, lr_up: read_video(dir, &e.lr_up, shape)?, scene: e.scene.clone(), draw: e.draw });
    }
    let data = Dataset { items, val: m.config.val, test: m.config.test };
    if m.config.val + m.config.test >= data.items.len() || m.items.iter().any(|e| data.split_of(e.index) != e.split) {
        return Err(format_err(&mpath, "split assignment does not match the val/test counts"));
    }
    Ok((data, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub item: usize,
    pub label: CondLabel,
    pub score_w: f64,
    pub score_l: f64,
    pub cond: String,
    pub z_w: String,
    pub z_l: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceManifest {
    pub format: String,
    pub seed: u64,
    pub candidates: usize,
    pub shape: Shape,
    pub pairs: Vec<PairEntry>,
    pub skipped: Vec<usize>,
}

pub fn export_preferences(dir: &Path, set: &PreferenceSet, shape: Shape, candidates: usize, seed: u64) -> LabResult<()> {
    fs::create_dir_all(dir.join("pairs")).map_err(io_err(dir))?;
    let mut pairs = Vec::with_capacity(set.pairs.len());
    for (i, p) in set.pairs.iter().enumerate() {
        let e = PairEntry {
            item: p.item,
            label: p.cond.label,
            score_w: p.score_w,
            score_l: p.score_l,
            cond: format!("pairs/{i:05}_cond.bin"),
            z_w: format!("pairs/{i:05}_w.bin"),
            z_l: format!("pairs/{i:05}_l.bin"),
        };
        write_video(dir, &e.cond, &p.cond.lr_latent)?;
        write_video(dir, &e.z_w, &p.z_w)?;
        write_video(dir, &e.z_l, &p.z_l)?;
        pairs.push(e);
    }
    let m = PreferenceManifest { format: PREFERENCE_FORMAT.into(), seed, candidates, shape, pairs, skipped: set.skipped.clone() };
    write_json(dir, &m)
}

pub fn import_preferences(dir: &Path) -> LabResult<PreferenceSet> {
    let m: PreferenceManifest = read_json(dir)?;
    if m.format != PREFERENCE_FORMAT {
        return Err(format_err(dir.join("manifest.json"), format!("format `{}` is not {PREFERENCE_FORMAT}", m.format)));
    }
    let mut pairs = Vec::with_capacity(m.pairs.len());
    for e in &m.pairs {
        pairs.push(PreferencePair {
            item: e.item,
            cond: ConditionBundle::new(read_video(dir, &e.cond, m.shape)?, e.label),
            z_w: read_video(dir, &e.z_w, m.shape)?,
            z_l: read_video(dir, &e.z_l, m.shape)?,
            score_w: e.score_w,
            score_l: e.score_l,
        });
    }
    Ok(PreferenceSet { pairs, skipped: m.skipped })
}
