//! Run-directory layout and persistence: lock file, config snapshot,
//! append-only history, checkpoints, and per-refresh uncertainty maps.
//!
//! Layout under the run root:
//!   .lock            held while a command runs
//!   config.json      resolved config snapshot; later commands must match it
//!   history.jsonl    one JSON object per training event
//!   checkpoints/epoch_{phase}_{NNNN}.ckpt
//!   maps/epoch_{NNNN}/{case_id}/{au,eu}.f32 + maps.json

use crate::config::RunConfig;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use u2ad_core::error::{Error, Result};
use u2ad_core::io::checkpoint::save_checkpoint;
use u2ad_core::io::maps::{save_maps, MapsManifest};
use u2ad_core::model::optim::Adam;
use u2ad_core::model::ModelParams;
use u2ad_core::trainer::{EpochRecord, RefreshSummary, TrainCase, TrainObserver};
use u2ad_core::uncertainty::{McConfig, UncertaintyMaps};

pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    /// Create or reopen a run directory: take the lock and check the config
    /// snapshot, writing it on first open.
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let root = cfg.io.run_dir.clone();
        fs::create_dir_all(&root)?;
        let lock = root.join(".lock");
        OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|_| {
            Error::precondition(format!(
                "run directory {} is locked; remove {} if no other process is using it",
                root.display(),
                lock.display()
            ))
        })?;
        let guard = RunDir { root, lock };
        let snap_path = guard.root.join("config.json");
        let current = serde_json::to_value(cfg)?;
        if snap_path.exists() {
            let prior: serde_json::Value = serde_json::from_slice(&fs::read(&snap_path)?)?;
            if prior != current {
                return Err(Error::precondition(format!(
                    "run directory {} holds a different config snapshot",
                    guard.root.display()
                )));
            }
        } else {
            fs::write(&snap_path, serde_json::to_vec_pretty(&current)?)?;
        }
        Ok(guard)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// One line of history.jsonl.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HistoryEntry {
    Epoch(EpochRecord),
    /// Maps recomputed for one case during adaptation.
    RefreshCase { epoch: usize, case_id: String, passes: usize },
    /// ROI-mean uncertainty after a refresh, averaged over the target set.
    RefreshSummary(RefreshSummary),
}

pub fn append_history(root: &Path, entry: &HistoryEntry) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(root.join("history.jsonl"))?;
    file.write_all(serde_json::to_string(entry)?.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

/// All parseable history lines, in file order. An interrupted run that was
/// restarted may repeat (phase, epoch) keys; readers keep the last.
pub fn read_history(root: &Path) -> Result<Vec<HistoryEntry>> {
    let path = root.join("history.jsonl");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::precondition(format!("history missing at {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn checkpoint_path(root: &Path, phase: &str, epoch: usize) -> PathBuf {
    root.join("checkpoints").join(format!("epoch_{phase}_{epoch:04}.ckpt"))
}

/// Highest-epoch checkpoint of the given phase, if any.
pub fn latest_checkpoint(root: &Path, phase: &str) -> Result<Option<(PathBuf, usize)>> {
    let dir = root.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(PathBuf, usize)> = None;
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_prefix("epoch_").and_then(|s| s.strip_suffix(".ckpt")) else {
            continue;
        };
        let Some((p, e)) = stem.rsplit_once('_') else { continue };
        let Ok(epoch) = e.parse::<usize>() else { continue };
        if p == phase && best.as_ref().is_none_or(|(_, b)| epoch > *b) {
            best = Some((path, epoch));
        }
    }
    Ok(best)
}

/// Observer that streams training events into the run directory.
pub struct PersistObserver<'a> {
    root: &'a Path,
    seed: u64,
    mc: McConfig,
}

impl<'a> PersistObserver<'a> {
    pub fn new(root: &'a Path, seed: u64, mc: McConfig) -> Self {
        PersistObserver { root, seed, mc }
    }
}

impl TrainObserver<f32> for PersistObserver<'_> {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        append_history(self.root, &HistoryEntry::Epoch(record.clone()))
    }

    fn on_refresh(
        &mut self,
        epoch: usize,
        case: &TrainCase<f32>,
        maps: &UncertaintyMaps<f32>,
        passes: usize,
    ) -> Result<()> {
        let (h, w) = maps.au.dim();
        let dir = self.root.join("maps").join(format!("epoch_{epoch:04}")).join(&case.id);
        let manifest = MapsManifest {
            height: h,
            width: w,
            k: self.mc.k,
            ratio: self.mc.ratio,
            seed: self.seed,
            passes,
        };
        save_maps(&dir, &maps.au, &maps.eu, &manifest)?;
        append_history(
            self.root,
            &HistoryEntry::RefreshCase { epoch, case_id: case.id.clone(), passes },
        )
    }

    fn on_stage_boundary(
        &mut self,
        epoch: usize,
        params: &ModelParams<f32>,
        opt: &Adam<f32>,
    ) -> Result<()> {
        let path = checkpoint_path(self.root, "adapt", epoch);
        save_checkpoint(&path, params, Some(opt), epoch as u64, "adapt", self.seed)
    }
}
