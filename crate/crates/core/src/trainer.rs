//! Pretraining and two-stage uncertainty-guided adaptation.
//!
//! Pretraining fits the model on healthy cases with uniformly random mask
//! plans. Adaptation runs on the target set in two stages: stage 1 biases
//! masking toward high-EU patches, stage 2 pins the patches of the top AU
//! components visible so suspected anomalies are never reconstruction targets.
//! Uncertainty maps are refreshed at stage entry and every `refresh_every`
//! epochs within a stage, and are always computed on the un-augmented image.
//!
//! Every random draw comes from a stream keyed by (phase, epoch, case), so
//! training can resume from a stage-boundary snapshot and reproduce the
//! remaining history bit for bit.

use crate::error::{Error, Result};
use crate::model::optim::{lr_at_epoch, train_step, Adam, BatchItem, OptimConfig};
use crate::model::{ModelConfig, ModelParams};
use crate::patching::{
    au_exclusion_plan, build_patch_grid, eu_guided_plan, random_mask_plan, MaskPlan, PatchGrid,
};
use crate::phantom::{augment, CaseRecord};
use crate::rng::{stream, tag};
use crate::scalar::Scalar;
use crate::uncertainty::{estimate_maps, mc_sample, McConfig, UncertaintyMaps};
use crate::Mask;
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

const PHASE_PRETRAIN: u64 = 0;
const PHASE_ADAPT: u64 = 1;

/// Epoch counts and masking parameters for both training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub pretrain_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Q: uncertainty maps refresh every this many epochs within a stage.
    pub refresh_every: usize,
    /// Stage-1 softmax temperature over patch EU sums.
    pub tau: f64,
    /// Fraction of patches masked per training plan.
    pub mask_ratio: f64,
    pub batch_size: usize,
    pub augment: bool,
    /// Stage-2 anomaly exclusion: percentile filter quantile, components
    /// kept, and their connectivity.
    pub au_quantile: f64,
    pub au_top_k: usize,
    pub au_connectivity: u8,
    pub optim: OptimConfig,
    pub mc: McConfig,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            pretrain_epochs: 200,
            stage1_epochs: 150,
            stage2_epochs: 50,
            refresh_every: 10,
            tau: 1.0,
            mask_ratio: 0.75,
            batch_size: 8,
            augment: true,
            au_quantile: 0.2,
            au_top_k: 3,
            au_connectivity: 8,
            optim: OptimConfig::default(),
            mc: McConfig::default(),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.refresh_every == 0 {
            return Err(Error::config("refresh_every must be positive"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config("tau must be positive"));
        }
        if !self.mask_ratio.is_finite() || !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio outside [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.au_quantile) {
            return Err(Error::config("au_quantile outside [0, 1)"));
        }
        if self.au_top_k == 0 {
            return Err(Error::config("au_top_k must be positive"));
        }
        if self.au_connectivity != 4 && self.au_connectivity != 8 {
            return Err(Error::config("au_connectivity must be 4 or 8"));
        }
        self.optim.validate()?;
        self.mc.validate()
    }

    pub fn adapt_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }
}

/// One case as the trainer consumes it.
#[derive(Debug, Clone)]
pub struct TrainCase<T> {
    pub id: String,
    pub image: Array2<T>,
    pub grid: PatchGrid,
    pub is_anomalous: bool,
}

/// Build trainer inputs from case records (grids from each case's ROI).
pub fn prepare_cases<T: Scalar>(
    records: &[CaseRecord<T>],
    patch_size: usize,
) -> Result<Vec<TrainCase<T>>> {
    records
        .iter()
        .map(|r| {
            Ok(TrainCase {
                id: r.id.clone(),
                image: r.image.clone(),
                grid: build_patch_grid(&r.roi, patch_size)?,
                is_anomalous: r.is_anomalous,
            })
        })
        .collect()
}

/// Plan of one case for one epoch, kept for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanRecord {
    pub case_id: String,
    pub masked: Vec<usize>,
    pub forced_visible: Vec<usize>,
}

/// Metrics of one training epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    /// Phase-local epoch index.
    pub epoch: usize,
    /// 0 during pretraining, 1 or 2 during adaptation.
    pub stage: u8,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_mse: f64,
    pub mean_edge: f64,
    pub refreshed: bool,
    /// Per-case mask plans; logged during adaptation only.
    pub plans: Vec<PlanRecord>,
}

/// ROI-mean uncertainty at one refresh, averaged over the target cases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefreshSummary {
    pub epoch: usize,
    pub stage: u8,
    pub mean_eu: f64,
    pub mean_au: f64,
}

/// Hooks for persistence; all default to no-ops.
pub trait TrainObserver<T: Scalar> {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        let _ = record;
        Ok(())
    }
    fn on_refresh(
        &mut self,
        epoch: usize,
        case: &TrainCase<T>,
        maps: &UncertaintyMaps<T>,
        passes: usize,
    ) -> Result<()> {
        let _ = (epoch, case, maps, passes);
        Ok(())
    }
    /// Fired once when adaptation crosses into stage 2.
    fn on_stage_boundary(&mut self, epoch: usize, params: &ModelParams<T>, opt: &Adam<T>) -> Result<()> {
        let _ = (epoch, params, opt);
        Ok(())
    }
}

pub struct NoopObserver;

impl<T: Scalar> TrainObserver<T> for NoopObserver {}

pub struct PretrainOutcome<T> {
    pub params: ModelParams<T>,
    pub opt: Adam<T>,
    pub log: Vec<EpochRecord>,
}

pub struct AdaptOutcome<T> {
    pub params: ModelParams<T>,
    pub opt: Adam<T>,
    pub log: Vec<EpochRecord>,
    pub refreshes: Vec<RefreshSummary>,
}

fn check_cases<T: Scalar>(params: &ModelParams<T>, cases: &[TrainCase<T>]) -> Result<()> {
    let shape = (params.cfg.image_height, params.cfg.image_width);
    for c in cases {
        if c.grid.image_shape() != shape || c.image.dim() != shape {
            return Err(Error::precondition(format!(
                "case {} does not match the model geometry {shape:?}",
                c.id
            )));
        }
        if c.grid.patch_size() != params.cfg.patch_size {
            return Err(Error::precondition(format!("case {} patch size differs", c.id)));
        }
    }
    Ok(())
}

fn shuffled(n: usize, seed: u64, phase: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, tag::TRAIN_SHUFFLE, &[phase, epoch as u64]));
    order
}

fn run_epoch<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut Adam<T>,
    lr: f64,
    cases: &[TrainCase<T>],
    plans: &[MaskPlan],
    schedule: &TrainSchedule,
    phase: u64,
    epoch: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let order = shuffled(cases.len(), seed, phase, epoch);
    let mut sums = (0.0, 0.0, 0.0);
    for chunk in order.chunks(schedule.batch_size) {
        let mut images = Vec::with_capacity(chunk.len());
        for &idx in chunk {
            let image = if schedule.augment {
                let mut rng =
                    stream(seed, tag::TRAIN_AUG, &[phase, epoch as u64, idx as u64]);
                augment(&cases[idx].image, &mut rng)?
            } else {
                cases[idx].image.clone()
            };
            images.push(image);
        }
        let items: Vec<BatchItem<T>> = chunk
            .iter()
            .zip(images.iter())
            .map(|(&idx, image)| BatchItem { image, grid: &cases[idx].grid, plan: &plans[idx] })
            .collect();
        for loss in train_step(params, opt, lr, &items)? {
            sums.0 += loss.total;
            sums.1 += loss.mse;
            sums.2 += loss.edge;
        }
    }
    let n = cases.len() as f64;
    Ok((sums.0 / n, sums.1 / n, sums.2 / n))
}

/// Fit the model on healthy cases with random masking.
pub fn pretrain<T: Scalar>(
    cases: &[TrainCase<T>],
    model_cfg: ModelConfig,
    schedule: &TrainSchedule,
    seed: u64,
    obs: &mut dyn TrainObserver<T>,
) -> Result<PretrainOutcome<T>> {
    schedule.validate()?;
    if cases.is_empty() {
        return Err(Error::config("pretraining needs at least one case"));
    }
    if let Some(c) = cases.iter().find(|c| c.is_anomalous) {
        return Err(Error::precondition(format!(
            "pretraining case {} is labeled anomalous",
            c.id
        )));
    }
    let mut params = ModelParams::init(model_cfg, &mut stream(seed, tag::TRAIN_INIT, &[]))?;
    check_cases(&params, cases)?;
    let mut opt = Adam::new(schedule.optim.clone(), &params)?;
    let mut log = Vec::with_capacity(schedule.pretrain_epochs);
    for epoch in 0..schedule.pretrain_epochs {
        let lr = lr_at_epoch(&schedule.optim, epoch);
        let plans: Vec<MaskPlan> = cases
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                let mut rng =
                    stream(seed, tag::TRAIN_PLAN, &[PHASE_PRETRAIN, epoch as u64, idx as u64]);
                random_mask_plan(&c.grid, schedule.mask_ratio, &mut rng)
            })
            .collect::<Result<_>>()?;
        let (mean_total, mean_mse, mean_edge) = run_epoch(
            &mut params, &mut opt, lr, cases, &plans, schedule, PHASE_PRETRAIN, epoch, seed,
        )?;
        let record = EpochRecord {
            phase: "pretrain".into(),
            epoch,
            stage: 0,
            lr,
            mean_total,
            mean_mse,
            mean_edge,
            refreshed: false,
            plans: Vec::new(),
        };
        obs.on_epoch(&record)?;
        log.push(record);
    }
    Ok(PretrainOutcome { params, opt, log })
}

fn roi_mean<T: Scalar>(map: &Array2<T>, roi: &Mask) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&v, &r) in map.iter().zip(roi.iter()) {
        if r == 1 {
            sum += v.to_real();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn refresh_maps<T: Scalar>(
    params: &ModelParams<T>,
    cases: &[TrainCase<T>],
    mc: &McConfig,
    seed: u64,
    epoch: usize,
    maps: &mut [Option<UncertaintyMaps<T>>],
    obs: &mut dyn TrainObserver<T>,
) -> Result<()> {
    for (idx, case) in cases.iter().enumerate() {
        let mut rng = stream(seed, tag::REFRESH_MC, &[PHASE_ADAPT, epoch as u64, idx as u64]);
        let ens = mc_sample(params, &case.image, &case.grid, mc, &mut rng)?;
        let passes = ens.passes;
        let m = estimate_maps(&ens, &case.image, &case.grid)?;
        obs.on_refresh(epoch, case, &m, passes)?;
        maps[idx] = Some(m);
    }
    Ok(())
}

/// Two-stage adaptation starting from `params`, with a fresh optimizer.
pub fn adapt<T: Scalar>(
    params: ModelParams<T>,
    cases: &[TrainCase<T>],
    schedule: &TrainSchedule,
    seed: u64,
    obs: &mut dyn TrainObserver<T>,
) -> Result<AdaptOutcome<T>> {
    schedule.validate()?;
    let opt = Adam::new(schedule.optim.clone(), &params)?;
    adapt_from(params, opt, 0, cases, schedule, seed, obs)
}

/// Resume adaptation at `start_epoch` with the given optimizer state. With
/// the same seed this reproduces a full run's remaining epochs bit for bit,
/// because all draws are keyed by absolute epoch and case index.
pub fn adapt_from<T: Scalar>(
    mut params: ModelParams<T>,
    mut opt: Adam<T>,
    start_epoch: usize,
    cases: &[TrainCase<T>],
    schedule: &TrainSchedule,
    seed: u64,
    obs: &mut dyn TrainObserver<T>,
) -> Result<AdaptOutcome<T>> {
    schedule.validate()?;
    let s1 = schedule.stage1_epochs;
    let total = schedule.adapt_epochs();
    if start_epoch > total {
        return Err(Error::argument(format!("start epoch {start_epoch} beyond {total}")));
    }
    if cases.is_empty() && total > start_epoch {
        return Err(Error::config("adaptation needs at least one target case"));
    }
    check_cases(&params, cases)?;

    let mut maps: Vec<Option<UncertaintyMaps<T>>> = vec![None; cases.len()];
    let mut log = Vec::new();
    let mut refreshes = Vec::new();
    for epoch in start_epoch..total {
        let stage: u8 = if epoch < s1 { 1 } else { 2 };
        if epoch == s1 && epoch > start_epoch {
            obs.on_stage_boundary(epoch, &params, &opt)?;
        }
        let local = if stage == 1 { epoch } else { epoch - s1 };
        let refreshed = local % schedule.refresh_every == 0 || maps.iter().any(Option::is_none);
        if refreshed {
            refresh_maps(&params, cases, &schedule.mc, seed, epoch, &mut maps, obs)?;
            let (mut eu, mut au) = (0.0, 0.0);
            for (case, m) in cases.iter().zip(maps.iter()) {
                let m = m.as_ref().expect("just refreshed");
                eu += roi_mean(&m.eu, case.grid.roi());
                au += roi_mean(&m.au, case.grid.roi());
            }
            let n = cases.len().max(1) as f64;
            refreshes.push(RefreshSummary { epoch, stage, mean_eu: eu / n, mean_au: au / n });
        }

        let plans: Vec<MaskPlan> = cases
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                let m = maps[idx].as_ref().expect("maps exist after refresh");
                let mut rng =
                    stream(seed, tag::TRAIN_PLAN, &[PHASE_ADAPT, epoch as u64, idx as u64]);
                if stage == 1 {
                    eu_guided_plan(&c.grid, &m.eu, schedule.mask_ratio, schedule.tau, &mut rng)
                } else {
                    au_exclusion_plan(
                        &c.grid,
                        &m.au,
                        schedule.mask_ratio,
                        &mut rng,
                        schedule.au_top_k,
                        schedule.au_connectivity,
                        schedule.au_quantile,
                    )
                }
            })
            .collect::<Result<_>>()?;
        let lr = lr_at_epoch(&schedule.optim, epoch);
        let (mean_total, mean_mse, mean_edge) = run_epoch(
            &mut params, &mut opt, lr, cases, &plans, schedule, PHASE_ADAPT, epoch, seed,
        )?;
        let record = EpochRecord {
            phase: "adapt".into(),
            epoch,
            stage,
            lr,
            mean_total,
            mean_mse,
            mean_edge,
            refreshed,
            plans: cases
                .iter()
                .zip(plans.iter())
                .map(|(c, p)| PlanRecord {
                    case_id: c.id.clone(),
                    masked: p.masked.clone(),
                    forced_visible: p.forced_visible.clone(),
                })
                .collect(),
        };
        obs.on_epoch(&record)?;
        log.push(record);
    }
    Ok(AdaptOutcome { params, opt, log, refreshes })
}

/// Dataset strategy: what trains, on which set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyId {
    /// 1: pretrain on healthy data only.
    PretrainOnly,
    /// 2: adapt on the target set from random init.
    AdaptOnly,
    /// 3: pretrain, then adapt.
    Full,
}

impl StrategyId {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(StrategyId::PretrainOnly),
            2 => Ok(StrategyId::AdaptOnly),
            3 => Ok(StrategyId::Full),
            other => Err(Error::argument(format!("strategy {other} is not 1, 2, or 3"))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            StrategyId::PretrainOnly => 1,
            StrategyId::AdaptOnly => 2,
            StrategyId::Full => 3,
        }
    }
}

pub struct StrategyOutcome<T> {
    pub params: ModelParams<T>,
    pub pretrain_log: Vec<EpochRecord>,
    pub adapt_log: Vec<EpochRecord>,
    pub refreshes: Vec<RefreshSummary>,
}

/// Run one dataset strategy end to end. All strategies share the same
/// initial weights for a given seed.
pub fn run_strategy<T: Scalar>(
    strategy: StrategyId,
    healthy: &[TrainCase<T>],
    target: &[TrainCase<T>],
    model_cfg: ModelConfig,
    schedule: &TrainSchedule,
    seed: u64,
    obs: &mut dyn TrainObserver<T>,
) -> Result<StrategyOutcome<T>> {
    match strategy {
        StrategyId::PretrainOnly => {
            let pre = pretrain(healthy, model_cfg, schedule, seed, obs)?;
            Ok(StrategyOutcome {
                params: pre.params,
                pretrain_log: pre.log,
                adapt_log: Vec::new(),
                refreshes: Vec::new(),
            })
        }
        StrategyId::AdaptOnly => {
            let init = ModelParams::init(model_cfg, &mut stream(seed, tag::TRAIN_INIT, &[]))?;
            let ada = adapt(init, target, schedule, seed, obs)?;
            Ok(StrategyOutcome {
                params: ada.params,
                pretrain_log: Vec::new(),
                adapt_log: ada.log,
                refreshes: ada.refreshes,
            })
        }
        StrategyId::Full => {
            let pre = pretrain(healthy, model_cfg, schedule, seed, obs)?;
            let ada = adapt(pre.params, target, schedule, seed, obs)?;
            Ok(StrategyOutcome {
                params: ada.params,
                pretrain_log: pre.log,
                adapt_log: ada.log,
                refreshes: ada.refreshes,
            })
        }
    }
}
