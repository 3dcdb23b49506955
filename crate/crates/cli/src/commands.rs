//! Pipeline commands. Each resolves its prerequisites from the data and run
//! directories, delegates to the core library, and persists artifacts so a
//! rerun with the same config and seed is a no-op or a resume.

use crate::config::RunConfig;
use crate::rundir::{self, HistoryEntry, PersistObserver, RunDir};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use u2ad_core::detection::detect_case;
use u2ad_core::error::{Error, Result};
use u2ad_core::eval::{
    cross_validate, k_sweep, make_cv_plan, robustness_sweep, CvLevel, CvOutcome, KSweepRow,
    ScoreRow, SweepRow,
};
use u2ad_core::io::checkpoint::load_checkpoint;
use u2ad_core::io::dataset::{self, Split};
use u2ad_core::io::{raster, table};
use u2ad_core::model::optim::Adam;
use u2ad_core::model::ModelParams;
use u2ad_core::patching::build_patch_grid;
use u2ad_core::phantom::CaseRecord;
use u2ad_core::rng::{stream, tag};
use u2ad_core::trainer::{self, prepare_cases, StrategyId};
use u2ad_core::uncertainty::{estimate_maps, mc_sample};
use u2ad_core::Scalar;

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let _run = RunDir::open(cfg)?;
    let data = &cfg.io.data_dir;
    if data.join("corpus.json").exists() {
        let index = dataset::load_index(data)?;
        let expected = cfg.corpus.pretrain_cases + cfg.corpus.target_cases;
        if index.seed != cfg.io.seed
            || index.cases.len() != expected
            || index.target_prevalence != cfg.corpus.target_prevalence
        {
            return Err(Error::precondition(format!(
                "existing corpus at {} was generated with different settings",
                data.display()
            )));
        }
        println!(
            "corpus already present ({} cases), digest {}",
            index.cases.len(),
            dataset::corpus_digest(data)?
        );
        return Ok(());
    }
    let index = dataset::generate_corpus::<f32>(
        data,
        &cfg.phantom,
        cfg.target_phantom(),
        &cfg.corpus,
        cfg.io.seed,
    )?;
    let anomalous = index.cases.iter().filter(|c| c.is_anomalous).count();
    println!(
        "generated {} cases ({} anomalous) into {}, digest {}",
        index.cases.len(),
        anomalous,
        data.display(),
        dataset::corpus_digest(data)?
    );
    Ok(())
}

fn load_split_cases(cfg: &RunConfig, split: Split) -> Result<Vec<CaseRecord<f32>>> {
    let index = dataset::load_index(&cfg.io.data_dir)?;
    dataset::load_split(&cfg.io.data_dir, &index, split)
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let run = RunDir::open(cfg)?;
    let root = run.root();
    let schedule = cfg.schedule()?;
    let total = schedule.pretrain_epochs;
    let path = rundir::checkpoint_path(root, "pretrain", total);
    if path.exists() {
        println!("pretraining already complete at {}", path.display());
        return Ok(());
    }
    let records = load_split_cases(cfg, Split::Pretrain)?;
    let cases = prepare_cases(&records, cfg.model.patch_size)?;
    let mut obs = PersistObserver::new(root, cfg.io.seed, schedule.mc.clone());
    let out = trainer::pretrain(&cases, cfg.model.clone(), &schedule, cfg.io.seed, &mut obs)?;
    save_params(&path, &out.params, Some(&out.opt), total, "pretrain", cfg.io.seed)?;
    let last = out.log.last().map_or(f64::NAN, |r| r.mean_total);
    println!("pretrained {total} epochs on {} cases, final loss {last:.6}", cases.len());
    Ok(())
}

fn save_params(
    path: &Path,
    params: &ModelParams<f32>,
    opt: Option<&Adam<f32>>,
    epoch: usize,
    phase: &str,
    seed: u64,
) -> Result<()> {
    u2ad_core::io::checkpoint::save_checkpoint(path, params, opt, epoch as u64, phase, seed)
}

/// Load a checkpoint and insist it matches the configured model.
fn load_params(path: &Path, cfg: &RunConfig) -> Result<(ModelParams<f32>, Option<Adam<f32>>)> {
    let (params, opt, _meta) = load_checkpoint::<f32>(path)?;
    if params.cfg != cfg.model {
        return Err(Error::precondition(format!(
            "checkpoint {} was trained with a different model config",
            path.display()
        )));
    }
    Ok((params, opt))
}

pub fn adapt(cfg: &RunConfig) -> Result<()> {
    let run = RunDir::open(cfg)?;
    let root = run.root();
    let schedule = cfg.schedule()?;
    let strategy = StrategyId::from_index(cfg.io.strategy)?;
    let total = schedule.adapt_epochs();
    let required = if strategy == StrategyId::PretrainOnly { 0 } else { total };
    let final_path = rundir::checkpoint_path(root, "adapt", required);
    if final_path.exists() {
        println!("adaptation already complete at {}", final_path.display());
        return Ok(());
    }
    let pre_path = rundir::checkpoint_path(root, "pretrain", schedule.pretrain_epochs);

    if strategy == StrategyId::PretrainOnly {
        let (params, opt) = load_params(&pre_path, cfg)?;
        save_params(&final_path, &params, opt.as_ref(), 0, "adapt", cfg.io.seed)?;
        println!("strategy 1: published the pretrained weights as the adapted model");
        return Ok(());
    }

    let records = load_split_cases(cfg, Split::Target)?;
    let cases = prepare_cases(&records, cfg.model.patch_size)?;
    let (params, opt, start) = match rundir::latest_checkpoint(root, "adapt")? {
        Some((path, epoch)) if epoch < total => {
            let (params, opt) = load_params(&path, cfg)?;
            let opt = opt.ok_or_else(|| {
                Error::precondition(format!("checkpoint {} lacks optimizer state", path.display()))
            })?;
            println!("resuming adaptation from epoch {epoch}");
            (params, opt, epoch)
        }
        _ => {
            let params = if strategy == StrategyId::AdaptOnly {
                ModelParams::init(cfg.model.clone(), &mut stream(cfg.io.seed, tag::TRAIN_INIT, &[]))?
            } else {
                load_params(&pre_path, cfg)?.0
            };
            let opt = Adam::new(schedule.optim.clone(), &params)?;
            (params, opt, 0)
        }
    };
    let mut obs = PersistObserver::new(root, cfg.io.seed, schedule.mc.clone());
    let out = trainer::adapt_from(params, opt, start, &cases, &schedule, cfg.io.seed, &mut obs)?;
    for r in &out.refreshes {
        rundir::append_history(root, &HistoryEntry::RefreshSummary(r.clone()))?;
    }
    save_params(&final_path, &out.params, Some(&out.opt), total, "adapt", cfg.io.seed)?;
    let last = out.log.last().map_or(f64::NAN, |r| r.mean_total);
    println!(
        "adapted {} epochs on {} cases ({} refreshes), final loss {last:.6}",
        total - start,
        cases.len(),
        out.refreshes.len()
    );
    Ok(())
}

/// The model detect and sweep run: the adapted checkpoint of this strategy.
fn adapted_model(cfg: &RunConfig, root: &Path) -> Result<ModelParams<f32>> {
    let schedule = cfg.schedule()?;
    let strategy = StrategyId::from_index(cfg.io.strategy)?;
    let required = if strategy == StrategyId::PretrainOnly { 0 } else { schedule.adapt_epochs() };
    let path = rundir::checkpoint_path(root, "adapt", required);
    if !path.exists() {
        return Err(Error::precondition(format!(
            "adapted model checkpoint missing at {}; run adapt first",
            path.display()
        )));
    }
    Ok(load_params(&path, cfg)?.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentReport {
    pub score: f64,
    pub n_pixels: usize,
    /// (min_row, min_col, max_row, max_col).
    pub bbox: (usize, usize, usize, usize),
}

/// Everything detection decided for one case, persisted per case dir.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub label: bool,
    pub gt_segments: Vec<u8>,
    pub patient_score: f64,
    pub patient_flag: bool,
    pub segment_scores: Vec<f64>,
    pub segment_flags: Vec<bool>,
    pub components: Vec<ComponentReport>,
    /// Row-wise ROI-mean anomaly curve; one value per image row.
    pub curve: Vec<f64>,
    pub passes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectSummary {
    pub n_cases: usize,
    pub n_flagged: usize,
    pub cases: Vec<String>,
}

pub fn detect(cfg: &RunConfig) -> Result<()> {
    let run = RunDir::open(cfg)?;
    let root = run.root();
    let params = adapted_model(cfg, root)?;
    let records = load_split_cases(cfg, Split::Target)?;
    let n_segments = cfg.phantom.n_segments;
    let mc = cfg.mc();
    let mut rows = Vec::with_capacity(records.len());
    let mut flagged = 0usize;
    for (idx, record) in records.iter().enumerate() {
        let grid = build_patch_grid(&record.roi, cfg.model.patch_size)?;
        let mut rng = stream(cfg.io.seed, tag::DETECT_MC, &[idx as u64]);
        let ens = mc_sample(&params, &record.image, &grid, &mc, &mut rng)?;
        let maps = estimate_maps(&ens, &record.image, &grid)?;
        let det = detect_case(&maps.au, &record.roi, &record.segments, n_segments, &cfg.detection)?;

        let dir = root.join("detect").join(&record.id);
        fs::create_dir_all(&dir)?;
        raster::write_f32(&dir.join("ano_map.f32"), &maps.au)?;
        let report = CaseReport {
            case_id: record.id.clone(),
            label: record.is_anomalous,
            gt_segments: record.gt_segments.clone(),
            patient_score: det.scores.patient_score.to_real(),
            patient_flag: det.scores.patient_flag,
            segment_scores: det.scores.segment_scores.iter().map(|s| s.to_real()).collect(),
            segment_flags: det.scores.segment_flags.clone(),
            components: det
                .components
                .iter()
                .map(|c| ComponentReport {
                    score: c.score.to_real(),
                    n_pixels: c.pixels.len(),
                    bbox: c.bbox,
                })
                .collect(),
            curve: det.curve.iter().map(|v| v.to_real()).collect(),
            passes: ens.passes,
        };
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;

        flagged += det.scores.patient_flag as usize;
        rows.push(ScoreRow {
            case_id: record.id.clone(),
            label: record.is_anomalous,
            patient_score: det.scores.patient_score.to_real(),
            segment_scores: det.scores.segment_scores.iter().map(|s| s.to_real()).collect(),
            segment_labels: (1..=n_segments as u8)
                .map(|s| record.gt_segments.contains(&s))
                .collect(),
        });
    }
    let summary = DetectSummary {
        n_cases: rows.len(),
        n_flagged: flagged,
        cases: rows.iter().map(|r| r.case_id.clone()).collect(),
    };
    fs::create_dir_all(root.join("detect"))?;
    fs::write(root.join("detect").join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    if rows.is_empty() {
        println!("target split is empty; wrote an empty detection summary");
        return Ok(());
    }
    table::write_score_table(&root.join("scores.csv"), &rows)?;
    println!("scored {} cases ({flagged} flagged) into {}", rows.len(), root.display());
    Ok(())
}

fn print_cv(name: &str, out: &CvOutcome) {
    println!(
        "{name}: f1 {:.4} +- {:.4}, recall {:.4}, specificity {:.4}, accuracy {:.4} \
         ({} evals, {} skipped)",
        out.mean.f1,
        out.std.f1,
        out.mean.recall,
        out.mean.specificity,
        out.mean.accuracy,
        out.evals.len(),
        out.skipped.len()
    );
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let run = RunDir::open(cfg)?;
    let root = run.root();
    let scores = root.join("scores.csv");
    if !scores.exists() {
        return Err(Error::precondition(format!(
            "score table missing at {}; run detect first",
            scores.display()
        )));
    }
    let rows = table::read_score_table(&scores)?;
    let ids: Vec<String> = rows.iter().map(|r| r.case_id.clone()).collect();
    let plan = make_cv_plan(&ids, cfg.eval.folds, cfg.eval.repeats, cfg.io.seed)?;
    let patient = cross_validate(&rows, &plan, CvLevel::Patient, cfg.eval.target_sensitivity)?;
    let segment = cross_validate(&rows, &plan, CvLevel::Segment, cfg.eval.target_sensitivity)?;
    let dir = root.join("eval");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("cv_patient.json"), serde_json::to_vec_pretty(&patient)?)?;
    fs::write(dir.join("cv_segment.json"), serde_json::to_vec_pretty(&segment)?)?;
    print_cv("patient", &patient);
    print_cv("segment", &segment);
    Ok(())
}

fn write_robustness_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(table::into_io)?;
    w.write_record([
        "noise_variance",
        "downsample",
        "threshold",
        "accuracy",
        "f1",
        "recall",
        "specificity",
    ])
    .map_err(table::into_io)?;
    for r in rows {
        let var = r.perturbation.noise_sigma * r.perturbation.noise_sigma;
        w.write_record([
            var.to_string(),
            r.perturbation.downsample.to_string(),
            r.threshold.to_string(),
            r.patient.accuracy.to_string(),
            r.patient.f1.to_string(),
            r.patient.recall.to_string(),
            r.patient.specificity.to_string(),
        ])
        .map_err(table::into_io)?;
    }
    w.flush()?;
    Ok(())
}

fn write_k_sweep_csv(path: &Path, rows: &[KSweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(table::into_io)?;
    w.write_record([
        "k",
        "threshold",
        "accuracy",
        "f1",
        "recall",
        "specificity",
        "mean_case_seconds",
    ])
    .map_err(table::into_io)?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.threshold.to_string(),
            r.patient.accuracy.to_string(),
            r.patient.f1.to_string(),
            r.patient.recall.to_string(),
            r.patient.specificity.to_string(),
            r.mean_case_seconds.to_string(),
        ])
        .map_err(table::into_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let run = RunDir::open(cfg)?;
    let root = run.root();
    let params = adapted_model(cfg, root)?;
    let records = load_split_cases(cfg, Split::Target)?;
    let n_segments = cfg.phantom.n_segments;
    let mc = cfg.mc();
    let sigmas: Vec<f64> = cfg.eval.noise_variances.iter().map(|v| v.sqrt()).collect();
    let dir = root.join("sweep");
    fs::create_dir_all(&dir)?;

    let rows = robustness_sweep(
        &params,
        &records,
        n_segments,
        &cfg.detection,
        &mc,
        cfg.io.seed,
        &sigmas,
        &cfg.eval.downsample_factors,
    )?;
    write_robustness_csv(&dir.join("robustness.csv"), &rows)?;

    let krows = k_sweep(
        &params,
        &records,
        n_segments,
        &cfg.detection,
        &mc,
        cfg.io.seed,
        &cfg.eval.k_sweep,
    )?;
    write_k_sweep_csv(&dir.join("k_sweep.csv"), &krows)?;
    println!(
        "swept {} perturbation levels and {} ensemble sizes into {}",
        rows.len(),
        krows.len(),
        dir.display()
    );
    Ok(())
}
