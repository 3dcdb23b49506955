//! Detection metrics, threshold rules, cross-validation, reconstruction
//! quality, and robustness sweeps.
//!
//! Detection stays threshold-free until this module: cases carry continuous
//! patient and segment scores, and thresholds are fit on held-out data. The
//! patient rule picks the largest threshold keeping sensitivity at or above a
//! target; the segment rule maximizes F1 over an exhaustive candidate scan.
//! Candidate thresholds are midpoints of consecutive sorted unique scores
//! plus a below-minimum sentinel, so every achievable labeling is reachable.

use crate::detection::{detect_case, DetectionConfig};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::patching::build_patch_grid;
use crate::phantom::CaseRecord;
use crate::rng::{stream, tag};
use crate::scalar::Scalar;
use crate::uncertainty::{estimate_maps, mc_sample, McConfig};
use crate::Mask;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::time::Instant;

/// Confusion-matrix summary; anomalous is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub f1: f64,
    /// Sensitivity.
    pub recall: f64,
    pub specificity: f64,
}

pub fn detection_metrics(predictions: &[bool], labels: &[bool]) -> Result<DetectionMetrics> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::argument("predictions and labels must be nonempty and equal length"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0f64, 0.0, 0.0, 0.0);
    for (&p, &l) in predictions.iter().zip(labels.iter()) {
        match (p, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(DetectionMetrics {
        accuracy: (tp + tn) / predictions.len() as f64,
        f1: ratio(2.0 * precision * recall, precision + recall),
        recall,
        specificity: ratio(tn, tn + fp),
    })
}

/// Flags are strict: score > threshold.
pub fn apply_threshold(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut uniq: Vec<f64> = scores.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let mut c = vec![uniq[0] - 1.0];
    c.extend(uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    c
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::argument("scores and labels must be nonempty and equal length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::argument("scores must be finite"));
    }
    Ok(())
}

/// Largest candidate threshold keeping sensitivity at or above `target`.
pub fn threshold_for_sensitivity(scores: &[f64], labels: &[bool], target: f64) -> Result<f64> {
    check_scores(scores, labels)?;
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::argument("target sensitivity outside (0, 1]"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::argument("sensitivity rule needs at least one positive label"));
    }
    let sensitivity = |t: f64| {
        let hit = scores.iter().zip(labels).filter(|&(&s, &l)| l && s > t).count();
        hit as f64 / positives as f64
    };
    candidate_thresholds(scores)
        .into_iter()
        .rev()
        .find(|&t| sensitivity(t) >= target)
        .ok_or_else(|| Error::argument("no threshold reaches the target sensitivity"))
}

/// Candidate threshold maximizing F1; ties go to the larger threshold.
pub fn threshold_for_f1(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels)?;
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::argument("F1 rule needs both classes"));
    }
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for t in candidate_thresholds(scores) {
        let m = detection_metrics(&apply_threshold(scores, t), labels)?;
        if m.f1 >= best.1 {
            best = (t, m.f1);
        }
    }
    Ok(best.0)
}

/// Reconstruction quality over the ROI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub mse: f64,
    /// dB against peak 1.0; infinity when mse is zero.
    pub psnr: f64,
    pub ssim: f64,
    /// Mean EU over the ROI.
    pub variance: f64,
}

fn gaussian_window() -> [[f64; 11]; 11] {
    let sigma = 1.5;
    let mut w = [[0.0; 11]; 11];
    let mut sum = 0.0;
    for (dy, row) in w.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (ry, rx) = (dy as f64 - 5.0, dx as f64 - 5.0);
            *v = (-(ry * ry + rx * rx) / (2.0 * sigma * sigma)).exp();
            sum += *v;
        }
    }
    for row in &mut w {
        for v in row {
            *v /= sum;
        }
    }
    w
}

/// Mean SSIM over windows centered at ROI pixels. Windows are clamped to the
/// image bounds with the Gaussian weights renormalized over the kept taps.
fn ssim_over_roi<T: Scalar>(x: &Array2<T>, y: &Array2<T>, roi: &Mask) -> f64 {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let w = gaussian_window();
    let (h, wd) = x.dim();
    let mut total = 0.0;
    let mut n = 0usize;
    for cy in 0..h {
        for cx in 0..wd {
            if roi[(cy, cx)] != 1 {
                continue;
            }
            let (mut ws, mut mx, mut my, mut mxx, mut myy, mut mxy) =
                (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..11usize {
                let py = cy as isize + dy as isize - 5;
                if py < 0 || py >= h as isize {
                    continue;
                }
                for dx in 0..11usize {
                    let px = cx as isize + dx as isize - 5;
                    if px < 0 || px >= wd as isize {
                        continue;
                    }
                    let g = w[dy][dx];
                    let (xv, yv) =
                        (x[(py as usize, px as usize)].to_real(), y[(py as usize, px as usize)].to_real());
                    ws += g;
                    mx += g * xv;
                    my += g * yv;
                    mxx += g * xv * xv;
                    myy += g * yv * yv;
                    mxy += g * xv * yv;
                }
            }
            let (mx, my) = (mx / ws, my / ws);
            let vx = (mxx / ws - mx * mx).max(0.0);
            let vy = (myy / ws - my * my).max(0.0);
            let cov = mxy / ws - mx * my;
            total += ((2.0 * mx * my + C1) * (2.0 * cov + C2))
                / ((mx * mx + my * my + C1) * (vx + vy + C2));
            n += 1;
        }
    }
    total / n as f64
}

pub fn recon_metrics<T: Scalar>(
    x: &Array2<T>,
    xhat: &Array2<T>,
    roi: &Mask,
    eu_map: &Array2<T>,
) -> Result<ReconMetrics> {
    if x.dim() != xhat.dim() || x.dim() != roi.dim() || x.dim() != eu_map.dim() {
        return Err(Error::argument("recon metric inputs must share one shape"));
    }
    let mut se = 0.0;
    let mut eu = 0.0;
    let mut n = 0usize;
    for ((((&a, &b), &r), &e), _) in
        x.iter().zip(xhat.iter()).zip(roi.iter()).zip(eu_map.iter()).zip(0..)
    {
        if r == 1 {
            let d = a.to_real() - b.to_real();
            se += d * d;
            eu += e.to_real();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::argument("ROI is empty"));
    }
    let mse = se / n as f64;
    Ok(ReconMetrics {
        mse,
        psnr: if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() },
        ssim: ssim_over_roi(x, xhat, roi),
        variance: eu / n as f64,
    })
}

/// Repeated k-fold assignments. Case ids are sorted before shuffling, so the
/// plan depends only on the id set, the fold/repeat counts, and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    /// assignments[repeat][fold] lists the case ids held out in that fold.
    pub assignments: Vec<Vec<Vec<String>>>,
}

pub fn make_cv_plan(case_ids: &[String], folds: usize, repeats: usize, seed: u64) -> Result<CvPlan> {
    if folds < 2 {
        return Err(Error::config("cross-validation needs at least 2 folds"));
    }
    if repeats == 0 {
        return Err(Error::config("cross-validation needs at least 1 repeat"));
    }
    if case_ids.len() < folds {
        return Err(Error::config(format!(
            "{} cases cannot fill {folds} folds",
            case_ids.len()
        )));
    }
    let mut ids: Vec<String> = case_ids.to_vec();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::argument("case ids must be unique"));
    }
    let assignments = (0..repeats)
        .map(|rep| {
            let mut order = ids.clone();
            use rand::seq::SliceRandom;
            order.shuffle(&mut stream(seed, tag::CV_PLAN, &[rep as u64]));
            let mut fold_sets = vec![Vec::new(); folds];
            for (i, id) in order.into_iter().enumerate() {
                fold_sets[i % folds].push(id);
            }
            fold_sets
        })
        .collect();
    Ok(CvPlan { folds, repeats, seed, assignments })
}

/// Per-case continuous scores and ground truth, the input to thresholding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub case_id: String,
    pub label: bool,
    pub patient_score: f64,
    /// Index s-1 holds segment s.
    pub segment_scores: Vec<f64>,
    pub segment_labels: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CvLevel {
    Patient,
    Segment,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvEval {
    pub repeat: usize,
    pub fold: usize,
    pub threshold: f64,
    pub metrics: DetectionMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvSkip {
    pub repeat: usize,
    pub fold: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvOutcome {
    pub evals: Vec<CvEval>,
    pub skipped: Vec<CvSkip>,
    pub mean: DetectionMetrics,
    pub std: DetectionMetrics,
}

fn units(rows: &[&ScoreRow], level: CvLevel) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for row in rows {
        match level {
            CvLevel::Patient => {
                scores.push(row.patient_score);
                labels.push(row.label);
            }
            CvLevel::Segment => {
                scores.extend_from_slice(&row.segment_scores);
                labels.extend_from_slice(&row.segment_labels);
            }
        }
    }
    (scores, labels)
}

fn summarize(evals: &[CvEval]) -> (DetectionMetrics, DetectionMetrics) {
    let zero = DetectionMetrics { accuracy: 0.0, f1: 0.0, recall: 0.0, specificity: 0.0 };
    if evals.is_empty() {
        return (zero, zero);
    }
    let n = evals.len() as f64;
    let fields = |m: &DetectionMetrics| [m.accuracy, m.f1, m.recall, m.specificity];
    let mut mean = [0.0f64; 4];
    for e in evals {
        for (acc, v) in mean.iter_mut().zip(fields(&e.metrics)) {
            *acc += v / n;
        }
    }
    let mut var = [0.0f64; 4];
    if evals.len() > 1 {
        for e in evals {
            for ((acc, v), m) in var.iter_mut().zip(fields(&e.metrics)).zip(mean) {
                *acc += (v - m) * (v - m) / (n - 1.0);
            }
        }
    }
    let pack = |a: [f64; 4]| DetectionMetrics {
        accuracy: a[0],
        f1: a[1],
        recall: a[2],
        specificity: a[3],
    };
    (pack(mean), pack(var.map(f64::sqrt)))
}

/// Fit a threshold on four folds, evaluate on the fifth, for every repeat.
/// Patient level uses the sensitivity rule; segment level the F1 rule over
/// all (case, segment) units. Folds whose fitting split holds a single class
/// are skipped and recorded.
pub fn cross_validate(
    rows: &[ScoreRow],
    plan: &CvPlan,
    level: CvLevel,
    target_sensitivity: f64,
) -> Result<CvOutcome> {
    let by_id: std::collections::HashMap<&str, &ScoreRow> =
        rows.iter().map(|r| (r.case_id.as_str(), r)).collect();
    let mut evals = Vec::new();
    let mut skipped = Vec::new();
    for (rep, fold_sets) in plan.assignments.iter().enumerate() {
        for fold in 0..plan.folds {
            let lookup = |ids: &[String]| -> Result<Vec<&ScoreRow>> {
                ids.iter()
                    .map(|id| {
                        by_id
                            .get(id.as_str())
                            .copied()
                            .ok_or_else(|| Error::argument(format!("plan case {id} has no score row")))
                    })
                    .collect()
            };
            let mut fit_rows = Vec::new();
            for (f, ids) in fold_sets.iter().enumerate() {
                if f != fold {
                    fit_rows.extend(lookup(ids)?);
                }
            }
            let eval_rows = lookup(&fold_sets[fold])?;
            let (fit_scores, fit_labels) = units(&fit_rows, level);
            if fit_labels.iter().all(|&l| l) || fit_labels.iter().all(|&l| !l) {
                skipped.push(CvSkip {
                    repeat: rep,
                    fold,
                    reason: "single-class fitting split".into(),
                });
                continue;
            }
            let threshold = match level {
                CvLevel::Patient => {
                    threshold_for_sensitivity(&fit_scores, &fit_labels, target_sensitivity)?
                }
                CvLevel::Segment => threshold_for_f1(&fit_scores, &fit_labels)?,
            };
            let (eval_scores, eval_labels) = units(&eval_rows, level);
            if eval_scores.is_empty() {
                skipped.push(CvSkip { repeat: rep, fold, reason: "empty held-out fold".into() });
                continue;
            }
            let metrics = detection_metrics(&apply_threshold(&eval_scores, threshold), &eval_labels)?;
            evals.push(CvEval { repeat: rep, fold, threshold, metrics });
        }
    }
    let (mean, std) = summarize(&evals);
    Ok(CvOutcome { evals, skipped, mean, std })
}

/// Score every case with the given weights: MC ensemble, AU map as the
/// anomaly map, detection postprocessing. The MC stream is keyed by corpus
/// position only, so reruns and perturbation sweeps share plans per case.
pub fn score_corpus<T: Scalar>(
    params: &ModelParams<T>,
    records: &[CaseRecord<T>],
    n_segments: usize,
    detect: &DetectionConfig,
    mc: &McConfig,
    seed: u64,
) -> Result<Vec<ScoreRow>> {
    records
        .iter()
        .enumerate()
        .map(|(idx, r)| score_one(params, r, idx, None, n_segments, detect, mc, seed))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn score_one<T: Scalar>(
    params: &ModelParams<T>,
    record: &CaseRecord<T>,
    idx: usize,
    image_override: Option<&Array2<T>>,
    n_segments: usize,
    detect: &DetectionConfig,
    mc: &McConfig,
    seed: u64,
) -> Result<ScoreRow> {
    let image = image_override.unwrap_or(&record.image);
    let grid = build_patch_grid(&record.roi, params.cfg.patch_size)?;
    let mut rng = stream(seed, tag::DETECT_MC, &[idx as u64]);
    let ens = mc_sample(params, image, &grid, mc, &mut rng)?;
    let maps = estimate_maps(&ens, image, &grid)?;
    let det = detect_case(&maps.au, &record.roi, &record.segments, n_segments, detect)?;
    Ok(ScoreRow {
        case_id: record.id.clone(),
        label: record.is_anomalous,
        patient_score: det.scores.patient_score.to_real(),
        segment_scores: det.scores.segment_scores.iter().map(|s| s.to_real()).collect(),
        segment_labels: (1..=n_segments as u8)
            .map(|s| record.gt_segments.contains(&s))
            .collect(),
    })
}

/// One perturbation level: additive Gaussian noise (then clipping) and/or
/// block-average downsampling by an integer factor with bilinear upsampling
/// back to the original size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub noise_sigma: f64,
    pub downsample: u32,
}

fn bilinear_upsample<T: Scalar>(small: &Array2<T>, h: usize, w: usize) -> Array2<T> {
    let (sh, sw) = small.dim();
    let scale_y = sh as f64 / h as f64;
    let scale_x = sw as f64 / w as f64;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (sh - 1) as f64);
        let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (sw - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let v = small[(y0, x0)].to_real() * (1.0 - fy) * (1.0 - fx)
            + small[(y0, x1)].to_real() * (1.0 - fy) * fx
            + small[(y1, x0)].to_real() * fy * (1.0 - fx)
            + small[(y1, x1)].to_real() * fy * fx;
        T::from_real(v)
    })
}

/// Apply one perturbation level. The identity level (sigma 0, factor 1)
/// returns the input bits unchanged.
pub fn perturb_image<T: Scalar>(
    image: &Array2<T>,
    p: Perturbation,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<T>> {
    if !(p.noise_sigma.is_finite() && p.noise_sigma >= 0.0) {
        return Err(Error::argument("noise sigma must be finite and nonnegative"));
    }
    if p.downsample == 0 {
        return Err(Error::argument("downsample factor must be positive"));
    }
    let mut out = image.clone();
    if p.noise_sigma > 0.0 {
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = T::from_real((v.to_real() + p.noise_sigma * z).clamp(0.0, 1.0));
        }
    }
    if p.downsample > 1 {
        let f = p.downsample as usize;
        let (h, w) = out.dim();
        if h % f != 0 || w % f != 0 {
            return Err(Error::argument(format!("factor {f} does not divide {h}x{w}")));
        }
        let small = Array2::from_shape_fn((h / f, w / f), |(by, bx)| {
            let mut sum = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    sum += out[(by * f + dy, bx * f + dx)].to_real();
                }
            }
            T::from_real(sum / (f * f) as f64)
        });
        out = bilinear_upsample(&small, h, w);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub perturbation: Perturbation,
    pub threshold: f64,
    pub patient: DetectionMetrics,
}

/// Rerun scoring under each perturbation level and tabulate patient metrics
/// at the per-level best-F1 threshold. Levels are each noise sigma at factor
/// 1, then each downsample factor at sigma 0, deduplicated.
pub fn robustness_sweep<T: Scalar>(
    params: &ModelParams<T>,
    records: &[CaseRecord<T>],
    n_segments: usize,
    detect: &DetectionConfig,
    mc: &McConfig,
    seed: u64,
    noise_sigmas: &[f64],
    downsample_factors: &[u32],
) -> Result<Vec<SweepRow>> {
    let mut levels: Vec<Perturbation> = Vec::new();
    let mut seen = HashSet::new();
    for &s in noise_sigmas {
        if seen.insert((s.to_bits(), 1u32)) {
            levels.push(Perturbation { noise_sigma: s, downsample: 1 });
        }
    }
    for &f in downsample_factors {
        if seen.insert((0.0f64.to_bits(), f)) {
            levels.push(Perturbation { noise_sigma: 0.0, downsample: f });
        }
    }
    let mut rows = Vec::with_capacity(levels.len());
    for (lvl, &p) in levels.iter().enumerate() {
        let mut scores = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for (idx, r) in records.iter().enumerate() {
            let mut prng = stream(seed, tag::PERTURB, &[lvl as u64, idx as u64]);
            let image = perturb_image(&r.image, p, &mut prng)?;
            let row = score_one(params, r, idx, Some(&image), n_segments, detect, mc, seed)?;
            scores.push(row.patient_score);
            labels.push(row.label);
        }
        let threshold = threshold_for_f1(&scores, &labels)?;
        let patient = detection_metrics(&apply_threshold(&scores, threshold), &labels)?;
        rows.push(SweepRow { perturbation: p, threshold, patient });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub threshold: f64,
    pub patient: DetectionMetrics,
    /// Mean per-case wall time for MC sampling plus detection.
    pub mean_case_seconds: f64,
}

/// Score the corpus at each ensemble size and time the per-case detection.
pub fn k_sweep<T: Scalar>(
    params: &ModelParams<T>,
    records: &[CaseRecord<T>],
    n_segments: usize,
    detect: &DetectionConfig,
    mc_base: &McConfig,
    seed: u64,
    ks: &[usize],
) -> Result<Vec<KSweepRow>> {
    if records.is_empty() {
        return Err(Error::argument("k sweep needs a nonempty corpus"));
    }
    ks.iter()
        .map(|&k| {
            let mc = McConfig { k, ..mc_base.clone() };
            let start = Instant::now();
            let rows = score_corpus(params, records, n_segments, detect, &mc, seed)?;
            let mean_case_seconds = start.elapsed().as_secs_f64() / records.len() as f64;
            let scores: Vec<f64> = rows.iter().map(|r| r.patient_score).collect();
            let labels: Vec<bool> = rows.iter().map(|r| r.label).collect();
            let threshold = threshold_for_f1(&scores, &labels)?;
            let patient = detection_metrics(&apply_threshold(&scores, threshold), &labels)?;
            Ok(KSweepRow { k, threshold, patient, mean_case_seconds })
        })
        .collect()
}
