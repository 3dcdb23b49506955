//! Toy-scale flow through the public API only: corpus generation, strategy
//! training, corpus scoring, and bitwise-deterministic replay.

use u2ad_core::detection::DetectionConfig;
use u2ad_core::eval::score_corpus;
use u2ad_core::io::dataset::{corpus_cases, CorpusSpec, Split};
use u2ad_core::model::ModelConfig;
use u2ad_core::phantom::{CaseRecord, PhantomConfig};
use u2ad_core::trainer::{prepare_cases, run_strategy, NoopObserver, StrategyId, TrainSchedule};
use u2ad_core::uncertainty::McConfig;

fn toy_phantom() -> PhantomConfig {
    PhantomConfig {
        height: 32,
        width: 32,
        cord_halfwidth: (3.0, 4.0),
        wobble_amplitude: (0.5, 1.0),
        wobble_wavelength: (20.0, 40.0),
        csf_margin: (2.0, 3.0),
        n_segments: 4,
        ..PhantomConfig::default()
    }
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        patch_size: 4,
        embed_dim: 8,
        encoder_depth: 1,
        decoder_depth: 1,
        num_heads: 2,
        mlp_ratio: 2.0,
        lambda_edge: 0.1,
        image_height: 32,
        image_width: 32,
    }
}

fn toy_schedule() -> TrainSchedule {
    TrainSchedule {
        pretrain_epochs: 2,
        stage1_epochs: 2,
        stage2_epochs: 2,
        refresh_every: 2,
        batch_size: 4,
        mc: McConfig { k: 3, ratio: 0.75, max_passes: None },
        ..TrainSchedule::default()
    }
}

fn toy_corpus(seed: u64) -> (Vec<CaseRecord<f32>>, Vec<CaseRecord<f32>>) {
    let spec = CorpusSpec {
        pretrain_cases: 6,
        target_cases: 5,
        target_prevalence: 0.4,
        max_lesions: 2,
    };
    let mut healthy = Vec::new();
    let mut target = Vec::new();
    for (rec, split) in corpus_cases(&toy_phantom(), &toy_phantom(), &spec, seed).unwrap() {
        match split {
            Split::Pretrain => healthy.push(rec),
            Split::Target => target.push(rec),
        }
    }
    (healthy, target)
}

fn scores_for(seed: u64) -> Vec<(String, bool, u64, Vec<u64>)> {
    let (healthy, target) = toy_corpus(seed);
    let model = toy_model();
    let healthy_cases = prepare_cases(&healthy, model.patch_size).unwrap();
    let target_cases = prepare_cases(&target, model.patch_size).unwrap();
    let out = run_strategy(
        StrategyId::Full,
        &healthy_cases,
        &target_cases,
        model,
        &toy_schedule(),
        seed,
        &mut NoopObserver,
    )
    .unwrap();
    let rows = score_corpus(
        &out.params,
        &target,
        toy_phantom().n_segments,
        &DetectionConfig::default(),
        &toy_schedule().mc,
        seed,
    )
    .unwrap();
    rows.into_iter()
        .map(|r| {
            let segs: Vec<u64> = r.segment_scores.iter().map(|s| s.to_bits()).collect();
            (r.case_id, r.label, r.patient_score.to_bits(), segs)
        })
        .collect()
}

#[test]
fn full_strategy_trains_and_scores_the_target_split() {
    let (healthy, target) = toy_corpus(9);
    let model = toy_model();
    let schedule = toy_schedule();
    let healthy_cases = prepare_cases(&healthy, model.patch_size).unwrap();
    let target_cases = prepare_cases(&target, model.patch_size).unwrap();
    let out = run_strategy(
        StrategyId::Full,
        &healthy_cases,
        &target_cases,
        model,
        &schedule,
        9,
        &mut NoopObserver,
    )
    .unwrap();

    assert_eq!(out.pretrain_log.len(), schedule.pretrain_epochs);
    assert_eq!(out.adapt_log.len(), schedule.adapt_epochs());
    assert!(out.adapt_log.iter().take(schedule.stage1_epochs).all(|e| e.stage == 1));
    assert!(out.adapt_log.iter().skip(schedule.stage1_epochs).all(|e| e.stage == 2));
    assert!(!out.refreshes.is_empty());
    assert!(out.pretrain_log.iter().all(|e| e.mean_total.is_finite()));

    let rows = score_corpus(
        &out.params,
        &target,
        toy_phantom().n_segments,
        &DetectionConfig::default(),
        &schedule.mc,
        9,
    )
    .unwrap();
    assert_eq!(rows.len(), target.len());
    for (row, rec) in rows.iter().zip(&target) {
        assert_eq!(row.case_id, rec.id);
        assert_eq!(row.label, rec.is_anomalous);
        assert_eq!(row.segment_scores.len(), toy_phantom().n_segments);
        assert!(row.patient_score.is_finite() && row.patient_score >= 0.0);
    }
}

#[test]
fn replay_with_the_same_seed_is_bitwise_identical() {
    assert_eq!(scores_for(11), scores_for(11));
}

#[test]
fn different_seeds_give_different_corpora() {
    let (a, _) = toy_corpus(1);
    let (b, _) = toy_corpus(2);
    assert_ne!(
        a[0].image.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b[0].image.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
