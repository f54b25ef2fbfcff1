mod common;

use std::time::Instant;

use csn_core::backbone::{init_backbone, StageSpec};
use csn_core::data::container;
use csn_core::data::synth::SynthConfig;
use csn_core::harness::{
    backbone_for, load_data, mean_loss, predict_split, run_ablation, train, DataSource, ExperimentConfig, FoldSplit,
    Sample, TrainSettings,
};
use csn_core::losses::WeightTables;
use csn_core::metrics::build_report;
use csn_core::siamese::{FcMergeInput, MergePoint, PredictOptions, PredictionMode};
use csn_core::optim::AdamConfig;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data = DataSource::Synthetic(SynthConfig {
        participants: 4,
        frames: 30,
        image_size: 16,
        num_aus: 3,
        ..Default::default()
    });
    cfg.stages = vec![StageSpec { channels: 4, blocks: 1 }, StageSpec { channels: 8, blocks: 1 }];
    cfg.hidden = 8;
    cfg.batch_size = 8;
    cfg.folds = 2;
    cfg.modes = vec![PredictionMode::Ncg, PredictionMode::OfcCsn(MergePoint::Stage(2))];
    cfg.ablate_merges = MergePoint::all(2);
    cfg
}

fn settings(seed: u64, epochs: usize) -> TrainSettings {
    TrainSettings {
        epochs,
        batch_size: 8,
        seed,
        optim: AdamConfig {
            lr_last: 1e-3,
            lr_rest: 1e-3,
            ..Default::default()
        },
        fc_input: FcMergeInput::Pooled,
    }
}

#[test]
fn training_reduces_loss_over_three_epochs() {
    let cfg = tiny();
    let data = load_data(&cfg).unwrap();
    let spec = backbone_for(&cfg, &data).unwrap();
    let samples: Vec<Sample> = (0..data.images.len()).map(|i| Sample { target: i, reference: None }).collect();
    let weights = WeightTables::uniform(3);
    let mut deltas = Vec::new();
    for seed in [1, 2, 3] {
        let init = init_backbone(&spec, seed).unwrap();
        let before = mean_loss(&spec, &init, &data, &samples, None, &weights, FcMergeInput::Pooled, 32).unwrap();
        let (trained, log) = train(&spec, &data, &samples, None, &weights, &settings(seed, 3)).unwrap();
        let after = mean_loss(&spec, &trained, &data, &samples, None, &weights, FcMergeInput::Pooled, 32).unwrap();
        assert_eq!(log.epochs.len(), 3);
        deltas.push(after - before);
    }
    assert!(common::median(deltas.clone()) < 0.0, "{deltas:?}");
}

#[test]
fn identical_seeds_give_bitwise_identical_checkpoints() {
    let cfg = tiny();
    let data = load_data(&cfg).unwrap();
    let spec = backbone_for(&cfg, &data).unwrap();
    let samples: Vec<Sample> = (0..40).map(|i| Sample { target: i, reference: Some(0) }).collect();
    let weights = WeightTables::uniform(3);
    let run = || {
        let (p, _) = train(&spec, &data, &samples, Some(MergePoint::Stage(2)), &weights, &settings(9, 2)).unwrap();
        container::encode(&p.named_tensors()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn self_referenced_siamese_training_learns_a_constant() {
    let cfg = tiny();
    let data = load_data(&cfg).unwrap();
    let spec = backbone_for(&cfg, &data).unwrap();
    let samples: Vec<Sample> = (0..data.images.len()).map(|i| Sample { target: i, reference: Some(i) }).collect();
    let weights = WeightTables::uniform(3);
    let merge = Some(MergePoint::Stage(1));
    let init = init_backbone(&spec, 4).unwrap();
    let before = mean_loss(&spec, &init, &data, &samples, merge, &weights, FcMergeInput::Pooled, 32).unwrap();
    let (trained, _) = train(&spec, &data, &samples, merge, &weights, &settings(4, 3)).unwrap();
    let after = mean_loss(&spec, &trained, &data, &samples, merge, &weights, FcMergeInput::Pooled, 32).unwrap();
    assert!(after < before, "{before} -> {after}");

    let x = data.batch(&[0, 5, 17]).unwrap();
    let out = csn_core::siamese::predict(
        &spec,
        &trained,
        PredictionMode::OfcCsn(MergePoint::Stage(1)),
        &x,
        Some(&x),
        &PredictOptions::default(),
    )
    .unwrap();
    for b in 1..3 {
        assert_eq!(&out.data()[b * 3..b * 3 + 3], &out.data()[..3]);
    }
}

#[test]
fn output_merge_row_at_init_equals_baseline_subtraction() {
    let cfg = tiny();
    let data = load_data(&cfg).unwrap();
    let spec = backbone_for(&cfg, &data).unwrap();
    let folds = csn_core::data::make_folds(&data.manifest, 2, cfg.seed).unwrap();
    let params = init_backbone(&spec, 3).unwrap();
    let mut reports = Vec::new();
    for mode in [PredictionMode::OfcBs, PredictionMode::OfcCsn(MergePoint::Output)] {
        let sets: Vec<_> = (0..2)
            .map(|f| predict_split(&cfg, &spec, &params, &data, &FoldSplit::new(&data, &folds, f).unwrap(), mode).unwrap())
            .collect();
        reports.push(build_report("m", cfg.task, &sets, None).unwrap());
    }
    for (a, b) in reports[0].metrics.iter().zip(&reports[1].metrics) {
        for (x, y) in a.per_au.iter().zip(&b.per_au) {
            assert!((x - y).abs() < 1e-9, "{}: {x} vs {y}", a.metric);
        }
    }
}

/// Six Siamese variants on the default synthetic config with the desk
/// training recipe, within a 30 minute CPU budget.
#[test]
fn six_variant_ablation_fits_the_budget() {
    let mut cfg = ExperimentConfig::default();
    cfg.optim.lr_last = 1e-3;
    cfg.optim.lr_rest = 1e-3;
    cfg.batch_size = 16;
    let start = Instant::now();
    let data = load_data(&cfg).unwrap();
    let merges = MergePoint::all(4);
    let r = run_ablation(&cfg, &data, &merges).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(r.modes.len(), 6);
    println!("six-variant ablation: {secs:.1}s");
    for m in &r.modes {
        println!("{}: ICC {:.3}", m.mode, m.report.metric(csn_core::metrics::ICC_ACROSS).unwrap().average);
    }
    assert!(secs < 1800.0);
}
