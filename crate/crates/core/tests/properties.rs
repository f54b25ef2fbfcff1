mod common;

use csn_core::backbone::{init_backbone, BackboneSpec, ParamGroup, ParamStore, StageSpec, Task};
use csn_core::data::{container, make_folds, select_reference, DatasetManifest, FrameRecord};
use csn_core::losses::{compute_weights, loss_reg_cos, loss_reg_mse, IntensityCounts, LabelBatch};
use csn_core::metrics::{icc31, mae, PredictionRow, PredictionSet};
use csn_core::optim::{AdamConfig, OptimState};
use csn_core::siamese::{predict, MergePoint, PredictOptions, PredictionMode};
use csn_core::{Tape, Tensor};
use proptest::prelude::*;

fn counts() -> impl Strategy<Value = Vec<[u64; 6]>> {
    prop::collection::vec(prop::array::uniform6(prop_oneof![Just(0u64), 0u64..50, 0u64..5000]), 1..8)
}

fn signed_counts(rows: &[[u64; 6]]) -> IntensityCounts {
    IntensityCounts::new(rows.iter().map(|r| r.map(|c| c as i64)).collect()).unwrap()
}

proptest! {
    #[test]
    fn weight_tables_are_normalized(rows in counts()) {
        let t = compute_weights(&signed_counts(&rows));
        for i in 0..rows.len() {
            prop_assert!((t.reg[i][0] + t.reg[i][2] - 1.0).abs() < 1e-9);
            prop_assert_eq!(t.reg[i][0], t.reg[i][1]);
            prop_assert!(t.reg[i][2..].iter().all(|&w| w == t.reg[i][2]));
            let class_sum: f64 = t.class[i].iter().flatten().sum();
            prop_assert!((class_sum - 1.0).abs() < 1e-9);
            prop_assert!((t.det[i][0] + t.det[i][1] - 1.0).abs() < 1e-9);
            let all = t.reg[i].iter().chain(t.class[i].iter().flatten()).chain(&t.det[i]);
            for &w in all {
                prop_assert!(w.is_finite() && w >= 0.0);
            }
        }
    }

    #[test]
    fn weight_tables_match_the_count_formulas(rows in counts()) {
        let t = compute_weights(&signed_counts(&rows));
        for (i, n) in rows.iter().enumerate() {
            let (reg, class, det) = common::weights(n);
            for j in 0..6 {
                prop_assert!(common::close(t.reg[i][j], reg[j], 1e-12));
            }
            for j in 0..5 {
                for c in 0..2 {
                    prop_assert!(common::close(t.class[i][j][c], class[j][c], 1e-12));
                }
            }
            prop_assert!(common::close(t.det[i][1], det[1], 1e-12));
        }
    }

    #[test]
    fn weights_are_scale_invariant(row in prop::array::uniform6(1u64..1000), scale in 2u64..50) {
        let a = compute_weights(&signed_counts(&[row]));
        let b = compute_weights(&signed_counts(&[row.map(|c| c * scale)]));
        for j in 0..6 {
            prop_assert!((a.reg[0][j] - b.reg[0][j]).abs() < 1e-12);
        }
        for j in 0..5 {
            prop_assert!((a.class[0][j][0] - b.class[0][j][0]).abs() < 1e-12);
            prop_assert!((a.class[0][j][1] - b.class[0][j][1]).abs() < 1e-12);
        }
        prop_assert!((a.det[0][1] - b.det[0][1]).abs() < 1e-12);
    }

    #[test]
    fn losses_are_nonnegative(y in prop::collection::vec(0u8..=5, 1..7), seed in any::<u64>()) {
        let n = y.len();
        let reg: Vec<f64> = (0..n).map(|i| ((seed >> (i % 60)) & 0xff) as f64 / 40.0 - 1.0).collect();
        let w = compute_weights(&IntensityCounts::from_labels(n, [y.as_slice()]).unwrap());
        let mut tape = Tape::no_grad();
        let lb = LabelBatch::from_rows(&[y.clone()]).unwrap();
        let r = tape.constant(Tensor::new(vec![1, n], reg).unwrap());
        let m = loss_reg_mse(&mut tape, &lb, r, &w).unwrap();
        let c = loss_reg_cos(&mut tape, &lb, r).unwrap();
        prop_assert!(tape.value(m).data()[0] >= 0.0);
        let cv = tape.value(c).data()[0];
        prop_assert!((-1e-12..=2.0).contains(&cv));
    }

    #[test]
    fn cosine_loss_ignores_positive_prediction_scale(
        y in prop::collection::vec(1u8..=5, 2..6),
        scale in 0.1f64..10.0,
    ) {
        let n = y.len();
        let lb = LabelBatch::from_rows(&[y.clone()]).unwrap();
        let reg: Vec<f64> = (0..n).map(|i| 0.5 + i as f64).collect();
        let mut tape = Tape::no_grad();
        let a = tape.constant(Tensor::new(vec![1, n], reg.clone()).unwrap());
        let b = tape.constant(Tensor::new(vec![1, n], reg.iter().map(|v| v * scale).collect()).unwrap());
        let la = loss_reg_cos(&mut tape, &lb, a).unwrap();
        let lb2 = loss_reg_cos(&mut tape, &lb, b).unwrap();
        prop_assert!((tape.value(la).data()[0] - tape.value(lb2).data()[0]).abs() < 1e-7);
    }

    #[test]
    fn icc_symmetry_offset_and_range(
        x in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40),
        shift in -10.0f64..10.0,
        scale in 0.1f64..10.0,
    ) {
        let v = icc31(&x).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
        let swapped: Vec<(f64, f64)> = x.iter().map(|&(a, b)| (b, a)).collect();
        prop_assert!((icc31(&swapped).unwrap() - v).abs() < 1e-9);
        let shifted: Vec<(f64, f64)> = x.iter().map(|&(a, b)| (a, b + shift)).collect();
        prop_assert!((icc31(&shifted).unwrap() - v).abs() < 1e-9);
        let scaled: Vec<(f64, f64)> = x.iter().map(|&(a, b)| (a * scale, b * scale)).collect();
        prop_assert!((icc31(&scaled).unwrap() - v).abs() < 1e-9);
    }

    #[test]
    fn mae_of_a_constant_shift(labels in prop::collection::vec(0u8..=5, 1..30), shift in -3.0f64..3.0) {
        let mut set = PredictionSet::new(vec!["1".into()]);
        for (f, &l) in labels.iter().enumerate() {
            set.push(PredictionRow { participant: "a".into(), frame: f as u32, au: 0, label: l, prediction: l as f64 + shift }).unwrap();
        }
        prop_assert!((mae(&set, 0).unwrap() - shift.abs()).abs() < 1e-12);
    }

    #[test]
    fn folds_partition_participants(n in 1usize..30, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let m = manifest_with(n, 1);
        let f = make_folds(&m, k, seed).unwrap();
        f.validate(&m).unwrap();
        prop_assert_eq!(f.assignment.len(), n);
        let sizes: Vec<usize> = (0..k).map(|i| f.members(i).len()).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(&f, &make_folds(&m, k, seed).unwrap());
    }

    #[test]
    fn reference_has_minimal_label_sum(labels in prop::collection::vec(prop::collection::vec(0u8..=5, 3), 1..20)) {
        let mut m = manifest_with(1, labels.len());
        for (r, l) in m.records.iter_mut().zip(&labels) {
            r.intensities = l.clone();
        }
        let f = select_reference(&m, "p0").unwrap();
        let sum = |v: &[u8]| v.iter().map(|&x| x as u32).sum::<u32>();
        let chosen = sum(&labels[f as usize]);
        prop_assert!(labels.iter().all(|l| sum(l) >= chosen));
        prop_assert!(labels[..f as usize].iter().all(|l| sum(l) > chosen));
    }

    #[test]
    fn manifest_round_trip(n in 1usize..5, frames in 1usize..5, flag in any::<bool>()) {
        let mut m = manifest_with(n, frames);
        m.records[0].is_reference = flag;
        m.provenance = "generated for a property test".into();
        prop_assert_eq!(DatasetManifest::parse(&m.to_csv(), "mem").unwrap(), m);
    }

    #[test]
    fn container_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 0..5), salt in any::<u32>()) {
        let entries: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let t = Tensor::from_fn(s.clone(), |k| ((k as u32 ^ salt) % 1000) as f32 as f64 / 7.0f32 as f64);
                // Keep values exactly representable in f32.
                let t = Tensor::new(s.clone(), t.data().iter().map(|&v| v as f32 as f64).collect()).unwrap();
                (format!("t{i}"), t)
            })
            .collect();
        prop_assert_eq!(container::decode(&container::encode(&entries).unwrap()).unwrap(), entries);
    }

    #[test]
    fn adam_is_deterministic_and_finite(g in prop::collection::vec(-100.0f64..100.0, 1..10), steps in 1usize..5) {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_fn(vec![g.len()], |i| i as f64), ParamGroup::Rest).unwrap();
        let grad = Tensor::new(vec![g.len()], g.clone()).unwrap();
        let mut a = (p.clone(), OptimState::new(AdamConfig::default(), &p).unwrap());
        let mut b = a.clone();
        for _ in 0..steps {
            a.1.step(&mut a.0, std::slice::from_ref(&grad)).unwrap();
            b.1.step(&mut b.0, std::slice::from_ref(&grad)).unwrap();
        }
        prop_assert_eq!(&a.0, &b.0);
        prop_assert!(a.0.iter().all(|p| p.tensor.is_finite()));
        prop_assert!(a.1.to_entries(&a.0).iter().all(|(_, t)| t.is_finite()));
    }
}

fn manifest_with(participants: usize, frames: usize) -> DatasetManifest {
    DatasetManifest {
        au_names: vec!["1".into(), "2".into(), "4".into()],
        records: (0..participants)
            .flat_map(|p| {
                (0..frames).map(move |f| FrameRecord {
                    participant: format!("p{p}"),
                    frame: f as u32,
                    image: format!("x.csnt#p{p}/{f}"),
                    is_reference: false,
                    intensities: vec![(f % 6) as u8, 0, 1],
                })
            })
            .collect(),
        provenance: String::new(),
    }
}

fn small_spec(task: Task) -> BackboneSpec {
    BackboneSpec {
        input: (1, 8, 8),
        stages: vec![StageSpec { channels: 3, blocks: 1 }, StageSpec { channels: 4, blocks: 1 }],
        hidden: 5,
        num_aus: 3,
        task,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn calibration_null_property(seed in any::<u64>(), merge_idx in 0usize..4) {
        let spec = small_spec(Task::Intensity);
        let params = init_backbone(&spec, seed).unwrap();
        let merge = MergePoint::all(2)[merge_idx];
        let x = Tensor::from_fn(vec![3, 1, 8, 8], |i| ((i as u64).wrapping_mul(seed | 1) % 97) as f64 / 50.0);
        let out = predict(&spec, &params, PredictionMode::OfcCsn(merge), &x, Some(&x), &PredictOptions::default()).unwrap();
        for b in 1..3 {
            for a in 0..3 {
                prop_assert_eq!(out.data()[b * 3 + a], out.data()[a]);
            }
        }
    }

    #[test]
    fn swapping_branches_negates_output_merge(seed in any::<u64>()) {
        let spec = small_spec(Task::Intensity);
        let params = init_backbone(&spec, seed).unwrap();
        let x = Tensor::from_fn(vec![2, 1, 8, 8], |i| (i as f64 * 0.37).sin());
        let r = Tensor::from_fn(vec![2, 1, 8, 8], |i| (i as f64 * 0.11).cos());
        let mode = PredictionMode::OfcCsn(MergePoint::Output);
        let a = predict(&spec, &params, mode, &x, Some(&r), &PredictOptions::default()).unwrap();
        let b = predict(&spec, &params, mode, &r, Some(&x), &PredictOptions::default()).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert_eq!(*u, -*v);
        }
    }
}
