//! Property tests for the selection, schedule and persistence invariants.

use std::collections::BTreeMap;

use proptest::prelude::*;

use framedistill::autodiff::Tensor;
use framedistill::par::Execution;
use framedistill::prompter::{argmax, gumbel_select_with_noise, tau_schedule};
use framedistill::qformer::index_overlap;
use framedistill::synth::{expected_recall_by_enumeration, generate, uniform_indices, DatasetSpec, Placement};
use framedistill::train::metrics::{read_csv, MetricsWriter};
use framedistill::train::model::keyframe_recall;
use framedistill::train::optim::{clip_global_norm, cosine_lr};
use framedistill::train::MetricsRow;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, -1.0..1.0f64, any::<f64>().prop_filter("finite", |v| v.is_finite())]
}

proptest! {
    #[test]
    fn uniform_indices_pick_one_frame_per_segment(k in 1usize..9, per in 1usize..9) {
        let t = k * per;
        let idx = uniform_indices(t, k);
        prop_assert_eq!(idx.len(), k);
        for (i, &f) in idx.iter().enumerate() {
            prop_assert_eq!(f / per, i);
        }
    }

    #[test]
    fn one_pick_per_segment_recalls_k_over_t(k in 1usize..6, per in 1usize..7, offsets in prop::collection::vec(0usize..100, 6)) {
        let spec = DatasetSpec { frames: k * per, keyframes: k, placement: Placement::OnePerSegment, ..DatasetSpec::default() };
        let picks: Vec<usize> = (0..k).map(|i| i * per + offsets[i] % per).collect();
        let r = expected_recall_by_enumeration(&spec, &picks);
        prop_assert!((r - 1.0 / per as f64).abs() < 1e-12, "{}", r);
    }

    #[test]
    fn tau_decreases_between_its_endpoints(total in 1usize..5000, a in 0usize..5000, b in 0usize..5000, end in 1e-4..1.0f64) {
        let (a, b) = (a % (total + 1), b % (total + 1));
        let (lo, hi) = (a.min(b), a.max(b));
        let t_lo = tau_schedule(lo, total, 1.0, end).unwrap();
        let t_hi = tau_schedule(hi, total, 1.0, end).unwrap();
        prop_assert!(t_hi <= t_lo);
        prop_assert!(t_hi >= end && t_lo <= 1.0);
    }

    #[test]
    fn cosine_lr_stays_between_floor_and_peak(total in 1usize..5000, step in 0usize..5000, peak in 1e-5..1.0f64, frac in 0.0..1.0f64) {
        let step = step % (total + 1);
        let floor = peak * frac;
        let lr = cosine_lr(step, total, peak, floor).unwrap();
        prop_assert!(lr >= floor - 1e-15 && lr <= peak + 1e-15);
    }

    #[test]
    fn clipping_caps_the_norm_and_keeps_direction(v in prop::collection::vec(-100.0..100.0f64, 1..20), cap in 0.01..50.0f64) {
        let n = v.len();
        let mut g = BTreeMap::from([("w".to_string(), Tensor::new(vec![n], v.clone()).unwrap())]);
        let before = clip_global_norm(&mut g, cap);
        let after: f64 = g["w"].data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(after <= cap * (1.0 + 1e-12) || after == before);
        let s = if before > cap { cap / before } else { 1.0 };
        for (x, y) in v.iter().zip(g["w"].data()) {
            prop_assert!((x * s - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn segmented_selection_takes_exactly_one_frame_per_segment(
        b in 1usize..4, s in 1usize..5, l in 1usize..6, seed in any::<u64>(), zero_noise in any::<bool>()
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::randn(&[b, s, l], 2.0, &mut rng);
        let noise = if zero_noise { Tensor::zeros(&[b, s, l]) } else { Tensor::randn(&[b, s, l], 1.0, &mut rng) };
        let mask = gumbel_select_with_noise(&logits, &noise).unwrap();
        for (row, picks) in mask.selected_indices.iter().enumerate() {
            prop_assert_eq!(picks.len(), s);
            for (seg, &f) in picks.iter().enumerate() {
                prop_assert_eq!(f / l, seg);
                if zero_noise {
                    let base = (row * s + seg) * l;
                    prop_assert_eq!(f % l, argmax(&logits.data()[base..base + l]));
                }
            }
        }
        prop_assert!(mask.hard.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn overlap_and_recall_are_fractions(rows in prop::collection::vec((prop::collection::btree_set(0usize..32, 1..8), prop::collection::btree_set(0usize..32, 1..8)), 1..10)) {
        let a: Vec<Vec<usize>> = rows.iter().map(|(x, _)| x.iter().copied().collect()).collect();
        let b: Vec<Vec<usize>> = rows.iter().map(|(_, y)| y.iter().copied().collect()).collect();
        let o = index_overlap(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert_eq!(index_overlap(&a, &a).unwrap(), 1.0);
        let r = keyframe_recall(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(keyframe_recall(&b, &b), 1.0);
    }

    #[test]
    fn metrics_rows_round_trip_bit_exactly(
        vals in prop::collection::vec(finite(), 6),
        step in 0usize..1_000_000,
        flags in any::<(bool, bool)>(),
    ) {
        let row = MetricsRow {
            step,
            split: if flags.0 { "train".into() } else { "val".into() },
            loss_vqa: Some(vals[0]),
            loss_distill: flags.1.then_some(vals[1]),
            loss_total: Some(vals[2]),
            accuracy: vals[3],
            keyframe_recall: None,
            selection_overlap: flags.1.then_some(vals[4]),
            tau: Some(vals[5]),
            lr: None,
            grad_norm: Some(vals[0] * 0.5),
            clipped: Some(flags.0),
            wallclock_ms: None,
        };
        let dir = tempfile::tempdir().unwrap();
        {
            let mut w = MetricsWriter::open(dir.path(), "m", false).unwrap();
            w.write(&row).unwrap();
            w.flush().unwrap();
        }
        let back = read_csv(&dir.path().join("m.csv")).unwrap();
        prop_assert_eq!(back, vec![row.clone()]);
        let line = std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
        let parsed: MetricsRow = serde_json::from_str(line.trim()).unwrap();
        prop_assert_eq!(parsed, row);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_keyframes_follow_their_placement(seed in any::<u64>(), which in 0usize..3) {
        let placement = [Placement::OnePerSegment, Placement::Clustered, Placement::UniformRandom][which];
        let spec = DatasetSpec { num_train: 6, num_val: 2, seed, placement, ..DatasetSpec::default() };
        let data = generate(&spec, Execution::Sequential).unwrap();
        let len = spec.frames / spec.keyframes;
        for s in data.train.iter().chain(&data.val) {
            prop_assert_eq!(s.keyframes.len(), spec.keyframes);
            prop_assert!(s.keyframes.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.answer_idx < spec.choices);
            match placement {
                Placement::OnePerSegment => {
                    for (i, &f) in s.keyframes.iter().enumerate() {
                        prop_assert_eq!(f / len, i);
                    }
                }
                Placement::Clustered => prop_assert_eq!(s.keyframes[spec.keyframes - 1] - s.keyframes[0], spec.keyframes - 1),
                Placement::UniformRandom => prop_assert!(s.keyframes.iter().all(|&f| f < spec.frames)),
            }
        }
    }
}
