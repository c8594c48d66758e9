mod common;

use alee_core::corpus::{bio_violation, LabelSet, TaskSchema};
use alee_core::encoder::EncoderOutput;
use alee_core::extractor::{decode, one_hot, Task};
use alee_core::metrics::{bio_spans, score};
use alee_core::selection::{balanced, importance, partition, select_batched};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gates_stay_strictly_inside_unit_interval(seed in 0u64..10_000, scale in 0.1f64..4.0, n in 1usize..8) {
        let model = tiny_model(seed % 7, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mem = model.predictor.reset(&model.store).unwrap();
        for _ in 0..3 {
            let enc = EncoderOutput { token_features: random_matrix(&mut rng, n, model.d_h()) * scale };
            let up = model.predictor.smm_update(&model.store, &mem, &enc).unwrap();
            for g in &up.gates {
                prop_assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
            }
            mem = up.memory;
        }
        prop_assert!(mem.is_finite());
    }

    #[test]
    fn reset_is_idempotent(seed in 0u64..10_000, steps in 0usize..5) {
        let model = tiny_model(seed % 5, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = model.predictor.reset(&model.store).unwrap();
        let mut mem = first.clone();
        for _ in 0..steps {
            let enc = EncoderOutput { token_features: random_matrix(&mut rng, 3, model.d_h()) };
            mem = model.predictor.smm_update(&model.store, &mem, &enc).unwrap().memory;
        }
        let again = model.predictor.reset(&model.store).unwrap();
        prop_assert_eq!(again.matrix(Task::Trigger), first.matrix(Task::Trigger));
        prop_assert_eq!(again.matrix(Task::Argument), first.matrix(Task::Argument));
    }

    #[test]
    fn uniform_prediction_has_unit_balanced_loss(k in 2usize..200) {
        let ce = -(1.0 / k as f64).ln();
        prop_assert!((balanced(ce, k).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn decoded_labels_are_well_formed(seed in 0u64..10_000, k in 1usize..4, n in 1usize..9) {
        let schema = TaskSchema::generic(4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds = random_predictions(&mut rng, k, n, 4, &schema);
        let labels = decode(&preds);
        prop_assert_eq!(labels.triggers.len(), k);
        for (t, row) in labels.triggers.iter().zip(&labels.arguments) {
            prop_assert!(*t < schema.num_event_types());
            prop_assert_eq!(row.len(), n);
            prop_assert!(bio_violation(row).is_none());
            if *t == 0 {
                prop_assert!(row.iter().all(|&l| l == 0));
            }
        }
    }

    #[test]
    fn decode_inverts_one_hot(seed in 0u64..10_000) {
        let schema = TaskSchema::generic(4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sentence(&mut rng, "p", 10);
        let triggers: Vec<usize> = s.candidates.iter().map(|_| rng.gen_range(0..schema.num_event_types())).collect();
        let arguments = triggers
            .iter()
            .map(|&t| if t == 0 { vec![0; s.len()] } else { valid_row(&mut rng, s.len(), schema.num_roles()) })
            .collect();
        let labels = LabelSet { triggers, arguments };
        labels.validate(&s, &schema).unwrap();
        prop_assert_eq!(decode(&one_hot(&s, &labels, &schema, 3)), labels);
    }

    #[test]
    fn batch_winners_survive_positive_scaling(seed in 0u64..10_000, len in 1usize..80, q in 1usize..20, c in 0.01f64..100.0) {
        let ids: Vec<String> = (0..len).map(|i| format!("s{i:03}")).collect();
        let refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..2.0)).collect();
        let run = |factor: f64| {
            select_batched(&refs, q, seed, |i| Ok(scores[i] * factor), |_| Ok(())).unwrap().1
        };
        prop_assert_eq!(run(1.0), run(c));
    }

    #[test]
    fn partition_conserves_the_pool(seed in 0u64..10_000, len in 1usize..300, q in 1usize..60) {
        let q = q.min(len);
        let ids: Vec<String> = (0..len).map(|i| format!("u{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        let batches = partition(&refs, q, seed);
        prop_assert_eq!(batches.len(), q);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn batched_selection_picks_distinct_members(seed in 0u64..10_000, len in 1usize..120, q in 1usize..40) {
        let ids: Vec<String> = (0..len).map(|i| format!("x{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (batches, picks, _) = select_batched(&refs, q, seed, |i| Ok(scores[i]), |_| Ok(())).unwrap();
        prop_assert_eq!(picks.len(), q.min(len));
        for (b, p) in batches.iter().zip(&picks) {
            prop_assert!(b.contains(p));
            prop_assert!(b.iter().all(|&i| scores[i] <= scores[*p]));
        }
    }

    #[test]
    fn importance_is_bounded_and_shrinks_with_m(v in prop::collection::vec(0.0f64..5.0, 1..40), m in 1usize..40) {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(0.0, f64::max);
        let a = importance(&v, Some(m));
        prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
        prop_assert!(importance(&v, Some(m + 1)) <= a + 1e-12);
        prop_assert!((importance(&v, None) - importance(&v, Some(v.len()))).abs() < 1e-12);
    }
}

#[test]
fn spans_of_a_hand_written_row() {
    // O B-0 I-0 B-1 I-1 I-1 O I-0
    let row = [0, 1, 2, 3, 4, 4, 0, 2];
    assert_eq!(bio_spans(&row), vec![(1, 3, 0), (3, 6, 1), (7, 8, 0)]);
}

#[test]
fn scores_of_a_hand_written_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = random_sentence(&mut rng, "h", 5);
    s.tokens = vec!["a".into(), "b".into(), "c".into(), "d".into()];
    s.candidates.truncate(0);
    for start in [0, 2] {
        s.candidates.push(alee_core::corpus::TriggerCandidate {
            start,
            end: start + 1,
            pos: alee_core::corpus::PosTag::Verb,
        });
    }
    let gold = LabelSet {
        triggers: vec![1, 2],
        arguments: vec![vec![0, 1, 0, 0], vec![0, 0, 0, 3]],
    };
    // first trigger right with a wrong argument span, second called NA
    let pred = LabelSet {
        triggers: vec![1, 0],
        arguments: vec![vec![0, 1, 2, 0], vec![0; 4]],
    };
    let r = score(&[(&s, &gold, &pred)]).unwrap();
    assert!((r.trigger.precision - 1.0).abs() < 1e-12);
    assert!((r.trigger.recall - 0.5).abs() < 1e-12);
    assert!((r.trigger.f1 - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.argument.f1, 0.0);
}
