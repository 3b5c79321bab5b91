use std::collections::HashMap;

use proptest::prelude::*;
use vlprobe::analysis::{attention_flow, similarity_probe, RegionGrid};
use vlprobe::metrics::{report_from_predictions, PositionReport, SampleCounts};
use vlprobe::model::{align_projector, AdamConfig};
use vlprobe::probe::{gen_library, gen_probe, prompt, Label, ProbeParams};
use vlprobe::{Matrix, Model, ModelConfig, MultimodalInput, Scheme};

fn tiny_config(seed: u64, scheme: Scheme, vocab: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        head_dim: 4,
        num_heads: 2,
        num_layers: 2,
        mlp_dim: 8,
        patch_dim: 4,
        text_vocab_size: prompt::text_vocab_size(vocab),
        scheme,
        seed,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn eval_split_is_positionally_and_label_balanced(vocab in 10usize..40, keys in 1usize..6, seed in 0u64..1000) {
        let keys = keys.min(vocab - 9);
        let lib = gen_library(vocab, 3, seed).unwrap();
        let ds = gen_probe(&lib, &ProbeParams { num_keys: keys, train_size: 8, disjoint_keys: false }, seed).unwrap();
        prop_assert_eq!(ds.eval.len(), keys * 18);
        let mut per_slot: Vec<HashMap<(usize, usize, Label), usize>> = vec![HashMap::new(); 9];
        for s in &ds.eval {
            *per_slot[s.slot].entry((s.key_id, s.caption_id, s.label)).or_default() += 1;
            prop_assert!(!s.distractor_ids.contains(&s.key_id));
        }
        prop_assert!(per_slot.iter().all(|m| *m == per_slot[0]));
        prop_assert_eq!(2 * ds.eval.iter().filter(|s| s.label.is_yes()).count(), ds.eval.len());
        let again = gen_probe(&lib, &ProbeParams { num_keys: keys, train_size: 8, disjoint_keys: false }, seed).unwrap();
        prop_assert_eq!(again, ds);
    }

    #[test]
    fn report_statistics_recompute_exactly(correct in proptest::array::uniform9(0usize..=10), neg in 0usize..=90) {
        let counts = SampleCounts { positives: [10; 9], correct, negatives: 90, correct_negatives: neg };
        let r = PositionReport::from_counts(Scheme::Sequential, 1, counts, "h").unwrap();
        let mean = r.acc.iter().sum::<f64>() / 9.0;
        let var = r.acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 9.0;
        prop_assert!(r.acc.iter().all(|a| (0.0..=1.0).contains(a)));
        prop_assert!((r.avg - mean).abs() <= 1e-12);
        prop_assert!((r.delta - var).abs() <= 1e-12);
        prop_assert!(r.delta >= 0.0);
        prop_assert_eq!(r.delta == 0.0, correct.iter().all(|&c| c == correct[0]));
        prop_assert_eq!(PositionReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn regions_cover_every_patch_once(rows in 1usize..5, cols in 1usize..5, h in 1usize..4, w in 1usize..4) {
        let parts = RegionGrid { rows, cols }.regions(rows * h, cols * w).unwrap();
        let mut seen = vec![0; rows * h * cols * w];
        for p in parts.iter().flatten() {
            seen[*p] += 1;
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
        prop_assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), rows * h * cols * w);
    }

    #[test]
    fn flow_conserves_image_mass(seed in 0u64..500, bapa in any::<bool>()) {
        let scheme = if bapa { Scheme::Bapa } else { Scheme::Sequential };
        let model = Model::init(tiny_config(seed, scheme, 12)).unwrap();
        let lib = gen_library(12, 4, seed).unwrap();
        let inputs: Vec<MultimodalInput> = (0..3)
            .map(|k| {
                let cells: Vec<Option<usize>> = (0..9).map(|c| Some((c + k) % 12)).collect();
                MultimodalInput::new(vec![0, 1], lib.compose(&cells, &[0.0; 4]).unwrap(), 3, vec![2, prompt::caption_token(k)]).unwrap()
            })
            .collect();
        let flow = attention_flow(&model, &inputs).unwrap();
        prop_assert!(flow.conservation_gap() <= 1e-9);
        prop_assert!(flow.values.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(flow.image_mass <= 1.0 + 1e-12);
    }
}

#[test]
fn spreadsheet_example() {
    let acc = [0.8, 1.0, 0.9, 0.7, 1.0, 0.6, 0.9, 0.8, 1.0];
    let counts = SampleCounts {
        positives: [10; 9],
        correct: acc.map(|a| (a * 10.0_f64).round() as usize),
        negatives: 0,
        correct_negatives: 0,
    };
    let r = PositionReport::from_counts(Scheme::Sequential, 0, counts, "h").unwrap();
    // Exact rational values: mean 77/90, squared deviations sum to 73/450.
    assert!((r.avg - 77.0 / 90.0).abs() < 1e-12);
    assert!((r.delta - 73.0 / 4050.0).abs() < 1e-12);
    assert!((r.delta_sample - 73.0 / 3600.0).abs() < 1e-12);
}

#[test]
fn constant_yes_predictor() {
    let lib = gen_library(16, 4, 0).unwrap();
    let ds = gen_probe(&lib, &ProbeParams { num_keys: 4, train_size: 4, disjoint_keys: false }, 0).unwrap();
    let r = report_from_predictions(&ds, Scheme::Bapa, 0, &vec![true; ds.eval.len()]).unwrap();
    assert_eq!((r.acc, r.acc_neg, r.avg, r.delta), ([1.0; 9], 0.0, 1.0, 0.0));
    assert!((r.overall_accuracy() - 0.5).abs() < 1e-15);
    assert!(report_from_predictions(&ds, Scheme::Bapa, 0, &[true]).is_err());
}

#[test]
fn aligned_projector_prefers_the_matching_caption() {
    let lib = gen_library(16, 4, 2).unwrap();
    let cfg = ModelConfig {
        embed_dim: 32,
        head_dim: 16,
        ..tiny_config(2, Scheme::Bapa, 16)
    };
    let mut model = Model::init(cfg).unwrap();
    // Align on the probe's own layout: one pattern, background elsewhere.
    let pairs: Vec<(Matrix, usize, usize)> = (0..16)
        .map(|m| {
            let mut cells = [None; 9];
            cells[0] = Some(m);
            (lib.compose(&cells, &[0.0; 4]).unwrap(), 3, prompt::caption_token(m))
        })
        .collect();
    let history = align_projector(&mut model, &pairs, 400, AdamConfig { lr: 1e-2, ..AdamConfig::default() }).unwrap();
    assert!(history.last().unwrap() > &history[0]);
    let bg = [0.0; 4];
    let mut wins = 0;
    for key in 0..16 {
        let matched = similarity_probe(&model, &lib, key, prompt::caption_token(key), &bg).unwrap();
        let other = similarity_probe(&model, &lib, key, prompt::caption_token((key + 1) % 16), &bg).unwrap();
        wins += usize::from(matched[4].score > other[4].score);
    }
    assert!(wins >= 14, "matched caption scored higher for {wins}/16 keys");
}
