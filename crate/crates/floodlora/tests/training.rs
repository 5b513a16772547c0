//! Training-dynamics oracles on small synthetic datasets: overfit sanity,
//! per-strategy loss decrease, freeze discipline, determinism, and
//! masked-autoencoder pretraining behavior.

use floodlora::data::{generate_synthetic, Dataset, FloodSample, Split, SynthConfig};
use floodlora::lora::InitMode;
use floodlora::metrics::LossConfig;
use floodlora::model::{EncoderConfig, SegModel, Strategy};
use floodlora::train::mae::{mae_pretrain, MaeConfig};
use floodlora::train::{evaluate, train, TrainConfig};
use floodlora::tensor::Tensor;

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        patch_size: 8,
        in_channels: 4,
        image_size: 32,
        mlp_ratio: 2,
    }
}

fn small_dataset(seed: u64, n_train: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        image_size: 32,
        n_train,
        n_val: 8,
        n_test: 8,
        n_ood: 8,
        seed,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    (dir, ds)
}

fn pre_snapshots(samples: &[FloodSample]) -> Vec<Tensor> {
    samples.iter().map(|s| s.pre.clone()).collect()
}

#[test]
fn overfit_sanity_full_strategy() {
    // Full fine-tuning drives the train loss under 0.1 on a 16-sample toy
    // set within the 50-epoch budget.
    let (_dir, ds) = small_dataset(1, 16);
    let train_s = ds.load_split(Split::Train).unwrap();
    let val_s = ds.load_split(Split::Val).unwrap();
    let mut model = SegModel::new(small_encoder(), Strategy::Full, InitMode::ZeroB, 1).unwrap();
    let cfg = TrainConfig {
        max_epochs: 50,
        // Keep the scheduler/early-stop from cutting the overfit short.
        early_stop_patience: 50,
        lr: 3e-3,
        weight_decay: 0.0,
        batch_size: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &train_s, &val_s, &cfg, &LossConfig::default()).unwrap();
    let last = out.records.last().unwrap().train_loss;
    assert!(
        out.records.iter().any(|r| r.train_loss < 0.1),
        "train loss never fell below 0.1 (last {last})"
    );
}

#[test]
fn loss_decreases_under_every_strategy() {
    for seed in [3, 4, 5] {
        let (_dir, ds) = small_dataset(seed, 16);
        let train_s = ds.load_split(Split::Train).unwrap();
        let val_s = ds.load_split(Split::Val).unwrap();
        for strategy in [
            Strategy::Full,
            Strategy::Frozen,
            Strategy::lora_with_defaults(4),
        ] {
            let mut model =
                SegModel::new(small_encoder(), strategy, InitMode::ZeroB, seed).unwrap();
            let cfg = TrainConfig {
                max_epochs: 10,
                early_stop_patience: 10,
                lr: 1e-3,
                batch_size: 8,
                seed,
                ..TrainConfig::default()
            };
            let out = train(&mut model, &train_s, &val_s, &cfg, &LossConfig::default()).unwrap();
            let first = out.records.first().unwrap().train_loss;
            let last = out.records.last().unwrap().train_loss;
            assert!(
                last < first,
                "{} seed {seed}: loss {first} → {last} did not decrease",
                strategy.label()
            );
        }
    }
}

#[test]
fn freeze_discipline_is_bitwise() {
    let (_dir, ds) = small_dataset(7, 16);
    let train_s = ds.load_split(Split::Train).unwrap();
    let val_s = ds.load_split(Split::Val).unwrap();
    let cfg = TrainConfig {
        max_epochs: 3,
        early_stop_patience: 10,
        batch_size: 8,
        seed: 7,
        ..TrainConfig::default()
    };

    // Frozen: every encoder parameter is bitwise unchanged by training.
    let mut model = SegModel::new(small_encoder(), Strategy::Frozen, InitMode::ZeroB, 7).unwrap();
    let before: Vec<(String, Vec<u64>)> = model
        .params
        .ids()
        .map(|id| {
            (
                model.params.name(id).to_string(),
                model.params.get(id).data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect();
    let out = train(&mut model, &train_s, &val_s, &cfg, &LossConfig::default()).unwrap();
    assert!(out.records.len() >= 3 || out.stopped_early);
    for (name, bits) in &before {
        let id = model.params.by_name(name).unwrap();
        let now: Vec<u64> = model.params.get(id).data().iter().map(|v| v.to_bits()).collect();
        if name.starts_with("encoder.") {
            assert_eq!(&now, bits, "{name} changed under frozen strategy");
        } else {
            assert_ne!(&now, bits, "{name} never moved during training");
        }
    }

    // LoRA: base encoder weights bitwise unchanged; adapters move.
    let mut model = SegModel::new(
        small_encoder(),
        Strategy::lora_with_defaults(4),
        InitMode::ZeroB,
        7,
    )
    .unwrap();
    let before: Vec<(String, Vec<u64>)> = model
        .params
        .ids()
        .map(|id| {
            (
                model.params.name(id).to_string(),
                model.params.get(id).data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect();
    train(&mut model, &train_s, &val_s, &cfg, &LossConfig::default()).unwrap();
    for (name, bits) in &before {
        let id = model.params.by_name(name).unwrap();
        let now: Vec<u64> = model.params.get(id).data().iter().map(|v| v.to_bits()).collect();
        if name.starts_with("encoder.") && !name.contains(".lora_") {
            assert_eq!(&now, bits, "{name} changed under lora strategy");
        }
        if name.contains(".lora_a") {
            // A receives gradients from step 1 (B starts at zero, so B's
            // first-step gradient through x·B·A can be zero-valued; A's is
            // generically nonzero).
            assert_ne!(&now, bits, "{name} never moved during lora training");
        }
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let (_dir, ds) = small_dataset(11, 12);
    let train_s = ds.load_split(Split::Train).unwrap();
    let val_s = ds.load_split(Split::Val).unwrap();
    let run = || {
        let mut model = SegModel::new(
            small_encoder(),
            Strategy::lora_with_defaults(4),
            InitMode::ZeroB,
            11,
        )
        .unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &train_s, &val_s, &cfg, &LossConfig::default()).unwrap();
        out.records
            .iter()
            .map(|r| {
                (
                    r.epoch,
                    r.train_loss.to_bits(),
                    r.val_loss.to_bits(),
                    r.lr.to_bits(),
                )
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run(), "identical seeds must give bitwise-identical records");
}

#[test]
fn evaluating_ground_truth_scores_one() {
    // Push the model aside entirely: reuse evaluate()'s plumbing by scoring
    // each sample's own mask as the prediction via the metrics API.
    let (_dir, ds) = small_dataset(13, 12);
    let test_s = ds.load_split(Split::Test).unwrap();
    for s in &test_s {
        let r = floodlora::metrics::compute_metrics(&s.mask, &s.mask).unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.iou, 1.0);
    }
}

#[test]
fn split_metrics_equal_summed_sample_counts() {
    let (_dir, ds) = small_dataset(17, 12);
    let test_s = ds.load_split(Split::Test).unwrap();
    let model = SegModel::new(small_encoder(), Strategy::Frozen, InitMode::ZeroB, 17).unwrap();
    let (aggregate, per_sample) = evaluate(&model, &test_s).unwrap();
    let mut counts = floodlora::metrics::ConfusionCounts::default();
    for (_, r) in &per_sample {
        counts.add(&r.counts);
    }
    assert_eq!(aggregate.counts, counts);
    let recomputed = floodlora::metrics::MetricsReport::from_counts(counts);
    assert_eq!(aggregate.f1, recomputed.f1);
}

#[test]
fn evaluate_rejects_empty_split() {
    let model = SegModel::new(small_encoder(), Strategy::Frozen, InitMode::ZeroB, 1).unwrap();
    assert!(evaluate(&model, &[]).is_err());
}

#[test]
fn zero_b_lora_evaluates_identically_to_frozen() {
    let (_dir, ds) = small_dataset(19, 12);
    let test_s = ds.load_split(Split::Test).unwrap();
    let frozen = SegModel::new(small_encoder(), Strategy::Frozen, InitMode::ZeroB, 19).unwrap();
    let lora = frozen.with_strategy(Strategy::lora_with_defaults(4)).unwrap();
    let (a, _) = evaluate(&frozen, &test_s).unwrap();
    let (b, _) = evaluate(&lora, &test_s).unwrap();
    assert_eq!(a.counts, b.counts);
}

#[test]
fn mae_loss_strictly_decreases_over_first_five_epochs() {
    let (_dir, ds) = small_dataset(23, 16);
    let train_s = ds.load_split(Split::Train).unwrap();
    let mut model = SegModel::new(small_encoder(), Strategy::Full, InitMode::ZeroB, 23).unwrap();
    let mae = MaeConfig {
        epochs: 5,
        lr: 1e-3,
        batch_size: 8,
        seed: 23,
        ..MaeConfig::default()
    };
    let out = mae_pretrain(&mut model, &pre_snapshots(&train_s), &mae).unwrap();
    assert_eq!(out.epoch_losses.len(), 5);
    for w in out.epoch_losses.windows(2) {
        assert!(w[1] < w[0], "mae loss not strictly decreasing: {:?}", out.epoch_losses);
    }
}

#[test]
fn pretrained_frozen_beats_random_frozen_downstream() {
    let mut wins = 0;
    for seed in [31, 32, 33] {
        let (_dir, ds) = small_dataset(seed, 24);
        let train_s = ds.load_split(Split::Train).unwrap();
        let val_s = ds.load_split(Split::Val).unwrap();
        let test_s = ds.load_split(Split::Test).unwrap();
        let cfg = TrainConfig {
            max_epochs: 10,
            early_stop_patience: 10,
            lr: 1e-3,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        };

        let f1_of = |pretrain: bool| {
            let mut model =
                SegModel::new(small_encoder(), Strategy::Full, InitMode::ZeroB, seed).unwrap();
            if pretrain {
                let mae = MaeConfig {
                    epochs: 8,
                    lr: 1e-3,
                    batch_size: 8,
                    seed,
                    ..MaeConfig::default()
                };
                mae_pretrain(&mut model, &pre_snapshots(&train_s), &mae).unwrap();
            }
            let mut frozen = model.with_strategy(Strategy::Frozen).unwrap();
            let out = train(&mut frozen, &train_s, &val_s, &cfg, &LossConfig::default()).unwrap();
            let (report, _) = evaluate(&out.best_model, &test_s).unwrap();
            report.f1
        };
        let pretrained = f1_of(true);
        let random = f1_of(false);
        if pretrained > random {
            wins += 1;
        }
        println!("seed {seed}: pretrained F1 {pretrained:.4} vs random F1 {random:.4}");
    }
    assert!(
        wins >= 2,
        "pretrained frozen encoder won only {wins}/3 paired comparisons"
    );
}
