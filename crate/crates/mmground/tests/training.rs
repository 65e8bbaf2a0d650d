//! End-to-end training-loop contracts on a miniature corpus.

use mmground::grounder::GrounderConfig;
use mmground::model::ModelConfig;
use mmground::scenegen::{Dataset, SceneSpec};
use mmground::trainer::{
    load_checkpoint, save_checkpoint, train, AblationToggles, TrainConfig, Trainer,
};

fn tiny_dataset(seed: u64) -> Dataset {
    let spec = SceneSpec {
        image_size: 32,
        object_count_range: (1, 2),
        seed,
        ..SceneSpec::default()
    };
    Dataset::generate(&spec, 24, 0.25).unwrap()
}

fn tiny_config(seed: u64, total_steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps,
        warmup_steps: (total_steps / 10).max(1),
        seed,
        model: ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            image_size: 32,
            patch_size: 8,
            max_seq_len: 96,
            vocab_size: 0,
            ..ModelConfig::default()
        },
        grounder: GrounderConfig {
            image_size: 32,
            d_model: 32,
            d_ground: 16,
            enc_channels: (6, 10),
            mask_head_hidden: 8,
            bbox_hidden: 12,
            seed: 0,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seed_identical_checkpoint() {
    let ds = tiny_dataset(5);
    let config = tiny_config(7, 3);
    let a = train::<f32>(&config, &ds).unwrap();
    let b = train::<f32>(&config, &ds).unwrap();
    assert_eq!(
        a.trainer.model.params.checksum(),
        b.trainer.model.params.checksum()
    );
    assert_eq!(
        a.trainer.grounder.params.checksum(),
        b.trainer.grounder.params.checksum()
    );
    for (ra, rb) in a.log.iter().zip(b.log.iter()) {
        assert_eq!(ra.loss.total, rb.loss.total);
    }
}

#[test]
fn rej_toggle_zeroes_only_the_rejection_term() {
    let ds = tiny_dataset(6);
    let mut config = tiny_config(8, 2);
    config.ablation = AblationToggles { use_seg: true, use_det: true, use_rej: false };
    let out = train::<f32>(&config, &ds).unwrap();
    for rec in &out.log {
        assert_eq!(rec.loss.rej, 0.0, "step {}", rec.step);
        assert!(rec.loss.seg > 0.0);
        assert!(rec.loss.det > 0.0);
        assert!(rec.loss.text > 0.0);
    }
}

#[test]
fn seg_and_det_toggles_isolate() {
    let ds = tiny_dataset(6);
    let mut config = tiny_config(9, 2);
    config.ablation = AblationToggles { use_seg: false, use_det: true, use_rej: true };
    let out = train::<f32>(&config, &ds).unwrap();
    for rec in &out.log {
        assert_eq!(rec.loss.seg, 0.0);
        assert!(rec.loss.det > 0.0);
        assert!(rec.loss.rej > 0.0);
    }

    let mut config = tiny_config(9, 2);
    config.ablation = AblationToggles { use_seg: true, use_det: false, use_rej: true };
    let out = train::<f32>(&config, &ds).unwrap();
    for rec in &out.log {
        assert_eq!(rec.loss.det, 0.0);
        assert!(rec.loss.seg > 0.0);
    }
}

#[test]
fn breakdown_recomposes_each_step() {
    let ds = tiny_dataset(11);
    let config = tiny_config(12, 3);
    let out = train::<f32>(&config, &ds).unwrap();
    assert_eq!(out.log.len(), 3);
    for rec in &out.log {
        assert!(rec.loss.is_consistent(&config.weights), "step {}", rec.step);
    }
}

#[test]
fn accumulation_matches_single_large_batch_in_f64() {
    let ds = tiny_dataset(13);
    let mut micro = tiny_config(21, 2);
    micro.batch_size = 2;
    micro.grad_accum = 10;
    let mut big = tiny_config(21, 2);
    big.batch_size = 20;
    big.grad_accum = 1;

    let a = train::<f64>(&micro, &ds).unwrap();
    let b = train::<f64>(&big, &ds).unwrap();
    for i in 0..a.trainer.model.params.len() {
        let pa = a.trainer.model.params.value(mmground::model::ParamId(i));
        let pb = b.trainer.model.params.value(mmground::model::ParamId(i));
        for (&x, &y) in pa.iter().zip(pb.iter()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
            assert!(rel <= 1e-6, "param {i} rel diff {rel}");
        }
    }
}

#[test]
fn checkpoint_resume_is_bitwise_identical() {
    let ds = tiny_dataset(17);
    let config = tiny_config(31, 4);

    // uninterrupted
    let full = train::<f32>(&config, &ds).unwrap();

    // interrupted at step 2, saved, reloaded, resumed
    let mut half = Trainer::<f32>::new(&config, &ds).unwrap();
    let mut log = Vec::new();
    half.run(&ds, 2, &mut log).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt_dir = dir.path().join("ckpt");
    save_checkpoint(&half, &ckpt_dir, log.last().map(|r| r.loss)).unwrap();

    let mut resumed = load_checkpoint::<f32>(&ckpt_dir).unwrap();
    assert_eq!(resumed.step, 2);
    resumed.run(&ds, 4, &mut log).unwrap();

    assert_eq!(
        full.trainer.model.params.checksum(),
        resumed.model.params.checksum(),
        "resume must continue the exact trajectory"
    );
    assert_eq!(
        full.trainer.grounder.params.checksum(),
        resumed.grounder.params.checksum()
    );
}

#[test]
fn loss_halves_within_budget_smoke() {
    let ds = tiny_dataset(23);
    let config = tiny_config(41, 120);
    let out = train::<f32>(&config, &ds).unwrap();
    let first = out.log.first().unwrap().loss.total;
    let last = out.log.last().unwrap().loss.total;
    assert!(
        last < 0.5 * first,
        "training should at least halve the loss: {first:.3} -> {last:.3}"
    );
}
