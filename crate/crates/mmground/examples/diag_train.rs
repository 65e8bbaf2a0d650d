use mmground::scenegen::{Dataset, SceneSpec};
use mmground::trainer::{train, TrainConfig};
use mmground::model::ModelConfig;
use mmground::grounder::GrounderConfig;

fn run(label: &str, max_norm: Option<f64>, lr: f64, steps: usize) {
    let spec = SceneSpec { image_size: 32, object_count_range: (1, 2), seed: 23, ..SceneSpec::default() };
    let ds = Dataset::generate(&spec, 24, 0.25).unwrap();
    let config = TrainConfig {
        total_steps: steps,
        warmup_steps: steps / 10,
        seed: 41,
        peak_lr: lr,
        max_grad_norm: max_norm,
        model: ModelConfig { d_model: 32, n_layers: 2, n_heads: 2, image_size: 32, patch_size: 8, max_seq_len: 96, vocab_size: 0, ..ModelConfig::default() },
        grounder: GrounderConfig { image_size: 32, d_model: 32, d_ground: 16, enc_channels: (6, 10), mask_head_hidden: 8, bbox_hidden: 12, seed: 0 },
        ..TrainConfig::default()
    };
    let out = train::<f32>(&config, &ds).unwrap();
    let first = &out.log[0];
    let mid = &out.log[out.log.len()/2];
    let last = out.log.last().unwrap();
    println!("{label}: total {:.2} -> {:.2} -> {:.2} | text {:.2} -> {:.2} | seg {:.2} -> {:.2} | det {:.2} -> {:.2}",
        first.loss.total, mid.loss.total, last.loss.total,
        first.loss.text, last.loss.text, first.loss.seg, last.loss.seg, first.loss.det, last.loss.det);
}

fn main() {
    run("clip1.0 lr3e-4", Some(1.0), 3e-4, 240);
    run("clip5.0 lr3e-4", Some(5.0), 3e-4, 240);
    run("noclip  lr3e-4", None, 3e-4, 240);
    run("noclip  lr1e-3", None, 1e-3, 240);
    run("clip5.0 lr1e-3", Some(5.0), 1e-3, 240);
}
