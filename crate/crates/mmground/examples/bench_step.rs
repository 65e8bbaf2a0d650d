//! Rough training-step throughput probe: forward+backward of the LM loss
//! over a realistic sequence, for a few candidate model sizes.

use mmground::model::{init_model, ModelConfig};
use mmground::tensor::Tape;
use ndarray::Array3;
use std::time::Instant;

fn bench(d: usize, layers: usize, n_text: usize, reps: usize, label: &str) {
    let config = ModelConfig {
        d_model: d,
        n_layers: layers,
        n_heads: 4,
        vocab_size: 220,
        image_size: 64,
        patch_size: 8,
        max_seq_len: 192,
        seed: 1,
        ..ModelConfig::default()
    };
    let model = init_model::<f32>(&config).unwrap();
    let img = Array3::from_shape_fn((3, 64, 64), |(c, y, x)| ((c + y + x) % 5) as f32 / 5.0);
    let tokens: Vec<usize> = (0..n_text).map(|i| 8 + (i % 200)).collect();
    let targets: Vec<usize> = (0..n_text).map(|i| 8 + ((i + 1) % 200)).collect();
    let supervised: Vec<bool> = (0..n_text).map(|i| i >= n_text / 2).collect();

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let leaves = model.bind(&mut tape);
        let out = model
            .forward_bound(&mut tape, &leaves, Some(&img), &tokens, false)
            .unwrap();
        let loss = tape.lm_cross_entropy(out.logits, &targets, &supervised);
        let _store = tape.backward(loss);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let seqs_2000_steps = 2000.0 * 20.0;
    println!(
        "{label}: d={d} L={layers} text={n_text} -> {:.1} ms/seq, est {:.1} min for 40k seqs",
        dt * 1e3,
        dt * seqs_2000_steps / 60.0
    );
}

fn main() {
    bench(128, 6, 26, 30, "spec-default ");
    bench(96, 4, 26, 30, "mid          ");
    bench(96, 4, 40, 30, "mid-complex  ");
    bench(64, 4, 26, 30, "small        ");
    bench(64, 3, 26, 30, "smaller      ");
}
