//! Train the dual-domain models on the synthetic `invert` pair and
//! report translation error against the ground-truth map.
//!
//!     cargo run --release --example invert_demo -- <steps> <learning_rate>

use std::time::Instant;

use dualdiff::config::RunConfig;
use dualdiff::data::{make_synthetic_domains, SyntheticKind};
use dualdiff::sample::translate_items;
use dualdiff::train::{train_loop, TrainState};

fn mae(a: &[dualdiff::tensor::Array], b: &[dualdiff::tensor::Array]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data().iter().zip(y.data()) {
            total += (p - q).abs();
            count += 1;
        }
    }
    total / count as f64
}

fn main() {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(100);
    let lr: f64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(2e-3);

    let mut run = RunConfig::desk();
    run.unet_widths = vec![8, 16, 32];
    run.emb_dim = 32;
    run.translator_width = 16;
    run.translator_blocks = 3;
    run.batch_size = 8;
    run.learning_rate = lr;
    run.steps = steps;
    run.seed = 7;
    run.checkpoint_every = 0;
    run.validate().unwrap();

    let sched = run.schedule().unwrap();
    let (train_a, train_b) = make_synthetic_domains(SyntheticKind::Invert, 64, 16, 100).unwrap();
    let (test_a, _test_b) = make_synthetic_domains(SyntheticKind::Invert, 16, 16, 999).unwrap();
    let oracle: Vec<_> = test_a.items.iter().map(|x| SyntheticKind::Invert.oracle(x)).collect();

    let mut state = TrainState::init(&run).unwrap();

    // untrained baseline
    let cfg = run.sampler_config(42);
    let t0 = Instant::now();
    let base_out = translate_items(&state.denoiser_a, &state.denoiser_b, &test_a.items, &cfg, &sched).unwrap();
    println!("translate 16 images: {:.1}s", t0.elapsed().as_secs_f64());
    println!("untrained MAE vs oracle: {:.4}", mae(&base_out, &oracle));

    let mut metrics = Vec::new();
    let t0 = Instant::now();
    train_loop(&mut state, &run, &train_a, &train_b, &sched, None, &mut metrics).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("{} steps in {:.1}s ({:.3}s/step)", steps, dt, dt / steps as f64);

    let text = String::from_utf8(metrics).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    for chunk in lines.iter().skip(1).step_by((steps / 8).max(1)) {
        println!("  {chunk}");
    }
    if lines.len() > 1 {
        println!("  {}", lines[lines.len() - 1]);
    }

    let trained_out = translate_items(&state.denoiser_a, &state.denoiser_b, &test_a.items, &cfg, &sched).unwrap();
    println!("trained MAE vs oracle: {:.4}", mae(&trained_out, &oracle));

    // cycle check on held-out B
    let (_ta, test_b) = make_synthetic_domains(SyntheticKind::Invert, 16, 16, 555).unwrap();
    let mut cyc = 0.0;
    let mut n = 0;
    for item in &test_b.items {
        let shape = item.shape().to_vec();
        let b = dualdiff::tensor::Array::new(vec![1, shape[0], shape[1], shape[2]], item.data().to_vec()).unwrap();
        let to_a = state.translator_b.translate_array(&b).unwrap();
        let back = state.translator_a.translate_array(&to_a).unwrap();
        for (p, q) in back.data().iter().zip(b.data()) {
            cyc += (p - q).abs();
            n += 1;
        }
    }
    println!("cycle MAE on held-out B: {:.4}", cyc / n as f64);
}
