//! Overfits the desk-nano model on 8 synthetic samples.
//!
//! `cargo run --release --example overfit -- [steps] [batch] [lr]`

use std::time::Instant;

use mult::data::{derive_seeds, generate_dataset};
use mult::train::{train_samples, TrainOptions};
use mult::{ArchConfig, Result};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let steps: u64 = arg(0, "500").parse().expect("steps");
    let batch: usize = arg(1, "4").parse().expect("batch");
    let peak_lr: f64 = arg(2, "1e-3").parse().expect("lr");

    let cfg = ArchConfig::load("desk-nano")?;
    let samples = generate_dataset(&derive_seeds(7, 8), cfg.img_size);
    let opts = TrainOptions {
        steps,
        batch,
        seed: 1,
        peak_lr,
        warmup_steps: steps / 20,
        ..Default::default()
    };
    let started = Instant::now();
    let result = train_samples(&cfg, &samples, &opts, &mut ())?;
    for rec in result.log.iter().step_by((steps / 10).max(1) as usize) {
        println!(
            "step {:>4}  lr {:.2e}  total {:.4}",
            rec.step, rec.lr, rec.total
        );
    }
    println!(
        "initial {:.4}  final {:.4}  ratio {:.3}  {:.1}s",
        result.initial.total,
        result.last.total,
        result.last.total / result.initial.total,
        started.elapsed().as_secs_f64()
    );
    for (task, loss) in &result.last.losses {
        println!("  {task}: {loss:.4}");
    }
    Ok(())
}
