//! A short shared-attention ablation on desk-nano: single-task baselines,
//! then all six tasks with shared attention on and off.

use mult::ablation::{ablate, shared_comparison, AblationPlan, SharedMode, SizeVariant};
use mult::data::{derive_seeds, generate_dataset};
use mult::train::TrainOptions;
use mult::{ArchConfig, Result, Task};

fn main() -> Result<()> {
    let cfg = ArchConfig::load("desk-nano")?;
    let train = generate_dataset(&derive_seeds(10, 8), cfg.img_size);
    let val = generate_dataset(&derive_seeds(11, 4), cfg.img_size);
    let mut subsets: Vec<Vec<Task>> = Task::ALL.iter().map(|&t| vec![t]).collect();
    subsets.push(Task::ALL.to_vec());
    let plan = AblationPlan {
        sizes: vec![SizeVariant {
            label: "desk-nano".into(),
            config: cfg,
        }],
        subsets,
        shared: SharedMode::Both,
        options: TrainOptions {
            steps: 40,
            batch: 2,
            peak_lr: 1e-3,
            warmup_steps: 4,
            ..Default::default()
        },
        train: &train,
        val: &val,
    };
    let reports = ablate(&plan, &mut |r| {
        println!("{}", r.to_json());
        Ok(())
    })?;
    println!("task  shared on  shared off");
    for (task, on, off) in shared_comparison(&reports, "desk-nano", &Task::ALL) {
        println!("{task}     {on:>+8.2}%  {off:>+8.2}%");
    }
    Ok(())
}
