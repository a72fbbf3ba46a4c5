use mult::ablation::{ablate, budget_hash, AblationPlan, SharedMode, SizeVariant};
use mult::checkpoint::load_checkpoint;
use mult::data::{derive_seeds, generate_dataset, write_dataset};
use mult::optim::{lr_schedule, ScheduleSpec};
use mult::train::{evaluate, evaluate_samples, train, train_samples, TrainOptions};
use mult::{ArchConfig, Error, Task};

fn tiny() -> ArchConfig {
    ArchConfig {
        img_size: 32,
        window: 1,
        shift: 0,
        ..ArchConfig::load("desk-nano").unwrap()
    }
}

fn short(steps: u64) -> TrainOptions {
    TrainOptions {
        steps,
        batch: 2,
        seed: 3,
        peak_lr: 1e-3,
        warmup_steps: 2,
        ..Default::default()
    }
}

#[test]
fn same_seed_gives_identical_logs() {
    let cfg = tiny();
    let samples = generate_dataset(&derive_seeds(4, 6), cfg.img_size);
    let a = train_samples(&cfg, &samples, &short(6), &mut ()).unwrap();
    let b = train_samples(&cfg, &samples, &short(6), &mut ()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(
        a.store.get(a.store.ids().next().unwrap()).value,
        b.store.get(b.store.ids().next().unwrap()).value
    );
    let c = train_samples(
        &cfg,
        &samples,
        &TrainOptions {
            seed: 4,
            ..short(6)
        },
        &mut (),
    )
    .unwrap();
    assert_ne!(a.log[0].total, c.log[0].total);
}

#[test]
fn saved_checkpoint_reproduces_losses() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.mtds");
    write_dataset(&generate_dataset(&derive_seeds(9, 6), cfg.img_size), &data).unwrap();
    let out = dir.path().join("run");
    let opts = TrainOptions {
        batch: 4,
        ..short(5)
    };
    let outcome = train(&cfg, &data, &opts, &out).unwrap();

    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    let closing = lines.last().unwrap();
    assert_eq!(closing["kind"], "eval");

    let first = evaluate(&outcome.checkpoint, &data).unwrap();
    let second = evaluate(&outcome.checkpoint, &data).unwrap();
    assert_eq!(first, second);
    assert!((first.total - outcome.result.last.total).abs() <= 1e-6);
    assert!((first.total - closing["total"].as_f64().unwrap()).abs() <= 1e-6);
    for t in Task::ALL {
        let logged = closing[t.letter().to_string()].as_f64().unwrap();
        assert!((first.loss(t).unwrap() - logged).abs() <= 1e-6, "{t}");
    }

    let ck = load_checkpoint(&outcome.checkpoint).unwrap();
    assert_eq!(ck.step, 5);
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.optim.as_ref().unwrap().step, 5);
}

#[test]
fn empty_and_mismatched_splits_are_rejected() {
    let cfg = tiny();
    let (model, store) = mult::MultModel::new(&cfg, 0).unwrap();
    assert!(matches!(
        evaluate_samples(&model, &store, &[], 2),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        train_samples(&cfg, &[], &short(1), &mut ()),
        Err(Error::Data(_))
    ));
    let wrong = generate_dataset(&derive_seeds(0, 2), 64);
    let err = train_samples(&cfg, &wrong, &short(1), &mut ())
        .err()
        .unwrap()
        .to_string();
    assert!(err.contains("64x64") && err.contains("32x32"), "{err}");
}

#[test]
fn default_schedule_values() {
    let spec = TrainOptions::default().schedule();
    assert_eq!(
        spec,
        ScheduleSpec {
            peak_lr: 5e-5,
            warmup_steps: 200,
            total_steps: 2000,
            floor_lr: 0.0
        }
    );
    assert!((lr_schedule(100, &spec).unwrap() - 2.5e-5).abs() <= 1e-18);
    assert!((lr_schedule(200, &spec).unwrap() - 5e-5).abs() <= 1e-18);
    assert!((lr_schedule(1100, &spec).unwrap() - 2.5e-5).abs() <= 1e-15);
    assert!(lr_schedule(2000, &spec).unwrap().abs() <= 1e-18);
    let floored = ScheduleSpec {
        floor_lr: 1e-6,
        ..spec
    };
    assert!((lr_schedule(2000, &floored).unwrap() - 1e-6).abs() <= 1e-18);
    assert!(lr_schedule(2001, &spec).is_err());
}

#[test]
fn ablation_rows_share_one_budget() {
    let cfg = tiny().with_tasks(&[Task::S, Task::D]);
    let train_set = generate_dataset(&derive_seeds(20, 4), cfg.img_size);
    let val_set = generate_dataset(&derive_seeds(21, 2), cfg.img_size);
    let plan = AblationPlan {
        sizes: vec![SizeVariant {
            label: "tiny".into(),
            config: cfg,
        }],
        subsets: vec![vec![Task::S], vec![Task::D], vec![Task::S, Task::D]],
        shared: SharedMode::Both,
        options: short(3),
        train: &train_set,
        val: &val_set,
    };
    let mut lines = Vec::new();
    let reports = ablate(&plan, &mut |r| {
        lines.push(r.to_json());
        Ok(())
    })
    .unwrap();
    assert_eq!(reports.len(), 4);
    assert_eq!(lines.len(), 4);
    let budget = budget_hash(&plan.options, &train_set, &val_set);
    for r in &reports {
        assert_eq!(r.budget_hash, budget);
        assert_eq!(r.baseline_budget_hash, budget);
    }
    assert_eq!(reports[0].relative[&Task::S], 0.0);
    assert!(!reports[0].shared_attention);
    assert!(reports[2].shared_attention && !reports[3].shared_attention);
    assert!(reports[2].parameters < reports[3].parameters);
    let row: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    assert_eq!(row["run_id"], "tiny-SD-shared");
    assert!(row["relative"]["N"].is_null());
    assert!(row["relative"]["S"].is_f64());
    assert_ne!(budget, budget_hash(&short(4), &train_set, &val_set));
}
