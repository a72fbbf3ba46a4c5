//! Task-subset and shared-attention ablations against single-task
//! baselines trained with the same budget.

use std::collections::BTreeMap;
use std::time::Instant;

use serde_json::{json, Map, Value};

use crate::checkpoint::{config_hash, text_hash};
use crate::config::{count_parameters, parse_tasks, tasks_string, ArchConfig, Task};
use crate::data::TaskBundle;
use crate::error::{Error, Result};
use crate::loss::relative_performance;
use crate::train::{evaluate_samples, train_samples, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SharedMode {
    On,
    Off,
    Both,
}

impl SharedMode {
    pub fn parse(s: &str) -> Result<SharedMode> {
        match s {
            "on" => Ok(SharedMode::On),
            "off" => Ok(SharedMode::Off),
            "both" => Ok(SharedMode::Both),
            other => Err(Error::Config(format!(
                "shared mode must be on, off or both, got {other:?}"
            ))),
        }
    }

    fn flags(self) -> &'static [bool] {
        match self {
            SharedMode::On => &[true],
            SharedMode::Off => &[false],
            SharedMode::Both => &[true, false],
        }
    }
}

/// One network size to ablate: a label and its architecture.
#[derive(Clone, Debug)]
pub struct SizeVariant {
    pub label: String,
    pub config: ArchConfig,
}

pub struct AblationPlan<'a> {
    pub sizes: Vec<SizeVariant>,
    pub subsets: Vec<Vec<Task>>,
    pub shared: SharedMode,
    pub options: TrainOptions,
    pub train: &'a [TaskBundle],
    pub val: &'a [TaskBundle],
}

/// One ablation run. Task columns are in S, D, N, K, E, R order and hold
/// `None` for tasks outside the subset.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub run_id: String,
    pub preset: String,
    pub tasks: Vec<Task>,
    pub shared_attention: bool,
    pub parameters: usize,
    pub config_hash: u64,
    pub budget_hash: u64,
    pub baseline_budget_hash: u64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub wall_seconds: f64,
    pub val_loss: BTreeMap<Task, f64>,
    pub relative: BTreeMap<Task, f64>,
}

fn columns(values: &BTreeMap<Task, f64>) -> Value {
    let mut m = Map::new();
    for t in Task::ALL {
        m.insert(
            t.letter().to_string(),
            values.get(&t).map_or(Value::Null, |&v| json!(v)),
        );
    }
    Value::Object(m)
}

impl AblationReport {
    /// One JSON line with fields in a fixed order.
    pub fn to_json(&self) -> String {
        let mut m = Map::new();
        m.insert("run_id".into(), json!(self.run_id));
        m.insert("preset".into(), json!(self.preset));
        m.insert("tasks".into(), json!(tasks_string(&self.tasks)));
        m.insert("shared_attention".into(), json!(self.shared_attention));
        m.insert("parameters".into(), json!(self.parameters));
        m.insert(
            "config_hash".into(),
            json!(format!("{:016x}", self.config_hash)),
        );
        m.insert(
            "budget_hash".into(),
            json!(format!("{:016x}", self.budget_hash)),
        );
        m.insert(
            "baseline_budget_hash".into(),
            json!(format!("{:016x}", self.baseline_budget_hash)),
        );
        m.insert("steps".into(), json!(self.steps));
        m.insert("batch".into(), json!(self.batch));
        m.insert("seed".into(), json!(self.seed));
        m.insert("wall_seconds".into(), json!(self.wall_seconds));
        m.insert("val_loss".into(), columns(&self.val_loss));
        m.insert("relative".into(), columns(&self.relative));
        Value::Object(m).to_string()
    }
}

/// Hash of the training budget together with the data it runs on.
pub fn budget_hash(options: &TrainOptions, train: &[TaskBundle], val: &[TaskBundle]) -> u64 {
    let seeds = |s: &[TaskBundle]| {
        s.iter()
            .map(|b| b.seed.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    text_hash(&format!(
        "{}|train={}|val={}",
        options.budget_text(),
        seeds(train),
        seeds(val)
    ))
}

struct RunResult {
    cfg: ArchConfig,
    parameters: usize,
    val_loss: BTreeMap<Task, f64>,
    wall_seconds: f64,
}

fn run(cfg: &ArchConfig, plan: &AblationPlan) -> Result<RunResult> {
    let started = Instant::now();
    let result = train_samples(cfg, plan.train, &plan.options, &mut ())?;
    let eval = evaluate_samples(&result.model, &result.store, plan.val, plan.options.batch)?;
    Ok(RunResult {
        cfg: cfg.clone(),
        parameters: result.store.num_scalars(),
        val_loss: eval.losses.into_iter().collect(),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Single-task runs never use shared attention: with one task there is
/// nothing to share.
fn run_config(base: &ArchConfig, tasks: &[Task], shared: bool) -> Result<ArchConfig> {
    let mut cfg = base.with_tasks(tasks);
    cfg.shared_attention = shared && tasks.len() > 1;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the plan, emitting reports in order through `emit`. Baselines for
/// every task that appears in a subset are trained first.
pub fn ablate(
    plan: &AblationPlan,
    emit: &mut dyn FnMut(&AblationReport) -> Result<()>,
) -> Result<Vec<AblationReport>> {
    if plan.subsets.is_empty() {
        return Err(Error::Config("no task subsets to ablate".into()));
    }
    let budget = budget_hash(&plan.options, plan.train, plan.val);
    let mut reports = Vec::new();
    for size in &plan.sizes {
        let mut needed: Vec<Task> = plan.subsets.iter().flatten().copied().collect();
        needed.sort();
        needed.dedup();
        let mut baselines: BTreeMap<Task, (RunResult, u64)> = BTreeMap::new();
        for &t in &needed {
            let cfg = run_config(&size.config, &[t], false)?;
            baselines.insert(t, (run(&cfg, plan)?, budget));
        }
        for subset in &plan.subsets {
            let flags: Vec<bool> = if subset.len() == 1 {
                vec![false]
            } else {
                plan.shared.flags().to_vec()
            };
            for shared in flags {
                let cfg = run_config(&size.config, subset, shared)?;
                let fresh;
                let result = if subset.len() == 1 {
                    &baselines[&subset[0]].0
                } else {
                    fresh = run(&cfg, plan)?;
                    &fresh
                };
                let mut relative = BTreeMap::new();
                for &t in subset {
                    let (base, base_budget) = baselines.get(&t).ok_or_else(|| {
                        Error::Config(format!("missing single-task baseline for {t}"))
                    })?;
                    if *base_budget != budget {
                        return Err(Error::Config(format!(
                            "baseline for {t} was trained with a different budget"
                        )));
                    }
                    let multi = result.val_loss[&t];
                    relative.insert(t, relative_performance(multi, base.val_loss[&t], true)?);
                }
                let report = AblationReport {
                    run_id: format!(
                        "{}-{}-{}",
                        size.label,
                        tasks_string(subset),
                        if cfg.shared_attention {
                            "shared"
                        } else {
                            "plain"
                        }
                    ),
                    preset: size.label.clone(),
                    tasks: subset.clone(),
                    shared_attention: cfg.shared_attention,
                    parameters: result.parameters,
                    config_hash: config_hash(&result.cfg),
                    budget_hash: budget,
                    baseline_budget_hash: budget,
                    steps: plan.options.steps,
                    batch: plan.options.batch,
                    seed: plan.options.seed,
                    wall_seconds: result.wall_seconds,
                    val_loss: result.val_loss.clone(),
                    relative,
                };
                debug_assert_eq!(report.parameters, count_parameters(&cfg)?.total);
                emit(&report)?;
                reports.push(report);
            }
        }
    }
    Ok(reports)
}

/// Per-task comparison of shared-on and shared-off runs on one subset:
/// `(task, relative on, relative off)` for every task in both.
pub fn shared_comparison(
    reports: &[AblationReport],
    preset: &str,
    tasks: &[Task],
) -> Vec<(Task, f64, f64)> {
    let find = |shared: bool| {
        reports
            .iter()
            .find(|r| r.preset == preset && r.tasks == tasks && r.shared_attention == shared)
    };
    let (Some(on), Some(off)) = (find(true), find(false)) else {
        return Vec::new();
    };
    tasks
        .iter()
        .filter_map(|t| Some((*t, *on.relative.get(t)?, *off.relative.get(t)?)))
        .collect()
}

/// Parses comma-separated subsets such as `s,d,sdn`. `singles` expands to
/// every single task and `all` to the six-task set.
pub fn parse_subsets(s: &str) -> Result<Vec<Vec<Task>>> {
    let mut subsets = Vec::new();
    for part in s.split(',').map(str::trim) {
        if part.eq_ignore_ascii_case("singles") {
            subsets.extend(Task::ALL.iter().map(|&t| vec![t]));
        } else {
            subsets.push(parse_tasks(part)?);
        }
    }
    if subsets.is_empty() {
        return Err(Error::Config("no subsets given".into()));
    }
    Ok(subsets)
}
