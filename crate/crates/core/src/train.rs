//! Training and evaluation loops.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::checkpoint::{config_hash, load_checkpoint, save_checkpoint, Dtype};
use crate::config::{ArchConfig, Task};
use crate::data::{make_batch, read_dataset, Batch, TaskBundle};
use crate::error::{Error, Result};
use crate::loss::{per_task_loss_var, Balancing, LossWeighting, EMA_BETA};
use crate::model::MultModel;
use crate::optim::{adamw_step, lr_schedule, AdamConfig, OptimState, ScheduleSpec};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub floor_lr: f64,
    pub adam: AdamConfig,
    pub balancing: Balancing,
    /// Save a checkpoint every this many steps (0 disables periodic saves).
    pub checkpoint_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 2000,
            batch: 4,
            seed: 0,
            peak_lr: 5e-5,
            warmup_steps: 200,
            floor_lr: 0.0,
            adam: AdamConfig::default(),
            balancing: Balancing::Static,
            checkpoint_every: 0,
        }
    }
}

impl TrainOptions {
    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps.min(self.steps),
            total_steps: self.steps,
            floor_lr: self.floor_lr,
        }
    }

    /// Canonical text of everything that shapes a run's budget.
    pub fn budget_text(&self) -> String {
        let balancing = match self.balancing {
            Balancing::Static => "static".to_string(),
            Balancing::InverseEma { beta } => format!("inverse-ema:{beta}"),
        };
        format!(
            "steps={} batch={} seed={} peak_lr={} warmup={} floor_lr={} beta1={} beta2={} eps={} wd={} balancing={}",
            self.steps,
            self.batch,
            self.seed,
            self.peak_lr,
            self.warmup_steps,
            self.floor_lr,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.eps,
            self.adam.weight_decay,
            balancing
        )
    }
}

pub fn inverse_ema() -> Balancing {
    Balancing::InverseEma { beta: EMA_BETA }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Step index, or the step count for the closing evaluation record.
    pub step: u64,
    pub kind: &'static str,
    pub lr: f64,
    pub total: f64,
    pub losses: Vec<(Task, f64)>,
}

impl StepRecord {
    pub fn loss(&self, task: Task) -> Option<f64> {
        self.losses
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, l)| *l)
    }

    /// JSON object with task columns in canonical order.
    pub fn to_json(&self) -> String {
        let mut m = serde_json::Map::new();
        m.insert("step".into(), self.step.into());
        m.insert("kind".into(), self.kind.into());
        m.insert("lr".into(), self.lr.into());
        m.insert("total".into(), self.total.into());
        for t in Task::ALL {
            m.insert(
                t.letter().to_string(),
                self.loss(t).map_or(serde_json::Value::Null, Into::into),
            );
        }
        serde_json::Value::Object(m).to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub losses: Vec<(Task, f64)>,
    /// Unweighted mean of the per-task losses.
    pub total: f64,
    pub samples: usize,
}

impl EvalReport {
    pub fn loss(&self, task: Task) -> Option<f64> {
        self.losses
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, l)| *l)
    }
}

pub struct TrainResult {
    pub model: MultModel,
    pub store: ParamStore,
    pub optim: OptimState,
    pub log: Vec<StepRecord>,
    pub initial: EvalReport,
    pub last: EvalReport,
}

/// Forward pass and per-task losses of one batch.
fn batch_losses(
    model: &MultModel,
    tape: &mut Tape,
    bound: &crate::params::Bound,
    batch: &Batch,
) -> Result<Vec<(Task, crate::autograd::Var)>> {
    let images = tape.constant(batch.images.clone());
    let out = model.forward(tape, bound, images, None)?;
    let mut losses = Vec::with_capacity(out.heads.len());
    for (task, head) in &out.heads {
        let target = batch
            .target(*task)
            .ok_or_else(|| Error::Data(format!("batch lacks targets for task {task}")))?;
        losses.push((*task, per_task_loss_var(tape, *task, head, target)?));
    }
    Ok(losses)
}

fn check_geometry(cfg: &ArchConfig, samples: &[TaskBundle]) -> Result<()> {
    if let Some(s) = samples.iter().find(|s| s.size != cfg.img_size) {
        return Err(Error::Data(format!(
            "dataset samples are {0}x{0} but the model expects {1}x{1}",
            s.size, cfg.img_size
        )));
    }
    if cfg.has_task(Task::S) {
        if let Some(&l) = samples
            .iter()
            .flat_map(|s| &s.segmentation)
            .find(|&&l| l as usize >= cfg.seg_classes)
        {
            return Err(Error::Data(format!(
                "label {l} exceeds configured {} classes",
                cfg.seg_classes
            )));
        }
    }
    Ok(())
}

/// Gradient-free mean per-task losses over `samples`, `batch` at a time.
pub fn evaluate_samples(
    model: &MultModel,
    store: &ParamStore,
    samples: &[TaskBundle],
    batch: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    check_geometry(&model.cfg, samples)?;
    let tasks = model.tasks().to_vec();
    let mut sums = vec![0.0; tasks.len()];
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&TaskBundle> = chunk.iter().collect();
        let b = make_batch(&refs, &tasks)?;
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let losses = batch_losses(model, &mut tape, &bound, &b)?;
        for (s, (_, l)) in sums.iter_mut().zip(&losses) {
            *s += tape.value(*l).item() * chunk.len() as f64;
        }
    }
    let n = samples.len() as f64;
    let losses: Vec<(Task, f64)> = tasks
        .iter()
        .copied()
        .zip(sums.iter().map(|s| s / n))
        .collect();
    let total = losses.iter().map(|(_, l)| l).sum::<f64>() / losses.len() as f64;
    Ok(EvalReport {
        losses,
        total,
        samples: samples.len(),
    })
}

/// Hooks called during training.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(
        &mut self,
        _step: u64,
        _model: &MultModel,
        _store: &ParamStore,
        _optim: &OptimState,
    ) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Trains a fresh model (initialized from `opts.seed`) on in-memory samples.
pub fn train_samples(
    cfg: &ArchConfig,
    samples: &[TaskBundle],
    opts: &TrainOptions,
    observer: &mut dyn TrainObserver,
) -> Result<TrainResult> {
    if samples.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    check_geometry(cfg, samples)?;
    let schedule = opts.schedule();
    schedule.validate()?;
    let (model, mut store) = MultModel::new(cfg, opts.seed)?;
    let mut optim = OptimState::new(&store, opts.adam);
    let mut weighting = LossWeighting::uniform(&cfg.tasks, opts.balancing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x05ee_d0fb_a7c4);
    let mut order: Vec<usize> = Vec::new();
    let eval_batch = opts.batch;

    let initial = evaluate_samples(&model, &store, samples, eval_batch)?;
    let mut log = Vec::with_capacity(opts.steps as usize + 1);
    for step in 0..opts.steps {
        while order.len() < opts.batch {
            let mut fresh: Vec<usize> = (0..samples.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let picked: Vec<&TaskBundle> = order.drain(..opts.batch).map(|i| &samples[i]).collect();
        let batch = make_batch(&picked, &cfg.tasks)?;

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let losses = batch_losses(&model, &mut tape, &bound, &batch)?;
        let (total, _) = weighting.combine_vars(&mut tape, &losses)?;
        let total_value = tape.value(total).item();
        let per_task: Vec<(Task, f64)> = losses
            .iter()
            .map(|&(t, l)| (t, tape.value(l).item()))
            .collect();
        if !total_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {total_value} at step {step}"
            )));
        }
        let grads = tape.backward(total)?;
        store.zero_grad();
        store.accumulate(&bound, &grads);
        drop(grads);
        drop(tape);

        let lr = lr_schedule(step + 1, &schedule)?;
        adamw_step(&mut store, &mut optim, lr)?;
        let record = StepRecord {
            step,
            kind: "train",
            lr,
            total: total_value,
            losses: per_task,
        };
        observer.on_step(&record)?;
        log.push(record);
        if opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0 {
            observer.on_checkpoint(step + 1, &model, &store, &optim)?;
        }
    }
    let last = evaluate_samples(&model, &store, samples, eval_batch)?;
    let record = StepRecord {
        step: opts.steps,
        kind: "eval",
        lr: 0.0,
        total: last.total,
        losses: last.losses.clone(),
    };
    observer.on_step(&record)?;
    log.push(record);
    Ok(TrainResult {
        model,
        store,
        optim,
        log,
        initial,
        last,
    })
}

/// Writes the metrics log and checkpoints under an output directory.
pub struct RunWriter {
    pub dir: PathBuf,
    log: fs::File,
    cfg: ArchConfig,
}

impl RunWriter {
    pub fn create(dir: &Path, cfg: &ArchConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let log = fs::File::create(dir.join("metrics.jsonl"))?;
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            log,
            cfg: cfg.clone(),
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("model.mtck")
    }
}

impl TrainObserver for RunWriter {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        writeln!(self.log, "{}", record.to_json())?;
        Ok(())
    }

    fn on_checkpoint(
        &mut self,
        step: u64,
        _model: &MultModel,
        store: &ParamStore,
        optim: &OptimState,
    ) -> Result<()> {
        save_checkpoint(
            &self.checkpoint_path(),
            &self.cfg,
            step,
            store,
            Some(optim),
            Dtype::F64,
        )
    }
}

pub struct TrainOutcome {
    pub result: TrainResult,
    pub checkpoint: PathBuf,
    pub config_hash: u64,
}

/// Trains on a dataset file, writing `metrics.jsonl` and `model.mtck`
/// into `out`.
pub fn train(
    cfg: &ArchConfig,
    data: &Path,
    opts: &TrainOptions,
    out: &Path,
) -> Result<TrainOutcome> {
    let samples = read_dataset(data)?;
    let mut writer = RunWriter::create(out, cfg)?;
    let result = train_samples(cfg, &samples, opts, &mut writer)?;
    let checkpoint = writer.checkpoint_path();
    save_checkpoint(
        &checkpoint,
        cfg,
        opts.steps,
        &result.store,
        Some(&result.optim),
        Dtype::F64,
    )?;
    Ok(TrainOutcome {
        result,
        checkpoint,
        config_hash: config_hash(cfg),
    })
}

/// Evaluates a saved checkpoint on a dataset file.
pub fn evaluate(checkpoint: &Path, data: &Path) -> Result<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let (model, store) = ck.restore()?;
    let samples = read_dataset(data)?;
    evaluate_samples(&model, &store, &samples, 4)
}
