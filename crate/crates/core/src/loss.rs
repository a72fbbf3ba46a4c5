//! Per-task losses, weighted combination and relative performance.

use crate::autograd::{Tape, Var};
use crate::config::Task;
use crate::decoder::HeadOutput;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Smoothing factor of the inverse-EMA weighting.
pub const EMA_BETA: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    L1,
    /// L1 between the sigmoid depth prediction and depth normalized to [0, 1].
    DepthL1,
}

impl LossKind {
    pub fn for_task(task: Task) -> LossKind {
        match task {
            Task::S => LossKind::CrossEntropy,
            Task::D => LossKind::DepthL1,
            Task::N | Task::K | Task::E | Task::R => LossKind::L1,
        }
    }
}

/// Supervision for one task over a batch: class labels for segmentation,
/// a dense `[B, H, W, C]` map for everything else.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskTarget {
    Labels(Vec<usize>),
    Dense(Tensor),
}

/// Loss of one head on the tape. Segmentation uses the raw logits, the
/// others compare the activated output with the target.
pub fn per_task_loss_var(
    tape: &mut Tape,
    task: Task,
    head: &HeadOutput,
    target: &TaskTarget,
) -> Result<Var> {
    match (LossKind::for_task(task), target) {
        (LossKind::CrossEntropy, TaskTarget::Labels(labels)) => {
            tape.cross_entropy(head.raw, labels)
        }
        (LossKind::L1 | LossKind::DepthL1, TaskTarget::Dense(t)) => {
            if tape.shape(head.output) != t.shape() {
                return dim_err(format!(
                    "task {task}: prediction {:?} vs target {:?}",
                    tape.shape(head.output),
                    t.shape()
                ));
            }
            tape.l1_loss(head.output, t)
        }
        (_, _) => Err(Error::Data(format!(
            "task {task} received the wrong kind of target"
        ))),
    }
}

/// Tensor-level loss: `pred` is the logits for segmentation and the
/// activated prediction otherwise.
pub fn per_task_loss(task: Task, pred: &Tensor, target: &TaskTarget) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(pred.clone());
    let head = HeadOutput { raw: v, output: v };
    let l = per_task_loss_var(&mut tape, task, &head, target)?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Balancing {
    Static,
    /// `w_t ∝ static_t / EMA(L_t)`, renormalized to sum to the number of
    /// active tasks.
    InverseEma {
        beta: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskLossSpec {
    pub task: Task,
    pub kind: LossKind,
    pub weight: f64,
}

impl TaskLossSpec {
    pub fn new(task: Task, weight: f64) -> Self {
        TaskLossSpec {
            task,
            kind: LossKind::for_task(task),
            weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Combined {
    pub total: f64,
    pub weights: Vec<(Task, f64)>,
}

/// Loss weighting state: static weights plus, in inverse-EMA mode, the
/// running loss averages.
#[derive(Clone, Debug)]
pub struct LossWeighting {
    pub specs: Vec<TaskLossSpec>,
    pub mode: Balancing,
    ema: Vec<Option<f64>>,
}

impl LossWeighting {
    pub fn new(specs: Vec<TaskLossSpec>, mode: Balancing) -> Result<Self> {
        if specs
            .iter()
            .any(|s| !s.weight.is_finite() || s.weight < 0.0)
        {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if specs.iter().map(|s| s.weight).sum::<f64>() <= 0.0 {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        if let Balancing::InverseEma { beta } = mode {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("EMA beta {beta} outside [0, 1)")));
            }
        }
        let n = specs.len();
        Ok(LossWeighting {
            specs,
            mode,
            ema: vec![None; n],
        })
    }

    pub fn uniform(tasks: &[Task], mode: Balancing) -> Result<Self> {
        Self::new(
            tasks.iter().map(|&t| TaskLossSpec::new(t, 1.0)).collect(),
            mode,
        )
    }

    fn spec_index(&self, task: Task) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| s.task == task)
            .ok_or_else(|| Error::Config(format!("no loss spec for task {task}")))
    }

    /// Folds the current losses into the running averages (inverse-EMA only).
    pub fn observe(&mut self, losses: &[(Task, f64)]) -> Result<()> {
        let Balancing::InverseEma { beta } = self.mode else {
            return Ok(());
        };
        for &(task, l) in losses {
            let i = self.spec_index(task)?;
            self.ema[i] = Some(match self.ema[i] {
                None => l,
                Some(prev) => beta * prev + (1.0 - beta) * l,
            });
        }
        Ok(())
    }

    /// Effective weights for the given tasks under the current state.
    pub fn weights(&self, tasks: &[Task]) -> Result<Vec<(Task, f64)>> {
        let mut raw = Vec::with_capacity(tasks.len());
        for &t in tasks {
            let i = self.spec_index(t)?;
            let w = self.specs[i].weight;
            let w = match (self.mode, self.ema[i]) {
                (Balancing::InverseEma { .. }, Some(e)) if w > 0.0 => w / e.max(f64::MIN_POSITIVE),
                _ => w,
            };
            raw.push((t, w));
        }
        let sum: f64 = raw.iter().map(|(_, w)| w).sum();
        if sum <= 0.0 {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        if let Balancing::InverseEma { .. } = self.mode {
            let active = raw.iter().filter(|(_, w)| *w > 0.0).count() as f64;
            for (_, w) in raw.iter_mut() {
                *w *= active / sum;
            }
        }
        Ok(raw)
    }

    /// `Σ w_t·L_t / Σ w_t` after observing `losses`.
    pub fn combine(&mut self, losses: &[(Task, f64)]) -> Result<Combined> {
        self.observe(losses)?;
        let tasks: Vec<Task> = losses.iter().map(|(t, _)| *t).collect();
        let weights = self.weights(&tasks)?;
        let wsum: f64 = weights.iter().map(|(_, w)| w).sum();
        let total = losses
            .iter()
            .zip(&weights)
            .map(|((_, l), (_, w))| w * l)
            .sum::<f64>()
            / wsum;
        Ok(Combined { total, weights })
    }

    /// Tape version of [`LossWeighting::combine`]; weights are treated as
    /// constants.
    pub fn combine_vars(
        &mut self,
        tape: &mut Tape,
        losses: &[(Task, Var)],
    ) -> Result<(Var, Combined)> {
        let values: Vec<(Task, f64)> = losses
            .iter()
            .map(|&(t, v)| (t, tape.value(v).item()))
            .collect();
        let combined = self.combine(&values)?;
        let wsum: f64 = combined.weights.iter().map(|(_, w)| w).sum();
        let mut total: Option<Var> = None;
        for (&(_, l), &(_, w)) in losses.iter().zip(&combined.weights) {
            let term = tape.scale(l, w / wsum);
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let total = total.ok_or_else(|| Error::Config("no losses to combine".into()))?;
        Ok((total, combined))
    }
}

/// Static-weight combination without state.
pub fn combine_losses(losses: &[(Task, f64)], specs: &[TaskLossSpec]) -> Result<Combined> {
    LossWeighting::new(specs.to_vec(), Balancing::Static)?.combine(losses)
}

/// Percentage gain of a multitask result over its single-task baseline;
/// positive means the multitask model is better.
pub fn relative_performance(multi: f64, single: f64, lower_is_better: bool) -> Result<f64> {
    if single == 0.0 {
        return Err(Error::UndefinedBaseline(format!(
            "baseline is zero (multi = {multi})"
        )));
    }
    Ok(if lower_is_better {
        100.0 * (single - multi) / single
    } else {
        100.0 * (multi - single) / single
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cross_entropy() {
        let l = per_task_loss(
            Task::S,
            &Tensor::zeros(&[1, 2, 2, 4]),
            &TaskTarget::Labels(vec![0, 1, 2, 3]),
        )
        .unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let bad = per_task_loss(
            Task::S,
            &Tensor::zeros(&[1, 1, 1, 4]),
            &TaskTarget::Labels(vec![4]),
        );
        assert!(matches!(bad, Err(Error::Data(_))));
    }

    #[test]
    fn l1_examples() {
        let t = Tensor::full(&[1, 2, 2, 1], 0.25);
        assert_eq!(
            per_task_loss(Task::E, &t, &TaskTarget::Dense(t.clone())).unwrap(),
            0.0
        );
        let p = Tensor::full(&[1, 2, 2, 1], 0.5);
        assert!((per_task_loss(Task::D, &p, &TaskTarget::Dense(t)).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn static_combination() {
        let specs = [
            TaskLossSpec::new(Task::D, 1.0),
            TaskLossSpec::new(Task::E, 1.0),
        ];
        let c = combine_losses(&[(Task::D, 1.0), (Task::E, 3.0)], &specs).unwrap();
        assert_eq!(c.total, 2.0);
        let specs = [
            TaskLossSpec::new(Task::D, 0.0),
            TaskLossSpec::new(Task::E, 1.0),
        ];
        assert_eq!(
            combine_losses(&[(Task::D, 1.0), (Task::E, 3.0)], &specs)
                .unwrap()
                .total,
            3.0
        );
        let zero = [TaskLossSpec::new(Task::D, 0.0)];
        assert!(matches!(
            combine_losses(&[(Task::D, 1.0)], &zero),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inverse_ema_steady_losses() {
        let mut w = LossWeighting::uniform(
            &[Task::D, Task::E],
            Balancing::InverseEma { beta: EMA_BETA },
        )
        .unwrap();
        for _ in 0..5 {
            let c = w.combine(&[(Task::D, 1.0), (Task::E, 4.0)]).unwrap();
            assert!((c.weights[0].1 - 1.6).abs() < 1e-12);
            assert!((c.weights[1].1 - 0.4).abs() < 1e-12);
            assert!((c.total - 1.6).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_performance_examples() {
        assert_eq!(relative_performance(0.7, 0.7, true).unwrap(), 0.0);
        assert!((relative_performance(0.8, 1.0, true).unwrap() - 20.0).abs() < 1e-12);
        assert!((relative_performance(0.6, 0.5, false).unwrap() - 20.0).abs() < 1e-12);
        assert!(matches!(
            relative_performance(1.0, 0.0, true),
            Err(Error::UndefinedBaseline(_))
        ));
    }
}
