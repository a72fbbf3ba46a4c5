//! Finite-difference audit of the full model gradient, one check per
//! parameter tensor.
//!
//! Each tensor is probed along a unit direction `d` that blends a random
//! direction with the analytic gradient direction (so the directional
//! derivative cannot vanish by cancellation): the analytic
//! directional derivative `∇L·d` is compared with central differences
//! `D(h) = (L(θ + hd) − L(θ − hd)) / 2h`, extrapolated as
//! `(4·D(h/2) − D(h)) / 3`. The step `h` is picked per tensor so the probe
//! moves the loss by roughly `target_change`, within `[min_step, max_step]`.
//! Decoder and head tensors only affect their own task's loss (apart from
//! the shared query/key projections), so those probes decode from a cached
//! feature pyramid.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{relative_error, Tape};
use crate::config::Task;
use crate::data::Batch;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::loss::per_task_loss_var;
use crate::model::MultModel;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub step: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradAudit {
    pub loss: f64,
    pub checks: Vec<TensorCheck>,
    pub seconds: f64,
}

impl GradAudit {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AuditOptions {
    pub target_change: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub seed: u64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions {
            target_change: 1e-11,
            min_step: 1e-9,
            max_step: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scope {
    Everything,
    AllDecoders,
    Task(Task),
}

fn scope_of(model: &MultModel, name: &str) -> Scope {
    let mut parts = name.split('.');
    let (Some(root), Some(letter)) = (parts.next(), parts.next()) else {
        return Scope::Everything;
    };
    let task = match letter
        .chars()
        .next()
        .and_then(|c| Task::from_letter(c).ok())
    {
        Some(t) if letter.len() == 1 => t,
        _ => return Scope::Everything,
    };
    match root {
        "head" => Scope::Task(task),
        "decoder" => {
            let shared = model.decoder.shared_attention
                && task == model.decoder.reference_task()
                && name.contains(".block1.attn.")
                && [".q.", ".k.", ".rel_bias"].iter().any(|s| name.contains(s));
            if shared {
                Scope::AllDecoders
            } else {
                Scope::Task(task)
            }
        }
        _ => Scope::Everything,
    }
}

struct Probe<'a> {
    model: &'a MultModel,
    batch: &'a Batch,
    pyramid: [Tensor; 4],
    base: Vec<(Task, f64)>,
}

impl Probe<'_> {
    fn losses_from(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pyramid: FeaturePyramid,
        select: Option<&[Task]>,
    ) -> Result<Vec<(Task, f64)>> {
        let out = self.model.forward_from_pyramid(tape, p, pyramid, select)?;
        let mut losses = Vec::with_capacity(out.heads.len());
        for (task, head) in &out.heads {
            let target = self
                .batch
                .target(*task)
                .ok_or_else(|| Error::Data(format!("batch lacks targets for task {task}")))?;
            let l = per_task_loss_var(tape, *task, head, target)?;
            losses.push((*task, tape.value(l).item()));
        }
        Ok(losses)
    }

    fn full(&self, store: &ParamStore) -> Result<Vec<(Task, f64)>> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let img = tape.constant(self.batch.images.clone());
        let pyramid = self.model.encoder.encode(&mut tape, &p, img)?;
        self.losses_from(&mut tape, &p, pyramid, None)
    }

    fn cached(&self, store: &ParamStore, select: Option<&[Task]>) -> Result<Vec<(Task, f64)>> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let levels = self.pyramid.clone().map(|t| tape.constant(t));
        self.losses_from(&mut tape, &p, FeaturePyramid { levels }, select)
    }

    /// The part of the mean loss that `scope` can change.
    fn partial(&self, store: &ParamStore, scope: Scope) -> Result<f64> {
        let tasks = self.base.len() as f64;
        let losses = match scope {
            Scope::Everything => self.full(store)?,
            Scope::AllDecoders => self.cached(store, None)?,
            Scope::Task(t) => return Ok(self.cached(store, Some(&[t]))?[0].1 / tasks),
        };
        Ok(mean(&losses))
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn mean(losses: &[(Task, f64)]) -> f64 {
    losses.iter().map(|(_, l)| l).sum::<f64>() / losses.len() as f64
}

/// Audits `∂L/∂θ` for every tensor, where `L` is the unweighted mean of
/// the per-task losses on `batch`.
pub fn audit_model(
    model: &MultModel,
    store: &ParamStore,
    batch: &Batch,
    opts: AuditOptions,
) -> Result<GradAudit> {
    let started = Instant::now();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let img = tape.constant(batch.images.clone());
    let out = model.forward(&mut tape, &bound, img, None)?;
    let mut loss_vars = Vec::with_capacity(out.heads.len());
    for (task, head) in &out.heads {
        let target = batch
            .target(*task)
            .ok_or_else(|| Error::Data(format!("batch lacks targets for task {task}")))?;
        loss_vars.push((*task, per_task_loss_var(&mut tape, *task, head, target)?));
    }
    let mut total = None;
    for &(_, l) in &loss_vars {
        let term = tape.scale(l, 1.0 / loss_vars.len() as f64);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("model has no tasks".into()))?;
    let loss = tape.value(total).item();
    if !loss.is_finite() {
        return Err(Error::Oracle(format!("loss is {loss}")));
    }
    let grads = tape.backward(total)?;
    let analytic_grads: Vec<Tensor> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
    let pyramid = out.pyramid.levels.map(|v| tape.value(v).clone());
    let base: Vec<(Task, f64)> = loss_vars
        .iter()
        .map(|&(t, l)| (t, tape.value(l).item()))
        .collect();
    drop(grads);
    drop(tape);

    let probe = Probe {
        model,
        batch,
        pyramid,
        base,
    };
    let mut work = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut checks = Vec::with_capacity(ids.len());
    for (id, g) in ids.into_iter().zip(&analytic_grads) {
        let name = store.get(id).name.clone();
        let scope = scope_of(model, &name);
        let original = store.get(id).value.clone();
        let mut dir: Vec<f64> = (0..original.numel())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        normalize(&mut dir);
        let gnorm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm > 0.0 {
            dir.iter_mut()
                .zip(g.data())
                .for_each(|(d, gv)| *d += gv / gnorm);
            normalize(&mut dir);
        }
        let analytic: f64 = g.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
        let step = (opts.target_change / analytic.abs().max(f64::MIN_POSITIVE))
            .clamp(opts.min_step, opts.max_step);
        let mut eval = |h: f64| -> Result<f64> {
            let data = work.get_mut(id).value.data_mut();
            for ((w, o), d) in data.iter_mut().zip(original.data()).zip(&dir) {
                *w = o + h * d;
            }
            let f = probe.partial(&work, scope);
            work.get_mut(id)
                .value
                .data_mut()
                .copy_from_slice(original.data());
            let f = f?;
            if !f.is_finite() {
                return Err(Error::Oracle(format!(
                    "non-finite loss while probing {name}"
                )));
            }
            Ok(f)
        };
        let coarse = (eval(step)? - eval(-step)?) / (2.0 * step);
        let fine = (eval(step / 2.0)? - eval(-step / 2.0)?) / step;
        let numeric = (4.0 * fine - coarse) / 3.0;
        checks.push(TensorCheck {
            name,
            numel: original.numel(),
            step,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(GradAudit {
        loss,
        checks,
        seconds: started.elapsed().as_secs_f64(),
    })
}
