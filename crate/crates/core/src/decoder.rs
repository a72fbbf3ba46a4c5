//! Per-task mirrored decoders coupled through shared attention, and task
//! heads.
//!
//! Each decoder stage fuses the encoder skip feature into every task stream,
//! runs a regular-window self-attention block, then a shifted-window block.
//! With shared attention enabled the second block takes its attention map
//! from the reference task's query/key projections applied to the skip
//! feature, and every task mixes its own values with that single map:
//!
//! ```text
//! A   = softmax(q_r(x_sa) · k_r(x_sa)ᵀ / √d + B_r)
//! y_t = x_t + Out_t(A · V_t(x_t))
//! ```

use crate::autograd::{Tape, Var};
use crate::config::{ArchConfig, Task};
use crate::encoder::FeaturePyramid;
use crate::error::{dim_err, Error, Result};
use crate::nn::{
    from_windows, mlp_residual, to_windows, BlockParams, LayerNorm, Linear, Mlp, QueryKey,
    StageGeometry, ValueOut,
};
use crate::params::{Bound, Initializer, ParamStore};

/// Bias-free `C → 2C` linear followed by unfolding each token's `2C`
/// channels into a 2×2 block of `C/2` channels. Channel block `dy·2 + dx`
/// lands at spatial offset `(dy, dx)`.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub proj: Linear,
}

impl PatchExpand {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return dim_err(format!(
                "patch_expand needs an even channel count, got {channels}"
            ));
        }
        Ok(PatchExpand {
            proj: Linear::fan_in_scaled(store, init, name, channels, 2 * channels, false),
        })
    }

    /// `[B, H, W, C] → [B, 2H, 2W, C/2]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.proj.forward(tape, p, x)?;
        unfold_2x2(tape, y)
    }
}

/// `[B, H, W, 4c] → [B, 2H, 2W, c]`, the inverse layout of
/// [`crate::encoder::merge_neighbours`].
pub fn unfold_2x2(tape: &mut Tape, x: Var) -> Result<Var> {
    let &[b, h, w, c2] = tape.shape(x) else {
        return dim_err(format!(
            "patch_expand expects [B, H, W, C], got {:?}",
            tape.shape(x)
        ));
    };
    if c2 % 4 != 0 {
        return dim_err(format!("cannot unfold {c2} channels into a 2x2 block"));
    }
    let c = c2 / 4;
    let r = tape.reshape(x, &[b, h, w, 2, 2, c])?;
    let r = tape.permute(r, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(r, &[b, 2 * h, 2 * w, c])
}

/// Second block of a decoder stage. `qk` is present for the reference task,
/// and for every task when shared attention is disabled.
#[derive(Clone, Debug)]
pub struct SharedBlock {
    pub ln1: LayerNorm,
    pub qk: Option<QueryKey>,
    pub vo: ValueOut,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub fuse: Linear,
    pub block1: BlockParams,
    pub block2: SharedBlock,
    pub expand: Option<PatchExpand>,
}

#[derive(Clone, Debug)]
pub struct TaskHead {
    pub task: Task,
    pub expand1: PatchExpand,
    pub expand2: PatchExpand,
    pub out: Linear,
}

/// Raw head projection and its task activation.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// Pre-activation `[B, H, W, C_task]` (logits for segmentation).
    pub raw: Var,
    /// Softmax / sigmoid / unit-normalized prediction.
    pub output: Var,
}

impl TaskHead {
    pub fn new(
        cfg: &ArchConfig,
        task: Task,
        store: &mut ParamStore,
        init: &mut Initializer,
    ) -> Result<Self> {
        let c = cfg.base_channels;
        let name = format!("head.{task}");
        Ok(TaskHead {
            task,
            expand1: PatchExpand::new(store, init, &format!("{name}.expand1"), c)?,
            expand2: PatchExpand::new(store, init, &format!("{name}.expand2"), c / 2)?,
            out: Linear::fan_in_scaled(
                store,
                init,
                &format!("{name}.out"),
                c / 4,
                task.channels(cfg.seg_classes),
                true,
            ),
        })
    }

    /// Quarter-resolution tokens to a full-resolution task map.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<HeadOutput> {
        let x = self.expand1.forward(tape, p, y)?;
        let x = self.expand2.forward(tape, p, x)?;
        let raw = self.out.forward(tape, p, x)?;
        let output = match self.task {
            Task::S => tape.softmax_lastdim(raw)?,
            Task::N => tape.l2_normalize_lastdim(raw)?,
            Task::D | Task::K | Task::E | Task::R => tape.sigmoid(raw),
        };
        Ok(HeadOutput { raw, output })
    }
}

#[derive(Clone, Debug)]
pub struct TaskDecoder {
    pub task: Task,
    pub init: Linear,
    pub stages: Vec<DecoderStage>,
    pub head: TaskHead,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub tasks: Vec<TaskDecoder>,
    /// Geometry of decoder stage `i`, which runs at encoder stage `3 − i`.
    pub geometry: Vec<StageGeometry>,
    pub shared_attention: bool,
    pub reference: usize,
}

/// Per-task streams after each decoder stage (before upsampling) and the
/// final quarter-resolution streams.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub stage_outputs: Vec<Vec<(Task, Var)>>,
    pub streams: Vec<(Task, Var)>,
}

impl Decoder {
    pub fn new(cfg: &ArchConfig, store: &mut ParamStore, init: &mut Initializer) -> Result<Self> {
        let geometry = (0..4)
            .map(|i| {
                StageGeometry::new(
                    cfg.grid_side(3 - i),
                    cfg.window,
                    cfg.shift,
                    cfg.decoder_heads[i],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let reference = cfg
            .tasks
            .iter()
            .position(|&t| t == cfg.reference_task)
            .ok_or_else(|| {
                Error::Config(format!(
                    "reference task {} not among tasks",
                    cfg.reference_task
                ))
            })?;
        let deepest = cfg.stage_channels(3);
        let mut tasks = Vec::with_capacity(cfg.tasks.len());
        for &task in &cfg.tasks {
            let root = format!("decoder.{task}");
            let init_proj =
                Linear::new(store, init, &format!("{root}.init"), deepest, deepest, true);
            let owns_qk = !cfg.shared_attention || task == cfg.reference_task;
            let mut stages = Vec::with_capacity(4);
            for (i, geom) in geometry.iter().enumerate() {
                let c = cfg.stage_channels(3 - i);
                let heads = cfg.decoder_heads[i];
                let name = format!("{root}.stage{i}");
                let fuse = Linear::new(store, init, &format!("{name}.fuse"), c, c, true);
                let block1 = BlockParams::new(
                    store,
                    init,
                    &format!("{name}.block0"),
                    c,
                    heads,
                    cfg.decoder_mlp_ratio,
                    &geom.rel,
                    false,
                );
                let b2 = format!("{name}.block1");
                let block2 = SharedBlock {
                    ln1: LayerNorm::new(store, &format!("{b2}.ln1"), c),
                    qk: owns_qk
                        .then(|| QueryKey::new(store, init, &format!("{b2}.attn"), c, &geom.rel)),
                    vo: ValueOut::new(store, init, &format!("{b2}.attn"), c),
                    ln2: LayerNorm::new(store, &format!("{b2}.ln2"), c),
                    mlp: Mlp::new(store, init, &format!("{b2}.mlp"), c, cfg.decoder_mlp_ratio),
                    heads,
                };
                let expand = if i < 3 {
                    Some(PatchExpand::new(store, init, &format!("{name}.expand"), c)?)
                } else {
                    None
                };
                stages.push(DecoderStage {
                    fuse,
                    block1,
                    block2,
                    expand,
                });
            }
            let head = TaskHead::new(cfg, task, store, init)?;
            tasks.push(TaskDecoder {
                task,
                init: init_proj,
                stages,
                head,
            });
        }
        Ok(Decoder {
            tasks,
            geometry,
            shared_attention: cfg.shared_attention,
            reference,
        })
    }

    pub fn task_index(&self, task: Task) -> Result<usize> {
        self.tasks
            .iter()
            .position(|d| d.task == task)
            .ok_or_else(|| Error::Config(format!("task {task} has no decoder in this model")))
    }

    pub fn reference_task(&self) -> Task {
        self.tasks[self.reference].task
    }

    /// Decodes the requested tasks (all when `select` is `None`). Task
    /// streams start from the deepest pyramid level and consume skips
    /// deepest first.
    pub fn decode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pyramid: &FeaturePyramid,
        select: Option<&[Task]>,
    ) -> Result<DecoderOutput> {
        let chosen: Vec<usize> = match select {
            None => (0..self.tasks.len()).collect(),
            Some(ts) => ts
                .iter()
                .map(|&t| self.task_index(t))
                .collect::<Result<_>>()?,
        };
        let f4 = pyramid.levels[3];
        let mut streams = Vec::with_capacity(chosen.len());
        for &ti in &chosen {
            streams.push(self.tasks[ti].init.forward(tape, p, f4)?);
        }
        let mut stage_outputs = Vec::with_capacity(4);
        for (i, geom) in self.geometry.iter().enumerate() {
            let skip = pyramid.levels[3 - i];
            if tape.shape(skip) != tape.shape(streams[0]) {
                return dim_err(format!(
                    "decoder stage {i}: stream {:?} does not match skip {:?}",
                    tape.shape(streams[0]),
                    tape.shape(skip)
                ));
            }
            for (s, &ti) in streams.iter_mut().zip(&chosen) {
                let stage = &self.tasks[ti].stages[i];
                let fused = stage.fuse.forward(tape, p, skip)?;
                let x = tape.add(*s, fused)?;
                *s = stage.block1.forward(tape, p, x, geom)?;
            }
            if self.shared_attention {
                let reference = self.tasks[self.reference].stages[i]
                    .block2
                    .qk
                    .as_ref()
                    .expect("reference decoder owns the shared projections");
                let heads = self.tasks[self.reference].stages[i].block2.heads;
                let blocks: Vec<&SharedBlock> = chosen
                    .iter()
                    .map(|&ti| &self.tasks[ti].stages[i].block2)
                    .collect();
                let norms: Vec<&LayerNorm> = blocks.iter().map(|b| &b.ln1).collect();
                let vos: Vec<&ValueOut> = blocks.iter().map(|b| &b.vo).collect();
                let out = shared_attention_impl(
                    tape,
                    p,
                    skip,
                    &streams,
                    reference,
                    &vos,
                    Some(&norms),
                    heads,
                    geom,
                    true,
                )?;
                for ((s, y), b) in streams.iter_mut().zip(out.outputs).zip(&blocks) {
                    *s = mlp_residual(tape, p, y, &b.ln2, &b.mlp)?;
                }
            } else {
                for (s, &ti) in streams.iter_mut().zip(&chosen) {
                    let b = &self.tasks[ti].stages[i].block2;
                    let qk =
                        b.qk.as_ref()
                            .expect("every decoder owns q/k without shared attention");
                    let batch = tape.shape(*s)[0];
                    let h = b.ln1.forward(tape, p, *s)?;
                    let w = to_windows(tape, h, geom, true)?;
                    let attn = qk.attention_map(tape, p, w, b.heads, geom, true)?;
                    let o = b.vo.apply(tape, p, attn, w, b.heads)?;
                    let o = from_windows(tape, o, batch, geom, true)?;
                    let y = tape.add(*s, o)?;
                    *s = mlp_residual(tape, p, y, &b.ln2, &b.mlp)?;
                }
            }
            stage_outputs.push(
                chosen
                    .iter()
                    .map(|&ti| self.tasks[ti].task)
                    .zip(streams.iter().copied())
                    .collect(),
            );
            for (s, &ti) in streams.iter_mut().zip(&chosen) {
                if let Some(e) = &self.tasks[ti].stages[i].expand {
                    *s = e.forward(tape, p, *s)?;
                }
            }
        }
        let streams = chosen
            .iter()
            .map(|&ti| self.tasks[ti].task)
            .zip(streams)
            .collect();
        Ok(DecoderOutput {
            stage_outputs,
            streams,
        })
    }
}

/// Attention map and per-task outputs of one shared-attention layer.
#[derive(Clone, Debug)]
pub struct SharedAttentionOutput {
    /// `[B·nW, heads, n, n]`, computed once from the skip feature.
    pub attention: Var,
    /// `y_t = x_t + Out_t(A · V_t(x_t))` for each input stream, `[B, H, W, C]`.
    pub outputs: Vec<Var>,
}

/// Shared attention over `[B, H, W, C]` grids: query and key come from the
/// skip feature `x_sa` through the reference projections `qk`, values and
/// output projections are per stream.
#[allow(clippy::too_many_arguments)]
pub fn shared_attention(
    tape: &mut Tape,
    p: &Bound,
    x_sa: Var,
    streams: &[Var],
    qk: &QueryKey,
    vos: &[&ValueOut],
    heads: usize,
    geom: &StageGeometry,
    shifted: bool,
) -> Result<SharedAttentionOutput> {
    shared_attention_impl(tape, p, x_sa, streams, qk, vos, None, heads, geom, shifted)
}

#[allow(clippy::too_many_arguments)]
fn shared_attention_impl(
    tape: &mut Tape,
    p: &Bound,
    x_sa: Var,
    streams: &[Var],
    qk: &QueryKey,
    vos: &[&ValueOut],
    norms: Option<&[&LayerNorm]>,
    heads: usize,
    geom: &StageGeometry,
    shifted: bool,
) -> Result<SharedAttentionOutput> {
    if streams.len() != vos.len() {
        return Err(Error::Config(format!(
            "{} streams but {} value projections",
            streams.len(),
            vos.len()
        )));
    }
    for &s in streams {
        if tape.shape(s) != tape.shape(x_sa) {
            return dim_err(format!(
                "shared attention: stream {:?} does not match skip feature {:?}",
                tape.shape(s),
                tape.shape(x_sa)
            ));
        }
    }
    let batch = tape.shape(x_sa)[0];
    let sa_windows = to_windows(tape, x_sa, geom, shifted)?;
    let attention = qk.attention_map(tape, p, sa_windows, heads, geom, shifted)?;
    let mut outputs = Vec::with_capacity(streams.len());
    for (k, (&x, vo)) in streams.iter().zip(vos).enumerate() {
        let src = match norms {
            Some(ns) => ns[k].forward(tape, p, x)?,
            None => x,
        };
        let w = to_windows(tape, src, geom, shifted)?;
        let mixed = vo.apply(tape, p, attention, w, heads)?;
        let back = from_windows(tape, mixed, batch, geom, shifted)?;
        outputs.push(tape.add(x, back)?);
    }
    Ok(SharedAttentionOutput { attention, outputs })
}

/// Shared attention on already partitioned windows `[G, n, C]` with an
/// explicit `[heads, n, n]` bias. Outputs are `[G, n, C]` per stream.
#[allow(clippy::too_many_arguments)]
pub fn shared_attention_windows(
    tape: &mut Tape,
    p: &Bound,
    sa_windows: Var,
    streams: &[Var],
    qk: &QueryKey,
    vos: &[&ValueOut],
    heads: usize,
    bias: Var,
) -> Result<SharedAttentionOutput> {
    if streams.len() != vos.len() {
        return Err(Error::Config(format!(
            "{} streams but {} value projections",
            streams.len(),
            vos.len()
        )));
    }
    let attention = qk.attention_with_bias(tape, p, sa_windows, heads, bias, None)?;
    let mut outputs = Vec::with_capacity(streams.len());
    for (&x, vo) in streams.iter().zip(vos) {
        if tape.shape(x) != tape.shape(sa_windows) {
            return dim_err(format!(
                "shared attention: stream {:?} does not match skip windows {:?}",
                tape.shape(x),
                tape.shape(sa_windows)
            ));
        }
        let mixed = vo.apply(tape, p, attention, x, heads)?;
        outputs.push(tape.add(x, mixed)?);
    }
    Ok(SharedAttentionOutput { attention, outputs })
}
