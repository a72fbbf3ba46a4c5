//! Architecture description, presets, validation and exact parameter
//! accounting.
//!
//! The parameter count is a closed form over the same component layout that
//! [`crate::model::MultModel::new`] instantiates; the two are cross-checked in
//! the test suite.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

/// The six dense prediction tasks, in report column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Task {
    /// Semantic segmentation.
    S,
    /// Depth.
    D,
    /// Surface normals.
    N,
    /// 2-D keypoint heat map.
    K,
    /// 2-D (Sobel) texture edges.
    E,
    /// Reshading.
    R,
}

impl Task {
    pub const ALL: [Task; 6] = [Task::S, Task::D, Task::N, Task::K, Task::E, Task::R];

    pub fn letter(self) -> char {
        match self {
            Task::S => 'S',
            Task::D => 'D',
            Task::N => 'N',
            Task::K => 'K',
            Task::E => 'E',
            Task::R => 'R',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::S => "segmentation",
            Task::D => "depth",
            Task::N => "normals",
            Task::K => "keypoints",
            Task::E => "edges",
            Task::R => "reshading",
        }
    }

    pub fn from_letter(c: char) -> Result<Task> {
        match c.to_ascii_uppercase() {
            'S' => Ok(Task::S),
            'D' => Ok(Task::D),
            'N' => Ok(Task::N),
            'K' => Ok(Task::K),
            'E' => Ok(Task::E),
            'R' => Ok(Task::R),
            _ => Err(Error::Config(format!(
                "unknown task '{c}' (expected one of S,D,N,K,E,R)"
            ))),
        }
    }

    /// Output channels of the task head.
    pub fn channels(self, seg_classes: usize) -> usize {
        match self {
            Task::S => seg_classes,
            Task::N => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Parses a task list such as `SDN`, `s,d,n` or `all`.
pub fn parse_tasks(s: &str) -> Result<Vec<Task>> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("all") {
        return Ok(Task::ALL.to_vec());
    }
    let mut tasks = Vec::new();
    for c in s.chars().filter(|c| !c.is_whitespace() && *c != ',') {
        let t = Task::from_letter(c)?;
        if tasks.contains(&t) {
            return Err(Error::Config(format!("task {t} listed twice in '{s}'")));
        }
        tasks.push(t);
    }
    if tasks.is_empty() {
        return Err(Error::Config("empty task list".into()));
    }
    Ok(tasks)
}

pub fn tasks_string(tasks: &[Task]) -> String {
    tasks.iter().map(|t| t.letter()).collect()
}

pub const PRESETS: [&str; 3] = ["mult-large", "mult-tiny", "desk-nano"];

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub base_channels: usize,
    pub stage_depths: [usize; 4],
    pub encoder_heads: [usize; 4],
    pub decoder_heads: [usize; 4],
    pub window: usize,
    pub shift: usize,
    pub tasks: Vec<Task>,
    pub reference_task: Task,
    pub seg_classes: usize,
    pub shared_attention: bool,
    /// Hidden width multiplier of encoder MLPs.
    pub mlp_ratio: usize,
    /// Hidden width multiplier of decoder MLPs.
    pub decoder_mlp_ratio: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl ArchConfig {
    pub fn preset(name: &str) -> Result<ArchConfig> {
        let large = ArchConfig {
            img_size: 224,
            patch_size: 4,
            base_channels: 192,
            stage_depths: [2, 2, 18, 2],
            encoder_heads: [6, 12, 24, 48],
            decoder_heads: [48, 24, 12, 6],
            window: 7,
            shift: 3,
            tasks: Task::ALL.to_vec(),
            reference_task: Task::N,
            seg_classes: 8,
            shared_attention: true,
            mlp_ratio: 4,
            decoder_mlp_ratio: 2,
        };
        match name {
            "mult-large" => Ok(large),
            "mult-tiny" => Ok(ArchConfig {
                base_channels: 96,
                stage_depths: [2, 2, 6, 2],
                ..large
            }),
            "desk-nano" => Ok(ArchConfig {
                img_size: 128,
                patch_size: 4,
                base_channels: 16,
                stage_depths: [1, 1, 2, 1],
                encoder_heads: [1, 2, 4, 8],
                decoder_heads: [8, 4, 2, 1],
                window: 4,
                shift: 2,
                ..large
            }),
            _ => Err(Error::Config(format!(
                "unknown preset '{name}'; valid presets: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Token grid side of encoder stage `s` (0-based).
    pub fn grid_side(&self, stage: usize) -> usize {
        (self.img_size / self.patch_size) >> stage
    }

    /// Channel width of encoder stage `s` (0-based).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn has_task(&self, task: Task) -> bool {
        self.tasks.contains(&task)
    }

    /// Every violated invariant (empty when the configuration is valid).
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let push = |v: &mut Vec<String>, s: String| v.push(s);
        if self.patch_size == 0 || self.img_size == 0 {
            push(&mut v, "img_size and patch_size must be positive".into());
            return v;
        }
        if !self.img_size.is_multiple_of(self.patch_size) {
            push(
                &mut v,
                format!(
                    "patch_size {} does not divide img_size {}",
                    self.patch_size, self.img_size
                ),
            );
        }
        let tokens = self.img_size / self.patch_size;
        if tokens == 0 || !tokens.is_multiple_of(8) {
            push(
                &mut v,
                format!("token grid side {tokens} (img_size / patch_size) must be divisible by 8"),
            );
        }
        if self.window == 0 {
            push(&mut v, "window must be positive".into());
        } else {
            for s in 0..4 {
                let side = tokens >> s;
                if side == 0 || !side.is_multiple_of(self.window) {
                    push(
                        &mut v,
                        format!(
                            "window does not divide grid: window {} vs stage {} grid side {}",
                            self.window,
                            s + 1,
                            side
                        ),
                    );
                }
            }
            if self.shift >= self.window {
                push(
                    &mut v,
                    format!(
                        "shift {} must satisfy 0 <= shift < window {}",
                        self.shift, self.window
                    ),
                );
            }
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(4) {
            push(
                &mut v,
                format!(
                    "base_channels {} must be a positive multiple of 4 (task heads halve it twice)",
                    self.base_channels
                ),
            );
        }
        for s in 0..4 {
            let c = self.stage_channels(s);
            let eh = self.encoder_heads[s];
            if eh == 0 || !c.is_multiple_of(eh) {
                push(
                    &mut v,
                    format!(
                        "heads must divide channels: encoder stage {} has {} heads for {} channels",
                        s + 1,
                        eh,
                        c
                    ),
                );
            }
            let dc = self.stage_channels(3 - s);
            let dh = self.decoder_heads[s];
            if dh == 0 || !dc.is_multiple_of(dh) {
                push(
                    &mut v,
                    format!(
                        "heads must divide channels: decoder stage {} has {} heads for {} channels",
                        s + 1,
                        dh,
                        dc
                    ),
                );
            }
            if self.stage_depths[s] == 0 {
                push(&mut v, format!("stage {} depth must be at least 1", s + 1));
            }
        }
        if self.tasks.is_empty() {
            push(&mut v, "at least one task is required".into());
        }
        let unique: BTreeSet<_> = self.tasks.iter().collect();
        if unique.len() != self.tasks.len() {
            push(&mut v, "tasks must not repeat".into());
        }
        if !self.tasks.contains(&self.reference_task) {
            push(
                &mut v,
                format!(
                    "reference task {} is not among tasks {}",
                    self.reference_task,
                    tasks_string(&self.tasks)
                ),
            );
        }
        if self.has_task(Task::S) && self.seg_classes < 2 {
            push(&mut v, "seg_classes must be at least 2".into());
        }
        if self.mlp_ratio == 0 || self.decoder_mlp_ratio == 0 {
            push(&mut v, "mlp ratios must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// Same architecture restricted to `tasks`. The reference task is kept
    /// when present, otherwise the first listed task takes its place.
    pub fn with_tasks(&self, tasks: &[Task]) -> ArchConfig {
        let reference_task = if tasks.contains(&self.reference_task) {
            self.reference_task
        } else {
            tasks.first().copied().unwrap_or(self.reference_task)
        };
        ArchConfig {
            tasks: tasks.to_vec(),
            reference_task,
            ..self.clone()
        }
    }

    pub fn to_text(&self) -> String {
        let list = |a: &[usize; 4]| {
            a.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let tasks: Vec<String> = self.tasks.iter().map(|t| t.to_string()).collect();
        format!(
            "img_size = {}\npatch_size = {}\nbase_channels = {}\nstage_depths = {}\n\
             encoder_heads = {}\ndecoder_heads = {}\nwindow = {}\nshift = {}\ntasks = {}\n\
             reference_task = {}\nseg_classes = {}\nshared_attention = {}\nmlp_ratio = {}\n\
             decoder_mlp_ratio = {}\n",
            self.img_size,
            self.patch_size,
            self.base_channels,
            list(&self.stage_depths),
            list(&self.encoder_heads),
            list(&self.decoder_heads),
            self.window,
            self.shift,
            tasks.join(","),
            self.reference_task,
            self.seg_classes,
            self.shared_attention,
            self.mlp_ratio,
            self.decoder_mlp_ratio,
        )
    }

    /// Parses `key = value` lines. A `preset` key selects the starting point
    /// (default `desk-nano`); other keys override it. Unknown keys are errors.
    pub fn from_text(text: &str) -> Result<ArchConfig> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got '{raw}'",
                    lineno + 1
                ))
            })?;
            entries.push((lineno + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let preset = entries
            .iter()
            .find(|(_, k, _)| k == "preset")
            .map(|(_, _, v)| v.as_str())
            .unwrap_or("desk-nano");
        let mut cfg = ArchConfig::preset(preset)?;
        let mut reference_given = false;
        for (lineno, key, val) in &entries {
            let ctx = |e: Error| Error::Config(format!("line {lineno} ({key}): {e}"));
            match key.as_str() {
                "preset" => {}
                "img_size" => cfg.img_size = parse_num(val).map_err(ctx)?,
                "patch_size" => cfg.patch_size = parse_num(val).map_err(ctx)?,
                "base_channels" => cfg.base_channels = parse_num(val).map_err(ctx)?,
                "stage_depths" => cfg.stage_depths = parse_four(val).map_err(ctx)?,
                "encoder_heads" => cfg.encoder_heads = parse_four(val).map_err(ctx)?,
                "decoder_heads" => cfg.decoder_heads = parse_four(val).map_err(ctx)?,
                "window" => cfg.window = parse_num(val).map_err(ctx)?,
                "shift" => cfg.shift = parse_num(val).map_err(ctx)?,
                "tasks" => cfg.tasks = parse_tasks(val).map_err(ctx)?,
                "reference_task" => {
                    let mut cs = val.chars();
                    let t = match (cs.next(), cs.next()) {
                        (Some(c), None) => Task::from_letter(c).map_err(ctx)?,
                        _ => return Err(ctx(Error::Config(format!("bad task '{val}'")))),
                    };
                    cfg.reference_task = t;
                    reference_given = true;
                }
                "seg_classes" => cfg.seg_classes = parse_num(val).map_err(ctx)?,
                "shared_attention" => cfg.shared_attention = parse_bool(val).map_err(ctx)?,
                "mlp_ratio" => cfg.mlp_ratio = parse_num(val).map_err(ctx)?,
                "decoder_mlp_ratio" => cfg.decoder_mlp_ratio = parse_num(val).map_err(ctx)?,
                other => {
                    return Err(Error::Config(format!(
                        "line {lineno}: unknown key '{other}'"
                    )))
                }
            }
        }
        if !reference_given && !cfg.tasks.contains(&cfg.reference_task) {
            cfg = cfg.with_tasks(&cfg.tasks.clone());
        }
        Ok(cfg)
    }

    /// Loads a config file, or a preset when `spec` names one.
    pub fn load(spec: &str) -> Result<ArchConfig> {
        if PRESETS.contains(&spec) {
            return ArchConfig::preset(spec);
        }
        let path = Path::new(spec);
        if !path.is_file() {
            return Err(Error::Config(format!(
                "'{spec}' is neither a preset ({}) nor a config file",
                PRESETS.join(", ")
            )));
        }
        ArchConfig::from_text(&fs::read_to_string(path)?)
    }
}

fn parse_num(v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::Config(format!("expected a non-negative integer, got '{v}'")))
}

fn parse_four(v: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = v
        .trim_matches(|c| c == '(' || c == ')' || c == '[' || c == ']')
        .split(',')
        .map(|p| parse_num(p.trim()))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|p: Vec<usize>| {
        Error::Config(format!(
            "expected 4 comma-separated values, got {}",
            p.len()
        ))
    })
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("expected true/false, got '{v}'"))),
    }
}

impl FromStr for ArchConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchConfig::from_text(s)
    }
}

// ---- parameter accounting -------------------------------------------------

/// Learnable scalars per component. `decoders` includes the shared
/// reference q/k projections and bias tables under the reference task.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamBreakdown {
    pub encoder: usize,
    pub decoders: Vec<(Task, usize)>,
    pub heads: Vec<(Task, usize)>,
    pub total: usize,
}

pub(crate) fn linear_params(fan_in: usize, fan_out: usize, bias: bool) -> usize {
    fan_in * fan_out + if bias { fan_out } else { 0 }
}

fn rel_bias_params(window: usize, heads: usize) -> usize {
    (2 * window - 1) * (2 * window - 1) * heads
}

/// Pre-norm transformer block. `with_qk` covers the query/key projections
/// and the relative position bias table.
fn block_params(
    channels: usize,
    heads: usize,
    window: usize,
    mlp_ratio: usize,
    with_qk: bool,
) -> usize {
    let c = channels;
    let hidden = mlp_ratio * c;
    let mut n = 2 * c // LN1
        + linear_params(c, c, true) // value
        + linear_params(c, c, true) // output
        + 2 * c // LN2
        + linear_params(c, hidden, true)
        + linear_params(hidden, c, true);
    if with_qk {
        n += 2 * linear_params(c, c, true) + rel_bias_params(window, heads);
    }
    n
}

pub fn encoder_params(cfg: &ArchConfig) -> usize {
    let p = cfg.patch_size;
    let mut n = linear_params(3 * p * p, cfg.base_channels, true);
    for s in 0..4 {
        let c = cfg.stage_channels(s);
        n += cfg.stage_depths[s]
            * block_params(c, cfg.encoder_heads[s], cfg.window, cfg.mlp_ratio, true);
        if s < 3 {
            n += 2 * (4 * c) + linear_params(4 * c, 2 * c, false);
        }
    }
    n
}

/// Per-task decoder, excluding the task head.
pub fn decoder_params(cfg: &ArchConfig, task: Task) -> usize {
    let deepest = cfg.stage_channels(3);
    let owns_qk = !cfg.shared_attention || task == cfg.reference_task;
    let mut n = linear_params(deepest, deepest, true);
    for i in 0..4 {
        let c = cfg.stage_channels(3 - i);
        let h = cfg.decoder_heads[i];
        n += linear_params(c, c, true); // skip fusion
        n += block_params(c, h, cfg.window, cfg.decoder_mlp_ratio, true);
        n += block_params(c, h, cfg.window, cfg.decoder_mlp_ratio, owns_qk);
        if i < 3 {
            n += linear_params(c, 2 * c, false);
        }
    }
    n
}

pub fn head_params(cfg: &ArchConfig, task: Task) -> usize {
    let c = cfg.base_channels;
    linear_params(c, 2 * c, false)
        + linear_params(c / 2, c, false)
        + linear_params(c / 4, task.channels(cfg.seg_classes), true)
}

pub fn count_parameters(cfg: &ArchConfig) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let encoder = encoder_params(cfg);
    let decoders: Vec<_> = cfg
        .tasks
        .iter()
        .map(|&t| (t, decoder_params(cfg, t)))
        .collect();
    let heads: Vec<_> = cfg
        .tasks
        .iter()
        .map(|&t| (t, head_params(cfg, t)))
        .collect();
    let total = encoder
        + decoders.iter().map(|(_, n)| n).sum::<usize>()
        + heads.iter().map(|(_, n)| n).sum::<usize>();
    Ok(ParamBreakdown {
        encoder,
        decoders,
        heads,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            let cfg = ArchConfig::preset(name).unwrap();
            assert!(
                cfg.violations().is_empty(),
                "{name}: {:?}",
                cfg.violations()
            );
        }
        assert_eq!(
            ArchConfig::preset("mult-large").unwrap().stage_depths,
            [2, 2, 18, 2]
        );
        assert_eq!(
            ArchConfig::preset("mult-tiny").unwrap().stage_depths,
            [2, 2, 6, 2]
        );
        let e = ArchConfig::preset("swin-b").unwrap_err().to_string();
        assert!(e.contains("desk-nano") && e.contains("mult-large"), "{e}");
    }

    #[test]
    fn window_violation_on_8x8_grid() {
        let cfg = ArchConfig {
            img_size: 32,
            patch_size: 4,
            window: 7,
            shift: 3,
            ..ArchConfig::preset("desk-nano").unwrap()
        };
        let v = cfg.violations();
        assert!(
            v.iter().any(|m| m.contains("window does not divide grid")),
            "{v:?}"
        );
    }

    #[test]
    fn heads_violation_reports_all() {
        let mut cfg = ArchConfig::preset("desk-nano").unwrap();
        cfg.encoder_heads[0] = 5; // 16-channel stage
        cfg.shift = 9;
        let v = cfg.violations();
        assert!(
            v.iter().any(|m| m.contains("heads must divide channels")),
            "{v:?}"
        );
        assert!(v.iter().any(|m| m.contains("shift")), "{v:?}");
    }

    #[test]
    fn single_linear_count() {
        assert_eq!(linear_params(4, 2, true), 10);
    }

    #[test]
    fn text_roundtrip_and_unknown_key() {
        let cfg = ArchConfig::preset("mult-tiny").unwrap();
        assert_eq!(ArchConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ArchConfig::from_text("preset = desk-nano\nwindw = 4\n").is_err());
        let c = ArchConfig::from_text("preset = desk-nano\ntasks = S,D\n").unwrap();
        assert_eq!(c.tasks, vec![Task::S, Task::D]);
        assert_eq!(c.reference_task, Task::S);
    }

    #[test]
    fn breakdown_is_additive_and_shared_is_smaller() {
        let cfg = ArchConfig::preset("desk-nano").unwrap();
        let on = count_parameters(&cfg).unwrap();
        let sum = on.encoder
            + on.decoders.iter().map(|d| d.1).sum::<usize>()
            + on.heads.iter().map(|h| h.1).sum::<usize>();
        assert_eq!(sum, on.total);
        let off = count_parameters(&ArchConfig {
            shared_attention: false,
            ..cfg.clone()
        })
        .unwrap();
        assert!(on.total < off.total);
        let one = cfg.with_tasks(&[Task::D]);
        let one_off = ArchConfig {
            shared_attention: false,
            ..one.clone()
        };
        assert_eq!(
            count_parameters(&one).unwrap().total,
            count_parameters(&one_off).unwrap().total
        );
    }

    #[test]
    fn parse_task_lists() {
        assert_eq!(
            parse_tasks("s,d,n").unwrap(),
            vec![Task::S, Task::D, Task::N]
        );
        assert_eq!(parse_tasks("all").unwrap().len(), 6);
        assert!(parse_tasks("SS").is_err());
        assert!(parse_tasks("X").is_err());
    }
}
