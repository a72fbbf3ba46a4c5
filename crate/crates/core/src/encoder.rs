//! Shared pyramidal encoder: patch embedding, four stages of windowed
//! transformer blocks, and patch merging between stages.

use crate::autograd::{Tape, Var};
use crate::config::ArchConfig;
use crate::error::{dim_err, Result};
use crate::nn::{BlockParams, LayerNorm, Linear, StageGeometry};
use crate::params::{Bound, Initializer, ParamStore};

/// Encoder stage outputs at 1/4, 1/8, 1/16 and 1/32 resolution, each a
/// `[B, side, side, channels]` grid on the tape.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

/// Flatten+linear patch embedding. Each `p×p×3` patch is flattened row-major
/// with channels last: element `(dy, dx, ch)` sits at `(dy·p + dx)·3 + ch`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        patch: usize,
        channels: usize,
    ) -> Self {
        PatchEmbed {
            proj: Linear::new(
                store,
                init,
                "encoder.patch_embed",
                3 * patch * patch,
                channels,
                true,
            ),
            patch,
        }
    }

    /// `[B, H, W, 3] → [B, H/p, W/p, C]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, img: Var) -> Result<Var> {
        let &[b, h, w, ch] = tape.shape(img) else {
            return dim_err(format!(
                "patch_embed expects [B, H, W, 3], got {:?}",
                tape.shape(img)
            ));
        };
        let ps = self.patch;
        if ch != 3 || h % ps != 0 || w % ps != 0 {
            return dim_err(format!(
                "patch size {ps} does not tile image {:?}",
                tape.shape(img)
            ));
        }
        let r = tape.reshape(img, &[b, h / ps, ps, w / ps, ps, 3])?;
        let r = tape.permute(r, &[0, 1, 3, 2, 4, 5])?;
        let r = tape.reshape(r, &[b, h / ps, w / ps, ps * ps * 3])?;
        self.proj.forward(tape, p, r)
    }
}

/// 2×2 neighbourhood concatenation in order (0,0), (0,1), (1,0), (1,1),
/// layer norm, then a bias-free `4C → 2C` linear.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerge {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        channels: usize,
    ) -> Self {
        PatchMerge {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * channels),
            reduce: Linear::new(
                store,
                init,
                &format!("{name}.reduce"),
                4 * channels,
                2 * channels,
                false,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let cat = merge_neighbours(tape, x)?;
        let n = self.norm.forward(tape, p, cat)?;
        self.reduce.forward(tape, p, n)
    }
}

/// `[B, H, W, C] → [B, H/2, W/2, 4C]` with the 2×2 block of each output
/// token concatenated row-major.
pub fn merge_neighbours(tape: &mut Tape, x: Var) -> Result<Var> {
    let &[b, h, w, c] = tape.shape(x) else {
        return dim_err(format!(
            "patch_merge expects [B, H, W, C], got {:?}",
            tape.shape(x)
        ));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return dim_err(format!("patch_merge needs even extents, got {h}x{w}"));
    }
    let r = tape.reshape(x, &[b, h / 2, 2, w / 2, 2, c])?;
    let r = tape.permute(r, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(r, &[b, h / 2, w / 2, 4 * c])
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub blocks: Vec<BlockParams>,
    pub geometry: StageGeometry,
    pub merge: Option<PatchMerge>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: PatchEmbed,
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(cfg: &ArchConfig, store: &mut ParamStore, init: &mut Initializer) -> Result<Self> {
        let embed = PatchEmbed::new(store, init, cfg.patch_size, cfg.base_channels);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let c = cfg.stage_channels(s);
            let heads = cfg.encoder_heads[s];
            let geometry = StageGeometry::new(cfg.grid_side(s), cfg.window, cfg.shift, heads)?;
            let blocks = (0..cfg.stage_depths[s])
                .map(|j| {
                    BlockParams::new(
                        store,
                        init,
                        &format!("encoder.stage{s}.block{j}"),
                        c,
                        heads,
                        cfg.mlp_ratio,
                        &geometry.rel,
                        j % 2 == 1,
                    )
                })
                .collect();
            let merge =
                (s < 3).then(|| PatchMerge::new(store, init, &format!("encoder.merge{s}"), c));
            stages.push(EncoderStage {
                blocks,
                geometry,
                merge,
            });
        }
        Ok(Encoder { embed, stages })
    }

    /// Shift flags of every block, stage by stage (regular first, alternating).
    pub fn block_schedule(&self) -> Vec<Vec<bool>> {
        self.stages
            .iter()
            .map(|s| s.blocks.iter().map(|b| b.shifted).collect())
            .collect()
    }

    /// `[B, H, W, 3]` image batch to the four-level feature pyramid. Stage
    /// outputs are recorded after the stage's blocks, before merging.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, img: Var) -> Result<FeaturePyramid> {
        let mut x = self.embed.forward(tape, p, img)?;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(tape, p, x, &stage.geometry)?;
            }
            levels.push(x);
            if let Some(m) = &stage.merge {
                x = m.forward(tape, p, x)?;
            }
        }
        Ok(FeaturePyramid {
            levels: [levels[0], levels[1], levels[2], levels[3]],
        })
    }
}
