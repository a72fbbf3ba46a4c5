//! The assembled network: encoder, decoders and heads over one parameter
//! store.

use crate::autograd::{Tape, Var};
use crate::config::{ArchConfig, Task};
use crate::decoder::{Decoder, DecoderOutput, HeadOutput};
use crate::encoder::{Encoder, FeaturePyramid};
use crate::error::{dim_err, Result};
use crate::params::{Bound, Initializer, ParamStore};

#[derive(Clone, Debug)]
pub struct MultModel {
    pub cfg: ArchConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub pyramid: FeaturePyramid,
    pub decoded: DecoderOutput,
    pub heads: Vec<(Task, HeadOutput)>,
}

impl ModelOutput {
    pub fn head(&self, task: Task) -> Option<&HeadOutput> {
        self.heads.iter().find(|(t, _)| *t == task).map(|(_, h)| h)
    }
}

impl MultModel {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(cfg: &ArchConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let encoder = Encoder::new(cfg, &mut store, &mut init)?;
        let decoder = Decoder::new(cfg, &mut store, &mut init)?;
        Ok((
            MultModel {
                cfg: cfg.clone(),
                encoder,
                decoder,
            },
            store,
        ))
    }

    /// Image batch `[B, H, W, 3]` through encoder, decoders and heads.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        images: Var,
        select: Option<&[Task]>,
    ) -> Result<ModelOutput> {
        let s = self.cfg.img_size;
        match tape.shape(images) {
            &[_, h, w, 3] if h == s && w == s => {}
            other => {
                return dim_err(format!(
                    "model expects [B, {s}, {s}, 3] images, got {other:?}"
                ))
            }
        }
        let pyramid = self.encoder.encode(tape, p, images)?;
        self.forward_from_pyramid(tape, p, pyramid, select)
    }

    pub fn forward_from_pyramid(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pyramid: FeaturePyramid,
        select: Option<&[Task]>,
    ) -> Result<ModelOutput> {
        let decoded = self.decoder.decode(tape, p, &pyramid, select)?;
        let mut heads = Vec::with_capacity(decoded.streams.len());
        for &(task, y) in &decoded.streams {
            let td = &self.decoder.tasks[self.decoder.task_index(task)?];
            heads.push((task, td.head.forward(tape, p, y)?));
        }
        Ok(ModelOutput {
            pyramid,
            decoded,
            heads,
        })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.cfg.tasks
    }
}
