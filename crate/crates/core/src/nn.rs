//! Layers shared by the encoder and decoders: linear maps, layer norm, MLP,
//! windowed multi-head attention and the pre-norm transformer block.

use crate::autograd::{Tape, Var};
use crate::config::LAYER_NORM_EPS;
use crate::error::Result;
use crate::params::{Bound, Initializer, ParamId, ParamStore, INIT_STD};
use crate::tensor::Tensor;
use crate::windowing::{partition_var, reverse_var, shift_mask, RelPosBias, WindowGrid};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        Self::with_std(store, init, name, fan_in, fan_out, bias, INIT_STD)
    }

    /// Same as [`Linear::new`] with weights drawn at `std` instead of the
    /// default.
    pub fn with_std(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.trunc_normal(&[fan_in, fan_out], std),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Weights at `1/√fan_in`, which keeps activation scale through chains
    /// of linear maps without normalization.
    pub fn fan_in_scaled(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        Self::with_std(
            store,
            init,
            name,
            fan_in,
            fan_out,
            bias,
            1.0 / (fan_in as f64).sqrt(),
        )
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[width])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        width: usize,
        ratio: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(
                store,
                init,
                &format!("{name}.fc1"),
                width,
                ratio * width,
                true,
            ),
            fc2: Linear::new(
                store,
                init,
                &format!("{name}.fc2"),
                ratio * width,
                width,
                true,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Window geometry of one stage: regular and shifted grids plus the shift
/// mask (computed once).
#[derive(Clone, Debug)]
pub struct StageGeometry {
    pub grid: WindowGrid,
    pub mask: Tensor,
    pub rel: RelPosBias,
}

impl StageGeometry {
    pub fn new(side: usize, window: usize, shift: usize, heads: usize) -> Result<Self> {
        let grid = WindowGrid::new(side, side, window, shift)?;
        Ok(StageGeometry {
            mask: shift_mask(&grid),
            grid,
            rel: RelPosBias::new(window, heads),
        })
    }
}

/// Query/key half of an attention layer: the projections and the relative
/// position bias table that together determine the attention map.
#[derive(Clone, Debug)]
pub struct QueryKey {
    pub q: Linear,
    pub k: Linear,
    pub bias_table: ParamId,
}

impl QueryKey {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        width: usize,
        rel: &RelPosBias,
    ) -> Self {
        QueryKey {
            q: Linear::new(store, init, &format!("{name}.q"), width, width, true),
            k: Linear::new(store, init, &format!("{name}.k"), width, width, true),
            bias_table: store.add(
                format!("{name}.rel_bias"),
                init.trunc_normal(&rel.table_shape(), INIT_STD),
            ),
        }
    }

    /// `softmax(q·kᵀ/√d + B [+ mask])` over windows of `src` (already shifted
    /// and partitioned to `[B·nW, n, C]`), giving `[B·nW, heads, n, n]`.
    pub fn attention_map(
        &self,
        tape: &mut Tape,
        p: &Bound,
        src: Var,
        heads: usize,
        geom: &StageGeometry,
        shifted: bool,
    ) -> Result<Var> {
        let bias = geom.rel.expand_var(tape, p.var(self.bias_table))?;
        let mask = if shifted && geom.grid.shift > 0 {
            let n = geom.grid.tokens_per_window();
            Some(tape.constant(geom.mask.reshape(&[geom.grid.num_windows(), 1, n, n])?))
        } else {
            None
        };
        self.attention_with_bias(tape, p, src, heads, bias, mask)
    }

    /// Same as [`QueryKey::attention_map`] with an explicit `[heads, n, n]`
    /// bias and optional `[nW, 1, n, n]` additive mask, for windows of any
    /// token count.
    pub fn attention_with_bias(
        &self,
        tape: &mut Tape,
        p: &Bound,
        src: Var,
        heads: usize,
        bias: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, p, src)?;
        let k = self.k.forward(tape, p, src)?;
        let q = split_heads(tape, q, heads)?;
        let k = split_heads(tape, k, heads)?;
        let head_dim = tape.shape(q)[3];
        let logits = tape.matmul_t(q, k)?;
        let logits = tape.scale(logits, 1.0 / (head_dim as f64).sqrt());
        let mut logits = tape.add(logits, bias)?;
        if let Some(mask) = mask {
            let shape = tape.shape(logits).to_vec();
            let (g, n) = (shape[0], shape[2]);
            let nw = tape.shape(mask)[0];
            if g % nw != 0 {
                return crate::error::dim_err(format!(
                    "{g} windows are not a multiple of the {nw}-window mask"
                ));
            }
            let l5 = tape.reshape(logits, &[g / nw, nw, heads, n, n])?;
            let l5 = tape.add(l5, mask)?;
            logits = tape.reshape(l5, &shape)?;
        }
        tape.softmax_lastdim(logits)
    }
}

/// `[G, n, C] → [G, heads, n, C/heads]`.
pub fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let &[g, n, c] = tape.shape(x) else {
        return crate::error::dim_err(format!(
            "split_heads expects [G, n, C], got {:?}",
            tape.shape(x)
        ));
    };
    let r = tape.reshape(x, &[g, n, heads, c / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[G, heads, n, d] → [G, n, heads·d]`.
pub fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let &[g, h, n, d] = tape.shape(x) else {
        return crate::error::dim_err(format!(
            "merge_heads expects [G, h, n, d], got {:?}",
            tape.shape(x)
        ));
    };
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[g, n, h * d])
}

/// Value and output projections: `Out(concat_h(A_h · V(x)_h))`.
#[derive(Clone, Debug)]
pub struct ValueOut {
    pub v: Linear,
    pub out: Linear,
}

impl ValueOut {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, width: usize) -> Self {
        ValueOut {
            v: Linear::new(store, init, &format!("{name}.v"), width, width, true),
            out: Linear::new(store, init, &format!("{name}.out"), width, width, true),
        }
    }

    /// `windows` is `[B·nW, n, C]`, `attn` is `[B·nW, heads, n, n]`.
    pub fn apply(
        &self,
        tape: &mut Tape,
        p: &Bound,
        attn: Var,
        windows: Var,
        heads: usize,
    ) -> Result<Var> {
        let v = self.v.forward(tape, p, windows)?;
        let v = split_heads(tape, v, heads)?;
        let mixed = tape.matmul(attn, v)?;
        let merged = merge_heads(tape, mixed)?;
        self.out.forward(tape, p, merged)
    }
}

/// Shifts (if requested) and partitions a `[B, H, W, C]` grid into windows.
pub fn to_windows(tape: &mut Tape, x: Var, geom: &StageGeometry, shifted: bool) -> Result<Var> {
    let x = if shifted && geom.grid.shift > 0 {
        tape.roll2d(x, geom.grid.shift)?
    } else {
        x
    };
    partition_var(tape, x, geom.grid.window)
}

/// Inverse of [`to_windows`].
pub fn from_windows(
    tape: &mut Tape,
    w: Var,
    batch: usize,
    geom: &StageGeometry,
    shifted: bool,
) -> Result<Var> {
    let x = reverse_var(tape, w, batch, &geom.grid)?;
    if shifted && geom.grid.shift > 0 {
        tape.unroll2d(x, geom.grid.shift)
    } else {
        Ok(x)
    }
}

/// Pre-norm windowed self-attention block:
/// `x ← x + WMSA(LN1(x))`, then `x ← x + MLP(LN2(x))`.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1: LayerNorm,
    pub qk: QueryKey,
    pub vo: ValueOut,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
    pub shifted: bool,
}

impl BlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rel: &RelPosBias,
        shifted: bool,
    ) -> Self {
        BlockParams {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            qk: QueryKey::new(store, init, &format!("{name}.attn"), width, rel),
            vo: ValueOut::new(store, init, &format!("{name}.attn"), width),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), width, mlp_ratio),
            heads,
            shifted,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, geom: &StageGeometry) -> Result<Var> {
        let batch = tape.shape(x)[0];
        let h = self.ln1.forward(tape, p, x)?;
        let w = to_windows(tape, h, geom, self.shifted)?;
        let attn = self
            .qk
            .attention_map(tape, p, w, self.heads, geom, self.shifted)?;
        let o = self.vo.apply(tape, p, attn, w, self.heads)?;
        let o = from_windows(tape, o, batch, geom, self.shifted)?;
        let x = tape.add(x, o)?;
        mlp_residual(tape, p, x, &self.ln2, &self.mlp)
    }
}

pub fn mlp_residual(tape: &mut Tape, p: &Bound, x: Var, ln: &LayerNorm, mlp: &Mlp) -> Result<Var> {
    let h = ln.forward(tape, p, x)?;
    let h = mlp.forward(tape, p, h)?;
    tape.add(x, h)
}
