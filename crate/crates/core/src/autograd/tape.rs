use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::gemm::{gemm, MatRef};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{inverse_permutation, permute_data, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Roll2d {
        a: Var,
        shift: usize,
        inverse: bool,
    },
    Gather(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    L2Normalize(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    L1Loss {
        pred: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Every operation appends exactly one node whose inputs precede it, so the
/// node order is a topological order and [`Tape::backward`] replays it once
/// in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the nodes of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; variables the loss does not depend on get zeros.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match self.get(var) {
            Some(g) => Tensor::from_vec(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    // ---- elementwise and broadcasting ------------------------------------

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.broadcast_binary(a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(&shape, data), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.broadcast_binary(a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(&shape, data), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, factor), rg)
    }

    fn broadcast_binary(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(sa, &shape);
            let ob = broadcast_offsets(sb, &shape);
            oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok((shape, data))
    }

    // ---- linear algebra ---------------------------------------------------

    /// Batched matrix product `[…, m, k] · […, k, n] → […, m, n]` with
    /// broadcastable leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a · bᵀ`, i.e. `[…, m, k] · […, n, k]ᵀ → […, m, n]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let plan = MatMulPlan::new(self.shape(a), self.shape(b), trans_b)?;
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        let (da, db) = (self.data(a), self.data(b));
        for (bi, (&ia, &ib)) in plan.a_batch.iter().zip(&plan.b_batch).enumerate() {
            gemm(
                plan.m,
                plan.k,
                plan.n,
                da,
                MatRef::row_major(ia * plan.m * plan.k, plan.k),
                db,
                plan.b_view(ib),
                0.0,
                &mut out,
                MatRef::row_major(bi * plan.m * plan.n, plan.n),
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(&plan.out_shape, out),
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return dim_err(format!(
                "linear: input {:?} incompatible with weight {:?}",
                xs, ws
            ));
        }
        let (fan_in, fan_out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return dim_err(format!(
                    "linear: bias {:?} does not match weight {:?}",
                    self.shape(b),
                    ws
                ));
            }
        }
        let rows = self.value(x).numel() / fan_in;
        let mut out = match b {
            Some(b) => {
                let bias = self.data(b);
                let mut o = Vec::with_capacity(rows * fan_out);
                for _ in 0..rows {
                    o.extend_from_slice(bias);
                }
                o
            }
            None => vec![0.0; rows * fan_out],
        };
        gemm(
            rows,
            fan_in,
            fan_out,
            self.data(x),
            MatRef::row_major(0, fan_in),
            self.data(w),
            MatRef::row_major(0, fan_out),
            1.0,
            &mut out,
            MatRef::row_major(0, fan_out),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = fan_out;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, rg))
    }

    // ---- layout -----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(axes)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Torus roll of a `[B, H, W, C]` tensor:
    /// `out[b, i, j] = in[b, (i + s) mod H, (j + s) mod W]`.
    pub fn roll2d(&mut self, a: Var, shift: usize) -> Result<Var> {
        self.roll_impl(a, shift, false)
    }

    /// Undoes [`Tape::roll2d`] with the same shift.
    pub fn unroll2d(&mut self, a: Var, shift: usize) -> Result<Var> {
        self.roll_impl(a, shift, true)
    }

    fn roll_impl(&mut self, a: Var, shift: usize, inverse: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return dim_err(format!("roll2d expects [B, H, W, C], got {:?}", shape));
        }
        let out = roll2d_data(self.data(a), &shape, shift, inverse);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::Roll2d { a, shift, inverse },
            rg,
        ))
    }

    /// `out.data[p] = a.data[indices[p]]`, shaped as `shape`.
    pub fn gather(&mut self, a: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.data(a);
        if n != indices.len() {
            return dim_err(format!(
                "gather: {} indices for output shape {:?}",
                indices.len(),
                shape
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return dim_err(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            ));
        }
        let out: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_vec(shape, out),
            Op::Gather(a, indices.to_vec()),
            rg,
        ))
    }

    // ---- nonlinearities ---------------------------------------------------

    /// Softmax over the last axis, stabilized by subtracting the row max.
    /// A NaN anywhere in a row makes the whole row NaN.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().unwrap_or(&0);
        if width == 0 {
            return dim_err("softmax over an empty last axis");
        }
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Softmax(a), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !eps.is_finite() || eps < 0.0 {
            return Err(Error::Config(format!(
                "layer_norm eps must be finite and >= 0, got {eps}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&0);
        if width == 0 || self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return dim_err(format!(
                "layer_norm: gamma {:?} / beta {:?} must match last extent of {:?}",
                self.shape(gamma),
                self.shape(beta),
                shape
            ));
        }
        let (g, bt) = (self.data(gamma), self.data(beta));
        let xs = self.data(x);
        let rows = xs.len() / width;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(width) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + bt[j]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Exact GELU, `x·Φ(x)` with Φ evaluated through `erf`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2)));
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Scales each last-axis vector to unit Euclidean length.
    pub fn l2_normalize_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().unwrap_or(&0);
        if width == 0 {
            return dim_err("l2 normalization over an empty last axis");
        }
        let mut out = self.data(a).to_vec();
        let mut norms = Vec::with_capacity(out.len() / width);
        for row in out.chunks_mut(width) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(&shape, out), Op::L2Normalize(a, norms), rg))
    }

    // ---- reductions and losses -------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / v.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Mean absolute error against a constant target of the same shape.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return dim_err(format!(
                "l1_loss: prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            ));
        }
        let p = self.data(pred);
        let loss =
            crate::tensor::compensated_sum(p.iter().zip(target.data()).map(|(a, b)| (a - b).abs()))
                / p.len().max(1) as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1Loss {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy of last-axis logits against integer class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let classes = *shape.last().unwrap_or(&0);
        let rows = self.value(logits).numel() / classes.max(1);
        if classes == 0 || rows != labels.len() {
            return dim_err(format!(
                "cross_entropy: logits {:?} vs {} labels",
                shape,
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut terms = Vec::with_capacity(rows);
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            terms.push(lse - row[label]);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = crate::tensor::compensated_sum(terms);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / rows as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Reverse-mode sweep from a single-element `loss`. Gradient of the loss
    /// with respect to itself is 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return dim_err(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        // Intermediate gradients were consumed above; only leaves keep theirs.
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        let red = reduce_broadcast(g, out.shape(), self.shape(v));
                        accumulate(grads, v, &red);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.requires_grad(v) {
                        continue;
                    }
                    let od = self.data(other);
                    let local: Vec<f64> = if self.shape(other) == out.shape() {
                        g.iter().zip(od).map(|(x, y)| x * y).collect()
                    } else {
                        let off = broadcast_offsets(self.shape(other), out.shape());
                        g.iter().zip(&off).map(|(x, &j)| x * od[j]).collect()
                    };
                    let red = reduce_broadcast(&local, out.shape(), self.shape(v));
                    accumulate(grads, v, &red);
                }
            }
            Op::Scale(a, f) => {
                let local: Vec<f64> = g.iter().map(|x| x * f).collect();
                accumulate(grads, *a, &local);
            }
            Op::MatMul { a, b, trans_b } => self.backprop_matmul(*a, *b, *trans_b, g, grads),
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (fan_in, fan_out) = (ws[0], ws[1]);
                let rows = g.len() / fan_out;
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; rows * fan_in];
                    gemm(
                        rows,
                        fan_out,
                        fan_in,
                        g,
                        MatRef::row_major(0, fan_out),
                        self.data(*w),
                        MatRef::transposed(0, fan_out),
                        0.0,
                        &mut dx,
                        MatRef::row_major(0, fan_in),
                    );
                    accumulate(grads, *x, &dx);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; fan_in * fan_out];
                    gemm(
                        fan_in,
                        rows,
                        fan_out,
                        self.data(*x),
                        MatRef::transposed(0, fan_in),
                        g,
                        MatRef::row_major(0, fan_out),
                        0.0,
                        &mut dw,
                        MatRef::row_major(0, fan_out),
                    );
                    accumulate(grads, *w, &dw);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; fan_out];
                        for row in g.chunks(fan_out) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        accumulate(grads, *b, &db);
                    }
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
            Op::Permute(a, axes) => {
                let back = permute_data(g, out.shape(), &inverse_permutation(axes));
                accumulate(grads, *a, &back);
            }
            Op::Roll2d { a, shift, inverse } => {
                let back = roll2d_data(g, out.shape(), *shift, !*inverse);
                accumulate(grads, *a, &back);
            }
            Op::Gather(a, indices) => {
                let mut back = vec![0.0; self.value(*a).numel()];
                for (&i, v) in indices.iter().zip(g) {
                    back[i] += v;
                }
                accumulate(grads, *a, &back);
            }
            Op::Softmax(a) => {
                let width = *out.shape().last().unwrap();
                let mut dx = Vec::with_capacity(g.len());
                for (y, dy) in out.data().chunks(width).zip(g.chunks(width)) {
                    let dot: f64 = y.iter().zip(dy).map(|(p, q)| p * q).sum();
                    dx.extend(y.iter().zip(dy).map(|(p, q)| p * (q - dot)));
                }
                accumulate(grads, *a, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let width = *out.shape().last().unwrap();
                let gm = self.data(*gamma);
                if self.requires_grad(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((dy, h), r) in g.chunks(width).zip(xhat.chunks(width)).zip(rstd) {
                        let dh: Vec<f64> = dy.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / width as f64;
                        let mean_dh_h =
                            dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                        dx.extend(
                            dh.iter()
                                .zip(h)
                                .map(|(d, hh)| r * (d - mean_dh - hh * mean_dh_h)),
                        );
                    }
                    accumulate(grads, *x, &dx);
                }
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; width];
                    let mut db = vec![0.0; width];
                    for (dy, h) in g.chunks(width).zip(xhat.chunks(width)) {
                        for j in 0..width {
                            dg[j] += dy[j] * h[j];
                            db[j] += dy[j];
                        }
                    }
                    if self.requires_grad(*gamma) {
                        accumulate(grads, *gamma, &dg);
                    }
                    if self.requires_grad(*beta) {
                        accumulate(grads, *beta, &db);
                    }
                }
            }
            Op::Gelu(a) => {
                let inv_sqrt_2pi = 1.0 / (2.0 * PI).sqrt();
                let dx: Vec<f64> = self
                    .data(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &dy)| {
                        let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
                        let pdf = inv_sqrt_2pi * (-0.5 * x * x).exp();
                        dy * (cdf + x * pdf)
                    })
                    .collect();
                accumulate(grads, *a, &dx);
            }
            Op::Sigmoid(a) => {
                let dx: Vec<f64> = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &dy)| dy * y * (1.0 - y))
                    .collect();
                accumulate(grads, *a, &dx);
            }
            Op::L2Normalize(a, norms) => {
                let width = *out.shape().last().unwrap();
                let mut dx = Vec::with_capacity(g.len());
                for ((y, dy), n) in out.data().chunks(width).zip(g.chunks(width)).zip(norms) {
                    let dot: f64 = y.iter().zip(dy).map(|(p, q)| p * q).sum();
                    dx.extend(y.iter().zip(dy).map(|(p, q)| (q - p * dot) / n));
                }
                accumulate(grads, *a, &dx);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, &vec![g[0] / n as f64; n]);
            }
            Op::L1Loss { pred, target } => {
                let scale = g[0] / target.len().max(1) as f64;
                let dx: Vec<f64> = self
                    .data(*pred)
                    .iter()
                    .zip(target)
                    .map(|(p, t)| {
                        let d = p - t;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *pred, &dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * classes + l] -= scale;
                }
                accumulate(grads, *logits, &dx);
            }
        }
    }

    fn backprop_matmul(
        &self,
        a: Var,
        b: Var,
        trans_b: bool,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let plan = MatMulPlan::new(self.shape(a), self.shape(b), trans_b)
            .expect("shapes validated in forward");
        let (m, k, n) = (plan.m, plan.k, plan.n);
        if self.requires_grad(a) {
            // dA = dC · Bᵀ (or dC · B when the forward used Bᵀ).
            let mut da = vec![0.0; self.value(a).numel()];
            let db_src = self.data(b);
            for (bi, (&ia, &ib)) in plan.a_batch.iter().zip(&plan.b_batch).enumerate() {
                let bv = plan.b_view(ib);
                let bt = MatRef {
                    offset: bv.offset,
                    row_stride: bv.col_stride,
                    col_stride: bv.row_stride,
                };
                gemm(
                    m,
                    n,
                    k,
                    g,
                    MatRef::row_major(bi * m * n, n),
                    db_src,
                    bt,
                    1.0,
                    &mut da,
                    MatRef::row_major(ia * m * k, k),
                );
            }
            accumulate(grads, a, &da);
        }
        if self.requires_grad(b) {
            let mut db = vec![0.0; self.value(b).numel()];
            let da_src = self.data(a);
            for (bi, (&ia, &ib)) in plan.a_batch.iter().zip(&plan.b_batch).enumerate() {
                if trans_b {
                    // B is [n, k]: dB = dCᵀ · A.
                    gemm(
                        n,
                        m,
                        k,
                        g,
                        MatRef::transposed(bi * m * n, n),
                        da_src,
                        MatRef::row_major(ia * m * k, k),
                        1.0,
                        &mut db,
                        MatRef::row_major(ib * n * k, k),
                    );
                } else {
                    // B is [k, n]: dB = Aᵀ · dC.
                    gemm(
                        k,
                        m,
                        n,
                        da_src,
                        MatRef::transposed(ia * m * k, k),
                        g,
                        MatRef::row_major(bi * m * n, n),
                        1.0,
                        &mut db,
                        MatRef::row_major(ib * k * n, n),
                    );
                }
            }
            accumulate(grads, b, &db);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, g: &[f64]) {
    match &mut grads[var.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// `inverse == false`: `out[b,i,j] = in[b,(i+s)%H,(j+s)%W]`; `true` undoes it.
pub(crate) fn roll2d_data(data: &[f64], shape: &[usize], shift: usize, inverse: bool) -> Vec<f64> {
    let (bsz, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; data.len()];
    for b in 0..bsz {
        for i in 0..h {
            for j in 0..w {
                let si = (i + shift) % h;
                let sj = (j + shift) % w;
                let (dst, src) = if inverse {
                    ((si, sj), (i, j))
                } else {
                    ((i, j), (si, sj))
                };
                let d = ((b * h + dst.0) * w + dst.1) * c;
                let s = ((b * h + src.0) * w + src.1) * c;
                out[d..d + c].copy_from_slice(&data[s..s + c]);
            }
        }
    }
    out
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err(format!("shapes {:?} and {:?} are not broadcastable", a, b)),
        };
    }
    Ok(out)
}

/// For each element of `out_shape`, the offset of the element of a tensor of
/// shape `in_shape` that broadcasts onto it.
pub(crate) fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let lead = rank - in_shape.len();
    let total: usize = out_shape.iter().product();
    let in_numel: usize = in_shape.iter().product();
    // Fast path: the input is a trailing block repeated over leading axes.
    if in_shape == &out_shape[lead..] {
        return (0..total).map(|i| i % in_numel.max(1)).collect();
    }
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        if in_shape[i] != 1 {
            strides[lead + i] = s;
        }
        s *= in_shape[i];
    }
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn reduce_broadcast(g: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let mut red = vec![0.0; in_shape.iter().product()];
    for (v, &j) in g.iter().zip(&broadcast_offsets(in_shape, out_shape)) {
        red[j] += v;
    }
    red
}

struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    out_shape: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return dim_err(format!(
                "matmul needs rank >= 2 operands, got {:?} and {:?}",
                sa, sb
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return dim_err(format!(
                "matmul inner extents disagree: {:?} · {:?}{}",
                sa,
                sb,
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).map_err(|_| {
            Error::Dimension(format!(
                "matmul batch extents of {:?} and {:?} do not broadcast",
                sa, sb
            ))
        })?;
        let a_batch = broadcast_offsets(ba, &batch);
        let b_batch = broadcast_offsets(bb, &batch);
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(MatMulPlan {
            m,
            k,
            n,
            trans_b,
            out_shape,
            a_batch,
            b_batch,
        })
    }

    fn b_view(&self, ib: usize) -> MatRef {
        if self.trans_b {
            MatRef::transposed(ib * self.n * self.k, self.k)
        } else {
            MatRef::row_major(ib * self.k * self.n, self.n)
        }
    }
}
