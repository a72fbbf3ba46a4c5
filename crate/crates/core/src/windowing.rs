//! Window partitioning, cyclic shifts, shifted-window masks and relative
//! position bias indexing.
//!
//! Layout conventions: token grids are `[H, W, C]` (or `[B, H, W, C]` on the
//! tape), windows are enumerated row-major over the grid and tokens row-major
//! within each window. A shift of `s` rolls the grid up-left so that
//! `out(i, j) = in((i + s) mod H, (j + s) mod W)`; the inverse roll restores
//! the original layout after attention.

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Additive mask value for token pairs that must not attend to each other.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowGrid {
    pub fn new(height: usize, width: usize, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
            return dim_err(format!(
                "window {window} does not divide grid {height}x{width}"
            ));
        }
        if shift >= window {
            return Err(Error::Config(format!(
                "shift {shift} must be < window {window}"
            )));
        }
        Ok(WindowGrid {
            height,
            width,
            window,
            shift,
        })
    }

    pub fn num_windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// Same geometry with the shift disabled.
    pub fn regular(&self) -> WindowGrid {
        WindowGrid { shift: 0, ..*self }
    }
}

/// `[B, H, W, C] → [B, H/w, w, W/w, w, C]` then this permutation gives
/// `[B, H/w, W/w, w, w, C]`.
const PARTITION_AXES: [usize; 6] = [0, 1, 3, 2, 4, 5];

fn check_divisible(h: usize, w: usize, win: usize) -> Result<()> {
    if win == 0 || !h.is_multiple_of(win) || !w.is_multiple_of(win) {
        return dim_err(format!("window {win} does not divide grid {h}x{w}"));
    }
    Ok(())
}

/// `[H, W, C] → [nW, win², C]`.
pub fn window_partition(x: &Tensor, win: usize) -> Result<Tensor> {
    let &[h, w, c] = x.shape() else {
        return dim_err(format!(
            "window_partition expects [H, W, C], got {:?}",
            x.shape()
        ));
    };
    check_divisible(h, w, win)?;
    x.reshape(&[1, h / win, win, w / win, win, c])?
        .permute(&PARTITION_AXES)?
        .reshape(&[(h / win) * (w / win), win * win, c])
}

/// Inverse of [`window_partition`]: `[nW, win², C] → [H, W, C]`.
pub fn window_reverse(windows: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let &[nw, n, c] = windows.shape() else {
        return dim_err(format!(
            "window_reverse expects [nW, win², C], got {:?}",
            windows.shape()
        ));
    };
    let win = (n as f64).sqrt().round() as usize;
    if win * win != n || nw * n != h * w {
        return dim_err(format!(
            "window_reverse: {nw} windows of {n} tokens cannot tile a {h}x{w} grid"
        ));
    }
    check_divisible(h, w, win)?;
    windows
        .reshape(&[1, h / win, w / win, win, win, c])?
        .permute(&PARTITION_AXES)?
        .reshape(&[h, w, c])
}

/// Torus roll of a `[H, W, C]` grid by `(−s, −s)`.
pub fn cyclic_shift(x: &Tensor, s: usize) -> Result<Tensor> {
    let &[h, w, c] = x.shape() else {
        return dim_err(format!(
            "cyclic_shift expects [H, W, C], got {:?}",
            x.shape()
        ));
    };
    let rolled = crate::autograd::roll2d_data(x.data(), &[1, h, w, c], s % h.min(w).max(1), false);
    Tensor::new(vec![h, w, c], rolled)
}

/// Tape version of [`window_partition`] on `[B, H, W, C]`, giving
/// `[B·nW, win², C]`.
pub(crate) fn partition_var(tape: &mut Tape, x: Var, win: usize) -> Result<Var> {
    let &[b, h, w, c] = tape.shape(x) else {
        return dim_err(format!(
            "partition expects [B, H, W, C], got {:?}",
            tape.shape(x)
        ));
    };
    check_divisible(h, w, win)?;
    let r = tape.reshape(x, &[b, h / win, win, w / win, win, c])?;
    let p = tape.permute(r, &PARTITION_AXES)?;
    tape.reshape(p, &[b * (h / win) * (w / win), win * win, c])
}

/// Tape version of [`window_reverse`], giving `[B, H, W, C]`.
pub(crate) fn reverse_var(tape: &mut Tape, x: Var, batch: usize, grid: &WindowGrid) -> Result<Var> {
    let win = grid.window;
    let (h, w) = (grid.height, grid.width);
    let c = *tape.shape(x).last().unwrap();
    let r = tape.reshape(x, &[batch, h / win, w / win, win, win, c])?;
    let p = tape.permute(r, &PARTITION_AXES)?;
    tape.reshape(p, &[batch, h, w, c])
}

/// Additive mask `[nW, win², win²]` for attention after a cyclic shift:
/// pairs whose tokens came from different regions of the unshifted grid get
/// [`MASK_VALUE`], all other pairs get 0.
pub fn shift_mask(grid: &WindowGrid) -> Tensor {
    let (h, w, win, s) = (grid.height, grid.width, grid.window, grid.shift);
    let n = win * win;
    let nw = grid.num_windows();
    let mut mask = vec![0.0; nw * n * n];
    if s == 0 {
        return Tensor::from_vec(&[nw, n, n], mask);
    }
    // Region labels in the shifted frame: bands [0, H-win), [H-win, H-s), [H-s, H).
    let band = |i: usize, extent: usize| {
        if i < extent - win {
            0
        } else if i < extent - s {
            1
        } else {
            2
        }
    };
    let wins_per_row = w / win;
    for widx in 0..nw {
        let (wy, wx) = (widx / wins_per_row, widx % wins_per_row);
        let label = |t: usize| {
            let (ty, tx) = (wy * win + t / win, wx * win + t % win);
            band(ty, h) * 3 + band(tx, w)
        };
        for i in 0..n {
            let li = label(i);
            for j in 0..n {
                if label(j) != li {
                    mask[(widx * n + i) * n + j] = MASK_VALUE;
                }
            }
        }
    }
    Tensor::from_vec(&[nw, n, n], mask)
}

/// Relative position bias: a learnable `[(2w−1)², heads]` table and the
/// `[w², w²]` map from token pairs to table rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RelPosBias {
    pub window: usize,
    pub heads: usize,
    pub index: Vec<usize>,
}

impl RelPosBias {
    pub fn new(window: usize, heads: usize) -> Self {
        RelPosBias {
            window,
            heads,
            index: relative_position_index(window),
        }
    }

    pub fn table_rows(&self) -> usize {
        (2 * self.window - 1) * (2 * self.window - 1)
    }

    pub fn table_shape(&self) -> [usize; 2] {
        [self.table_rows(), self.heads]
    }

    /// Flat gather indices yielding `[heads, w², w²]` from a row-major table.
    fn gather_indices(&self) -> Vec<usize> {
        let n = self.window * self.window;
        let mut idx = Vec::with_capacity(self.heads * n * n);
        for h in 0..self.heads {
            for &row in &self.index {
                idx.push(row * self.heads + h);
            }
        }
        idx
    }

    /// Expands a table into the `[heads, w², w²]` bias `B[h,i,j] = table[index(i,j), h]`.
    pub fn expand(&self, table: &Tensor) -> Result<Tensor> {
        if table.shape() != self.table_shape() {
            return dim_err(format!(
                "bias table {:?} does not match expected {:?}",
                table.shape(),
                self.table_shape()
            ));
        }
        let n = self.window * self.window;
        let data = self
            .gather_indices()
            .iter()
            .map(|&i| table.data()[i])
            .collect();
        Tensor::new(vec![self.heads, n, n], data)
    }

    pub(crate) fn expand_var(&self, tape: &mut Tape, table: Var) -> Result<Var> {
        let n = self.window * self.window;
        if tape.shape(table) != self.table_shape() {
            return dim_err(format!(
                "bias table {:?} does not match expected {:?}",
                tape.shape(table),
                self.table_shape()
            ));
        }
        tape.gather(table, &self.gather_indices(), &[self.heads, n, n])
    }
}

/// `index[i·w² + j]` = table row for the displacement from token `i` to `j`.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let side = 2 * window - 1;
    let mut index = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / window, i % window);
        for j in 0..n {
            let (yj, xj) = (j / window, j % window);
            let dy = yi + window - 1 - yj;
            let dx = xi + window - 1 - xj;
            index.push(dy * side + dx);
        }
    }
    index
}
