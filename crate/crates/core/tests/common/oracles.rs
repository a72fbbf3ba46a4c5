//! Independent reference computations shared by the integration tests.

use mult::windowing::MASK_VALUE;

/// Mask built from first principles: a token at shifted position (i, j)
/// came from ((i + s) mod H, (j + s) mod W); two tokens may attend to each
/// other only if they sit on the same side of the wrap-around seam on both
/// axes.
pub fn brute_force_mask(h: usize, w: usize, win: usize, s: usize) -> Vec<f64> {
    let n = win * win;
    let per_row = w / win;
    let nw = (h / win) * per_row;
    let mut mask = vec![0.0; nw * n * n];
    let origin = |widx: usize, t: usize| {
        let (i, j) = (
            (widx / per_row) * win + t / win,
            (widx % per_row) * win + t % win,
        );
        ((i + s) % h, (j + s) % w)
    };
    let region = |(oi, oj): (usize, usize)| (oi < s, oj < s);
    for widx in 0..nw {
        for a in 0..n {
            for b in 0..n {
                if region(origin(widx, a)) != region(origin(widx, b)) {
                    mask[(widx * n + a) * n + b] = MASK_VALUE;
                }
            }
        }
    }
    mask
}

/// Transformer block with pre-norms, MLP ratio `r` and a window-4 bias
/// table (49 rows per head): `(4 + 2r)c² + (9 + r)c + 49h`, or
/// `(2 + 2r)c² + (7 + r)c` without query/key projections and table.
pub fn block_params(c: usize, h: usize, r: usize, qk: bool) -> usize {
    if qk {
        (4 + 2 * r) * c * c + (9 + r) * c + 49 * h
    } else {
        (2 + 2 * r) * c * c + (7 + r) * c
    }
}

pub fn desk_nano_closed_form() -> usize {
    let block = block_params;
    let embed = 4 * 4 * 3 * 16 + 16;
    let encoder_blocks = block(16, 1, 4, true)
        + block(32, 2, 4, true)
        + 2 * block(64, 4, 4, true)
        + block(128, 8, 4, true);
    // Patch merging: norm over 4c plus a bias-free 4c → 2c linear.
    let merges: usize = [16, 32, 64].iter().map(|&c| 8 * c + 8 * c * c).sum();
    let encoder = embed + encoder_blocks + merges;

    let decoder = |owns_qk: bool| {
        let mut n = 128 * 128 + 128;
        for (i, (c, h)) in [(128, 8), (64, 4), (32, 2), (16, 1)]
            .into_iter()
            .enumerate()
        {
            n += c * c + c + block(c, h, 2, true) + block(c, h, 2, owns_qk);
            if i < 3 {
                n += 2 * c * c;
            }
        }
        n
    };
    // Two expansions (16 → 32 and 8 → 16, bias-free) then 4 → channels.
    let head = |ch: usize| 16 * 32 + 8 * 16 + 4 * ch + ch;
    encoder + 5 * decoder(false) + decoder(true) + head(8) + head(3) + 4 * head(1)
}

/// Reference Sobel: explicit kernels over a replicate-padded copy, then
/// per-image max normalization.
pub fn reference_sobel(gray: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut padded = vec![0.0; ph * pw];
    for y in 0..ph {
        for x in 0..pw {
            let sy = y.saturating_sub(1).min(h - 1);
            let sx = x.saturating_sub(1).min(w - 1);
            padded[y * pw + x] = gray[sy * w + sx];
        }
    }
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let mut mag = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for dy in 0..3 {
                for dx in 0..3 {
                    let v = padded[(y + dy) * pw + x + dx];
                    gx += kx[dy][dx] * v;
                    gy += kx[dx][dy] * v;
                }
            }
            mag[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        mag.iter_mut().for_each(|m| *m /= max);
    }
    mag
}

pub fn gray_of(rgb: &[f32]) -> Vec<f64> {
    rgb.chunks(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Scalar parameters of one two-token, one-head, one-channel shared
/// attention case.
pub struct TwoTokenCase {
    pub x_sa: [f64; 2],
    pub wq: f64,
    pub bq: f64,
    pub wk: f64,
    pub bk: f64,
    pub bias: [[f64; 2]; 2],
    /// Per task: stream, value weight and bias, output weight and bias.
    pub tasks: Vec<([f64; 2], f64, f64, f64, f64)>,
}

impl TwoTokenCase {
    pub fn example() -> Self {
        TwoTokenCase {
            x_sa: [0.5, -1.0],
            wq: 0.8,
            bq: 0.1,
            wk: -0.6,
            bk: 0.2,
            bias: [[0.3, -0.2], [0.05, 0.4]],
            tasks: vec![
                ([1.5, -0.5], 1.2, -0.3, 0.7, 0.05),
                ([-2.0, 0.25], -0.4, 0.6, 1.1, -0.1),
            ],
        }
    }

    /// A = softmax(q kᵀ + B) and y_t = x_t + w_o·(A v_t) + b_o, by hand.
    pub fn expected(&self) -> ([[f64; 2]; 2], Vec<[f64; 2]>) {
        let q: Vec<f64> = self.x_sa.iter().map(|x| self.wq * x + self.bq).collect();
        let k: Vec<f64> = self.x_sa.iter().map(|x| self.wk * x + self.bk).collect();
        let mut a = [[0.0; 2]; 2];
        for i in 0..2 {
            let logits: Vec<f64> = (0..2).map(|j| q[i] * k[j] + self.bias[i][j]).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..2 {
                a[i][j] = logits[j].exp() / z;
            }
        }
        let outputs = self
            .tasks
            .iter()
            .map(|(x, wv, bv, wo, bo)| {
                let v: Vec<f64> = x.iter().map(|xi| wv * xi + bv).collect();
                let mut y = [0.0; 2];
                for i in 0..2 {
                    y[i] = x[i] + wo * (a[i][0] * v[0] + a[i][1] * v[1]) + bo;
                }
                y
            })
            .collect();
        (a, outputs)
    }
}
