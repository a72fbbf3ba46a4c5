mod common;

use common::oracles::brute_force_mask;
use common::random_tensor;
use mult::windowing::{
    cyclic_shift, relative_position_index, shift_mask, window_partition, window_reverse,
    RelPosBias, WindowGrid, MASK_VALUE,
};
use mult::{Tape, Tensor};

#[test]
fn partition_layout_matches_enumeration() {
    let (h, w, c, win) = (4, 4, 2, 2);
    let x = random_tensor(&[h, w, c], 1, 1.0);
    let windows = window_partition(&x, win).unwrap();
    assert_eq!(windows.shape(), [4, 4, 2]);
    for wy in 0..h / win {
        for wx in 0..w / win {
            for ty in 0..win {
                for tx in 0..win {
                    for ch in 0..c {
                        let got = windows.at(&[wy * (w / win) + wx, ty * win + tx, ch]);
                        assert_eq!(got, x.at(&[wy * win + ty, wx * win + tx, ch]));
                    }
                }
            }
        }
    }
}

#[test]
fn partition_and_reverse_are_mutual_inverses() {
    for (h, w, win, seed) in [(8, 8, 2, 2), (8, 8, 4, 3), (6, 9, 3, 4), (4, 4, 4, 5)] {
        let x = random_tensor(&[h, w, 3], seed, 1.0);
        let p = window_partition(&x, win).unwrap();
        assert_eq!(window_reverse(&p, h, w).unwrap(), x);
        let wins = random_tensor(p.shape(), seed + 100, 1.0);
        assert_eq!(
            window_partition(&window_reverse(&wins, h, w).unwrap(), win).unwrap(),
            wins
        );
    }
    let x = random_tensor(&[4, 4, 3], 9, 1.0);
    assert_eq!(window_partition(&x, 4).unwrap().data(), x.data());
    assert!(window_reverse(&random_tensor(&[3, 4, 1], 0, 1.0), 4, 4).is_err());
}

#[test]
fn cyclic_shift_index_rule() {
    let x = random_tensor(&[2, 2, 1], 3, 1.0);
    assert_eq!(
        cyclic_shift(&x, 1).unwrap().at(&[0, 0, 0]),
        x.at(&[1, 1, 0])
    );
    let y = random_tensor(&[6, 6, 2], 4, 1.0);
    assert_eq!(cyclic_shift(&y, 0).unwrap(), y);
    for s in 1..6 {
        let back = cyclic_shift(&cyclic_shift(&y, s).unwrap(), 6 - s).unwrap();
        assert_eq!(back, y);
    }
}

#[test]
fn shift_mask_matches_region_oracle() {
    let grid = WindowGrid::new(4, 4, 2, 1).unwrap();
    let mask = shift_mask(&grid);
    let oracle = brute_force_mask(4, 4, 2, 1);
    let masked = |m: &[f64]| m.iter().filter(|&&v| v == MASK_VALUE).count();
    assert_eq!(masked(mask.data()), masked(&oracle));
    // Two edge windows split 2+2 tokens (8 ordered pairs each); the corner
    // window holds four singleton regions (12 pairs).
    assert_eq!(masked(&oracle), 8 + 8 + 12);
    assert_eq!(mask.data(), &oracle[..]);

    for (side, win, s) in [(8, 4, 2), (8, 2, 1), (12, 4, 3), (6, 3, 1)] {
        let grid = WindowGrid::new(side, side, win, s).unwrap();
        assert_eq!(
            shift_mask(&grid).data(),
            &brute_force_mask(side, side, win, s)[..],
            "{side} {win} {s}"
        );
    }
}

#[test]
fn border_windows_have_masked_pairs_and_zero_shift_has_none() {
    for (side, win, s) in [(8, 4, 2), (8, 2, 1), (12, 4, 1)] {
        let mask = shift_mask(&WindowGrid::new(side, side, win, s).unwrap());
        let n = win * win;
        let per_row = side / win;
        for widx in 0..per_row * per_row {
            let border = widx / per_row == per_row - 1 || widx % per_row == per_row - 1;
            let any = mask.data()[widx * n * n..(widx + 1) * n * n].contains(&MASK_VALUE);
            assert_eq!(any, border, "window {widx} of {side}/{win}/{s}");
        }
        let flat = shift_mask(&WindowGrid::new(side, side, win, 0).unwrap());
        assert!(flat.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn masked_pairs_get_negligible_probability_and_rows_are_stochastic() {
    let grid = WindowGrid::new(8, 8, 4, 2).unwrap();
    let mask = shift_mask(&grid);
    let logits = random_tensor(mask.shape(), 7, 20.0);
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let m = tape.constant(mask.clone());
    let z = tape.add(l, m).unwrap();
    let p = tape.softmax_lastdim(z).unwrap();
    let probs = tape.value(p);
    for (pv, mv) in probs.data().iter().zip(mask.data()) {
        if *mv == MASK_VALUE {
            assert!(*pv <= 1e-6, "masked probability {pv}");
        }
    }
    for row in probs.data().chunks(16) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn relative_index_depends_only_on_displacement() {
    let win = 3;
    let n = win * win;
    let index = relative_position_index(win);
    assert_eq!(index.len(), n * n);
    let rows = (2 * win - 1) * (2 * win - 1);
    assert!(index.iter().all(|&r| r < rows));
    let disp = |a: usize, b: usize| {
        (
            (a / win) as i64 - (b / win) as i64,
            (a % win) as i64 - (b % win) as i64,
        )
    };
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                for d in 0..n {
                    assert_eq!(
                        index[a * n + b] == index[c * n + d],
                        disp(a, b) == disp(c, d),
                        "({a},{b}) vs ({c},{d})"
                    );
                }
            }
        }
    }
    let used: std::collections::BTreeSet<_> = index.iter().collect();
    assert_eq!(used.len(), rows);
}

#[test]
fn bias_expansion_reads_the_table() {
    let rel = RelPosBias::new(2, 3);
    assert_eq!(rel.table_rows(), 9);
    let table = random_tensor(&rel.table_shape(), 11, 1.0);
    let bias = rel.expand(&table).unwrap();
    assert_eq!(bias.shape(), [3, 4, 4]);
    for h in 0..3 {
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(bias.at(&[h, i, j]), table.at(&[rel.index[i * 4 + j], h]));
            }
        }
    }
    let one = RelPosBias::new(1, 2);
    let t = Tensor::from_vec(&one.table_shape(), vec![0.5, -0.25]);
    assert_eq!(one.expand(&t).unwrap().data(), &[0.5, -0.25]);
}
