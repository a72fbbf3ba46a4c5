//! Partitions a 4x4 grid into 2x2 windows, shifts it, and prints the
//! shifted-window mask and the relative position index.

use mult::windowing::{
    cyclic_shift, relative_position_index, shift_mask, window_partition, window_reverse,
    WindowGrid, MASK_VALUE,
};
use mult::{Result, Tensor};

fn main() -> Result<()> {
    let grid = Tensor::from_vec(&[4, 4, 1], (0..16).map(f64::from).collect());
    let windows = window_partition(&grid, 2)?;
    println!("windows {:?}:", windows.shape());
    for w in windows.data().chunks(4) {
        println!("  {w:?}");
    }
    assert_eq!(window_reverse(&windows, 4, 4)?, grid);

    let shifted = cyclic_shift(&grid, 1)?;
    println!("shifted by 1:");
    for row in shifted.data().chunks(4) {
        println!("  {row:?}");
    }

    let mask = shift_mask(&WindowGrid::new(4, 4, 2, 1)?);
    for (w, block) in mask.data().chunks(16).enumerate() {
        println!("mask of window {w} (x = blocked):");
        for row in block.chunks(4) {
            let cells: String = row
                .iter()
                .map(|&v| if v == MASK_VALUE { 'x' } else { '.' })
                .collect();
            println!("  {cells}");
        }
    }

    println!("relative position index, 2x2 window:");
    for row in relative_position_index(2).chunks(4) {
        println!("  {row:?}");
    }
    Ok(())
}
