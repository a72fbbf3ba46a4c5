//! Renders a few synthetic scenes, writes them to disk, reads them back and
//! prints per-task statistics.

use mult::data::{derive_seeds, generate_dataset, read_dataset, write_dataset, NUM_CLASSES};
use mult::Result;

fn stats(xs: &[f32]) -> (f32, f32, f32) {
    let lo = xs.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    (lo, hi, xs.iter().sum::<f32>() / xs.len() as f32)
}

fn main() -> Result<()> {
    let samples = generate_dataset(&derive_seeds(3, 4), 64);
    let dir = std::env::temp_dir().join("mult-synth-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("scenes.bin");
    write_dataset(&samples, &path)?;
    let back = read_dataset(&path)?;
    assert_eq!(back, samples);
    println!(
        "wrote and re-read {} samples at {}",
        back.len(),
        path.display()
    );
    for s in &back {
        let mut hist = [0usize; NUM_CLASSES];
        s.segmentation.iter().for_each(|&c| hist[c as usize] += 1);
        println!("seed {:#018x}", s.seed);
        println!("  classes   {hist:?}");
        for (name, xs) in [
            ("rgb", &s.rgb),
            ("depth", &s.depth),
            ("normals", &s.normals),
            ("keypoints", &s.keypoints),
            ("edges", &s.edges),
            ("shading", &s.shading),
        ] {
            let (lo, hi, mean) = stats(xs);
            println!("  {name:<9} min {lo:.3} max {hi:.3} mean {mean:.3}");
        }
    }
    Ok(())
}
