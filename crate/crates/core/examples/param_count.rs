//! Parameter counts for every preset with shared attention on and off.

use mult::config::{count_parameters, PRESETS};
use mult::{ArchConfig, Result};

fn main() -> Result<()> {
    for name in PRESETS {
        let mut cfg = ArchConfig::preset(name)?;
        let on = count_parameters(&cfg)?;
        cfg.shared_attention = false;
        let off = count_parameters(&cfg)?;
        println!(
            "{name:<11} shared on {:>12}  off {:>12}  encoder {:>12}",
            on.total, off.total, on.encoder
        );
        for ((task, d), (_, h)) in on.decoders.iter().zip(&on.heads) {
            println!("    {task}: decoder {d:>11}  head {h:>6}");
        }
    }
    Ok(())
}
