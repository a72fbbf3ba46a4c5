//! Audits the full model gradient against finite differences.
//!
//! `cargo run --release --example grad_check -- [config]`

use mult::data::{derive_seeds, generate_dataset, make_batch};
use mult::gradient_audit::{audit_model, AuditOptions};
use mult::{ArchConfig, MultModel, Result};

fn main() -> Result<()> {
    let spec = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "desk-nano".into());
    let cfg = ArchConfig::load(&spec)?;
    let (model, store) = MultModel::new(&cfg, 0)?;
    let samples = generate_dataset(&derive_seeds(0, 1), cfg.img_size);
    let batch = make_batch(&samples.iter().collect::<Vec<_>>(), &cfg.tasks)?;
    let audit = audit_model(&model, &store, &batch, AuditOptions::default())?;
    let mut checks: Vec<_> = audit.checks.iter().collect();
    checks.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    for c in checks.iter().take(10) {
        println!(
            "{:<44} {:>8} values  rel err {:.2e}",
            c.name, c.numel, c.rel_err
        );
    }
    println!(
        "loss {:.6}, {} tensors, max rel err {:.2e}, {:.1}s",
        audit.loss,
        checks.len(),
        audit.max_rel_err(),
        audit.seconds
    );
    Ok(())
}
