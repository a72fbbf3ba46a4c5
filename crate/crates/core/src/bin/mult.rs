use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mult::ablation::{
    ablate, parse_subsets, shared_comparison, AblationPlan, SharedMode, SizeVariant,
};
use mult::checkpoint::config_hash;
use mult::config::{count_parameters, ArchConfig, Task};
use mult::data::{derive_seeds, generate_dataset, make_batch, read_dataset, write_dataset};
use mult::gradient_audit::{audit_model, AuditOptions};
use mult::optim::AdamConfig;
use mult::train::{evaluate, inverse_ema, train, TrainOptions};
use mult::{MultModel, Result};

#[derive(Parser)]
#[command(
    name = "mult",
    version,
    about = "Multitask windowed-attention transformer toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset file plus its seed manifest.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing metrics.jsonl and model.mtck to --out.
    Train {
        /// Preset name or config file.
        #[arg(long, default_value = "desk-nano")]
        config: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        budget: Budget,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
    },
    /// Mean per-task losses of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train single-task baselines and task subsets, one JSON line per run.
    Ablate {
        #[arg(long, default_value = "desk-nano")]
        config: String,
        /// Comma-separated task sets, e.g. `singles,sdnker` or `s,d,sd`.
        #[arg(long, default_value = "singles,all")]
        subsets: String,
        /// on, off or both.
        #[arg(long, default_value = "both")]
        shared: String,
        /// Comma-separated network sizes (preset names or config files);
        /// defaults to --config.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        budget: Budget,
        /// Training dataset file; generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation dataset file; generated when absent.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        train_count: usize,
        #[arg(long, default_value_t = 8)]
        val_count: usize,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
    /// Finite-difference audit of every parameter tensor's gradient.
    GradCheck {
        #[arg(long, default_value = "desk-nano")]
        config: String,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print every tensor, not just the worst ones.
        #[arg(long)]
        verbose: bool,
    },
    /// Parameter counts per component.
    Params {
        #[arg(long, default_value = "desk-nano")]
        config: String,
    },
}

#[derive(Args)]
struct Budget {
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    warmup: u64,
    #[arg(long, default_value_t = 0.0)]
    floor_lr: f64,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    /// Balance task losses by their inverse running mean.
    #[arg(long)]
    inverse_ema: bool,
}

impl Budget {
    fn options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            batch: self.batch,
            seed: self.seed,
            peak_lr: self.lr,
            warmup_steps: self.warmup,
            floor_lr: self.floor_lr,
            adam: AdamConfig {
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            balancing: if self.inverse_ema {
                inverse_ema()
            } else {
                TrainOptions::default().balancing
            },
            checkpoint_every: 0,
        }
    }
}

fn losses_line(losses: &[(Task, f64)]) -> String {
    losses
        .iter()
        .map(|(t, l)| format!("{t}={l:.6}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            seed,
            count,
            size,
            out,
        } => {
            let samples = generate_dataset(&derive_seeds(seed, count), size);
            write_dataset(&samples, &out)?;
            println!(
                "wrote {count} samples of {size}x{size} to {}",
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            budget,
            checkpoint_every,
        } => {
            let cfg = ArchConfig::load(&config)?;
            let opts = TrainOptions {
                checkpoint_every,
                ..budget.options()
            };
            let outcome = train(&cfg, &data, &opts, &out)?;
            let r = &outcome.result;
            println!(
                "initial total {:.6} ({})",
                r.initial.total,
                losses_line(&r.initial.losses)
            );
            println!(
                "final   total {:.6} ({})",
                r.last.total,
                losses_line(&r.last.losses)
            );
            println!(
                "checkpoint {} config {:016x}",
                outcome.checkpoint.display(),
                outcome.config_hash
            );
        }
        Command::Eval { ckpt, data } => {
            let report = evaluate(&ckpt, &data)?;
            println!(
                "samples {} total {:.6} ({})",
                report.samples,
                report.total,
                losses_line(&report.losses)
            );
        }
        Command::Ablate {
            config,
            subsets,
            shared,
            preset,
            out,
            budget,
            data,
            val,
            train_count,
            val_count,
            data_seed,
        } => {
            let labels: Vec<String> = match preset {
                Some(p) => p.split(',').map(|s| s.trim().to_string()).collect(),
                None => vec![config],
            };
            let sizes = labels
                .into_iter()
                .map(|spec| {
                    let label = Path::new(&spec)
                        .file_stem()
                        .map_or(spec.clone(), |s| s.to_string_lossy().into_owned());
                    Ok(SizeVariant {
                        config: ArchConfig::load(&spec)?,
                        label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let size = sizes[0].config.img_size;
            let train_set = match data {
                Some(p) => read_dataset(&p)?,
                None => generate_dataset(&derive_seeds(data_seed, train_count), size),
            };
            let val_set = match val {
                Some(p) => read_dataset(&p)?,
                None => generate_dataset(&derive_seeds(data_seed.wrapping_add(1), val_count), size),
            };
            let plan = AblationPlan {
                sizes,
                subsets: parse_subsets(&subsets)?,
                shared: SharedMode::parse(&shared)?,
                options: budget.options(),
                train: &train_set,
                val: &val_set,
            };
            let mut file = BufWriter::new(File::create(&out)?);
            let reports = ablate(&plan, &mut |r| {
                writeln!(file, "{}", r.to_json())?;
                file.flush()?;
                eprintln!(
                    "{} params {} wall {:.1}s",
                    r.run_id, r.parameters, r.wall_seconds
                );
                Ok(())
            })?;
            for size in &plan.sizes {
                for subset in plan.subsets.iter().filter(|s| s.len() > 1) {
                    let rows = shared_comparison(&reports, &size.label, subset);
                    if rows.is_empty() {
                        continue;
                    }
                    let wins = rows.iter().filter(|(_, on, off)| on >= off).count();
                    println!(
                        "{} {}: shared attention at least as good on {wins}/{} tasks",
                        size.label,
                        mult::config::tasks_string(subset),
                        rows.len()
                    );
                }
            }
            println!("wrote {} reports to {}", reports.len(), out.display());
        }
        Command::GradCheck {
            config,
            tolerance,
            seed,
            verbose,
        } => {
            let cfg = ArchConfig::load(&config)?;
            let (model, store) = MultModel::new(&cfg, seed)?;
            let sample = generate_dataset(&derive_seeds(seed, 1), cfg.img_size);
            let batch = make_batch(&sample.iter().collect::<Vec<_>>(), &cfg.tasks)?;
            let audit = audit_model(
                &model,
                &store,
                &batch,
                AuditOptions {
                    seed,
                    ..AuditOptions::default()
                },
            )?;
            let mut checks: Vec<_> = audit.checks.iter().collect();
            checks.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
            let shown = if verbose {
                checks.len()
            } else {
                checks.len().min(5)
            };
            for c in &checks[..shown] {
                println!(
                    "{:<48} rel err {:.3e} (analytic {:.6e}, numeric {:.6e})",
                    c.name, c.rel_err, c.analytic, c.numeric
                );
            }
            let worst = audit.max_rel_err();
            let pass = worst <= tolerance;
            println!(
                "{} tensors, max rel err {worst:.3e}, tolerance {tolerance:e}, {:.1}s: {}",
                audit.checks.len(),
                audit.seconds,
                if pass { "ok" } else { "FAILED" }
            );
            return Ok(pass);
        }
        Command::Params { config } => {
            let cfg = ArchConfig::load(&config)?;
            let breakdown = count_parameters(&cfg)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&breakdown).expect("breakdown serializes")
            );
            println!("config hash {:016x}", config_hash(&cfg));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
