use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use symoe::arch::Model;
use symoe::checks::{run_checks, Status};
use symoe::data::{EvalSet, World};
use symoe::disentangle::{
    profile_activations, read_partitions, write_partitions, ActivationProfile, PartitionOptions, PartitionStrategy,
};
use symoe::metrics::{read_metrics, render_svg, series, smooth};
use symoe::train::{compare, prepare_model, pretrain, probe_eval, profile_batches, run_training, summary_table, TrainConfig};

const OUT_ENV: &str = "SYMOE_OUT";

#[derive(Parser)]
#[command(name = "symoe", version, about = "Modality-aware sparse MoE training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count expert selections per modality for a checkpoint.
    Profile {
        ckpt: PathBuf,
        config: PathBuf,
        /// Output file [default: $SYMOE_OUT/profile.jsonl].
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Plan per-layer expert groups from an activation profile.
    Partition {
        profile: PathBuf,
        #[arg(long)]
        n_und: usize,
        #[arg(long, default_value = "bimodal")]
        strategy: PartitionStrategy,
        /// Rank by per-modality frequency instead of raw counts.
        #[arg(long)]
        normalize: bool,
        /// Use one partition, from counts summed over layers, everywhere.
        #[arg(long)]
        global_partition: bool,
        /// Text-group size for the tripartite strategy.
        #[arg(long)]
        n_text: Option<usize>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train one run.
    Train {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Run directory [default: $SYMOE_OUT/<run_name>].
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train the dense parent on understanding data.
    Pretrain {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Pretrain, partition and run every architecture arm on one seed.
    Compare {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Understanding loss with every routed expert masked.
    Probe {
        ckpt: PathBuf,
        /// Data settings for the evaluation set.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the invariant suite.
    Check {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Also run a comparison with this config for the forgetting property.
        #[arg(long)]
        dynamics: Option<PathBuf>,
    },
    /// Plot one metric from one or more runs as SVG.
    Plot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        key: String,
        /// Moving-average window.
        #[arg(long, default_value_t = 1)]
        smooth: usize,
        #[arg(long)]
        title: Option<String>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn load_config(path: &Path, set: &[String]) -> Result<TrainConfig> {
    let mut c = TrainConfig::load(path)?;
    for kv in set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| symoe::Error::Usage(format!("--set expects KEY=VALUE, got {kv}")))?;
        c.set(k.trim(), v.trim())?;
    }
    Ok(c)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Profile { ckpt, config, out, set } => {
            let c = load_config(&config, &set)?;
            let model = Model::<f64>::load(&ckpt)?;
            let world = World::new(&c.data)?;
            let profile = profile_activations(&model, &profile_batches(&world, c.plan.profile_batches), model.config.top_k)?;
            let out = out.unwrap_or_else(|| out_root().join("profile.jsonl"));
            let mut w = create(&out)?;
            profile.write_jsonl(&mut w)?;
            w.flush()?;
            println!("{}", out.display());
        }
        Command::Partition {
            profile,
            n_und,
            strategy,
            normalize,
            global_partition,
            n_text,
            out,
        } => {
            let f = File::open(&profile).map_err(|e| symoe::Error::Usage(format!("{}: {e}", profile.display())))?;
            let p = ActivationProfile::read_jsonl(BufReader::new(f))?;
            let opts = PartitionOptions {
                n_und,
                strategy,
                normalize,
                global: global_partition,
                n_text,
            };
            let specs = symoe::disentangle::partition_experts(&p, &opts)?;
            let out = out.unwrap_or_else(|| out_root().join("partition.jsonl"));
            let mut w = create(&out)?;
            write_partitions(&mut w, &specs)?;
            w.flush()?;
            for (l, s) in specs.iter().enumerate() {
                println!("layer {l}: und {:?} gen {:?}", s.und_ids, s.gen_ids);
            }
        }
        Command::Train { config, set, out } => {
            let c = load_config(&config, &set)?;
            if let Some(p) = &c.partition {
                // Fail early on a malformed file.
                read_partitions(BufReader::new(File::open(p)?))?;
            }
            let dir = out.unwrap_or_else(|| out_root().join(&c.run_name));
            let model = prepare_model::<f64>(&c)?;
            let outcome = run_training(&c, model, &dir)?;
            if let Some(e) = outcome.records.iter().rev().find_map(|r| r.eval.as_ref()) {
                println!(
                    "final eval: und {:.4} t2i {:.4} capacity {:.4}",
                    e.und, e.t2i, e.capacity_rate
                );
            }
            println!("{}", dir.display());
        }
        Command::Pretrain { config, set, out } => {
            let c = load_config(&config, &set)?;
            let dir = out.unwrap_or_else(|| out_root().join("parent"));
            pretrain::<f64>(&c, &dir)?;
            println!("{}", dir.join("model.ckpt").display());
        }
        Command::Compare { config, set, out } => {
            let c = load_config(&config, &set)?;
            let dir = out.unwrap_or_else(|| out_root().join(format!("compare_seed{}", c.seed)));
            let rows = compare::<f64>(&c, &dir)?;
            print!("{}", summary_table(&rows));
            println!("{}", dir.display());
        }
        Command::Probe { ckpt, config, set } => {
            let c = match config {
                Some(p) => load_config(&p, &set)?,
                None => {
                    let mut c = TrainConfig::default();
                    for kv in &set {
                        let (k, v) = kv
                            .split_once('=')
                            .ok_or_else(|| symoe::Error::Usage(format!("--set expects KEY=VALUE, got {kv}")))?;
                        c.set(k.trim(), v.trim())?;
                    }
                    c
                }
            };
            let model = Model::<f64>::load(&ckpt)?;
            let eval = EvalSet::new(&World::new(&c.data)?, c.eval_batches);
            println!("shared-only understanding loss: {:.6}", probe_eval(&model, &eval)?);
        }
        Command::Check { seed, dynamics } => {
            let forgetting = match dynamics {
                Some(p) => {
                    let c = load_config(&p, &[])?;
                    let dir = out_root().join(format!("check_compare_seed{}", c.seed));
                    let rows = compare::<f64>(&c, &dir)?;
                    let und = |arm: &str| rows.iter().find(|r| r.arm == arm).map(|r| r.final_und);
                    und("standard").zip(und("symbiotic"))
                }
                None => None,
            };
            let out = run_checks(seed, forgetting);
            for o in &out {
                println!("{o}");
            }
            let failed = out.iter().filter(|o| o.status == Status::Fail).count();
            println!("{} passed, {failed} failed, {} skipped", out.iter().filter(|o| o.status == Status::Pass).count(), out.iter().filter(|o| o.status == Status::Skip).count());
            if failed > 0 {
                anyhow::bail!("{failed} invariant(s) failed");
            }
        }
        Command::Plot {
            metrics,
            key,
            smooth: window,
            title,
            out,
        } => {
            let mut runs = Vec::new();
            for path in &metrics {
                let (header, records) = read_metrics(path)?;
                let pts = series(&records, &key)?;
                runs.push((header.run, smooth(&pts, window)));
            }
            let svg = render_svg(title.as_deref().unwrap_or(&key), &key, &runs)?;
            let mut w = create(&out)?;
            w.write_all(svg.as_bytes())?;
            w.flush()?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<symoe::Error>().is_some_and(symoe::Error::is_usage);
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
