use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sadlr::ablate::{parse_values, Axis, RunCache, DEFAULT_SEEDS};
use sadlr::checkpoint::load_checkpoint;
use sadlr::config::{parse_list, RunConfig};
use sadlr::harness::{
    cmd_ablate, cmd_bench, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train, write_report,
};
use sadlr::metrics::CSV_COLUMNS;
use sadlr::{BackwardFault, Model, Result};

#[derive(Parser)]
#[command(
    name = "sadlr",
    version,
    about = "Iterative dynamic-kernel referring segmentation on synthetic shapes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (gen-data) or directory (everything else)
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a RefShapes dataset file
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2500)]
        count: usize,
    },
    /// Train a model and write checkpoint, report and metrics
    Train {
        #[command(flatten)]
        common: Common,
        /// Training set (overrides train_data)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation set (overrides val_data)
        #[arg(long)]
        val: Option<PathBuf>,
        /// Iteration count; also selects the matching loss-weight preset
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write every iteration's mask as PGM under <out>/masks
        #[arg(long)]
        dump_masks: bool,
    },
    /// Seed-averaged comparison along one config axis
    Ablate {
        #[command(flatten)]
        common: Common,
        /// iterations, structure or update
        #[arg(long)]
        axis: Axis,
        /// e.g. 0,1,2,3 or "[8],[32],[8,32]" or sum,replace
        #[arg(long)]
        values: String,
        /// Comma-separated seeds
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Finite-difference audit of every parameter group
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Comma-separated iteration counts
        #[arg(long, default_value = "1,3")]
        iterations: String,
        /// Corrupt one backward rule: layer-norm-affine, conv-weight, embedding-scatter
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// FLOP counts and forward latency
    Bench {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to time; a fresh model from --config otherwise
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        reps: usize,
    },
}

fn fmt_row(label: &str, row: &[f64; 7]) -> String {
    let cells: Vec<String> = row.iter().map(|v| format!("{v:>9.4}")).collect();
    format!("{label:>10} {}", cells.join(" "))
}

fn header(key: &str) -> String {
    let cells: Vec<String> = CSV_COLUMNS.iter().map(|c| format!("{c:>9}")).collect();
    format!("{key:>10} {}", cells.join(" "))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common, count } => {
            let out = common
                .out
                .ok_or_else(|| sadlr::Error::Config("gen-data needs --out <file>".into()))?;
            let n = cmd_gen_data(count, common.seed.unwrap_or(0), &out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Train {
            common,
            data,
            val,
            iterations,
            epochs,
        } => {
            let mut cfg = common.run_config()?;
            if let Some(n) = iterations {
                cfg = cfg.with_iterations(n);
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if data.is_some() {
                cfg.train_data = data;
            }
            if val.is_some() {
                cfg.val_data = val;
            }
            let out = cmd_train(&cfg, |e, l| eprintln!("epoch {:>3}  loss {l:.6}", e + 1))?;
            println!("final loss {:.6}", out.report.final_loss);
            if let Some(eval) = &out.evaluation {
                println!("{}", header("iteration"));
                for (l, r) in eval.labels.iter().zip(&eval.per_iteration) {
                    println!("{}", fmt_row(l, &r.row()));
                }
            }
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Eval {
            common,
            ckpt,
            data,
            dump_masks,
        } => {
            let expected = match &common.config {
                Some(p) => Some(RunConfig::load(p)?.model),
                None => None,
            };
            let (eval, _) = cmd_eval(
                &ckpt,
                &data,
                expected.as_ref(),
                common.out.as_deref(),
                dump_masks,
            )?;
            println!("{}", header("iteration"));
            for (l, r) in eval.labels.iter().zip(&eval.per_iteration) {
                println!("{}", fmt_row(l, &r.row()));
            }
        }
        Command::Ablate {
            common,
            axis,
            values,
            seeds,
            data,
            val,
        } => {
            let mut cfg = common.run_config()?;
            if data.is_some() {
                cfg.train_data = data;
            }
            if val.is_some() {
                cfg.val_data = val;
            }
            let values = parse_values(axis, &values)?;
            let seeds = match seeds {
                Some(s) => parse_list(&s)?,
                None => DEFAULT_SEEDS.to_vec(),
            };
            let mut cache = RunCache::new();
            let table = cmd_ablate(&cfg, axis, &values, &seeds, &mut cache, |v, s, r| {
                eprintln!("{axis}={v} seed={s} miou={:.4}", r.mean_iou)
            })?;
            println!("{}", header(&axis.to_string()));
            for r in &table.rows {
                println!("{}", fmt_row(&r.value, &r.mean));
                println!("{}", fmt_row("± sd", &r.stdev));
            }
            println!(
                "wrote {}",
                cfg.out_dir.join(format!("ablation_{axis}.csv")).display()
            );
        }
        Command::Gradcheck {
            common,
            iterations,
            corrupt,
        } => {
            let fault = match corrupt.as_deref() {
                None => None,
                Some(s) => Some(BackwardFault::parse(s).ok_or_else(|| {
                    sadlr::Error::Config(format!("unknown backward fault {s:?}"))
                })?),
            };
            let iters: Vec<usize> = parse_list(&iterations)?;
            let reports = cmd_gradcheck(common.seed.unwrap_or(0), &iters, fault)?;
            let mut ok = true;
            for r in &reports {
                println!("n={} seed={}", r.iterations, r.seed);
                for g in &r.groups {
                    let mark = if g.max_rel_err <= r.tolerance {
                        "ok  "
                    } else {
                        "FAIL"
                    };
                    println!(
                        "  {mark} {:<28} {:.3e}  ({} coords)",
                        g.name, g.max_rel_err, g.coords
                    );
                }
                ok &= r.passed();
            }
            if let Some(dir) = &common.out {
                write_report(dir, &reports)?;
            }
            println!(
                "{}",
                if ok {
                    "gradcheck passed"
                } else {
                    "gradcheck FAILED"
                }
            );
            return Ok(ok);
        }
        Command::Bench { common, ckpt, reps } => {
            let model = match &ckpt {
                Some(p) => load_checkpoint(p)?,
                None => Model::init(&common.run_config()?.model, common.seed.unwrap_or(0))?,
            };
            let r = cmd_bench(&model, reps, common.seed.unwrap_or(0))?;
            println!("encoder MACs  {:>12}", r.flops.encoder_total);
            println!("head MACs     {:>12}", r.flops.head_total);
            println!("head overhead {:>11.2}%", r.flops.overhead_pct);
            println!(
                "latency over {} reps: encoder {:.3} ms, total {:.3} ms, head {:.3} ms",
                r.latency.reps, r.latency.encoder_ms, r.latency.total_ms, r.latency.head_ms
            );
            if let Some(dir) = &common.out {
                write_report(dir, &r)?;
            }
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
            ExitCode::from(2)
        }
    }
}
