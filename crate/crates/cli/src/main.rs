//! Command-line entry point: data generation, pretraining, fine-tuning,
//! evaluation, parameter accounting, sweeps and gradient checking.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid invocation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use essen_core::config::{param_count_closed_form, ModelConfig, SweepAxis};
use essen_core::data::{generate_dataset, DataGenConfig, Split};
use essen_core::error::EssenError;
use essen_core::harness::{
    self, evaluate_state, eval_summary_json, grad_check_from_config, load_task, load_vocab,
    prepare_task, render_sweep_table, run_finetune, run_pretrain, run_sweep, write_loss_csv,
    write_metrics_csv, FinetuneRunConfig, PretrainRunConfig, TaskName,
};
use essen_core::model::VlModel;
use essen_core::presets::{preset, PRESET_NAMES};
use essen_core::pretrain::{load_checkpoint, save_checkpoint};

#[derive(Parser)]
#[command(name = "essen", about = "Compact vision-language modeling laboratory", version)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigSource {
    /// Model config JSON path
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset (see `essen preset`)
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigSource {
    fn resolve(&self) -> Result<ModelConfig, EssenError> {
        match (&self.config, &self.preset) {
            (Some(path), None) => ModelConfig::load(path)?.validated(),
            (None, Some(name)) => preset(name)
                .ok_or_else(|| {
                    EssenError::Incompatible(format!(
                        "unknown preset `{name}`; available: {}",
                        PRESET_NAMES.join(", ")
                    ))
                })?
                .validated(),
            _ => Err(EssenError::Incompatible(
                "exactly one of --config or --preset is required".into(),
            )),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate shape-world pretraining pairs and task splits
    GenData {
        /// Data generation config JSON (defaults baked in when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Pretrain with masked language modeling + image-text matching
    Pretrain {
        #[command(flatten)]
        model: ConfigSource,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Batch size
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Extra checkpoint every N steps
        #[arg(long, name = "eval-interval")]
        eval_interval: Option<usize>,
        /// Resume from a checkpoint (continues until --steps total steps)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint on a downstream task
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: TaskName,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Dev evaluation every N steps
        #[arg(long, name = "eval-interval", default_value_t = 200)]
        eval_interval: usize,
    },
    /// Evaluate a fine-tuned checkpoint on a split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: TaskName,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate (train|dev|test)
        #[arg(long, default_value = "test")]
        split: String,
        /// Where to write the JSON summary (printed to stdout regardless)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the parameter report (closed form, verified against enumeration)
    Params {
        #[command(flatten)]
        model: ConfigSource,
        /// Also write the report as JSON here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a grid of configs along one axis and tabulate dev accuracy
    Sweep {
        #[command(flatten)]
        model: ConfigSource,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values
        #[arg(long)]
        values: String,
        #[arg(long)]
        data: PathBuf,
        /// Pretraining steps per cell
        #[arg(long)]
        steps: usize,
        /// Fine-tuning steps per task per cell (default: steps / 2)
        #[arg(long, name = "ft-steps")]
        ft_steps: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Verify reverse-mode gradients against central differences
    GradCheck {
        #[command(flatten)]
        model: ConfigSource,
        #[arg(long)]
        seed: u64,
    },
    /// List presets, or dump one as config JSON
    Preset {
        #[arg(long)]
        name: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ESSEN_LOG", "info")).init();
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            eprintln!("error: could not size worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// Invalid invocation (bad config, unknown preset, incompatible inputs) is
/// exit 2; runtime failures are exit 1.
fn exit_code_for(err: &EssenError) -> u8 {
    match err {
        EssenError::InvalidConfig(_)
        | EssenError::Incompatible(_)
        | EssenError::GradCheckTooLarge { .. } => 2,
        _ => 1,
    }
}

fn parse_split(s: &str) -> Result<Split, EssenError> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(EssenError::Incompatible(format!(
            "unknown split `{other}` (train|dev|test)"
        ))),
    }
}

fn ensure_out_dir(path: &Path) -> Result<(), EssenError> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn run(command: Command) -> Result<ExitCode, EssenError> {
    match command {
        Command::GenData { config, out, seed } => {
            ensure_out_dir(&out)?;
            let cfg = match config {
                Some(path) => DataGenConfig::load(&path)?,
                None => DataGenConfig::default(),
            };
            let summary = generate_dataset(&cfg, seed, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Pretrain {
            model,
            data,
            steps,
            seed,
            out,
            batch,
            eval_interval,
            resume,
        } => {
            ensure_out_dir(&out)?;
            let run_cfg = PretrainRunConfig {
                steps,
                batch_size: batch,
                ckpt_interval: eval_interval,
                ..Default::default()
            };
            let rows = match resume {
                Some(ckpt_path) => {
                    let mut state = load_checkpoint(&ckpt_path)?;
                    let prepared = harness::prepare_pretrain_pairs(&state.model.cfg, &data)?;
                    harness::pretrain_loop(&mut state, &prepared, &run_cfg, steps, Some(&out))?
                }
                None => {
                    let mut cfg = model.resolve()?;
                    cfg.seed = seed;
                    let (state, rows) = run_pretrain(&cfg, &data, &run_cfg, seed, Some(&out))?;
                    save_checkpoint(&state, &out.join("ckpt-final.bin"))?;
                    rows
                }
            };
            write_loss_csv(&rows, &out.join("pretrain_log.csv"))?;
            let last = rows.last();
            println!(
                "pretrained {} steps; final total loss {}",
                rows.len(),
                last.map(|r| format!("{:.4}", r.total)).unwrap_or_else(|| "-".into())
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Finetune {
            ckpt,
            task,
            data,
            steps,
            seed,
            out,
            batch,
            eval_interval,
        } => {
            ensure_out_dir(&out)?;
            let state = load_checkpoint(&ckpt)?;
            let vocab = load_vocab(&data)?;
            let cfg = &state.model.cfg;
            let max_len = cfg.text.max_len;
            let image_size = cfg.vision.image_size();
            let train = prepare_task(&load_task(&data, task, Split::Train)?, &vocab, max_len, image_size)?;
            let dev = prepare_task(&load_task(&data, task, Split::Dev)?, &vocab, max_len, image_size)?;
            let run_cfg = FinetuneRunConfig {
                steps,
                batch_size: batch,
                eval_interval,
                ..Default::default()
            };
            let (ft_state, trace) = run_finetune(state, task, &train, &dev, &run_cfg, seed)?;
            save_checkpoint(&ft_state, &out.join(format!("ckpt-{}.bin", task.as_str())))?;
            write_metrics_csv(&trace, "dev", &out.join(format!("{}_metrics.csv", task.as_str())))?;
            let report = evaluate_state(&ft_state, &dev)?;
            let summary = eval_summary_json(task, Split::Dev, &report);
            std::fs::write(
                out.join(format!("{}_summary.json", task.as_str())),
                serde_json::to_string_pretty(&summary)?,
            )?;
            println!("{} dev accuracy {:.4}", task.as_str(), report.accuracy);
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            ckpt,
            task,
            data,
            split,
            out,
        } => {
            let split = parse_split(&split)?;
            let state = load_checkpoint(&ckpt)?;
            let vocab = load_vocab(&data)?;
            let cfg = &state.model.cfg;
            let eval_data = prepare_task(
                &load_task(&data, task, split)?,
                &vocab,
                cfg.text.max_len,
                cfg.vision.image_size(),
            )?;
            let report = evaluate_state(&state, &eval_data)?;
            let summary = eval_summary_json(task, split, &report);
            println!("accuracy {:.4}", report.accuracy);
            if let Some(chance) = report.mean_candidates.map(|k| 1.0 / k) {
                println!("chance {:.4} (1/mean candidates)", chance);
            }
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if let Some(out) = out {
                ensure_out_dir(&out)?;
                std::fs::write(
                    out.join(format!("{}_{}_summary.json", task.as_str(), split.as_str())),
                    serde_json::to_string_pretty(&summary)?,
                )?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Params { model, out } => {
            let cfg = model.resolve()?;
            let closed = param_count_closed_form(&cfg)?;
            let counted = VlModel::<f32>::new(cfg)?.param_report();
            if closed.per_module != counted.per_module {
                return Err(EssenError::Incompatible(
                    "closed-form and enumeration reports disagree".into(),
                ));
            }
            print!("{}", closed.render_table());
            if let Some(out) = out {
                ensure_out_dir(&out)?;
                std::fs::write(
                    out.join("params.json"),
                    serde_json::to_string_pretty(&closed)?,
                )?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            model,
            axis,
            values,
            data,
            steps,
            ft_steps,
            seed,
            out,
            batch,
        } => {
            ensure_out_dir(&out)?;
            let base = model.resolve()?;
            let values: Vec<String> = values
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            let pre = PretrainRunConfig {
                steps,
                batch_size: batch,
                ..Default::default()
            };
            let ft = FinetuneRunConfig {
                steps: ft_steps.unwrap_or(steps / 2),
                batch_size: batch.min(8),
                eval_interval: usize::MAX, // final eval only
                ..Default::default()
            };
            let cells = run_sweep(&base, axis, &values, &data, &pre, &ft, seed)?;
            let table = render_sweep_table(axis, &cells);
            print!("{table}");
            std::fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&cells)?)?;
            std::fs::write(out.join("sweep.txt"), table)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::GradCheck { model, seed } => {
            let cfg = model.resolve()?;
            let report = grad_check_from_config(&cfg, seed, 200, 1e-5)?;
            let pass = report.max_rel_err < 1e-4;
            println!(
                "grad check: {} parameters, 200 samples, max relative error {:.3e} -> {}",
                report.total_params,
                report.max_rel_err,
                if pass { "PASS" } else { "FAIL" }
            );
            Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Preset { name } => {
            match name {
                Some(name) => {
                    let cfg = preset(&name).ok_or_else(|| {
                        EssenError::Incompatible(format!(
                            "unknown preset `{name}`; available: {}",
                            PRESET_NAMES.join(", ")
                        ))
                    })?;
                    println!("{}", cfg.to_json());
                }
                None => {
                    for name in PRESET_NAMES {
                        println!("{name}");
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
