//! Command-line entry point. Exit codes: 0 success, 1 runtime failure,
//! 2 bad arguments or configuration.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::detector::load_checkpoint;
use crate::error::{Error, Result};
use crate::eval;
use crate::experiment::{self, Splits};
use crate::numerics::Parameters;
use crate::pipeline::Aggregation;
use crate::verify;

#[derive(Parser, Debug)]
#[command(name = "faim", about = "Mask-guided temporal aggregation for video object detection on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `key=value` or `--key=value` overrides applied after the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the train and val splits to `data_dir`.
    Generate(Common),
    /// Train the base detector for `seed`.
    Pretrain(Common),
    /// Fine-tune the new modules for `aggregation` on top of the base detector.
    Finetune(Common),
    /// Evaluate on the val split and write report.json.
    Eval(Common),
    /// Vary `ablate_key` over `ablate_values` for every seed in `seeds`.
    Ablate(Common),
    /// Time the detector and TICAM over `bench_sizes`; writes bench.csv.
    Bench(Common),
    /// Run the gradient, oracle and invariant checks.
    Verify,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e @ Error::Config(_)) => {
            eprintln!("{e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load(c: &Common) -> Result<RunConfig> {
    RunConfig::load(c.config.as_deref(), &c.overrides)
}

fn save_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn base(cfg: &RunConfig, data: &Splits) -> Result<Parameters> {
    let dir = cfg.pretrain_dir(cfg.seed);
    save_config(&dir, cfg)?;
    experiment::pretrain(cfg, &data.train, &dir)
}

fn trained(cfg: &RunConfig) -> Result<Parameters> {
    let dir = if cfg.aggregation == Aggregation::None { cfg.pretrain_dir(cfg.seed) } else { cfg.run_dir(cfg.seed) };
    let model = dir.join("model");
    if !model.join("index.json").exists() {
        let step = if cfg.aggregation == Aggregation::None { "pretrain" } else { "finetune" };
        return Err(Error::InvalidArgument(format!("no trained model in {}; run `{step}` with the same config first", dir.display())));
    }
    load_checkpoint(&model)
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Generate(c) => {
            let cfg = load(&c)?;
            experiment::write_splits(&cfg.data_dir, &experiment::generate(&cfg)?)?;
            println!("wrote {}", cfg.data_dir.display());
        }
        Command::Pretrain(c) => {
            let cfg = load(&c)?;
            base(&cfg, &experiment::load_or_generate(&cfg)?)?;
            println!("{}", cfg.pretrain_dir(cfg.seed).display());
        }
        Command::Finetune(c) => {
            let cfg = load(&c)?;
            if cfg.aggregation == Aggregation::None {
                return Err(Error::Config("aggregation=none has nothing to fine-tune".into()));
            }
            let data = experiment::load_or_generate(&cfg)?;
            let p = base(&cfg, &data)?;
            let dir = cfg.run_dir(cfg.seed);
            save_config(&dir, &cfg)?;
            let (_, rows) = experiment::finetune(&cfg, &p, &data.train, &dir)?;
            if let Some(r) = rows.last() {
                println!("{} l_det {:.4} l_mask {:.4}", dir.display(), r.l_det, r.l_mask);
            }
        }
        Command::Eval(c) => {
            let cfg = load(&c)?;
            let p = trained(&cfg)?;
            let data = experiment::load_or_generate(&cfg)?;
            let r = experiment::evaluate(&cfg, &p, &data.val)?;
            let dir = cfg.run_dir(cfg.seed);
            save_config(&dir, &cfg)?;
            eval::write_report(&dir.join("report.json"), &r)?;
            println!("map50 {:.4} map75 {:.4} map50_95 {:.4} buckets {:?}", r.map50, r.map75, r.map50_95, r.bucket_map50);
        }
        Command::Ablate(c) => {
            let cfg = load(&c)?;
            let values = if cfg.ablate_values.is_empty() {
                if cfg.ablate_key != "aggregation" {
                    return Err(Error::Config(format!("ablate_values is required for ablate_key={}", cfg.ablate_key)));
                }
                Aggregation::ALL.iter().map(|a| a.to_string()).collect()
            } else {
                cfg.ablate_values.clone()
            };
            let data = experiment::load_or_generate(&cfg)?;
            let out = cfg.out_dir.join(format!("ablate-{}-{}", cfg.ablate_key, cfg.hash()));
            save_config(&out, &cfg)?;
            let a = experiment::ablate(&cfg, &cfg.ablate_key, &values, &data, &out)?;
            print!("{}", a.table());
            for r in &a.variance {
                println!("seed {} {} pooling: intra {:.4} inter {:.4} ratio {:.4}", r.seed, r.pooling, r.report.intra, r.report.inter, r.report.ratio);
            }
            println!("{}", out.display());
        }
        Command::Bench(c) => {
            let cfg = load(&c)?;
            let rows = experiment::bench(&cfg, &cfg.bench_sizes, cfg.bench_repeats, cfg.bench_warmup)?;
            fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join("bench.csv");
            eval::write_bench_csv(&path, &rows)?;
            for r in &rows {
                println!("{:<9} size {:>3} MACs {:>12} median {:.3} ms", r.stage, r.size, r.flops, r.median_ms);
            }
            println!("{}", path.display());
        }
        Command::Verify => {
            let checks = verify::run_all()?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_exit_2() {
        assert_eq!(run(["faim", "generate", "--bogus=1"]), 2);
        assert_eq!(run(["faim", "eval", "heads=3"]), 2);
        assert_eq!(run(["faim", "nope"]), 2);
        assert_eq!(run(["faim", "finetune", "aggregation=none"]), 2);
    }

    #[test]
    fn missing_model_is_a_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run(["faim".to_string(), "eval".into(), format!("out_dir={}", dir.path().display())]), 1);
    }

    #[test]
    fn generate_writes_a_readable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("data");
        let args = ["faim".to_string(), "generate".into(), "train_clips=2".into(), "val_clips=1".into(), "frames=3".into(), format!("--data_dir={}", d.display())];
        assert_eq!(run(args), 0);
        let cfg = RunConfig::load(None, &["train_clips=2".into(), "val_clips=1".into(), "frames=3".into(), format!("data_dir={}", d.display())]).unwrap();
        let s = experiment::load_or_generate(&cfg).unwrap();
        let g = experiment::generate(&cfg).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (2, 1));
        assert_eq!(s.train[0].annotations, g.train[0].annotations);
    }
}
