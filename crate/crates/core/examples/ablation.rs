//! A two-seed ablation over one key on a reduced budget; prints the table.
//!
//! cargo run --release --example ablation -- [key] [comma-separated values]

use faim::config::RunConfig;
use faim::experiment;

fn main() -> faim::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let key = args.next().unwrap_or_else(|| "aggregation".into());
    let values: Vec<String> = args.next().unwrap_or_else(|| "none,box,mask".into()).split(',').map(str::to_owned).collect();
    let mut cfg = RunConfig::parse(include_str!("../../../configs/desk.conf"))?;
    cfg.apply_text("seeds = 0,1\ntrain_clips = 60\nval_clips = 20\npretrain_iters = 400\npretrain_warmup = 40\nfinetune_iters = 200\nfinetune_warmup = 20\n")?;
    let data = experiment::generate(&cfg)?;
    let dir = tempfile::tempdir()?;
    let a = experiment::ablate(&cfg, &key, &values, &data, dir.path())?;
    print!("{}", a.table());
    for r in &a.variance {
        println!("seed {} {:<4} pooling: intra/inter {:.4}", r.seed, r.pooling, r.report.ratio);
    }
    Ok(())
}
