//! Pretrains a small base detector and evaluates it frame by frame.
//!
//! cargo run --release --example train_detector

use faim::config::RunConfig;
use faim::experiment;

fn main() -> faim::Result<()> {
    env_logger::init();
    let mut cfg = RunConfig::parse(include_str!("../../../configs/desk.conf"))?;
    cfg.apply_text("train_clips = 100\nval_clips = 20\npretrain_iters = 600\npretrain_warmup = 60\naggregation = none\n")?;
    let data = experiment::generate(&cfg)?;
    let dir = tempfile::tempdir()?;
    let params = experiment::pretrain(&cfg, &data.train, dir.path())?;
    let r = experiment::evaluate(&cfg, &params, &data.val)?;
    println!("single-frame detector: map50 {:.4} map75 {:.4} map50_95 {:.4}", r.map50, r.map75, r.map50_95);
    println!("per motion bucket: {:?}", r.bucket_map50);
    Ok(())
}
