//! Pretrains a small detector, then fine-tunes box- and mask-guided temporal
//! aggregation on top of it and compares the three.
//!
//! cargo run --release --example finetune_mask

use faim::config::RunConfig;
use faim::experiment;
use faim::pipeline::Aggregation;

fn main() -> faim::Result<()> {
    env_logger::init();
    let mut cfg = RunConfig::parse(include_str!("../../../configs/desk.conf"))?;
    cfg.apply_text("train_clips = 100\nval_clips = 20\npretrain_iters = 600\npretrain_warmup = 60\nfinetune_iters = 300\nfinetune_warmup = 30\n")?;
    let data = experiment::generate(&cfg)?;
    let dir = tempfile::tempdir()?;
    let base = experiment::pretrain(&cfg, &data.train, &dir.path().join("pretrain"))?;
    for agg in Aggregation::ALL {
        let c = RunConfig { aggregation: agg, ..cfg.clone() };
        let (p, log) = experiment::finetune(&c, &base, &data.train, &dir.path().join(agg.to_string()))?;
        let r = experiment::evaluate(&c, &p, &data.val)?;
        let last = log.last().map_or(String::new(), |l| format!(", final l_det {:.3} l_mask {:.3}", l.l_det, l.l_mask));
        println!("{agg:<5} map50 {:.4} map50_95 {:.4}{last}", r.map50, r.map50_95);
    }
    Ok(())
}
