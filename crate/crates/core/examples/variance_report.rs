//! Intra- versus inter-class spread of the aggregated proposal features of a
//! box-pooling and a mask-guided model, on scenes where every object is
//! partly occluded.
//!
//! cargo run --release --example variance_report

use faim::config::RunConfig;
use faim::experiment;
use faim::pipeline::Aggregation;

fn main() -> faim::Result<()> {
    env_logger::init();
    let mut cfg = RunConfig::parse(include_str!("../../../configs/desk.conf"))?;
    cfg.apply_text("train_clips = 100\nval_clips = 20\npretrain_iters = 600\npretrain_warmup = 60\nfinetune_iters = 300\nfinetune_warmup = 30\n")?;
    let data = experiment::generate(&cfg)?;
    let occluded = experiment::occluded_val(&cfg)?;
    let dir = tempfile::tempdir()?;
    let base = experiment::pretrain(&cfg, &data.train, &dir.path().join("pretrain"))?;
    for agg in [Aggregation::Box, Aggregation::Mask] {
        let c = RunConfig { aggregation: agg, ..cfg.clone() };
        let (p, _) = experiment::finetune(&c, &base, &data.train, &dir.path().join(agg.to_string()))?;
        let v = experiment::variance(&c, &p, &occluded)?;
        println!("{agg:<4}: intra {:.4} inter {:.4} ratio {:.4}", v.intra, v.inter, v.ratio);
    }
    Ok(())
}
