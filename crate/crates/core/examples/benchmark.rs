//! Counted multiply-accumulates and median wall-clock of the detector and of
//! temporal aggregation.
//!
//! cargo run --release --example benchmark

use faim::config::RunConfig;
use faim::experiment;

fn main() -> faim::Result<()> {
    let cfg = RunConfig::parse(include_str!("../../../configs/desk.conf"))?;
    let rows = experiment::bench(&cfg, &[5, 10, 20, 40], 5, 3)?;
    println!("stage,size,macs,median_ms");
    for r in rows {
        println!("{},{},{},{:.3}", r.stage, r.size, r.flops, r.median_ms);
    }
    Ok(())
}
