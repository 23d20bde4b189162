//! Generates a small synthetic dataset, writes it to disk and reads it back.
//!
//! cargo run --release --example generate_data -- [out_dir]

use faim::config::RunConfig;
use faim::experiment;
use faim::synthdata::{class_name, MotionSpeed};

fn main() -> faim::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("faim-data").display().to_string());
    let cfg = RunConfig::load(None, &["train_clips=20".into(), "val_clips=5".into(), format!("data_dir={dir}")])?;
    let splits = experiment::generate(&cfg)?;
    experiment::write_splits(&cfg.data_dir, &splits)?;
    let back = experiment::load_or_generate(&cfg)?;
    let objects: usize = back.train.iter().flat_map(|c| &c.annotations).map(Vec::len).sum();
    let blurred: usize = back.train.iter().flat_map(|c| &c.blurred).filter(|&&b| b).count();
    println!("{dir}: {} train clips, {} val clips, {objects} train objects, {blurred} blurred frames", back.train.len(), back.val.len());
    let clip = &back.train[0];
    for (track, speed) in clip.track_buckets() {
        let a = clip.annotations[0].iter().find(|a| a.track_id == track);
        let name = a.map_or("?".into(), |a| class_name(a.class_id));
        let tag = match speed {
            MotionSpeed::Slow => "slow",
            MotionSpeed::Medium => "medium",
            MotionSpeed::Fast => "fast",
        };
        println!("clip 0 track {track}: {name}, {tag}");
    }
    Ok(())
}
