//! End-to-end drivers: data, pretraining, fine-tuning, evaluation, ablations
//! and benchmarks. The command line and the acceptance tests both go through
//! these.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::detector::{backbone_heads, load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::eval::{self, BenchRow, EvalReport, VarianceReport};
use crate::numerics::{Graph, Parameters, Tensor};
use crate::pipeline::{self, Aggregation};
use crate::synthdata::{generate_split, read_dataset, write_dataset, VideoClip, NUM_CLASSES};
use crate::ticam::{self, FrameRows};
use crate::train::{fit, LogRow, Phase};

pub struct Splits {
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
}

/// Train split from `data_seed`, validation from `data_seed + 1`.
pub fn generate(cfg: &RunConfig) -> Result<Splits> {
    let spec = cfg.dataset();
    Ok(Splits { train: generate_split(&spec, cfg.train_clips, cfg.data_seed)?, val: generate_split(&spec, cfg.val_clips, cfg.data_seed + 1)? })
}

/// Reads `data_dir` when it holds a dataset, otherwise generates in memory.
pub fn load_or_generate(cfg: &RunConfig) -> Result<Splits> {
    if !cfg.data_dir.join("manifest.json").exists() {
        return generate(cfg);
    }
    let mut sets = read_dataset(&cfg.data_dir)?;
    let mut take = |name: &str| sets.remove(name).ok_or_else(|| Error::InvalidArgument(format!("dataset in {} has no {name} split", cfg.data_dir.display())));
    Ok(Splits { train: take("train")?, val: take("val")? })
}

pub fn write_splits(dir: &Path, s: &Splits) -> Result<()> {
    write_dataset(dir, &[("train", &s.train), ("val", &s.val)])
}

/// Validation-sized split where every object is partly occluded.
pub fn occluded_val(cfg: &RunConfig) -> Result<Vec<VideoClip>> {
    let mut spec = cfg.dataset();
    spec.clip.degradation.occlusion_prob = 1.0;
    generate_split(&spec, cfg.val_clips, cfg.data_seed + 2)
}

fn model_dir(dir: &Path) -> std::path::PathBuf {
    dir.join("model")
}

/// Base detector for `cfg.seed`, trained into `dir` or loaded if `dir`
/// already holds the finished model.
pub fn pretrain(cfg: &RunConfig, train: &[VideoClip], dir: &Path) -> Result<Parameters> {
    if model_dir(dir).join("index.json").exists() {
        return load_checkpoint(&model_dir(dir));
    }
    let mut model = cfg.model();
    model.aggregation = Aggregation::None;
    let p = pipeline::init_model(&model, cfg.seed)?;
    let (p, _) = fit(train, p, &model, &cfg.train_config(Phase::Pretrain), dir)?;
    save_checkpoint(&model_dir(dir), &p)?;
    Ok(p)
}

/// Adds fresh new modules for `cfg.aggregation` to `base` and fine-tunes.
pub fn finetune(cfg: &RunConfig, base: &Parameters, train: &[VideoClip], dir: &Path) -> Result<(Parameters, Vec<LogRow>)> {
    let model = cfg.model();
    let mut p = base.clone();
    pipeline::add_new_modules(&mut p, &model)?;
    if cfg.aggregation == Aggregation::None {
        return Ok((p, Vec::new()));
    }
    let (p, rows) = fit(train, p, &model, &cfg.train_config(Phase::Finetune), dir)?;
    save_checkpoint(&model_dir(dir), &p)?;
    Ok((p, rows))
}

pub fn evaluate(cfg: &RunConfig, params: &Parameters, val: &[VideoClip]) -> Result<EvalReport> {
    let (dets, gts) = pipeline::collect_detections(params, &cfg.model(), val)?;
    eval::map_at(&dets, &gts, NUM_CLASSES)
}

/// Spread of the aggregated proposal features of a fine-tuned model, grouped
/// by the class of the object each proposal covers.
pub fn variance(cfg: &RunConfig, params: &Parameters, clips: &[VideoClip]) -> Result<VarianceReport> {
    let groups = pipeline::proposal_features(params, &cfg.model(), clips)?;
    eval::feature_variance_report(&groups.into_iter().filter(|c| c.len() >= 2).collect::<Vec<_>>())
}

pub const ABLATION_KEYS: [&str; 7] = ["aggregation", "loss", "class_aware", "roi_size", "fpn_level", "n_cap", "m_train"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub seed: u64,
    pub map50: f64,
    pub map75: f64,
    pub map50_95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub seed: u64,
    pub pooling: String,
    pub report: VarianceReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub key: String,
    pub rows: Vec<AblationRow>,
    pub variance: Vec<VarianceRow>,
}

impl Ablation {
    pub fn map50(&self, value: &str, seed: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.value == value && r.seed == seed).map(|r| r.map50)
    }

    pub fn ratio(&self, pooling: &str, seed: u64) -> Option<f64> {
        self.variance.iter().find(|r| r.pooling == pooling && r.seed == seed).map(|r| r.report.ratio)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    }

    /// One row per value with the mean over seeds, then per-seed columns.
    pub fn table(&self) -> String {
        let seeds = self.seeds();
        let mut values: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !values.contains(&r.value.as_str()) {
                values.push(&r.value);
            }
        }
        let mut s = format!("{:<12} {:>8} {:>8} {:>9}", self.key, "map50", "map75", "map50_95");
        for seed in &seeds {
            let _ = write!(s, " {:>8}", format!("s{seed}"));
        }
        s.push('\n');
        for v in values {
            let rs: Vec<&AblationRow> = self.rows.iter().filter(|r| r.value == v).collect();
            let mean = |f: fn(&AblationRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
            let _ = write!(s, "{v:<12} {:>8.4} {:>8.4} {:>9.4}", mean(|r| r.map50), mean(|r| r.map75), mean(|r| r.map50_95));
            for seed in &seeds {
                let _ = write!(s, " {:>8.4}", self.map50(v, *seed).unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut csv = format!("{},seed,map50,map75,map50_95\n", self.key);
        for r in &self.rows {
            let _ = writeln!(csv, "{},{},{:.6},{:.6},{:.6}", r.value, r.seed, r.map50, r.map75, r.map50_95);
        }
        fs::write(dir.join("ablation.csv"), csv)?;
        fs::write(dir.join("ablation.txt"), self.table())?;
        if self.key == "aggregation" {
            let mut v = String::from("seed,pooling,intra,inter,ratio\n");
            for r in &self.variance {
                let _ = writeln!(v, "{},{},{:.6},{:.6},{:.6}", r.seed, r.pooling, r.report.intra, r.report.inter, r.report.ratio);
            }
            fs::write(dir.join("variance.csv"), v)?;
        }
        Ok(())
    }
}

/// For every seed: one shared pretrained detector, then a fine-tune and an
/// evaluation per value of `key`. Varying `aggregation` also records the
/// variance report of each aggregating model on an occluded validation split.
pub fn ablate(cfg: &RunConfig, key: &str, values: &[String], data: &Splits, out: &Path) -> Result<Ablation> {
    if !ABLATION_KEYS.contains(&key) {
        return Err(Error::Config(format!("cannot ablate {key:?}; choose one of {ABLATION_KEYS:?}")));
    }
    let mut variants = Vec::with_capacity(values.len());
    for v in values {
        let mut c = cfg.clone();
        c.set(key, v)?;
        c.validate()?;
        variants.push(c);
    }
    let occluded = if key == "aggregation" { Some(occluded_val(cfg)?) } else { None };
    let mut res = Ablation { key: key.to_owned(), ..Ablation::default() };
    for &seed in &cfg.seeds {
        let sdir = out.join(format!("seed{seed}"));
        let mut base_cfg = cfg.clone();
        base_cfg.seed = seed;
        log::info!("seed {seed}: pretraining");
        let base = pretrain(&base_cfg, &data.train, &sdir.join("pretrain"))?;
        for (v, c) in values.iter().zip(&variants) {
            let mut c = c.clone();
            c.seed = seed;
            let dir = sdir.join(format!("{key}={v}"));
            log::info!("seed {seed}: {key}={v}");
            let (p, _) = finetune(&c, &base, &data.train, &dir)?;
            let r = evaluate(&c, &p, &data.val)?;
            fs::create_dir_all(&dir)?;
            eval::write_report(&dir.join("report.json"), &r)?;
            if let (Some(occ), true) = (&occluded, c.aggregation != Aggregation::None) {
                match variance(&c, &p, occ) {
                    Ok(report) => res.variance.push(VarianceRow { seed, pooling: v.clone(), report }),
                    Err(e) => log::warn!("seed {seed} {key}={v}: no variance report: {e}"),
                }
            }
            res.rows.push(AblationRow { value: v.clone(), seed, map50: r.map50, map75: r.map75, map50_95: r.map50_95 });
        }
    }
    res.write(out)?;
    Ok(res)
}

/// Wall-clock and counted MACs of the detector forward pass over `sizes`
/// frames and of TICAM aggregation over `sizes` proposals per frame.
pub fn bench(cfg: &RunConfig, sizes: &[usize], repeats: usize, warmup: usize) -> Result<Vec<BenchRow>> {
    let model = cfg.model();
    let params = pipeline::init_model(&model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hw = cfg.image_size;
    let mut rows = eval::benchmark("detector", sizes, repeats, warmup, |n| {
        let x = Tensor::from_fn(&[n, 3, hw, hw], |_| rng.gen_range(0.0..1.0));
        let mut g = Graph::new();
        let b = params.bind(&mut g, |_| false);
        let x = g.constant(x);
        backbone_heads(&mut g, &b, x).expect("detector forward");
    })?;
    let m = cfg.m_train;
    let mut tp = Parameters::new(cfg.seed);
    ticam::init_params(&mut tp, &model.ticam())?;
    let (dc, di) = (model.feature_dim, if model.aggregation == Aggregation::Mask { model.c_prime } else { model.feature_dim });
    rows.extend(eval::benchmark("ticam", sizes, repeats, warmup, |n| {
        let mut g = Graph::new();
        let b = tp.bind(&mut g, |_| false);
        let frames: Vec<FrameRows> = (0..m)
            .map(|i| FrameRows {
                frame_index: i,
                cls: g.constant(Tensor::from_fn(&[n, dc], |_| rng.gen_range(-1.0..1.0))),
                ins: g.constant(Tensor::from_fn(&[n, di], |_| rng.gen_range(-1.0..1.0))),
            })
            .collect();
        let bank = ticam::build_queries(&mut g, &b, &frames).expect("queries");
        ticam::aggregate(&mut g, &b, &bank, model.heads).expect("aggregate");
    })?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run() -> RunConfig {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("feature_dim", "8"),
            ("fpn_level", "P3"),
            ("roi_size", "4"),
            ("m_train", "3"),
            ("m_infer", "4"),
            ("n_cap", "4"),
            ("k", "50"),
            ("heads", "2"),
            ("mask_hidden", "4"),
            ("train_clips", "2"),
            ("val_clips", "2"),
            ("frames", "4"),
            ("pretrain_iters", "3"),
            ("pretrain_warmup", "1"),
            ("finetune_iters", "2"),
            ("finetune_warmup", "1"),
            ("batch_frames", "2"),
            ("seeds", "0"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    #[test]
    fn ablation_emits_one_row_per_value_and_seed() {
        let cfg = tiny_run();
        let data = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<String> = ["none", "box", "mask"].iter().map(|s| s.to_string()).collect();
        let a = ablate(&cfg, "aggregation", &vals, &data, dir.path()).unwrap();
        assert_eq!(a.rows.len(), 3);
        assert_eq!(a.table().lines().count(), 4);
        assert!(a.variance.len() <= 2);
        assert!(dir.path().join("variance.csv").exists());
        assert!(dir.path().join("seed0/aggregation=mask/report.json").exists());
        assert!(ablate(&cfg, "heads", &vals, &data, dir.path()).is_err());
    }

    #[test]
    fn none_rows_match_the_pretrained_detector() {
        let cfg = tiny_run();
        let data = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = pretrain(&cfg, &data.train, dir.path()).unwrap();
        let mut c = cfg.clone();
        c.aggregation = Aggregation::None;
        let (p, rows) = finetune(&c, &base, &data.train, dir.path()).unwrap();
        assert!(rows.is_empty());
        assert_eq!(evaluate(&c, &p, &data.val).unwrap(), evaluate(&c, &base, &data.val).unwrap());
        assert!(load_checkpoint(&dir.path().join("model")).unwrap().names().eq(base.names()));
    }

    #[test]
    fn bench_counts_are_value_independent() {
        let cfg = tiny_run();
        let a = bench(&cfg, &[1, 2], 1, 3).unwrap();
        let b = bench(&RunConfig { seed: 5, ..cfg }, &[1, 2], 1, 3).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.flops, &x.stage), (y.flops, &y.stage));
        }
    }
}
