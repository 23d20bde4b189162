//! Flat `key = value` run configuration with strict key checking.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::detector::Level;
use crate::error::{Error, Result};
use crate::maskhead::MaskLossKind;
use crate::pipeline::{Aggregation, ModelConfig};
use crate::synthdata::{ClipSpec, DatasetSpec, DegradationSpec, NUM_CLASSES};
use crate::ticam::ScoreMode;
use crate::train::{Phase, TrainConfig};

const FINETUNE_ONLY: [&str; 17] = [
    "k", "n_cap", "nms_train", "nms_infer", "m_train", "m_infer", "lambda", "heads", "c_prime", "roi_size", "fpn_level", "loss", "aggregation", "class_aware",
    "score_mode", "mask_hidden", "freeze_base",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub k: usize,
    pub n_cap: usize,
    pub nms_train: f64,
    pub nms_infer: f64,
    pub m_train: usize,
    pub m_infer: usize,
    pub lambda: f64,
    pub heads: usize,
    pub feature_dim: usize,
    /// `None` means equal to `feature_dim`.
    pub c_prime: Option<usize>,
    pub roi_size: usize,
    pub fpn_level: Level,
    pub loss: MaskLossKind,
    pub aggregation: Aggregation,
    pub class_aware: bool,
    pub score_mode: ScoreMode,
    pub mask_hidden: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub data_seed: u64,
    pub train_clips: usize,
    pub val_clips: usize,
    pub frames: usize,
    pub image_size: usize,
    pub max_objects: usize,
    pub occlusion_prob: f64,
    pub blur_prob: f64,
    pub defocus_strength: f64,
    pub max_speed: f64,
    pub pretrain_iters: usize,
    pub pretrain_lr: f64,
    pub pretrain_warmup: usize,
    pub batch_frames: usize,
    pub finetune_iters: usize,
    pub finetune_lr: f64,
    pub finetune_warmup: usize,
    pub batch_clips: usize,
    pub min_lr_ratio: f64,
    pub freeze_base: bool,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub ablate_key: String,
    /// Empty means `none,box,mask` when ablating aggregation.
    pub ablate_values: Vec<String>,
    pub bench_sizes: Vec<usize>,
    pub bench_repeats: usize,
    pub bench_warmup: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 750,
            n_cap: 30,
            nms_train: 0.75,
            nms_infer: 0.5,
            m_train: 16,
            m_infer: 32,
            lambda: 1.0,
            heads: 4,
            feature_dim: 64,
            c_prime: None,
            roi_size: 32,
            fpn_level: Level::P5,
            loss: MaskLossKind::Bce,
            aggregation: Aggregation::Mask,
            class_aware: true,
            score_mode: ScoreMode::Replace,
            mask_hidden: 16,
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            data_seed: 7,
            train_clips: 500,
            val_clips: 100,
            frames: 8,
            image_size: 64,
            max_objects: 3,
            occlusion_prob: 0.3,
            blur_prob: 0.3,
            defocus_strength: 0.5,
            max_speed: 12.0,
            pretrain_iters: 3000,
            pretrain_lr: 0.02,
            pretrain_warmup: 300,
            batch_frames: 8,
            finetune_iters: 2000,
            finetune_lr: 0.01,
            finetune_warmup: 200,
            batch_clips: 1,
            min_lr_ratio: 0.05,
            freeze_base: true,
            grad_clip: 10.0,
            checkpoint_every: 500,
            ablate_key: "aggregation".into(),
            ablate_values: Vec::new(),
            bench_sizes: vec![1, 2, 4, 8],
            bench_repeats: 5,
            bench_warmup: 3,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "k" => self.k = num(key, v)?,
            "n_cap" => self.n_cap = num(key, v)?,
            "nms_train" => self.nms_train = num(key, v)?,
            "nms_infer" => self.nms_infer = num(key, v)?,
            "m_train" => self.m_train = num(key, v)?,
            "m_infer" => self.m_infer = num(key, v)?,
            "lambda" => self.lambda = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "feature_dim" => self.feature_dim = num(key, v)?,
            "c_prime" => self.c_prime = if v == "C" { None } else { Some(num(key, v)?) },
            "roi_size" => self.roi_size = num(key, v)?,
            "fpn_level" => self.fpn_level = Level::parse(v).map_err(|e| Error::Config(e.to_string()))?,
            "loss" => {
                self.loss = match v {
                    "bce" => MaskLossKind::Bce,
                    "dice" => MaskLossKind::Dice,
                    _ => return Err(Error::Config(format!("loss must be bce|dice, got {v:?}"))),
                }
            }
            "aggregation" => self.aggregation = Aggregation::parse(v)?,
            "class_aware" => self.class_aware = boolean(key, v)?,
            "score_mode" => {
                self.score_mode = match v {
                    "replace" => ScoreMode::Replace,
                    "multiply" => ScoreMode::Multiply,
                    _ => return Err(Error::Config(format!("score_mode must be replace|multiply, got {v:?}"))),
                }
            }
            "mask_hidden" => self.mask_hidden = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "seeds" => self.seeds = list(v).map(|s| num(key, s)).collect::<Result<_>>()?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data_seed" => self.data_seed = num(key, v)?,
            "train_clips" => self.train_clips = num(key, v)?,
            "val_clips" => self.val_clips = num(key, v)?,
            "frames" => self.frames = num(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "max_objects" => self.max_objects = num(key, v)?,
            "occlusion_prob" => self.occlusion_prob = num(key, v)?,
            "blur_prob" => self.blur_prob = num(key, v)?,
            "defocus_strength" => self.defocus_strength = num(key, v)?,
            "max_speed" => self.max_speed = num(key, v)?,
            "pretrain_iters" => self.pretrain_iters = num(key, v)?,
            "pretrain_lr" => self.pretrain_lr = num(key, v)?,
            "pretrain_warmup" => self.pretrain_warmup = num(key, v)?,
            "batch_frames" => self.batch_frames = num(key, v)?,
            "finetune_iters" => self.finetune_iters = num(key, v)?,
            "finetune_lr" => self.finetune_lr = num(key, v)?,
            "finetune_warmup" => self.finetune_warmup = num(key, v)?,
            "batch_clips" => self.batch_clips = num(key, v)?,
            "min_lr_ratio" => self.min_lr_ratio = num(key, v)?,
            "freeze_base" => self.freeze_base = boolean(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "ablate_key" => self.ablate_key = v.to_owned(),
            "ablate_values" => self.ablate_values = list(v).map(str::to_owned).collect(),
            "bench_sizes" => self.bench_sizes = list(v).map(|s| num(key, s)).collect::<Result<_>>()?,
            "bench_repeats" => self.bench_repeats = num(key, v)?,
            "bench_warmup" => self.bench_warmup = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("k", self.k.to_string()),
            ("n_cap", self.n_cap.to_string()),
            ("nms_train", self.nms_train.to_string()),
            ("nms_infer", self.nms_infer.to_string()),
            ("m_train", self.m_train.to_string()),
            ("m_infer", self.m_infer.to_string()),
            ("lambda", self.lambda.to_string()),
            ("heads", self.heads.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("c_prime", self.c_prime.map_or("C".into(), |c| c.to_string())),
            ("roi_size", self.roi_size.to_string()),
            ("fpn_level", self.fpn_level.to_string()),
            ("loss", if self.loss == MaskLossKind::Bce { "bce" } else { "dice" }.into()),
            ("aggregation", self.aggregation.to_string()),
            ("class_aware", self.class_aware.to_string()),
            ("score_mode", if self.score_mode == ScoreMode::Replace { "replace" } else { "multiply" }.into()),
            ("mask_hidden", self.mask_hidden.to_string()),
            ("seed", self.seed.to_string()),
            ("seeds", seeds),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("train_clips", self.train_clips.to_string()),
            ("val_clips", self.val_clips.to_string()),
            ("frames", self.frames.to_string()),
            ("image_size", self.image_size.to_string()),
            ("max_objects", self.max_objects.to_string()),
            ("occlusion_prob", self.occlusion_prob.to_string()),
            ("blur_prob", self.blur_prob.to_string()),
            ("defocus_strength", self.defocus_strength.to_string()),
            ("max_speed", self.max_speed.to_string()),
            ("pretrain_iters", self.pretrain_iters.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("pretrain_warmup", self.pretrain_warmup.to_string()),
            ("batch_frames", self.batch_frames.to_string()),
            ("finetune_iters", self.finetune_iters.to_string()),
            ("finetune_lr", self.finetune_lr.to_string()),
            ("finetune_warmup", self.finetune_warmup.to_string()),
            ("batch_clips", self.batch_clips.to_string()),
            ("min_lr_ratio", self.min_lr_ratio.to_string()),
            ("freeze_base", self.freeze_base.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("ablate_key", self.ablate_key.clone()),
            ("ablate_values", self.ablate_values.join(",")),
            ("bench_sizes", self.bench_sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(",")),
            ("bench_repeats", self.bench_repeats.to_string()),
            ("bench_warmup", self.bench_warmup.to_string()),
        ]
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Defaults, then the optional file, then `key=value` overrides (with or
    /// without a leading `--`).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            c.apply_text(&text)?;
        }
        for o in overrides {
            let o = o.trim_start_matches("--");
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train_config(Phase::Pretrain).validate()?;
        self.train_config(Phase::Finetune).validate()?;
        self.dataset().clip.degradation.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of 32", self.image_size)));
        }
        if self.frames == 0 || self.max_objects == 0 {
            return Err(Error::Config("frames and max_objects must be positive".into()));
        }
        Ok(())
    }

    fn hash_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if keep(k) && !matches!(k, "seed" | "seeds" | "out_dir") && !k.starts_with("ablate_") && !k.starts_with("bench_") {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical text, excluding
    /// seeds, output location and command-specific keys.
    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }

    /// Like [`hash`](Self::hash) over the keys that affect the base detector only.
    pub fn pretrain_hash(&self) -> String {
        self.hash_where(|k| !FINETUNE_ONLY.contains(&k) && !k.starts_with("finetune_"))
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("{}-seed{seed}", self.hash()))
    }

    pub fn pretrain_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("pretrain-{}-seed{seed}", self.pretrain_hash()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            num_classes: NUM_CLASSES,
            feature_dim: self.feature_dim,
            c_prime: self.c_prime.unwrap_or(self.feature_dim),
            heads: self.heads,
            k: self.k,
            n_cap: self.n_cap,
            nms_train: self.nms_train,
            nms_infer: self.nms_infer,
            m_train: self.m_train,
            m_infer: self.m_infer,
            roi_size: self.roi_size,
            fpn_level: self.fpn_level,
            mask_hidden: self.mask_hidden,
            class_aware: self.class_aware,
            loss: self.loss,
            aggregation: self.aggregation,
            score_mode: self.score_mode,
        }
    }

    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        let (lr, warmup, total) = match phase {
            Phase::Pretrain => (self.pretrain_lr, self.pretrain_warmup, self.pretrain_iters),
            Phase::Finetune => (self.finetune_lr, self.finetune_warmup, self.finetune_iters),
        };
        TrainConfig {
            phase,
            base_lr: lr,
            min_lr: lr * self.min_lr_ratio,
            warmup_iters: warmup.min(total.saturating_sub(1)),
            total_iters: total,
            batch_clips: self.batch_clips,
            batch_frames: self.batch_frames,
            frames_per_clip: self.m_train,
            lambda: self.lambda,
            freeze_base: self.freeze_base,
            grad_clip: self.grad_clip,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
        }
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            clip: ClipSpec {
                num_frames: self.frames,
                height: self.image_size,
                width: self.image_size,
                degradation: DegradationSpec { blur_prob: self.blur_prob, occlusion_prob: self.occlusion_prob, defocus_strength: self.defocus_strength },
                max_speed: self.max_speed,
                ..ClipSpec::default()
            },
            max_objects: self.max_objects,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.k, c.n_cap, c.m_train, c.m_infer, c.heads, c.feature_dim, c.roi_size), (750, 30, 16, 32, 4, 64, 32));
        assert_eq!((c.nms_train, c.nms_infer, c.lambda), (0.75, 0.5, 1.0));
        assert_eq!((c.fpn_level, c.loss, c.aggregation), (Level::P5, MaskLossKind::Bce, Aggregation::Mask));
        assert_eq!(c.model().c_prime, 64);
        c.validate().unwrap();
    }

    #[test]
    fn parsing_and_rejection() {
        let c = RunConfig::parse("# desk\nfeature_dim = 32  # D\nheads=4\naggregation = box\nseeds = 1, 2\n").unwrap();
        assert_eq!((c.feature_dim, c.aggregation, c.seeds.clone()), (32, Aggregation::Box, vec![1, 2]));
        assert_eq!(c.model().c_prime, 32);
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("k 5").is_err());
        assert!(RunConfig::parse("loss = l2").is_err());
        assert!(RunConfig::parse("heads = 3").is_err());
        let o = RunConfig::load(None, &["--n_cap=10".into(), "fpn_level=P3".into()]).unwrap();
        assert_eq!((o.n_cap, o.fpn_level), (10, Level::P3));
        assert!(RunConfig::load(None, &["--nope=1".into()]).is_err());
    }

    #[test]
    fn text_round_trip_and_hash() {
        let mut c = RunConfig::default();
        c.set("c_prime", "16").unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.seed = 9;
        assert_eq!(d.hash(), c.hash());
        assert_ne!(d.run_dir(9), c.run_dir(0));
        d.set("n_cap", "12").unwrap();
        assert_ne!(d.hash(), c.hash());
        assert_eq!(d.pretrain_hash(), c.pretrain_hash());
        d.set("ablate_values", "box, mask").unwrap();
        assert_eq!(d.ablate_values, ["box", "mask"]);
        d.set("pretrain_iters", "7").unwrap();
        assert_ne!(d.pretrain_hash(), c.pretrain_hash());
    }
}
