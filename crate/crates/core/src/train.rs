//! Training driver: warm-up + cosine schedule, SGD with momentum, detector
//! pretraining and fine-tuning of the new modules, CSV logging and
//! resumable checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{self, load_checkpoint, save_checkpoint, GtObject};
use crate::error::{Error, Result};
use crate::maskhead::{total_loss, LossBreakdown};
use crate::numerics::{Graph, Parameters, Tensor};
use crate::pipeline::{finetune_graph, frames_tensor, pretrain_loss, ModelConfig};
use crate::synthdata::VideoClip;

pub const MOMENTUM: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Base detector on single frames.
    Pretrain,
    /// New modules on sampled clip frames.
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    /// Clips per fine-tuning step.
    pub batch_clips: usize,
    /// Frames per pretraining step.
    pub batch_frames: usize,
    /// Frames sampled per clip when fine-tuning.
    pub frames_per_clip: usize,
    pub lambda: f64,
    pub freeze_base: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Finetune,
            base_lr: 0.01,
            min_lr: 0.0,
            warmup_iters: 0,
            total_iters: 100,
            batch_clips: 1,
            batch_frames: 8,
            frames_per_clip: 16,
            lambda: 1.0,
            freeze_base: true,
            grad_clip: 10.0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters > 0 && self.warmup_iters >= self.total_iters {
            return Err(Error::Config(format!("warmup_iters {} must be below total_iters {}", self.warmup_iters, self.total_iters)));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Config(format!("need 0 <= min_lr <= base_lr, got {} and {}", self.min_lr, self.base_lr)));
        }
        if self.batch_clips == 0 || self.batch_frames == 0 || self.frames_per_clip == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("lambda and grad_clip must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Whether `name` is updated in this phase.
    pub fn trainable(&self, name: &str) -> bool {
        match self.phase {
            Phase::Pretrain => detector::is_base_param(name),
            Phase::Finetune => !(self.freeze_base && detector::is_base_param(name)),
        }
    }
}

/// Linear warm-up to `base_lr`, then cosine decay to `min_lr` at `total_iters`.
pub fn cosine_lr(it: usize, cfg: &TrainConfig) -> Result<f64> {
    if it > cfg.total_iters {
        return Err(Error::InvalidArgument(format!("iteration {it} beyond total_iters {}", cfg.total_iters)));
    }
    let (w, t) = (cfg.warmup_iters, cfg.total_iters);
    if it < w {
        return Ok(cfg.base_lr * it as f64 / w as f64);
    }
    if it == w {
        return Ok(cfg.base_lr);
    }
    if it == t {
        return Ok(cfg.min_lr);
    }
    let phase = std::f64::consts::PI * (it - w) as f64 / (t - w) as f64;
    Ok(cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + phase.cos()))
}

/// SGD with momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub velocity: Parameters,
}

impl Default for Sgd {
    fn default() -> Self {
        Self::new()
    }
}

impl Sgd {
    pub fn new() -> Self {
        Self { velocity: Parameters::new(0) }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &BTreeMap<String, Vec<f32>>, lr: f32) -> Result<()> {
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.numel() != g.len() {
                return Err(Error::Shape(format!("gradient for {name} has {} entries, parameter {}", g.len(), p.numel())));
            }
            if !self.velocity.contains(name) {
                self.velocity.insert(name, Tensor::zeros(p.shape()))?;
            }
            let v = self.velocity.get_mut(name)?;
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
                *vv = MOMENTUM * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

fn iter_rng(seed: u64, it: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(it as u64 + 1);
    rng
}

/// Forward, backward and update for iteration `it`. The loss breakdown is
/// computed before the update.
pub fn train_step(params: &mut Parameters, opt: &mut Sgd, clips: &[VideoClip], model: &ModelConfig, cfg: &TrainConfig, it: usize) -> Result<LossBreakdown> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = iter_rng(cfg.seed, it);
    let mut g = Graph::new();
    let b = params.bind(&mut g, |n| cfg.trainable(n));
    let (total, l_det, l_mask) = match cfg.phase {
        Phase::Pretrain => {
            let mut data = Vec::new();
            let mut gts: Vec<Vec<GtObject>> = Vec::new();
            let mut shape = Vec::new();
            for _ in 0..cfg.batch_frames {
                let c = &clips[rng.gen_range(0..clips.len())];
                let t = rng.gen_range(0..c.frames.len());
                let f = frames_tensor(c, &[t])?;
                shape = f.shape().to_vec();
                data.extend_from_slice(f.data());
                gts.push(c.gt_objects(t));
            }
            shape[0] = cfg.batch_frames;
            let frames = Tensor::new(shape, data)?;
            let l = pretrain_loss(&mut g, &b, &frames, &gts)?;
            let v = g.value(l).item()? as f64;
            (l, v, 0.0)
        }
        Phase::Finetune => {
            let mut totals = Vec::new();
            let (mut det, mut mask) = (0.0, 0.0);
            for _ in 0..cfg.batch_clips {
                let c = &clips[rng.gen_range(0..clips.len())];
                let m = cfg.frames_per_clip.min(c.frames.len());
                let mut idx = sample(&mut rng, c.frames.len(), m).into_vec();
                idx.sort_unstable();
                let l = finetune_graph(&mut g, &b, model, c, &idx, cfg.lambda as f32)?;
                det += g.value(l.l_det).item()? as f64;
                if let Some(lm) = l.l_mask {
                    mask += g.value(lm).item()? as f64;
                }
                totals.push(l.total);
            }
            let n = cfg.batch_clips as f64;
            let mut t = totals[0];
            for &x in &totals[1..] {
                t = g.add(t, x)?;
            }
            let t = g.scale(t, 1.0 / n as f32)?;
            (t, det / n, mask / n)
        }
    };
    let breakdown = if l_det.is_finite() && l_mask.is_finite() {
        total_loss(l_det.max(0.0), l_mask.max(0.0), cfg.lambda)?
    } else {
        return Err(Error::Diverged { iter: it, detail: format!("l_det={l_det} l_mask={l_mask}") });
    };
    let mut grads = g.backward(total)?;
    let mut named = BTreeMap::new();
    for (name, v) in b.iter() {
        if cfg.trainable(name) {
            if let Some(gr) = grads.take(v) {
                named.insert(name.to_owned(), gr);
            }
        }
    }
    let norm = named.values().flatten().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::Diverged { iter: it, detail: format!("gradient norm {norm}") });
    }
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        let s = (cfg.grad_clip / norm) as f32;
        named.values_mut().flatten().for_each(|x| *x *= s);
    }
    opt.step(params, &named, cosine_lr(it, cfg)? as f32)?;
    Ok(breakdown)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub l_det: f64,
    pub l_mask: f64,
    pub l_total: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{:e},{:e},{:e},{:e}", self.iter, self.lr, self.l_det, self.l_mask, self.l_total)
    }
}

pub const LOG_HEADER: &str = "iter,lr,l_det,l_mask,l_total";

#[derive(Serialize, Deserialize)]
struct ResumeState {
    next_iter: usize,
}

fn write_checkpoint(dir: &Path, params: &Parameters, opt: &Sgd, next_iter: usize) -> Result<()> {
    let tmp = dir.join("checkpoint.tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    save_checkpoint(&tmp.join("params"), params)?;
    save_checkpoint(&tmp.join("velocity"), &opt.velocity)?;
    fs::write(tmp.join("state.json"), serde_json::to_string(&ResumeState { next_iter })?)?;
    let dst = dir.join("checkpoint");
    if dst.exists() {
        fs::remove_dir_all(&dst)?;
    }
    fs::rename(tmp, dst)?;
    Ok(())
}

/// Runs `cfg.total_iters` iterations from `params`, logging to
/// `dir/metrics.csv` and checkpointing to `dir/checkpoint` every
/// `checkpoint_every` iterations. An existing checkpoint in `dir` is resumed.
pub fn fit(clips: &[VideoClip], mut params: Parameters, model: &ModelConfig, cfg: &TrainConfig, dir: &Path) -> Result<(Parameters, Vec<LogRow>)> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    fs::create_dir_all(dir)?;
    let mut opt = Sgd::new();
    let mut start = 0;
    let mut rows = Vec::new();
    let ckpt = dir.join("checkpoint");
    if ckpt.join("state.json").exists() {
        let st: ResumeState = serde_json::from_str(&fs::read_to_string(ckpt.join("state.json"))?)?;
        params = load_checkpoint(&ckpt.join("params"))?;
        opt.velocity = load_checkpoint(&ckpt.join("velocity"))?;
        start = st.next_iter;
        let prev = dir.join("metrics.csv");
        rows = if prev.exists() { read_log(&prev)? } else { Vec::new() }.into_iter().filter(|r| r.iter < start).collect();
        log::info!("resuming at iteration {start}");
    }
    let mut log = fs::File::create(dir.join("metrics.csv"))?;
    writeln!(log, "{LOG_HEADER}")?;
    for r in &rows {
        writeln!(log, "{}", r.csv())?;
    }
    for it in start..cfg.total_iters {
        let lr = cosine_lr(it, cfg)?;
        let lb = match train_step(&mut params, &mut opt, clips, model, cfg, it) {
            Ok(lb) => lb,
            Err(e @ Error::Diverged { .. }) => {
                let dump = serde_json::json!({ "error": e.to_string(), "recent": rows.iter().rev().take(20).collect::<Vec<_>>() });
                fs::write(dir.join("divergence.json"), serde_json::to_string_pretty(&dump)?)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let row = LogRow { iter: it, lr, l_det: lb.l_det, l_mask: lb.l_mask, l_total: lb.l_total };
        writeln!(log, "{}", row.csv())?;
        rows.push(row);
        if it % 100 == 0 {
            log::info!("{:?} iter {it} lr {lr:.5} l_det {:.4} l_mask {:.4}", cfg.phase, lb.l_det, lb.l_mask);
        }
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            log.flush()?;
            write_checkpoint(dir, &params, &opt, it + 1)?;
        }
    }
    log.flush()?;
    Ok((params, rows))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::InvalidArgument(format!("bad metrics line {line:?}"));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(LogRow { iter: f[0].parse().map_err(|_| bad())?, lr: num(f[1])?, l_det: num(f[2])?, l_mask: num(f[3])?, l_total: num(f[4])? });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::is_base_param;
    use crate::pipeline::{init_model, Aggregation};
    use crate::synthdata::{generate_clip, ClipSpec};

    fn sched(w: usize, t: usize) -> TrainConfig {
        TrainConfig { base_lr: 0.1, min_lr: 0.001, warmup_iters: w, total_iters: t, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_endpoints() {
        let c = sched(10, 110);
        assert_eq!(cosine_lr(0, &c).unwrap(), 0.0);
        assert_eq!(cosine_lr(10, &c).unwrap(), 0.1);
        assert_eq!(cosine_lr(110, &c).unwrap(), 0.001);
        assert!((cosine_lr(60, &c).unwrap() - 0.0505).abs() < 1e-12);
        assert!(cosine_lr(111, &c).is_err());
        let jump = (cosine_lr(10, &c).unwrap() - cosine_lr(9, &c).unwrap()).abs();
        assert!(jump <= 0.1 / 10.0 + 1e-12);
        assert!(sched(110, 110).validate().is_err());
        assert!(TrainConfig { min_lr: 0.5, ..sched(0, 10) }.validate().is_err());
    }

    fn model(agg: Aggregation) -> ModelConfig {
        crate::pipeline::tests::tiny(agg)
    }

    fn clips() -> Vec<VideoClip> {
        (0..2).map(|s| generate_clip(&ClipSpec { num_frames: 4, ..ClipSpec::default() }, s).unwrap()).collect()
    }

    #[test]
    fn zero_lr_and_frozen_base_leave_parameters_untouched() {
        let m = model(Aggregation::Mask);
        let cs = clips();
        let p0 = init_model(&m, 0).unwrap();
        let cfg = TrainConfig { base_lr: 0.0, frames_per_clip: 2, total_iters: 3, ..TrainConfig::default() };
        let mut p = p0.clone();
        let mut opt = Sgd::new();
        train_step(&mut p, &mut opt, &cs, &m, &cfg, 0).unwrap();
        assert_eq!(p.checksum(|_| true), p0.checksum(|_| true));

        let cfg = TrainConfig { base_lr: 0.05, ..cfg };
        let base = p0.checksum(is_base_param);
        for it in 0..3 {
            train_step(&mut p, &mut opt, &cs, &m, &cfg, it).unwrap();
            assert_eq!(p.checksum(is_base_param), base);
        }
        let pre = TrainConfig { phase: Phase::Pretrain, batch_frames: 2, ..cfg };
        let rest = p.checksum(|n| !is_base_param(n));
        train_step(&mut p, &mut opt, &cs, &m, &pre, 0).unwrap();
        assert_eq!(p.checksum(|n| !is_base_param(n)), rest);
        assert_ne!(p.checksum(is_base_param), base);
    }

    #[test]
    fn fit_zero_iters_and_resume() {
        let m = model(Aggregation::Box);
        let cs = clips();
        let p0 = init_model(&m, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { total_iters: 0, frames_per_clip: 2, ..TrainConfig::default() };
        let (p, rows) = fit(&cs, p0.clone(), &m, &cfg, dir.path()).unwrap();
        assert!(rows.is_empty());
        assert_eq!(p.checksum(|_| true), p0.checksum(|_| true));

        let cfg = TrainConfig { total_iters: 6, warmup_iters: 1, checkpoint_every: 3, ..cfg };
        let full = tempfile::tempdir().unwrap();
        let (pa, ra) = fit(&cs, p0.clone(), &m, &cfg, full.path()).unwrap();
        assert!(full.path().join("checkpoint/state.json").exists());
        let resumed = tempfile::tempdir().unwrap();
        let mut p_half = p0.clone();
        let mut opt = Sgd::new();
        for it in 0..3 {
            train_step(&mut p_half, &mut opt, &cs, &m, &cfg, it).unwrap();
        }
        write_checkpoint(resumed.path(), &p_half, &opt, 3).unwrap();
        let (pb, rb) = fit(&cs, p0, &m, &cfg, resumed.path()).unwrap();
        assert_eq!(pa.checksum(|_| true), pb.checksum(|_| true));
        assert_eq!(ra[3..].iter().map(LogRow::csv).collect::<Vec<_>>(), rb.iter().map(LogRow::csv).collect::<Vec<_>>());
        assert_eq!(read_log(&full.path().join("metrics.csv")).unwrap(), ra);
    }
}
