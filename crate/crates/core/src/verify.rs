//! Gradient checks, oracle comparisons and hand-computed values, shared by
//! the `verify` command and the acceptance tests.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::detector::{detection_loss, GtObject, Level, LevelVars, LEVELS};
use crate::error::Result;
use crate::eval::{ap_from_flags, average_precision, map_at, Detection, GroundTruth};
use crate::fpsm::gather_rows;
use crate::geometry::{iou, iou_raw, nms, BBox, BinaryMask};
use crate::ifem;
use crate::maskhead::{self, filter_by_class, mask_loss, mask_loss_var, MaskHeadConfig, MaskLossKind, MaskTensor};
use crate::numerics::{flops, grad_check, init_attention, multi_head_attention, AttentionVars, Bound, Graph, Parameters, Tensor, Var};
use crate::pipeline::{infer_clip, init_model, Aggregation, ModelConfig};
use crate::synthdata::{generate_clip, motion_speed_of, ClipSpec, MotionSpeed};
use crate::ticam::{self, FrameRows, ScoreMode, TicamConfig};
use crate::train::{cosine_lr, TrainConfig};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 5;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_owned(), passed, detail: detail.into() }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let r = g.constant(rand_t(&g.shape(y).to_vec(), &mut rng));
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn params_inputs(p: &Parameters<f64>) -> Result<(Vec<String>, Vec<Tensor<f64>>)> {
    let names: Vec<String> = p.names().map(str::to_owned).collect();
    let ts = names.iter().map(|n| p.get(n).cloned()).collect::<Result<Vec<_>>>()?;
    Ok((names, ts))
}

fn bind_tail(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_vars(names.iter().map(String::as_str).zip(vars.iter().copied()))
}

/// Random biases keep ReLU pre-activations away from the kink.
fn jitter_biases(p: &mut Parameters<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
    for (n, t) in p.iter_mut() {
        if n.ends_with(".b") {
            *t = Tensor::from_fn(t.shape(), |_| 0.2 + 0.1 * rng.gen_range(-1.0..1.0));
        }
    }
}

fn grad_conv2d(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [rand_t(&[2, 3, 5, 5], &mut rng), rand_t(&[4, 3, 3, 3], &mut rng), rand_t(&[4], &mut rng)];
    grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1)?;
            weighted_sum(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn grad_linear(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [rand_t(&[4, 5], &mut rng), rand_t(&[3, 5], &mut rng), rand_t(&[3], &mut rng)];
    grad_check(
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            weighted_sum(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn grad_softmax(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [Tensor::from_fn(&[3, 6], |_| rng.gen_range(-3.0..3.0))];
    grad_check(
        |g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn grad_attention(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Parameters::<f64>::new(seed);
    init_attention(&mut p, "att", 8)?;
    jitter_biases(&mut p, seed);
    let (names, ts) = params_inputs(&p)?;
    let mut inputs = vec![rand_t(&[3, 8], &mut rng), rand_t(&[5, 8], &mut rng), rand_t(&[5, 8], &mut rng)];
    inputs.extend(ts);
    grad_check(
        |g, v| {
            let b = bind_tail(&names, &v[3..]);
            let a = AttentionVars::bind(&b, "att")?;
            let y = multi_head_attention(g, v[0], v[1], v[2], &a, 2)?;
            weighted_sum(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn grad_bilinear(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [rand_t(&[2, 3, 4], &mut rng)];
    grad_check(
        |g, v| {
            let y = g.bilinear_resize(v[0], 5, 7)?;
            weighted_sum(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn grad_roi_align(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [rand_t(&[2, 6, 7], &mut rng)];
    let rois: Vec<[f64; 4]> = (0..2)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
            [x, y, x + rng.gen_range(1.0..3.5), y + rng.gen_range(1.0..2.5)]
        })
        .collect();
    grad_check(
        |g, v| {
            let y = g.roi_align(v[0], &rois, 3, 3, 2)?;
            weighted_sum(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn grad_ifem(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Parameters::<f64>::new(seed);
    ifem::init_params(&mut p, 2, 3)?;
    let inputs = [rand_t(&[2, 4, 4], &mut rng), p.get("ifem.w")?.clone(), rand_t(&[3], &mut rng)];
    grad_check(
        |g, v| {
            let b = Bound::from_vars([("ifem.w", v[1]), ("ifem.b", v[2])]);
            let y = ifem::extract_var(g, &b, v[0])?;
            weighted_sum(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn gt_square(size: usize, b: BBox) -> BinaryMask {
    BinaryMask::from_box(size, size, &b)
}

fn grad_mask_head(seed: u64) -> Result<f64> {
    let cfg = MaskHeadConfig { in_channels: 3, hidden: 2, num_classes: 2, roi_size: 4, level: Level::P5, class_agnostic: false };
    let mut p = Parameters::<f64>::new(seed);
    maskhead::init_params(&mut p, &cfg)?;
    jitter_biases(&mut p, seed);
    let (names, ts) = params_inputs(&p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![rand_t(&[1, 3, 4, 4], &mut rng)];
    inputs.extend(ts);
    let gm = [gt_square(16, BBox::new(4.0, 3.0, 9.0, 8.0))];
    let gb = [BBox::new(3.0, 2.0, 10.0, 9.0)];
    let kind = if seed % 2 == 0 { MaskLossKind::Bce } else { MaskLossKind::Dice };
    grad_check(
        |g, v| {
            let b = bind_tail(&names, &v[1..]);
            let m = maskhead::predict_var(g, &b, v[0])?;
            let sel = g.select_channel(m, &[1])?;
            mask_loss_var(g, sel, &[(0, 0)], &gm, &gb, kind)
        },
        &inputs,
        EPS,
    )
}

fn grad_ticam(seed: u64) -> Result<f64> {
    let cfg = TicamConfig { in_cls: 6, in_ins: 5, dim: 8, heads: 2, num_classes: 4 };
    let mut p = Parameters::<f64>::new(seed);
    ticam::init_params(&mut p, &cfg)?;
    jitter_biases(&mut p, seed);
    let (names, ts) = params_inputs(&p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![rand_t(&[2, 6], &mut rng), rand_t(&[2, 5], &mut rng), rand_t(&[1, 6], &mut rng), rand_t(&[1, 5], &mut rng)];
    inputs.extend(ts);
    grad_check(
        |g, v| {
            let b = bind_tail(&names, &v[4..]);
            let rows = [FrameRows { frame_index: 0, cls: v[0], ins: v[1] }, FrameRows { frame_index: 1, cls: v[2], ins: v[3] }];
            let bank = ticam::build_queries(g, &b, &rows)?;
            let agg = ticam::aggregate(g, &b, &bank, cfg.heads)?;
            ticam::classification_loss(g, agg.class_logits, &[Some(1), None, Some(3)])
        },
        &inputs,
        EPS,
    )
}

fn grad_detection_loss(seed: u64) -> Result<f64> {
    let gts = vec![
        vec![GtObject { bbox: BBox::new(3.0, 5.0, 17.0, 15.0), class_id: 1 }],
        vec![GtObject { bbox: BBox::new(1.0, 2.0, 30.0, 27.0), class_id: 0 }],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::new();
    for (h, w) in [(4, 4), (2, 2), (1, 1)] {
        for c in [2, 4, 1] {
            inputs.push(Tensor::<f64>::from_fn(&[2, c, h, w], |_| rng.gen_range(0.2..2.0)));
        }
    }
    grad_check(
        |g, v| {
            let lv: Vec<LevelVars> = (0..3)
                .map(|l| LevelVars { level: LEVELS[l], neck: v[3 * l], cls: v[3 * l], bbox: v[3 * l + 1], obj: v[3 * l + 2] })
                .collect();
            detection_loss(g, &lv, &gts)
        },
        &inputs,
        EPS,
    )
}

fn grad_mask_loss(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [rand_t(&[2, 6, 6], &mut rng)];
    let gm = [gt_square(16, BBox::new(2.0, 2.0, 8.0, 9.0)), gt_square(16, BBox::new(6.0, 5.0, 14.0, 12.0))];
    let gb = [BBox::new(1.0, 1.0, 9.0, 10.0), BBox::new(5.0, 4.0, 15.0, 13.0)];
    let kind = if seed % 2 == 0 { MaskLossKind::Dice } else { MaskLossKind::Bce };
    grad_check(|g, v| mask_loss_var(g, v[0], &[(0, 1), (1, 0)], &gm, &gb, kind), &inputs, EPS)
}

type GradCase = (&'static str, fn(u64) -> Result<f64>);

pub const GRAD_CASES: [GradCase; 11] = [
    ("conv2d", grad_conv2d),
    ("linear", grad_linear),
    ("softmax", grad_softmax),
    ("attention", grad_attention),
    ("bilinear_resize", grad_bilinear),
    ("roi_align", grad_roi_align),
    ("ifem", grad_ifem),
    ("mask_head", grad_mask_head),
    ("ticam", grad_ticam),
    ("detection_loss", grad_detection_loss),
    ("mask_loss", grad_mask_loss),
];

/// Finite-difference checks of every differentiable op over `GRAD_SEEDS`
/// seeds, followed by a runtime line.
pub fn gradients() -> Result<Vec<Check>> {
    let start = Instant::now();
    let mut out = Vec::new();
    for (name, f) in GRAD_CASES {
        let mut worst = 0.0f64;
        for seed in 0..GRAD_SEEDS {
            worst = worst.max(f(seed)?);
        }
        out.push(Check::new(&format!("grad {name}"), worst < GRAD_TOL, format!("max rel err {worst:.2e} over {GRAD_SEEDS} seeds")));
    }
    let secs = start.elapsed().as_secs_f64();
    out.push(Check::new("grad runtime", secs < 120.0, format!("{secs:.1}s")));
    Ok(out)
}

fn random_box(rng: &mut ChaCha8Rng, extent: f32) -> BBox {
    let (x, y) = (rng.gen_range(0.0..extent), rng.gen_range(0.0..extent));
    BBox::new(x, y, x + rng.gen_range(1.0..20.0), y + rng.gen_range(1.0..20.0))
}

/// Greedy suppression by repeated arg-max over the survivors.
fn nms_brute(boxes: &[(BBox, f32)], thr: f64) -> Vec<usize> {
    let mut alive = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| boxes[i].1 > boxes[b].1) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        for i in 0..boxes.len() {
            if alive[i] && iou_raw(&boxes[b].0, &boxes[i].0) > thr {
                alive[i] = false;
            }
        }
        alive[b] = false;
    }
    kept
}

fn nms_oracle(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bad = 0;
    for _ in 0..cases {
        let n = rng.gen_range(0..25);
        let boxes: Vec<(BBox, f32)> = (0..n).map(|_| (random_box(&mut rng, 40.0), rng.gen_range(0..10) as f32 / 10.0)).collect();
        let thr = rng.gen_range(0.05..0.95);
        if nms(&boxes, thr) != nms_brute(&boxes, thr) {
            bad += 1;
        }
    }
    Check::new("oracle nms", bad == 0, format!("{bad} mismatches in {cases} cases"))
}

/// Attention in plain loops over `f64`, weights `[Dout,Din]`.
fn attention_naive(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], w: &[(Vec<Vec<f64>>, Vec<f64>)], heads: usize) -> Vec<Vec<f64>> {
    let affine = |x: &[f64], (m, b): &(Vec<Vec<f64>>, Vec<f64>)| -> Vec<f64> {
        m.iter().zip(b).map(|(row, bi)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + bi).collect()
    };
    let qs: Vec<Vec<f64>> = q.iter().map(|x| affine(x, &w[0])).collect();
    let ks: Vec<Vec<f64>> = k.iter().map(|x| affine(x, &w[1])).collect();
    let vs: Vec<Vec<f64>> = v.iter().map(|x| affine(x, &w[2])).collect();
    let d = qs[0].len();
    let dh = d / heads;
    let mut out = Vec::new();
    for qi in &qs {
        let mut cat = vec![0.0; d];
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            let s: Vec<f64> = ks.iter().map(|kj| qi[r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in vs.iter().enumerate() {
                for c in r.clone() {
                    cat[c] += e[j] / z * vj[c];
                }
            }
        }
        out.push(affine(&cat, &w[3]));
    }
    out
}

fn attention_oracle(cases: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let heads = [1, 2, 4][case % 3];
        let d = 8;
        let (nq, nk) = (rng.gen_range(1..6), rng.gen_range(1..7));
        let mut p = Parameters::<f32>::new(case as u64);
        init_attention(&mut p, "a", d)?;
        for (n, t) in p.iter_mut() {
            if n.ends_with(".b") {
                *t = Tensor::from_fn(t.shape(), |_| rng.gen_range(-0.5..0.5));
            }
        }
        let mut rows = |n: usize| -> Vec<Vec<f32>> { (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect() };
        let (q, k, v) = (rows(nq), rows(nk), rows(nk));
        let mut g = Graph::<f32>::new();
        let to_var = |g: &mut Graph<f32>, x: &[Vec<f32>]| g.constant(Tensor::new(vec![x.len(), d], x.concat()).expect("rows"));
        let (qv, kv, vv) = (to_var(&mut g, &q), to_var(&mut g, &k), to_var(&mut g, &v));
        let b = p.bind(&mut g, |_| false);
        let a = AttentionVars::bind(&b, "a")?;
        let y = multi_head_attention(&mut g, qv, kv, vv, &a, heads)?;
        let got = g.value(y).data().to_vec();

        let up = |x: &[Vec<f32>]| -> Vec<Vec<f64>> { x.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect() };
        let weights: Vec<(Vec<Vec<f64>>, Vec<f64>)> = ["q", "k", "v", "o"]
            .iter()
            .map(|s| {
                let w = p.get(&format!("a.{s}.w")).expect("weight");
                let bias = p.get(&format!("a.{s}.b")).expect("bias");
                let m = w.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
                (m, bias.data().iter().map(|&v| v as f64).collect())
            })
            .collect();
        let want = attention_naive(&up(&q), &up(&k), &up(&v), &weights, heads).concat();
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    Ok(Check::new("oracle attention", worst <= 1e-5, format!("max abs err {worst:.2e} over {cases} cases")))
}

fn roi_align_oracle(cases: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut worst_const, mut worst_lin) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(3..9), rng.gen_range(3..9));
        let x1 = rng.gen_range(0.0..(w as f64 - 1.5));
        let y1 = rng.gen_range(0.0..(h as f64 - 1.5));
        let roi = [x1, y1, rng.gen_range(x1 + 0.5..w as f64), rng.gen_range(y1 + 0.5..h as f64)];
        let (oh, ow) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let k: f32 = rng.gen_range(-2.0..2.0);
        let a = Tensor::<f32>::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f32>::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0));
        let (al, be): (f32, f32) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mut g = Graph::<f32>::new();
        let pool = |g: &mut Graph<f32>, t: Tensor<f32>| -> Result<Vec<f32>> {
            let v = g.constant(t);
            let y = g.roi_align(v, &[roi], oh, ow, 2)?;
            Ok(g.value(y).data().to_vec())
        };
        let cst = pool(&mut g, Tensor::full(&[c, h, w], k))?;
        worst_const = cst.iter().fold(worst_const, |m, &v| m.max((v - k).abs() as f64));
        let pa = pool(&mut g, a.clone())?;
        let pb = pool(&mut g, b.clone())?;
        let mix = Tensor::new(vec![c, h, w], a.data().iter().zip(b.data()).map(|(x, y)| al * x + be * y).collect())?;
        let pm = pool(&mut g, mix)?;
        for ((m, x), y) in pm.iter().zip(&pa).zip(&pb) {
            worst_lin = worst_lin.max((*m as f64 - (al as f64 * *x as f64 + be as f64 * *y as f64)).abs());
        }
    }
    Ok(vec![
        Check::new("oracle roi_align constant", worst_const <= 1e-6, format!("max abs err {worst_const:.2e} over {cases} cases")),
        Check::new("oracle roi_align linearity", worst_lin <= 1e-6, format!("max abs err {worst_lin:.2e} over {cases} cases")),
    ])
}

/// AP by exhaustive rank scan: every detection is visited in score order
/// by repeated arg-max, and precision is interpolated by a max over all
/// later ranks.
fn ap_brute(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; dets.len()];
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::new();
    for _ in 0..dets.len() {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if !used[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let i = best.expect("remaining detection");
        used[i] = true;
        let mut hit: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] || gt.frame_id != dets[i].frame_id {
                continue;
            }
            let v = iou_raw(&dets[i].bbox, &gt.bbox);
            if v >= thr && hit.is_none_or(|(_, b)| v > b) {
                hit = Some((j, v));
            }
        }
        if let Some((j, _)) = hit {
            taken[j] = true;
        }
        flags.push(hit.is_some());
    }
    let n = gts.len() as f64;
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let mut tp = 0usize;
    for (k, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..flags.len() {
        let p = prec[k..].iter().cloned().fold(0.0, f64::max);
        ap += (rec[k] - prev) * p;
        prev = rec[k];
    }
    ap
}

fn ap_oracle(scenes: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let classes = 3;
    let mut bad = 0;
    for _ in 0..scenes {
        let frames = rng.gen_range(1..4);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for f in 0..frames {
            for _ in 0..rng.gen_range(0..5) {
                let b = random_box(&mut rng, 30.0);
                gts.push(GroundTruth { frame_id: f, bbox: b, class_id: rng.gen_range(0..classes), bucket: None });
            }
            for _ in 0..rng.gen_range(0..8) {
                let bbox = match gts.iter().filter(|g| g.frame_id == f).nth(rng.gen_range(0..3)) {
                    Some(g) if rng.gen_bool(0.7) => {
                        let j = |rng: &mut ChaCha8Rng| rng.gen_range(-3.0..3.0);
                        BBox::new(g.bbox.x1 + j(&mut rng), g.bbox.y1 + j(&mut rng), g.bbox.x2 + j(&mut rng) + 3.0, g.bbox.y2 + j(&mut rng) + 3.0)
                    }
                    _ => random_box(&mut rng, 30.0),
                };
                dets.push(Detection { frame_id: f, bbox, class_id: rng.gen_range(0..classes), score: rng.gen_range(0..8) as f32 / 8.0 });
            }
        }
        if gts.is_empty() {
            continue;
        }
        let report = map_at(&dets, &gts, classes)?;
        for c in 0..classes {
            let dc: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).cloned().collect();
            let gc: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c).cloned().collect();
            let want: Option<Vec<f64>> = (!gc.is_empty()).then(|| report.thresholds.iter().map(|&t| ap_brute(&dc, &gc, t)).collect());
            if report.ap[c] != want {
                bad += 1;
            }
        }
    }
    Ok(Check::new("oracle average precision", bad == 0, format!("{bad} class mismatches in {scenes} scenes")))
}

fn filter_oracle(cases: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut bad = 0;
    for case in 0..cases {
        let (n, c, h, w) = (rng.gen_range(1..5), if case % 4 == 0 { 1 } else { rng.gen_range(2..6) }, rng.gen_range(1..5), rng.gen_range(1..5));
        let logits = Tensor::<f32>::from_fn(&[n, c, h, w], |_| rng.gen_range(-1.0..1.0));
        let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c.max(3))).map(|t| if c == 1 { t } else { t % c }).collect();
        let f = filter_by_class(&MaskTensor::new(logits.clone())?, &classes)?;
        for (i, &t) in classes.iter().enumerate() {
            let ch = if c == 1 { 0 } else { t };
            let want: Vec<f32> = (0..h * w).map(|p| logits.data()[(i * c + ch) * h * w + p]).collect();
            if f.masks[i].data() != want.as_slice() || f.classes[i] != t {
                bad += 1;
            }
        }
    }
    Ok(Check::new("oracle filter_by_class", bad == 0, format!("{bad} mismatches in {cases} cases")))
}

/// NMS, attention, roi_align, AP and class filtering against independent
/// reference implementations.
pub fn oracles() -> Result<Vec<Check>> {
    let mut out = vec![nms_oracle(1000), attention_oracle(60)?];
    out.extend(roi_align_oracle(200)?);
    out.push(ap_oracle(500)?);
    out.push(filter_oracle(200)?);
    Ok(out)
}

pub fn hand_values() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let ap = ap_from_flags(&[(0.9, true), (0.8, false), (0.7, true)], 2);
    let f = 0;
    let gts = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 30.0, 30.0)]
        .map(|bbox| GroundTruth { frame_id: f, bbox, class_id: 0, bucket: None });
    let dets = [(BBox::new(0.0, 0.0, 10.0, 10.0), 0.9), (BBox::new(40.0, 40.0, 50.0, 50.0), 0.8), (BBox::new(20.0, 20.0, 30.0, 30.0), 0.7)]
        .map(|(bbox, score)| Detection { frame_id: f, bbox, class_id: 0, score });
    let ap2 = average_precision(&dets, &gts, 0.5);
    let err = (ap - 5.0 / 6.0).abs().max((ap2 - 5.0 / 6.0).abs());
    out.push(Check::new("hand AP 5/6", err <= 1e-9, format!("{ap:.12}, {ap2:.12}")));

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let target = Tensor::from_fn(&[5, 4], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let bce = mask_loss(&[(Tensor::zeros(&[5, 4]), target)], MaskLossKind::Bce)?;
    let err = (bce - std::f64::consts::LN_2).abs();
    out.push(Check::new("hand BCE at p=0.5", err <= 1e-6, format!("{bce:.9} vs ln 2")));

    let v = iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 3.0, 3.0))?;
    out.push(Check::new("hand IoU 1/7", (v - 1.0 / 7.0).abs() <= 1e-9, format!("{v:.12}")));

    let tc = TrainConfig { base_lr: 0.02, min_lr: 0.001, warmup_iters: 10, total_iters: 110, ..TrainConfig::default() };
    let ends = [cosine_lr(0, &tc)?, cosine_lr(10, &tc)?, cosine_lr(110, &tc)?];
    let mid = cosine_lr(60, &tc)?;
    let ok = ends == [0.0, tc.base_lr, tc.min_lr] && (mid - 0.5 * (tc.base_lr + tc.min_lr)).abs() < 1e-12;
    out.push(Check::new("hand cosine endpoints", ok, format!("{ends:?}, midpoint {mid}")));

    let lam = RunConfig::default().lambda;
    let mut ok = lam == 1.0 && TrainConfig::default().lambda == 1.0;
    for _ in 0..100 {
        let (d, m) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
        ok &= maskhead::total_loss(d, m, lam)?.l_total == d + m;
    }
    out.push(Check::new("hand L_total identity", ok, format!("lambda default {lam}")));
    Ok(out)
}

pub fn motion_buckets() -> Result<Vec<Check>> {
    let cases = [
        (0.9, MotionSpeed::Medium),
        (0.7, MotionSpeed::Medium),
        (0.9 + 1e-12, MotionSpeed::Slow),
        (0.7 - 1e-12, MotionSpeed::Fast),
    ];
    let mut out = Vec::new();
    for (v, want) in cases {
        let got = motion_speed_of(&[v])?;
        out.push(Check::new(&format!("bucket at {v}"), got == want, format!("{got:?}, expected {want:?}")));
    }
    Ok(out)
}

/// A small model used where only structure matters.
pub fn tiny_model(aggregation: Aggregation) -> ModelConfig {
    ModelConfig {
        num_classes: 8,
        feature_dim: 8,
        c_prime: 8,
        heads: 2,
        k: 50,
        n_cap: 4,
        nms_train: 0.75,
        nms_infer: 0.5,
        m_train: 3,
        m_infer: 4,
        roi_size: 4,
        fpn_level: Level::P3,
        mask_hidden: 4,
        class_aware: true,
        loss: MaskLossKind::Bce,
        aggregation,
        score_mode: ScoreMode::Replace,
    }
}

/// Inference with the mask head present builds no mask tensors and costs
/// exactly what it costs with the mask parameters removed.
pub fn inference_purity() -> Result<Vec<Check>> {
    let clip = generate_clip(&ClipSpec { num_frames: 6, ..ClipSpec::default() }, 3)?;
    let cfg = tiny_model(Aggregation::Mask);
    let p = init_model(&cfg, 2)?;
    let mut stripped = p.clone();
    stripped.retain(|n| !maskhead::is_mask_param(n));
    let before = maskhead::mask_tensors_built();
    let (a, fa) = flops::measure(|| infer_clip(&p, &cfg, &clip));
    let built = maskhead::mask_tensors_built() - before;
    let (b, fb) = flops::measure(|| infer_clip(&stripped, &cfg, &clip));
    let (a, b) = (a?, b?);
    let total = |f: &std::collections::BTreeMap<&str, u64>| f.values().sum::<u64>();
    Ok(vec![
        Check::new("purity no mask tensors", built == 0, format!("{built} built during inference")),
        Check::new(
            "purity equal FLOPs",
            fa == fb && a == b,
            format!("{} vs {} MACs, outputs {}", total(&fa), total(&fb), if a == b { "equal" } else { "differ" }),
        ),
    ])
}

/// Attention score FLOPs of TICAM at `n` and `2n` rows per frame, fixed `m`.
pub fn complexity() -> Result<Vec<Check>> {
    let cfg = TicamConfig { in_cls: 6, in_ins: 5, dim: 8, heads: 2, num_classes: 4 };
    let mut p = Parameters::<f32>::new(0);
    ticam::init_params(&mut p, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let m = 4;
    let mut count = |n: usize| -> Result<u64> {
        let frames: Vec<(Tensor, Tensor)> = (0..m)
            .map(|_| (Tensor::from_fn(&[n, 6], |_| rng.gen_range(-1.0..1.0)), Tensor::from_fn(&[n, 5], |_| rng.gen_range(-1.0..1.0))))
            .collect();
        let (r, f) = flops::measure(|| -> Result<()> {
            let mut g = Graph::new();
            let b = p.bind(&mut g, |_| false);
            let rows: Vec<FrameRows> = frames
                .iter()
                .enumerate()
                .map(|(i, (c, s))| FrameRows { frame_index: i, cls: g.constant(c.clone()), ins: g.constant(s.clone()) })
                .collect();
            let bank = ticam::build_queries(&mut g, &b, &rows)?;
            ticam::aggregate(&mut g, &b, &bank, cfg.heads)?;
            Ok(())
        });
        r?;
        Ok(f.get("attention_scores").copied().unwrap_or(0))
    };
    let mut out = Vec::new();
    for n in [15, 30] {
        let (a, b) = (count(n)?, count(2 * n)?);
        out.push(Check::new(&format!("complexity n_cap {n}->{}", 2 * n), a > 0 && b == 4 * a, format!("{a} -> {b} MACs")));
    }
    Ok(out)
}

/// Row gathering at proposal cells matches direct indexing.
fn gather_check() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let maps: Vec<Tensor> = [(4, 4), (2, 2), (1, 1)].iter().map(|&(h, w)| Tensor::from_fn(&[3, h, w], |_| rng.gen_range(-1.0..1.0))).collect();
    let cells: Vec<(Level, usize)> = (0..20)
        .map(|_| {
            let l = rng.gen_range(0..3);
            (LEVELS[l], rng.gen_range(0..[16, 4, 1][l]))
        })
        .collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = maps.iter().map(|t| g.constant(t.clone())).collect();
    let rows = gather_rows(&mut g, &vars, &cells)?;
    let got = g.value(rows).data().to_vec();
    let mut want = Vec::new();
    for &(l, cell) in &cells {
        let t = &maps[l.index()];
        let plane = t.shape()[1] * t.shape()[2];
        want.extend((0..3).map(|c| t.data()[c * plane + cell]));
    }
    Ok(Check::new("oracle proposal row gather", got == want, format!("{} rows", cells.len())))
}

/// Every check above, in order.
pub fn run_all() -> Result<Vec<Check>> {
    let mut out = gradients()?;
    out.extend(oracles()?);
    out.push(gather_check()?);
    out.extend(hand_values()?);
    out.extend(motion_buckets()?);
    out.extend(inference_purity()?);
    out.extend(complexity()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_nms_agrees_on_small_example() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(1.0, 1.0, 10.0, 10.0);
        let c = BBox::new(30.0, 30.0, 40.0, 40.0);
        let bs = [(a, 0.5), (b, 0.9), (c, 0.1)];
        assert_eq!(nms_brute(&bs, 0.5), vec![1, 2]);
        assert_eq!(nms(&bs, 0.5), vec![1, 2]);
    }

    #[test]
    fn brute_ap_hand_example() {
        let gts = [GroundTruth { frame_id: 0, bbox: BBox::new(0.0, 0.0, 4.0, 4.0), class_id: 0, bucket: None }];
        let d = |s: f32, x: f32| Detection { frame_id: 0, bbox: BBox::new(x, 0.0, x + 4.0, 4.0), class_id: 0, score: s };
        assert_eq!(ap_brute(&[d(0.9, 20.0), d(0.5, 0.0)], &gts, 0.5), 0.5);
        assert_eq!(ap_brute(&[], &gts, 0.5), 0.0);
    }

    #[test]
    fn cheap_groups_pass() {
        for c in hand_values().unwrap().into_iter().chain(motion_buckets().unwrap()).chain(complexity().unwrap()) {
            assert!(c.passed, "{c}");
        }
        assert!(gather_check().unwrap().passed);
    }
}
