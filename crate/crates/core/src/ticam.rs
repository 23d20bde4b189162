//! Temporal instance classification aggregation: per-proposal classification
//! and instance features from several frames are projected, aggregated by
//! residual multi-head self-attention per modality, fused, and classified.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::BBox;
use crate::numerics::{init_attention, multi_head_attention, AttentionVars, Bound, Graph, Parameters, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TicamConfig {
    pub in_cls: usize,
    pub in_ins: usize,
    pub dim: usize,
    pub heads: usize,
    pub num_classes: usize,
}

pub fn init_params<T: Scalar>(p: &mut Parameters<T>, cfg: &TicamConfig) -> Result<()> {
    if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
        return Err(Error::Config(format!("feature_dim {} not divisible by heads {}", cfg.dim, cfg.heads)));
    }
    p.kaiming("ticam.lp_cls.w", &[cfg.dim, cfg.in_cls])?;
    p.zeros("ticam.lp_cls.b", &[cfg.dim])?;
    p.kaiming("ticam.lp_ins.w", &[cfg.dim, cfg.in_ins])?;
    p.zeros("ticam.lp_ins.b", &[cfg.dim])?;
    init_attention(p, "ticam.att_cls", cfg.dim)?;
    init_attention(p, "ticam.att_ins", cfg.dim)?;
    p.kaiming("ticam.fuse.w", &[cfg.dim, 2 * cfg.dim])?;
    p.zeros("ticam.fuse.b", &[cfg.dim])?;
    p.kaiming("ticam.head.w", &[cfg.num_classes, cfg.dim])?;
    p.zeros("ticam.head.b", &[cfg.num_classes])
}

pub fn is_ticam_param(name: &str) -> bool {
    name.starts_with("ticam.")
}

/// Stacked, projected queries with the `(frame, proposal)` origin of each row.
#[derive(Clone, Debug)]
pub struct QueryBank {
    pub q_cls: Var,
    pub q_ins: Var,
    pub origin: Vec<(usize, usize)>,
    pub m_frames: usize,
}

/// Per-frame input to [`build_queries`]: `cls: [n, C]`, `ins: [n, C']`.
#[derive(Clone, Copy, Debug)]
pub struct FrameRows {
    pub frame_index: usize,
    pub cls: Var,
    pub ins: Var,
}

pub fn build_queries<T: Scalar>(g: &mut Graph<T>, b: &Bound, frames: &[FrameRows]) -> Result<QueryBank> {
    let mut cls = Vec::new();
    let mut ins = Vec::new();
    let mut origin = Vec::new();
    let mut m_frames = 0;
    for fr in frames {
        let n = g.shape(fr.cls)[0];
        if g.shape(fr.ins)[0] != n {
            return Err(shape_err!("frame {}: {} cls rows vs {} ins rows", fr.frame_index, n, g.shape(fr.ins)[0]));
        }
        if n == 0 {
            continue;
        }
        m_frames += 1;
        cls.push(fr.cls);
        ins.push(fr.ins);
        origin.extend((0..n).map(|i| (fr.frame_index, i)));
    }
    if origin.is_empty() {
        return Err(Error::NoProposals);
    }
    let cls = if cls.len() == 1 { cls[0] } else { g.concat_rows(&cls)? };
    let ins = if ins.len() == 1 { ins[0] } else { g.concat_rows(&ins)? };
    let q_cls = g.linear(cls, b.get("ticam.lp_cls.w")?, b.get("ticam.lp_cls.b")?)?;
    let q_ins = g.linear(ins, b.get("ticam.lp_ins.w")?, b.get("ticam.lp_ins.b")?)?;
    Ok(QueryBank { q_cls, q_ins, origin, m_frames })
}

#[derive(Clone, Copy, Debug)]
pub struct Aggregated {
    pub features: Var,
    pub class_logits: Var,
}

/// `a = q + MHA(q, q, q)` per modality, `fused = SiLU(W_f [a_cls, a_ins])`,
/// `logits = W_h fused`.
pub fn aggregate<T: Scalar>(g: &mut Graph<T>, b: &Bound, bank: &QueryBank, heads: usize) -> Result<Aggregated> {
    let att_cls = AttentionVars::bind(b, "ticam.att_cls")?;
    let att_ins = AttentionVars::bind(b, "ticam.att_ins")?;
    let m_cls = multi_head_attention(g, bank.q_cls, bank.q_cls, bank.q_cls, &att_cls, heads)?;
    let a_cls = g.add(bank.q_cls, m_cls)?;
    let m_ins = multi_head_attention(g, bank.q_ins, bank.q_ins, bank.q_ins, &att_ins, heads)?;
    let a_ins = g.add(bank.q_ins, m_ins)?;
    let cat = g.concat_cols(&[a_cls, a_ins])?;
    let fused = g.linear(cat, b.get("ticam.fuse.w")?, b.get("ticam.fuse.b")?)?;
    let features = g.silu(fused)?;
    let class_logits = g.linear(features, b.get("ticam.head.w")?, b.get("ticam.head.b")?)?;
    Ok(Aggregated { features, class_logits })
}

/// How the final confidence combines FPSM and aggregated classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreMode {
    /// `objectness · p_class`: the aggregated class probability replaces the
    /// single-frame class factor.
    Replace,
    /// `fpsm_score · p_class`.
    Multiply,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalDetection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f32,
}

/// Per-proposal metadata needed to emit final detections for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameProposals {
    pub frame_index: usize,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f32>,
    pub objectness: Vec<f32>,
}

/// One detection per aggregated row, grouped by frame in `sets` order.
pub fn final_detections(
    sets: &[FrameProposals],
    origin: &[(usize, usize)],
    logits: &Tensor,
    mode: ScoreMode,
) -> Result<Vec<Vec<FinalDetection>>> {
    if logits.rank() != 2 || logits.shape()[0] != origin.len() {
        return Err(shape_err!("{} origins for logits {:?}", origin.len(), logits.shape()));
    }
    let k = logits.shape()[1];
    let mut out: Vec<Vec<FinalDetection>> = vec![Vec::new(); sets.len()];
    for (r, &(frame, i)) in origin.iter().enumerate() {
        let si = sets
            .iter()
            .position(|s| s.frame_index == frame)
            .ok_or_else(|| Error::InvalidArgument(format!("origin frame {frame} has no proposal set")))?;
        let set = &sets[si];
        if i >= set.boxes.len() {
            return Err(Error::InvalidArgument(format!("origin ({frame}, {i}) beyond {} proposals", set.boxes.len())));
        }
        let row = logits.row(r);
        let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let z: f32 = row.iter().map(|&v| (v - mx).exp()).sum();
        let (class_id, p) = (0..k)
            .map(|c| (c, (row[c] - mx).exp() / z))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap_or((0, 0.0));
        let base = match mode {
            ScoreMode::Replace => set.objectness[i],
            ScoreMode::Multiply => set.scores[i],
        };
        out[si].push(FinalDetection { bbox: set.boxes[i], class_id, score: (base * p).clamp(0.0, 1.0) });
    }
    Ok(out)
}

/// Mean cross-entropy over rows with a target class; rows with `None` are
/// ignored. Zero when no row is labelled.
pub fn classification_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let [rows, k] = s[..] else {
        return Err(shape_err!("logits must be [rows, K], got {s:?}"));
    };
    if targets.len() != rows {
        return Err(shape_err!("{} targets for {rows} rows", targets.len()));
    }
    let x = g.value(logits).data();
    let labelled = targets.iter().flatten().count();
    let mut grad = vec![T::zero(); rows * k];
    let mut total = 0.0;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= k {
            return Err(Error::InvalidArgument(format!("target class {t} out of range [0, {k})")));
        }
        let row: Vec<f64> = x[r * k..(r + 1) * k].iter().map(|v| v.as_f64()).collect();
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[t];
        for c in 0..k {
            let p = (row[c] - lse).exp();
            grad[r * k + c] = T::from_f64((p - if c == t { 1.0 } else { 0.0 }) / labelled as f64);
        }
    }
    let value = if labelled == 0 { 0.0 } else { total / labelled as f64 };
    g.loss("classification_loss", &[logits], T::from_f64(value), vec![Some(grad)])
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{flops, grad_check, score_macs};

    fn cfg() -> TicamConfig {
        TicamConfig { in_cls: 6, in_ins: 5, dim: 8, heads: 2, num_classes: 4 }
    }

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn params(seed: u64) -> Parameters<f64> {
        let mut p = Parameters::new(seed);
        init_params(&mut p, &cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let names: Vec<String> = p.names().filter(|n| n.ends_with(".b")).map(str::to_owned).collect();
        for n in names {
            let s = p.get(&n).unwrap().shape().to_vec();
            *p.get_mut(&n).unwrap() = rand_t(&s, &mut rng);
        }
        p
    }

    fn run(p: &Parameters<f64>, frames: &[(Tensor<f64>, Tensor<f64>)]) -> (Tensor<f64>, Vec<(usize, usize)>, usize) {
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let rows: Vec<FrameRows> = frames
            .iter()
            .enumerate()
            .map(|(i, (c, s))| FrameRows { frame_index: i, cls: g.constant(c.clone()), ins: g.constant(s.clone()) })
            .collect();
        let bank = build_queries(&mut g, &b, &rows).unwrap();
        let agg = aggregate(&mut g, &b, &bank, 2).unwrap();
        (g.value(agg.class_logits).clone(), bank.origin, bank.m_frames)
    }

    #[test]
    fn bank_counting_and_identity_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = params(1);
        let (l, origin, m) = run(&p, &[(rand_t(&[1, 6], &mut rng), rand_t(&[1, 5], &mut rng))]);
        assert_eq!((l.shape()[0], origin.len(), m), (1, 1, 1));
        let frames: Vec<_> = (0..3).map(|_| (rand_t(&[4, 6], &mut rng), rand_t(&[4, 5], &mut rng))).collect();
        let (l, origin, m) = run(&p, &frames);
        assert_eq!((l.shape()[0], m), (12, 3));
        assert_eq!(origin[5], (1, 1));

        let mut q = Parameters::<f64>::new(0);
        q.insert("ticam.lp_cls.w", Tensor::from_fn(&[6, 6], |i| if i % 7 == 0 { 1.0 } else { 0.0 })).unwrap();
        q.zeros("ticam.lp_cls.b", &[6]).unwrap();
        q.kaiming("ticam.lp_ins.w", &[6, 5]).unwrap();
        q.zeros("ticam.lp_ins.b", &[6]).unwrap();
        let mut g = Graph::new();
        let b = q.bind(&mut g, |_| false);
        let x = rand_t(&[3, 6], &mut rng);
        let fr = FrameRows { frame_index: 0, cls: g.constant(x.clone()), ins: g.constant(rand_t(&[3, 5], &mut rng)) };
        let bank = build_queries(&mut g, &b, &[fr]).unwrap();
        assert_eq!(g.value(bank.q_cls), &x);
    }

    #[test]
    fn empty_clip_is_an_error() {
        let p = params(1);
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let fr = FrameRows { frame_index: 0, cls: g.constant(Tensor::zeros(&[0, 6])), ins: g.constant(Tensor::zeros(&[0, 5])) };
        assert!(matches!(build_queries(&mut g, &b, &[fr]), Err(Error::NoProposals)));
    }

    #[test]
    fn single_row_bank_is_head_of_fused_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(2);
        let (c, s) = (rand_t(&[1, 6], &mut rng), rand_t(&[1, 5], &mut rng));
        let (logits, _, _) = run(&p, &[(c.clone(), s.clone())]);
        // with one key the attention output is the projected value row
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let lin = |g: &mut Graph<f64>, x: Var, n: &str| g.linear(x, b.get(&format!("{n}.w")).unwrap(), b.get(&format!("{n}.b")).unwrap()).unwrap();
        let cv = g.constant(c);
        let sv = g.constant(s);
        let qc = lin(&mut g, cv, "ticam.lp_cls");
        let qi = lin(&mut g, sv, "ticam.lp_ins");
        let vc = lin(&mut g, qc, "ticam.att_cls.v");
        let mc = lin(&mut g, vc, "ticam.att_cls.o");
        let vi = lin(&mut g, qi, "ticam.att_ins.v");
        let mi = lin(&mut g, vi, "ticam.att_ins.o");
        let ac = g.add(qc, mc).unwrap();
        let ai = g.add(qi, mi).unwrap();
        let cat = g.concat_cols(&[ac, ai]).unwrap();
        let f = lin(&mut g, cat, "ticam.fuse");
        let f = g.silu(f).unwrap();
        let out = lin(&mut g, f, "ticam.head");
        assert!(g.value(out).max_abs_diff(&logits) < 1e-12);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = params(3);
        let c = rand_t(&[5, 6], &mut rng);
        let s = rand_t(&[5, 5], &mut rng);
        let (l, _, _) = run(&p, &[(c.clone(), s.clone())]);
        let perm = [3, 0, 4, 1, 2];
        let pc = Tensor::from_fn(&[5, 6], |i| c.data()[perm[i / 6] * 6 + i % 6]);
        let ps = Tensor::from_fn(&[5, 5], |i| s.data()[perm[i / 5] * 5 + i % 5]);
        let (lp, _, _) = run(&p, &[(pc, ps)]);
        for (r, &src) in perm.iter().enumerate() {
            for (a, b) in lp.row(r).iter().zip(l.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_instance_queries_match_zeroed_pathway() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = params(4);
        for n in ["ticam.att_ins.q.b", "ticam.att_ins.k.b", "ticam.att_ins.v.b", "ticam.att_ins.o.b"] {
            *p.get_mut(n).unwrap() = Tensor::zeros(&[8]);
        }
        let c = rand_t(&[3, 6], &mut rng);
        let mut zeroed = p.clone();
        *zeroed.get_mut("ticam.lp_ins.w").unwrap() = Tensor::zeros(&[8, 5]);
        *zeroed.get_mut("ticam.lp_ins.b").unwrap() = Tensor::zeros(&[8]);
        let (a, _, _) = run(&zeroed, &[(c.clone(), rand_t(&[3, 5], &mut rng))]);
        *p.get_mut("ticam.lp_ins.b").unwrap() = Tensor::zeros(&[8]);
        let (b, _, _) = run(&p, &[(c, Tensor::zeros(&[3, 5]))]);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn final_detection_examples() {
        let set = FrameProposals {
            frame_index: 7,
            boxes: vec![BBox::new(0.0, 0.0, 5.0, 5.0)],
            scores: vec![0.4],
            objectness: vec![1.0],
        };
        let logits = Tensor::new(vec![1, 5], vec![-30.0, -30.0, -30.0, 30.0, -30.0]).unwrap();
        let d = final_detections(&[set.clone()], &[(7, 0)], &logits, ScoreMode::Replace).unwrap();
        assert_eq!(d[0][0].class_id, 3);
        assert!((d[0][0].score - 1.0).abs() < 1e-6);
        let d = final_detections(&[set.clone()], &[(7, 0)], &logits, ScoreMode::Multiply).unwrap();
        assert!((d[0][0].score - 0.4).abs() < 1e-6);
        assert!(final_detections(&[set.clone()], &[(7, 1)], &logits, ScoreMode::Replace).is_err());
        assert!(final_detections(&[set], &[(8, 0)], &logits, ScoreMode::Replace).is_err());
    }

    #[test]
    fn attention_cost_is_quadratic_in_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = params(5);
        let count = |n: usize, rng: &mut ChaCha8Rng| {
            let frames: Vec<_> = (0..3).map(|_| (rand_t(&[n, 6], rng), rand_t(&[n, 5], rng))).collect();
            flops::measure(|| run(&p, &frames)).1["attention_scores"]
        };
        let (a, b) = (count(5, &mut rng), count(10, &mut rng));
        assert_eq!(b, 4 * a);
        assert_eq!(a, 2 * score_macs(15, 15, 8));
    }

    #[test]
    fn gradients_through_aggregation_and_loss() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = params(seed);
            let names: Vec<String> = p.names().map(str::to_owned).collect();
            let mut inputs = vec![rand_t(&[3, 6], &mut rng), rand_t(&[3, 5], &mut rng)];
            inputs.extend(names.iter().map(|n| p.get(n).unwrap().clone()));
            let err = grad_check(
                |g, v| {
                    let b = Bound::from_vars(names.iter().map(String::as_str).zip(v[2..].iter().copied()));
                    let fr = FrameRows { frame_index: 0, cls: v[0], ins: v[1] };
                    let bank = build_queries(g, &b, &[fr])?;
                    let agg = aggregate(g, &b, &bank, 2)?;
                    classification_loss(g, agg.class_logits, &[Some(1), None, Some(3)])
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
