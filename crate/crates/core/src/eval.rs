//! AP/mAP, motion-bucketed mAP, pooled-feature variance and a small
//! FLOP/latency benchmark harness.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_raw, BBox};
use crate::numerics::flops;
use crate::synthdata::MotionSpeed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_id: usize,
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frame_id: usize,
    pub bbox: BBox,
    pub class_id: usize,
    pub bucket: Option<MotionSpeed>,
}

/// Greedy matching in descending score order (ties by input order): each
/// detection takes the unmatched same-frame ground truth of highest IoU if
/// that IoU reaches `thr`. Returns, per detection in input order, the index
/// of the matched ground truth.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut by_frame: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_frame.entry(g.frame_id).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for &gi in by_frame.get(&d.frame_id).map(Vec::as_slice).unwrap_or(&[]) {
            if taken[gi] {
                continue;
            }
            let v = iou_raw(&d.bbox, &gts[gi].bbox);
            if v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            out[i] = Some(gi);
        }
    }
    out
}

/// All-point interpolated AP from `(score, is_tp)` pairs and the positive count.
pub fn ap_from_flags(flags: &[(f32, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| flags[b].0.total_cmp(&flags[a].0).then(a.cmp(&b)));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut pr = Vec::with_capacity(flags.len());
    for i in order {
        if flags[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        pr.push((tp as f64 / (tp + fp) as f64, tp as f64 / n_gt as f64));
    }
    for k in (0..pr.len().saturating_sub(1)).rev() {
        pr[k].0 = pr[k].0.max(pr[k + 1].0);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &(p, r) in &pr {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

/// AP of one class; `dets` and `gts` must already be restricted to it.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> f64 {
    let m = match_detections(dets, gts, iou_thr);
    let flags: Vec<(f32, bool)> = dets.iter().zip(&m).map(|(d, m)| (d.score, m.is_some())).collect();
    ap_from_flags(&flags, gts.len())
}

pub fn thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// `ap[class][t]`; `None` for classes without ground truth.
    pub ap: Vec<Option<Vec<f64>>>,
    pub map50: f64,
    pub map75: f64,
    pub map50_95: f64,
    pub bucket_map50: BTreeMap<MotionSpeed, f64>,
    pub num_detections: usize,
    pub num_gts: usize,
    pub gts_per_bucket: BTreeMap<MotionSpeed, usize>,
}

fn split_by_class<T: Copy>(xs: &[T], class: impl Fn(&T) -> usize, k: usize) -> Vec<Vec<T>> {
    let mut out = vec![Vec::new(); k];
    for x in xs {
        if let Some(v) = out.get_mut(class(x)) {
            v.push(*x);
        }
    }
    out
}

/// Per-class AP at 0.50:0.05:0.95 and their unweighted class means, plus
/// bucketed mAP50.
pub fn map_at(dets: &[Detection], gts: &[GroundTruth], num_classes: usize) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::InvalidArgument("no ground truth to evaluate against".into()));
    }
    let th = thresholds();
    let dc = split_by_class(dets, |d| d.class_id, num_classes);
    let gc = split_by_class(gts, |g| g.class_id, num_classes);
    let ap: Vec<Option<Vec<f64>>> = (0..num_classes)
        .map(|c| (!gc[c].is_empty()).then(|| th.iter().map(|&t| average_precision(&dc[c], &gc[c], t)).collect()))
        .collect();
    let present: Vec<&Vec<f64>> = ap.iter().flatten().collect();
    let mean_at = |i: usize| present.iter().map(|v| v[i]).sum::<f64>() / present.len() as f64;
    let map50_95 = present.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).sum::<f64>() / present.len() as f64;
    let mut gts_per_bucket = BTreeMap::new();
    for g in gts {
        if let Some(b) = g.bucket {
            *gts_per_bucket.entry(b).or_insert(0) += 1;
        }
    }
    Ok(EvalReport {
        map50: mean_at(0),
        map75: mean_at(5),
        map50_95,
        bucket_map50: bucket_map(dets, gts, num_classes),
        thresholds: th,
        ap,
        num_detections: dets.len(),
        num_gts: gts.len(),
        gts_per_bucket,
    })
}

/// mAP50 per motion bucket. Detections are matched once against all ground
/// truth; a detection matched to another bucket's object is ignored, an
/// unmatched one counts as a false positive in every bucket.
pub fn bucket_map(dets: &[Detection], gts: &[GroundTruth], num_classes: usize) -> BTreeMap<MotionSpeed, f64> {
    let mut out = BTreeMap::new();
    let dc = split_by_class(dets, |d| d.class_id, num_classes);
    let gc = split_by_class(gts, |g| g.class_id, num_classes);
    let matches: Vec<Vec<Option<usize>>> = (0..num_classes).map(|c| match_detections(&dc[c], &gc[c], 0.5)).collect();
    for bucket in crate::synthdata::SPEEDS {
        let mut aps = Vec::new();
        for c in 0..num_classes {
            let n_gt = gc[c].iter().filter(|g| g.bucket == Some(bucket)).count();
            if n_gt == 0 {
                continue;
            }
            let flags: Vec<(f32, bool)> = dc[c]
                .iter()
                .zip(&matches[c])
                .filter_map(|(d, m)| match m {
                    Some(gi) if gc[c][*gi].bucket == Some(bucket) => Some((d.score, true)),
                    Some(_) => None,
                    None => Some((d.score, false)),
                })
                .collect();
            aps.push(ap_from_flags(&flags, n_gt));
        }
        if !aps.is_empty() {
            out.insert(bucket, aps.iter().sum::<f64>() / aps.len() as f64);
        }
    }
    out
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub intra: f64,
    pub inter: f64,
    pub ratio: f64,
}

/// `intra` = mean squared distance of a sample to its class centroid,
/// `inter` = mean squared distance between distinct class centroids.
pub fn feature_variance_report(groups: &[Vec<Vec<f64>>]) -> Result<VarianceReport> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!("variance report needs 2 classes, got {}", groups.len())));
    }
    let dim = groups[0].first().map(Vec::len).unwrap_or(0);
    let mut centroids = Vec::with_capacity(groups.len());
    let (mut intra, mut n) = (0.0, 0usize);
    for (c, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(Error::InvalidArgument(format!("class group {c} has {} samples, need 2", g.len())));
        }
        if g.iter().any(|v| v.len() != dim) {
            return Err(Error::InvalidArgument("feature dimensions differ".into()));
        }
        let mut mu = vec![0.0; dim];
        for v in g {
            mu.iter_mut().zip(v).for_each(|(m, x)| *m += x);
        }
        mu.iter_mut().for_each(|m| *m /= g.len() as f64);
        for v in g {
            intra += v.iter().zip(&mu).map(|(x, m)| (x - m).powi(2)).sum::<f64>();
        }
        n += g.len();
        centroids.push(mu);
    }
    let intra = intra / n as f64;
    let (mut inter, mut pairs) = (0.0, 0usize);
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter += centroids[i].iter().zip(&centroids[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            pairs += 1;
        }
    }
    let inter = inter / pairs as f64;
    if inter <= 0.0 {
        return Err(Error::NonFinite("variance ratio: all class centroids coincide".into()));
    }
    Ok(VarianceReport { intra, inter, ratio: intra / inter })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub stage: String,
    pub size: usize,
    pub flops: u64,
    pub median_ms: f64,
}

/// Runs `f(size)` `warmup` times untimed, then `repeats` times timed. FLOPs
/// are the multiply-accumulates counted during one run.
pub fn benchmark(stage: &str, sizes: &[usize], repeats: usize, warmup: usize, mut f: impl FnMut(usize)) -> Result<Vec<BenchRow>> {
    if warmup < 3 || repeats == 0 {
        return Err(Error::InvalidArgument(format!("benchmark needs warmup >= 3 and repeats >= 1, got {warmup}/{repeats}")));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        for _ in 0..warmup {
            f(size);
        }
        let mut times = Vec::with_capacity(repeats);
        let mut counted = 0;
        for r in 0..repeats {
            let t0 = Instant::now();
            let ((), counts) = flops::measure(|| f(size));
            times.push(t0.elapsed().as_secs_f64() * 1e3);
            if r == 0 {
                counted = counts.values().sum();
            }
        }
        rows.push(BenchRow { stage: stage.to_owned(), size, flops: counted, median_ms: median(&mut times) });
    }
    Ok(rows)
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut s = String::from("stage,size,flops,median_ms\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.4}\n", r.stage, r.size, r.flops, r.median_ms));
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn gt(frame_id: usize, x: f32) -> GroundTruth {
        GroundTruth { frame_id, bbox: BBox::new(x, 0.0, x + 10.0, 10.0), class_id: 0, bucket: Some(MotionSpeed::Slow) }
    }

    fn det(frame_id: usize, x: f32, score: f32) -> Detection {
        Detection { frame_id, bbox: BBox::new(x, 0.0, x + 10.0, 10.0), class_id: 0, score }
    }

    #[test]
    fn ap_examples() {
        let gts = [gt(0, 0.0), gt(1, 0.0)];
        assert_eq!(average_precision(&[det(0, 0.0, 0.9), det(1, 0.0, 0.5)], &gts, 0.5), 1.0);
        assert_eq!(average_precision(&[], &gts, 0.5), 0.0);
        let dets = [det(0, 0.0, 0.9), det(0, 40.0, 0.8), det(1, 0.0, 0.7)];
        assert!((average_precision(&dets, &gts, 0.5) - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn map_perfect_and_errors() {
        let gts = [gt(0, 0.0), gt(1, 20.0)];
        let r = map_at(&[det(0, 0.0, 0.4), det(1, 20.0, 0.3)], &gts, 3).unwrap();
        assert_eq!((r.map50, r.map75, r.map50_95), (1.0, 1.0, 1.0));
        assert_eq!(r.bucket_map50.get(&MotionSpeed::Slow), Some(&1.0));
        assert!(r.bucket_map50.get(&MotionSpeed::Fast).is_none());
        assert!(map_at(&[], &[], 3).is_err());
    }

    #[test]
    fn crafted_two_bucket_case() {
        let mut g = vec![gt(0, 0.0), gt(0, 30.0)];
        g[1].bucket = Some(MotionSpeed::Fast);
        // FP(0.95), TP slow (0.9), TP fast (0.6)
        let dets = [det(0, 60.0, 0.95), det(0, 0.0, 0.9), det(0, 30.0, 0.6)];
        let b = bucket_map(&dets, &g, 1);
        // slow: [FP, TP] over 1 GT -> 0.5; fast: [FP, TP] (slow TP ignored) -> 0.5
        assert!((b[&MotionSpeed::Slow] - 0.5).abs() < 1e-12);
        assert!((b[&MotionSpeed::Fast] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn variance_examples() {
        let same = vec![vec![vec![1.0, 2.0]; 3], vec![vec![4.0, 0.0]; 2]];
        let r = feature_variance_report(&same).unwrap();
        assert_eq!((r.intra, r.ratio), (0.0, 0.0));
        let a = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 10.0, v[1] + 3.0]).collect();
        let r = feature_variance_report(&[a, b]).unwrap();
        assert_eq!(r.intra, 1.0);
        assert_eq!(r.inter, 109.0);
        assert!(feature_variance_report(&[vec![vec![1.0]], vec![vec![1.0], vec![2.0]]]).is_err());
    }

    #[test]
    fn benchmark_single_repeat() {
        let rows = benchmark("noop", &[1, 2], 1, 3, |_| {}).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.flops == 0));
        assert!(benchmark("noop", &[1], 1, 2, |_| {}).is_err());
        assert_eq!(median(&mut [3.0]), 3.0);
    }

    proptest! {
        #[test]
        fn ap_non_increasing_in_threshold(
            boxes in proptest::collection::vec((0usize..3, 0f32..40.0, 0f32..40.0, 0f32..1.0), 1..12),
            gboxes in proptest::collection::vec((0usize..3, 0f32..40.0, 0f32..40.0), 1..8),
        ) {
            let dets: Vec<Detection> = boxes.iter().map(|&(f, x, y, s)| Detection { frame_id: f, bbox: BBox::new(x, y, x + 12.0, y + 9.0), class_id: 0, score: s }).collect();
            let gts: Vec<GroundTruth> = gboxes.iter().map(|&(f, x, y)| GroundTruth { frame_id: f, bbox: BBox::new(x, y, x + 11.0, y + 10.0), class_id: 0, bucket: None }).collect();
            let mut prev = f64::INFINITY;
            for t in thresholds() {
                let ap = average_precision(&dets, &gts, t);
                prop_assert!((0.0..=1.0).contains(&ap));
                prop_assert!(ap <= prev + 1e-12);
                prev = ap;
            }
        }

        #[test]
        fn map_invariant_under_score_rescaling(
            boxes in proptest::collection::vec((0usize..3, 0f32..40.0, 0f32..1.0, 0usize..2), 1..12),
            gboxes in proptest::collection::vec((0usize..3, 0f32..40.0, 0usize..2), 1..8),
            scale in 0.01f32..1.0,
        ) {
            let dets: Vec<Detection> = boxes.iter().map(|&(f, x, s, c)| Detection { frame_id: f, bbox: BBox::new(x, 0.0, x + 12.0, 9.0), class_id: c, score: s }).collect();
            let gts: Vec<GroundTruth> = gboxes.iter().map(|&(f, x, c)| GroundTruth { frame_id: f, bbox: BBox::new(x, 0.0, x + 11.0, 10.0), class_id: c, bucket: None }).collect();
            let scaled: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score * scale, ..*d }).collect();
            let (a, b) = (map_at(&dets, &gts, 2).unwrap(), map_at(&scaled, &gts, 2).unwrap());
            prop_assert_eq!(a.map50, b.map50);
            prop_assert_eq!(a.map50_95, b.map50_95);
        }
    }
}
