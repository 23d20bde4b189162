//! Training-only mask branch: RoIAlign over instance features, a small FCN
//! predicting per-class masks, class-aware filtering, target matching and
//! the mask loss.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::detector::{apply_conv, Level};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{iou_raw, mask_iou, BBox, BinaryMask};
use crate::ifem::InstanceFeatureMap;
use crate::numerics::{Bound, Graph, Parameters, Scalar, Tensor, Var};

const SAMPLES: usize = 2;
const CLAMP: f64 = 1e-7;
const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskHeadConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub roi_size: usize,
    pub level: Level,
    pub class_agnostic: bool,
}

impl MaskHeadConfig {
    pub fn out_channels(&self) -> usize {
        if self.class_agnostic {
            1
        } else {
            self.num_classes
        }
    }

    pub fn mask_size(&self) -> usize {
        2 * self.roi_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskLossKind {
    Bce,
    Dice,
}

pub fn init_params<T: Scalar>(p: &mut Parameters<T>, cfg: &MaskHeadConfig) -> Result<()> {
    let mut cin = cfg.in_channels;
    for i in 1..=4 {
        p.kaiming(&format!("mask.conv{i}.w"), &[cfg.hidden, cin, 3, 3])?;
        p.zeros(&format!("mask.conv{i}.b"), &[cfg.hidden])?;
        cin = cfg.hidden;
    }
    p.kaiming("mask.out.w", &[cfg.out_channels(), cfg.hidden, 1, 1])?;
    p.zeros("mask.out.b", &[cfg.out_channels()])
}

pub fn is_mask_param(name: &str) -> bool {
    name.starts_with("mask.")
}

thread_local! {
    static MASK_TENSORS_BUILT: Cell<usize> = const { Cell::new(0) };
}

/// Number of mask predictions built on this thread so far.
pub fn mask_tensors_built() -> usize {
    MASK_TENSORS_BUILT.with(Cell::get)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskTensor {
    logits: Tensor,
}

impl MaskTensor {
    pub fn new(logits: Tensor) -> Result<Self> {
        if logits.rank() != 4 {
            return Err(shape_err!("mask logits must be [N,C,H,W], got {:?}", logits.shape()));
        }
        MASK_TENSORS_BUILT.with(|c| c.set(c.get() + 1));
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Image-space boxes → feature-space rois; returns rois and the indices of
/// boxes that survived (degenerate ones are skipped with a warning).
pub fn rois_for(boxes: &[BBox], stride: usize) -> (Vec<[f64; 4]>, Vec<usize>) {
    let s = stride as f64;
    let mut rois = Vec::with_capacity(boxes.len());
    let mut kept = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let r = b.to_f64().map(|v| v / s);
        if r[2] > r[0] && r[3] > r[1] && r.iter().all(|v| v.is_finite()) {
            rois.push(r);
            kept.push(i);
        } else {
            log::warn!("skipping degenerate roi {i} {:?} at stride {stride}", b);
        }
    }
    (rois, kept)
}

/// `f_ins: [C',h,w]` → `[N,C',R,R]` plus the indices of pooled boxes.
pub fn pool_var<T: Scalar>(g: &mut Graph<T>, f_ins: Var, boxes: &[BBox], stride: usize, roi_size: usize) -> Result<(Var, Vec<usize>)> {
    let (rois, kept) = rois_for(boxes, stride);
    if rois.is_empty() {
        let c = g.shape(f_ins)[0];
        return Ok((g.constant(Tensor::zeros(&[0, c, roi_size, roi_size])), kept));
    }
    Ok((g.roi_align(f_ins, &rois, roi_size, roi_size, SAMPLES)?, kept))
}

pub fn pool_instance_features(f_ins: &InstanceFeatureMap, boxes: &[BBox], roi_size: usize) -> Result<(Tensor, Vec<usize>)> {
    let mut g = Graph::new();
    let x = g.constant(f_ins.tensor.clone());
    let (y, kept) = pool_var(&mut g, x, boxes, f_ins.source_level.stride(), roi_size)?;
    Ok((g.value(y).clone(), kept))
}

/// `4×(conv3×3 + ReLU) → bilinear ×2 → conv1×1`, logits `[N,K,2R,2R]`.
pub fn predict_var<T: Scalar>(g: &mut Graph<T>, b: &Bound, pooled: Var) -> Result<Var> {
    let s = g.shape(pooled).to_vec();
    if s.len() != 4 {
        return Err(shape_err!("pooled features must be [N,C,R,R], got {s:?}"));
    }
    MASK_TENSORS_BUILT.with(|c| c.set(c.get() + 1));
    let mut x = pooled;
    for i in 1..=4 {
        x = apply_conv(g, b, &format!("mask.conv{i}"), x)?;
        x = g.relu(x)?;
    }
    x = g.bilinear_resize(x, 2 * s[2], 2 * s[3])?;
    apply_conv(g, b, "mask.out", x)
}

pub fn predict_masks(pooled: &Tensor, params: &Parameters) -> Result<MaskTensor> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let x = g.constant(pooled.clone());
    let y = predict_var(&mut g, &b, x)?;
    MASK_TENSORS_BUILT.with(|c| c.set(c.get() - 1));
    MaskTensor::new(g.value(y).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilteredMasks {
    pub masks: Vec<Tensor>,
    pub classes: Vec<usize>,
}

/// `m'_i = M[i, t_i]`; a single-channel (class-agnostic) tensor always
/// yields channel 0.
pub fn filter_by_class(masks: &MaskTensor, classes: &[usize]) -> Result<FilteredMasks> {
    let s = masks.logits.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    if classes.len() != n {
        return Err(shape_err!("{} classes for {n} masks", classes.len()));
    }
    let mut out = Vec::with_capacity(n);
    for (i, &t) in classes.iter().enumerate() {
        let ch = channel_for(t, c)?;
        let off = (i * c + ch) * plane;
        out.push(Tensor::new(vec![s[2], s[3]], masks.logits.data()[off..off + plane].to_vec())?);
    }
    Ok(FilteredMasks { masks: out, classes: classes.to_vec() })
}

pub fn channel_for(class_id: usize, channels: usize) -> Result<usize> {
    match channels {
        1 => Ok(0),
        c if class_id < c => Ok(class_id),
        c => Err(Error::InvalidArgument(format!("class {class_id} out of range [0, {c})"))),
    }
}

/// Bilinearly resizes a `[Hm,Wm]` probability map into `bbox` on a
/// `height × width` canvas and binarizes at 0.5.
pub fn paste_mask(prob: &Tensor, bbox: &BBox, height: usize, width: usize) -> BinaryMask {
    let (mh, mw) = (prob.shape()[0], prob.shape()[1]);
    let mut out = BinaryMask::empty(height, width);
    let (bw, bh) = (bbox.width() as f64, bbox.height() as f64);
    if !(bw > 0.0 && bh > 0.0) {
        return out;
    }
    let c0 = (bbox.x1.floor().max(0.0) as usize).min(width);
    let c1 = (bbox.x2.ceil().max(0.0) as usize).min(width);
    let r0 = (bbox.y1.floor().max(0.0) as usize).min(height);
    let r1 = (bbox.y2.ceil().max(0.0) as usize).min(height);
    for r in r0..r1 {
        let cy = r as f64 + 0.5;
        if cy < bbox.y1 as f64 || cy > bbox.y2 as f64 {
            continue;
        }
        let v = ((cy - bbox.y1 as f64) / bh * mh as f64 - 0.5).clamp(0.0, (mh - 1) as f64);
        for c in c0..c1 {
            let cx = c as f64 + 0.5;
            if cx < bbox.x1 as f64 || cx > bbox.x2 as f64 {
                continue;
            }
            let u = ((cx - bbox.x1 as f64) / bw * mw as f64 - 0.5).clamp(0.0, (mw - 1) as f64);
            if sample(prob.data(), mh, mw, v, u) > 0.5 {
                out.set(r, c, true);
            }
        }
    }
    out
}

fn sample(d: &[f32], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| d[r * w + c] as f64;
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// For each prediction, the GT index with the highest mask IoU after pasting
/// (ties go to the lower index); predictions with no overlap fall back to
/// box IoU. Empty when there is no GT.
pub fn match_targets(filtered: &FilteredMasks, boxes: &[BBox], gt_masks: &[BinaryMask], gt_boxes: &[BBox]) -> Result<Vec<(usize, usize)>> {
    if filtered.masks.len() != boxes.len() || gt_masks.len() != gt_boxes.len() {
        return Err(shape_err!("{} masks for {} boxes, {} GT masks for {} GT boxes", filtered.masks.len(), boxes.len(), gt_masks.len(), gt_boxes.len()));
    }
    if gt_masks.is_empty() {
        return Ok(Vec::new());
    }
    let (h, w) = (gt_masks[0].height(), gt_masks[0].width());
    let mut pairs = Vec::with_capacity(boxes.len());
    for (i, (logits, bbox)) in filtered.masks.iter().zip(boxes).enumerate() {
        let prob = logits.map(|v| 1.0 / (1.0 + (-v).exp()));
        let pasted = paste_mask(&prob, bbox, h, w);
        let by_mask = argmax(gt_masks.iter().map(|g| mask_iou(&pasted, g)).collect::<Result<Vec<_>>>()?);
        let j = match by_mask {
            Some((j, v)) if v > 0.0 => j,
            _ => argmax(gt_boxes.iter().map(|g| iou_raw(bbox, g)).collect()).map_or(0, |(j, _)| j),
        };
        pairs.push((i, j));
    }
    Ok(pairs)
}

fn argmax(v: Vec<f64>) -> Option<(usize, f64)> {
    v.into_iter().enumerate().fold(None, |best, (i, x)| match best {
        Some((_, b)) if b >= x => best,
        _ => Some((i, x)),
    })
}

/// The GT mask cropped to the pixel span of its box, as a `{0,1}` map.
pub fn gt_crop(mask: &BinaryMask, bbox: &BBox) -> Result<Tensor> {
    let (h, w) = (mask.height(), mask.width());
    let c0 = (bbox.x1.floor().max(0.0) as usize).min(w);
    let c1 = (bbox.x2.ceil().max(0.0) as usize).min(w);
    let r0 = (bbox.y1.floor().max(0.0) as usize).min(h);
    let r1 = (bbox.y2.ceil().max(0.0) as usize).min(h);
    if c1 <= c0 || r1 <= r0 {
        return Err(Error::DegenerateBox { x1: bbox.x1, y1: bbox.y1, x2: bbox.x2, y2: bbox.y2 });
    }
    let mut out = Vec::with_capacity((r1 - r0) * (c1 - c0));
    for r in r0..r1 {
        for c in c0..c1 {
            out.push(if mask.get(r, c) { 1.0 } else { 0.0 });
        }
    }
    Tensor::new(vec![r1 - r0, c1 - c0], out)
}

/// Loss value for one pair and its gradient with respect to the logits.
fn pair_terms(logits: &[f64], target: &[f64], kind: MaskLossKind) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    match kind {
        MaskLossKind::Bce => {
            let mut total = 0.0;
            let grad = logits
                .iter()
                .zip(target)
                .map(|(&x, &t)| {
                    let raw = sig(x);
                    let p = raw.clamp(CLAMP, 1.0 - CLAMP);
                    total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
                    if raw == p {
                        (p - t) / n
                    } else {
                        0.0
                    }
                })
                .collect();
            (total / n, grad)
        }
        MaskLossKind::Dice => {
            let p: Vec<f64> = logits.iter().map(|&x| sig(x)).collect();
            let inter: f64 = p.iter().zip(target).map(|(a, b)| a * b).sum();
            let s = p.iter().sum::<f64>() + target.iter().sum::<f64>() + DICE_SMOOTH;
            let num = 2.0 * inter + DICE_SMOOTH;
            let grad = p.iter().zip(target).map(|(&pk, &tk)| -(2.0 * tk * s - num) / (s * s) * pk * (1.0 - pk)).collect();
            (1.0 - num / s, grad)
        }
    }
}

/// `(1/N')·Σ loss(m_i, g_i)` over `(logits, target)` pairs; 0 when empty.
pub fn mask_loss(pairs: &[(Tensor, Tensor)], kind: MaskLossKind) -> Result<f64> {
    let mut total = 0.0;
    for (m, t) in pairs {
        if m.shape() != t.shape() {
            return Err(shape_err!("mask {:?} vs target {:?}", m.shape(), t.shape()));
        }
        let x: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
        total += pair_terms(&x, &y, kind).0;
    }
    Ok(if pairs.is_empty() { 0.0 } else { total / pairs.len() as f64 })
}

/// Graph form: `selected: [N,Hm,Wm]` logits; each matched plane is resized to
/// its GT box size and compared with the cropped GT mask.
pub fn mask_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    selected: Var,
    pairs: &[(usize, usize)],
    gt_masks: &[BinaryMask],
    gt_boxes: &[BBox],
    kind: MaskLossKind,
) -> Result<Var> {
    let mut xs = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let t = gt_crop(&gt_masks[j], &gt_boxes[j])?;
        let plane = g.index_rows(selected, &[i])?;
        let resized = g.bilinear_resize(plane, t.shape()[0], t.shape()[1])?;
        xs.push(resized);
        targets.push(t);
    }
    let n = pairs.len().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(xs.len());
    for (&x, t) in xs.iter().zip(&targets) {
        let lv: Vec<f64> = g.value(x).data().iter().map(|v| v.as_f64()).collect();
        let tv: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
        let (v, gr) = pair_terms(&lv, &tv, kind);
        total += v;
        grads.push(Some(gr.into_iter().map(|d| T::from_f64(d / n)).collect()));
    }
    if xs.is_empty() {
        let zero = g.scale(selected, T::zero())?;
        return g.sum(zero);
    }
    g.loss("mask_loss", &xs, T::from_f64(total / n), grads)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_mask: f64,
    pub l_total: f64,
    pub lambda: f64,
}

pub fn total_loss(l_det: f64, l_mask: f64, lambda: f64) -> Result<LossBreakdown> {
    for (name, v) in [("l_det", l_det), ("l_mask", l_mask), ("lambda", lambda)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
        if v < 0.0 {
            return Err(Error::InvalidArgument(format!("{name} = {v} is negative")));
        }
    }
    Ok(LossBreakdown { l_det, l_mask, l_total: l_det + lambda * l_mask, lambda })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::grad_check;

    fn cfg(k: usize) -> MaskHeadConfig {
        MaskHeadConfig { in_channels: 3, hidden: 4, num_classes: k, roi_size: 4, level: Level::P5, class_agnostic: false }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pooling_examples() {
        let f = InstanceFeatureMap { tensor: Tensor::full(&[3, 4, 4], 0.7), source_level: Level::P4 };
        let boxes = [BBox::new(3.0, 5.0, 40.0, 33.0), BBox::new(0.0, 0.0, 64.0, 64.0)];
        let (t, kept) = pool_instance_features(&f, &boxes, 5).unwrap();
        assert_eq!(t.shape(), &[2, 3, 5, 5]);
        assert_eq!(kept, vec![0, 1]);
        assert!(t.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let (t, kept) = pool_instance_features(&f, &[], 5).unwrap();
        assert_eq!((t.shape(), kept.len()), (&[0, 3, 5, 5][..], 0));
        let (_, kept) = pool_instance_features(&f, &[BBox::new(2.0, 2.0, 2.0, 9.0), boxes[0]], 5).unwrap();
        assert_eq!(kept, vec![1]);
    }

    #[test]
    fn pooling_matches_per_box_kernel() {
        let f = InstanceFeatureMap { tensor: rand_t(&[3, 4, 4], 1), source_level: Level::P4 };
        let boxes = [BBox::new(3.0, 5.0, 40.0, 33.0), BBox::new(10.0, 1.0, 63.0, 20.0)];
        let (t, _) = pool_instance_features(&f, &boxes, 6).unwrap();
        for (i, b) in boxes.iter().enumerate() {
            let one = crate::geometry::roi_align(&f.tensor, &b.scaled(1.0 / 16.0), 6, 6, SAMPLES).unwrap();
            let n = one.numel();
            let got = Tensor::new(vec![3, 6, 6], t.data()[i * n..(i + 1) * n].to_vec()).unwrap();
            assert!(got.max_abs_diff(&one) < 1e-6);
        }
    }

    #[test]
    fn prediction_shapes_and_zero_params() {
        let mut p = Parameters::new(0);
        init_params(&mut p, &cfg(5)).unwrap();
        for n in [0, 1, 3] {
            let m = predict_masks(&rand_t(&[n, 3, 4, 4], 2), &p).unwrap();
            assert_eq!(m.logits().shape(), &[n, 5, 8, 8]);
        }
        for (_, t) in p.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let m = predict_masks(&rand_t(&[2, 3, 4, 4], 2), &p).unwrap();
        assert!(m.logits().data().iter().all(|&v| v == 0.0));
        let mut q = Parameters::new(0);
        init_params(&mut q, &MaskHeadConfig { class_agnostic: true, ..cfg(5) }).unwrap();
        assert_eq!(predict_masks(&rand_t(&[2, 3, 4, 4], 2), &q).unwrap().logits().shape(), &[2, 1, 8, 8]);
    }

    #[test]
    fn filtering_examples() {
        let m = MaskTensor::new(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f32)).unwrap();
        let f = filter_by_class(&m, &[2, 0]).unwrap();
        assert_eq!(f.masks[0].data(), &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(f.masks[1].data(), &[12.0, 13.0, 14.0, 15.0]);
        assert!(filter_by_class(&m, &[3, 0]).is_err());
        assert!(filter_by_class(&m, &[0]).is_err());
        let e = MaskTensor::new(Tensor::zeros(&[0, 3, 2, 2])).unwrap();
        assert!(filter_by_class(&e, &[]).unwrap().masks.is_empty());
        let agnostic = MaskTensor::new(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f32)).unwrap();
        let f = filter_by_class(&agnostic, &[7, 2]).unwrap();
        assert_eq!(f.masks[1].data(), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn filtering_differs_from_agnostic_when_channels_differ() {
        let m = MaskTensor::new(rand_t(&[3, 4, 2, 2], 9)).unwrap();
        let aware = filter_by_class(&m, &[1, 2, 3]).unwrap();
        let agnostic = filter_by_class(&m, &[0, 0, 0]).unwrap();
        assert!(aware.masks.iter().zip(&agnostic.masks).all(|(a, b)| a != b));
    }

    proptest! {
        #[test]
        fn filtering_is_index_gather(n in 0usize..5, c in 1usize..5, seed in 0u64..1000) {
            let m = MaskTensor::new(rand_t(&[n, c, 3, 2], seed)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let f = filter_by_class(&m, &t).unwrap();
            for i in 0..n {
                for y in 0..3 {
                    for x in 0..2 {
                        prop_assert_eq!(f.masks[i].at(&[y, x]), m.logits().at(&[i, t[i], y, x]));
                    }
                }
            }
        }

        #[test]
        fn mask_loss_is_non_negative(seed in 0u64..1000, dice in any::<bool>()) {
            let kind = if dice { MaskLossKind::Dice } else { MaskLossKind::Bce };
            let m = rand_t(&[4, 4], seed).map(|v| 20.0 * v);
            let t = rand_t(&[4, 4], seed + 1).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            prop_assert!(mask_loss(&[(m, t)], kind).unwrap() >= 0.0);
        }
    }

    #[test]
    fn loss_examples() {
        let t = Tensor::from_fn(&[4, 4], |i| (i % 3 == 0) as u8 as f32);
        let half = mask_loss(&[(Tensor::zeros(&[4, 4]), t.clone())], MaskLossKind::Bce).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-9);
        let sat = t.map(|v| if v > 0.5 { 40.0 } else { -40.0 });
        assert!(mask_loss(&[(sat.clone(), t.clone())], MaskLossKind::Bce).unwrap() < 1e-5);
        assert!(mask_loss(&[(sat, t.clone())], MaskLossKind::Dice).unwrap() < 1e-5);
        assert_eq!(mask_loss(&[], MaskLossKind::Bce).unwrap(), 0.0);
        assert!(mask_loss(&[(Tensor::zeros(&[4, 3]), t)], MaskLossKind::Bce).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 0.5, 1.0).unwrap().l_total, 1.5);
        assert_eq!(total_loss(1.25, 0.5, 0.0).unwrap().l_total, 1.25);
        assert!(total_loss(f64::NAN, 0.5, 1.0).is_err());
        assert!(total_loss(1.0, -0.5, 1.0).is_err());
    }

    fn square(h: usize, r0: usize, c0: usize, s: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(h, h);
        for r in r0..r0 + s {
            for c in c0..c0 + s {
                m.set(r, c, true);
            }
        }
        m
    }

    #[test]
    fn matching_examples() {
        let g = square(20, 2, 2, 6);
        let gb = BBox::new(2.0, 2.0, 8.0, 8.0);
        let f = FilteredMasks { masks: vec![Tensor::full(&[4, 4], 5.0)], classes: vec![0] };
        assert_eq!(match_targets(&f, &[gb], &[g.clone()], &[gb]).unwrap(), vec![(0, 0)]);
        let pasted = paste_mask(&Tensor::full(&[4, 4], 0.9), &gb, 20, 20);
        assert_eq!(mask_iou(&pasted, &g).unwrap(), 1.0);
        assert!(match_targets(&f, &[gb], &[], &[]).unwrap().is_empty());
        // no mask overlap at all: box IoU decides
        let far = FilteredMasks { masks: vec![Tensor::full(&[4, 4], -5.0)], classes: vec![0] };
        let other = square(20, 10, 10, 6);
        let ob = BBox::new(10.0, 10.0, 16.0, 16.0);
        assert_eq!(match_targets(&far, &[BBox::new(9.0, 9.0, 15.0, 15.0)], &[g, other], &[gb, ob]).unwrap(), vec![(0, 1)]);
    }

    #[test]
    fn crossed_matching_equals_exhaustive_argmax() {
        let g = [square(24, 0, 0, 10), square(24, 8, 8, 10)];
        let gb = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(8.0, 8.0, 18.0, 18.0)];
        // predictions sit mostly over the other object
        let boxes = [BBox::new(7.0, 7.0, 17.0, 17.0), BBox::new(1.0, 1.0, 11.0, 11.0)];
        let f = FilteredMasks { masks: vec![rand_t(&[8, 8], 3).map(|v| v + 2.0), rand_t(&[8, 8], 4).map(|v| v + 2.0)], classes: vec![0, 0] };
        let got = match_targets(&f, &boxes, &g, &gb).unwrap();
        for (i, b) in boxes.iter().enumerate() {
            let prob = f.masks[i].map(|v| 1.0 / (1.0 + (-v).exp()));
            let pasted = paste_mask(&prob, b, 24, 24);
            let ious: Vec<f64> = g.iter().map(|m| mask_iou(&pasted, m).unwrap()).collect();
            let mut best = 0;
            for j in 1..ious.len() {
                if ious[j] > ious[best] {
                    best = j;
                }
            }
            assert_eq!(got[i], (i, best));
        }
        assert_eq!(got, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn gradients_through_head_and_loss() {
        let g_masks = [square(16, 2, 3, 7)];
        let g_boxes = [BBox::new(3.0, 2.0, 10.0, 9.0)];
        for (seed, kind) in (0..5).zip([MaskLossKind::Bce, MaskLossKind::Dice].into_iter().cycle()) {
            let mut p = Parameters::<f64>::new(seed);
            init_params(&mut p, &MaskHeadConfig { hidden: 2, ..cfg(2) }).unwrap();
            // nonzero biases keep pre-activations off the ReLU kink
            for (n, t) in p.iter_mut() {
                if n.ends_with(".b") {
                    *t = rand_t(t.shape(), seed + 50).map(|v| 0.2 + 0.1 * v).cast();
                }
            }
            let names: Vec<String> = p.names().map(str::to_owned).collect();
            let mut inputs = vec![rand_t(&[1, 3, 4, 4], seed).cast()];
            inputs.extend(names.iter().map(|n| p.get(n).unwrap().clone()));
            let err = grad_check(
                |g, v| {
                    let b = Bound::from_vars(names.iter().map(String::as_str).zip(v[1..].iter().copied()));
                    let m = predict_var(g, &b, v[0])?;
                    let sel = g.select_channel(m, &[1])?;
                    mask_loss_var(g, sel, &[(0, 0)], &g_masks, &g_boxes, kind)
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn graph_loss_matches_value_form() {
        let logits = rand_t(&[1, 8, 8], 5);
        let gm = [square(16, 2, 3, 7)];
        let gb = [BBox::new(3.0, 2.0, 10.0, 9.0)];
        let mut g = Graph::<f32>::new();
        let x = g.constant(logits.clone());
        let l = mask_loss_var(&mut g, x, &[(0, 0)], &gm, &gb, MaskLossKind::Bce).unwrap();
        let mut g2 = Graph::<f32>::new();
        let x2 = g2.constant(logits);
        let r = g2.bilinear_resize(x2, 7, 7).unwrap();
        let resized = g2.value(r).clone().reshape(&[7, 7]).unwrap();
        let want = mask_loss(&[(resized, gt_crop(&gm[0], &gb[0]).unwrap())], MaskLossKind::Bce).unwrap();
        assert!((g.value(l).item().unwrap() as f64 - want).abs() < 1e-6);
        let mut g3 = Graph::<f32>::new();
        let x3 = g3.constant(Tensor::zeros(&[0, 8, 8]));
        let l3 = mask_loss_var(&mut g3, x3, &[], &gm, &gb, MaskLossKind::Bce).unwrap();
        assert_eq!(g3.value(l3).item().unwrap(), 0.0);
    }
}
