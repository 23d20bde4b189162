//! Toy anchor-free single-frame detector with the video object branch.
//!
//! Backbone: five `conv3×3 + SiLU` blocks, each followed by 2×2 average
//! pooling. Blocks 3/4/5 give the P3/P4/P5 neck features (strides 8/16/32).
//! A decoupled head shared across levels predicts class logits, box offsets
//! (ℓ,t,r,b in stride units) and objectness per cell.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{iou_raw, BBox};
use crate::numerics::{io, sigmoid, Bound, Graph, Parameters, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    P3,
    P4,
    P5,
}

pub const LEVELS: [Level; 3] = [Level::P3, Level::P4, Level::P5];

impl Level {
    pub fn stride(self) -> usize {
        match self {
            Level::P3 => 8,
            Level::P4 => 16,
            Level::P5 => 32,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "P3" | "p3" => Ok(Level::P3),
            "P4" | "p4" => Ok(Level::P4),
            "P5" | "p5" => Ok(Level::P5),
            _ => Err(Error::Config(format!("unknown FPN level {s:?}"))),
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Neck / head width D.
    pub width: usize,
}

impl DetectorConfig {
    pub fn backbone_channels(&self) -> [usize; 5] {
        let d = self.width;
        [(d / 4).max(4), (d / 2).max(4), d, d, d]
    }
}

/// Names of base-detector parameters: backbone and heads.
pub fn is_base_param(name: &str) -> bool {
    name.starts_with("backbone.") || name.starts_with("head.")
}

pub fn is_vob_param(name: &str) -> bool {
    name.starts_with("vob.")
}

fn conv<T: Scalar>(p: &mut Parameters<T>, name: &str, cout: usize, cin: usize, k: usize) -> Result<()> {
    p.kaiming(&format!("{name}.w"), &[cout, cin, k, k])?;
    p.zeros(&format!("{name}.b"), &[cout])
}

/// Adds backbone, head and video object branch parameters.
pub fn init_params<T: Scalar>(p: &mut Parameters<T>, cfg: &DetectorConfig) -> Result<()> {
    let ch = cfg.backbone_channels();
    let mut cin = 3;
    for (i, &c) in ch.iter().enumerate() {
        conv(p, &format!("backbone.{i}"), c, cin, 3)?;
        cin = c;
    }
    let d = cfg.width;
    conv(p, "head.cls.conv", d, d, 3)?;
    conv(p, "head.cls.out", cfg.num_classes, d, 1)?;
    conv(p, "head.reg.conv", d, d, 3)?;
    conv(p, "head.box.out", 4, d, 1)?;
    conv(p, "head.obj.out", 1, d, 1)?;
    // the branch starts as a pass-through of the neck
    for (name, k) in [("vob.conv1", 3), ("vob.conv2", 3), ("vob.cls", 1), ("vob.ins", 1)] {
        p.dirac(&format!("{name}.w"), d, d, k)?;
        p.zeros(&format!("{name}.b"), &[d])?;
    }
    Ok(())
}

pub(crate) fn apply_conv<T: Scalar>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{name}.w"))?;
    let pad = g.shape(w)[2] / 2;
    g.conv2d(x, w, b.get(&format!("{name}.b"))?, pad)
}

fn conv_silu<T: Scalar>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = apply_conv(g, b, name, x)?;
    g.silu(y)
}

/// Graph handles for one pyramid level, batched over frames (`[N,·,h,w]`).
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub level: Level,
    pub neck: Var,
    pub cls: Var,
    pub bbox: Var,
    pub obj: Var,
}

/// Backbone and detection head on `frames: [N,3,H,W]`.
pub fn backbone_heads<T: Scalar>(g: &mut Graph<T>, b: &Bound, frames: Var) -> Result<Vec<LevelVars>> {
    let s = g.shape(frames).to_vec();
    let [_, 3, h, w] = s[..] else {
        return Err(shape_err!("detector input must be [N,3,H,W], got {s:?}"));
    };
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("image size {h}x{w} not divisible by 32")));
    }
    let mut x = frames;
    let mut necks = Vec::with_capacity(3);
    for i in 0..5 {
        x = conv_silu(g, b, &format!("backbone.{i}"), x)?;
        x = g.avg_pool2(x)?;
        if i >= 2 {
            necks.push(x);
        }
    }
    let mut out = Vec::with_capacity(3);
    for (level, neck) in LEVELS.into_iter().zip(necks) {
        let c = conv_silu(g, b, "head.cls.conv", neck)?;
        let cls = apply_conv(g, b, "head.cls.out", c)?;
        let r = conv_silu(g, b, "head.reg.conv", neck)?;
        let bbox = apply_conv(g, b, "head.box.out", r)?;
        let obj = apply_conv(g, b, "head.obj.out", r)?;
        out.push(LevelVars { level, neck, cls, bbox, obj });
    }
    Ok(out)
}

/// Video object branch: two `conv3×3 + SiLU` on the neck feature, then a
/// split 1×1 head giving `(f_cls, f_ins_input)`.
pub fn video_object_branch<T: Scalar>(g: &mut Graph<T>, b: &Bound, neck: Var) -> Result<(Var, Var)> {
    let x = conv_silu(g, b, "vob.conv1", neck)?;
    let x = conv_silu(g, b, "vob.conv2", x)?;
    Ok((apply_conv(g, b, "vob.cls", x)?, apply_conv(g, b, "vob.ins", x)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub stride: usize,
    pub level: Level,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction {
    pub class_logits: Tensor,
    pub box_offsets: Tensor,
    pub objectness: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoObjectFeatures {
    pub f_cls: Tensor,
    pub f_ins_input: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput {
    pub feature: FeatureMap,
    pub pred: RawPrediction,
    pub vob: VideoObjectFeatures,
}

/// Single-frame forward pass on `[3,H,W]`.
pub fn forward(frame: &Tensor, params: &Parameters) -> Result<Vec<LevelOutput>> {
    let s = frame.shape();
    let mut g = Graph::new();
    let x = g.constant(frame.clone().reshape(&[1, s[0], s.get(1).copied().unwrap_or(0), s.get(2).copied().unwrap_or(0)])?);
    let b = params.bind(&mut g, |_| false);
    let levels = backbone_heads(&mut g, &b, x)?;
    let mut out = Vec::with_capacity(3);
    for lv in levels {
        let (fc, fi) = video_object_branch(&mut g, &b, lv.neck)?;
        let squeeze = |v: Var| {
            let t = g.value(v);
            t.clone().reshape(&t.shape()[1..])
        };
        out.push(LevelOutput {
            feature: FeatureMap { tensor: squeeze(lv.neck)?, stride: lv.level.stride(), level: lv.level },
            pred: RawPrediction { class_logits: squeeze(lv.cls)?, box_offsets: squeeze(lv.bbox)?, objectness: squeeze(lv.obj)? },
            vob: VideoObjectFeatures { f_cls: squeeze(fc)?, f_ins_input: squeeze(fi)? },
        });
    }
    Ok(out)
}

/// One decoded cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub bbox: BBox,
    /// `sigmoid(objectness)·sigmoid(class logit)` per class.
    pub scores: Vec<f32>,
    pub objectness: f32,
    pub level: Level,
    /// Row-major cell index `y·w + x` within the level.
    pub cell: usize,
}

/// Widens `[lo, hi]` to at least one pixel around its midpoint, kept inside
/// `[0, extent]`.
fn at_least_one_pixel(lo: f32, hi: f32, extent: f32) -> (f32, f32) {
    let (lo, hi) = (lo.clamp(0.0, extent), hi.clamp(0.0, extent));
    if hi >= lo + 1.0 || extent < 1.0 {
        return (lo, hi);
    }
    let start = (0.5 * (lo + hi) - 0.5).clamp(0.0, extent - 1.0);
    (start, start + 1.0)
}

/// Box of cell `(x, y)` for offsets `(ℓ,t,r,b)` in stride units, clamped to
/// the image and at least one pixel wide and tall.
pub fn decode_box(x: usize, y: usize, stride: usize, off: [f32; 4], img_w: f32, img_h: f32) -> BBox {
    let s = stride as f32;
    let (cx, cy) = ((x as f32 + 0.5) * s, (y as f32 + 0.5) * s);
    let (x1, x2) = at_least_one_pixel(cx - off[0] * s, cx + off[2] * s, img_w);
    let (y1, y2) = at_least_one_pixel(cy - off[1] * s, cy + off[3] * s, img_h);
    BBox::new(x1, y1, x2, y2)
}

/// Decodes raw slices of one frame at one level.
pub fn decode_slices(
    cls: &[f32],
    offsets: &[f32],
    obj: &[f32],
    (h, w): (usize, usize),
    level: Level,
    (img_w, img_h): (f32, f32),
) -> Vec<Decoded> {
    let plane = h * w;
    let k = cls.len() / plane.max(1);
    let stride = level.stride();
    (0..plane)
        .map(|cell| {
            let (y, x) = (cell / w, cell % w);
            let o = sigmoid(obj[cell]);
            let off = [offsets[cell], offsets[plane + cell], offsets[2 * plane + cell], offsets[3 * plane + cell]];
            Decoded {
                bbox: decode_box(x, y, stride, off, img_w, img_h),
                scores: (0..k).map(|c| o * sigmoid(cls[c * plane + cell])).collect(),
                objectness: o,
                level,
                cell,
            }
        })
        .collect()
}

/// One candidate per cell; `image` is `(width, height)` in pixels.
pub fn decode(pred: &RawPrediction, level: Level, image: (f32, f32)) -> Result<Vec<Decoded>> {
    let s = pred.objectness.shape();
    let [1, h, w] = s[..] else {
        return Err(shape_err!("objectness must be [1,H,W], got {s:?}"));
    };
    if pred.box_offsets.shape() != [4, h, w] || pred.class_logits.shape()[1..] != [h, w] {
        return Err(shape_err!("prediction tensors disagree on spatial size"));
    }
    Ok(decode_slices(pred.class_logits.data(), pred.box_offsets.data(), pred.objectness.data(), (h, w), level, image))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BBox,
    pub class_id: usize,
}

/// A positive training cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive {
    pub level: usize,
    pub cell: usize,
    pub gt: usize,
}

/// Level responsible for a ground-truth box, by its longer side.
pub fn level_for(b: &BBox) -> usize {
    let side = b.width().max(b.height());
    if side < 20.0 {
        0
    } else if side < 40.0 {
        1
    } else {
        2
    }
}

/// Centre-in-box assignment at the size-selected level. A box containing no
/// cell centre gets the cell under its own centre. Cells claimed by several
/// boxes go to the smallest one.
pub fn assign_positives(gts: &[GtObject], dims: &[(usize, usize); 3]) -> Vec<Positive> {
    let mut owner: Vec<Vec<Option<usize>>> = dims.iter().map(|&(h, w)| vec![None; h * w]).collect();
    for (gi, gt) in gts.iter().enumerate() {
        let l = level_for(&gt.bbox);
        let (h, w) = dims[l];
        let s = LEVELS[l].stride() as f32;
        let mut cells = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = ((x as f32 + 0.5) * s, (y as f32 + 0.5) * s);
                if cx >= gt.bbox.x1 && cx < gt.bbox.x2 && cy >= gt.bbox.y1 && cy < gt.bbox.y2 {
                    cells.push(y * w + x);
                }
            }
        }
        if cells.is_empty() {
            let (cx, cy) = gt.bbox.center();
            let x = ((cx / s) as usize).min(w - 1);
            let y = ((cy / s) as usize).min(h - 1);
            cells.push(y * w + x);
        }
        for c in cells {
            let slot = &mut owner[l][c];
            match *slot {
                Some(o) if gts[o].bbox.area() <= gt.bbox.area() => {}
                _ => *slot = Some(gi),
            }
        }
    }
    let mut out = Vec::new();
    for (l, cells) in owner.iter().enumerate() {
        for (cell, o) in cells.iter().enumerate() {
            if let Some(gt) = *o {
                out.push(Positive { level: l, cell, gt });
            }
        }
    }
    out
}

/// Target offsets `(ℓ,t,r,b)` in stride units for a cell, floored at 0.
pub fn target_offsets(gt: &BBox, level: usize, cell: usize, w: usize) -> [f64; 4] {
    let s = LEVELS[level].stride() as f64;
    let (cx, cy) = (((cell % w) as f64 + 0.5) * s, ((cell / w) as f64 + 0.5) * s);
    [
        ((cx - gt.x1 as f64) / s).max(0.0),
        ((cy - gt.y1 as f64) / s).max(0.0),
        ((gt.x2 as f64 - cx) / s).max(0.0),
        ((gt.y2 as f64 - cy) / s).max(0.0),
    ]
}

pub const L1_WEIGHT: f64 = 1.0;
pub const IOU_WEIGHT: f64 = 2.0;
const IOU_EPS: f64 = 1e-7;

/// `softplus(x) − y·x`: BCE with logits, and its derivative `σ(x) − y`.
pub(crate) fn bce_logit(x: f64, y: f64) -> (f64, f64) {
    let sp = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    (sp - y * x, 1.0 / (1.0 + (-x).exp()) - y)
}

/// `1 − IoU` of two boxes sharing a centre, given as non-negative offsets,
/// with the gradient w.r.t. `p`.
pub(crate) fn offset_iou_loss(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let [pl, pt, pr, pb] = p;
    let [tl, tt, tr, tb] = t;
    let wi = pl.min(tl) + pr.min(tr);
    let hi = pt.min(tt) + pb.min(tb);
    let inter = wi * hi;
    let ap = (pl + pr) * (pt + pb);
    let at = (tl + tr) * (tt + tb);
    let u = ap + at - inter + IOU_EPS;
    let iou = inter / u;
    let d_inter = (u + inter) / (u * u);
    let d_ap = -inter / (u * u);
    let ind = |a: f64, b: f64| if a < b { 1.0 } else { 0.0 };
    let g = [
        d_inter * hi * ind(pl, tl) + d_ap * (pt + pb),
        d_inter * wi * ind(pt, tt) + d_ap * (pl + pr),
        d_inter * hi * ind(pr, tr) + d_ap * (pt + pb),
        d_inter * wi * ind(pb, tb) + d_ap * (pl + pr),
    ];
    (1.0 - iou, g.map(|v| -v))
}

/// Detection loss over a batch of frames.
///
/// Inputs are the per-level `[N,K,h,w]` class logits, `[N,4,h,w]` offsets
/// and `[N,1,h,w]` objectness (level-major: cls, box, obj for P3, then P4,
/// then P5). `gts[n]` holds frame `n`'s objects.
///
/// `L = (Σ_cells BCE(obj) + Σ_pos Σ_k BCE(cls_k) + Σ_pos (L1 + w·(1 − IoU))) / max(1, #pos)`
pub fn detection_loss<T: Scalar>(g: &mut Graph<T>, levels: &[LevelVars], gts: &[Vec<GtObject>]) -> Result<Var> {
    if levels.len() != 3 {
        return Err(shape_err!("detection loss needs 3 levels, got {}", levels.len()));
    }
    let mut xs = Vec::with_capacity(9);
    for lv in levels {
        xs.extend([lv.cls, lv.bbox, lv.obj]);
    }
    let data: Vec<Vec<f64>> = xs.iter().map(|&v| g.value(v).data().iter().map(|x| x.as_f64()).collect()).collect();
    let shapes: Vec<Vec<usize>> = xs.iter().map(|&v| g.shape(v).to_vec()).collect();
    let (value, grads) = detection_loss_raw(&data, &shapes, gts)?;
    let grads = grads.into_iter().map(|gr| Some(gr.into_iter().map(T::from_f64).collect())).collect();
    g.loss("detection_loss", &xs, T::from_f64(value), grads)
}

pub(crate) fn detection_loss_raw(
    data: &[Vec<f64>],
    shapes: &[Vec<usize>],
    gts: &[Vec<GtObject>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = shapes[0][0];
    let k = shapes[0][1];
    if gts.len() != n {
        return Err(shape_err!("{} frames of ground truth for a batch of {n}", gts.len()));
    }
    let dims: [(usize, usize); 3] = std::array::from_fn(|l| (shapes[3 * l][2], shapes[3 * l][3]));
    for l in 0..3 {
        let (h, w) = dims[l];
        if shapes[3 * l] != [n, k, h, w] || shapes[3 * l + 1] != [n, 4, h, w] || shapes[3 * l + 2] != [n, 1, h, w] {
            return Err(shape_err!("inconsistent prediction shapes at level {l}"));
        }
    }
    let mut grads: Vec<Vec<f64>> = data.iter().map(|d| vec![0.0; d.len()]).collect();
    let mut total = 0.0;
    let mut npos = 0usize;
    for (f, frame_gts) in gts.iter().enumerate() {
        for gt in frame_gts {
            gt.bbox.checked()?;
            if gt.class_id >= k {
                return Err(Error::InvalidArgument(format!("class {} out of range [0, {k})", gt.class_id)));
            }
        }
        let pos = assign_positives(frame_gts, &dims);
        npos += pos.len();
        let mut is_pos: Vec<Vec<bool>> = dims.iter().map(|&(h, w)| vec![false; h * w]).collect();
        for p in &pos {
            is_pos[p.level][p.cell] = true;
        }
        for l in 0..3 {
            let plane = dims[l].0 * dims[l].1;
            let obj = &data[3 * l + 2][f * plane..(f + 1) * plane];
            for (cell, &x) in obj.iter().enumerate() {
                let (v, d) = bce_logit(x, if is_pos[l][cell] { 1.0 } else { 0.0 });
                total += v;
                grads[3 * l + 2][f * plane + cell] += d;
            }
        }
        for p in &pos {
            let (h, w) = dims[p.level];
            let plane = h * w;
            let gt = &frame_gts[p.gt];
            let cbase = f * k * plane;
            for c in 0..k {
                let idx = cbase + c * plane + p.cell;
                let (v, d) = bce_logit(data[3 * p.level][idx], if c == gt.class_id { 1.0 } else { 0.0 });
                total += v;
                grads[3 * p.level][idx] += d;
            }
            let bbase = f * 4 * plane;
            let idx: [usize; 4] = std::array::from_fn(|j| bbase + j * plane + p.cell);
            let raw = idx.map(|i| data[3 * p.level + 1][i]);
            let t = target_offsets(&gt.bbox, p.level, p.cell, w);
            let relu = raw.map(|v| v.max(0.0));
            let (li, gi) = offset_iou_loss(relu, t);
            total += IOU_WEIGHT * li;
            for j in 0..4 {
                let diff = raw[j] - t[j];
                total += L1_WEIGHT * diff.abs();
                let gl1 = L1_WEIGHT * diff.signum();
                let giou = if raw[j] > 0.0 { IOU_WEIGHT * gi[j] } else { 0.0 };
                grads[3 * p.level + 1][idx[j]] += gl1 + giou;
            }
        }
    }
    let norm = 1.0 / npos.max(1) as f64;
    grads.iter_mut().flatten().for_each(|v| *v *= norm);
    Ok((total * norm, grads))
}

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    seed: u64,
    tensors: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// Writes every parameter as an FVT1 file plus an `index.json`.
pub fn save_checkpoint(dir: &Path, params: &Parameters) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(params.len());
    for (i, (name, t)) in params.iter().enumerate() {
        let file = format!("{i:04}.fvt");
        io::save_fvt1(&dir.join(&file), t)?;
        tensors.push(IndexEntry { name: name.to_owned(), shape: t.shape().to_vec(), file });
    }
    let index = CheckpointIndex { seed: params.seed(), tensors };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Parameters> {
    let index: CheckpointIndex = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
    let mut p = Parameters::new(index.seed);
    for e in index.tensors {
        let path = dir.join(&e.file);
        let t = io::load_fvt1(&path)?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::TensorFile { path, reason: format!("shape {:?} != indexed {:?}", t.shape(), e.shape) });
        }
        p.insert(&e.name, t)?;
    }
    Ok(p)
}

/// Boxes overlapping `b` by at least `thr`, best first.
pub fn best_gt(b: &BBox, gts: &[GtObject], thr: f64) -> Option<(usize, f64)> {
    gts.iter()
        .enumerate()
        .map(|(i, g)| (i, iou_raw(b, &g.bbox)))
        .filter(|&(_, v)| v >= thr)
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::grad_check;

    fn cfg() -> DetectorConfig {
        DetectorConfig { num_classes: 3, width: 8 }
    }

    fn params(seed: u64) -> Parameters {
        let mut p = Parameters::new(seed);
        init_params(&mut p, &cfg()).unwrap();
        p
    }

    #[test]
    fn forward_level_sizes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(&[3, 64, 64], |_| rng.gen::<f32>());
        let out = forward(&x, &params(1)).unwrap();
        let sizes: Vec<_> = out.iter().map(|o| o.feature.tensor.shape()[1..].to_vec()).collect();
        assert_eq!(sizes, vec![vec![8, 8], vec![4, 4], vec![2, 2]]);
        assert_eq!(out.iter().map(|o| o.feature.stride).collect::<Vec<_>>(), vec![8, 16, 32]);
        assert_eq!(out, forward(&x, &params(1)).unwrap());
        let total: usize = out
            .iter()
            .map(|o| decode(&o.pred, o.feature.level, (64.0, 64.0)).unwrap().len())
            .sum();
        assert_eq!(total, 64 + 16 + 4);
        assert!(forward(&Tensor::zeros(&[3, 48, 64]), &params(1)).is_err());
    }

    #[test]
    fn zero_input_zero_final_layers_give_zero_logits() {
        let mut p = params(2);
        for n in ["head.cls.out.w", "head.box.out.w", "head.obj.out.w"] {
            let s = p.get(n).unwrap().shape().to_vec();
            *p.get_mut(n).unwrap() = Tensor::zeros(&s);
        }
        let out = forward(&Tensor::zeros(&[3, 32, 32]), &p).unwrap();
        for o in out {
            assert!(o.pred.class_logits.data().iter().all(|&v| v == 0.0));
            assert!(o.pred.objectness.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn decode_examples() {
        let b = decode_box(0, 0, 8, [0.0; 4], 64.0, 64.0);
        assert_eq!(b.center(), (4.0, 4.0));
        assert_eq!(decode_box(1, 1, 8, [1.0; 4], 64.0, 64.0), BBox::new(4.0, 4.0, 20.0, 20.0));
        // boxes pushed past the border keep one pixel inside the image
        assert_eq!(decode_box(7, 0, 8, [-2.0, 0.0, 3.0, 0.0], 64.0, 64.0), BBox::new(63.0, 3.5, 64.0, 4.5));
        let pred = RawPrediction {
            class_logits: Tensor::full(&[2, 2, 2], -60.0),
            box_offsets: Tensor::zeros(&[4, 2, 2]),
            objectness: Tensor::full(&[1, 2, 2], -60.0),
        };
        let d = decode(&pred, Level::P5, (64.0, 64.0)).unwrap();
        assert_eq!(d.len(), 4);
        assert!(d.iter().flat_map(|c| &c.scores).all(|&s| s < 1e-20));
    }

    fn crafted(gts: &[GtObject], good: bool) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
        let dims = [(8, 8), (4, 4), (2, 2)];
        let k = 3;
        let pos = assign_positives(gts, &dims);
        let mut data = Vec::new();
        let mut shapes = Vec::new();
        for (l, &(h, w)) in dims.iter().enumerate() {
            let plane = h * w;
            let mut cls = vec![-12.0; k * plane];
            let mut bx = vec![0.0; 4 * plane];
            let mut obj = vec![-12.0; plane];
            for p in pos.iter().filter(|p| p.level == l) {
                let gt = &gts[p.gt];
                obj[p.cell] = 12.0;
                cls[gt.class_id * plane + p.cell] = 12.0;
                let t = target_offsets(&gt.bbox, l, p.cell, w);
                for j in 0..4 {
                    bx[j * plane + p.cell] = if good { t[j] } else { t[j] + 0.5 };
                }
            }
            data.extend([cls, bx, obj]);
            shapes.extend([vec![1, k, h, w], vec![1, 4, h, w], vec![1, 1, h, w]]);
        }
        (data, shapes)
    }

    #[test]
    fn detection_loss_examples() {
        let gts = vec![GtObject { bbox: BBox::new(10.0, 12.0, 26.0, 28.0), class_id: 2 }];
        let (d, s) = crafted(&gts, true);
        let (v, _) = detection_loss_raw(&d, &s, &[gts.clone()]).unwrap();
        assert!(v < 0.05, "{v}");
        let (d2, s2) = crafted(&gts, false);
        assert!(detection_loss_raw(&d2, &s2, &[gts]).unwrap().0 > v);
        let (d, s) = crafted(&[], true);
        let (v, _) = detection_loss_raw(&d, &s, &[vec![]]).unwrap();
        assert!(v > 0.0);
    }

    #[test]
    fn assignment_prefers_smaller_box_and_falls_back_to_centre() {
        let dims = [(8, 8), (4, 4), (2, 2)];
        let big = GtObject { bbox: BBox::new(0.0, 0.0, 19.0, 19.0), class_id: 0 };
        let small = GtObject { bbox: BBox::new(2.0, 2.0, 14.0, 14.0), class_id: 1 };
        let pos = assign_positives(&[big, small], &dims);
        assert!(pos.iter().filter(|p| p.cell == 9).all(|p| p.gt == 1));
        let tiny = GtObject { bbox: BBox::new(9.0, 9.0, 11.0, 11.0), class_id: 0 };
        let pos = assign_positives(&[tiny], &dims);
        assert_eq!(pos, vec![Positive { level: 0, cell: 9, gt: 0 }]);
    }

    #[test]
    fn detection_loss_gradients() {
        let gts = vec![
            vec![GtObject { bbox: BBox::new(3.0, 5.0, 17.0, 15.0), class_id: 1 }],
            vec![GtObject { bbox: BBox::new(1.0, 2.0, 30.0, 27.0), class_id: 0 }],
        ];
        let dims = [(4, 4), (2, 2), (1, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut inputs = Vec::new();
        for &(h, w) in &dims {
            for c in [2, 4, 1] {
                inputs.push(Tensor::<f64>::from_fn(&[2, c, h, w], |_| rng.gen_range(0.2..2.0)));
            }
        }
        let err = grad_check(
            |g, v| {
                let lv: Vec<LevelVars> = (0..3)
                    .map(|l| LevelVars { level: LEVELS[l], neck: v[3 * l], cls: v[3 * l], bbox: v[3 * l + 1], obj: v[3 * l + 2] })
                    .collect();
                detection_loss(g, &lv, &gts)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = params(9);
        save_checkpoint(dir.path(), &p).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap(), p);
    }
}
