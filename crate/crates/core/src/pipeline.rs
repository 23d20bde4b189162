//! End-to-end model assembly: pretraining loss, fine-tuning graph for one
//! clip, and clip-level inference for the three aggregation modes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::detector::{self, backbone_heads, best_gt, decode, detection_loss, video_object_branch, Decoded, DetectorConfig, GtObject, Level, LevelVars, RawPrediction, LEVELS};
use crate::error::{shape_err, Error, Result};
use crate::eval::{Detection, GroundTruth};
use crate::fpsm::{gather_rows, select_candidates, Candidate, SelectParams};
use crate::geometry::{BBox, BinaryMask};
use crate::ifem;
use crate::maskhead::{self, channel_for, match_targets, FilteredMasks, MaskHeadConfig, MaskLossKind};
use crate::numerics::{Bound, Graph, Parameters, Tensor, Var};
use crate::synthdata::VideoClip;
use crate::ticam::{self, build_queries, classification_loss, final_detections, FinalDetection, FrameProposals, FrameRows, ScoreMode, TicamConfig};

/// Proposals with at least this IoU to a GT are classification targets.
pub const POSITIVE_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Single-frame detector output after FPSM.
    None,
    /// Instance queries pooled from neck features inside each proposal box.
    Box,
    /// Instance queries from IFEM features, trained with the mask loss.
    Mask,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::None, Aggregation::Box, Aggregation::Mask];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "box" => Ok(Self::Box),
            "mask" => Ok(Self::Mask),
            _ => Err(Error::Config(format!("aggregation must be none|box|mask, got {s:?}"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Box => "box",
            Self::Mask => "mask",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub c_prime: usize,
    pub heads: usize,
    pub k: usize,
    pub n_cap: usize,
    pub nms_train: f64,
    pub nms_infer: f64,
    pub m_train: usize,
    pub m_infer: usize,
    pub roi_size: usize,
    pub fpn_level: Level,
    pub mask_hidden: usize,
    pub class_aware: bool,
    pub loss: MaskLossKind,
    pub aggregation: Aggregation,
    pub score_mode: ScoreMode,
}

impl ModelConfig {
    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig { num_classes: self.num_classes, width: self.feature_dim }
    }

    pub fn ticam(&self) -> TicamConfig {
        let in_ins = if self.aggregation == Aggregation::Mask { self.c_prime } else { self.feature_dim };
        TicamConfig { in_cls: self.feature_dim, in_ins, dim: self.feature_dim, heads: self.heads, num_classes: self.num_classes }
    }

    pub fn mask_head(&self) -> MaskHeadConfig {
        MaskHeadConfig {
            in_channels: self.c_prime,
            hidden: self.mask_hidden,
            num_classes: self.num_classes,
            roi_size: self.roi_size,
            level: self.fpn_level,
            class_agnostic: !self.class_aware,
        }
    }

    pub fn select_params(&self, train: bool) -> SelectParams {
        SelectParams { k: self.k, nms_threshold: if train { self.nms_train } else { self.nms_infer }, n_cap: self.n_cap }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.feature_dim == 0 || self.c_prime == 0 || self.mask_hidden == 0 || self.roi_size == 0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        if self.heads == 0 || self.feature_dim % self.heads != 0 {
            return Err(Error::Config(format!("feature_dim {} not divisible by heads {}", self.feature_dim, self.heads)));
        }
        if self.m_train == 0 || self.m_infer == 0 {
            return Err(Error::Config("m_train and m_infer must be positive".into()));
        }
        self.select_params(true).validate()?;
        self.select_params(false).validate()
    }
}

/// Parameters owned by the modules added on top of the base detector.
pub fn is_new_module_param(name: &str) -> bool {
    detector::is_vob_param(name) || ifem::is_ifem_param(name) || maskhead::is_mask_param(name) || ticam::is_ticam_param(name)
}

/// Detector parameters plus the modules the aggregation mode needs.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    cfg.validate()?;
    let mut p = Parameters::new(seed);
    detector::init_params(&mut p, &cfg.detector())?;
    add_new_modules(&mut p, cfg)?;
    Ok(p)
}

/// Replaces the new-module parameters of `p` with a fresh initialization for
/// `cfg.aggregation`, keeping the base detector.
pub fn add_new_modules(p: &mut Parameters, cfg: &ModelConfig) -> Result<()> {
    p.retain(|n| !ifem::is_ifem_param(n) && !maskhead::is_mask_param(n) && !ticam::is_ticam_param(n));
    if cfg.aggregation == Aggregation::None {
        return Ok(());
    }
    let mut fresh = Parameters::new(p.seed() ^ 0x5eed);
    if cfg.aggregation == Aggregation::Mask {
        ifem::init_params(&mut fresh, cfg.feature_dim, cfg.c_prime)?;
        maskhead::init_params(&mut fresh, &cfg.mask_head())?;
    }
    ticam::init_params(&mut fresh, &cfg.ticam())?;
    p.merge_from(&fresh);
    Ok(())
}

/// `[n,3,H,W]` batch of the given frames.
pub fn frames_tensor(clip: &VideoClip, idx: &[usize]) -> Result<Tensor> {
    let mut data = Vec::new();
    for &i in idx {
        let f = clip.frames.get(i).ok_or_else(|| Error::InvalidArgument(format!("frame {i} out of range")))?;
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![idx.len(), 3, clip.height(), clip.width()], data)
}

/// Detection loss on a `[n,3,H,W]` batch.
pub fn pretrain_loss(g: &mut Graph, b: &Bound, frames: &Tensor, gts: &[Vec<GtObject>]) -> Result<Var> {
    let x = g.constant(frames.clone());
    let levels = backbone_heads(g, b, x)?;
    detection_loss(g, &levels, gts)
}

fn slice_frame(t: &Tensor, i: usize) -> Result<Tensor> {
    let s = t.shape();
    let n: usize = s[1..].iter().product();
    Tensor::new(s[1..].to_vec(), t.data()[i * n..(i + 1) * n].to_vec())
}

fn decode_frame(g: &Graph, levels: &[LevelVars], i: usize, image: (f32, f32)) -> Result<Vec<Decoded>> {
    let mut out = Vec::new();
    for lv in levels {
        let pred = RawPrediction {
            class_logits: slice_frame(g.value(lv.cls), i)?,
            box_offsets: slice_frame(g.value(lv.bbox), i)?,
            objectness: slice_frame(g.value(lv.obj), i)?,
        };
        out.extend(decode(&pred, lv.level, image)?);
    }
    Ok(out)
}

/// `[n,C,h,w]` → frame `i` as `[C,h,w]`.
fn frame_var(g: &mut Graph, v: Var, i: usize) -> Result<Var> {
    let s = g.shape(v)[1..].to_vec();
    let one = g.index_rows(v, &[i])?;
    g.reshape(one, &s)
}

/// Feature maps averaged inside each box at the box's own level, `[n,C]`.
fn box_rows(g: &mut Graph, maps: &[Var], cands: &[Candidate]) -> Result<Var> {
    let d = g.shape(maps[0])[0];
    let mut parts = Vec::new();
    let mut order = vec![0; cands.len()];
    let mut next = 0;
    for level in LEVELS {
        let members: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].level == level).collect();
        if members.is_empty() {
            continue;
        }
        let s = level.stride() as f64;
        let rois: Vec<[f64; 4]> = members.iter().map(|&i| cands[i].bbox.to_f64().map(|v| v / s)).collect();
        let pooled = g.roi_align(maps[level.index()], &rois, 1, 1, 2)?;
        parts.push(g.reshape(pooled, &[members.len(), d])?);
        for &i in &members {
            order[i] = next;
            next += 1;
        }
    }
    let all = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    g.index_rows(all, &order)
}

/// Per-level graph handles for the new modules on a frame batch.
struct Branches {
    f_cls: Vec<Var>,
    f_ins: Vec<Var>,
}

fn branches(g: &mut Graph, b: &Bound, cfg: &ModelConfig, levels: &[LevelVars]) -> Result<Branches> {
    let mut f_cls = Vec::with_capacity(3);
    let mut f_ins = Vec::with_capacity(3);
    for lv in levels {
        let (c, i) = video_object_branch(g, b, lv.neck)?;
        f_cls.push(c);
        if cfg.aggregation == Aggregation::Mask {
            f_ins.push(ifem::extract_var(g, b, i)?);
        }
    }
    Ok(Branches { f_cls, f_ins })
}

/// Selected proposals for frame `fi` of the batch and their query rows.
struct FrameQueries {
    cands: Vec<Candidate>,
    rows: FrameRows,
}

fn frame_queries(g: &mut Graph, cfg: &ModelConfig, levels: &[LevelVars], br: &Branches, fi: usize, frame_index: usize, image: (f32, f32), train: bool) -> Result<FrameQueries> {
    let decoded = decode_frame(g, levels, fi, image)?;
    let all: Vec<Candidate> = decoded.iter().map(Candidate::from).collect();
    let cands = select_candidates(&all, &cfg.select_params(train))?;
    let cells: Vec<(Level, usize)> = cands.iter().map(|c| (c.level, c.cell)).collect();
    let cls_maps = br.f_cls.iter().map(|&v| frame_var(g, v, fi)).collect::<Result<Vec<_>>>()?;
    let cls = gather_rows(g, &cls_maps, &cells)?;
    let ins = match cfg.aggregation {
        Aggregation::Mask => {
            let maps = br.f_ins.iter().map(|&v| frame_var(g, v, fi)).collect::<Result<Vec<_>>>()?;
            box_rows(g, &maps, &cands)?
        }
        Aggregation::Box => {
            let necks = levels.iter().map(|lv| frame_var(g, lv.neck, fi)).collect::<Result<Vec<_>>>()?;
            box_rows(g, &necks, &cands)?
        }
        Aggregation::None => return Err(Error::InvalidArgument("no queries without aggregation".into())),
    };
    Ok(FrameQueries { cands, rows: FrameRows { frame_index, cls, ins } })
}

#[derive(Clone, Copy, Debug)]
pub struct FinetuneLosses {
    pub l_det: Var,
    pub l_mask: Option<Var>,
    pub total: Var,
    pub num_rows: usize,
    pub num_masks: usize,
}

/// Fine-tuning objective on frames `idx` of `clip`:
/// `L_det` (detector loss plus aggregated classification loss) and, in mask
/// mode, `λ·L_mask`.
pub fn finetune_graph(g: &mut Graph, b: &Bound, cfg: &ModelConfig, clip: &VideoClip, idx: &[usize], lambda: f32) -> Result<FinetuneLosses> {
    if cfg.aggregation == Aggregation::None {
        return Err(Error::Config("aggregation=none has nothing to fine-tune".into()));
    }
    let image = (clip.width() as f32, clip.height() as f32);
    let x = g.constant(frames_tensor(clip, idx)?);
    let levels = backbone_heads(g, b, x)?;
    let gts: Vec<Vec<GtObject>> = idx.iter().map(|&t| clip.gt_objects(t)).collect();
    let det = detection_loss(g, &levels, &gts)?;
    let br = branches(g, b, cfg, &levels)?;
    let mut frames = Vec::with_capacity(idx.len());
    for (fi, &t) in idx.iter().enumerate() {
        frames.push(frame_queries(g, cfg, &levels, &br, fi, t, image, true)?);
    }
    let mut targets = Vec::new();
    let mut positives = Vec::new();
    for (fi, fq) in frames.iter().enumerate() {
        for (i, c) in fq.cands.iter().enumerate() {
            let hit = best_gt(&c.bbox, &gts[fi], POSITIVE_IOU);
            targets.push(hit.map(|(j, _)| gts[fi][j].class_id));
            if hit.is_some() {
                positives.push((fi, i, targets.len() - 1));
            }
        }
    }
    let rows: Vec<FrameRows> = frames.iter().map(|f| f.rows).collect();
    let bank = build_queries(g, b, &rows)?;
    let agg = ticam::aggregate(g, b, &bank, cfg.heads)?;
    let ce = classification_loss(g, agg.class_logits, &targets)?;
    let l_det = g.add(det, ce)?;
    let num_rows = targets.len();
    if cfg.aggregation != Aggregation::Mask || positives.is_empty() {
        return Ok(FinetuneLosses { l_det, l_mask: None, total: l_det, num_rows, num_masks: 0 });
    }

    // mask branch over positively matched proposals of every frame
    let mcfg = cfg.mask_head();
    let stride = cfg.fpn_level.stride();
    let k = cfg.num_classes;
    let logits = g.value(agg.class_logits).clone();
    let mut pooled = Vec::new();
    let mut boxes = Vec::new();
    let mut classes = Vec::new();
    let mut frame_of = Vec::new();
    for (fi, fq) in frames.iter().enumerate() {
        let mine: Vec<&(usize, usize, usize)> = positives.iter().filter(|p| p.0 == fi).collect();
        if mine.is_empty() {
            continue;
        }
        let bx: Vec<BBox> = mine.iter().map(|p| fq.cands[p.1].bbox).collect();
        let fmap = frame_var(g, br.f_ins[cfg.fpn_level.index()], fi)?;
        let (pv, kept) = maskhead::pool_var(g, fmap, &bx, stride, mcfg.roi_size)?;
        if kept.is_empty() {
            continue;
        }
        pooled.push(pv);
        for &j in &kept {
            let row = logits.row(mine[j].2);
            let t = (0..k).max_by(|&a, &c| row[a].total_cmp(&row[c]).then(c.cmp(&a))).unwrap_or(0);
            boxes.push(bx[j]);
            classes.push(t);
            frame_of.push(fi);
        }
    }
    if boxes.is_empty() {
        return Ok(FinetuneLosses { l_det, l_mask: None, total: l_det, num_rows, num_masks: 0 });
    }
    let pooled = if pooled.len() == 1 { pooled[0] } else { g.concat_rows(&pooled)? };
    let masks = maskhead::predict_var(g, b, pooled)?;
    let channels = g.shape(masks)[1];
    let chan = classes.iter().map(|&t| channel_for(t, channels)).collect::<Result<Vec<_>>>()?;
    let selected = g.select_channel(masks, &chan)?;

    let sel = g.value(selected).clone();
    let (hm, wm) = (sel.shape()[1], sel.shape()[2]);
    let mut gt_masks: Vec<BinaryMask> = Vec::new();
    let mut gt_boxes: Vec<BBox> = Vec::new();
    let mut pairs = Vec::new();
    for (fi, &t) in idx.iter().enumerate() {
        let members: Vec<usize> = (0..boxes.len()).filter(|&r| frame_of[r] == fi).collect();
        if members.is_empty() {
            continue;
        }
        let ann = &clip.annotations[t];
        let filtered = FilteredMasks {
            masks: members.iter().map(|&r| Tensor::new(vec![hm, wm], sel.data()[r * hm * wm..(r + 1) * hm * wm].to_vec())).collect::<Result<_>>()?,
            classes: members.iter().map(|&r| classes[r]).collect(),
        };
        let fb: Vec<BBox> = members.iter().map(|&r| boxes[r]).collect();
        let gm: Vec<BinaryMask> = ann.iter().map(|a| a.mask.clone()).collect();
        let gb: Vec<BBox> = ann.iter().map(|a| a.bbox).collect();
        let offset = gt_masks.len();
        for (i, j) in match_targets(&filtered, &fb, &gm, &gb)? {
            pairs.push((members[i], offset + j));
        }
        gt_masks.extend(gm);
        gt_boxes.extend(gb);
    }
    let l_mask = maskhead::mask_loss_var(g, selected, &pairs, &gt_masks, &gt_boxes, cfg.loss)?;
    let scaled = g.scale(l_mask, lambda)?;
    let total = g.add(l_det, scaled)?;
    Ok(FinetuneLosses { l_det, l_mask: Some(l_mask), total, num_rows, num_masks: pairs.len() })
}

/// Reference-frame groups for inference: frame `t` joins group `t mod G`
/// with `G = ceil(T / m)`, so each group spans the whole clip.
pub fn inference_groups(num_frames: usize, m: usize) -> Vec<Vec<usize>> {
    let groups = num_frames.div_ceil(m.max(1)).max(1);
    (0..groups).map(|gi| (gi..num_frames).step_by(groups).collect()).collect()
}

/// Per-frame detections for a whole clip. Never builds mask predictions.
pub fn infer_clip(params: &Parameters, cfg: &ModelConfig, clip: &VideoClip) -> Result<Vec<Vec<FinalDetection>>> {
    let image = (clip.width() as f32, clip.height() as f32);
    let n = clip.frames.len();
    let mut out = vec![Vec::new(); n];
    for group in inference_groups(n, cfg.m_infer) {
        let mut g = Graph::new();
        let b = params.bind(&mut g, |_| false);
        let x = g.constant(frames_tensor(clip, &group)?);
        let levels = backbone_heads(&mut g, &b, x)?;
        if cfg.aggregation == Aggregation::None {
            for (fi, &t) in group.iter().enumerate() {
                let decoded = decode_frame(&g, &levels, fi, image)?;
                let all: Vec<Candidate> = decoded.iter().map(Candidate::from).collect();
                out[t] = select_candidates(&all, &cfg.select_params(false))?
                    .into_iter()
                    .map(|c| FinalDetection { bbox: c.bbox, class_id: c.class_id, score: c.score })
                    .collect();
            }
            continue;
        }
        let grp = aggregate_group(&mut g, &b, cfg, &levels, &group, image)?;
        let dets = final_detections(&grp.sets, &grp.origin, g.value(grp.agg.class_logits), cfg.score_mode)?;
        for (set, d) in grp.sets.iter().zip(dets) {
            out[set.frame_index] = d;
        }
    }
    Ok(out)
}

struct GroupOutput {
    sets: Vec<FrameProposals>,
    origin: Vec<(usize, usize)>,
    agg: ticam::Aggregated,
}

/// Proposal selection and temporal aggregation over the frames of `group`.
fn aggregate_group(g: &mut Graph, b: &Bound, cfg: &ModelConfig, levels: &[LevelVars], group: &[usize], image: (f32, f32)) -> Result<GroupOutput> {
    let br = branches(g, b, cfg, levels)?;
    let mut rows = Vec::new();
    let mut sets = Vec::new();
    for (fi, &t) in group.iter().enumerate() {
        let fq = frame_queries(g, cfg, levels, &br, fi, t, image, false)?;
        rows.push(fq.rows);
        sets.push(FrameProposals {
            frame_index: t,
            boxes: fq.cands.iter().map(|c| c.bbox).collect(),
            scores: fq.cands.iter().map(|c| c.score).collect(),
            objectness: fq.cands.iter().map(|c| c.objectness).collect(),
        });
    }
    let bank = build_queries(g, b, &rows)?;
    let agg = ticam::aggregate(g, b, &bank, cfg.heads)?;
    Ok(GroupOutput { sets, origin: bank.origin, agg })
}

/// Aggregated proposal features (the input of the TICAM classifier) of every
/// proposal overlapping a ground-truth object at IoU >= 0.5, grouped by that
/// object's class.
pub fn proposal_features(params: &Parameters, cfg: &ModelConfig, clips: &[VideoClip]) -> Result<Vec<Vec<Vec<f64>>>> {
    if cfg.aggregation == Aggregation::None {
        return Err(Error::Config("aggregation=none has no aggregated features".into()));
    }
    let mut by_class = vec![Vec::new(); cfg.num_classes];
    for clip in clips {
        let image = (clip.width() as f32, clip.height() as f32);
        for group in inference_groups(clip.frames.len(), cfg.m_infer) {
            let mut g = Graph::new();
            let b = params.bind(&mut g, |_| false);
            let x = g.constant(frames_tensor(clip, &group)?);
            let levels = backbone_heads(&mut g, &b, x)?;
            let out = aggregate_group(&mut g, &b, cfg, &levels, &group, image)?;
            let feats = g.value(out.agg.features);
            let d = feats.shape()[1];
            for (r, &(t, i)) in out.origin.iter().enumerate() {
                let set = out.sets.iter().find(|s| s.frame_index == t).ok_or_else(|| shape_err!("frame {t} missing from group"))?;
                let gts = clip.gt_objects(t);
                if let Some((j, _)) = best_gt(&set.boxes[i], &gts, POSITIVE_IOU) {
                    let class = gts[j].class_id;
                    if class >= cfg.num_classes {
                        return Err(shape_err!("class {class} beyond {}", cfg.num_classes));
                    }
                    by_class[class].push(feats.data()[r * d..(r + 1) * d].iter().map(|&v| v as f64).collect());
                }
            }
        }
    }
    Ok(by_class)
}

/// Detections and ground truth over clips, with globally unique frame ids.
pub fn collect_detections(params: &Parameters, cfg: &ModelConfig, clips: &[VideoClip]) -> Result<(Vec<Detection>, Vec<GroundTruth>)> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut frame_id = 0;
    for clip in clips {
        let per_frame = infer_clip(params, cfg, clip)?;
        let buckets = clip.track_buckets();
        for (t, fd) in per_frame.into_iter().enumerate() {
            dets.extend(fd.into_iter().map(|d| Detection { frame_id: frame_id + t, bbox: d.bbox, class_id: d.class_id, score: d.score }));
            for a in &clip.annotations[t] {
                gts.push(GroundTruth { frame_id: frame_id + t, bbox: a.bbox, class_id: a.class_id, bucket: buckets.get(&a.track_id).copied() });
            }
        }
        frame_id += clip.frames.len();
    }
    Ok((dets, gts))
}
