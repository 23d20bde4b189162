//! Feature and prediction selection: top-k by confidence, class-agnostic
//! NMS, truncation, and row-aligned feature gathering.

use crate::detector::{Decoded, Level, LEVELS};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{nms, BBox};
use crate::numerics::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub bbox: BBox,
    /// Best class score `σ(obj)·σ(cls)`.
    pub score: f32,
    pub class_id: usize,
    pub objectness: f32,
    pub level: Level,
    pub cell: usize,
}

impl From<&Decoded> for Candidate {
    fn from(d: &Decoded) -> Self {
        let (class_id, &score) = d
            .scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap_or((0, &0.0));
        Self { bbox: d.bbox, score, class_id, objectness: d.objectness, level: d.level, cell: d.cell }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectParams {
    pub k: usize,
    pub nms_threshold: f64,
    pub n_cap: usize,
}

impl SelectParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_cap == 0 || self.k < self.n_cap {
            return Err(Error::InvalidArgument(format!("need k >= n_cap >= 1, got k={} n_cap={}", self.k, self.n_cap)));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!("NMS threshold {} outside (0, 1]", self.nms_threshold)));
        }
        Ok(())
    }
}

/// Top-k by score (ties by input order), then NMS, then the first `n_cap`.
pub fn select_candidates(cands: &[Candidate], p: &SelectParams) -> Result<Vec<Candidate>> {
    p.validate()?;
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].score.total_cmp(&cands[a].score).then(a.cmp(&b)));
    order.truncate(p.k);
    let pool: Vec<(BBox, f32)> = order.iter().map(|&i| (cands[i].bbox, cands[i].score)).collect();
    Ok(nms(&pool, p.nms_threshold).into_iter().take(p.n_cap).map(|j| cands[order[j]].clone()).collect())
}

/// Rows of per-level `[C,h,w]` maps at the given cells, as `[n, C]`.
pub fn gather_rows<T: Scalar>(g: &mut Graph<T>, maps: &[Var], cells: &[(Level, usize)]) -> Result<Var> {
    if maps.len() != LEVELS.len() {
        return Err(shape_err!("gather_rows needs one map per level, got {}", maps.len()));
    }
    let mut rows = Vec::with_capacity(3);
    let mut offsets = [0usize; 3];
    let mut acc = 0;
    for (l, &m) in maps.iter().enumerate() {
        offsets[l] = acc;
        let s = g.shape(m);
        acc += s[1] * s[2];
        rows.push(g.cells_to_rows(m)?);
    }
    let all = g.concat_rows(&rows)?;
    let idx: Vec<usize> = cells.iter().map(|&(l, c)| offsets[l.index()] + c).collect();
    g.index_rows(all, &idx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub frame_index: usize,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f32>,
    pub class_ids: Vec<usize>,
    pub objectness: Vec<f32>,
    pub cells: Vec<(Level, usize)>,
    pub cls_feats: Tensor,
    pub ins_feats: Tensor,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Selection on one frame with features taken from per-level maps
/// (`f_cls[l]: [C,h,w]`, `f_ins[l]: [C',h,w]`).
pub fn select(
    frame_index: usize,
    decoded: &[Decoded],
    f_cls: &[Tensor],
    f_ins: &[Tensor],
    p: &SelectParams,
) -> Result<ProposalSet> {
    let cands: Vec<Candidate> = decoded.iter().map(Candidate::from).collect();
    let kept = select_candidates(&cands, p)?;
    let cells: Vec<(Level, usize)> = kept.iter().map(|c| (c.level, c.cell)).collect();
    let mut g = Graph::<f32>::new();
    let mut gather = |maps: &[Tensor]| -> Result<Tensor> {
        let vars: Vec<Var> = maps.iter().map(|t| g.constant(t.clone())).collect();
        let v = gather_rows(&mut g, &vars, &cells)?;
        Ok(g.value(v).clone())
    };
    let cls_feats = gather(f_cls)?;
    let ins_feats = gather(f_ins)?;
    Ok(ProposalSet {
        frame_index,
        boxes: kept.iter().map(|c| c.bbox).collect(),
        scores: kept.iter().map(|c| c.score).collect(),
        class_ids: kept.iter().map(|c| c.class_id).collect(),
        objectness: kept.iter().map(|c| c.objectness).collect(),
        cells,
        cls_feats,
        ins_feats,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::geometry::iou_raw;

    fn cand(x: f32, score: f32, cell: usize) -> Candidate {
        Candidate { bbox: BBox::new(x, 0.0, x + 10.0, 10.0), score, class_id: 0, objectness: score, level: Level::P3, cell }
    }

    fn params(k: usize, thr: f64, n_cap: usize) -> SelectParams {
        SelectParams { k, nms_threshold: thr, n_cap }
    }

    #[test]
    fn select_examples() {
        let c: Vec<_> = (0..5).map(|i| cand(20.0 * i as f32, 0.1 * (i + 1) as f32, i)).collect();
        let kept = select_candidates(&c, &params(750, 0.5, 30)).unwrap();
        assert_eq!(kept.iter().map(|c| c.cell).collect::<Vec<_>>(), vec![4, 3, 2, 1, 0]);
        let dup = [cand(0.0, 0.9, 0), cand(0.0, 0.8, 1)];
        assert_eq!(select_candidates(&dup, &params(750, 0.5, 30)).unwrap(), vec![dup[0].clone()]);
        let one = select_candidates(&c, &params(750, 0.5, 1)).unwrap();
        assert_eq!(one, vec![c[4].clone()]);
        assert!(select_candidates(&[], &params(10, 0.5, 3)).unwrap().is_empty());
        assert!(select_candidates(&c, &params(2, 0.5, 3)).is_err());
        assert!(select_candidates(&c, &params(5, 0.0, 3)).is_err());
    }

    #[test]
    fn rows_follow_their_cells() {
        let maps: Vec<Tensor> = [(8, 8), (4, 4), (2, 2)]
            .iter()
            .enumerate()
            .map(|(l, &(h, w))| Tensor::from_fn(&[3, h, w], |i| (l * 1000 + i) as f32))
            .collect();
        let decoded: Vec<Decoded> = [(Level::P4, 5, 0.9f32), (Level::P3, 63, 0.8), (Level::P5, 2, 0.7)]
            .iter()
            .enumerate()
            .map(|(i, &(level, cell, s))| Decoded {
                bbox: BBox::new(20.0 * i as f32, 0.0, 20.0 * i as f32 + 10.0, 10.0),
                scores: vec![s],
                objectness: s,
                level,
                cell,
            })
            .collect();
        let ps = select(0, &decoded, &maps, &maps, &params(10, 0.5, 10)).unwrap();
        assert_eq!(ps.len(), 3);
        for (i, &(l, cell)) in ps.cells.iter().enumerate() {
            let m = &maps[l.index()];
            let plane = m.shape()[1] * m.shape()[2];
            let expect: Vec<f32> = (0..3).map(|c| m.data()[c * plane + cell]).collect();
            assert_eq!(ps.cls_feats.row(i), expect.as_slice());
        }
    }

    proptest! {
        #[test]
        fn proposal_invariants(raw in proptest::collection::vec((0f32..50.0, 0f32..50.0, 0f32..1.0), 0..40), n_cap in 1usize..10, thr in 0.1f64..1.0) {
            let c: Vec<Candidate> = raw.iter().enumerate().map(|(i, &(x, y, s))| Candidate {
                bbox: BBox::new(x, y, x + 12.0, y + 12.0), score: s, class_id: 0, objectness: s, level: Level::P3, cell: i,
            }).collect();
            let kept = select_candidates(&c, &params(20, thr, n_cap)).unwrap();
            prop_assert!(kept.len() <= n_cap);
            for w in kept.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(iou_raw(&a.bbox, &b.bbox) <= thr);
                }
            }
        }

        #[test]
        fn full_cap_and_no_suppression_is_top_k(scores in proptest::collection::vec(0f32..1.0, 1..30)) {
            let c: Vec<Candidate> = scores.iter().enumerate().map(|(i, &s)| cand(i as f32, s, i)).collect();
            let k = c.len();
            let kept = select_candidates(&c, &params(k, 1.0, k)).unwrap();
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            prop_assert_eq!(kept.iter().map(|c| c.cell).collect::<Vec<_>>(), order);
        }
    }
}
