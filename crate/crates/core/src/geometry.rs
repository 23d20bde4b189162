//! Boxes, binary masks, IoU, NMS and RoIAlign.
//!
//! Boxes are half-open pixel rectangles `[x1,x2) × [y1,y2)` in absolute pixels.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub const fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn checked(self) -> Result<Self> {
        if self.is_valid() {
            Ok(self)
        } else {
            Err(Error::DegenerateBox { x1: self.x1, y1: self.y1, x2: self.x2, y2: self.y2 })
        }
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        (self.width().max(0.0) as f64) * (self.height().max(0.0) as f64)
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    pub fn clamped(&self, w: f32, h: f32) -> Self {
        Self::new(self.x1.clamp(0.0, w), self.y1.clamp(0.0, h), self.x2.clamp(0.0, w), self.y2.clamp(0.0, h))
    }

    pub fn to_f64(&self) -> [f64; 4] {
        [self.x1 as f64, self.y1 as f64, self.x2 as f64, self.y2 as f64]
    }
}

/// IoU without validity checks; zero when the union is empty.
pub(crate) fn iou_raw(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0) as f64;
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0) as f64;
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.checked()?;
    b.checked()?;
    Ok(iou_raw(a, b))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(shape_err!("mask {height}x{width} with {} bits", bits.len()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    /// Pixels whose centre lies inside `b`.
    pub fn from_box(height: usize, width: usize, b: &BBox) -> Self {
        let mut m = Self::empty(height, width);
        for r in 0..height {
            let cy = r as f32 + 0.5;
            if cy < b.y1 || cy >= b.y2 {
                continue;
            }
            for c in 0..width {
                let cx = c as f32 + 0.5;
                if cx >= b.x1 && cx < b.x2 {
                    m.bits[r * width + c] = true;
                }
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn same_dims(&self, o: &Self) -> Result<()> {
        if (self.height, self.width) != (o.height, o.width) {
            return Err(shape_err!("mask {}x{} vs {}x{}", self.height, self.width, o.height, o.width));
        }
        Ok(())
    }

    pub fn is_subset_of(&self, o: &Self) -> Result<bool> {
        self.same_dims(o)?;
        Ok(self.bits.iter().zip(&o.bits).all(|(&a, &b)| !a || b))
    }

    /// One layer of 8-neighbour dilation, clipped to the image.
    pub fn dilate(&self) -> Self {
        self.morph(true)
    }

    /// One layer of 8-neighbour erosion; pixels outside the image count as unset.
    pub fn erode(&self) -> Self {
        self.morph(false)
    }

    fn morph(&self, grow: bool) -> Self {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut out = self.clone();
        for r in 0..h {
            for c in 0..w {
                let mut any = false;
                let mut all = true;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        let v = rr >= 0 && rr < h && cc >= 0 && cc < w && self.bits[(rr * w + cc) as usize];
                        any |= v;
                        all &= v;
                    }
                }
                out.bits[(r * w + c) as usize] = if grow { any } else { all };
            }
        }
        out
    }

    /// Run-length encoding: alternating run lengths, row-major, starting with
    /// a (possibly empty) run of unset pixels.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut cur = false;
        let mut n = 0u32;
        for &b in &self.bits {
            if b != cur {
                runs.push(n);
                cur = b;
                n = 0;
            }
            n += 1;
        }
        runs.push(n);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[u32]) -> Result<Self> {
        let mut bits = Vec::with_capacity(height * width);
        for (i, &n) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat(i % 2 == 1).take(n as usize));
        }
        Self::new(height, width, bits)
    }
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Tight bounding box of the set pixels.
pub fn box_from_mask(mask: &BinaryMask) -> Option<BBox> {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    (r0 != usize::MAX).then(|| BBox::new(c0 as f32, r0 as f32, (c1 + 1) as f32, (r1 + 1) as f32))
}

/// Greedy NMS. Returns kept indices in descending score order; equal scores
/// keep the lower original index first.
pub fn nms(boxes: &[(BBox, f32)], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].1.total_cmp(&boxes[a].1).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou_raw(&boxes[k].0, &boxes[i].0) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

/// RoIAlign of one roi (feature-map coordinates) into `[C,out_h,out_w]`.
pub fn roi_align<T: Scalar>(
    fmap: &Tensor<T>,
    roi: &BBox,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<Tensor<T>> {
    roi.checked()?;
    let mut g = Graph::new();
    let x = g.constant(fmap.clone());
    let y = g.roi_align(x, &[roi.to_f64()], out_h, out_w, samples_per_bin)?;
    let c = fmap.shape()[0];
    g.value(y).clone().reshape(&[c, out_h, out_w])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0f32..50.0, 0f32..50.0, 0.5f32..30.0, 0.5f32..30.0).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(any::<bool>(), 30).prop_map(|b| BinaryMask::new(5, 6, b).unwrap())
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)).unwrap() - 1.0 / 7.0).abs() < 1e-9);
        assert!(iou(&a, &BBox::new(1.0, 1.0, 1.0, 3.0)).is_err());
    }

    #[test]
    fn mask_iou_examples() {
        let m = |idx: &[usize]| {
            let mut b = vec![false; 4];
            idx.iter().for_each(|&i| b[i] = true);
            BinaryMask::new(1, 4, b).unwrap()
        };
        assert_eq!(mask_iou(&m(&[0, 1]), &m(&[0, 1])).unwrap(), 1.0);
        assert_eq!(mask_iou(&m(&[0]), &m(&[3])).unwrap(), 0.0);
        assert!((mask_iou(&m(&[1, 2]), &m(&[2, 3])).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mask_iou(&m(&[]), &m(&[])).unwrap(), 0.0);
        assert!(mask_iou(&m(&[0]), &BinaryMask::empty(2, 2)).is_err());
    }

    #[test]
    fn box_from_mask_examples() {
        let full = BinaryMask::new(3, 5, vec![true; 15]).unwrap();
        assert_eq!(box_from_mask(&full), Some(BBox::new(0.0, 0.0, 5.0, 3.0)));
        assert_eq!(box_from_mask(&BinaryMask::empty(4, 4)), None);
        let mut m = BinaryMask::empty(6, 6);
        m.set(2, 3, true);
        assert_eq!(box_from_mask(&m), Some(BBox::new(3.0, 2.0, 4.0, 3.0)));
    }

    #[test]
    fn rle_examples() {
        assert_eq!(BinaryMask::new(2, 2, vec![true; 4]).unwrap().to_rle(), vec![0, 4]);
        assert_eq!(BinaryMask::empty(2, 2).to_rle(), vec![4]);
        assert!(BinaryMask::from_rle(2, 2, &[1, 2]).is_err());
    }

    #[test]
    fn nms_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[(a, 0.3)], 0.5), vec![0]);
        let b = BBox::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(nms(&[(a, 0.3), (b, 0.6)], 0.5), vec![1, 0]);
        assert_eq!(nms(&[(a, 0.8), (a, 0.9)], 0.5), vec![1]);
        assert_eq!(nms(&[(a, 0.9), (a, 0.9)], 0.5), vec![0]);
    }

    #[test]
    fn roi_align_constant_map() {
        let f = Tensor::<f64>::full(&[2, 5, 7], 1.25);
        let out = roi_align(&f, &BBox::new(0.3, 1.1, 6.2, 4.9), 3, 4, 2).unwrap();
        assert_eq!(out.shape(), &[2, 3, 4]);
        assert!(out.data().iter().all(|&v| (v - 1.25).abs() < 1e-12));
        assert!(roi_align(&f, &BBox::new(1.0, 1.0, 1.0, 2.0), 2, 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let (x, y) = (iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn mask_iou_symmetric_bounded(a in arb_mask(), b in arb_mask()) {
            let (x, y) = (mask_iou(&a, &b).unwrap(), mask_iou(&b, &a).unwrap());
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn box_mask_round_trip(x in 0u32..20, y in 0u32..20, w in 1u32..12, h in 1u32..12) {
            let b = BBox::new(x as f32, y as f32, (x + w) as f32, (y + h) as f32);
            prop_assert_eq!(box_from_mask(&BinaryMask::from_box(32, 32, &b)), Some(b));
        }

        #[test]
        fn rle_round_trip(m in arb_mask()) {
            let r = m.to_rle();
            prop_assert_eq!(r.iter().sum::<u32>(), 30);
            prop_assert_eq!(BinaryMask::from_rle(5, 6, &r).unwrap(), m);
        }

        #[test]
        fn nms_keeps_sorted_and_separated(bs in proptest::collection::vec((arb_box(), 0f32..1.0), 0..30), thr in 0.05f64..1.0) {
            let kept = nms(&bs, thr);
            for w in kept.windows(2) {
                prop_assert!(bs[w[0]].1 >= bs[w[1]].1);
            }
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    prop_assert!(iou_raw(&bs[a].0, &bs[b].0) <= thr);
                }
            }
        }

        #[test]
        fn roi_align_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::<f64>::from_fn(&[3, 6, 6], |_| rng.gen_range(-1.0..1.0));
            let roi = BBox::new(0.7, 0.2, 5.1, 4.4);
            let a = roi_align(&f.map(|v| alpha * v), &roi, 2, 3, 2).unwrap();
            let b = roi_align(&f, &roi, 2, 3, 2).unwrap().map(|v| alpha * v);
            prop_assert!(a.max_abs_diff(&b) < 1e-6);
        }
    }
}
