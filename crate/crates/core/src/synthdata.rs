//! Deterministic synthetic videos of moving textured shapes with exact
//! visible-part masks, plus a pseudo-mask corruption model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::GtObject;
use crate::error::{Error, Result};
use crate::geometry::{box_from_mask, iou_raw, BBox, BinaryMask};
use crate::numerics::{io, Tensor};

pub const NUM_CLASSES: usize = 8;
const SHAPES: [&str; 4] = ["rect", "ellipse", "triangle", "cross"];
const TEXTURES: [&str; 2] = ["solid", "striped"];

pub fn class_name(id: usize) -> String {
    format!("{}_{}", SHAPES[id / 2], TEXTURES[id % 2])
}

pub fn class_names() -> Vec<String> {
    (0..NUM_CLASSES).map(class_name).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MotionSpeed {
    Slow,
    Medium,
    Fast,
}

pub const SPEEDS: [MotionSpeed; 3] = [MotionSpeed::Slow, MotionSpeed::Medium, MotionSpeed::Fast];

impl MotionSpeed {
    /// Range the per-object target consecutive-frame IoU is drawn from.
    fn target_range(self) -> (f64, f64) {
        match self {
            MotionSpeed::Slow => (0.93, 0.98),
            MotionSpeed::Medium => (0.75, 0.85),
            MotionSpeed::Fast => (0.45, 0.62),
        }
    }
}

/// Bucket by mean IoU: Slow iff > 0.9, Medium iff in [0.7, 0.9], Fast iff < 0.7.
pub fn motion_speed_of(ious: &[f64]) -> Result<MotionSpeed> {
    if ious.is_empty() {
        return Err(Error::InvalidArgument("motion speed of an empty IoU sequence".into()));
    }
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    Ok(if mean > 0.9 {
        MotionSpeed::Slow
    } else if mean >= 0.7 {
        MotionSpeed::Medium
    } else {
        MotionSpeed::Fast
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub blur_prob: f64,
    pub occlusion_prob: f64,
    pub defocus_strength: f64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self { blur_prob: 0.3, occlusion_prob: 0.3, defocus_strength: 0.5 }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("blur_prob", self.blur_prob), ("occlusion_prob", self.occlusion_prob), ("defocus_strength", self.defocus_strength)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{n} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
    pub mask: BinaryMask,
    pub track_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Tensor>,
    pub annotations: Vec<Vec<Annotation>>,
    /// Requested motion band per track.
    pub track_speeds: Vec<MotionSpeed>,
    /// Full-object (unoccluded) box of each track in each frame: `[track][frame]`.
    pub track_boxes: Vec<Vec<BBox>>,
    pub blurred: Vec<bool>,
    pub seed: u64,
}

impl VideoClip {
    pub fn height(&self) -> usize {
        self.frames[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[2]
    }

    pub fn gt_objects(&self, frame: usize) -> Vec<GtObject> {
        self.annotations[frame].iter().map(|a| GtObject { bbox: a.bbox, class_id: a.class_id }).collect()
    }

    /// Consecutive-frame IoUs of a track's full-object box.
    pub fn track_ious(&self, track: usize) -> Vec<f64> {
        self.track_boxes[track].windows(2).map(|w| iou_raw(&w[0], &w[1])).collect()
    }

    /// Measured motion bucket per track (empty for single-frame clips).
    pub fn track_buckets(&self) -> BTreeMap<usize, MotionSpeed> {
        (0..self.track_boxes.len())
            .filter_map(|t| Some((t, motion_speed_of(&self.track_ious(t)).ok()?)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_objects: usize,
    /// `None` draws a band per object.
    pub motion: Option<MotionSpeed>,
    pub degradation: DegradationSpec,
    /// Largest per-frame displacement in pixels.
    pub max_speed: f64,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            num_frames: 8,
            height: 64,
            width: 64,
            num_objects: 2,
            motion: None,
            degradation: DegradationSpec::default(),
            max_speed: 12.0,
            min_size: 14.0,
            max_size: 26.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: usize,
    texture: usize,
    color: [f32; 3],
    w: f64,
    h: f64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    occluder: Option<Occluder>,
}

#[derive(Clone, Copy, Debug)]
struct Occluder {
    dx: f64,
    dy: f64,
    w: f64,
    h: f64,
    color: [f32; 3],
}

struct Clutter {
    kind: u8,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    color: [f32; 3],
}

fn rand_color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    // one dominant channel keeps colours saturated
    let mut c = [rng.gen_range(lo..hi) * 0.4, rng.gen_range(lo..hi) * 0.4, rng.gen_range(lo..hi) * 0.4];
    c[rng.gen_range(0..3)] = rng.gen_range(lo..hi);
    c
}

/// Whether the pixel centre `(px, py)` lies in a shape with top-left `(x, y)`.
fn inside(shape: usize, x: f64, y: f64, w: f64, h: f64, px: f64, py: f64) -> bool {
    let (u, v) = ((px - x) / w, (py - y) / h);
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return false;
    }
    match shape {
        0 => true,
        1 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        2 => (u - 0.5).abs() <= 0.5 * v,
        _ => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0,
    }
}

/// Displacement along `dir` whose shifted-box IoU equals `target`.
fn displacement_for(w: f64, h: f64, dir: (f64, f64), target: f64) -> f64 {
    let iou_at = |d: f64| {
        let a = BBox::new(0.0, 0.0, w as f32, h as f32);
        let b = BBox::new((d * dir.0) as f32, (d * dir.1) as f32, (w + d * dir.0) as f32, (h + d * dir.1) as f32);
        iou_raw(&a, &b)
    };
    let (mut lo, mut hi) = (0.0, w.max(h));
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if iou_at(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn box_blur(frame: &mut [f32], h: usize, w: usize, r: usize) {
    let src = frame.to_vec();
    for c in 0..3 {
        let p = &src[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                        s += p[yy * w + xx];
                        n += 1.0;
                    }
                }
                frame[c * h * w + y * w + x] = s / n;
            }
        }
    }
}

pub fn generate_clip(spec: &ClipSpec, seed: u64) -> Result<VideoClip> {
    let (hh, ww) = (spec.height, spec.width);
    if hh % 32 != 0 || ww % 32 != 0 || hh == 0 || ww == 0 {
        return Err(Error::InvalidArgument(format!("clip size {hh}x{ww} not divisible by 32")));
    }
    if spec.num_objects == 0 || spec.num_frames == 0 {
        return Err(Error::InvalidArgument("clips need at least one object and one frame".into()));
    }
    spec.degradation.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fh, fw) = (hh as f64, ww as f64);

    let base = rand_color(&mut rng, 0.1, 0.45);
    let grad = [rng.gen_range(-0.15..0.15f32), rng.gen_range(-0.15..0.15f32)];
    let clutter: Vec<Clutter> = (0..rng.gen_range(6..12))
        .map(|_| Clutter {
            kind: rng.gen_range(0..3),
            x: rng.gen_range(0.0..fw),
            y: rng.gen_range(0.0..fh),
            w: rng.gen_range(2.0..9.0),
            h: rng.gen_range(2.0..9.0),
            color: rand_color(&mut rng, 0.3, 1.0),
        })
        .collect();

    let mut objects = Vec::with_capacity(spec.num_objects);
    let mut track_speeds = Vec::with_capacity(spec.num_objects);
    for _ in 0..spec.num_objects {
        let band = spec.motion.unwrap_or_else(|| SPEEDS[rng.gen_range(0..3)]);
        let w = rng.gen_range(spec.min_size..=spec.max_size).min(fw);
        let h = rng.gen_range(spec.min_size..=spec.max_size).min(fh);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let dir = (theta.cos(), theta.sin());
        let (lo, hi) = band.target_range();
        let target = rng.gen_range(lo..hi);
        let d = displacement_for(w, h, dir, target);
        if d > spec.max_speed || d >= (fw - w).max(fh - h) {
            return Err(Error::UnreachableBand(format!(
                "{band:?} needs {d:.2} px/frame for a {w:.1}x{h:.1} object (limit {})",
                spec.max_speed
            )));
        }
        let occluder = rng.gen_bool(spec.degradation.occlusion_prob).then(|| {
            let (ow, oh) = (w * rng.gen_range(0.35..0.6), h * rng.gen_range(0.35..0.6));
            Occluder {
                dx: rng.gen_range(-0.2 * ow..w - 0.8 * ow),
                dy: rng.gen_range(-0.2 * oh..h - 0.8 * oh),
                w: ow,
                h: oh,
                color: rand_color(&mut rng, 0.2, 1.0),
            }
        });
        objects.push(Object {
            shape: rng.gen_range(0..4),
            texture: rng.gen_range(0..2),
            color: rand_color(&mut rng, 0.45, 1.0),
            w,
            h,
            x: rng.gen_range(0.0..=fw - w),
            y: rng.gen_range(0.0..=fh - h),
            vx: d * dir.0,
            vy: d * dir.1,
            occluder,
        });
        track_speeds.push(band);
    }

    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut annotations = Vec::with_capacity(spec.num_frames);
    let mut blurred = Vec::with_capacity(spec.num_frames);
    let mut track_boxes = vec![Vec::with_capacity(spec.num_frames); objects.len()];
    for _ in 0..spec.num_frames {
        let mut img = vec![0f32; 3 * hh * ww];
        // owner[p]: None = background, Some(i) = object i, Some(usize::MAX) = occluder
        let mut owner: Vec<Option<usize>> = vec![None; hh * ww];
        for y in 0..hh {
            for x in 0..ww {
                let shade = grad[0] * (x as f32 / ww as f32 - 0.5) + grad[1] * (y as f32 / hh as f32 - 0.5);
                for c in 0..3 {
                    img[c * hh * ww + y * ww + x] = base[c] + shade;
                }
            }
        }
        let paint = |img: &mut [f32], owner: &mut [Option<usize>], p: usize, col: [f32; 3], who: Option<usize>| {
            for c in 0..3 {
                img[c * hh * ww + p] = col[c];
            }
            if who.is_some() {
                owner[p] = who;
            }
        };
        for cl in &clutter {
            for y in 0..hh {
                for x in 0..ww {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let hit = match cl.kind {
                        0 => inside(1, cl.x, cl.y, cl.w, cl.h, px, py),
                        1 => inside(0, cl.x, cl.y, cl.w, 1.5, px, py),
                        _ => inside(0, cl.x, cl.y, 1.5, cl.h, px, py),
                    };
                    if hit {
                        paint(&mut img, &mut owner, y * ww + x, cl.color, None);
                    }
                }
            }
        }
        for (i, o) in objects.iter().enumerate() {
            let dark = o.color.map(|v| v * 0.3);
            for y in 0..hh {
                for x in 0..ww {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if inside(o.shape, o.x, o.y, o.w, o.h, px, py) {
                        let stripe = o.texture == 1 && (((py - o.y) / 2.0).floor() as i64) % 2 == 1;
                        paint(&mut img, &mut owner, y * ww + x, if stripe { dark } else { o.color }, Some(i));
                    }
                }
            }
            if let Some(oc) = o.occluder {
                for y in 0..hh {
                    for x in 0..ww {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        if inside(1, o.x + oc.dx, o.y + oc.dy, oc.w, oc.h, px, py) {
                            paint(&mut img, &mut owner, y * ww + x, oc.color, Some(usize::MAX));
                        }
                    }
                }
            }
        }
        let mut anns = Vec::new();
        for (i, o) in objects.iter().enumerate() {
            let mut full = BinaryMask::empty(hh, ww);
            for y in 0..hh {
                for x in 0..ww {
                    if inside(o.shape, o.x, o.y, o.w, o.h, x as f64 + 0.5, y as f64 + 0.5) {
                        full.set(y, x, true);
                    }
                }
            }
            track_boxes[i].push(box_from_mask(&full).unwrap_or(BBox::new(o.x as f32, o.y as f32, (o.x + o.w) as f32, (o.y + o.h) as f32)));
            let bits: Vec<bool> = owner.iter().map(|&w| w == Some(i)).collect();
            let mask = BinaryMask::new(hh, ww, bits)?;
            if mask.count() >= 12 {
                let bbox = box_from_mask(&mask).expect("non-empty mask");
                anns.push(Annotation { bbox, class_id: o.shape * 2 + o.texture, mask, track_id: i });
            }
        }
        let blur = rng.gen_bool(spec.degradation.blur_prob);
        if blur {
            let r = 1 + (spec.degradation.defocus_strength * 2.0).round() as usize;
            box_blur(&mut img, hh, ww, r);
        }
        for v in img.iter_mut() {
            *v = (*v + rng.gen_range(-0.03..0.03f32)).clamp(0.0, 1.0);
        }
        frames.push(Tensor::new(vec![3, hh, ww], img)?);
        annotations.push(anns);
        blurred.push(blur);

        for o in objects.iter_mut() {
            o.x += o.vx;
            o.y += o.vy;
            if o.x < 0.0 || o.x > fw - o.w {
                o.vx = -o.vx;
                o.x = if o.x < 0.0 { -o.x } else { 2.0 * (fw - o.w) - o.x };
            }
            if o.y < 0.0 || o.y > fh - o.h {
                o.vy = -o.vy;
                o.y = if o.y < 0.0 { -o.y } else { 2.0 * (fh - o.h) - o.y };
            }
        }
    }
    Ok(VideoClip { frames, annotations, track_speeds, track_boxes, blurred, seed })
}

/// Pseudo masks for every annotation: each is eroded or dilated by whole
/// layers within a random area budget, or replaced by its filled box with
/// probability `drop_prob`.
pub fn corrupt_masks(
    clip: &VideoClip,
    erosion_frac: f64,
    dilation_frac: f64,
    drop_prob: f64,
    seed: u64,
) -> Result<Vec<Vec<BinaryMask>>> {
    for (n, v, hi) in [("erosion_frac", erosion_frac, 0.5), ("dilation_frac", dilation_frac, 0.5), ("drop_prob", drop_prob, 1.0)] {
        if !(0.0..=hi).contains(&v) {
            return Err(Error::InvalidArgument(format!("{n} = {v} outside [0, {hi}]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ clip.seed.rotate_left(17));
    let mut out = Vec::with_capacity(clip.annotations.len());
    for anns in &clip.annotations {
        let mut frame = Vec::with_capacity(anns.len());
        for a in anns {
            let drop = rng.gen::<f64>() < drop_prob;
            let grow = rng.gen_bool(0.5);
            let u: f64 = rng.gen();
            let gt = &a.mask;
            if drop {
                frame.push(BinaryMask::from_box(gt.height(), gt.width(), &a.bbox));
                continue;
            }
            let area = gt.count() as f64;
            let erode = erosion_frac > 0.0 && (dilation_frac == 0.0 || !grow);
            let mut m = gt.clone();
            if erode {
                let floor = (1.0 - u * erosion_frac) * area;
                loop {
                    let next = m.erode();
                    if next.count() == 0 || (next.count() as f64) < floor {
                        break;
                    }
                    m = next;
                }
            } else if dilation_frac > 0.0 {
                let ceil = (1.0 + u * dilation_frac) * area;
                loop {
                    let next = m.dilate();
                    if next.count() as f64 > ceil || next.count() == m.count() {
                        break;
                    }
                    m = next;
                }
            }
            frame.push(m);
        }
        out.push(frame);
    }
    Ok(out)
}

/// Dataset-level generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub clip: ClipSpec,
    pub max_objects: usize,
}

/// Clip `i` uses seed `hash(seed, i)` and `1..=max_objects` objects.
pub fn generate_split(spec: &DatasetSpec, clips: usize, seed: u64) -> Result<Vec<VideoClip>> {
    (0..clips)
        .map(|i| {
            let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64).rotate_left(23) ^ 0x5851_F42D;
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut cs = spec.clip.clone();
            cs.num_objects = rng.gen_range(1..=spec.max_objects.max(1));
            generate_clip(&cs, s)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    classes: Vec<String>,
    height: usize,
    width: usize,
    splits: BTreeMap<String, Vec<ClipEntry>>,
}

#[derive(Serialize, Deserialize)]
struct ClipEntry {
    dir: String,
    frames: usize,
    seed: u64,
    track_speeds: Vec<MotionSpeed>,
    track_boxes: Vec<Vec<BBox>>,
}

#[derive(Serialize, Deserialize)]
struct FrameAnnotations {
    blurred: bool,
    objects: Vec<ObjectRecord>,
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    bbox: [f32; 4],
    class_id: usize,
    track_id: usize,
    rle: Vec<u32>,
}

/// Writes `manifest.json`, per-frame FVT1 images and per-frame annotation
/// JSON with run-length-encoded masks.
pub fn write_dataset(dir: &Path, splits: &[(&str, &[VideoClip])]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest { classes: class_names(), height: 0, width: 0, splits: BTreeMap::new() };
    for (name, clips) in splits {
        let mut entries = Vec::with_capacity(clips.len());
        for (i, clip) in clips.iter().enumerate() {
            let rel = format!("{name}/{i:05}");
            let cdir = dir.join(&rel);
            fs::create_dir_all(&cdir)?;
            (manifest.height, manifest.width) = (clip.height(), clip.width());
            for (f, frame) in clip.frames.iter().enumerate() {
                io::save_fvt1(&cdir.join(format!("{f:03}.fvt")), frame)?;
                let rec = FrameAnnotations {
                    blurred: clip.blurred[f],
                    objects: clip.annotations[f]
                        .iter()
                        .map(|a| ObjectRecord {
                            bbox: [a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2],
                            class_id: a.class_id,
                            track_id: a.track_id,
                            rle: a.mask.to_rle(),
                        })
                        .collect(),
                };
                fs::write(cdir.join(format!("{f:03}.json")), serde_json::to_string(&rec)?)?;
            }
            entries.push(ClipEntry {
                dir: rel,
                frames: clip.frames.len(),
                seed: clip.seed,
                track_speeds: clip.track_speeds.clone(),
                track_boxes: clip.track_boxes.clone(),
            });
        }
        manifest.splits.insert((*name).to_owned(), entries);
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<BTreeMap<String, Vec<VideoClip>>> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let (h, w) = (manifest.height, manifest.width);
    let mut out = BTreeMap::new();
    for (name, entries) in manifest.splits {
        let mut clips = Vec::with_capacity(entries.len());
        for e in entries {
            let cdir = dir.join(&e.dir);
            let mut clip = VideoClip {
                frames: Vec::with_capacity(e.frames),
                annotations: Vec::with_capacity(e.frames),
                track_speeds: e.track_speeds,
                track_boxes: e.track_boxes,
                blurred: Vec::with_capacity(e.frames),
                seed: e.seed,
            };
            for f in 0..e.frames {
                clip.frames.push(io::load_fvt1(&cdir.join(format!("{f:03}.fvt")))?);
                let rec: FrameAnnotations = serde_json::from_str(&fs::read_to_string(cdir.join(format!("{f:03}.json")))?)?;
                clip.blurred.push(rec.blurred);
                let mut anns = Vec::with_capacity(rec.objects.len());
                for o in rec.objects {
                    let [x1, y1, x2, y2] = o.bbox;
                    anns.push(Annotation {
                        bbox: BBox::new(x1, y1, x2, y2),
                        class_id: o.class_id,
                        mask: BinaryMask::from_rle(h, w, &o.rle)?,
                        track_id: o.track_id,
                    });
                }
                clip.annotations.push(anns);
            }
            clips.push(clip);
        }
        out.insert(name, clips);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn spec(motion: Option<MotionSpeed>, occ: f64) -> ClipSpec {
        ClipSpec {
            num_objects: 3,
            motion,
            degradation: DegradationSpec { blur_prob: 0.3, occlusion_prob: occ, defocus_strength: 0.5 },
            ..ClipSpec::default()
        }
    }

    #[test]
    fn deterministic_and_consistent() {
        let a = generate_clip(&spec(None, 0.5), 11).unwrap();
        assert_eq!(a, generate_clip(&spec(None, 0.5), 11).unwrap());
        assert_ne!(a.frames, generate_clip(&spec(None, 0.5), 12).unwrap().frames);
        for anns in &a.annotations {
            for ann in anns {
                assert_eq!(box_from_mask(&ann.mask), Some(ann.bbox));
                assert!(ann.class_id < NUM_CLASSES);
            }
        }
        assert!(a.frames.iter().all(|f| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn slow_objects_stay_slow() {
        for seed in 0..10 {
            let clip = generate_clip(&spec(Some(MotionSpeed::Slow), 0.0), seed).unwrap();
            for t in 0..3 {
                let ious = clip.track_ious(t);
                if !ious.is_empty() {
                    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
                    assert!(mean > 0.9, "seed {seed} track {t}: {mean}");
                }
            }
        }
    }

    #[test]
    fn unreachable_band_is_an_error() {
        let s = ClipSpec { motion: Some(MotionSpeed::Fast), max_speed: 1.0, ..spec(None, 0.0) };
        assert!(matches!(generate_clip(&s, 0), Err(Error::UnreachableBand(_))));
        let bad = ClipSpec { height: 48, ..ClipSpec::default() };
        assert!(generate_clip(&bad, 0).is_err());
    }

    #[test]
    fn speed_buckets_at_boundaries() {
        assert_eq!(motion_speed_of(&[0.95]).unwrap(), MotionSpeed::Slow);
        assert_eq!(motion_speed_of(&[0.9]).unwrap(), MotionSpeed::Medium);
        assert_eq!(motion_speed_of(&[0.7]).unwrap(), MotionSpeed::Medium);
        assert_eq!(motion_speed_of(&[0.5]).unwrap(), MotionSpeed::Fast);
        assert!(motion_speed_of(&[]).is_err());
    }

    #[test]
    fn corruption_limits() {
        let clip = generate_clip(&spec(None, 0.3), 3).unwrap();
        let same = corrupt_masks(&clip, 0.0, 0.0, 0.0, 1).unwrap();
        for (p, a) in same.iter().zip(&clip.annotations) {
            assert_eq!(p, &a.iter().map(|x| x.mask.clone()).collect::<Vec<_>>());
        }
        let dropped = corrupt_masks(&clip, 0.2, 0.2, 1.0, 1).unwrap();
        for (p, a) in dropped.iter().zip(&clip.annotations) {
            for (m, ann) in p.iter().zip(a) {
                assert_eq!(m, &BinaryMask::from_box(64, 64, &ann.bbox));
            }
        }
        assert!(corrupt_masks(&clip, 0.6, 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn erosion_stays_within_bounds() {
        let clip = generate_clip(&spec(None, 0.3), 4).unwrap();
        for seed in 0..100 {
            let p = corrupt_masks(&clip, 0.2, 0.0, 0.0, seed).unwrap();
            for (pf, af) in p.iter().zip(&clip.annotations) {
                for (m, a) in pf.iter().zip(af) {
                    assert!(m.is_subset_of(&a.mask.dilate()).unwrap());
                    assert!(m.count() as f64 >= 0.5 * a.mask.count() as f64);
                }
            }
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = DatasetSpec { clip: ClipSpec { num_frames: 3, ..ClipSpec::default() }, max_objects: 2 };
        let train = generate_split(&ds, 2, 1).unwrap();
        write_dataset(dir.path(), &[("train", &train)]).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back["train"], train);
    }

    proptest! {
        #[test]
        fn bucket_function_is_total(v in proptest::collection::vec(0.0f64..=1.0, 1..10)) {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let b = motion_speed_of(&v).unwrap();
            let expect = if mean > 0.9 { MotionSpeed::Slow } else if mean >= 0.7 { MotionSpeed::Medium } else { MotionSpeed::Fast };
            prop_assert_eq!(b, expect);
        }

        #[test]
        fn dilation_stays_in_image(seed in 0u64..50) {
            let clip = generate_clip(&spec(None, 0.3), seed).unwrap();
            let p = corrupt_masks(&clip, 0.0, 0.5, 0.0, seed).unwrap();
            for pf in &p {
                for m in pf {
                    prop_assert_eq!((m.height(), m.width()), (64, 64));
                }
            }
        }
    }
}
