//! Slice-level forward/backward kernels used by the graph ops.

use super::scalar::{cst, Scalar};

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn axpy<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// `[rows, cols]` → `[cols, rows]`.
pub fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub fn softmax_rows<T: Scalar>(x: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - m).exp();
            s += *o;
        }
        dst.iter_mut().for_each(|o| *o = *o / s);
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn macs(&self) -> usize {
        self.cout * self.cin * self.kh * self.kw * self.ho * self.wo
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.ho * self.wo;
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let seg = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = (oy + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            seg.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in seg.iter_mut().enumerate() {
                            let ix = (ox + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        let plane = self.ho * self.wo;
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut gx[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, &v) in src[oy * self.wo..(oy + 1) * self.wo].iter().enumerate() {
                            let ix = (ox + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, n: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (in_sz, plane, k) = (g.cin * g.h * g.w, g.ho * g.wo, g.k());
    let mut out = vec![T::zero(); n * g.cout * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * plane] };
    for s in 0..n {
        let xs = &x[s * in_sz..(s + 1) * in_sz];
        let dst = &mut out[s * g.cout * plane..(s + 1) * g.cout * plane];
        for (co, row) in dst.chunks_mut(plane).enumerate() {
            row.iter_mut().for_each(|v| *v = b[co]);
        }
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            g.im2col(xs, &mut cols);
            &cols
        };
        T::gemm(g.cout, k, plane, w, false, src, false, dst, true);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let (in_sz, plane, k) = (g.cin * g.h * g.w, g.ho * g.wo, g.k());
    let mut cols = vec![T::zero(); k * plane];
    for s in 0..n {
        let xs = &x[s * in_sz..(s + 1) * in_sz];
        let go = &gout[s * g.cout * plane..(s + 1) * g.cout * plane];
        if let Some(gb) = gb.as_deref_mut() {
            for (co, row) in go.chunks(plane).enumerate() {
                gb[co] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            let src: &[T] = if g.is_pointwise() {
                xs
            } else {
                g.im2col(xs, &mut cols);
                &cols
            };
            T::gemm(g.cout, plane, k, go, false, src, true, gw, true);
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gxs = &mut gx[s * in_sz..(s + 1) * in_sz];
            if g.is_pointwise() {
                T::gemm(k, g.cout, plane, w, true, go, false, gxs, true);
            } else {
                T::gemm(k, g.cout, plane, w, true, go, false, &mut cols, false);
                g.col2im(&cols, gxs);
            }
        }
    }
}

pub fn avg_pool2_forward<T: Scalar>(x: &[T], h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let planes = x.len() / (h * w);
    let q = cst::<T>(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, xx) = (2 * oy, 2 * ox);
                out[(p * oh + oy) * ow + ox] =
                    (src[y * w + xx] + src[y * w + xx + 1] + src[(y + 1) * w + xx] + src[(y + 1) * w + xx + 1]) * q;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(gout: &[T], h: usize, w: usize, gx: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let planes = gx.len() / (h * w);
    let q = cst::<T>(0.25);
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gout[(p * oh + oy) * ow + ox] * q;
                let base = p * h * w + 2 * oy * w + 2 * ox;
                gx[base] += gv;
                gx[base + 1] += gv;
                gx[base + w] += gv;
                gx[base + w + 1] += gv;
            }
        }
    }
}

/// Linear-interpolation taps `(i0, i1, w0, w1)` for sampling coordinate `u`
/// (index space, pixel centres at integers), clamped to `[0, n-1]`.
#[inline]
pub fn taps<T: Scalar>(u: f64, n: usize) -> (usize, usize, T, T) {
    let u = u.clamp(0.0, (n - 1) as f64);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    let f = u - i0 as f64;
    (i0, i1, cst(1.0 - f), cst(f))
}

/// Precomputed taps for a half-pixel-centre bilinear resize.
#[derive(Clone, Debug)]
pub struct ResizePlan<T: Scalar> {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ys: Vec<(usize, usize, T, T)>,
    xs: Vec<(usize, usize, T, T)>,
}

impl<T: Scalar> ResizePlan<T> {
    pub fn new(h: usize, w: usize, oh: usize, ow: usize) -> Self {
        let axis = |n: usize, on: usize| {
            (0..on).map(|i| taps::<T>((i as f64 + 0.5) * n as f64 / on as f64 - 0.5, n)).collect::<Vec<_>>()
        };
        Self { h, w, oh, ow, ys: axis(h, oh), xs: axis(w, ow) }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let planes = x.len() / (self.h * self.w);
        let mut out = vec![T::zero(); planes * self.oh * self.ow];
        for p in 0..planes {
            let src = &x[p * self.h * self.w..(p + 1) * self.h * self.w];
            let dst = &mut out[p * self.oh * self.ow..(p + 1) * self.oh * self.ow];
            for (oy, &(y0, y1, wy0, wy1)) in self.ys.iter().enumerate() {
                let (r0, r1) = (&src[y0 * self.w..][..self.w], &src[y1 * self.w..][..self.w]);
                for (ox, &(x0, x1, wx0, wx1)) in self.xs.iter().enumerate() {
                    dst[oy * self.ow + ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
                }
            }
        }
        out
    }

    pub fn backward(&self, gout: &[T], gx: &mut [T]) {
        let planes = gx.len() / (self.h * self.w);
        for p in 0..planes {
            let go = &gout[p * self.oh * self.ow..(p + 1) * self.oh * self.ow];
            let dst = &mut gx[p * self.h * self.w..(p + 1) * self.h * self.w];
            for (oy, &(y0, y1, wy0, wy1)) in self.ys.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in self.xs.iter().enumerate() {
                    let g = go[oy * self.ow + ox];
                    dst[y0 * self.w + x0] += g * wy0 * wx0;
                    dst[y0 * self.w + x1] += g * wy0 * wx1;
                    dst[y1 * self.w + x0] += g * wy1 * wx0;
                    dst[y1 * self.w + x1] += g * wy1 * wx1;
                }
            }
        }
    }
}

/// Sparse sampling weights for RoIAlign: each output bin of each roi is a
/// weighted sum over feature-map cells, shared by all channels.
#[derive(Clone, Debug)]
pub struct RoiPlan<T: Scalar> {
    plane: usize,
    bins: usize,
    /// `offsets[r*bins + b]..offsets[r*bins + b + 1]` indexes `taps`
    offsets: Vec<usize>,
    taps: Vec<(usize, T)>,
}

impl<T: Scalar> RoiPlan<T> {
    pub fn new(h: usize, w: usize, rois: &[[f64; 4]], oh: usize, ow: usize, samples: usize) -> Self {
        let mut offsets = vec![0];
        let mut all = Vec::new();
        let norm = 1.0 / (samples * samples) as f64;
        for r in rois {
            let (bh, bw) = ((r[3] - r[1]) / oh as f64, (r[2] - r[0]) / ow as f64);
            for py in 0..oh {
                for px in 0..ow {
                    let mut acc: Vec<(usize, f64)> = Vec::with_capacity(4 * samples * samples);
                    for sy in 0..samples {
                        // continuous coordinate with pixel centres at i + 0.5
                        let y = r[1] + py as f64 * bh + (sy as f64 + 0.5) * bh / samples as f64 - 0.5;
                        let (y0, y1, wy0, wy1) = taps::<f64>(y, h);
                        for sx in 0..samples {
                            let x = r[0] + px as f64 * bw + (sx as f64 + 0.5) * bw / samples as f64 - 0.5;
                            let (x0, x1, wx0, wx1) = taps::<f64>(x, w);
                            for (idx, wt) in [
                                (y0 * w + x0, wy0 * wx0),
                                (y0 * w + x1, wy0 * wx1),
                                (y1 * w + x0, wy1 * wx0),
                                (y1 * w + x1, wy1 * wx1),
                            ] {
                                match acc.iter_mut().find(|(i, _)| *i == idx) {
                                    Some(e) => e.1 += wt * norm,
                                    None => acc.push((idx, wt * norm)),
                                }
                            }
                        }
                    }
                    all.extend(acc.into_iter().map(|(i, wt)| (i, cst::<T>(wt))));
                    offsets.push(all.len());
                }
            }
        }
        Self { plane: h * w, bins: oh * ow, offsets, taps: all }
    }

    fn rois(&self) -> usize {
        (self.offsets.len() - 1) / self.bins
    }

    pub fn forward(&self, x: &[T], c: usize) -> Vec<T> {
        let n = self.rois();
        let mut out = vec![T::zero(); n * c * self.bins];
        for r in 0..n {
            for ch in 0..c {
                let src = &x[ch * self.plane..(ch + 1) * self.plane];
                let dst = &mut out[(r * c + ch) * self.bins..(r * c + ch + 1) * self.bins];
                for (b, o) in dst.iter_mut().enumerate() {
                    let k = r * self.bins + b;
                    *o = self.taps[self.offsets[k]..self.offsets[k + 1]].iter().map(|&(i, wt)| src[i] * wt).sum();
                }
            }
        }
        out
    }

    pub fn backward(&self, gout: &[T], c: usize, gx: &mut [T]) {
        let n = self.rois();
        for r in 0..n {
            for ch in 0..c {
                let dst = &mut gx[ch * self.plane..(ch + 1) * self.plane];
                let go = &gout[(r * c + ch) * self.bins..(r * c + ch + 1) * self.bins];
                for (b, &g) in go.iter().enumerate() {
                    let k = r * self.bins + b;
                    for &(i, wt) in &self.taps[self.offsets[k]..self.offsets[k + 1]] {
                        dst[i] += g * wt;
                    }
                }
            }
        }
    }
}
