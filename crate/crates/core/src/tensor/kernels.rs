//! Inner loops shared by forward and backward passes.

use super::Scalar;

pub(crate) struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        ci: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvGeom {
            ci,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    /// Source column for output column `ox` at kernel offset `kx`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

/// Unfolds one `[C,H,W]` image into `[C*kh*kw, out_h*out_w]`.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let hw = g.out_h * g.out_w;
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * hw;
                let dst = &mut col[row..row + hw];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.src(oy, ky, g.h) {
                        None => line.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            let base = (c * g.h + iy) * g.w;
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, kx, g.w) {
                                    Some(ix) => x[base + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into `[C,H,W]`.
pub(crate) fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let hw = g.out_h * g.out_w;
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * hw;
                for oy in 0..g.out_h {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let base = (c * g.h + iy) * g.w;
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dx[base + ix] += col[row + oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Two-tap interpolation weights for one output coordinate.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lerp {
    pub i0: usize,
    pub i1: usize,
    pub t: f64,
}

/// Corner-aligned sampling positions: output 0 and `out-1` land exactly on
/// input 0 and `inp-1`.
pub(crate) fn lerp_table(inp: usize, out: usize) -> Vec<Lerp> {
    (0..out)
        .map(|i| {
            let src = if out == 1 || inp == 1 {
                0.0
            } else {
                (i * (inp - 1)) as f64 / (out - 1) as f64
            };
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            Lerp {
                i0,
                i1,
                t: src - i0 as f64,
            }
        })
        .collect()
}

pub(crate) fn resize_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    rows: &[Lerp],
    cols: &[Lerp],
) -> Vec<T> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for r in rows {
            let ty = T::from_f64(r.t);
            let (a, b) = (&src[r.i0 * w..(r.i0 + 1) * w], &src[r.i1 * w..(r.i1 + 1) * w]);
            for c in cols {
                let tx = T::from_f64(c.t);
                let top = a[c.i0] * (T::one() - tx) + a[c.i1] * tx;
                let bot = b[c.i0] * (T::one() - tx) + b[c.i1] * tx;
                out.push(top * (T::one() - ty) + bot * ty);
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Scalar>(
    g: &[T],
    dx: &mut [T],
    planes: usize,
    h: usize,
    w: usize,
    rows: &[Lerp],
    cols: &[Lerp],
) {
    let (oh, ow) = (rows.len(), cols.len());
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for (yi, r) in rows.iter().enumerate() {
            let ty = T::from_f64(r.t);
            for (xi, c) in cols.iter().enumerate() {
                let tx = T::from_f64(c.t);
                let v = gp[yi * ow + xi];
                dp[r.i0 * w + c.i0] += v * (T::one() - ty) * (T::one() - tx);
                dp[r.i0 * w + c.i1] += v * (T::one() - ty) * tx;
                dp[r.i1 * w + c.i0] += v * ty * (T::one() - tx);
                dp[r.i1 * w + c.i1] += v * ty * tx;
            }
        }
    }
}
