//! Raw slice kernels behind the tape ops. Shapes are validated by the caller.

/// Row-major strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` matrix.
    pub fn t(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = alpha · a·b + beta · c` with `a: m×k`, `b: k×n`, `c` row-major `m×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, c: &mut [f32], beta: f32) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views cover at least the addressed extents; callers pass
    // buffers sized m×k, k×n and m×n respectively.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one CHW image into a `(C·kh·kw) × (Ho·Wo)` patch matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let (ho, wo) = (g.ho, g.wo);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kj, g.pad, g.w, wo);
                        dst[..lo].fill(0.0);
                        dst[lo..hi].copy_from_slice(&src[lo + kj - g.pad..hi + kj - g.pad]);
                        dst[hi..].fill(0.0);
                        continue;
                    }
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image, accumulating.
pub(crate) fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (ho, wo) = (g.ho, g.wo);
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(kj, g.pad, g.w, wo);
                        let row = &src[oi * wo + lo..oi * wo + hi];
                        for (d, &v) in dst[lo + kj - g.pad..hi + kj - g.pad].iter_mut().zip(row) {
                            *d += v;
                        }
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst[jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], n: usize, o: usize, g: &ConvGeom, out: &mut [f32]) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_per = g.c * g.h * g.w;
    let out_per = o * cols;
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * cols]
    };
    for b in 0..n {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let patches: &[f32] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        gemm(
            o,
            rows,
            cols,
            Mat::rows(w, rows),
            Mat::rows(patches, cols),
            &mut out[b * out_per..(b + 1) * out_per],
            0.0,
        );
    }
}

/// Accumulates weight and input gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    n: usize,
    o: usize,
    g: &ConvGeom,
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_per = g.c * g.h * g.w;
    let out_per = o * cols;
    let mut col = vec![0.0; if g.is_pointwise() { 0 } else { rows * cols }];
    let mut dcol = vec![0.0; if g.is_pointwise() { 0 } else { rows * cols }];
    let mut dx = dx;
    let mut dw = dw;
    for b in 0..n {
        let dyb = &dy[b * out_per..(b + 1) * out_per];
        if let Some(dw) = dw.as_deref_mut() {
            let xb = &x[b * in_per..(b + 1) * in_per];
            let patches: &[f32] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            // dW[o, r] += dY[o, p] · P[r, p]
            gemm(o, cols, rows, Mat::rows(dyb, cols), Mat::t(patches, cols), dw, 1.0);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_per..(b + 1) * in_per];
            if g.is_pointwise() {
                gemm(rows, o, cols, Mat::t(w, rows), Mat::rows(dyb, cols), dxb, 1.0);
            } else {
                gemm(rows, o, cols, Mat::t(w, rows), Mat::rows(dyb, cols), &mut dcol, 0.0);
                col2im(&dcol, g, dxb);
            }
        }
    }
}

/// Per-channel 2D cross-correlation, stride 1, "same" padding when `pad = (k-1)/2`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_forward(
    x: &[f32],
    w: &[f32],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [f32],
) {
    for b in 0..n {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * h * wd..][..h * wd];
            let ker = &w[ch * k * k..(ch + 1) * k * k];
            let dst = &mut out[(b * c + ch) * ho * wo..][..ho * wo];
            dst.fill(0.0);
            for ki in 0..k {
                for kj in 0..k {
                    let kv = ker[ki * k + kj];
                    if kv == 0.0 {
                        continue;
                    }
                    for oi in 0..ho {
                        let ii = (oi + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let src = &plane[ii as usize * wd..][..wd];
                        let row = &mut dst[oi * wo..][..wo];
                        let (lo, hi) = valid_span(kj, pad, wd, wo);
                        for oj in lo..hi {
                            row[oj] += kv * src[oj + kj - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `oj` for which `oj + kj - pad` indexes inside `[0, w)`.
fn valid_span(kj: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj);
    let hi = (w + pad).saturating_sub(kj).min(wo);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
) {
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * wd;
            let plane = &x[base..base + h * wd];
            let ker = &w[ch * k * k..(ch + 1) * k * k];
            let g = &dy[(b * c + ch) * ho * wo..][..ho * wo];
            for ki in 0..k {
                for kj in 0..k {
                    let (lo, hi) = valid_span(kj, pad, wd, wo);
                    let mut acc = 0.0f64;
                    for oi in 0..ho {
                        let ii = (oi + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let grow = &g[oi * wo..][..wo];
                        let off = ii as usize * wd;
                        if dw.is_some() {
                            let src = &plane[off..off + wd];
                            let mut s = 0.0f32;
                            for oj in lo..hi {
                                s += grow[oj] * src[oj + kj - pad];
                            }
                            acc += s as f64;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let kv = ker[ki * k + kj];
                            let drow = &mut dx[base + off..base + off + wd];
                            for oj in lo..hi {
                                drow[oj + kj - pad] += kv * grow[oj];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[ch * k * k + ki * k + kj] += acc as f32;
                    }
                }
            }
        }
    }
}
