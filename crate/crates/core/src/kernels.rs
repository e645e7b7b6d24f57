//! Forward and adjoint numeric kernels shared by the autodiff graph and the
//! plain (non-differentiable) imaging functions.

use crate::tensor::{gemm, Tensor};

/// Geometry of a dense 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wshape: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (&[batch, cin, h, w], &[cout, wcin, kh, kw]) = (x, wshape) else {
            return None;
        };
        if wcin != cin || stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
    /// falls inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        // largest ox with ox * s + kx - p <= w - 1
        let hi = if self.w + p > kx { ((self.w + p - kx - 1) / s + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let n = self.n();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out_row[..lo].fill(0.0);
                        out_row[hi..].fill(0.0);
                        let x0 = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                        } else {
                            for (j, o) in out_row[lo..hi].iter_mut().enumerate() {
                                *o = src[x0 + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let n = self.n();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let srow = &src[oy * self.wo + lo..oy * self.wo + hi];
                        let x0 = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            for (d, s) in dst[x0..x0 + hi - lo].iter_mut().zip(srow) {
                                *d += s;
                            }
                        } else {
                            for (j, s) in srow.iter().enumerate() {
                                dst[x0 + j * self.stride] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    // im2col scratch, reused across calls; every use overwrites what it reads.
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        let (a, b) = &mut *s;
        if a.len() < len {
            a.resize(len, 0.0);
            b.resize(len, 0.0);
        }
        f(&mut a[..len], &mut b[..len])
    })
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (k, n) = (g.k(), g.n());
    let in_plane = g.cin * g.h * g.w;
    let out_plane = g.cout * n;
    let mut out = vec![0.0; g.batch * out_plane];
    let pointwise = g.is_pointwise();
    with_scratch(if pointwise { 0 } else { k * n }, |cols, _| {
        for b in 0..g.batch {
            let xb = &x[b * in_plane..(b + 1) * in_plane];
            let ob = &mut out[b * out_plane..(b + 1) * out_plane];
            if let Some(bias) = bias {
                for (co, chunk) in ob.chunks_mut(n).enumerate() {
                    chunk.fill(bias[co]);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            if pointwise {
                gemm(g.cout, k, n, 1.0, w, false, xb, false, beta, ob);
            } else {
                g.im2col(xb, cols);
                gemm(g.cout, k, n, 1.0, w, false, cols, false, beta, ob);
            }
        }
    });
    out
}

/// Returns `(dx, dw, db)`; `dx`/`dw` are only computed when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (k, n) = (g.k(), g.n());
    let in_plane = g.cin * g.h * g.w;
    let out_plane = g.cout * n;
    let mut dx = need_dx.then(|| vec![0.0; g.batch * in_plane]);
    let mut dw = need_dw.then(|| vec![0.0; g.cout * k]);
    let mut db = vec![0.0; g.cout];
    let pointwise = g.is_pointwise();
    with_scratch(if pointwise { 0 } else { k * n }, |cols, dcols| {
        for b in 0..g.batch {
            let xb = &x[b * in_plane..(b + 1) * in_plane];
            let gb = &gy[b * out_plane..(b + 1) * out_plane];
            for (co, chunk) in gb.chunks(n).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
            if let Some(dw) = dw.as_mut() {
                let src: &[f64] = if pointwise {
                    xb
                } else {
                    g.im2col(xb, cols);
                    cols
                };
                gemm(g.cout, n, k, 1.0, gb, false, src, true, 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
                if pointwise {
                    gemm(k, g.cout, n, 1.0, w, true, gb, false, 0.0, dxb);
                } else {
                    gemm(k, g.cout, n, 1.0, w, true, gb, false, 0.0, dcols);
                    g.col2im(dcols, dxb);
                }
            }
        }
    });
    (dx, dw, db)
}

/// Depthwise `k x k` convolution, stride 1, zero padding `k / 2`.
/// `w` has shape `(C, 1, k, k)`.
pub(crate) fn depthwise_forward(x: &Tensor, w: &[f64], k: usize, bias: Option<&[f64]>) -> Tensor {
    let (b, c, h, wd) = x.dims4().expect("rank-4 input");
    let r = (k / 2) as isize;
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * h * wd;
            let plane = &xs[off..off + h * wd];
            let dst = &mut out[off..off + h * wd];
            let kern = &w[ci * k * k..(ci + 1) * k * k];
            let b0 = bias.map_or(0.0, |bv| bv[ci]);
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b0;
                    for u in 0..k {
                        let iy = y as isize + u as isize - r;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for v in 0..k {
                            let ix = xx as isize + v as isize - r;
                            if ix >= 0 && ix < wd as isize {
                                acc += kern[u * k + v] * plane[iy as usize * wd + ix as usize];
                            }
                        }
                    }
                    dst[y * wd + xx] = acc;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

pub(crate) fn depthwise_backward(x: &Tensor, w: &[f64], k: usize, gy: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, c, h, wd) = x.dims4().expect("rank-4 input");
    let r = (k / 2) as isize;
    let xs = x.data();
    let gs = gy.data();
    let mut dx = vec![0.0; xs.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * h * wd;
            let kern = &w[ci * k * k..(ci + 1) * k * k];
            for y in 0..h {
                for xx in 0..wd {
                    let gv = gs[off + y * wd + xx];
                    db[ci] += gv;
                    for u in 0..k {
                        let iy = y as isize + u as isize - r;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for v in 0..k {
                            let ix = xx as isize + v as isize - r;
                            if ix >= 0 && ix < wd as isize {
                                let idx = off + iy as usize * wd + ix as usize;
                                dx[idx] += kern[u * k + v] * gv;
                                dw[ci * k * k + u * k + v] += xs[idx] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Compass offset `(dy, dx)` of each directional gradient, in the order
/// `+x, -x, +y, -y, (+x,+y), (+x,-y), (-x,+y), (-x,-y)`.
pub const DIRECTION_OFFSETS: [(isize, isize); 8] = [
    (0, 1),
    (0, -1),
    (1, 0),
    (-1, 0),
    (1, 1),
    (-1, 1),
    (1, -1),
    (-1, -1),
];

/// Forward difference toward `(dy, dx)`; zero where the neighbour is outside.
pub(crate) fn shift_diff(x: &Tensor, dy: isize, dx: isize) -> Tensor {
    let (b, c, h, w) = x.dims4().expect("rank-4 input");
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    for p in 0..b * c {
        let off = p * h * w;
        for y in 0..h {
            let ny = y as isize + dy;
            if ny < 0 || ny >= h as isize {
                continue;
            }
            for xx in 0..w {
                let nx = xx as isize + dx;
                if nx < 0 || nx >= w as isize {
                    continue;
                }
                out[off + y * w + xx] = xs[off + ny as usize * w + nx as usize] - xs[off + y * w + xx];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

pub(crate) fn shift_diff_adjoint(gy: &Tensor, dy: isize, dx: isize) -> Tensor {
    let (b, c, h, w) = gy.dims4().expect("rank-4 input");
    let gs = gy.data();
    let mut out = vec![0.0; gs.len()];
    for p in 0..b * c {
        let off = p * h * w;
        for y in 0..h {
            let ny = y as isize + dy;
            if ny < 0 || ny >= h as isize {
                continue;
            }
            for xx in 0..w {
                let nx = xx as isize + dx;
                if nx < 0 || nx >= w as isize {
                    continue;
                }
                let g = gs[off + y * w + xx];
                out[off + ny as usize * w + nx as usize] += g;
                out[off + y * w + xx] -= g;
            }
        }
    }
    Tensor::new(gy.shape().to_vec(), out).expect("shape preserved")
}

/// Normalizes each contiguous slice of `n` values; returns the output and
/// per-slice inverse standard deviations.
pub(crate) fn instance_norm_forward(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (b, c, h, w) = x.dims4().expect("rank-4 input");
    let n = h * w;
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(b * c);
    for (src, dst) in x.data().chunks(n).zip(out.chunks_mut(n)) {
        // a constant plane must center to exact zeros, which the rounded sum may miss
        let mean = if src.iter().all(|&v| v == src[0]) {
            src[0]
        } else {
            src.iter().sum::<f64>() / n as f64
        };
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
        inv_std.push(inv);
    }
    (Tensor::new(x.shape().to_vec(), out).expect("shape preserved"), inv_std)
}

pub(crate) fn instance_norm_backward(xhat: &Tensor, inv_std: &[f64], gy: &Tensor) -> Tensor {
    let (_, _, h, w) = xhat.dims4().expect("rank-4 input");
    let n = h * w;
    let mut dx = vec![0.0; xhat.len()];
    for (((xs, gs), ds), &inv) in xhat
        .data()
        .chunks(n)
        .zip(gy.data().chunks(n))
        .zip(dx.chunks_mut(n))
        .zip(inv_std)
    {
        let mean_g = gs.iter().sum::<f64>() / n as f64;
        let mean_gx = gs.iter().zip(xs).map(|(g, x)| g * x).sum::<f64>() / n as f64;
        for ((d, g), x) in ds.iter_mut().zip(gs).zip(xs) {
            *d = inv * (g - mean_g - x * mean_gx);
        }
    }
    Tensor::new(xhat.shape().to_vec(), dx).expect("shape preserved")
}

/// Per-pixel normalization across channels (layer norm for NCHW tokens).
pub(crate) fn channel_norm_forward(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (b, c, h, w) = x.dims4().expect("rank-4 input");
    let hw = h * w;
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    let mut inv_std = vec![0.0; b * hw];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut mean = 0.0;
            for ci in 0..c {
                mean += xs[base + ci * hw + p];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ci in 0..c {
                let d = xs[base + ci * hw + p] - mean;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for ci in 0..c {
                out[base + ci * hw + p] = (xs[base + ci * hw + p] - mean) * inv;
            }
            inv_std[bi * hw + p] = inv;
        }
    }
    (Tensor::new(x.shape().to_vec(), out).expect("shape preserved"), inv_std)
}

pub(crate) fn channel_norm_backward(xhat: &Tensor, inv_std: &[f64], gy: &Tensor) -> Tensor {
    let (b, c, h, w) = xhat.dims4().expect("rank-4 input");
    let hw = h * w;
    let (xs, gs) = (xhat.data(), gy.data());
    let mut dx = vec![0.0; xs.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let (mut mg, mut mgx) = (0.0, 0.0);
            for ci in 0..c {
                let i = base + ci * hw + p;
                mg += gs[i];
                mgx += gs[i] * xs[i];
            }
            mg /= c as f64;
            mgx /= c as f64;
            let inv = inv_std[bi * hw + p];
            for ci in 0..c {
                let i = base + ci * hw + p;
                dx[i] = inv * (gs[i] - mg - xs[i] * mgx);
            }
        }
    }
    Tensor::new(xhat.shape().to_vec(), dx).expect("shape preserved")
}

/// Source taps `(i0, i1, frac)` for half-pixel bilinear sampling along one axis.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = if i0 + 1 < src { i0 + 1 } else { i0 };
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub(crate) fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (b, c, h, w) = x.dims4().expect("rank-4 input");
    if (oh, ow) == (h, w) {
        return x.clone();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let xs = x.data();
    let mut out = vec![0.0; b * c * oh * ow];
    for p in 0..b * c {
        let src = &xs[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out).expect("consistent shape")
}

pub(crate) fn resize_bilinear_adjoint(gy: &Tensor, h: usize, w: usize) -> Tensor {
    let (b, c, oh, ow) = gy.dims4().expect("rank-4 input");
    if (oh, ow) == (h, w) {
        return gy.clone();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let gs = gy.data();
    let mut out = vec![0.0; b * c * h * w];
    for p in 0..b * c {
        let src = &gs[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += g * (1.0 - ly) * lx;
                dst[y1 * w + x0] += g * ly * (1.0 - lx);
                dst[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out).expect("consistent shape")
}

pub(crate) fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let (b, c, h, w) = x.dims4().expect("rank-4 input");
    let (oh, ow) = (2 * h, 2 * w);
    let xs = x.data();
    let mut out = vec![0.0; b * c * oh * ow];
    for p in 0..b * c {
        let src = &xs[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out).expect("consistent shape")
}

pub(crate) fn upsample_nearest2x_adjoint(gy: &Tensor) -> Tensor {
    let (b, c, oh, ow) = gy.dims4().expect("rank-4 input");
    let (h, w) = (oh / 2, ow / 2);
    let gs = gy.data();
    let mut out = vec![0.0; b * c * h * w];
    for p in 0..b * c {
        let src = &gs[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out).expect("consistent shape")
}

/// Layout of non-overlapping attention windows over an NCHW tensor whose
/// channels split into `heads` groups.
#[derive(Clone, Copy, Debug)]
pub(crate) struct WindowLayout {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub heads: usize,
}

impl WindowLayout {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn groups(&self) -> usize {
        self.batch * (self.h / self.window) * (self.w / self.window) * self.heads
    }

    /// Calls `f(nchw_index, window_index)` for every element.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (ws, d, t) = (self.window, self.head_dim(), self.tokens());
        let (nwh, nww) = (self.h / ws, self.w / ws);
        for b in 0..self.batch {
            for wy in 0..nwh {
                for wx in 0..nww {
                    for hd in 0..self.heads {
                        let g = ((b * nwh + wy) * nww + wx) * self.heads + hd;
                        for iy in 0..ws {
                            for ix in 0..ws {
                                let tok = iy * ws + ix;
                                let (y, x) = (wy * ws + iy, wx * ws + ix);
                                for j in 0..d {
                                    let c = hd * d + j;
                                    let src = ((b * self.channels + c) * self.h + y) * self.w + x;
                                    f(src, (g * t + tok) * d + j);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// `(B, C, H, W)` to `(groups, tokens, head_dim)`.
    pub fn partition(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.for_each(|s, d| out[d] = x[s]);
        out
    }

    pub fn merge(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        self.for_each(|s, d| out[s] = y[d]);
        out
    }
}

/// Per-pixel depthwise filtering: `out[b,c,y,x] = sum_t K[b, c*k*k + t, y, x] * d[b, c, y+u-r, x+v-r]`.
pub(crate) fn pixel_filter_forward(d: &Tensor, kern: &Tensor, k: usize) -> Tensor {
    let (b, c, h, w) = d.dims4().expect("rank-4 input");
    let kk = k * k;
    let r = (k / 2) as isize;
    let (ds, ks) = (d.data(), kern.data());
    let hw = h * w;
    let mut out = vec![0.0; ds.len()];
    for bi in 0..b {
        for ci in 0..c {
            let dplane = &ds[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            let kbase = (bi * c * kk + ci * kk) * hw;
            let dst = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for u in 0..k {
                for v in 0..k {
                    let tap = &ks[kbase + (u * k + v) * hw..kbase + (u * k + v + 1) * hw];
                    for y in 0..h {
                        let iy = y as isize + u as isize - r;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let ix = x as isize + v as isize - r;
                            if ix >= 0 && ix < w as isize {
                                dst[y * w + x] += tap[y * w + x] * dplane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(d.shape().to_vec(), out).expect("shape preserved")
}

pub(crate) fn pixel_filter_backward(d: &Tensor, kern: &Tensor, k: usize, gy: &Tensor) -> (Tensor, Tensor) {
    let (b, c, h, w) = d.dims4().expect("rank-4 input");
    let kk = k * k;
    let r = (k / 2) as isize;
    let (ds, ks, gs) = (d.data(), kern.data(), gy.data());
    let hw = h * w;
    let mut dd = vec![0.0; ds.len()];
    let mut dk = vec![0.0; ks.len()];
    for bi in 0..b {
        for ci in 0..c {
            let p = (bi * c + ci) * hw;
            let kbase = (bi * c * kk + ci * kk) * hw;
            for u in 0..k {
                for v in 0..k {
                    let t = kbase + (u * k + v) * hw;
                    for y in 0..h {
                        let iy = y as isize + u as isize - r;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let ix = x as isize + v as isize - r;
                            if ix >= 0 && ix < w as isize {
                                let src = p + iy as usize * w + ix as usize;
                                let g = gs[p + y * w + x];
                                dd[src] += ks[t + y * w + x] * g;
                                dk[t + y * w + x] += ds[src] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(d.shape().to_vec(), dd).expect("shape preserved"),
        Tensor::new(kern.shape().to_vec(), dk).expect("shape preserved"),
    )
}

/// Softmax over consecutive channel groups of size `group`, per pixel.
pub(crate) fn group_softmax_forward(x: &Tensor, group: usize) -> Tensor {
    let (b, c, h, w) = x.dims4().expect("rank-4 input");
    let hw = h * w;
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    for bi in 0..b {
        for gi in 0..c / group {
            let base = (bi * c + gi * group) * hw;
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for t in 0..group {
                    m = m.max(xs[base + t * hw + p]);
                }
                let mut s = 0.0;
                for t in 0..group {
                    let e = (xs[base + t * hw + p] - m).exp();
                    out[base + t * hw + p] = e;
                    s += e;
                }
                for t in 0..group {
                    out[base + t * hw + p] /= s;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

pub(crate) fn group_softmax_backward(y: &Tensor, gy: &Tensor, group: usize) -> Tensor {
    let (b, c, h, w) = y.dims4().expect("rank-4 input");
    let hw = h * w;
    let (ys, gs) = (y.data(), gy.data());
    let mut dx = vec![0.0; ys.len()];
    for bi in 0..b {
        for gi in 0..c / group {
            let base = (bi * c + gi * group) * hw;
            for p in 0..hw {
                let mut dot = 0.0;
                for t in 0..group {
                    dot += ys[base + t * hw + p] * gs[base + t * hw + p];
                }
                for t in 0..group {
                    let i = base + t * hw + p;
                    dx[i] = ys[i] * (gs[i] - dot);
                }
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("shape preserved")
}
