//! Raw NCHW kernels over slices. Shapes are validated by the callers in
//! `graph`; everything here assumes consistent extents.

/// Geometry of a 2-D sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    /// Output extent of a convolution over `input`, or `None` if the window
    /// does not fit.
    pub fn conv_out(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution over `input`.
    pub fn transpose_out(&self, input: usize, output_padding: usize) -> Option<usize> {
        if input == 0 {
            return None;
        }
        ((input - 1) * self.stride + self.kernel + output_padding).checked_sub(2 * self.padding)
    }
}

/// `c = op(a) · op(b)` for row-major operands. `a` is `m×k` (stored `k×m`
/// when `a_t`), `b` is `k×n` (stored `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the `m×k`, `k×n` and `m×n`
    // row-major buffers whose lengths are asserted on entry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `channels×h×w` image into `(channels·k·k) × (oh·ow)` columns.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    img: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let k = win.kernel;
    let plane = oh * ow;
    for c in 0..channels {
        let src = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ki) as isize - win.padding as isize;
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let line = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kj) as isize - win.padding as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `img`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    img: &mut [f64],
) {
    let k = win.kernel;
    let plane = oh * ow;
    for c in 0..channels {
        let dst = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ki) as isize - win.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * win.stride + kj) as isize - win.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Extents of a 2-D convolution problem.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub win: Window,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.in_ch * self.win.kernel * self.win.kernel
    }
}

/// Cross-correlation; weight is `out_ch×in_ch×k×k`.
pub(crate) fn conv2d_forward(d: &ConvDims, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane_in = d.in_ch * d.h * d.w;
    let plane_out = d.oh * d.ow;
    let mut out = vec![0.0; d.batch * d.out_ch * plane_out];
    let mut cols = vec![0.0; d.patch() * plane_out];
    for n in 0..d.batch {
        im2col(
            &x[n * plane_in..(n + 1) * plane_in],
            d.in_ch,
            d.h,
            d.w,
            d.win,
            d.oh,
            d.ow,
            &mut cols,
        );
        let o = &mut out[n * d.out_ch * plane_out..(n + 1) * d.out_ch * plane_out];
        matmul(d.out_ch, d.patch(), plane_out, weight, false, &cols, false, o, false);
        for (co, chunk) in o.chunks_mut(plane_out).enumerate() {
            let b = bias[co];
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub x: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(d: &ConvDims, x: &[f64], weight: &[f64], dout: &[f64]) -> ConvGrads {
    let plane_in = d.in_ch * d.h * d.w;
    let plane_out = d.oh * d.ow;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; d.out_ch];
    let mut cols = vec![0.0; d.patch() * plane_out];
    let mut dcols = vec![0.0; d.patch() * plane_out];
    for n in 0..d.batch {
        let g = &dout[n * d.out_ch * plane_out..(n + 1) * d.out_ch * plane_out];
        im2col(
            &x[n * plane_in..(n + 1) * plane_in],
            d.in_ch,
            d.h,
            d.w,
            d.win,
            d.oh,
            d.ow,
            &mut cols,
        );
        matmul(d.out_ch, plane_out, d.patch(), g, false, &cols, true, &mut gw, true);
        matmul(d.patch(), d.out_ch, plane_out, weight, true, g, false, &mut dcols, false);
        col2im(
            &dcols,
            d.in_ch,
            d.h,
            d.w,
            d.win,
            d.oh,
            d.ow,
            &mut gx[n * plane_in..(n + 1) * plane_in],
        );
        for (co, chunk) in g.chunks(plane_out).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
    }
    ConvGrads {
        x: gx,
        weight: gw,
        bias: gb,
    }
}

/// Transposed convolution. Here `d` describes the *forward* convolution that
/// maps the output (`in_ch×h×w` in `d`) back to the input (`out_ch×oh×ow`);
/// the weight is `out_ch×in_ch×k×k` of that forward convolution, i.e. the
/// transposed layer's `in×out×k×k`.
pub(crate) fn conv_transpose_forward(
    d: &ConvDims,
    y: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let plane_small = d.oh * d.ow;
    let plane_big = d.h * d.w;
    let mut out = vec![0.0; d.batch * d.in_ch * plane_big];
    let mut cols = vec![0.0; d.patch() * plane_small];
    for n in 0..d.batch {
        let src = &y[n * d.out_ch * plane_small..(n + 1) * d.out_ch * plane_small];
        matmul(d.patch(), d.out_ch, plane_small, weight, true, src, false, &mut cols, false);
        let o = &mut out[n * d.in_ch * plane_big..(n + 1) * d.in_ch * plane_big];
        col2im(&cols, d.in_ch, d.h, d.w, d.win, d.oh, d.ow, o);
        for (c, chunk) in o.chunks_mut(plane_big).enumerate() {
            let b = bias[c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

pub(crate) fn conv_transpose_backward(
    d: &ConvDims,
    y: &[f64],
    weight: &[f64],
    dout: &[f64],
) -> ConvGrads {
    let plane_small = d.oh * d.ow;
    let plane_big = d.h * d.w;
    let mut gy = vec![0.0; y.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; d.in_ch];
    let mut cols = vec![0.0; d.patch() * plane_small];
    for n in 0..d.batch {
        let g = &dout[n * d.in_ch * plane_big..(n + 1) * d.in_ch * plane_big];
        im2col(g, d.in_ch, d.h, d.w, d.win, d.oh, d.ow, &mut cols);
        let src = &y[n * d.out_ch * plane_small..(n + 1) * d.out_ch * plane_small];
        matmul(
            d.out_ch,
            d.patch(),
            plane_small,
            weight,
            false,
            &cols,
            false,
            &mut gy[n * d.out_ch * plane_small..(n + 1) * d.out_ch * plane_small],
            false,
        );
        matmul(d.out_ch, plane_small, d.patch(), src, false, &cols, true, &mut gw, true);
        for (c, chunk) in g.chunks(plane_big).enumerate() {
            gb[c] += chunk.iter().sum::<f64>();
        }
    }
    ConvGrads {
        x: gy,
        weight: gw,
        bias: gb,
    }
}

/// Max pooling over `batch·channels` planes; returns values and the flat
/// input index of each maximum (first maximum wins ties).
pub(crate) fn max_pool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ki in 0..win.kernel {
                    let iy = (oy * win.stride + ki) as isize - win.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..win.kernel {
                        let ix = (ox * win.stride + kj) as isize - win.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Per-channel statistics of an `n×c×spatial` buffer: (mean, biased var).
pub(crate) fn channel_moments(x: &[f64], n: usize, c: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            s += x[off..off + spatial].iter().sum::<f64>();
        }
        let m = s / count;
        let mut sq = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            sq += x[off..off + spatial].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}
