//! Raw slice kernels shared by the eager tensor API and the graph ops.
//!
//! Matrix products go through `matrixmultiply`, whose blocking is fixed, so
//! repeated runs on one machine agree to the last bit.

/// `c[n x m] += a[n x k] * b[k x m]`
pub(crate) fn gemm_nn(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(n, k, m, a, (k, 1), b, (m, 1), c);
}

/// `c[n x m] += a[n x k] * b[m x k]^T`
pub(crate) fn gemm_nt(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(n, k, m, a, (k, 1), b, (1, k), c);
}

/// `c[n x m] += a[k x n]^T * b[k x m]`
pub(crate) fn gemm_tn(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(n, k, m, a, (1, n), b, (m, 1), c);
}

/// Strided `c += a * b` with `(row stride, column stride)` pairs.
#[allow(clippy::too_many_arguments)]
fn gemm(n: usize, k: usize, m: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    assert!(a.len() >= n * k && b.len() >= k * m && c.len() >= n * m);
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// Four-lane dot product; lane order is fixed so the result is deterministic.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for o in chunks * 4..a.len() {
        s += a[o] * b[o];
    }
    s
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Gathers `data` (laid out as `shape`) into the axis order `perm`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` under size-1 broadcasting (ranks must match).
pub(crate) fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = in_shape
        .iter()
        .zip(&in_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n: usize = out_shape.iter().product();
    let nd = out_shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Geometry of one 2-D convolution (per image).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if height + 2 * pad < kernel || width + 2 * pad < kernel || stride == 0 {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `x[C, H, W] -> col[C*k*k, Ho*Wo]`, written at column `off` of a
/// row-major buffer with leading dimension `ld`.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64], ld: usize, off: usize) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let dst = &mut col[r * ld + off..r * ld + off + cols];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back onto `x` (accumulating).
pub(crate) fn col2im(g: &ConvGeom, col: &[f64], ld: usize, off: usize, x: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let src = &col[r * ld + off..r * ld + off + cols];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && (ix as usize) < g.width {
                            drow[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[B, C, P] -> [C, B*P]`
fn to_channel_major(x: &[f64], batch: usize, ch: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let src = &x[(b * ch + c) * plane..(b * ch + c + 1) * plane];
            out[(c * batch + b) * plane..(c * batch + b + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B*P] -> [B, C, P]`
fn from_channel_major(x: &[f64], batch: usize, ch: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let src = &x[(c * batch + b) * plane..(c * batch + b + 1) * plane];
            out[(b * ch + c) * plane..(b * ch + c + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// Column matrix `[C*k*k, B*Ho*Wo]` of a whole batch.
fn im2col_batch(g: &ConvGeom, batch: usize, x: &[f64]) -> Vec<f64> {
    if g.is_pointwise() {
        return to_channel_major(x, batch, g.channels, g.col_cols());
    }
    let in_img = g.channels * g.height * g.width;
    let ld = batch * g.col_cols();
    let mut col = vec![0.0; g.col_rows() * ld];
    for b in 0..batch {
        im2col(g, &x[b * in_img..(b + 1) * in_img], &mut col, ld, b * g.col_cols());
    }
    col
}

fn col2im_batch(g: &ConvGeom, batch: usize, col: &[f64]) -> Vec<f64> {
    if g.is_pointwise() {
        return from_channel_major(col, batch, g.channels, g.col_cols());
    }
    let in_img = g.channels * g.height * g.width;
    let ld = batch * g.col_cols();
    let mut x = vec![0.0; batch * in_img];
    for b in 0..batch {
        col2im(g, col, ld, b * g.col_cols(), &mut x[b * in_img..(b + 1) * in_img]);
    }
    x
}

fn add_channel_bias(y: &mut [f64], bias: Option<&[f64]>, plane: usize) {
    if let Some(bias) = bias {
        for (i, p) in y.chunks_mut(plane.max(1)).enumerate() {
            let v = bias[i % bias.len()];
            p.iter_mut().for_each(|x| *x += v);
        }
    }
}

/// Per-channel sums of `[C, B*P]`.
fn channel_sums(x: &[f64], ch: usize) -> Vec<f64> {
    let n = x.len() / ch.max(1);
    (0..ch).map(|c| x[c * n..(c + 1) * n].iter().sum()).collect()
}

/// Forward convolution over a batch. `w` is `[co, ci, k, k]`.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    out_channels: usize,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let col = im2col_batch(g, batch, x);
    let m = batch * g.col_cols();
    let mut yt = vec![0.0; out_channels * m];
    gemm_nn(out_channels, g.col_rows(), m, w, &col, &mut yt);
    let mut out = from_channel_major(&yt, batch, out_channels, g.col_cols());
    add_channel_bias(&mut out, bias, g.col_cols());
    out
}

pub(crate) struct ConvGrads {
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    out_channels: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
) -> ConvGrads {
    let (rows, m) = (g.col_rows(), batch * g.col_cols());
    let col = im2col_batch(g, batch, x);
    let dyt = to_channel_major(dy, batch, out_channels, g.col_cols());
    let mut dw = vec![0.0; out_channels * rows];
    gemm_nt(out_channels, m, rows, &dyt, &col, &mut dw);
    let mut dcol = vec![0.0; rows * m];
    gemm_tn(rows, out_channels, m, w, &dyt, &mut dcol);
    ConvGrads {
        dx: col2im_batch(g, batch, &dcol),
        dw,
        db: channel_sums(&dyt, out_channels),
    }
}

/// Transposed convolution: the adjoint of the convolution whose geometry
/// `g` maps the output `[co, H, W]` to the input grid `[Ho, Wo]`.
/// `w` is `[ci, co, k, k]`.
pub(crate) fn conv_transpose2d_forward(
    g: &ConvGeom,
    batch: usize,
    in_channels: usize,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (rows, m) = (g.col_rows(), batch * g.col_cols());
    let xt = to_channel_major(x, batch, in_channels, g.col_cols());
    let mut col = vec![0.0; rows * m];
    gemm_tn(rows, in_channels, m, w, &xt, &mut col);
    let mut out = col2im_batch(g, batch, &col);
    add_channel_bias(&mut out, bias, g.height * g.width);
    out
}

pub(crate) fn conv_transpose2d_backward(
    g: &ConvGeom,
    batch: usize,
    in_channels: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
) -> ConvGrads {
    let (rows, m) = (g.col_rows(), batch * g.col_cols());
    let dcol = im2col_batch(g, batch, dy);
    let xt = to_channel_major(x, batch, in_channels, g.col_cols());
    let mut dxt = vec![0.0; in_channels * m];
    gemm_nn(in_channels, rows, m, w, &dcol, &mut dxt);
    let mut dw = vec![0.0; in_channels * rows];
    gemm_nt(in_channels, m, rows, &xt, &dcol, &mut dw);
    let dyt = to_channel_major(dy, batch, g.channels, g.height * g.width);
    ConvGrads {
        dx: from_channel_major(&dxt, batch, in_channels, g.col_cols()),
        dw,
        db: channel_sums(&dyt, g.channels),
    }
}
