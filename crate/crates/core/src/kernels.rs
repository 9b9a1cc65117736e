//! Raw numeric kernels shared by the forward and backward passes.
//!
//! Everything here works on flat slices; shape checking happens in the callers.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
///
/// With `ta` set, `a` is stored as `[k, m]`; with `tb`, `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, c: &mut [f32], beta: f32) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the logical dimensions
    // and strides, so every index sgemm touches lies inside its slice.
    unsafe {
        matrixmultiply::sgemm(
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

/// Resolved geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub groups: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    /// Rows of the im2col matrix for a single group.
    pub fn col_rows(&self) -> usize {
        self.in_per_group() * self.kh * self.kw
    }

    pub fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }
}

/// Unfold one group of one sample (`[cg, H, W]`) into `[cg*kh*kw, out_h*out_w]`.
pub fn im2col(g: &ConvGeom, input: &[f32], cols: &mut [f32]) {
    let area = g.out_area();
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0;
    for c in 0..g.in_per_group() {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * area..(row + 1) * area];
                let dy = (ky * g.dilation) as isize - g.pad_top as isize;
                let dx = (kx * g.dilation) as isize - g.pad_left as isize;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride) as isize + dy;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + dx;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[cg, H, W]`.
pub fn col2im(g: &ConvGeom, cols: &[f32], input_grad: &mut [f32]) {
    let area = g.out_area();
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0;
    for c in 0..g.in_per_group() {
        let plane = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * area..(row + 1) * area];
                let dy = (ky * g.dilation) as isize - g.pad_top as isize;
                let dx = (kx * g.dilation) as isize - g.pad_left as isize;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride) as isize + dx;
                        if ix >= 0 && ix < w {
                            plane[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution. `weight` is `[out_ch, in_ch/groups, kh, kw]`.
pub fn conv2d_forward(g: &ConvGeom, input: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let area = g.out_area();
    let in_plane = g.height * g.width;
    let (cg, og, rows) = (g.in_per_group(), g.out_per_group(), g.col_rows());
    let mut out = vec![0.0; g.batch * g.out_ch * area];
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { rows * area }];
    for n in 0..g.batch {
        for grp in 0..g.groups {
            let x = &input[(n * g.in_ch + grp * cg) * in_plane..(n * g.in_ch + (grp + 1) * cg) * in_plane];
            let wg = &weight[grp * og * rows..(grp + 1) * og * rows];
            let y = &mut out[(n * g.out_ch + grp * og) * area..(n * g.out_ch + (grp + 1) * og) * area];
            if g.is_pointwise() {
                gemm(og, rows, area, wg, false, x, false, y, 0.0);
            } else {
                im2col(g, x, &mut cols);
                gemm(og, rows, area, wg, false, &cols, false, y, 0.0);
            }
        }
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                out[(n * g.out_ch + o) * area..(n * g.out_ch + o + 1) * area].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    need_input: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let area = g.out_area();
    let in_plane = g.height * g.width;
    let (cg, og, rows) = (g.in_per_group(), g.out_per_group(), g.col_rows());
    let mut d_input = need_input.then(|| vec![0.0; input.len()]);
    let mut d_weight = vec![0.0; weight.len()];
    let mut d_bias = vec![0.0; g.out_ch];
    let mut cols = vec![0.0; rows * area];
    let mut d_cols = vec![0.0; rows * area];
    for n in 0..g.batch {
        for grp in 0..g.groups {
            let x_range = (n * g.in_ch + grp * cg) * in_plane..(n * g.in_ch + (grp + 1) * cg) * in_plane;
            let wg = &weight[grp * og * rows..(grp + 1) * og * rows];
            let dy = &grad_out[(n * g.out_ch + grp * og) * area..(n * g.out_ch + (grp + 1) * og) * area];
            let dwg = &mut d_weight[grp * og * rows..(grp + 1) * og * rows];
            if g.is_pointwise() {
                gemm(og, area, rows, dy, false, &input[x_range.clone()], true, dwg, 1.0);
                if let Some(dx) = d_input.as_mut() {
                    gemm(rows, og, area, wg, true, dy, false, &mut dx[x_range], 1.0);
                }
            } else {
                im2col(g, &input[x_range.clone()], &mut cols);
                gemm(og, area, rows, dy, false, &cols, true, dwg, 1.0);
                if let Some(dx) = d_input.as_mut() {
                    gemm(rows, og, area, wg, true, dy, false, &mut d_cols, 0.0);
                    col2im(g, &d_cols, &mut dx[x_range]);
                }
            }
        }
        for o in 0..g.out_ch {
            d_bias[o] += grad_out[(n * g.out_ch + o) * area..(n * g.out_ch + o + 1) * area].iter().sum::<f32>();
        }
    }
    (d_input, d_weight, d_bias)
}

/// Geometry of a max-pool over NCHW input; padded cells never win.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Returns the pooled values and, per output, the flat input index of the
/// first (row-major) maximal element.
pub fn maxpool_forward(g: &PoolGeom, input: &[f32]) -> (Vec<f32>, Vec<usize>) {
    let planes = g.batch * g.channels;
    let mut out = Vec::with_capacity(planes * g.out_h * g.out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let idx = base + iy as usize * g.width + ix as usize;
                        if best_idx == usize::MAX || input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}
