//! Raw slice kernels behind the tape ops. Layouts are row-major NCHW.
//!
//! Inner loops run over contiguous output rows so they vectorize; a fixed
//! loop order keeps every result deterministic.

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn padded_h(&self) -> usize {
        self.h + 2 * self.pad
    }

    pub fn padded_w(&self) -> usize {
        self.w + 2 * self.pad
    }

    /// Output spatial size, or `None` when the window does not tile evenly.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        let (ph, pw) = (self.padded_h(), self.padded_w());
        if self.k == 0 || self.stride == 0 || ph < self.k || pw < self.k {
            return None;
        }
        if !(ph - self.k).is_multiple_of(self.stride) || !(pw - self.k).is_multiple_of(self.stride) {
            return None;
        }
        Some(((ph - self.k) / self.stride + 1, (pw - self.k) / self.stride + 1))
    }
}

/// `c[m,n] = a[m,k] * b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `ga[m,k] = gc[m,n] * b[k,n]^T`
pub fn matmul_grad_lhs(gc: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut ga = vec![0.0; m * k];
    for i in 0..m {
        let g_row = &gc[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            ga[i * k + p] = dot(g_row, b_row);
        }
    }
    ga
}

/// `gb[k,n] = a[m,k]^T * gc[m,n]`
pub fn matmul_grad_rhs(a: &[f64], gc: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        let g_row = &gc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let gb_row = &mut gb[p * n..(p + 1) * n];
            for (gv, &g) in gb_row.iter_mut().zip(g_row) {
                *gv += av * g;
            }
        }
    }
    gb
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pad_input(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let mut out = vec![0.0; g.n * g.c_in * ph * pw];
    for plane in 0..g.n * g.c_in {
        for y in 0..g.h {
            let src = &x[(plane * g.h + y) * g.w..(plane * g.h + y + 1) * g.w];
            let dst_start = (plane * ph + y + g.pad) * pw + g.pad;
            out[dst_start..dst_start + g.w].copy_from_slice(src);
        }
    }
    out
}

fn padded<'a>(x: &'a [f64], g: &ConvGeom, buf: &'a mut Vec<f64>) -> &'a [f64] {
    if g.pad == 0 {
        x
    } else {
        *buf = pad_input(x, g);
        buf
    }
}

/// Cross-correlation without bias. Returns `[n, c_out, oh, ow]`.
pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.output_hw().expect("validated geometry");
    let mut buf = Vec::new();
    let xp = padded(x, g, &mut buf);
    let (ph, pw, k, s) = (g.padded_h(), g.padded_w(), g.k, g.stride);
    let mut out = vec![0.0; g.n * g.c_out * oh * ow];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let out_plane = &mut out[(n * g.c_out + o) * oh * ow..(n * g.c_out + o + 1) * oh * ow];
            for c in 0..g.c_in {
                let x_plane = &xp[(n * g.c_in + c) * ph * pw..(n * g.c_in + c + 1) * ph * pw];
                let w_filter = &w[(o * g.c_in + c) * k * k..(o * g.c_in + c + 1) * k * k];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = w_filter[ki * k + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let row = (oy * s + ki) * pw + kj;
                            let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                for (ov, &xv) in out_row.iter_mut().zip(&x_plane[row..row + ow]) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for (ox, ov) in out_row.iter_mut().enumerate() {
                                    *ov += wv * x_plane[row + ox * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the filters, `[c_out, c_in, k, k]`.
pub fn conv2d_grad_weight(x: &[f64], gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.output_hw().expect("validated geometry");
    let mut buf = Vec::new();
    let xp = padded(x, g, &mut buf);
    let (ph, pw, k, s) = (g.padded_h(), g.padded_w(), g.k, g.stride);
    let mut gw = vec![0.0; g.c_out * g.c_in * k * k];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let g_plane = &gout[(n * g.c_out + o) * oh * ow..(n * g.c_out + o + 1) * oh * ow];
            for c in 0..g.c_in {
                let x_plane = &xp[(n * g.c_in + c) * ph * pw..(n * g.c_in + c + 1) * ph * pw];
                let gw_filter = &mut gw[(o * g.c_in + c) * k * k..(o * g.c_in + c + 1) * k * k];
                for ki in 0..k {
                    for kj in 0..k {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let row = (oy * s + ki) * pw + kj;
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                acc += dot(g_row, &x_plane[row..row + ow]);
                            } else {
                                for (ox, &gv) in g_row.iter().enumerate() {
                                    acc += gv * x_plane[row + ox * s];
                                }
                            }
                        }
                        gw_filter[ki * k + kj] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Gradient w.r.t. the input, `[n, c_in, h, w]`.
pub fn conv2d_grad_input(w: &[f64], gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.output_hw().expect("validated geometry");
    let (ph, pw, k, s) = (g.padded_h(), g.padded_w(), g.k, g.stride);
    let mut gxp = vec![0.0; g.n * g.c_in * ph * pw];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let g_plane = &gout[(n * g.c_out + o) * oh * ow..(n * g.c_out + o + 1) * oh * ow];
            for c in 0..g.c_in {
                let gx_plane = &mut gxp[(n * g.c_in + c) * ph * pw..(n * g.c_in + c + 1) * ph * pw];
                let w_filter = &w[(o * g.c_in + c) * k * k..(o * g.c_in + c + 1) * k * k];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = w_filter[ki * k + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let row = (oy * s + ki) * pw + kj;
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                for (xv, &gv) in gx_plane[row..row + ow].iter_mut().zip(g_row) {
                                    *xv += wv * gv;
                                }
                            } else {
                                for (ox, &gv) in g_row.iter().enumerate() {
                                    gx_plane[row + ox * s] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if g.pad == 0 {
        return gxp;
    }
    let mut gx = vec![0.0; g.n * g.c_in * g.h * g.w];
    for plane in 0..g.n * g.c_in {
        for y in 0..g.h {
            let src_start = (plane * ph + y + g.pad) * pw + g.pad;
            gx[(plane * g.h + y) * g.w..(plane * g.h + y + 1) * g.w]
                .copy_from_slice(&gxp[src_start..src_start + g.w]);
        }
    }
    gx
}

/// Max pooling over `planes` planes of `h x w`. Returns values and the flat
/// input index of each window's first (row-major) maximum.
pub fn maxpool2d(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * stride * w + ox * stride;
                for i in 0..window {
                    for j in 0..window {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if x[idx] > best {
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
