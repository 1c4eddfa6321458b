//! Raw slice kernels shared by forward and backward passes.

/// Row-major `c = a(m×k) · b(k×n)` with optional transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
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
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked below against the strides passed in.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
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

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    fn cols_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols_width(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let width = g.cols_width();
    let mut cols = vec![0.0; g.cols_rows() * width];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * width..(row + 1) * width];
                for b in 0..g.batch {
                    let src = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..oh {
                        let iy = oy as isize + ky as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        let dst = &mut dst_row[(b * oh + oy) * ow..][..ow];
                        let shift = kx as isize - g.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = (g.w as isize - shift).min(ow as isize).max(0) as usize;
                        for ox in lo..hi {
                            dst[ox] = src_row[(ox as isize + shift) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let width = g.cols_width();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src_row = &cols[row * width..(row + 1) * width];
                for b in 0..g.batch {
                    let dst = &mut gx[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..oh {
                        let iy = oy as isize + ky as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        let src = &src_row[(b * oh + oy) * ow..][..ow];
                        let shift = kx as isize - g.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = (g.w as isize - shift).min(ow as isize).max(0) as usize;
                        for ox in lo..hi {
                            dst_row[(ox as isize + shift) as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution, `x: [B,Cin,H,W]`, `w: [Cout,Cin,K,K]`.
pub(crate) fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let width = g.cols_width();
    let mut mat = vec![0.0; g.cout * width];
    gemm(g.cout, g.cols_rows(), width, w, false, &cols, false, &mut mat, false);
    // [Cout, B*HWo] -> [B, Cout, HWo]
    let hw = g.out_h() * g.out_w();
    let mut out = vec![0.0; g.batch * g.cout * hw];
    for co in 0..g.cout {
        for b in 0..g.batch {
            out[(b * g.cout + co) * hw..][..hw].copy_from_slice(&mat[co * width + b * hw..][..hw]);
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input and weight.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let width = g.cols_width();
    let hw = g.out_h() * g.out_w();
    let mut gmat = vec![0.0; g.cout * width];
    for co in 0..g.cout {
        for b in 0..g.batch {
            gmat[co * width + b * hw..][..hw].copy_from_slice(&gout[(b * g.cout + co) * hw..][..hw]);
        }
    }
    let rows = g.cols_rows();
    let gw = if need_w {
        let cols = im2col(x, g);
        let mut gw = vec![0.0; g.cout * rows];
        gemm(g.cout, width, rows, &gmat, false, &cols, true, &mut gw, false);
        Some(gw)
    } else {
        None
    };
    let gx = if need_x {
        let mut gcols = vec![0.0; rows * width];
        gemm(rows, g.cout, width, w, true, &gmat, false, &mut gcols, false);
        let mut gx = vec![0.0; x.len()];
        col2im(&gcols, g, &mut gx);
        Some(gx)
    } else {
        None
    };
    (gx, gw)
}

/// Average pooling over trailing `h×w` planes; `lead` planes in total.
pub(crate) fn avg_pool(x: &[f64], lead: usize, h: usize, w: usize, f: usize, out: &mut [f64]) {
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    for p in 0..lead {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / f) * ow + xx / f] += src[y * w + xx] * norm;
            }
        }
    }
}

/// Nearest-neighbour upsampling; adjoint of block-summing.
pub(crate) fn upsample(x: &[f64], lead: usize, h: usize, w: usize, f: usize, out: &mut [f64]) {
    let (oh, ow) = (h * f, w * f);
    for p in 0..lead {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / f) * w + xx / f];
            }
        }
    }
}

/// Sum over `f×f` blocks: the adjoint of [`upsample`].
pub(crate) fn block_sum(g: &[f64], lead: usize, h: usize, w: usize, f: usize, out: &mut [f64]) {
    let (oh, ow) = (h * f, w * f);
    for p in 0..lead {
        let src = &g[p * oh * ow..][..oh * ow];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / f) * w + xx / f] += src[y * ow + xx];
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Normalize across the channel axis (axis 1) of `[B, C, S]` data.
/// Returns the output and the per-(b, s) inverse standard deviations.
pub(crate) fn layer_norm(x: &[f64], b: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv = vec![0.0; b * s];
    for bi in 0..b {
        for si in 0..s {
            let at = |ci: usize| (bi * c + ci) * s + si;
            let mean = (0..c).map(|ci| x[at(ci)]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ci| (x[at(ci)] - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv[bi * s + si] = is;
            for ci in 0..c {
                out[at(ci)] = (x[at(ci)] - mean) * is;
            }
        }
    }
    (out, inv)
}

pub(crate) fn layer_norm_backward(y: &[f64], inv: &[f64], g: &[f64], b: usize, c: usize, s: usize) -> Vec<f64> {
    let mut gx = vec![0.0; y.len()];
    for bi in 0..b {
        for si in 0..s {
            let at = |ci: usize| (bi * c + ci) * s + si;
            let mg = (0..c).map(|ci| g[at(ci)]).sum::<f64>() / c as f64;
            let mgy = (0..c).map(|ci| g[at(ci)] * y[at(ci)]).sum::<f64>() / c as f64;
            let is = inv[bi * s + si];
            for ci in 0..c {
                gx[at(ci)] = is * (g[at(ci)] - mg - y[at(ci)] * mgy);
            }
        }
    }
    gx
}
