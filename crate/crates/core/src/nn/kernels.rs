//! Forward and backward kernels behind the graph operators.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self { stride, padding, dilation }
    }

    /// Output extent along one axis, `None` when the kernel does not fit.
    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

pub(crate) struct ConvShape {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeom,
}

impl ConvShape {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], s: &ConvShape, col: &mut [f64]) {
    let (p, g) = (s.p(), s.geom);
    for ci in 0..s.cin {
        let plane = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = ((ci * s.kh + ky) * s.kw + kx) * p;
                let dst = &mut col[row..row + p];
                for oy in 0..s.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * s.wo..(oy + 1) * s.wo];
                    if iy < 0 || iy >= s.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *v = if ix >= 0 && ix < s.w as isize { src[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], s: &ConvShape, dx: &mut [f64]) {
    let (p, g) = (s.p(), s.geom);
    for ci in 0..s.cin {
        let plane = &mut dx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = ((ci * s.kh + ky) * s.kw + kx) * p;
                let src = &col[row..row + p];
                for oy in 0..s.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for ox in 0..s.wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] += src[oy * s.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, beta: f64, c: &mut [f64]) {
    // SAFETY: callers pass buffers sized for the stated extents and strides;
    // `c` is a dense row-major m x n block.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn direct_1x1(s: &ConvShape) -> bool {
    s.kh == 1 && s.kw == 1 && s.geom.stride == 1 && s.geom.padding == 0
}

/// Forward convolution of one sample: `out[co, p] = sum_k w[co, k] col[k, p] + b[co]`.
pub(crate) fn conv_forward_sample(x: &[f64], w: &[f64], b: Option<&[f64]>, cout: usize, s: &ConvShape, col: &mut Vec<f64>, out: &mut [f64]) {
    let (k, p) = (s.k(), s.p());
    let cols: &[f64] = if direct_1x1(s) {
        x
    } else {
        col.resize(k * p, 0.0);
        im2col(x, s, col);
        col
    };
    gemm(cout, k, p, w, k as isize, 1, cols, p as isize, 1, 0.0, out);
    if let Some(b) = b {
        for co in 0..cout {
            out[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += b[co]);
        }
    }
}

/// Backward of one sample. Accumulates into `dw`, `db` and `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_sample(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    cout: usize,
    s: &ConvShape,
    col: &mut Vec<f64>,
    dcol: &mut Vec<f64>,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    let (k, p) = (s.k(), s.p());
    if let Some(db) = db {
        for co in 0..cout {
            db[co] += dout[co * p..(co + 1) * p].iter().sum::<f64>();
        }
    }
    let direct = direct_1x1(s);
    let cols: &[f64] = if direct {
        x
    } else {
        col.resize(k * p, 0.0);
        im2col(x, s, col);
        col
    };
    // dw[co, k] += dout[co, p] * col[k, p]^T
    gemm(cout, p, k, dout, p as isize, 1, cols, 1, p as isize, 1.0, dw);
    if let Some(dx) = dx {
        if direct {
            // dx[k, p] += w^T[k, co] dout[co, p]
            gemm(k, cout, p, w, 1, k as isize, dout, p as isize, 1, 1.0, dx);
        } else {
            dcol.resize(k * p, 0.0);
            gemm(k, cout, p, w, 1, k as isize, dout, p as isize, 1, 0.0, dcol);
            col2im(dcol, s, dx);
        }
    }
}

/// Per-axis sampling table for corner-aligned bilinear resizing:
/// `(lower index, upper index, upper weight)` per output position.
pub(crate) fn bilinear_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = if dst > 1 { (src as f64 - 1.0) / (dst as f64 - 1.0) } else { 0.0 };
    (0..dst)
        .map(|i| {
            let f = i as f64 * scale;
            let i0 = (f.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, f - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_plane(x: &[f64], h: usize, w: usize, ty: &[(usize, usize, f64)], tx: &[(usize, usize, f64)], out: &mut [f64]) {
    let wo = tx.len();
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let r0 = &x[y0 * w..(y0 + 1) * w];
        let r1 = &x[y1 * w..(y1 + 1) * w];
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
            let bottom = r1[x0] * (1.0 - fx) + r1[x1] * fx;
            out[oy * wo + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
    debug_assert_eq!(x.len(), h * w);
}

pub(crate) fn upsample_plane_backward(dout: &[f64], w: usize, ty: &[(usize, usize, f64)], tx: &[(usize, usize, f64)], dx: &mut [f64]) {
    let wo = tx.len();
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let g = dout[oy * wo + ox];
            dx[y0 * w + x0] += g * (1.0 - fx) * (1.0 - fy);
            dx[y0 * w + x1] += g * fx * (1.0 - fy);
            dx[y1 * w + x0] += g * (1.0 - fx) * fy;
            dx[y1 * w + x1] += g * fx * fy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], cout: usize, kh: usize, kw: usize, g: ConvGeom) -> Vec<f64> {
        let ho = g.out_size(h, kh).unwrap();
        let wo = g.out_size(w, kw).unwrap();
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wt[((co * cin + ci) * kh + ky) * kw + kx] * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_convolution_matches_direct_sum() {
        let mut rng = crate::rng::SeededRng::new(12);
        for &(cin, cout, h, w, k, stride, pad, dil) in &[
            (2, 3, 7, 6, 3, 1, 1, 1),
            (3, 2, 9, 9, 3, 2, 1, 1),
            (1, 2, 11, 10, 3, 1, 2, 2),
            (2, 2, 8, 8, 1, 1, 0, 1),
            (2, 1, 9, 7, 7, 1, 3, 1),
        ] {
            let g = ConvGeom::new(stride, pad, dil);
            let x: Vec<f64> = (0..cin * h * w).map(|_| rng.normal()).collect();
            let wt: Vec<f64> = (0..cout * cin * k * k).map(|_| rng.normal()).collect();
            let s = ConvShape { cin, h, w, kh: k, kw: k, ho: g.out_size(h, k).unwrap(), wo: g.out_size(w, k).unwrap(), geom: g };
            let mut out = vec![0.0; cout * s.ho * s.wo];
            conv_forward_sample(&x, &wt, None, cout, &s, &mut Vec::new(), &mut out);
            let expected = naive(&x, cin, h, w, &wt, cout, k, k, g);
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(ConvGeom::new(1, 1, 1).out_size(128, 3), Some(128));
        assert_eq!(ConvGeom::new(2, 1, 1).out_size(128, 3), Some(64));
        assert_eq!(ConvGeom::new(1, 4, 4).out_size(16, 3), Some(16));
        assert_eq!(ConvGeom::new(1, 0, 1).out_size(2, 3), None);
    }
}
