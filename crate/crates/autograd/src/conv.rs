use ndarray::{Array2, ArrayView2, Ix2, Ix4};

use crate::Array;

/// Output extent of a strided, zero-padded convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel larger than padded input");
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
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
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(input.len(), 4, "conv2d input must be NCHW");
        assert_eq!(weight.len(), 4, "conv2d weight must be OCHW");
        assert_eq!(input[1], weight[1], "conv2d channel mismatch");
        let (h, w, kh, kw) = (input[2], input[3], weight[2], weight[3]);
        Self {
            n: input[0],
            c: input[1],
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: conv_output_size(h, kh, stride, pad),
            wo: conv_output_size(w, kw, stride, pad),
        }
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Writes the receptive field of output pixel `row` (in `N·Ho·Wo` order)
/// into `dst`, zeros where it overhangs the padding.
fn fill_patch(x: &[f64], g: &ConvGeom, row: usize, dst: &mut [f64]) {
    let (h, w, pad) = (g.h as isize, g.w as isize, g.pad as isize);
    let n = row / (g.ho * g.wo);
    let (oy, ox) = ((row / g.wo) % g.ho, row % g.wo);
    let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
    let y0 = (oy * g.stride) as isize - pad;
    let x0 = (ox * g.stride) as isize - pad;
    let inside = x0 >= 0 && x0 + g.kw as isize <= w;
    let mut k = 0;
    for ci in 0..g.c {
        let plane = &xn[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh as isize {
            let iy = y0 + ky;
            let d = &mut dst[k..k + g.kw];
            k += g.kw;
            if iy < 0 || iy >= h {
                d.fill(0.0);
                continue;
            }
            let rowp = &plane[(iy as usize) * g.w..(iy as usize + 1) * g.w];
            if inside {
                let x0 = x0 as usize;
                for (d, &v) in d.iter_mut().zip(&rowp[x0..x0 + g.kw]) {
                    *d = v;
                }
                continue;
            }
            for (kx, d) in d.iter_mut().enumerate() {
                let ix = x0 + kx as isize;
                *d = if ix >= 0 && ix < w { rowp[ix as usize] } else { 0.0 };
            }
        }
    }
}

/// Unfolds NCHW input into a `(N·Ho·Wo, C·kh·kw)` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Array2<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.rows() * plen];
    for (row, dst) in cols.chunks_exact_mut(plen).enumerate() {
        fill_patch(x, g, row, dst);
    }
    Array2::from_shape_vec((g.rows(), plen), cols).expect("im2col shape")
}

/// Folds a patch-matrix gradient back onto NCHW input positions (adjoint of [`im2col`]).
pub(crate) fn col2im(cols: ArrayView2<f64>, g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().expect("standard layout");
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    let (h, w, pad) = (g.h as isize, g.w as isize, g.pad as isize);
    for n in 0..g.n {
        let xn = &mut x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = (n * g.ho + oy) * g.wo + ox;
                let src = &cols[row * plen..(row + 1) * plen];
                let y0 = (oy * g.stride) as isize - pad;
                let x0 = (ox * g.stride) as isize - pad;
                let mut k = 0;
                for ci in 0..g.c {
                    let plane = &mut xn[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                    for ky in 0..g.kh as isize {
                        let iy = y0 + ky;
                        if iy < 0 || iy >= h {
                            k += g.kw;
                            continue;
                        }
                        let base = (iy as usize) * g.w;
                        for kx in 0..g.kw as isize {
                            let ix = x0 + kx;
                            if ix >= 0 && ix < w {
                                plane[base + ix as usize] += src[k];
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    x
}

fn weight_matrix(weight: &Array) -> ArrayView2<'_, f64> {
    let o = weight.shape()[0];
    let rest: usize = weight.shape()[1..].iter().product();
    weight
        .view()
        .into_shape_with_order((o, rest))
        .expect("weight must be contiguous")
}

/// Below this many output channels the products are done row by row;
/// general GEMM spends most of its time packing such thin operands.
const NARROW: usize = 32;

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

const LANES: usize = 8;

/// `a · bᵀ` for `a: (R, K)`, `b: (O, K)`.
#[cfg(test)]
fn narrow_nt(a: &Array2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let a = a.as_standard_layout();
    narrow_nt_with(a.nrows(), b, |i, dst| dst.copy_from_slice(a.row(i).as_slice().expect("contiguous rows")))
}

/// `a · bᵀ` for `b: (O, K)` where row `i` of `a` is produced on demand by
/// `fill(i, buf)`, so the full `(R, K)` matrix never exists.
fn narrow_nt_with(r: usize, b: &ArrayView2<f64>, fill: impl Fn(usize, &mut [f64])) -> Array2<f64> {
    let (o, k) = b.dim();
    let blocks = o.div_ceil(LANES);
    // bᵀ split into zero-padded column blocks of LANES outputs.
    let mut bt = vec![0.0; blocks * k * LANES];
    for ((j, kk), &v) in b.indexed_iter() {
        bt[((j / LANES) * k + kk) * LANES + j % LANES] = v;
    }
    let mut arow = vec![0.0; k];
    let mut out = vec![0.0; r * o];
    for (i, orow) in out.chunks_exact_mut(o).enumerate() {
        fill(i, &mut arow);
        for blk in 0..blocks {
            let mut acc = [0.0; LANES];
            for (&x, w) in arow.iter().zip(bt[blk * k * LANES..(blk + 1) * k * LANES].chunks_exact(LANES)) {
                let w: &[f64; LANES] = w.try_into().expect("lane");
                for l in 0..LANES {
                    acc[l] += x * w[l];
                }
            }
            let lo = blk * LANES;
            let hi = (lo + LANES).min(o);
            orow[lo..hi].copy_from_slice(&acc[..hi - lo]);
        }
    }
    Array2::from_shape_vec((r, o), out).expect("narrow_nt shape")
}

/// `aᵀ · b` for `a: (R, O)`, `b: (R, K)`.
#[cfg(test)]
fn narrow_tn(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let b = b.as_standard_layout();
    narrow_tn_with(a, b.ncols(), |i, dst| dst.copy_from_slice(b.row(i).as_slice().expect("contiguous rows")))
}

/// `aᵀ · b` for `a: (R, O)` with rows of `b` produced by `fill(i, buf)`.
fn narrow_tn_with(a: &Array2<f64>, k: usize, fill: impl Fn(usize, &mut [f64])) -> Array2<f64> {
    const ROWS: usize = 4;
    let (r, o) = a.dim();
    let blocks = o.div_ceil(LANES);
    // `a` regrouped as zero-padded (R, blocks, LANES).
    let mut ap = vec![0.0; r * blocks * LANES];
    for ((i, j), &v) in a.indexed_iter() {
        ap[(i * blocks + j / LANES) * LANES + j % LANES] = v;
    }
    // Accumulates (K, LANES) tiles of the transposed result, ROWS rows of
    // `b` at a time so each tile load is shared.
    let mut tiles = vec![0.0; blocks * k * LANES];
    let mut rows = vec![0.0; ROWS * k];
    let lane = |row: usize, blk: usize| -> [f64; LANES] { ap[(row * blocks + blk) * LANES..][..LANES].try_into().expect("lane") };
    let mut i = 0;
    while i < r {
        let n = ROWS.min(r - i);
        for (q, dst) in rows.chunks_exact_mut(k).enumerate() {
            if q < n {
                fill(i + q, dst);
            } else {
                dst.fill(0.0);
            }
        }
        let (r0, rest) = rows.split_at(k);
        let (r1, rest) = rest.split_at(k);
        let (r2, r3) = rest.split_at(k);
        for blk in 0..blocks {
            let mut g = [[0.0; LANES]; ROWS];
            for (q, gq) in g.iter_mut().enumerate().take(n) {
                *gq = lane(i + q, blk);
            }
            let tile = &mut tiles[blk * k * LANES..(blk + 1) * k * LANES];
            for (kk, t) in tile.chunks_exact_mut(LANES).enumerate() {
                let t: &mut [f64; LANES] = t.try_into().expect("lane");
                let x = [r0[kk], r1[kk], r2[kk], r3[kk]];
                for l in 0..LANES {
                    t[l] += (x[0] * g[0][l] + x[1] * g[1][l]) + (x[2] * g[2][l] + x[3] * g[3][l]);
                }
            }
        }
        i += n;
    }
    Array2::from_shape_fn((o, k), |(j, kk)| tiles[((j / LANES) * k + kk) * LANES + j % LANES])
}

/// `a · b` for `a: (R, O)`, `b: (O, K)`.
fn narrow_nn(a: &Array2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let b = b.as_standard_layout();
    let (r, k) = (a.nrows(), b.ncols());
    let mut out = vec![0.0; r * k];
    for (arow, orow) in a.rows().into_iter().zip(out.chunks_exact_mut(k)) {
        for (j, &aj) in arow.iter().enumerate() {
            if aj != 0.0 {
                axpy(orow, aj, b.row(j).to_slice().expect("contiguous rows"));
            }
        }
    }
    Array2::from_shape_vec((r, k), out).expect("narrow_nn shape")
}

/// Plain convolution forward pass (no tape), used by inference-only paths.
pub fn conv2d_forward(input: &Array, weight: &Array, stride: usize, pad: usize) -> Array {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, pad);
    let x = input.as_standard_layout();
    let x = x.as_slice().expect("standard layout");
    let wm = weight_matrix(weight);
    let o = weight.shape()[0];
    // (N·Ho·Wo, O)
    let out = if o <= NARROW { narrow_nt_with(g.rows(), &wm, |i, dst| fill_patch(x, &g, i, dst)) } else { im2col(x, &g).dot(&wm.t()) };
    out.into_shape_with_order((g.n, g.ho, g.wo, o))
        .expect("conv out shape")
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned()
        .into_dyn()
}

/// Gradients of a convolution with respect to its input and weight.
pub(crate) fn conv2d_backward(
    input: &Array,
    weight: &Array,
    grad_out: &Array,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_weight: bool,
) -> (Option<Array>, Option<Array>) {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, pad);
    let o = weight.shape()[0];
    let go = grad_out
        .view()
        .into_dimensionality::<Ix4>()
        .expect("grad must be 4-D")
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((g.rows(), o))
        .expect("grad reshape");
    let wm = weight_matrix(weight);
    let gw = if need_weight {
        let x = input.as_standard_layout();
        let x = x.as_slice().expect("standard layout");
        let gw = if o <= NARROW {
            narrow_tn_with(&go, g.patch_len(), |i, dst| fill_patch(x, &g, i, dst))
        } else {
            go.t().dot(&im2col(x, &g))
        };
        Some(
            gw.into_shape_with_order(weight.raw_dim())
                .expect("weight grad shape")
                .into_dimensionality::<ndarray::IxDyn>()
                .expect("dyn"),
        )
    } else {
        None
    };
    let gx = if need_input {
        let gcols = if o <= NARROW { narrow_nn(&go, &wm) } else { go.dot(&wm) };
        let flat = col2im(gcols.view().into_dimensionality::<Ix2>().expect("2-D"), &g);
        Some(Array::from_shape_vec(input.raw_dim(), flat).expect("input grad shape"))
    } else {
        None
    };
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Array, w: &Array, stride: usize, pad: usize) -> Array {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = conv_output_size(h, kh, stride, pad);
        let wo = conv_output_size(wd, kw, stride, pad);
        let mut out = Array::zeros(vec![n, o, ho, wo]);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[[b, ci, iy as usize, ix as usize]] * w[[oc, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[b, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let x = Array::from_shape_fn(vec![2, 3, 7, 6], |d| ((d[0] * 31 + d[1] * 7 + d[2] * 3 + d[3]) % 11) as f64 - 5.0);
        let w = Array::from_shape_fn(vec![4, 3, 3, 2], |d| ((d[0] + 2 * d[1] + 3 * d[2] + 5 * d[3]) % 7) as f64 * 0.25 - 0.5);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let a = conv2d_forward(&x, &w, stride, pad);
            let b = naive_conv(&x, &w, stride, pad);
            assert_eq!(a.shape(), b.shape());
            for (p, q) in a.iter().zip(b.iter()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn narrow_products_match_gemm() {
        let a = Array2::from_shape_fn((13, 9), |(i, j)| ((i * 5 + j * 3) % 7) as f64 - 3.0);
        let w = Array2::from_shape_fn((5, 9), |(i, j)| ((i + 2 * j) % 4) as f64 * 0.5 - 1.0);
        let g = Array2::from_shape_fn((13, 5), |(i, j)| ((i * j) % 3) as f64 - 1.0);
        assert_eq!(narrow_nt(&a, &w.view()), a.dot(&w.t()));
        assert_eq!(narrow_tn(&g, &a), g.t().dot(&a));
        assert_eq!(narrow_nn(&g, &w.view()), g.dot(&w));
    }

    #[test]
    fn wide_convolution_matches_direct() {
        let x = Array::from_shape_fn(vec![1, 2, 5, 5], |d| (d[1] * 25 + d[2] * 5 + d[3]) as f64 * 0.1);
        let w = Array::from_shape_fn(vec![NARROW + 3, 2, 3, 3], |d| ((d[0] + d[1] + d[2] * d[3]) % 5) as f64 - 2.0);
        let a = conv2d_forward(&x, &w, 1, 1);
        let b = naive_conv(&x, &w, 1, 1);
        assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-9));
    }

    #[test]
    fn output_size_examples() {
        assert_eq!(conv_output_size(84, 8, 4, 2), 21);
        assert_eq!(conv_output_size(21, 3, 2, 1), 11);
        assert_eq!(conv_output_size(11, 3, 2, 1), 6);
        assert_eq!(conv_output_size(84, 7, 2, 3), 42);
    }
}
