//! Raw array kernels backing the tape operations.
//!
//! Parallel kernels split work into fixed-size chunks with disjoint outputs
//! and reduce partial results in chunk order, so results are bit-identical
//! regardless of thread count.

use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, ArrayView4, Axis, IxDyn};
use rayon::prelude::*;

/// Row-chunk size for parallel matrix multiplication.
const MM_CHUNK: usize = 256;

/// `a · b` for 2-D arrays, parallelized over fixed row chunks of `a`.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    if m <= MM_CHUNK {
        return a.dot(&b);
    }
    let ranges: Vec<(usize, usize)> = (0..m)
        .step_by(MM_CHUNK)
        .map(|s| (s, (s + MM_CHUNK).min(m)))
        .collect();
    let parts: Vec<Array2<f64>> = ranges
        .par_iter()
        .map(|&(s, e)| a.slice(ndarray::s![s..e, ..]).dot(&b))
        .collect();
    let mut out = Array2::zeros((m, n));
    for (&(s, e), part) in ranges.iter().zip(parts.iter()) {
        out.slice_mut(ndarray::s![s..e, ..]).assign(part);
    }
    out
}

/// Geometry of an im2col unfolding: square `k`×`k` window, stride 1,
/// symmetric zero padding `pad`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.pad + 1 - self.k, w + 2 * self.pad + 1 - self.k)
    }
}

/// Unfold `[N,H,W,C]` into `[N·OH·OW, k·k·C]` patches. Column order is
/// (ki, kj, c) row-major, matching weight layout `[k·k·C, C_out]`.
pub fn im2col(x: ArrayView4<f64>, geom: ConvGeom) -> Array2<f64> {
    let (n, h, w, c) = x.dim();
    let (oh, ow) = geom.out_hw(h, w);
    let cols = geom.k * geom.k * c;
    let rows_per_sample = oh * ow;
    let mut out = Array2::zeros((n * rows_per_sample, cols));
    let out_slice = out.as_slice_mut().expect("contiguous");
    out_slice
        .par_chunks_mut(rows_per_sample * cols)
        .enumerate()
        .for_each(|(s, chunk)| {
            let xs = x.index_axis(Axis(0), s);
            let mut row = 0usize;
            for op in 0..oh {
                for oq in 0..ow {
                    let base = row * cols;
                    let mut col = 0usize;
                    for ki in 0..geom.k {
                        let ip = (op + ki) as isize - geom.pad as isize;
                        for kj in 0..geom.k {
                            let jq = (oq + kj) as isize - geom.pad as isize;
                            if ip >= 0 && jq >= 0 && (ip as usize) < h && (jq as usize) < w {
                                for ch in 0..c {
                                    chunk[base + col + ch] = xs[[ip as usize, jq as usize, ch]];
                                }
                            }
                            col += c;
                        }
                    }
                    row += 1;
                }
            }
        });
    out
}

/// Scatter-add column gradients back to the `[N,H,W,C]` input of [`im2col`].
pub fn col2im(
    g: ArrayView2<f64>,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    geom: ConvGeom,
) -> Array4<f64> {
    let (oh, ow) = geom.out_hw(h, w);
    let cols = geom.k * geom.k * c;
    let rows_per_sample = oh * ow;
    assert_eq!(g.dim(), (n * rows_per_sample, cols));
    let mut out = Array4::zeros((n, h, w, c));
    let out_slice = out.as_slice_mut().expect("contiguous");
    let g_std = g.as_standard_layout();
    let g_slice = g_std.as_slice().expect("contiguous");
    out_slice
        .par_chunks_mut(h * w * c)
        .enumerate()
        .for_each(|(s, chunk)| {
            let gs = &g_slice[s * rows_per_sample * cols..(s + 1) * rows_per_sample * cols];
            let mut row = 0usize;
            for op in 0..oh {
                for oq in 0..ow {
                    let base = row * cols;
                    let mut col = 0usize;
                    for ki in 0..geom.k {
                        let ip = (op + ki) as isize - geom.pad as isize;
                        for kj in 0..geom.k {
                            let jq = (oq + kj) as isize - geom.pad as isize;
                            if ip >= 0 && jq >= 0 && (ip as usize) < h && (jq as usize) < w {
                                let off = ((ip as usize) * w + jq as usize) * c;
                                for ch in 0..c {
                                    chunk[off + ch] += gs[base + col + ch];
                                }
                            }
                            col += c;
                        }
                    }
                    row += 1;
                }
            }
        });
    out
}

/// 2×2 max-pool with stride 2 on `[N,H,W,C]`; trailing odd row/column is
/// dropped. Returns the pooled map and the per-output argmax code
/// `di*2 + dj` (first maximum in row-major window order on ties).
pub fn maxpool2_forward(x: ArrayView4<f64>) -> (Array4<f64>, Vec<u8>) {
    let (n, h, w, c) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::zeros((n, oh, ow, c));
    let mut arg = vec![0u8; n * oh * ow * c];
    let out_slice = out.as_slice_mut().expect("contiguous");
    out_slice
        .par_chunks_mut(oh * ow * c)
        .zip(arg.par_chunks_mut(oh * ow * c))
        .enumerate()
        .for_each(|(s, (ochunk, achunk))| {
            let xs = x.index_axis(Axis(0), s);
            let mut idx = 0usize;
            for op in 0..oh {
                for oq in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut code = 0u8;
                        for di in 0..2usize {
                            for dj in 0..2usize {
                                let v = xs[[2 * op + di, 2 * oq + dj, ch]];
                                if v > best {
                                    best = v;
                                    code = (di * 2 + dj) as u8;
                                }
                            }
                        }
                        ochunk[idx] = best;
                        achunk[idx] = code;
                        idx += 1;
                    }
                }
            }
        });
    (out, arg)
}

/// Backward of [`maxpool2_forward`]: route gradients to the recorded argmax.
pub fn maxpool2_backward(
    g: ArrayView4<f64>,
    arg: &[u8],
    in_shape: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (n, h, w, c) = in_shape;
    let (_, oh, ow, _) = g.dim();
    let mut out = Array4::zeros((n, h, w, c));
    let out_slice = out.as_slice_mut().expect("contiguous");
    let g_std = g.as_standard_layout();
    let g_slice = g_std.as_slice().expect("contiguous");
    out_slice
        .par_chunks_mut(h * w * c)
        .enumerate()
        .for_each(|(s, chunk)| {
            let base = s * oh * ow * c;
            let mut idx = 0usize;
            for op in 0..oh {
                for oq in 0..ow {
                    for ch in 0..c {
                        let code = arg[base + idx] as usize;
                        let (di, dj) = (code / 2, code % 2);
                        chunk[((2 * op + di) * w + (2 * oq + dj)) * c + ch] +=
                            g_slice[base + idx];
                        idx += 1;
                    }
                }
            }
        });
    out
}

/// Whether an offset code addresses a real pixel (not zero padding).
#[inline]
fn morph_src(p: usize, q: usize, code: usize, k: usize, h: usize, w: usize) -> Option<(usize, usize)> {
    let half = (k / 2) as isize;
    let ip = p as isize + (code / k) as isize - half;
    let jq = q as isize + (code % k) as isize - half;
    if ip >= 0 && jq >= 0 && (ip as usize) < h && (jq as usize) < w {
        Some((ip as usize, jq as usize))
    } else {
        None
    }
}

/// Grayscale dilation on `[N,H,W]`: windowed maximum of `z + w` with zero
/// padding, window centered on each pixel. Records the winning window code
/// (first maximum in row-major order on ties).
pub fn dilate_forward(z: ArrayView3<f64>, w: ArrayView2<f64>) -> (Array3<f64>, Vec<u8>) {
    morph_forward(z, w, true)
}

/// Grayscale erosion on `[N,H,W]`: windowed minimum of `z − w`, zero padding.
pub fn erode_forward(z: ArrayView3<f64>, w: ArrayView2<f64>) -> (Array3<f64>, Vec<u8>) {
    morph_forward(z, w, false)
}

fn morph_forward(
    z: ArrayView3<f64>,
    elem: ArrayView2<f64>,
    dilate: bool,
) -> (Array3<f64>, Vec<u8>) {
    let (n, h, w) = z.dim();
    let k = elem.dim().0;
    assert_eq!(elem.dim().1, k, "structural element must be square");
    assert!(k % 2 == 1, "structural element side must be odd");
    let mut out = Array3::zeros((n, h, w));
    let mut arg = vec![0u8; n * h * w];
    let out_slice = out.as_slice_mut().expect("contiguous");
    out_slice
        .par_chunks_mut(h * w)
        .zip(arg.par_chunks_mut(h * w))
        .enumerate()
        .for_each(|(s, (ochunk, achunk))| {
            let zs = z.index_axis(Axis(0), s);
            for p in 0..h {
                for q in 0..w {
                    let mut best = if dilate {
                        f64::NEG_INFINITY
                    } else {
                        f64::INFINITY
                    };
                    let mut code = 0u8;
                    for ci in 0..k * k {
                        let zv = match morph_src(p, q, ci, k, h, w) {
                            Some((ip, jq)) => zs[[ip, jq]],
                            None => 0.0,
                        };
                        let ev = elem[[ci / k, ci % k]];
                        let v = if dilate { zv + ev } else { zv - ev };
                        if (dilate && v > best) || (!dilate && v < best) {
                            best = v;
                            code = ci as u8;
                        }
                    }
                    ochunk[p * w + q] = best;
                    achunk[p * w + q] = code;
                }
            }
        });
    (out, arg)
}

/// Backward of dilation/erosion. Returns (dz, dw). The structural element
/// always receives gradient (sign `elem_sign`), the image only when the
/// winning window position was inside the image.
pub fn morph_backward(
    g: ArrayView3<f64>,
    arg: &[u8],
    z_shape: (usize, usize, usize),
    k: usize,
    elem_sign: f64,
) -> (Array3<f64>, Array2<f64>) {
    let (n, h, w) = z_shape;
    let mut dz = Array3::zeros((n, h, w));
    let g_std = g.as_standard_layout();
    let g_slice = g_std.as_slice().expect("contiguous");
    let dz_slice = dz.as_slice_mut().expect("contiguous");
    // dz per sample in parallel; dw reduced sequentially in sample order.
    let dws: Vec<Array2<f64>> = dz_slice
        .par_chunks_mut(h * w)
        .enumerate()
        .map(|(s, chunk)| {
            let mut dw = Array2::zeros((k, k));
            let base = s * h * w;
            for p in 0..h {
                for q in 0..w {
                    let gv = g_slice[base + p * w + q];
                    let code = arg[base + p * w + q] as usize;
                    if let Some((ip, jq)) = morph_src(p, q, code, k, h, w) {
                        chunk[ip * w + jq] += gv;
                    }
                    dw[[code / k, code % k]] += elem_sign * gv;
                }
            }
            dw
        })
        .collect();
    let mut dw = Array2::zeros((k, k));
    for part in dws {
        dw += &part;
    }
    (dz, dw)
}

/// Broadcast `x` to `shape` (numpy trailing-axis rules).
pub fn broadcast_to(x: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    x.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", x.shape(), shape))
        .to_owned()
}

/// Reduce a gradient of broadcast output back to the input shape: sum over
/// leading inserted axes and over axes where the input had extent 1.
pub fn reduce_to(g: &ArrayD<f64>, in_shape: &[usize]) -> ArrayD<f64> {
    let mut cur = g.clone();
    while cur.ndim() > in_shape.len() {
        cur = cur.sum_axis(Axis(0));
    }
    for ax in 0..in_shape.len() {
        if in_shape[ax] == 1 && cur.shape()[ax] != 1 {
            cur = cur.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    cur.into_shape_with_order(IxDyn(in_shape)).expect("reduce_to shape")
}

/// Sum over the given axes (removing them), in descending axis order.
pub fn sum_axes(x: &ArrayD<f64>, axes: &[usize]) -> ArrayD<f64> {
    let mut sorted: Vec<usize> = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut cur = x.clone();
    for &ax in sorted.iter().rev() {
        cur = cur.sum_axis(Axis(ax));
    }
    cur
}

/// Input shape with the reduced axes restored as extent-1 (for broadcasting a
/// reduction gradient back to the input).
pub fn keepdims_shape(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    in_shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}
