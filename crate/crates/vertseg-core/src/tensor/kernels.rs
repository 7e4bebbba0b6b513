//! Raw compute kernels behind the graph ops.
//!
//! All kernels are deterministic: parallelism (rayon) is only ever applied
//! across disjoint output slices, and every accumulation inside a slice runs
//! in a fixed sequential order. Identical inputs therefore produce
//! bit-identical outputs regardless of thread count.

use rayon::prelude::*;

use super::Scalar;

/// Work threshold (in multiply-accumulates) below which a kernel stays
/// sequential; tiny tensors are dominated by rayon dispatch overhead.
const PAR_THRESHOLD: usize = 1 << 15;

fn run_planes<T, F>(out: &mut [T], plane: usize, work: usize, f: F)
where
    T: Scalar,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if work >= PAR_THRESHOLD && out.len() > plane {
        out.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    } else {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            f(i, chunk);
        }
    }
}

/// Row ranges for a kernel offset `d` so that `src = dst + d` stays inside
/// `[0, n)` while `dst` stays inside `[0, n)`.
#[inline]
fn shift_range(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 {
        n.saturating_sub(d as usize)
    } else {
        n
    };
    (lo, hi.max(lo))
}

/// Same-padding stride-1 cross-correlation.
/// `input` is `[n, cin, h, w]`, `weight` is `[cout, cin, k, k]` with odd `k`,
/// `bias` is `[cout]`, `out` is `[n, cout, h, w]`.
pub(crate) fn conv2d_forward<T: Scalar>(
    input: &[T],
    _n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    k: usize,
    bias: &[T],
    out: &mut [T],
) {
    let pad = (k - 1) / 2;
    let plane = h * w;
    let work = plane * cin * k * k;
    run_planes(out, plane, work, |idx, out_plane| {
        let b = idx / cout;
        let co = idx % cout;
        out_plane.fill(bias[co]);
        for ci in 0..cin {
            let in_plane = &input[(b * cin + ci) * plane..][..plane];
            let w_base = (co * cin + ci) * k * k;
            for ky in 0..k {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = shift_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad as isize;
                    let (x0, x1) = shift_range(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = weight[w_base + ky * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src = &in_plane[sy * w..][..w];
                        let dst = &mut out_plane[y * w..][..w];
                        let sx0 = (x0 as isize + dx) as usize;
                        let sx1 = (x1 as isize + dx) as usize;
                        for (d, s) in dst[x0..x1].iter_mut().zip(&src[sx0..sx1]) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    });
}

/// d(loss)/d(input) for [`conv2d_forward`]. Adds into `din` (caller zeroes).
pub(crate) fn conv2d_backward_input<T: Scalar>(
    gout: &[T],
    _n: usize,
    cout: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cin: usize,
    k: usize,
    din: &mut [T],
) {
    let pad = (k - 1) / 2;
    let plane = h * w;
    let work = plane * cout * k * k;
    run_planes(din, plane, work, |idx, din_plane| {
        let b = idx / cin;
        let ci = idx % cin;
        for co in 0..cout {
            let g_plane = &gout[(b * cout + co) * plane..][..plane];
            let w_base = (co * cin + ci) * k * k;
            for ky in 0..k {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = shift_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad as isize;
                    let (x0, x1) = shift_range(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = weight[w_base + ky * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let g_row = &g_plane[y * w..][..w];
                        let d_row = &mut din_plane[sy * w..][..w];
                        let sx0 = (x0 as isize + dx) as usize;
                        let sx1 = (x1 as isize + dx) as usize;
                        for (d, g) in d_row[sx0..sx1].iter_mut().zip(&g_row[x0..x1]) {
                            *d += wv * *g;
                        }
                    }
                }
            }
        }
    });
}

/// d(loss)/d(weight) for [`conv2d_forward`]. Adds into `dw` (caller zeroes).
pub(crate) fn conv2d_backward_weight<T: Scalar>(
    gout: &[T],
    input: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    dw: &mut [T],
) {
    let pad = (k - 1) / 2;
    let plane = h * w;
    let chunk = cin * k * k;
    let work = plane * n * chunk;
    run_planes(dw, chunk, work, |co, dw_chunk| {
        for b in 0..n {
            let g_plane = &gout[(b * cout + co) * plane..][..plane];
            for ci in 0..cin {
                let in_plane = &input[(b * cin + ci) * plane..][..plane];
                for ky in 0..k {
                    let dy = ky as isize - pad as isize;
                    let (y0, y1) = shift_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad as isize;
                        let (x0, x1) = shift_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let g_row = &g_plane[y * w..][..w];
                            let in_row = &in_plane[sy * w..][..w];
                            let sx0 = (x0 as isize + dx) as usize;
                            let sx1 = (x1 as isize + dx) as usize;
                            for (g, s) in g_row[x0..x1].iter().zip(&in_row[sx0..sx1]) {
                                acc += *g * *s;
                            }
                        }
                        dw_chunk[ci * k * k + ky * k + kx] += acc;
                    }
                }
            }
        }
    });
}

/// d(loss)/d(bias): per-channel sum of the output gradient. Adds into `db`.
pub(crate) fn conv2d_backward_bias<T: Scalar>(
    gout: &[T],
    n: usize,
    cout: usize,
    plane: usize,
    db: &mut [T],
) {
    for b in 0..n {
        for (co, d) in db.iter_mut().enumerate() {
            let g_plane = &gout[(b * cout + co) * plane..][..plane];
            let mut acc = T::zero();
            for g in g_plane {
                acc += *g;
            }
            *d += acc;
        }
    }
}

/// 2x2 max pooling with stride 2. Requires even `h` and `w`.
/// Returns per-output argmax as absolute indices into `input`; ties are
/// broken by the first maximum in row-major window order.
pub(crate) fn maxpool2x2_forward<T: Scalar>(
    input: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out: &mut [T],
    argmax: &mut Vec<u32>,
) {
    let oh = h / 2;
    let ow = w / 2;
    argmax.clear();
    argmax.reserve(n * c * oh * ow);
    let mut oi = 0;
    for plane_idx in 0..n * c {
        let in_plane_off = plane_idx * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let base = in_plane_off + (2 * oy) * w + 2 * ox;
                let mut best_idx = base;
                let mut best = input[base];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = base + dy * w + dx;
                    let v = input[idx];
                    if v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
                out[oi] = best;
                argmax.push(best_idx as u32);
                oi += 1;
            }
        }
    }
}

/// Routes output gradients back to the saved argmax positions.
pub(crate) fn maxpool2x2_backward<T: Scalar>(gout: &[T], argmax: &[u32], din: &mut [T]) {
    for (g, &idx) in gout.iter().zip(argmax) {
        din[idx as usize] += *g;
    }
}

/// Transposed convolution with a fixed 2x2 kernel and stride 2.
/// `input` is `[n, cin, h, w]`, `weight` is `[cin, cout, 2, 2]`, `bias` is
/// `[cout]`, `out` is `[n, cout, 2h, 2w]`. Because stride equals kernel
/// size, each output element receives exactly one contribution per input
/// channel.
pub(crate) fn upconv2x2_forward<T: Scalar>(
    input: &[T],
    _n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    bias: &[T],
    out: &mut [T],
) {
    let oh = 2 * h;
    let ow = 2 * w;
    let out_plane = oh * ow;
    let in_plane = h * w;
    let work = out_plane * cin * 4;
    run_planes(out, out_plane, work, |idx, out_plane_buf| {
        let b = idx / cout;
        let co = idx % cout;
        out_plane_buf.fill(bias[co]);
        for ci in 0..cin {
            let in_p = &input[(b * cin + ci) * in_plane..][..in_plane];
            let w_base = (ci * cout + co) * 4;
            let w00 = weight[w_base];
            let w01 = weight[w_base + 1];
            let w10 = weight[w_base + 2];
            let w11 = weight[w_base + 3];
            for y in 0..h {
                let src = &in_p[y * w..][..w];
                let (top, bottom) = out_plane_buf[2 * y * ow..][..2 * ow].split_at_mut(ow);
                for (x, &v) in src.iter().enumerate() {
                    top[2 * x] += v * w00;
                    top[2 * x + 1] += v * w01;
                    bottom[2 * x] += v * w10;
                    bottom[2 * x + 1] += v * w11;
                }
            }
        }
    });
}

/// d(loss)/d(input) for [`upconv2x2_forward`]. Adds into `din`.
pub(crate) fn upconv2x2_backward_input<T: Scalar>(
    gout: &[T],
    _n: usize,
    cout: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cin: usize,
    din: &mut [T],
) {
    let oh = 2 * h;
    let ow = 2 * w;
    let out_plane = oh * ow;
    let in_plane = h * w;
    let work = in_plane * cout * 4;
    run_planes(din, in_plane, work, |idx, din_plane| {
        let b = idx / cin;
        let ci = idx % cin;
        for co in 0..cout {
            let g_plane = &gout[(b * cout + co) * out_plane..][..out_plane];
            let w_base = (ci * cout + co) * 4;
            let w00 = weight[w_base];
            let w01 = weight[w_base + 1];
            let w10 = weight[w_base + 2];
            let w11 = weight[w_base + 3];
            for y in 0..h {
                let top = &g_plane[2 * y * ow..][..ow];
                let bottom = &g_plane[(2 * y + 1) * ow..][..ow];
                let dst = &mut din_plane[y * w..][..w];
                for (x, d) in dst.iter_mut().enumerate() {
                    *d += top[2 * x] * w00
                        + top[2 * x + 1] * w01
                        + bottom[2 * x] * w10
                        + bottom[2 * x + 1] * w11;
                }
            }
        }
    });
}

/// d(loss)/d(weight) for [`upconv2x2_forward`]. Adds into `dw`.
pub(crate) fn upconv2x2_backward_weight<T: Scalar>(
    gout: &[T],
    input: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    dw: &mut [T],
) {
    let oh = 2 * h;
    let ow = 2 * w;
    let out_plane = oh * ow;
    let in_plane = h * w;
    let chunk = cout * 4;
    let work = in_plane * n * chunk;
    run_planes(dw, chunk, work, |ci, dw_chunk| {
        for b in 0..n {
            let in_p = &input[(b * cin + ci) * in_plane..][..in_plane];
            for co in 0..cout {
                let g_plane = &gout[(b * cout + co) * out_plane..][..out_plane];
                let mut acc = [T::zero(); 4];
                for y in 0..h {
                    let src = &in_p[y * w..][..w];
                    let top = &g_plane[2 * y * ow..][..ow];
                    let bottom = &g_plane[(2 * y + 1) * ow..][..ow];
                    for (x, &v) in src.iter().enumerate() {
                        acc[0] += v * top[2 * x];
                        acc[1] += v * top[2 * x + 1];
                        acc[2] += v * bottom[2 * x];
                        acc[3] += v * bottom[2 * x + 1];
                    }
                }
                for (slot, a) in dw_chunk[co * 4..co * 4 + 4].iter_mut().zip(acc) {
                    *slot += a;
                }
            }
        }
    });
}

/// d(loss)/d(bias) for [`upconv2x2_forward`]. Adds into `db`.
pub(crate) fn upconv2x2_backward_bias<T: Scalar>(
    gout: &[T],
    n: usize,
    cout: usize,
    out_plane: usize,
    db: &mut [T],
) {
    conv2d_backward_bias(gout, n, cout, out_plane, db);
}
