//! Raw compute kernels over flat buffers. No tape involvement; the tape
//! wires these into forward ops and backward rules.

use super::data::Element;

/// Batched matrix multiply: `out[b] += a[b] (m x k) * bm[b] (k x n)`.
/// `out` must be zeroed by the caller. Returns the MAC count.
pub fn bmm_accum<T: Element>(
    a: &[T],
    bm: &[T],
    out: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> u64 {
    for bi in 0..batch {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &bm[bi * k * n..(bi + 1) * k * n];
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let arow = &ab[i * k..(i + 1) * k];
            let orow = &mut ob[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &bb[kk * n..(kk + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
    }
    (batch * m * k * n) as u64
}

/// Transpose the trailing two dims of a `[batch, m, n]` buffer into `out` (`[batch, n, m]`).
pub fn transpose_last2<T: Element>(a: &[T], out: &mut [T], batch: usize, m: usize, n: usize) {
    for bi in 0..batch {
        let ab = &a[bi * m * n..(bi + 1) * m * n];
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                ob[j * m + i] = ab[i * n + j];
            }
        }
    }
}

/// Convolution geometry shared by forward and backward kernels.
/// `kernel` is 1 (pointwise, padding 0) or 3 (padding 1); stride is 1, so
/// output spatial dims always equal input's.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }
    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }
    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }
}

/// Forward convolution. Weight layout `[cout, cin/groups, k, k]`, bias `[cout]`.
pub fn conv2d_fwd<T: Element>(x: &[T], w: &[T], b: &[T], g: ConvGeom, out: &mut [T]) {
    let (h, wd, k, pad) = (g.h, g.w, g.kernel, g.pad() as isize);
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    let plane = h * wd;
    for n in 0..g.n {
        for co in 0..g.cout {
            let group = co / cout_g;
            let ob = &mut out[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
            ob.fill(b[co]);
            for cg in 0..cin_g {
                let ci = group * cin_g + cg;
                let xb = &x[(n * g.cin + ci) * plane..(n * g.cin + ci + 1) * plane];
                let wb = &w[(co * cin_g + cg) * k * k..(co * cin_g + cg + 1) * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wb[ky * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        accum_shifted(xb, ob, h, wd, dy, dx, wv);
                    }
                }
            }
        }
    }
}

/// out[y, x] += weight * src[y + dy, x + dx] for valid source positions.
fn accum_shifted<T: Element>(
    src: &[T],
    out: &mut [T],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    weight: T,
) {
    let y_lo = (-dy).max(0) as usize;
    let y_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let srow = &src[sy * w + ((x_lo as isize + dx) as usize)..];
        let orow = &mut out[y * w + x_lo..y * w + x_hi];
        for (o, &s) in orow.iter_mut().zip(srow) {
            *o += weight * s;
        }
    }
}

/// Gradient w.r.t. the input: correlate the output gradient with the
/// spatially flipped kernel. `gx` must be zeroed by the caller.
pub fn conv2d_bwd_x<T: Element>(gout: &[T], w: &[T], g: ConvGeom, gx: &mut [T]) {
    let (h, wd, k, pad) = (g.h, g.w, g.kernel, g.pad() as isize);
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    let plane = h * wd;
    for n in 0..g.n {
        for ci in 0..g.cin {
            let group = ci / cin_g;
            let cg = ci % cin_g;
            let gxb = &mut gx[(n * g.cin + ci) * plane..(n * g.cin + ci + 1) * plane];
            for cog in 0..cout_g {
                let co = group * cout_g + cog;
                let gob = &gout[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
                let wb = &w[(co * cin_g + cg) * k * k..(co * cin_g + cg + 1) * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wb[ky * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        // gx[y, x] += w[ky, kx] * gout[y - ky + pad, x - kx + pad]
                        let dy = pad - ky as isize;
                        let dx = pad - kx as isize;
                        accum_shifted(gob, gxb, h, wd, dy, dx, wv);
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the weights. `gw` must be zeroed by the caller.
pub fn conv2d_bwd_w<T: Element>(gout: &[T], x: &[T], g: ConvGeom, gw: &mut [T]) {
    let (h, wd, k, pad) = (g.h, g.w, g.kernel, g.pad() as isize);
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    let plane = h * wd;
    for n in 0..g.n {
        for co in 0..g.cout {
            let group = co / cout_g;
            let gob = &gout[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
            for cg in 0..cin_g {
                let ci = group * cin_g + cg;
                let xb = &x[(n * g.cin + ci) * plane..(n * g.cin + ci + 1) * plane];
                let gwb = &mut gw[(co * cin_g + cg) * k * k..(co * cin_g + cg + 1) * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        gwb[ky * k + kx] += dot_shifted(xb, gob, h, wd, dy, dx);
                    }
                }
            }
        }
    }
}

/// sum over valid (y, x) of gout[y, x] * src[y + dy, x + dx].
fn dot_shifted<T: Element>(src: &[T], gout: &[T], h: usize, w: usize, dy: isize, dx: isize) -> T {
    let y_lo = (-dy).max(0) as usize;
    let y_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
    let mut acc = T::zero();
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let srow = &src[sy * w + ((x_lo as isize + dx) as usize)..];
        let grow = &gout[y * w + x_lo..y * w + x_hi];
        for (&gv, &sv) in grow.iter().zip(srow) {
            acc += gv * sv;
        }
    }
    acc
}

/// Gradient w.r.t. the bias: sum of the output gradient over batch and space.
pub fn conv2d_bwd_b<T: Element>(gout: &[T], g: ConvGeom, gb: &mut [T]) {
    let plane = g.h * g.w;
    for n in 0..g.n {
        for co in 0..g.cout {
            let gob = &gout[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
            let mut acc = T::zero();
            for &v in gob {
                acc += v;
            }
            gb[co] += acc;
        }
    }
}

/// Pixel unshuffle index map: `[N, C, H, W] -> [N, C*r^2, H/r, W/r]`.
/// Output channel `c*r^2 + dy*r + dx` holds input pixels at sub-grid
/// offset `(dy, dx)`, so the r x r sub-grid unrolls row-major and fastest.
pub fn pixel_unshuffle<T: Element>(
    x: &[T],
    out: &mut [T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) {
    let (oh, ow) = (h / r, w / r);
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = ci * r * r + dy * r + dx;
                    for y in 0..oh {
                        for xw in 0..ow {
                            let src = ((ni * c + ci) * h + (y * r + dy)) * w + (xw * r + dx);
                            let dst = ((ni * c * r * r + oc) * oh + y) * ow + xw;
                            out[dst] = x[src];
                        }
                    }
                }
            }
        }
    }
}

/// Exact inverse of [`pixel_unshuffle`]: `[N, C, H, W] -> [N, C/r^2, H*r, W*r]`.
pub fn pixel_shuffle<T: Element>(
    x: &[T],
    out: &mut [T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) {
    let oc = c / (r * r);
    for ni in 0..n {
        for co in 0..oc {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = co * r * r + dy * r + dx;
                    for y in 0..h {
                        for xw in 0..w {
                            let src = ((ni * c + ci) * h + y) * w + xw;
                            let dst = ((ni * oc + co) * (h * r) + (y * r + dy)) * (w * r) + (x_idx(xw, r, dx));
                            out[dst] = x[src];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn x_idx(x: usize, r: usize, dx: usize) -> usize {
    x * r + dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bmm_identity() {
        let a = [1.0f64, 0.0, 0.0, 1.0];
        let b = [3.0, -1.0, 2.5, 7.0];
        let mut out = [0.0; 4];
        let macs = bmm_accum(&a, &b, &mut out, 1, 2, 2, 2);
        assert_eq!(out, b);
        assert_eq!(macs, 8);
    }

    #[test]
    fn unshuffle_then_shuffle_is_identity() {
        let x: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| i as f64).collect();
        let mut u = vec![0.0; x.len()];
        pixel_unshuffle(&x, &mut u, 2, 3, 4, 4, 2);
        let mut back = vec![0.0; x.len()];
        pixel_shuffle(&u, &mut back, 2, 12, 2, 2, 2);
        assert_eq!(x, back);
    }
}
