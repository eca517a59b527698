//! Forward and backward kernels on raw buffers. Shapes are validated by the
//! tape before these are called.

use crate::parallel;

/// `c = a * b + beta * c` for row/column-strided `f64` matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &ConvGeom, input: &[f64], col: &mut [f64]) {
    let p = g.pixels();
    let kk = g.k * g.k;
    for c in 0..g.in_c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut col[(c * kk + ky * g.k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], out: &mut [f64]) {
    let p = g.pixels();
    let kk = g.k * g.k;
    for c in 0..g.in_c {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &col[(c * kk + ky * g.k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let p = g.pixels();
    let per_in = g.in_c * g.h * g.w;
    let mut out = vec![0.0; g.batch * g.out_c * p];
    parallel::for_each_chunk_mut(&mut out, g.out_c * p, |b, ob| {
        for (o, row) in ob.chunks_mut(p).enumerate() {
            row.fill(bias[o]);
        }
        let x = &input[b * per_in..(b + 1) * per_in];
        if g.is_pointwise() {
            gemm(g.out_c, g.in_c, p, weight, (g.in_c, 1), x, (p, 1), 1.0, ob);
        } else {
            let mut col = vec![0.0; g.cols() * p];
            im2col(g, x, &mut col);
            gemm(g.out_c, g.cols(), p, weight, (g.cols(), 1), &col, (p, 1), 1.0, ob);
        }
    });
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`; `grad_input` only when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let p = g.pixels();
    let per_in = g.in_c * g.h * g.w;
    let per_out = g.out_c * p;
    let cols = g.cols();

    let mut grad_bias = vec![0.0; g.out_c];
    for b in 0..g.batch {
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            *gb += grad_out[b * per_out + o * p..][..p].iter().sum::<f64>();
        }
    }

    let wsize = g.out_c * cols;
    let mut partial_w = vec![0.0; g.batch * wsize];
    let mut grad_in = if need_input {
        vec![0.0; g.batch * per_in]
    } else {
        Vec::new()
    };
    // One pass per batch item computes both the weight partial and the input gradient.
    let mut work: Vec<(&mut [f64], Option<&mut [f64]>)> = partial_w
        .chunks_mut(wsize)
        .zip(
            grad_in
                .chunks_mut(per_in.max(1))
                .map(Some)
                .chain(std::iter::repeat_with(|| None)),
        )
        .collect();
    let run = |b: usize, (pw, gi): &mut (&mut [f64], Option<&mut [f64]>)| {
        let x = &input[b * per_in..(b + 1) * per_in];
        let go = &grad_out[b * per_out..(b + 1) * per_out];
        if g.is_pointwise() {
            gemm(g.out_c, p, g.in_c, go, (p, 1), x, (1, p), 0.0, pw);
            if let Some(gi) = gi.as_deref_mut() {
                gemm(g.in_c, g.out_c, p, weight, (1, g.in_c), go, (p, 1), 0.0, gi);
            }
        } else {
            let mut col = vec![0.0; cols * p];
            im2col(g, x, &mut col);
            gemm(g.out_c, p, cols, go, (p, 1), &col, (1, p), 0.0, pw);
            if let Some(gi) = gi.as_deref_mut() {
                gemm(cols, g.out_c, p, weight, (1, cols), go, (p, 1), 0.0, &mut col);
                col2im(g, &col, gi);
            }
        }
    };
    parallel::for_each_mut(&mut work, |b, s| run(b, s));
    drop(work);

    let mut grad_w = vec![0.0; wsize];
    for pw in partial_w.chunks(wsize) {
        for (a, b) in grad_w.iter_mut().zip(pw) {
            *a += b;
        }
    }
    (need_input.then_some(grad_in), grad_w, grad_bias)
}

/// One output coordinate's source taps for half-pixel bilinear resampling:
/// `out = in[i0] + frac * (in[i1] - in[i0])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Taps {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

/// Half-pixel-center source taps for resampling an axis of length `n_in` to `n_out`.
pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<Taps> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Taps { i0, i1, frac }
        })
        .collect()
}

pub(crate) fn upsample_forward(
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    input: &[f64],
) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    parallel::for_each_chunk_mut(&mut out, oh * ow, |pl, o| {
        let src = &input[pl * h * w..(pl + 1) * h * w];
        for (y, t) in ty.iter().enumerate() {
            let r0 = &src[t.i0 * w..(t.i0 + 1) * w];
            let r1 = &src[t.i1 * w..(t.i1 + 1) * w];
            for (x, s) in tx.iter().enumerate() {
                let a = r0[s.i0] + s.frac * (r0[s.i1] - r0[s.i0]);
                let b = r1[s.i0] + s.frac * (r1[s.i1] - r1[s.i0]);
                o[y * ow + x] = a + t.frac * (b - a);
            }
        }
    });
    out
}

pub(crate) fn upsample_backward(
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    grad_out: &[f64],
) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut gi = vec![0.0; planes * h * w];
    parallel::for_each_chunk_mut(&mut gi, h * w, |pl, gp| {
        let go = &grad_out[pl * oh * ow..(pl + 1) * oh * ow];
        for (y, t) in ty.iter().enumerate() {
            for (x, s) in tx.iter().enumerate() {
                let g = go[y * ow + x];
                let gy0 = g * (1.0 - t.frac);
                let gy1 = g * t.frac;
                gp[t.i0 * w + s.i0] += gy0 * (1.0 - s.frac);
                gp[t.i0 * w + s.i1] += gy0 * s.frac;
                gp[t.i1 * w + s.i0] += gy1 * (1.0 - s.frac);
                gp[t.i1 * w + s.i1] += gy1 * s.frac;
            }
        }
    });
    gi
}

/// Adaptive-pool cell `[start, end)` ranges along an axis of length `n` split into `bins`:
/// `floor(k*n/bins) .. ceil((k+1)*n/bins)`.
pub fn pool_cells(n: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|k| ((k * n) / bins, ((k + 1) * n).div_ceil(bins)))
        .collect()
}

pub(crate) fn pool_forward(planes: usize, (h, w): (usize, usize), bins: usize, input: &[f64]) -> Vec<f64> {
    let cy = pool_cells(h, bins);
    let cx = pool_cells(w, bins);
    let mut out = vec![0.0; planes * bins * bins];
    for pl in 0..planes {
        let src = &input[pl * h * w..(pl + 1) * h * w];
        for (i, &(y0, y1)) in cy.iter().enumerate() {
            for (j, &(x0, x1)) in cx.iter().enumerate() {
                let mut s = 0.0;
                for y in y0..y1 {
                    s += src[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out[pl * bins * bins + i * bins + j] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub(crate) fn pool_backward(planes: usize, (h, w): (usize, usize), bins: usize, grad_out: &[f64]) -> Vec<f64> {
    let cy = pool_cells(h, bins);
    let cx = pool_cells(w, bins);
    let mut gi = vec![0.0; planes * h * w];
    for pl in 0..planes {
        let dst = &mut gi[pl * h * w..(pl + 1) * h * w];
        for (i, &(y0, y1)) in cy.iter().enumerate() {
            for (j, &(x0, x1)) in cx.iter().enumerate() {
                let g = grad_out[pl * bins * bins + i * bins + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for v in &mut dst[y * w + x0..y * w + x1] {
                        *v += g;
                    }
                }
            }
        }
    }
    gi
}

/// `x (B,N) * w^T (N,M) + bias`.
pub(crate) fn linear_forward(b: usize, n: usize, m: usize, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = (0..b).flat_map(|_| bias.iter().copied()).collect();
    gemm(b, n, m, x, (n, 1), w, (1, n), 1.0, &mut out);
    out
}

/// `(grad_x, grad_w, grad_bias)`.
pub(crate) fn linear_backward(
    b: usize,
    n: usize,
    m: usize,
    x: &[f64],
    w: &[f64],
    go: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; b * n];
    gemm(b, m, n, go, (m, 1), w, (n, 1), 0.0, &mut gx);
    let mut gw = vec![0.0; m * n];
    gemm(m, b, n, go, (1, m), x, (n, 1), 0.0, &mut gw);
    let mut gb = vec![0.0; m];
    for row in go.chunks(m) {
        for (a, v) in gb.iter_mut().zip(row) {
            *a += v;
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_identity_and_edges() {
        for t in bilinear_taps(5, 5).iter().enumerate() {
            assert_eq!(t.1.i0, t.0);
            assert_eq!(t.1.frac, 0.0);
        }
        let up = bilinear_taps(2, 4);
        // src = (d + 0.5) / 2 - 0.5 -> -0.25 (clamped), 0.25, 0.75, 1.25
        assert_eq!(up[0], Taps { i0: 0, i1: 1, frac: 0.0 });
        assert_eq!(up[1], Taps { i0: 0, i1: 1, frac: 0.25 });
        assert_eq!(up[2], Taps { i0: 0, i1: 1, frac: 0.75 });
        assert_eq!(up[3], Taps { i0: 1, i1: 1, frac: 0.0 });
    }

    #[test]
    fn pool_cells_cover_axis() {
        assert_eq!(pool_cells(4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(pool_cells(5, 2), vec![(0, 3), (2, 5)]);
        assert_eq!(pool_cells(8, 6)[0], (0, 2));
        assert_eq!(pool_cells(7, 1), vec![(0, 7)]);
    }
}
