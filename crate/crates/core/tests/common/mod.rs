//! Independent oracles shared by the integration suites. Nothing here calls
//! into the kernels it is used to check, except to build tapes for the
//! finite-difference comparisons.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zvos_core::metrics::Mask;
use zvos_core::nn::{Bound, ParamSet};
use zvos_core::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Normwise relative error `max|a - b| / max(max|a|, max|b|)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a
        .iter()
        .chain(b)
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    diff / scale
}

/// Compares tape gradients of `f` with central finite differences for every
/// input flagged trainable. Returns the worst normwise relative error.
pub fn fd_check<F>(inputs: &[Tensor], trainable: &[bool], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(trainable)
        .map(|(t, &tr)| if tr { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        if !trainable[k] {
            continue;
        }
        let analytic = tape.grad(vars[k]);
        let mut numeric = vec![0.0; input.len()];
        let mut vals = inputs.to_vec();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = input.data()[i];
            vals[k].data_mut()[i] = x0 + FD_STEP;
            let fp = eval(&vals);
            vals[k].data_mut()[i] = x0 - FD_STEP;
            let fm = eval(&vals);
            vals[k].data_mut()[i] = x0;
            *slot = (fp - fm) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// Contracts an output with a fixed random probe so the scalar loss is generic.
pub fn probe_loss(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let probe = Tensor::uniform(&shape, -1.0, 1.0, &mut rng(seed));
    let p = tape.constant(probe);
    let prod = tape.mul(out, p)?;
    Ok(tape.mean(prod))
}

/// Direct sliding-window convolution.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (bn, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; bn * co * oh * ow];
    for n in 0..bn {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w.data()[((o * ci + c) * k + ky) * k + kx]
                                    * x.data()[((n * ci + c) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((n * co + o) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    Tensor::new(vec![bn, co, oh, ow], out).unwrap()
}

/// Bilinear resize evaluated pixel by pixel from the half-pixel-center formula.
pub fn upsample_oracle(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (bn, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let at = |n: usize, ch: usize, y: usize, xx: usize| x.data()[((n * c + ch) * h + y) * w + xx];
    let mut out = Vec::new();
    for n in 0..bn {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                    let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    let v = (1.0 - fy) * (1.0 - fx) * at(n, ch, y0, x0)
                        + (1.0 - fy) * fx * at(n, ch, y0, x1)
                        + fy * (1.0 - fx) * at(n, ch, y1, x0)
                        + fy * fx * at(n, ch, y1, x1);
                    out.push(v);
                }
            }
        }
    }
    Tensor::new(vec![bn, c, oh, ow], out).unwrap()
}

/// `x (B,N) * w^T + b` by triple loop.
pub fn matmul_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (bn, n) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[0];
    let mut out = vec![0.0; bn * m];
    for i in 0..bn {
        for j in 0..m {
            let mut s = 0.0;
            for k in 0..n {
                s += x.data()[i * n + k] * w.data()[j * n + k];
            }
            out[i * m + j] = s + b.data()[j];
        }
    }
    Tensor::new(vec![bn, m], out).unwrap()
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d:e} > {tol:e}");
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Channel concatenation of rank-4 tensors with equal batch and spatial size.
pub fn cat_oracle(parts: &[&Tensor]) -> Tensor {
    let (b, h, w) = (parts[0].shape()[0], parts[0].shape()[2], parts[0].shape()[3]);
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(b * total * h * w);
    for n in 0..b {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[n * c * h * w..(n + 1) * c * h * w]);
        }
    }
    Tensor::new(vec![b, total, h, w], out).unwrap()
}

/// Adaptive average pooling; cell `k` of `n` spans `[floor(k n / bins), ceil((k + 1) n / bins))`.
pub fn pool_oracle(x: &Tensor, bins: usize) -> Tensor {
    let (bn, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let lo = |k: usize, n: usize| (k * n) / bins;
    let hi = |k: usize, n: usize| ((k + 1) * n + bins - 1) / bins;
    let mut out = Vec::new();
    for n in 0..bn {
        for ch in 0..c {
            for i in 0..bins {
                for j in 0..bins {
                    let (mut s, mut cnt) = (0.0, 0.0);
                    for y in lo(i, h)..hi(i, h) {
                        for xx in lo(j, w)..hi(j, w) {
                            s += x.data()[((n * c + ch) * h + y) * w + xx];
                            cnt += 1.0;
                        }
                    }
                    out.push(s / cnt);
                }
            }
        }
    }
    Tensor::new(vec![bn, c, bins, bins], out).unwrap()
}

pub fn relu_oracle(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn add_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), d).unwrap()
}

/// Worst normwise relative gap between tape and central-difference gradients
/// over every input and parameter tensor. At most `per_tensor` entries of each
/// tensor are probed.
pub fn fd_module(
    ps: &ParamSet,
    inputs: &[Tensor],
    per_tensor: usize,
    seed: u64,
    f: impl Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |ps: &ParamSet, inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false);
        let v: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &p, &v).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape, true);
    let v: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &p, &v).unwrap();
    tape.backward(out).unwrap();
    let mut analytic: Vec<Tensor> = v.iter().map(|&x| tape.grad(x)).collect();
    analytic.extend(p.grads(&tape));

    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let n_inputs = inputs.len();
    for (k, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| r.gen_range(0..len)).collect()
        };
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for i in picks {
            let (mut ins, mut pset) = (inputs.to_vec(), ps.clone());
            let cell = |ins: &mut Vec<Tensor>, pset: &mut ParamSet, d: f64| {
                if k < n_inputs {
                    ins[k].data_mut()[i] += d;
                } else {
                    pset.tensors_mut()[k - n_inputs].data_mut()[i] += d;
                }
            };
            cell(&mut ins, &mut pset, FD_STEP);
            let fp = eval(&pset, &ins);
            cell(&mut ins, &mut pset, -2.0 * FD_STEP);
            let fm = eval(&pset, &ins);
            num.push((fp - fm) / (2.0 * FD_STEP));
            ana.push(grad.data()[i]);
        }
        let scale = grad.data().iter().map(|x| x.abs()).fold(1e-9, f64::max);
        let gap = num.iter().zip(&ana).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(gap / scale);
    }
    worst
}

pub fn soft_mask(h: usize, w: usize, r: &mut impl Rng) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| r.gen::<f64>()).collect()).unwrap()
}

/// Union of a few random rectangles and disks, so boundaries are realistic.
pub fn blob_mask(h: usize, w: usize, r: &mut impl Rng) -> Mask {
    let mut bits = vec![false; h * w];
    for _ in 0..r.gen_range(0..4) {
        let (cy, cx) = (r.gen_range(0..h) as i64, r.gen_range(0..w) as i64);
        let rad = r.gen_range(1..6) as i64;
        let disk = r.gen::<bool>();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (dy, dx) = (y - cy, x - cx);
                let inside = if disk {
                    dy * dy + dx * dx <= rad * rad
                } else {
                    dy.abs() <= rad && dx.abs() <= rad / 2 + 1
                };
                if inside {
                    bits[(y * w as i64 + x) as usize] = true;
                }
            }
        }
    }
    if r.gen_range(0..5) == 0 {
        for b in bits.iter_mut() {
            if r.gen_range(0..10) == 0 {
                *b = !*b;
            }
        }
    }
    Mask::from_bits(h, w, &bits).unwrap()
}

pub fn mae_oracle(a: &Mask, b: &Mask) -> f64 {
    let mut s = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            s += (a.get(y, x) - b.get(y, x)).abs();
        }
    }
    s / (a.height() * a.width()) as f64
}

pub fn set_of(m: &Mask) -> HashSet<(usize, usize)> {
    let mut s = HashSet::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) >= 0.5 {
                s.insert((y, x));
            }
        }
    }
    s
}

pub fn boundary_oracle(m: &Mask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let fg = |y: i64, x: i64| m.get(y as usize, x as usize) >= 0.5;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !fg(y, x) {
                continue;
            }
            let touches_bg = (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    let (ny, nx) = (y + dy, x + dx);
                    ny >= 0 && nx >= 0 && ny < h && nx < w && !fg(ny, nx)
                })
            });
            if touches_bg {
                out.push((y, x));
            }
        }
    }
    out
}

pub fn matched_fraction(from: &[(i64, i64)], to: &[(i64, i64)], tol: f64) -> f64 {
    let hits = from
        .iter()
        .filter(|(y, x)| {
            to.iter()
                .any(|(ty, tx)| (((y - ty).pow(2) + (x - tx).pow(2)) as f64).sqrt() <= tol)
        })
        .count();
    hits as f64 / from.len() as f64
}

pub fn boundary_f_oracle(pred: &Mask, gt: &Mask, tol: f64) -> f64 {
    let pb = boundary_oracle(pred);
    let gb = boundary_oracle(gt);
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let p = matched_fraction(&pb, &gb, tol);
    let r = matched_fraction(&gb, &pb, tol);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}
