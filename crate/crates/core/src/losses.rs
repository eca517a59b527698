//! Training losses: binary cross-entropy and the L1 + SSIM depth loss.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_MAX_WINDOW: usize = 11;

/// Mean binary cross-entropy of probabilities against targets in `[0, 1]`.
pub fn bce_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    tape.bce(pred, target)
}

/// Side of the SSIM window for an `h x w` image: 11, or the largest odd size that fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = h.min(w).min(SSIM_MAX_WINDOW);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Normalized 2-D Gaussian window of the given odd side.
pub fn gaussian_window(side: usize, sigma: f64) -> Vec<f64> {
    let c = (side / 2) as f64;
    let g1: Vec<f64> = (0..side)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / s).collect();
    let mut out = Vec::with_capacity(side * side);
    for a in &g1 {
        for b in &g1 {
            out.push(a * b);
        }
    }
    out
}

fn as_planes(tape: &mut Tape, v: Var) -> Result<Var> {
    let (b, c, h, w) = tape.value(v).dims4()?;
    if c == 1 {
        Ok(v)
    } else {
        tape.reshape(v, &[b * c, 1, h, w])
    }
}

/// Mean structural similarity over all valid Gaussian windows of every plane.
pub fn ssim(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::dim(
            "ssim",
            format!("{:?} vs {:?}", tape.shape(x), tape.shape(y)),
        ));
    }
    let x = as_planes(tape, x)?;
    let y = as_planes(tape, y)?;
    let (_, _, h, w) = tape.value(x).dims4()?;
    let side = ssim_window(h, w);
    let win = tape.constant(Tensor::new(vec![1, 1, side, side], gaussian_window(side, SSIM_SIGMA))?);
    let zero = tape.constant(Tensor::zeros(&[1]));
    let blur = |t: &mut Tape, v: Var| t.conv2d(v, win, zero, 1, 0);

    let mu_x = blur(tape, x)?;
    let mu_y = blur(tape, y)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let exx = blur(tape, xx)?;
    let eyy = blur(tape, yy)?;
    let exy = blur(tape, xy)?;
    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(exx, mu_xx)?;
    let var_y = tape.sub(eyy, mu_yy)?;
    let cov = tape.sub(exy, mu_xy)?;

    let l_num = tape.affine(mu_xy, 2.0, SSIM_C1);
    let c_num = tape.affine(cov, 2.0, SSIM_C2);
    let num = tape.mul(l_num, c_num)?;
    let mu_sum = tape.add(mu_xx, mu_yy)?;
    let l_den = tape.affine(mu_sum, 1.0, SSIM_C1);
    let var_sum = tape.add(var_x, var_y)?;
    let c_den = tape.affine(var_sum, 1.0, SSIM_C2);
    let den = tape.mul(l_den, c_den)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// `mean|pred - gt| + (1 - SSIM(pred, gt))`.
pub fn l1_ssim_loss(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::dim(
            "l1_ssim_loss",
            format!("pred {:?} vs gt {:?}", tape.shape(pred), gt.shape()),
        ));
    }
    let g = tape.constant(gt.clone());
    let d = tape.sub(pred, g)?;
    let a = tape.abs(d);
    let l1 = tape.mean(a);
    let s = ssim(tape, pred, g)?;
    let dissim = tape.affine(s, -1.0, 1.0);
    tape.add(l1, dissim)
}

/// SSIM of two tensors as a plain number.
pub fn ssim_value(x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let b = tape.constant(y.clone());
    let s = ssim(&mut tape, a, b)?;
    Ok(tape.value(s).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_sizes() {
        assert_eq!(ssim_window(64, 64), 11);
        assert_eq!(ssim_window(8, 10), 7);
        assert_eq!(ssim_window(9, 9), 9);
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(g[60] > g[59]);
    }

    #[test]
    fn identical_pair_has_zero_loss() {
        let x = Tensor::from_fn(&[1, 1, 16, 16], |i| ((i * 37) % 17) as f64 / 17.0);
        assert!((ssim_value(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let mut tape = Tape::new();
        let p = tape.constant(x.clone());
        let l = l1_ssim_loss(&mut tape, p, &x).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
        assert!(matches!(
            l1_ssim_loss(&mut tape, p, &Tensor::zeros(&[1, 1, 8, 7])),
            Err(Error::Dimension { .. })
        ));
    }
}
