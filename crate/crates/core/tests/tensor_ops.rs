mod common;

use common::*;
use proptest::prelude::*;
use zvos_core::{Bins, Error, Tape, Tensor};

#[test]
fn conv_identity_kernel() {
    let x = Tensor::uniform(&[2, 3, 5, 4], -1.0, 1.0, &mut rng(1));
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w), t.constant(Tensor::zeros(&[3])));
    let y = t.conv2d(xv, wv, bv, 1, 0).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn conv_all_ones_sums_neighbourhood() {
    let x = Tensor::uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut rng(2));
    let w = Tensor::full(&[1, 1, 3, 3], 1.0);
    let b = Tensor::zeros(&[1]);
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
    let y = t.conv2d(xv, wv, bv, 1, 1).unwrap();
    // neighbourhood sum by hand
    let mut expect = vec![0.0; 16];
    for yy in 0..4i32 {
        for xx in 0..4i32 {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (a, c) = (yy + dy, xx + dx);
                    if (0..4).contains(&a) && (0..4).contains(&c) {
                        s += x.data()[(a * 4 + c) as usize];
                    }
                }
            }
            expect[(yy * 4 + xx) as usize] = s;
        }
    }
    assert_close(t.value(y), &Tensor::new(vec![1, 1, 4, 4], expect).unwrap(), 1e-12);
    assert_close(t.value(y), &conv_oracle(&x, &w, &b, 1, 1), 1e-12);
}

#[test]
fn conv_matches_sliding_window_with_stride() {
    let mut r = rng(3);
    let x = Tensor::uniform(&[2, 3, 9, 9], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(&[5, 3, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[5], -1.0, 1.0, &mut r);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, bv, stride, pad).unwrap();
        assert_close(t.value(y), &conv_oracle(&x, &w, &b, stride, pad), 1e-12);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut r = rng(4);
    let x = Tensor::uniform(&[2, 3, 7, 7], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[4], -1.0, 1.0, &mut r);
    for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
        let err = fd_check(&[x.clone(), w.clone(), b.clone()], &[true; 3], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
            probe_loss(t, y, 9)
        });
        assert!(err < 1e-5, "stride {stride} pad {pad}: rel err {err:e}");
    }
}

#[test]
fn conv_errors() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let w = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = t.constant(Tensor::zeros(&[1]));
    assert!(matches!(t.conv2d(x, w, b, 1, 1), Err(Error::Dimension { .. })));
    let w2 = t.constant(Tensor::zeros(&[1, 2, 3, 3]));
    // (5 + 0 - 3) / 2 + 1 is integral, (5 + 2 - 3) / 3 is not
    assert!(t.conv2d(x, w2, b, 2, 0).is_ok());
    assert!(matches!(t.conv2d(x, w2, b, 3, 1), Err(Error::Config(_))));
}

#[test]
fn upsample_identity_constant_and_formula() {
    let mut r = rng(5);
    let x = Tensor::uniform(&[1, 2, 5, 3], -1.0, 1.0, &mut r);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let same = t.upsample(xv, 5, 3).unwrap();
    assert_eq!(t.value(same), &x);

    let c = t.constant(Tensor::full(&[1, 1, 3, 2], 0.3));
    for (h, w) in [(7, 5), (1, 1), (12, 8)] {
        let u = t.upsample(c, h, w).unwrap();
        assert!(t.value(u).data().iter().all(|&v| v == 0.3));
    }

    let small = Tensor::uniform(&[2, 1, 2, 2], -1.0, 1.0, &mut r);
    let sv = t.constant(small.clone());
    let up = t.upsample(sv, 4, 4).unwrap();
    assert_close(t.value(up), &upsample_oracle(&small, 4, 4), 1e-12);
    let odd = t.upsample(sv, 5, 3).unwrap();
    assert_close(t.value(odd), &upsample_oracle(&small, 5, 3), 1e-12);
    assert!(matches!(t.upsample(sv, 0, 3), Err(Error::Config(_))));
}

#[test]
fn upsample_gradient() {
    let x = Tensor::uniform(&[2, 2, 3, 4], -1.0, 1.0, &mut rng(6));
    let err = fd_check(&[x], &[true], |t, v| {
        let u = t.upsample(v[0], 7, 6)?;
        probe_loss(t, u, 1)
    });
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn pyramid_pool_cases() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::full(&[1, 1, 5, 7], -0.25));
    let g = t.pyramid_pool(c, Bins::Global).unwrap();
    assert_eq!(t.value(g).shape(), &[1, 1, 1, 1]);
    assert_eq!(t.value(g).item(), -0.25);

    let x = Tensor::uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut rng(7));
    let xv = t.constant(x.clone());
    let same = t.pyramid_pool(xv, Bins::Grid(4)).unwrap();
    assert_eq!(t.value(same).data(), x.data());

    let q = t.pyramid_pool(xv, Bins::Grid(2)).unwrap();
    let d = x.data();
    let quad = |y0: usize, x0: usize| {
        let mut s = 0.0;
        for y in y0..y0 + 2 {
            for xx in x0..x0 + 2 {
                s += d[y * 4 + xx];
            }
        }
        s / 4.0
    };
    let expect = [quad(0, 0), quad(0, 2), quad(2, 0), quad(2, 2)];
    for (a, b) in t.value(q).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(matches!(t.pyramid_pool(xv, Bins::Grid(5)), Err(Error::Config(_))));
    let two = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
    assert!(matches!(t.pyramid_pool(two, Bins::Global), Err(Error::Dimension { .. })));
}

#[test]
fn pool_gradient_uneven_cells() {
    let x = Tensor::uniform(&[2, 1, 7, 9], -1.0, 1.0, &mut rng(8));
    for bins in [Bins::Grid(2), Bins::Grid(4), Bins::Grid(6), Bins::Global] {
        let err = fd_check(&[x.clone()], &[true], |t, v| {
            let p = t.pyramid_pool(v[0], bins)?;
            probe_loss(t, p, 2)
        });
        assert!(err < 1e-5, "{bins:?}: {err:e}");
    }
}

#[test]
fn concat_order_and_gradient() {
    let mut r = rng(9);
    let a = Tensor::uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r);
    let mut t = Tape::new();
    let av = t.leaf(a.clone());
    let bv = t.leaf(b.clone());
    let single = t.concat(&[av]).unwrap();
    assert_eq!(t.value(single), &a);
    let cat = t.concat(&[av, bv]).unwrap();
    assert_eq!(t.shape(cat), &[2, 3, 3, 3]);
    assert_eq!(&t.value(cat).data()[..9], &a.data()[..9]);
    assert_eq!(&t.value(cat).data()[27..36], &a.data()[9..18]);
    // gradient of sum is all ones for each input
    let m = t.mean(cat);
    let s = t.affine(m, 54.0, 0.0);
    t.backward(s).unwrap();
    assert!(t.grad(av).data().iter().all(|&g| (g - 1.0).abs() < 1e-12));
    assert!(t.grad(bv).data().iter().all(|&g| (g - 1.0).abs() < 1e-12));

    let bad = t.constant(Tensor::zeros(&[2, 1, 4, 3]));
    assert!(matches!(t.concat(&[av, bad]), Err(Error::Dimension { .. })));
}

#[test]
fn pointwise_basics() {
    let x = Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng(10));
    let mut t = Tape::new();
    let z = t.constant(Tensor::zeros(&[2, 3]));
    let s = t.sigmoid(z);
    assert!(t.value(s).data().iter().all(|&v| v == 0.5));
    let xv = t.constant(x);
    let d = t.sub(xv, xv).unwrap();
    assert!(t.value(d).data().iter().all(|&v| v == 0.0));
    assert!(matches!(t.add(xv, z), Err(Error::Dimension { .. })));
}

#[test]
fn relu_subgradient_at_zero() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = t.relu(x);
    let m = t.mean(r);
    t.backward(m).unwrap();
    assert_eq!(t.grad(x).data(), &[0.0, 0.0, 1.0 / 3.0]);
}

#[test]
fn pointwise_composite_gradient() {
    let mut r = rng(11);
    let a = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
    let err = fd_check(&[a.clone(), b.clone()], &[true, true], |t, v| {
        let m = t.mul(v[0], v[1])?;
        let s = t.sigmoid(m);
        probe_loss(t, s, 3)
    });
    assert!(err < 1e-5, "{err:e}");
    let err = fd_check(&[a, b], &[true, true], |t, v| {
        let s = t.sub(v[0], v[1])?;
        let r = t.relu(s);
        let q = t.add(r, v[1])?;
        let ab = t.abs(v[0]);
        let d = t.affine(ab, 1.0, 0.5);
        let f = t.div(q, d)?;
        probe_loss(t, f, 4)
    });
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn linear_cases() {
    let mut r = rng(12);
    let x = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let eye = t.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let zb = t.constant(Tensor::zeros(&[3]));
    let y = t.linear(xv, eye, zb).unwrap();
    assert_eq!(t.value(y).data(), x.data());

    let w = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[4], -1.0, 1.0, &mut r);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let wv = t.leaf(w.clone());
    let bv = t.constant(b.clone());
    let y = t.linear(xv, wv, bv).unwrap();
    assert_close(t.value(y), &matmul_oracle(&x, &w, &b), 1e-15);

    // d(sum y)/dW[j,k] = sum_i x[i,k]
    let m = t.mean(y);
    let s = t.affine(m, 8.0, 0.0);
    t.backward(s).unwrap();
    let g = t.grad(wv);
    for j in 0..4 {
        for k in 0..3 {
            let acc: f64 = (0..2).map(|i| x.data()[i * 3 + k]).sum();
            assert!((g.data()[j * 3 + k] - acc).abs() < 1e-12);
        }
    }
    let bad = t.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(t.linear(xv, bad, bv), Err(Error::Dimension { .. })));

    let err = fd_check(&[x, w, b], &[true; 3], |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        probe_loss(t, y, 5)
    });
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn backward_contracts() {
    let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng(13));
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let unused = t.leaf(Tensor::full(&[2], 1.0));
    let sq = t.mul(xv, xv).unwrap();
    let m = t.mean(sq);
    let loss = t.affine(m, 12.0, 0.0);
    t.backward(loss).unwrap();
    for (g, v) in t.grad(xv).data().iter().zip(x.data()) {
        assert!((g - 2.0 * v).abs() < 1e-12);
    }
    assert!(t.grad(unused).data().iter().all(|&g| g == 0.0));
    // accumulation across calls
    t.backward(loss).unwrap();
    for (g, v) in t.grad(xv).data().iter().zip(x.data()) {
        assert!((g - 4.0 * v).abs() < 1e-12);
    }
    t.zero_grad();
    assert!(t.grad(xv).data().iter().all(|&g| g == 0.0));
    assert!(matches!(t.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn bce_values_and_gradient() {
    let mut t = Tape::new();
    let target = Tensor::new(vec![4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let p = t.constant(target.clone());
    let l = t.bce(p, &target).unwrap();
    assert!(t.value(l).item() <= 1e-6);
    let half = t.constant(Tensor::full(&[4], 0.5));
    let ones = Tensor::full(&[4], 1.0);
    let l = t.bce(half, &ones).unwrap();
    assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

    let mut r = rng(14);
    let pred = Tensor::uniform(&[2, 1, 4, 4], 0.05, 0.95, &mut r);
    let tgt = Tensor::uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut r);
    let err = fd_check(&[pred], &[true], |t, v| t.bce(v[0], &tgt));
    assert!(err < 1e-5, "{err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_is_affine_in_input(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = rng(seed);
        let x = Tensor::uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut r);
        let y = Tensor::uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let bias = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let conv = |inp: Tensor| {
            let mut t = Tape::new();
            let (iv, wv, bv) = (t.constant(inp), t.constant(w.clone()), t.constant(bias.clone()));
            let o = t.conv2d(iv, wv, bv, 1, 1).unwrap();
            t.value(o).clone()
        };
        let mix = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv(mix);
        let (cx, cy, c0) = (conv(x.clone()), conv(y), conv(Tensor::zeros(x.shape())));
        // conv(ax + by) = a conv(x) + b conv(y) + (1 - a - b) conv(0)
        for i in 0..lhs.len() {
            let rhs = a * cx.data()[i] + b * cy.data()[i] + (1.0 - a - b) * c0.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn global_pool_preserves_mean(seed in 0u64..1000, h in 1usize..9, w in 1usize..9) {
        let x = Tensor::uniform(&[1, 1, h, w], -1.0, 1.0, &mut rng(seed));
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let p = t.pyramid_pool(v, Bins::Global).unwrap();
        prop_assert!((t.value(p).item() - x.sum() / (h * w) as f64).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = Tensor::uniform(&[2, 3, 9, 9], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
        let run = || {
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.constant(x.clone()), t.leaf(w.clone()), t.constant(Tensor::zeros(&[4])));
            let y = t.conv2d(xv, wv, bv, 2, 1).unwrap();
            let u = t.upsample(y, 9, 9).unwrap();
            let s = t.sigmoid(u);
            let m = t.mean(s);
            t.backward(m).unwrap();
            (t.value(s).clone(), t.grad(wv))
        };
        let (a, ga) = run();
        let (b, gb) = run();
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(ga.data(), gb.data());
    }
}
