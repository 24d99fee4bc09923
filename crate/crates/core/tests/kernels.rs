mod common;

use common::*;
use dynhead::autodiff::{ParameterSet, Tape};
use dynhead::ops::{self, Direction};
use dynhead::Tensor;

#[test]
fn conv_identity_kernel_and_bias() {
    let mut r = rng(1);
    let x = Tensor::randn([2, 3, 5, 4], 1.0, &mut r);
    let mut w = Tensor::zeros([3, 1, 3, 3]);
    for c in 0..3 {
        w.set(c, 0, 1, 1, 1.0);
    }
    assert_eq!(ops::conv2d(&x, &w, None, 3).unwrap(), x);

    let b = Tensor::vector(vec![0.5, -1.0]);
    let w = Tensor::randn([2, 3, 3, 3], 1.0, &mut r);
    let y = ops::conv2d(&Tensor::zeros([1, 3, 4, 4]), &w, Some(&b), 1).unwrap();
    for c in 0..2 {
        for i in 0..16 {
            assert_eq!(y.data()[c * 16 + i], b.data()[c]);
        }
    }
}

#[test]
fn conv_matches_naive_loops() {
    let mut r = rng(2);
    let x = Tensor::randn([1, 2, 5, 5], 1.0, &mut r);
    let w = Tensor::randn([3, 2, 3, 3], 1.0, &mut r);
    let want = naive_conv2d(&x, &w, None, 1);
    assert!(ops::conv2d(&x, &w, None, 1).unwrap().max_abs_diff(&want) < 1e-12);
    for &(cin, cout, g) in &[(4, 4, 4), (4, 6, 2), (6, 3, 3)] {
        let x = Tensor::randn([2, cin, 6, 7], 1.0, &mut r);
        let w = Tensor::randn([cout, cin / g, 3, 3], 1.0, &mut r);
        let b = Tensor::randn([cout, 1, 1, 1], 1.0, &mut r);
        let got = ops::conv2d(&x, &w, Some(&b), g).unwrap();
        assert!(got.max_abs_diff(&naive_conv2d(&x, &w, Some(&b), g)) < 1e-10);
    }
}

#[test]
fn conv_shape_errors_name_the_dimension() {
    let x = Tensor::zeros([1, 3, 4, 4]);
    let err = ops::conv2d(&x, &Tensor::zeros([2, 3, 3, 3]), None, 2).unwrap_err().to_string();
    assert!(err.contains("divisible"), "{err}");
    let err = ops::conv2d(&x, &Tensor::zeros([2, 2, 3, 3]), None, 1).unwrap_err().to_string();
    assert!(err.contains("in-channels"), "{err}");
    let err = ops::conv2d(&x, &Tensor::zeros([2, 3, 1, 1]), None, 1).unwrap_err().to_string();
    assert!(err.contains("3x3"), "{err}");
}

#[test]
fn group_norm_statistics() {
    let ones = Tensor::ones([8, 1, 1, 1]);
    let zeros = Tensor::zeros([8, 1, 1, 1]);
    let y = ops::group_norm(&Tensor::full([1, 8, 3, 3], 4.2), 4, &ones, &zeros, 1e-5).unwrap();
    assert!(y.data().iter().all(|v| v.abs() < 1e-9));

    let mut r = rng(3);
    let x = Tensor::randn([2, 8, 4, 4], 2.0, &mut r).map(|v| v + 1.5);
    let beta = Tensor::vector((0..8).map(|i| i as f64).collect());
    let y = ops::group_norm(&x, 4, &zeros, &beta, 1e-5).unwrap();
    for c in 0..8 {
        for n in 0..2 {
            for i in 0..16 {
                assert_eq!(y.data()[(n * 8 + c) * 16 + i], c as f64);
            }
        }
    }

    let eps = 1e-5;
    let y = ops::group_norm(&x, 4, &ones, &zeros, eps).unwrap();
    for n in 0..2 {
        for g in 0..4 {
            let idx: Vec<usize> = (0..2).flat_map(|ci| (0..16).map(move |i| (n * 8 + g * 2 + ci) * 16 + i)).collect();
            let xs: Vec<f64> = idx.iter().map(|&i| x.data()[i]).collect();
            let mean = xs.iter().sum::<f64>() / 32.0;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            for (&i, &xv) in idx.iter().zip(&xs) {
                assert!((y.data()[i] - (xv - mean) / (var + eps).sqrt()).abs() < 1e-10);
            }
            let ys: Vec<f64> = idx.iter().map(|&i| y.data()[i]).collect();
            let ym = ys.iter().sum::<f64>() / 32.0;
            let yv = ys.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / 32.0;
            assert!(ym.abs() < 1e-12);
            assert!((yv - var / (var + eps)).abs() < 1e-10);
        }
    }
    assert!(ops::group_norm(&x, 3, &ones, &zeros, 1e-5).is_err());
    assert!(ops::group_norm(&x, 4, &ones, &zeros, 0.0).is_err());
}

#[test]
fn resample_constant_and_blocks() {
    let c = Tensor::full([1, 2, 4, 6], 0.3);
    for dir in [Direction::Up, Direction::Down] {
        let y = ops::bilinear_resample(&c, dir).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }
    assert_eq!(ops::bilinear_resample(&c, Direction::Up).unwrap().shape(), [1, 2, 8, 12]);

    let mut x = Tensor::zeros([1, 1, 4, 4]);
    let vals = [[1.0, 2.0], [3.0, 4.0]];
    for y in 0..4 {
        for xx in 0..4 {
            x.set(0, 0, y, xx, vals[y / 2][xx / 2]);
        }
    }
    let d = ops::bilinear_resample(&x, Direction::Down).unwrap();
    assert_eq!(d.data(), &[1.0, 2.0, 3.0, 4.0]);
    assert!(ops::bilinear_resample(&Tensor::zeros([1, 1, 3, 4]), Direction::Down).is_err());
}

#[test]
fn resample_up_matches_scalar_interpolation() {
    let x = Tensor::new([1, 1, 2, 2], vec![1.0, 3.0, 1.0, 3.0]).unwrap();
    let y = ops::bilinear_resample(&x, Direction::Up).unwrap();
    let row: Vec<f64> = (0..4).map(|o| interp_up(&[1.0, 3.0], o)).collect();
    assert_eq!(row, vec![1.0, 1.5, 2.5, 3.0]);
    for r in 0..4 {
        assert_eq!(&y.data()[r * 4..r * 4 + 4], row.as_slice());
    }

    let mut r = rng(4);
    let x = Tensor::randn([2, 3, 3, 5], 1.0, &mut r);
    let y = ops::bilinear_resample(&x, Direction::Up).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            // Separable: interpolate rows then columns.
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|yy| {
                    let sig: Vec<f64> = (0..5).map(|xx| x.at(n, c, yy, xx)).collect();
                    (0..10).map(|o| interp_up(&sig, o)).collect()
                })
                .collect();
            for ox in 0..10 {
                let col: Vec<f64> = rows.iter().map(|r| r[ox]).collect();
                for oy in 0..6 {
                    assert!((y.at(n, c, oy, ox) - interp_up(&col, oy)).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut r = rng(5);
    let x = Tensor::randn([2, 3, 4, 4], 1.0, &mut r);
    assert_eq!(ops::mul_map(&x, &Tensor::ones([2, 1, 4, 4])).unwrap(), x);
    assert!(ops::mul_map(&x, &Tensor::zeros([2, 1, 4, 4])).unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(ops::mul_map(&x, &Tensor::full([2, 1, 4, 4], 0.5)).unwrap(), x.scale(0.5));
    assert!(ops::mul_map(&x, &Tensor::ones([2, 2, 4, 4])).is_err());
    assert!(ops::mul_map(&x, &Tensor::ones([2, 1, 4, 3])).is_err());
    assert!(ops::add(&x, &Tensor::zeros([2, 3, 4, 5])).is_err());
    assert_eq!(ops::relu(&x).data().iter().filter(|&&v| v < 0.0).count(), 0);
}

#[test]
fn max_pool_windows() {
    assert!(ops::max_pool_3x3_stride1(&Tensor::full([1, 1, 5, 5], 2.0), 2).unwrap().data().iter().all(|&v| v == 2.0));
    let mut x = Tensor::zeros([1, 1, 7, 7]);
    x.set(0, 0, 3, 3, 1.0);
    let y = ops::max_pool_3x3_stride1(&x, 1).unwrap();
    assert_eq!(y.sum(), 9.0);
    for yy in 2..5 {
        for xx in 2..5 {
            assert_eq!(y.at(0, 0, yy, xx), 1.0);
        }
    }
    let mut r = rng(6);
    let x = Tensor::randn([1, 2, 9, 9], 1.0, &mut r);
    for rep in 1..=3 {
        assert_eq!(ops::max_pool_3x3_stride1(&x, rep).unwrap(), window_max(&x, rep));
    }
    assert!(ops::max_pool_3x3_stride1(&x, 0).is_err());
}

#[test]
fn forward_ops_agree_with_oracles_on_random_inputs() {
    let mut r = rng(7);
    for _ in 0..10 {
        let x = Tensor::randn([2, 4, 6, 6], 1.0, &mut r);
        let w = Tensor::randn([4, 2, 3, 3], 1.0, &mut r);
        assert!(ops::conv2d(&x, &w, None, 2).unwrap().max_abs_diff(&naive_conv2d(&x, &w, None, 2)) < 1e-10);
        assert!(ops::max_pool_3x3_stride1(&x, 2).unwrap().max_abs_diff(&window_max(&x, 2)) < 1e-10);
    }
}

#[test]
fn backward_trivial_cases() {
    let mut params = ParameterSet::new();
    let mut r = rng(8);
    params.insert("x", Tensor::randn([1, 2, 3, 3], 1.0, &mut r)).unwrap();
    params.insert("unused", Tensor::ones([1, 1, 1, 1])).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&params, "x").unwrap();
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s, &params).unwrap();
    assert!(g["x"].data().iter().all(|&v| v == 1.0));
    assert_eq!(g["unused"].data(), &[0.0]);

    let mut neg = ParameterSet::new();
    neg.insert("x", Tensor::full([1, 2, 3, 3], -0.5)).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&neg, "x").unwrap();
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    assert!(tape.backward(s, &neg).unwrap()["x"].data().iter().all(|&v| v == 0.0));

    let other = Tape::new();
    assert!(other.backward_vars(s).is_err());
    let mut nonscalar = Tape::new();
    let v = nonscalar.param(&neg, "x").unwrap();
    assert!(nonscalar.backward_vars(v).is_err());
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng(9);
        let x = Tensor::randn([2, 4, 8, 8], 1.0, &mut r);
        let w = Tensor::randn([4, 4, 3, 3], 1.0, &mut r);
        ops::conv2d(&x, &w, None, 1).unwrap()
    };
    assert_eq!(run().data(), run().data());
}
