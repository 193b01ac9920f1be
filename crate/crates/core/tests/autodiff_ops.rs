//! Forward oracles and gradient checks for every tape operation.

use poseadapt::autodiff::{finite_diff_check, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from the ReLU6 / hard-sigmoid kinks at -3, 0, 3, 6.
fn away_from_kinks(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.gen_range(-7.0..7.0);
        if [-3.0f64, 0.0, 3.0, 6.0].iter().all(|k| (v - k).abs() > 1e-3) {
            break v;
        }
    })
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for co in 0..c_out {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = b.data()[co];
                for ci in 0..c_in {
                    for kh in 0..k {
                        for kw in 0..k {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            let iw = (ow * stride + kw) as isize - pad as isize;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                continue;
                            }
                            acc += w.data()[((co * c_in + ci) * k + kh) * k + kw]
                                * x.data()[(ci * h + ih as usize) * wd + iw as usize];
                        }
                    }
                }
                out[(co * ho + oh) * wo + ow] = acc;
            }
        }
    }
    (vec![c_out, ho, wo], out)
}

fn depthwise_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let c = x.shape()[0];
    let mut shape = vec![];
    let mut out = vec![];
    for ch in 0..c {
        let plane = |t: &Tensor, per: usize| {
            Tensor::new(
                [&[1usize][..], &t.shape()[1..]].concat(),
                t.data()[ch * per..(ch + 1) * per].to_vec(),
            )
            .unwrap()
        };
        let xi = plane(x, x.shape()[1] * x.shape()[2]);
        let k = w.shape()[1];
        let wi = Tensor::new(vec![1, 1, k, k], w.data()[ch * k * k..(ch + 1) * k * k].to_vec()).unwrap();
        let bi = Tensor::new(vec![1], vec![b.data()[ch]]).unwrap();
        let (s, o) = conv_oracle(&xi, &wi, &bi, stride, pad);
        shape = vec![c, s[1], s[2]];
        out.extend(o);
    }
    (shape, out)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv2d_one_by_one_is_channel_sum() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 1, 1], vec![1.0, 2.0]).unwrap());
    let w = tape.constant(Tensor::full(&[1, 2, 1, 1], 1.0));
    let b = tape.constant(Tensor::new(vec![1], vec![0.25]).unwrap());
    let y = x.conv2d(&w, &b, 1, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 1]);
    assert_eq!(y.value().data(), &[3.25]);
}

#[test]
fn conv2d_output_shape() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3, 8, 8]));
    let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[4]));
    assert_eq!(x.conv2d(&w, &b, 2, 1).unwrap().shape(), vec![4, 4, 4]);
}

#[test]
fn conv2d_channel_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3, 8, 8]));
    let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[4]));
    match x.conv2d(&w, &b, 1, 1) {
        Err(TensorError::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![3, 8, 8]);
            assert_eq!(right, vec![4, 2, 3, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn conv2d_matches_loop_oracle() {
    for seed in 0..25 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, w, b) = (random(&[2, 5, 5], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng));
        let (stride, pad) = (1 + (seed as usize % 2), seed as usize % 3);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(&tape.constant(w.clone()), &tape.constant(b.clone()), stride, pad)
            .unwrap();
        let (shape, expected) = conv_oracle(&x, &w, &b, stride, pad);
        assert_eq!(y.shape(), shape);
        assert!(max_diff(y.value().data(), &expected) < 1e-12);
    }
}

#[test]
fn batched_conv_equals_per_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[4, 3, 9, 7], &mut rng);
    let (w, b) = (random(&[5, 3, 3, 3], &mut rng), random(&[5], &mut rng));
    let tape = Tape::new();
    let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.constant(x.clone()).conv2d(&wv, &bv, 2, 1).unwrap().value();
    let per = y.numel() / 4;
    for n in 0..4 {
        let xi = Tensor::new(vec![3, 9, 7], x.data()[n * 189..(n + 1) * 189].to_vec()).unwrap();
        let (_, expected) = conv_oracle(&xi, &w, &b, 2, 1);
        assert_eq!(&y.data()[n * per..(n + 1) * per], expected.as_slice());
    }
}

#[test]
fn depthwise_single_channel_equals_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[1, 6, 6], &mut rng);
    let w = random(&[1, 3, 3], &mut rng);
    let b = random(&[1], &mut rng);
    let tape = Tape::new();
    let xv = tape.constant(x);
    let dw = xv
        .depthwise_conv2d(&tape.constant(w.clone()), &tape.constant(b.clone()), 1, 1)
        .unwrap();
    let w4 = tape.constant(w.reshape(&[1, 1, 3, 3]).unwrap());
    let cv = xv.conv2d(&w4, &tape.constant(b), 1, 1).unwrap();
    assert_eq!(dw.value().data(), cv.value().data());
}

#[test]
fn depthwise_shape_and_oracle() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3, 4, 4]));
    let y = x
        .depthwise_conv2d(&tape.constant(Tensor::zeros(&[3, 3, 3])), &tape.constant(Tensor::zeros(&[3])), 1, 1)
        .unwrap();
    assert_eq!(y.shape(), vec![3, 4, 4]);
    for seed in 0..25 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (x, w, b) = (random(&[4, 6, 6], &mut rng), random(&[4, 3, 3], &mut rng), random(&[4], &mut rng));
        let (stride, pad) = (1 + (seed as usize % 2), seed as usize % 2);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .depthwise_conv2d(&tape.constant(w.clone()), &tape.constant(b.clone()), stride, pad)
            .unwrap();
        let (shape, expected) = depthwise_oracle(&x, &w, &b, stride, pad);
        assert_eq!(y.shape(), shape);
        assert!(max_diff(y.value().data(), &expected) < 1e-12);
    }
}

#[test]
fn dense_examples_and_oracle() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let w = tape.constant(Tensor::new(vec![2, 1], vec![3.0, -1.0]).unwrap());
    let b = tape.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
    assert_eq!(x.dense(&w, &b).unwrap().value().data(), &[1.5]);

    let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let zero = tape.constant(Tensor::zeros(&[3]));
    let v = tape.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap());
    assert_eq!(v.dense(&eye, &zero).unwrap().value(), v.value());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (xv, wv, bv) = (random(&[4, 7], &mut rng), random(&[7, 3], &mut rng), random(&[3], &mut rng));
    let y = tape
        .constant(xv.clone())
        .dense(&tape.constant(wv.clone()), &tape.constant(bv.clone()))
        .unwrap();
    let mut expected = vec![0.0; 12];
    for n in 0..4 {
        for j in 0..3 {
            let mut acc = bv.data()[j];
            for i in 0..7 {
                acc += xv.data()[n * 7 + i] * wv.data()[i * 3 + j];
            }
            expected[n * 3 + j] = acc;
        }
    }
    assert!(max_diff(y.value().data(), &expected) < 1e-12);
}

fn apply<'t>(x: &Var<'t>, f: fn(&Var<'t>) -> Var<'t>, v: f64) -> f64 {
    let t = x.tape().constant(Tensor::scalar(v));
    f(&t).value().item().unwrap()
}

#[test]
fn activation_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0));
    assert_eq!(apply(&x, Var::relu6, -1.0), 0.0);
    assert_eq!(apply(&x, Var::relu6, 3.0), 3.0);
    assert_eq!(apply(&x, Var::relu6, 9.0), 6.0);
    assert_eq!(apply(&x, Var::h_sigmoid, 0.0), 0.5);
    assert_eq!(apply(&x, Var::h_sigmoid, -3.0), 0.0);
    assert_eq!(apply(&x, Var::h_sigmoid, 3.0), 1.0);
    assert_eq!(apply(&x, Var::h_swish, 3.0), 3.0);
    assert_eq!(apply(&x, Var::h_swish, -3.0), 0.0);
    assert!((apply(&x, Var::h_swish, -1.0) + 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn pooling_examples() {
    let tape = Tape::new();
    let m = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    assert_eq!(m.global_avg_pool().unwrap().value().data(), &[2.5]);
    let c = tape.constant(Tensor::full(&[3, 2, 2], 1.75));
    assert_eq!(c.global_avg_pool().unwrap().value().data(), &[1.75; 3]);

    assert_eq!(m.spatial_channel_max_pool().unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m.spatial_channel_avg_pool().unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    let two = tape.constant(
        Tensor::new(vec![2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]).unwrap(),
    );
    assert_eq!(two.spatial_channel_max_pool().unwrap().value().data(), &[2.0; 4]);
    assert_eq!(two.spatial_channel_avg_pool().unwrap().value().data(), &[1.5; 4]);
}

#[test]
fn pooling_loop_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tape = Tape::new();
    let g = random(&[5, 3, 3], &mut rng);
    let gap = tape.constant(g.clone()).global_avg_pool().unwrap().value();
    for c in 0..5 {
        let mut s = 0.0;
        for p in 0..9 {
            s += g.data()[c * 9 + p];
        }
        assert!((gap.data()[c] - s / 9.0).abs() < 1e-12);
    }
    let f = random(&[8, 7, 7], &mut rng);
    let fv = tape.constant(f.clone());
    let smp = fv.spatial_channel_max_pool().unwrap().value();
    let sap = fv.spatial_channel_avg_pool().unwrap().value();
    assert_eq!(smp.shape(), &[49]);
    assert_eq!(sap.shape(), &[49]);
    for p in 0..49 {
        let col: Vec<f64> = (0..8).map(|c| f.data()[c * 49 + p]).collect();
        let mx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = col.iter().sum::<f64>() / 8.0;
        assert_eq!(smp.data()[p], mx);
        assert!((sap.data()[p] - mean).abs() < 1e-12);
    }
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let g = x.sum().backward().unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
    let g = x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(matches!(x.backward(), Err(TensorError::NonScalarLoss { .. })));
}

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Weighted sum with fixed random coefficients so every output element
/// contributes a distinct gradient.
fn probe<'t>(y: &Var<'t>, seed: u64) -> Result<Var<'t>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = y.tape().constant(Tensor::from_fn(&y.shape(), |_| rng.gen_range(-1.0..1.0)));
    Ok(y.mul(&w)?.sum())
}

fn check(name: &str, params: Vec<Tensor>, seed: u64, f: impl for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>, TensorError>) {
    let err = finite_diff_check(|_, v| probe(&f(v)?, seed), &params, STEP).unwrap();
    assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
}

#[test]
fn gradients_conv_family() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1 + seed as usize % 3;
        let (c_in, c_out, h) = (1 + seed as usize % 3, 1 + (seed as usize / 3) % 3, 4 + seed as usize % 3);
        let (stride, pad) = (1 + seed as usize % 2, seed as usize % 2);
        let x = random(&[n, c_in, h, h + 1], &mut rng);
        let w = random(&[c_out, c_in, 3, 3], &mut rng);
        let b = random(&[c_out], &mut rng);
        check("conv2d", vec![x.clone(), w, b], seed, |v| v[0].conv2d(&v[1], &v[2], stride, pad));
        let dw = random(&[c_in, 3, 3], &mut rng);
        let db = random(&[c_in], &mut rng);
        check("depthwise", vec![x, dw, db], seed, |v| v[0].depthwise_conv2d(&v[1], &v[2], stride, pad));
    }
}

#[test]
fn gradients_dense_matmul_transpose() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, a, b) = (1 + seed as usize % 4, 2 + seed as usize % 5, 1 + seed as usize % 3);
        let x = random(&[n, a], &mut rng);
        let w = random(&[a, b], &mut rng);
        let bias = random(&[b], &mut rng);
        check("dense", vec![x.clone(), w.clone(), bias], seed, |v| v[0].dense(&v[1], &v[2]));
        check("matmul", vec![x.clone(), w], seed, |v| v[0].matmul(&v[1]));
        check("transpose", vec![x], seed, |v| v[0].transpose());
    }
}

#[test]
fn gradients_elementwise() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [1 + seed as usize % 3, 2 + seed as usize % 4];
        let x = away_from_kinks(&shape, &mut rng);
        let y = random(&shape, &mut rng);
        check("relu", vec![x.clone()], seed, |v| Ok(v[0].relu()));
        check("relu6", vec![x.clone()], seed, |v| Ok(v[0].relu6()));
        check("h_sigmoid", vec![x.clone()], seed, |v| Ok(v[0].h_sigmoid()));
        check("h_swish", vec![x.clone()], seed, |v| Ok(v[0].h_swish()));
        check("exp", vec![y.clone()], seed, |v| Ok(v[0].exp()));
        check("square", vec![y.clone()], seed, |v| Ok(v[0].square()));
        check("neg/scale/add_scalar", vec![y.clone()], seed, |v| Ok(v[0].neg().scale(1.7).add_scalar(0.3)));
        check("add", vec![x.clone(), y.clone()], seed, |v| v[0].add(&v[1]));
        check("sub", vec![x.clone(), y.clone()], seed, |v| v[0].sub(&v[1]));
        check("mul", vec![x.clone(), y.clone()], seed, |v| v[0].mul(&v[1]));
        check("sum", vec![y.clone()], seed, |v| Ok(v[0].sum().square()));
        check("mean", vec![y.clone()], seed, |v| Ok(v[0].mean().square()));
        check("rows", vec![y.clone()], seed, |v| v[0].rows(shape[0] - 1, 1));
        check("reshape", vec![y], seed, |v| v[0].reshape(&[shape[1], shape[0]]));
    }
}

#[test]
fn gradients_pooling_and_gating() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, h) = (1 + seed as usize % 3, 2 + seed as usize % 4, 2 + seed as usize % 3);
        let x = random(&[n, c, h, h], &mut rng);
        let g = random(&[n, c], &mut rng);
        let gamma = random(&[c], &mut rng);
        let beta = random(&[c], &mut rng);
        check("global_avg_pool", vec![x.clone()], seed, |v| v[0].global_avg_pool());
        check("channel_max", vec![x.clone()], seed, |v| v[0].spatial_channel_max_pool());
        check("channel_avg", vec![x.clone()], seed, |v| v[0].spatial_channel_avg_pool());
        check("scale_channels", vec![x.clone(), g], seed, |v| v[0].scale_channels(&v[1]));
        check("channel_affine", vec![x, gamma, beta], seed, |v| v[0].channel_affine(&v[1], &v[2]));
    }
}

#[test]
fn gradients_normalisation_ops() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (2 + seed as usize % 5, 1 + seed as usize % 4);
        let x = random(&[n, d], &mut rng);
        let sq = random(&[d, d], &mut rng);
        check("row_norm", vec![x.clone()], seed, |v| v[0].row_norm());
        check("row_normalize", vec![x.clone()], seed, |v| v[0].row_normalize(1e-12));
        check("batch_standardize", vec![x.clone()], seed, |v| v[0].batch_standardize(1e-5));
        check("diag", vec![sq], seed, |v| v[0].diag());
    }
}

#[test]
fn gradients_attention() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = 1 + seed as usize % 3;
        let e = heads * (1 + seed as usize % 3);
        let (n, l, s) = (1 + seed as usize % 2, 1 + seed as usize % 3, 1 + (seed as usize / 2) % 3);
        let q = random(&[n, l, e], &mut rng);
        let k = random(&[n, s, e], &mut rng);
        let v = random(&[n, s, e], &mut rng);
        let mask = Tensor::from_fn(&[n, heads, l, s], |_| if rng.gen_bool(0.2) { 0.0 } else { 1.25 });
        check("attention", vec![q.clone(), k.clone(), v.clone()], seed, |x| x[0].attention(&x[1], &x[2], heads, None));
        check("attention+dropout", vec![q, k, v], seed, |x| x[0].attention(&x[1], &x[2], heads, Some(&mask)));
    }
}

#[test]
fn single_token_attention_ignores_query_and_key() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = random(&[2, 1, 49], &mut rng);
    for _ in 0..5 {
        let tape = Tape::new();
        let q = tape.constant(random(&[2, 1, 49], &mut rng));
        let k = tape.constant(random(&[2, 1, 49], &mut rng));
        let out = q.attention(&k, &tape.constant(v.clone()), 7, None).unwrap();
        assert_eq!(out.value().data(), v.data());
    }
}

#[test]
fn mlp_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            random(&[3, 6], &mut rng),
            random(&[6, 5], &mut rng),
            random(&[5], &mut rng),
            random(&[5, 4], &mut rng),
            random(&[4], &mut rng),
            random(&[4, 2], &mut rng),
            random(&[2], &mut rng),
        ];
        let err = finite_diff_check(
            |_, v| {
                let h1 = v[0].dense(&v[1], &v[2])?.h_swish();
                let h2 = h1.dense(&v[3], &v[4])?.h_swish();
                Ok(h2.dense(&v[5], &v[6])?.square().sum())
            },
            &params,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn replay_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tape = Tape::new();
        let x = tape.constant(random(&[6, 3, 10, 10], &mut rng));
        let w = tape.leaf(random(&[8, 3, 3, 3], &mut rng));
        let b = tape.leaf(random(&[8], &mut rng));
        let y = x.conv2d(&w, &b, 2, 1).unwrap().h_swish().global_avg_pool().unwrap();
        let loss = y.square().sum();
        let g = loss.backward().unwrap();
        (loss.value(), g.get(&w).unwrap().clone(), g.get(&b).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
}

proptest! {
    #[test]
    fn h_swish_is_x_times_h_sigmoid(v in -10.0f64..10.0) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(v));
        let hs = x.h_swish().value().item().unwrap();
        let hg = x.h_sigmoid().value().item().unwrap();
        prop_assert!((hs - v * hg).abs() <= 1e-15);
    }

    #[test]
    fn channel_max_dominates_channel_mean(
        c in 1usize..6, h in 1usize..5, w in 1usize..5, seed in 0u64..1000
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let f = tape.constant(random(&[c, h, w], &mut rng));
        let mx = f.spatial_channel_max_pool().unwrap().value();
        let av = f.spatial_channel_avg_pool().unwrap().value();
        prop_assert_eq!(mx.numel(), h * w);
        prop_assert_eq!(av.numel(), h * w);
        for (a, b) in mx.data().iter().zip(av.data()) {
            prop_assert!(a + 1e-15 >= *b);
        }
    }
}
