use ndtensor::{
    finite_diff_check, finite_diff_check_many, AttnMask, Normalizer, Result, Tape, Tensor, TensorError, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 1.0, rng).unwrap()
}

/// `sum(x ⊙ w)` for a fixed random `w`, so gradients are not trivially uniform.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(tape.shape(x), &mut rng);
    let w = tape.constant(w)?;
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut tape = Tape::<f32>::new();
    let eye = tape.constant(Tensor::new([3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap()).unwrap();
    let m_vals: Vec<f32> = (0..9).map(|v| v as f32 * 0.5 - 1.0).collect();
    let m = tape.constant(Tensor::new([3, 3], m_vals.clone()).unwrap()).unwrap();
    let out = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(out).data(), &m_vals[..]);

    let a = tape.constant(Tensor::new([2, 2], vec![1., 2., 3., 4.]).unwrap()).unwrap();
    let b = tape.constant(Tensor::new([2, 1], vec![1., 1.]).unwrap()).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_errors() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros([4, 5]).unwrap()).unwrap();
    let b = tape.constant(Tensor::zeros([4, 3]).unwrap()).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { .. })));
    let c = tape.constant(Tensor::zeros([2, 5, 3]).unwrap()).unwrap();
    let d = tape.constant(Tensor::zeros([3, 4, 5]).unwrap()).unwrap();
    assert!(tape.matmul(d, c).is_err());
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [rand_tensor(&[4, 5], &mut rng), rand_tensor(&[5, 3], &mut rng)];
    let errs = finite_diff_check_many(
        |tape, v| {
            let c = tape.matmul(v[0], v[1])?;
            weighted_sum(tape, c, 7)
        },
        &inputs,
        1e-3,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-3), "{errs:?}");
}

#[test]
fn matmul_f32_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Tensor<f32> = Tensor::uniform([4, 5], 1.0, &mut rng).unwrap();
    let b: Tensor<f32> = Tensor::uniform([5, 3], 1.0, &mut rng).unwrap();
    let errs = finite_diff_check_many(
        |tape, v| {
            let c = tape.matmul(v[0], v[1])?;
            tape.sum(c)
        },
        &[a, b],
        1e-2,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-3), "{errs:?}");
}

#[test]
fn broadcast_matmul_gradients() {
    // Per-joint weights shared over a leading batch axis, and a plain shared matrix.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [
        rand_tensor(&[2, 3, 4, 5], &mut rng),
        rand_tensor(&[3, 5, 2], &mut rng),
        rand_tensor(&[2, 6], &mut rng),
    ];
    let errs = finite_diff_check_many(
        |tape, v| {
            let c = tape.matmul(v[0], v[1])?;
            let d = tape.matmul(c, v[2])?;
            weighted_sum(tape, d, 8)
        },
        &inputs,
        1e-4,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-5), "{errs:?}");
}

#[test]
fn broadcast_matmul_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&[2, 3, 4, 5], &mut rng);
    let b = rand_tensor(&[3, 5, 2], &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()).unwrap(), tape.constant(b.clone()).unwrap());
    let c = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 4, 2]);
    let out = tape.value(c).data();
    for i in 0..2 {
        for j in 0..3 {
            for p in 0..4 {
                for r in 0..2 {
                    let expect: f64 = (0..5)
                        .map(|q| a.data()[((i * 3 + j) * 4 + p) * 5 + q] * b.data()[(j * 5 + q) * 2 + r])
                        .sum();
                    let got = out[((i * 3 + j) * 4 + p) * 2 + r];
                    assert!((expect - got).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new([2], vec![0.0, 0.0]).unwrap()).unwrap();
    let y = tape.softmax_lastdim(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::new([2], vec![-1e9, 0.0]).unwrap()).unwrap();
    let y = tape.softmax_lastdim(x).unwrap();
    let v = tape.value(y).data();
    assert!(v[0].abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[7], &mut rng);
    let err = finite_diff_check(
        |tape, x| {
            let y = tape.softmax_lastdim(x)?;
            weighted_sum(tape, y, 9)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn causal_weights_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[2, 6, 6], &mut rng);
    for norm in [Normalizer::Softmax, Normalizer::SumNormalize] {
        for group in [1, 2, 3] {
            let mask = AttnMask::Causal { group };
            let mut tape = Tape::new();
            let v = tape.constant(x.clone()).unwrap();
            let w = tape.attention_weights(v, mask, norm).unwrap();
            for (idx, row) in tape.value(w).data().chunks(6).enumerate() {
                let r = idx % 6;
                let total: f64 = row.iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
                for (c, &val) in row.iter().enumerate() {
                    assert!(val >= 0.0);
                    if mask.is_masked(r, c) {
                        assert_eq!(val, 0.0);
                    }
                }
            }
            if norm == Normalizer::Softmax {
                let err = finite_diff_check(
                    |tape, v| {
                        let y = tape.attention_weights(v, mask, norm)?;
                        weighted_sum(tape, y, 10)
                    },
                    &x,
                    1e-4,
                )
                .unwrap();
                assert!(err < 1e-5, "{err}");
            }
        }
    }
}

#[test]
fn sum_normalize_gradient_away_from_kinks() {
    // Entries bounded away from zero so the ReLU kink is not crossed.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<f64> = (0..24)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor::new([4, 6], data).unwrap();
    let err = finite_diff_check(
        |tape, v| {
            let y = tape.attention_weights(v, AttnMask::None, Normalizer::SumNormalize)?;
            weighted_sum(tape, y, 11)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn sum_normalize_falls_back_to_uniform() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new([3, 3], vec![-1.0; 9]).unwrap()).unwrap();
    let y = tape.attention_weights(x, AttnMask::Causal { group: 1 }, Normalizer::SumNormalize).unwrap();
    let v = tape.value(y).data();
    assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
    assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
    assert!(v[6..9].iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-7));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f32>::new();
    let gain = tape.constant(Tensor::new([3], vec![2.0, 3.0, 4.0]).unwrap()).unwrap();
    let bias = tape.constant(Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
    let x = tape.constant(Tensor::new([3], vec![5.0; 3]).unwrap()).unwrap();
    let y = tape.layer_norm(x, gain, bias).unwrap();
    assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3]);

    let gain = tape.constant(Tensor::ones([2]).unwrap()).unwrap();
    let bias = tape.constant(Tensor::zeros([2]).unwrap()).unwrap();
    let x = tape.constant(Tensor::new([2], vec![-1.0, 1.0]).unwrap()).unwrap();
    let y = tape.layer_norm(x, gain, bias).unwrap();
    let expect = 1.0 / (1.0f32 + 1e-5).sqrt();
    let v = tape.value(y).data();
    assert!((v[0] + expect).abs() < 1e-6 && (v[1] - expect).abs() < 1e-6);
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = [rand_tensor(&[4, 6], &mut rng), rand_tensor(&[6], &mut rng), rand_tensor(&[6], &mut rng)];
    let errs = finite_diff_check_many(
        |tape, v| {
            let y = tape.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(tape, y, 12)
        },
        &inputs,
        1e-4,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
}

#[test]
fn dropout_modes_and_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones([100_000]).unwrap()).unwrap();
    assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.7, false, &mut rng).unwrap(), x);
    assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(TensorError::InvalidParameter(_))));

    let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
    let v = tape.value(y).data();
    let survivors = v.iter().filter(|&&e| e != 0.0).count() as f64 / v.len() as f64;
    let mean = v.iter().map(|&e| e as f64).sum::<f64>() / v.len() as f64;
    assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
    assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
}

#[test]
fn backward_basic_identities() {
    let mut tape = Tape::<f32>::new();
    let x_vals = vec![0.5, -1.5, 2.0, 3.25];
    let x = tape.param(Tensor::new([2, 2], x_vals.clone()).unwrap()).unwrap();
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

    let sq = tape.mul(x, x).unwrap();
    let s2 = tape.sum(sq).unwrap();
    let g = tape.backward(s2).unwrap();
    let expect: Vec<f32> = x_vals.iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.get(x).unwrap().data(), &expect[..]);

    assert!(matches!(tape.backward(sq), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn gradients_accumulate_over_repeated_use() {
    // x used three times: y = x + x + 2x, compared with three distinct copies.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&[5], &mut rng);
    let mut tape = Tape::new();
    let v = tape.param(x.clone()).unwrap();
    let a = tape.add(v, v).unwrap();
    let b = tape.scale(v, 2.0).unwrap();
    let y = tape.mul(a, b).unwrap();
    let s = weighted_sum(&mut tape, y, 13).unwrap();
    let shared = tape.backward(s).unwrap().get(v).unwrap().clone();

    let mut tape = Tape::new();
    let copies: Vec<Var> = (0..3).map(|_| tape.param(x.clone()).unwrap()).collect();
    let a = tape.add(copies[0], copies[1]).unwrap();
    let b = tape.scale(copies[2], 2.0).unwrap();
    let y = tape.mul(a, b).unwrap();
    let s = weighted_sum(&mut tape, y, 13).unwrap();
    let g = tape.backward(s).unwrap();
    for i in 0..5 {
        let total: f64 = copies.iter().map(|c| g.get(*c).unwrap().data()[i]).sum();
        assert!((total - shared.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn finite_diff_check_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[3, 4], &mut rng);
    let err = finite_diff_check(|tape, v| tape.sum(v), &x, 1e-3).unwrap();
    assert!(err < 1e-6);
    let err = finite_diff_check(
        |tape, v| {
            let y = tape.softmax_lastdim(v)?;
            tape.sum(y)
        },
        &x,
        1e-3,
    )
    .unwrap();
    // Analytic gradient is exactly zero; the numeric one is rounding noise.
    assert!(err < 1e-2, "{err}");
}

#[test]
fn mha_kernels_match_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (t, s, heads, f) = (4, 3, 2, 3);
    let q = rand_tensor(&[2, t, heads * f], &mut rng);
    let k = rand_tensor(&[2, s, heads * f], &mut rng);
    let v = rand_tensor(&[2, s, heads * f], &mut rng);
    let mut tape = Tape::new();
    let (vq, vk, vv) = (
        tape.constant(q.clone()).unwrap(),
        tape.constant(k.clone()).unwrap(),
        tape.constant(v.clone()).unwrap(),
    );
    let scores = tape.mha_scores(vq, vk, heads, 0.5).unwrap();
    assert_eq!(tape.shape(scores), &[2, heads, t, s]);
    let out = tape.mha_apply(scores, vv, heads).unwrap();
    assert_eq!(tape.shape(out), &[2, t, heads * f]);
    let (sd, od) = (tape.value(scores).data(), tape.value(out).data());
    let hf = heads * f;
    for b in 0..2 {
        for h in 0..heads {
            for i in 0..t {
                for j in 0..s {
                    let expect: f64 = (0..f)
                        .map(|c| q.data()[(b * t + i) * hf + h * f + c] * k.data()[(b * s + j) * hf + h * f + c])
                        .sum::<f64>()
                        * 0.5;
                    assert!((sd[((b * heads + h) * t + i) * s + j] - expect).abs() < 1e-12);
                }
                for c in 0..f {
                    let expect: f64 = (0..s)
                        .map(|j| sd[((b * heads + h) * t + i) * s + j] * v.data()[(b * s + j) * hf + h * f + c])
                        .sum();
                    assert!((od[(b * t + i) * hf + h * f + c] - expect).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn attention_pipeline_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = [
        rand_tensor(&[2, 5, 4], &mut rng),
        rand_tensor(&[2, 5, 4], &mut rng),
        rand_tensor(&[2, 5, 4], &mut rng),
    ];
    let errs = finite_diff_check_many(
        |tape, v| {
            let s = tape.mha_scores(v[0], v[1], 2, 0.7)?;
            let w = tape.attention_weights(s, AttnMask::Causal { group: 1 }, Normalizer::Softmax)?;
            let o = tape.mha_apply(w, v[2], 2)?;
            let p = tape.permute(o, &[1, 0, 2])?;
            let r = tape.reshape(p, &[5, 8])?;
            let n = tape.norm_lastdim(r)?;
            weighted_sum(tape, n, 14)
        },
        &inputs,
        1e-4,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-5), "{errs:?}");
}

#[test]
fn norm_lastdim_zero_slice_has_zero_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new([2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap()).unwrap();
    let n = tape.norm_lastdim(x).unwrap();
    assert_eq!(tape.value(n).data(), &[0.0, 5.0]);
    let s = tape.sum(n).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.6, 0.8]);
}

#[test]
fn budget_is_enforced_before_allocation() {
    let mut tape = Tape::<f32>::with_budget(100);
    let a = tape.constant(Tensor::zeros([8, 8]).unwrap()).unwrap();
    assert_eq!(tape.workspace_elements(), 64);
    let err = tape.matmul(a, a).unwrap_err();
    assert!(matches!(err, TensorError::BudgetExceeded { requested: 128, budget: 100 }));
    assert_eq!(tape.len(), 1);
}

fn small_values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(vals in small_values(24), scale in 0.1f64..50.0) {
        let x = Tensor::new([4, 6], vals.iter().map(|v| (v * scale) as f32).collect()).unwrap();
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(x).unwrap();
        let y = tape.softmax_lastdim(v).unwrap();
        for row in tape.value(y).data().chunks(6) {
            let total: f32 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0 && p.is_finite()));
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences(a in small_values(12), b in small_values(12), g in small_values(4)) {
        let inputs = [
            Tensor::new([3, 4], a).unwrap(),
            Tensor::new([4, 3], b).unwrap(),
            Tensor::new([4], g).unwrap(),
        ];
        let errs = finite_diff_check_many(
            |tape, v| {
                let m = tape.matmul(v[0], v[1])?;
                let s = tape.softmax_lastdim(m)?;
                let back = tape.matmul(s, v[0])?;
                let zero = tape.constant(Tensor::zeros([4])?)?;
                let n = tape.layer_norm(back, v[2], zero)?;
                let sub = tape.sub(n, v[0])?;
                let sq = tape.mul(sub, sub)?;
                tape.sum(sq)
            },
            &inputs,
            1e-5,
        ).unwrap();
        prop_assert!(errs.iter().all(|&e| e < 1e-2), "{:?}", errs);
    }
}
