use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get(id);
        let data = (0..t.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let shape = t.shape().to_vec();
        store.set(id, Tensor::new(shape, data).unwrap()).unwrap();
    }
}

#[test]
fn softmax_against_extended_precision_oracle() {
    // exp-normalize evaluated with 40 significant digits
    let expect = [
        0.137_499_048_042_227_25,
        0.030_680_184_609_918_813,
        0.831_820_767_347_853_94,
    ];
    let s = softmax(&Tensor::vector(vec![0.2, -1.3, 2.0]), 0).unwrap();
    for (a, b) in s.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn tape_softmax_matches_tensor_softmax() {
    let x = Tensor::matrix(2, 3, vec![0.2, -1.3, 2.0, 5.0, 5.0, -5.0]).unwrap();
    let tape = Tape::new();
    let v = tape.constant(x.clone()).softmax();
    assert!(v.value().max_abs_diff(&x.softmax(1).unwrap()) < 1e-15);
}

#[test]
fn layer_norm_constant_vector_is_zero() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::filled(&[1, 4], 3.5));
    let y = x.layer_norm();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_unit_affine_stats() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let g = tape.constant(Tensor::filled(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = layer_norm(x, g, b).unwrap().value();
    let mean: f64 = y.data().iter().sum::<f64>() / 3.0;
    let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-4);
}

#[test]
fn layer_norm_against_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, 1, 8);
    let gamma: Vec<f64> = (0..8).map(|_| rng.random_range(0.5..1.5)).collect();
    let beta: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mean = x.data().iter().sum::<f64>() / 8.0;
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
    let oracle: Vec<f64> = (0..8)
        .map(|i| (x.data()[i] - mean) / (var + LAYER_NORM_EPS).sqrt() * gamma[i] + beta[i])
        .collect();
    let tape = Tape::new();
    let y = layer_norm(
        tape.constant(x),
        tape.constant(Tensor::vector(gamma)),
        tape.constant(Tensor::vector(beta)),
    )
    .unwrap();
    for (a, b) in y.value().data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_rejects_wrong_gamma() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let g = tape.constant(Tensor::zeros(&[2]));
    assert!(layer_norm(x, g, g).is_err());
}

fn attention_setup(dim: usize, seed: u64) -> (ParamStore, AttentionParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, "attn", dim, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    (store, p)
}

/// Straight-line scaled dot-product attention with explicit loops.
fn mha_oracle(store: &ParamStore, p: &AttentionParams, q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let proj = |x: &Tensor, l: &Linear| -> Vec<Vec<f64>> {
        let w = store.get(l.weight);
        let b = store.get(l.bias);
        (0..x.rows())
            .map(|r| {
                (0..w.cols())
                    .map(|c| b.data()[c] + (0..x.cols()).map(|i| x.at(r, i) * w.at(i, c)).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let (qp, kp, vp) = (proj(q, &p.query), proj(k, &p.key), proj(v, &p.value));
    let d = q.cols();
    let dh = d / heads;
    let mut joined = vec![vec![0.0; d]; q.rows()];
    for h in 0..heads {
        for (qi, qrow) in qp.iter().enumerate() {
            let logits: Vec<f64> = kp
                .iter()
                .map(|krow| (0..dh).map(|c| qrow[h * dh + c] * krow[h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                joined[qi][h * dh + c] = (0..kp.len()).map(|j| e[j] / z * vp[j][h * dh + c]).sum();
            }
        }
    }
    let jt = Tensor::from_rows(&joined).unwrap();
    Tensor::from_rows(&proj(&jt, &p.output)).unwrap()
}

#[test]
fn mha_matches_direct_formula_oracle() {
    let (store, p) = attention_setup(4, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let q = random(&mut rng, 2, 4);
    let k = random(&mut rng, 3, 4);
    let v = random(&mut rng, 3, 4);
    for heads in [1, 2] {
        let tape = Tape::new();
        let out = mha(&tape, &store, tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), heads, &p, None).unwrap();
        let oracle = mha_oracle(&store, &p, &q, &k, &v, heads);
        assert!(out.value().max_abs_diff(&oracle) < 1e-10);
    }
}

#[test]
fn mha_single_key_returns_projected_value() {
    let (store, p) = attention_setup(4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random(&mut rng, 3, 4);
    let kv = random(&mut rng, 1, 4);
    let tape = Tape::new();
    let out = mha(&tape, &store, tape.constant(q), tape.constant(kv.clone()), tape.constant(kv.clone()), 2, &p, None).unwrap();
    let vproj = p.output.forward(&tape, &store, p.value.forward(&tape, &store, tape.constant(kv))).value();
    let o = out.value();
    for r in 0..3 {
        for c in 0..4 {
            assert!((o.at(r, c) - vproj.at(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn mha_identical_keys_average_values() {
    let (store, p) = attention_setup(4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = random(&mut rng, 2, 4);
    let key_row = random(&mut rng, 1, 4);
    let k = Tensor::matrix(3, 4, key_row.data().repeat(3)).unwrap();
    let v = random(&mut rng, 3, 4);
    let mean_v: Vec<f64> = (0..4).map(|c| (0..3).map(|r| v.at(r, c)).sum::<f64>() / 3.0).collect();
    let tape = Tape::new();
    let out = mha(&tape, &store, tape.constant(q), tape.constant(k), tape.constant(v), 1, &p, None).unwrap();
    let expect = p
        .output
        .forward(&tape, &store, p.value.forward(&tape, &store, tape.constant(Tensor::matrix(1, 4, mean_v).unwrap())))
        .value();
    for r in 0..2 {
        for c in 0..4 {
            assert!((out.value().at(r, c) - expect.at(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn mha_all_pass_mask_is_bit_identical() {
    let (store, p) = attention_setup(8, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let q = random(&mut rng, 3, 8);
    let k = random(&mut rng, 5, 8);
    let tape = Tape::new();
    let (qv, kv) = (tape.constant(q), tape.constant(k));
    let a = mha(&tape, &store, qv, kv, kv, 2, &p, None).unwrap().value();
    let mask = AttentionMask::all_pass(3, 5);
    let b = mha(&tape, &store, qv, kv, kv, 2, &p, Some(&mask)).unwrap().value();
    assert_eq!(a.data(), b.data());
}

#[test]
fn mha_mask_blocks_keys() {
    let (store, p) = attention_setup(4, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let q = random(&mut rng, 1, 4);
    let k = random(&mut rng, 2, 4);
    let tape = Tape::new();
    let mut mask = AttentionMask::all_pass(1, 2);
    mask.allowed[1] = false;
    let out = mha(&tape, &store, tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(k.clone()), 1, &p, Some(&mask)).unwrap();
    let first = Tensor::matrix(1, 4, k.row(0).to_vec()).unwrap();
    let single = mha(&tape, &store, tape.constant(q), tape.constant(first.clone()), tape.constant(first), 1, &p, None).unwrap();
    assert!(out.value().max_abs_diff(&single.value()) < 1e-12);
}

#[test]
fn mha_dimension_errors() {
    let (store, p) = attention_setup(4, 1);
    let tape = Tape::new();
    let q = tape.constant(Tensor::zeros(&[2, 4]));
    let k = tape.constant(Tensor::zeros(&[3, 4]));
    let v = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(mha(&tape, &store, q, k, v, 1, &p, None).is_err());
    assert!(mha(&tape, &store, q, k, k, 3, &p, None).is_err());
    let empty = tape.constant(Tensor::zeros(&[0, 4]));
    assert!(mha(&tape, &store, q, empty, empty, 1, &p, None).is_err());
}

#[test]
fn mlp_zero_weights_emit_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let m = MlpParams::new(&mut store, "m", &[3, 5, 2], Activation::Relu, &mut rng).unwrap();
    for l in &m.layers {
        let shape = store.get(l.weight).shape().to_vec();
        store.set(l.weight, Tensor::zeros(&shape)).unwrap();
    }
    store.set(m.last().bias, Tensor::vector(vec![0.25, -4.0])).unwrap();
    let tape = Tape::new();
    let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let y = mlp_forward(&tape, &store, x, &m).unwrap().value();
    assert_eq!(y.data(), &[0.25, -4.0, 0.25, -4.0]);
}

#[test]
fn mlp_identity_layer_passes_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let m = MlpParams::new(&mut store, "m", &[3, 3], Activation::Relu, &mut rng).unwrap();
    let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    store.set(m.layers[0].weight, eye).unwrap();
    let x = Tensor::matrix(1, 3, vec![-1.0, 2.0, 0.5]).unwrap();
    let tape = Tape::new();
    let y = mlp_forward(&tape, &store, tape.constant(x.clone()), &m).unwrap();
    assert_eq!(y.value().data(), x.data());
}

#[test]
fn mlp_two_layers_against_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let m = MlpParams::new(&mut store, "m", &[3, 4, 2], Activation::Relu, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let x = random(&mut rng, 2, 3);
    let (w0, b0, w1, b1) = (
        store.get(m.layers[0].weight),
        store.get(m.layers[0].bias),
        store.get(m.layers[1].weight),
        store.get(m.layers[1].bias),
    );
    let mut oracle = vec![0.0; 4];
    for r in 0..2 {
        let hidden: Vec<f64> = (0..4)
            .map(|j| (b0.data()[j] + (0..3).map(|i| x.at(r, i) * w0.at(i, j)).sum::<f64>()).max(0.0))
            .collect();
        for o in 0..2 {
            oracle[r * 2 + o] = b1.data()[o] + (0..4).map(|j| hidden[j] * w1.at(j, o)).sum::<f64>();
        }
    }
    let tape = Tape::new();
    let y = mlp_forward(&tape, &store, tape.constant(x), &m).unwrap();
    for (a, b) in y.value().data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mlp_rejects_bad_chain_and_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let a = MlpParams::new(&mut store, "a", &[3, 4], Activation::Relu, &mut rng).unwrap();
    let b = MlpParams::new(&mut store, "b", &[5, 2], Activation::Relu, &mut rng).unwrap();
    let broken = MlpParams {
        layers: vec![a.layers[0], b.layers[0]],
        activation: Activation::Relu,
    };
    assert!(broken.validate(&store).is_err());
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(mlp_forward(&tape, &store, x, &a).is_err());
}

fn ada_setup(d: usize, c: usize, seed: u64) -> (ParamStore, MlpParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = MlpParams::new(&mut store, "ada", &[c, 6, 2 * d], Activation::Gelu, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    (store, m)
}

#[test]
fn ada_ln_unit_modulation_equals_layer_norm() {
    let (mut store, m) = ada_setup(4, 2, 3);
    for l in &m.layers {
        let shape = store.get(l.weight).shape().to_vec();
        store.set(l.weight, Tensor::zeros(&shape)).unwrap();
    }
    store
        .set(m.last().bias, Tensor::vector(vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]))
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, 3, 4);
    let cond = random(&mut rng, 3, 2);
    let tape = Tape::new();
    let xv = tape.constant(x);
    let y = ada_layer_norm(&tape, &store, xv, tape.constant(cond), &m).unwrap();
    assert_eq!(y.value().data(), xv.layer_norm().value().data());
}

#[test]
fn ada_ln_zero_condition_uses_bias() {
    let (mut store, m) = ada_setup(2, 2, 5);
    for l in &m.layers {
        let shape = store.get(l.weight).shape().to_vec();
        store.set(l.weight, Tensor::zeros(&shape)).unwrap();
    }
    store.set(m.last().bias, Tensor::vector(vec![2.0, 3.0, -1.0, 0.5])).unwrap();
    let tape = Tape::new();
    let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 3.0, -2.0, 0.0]).unwrap());
    let y = ada_layer_norm(&tape, &store, x, tape.constant(Tensor::zeros(&[2, 2])), &m).unwrap().value();
    let n = x.layer_norm().value();
    for r in 0..2 {
        assert!((y.at(r, 0) - (n.at(r, 0) * 2.0 - 1.0)).abs() < 1e-12);
        assert!((y.at(r, 1) - (n.at(r, 1) * 3.0 + 0.5)).abs() < 1e-12);
    }
}

#[test]
fn ada_ln_against_composed_oracle() {
    let (store, m) = ada_setup(4, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, 2, 4);
    let cond = random(&mut rng, 2, 3);
    let tape = Tape::new();
    let gb = mlp_forward(&tape, &store, tape.constant(cond.clone()), &m).unwrap().value();
    let mut oracle = vec![0.0; 8];
    for r in 0..2 {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        for c in 0..4 {
            let n = (row[c] - mean) / (var + LAYER_NORM_EPS).sqrt();
            oracle[r * 4 + c] = n * gb.at(r, c) + gb.at(r, 4 + c);
        }
    }
    let y = ada_layer_norm(&tape, &store, tape.constant(x), tape.constant(cond), &m).unwrap();
    for (a, b) in y.value().data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn grad_check_square() {
    let err = grad_check(|_, x| Ok(x.mul(x).sum()), &Tensor::scalar(3.0), 1e-5).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_rejects_nonfinite_objective() {
    let r = grad_check(|_, x| Ok(x.scale(f64::INFINITY).sum()), &Tensor::scalar(1.0), 1e-5);
    assert!(r.is_err());
}

#[test]
fn grad_check_mha_inputs_and_params() {
    let (store, p) = attention_setup(4, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let q = random(&mut rng, 2, 4);
    let k = random(&mut rng, 3, 4);
    let w = random(&mut rng, 2, 4);
    let err = grad_check(
        |tape, x| {
            let kv = tape.constant(k.clone());
            let o = mha(tape, &store, x, kv, kv, 2, &p, None)?;
            Ok(o.mul(tape.constant(w.clone())).sum())
        },
        &q,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    for id in [p.query.weight, p.key.weight, p.value.bias, p.output.weight] {
        let err = grad_check_param(&store, id, None, 1e-5, |tape, s| {
            let qv = tape.constant(q.clone());
            let kv = tape.constant(k.clone());
            let o = mha(tape, s, qv, kv, kv, 2, &p, None)?;
            Ok(o.mul(tape.constant(w.clone())).sum())
        })
        .unwrap();
        assert!(err < 1e-4, "{}: {err}", store.name(id));
    }
}

#[test]
fn grad_check_ada_ln_params() {
    let (store, m) = ada_setup(4, 2, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x = random(&mut rng, 3, 4);
    let cond = random(&mut rng, 3, 2);
    let w = random(&mut rng, 3, 4);
    for id in store.ids() {
        let err = grad_check_param(&store, id, None, 1e-5, |tape, s| {
            let y = ada_layer_norm(tape, s, tape.constant(x.clone()), tape.constant(cond.clone()), &m)?;
            Ok(y.mul(tape.constant(w.clone())).sum())
        })
        .unwrap();
        assert!(err < 1e-4, "{}: {err}", store.name(id));
    }
}

#[test]
fn grad_check_primitive_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let x = random(&mut rng, 4, 3);
    let w = random(&mut rng, 2, 5);
    let err = grad_check(
        |tape, x| {
            let a = x.layer_norm().activate(Activation::Gelu);
            let b = x.log_softmax().abs().segment_max(2);
            let c = x.activate(Activation::Tanh).segment_mean(2).mul(b);
            let d = concat_rows(&[a.slice_rows(1, 2), c]).gather_rows(&[0, 3, 3, 1]);
            let e = concat_cols(&[d.slice_cols(0, 2), d]).matmul_nt(tape.constant(w.clone()));
            Ok(e.select(&[0, 3, 5, 7]).sum().add(x.softmax().mul(x).sum()))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        xs in proptest::collection::vec(-30.0f64..30.0, 1..12),
        c in -50.0f64..50.0,
    ) {
        let t = Tensor::vector(xs.clone());
        let s = softmax(&t, 0).unwrap();
        let total: f64 = s.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(s.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        let shifted = softmax(&Tensor::vector(xs.iter().map(|v| v + c).collect()), 0).unwrap();
        prop_assert!(s.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn layer_norm_statistics(xs in proptest::collection::vec(-10.0f64..10.0, 2..16)) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assume!(var > 0.1);
        let tape = Tape::new();
        let y = tape.constant(Tensor::matrix(1, xs.len(), xs).unwrap()).layer_norm().value();
        let m = y.data().iter().sum::<f64>() / n;
        let v = y.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        prop_assert!(m.abs() < 1e-5);
        prop_assert!((v - 1.0).abs() < 1e-4);
    }
}
