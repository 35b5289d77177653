use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Contracts an arbitrary tensor against fixed random weights so that every
/// output coordinate carries an O(1) gradient.
fn readout(tape: &mut Tape, v: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.value(v).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(shape[0], shape[1], &mut rng))?;
    let prod = tape.mul(v, w)?;
    tape.sum_all(prod)
}

#[test]
fn sigmoid_at_zero() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::scalar(0.0)).unwrap();
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(y).item().unwrap(), 0.5);
}

#[test]
fn masked_softmax_equal_logits_is_uniform() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape
        .constant(Tensor::from_vec(1, 5, vec![2.0, 2.0, 9.0, 2.0, 2.0]).unwrap())
        .unwrap();
    let mask = [true, true, false, true, true];
    let y = tape.masked_row_softmax(x, &mask).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25, 0.25, 0.0, 0.25, 0.25]);
}

#[test]
fn masked_softmax_rejects_fully_masked_row() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::zeros(2, 2)).unwrap();
    let err = tape
        .masked_row_softmax(x, &[true, false, false, false])
        .unwrap_err();
    assert_eq!(err, TensorError::EmptySoftmaxRow(1));
}

#[test]
fn row_normalize_three_four_five() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::row_vector(vec![3.0, 4.0])).unwrap();
    let y = tape.row_l2_normalize(x).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
}

#[test]
fn square_derivative() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::scalar(3.0), true);
    let mut tape = Tape::new(&store);
    let v = tape.param(x);
    let y = tape.mul(v, v).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).item().unwrap(), 6.0);
}

#[test]
fn constant_output_has_zero_gradients() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::row_vector(vec![1.0, 2.0]), true);
    let mut tape = Tape::new(&store);
    let _unused = tape.param(x);
    let c = tape.constant(Tensor::scalar(4.0)).unwrap();
    let g = tape.backward(c).unwrap();
    assert!(g.get(x).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.get(x).shape(), [1, 2]);
}

#[test]
fn backward_requires_scalar() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::zeros(2, 1)).unwrap();
    assert!(matches!(
        tape.backward(x),
        Err(TensorError::NotScalar([2, 1]))
    ));
}

#[test]
fn shape_mismatch_is_an_error() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
    let b = tape.constant(Tensor::zeros(2, 3)).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape(_))));
    let c = tape.constant(Tensor::zeros(3, 2)).unwrap();
    assert!(matches!(tape.add(a, c), Err(TensorError::Shape(_))));
}

#[test]
fn non_finite_values_are_rejected() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let a = tape.constant(Tensor::scalar(1e308)).unwrap();
    assert!(matches!(
        tape.scale(a, 10.0),
        Err(TensorError::NonFinite(_))
    ));
}

#[test]
fn grad_check_rejects_zero_eps() {
    let mut store = ParamStore::new();
    store.add("x", Tensor::scalar(1.0), true);
    let id = store.find("x").unwrap();
    let res = grad_check(&mut store, 0.0, |t| {
        let v = t.param(id);
        t.sum_all(v)
    });
    assert!(matches!(res, Err(TensorError::InvalidEpsilon(_))));
}

#[test]
fn grad_check_linear_map_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let w = store.add("w", random(4, 3, &mut rng), true);
    let x = random(5, 4, &mut rng);
    let report = grad_check(&mut store, 1e-5, |t| {
        let xv = t.constant(x.clone())?;
        let wv = t.param(w);
        let y = t.matmul(xv, wv)?;
        readout(t, y, 9)
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_three_layer_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", random(6, 5, &mut rng), true);
    let b1 = store.add("b1", random(1, 5, &mut rng), true);
    let w2 = store.add("w2", random(5, 4, &mut rng), true);
    let w3 = store.add("w3", random(4, 3, &mut rng), true);
    let x = random(7, 6, &mut rng);
    let report = grad_check(&mut store, 1e-5, |t| {
        let xv = t.constant(x.clone())?;
        let h = t.param(w1);
        let h = t.matmul(xv, h)?;
        let b = t.param(b1);
        let h = t.add_row(h, b)?;
        let h = t.sigmoid(h)?;
        let w = t.param(w2);
        let h = t.matmul(h, w)?;
        let h = t.leaky_relu(h, 0.2)?;
        let w = t.param(w3);
        let h = t.matmul(h, w)?;
        let h = t.row_l2_normalize(h)?;
        readout(t, h, 3)
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

/// Runs a grad check for one primitive applied to a random parameter input.
fn check_unary(
    name: &str,
    rows: usize,
    cols: usize,
    op: impl Fn(&mut Tape, Var) -> Result<Var, TensorError>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(rows as u64 * 31 + cols as u64);
    let mut store = ParamStore::new();
    let a = store.add(name, random(rows, cols, &mut rng), true);
    let report = grad_check(&mut store, 1e-5, |t| {
        let v = t.param(a);
        let y = op(t, v)?;
        readout(t, y, 11)
    })
    .unwrap();
    report.max_relative_error
}

#[test]
fn every_primitive_passes_grad_check() {
    let tol = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let other = random(4, 3, &mut rng);
    let right = random(3, 2, &mut rng);
    let bias = random(1, 3, &mut rng);
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();

    let cases: Vec<(&str, f64)> = vec![
        (
            "matmul",
            check_unary("a", 4, 3, |t, v| {
                let r = t.constant(right.clone())?;
                t.matmul(v, r)
            }),
        ),
        (
            "matmul_t",
            check_unary("a", 4, 3, |t, v| {
                let o = t.constant(other.clone())?;
                t.matmul_t(v, o)
            }),
        ),
        (
            "add",
            check_unary("a", 4, 3, |t, v| {
                let o = t.constant(other.clone())?;
                t.add(v, o)
            }),
        ),
        (
            "sub",
            check_unary("a", 4, 3, |t, v| {
                let o = t.constant(other.clone())?;
                t.sub(o, v)
            }),
        ),
        (
            "mul",
            check_unary("a", 4, 3, |t, v| {
                let o = t.constant(other.clone())?;
                t.mul(v, o)
            }),
        ),
        ("self_mul", check_unary("a", 4, 3, |t, v| t.mul(v, v))),
        (
            "add_row",
            check_unary("a", 4, 3, |t, v| {
                let b = t.constant(bias.clone())?;
                t.add_row(v, b)
            }),
        ),
        (
            "add_row_bias",
            check_unary("a", 1, 3, |t, v| {
                let o = t.constant(other.clone())?;
                t.add_row(o, v)
            }),
        ),
        ("scale", check_unary("a", 4, 3, |t, v| t.scale(v, -2.5))),
        (
            "concat",
            check_unary("a", 4, 3, |t, v| {
                let o = t.constant(other.clone())?;
                t.concat_cols(&[o, v, v])
            }),
        ),
        ("transpose", check_unary("a", 4, 3, |t, v| t.transpose(v))),
        (
            "outer_add",
            check_unary("a", 4, 1, |t, v| {
                let row = t.transpose(v)?;
                t.outer_add(v, row)
            }),
        ),
        ("relu", check_unary("a", 4, 3, |t, v| t.relu(v))),
        (
            "leaky_relu",
            check_unary("a", 4, 3, |t, v| t.leaky_relu(v, 0.2)),
        ),
        ("sigmoid", check_unary("a", 4, 3, |t, v| t.sigmoid(v))),
        (
            "masked_row_softmax",
            check_unary("a", 4, 3, |t, v| t.masked_row_softmax(v, &mask)),
        ),
        ("mean_rows", check_unary("a", 4, 3, |t, v| t.mean_rows(v))),
        (
            "row_l2_normalize",
            check_unary("a", 4, 3, |t, v| t.row_l2_normalize(v)),
        ),
        (
            "gather_rows",
            check_unary("a", 4, 3, |t, v| {
                t.gather_rows(v, Arc::from(vec![3, 0, 0, 2, 1]))
            }),
        ),
        (
            "batch_norm",
            check_unary("a", 5, 3, |t, v| {
                let g = t.constant(Tensor::row_vector(vec![1.5, -0.5, 2.0]))?;
                let b = t.constant(Tensor::row_vector(vec![0.1, 0.2, 0.3]))?;
                Ok(t.batch_norm(v, g, b, &NormStats::Batch, 1e-5)?.0)
            }),
        ),
        (
            "batch_norm_affine",
            check_unary("a", 1, 3, |t, v| {
                let x = t.constant(other.clone())?;
                let b = t.constant(Tensor::row_vector(vec![0.1, 0.2, 0.3]))?;
                Ok(t.batch_norm(x, v, b, &NormStats::Batch, 1e-5)?.0)
            }),
        ),
        (
            "batch_norm_fixed",
            check_unary("a", 4, 3, |t, v| {
                let g = t.constant(Tensor::row_vector(vec![1.5, -0.5, 2.0]))?;
                let b = t.constant(Tensor::row_vector(vec![0.1, 0.2, 0.3]))?;
                let stats = NormStats::Fixed {
                    mean: vec![0.1, -0.2, 0.0],
                    var: vec![0.5, 2.0, 1.0],
                };
                Ok(t.batch_norm(v, g, b, &stats, 1e-5)?.0)
            }),
        ),
        (
            "bce",
            check_unary("a", 4, 3, |t, v| {
                let p = t.sigmoid(v)?;
                let y = Tensor::from_vec(4, 3, (0..12).map(|i| (i % 2) as f64).collect())?;
                let w = Tensor::from_vec(4, 3, (0..12).map(|i| 0.5 + (i % 3) as f64).collect())?;
                let loss = t.bce(p, Arc::new(y), Arc::new(w))?;
                t.scale(loss, 1.0)
            }),
        ),
    ];
    for (name, err) in cases {
        assert!(err < tol, "{name}: relative error {err}");
    }
}

#[test]
fn bce_zero_weight_rows_contribute_no_gradient() {
    let mut store = ParamStore::new();
    let a = store.add(
        "a",
        Tensor::from_vec(2, 2, vec![0.3, -0.2, 0.7, 1.1]).unwrap(),
        true,
    );
    let mut tape = Tape::new(&store);
    let v = tape.param(a);
    let p = tape.sigmoid(v).unwrap();
    let y = Arc::new(Tensor::from_vec(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap());
    let w = Arc::new(Tensor::from_vec(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap());
    let l = tape.bce(p, y, w).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(&g.get(a).data()[2..], &[0.0, 0.0]);
    assert!(g.get(a).data()[..2].iter().all(|v| *v != 0.0));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut store = ParamStore::new();
        let w = store.add("w", random(8, 8, &mut rng), true);
        let x = random(6, 8, &mut rng);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x).unwrap();
        let wv = tape.param(w);
        let h = tape.matmul(xv, wv).unwrap();
        let h = tape.sigmoid(h).unwrap();
        let s = tape.sum_all(h).unwrap();
        let g = tape.backward(s).unwrap();
        (tape.value(s).item().unwrap().to_bits(), g.get(w).clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn masked_softmax_rows_are_distributions(
        logits in proptest::collection::vec(-30.0f64..30.0, 20),
        mask_bits in proptest::collection::vec(any::<bool>(), 20),
    ) {
        let mut mask = mask_bits;
        for r in 0..4 {
            mask[r * 5 + r] = true;
        }
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_vec(4, 5, logits).unwrap()).unwrap();
        let y = tape.masked_row_softmax(x, &mask).unwrap();
        let y = tape.value(y);
        for r in 0..4 {
            let row = y.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for c in 0..5 {
                if !mask[r * 5 + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
                prop_assert!(row[c] >= 0.0);
            }
        }
    }
}
