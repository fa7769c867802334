use ctcatt::nn::{grad_check, Tape, Tensor, Var};
use ctcatt::{Error, Result};
use proptest::prelude::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::<f64>::new();
    let i3 = tape.constant(Tensor::eye(3));
    let v = tape.constant(t(&[3, 1], &[0.5, -2.0, 7.0]));
    let out = tape.matmul(i3, v).unwrap();
    assert_eq!(tape.value(out).data(), &[0.5, -2.0, 7.0]);
}

#[test]
fn tanh_of_zero_and_softmax_symmetry() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let th = tape.tanh(z);
    assert!(tape.value(th).data().iter().all(|&v| v == 0.0));
    let x = tape.constant(Tensor::zeros(&[2]));
    let s = tape.softmax(x);
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]"), "{detail}");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.add(a, c), Err(Error::Shape { op: "add", .. })));
    let d = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.add_row(a, d), Err(Error::Shape { op: "add_row", .. })));
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn tanh_gradient_at_origin() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::scalar(0.0), true);
    let th = tape.tanh(w);
    tape.backward(th).unwrap();
    assert_eq!(tape.grad(w).unwrap().item(), 1.0);
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[4.0, 8.0]);
    tape.zero_grad();
    assert!(tape.grad(w).is_none());
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
}

#[test]
fn constants_are_not_recorded() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let b = tape.tanh(a);
    assert!(!tape.requires_grad(b));
}

#[test]
fn composite_graph_matches_finite_differences() {
    let x = t(&[2, 3], &[0.1, -0.4, 0.9, 0.3, 0.2, -1.1]);
    let err = grad_check(
        |tape, v| {
            let w = tape.constant(t(&[3, 2], &[0.5, -0.2, 0.3, 0.8, -0.6, 0.1]));
            let h = tape.matmul(v, w)?;
            let h = tape.tanh(h);
            let s = tape.sigmoid(v);
            let st = tape.transpose(s)?;
            let ones = tape_row_ones(tape, 2)?;
            let m = tape.matmul(h, ones)?;
            let ls = tape.log_softmax(v);
            let picked = tape.pick(ls, 4)?;
            let a = tape.sum(m);
            let b = tape.sum(st);
            let ab = tape.add(a, b)?;
            tape.add(ab, picked)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn tape_row_ones(tape: &mut Tape<f64>, n: usize) -> Result<Var> {
    Ok(tape.constant(Tensor::full(&[n, 1], 1.0)))
}

#[test]
fn f32_tape_runs() {
    let mut tape = Tape::<f32>::new();
    let w = tape.leaf(Tensor::from_f64(&[3], &[0.0, 1.0, 2.0]).unwrap(), true);
    let s = tape.softmax(w);
    let total: f32 = tape.value(s).data().iter().sum();
    assert!((total - 1.0).abs() < 1e-6);
    let p = tape.pick(s, 2).unwrap();
    tape.backward(p).unwrap();
    assert!(tape.grad(w).unwrap().data()[2] > 0.0);
}

/// Weighted sum with fixed pseudo-random coefficients so every output
/// coordinate contributes a distinct amount to the checked scalar.
fn weighted_sum(tape: &mut Tape<f64>, v: Var) -> Result<Var> {
    let n = tape.value(v).len();
    let shape = tape.value(v).shape().to_vec();
    let coeffs: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let c = tape.constant(Tensor::new(shape, coeffs).unwrap());
    let p = tape.mul(v, c)?;
    Ok(tape.sum(p))
}

#[derive(Debug, Clone, Copy)]
enum Prim {
    MatMul,
    MatMulT,
    Add,
    Mul,
    AddRow,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softmax,
    LogSoftmax,
    Concat,
    Slice,
    Transpose,
    Relu,
    Scale,
}

const PRIMS: [Prim; 16] = [
    Prim::MatMul,
    Prim::MatMulT,
    Prim::Add,
    Prim::Mul,
    Prim::AddRow,
    Prim::Tanh,
    Prim::Sigmoid,
    Prim::Exp,
    Prim::Log,
    Prim::Softmax,
    Prim::LogSoftmax,
    Prim::Concat,
    Prim::Slice,
    Prim::Transpose,
    Prim::Relu,
    Prim::Scale,
];

fn apply(prim: Prim, tape: &mut Tape<f64>, x: Var, other: &Tensor<f64>) -> Result<Var> {
    let (r, c) = tape.value(x).dims2("test")?;
    match prim {
        Prim::MatMul => {
            let w = tape.constant(other.clone().reshape(vec![c, r])?);
            tape.matmul(x, w)
        }
        Prim::MatMulT => {
            let w = tape.constant(other.clone().reshape(vec![r, c])?);
            let a = tape.matmul_t(x, w)?;
            let b = tape.matmul_t(w, x)?;
            let bt = tape.transpose(b)?;
            tape.add(a, bt)
        }
        Prim::Add => {
            let o = tape.constant(other.clone().reshape(vec![r, c])?);
            let s = tape.add(x, o)?;
            tape.add(s, x)
        }
        Prim::Mul => tape.mul(x, x),
        Prim::AddRow => {
            let row = tape.slice(x, 0, 0, 1)?;
            tape.add_row(x, row)
        }
        Prim::Tanh => Ok(tape.tanh(x)),
        Prim::Sigmoid => Ok(tape.sigmoid(x)),
        Prim::Exp => Ok(tape.exp(x)),
        Prim::Log => {
            let e = tape.exp(x);
            let e = tape.offset(e, 0.5);
            Ok(tape.log(e))
        }
        Prim::Softmax => Ok(tape.softmax(x)),
        Prim::LogSoftmax => Ok(tape.log_softmax(x)),
        Prim::Concat => {
            let th = tape.tanh(x);
            let a = tape.concat(&[x, th], 0)?;
            let b = tape.concat(&[th, x], 1)?;
            let at = tape.reshape(a, &[2 * r * c])?;
            let bt = tape.reshape(b, &[2 * r * c])?;
            tape.mul(at, bt)
        }
        Prim::Slice => {
            let s = tape.slice(x, 1, c / 2, c - c / 2)?;
            tape.mul(s, s)
        }
        Prim::Transpose => {
            let tr = tape.transpose(x)?;
            tape.matmul(x, tr)
        }
        Prim::Relu => Ok(tape.relu(x)),
        Prim::Scale => Ok(tape.scale(x, -1.7)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn primitives_match_finite_differences(
        pi in 0usize..PRIMS.len(),
        r in 1usize..4,
        c in 1usize..5,
        seed in proptest::collection::vec(-1.5f64..1.5, 32),
        other in proptest::collection::vec(-1.0f64..1.0, 32),
    ) {
        let prim = PRIMS[pi];
        let mut xs: Vec<f64> = seed[..r * c].to_vec();
        if matches!(prim, Prim::Relu) {
            // keep away from the kink
            for v in xs.iter_mut() {
                if v.abs() < 0.05 { *v += 0.1; }
            }
        }
        let x = Tensor::new(vec![r, c], xs).unwrap();
        let o = Tensor::new(vec![r * c], other[..r * c].to_vec()).unwrap();
        let err = grad_check(|tape, v| { let y = apply(prim, tape, v, &o)?; weighted_sum(tape, y) }, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "{prim:?}: {err}");
    }

    #[test]
    fn softmax_on_simplex_and_log_softmax_consistent(
        xs in proptest::collection::vec(-20.0f64..20.0, 1..12),
    ) {
        let n = xs.len();
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::new(vec![n], xs).unwrap());
        let s = tape.softmax(v);
        let ls = tape.log_softmax(v);
        let sd = tape.value(s).data();
        prop_assert!(sd.iter().all(|&p| p >= 0.0));
        prop_assert!((sd.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (&p, &lp) in sd.iter().zip(tape.value(ls).data()) {
            prop_assert!((p.ln() - lp).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_pool_permute_match_finite_differences(
        cin in 1usize..3,
        h in 1usize..6,
        w in 1usize..6,
        kh in 1usize..4,
        kw in 1usize..5,
        data in proptest::collection::vec(-1.0f64..1.0, 200),
    ) {
        let cout = 2;
        let x = Tensor::new(vec![cin, h, w], data[..cin * h * w].to_vec()).unwrap();
        let kn = cout * cin * kh * kw;
        let k = Tensor::new(vec![cout, cin, kh, kw], data[100..100 + kn].to_vec()).unwrap();
        let b = Tensor::new(vec![cout], vec![0.1, -0.2]).unwrap();
        let err = grad_check(|tape, v| {
            let kv = tape.constant(k.clone());
            let bv = tape.constant(b.clone());
            let y = tape.conv2d(v, kv, Some(bv))?;
            let y = tape.tanh(y);
            let p = tape.max_pool2d(y)?;
            let q = tape.permute(p, &[1, 0, 2])?;
            weighted_sum(tape, q)
        }, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "input grad {err}");
        let err_k = grad_check(|tape, kv| {
            let xv = tape.constant(x.clone());
            let bv = tape.leaf(b.clone(), true);
            let y = tape.conv2d(xv, kv, Some(bv))?;
            weighted_sum(tape, y)
        }, &k, 1e-5).unwrap();
        prop_assert!(err_k < 1e-4, "kernel grad {err_k}");
    }
}

#[test]
fn max_pool_uses_ceil_semantics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 3, 5], &(0..15).map(f64::from).collect::<Vec<_>>()).unwrap());
    let p = tape.max_pool2d(x).unwrap();
    assert_eq!(tape.value(p).shape(), &[1, 2, 3]);
    assert_eq!(tape.value(p).data(), &[6.0, 8.0, 9.0, 11.0, 13.0, 14.0]);
}

#[test]
fn crate_root_aliases_are_f64() {
    let x: ctcatt::Tensor = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
    let mut tape = ctcatt::Tape::new();
    let v = tape.leaf(x, true);
    let s = tape.sum(v);
    assert_eq!(tape.value(s).item(), -0.5f64);
}
