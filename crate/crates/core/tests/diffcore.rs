use csn_core::diffcore::gradcheck::{finite_diff_check, op_self_check};
use csn_core::diffcore::io::{read_tensor, write_tensor, Precision};
use csn_core::diffcore::{OpKind, ParamStore, Tape, Tensor};
use csn_core::learners::one_hot;
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn cross_entropy_reference_points() {
    let mut tape = Tape::no_grad();
    let p = tape.constant(Tensor::full(&[1, 5], 0.2)).unwrap();
    let y = one_hot(&[2], 5);
    let l = tape.cross_entropy(p, &y).unwrap();
    assert!(close(tape.value(l).item(), 5f64.ln(), 1e-12));

    let p = tape.constant(y.clone()).unwrap();
    let l = tape.cross_entropy(p, &y).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    let p = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap()).unwrap();
    let l = tape.cross_entropy(p, &Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    assert!(close(tape.value(l).item(), 0.693_147_180_559_945_3, 1e-12));
}

#[test]
fn matmul_with_identity_is_exact() {
    let a = Tensor::new(vec![3, 3], vec![1.5, -2.0, 0.25, 3.0, 7.0, -1.0, 0.0, 4.5, 9.0]).unwrap();
    let mut tape = Tape::no_grad();
    let i = tape.constant(Tensor::identity(3)).unwrap();
    let x = tape.constant(a.clone()).unwrap();
    let y = tape.matmul(i, x).unwrap();
    assert_eq!(tape.value(y), &a);
}

#[test]
fn every_primitive_matches_finite_differences_at_twenty_points() {
    for kind in OpKind::ALL {
        for seed in 0..20 {
            let err = op_self_check(kind, 100 + seed).unwrap();
            assert!(err < 1e-5, "{kind} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn dense_layer_with_cross_entropy_passes_oracle() {
    use csn_core::csn::{Activation, DenseCsn, OutputCsn, ShiftMode};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let hidden = DenseCsn::new(&mut store, "h", 4, 6, Activation::Tanh, &mut rng).unwrap();
    let out = OutputCsn::new(&mut store, "o", 6, 3, &mut rng).unwrap();
    let beta = store.add("beta", Tensor::new(vec![2, 6], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect()).unwrap()).unwrap();
    let x = Tensor::new(vec![2, 4], vec![0.3, -0.2, 0.9, 0.1, -0.7, 0.4, 0.05, 0.6]).unwrap();
    let y = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let coords: Vec<_> = store.ids().flat_map(|id| (0..store.value(id).numel()).map(move |i| (id, i))).collect();
    let report = finite_diff_check(&mut store, &coords, 1e-5, |s, t| {
        let xv = t.constant(x.clone())?;
        let b = t.param(s, beta)?;
        let h = hidden.forward(t, s, xv, Some(b), ShiftMode::Normalized)?.out;
        let p = out.forward(t, s, h, None)?.out;
        t.cross_entropy(p, &y)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{:e}", report.max_rel_error);
}

#[test]
fn backward_reports_non_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
    let y = tape.tanh(x).unwrap();
    assert!(tape.backward(y).is_err());
}

#[test]
fn repeated_runs_are_bit_identical() {
    let build = || {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![0.1, 0.2, -0.3, 1.7, -2.2, 0.05]).unwrap()).unwrap();
        let s = tape.softmax(x).unwrap();
        let l = tape.log(s).unwrap();
        let t = tape.sum(l).unwrap();
        tape.value(t).item().to_bits()
    };
    assert_eq!(build(), build());
}

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 2..9)
}

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_distribution(row in logits(), c in -50.0f64..50.0) {
        let n = row.len();
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::new(vec![1, n], row.clone()).unwrap()).unwrap();
        let p = tape.softmax(x).unwrap();
        let shifted = tape.constant(Tensor::new(vec![1, n], row.iter().map(|v| v + c).collect()).unwrap()).unwrap();
        let q = tape.softmax(shifted).unwrap();
        let (p, q) = (tape.value(p).clone(), tape.value(q).clone());
        prop_assert!(p.data().iter().all(|&v| v >= 0.0));
        prop_assert!((p.sum() - 1.0).abs() < 1e-9);
        prop_assert!(p.max_abs_diff(&q) < 1e-9);
    }

    #[test]
    fn stop_gradient_zeroes_everything_upstream(vals in prop::collection::vec(-3.0f64..3.0, 1..6)) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(vals.clone())).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, id).unwrap();
        let t = tape.tanh(x).unwrap();
        let s = tape.stop_grad(t).unwrap();
        let blocked = tape.mul(s, s).unwrap();
        let root = tape.sum(blocked).unwrap();
        let g = tape.backward(root).unwrap();
        prop_assert!(g.param_grad(id, &[vals.len()]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csnt_v2_round_trips_bit_exactly(vals in prop::collection::vec(-1e6f64..1e6, 1..40)) {
        let n = vals.len();
        let t = Tensor::new(vec![n], vals).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Precision::F64).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn csnt_v1_stores_f32(vals in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let n = vals.len();
        let t = Tensor::new(vec![1, n], vals.clone()).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Precision::F32).unwrap();
        prop_assert_eq!(&buf[..6], &[b'C', b'S', b'N', b'T', 1, 2]);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        for (a, b) in back.data().iter().zip(&vals) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }
}
