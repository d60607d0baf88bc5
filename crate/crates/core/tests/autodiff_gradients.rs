mod common;

use adaconv::autodiff::Tape;
use adaconv::{Error, Tensor};
use common::{gradcheck_all_ops, FD_TOL};

#[test]
fn every_op_matches_finite_differences() {
    let report = gradcheck_all_ops(20, 2024).unwrap();
    assert_eq!(report.len(), 17);
    for (op, err) in report {
        assert!(err < FD_TOL, "{op}: relative error {err:e}");
    }
}

#[test]
fn backward_is_deterministic_on_cloned_tapes() {
    let mut tape = Tape::new();
    let mut r = adaconv::rng::seeded(3);
    let x = tape.input(Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r));
    let w = tape.param("w", Tensor::randn(&[4, 3, 3, 3], 0.3, &mut r));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    let y = tape.relu(y).unwrap();
    let y = tape.maxpool2(y).unwrap();
    let loss = tape.mean(y).unwrap();
    let mut copy = tape.clone();
    let a = tape.backward(loss).unwrap();
    let b = copy.backward(loss).unwrap();
    assert_eq!(a.named("w").unwrap().data(), b.named("w").unwrap().data());
    assert_eq!(a.get(x).unwrap().data(), b.get(x).unwrap().data());
    assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::zeros(&[1, 2, 4, 4]));
    let b = tape.input(Tensor::zeros(&[1, 2, 3, 4]));
    match tape.add(a, b) {
        Err(Error::Shape { op, .. }) => assert_eq!(op, "add"),
        other => panic!("expected shape error, got {other:?}"),
    }
    let odd = tape.input(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(tape.maxpool2(odd), Err(Error::Shape { .. })));
}

#[test]
fn maxpool_ties_route_to_first_element() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = tape.maxpool2(x).unwrap();
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}
