use viewformer_core::gradcheck::{run_op_suite, run_tiny_model};

const CASES: usize = 100;
const TOLERANCE: f64 = 1e-3;

#[test]
fn every_op_matches_finite_differences() {
    let report = run_op_suite(7, CASES).unwrap();
    for (op, err) in &report {
        println!("{op:<28} {err:.2e}");
        assert!(*err < TOLERANCE, "{op}: relative error {err:e}");
    }
}

#[test]
fn tiny_model_matches_finite_differences() {
    let err = run_tiny_model(11, CASES).unwrap();
    assert!(err < TOLERANCE, "relative error {err:e}");
}
