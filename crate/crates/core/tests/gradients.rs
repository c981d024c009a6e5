//! Reverse-mode gradients of every op and both losses against central
//! finite differences in f64.

use densecount_testkit::gradcheck::{cases, STEP};

const SEEDS: u64 = 24;
const TOLERANCE: f64 = 1e-6;

#[test]
fn every_op_matches_finite_differences() {
    assert_eq!(STEP, 1e-5);
    let mut failures = Vec::new();
    for case in cases() {
        let worst = (0..SEEDS).map(|s| (case.run)(s)).fold(0.0, f64::max);
        println!("{:<26} max relative error {worst:.3e}", case.name);
        if worst >= TOLERANCE {
            failures.push((case.name, worst));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}
