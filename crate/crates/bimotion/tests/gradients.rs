//! Full finite-difference verification of every registered backward rule,
//! three seeds per check, plus the negative control (an injected fault must
//! be detected).

use bimotion::gradsuite::{run_suite, FD_EPS};
use bimotion::tensor::{clear_vjp_fault, finite_difference_check, inject_vjp_fault, Tensor};

#[test]
fn every_backward_rule_matches_central_differences() {
    let outcomes = run_suite(None, &[11, 23, 47]).expect("suite runs");
    assert!(outcomes.len() >= 3 * 25, "suite unexpectedly small: {}", outcomes.len());
    let mut failed = Vec::new();
    for o in &outcomes {
        println!(
            "gradcheck {:40} seed {:3}  max_err {:.3e}  tol {:.0e}  {}",
            o.name,
            o.seed,
            o.max_err,
            o.tolerance,
            if o.pass { "ok" } else { "FAIL" }
        );
        if !o.pass {
            failed.push(format!("{} (seed {}): {:.3e}", o.name, o.seed, o.max_err));
        }
    }
    assert!(failed.is_empty(), "gradient checks failed:\n{}", failed.join("\n"));
}

#[test]
fn corrupted_backward_rule_is_flagged() {
    let x = Tensor::param(&[6], vec![0.4f64, -0.9, 1.2, 0.3, -1.5, 0.8]).unwrap();
    inject_vjp_fault(1.1);
    let err = finite_difference_check(&|x| x.mul(x)?.sum(), &x, FD_EPS).unwrap();
    clear_vjp_fault();
    assert!(err >= 1e-2, "negative control: biased gradient only measured {err}");
}
