//! Central-difference verification of backward rules.

use std::cell::Cell;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

thread_local! {
    // Diagnostic knob: scales the VJP of the elementwise multiply so the
    // checker itself can be validated against a known-bad backward rule.
    static VJP_FAULT: Cell<f64> = const { Cell::new(1.0) };
}

/// Corrupts the multiply backward rule by `scale` (e.g. 1.1 biases gradients
/// by +10%). Used to prove the gradient checker reports failures.
pub fn inject_vjp_fault(scale: f64) {
    VJP_FAULT.with(|f| f.set(scale));
}

/// Restores the correct backward rules.
pub fn clear_vjp_fault() {
    VJP_FAULT.with(|f| f.set(1.0));
}

pub(crate) fn fault_scale<S: Scalar>() -> S {
    S::from_f64(VJP_FAULT.with(|f| f.get()))
}

/// Compares the analytic gradient of a scalar-valued function against central
/// differences and returns the max relative error over all coordinates:
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`.
///
/// `x` must be a trainable leaf; it is perturbed in place and restored.
pub fn finite_difference_check<S: Scalar>(
    f: &dyn Fn(&Tensor<S>) -> Result<Tensor<S>>,
    x: &Tensor<S>,
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::invalid("finite_difference_check", "eps must be positive"));
    }
    if !x.requires_grad() {
        return Err(Error::invalid("finite_difference_check", "x must be a trainable leaf"));
    }
    x.zero_grad();
    let y = f(x)?;
    if y.len() != 1 {
        return Err(Error::invalid("finite_difference_check", "f must return a scalar"));
    }
    y.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![S::ZERO; x.len()]);

    let base = x.to_vec();
    let eval = |data: Vec<S>| -> Result<f64> {
        x.set_data(data)?;
        let out = super::no_grad(|| f(x))?.item()?.to_f64();
        if !out.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_check" });
        }
        Ok(out)
    };

    let mut max_err = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] = S::from_f64(plus[i].to_f64() + eps);
        let fp = eval(plus)?;
        let mut minus = base.clone();
        minus[i] = S::from_f64(minus[i].to_f64() - eps);
        let fm = eval(minus)?;
        let central = (fp - fm) / (2.0 * eps);
        let a = analytic[i].to_f64();
        let err = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        if err > max_err {
            max_err = err;
        }
    }
    x.set_data(base)?;
    x.zero_grad();
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_near_exact() {
        let x = Tensor::param(&[6], vec![0.3f64, -1.2, 2.0, 0.7, -0.1, 1.5]).unwrap();
        let err = finite_difference_check(&|x| x.mul(x)?.sum(), &x, 1e-4).unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let x = Tensor::param(&[4], vec![0.5f64, 1.0, -0.4, 2.0]).unwrap();
        inject_vjp_fault(1.1);
        let err = finite_difference_check(&|x| x.mul(x)?.sum(), &x, 1e-4).unwrap();
        clear_vjp_fault();
        assert!(err >= 1e-2, "fault not detected, err = {err}");
    }

    #[test]
    fn gelu_and_layer_norm_pass() {
        let x = Tensor::param(&[4, 2, 2], (0..16).map(|i| (i as f64) * 0.17 - 1.0).collect()).unwrap();
        let gamma = Tensor::param(&[4], vec![1.1f64, 0.9, 1.0, 1.2]).unwrap();
        let beta = Tensor::param(&[4], vec![0.1f64, -0.2, 0.0, 0.05]).unwrap();
        let err = finite_difference_check(
            &|x| x.layer_norm_chw(&gamma, &beta, 1e-5)?.gelu()?.mean(),
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }
}
