//! First-order adaptive optimizer (Adam) over a fixed parameter list.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub struct Adam<S: Scalar> {
    params: Vec<Tensor<S>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: Vec<Tensor<S>>, lr: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Adam { params, m, v, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Applies one update from the accumulated gradients (missing gradients
    /// count as zero) and clears them.
    pub fn step(&mut self) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let mut data: Vec<S> = p.to_vec();
            for (j, g) in grad.iter().enumerate() {
                let g = g.to_f64();
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: "adam" });
                }
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let upd = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                data[j] = S::from_f64(data[j].to_f64() - upd);
            }
            p.set_data(data)?;
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        // Minimize (x - 3)^2 elementwise.
        let x = Tensor::param(&[4], vec![0.0f64; 4]).unwrap();
        let mut opt = Adam::new(vec![x.clone()], 0.1);
        for _ in 0..300 {
            let target = Tensor::from_vec(&[4], vec![3.0; 4]).unwrap();
            let diff = x.sub(&target).unwrap();
            let loss = diff.mul(&diff).unwrap().mean().unwrap();
            loss.backward().unwrap();
            opt.step().unwrap();
        }
        for v in x.to_vec() {
            assert!((v - 3.0).abs() < 1e-2, "x = {v}");
        }
    }

    #[test]
    fn step_without_grads_is_a_no_op() {
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        let mut opt = Adam::new(vec![x.clone()], 0.1);
        opt.step().unwrap();
        assert_eq!(x.to_vec(), vec![1.0, 2.0]);
    }
}
