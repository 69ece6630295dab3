//! Weight initialization: truncated normal for projection matrices and
//! attention bias tables, Kaiming fan-in for convolutions, zeros for biases.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Scalar;

/// Initialization recipe attached to a parameter at creation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Truncated normal (resampled beyond two standard deviations).
    TruncNormal { std: f64 },
    /// Kaiming fan-in for conv weights shaped `[Cout, Cin, kh, kw]`.
    KaimingConv,
}

pub fn trunc_normal<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<S> {
    (0..n)
        .map(|_| {
            loop {
                // Box-Muller; resample outside +/- 2 sigma.
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                if z.abs() <= 2.0 {
                    return S::from_f64(z * std);
                }
            }
        })
        .collect()
}

pub fn kaiming_conv<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<S> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    (0..n).map(|_| S::from_f64(rng.gen_range(-bound..bound))).collect()
}

pub(crate) fn materialize<S: Scalar>(init: Init, rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<S> {
    let n: usize = shape.iter().product();
    match init {
        Init::Zeros => vec![S::ZERO; n],
        Init::Ones => vec![S::ONE; n],
        Init::TruncNormal { std } => trunc_normal(rng, n, std),
        Init::KaimingConv => kaiming_conv(rng, shape),
    }
}
