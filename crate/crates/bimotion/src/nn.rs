//! Small layer wrappers over the tensor ops, each owning its parameters as
//! handles into a [`ParamStore`]. Construction is idempotent: building the
//! same layer name twice returns the same tensors.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Init, ParamStore, Scalar, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Convolution layer with optional bias.
#[derive(Clone)]
pub struct Conv2dLayer<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> Conv2dLayer<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.get_or_init(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::KaimingConv,
            rng,
        )?;
        let bias = if bias {
            Some(store.get_or_init(&format!("{name}.bias"), &[c_out], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Conv2dLayer { weight, bias, stride, padding })
    }

    /// Same layout but zero-initialized weights (residual heads).
    #[allow(clippy::too_many_arguments)]
    pub fn build_zero(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.get_or_init(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::Zeros,
            rng,
        )?;
        let bias = if bias {
            Some(store.get_or_init(&format!("{name}.bias"), &[c_out], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Conv2dLayer { weight, bias, stride, padding })
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

/// 1x1 projection over channels, truncated-normal initialized.
#[derive(Clone)]
pub struct Projection<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

impl<S: Scalar> Projection<S> {
    pub fn build(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.get_or_init(
            &format!("{name}.weight"),
            &[c_out, c_in, 1, 1],
            Init::TruncNormal { std: 0.02 },
            rng,
        )?;
        let bias = if bias {
            Some(store.get_or_init(&format!("{name}.bias"), &[c_out], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Projection { weight, bias })
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.conv2d(&self.weight, self.bias.as_ref(), 1, 0)
    }
}

/// Channel layer norm with learnable gain and bias.
#[derive(Clone)]
pub struct LayerNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn build(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.get_or_init(&format!("{name}.gamma"), &[channels], Init::Ones, rng)?;
        let beta = store.get_or_init(&format!("{name}.beta"), &[channels], Init::Zeros, rng)?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm_chw(&self.gamma, &self.beta, LN_EPS)
    }
}

/// Two-layer channel MLP with GELU, expansion `ratio`.
#[derive(Clone)]
pub struct Mlp<S: Scalar> {
    pub fc1: Projection<S>,
    pub fc2: Projection<S>,
}

impl<S: Scalar> Mlp<S> {
    pub fn build(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        ratio: usize,
    ) -> Result<Self> {
        let hidden = channels * ratio;
        Ok(Mlp {
            fc1: Projection::build(store, rng, &format!("{name}.fc1"), channels, hidden, true)?,
            fc2: Projection::build(store, rng, &format!("{name}.fc2"), hidden, channels, true)?,
        })
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.fc2.apply(&self.fc1.apply(x)?.gelu()?)
    }
}
