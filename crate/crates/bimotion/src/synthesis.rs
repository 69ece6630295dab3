//! Frame synthesis: a shared encoder builds per-frame feature pyramids at
//! 1/2, 1/4, and 1/8 scale; the refined motion fields are downsampled per
//! level and used to warp both pyramids; the decoder fuses the warped skips
//! coarse-to-fine and a final sub-pixel stage restores full resolution.
//!
//! The output is a direct prediction (no residual blend of the warped input
//! frames) and is left unclamped; clamping to the valid intensity range
//! happens at image export.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Conv2dLayer;
use crate::tensor::{ParamStore, Scalar, Tensor};
use crate::warp::{backward_warp, rescale_field, BilateralPair, RescaleFactor};

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    /// Encoder widths per level (1/2, 1/4, 1/8).
    pub widths: [usize; 3],
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig { widths: [32, 64, 96] }
    }
}

struct Level<S: Scalar> {
    down: Conv2dLayer<S>,
    conv: Conv2dLayer<S>,
}

pub struct SynthesisWeights<S: Scalar> {
    levels: Vec<Level<S>>,
    fuse: Vec<Conv2dLayer<S>>,
    head: Conv2dLayer<S>,
    cfg: SynthesisConfig,
}

impl<S: Scalar> SynthesisWeights<S> {
    pub fn build(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &SynthesisConfig,
    ) -> Result<Self> {
        let w = cfg.widths;
        let mut levels = Vec::with_capacity(3);
        let mut c_in = 3usize;
        for (l, &c_out) in w.iter().enumerate() {
            levels.push(Level {
                down: Conv2dLayer::build(store, rng, &format!("{prefix}.enc{l}.down"), c_in, c_out, 3, 2, 1, true)?,
                conv: Conv2dLayer::build(store, rng, &format!("{prefix}.enc{l}.conv"), c_out, c_out, 3, 1, 1, true)?,
            });
            c_in = c_out;
        }
        // Decoder: level 2 fuses the two warped deepest skips; levels 1 and 0
        // also take the upsampled carry.
        let fuse = vec![
            Conv2dLayer::build(store, rng, &format!("{prefix}.dec2"), 2 * w[2], w[2], 3, 1, 1, true)?,
            Conv2dLayer::build(store, rng, &format!("{prefix}.dec1"), w[2] + 2 * w[1], w[1], 3, 1, 1, true)?,
            Conv2dLayer::build(store, rng, &format!("{prefix}.dec0"), w[1] + 2 * w[0], w[0], 3, 1, 1, true)?,
        ];
        // Sub-pixel head: 12 channels -> pixel shuffle -> RGB at full
        // resolution. Bias-free so zero weights give a zero image.
        let head = Conv2dLayer::build(store, rng, &format!("{prefix}.head"), w[0], 12, 3, 1, 1, false)?;
        Ok(SynthesisWeights { levels, fuse, head, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &SynthesisConfig {
        &self.cfg
    }

    pub fn zero_head(&self) -> Result<()> {
        self.head.weight.set_data(vec![S::ZERO; self.head.weight.len()])
    }
}

fn encode_pyramid<S: Scalar>(frame: &Tensor<S>, weights: &SynthesisWeights<S>) -> Result<Vec<Tensor<S>>> {
    let mut out = Vec::with_capacity(3);
    let mut x = frame.clone();
    for level in &weights.levels {
        x = level.down.apply(&x)?.relu()?;
        x = level.conv.apply(&x)?.relu()?;
        out.push(x.clone());
    }
    Ok(out)
}

/// Synthesizes the intermediate frame from the two inputs and the refined
/// pair at 1/2 scale. Frames must be `[3, H, W]` with dims divisible by 8.
pub fn synthesize<S: Scalar>(
    frame0: &Tensor<S>,
    frame1: &Tensor<S>,
    motion: &BilateralPair<S>,
    weights: &SynthesisWeights<S>,
) -> Result<Tensor<S>> {
    if frame0.shape() != frame1.shape() {
        return Err(Error::shape("synthesize", format!("{:?} vs {:?}", frame0.shape(), frame1.shape())));
    }
    let s = frame0.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("synthesize", format!("expected [3, H, W], got {:?}", s)));
    }
    let (h, w) = (s[1], s[2]);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::shape("synthesize", format!("dims {h}x{w} not divisible by 8")));
    }
    if motion.scale_log2() != 1 || motion.height() != h / 2 || motion.width() != w / 2 {
        return Err(Error::shape(
            "synthesize",
            format!("motion {}x{} at 1/{}, expected {}x{} at 1/2", motion.height(), motion.width(), 1 << motion.scale_log2(), h / 2, w / 2),
        ));
    }

    let pyr0 = encode_pyramid(frame0, weights)?;
    let pyr1 = encode_pyramid(frame1, weights)?;

    // Per-level fields: 1/2, 1/4, 1/8.
    let mut pairs = Vec::with_capacity(3);
    pairs.push(motion.clone());
    let quarter = rescale_field(&motion.to_frame1, RescaleFactor::Down2)?;
    pairs.push(BilateralPair::from_t1(quarter.data.clone(), quarter.scale_log2)?);
    let eighth = rescale_field(&quarter, RescaleFactor::Down2)?;
    pairs.push(BilateralPair::from_t1(eighth.data.clone(), eighth.scale_log2)?);

    let warp_level = |l: usize| -> Result<(Tensor<S>, Tensor<S>)> {
        Ok((
            backward_warp(&pyr0[l], &pairs[l].to_frame0)?,
            backward_warp(&pyr1[l], &pairs[l].to_frame1)?,
        ))
    };

    let (w2_0, w2_1) = warp_level(2)?;
    let mut carry = weights.fuse[0].apply(&Tensor::concat(&[&w2_0, &w2_1], 0)?)?.relu()?;

    let (w1_0, w1_1) = warp_level(1)?;
    carry = carry.bilinear_resize(h / 4, w / 4)?;
    carry = weights.fuse[1].apply(&Tensor::concat(&[&carry, &w1_0, &w1_1], 0)?)?.relu()?;

    let (w0_0, w0_1) = warp_level(0)?;
    carry = carry.bilinear_resize(h / 2, w / 2)?;
    carry = weights.fuse[2].apply(&Tensor::concat(&[&carry, &w0_0, &w0_1], 0)?)?.relu()?;

    weights.head.apply(&carry)?.pixel_shuffle(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[3, h, w], data).unwrap()
    }

    fn small_weights(rng: &mut ChaCha8Rng) -> SynthesisWeights<f64> {
        let mut store = ParamStore::<f64>::new();
        SynthesisWeights::build(&mut store, rng, "syn", &SynthesisConfig { widths: [8, 12, 16] }).unwrap()
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let weights = small_weights(&mut rng);
        let f0 = random_frame(&mut rng, 16, 24);
        let f1 = random_frame(&mut rng, 16, 24);
        let pair = BilateralPair::from_t1(Tensor::<f64>::zeros(&[2, 8, 12]), 1).unwrap();
        let out = synthesize(&f0, &f1, &pair, &weights).unwrap();
        assert_eq!(out.shape(), &[3, 16, 24]);
    }

    #[test]
    fn zero_head_gives_zero_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let weights = small_weights(&mut rng);
        weights.zero_head().unwrap();
        let f0 = random_frame(&mut rng, 16, 16);
        let f1 = random_frame(&mut rng, 16, 16);
        let pair = BilateralPair::from_t1(Tensor::<f64>::zeros(&[2, 8, 8]), 1).unwrap();
        let out = synthesize(&f0, &f1, &pair, &weights).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapped_inputs_preserve_shapes() {
        // Swapping (frame0, field toward 0) with (frame1, field toward 1)
        // only permutes concat order inside the skips; shapes and the graph
        // structure are unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let weights = small_weights(&mut rng);
        let f0 = random_frame(&mut rng, 16, 16);
        let f1 = random_frame(&mut rng, 16, 16);
        let v: Vec<f64> = (0..2 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pair = BilateralPair::from_t1(Tensor::from_vec(&[2, 8, 8], v).unwrap(), 1).unwrap();
        let out_a = synthesize(&f0, &f1, &pair, &weights).unwrap();
        // Swapped: the pair toward the frames flips sign.
        let flipped = BilateralPair::from_t1(pair.to_frame0.data.clone(), 1).unwrap();
        let out_b = synthesize(&f1, &f0, &flipped, &weights).unwrap();
        assert_eq!(out_a.shape(), out_b.shape());
        assert!(out_b.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_dims_and_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let weights = small_weights(&mut rng);
        let f = random_frame(&mut rng, 20, 20);
        let pair = BilateralPair::from_t1(Tensor::<f64>::zeros(&[2, 10, 10]), 1).unwrap();
        assert!(synthesize(&f, &f, &pair, &weights).is_err());
        let f = random_frame(&mut rng, 16, 16);
        let wrong_scale = BilateralPair::from_t1(Tensor::<f64>::zeros(&[2, 8, 8]), 2).unwrap();
        assert!(synthesize(&f, &f, &wrong_scale, &weights).is_err());
    }
}
