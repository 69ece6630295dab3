//! Global bilateral motion estimation.
//!
//! A stride-8 windowed-attention encoder extracts global features from each
//! frame (shared weights). Matching costs over a symmetric displacement
//! window and the bilateral attention stack feed a small convolutional head
//! that predicts the field toward frame 1; the field toward frame 0 is its
//! exact negation.

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    bilateral_attention_stack, swin_block, AttentionConfig, StackAblation, StackWeights, SwinWeights,
};
use crate::costvol::{bilateral_correlation, CostVolume, DisplacementWindow};
use crate::error::{Error, Result};
use crate::nn::Conv2dLayer;
use crate::tensor::{ParamStore, Scalar, Tensor};
use crate::warp::BilateralPair;

/// Encoder geometry: three stride-2 stages, total stride 8.
#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub widths: [usize; 3],
    pub heads: [usize; 3],
    pub window: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { widths: [32, 64, 96], heads: [2, 4, 4], window: 4, mlp_ratio: 2 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (w_, h_) in self.widths.iter().zip(self.heads.iter()) {
            if *h_ == 0 || w_ % h_ != 0 {
                return Err(Error::Config(format!("encoder width {w_} not divisible by heads {h_}")));
            }
        }
        Ok(())
    }

    fn stage_cfg(&self, i: usize) -> AttentionConfig {
        AttentionConfig {
            channels: self.widths[i],
            heads: self.heads[i],
            window_radius: 1,
            swin_window: self.window,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

/// Full global-estimator configuration.
#[derive(Debug, Clone)]
pub struct BiformerConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    /// Displacement radius of the global cost volume.
    pub correlation_radius: usize,
    /// Scale the cost volume by `1/sqrt(C)` before the prediction head.
    pub normalize_costs: bool,
    pub ablation: StackAblation,
}

impl Default for BiformerConfig {
    fn default() -> Self {
        BiformerConfig {
            encoder: EncoderConfig::default(),
            attention: AttentionConfig::default(),
            correlation_radius: 4,
            normalize_costs: true,
            ablation: StackAblation::default(),
        }
    }
}

struct EncoderStage<S: Scalar> {
    embed: Conv2dLayer<S>,
    block: SwinWeights<S>,
}

pub struct BiformerWeights<S: Scalar> {
    stages: Vec<EncoderStage<S>>,
    stack: StackWeights<S>,
    head: [Conv2dLayer<S>; 3],
    cfg: BiformerConfig,
}

impl<S: Scalar> BiformerWeights<S> {
    pub fn build(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &BiformerConfig,
    ) -> Result<Self> {
        cfg.encoder.validate()?;
        cfg.attention.validate()?;
        if cfg.attention.channels != cfg.encoder.widths[2] {
            return Err(Error::Config(format!(
                "attention channels {} must match the last encoder width {}",
                cfg.attention.channels, cfg.encoder.widths[2]
            )));
        }
        let mut stages = Vec::with_capacity(3);
        let mut c_in = 3usize;
        for i in 0..3 {
            let c_out = cfg.encoder.widths[i];
            let embed = Conv2dLayer::build(
                store,
                rng,
                &format!("{prefix}.encoder.stage{i}.embed"),
                c_in,
                c_out,
                3,
                2,
                1,
                true,
            )?;
            let block = SwinWeights::build(
                store,
                rng,
                &format!("{prefix}.encoder.stage{i}.attn"),
                &cfg.encoder.stage_cfg(i),
            )?;
            stages.push(EncoderStage { embed, block });
            c_in = c_out;
        }
        let stack = StackWeights::build(store, rng, &format!("{prefix}.stack"), &cfg.attention, cfg.ablation)?;
        let d_count = DisplacementWindow::new(cfg.correlation_radius).len();
        let head_in = d_count + cfg.attention.channels;
        let head = [
            Conv2dLayer::build(store, rng, &format!("{prefix}.head.conv0"), head_in, 128, 3, 1, 1, true)?,
            Conv2dLayer::build(store, rng, &format!("{prefix}.head.conv1"), 128, 64, 3, 1, 1, true)?,
            Conv2dLayer::build(store, rng, &format!("{prefix}.head.conv2"), 64, 2, 3, 1, 1, true)?,
        ];
        Ok(BiformerWeights { stages, stack, head, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &BiformerConfig {
        &self.cfg
    }
}

/// Encodes a frame to `[C, H/8, W/8]` global features. Both frames share the
/// same weights.
pub fn encode_global<S: Scalar>(frame: &Tensor<S>, weights: &BiformerWeights<S>) -> Result<Tensor<S>> {
    let s = frame.shape();
    if s.len() != 3 {
        return Err(Error::shape("encode_global", format!("expected [C, H, W], got {:?}", s)));
    }
    if s[1] % 8 != 0 || s[2] % 8 != 0 {
        return Err(Error::shape("encode_global", format!("dims {}x{} not divisible by 8", s[1], s[2])));
    }
    let mut x = frame.clone();
    for (i, stage) in weights.stages.iter().enumerate() {
        x = stage.embed.apply(&x)?.relu()?;
        x = swin_block(&x, &stage.block, &weights.cfg.encoder.stage_cfg(i), false)?;
    }
    Ok(x)
}

/// Predicts the bilateral pair from the cost volume and bilateral feature.
/// The head sees `concat(costs as channels, Z)`; its 2-channel output is the
/// field toward frame 1.
pub fn predict_global_motion<S: Scalar>(
    costs: &CostVolume<S>,
    bilateral_feature: &Tensor<S>,
    weights: &BiformerWeights<S>,
) -> Result<BilateralPair<S>> {
    let (h, w) = (costs.height(), costs.width());
    let zs = bilateral_feature.shape();
    if zs.len() != 3 || zs[1] != h || zs[2] != w {
        return Err(Error::shape(
            "predict_global_motion",
            format!("feature {:?} misaligned with {}x{} volume", zs, h, w),
        ));
    }
    // [H, W, D] -> [D, H, W] channels for the conv head.
    let mut cost_chans = costs.data.permute(&[2, 0, 1])?;
    if weights.cfg.normalize_costs {
        let c = weights.cfg.attention.channels as f64;
        cost_chans = cost_chans.mul_scalar(S::from_f64(1.0 / c.sqrt()))?;
    }
    let x = Tensor::concat(&[&cost_chans, bilateral_feature], 0)?;
    let x = weights.head[0].apply(&x)?.relu()?;
    let x = weights.head[1].apply(&x)?.relu()?;
    let v1 = weights.head[2].apply(&x)?;
    BilateralPair::from_t1(v1, 3)
}

/// Full global estimation: encode both frames, correlate, run the attention
/// stack, and predict the symmetric pair at 1/8 scale.
pub fn biformer_forward<S: Scalar>(
    frame0: &Tensor<S>,
    frame1: &Tensor<S>,
    weights: &BiformerWeights<S>,
) -> Result<BilateralPair<S>> {
    if frame0.shape() != frame1.shape() {
        return Err(Error::shape("biformer_forward", format!("{:?} vs {:?}", frame0.shape(), frame1.shape())));
    }
    let f0 = encode_global(frame0, weights)?;
    let f1 = encode_global(frame1, weights)?;
    let costs = bilateral_correlation(&f0, &f1, weights.cfg.correlation_radius)?;
    let stack_out = bilateral_attention_stack(&f0, &f1, &weights.stack, &weights.cfg.attention)?;
    predict_global_motion(&costs, &stack_out.bilateral_feature, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> BiformerConfig {
        BiformerConfig {
            encoder: EncoderConfig { widths: [8, 12, 16], heads: [2, 2, 2], window: 4, mlp_ratio: 2 },
            attention: AttentionConfig { channels: 16, heads: 2, window_radius: 2, swin_window: 4, mlp_ratio: 2 },
            correlation_radius: 2,
            normalize_costs: true,
            ablation: StackAblation::default(),
        }
    }

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[3, h, w], data).unwrap()
    }

    #[test]
    fn encoder_stride_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut store = ParamStore::<f64>::new();
        let weights = BiformerWeights::build(&mut store, &mut rng, "bi", &small_cfg()).unwrap();
        let frame = random_frame(&mut rng, 32, 64);
        let f = encode_global(&frame, &weights).unwrap();
        assert_eq!(f.shape(), &[16, 4, 8]);
        assert!(encode_global(&random_frame(&mut rng, 30, 64), &weights).is_err());
    }

    #[test]
    fn identical_frames_identical_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut store = ParamStore::<f64>::new();
        let weights = BiformerWeights::build(&mut store, &mut rng, "bi", &small_cfg()).unwrap();
        let frame = random_frame(&mut rng, 16, 16);
        let fa = encode_global(&frame, &weights).unwrap();
        let fb = encode_global(&frame, &weights).unwrap();
        assert_eq!(fa.to_vec(), fb.to_vec());
    }

    #[test]
    fn forward_shapes_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::<f64>::new();
        let weights = BiformerWeights::build(&mut store, &mut rng, "bi", &small_cfg()).unwrap();
        let f0 = random_frame(&mut rng, 16, 24);
        let f1 = random_frame(&mut rng, 16, 24);
        let pair = biformer_forward(&f0, &f1, &weights).unwrap();
        assert_eq!(pair.to_frame1.data.shape(), &[2, 2, 3]);
        assert_eq!(pair.scale_log2(), 3);
        assert!(pair.is_symmetric());
        assert!(pair.to_frame1.data.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_head_gives_zero_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut store = ParamStore::<f64>::new();
        let weights = BiformerWeights::build(&mut store, &mut rng, "bi", &small_cfg()).unwrap();
        // Zero the last head conv; the pair must be exactly zero.
        weights.head[2].weight.set_data(vec![0.0; weights.head[2].weight.len()]).unwrap();
        if let Some(b) = &weights.head[2].bias {
            b.set_data(vec![0.0; b.len()]).unwrap();
        }
        let f0 = random_frame(&mut rng, 16, 16);
        let f1 = random_frame(&mut rng, 16, 16);
        let pair = biformer_forward(&f0, &f1, &weights).unwrap();
        assert!(pair.to_frame1.data.data().iter().all(|&v| v == 0.0));
        assert!(pair.to_frame0.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_reload_reproduces_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut store = ParamStore::<f32>::new();
        let cfg = small_cfg();
        let weights = BiformerWeights::build(&mut store, &mut rng, "bi", &cfg).unwrap();
        let f0 = {
            let data: Vec<f32> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::from_vec(&[3, 16, 16], data).unwrap()
        };
        let pair = biformer_forward(&f0, &f0, &weights).unwrap();

        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        let mut reloaded = ParamStore::<f32>::read_from(bytes.as_slice()).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(999);
        let weights2 = BiformerWeights::build(&mut reloaded, &mut rng2, "bi", &cfg).unwrap();
        let pair2 = biformer_forward(&f0, &f0, &weights2).unwrap();
        assert_eq!(pair.to_frame1.data.to_vec(), pair2.to_frame1.data.to_vec());
    }
}
