//! Recurrent local motion refinement.
//!
//! One weight-shared pass doubles the field resolution: the input pair is
//! bilinearly upsampled (values doubled), blockwise bilateral cost volumes
//! are computed around the motion-shifted centers on shallow block
//! embeddings, and a small decoder predicts a residual field added to the
//! upsampled input. The output pair stays symmetric by construction.

use rand_chacha::ChaCha8Rng;

use crate::costvol::{bbcv, DisplacementWindow};
use crate::error::{Error, Result};
use crate::nn::Conv2dLayer;
use crate::tensor::{ParamStore, Scalar, Tensor};
use crate::warp::{backward_warp, rescale_field, BilateralPair, RescaleFactor};

#[derive(Debug, Clone)]
pub struct UpsamplerConfig {
    pub shallow_channels: usize,
    pub embed_channels: usize,
    pub match_channels: usize,
    pub aggregate_channels: usize,
    /// Displacement radius of the blockwise volumes.
    pub radius: usize,
    /// Largest block index; blocks 0..=max_block_index are used.
    pub max_block_index: usize,
}

impl Default for UpsamplerConfig {
    fn default() -> Self {
        UpsamplerConfig {
            shallow_channels: 32,
            embed_channels: 32,
            match_channels: 32,
            aggregate_channels: 64,
            radius: 2,
            max_block_index: 2,
        }
    }
}

impl UpsamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_block_index > 2 {
            return Err(Error::Config("block index must stay within 0..=2".into()));
        }
        if self.radius == 0 {
            return Err(Error::Config("blockwise search radius must be positive".into()));
        }
        Ok(())
    }

    fn blocks(&self) -> usize {
        self.max_block_index + 1
    }
}

/// One shared weight set, applied at every refinement scale.
pub struct UpsamplerWeights<S: Scalar> {
    shallow: [Conv2dLayer<S>; 2],
    embed: Vec<Conv2dLayer<S>>,
    matching: Vec<Conv2dLayer<S>>,
    aggregate: Conv2dLayer<S>,
    decoder: [Conv2dLayer<S>; 4],
    cfg: UpsamplerConfig,
}

impl<S: Scalar> UpsamplerWeights<S> {
    pub fn build(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &UpsamplerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let cs = cfg.shallow_channels;
        let cb = cfg.embed_channels;
        let cm = cfg.match_channels;
        let d_count = DisplacementWindow::new(cfg.radius).len();
        let shallow = [
            Conv2dLayer::build(store, rng, &format!("{prefix}.shallow.conv0"), 3, 16, 3, 1, 1, true)?,
            Conv2dLayer::build(store, rng, &format!("{prefix}.shallow.conv1"), 16, cs, 3, 1, 1, true)?,
        ];
        let embed = (0..cfg.blocks())
            .map(|k| {
                let kernel = 1usize << k;
                Conv2dLayer::build(
                    store,
                    rng,
                    &format!("{prefix}.embed.k{k}"),
                    cs,
                    cb,
                    kernel,
                    kernel,
                    0,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let matching = (0..cfg.blocks())
            .map(|k| {
                Conv2dLayer::build(
                    store,
                    rng,
                    &format!("{prefix}.matching.k{k}"),
                    d_count + 2,
                    cm,
                    3,
                    1,
                    1,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let aggregate = Conv2dLayer::build(
            store,
            rng,
            &format!("{prefix}.aggregate"),
            cm * cfg.blocks(),
            cfg.aggregate_channels,
            1,
            1,
            0,
            true,
        )?;
        let dec_in = 2 * cs + cfg.aggregate_channels + 2;
        let decoder = [
            Conv2dLayer::build(store, rng, &format!("{prefix}.decoder.conv0"), dec_in, 96, 3, 2, 1, true)?,
            Conv2dLayer::build(store, rng, &format!("{prefix}.decoder.conv1"), 96, 96, 3, 1, 1, true)?,
            Conv2dLayer::build(store, rng, &format!("{prefix}.decoder.conv2"), 96, 64, 3, 1, 1, true)?,
            // Residual head starts at zero so an untrained pass reduces to
            // plain bilinear upsampling.
            Conv2dLayer::build_zero(store, rng, &format!("{prefix}.decoder.conv3"), 64, 8, 3, 1, 1, true)?,
        ];
        Ok(UpsamplerWeights { shallow, embed, matching, aggregate, decoder, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &UpsamplerConfig {
        &self.cfg
    }

    /// Zeroes every decoder conv (diagnostic: the pass then returns exactly
    /// the upsampled input field).
    pub fn zero_decoder(&self) -> Result<()> {
        for layer in &self.decoder {
            layer.weight.set_data(vec![S::ZERO; layer.weight.len()])?;
            if let Some(b) = &layer.bias {
                b.set_data(vec![S::ZERO; b.len()])?;
            }
        }
        Ok(())
    }

    /// A representative parameter handle, used to assert weight sharing
    /// between passes.
    pub fn identity_probe(&self) -> Tensor<S> {
        self.shallow[0].weight.clone()
    }
}

/// Shallow per-frame features at the pass's working scale.
pub fn shallow_encode<S: Scalar>(frame: &Tensor<S>, weights: &UpsamplerWeights<S>) -> Result<Tensor<S>> {
    let x = weights.shallow[0].apply(frame)?.relu()?;
    weights.shallow[1].apply(&x)?.relu()
}

/// Block embeddings `S^k` with kernel size = stride = `2^k`.
pub fn block_embed<S: Scalar>(features: &Tensor<S>, weights: &UpsamplerWeights<S>) -> Result<Vec<Tensor<S>>> {
    let s = features.shape();
    let div = 1usize << weights.cfg.max_block_index;
    if s[1] % div != 0 || s[2] % div != 0 {
        return Err(Error::shape(
            "block_embed",
            format!("{}x{} not divisible by {div}", s[1], s[2]),
        ));
    }
    weights.embed.iter().map(|layer| layer.apply(features)).collect()
}

/// Concatenates each cost volume with the field toward frame 1, convolves,
/// and aggregates the per-block results into one matching feature map.
pub fn matching_features<S: Scalar>(
    volumes: &[Tensor<S>],
    field_t1: &Tensor<S>,
    weights: &UpsamplerWeights<S>,
) -> Result<Tensor<S>> {
    if volumes.len() != weights.cfg.blocks() {
        return Err(Error::invalid(
            "matching_features",
            format!("expected {} volumes, got {}", weights.cfg.blocks(), volumes.len()),
        ));
    }
    let fs = field_t1.shape();
    let mut per_block = Vec::with_capacity(volumes.len());
    for (k, vol) in volumes.iter().enumerate() {
        let vs = vol.shape();
        if vs[1] != fs[1] || vs[2] != fs[2] {
            return Err(Error::shape(
                "matching_features",
                format!("volume {k} {:?} misaligned with field {:?}", vs, fs),
            ));
        }
        let x = Tensor::concat(&[vol, field_t1], 0)?;
        per_block.push(weights.matching[k].apply(&x)?.relu()?);
    }
    let refs: Vec<&Tensor<S>> = per_block.iter().collect();
    weights.aggregate.apply(&Tensor::concat(&refs, 0)?)
}

/// One refinement pass: takes the pair at scale `1/2^k` and the frames
/// downsampled to `1/2^(k-1)`, and returns the refined pair at `1/2^(k-1)`.
pub fn refine_pass<S: Scalar>(
    pair: &BilateralPair<S>,
    frame0: &Tensor<S>,
    frame1: &Tensor<S>,
    weights: &UpsamplerWeights<S>,
) -> Result<BilateralPair<S>> {
    if pair.scale_log2() == 0 {
        return Err(Error::invalid("refine_pass", "field already at full resolution"));
    }
    let (fh, fw) = (pair.height() * 2, pair.width() * 2);
    for (name, f) in [("frame0", frame0), ("frame1", frame1)] {
        let s = f.shape();
        if s.len() != 3 || s[1] != fh || s[2] != fw {
            return Err(Error::shape(
                "refine_pass",
                format!("{name} {:?} but pass works at {}x{}", s, fh, fw),
            ));
        }
    }
    // Bilinearly upsampled input field at the output scale.
    let up_t1 = rescale_field(&pair.to_frame1, RescaleFactor::Up2)?;
    let up_pair = BilateralPair::from_t1(up_t1.data.clone(), up_t1.scale_log2)?;

    let s0 = shallow_encode(frame0, weights)?;
    let s1 = shallow_encode(frame1, weights)?;
    let e0 = block_embed(&s0, weights)?;
    let e1 = block_embed(&s1, weights)?;

    let mut volumes = Vec::with_capacity(weights.cfg.blocks());
    for k in 0..weights.cfg.blocks() {
        let vol = bbcv(&e0[k], &e1[k], &up_pair, k, weights.cfg.radius)?;
        volumes.push(vol.data.permute(&[2, 0, 1])?);
    }
    let matching = matching_features(&volumes, &up_pair.to_frame1.data, weights)?;

    let warped0 = backward_warp(&s0, &up_pair.to_frame0)?;
    let warped1 = backward_warp(&s1, &up_pair.to_frame1)?;

    let x = Tensor::concat(&[&warped0, &warped1, &matching, &up_pair.to_frame1.data], 0)?;
    let x = weights.decoder[0].apply(&x)?.relu()?;
    let x = weights.decoder[1].apply(&x)?.relu()?;
    let x = weights.decoder[2].apply(&x)?.relu()?;
    let residual = weights.decoder[3].apply(&x)?.pixel_shuffle(2)?;

    let v1 = up_pair.to_frame1.data.add(&residual)?;
    BilateralPair::from_t1(v1, up_t1.scale_log2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::{constant_flow, Endpoint};
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> UpsamplerConfig {
        UpsamplerConfig {
            shallow_channels: 8,
            embed_channels: 8,
            match_channels: 8,
            aggregate_channels: 16,
            radius: 1,
            max_block_index: 2,
        }
    }

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[3, h, w], data).unwrap()
    }

    #[test]
    fn shallow_and_embed_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut store = ParamStore::<f64>::new();
        let weights = UpsamplerWeights::build(&mut store, &mut rng, "up", &tiny_cfg()).unwrap();
        let frame = random_frame(&mut rng, 32, 32);
        let s = shallow_encode(&frame, &weights).unwrap();
        assert_eq!(s.shape(), &[8, 32, 32]);
        let blocks = block_embed(&s, &weights).unwrap();
        assert_eq!(blocks[0].shape(), &[8, 32, 32]);
        assert_eq!(blocks[1].shape(), &[8, 16, 16]);
        assert_eq!(blocks[2].shape(), &[8, 8, 8]);
    }

    #[test]
    fn embed_constant_input_constant_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut store = ParamStore::<f64>::new();
        let weights = UpsamplerWeights::build(&mut store, &mut rng, "up", &tiny_cfg()).unwrap();
        let flat = Tensor::<f64>::full(&[8, 8, 8], 0.37).unwrap();
        for k in 0..3 {
            let e = weights.embed[k].apply(&flat).unwrap();
            let d = e.data();
            let per_ch = e.len() / 8;
            for ch in 0..8 {
                let v0 = d[ch * per_ch];
                assert!(d[ch * per_ch..(ch + 1) * per_ch].iter().all(|v| (v - v0).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn embed_matches_naive_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut store = ParamStore::<f64>::new();
        let weights = UpsamplerWeights::build(&mut store, &mut rng, "up", &tiny_cfg()).unwrap();
        let x_data: Vec<f64> = (0..8 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[8, 8, 8], x_data.clone()).unwrap();
        for k in 0..3usize {
            let got = weights.embed[k].apply(&x).unwrap();
            let kernel = 1 << k;
            let wt = weights.embed[k].weight.to_vec();
            let mut want = crate::oracle::naive_conv2d(&x_data, 8, 8, 8, &wt, 8, kernel, kernel, kernel, 0);
            // Add bias.
            let bias = weights.embed[k].bias.as_ref().unwrap().to_vec();
            let per_ch = want.len() / 8;
            for ch in 0..8 {
                for v in want[ch * per_ch..(ch + 1) * per_ch].iter_mut() {
                    *v += bias[ch];
                }
            }
            assert!(crate::oracle::max_rel_diff(&got.to_vec(), &want) < 1e-10, "k = {k}");
        }
    }

    #[test]
    fn zero_decoder_reduces_to_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut store = ParamStore::<f64>::new();
        let weights = UpsamplerWeights::build(&mut store, &mut rng, "up", &tiny_cfg()).unwrap();
        weights.zero_decoder().unwrap();
        let field = constant_flow::<f64>(8, 8, 0.75, -0.5, 3, Endpoint::TToOne).unwrap();
        let pair = BilateralPair::from_t1(field.data.clone(), 3).unwrap();
        let f0 = random_frame(&mut rng, 16, 16);
        let f1 = random_frame(&mut rng, 16, 16);
        let out = refine_pass(&pair, &f0, &f1, &weights).unwrap();
        assert_eq!(out.scale_log2(), 2);
        let expect = rescale_field(&pair.to_frame1, RescaleFactor::Up2).unwrap();
        let (a, b) = (out.to_frame1.data.data(), expect.data.data());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(out.is_symmetric());
    }

    #[test]
    fn pass_doubles_resolution_and_keeps_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let mut store = ParamStore::<f64>::new();
        let weights = UpsamplerWeights::build(&mut store, &mut rng, "up", &tiny_cfg()).unwrap();
        let v: Vec<f64> = (0..2 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pair = BilateralPair::from_t1(Tensor::from_vec(&[2, 8, 8], v).unwrap(), 3).unwrap();
        let f0 = random_frame(&mut rng, 16, 16);
        let f1 = random_frame(&mut rng, 16, 16);
        let out = refine_pass(&pair, &f0, &f1, &weights).unwrap();
        assert_eq!(out.to_frame1.data.shape(), &[2, 16, 16]);
        assert!(out.is_symmetric());
    }

    #[test]
    fn both_passes_share_one_weight_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut store = ParamStore::<f64>::new();
        let weights = UpsamplerWeights::build(&mut store, &mut rng, "up", &tiny_cfg()).unwrap();
        let v: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let pair = BilateralPair::from_t1(Tensor::from_vec(&[2, 4, 4], v).unwrap(), 3).unwrap();
        let f0a = random_frame(&mut rng, 8, 8);
        let f1a = random_frame(&mut rng, 8, 8);
        let probe_before = weights.identity_probe();
        let mid = refine_pass(&pair, &f0a, &f1a, &weights).unwrap();
        let f0b = random_frame(&mut rng, 16, 16);
        let f1b = random_frame(&mut rng, 16, 16);
        let _fine = refine_pass(&mid, &f0b, &f1b, &weights).unwrap();
        // Same underlying parameter nodes in both passes.
        assert!(probe_before.same_node(&weights.identity_probe()));
    }

    #[test]
    fn rejects_full_resolution_and_misaligned_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let mut store = ParamStore::<f64>::new();
        let weights = UpsamplerWeights::build(&mut store, &mut rng, "up", &tiny_cfg()).unwrap();
        let pair0 = BilateralPair::from_t1(Tensor::<f64>::zeros(&[2, 8, 8]), 0).unwrap();
        let f = random_frame(&mut rng, 16, 16);
        assert!(refine_pass(&pair0, &f, &f, &weights).is_err());
        let pair = BilateralPair::from_t1(Tensor::<f64>::zeros(&[2, 8, 8]), 3).unwrap();
        let bad = random_frame(&mut rng, 8, 8);
        assert!(refine_pass(&pair, &bad, &bad, &weights).is_err());
    }
}
