//! End-to-end pipeline: global estimation at 1/8 scale, two recurrent
//! refinement passes (1/4 then 1/2), frame synthesis at full resolution, the
//! two-phase toy training procedure on synthetic translation data, and the
//! deterministic synthetic data generator itself.
//!
//! Interpolation is fixed at the temporal midpoint (t = 1/2); every motion
//! pair the pipeline produces satisfies the symmetric bilateral constraint
//! exactly.

use std::sync::mpsc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, StackAblation};
use crate::biformer::{biformer_forward, BiformerConfig, BiformerWeights, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{photometric_loss, psnr, synthesis_loss, LossConfig};
use crate::optim::Adam;
use crate::synthesis::{synthesize, SynthesisConfig, SynthesisWeights};
use crate::tensor::{no_grad, ParamStore, Scalar, Tensor};
use crate::upsampler::{refine_pass, UpsamplerConfig, UpsamplerWeights};
use crate::warp::{endpoint_error, rescale_field, BilateralPair, MotionField, RescaleFactor};

/// Serializable pipeline configuration (mirrors the TOML config file).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Interpolation time; only the midpoint is supported.
    pub t: f64,
    /// Channels of the global attention stage.
    pub channels: usize,
    pub heads: usize,
    /// Displacement radius of the global correlation volume and the sliding
    /// cross-attention windows.
    pub global_radius: usize,
    pub swin_window: usize,
    pub mlp_ratio: usize,
    pub encoder_widths: [usize; 3],
    pub encoder_heads: [usize; 3],
    /// Scale the cost volume by 1/sqrt(C) before the motion head.
    pub normalize_costs: bool,
    /// Cross-attention block composition.
    pub enable_bca_no_anchor: bool,
    pub enable_bca_anchor_first: bool,
    pub enable_bca_anchor_second: bool,
    /// Blockwise refinement: search radius and largest block index.
    pub bbcv_radius: usize,
    pub max_block_index: usize,
    pub shallow_channels: usize,
    pub embed_channels: usize,
    pub match_channels: usize,
    pub aggregate_channels: usize,
    /// Which of the two upsampler passes actually refine (false = plain
    /// bilinear rescale at that scale).
    pub refine_quarter: bool,
    pub refine_half: bool,
    pub synthesis_widths: [usize; 3],
    /// Charbonnier / census settings.
    pub loss_alpha: f64,
    pub loss_eps: f64,
    pub census_patch: usize,
    /// Toy training.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_size: usize,
    pub train_sizes_refine: Vec<usize>,
    pub max_shift: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            t: 0.5,
            channels: 96,
            heads: 4,
            global_radius: 4,
            swin_window: 4,
            mlp_ratio: 2,
            encoder_widths: [32, 64, 96],
            encoder_heads: [2, 4, 4],
            normalize_costs: true,
            enable_bca_no_anchor: true,
            enable_bca_anchor_first: true,
            enable_bca_anchor_second: true,
            bbcv_radius: 2,
            max_block_index: 2,
            shallow_channels: 32,
            embed_channels: 32,
            match_channels: 32,
            aggregate_channels: 64,
            refine_quarter: true,
            refine_half: true,
            synthesis_widths: [32, 64, 96],
            loss_alpha: 0.5,
            loss_eps: 1e-3,
            census_patch: 7,
            learning_rate: 1e-4,
            batch_size: 2,
            train_size: 64,
            train_sizes_refine: vec![32, 48, 64],
            max_shift: 8.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t != 0.5 {
            return Err(Error::Config(format!("only the midpoint t = 1/2 is supported, got {}", self.t)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for &s in self.train_sizes_refine.iter().chain([&self.train_size]) {
            if s < 32 || s % 16 != 0 {
                return Err(Error::Config(format!(
                    "training size {s} must be >= 32 and a multiple of 16"
                )));
            }
        }
        self.loss_config().validate()?;
        self.biformer_config().encoder.validate()?;
        self.biformer_config().attention.validate()?;
        self.upsampler_config().validate()
    }

    pub fn biformer_config(&self) -> BiformerConfig {
        BiformerConfig {
            encoder: EncoderConfig {
                widths: self.encoder_widths,
                heads: self.encoder_heads,
                window: self.swin_window,
                mlp_ratio: self.mlp_ratio,
            },
            attention: AttentionConfig {
                channels: self.channels,
                heads: self.heads,
                window_radius: self.global_radius,
                swin_window: self.swin_window,
                mlp_ratio: self.mlp_ratio,
            },
            correlation_radius: self.global_radius,
            normalize_costs: self.normalize_costs,
            ablation: StackAblation {
                bca_no_anchor: self.enable_bca_no_anchor,
                bca_anchor_first: self.enable_bca_anchor_first,
                bca_anchor_second: self.enable_bca_anchor_second,
            },
        }
    }

    pub fn upsampler_config(&self) -> UpsamplerConfig {
        UpsamplerConfig {
            shallow_channels: self.shallow_channels,
            embed_channels: self.embed_channels,
            match_channels: self.match_channels,
            aggregate_channels: self.aggregate_channels,
            radius: self.bbcv_radius,
            max_block_index: self.max_block_index,
        }
    }

    pub fn synthesis_config(&self) -> SynthesisConfig {
        SynthesisConfig { widths: self.synthesis_widths }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.loss_alpha,
            eps: self.loss_eps,
            census_patch: self.census_patch,
            ..LossConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// All model weights, backed by one named parameter store.
pub struct PipelineWeights<S: Scalar> {
    pub store: ParamStore<S>,
    pub biformer: BiformerWeights<S>,
    pub upsampler: UpsamplerWeights<S>,
    pub synthesis: SynthesisWeights<S>,
}

impl<S: Scalar> PipelineWeights<S> {
    /// Builds (or rebinds, when the store already holds entries) every
    /// module's weights. Creation order is fixed, so initialization is
    /// deterministic under the config seed.
    pub fn build(cfg: &PipelineConfig, store: ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        let mut store = store;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let biformer = BiformerWeights::build(&mut store, &mut rng, "biformer", &cfg.biformer_config())?;
        let upsampler = UpsamplerWeights::build(&mut store, &mut rng, "upsampler", &cfg.upsampler_config())?;
        let synthesis = SynthesisWeights::build(&mut store, &mut rng, "synthesis", &cfg.synthesis_config())?;
        Ok(PipelineWeights { store, biformer, upsampler, synthesis })
    }

    pub fn init(cfg: &PipelineConfig) -> Result<Self> {
        Self::build(cfg, ParamStore::new())
    }

    pub fn load(cfg: &PipelineConfig, path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::build(cfg, ParamStore::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.store.save(path)
    }
}

/// Everything the pipeline produces for one frame pair.
pub struct InterpolationOutput<S: Scalar> {
    pub frame: Tensor<S>,
    pub global_pair: BilateralPair<S>,
    pub quarter_pair: BilateralPair<S>,
    pub half_pair: BilateralPair<S>,
}

fn replicate_pad<S: Scalar>(t: &Tensor<S>, to_h: usize, to_w: usize) -> Result<Tensor<S>> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if h == to_h && w == to_w {
        return Ok(t.clone());
    }
    let src = t.data();
    let mut data = vec![S::ZERO; c * to_h * to_w];
    for ci in 0..c {
        for y in 0..to_h {
            let sy = y.min(h - 1);
            for x in 0..to_w {
                let sx = x.min(w - 1);
                data[(ci * to_h + y) * to_w + x] = src[(ci * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_vec(&[c, to_h, to_w], data)
}

fn pad_to_multiple(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Upsamples a pair one scale without refinement.
fn plain_upscale<S: Scalar>(pair: &BilateralPair<S>) -> Result<BilateralPair<S>> {
    let up = rescale_field(&pair.to_frame1, RescaleFactor::Up2)?;
    BilateralPair::from_t1(up.data.clone(), up.scale_log2)
}

/// Full interpolation at the midpoint. Inputs are `[3, H, W]` with any dims
/// >= 32; they are padded internally (edge replication) to a multiple of 16
/// and the output is cropped back. Fields are cropped to the matching grid.
pub fn interpolate<S: Scalar>(
    frame0: &Tensor<S>,
    frame1: &Tensor<S>,
    cfg: &PipelineConfig,
    weights: &PipelineWeights<S>,
) -> Result<InterpolationOutput<S>> {
    if frame0.shape() != frame1.shape() {
        return Err(Error::shape("interpolate", format!("{:?} vs {:?}", frame0.shape(), frame1.shape())));
    }
    let s = frame0.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("interpolate", format!("expected [3, H, W], got {:?}", s)));
    }
    let (h, w) = (s[1], s[2]);
    if h < 32 || w < 32 {
        return Err(Error::invalid("interpolate", format!("frames must be at least 32x32, got {h}x{w}")));
    }
    let (hp, wp) = (pad_to_multiple(h, 16), pad_to_multiple(w, 16));
    let f0 = replicate_pad(frame0, hp, wp)?;
    let f1 = replicate_pad(frame1, hp, wp)?;

    let f0_half = f0.avg_pool2d(2)?;
    let f1_half = f1.avg_pool2d(2)?;
    let f0_quarter = f0_half.avg_pool2d(2)?;
    let f1_quarter = f1_half.avg_pool2d(2)?;

    let global_pair = biformer_forward(&f0, &f1, &weights.biformer)?;

    let quarter_pair = if cfg.refine_quarter {
        refine_pass(&global_pair, &f0_quarter, &f1_quarter, &weights.upsampler)?
    } else {
        plain_upscale(&global_pair)?
    };
    let half_pair = if cfg.refine_half {
        refine_pass(&quarter_pair, &f0_half, &f1_half, &weights.upsampler)?
    } else {
        plain_upscale(&quarter_pair)?
    };

    let frame = synthesize(&f0, &f1, &half_pair, &weights.synthesis)?;
    let frame = if (hp, wp) == (h, w) { frame } else { frame.crop2d(0, 0, h, w)? };

    Ok(InterpolationOutput { frame, global_pair, quarter_pair, half_pair })
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// One synthetic triplet: band-limited texture with hard-edged squares,
/// translated by a per-sample global shift. Ground-truth bilateral motion is
/// +/- shift/2 by construction.
pub struct SyntheticSample<S: Scalar> {
    pub frame0: Tensor<S>,
    pub frame_gt: Tensor<S>,
    pub frame1: Tensor<S>,
    /// Full-resolution translation (dx, dy) from frame 0 to frame 1.
    pub shift: (f64, f64),
}

impl<S: Scalar> SyntheticSample<S> {
    /// The ground-truth field toward frame 1 at `1/2^k` scale.
    pub fn truth_at_scale(&self, scale_log2: u32) -> Result<MotionField<S>> {
        let size = self.frame0.shape()[1] >> scale_log2;
        let factor = (1u64 << scale_log2) as f64;
        crate::warp::constant_flow(
            size,
            size,
            self.shift.0 / 2.0 / factor,
            self.shift.1 / 2.0 / factor,
            scale_log2,
            crate::warp::Endpoint::TToOne,
        )
    }
}

fn separable_blur(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (2.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, i) in (-radius..=radius).enumerate() {
                let sx = (x as isize + i).clamp(0, w as isize - 1) as usize;
                acc += plane[y * w + sx] * kernel[ki];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, i) in (-radius..=radius).enumerate() {
                let sy = (y as isize + i).clamp(0, h as isize - 1) as usize;
                acc += tmp[sy * w + x] * kernel[ki];
            }
            plane[y * w + x] = acc;
        }
    }
}

/// Bilinear crop of a `[3, H, W]` buffer at a fractional offset.
fn bilinear_crop(big: &[f64], bh: usize, bw: usize, oy: f64, ox: f64, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * size * size];
    for ch in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let sy = y as f64 + oy;
                let sx = x as f64 + ox;
                let y0 = sy.floor();
                let x0 = sx.floor();
                let fy = sy - y0;
                let fx = sx - x0;
                let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
                let (ya, yb) = (clamp(y0, bh), clamp(y0 + 1.0, bh));
                let (xa, xb) = (clamp(x0, bw), clamp(x0 + 1.0, bw));
                out[(ch * size + y) * size + x] = (1.0 - fy) * (1.0 - fx) * big[(ch * bh + ya) * bw + xa]
                    + (1.0 - fy) * fx * big[(ch * bh + ya) * bw + xb]
                    + fy * (1.0 - fx) * big[(ch * bh + yb) * bw + xa]
                    + fy * fx * big[(ch * bh + yb) * bw + xb];
            }
        }
    }
    out
}

/// Raw sample payload (plain buffers, safe to generate on a worker thread).
struct RawSample {
    frame0: Vec<f64>,
    frame_gt: Vec<f64>,
    frame1: Vec<f64>,
    shift: (f64, f64),
    size: usize,
}

fn generate_raw(seed: u64, index: u64, size: usize, max_shift: f64) -> RawSample {
    generate_raw_inner(seed, index, size, max_shift, None)
}

fn generate_raw_inner(
    seed: u64,
    index: u64,
    size: usize,
    max_shift: f64,
    shift_override: Option<(f64, f64)>,
) -> RawSample {
    // Mix the stream seed and index so every sample is independent of
    // generation order.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(index));
    let margin = 16usize;
    let big = size + 2 * margin;

    // Band-limited texture.
    let sigma = rng.gen_range(1.2..2.5);
    let mut tex = vec![0.0f64; 3 * big * big];
    for ch in 0..3 {
        let plane = &mut tex[ch * big * big..(ch + 1) * big * big];
        for v in plane.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        separable_blur(plane, big, big, sigma);
        // Stretch the blurred noise back to a healthy contrast range.
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for &v in plane.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = (hi - lo).max(1e-9);
        for v in plane.iter_mut() {
            *v = (*v - lo) / span;
        }
    }
    // Hard-edged moving squares riding the same global translation.
    let n_squares = rng.gen_range(2..5);
    for _ in 0..n_squares {
        let side = rng.gen_range(4..13usize);
        let sy = rng.gen_range(0..big - side);
        let sx = rng.gen_range(0..big - side);
        let color = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        for ch in 0..3 {
            for y in sy..sy + side {
                for x in sx..sx + side {
                    tex[(ch * big + y) * big + x] = color[ch];
                }
            }
        }
    }

    let (dx, dy) = shift_override.unwrap_or_else(|| {
        (rng.gen_range(-max_shift..max_shift), rng.gen_range(-max_shift..max_shift))
    });
    let c = margin as f64;
    RawSample {
        frame0: bilinear_crop(&tex, big, big, c + dy / 2.0, c + dx / 2.0, size),
        frame_gt: bilinear_crop(&tex, big, big, c, c, size),
        frame1: bilinear_crop(&tex, big, big, c - dy / 2.0, c - dx / 2.0, size),
        shift: (dx, dy),
        size,
    }
}

fn raw_to_sample<S: Scalar>(raw: RawSample) -> Result<SyntheticSample<S>> {
    let size = raw.size;
    let conv = |v: Vec<f64>| -> Result<Tensor<S>> {
        Tensor::from_vec(&[3, size, size], v.into_iter().map(S::from_f64).collect())
    };
    Ok(SyntheticSample {
        frame0: conv(raw.frame0)?,
        frame_gt: conv(raw.frame_gt)?,
        frame1: conv(raw.frame1)?,
        shift: raw.shift,
    })
}

/// Deterministic synthetic sample, independent of generation order.
pub fn synthetic_sample<S: Scalar>(
    seed: u64,
    index: u64,
    size: usize,
    max_shift: f64,
) -> Result<SyntheticSample<S>> {
    raw_to_sample(generate_raw(seed, index, size, max_shift))
}

/// Same texture generation with a caller-chosen translation (diagnostics).
pub fn synthetic_sample_with_shift<S: Scalar>(
    seed: u64,
    index: u64,
    size: usize,
    shift: (f64, f64),
) -> Result<SyntheticSample<S>> {
    raw_to_sample(generate_raw_inner(seed, index, size, shift.0.abs().max(shift.1.abs()), Some(shift)))
}

/// Worker-thread count from `BIMOTION_THREADS` (default 1 = no prefetch).
fn worker_threads() -> usize {
    std::env::var("BIMOTION_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

/// Ordered sample stream, optionally produced by one background thread with
/// a bounded queue. Generation is index-keyed, so the stream content is
/// identical either way.
struct SampleStream {
    rx: Option<mpsc::Receiver<RawSample>>,
    inline: Option<Box<dyn FnMut() -> RawSample>>,
    _worker: Option<std::thread::JoinHandle<()>>,
}

impl SampleStream {
    fn new(seed: u64, count: u64, sizes: Vec<usize>, size_seed: u64, max_shift: f64) -> Self {
        // Per-index sizes are decided up front from their own RNG stream so
        // prefetching cannot perturb them.
        let mut size_rng = ChaCha8Rng::seed_from_u64(size_seed);
        let plan: Vec<usize> = (0..count)
            .map(|_| sizes[size_rng.gen_range(0..sizes.len())])
            .collect();
        if worker_threads() >= 2 {
            let (tx, rx) = mpsc::sync_channel(4);
            let worker = std::thread::spawn(move || {
                for (i, &size) in plan.iter().enumerate() {
                    if tx.send(generate_raw(seed, i as u64, size, max_shift)).is_err() {
                        return;
                    }
                }
            });
            SampleStream { rx: Some(rx), inline: None, _worker: Some(worker) }
        } else {
            let mut i = 0u64;
            SampleStream {
                rx: None,
                inline: Some(Box::new(move || {
                    let raw = generate_raw(seed, i, plan[i as usize], max_shift);
                    i += 1;
                    raw
                })),
                _worker: None,
            }
        }
    }

    fn next<S: Scalar>(&mut self) -> Result<SyntheticSample<S>> {
        let raw = match (&self.rx, &mut self.inline) {
            (Some(rx), _) => rx.recv().map_err(|_| Error::invalid("sample_stream", "worker stopped"))?,
            (None, Some(f)) => f(),
            _ => unreachable!(),
        };
        raw_to_sample(raw)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Upsamples the global pair to full resolution for the photometric loss.
fn upscale_to_full<S: Scalar>(pair: &BilateralPair<S>) -> Result<BilateralPair<S>> {
    let mut field = pair.to_frame1.clone();
    while field.scale_log2 > 0 {
        field = rescale_field(&field, RescaleFactor::Up2)?;
    }
    BilateralPair::from_t1(field.data.clone(), 0)
}

/// Phase 1: trains the global estimator on synthetic translations with the
/// photometric objective (warped inputs vs ground truth at full resolution).
pub fn train_biformer<S: Scalar>(
    cfg: &PipelineConfig,
    weights: &PipelineWeights<S>,
    iterations: usize,
    data_seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    let loss_cfg = cfg.loss_config();
    let params = weights.store.with_prefix("biformer.");
    let mut opt = Adam::new(params, cfg.learning_rate);
    let total = (iterations * cfg.batch_size) as u64;
    let mut stream = SampleStream::new(data_seed, total, vec![cfg.train_size], data_seed ^ 0x5151, cfg.max_shift);

    let mut losses = Vec::with_capacity(iterations);
    let inv_batch = S::from_f64(1.0 / cfg.batch_size as f64);
    for it in 0..iterations {
        let mut batch_loss = 0.0f64;
        for _ in 0..cfg.batch_size {
            let sample: SyntheticSample<S> = stream.next()?;
            let pair = biformer_forward(&sample.frame0, &sample.frame1, &weights.biformer)?;
            let full = upscale_to_full(&pair)?;
            let loss = photometric_loss(&sample.frame_gt, &sample.frame0, &sample.frame1, &full, &loss_cfg)?
                .mul_scalar(inv_batch)?;
            let v = loss.item()?.to_f64();
            if !v.is_finite() {
                return Err(Error::Diverged(it));
            }
            batch_loss += v;
            loss.backward()?;
        }
        losses.push(batch_loss);
        opt.step()?;
    }
    Ok(TrainReport {
        iterations,
        initial_loss: losses.first().copied().unwrap_or(0.0),
        final_loss: losses.last().copied().unwrap_or(0.0),
        losses,
    })
}

/// Runs the frozen global stage (no gradients recorded, output detached).
pub fn frozen_global_pair<S: Scalar>(
    frame0: &Tensor<S>,
    frame1: &Tensor<S>,
    weights: &PipelineWeights<S>,
) -> Result<BilateralPair<S>> {
    let pair = no_grad(|| biformer_forward(frame0, frame1, &weights.biformer))?;
    BilateralPair::from_t1(pair.to_frame1.data.detach(), pair.scale_log2())
}

/// Phase 2: trains refinement and synthesis together with the global stage
/// frozen, optimizing the synthesis objective at a per-sample random working
/// resolution.
pub fn train_refinement<S: Scalar>(
    cfg: &PipelineConfig,
    weights: &PipelineWeights<S>,
    iterations: usize,
    data_seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    let loss_cfg = cfg.loss_config();
    let mut params = weights.store.with_prefix("upsampler.");
    params.extend(weights.store.with_prefix("synthesis."));
    let mut opt = Adam::new(params, cfg.learning_rate);
    let total = (iterations * cfg.batch_size) as u64;
    let mut stream = SampleStream::new(
        data_seed,
        total,
        cfg.train_sizes_refine.clone(),
        data_seed ^ 0xA5A5,
        cfg.max_shift,
    );

    let mut losses = Vec::with_capacity(iterations);
    let inv_batch = S::from_f64(1.0 / cfg.batch_size as f64);
    for it in 0..iterations {
        let mut batch_loss = 0.0f64;
        for _ in 0..cfg.batch_size {
            let sample: SyntheticSample<S> = stream.next()?;
            let f0 = &sample.frame0;
            let f1 = &sample.frame1;
            let f0_half = f0.avg_pool2d(2)?;
            let f1_half = f1.avg_pool2d(2)?;
            let f0_quarter = f0_half.avg_pool2d(2)?;
            let f1_quarter = f1_half.avg_pool2d(2)?;

            let global = frozen_global_pair(f0, f1, weights)?;
            let quarter = if cfg.refine_quarter {
                refine_pass(&global, &f0_quarter, &f1_quarter, &weights.upsampler)?
            } else {
                plain_upscale(&global)?
            };
            let half = if cfg.refine_half {
                refine_pass(&quarter, &f0_half, &f1_half, &weights.upsampler)?
            } else {
                plain_upscale(&quarter)?
            };
            let frame = synthesize(f0, f1, &half, &weights.synthesis)?;
            let loss = synthesis_loss(&sample.frame_gt, &frame, &loss_cfg)?.mul_scalar(inv_batch)?;
            let v = loss.item()?.to_f64();
            if !v.is_finite() {
                return Err(Error::Diverged(it));
            }
            batch_loss += v;
            loss.backward()?;
        }
        losses.push(batch_loss);
        opt.step()?;
    }
    Ok(TrainReport {
        iterations,
        initial_loss: losses.first().copied().unwrap_or(0.0),
        final_loss: losses.last().copied().unwrap_or(0.0),
        losses,
    })
}

// ---------------------------------------------------------------------------
// Held-out evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct GlobalEval {
    pub mean_epe_eighth: f64,
    pub mean_abs_motion: f64,
}

/// Mean end-point error of the global stage at 1/8 scale on held-out
/// synthetic samples.
pub fn evaluate_global<S: Scalar>(
    cfg: &PipelineConfig,
    weights: &PipelineWeights<S>,
    samples: usize,
    data_seed: u64,
) -> Result<GlobalEval> {
    let mut total_epe = 0.0;
    let mut total_mag = 0.0;
    for i in 0..samples {
        let sample: SyntheticSample<S> = synthetic_sample(data_seed, i as u64, cfg.train_size, cfg.max_shift)?;
        let pair = no_grad(|| biformer_forward(&sample.frame0, &sample.frame1, &weights.biformer))?;
        let truth = sample.truth_at_scale(3)?;
        total_epe += endpoint_error(&pair.to_frame1, &truth)?;
        let d = pair.to_frame1.data.data();
        total_mag += d.iter().map(|v| v.to_f64().abs()).sum::<f64>() / d.len() as f64;
    }
    Ok(GlobalEval {
        mean_epe_eighth: total_epe / samples as f64,
        mean_abs_motion: total_mag / samples as f64,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RefinementEval {
    pub mean_psnr: f64,
    pub mean_copy_psnr: f64,
    pub refined_epe: f64,
    pub global_epe: f64,
    /// Fraction of samples where the refined field beats the plain-rescaled
    /// global field.
    pub refined_better_fraction: f64,
}

/// Held-out interpolation quality and field accuracy at 1/2 scale.
pub fn evaluate_refinement<S: Scalar>(
    cfg: &PipelineConfig,
    weights: &PipelineWeights<S>,
    samples: usize,
    data_seed: u64,
) -> Result<RefinementEval> {
    let mut sum_psnr = 0.0;
    let mut sum_copy = 0.0;
    let mut sum_refined_epe = 0.0;
    let mut sum_global_epe = 0.0;
    let mut better = 0usize;
    for i in 0..samples {
        let sample: SyntheticSample<S> = synthetic_sample(data_seed, i as u64, cfg.train_size, cfg.max_shift)?;
        let out = no_grad(|| interpolate(&sample.frame0, &sample.frame1, cfg, weights))?;
        sum_psnr += psnr(&out.frame, &sample.frame_gt)?;
        sum_copy += psnr(&sample.frame0, &sample.frame_gt)?;

        let truth_half = sample.truth_at_scale(1)?;
        let refined_epe = endpoint_error(&out.half_pair.to_frame1, &truth_half)?;
        let rescaled = plain_upscale(&plain_upscale(&out.global_pair)?)?;
        let global_epe = endpoint_error(&rescaled.to_frame1, &truth_half)?;
        sum_refined_epe += refined_epe;
        sum_global_epe += global_epe;
        if refined_epe < global_epe {
            better += 1;
        }
    }
    let n = samples as f64;
    Ok(RefinementEval {
        mean_psnr: sum_psnr / n,
        mean_copy_psnr: sum_copy / n,
        refined_epe: sum_refined_epe / n,
        global_epe: sum_global_epe / n,
        refined_better_fraction: better as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(back.channels, cfg.channels);
        assert!(PipelineConfig::from_toml("t = 0.3").is_err());
        assert!(PipelineConfig::from_toml("train_size = 17").is_err());
    }

    #[test]
    fn synthetic_sample_is_deterministic_and_symmetric() {
        let a: SyntheticSample<f32> = synthetic_sample(9, 4, 32, 8.0).unwrap();
        let b: SyntheticSample<f32> = synthetic_sample(9, 4, 32, 8.0).unwrap();
        assert_eq!(a.frame0.to_vec(), b.frame0.to_vec());
        assert_eq!(a.shift, b.shift);
        // Ground truth fields obey the symmetry constraint by construction.
        let t1 = a.truth_at_scale(0).unwrap();
        let pair = BilateralPair::from_t1(t1.data.clone(), 0).unwrap();
        assert!(pair.is_symmetric());
        assert!(a.shift.0.abs() <= 8.0 && a.shift.1.abs() <= 8.0);
    }

    #[test]
    fn synthetic_warp_consistency() {
        // Backward-warping frame 1 by the true field recovers the ground
        // truth away from borders. Exact only when the half-shift is an
        // integer (fractional crops resample the texture).
        let s: SyntheticSample<f64> = synthetic_sample_with_shift(11, 2, 32, (4.0, -2.0)).unwrap();
        let truth = s.truth_at_scale(0).unwrap();
        let warped = crate::warp::backward_warp(&s.frame1, &truth).unwrap();
        let (a, b) = (warped.data(), s.frame_gt.data());
        let hw = 32 * 32;
        let mut max_err = 0.0f64;
        for ch in 0..3 {
            for y in 8..24 {
                for x in 8..24 {
                    let p = ch * hw + y * 32 + x;
                    max_err = max_err.max((a[p] - b[p]).abs());
                }
            }
        }
        assert!(max_err < 1e-9, "interior mismatch {max_err}");
    }

    #[test]
    fn prefetched_stream_matches_inline() {
        let mk = |threads: &str| -> Vec<f64> {
            std::env::set_var("BIMOTION_THREADS", threads);
            let mut stream = SampleStream::new(3, 4, vec![32], 99, 4.0);
            let mut out = Vec::new();
            for _ in 0..4 {
                let s: SyntheticSample<f64> = stream.next().unwrap();
                out.push(s.frame0.data()[0]);
                out.push(s.shift.0);
            }
            std::env::remove_var("BIMOTION_THREADS");
            out
        };
        assert_eq!(mk("1"), mk("2"));
    }

    fn tiny_pipeline_cfg() -> PipelineConfig {
        PipelineConfig {
            channels: 16,
            heads: 2,
            global_radius: 2,
            encoder_widths: [8, 12, 16],
            encoder_heads: [2, 2, 2],
            mlp_ratio: 2,
            shallow_channels: 8,
            embed_channels: 8,
            match_channels: 8,
            aggregate_channels: 16,
            synthesis_widths: [8, 12, 16],
            train_size: 32,
            train_sizes_refine: vec![32],
            batch_size: 1,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn interpolate_shapes_and_symmetry() {
        let cfg = tiny_pipeline_cfg();
        let weights = PipelineWeights::<f32>::init(&cfg).unwrap();
        let s: SyntheticSample<f32> = synthetic_sample(5, 0, 32, 4.0).unwrap();
        let out = interpolate(&s.frame0, &s.frame1, &cfg, &weights).unwrap();
        assert_eq!(out.frame.shape(), &[3, 32, 32]);
        assert_eq!(out.global_pair.to_frame1.data.shape(), &[2, 4, 4]);
        assert_eq!(out.quarter_pair.to_frame1.data.shape(), &[2, 8, 8]);
        assert_eq!(out.half_pair.to_frame1.data.shape(), &[2, 16, 16]);
        assert!(out.global_pair.is_symmetric());
        assert!(out.quarter_pair.is_symmetric());
        assert!(out.half_pair.is_symmetric());
    }

    #[test]
    fn interpolate_pads_and_crops_odd_sizes() {
        let cfg = tiny_pipeline_cfg();
        let weights = PipelineWeights::<f32>::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mk = |rng: &mut ChaCha8Rng| {
            let data: Vec<f32> = (0..3 * 40 * 33).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::from_vec(&[3, 40, 33], data).unwrap()
        };
        let f0 = mk(&mut rng);
        let f1 = mk(&mut rng);
        let out = interpolate(&f0, &f1, &cfg, &weights).unwrap();
        assert_eq!(out.frame.shape(), &[3, 40, 33]);
        let small = Tensor::<f32>::zeros(&[3, 16, 40]);
        assert!(interpolate(&small, &small, &cfg, &weights).is_err());
    }

    #[test]
    fn end_to_end_determinism() {
        let cfg = tiny_pipeline_cfg();
        let weights_a = PipelineWeights::<f32>::init(&cfg).unwrap();
        let weights_b = PipelineWeights::<f32>::init(&cfg).unwrap();
        let s: SyntheticSample<f32> = synthetic_sample(5, 1, 32, 4.0).unwrap();
        let out_a = interpolate(&s.frame0, &s.frame1, &cfg, &weights_a).unwrap();
        let out_b = interpolate(&s.frame0, &s.frame1, &cfg, &weights_b).unwrap();
        let (da, db) = (out_a.frame.data(), out_b.frame.data());
        assert!(da.iter().zip(db.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn short_training_reduces_loss_and_is_reproducible() {
        let cfg = tiny_pipeline_cfg();
        let run = || {
            let weights = PipelineWeights::<f32>::init(&cfg).unwrap();
            train_biformer(&cfg, &weights, 6, 123).unwrap().losses
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b, "training not reproducible");
    }

    #[test]
    fn refinement_training_freezes_global_weights() {
        let cfg = tiny_pipeline_cfg();
        let weights = PipelineWeights::<f32>::init(&cfg).unwrap();
        let before: Vec<(String, Vec<f32>)> = weights
            .store
            .iter()
            .filter(|(n, _)| n.starts_with("biformer."))
            .map(|(n, t)| (n.to_string(), t.to_vec()))
            .collect();
        train_refinement(&cfg, &weights, 3, 77).unwrap();
        for (name, data) in before {
            let now = weights.store.get(&name).unwrap().to_vec();
            assert!(
                data.iter().zip(now.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "{name} changed during frozen training"
            );
        }
        // And the frozen stage accumulated no gradients.
        for (name, t) in weights.store.iter() {
            if name.starts_with("biformer.") {
                assert!(t.grad().is_none(), "{name} received gradients");
            }
        }
    }
}
