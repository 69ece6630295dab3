//! Named gradient checks for every differentiable operator, runnable from
//! the CLI (`gradcheck`) and from the acceptance suite. All checks run in
//! f64 with central differences at eps = 1e-4.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    bca_no_anchor, bca_with_anchor, displacement_aggregate, pair_window_mask, sliding_logits_anchor,
    sliding_logits_pair, swin_attention, AttentionConfig, BcaWeights, DisplacementSign,
};
use crate::biformer::{encode_global, BiformerConfig, BiformerWeights, EncoderConfig};
use crate::costvol::{bbcv, bilateral_correlation};
use crate::error::Result;
use crate::losses::{census_loss, charbonnier, photometric_loss, synthesis_loss, LossConfig};
use crate::synthesis::{synthesize, SynthesisConfig, SynthesisWeights};
use crate::tensor::{finite_difference_check, ParamStore, Tensor};
use crate::upsampler::{refine_pass, UpsamplerConfig, UpsamplerWeights};
use crate::warp::{backward_warp, BilateralPair, Endpoint, MotionField};

pub const FD_EPS: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub seed: u64,
    pub max_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, rand_vec(rng, n, lo, hi)).unwrap()
}

fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, rand_vec(rng, n, lo, hi)).unwrap()
}

/// Flow values offset by ~0.3 from integers so checks stay away from the
/// bilinear interpolation kinks.
fn kink_free_flow(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..2 * h * w)
        .map(|_| {
            let base: i32 = rng.gen_range(-2..=2);
            let side = if rng.gen_bool(0.5) { 0.3 } else { -0.3 };
            base as f64 + side
        })
        .collect();
    Tensor::param(&[2, h, w], data).unwrap()
}

/// Step used for composite-network checks: small enough that the central
/// difference window practically never straddles a ReLU kink, while f64
/// precision keeps the quotient accurate.
pub const FD_EPS_COMPOSITE: f64 = 1e-6;

struct Check {
    name: &'static str,
    tolerance: f64,
    eps: f64,
    run: Box<dyn Fn(&mut ChaCha8Rng, f64) -> Result<f64>>,
}

fn check_fd(
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<f64> {
    finite_difference_check(&|t| f(t), x, eps)
}

fn all_checks() -> Vec<Check> {
    let mut checks: Vec<Check> = Vec::new();
    let mut add = |name: &'static str, tol: f64, f: Box<dyn Fn(&mut ChaCha8Rng, f64) -> Result<f64>>| {
        checks.push(Check { name, tolerance: tol, eps: FD_EPS, run: f });
    };

    // Core elementwise and reductions.
    add("core.add_mul", 1e-6, Box::new(|rng, eps| {
        let x = rand_param(rng, &[3, 4], -1.0, 1.0);
        let y = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        check_fd(|x| x.mul(x)?.add(&x.mul(&y)?)?.sum(), &x, eps)
    }));
    add("core.sub_neg_scalar", 1e-6, Box::new(|rng, eps| {
        let x = rand_param(rng, &[8], -1.0, 1.0);
        let y = rand_tensor(rng, &[8], -1.0, 1.0);
        check_fd(|x| x.sub(&y)?.neg_t()?.mul_scalar(1.7)?.add_scalar(0.3)?.mul(x)?.mean(), &x, eps)
    }));
    add("core.relu", 1e-5, Box::new(|rng, eps| {
        // Inputs pushed away from the kink at zero.
        let data: Vec<f64> = (0..12)
            .map(|_| {
                let v: f64 = rng.gen_range(0.2..1.0);
                if rng.gen_bool(0.5) { v } else { -v }
            })
            .collect();
        let x = Tensor::param(&[12], data).unwrap();
        check_fd(|x| x.relu()?.mul(x)?.sum(), &x, eps)
    }));
    add("core.gelu", 1e-5, Box::new(|rng, eps| {
        let x = rand_param(rng, &[10], -2.0, 2.0);
        check_fd(|x| x.gelu()?.sum(), &x, eps)
    }));
    add("core.pow_scalar", 1e-5, Box::new(|rng, eps| {
        let x = rand_param(rng, &[6], 0.2, 2.0);
        check_fd(|x| x.pow_scalar(0.5)?.sum(), &x, eps)
    }));
    add("core.matmul", 1e-6, Box::new(|rng, eps| {
        let x = rand_param(rng, &[3, 4], -1.0, 1.0);
        let y = rand_tensor(rng, &[4, 2], -1.0, 1.0);
        check_fd(|x| x.matmul(&y)?.mul(&x.matmul(&y)?)?.sum(), &x, eps)
    }));
    add("core.conv2d.input", 1e-5, Box::new(|rng, eps| {
        let x = rand_param(rng, &[2, 5, 5], -1.0, 1.0);
        let w = rand_tensor(rng, &[3, 2, 3, 3], -0.5, 0.5);
        let b = rand_tensor(rng, &[3], -0.1, 0.1);
        check_fd(|x| x.conv2d(&w, Some(&b), 2, 1)?.mul(&x.conv2d(&w, Some(&b), 2, 1)?)?.mean(), &x, eps)
    }));
    add("core.conv2d.weight", 1e-5, Box::new(|rng, eps| {
        let x = rand_tensor(rng, &[2, 5, 5], -1.0, 1.0);
        let w = rand_param(rng, &[3, 2, 3, 3], -0.5, 0.5);
        check_fd(|w| {
            let y = x.conv2d(w, None, 1, 1)?;
            y.mul(&y)?.mean()
        }, &w, eps)
    }));
    add("core.conv2d.bias", 1e-6, Box::new(|rng, eps| {
        let x = rand_tensor(rng, &[2, 4, 4], -1.0, 1.0);
        let w = rand_tensor(rng, &[3, 2, 3, 3], -0.5, 0.5);
        let b = rand_param(rng, &[3], -0.2, 0.2);
        check_fd(|b| {
            let y = x.conv2d(&w, Some(b), 1, 1)?;
            y.mul(&y)?.mean()
        }, &b, eps)
    }));
    add("core.softmax", 1e-5, Box::new(|rng, eps| {
        let x = rand_param(rng, &[2, 3, 5], -2.0, 2.0);
        let weights = rand_tensor(rng, &[2, 3, 5], -1.0, 1.0);
        check_fd(|x| x.softmax_lastdim()?.mul(&weights)?.sum(), &x, eps)
    }));
    add("core.masked_softmax", 1e-5, Box::new(|rng, eps| {
        let x = rand_param(rng, &[4, 6], -2.0, 2.0);
        let mask = std::rc::Rc::new((0..24).map(|i| i % 5 != 3).collect::<Vec<bool>>());
        let weights = rand_tensor(rng, &[4, 6], -1.0, 1.0);
        check_fd(move |x| x.masked_softmax_lastdim(&mask)?.mul(&weights)?.sum(), &x, eps)
    }));
    add("core.layer_norm", 1e-5, Box::new(|rng, eps| {
        let x = rand_param(rng, &[4, 3, 3], -1.5, 1.5);
        let gamma = rand_tensor(rng, &[4], 0.5, 1.5);
        let beta = rand_tensor(rng, &[4], -0.3, 0.3);
        let probe = rand_tensor(rng, &[4, 3, 3], -1.0, 1.0);
        check_fd(move |x| x.layer_norm_chw(&gamma, &beta, 1e-5)?.mul(&probe)?.sum(), &x, eps)
    }));
    add("core.layer_norm.params", 1e-5, Box::new(|rng, eps| {
        let x = rand_tensor(rng, &[4, 3, 3], -1.5, 1.5);
        let gamma = rand_param(rng, &[4], 0.5, 1.5);
        let beta = rand_tensor(rng, &[4], -0.3, 0.3);
        check_fd(move |gamma| {
            let y = x.layer_norm_chw(gamma, &beta, 1e-5)?;
            y.mul(&y)?.mean()
        }, &gamma, eps)
    }));
    add("core.bilinear_resize", 1e-5, Box::new(|rng, eps| {
        let x = rand_param(rng, &[2, 4, 4], -1.0, 1.0);
        let probe = rand_tensor(rng, &[2, 7, 6], -1.0, 1.0);
        check_fd(move |x| x.bilinear_resize(7, 6)?.mul(&probe)?.sum(), &x, eps)
    }));
    add("core.avg_pool", 1e-6, Box::new(|rng, eps| {
        let x = rand_param(rng, &[2, 4, 4], -1.0, 1.0);
        check_fd(|x| {
            let y = x.avg_pool2d(2)?;
            y.mul(&y)?.sum()
        }, &x, eps)
    }));
    add("core.pad_crop_shuffle", 1e-6, Box::new(|rng, eps| {
        let x = rand_param(rng, &[4, 3, 3], -1.0, 1.0);
        check_fd(|x| {
            let y = x.pad2d((1, 1, 0, 2))?.crop2d(0, 1, 4, 4)?.pixel_shuffle(2)?;
            y.mul(&y)?.sum()
        }, &x, eps)
    }));
    add("core.concat_permute", 1e-6, Box::new(|rng, eps| {
        let x = rand_param(rng, &[2, 3, 4], -1.0, 1.0);
        let y = rand_tensor(rng, &[1, 3, 4], -1.0, 1.0);
        check_fd(|x| {
            let c = Tensor::concat(&[x, &y], 0)?.permute(&[1, 2, 0])?;
            c.mul(&c)?.mean()
        }, &x, eps)
    }));
    add("core.add_bias_lastdim", 1e-6, Box::new(|rng, eps| {
        let x = rand_tensor(rng, &[2, 3, 3, 5], -1.0, 1.0);
        let b = rand_param(rng, &[2, 5], -0.5, 0.5);
        check_fd(|b| {
            let y = x.add_bias_lastdim(b)?;
            y.mul(&y)?.mean()
        }, &b, eps)
    }));

    // Warping.
    add("warp.backward_warp.source", 1e-5, Box::new(|rng, eps| {
        let src = rand_param(rng, &[2, 6, 6], -1.0, 1.0);
        let flow = kink_free_flow(rng, 6, 6).detach();
        check_fd(move |src| {
            let field = MotionField::new(flow.clone(), 0, Endpoint::TToOne)?;
            let y = backward_warp(src, &field)?;
            y.mul(&y)?.sum()
        }, &src, eps)
    }));
    add("warp.backward_warp.flow", 1e-5, Box::new(|rng, eps| {
        let src = rand_tensor(rng, &[2, 6, 6], -1.0, 1.0);
        let flow = kink_free_flow(rng, 6, 6);
        check_fd(move |flow| {
            let field = MotionField::new(flow.clone(), 0, Endpoint::TToOne)?;
            let y = backward_warp(&src, &field)?;
            y.mul(&y)?.sum()
        }, &flow, eps)
    }));

    // Cost volumes.
    add("costvol.correlation", 1e-5, Box::new(|rng, eps| {
        let f0 = rand_param(rng, &[3, 5, 5], -1.0, 1.0);
        let f1 = rand_tensor(rng, &[3, 5, 5], -1.0, 1.0);
        check_fd(|f0| {
            let v = bilateral_correlation(f0, &f1, 1)?;
            v.data.mul(&v.data)?.mean()
        }, &f0, eps)
    }));
    add("costvol.bbcv.embeddings", 1e-5, Box::new(|rng, eps| {
        let s0 = rand_param(rng, &[2, 4, 4], -1.0, 1.0);
        let s1 = rand_tensor(rng, &[2, 4, 4], -1.0, 1.0);
        let flow = kink_free_flow(rng, 8, 8).detach();
        check_fd(move |s0| {
            let pair = BilateralPair::from_t1(flow.clone(), 1)?;
            let v = bbcv(s0, &s1, &pair, 1, 1)?;
            v.data.mul(&v.data)?.mean()
        }, &s0, eps)
    }));
    add("costvol.bbcv.motion", 1e-5, Box::new(|rng, eps| {
        let s0 = rand_tensor(rng, &[2, 4, 4], -1.0, 1.0);
        let s1 = rand_tensor(rng, &[2, 4, 4], -1.0, 1.0);
        let flow = kink_free_flow(rng, 8, 8);
        check_fd(move |flow| {
            let pair = BilateralPair::from_t1(flow.clone(), 1)?;
            let v = bbcv(&s0, &s1, &pair, 1, 1)?;
            v.data.mul(&v.data)?.mean()
        }, &flow, eps)
    }));

    // Attention primitives.
    add("attention.logits_pair", 1e-5, Box::new(|rng, eps| {
        let q = rand_param(rng, &[4, 5, 5], -1.0, 1.0);
        let k = rand_tensor(rng, &[4, 5, 5], -1.0, 1.0);
        check_fd(|q| {
            let l = sliding_logits_pair(q, &k, 1, 2)?;
            l.mul(&l)?.mean()
        }, &q, eps)
    }));
    add("attention.logits_anchor", 1e-5, Box::new(|rng, eps| {
        let q = rand_tensor(rng, &[4, 5, 5], -1.0, 1.0);
        let k = rand_param(rng, &[4, 5, 5], -1.0, 1.0);
        check_fd(|k| {
            let l = sliding_logits_anchor(&q, k, DisplacementSign::Minus, 1, 2)?;
            l.mul(&l)?.mean()
        }, &k, eps)
    }));
    add("attention.aggregate", 1e-5, Box::new(|rng, eps| {
        let (h, w, r, heads) = (5usize, 5usize, 1usize, 2usize);
        let d = (2 * r + 1) * (2 * r + 1);
        let logits = rand_param(rng, &[heads, h, w, d], -1.0, 1.0);
        let v = rand_tensor(rng, &[4, h, w], -1.0, 1.0);
        check_fd(move |logits| {
            let mask = pair_window_mask(h, w, r, heads);
            let probs = logits.masked_softmax_lastdim(&mask)?;
            let z = displacement_aggregate(&probs, &v, DisplacementSign::Plus, r)?;
            z.mul(&z)?.mean()
        }, &logits, eps)
    }));
    add("attention.swin", 1e-4, Box::new(|rng, eps| {
        let (c, h, w, heads, window) = (4usize, 6usize, 6usize, 2usize, 4usize);
        let q = rand_param(rng, &[c, h, w], -1.0, 1.0);
        let k = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
        let v = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
        let span = 2 * window - 1;
        let bias = rand_tensor(rng, &[heads, span * span], -0.2, 0.2);
        check_fd(move |q| {
            let (out, _) = swin_attention(q, &k, &v, &bias, window, 2, heads)?;
            out.mul(&out)?.mean()
        }, &q, eps)
    }));
    add("attention.swin.bias_table", 1e-4, Box::new(|rng, eps| {
        let (c, h, w, heads, window) = (4usize, 4usize, 4usize, 2usize, 4usize);
        let q = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
        let k = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
        let v = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
        let span = 2 * window - 1;
        let bias = rand_param(rng, &[heads, span * span], -0.2, 0.2);
        check_fd(move |bias| {
            let (out, _) = swin_attention(&q, &k, &v, bias, window, 0, heads)?;
            out.mul(&out)?.mean()
        }, &bias, eps)
    }));
    add("attention.bca_no_anchor", 1e-4, Box::new(|rng, eps| {
        let cfg = AttentionConfig { channels: 8, heads: 2, window_radius: 1, swin_window: 4, mlp_ratio: 2 };
        let mut store = ParamStore::<f64>::new();
        let mut wrng = ChaCha8Rng::seed_from_u64(rng.gen());
        let weights = BcaWeights::build(&mut store, &mut wrng, "g", &cfg)?;
        let f0 = rand_param(rng, &[8, 6, 6], -1.0, 1.0);
        let f1 = rand_tensor(rng, &[8, 6, 6], -1.0, 1.0);
        check_fd(move |f0| {
            let out = bca_no_anchor(f0, &f1, &weights, &cfg)?;
            out.output.mul(&out.output)?.mean()
        }, &f0, eps)
    }));
    add("attention.bca_with_anchor", 1e-4, Box::new(|rng, eps| {
        let cfg = AttentionConfig { channels: 8, heads: 2, window_radius: 1, swin_window: 4, mlp_ratio: 2 };
        let mut store = ParamStore::<f64>::new();
        let mut wrng = ChaCha8Rng::seed_from_u64(rng.gen());
        let weights = BcaWeights::build(&mut store, &mut wrng, "g", &cfg)?;
        let z = rand_param(rng, &[8, 6, 6], -1.0, 1.0);
        let f0 = rand_tensor(rng, &[8, 6, 6], -1.0, 1.0);
        let f1 = rand_tensor(rng, &[8, 6, 6], -1.0, 1.0);
        check_fd(move |z| {
            let out = bca_with_anchor(z, &f0, &f1, &weights, &cfg)?;
            out.output.mul(&out.output)?.mean()
        }, &z, eps)
    }));

    // Encoder gradient reaches the input (reduced widths, full path).
    add("biformer.encoder_input", 1e-4, Box::new(|rng, eps| {
        let cfg = BiformerConfig {
            encoder: EncoderConfig { widths: [4, 6, 8], heads: [2, 2, 2], window: 4, mlp_ratio: 2 },
            attention: AttentionConfig { channels: 8, heads: 2, window_radius: 1, swin_window: 4, mlp_ratio: 2 },
            correlation_radius: 1,
            normalize_costs: true,
            ablation: Default::default(),
        };
        let mut store = ParamStore::<f64>::new();
        let mut wrng = ChaCha8Rng::seed_from_u64(rng.gen());
        let weights = BiformerWeights::build(&mut store, &mut wrng, "bi", &cfg)?;
        let frame = rand_param(rng, &[3, 32, 32], 0.0, 1.0);
        check_fd(move |frame| {
            let f = encode_global(frame, &weights)?;
            f.mul(&f)?.mean()
        }, &frame, eps)
    }));

    // Losses.
    add("loss.charbonnier", 1e-6, Box::new(|rng, eps| {
        let x = rand_param(rng, &[3, 5, 5], -1.0, 1.0);
        let cfg = LossConfig::default();
        check_fd(move |x| charbonnier(x, &cfg), &x, eps)
    }));
    add("loss.census", 1e-5, Box::new(|rng, eps| {
        let a = rand_param(rng, &[3, 9, 9], 0.0, 1.0);
        let b = rand_tensor(rng, &[3, 9, 9], 0.0, 1.0);
        let cfg = LossConfig::default();
        check_fd(move |a| census_loss(a, &b, &cfg), &a, eps)
    }));
    add("loss.photometric_through_warp", 1e-4, Box::new(|rng, eps| {
        let gt = rand_tensor(rng, &[3, 9, 9], 0.0, 1.0);
        let i0 = rand_tensor(rng, &[3, 9, 9], 0.0, 1.0);
        let i1 = rand_tensor(rng, &[3, 9, 9], 0.0, 1.0);
        let flow = kink_free_flow(rng, 9, 9);
        let cfg = LossConfig::default();
        check_fd(move |flow| {
            let pair = BilateralPair::from_t1(flow.clone(), 0)?;
            photometric_loss(&gt, &i0, &i1, &pair, &cfg, eps)
        }, &flow)
    }));
    add("loss.synthesis", 1e-5, Box::new(|rng, eps| {
        let gt = rand_tensor(rng, &[3, 9, 9], 0.0, 1.0);
        let it = rand_param(rng, &[3, 9, 9], 0.0, 1.0);
        let cfg = LossConfig::default();
        check_fd(move |it| synthesis_loss(&gt, it, &cfg), &it, eps)
    }));

    // Whole refinement pass and synthesis network.
    add("upsampler.refine_pass", 1e-4, Box::new(|rng, eps| {
        let cfg = UpsamplerConfig {
            shallow_channels: 4,
            embed_channels: 4,
            match_channels: 4,
            aggregate_channels: 8,
            radius: 1,
            max_block_index: 2,
        };
        let mut store = ParamStore::<f64>::new();
        let mut wrng = ChaCha8Rng::seed_from_u64(rng.gen());
        let weights = UpsamplerWeights::build(&mut store, &mut wrng, "up", &cfg)?;
        // Make the residual head nonzero so its path is exercised.
        let mut hw_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let head = store.get("up.decoder.conv3.weight").unwrap();
        head.set_data(rand_vec(&mut hw_rng, head.len(), -0.05, 0.05).into_iter().collect())?;
        let flow = kink_free_flow(rng, 8, 8);
        let f0 = rand_tensor(rng, &[3, 16, 16], 0.0, 1.0);
        let f1 = rand_tensor(rng, &[3, 16, 16], 0.0, 1.0);
        check_fd(move |flow| {
            let pair = BilateralPair::from_t1(flow.clone(), 3)?;
            let out = refine_pass(&pair, &f0, &f1, &weights)?;
            out.to_frame1.data.mul(&out.to_frame1.data)?.mean()
        }, &flow, eps)
    }));
    add("synthesis.network", 1e-4, Box::new(|rng, eps| {
        let cfg = SynthesisConfig { widths: [4, 6, 8] };
        let mut store = ParamStore::<f64>::new();
        let mut wrng = ChaCha8Rng::seed_from_u64(rng.gen());
        let weights = SynthesisWeights::build(&mut store, &mut wrng, "syn", &cfg)?;
        let f0 = rand_tensor(rng, &[3, 16, 16], 0.0, 1.0);
        let f1 = rand_tensor(rng, &[3, 16, 16], 0.0, 1.0);
        let flow = kink_free_flow(rng, 8, 8);
        check_fd(move |flow| {
            let pair = BilateralPair::from_t1(flow.clone(), 1)?;
            let out = synthesize(&f0, &f1, &pair, &weights)?;
            out.mul(&out)?.mean()
        }, &flow, eps)
    }));

    checks
}

/// Runs every check whose name contains `filter` (all when None) for each
/// seed; returns one outcome per (check, seed).
pub fn run_suite(filter: Option<&str>, seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    let mut outcomes = Vec::new();
    for (name, tol, f) in all_checks() {
        if let Some(pat) = filter {
            if !name.contains(pat) {
                continue;
            }
        }
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let max_err = f(&mut rng)?;
            outcomes.push(CheckOutcome {
                name: name.to_string(),
                seed,
                max_err,
                tolerance: tol,
                pass: max_err < tol,
            });
        }
    }
    Ok(outcomes)
}

/// Names of all registered checks.
pub fn check_names() -> Vec<&'static str> {
    all_checks().into_iter().map(|(n, _, _)| n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_core_checks_pass() {
        let outcomes = run_suite(Some("core.add_mul"), &[1]).unwrap();
        assert!(!outcomes.is_empty());
        for o in &outcomes {
            assert!(o.pass, "{} err {}", o.name, o.max_err);
        }
    }

    #[test]
    fn fault_injection_breaks_the_mul_check() {
        crate::tensor::inject_vjp_fault(1.1);
        let outcomes = run_suite(Some("core.add_mul"), &[1]).unwrap();
        crate::tensor::clear_vjp_fault();
        assert!(outcomes.iter().any(|o| !o.pass), "fault not detected");
    }
}
