//! Bilateral attention: sliding-window cross attention with and without an
//! anchor feature, shifted-window self-attention blocks, and the nine-block
//! stack that turns a pair of global feature maps into the bilateral feature
//! used for motion prediction.
//!
//! Logits follow the symmetric-window geometry: in pair form queries are read
//! at `x - d` and keys at `x + d`; in anchor form queries sit at `x` and keys
//! at `x -/+ d` along the linear trajectory through `x`. Out-of-frame
//! displacements are excluded from the softmax (probability zero), while the
//! raw logits use zero-padded reads.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::costvol::DisplacementWindow;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Mlp, Projection};
use crate::tensor::{Init, ParamStore, Scalar, Tensor};

/// Shared attention hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    /// Sliding-window radius for the BCA blocks.
    pub window_radius: usize,
    /// Window size for the Swin blocks.
    pub swin_window: usize,
    pub mlp_ratio: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { channels: 96, heads: 4, window_radius: 4, swin_window: 4, mlp_ratio: 4 }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        if self.window_radius == 0 || self.swin_window == 0 {
            return Err(Error::Config("attention window sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Which side of the symmetric window keys and values are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisplacementSign {
    /// Read at `x - d` (toward frame 0).
    Minus,
    /// Read at `x + d` (toward frame 1).
    Plus,
}

impl DisplacementSign {
    fn factor(self) -> isize {
        match self {
            DisplacementSign::Minus => -1,
            DisplacementSign::Plus => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Queries at `x - d`, keys/values at `x + d`.
    SymmetricPair,
    /// Queries at `x`, keys/values at `x + sign * d`.
    Anchor,
}

fn split_chw(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::shape(op, format!("expected [C, H, W], got {:?}", other))),
    }
}

fn in_frame(y: isize, x: isize, h: usize, w: usize) -> bool {
    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w
}

/// Validity mask over `[heads, H, W, D]`: a displacement is valid when both
/// symmetric endpoints `x - d` and `x + d` are in frame. Used by pair and
/// anchor softmaxes alike (the anchor form still aggregates values from both
/// endpoints of the trajectory).
pub fn pair_window_mask(h: usize, w: usize, radius: usize, heads: usize) -> Rc<Vec<bool>> {
    let window = DisplacementWindow::new(radius);
    let d_count = window.len();
    let mut plane = vec![false; h * w * d_count];
    for y in 0..h as isize {
        for x in 0..w as isize {
            for (di, (dy, dx)) in window.offsets().enumerate() {
                plane[(y as usize * w as usize + x as usize) * d_count + di] =
                    in_frame(y - dy, x - dx, h, w) && in_frame(y + dy, x + dx, h, w);
            }
        }
    }
    let mut mask = Vec::with_capacity(heads * plane.len());
    for _ in 0..heads {
        mask.extend_from_slice(&plane);
    }
    Rc::new(mask)
}

/// Pair-form logits `[heads, H, W, D]`: per-head dot products of queries at
/// `x - d` with keys at `x + d`, zero-padded reads.
pub fn sliding_logits_pair<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    radius: usize,
    heads: usize,
) -> Result<Tensor<S>> {
    sliding_logits(q, k, radius, heads, None)
}

/// Anchor-form logits: queries at `x`, keys at `x + sign * d`.
pub fn sliding_logits_anchor<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    sign: DisplacementSign,
    radius: usize,
    heads: usize,
) -> Result<Tensor<S>> {
    sliding_logits(q, k, radius, heads, Some(sign.factor()))
}

/// Shared kernel: `anchor_sign = None` is the pair form; `Some(s)` reads the
/// query at `x` and the key at `x + s*d`.
fn sliding_logits<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    radius: usize,
    heads: usize,
    anchor_sign: Option<isize>,
) -> Result<Tensor<S>> {
    if q.shape() != k.shape() {
        return Err(Error::shape("sliding_logits", format!("{:?} vs {:?}", q.shape(), k.shape())));
    }
    let (c, h, w) = split_chw("sliding_logits", q)?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape("sliding_logits", format!("{c} channels over {heads} heads")));
    }
    let head_dim = c / heads;
    let window = DisplacementWindow::new(radius);
    let d_count = window.len();
    let hw = h * w;

    let qd = q.data();
    let kd = k.data();
    let mut out = vec![S::ZERO; heads * hw * d_count];
    for hd in 0..heads {
        for y in 0..h as isize {
            for x in 0..w as isize {
                for (di, (dy, dx)) in window.offsets().enumerate() {
                    let (qy, qx) = match anchor_sign {
                        None => (y - dy, x - dx),
                        Some(_) => (y, x),
                    };
                    let s = anchor_sign.unwrap_or(1);
                    let (ky, kx) = (y + s * dy, x + s * dx);
                    if !in_frame(qy, qx, h, w) || !in_frame(ky, kx, h, w) {
                        continue;
                    }
                    let pq = qy as usize * w + qx as usize;
                    let pk = ky as usize * w + kx as usize;
                    let mut acc = 0.0f64;
                    for ch in hd * head_dim..(hd + 1) * head_dim {
                        acc += qd[ch * hw + pq].to_f64() * kd[ch * hw + pk].to_f64();
                    }
                    out[((hd * h as usize + y as usize) * w as usize + x as usize) * d_count + di] =
                        S::from_f64(acc);
                }
            }
        }
    }

    let q_snap = q.data();
    let k_snap = k.data();
    Tensor::from_op(
        "sliding_logits",
        vec![heads, h, w, d_count],
        out,
        vec![q.clone(), k.clone()],
        move |g| {
            let window = DisplacementWindow::new(radius);
            let mut dq = vec![S::ZERO; c * hw];
            let mut dk = vec![S::ZERO; c * hw];
            for hd in 0..heads {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        for (di, (dy, dx)) in window.offsets().enumerate() {
                            let gv = g[((hd * h + y as usize) * w + x as usize) * d_count + di].to_f64();
                            if gv == 0.0 {
                                continue;
                            }
                            let (qy, qx) = match anchor_sign {
                                None => (y - dy, x - dx),
                                Some(_) => (y, x),
                            };
                            let s = anchor_sign.unwrap_or(1);
                            let (ky, kx) = (y + s * dy, x + s * dx);
                            if !in_frame(qy, qx, h, w) || !in_frame(ky, kx, h, w) {
                                continue;
                            }
                            let pq = qy as usize * w + qx as usize;
                            let pk = ky as usize * w + kx as usize;
                            for ch in hd * head_dim..(hd + 1) * head_dim {
                                let iq = ch * hw + pq;
                                let ik = ch * hw + pk;
                                dq[iq] = dq[iq].add(S::from_f64(gv * k_snap[ik].to_f64()));
                                dk[ik] = dk[ik].add(S::from_f64(gv * q_snap[iq].to_f64()));
                            }
                        }
                    }
                }
            }
            vec![Some(dq), Some(dk)]
        },
    )
}

/// Aggregates values along the displacement window with attention weights:
/// `Z_c(x) = sum_d probs[head(c)](x, d) * V_c(x + sign*d)`, zero-padded reads.
pub fn displacement_aggregate<S: Scalar>(
    probs: &Tensor<S>,
    v: &Tensor<S>,
    sign: DisplacementSign,
    radius: usize,
) -> Result<Tensor<S>> {
    let ps = probs.shape();
    if ps.len() != 4 {
        return Err(Error::shape("displacement_aggregate", format!("probs {:?}", ps)));
    }
    let (heads, h, w, d_count) = (ps[0], ps[1], ps[2], ps[3]);
    let window = DisplacementWindow::new(radius);
    if d_count != window.len() {
        return Err(Error::shape("displacement_aggregate", "window size mismatch"));
    }
    let (c, vh, vw) = split_chw("displacement_aggregate", v)?;
    if vh != h || vw != w || c % heads != 0 {
        return Err(Error::shape(
            "displacement_aggregate",
            format!("values {:?} vs probs {:?}", v.shape(), ps),
        ));
    }
    let head_dim = c / heads;
    let hw = h * w;
    let s = sign.factor();

    let pd = probs.data();
    let vd = v.data();
    let mut out = vec![S::ZERO; c * hw];
    for ch in 0..c {
        let hd = ch / head_dim;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f64;
                for (di, (dy, dx)) in window.offsets().enumerate() {
                    let (vy, vx) = (y + s * dy, x + s * dx);
                    if !in_frame(vy, vx, h, w) {
                        continue;
                    }
                    let p = pd[((hd * h + y as usize) * w + x as usize) * d_count + di].to_f64();
                    acc += p * vd[ch * hw + vy as usize * w + vx as usize].to_f64();
                }
                out[ch * hw + y as usize * w + x as usize] = S::from_f64(acc);
            }
        }
    }

    let p_snap = probs.data();
    let v_snap = v.data();
    Tensor::from_op(
        "displacement_aggregate",
        vec![c, h, w],
        out,
        vec![probs.clone(), v.clone()],
        move |g| {
            let window = DisplacementWindow::new(radius);
            let mut dp = vec![S::ZERO; heads * hw * d_count];
            let mut dv = vec![S::ZERO; c * hw];
            for ch in 0..c {
                let hd = ch / head_dim;
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let gv = g[ch * hw + y as usize * w + x as usize].to_f64();
                        if gv == 0.0 {
                            continue;
                        }
                        for (di, (dy, dx)) in window.offsets().enumerate() {
                            let (vy, vx) = (y + s * dy, x + s * dx);
                            if !in_frame(vy, vx, h, w) {
                                continue;
                            }
                            let pi = ((hd * h + y as usize) * w + x as usize) * d_count + di;
                            let vi = ch * hw + vy as usize * w + vx as usize;
                            dp[pi] = dp[pi].add(S::from_f64(gv * v_snap[vi].to_f64()));
                            dv[vi] = dv[vi].add(S::from_f64(gv * p_snap[pi].to_f64()));
                        }
                    }
                }
            }
            vec![Some(dp), Some(dv)]
        },
    )
}

/// One sliding cross-attention pass: logits, masked softmax (with optional
/// learnable position bias), and value aggregation.
pub struct SlidingAttention<S: Scalar> {
    pub attended: Tensor<S>,
    pub logits: Tensor<S>,
    pub probs: Tensor<S>,
}

/// The composable attention primitive. In pair mode `sign` selects where
/// values are read (`Plus` matches keys at `x + d`); in anchor mode it also
/// flips the key side.
#[allow(clippy::too_many_arguments)]
pub fn sliding_cross_attention<S: Scalar>(
    q_src: &Tensor<S>,
    k_src: &Tensor<S>,
    v_src: &Tensor<S>,
    mode: AttentionMode,
    sign: DisplacementSign,
    radius: usize,
    heads: usize,
    position_bias: Option<&Tensor<S>>,
) -> Result<SlidingAttention<S>> {
    let (_, h, w) = split_chw("sliding_cross_attention", q_src)?;
    let logits = match mode {
        AttentionMode::SymmetricPair => sliding_logits_pair(q_src, k_src, radius, heads)?,
        AttentionMode::Anchor => sliding_logits_anchor(q_src, k_src, sign, radius, heads)?,
    };
    let biased = match position_bias {
        Some(b) => logits.add_bias_lastdim(b)?,
        None => logits.clone(),
    };
    let mask = pair_window_mask(h, w, radius, heads);
    let probs = biased.masked_softmax_lastdim(&mask)?;
    let attended = displacement_aggregate(&probs, v_src, sign, radius)?;
    Ok(SlidingAttention { attended, logits, probs })
}

/// Weights for one bilateral cross-attention block. The projections are
/// shared between the two directions (and, in anchor form, between the two
/// target frames).
pub struct BcaWeights<S: Scalar> {
    pub wq: Projection<S>,
    pub wk: Projection<S>,
    pub wv: Projection<S>,
    pub position_bias: Tensor<S>,
    pub merge: Projection<S>,
    pub norm: LayerNorm<S>,
    pub mlp: Mlp<S>,
}

impl<S: Scalar> BcaWeights<S> {
    pub fn build(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        let c = cfg.channels;
        let d_count = DisplacementWindow::new(cfg.window_radius).len();
        Ok(BcaWeights {
            wq: Projection::build(store, rng, &format!("{name}.wq"), c, c, false)?,
            wk: Projection::build(store, rng, &format!("{name}.wk"), c, c, false)?,
            wv: Projection::build(store, rng, &format!("{name}.wv"), c, c, false)?,
            position_bias: store.get_or_init(
                &format!("{name}.position_bias"),
                &[cfg.heads, d_count],
                Init::Zeros,
                rng,
            )?,
            merge: Projection::build(store, rng, &format!("{name}.merge"), 2 * c, c, true)?,
            norm: LayerNorm::build(store, rng, &format!("{name}.norm"), c)?,
            mlp: Mlp::build(store, rng, &format!("{name}.mlp"), c, cfg.mlp_ratio)?,
        })
    }
}

/// Output of a BCA block with its two attended value features, kept for
/// inspection by tests.
pub struct BcaOutput<S: Scalar> {
    pub output: Tensor<S>,
    pub toward_frame0: Tensor<S>,
    pub toward_frame1: Tensor<S>,
    pub probs: Vec<Tensor<S>>,
}

/// Merge path shared by both block types: concat -> linear -> layer norm,
/// then a residual MLP.
fn merge_attended<S: Scalar>(
    z0: &Tensor<S>,
    z1: &Tensor<S>,
    weights: &BcaWeights<S>,
) -> Result<Tensor<S>> {
    let cat = Tensor::concat(&[z0, z1], 0)?;
    let merged = weights.norm.apply(&weights.merge.apply(&cat)?)?;
    merged.add(&weights.mlp.apply(&merged)?)
}

/// Bilateral cross attention without anchor: matches `F0(x - d)` against
/// `F1(x + d)`, aggregates values from each frame in turn (roles reversed for
/// the second direction), then merges.
pub fn bca_no_anchor<S: Scalar>(
    f0: &Tensor<S>,
    f1: &Tensor<S>,
    weights: &BcaWeights<S>,
    cfg: &AttentionConfig,
) -> Result<BcaOutput<S>> {
    if f0.shape() != f1.shape() {
        return Err(Error::shape("bca_no_anchor", format!("{:?} vs {:?}", f0.shape(), f1.shape())));
    }
    let scale = S::from_f64(1.0 / (cfg.head_dim() as f64).sqrt());
    // Queries from frame 0, keys/values from frame 1.
    let q0 = weights.wq.apply(f0)?.mul_scalar(scale)?;
    let k1 = weights.wk.apply(f1)?;
    let v1 = weights.wv.apply(f1)?;
    let toward1 = sliding_cross_attention(
        &q0,
        &k1,
        &v1,
        AttentionMode::SymmetricPair,
        DisplacementSign::Plus,
        cfg.window_radius,
        cfg.heads,
        Some(&weights.position_bias),
    )?;
    // Roles reversed: queries from frame 1, keys/values from frame 0.
    let q1 = weights.wq.apply(f1)?.mul_scalar(scale)?;
    let k0 = weights.wk.apply(f0)?;
    let v0 = weights.wv.apply(f0)?;
    let toward0 = sliding_cross_attention(
        &q1,
        &k0,
        &v0,
        AttentionMode::SymmetricPair,
        DisplacementSign::Plus,
        cfg.window_radius,
        cfg.heads,
        Some(&weights.position_bias),
    )?;
    let output = merge_attended(&toward0.attended, &toward1.attended, weights)?;
    Ok(BcaOutput {
        output,
        toward_frame0: toward0.attended,
        toward_frame1: toward1.attended,
        probs: vec![toward0.probs, toward1.probs],
    })
}

/// Bilateral cross attention with anchor: queries from the anchor feature,
/// keys/values from both frames with shared projections, one softmax over the
/// summed trajectory logits shared by both value aggregations.
pub fn bca_with_anchor<S: Scalar>(
    anchor: &Tensor<S>,
    f0: &Tensor<S>,
    f1: &Tensor<S>,
    weights: &BcaWeights<S>,
    cfg: &AttentionConfig,
) -> Result<BcaOutput<S>> {
    if f0.shape() != f1.shape() || anchor.shape() != f0.shape() {
        return Err(Error::shape(
            "bca_with_anchor",
            format!("anchor {:?}, f0 {:?}, f1 {:?}", anchor.shape(), f0.shape(), f1.shape()),
        ));
    }
    let (_, h, w) = split_chw("bca_with_anchor", anchor)?;
    let scale = S::from_f64(1.0 / (cfg.head_dim() as f64).sqrt());
    let q = weights.wq.apply(anchor)?.mul_scalar(scale)?;
    let k0 = weights.wk.apply(f0)?;
    let v0 = weights.wv.apply(f0)?;
    let k1 = weights.wk.apply(f1)?;
    let v1 = weights.wv.apply(f1)?;

    let logits0 = sliding_logits_anchor(&q, &k0, DisplacementSign::Minus, cfg.window_radius, cfg.heads)?;
    let logits1 = sliding_logits_anchor(&q, &k1, DisplacementSign::Plus, cfg.window_radius, cfg.heads)?;
    let combined = logits0.add(&logits1)?.add_bias_lastdim(&weights.position_bias)?;
    let mask = pair_window_mask(h, w, cfg.window_radius, cfg.heads);
    let probs = combined.masked_softmax_lastdim(&mask)?;

    let z0 = displacement_aggregate(&probs, &v0, DisplacementSign::Minus, cfg.window_radius)?;
    let z1 = displacement_aggregate(&probs, &v1, DisplacementSign::Plus, cfg.window_radius)?;
    let output = merge_attended(&z0, &z1, weights)?;
    Ok(BcaOutput { output, toward_frame0: z0, toward_frame1: z1, probs: vec![probs] })
}

// ---------------------------------------------------------------------------
// Shifted-window self-attention
// ---------------------------------------------------------------------------

/// Weights of one Swin block (pre-norm layout).
pub struct SwinWeights<S: Scalar> {
    pub norm1: LayerNorm<S>,
    pub wq: Projection<S>,
    pub wk: Projection<S>,
    pub wv: Projection<S>,
    pub proj: Projection<S>,
    pub bias_table: Tensor<S>,
    pub norm2: LayerNorm<S>,
    pub mlp: Mlp<S>,
}

impl<S: Scalar> SwinWeights<S> {
    pub fn build(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        let c = cfg.channels;
        let span = 2 * cfg.swin_window - 1;
        Ok(SwinWeights {
            norm1: LayerNorm::build(store, rng, &format!("{name}.norm1"), c)?,
            wq: Projection::build(store, rng, &format!("{name}.wq"), c, c, false)?,
            wk: Projection::build(store, rng, &format!("{name}.wk"), c, c, false)?,
            wv: Projection::build(store, rng, &format!("{name}.wv"), c, c, false)?,
            proj: Projection::build(store, rng, &format!("{name}.proj"), c, c, true)?,
            bias_table: store.get_or_init(
                &format!("{name}.bias_table"),
                &[cfg.heads, span * span],
                Init::TruncNormal { std: 0.02 },
                rng,
            )?,
            norm2: LayerNorm::build(store, rng, &format!("{name}.norm2"), c)?,
            mlp: Mlp::build(store, rng, &format!("{name}.mlp"), c, cfg.mlp_ratio)?,
        })
    }
}

/// Token source map for a padded, cyclically shifted window grid. For every
/// padded-grid position, `source` holds the original pixel index (or None for
/// padding) and `zone` the shift region id used for cross-boundary masking.
struct WindowGrid {
    hp: usize,
    wp: usize,
    source: Vec<Option<usize>>,
    zone: Vec<u8>,
}

fn window_grid(h: usize, w: usize, window: usize, shift: usize) -> WindowGrid {
    let hp = h.div_ceil(window) * window;
    let wp = w.div_ceil(window) * window;
    let band = |c: usize, len: usize| -> u8 {
        if shift == 0 || len < window {
            0
        } else if c < len - window {
            0
        } else if c < len - shift {
            1
        } else {
            2
        }
    };
    let mut source = vec![None; hp * wp];
    let mut zone = vec![0u8; hp * wp];
    for y in 0..hp {
        for x in 0..wp {
            // Roll by (-shift, -shift): padded cell (y, x) shows original
            // padded coordinate ((y + shift) mod hp, (x + shift) mod wp).
            let sy = (y + shift) % hp;
            let sx = (x + shift) % wp;
            zone[y * wp + x] = band(sy, hp) * 3 + band(sx, wp);
            if sy < h && sx < w {
                source[y * wp + x] = Some(sy * w + sx);
            }
        }
    }
    WindowGrid { hp, wp, source, zone }
}

/// Windowed multi-head self-attention with relative position bias, optional
/// cyclic shift with cross-boundary masking, and automatic pad-and-crop for
/// dims not divisible by the window. Returns the attended map and a snapshot
/// of every attention row (per window, head, query) for normalization checks.
#[allow(clippy::too_many_arguments)]
pub fn swin_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    bias_table: &Tensor<S>,
    window: usize,
    shift: usize,
    heads: usize,
) -> Result<(Tensor<S>, Vec<Vec<f64>>)> {
    let (c, h, w) = split_chw("swin_attention", q)?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("swin_attention", "q/k/v shapes differ"));
    }
    if window == 0 || shift >= window {
        return Err(Error::invalid("swin_attention", format!("window {window}, shift {shift}")));
    }
    if c % heads != 0 {
        return Err(Error::shape("swin_attention", format!("{c} channels over {heads} heads")));
    }
    let span = 2 * window - 1;
    if bias_table.shape() != [heads, span * span] {
        return Err(Error::shape(
            "swin_attention",
            format!("bias table {:?}, expected [{heads}, {}]", bias_table.shape(), span * span),
        ));
    }
    let head_dim = c / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let grid = window_grid(h, w, window, shift);
    let (hp, wp) = (grid.hp, grid.wp);
    let tokens = window * window;
    let n_win = (hp / window) * (wp / window);
    let hw = h * w;

    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let bd = bias_table.data();

    // Relative-position bias index per (query token, key token).
    let rel_index: Vec<usize> = (0..tokens * tokens)
        .map(|ij| {
            let (i, j) = (ij / tokens, ij % tokens);
            let (yi, xi) = (i / window, i % window);
            let (yj, xj) = (j / window, j % window);
            (yi + window - 1 - yj) * span + (xi + window - 1 - xj)
        })
        .collect();

    let mut out = vec![S::ZERO; c * hw];
    let mut all_probs: Vec<Vec<f64>> = Vec::with_capacity(n_win * heads);
    let mut probs_store: Vec<f64> = Vec::with_capacity(n_win * heads * tokens * tokens);
    for wy in 0..hp / window {
        for wx in 0..wp / window {
            // Gather per-window token metadata.
            let cell = |t: usize| -> usize {
                let (ty, tx) = (t / window, t % window);
                (wy * window + ty) * wp + wx * window + tx
            };
            for hd in 0..heads {
                let mut probs = vec![0.0f64; tokens * tokens];
                for i in 0..tokens {
                    let ci = cell(i);
                    let src_i = grid.source[ci];
                    let mut logits = vec![f64::NEG_INFINITY; tokens];
                    for j in 0..tokens {
                        let cj = cell(j);
                        let allowed = match (src_i, grid.source[cj]) {
                            (Some(_), Some(_)) => grid.zone[ci] == grid.zone[cj],
                            _ => i == j,
                        };
                        if !allowed && i != j {
                            continue;
                        }
                        let mut dot = 0.0f64;
                        if let (Some(pi), Some(pj)) = (src_i, grid.source[cj]) {
                            for ch in hd * head_dim..(hd + 1) * head_dim {
                                dot += qd[ch * hw + pi].to_f64() * kd[ch * hw + pj].to_f64();
                            }
                        }
                        logits[j] = dot * scale + bd[hd * span * span + rel_index[i * tokens + j]].to_f64();
                    }
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0f64;
                    for j in 0..tokens {
                        if logits[j] > f64::NEG_INFINITY {
                            let e = (logits[j] - max).exp();
                            probs[i * tokens + j] = e;
                            sum += e;
                        }
                    }
                    for j in 0..tokens {
                        probs[i * tokens + j] /= sum;
                    }
                    // Aggregate values for real query tokens.
                    if let Some(pi) = src_i {
                        for ch in hd * head_dim..(hd + 1) * head_dim {
                            let mut acc = 0.0f64;
                            for j in 0..tokens {
                                if let Some(pj) = grid.source[cell(j)] {
                                    acc += probs[i * tokens + j] * vd[ch * hw + pj].to_f64();
                                }
                            }
                            out[ch * hw + pi] = S::from_f64(acc);
                        }
                    }
                }
                all_probs.push(probs.clone());
                probs_store.extend_from_slice(&probs);
            }
        }
    }

    let q_snap = q.data();
    let k_snap = k.data();
    let v_snap = v.data();
    let out_t = Tensor::from_op(
        "swin_attention",
        vec![c, h, w],
        out,
        vec![q.clone(), k.clone(), v.clone(), bias_table.clone()],
        move |g| {
            let grid = window_grid(h, w, window, shift);
            let mut dq = vec![S::ZERO; c * hw];
            let mut dk = vec![S::ZERO; c * hw];
            let mut dv = vec![S::ZERO; c * hw];
            let mut dbias = vec![S::ZERO; heads * span * span];
            let mut widx = 0usize;
            for wy in 0..hp / window {
                for wx in 0..wp / window {
                    let cell = |t: usize| -> usize {
                        let (ty, tx) = (t / window, t % window);
                        (wy * window + ty) * wp + wx * window + tx
                    };
                    for hd in 0..heads {
                        let probs = &probs_store[widx * tokens * tokens..(widx + 1) * tokens * tokens];
                        widx += 1;
                        for i in 0..tokens {
                            let Some(pi) = grid.source[cell(i)] else { continue };
                            // dprobs and the softmax backward for row i.
                            let mut dprobs = vec![0.0f64; tokens];
                            for j in 0..tokens {
                                if probs[i * tokens + j] == 0.0 {
                                    continue;
                                }
                                if let Some(pj) = grid.source[cell(j)] {
                                    let mut acc = 0.0f64;
                                    for ch in hd * head_dim..(hd + 1) * head_dim {
                                        acc += g[ch * hw + pi].to_f64() * v_snap[ch * hw + pj].to_f64();
                                    }
                                    dprobs[j] = acc;
                                }
                                // dV
                                if let Some(pj) = grid.source[cell(j)] {
                                    let p = probs[i * tokens + j];
                                    for ch in hd * head_dim..(hd + 1) * head_dim {
                                        let dvi = ch * hw + pj;
                                        dv[dvi] = dv[dvi]
                                            .add(S::from_f64(p * g[ch * hw + pi].to_f64()));
                                    }
                                }
                            }
                            let dot: f64 = (0..tokens)
                                .map(|j| probs[i * tokens + j] * dprobs[j])
                                .sum();
                            for j in 0..tokens {
                                let p = probs[i * tokens + j];
                                if p == 0.0 {
                                    continue;
                                }
                                let dlogit = p * (dprobs[j] - dot);
                                let rel = {
                                    let (yi, xi) = (i / window, i % window);
                                    let (yj, xj) = (j / window, j % window);
                                    (yi + window - 1 - yj) * span + (xi + window - 1 - xj)
                                };
                                let bi = hd * span * span + rel;
                                dbias[bi] = dbias[bi].add(S::from_f64(dlogit));
                                if let Some(pj) = grid.source[cell(j)] {
                                    for ch in hd * head_dim..(hd + 1) * head_dim {
                                        let qi = ch * hw + pi;
                                        let ki = ch * hw + pj;
                                        dq[qi] = dq[qi].add(S::from_f64(
                                            dlogit * scale * k_snap[ki].to_f64(),
                                        ));
                                        dk[ki] = dk[ki].add(S::from_f64(
                                            dlogit * scale * q_snap[qi].to_f64(),
                                        ));
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(dq), Some(dk), Some(dv), Some(dbias)]
        },
    )?;
    Ok((out_t, all_probs))
}

/// One Swin block: pre-norm windowed attention with residual, then a
/// pre-norm MLP with residual.
pub fn swin_block<S: Scalar>(
    x: &Tensor<S>,
    weights: &SwinWeights<S>,
    cfg: &AttentionConfig,
    shifted: bool,
) -> Result<Tensor<S>> {
    let shift = if shifted { cfg.swin_window / 2 } else { 0 };
    let normed = weights.norm1.apply(x)?;
    let q = weights.wq.apply(&normed)?;
    let k = weights.wk.apply(&normed)?;
    let v = weights.wv.apply(&normed)?;
    let (attended, _) = swin_attention(&q, &k, &v, &weights.bias_table, cfg.swin_window, shift, cfg.heads)?;
    let x = x.add(&weights.proj.apply(&attended)?)?;
    let y = weights.norm2.apply(&x)?;
    x.add(&weights.mlp.apply(&y)?)
}

// ---------------------------------------------------------------------------
// The nine-block bilateral attention stack
// ---------------------------------------------------------------------------

/// Block composition flags (each cross-attention block can be dropped while
/// the six Swin blocks remain).
#[derive(Debug, Clone, Copy)]
pub struct StackAblation {
    pub bca_no_anchor: bool,
    pub bca_anchor_first: bool,
    pub bca_anchor_second: bool,
}

impl Default for StackAblation {
    fn default() -> Self {
        StackAblation { bca_no_anchor: true, bca_anchor_first: true, bca_anchor_second: true }
    }
}

pub struct StackWeights<S: Scalar> {
    /// Seed projection of concat(F0, F1), used when the first cross-attention
    /// block is disabled but an anchor stream is still needed.
    pub seed: Option<Projection<S>>,
    pub bca_a: Option<BcaWeights<S>>,
    pub bca_pa1: Option<BcaWeights<S>>,
    pub bca_pa2: Option<BcaWeights<S>>,
    pub swin: Vec<SwinWeights<S>>,
    pub ablation: StackAblation,
}

impl<S: Scalar> StackWeights<S> {
    pub fn build(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &AttentionConfig,
        ablation: StackAblation,
    ) -> Result<Self> {
        cfg.validate()?;
        let seed = if ablation.bca_no_anchor {
            None
        } else {
            Some(Projection::build(store, rng, &format!("{name}.seed"), 2 * cfg.channels, cfg.channels, true)?)
        };
        let bca_a = ablation
            .bca_no_anchor
            .then(|| BcaWeights::build(store, rng, &format!("{name}.bca_a"), cfg))
            .transpose()?;
        let bca_pa1 = ablation
            .bca_anchor_first
            .then(|| BcaWeights::build(store, rng, &format!("{name}.bca_pa1"), cfg))
            .transpose()?;
        let bca_pa2 = ablation
            .bca_anchor_second
            .then(|| BcaWeights::build(store, rng, &format!("{name}.bca_pa2"), cfg))
            .transpose()?;
        let swin = (0..6)
            .map(|i| SwinWeights::build(store, rng, &format!("{name}.swin{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(StackWeights { seed, bca_a, bca_pa1, bca_pa2, swin, ablation })
    }
}

/// Output of the stack: the final bilateral feature plus every intermediate
/// stage in order.
pub struct StackOutput<S: Scalar> {
    pub bilateral_feature: Tensor<S>,
    pub stages: Vec<Tensor<S>>,
}

/// Runs the attention sequence: cross attention (or seed projection), two
/// Swin blocks (second shifted), then two anchor cross-attention + Swin-pair
/// groups. Disabled cross-attention blocks are skipped without changing any
/// shapes.
pub fn bilateral_attention_stack<S: Scalar>(
    f0: &Tensor<S>,
    f1: &Tensor<S>,
    weights: &StackWeights<S>,
    cfg: &AttentionConfig,
) -> Result<StackOutput<S>> {
    if f0.shape() != f1.shape() {
        return Err(Error::shape("bilateral_attention_stack", format!("{:?} vs {:?}", f0.shape(), f1.shape())));
    }
    let mut stages: Vec<Tensor<S>> = Vec::with_capacity(9);
    let mut z = match (&weights.bca_a, &weights.seed) {
        (Some(w), _) => bca_no_anchor(f0, f1, w, cfg)?.output,
        (None, Some(seed)) => seed.apply(&Tensor::concat(&[f0, f1], 0)?)?,
        (None, None) => {
            return Err(Error::Config(
                "anchor cross attention requires either the first cross-attention block or the seed projection".into(),
            ))
        }
    };
    stages.push(z.clone());

    let mut swin_iter = weights.swin.iter();
    for group in 0..3 {
        if group == 1 {
            if let Some(w) = &weights.bca_pa1 {
                z = bca_with_anchor(&z, f0, f1, w, cfg)?.output;
                stages.push(z.clone());
            }
        } else if group == 2 {
            if let Some(w) = &weights.bca_pa2 {
                z = bca_with_anchor(&z, f0, f1, w, cfg)?.output;
                stages.push(z.clone());
            }
        }
        let plain = swin_iter.next().expect("six swin blocks");
        z = swin_block(&z, plain, cfg, false)?;
        stages.push(z.clone());
        let shifted = swin_iter.next().expect("six swin blocks");
        z = swin_block(&z, shifted, cfg, true)?;
        stages.push(z.clone());
    }
    Ok(StackOutput { bilateral_feature: z, stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[c, h, w], data).unwrap()
    }

    #[test]
    fn pair_logits_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_map(&mut rng, 4, 8, 8);
        let k = random_map(&mut rng, 4, 8, 8);
        let logits = sliding_logits_pair(&q, &k, 2, 2).unwrap();
        let want = oracle::naive_sliding_logits_pair(&q.to_vec(), &k.to_vec(), 4, 8, 8, 2, 2);
        // The optimized path leaves out-of-frame logits at zero; so does the
        // oracle (zero-padded reads make at least one factor vanish only when
        // both reads exist... the oracle zeroes any out-of-frame factor).
        let got: Vec<f64> = logits.data().to_vec();
        assert!(oracle::max_rel_diff(&got, &want) < 1e-12);
    }

    #[test]
    fn anchor_logits_match_oracle_both_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = random_map(&mut rng, 4, 6, 7);
        let k = random_map(&mut rng, 4, 6, 7);
        for (sign, s) in [(DisplacementSign::Minus, -1), (DisplacementSign::Plus, 1)] {
            let logits = sliding_logits_anchor(&q, &k, sign, 2, 2).unwrap();
            let want = oracle::naive_sliding_logits_anchor(&q.to_vec(), &k.to_vec(), 4, 6, 7, 2, 2, s);
            assert!(oracle::max_rel_diff(&logits.to_vec(), &want) < 1e-12);
        }
    }

    #[test]
    fn zero_queries_give_uniform_rows() {
        let q = Tensor::<f64>::zeros(&[4, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = random_map(&mut rng, 4, 5, 5);
        let v = random_map(&mut rng, 4, 5, 5);
        let out = sliding_cross_attention(
            &q,
            &k,
            &v,
            AttentionMode::SymmetricPair,
            DisplacementSign::Plus,
            1,
            2,
            None,
        )
        .unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        // Center pixel: all 9 displacements valid -> uniform 1/9.
        let d = out.probs.data();
        let d_count = 9;
        let center = (2 * 5 + 2) * d_count;
        for di in 0..d_count {
            assert!((d[center + di] - 1.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn r0_anchor_collapses_to_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let q = random_map(&mut rng, 4, 4, 4);
        let k = random_map(&mut rng, 4, 4, 4);
        let v = random_map(&mut rng, 4, 4, 4);
        let out = sliding_cross_attention(
            &q,
            &k,
            &v,
            AttentionMode::Anchor,
            DisplacementSign::Plus,
            0,
            2,
            None,
        )
        .unwrap();
        let (got, want) = (out.attended.data(), v.data());
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let q = random_map(&mut rng, 8, 6, 6);
        let k = random_map(&mut rng, 8, 6, 6);
        let v = random_map(&mut rng, 8, 6, 6);
        let out = sliding_cross_attention(
            &q,
            &k,
            &v,
            AttentionMode::SymmetricPair,
            DisplacementSign::Plus,
            2,
            4,
            None,
        )
        .unwrap();
        let d = out.probs.data();
        let d_count = 25;
        for row in 0..d.len() / d_count {
            let sum: f64 = d[row * d_count..(row + 1) * d_count].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {row} sums to {sum}");
        }
    }

    #[test]
    fn aggregate_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let heads = 2;
        let (h, w, r) = (6, 6, 2);
        let d_count = (2 * r + 1) * (2 * r + 1);
        let raw: Vec<f64> = (0..heads * h * w * d_count).map(|_| rng.gen_range(0.0..1.0)).collect();
        let probs = Tensor::from_vec(&[heads, h, w, d_count], raw.clone()).unwrap();
        let v = random_map(&mut rng, 4, h, w);
        for (sign, s) in [(DisplacementSign::Minus, -1), (DisplacementSign::Plus, 1)] {
            let z = displacement_aggregate(&probs, &v, sign, r).unwrap();
            let want = oracle::naive_displacement_aggregate(&raw, &v.to_vec(), 4, h, w, r, heads, s);
            assert!(oracle::max_rel_diff(&z.to_vec(), &want) < 1e-12);
        }
    }

    #[test]
    fn constant_values_give_constant_output() {
        // With convex weights, a per-channel constant value map stays
        // constant no matter what the attention weights are (interior pixels
        // where every displacement is valid).
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = AttentionConfig { channels: 8, heads: 2, window_radius: 1, swin_window: 4, mlp_ratio: 2 };
        let mut store = ParamStore::<f64>::new();
        let weights = BcaWeights::build(&mut store, &mut rng, "t", &cfg).unwrap();
        let f0 = random_map(&mut rng, 8, 6, 6);
        let mut c1 = Vec::new();
        for ch in 0..8 {
            c1.extend(std::iter::repeat(0.1 * ch as f64).take(36));
        }
        let f1 = Tensor::from_vec(&[8, 6, 6], c1).unwrap();
        let out = bca_no_anchor(&f0, &f1, &weights, &cfg).unwrap();
        // toward_frame1 aggregates values projected from the constant map.
        let d = out.toward_frame1.data();
        for ch in 0..8 {
            let plane = &d[ch * 36..(ch + 1) * 36];
            // Interior: rows/cols 1..5.
            let v0 = plane[7];
            for y in 1..5 {
                for x in 1..5 {
                    assert!((plane[y * 6 + x] - v0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn anchor_reflection_under_identical_frames() {
        // With F0 = F1, the two anchor-attended features aggregate the same
        // values at -d vs +d under one shared softmax; flipping the
        // displacement enumeration swaps them on the interior.
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let (c, h, w, r, heads) = (4, 5, 5, 1, 2);
        let q = random_map(&mut rng, c, h, w);
        let f = random_map(&mut rng, c, h, w);
        let logits0 = sliding_logits_anchor(&q, &f, DisplacementSign::Minus, r, heads).unwrap();
        let logits1 = sliding_logits_anchor(&q, &f, DisplacementSign::Plus, r, heads).unwrap();
        let combined = logits0.add(&logits1).unwrap();
        let mask = pair_window_mask(h, w, r, heads);
        let probs = combined.masked_softmax_lastdim(&mask).unwrap();
        let z0 = displacement_aggregate(&probs, &f, DisplacementSign::Minus, r).unwrap();
        let z1 = displacement_aggregate(&probs, &f, DisplacementSign::Plus, r).unwrap();
        // The combined logits are symmetric in d <-> -d because (F0 = F1):
        // B(x,d) = <Q, K(x-d)> + <Q, K(x+d)> = B(x,-d); so the probs are
        // symmetric and the two aggregations coincide.
        let (a, b) = (z0.data(), z1.data());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn swin_single_window_matches_dense_mhsa() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (c, h, w, heads) = (8, 4, 4, 2);
        let q = random_map(&mut rng, c, h, w);
        let k = random_map(&mut rng, c, h, w);
        let v = random_map(&mut rng, c, h, w);
        let span = 2 * 4 - 1;
        let bias_raw: Vec<f64> = (0..heads * span * span).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let bias = Tensor::from_vec(&[heads, span * span], bias_raw.clone()).unwrap();
        let (out, probs) = swin_attention(&q, &k, &v, &bias, 4, 0, heads).unwrap();
        let want = oracle::naive_dense_mhsa(&q.to_vec(), &k.to_vec(), &v.to_vec(), c, h, w, heads, &bias_raw);
        assert!(oracle::max_rel_diff(&out.to_vec(), &want) < 1e-10);
        for rowset in &probs {
            for i in 0..16 {
                let sum: f64 = rowset[i * 16..(i + 1) * 16].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn swin_shift_roundtrips_indices() {
        // Identity check on the token source map: shifting then inverting the
        // shift visits every original pixel exactly once.
        let grid = window_grid(6, 6, 4, 2);
        let mut seen = vec![false; 36];
        for s in grid.source.iter().flatten() {
            assert!(!seen[*s], "pixel visited twice");
            seen[*s] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn swin_rows_sum_to_one_with_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let (c, h, w, heads) = (4, 6, 6, 2);
        let q = random_map(&mut rng, c, h, w);
        let k = random_map(&mut rng, c, h, w);
        let v = random_map(&mut rng, c, h, w);
        let span = 2 * 4 - 1;
        let bias = Tensor::<f64>::zeros(&[heads, span * span]);
        let (_, probs) = swin_attention(&q, &k, &v, &bias, 4, 2, heads).unwrap();
        for rowset in &probs {
            for i in 0..16 {
                let sum: f64 = rowset[i * 16..(i + 1) * 16].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stack_runs_and_counts_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = AttentionConfig { channels: 8, heads: 2, window_radius: 1, swin_window: 4, mlp_ratio: 2 };
        let mut store = ParamStore::<f64>::new();
        let weights =
            StackWeights::build(&mut store, &mut rng, "stack", &cfg, StackAblation::default()).unwrap();
        let f0 = random_map(&mut rng, 8, 8, 8);
        let f1 = random_map(&mut rng, 8, 8, 8);
        let out = bilateral_attention_stack(&f0, &f1, &weights, &cfg).unwrap();
        assert_eq!(out.stages.len(), 9);
        assert_eq!(out.bilateral_feature.shape(), &[8, 8, 8]);
    }

    #[test]
    fn stack_ablations_preserve_shape_and_grow_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cfg = AttentionConfig { channels: 8, heads: 2, window_radius: 1, swin_window: 4, mlp_ratio: 2 };
        let rows = [
            StackAblation { bca_no_anchor: false, bca_anchor_first: false, bca_anchor_second: false },
            StackAblation { bca_no_anchor: true, bca_anchor_first: false, bca_anchor_second: false },
            StackAblation { bca_no_anchor: true, bca_anchor_first: true, bca_anchor_second: false },
            StackAblation { bca_no_anchor: true, bca_anchor_first: true, bca_anchor_second: true },
        ];
        let f0 = random_map(&mut rng, 8, 8, 8);
        let f1 = random_map(&mut rng, 8, 8, 8);
        let mut last_params = 0usize;
        for (i, row) in rows.iter().enumerate() {
            let mut store = ParamStore::<f64>::new();
            let weights = StackWeights::build(&mut store, &mut rng, "stack", &cfg, *row).unwrap();
            let out = bilateral_attention_stack(&f0, &f1, &weights, &cfg).unwrap();
            assert_eq!(out.bilateral_feature.shape(), &[8, 8, 8]);
            let params = store.num_scalars();
            assert!(params > last_params, "row {i}: {params} <= {last_params}");
            last_params = params;
        }
    }

    #[test]
    fn stack_rejects_missing_anchor_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = AttentionConfig { channels: 8, heads: 2, window_radius: 1, swin_window: 4, mlp_ratio: 2 };
        let mut store = ParamStore::<f64>::new();
        let mut weights = StackWeights::build(
            &mut store,
            &mut rng,
            "stack",
            &cfg,
            StackAblation { bca_no_anchor: false, bca_anchor_first: true, bca_anchor_second: true },
        )
        .unwrap();
        weights.seed = None;
        let f0 = random_map(&mut rng, 8, 4, 4);
        let f1 = random_map(&mut rng, 8, 4, 4);
        assert!(bilateral_attention_stack(&f0, &f1, &weights, &cfg).is_err());
    }
}
