//! Warping operators and motion-field bookkeeping.
//!
//! A motion field stores pixel displacements at its own scale: rescaling a
//! field spatially also multiplies the displacement values, which keeps
//! residual updates between scales dimensionally consistent.
//!
//! Out-of-frame policy: backward warping samples with zero padding (partially
//! outside pixels use zero-padded bilinear taps), forward warping drops
//! splats that land outside the frame.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which pair of frames a field maps between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    TToZero,
    TToOne,
    ZeroToOne,
    OneToZero,
    ZeroToT,
    OneToT,
}

/// A `[2, H, W]` displacement field (channel 0 = dx, channel 1 = dy), in
/// pixels at its own scale. `scale_log2` is the power-of-two denominator
/// relative to the pipeline's input resolution (0 = full resolution).
#[derive(Debug, Clone)]
pub struct MotionField<S: Scalar> {
    pub data: Tensor<S>,
    pub scale_log2: u32,
    pub endpoint: Endpoint,
}

impl<S: Scalar> MotionField<S> {
    pub fn new(data: Tensor<S>, scale_log2: u32, endpoint: Endpoint) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::shape("motion_field", format!("expected [2, H, W], got {:?}", s)));
        }
        Ok(MotionField { data, scale_log2, endpoint })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn zeros(h: usize, w: usize, scale_log2: u32, endpoint: Endpoint) -> Self {
        MotionField { data: Tensor::zeros(&[2, h, w]), scale_log2, endpoint }
    }
}

/// Symmetric bilateral pair anchored at the intermediate frame: the field
/// toward frame 0 is the exact negation of the field toward frame 1.
#[derive(Debug, Clone)]
pub struct BilateralPair<S: Scalar> {
    pub to_frame0: MotionField<S>,
    pub to_frame1: MotionField<S>,
}

impl<S: Scalar> BilateralPair<S> {
    /// Builds the pair from the field toward frame 1; the opposite field is
    /// derived by negation, so the symmetry constraint holds bit-exactly and
    /// gradients flow through both uses.
    pub fn from_t1(to_frame1: Tensor<S>, scale_log2: u32) -> Result<Self> {
        let neg = to_frame1.neg_t()?;
        Ok(BilateralPair {
            to_frame0: MotionField::new(neg, scale_log2, Endpoint::TToZero)?,
            to_frame1: MotionField::new(to_frame1, scale_log2, Endpoint::TToOne)?,
        })
    }

    pub fn height(&self) -> usize {
        self.to_frame1.height()
    }

    pub fn width(&self) -> usize {
        self.to_frame1.width()
    }

    pub fn scale_log2(&self) -> u32 {
        self.to_frame1.scale_log2
    }

    /// Verifies `V_{t->0} + V_{t->1} = 0` exactly.
    pub fn is_symmetric(&self) -> bool {
        let a = self.to_frame0.data.data();
        let b = self.to_frame1.data.data();
        a.iter().zip(b.iter()).all(|(&x, &y)| x.to_f64() == -y.to_f64())
    }
}

/// Samples `source` at `x + flow(x)` with zero-padded bilinear interpolation.
/// Differentiable with respect to both the source and the flow.
pub fn backward_warp<S: Scalar>(source: &Tensor<S>, flow: &MotionField<S>) -> Result<Tensor<S>> {
    let s = source.shape();
    if s.len() != 3 {
        return Err(Error::shape("backward_warp", format!("source {:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if flow.height() != h || flow.width() != w {
        return Err(Error::shape(
            "backward_warp",
            format!("source {}x{} vs flow {}x{}", h, w, flow.height(), flow.width()),
        ));
    }
    let src = source.data();
    let fl = flow.data.data();
    let hw = h * w;
    let mut out = vec![S::ZERO; c * hw];

    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = x as f64 + fl[p].to_f64();
            let sy = y as f64 + fl[hw + p].to_f64();
            let (idx, wt) = bilinear_taps(sx, sy, h, w);
            for ci in 0..c {
                let mut acc = 0.0f64;
                for t in 0..4 {
                    if let Some(i) = idx[t] {
                        acc += src[ci * hw + i].to_f64() * wt[t];
                    }
                }
                out[ci * hw + p] = S::from_f64(acc);
            }
        }
    }

    let src_snap = source.data();
    let flow_snap = flow.data.data();
    Tensor::from_op(
        "backward_warp",
        vec![c, h, w],
        out,
        vec![source.clone(), flow.data.clone()],
        move |g| {
            let mut dsrc = vec![S::ZERO; c * hw];
            let mut dflow = vec![S::ZERO; 2 * hw];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let sx = x as f64 + flow_snap[p].to_f64();
                    let sy = y as f64 + flow_snap[hw + p].to_f64();
                    let (idx, wt) = bilinear_taps(sx, sy, h, w);
                    // Taps are ordered (y0x0, y0x1, y1x0, y1x1).
                    let fx = sx - sx.floor();
                    let fy = sy - sy.floor();
                    let dw_dx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
                    let dw_dy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
                    let mut gx = 0.0f64;
                    let mut gy = 0.0f64;
                    for ci in 0..c {
                        let gv = g[ci * hw + p].to_f64();
                        if gv == 0.0 {
                            continue;
                        }
                        for t in 0..4 {
                            if let Some(i) = idx[t] {
                                let sv = src_snap[ci * hw + i].to_f64();
                                dsrc[ci * hw + i] = dsrc[ci * hw + i].add(S::from_f64(gv * wt[t]));
                                gx += gv * sv * dw_dx[t];
                                gy += gv * sv * dw_dy[t];
                            }
                        }
                    }
                    dflow[p] = S::from_f64(gx);
                    dflow[hw + p] = S::from_f64(gy);
                }
            }
            vec![Some(dsrc), Some(dflow)]
        },
    )
}

/// Bilinear taps at (sx, sy) with zero padding: out-of-frame neighbors are
/// dropped (None), equivalent to sampling a zero-extended image. Taps are
/// ordered (y0x0, y0x1, y1x0, y1x1).
pub(crate) fn bilinear_taps(sx: f64, sy: f64, h: usize, w: usize) -> ([Option<usize>; 4], [f64; 4]) {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let coords = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1.0, (1.0 - fy) * fx),
        (y0 + 1.0, x0, fy * (1.0 - fx)),
        (y0 + 1.0, x0 + 1.0, fy * fx),
    ];
    let mut idx = [None; 4];
    let mut wt = [0.0f64; 4];
    for (t, (yy, xx, weight)) in coords.into_iter().enumerate() {
        wt[t] = weight;
        if yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w {
            idx[t] = Some(yy as usize * w + xx as usize);
        }
    }
    (idx, wt)
}

/// Splats every source pixel to the four bilinear neighbors of `x + flow(x)`,
/// accumulating values and weights. Splats landing fully outside are dropped.
/// Returns `(accumulated [C, H, W], weights [1, H, W])`; not differentiable.
pub fn forward_warp<S: Scalar>(
    source: &Tensor<S>,
    flow: &MotionField<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let s = source.shape();
    if s.len() != 3 {
        return Err(Error::shape("forward_warp", format!("source {:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if flow.height() != h || flow.width() != w {
        return Err(Error::shape(
            "forward_warp",
            format!("source {}x{} vs flow {}x{}", h, w, flow.height(), flow.width()),
        ));
    }
    let src = source.data();
    let fl = flow.data.data();
    let hw = h * w;
    let mut acc = vec![S::ZERO; c * hw];
    let mut wacc = vec![S::ZERO; hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let tx = x as f64 + fl[p].to_f64();
            let ty = y as f64 + fl[hw + p].to_f64();
            let (idx, wt) = bilinear_taps(tx, ty, h, w);
            for t in 0..4 {
                if let Some(i) = idx[t] {
                    wacc[i] = wacc[i].add(S::from_f64(wt[t]));
                    for ci in 0..c {
                        let v = src[ci * hw + p].to_f64() * wt[t];
                        acc[ci * hw + i] = acc[ci * hw + i].add(S::from_f64(v));
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[c, h, w], acc)?, Tensor::from_vec(&[1, h, w], wacc)?))
}

/// Divides the accumulated image by the weight map where weights exceed
/// `tau`, leaving holes as zeros.
pub fn normalize_splat<S: Scalar>(acc: &Tensor<S>, weights: &Tensor<S>, tau: f64) -> Result<Tensor<S>> {
    let s = acc.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if weights.shape() != [1, h, w] {
        return Err(Error::shape("normalize_splat", "weight map mismatch"));
    }
    let a = acc.data();
    let wm = weights.data();
    let hw = h * w;
    let mut out = vec![S::ZERO; c * hw];
    for p in 0..hw {
        let wv = wm[p].to_f64();
        if wv > tau {
            for ci in 0..c {
                out[ci * hw + p] = S::from_f64(a[ci * hw + p].to_f64() / wv);
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Multiplies a frame-to-frame field by `t`, retagging the endpoint.
pub fn scale_flow<S: Scalar>(flow: &MotionField<S>, t: f64) -> Result<MotionField<S>> {
    if !(0.0 < t && t < 1.0) {
        return Err(Error::invalid("scale_flow", format!("t = {t} outside (0, 1)")));
    }
    let endpoint = match flow.endpoint {
        Endpoint::ZeroToOne => Endpoint::ZeroToT,
        Endpoint::OneToZero => Endpoint::OneToT,
        other => {
            return Err(Error::invalid(
                "scale_flow",
                format!("expected a frame-to-frame field, got {:?}", other),
            ))
        }
    };
    let data = flow.data.mul_scalar(S::from_f64(t))?;
    MotionField::new(data, flow.scale_log2, endpoint)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RescaleFactor {
    Up2,
    Down2,
}

/// Bilinear spatial resize by 2 in either direction, multiplying the
/// displacement values by the same factor (fields are in own-scale pixels).
pub fn rescale_field<S: Scalar>(flow: &MotionField<S>, factor: RescaleFactor) -> Result<MotionField<S>> {
    let (h, w) = (flow.height(), flow.width());
    let (nh, nw, mul, scale) = match factor {
        RescaleFactor::Up2 => {
            if flow.scale_log2 == 0 {
                return Err(Error::invalid("rescale_field", "already at full resolution"));
            }
            (h * 2, w * 2, 2.0, flow.scale_log2 - 1)
        }
        RescaleFactor::Down2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::invalid("rescale_field", format!("odd dims {h}x{w}")));
            }
            (h / 2, w / 2, 0.5, flow.scale_log2 + 1)
        }
    };
    let resized = flow.data.bilinear_resize(nh, nw)?;
    let scaled = resized.mul_scalar(S::from_f64(mul))?;
    MotionField::new(scaled, scale, flow.endpoint)
}

/// Constant-flow helper, mostly for tests and synthetic data.
pub fn constant_flow<S: Scalar>(
    h: usize,
    w: usize,
    dx: f64,
    dy: f64,
    scale_log2: u32,
    endpoint: Endpoint,
) -> Result<MotionField<S>> {
    let mut data = vec![S::ZERO; 2 * h * w];
    for v in data[..h * w].iter_mut() {
        *v = S::from_f64(dx);
    }
    for v in data[h * w..].iter_mut() {
        *v = S::from_f64(dy);
    }
    MotionField::new(Tensor::from_vec(&[2, h, w], data)?, scale_log2, endpoint)
}

/// Extracts (dx, dy) planes as f64 for analysis code.
pub fn flow_planes<S: Scalar>(field: &MotionField<S>) -> (Vec<f64>, Vec<f64>) {
    let hw = field.height() * field.width();
    let d = field.data.data();
    let dx = d[..hw].iter().map(|v| v.to_f64()).collect();
    let dy = d[hw..].iter().map(|v| v.to_f64()).collect();
    (dx, dy)
}

/// Mean end-point error between two fields on the same grid.
pub fn endpoint_error<S: Scalar>(estimate: &MotionField<S>, truth: &MotionField<S>) -> Result<f64> {
    if estimate.height() != truth.height() || estimate.width() != truth.width() {
        return Err(Error::shape("endpoint_error", "field grids differ"));
    }
    let hw = estimate.height() * estimate.width();
    let a = estimate.data.data();
    let b = truth.data.data();
    let mut total = 0.0;
    for p in 0..hw {
        let du = a[p].to_f64() - b[p].to_f64();
        let dv = a[hw + p].to_f64() - b[hw + p].to_f64();
        total += (du * du + dv * dv).sqrt();
    }
    Ok(total / hw as f64)
}
