//! Forward rules and vector-Jacobian products for the core op set.
//!
//! Conventions: feature maps are `[C, H, W]` row-major, convolution weights
//! `[Cout, Cin, kh, kw]`, cost/attention volumes keep the displacement axis
//! last. Elementwise ops require exact shape equality; there is no implicit
//! broadcasting.

use std::rc::Rc;

use super::{grad_enabled, Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) fn check_same_shape<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Row-major matmul helpers over flat slices.
pub(crate) fn mm<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S]) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    S::gemm(m, k, n, S::ONE, a, k as isize, 1, b, n as isize, 1, S::ZERO, &mut c, n as isize, 1);
    c
}

/// `a^T * b` where `a` is stored `[k, m]`, `b` is `[k, n]`.
pub(crate) fn mm_at<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S]) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    S::gemm(m, k, n, S::ONE, a, 1, m as isize, b, n as isize, 1, S::ZERO, &mut c, n as isize, 1);
    c
}

/// `a * b^T` where `a` is stored `[m, k]`, `b` is `[n, k]`.
pub(crate) fn mm_bt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S]) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    S::gemm(m, k, n, S::ONE, a, k as isize, 1, b, 1, k as isize, S::ZERO, &mut c, n as isize, 1);
    c
}

fn unary_map<S: Scalar>(
    name: &'static str,
    x: &Tensor<S>,
    fwd: impl Fn(S) -> S,
    dfdx: impl Fn(S) -> S + 'static,
) -> Result<Tensor<S>> {
    let data: Vec<S> = x.data().iter().map(|&v| fwd(v)).collect();
    let x_snap = x.data();
    Tensor::from_op(name, x.shape().to_vec(), data, vec![x.clone()], move |g| {
        let dx = g.iter().zip(x_snap.iter()).map(|(&gi, &xi)| gi.mul(dfdx(xi))).collect();
        vec![Some(dx)]
    })
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a.add(b)).collect();
        Tensor::from_op("add", self.shape().to_vec(), data, vec![self.clone(), other.clone()], |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        })
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a.sub(b)).collect();
        Tensor::from_op("sub", self.shape().to_vec(), data, vec![self.clone(), other.clone()], |g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|&v| v.neg()).collect())]
        })
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a.mul(b)).collect();
        let a_snap = self.data();
        let b_snap = other.data();
        Tensor::from_op("mul", self.shape().to_vec(), data, vec![self.clone(), other.clone()], move |g| {
            let fault = super::gradcheck::fault_scale::<S>();
            let da = g.iter().zip(b_snap.iter()).map(|(&gi, &bi)| gi.mul(bi).mul(fault)).collect();
            let db = g.iter().zip(a_snap.iter()).map(|(&gi, &ai)| gi.mul(ai).mul(fault)).collect();
            vec![Some(da), Some(db)]
        })
    }

    pub fn neg_t(&self) -> Result<Tensor<S>> {
        let data = self.data().iter().map(|&v| v.neg()).collect();
        Tensor::from_op("neg", self.shape().to_vec(), data, vec![self.clone()], |g| {
            vec![Some(g.iter().map(|&v| v.neg()).collect())]
        })
    }

    pub fn add_scalar(&self, c: S) -> Result<Tensor<S>> {
        let data = self.data().iter().map(|&v| v.add(c)).collect();
        Tensor::from_op("add_scalar", self.shape().to_vec(), data, vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn mul_scalar(&self, c: S) -> Result<Tensor<S>> {
        let data = self.data().iter().map(|&v| v.mul(c)).collect();
        Tensor::from_op("mul_scalar", self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|&v| v.mul(c)).collect())]
        })
    }

    pub fn relu(&self) -> Result<Tensor<S>> {
        unary_map("relu", self, |v| v.max(S::ZERO), |v| if v > S::ZERO { S::ONE } else { S::ZERO })
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Result<Tensor<S>> {
        let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = S::from_f64(0.044715);
        let half = S::from_f64(0.5);
        let three_k = S::from_f64(3.0 * 0.044715);
        unary_map(
            "gelu",
            self,
            move |x| {
                let u = c.mul(x.add(k.mul(x).mul(x).mul(x)));
                half.mul(x).mul(S::ONE.add(u.tanh()))
            },
            move |x| {
                let u = c.mul(x.add(k.mul(x).mul(x).mul(x)));
                let t = u.tanh();
                let sech2 = S::ONE.sub(t.mul(t));
                let du = c.mul(S::ONE.add(three_k.mul(x).mul(x)));
                half.mul(S::ONE.add(t)).add(half.mul(x).mul(sech2).mul(du))
            },
        )
    }

    /// Elementwise power with constant exponent. Domain: `x > 0` unless the
    /// exponent is a non-negative integer.
    pub fn pow_scalar(&self, p: S) -> Result<Tensor<S>> {
        unary_map("pow_scalar", self, move |x| x.powf(p), move |x| p.mul(x.powf(p.sub(S::ONE))))
    }

    pub fn sum(&self) -> Result<Tensor<S>> {
        let total: S = self.data().iter().copied().sum();
        let n = self.len();
        Tensor::from_op("sum", vec![1], vec![total], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Result<Tensor<S>> {
        if self.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let n = self.len();
        let inv = S::ONE.div(S::from_f64(n as f64));
        let total: S = self.data().iter().copied().sum();
        Tensor::from_op("mean", vec![1], vec![total.mul(inv)], vec![self.clone()], move |g| {
            vec![Some(vec![g[0].mul(inv); n])]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(), shape)));
        }
        let old_shape = self.shape().to_vec();
        let _ = &old_shape;
        Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    /// Reorders axes; `perm[i]` names the source axis that becomes axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<S>> {
        let rank = self.shape().len();
        if perm.len() != rank || {
            let mut seen = vec![false; rank];
            perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        } {
            return Err(Error::invalid("permute", format!("bad permutation {:?} for rank {}", perm, rank)));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let perm_owned = perm.to_vec();

        let data = permute_data(&self.data(), &in_shape, &perm_owned);
        let inv: Vec<usize> = {
            let mut inv = vec![0; rank];
            for (i, &p) in perm_owned.iter().enumerate() {
                inv[p] = i;
            }
            inv
        };
        let out_shape_c = out_shape.clone();
        Tensor::from_op("permute", out_shape, data, vec![self.clone()], move |g| {
            vec![Some(permute_data(g, &out_shape_c, &inv))]
        })
    }

    /// Concatenates along `axis`. All other dims must match.
    pub fn concat(tensors: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        if tensors.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let rank = tensors[0].shape().len();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {} out of rank {}", axis, rank)));
        }
        let mut out_shape = tensors[0].shape().to_vec();
        let mut axis_total = 0usize;
        for t in tensors {
            let s = t.shape();
            if s.len() != rank
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != out_shape[i])
            {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, out_shape)));
            }
            axis_total += s[axis];
        }
        out_shape[axis] = axis_total;

        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![S::ZERO; outer * axis_total * inner];
        let mut offset = 0usize;
        let mut spans = Vec::with_capacity(tensors.len());
        for t in tensors {
            let d = t.shape()[axis];
            let src = t.data();
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * d * inner;
                data[dst_start..dst_start + d * inner]
                    .copy_from_slice(&src[src_start..src_start + d * inner]);
            }
            spans.push((offset, d));
            offset += d;
        }

        let parents: Vec<Tensor<S>> = tensors.iter().map(|t| (*t).clone()).collect();
        Tensor::from_op("concat", out_shape, data, parents, move |g| {
            spans
                .iter()
                .map(|&(off, d)| {
                    let mut part = vec![S::ZERO; outer * d * inner];
                    for o in 0..outer {
                        let src_start = (o * axis_total + off) * inner;
                        let dst_start = o * d * inner;
                        part[dst_start..dst_start + d * inner]
                            .copy_from_slice(&g[src_start..src_start + d * inner]);
                    }
                    Some(part)
                })
                .collect()
        })
    }

    /// Zero padding of a `[C, H, W]` map: `(top, bottom, left, right)`.
    pub fn pad2d(&self, pad: (usize, usize, usize, usize)) -> Result<Tensor<S>> {
        let [c, h, w] = chw("pad2d", self.shape())?;
        let (t, b, l, r) = pad;
        let (oh, ow) = (h + t + b, w + l + r);
        let mut data = vec![S::ZERO; c * oh * ow];
        let src = self.data();
        for ci in 0..c {
            for y in 0..h {
                let dst = (ci * oh + y + t) * ow + l;
                let s0 = (ci * h + y) * w;
                data[dst..dst + w].copy_from_slice(&src[s0..s0 + w]);
            }
        }
        Tensor::from_op("pad2d", vec![c, oh, ow], data, vec![self.clone()], move |g| {
            let mut dg = vec![S::ZERO; c * h * w];
            for ci in 0..c {
                for y in 0..h {
                    let src0 = (ci * oh + y + t) * ow + l;
                    let d0 = (ci * h + y) * w;
                    dg[d0..d0 + w].copy_from_slice(&g[src0..src0 + w]);
                }
            }
            vec![Some(dg)]
        })
    }

    /// Crops a `[C, H, W]` map to `rows` x `cols` starting at `(top, left)`.
    pub fn crop2d(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Tensor<S>> {
        let [c, h, w] = chw("crop2d", self.shape())?;
        if top + rows > h || left + cols > w {
            return Err(Error::invalid("crop2d", format!("window {}x{}+{}+{} exceeds {}x{}", rows, cols, top, left, h, w)));
        }
        let src = self.data();
        let mut data = vec![S::ZERO; c * rows * cols];
        for ci in 0..c {
            for y in 0..rows {
                let s0 = (ci * h + y + top) * w + left;
                let d0 = (ci * rows + y) * cols;
                data[d0..d0 + cols].copy_from_slice(&src[s0..s0 + cols]);
            }
        }
        Tensor::from_op("crop2d", vec![c, rows, cols], data, vec![self.clone()], move |g| {
            let mut dg = vec![S::ZERO; c * h * w];
            for ci in 0..c {
                for y in 0..rows {
                    let d0 = (ci * h + y + top) * w + left;
                    let s0 = (ci * rows + y) * cols;
                    dg[d0..d0 + cols].copy_from_slice(&g[s0..s0 + cols]);
                }
            }
            vec![Some(dg)]
        })
    }

    /// Depth-to-space: `[r*r*C, H, W]` -> `[C, r*H, r*W]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<S>> {
        let [c_in, h, w] = chw("pixel_shuffle", self.shape())?;
        if r == 0 || c_in % (r * r) != 0 {
            return Err(Error::shape("pixel_shuffle", format!("{} channels not divisible by {}", c_in, r * r)));
        }
        let c = c_in / (r * r);
        let (oh, ow) = (h * r, w * r);
        let src = self.data();
        let mut data = vec![S::ZERO; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sub = (oy % r) * r + (ox % r);
                    let si = ((ci * r * r + sub) * h + oy / r) * w + ox / r;
                    data[(ci * oh + oy) * ow + ox] = src[si];
                }
            }
        }
        Tensor::from_op("pixel_shuffle", vec![c, oh, ow], data, vec![self.clone()], move |g| {
            let mut dg = vec![S::ZERO; c_in * h * w];
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let sub = (oy % r) * r + (ox % r);
                        let si = ((ci * r * r + sub) * h + oy / r) * w + ox / r;
                        dg[si] = g[(ci * oh + oy) * ow + ox];
                    }
                }
            }
            vec![Some(dg)]
        })
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", a_shape, b_shape)));
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let data = mm(m, k, n, &self.data(), &other.data());
        let a_snap = self.data();
        let b_snap = other.data();
        Tensor::from_op("matmul", vec![m, n], data, vec![self.clone(), other.clone()], move |g| {
            let da = mm_bt(m, n, k, g, &b_snap);
            let db = mm_at(k, m, n, &a_snap, g);
            vec![Some(da), Some(db)]
        })
    }

    /// 2-D convolution over a `[Cin, H, W]` map with `[Cout, Cin, kh, kw]`
    /// weights, zero padding, square stride. Runs as im2col + gemm; the
    /// backward pass recomputes the column matrix from the saved input.
    pub fn conv2d(
        &self,
        weight: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<S>> {
        let [c_in, h, w] = chw("conv2d", self.shape())?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[1] != c_in {
            return Err(Error::shape("conv2d", format!("weight {:?} for input {:?}", ws, self.shape())));
        }
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::invalid("conv2d", "kernel larger than padded input or zero stride"));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", b.shape(), c_out)));
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let ckk = c_in * kh * kw;

        let col = im2col(&self.data(), c_in, h, w, kh, kw, stride, padding, oh, ow);
        let mut out = mm(c_out, ckk, oh * ow, &weight.data(), &col);
        if let Some(b) = bias {
            let bd = b.data();
            for co in 0..c_out {
                let v = bd[co];
                for o in out[co * oh * ow..(co + 1) * oh * ow].iter_mut() {
                    *o = o.add(v);
                }
            }
        }

        let x_snap = self.data();
        let w_snap = weight.data();
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op("conv2d", vec![c_out, oh, ow], out, parents, move |g| {
            let col = im2col(&x_snap, c_in, h, w, kh, kw, stride, padding, oh, ow);
            // dW = g [Cout, OHW] * col^T [OHW, CKK]
            let dw = mm_bt(c_out, oh * ow, ckk, g, &col);
            // dcol = W^T [CKK, Cout] * g [Cout, OHW]
            let dcol = mm_at(ckk, c_out, oh * ow, &w_snap, g);
            let dx = col2im(&dcol, c_in, h, w, kh, kw, stride, padding, oh, ow);
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                let mut db = vec![S::ZERO; c_out];
                for co in 0..c_out {
                    db[co] = g[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum();
                }
                grads.push(Some(db));
            }
            grads
        })
    }

    /// Area-averaging downsample of a `[C, H, W]` map by an integer factor.
    pub fn avg_pool2d(&self, factor: usize) -> Result<Tensor<S>> {
        let [c, h, w] = chw("avg_pool2d", self.shape())?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape("avg_pool2d", format!("{}x{} not divisible by {}", h, w, factor)));
        }
        let (oh, ow) = (h / factor, w / factor);
        let inv = S::ONE.div(S::from_f64((factor * factor) as f64));
        let src = self.data();
        let mut data = vec![S::ZERO; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::ZERO;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc = acc.add(src[(ci * h + oy * factor + dy) * w + ox * factor + dx]);
                        }
                    }
                    data[(ci * oh + oy) * ow + ox] = acc.mul(inv);
                }
            }
        }
        Tensor::from_op("avg_pool2d", vec![c, oh, ow], data, vec![self.clone()], move |g| {
            let mut dx = vec![S::ZERO; c * h * w];
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[(ci * oh + oy) * ow + ox].mul(inv);
                        for dy in 0..factor {
                            for dx_i in 0..factor {
                                dx[(ci * h + oy * factor + dy) * w + ox * factor + dx_i] = gv;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Bilinear resize of a `[C, H, W]` map to `out_h` x `out_w`, half-pixel
    /// centers, clamp-to-edge sampling.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
        let [c, h, w] = chw("bilinear_resize", self.shape())?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", "empty output"));
        }
        let taps_y = resize_taps(h, out_h);
        let taps_x = resize_taps(w, out_w);
        let src = self.data();
        let mut data = vec![S::ZERO; c * out_h * out_w];
        for ci in 0..c {
            for oy in 0..out_h {
                let (y0, y1, wy) = taps_y[oy];
                for ox in 0..out_w {
                    let (x0, x1, wx) = taps_x[ox];
                    let fy0 = S::from_f64(1.0 - wy);
                    let fy1 = S::from_f64(wy);
                    let fx0 = S::from_f64(1.0 - wx);
                    let fx1 = S::from_f64(wx);
                    let base = ci * h;
                    let v = src[(base + y0) * w + x0].mul(fy0).mul(fx0)
                        .add(src[(base + y0) * w + x1].mul(fy0).mul(fx1))
                        .add(src[(base + y1) * w + x0].mul(fy1).mul(fx0))
                        .add(src[(base + y1) * w + x1].mul(fy1).mul(fx1));
                    data[(ci * out_h + oy) * out_w + ox] = v;
                }
            }
        }
        Tensor::from_op("bilinear_resize", vec![c, out_h, out_w], data, vec![self.clone()], move |g| {
            let mut dx = vec![S::ZERO; c * h * w];
            for ci in 0..c {
                for oy in 0..out_h {
                    let (y0, y1, wy) = taps_y[oy];
                    for ox in 0..out_w {
                        let (x0, x1, wx) = taps_x[ox];
                        let gv = g[(ci * out_h + oy) * out_w + ox];
                        let base = ci * h;
                        let fy0 = S::from_f64(1.0 - wy);
                        let fy1 = S::from_f64(wy);
                        let fx0 = S::from_f64(1.0 - wx);
                        let fx1 = S::from_f64(wx);
                        dx[(base + y0) * w + x0] = dx[(base + y0) * w + x0].add(gv.mul(fy0).mul(fx0));
                        dx[(base + y0) * w + x1] = dx[(base + y0) * w + x1].add(gv.mul(fy0).mul(fx1));
                        dx[(base + y1) * w + x0] = dx[(base + y1) * w + x0].add(gv.mul(fy1).mul(fx0));
                        dx[(base + y1) * w + x1] = dx[(base + y1) * w + x1].add(gv.mul(fy1).mul(fx1));
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Result<Tensor<S>> {
        let mask = Rc::new(vec![true; self.len()]);
        self.masked_softmax_lastdim(&mask)
    }

    /// Softmax over the last axis restricted to unmasked entries; masked
    /// entries get probability zero. Errors if any row is fully masked.
    pub fn masked_softmax_lastdim(&self, mask: &Rc<Vec<bool>>) -> Result<Tensor<S>> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::invalid("softmax", "rank-0 tensor"));
        }
        if mask.len() != self.len() {
            return Err(Error::shape("softmax", "mask size mismatch"));
        }
        let d = shape[shape.len() - 1];
        if d == 0 {
            return Err(Error::invalid("softmax", "empty last axis"));
        }
        let rows = self.len() / d;
        let src = self.data();
        let mut data = vec![S::ZERO; self.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mrow = &mask[r * d..(r + 1) * d];
            let mut max = None;
            for (v, &m) in row.iter().zip(mrow) {
                if m {
                    max = Some(match max {
                        None => *v,
                        Some(cur) => v.max(cur),
                    });
                }
            }
            let Some(max) = max else {
                return Err(Error::invalid("softmax", format!("row {} fully masked", r)));
            };
            let mut sum = S::ZERO;
            for i in 0..d {
                if mrow[i] {
                    let e = row[i].sub(max).exp();
                    data[r * d + i] = e;
                    sum = sum.add(e);
                }
            }
            let inv = S::ONE.div(sum);
            for i in 0..d {
                data[r * d + i] = data[r * d + i].mul(inv);
            }
        }
        let probs_snap = data.clone();
        let mask_snap = Rc::clone(mask);
        Tensor::from_op("softmax", shape.to_vec(), data, vec![self.clone()], move |g| {
            let mut dx = vec![S::ZERO; g.len()];
            for r in 0..g.len() / d {
                let p = &probs_snap[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mrow = &mask_snap[r * d..(r + 1) * d];
                let mut dot = S::ZERO;
                for i in 0..d {
                    if mrow[i] {
                        dot = dot.add(p[i].mul(gr[i]));
                    }
                }
                for i in 0..d {
                    if mrow[i] {
                        dx[r * d + i] = p[i].mul(gr[i].sub(dot));
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Layer normalization of a `[C, H, W]` map across channels at every
    /// spatial position, with per-channel gain and bias.
    pub fn layer_norm_chw(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
        let [c, h, w] = chw("layer_norm", self.shape())?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("layer_norm", format!("gain/bias {:?}/{:?} for {} channels", gamma.shape(), beta.shape(), c)));
        }
        let hw = h * w;
        let src = self.data();
        let gam = gamma.data();
        let bet = beta.data();
        let inv_c = 1.0 / c as f64;
        let mut data = vec![S::ZERO; self.len()];
        let mut xhat = vec![S::ZERO; self.len()];
        let mut inv_std = vec![S::ZERO; hw];
        for p in 0..hw {
            let mut mean = 0.0f64;
            for ci in 0..c {
                mean += src[ci * hw + p].to_f64();
            }
            mean *= inv_c;
            let mut var = 0.0f64;
            for ci in 0..c {
                let dv = src[ci * hw + p].to_f64() - mean;
                var += dv * dv;
            }
            var *= inv_c;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[p] = S::from_f64(istd);
            for ci in 0..c {
                let xh = S::from_f64((src[ci * hw + p].to_f64() - mean) * istd);
                xhat[ci * hw + p] = xh;
                data[ci * hw + p] = xh.mul(gam[ci]).add(bet[ci]);
            }
        }
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let xhat_c = Rc::clone(&xhat);
        let istd_c = Rc::clone(&inv_std);
        let gam_snap = gamma.data();
        Tensor::from_op(
            "layer_norm",
            vec![c, h, w],
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let mut dx = vec![S::ZERO; g.len()];
                let mut dgamma = vec![S::ZERO; c];
                let mut dbeta = vec![S::ZERO; c];
                for p in 0..hw {
                    let mut sum_dxhat = S::ZERO;
                    let mut sum_dxhat_xhat = S::ZERO;
                    for ci in 0..c {
                        let gi = g[ci * hw + p];
                        let xh = xhat_c[ci * hw + p];
                        dgamma[ci] = dgamma[ci].add(gi.mul(xh));
                        dbeta[ci] = dbeta[ci].add(gi);
                        let dxh = gi.mul(gam_snap[ci]);
                        sum_dxhat = sum_dxhat.add(dxh);
                        sum_dxhat_xhat = sum_dxhat_xhat.add(dxh.mul(xh));
                    }
                    let invc = S::from_f64(inv_c);
                    for ci in 0..c {
                        let dxh = g[ci * hw + p].mul(gam_snap[ci]);
                        let xh = xhat_c[ci * hw + p];
                        let term = dxh.sub(sum_dxhat.mul(invc)).sub(xh.mul(sum_dxhat_xhat).mul(invc));
                        dx[ci * hw + p] = term.mul(istd_c[p]);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            },
        )
    }

    /// Adds a per-(head, displacement) bias table to a `[heads, A, B, D]`
    /// logits volume, broadcasting over the two middle axes.
    pub fn add_bias_lastdim(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("add_bias_lastdim", format!("expected rank 4, got {:?}", s)));
        }
        let (heads, a, b, d) = (s[0], s[1], s[2], s[3]);
        if bias.shape() != [heads, d] {
            return Err(Error::shape("add_bias_lastdim", format!("bias {:?} for logits {:?}", bias.shape(), s)));
        }
        let src = self.data();
        let bd = bias.data();
        let mut data = vec![S::ZERO; self.len()];
        for hd in 0..heads {
            for p in 0..a * b {
                for di in 0..d {
                    let i = (hd * a * b + p) * d + di;
                    data[i] = src[i].add(bd[hd * d + di]);
                }
            }
        }
        Tensor::from_op("add_bias_lastdim", s.to_vec(), data, vec![self.clone(), bias.clone()], move |g| {
            let mut dbias = vec![S::ZERO; heads * d];
            for hd in 0..heads {
                for p in 0..a * b {
                    for di in 0..d {
                        dbias[hd * d + di] = dbias[hd * d + di].add(g[(hd * a * b + p) * d + di]);
                    }
                }
            }
            vec![Some(g.to_vec()), Some(dbias)]
        })
    }
}

pub(crate) fn chw(op: &'static str, shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(Error::shape(op, format!("expected [C, H, W], got {:?}", other))),
    }
}

/// Precomputed (lo, hi, frac) sampling taps for one resize axis.
fn resize_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let lo = (floor.max(0.0) as usize).min(in_len - 1);
            let hi = ((floor + 1.0).max(0.0) as usize).min(in_len - 1);
            (lo, hi, frac)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut col = vec![S::ZERO; c * kh * kw * oh * ow];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[row + oy * ow + ox] = x[(ci * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    col: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut x = vec![S::ZERO; c * h * w];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xi = (ci * h + iy as usize) * w + ix as usize;
                        x[xi] = x[xi].add(col[row + oy * ow + ox]);
                    }
                }
            }
        }
    }
    x
}

fn permute_data<S: Scalar>(src: &[S], in_shape: &[usize], perm: &[usize]) -> Vec<S> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let n: usize = in_shape.iter().product();
    let mut out = vec![S::ZERO; n];
    let mut idx = vec![0usize; rank];
    for (o, slot) in out.iter_mut().enumerate() {
        // Decode output index into multi-index over out_shape.
        let mut rem = o;
        for i in (0..rank).rev() {
            idx[i] = rem % out_shape[i];
            rem /= out_shape[i];
        }
        let mut src_off = 0usize;
        for i in 0..rank {
            src_off += idx[i] * in_strides[perm[i]];
        }
        *slot = src[src_off];
    }
    out
}

/// Marker so `grad_enabled` is referenced from this module (used by from_op).
#[allow(dead_code)]
fn _uses(_: bool) {
    let _ = grad_enabled();
}
