//! Naive reference implementations used as independent oracles by the test
//! suites. Everything here is written as plain nested loops over `f64`
//! buffers, with no shared code paths with the optimized operators it checks.
//!
//! All images and feature maps are `[C, H, W]` row-major; displacement
//! windows enumerate `d = (dx, dy)` with `dy` outer, `dx` inner, both in
//! `[-r, r]`.

/// Zero-padded read of a `[C, H, W]` buffer at integer coordinates.
pub fn read_zero_pad(f: &[f64], c: usize, h: usize, w: usize, ch: usize, y: isize, x: isize) -> f64 {
    debug_assert!(ch < c);
    let _ = c;
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        f[(ch * h + y as usize) * w + x as usize]
    }
}

/// Zero-padded bilinear sample of one channel at fractional coordinates.
pub fn bilinear_zero_pad(f: &[f64], c: usize, h: usize, w: usize, ch: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            acc += wy * wx * read_zero_pad(f, c, h, w, ch, (y0 + dy) as isize, (x0 + dx) as isize);
        }
    }
    acc
}

/// Backward warp: per-pixel double loop, bilinear with zero padding.
/// `flow` is `[2, H, W]` (dx plane, then dy plane).
pub fn naive_backward_warp(src: &[f64], c: usize, h: usize, w: usize, flow: &[f64]) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = x as f64 + flow[p];
            let sy = y as f64 + flow[hw + p];
            for ch in 0..c {
                out[ch * hw + p] = bilinear_zero_pad(src, c, h, w, ch, sy, sx);
            }
        }
    }
    out
}

/// Symmetric bilateral correlation: `C(x, d) = <F0(x - d), F1(x + d)>` with
/// zero-padded reads. Output is `[H, W, (2r+1)^2]`.
pub fn naive_bilateral_correlation(
    f0: &[f64],
    f1: &[f64],
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Vec<f64> {
    let side = 2 * r + 1;
    let d_count = side * side;
    let mut out = vec![0.0; h * w * d_count];
    for y in 0..h {
        for x in 0..w {
            for (di, (dy, dx)) in window_offsets(r).into_iter().enumerate() {
                let mut acc = 0.0;
                for ch in 0..c {
                    let a = read_zero_pad(f0, c, h, w, ch, y as isize - dy, x as isize - dx);
                    let b = read_zero_pad(f1, c, h, w, ch, y as isize + dy, x as isize + dx);
                    acc += a * b;
                }
                out[(y * w + x) * d_count + di] = acc;
            }
        }
    }
    out
}

/// Blockwise bilateral cost volume. `s0`/`s1` are block embeddings at
/// `[c, h >> k, w >> k]`; `v1` is the field toward frame 1 on the fine
/// `h x w` grid, `[2, h, w]`; the field toward frame 0 is its negation.
/// Output `[h, w, (2r+1)^2]`, bilinear reads at fractional block centers.
#[allow(clippy::too_many_arguments)]
pub fn naive_bbcv(
    s0: &[f64],
    s1: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    v1: &[f64],
    r: usize,
) -> Vec<f64> {
    let (bh, bw) = (h >> k, w >> k);
    let hw = h * w;
    let side = 2 * r + 1;
    let d_count = side * side;
    let scale = (1usize << k) as f64;
    let mut out = vec![0.0; h * w * d_count];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (vx, vy) = (v1[p], v1[hw + p]);
            let c0x = (x as f64 - vx) / scale;
            let c0y = (y as f64 - vy) / scale;
            let c1x = (x as f64 + vx) / scale;
            let c1y = (y as f64 + vy) / scale;
            for (di, (dy, dx)) in window_offsets(r).into_iter().enumerate() {
                let mut acc = 0.0;
                for ch in 0..c {
                    let a = bilinear_zero_pad(s0, c, bh, bw, ch, c0y - dy as f64, c0x - dx as f64);
                    let b = bilinear_zero_pad(s1, c, bh, bw, ch, c1y + dy as f64, c1x + dx as f64);
                    acc += a * b;
                }
                out[p * d_count + di] = acc;
            }
        }
    }
    out
}

/// Displacement offsets in enumeration order (dy outer, dx inner).
pub fn window_offsets(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut out = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            out.push((dy, dx));
        }
    }
    out
}

/// Sliding-window cross-attention logits for the symmetric-pair form:
/// `A(head, x, d) = <Q_head(x - d), K_head(x + d)>`, zero-padded reads.
/// Output `[heads, H, W, (2r+1)^2]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_sliding_logits_pair(
    q: &[f64],
    k: &[f64],
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    heads: usize,
) -> Vec<f64> {
    let d_count = (2 * r + 1) * (2 * r + 1);
    let head_dim = c / heads;
    let mut out = vec![0.0; heads * h * w * d_count];
    for hd in 0..heads {
        for y in 0..h {
            for x in 0..w {
                for (di, (dy, dx)) in window_offsets(r).into_iter().enumerate() {
                    let mut acc = 0.0;
                    for cc in hd * head_dim..(hd + 1) * head_dim {
                        let a = read_zero_pad(q, c, h, w, cc, y as isize - dy, x as isize - dx);
                        let b = read_zero_pad(k, c, h, w, cc, y as isize + dy, x as isize + dx);
                        acc += a * b;
                    }
                    out[((hd * h + y) * w + x) * d_count + di] = acc;
                }
            }
        }
    }
    out
}

/// Anchor-form logits for one side: `<Q_head(x), K_head(x + sign*d)>`.
#[allow(clippy::too_many_arguments)]
pub fn naive_sliding_logits_anchor(
    q: &[f64],
    k: &[f64],
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    heads: usize,
    sign: isize,
) -> Vec<f64> {
    let d_count = (2 * r + 1) * (2 * r + 1);
    let head_dim = c / heads;
    let mut out = vec![0.0; heads * h * w * d_count];
    for hd in 0..heads {
        for y in 0..h {
            for x in 0..w {
                for (di, (dy, dx)) in window_offsets(r).into_iter().enumerate() {
                    let mut acc = 0.0;
                    for cc in hd * head_dim..(hd + 1) * head_dim {
                        let a = read_zero_pad(q, c, h, w, cc, y as isize, x as isize);
                        let b = read_zero_pad(k, c, h, w, cc, y as isize + sign * dy, x as isize + sign * dx);
                        acc += a * b;
                    }
                    out[((hd * h + y) * w + x) * d_count + di] = acc;
                }
            }
        }
    }
    out
}

/// Value aggregation along the displacement window:
/// `Z_c(x) = sum_d probs[head(c)](x, d) * V_c(x + sign*d)`, zero padded.
#[allow(clippy::too_many_arguments)]
pub fn naive_displacement_aggregate(
    probs: &[f64],
    v: &[f64],
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    heads: usize,
    sign: isize,
) -> Vec<f64> {
    let d_count = (2 * r + 1) * (2 * r + 1);
    let head_dim = c / heads;
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let hd = ch / head_dim;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (di, (dy, dx)) in window_offsets(r).into_iter().enumerate() {
                    let p = probs[((hd * h + y) * w + x) * d_count + di];
                    acc += p * read_zero_pad(v, c, h, w, ch, y as isize + sign * dy, x as isize + sign * dx);
                }
                out[ch * hw + y * w + x] = acc;
            }
        }
    }
    out
}

/// Dense multi-head self-attention over all positions of a `[C, H, W]` map:
/// scaled dot-product with a relative-position bias table indexed by
/// `(dy + h - 1) * (2w - 1) + (dx + w - 1)` per head. The reference for a
/// single-window Swin layer with no shift.
#[allow(clippy::too_many_arguments)]
pub fn naive_dense_mhsa(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    c: usize,
    h: usize,
    w: usize,
    heads: usize,
    bias: &[f64],
) -> Vec<f64> {
    let head_dim = c / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let tokens = h * w;
    let span = 2 * w - 1;
    let mut out = vec![0.0; c * tokens];
    for hd in 0..heads {
        for ti in 0..tokens {
            let (yi, xi) = (ti / w, ti % w);
            let mut logits = vec![0.0; tokens];
            for tj in 0..tokens {
                let (yj, xj) = (tj / w, tj % w);
                let mut dot = 0.0;
                for cc in hd * head_dim..(hd + 1) * head_dim {
                    dot += q[cc * tokens + ti] * k[cc * tokens + tj];
                }
                let rel = (yi as isize - yj as isize + h as isize - 1) as usize * span
                    + (xi as isize - xj as isize + w as isize - 1) as usize;
                logits[tj] = dot * scale + bias[hd * (2 * h - 1) * span + rel];
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for cc in hd * head_dim..(hd + 1) * head_dim {
                let mut acc = 0.0;
                for tj in 0..tokens {
                    acc += exps[tj] / sum * v[cc * tokens + tj];
                }
                out[cc * tokens + ti] = acc;
            }
        }
    }
    out
}

/// Naive strided convolution with zero padding, `[Cout, Cin, kh, kw]` weights.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            acc += read_zero_pad(x, c_in, h, w, ci, iy, ix)
                                * weight[((co * c_in + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Luma conversion used by the census loss reference.
pub fn naive_luma(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    if c == 1 {
        return img[..hw].to_vec();
    }
    let mut out = vec![0.0; hw];
    for p in 0..hw {
        out[p] = 0.299 * img[p] + 0.587 * img[hw + p] + 0.114 * img[2 * hw + p];
    }
    out
}

/// Census loss reference: soft ternary transform over a `patch x patch`
/// neighborhood (differences squashed by `d / sqrt(0.81 + d^2)`), per-pixel
/// soft Hamming distance `sum_k e_k^2 / (0.1 + e_k^2)`, robustified by a
/// zero-floored Charbonnier `(s^2 + eps^2)^alpha - eps^(2 alpha)`, averaged
/// over the valid interior.
#[allow(clippy::too_many_arguments)]
pub fn naive_census_loss(
    a: &[f64],
    b: &[f64],
    c: usize,
    h: usize,
    w: usize,
    patch: usize,
    alpha: f64,
    eps: f64,
) -> f64 {
    let la = naive_luma(a, c, h, w);
    let lb = naive_luma(b, c, h, w);
    let half = patch / 2;
    let squash = |d: f64| d / (0.81 + d * d).sqrt();
    let mut total = 0.0;
    let mut count = 0usize;
    for y in half..h - half {
        for x in half..w - half {
            let mut s = 0.0;
            for dy in 0..patch {
                for dx in 0..patch {
                    if dy == half && dx == half {
                        continue;
                    }
                    let ny = y + dy - half;
                    let nx = x + dx - half;
                    let ca = squash(la[ny * w + nx] - la[y * w + x]);
                    let cb = squash(lb[ny * w + nx] - lb[y * w + x]);
                    let e = ca - cb;
                    s += e * e / (0.1 + e * e);
                }
            }
            total += (s * s + eps * eps).powf(alpha) - eps.powf(2.0 * alpha);
            count += 1;
        }
    }
    total / count as f64
}

/// Bilinear resize reference with half-pixel centers and clamp-to-edge
/// sampling, matching the optimized resize convention.
pub fn naive_bilinear_resize(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
                let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                let y0 = sy.floor();
                let x0 = sx.floor();
                let fy = sy - y0;
                let fx = sx - x0;
                let clamp = |v: f64, hi: usize| -> usize { (v.max(0.0) as usize).min(hi - 1) };
                let (ya, yb) = (clamp(y0, h), clamp(y0 + 1.0, h));
                let (xa, xb) = (clamp(x0, w), clamp(x0 + 1.0, w));
                out[(ch * oh + oy) * ow + ox] = (1.0 - fy) * (1.0 - fx) * x[(ch * h + ya) * w + xa]
                    + (1.0 - fy) * fx * x[(ch * h + ya) * w + xb]
                    + fy * (1.0 - fx) * x[(ch * h + yb) * w + xa]
                    + fy * fx * x[(ch * h + yb) * w + xb];
            }
        }
    }
    out
}

/// Max relative difference between two buffers:
/// `|a - b| / max(1, |a|, |b|)` elementwise, maximized.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "buffers differ in length");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
