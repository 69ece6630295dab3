//! Matching-cost volumes.
//!
//! Two flavors: the symmetric bilateral correlation used by the global
//! estimator (features read at `x - d` and `x + d` around every pixel), and
//! blockwise bilateral cost volumes (BBCVs) used by the motion upsampler,
//! where the search windows are centered at the motion-shifted block
//! coordinates `(x + V(x)) / 2^k` and read with bilinear interpolation.
//!
//! Displacement enumeration is row-major over `d = (dx, dy)` in `[-r, r]^2`,
//! dy outer, dx inner. Out-of-frame reads are zero.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::warp::{bilinear_taps, BilateralPair};

/// Displacement window bookkeeping: radius and the fixed enumeration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisplacementWindow {
    pub radius: usize,
}

impl DisplacementWindow {
    pub fn new(radius: usize) -> Self {
        DisplacementWindow { radius }
    }

    pub fn len(&self) -> usize {
        let side = 2 * self.radius + 1;
        side * side
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Offsets in enumeration order (dy outer, dx inner).
    pub fn offsets(&self) -> impl Iterator<Item = (isize, isize)> {
        let r = self.radius as isize;
        (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| (dy, dx)))
    }
}

/// `[H, W, (2r+1)^2]` matching-cost volume.
#[derive(Debug, Clone)]
pub struct CostVolume<S: Scalar> {
    pub data: Tensor<S>,
    pub window: DisplacementWindow,
    /// Block size index: 0 for the global volume, `k` for a BBCV over
    /// `2^k x 2^k` block embeddings.
    pub block_index: usize,
    /// True when the search windows are centered at motion-shifted block
    /// coordinates rather than at the pixel itself.
    pub motion_centered: bool,
}

impl<S: Scalar> CostVolume<S> {
    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Symmetric bilateral correlation `C(x, d) = <F0(x - d), F1(x + d)>` over a
/// `(2r+1)^2` window, zero-padded. Differentiable in both feature maps.
pub fn bilateral_correlation<S: Scalar>(
    f0: &Tensor<S>,
    f1: &Tensor<S>,
    radius: usize,
) -> Result<CostVolume<S>> {
    if f0.shape() != f1.shape() {
        return Err(Error::shape(
            "bilateral_correlation",
            format!("{:?} vs {:?}", f0.shape(), f1.shape()),
        ));
    }
    let s = f0.shape();
    if s.len() != 3 {
        return Err(Error::shape("bilateral_correlation", format!("expected [C, H, W], got {:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let window = DisplacementWindow::new(radius);
    let d_count = window.len();
    let hw = h * w;

    let a = f0.data();
    let b = f1.data();
    let mut out = vec![S::ZERO; hw * d_count];
    for y in 0..h as isize {
        for x in 0..w as isize {
            for (di, (dy, dx)) in window.offsets().enumerate() {
                let (y0, x0) = (y - dy, x - dx);
                let (y1, x1) = (y + dy, x + dx);
                if !in_frame(y0, x0, h, w) || !in_frame(y1, x1, h, w) {
                    continue;
                }
                let p0 = y0 as usize * w + x0 as usize;
                let p1 = y1 as usize * w + x1 as usize;
                let mut acc = 0.0f64;
                for ch in 0..c {
                    acc += a[ch * hw + p0].to_f64() * b[ch * hw + p1].to_f64();
                }
                out[(y as usize * w + x as usize) * d_count + di] = S::from_f64(acc);
            }
        }
    }

    let a_snap = f0.data();
    let b_snap = f1.data();
    let data = Tensor::from_op(
        "bilateral_correlation",
        vec![h, w, d_count],
        out,
        vec![f0.clone(), f1.clone()],
        move |g| {
            let window = DisplacementWindow::new(radius);
            let mut da = vec![S::ZERO; c * hw];
            let mut db = vec![S::ZERO; c * hw];
            for y in 0..h as isize {
                for x in 0..w as isize {
                    for (di, (dy, dx)) in window.offsets().enumerate() {
                        let (y0, x0) = (y - dy, x - dx);
                        let (y1, x1) = (y + dy, x + dx);
                        if !in_frame(y0, x0, h, w) || !in_frame(y1, x1, h, w) {
                            continue;
                        }
                        let gv = g[(y as usize * w + x as usize) * d_count + di].to_f64();
                        if gv == 0.0 {
                            continue;
                        }
                        let p0 = y0 as usize * w + x0 as usize;
                        let p1 = y1 as usize * w + x1 as usize;
                        for ch in 0..c {
                            let i0 = ch * hw + p0;
                            let i1 = ch * hw + p1;
                            da[i0] = da[i0].add(S::from_f64(gv * b_snap[i1].to_f64()));
                            db[i1] = db[i1].add(S::from_f64(gv * a_snap[i0].to_f64()));
                        }
                    }
                }
            }
            vec![Some(da), Some(db)]
        },
    )?;
    Ok(CostVolume { data, window, block_index: 0, motion_centered: false })
}

/// Blockwise bilateral cost volume for block index `k`.
///
/// For each pixel `x` on the fine grid, the two window centers are the
/// motion-shifted block coordinates `(x + V_{t->0}(x)) / 2^k` and
/// `(x + V_{t->1}(x)) / 2^k`; costs are dot products of block embeddings read
/// with bilinear interpolation at `center -/+ d`. Differentiable in both
/// embeddings and the motion field.
pub fn bbcv<S: Scalar>(
    s0: &Tensor<S>,
    s1: &Tensor<S>,
    motion: &BilateralPair<S>,
    k: usize,
    radius: usize,
) -> Result<CostVolume<S>> {
    if k > 2 {
        return Err(Error::invalid("bbcv", format!("block index {k} outside 0..=2")));
    }
    if s0.shape() != s1.shape() {
        return Err(Error::shape("bbcv", format!("{:?} vs {:?}", s0.shape(), s1.shape())));
    }
    let s = s0.shape();
    if s.len() != 3 {
        return Err(Error::shape("bbcv", format!("expected [C, Hb, Wb], got {:?}", s)));
    }
    let (c, bh, bw) = (s[0], s[1], s[2]);
    let (h, w) = (motion.height(), motion.width());
    if bh != h >> k || bw != w >> k {
        return Err(Error::shape(
            "bbcv",
            format!("embeddings {}x{} inconsistent with {}x{} grid at block index {}", bh, bw, h, w, k),
        ));
    }
    let window = DisplacementWindow::new(radius);
    let d_count = window.len();
    let hw = h * w;
    let bhw = bh * bw;
    let inv_scale = 1.0 / (1usize << k) as f64;

    let a = s0.data();
    let b = s1.data();
    let v1 = motion.to_frame1.data.data();
    let mut out = vec![S::ZERO; hw * d_count];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (vx, vy) = (v1[p].to_f64(), v1[hw + p].to_f64());
            let c0x = (x as f64 - vx) * inv_scale;
            let c0y = (y as f64 - vy) * inv_scale;
            let c1x = (x as f64 + vx) * inv_scale;
            let c1y = (y as f64 + vy) * inv_scale;
            for (di, (dy, dx)) in window.offsets().enumerate() {
                let (i0, w0) = bilinear_taps(c0x - dx as f64, c0y - dy as f64, bh, bw);
                let (i1, w1) = bilinear_taps(c1x + dx as f64, c1y + dy as f64, bh, bw);
                let mut acc = 0.0f64;
                for ch in 0..c {
                    let av = tap_value(&a[ch * bhw..(ch + 1) * bhw], &i0, &w0);
                    let bv = tap_value(&b[ch * bhw..(ch + 1) * bhw], &i1, &w1);
                    acc += av * bv;
                }
                out[p * d_count + di] = S::from_f64(acc);
            }
        }
    }

    let a_snap = s0.data();
    let b_snap = s1.data();
    let v_snap = motion.to_frame1.data.data();
    let data = Tensor::from_op(
        "bbcv",
        vec![h, w, d_count],
        out,
        vec![s0.clone(), s1.clone(), motion.to_frame1.data.clone()],
        move |g| {
            let window = DisplacementWindow::new(radius);
            let mut da = vec![S::ZERO; c * bhw];
            let mut db = vec![S::ZERO; c * bhw];
            let mut dv = vec![S::ZERO; 2 * hw];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let (vx, vy) = (v_snap[p].to_f64(), v_snap[hw + p].to_f64());
                    let c0x = (x as f64 - vx) * inv_scale;
                    let c0y = (y as f64 - vy) * inv_scale;
                    let c1x = (x as f64 + vx) * inv_scale;
                    let c1y = (y as f64 + vy) * inv_scale;
                    let mut gvx = 0.0f64;
                    let mut gvy = 0.0f64;
                    for (di, (dy, dx)) in window.offsets().enumerate() {
                        let gv = g[p * d_count + di].to_f64();
                        if gv == 0.0 {
                            continue;
                        }
                        let s0x = c0x - dx as f64;
                        let s0y = c0y - dy as f64;
                        let s1x = c1x + dx as f64;
                        let s1y = c1y + dy as f64;
                        let (i0, w0) = bilinear_taps(s0x, s0y, bh, bw);
                        let (i1, w1) = bilinear_taps(s1x, s1y, bh, bw);
                        let (dw0x, dw0y) = tap_pos_derivs(s0x, s0y);
                        let (dw1x, dw1y) = tap_pos_derivs(s1x, s1y);
                        for ch in 0..c {
                            let plane_a = &a_snap[ch * bhw..(ch + 1) * bhw];
                            let plane_b = &b_snap[ch * bhw..(ch + 1) * bhw];
                            let av = tap_value(plane_a, &i0, &w0);
                            let bv = tap_value(plane_b, &i1, &w1);
                            // Scatter into the embeddings.
                            for t in 0..4 {
                                if let Some(i) = i0[t] {
                                    da[ch * bhw + i] = da[ch * bhw + i].add(S::from_f64(gv * bv * w0[t]));
                                }
                                if let Some(i) = i1[t] {
                                    db[ch * bhw + i] = db[ch * bhw + i].add(S::from_f64(gv * av * w1[t]));
                                }
                            }
                            // Positional derivative of each bilinear read.
                            let da_dx = tap_deriv(plane_a, &i0, &dw0x);
                            let da_dy = tap_deriv(plane_a, &i0, &dw0y);
                            let db_dx = tap_deriv(plane_b, &i1, &dw1x);
                            let db_dy = tap_deriv(plane_b, &i1, &dw1y);
                            // Centers move by -/+ v / 2^k.
                            gvx += gv * (bv * da_dx * (-inv_scale) + av * db_dx * inv_scale);
                            gvy += gv * (bv * da_dy * (-inv_scale) + av * db_dy * inv_scale);
                        }
                    }
                    dv[p] = S::from_f64(gvx);
                    dv[hw + p] = S::from_f64(gvy);
                }
            }
            vec![Some(da), Some(db), Some(dv)]
        },
    )?;
    Ok(CostVolume { data, window, block_index: k, motion_centered: true })
}

fn in_frame(y: isize, x: isize, h: usize, w: usize) -> bool {
    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w
}

fn tap_value<S: Scalar>(plane: &[S], idx: &[Option<usize>; 4], wt: &[f64; 4]) -> f64 {
    let mut acc = 0.0;
    for t in 0..4 {
        if let Some(i) = idx[t] {
            acc += plane[i].to_f64() * wt[t];
        }
    }
    acc
}

fn tap_deriv<S: Scalar>(plane: &[S], idx: &[Option<usize>; 4], dw: &[f64; 4]) -> f64 {
    let mut acc = 0.0;
    for t in 0..4 {
        if let Some(i) = idx[t] {
            acc += plane[i].to_f64() * dw[t];
        }
    }
    acc
}

/// Derivatives of the four bilinear tap weights with respect to the sample
/// position, tap order (y0x0, y0x1, y1x0, y1x1).
fn tap_pos_derivs(sx: f64, sy: f64) -> ([f64; 4], [f64; 4]) {
    let fx = sx - sx.floor();
    let fy = sy - sy.floor();
    let dw_dx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
    let dw_dy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
    (dw_dx, dw_dy)
}

/// Cost-volume memory mode for size accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryMode {
    /// One `H x W x (2r+1)^2` volume at the pixel-unit radius.
    Full,
    /// Three blockwise volumes (k = 0, 1, 2) at the block-unit radius.
    Blockwise,
}

/// Bytes needed to hold cost volumes of the given geometry in f32.
pub fn memory_report(h: usize, w: usize, radius: usize, mode: MemoryMode) -> usize {
    let per_volume = h * w * (2 * radius + 1) * (2 * radius + 1) * std::mem::size_of::<f32>();
    match mode {
        MemoryMode::Full => per_volume,
        MemoryMode::Blockwise => 3 * per_volume,
    }
}

/// Bytes for a single full volume whose pixel-unit coverage equals the
/// largest blockwise window: side `(2r+1) * 2^k_max` pixels.
pub fn full_equivalent_bytes(h: usize, w: usize, radius: usize, k_max: usize) -> usize {
    let side = (2 * radius + 1) << k_max;
    h * w * side * side * std::mem::size_of::<f32>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[c, h, w], data).unwrap()
    }

    #[test]
    fn constant_features_give_channel_count() {
        let f = Tensor::<f64>::full(&[3, 5, 5], 1.0).unwrap();
        let vol = bilateral_correlation(&f, &f, 1).unwrap();
        let d = vol.data.data();
        // Interior pixel (2,2): all displacements stay in frame.
        for di in 0..9 {
            assert_eq!(d[(2 * 5 + 2) * 9 + di], 3.0);
        }
    }

    #[test]
    fn zero_target_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f0 = random_map(&mut rng, 2, 4, 4);
        let f1 = Tensor::<f64>::zeros(&[2, 4, 4]);
        let vol = bilateral_correlation(&f0, &f1, 2).unwrap();
        assert!(vol.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn correlation_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f0 = random_map(&mut rng, 4, 5, 5);
        let f1 = random_map(&mut rng, 4, 5, 5);
        let vol = bilateral_correlation(&f0, &f1, 2).unwrap();
        let want = oracle::naive_bilateral_correlation(&f0.to_vec(), &f1.to_vec(), 4, 5, 5, 2);
        let got: Vec<f64> = vol.data.data().to_vec();
        assert!(oracle::max_rel_diff(&got, &want) < 1e-12);
    }

    #[test]
    fn swap_symmetry() {
        // C(F1, F0)(x, d) = C(F0, F1)(x, -d) exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f0 = random_map(&mut rng, 3, 6, 6);
        let f1 = random_map(&mut rng, 3, 6, 6);
        let r = 2usize;
        let ab = bilateral_correlation(&f0, &f1, r).unwrap();
        let ba = bilateral_correlation(&f1, &f0, r).unwrap();
        let (da, db) = (ab.data.data(), ba.data.data());
        let d_count = (2 * r + 1) * (2 * r + 1);
        for p in 0..36 {
            for di in 0..d_count {
                let flipped = d_count - 1 - di;
                assert_eq!(db[p * d_count + di], da[p * d_count + flipped]);
            }
        }
    }

    #[test]
    fn translation_equivariance_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 8usize;
        let w = 8usize;
        let r = 1usize;
        let base0 = random_map(&mut rng, 2, h, w);
        let base1 = random_map(&mut rng, 2, h, w);
        // Shift both maps by (1, 1) via crop of the same underlying data.
        let shift = |t: &Tensor<f64>| t.crop2d(1, 1, h - 2, w - 2).unwrap();
        let inner0 = shift(&base0);
        let inner1 = shift(&base1);
        let vol_shift = bilateral_correlation(&inner0, &inner1, r).unwrap();
        let vol_full = bilateral_correlation(&base0, &base1, r).unwrap();
        let d_count = (2 * r + 1) * (2 * r + 1);
        let (ds, df) = (vol_shift.data.data(), vol_full.data.data());
        // Away from borders the shifted volume equals the full volume
        // shifted by the same offset.
        for y in r..h - 2 - r {
            for x in r..w - 2 - r {
                for di in 0..d_count {
                    let a = ds[(y * (w - 2) + x) * d_count + di];
                    let b = df[((y + 1) * w + x + 1) * d_count + di];
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn bbcv_center_arithmetic() {
        // x = (4,4), V_{t->1}(x) = (2,2), k = 1 -> center (3,3) on the block grid.
        let h = 8usize;
        let w = 8usize;
        let k = 1usize;
        let mut v = vec![0.0f64; 2 * h * w];
        v[4 * w + 4] = 2.0;
        v[h * w + 4 * w + 4] = 2.0;
        let pair = BilateralPair::from_t1(Tensor::from_vec(&[2, h, w], v).unwrap(), 2).unwrap();
        // Centers: toward frame 1 at (4+2)/2 = (3,3), toward frame 0 at
        // (4-2)/2 = (1,1). One-hot embeddings at exactly those blocks make
        // the d=0 cost fire with value 1.
        let bw = w >> k;
        let mut e1 = vec![0.0f64; (h >> k) * bw];
        e1[3 * bw + 3] = 1.0;
        let mut e0 = vec![0.0f64; (h >> k) * bw];
        e0[bw + 1] = 1.0;
        let s0 = Tensor::from_vec(&[1, h >> k, bw], e0).unwrap();
        let s1 = Tensor::from_vec(&[1, h >> k, bw], e1).unwrap();
        let vol = bbcv(&s0, &s1, &pair, k, 0).unwrap();
        let d = vol.data.data();
        assert_eq!(d[4 * w + 4], 1.0);
    }

    #[test]
    fn bbcv_zero_motion_k0_reduces_to_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s0 = random_map(&mut rng, 3, 6, 6);
        let s1 = random_map(&mut rng, 3, 6, 6);
        let pair = BilateralPair::from_t1(Tensor::<f64>::zeros(&[2, 6, 6]), 1).unwrap();
        let b = bbcv(&s0, &s1, &pair, 0, 2).unwrap();
        let c = bilateral_correlation(&s0, &s1, 2).unwrap();
        let (db, dc) = (b.data.data(), c.data.data());
        for (x, y) in db.iter().zip(dc.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn bbcv_matches_oracle_all_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 8usize;
        let w = 8usize;
        for k in 0..=2usize {
            let s0 = random_map(&mut rng, 3, h >> k, w >> k);
            let s1 = random_map(&mut rng, 3, h >> k, w >> k);
            let v: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let pair = BilateralPair::from_t1(Tensor::from_vec(&[2, h, w], v.clone()).unwrap(), 1).unwrap();
            let vol = bbcv(&s0, &s1, &pair, k, 2).unwrap();
            let want = oracle::naive_bbcv(&s0.to_vec(), &s1.to_vec(), 3, h, w, k, &v, 2);
            let got: Vec<f64> = vol.data.data().to_vec();
            assert!(oracle::max_rel_diff(&got, &want) < 1e-12, "k = {k}");
        }
    }

    #[test]
    fn bbcv_rejects_bad_block_index_and_scale() {
        let s = Tensor::<f64>::zeros(&[1, 4, 4]);
        let pair = BilateralPair::from_t1(Tensor::<f64>::zeros(&[2, 8, 8]), 1).unwrap();
        assert!(bbcv(&s, &s, &pair, 3, 2).is_err());
        assert!(bbcv(&s, &s, &pair, 0, 2).is_err()); // 4x4 embeddings on an 8x8 grid at k=0
    }

    #[test]
    fn memory_report_closed_forms() {
        assert_eq!(memory_report(16, 16, 2, MemoryMode::Full), 16 * 16 * 25 * 4);
        assert_eq!(memory_report(0, 0, 2, MemoryMode::Full), 0);
        let blockwise = memory_report(128, 128, 2, MemoryMode::Blockwise);
        let full_equiv = full_equivalent_bytes(128, 128, 2, 2);
        assert!(blockwise < full_equiv);
        assert_eq!(full_equiv, 128 * 128 * 400 * 4);
    }
}
