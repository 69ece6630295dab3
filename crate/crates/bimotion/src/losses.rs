//! Training losses: Charbonnier penalty, soft census loss, and the two
//! composite objectives (photometric for the global stage, synthesis for the
//! refinement + synthesis stage).
//!
//! Census details: luma conversion (0.299/0.587/0.114), soft ternary
//! transform over a 7x7 neighborhood with differences squashed by
//! `d / sqrt(0.81 + d^2)`, per-pixel soft Hamming distance
//! `sum_k e_k^2 / (0.1 + e_k^2)`, robustified by a zero-floored Charbonnier
//! and averaged over the valid interior. Identical images give exactly zero.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::warp::{backward_warp, BilateralPair};

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Charbonnier exponent.
    pub alpha: f64,
    /// Charbonnier offset.
    pub eps: f64,
    /// Census neighborhood side (odd).
    pub census_patch: usize,
    /// Soft-Hamming threshold in the per-neighbor distance.
    pub census_hamming_eps: f64,
    /// Squash constant in the soft ternary transform.
    pub census_squash: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            eps: 1e-3,
            census_patch: 7,
            census_hamming_eps: 0.1,
            census_squash: 0.81,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("charbonnier alpha and eps must be positive".into()));
        }
        if self.census_patch % 2 == 0 || self.census_patch == 0 {
            return Err(Error::Config("census patch size must be odd".into()));
        }
        Ok(())
    }
}

/// Mean Charbonnier penalty `mean((x^2 + eps^2)^alpha)`.
pub fn charbonnier<S: Scalar>(x: &Tensor<S>, cfg: &LossConfig) -> Result<Tensor<S>> {
    let eps2 = S::from_f64(cfg.eps * cfg.eps);
    x.mul(x)?.add_scalar(eps2)?.pow_scalar(S::from_f64(cfg.alpha))?.mean()
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn luma_plane<S: Scalar>(img: &[S], c: usize, hw: usize) -> Vec<f64> {
    match c {
        1 => img[..hw].iter().map(|v| v.to_f64()).collect(),
        3 => (0..hw)
            .map(|p| {
                LUMA[0] * img[p].to_f64() + LUMA[1] * img[hw + p].to_f64() + LUMA[2] * img[2 * hw + p].to_f64()
            })
            .collect(),
        _ => unreachable!("census channel count validated by caller"),
    }
}

/// Soft census loss between two images (`[1, H, W]` or `[3, H, W]`).
pub fn census_loss<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, cfg: &LossConfig) -> Result<Tensor<S>> {
    cfg.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::shape("census_loss", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s = a.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(Error::shape("census_loss", format!("expected [1|3, H, W], got {:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let patch = cfg.census_patch;
    let half = patch / 2;
    if h < patch || w < patch {
        return Err(Error::invalid("census_loss", format!("{h}x{w} image smaller than {patch}x{patch} patch")));
    }
    let hw = h * w;
    let sq = cfg.census_squash;
    let he = cfg.census_hamming_eps;
    let alpha = cfg.alpha;
    let eps = cfg.eps;
    let floor = eps.powf(2.0 * alpha);
    let n_interior = ((h - 2 * half) * (w - 2 * half)) as f64;

    let offsets: Vec<(isize, isize)> = (0..patch)
        .flat_map(|dy| (0..patch).map(move |dx| (dy as isize - half as isize, dx as isize - half as isize)))
        .filter(|&(dy, dx)| dy != 0 || dx != 0)
        .collect();

    let ad = a.data();
    let bd = b.data();
    let la = luma_plane(&ad, c, hw);
    let lb = luma_plane(&bd, c, hw);

    let squash = move |d: f64| d / (sq + d * d).sqrt();
    let mut total = 0.0f64;
    for y in half..h - half {
        for x in half..w - half {
            let p = y * w + x;
            let mut sdist = 0.0f64;
            for &(dy, dx) in &offsets {
                let q = (y as isize + dy) as usize * w + (x as isize + dx) as usize;
                let e = squash(la[q] - la[p]) - squash(lb[q] - lb[p]);
                sdist += e * e / (he + e * e);
            }
            total += (sdist * sdist + eps * eps).powf(alpha) - floor;
        }
    }
    let value = S::from_f64(total / n_interior);

    let offsets_c = offsets.clone();
    Tensor::from_op("census_loss", vec![1], vec![value], vec![a.clone(), b.clone()], move |g| {
        let gv = g[0].to_f64() / n_interior;
        let mut dla = vec![0.0f64; hw];
        let mut dlb = vec![0.0f64; hw];
        for y in half..h - half {
            for x in half..w - half {
                let p = y * w + x;
                // Recompute the per-pixel distance, then push the chain back
                // through the soft Hamming and the squash.
                let mut sdist = 0.0f64;
                for &(dy, dx) in &offsets_c {
                    let q = (y as isize + dy) as usize * w + (x as isize + dx) as usize;
                    let e = squash(la[q] - la[p]) - squash(lb[q] - lb[p]);
                    sdist += e * e / (he + e * e);
                }
                let dl_ds = gv * alpha * 2.0 * sdist * (sdist * sdist + eps * eps).powf(alpha - 1.0);
                if dl_ds == 0.0 {
                    continue;
                }
                for &(dy, dx) in &offsets_c {
                    let q = (y as isize + dy) as usize * w + (x as isize + dx) as usize;
                    let da = la[q] - la[p];
                    let db = lb[q] - lb[p];
                    let e = squash(da) - squash(db);
                    let dh_de = 2.0 * he * e / ((he + e * e) * (he + e * e));
                    let dcda = sq / (sq + da * da).powf(1.5);
                    let dcdb = sq / (sq + db * db).powf(1.5);
                    let ga = dl_ds * dh_de * dcda;
                    let gb = -dl_ds * dh_de * dcdb;
                    dla[q] += ga;
                    dla[p] -= ga;
                    dlb[q] += gb;
                    dlb[p] -= gb;
                }
            }
        }
        // Chain through the luma conversion.
        let expand = |dl: &[f64]| -> Vec<S> {
            let mut out = vec![S::ZERO; c * hw];
            match c {
                1 => {
                    for p in 0..hw {
                        out[p] = S::from_f64(dl[p]);
                    }
                }
                _ => {
                    for ch in 0..3 {
                        for p in 0..hw {
                            out[ch * hw + p] = S::from_f64(dl[p] * LUMA[ch]);
                        }
                    }
                }
            }
            out
        };
        vec![Some(expand(&dla)), Some(expand(&dlb))]
    })
}

/// Photometric objective for the global stage: Charbonnier plus census terms
/// between the ground truth and the two backward-warped inputs.
pub fn photometric_loss<S: Scalar>(
    i_gt: &Tensor<S>,
    i0: &Tensor<S>,
    i1: &Tensor<S>,
    motion: &BilateralPair<S>,
    cfg: &LossConfig,
) -> Result<Tensor<S>> {
    if i_gt.shape() != i0.shape() || i_gt.shape() != i1.shape() {
        return Err(Error::shape("photometric_loss", "frame shapes differ"));
    }
    let warped0 = backward_warp(i0, &motion.to_frame0)?;
    let warped1 = backward_warp(i1, &motion.to_frame1)?;
    let rho0 = charbonnier(&i_gt.sub(&warped0)?, cfg)?;
    let rho1 = charbonnier(&i_gt.sub(&warped1)?, cfg)?;
    let cen0 = census_loss(i_gt, &warped0, cfg)?;
    let cen1 = census_loss(i_gt, &warped1, cfg)?;
    rho0.add(&rho1)?.add(&cen0)?.add(&cen1)
}

/// Synthesis objective: Charbonnier plus census between ground truth and the
/// synthesized frame.
pub fn synthesis_loss<S: Scalar>(i_gt: &Tensor<S>, i_t: &Tensor<S>, cfg: &LossConfig) -> Result<Tensor<S>> {
    if i_gt.shape() != i_t.shape() {
        return Err(Error::shape("synthesis_loss", format!("{:?} vs {:?}", i_gt.shape(), i_t.shape())));
    }
    let rho = charbonnier(&i_gt.sub(i_t)?, cfg)?;
    let cen = census_loss(i_gt, i_t, cfg)?;
    rho.add(&cen)
}

/// Peak signal-to-noise ratio for intensity images in [0, 1].
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", "shapes differ"));
    }
    let (ad, bd) = (a.data(), b.data());
    let mse: f64 = ad
        .iter()
        .zip(bd.iter())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        / ad.len() as f64;
    Ok(10.0 * (1.0 / mse.max(1e-12)).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::warp::constant_flow;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[c, h, w], data).unwrap()
    }

    #[test]
    fn charbonnier_closed_forms() {
        let cfg = LossConfig::default();
        let zero = Tensor::<f64>::zeros(&[4, 4]);
        let v = charbonnier(&zero, &cfg).unwrap().item().unwrap();
        assert!((v - 1e-3).abs() < 1e-12);
        let ones = Tensor::<f64>::full(&[4, 4], 1.0).unwrap();
        let v1 = charbonnier(&ones, &cfg).unwrap().item().unwrap();
        assert!((v1 - (1.0f64 + 1e-6).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn census_identical_images_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let a = random_image(&mut rng, 3, 9, 9);
        let cfg = LossConfig::default();
        let v = census_loss(&a, &a, &cfg).unwrap().item().unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn census_offset_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_image(&mut rng, 3, 9, 9);
        let b = a.add_scalar(0.05).unwrap();
        let cfg = LossConfig::default();
        let v = census_loss(&a, &b, &cfg).unwrap().item().unwrap();
        assert!(v < 1e-6, "census not offset invariant: {v}");
    }

    #[test]
    fn census_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a = random_image(&mut rng, 3, 10, 11);
        let b = random_image(&mut rng, 3, 10, 11);
        let cfg = LossConfig::default();
        let got = census_loss(&a, &b, &cfg).unwrap().item().unwrap();
        let want = oracle::naive_census_loss(&a.to_vec(), &b.to_vec(), 3, 10, 11, 7, 0.5, 1e-3);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn census_rejects_small_images() {
        let a = Tensor::<f64>::zeros(&[1, 5, 5]);
        let cfg = LossConfig::default();
        assert!(census_loss(&a, &a, &cfg).is_err());
    }

    #[test]
    fn photometric_static_scene_floor() {
        // Identical frames with zero motion: two Charbonnier floors plus two
        // zero census terms.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let img = random_image(&mut rng, 3, 9, 9);
        let pair = BilateralPair::from_t1(Tensor::<f64>::zeros(&[2, 9, 9]), 0).unwrap();
        let cfg = LossConfig::default();
        let v = photometric_loss(&img, &img, &img, &pair, &cfg).unwrap().item().unwrap();
        assert!((v - 2e-3).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn photometric_prefers_true_flow() {
        // A translating ramp: the loss at the true flow is lower than at a
        // perturbed flow.
        let h = 12usize;
        let w = 12usize;
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let tex = random_image(&mut rng, 1, h + 8, w + 8);
        let crop = |oy: usize, ox: usize| tex.crop2d(oy, ox, h, w).unwrap();
        // Truth: scene content moves +2 px in x between the frames, so the
        // bilateral field toward frame 1 is (+1, 0).
        let i0 = crop(4, 5);
        let gt = crop(4, 4);
        let i1 = crop(4, 3);
        let cfg = LossConfig::default();
        let true_pair = BilateralPair::from_t1(
            constant_flow::<f64>(h, w, 1.0, 0.0, 0, crate::warp::Endpoint::TToOne).unwrap().data,
            0,
        )
        .unwrap();
        let noisy_pair = BilateralPair::from_t1(
            constant_flow::<f64>(h, w, 1.7, -0.6, 0, crate::warp::Endpoint::TToOne).unwrap().data,
            0,
        )
        .unwrap();
        let good = photometric_loss(&gt, &i0, &i1, &true_pair, &cfg).unwrap().item().unwrap();
        let bad = photometric_loss(&gt, &i0, &i1, &noisy_pair, &cfg).unwrap().item().unwrap();
        assert!(good < bad, "loss at truth {good} not below perturbed {bad}");
    }

    #[test]
    fn synthesis_loss_floor_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let img = random_image(&mut rng, 3, 9, 9);
        let cfg = LossConfig::default();
        let v = synthesis_loss(&img, &img, &cfg).unwrap().item().unwrap();
        assert!((v - 1e-3).abs() < 1e-9);
        let near = synthesis_loss(&img, &img.add_scalar(0.01).unwrap(), &cfg).unwrap().item().unwrap();
        let far = synthesis_loss(&img, &img.add_scalar(0.05).unwrap(), &cfg).unwrap().item().unwrap();
        assert!(v < near && near < far);
    }

    #[test]
    fn losses_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let a = random_image(&mut rng, 3, 9, 9);
        let b = random_image(&mut rng, 3, 9, 9);
        let cfg = LossConfig::default();
        let v1 = census_loss(&a, &b, &cfg).unwrap().item().unwrap();
        let v2 = census_loss(&a, &b, &cfg).unwrap().item().unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
    }
}
