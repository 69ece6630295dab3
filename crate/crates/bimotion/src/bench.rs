//! Benchmark helpers behind the CLI `bench` subcommand. Output rows are CSV
//! `size,mode,bytes,ms`.
//!
//! Cost-volume mode compares the blockwise bilateral volumes (three radius-2
//! volumes over block indices 0..=2) against one full correlation volume
//! whose pixel-unit coverage matches the largest block window: side
//! `(2r+1) * 2^k` pixels, so radius `ceil((side - 1) / 2)` in pixel units.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::costvol::{bbcv, bilateral_correlation, full_equivalent_bytes, memory_report, MemoryMode};
use crate::error::Result;
use crate::pipeline::{interpolate, synthetic_sample, PipelineConfig, PipelineWeights, SyntheticSample};
use crate::tensor::{no_grad, Tensor};
use crate::warp::BilateralPair;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub size: usize,
    pub mode: String,
    pub bytes: usize,
    pub ms: f64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{:.3}", self.size, self.mode, self.bytes, self.ms)
    }
}

/// Human-readable coverage arithmetic for the blockwise windows.
pub fn coverage_summary(radius: usize, k_max: usize) -> String {
    let mut parts = Vec::new();
    for k in 0..=k_max {
        let side = (2 * radius + 1) << k;
        parts.push(format!("k={k}: ((2*{radius}+1)*2^{k})^2 = {}^2 = {} px^2", side, side * side));
    }
    let side = (2 * radius + 1) << k_max;
    parts.push(format!(
        "full-volume equivalent: {side}^2 = {} displacements per pixel",
        side * side
    ));
    parts.join("\n")
}

/// Times the blockwise volumes and the coverage-equivalent full volume at
/// each square size. Feature channels are fixed small so the comparison is
/// about volume geometry.
pub fn bench_costvol(sizes: &[usize], radius: usize, k_max: usize) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let channels = 8usize;
    let mut rows = Vec::new();
    for &size in sizes {
        let h = size;
        let w = size;
        let mk = |rng: &mut ChaCha8Rng, c: usize, hh: usize, ww: usize| {
            let data: Vec<f32> = (0..c * hh * ww).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(&[c, hh, ww], data).unwrap()
        };
        // Blockwise: three volumes over embeddings at h >> k.
        let v: Vec<f32> = (0..2 * h * w).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let pair = BilateralPair::from_t1(Tensor::from_vec(&[2, h, w], v)?, 1)?;
        let embeds: Vec<(Tensor<f32>, Tensor<f32>)> =
            (0..=k_max).map(|k| (mk(&mut rng, channels, h >> k, w >> k), mk(&mut rng, channels, h >> k, w >> k))).collect();
        let start = Instant::now();
        no_grad(|| -> Result<()> {
            for (k, (s0, s1)) in embeds.iter().enumerate() {
                let _ = bbcv(s0, s1, &pair, k, radius)?;
            }
            Ok(())
        })?;
        let blockwise_ms = start.elapsed().as_secs_f64() * 1e3;
        rows.push(BenchRow {
            size,
            mode: "blockwise".into(),
            bytes: memory_report(h, w, radius, MemoryMode::Blockwise),
            ms: blockwise_ms,
        });

        // Full volume with matching pixel coverage: smallest odd window that
        // covers side (2r+1)*2^k pixels.
        let side = (2 * radius + 1) << k_max;
        let full_radius = side / 2;
        let f0 = mk(&mut rng, channels, h, w);
        let f1 = mk(&mut rng, channels, h, w);
        let start = Instant::now();
        no_grad(|| bilateral_correlation(&f0, &f1, full_radius))?;
        let full_ms = start.elapsed().as_secs_f64() * 1e3;
        rows.push(BenchRow {
            size,
            mode: "full".into(),
            bytes: full_equivalent_bytes(h, w, radius, k_max),
            ms: full_ms,
        });
    }
    Ok(rows)
}

/// Times end-to-end interpolation at each square size with fresh default
/// weights. Bytes count the cost volumes allocated across all three stages.
pub fn bench_pipeline(sizes: &[usize], cfg: &PipelineConfig) -> Result<Vec<BenchRow>> {
    let weights = PipelineWeights::<f32>::init(cfg)?;
    let mut rows = Vec::new();
    for &size in sizes {
        let sample: SyntheticSample<f32> = synthetic_sample(17, 0, size, cfg.max_shift)?;
        let start = Instant::now();
        no_grad(|| interpolate(&sample.frame0, &sample.frame1, cfg, &weights))?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        // Global volume at 1/8 plus blockwise volumes at 1/4 and 1/2.
        let eighth = size / 8;
        let mut bytes = memory_report(eighth, eighth, cfg.global_radius, MemoryMode::Full);
        for scale in [size / 4, size / 2] {
            bytes += memory_report(scale, scale, cfg.bbcv_radius, MemoryMode::Blockwise);
        }
        rows.push(BenchRow { size, mode: "pipeline".into(), bytes, ms });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blockwise_beats_full_on_bytes() {
        let rows = bench_costvol(&[32], 2, 2).unwrap();
        let blockwise = rows.iter().find(|r| r.mode == "blockwise").unwrap();
        let full = rows.iter().find(|r| r.mode == "full").unwrap();
        assert!(blockwise.bytes * 10 < full.bytes * 3, "{} vs {}", blockwise.bytes, full.bytes);
        assert!(blockwise.ms > 0.0 && full.ms > 0.0);
    }

    #[test]
    fn coverage_text_mentions_formula() {
        let text = coverage_summary(2, 2);
        assert!(text.contains("(2*2+1)*2^2"));
        assert!(text.contains("400"));
    }
}
