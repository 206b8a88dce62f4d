//! Kernel microbenchmark: naive dense GEMV against the two packed kernels.

use std::hint::black_box;
use std::time::Instant;

use anyhow::{ensure, Result};
use bcq_core::bcq::BitCluster;
use bcq_core::kernel::build_lut;
use bcq_core::{dequantize, gemv_direct, gemv_lut, memory_footprint, quantize_matrix, DenseTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub kernel: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub q: usize,
    pub mu: usize,
    pub iters: usize,
    pub median_ns: f64,
    /// Weight, scale and input bytes read per call (plus LUT bytes built).
    pub bytes_touched: usize,
    pub speedup: f64,
}

pub struct BenchConfig {
    pub rows: usize,
    pub cols: usize,
    pub q: usize,
    pub mu: usize,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
}

pub struct BenchOutcome {
    pub reports: Vec<BenchReport>,
    pub dense_weight_bytes: usize,
    pub quantized_weight_bytes: usize,
}

fn median_ns(iters: usize, warmup: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let mut times: Vec<f64> = (0..iters)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as f64
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        (times[n / 2 - 1] + times[n / 2]) / 2.0
    }
}

fn agree(name: &str, got: &[f32], reference: &[f32]) -> Result<()> {
    for (i, (a, b)) in got.iter().zip(reference).enumerate() {
        ensure!(
            (a - b).abs() <= 1e-5 * (1.0 + b.abs()),
            "{name} disagrees with the reference at row {i}: {a} vs {b}"
        );
    }
    Ok(())
}

pub fn run(c: &BenchConfig) -> Result<BenchOutcome> {
    ensure!(c.rows >= 1 && c.cols >= 1, "rows and cols must be at least 1");
    ensure!(c.iters >= 1, "at least one timed iteration is needed");
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let data: Vec<f32> = (0..c.rows * c.cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x: Vec<f32> = (0..c.cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    let w = DenseTensor::new("bench", c.rows, c.cols, data)?;
    let qt = quantize_matrix(&w, &BitCluster::uniform(c.rows, c.q))?;

    // agreement before any timing: both kernels against an f64 dense product
    // on the dequantized weights, and the LUT kernel against the direct one
    let deq = dequantize(&qt);
    let reference: Vec<f32> = (0..c.rows)
        .map(|r| deq.row(r).iter().zip(&x).map(|(&w, &v)| w as f64 * v as f64).sum::<f64>() as f32)
        .collect();
    let direct = gemv_direct(&qt, &x)?;
    let lut = gemv_lut(&qt, &x, c.mu)?;
    agree("gemv_direct", &direct, &reference)?;
    agree("gemv_lut", &lut, &reference)?;
    agree("gemv_lut vs gemv_direct", &lut, &direct)?;

    let dense_ns = median_ns(c.iters, c.warmup, || {
        black_box(w.matvec(black_box(&x)).unwrap());
    });
    let direct_ns = median_ns(c.iters, c.warmup, || {
        black_box(gemv_direct(&qt, black_box(&x)).unwrap());
    });
    let lut_ns = median_ns(c.iters, c.warmup, || {
        black_box(gemv_lut(&qt, black_box(&x), c.mu).unwrap());
    });

    let dense_weight_bytes = 4 * c.rows * c.cols;
    let quantized_weight_bytes = memory_footprint(&qt);
    let x_bytes = 4 * c.cols;
    let lut_bytes = {
        let t = build_lut(&x, c.mu)?;
        4 * t.blocks() * (1 << c.mu)
    };
    let report = |kernel, ns: f64, bytes| BenchReport {
        kernel,
        rows: c.rows,
        cols: c.cols,
        q: c.q,
        mu: c.mu,
        iters: c.iters,
        median_ns: ns,
        bytes_touched: bytes,
        speedup: dense_ns / ns,
    };
    Ok(BenchOutcome {
        reports: vec![
            report("dense", dense_ns, dense_weight_bytes + x_bytes),
            report("gemv_direct", direct_ns, quantized_weight_bytes + x_bytes),
            report("gemv_lut", lut_ns, quantized_weight_bytes + x_bytes + lut_bytes),
        ],
        dense_weight_bytes,
        quantized_weight_bytes,
    })
}
