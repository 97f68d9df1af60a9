//! Synthetic image sets with known structure.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{arg, Result};
use crate::image::{ImageSet, SetTag};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Ar1Sample<T> {
    pub images: ImageSet<T>,
    /// `-0.5 ln det R` of the unclipped Gaussian, in nats.
    pub analytic_mmi: f64,
}

/// `n` Gaussian images whose flattened (row-major) pixels have correlation
/// `rho^|i - j|`; values are clipped to `[-3, 3]` and mapped to `[0, 1]`.
pub fn synth_gaussian_ar1<T: Scalar>(n: usize, rows: usize, cols: usize, rho: f64, seed: u64) -> Result<Ar1Sample<T>> {
    if !(rho.abs() < 1.0) {
        return arg(format!("|rho| must be below 1, got {rho}"));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return arg("n, rows and cols must be positive");
    }
    let dim = rows * cols;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let mut prev: f64 = StandardNormal.sample(&mut rng);
        pixels.push(to_unit(prev));
        for _ in 1..dim {
            let e: f64 = StandardNormal.sample(&mut rng);
            prev = rho * prev + innovation * e;
            pixels.push(to_unit(prev));
        }
    }
    let analytic_mmi = -0.5 * (dim as f64 - 1.0) * (1.0 - rho * rho).ln();
    Ok(Ar1Sample {
        images: ImageSet::new(rows, cols, pixels.into_iter().map(T::lit).collect(), SetTag::Real)?,
        analytic_mmi,
    })
}

fn to_unit(v: f64) -> f64 {
    (v.clamp(-3.0, 3.0) + 3.0) / 6.0
}

#[derive(Debug, Clone)]
pub struct TwoClusterSample<T> {
    pub images: ImageSet<T>,
    /// `0` for the low cluster, `1` for the high cluster.
    pub labels: Vec<usize>,
}

/// Alternating low/high images around `0.5 -/+ separation / 2` with i.i.d.
/// `N(0, 0.05^2)` pixel noise, clipped to `[0, 1]`.
pub fn synth_two_clusters<T: Scalar>(
    n: usize,
    rows: usize,
    cols: usize,
    separation: f64,
    seed: u64,
) -> Result<TwoClusterSample<T>> {
    if n == 0 || !n.is_multiple_of(2) {
        return arg(format!("n must be positive and even, got {n}"));
    }
    if !(separation >= 0.0) {
        return arg(format!("separation must be non-negative, got {separation}"));
    }
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rows * cols;
    let mut pixels = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let center = if label == 0 { 0.5 - separation / 2.0 } else { 0.5 + separation / 2.0 };
        for _ in 0..dim {
            let v: f64 = center + noise.sample(&mut rng);
            pixels.push(T::lit(v.clamp(0.0, 1.0)));
        }
        labels.push(label);
    }
    Ok(TwoClusterSample { images: ImageSet::new(rows, cols, pixels, SetTag::Real)?, labels })
}
