//! Product-of-marginals sampling and the dependency-diffusion path.
//!
//! `Z^0 = X`, and `Z^j` replaces one more column block of `Z^{j-1}` with the
//! corresponding columns of the marginal sample `Z`, so `Z^k = Z`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg, Error, Result};
use crate::image::{ImageSet, SetTag};
use crate::scalar::Scalar;

/// Ordered, disjoint column blocks covering every column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffusionSchedule {
    cols: usize,
    blocks: Vec<Vec<usize>>,
}

impl DiffusionSchedule {
    pub fn new(cols: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        if blocks.is_empty() {
            return arg("a schedule needs at least one block");
        }
        let mut seen = vec![false; cols];
        for (b, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return arg(format!("block {b} is empty"));
            }
            for &c in block {
                if c >= cols {
                    return arg(format!("block {b} names column {c} but images have {cols}"));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return arg(format!("column {c} appears in more than one block"));
                }
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return arg(format!("column {c} is not covered by any block"));
        }
        Ok(Self { cols, blocks })
    }

    /// Number of path steps `k`.
    pub fn steps(&self) -> usize {
        self.blocks.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }
}

/// `k` contiguous blocks, left to right. The first `cols % k` blocks are one
/// column wider than the rest, so there are always exactly `k` blocks.
pub fn default_schedule(cols: usize, k: usize) -> Result<DiffusionSchedule> {
    if k == 0 {
        return arg("path needs at least one step");
    }
    if k > cols {
        return arg(format!("cannot split {cols} columns into {k} blocks"));
    }
    let (base, extra) = (cols / k, cols % k);
    let mut blocks = Vec::with_capacity(k);
    let mut start = 0;
    for b in 0..k {
        let width = base + usize::from(b < extra);
        blocks.push((start..start + width).collect());
        start += width;
    }
    DiffusionSchedule::new(cols, blocks)
}

/// Draws a sample of the product of empirical marginals: each pixel position
/// of each output image is an independent uniform draw, with replacement, from
/// the values `X` holds at that position.
pub fn sample_marginals<T: Scalar>(x: &ImageSet<T>, seed: u64) -> Result<ImageSet<T>> {
    let n = x.len();
    if n < 2 {
        return arg(format!("marginal resampling needs at least 2 images, got {n}"));
    }
    let dim = x.dim();
    let src = x.pixels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![T::zero(); n * dim];
    for p in 0..dim {
        for i in 0..n {
            let from = rng.random_range(0..n);
            out[i * dim + p] = src[from * dim + p];
        }
    }
    Ok(ImageSet::from_parts_unchecked(x.rows(), x.cols(), out, SetTag::Marginal))
}

/// `[Z^0 = X, Z^1, ..., Z^k = Z]` for the given schedule.
pub fn build_path<T: Scalar>(
    x: &ImageSet<T>,
    z: &ImageSet<T>,
    schedule: &DiffusionSchedule,
) -> Result<Vec<ImageSet<T>>> {
    if !x.same_shape(z) || x.len() != z.len() {
        return Err(Error::Argument(format!(
            "X is {} x {}x{} but Z is {} x {}x{}",
            x.len(),
            x.rows(),
            x.cols(),
            z.len(),
            z.rows(),
            z.cols()
        )));
    }
    if schedule.cols() != x.cols() {
        return arg(format!("schedule covers {} columns, images have {}", schedule.cols(), x.cols()));
    }
    let (rows, cols, dim) = (x.rows(), x.cols(), x.dim());
    let mut path = Vec::with_capacity(schedule.steps() + 1);
    path.push(x.clone().with_tag(SetTag::Real));
    let mut current = x.pixels().to_vec();
    let zp = z.pixels();
    for (j, block) in schedule.blocks().iter().enumerate() {
        for i in 0..x.len() {
            for r in 0..rows {
                for &c in block {
                    let at = i * dim + r * cols + c;
                    current[at] = zp[at];
                }
            }
        }
        let tag = if j + 1 == schedule.steps() { SetTag::Marginal } else { SetTag::Intermediate(j + 1) };
        path.push(ImageSet::from_parts_unchecked(rows, cols, current.clone(), tag));
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_set(seed: u64, n: usize, rows: usize, cols: usize) -> ImageSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..n * rows * cols).map(|_| rng.random_range(0.0..1.0)).collect();
        ImageSet::new(rows, cols, px, SetTag::Real).unwrap()
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(default_schedule(4, 1).unwrap().blocks(), &[vec![0, 1, 2, 3]]);
        assert_eq!(default_schedule(4, 2).unwrap().blocks(), &[vec![0, 1], vec![2, 3]]);
        assert_eq!(default_schedule(5, 2).unwrap().blocks(), &[vec![0, 1, 2], vec![3, 4]]);
        assert_eq!(default_schedule(5, 4).unwrap().steps(), 4);
        assert!(default_schedule(3, 4).is_err());
        assert!(default_schedule(3, 0).is_err());
        assert!(DiffusionSchedule::new(3, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(DiffusionSchedule::new(3, vec![vec![0, 1]]).is_err());
    }

    #[test]
    fn identical_images_have_degenerate_marginals() {
        let one = [0.1, 0.9, 0.4, 0.6];
        let x = ImageSet::new(2, 2, one.repeat(5), SetTag::Real).unwrap();
        let z = sample_marginals(&x, 3).unwrap();
        assert_eq!(z.pixels(), x.pixels());
        for set in build_path(&x, &z, &default_schedule(2, 2).unwrap()).unwrap() {
            assert_eq!(set.pixels(), x.pixels());
        }
    }

    #[test]
    fn single_image_is_rejected() {
        let x = ImageSet::new(1, 2, vec![0.0, 1.0], SetTag::Real).unwrap();
        assert!(sample_marginals(&x, 0).is_err());
    }

    #[test]
    fn resampling_destroys_perfect_correlation() {
        // Two pixels that are both 0 or both 1 with probability 1/2 each.
        let n = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut px = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            px.extend([v, v]);
        }
        let x = ImageSet::new(1, 2, px, SetTag::Real).unwrap();
        let z = sample_marginals(&x, 5).unwrap();
        let (a, b): (Vec<f64>, Vec<f64>) = z.iter().map(|im| (im[0], im[1])).unzip();
        let ma = a.iter().sum::<f64>() / n as f64;
        let mb = b.iter().sum::<f64>() / n as f64;
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n as f64;
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n as f64;
        let vb: f64 = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n as f64;
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() <= 0.05, "correlation {corr}");
    }

    #[test]
    fn intermediate_set_mixes_columns() {
        let x = random_set(1, 6, 3, 4);
        let z = random_set(2, 6, 3, 4);
        let path = build_path(&x, &z, &default_schedule(4, 2).unwrap()).unwrap();
        assert_eq!(path.len(), 3);
        for i in 0..6 {
            for r in 0..3 {
                for c in 0..4 {
                    let at = r * 4 + c;
                    let expect = if c < 2 { z.image(i)[at] } else { x.image(i)[at] };
                    assert_eq!(path[1].image(i)[at], expect);
                }
            }
        }
        assert_eq!(path[1].tag(), SetTag::Intermediate(1));
        let single = build_path(&x, &z, &default_schedule(4, 1).unwrap()).unwrap();
        assert_eq!(single.len(), 2);
        assert_eq!(single[0].pixels(), x.pixels());
        assert_eq!(single[1].pixels(), z.pixels());
        assert!(build_path(&x, &random_set(3, 5, 3, 4), &default_schedule(4, 1).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn path_endpoints_support_and_monotonicity(seed in 0u64..500, k in 1usize..5) {
            let x = random_set(seed, 7, 2, 5);
            let z = sample_marginals(&x, seed ^ 0xabc).unwrap();
            let again = sample_marginals(&x, seed ^ 0xabc).unwrap();
            prop_assert_eq!(z.pixels(), again.pixels());
            let sched = default_schedule(5, k).unwrap();
            let path = build_path(&x, &z, &sched).unwrap();
            prop_assert_eq!(path[0].pixels(), x.pixels());
            prop_assert_eq!(path[k].pixels(), z.pixels());
            let dim = x.dim();
            for set in &path {
                for (i, im) in set.iter().enumerate() {
                    for p in 0..dim {
                        let v = im[p];
                        prop_assert!((0..x.len()).any(|s| x.image(s)[p] == v), "image {} pixel {}", i, p);
                    }
                }
            }
            // marginalized column sets strictly grow
            let mut covered = std::collections::BTreeSet::new();
            for block in sched.blocks() {
                let before = covered.len();
                covered.extend(block.iter().copied());
                prop_assert!(covered.len() > before);
            }
        }
    }
}
