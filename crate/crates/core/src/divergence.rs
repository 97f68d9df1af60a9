//! Empirical Donsker–Varadhan divergence and its path decomposition.
//!
//! For dual values `f` on a numerator set of size `m` and a denominator set of
//! size `n`, the estimate is `mean(f_num) - logmeanexp(f_den)` in nats.

use crate::error::{arg, Error, Result};
use crate::image::ImageSet;
use crate::model::{DualFunctionModel, ModelInput};
use crate::scalar::{mean, ordered_sum, Scalar};

/// `log(sum(exp(v)))`, shifted by the maximum so large inputs do not overflow.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return arg("logsumexp of an empty vector");
    }
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(Error::Input(format!("logsumexp input contains {max}")));
    }
    let shifted: Vec<T> = values.iter().map(|&v| (v - max).exp()).collect();
    Ok(max + ordered_sum(&shifted).ln())
}

/// `log(mean(exp(v)))`, computed as `max + log(mean(exp(v - max)))`.
pub fn log_mean_exp<T: Scalar>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return arg("logmeanexp of an empty vector");
    }
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(Error::Input(format!("logmeanexp input contains {max}")));
    }
    let shifted: Vec<T> = values.iter().map(|&v| (v - max).exp()).collect();
    Ok(max + mean(&shifted).ln())
}

fn check_finite<T: Scalar>(name: &str, values: &[T]) -> Result<()> {
    if values.is_empty() {
        return arg(format!("{name} dual values are empty"));
    }
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("{name} dual value {pos} is {}", values[pos])));
    }
    Ok(())
}

/// `mean(f_num) - logmeanexp(f_den)`.
pub fn dv_estimate<T: Scalar>(f_num: &[T], f_den: &[T]) -> Result<T> {
    check_finite("numerator", f_num)?;
    check_finite("denominator", f_den)?;
    Ok(mean(f_num) - log_mean_exp(f_den)?)
}

/// Estimate together with its derivatives with respect to every input value.
#[derive(Debug, Clone, PartialEq)]
pub struct DvGradient<T> {
    pub value: T,
    pub d_num: Vec<T>,
    pub d_den: Vec<T>,
}

pub fn dv_gradient<T: Scalar>(f_num: &[T], f_den: &[T]) -> Result<DvGradient<T>> {
    let value = dv_estimate(f_num, f_den)?;
    let inv_m = T::one() / T::from_usize_lossy(f_num.len());
    let lse = log_sum_exp(f_den)?;
    Ok(DvGradient {
        value,
        d_num: vec![inv_m; f_num.len()],
        d_den: f_den.iter().map(|&v| -(v - lse).exp()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceEstimate<T> {
    pub value: T,
    pub numerator_count: usize,
    pub denominator_count: usize,
    /// Step-wise terms along a diffusion path; they sum to `value`.
    pub per_step: Option<Vec<T>>,
}

/// Per-step offsets `eta[j] = logmeanexp(f(., j) over Z^j)` that center each
/// step's dual function.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDualOffsets<T> {
    pub eta: Vec<T>,
}

impl<T: Scalar> NormalizedDualOffsets<T> {
    pub fn zeros(steps: usize) -> Self {
        Self { eta: vec![T::zero(); steps] }
    }

    pub fn steps(&self) -> usize {
        self.eta.len()
    }
}

pub fn normalize_dual<T: Scalar>(per_step_values: &[Vec<T>]) -> Result<NormalizedDualOffsets<T>> {
    if per_step_values.is_empty() {
        return arg("normalize_dual needs at least one step");
    }
    let eta = per_step_values
        .iter()
        .enumerate()
        .map(|(j, v)| {
            if v.is_empty() {
                arg(format!("step {j} has no dual values"))
            } else {
                log_mean_exp(v)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NormalizedDualOffsets { eta })
}

fn check_offsets<T: Scalar>(model: &DualFunctionModel<T>, offsets: &NormalizedDualOffsets<T>) -> Result<()> {
    if offsets.steps() != model.path_steps() {
        return arg(format!(
            "model has {} path steps but {} offsets were given",
            model.path_steps(),
            offsets.steps()
        ));
    }
    Ok(())
}

/// Dual-space coordinate `sum_j (f(x, j) - eta[j])` of one image.
pub fn path_dual_value<T: Scalar>(
    model: &DualFunctionModel<T>,
    image: &[T],
    offsets: &NormalizedDualOffsets<T>,
) -> Result<T> {
    check_offsets(model, offsets)?;
    let terms = offsets
        .eta
        .iter()
        .enumerate()
        .map(|(j, &eta)| Ok(model.forward_one(image, Some(j))? - eta))
        .collect::<Result<Vec<_>>>()?;
    Ok(ordered_sum(&terms))
}

/// Inputs evaluating every image at every path step, image-major.
pub(crate) fn all_step_inputs<'a, T: Scalar>(set: &'a ImageSet<T>, steps: usize) -> Vec<ModelInput<'a, T>> {
    set.iter()
        .flat_map(|im| (0..steps).map(move |j| ModelInput::new(im, Some(j))))
        .collect()
}

/// Folds image-major per-step outputs into dual coordinates.
pub(crate) fn fold_steps<T: Scalar>(outputs: &[T], offsets: &NormalizedDualOffsets<T>) -> Vec<T> {
    let k = offsets.steps();
    outputs
        .chunks_exact(k)
        .map(|row| {
            let terms: Vec<T> = row.iter().zip(&offsets.eta).map(|(&f, &e)| f - e).collect();
            ordered_sum(&terms)
        })
        .collect()
}

/// Dual coordinates of every image in `set`; same values as calling
/// [`path_dual_value`] image by image.
pub fn path_dual_values<T: Scalar>(
    model: &DualFunctionModel<T>,
    set: &ImageSet<T>,
    offsets: &NormalizedDualOffsets<T>,
) -> Result<Vec<T>> {
    check_offsets(model, offsets)?;
    if set.is_empty() {
        return Ok(Vec::new());
    }
    let outputs = model.forward_inputs(&all_step_inputs(set, offsets.steps()))?;
    Ok(fold_steps(&outputs, offsets))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `D(Z || X)`: each step puts `Z^{j+1}` in the numerator under `f(., j)`.
    TowardMarginal,
    /// `D(X || Z)`, the multi-information estimate. Each step puts `Z^j` in the
    /// numerator; the dual of the reversed divergence is `-f(., j)`.
    TowardData,
}

/// Sum of step-wise DV estimates along `path = [Z^0 = X, ..., Z^k = Z]`.
pub fn path_divergence<T: Scalar>(
    model: &DualFunctionModel<T>,
    path: &[ImageSet<T>],
    direction: Direction,
) -> Result<DivergenceEstimate<T>> {
    if path.len() < 2 {
        return arg(format!("a diffusion path needs at least 2 sets, got {}", path.len()));
    }
    let k = path.len() - 1;
    if model.step_conditioned() && model.path_steps() != k {
        return arg(format!("model has {} path steps but the path has {k}", model.path_steps()));
    }
    if path.iter().any(|s| !s.same_shape(&path[0])) {
        return Err(Error::Shape("path sets differ in image dims".into()));
    }
    let mut per_step = Vec::with_capacity(k);
    for j in 0..k {
        let lower = model.forward(&path[j], Some(j))?;
        let upper = model.forward(&path[j + 1], Some(j))?;
        let term = match direction {
            Direction::TowardMarginal => dv_estimate(&upper, &lower)?,
            Direction::TowardData => {
                let neg = |v: Vec<T>| v.into_iter().map(|x| -x).collect::<Vec<_>>();
                dv_estimate(&neg(lower), &neg(upper))?
            }
        };
        per_step.push(term);
    }
    let (numerator_count, denominator_count) = match direction {
        Direction::TowardMarginal => (path[k].len(), path[0].len()),
        Direction::TowardData => (path[0].len(), path[k].len()),
    };
    Ok(DivergenceEstimate { value: ordered_sum(&per_step), numerator_count, denominator_count, per_step: Some(per_step) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::SetTag;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    /// Direct evaluation with no max shift; fine for small inputs.
    fn naive_dv(num: &[f64], den: &[f64]) -> f64 {
        let m = num.iter().sum::<f64>() / num.len() as f64;
        let e = den.iter().map(|v| v.exp()).sum::<f64>() / den.len() as f64;
        m - e.ln()
    }

    #[test]
    fn hand_cases() {
        assert_eq!(dv_estimate(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(dv_estimate(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        // 0.5 - ln((1 + e) / 2)
        let want: f64 = 0.5 - ((1.0 + std::f64::consts::E) / 2.0).ln();
        assert!((dv_estimate(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - want).abs() < 1e-12);
        assert!((want - -0.120_114_507_3).abs() < 1e-9);
    }

    #[test]
    fn empty_and_non_finite_inputs() {
        assert!(matches!(dv_estimate::<f64>(&[], &[0.0]), Err(Error::Argument(_))));
        assert!(matches!(dv_estimate(&[0.0], &[]), Err(Error::Argument(_))));
        assert!(matches!(dv_estimate(&[f64::INFINITY], &[0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn normalize_dual_cases() {
        assert_eq!(normalize_dual(&[vec![0.0, 0.0]]).unwrap().eta, vec![0.0]);
        let c: f64 = 3.7;
        assert!((normalize_dual(&[vec![c, c]]).unwrap().eta[0] - c).abs() < 1e-15);
        let eta = normalize_dual(&[vec![0.0, 3f64.ln()]]).unwrap().eta[0];
        assert!((eta - 2f64.ln()).abs() < 1e-15);
        assert!(normalize_dual::<f64>(&[vec![0.0], vec![]]).is_err());
    }

    #[test]
    fn dv_gradient_matches_finite_differences() {
        let num = [0.3, -1.2, 2.0];
        let den = [0.5, 1.5, -0.7, 0.1];
        let g = dv_gradient(&num, &den).unwrap();
        let h = 1e-6;
        for i in 0..num.len() {
            let (mut p, mut m) = (num, num);
            p[i] += h;
            m[i] -= h;
            let fd = (naive_dv(&p, &den) - naive_dv(&m, &den)) / (2.0 * h);
            assert!((fd - g.d_num[i]).abs() < 1e-8);
        }
        for i in 0..den.len() {
            let (mut p, mut m) = (den, den);
            p[i] += h;
            m[i] -= h;
            let fd = (naive_dv(&num, &p) - naive_dv(&num, &m)) / (2.0 * h);
            assert!((fd - g.d_den[i]).abs() < 1e-8);
        }
    }

    fn fixed_set(seed: u64, n: usize) -> ImageSet<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let px = (0..n * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        ImageSet::new(2, 2, px, SetTag::Real).unwrap()
    }

    #[test]
    fn path_dual_value_arithmetic() {
        let zero = DualFunctionModel::<f64>::zeroed(2, 2, 3, ModelConfig { hidden_dims: vec![2], ..Default::default() }).unwrap();
        let x = [0.2, 0.4, 0.6, 0.8];
        assert_eq!(path_dual_value(&zero, &x, &NormalizedDualOffsets::zeros(3)).unwrap(), 0.0);
        assert!(path_dual_value(&zero, &x, &NormalizedDualOffsets::zeros(2)).is_err());

        let m1 = DualFunctionModel::<f64>::new(2, 2, 1, ModelConfig { hidden_dims: vec![3], ..Default::default() }).unwrap();
        let off = NormalizedDualOffsets { eta: vec![0.25] };
        let want = m1.forward_one(&x, Some(0)).unwrap() - 0.25;
        assert_eq!(path_dual_value(&m1, &x, &off).unwrap(), want);

        let m2 = DualFunctionModel::<f64>::new(2, 2, 4, ModelConfig { hidden_dims: vec![3], ..Default::default() }).unwrap();
        let off = NormalizedDualOffsets { eta: vec![0.1, -0.2, 0.3, 0.05] };
        let set = fixed_set(2, 5);
        let batch = path_dual_values(&m2, &set, &off).unwrap();
        for (i, im) in set.iter().enumerate() {
            assert_eq!(batch[i], path_dual_value(&m2, im, &off).unwrap());
        }
    }

    #[test]
    fn two_step_sum_is_forced() {
        // f(x, 0) = 1 and f(x, 1) = 2 through the output bias and the step input.
        let mut m = DualFunctionModel::<f64>::zeroed(1, 1, 2, ModelConfig { hidden_dims: vec![1], ..Default::default() }).unwrap();
        let mut p = m.params().to_vec();
        // layer 0: weights for [pixel, step], bias; layer 1: weight, bias
        p[1] = 1.0;
        p[3] = 1.0 / 1f64.tanh();
        p[4] = 1.0;
        m.set_params(&p, &p).unwrap();
        let x = [0.0];
        assert!((m.forward_one(&x, Some(0)).unwrap() - 1.0).abs() < 1e-15);
        assert!((m.forward_one(&x, Some(1)).unwrap() - 2.0).abs() < 1e-15);
        let off = NormalizedDualOffsets { eta: vec![0.5, 0.5] };
        assert!((path_dual_value(&m, &x, &off).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_step_path_is_bit_identical_to_dv_estimate() {
        let m = DualFunctionModel::<f64>::new(2, 2, 1, ModelConfig { hidden_dims: vec![5], ..Default::default() }).unwrap();
        let (x, z) = (fixed_set(1, 9), fixed_set(2, 7));
        let est = path_divergence(&m, &[x.clone(), z.clone()], Direction::TowardMarginal).unwrap();
        let direct = dv_estimate(&m.forward(&z, Some(0)).unwrap(), &m.forward(&x, Some(0)).unwrap()).unwrap();
        assert_eq!(est.value.to_bits(), direct.to_bits());
        assert_eq!((est.numerator_count, est.denominator_count), (7, 9));

        let zero = DualFunctionModel::<f64>::zeroed(2, 2, 1, ModelConfig { hidden_dims: vec![5], ..Default::default() }).unwrap();
        assert_eq!(path_divergence(&zero, &[x, z], Direction::TowardMarginal).unwrap().value, 0.0);
    }

    #[test]
    fn three_step_path_sums_independent_estimates() {
        let m = DualFunctionModel::<f64>::new(2, 2, 3, ModelConfig { hidden_dims: vec![5], ..Default::default() }).unwrap();
        let path: Vec<_> = (0..4).map(|s| fixed_set(s, 6)).collect();
        for dir in [Direction::TowardMarginal, Direction::TowardData] {
            let est = path_divergence(&m, &path, dir).unwrap();
            let mut total = 0.0;
            for j in 0..3 {
                let lo = m.forward(&path[j], Some(j)).unwrap();
                let hi = m.forward(&path[j + 1], Some(j)).unwrap();
                total += match dir {
                    Direction::TowardMarginal => dv_estimate(&hi, &lo).unwrap(),
                    Direction::TowardData => {
                        let n = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
                        dv_estimate(&n(&lo), &n(&hi)).unwrap()
                    }
                };
            }
            assert!((est.value - total).abs() < 1e-12);
            let per = est.per_step.unwrap();
            assert!((per.iter().sum::<f64>() - est.value).abs() < 1e-9);
        }
        assert!(path_divergence(&m, &path[..1], Direction::TowardData).is_err());
        assert!(path_divergence(&m, &path[..3], Direction::TowardData).is_err());
    }

    proptest! {
        #[test]
        fn self_divergence_is_non_positive(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let d = dv_estimate(&v, &v).unwrap();
            prop_assert!(d <= 1e-12);
            let constant = v.iter().all(|&x| x == v[0]);
            if !constant {
                prop_assert!(d < 0.0);
            } else {
                prop_assert!(d.abs() <= 1e-12);
            }
        }

        #[test]
        fn shift_invariance(
            num in prop::collection::vec(-20.0f64..20.0, 1..20),
            den in prop::collection::vec(-20.0f64..20.0, 1..20),
            c in -100.0f64..100.0,
        ) {
            let a = dv_estimate(&num, &den).unwrap();
            let sn: Vec<f64> = num.iter().map(|x| x + c).collect();
            let sd: Vec<f64> = den.iter().map(|x| x + c).collect();
            let b = dv_estimate(&sn, &sd).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + c.abs()));
        }

        #[test]
        fn logsumexp_does_not_overflow(v in prop::collection::vec(-1e4f64..1e4, 1..30)) {
            let lse = log_sum_exp(&v).unwrap();
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lse.is_finite());
            prop_assert!(lse >= max - 1e-9 && lse <= max + (v.len() as f64).ln() + 1e-9);
            let lme = log_mean_exp(&v).unwrap();
            prop_assert!((lme - (lse - (v.len() as f64).ln())).abs() < 1e-9);
        }
    }
}
