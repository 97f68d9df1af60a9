//! Gradient walks in input space that move an image's dual coordinate to a
//! target value inside a gap between selected cut points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::clustering::{build_profile, select_cut_points, DualProfile};
use crate::divergence::{path_dual_values, NormalizedDualOffsets};
use crate::error::{arg, Error, Result};
use crate::image::{ImageSet, SetTag};
use crate::model::DualFunctionModel;
use crate::scalar::{ordered_sum, Scalar};

/// Walk convergence tolerance in dual-value units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tolerance<T> {
    Absolute(T),
    /// Fraction of the dual range of the real samples.
    RangeFraction(T),
}

impl<T: Scalar> Tolerance<T> {
    pub fn resolve(self, range: T) -> T {
        match self {
            Tolerance::Absolute(t) => t,
            Tolerance::RangeFraction(f) => f * range,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkConfig<T> {
    pub targets_per_gap: usize,
    pub step_size: T,
    pub max_steps: usize,
    pub tol: Tolerance<T>,
    pub noise_scale: T,
    pub seed: u64,
}

impl<T: Scalar> Default for WalkConfig<T> {
    fn default() -> Self {
        Self {
            targets_per_gap: 8,
            step_size: T::lit(0.05),
            max_steps: 200,
            tol: Tolerance::RangeFraction(T::lit(0.02)),
            noise_scale: T::lit(0.0005),
            seed: 0,
        }
    }
}

impl<T: Scalar> WalkConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.targets_per_gap == 0 {
            return arg("targets_per_gap must be at least 1");
        }
        if !(self.step_size > T::zero()) || !self.step_size.is_finite() {
            return arg(format!("walk step size must be positive, got {}", self.step_size));
        }
        if self.max_steps == 0 {
            return arg("max_steps must be at least 1");
        }
        let tol = match self.tol {
            Tolerance::Absolute(t) | Tolerance::RangeFraction(t) => t,
        };
        if !(tol > T::zero()) || !tol.is_finite() {
            return arg(format!("walk tolerance must be positive, got {tol}"));
        }
        if !(self.noise_scale >= T::zero()) || !self.noise_scale.is_finite() {
            return arg(format!("noise scale must be non-negative, got {}", self.noise_scale));
        }
        Ok(())
    }
}

/// A scalar function of an image with its input gradient.
pub trait DualField<T>: Sync {
    fn value_and_grad(&self, image: &[T]) -> Result<(T, Vec<T>)>;
}

/// `x -> sum_j (f(x, j) - eta[j])`.
pub struct PathDual<'a, T> {
    pub model: &'a DualFunctionModel<T>,
    pub offsets: &'a NormalizedDualOffsets<T>,
}

impl<T: Scalar> DualField<T> for PathDual<'_, T> {
    fn value_and_grad(&self, image: &[T]) -> Result<(T, Vec<T>)> {
        if self.model.path_steps() != self.offsets.steps() {
            return arg(format!(
                "model has {} path steps but {} offsets were given",
                self.model.path_steps(),
                self.offsets.steps()
            ));
        }
        let mut terms = Vec::with_capacity(self.offsets.steps());
        let mut grad = vec![T::zero(); image.len()];
        for (j, &eta) in self.offsets.eta.iter().enumerate() {
            let (v, g) = self.model.value_and_grad_input(image, Some(j))?;
            terms.push(v - eta);
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok((ordered_sum(&terms), grad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WalkOutcome<T> {
    Reached { image: Vec<T>, value: T, steps: usize },
    Exhausted { last_value: T },
}

/// Walks `x_start` toward dual value `target` along the raw input gradient,
/// clamping to the pixel box. The step size halves whenever the walk
/// overshoots. `stream` selects the noise stream for this walk.
pub fn walk_field<T: Scalar, F: DualField<T> + ?Sized>(
    field: &F,
    x_start: &[T],
    target: T,
    tol: T,
    cfg: &WalkConfig<T>,
    stream: u64,
) -> Result<WalkOutcome<T>> {
    if !target.is_finite() {
        return arg(format!("walk target is {target}"));
    }
    if x_start.iter().any(|p| !(*p >= T::zero() && *p <= T::one())) {
        return Err(Error::Input("walk start image must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let noise = if cfg.noise_scale > T::zero() {
        Some(Normal::new(0.0, cfg.noise_scale.as_f64()).map_err(|e| Error::Argument(e.to_string()))?)
    } else {
        None
    };
    let mut x = x_start.to_vec();
    let (mut value, mut grad) = field.value_and_grad(&x)?;
    let mut alpha = cfg.step_size;
    let mut prev_up = None;
    for step in 0..=cfg.max_steps {
        if (value - target).abs() <= tol {
            return Ok(WalkOutcome::Reached { image: x, value, steps: step });
        }
        if step == cfg.max_steps {
            break;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Walk(format!("non-finite input gradient at step {step}")));
        }
        let up = target > value;
        if prev_up.is_some_and(|p| p != up) {
            alpha = alpha * T::lit(0.5);
        }
        prev_up = Some(up);
        let dir = if up { alpha } else { -alpha };
        for (p, &g) in x.iter_mut().zip(&grad) {
            let jitter = noise.as_ref().map_or(T::zero(), |n| T::lit(n.sample(&mut rng)));
            *p = (*p + dir * g + jitter).max(T::zero()).min(T::one());
        }
        (value, grad) = field.value_and_grad(&x)?;
        if !value.is_finite() {
            return Err(Error::Walk(format!("dual value became {value} at step {}", step + 1)));
        }
    }
    Ok(WalkOutcome::Exhausted { last_value: value })
}

/// [`walk_field`] on the normalized path dual of `model`.
pub fn gradient_walk<T: Scalar>(
    model: &DualFunctionModel<T>,
    offsets: &NormalizedDualOffsets<T>,
    x_start: &[T],
    target: T,
    tol: T,
    cfg: &WalkConfig<T>,
    stream: u64,
) -> Result<WalkOutcome<T>> {
    walk_field(&PathDual { model, offsets }, x_start, target, tol, cfg, stream)
}

/// Generated samples with their bookkeeping.
#[derive(Debug, Clone)]
pub struct SampleOutcome<T> {
    pub images: ImageSet<T>,
    pub dual_values: Vec<T>,
    pub targets: Vec<T>,
    pub attempts: usize,
    pub walk_failures: usize,
    pub ood_rejections: usize,
}

impl<T: Scalar> SampleOutcome<T> {
    /// Retained samples per walk attempt.
    pub fn yield_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.images.len() as f64 / self.attempts as f64
        }
    }
}

/// Walk plan over the selected gaps of a profile.
struct GapPlan<'a, T> {
    x: &'a ImageSet<T>,
    profile: DualProfile<T>,
    cuts: Vec<usize>,
    per_gap: usize,
    tol: T,
    lo: T,
    hi: T,
}

struct Attempt<T> {
    start: usize,
    target: T,
}

impl<T: Scalar> GapPlan<'_, T> {
    /// Attempt `a` visits gap `a % c` and target slot `(a / c) % per_gap`.
    /// Later rounds start from deeper neighbours on the nearer side.
    fn attempt(&self, a: usize) -> Attempt<T> {
        let c = self.cuts.len();
        let (gap, m) = (a % c, a / c);
        let (slot, round) = (m % self.per_gap, m / self.per_gap);
        let j = self.cuts[gap];
        let left = self.profile.sorted_values[j - 1];
        let right = self.profile.sorted_values[j];
        let frac = T::from_usize_lossy(slot + 1) / T::from_usize_lossy(self.per_gap + 1);
        let target = left + (right - left) * frac;
        let (dl, dr) = (target - left, right - target);
        let from_left = if dl == dr { (slot + round) % 2 == 0 } else { dl < dr };
        let depth = round % self.profile.knn_k;
        let rank = if from_left { j - 1 - depth } else { j + depth };
        Attempt { start: self.profile.sort_permutation[rank], target }
    }
}

fn plan<'a, T: Scalar>(
    model: &DualFunctionModel<T>,
    offsets: &NormalizedDualOffsets<T>,
    x: &'a ImageSet<T>,
    knn_k: usize,
    c: usize,
    cfg: &WalkConfig<T>,
) -> Result<GapPlan<'a, T>> {
    cfg.validate()?;
    let values = path_dual_values(model, x, offsets)?;
    let profile = build_profile(&values, knn_k)?;
    let cuts = select_cut_points(&profile, c)?.indices;
    let lo = profile.sorted_values[0];
    let hi = profile.sorted_values[profile.len() - 1];
    let mut tol = cfg.tol.resolve(hi - lo);
    if !(tol > T::zero()) {
        // constant dual on X: any positive tolerance is scale-free here
        tol = T::epsilon();
    }
    Ok(GapPlan { x, profile, cuts, per_gap: cfg.targets_per_gap, tol, lo, hi })
}

fn run_attempts<T: Scalar>(
    field: &PathDual<'_, T>,
    plan: &GapPlan<'_, T>,
    cfg: &WalkConfig<T>,
    range: std::ops::Range<usize>,
) -> Result<Vec<(T, WalkOutcome<T>)>> {
    range
        .into_par_iter()
        .map(|a| {
            let at = plan.attempt(a);
            let outcome = walk_field(field, plan.x.image(at.start), at.target, plan.tol, cfg, a as u64)?;
            Ok((at.target, outcome))
        })
        .collect()
}

fn collect<T: Scalar>(
    plan: &GapPlan<'_, T>,
    results: Vec<(T, WalkOutcome<T>)>,
    out: &mut SampleOutcome<T>,
    limit: Option<usize>,
) {
    for (target, outcome) in results {
        if limit.is_some_and(|l| out.images.len() >= l) {
            break;
        }
        out.attempts += 1;
        match outcome {
            WalkOutcome::Reached { image, value, .. } => {
                if value < plan.lo || value > plan.hi {
                    out.ood_rejections += 1;
                } else {
                    out.images.push_image(&image);
                    out.dual_values.push(value);
                    out.targets.push(target);
                }
            }
            WalkOutcome::Exhausted { .. } => out.walk_failures += 1,
        }
    }
}

fn empty_outcome<T: Scalar>(x: &ImageSet<T>) -> SampleOutcome<T> {
    SampleOutcome {
        images: ImageSet::empty(x.rows(), x.cols(), SetTag::Generated),
        dual_values: Vec::new(),
        targets: Vec::new(),
        attempts: 0,
        walk_failures: 0,
        ood_rejections: 0,
    }
}

/// One walk per target: `targets_per_gap` equally spaced targets strictly
/// inside each of the `c` selected gaps, started from the nearer real
/// endpoint. Results outside the dual range of `x` are dropped.
pub fn sample_via_gradient_walk<T: Scalar>(
    model: &DualFunctionModel<T>,
    offsets: &NormalizedDualOffsets<T>,
    x: &ImageSet<T>,
    knn_k: usize,
    c: usize,
    cfg: &WalkConfig<T>,
) -> Result<SampleOutcome<T>> {
    let plan = plan(model, offsets, x, knn_k, c, cfg)?;
    let field = PathDual { model, offsets };
    let total = plan.cuts.len() * plan.per_gap;
    let mut out = empty_outcome(x);
    collect(&plan, run_attempts(&field, &plan, cfg, 0..total)?, &mut out, None);
    if out.images.is_empty() {
        log::warn!("all {} gradient walks failed or were filtered", out.attempts);
    }
    Ok(out)
}

/// Cycles over the gaps until `count` samples are retained or `4 * count`
/// walks have been attempted.
pub fn generate_samples<T: Scalar>(
    model: &DualFunctionModel<T>,
    offsets: &NormalizedDualOffsets<T>,
    x: &ImageSet<T>,
    knn_k: usize,
    c: usize,
    count: usize,
    cfg: &WalkConfig<T>,
) -> Result<SampleOutcome<T>> {
    let mut out = empty_outcome(x);
    if count == 0 {
        return Ok(out);
    }
    let plan = plan(model, offsets, x, knn_k, c, cfg)?;
    let field = PathDual { model, offsets };
    let budget = 4 * count;
    let mut next = 0;
    while out.images.len() < count && next < budget {
        let batch = (count - out.images.len()).min(budget - next);
        let results = run_attempts(&field, &plan, cfg, next..next + batch)?;
        collect(&plan, results, &mut out, Some(count));
        next += batch;
    }
    if out.images.is_empty() {
        return Err(Error::Walk(format!(
            "no samples retained after {} attempts ({} walks exhausted, {} out of range)",
            out.attempts, out.walk_failures, out.ood_rejections
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    struct Linear(Vec<f64>);

    impl DualField<f64> for Linear {
        fn value_and_grad(&self, image: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((image.iter().zip(&self.0).map(|(a, b)| a * b).sum(), self.0.clone()))
        }
    }

    fn quiet() -> WalkConfig<f64> {
        WalkConfig { noise_scale: 0.0, ..WalkConfig::default() }
    }

    #[test]
    fn start_at_target_takes_no_steps() {
        let field = Linear(vec![0.5, 0.5, 0.5, 0.5]);
        let x = [0.2, 0.4, 0.6, 0.8];
        let (v, _) = field.value_and_grad(&x).unwrap();
        match walk_field(&field, &x, v, 1e-9, &WalkConfig::default(), 0).unwrap() {
            WalkOutcome::Reached { image, steps, .. } => {
                assert_eq!(steps, 0);
                assert_eq!(image, x);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn linear_walk_takes_closed_form_steps() {
        let field = Linear(vec![0.5; 4]);
        let x = [0.5; 4];
        let cfg = WalkConfig { step_size: 0.01, ..quiet() };
        let target = 1.0 + 0.1;
        match walk_field(&field, &x, target, 1e-6, &cfg, 0).unwrap() {
            WalkOutcome::Reached { value, steps, .. } => {
                // each step moves the value by alpha * |w|^2 = 0.01
                assert_eq!(steps, 10);
                assert!((value - target).abs() <= 1e-6);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overshoot_halves_the_step() {
        let field = Linear(vec![1.0, 0.0]);
        let cfg = WalkConfig { step_size: 0.3, ..quiet() };
        match walk_field(&field, &[0.1, 0.5], 0.5, 1e-3, &cfg, 0).unwrap() {
            WalkOutcome::Reached { value, .. } => assert!((value - 0.5).abs() <= 1e-3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_gradient_exhausts_budget() {
        let model = DualFunctionModel::<f64>::zeroed(2, 2, 1, ModelConfig::default()).unwrap();
        let offsets = NormalizedDualOffsets::zeros(1);
        let cfg = WalkConfig { max_steps: 25, ..quiet() };
        let out = gradient_walk(&model, &offsets, &[0.5; 4], 1.0, 0.01, &cfg, 0).unwrap();
        assert_eq!(out, WalkOutcome::Exhausted { last_value: 0.0 });
    }

    #[test]
    fn outputs_stay_in_the_box() {
        let field = Linear(vec![3.0, -3.0, 1.0]);
        let cfg = WalkConfig { step_size: 0.5, max_steps: 50, noise_scale: 0.1, ..WalkConfig::default() };
        for (s, target) in [(0u64, 5.0), (1, -5.0), (2, 0.7)] {
            if let WalkOutcome::Reached { image, .. } = walk_field(&field, &[0.5, 0.5, 0.5], target, 0.05, &cfg, s).unwrap() {
                assert!(image.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn path_dual_field_matches_path_dual_value() {
        let model = DualFunctionModel::<f64>::new(3, 3, 3, ModelConfig { seed: 4, ..ModelConfig::default() }).unwrap();
        let offsets = NormalizedDualOffsets { eta: vec![0.1, -0.2, 0.3] };
        let image: Vec<f64> = (0..9).map(|i| i as f64 / 9.0).collect();
        let (v, g) = PathDual { model: &model, offsets: &offsets }.value_and_grad(&image).unwrap();
        assert_eq!(v, crate::divergence::path_dual_value(&model, &image, &offsets).unwrap());
        let h = 1e-5;
        for p in 0..9 {
            let mut a = image.clone();
            let mut b = image.clone();
            a[p] += h;
            b[p] -= h;
            let fa = crate::divergence::path_dual_value(&model, &a, &offsets).unwrap();
            let fb = crate::divergence::path_dual_value(&model, &b, &offsets).unwrap();
            assert!(((fa - fb) / (2.0 * h) - g[p]).abs() < 1e-7);
        }
    }

    #[test]
    fn targets_sit_strictly_inside_gaps() {
        let model = DualFunctionModel::<f64>::new(2, 2, 2, ModelConfig { seed: 1, ..ModelConfig::default() }).unwrap();
        let offsets = NormalizedDualOffsets::zeros(2);
        let x = crate::data::synth_two_clusters::<f64>(40, 2, 2, 0.6, 3).unwrap().images;
        let cfg = WalkConfig { targets_per_gap: 3, ..quiet() };
        let p = plan(&model, &offsets, &x, 4, 2, &cfg).unwrap();
        for a in 0..6 {
            let at = p.attempt(a);
            let j = p.cuts[a % 2];
            let (l, r) = (p.profile.sorted_values[j - 1], p.profile.sorted_values[j]);
            assert!(at.target > l && at.target < r);
        }
        let single = WalkConfig { targets_per_gap: 1, ..quiet() };
        let p = plan(&model, &offsets, &x, 4, 1, &single).unwrap();
        let j = p.cuts[0];
        let mid = (p.profile.sorted_values[j - 1] + p.profile.sorted_values[j]) / 2.0;
        assert!((p.attempt(0).target - mid).abs() < 1e-15);
    }

    #[test]
    fn retained_samples_respect_range_and_tolerance() {
        let model = DualFunctionModel::<f64>::new(2, 2, 2, ModelConfig { seed: 7, ..ModelConfig::default() }).unwrap();
        let offsets = NormalizedDualOffsets::zeros(2);
        let x = crate::data::synth_two_clusters::<f64>(40, 2, 2, 0.6, 3).unwrap().images;
        let values = path_dual_values(&model, &x, &offsets).unwrap();
        let (lo, hi) = values.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let cfg = WalkConfig::default();
        let out = sample_via_gradient_walk(&model, &offsets, &x, 4, 2, &cfg).unwrap();
        assert_eq!(out.attempts, 16);
        assert_eq!(out.attempts, out.images.len() + out.walk_failures + out.ood_rejections);
        let tol = 0.02 * (hi - lo);
        for ((im, &v), &t) in out.images.iter().zip(&out.dual_values).zip(&out.targets) {
            assert!(v >= lo && v <= hi);
            assert!((v - t).abs() <= tol);
            assert!(im.iter().all(|p| (0.0..=1.0).contains(p)));
            let again = crate::divergence::path_dual_value(&model, im, &offsets).unwrap();
            assert_eq!(again, v);
        }
        let again = sample_via_gradient_walk(&model, &offsets, &x, 4, 2, &cfg).unwrap();
        assert_eq!(again.images, out.images);
    }

    #[test]
    fn generate_meets_count_or_budget() {
        let model = DualFunctionModel::<f64>::new(2, 2, 2, ModelConfig { seed: 7, ..ModelConfig::default() }).unwrap();
        let offsets = NormalizedDualOffsets::zeros(2);
        let x = crate::data::synth_two_clusters::<f64>(40, 2, 2, 0.6, 3).unwrap().images;
        let cfg = WalkConfig::default();
        assert!(generate_samples(&model, &offsets, &x, 4, 2, 0, &cfg).unwrap().images.is_empty());
        let out = generate_samples(&model, &offsets, &x, 4, 2, 50, &cfg).unwrap();
        assert!(out.images.len() == 50 || out.attempts == 200);
        assert!(out.attempts <= 200);
        let zero = DualFunctionModel::<f64>::zeroed(2, 2, 2, ModelConfig::default()).unwrap();
        let constant = generate_samples(&zero, &offsets, &x, 4, 2, 5, &cfg).unwrap();
        // a constant dual makes every target equal to the start value
        assert_eq!(constant.images.len(), 5);
    }
}
