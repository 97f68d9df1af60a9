//! Evaluation metrics for generated samples and estimator diagnostics.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::Read;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::clustering::build_profile;
use crate::data::synth_gaussian_ar1;
use crate::diffusion::{build_path, sample_marginals, DiffusionSchedule};
use crate::divergence::{
    dv_estimate, dv_gradient, log_sum_exp, path_divergence, path_dual_values, Direction, NormalizedDualOffsets,
};
use crate::error::{arg, Error, Result};
use crate::image::{ImageSet, SetTag};
use crate::model::{DualFunctionModel, ModelConfig, ModelInput, OptimConfig};
use crate::scalar::Scalar;
use crate::trainer::{derive_seed, pixel_standardization, train, TrainConfig};

/// `D(X_g || X)` on dual coordinates.
pub fn divergence_gen_vs_data<T: Scalar>(
    model: &DualFunctionModel<T>,
    offsets: &NormalizedDualOffsets<T>,
    x: &ImageSet<T>,
    xg: &ImageSet<T>,
) -> Result<T> {
    if x.is_empty() || xg.is_empty() {
        return arg("both sample sets must be non-empty");
    }
    dv_estimate(&path_dual_values(model, xg, offsets)?, &path_dual_values(model, x, offsets)?)
}

/// Auxiliary training for [`entropy_proxy`].
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyConfig<T> {
    pub iters: usize,
    pub learning_rate: T,
    pub clip_norm: T,
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
}

impl<T: Scalar> Default for EntropyConfig<T> {
    fn default() -> Self {
        Self { iters: 300, learning_rate: T::lit(1e-2), clip_norm: T::one(), hidden_dims: vec![128, 64], seed: 0 }
    }
}

fn uniform_set<T: Scalar>(n: usize, rows: usize, cols: usize, seed: u64) -> ImageSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..n * rows * cols).map(|_| T::lit(rng.random_range(0.0..1.0))).collect();
    ImageSet::from_parts_unchecked(rows, cols, px, SetTag::Generated)
}

fn lex_cmp<T: Scalar>(a: &[T], b: &[T]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// `-D(U || X_g)` for uniform noise `U`, estimated by a fresh single-step
/// dual network. Images are put in a canonical order first and split
/// alternately into a training half and an evaluation half, each paired with
/// its own uniform sample of the same size. `0` means uniform.
pub fn entropy_proxy<T: Scalar>(xg: &ImageSet<T>, cfg: &EntropyConfig<T>) -> Result<T> {
    if xg.len() < 2 {
        return arg(format!("entropy proxy needs at least 2 samples, got {}", xg.len()));
    }
    let mut order: Vec<usize> = (0..xg.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(xg.image(a), xg.image(b)).then(a.cmp(&b)));
    let fit_idx: Vec<usize> = order.iter().step_by(2).copied().collect();
    let eval_idx: Vec<usize> = order.iter().skip(1).step_by(2).copied().collect();
    let (fit, eval) = (xg.select(&fit_idx), xg.select(&eval_idx));
    let (rows, cols) = (xg.rows(), xg.cols());
    let u_fit = uniform_set::<T>(fit.len(), rows, cols, derive_seed(cfg.seed, 11, 0));
    let u_eval = uniform_set::<T>(eval.len(), rows, cols, derive_seed(cfg.seed, 11, 1));
    let mcfg = ModelConfig {
        hidden_dims: cfg.hidden_dims.clone(),
        step_conditioned: false,
        seed: derive_seed(cfg.seed, 12, 0),
        ..ModelConfig::default()
    };
    let mut model = DualFunctionModel::new(rows, cols, 1, mcfg)?;
    let mut both = u_fit.clone();
    both.extend(&fit)?;
    let (shift, scale) = pixel_standardization(&both);
    model.set_input_affine(shift, scale)?;
    let opt = OptimConfig { learning_rate: cfg.learning_rate, clip_norm: cfg.clip_norm, ema_decay: T::zero() };
    let m = u_fit.len();
    let inputs: Vec<ModelInput<'_, T>> =
        u_fit.iter().chain(fit.iter()).map(|im| ModelInput::new(im, None)).collect();
    for _ in 0..cfg.iters {
        model.step(
            &inputs,
            |out| {
                let (num, den) = out.split_at(m);
                let g = dv_gradient(num, den)?;
                let douts = g.d_num.iter().chain(&g.d_den).map(|&d| -d).collect();
                Ok((-g.value, douts))
            },
            &opt,
        )?;
    }
    let d = dv_estimate(&model.forward(&u_eval, None)?, &model.forward(&eval, None)?)?;
    if !d.is_finite() {
        return Err(Error::Numerical(format!("entropy divergence is {d}")));
    }
    Ok(-d)
}

/// Multi-information estimate `D(S || Z)` along the diffusion path of `s`.
pub fn mmi<T: Scalar>(
    model: &DualFunctionModel<T>,
    s: &ImageSet<T>,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<T> {
    let z = sample_marginals(s, seed)?;
    let path = build_path(s, &z, schedule)?;
    Ok(path_divergence(model, &path, Direction::TowardData)?.value)
}

fn profile_statistic<T: Scalar>(values: &[T], knn_k: usize) -> Result<T> {
    let profile = build_profile(values, knn_k)?;
    Ok(log_sum_exp(&profile.d_knn)? - T::from_usize_lossy(profile.d_knn.len()).ln())
}

/// Ratio of `logsumexp(d_knn) - log(len)` on the dual profile of `X u X_g`
/// to the same statistic on `X` alone. Lower means the generated samples
/// fill gaps between clusters.
pub fn cluster_novelty<T: Scalar>(
    model: &DualFunctionModel<T>,
    offsets: &NormalizedDualOffsets<T>,
    x: &ImageSet<T>,
    xg: &ImageSet<T>,
    knn_k: usize,
) -> Result<T> {
    let real = path_dual_values(model, x, offsets)?;
    let mut union = real.clone();
    union.extend(path_dual_values(model, xg, offsets)?);
    if union.len() < 2 * knn_k {
        return arg(format!("{} samples cannot form a profile with knn_k = {knn_k}", union.len()));
    }
    let base = profile_statistic(&real, knn_k)?;
    if base == T::zero() {
        return Err(Error::Numerical("cluster statistic of the real samples is zero".into()));
    }
    Ok(profile_statistic(&union, knn_k)? / base)
}

/// Fréchet distance between Gaussians fitted to two embedding sets (rows are
/// samples).
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return arg("each embedding set needs at least 2 samples");
    }
    let h = a[0].len();
    if h == 0 || a.iter().chain(b).any(|r| r.len() != h) {
        return Err(Error::Shape("embedding rows differ in width".into()));
    }
    let fit = |rows: &[Vec<f64>]| {
        let n = rows.len();
        let m = DMatrix::from_fn(n, h, |i, j| rows[i][j]);
        let mean: DVector<f64> = m.row_mean().transpose();
        let centered = DMatrix::from_fn(n, h, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        (mean, cov)
    };
    let (mu1, s1) = fit(a);
    let (mu2, s2) = fit(b);
    let sqrt_psd = |m: DMatrix<f64>| -> Result<DMatrix<f64>> {
        let sym = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let scale = eig.eigenvalues.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        let mut roots = eig.eigenvalues.clone();
        for v in roots.iter_mut() {
            if *v < -1e-8 * scale {
                return Err(Error::Numerical(format!("matrix is not positive semi-definite (eigenvalue {v})")));
            }
            *v = v.max(0.0).sqrt();
        }
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
    };
    let root2 = sqrt_psd(s2.clone())?;
    let inner = &root2 * &s1 * &root2;
    let cross = sqrt_psd(inner)?.trace();
    let diff = mu1 - mu2;
    Ok(diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * cross)
}

fn embed<T: Scalar>(model: &DualFunctionModel<T>, set: &ImageSet<T>) -> Result<Vec<Vec<f64>>> {
    let step = model.step_conditioned().then_some(0);
    set.iter()
        .map(|im| Ok(model.penultimate(im, step)?.iter().map(|v| v.as_f64()).collect()))
        .collect()
}

/// Fréchet distance between penultimate-layer embeddings of the EMA model at
/// path step 0.
pub fn fid_dual<T: Scalar>(model: &DualFunctionModel<T>, x: &ImageSet<T>, xg: &ImageSet<T>) -> Result<f64> {
    if model.penultimate_width() < 2 {
        return arg("fid needs a penultimate layer of width at least 2");
    }
    let ema = model.ema_model();
    frechet_distance(&embed(&ema, x)?, &embed(&ema, xg)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    /// Largest dual-space distance from a generated sample to its nearest real one.
    pub d_knn_max: f64,
    pub divergence: f64,
    /// `d_knn_max + ln n - divergence`.
    pub margin: f64,
}

/// Checks `D(X_g || X) <= d_knn_max + ln n`.
pub fn bound_check<T: Scalar>(
    model: &DualFunctionModel<T>,
    offsets: &NormalizedDualOffsets<T>,
    x: &ImageSet<T>,
    xg: &ImageSet<T>,
) -> Result<BoundCheck> {
    if x.is_empty() || xg.is_empty() {
        return arg("both sample sets must be non-empty");
    }
    let real = path_dual_values(model, x, offsets)?;
    let gen = path_dual_values(model, xg, offsets)?;
    bound_from_values(&real, &gen)
}

/// [`bound_check`] on precomputed dual values.
pub fn bound_from_values<T: Scalar>(real: &[T], gen: &[T]) -> Result<BoundCheck> {
    let divergence = dv_estimate(gen, real)?.as_f64();
    let mut sorted: Vec<f64> = real.iter().map(|v| v.as_f64()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let nearest = |g: f64| {
        let i = sorted.partition_point(|&v| v < g);
        let mut d = f64::INFINITY;
        if i < sorted.len() {
            d = d.min((sorted[i] - g).abs());
        }
        if i > 0 {
            d = d.min((g - sorted[i - 1]).abs());
        }
        d
    };
    let d_knn_max = gen.iter().map(|g| nearest(g.as_f64())).fold(0.0, f64::max);
    let margin = d_knn_max + (real.len() as f64).ln() - divergence;
    let slack = 1e-9 * (1.0 + divergence.abs() + d_knn_max);
    if margin < -slack {
        return Err(Error::Numerical(format!("bound violated: margin {margin}")));
    }
    Ok(BoundCheck { d_knn_max, divergence, margin })
}

/// Synthetic distributions with known generators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistributionSpec {
    GaussianAr1 { rows: usize, cols: usize, rho: f64 },
}

impl DistributionSpec {
    fn draw<T: Scalar>(&self, n: usize, seed: u64) -> Result<ImageSet<T>> {
        match *self {
            DistributionSpec::GaussianAr1 { rows, cols, rho } => Ok(synth_gaussian_ar1(n, rows, cols, rho, seed)?.images),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceResult {
    pub direct: Vec<f64>,
    pub path: Vec<f64>,
    pub var_direct: f64,
    pub var_path: f64,
    /// Bootstrap 95% percentile intervals of the two variances.
    pub ci_direct: (f64, f64),
    pub ci_path: (f64, f64),
    /// Trials dropped because training failed.
    pub dropped: usize,
}

impl VarianceResult {
    pub fn intervals_overlap(&self) -> bool {
        self.ci_direct.0 <= self.ci_path.1 && self.ci_path.0 <= self.ci_direct.1
    }
}

pub fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Percentile bootstrap interval of the sample variance.
pub fn bootstrap_variance_ci(v: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vars: Vec<f64> = (0..resamples)
        .map(|_| {
            let draw: Vec<f64> = (0..v.len()).map(|_| v[rng.random_range(0..v.len())]).collect();
            sample_variance(&draw)
        })
        .collect();
    vars.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let at = |q: f64| vars[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(0.025), at(0.975))
}

/// Trains the direct (one step) and path (`k` steps) estimators on `trials`
/// independent draws with the same training budget and compares the
/// variance of their multi-information estimates.
pub fn variance_experiment(
    spec: DistributionSpec,
    n: usize,
    trials: usize,
    k: usize,
    base: &TrainConfig<f64>,
    seed: u64,
) -> Result<VarianceResult> {
    if trials < 10 {
        return arg(format!("variance experiment needs at least 10 trials, got {trials}"));
    }
    let runs: Vec<Option<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let run = || -> Result<(f64, f64)> {
                let x = spec.draw::<f64>(n, derive_seed(seed, 21, t as u64))?;
                let one = |steps: usize| -> Result<f64> {
                    let cfg = TrainConfig { path_steps: steps, seed: derive_seed(seed, 22, t as u64), ..base.clone() };
                    let res = train(&x, &cfg)?;
                    let schedule = crate::diffusion::default_schedule(x.cols(), steps)?;
                    mmi(&res.model, &x, &schedule, derive_seed(seed, 23, t as u64))
                };
                Ok((one(1)?, one(k)?))
            };
            match run() {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("variance trial {t} dropped: {e}");
                    None
                }
            }
        })
        .collect();
    let ok: Vec<(f64, f64)> = runs.iter().flatten().copied().collect();
    let dropped = trials - ok.len();
    if ok.len() < 2 {
        return Err(Error::Training { iteration: 0, detail: format!("{dropped} of {trials} trials failed") });
    }
    let (direct, path): (Vec<f64>, Vec<f64>) = ok.into_iter().unzip();
    Ok(VarianceResult {
        var_direct: sample_variance(&direct),
        var_path: sample_variance(&path),
        ci_direct: bootstrap_variance_ci(&direct, 2000, derive_seed(seed, 24, 0)),
        ci_path: bootstrap_variance_ci(&path, 2000, derive_seed(seed, 24, 1)),
        direct,
        path,
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub div_gen_vs_data: f64,
    pub entropy_proxy: f64,
    pub mmi_real: f64,
    pub mmi_gen: f64,
    pub cluster_novelty: f64,
    pub fid_dual: f64,
    pub theorem2_margin: f64,
    pub walk_failure_count: u64,
}

const METRIC_NAMES: [&str; 8] = [
    "div_gen_vs_data",
    "entropy_proxy",
    "mmi_real",
    "mmi_gen",
    "cluster_novelty",
    "fid_dual",
    "theorem2_margin",
    "walk_failure_count",
];

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let values = [
            self.div_gen_vs_data.to_string(),
            self.entropy_proxy.to_string(),
            self.mmi_real.to_string(),
            self.mmi_gen.to_string(),
            self.cluster_novelty.to_string(),
            self.fid_dual.to_string(),
            self.theorem2_margin.to_string(),
            self.walk_failure_count.to_string(),
        ];
        let mut out = String::from("metric,value\n");
        for (name, v) in METRIC_NAMES.iter().zip(values) {
            let _ = writeln!(out, "{name},{v}");
        }
        out
    }

    pub fn from_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let mut values = Vec::with_capacity(8);
        for (i, rec) in reader.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| Error::Csv { row, column: 1, detail: e.to_string() })?;
            let want = METRIC_NAMES.get(i).ok_or_else(|| Error::Csv { row, column: 1, detail: "extra row".into() })?;
            if rec.get(0) != Some(*want) {
                return Err(Error::Csv { row, column: 1, detail: format!("expected metric `{want}`") });
            }
            let cell = rec.get(1).unwrap_or("");
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Csv { row, column: 2, detail: format!("`{cell}` is not a number") })?;
            values.push(v);
        }
        if values.len() != METRIC_NAMES.len() {
            return Err(Error::Csv { row: values.len() + 2, column: 1, detail: "missing metric rows".into() });
        }
        Ok(Self {
            div_gen_vs_data: values[0],
            entropy_proxy: values[1],
            mmi_real: values[2],
            mmi_gen: values[3],
            cluster_novelty: values[4],
            fid_dual: values[5],
            theorem2_margin: values[6],
            walk_failure_count: values[7] as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig<T> {
    pub knn_k: usize,
    pub seed: u64,
    pub entropy: EntropyConfig<T>,
    pub walk_failure_count: u64,
}

impl<T: Scalar> Default for EvalConfig<T> {
    fn default() -> Self {
        Self { knn_k: 8, seed: 0, entropy: EntropyConfig::default(), walk_failure_count: 0 }
    }
}

/// Every metric for one model, real set and generated set.
pub fn evaluate<T: Scalar>(
    model: &DualFunctionModel<T>,
    offsets: &NormalizedDualOffsets<T>,
    x: &ImageSet<T>,
    xg: &ImageSet<T>,
    cfg: &EvalConfig<T>,
) -> Result<MetricsReport> {
    let schedule = crate::diffusion::default_schedule(x.cols(), model.path_steps())?;
    let t2 = bound_check(model, offsets, x, xg)?;
    Ok(MetricsReport {
        div_gen_vs_data: divergence_gen_vs_data(model, offsets, x, xg)?.as_f64(),
        entropy_proxy: entropy_proxy(xg, &EntropyConfig { seed: cfg.seed, ..cfg.entropy.clone() })?.as_f64(),
        mmi_real: mmi(model, x, &schedule, derive_seed(cfg.seed, 31, 0))?.as_f64(),
        mmi_gen: mmi(model, xg, &schedule, derive_seed(cfg.seed, 31, 1))?.as_f64(),
        cluster_novelty: cluster_novelty(model, offsets, x, xg, cfg.knn_k)?.as_f64(),
        fid_dual: fid_dual(model, x, xg)?,
        theorem2_margin: t2.margin,
        walk_failure_count: cfg.walk_failure_count,
    })
}
