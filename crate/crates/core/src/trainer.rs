//! Training loop: path divergence ascent, clustering loss descent and, after
//! warm-up, divergence ascent between generated and real samples. Each
//! iteration applies the three losses as three sequential parameter steps.

use std::fmt::Write as _;
use std::io::Read;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::{build_profile, clustering_loss_gradient};
use crate::diffusion::{build_path, default_schedule, sample_marginals};
use crate::divergence::{
    all_step_inputs, dv_gradient, fold_steps, log_mean_exp, normalize_dual, path_divergence, Direction,
    NormalizedDualOffsets,
};
use crate::error::{arg, Error, Result};
use crate::image::ImageSet;
use crate::model::{Activation, DualFunctionModel, ModelConfig, ModelInput, OptimConfig};
use crate::sampler::{generate_samples, sample_via_gradient_walk, SampleOutcome, Tolerance, WalkConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub iters: usize,
    pub warmup: usize,
    pub learning_rate: T,
    pub batch_size: usize,
    pub path_steps: usize,
    pub knn_k: usize,
    pub cut_count: usize,
    pub ema_decay: T,
    pub clip_norm: T,
    pub marginal_refresh: usize,
    pub walk: WalkConfig<T>,
    /// Targets per gap for the per-iteration generated batch.
    pub train_targets_per_gap: usize,
    pub lambda_div: T,
    pub lambda_cluster: T,
    pub lambda_gen: T,
    pub seed: u64,
    /// `0` disables early stopping.
    pub early_stop_patience: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub step_conditioned: bool,
    pub init_scale: T,
    /// Fit the model's input affine map to the pixel mean and spread of `X`.
    pub standardize_inputs: bool,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            iters: 2000,
            warmup: 500,
            learning_rate: T::lit(1e-3),
            batch_size: 256,
            path_steps: 4,
            knn_k: 8,
            cut_count: 4,
            ema_decay: T::lit(0.999),
            clip_norm: T::one(),
            marginal_refresh: 100,
            walk: WalkConfig::default(),
            train_targets_per_gap: 2,
            lambda_div: T::one(),
            lambda_cluster: T::one(),
            lambda_gen: T::one(),
            seed: 0,
            early_stop_patience: 300,
            hidden_dims: vec![128, 64],
            activation: Activation::Tanh,
            step_conditioned: true,
            init_scale: T::one(),
            standardize_inputs: true,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn model_config(&self) -> ModelConfig<T> {
        ModelConfig {
            hidden_dims: self.hidden_dims.clone(),
            activation: self.activation,
            step_conditioned: self.step_conditioned,
            init_scale: self.init_scale,
            seed: self.seed,
        }
    }

    pub fn optim(&self) -> OptimConfig<T> {
        OptimConfig { learning_rate: self.learning_rate, clip_norm: self.clip_norm, ema_decay: self.ema_decay }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup > self.iters {
            return arg(format!("warmup {} exceeds iters {}", self.warmup, self.iters));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
            ("lambda_div", self.lambda_div),
            ("lambda_cluster", self.lambda_cluster),
            ("lambda_gen", self.lambda_gen),
        ] {
            if !(v >= T::zero()) || !v.is_finite() {
                return arg(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.ema_decay >= T::zero() && self.ema_decay < T::one()) {
            return arg(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if self.batch_size < 2 {
            return arg("batch_size must be at least 2");
        }
        if self.path_steps == 0 {
            return arg("path_steps must be at least 1");
        }
        if self.knn_k < 2 {
            return arg("knn_k must be at least 2");
        }
        if self.cut_count == 0 {
            return arg("cut_count must be at least 1");
        }
        if self.marginal_refresh == 0 {
            return arg("marginal_refresh must be at least 1");
        }
        if self.train_targets_per_gap == 0 {
            return arg("train_targets_per_gap must be at least 1");
        }
        self.walk.validate()?;
        self.model_config().validate()
    }

    /// Applies `key = value` lines; `#` starts a comment. Keys are the field
    /// names, walk settings prefixed with `walk.`; `walk.tol` is a fraction of
    /// the real samples' dual range.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config { line: i + 1, detail: format!("expected `key = value`, got `{line}`") })?;
            self.set(key.trim(), value.trim()).map_err(|detail| Error::Config { line: i + 1, detail })?;
        }
        Ok(())
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn int(v: &str) -> std::result::Result<usize, String> {
            v.parse().map_err(|_| format!("`{v}` is not a non-negative integer"))
        }
        fn real<T: Scalar>(v: &str) -> std::result::Result<T, String> {
            match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(T::lit(x)),
                _ => Err(format!("`{v}` is not a finite number")),
            }
        }
        match key {
            "iters" => self.iters = int(value)?,
            "warmup" => self.warmup = int(value)?,
            "learning_rate" => self.learning_rate = real(value)?,
            "batch_size" => self.batch_size = int(value)?,
            "path_steps" => self.path_steps = int(value)?,
            "knn_k" => self.knn_k = int(value)?,
            "cut_count" => self.cut_count = int(value)?,
            "ema_decay" => self.ema_decay = real(value)?,
            "clip_norm" => self.clip_norm = real(value)?,
            "marginal_refresh" => self.marginal_refresh = int(value)?,
            "train_targets_per_gap" => self.train_targets_per_gap = int(value)?,
            "lambda_div" => self.lambda_div = real(value)?,
            "lambda_cluster" => self.lambda_cluster = real(value)?,
            "lambda_gen" => self.lambda_gen = real(value)?,
            "seed" => self.seed = value.parse().map_err(|_| format!("`{value}` is not a 64-bit seed"))?,
            "early_stop_patience" => self.early_stop_patience = int(value)?,
            "hidden_dims" => {
                self.hidden_dims = value
                    .split(',')
                    .map(|d| int(d.trim()))
                    .collect::<std::result::Result<_, _>>()?;
            }
            "activation" => {
                self.activation = Activation::parse(value).ok_or_else(|| format!("unknown activation `{value}`"))?;
            }
            "step_conditioned" => {
                self.step_conditioned = value.parse().map_err(|_| format!("`{value}` is not true or false"))?;
            }
            "init_scale" => self.init_scale = real(value)?,
            "standardize_inputs" => {
                self.standardize_inputs = value.parse().map_err(|_| format!("`{value}` is not true or false"))?;
            }
            "walk.targets_per_gap" => self.walk.targets_per_gap = int(value)?,
            "walk.step_size" => self.walk.step_size = real(value)?,
            "walk.max_steps" => self.walk.max_steps = int(value)?,
            "walk.tol" => self.walk.tol = Tolerance::RangeFraction(real(value)?),
            "walk.noise_scale" => self.walk.noise_scale = real(value)?,
            "walk.seed" => self.walk.seed = value.parse().map_err(|_| format!("`{value}` is not a 64-bit seed"))?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }
}

/// One completed iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Path divergence `D(Z || X)` on the training batch before the update.
    pub d_path: f64,
    pub cluster_loss: f64,
    /// `D(X_g || X)`; absent before warm-up or when no sample was retained.
    pub d_gen: Option<f64>,
    /// Gradient norm of the divergence step, before clipping.
    pub grad_norm: f64,
    pub walk_success_rate: Option<f64>,
    /// Held-out path divergence of the EMA model.
    pub heldout_d_path: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

pub const TRACE_CSV_HEADER: &str = "iteration,d_path,cluster_loss,d_gen,grad_norm,walk_success_rate,heldout_d_path";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iteration,
                r.d_path,
                r.cluster_loss,
                opt_cell(r.d_gen),
                r.grad_norm,
                opt_cell(r.walk_success_rate),
                opt_cell(r.heldout_d_path)
            );
        }
        out
    }

    pub fn from_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = reader.headers().map_err(|e| Error::Csv { row: 1, column: 1, detail: e.to_string() })?;
        if header.iter().collect::<Vec<_>>().join(",") != TRACE_CSV_HEADER {
            return Err(Error::Csv { row: 1, column: 1, detail: format!("expected header `{TRACE_CSV_HEADER}`") });
        }
        let mut records = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| Error::Csv { row, column: 1, detail: e.to_string() })?;
            let cell = |c: usize| -> Result<Option<f64>> {
                let s = rec.get(c).unwrap_or("");
                if s.is_empty() {
                    return Ok(None);
                }
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|_| Error::Csv { row, column: c + 1, detail: format!("`{s}` is not a number") })
            };
            let need = |c: usize| -> Result<f64> {
                cell(c)?.ok_or_else(|| Error::Csv { row, column: c + 1, detail: "missing value".into() })
            };
            let iteration = rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Csv { row, column: 1, detail: "bad iteration".into() })?;
            records.push(TraceRecord {
                iteration,
                d_path: need(1)?,
                cluster_loss: need(2)?,
                d_gen: cell(3)?,
                grad_norm: need(4)?,
                walk_success_rate: cell(5)?,
                heldout_d_path: cell(6)?,
            });
        }
        Ok(Self { records })
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult<T> {
    /// The EMA model (raw and shadow parameters both set to the EMA weights).
    pub model: DualFunctionModel<T>,
    pub offsets: NormalizedDualOffsets<T>,
    pub trace: TrainTrace,
    /// Iteration whose EMA snapshot was kept, when early stopping was active.
    pub best_iteration: Option<usize>,
    pub stopped_early: bool,
}

/// SplitMix64 finalizer for deriving independent sub-seeds.
pub(crate) fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_SPLIT: u64 = 1;
const TAG_MARGINAL: u64 = 2;
const TAG_BATCH: u64 = 3;
const TAG_HELDOUT: u64 = 4;
const TAG_WALK: u64 = 5;
const TAG_OFFSETS: u64 = 6;

/// Offsets `eta_j = logmeanexp f(Z^j, j)` over a path.
pub fn path_offsets<T: Scalar>(model: &DualFunctionModel<T>, path: &[ImageSet<T>]) -> Result<NormalizedDualOffsets<T>> {
    let k = model.path_steps();
    if path.len() != k + 1 {
        return arg(format!("path has {} sets for {k} steps", path.len()));
    }
    let values = (0..k).map(|j| model.forward(&path[j], Some(j))).collect::<Result<Vec<_>>>()?;
    normalize_dual(&values)
}

/// Offsets for `model` on `x` using a fresh marginal sample drawn with `seed`.
pub fn offsets_for<T: Scalar>(model: &DualFunctionModel<T>, x: &ImageSet<T>, seed: u64) -> Result<NormalizedDualOffsets<T>> {
    let z = sample_marginals(x, seed)?;
    let path = build_path(x, &z, &default_schedule(x.cols(), model.path_steps())?)?;
    path_offsets(model, &path)
}

/// Mean and inverse standard deviation over every pixel of `x`; a constant
/// set keeps unit scale.
pub fn pixel_standardization<T: Scalar>(x: &ImageSet<T>) -> (T, T) {
    let n = T::from_usize_lossy(x.pixels().len().max(1));
    let mean = x.pixels().iter().fold(T::zero(), |a, &p| a + p) / n;
    let var = x.pixels().iter().fold(T::zero(), |a, &p| a + (p - mean) * (p - mean)) / n;
    let scale = if var > T::zero() { T::one() / var.sqrt() } else { T::one() };
    (mean, scale)
}

fn split<T: Scalar>(x: &ImageSet<T>, seed: u64, patience: usize) -> (ImageSet<T>, Option<ImageSet<T>>) {
    let held = x.len() / 10;
    if patience == 0 || held < 2 {
        return (x.clone(), None);
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_SPLIT, 0)));
    let (h, t) = order.split_at(held);
    let (mut h, mut t) = (h.to_vec(), t.to_vec());
    h.sort_unstable();
    t.sort_unstable();
    (x.select(&t), Some(x.select(&h)))
}

fn path_for<T: Scalar>(x: &ImageSet<T>, k: usize, seed: u64) -> Result<Vec<ImageSet<T>>> {
    let z = sample_marginals(x, seed)?;
    build_path(x, &z, &default_schedule(x.cols(), k)?)
}

struct Batch<T> {
    path: Vec<ImageSet<T>>,
}

/// Trains a dual function on `x`.
pub fn train<T: Scalar>(x: &ImageSet<T>, cfg: &TrainConfig<T>) -> Result<TrainResult<T>> {
    cfg.validate()?;
    let k = cfg.path_steps;
    let mut model = DualFunctionModel::new(x.rows(), x.cols(), k, cfg.model_config())?;
    if cfg.standardize_inputs {
        let (shift, scale) = pixel_standardization(x);
        model.set_input_affine(shift, scale)?;
    }
    if cfg.iters == 0 {
        let offsets = offsets_for(&model, x, derive_seed(cfg.seed, TAG_OFFSETS, 0))?;
        return Ok(TrainResult { model, offsets, trace: TrainTrace::default(), best_iteration: None, stopped_early: false });
    }
    let (train_x, heldout) = split(x, cfg.seed, cfg.early_stop_patience);
    let batch_size = cfg.batch_size.min(train_x.len());
    if batch_size < 2 * cfg.knn_k {
        return arg(format!(
            "effective batch of {batch_size} images is smaller than 2 * knn_k = {}",
            2 * cfg.knn_k
        ));
    }
    if k > x.cols() {
        return arg(format!("cannot split {} columns into {k} path steps", x.cols()));
    }
    let heldout_path = match &heldout {
        Some(h) => Some(path_for(h, k, derive_seed(cfg.seed, TAG_HELDOUT, 0))?),
        None => None,
    };
    let opt = cfg.optim();
    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, usize, Vec<T>)> = None;
    let mut stopped_early = false;
    let mut full_path = Vec::new();
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut cursor = order.len();
    let mut shuffler = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_BATCH, 0));
    for iter in 0..cfg.iters {
        let fail = |e: Error| match e {
            Error::Training { detail, .. } => Error::Training { iteration: iter, detail },
            other => other,
        };
        if iter % cfg.marginal_refresh == 0 {
            full_path = path_for(&train_x, k, derive_seed(cfg.seed, TAG_MARGINAL, (iter / cfg.marginal_refresh) as u64))?;
        }
        if cursor + batch_size > order.len() {
            order.shuffle(&mut shuffler);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch_size];
        cursor += batch_size;
        let batch = Batch { path: full_path.iter().map(|s| s.select(idx)).collect() };

        let (d_path, grad_norm) = divergence_step(&mut model, &batch, cfg, &opt).map_err(fail)?;
        let cluster_loss = cluster_step(&mut model, &batch, cfg, &opt).map_err(fail)?;
        let (d_gen, walk_success_rate) = if iter >= cfg.warmup && cfg.lambda_gen > T::zero() {
            gen_step(&mut model, &batch, cfg, &opt, iter).map_err(fail)?
        } else {
            (None, None)
        };

        let heldout_d_path = match &heldout_path {
            Some(p) => Some(path_divergence(&model.ema_model(), p, Direction::TowardMarginal)?.value.as_f64()),
            None => None,
        };
        let record = TraceRecord { iteration: iter, d_path, cluster_loss, d_gen, grad_norm, walk_success_rate, heldout_d_path };
        if [Some(d_path), Some(cluster_loss), d_gen, Some(grad_norm), heldout_d_path]
            .iter()
            .flatten()
            .any(|v| !v.is_finite())
        {
            trace.records.push(record);
            return Err(Error::Training { iteration: iter, detail: "non-finite value in trace".into() });
        }
        trace.records.push(record);
        if let Some(h) = heldout_d_path {
            match &best {
                Some((b, at, _)) if h <= *b => {
                    if iter - at >= cfg.early_stop_patience {
                        stopped_early = true;
                        break;
                    }
                }
                _ => best = Some((h, iter, model.ema_params().to_vec())),
            }
        }
    }
    let mut final_model = model.ema_model();
    let best_iteration = best.as_ref().map(|b| b.1);
    if let Some((_, _, ema)) = best {
        final_model.set_params(&ema, &ema)?;
    } else {
        let ema = final_model.params().to_vec();
        final_model.set_params(&ema, &ema)?;
    }
    let offsets = offsets_for(&final_model, x, derive_seed(cfg.seed, TAG_OFFSETS, 0))?;
    Ok(TrainResult { model: final_model, offsets, trace, best_iteration, stopped_early })
}

/// Ascent on the path divergence `D(Z || X)`.
fn divergence_step<T: Scalar>(
    model: &mut DualFunctionModel<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig<T>,
    opt: &OptimConfig<T>,
) -> Result<(f64, f64)> {
    let k = cfg.path_steps;
    let b = batch.path[0].len();
    // per step: numerator Z^{j+1} then denominator Z^j, both at step j
    let mut inputs: Vec<ModelInput<'_, T>> = Vec::with_capacity(2 * k * b);
    for j in 0..k {
        inputs.extend(batch.path[j + 1].iter().map(|im| ModelInput::new(im, Some(j))));
        inputs.extend(batch.path[j].iter().map(|im| ModelInput::new(im, Some(j))));
    }
    let lambda = cfg.lambda_div;
    let mut value = T::zero();
    let report = model.step(
        &inputs,
        |out| {
            let mut douts = Vec::with_capacity(out.len());
            let mut total = T::zero();
            for chunk in out.chunks_exact(2 * b) {
                let (num, den) = chunk.split_at(b);
                let g = dv_gradient(num, den)?;
                total += g.value;
                douts.extend(g.d_num.iter().map(|&d| -lambda * d));
                douts.extend(g.d_den.iter().map(|&d| -lambda * d));
            }
            value = total;
            Ok((-lambda * total, douts))
        },
        opt,
    )?;
    Ok((value.as_f64(), report.grad_norm.as_f64()))
}

/// Descent on the clustering loss of the batch's dual profile.
fn cluster_step<T: Scalar>(
    model: &mut DualFunctionModel<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig<T>,
    opt: &OptimConfig<T>,
) -> Result<f64> {
    let k = cfg.path_steps;
    let x = &batch.path[0];
    let inputs = all_step_inputs(x, k);
    let lambda = cfg.lambda_cluster;
    let knn_k = cfg.knn_k;
    // offsets shift every dual value equally and the loss is shift invariant
    let zero = NormalizedDualOffsets::zeros(k);
    let mut loss_value = T::zero();
    let step = |out: &[T]| {
        let duals = fold_steps(out, &zero);
        let (loss, grad) = clustering_loss_gradient(&duals, knn_k)?;
        loss_value = loss;
        let douts = grad.iter().flat_map(|&g| std::iter::repeat_n(lambda * g, k)).collect();
        Ok((lambda * loss, douts))
    };
    if lambda == T::zero() {
        let duals = fold_steps(&model.forward_inputs(&inputs)?, &zero);
        let profile = build_profile(&duals, knn_k)?;
        return Ok(crate::clustering::clustering_loss(&profile.d_knn)?.as_f64());
    }
    model.step(&inputs, step, opt)?;
    Ok(loss_value.as_f64())
}

/// Generates a small batch by gradient walks and ascends `D(X_g || X)`.
fn gen_step<T: Scalar>(
    model: &mut DualFunctionModel<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig<T>,
    opt: &OptimConfig<T>,
    iter: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    let k = cfg.path_steps;
    let offsets = path_offsets(model, &batch.path)?;
    let walk = WalkConfig {
        targets_per_gap: cfg.train_targets_per_gap,
        seed: derive_seed(cfg.walk.seed ^ cfg.seed, TAG_WALK, iter as u64),
        ..cfg.walk.clone()
    };
    let x = &batch.path[0];
    let outcome: SampleOutcome<T> = sample_via_gradient_walk(model, &offsets, x, cfg.knn_k, cfg.cut_count, &walk)?;
    let rate = Some(outcome.yield_rate());
    if outcome.images.is_empty() {
        return Ok((None, rate));
    }
    let xg = outcome.images;
    let m = xg.len();
    let mut inputs = all_step_inputs(&xg, k);
    inputs.extend(all_step_inputs(x, k));
    let lambda = cfg.lambda_gen;
    let mut value = T::zero();
    model.step(
        &inputs,
        |out| {
            let duals = fold_steps(out, &offsets);
            let (num, den) = duals.split_at(m);
            let g = dv_gradient(num, den)?;
            value = g.value;
            let douts = g
                .d_num
                .iter()
                .chain(&g.d_den)
                .flat_map(|&d| std::iter::repeat_n(-lambda * d, k))
                .collect();
            Ok((-lambda * g.value, douts))
        },
        opt,
    )?;
    Ok((Some(value.as_f64()), rate))
}

/// Final generation with the full walk budget; see [`generate_samples`].
pub fn generate<T: Scalar>(
    model: &DualFunctionModel<T>,
    offsets: &NormalizedDualOffsets<T>,
    x: &ImageSet<T>,
    cfg: &TrainConfig<T>,
    count: usize,
) -> Result<SampleOutcome<T>> {
    generate_samples(model, offsets, x, cfg.knn_k, cfg.cut_count, count, &cfg.walk)
}

/// Held-out style evaluation helper: `logmeanexp` of the dual on a set at one step.
pub fn eta_at<T: Scalar>(model: &DualFunctionModel<T>, set: &ImageSet<T>, step: usize) -> Result<T> {
    log_mean_exp(&model.forward(set, Some(step))?)
}
