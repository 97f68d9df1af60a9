//! Trainable scalar dual function over images.
//!
//! A fully connected network on the flattened image, optionally conditioned on
//! the diffusion-path step through one extra input `j / (k - 1)`. The last
//! layer is linear with a single output. Weights of layer `l` are stored as a
//! `fan_in x fan_out` row-major block followed by `fan_out` biases, and all
//! layers are packed into one flat parameter vector so that clipping, EMA and
//! serialization operate on a single slice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{arg, Error, Result};
use crate::image::ImageSet;
use crate::scalar::Scalar;

/// Inputs per parallel work item. Reductions happen within a chunk and then
/// across chunks in index order, so results do not depend on thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "softplus" => Some(Activation::Softplus),
            _ => None,
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                if z > T::zero() {
                    z + (-z).exp().ln_1p()
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    #[inline]
    fn derivative<T: Scalar>(self, z: T, a: T) -> T {
        match self {
            Activation::Tanh => T::one() - a * a,
            Activation::Softplus => T::one() / (T::one() + (-z).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig<T> {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub step_conditioned: bool,
    /// Gain on the `1 / sqrt(fan_in)` uniform initialization bound.
    pub init_scale: T,
    pub seed: u64,
}

impl<T: Scalar> Default for ModelConfig<T> {
    fn default() -> Self {
        Self {
            hidden_dims: vec![128, 64],
            activation: Activation::Tanh,
            step_conditioned: true,
            init_scale: T::one(),
            seed: 0,
        }
    }
}

impl<T: Scalar> ModelConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return arg("hidden_dims must be non-empty");
        }
        if self.hidden_dims.contains(&0) {
            return arg("hidden_dims entries must be positive");
        }
        if !(self.init_scale > T::zero()) || !self.init_scale.is_finite() {
            return arg(format!("init_scale must be positive, got {}", self.init_scale));
        }
        Ok(())
    }
}

/// Gradient-descent settings for one parameter update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig<T> {
    pub learning_rate: T,
    /// Global gradient norm cap; `0` turns every step into a no-op.
    pub clip_norm: T,
    pub ema_decay: T,
}

impl<T: Scalar> Default for OptimConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::lit(1e-3),
            clip_norm: T::one(),
            ema_decay: T::lit(0.999),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport<T> {
    pub loss: T,
    /// Global gradient norm before clipping.
    pub grad_norm: T,
    pub applied: bool,
}

/// One network evaluation request: an image plus the optional path step.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a, T> {
    pub image: &'a [T],
    pub step: Option<usize>,
}

impl<'a, T> ModelInput<'a, T> {
    pub fn new(image: &'a [T], step: Option<usize>) -> Self {
        Self { image, step }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualFunctionModel<T> {
    rows: usize,
    cols: usize,
    path_steps: usize,
    config: ModelConfig<T>,
    layers: Vec<Layer>,
    params: Vec<T>,
    ema: Vec<T>,
    updates: u64,
    input_shift: T,
    input_scale: T,
}

struct Workspace<T> {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    delta: Vec<T>,
    delta_prev: Vec<T>,
    input_grad: Vec<T>,
}

impl<T: Scalar> DualFunctionModel<T> {
    /// Randomly initialized model for `rows x cols` images on a path of
    /// `path_steps` steps.
    pub fn new(rows: usize, cols: usize, path_steps: usize, config: ModelConfig<T>) -> Result<Self> {
        let mut model = Self::zeroed(rows, cols, path_steps, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        for layer in &model.layers {
            let bound = model.config.init_scale / T::from_usize_lossy(layer.fan_in).sqrt();
            let bound = bound.as_f64();
            let n = layer.fan_in * layer.fan_out + layer.fan_out;
            for p in &mut model.params[layer.w..layer.w + n] {
                *p = T::lit(rng.random_range(-bound..=bound));
            }
        }
        model.ema.copy_from_slice(&model.params);
        Ok(model)
    }

    /// Model with every parameter set to zero.
    pub fn zeroed(rows: usize, cols: usize, path_steps: usize, config: ModelConfig<T>) -> Result<Self> {
        config.validate()?;
        if rows == 0 || cols == 0 {
            return arg(format!("image dims must be positive, got {rows}x{cols}"));
        }
        if path_steps == 0 {
            return arg("path_steps must be at least 1");
        }
        let input = rows * cols + usize::from(config.step_conditioned);
        let mut dims = vec![input];
        dims.extend_from_slice(&config.hidden_dims);
        dims.push(1);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut offset = 0;
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            layers.push(Layer { fan_in, fan_out, w: offset, b: offset + fan_in * fan_out });
            offset += fan_in * fan_out + fan_out;
        }
        Ok(Self {
            rows,
            cols,
            path_steps,
            config,
            layers,
            params: vec![T::zero(); offset],
            ema: vec![T::zero(); offset],
            updates: 0,
            input_shift: T::zero(),
            input_scale: T::one(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn path_steps(&self) -> usize {
        self.path_steps
    }

    pub fn config(&self) -> &ModelConfig<T> {
        &self.config
    }

    pub fn step_conditioned(&self) -> bool {
        self.config.step_conditioned
    }

    /// Layer widths from input to output.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].fan_in];
        dims.extend(self.layers.iter().map(|l| l.fan_out));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn ema_params(&self) -> &[T] {
        &self.ema
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Overwrites raw parameters and EMA shadow.
    pub fn set_params(&mut self, params: &[T], ema: &[T]) -> Result<()> {
        if params.len() != self.params.len() || ema.len() != self.ema.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {} and {}",
                self.params.len(),
                params.len(),
                ema.len()
            )));
        }
        if params.iter().chain(ema).any(|p| !p.is_finite()) {
            return Err(Error::Input("parameters must be finite".into()));
        }
        self.params.copy_from_slice(params);
        self.ema.copy_from_slice(ema);
        Ok(())
    }

    pub(crate) fn set_updates(&mut self, updates: u64) {
        self.updates = updates;
    }

    /// Fixed affine map `(x - shift) * scale` applied to every pixel before
    /// the first layer.
    pub fn input_affine(&self) -> (T, T) {
        (self.input_shift, self.input_scale)
    }

    pub fn set_input_affine(&mut self, shift: T, scale: T) -> Result<()> {
        if !shift.is_finite() || !(scale > T::zero()) || !scale.is_finite() {
            return arg(format!("input affine needs finite shift and positive scale, got {shift} and {scale}"));
        }
        self.input_shift = shift;
        self.input_scale = scale;
        Ok(())
    }

    /// Copy whose raw parameters are the EMA shadow.
    pub fn ema_model(&self) -> Self {
        let mut m = self.clone();
        m.params.copy_from_slice(&self.ema);
        m
    }

    /// Width of the last hidden layer.
    pub fn penultimate_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_in
    }

    fn workspace(&self) -> Workspace<T> {
        let mut acts = vec![vec![T::zero(); self.layers[0].fan_in]];
        let mut pre = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            acts.push(vec![T::zero(); l.fan_out]);
            pre.push(vec![T::zero(); l.fan_out]);
        }
        let widest = self.layers.iter().map(|l| l.fan_in.max(l.fan_out)).max().unwrap_or(1);
        Workspace {
            acts,
            pre,
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
            input_grad: Vec::with_capacity(self.layers[0].fan_in),
        }
    }

    fn check_input(&self, input: &ModelInput<'_, T>) -> Result<()> {
        let dim = self.rows * self.cols;
        if input.image.len() != dim {
            return Err(Error::Shape(format!(
                "model expects {}x{} = {dim} pixels, got {}",
                self.rows,
                self.cols,
                input.image.len()
            )));
        }
        if self.config.step_conditioned {
            match input.step {
                Some(j) if j < self.path_steps => {}
                Some(j) => {
                    return arg(format!("step {j} outside [0, {}]", self.path_steps - 1));
                }
                None => return arg("step-conditioned model requires a path step"),
            }
        }
        if let Some(pos) = input.image.iter().position(|p| !p.is_finite()) {
            return Err(Error::Input(format!("pixel {pos} is not finite")));
        }
        Ok(())
    }

    fn step_feature(&self, step: usize) -> T {
        if self.path_steps > 1 {
            T::from_usize_lossy(step) / T::from_usize_lossy(self.path_steps - 1)
        } else {
            T::zero()
        }
    }

    fn run(&self, params: &[T], input: &ModelInput<'_, T>, ws: &mut Workspace<T>) -> T {
        let dim = self.rows * self.cols;
        if self.input_shift == T::zero() && self.input_scale == T::one() {
            ws.acts[0][..dim].copy_from_slice(input.image);
        } else {
            for (a, &p) in ws.acts[0][..dim].iter_mut().zip(input.image) {
                *a = (p - self.input_shift) * self.input_scale;
            }
        }
        if self.config.step_conditioned {
            ws.acts[0][dim] = self.step_feature(input.step.unwrap_or(0));
        }
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = ws.acts.split_at_mut(l + 1);
            let a_in = &head[l];
            let z = &mut ws.pre[l];
            z.copy_from_slice(&params[layer.b..layer.b + layer.fan_out]);
            for (i, &a) in a_in.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let row = &params[layer.w + i * layer.fan_out..layer.w + (i + 1) * layer.fan_out];
                for (zo, &w) in z.iter_mut().zip(row) {
                    *zo += a * w;
                }
            }
            let out = &mut tail[0];
            if l == last {
                out.copy_from_slice(z);
            } else {
                for (o, &zv) in out.iter_mut().zip(z.iter()) {
                    *o = self.config.activation.apply(zv);
                }
            }
        }
        ws.acts[self.layers.len()][0]
    }

    /// Back-propagates `dout` through the state left in `ws` by `run`.
    /// Accumulates into `grad` when given; fills `ws.input_grad` when asked.
    fn backprop(&self, params: &[T], ws: &mut Workspace<T>, dout: T, mut grad: Option<&mut [T]>, want_input: bool) {
        ws.delta.clear();
        ws.delta.push(dout);
        for l in (0..self.layers.len()).rev() {
            let layer = self.layers[l];
            let a_in = &ws.acts[l];
            if let Some(g) = grad.as_deref_mut() {
                for (gb, &d) in g[layer.b..layer.b + layer.fan_out].iter_mut().zip(&ws.delta) {
                    *gb += d;
                }
                for (i, &a) in a_in.iter().enumerate() {
                    if a == T::zero() {
                        continue;
                    }
                    let row = &mut g[layer.w + i * layer.fan_out..layer.w + (i + 1) * layer.fan_out];
                    for (gw, &d) in row.iter_mut().zip(&ws.delta) {
                        *gw += a * d;
                    }
                }
            }
            if l == 0 && !want_input {
                break;
            }
            ws.delta_prev.clear();
            for i in 0..layer.fan_in {
                let row = &params[layer.w + i * layer.fan_out..layer.w + (i + 1) * layer.fan_out];
                let mut s = T::zero();
                for (&w, &d) in row.iter().zip(&ws.delta) {
                    s += w * d;
                }
                ws.delta_prev.push(s);
            }
            if l == 0 {
                ws.input_grad.clear();
                let scale = self.input_scale;
                ws.input_grad.extend(ws.delta_prev[..self.rows * self.cols].iter().map(|&d| d * scale));
                break;
            }
            let act = self.config.activation;
            for ((dp, &z), &a) in ws.delta_prev.iter_mut().zip(&ws.pre[l - 1]).zip(&ws.acts[l]) {
                *dp *= act.derivative(z, a);
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
    }

    /// Dual value of every image in `images` at the given path step.
    pub fn forward(&self, images: &ImageSet<T>, step: Option<usize>) -> Result<Vec<T>> {
        if images.is_empty() {
            return arg("forward needs at least one image");
        }
        let inputs: Vec<_> = images.iter().map(|im| ModelInput::new(im, step)).collect();
        self.forward_inputs(&inputs)
    }

    pub fn forward_one(&self, image: &[T], step: Option<usize>) -> Result<T> {
        let input = ModelInput::new(image, step);
        self.check_input(&input)?;
        let mut ws = self.workspace();
        Ok(self.run(&self.params, &input, &mut ws))
    }

    /// Evaluates a batch of inputs; output order matches input order.
    pub fn forward_inputs(&self, inputs: &[ModelInput<'_, T>]) -> Result<Vec<T>> {
        for input in inputs {
            self.check_input(input)?;
        }
        let chunks: Vec<Vec<T>> = inputs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut ws = self.workspace();
                chunk.iter().map(|inp| self.run(&self.params, inp, &mut ws)).collect()
            })
            .collect();
        Ok(chunks.concat())
    }

    /// Exact gradient of the scalar output with respect to every pixel.
    pub fn grad_input(&self, image: &[T], step: Option<usize>) -> Result<Vec<T>> {
        Ok(self.value_and_grad_input(image, step)?.1)
    }

    pub fn value_and_grad_input(&self, image: &[T], step: Option<usize>) -> Result<(T, Vec<T>)> {
        let input = ModelInput::new(image, step);
        self.check_input(&input)?;
        let mut ws = self.workspace();
        let value = self.run(&self.params, &input, &mut ws);
        self.backprop(&self.params, &mut ws, T::one(), None, true);
        Ok((value, std::mem::take(&mut ws.input_grad)))
    }

    /// Activations of the last hidden layer.
    pub fn penultimate(&self, image: &[T], step: Option<usize>) -> Result<Vec<T>> {
        let input = ModelInput::new(image, step);
        self.check_input(&input)?;
        let mut ws = self.workspace();
        self.run(&self.params, &input, &mut ws);
        Ok(ws.acts[self.layers.len() - 1].clone())
    }

    /// `sum_i douts[i] * d f(inputs[i]) / d params`.
    pub fn param_gradient(&self, inputs: &[ModelInput<'_, T>], douts: &[T]) -> Result<Vec<T>> {
        if inputs.len() != douts.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} output gradients",
                inputs.len(),
                douts.len()
            )));
        }
        for input in inputs {
            self.check_input(input)?;
        }
        let pairs: Vec<_> = inputs.iter().zip(douts).collect();
        let partials: Vec<Vec<T>> = pairs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut ws = self.workspace();
                let mut g = vec![T::zero(); self.params.len()];
                for (input, &d) in chunk {
                    if d == T::zero() {
                        continue;
                    }
                    self.run(&self.params, input, &mut ws);
                    self.backprop(&self.params, &mut ws, d, Some(&mut g), false);
                }
                g
            })
            .collect();
        let mut total = vec![T::zero(); self.params.len()];
        for g in &partials {
            for (t, &v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        Ok(total)
    }

    /// One clipped gradient-descent step on `loss_fn(outputs)`.
    ///
    /// `loss_fn` receives the model outputs on `inputs` and returns the loss
    /// together with its derivative with respect to each output. The EMA
    /// shadow follows with decay `min(ema_decay, (1 + u) / (10 + u))`, `u`
    /// being the number of updates applied so far.
    pub fn step<F>(&mut self, inputs: &[ModelInput<'_, T>], loss_fn: F, opt: &OptimConfig<T>) -> Result<StepReport<T>>
    where
        F: FnOnce(&[T]) -> Result<(T, Vec<T>)>,
    {
        let outputs = self.forward_inputs(inputs)?;
        let (loss, douts) = loss_fn(&outputs)?;
        let iteration = self.updates as usize;
        if !loss.is_finite() {
            return Err(Error::Training { iteration, detail: format!("loss is {loss}") });
        }
        if let Some(pos) = douts.iter().position(|d| !d.is_finite()) {
            return Err(Error::Training {
                iteration,
                detail: format!("loss gradient for output {pos} is {}", douts[pos]),
            });
        }
        let grad = self.param_gradient(inputs, &douts)?;
        let grad_norm = grad.iter().fold(T::zero(), |acc, &g| acc + g * g).sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Training { iteration, detail: format!("gradient norm is {grad_norm}") });
        }
        if opt.learning_rate == T::zero() || opt.clip_norm == T::zero() {
            return Ok(StepReport { loss, grad_norm, applied: false });
        }
        let scale = if grad_norm > opt.clip_norm { opt.clip_norm / grad_norm } else { T::one() };
        let factor = opt.learning_rate * scale;
        for (p, &g) in self.params.iter_mut().zip(&grad) {
            *p -= factor * g;
        }
        let u = T::lit(self.updates as f64);
        let warm = (T::one() + u) / (T::lit(10.0) + u);
        let decay = opt.ema_decay.min(warm);
        let keep = T::one() - decay;
        for (e, &p) in self.ema.iter_mut().zip(&self.params) {
            *e = decay * *e + keep * p;
        }
        self.updates += 1;
        Ok(StepReport { loss, grad_norm, applied: true })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::SetTag;

    fn cfg(hidden: Vec<usize>, conditioned: bool, seed: u64) -> ModelConfig<f64> {
        ModelConfig { hidden_dims: hidden, step_conditioned: conditioned, seed, ..Default::default() }
    }

    /// Straightforward per-layer forward pass written independently of `run`.
    fn reference_forward(model: &DualFunctionModel<f64>, image: &[f64], step: Option<usize>) -> f64 {
        let dims = model.layer_dims();
        let mut a: Vec<f64> = image.to_vec();
        if model.step_conditioned() {
            let k = model.path_steps();
            a.push(if k > 1 { step.unwrap() as f64 / (k - 1) as f64 } else { 0.0 });
        }
        let p = model.params();
        let mut off = 0;
        for l in 0..dims.len() - 1 {
            let (fi, fo) = (dims[l], dims[l + 1]);
            let w = &p[off..off + fi * fo];
            let b = &p[off + fi * fo..off + fi * fo + fo];
            off += fi * fo + fo;
            let mut z = vec![0.0; fo];
            for o in 0..fo {
                z[o] = b[o] + (0..fi).map(|i| a[i] * w[i * fo + o]).sum::<f64>();
            }
            a = if l + 2 == dims.len() { z } else { z.iter().map(|v| v.tanh()).collect() };
        }
        a[0]
    }

    fn test_image(seed: u64, dim: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..dim).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = DualFunctionModel::<f64>::zeroed(3, 3, 2, cfg(vec![4], true, 0)).unwrap();
        let set = ImageSet::new(3, 3, test_image(1, 18), SetTag::Real).unwrap();
        assert_eq!(m.forward(&set, Some(1)).unwrap(), vec![0.0, 0.0]);
        assert!(m.grad_input(set.image(0), Some(0)).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dot_product_forced_output() {
        // Hidden weights form an image of ones, so the single hidden unit sees
        // <1, x> = 1 and the output weight 1 / tanh(1) undoes the activation.
        let mut m = DualFunctionModel::<f64>::zeroed(2, 2, 1, cfg(vec![1], false, 0)).unwrap();
        let mut p = m.params().to_vec();
        p[..4].fill(1.0);
        p[5] = 1.0 / 1f64.tanh();
        m.set_params(&p, &p).unwrap();
        let out = m.forward_one(&[0.25; 4], None).unwrap();
        assert!((out - 1.0).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_reference_implementation() {
        let m = DualFunctionModel::<f64>::new(4, 4, 3, cfg(vec![8, 5], true, 0)).unwrap();
        let x = test_image(7, 16);
        for step in 0..3 {
            let got = m.forward_one(&x, Some(step)).unwrap();
            let want = reference_forward(&m, &x, Some(step));
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn linear_model_gradient_is_weight_vector() {
        // Width-1 net: f(x) = v * tanh(<w, x>), so grad = v * (1 - tanh^2) * w.
        let mut m = DualFunctionModel::<f64>::zeroed(1, 3, 1, cfg(vec![1], false, 0)).unwrap();
        let mut p = m.params().to_vec();
        p[0] = 0.3;
        p[1] = -0.2;
        p[2] = 0.5;
        p[4] = 2.0;
        m.set_params(&p, &p).unwrap();
        let x = [0.1, 0.7, 0.4];
        let z: f64 = 0.3 * 0.1 - 0.2 * 0.7 + 0.5 * 0.4;
        let s = 2.0 * (1.0 - z.tanh().powi(2));
        let g = m.grad_input(&x, None).unwrap();
        for (gi, wi) in g.iter().zip([0.3, -0.2, 0.5]) {
            assert!((gi - s * wi).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_input_matches_finite_differences() {
        let m = DualFunctionModel::<f64>::new(4, 4, 2, cfg(vec![16, 8], true, 0)).unwrap();
        let x = test_image(3, 16);
        let g = m.grad_input(&x, Some(1)).unwrap();
        let h = 1e-5;
        for i in 0..16 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (m.forward_one(&xp, Some(1)).unwrap() - m.forward_one(&xm, Some(1)).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-6), "pixel {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let m = DualFunctionModel::<f64>::new(2, 2, 1, ModelConfig {
            hidden_dims: vec![3],
            activation: Activation::Softplus,
            step_conditioned: false,
            ..Default::default()
        })
        .unwrap();
        let imgs: Vec<Vec<f64>> = (0..3).map(|s| test_image(s, 4)).collect();
        let inputs: Vec<_> = imgs.iter().map(|im| ModelInput::new(im.as_slice(), None)).collect();
        let douts = [0.5, -1.0, 2.0];
        let g = m.param_gradient(&inputs, &douts).unwrap();
        let h = 1e-6;
        for k in 0..m.num_params() {
            let eval = |delta: f64| {
                let mut mm = m.clone();
                let mut p = mm.params().to_vec();
                p[k] += delta;
                mm.set_params(&p, &p).unwrap();
                let out = mm.forward_inputs(&inputs).unwrap();
                out.iter().zip(&douts).map(|(o, d)| o * d).sum::<f64>()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn shape_and_step_errors() {
        let m = DualFunctionModel::<f64>::new(2, 2, 2, cfg(vec![3], true, 0)).unwrap();
        assert!(matches!(m.forward_one(&[0.0; 3], Some(0)), Err(Error::Shape(_))));
        assert!(matches!(m.forward_one(&[0.0; 4], Some(2)), Err(Error::Argument(_))));
        assert!(matches!(m.forward_one(&[0.0; 4], None), Err(Error::Argument(_))));
        assert!(matches!(m.forward_one(&[0.0, f64::NAN, 0.0, 0.0], Some(0)), Err(Error::Input(_))));
        assert!(DualFunctionModel::<f64>::new(2, 2, 1, cfg(vec![], true, 0)).is_err());
    }

    #[test]
    fn forward_is_batch_permutation_equivariant() {
        let m = DualFunctionModel::<f64>::new(2, 3, 1, cfg(vec![6], false, 4)).unwrap();
        let set = ImageSet::new(2, 3, test_image(9, 6 * 40), SetTag::Real).unwrap();
        let out = m.forward(&set, None).unwrap();
        let perm: Vec<usize> = (0..40).rev().collect();
        let out_p = m.forward(&set.select(&perm), None).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(out_p[i], out[p]);
        }
    }

    #[test]
    fn descent_reduces_squared_output() {
        let mut m = DualFunctionModel::<f64>::new(1, 4, 1, cfg(vec![4], false, 2)).unwrap();
        let x = test_image(5, 4);
        let opt = OptimConfig { learning_rate: 0.01, clip_norm: 10.0, ema_decay: 0.9 };
        let mut prev = m.forward_one(&x, None).unwrap().abs();
        for _ in 0..100 {
            m.step(&[ModelInput::new(&x, None)], |o| Ok((o[0] * o[0], vec![2.0 * o[0]])), &opt).unwrap();
            let now = m.forward_one(&x, None).unwrap().abs();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn zero_clip_or_rate_leaves_parameters_bit_identical() {
        let x = test_image(5, 4);
        for opt in [
            OptimConfig { learning_rate: 0.1, clip_norm: 0.0, ema_decay: 0.9 },
            OptimConfig { learning_rate: 0.0, clip_norm: 1.0, ema_decay: 0.9 },
        ] {
            let mut m = DualFunctionModel::<f64>::new(1, 4, 1, cfg(vec![4], false, 2)).unwrap();
            let before = m.clone();
            let r = m.step(&[ModelInput::new(&x, None)], |o| Ok((o[0], vec![1.0])), &opt).unwrap();
            assert!(!r.applied);
            assert_eq!(m, before);
        }
    }

    #[test]
    fn non_finite_loss_is_a_training_error() {
        let mut m = DualFunctionModel::<f64>::new(1, 4, 1, cfg(vec![4], false, 2)).unwrap();
        let x = test_image(5, 4);
        let err = m
            .step(&[ModelInput::new(&x, None)], |_| Ok((f64::NAN, vec![1.0])), &OptimConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::Training { .. }));
    }

    #[test]
    fn zero_decay_ema_tracks_raw_weights() {
        let mut m = DualFunctionModel::<f64>::new(1, 4, 1, cfg(vec![4], false, 2)).unwrap();
        let x = test_image(5, 4);
        let opt = OptimConfig { learning_rate: 0.05, clip_norm: 1.0, ema_decay: 0.0 };
        for _ in 0..5 {
            m.step(&[ModelInput::new(&x, None)], |o| Ok((o[0], vec![1.0])), &opt).unwrap();
        }
        assert_eq!(m.params(), m.ema_params());
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut m = DualFunctionModel::<f64>::new(1, 4, 1, cfg(vec![4], false, 2)).unwrap();
        let x = test_image(5, 4);
        let before = m.params().to_vec();
        let opt = OptimConfig { learning_rate: 1.0, clip_norm: 1e-3, ema_decay: 0.0 };
        let r = m.step(&[ModelInput::new(&x, None)], |o| Ok((1e6 * o[0], vec![1e6])), &opt).unwrap();
        assert!(r.grad_norm > 1.0);
        let moved: f64 = before.iter().zip(m.params()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!((moved - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn f32_models_run() {
        let m = DualFunctionModel::<f32>::new(2, 2, 1, ModelConfig { hidden_dims: vec![3], ..Default::default() }).unwrap();
        let v = m.forward_one(&[0.1, 0.2, 0.3, 0.4], Some(0)).unwrap();
        assert!(v.is_finite());
    }
}
