//! DDPM forward and reverse processes with an MLP noise predictor.
//!
//! Timesteps are 0-based: `t` runs over `0..T` and the reverse step at `t`
//! maps `x_t` to `x_{t-1}`, with the step at `t = 0` producing the final
//! image without injected noise.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{lora_delta, AdapterMode, AdapterSet};
use crate::data::{ConditionToken, DiffusionItem};
use crate::numcore::{adam_step, AdamConfig, BoundParams, GradMode};
use crate::rng::{normal_vec, rng_for, stream};
use crate::{NumError, ParamStore, Tape, Tensor};
use crate::numcore::Var;

type Result<T> = std::result::Result<T, NumError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(NumError::Config(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }
}

/// Linear beta schedule over `steps` timesteps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(NumError::Config(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(NumError::Config(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let beta: Vec<f64> =
        (0..steps).map(|t| beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64).collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` at one timestep.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    q_sample_batch(x0, &vec![t; x0.shape()[0]], eps, sched)
}

/// Per-row timesteps over the leading axis.
pub fn q_sample_batch(x0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(NumError::Shape { op: "q_sample", detail: format!("{:?} vs {:?}", x0.shape(), eps.shape()) });
    }
    let rows = x0.shape()[0];
    if t.len() != rows {
        return Err(NumError::Shape { op: "q_sample", detail: format!("{} timesteps for {rows} rows", t.len()) });
    }
    let per = x0.len() / rows;
    let mut out = Vec::with_capacity(x0.len());
    for (r, &tr) in t.iter().enumerate() {
        sched.check_t(tr)?;
        let (a, s) = (sched.alpha_bar[tr].sqrt(), (1.0 - sched.alpha_bar[tr]).sqrt());
        let xs = &x0.data()[r * per..(r + 1) * per];
        let es = &eps.data()[r * per..(r + 1) * per];
        out.extend(xs.iter().zip(es).map(|(x, e)| a * x + s * e));
    }
    Tensor::new(x0.shape().to_vec(), out)
}

fn ancestral_coeffs(sched: &NoiseSchedule, t: usize) -> (f64, f64, f64) {
    let inv_sqrt_alpha = 1.0 / sched.alpha[t].sqrt();
    let eps_coef = sched.beta[t] / (1.0 - sched.alpha_bar[t]).sqrt();
    (inv_sqrt_alpha, eps_coef, sched.beta[t].sqrt())
}

fn check_noise(x: &[usize], t: usize, noise: Option<&Tensor>) -> Result<()> {
    match (t, noise) {
        (0, Some(_)) => Err(NumError::Config("the final reverse step (t = 0) takes no noise".into())),
        (0, None) => Ok(()),
        (_, None) => Err(NumError::Config(format!("reverse step at t = {t} needs noise"))),
        (_, Some(n)) if n.shape() != x => {
            Err(NumError::Shape { op: "p_sample_step", detail: format!("noise {:?} for latent {x:?}", n.shape()) })
        }
        _ => Ok(()),
    }
}

/// `x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t) + sqrt(beta_t) z`.
pub fn ancestral_update(x: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule, noise: Option<&Tensor>) -> Result<Tensor> {
    sched.check_t(t)?;
    check_noise(x.shape(), t, noise)?;
    if eps.shape() != x.shape() {
        return Err(NumError::Shape { op: "p_sample_step", detail: format!("eps {:?} for latent {:?}", eps.shape(), x.shape()) });
    }
    let (k, c, sigma) = ancestral_coeffs(sched, t);
    let mut out: Vec<f64> = x.data().iter().zip(eps.data()).map(|(x, e)| (x - c * e) * k).collect();
    if let Some(z) = noise {
        out.iter_mut().zip(z.data()).for_each(|(o, z)| *o += sigma * z);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Differentiable form of [`ancestral_update`].
pub fn ancestral_update_var(
    tape: &mut Tape,
    x: Var,
    eps: Var,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Var> {
    sched.check_t(t)?;
    check_noise(tape.shape(x), t, noise)?;
    let (k, c, sigma) = ancestral_coeffs(sched, t);
    let scaled = tape.scale(eps, c)?;
    let diff = tape.sub(x, scaled)?;
    let mean = tape.scale(diff, k)?;
    match noise {
        Some(z) => {
            let z = tape.constant(z.map(|v| v * sigma));
            tape.add(mean, z)
        }
        None => Ok(mean),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorArch {
    pub image_size: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    /// 0 for an unconditional model.
    pub cond_dim: usize,
    pub num_classes: usize,
    /// Width of the per-pixel refinement head; 0 disables it.
    #[serde(default)]
    pub pixel_hidden: usize,
}

impl PredictorArch {
    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn input_dim(&self) -> usize {
        self.pixels() + self.context_dim()
    }

    /// Timestep plus condition embedding width.
    pub fn context_dim(&self) -> usize {
        self.time_dim + self.cond_dim
    }

    /// `(in, out)` of the per-pixel head, which reads the pixel, the MLP's
    /// prediction for it and the context.
    pub fn pixel_dims(&self) -> Vec<(usize, usize)> {
        if self.pixel_hidden == 0 {
            return Vec::new();
        }
        vec![(2 + self.context_dim(), self.pixel_hidden), (self.pixel_hidden, 1)]
    }

    /// `(in, out)` of each affine layer in order. The output layer also
    /// reads the embedded input alongside the last hidden layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.pixels());
        let mut out: Vec<(usize, usize)> = dims.windows(2).map(|w| (w[0], w[1])).collect();
        if !self.hidden.is_empty() {
            out.last_mut().expect("nonempty").0 += self.input_dim();
        }
        out
    }
}

pub fn layer_name(i: usize) -> String {
    format!("l{i}")
}

/// Sinusoidal embedding of one timestep: `[sin(t f_k), cos(t f_k)]`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = 10_000f64.powf(-(k as f64) / half as f64);
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    out
}

/// MLP noise predictor `eps_theta(x_t, t, c)` over flattened images.
#[derive(Debug, Clone)]
pub struct NoisePredictor {
    pub arch: PredictorArch,
    pub params: ParamStore,
    pub adapters: Option<AdapterSet>,
}

impl NoisePredictor {
    pub fn new(arch: PredictorArch, seed: u64) -> Result<Self> {
        if arch.image_size == 0 || arch.hidden.contains(&0) || arch.time_dim % 2 != 0 {
            return Err(NumError::Config(format!("invalid predictor architecture {arch:?}")));
        }
        if arch.cond_dim > 0 && arch.num_classes == 0 {
            return Err(NumError::Config("conditional predictor needs num_classes >= 1".into()));
        }
        let mut rng = rng_for(seed, stream::INIT, 0);
        let mut params = ParamStore::new();
        if arch.cond_dim > 0 {
            let table = normal_vec(&mut rng, arch.cond_dim * arch.num_classes);
            params.insert("cond.table", Tensor::new(vec![arch.cond_dim, arch.num_classes], table)?)?;
        }
        for (i, (fan_in, fan_out)) in arch.layer_dims().into_iter().enumerate() {
            let std = (1.0 / fan_in as f64).sqrt();
            let w = normal_vec(&mut rng, fan_in * fan_out).into_iter().map(|v| v * std).collect();
            params.insert(format!("{}.w", layer_name(i)), Tensor::new(vec![fan_out, fan_in], w)?)?;
            params.insert(format!("{}.b", layer_name(i)), Tensor::zeros(&[fan_out]))?;
        }
        for (i, (fan_in, fan_out)) in arch.pixel_dims().into_iter().enumerate() {
            let std = (1.0 / fan_in as f64).sqrt();
            let w = normal_vec(&mut rng, fan_in * fan_out).into_iter().map(|v| v * std).collect();
            params.insert(format!("px{i}.w"), Tensor::new(vec![fan_out, fan_in], w)?)?;
            params.insert(format!("px{i}.b"), Tensor::zeros(&[fan_out]))?;
        }
        Ok(Self { arch, params, adapters: None })
    }

    /// Mode used by [`predict_noise`]: adapted when adapters are attached and enabled.
    pub fn mode(&self) -> AdapterMode {
        self.adapters.as_ref().map_or(AdapterMode::Base, |a| a.mode)
    }

    /// Flattened pixels `[B, P]` and the context `[B, time_dim + cond_dim]`.
    fn embed_inputs(&self, tape: &mut Tape, p: &BoundParams, x: Var, t: &[usize], cond: Option<&[ConditionToken]>) -> Result<(Var, Option<Var>)> {
        let shape = tape.shape(x).to_vec();
        let rows = shape[0];
        let pixels = self.arch.pixels();
        if shape.iter().product::<usize>() != rows * pixels {
            return Err(NumError::Shape { op: "predict_noise", detail: format!("latent {shape:?} for {pixels} pixels per item") });
        }
        if t.len() != rows {
            return Err(NumError::Shape { op: "predict_noise", detail: format!("{} timesteps for {rows} rows", t.len()) });
        }
        let flat = tape.reshape(x, &[rows, pixels])?;
        let temb: Vec<f64> = t.iter().flat_map(|&ti| time_embedding(ti, self.arch.time_dim)).collect();
        let mut parts = Vec::new();
        if self.arch.time_dim > 0 {
            parts.push(tape.constant(Tensor::new(vec![rows, self.arch.time_dim], temb)?));
        }
        match (self.arch.cond_dim, cond) {
            (0, None) => {}
            (0, Some(_)) => return Err(NumError::Config("unconditional predictor given a condition".into())),
            (_, None) => return Err(NumError::Config("conditional predictor needs a condition per row".into())),
            (_, Some(c)) => {
                if c.len() != rows {
                    return Err(NumError::Shape { op: "predict_noise", detail: format!("{} conditions for {rows} rows", c.len()) });
                }
                let k = self.arch.num_classes;
                let mut onehot = vec![0.0; rows * k];
                for (r, tok) in c.iter().enumerate() {
                    if tok.class_id() >= k {
                        return Err(NumError::Config(format!("condition id {} outside [0, {k})", tok.class_id())));
                    }
                    onehot[r * k + tok.class_id()] = 1.0;
                }
                let onehot = tape.constant(Tensor::new(vec![rows, k], onehot)?);
                parts.push(tape.affine(onehot, p.get("cond.table")?, None)?);
            }
        }
        let context = match parts.len() {
            0 => None,
            1 => Some(parts[0]),
            _ => Some(tape.concat(&parts, 1)?),
        };
        Ok((flat, context))
    }

    /// Differentiable `eps_theta`. `x` is `[B, H, W]` (or any shape with
    /// `H * W` values per row); the output has the same shape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        t: &[usize],
        cond: Option<&[ConditionToken]>,
        mode: AdapterMode,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (flat, context) = self.embed_inputs(tape, p, x, t, cond)?;
        let input = match context {
            Some(c) => tape.concat(&[flat, c], 1)?,
            None => flat,
        };
        let mut h = input;
        let adapters = match (mode, &self.adapters) {
            (AdapterMode::Adapted, Some(a)) => Some(a),
            _ => None,
        };
        let n = self.arch.layer_dims().len();
        for i in 0..n {
            let name = layer_name(i);
            if i > 0 && i + 1 == n {
                h = tape.concat(&[h, input], 1)?;
            }
            let base = tape.affine(h, p.get(&format!("{name}.w"))?, Some(p.get(&format!("{name}.b"))?))?;
            h = match adapters {
                Some(a) => match lora_delta(tape, p, a, &name, h, t)? {
                    Some(d) => tape.add(base, d)?,
                    None => base,
                },
                None => base,
            };
            if i + 1 < n {
                h = tape.tanh(h)?;
            }
        }
        if self.arch.pixel_hidden > 0 {
            h = self.pixel_head(tape, p, flat, h, context)?;
        }
        tape.reshape(h, &shape)
    }
}

impl NoisePredictor {
    /// `m + g(x_p, m_p, context)` applied to every pixel with shared weights.
    fn pixel_head(&self, tape: &mut Tape, p: &BoundParams, flat: Var, m: Var, context: Option<Var>) -> Result<Var> {
        let rows = tape.shape(flat)[0];
        let pixels = self.arch.pixels();
        let xs = tape.reshape(flat, &[rows * pixels, 1])?;
        let ms = tape.reshape(m, &[rows * pixels, 1])?;
        let mut parts = vec![xs, ms];
        if let Some(c) = context {
            let width = tape.shape(c)[1];
            let e = tape.expand(c, 1, pixels)?;
            parts.push(tape.reshape(e, &[rows * pixels, width])?);
        }
        let mut h = tape.concat(&parts, 1)?;
        let n = self.arch.pixel_dims().len();
        for i in 0..n {
            h = tape.affine(h, p.get(&format!("px{i}.w"))?, Some(p.get(&format!("px{i}.b"))?))?;
            if i + 1 < n {
                h = tape.tanh(h)?;
            }
        }
        let h = tape.reshape(h, &[rows, pixels])?;
        tape.add(m, h)
    }
}

/// Anything that predicts noise on the tape.
pub trait EpsModel {
    fn eps_var(&self, tape: &mut Tape, x: Var, t: &[usize], cond: Option<&[ConditionToken]>) -> Result<Var>;
}

/// A predictor with its parameters already placed on a tape.
pub struct BoundNet<'a> {
    pub net: &'a NoisePredictor,
    pub params: &'a BoundParams,
    pub mode: AdapterMode,
}

impl EpsModel for BoundNet<'_> {
    fn eps_var(&self, tape: &mut Tape, x: Var, t: &[usize], cond: Option<&[ConditionToken]>) -> Result<Var> {
        self.net.forward(tape, self.params, x, t, cond, self.mode)
    }
}

/// Gradient-free noise prediction, used by samplers.
pub trait Denoiser {
    fn eps(&mut self, x: &Tensor, t: &[usize], cond: Option<&[ConditionToken]>) -> Result<Tensor>;
}

/// Evaluates a predictor with constant parameters, reusing one tape.
pub struct NoGradRunner<'a> {
    net: &'a NoisePredictor,
    tape: Tape,
    params: BoundParams,
    mark: usize,
    mode: AdapterMode,
}

impl<'a> NoGradRunner<'a> {
    pub fn new(net: &'a NoisePredictor, mode: AdapterMode) -> Self {
        let mut tape = Tape::new();
        let params = net.params.bind(&mut tape, GradMode::Frozen);
        let mark = tape.len();
        Self { net, tape, params, mark, mode }
    }
}

impl Denoiser for NoGradRunner<'_> {
    fn eps(&mut self, x: &Tensor, t: &[usize], cond: Option<&[ConditionToken]>) -> Result<Tensor> {
        let xv = self.tape.constant(x.clone());
        let out = self.net.forward(&mut self.tape, &self.params, xv, t, cond, self.mode);
        let value = out.map(|v| self.tape.value(v).clone());
        self.tape.truncate(self.mark);
        value
    }
}

/// `eps_theta(x_t, t, c)` without gradient tracking, in the net's current mode.
pub fn predict_noise(net: &NoisePredictor, x_t: &Tensor, t: &[usize], cond: Option<&[ConditionToken]>) -> Result<Tensor> {
    NoGradRunner::new(net, net.mode()).eps(x_t, t, cond)
}

/// One ancestral reverse step shared by the whole batch.
pub fn p_sample_step<D: Denoiser + ?Sized>(
    den: &mut D,
    x_t: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
    cond: Option<&[ConditionToken]>,
) -> Result<Tensor> {
    sched.check_t(t)?;
    check_noise(x_t.shape(), t, noise)?;
    let eps = den.eps(x_t, &vec![t; x_t.shape()[0]], cond)?;
    ancestral_update(x_t, &eps, t, sched, noise)
}

/// Per-sample noise source: item `i` of a batch seeded with `seed` always
/// draws the same initial latent and step noise.
pub struct ChainNoise {
    rngs: Vec<ChaCha8Rng>,
    per_item: usize,
}

impl ChainNoise {
    pub fn new(seed: u64, batch: usize, per_item: usize) -> Self {
        Self { rngs: (0..batch).map(|i| rng_for(seed, stream::SAMPLE, i as u64)).collect(), per_item }
    }

    pub fn offset(seed: u64, range: Range<usize>, per_item: usize) -> Self {
        Self { rngs: range.map(|i| rng_for(seed, stream::SAMPLE, i as u64)).collect(), per_item }
    }

    pub fn draw(&mut self, shape: &[usize]) -> Result<Tensor> {
        let per = self.per_item;
        let data = self.rngs.iter_mut().flat_map(|r| normal_vec(r, per)).collect();
        Tensor::new(shape.to_vec(), data)
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Final images clipped to `[0, 1]`.
    pub images: Tensor,
    /// Unclipped final states, when requested.
    pub raw: Option<Tensor>,
}

/// Runs the full reverse chain from `T - 1` down to `0` starting at seeded
/// standard normal latents of shape `[batch, ..item_shape]`.
pub fn sample_loop<D: Denoiser + ?Sized>(
    den: &mut D,
    sched: &NoiseSchedule,
    item_shape: &[usize],
    batch: usize,
    seed: u64,
    cond: Option<&[ConditionToken]>,
    record_final: bool,
) -> Result<SampleOutput> {
    let mut noise = ChainNoise::new(seed, batch, item_shape.iter().product());
    run_chain(den, sched, item_shape, batch, &mut noise, cond, record_final)
}

pub(crate) fn run_chain<D: Denoiser + ?Sized>(
    den: &mut D,
    sched: &NoiseSchedule,
    item_shape: &[usize],
    batch: usize,
    noise: &mut ChainNoise,
    cond: Option<&[ConditionToken]>,
    record_final: bool,
) -> Result<SampleOutput> {
    if batch == 0 {
        return Err(NumError::Config("batch must be >= 1".into()));
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(item_shape);
    let mut x = noise.draw(&shape)?;
    for t in (0..sched.steps()).rev() {
        let z = if t > 0 { Some(noise.draw(&shape)?) } else { None };
        x = p_sample_step(den, &x, t, sched, z.as_ref(), cond)?;
    }
    let images = x.map(|v| v.clamp(0.0, 1.0));
    Ok(SampleOutput { images, raw: record_final.then_some(x) })
}

#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    pub x0: Tensor,
    pub t: Vec<usize>,
    pub epsilon: Tensor,
    pub condition: Option<Vec<ConditionToken>>,
}

impl DiffusionBatch {
    /// Random items with timesteps uniform in `t_range` and fresh noise.
    pub fn draw(data: &[DiffusionItem], size: usize, t_range: Range<usize>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if data.is_empty() || size == 0 || t_range.is_empty() {
            return Err(NumError::Config("diffusion batch needs data, size >= 1 and a non-empty timestep range".into()));
        }
        let idx: Vec<usize> = (0..size).map(|_| rng.gen_range(0..data.len())).collect();
        let images: Vec<Tensor> = idx.iter().map(|&i| data[i].image.clone()).collect();
        let x0 = Tensor::stack(&images)?;
        let t = (0..size).map(|_| rng.gen_range(t_range.clone())).collect();
        let epsilon = Tensor::new(x0.shape().to_vec(), normal_vec(rng, x0.len()))?;
        let condition = if data[0].condition.is_some() {
            Some(idx.iter().map(|&i| data[i].condition.expect("uniformly conditioned corpus")).collect())
        } else {
            None
        };
        Ok(Self { x0, t, epsilon, condition })
    }

    pub fn x_t(&self, sched: &NoiseSchedule) -> Result<Tensor> {
        q_sample_batch(&self.x0, &self.t, &self.epsilon, sched)
    }
}

/// `mean ||eps - eps_theta(x_t, t, c)||^2` on the tape.
pub fn denoising_mse_var<M: EpsModel + ?Sized>(tape: &mut Tape, model: &M, batch: &DiffusionBatch, sched: &NoiseSchedule) -> Result<Var> {
    let xt = tape.constant(batch.x_t(sched)?);
    let pred = model.eps_var(tape, xt, &batch.t, batch.condition.as_deref())?;
    let target = tape.constant(batch.epsilon.clone());
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

pub fn denoising_mse(net: &NoisePredictor, batch: &DiffusionBatch, sched: &NoiseSchedule) -> Result<f64> {
    let mut tape = Tape::new();
    let params = net.params.bind(&mut tape, GradMode::Frozen);
    let model = BoundNet { net, params: &params, mode: net.mode() };
    let loss = denoising_mse_var(&mut tape, &model, batch, sched)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Plain denoising pretraining of every parameter. Returns the loss per step.
pub fn train_base(net: &mut NoisePredictor, data: &[DiffusionItem], sched: &NoiseSchedule, cfg: &BaseTrainConfig) -> Result<Vec<f64>> {
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = rng_for(cfg.seed, stream::TRAIN, 0);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = DiffusionBatch::draw(data, cfg.batch_size, 0..sched.steps(), &mut rng)?;
        let mut tape = Tape::new();
        let params = net.params.bind(&mut tape, GradMode::Trainable);
        let model = BoundNet { net, params: &params, mode: AdapterMode::Base };
        let loss = denoising_mse_var(&mut tape, &model, &batch, sched)?;
        tape.backward(loss)?;
        losses.push(tape.value(loss).data()[0]);
        let grads = params.grads(&tape);
        adam_step(&mut net.params, &grads, &adam, step as u64)?;
    }
    Ok(losses)
}

/// Closed-form optimal predictor for 1-D data `x0 ~ N(m, s^2)`:
/// `eps* = (x_t - sqrt(abar) m) sqrt(1 - abar) / (s^2 abar + 1 - abar)`.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub mean: f64,
    pub var: f64,
    pub sched: NoiseSchedule,
}

impl Denoiser for GaussianOracle {
    fn eps(&mut self, x: &Tensor, t: &[usize], _cond: Option<&[ConditionToken]>) -> Result<Tensor> {
        let per = x.len() / t.len();
        let mut out = Vec::with_capacity(x.len());
        for (r, &tr) in t.iter().enumerate() {
            self.sched.check_t(tr)?;
            let ab = self.sched.alpha_bar[tr];
            let k = (1.0 - ab).sqrt() / (self.var * ab + 1.0 - ab);
            out.extend(x.data()[r * per..(r + 1) * per].iter().map(|v| (v - ab.sqrt() * self.mean) * k));
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_diffusion_dataset;
    use crate::numcore::grad_check;

    fn tiny_arch(cond_dim: usize) -> PredictorArch {
        PredictorArch { image_size: 4, hidden: vec![6], time_dim: 4, cond_dim, num_classes: 4, pixel_hidden: 0 }
    }

    #[test]
    fn two_step_schedule_by_hand() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        assert_eq!(s.beta, vec![0.1, 0.1]);
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        assert!(make_schedule(1, 0.1, 0.1).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn q_sample_branches() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        let x0 = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let one = x0.clone();
        let xt = q_sample(&x0, 1, &one, &s).unwrap();
        assert!((xt.data()[0] - (0.9 + 0.19f64.sqrt())).abs() < 1e-12);
        assert!((xt.data()[0] - 1.33589).abs() < 1e-5);
        let zero = Tensor::zeros(&[1, 1]);
        assert!((q_sample(&x0, 1, &zero, &s).unwrap().data()[0] - 0.9).abs() < 1e-15);
        assert!((q_sample(&zero, 1, &one, &s).unwrap().data()[0] - 0.19f64.sqrt()).abs() < 1e-15);
        assert!(q_sample(&x0, 2, &one, &s).is_err());
    }

    struct Zero;
    impl Denoiser for Zero {
        fn eps(&mut self, x: &Tensor, _t: &[usize], _c: Option<&[ConditionToken]>) -> Result<Tensor> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    struct Fixed(f64);
    impl Denoiser for Fixed {
        fn eps(&mut self, x: &Tensor, _t: &[usize], _c: Option<&[ConditionToken]>) -> Result<Tensor> {
            Ok(Tensor::full(x.shape(), self.0))
        }
    }

    #[test]
    fn zero_prediction_collapses_step() {
        let s = make_schedule(2, 0.19, 0.19).unwrap();
        let x = Tensor::new(vec![1, 1], vec![0.7]).unwrap();
        let z = Tensor::zeros(&[1, 1]);
        let y = p_sample_step(&mut Zero, &x, 1, &s, Some(&z), None).unwrap();
        assert!((y.data()[0] - 0.7 / 0.81f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn step_matches_hand_mean() {
        // beta_1 = 0.19 with abar_1 = 0.81 * 0.81
        let s = make_schedule(2, 0.19, 0.19).unwrap();
        let x = Tensor::new(vec![1, 1], vec![1.2]).unwrap();
        let z = Tensor::zeros(&[1, 1]);
        let y = p_sample_step(&mut Fixed(0.5), &x, 1, &s, Some(&z), None).unwrap();
        let abar = 0.81f64 * 0.81;
        let want = (1.2 - 0.19 / (1.0 - abar).sqrt() * 0.5) / 0.81f64.sqrt();
        assert!((y.data()[0] - want).abs() < 1e-14);
        let y0 = p_sample_step(&mut Fixed(0.5), &x, 0, &s, None, None).unwrap();
        let want0 = (1.2 - 0.19 / 0.19f64.sqrt() * 0.5) / 0.81f64.sqrt();
        assert!((y0.data()[0] - want0).abs() < 1e-14);
    }

    #[test]
    fn noise_contract() {
        let s = make_schedule(4, 0.1, 0.2).unwrap();
        let x = Tensor::zeros(&[2, 3]);
        assert!(p_sample_step(&mut Zero, &x, 2, &s, None, None).is_err());
        assert!(p_sample_step(&mut Zero, &x, 0, &s, Some(&x), None).is_err());
        let bad = Tensor::zeros(&[2, 2]);
        assert!(matches!(p_sample_step(&mut Zero, &x, 2, &s, Some(&bad), None), Err(NumError::Shape { .. })));
    }

    #[test]
    fn oracle_chain_recovers_gaussian() {
        let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
        let (m, var) = (0.5, 0.04);
        let mut oracle = GaussianOracle { mean: m, var, sched: sched.clone() };
        let out = sample_loop(&mut oracle, &sched, &[1], 2000, 3, None, true).unwrap();
        let raw = out.raw.unwrap();
        let n = raw.len() as f64;
        let mu = raw.data().iter().sum::<f64>() / n;
        let v = raw.data().iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0);
        let stderr = (var / n).sqrt();
        assert!((mu - m).abs() < 3.0 * stderr, "mean {mu}");
        assert!((v - var).abs() / var < 0.05, "var {v}");
    }

    #[test]
    fn predictor_is_deterministic_and_shape_preserving() {
        let net = NoisePredictor::new(tiny_arch(0), 1).unwrap();
        let x = Tensor::new(vec![3, 4, 4], normal_vec(&mut rng_for(0, 0, 0), 48)).unwrap();
        let a = predict_noise(&net, &x, &[0, 5, 9], None).unwrap();
        let b = predict_noise(&net, &x, &[0, 5, 9], None).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, b);
    }

    #[test]
    fn condition_contract() {
        let net = NoisePredictor::new(tiny_arch(3), 1).unwrap();
        let x = Tensor::zeros(&[2, 4, 4]);
        assert!(predict_noise(&net, &x, &[1, 1], None).is_err());
        let c = [ConditionToken::new(0, 4).unwrap(), ConditionToken::new(3, 4).unwrap()];
        assert_eq!(predict_noise(&net, &x, &[1, 1], Some(&c)).unwrap().shape(), &[2, 4, 4]);
        let plain = NoisePredictor::new(tiny_arch(0), 1).unwrap();
        assert!(predict_noise(&plain, &x, &[1, 1], Some(&c)).is_err());
    }

    #[test]
    fn predictor_params_grad_check() {
        for pixel_hidden in [0, 3] {
            check_predictor_grads(PredictorArch { pixel_hidden, ..tiny_arch(2) });
        }
    }

    fn check_predictor_grads(arch: PredictorArch) {
        let net = NoisePredictor::new(arch, 4).unwrap();
        let names: Vec<String> = net.params.names().map(String::from).collect();
        let inputs: Vec<Tensor> = names.iter().map(|n| net.params.get(n).unwrap().clone()).collect();
        let x = Tensor::new(vec![2, 4, 4], normal_vec(&mut rng_for(1, 0, 0), 32)).unwrap();
        let cond = [ConditionToken::new(1, 4).unwrap(), ConditionToken::new(2, 4).unwrap()];
        let report = grad_check(
            |tape, vars| {
                let bound = BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
                let xv = tape.constant(x.clone());
                let out = net.forward(tape, &bound, xv, &[3, 7], Some(&cond), AdapterMode::Base)?;
                tape.mean(out)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    struct Stub(f64);
    impl EpsModel for Stub {
        fn eps_var(&self, tape: &mut Tape, x: Var, _t: &[usize], _c: Option<&[ConditionToken]>) -> Result<Var> {
            let _ = x;
            Ok(tape.constant(Tensor::full(tape.shape(x).to_vec().as_slice(), self.0)))
        }
    }

    #[test]
    fn mse_of_perfect_and_offset_predictions() {
        let sched = make_schedule(10, 0.01, 0.2).unwrap();
        let eps = Tensor::new(vec![2, 2, 2], vec![0.3; 8]).unwrap();
        let batch = DiffusionBatch { x0: Tensor::zeros(&[2, 2, 2]), t: vec![1, 4], epsilon: eps, condition: None };
        let mut tape = Tape::new();
        let l = denoising_mse_var(&mut tape, &Stub(0.3), &batch, &sched).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        let l = denoising_mse_var(&mut tape, &Stub(1.3), &batch, &sched).unwrap();
        assert!((tape.value(l).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn base_training_reduces_loss() {
        let arch = PredictorArch { image_size: 8, hidden: vec![32], time_dim: 8, cond_dim: 0, num_classes: 4, pixel_hidden: 0 };
        let mut net = NoisePredictor::new(arch, 0).unwrap();
        let data = build_diffusion_dataset(32, 8, false, 0).unwrap();
        let sched = make_schedule(20, 1e-2, 0.3).unwrap();
        let losses = train_base(&mut net, &data, &sched, &BaseTrainConfig { steps: 300, batch_size: 16, lr: 2e-3, seed: 1 }).unwrap();
        let head: f64 = losses[..30].iter().sum::<f64>() / 30.0;
        let tail: f64 = losses[270..].iter().sum::<f64>() / 30.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn sampling_is_seeded_and_clipped() {
        let net = NoisePredictor::new(tiny_arch(0), 2).unwrap();
        let sched = make_schedule(10, 0.01, 0.2).unwrap();
        let mut r = NoGradRunner::new(&net, AdapterMode::Base);
        let a = sample_loop(&mut r, &sched, &[4, 4], 3, 7, None, false).unwrap().images;
        let b = sample_loop(&mut r, &sched, &[4, 4], 3, 7, None, false).unwrap().images;
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // item i does not depend on batch size
        let c = sample_loop(&mut r, &sched, &[4, 4], 1, 7, None, false).unwrap().images;
        assert_eq!(&a.data()[..16], c.data());
    }
}
