//! Anchor-constrained fine-tuning of the adapters against a frozen scorer.
//!
//! Each step minimizes `L_mse + lambda1 L_anchor + lambda2 L_quality`:
//! denoising error over all timesteps, squared distance to the frozen base
//! prediction inside the late window, and `1 - score` of images produced by
//! the reverse chain with gradients through its last `guided_steps` steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterMode;
use crate::data::{ConditionToken, DiffusionItem};
use crate::diffusion::{
    ancestral_update_var, denoising_mse_var, p_sample_step, BoundNet, ChainNoise, DiffusionBatch,
    EpsModel, NoGradRunner, NoiseSchedule, NoisePredictor,
};
use crate::iqa::QualityModel;
use crate::numcore::{adam_step, AdamConfig, GradMode, Var};
use crate::rng::{derive_seed, normal_vec, rng_for, stream};
use crate::{NumError, Tape, Tensor};

type Result<T> = std::result::Result<T, NumError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcpoConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Guidance and anchor window: timesteps `t < t_late_max`.
    pub t_late_max: usize,
    /// Reverse steps differentiated through when producing guided images.
    pub guided_steps: usize,
    pub mse_batch: usize,
    pub guide_batch: usize,
    pub anchor_batch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Filled from the run seed, not from configuration files.
    #[serde(skip)]
    pub seed: u64,
    /// Chain states cached at the window boundary for guidance rollouts.
    pub guide_pool: usize,
    pub probe_size: usize,
    /// Probe the guided score every this many steps (and at the last step).
    pub probe_every: usize,
}

impl Default for AcpoConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            t_late_max: 10,
            guided_steps: 5,
            mse_batch: 16,
            guide_batch: 8,
            anchor_batch: 16,
            steps: 1000,
            lr: 1e-2,
            seed: 0,
            guide_pool: 512,
            probe_size: 32,
            probe_every: 10,
        }
    }
}

impl AcpoConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        let bad = |m: String| Err(NumError::Config(m));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return bad(format!("lambda1 and lambda2 must be non-negative, got {} and {}", self.lambda1, self.lambda2));
        }
        if self.t_late_max == 0 || self.t_late_max > total_steps {
            return bad(format!("t_late_max must lie in [1, {total_steps}], got {}", self.t_late_max));
        }
        if self.guided_steps == 0 || self.guided_steps > self.t_late_max {
            return bad(format!("guided_steps must lie in [1, t_late_max = {}], got {}", self.t_late_max, self.guided_steps));
        }
        if self.mse_batch == 0 || self.guide_batch == 0 || self.anchor_batch == 0 || self.probe_size == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if self.guide_pool == 0 || self.probe_every == 0 {
            return bad("guide_pool and probe_every must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub l_mse: f64,
    pub l_anchor: f64,
    pub l_quality: f64,
    pub l_total: f64,
    /// Mean guiding-scorer score on the fixed probe set; empty between probes.
    pub guided_score: Option<f64>,
    /// RMS of `eps_theta - eps_base` on this step's anchor batch.
    pub anchor_drift: f64,
}

/// `mean(1 - Q(x, c))` on the tape.
pub fn quality_loss_var<Q: QualityModel + ?Sized>(tape: &mut Tape, q: &Q, images: Var, cond: Option<&[ConditionToken]>) -> Result<Var> {
    let s = q.quality_var(tape, images, cond)?;
    let m = tape.mean(s)?;
    let neg = tape.scale(m, -1.0)?;
    tape.offset(neg, 1.0)
}

pub fn quality_loss<Q: QualityModel + ?Sized>(q: &Q, images: &Tensor, cond: Option<&[ConditionToken]>) -> Result<f64> {
    if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(NumError::Config("quality loss expects images in [0, 1]".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let l = quality_loss_var(&mut tape, q, x, cond)?;
    Ok(tape.value(l).data()[0])
}

/// `mean ||eps_adapted - detach(eps_base)||^2` for timesteps inside the window.
pub fn anchor_loss_var<A: EpsModel + ?Sized, B: EpsModel + ?Sized>(
    tape: &mut Tape,
    adapted: &A,
    base: &B,
    x_t: Var,
    t: &[usize],
    cond: Option<&[ConditionToken]>,
    t_late_max: usize,
) -> Result<Var> {
    if let Some(&bad) = t.iter().find(|&&ti| ti >= t_late_max) {
        return Err(NumError::Config(format!("anchor timestep {bad} outside the window t < {t_late_max}")));
    }
    let eps = adapted.eps_var(tape, x_t, t, cond)?;
    let anchor = base.eps_var(tape, x_t, t, cond)?;
    let anchor = tape.detach(anchor);
    let d = tape.sub(eps, anchor)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Anchor loss of an adapted predictor against its own base weights.
pub fn anchor_loss(net: &NoisePredictor, x_t: &Tensor, t: &[usize], cond: Option<&[ConditionToken]>, t_late_max: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let p = net.params.bind(&mut tape, GradMode::Frozen);
    let adapted = BoundNet { net, params: &p, mode: AdapterMode::Adapted };
    let base = BoundNet { net, params: &p, mode: AdapterMode::Base };
    let x = tape.constant(x_t.clone());
    let l = anchor_loss_var(&mut tape, &adapted, &base, x, t, cond, t_late_max)?;
    Ok(tape.value(l).data()[0])
}

fn check_lambdas(lambda1: f64, lambda2: f64) -> Result<()> {
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(NumError::Config(format!("lambda1 and lambda2 must be non-negative, got {lambda1} and {lambda2}")));
    }
    Ok(())
}

/// `l_mse + lambda1 l_anchor + lambda2 l_quality`.
pub fn total_loss(lambda1: f64, lambda2: f64, l_mse: f64, l_anchor: f64, l_quality: f64) -> Result<f64> {
    check_lambdas(lambda1, lambda2)?;
    Ok(l_mse + lambda1 * l_anchor + lambda2 * l_quality)
}

pub fn total_loss_var(tape: &mut Tape, lambda1: f64, lambda2: f64, l_mse: Var, l_anchor: Var, l_quality: Var) -> Result<Var> {
    check_lambdas(lambda1, lambda2)?;
    let a = tape.scale(l_anchor, lambda1)?;
    let q = tape.scale(l_quality, lambda2)?;
    let s = tape.add(l_mse, a)?;
    tape.add(s, q)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub reports: Vec<StepReport>,
    /// RMS anchor drift on a fixed evaluation batch after the last step.
    pub final_drift: f64,
    pub base_checksum: String,
    pub scorer_checksum: String,
}

impl FinetuneOutcome {
    pub fn final_guided_score(&self) -> Option<f64> {
        self.reports.iter().rev().find_map(|r| r.guided_score)
    }

    pub fn initial_guided_score(&self) -> Option<f64> {
        self.reports.iter().find_map(|r| r.guided_score)
    }
}

/// Chain states entering the reverse step `start - 1`, with their conditions.
struct StartStates {
    states: Tensor,
    conds: Option<Vec<ConditionToken>>,
    start: usize,
}

fn random_conditions(net: &NoisePredictor, n: usize, seed: u64) -> Option<Vec<ConditionToken>> {
    (net.arch.cond_dim > 0).then(|| {
        let mut rng = rng_for(seed, stream::GUIDE, u64::MAX);
        let k = net.arch.num_classes;
        (0..n).map(|_| ConditionToken::new(rng.gen_range(0..k), k).expect("in range")).collect()
    })
}

/// Runs the base chain from `T - 1` down to `start`. Outside the gate the
/// adapters are inactive, so these states do not change during training.
fn window_states(net: &NoisePredictor, sched: &NoiseSchedule, n: usize, seed: u64, start: usize) -> Result<StartStates> {
    let size = net.arch.image_size;
    let shape = [n, size, size];
    let conds = random_conditions(net, n, seed);
    let mut noise = ChainNoise::new(seed, n, size * size);
    let mut x = noise.draw(&shape)?;
    let mut runner = NoGradRunner::new(net, AdapterMode::Base);
    for t in (start..sched.steps()).rev() {
        let z = noise.draw(&shape)?;
        x = p_sample_step(&mut runner, &x, t, sched, Some(&z), conds.as_deref())?;
    }
    Ok(StartStates { states: x, conds, start })
}

fn pick(states: &StartStates, idx: &[usize]) -> Result<(Tensor, Option<Vec<ConditionToken>>)> {
    let rows: Vec<Tensor> = idx.iter().map(|&i| states.states.rows(i, 1)).collect::<Result<_>>()?;
    let mut x = Tensor::stack(&rows)?;
    let s = x.shape().to_vec();
    x = x.reshape(&[s[0], s[2], s[3]])?;
    Ok((x, states.conds.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect())))
}

/// Adapted reverse steps `start - 1 .. until` without gradients.
fn advance(
    net: &NoisePredictor,
    sched: &NoiseSchedule,
    mut x: Tensor,
    from: usize,
    until: usize,
    cond: Option<&[ConditionToken]>,
    mut noise: impl FnMut(&[usize]) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut runner = NoGradRunner::new(net, AdapterMode::Adapted);
    for t in (until..from).rev() {
        let z = if t > 0 { Some(noise(x.shape())?) } else { None };
        x = p_sample_step(&mut runner, &x, t, sched, z.as_ref(), cond)?;
    }
    Ok(x)
}

fn probe_score<Q: QualityModel + ?Sized>(
    net: &NoisePredictor,
    scorer: &Q,
    sched: &NoiseSchedule,
    probe: &StartStates,
    seed: u64,
) -> Result<f64> {
    let n = probe.states.shape()[0];
    let mut noise = ChainNoise::new(seed, n, probe.states.len() / n);
    let x = advance(net, sched, probe.states.clone(), probe.start, 0, probe.conds.as_deref(), |s| noise.draw(s))?;
    let images = x.map(|v| v.clamp(0.0, 1.0));
    let mut tape = Tape::new();
    let xv = tape.constant(images);
    let cond = if scorer.conditional() { probe.conds.as_deref() } else { None };
    let s = scorer.quality_var(&mut tape, xv, cond)?;
    let v = tape.value(s).data();
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// RMS of `eps_theta - eps_base` on a fixed batch inside the window.
pub fn anchor_drift(net: &NoisePredictor, sched: &NoiseSchedule, data: &[DiffusionItem], t_late_max: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, stream::PROBE, 2);
    let batch = DiffusionBatch::draw(data, 64, 0..t_late_max, &mut rng)?;
    Ok(anchor_loss(net, &batch.x_t(sched)?, &batch.t, batch.condition.as_deref(), t_late_max)?.sqrt())
}

/// Trains the attached adapters; base and scorer parameters stay frozen and
/// are verified by checksum at the end.
pub fn finetune_run<Q: QualityModel + ?Sized>(
    net: &mut NoisePredictor,
    scorer: &Q,
    sched: &NoiseSchedule,
    data: &[DiffusionItem],
    cfg: &AcpoConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate(sched.steps())?;
    let adapters = net.adapters.as_mut().ok_or_else(|| NumError::Config("finetune_run needs attached adapters".into()))?;
    adapters.mode = AdapterMode::Adapted;
    adapters.gate = (cfg.t_late_max < sched.steps()).then_some(cfg.t_late_max);
    let base_checksum = net.params.frozen_checksum();
    let scorer_checksum = scorer.fingerprint();
    let pixels = net.arch.pixels();

    let start = cfg.t_late_max;
    let pool = if start < sched.steps() {
        Some(window_states(net, sched, cfg.guide_pool, derive_seed(cfg.seed, stream::GUIDE, 0), start)?)
    } else {
        None
    };
    let probe_seed = derive_seed(cfg.seed, stream::PROBE, 0);
    let probe = window_states(net, sched, cfg.probe_size, probe_seed, start)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut reports = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let guided_score = if step % cfg.probe_every == 0 || step + 1 == cfg.steps {
            Some(probe_score(net, scorer, sched, &probe, derive_seed(probe_seed, 1, 0))?)
        } else {
            None
        };

        // guidance rollout: constant prefix, then a differentiated tail
        let mut grng = rng_for(cfg.seed, stream::GUIDE, step as u64 + 1);
        let (x_start, gcond) = match &pool {
            Some(pool) => {
                let idx: Vec<usize> = (0..cfg.guide_batch).map(|_| grng.gen_range(0..cfg.guide_pool)).collect();
                pick(pool, &idx)?
            }
            None => {
                let size = net.arch.image_size;
                let x = Tensor::new(vec![cfg.guide_batch, size, size], normal_vec(&mut grng, cfg.guide_batch * pixels))?;
                (x, random_conditions(net, cfg.guide_batch, derive_seed(cfg.seed, stream::GUIDE, step as u64 + 1)))
            }
        };
        let x_tail = advance(net, sched, x_start, start, cfg.guided_steps, gcond.as_deref(), |s| {
            Tensor::new(s.to_vec(), normal_vec(&mut grng, s.iter().product()))
        })?;
        let tail_noise: Vec<Option<Tensor>> = (0..cfg.guided_steps)
            .rev()
            .map(|t| (t > 0).then(|| Tensor::new(x_tail.shape().to_vec(), normal_vec(&mut grng, x_tail.len()))).transpose())
            .collect::<Result<_>>()?;

        let mut tape = Tape::new();
        let p = net.params.bind(&mut tape, GradMode::Trainable);
        let adapted = BoundNet { net, params: &p, mode: AdapterMode::Adapted };
        let base = BoundNet { net, params: &p, mode: AdapterMode::Base };

        let mut mrng = rng_for(cfg.seed, stream::TRAIN, step as u64);
        let mse_batch = DiffusionBatch::draw(data, cfg.mse_batch, 0..sched.steps(), &mut mrng)?;
        let l_mse = denoising_mse_var(&mut tape, &adapted, &mse_batch, sched)?;

        let mut x = tape.constant(x_tail);
        for (k, t) in (0..cfg.guided_steps).rev().enumerate() {
            let eps = adapted.eps_var(&mut tape, x, &vec![t; cfg.guide_batch], gcond.as_deref())?;
            x = ancestral_update_var(&mut tape, x, eps, t, sched, tail_noise[k].as_ref())?;
        }
        let images = tape.clip(x, 0.0, 1.0)?;
        let qcond = if scorer.conditional() { gcond.as_deref() } else { None };
        let l_quality = quality_loss_var(&mut tape, scorer, images, qcond)?;

        let mut arng = rng_for(cfg.seed, stream::ANCHOR, step as u64);
        let abatch = DiffusionBatch::draw(data, cfg.anchor_batch, 0..cfg.t_late_max, &mut arng)?;
        let xa = tape.constant(abatch.x_t(sched)?);
        let l_anchor = anchor_loss_var(&mut tape, &adapted, &base, xa, &abatch.t, abatch.condition.as_deref(), cfg.t_late_max)?;

        let total = total_loss_var(&mut tape, cfg.lambda1, cfg.lambda2, l_mse, l_anchor, l_quality)?;
        tape.backward(total)?;
        let v = |var: Var| tape.value(var).data()[0];
        reports.push(StepReport {
            step,
            l_mse: v(l_mse),
            l_anchor: v(l_anchor),
            l_quality: v(l_quality),
            l_total: v(total),
            guided_score,
            anchor_drift: v(l_anchor).sqrt(),
        });
        let grads = p.grads(&tape);
        adam_step(&mut net.params, &grads, &adam, step as u64 + 1)?;
    }

    if net.params.frozen_checksum() != base_checksum {
        return Err(NumError::Invariant("frozen base parameters changed during fine-tuning".into()));
    }
    if scorer.fingerprint() != scorer_checksum {
        return Err(NumError::Invariant("scorer parameters changed during fine-tuning".into()));
    }
    let final_drift = anchor_drift(net, sched, data, cfg.t_late_max, cfg.seed)?;
    Ok(FinetuneOutcome { reports, final_drift, base_checksum, scorer_checksum })
}
