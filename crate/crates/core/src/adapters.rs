//! Low-rank adapters on the predictor's affine layers.
//!
//! Each layer `l{i}` gains `l{i}.lora_a` (`[r, in]`) and `l{i}.lora_b`
//! (`[out, r]`); its output becomes `W x + b + (scale / r) B (A x)`. The
//! base entries are frozen in the predictor's parameter store.

use serde::{Deserialize, Serialize};

use crate::diffusion::{layer_name, NoGradRunner, Denoiser, NoisePredictor};
use crate::data::ConditionToken;
use crate::numcore::{BoundParams, Var};
use crate::rng::{normal_vec, rng_for, stream};
use crate::{NumError, Tape, Tensor};

type Result<T> = std::result::Result<T, NumError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    Base,
    Adapted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub layers: Vec<String>,
    pub rank: usize,
    pub scale: f64,
    pub mode: AdapterMode,
    /// When set, the deltas only act on rows with `t < gate`.
    pub gate: Option<usize>,
}

impl AdapterSet {
    pub fn factor(&self) -> f64 {
        self.scale / self.rank as f64
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers.iter().flat_map(|l| [format!("{l}.lora_a"), format!("{l}.lora_b")]).collect()
    }

    pub fn active(&self, t: usize) -> bool {
        self.gate.map_or(true, |g| t < g)
    }
}

/// Adds zero-initialized adapters to every affine layer and freezes the
/// base entries. `A ~ N(0, 1/in)`, `B = 0`.
pub fn attach_adapters(net: &mut NoisePredictor, rank: usize, scale: f64, seed: u64) -> Result<AdapterSet> {
    if rank == 0 {
        return Err(NumError::Config("adapter rank must be >= 1".into()));
    }
    if net.adapters.is_some() {
        return Err(NumError::Config("adapters already attached".into()));
    }
    if !scale.is_finite() {
        return Err(NumError::Config(format!("adapter scale must be finite, got {scale}")));
    }
    let dims = net.arch.layer_dims();
    for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
        if rank > fan_in.min(fan_out) {
            return Err(NumError::Config(format!(
                "rank {rank} exceeds min(out, in) = {} of layer {}",
                fan_in.min(fan_out),
                layer_name(i)
            )));
        }
    }
    net.params.freeze_all();
    let mut rng = rng_for(seed, stream::INIT, 1);
    let mut layers = Vec::with_capacity(dims.len());
    for (i, (fan_in, fan_out)) in dims.into_iter().enumerate() {
        let name = layer_name(i);
        let std = (1.0 / fan_in as f64).sqrt();
        let a = normal_vec(&mut rng, rank * fan_in).into_iter().map(|v| v * std).collect();
        net.params.insert(format!("{name}.lora_a"), Tensor::new(vec![rank, fan_in], a)?)?;
        net.params.insert(format!("{name}.lora_b"), Tensor::zeros(&[fan_out, rank]))?;
        layers.push(name);
    }
    let set = AdapterSet { layers, rank, scale, mode: AdapterMode::Adapted, gate: None };
    net.adapters = Some(set.clone());
    Ok(set)
}

/// `(scale / r) B (A h)` for layer `name`, masked to rows inside the gate.
/// `None` when no row is active.
pub(crate) fn lora_delta(
    tape: &mut Tape,
    p: &BoundParams,
    set: &AdapterSet,
    name: &str,
    h: Var,
    t: &[usize],
) -> Result<Option<Var>> {
    let active: Vec<bool> = t.iter().map(|&ti| set.active(ti)).collect();
    if !active.iter().any(|&a| a) {
        return Ok(None);
    }
    let a = tape.affine(h, p.get(&format!("{name}.lora_a"))?, None)?;
    let d = tape.affine(a, p.get(&format!("{name}.lora_b"))?, None)?;
    let d = tape.scale(d, set.factor())?;
    if active.iter().all(|&a| a) {
        return Ok(Some(d));
    }
    let shape = tape.shape(d).to_vec();
    let width = shape[1];
    let mask: Vec<f64> = active.iter().flat_map(|&a| std::iter::repeat(if a { 1.0 } else { 0.0 }).take(width)).collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    Ok(Some(tape.mul(d, mask)?))
}

/// A single adapted affine layer, independent of any network.
#[derive(Debug, Clone)]
pub struct LoraLayer {
    pub base_weight: Tensor,
    pub base_bias: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub scale: f64,
}

/// Tape variables of one [`LoraLayer`].
#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub w: Var,
    pub bias: Var,
    pub a: Var,
    pub b: Var,
}

impl LoraLayer {
    pub fn new(base_weight: Tensor, base_bias: Tensor, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        let ws = base_weight.shape();
        if ws.len() != 2 || base_bias.shape() != [ws[0]] {
            return Err(NumError::Shape { op: "lora", detail: format!("weight {ws:?} with bias {:?}", base_bias.shape()) });
        }
        let (out, fan_in) = (ws[0], ws[1]);
        if rank == 0 || rank > out.min(fan_in) {
            return Err(NumError::Config(format!("rank {rank} outside [1, {}]", out.min(fan_in))));
        }
        let std = (1.0 / fan_in as f64).sqrt();
        let a = normal_vec(&mut rng_for(seed, stream::INIT, 2), rank * fan_in).into_iter().map(|v| v * std).collect();
        Ok(Self { base_weight, base_bias, a: Tensor::new(vec![rank, fan_in], a)?, b: Tensor::zeros(&[out, rank]), rank, scale })
    }

    /// Places the layer on the tape; only `A` and `B` require gradients.
    pub fn bind(&self, tape: &mut Tape) -> LoraVars {
        LoraVars {
            w: tape.constant(self.base_weight.clone()),
            bias: tape.constant(self.base_bias.clone()),
            a: tape.leaf(self.a.clone(), true),
            b: tape.leaf(self.b.clone(), true),
        }
    }

    pub fn forward_var(&self, tape: &mut Tape, vars: LoraVars, x: Var) -> Result<Var> {
        let base = tape.affine(x, vars.w, Some(vars.bias))?;
        let ax = tape.affine(x, vars.a, None)?;
        let bax = tape.affine(ax, vars.b, None)?;
        let d = tape.scale(bax, self.scale / self.rank as f64)?;
        tape.add(base, d)
    }
}

/// `W x + b + (scale / r) B (A x)` evaluated without gradients.
pub fn adapted_forward(layer: &LoraLayer, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = layer.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = layer.forward_var(&mut tape, vars, xv)?;
    Ok(tape.value(out).clone())
}

/// `eps_base`: the predictor with every delta bypassed.
pub fn base_forward(net: &NoisePredictor, x_t: &Tensor, t: &[usize], cond: Option<&[ConditionToken]>) -> Result<Tensor> {
    NoGradRunner::new(net, AdapterMode::Base).eps(x_t, t, cond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, predict_noise, sample_loop, PredictorArch};
    use crate::numcore::{grad_check, GradMode};
    use crate::rng::normal_vec;

    fn arch() -> PredictorArch {
        PredictorArch { image_size: 4, hidden: vec![8, 6], time_dim: 4, cond_dim: 0, num_classes: 4, pixel_hidden: 0 }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), normal_vec(&mut rng_for(seed, 99, 0), n)).unwrap()
    }

    #[test]
    fn zero_init_is_identity() {
        let mut net = NoisePredictor::new(arch(), 0).unwrap();
        attach_adapters(&mut net, 2, 1.0, 1).unwrap();
        for seed in 0..10 {
            let x = random(&[2, 4, 4], seed);
            let t = [seed as usize % 5, 3];
            assert_eq!(predict_noise(&net, &x, &t, None).unwrap(), base_forward(&net, &x, &t, None).unwrap());
        }
    }

    #[test]
    fn trainable_count_matches_rank_formula() {
        let mut net = NoisePredictor::new(arch(), 0).unwrap();
        attach_adapters(&mut net, 3, 1.0, 1).unwrap();
        let want: usize = net.arch.layer_dims().iter().map(|(i, o)| 3 * (i + o)).sum();
        assert_eq!(net.params.trainable_count(), want);
    }

    #[test]
    fn rank_boundary() {
        // smallest layer is 8 -> 6, so 6 is the largest valid rank
        let mut net = NoisePredictor::new(arch(), 0).unwrap();
        assert!(attach_adapters(&mut net, 6, 1.0, 1).is_ok());
        let mut net = NoisePredictor::new(arch(), 0).unwrap();
        let err = attach_adapters(&mut net, 7, 1.0, 1).unwrap_err();
        assert!(err.to_string().contains("l1"), "{err}");
        let mut net = NoisePredictor::new(arch(), 0).unwrap();
        assert!(attach_adapters(&mut net, 0, 1.0, 1).is_err());
    }

    #[test]
    fn scalar_layer_by_hand() {
        let mut layer = LoraLayer::new(Tensor::new(vec![1, 1], vec![1.0]).unwrap(), Tensor::zeros(&[1]), 1, 1.0, 0).unwrap();
        layer.a = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        layer.b = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let y = adapted_forward(&layer, &Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn zero_b_layer_equals_base_affine() {
        let w = random(&[3, 5], 1);
        let b = random(&[3], 2);
        let layer = LoraLayer::new(w.clone(), b.clone(), 2, 1.0, 3).unwrap();
        let x = random(&[4, 5], 4);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w), tape.constant(b));
        let base = tape.affine(xv, wv, Some(bv)).unwrap();
        assert_eq!(&adapted_forward(&layer, &x).unwrap(), tape.value(base));
    }

    #[test]
    fn layer_grads_reach_only_adapters() {
        let mut layer = LoraLayer::new(random(&[3, 5], 1), random(&[3], 2), 2, 0.5, 3).unwrap();
        layer.b = random(&[3, 2], 5);
        let x = random(&[4, 5], 6);
        let report = grad_check(
            |tape, v| {
                let mut l = layer.clone();
                l.a = tape.value(v[0]).clone();
                l.b = tape.value(v[1]).clone();
                let vars = LoraVars { w: tape.constant(l.base_weight.clone()), bias: tape.constant(l.base_bias.clone()), a: v[0], b: v[1] };
                let xv = tape.constant(x.clone());
                let y = l.forward_var(tape, vars, xv)?;
                let y = tape.tanh(y)?;
                tape.mean(y)
            },
            &[layer.a.clone(), layer.b.clone()],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape);
        let xv = tape.constant(x);
        let y = layer.forward_var(&mut tape, vars, xv).unwrap();
        let m = tape.mean(y).unwrap();
        tape.backward(m).unwrap();
        assert!(tape.grad(vars.w).is_none());
        assert!(tape.grad(vars.a).is_some());
    }

    #[test]
    fn base_entries_get_no_gradient() {
        let mut net = NoisePredictor::new(arch(), 0).unwrap();
        attach_adapters(&mut net, 2, 1.0, 1).unwrap();
        let mut tape = Tape::new();
        let p = net.params.bind(&mut tape, GradMode::Trainable);
        let x = tape.constant(random(&[2, 4, 4], 3));
        let y = net.forward(&mut tape, &p, x, &[1, 2], None, AdapterMode::Adapted).unwrap();
        let m = tape.mean(y).unwrap();
        tape.backward(m).unwrap();
        let grads = p.grads(&tape);
        assert!(grads.keys().all(|k| k.contains(".lora_")));
        assert_eq!(grads.len(), 6);
    }

    #[test]
    fn gate_limits_delta_rows() {
        let mut net = NoisePredictor::new(arch(), 0).unwrap();
        attach_adapters(&mut net, 2, 1.0, 1).unwrap();
        let b = random(&[16, 2], 8);
        net.params.set("l2.lora_b", b).unwrap();
        net.adapters.as_mut().unwrap().gate = Some(3);
        let x = random(&[2, 4, 4], 9);
        let adapted = predict_noise(&net, &x, &[1, 5], None).unwrap();
        let base = base_forward(&net, &x, &[1, 5], None).unwrap();
        assert_ne!(adapted.data()[..16], base.data()[..16]);
        assert_eq!(adapted.data()[16..], base.data()[16..]);
    }

    #[test]
    fn sampling_matches_before_training() {
        let mut net = NoisePredictor::new(arch(), 0).unwrap();
        let sched = make_schedule(10, 0.01, 0.2).unwrap();
        attach_adapters(&mut net, 2, 1.0, 1).unwrap();
        let mut base = NoGradRunner::new(&net, AdapterMode::Base);
        let a = sample_loop(&mut base, &sched, &[4, 4], 3, 5, None, false).unwrap();
        let mut adapted = NoGradRunner::new(&net, AdapterMode::Adapted);
        let b = sample_loop(&mut adapted, &sched, &[4, 4], 3, 5, None, false).unwrap();
        assert_eq!(a.images, b.images);
    }
}
