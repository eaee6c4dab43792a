//! Differentiable no-reference quality scorers.
//!
//! * two-stream: `sigmoid(F_fuse([Phi_rgb(x), Phi_grad(grad x)]))`
//! * conditional: `sigmoid(b1 S_sem + b2 S_str + b3)`, with `S_sem` the cosine
//!   of image and condition embeddings and `S_str` the layer-weighted mean
//!   cosine between patch tokens and their mean (global) token.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ConditionToken, IqaItem};
use crate::numcore::{adam_step, AdamConfig, BoundParams, GradMode, Var};
use crate::rng::{normal_vec, rng_for, stream};
use crate::{NumError, ParamStore, Tape, Tensor};

type Result<T> = std::result::Result<T, NumError>;

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
const MAGNITUDE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerVariant {
    TwoStream,
    Conditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub variant: ScorerVariant,
    pub image_size: usize,
    /// Two-stream: channels of each stream's convolution.
    pub stream_channels: usize,
    /// Two-stream: width of each stream's feature vector.
    pub stream_features: usize,
    pub fuse_hidden: usize,
    /// Conditional: channels of the three encoder layers.
    pub encoder_channels: [usize; 3],
    pub patch_grid: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Weights over the last two encoder layers; normalized on use.
    pub layer_weights: Vec<f64>,
    pub combine_init: [f64; 3],
}

impl ScorerConfig {
    pub fn two_stream(image_size: usize) -> Self {
        Self { variant: ScorerVariant::TwoStream, ..Self::conditional(image_size, 4) }
    }

    pub fn conditional(image_size: usize, num_classes: usize) -> Self {
        Self {
            variant: ScorerVariant::Conditional,
            image_size,
            stream_channels: 4,
            stream_features: 16,
            fuse_hidden: 16,
            encoder_channels: [4, 8, 8],
            patch_grid: 4,
            embed_dim: 8,
            num_classes,
            layer_weights: vec![0.5, 0.5],
            combine_init: [1.0, 1.0, 0.0],
        }
    }

    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        normalize_weights(&self.layer_weights)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 8 || s % 4 != 0 {
            return Err(NumError::Config(format!("scorer image size must be a multiple of 4 and >= 8, got {s}")));
        }
        match self.variant {
            ScorerVariant::TwoStream => {
                if self.stream_channels == 0 || self.stream_features == 0 || self.fuse_hidden == 0 {
                    return Err(NumError::Config("two-stream widths must be >= 1".into()));
                }
            }
            ScorerVariant::Conditional => {
                if self.encoder_channels.contains(&0) || self.embed_dim == 0 || self.num_classes == 0 {
                    return Err(NumError::Config("conditional widths must be >= 1".into()));
                }
                if self.patch_grid == 0 || (s / 4) % self.patch_grid != 0 {
                    return Err(NumError::Config(format!("patch grid {} must divide {}", self.patch_grid, s / 4)));
                }
                if self.layer_weights.len() != 2 {
                    return Err(NumError::Config("layer_weights covers exactly the last two encoder layers".into()));
                }
                self.normalized_weights()?;
            }
        }
        Ok(())
    }
}

fn normalize_weights(w: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = w.iter().sum();
    if w.is_empty() || w.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) || total <= 0.0 {
        return Err(NumError::Config(format!("layer weights must be non-negative with a positive sum, got {w:?}")));
    }
    Ok(w.iter().map(|a| a / total).collect())
}

/// Sobel gradient magnitude `sqrt(gx^2 + gy^2 + 1e-12)` of `[B, H, W]` images.
pub fn gradient_map_var(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(NumError::Shape { op: "gradient_map", detail: format!("expected [B, H, W], got {shape:?}") });
    }
    let (b, h, w) = (shape[0], shape[1], shape[2]);
    let planes = tape.reshape(x, &[b, 1, h, w])?;
    let kernel: Vec<f64> = SOBEL_X.iter().chain(&SOBEL_Y).copied().collect();
    let k = tape.constant(Tensor::new(vec![2, 1, 3, 3], kernel)?);
    let g = tape.conv2d(planes, k, None)?;
    let sq = tape.square(g)?;
    let energy = tape.sum_axis(sq, 1)?;
    let energy = tape.offset(energy, MAGNITUDE_FLOOR)?;
    tape.sqrt(energy)
}

/// Gradient map of one `[H, W]` image or a `[B, H, W]` batch.
pub fn gradient_map(x: &Tensor) -> Result<Tensor> {
    let single = x.shape().len() == 2;
    let batch = if single { x.clone().reshape(&[1, x.shape()[0], x.shape()[1]])? } else { x.clone() };
    let mut tape = Tape::new();
    let xv = tape.constant(batch);
    let g = gradient_map_var(&mut tape, xv)?;
    let out = tape.value(g).clone();
    if single {
        out.reshape(x.shape())
    } else {
        Ok(out)
    }
}

/// Cosine of image and condition embeddings, row-wise.
pub fn semantic_from_embeddings(tape: &mut Tape, img: Var, text: Var) -> Result<Var> {
    tape.cosine(img, text)
}

/// `sum_l alpha_l mean_k cos(p_k, g)` where each layer is `[B, K, C]` patch
/// tokens and `g` is their mean. Returns `[B]`.
pub fn structural_from_tokens(tape: &mut Tape, layers: &[Var], alpha: &[f64]) -> Result<Var> {
    if layers.len() != alpha.len() || layers.is_empty() {
        return Err(NumError::Config(format!("{} token layers for {} weights", layers.len(), alpha.len())));
    }
    let alpha = normalize_weights(alpha)?;
    let mut total: Option<Var> = None;
    for (&tokens, &a) in layers.iter().zip(&alpha) {
        let k = tape.shape(tokens)[1];
        let global = tape.mean_axis(tokens, 1)?;
        let global = tape.expand(global, 1, k)?;
        let cos = tape.cosine(tokens, global)?;
        let layer = tape.mean_axis(cos, 1)?;
        let weighted = tape.scale(layer, a)?;
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// `sigmoid(b1 s_sem + b2 s_str + b3)` for plain numbers.
pub fn combine_scores(beta: [f64; 3], s_sem: f64, s_str: f64) -> f64 {
    1.0 / (1.0 + (-(beta[0] * s_sem + beta[1] * s_str + beta[2])).exp())
}

/// Sub-scores of the conditional variant, each `[B]`.
#[derive(Debug, Clone, Copy)]
pub struct ConditionalParts {
    pub semantic: Var,
    pub structural: Var,
    pub score: Var,
}

#[derive(Debug, Clone)]
pub struct Scorer {
    pub config: ScorerConfig,
    pub params: ParamStore,
}

fn conv_init(rng: &mut rand_chacha::ChaCha8Rng, out: usize, cin: usize) -> Result<Tensor> {
    let std = (1.0 / (cin * 9) as f64).sqrt();
    Tensor::new(vec![out, cin, 3, 3], normal_vec(rng, out * cin * 9).into_iter().map(|v| v * std).collect())
}

fn affine_init(rng: &mut rand_chacha::ChaCha8Rng, out: usize, fan_in: usize) -> Result<Tensor> {
    let std = (1.0 / fan_in as f64).sqrt();
    Tensor::new(vec![out, fan_in], normal_vec(rng, out * fan_in).into_iter().map(|v| v * std).collect())
}

impl Scorer {
    pub fn new(config: ScorerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, stream::INIT, 10);
        let mut p = ParamStore::new();
        match config.variant {
            ScorerVariant::TwoStream => {
                let c = config.stream_channels;
                let flat = c * (config.image_size / 4).pow(2);
                for s in ["rgb", "grad"] {
                    p.insert(format!("{s}.conv.k"), conv_init(&mut rng, c, 1)?)?;
                    p.insert(format!("{s}.conv.b"), Tensor::zeros(&[c]))?;
                    p.insert(format!("{s}.fc.w"), affine_init(&mut rng, config.stream_features, flat)?)?;
                    p.insert(format!("{s}.fc.b"), Tensor::zeros(&[config.stream_features]))?;
                }
                p.insert("fuse.w1", affine_init(&mut rng, config.fuse_hidden, 2 * config.stream_features)?)?;
                p.insert("fuse.b1", Tensor::zeros(&[config.fuse_hidden]))?;
                p.insert("fuse.w2", affine_init(&mut rng, 1, config.fuse_hidden)?)?;
                p.insert("fuse.b2", Tensor::zeros(&[1]))?;
            }
            ScorerVariant::Conditional => {
                let mut cin = 1;
                for (i, &c) in config.encoder_channels.iter().enumerate() {
                    p.insert(format!("enc{i}.k"), conv_init(&mut rng, c, cin)?)?;
                    // nonzero so flat regions still give nonzero patch tokens
                    let b = normal_vec(&mut rng, c).into_iter().map(|v| 0.1 * v).collect();
                    p.insert(format!("enc{i}.b"), Tensor::new(vec![c], b)?)?;
                    cin = c;
                }
                p.insert("img.w", affine_init(&mut rng, config.embed_dim, cin)?)?;
                p.insert("img.b", Tensor::zeros(&[config.embed_dim]))?;
                let table = normal_vec(&mut rng, config.embed_dim * config.num_classes);
                p.insert("text.table", Tensor::new(vec![config.embed_dim, config.num_classes], table)?)?;
                p.insert("combine.beta", Tensor::new(vec![1, 3], config.combine_init.to_vec())?)?;
            }
        }
        Ok(Self { config, params: p })
    }

    pub fn variant(&self) -> ScorerVariant {
        self.config.variant
    }

    fn expect(&self, v: ScorerVariant) -> Result<()> {
        if self.config.variant != v {
            return Err(NumError::Config(format!("operation needs a {v:?} scorer, this one is {:?}", self.config.variant)));
        }
        Ok(())
    }

    fn check_images(&self, tape: &Tape, x: Var) -> Result<(usize, usize)> {
        let s = tape.shape(x);
        let n = self.config.image_size;
        if s.len() != 3 || s[1] != n || s[2] != n {
            return Err(NumError::Shape { op: "score", detail: format!("expected [B, {n}, {n}], got {s:?}") });
        }
        Ok((s[0], n))
    }

    fn stream(&self, tape: &mut Tape, p: &BoundParams, name: &str, planes: Var) -> Result<Var> {
        let b = tape.shape(planes)[0];
        let h = tape.conv2d(planes, p.get(&format!("{name}.conv.k"))?, Some(p.get(&format!("{name}.conv.b"))?))?;
        let h = tape.tanh(h)?;
        let h = tape.avg_pool(h, 4)?;
        let flat = tape.value(h).len() / b;
        let h = tape.reshape(h, &[b, flat])?;
        let h = tape.affine(h, p.get(&format!("{name}.fc.w"))?, Some(p.get(&format!("{name}.fc.b"))?))?;
        tape.tanh(h)
    }

    /// Two-stream penultimate features `[B, fuse_hidden]`.
    fn two_stream_hidden(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let (b, n) = self.check_images(tape, x)?;
        let planes = tape.reshape(x, &[b, 1, n, n])?;
        let grad = gradient_map_var(tape, x)?;
        let grad = tape.reshape(grad, &[b, 1, n, n])?;
        let f_rgb = self.stream(tape, p, "rgb", planes)?;
        let f_grad = self.stream(tape, p, "grad", grad)?;
        let f = tape.concat(&[f_rgb, f_grad], 1)?;
        let h = tape.affine(f, p.get("fuse.w1")?, Some(p.get("fuse.b1")?))?;
        tape.tanh(h)
    }

    fn two_stream_var(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let b = tape.shape(x)[0];
        let h = self.two_stream_hidden(tape, p, x)?;
        let logit = tape.affine(h, p.get("fuse.w2")?, Some(p.get("fuse.b2")?))?;
        let s = tape.sigmoid(logit)?;
        tape.reshape(s, &[b])
    }

    /// Encoder feature maps of the three layers, `[B, C_l, side_l, side_l]`.
    fn encode(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<[Var; 3]> {
        let (b, n) = self.check_images(tape, x)?;
        let mut h = tape.reshape(x, &[b, 1, n, n])?;
        let mut maps = Vec::with_capacity(3);
        for i in 0..3 {
            if i > 0 {
                h = tape.avg_pool(h, 2)?;
            }
            h = tape.conv2d(h, p.get(&format!("enc{i}.k"))?, Some(p.get(&format!("enc{i}.b"))?))?;
            h = tape.tanh(h)?;
            maps.push(h);
        }
        Ok([maps[0], maps[1], maps[2]])
    }

    /// Feature map cells pooled onto the patch grid as `[B, K, C]` tokens.
    fn tokens(&self, tape: &mut Tape, map: Var) -> Result<Var> {
        let s = tape.shape(map).to_vec();
        let g = self.config.patch_grid;
        let pooled = if s[2] == g { map } else { tape.avg_pool(map, s[2] / g)? };
        let flat = tape.reshape(pooled, &[s[0], s[1], g * g])?;
        tape.swap_last(flat)
    }

    fn text_embedding(&self, tape: &mut Tape, p: &BoundParams, cond: &[ConditionToken]) -> Result<Var> {
        let k = self.config.num_classes;
        let mut onehot = vec![0.0; cond.len() * k];
        for (r, c) in cond.iter().enumerate() {
            if c.class_id() >= k {
                return Err(NumError::Config(format!("condition id {} outside [0, {k})", c.class_id())));
            }
            onehot[r * k + c.class_id()] = 1.0;
        }
        let onehot = tape.constant(Tensor::new(vec![cond.len(), k], onehot)?);
        tape.affine(onehot, p.get("text.table")?, None)
    }

    /// Semantic, structural and combined scores, each `[B]`.
    pub fn conditional_parts(&self, tape: &mut Tape, p: &BoundParams, x: Var, cond: &[ConditionToken]) -> Result<ConditionalParts> {
        self.expect(ScorerVariant::Conditional)?;
        let b = tape.shape(x)[0];
        if cond.len() != b {
            return Err(NumError::Shape { op: "score", detail: format!("{} conditions for {b} images", cond.len()) });
        }
        let [_, m1, m2] = self.encode(tape, p, x)?;
        let t1 = self.tokens(tape, m1)?;
        let t2 = self.tokens(tape, m2)?;
        let structural = structural_from_tokens(tape, &[t1, t2], &self.config.layer_weights)?;
        let global = tape.mean_axis(t2, 1)?;
        let img = tape.affine(global, p.get("img.w")?, Some(p.get("img.b")?))?;
        let text = self.text_embedding(tape, p, cond)?;
        let semantic = semantic_from_embeddings(tape, img, text)?;
        let s1 = tape.reshape(semantic, &[b, 1])?;
        let s2 = tape.reshape(structural, &[b, 1])?;
        let ones = tape.constant(Tensor::full(&[b, 1], 1.0));
        let feats = tape.concat(&[s1, s2, ones], 1)?;
        let logit = tape.affine(feats, p.get("combine.beta")?, None)?;
        let s = tape.sigmoid(logit)?;
        let score = tape.reshape(s, &[b])?;
        Ok(ConditionalParts { semantic, structural, score })
    }

    /// Scores `[B]` for images `[B, H, W]` with parameters bound on `tape`.
    pub fn score_var(&self, tape: &mut Tape, p: &BoundParams, x: Var, cond: Option<&[ConditionToken]>) -> Result<Var> {
        match (self.config.variant, cond) {
            (ScorerVariant::TwoStream, _) => self.two_stream_var(tape, p, x),
            (ScorerVariant::Conditional, Some(c)) => Ok(self.conditional_parts(tape, p, x, c)?.score),
            (ScorerVariant::Conditional, None) => Err(NumError::Config("conditional scorer needs a condition per image".into())),
        }
    }

    /// Penultimate features used for distribution distances.
    pub fn features_var(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        match self.config.variant {
            ScorerVariant::TwoStream => self.two_stream_hidden(tape, p, x),
            ScorerVariant::Conditional => {
                let [_, _, m2] = self.encode(tape, p, x)?;
                let t2 = self.tokens(tape, m2)?;
                tape.mean_axis(t2, 1)
            }
        }
    }

    fn run<R>(&self, x: &Tensor, f: impl FnOnce(&mut Tape, &BoundParams, Var) -> Result<R>) -> Result<R> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, GradMode::Frozen);
        let batch = if x.shape().len() == 2 { x.clone().reshape(&[1, x.shape()[0], x.shape()[1]])? } else { x.clone() };
        let xv = tape.constant(batch);
        f(&mut tape, &p, xv)
    }

    /// Scores without gradients for `[B, H, W]` (or one `[H, W]`) images.
    pub fn score_batch(&self, x: &Tensor, cond: Option<&[ConditionToken]>) -> Result<Vec<f64>> {
        self.run(x, |tape, p, xv| {
            let s = self.score_var(tape, p, xv, cond)?;
            Ok(tape.value(s).data().to_vec())
        })
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, |tape, p, xv| {
            let f = self.features_var(tape, p, xv)?;
            Ok(tape.value(f).clone())
        })
    }

    fn parts_single(&self, x: &Tensor, c: ConditionToken) -> Result<(f64, f64, f64)> {
        self.run(x, |tape, p, xv| {
            let parts = self.conditional_parts(tape, p, xv, &[c])?;
            let v = |v: Var| tape.value(v).data()[0];
            Ok((v(parts.semantic), v(parts.structural), v(parts.score)))
        })
    }
}

/// Anything usable as a frozen differentiable reward on the tape.
pub trait QualityModel {
    /// Scores `[B]` for `[B, H, W]` images; gradients reach `x` only.
    fn quality_var(&self, tape: &mut Tape, x: Var, cond: Option<&[ConditionToken]>) -> Result<Var>;

    /// Digest of the model's parameters, used to detect mutation.
    fn fingerprint(&self) -> String {
        String::new()
    }

    /// Whether the model reads conditions.
    fn conditional(&self) -> bool {
        false
    }
}

impl QualityModel for Scorer {
    fn quality_var(&self, tape: &mut Tape, x: Var, cond: Option<&[ConditionToken]>) -> Result<Var> {
        let p = self.params.bind(tape, GradMode::Frozen);
        self.score_var(tape, &p, x, cond)
    }

    fn fingerprint(&self) -> String {
        self.params.checksum()
    }

    fn conditional(&self) -> bool {
        self.config.variant == ScorerVariant::Conditional
    }
}

pub fn two_stream_score(s: &Scorer, x: &Tensor) -> Result<f64> {
    s.expect(ScorerVariant::TwoStream)?;
    Ok(s.score_batch(x, None)?[0])
}

pub fn semantic_score(s: &Scorer, x: &Tensor, c: ConditionToken) -> Result<f64> {
    Ok(s.parts_single(x, c)?.0)
}

pub fn structural_score(s: &Scorer, x: &Tensor) -> Result<f64> {
    // the structural term does not read the condition
    Ok(s.parts_single(x, ConditionToken::new(0, s.config.num_classes)?)?.1)
}

pub fn conditional_score(s: &Scorer, x: &Tensor, c: ConditionToken) -> Result<f64> {
    Ok(s.parts_single(x, c)?.2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Stage-1 regression of score onto label. Returns the scorer frozen along
/// with the mean training loss of each epoch.
pub fn train_evaluator(config: ScorerConfig, data: &[IqaItem], opts: &EvaluatorTraining) -> Result<(Scorer, Vec<f64>)> {
    if data.is_empty() {
        return Err(NumError::Config("evaluator training needs at least one item".into()));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(NumError::Config("epochs and batch size must be >= 1".into()));
    }
    if data.iter().any(|it| !(0.0..=1.0).contains(&it.label)) {
        return Err(NumError::Config("labels must lie in [0, 1]".into()));
    }
    let conditional = config.variant == ScorerVariant::Conditional;
    if conditional && data.iter().any(|it| it.condition.is_none()) {
        return Err(NumError::Config("conditional scorer needs conditioned items".into()));
    }
    let mut scorer = Scorer::new(config, opts.seed)?;
    let adam = AdamConfig::with_lr(opts.lr);
    let mut rng = rng_for(opts.seed, stream::TRAIN, 10);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;
    let mut history = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let images: Vec<Tensor> = chunk.iter().map(|&i| data[i].image.clone()).collect();
            let labels: Vec<f64> = chunk.iter().map(|&i| data[i].label).collect();
            let cond: Option<Vec<ConditionToken>> =
                conditional.then(|| chunk.iter().map(|&i| data[i].condition.expect("checked above")).collect());
            let mut tape = Tape::new();
            let p = scorer.params.bind(&mut tape, GradMode::Trainable);
            let x = tape.constant(Tensor::stack(&images)?);
            let s = scorer.score_var(&mut tape, &p, x, cond.as_deref())?;
            let y = tape.constant(Tensor::from_vec(labels));
            let d = tape.sub(s, y)?;
            let sq = tape.square(d)?;
            let loss = tape.mean(sq)?;
            tape.backward(loss)?;
            epoch_loss += tape.value(loss).data()[0] * chunk.len() as f64;
            step += 1;
            adam_step(&mut scorer.params, &p.grads(&tape), &adam, step)?;
        }
        history.push(epoch_loss / data.len() as f64);
    }
    scorer.params.freeze_all();
    Ok((scorer, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_iqa_dataset, render_clean, ShapeClass};
    use crate::numcore::grad_check;

    fn ramp(w: usize) -> Tensor {
        let data = (0..w * w).map(|k| (k % w) as f64 / (w - 1) as f64).collect();
        Tensor::new(vec![w, w], data).unwrap()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let g = gradient_map(&Tensor::full(&[3, 8, 8], 0.4)).unwrap();
        // interior only: zero padding creates edges at the border
        for b in 0..3 {
            for i in 1..7 {
                for j in 1..7 {
                    assert!(g.data()[b * 64 + i * 8 + j] < 1e-5);
                }
            }
        }
        let g = gradient_map(&Tensor::zeros(&[8, 8])).unwrap();
        assert!(g.data().iter().all(|&v| v <= 1e-6));
    }

    #[test]
    fn ramp_interior_magnitude() {
        let w = 10;
        let g = gradient_map(&ramp(w)).unwrap();
        for i in 1..w - 1 {
            for j in 1..w - 1 {
                assert!((g.data()[i * w + j] - 8.0 / (w - 1) as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_map_grad_check() {
        let x = render_clean(ShapeClass::Circle, 8, 1).unwrap().image.reshape(&[1, 8, 8]).unwrap();
        let x = x.map(|v| v * 0.8 + 0.1);
        let r = grad_check(
            |tape, v| {
                let g = gradient_map_var(tape, v[0])?;
                tape.mean(g)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn zero_fusion_head_scores_half() {
        let mut s = Scorer::new(ScorerConfig::two_stream(16), 0).unwrap();
        s.params.set("fuse.w2", Tensor::zeros(&[1, 16])).unwrap();
        for seed in 0..5 {
            let img = render_clean(ShapeClass::Cross, 16, seed).unwrap().image;
            assert_eq!(two_stream_score(&s, &img).unwrap(), 0.5);
        }
    }

    #[test]
    fn scores_in_open_unit_interval() {
        let s = Scorer::new(ScorerConfig::two_stream(16), 1).unwrap();
        let mut rng = rng_for(3, 0, 0);
        let imgs: Vec<Tensor> = (0..100).map(|_| Tensor::new(vec![16, 16], normal_vec(&mut rng, 256)).unwrap()).collect();
        let scores = s.score_batch(&Tensor::stack(&imgs).unwrap(), None).unwrap();
        assert!(scores.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn variant_mismatch_rejected() {
        let s = Scorer::new(ScorerConfig::two_stream(16), 1).unwrap();
        let img = Tensor::zeros(&[16, 16]);
        assert!(semantic_score(&s, &img, ConditionToken::new(0, 4).unwrap()).is_err());
        let c = Scorer::new(ScorerConfig::conditional(16, 4), 1).unwrap();
        assert!(two_stream_score(&c, &img).is_err());
        assert!(c.score_batch(&img, None).is_err());
    }

    #[test]
    fn semantic_cosine_cases() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, -1.0]).unwrap());
        let s = semantic_from_embeddings(&mut tape, v, v).unwrap();
        assert!((tape.value(s).data()[0] - 1.0).abs() < 1e-15);
        let a = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 3.0]).unwrap());
        let s = semantic_from_embeddings(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.0);
        let w = tape.constant(Tensor::new(vec![1, 3], vec![0.3, -2.0, 0.7]).unwrap());
        let w10 = tape.scale(w, 10.0).unwrap();
        let s1 = semantic_from_embeddings(&mut tape, w, v).unwrap();
        let s10 = semantic_from_embeddings(&mut tape, w10, v).unwrap();
        assert!((tape.value(s1).data()[0] - tape.value(s10).data()[0]).abs() < 1e-15);
    }

    #[test]
    fn structural_cases() {
        let mut tape = Tape::new();
        let same = tape.constant(Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap());
        let s = structural_from_tokens(&mut tape, &[same], &[1.0]).unwrap();
        assert!((tape.value(s).data()[0] - 1.0).abs() < 1e-15);
        // mean token (1, 0): cosines +1 and -1
        let pm = tape.constant(Tensor::new(vec![1, 2, 2], vec![3.0, 0.0, -1.0, 0.0]).unwrap());
        let s = structural_from_tokens(&mut tape, &[pm], &[1.0]).unwrap();
        assert!(tape.value(s).data()[0].abs() < 1e-15);
        let s = structural_from_tokens(&mut tape, &[same, pm], &[0.25, 0.75]).unwrap();
        assert!((tape.value(s).data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn combine_cases() {
        assert_eq!(combine_scores([1.0, 0.0, 0.0], 0.0, 0.7), 0.5);
        let b = 0.8;
        assert_eq!(combine_scores([0.0, 0.0, b], 0.3, -0.2), combine_scores([0.0, 0.0, b], -0.9, 0.9));
        assert!((combine_scores([1.0, 1.0, 0.0], 1.0, 1.0) - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn conditional_sub_scores_bounded() {
        let s = Scorer::new(ScorerConfig::conditional(16, 4), 2).unwrap();
        for class in ShapeClass::ALL {
            let img = render_clean(class, 16, 4).unwrap().image;
            let c = ConditionToken::from(class);
            let sem = semantic_score(&s, &img, c).unwrap();
            let st = structural_score(&s, &img).unwrap();
            let sc = conditional_score(&s, &img, c).unwrap();
            assert!((-1.0..=1.0).contains(&sem) && (-1.0..=1.0).contains(&st));
            assert!((combine_scores([1.0, 1.0, 0.0], sem, st) - sc).abs() < 1e-12);
        }
    }

    fn input_grad_check(cfg: ScorerConfig) {
        let s = Scorer::new(cfg, 5).unwrap();
        // textured input keeps every Sobel magnitude far from its floor
        let img = render_clean(ShapeClass::Square, 16, 2).unwrap().image;
        let noise = normal_vec(&mut rng_for(6, 0, 0), 256);
        let data = img.data().iter().zip(noise).map(|(v, n)| (0.2 + 0.6 * v + 0.1 * n).clamp(0.05, 0.95)).collect();
        let x = Tensor::new(vec![1, 16, 16], data).unwrap();
        let cond = [ConditionToken::new(1, 4).unwrap()];
        let r = grad_check(
            |tape, v| {
                let q = s.quality_var(tape, v[0], Some(&cond))?;
                tape.mean(q)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn two_stream_input_gradients() {
        input_grad_check(ScorerConfig::two_stream(16));
    }

    #[test]
    fn conditional_input_gradients() {
        input_grad_check(ScorerConfig::conditional(16, 4));
    }

    #[test]
    fn constant_labels_give_constant_scores() {
        let mut data = build_iqa_dataset(64, false, 16, 1).unwrap();
        data.iter_mut().for_each(|it| it.label = 0.5);
        let opts = EvaluatorTraining { epochs: 20, lr: 1e-2, batch_size: 16, seed: 0 };
        let (s, _) = train_evaluator(ScorerConfig::two_stream(16), &data, &opts).unwrap();
        let imgs: Vec<Tensor> = data.iter().map(|d| d.image.clone()).collect();
        let scores = s.score_batch(&Tensor::stack(&imgs).unwrap(), None).unwrap();
        assert!(scores.iter().all(|v| (v - 0.5).abs() < 0.05), "{scores:?}");
        assert_eq!(s.params.trainable_count(), 0);
    }

    #[test]
    fn empty_training_set_rejected() {
        let opts = EvaluatorTraining { epochs: 1, lr: 1e-2, batch_size: 4, seed: 0 };
        assert!(train_evaluator(ScorerConfig::two_stream(16), &[], &opts).is_err());
    }
}
