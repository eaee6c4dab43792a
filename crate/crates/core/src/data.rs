//! Procedural toy corpora: antialiased shapes, graded degradations with a
//! known severity, and the labeled sets used by both training stages.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::{normal_vec, rng_for, stream};
use crate::{NumError, Tensor};

pub const NUM_CLASSES: usize = 4;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle = 0,
    Square = 1,
    Cross = 2,
    Stripes = 3,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; NUM_CLASSES] = [Self::Circle, Self::Square, Self::Cross, Self::Stripes];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Cross => "cross",
            Self::Stripes => "stripes",
        }
    }
}

/// Discrete stand-in for a text prompt: one of the shape classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionToken {
    class_id: usize,
}

impl ConditionToken {
    pub fn new(class_id: usize, num_classes: usize) -> Result<Self, NumError> {
        if class_id >= num_classes {
            return Err(NumError::Config(format!("condition id {class_id} outside [0, {num_classes})")));
        }
        Ok(Self { class_id })
    }

    pub fn class_id(self) -> usize {
        self.class_id
    }
}

impl From<ShapeClass> for ConditionToken {
    fn from(c: ShapeClass) -> Self {
        Self { class_id: c.id() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradationKind {
    Blur,
    AdditiveNoise,
    ContrastCrush,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 3] = [Self::Blur, Self::AdditiveNoise, Self::ContrastCrush];

    pub fn name(self) -> &'static str {
        match self {
            Self::Blur => "blur",
            Self::AdditiveNoise => "additive-noise",
            Self::ContrastCrush => "contrast-crush",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub severity: f64,
}

/// A rendered shape together with the jittered geometry that produced it.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: Tensor,
    /// Shape center in continuous pixel coordinates `(x, y)`.
    pub center: (f64, f64),
}

fn inside(class: ShapeClass, p: (f64, f64), geo: &Geometry) -> bool {
    let (dx, dy) = (p.0 - geo.cx, p.1 - geo.cy);
    match class {
        ShapeClass::Circle => dx * dx + dy * dy <= geo.a * geo.a,
        ShapeClass::Square => dx.abs() <= geo.a && dy.abs() <= geo.a,
        ShapeClass::Cross => (dx.abs() <= geo.b && dy.abs() <= geo.a) || (dy.abs() <= geo.b && dx.abs() <= geo.a),
        ShapeClass::Stripes => {
            let coord = if geo.vertical { p.0 } else { p.1 };
            ((coord + geo.b) / geo.a).rem_euclid(1.0) < 0.5
        }
    }
}

struct Geometry {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    vertical: bool,
}

/// Renders `class` on a `size x size` canvas (background 0, foreground 1)
/// with seeded position and scale jitter. Centers sit on pixel boundaries.
pub fn render_clean(class: ShapeClass, size: usize, seed: u64) -> Result<Rendered, NumError> {
    if size < 8 {
        return Err(NumError::Config(format!("image size must be >= 8, got {size}")));
    }
    let mut rng = rng_for(seed, stream::RENDER, class.id() as u64);
    let s = size as f64 / 16.0;
    let half = (size / 2) as f64;
    let max_shift = (2.0 * s).round() as i64;
    let cx = half + rng.gen_range(-max_shift..=max_shift) as f64;
    let cy = half + rng.gen_range(-max_shift..=max_shift) as f64;
    let geo = match class {
        ShapeClass::Circle => Geometry { cx, cy, a: s * rng.gen_range(3.0..5.0), b: 0.0, vertical: false },
        ShapeClass::Square => Geometry { cx, cy, a: s * rng.gen_range(2.5..4.5), b: 0.0, vertical: false },
        ShapeClass::Cross => {
            let a = s * rng.gen_range(4.0..6.0);
            let b = s * rng.gen_range(0.8..1.5);
            Geometry { cx, cy, a, b, vertical: false }
        }
        ShapeClass::Stripes => {
            let period = s * rng.gen_range(4.0..6.0);
            let phase = rng.gen_range(0.0..period);
            Geometry { cx, cy, a: period, b: phase, vertical: rng.gen_bool(0.5) }
        }
    };
    let mut data = vec![0.0; size * size];
    let norm = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for i in 0..size {
        for j in 0..size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let p = (
                        j as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64,
                        i as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64,
                    );
                    hits += usize::from(inside(class, p, &geo));
                }
            }
            data[i * size + j] = hits as f64 / norm;
        }
    }
    Ok(Rendered { image: Tensor::new(vec![size, size], data)?, center: (geo.cx, geo.cy) })
}

fn box_blur_once(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let y = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                    let x = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                    acc += src[y * w + x];
                }
            }
            out[i * w + j] = acc / 9.0;
        }
    }
    out
}

/// Applies a graded degradation. Severity 0 returns the input unchanged.
///
/// * blur: `round(4 * severity)` passes of a 3x3 box filter (edge clamped)
/// * additive noise: `clip(x + 0.5 * severity * N(0, 1))`
/// * contrast crush: `lerp(x, 0.5, severity)`
pub fn apply_degradation(x: &Tensor, spec: DegradationSpec, seed: u64) -> Result<Tensor, NumError> {
    if !(0.0..=1.0).contains(&spec.severity) {
        return Err(NumError::Config(format!("severity {} outside [0, 1]", spec.severity)));
    }
    let shape = x.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let data = match spec.kind {
        DegradationKind::Blur => {
            let passes = (spec.severity * 4.0).round() as usize;
            let mut d = x.data().to_vec();
            for _ in 0..passes {
                d = box_blur_once(&d, h, w);
            }
            d
        }
        DegradationKind::AdditiveNoise => {
            let mut rng = rng_for(seed, stream::DEGRADE, 0);
            let noise = normal_vec(&mut rng, x.len());
            let amp = 0.5 * spec.severity;
            x.data().iter().zip(noise).map(|(&v, n)| (v + amp * n).clamp(0.0, 1.0)).collect()
        }
        DegradationKind::ContrastCrush => x.data().iter().map(|&v| v + (0.5 - v) * spec.severity).collect(),
    };
    Tensor::new(shape, data)
}

#[derive(Debug, Clone)]
pub struct IqaItem {
    pub image: Tensor,
    pub class: ShapeClass,
    pub degradation: DegradationSpec,
    pub label: f64,
    /// Present for conditional datasets.
    pub condition: Option<ConditionToken>,
    pub matched: bool,
}

/// Labeled images with `label = 1 - severity`. Conditional sets pair every
/// image with a condition that matches its class half of the time;
/// mismatched pairs carry label 0.
pub fn build_iqa_dataset(n: usize, conditional: bool, size: usize, seed: u64) -> Result<Vec<IqaItem>, NumError> {
    if n == 0 {
        return Err(NumError::Config("dataset size must be >= 1".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, stream::IQA_ITEM, i as u64);
            let class = ShapeClass::ALL[rng.gen_range(0..NUM_CLASSES)];
            let clean = render_clean(class, size, rng.gen())?;
            let kind = DegradationKind::ALL[rng.gen_range(0..3)];
            let severity: f64 = rng.gen_range(0.0..=1.0);
            let degradation = DegradationSpec { kind, severity };
            let image = apply_degradation(&clean.image, degradation, rng.gen())?;
            let (condition, matched) = if conditional {
                if rng.gen_bool(0.5) {
                    (Some(ConditionToken::from(class)), true)
                } else {
                    let other = (class.id() + rng.gen_range(1..NUM_CLASSES)) % NUM_CLASSES;
                    (Some(ConditionToken { class_id: other }), false)
                }
            } else {
                (None, true)
            };
            let label = if matched { 1.0 - severity } else { 0.0 };
            Ok(IqaItem { image, class, degradation, label, condition, matched })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DiffusionItem {
    pub image: Tensor,
    pub class: ShapeClass,
    pub condition: Option<ConditionToken>,
}

/// Clean renders only, classes assigned round-robin.
pub fn build_diffusion_dataset(n: usize, size: usize, conditional: bool, seed: u64) -> Result<Vec<DiffusionItem>, NumError> {
    if n == 0 {
        return Err(NumError::Config("dataset size must be >= 1".into()));
    }
    (0..n)
        .map(|i| {
            let class = ShapeClass::ALL[i % NUM_CLASSES];
            let mut rng = rng_for(seed, stream::DIFFUSION_ITEM, i as u64);
            let image = render_clean(class, size, rng.gen())?.image;
            Ok(DiffusionItem { image, class, condition: conditional.then(|| class.into()) })
        })
        .collect()
}

pub fn corpus_checksum<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for img in images {
        for &v in img.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
