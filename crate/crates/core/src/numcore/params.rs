use std::collections::{BTreeMap, BTreeSet, HashMap};

use sha2::{Digest, Sha256};

use super::{NumError, Result, Scalar, Tape, Tensor, Var};

/// Named parameters in insertion order, a frozen set, and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
    frozen: BTreeSet<String>,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Non-frozen entries become gradient leaves.
    Trainable,
    /// Every entry is a constant.
    Frozen,
}

/// Tape leaves for the entries of a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl BoundParams {
    /// Binds existing tape variables by name, all treated as trainable.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        let mut out = Self::default();
        for (name, v) in pairs {
            out.vars.insert(name.clone(), v);
            out.trainable.push((name, v));
        }
        out
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients of the trainable leaves after a backward pass.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> BTreeMap<String, Vec<T>> {
        self.trainable
            .iter()
            .map(|(name, v)| {
                let g = tape.grad(*v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); tape.value(*v).len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new(), frozen: BTreeSet::new(), moments: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1).ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Replaces the values of a non-frozen entry.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let &i = self.index.get(name).ok_or_else(|| NumError::UnknownParam(name.to_string()))?;
        if self.frozen.contains(name) {
            return Err(NumError::Config(format!("parameter `{name}` is frozen")));
        }
        if self.entries[i].1.shape() != value.shape() {
            return Err(NumError::Shape {
                op: "param_set",
                detail: format!("{name}: {:?} vs {:?}", self.entries[i].1.shape(), value.shape()),
            });
        }
        self.entries[i].1 = value;
        Ok(())
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.contains(name) {
            return Err(NumError::UnknownParam(name.to_string()));
        }
        self.frozen.insert(name.to_string());
        self.moments.remove(name);
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        let names: Vec<String> = self.entries.iter().map(|(n, _)| n.clone()).collect();
        self.frozen.extend(names);
        self.moments.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.names().filter(|n| !self.frozen.contains(*n))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|(n, _)| !self.frozen.contains(*n)).map(|(_, t)| t.len()).sum()
    }

    /// Places every entry on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, mode: GradMode) -> BoundParams {
        let mut bound = BoundParams::default();
        for (name, value) in &self.entries {
            let rg = mode == GradMode::Trainable && !self.frozen.contains(name);
            let v = tape.leaf(value.clone(), rg);
            if rg {
                bound.trainable.push((name.clone(), v));
            }
            bound.vars.insert(name.clone(), v);
        }
        bound
    }

    fn digest(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.entries.iter().filter(|(n, _)| filter(n)) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// SHA-256 over names, shapes and values of the frozen entries.
    pub fn frozen_checksum(&self) -> String {
        self.digest(|n| self.frozen.contains(n))
    }

    pub fn checksum(&self) -> String {
        self.digest(|_| true)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        Self { lr, beta1: T::lit(0.9), beta2: T::lit(0.999), eps: T::lit(1e-8) }
    }
}

/// One bias-corrected Adam update of the non-frozen entries. Missing
/// gradients count as zero; gradients for frozen entries are ignored.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Vec<T>>,
    cfg: &AdamConfig<T>,
    step_index: u64,
) -> Result<()> {
    if !(cfg.lr > T::zero()) {
        return Err(NumError::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if step_index == 0 {
        return Err(NumError::Config("adam step index starts at 1".into()));
    }
    for (name, g) in grads {
        let t = store.get(name)?;
        if t.len() != g.len() {
            return Err(NumError::Shape { op: "adam_step", detail: format!("{name}: {} values, grad has {}", t.len(), g.len()) });
        }
    }
    let one = T::one();
    let bc1 = one - cfg.beta1.powi(step_index as i32);
    let bc2 = one - cfg.beta2.powi(step_index as i32);
    for i in 0..store.entries.len() {
        let name = store.entries[i].0.clone();
        if store.frozen.contains(&name) {
            continue;
        }
        let n = store.entries[i].1.len();
        let (m, v) = store.moments.entry(name.clone()).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        let data = store.entries[i].1.data_mut();
        let g = grads.get(&name);
        for j in 0..n {
            let gj = g.map_or(T::zero(), |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (one - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (one - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::from_vec(vec![0.5, -0.5])).unwrap();
        s.insert("base", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        s.freeze("base").unwrap();
        s
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut s = store();
        let before = s.checksum();
        let grads = BTreeMap::from([("w".to_string(), vec![0.0, 0.0])]);
        adam_step(&mut s, &grads, &AdamConfig::with_lr(0.1), 1).unwrap();
        assert_eq!(before, s.checksum());
    }

    #[test]
    fn frozen_entry_ignores_gradient() {
        let mut s = store();
        let before = s.frozen_checksum();
        let grads = BTreeMap::from([("base".to_string(), vec![3.0, -3.0])]);
        for step in 1..=5 {
            adam_step(&mut s, &grads, &AdamConfig::with_lr(0.1), step).unwrap();
        }
        assert_eq!(s.get("base").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(before, s.frozen_checksum());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        s.insert("p", Tensor::scalar(0.0)).unwrap();
        let grads = BTreeMap::from([("p".to_string(), vec![1.0])]);
        adam_step(&mut s, &grads, &AdamConfig::with_lr(0.1), 1).unwrap();
        assert!((s.get("p").unwrap().data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn nonpositive_lr_rejected() {
        let mut s = store();
        let r = adam_step(&mut s, &BTreeMap::new(), &AdamConfig::with_lr(0.0), 1);
        assert!(matches!(r, Err(NumError::Config(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(matches!(s.insert("w", Tensor::scalar(1.0)), Err(NumError::DuplicateParam(_))));
    }

    #[test]
    fn bind_marks_only_trainable() {
        let s = store();
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, GradMode::Trainable);
        assert!(tape.requires_grad(b.get("w").unwrap()));
        assert!(!tape.requires_grad(b.get("base").unwrap()));
        let b = s.bind(&mut tape, GradMode::Frozen);
        assert!(!tape.requires_grad(b.get("w").unwrap()));
    }
}
