use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumError, Result, Scalar, Tape, Tensor, Var};

/// Finite-difference comparison for one input.
#[derive(Debug, Clone)]
pub struct LeafReport<T> {
    pub index: usize,
    pub checked: usize,
    pub max_rel_error: T,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport<T> {
    pub leaves: Vec<LeafReport<T>>,
    /// Primitives evaluated exactly at a non-differentiable point. When
    /// non-empty the comparison is skipped and the point is excluded.
    pub excluded: Vec<&'static str>,
}

impl<T: Scalar> GradCheckReport<T> {
    pub fn is_excluded(&self) -> bool {
        !self.excluded.is_empty()
    }

    pub fn passed(&self) -> bool {
        !self.is_excluded() && self.leaves.iter().all(|l| l.passed)
    }

    pub fn max_rel_error(&self) -> T {
        self.leaves.iter().fold(T::zero(), |m, l| m.max(l.max_rel_error))
    }
}

fn evaluate<T: Scalar, F>(program: &F, inputs: &[Tensor<T>]) -> Result<T>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = program(&mut tape, &vars)?;
    tape.value(out).item().ok_or_else(|| NumError::NotScalar(tape.shape(out).to_vec()))
}

/// Compares reverse-mode gradients of `program` against central differences
/// `(f(x+e) - f(x-e)) / 2e` on every element of every input.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<T: Scalar, F>(program: F, inputs: &[Tensor<T>], epsilon: T, tolerance: T) -> Result<GradCheckReport<T>>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(program, inputs, epsilon, tolerance, None, 0)
}

/// Like [`grad_check`] but probes at most `probes` randomly chosen elements
/// per input, which keeps the check affordable for whole networks.
pub fn grad_check_sampled<T: Scalar, F>(
    program: F,
    inputs: &[Tensor<T>],
    epsilon: T,
    tolerance: T,
    probes: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport<T>>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(epsilon > T::zero() && epsilon <= T::lit(1e-2)) {
        return Err(NumError::Config(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = program(&mut tape, &vars)?;
    if !tape.nondifferentiable_hits().is_empty() {
        return Ok(GradCheckReport { leaves: Vec::new(), excluded: tape.nondifferentiable_hits().to_vec() });
    }
    tape.backward(out)?;

    let floor = T::lit(1e-8);
    let two_eps = epsilon + epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut leaves = Vec::with_capacity(inputs.len());
    for (li, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).expect("leaf gradient populated").to_vec();
        let n = analytic.len();
        let coords: Vec<usize> = match probes {
            Some(p) if p < n => sample(&mut rng, n, p).into_vec(),
            _ => (0..n).collect(),
        };
        let mut max_rel = T::zero();
        for &i in &coords {
            let orig = work[li].data()[i];
            work[li].data_mut()[i] = orig + epsilon;
            let plus = evaluate(&program, &work)?;
            work[li].data_mut()[i] = orig - epsilon;
            let minus = evaluate(&program, &work)?;
            work[li].data_mut()[i] = orig;
            let numeric = (plus - minus) / two_eps;
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
        leaves.push(LeafReport { index: li, checked: coords.len(), max_rel_error: max_rel, passed: max_rel <= tolerance });
    }
    Ok(GradCheckReport { leaves, excluded: Vec::new() })
}
