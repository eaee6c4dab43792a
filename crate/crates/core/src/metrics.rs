//! Paired statistics, rank correlation and the Gaussian Fréchet distance.

use nalgebra::{DMatrix, RealField};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterMode;
use crate::data::{ConditionToken, NUM_CLASSES};
use crate::diffusion::{sample_loop, NoGradRunner, NoiseSchedule, NoisePredictor};
use crate::iqa::QualityModel;
use crate::{NumError, Scalar, Tape, Tensor};

type Result<T> = std::result::Result<T, NumError>;

/// Index-aligned scores of the same latents under two models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample<T> {
    baseline: Vec<T>,
    finetuned: Vec<T>,
}

impl<T: Scalar> PairedSample<T> {
    pub fn new(baseline: Vec<T>, finetuned: Vec<T>) -> Result<Self> {
        if baseline.len() != finetuned.len() || baseline.is_empty() {
            return Err(NumError::Config(format!(
                "paired sample needs equal non-zero lengths, got {} and {}",
                baseline.len(),
                finetuned.len()
            )));
        }
        Ok(Self { baseline, finetuned })
    }

    pub fn baseline(&self) -> &[T] {
        &self.baseline
    }

    pub fn finetuned(&self) -> &[T] {
        &self.finetuned
    }

    pub fn len(&self) -> usize {
        self.baseline.len()
    }

    pub fn is_empty(&self) -> bool {
        self.baseline.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self { baseline: self.finetuned.clone(), finetuned: self.baseline.clone() }
    }

    pub fn differences(&self) -> Vec<T> {
        self.finetuned.iter().zip(&self.baseline).map(|(&f, &b)| f - b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TStatistic<T> {
    Value(T),
    /// Every difference is identical, so the statistic is undefined.
    DegenerateVariance,
}

impl<T: Scalar> TStatistic<T> {
    pub fn value(self) -> Option<T> {
        match self {
            Self::Value(v) => Some(v),
            Self::DegenerateVariance => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedStats<T> {
    pub mean_diff: T,
    pub std_diff: T,
    pub t: TStatistic<T>,
}

/// `t = mean(d) / (sd(d) / sqrt(N))` with `d = finetuned - baseline` and the
/// `N - 1` denominator in `sd`.
pub fn paired_t_statistic<T: Scalar>(s: &PairedSample<T>) -> Result<PairedStats<T>> {
    let n = s.len();
    if n < 2 {
        return Err(NumError::Config(format!("t statistic needs N >= 2, got {n}")));
    }
    let d = s.differences();
    let nf = T::lit(n as f64);
    let mean = d.iter().fold(T::zero(), |a, &x| a + x) / nf;
    let ss = d.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean));
    let std = (ss / T::lit((n - 1) as f64)).sqrt();
    let all_equal = d.iter().all(|&x| x == d[0]);
    let t = if all_equal || std.is_zero() { TStatistic::DegenerateVariance } else { TStatistic::Value(mean / (std / nf.sqrt())) };
    Ok(PairedStats { mean_diff: mean, std_diff: std, t })
}

/// Fraction of pairs where finetuned beats baseline, ties counting one half.
pub fn win_rate<T: Scalar>(s: &PairedSample<T>) -> T {
    let (mut wins, mut ties) = (0usize, 0usize);
    for (f, b) in s.finetuned.iter().zip(&s.baseline) {
        if f > b {
            wins += 1;
        } else if f == b {
            ties += 1;
        }
    }
    T::lit((wins as f64 + 0.5 * ties as f64) / s.len() as f64)
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite values"));
    let mut ranks = vec![T::zero(); x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = T::lit((i + j) as f64 / 2.0 + 1.0);
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    let n = T::lit(a.len() as f64);
    let ma = a.iter().fold(T::zero(), |s, &v| s + v) / n;
    let mb = b.iter().fold(T::zero(), |s, &v| s + v) / n;
    let (mut sab, mut saa, mut sbb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa.is_zero() || sbb.is_zero() {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Pearson correlation of average ranks.
pub fn spearman<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(NumError::Config(format!("spearman needs equal lengths >= 3, got {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(NumError::NonFinite { op: "spearman" });
    }
    pearson(&average_ranks(a), &average_ranks(b))
        .map(|r| r.max(-T::one()).min(T::one()))
        .ok_or_else(|| NumError::Degenerate { op: "spearman", detail: "constant input".into() })
}

const PSD_TOLERANCE: f64 = 1e-10;

/// Mean and row-major covariance of a Gaussian summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments<T> {
    pub mean: Vec<T>,
    pub covariance: Vec<T>,
}

impl<T: Scalar> GaussianMoments<T> {
    pub fn new(mean: Vec<T>, covariance: Vec<T>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || covariance.len() != d * d {
            return Err(NumError::Shape { op: "gaussian_moments", detail: format!("mean {d} with {} covariance entries", covariance.len()) });
        }
        for i in 0..d {
            for j in 0..i {
                if (covariance[i * d + j] - covariance[j * d + i]).abs() > T::lit(PSD_TOLERANCE) {
                    return Err(NumError::Degenerate { op: "gaussian_moments", detail: "covariance is not symmetric".into() });
                }
            }
        }
        Ok(Self { mean, covariance })
    }

    /// Sample mean and unbiased covariance of `rows` (each of length `d`).
    pub fn from_samples(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(NumError::Config("moments need at least two samples".into()));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(NumError::Shape { op: "gaussian_moments", detail: "ragged samples".into() });
        }
        let nf = T::lit(n as f64);
        let mean: Vec<T> = (0..d).map(|k| rows.iter().fold(T::zero(), |s, r| s + r[k]) / nf).collect();
        let mut cov = vec![T::zero(); d * d];
        for r in rows {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]);
                }
            }
        }
        let denom = T::lit((n - 1) as f64);
        cov.iter_mut().for_each(|c| *c /= denom);
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn sym_eigen<T: Scalar + RealField>(m: DMatrix<T>) -> (Vec<T>, DMatrix<T>) {
    let e = m.symmetric_eigen();
    (e.eigenvalues.iter().copied().collect(), e.eigenvectors)
}

fn checked_clamp<T: Scalar>(vals: &mut [T], what: &str) -> Result<()> {
    for v in vals.iter_mut() {
        if *v < -T::lit(PSD_TOLERANCE) {
            return Err(NumError::Degenerate { op: "frechet_gaussian", detail: format!("{what} has eigenvalue {v}") });
        }
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    Ok(())
}

/// `||mu_p - mu_q||^2 + tr(S_p + S_q - 2 (S_p^1/2 S_q S_p^1/2)^1/2)`.
pub fn frechet_gaussian<T: Scalar + RealField>(p: &GaussianMoments<T>, q: &GaussianMoments<T>) -> Result<T> {
    let d = p.dim();
    if q.dim() != d {
        return Err(NumError::Shape { op: "frechet_gaussian", detail: format!("dimensions {d} and {}", q.dim()) });
    }
    if d > 64 {
        return Err(NumError::Config(format!("frechet_gaussian supports d <= 64, got {d}")));
    }
    let sp = DMatrix::from_row_slice(d, d, &p.covariance);
    let sq = DMatrix::from_row_slice(d, d, &q.covariance);
    let (mut lp, vp) = sym_eigen(sp.clone());
    checked_clamp(&mut lp, "first covariance")?;
    let (mut lq, _) = sym_eigen(sq.clone());
    checked_clamp(&mut lq, "second covariance")?;
    let root = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(d, lp.iter().map(|&l| Float::sqrt(l))));
    let sp_half = &vp * root * vp.transpose();
    let mut inner = &sp_half * sq.clone() * &sp_half;
    inner = (&inner + inner.transpose()) * T::lit(0.5);
    let (mut li, _) = sym_eigen(inner);
    checked_clamp(&mut li, "product")?;
    let tr_sqrt = li.iter().fold(T::zero(), |a, &l| a + Float::sqrt(l));
    let mean_term = p.mean.iter().zip(&q.mean).fold(T::zero(), |a, (&x, &y)| a + (x - y) * (x - y));
    let tr = sp.trace() + sq.trace() - T::lit(2.0) * tr_sqrt;
    Ok(Float::max(mean_term + tr, T::zero()))
}

/// One row of the summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub metric: String,
    pub baseline_mean: f64,
    pub finetuned_mean: f64,
    pub improvement: f64,
    pub std: f64,
    /// Empty when the variance is degenerate.
    pub t_statistic: Option<f64>,
    pub win_rate: f64,
}

impl SummaryRow {
    pub fn from_sample(run_id: &str, metric: &str, s: &PairedSample<f64>) -> Result<Self> {
        let n = s.len() as f64;
        let baseline_mean = s.baseline().iter().sum::<f64>() / n;
        let finetuned_mean = s.finetuned().iter().sum::<f64>() / n;
        let stats = paired_t_statistic(s)?;
        Ok(Self {
            run_id: run_id.into(),
            metric: metric.into(),
            baseline_mean,
            finetuned_mean,
            improvement: stats.mean_diff,
            std: stats.std_diff,
            t_statistic: stats.t.value(),
            win_rate: win_rate(s),
        })
    }
}

/// Scores `[B, H, W]` images through a quality model without gradients.
pub fn score_images<Q: QualityModel + ?Sized>(q: &Q, images: &Tensor, cond: Option<&[ConditionToken]>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let s = q.quality_var(&mut tape, x, cond)?;
    Ok(tape.value(s).data().to_vec())
}

#[derive(Debug, Clone)]
pub struct PairwiseEvaluation {
    pub sample: PairedSample<f64>,
    pub baseline_images: Tensor,
    pub finetuned_images: Tensor,
    pub conditions: Option<Vec<ConditionToken>>,
}

impl PairwiseEvaluation {
    pub fn summary(&self, run_id: &str, metric: &str) -> Result<SummaryRow> {
        SummaryRow::from_sample(run_id, metric, &self.sample)
    }
}

/// Conditions cycling through the classes, used for conditional models.
pub fn round_robin_conditions(n: usize, num_classes: usize) -> Vec<ConditionToken> {
    (0..n).map(|i| ConditionToken::new(i % num_classes, num_classes).expect("in range")).collect()
}

/// Samples `n` latents through the base and adapted chains with identical
/// per-sample noise and scores both with `scorer`.
pub fn evaluate_pairwise<Q: QualityModel + ?Sized>(
    net: &NoisePredictor,
    scorer: &Q,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<PairwiseEvaluation> {
    let size = net.arch.image_size;
    let conditions = (net.arch.cond_dim > 0).then(|| round_robin_conditions(n, net.arch.num_classes.min(NUM_CLASSES)));
    let run = |mode| -> Result<Tensor> {
        let mut r = NoGradRunner::new(net, mode);
        Ok(sample_loop(&mut r, sched, &[size, size], n, seed, conditions.as_deref(), false)?.images)
    };
    let baseline_images = run(AdapterMode::Base)?;
    let finetuned_images = run(AdapterMode::Adapted)?;
    let b = score_images(scorer, &baseline_images, conditions.as_deref())?;
    let f = score_images(scorer, &finetuned_images, conditions.as_deref())?;
    Ok(PairwiseEvaluation { sample: PairedSample::new(b, f)?, baseline_images, finetuned_images, conditions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pair(d: &[f64]) -> PairedSample<f64> {
        PairedSample::new(vec![0.0; d.len()], d.to_vec()).unwrap()
    }

    #[test]
    fn t_statistic_examples() {
        let s = paired_t_statistic(&pair(&[1.0, -1.0, 1.0, -1.0])).unwrap();
        assert_eq!(s.t, TStatistic::Value(0.0));
        let s = paired_t_statistic(&pair(&[2.0, 0.0, 2.0, 0.0])).unwrap();
        assert_abs_diff_eq!(s.mean_diff, 1.0);
        assert_abs_diff_eq!(s.std_diff, (4.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.t.value().unwrap(), 1.7321, epsilon = 1e-4);
        let s = paired_t_statistic(&pair(&[1.0; 4])).unwrap();
        assert_eq!(s.t, TStatistic::DegenerateVariance);
        assert!(paired_t_statistic(&pair(&[1.0])).is_err());
    }

    #[test]
    fn t_statistic_in_f32() {
        let s = PairedSample::new(vec![0.0f32; 4], vec![2.0, 0.0, 2.0, 0.0]).unwrap();
        assert!((paired_t_statistic(&s).unwrap().t.value().unwrap() - 1.7320508).abs() < 1e-5);
    }

    #[test]
    fn win_rate_examples() {
        let s = PairedSample::new(vec![0.0; 4], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        assert_eq!(win_rate(&s), 0.75);
        assert_eq!(win_rate(&pair(&[0.0; 5])), 0.5);
        assert_eq!(win_rate(&pair(&[-1.0; 3])), 0.0);
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(spearman(&a, &a).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(spearman(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8, epsilon = 1e-12);
        assert!(matches!(spearman(&a, &[2.0; 4]), Err(NumError::Degenerate { .. })));
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    fn moments(mean: &[f64], cov: &[f64]) -> GaussianMoments<f64> {
        GaussianMoments::new(mean.to_vec(), cov.to_vec()).unwrap()
    }

    #[test]
    fn frechet_examples() {
        let p = moments(&[0.3, -1.0], &[2.0, 0.5, 0.5, 1.0]);
        assert!(frechet_gaussian(&p, &p).unwrap() < 1e-8);
        assert_abs_diff_eq!(frechet_gaussian(&moments(&[0.0], &[1.0]), &moments(&[1.0], &[1.0])).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(frechet_gaussian(&moments(&[0.0], &[1.0]), &moments(&[0.0], &[4.0])).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn frechet_rejects_bad_input() {
        let neg = moments(&[0.0, 0.0], &[1.0, 0.0, 0.0, -1.0]);
        let ok = moments(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!(frechet_gaussian(&neg, &ok).is_err());
        assert!(frechet_gaussian(&ok, &moments(&[0.0], &[1.0])).is_err());
        assert!(GaussianMoments::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.0, 1.0]).is_err());
    }

    #[test]
    fn moments_from_samples() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 2.0], vec![2.0, 5.0]];
        let m = GaussianMoments::from_samples(&rows).unwrap();
        assert_eq!(m.mean, vec![2.0, 3.0]);
        assert_abs_diff_eq!(m.covariance[0], 1.0);
        assert_abs_diff_eq!(m.covariance[3], 3.0);
    }

    fn finite_vec(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn t_is_antisymmetric(b in finite_vec(2..20), seed in 0u64..1000) {
            let f: Vec<f64> = b.iter().enumerate().map(|(i, v)| v + ((i as u64 * 7 + seed) % 5) as f64 - 2.0).collect();
            let s = PairedSample::new(b, f).unwrap();
            let t1 = paired_t_statistic(&s).unwrap().t;
            let t2 = paired_t_statistic(&s.swapped()).unwrap().t;
            match (t1, t2) {
                (TStatistic::Value(a), TStatistic::Value(b)) => prop_assert_eq!(a, -b),
                (TStatistic::DegenerateVariance, TStatistic::DegenerateVariance) => {}
                other => prop_assert!(false, "{other:?}"),
            }
        }

        #[test]
        fn win_rates_complement(b in finite_vec(1..30), f in finite_vec(1..30)) {
            let n = b.len().min(f.len());
            let s = PairedSample::new(b[..n].to_vec(), f[..n].to_vec()).unwrap();
            prop_assert_eq!(win_rate(&s) + win_rate(&s.swapped()), 1.0);
        }

        #[test]
        fn spearman_invariant_to_monotone_maps(a in finite_vec(3..25), b in finite_vec(3..25)) {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            if let Ok(r) = spearman(a, b) {
                let ta: Vec<f64> = a.iter().map(|v| v.exp()).collect();
                let tb: Vec<f64> = b.iter().map(|v| 3.0 * v + 1.0).collect();
                prop_assert!((spearman(&ta, &tb).unwrap() - r).abs() < 1e-12);
            }
        }

        #[test]
        fn frechet_symmetric(vals in proptest::collection::vec(-2.0f64..2.0, 18)) {
            let d = 3;
            let mk = |v: &[f64]| {
                let l = DMatrix::from_row_slice(d, d, &v[..9]);
                let cov = &l * l.transpose() + DMatrix::identity(d, d) * 0.1;
                let cov: Vec<f64> = (0..d * d).map(|k| cov[(k / d, k % d)]).collect();
                let cov: Vec<f64> = (0..d * d).map(|k| 0.5 * (cov[k] + cov[(k % d) * d + k / d])).collect();
                GaussianMoments::new(v[..d].to_vec(), cov).unwrap()
            };
            let (p, q) = (mk(&vals[..9]), mk(&vals[9..]));
            let a = frechet_gaussian(&p, &q).unwrap();
            let b = frechet_gaussian(&q, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
            prop_assert!(frechet_gaussian(&p, &p).unwrap() < 1e-8);
        }
    }
}
