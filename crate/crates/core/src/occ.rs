//! One-class classification.
//!
//! Training only sees positive (normal) instances. A multivariate normal
//! reference density is fitted to them and widened, artificial "negative"
//! instances are sampled from it, and a binary class-probability estimator is
//! fitted to positives versus artificial data. Bayes' rule then recovers a
//! target density estimate
//!
//! ```text
//! P(X|C) = ((1 - P(C)) / P(C)) * (P(C|X) / (1 - P(C|X))) * P(X|A)
//! ```
//!
//! where `P(X|A)` is the reference density. A point is classified positive
//! when `P(C|X) >= threshold`; with a 1:1 artificial ratio this is the
//! density-ratio test `P(X|C) >= P(X|A)`.
//!
//! The class-probability estimator models each class with axis-aligned
//! Gaussians (per-dimension means and variances). Positives are typically a
//! cluster of normal windows plus a point mass of spike representatives at
//! the all-ones vector, which one Gaussian cannot describe, so the target
//! class is a small mixture fitted by EM with the component count chosen by
//! BIC. Artificial data are drawn from a single Gaussian and are modelled by
//! one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wtsa::{FeatureBounds, TrainingMatrix};

/// Floor added to the reference covariance diagonal and applied to every
/// estimator variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// `P(C|X)` is clamped to `[PROBABILITY_CLAMP, 1 - PROBABILITY_CLAMP]`.
pub const PROBABILITY_CLAMP: f64 = 1e-9;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const EM_MAX_ITERATIONS: usize = 500;
const EM_TOLERANCE: f64 = 1e-10;
const MIN_COMPONENT_MASS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccConfig {
    /// Decision threshold on `P(C|X)`.
    pub threshold: f64,
    /// Standard-deviation multiplier applied to the fitted reference density
    /// before artificial data are drawn from it.
    pub reference_spread: f64,
    /// Upper bound on mixture components for the target class.
    pub max_components: usize,
}

impl Default for OccConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            reference_spread: 10.0,
            max_components: 4,
        }
    }
}

impl OccConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidInput(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.reference_spread >= 1.0 && self.reference_spread.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "reference spread must be >= 1, got {}",
                self.reference_spread
            )));
        }
        if self.max_components == 0 {
            return Err(Error::InvalidInput("max_components must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Reference density
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDensity {
    pub mean: Vec<f64>,
    /// Row-major symmetric positive-definite covariance.
    pub covariance: Vec<Vec<f64>>,
}

impl GaussianDensity {
    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    /// Lower-triangular Cholesky factor of the covariance.
    pub fn cholesky(&self) -> Result<Vec<Vec<f64>>> {
        let d = self.dimension();
        let mut l = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..=i {
                let sum = self.covariance[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::InvalidInput(
                            "reference covariance is not positive definite".into(),
                        ));
                    }
                    l[i][i] = sum.sqrt();
                } else {
                    l[i][j] = sum / l[j][j];
                }
            }
        }
        Ok(l)
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        let d = self.dimension();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        let l = self.cholesky()?;
        // forward substitution: L y = x - mean
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= l[i][k] * y[k];
            }
            y[i] = s / l[i][i];
        }
        let log_det: f64 = (0..d).map(|i| 2.0 * l[i][i].ln()).sum();
        let maha: f64 = y.iter().map(|v| v * v).sum();
        Ok(-0.5 * (d as f64 * LN_2PI + log_det + maha))
    }

    pub fn pdf(&self, x: &[f64]) -> Result<f64> {
        self.log_pdf(x).map(f64::exp)
    }

    /// Same mean, standard deviations scaled by `spread`.
    pub fn widened(&self, spread: f64) -> GaussianDensity {
        let s2 = spread * spread;
        GaussianDensity {
            mean: self.mean.clone(),
            covariance: self
                .covariance
                .iter()
                .map(|row| row.iter().map(|c| c * s2).collect())
                .collect(),
        }
    }
}

fn check_dimensions(points: &[Vec<f64>]) -> Result<usize> {
    let d = points
        .first()
        .map(Vec::len)
        .ok_or(Error::EmptyInput("no feature vectors"))?;
    if d == 0 {
        return Err(Error::InvalidInput(
            "zero-dimensional feature vectors".into(),
        ));
    }
    for p in points {
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
    }
    Ok(d)
}

/// Sample mean and sample covariance of the positives, with
/// [`VARIANCE_FLOOR`] added to the diagonal.
pub fn fit_reference(positives: &[Vec<f64>]) -> Result<GaussianDensity> {
    if positives.len() < 2 {
        return Err(Error::InsufficientData {
            what: "reference density",
            needed: 2,
            got: positives.len(),
        });
    }
    let d = check_dimensions(positives)?;
    let n = positives.len() as f64;
    let mut mean = vec![0.0; d];
    for p in positives {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut covariance = vec![vec![0.0; d]; d];
    for p in positives {
        for i in 0..d {
            for j in 0..d {
                covariance[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]);
            }
        }
    }
    for (i, row) in covariance.iter_mut().enumerate() {
        for c in row.iter_mut() {
            *c /= n - 1.0;
        }
        row[i] += VARIANCE_FLOOR;
    }
    Ok(GaussianDensity { mean, covariance })
}

/// `n` independent draws from `density`, deterministic for a given seed.
pub fn sample_artificial(density: &GaussianDensity, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidInput(
            "artificial sample count must be >= 1".into(),
        ));
    }
    let l = density.cholesky()?;
    let d = density.dimension();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = (0..d)
            .map(|i| density.mean[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>())
            .collect();
        out.push(x);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Class-probability estimator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl DiagComponent {
    fn log_pdf(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.variance)
            .zip(x)
            .map(|((m, v), xi)| -0.5 * (LN_2PI + v.ln() + (xi - m) * (xi - m) / v))
            .sum()
    }
}

/// Mixture of axis-aligned Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagMixture {
    pub components: Vec<DiagComponent>,
}

impl DiagMixture {
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        log_sum_exp(self.components.iter().map(|c| c.weight.ln() + c.log_pdf(x)))
    }

    /// Fits 1..=`max_components` components by EM and keeps the fit with the
    /// lowest BIC. For each count the best of a few deterministic starts is
    /// used; fits where any component carries less than two points of mass
    /// are discarded.
    pub fn fit(points: &[Vec<f64>], max_components: usize) -> Result<DiagMixture> {
        let d = check_dimensions(points)?;
        let n = points.len();
        let mut best: Option<(f64, DiagMixture)> = None;
        for k in 1..=max_components.max(1) {
            if k > 1 && (k as f64) * MIN_COMPONENT_MASS > n as f64 {
                break;
            }
            let starts = starting_partitions(points, k);
            let fits = starts
                .iter()
                .filter_map(|assign| fit_em(points, assign, k))
                .filter(|(mix, _)| {
                    k == 1
                        || mix
                            .components
                            .iter()
                            .all(|c| c.weight * (n as f64) >= MIN_COMPONENT_MASS - 1e-9)
                });
            let Some((mix, ll)) =
                fits.fold(None, |best: Option<(DiagMixture, f64)>, fit| match best {
                    Some(b) if b.1 >= fit.1 => Some(b),
                    _ => Some(fit),
                })
            else {
                continue;
            };
            let params = (k * 2 * d + k - 1) as f64;
            let bic = -2.0 * ll + params * (n as f64).ln();
            if best.as_ref().is_none_or(|(b, _)| bic < *b) {
                best = Some((bic, mix));
            }
        }
        best.map(|(_, m)| m).ok_or(Error::InsufficientData {
            what: "mixture fit",
            needed: 1,
            got: n,
        })
    }
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Deterministic starting partitions for EM: a farthest-point chain from each
/// of the point farthest from the centroid, the point nearest to it and the
/// most repeated point, plus a split that holds the repeats of the most
/// repeated point in one component and chains the rest over the others.
fn starting_partitions(points: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    let d = points[0].len();
    let n = points.len() as f64;
    let centroid: Vec<f64> = (0..d)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n)
        .collect();
    let farthest = argmax(points.iter().map(|p| sq_dist(p, &centroid)));
    let nearest = argmax(points.iter().map(|p| -sq_dist(p, &centroid)));
    let mode = argmax(
        points
            .iter()
            .map(|p| points.iter().filter(|q| *q == p).count() as f64),
    );
    let mut firsts = vec![farthest];
    for i in [nearest, mode] {
        if firsts.iter().all(|&f| points[f] != points[i]) {
            firsts.push(i);
        }
    }
    let mut partitions: Vec<Vec<usize>> = firsts
        .into_iter()
        .map(|first| nearest_seed(points, &farthest_point_chain(points, first, k)))
        .collect();

    let rest: Vec<Vec<f64>> = points
        .iter()
        .filter(|p| **p != points[mode])
        .cloned()
        .collect();
    if k > 1 && rest.len() >= k - 1 {
        let seeds = farthest_point_chain(&rest, 0, k - 1);
        let assigned = nearest_seed(&rest, &seeds);
        let mut it = assigned.into_iter();
        partitions.push(
            points
                .iter()
                .map(|p| {
                    if *p == points[mode] {
                        0
                    } else {
                        1 + it.next().unwrap_or(0)
                    }
                })
                .collect(),
        );
    }
    partitions
}

fn nearest_seed(points: &[Vec<f64>], seeds: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| argmax(seeds.iter().map(|s| -sq_dist(p, s))))
        .collect()
}

fn farthest_point_chain(points: &[Vec<f64>], first: usize, k: usize) -> Vec<Vec<f64>> {
    let mut seeds: Vec<Vec<f64>> = Vec::with_capacity(k);
    seeds.push(points[first].clone());
    while seeds.len() < k {
        let next = argmax(points.iter().map(|p| {
            seeds
                .iter()
                .map(|s| sq_dist(p, s))
                .fold(f64::INFINITY, f64::min)
        }));
        seeds.push(points[next].clone());
    }
    seeds
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn fit_em(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Option<(DiagMixture, f64)> {
    let n = points.len();
    let d = points[0].len();

    // the hard starting partition gives the initial responsibilities
    let mut resp = vec![vec![0.0; k]; n];
    for (i, &j) in assignment.iter().enumerate() {
        resp[i][j] = 1.0;
    }

    let mut mix = m_step(points, &resp, d)?;
    let mut prev_ll = f64::NEG_INFINITY;
    let mut ll = prev_ll;
    for _ in 0..EM_MAX_ITERATIONS {
        ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            let logs: Vec<f64> = mix
                .components
                .iter()
                .map(|c| c.weight.ln() + c.log_pdf(p))
                .collect();
            let lse = log_sum_exp(logs.iter().copied());
            ll += lse;
            for (j, l) in logs.iter().enumerate() {
                resp[i][j] = (l - lse).exp();
            }
        }
        mix = m_step(points, &resp, d)?;
        if (ll - prev_ll).abs() <= EM_TOLERANCE * (1.0 + ll.abs()) {
            break;
        }
        prev_ll = ll;
    }
    // log-likelihood under the final parameters
    let final_ll: f64 = points.iter().map(|p| mix.log_pdf(p)).sum();
    let ll = if final_ll.is_finite() { final_ll } else { ll };
    ll.is_finite().then_some((mix, ll))
}

fn m_step(points: &[Vec<f64>], resp: &[Vec<f64>], d: usize) -> Option<DiagMixture> {
    let n = points.len() as f64;
    let k = resp[0].len();
    let mut components = Vec::with_capacity(k);
    for j in 0..k {
        let mass: f64 = resp.iter().map(|r| r[j]).sum();
        if mass < 1e-9 {
            return None;
        }
        let mean: Vec<f64> = (0..d)
            .map(|dim| {
                points
                    .iter()
                    .zip(resp)
                    .map(|(p, r)| r[j] * p[dim])
                    .sum::<f64>()
                    / mass
            })
            .collect();
        let variance: Vec<f64> = (0..d)
            .map(|dim| {
                let v = points
                    .iter()
                    .zip(resp)
                    .map(|(p, r)| r[j] * (p[dim] - mean[dim]).powi(2))
                    .sum::<f64>()
                    / mass;
                v.max(VARIANCE_FLOOR)
            })
            .collect();
        components.push(DiagComponent {
            weight: mass / n,
            mean,
            variance,
        });
    }
    Some(DiagMixture { components })
}

/// Binary estimator of `P(target | x)` built from one mixture per class and
/// the class proportions as priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilityEstimator {
    pub target: DiagMixture,
    pub artificial: DiagMixture,
    pub target_prior: f64,
}

impl ClassProbabilityEstimator {
    /// `ln P(target|x) - ln P(artificial|x)` before clamping.
    pub fn log_odds(&self, x: &[f64]) -> f64 {
        self.target_prior.ln() + self.target.log_pdf(x)
            - (1.0 - self.target_prior).ln()
            - self.artificial.log_pdf(x)
    }

    /// `P(target | x)`, clamped to `[δ, 1 - δ]`.
    pub fn target_probability(&self, x: &[f64]) -> f64 {
        let lo = self.log_odds(x);
        let p = if lo.is_nan() {
            0.5
        } else if lo >= 0.0 {
            1.0 / (1.0 + (-lo).exp())
        } else {
            let e = lo.exp();
            e / (1.0 + e)
        };
        p.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    }
}

/// Target class: mixture of up to `max_components`; artificial class: one
/// Gaussian.
pub fn fit_class_probability(
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    max_components: usize,
) -> Result<ClassProbabilityEstimator> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InsufficientData {
            what: "class-probability estimator",
            needed: 1,
            got: positives.len().min(negatives.len()),
        });
    }
    let dp = check_dimensions(positives)?;
    let dn = check_dimensions(negatives)?;
    if dp != dn {
        return Err(Error::DimensionMismatch {
            expected: dp,
            got: dn,
        });
    }
    let total = (positives.len() + negatives.len()) as f64;
    Ok(ClassProbabilityEstimator {
        target: DiagMixture::fit(positives, max_components)?,
        artificial: DiagMixture::fit(negatives, 1)?,
        target_prior: positives.len() as f64 / total,
    })
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    /// Positive iff `P(C|X) >= threshold`.
    ProbThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccModel {
    /// Density the artificial data were drawn from, `P(X|A)`.
    pub reference: GaussianDensity,
    pub estimator: ClassProbabilityEstimator,
    /// `P(C)`.
    pub target_prior: f64,
    pub decision_rule: DecisionRule,
    pub threshold: f64,
    /// Normalisation captured from the training matrix, when trained from one.
    pub bounds: Option<FeatureBounds>,
    pub seed: u64,
    pub config: OccConfig,
}

impl OccModel {
    /// Trains on raw positive feature vectors (no feature bounds attached).
    pub fn fit(positives: &[Vec<f64>], config: &OccConfig, seed: u64) -> Result<OccModel> {
        config.validate()?;
        let reference = fit_reference(positives)?.widened(config.reference_spread);
        let negatives = sample_artificial(&reference, positives.len(), seed)?;
        let estimator = fit_class_probability(positives, &negatives, config.max_components)?;
        Ok(OccModel {
            target_prior: estimator.target_prior,
            reference,
            estimator,
            decision_rule: DecisionRule::ProbThreshold,
            threshold: config.threshold,
            bounds: None,
            seed,
            config: config.clone(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.reference.dimension()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn target_probability(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.estimator.target_probability(x))
    }
}

/// Fits reference, artificial data (1:1) and estimator on the matrix's
/// instances and attaches its feature bounds.
pub fn train_occ(matrix: &TrainingMatrix, config: &OccConfig, seed: u64) -> Result<OccModel> {
    let mut model = OccModel::fit(&matrix.feature_vectors(), config, seed)?;
    model.bounds = Some(matrix.bounds.clone());
    Ok(model)
}

/// `ln P(X|C)`, combined in log space.
pub fn occ_log_score(model: &OccModel, x: &[f64]) -> Result<f64> {
    let p = model.target_probability(x)?;
    let prior = model.target_prior;
    Ok(((1.0 - prior) / prior).ln() + (p / (1.0 - p)).ln() + model.reference.log_pdf(x)?)
}

/// Target density estimate `P(X|C)`.
pub fn occ_score(model: &OccModel, x: &[f64]) -> Result<f64> {
    occ_log_score(model, x).map(f64::exp)
}

pub fn occ_classify(model: &OccModel, x: &[f64]) -> Result<Classification> {
    let p = model.target_probability(x)?;
    Ok(match model.decision_rule {
        DecisionRule::ProbThreshold if p >= model.threshold => Classification::Positive,
        DecisionRule::ProbThreshold => Classification::Negative,
    })
}
