//! Extreme-value machinery.
//!
//! For each proxy the smallest distances to opposite-class samples form the
//! tail of a Weibull distribution. The fitted shape/scale pair turns the
//! distance into a probability of sample inclusion `psi`, which drives both
//! the open-set classifier and the proxy-redundancy test.

use serde::{Deserialize, Serialize};

use crate::embedding::{proxy_distance, Proxy, ProxySet};
use crate::par;
use crate::{Error, Result};

/// Floor applied to tail distances before fitting.
const TAIL_FLOOR: f64 = 1e-8;

/// Clamp range for the Weibull shape parameter.
const SHAPE_MIN: f64 = 0.05;
const SHAPE_MAX: f64 = 100.0;

/// Fitted per-proxy Weibull parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeibullParams {
    pub shape: f64,
    pub scale: f64,
    pub tail_size_used: usize,
}

/// EVT hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvtConfig {
    /// Tail size (capped at the available opposite-class count).
    pub tail_size: usize,
    /// Rejection threshold for unknown samples.
    pub reject_threshold: f64,
    /// Coverage threshold for proxy reduction.
    pub cover_threshold: f64,
}

impl Default for EvtConfig {
    fn default() -> Self {
        Self {
            tail_size: 500,
            reject_threshold: 0.75,
            cover_threshold: 0.999,
        }
    }
}

impl EvtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tail_size < 2 {
            return Err(Error::InvalidConfig("tail_size must be >= 2".into()));
        }
        if !(0.0 < self.reject_threshold && self.reject_threshold < 1.0) {
            return Err(Error::InvalidConfig(
                "reject_threshold must be in (0, 1)".into(),
            ));
        }
        if !(0.0 < self.cover_threshold && self.cover_threshold < 1.0) {
            return Err(Error::InvalidConfig(
                "cover_threshold must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Sorted tail of proxy-to-opposite-class distances.
#[derive(Debug, Clone)]
pub struct TailDistances {
    pub values: Vec<f64>,
    /// True when fewer than `tau` opposite-class samples were available.
    pub capped: bool,
}

/// The `min(tau, available)` smallest distances from a proxy to samples of
/// other classes, ascending.
pub fn tail_distances(
    proxy: &Proxy,
    embeddings: &[Vec<f64>],
    labels: &[usize],
    tau: usize,
) -> Result<TailDistances> {
    let mut dists: Vec<f64> = embeddings
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != proxy.class_id)
        .map(|(z, _)| proxy_distance(&proxy.vector, z))
        .collect();
    if dists.is_empty() {
        return Err(Error::NoOppositeClassSamples {
            class_id: proxy.class_id,
        });
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let capped = dists.len() < tau;
    dists.truncate(tau.min(dists.len()));
    Ok(TailDistances {
        values: dists,
        capped,
    })
}

/// Residual of the profile likelihood equation for the shape parameter:
/// `sum(m^k ln m)/sum(m^k) - 1/k - mean(ln m)`.
fn shape_residual(scaled: &[f64], log_m: &[f64], mean_log: f64, shape: f64) -> f64 {
    // scaled[i] = m_i / m_max to keep powers bounded
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, lm) in scaled.iter().zip(log_m) {
        let w = s.powf(shape);
        num += w * lm;
        den += w;
    }
    num / den - 1.0 / shape - mean_log
}

/// Derivative of the residual in the shape: the weighted variance of
/// `ln m` plus `1/k^2`; strictly positive, so Newton steps are safe.
fn shape_residual_deriv(scaled: &[f64], log_m: &[f64], shape: f64) -> f64 {
    let mut sw = 0.0;
    let mut swl = 0.0;
    let mut swll = 0.0;
    for (s, lm) in scaled.iter().zip(log_m) {
        let w = s.powf(shape);
        sw += w;
        swl += w * lm;
        swll += w * lm * lm;
    }
    let mean = swl / sw;
    (swll / sw - mean * mean) + 1.0 / (shape * shape)
}

/// Maximum-likelihood fit of a two-parameter Weibull to a tail of
/// distances. Bisection on the shape in [0.05, 100] followed by a Newton
/// polish; the scale follows in closed form.
pub fn fit_weibull(tail: &[f64]) -> Result<WeibullParams> {
    if tail.len() < 2 {
        return Err(Error::TailTooSmall(tail.len()));
    }
    let m: Vec<f64> = tail.iter().map(|&v| v.max(TAIL_FLOOR)).collect();
    let first = m[0];
    if m.iter().all(|&v| v == first) {
        return Err(Error::DegenerateTail);
    }
    let m_max = m.iter().cloned().fold(f64::MIN, f64::max);
    let scaled: Vec<f64> = m.iter().map(|&v| v / m_max).collect();
    let log_m: Vec<f64> = m.iter().map(|&v| v.ln()).collect();
    let mean_log = log_m.iter().sum::<f64>() / log_m.len() as f64;

    let f_lo = shape_residual(&scaled, &log_m, mean_log, SHAPE_MIN);
    let f_hi = shape_residual(&scaled, &log_m, mean_log, SHAPE_MAX);
    let mut shape = if f_lo >= 0.0 {
        SHAPE_MIN
    } else if f_hi <= 0.0 {
        SHAPE_MAX
    } else {
        let (mut lo, mut hi) = (SHAPE_MIN, SHAPE_MAX);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let f = shape_residual(&scaled, &log_m, mean_log, mid);
            if f.abs() < 1e-10 {
                lo = mid;
                hi = mid;
                break;
            }
            if f < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-13 {
                break;
            }
        }
        let mut k = 0.5 * (lo + hi);
        // Newton polish to the 1e-10 residual tolerance
        for _ in 0..50 {
            let f = shape_residual(&scaled, &log_m, mean_log, k);
            if f.abs() < 1e-10 {
                break;
            }
            let d = shape_residual_deriv(&scaled, &log_m, k);
            let next = k - f / d;
            if !next.is_finite() || next <= SHAPE_MIN || next >= SHAPE_MAX {
                break;
            }
            k = next;
        }
        k
    };
    shape = shape.clamp(SHAPE_MIN, SHAPE_MAX);

    // lambda = (mean(m^k))^(1/k), computed against m_max for stability
    let mean_pow = scaled.iter().map(|&s| s.powf(shape)).sum::<f64>() / scaled.len() as f64;
    let scale = m_max * mean_pow.powf(1.0 / shape);
    if !(shape.is_finite() && scale.is_finite() && scale > 0.0) {
        return Err(Error::NonFinite { op: "fit_weibull" });
    }
    Ok(WeibullParams {
        shape,
        scale,
        tail_size_used: tail.len(),
    })
}

/// Probability of sample inclusion from a raw distance.
pub fn psi_from_distance(distance: f64, w: &WeibullParams) -> f64 {
    (-(distance.max(0.0) / w.scale).powf(w.shape)).exp()
}

/// Probability that `z` lies within the boundary of `proxy`.
pub fn psi(proxy: &Proxy, z: &[f64], w: &WeibullParams) -> f64 {
    psi_from_distance(proxy_distance(&proxy.vector, z), w)
}

/// Classification outcome of the open-set classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Known(usize),
    Unknown,
}

/// The PSI-based open-set classifier: proxies, their Weibull boundaries,
/// and the rejection threshold.
#[derive(Debug, Clone)]
pub struct PsiClassifier {
    pub proxies: ProxySet,
    pub weibulls: Vec<WeibullParams>,
    pub reject_threshold: f64,
}

impl PsiClassifier {
    pub fn new(
        proxies: ProxySet,
        weibulls: Vec<WeibullParams>,
        reject_threshold: f64,
    ) -> Result<Self> {
        if weibulls.len() != proxies.len() {
            return Err(Error::MissingWeibull {
                proxy_index: weibulls.len(),
            });
        }
        proxies.validate()?;
        Ok(Self {
            proxies,
            weibulls,
            reject_threshold,
        })
    }

    pub fn class_count(&self) -> usize {
        self.proxies.class_count
    }

    /// Per-class posterior: the max psi over that class's proxies.
    pub fn class_posterior(&self, z: &[f64]) -> Vec<f64> {
        let mut post = vec![0.0; self.class_count()];
        for (p, w) in self.proxies.proxies.iter().zip(&self.weibulls) {
            let v = psi(p, z, w);
            if v > post[p.class_id] {
                post[p.class_id] = v;
            }
        }
        post
    }

    /// Argmax class if the max posterior clears the threshold, else
    /// Unknown. Ties break toward the lowest class id.
    pub fn classify(&self, z: &[f64]) -> Classification {
        let post = self.class_posterior(z);
        let mut best = 0usize;
        for (i, &v) in post.iter().enumerate() {
            if v > post[best] {
                best = i;
            }
        }
        if post[best] >= self.reject_threshold {
            Classification::Known(best)
        } else {
            Classification::Unknown
        }
    }

    /// Classify a whole dataset (parallel when the feature is on).
    pub fn classify_batch(&self, embeddings: &[Vec<f64>]) -> Vec<Classification> {
        par::map(embeddings, |z| self.classify(z))
    }

    /// Always-sequential twin of [`PsiClassifier::classify_batch`].
    pub fn classify_batch_seq(&self, embeddings: &[Vec<f64>]) -> Vec<Classification> {
        par::map_seq(embeddings, |z| self.classify(z))
    }
}

/// Exhaustive, disjoint partition of a dataset into pseudo-labeled known
/// samples and unknown samples. Returns `(known: (index, pseudo_label),
/// unknown: index)`.
pub fn split_known_unknown(
    embeddings: &[Vec<f64>],
    classifier: &PsiClassifier,
) -> (Vec<(usize, usize)>, Vec<usize>) {
    let decisions = classifier.classify_batch(embeddings);
    let mut known = Vec::new();
    let mut unknown = Vec::new();
    for (i, d) in decisions.into_iter().enumerate() {
        match d {
            Classification::Known(label) => known.push((i, label)),
            Classification::Unknown => unknown.push(i),
        }
    }
    (known, unknown)
}

/// Fit Weibull boundaries for every proxy against a labeled dataset,
/// parallel across proxies.
pub fn fit_all_proxies(
    proxies: &ProxySet,
    embeddings: &[Vec<f64>],
    labels: &[usize],
    tau: usize,
) -> Result<Vec<WeibullParams>> {
    par::map(&proxies.proxies, |p| {
        let tail = tail_distances(p, embeddings, labels, tau)?;
        fit_weibull(&tail.values)
    })
    .into_iter()
    .collect()
}

/// Always-sequential twin of [`fit_all_proxies`].
pub fn fit_all_proxies_seq(
    proxies: &ProxySet,
    embeddings: &[Vec<f64>],
    labels: &[usize],
    tau: usize,
) -> Result<Vec<WeibullParams>> {
    par::map_seq(&proxies.proxies, |p| {
        let tail = tail_distances(p, embeddings, labels, tau)?;
        fit_weibull(&tail.values)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ProxyOrigin;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn e(i: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn proxy_at(v: Vec<f64>, class: usize) -> Proxy {
        Proxy::new(v, class, ProxyOrigin::Initial)
    }

    /// Inverse-CDF Weibull sampler used as the recovery oracle.
    pub fn sample_weibull(shape: f64, scale: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                scale * (-u.ln()).powf(1.0 / shape)
            })
            .collect()
    }

    #[test]
    fn tail_nearest_is_orthogonal() {
        let p = proxy_at(e(0, 3), 0);
        let embeddings = vec![e(1, 3), e(0, 3).iter().map(|v| -v).collect()];
        let labels = vec![1, 1];
        let t = tail_distances(&p, &embeddings, &labels, 1).unwrap();
        assert_eq!(t.values, vec![1.0]);
        assert!(!t.capped);
    }

    #[test]
    fn tail_caps_at_available() {
        let p = proxy_at(e(0, 3), 0);
        let embeddings = vec![e(1, 3), e(2, 3)];
        let labels = vec![1, 1];
        let t = tail_distances(&p, &embeddings, &labels, 10).unwrap();
        assert_eq!(t.values.len(), 2);
        assert!(t.capped);
    }

    #[test]
    fn tail_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 6;
        let cloud: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                crate::embedding::normalize(&v)
            })
            .collect();
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let p = proxy_at(e(0, dim), 0);
        let t = tail_distances(&p, &cloud, &labels, 10).unwrap();
        let mut all: Vec<f64> = cloud
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l != 0)
            .map(|(z, _)| proxy_distance(&p.vector, z))
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(t.values, all[..10].to_vec());
    }

    #[test]
    fn tail_single_class_errors() {
        let p = proxy_at(e(0, 3), 0);
        let err = tail_distances(&p, &[e(1, 3)], &[0], 5).unwrap_err();
        assert!(matches!(err, Error::NoOppositeClassSamples { class_id: 0 }));
    }

    #[test]
    fn weibull_recovery() {
        let data = sample_weibull(2.0, 1.5, 10_000, 123);
        let w = fit_weibull(&data).unwrap();
        assert!(w.shape > 1.94 && w.shape < 2.06, "shape {}", w.shape);
        assert!(w.scale > 1.47 && w.scale < 1.53, "scale {}", w.scale);
    }

    #[test]
    fn exponential_is_weibull_shape_one() {
        // Exp(mean 2) is Weibull(kappa = 1, lambda = 2)
        let data = sample_weibull(1.0, 2.0, 10_000, 321);
        let w = fit_weibull(&data).unwrap();
        assert!((w.shape - 1.0).abs() < 0.03, "shape {}", w.shape);
        assert!((w.scale - 2.0).abs() < 0.06, "scale {}", w.scale);
    }

    #[test]
    fn degenerate_tail_errors() {
        assert!(matches!(
            fit_weibull(&[1.0, 1.0, 1.0]).unwrap_err(),
            Error::DegenerateTail
        ));
        assert!(matches!(
            fit_weibull(&[1.0]).unwrap_err(),
            Error::TailTooSmall(1)
        ));
    }

    #[test]
    fn psi_closed_forms() {
        let w = WeibullParams {
            shape: 2.0,
            scale: 0.5,
            tail_size_used: 10,
        };
        assert_eq!(psi_from_distance(0.0, &w), 1.0);
        assert!((psi_from_distance(0.5, &w) - (-1.0f64).exp()).abs() < 1e-12);
        assert!((psi_from_distance(1.0, &w) - (-4.0f64).exp()).abs() < 1e-12);
    }

    fn two_class_classifier(threshold: f64) -> PsiClassifier {
        let proxies = ProxySet::new(vec![proxy_at(e(0, 4), 0), proxy_at(e(1, 4), 1)], 2).unwrap();
        let w = WeibullParams {
            shape: 4.0,
            scale: 0.3,
            tail_size_used: 10,
        };
        PsiClassifier::new(proxies, vec![w.clone(), w], threshold).unwrap()
    }

    #[test]
    fn classify_on_proxy_and_antipodal() {
        let c = two_class_classifier(0.75);
        assert_eq!(c.classify(&e(0, 4)), Classification::Known(0));
        assert_eq!(c.classify(&e(1, 4)), Classification::Known(1));
        let far: Vec<f64> = e(2, 4);
        assert_eq!(c.classify(&far), Classification::Unknown);
    }

    #[test]
    fn classify_boundary_is_known() {
        // pick a threshold exactly equal to the posterior at some point
        let c = two_class_classifier(0.75);
        let post = c.class_posterior(&e(0, 4));
        let mut c2 = c.clone();
        c2.reject_threshold = post[0];
        assert_eq!(c2.classify(&e(0, 4)), Classification::Known(0));
    }

    #[test]
    fn posterior_takes_groupwise_max() {
        // two proxies of the same class at different spots
        let proxies = ProxySet::new(vec![proxy_at(e(0, 4), 0), proxy_at(e(1, 4), 0)], 1).unwrap();
        let w = WeibullParams {
            shape: 2.0,
            scale: 0.5,
            tail_size_used: 10,
        };
        let c = PsiClassifier::new(proxies, vec![w.clone(), w.clone()], 0.5).unwrap();
        let post = c.class_posterior(&e(1, 4));
        assert!((post[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_is_a_partition() {
        let c = two_class_classifier(0.75);
        let data = vec![e(0, 4), e(1, 4), e(2, 4), e(3, 4)];
        let (known, unknown) = split_known_unknown(&data, &c);
        assert_eq!(known.len() + unknown.len(), data.len());
        assert_eq!(
            known
                .iter()
                .map(|(i, _)| *i)
                .chain(unknown.iter().copied())
                .count(),
            4
        );
    }

    #[test]
    fn lowering_threshold_never_shrinks_known() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                crate::embedding::normalize(&v)
            })
            .collect();
        let mut prev_known = 0;
        for &eps in &[0.9, 0.7, 0.5, 0.3, 0.1] {
            let c = two_class_classifier(eps);
            let (known, _) = split_known_unknown(&data, &c);
            assert!(known.len() >= prev_known);
            prev_known = known.len();
        }
    }
}
