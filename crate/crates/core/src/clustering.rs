//! Novel-category discovery via affinity propagation, plus centroid
//! extraction for proxy initialization.
//!
//! The message passing follows the canonical formulation on the similarity
//! `s(i, k) = -||z_i - z_k||^2` with the preference set to the median of
//! the off-diagonal similarities. A deterministic 1e-9-scale jitter on the
//! diagonal breaks exact symmetry; responsibilities and availabilities are
//! updated row- and column-parallel.

use serde::{Deserialize, Serialize};

use crate::embedding::normalize;
use crate::par;
use crate::{Error, Result};

/// Preference (self-similarity) choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Preference {
    Named(String),
    Value(f64),
}

impl Default for Preference {
    fn default() -> Self {
        Preference::Named("median".into())
    }
}

/// Affinity propagation knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApConfig {
    /// Message damping factor in [0.5, 1).
    pub damping: f64,
    pub preference: Preference,
    pub max_iterations: usize,
    /// Iterations the exemplar set must stay stable to declare convergence.
    pub convergence_window: usize,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            damping: 0.9,
            preference: Preference::default(),
            max_iterations: 1000,
            convergence_window: 50,
        }
    }
}

impl ApConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..1.0).contains(&self.damping) {
            return Err(Error::InvalidConfig("damping must be in [0.5, 1)".into()));
        }
        if let Preference::Named(name) = &self.preference {
            if name != "median" {
                return Err(Error::InvalidConfig(format!(
                    "preference must be a number or \"median\", got \"{name}\""
                )));
            }
        }
        if self.max_iterations == 0 || self.convergence_window == 0 {
            return Err(Error::InvalidConfig("iteration counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Clustering outcome.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    /// Per-sample cluster index into `exemplars`.
    pub assignments: Vec<usize>,
    /// Exemplar sample index per cluster.
    pub exemplars: Vec<usize>,
    pub converged: bool,
    pub iterations_run: usize,
}

impl ClusterResult {
    pub fn cluster_count(&self) -> usize {
        self.exemplars.len()
    }
}

/// splitmix64, used for the deterministic diagonal jitter.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn jitter(index: usize) -> f64 {
    (splitmix64(index as u64) >> 11) as f64 / (1u64 << 53) as f64
}

/// Similarity matrix `-||z_i - z_k||^2`, row-parallel.
pub fn similarity_matrix(embeddings: &[Vec<f64>]) -> Vec<Vec<f64>> {
    par::map(embeddings, |zi| {
        embeddings
            .iter()
            .map(|zk| {
                -zi.iter()
                    .zip(zk)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .collect()
    })
}

/// Always-sequential twin of [`similarity_matrix`].
pub fn similarity_matrix_seq(embeddings: &[Vec<f64>]) -> Vec<Vec<f64>> {
    par::map_seq(embeddings, |zi| {
        embeddings
            .iter()
            .map(|zk| {
                -zi.iter()
                    .zip(zk)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .collect()
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

struct ApRun {
    exemplars: Vec<usize>,
    converged: bool,
    iterations_run: usize,
    oscillating: bool,
}

fn run_messages(s: &[Vec<f64>], damping: f64, cfg: &ApConfig) -> ApRun {
    let n = s.len();
    let mut r = vec![vec![0.0; n]; n];
    let mut a = vec![vec![0.0; n]; n];
    let mut prev_exemplars: Vec<usize> = Vec::new();
    let mut stable_for = 0usize;
    let mut exemplar_counts: Vec<usize> = Vec::new();
    let mut iterations_run = 0usize;
    let mut converged = false;

    for iter in 0..cfg.max_iterations {
        iterations_run = iter + 1;

        // responsibilities, row-parallel
        let new_r: Vec<Vec<f64>> = par::map_range(n, |i| {
            // top two values of a[i][k] + s[i][k] over k
            let mut max1 = f64::NEG_INFINITY;
            let mut max1_k = 0usize;
            let mut max2 = f64::NEG_INFINITY;
            for k in 0..n {
                let v = a[i][k] + s[i][k];
                if v > max1 {
                    max2 = max1;
                    max1 = v;
                    max1_k = k;
                } else if v > max2 {
                    max2 = v;
                }
            }
            (0..n)
                .map(|k| {
                    let best = if k == max1_k { max2 } else { max1 };
                    let raw = s[i][k] - best;
                    damping * r[i][k] + (1.0 - damping) * raw
                })
                .collect()
        });
        r = new_r;

        // availabilities, column-parallel
        let cols: Vec<Vec<f64>> = par::map_range(n, |k| {
            let mut pos_sum = 0.0;
            for (i, ri) in r.iter().enumerate() {
                if i != k {
                    pos_sum += ri[k].max(0.0);
                }
            }
            (0..n)
                .map(|i| {
                    let raw = if i == k {
                        pos_sum
                    } else {
                        (r[k][k] + pos_sum - r[i][k].max(0.0)).min(0.0)
                    };
                    damping * a[i][k] + (1.0 - damping) * raw
                })
                .collect()
        });
        for i in 0..n {
            for k in 0..n {
                a[i][k] = cols[k][i];
            }
        }

        let exemplars: Vec<usize> = (0..n).filter(|&k| r[k][k] + a[k][k] > 0.0).collect();
        exemplar_counts.push(exemplars.len());
        if exemplars == prev_exemplars && !exemplars.is_empty() {
            stable_for += 1;
            if stable_for >= cfg.convergence_window {
                converged = true;
                prev_exemplars = exemplars;
                break;
            }
        } else {
            stable_for = 0;
        }
        prev_exemplars = exemplars;
    }

    // period-2 oscillation of the exemplar count over the recent history
    let oscillating = if !converged && exemplar_counts.len() >= 20 {
        let tail = &exemplar_counts[exemplar_counts.len() - 20..];
        let flips = tail
            .windows(3)
            .filter(|w| w[0] == w[2] && w[0] != w[1])
            .count();
        flips >= 16
    } else {
        false
    };

    ApRun {
        exemplars: prev_exemplars,
        converged,
        iterations_run,
        oscillating,
    }
}

/// Affinity propagation on unit embeddings.
///
/// Non-convergence is not an error: the last stable exemplar set is
/// returned with `converged == false`. If the exemplar count oscillates,
/// the run restarts once with damping raised by 0.05 (capped at 0.95).
pub fn affinity_propagation(embeddings: &[Vec<f64>], cfg: &ApConfig) -> Result<ClusterResult> {
    cfg.validate()?;
    let n = embeddings.len();
    if n == 0 {
        return Err(Error::EmptyInput("affinity_propagation: no samples".into()));
    }
    if n == 1 {
        return Ok(ClusterResult {
            assignments: vec![0],
            exemplars: vec![0],
            converged: true,
            iterations_run: 0,
        });
    }

    let mut s = similarity_matrix(embeddings);
    let pref = match &cfg.preference {
        Preference::Value(v) => *v,
        Preference::Named(_) => {
            let mut off: Vec<f64> = (0..n)
                .flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| (i, k)))
                .map(|(i, k)| s[i][k])
                .collect();
            median(&mut off)
        }
    };
    // jitter below the preference so boundary-degenerate inputs (duplicate
    // points whose similarity equals the median) resolve toward merging
    for (k, row) in s.iter_mut().enumerate() {
        row[k] = pref - 1e-9 * (1.0 + jitter(k));
    }

    let mut run = run_messages(&s, cfg.damping, cfg);
    if run.oscillating && cfg.damping < 0.95 {
        let bumped = (cfg.damping + 0.05).min(0.95);
        log::debug!("affinity propagation oscillated; restarting with damping {bumped}");
        run = run_messages(&s, bumped, cfg);
    }

    let mut exemplars = run.exemplars;
    if exemplars.is_empty() {
        // fall back to the single best self-affinity candidate
        let best = (0..n)
            .max_by(|&a_, &b_| s[a_][a_].partial_cmp(&s[b_][b_]).unwrap().then(b_.cmp(&a_)))
            .unwrap();
        exemplars = vec![best];
    }

    let assignments: Vec<usize> = (0..n)
        .map(|i| {
            if let Some(c) = exemplars.iter().position(|&k| k == i) {
                return c;
            }
            let mut best_c = 0usize;
            let mut best_s = f64::NEG_INFINITY;
            for (c, &k) in exemplars.iter().enumerate() {
                if s[i][k] > best_s {
                    best_s = s[i][k];
                    best_c = c;
                }
            }
            best_c
        })
        .collect();

    Ok(ClusterResult {
        assignments,
        exemplars,
        converged: run.converged,
        iterations_run: run.iterations_run,
    })
}

/// Per-cluster arithmetic mean re-normalized to the unit sphere.
pub fn cluster_centroids(result: &ClusterResult, embeddings: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = result.cluster_count();
    if k == 0 || embeddings.is_empty() {
        return Vec::new();
    }
    let dim = embeddings[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in result.assignments.iter().enumerate() {
        for (d, v) in embeddings[i].iter().enumerate() {
            sums[c][d] += v;
        }
        counts[c] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(sum, &cnt)| {
            let mean: Vec<f64> = sum.iter().map(|v| v / cnt.max(1) as f64).collect();
            normalize(&mean)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn e(i: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn single_sample_is_its_own_exemplar() {
        let res = affinity_propagation(&[e(0, 3)], &ApConfig::default()).unwrap();
        assert_eq!(res.assignments, vec![0]);
        assert_eq!(res.exemplars, vec![0]);
        assert!(res.converged);
    }

    #[test]
    fn duplicate_points_share_a_cluster() {
        let res = affinity_propagation(&[e(0, 3), e(0, 3)], &ApConfig::default()).unwrap();
        assert_eq!(res.cluster_count(), 1);
        assert_eq!(res.assignments[0], res.assignments[1]);
    }

    fn three_groups(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        // three tight groups of 20 points each around orthogonal directions;
        // inter-group distance far exceeds 10x the intra-group spread
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 8;
        let spread = 0.02;
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for g in 0..3 {
            let center = e(g, dim);
            for _ in 0..20 {
                let p: Vec<f64> = center
                    .iter()
                    .map(|&c| c + spread * rng.gen_range(-1.0..1.0))
                    .collect();
                points.push(normalize(&p));
                truth.push(g);
            }
        }
        (points, truth)
    }

    #[test]
    fn three_separated_groups_recovered_exactly() {
        let (points, truth) = three_groups(17);
        let res = affinity_propagation(&points, &ApConfig::default()).unwrap();
        assert_eq!(res.cluster_count(), 3);
        // purity 1.0: every cluster contains one ground-truth group
        for c in 0..3 {
            let members: Vec<usize> = res
                .assignments
                .iter()
                .enumerate()
                .filter(|(_, &a)| a == c)
                .map(|(i, _)| truth[i])
                .collect();
            assert!(
                members.windows(2).all(|w| w[0] == w[1]),
                "mixed cluster {c}"
            );
        }
    }

    #[test]
    fn deterministic_given_inputs() {
        let (points, _) = three_groups(3);
        let a = affinity_propagation(&points, &ApConfig::default()).unwrap();
        let b = affinity_propagation(&points, &ApConfig::default()).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.exemplars, b.exemplars);
        assert_eq!(a.iterations_run, b.iterations_run);
    }

    #[test]
    fn raising_preference_never_decreases_exemplars() {
        let (points, _) = three_groups(9);
        let mut prev = 0usize;
        for pref in [-4.0, -1.0, -0.25, -0.05] {
            let cfg = ApConfig {
                preference: Preference::Value(pref),
                ..Default::default()
            };
            let res = affinity_propagation(&points, &cfg).unwrap();
            assert!(
                res.cluster_count() >= prev,
                "pref {pref}: {} < {prev}",
                res.cluster_count()
            );
            prev = res.cluster_count();
        }
    }

    #[test]
    fn centroids_are_normalized_means() {
        let result = ClusterResult {
            assignments: vec![0, 0],
            exemplars: vec![0],
            converged: true,
            iterations_run: 1,
        };
        let pts = vec![e(0, 3), e(1, 3)];
        let cents = cluster_centroids(&result, &pts);
        let expected = normalize(&[0.5, 0.5, 0.0]);
        for (a, b) in cents[0].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn assignments_form_a_function() {
        let (points, _) = three_groups(4);
        let res = affinity_propagation(&points, &ApConfig::default()).unwrap();
        assert_eq!(res.assignments.len(), points.len());
        assert!(res.assignments.iter().all(|&a| a < res.cluster_count()));
        for (c, &k) in res.exemplars.iter().enumerate() {
            assert_eq!(res.assignments[k], c);
        }
    }
}
