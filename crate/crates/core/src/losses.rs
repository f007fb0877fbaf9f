//! Training objectives: proxy-anchor loss, EVT inclusion loss, feature
//! distillation, feature replay, and their weighted combination.
//!
//! Each loss exists in two forms: a `*_graph` builder that composes tape
//! primitives (used by the trainer, where embeddings and proxies are live
//! parameters) and a plain function of concrete vectors for evaluation and
//! testing. Both compute the same value.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::embedding::{normalize, ProxySet};
use crate::evt::WeibullParams;
use crate::numerics::{Tape, Var};
use crate::{Error, Result};

/// Proxy-anchor hyperparameters and per-term weights of the total loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Scaling factor applied to similarities inside the exponent.
    pub alpha: f64,
    /// Margin subtracted from (added to) positive (negative) similarities.
    pub delta: f64,
    pub pa_weight: f64,
    pub kd_weight: f64,
    pub fr_weight: f64,
    /// When true, the negative term ranges over all proxies instead of only
    /// proxies whose class is absent from the batch.
    pub negatives_all_proxies: bool,
    /// When true, the distillation term keeps its literal negative sign
    /// instead of acting as a drift penalty.
    pub kd_literal_sign: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 32.0,
            delta: 0.1,
            pa_weight: 1.0,
            kd_weight: 1.0,
            fr_weight: 1.0,
            negatives_all_proxies: false,
            kd_literal_sign: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.delta <= 0.0 {
            return Err(Error::InvalidConfig(
                "alpha and delta must be positive".into(),
            ));
        }
        if self.pa_weight < 0.0 || self.kd_weight < 0.0 || self.fr_weight < 0.0 {
            return Err(Error::InvalidConfig(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A batch of unit embeddings with class labels.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(embeddings: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "batch: {} embeddings vs {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Gaussian feature-replay settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    /// Std. deviation of the per-proxy Gaussian.
    pub sigma: f64,
    /// Synthetic samples per old proxy. `None` lets the pipeline balance
    /// the count against the per-class volume of the current step data.
    pub samples_per_class: Option<usize>,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            samples_per_class: None,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(Error::InvalidConfig("replay sigma must be positive".into()));
        }
        if self.samples_per_class == Some(0) {
            return Err(Error::InvalidConfig(
                "replay samples_per_class must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], proxy_classes: &[usize]) -> Result<()> {
    let classes: BTreeSet<usize> = proxy_classes.iter().copied().collect();
    for &l in labels {
        if !classes.contains(&l) {
            return Err(Error::LabelWithoutProxy(l));
        }
    }
    Ok(())
}

/// Proxy-anchor loss over tape nodes.
///
/// Positive proxies are those whose class appears in the batch. Negative
/// proxies are those whose class does not (the `negatives_all_proxies` flag
/// switches to the all-proxies convention). An empty positive or negative
/// proxy set contributes zero to its term.
pub fn pa_loss_graph(
    tape: &mut Tape,
    embeddings: &[Var],
    labels: &[usize],
    proxy_vars: &[Var],
    proxy_classes: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    if embeddings.is_empty() {
        return Err(Error::EmptyInput("pa_loss: empty batch".into()));
    }
    check_labels(labels, proxy_classes)?;

    let batch_classes: BTreeSet<usize> = labels.iter().copied().collect();
    let pos_proxies: Vec<usize> = (0..proxy_vars.len())
        .filter(|&i| batch_classes.contains(&proxy_classes[i]))
        .collect();
    let neg_proxies: Vec<usize> = if cfg.negatives_all_proxies {
        (0..proxy_vars.len()).collect()
    } else {
        (0..proxy_vars.len())
            .filter(|&i| !batch_classes.contains(&proxy_classes[i]))
            .collect()
    };

    let mut terms = Vec::new();

    if !pos_proxies.is_empty() {
        let mut proxy_terms = Vec::new();
        for &pi in &pos_proxies {
            let mut exps = Vec::new();
            for (zi, &z) in embeddings.iter().enumerate() {
                if labels[zi] != proxy_classes[pi] {
                    continue;
                }
                let s = tape.dot(z, proxy_vars[pi])?;
                let shifted = tape.add_const(s, -cfg.delta)?;
                let scaled = tape.mul_const(shifted, -cfg.alpha)?;
                exps.push(tape.exp(scaled)?);
            }
            if exps.is_empty() {
                continue;
            }
            let total = tape.sum(&exps)?;
            let one_plus = tape.add_const(total, 1.0)?;
            proxy_terms.push(tape.ln(one_plus)?);
        }
        if !proxy_terms.is_empty() {
            let s = tape.sum(&proxy_terms)?;
            terms.push(tape.mul_const(s, 1.0 / pos_proxies.len() as f64)?);
        }
    }

    if !neg_proxies.is_empty() {
        let mut proxy_terms = Vec::new();
        for &pi in &neg_proxies {
            let mut exps = Vec::new();
            for (zi, &z) in embeddings.iter().enumerate() {
                if labels[zi] == proxy_classes[pi] {
                    continue;
                }
                let s = tape.dot(z, proxy_vars[pi])?;
                let shifted = tape.add_const(s, cfg.delta)?;
                let scaled = tape.mul_const(shifted, cfg.alpha)?;
                exps.push(tape.exp(scaled)?);
            }
            if exps.is_empty() {
                continue;
            }
            let total = tape.sum(&exps)?;
            let one_plus = tape.add_const(total, 1.0)?;
            proxy_terms.push(tape.ln(one_plus)?);
        }
        if !proxy_terms.is_empty() {
            let s = tape.sum(&proxy_terms)?;
            terms.push(tape.mul_const(s, 1.0 / neg_proxies.len() as f64)?);
        }
    }

    match terms.len() {
        0 => tape.scalar(0.0),
        1 => Ok(terms[0]),
        _ => tape.sum(&terms),
    }
}

/// Proxy-anchor loss of a concrete batch against a proxy set.
pub fn pa_loss(batch: &LabeledBatch, proxies: &ProxySet, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let z: Vec<Var> = batch
        .embeddings
        .iter()
        .map(|e| tape.constant(e))
        .collect::<Result<_>>()?;
    let p: Vec<Var> = proxies
        .proxies
        .iter()
        .map(|p| tape.constant(&p.vector))
        .collect::<Result<_>>()?;
    let out = pa_loss_graph(&mut tape, &z, &batch.labels, &p, &proxies.class_ids(), cfg)?;
    tape.scalar_value(out)
}

/// Builds `psi = exp(-(d / lambda)^kappa)` on the tape from a similarity
/// node, with `d = 1 - s`. Weibull parameters are constants.
fn psi_node(tape: &mut Tape, sim: Var, w: &WeibullParams) -> Result<Var> {
    let neg = tape.neg(sim)?;
    let d = tape.add_const(neg, 1.0)?;
    let scaled = tape.mul_const(d, 1.0 / w.scale)?;
    let powed = tape.pow_const(scaled, w.shape)?;
    let negp = tape.neg(powed)?;
    tape.exp(negp)
}

/// EVT inclusion loss over tape nodes. Positive samples are pushed toward
/// inclusion probability 1 under their proxy's Weibull boundary; negative
/// samples are pushed toward 0. The Weibull parameters are constants.
pub fn evt_loss_graph(
    tape: &mut Tape,
    embeddings: &[Var],
    labels: &[usize],
    proxy_vars: &[Var],
    proxy_classes: &[usize],
    weibulls: &[WeibullParams],
) -> Result<Var> {
    if embeddings.is_empty() {
        return Err(Error::EmptyInput("evt_loss: empty batch".into()));
    }
    if weibulls.len() != proxy_vars.len() {
        return Err(Error::MissingWeibull {
            proxy_index: weibulls.len(),
        });
    }
    check_labels(labels, proxy_classes)?;

    let batch_classes: BTreeSet<usize> = labels.iter().copied().collect();
    let pos_proxies: Vec<usize> = (0..proxy_vars.len())
        .filter(|&i| batch_classes.contains(&proxy_classes[i]))
        .collect();
    let neg_proxies: Vec<usize> = (0..proxy_vars.len())
        .filter(|&i| !batch_classes.contains(&proxy_classes[i]))
        .collect();

    let mut terms = Vec::new();

    if !pos_proxies.is_empty() {
        let mut proxy_terms = Vec::new();
        for &pi in &pos_proxies {
            let mut inner = Vec::new();
            for (zi, &z) in embeddings.iter().enumerate() {
                if labels[zi] != proxy_classes[pi] {
                    continue;
                }
                let s = tape.dot(z, proxy_vars[pi])?;
                let psi = psi_node(tape, s, &weibulls[pi])?;
                let neg_psi = tape.neg(psi)?;
                inner.push(tape.add_const(neg_psi, 1.0)?);
            }
            if inner.is_empty() {
                continue;
            }
            let total = tape.sum(&inner)?;
            let one_plus = tape.add_const(total, 1.0)?;
            proxy_terms.push(tape.ln(one_plus)?);
        }
        if !proxy_terms.is_empty() {
            let s = tape.sum(&proxy_terms)?;
            terms.push(tape.mul_const(s, 1.0 / pos_proxies.len() as f64)?);
        }
    }

    if !neg_proxies.is_empty() {
        let mut proxy_terms = Vec::new();
        for &pi in &neg_proxies {
            let mut inner = Vec::new();
            for (zi, &z) in embeddings.iter().enumerate() {
                if labels[zi] == proxy_classes[pi] {
                    continue;
                }
                let s = tape.dot(z, proxy_vars[pi])?;
                inner.push(psi_node(tape, s, &weibulls[pi])?);
            }
            if inner.is_empty() {
                continue;
            }
            let total = tape.sum(&inner)?;
            let one_plus = tape.add_const(total, 1.0)?;
            proxy_terms.push(tape.ln(one_plus)?);
        }
        if !proxy_terms.is_empty() {
            let s = tape.sum(&proxy_terms)?;
            terms.push(tape.mul_const(s, 1.0 / neg_proxies.len() as f64)?);
        }
    }

    match terms.len() {
        0 => tape.scalar(0.0),
        1 => Ok(terms[0]),
        _ => tape.sum(&terms),
    }
}

/// EVT loss of a concrete batch.
pub fn evt_loss(
    batch: &LabeledBatch,
    proxies: &ProxySet,
    weibulls: &[WeibullParams],
) -> Result<f64> {
    let mut tape = Tape::new();
    let z: Vec<Var> = batch
        .embeddings
        .iter()
        .map(|e| tape.constant(e))
        .collect::<Result<_>>()?;
    let p: Vec<Var> = proxies
        .proxies
        .iter()
        .map(|p| tape.constant(&p.vector))
        .collect::<Result<_>>()?;
    let out = evt_loss_graph(
        &mut tape,
        &z,
        &batch.labels,
        &p,
        &proxies.class_ids(),
        weibulls,
    )?;
    tape.scalar_value(out)
}

/// Distillation loss over tape nodes: mean L2 distance between the frozen
/// teacher embeddings (constants) and the current embeddings. Applied as a
/// positive drift penalty unless `literal_sign` keeps the printed minus.
pub fn kd_loss_graph(
    tape: &mut Tape,
    old_embeddings: &[Vec<f64>],
    new_embeddings: &[Var],
    literal_sign: bool,
) -> Result<Var> {
    if old_embeddings.len() != new_embeddings.len() {
        return Err(Error::DimensionMismatch(format!(
            "kd_loss: {} old vs {} new embeddings",
            old_embeddings.len(),
            new_embeddings.len()
        )));
    }
    if old_embeddings.is_empty() {
        return tape.scalar(0.0);
    }
    let mut norms = Vec::new();
    for (old, &new) in old_embeddings.iter().zip(new_embeddings) {
        let old_c = tape.constant(old)?;
        let diff = tape.sub(new, old_c)?;
        let sq = tape.dot(diff, diff)?;
        norms.push(tape.sqrt(sq)?);
    }
    let total = tape.sum(&norms)?;
    let sign = if literal_sign { -1.0 } else { 1.0 };
    tape.mul_const(total, sign / norms.len() as f64)
}

/// Distillation loss of concrete embedding lists.
pub fn kd_loss(old_embeddings: &[Vec<f64>], new_embeddings: &[Vec<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let new_vars: Vec<Var> = new_embeddings
        .iter()
        .map(|e| tape.constant(e))
        .collect::<Result<_>>()?;
    let out = kd_loss_graph(&mut tape, old_embeddings, &new_vars, false)?;
    tape.scalar_value(out)
}

/// Materialize the synthetic replay batch: `samples_per_class` draws from
/// `N(p, sigma^2 I)` per old proxy, re-normalized to the unit sphere and
/// labeled with the proxy's class. Deterministic given the seed.
pub fn replay_batch(
    old_proxies: &ProxySet,
    sigma: f64,
    samples_per_class: usize,
    seed: u64,
) -> LabeledBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    for p in &old_proxies.proxies {
        for _ in 0..samples_per_class {
            let z: Vec<f64> = p
                .vector
                .iter()
                .map(|&v| {
                    v + sigma
                        * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect();
            embeddings.push(normalize(&z));
            labels.push(p.class_id);
        }
    }
    LabeledBatch { embeddings, labels }
}

/// Feature replay loss: proxy-anchor loss of the synthetic batch against
/// the full proxy set. Gradient reaches the proxies only.
pub fn feature_replay_loss(
    old_proxies: &ProxySet,
    cfg: &ReplayConfig,
    full_proxies: &ProxySet,
    loss_cfg: &LossConfig,
    rng_seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    let spc = cfg.samples_per_class.unwrap_or(1);
    let synthetic = replay_batch(old_proxies, cfg.sigma, spc, rng_seed);
    pa_loss(&synthetic, full_proxies, loss_cfg)
}

/// Inputs to the combined continual-update loss.
pub struct TotalLossInputs<'a> {
    pub batch: &'a LabeledBatch,
    pub old_embeddings: &'a [Vec<f64>],
    pub new_embeddings_for_kd: &'a [Vec<f64>],
    pub replay: &'a LabeledBatch,
}

/// Weighted sum of the proxy-anchor, feature-replay, and distillation
/// terms. Unit weights reproduce the unweighted sum of the update rule.
pub fn total_loss(
    inputs: &TotalLossInputs<'_>,
    proxies: &ProxySet,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p: Vec<Var> = proxies
        .proxies
        .iter()
        .map(|p| tape.constant(&p.vector))
        .collect::<Result<_>>()?;
    let classes = proxies.class_ids();

    let mut total = tape.scalar(0.0)?;
    if cfg.pa_weight != 0.0 && !inputs.batch.is_empty() {
        let z: Vec<Var> = inputs
            .batch
            .embeddings
            .iter()
            .map(|e| tape.constant(e))
            .collect::<Result<_>>()?;
        let pa = pa_loss_graph(&mut tape, &z, &inputs.batch.labels, &p, &classes, cfg)?;
        let weighted = tape.mul_const(pa, cfg.pa_weight)?;
        total = tape.add(total, weighted)?;
    }
    if cfg.fr_weight != 0.0 && !inputs.replay.is_empty() {
        let z: Vec<Var> = inputs
            .replay
            .embeddings
            .iter()
            .map(|e| tape.constant(e))
            .collect::<Result<_>>()?;
        let fr = pa_loss_graph(&mut tape, &z, &inputs.replay.labels, &p, &classes, cfg)?;
        let weighted = tape.mul_const(fr, cfg.fr_weight)?;
        total = tape.add(total, weighted)?;
    }
    if cfg.kd_weight != 0.0 && !inputs.old_embeddings.is_empty() {
        let new_vars: Vec<Var> = inputs
            .new_embeddings_for_kd
            .iter()
            .map(|e| tape.constant(e))
            .collect::<Result<_>>()?;
        let kd = kd_loss_graph(
            &mut tape,
            inputs.old_embeddings,
            &new_vars,
            cfg.kd_literal_sign,
        )?;
        let weighted = tape.mul_const(kd, cfg.kd_weight)?;
        total = tape.add(total, weighted)?;
    }
    tape.scalar_value(total)
}
