//! Redundant-proxy removal via greedy set cover.
//!
//! After a continual step, newly discovered proxies often over-segment the
//! true novel categories. A proxy `i` covers a proxy `j` when the inclusion
//! score of `j`'s vector under `i`'s tail model clears a threshold `zeta`
//! close to 1; keeping a minimal covering subset of the new proxies and
//! merging the rest collapses duplicate clusters. Coverage is directional:
//! only the covering proxy's Weibull is consulted.

use std::collections::BTreeMap;

use crate::embedding::{Proxy, ProxySet};
use crate::evt::{psi, WeibullParams};
use crate::par;
use crate::{Error, Result};

/// A set-cover instance over new proxy ids.
#[derive(Debug, Clone)]
pub struct CoverInstance {
    /// Proxy ids forming the universe (new proxies only).
    pub universe: Vec<usize>,
    /// Per-universe-entry covered ids: `sets[i]` lists the ids covered by
    /// `universe[i]`. Always contains `universe[i]` itself.
    pub sets: Vec<Vec<usize>>,
    pub zeta: f64,
}

impl CoverInstance {
    /// Checks the covering constraint: every universe element appears in at
    /// least one chosen set.
    pub fn is_cover(&self, chosen: &[usize]) -> bool {
        self.universe.iter().all(|&j| {
            chosen.iter().any(|&c| {
                let i = self.universe.iter().position(|&u| u == c);
                i.map(|i| self.sets[i].contains(&j)).unwrap_or(false)
            })
        })
    }
}

/// Builds the directed coverage sets for the given new proxies.
pub fn coverage_sets(
    proxies: &ProxySet,
    weibulls: &[WeibullParams],
    new_proxy_ids: &[usize],
    zeta: f64,
) -> Result<CoverInstance> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::InvalidConfig(format!(
            "zeta must be in [0, 1], got {zeta}"
        )));
    }
    for &id in new_proxy_ids {
        if id >= proxies.len() {
            return Err(Error::DimensionMismatch(format!(
                "coverage_sets: proxy id {id} out of range ({} proxies)",
                proxies.len()
            )));
        }
        if id >= weibulls.len() {
            return Err(Error::MissingWeibull { proxy_index: id });
        }
    }
    let sets = par::map(new_proxy_ids, |&i| {
        let pi = &proxies.proxies[i];
        let wi = &weibulls[i];
        new_proxy_ids
            .iter()
            .copied()
            .filter(|&j| i == j || psi(pi, &proxies.proxies[j].vector, wi) >= zeta)
            .collect()
    });
    Ok(CoverInstance {
        universe: new_proxy_ids.to_vec(),
        sets,
        zeta,
    })
}

/// Greedy set cover: repeatedly keep the proxy covering the most still
/// uncovered ids, ties broken by lowest proxy id. Returns the kept ids in
/// selection order.
pub fn greedy_set_cover(instance: &CoverInstance) -> Vec<usize> {
    greedy_set_cover_with_map(instance).0
}

/// Like [`greedy_set_cover`], additionally returning for every universe
/// element the kept proxy that first covered it.
pub fn greedy_set_cover_with_map(instance: &CoverInstance) -> (Vec<usize>, BTreeMap<usize, usize>) {
    let n = instance.universe.len();
    let mut covered = vec![false; n];
    let mut covered_count = 0usize;
    let mut kept = Vec::new();
    let mut first_coverer: BTreeMap<usize, usize> = BTreeMap::new();

    let pos: BTreeMap<usize, usize> = instance
        .universe
        .iter()
        .enumerate()
        .map(|(i, &u)| (u, i))
        .collect();

    while covered_count < n {
        let mut best: Option<(usize, usize)> = None; // (gain, universe index)
        for (i, set) in instance.sets.iter().enumerate() {
            let gain = set.iter().filter(|&&j| !covered[pos[&j]]).count();
            let beats = match best {
                None => gain > 0,
                Some((bg, bi)) => {
                    gain > bg || (gain == bg && instance.universe[i] < instance.universe[bi])
                }
            };
            if beats {
                best = Some((gain, i));
            }
        }
        let Some((_, i)) = best else { break };
        let keeper = instance.universe[i];
        kept.push(keeper);
        for &j in &instance.sets[i] {
            let pj = pos[&j];
            if !covered[pj] {
                covered[pj] = true;
                covered_count += 1;
                first_coverer.insert(j, keeper);
            }
        }
    }
    (kept, first_coverer)
}

/// Result of one reduction pass.
#[derive(Debug, Clone)]
pub struct ReductionOutcome {
    pub proxies: ProxySet,
    /// Tail models of the surviving proxies, same order.
    pub weibulls: Vec<WeibullParams>,
    pub pseudo_labels: Vec<usize>,
    /// Original ids of the new proxies that were kept.
    pub kept_new_proxy_ids: Vec<usize>,
    /// Old class id to new class id, merge plus recompaction applied.
    pub class_remap: Vec<usize>,
}

/// Removes redundant new proxies and merges their classes.
///
/// Only proxies listed in `new_proxy_ids` are candidates; everything else
/// is left untouched. A removed proxy's class is absorbed by the class of
/// the kept proxy that first covered it, sample pseudo-labels are remapped
/// the same way, and class ids are recompacted to a contiguous range.
pub fn reduce_model(
    proxies: &ProxySet,
    weibulls: &[WeibullParams],
    new_proxy_ids: &[usize],
    zeta: f64,
    pseudo_labels: &[usize],
) -> Result<ReductionOutcome> {
    if weibulls.len() != proxies.len() {
        return Err(Error::DimensionMismatch(format!(
            "reduce_model: {} proxies but {} tail models",
            proxies.len(),
            weibulls.len()
        )));
    }

    let instance = coverage_sets(proxies, weibulls, new_proxy_ids, zeta)?;
    let (kept, first_coverer) = greedy_set_cover_with_map(&instance);

    // class of removed proxy -> class of its keeper
    let mut merge: BTreeMap<usize, usize> = BTreeMap::new();
    for &id in new_proxy_ids {
        if kept.contains(&id) {
            continue;
        }
        let keeper = first_coverer[&id];
        merge.insert(
            proxies.proxies[id].class_id,
            proxies.proxies[keeper].class_id,
        );
    }

    let survives = |id: usize| -> bool { !new_proxy_ids.contains(&id) || kept.contains(&id) };

    // surviving class ids in increasing order define the compaction
    let mut surviving_classes: Vec<usize> = proxies
        .proxies
        .iter()
        .enumerate()
        .filter(|(id, _)| survives(*id))
        .map(|(_, p)| p.class_id)
        .collect();
    surviving_classes.sort_unstable();
    surviving_classes.dedup();
    let compact: BTreeMap<usize, usize> = surviving_classes
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();

    let remap_class = |c: usize| -> usize {
        let target = *merge.get(&c).unwrap_or(&c);
        compact[&target]
    };
    let class_remap: Vec<usize> = (0..proxies.class_count).map(remap_class).collect();

    let new_proxies: Vec<Proxy> = proxies
        .proxies
        .iter()
        .enumerate()
        .filter(|(id, _)| survives(*id))
        .map(|(_, p)| Proxy::new(p.vector.clone(), class_remap[p.class_id], p.origin))
        .collect();
    let new_weibulls: Vec<WeibullParams> = weibulls
        .iter()
        .enumerate()
        .filter(|(id, _)| survives(*id))
        .map(|(_, w)| w.clone())
        .collect();
    let reduced = ProxySet::new(new_proxies, surviving_classes.len())?;

    let remapped_labels: Vec<usize> = pseudo_labels.iter().map(|&c| class_remap[c]).collect();

    Ok(ReductionOutcome {
        proxies: reduced,
        weibulls: new_weibulls,
        pseudo_labels: remapped_labels,
        kept_new_proxy_ids: kept,
        class_remap,
    })
}
