//! One-shot magnitude pruning.
//!
//! Weights are ranked by `|w|` ascending with ties broken by
//! `(entry order, flat index)`; the first `k` of that ranking are removed.
//! Global scope ranks all prunable weights jointly with `k = floor(p N)`.
//! Grouped scope ranks within each group using per-group counts from
//! [`resolve_group_rates`].

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub name: String,
    /// Parameter entry names in this group.
    pub members: Vec<String>,
    /// Absolute offset added to the overall rate; nonzero marks the group as skewed.
    pub skew: f64,
    /// Frozen groups are never pruned and do not count towards `N`.
    pub frozen: bool,
}

impl GroupSpec {
    pub fn new(name: impl Into<String>, members: &[&str]) -> Self {
        GroupSpec {
            name: name.into(),
            members: members.iter().map(|s| s.to_string()).collect(),
            skew: 0.0,
            frozen: false,
        }
    }

    pub fn skewed(mut self, skew: f64) -> Self {
        self.skew = skew;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PruneScope {
    Global,
    Groups(Vec<GroupSpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSpec {
    pub rate: f64,
    pub scope: PruneScope,
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("pruning rate {p} outside [0, 1)")));
    }
    Ok(())
}

/// Keep (1) / drop (0) flags for one prunable entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub keep: Vec<u8>,
}

/// One entry per prunable parameter, in parameter order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Mask {
    pub entries: Vec<MaskEntry>,
}

impl Mask {
    pub fn all_ones(params: &ParamSet) -> Self {
        Mask {
            entries: params
                .entries()
                .iter()
                .filter(|e| e.prunable)
                .map(|e| MaskEntry {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    keep: vec![1; e.value.len()],
                })
                .collect(),
        }
    }

    pub fn pruned_count(&self) -> usize {
        self.entries.iter().map(|e| e.keep.iter().filter(|&&k| k == 0).count()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.keep.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<&MaskEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Magnitude ranking of a set of parameter entries.
#[derive(Debug, Clone)]
pub struct MagnitudeIndex {
    /// `(entry index in ParamSet, flat index)` in pruning order.
    order: Vec<(usize, usize)>,
}

impl MagnitudeIndex {
    pub fn build(params: &ParamSet, entries: &[usize]) -> Self {
        let mut keyed: Vec<(f32, usize, usize)> = Vec::new();
        for &ei in entries {
            for (j, v) in params.entries()[ei].value.data().iter().enumerate() {
                keyed.push((v.abs(), ei, j));
            }
        }
        keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        MagnitudeIndex { order: keyed.into_iter().map(|(_, e, j)| (e, j)).collect() }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Positions of the `k` weights pruned first.
    pub fn lowest(&self, k: usize) -> &[(usize, usize)] {
        &self.order[..k.min(self.order.len())]
    }
}

fn prunable_indices(params: &ParamSet) -> Result<Vec<usize>> {
    let idx: Vec<usize> = params.entries().iter().enumerate().filter(|(_, e)| e.prunable).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Err(Error::Precondition("no prunable parameter entries".into()));
    }
    Ok(idx)
}

fn mask_from_drops<'a>(params: &ParamSet, drops: impl IntoIterator<Item = &'a (usize, usize)>) -> Mask {
    let mut mask = Mask::all_ones(params);
    let slot: Vec<Option<usize>> = {
        let mut next = 0;
        params
            .entries()
            .iter()
            .map(|e| {
                e.prunable.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    for &(ei, j) in drops {
        let m = slot[ei].expect("dropped weight belongs to a prunable entry");
        mask.entries[m].keep[j] = 0;
    }
    mask
}

/// Number of weights removed at rate `p` out of `n`.
pub fn pruned_count(p: f64, n: usize) -> usize {
    (p * n as f64).floor() as usize
}

/// Removes the `floor(p N)` smallest-magnitude prunable weights across all
/// entries jointly.
pub fn magnitude_mask_global(params: &ParamSet, p: f64) -> Result<Mask> {
    check_rate(p)?;
    let index = MagnitudeIndex::build(params, &prunable_indices(params)?);
    Ok(global_mask_from_index(params, &index, p))
}

/// Global mask from a prebuilt ranking, so sweeps over many rates sort once.
pub fn global_mask_from_index(params: &ParamSet, index: &MagnitudeIndex, p: f64) -> Mask {
    mask_from_drops(params, index.lowest(pruned_count(p, index.len())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedGroup {
    pub name: String,
    /// Entry indices in the parameter set, ascending.
    pub entries: Vec<usize>,
    pub size: usize,
    pub rate: f64,
    pub count: usize,
}

/// Per-group rates that keep the overall pruned count at `floor(p N)`.
///
/// Skewed groups get `p + skew`. The remaining unfrozen groups share
/// `p_o = (p N - sum_skewed (p + skew) N_g) / N_other`. Counts are floored per
/// group and the shortfall is added to the largest unskewed group (or the
/// largest group when all are skewed). Frozen groups keep everything.
pub fn resolve_group_rates(params: &ParamSet, groups: &[GroupSpec], p: f64) -> Result<Vec<ResolvedGroup>> {
    check_rate(p)?;
    if groups.is_empty() {
        return Err(Error::Config("grouped pruning needs at least one group".into()));
    }
    let mut seen = vec![false; params.len()];
    let mut resolved = Vec::with_capacity(groups.len());
    for g in groups {
        if !g.skew.is_finite() {
            return Err(Error::Config(format!("group `{}` has a non-finite skew", g.name)));
        }
        let mut entries = Vec::new();
        for m in &g.members {
            let i = params
                .index_of(m)
                .ok_or_else(|| Error::Config(format!("group `{}` names unknown parameter `{m}`", g.name)))?;
            if !params.entries()[i].prunable {
                return Err(Error::Config(format!("group `{}` member `{m}` is not prunable", g.name)));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("parameter `{m}` appears in more than one group")));
            }
            entries.push(i);
        }
        if entries.is_empty() {
            return Err(Error::Config(format!("group `{}` has no members", g.name)));
        }
        entries.sort_unstable();
        let size = entries.iter().map(|&i| params.entries()[i].value.len()).sum();
        resolved.push(ResolvedGroup { name: g.name.clone(), entries, size, rate: 0.0, count: 0 });
    }
    if let Some(missing) = params.entries().iter().enumerate().find(|(i, e)| e.prunable && !seen[*i]) {
        return Err(Error::Config(format!("prunable parameter `{}` belongs to no group", missing.1.name)));
    }

    let active: Vec<usize> = (0..groups.len()).filter(|&i| !groups[i].frozen).collect();
    let total: usize = active.iter().map(|&i| resolved[i].size).sum();
    if total == 0 {
        return Ok(resolved);
    }
    let target = pruned_count(p, total);
    let skewed: Vec<usize> = active.iter().copied().filter(|&i| groups[i].skew != 0.0).collect();
    let others: Vec<usize> = active.iter().copied().filter(|&i| groups[i].skew == 0.0).collect();

    for &i in &skewed {
        resolved[i].rate = p + groups[i].skew;
    }
    if !others.is_empty() {
        let n_other: usize = others.iter().map(|&i| resolved[i].size).sum();
        let skewed_mass: f64 = skewed.iter().map(|&i| resolved[i].rate * resolved[i].size as f64).sum();
        let p_other = (p * total as f64 - skewed_mass) / n_other as f64;
        for &i in &others {
            resolved[i].rate = p_other;
        }
    }
    for &i in &active {
        let r = resolved[i].rate;
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Config(format!("group `{}` resolves to infeasible rate {r}", groups[i].name)));
        }
        resolved[i].count = (r * resolved[i].size as f64).floor() as usize;
    }

    let assigned: usize = active.iter().map(|&i| resolved[i].count).sum();
    let pool = if others.is_empty() { &active } else { &others };
    let sink =
        *pool.iter().max_by(|&&a, &&b| resolved[a].size.cmp(&resolved[b].size).then(b.cmp(&a))).expect("nonempty pool");
    let adjusted = resolved[sink].count as i64 + target as i64 - assigned as i64;
    if adjusted < 0 || adjusted as usize > resolved[sink].size {
        return Err(Error::Config(format!(
            "group `{}` cannot absorb the rounding residue at rate {p}",
            resolved[sink].name
        )));
    }
    resolved[sink].count = adjusted as usize;
    Ok(resolved)
}

/// Removes the `count` smallest-magnitude weights within each group.
pub fn magnitude_mask_grouped(params: &ParamSet, groups: &[ResolvedGroup]) -> Result<Mask> {
    let mut drops = Vec::new();
    for g in groups {
        if g.count > g.size {
            return Err(Error::Config(format!("group `{}` prunes {} of {} weights", g.name, g.count, g.size)));
        }
        for &i in &g.entries {
            if !params.entries().get(i).is_some_and(|e| e.prunable) {
                return Err(Error::Config(format!("group `{}` refers to a non-prunable entry", g.name)));
            }
        }
        let index = MagnitudeIndex::build(params, &g.entries);
        drops.extend_from_slice(index.lowest(g.count));
    }
    Ok(mask_from_drops(params, &drops))
}

/// Builds the mask a [`PruneSpec`] describes.
pub fn build_mask(params: &ParamSet, spec: &PruneSpec) -> Result<Mask> {
    match &spec.scope {
        PruneScope::Global => magnitude_mask_global(params, spec.rate),
        PruneScope::Groups(groups) => {
            let resolved = resolve_group_rates(params, groups, spec.rate)?;
            magnitude_mask_grouped(params, &resolved)
        }
    }
}

/// Zeroes every dropped weight; all other values are left untouched.
pub fn apply_mask(params: &ParamSet, mask: &Mask) -> Result<ParamSet> {
    let mut out = params.clone();
    for m in &mask.entries {
        let entry = out
            .get_mut(&m.name)
            .ok_or_else(|| Error::Dimension(format!("mask names unknown parameter `{}`", m.name)))?;
        if entry.value.shape() != m.shape.as_slice() || m.keep.len() != entry.value.len() {
            return Err(Error::Dimension(format!(
                "mask for `{}` has shape {:?}, parameter has {:?}",
                m.name,
                m.shape,
                entry.value.shape()
            )));
        }
        for (v, &k) in entry.value.data_mut().iter_mut().zip(&m.keep) {
            if k == 0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}
