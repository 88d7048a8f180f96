//! Matching a node profile to a component set.
//!
//! Objective: minimum total cost (cpu + mem) among subsets that cover every
//! required capability and fit both budgets; ties go to the lexicographically
//! smallest sorted list of component ids. Catalogs of up to [`EXACT_LIMIT`]
//! entries are solved exactly by branch and bound. Larger catalogs use a
//! cost-per-newly-covered-capability greedy, which may miss the optimum or
//! report a feasible profile as infeasible.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::model::{CapabilityTag, NodeProfile, SecurityComponentDescriptor};

pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelectError {
    #[error("component catalog is empty")]
    EmptyCatalog,
    #[error("no component subset covers the profile within its budgets")]
    InfeasibleProfile,
}

pub fn select_components(
    profile: &NodeProfile,
    catalog: &[SecurityComponentDescriptor],
) -> Result<Vec<SecurityComponentDescriptor>, SelectError> {
    if catalog.is_empty() {
        return Err(SelectError::EmptyCatalog);
    }
    let mut sorted: Vec<&SecurityComponentDescriptor> = catalog.iter().collect();
    sorted.sort_by(|a, b| a.component_id.cmp(&b.component_id));
    let picked = if sorted.len() <= EXACT_LIMIT {
        exact(profile, &sorted)
    } else {
        greedy(profile, &sorted)
    }
    .ok_or(SelectError::InfeasibleProfile)?;
    Ok(picked.into_iter().map(|i| sorted[i].clone()).collect())
}

/// True if `set` covers the profile and fits its budgets.
pub fn satisfies(profile: &NodeProfile, set: &[SecurityComponentDescriptor]) -> bool {
    let covered: BTreeSet<&CapabilityTag> = set.iter().flat_map(|c| &c.capabilities).collect();
    let cpu: u64 = set.iter().map(|c| c.cpu_cost).sum();
    let mem: u64 = set.iter().map(|c| c.mem_cost).sum();
    profile.required_capabilities.iter().all(|t| covered.contains(t))
        && cpu <= profile.cpu_budget
        && mem <= profile.mem_budget
}

struct Search<'a> {
    profile: &'a NodeProfile,
    comps: &'a [&'a SecurityComponentDescriptor],
    best: Option<(u64, Vec<usize>)>,
}

impl Search<'_> {
    fn ids(&self, picked: &[usize]) -> Vec<&str> {
        picked.iter().map(|i| self.comps[*i].component_id.as_str()).collect()
    }

    fn better(&self, cost: u64, picked: &[usize]) -> bool {
        match &self.best {
            None => true,
            Some((best_cost, best)) => cost < *best_cost || (cost == *best_cost && self.ids(picked) < self.ids(best)),
        }
    }

    fn covers(&self, picked: &[usize]) -> bool {
        self.profile
            .required_capabilities
            .iter()
            .all(|t| picked.iter().any(|i| self.comps[*i].capabilities.contains(t)))
    }

    fn dfs(&mut self, next: usize, picked: &mut Vec<usize>, cpu: u64, mem: u64, cost: u64) {
        if let Some((best_cost, _)) = &self.best {
            // Equal cost must still be explored: a zero-cost addition can
            // make the id list lexicographically smaller.
            if cost > *best_cost {
                return;
            }
        }
        if self.covers(picked) && self.better(cost, picked) {
            self.best = Some((cost, picked.clone()));
        }
        for i in next..self.comps.len() {
            let c = self.comps[i];
            let (cpu2, mem2) = (cpu + c.cpu_cost, mem + c.mem_cost);
            if cpu2 > self.profile.cpu_budget || mem2 > self.profile.mem_budget {
                continue;
            }
            picked.push(i);
            self.dfs(i + 1, picked, cpu2, mem2, cost + c.total_cost());
            picked.pop();
        }
    }
}

fn exact(profile: &NodeProfile, comps: &[&SecurityComponentDescriptor]) -> Option<Vec<usize>> {
    let mut search = Search {
        profile,
        comps,
        best: None,
    };
    search.dfs(0, &mut Vec::new(), 0, 0, 0);
    search.best.map(|(_, picked)| picked)
}

fn greedy(profile: &NodeProfile, comps: &[&SecurityComponentDescriptor]) -> Option<Vec<usize>> {
    let mut picked: Vec<usize> = Vec::new();
    let mut uncovered: BTreeSet<&CapabilityTag> = profile.required_capabilities.iter().collect();
    let (mut cpu, mut mem) = (0u64, 0u64);
    while !uncovered.is_empty() {
        let mut best: Option<(usize, u64, u64)> = None; // (index, cost, gain)
        for (i, c) in comps.iter().enumerate() {
            if picked.contains(&i) || cpu + c.cpu_cost > profile.cpu_budget || mem + c.mem_cost > profile.mem_budget {
                continue;
            }
            let gain = c.capabilities.iter().filter(|t| uncovered.contains(t)).count() as u64;
            if gain == 0 {
                continue;
            }
            let cost = c.total_cost();
            // cost/gain < best_cost/best_gain, cross-multiplied; ties keep the
            // earlier (smaller) id.
            if best.is_none_or(|(_, bc, bg)| (cost as u128) * (bg as u128) < (bc as u128) * (gain as u128)) {
                best = Some((i, cost, gain));
            }
        }
        let (i, _, _) = best?;
        cpu += comps[i].cpu_cost;
        mem += comps[i].mem_cost;
        for t in &comps[i].capabilities {
            uncovered.remove(t);
        }
        picked.push(i);
    }
    // Drop members made redundant by later picks, most expensive first.
    let mut by_cost = picked.clone();
    by_cost.sort_by(|a, b| comps[*b].total_cost().cmp(&comps[*a].total_cost()).then(b.cmp(a)));
    for i in by_cost {
        let rest: Vec<usize> = picked.iter().copied().filter(|j| *j != i).collect();
        let covered = profile
            .required_capabilities
            .iter()
            .all(|t| rest.iter().any(|j| comps[*j].capabilities.contains(t)));
        if covered {
            picked = rest;
        }
    }
    picked.sort_unstable();
    Some(picked)
}
