//! Diverse client selection by greedy facility-location maximization.
//!
//! Each client is represented by its latest known per-iteration update. For a
//! subset `S` of a universe `U` the facility value is
//!
//! ```text
//! Q̄(S) = Σ_{n ∈ U} (d_max − min_{i ∈ S} ‖g_n − g_i‖),   Q̄(∅) = 0
//! ```
//!
//! which is monotone submodular, so the greedy chain reaches at least
//! `(1 − 1/e)` of the optimum. The raw cost `Σ_n min_i ‖g_n − g_i‖ / N` is the
//! upper bound on the gradient approximation error reported as `alpha_bound`.

use std::collections::{BTreeMap, HashMap};

use crate::compression::{densify, SparseUpdate};
use crate::error::{Error, Result};
use crate::vector::DenseVector;

#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub representative: DenseVector,
    pub last_updated_round: i64,
}

/// Historical per-client gradient information held by the server.
#[derive(Debug, Clone, Default)]
pub struct GradientCache {
    entries: BTreeMap<usize, CacheEntry>,
}

impl GradientCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, client: usize) -> Option<&CacheEntry> {
        self.entries.get(&client)
    }

    pub fn clients(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, client: usize, representative: DenseVector, round: i64) {
        self.entries.insert(
            client,
            CacheEntry {
                representative,
                last_updated_round: round,
            },
        );
    }
}

/// Stores `densify(u) / h` for every uploading client.
pub fn update_cache(cache: &mut GradientCache, updates: &[SparseUpdate], h: usize, round: i64) {
    let inv = 1.0 / h as f64;
    for u in updates {
        cache.insert(u.client_id, densify(u).scale(inv), round);
    }
}

/// Symmetric Euclidean distances between the representatives of a set of
/// clients, addressed by client id.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    ids: Vec<usize>,
    pos: HashMap<usize, usize>,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(ids: &[usize], mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let n = ids.len();
        let mut data = vec![0.0; n * n];
        for a in 0..n {
            for b in a + 1..n {
                let v = f(ids[a], ids[b]);
                data[a * n + b] = v;
                data[b * n + a] = v;
            }
        }
        DistanceMatrix {
            ids: ids.to_vec(),
            pos: ids.iter().enumerate().map(|(p, &id)| (id, p)).collect(),
            data,
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    fn index(&self, id: usize) -> Result<usize> {
        self.pos.get(&id).copied().ok_or(Error::MissingClient(id))
    }

    pub fn get(&self, a: usize, b: usize) -> Result<f64> {
        let n = self.ids.len();
        Ok(self.data[self.index(a)? * n + self.index(b)?])
    }

    /// Dense sub-matrix over `ids`, in the given order.
    fn restrict(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let p: Vec<usize> = ids.iter().map(|&i| self.index(i)).collect::<Result<_>>()?;
        let n = self.ids.len();
        Ok(p.iter()
            .flat_map(|&a| p.iter().map(move |&b| (a, b)))
            .map(|(a, b)| self.data[a * n + b])
            .collect())
    }
}

pub fn pairwise_distances(cache: &GradientCache, candidates: &[usize]) -> Result<DistanceMatrix> {
    let reps: Vec<&DenseVector> = candidates
        .iter()
        .map(|&c| {
            cache
                .get(c)
                .map(|e| &e.representative)
                .ok_or(Error::MissingClient(c))
        })
        .collect::<Result<_>>()?;
    let pos: HashMap<usize, usize> = candidates.iter().enumerate().map(|(p, &c)| (c, p)).collect();
    Ok(DistanceMatrix::from_fn(candidates, |a, b| {
        reps[pos[&a]].distance(reps[pos[&b]])
    }))
}

fn sorted_unique(ids: &[usize]) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

fn local_positions(universe: &[usize], subset: &[usize]) -> Result<Vec<usize>> {
    subset
        .iter()
        .map(|s| {
            universe
                .binary_search(s)
                .map_err(|_| Error::InvalidArgument(format!("client {s} is not in the universe")))
        })
        .collect()
}

fn max_entry(sub: &[f64]) -> f64 {
    sub.iter().copied().fold(0.0, f64::max)
}

/// `Q̄(S)`, with `d_max` taken over the universe. `Q̄(∅) = 0`.
pub fn facility_value(d: &DistanceMatrix, universe: &[usize], subset: &[usize]) -> Result<f64> {
    let universe = sorted_unique(universe);
    let sub = d.restrict(&universe)?;
    let s = local_positions(&universe, subset)?;
    let n = universe.len();
    let dmax = max_entry(&sub);
    Ok((0..n)
        .map(|u| {
            let m = s.iter().map(|&i| sub[u * n + i]).fold(dmax, f64::min);
            dmax - m
        })
        .sum())
}

/// Raw cost `Σ_{n∈U} min_{i∈S} D[n,i]` (that is `N·Q(S)`); undefined for
/// empty `S`.
pub fn facility_cost(d: &DistanceMatrix, universe: &[usize], subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut total = 0.0;
    for &n in universe {
        let mut m = f64::INFINITY;
        for &i in subset {
            m = m.min(d.get(n, i)?);
        }
        total += m;
    }
    Ok(total)
}

/// Greedy maximization of `Q̄` under `|S| = m`. Candidates are scanned in
/// ascending id order and only a strictly larger gain displaces the current
/// best, so ties go to the lowest id and the result does not depend on the
/// order of `universe`.
pub fn greedy_select(d: &DistanceMatrix, universe: &[usize], m: usize) -> Result<Vec<usize>> {
    let universe = sorted_unique(universe);
    let n = universe.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "cannot select {m} clients from a universe of {n}"
        )));
    }
    let sub = d.restrict(&universe)?;
    let mut closest = vec![max_entry(&sub); n];
    let mut taken = vec![false; n];
    let mut chosen = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best: Option<(usize, f64)> = None;
        for c in (0..n).filter(|&c| !taken[c]) {
            let gain: f64 = (0..n).map(|u| (closest[u] - sub[u * n + c]).max(0.0)).sum();
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((c, gain));
            }
        }
        let (c, _) = best.expect("m <= n leaves a candidate");
        taken[c] = true;
        for u in 0..n {
            closest[u] = closest[u].min(sub[u * n + c]);
        }
        chosen.push(universe[c]);
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaEstimate {
    /// `(1/N) Σ_{n∈U} min_{i∈S} D[n,i]`.
    pub alpha_bound: f64,
    /// `(client, nearest selected client)` for every client in the universe.
    pub assignment: Vec<(usize, usize)>,
    /// `γ_i = |{n : π(n) = i}|`, aligned with the selected subset.
    pub gamma: Vec<usize>,
}

/// Approximation-error bound for `subset`, with the induced nearest-member
/// mapping. Distance ties map to the lower client id.
pub fn estimate_alpha(d: &DistanceMatrix, subset: &[usize], universe: &[usize]) -> Result<AlphaEstimate> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut by_id: Vec<(usize, usize)> = subset.iter().copied().enumerate().map(|(p, s)| (s, p)).collect();
    by_id.sort_unstable();
    let mut gamma = vec![0; subset.len()];
    let mut assignment = Vec::with_capacity(universe.len());
    let mut total = 0.0;
    for &n in universe {
        let mut best: Option<(usize, usize, f64)> = None;
        for &(s, p) in &by_id {
            let dist = d.get(n, s)?;
            if best.is_none_or(|(_, _, b)| dist < b) {
                best = Some((s, p, dist));
            }
        }
        let (s, p, dist) = best.unwrap();
        gamma[p] += 1;
        assignment.push((n, s));
        total += dist;
    }
    Ok(AlphaEstimate {
        alpha_bound: if universe.is_empty() { 0.0 } else { total / universe.len() as f64 },
        assignment,
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cache_of(points: &[&[f64]]) -> GradientCache {
        let mut c = GradientCache::new();
        for (i, p) in points.iter().enumerate() {
            c.insert(i, DenseVector::from(p.to_vec()), -1);
        }
        c
    }

    fn three() -> (DistanceMatrix, Vec<usize>) {
        let c = cache_of(&[&[1.0, 0.0], &[0.0, 1.0], &[0.9, 0.1]]);
        let ids = vec![0, 1, 2];
        (pairwise_distances(&c, &ids).unwrap(), ids)
    }

    #[test]
    fn identical_reps_give_zero_matrix() {
        let c = cache_of(&[&[0.3, 0.3], &[0.3, 0.3], &[0.3, 0.3]]);
        let d = pairwise_distances(&c, &[0, 1, 2]).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(d.get(a, b).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn orthogonal_unit_reps() {
        let c = cache_of(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let d = pairwise_distances(&c, &[0, 1]).unwrap();
        assert_eq!(d.get(0, 1).unwrap(), 2f64.sqrt());
        assert_eq!(d.get(1, 1).unwrap(), 0.0);
    }

    #[test]
    fn missing_client_is_an_error() {
        let c = cache_of(&[&[1.0]]);
        assert!(matches!(pairwise_distances(&c, &[0, 5]), Err(Error::MissingClient(5))));
    }

    #[test]
    fn singleton_costs_match_hand_values() {
        let (d, u) = three();
        let costs: Vec<f64> = (0..3).map(|s| facility_cost(&d, &u, &[s]).unwrap()).collect();
        let r2 = 2f64.sqrt();
        let a_c = 0.02f64.sqrt();
        let b_c = 1.62f64.sqrt();
        assert!((costs[0] - (r2 + a_c)).abs() < 1e-12);
        assert!((costs[1] - (r2 + b_c)).abs() < 1e-12);
        assert!((costs[2] - (a_c + b_c)).abs() < 1e-12);
        assert!((costs[0] - 1.556).abs() < 1e-3);
        assert!((costs[1] - 2.687).abs() < 1e-3);
        assert!((costs[2] - 1.414).abs() < 1e-3);
        assert!(matches!(facility_cost(&d, &u, &[]), Err(Error::EmptySubset)));
    }

    #[test]
    fn whole_universe_value() {
        let (d, u) = three();
        let dmax = 2f64.sqrt();
        assert!((facility_value(&d, &u, &u).unwrap() - 3.0 * dmax).abs() < 1e-12);
        assert_eq!(facility_value(&d, &u, &[]).unwrap(), 0.0);
    }

    #[test]
    fn greedy_picks_best_singleton() {
        let (d, u) = three();
        assert_eq!(greedy_select(&d, &u, 1).unwrap(), vec![2]);
        let mut all = greedy_select(&d, &u, 3).unwrap();
        all.sort_unstable();
        assert_eq!(all, u);
        assert!(greedy_select(&d, &u, 0).is_err());
        assert!(greedy_select(&d, &u, 4).is_err());
    }

    #[test]
    fn alpha_examples() {
        let (d, u) = three();
        let a = estimate_alpha(&d, &[2], &u).unwrap();
        assert!((a.alpha_bound - 0.4714).abs() < 1e-4);
        assert_eq!(a.gamma, vec![3]);
        assert_eq!(estimate_alpha(&d, &u, &u).unwrap().alpha_bound, 0.0);

        let c = cache_of(&[&[2.0, 1.0], &[2.0, 1.0], &[2.0, 1.0], &[2.0, 1.0]]);
        let d = pairwise_distances(&c, &[0, 1, 2, 3]).unwrap();
        let a = estimate_alpha(&d, &[3, 1], &[0, 1, 2, 3]).unwrap();
        assert_eq!(a.alpha_bound, 0.0);
        assert_eq!(a.gamma, vec![0, 4]);
    }

    #[test]
    fn cache_updates_only_uploaders() {
        let mut c = cache_of(&[&[1.0, 1.0], &[2.0, 2.0]]);
        let u = SparseUpdate {
            dim: 2,
            indices: vec![0, 1],
            values: vec![10.0, -5.0],
            theta: 1.0,
            client_id: 1,
            round: 3,
        };
        update_cache(&mut c, &[u], 5, 3);
        assert_eq!(&c.get(1).unwrap().representative[..], &[2.0, -1.0]);
        assert_eq!(c.get(1).unwrap().last_updated_round, 3);
        assert_eq!(&c.get(0).unwrap().representative[..], &[1.0, 1.0]);
        assert_eq!(c.get(0).unwrap().last_updated_round, -1);
    }

    fn random_cache(seed: u64, n: usize, dim: usize) -> GradientCache {
        use rand::Rng;
        let mut r = crate::rng::stream(seed, &["test".into()]);
        let mut c = GradientCache::new();
        for i in 0..n {
            c.insert(i, DenseVector::from((0..dim).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>()), 0);
        }
        c
    }

    #[test]
    fn distances_match_double_loop() {
        let c = random_cache(3, 9, 5);
        let ids: Vec<usize> = (0..9).collect();
        let d = pairwise_distances(&c, &ids).unwrap();
        for a in 0..9 {
            for b in 0..9 {
                let ra = &c.get(a).unwrap().representative;
                let rb = &c.get(b).unwrap().representative;
                let want: f64 = ra.iter().zip(rb.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!((d.get(a, b).unwrap() - want).abs() < 1e-12);
                assert!((d.get(a, b).unwrap() - d.get(b, a).unwrap()).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_and_submodular(seed in any::<u64>(), n in 3usize..9) {
            let c = random_cache(seed, n, 4);
            let ids: Vec<usize> = (0..n).collect();
            let d = pairwise_distances(&c, &ids).unwrap();
            let mut r = crate::rng::stream(seed, &["subsets".into()]);
            use rand::Rng;
            let big: Vec<usize> = ids.iter().copied().filter(|_| r.random_bool(0.5)).collect();
            let small: Vec<usize> = big.iter().copied().filter(|_| r.random_bool(0.5)).collect();
            for z in ids.iter().copied().filter(|z| !big.contains(z)) {
                let with = |s: &[usize]| { let mut v = s.to_vec(); v.push(z); v };
                let q_small = facility_value(&d, &ids, &small).unwrap();
                let q_big = facility_value(&d, &ids, &big).unwrap();
                let gain_small = facility_value(&d, &ids, &with(&small)).unwrap() - q_small;
                let gain_big = facility_value(&d, &ids, &with(&big)).unwrap() - q_big;
                prop_assert!(q_small <= q_big + 1e-12);
                prop_assert!(gain_big >= -1e-12);
                prop_assert!(gain_small >= gain_big - 1e-12);
            }
        }

        #[test]
        fn greedy_ignores_universe_order(seed in any::<u64>(), n in 2usize..10, m in 1usize..4) {
            let m = m.min(n);
            let c = random_cache(seed, n, 3);
            let ids: Vec<usize> = (0..n).collect();
            let d = pairwise_distances(&c, &ids).unwrap();
            let mut rev = ids.clone();
            rev.reverse();
            prop_assert_eq!(greedy_select(&d, &ids, m).unwrap(), greedy_select(&d, &rev, m).unwrap());
        }

        #[test]
        fn alpha_shrinks_along_greedy_chain(seed in any::<u64>(), n in 2usize..12) {
            let c = random_cache(seed, n, 3);
            let ids: Vec<usize> = (0..n).collect();
            let d = pairwise_distances(&c, &ids).unwrap();
            let chain = greedy_select(&d, &ids, n).unwrap();
            let mut prev = f64::INFINITY;
            for len in 1..=n {
                let a = estimate_alpha(&d, &chain[..len], &ids).unwrap();
                prop_assert!(a.alpha_bound <= prev + 1e-12);
                prop_assert_eq!(a.gamma.iter().sum::<usize>(), n);
                prev = a.alpha_bound;
            }
        }
    }
}
