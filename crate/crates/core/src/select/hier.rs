//! Cluster-then-descend search over a hypothesis set.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmin, eval_support_loss, exhaustive_select, HypothesisSet, SearchMethod, SelectionResult};
use crate::bounds::Loss;
use crate::error::{Error, Result};
use crate::numerics::{kmeans_cluster, medoid_of, pairwise_distances, silhouette_from_distances, Matrix};
use crate::seed::derive_seed;
use crate::taskgen::Example;
use crate::zoo::cross_entropy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SilhouetteObjective {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalMetric {
    SupportLoss,
    /// Support cross-entropy among the shortlist.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub objective: SilhouetteObjective,
    pub shortlist: usize,
    pub depth: usize,
    /// Node sizes up to this scan every k; larger nodes use a geometric grid.
    pub full_grid_limit: usize,
    pub grid_points: usize,
    pub kmeans_iters: usize,
    pub final_metric: FinalMetric,
    pub seed: u64,
}

impl Default for HierConfig {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 150,
            objective: SilhouetteObjective::Max,
            shortlist: 15,
            depth: 1,
            full_grid_limit: 500,
            grid_points: 32,
            kmeans_iters: 100,
            final_metric: FinalMetric::SupportLoss,
            seed: 0,
        }
    }
}

/// Candidate numbers of clusters for a node of `m` rows with `distinct`
/// distinct values. Empty when no valid k exists.
pub fn k_grid(m: usize, distinct: usize, cfg: &HierConfig) -> Vec<usize> {
    let lo = cfg.k_min.max(2);
    let hi = cfg.k_max.min(m.saturating_sub(1)).min(distinct);
    if hi < lo {
        return Vec::new();
    }
    if m <= cfg.full_grid_limit || hi - lo + 1 <= cfg.grid_points {
        return (lo..=hi).collect();
    }
    let pts = cfg.grid_points.max(2);
    let ratio = hi as f64 / lo as f64;
    let mut ks: Vec<usize> = (0..pts)
        .map(|i| (lo as f64 * ratio.powf(i as f64 / (pts - 1) as f64)).round() as usize)
        .map(|k| k.clamp(lo, hi))
        .collect();
    ks.dedup();
    ks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterNode {
    pub medoid: usize,
    pub size: usize,
    pub child: Node,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf { members: Vec<usize> },
    Split { k: usize, silhouette: f64, clusters: Vec<ClusterNode> },
}

/// Clustering of a hypothesis set, computed once and reused across episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub hypothesis_hash: String,
    pub config: HierConfig,
    pub root: Node,
    /// Set when clustering was impossible and the root is the whole set.
    pub collapsed: bool,
}

fn count_distinct(points: &Matrix, members: &[usize]) -> usize {
    let mut rows: Vec<Vec<u64>> = members
        .iter()
        .map(|&i| points.row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

fn build_node(points: &Matrix, members: Vec<usize>, depth: usize, level: u64, cfg: &HierConfig) -> Result<(Node, bool)> {
    if depth == 0 {
        return Ok((Node::Leaf { members }, false));
    }
    let distinct = count_distinct(points, &members);
    let grid = k_grid(members.len(), distinct, cfg);
    if grid.is_empty() {
        return Ok((Node::Leaf { members }, true));
    }
    let sub = points.select_rows(&members);
    let dists = pairwise_distances(&sub);
    let scored: Vec<(usize, f64, Vec<usize>)> = grid
        .par_iter()
        .map(|&k| {
            let seed = derive_seed(cfg.seed, "select.kmeans", level.wrapping_mul(1 << 20) + k as u64);
            let cl = kmeans_cluster(&sub, k, seed, cfg.kmeans_iters)?;
            let s = silhouette_from_distances(&dists, &cl.assignment, k)?;
            Ok((k, s, cl.assignment))
        })
        .collect::<Result<_>>()?;
    // grid order is ascending k, so strict comparison prefers the smaller k
    let mut best = 0;
    for (i, (_, s, _)) in scored.iter().enumerate() {
        let better = match cfg.objective {
            SilhouetteObjective::Max => *s > scored[best].1,
            SilhouetteObjective::Min => *s < scored[best].1,
        };
        if better {
            best = i;
        }
    }
    let (k, silhouette, assignment) = &scored[best];
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); *k];
    for (local, &c) in assignment.iter().enumerate() {
        groups[c].push(members[local]);
    }
    let mut clusters = Vec::with_capacity(*k);
    let mut collapsed = false;
    for (ci, g) in groups.into_iter().enumerate() {
        let medoid = medoid_of(points, &g)?;
        let size = g.len();
        let (child, c) = build_node(points, g, depth - 1, level * 1000 + ci as u64 + 1, cfg)?;
        collapsed |= c;
        clusters.push(ClusterNode { medoid, size, child });
    }
    // canonical order: by medoid row index
    clusters.sort_by_key(|c| c.medoid);
    Ok((
        Node::Split {
            k: *k,
            silhouette: *silhouette,
            clusters,
        },
        collapsed,
    ))
}

pub fn build_hierarchy(hyp: &HypothesisSet, cfg: &HierConfig) -> Result<Hierarchy> {
    if cfg.shortlist == 0 {
        return Err(Error::invalid("shortlist size must be at least 1"));
    }
    if cfg.k_min > cfg.k_max {
        return Err(Error::invalid("k range is empty"));
    }
    let members: Vec<usize> = (0..hyp.size()).collect();
    let (root, collapsed) = build_node(hyp.matrix(), members, cfg.depth, 0, cfg)?;
    let collapsed = collapsed || (cfg.depth > 0 && matches!(root, Node::Leaf { .. }));
    if collapsed {
        log::warn!("hypothesis set has too few distinct rows to cluster; falling back to exhaustive search");
    }
    Ok(Hierarchy {
        hypothesis_hash: hyp.hash().to_string(),
        config: cfg.clone(),
        root,
        collapsed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub k: usize,
    pub silhouette: f64,
    pub medoids: Vec<usize>,
    pub medoid_losses: Vec<f64>,
    pub chosen_cluster: usize,
    pub cluster_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierTrace {
    pub levels: Vec<LevelTrace>,
    pub final_cluster_size: usize,
    pub shortlist: Vec<usize>,
    pub shortlist_losses: Vec<f64>,
    pub fallback: bool,
}

struct Evaluator<'a> {
    hyp: &'a HypothesisSet,
    support: &'a [Example],
    k: usize,
    loss: Loss,
    cache: BTreeMap<usize, f64>,
}

impl Evaluator<'_> {
    fn eval_many(&mut self, rows: &[usize]) -> Result<Vec<f64>> {
        let todo: Vec<usize> = rows.iter().copied().filter(|i| !self.cache.contains_key(i)).collect();
        let fresh: Vec<f64> = todo
            .par_iter()
            .map(|&i| {
                eval_support_loss(self.hyp.row(i), self.support, self.k, self.loss)
                    .map_err(|e| Error::invalid(format!("row {i}: {e}")))
            })
            .collect::<Result<_>>()?;
        self.cache.extend(todo.into_iter().zip(fresh));
        Ok(rows.iter().map(|i| self.cache[i]).collect())
    }
}

impl Hierarchy {
    pub fn select(&self, hyp: &HypothesisSet, support: &[Example], k: usize, loss: Loss) -> Result<SelectionResult> {
        if hyp.hash() != self.hypothesis_hash {
            return Err(Error::invalid("hierarchy was built for a different hypothesis set"));
        }
        if self.collapsed && matches!(self.root, Node::Leaf { .. }) && self.config.depth > 0 {
            let mut res = exhaustive_select(hyp, support, k, loss)?;
            res.trace = Some(HierTrace {
                levels: vec![],
                final_cluster_size: hyp.size(),
                shortlist: vec![res.index],
                shortlist_losses: vec![res.r],
                fallback: true,
            });
            return Ok(res);
        }
        let mut ev = Evaluator {
            hyp,
            support,
            k,
            loss,
            cache: BTreeMap::new(),
        };
        let mut levels = Vec::new();
        let mut node = &self.root;
        let members = loop {
            match node {
                Node::Leaf { members } => break members,
                Node::Split { k: kc, silhouette, clusters } => {
                    let medoids: Vec<usize> = clusters.iter().map(|c| c.medoid).collect();
                    let losses = ev.eval_many(&medoids)?;
                    // clusters are sorted by medoid index, so ties go to the lowest row
                    let chosen = argmin(&losses);
                    levels.push(LevelTrace {
                        k: *kc,
                        silhouette: *silhouette,
                        medoids,
                        medoid_losses: losses,
                        chosen_cluster: chosen,
                        cluster_size: clusters[chosen].size,
                    });
                    node = &clusters[chosen].child;
                }
            }
        };
        let losses = ev.eval_many(members)?;
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(members[a].cmp(&members[b])));
        order.truncate(self.config.shortlist);
        let shortlist: Vec<usize> = order.iter().map(|&i| members[i]).collect();
        let shortlist_losses: Vec<f64> = order.iter().map(|&i| losses[i]).collect();
        let pick = match self.config.final_metric {
            FinalMetric::SupportLoss => 0,
            FinalMetric::CrossEntropy => {
                let ce: Vec<f64> = shortlist.iter().map(|&i| cross_entropy(hyp.row(i), k, support).0).collect();
                argmin(&ce)
            }
        };
        let index = shortlist[pick];
        Ok(SelectionResult {
            index,
            theta: hyp.adapter(index),
            r: shortlist_losses[pick],
            evaluations: ev.cache.len(),
            method: SearchMethod::Hierarchical,
            trace: Some(HierTrace {
                levels,
                final_cluster_size: members.len(),
                shortlist,
                shortlist_losses,
                fallback: false,
            }),
        })
    }
}

/// Builds the hierarchy and searches it. Callers that adapt many episodes
/// against one set should build once with [`build_hierarchy`].
pub fn hierarchical_select(
    hyp: &HypothesisSet,
    support: &[Example],
    k: usize,
    loss: Loss,
    cfg: &HierConfig,
) -> Result<SelectionResult> {
    if hyp.size() < 2 {
        return Err(Error::invalid("hierarchical search needs at least two candidates"));
    }
    build_hierarchy(hyp, cfg)?.select(hyp, support, k, loss)
}

#[cfg(test)]
mod tests {
    use super::super::tests::set_of;
    use super::*;
    use crate::seed::rng_from;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn grid_rules() {
        let cfg = HierConfig::default();
        assert_eq!(k_grid(10, 10, &cfg), (2..=9).collect::<Vec<_>>());
        assert_eq!(k_grid(400, 400, &cfg).len(), 149);
        assert_eq!(k_grid(10, 4, &cfg), vec![2, 3, 4]);
        assert!(k_grid(10, 1, &cfg).is_empty());
        assert!(k_grid(2, 2, &cfg).is_empty());
        let g = k_grid(2000, 2000, &cfg);
        assert!(g.len() <= 32 && g[0] == 2 && *g.last().unwrap() == 150);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    /// Support of 2-d points labelled by the sign of x, for 2-way heads over 2 features.
    fn sign_support(n: usize, seed: u64) -> Vec<Example> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                let y: f64 = StandardNormal.sample(&mut rng);
                Example {
                    raw: vec![],
                    features: vec![x, y],
                    label: usize::from(x < 0.0),
                }
            })
            .collect()
    }

    fn blobs(per: usize, seed: u64) -> HypothesisSet {
        // blob A around a head that ignores x, blob B around the sign-of-x head
        let mut rng = rng_from(seed);
        let a = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        let b = [3.0, 0.0, -3.0, 0.0, 0.0, 0.0];
        let mut rows = Vec::new();
        for i in 0..2 * per {
            let c = if i % 2 == 0 { &a } else { &b };
            rows.push(
                c.iter()
                    .map(|v| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v + 0.2 * z
                    })
                    .collect::<Vec<f64>>(),
            );
        }
        set_of(rows)
    }

    #[test]
    fn two_blobs_descend_into_the_right_one() {
        let h = blobs(60, 1);
        let sup = sign_support(40, 2);
        let cfg = HierConfig::default();
        let hier = hierarchical_select(&h, &sup, 2, Loss::ZeroOne, &cfg).unwrap();
        let ex = exhaustive_select(&h, &sup, 2, Loss::ZeroOne).unwrap();
        assert_eq!(hier.index % 2, 1, "picked a row from blob A");
        assert_eq!(hier.r, ex.r);
        assert_eq!(hier.index, ex.index);
        let tr = hier.trace.as_ref().unwrap();
        assert_eq!(tr.levels[0].k, 2);
        assert!(hier.evaluations <= h.size() + cfg.k_max);
        assert!(hier.evaluations < h.size());
        assert!(tr.shortlist.len() <= 15);
        assert_eq!(hier.r, eval_support_loss(&hier.theta.values, &sup, 2, Loss::ZeroOne).unwrap());
    }

    #[test]
    fn depth_zero_is_exhaustive() {
        let h = blobs(20, 3);
        let sup = sign_support(10, 4);
        let cfg = HierConfig {
            depth: 0,
            ..Default::default()
        };
        let a = hierarchical_select(&h, &sup, 2, Loss::ZeroOne, &cfg).unwrap();
        let b = exhaustive_select(&h, &sup, 2, Loss::ZeroOne).unwrap();
        assert_eq!((a.index, a.r, a.evaluations), (b.index, b.r, b.evaluations));
    }

    #[test]
    fn collapse_falls_back() {
        let h = set_of(vec![vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0]; 6]);
        let sup = sign_support(10, 5);
        let r = hierarchical_select(&h, &sup, 2, Loss::ZeroOne, &HierConfig::default()).unwrap();
        assert!(r.trace.unwrap().fallback);
        assert_eq!((r.index, r.evaluations), (0, 6));
        assert!(hierarchical_select(&set_of(vec![vec![0.0; 6]]), &sup, 2, Loss::ZeroOne, &HierConfig::default()).is_err());
    }

    #[test]
    fn deeper_hierarchies_and_other_settings_run() {
        let h = blobs(40, 6);
        let sup = sign_support(30, 7);
        let ex = exhaustive_select(&h, &sup, 2, Loss::ZeroOne).unwrap();
        for cfg in [
            HierConfig { depth: 2, ..Default::default() },
            HierConfig { objective: SilhouetteObjective::Min, ..Default::default() },
            HierConfig { final_metric: FinalMetric::CrossEntropy, shortlist: 3, ..Default::default() },
        ] {
            let r = hierarchical_select(&h, &sup, 2, Loss::ZeroOne, &cfg).unwrap();
            assert!(r.r >= ex.r);
            assert_eq!(r.r, eval_support_loss(&r.theta.values, &sup, 2, Loss::ZeroOne).unwrap());
        }
        let hier = build_hierarchy(&h, &HierConfig::default()).unwrap();
        assert!(hier.select(&blobs(40, 8), &sup, 2, Loss::ZeroOne).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, u64)> {
        (prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 6), 3..40), any::<u64>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn hierarchical_never_beats_exhaustive((rows, seed) in instance()) {
            let h = set_of(rows);
            let sup = sign_support(12, seed);
            let ex = exhaustive_select(&h, &sup, 2, Loss::BoundedOrdinal).unwrap();
            let cfg = HierConfig { seed, ..Default::default() };
            let hi = hierarchical_select(&h, &sup, 2, Loss::BoundedOrdinal, &cfg).unwrap();
            prop_assert!(hi.r >= ex.r);
        }

        #[test]
        fn permutation_keeps_the_selected_vector((rows, seed) in instance()) {
            let sup = sign_support(12, seed);
            let h = set_of(rows.clone());
            let mut perm: Vec<usize> = (0..rows.len()).collect();
            perm.shuffle(&mut rng_from(seed));
            let h2 = set_of(perm.iter().map(|&i| rows[i].clone()).collect());
            let a = exhaustive_select(&h, &sup, 2, Loss::BoundedOrdinal).unwrap();
            let b = exhaustive_select(&h2, &sup, 2, Loss::BoundedOrdinal).unwrap();
            prop_assert_eq!(a.r, b.r);
            // continuous loss: exact ties only between identical rows
            prop_assert_eq!(a.theta.values, b.theta.values);
            prop_assert_eq!(perm[b.index], a.index);
        }
    }
}
