//! Dispatch policies: the join-shortest-queue baseline (SM) and the
//! multifractality-aware method (PM).
//!
//! PM runs an epoch protocol: per-class traffic in the finished window
//! is estimated, the burst-adjusted inspection time `T_new` is computed
//! per class, classes split into a first list (`T_new` at or above the
//! median) and a second list, and the node pool is partitioned between
//! the lists in proportion to their aggregate demand. Dispatch inside a
//! list's node subset stays join-shortest-queue, so PM with a single
//! class over all nodes degenerates to SM decision-for-decision.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fractal::{estimate_class_counts, QGrid, ScalePlan};
use crate::ids::{base_service_time, dpi_time_estimate, RuleSet};
use crate::node::NodeState;
use crate::traffic::{Packet, Series};

/// Per-class analysis of one balancing window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAnalysis {
    pub h: f64,
    pub dh: f64,
    pub low_confidence: bool,
    /// Share of the window's packets carried by this class.
    pub pkt_ratio: f64,
    /// Share of the signature database relevant to this class.
    pub sig_ratio: f64,
    /// Class-restricted average inspection time.
    pub t_ids: f64,
    /// Full-scan time of one packet of this class.
    pub t_serv: f64,
    /// Multifractality-adjusted DPI time estimate.
    pub t_new: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochAnalysis {
    pub window: (u64, u64),
    pub per_class: BTreeMap<u8, ClassAnalysis>,
}

/// The active dispatch table: class lists plus per-class node subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadRule {
    pub epoch_id: u64,
    pub threshold: f64,
    pub first_list: BTreeSet<u8>,
    pub second_list: BTreeSet<u8>,
    pub assignment: BTreeMap<u8, Vec<usize>>,
    /// `(H, Δh)` per class at rule-build time.
    pub provenance: BTreeMap<u8, (f64, f64)>,
}

impl LoadRule {
    /// Bootstrap rule: every class may use every node (PM behaves as SM
    /// until the first analysis lands).
    pub fn bootstrap(classes: &[u8], nodes: &[usize]) -> Self {
        LoadRule {
            epoch_id: 0,
            threshold: 0.0,
            first_list: classes.iter().copied().collect(),
            second_list: BTreeSet::new(),
            assignment: classes.iter().map(|&c| (c, nodes.to_vec())).collect(),
            provenance: BTreeMap::new(),
        }
    }
}

/// Classification reads the class the packet already carries; header
/// parsing is outside the model.
pub fn classify(packet: &Packet) -> u8 {
    packet.service_class
}

/// Window analysis: per-class `(H, Δh)` estimates, packet and signature
/// ratios, and the `T_new` estimate per class.
///
/// Estimator failures degrade to the sentinel estimate (flagged low
/// confidence) rather than aborting the epoch.
pub fn analyze_epoch(
    class_counts: &BTreeMap<u8, Series>,
    window: Range<u64>,
    rules: &RuleSet,
    qgrid: &QGrid,
    plan: &ScalePlan,
) -> Result<EpochAnalysis> {
    let estimates = estimate_class_counts(class_counts, qgrid, plan)?;
    let total_packets: f64 = class_counts
        .values()
        .map(|s| s.values().iter().sum::<f64>())
        .sum();
    let mut per_class = BTreeMap::new();
    for (&class, est) in &estimates {
        let pkt_count: f64 = class_counts[&class].values().iter().sum();
        let pkt_ratio = if total_packets > 0.0 {
            pkt_count / total_packets
        } else {
            0.0
        };
        let (t_ids, _warned) = base_service_time(class, rules);
        let t_serv = rules.full_scan_cost(class);
        let h = est.h.clamp(1e-6, 1.2);
        let dh = est.dh.max(0.0);
        let t_new = dpi_time_estimate(t_ids, t_serv, h, dh)?;
        per_class.insert(
            class,
            ClassAnalysis {
                h,
                dh,
                low_confidence: est.low_confidence,
                pkt_ratio,
                sig_ratio: rules.signature_ratio(class),
                t_ids,
                t_serv,
                t_new,
            },
        );
    }
    Ok(EpochAnalysis {
        window: (window.start, window.end),
        per_class,
    })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Builds the PM dispatch rule from a window analysis.
///
/// Threshold is the median `T_new`; classes at or above it form the
/// first list. The node pool splits between the lists at the cut that
/// best matches each list's aggregate demand `Σ pkt_ratio · T_new`
/// (minimizing the hotter list's load-per-node), with each nonempty
/// list getting at least one node.
pub fn build_rule_pm(
    analysis: &EpochAnalysis,
    nodes: &[usize],
    prev: Option<&LoadRule>,
) -> Result<LoadRule> {
    if analysis.per_class.is_empty() {
        return Err(Error::parameter("analysis", "no classes in window"));
    }
    if nodes.is_empty() {
        return Err(Error::parameter("nodes", "need at least one node"));
    }
    let mut t_values: Vec<f64> = analysis.per_class.values().map(|c| c.t_new).collect();
    t_values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = median(&t_values);

    let mut first_list = BTreeSet::new();
    let mut second_list = BTreeSet::new();
    let mut demand_first = 0.0;
    let mut demand_second = 0.0;
    for (&class, c) in &analysis.per_class {
        if c.t_new >= threshold {
            first_list.insert(class);
            demand_first += c.pkt_ratio * c.t_new;
        } else {
            second_list.insert(class);
            demand_second += c.pkt_ratio * c.t_new;
        }
    }

    let n = nodes.len();
    let (first_nodes, second_nodes): (Vec<usize>, Vec<usize>) = if second_list.is_empty() {
        (nodes.to_vec(), Vec::new())
    } else if n == 1 {
        // degenerate but valid: both lists share the single node
        (nodes.to_vec(), nodes.to_vec())
    } else {
        // smallest per-node load for the hotter pool over all cuts
        let mut best_k = 1;
        let mut best_load = f64::INFINITY;
        for k in 1..n {
            let load = (demand_first / k as f64).max(demand_second / (n - k) as f64);
            if load < best_load {
                best_load = load;
                best_k = k;
            }
        }
        (nodes[..best_k].to_vec(), nodes[best_k..].to_vec())
    };

    let mut assignment = BTreeMap::new();
    for &class in &first_list {
        assignment.insert(class, first_nodes.clone());
    }
    for &class in &second_list {
        assignment.insert(class, second_nodes.clone());
    }
    let provenance = analysis
        .per_class
        .iter()
        .map(|(&c, a)| (c, (a.h, a.dh)))
        .collect();

    Ok(LoadRule {
        epoch_id: prev.map(|p| p.epoch_id + 1).unwrap_or(0),
        threshold,
        first_list,
        second_list,
        assignment,
        provenance,
    })
}

/// SM baseline: join the shortest queue, ties broken by lowest node id.
pub fn dispatch_sm(nodes: &[NodeState]) -> usize {
    debug_assert!(!nodes.is_empty());
    let mut best = 0;
    let mut best_len = usize::MAX;
    for (i, node) in nodes.iter().enumerate() {
        let len = node.queue_len();
        if len < best_len {
            best_len = len;
            best = i;
        }
    }
    best
}

/// PM dispatch: join-shortest-queue restricted to the class's node
/// subset. Classes not covered by the rule fall back to SM over all
/// nodes.
pub fn dispatch_pm(class: u8, rule: &LoadRule, nodes: &[NodeState]) -> usize {
    match rule.assignment.get(&class) {
        Some(subset) if !subset.is_empty() => {
            let mut best = subset[0];
            let mut best_len = usize::MAX;
            for &i in subset {
                let len = nodes[i].queue_len();
                if len < best_len {
                    best_len = len;
                    best = i;
                }
            }
            best
        }
        _ => dispatch_sm(nodes),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RuleTriggers {
    /// Traffic in the running window exceeded the configured level.
    pub overload_event: bool,
    /// The signature database refresh timer expired.
    pub signature_db_refreshed: bool,
    /// The analysis window just closed.
    pub epoch_boundary: bool,
}

impl RuleTriggers {
    pub fn boundary() -> Self {
        RuleTriggers {
            epoch_boundary: true,
            ..Default::default()
        }
    }

    fn any(&self) -> bool {
        self.overload_event || self.signature_db_refreshed || self.epoch_boundary
    }
}

/// Rebuilds the rule when a trigger fires or the epoch boundary is
/// reached; otherwise returns the previous rule unchanged.
pub fn update_rule(
    prev: &LoadRule,
    analysis: &EpochAnalysis,
    nodes: &[usize],
    triggers: RuleTriggers,
) -> Result<LoadRule> {
    if triggers.any() {
        build_rule_pm(analysis, nodes, Some(prev))
    } else {
        Ok(prev.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn analysis_from(t_new: &[(u8, f64, f64)]) -> EpochAnalysis {
        // (class, t_new, pkt_ratio)
        let per_class = t_new
            .iter()
            .map(|&(c, t, r)| {
                (
                    c,
                    ClassAnalysis {
                        h: 0.7,
                        dh: 0.5,
                        low_confidence: false,
                        pkt_ratio: r,
                        sig_ratio: 0.25,
                        t_ids: t / 1.2,
                        t_serv: t / 1.2,
                        t_new: t,
                    },
                )
            })
            .collect();
        EpochAnalysis {
            window: (0, 4096),
            per_class,
        }
    }

    #[test]
    fn classify_is_total() {
        let p = Packet::synthetic(0, 3, 0);
        assert_eq!(classify(&p), 3);
        let q = Packet::synthetic(9, 3, 1);
        assert_eq!(classify(&p), classify(&q));
    }

    #[test]
    fn rule_splits_by_median_and_demand() {
        // two classes, T_new {10, 14}, 4 nodes, demands {5, 7}
        let analysis = analysis_from(&[(0, 10.0, 0.5), (1, 14.0, 0.5)]);
        let rule = build_rule_pm(&analysis, &[0, 1, 2, 3], None).unwrap();
        assert!(rule.first_list.contains(&1));
        assert!(rule.second_list.contains(&0));
        assert_eq!(rule.assignment[&1].len(), 2);
        assert_eq!(rule.assignment[&0].len(), 2);
        // disjoint subsets covering all nodes
        let mut all: Vec<usize> = rule.assignment[&0]
            .iter()
            .chain(&rule.assignment[&1])
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rule_tie_case_keeps_single_pool() {
        let analysis = analysis_from(&[(0, 10.0, 0.5), (1, 10.0, 0.5)]);
        let rule = build_rule_pm(&analysis, &[0, 1, 2, 3], None).unwrap();
        assert_eq!(rule.first_list.len(), 2);
        assert!(rule.second_list.is_empty());
        assert_eq!(rule.assignment[&0], vec![0, 1, 2, 3]);
    }

    #[test]
    fn rule_single_class_gets_all_nodes() {
        let analysis = analysis_from(&[(0, 10.0, 1.0)]);
        let rule = build_rule_pm(&analysis, &[0, 1, 2], None).unwrap();
        assert_eq!(rule.assignment[&0], vec![0, 1, 2]);
        assert!(rule.second_list.is_empty());
    }

    #[test]
    fn rule_single_node_degenerate() {
        let analysis = analysis_from(&[(0, 10.0, 0.5), (1, 14.0, 0.5)]);
        let rule = build_rule_pm(&analysis, &[0], None).unwrap();
        assert_eq!(rule.assignment[&0], vec![0]);
        assert_eq!(rule.assignment[&1], vec![0]);
    }

    #[test]
    fn threshold_soundness() {
        let analysis = analysis_from(&[
            (0, 8.0, 0.25),
            (1, 12.0, 0.25),
            (2, 6.0, 0.25),
            (3, 14.0, 0.25),
        ]);
        let rule = build_rule_pm(&analysis, &[0, 1, 2, 3, 4, 5], None).unwrap();
        let min_first = rule
            .first_list
            .iter()
            .map(|c| analysis.per_class[c].t_new)
            .fold(f64::INFINITY, f64::min);
        let max_second = rule
            .second_list
            .iter()
            .map(|c| analysis.per_class[c].t_new)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_first >= max_second);
    }

    #[test]
    fn jsq_picks_shortest_with_low_id_ties() {
        let mut nodes: Vec<NodeState> = (0..3).map(NodeState::new).collect();
        let cfg = crate::node::NodeConfig {
            queue_capacity: 100,
            net_capacity: 100,
            ..Default::default()
        };
        for node in &mut nodes {
            node.begin_slot();
        }
        // queues (3, 1, 2)
        for (i, k) in [(0usize, 3u32), (1, 1), (2, 2)] {
            for _ in 0..k {
                nodes[i].enqueue(&cfg, Packet::synthetic(0, 0, 0), 0);
            }
        }
        assert_eq!(dispatch_sm(&nodes), 1);
        let empty: Vec<NodeState> = (0..3).map(NodeState::new).collect();
        assert_eq!(dispatch_sm(&empty), 0);
        let one: Vec<NodeState> = vec![NodeState::new(0)];
        assert_eq!(dispatch_sm(&one), 0);
    }

    #[test]
    fn pm_dispatch_restricted_and_fallback() {
        let mut nodes: Vec<NodeState> = (0..4).map(NodeState::new).collect();
        let cfg = crate::node::NodeConfig {
            queue_capacity: 100,
            net_capacity: 100,
            ..Default::default()
        };
        for node in &mut nodes {
            node.begin_slot();
        }
        for _ in 0..5 {
            nodes[2].enqueue(&cfg, Packet::synthetic(0, 0, 0), 0);
        }
        nodes[3].enqueue(&cfg, Packet::synthetic(0, 0, 0), 0);
        let analysis = analysis_from(&[(0, 10.0, 0.5), (1, 14.0, 0.5)]);
        let mut rule = build_rule_pm(&analysis, &[0, 1, 2, 3], None).unwrap();
        rule.assignment.insert(1, vec![2, 3]);
        // restricted JSQ over {2, 3}: node 3 has the shorter queue
        assert_eq!(dispatch_pm(1, &rule, &nodes), 3);
        // unknown class falls back to SM over all nodes
        assert_eq!(dispatch_pm(9, &rule, &nodes), dispatch_sm(&nodes));
        // singleton subset wins regardless of queue length
        rule.assignment.insert(0, vec![2]);
        assert_eq!(dispatch_pm(0, &rule, &nodes), 2);
    }

    #[test]
    fn update_rule_semantics() {
        let analysis = analysis_from(&[(0, 10.0, 0.5), (1, 14.0, 0.5)]);
        let nodes = [0usize, 1, 2, 3];
        let prev = build_rule_pm(&analysis, &nodes, None).unwrap();

        // no triggers mid-epoch: unchanged
        let same = update_rule(&prev, &analysis, &nodes, RuleTriggers::default()).unwrap();
        assert_eq!(same, prev);

        // epoch boundary: rebuilt with incremented id
        let next = update_rule(&prev, &analysis, &nodes, RuleTriggers::boundary()).unwrap();
        assert_eq!(next.epoch_id, prev.epoch_id + 1);

        // overload mid-epoch: immediate rebuild
        let trig = RuleTriggers {
            overload_event: true,
            ..Default::default()
        };
        let rebuilt = update_rule(&prev, &analysis, &nodes, trig).unwrap();
        assert_eq!(rebuilt.epoch_id, prev.epoch_id + 1);
    }

    #[test]
    fn update_rule_idempotent_on_identical_analysis() {
        let analysis = analysis_from(&[(0, 10.0, 0.5), (1, 14.0, 0.5)]);
        let nodes = [0usize, 1, 2, 3];
        let prev = build_rule_pm(&analysis, &nodes, None).unwrap();
        let a = update_rule(&prev, &analysis, &nodes, RuleTriggers::boundary()).unwrap();
        let b = update_rule(&prev, &analysis, &nodes, RuleTriggers::boundary()).unwrap();
        assert_eq!(a, b);
    }
}
