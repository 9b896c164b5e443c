//! The slotted simulation loop, scenario sweeps, and paired comparison.
//!
//! One run synthesizes a trace, then drives it through the selected
//! dispatch methods over identical packets (paired traces). Per slot:
//! arrivals are dispatched, every node is stepped in index order, and at
//! each epoch boundary the finished window is analyzed and the PM rule
//! rebuilt for the next epoch — the rule active during epoch `k + 1`
//! depends only on data from epochs `<= k`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::balancing::{
    analyze_epoch, classify, dispatch_pm, dispatch_sm, update_rule, LoadRule, RuleTriggers,
};
use crate::error::{Error, Result};
use crate::fractal::{QGrid, ScalePlan};
use crate::ids::RuleSet;
use crate::metrics::{
    summarize, total_imbalance, EpochMetrics, ImbWeights, Method, RunReport, ScenarioInfo,
};
use crate::node::{NodeConfig, NodeCounters, NodeState};
use crate::traffic::{synthesize_trace, CalibrationPolicy, Series, TraceOutput, TrafficSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodSel {
    Sm,
    Pm,
    Both,
}

impl MethodSel {
    pub fn methods(&self) -> Vec<Method> {
        match self {
            MethodSel::Sm => vec![Method::Sm],
            MethodSel::Pm => vec![Method::Pm],
            MethodSel::Both => vec![Method::Sm, Method::Pm],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodesConfig {
    pub count: usize,
    #[serde(default)]
    pub config: NodeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RuleSetConfig {
    /// Same rule counts and costs for every traffic class.
    Uniform {
        permit_per_class: usize,
        prohibit_per_class: usize,
        #[serde(default = "default_cost")]
        cost: f64,
        #[serde(default)]
        total_block_prob: f64,
    },
    /// Rule database CSV (`rule_id,kind,class_id,cost,block_prob`).
    Csv { path: String },
}

fn default_cost() -> f64 {
    1.0
}

impl RuleSetConfig {
    pub fn build(&self, class_ids: &[u8]) -> Result<RuleSet> {
        match self {
            RuleSetConfig::Uniform {
                permit_per_class,
                prohibit_per_class,
                cost,
                total_block_prob,
            } => RuleSet::uniform(
                class_ids,
                *permit_per_class,
                *prohibit_per_class,
                *cost,
                *total_block_prob,
            ),
            RuleSetConfig::Csv { path } => RuleSet::from_csv_path(std::path::Path::new(path)),
        }
    }
}

fn default_overload_factor() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub traffic: TrafficSpec,
    pub nodes: NodesConfig,
    pub rules: RuleSetConfig,
    pub epoch_slots: usize,
    pub method: MethodSel,
    #[serde(default)]
    pub weights: ImbWeights,
    /// Moment grid; `None` selects the default `{-5..5} \ {0}`.
    #[serde(default)]
    pub qgrid: Option<Vec<f64>>,
    pub seed: u64,
    /// Slots excluded from reported metrics; defaults to two epochs.
    #[serde(default)]
    pub warmup_slots: Option<usize>,
    /// Window-count growth that fires the overload trigger.
    #[serde(default = "default_overload_factor")]
    pub overload_factor: f64,
    #[serde(default)]
    pub calibration: CalibrationPolicy,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.traffic.validate()?;
        self.nodes.config.validate()?;
        if self.nodes.count < 2 {
            return Err(Error::parameter("nodes.count", "need at least 2 nodes"));
        }
        if self.epoch_slots < 1024 {
            return Err(Error::parameter("epoch_slots", "must be >= 1024"));
        }
        if self.warmup_slots() >= self.traffic.n_slots {
            return Err(Error::parameter("warmup_slots", "must be below n_slots"));
        }
        self.weights.validate()?;
        if let Some(qs) = &self.qgrid {
            QGrid::new(qs.clone())?;
        }
        Ok(())
    }

    pub fn warmup_slots(&self) -> usize {
        self.warmup_slots.unwrap_or(2 * self.epoch_slots)
    }

    pub fn qgrid(&self) -> Result<QGrid> {
        match &self.qgrid {
            Some(qs) => QGrid::new(qs.clone()),
            None => Ok(QGrid::default_grid()),
        }
    }
}

/// One rule change, for the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub method: Method,
    pub epoch: u64,
    pub threshold: f64,
    pub first_list: Vec<u8>,
    pub second_list: Vec<u8>,
    pub assignment: BTreeMap<u8, Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<RunReport>,
    pub audit: Vec<AuditRecord>,
}

/// Runs the configured simulation; `method = both` yields one report
/// per method over the identical packet trace.
pub fn run(cfg: &SimConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let class_ids: Vec<u8> = cfg.traffic.class_mix.iter().map(|s| s.class.id).collect();
    let rules = cfg.rules.build(&class_ids)?;
    let trace = synthesize_trace(&cfg.traffic, &rules, &cfg.calibration, cfg.seed)?;
    let scenario = ScenarioInfo {
        target_h: cfg.traffic.target_h,
        target_dh: cfg.traffic.target_dh,
        lambda: cfg.traffic.lambda,
        achieved_h: trace.achieved_h,
        achieved_dh: trace.achieved_dh,
        seed: cfg.seed,
    };
    let mut reports = Vec::new();
    let mut audit = Vec::new();
    for method in cfg.method.methods() {
        let (report, mut records) = simulate_one(method, &trace, cfg, &rules, scenario)?;
        reports.push(report);
        audit.append(&mut records);
    }
    Ok(RunOutput { reports, audit })
}

fn simulate_one(
    method: Method,
    trace: &TraceOutput,
    cfg: &SimConfig,
    rules: &RuleSet,
    scenario: ScenarioInfo,
) -> Result<(RunReport, Vec<AuditRecord>)> {
    let n_slots = cfg.traffic.n_slots;
    let epoch_slots = cfg.epoch_slots;
    let warmup = cfg.warmup_slots();
    let node_cfg = &cfg.nodes.config;
    let node_ids: Vec<usize> = (0..cfg.nodes.count).collect();
    let class_ids: Vec<u8> = cfg.traffic.class_mix.iter().map(|s| s.class.id).collect();
    let qgrid = cfg.qgrid()?;
    let plan = ScalePlan::for_length(epoch_slots)?;

    let mut nodes: Vec<NodeState> = node_ids.iter().map(|&i| NodeState::new(i)).collect();
    let mut rule = LoadRule::bootstrap(&class_ids, &node_ids);
    let mut audit = Vec::new();

    // per-class slot counts of the running window
    let mut window_counts: BTreeMap<u8, Vec<f64>> = class_ids
        .iter()
        .map(|&c| (c, vec![0.0; epoch_slots]))
        .collect();
    let mut window_packets = 0u64;
    let mut prev_window_packets = 0u64;

    // arrival index over the sorted packet list
    let mut next_packet = 0usize;

    let mut per_epoch = Vec::new();
    let mut warm_counters = NodeCounters::default();
    let mut boundary_counters = NodeCounters::default();
    let mut epoch_index = 0u64;
    let warmup_epochs = warmup / epoch_slots;

    for now in 0..n_slots as u64 {
        if now as usize == warmup {
            warm_counters = aggregate_counters(&nodes);
        }
        for node in &mut nodes {
            node.begin_slot();
        }
        while next_packet < trace.packets.len()
            && trace.packets[next_packet].arrival_slot == now
        {
            let packet = &trace.packets[next_packet];
            next_packet += 1;
            let class = classify(packet);
            let target = match method {
                Method::Sm => dispatch_sm(&nodes),
                Method::Pm => dispatch_pm(class, &rule, &nodes),
            };
            nodes[target].enqueue(node_cfg, packet.clone(), now);
            if let Some(series) = window_counts.get_mut(&class) {
                series[(now as usize) % epoch_slots] += 1.0;
            }
            window_packets += 1;
        }
        for node in &mut nodes {
            node.step(node_cfg, rules, now);
        }

        if (now as usize + 1) % epoch_slots == 0 {
            let snaps: Vec<_> = nodes
                .iter()
                .map(|n| n.utilization_snapshot(node_cfg))
                .collect();
            let imb = total_imbalance(&snaps, &cfg.weights)?;
            let agg = aggregate_counters(&nodes);
            if epoch_index >= warmup_epochs as u64 {
                let offered = agg.enqueued - boundary_counters.enqueued;
                let dropped = agg.dropped - boundary_counters.dropped;
                let na = agg.not_analyzed - boundary_counters.not_analyzed;
                let denom = offered.max(1) as f64;
                per_epoch.push(EpochMetrics {
                    epoch: epoch_index,
                    loss_pct: 100.0 * dropped as f64 / denom,
                    imb_tot: imb,
                    not_analyzed_pct: 100.0 * na as f64 / denom,
                });
            }
            boundary_counters = agg;

            if method == Method::Pm {
                let window_start = now + 1 - epoch_slots as u64;
                let counts: BTreeMap<u8, Series> = window_counts
                    .iter()
                    .map(|(&c, v)| (c, Series::new(v.clone())))
                    .collect();
                let analysis =
                    analyze_epoch(&counts, window_start..now + 1, rules, &qgrid, &plan)?;
                let triggers = RuleTriggers {
                    overload_event: prev_window_packets > 0
                        && window_packets as f64
                            > cfg.overload_factor * prev_window_packets as f64,
                    signature_db_refreshed: false,
                    epoch_boundary: true,
                };
                let next = update_rule(&rule, &analysis, &node_ids, triggers)?;
                if next != rule {
                    audit.push(AuditRecord {
                        method,
                        epoch: next.epoch_id,
                        threshold: next.threshold,
                        first_list: next.first_list.iter().copied().collect(),
                        second_list: next.second_list.iter().copied().collect(),
                        assignment: next.assignment.clone(),
                    });
                }
                rule = next;
            }
            for series in window_counts.values_mut() {
                series.iter_mut().for_each(|v| *v = 0.0);
            }
            prev_window_packets = window_packets;
            window_packets = 0;
            epoch_index += 1;
        }
    }

    let full_run = aggregate_counters(&nodes);
    let in_flight: u64 = nodes.iter().map(|n| n.in_flight()).sum();
    let mut reported = full_run;
    reported.enqueued -= warm_counters.enqueued;
    reported.dropped -= warm_counters.dropped;
    reported.not_analyzed -= warm_counters.not_analyzed;
    reported.blocked -= warm_counters.blocked;
    reported.permitted -= warm_counters.permitted;

    let report = summarize(scenario, method, &reported, &full_run, in_flight, per_epoch)?;
    Ok((report, audit))
}

fn aggregate_counters(nodes: &[NodeState]) -> NodeCounters {
    let mut agg = NodeCounters::default();
    for node in nodes {
        agg.merge(&node.counters);
    }
    agg
}

/// Scenario grid for Table-1-style sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGrid {
    #[serde(rename = "H_values")]
    pub h_values: Vec<f64>,
    pub dh_values: Vec<f64>,
    pub lambda_values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base: SimConfig,
}

impl ScenarioGrid {
    pub fn validate(&self) -> Result<()> {
        if self.h_values.is_empty()
            || self.dh_values.is_empty()
            || self.lambda_values.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::parameter("grid", "all grid axes must be nonempty"));
        }
        self.base.validate()
    }

    pub fn cells(&self) -> Vec<SimConfig> {
        let mut cells = Vec::new();
        for &h in &self.h_values {
            for &dh in &self.dh_values {
                for &lambda in &self.lambda_values {
                    for &seed in &self.seeds {
                        let mut cfg = self.base.clone();
                        cfg.traffic.target_h = h;
                        cfg.traffic.target_dh = dh;
                        cfg.traffic.lambda = lambda;
                        cfg.seed = seed;
                        cells.push(cfg);
                    }
                }
            }
        }
        cells
    }
}

/// One sweep result row: a report, or the error that stopped the run.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub target_h: f64,
    pub target_dh: f64,
    pub lambda: f64,
    pub seed: u64,
    pub outcome: std::result::Result<Vec<RunReport>, String>,
}

/// Runs the whole grid. Individual run failures become error rows and
/// the sweep continues; row order is deterministic regardless of
/// `parallelism`.
pub fn sweep(grid: &ScenarioGrid, parallelism: usize) -> Result<Vec<SweepRow>> {
    grid.validate()?;
    if parallelism == 0 {
        return Err(Error::parameter("parallelism", "must be positive"));
    }
    let cells = grid.cells();
    let execute = |cfg: &SimConfig| -> SweepRow {
        SweepRow {
            target_h: cfg.traffic.target_h,
            target_dh: cfg.traffic.target_dh,
            lambda: cfg.traffic.lambda,
            seed: cfg.seed,
            outcome: run(cfg)
                .map(|out| out.reports)
                .map_err(|e| e.to_string()),
        }
    };
    if parallelism == 1 {
        Ok(cells.iter().map(execute).collect())
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(|| cells.par_iter().map(execute).collect()))
    }
}

/// PM minus SM for the three headline metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub loss_pct: f64,
    pub imb_tot: f64,
    pub not_analyzed_pct: f64,
    /// True when PM is no worse than SM on all three metrics.
    pub pm_no_worse: bool,
}

/// Paired comparison of an SM report and a PM report from the same
/// scenario and seed.
pub fn compare(sm: &RunReport, pm: &RunReport) -> Result<Delta> {
    if sm.method != Method::Sm || pm.method != Method::Pm {
        return Err(Error::parameter("reports", "expected (SM, PM) in that order"));
    }
    let a = &sm.scenario;
    let b = &pm.scenario;
    if a.seed != b.seed
        || a.target_h != b.target_h
        || a.target_dh != b.target_dh
        || a.lambda != b.lambda
    {
        return Err(Error::parameter("reports", "scenario/seed mismatch"));
    }
    let loss = pm.loss_pct - sm.loss_pct;
    let imb = pm.imb_tot - sm.imb_tot;
    let na = pm.not_analyzed_pct - sm.not_analyzed_pct;
    Ok(Delta {
        loss_pct: loss,
        imb_tot: imb,
        not_analyzed_pct: na,
        pm_no_worse: loss <= 0.0 && imb <= 0.0 && na <= 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::{ClassShare, Protocol, ServiceClass, TupleTemplate};

    /// Small fast config on the Poisson path (no calibration).
    fn poisson_cfg(classes: usize, lambda: f64, method: MethodSel) -> SimConfig {
        let class_mix = (0..classes)
            .map(|i| ClassShare {
                class: ServiceClass::new(i as u8, Protocol::Tcp, TupleTemplate::default()),
                fraction: 1.0 / classes as f64,
            })
            .collect();
        SimConfig {
            traffic: TrafficSpec {
                target_h: 0.5,
                target_dh: 0.0,
                lambda,
                n_slots: 1 << 12,
                class_mix,
                threat_rate: 0.05,
            },
            nodes: NodesConfig {
                count: 4,
                config: NodeConfig {
                    service_rate: 1.0,
                    queue_capacity: 16,
                    d_max: 32,
                    ram_per_queued: 1.0 / 16.0,
                    net_capacity: 4,
                    util_window: 64,
                },
            },
            rules: RuleSetConfig::Uniform {
                permit_per_class: 4,
                prohibit_per_class: 2,
                cost: 1.0,
                total_block_prob: 0.1,
            },
            epoch_slots: 1024,
            method,
            weights: ImbWeights::default(),
            qgrid: None,
            seed: 77,
            warmup_slots: None,
            overload_factor: 1.5,
            calibration: CalibrationPolicy::default(),
        }
    }

    #[test]
    fn run_is_deterministic() {
        let cfg = poisson_cfg(2, 0.5, MethodSel::Both);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.audit, b.audit);
    }

    #[test]
    fn pm_degenerates_to_sm_for_single_class() {
        let cfg = poisson_cfg(1, 0.5, MethodSel::Both);
        let out = run(&cfg).unwrap();
        let (sm, pm) = (&out.reports[0], &out.reports[1]);
        assert_eq!(sm.loss_pct.to_bits(), pm.loss_pct.to_bits());
        assert_eq!(sm.imb_tot.to_bits(), pm.imb_tot.to_bits());
        assert_eq!(
            sm.not_analyzed_pct.to_bits(),
            pm.not_analyzed_pct.to_bits()
        );
        assert_eq!(sm.counters, pm.counters);
        assert_eq!(sm.per_epoch, pm.per_epoch);
    }

    #[test]
    fn overload_saturates() {
        // offered work far above capacity: both loss and not-analyzed show up
        let mut cfg = poisson_cfg(2, 3.0, MethodSel::Sm);
        cfg.nodes.count = 2;
        let out = run(&cfg).unwrap();
        let report = &out.reports[0];
        assert!(report.loss_pct > 0.0, "loss = {}", report.loss_pct);
        assert!(
            report.not_analyzed_pct > 0.0,
            "na = {}",
            report.not_analyzed_pct
        );
    }

    #[test]
    fn epoch_protocol_has_no_lookahead() {
        // truncating the run after k epochs leaves the audit prefix intact
        let mut long = poisson_cfg(3, 0.8, MethodSel::Pm);
        long.traffic.n_slots = 1 << 13;
        let mut short = long.clone();
        short.traffic.n_slots = 1 << 12;
        let long_out = run(&long).unwrap();
        let short_out = run(&short).unwrap();
        let k = short_out.audit.len();
        assert!(k >= 2);
        assert_eq!(&long_out.audit[..k], &short_out.audit[..]);
    }

    #[test]
    fn conservation_reported_by_summary() {
        let cfg = poisson_cfg(2, 1.2, MethodSel::Both);
        let out = run(&cfg).unwrap();
        for report in &out.reports {
            let c = &report.counters;
            // post-warmup percentages stay within [0, 100]
            assert!(report.loss_pct >= 0.0 && report.loss_pct <= 100.0);
            assert!(report.not_analyzed_pct >= 0.0 && report.not_analyzed_pct <= 100.0);
            assert!(c.offered > 0);
        }
    }

    #[test]
    fn sweep_counts_and_order() {
        let grid = ScenarioGrid {
            h_values: vec![0.5],
            dh_values: vec![0.0],
            lambda_values: vec![0.4, 0.8],
            seeds: vec![1, 2],
            base: poisson_cfg(2, 0.4, MethodSel::Both),
        };
        let rows = sweep(&grid, 1).unwrap();
        assert_eq!(rows.len(), 4);
        // deterministic order: lambda-major then seed
        assert_eq!((rows[0].lambda, rows[0].seed), (0.4, 1));
        assert_eq!((rows[3].lambda, rows[3].seed), (0.8, 2));
        for row in &rows {
            let reports = row.outcome.as_ref().unwrap();
            assert_eq!(reports.len(), 2);
        }
    }

    #[test]
    fn sweep_parallel_matches_serial() {
        let grid = ScenarioGrid {
            h_values: vec![0.5],
            dh_values: vec![0.0],
            lambda_values: vec![0.5],
            seeds: vec![1, 2, 3],
            base: poisson_cfg(2, 0.5, MethodSel::Both),
        };
        let serial = sweep(&grid, 1).unwrap();
        let parallel = sweep(&grid, 4).unwrap();
        assert_eq!(serial.len(), parallel.len());
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.outcome.as_ref().unwrap(), b.outcome.as_ref().unwrap());
        }
    }

    #[test]
    fn sweep_rejects_empty_axes() {
        let grid = ScenarioGrid {
            h_values: vec![],
            dh_values: vec![0.0],
            lambda_values: vec![0.5],
            seeds: vec![1],
            base: poisson_cfg(2, 0.5, MethodSel::Both),
        };
        assert!(sweep(&grid, 1).is_err());
    }

    #[test]
    fn compare_semantics() {
        let cfg = poisson_cfg(1, 0.5, MethodSel::Both);
        let out = run(&cfg).unwrap();
        let delta = compare(&out.reports[0], &out.reports[1]).unwrap();
        assert_eq!(delta.loss_pct, 0.0);
        assert_eq!(delta.imb_tot, 0.0);
        assert_eq!(delta.not_analyzed_pct, 0.0);
        assert!(delta.pm_no_worse);

        // mismatched scenario rejected
        let other = poisson_cfg(1, 0.5, MethodSel::Both);
        let mut out2 = run(&other).unwrap();
        out2.reports[1].scenario.seed = 99;
        assert!(compare(&out2.reports[0], &out2.reports[1]).is_err());
    }
}
