//! Performance indicators: per-node and total utilization imbalance,
//! packet-loss and not-analyzed percentages, and run reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::node::{NodeCounters, UtilSnapshot};

/// Weights of the imbalance components. Must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbWeights {
    #[serde(rename = "K_c")]
    pub k_c: f64,
    #[serde(rename = "K_r")]
    pub k_r: f64,
    #[serde(rename = "K_n")]
    pub k_n: f64,
}

impl ImbWeights {
    pub fn new(k_c: f64, k_r: f64, k_n: f64) -> Result<Self> {
        let w = ImbWeights { k_c, k_r, k_n };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("K_c", self.k_c), ("K_r", self.k_r), ("K_n", self.k_n)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::parameter("weights", format!("{name} must be in [0, 1]")));
            }
        }
        if (self.k_c + self.k_r + self.k_n - 1.0).abs() > 1e-12 {
            return Err(Error::parameter("weights", "K_c + K_r + K_n must equal 1"));
        }
        Ok(())
    }
}

impl Default for ImbWeights {
    /// Symmetric default: the weighting is a deployment choice, so the
    /// neutral split is used unless configured otherwise.
    fn default() -> Self {
        ImbWeights {
            k_c: 1.0 / 3.0,
            k_r: 1.0 / 3.0,
            k_n: 1.0 / 3.0,
        }
    }
}

/// Weighted squared deviation of one node's utilization triple from the
/// system averages.
pub fn node_imbalance(snap: &UtilSnapshot, averages: &UtilSnapshot, w: &ImbWeights) -> f64 {
    w.k_c * (snap.cpu - averages.cpu).powi(2)
        + w.k_r * (snap.ram - averages.ram).powi(2)
        + w.k_n * (snap.net - averages.net).powi(2)
}

/// Mean of [`node_imbalance`] over all nodes against their component-wise
/// averages.
pub fn total_imbalance(snaps: &[UtilSnapshot], w: &ImbWeights) -> Result<f64> {
    if snaps.is_empty() {
        return Err(Error::parameter("snaps", "need at least one node"));
    }
    let n = snaps.len() as f64;
    let averages = UtilSnapshot {
        cpu: snaps.iter().map(|s| s.cpu).sum::<f64>() / n,
        ram: snaps.iter().map(|s| s.ram).sum::<f64>() / n,
        net: snaps.iter().map(|s| s.net).sum::<f64>() / n,
    };
    Ok(snaps
        .iter()
        .map(|s| node_imbalance(s, &averages, w))
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sm,
    Pm,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Sm => "SM",
            Method::Pm => "PM",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInfo {
    pub target_h: f64,
    pub target_dh: f64,
    pub lambda: f64,
    pub achieved_h: f64,
    pub achieved_dh: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub loss_pct: f64,
    pub imb_tot: f64,
    pub not_analyzed_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSummary {
    pub offered: u64,
    pub dropped: u64,
    pub not_analyzed: u64,
    pub blocked: u64,
    pub permitted: u64,
    pub in_flight: u64,
}

/// One simulation run's results in report shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: ScenarioInfo,
    pub method: Method,
    pub loss_pct: f64,
    pub imb_tot: f64,
    pub not_analyzed_pct: f64,
    pub per_epoch: Vec<EpochMetrics>,
    pub counters: CounterSummary,
}

/// Assembles the headline indicators from post-warmup counters and the
/// per-epoch imbalance series. Fails on zero offered packets or a
/// conservation violation in the full-run counters.
#[allow(clippy::too_many_arguments)]
pub fn summarize(
    scenario: ScenarioInfo,
    method: Method,
    reported: &NodeCounters,
    full_run: &NodeCounters,
    in_flight: u64,
    per_epoch: Vec<EpochMetrics>,
) -> Result<RunReport> {
    if reported.enqueued == 0 {
        return Err(Error::DegenerateInput("no packets offered".into()));
    }
    let conserved = full_run.enqueued
        == full_run.dropped
            + full_run.not_analyzed
            + full_run.blocked
            + full_run.permitted
            + in_flight;
    if !conserved {
        return Err(Error::Invariant(format!(
            "counter conservation violated: enqueued {} != {} + {} + {} + {} + {}",
            full_run.enqueued,
            full_run.dropped,
            full_run.not_analyzed,
            full_run.blocked,
            full_run.permitted,
            in_flight
        )));
    }
    let offered = reported.enqueued as f64;
    let imb_tot = if per_epoch.is_empty() {
        0.0
    } else {
        per_epoch.iter().map(|e| e.imb_tot).sum::<f64>() / per_epoch.len() as f64
    };
    Ok(RunReport {
        scenario,
        method,
        loss_pct: 100.0 * reported.dropped as f64 / offered,
        imb_tot,
        not_analyzed_pct: 100.0 * reported.not_analyzed as f64 / offered,
        per_epoch,
        counters: CounterSummary {
            offered: reported.enqueued,
            dropped: reported.dropped,
            not_analyzed: reported.not_analyzed,
            blocked: reported.blocked,
            permitted: reported.permitted,
            in_flight,
        },
    })
}
