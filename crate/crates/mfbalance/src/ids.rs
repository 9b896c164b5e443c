//! Signature database, per-packet matching cost, and inspection-time
//! estimates.
//!
//! A packet is compared against the prohibit rules of its class in
//! order, then (if nothing matched) against the permit rules; the
//! comparison cost is the sum of the scanned rules' costs. The average
//! service time weighs the prohibit-scan and permit-scan totals by the
//! total blocking probability, and `dpi_time_estimate` adjusts a base
//! inspection time for traffic multifractality.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traffic::Packet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub id: u32,
    pub service_class: u8,
    /// Comparison time in time units. One unit per rule by default.
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Blocked,
    Permitted,
}

/// Signature set partitioned into permit rules and prohibit rules,
/// with per-prohibit-rule blocking probabilities.
///
/// Immutable once constructed; construction rejects overlapping
/// permit/prohibit lists, unbound rules, non-positive costs and total
/// blocking probability above 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    permit: Vec<u32>,
    prohibit: Vec<u32>,
    signatures: BTreeMap<u32, Signature>,
    block_prob: BTreeMap<u32, f64>,
    #[serde(skip)]
    by_class: BTreeMap<u8, ClassRules>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ClassRules {
    permit: Vec<u32>,
    prohibit: Vec<u32>,
}

impl RuleSet {
    pub fn new(
        signatures: Vec<Signature>,
        permit: Vec<u32>,
        prohibit: Vec<u32>,
        block_prob: BTreeMap<u32, f64>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for sig in signatures {
            if sig.cost <= 0.0 || !sig.cost.is_finite() {
                return Err(Error::parameter("cost", format!("rule {}: must be > 0", sig.id)));
            }
            if map.insert(sig.id, sig).is_some() {
                return Err(Error::Invariant("duplicate signature id".into()));
            }
        }
        for id in permit.iter().chain(&prohibit) {
            if !map.contains_key(id) {
                return Err(Error::Invariant(format!("rule {id} has no signature binding")));
            }
        }
        if map.len() != permit.len() + prohibit.len() {
            return Err(Error::Invariant(
                "every signature must appear in exactly one rule list".into(),
            ));
        }
        for id in &permit {
            if prohibit.contains(id) {
                return Err(Error::Invariant(format!(
                    "rule {id} appears in both permit and prohibit lists"
                )));
            }
        }
        for (id, p) in &block_prob {
            if !prohibit.contains(id) {
                return Err(Error::Invariant(format!(
                    "block_prob set for non-prohibit rule {id}"
                )));
            }
            if !(0.0..=1.0).contains(p) {
                return Err(Error::parameter("block_prob", "entries must be in [0, 1]"));
            }
        }
        let total_p: f64 = block_prob.values().sum();
        if total_p > 1.0 + 1e-12 {
            return Err(Error::Invariant(format!(
                "total blocking probability {total_p} exceeds 1"
            )));
        }
        let mut by_class: BTreeMap<u8, ClassRules> = BTreeMap::new();
        for id in &permit {
            by_class
                .entry(map[id].service_class)
                .or_default()
                .permit
                .push(*id);
        }
        for id in &prohibit {
            by_class
                .entry(map[id].service_class)
                .or_default()
                .prohibit
                .push(*id);
        }
        Ok(RuleSet {
            permit,
            prohibit,
            signatures: map,
            block_prob,
            by_class,
        })
    }

    /// Uniform rule database: per class, `permit_n` permit rules and
    /// `prohibit_n` prohibit rules of equal cost, with `total_block_prob`
    /// spread evenly over all prohibit rules.
    pub fn uniform(
        class_ids: &[u8],
        permit_n: usize,
        prohibit_n: usize,
        cost: f64,
        total_block_prob: f64,
    ) -> Result<Self> {
        let mut signatures = Vec::new();
        let mut permit = Vec::new();
        let mut prohibit = Vec::new();
        let mut block_prob = BTreeMap::new();
        let mut next_id = 0u32;
        let total_prohibit = class_ids.len() * prohibit_n;
        for &class in class_ids {
            for _ in 0..prohibit_n {
                signatures.push(Signature {
                    id: next_id,
                    service_class: class,
                    cost,
                });
                prohibit.push(next_id);
                if total_prohibit > 0 {
                    block_prob.insert(next_id, total_block_prob / total_prohibit as f64);
                }
                next_id += 1;
            }
            for _ in 0..permit_n {
                signatures.push(Signature {
                    id: next_id,
                    service_class: class,
                    cost,
                });
                permit.push(next_id);
                next_id += 1;
            }
        }
        RuleSet::new(signatures, permit, prohibit, block_prob)
    }

    pub fn permit_rules(&self) -> &[u32] {
        &self.permit
    }

    pub fn prohibit_rules(&self) -> &[u32] {
        &self.prohibit
    }

    pub fn signature(&self, id: u32) -> Option<&Signature> {
        self.signatures.get(&id)
    }

    pub fn block_prob(&self, id: u32) -> f64 {
        self.block_prob.get(&id).copied().unwrap_or(0.0)
    }

    pub fn total_block_prob(&self) -> f64 {
        self.block_prob.values().sum()
    }

    pub fn classes(&self) -> Vec<u8> {
        self.by_class.keys().copied().collect()
    }

    pub fn prohibit_for_class(&self, class: u8) -> &[u32] {
        self.by_class
            .get(&class)
            .map(|c| c.prohibit.as_slice())
            .unwrap_or(&[])
    }

    pub fn permit_for_class(&self, class: u8) -> &[u32] {
        self.by_class
            .get(&class)
            .map(|c| c.permit.as_slice())
            .unwrap_or(&[])
    }

    /// Total comparison cost of scanning every rule relevant to the
    /// class: the benign-packet (full-scan) service time.
    pub fn full_scan_cost(&self, class: u8) -> f64 {
        self.prohibit_for_class(class)
            .iter()
            .chain(self.permit_for_class(class))
            .map(|id| self.signatures[id].cost)
            .sum()
    }

    /// Per-class signature count / total signature count.
    pub fn signature_ratio(&self, class: u8) -> f64 {
        if self.signatures.is_empty() {
            return 0.0;
        }
        let n = self.prohibit_for_class(class).len() + self.permit_for_class(class).len();
        n as f64 / self.signatures.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }

    /// CSV rows `rule_id,kind,class_id,cost,block_prob` (blank
    /// probability for permit rules).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rule_id,kind,class_id,cost,block_prob\n");
        for id in &self.prohibit {
            let s = &self.signatures[id];
            let _ = writeln!(
                out,
                "{},prohibit,{},{},{}",
                id, s.service_class, s.cost, self.block_prob(*id)
            );
        }
        for id in &self.permit {
            let s = &self.signatures[id];
            let _ = writeln!(out, "{},permit,{},{},", id, s.service_class, s.cost);
        }
        out
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv(&text)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut signatures = Vec::new();
        let mut permit = Vec::new();
        let mut prohibit = Vec::new();
        let mut block_prob = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("rule_id")) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Config(format!(
                    "rule csv line {}: expected 5 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let id: u32 = fields[0]
                .parse()
                .map_err(|e| Error::Config(format!("rule csv line {}: {e}", lineno + 1)))?;
            let class: u8 = fields[2]
                .parse()
                .map_err(|e| Error::Config(format!("rule csv line {}: {e}", lineno + 1)))?;
            let cost: f64 = fields[3]
                .parse()
                .map_err(|e| Error::Config(format!("rule csv line {}: {e}", lineno + 1)))?;
            signatures.push(Signature {
                id,
                service_class: class,
                cost,
            });
            match fields[1] {
                "permit" => permit.push(id),
                "prohibit" => {
                    prohibit.push(id);
                    if !fields[4].is_empty() {
                        let p: f64 = fields[4].parse().map_err(|e| {
                            Error::Config(format!("rule csv line {}: {e}", lineno + 1))
                        })?;
                        block_prob.insert(id, p);
                    }
                }
                other => {
                    return Err(Error::Config(format!(
                        "rule csv line {}: unknown kind `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        RuleSet::new(signatures, permit, prohibit, block_prob)
    }
}

/// Sequential signature matching for one packet.
///
/// Scans the prohibit rules of the packet's class in order; a packet
/// whose threat marker equals a scanned rule is blocked with the
/// cumulative cost up to and including that rule. Otherwise the packet
/// is permitted at the cost of the full class-relevant scan.
pub fn match_packet(packet: &Packet, rules: &RuleSet) -> (Verdict, f64) {
    let mut comparisons = 0.0;
    for id in rules.prohibit_for_class(packet.service_class) {
        comparisons += rules.signature(*id).map(|s| s.cost).unwrap_or(0.0);
        if packet.threat_marker == Some(*id) {
            return (Verdict::Blocked, comparisons);
        }
    }
    for id in rules.permit_for_class(packet.service_class) {
        comparisons += rules.signature(*id).map(|s| s.cost).unwrap_or(0.0);
    }
    (Verdict::Permitted, comparisons)
}

/// Average IDS service time over the whole rule set:
/// `(Σ P(j)) · Σ cost(R-) + (1 − Σ P(j)) · Σ cost(R+)`.
pub fn avg_ids_service_time(rules: &RuleSet) -> Result<f64> {
    let total_p = rules.total_block_prob();
    if total_p > 1.0 + 1e-12 {
        return Err(Error::Invariant(format!(
            "total blocking probability {total_p} exceeds 1"
        )));
    }
    let prohibit_cost: f64 = rules
        .prohibit_rules()
        .iter()
        .map(|id| rules.signature(*id).unwrap().cost)
        .sum();
    let permit_cost: f64 = rules
        .permit_rules()
        .iter()
        .map(|id| rules.signature(*id).unwrap().cost)
        .sum();
    Ok(total_p * prohibit_cost + (1.0 - total_p) * permit_cost)
}

/// [`avg_ids_service_time`] restricted to one class's rules, with the
/// class's blocking probabilities renormalized by its share of the
/// total. Returns `(time, warned)`; a class without rules yields 0 with
/// the warning flag set.
pub fn base_service_time(class: u8, rules: &RuleSet) -> (f64, bool) {
    let prohibit = rules.prohibit_for_class(class);
    let permit = rules.permit_for_class(class);
    if prohibit.is_empty() && permit.is_empty() {
        return (0.0, true);
    }
    let class_p: f64 = prohibit.iter().map(|id| rules.block_prob(*id)).sum();
    let total_p = rules.total_block_prob();
    let scaled_p = if class_p > 0.0 && total_p > 0.0 {
        total_p
    } else {
        0.0
    };
    let prohibit_cost: f64 = prohibit
        .iter()
        .map(|id| rules.signature(*id).unwrap().cost)
        .sum();
    let permit_cost: f64 = permit
        .iter()
        .map(|id| rules.signature(*id).unwrap().cost)
        .sum();
    (scaled_p * prohibit_cost + (1.0 - scaled_p) * permit_cost, false)
}

/// Multifractality-adjusted average DPI time, exactly as the piecewise
/// formula is printed:
///
/// - `H = 0.5` (within 1e-9): `T_ids`
/// - `0.5 < H < 0.9`, `dh <= 0.4`: `T_ids + (H - 0.5) T_serv`
/// - `0.5 < H < 0.9`, `0.4 < dh < 1`: `T_ids + (H - 0.5)(dh - 0.4) T_serv`
/// - `H >= 0.9` or (`H > 0.5`, `dh >= 1`): `T_ids + T_serv`
///
/// Anti-persistent `H < 0.5` falls back to `T_ids`. The discontinuity
/// at `dh = 0.4` is kept as printed.
pub fn dpi_time_estimate(t_ids: f64, t_serv: f64, h: f64, dh: f64) -> Result<f64> {
    if t_ids < 0.0 || t_serv < 0.0 {
        return Err(Error::parameter("t_ids/t_serv", "must be non-negative"));
    }
    if dh < 0.0 {
        return Err(Error::parameter("dh", "must be non-negative"));
    }
    if !(h > 0.0 && h <= 1.2) {
        return Err(Error::parameter("H", format!("must be in (0, 1.2], got {h}")));
    }
    if (h - 0.5).abs() <= 1e-9 || h < 0.5 {
        return Ok(t_ids);
    }
    if h >= 0.9 || dh >= 1.0 {
        return Ok(t_ids + t_serv);
    }
    if dh <= 0.4 {
        Ok(t_ids + (h - 0.5) * t_serv)
    } else {
        Ok(t_ids + (h - 0.5) * (dh - 0.4) * t_serv)
    }
}
