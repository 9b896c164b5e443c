//! One NIDS sensor node: bounded FIFO input queue, slot-stepped
//! inspection with deadline enforcement, and utilization tracking.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::ids::{match_packet, RuleSet, Verdict};
use crate::traffic::Packet;

const WORK_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeConfig {
    /// Inspection work (time units) available per slot.
    pub service_rate: f64,
    /// Maximum queued packets.
    pub queue_capacity: usize,
    /// Maximum permissible queueing delay in slots; packets past it are
    /// forwarded without analysis.
    pub d_max: u64,
    /// RAM fraction consumed per queued packet.
    pub ram_per_queued: f64,
    /// Packets per slot the node's link admits.
    pub net_capacity: u32,
    /// Slots in the CPU-utilization averaging window.
    pub util_window: usize,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            service_rate: 1.0,
            queue_capacity: 24,
            d_max: 56,
            ram_per_queued: 1.0 / 24.0,
            net_capacity: 6,
            util_window: 64,
        }
    }
}

impl NodeConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.service_rate <= 0.0
            || self.queue_capacity < 1
            || self.ram_per_queued <= 0.0
            || self.net_capacity < 1
            || self.util_window < 1
        {
            return Err(crate::Error::parameter(
                "node",
                "service_rate, queue_capacity, ram_per_queued, net_capacity and util_window must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCounters {
    /// Enqueue attempts (offered packets).
    pub enqueued: u64,
    pub dropped: u64,
    pub not_analyzed: u64,
    pub blocked: u64,
    pub permitted: u64,
}

impl NodeCounters {
    pub fn merge(&mut self, other: &NodeCounters) {
        self.enqueued += other.enqueued;
        self.dropped += other.dropped;
        self.not_analyzed += other.not_analyzed;
        self.blocked += other.blocked;
        self.permitted += other.permitted;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilSnapshot {
    /// Mean busy fraction over the utilization window.
    pub cpu: f64,
    /// Queue occupancy scaled by RAM-per-packet, clamped to [0, 1].
    pub ram: f64,
    /// Remaining link headroom this slot, in [0, 1].
    pub net: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admit {
    Accepted,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    NotAnalyzed,
    Blocked,
    Permitted,
}

#[derive(Debug, Clone, Copy)]
pub struct Completion {
    pub class: u8,
    pub outcome: Outcome,
    pub comparisons: f64,
}

#[derive(Debug, Clone)]
struct InService {
    class: u8,
    verdict: Verdict,
    comparisons: f64,
    work_remaining: f64,
}

/// Mutable state of one sensor node. Owned by exactly one simulation
/// run; the engine steps nodes sequentially in index order.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: usize,
    queue: VecDeque<(Packet, u64)>,
    in_service: Option<InService>,
    pub counters: NodeCounters,
    pub comparisons_total: f64,
    busy_ring: Vec<f64>,
    ring_next: usize,
    slots_seen: u64,
    admissions_this_slot: u32,
}

impl NodeState {
    pub fn new(id: usize) -> Self {
        NodeState {
            id,
            queue: VecDeque::new(),
            in_service: None,
            counters: NodeCounters::default(),
            comparisons_total: 0.0,
            busy_ring: Vec::new(),
            ring_next: 0,
            slots_seen: 0,
            admissions_this_slot: 0,
        }
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Queued plus in-service packets.
    pub fn in_flight(&self) -> u64 {
        self.queue.len() as u64 + u64::from(self.in_service.is_some())
    }

    pub fn admissions_this_slot(&self) -> u32 {
        self.admissions_this_slot
    }

    /// Resets the per-slot link admission counter. Called by the engine
    /// at the start of each slot, before arrivals.
    pub fn begin_slot(&mut self) {
        self.admissions_this_slot = 0;
    }

    /// Drop-tail admission: rejects on a full queue or once the slot's
    /// link admissions are exhausted.
    pub fn enqueue(&mut self, cfg: &NodeConfig, packet: Packet, now: u64) -> Admit {
        debug_assert!(now >= packet.arrival_slot);
        self.counters.enqueued += 1;
        if self.queue.len() >= cfg.queue_capacity
            || self.admissions_this_slot >= cfg.net_capacity
        {
            self.counters.dropped += 1;
            return Admit::Dropped;
        }
        self.admissions_this_slot += 1;
        self.queue.push_back((packet, now));
        Admit::Accepted
    }

    /// Runs one slot of inspection work.
    ///
    /// Pulls head-of-queue packets into service; a packet whose waiting
    /// time exceeds `d_max` is forwarded without inspection at zero
    /// cost. Inspection work spans slots through the in-service
    /// remainder. Records the slot's busy fraction.
    pub fn step(&mut self, cfg: &NodeConfig, rules: &RuleSet, now: u64) -> Vec<Completion> {
        let mut budget = cfg.service_rate;
        let mut completions = Vec::new();
        loop {
            if budget <= WORK_EPS {
                break;
            }
            if self.in_service.is_none() {
                let Some((packet, enqueue_slot)) = self.queue.pop_front() else {
                    break;
                };
                if now.saturating_sub(enqueue_slot) > cfg.d_max {
                    self.counters.not_analyzed += 1;
                    completions.push(Completion {
                        class: packet.service_class,
                        outcome: Outcome::NotAnalyzed,
                        comparisons: 0.0,
                    });
                    continue;
                }
                let (verdict, comparisons) = match_packet(&packet, rules);
                self.in_service = Some(InService {
                    class: packet.service_class,
                    verdict,
                    comparisons,
                    work_remaining: comparisons,
                });
            }
            let svc = self.in_service.as_mut().unwrap();
            let spend = budget.min(svc.work_remaining);
            svc.work_remaining -= spend;
            budget -= spend;
            if svc.work_remaining <= WORK_EPS {
                let svc = self.in_service.take().unwrap();
                self.comparisons_total += svc.comparisons;
                let outcome = match svc.verdict {
                    Verdict::Blocked => {
                        self.counters.blocked += 1;
                        Outcome::Blocked
                    }
                    Verdict::Permitted => {
                        self.counters.permitted += 1;
                        Outcome::Permitted
                    }
                };
                completions.push(Completion {
                    class: svc.class,
                    outcome,
                    comparisons: svc.comparisons,
                });
            }
        }
        let busy = (cfg.service_rate - budget) / cfg.service_rate;
        if self.busy_ring.len() < cfg.util_window {
            self.busy_ring.push(busy);
        } else {
            self.busy_ring[self.ring_next] = busy;
            self.ring_next = (self.ring_next + 1) % cfg.util_window;
        }
        self.slots_seen += 1;
        completions
    }

    /// CPU / RAM / network utilization triple. Requires at least one
    /// stepped slot.
    pub fn utilization_snapshot(&self, cfg: &NodeConfig) -> UtilSnapshot {
        debug_assert!(self.slots_seen > 0, "snapshot before first slot");
        let cpu = if self.busy_ring.is_empty() {
            0.0
        } else {
            self.busy_ring.iter().sum::<f64>() / self.busy_ring.len() as f64
        };
        let ram = (self.queue.len() as f64 * cfg.ram_per_queued).clamp(0.0, 1.0);
        let net = (1.0 - self.admissions_this_slot as f64 / cfg.net_capacity as f64)
            .clamp(0.0, 1.0);
        UtilSnapshot { cpu, ram, net }
    }

    /// Conservation check: enqueue attempts equal the sum of all
    /// terminal outcomes plus packets still in flight.
    pub fn conservation_holds(&self) -> bool {
        self.counters.enqueued
            == self.counters.dropped
                + self.counters.not_analyzed
                + self.counters.blocked
                + self.counters.permitted
                + self.in_flight()
    }
}
