//! Append-only record of what a run transmitted and computed.

use serde::{Deserialize, Serialize};

/// Bytes per transmitted scalar (32-bit reals on the wire).
pub const BYTES_PER_SCALAR: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Client to server.
    Up,
    /// Server to client.
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEvent {
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub param_count: u64,
    pub extra_scalars: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    /// Local optimizer steps.
    Train,
    /// Gradient probes that do not update the model.
    Probe,
    /// Forward passes an algorithm needs for its own decisions.
    Eval,
    Pretrain,
    Generator,
    Distill,
    /// Generative-model training and sampling before federation starts.
    Synthesis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEvent {
    pub round: usize,
    /// `None` for server-side work.
    pub client: Option<usize>,
    pub phase: Phase,
    pub flops: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommTotals {
    pub params: u64,
    pub extra_scalars: u64,
}

impl CommTotals {
    pub fn transmitted(&self) -> u64 {
        self.params + self.extra_scalars
    }

    pub fn bytes(&self) -> u64 {
        BYTES_PER_SCALAR * self.transmitted()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    comm: Vec<CommEvent>,
    flops: Vec<FlopEvent>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_comm(&mut self, event: CommEvent) {
        self.comm.push(event);
    }

    pub fn record_flops(&mut self, event: FlopEvent) {
        if event.flops > 0 {
            self.flops.push(event);
        }
    }

    pub fn comm_events(&self) -> &[CommEvent] {
        &self.comm
    }

    pub fn flop_events(&self) -> &[FlopEvent] {
        &self.flops
    }

    pub fn totals(&self) -> CommTotals {
        self.totals_through(usize::MAX)
    }

    /// Communication in rounds `<= round`.
    pub fn totals_through(&self, round: usize) -> CommTotals {
        self.comm
            .iter()
            .filter(|e| e.round <= round)
            .fold(CommTotals::default(), |acc, e| CommTotals {
                params: acc.params + e.param_count,
                extra_scalars: acc.extra_scalars + e.extra_scalars,
            })
    }

    pub fn total_flops(&self) -> u64 {
        self.flops_through(usize::MAX)
    }

    pub fn flops_through(&self, round: usize) -> u64 {
        self.flops
            .iter()
            .filter(|e| e.round <= round)
            .map(|e| e.flops)
            .sum()
    }

    pub fn flops_in(&self, round: usize, phase: Phase) -> u64 {
        self.flops
            .iter()
            .filter(|e| e.round == round && e.phase == phase)
            .map(|e| e.flops)
            .sum()
    }

    pub fn flops_by_phase(&self, phase: Phase) -> u64 {
        self.flops
            .iter()
            .filter(|e| e.phase == phase)
            .map(|e| e.flops)
            .sum()
    }

    pub fn count(&self, direction: Direction) -> usize {
        self.comm.iter().filter(|e| e.direction == direction).count()
    }
}
