//! Counts of scalars exchanged between neighbouring partitions.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ReducedMatvec,
    PrecondApply,
    Recovery,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::ReducedMatvec, Stage::PrecondApply, Stage::Recovery];

    fn index(self) -> usize {
        match self {
            Stage::ReducedMatvec => 0,
            Stage::PrecondApply => 1,
            Stage::Recovery => 2,
        }
    }
}

#[derive(Debug, Default)]
struct Counter {
    messages: AtomicU64,
    scalars: AtomicU64,
}

/// Thread-safe, monotone message ledger. Every record is one message of the
/// given number of scalars.
#[derive(Debug, Default)]
pub struct CommLedger {
    stages: [Counter; 3],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCount {
    pub messages: u64,
    pub scalars: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub reduced_matvec: StageCount,
    pub precond_apply: StageCount,
    pub recovery: StageCount,
}

impl LedgerSnapshot {
    pub fn stage(&self, s: Stage) -> StageCount {
        match s {
            Stage::ReducedMatvec => self.reduced_matvec,
            Stage::PrecondApply => self.precond_apply,
            Stage::Recovery => self.recovery,
        }
    }

    pub fn total_scalars(&self) -> u64 {
        Stage::ALL.iter().map(|&s| self.stage(s).scalars).sum()
    }

    /// Per-stage difference `self - earlier`.
    pub fn since(&self, earlier: &LedgerSnapshot) -> LedgerSnapshot {
        let d = |a: StageCount, b: StageCount| StageCount {
            messages: a.messages - b.messages,
            scalars: a.scalars - b.scalars,
        };
        LedgerSnapshot {
            reduced_matvec: d(self.reduced_matvec, earlier.reduced_matvec),
            precond_apply: d(self.precond_apply, earlier.precond_apply),
            recovery: d(self.recovery, earlier.recovery),
        }
    }
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, stage: Stage, scalars: usize) {
        let c = &self.stages[stage.index()];
        c.messages.fetch_add(1, Ordering::Relaxed);
        c.scalars.fetch_add(scalars as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let get = |s: Stage| {
            let c = &self.stages[s.index()];
            StageCount {
                messages: c.messages.load(Ordering::Relaxed),
                scalars: c.scalars.load(Ordering::Relaxed),
            }
        };
        LedgerSnapshot {
            reduced_matvec: get(Stage::ReducedMatvec),
            precond_apply: get(Stage::PrecondApply),
            recovery: get(Stage::Recovery),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_accumulate_per_stage() {
        let l = CommLedger::new();
        l.record(Stage::Recovery, 6);
        l.record(Stage::Recovery, 4);
        l.record(Stage::PrecondApply, 3);
        let s = l.snapshot();
        assert_eq!(
            s.recovery,
            StageCount {
                messages: 2,
                scalars: 10
            }
        );
        assert_eq!(
            s.precond_apply,
            StageCount {
                messages: 1,
                scalars: 3
            }
        );
        assert_eq!(s.reduced_matvec, StageCount::default());
        assert_eq!(s.total_scalars(), 13);
        l.record(Stage::ReducedMatvec, 1);
        assert_eq!(l.snapshot().since(&s).reduced_matvec.scalars, 1);
    }
}
