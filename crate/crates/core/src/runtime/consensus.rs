//! Server-less termination detection.
//!
//! Every worker counts the update messages it sends to and receives from
//! each peer. When it pauses, it broadcasts those counters stamped with a
//! fresh epoch. A paused worker holding the latest announcement of every
//! worker declares global convergence once, for every ordered pair
//! `(a, b)`, the number of messages `a` reports sent to `b` equals the
//! number `b` reports received from `a`.
//!
//! The test is safe: if the counters match, consider the first message
//! received by any worker `b` after its announcement. Its sender `a` either
//! sent it before announcing, and then `a`'s sent count exceeds `b`'s
//! received count, or after; but a paused worker only wakes up by receiving
//! a message, which would be an earlier such receipt. So no worker ever
//! wakes up again and no update is in flight.

use serde::{Deserialize, Serialize};

/// Counters of a worker at the time it paused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PauseRecord {
    pub worker: usize,
    /// Strictly increasing per worker.
    pub epoch: u64,
    pub sent_to: Vec<u64>,
    pub recv_from: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Consensus {
    GlobalDone,
    Continue,
}

/// Decides termination from the latest announcement of every worker.
pub fn convergence_consensus(records: &[Option<PauseRecord>]) -> Consensus {
    let w = records.len();
    let mut all = Vec::with_capacity(w);
    for r in records {
        match r {
            Some(r) => all.push(r),
            None => return Consensus::Continue,
        }
    }
    for a in 0..w {
        for b in 0..w {
            if a != b && all[a].sent_to[b] != all[b].recv_from[a] {
                return Consensus::Continue;
            }
        }
    }
    Consensus::GlobalDone
}

/// Latest announcement seen from each worker.
#[derive(Debug, Clone)]
pub struct ConsensusTable {
    records: Vec<Option<PauseRecord>>,
}

impl ConsensusTable {
    pub fn new(workers: usize) -> Self {
        ConsensusTable {
            records: vec![None; workers],
        }
    }

    /// Keeps `rec` if it is newer than the stored announcement of its worker.
    pub fn record(&mut self, rec: PauseRecord) {
        let slot = &mut self.records[rec.worker];
        if slot.as_ref().is_none_or(|old| rec.epoch > old.epoch) {
            *slot = Some(rec);
        }
    }

    pub fn check(&self) -> Consensus {
        convergence_consensus(&self.records)
    }

    pub fn records(&self) -> &[Option<PauseRecord>] {
        &self.records
    }
}
