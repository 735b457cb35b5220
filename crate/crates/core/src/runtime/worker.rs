use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::consensus::{Consensus, ConsensusTable, PauseRecord};
use super::message::{AbortReason, ControlMessage, Message, Outbox, UpdateMessage};
use crate::csc::{CandidateUpdate, CscContext, Slab, SubPartition};
use crate::error::{Error, Result};
use crate::grid::{BorderGeometry, WorkerGrid};
use crate::tensor::{ActivationMap, ConvOptions, Dictionary, Pos, Region, Signal};

/// Read-only data shared by all workers of a run.
#[derive(Debug)]
pub struct Shared {
    pub ctx: CscContext,
    pub grid: WorkerGrid,
    pub lambda: f64,
    pub eps: f64,
    pub soft_locks: bool,
    /// Divergence threshold on `|Z|`.
    pub threshold: f64,
    /// Cell visits allowed per worker.
    pub max_iter: u64,
    pub record_commits: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Active,
    /// Every cell is below tolerance and the inbox was empty.
    Paused,
    /// Global convergence was declared.
    Done,
    Diverged,
    /// Stopped by an abort (iteration limit, timeout or protocol error).
    Stopped,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        matches!(self, Status::Done | Status::Diverged | Status::Stopped)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerStats {
    pub id: usize,
    /// Cell visits.
    pub iterations: u64,
    pub accepted: u64,
    pub soft_locked: u64,
    /// Update messages sent.
    pub messages: u64,
    /// Accepted updates that emitted at least one message.
    pub notifying_updates: u64,
    pub control_messages: u64,
    pub pauses: u64,
    pub t_sec: f64,
}

/// An accepted update, stamped for offline safety checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    /// Scheduler round (deterministic backend), 0 otherwise.
    pub round: u64,
    pub worker: usize,
    pub atom: usize,
    pub pos: Pos,
    pub delta: f64,
}

/// `min_k factor / ||D_k||_inf` over the nonzero atoms.
pub fn divergence_threshold(d: &Dictionary, factor: f64) -> f64 {
    d.max_abs()
        .into_iter()
        .filter(|m| *m > 0.0)
        .map(|m| factor / m)
        .fold(f64::INFINITY, f64::min)
}

/// One worker: its sub-domain, the `Z`/`beta` slab over `S_w ∪ E_L(S_w)`,
/// its cells and protocol bookkeeping.
#[derive(Debug, Clone)]
pub struct WorkerState {
    id: usize,
    sub: Region,
    border: BorderGeometry,
    pub(crate) slab: Slab,
    cells: Vec<Region>,
    cursor: usize,
    quiet: usize,
    stalled: usize,
    status: Status,
    epoch: u64,
    seq: u64,
    sent_to: Vec<u64>,
    recv_from: Vec<u64>,
    table: ConsensusTable,
    abort: Option<AbortReason>,
    pub(crate) stats: WorkerStats,
    pub(crate) commits: Vec<CommitRecord>,
    pub(crate) round: u64,
    busy: Duration,
}

impl WorkerState {
    pub fn new(
        sh: &Shared,
        x: &Signal,
        id: usize,
        warm: Option<&ActivationMap>,
        conv: ConvOptions,
    ) -> Result<Self> {
        let w = sh.grid.workers();
        let start = Instant::now();
        let sub = sh.grid.sub_domain(id);
        let slab = Slab::init(&sh.ctx, x, sh.grid.extended(id), warm, conv)?;
        let cells = SubPartition::for_support(&sub, sh.ctx.support()).clipped(sh.ctx.coding());
        Ok(WorkerState {
            id,
            sub,
            border: sh.grid.border(id),
            slab,
            cells,
            cursor: 0,
            quiet: 0,
            stalled: 0,
            status: Status::Active,
            epoch: 0,
            seq: 0,
            sent_to: vec![0; w],
            recv_from: vec![0; w],
            table: ConsensusTable::new(w),
            abort: None,
            stats: WorkerStats { id, ..WorkerStats::default() },
            commits: Vec::new(),
            round: 0,
            busy: start.elapsed(),
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn stats(&self) -> &WorkerStats {
        &self.stats
    }

    pub fn sub_domain(&self) -> &Region {
        &self.sub
    }

    pub fn cells(&self) -> &[Region] {
        &self.cells
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn abort_reason(&self) -> Option<&AbortReason> {
        self.abort.as_ref()
    }

    /// Active, but the last full pass only met soft-locked or sub-tolerance
    /// cells. Nothing changes until a message arrives.
    pub fn is_blocked(&self) -> bool {
        self.status == Status::Active && !self.cells.is_empty() && self.stalled >= self.cells.len()
    }

    /// Forces another pass before [`is_blocked`](Self::is_blocked) holds again.
    pub fn unblock(&mut self) {
        self.stalled = 0;
    }

    /// Region of the local slab (`S_w ∪ E_L(S_w)`).
    pub fn slab_region(&self) -> &Region {
        &self.slab.region
    }

    pub fn z_at(&self, k: usize, pos: Pos) -> f64 {
        self.slab.z_at(k, pos)
    }

    pub fn beta_at(&self, k: usize, pos: Pos) -> f64 {
        self.slab.beta_at(k, pos)
    }

    /// Largest `|Z|` over `S_w`.
    pub fn local_max_abs(&self, atoms: usize) -> f64 {
        let mut m = 0.0f64;
        for k in 0..atoms {
            for p in self.sub.positions() {
                m = m.max(self.slab.z_at(k, p).abs());
            }
        }
        m
    }

    /// `Ok` unless `|Z|` exceeds `threshold` somewhere in `S_w`.
    pub fn divergence_guard(&self, atoms: usize, threshold: f64) -> Result<()> {
        let value = self.local_max_abs(atoms);
        if value > threshold {
            return Err(Error::Diverged {
                worker: self.id,
                value,
                threshold,
            });
        }
        Ok(())
    }

    fn broadcast(&mut self, sh: &Shared, msg: ControlMessage, out: &mut Outbox) {
        for w in 0..sh.grid.workers() {
            if w != self.id {
                self.stats.control_messages += 1;
                out.push((w, Message::Control(msg.clone())));
            }
        }
    }

    fn stop(&mut self, sh: &Shared, status: Status, reason: AbortReason, out: &mut Outbox) {
        self.status = status;
        self.broadcast(sh, ControlMessage::Abort(reason.clone()), out);
        self.abort = Some(reason);
    }

    /// Applies a neighbor's update to the local slab.
    pub fn receive_update(&mut self, sh: &Shared, m: &UpdateMessage) -> Result<()> {
        let hood = Region::neighborhood(m.pos, sh.ctx.support(), &sh.ctx.domain().region());
        if !hood.intersects(&self.slab.region) || m.origin >= self.recv_from.len() || m.origin == self.id {
            return Err(Error::Protocol {
                worker: self.id,
                reason: format!("update at {:?} from worker {} does not concern this worker", m.pos, m.origin),
            });
        }
        self.slab.apply(&sh.ctx, m.atom, m.pos, m.delta);
        self.recv_from[m.origin] += 1;
        self.quiet = 0;
        self.stalled = 0;
        if self.status == Status::Paused {
            self.status = Status::Active;
        }
        Ok(())
    }

    /// Processes one incoming message.
    pub fn handle(&mut self, sh: &Shared, msg: Message, out: &mut Outbox) {
        let t = Instant::now();
        match msg {
            Message::Update(m) => {
                if self.status.is_terminal() {
                    return;
                }
                if let Err(e) = self.receive_update(sh, &m) {
                    let reason = AbortReason::Protocol {
                        worker: self.id,
                        reason: e.to_string(),
                    };
                    self.stop(sh, Status::Stopped, reason, out);
                }
            }
            Message::Control(ControlMessage::PauseAnnounce(rec)) => {
                self.table.record(rec);
                if self.status == Status::Paused {
                    self.try_finish(sh, out);
                }
            }
            Message::Control(ControlMessage::GlobalDone) => {
                if !self.status.is_terminal() {
                    self.status = Status::Done;
                }
            }
            Message::Control(ControlMessage::Abort(reason)) => {
                if !self.status.is_terminal() {
                    self.status = Status::Stopped;
                    self.abort = Some(reason);
                }
            }
        }
        self.busy += t.elapsed();
    }

    fn try_finish(&mut self, sh: &Shared, out: &mut Outbox) {
        if self.table.check() == Consensus::GlobalDone {
            self.status = Status::Done;
            self.broadcast(sh, ControlMessage::GlobalDone, out);
        }
    }

    fn pause(&mut self, sh: &Shared, out: &mut Outbox) {
        self.status = Status::Paused;
        self.epoch += 1;
        self.stats.pauses += 1;
        let rec = PauseRecord {
            worker: self.id,
            epoch: self.epoch,
            sent_to: self.sent_to.clone(),
            recv_from: self.recv_from.clone(),
        };
        self.table.record(rec.clone());
        self.broadcast(sh, ControlMessage::PauseAnnounce(rec), out);
        self.try_finish(sh, out);
    }

    /// Soft-lock test of `c` against `V(pos) ∩ E_L(S_w)`, using the mirrored
    /// slab values.
    fn soft_lock_ok(&self, sh: &Shared, c: &CandidateUpdate) -> bool {
        let mag = c.magnitude();
        let coding = sh.ctx.coding();
        for p in sh.grid.soft_lock_area(self.id, c.pos) {
            if !coding.contains(p) {
                continue;
            }
            for k in 0..sh.ctx.atoms() {
                let m = self.slab.proposal(&sh.ctx, sh.lambda, k, p).1.abs();
                if m > mag || (m == mag && sh.grid.owner(p) < self.id) {
                    return false;
                }
            }
        }
        true
    }

    fn commit(&mut self, sh: &Shared, c: &CandidateUpdate, out: &mut Outbox) {
        self.slab.apply(&sh.ctx, c.atom, c.pos, c.delta);
        self.stats.accepted += 1;
        if sh.record_commits {
            self.commits.push(CommitRecord {
                round: self.round,
                worker: self.id,
                atom: c.atom,
                pos: c.pos,
                delta: c.delta,
            });
        }
        let value = self.slab.z_at(c.atom, c.pos).abs();
        if value > sh.threshold {
            let reason = AbortReason::Diverged {
                worker: self.id,
                value,
                threshold: sh.threshold,
            };
            self.stop(sh, Status::Diverged, reason, out);
            return;
        }
        if self.border.in_extended_border(c.pos) {
            let targets = sh.grid.notify_set(c.pos);
            if !targets.is_empty() {
                self.stats.notifying_updates += 1;
            }
            for w in targets {
                self.seq += 1;
                self.sent_to[w] += 1;
                self.stats.messages += 1;
                out.push((
                    w,
                    Message::Update(UpdateMessage {
                        atom: c.atom,
                        pos: c.pos,
                        delta: c.delta,
                        origin: self.id,
                        seq: self.seq,
                    }),
                ));
            }
        }
    }

    /// One cell visit: greedy candidate in the current cell, soft-lock
    /// arbitration on the border, commit and border notification.
    ///
    /// Pauses after a full pass without any candidate above tolerance;
    /// soft-locked candidates count as activity.
    pub fn worker_iteration(&mut self, sh: &Shared, out: &mut Outbox) {
        if self.status != Status::Active {
            return;
        }
        let t = Instant::now();
        if self.cells.is_empty() {
            self.pause(sh, out);
            self.busy += t.elapsed();
            return;
        }
        self.stats.iterations += 1;
        let cell = self.cells[self.cursor];
        self.cursor = (self.cursor + 1) % self.cells.len();
        match self.slab.best_in(&sh.ctx, sh.lambda, &cell) {
            Some(c) if c.magnitude() >= sh.eps => {
                self.quiet = 0;
                if sh.soft_locks && self.border.in_border(c.pos) && !self.soft_lock_ok(sh, &c) {
                    self.stats.soft_locked += 1;
                    self.stalled += 1;
                } else {
                    self.stalled = 0;
                    self.commit(sh, &c, out);
                }
            }
            _ => {
                self.quiet += 1;
                self.stalled += 1;
            }
        }
        if self.status == Status::Active {
            if self.quiet >= self.cells.len() {
                self.pause(sh, out);
            } else if self.stats.iterations >= sh.max_iter {
                let reason = AbortReason::IterationLimit { worker: self.id };
                self.stop(sh, Status::Stopped, reason, out);
            }
        }
        self.busy += t.elapsed();
    }

    pub(crate) fn finish_stats(&mut self) {
        self.stats.t_sec = self.busy.as_secs_f64();
    }

    /// Copies the `S_w` part of the local `Z` into `z`.
    pub(crate) fn write_into(&self, z: &mut ActivationMap) {
        for k in 0..z.atoms() {
            for p in self.sub.positions() {
                z.set(k, p, self.slab.z_at(k, p));
            }
        }
    }
}
