//! Single-threaded round-based scheduler with seeded interleavings.
//!
//! Each round, every worker takes part with probability `participation`,
//! in a shuffled order. A participating worker drains its inbox, then
//! performs one cell visit if it is active. Messages sent during a round are
//! delivered at its end, in sender order, so all workers of a round decide
//! from the same global state: one round is one drain window.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::message::{Message, Outbox, Transport};
use super::worker::{Shared, Status, WorkerState};
use crate::error::{Error, Result};

/// Per-receiver FIFO inboxes plus the messages of the current round.
#[derive(Debug, Default)]
pub struct RoundQueue {
    inboxes: Vec<VecDeque<Message>>,
    pending: Vec<(usize, usize, Message)>,
}

impl RoundQueue {
    pub fn new(workers: usize) -> Self {
        RoundQueue {
            inboxes: vec![VecDeque::new(); workers],
            pending: Vec::new(),
        }
    }

    /// Delivers the messages of the round, ordered by sender.
    pub fn end_round(&mut self) {
        let mut p = std::mem::take(&mut self.pending);
        // Stable: FIFO per sender is kept.
        p.sort_by_key(|(from, _, _)| *from);
        for (_, to, m) in p {
            self.inboxes[to].push_back(m);
        }
    }

    pub fn inbox_len(&self, w: usize) -> usize {
        self.inboxes[w].len()
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len() + self.inboxes.iter().map(|q| q.len()).sum::<usize>()
    }

    pub fn pop(&mut self, w: usize) -> Option<Message> {
        self.inboxes[w].pop_front()
    }
}

impl Transport for RoundQueue {
    fn send(&mut self, from: usize, to: usize, msg: Message) -> Result<()> {
        if to >= self.inboxes.len() {
            return Err(Error::Transport(format!("no worker {to}")));
        }
        self.pending.push((from, to, msg));
        Ok(())
    }
}

/// A deterministic run in progress.
pub struct Simulation<'a> {
    sh: &'a Shared,
    workers: Vec<WorkerState>,
    queue: RoundQueue,
    rng: ChaCha8Rng,
    participation: f64,
    round: u64,
    order: Vec<usize>,
}

impl<'a> Simulation<'a> {
    pub fn new(sh: &'a Shared, workers: Vec<WorkerState>, seed: u64, participation: f64) -> Self {
        let n = workers.len();
        Simulation {
            sh,
            workers,
            queue: RoundQueue::new(n),
            rng: ChaCha8Rng::seed_from_u64(seed),
            participation,
            round: 0,
            order: (0..n).collect(),
        }
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    pub fn queue(&self) -> &RoundQueue {
        &self.queue
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Queues `msg` for delivery at the end of the current round.
    pub fn inject(&mut self, from: usize, to: usize, msg: Message) -> Result<()> {
        self.queue.send(from, to, msg)
    }

    fn flush(&mut self, from: usize, out: &mut Outbox) -> Result<()> {
        for (to, m) in out.drain(..) {
            self.queue.send(from, to, m)?;
        }
        Ok(())
    }

    /// Lets worker `w` drain its inbox and take one step.
    pub fn step_worker(&mut self, w: usize) -> Result<()> {
        let mut out = Outbox::new();
        self.workers[w].round = self.round;
        while let Some(m) = self.queue.pop(w) {
            self.workers[w].handle(self.sh, m, &mut out);
        }
        self.workers[w].worker_iteration(self.sh, &mut out);
        self.flush(w, &mut out)
    }

    /// Runs one round. Returns `true` once every worker has terminated.
    pub fn run_round(&mut self) -> Result<bool> {
        self.order.shuffle(&mut self.rng);
        let order = self.order.clone();
        for w in order {
            if self.participation < 1.0 && !self.rng.random_bool(self.participation.max(0.0)) {
                continue;
            }
            self.step_worker(w)?;
        }
        self.queue.end_round();
        self.round += 1;
        if self.workers.iter().all(|s| s.status().is_terminal()) {
            return Ok(true);
        }
        let idle = self.workers.iter().all(|s| s.status() != Status::Active);
        if idle && self.queue.in_flight() == 0 {
            return Err(Error::Protocol {
                worker: 0,
                reason: "all workers idle with no message in flight but no termination".into(),
            });
        }
        Ok(false)
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.run_round()? {}
        Ok(())
    }

    pub fn into_workers(self) -> Vec<WorkerState> {
        self.workers
    }
}
