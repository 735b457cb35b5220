//! One OS thread per worker, connected by unbounded channels.

use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender, TryRecvError};

use super::message::{AbortReason, ControlMessage, Message, Outbox, Transport};
use super::worker::{Shared, Status, WorkerState};
use crate::error::{Error, Result};

struct Fabric<'a> {
    senders: &'a [Sender<Message>],
}

impl Transport for Fabric<'_> {
    fn send(&mut self, _from: usize, to: usize, msg: Message) -> Result<()> {
        self.senders[to]
            .send(msg)
            .map_err(|e| Error::Transport(e.to_string()))
    }
}

const IDLE_POLL: Duration = Duration::from_millis(20);

pub(crate) fn run(sh: &Shared, workers: Vec<WorkerState>, timeout: Option<Duration>) -> Result<Vec<WorkerState>> {
    let n = workers.len();
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..n).map(|_| unbounded::<Message>()).unzip();
    let start = Instant::now();
    std::thread::scope(|s| {
        let handles: Vec<_> = workers
            .into_iter()
            .map(|mut st| {
                let rx = &receivers[st.id()];
                let senders = &senders[..];
                s.spawn(move || {
                    drive(sh, &mut st, rx, senders, start, timeout)?;
                    Ok(st)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::Transport("a worker thread panicked".into()))?)
            .collect()
    })
}

fn drive(
    sh: &Shared,
    st: &mut WorkerState,
    rx: &Receiver<Message>,
    senders: &[Sender<Message>],
    start: Instant,
    timeout: Option<Duration>,
) -> Result<()> {
    let id = st.id();
    let mut fabric = Fabric { senders };
    let mut out = Outbox::new();
    let mut flush = |out: &mut Outbox| -> Result<()> {
        for (to, m) in out.drain(..) {
            fabric.send(id, to, m)?;
        }
        Ok(())
    };
    loop {
        loop {
            match rx.try_recv() {
                Ok(m) => st.handle(sh, m, &mut out),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return Err(Error::Transport("inbox closed".into())),
            }
        }
        flush(&mut out)?;
        if st.status().is_terminal() {
            return Ok(());
        }
        if st.status() == Status::Active && !st.is_blocked() {
            st.worker_iteration(sh, &mut out);
            flush(&mut out)?;
        } else {
            match rx.recv_timeout(IDLE_POLL) {
                Ok(m) => {
                    st.handle(sh, m, &mut out);
                    flush(&mut out)?;
                }
                Err(RecvTimeoutError::Timeout) => st.unblock(),
                Err(RecvTimeoutError::Disconnected) => return Err(Error::Transport("inbox closed".into())),
            }
        }
        if timeout.is_some_and(|t| start.elapsed() > t) && !st.status().is_terminal() {
            for to in (0..senders.len()).filter(|&w| w != id) {
                let _ = senders[to].send(Message::Control(ControlMessage::Abort(AbortReason::Timeout)));
            }
            st.handle(sh, Message::Control(ControlMessage::Abort(AbortReason::Timeout)), &mut out);
            return Ok(());
        }
    }
}
