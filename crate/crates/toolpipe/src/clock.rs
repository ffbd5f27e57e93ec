//! Time service shared by the decoder, tool workers, and the timeline
//! recorder.
//!
//! Two modes:
//!
//! * **Virtual** — a logical microsecond counter. Sleeps register a wake
//!   target and the clock advances to the earliest target only once every
//!   registered actor is blocked or sleeping, so concurrent activity is
//!   replayed in causal order and every overlap measurement is exact and
//!   reproducible.
//! * **Real** — wall time from a monotonic start instant; sleeps are actual
//!   thread sleeps.
//!
//! Channels ([`pipe`]) are clock-aware: in virtual mode a blocked receiver is
//! re-activated by the sender before time can move past the handoff, which is
//! what keeps worker reactions causally ordered with the decode loop.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

/// Which time service a workload runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    Virtual,
    Real,
}

/// Identifier of a registered actor (thread of control) on a virtual clock.
pub type ActorId = u64;

const NO_ACTOR: ActorId = u64::MAX;

// ---------------------------------------------------------------------------
// Virtual clock core
// ---------------------------------------------------------------------------

struct Sleeper {
    actor: ActorId,
    target: u64,
    /// Condvar of the channel the actor is parked on, when the sleep entry
    /// backs a `recv_deadline`. The advance loop pokes it on wake.
    wake: Option<Arc<Condvar>>,
}

struct VcInner {
    now_us: u64,
    /// Number of actors currently runnable (registered and neither sleeping
    /// nor blocked on a channel).
    active: usize,
    next_actor: ActorId,
    sleepers: Vec<Sleeper>,
}

pub struct VirtualClock {
    inner: Mutex<VcInner>,
    sleep_cv: Condvar,
}

/// Outcome of a cancellable sleep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SleepOutcome {
    Completed,
    Interrupted,
}

impl VirtualClock {
    fn new() -> Arc<Self> {
        Arc::new(VirtualClock {
            inner: Mutex::new(VcInner {
                now_us: 0,
                active: 0,
                next_actor: 0,
                sleepers: Vec::new(),
            }),
            sleep_cv: Condvar::new(),
        })
    }

    fn now_us(&self) -> u64 {
        self.inner.lock().unwrap().now_us
    }

    fn register(&self) -> ActorId {
        let mut inner = self.inner.lock().unwrap();
        let id = inner.next_actor;
        inner.next_actor += 1;
        inner.active += 1;
        id
    }

    fn deregister(&self, actor: ActorId) {
        let mut inner = self.inner.lock().unwrap();
        // A panicking worker may unwind out of a sleep; drop its entry.
        inner.sleepers.retain(|s| s.actor != actor);
        inner.active = inner.active.saturating_sub(1);
        Self::try_advance(&mut inner, &self.sleep_cv);
    }

    /// Advance time to the earliest wake target once no actor is runnable.
    /// Woken sleepers are credited as runnable before anyone observes the
    /// new time, so an advance can never skip over their reactions.
    fn try_advance(inner: &mut VcInner, sleep_cv: &Condvar) {
        if inner.active != 0 || inner.sleepers.is_empty() {
            return;
        }
        let target = inner.sleepers.iter().map(|s| s.target).min().unwrap();
        if target > inner.now_us {
            inner.now_us = target;
        }
        let now = inner.now_us;
        let before = inner.sleepers.len();
        let mut chan_wakes = Vec::new();
        inner.sleepers.retain(|s| {
            if s.target <= now {
                if let Some(cv) = &s.wake {
                    chan_wakes.push(Arc::clone(cv));
                }
                false
            } else {
                true
            }
        });
        let removed = before - inner.sleepers.len();
        inner.active += removed;
        if removed > 0 {
            sleep_cv.notify_all();
            for cv in chan_wakes {
                cv.notify_all();
            }
        }
    }

    fn sleep_until(&self, actor: ActorId, target: u64) {
        let mut inner = self.inner.lock().unwrap();
        if target <= inner.now_us {
            return;
        }
        inner.active -= 1;
        inner.sleepers.push(Sleeper {
            actor,
            target,
            wake: None,
        });
        Self::try_advance(&mut inner, &self.sleep_cv);
        loop {
            if inner.now_us >= target && !inner.sleepers.iter().any(|s| s.actor == actor) {
                return;
            }
            inner = self.sleep_cv.wait(inner).unwrap();
        }
    }

    fn sleep_until_cancellable(
        &self,
        actor: ActorId,
        target: u64,
        canceled: &AtomicBool,
    ) -> SleepOutcome {
        let mut inner = self.inner.lock().unwrap();
        if canceled.load(Ordering::SeqCst) {
            return SleepOutcome::Interrupted;
        }
        if target <= inner.now_us {
            return SleepOutcome::Completed;
        }
        inner.active -= 1;
        inner.sleepers.push(Sleeper {
            actor,
            target,
            wake: None,
        });
        Self::try_advance(&mut inner, &self.sleep_cv);
        loop {
            let mine = inner.sleepers.iter().any(|s| s.actor == actor);
            if !mine {
                return if inner.now_us >= target {
                    SleepOutcome::Completed
                } else {
                    SleepOutcome::Interrupted
                };
            }
            inner = self.sleep_cv.wait(inner).unwrap();
        }
    }

    /// Remove an actor's sleep entry ahead of its target, waking it.
    fn interrupt(&self, actor: ActorId) {
        let mut inner = self.inner.lock().unwrap();
        let before = inner.sleepers.len();
        let mut chan_wakes = Vec::new();
        inner.sleepers.retain(|s| {
            if s.actor == actor {
                if let Some(cv) = &s.wake {
                    chan_wakes.push(Arc::clone(cv));
                }
                false
            } else {
                true
            }
        });
        let removed = before - inner.sleepers.len();
        inner.active += removed;
        drop(inner);
        if removed > 0 {
            self.sleep_cv.notify_all();
            for cv in chan_wakes {
                cv.notify_all();
            }
        }
    }

    /// Block until every other actor is sleeping or blocked, without moving
    /// time. Gives zero-cost worker reactions (e.g. a validator abort) a
    /// chance to land before the caller takes its next step.
    fn quiesce(&self, actor: ActorId) {
        let mut inner = self.inner.lock().unwrap();
        let target = inner.now_us;
        inner.active -= 1;
        inner.sleepers.push(Sleeper {
            actor,
            target,
            wake: None,
        });
        Self::try_advance(&mut inner, &self.sleep_cv);
        loop {
            if !inner.sleepers.iter().any(|s| s.actor == actor) {
                return;
            }
            inner = self.sleep_cv.wait(inner).unwrap();
        }
    }
}

// ---------------------------------------------------------------------------
// Real clock core
// ---------------------------------------------------------------------------

pub struct RealClock {
    start: Instant,
}

impl RealClock {
    fn now_us(&self) -> u64 {
        self.start.elapsed().as_micros() as u64
    }
}

// ---------------------------------------------------------------------------
// Public handle
// ---------------------------------------------------------------------------

/// Cloneable handle to the time service of one run.
#[derive(Clone)]
pub enum Clock {
    Virtual(Arc<VirtualClock>),
    Real(Arc<RealClock>),
}

impl Clock {
    pub fn new(mode: ClockMode) -> Clock {
        match mode {
            ClockMode::Virtual => Clock::Virtual(VirtualClock::new()),
            ClockMode::Real => Clock::Real(Arc::new(RealClock {
                start: Instant::now(),
            })),
        }
    }

    pub fn mode(&self) -> ClockMode {
        match self {
            Clock::Virtual(_) => ClockMode::Virtual,
            Clock::Real(_) => ClockMode::Real,
        }
    }

    /// Microseconds since the clock was created.
    pub fn now_us(&self) -> u64 {
        match self {
            Clock::Virtual(v) => v.now_us(),
            Clock::Real(r) => r.now_us(),
        }
    }

    /// Register the calling thread as an actor. Every thread that sleeps on
    /// or blocks through this clock must hold a guard for its lifetime.
    pub fn register_actor(&self) -> ActorGuard {
        match self {
            Clock::Virtual(v) => ActorGuard {
                clock: self.clone(),
                id: v.register(),
            },
            Clock::Real(_) => ActorGuard {
                clock: self.clone(),
                id: NO_ACTOR,
            },
        }
    }

    pub fn sleep_us(&self, actor: &ActorGuard, us: u64) {
        let target = self.now_us().saturating_add(us);
        self.sleep_until(actor, target);
    }

    pub fn sleep_until(&self, actor: &ActorGuard, target: u64) {
        match self {
            Clock::Virtual(v) => v.sleep_until(actor.id, target),
            Clock::Real(r) => {
                let now = r.now_us();
                if target > now {
                    std::thread::sleep(Duration::from_micros(target - now));
                }
            }
        }
    }

    /// Virtual mode: wait until all other actors are parked (no time motion).
    /// Real mode: no-op.
    pub fn quiesce(&self, actor: &ActorGuard) {
        if let Clock::Virtual(v) = self {
            v.quiesce(actor.id)
        }
    }

    /// Create a clock-aware channel. Single consumer; senders are cloneable.
    pub fn channel<T: Send>(&self) -> (PipeSender<T>, PipeReceiver<T>) {
        match self {
            Clock::Virtual(v) => {
                let chan = Arc::new(VChan {
                    st: Mutex::new(VChanState {
                        q: VecDeque::new(),
                        blocked: None,
                        blocked_kind: BlockKind::Plain,
                        senders: 1,
                        receiver_gone: false,
                    }),
                    cv: Arc::new(Condvar::new()),
                    clock: Arc::clone(v),
                });
                (
                    PipeSender::Virtual(Arc::clone(&chan)),
                    PipeReceiver::Virtual(chan),
                )
            }
            Clock::Real(_) => {
                let (tx, rx) = mpsc::channel();
                (PipeSender::Real(tx), PipeReceiver::Real(rx))
            }
        }
    }
}

/// Actor registration for one thread; deregisters on drop.
pub struct ActorGuard {
    clock: Clock,
    id: ActorId,
}

impl ActorGuard {
    pub fn id(&self) -> ActorId {
        self.id
    }
}

impl Drop for ActorGuard {
    fn drop(&mut self) {
        if let Clock::Virtual(v) = &self.clock {
            v.deregister(self.id);
        }
    }
}

// ---------------------------------------------------------------------------
// Cancellation
// ---------------------------------------------------------------------------

/// Shared cancel token for one tool worker. `cancel` wakes the worker out of
/// a sleep in either clock mode.
pub struct CancelSignal {
    flag: AtomicBool,
    bound: Mutex<Option<(Clock, ActorId)>>,
    real_cv: Condvar,
}

impl CancelSignal {
    pub fn new() -> Arc<CancelSignal> {
        Arc::new(CancelSignal {
            flag: AtomicBool::new(false),
            bound: Mutex::new(None),
            real_cv: Condvar::new(),
        })
    }

    /// Worker side: associate the signal with the worker's actor.
    pub fn bind(&self, clock: &Clock, actor: &ActorGuard) {
        *self.bound.lock().unwrap() = Some((clock.clone(), actor.id));
    }

    pub fn cancel(&self) {
        self.flag.store(true, Ordering::SeqCst);
        let bound = self.bound.lock().unwrap();
        if let Some((Clock::Virtual(v), id)) = bound.as_ref() {
            v.interrupt(*id);
        }
        self.real_cv.notify_all();
    }

    pub fn is_canceled(&self) -> bool {
        self.flag.load(Ordering::SeqCst)
    }

    /// Sleep that returns early when canceled.
    pub fn sleep_us(&self, clock: &Clock, actor: &ActorGuard, us: u64) -> SleepOutcome {
        match clock {
            Clock::Virtual(v) => {
                let target = v.now_us().saturating_add(us);
                v.sleep_until_cancellable(actor.id, target, &self.flag)
            }
            Clock::Real(r) => {
                let deadline = r.now_us().saturating_add(us);
                let mut guard = self.bound.lock().unwrap();
                loop {
                    if self.flag.load(Ordering::SeqCst) {
                        return SleepOutcome::Interrupted;
                    }
                    let now = r.now_us();
                    if now >= deadline {
                        return SleepOutcome::Completed;
                    }
                    let wait = Duration::from_micros(deadline - now);
                    let (g, _) = self.real_cv.wait_timeout(guard, wait).unwrap();
                    guard = g;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Clock-aware channels
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq)]
enum BlockKind {
    Plain,
    Deadline,
}

struct VChanState<T> {
    q: VecDeque<T>,
    blocked: Option<ActorId>,
    blocked_kind: BlockKind,
    senders: usize,
    receiver_gone: bool,
}

struct VChan<T> {
    st: Mutex<VChanState<T>>,
    cv: Arc<Condvar>,
    clock: Arc<VirtualClock>,
}

impl<T> VChan<T> {
    /// Hand the queued message's receiver its runnable credit. Called with
    /// the channel lock held; takes the clock lock nested inside it (the one
    /// permitted lock order).
    fn credit_receiver(&self, st: &mut VChanState<T>) {
        if let Some(actor) = st.blocked.take() {
            let mut inner = self.clock.inner.lock().unwrap();
            let had_entry = {
                let before = inner.sleepers.len();
                inner.sleepers.retain(|s| s.actor != actor);
                before != inner.sleepers.len()
            };
            // Deadline sleepers whose entry was already consumed by an
            // advance were credited there; everyone else is credited here.
            if had_entry || st.blocked_kind == BlockKind::Plain {
                inner.active += 1;
            }
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum RecvError {
    Timeout,
    Disconnected,
}

pub enum PipeSender<T> {
    Virtual(Arc<VChan<T>>),
    Real(mpsc::Sender<T>),
}

impl<T: Send> PipeSender<T> {
    /// Enqueue without waiting for the consumer. Returns Err if the receiver
    /// is gone; callers treat that as a benign late delivery.
    pub fn send(&self, msg: T) -> Result<(), T> {
        match self {
            PipeSender::Virtual(chan) => {
                let mut st = chan.st.lock().unwrap();
                if st.receiver_gone {
                    return Err(msg);
                }
                st.q.push_back(msg);
                chan.credit_receiver(&mut st);
                drop(st);
                chan.cv.notify_all();
                Ok(())
            }
            PipeSender::Real(tx) => tx.send(msg).map_err(|e| e.0),
        }
    }
}

impl<T> Clone for PipeSender<T> {
    fn clone(&self) -> Self {
        match self {
            PipeSender::Virtual(chan) => {
                chan.st.lock().unwrap().senders += 1;
                PipeSender::Virtual(Arc::clone(chan))
            }
            PipeSender::Real(tx) => PipeSender::Real(tx.clone()),
        }
    }
}

impl<T> Drop for PipeSender<T> {
    fn drop(&mut self) {
        if let PipeSender::Virtual(chan) = self {
            let mut st = chan.st.lock().unwrap();
            st.senders -= 1;
            if st.senders == 0 {
                // Closing counts as a wake so the receiver can observe it.
                chan.credit_receiver(&mut st);
                drop(st);
                chan.cv.notify_all();
            }
        }
    }
}

pub enum PipeReceiver<T> {
    Virtual(Arc<VChan<T>>),
    Real(mpsc::Receiver<T>),
}

impl<T: Send> PipeReceiver<T> {
    pub fn try_recv(&self) -> Option<T> {
        match self {
            PipeReceiver::Virtual(chan) => chan.st.lock().unwrap().q.pop_front(),
            PipeReceiver::Real(rx) => rx.try_recv().ok(),
        }
    }

    /// Block until a message arrives or every sender is dropped.
    pub fn recv(&self, actor: &ActorGuard) -> Result<T, RecvError> {
        self.recv_inner(actor, None)
    }

    /// Block until a message arrives, the deadline (absolute clock
    /// microseconds) passes, or every sender is dropped.
    pub fn recv_deadline(&self, actor: &ActorGuard, deadline_us: u64) -> Result<T, RecvError> {
        self.recv_inner(actor, Some(deadline_us))
    }

    fn recv_inner(&self, actor: &ActorGuard, deadline: Option<u64>) -> Result<T, RecvError> {
        match self {
            PipeReceiver::Virtual(chan) => {
                let mut st = chan.st.lock().unwrap();
                if let Some(m) = st.q.pop_front() {
                    return Ok(m);
                }
                if st.senders == 0 {
                    return Err(RecvError::Disconnected);
                }
                {
                    let mut inner = chan.clock.inner.lock().unwrap();
                    if let Some(d) = deadline {
                        if inner.now_us >= d {
                            return Err(RecvError::Timeout);
                        }
                        inner.sleepers.push(Sleeper {
                            actor: actor.id,
                            target: d,
                            wake: Some(Arc::clone(&chan.cv)),
                        });
                    }
                    inner.active -= 1;
                    VirtualClock::try_advance(&mut inner, &chan.clock.sleep_cv);
                }
                st.blocked = Some(actor.id);
                st.blocked_kind = if deadline.is_some() {
                    BlockKind::Deadline
                } else {
                    BlockKind::Plain
                };
                loop {
                    if let Some(m) = st.q.pop_front() {
                        // The sender credited us; drop any stale deadline
                        // entry without double-crediting.
                        let mut inner = chan.clock.inner.lock().unwrap();
                        inner.sleepers.retain(|s| s.actor != actor.id);
                        drop(inner);
                        st.blocked = None;
                        return Ok(m);
                    }
                    if st.senders == 0 {
                        let mut inner = chan.clock.inner.lock().unwrap();
                        inner.sleepers.retain(|s| s.actor != actor.id);
                        drop(inner);
                        st.blocked = None;
                        return Err(RecvError::Disconnected);
                    }
                    if let Some(d) = deadline {
                        let inner = chan.clock.inner.lock().unwrap();
                        let expired = inner.now_us >= d
                            && !inner.sleepers.iter().any(|s| s.actor == actor.id);
                        drop(inner);
                        if expired {
                            st.blocked = None;
                            return Err(RecvError::Timeout);
                        }
                    }
                    st = chan.cv.wait(st).unwrap();
                }
            }
            PipeReceiver::Real(rx) => match deadline {
                None => rx.recv().map_err(|_| RecvError::Disconnected),
                Some(d) => {
                    let now = actor.clock.now_us();
                    let dur = Duration::from_micros(d.saturating_sub(now));
                    rx.recv_timeout(dur).map_err(|e| match e {
                        mpsc::RecvTimeoutError::Timeout => RecvError::Timeout,
                        mpsc::RecvTimeoutError::Disconnected => RecvError::Disconnected,
                    })
                }
            },
        }
    }
}

impl<T> Drop for PipeReceiver<T> {
    fn drop(&mut self) {
        if let PipeReceiver::Virtual(chan) = self {
            chan.st.lock().unwrap().receiver_gone = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    #[test]
    fn virtual_sleep_advances_exactly() {
        let clock = Clock::new(ClockMode::Virtual);
        let me = clock.register_actor();
        clock.sleep_us(&me, 5_000);
        assert_eq!(clock.now_us(), 5_000);
        clock.sleep_until(&me, 5_000); // past target: no-op
        assert_eq!(clock.now_us(), 5_000);
    }

    #[test]
    fn two_sleepers_overlap_not_sum() {
        // A sleeps 100, B sleeps 70 concurrently: total elapsed is 100.
        let clock = Clock::new(ClockMode::Virtual);
        let me = clock.register_actor();
        let c2 = clock.clone();
        let h = thread::spawn(move || {
            let g = c2.register_actor();
            c2.sleep_us(&g, 70);
            c2.now_us()
        });
        clock.sleep_us(&me, 100);
        let b_done = h.join().unwrap();
        assert_eq!(b_done, 70);
        assert_eq!(clock.now_us(), 100);
    }

    #[test]
    fn channel_handoff_wakes_blocked_receiver() {
        let clock = Clock::new(ClockMode::Virtual);
        let (tx, rx) = clock.channel::<u64>();
        let c2 = clock.clone();
        let h = thread::spawn(move || {
            let g = c2.register_actor();
            let v = rx.recv(&g).unwrap();
            (v, c2.now_us())
        });
        let me = clock.register_actor();
        clock.sleep_us(&me, 42);
        tx.send(7).unwrap();
        let (v, t) = h.join().unwrap();
        assert_eq!(v, 7);
        assert_eq!(t, 42);
    }

    #[test]
    fn recv_deadline_times_out_at_virtual_deadline() {
        let clock = Clock::new(ClockMode::Virtual);
        let (tx, rx) = clock.channel::<u64>();
        let me = clock.register_actor();
        let err = rx.recv_deadline(&me, 30_000).unwrap_err();
        assert_eq!(err, RecvError::Timeout);
        assert_eq!(clock.now_us(), 30_000);
        drop(tx);
    }

    #[test]
    fn recv_deadline_wakes_on_sleeping_sender() {
        // Worker sleeps 5ms then sends; receiver with 100ms deadline gets
        // the message at exactly 5ms.
        let clock = Clock::new(ClockMode::Virtual);
        let (tx, rx) = clock.channel::<&'static str>();
        let c2 = clock.clone();
        let h = thread::spawn(move || {
            let g = c2.register_actor();
            c2.sleep_us(&g, 5_000);
            tx.send("done").unwrap();
        });
        let me = clock.register_actor();
        let m = rx.recv_deadline(&me, 100_000).unwrap();
        assert_eq!(m, "done");
        assert_eq!(clock.now_us(), 5_000);
        h.join().unwrap();
    }

    #[test]
    fn quiesce_lets_worker_zero_time_reaction_land() {
        let clock = Clock::new(ClockMode::Virtual);
        let (tx, rx) = clock.channel::<u32>();
        let (back_tx, back_rx) = clock.channel::<u32>();
        let c2 = clock.clone();
        let h = thread::spawn(move || {
            let g = c2.register_actor();
            while let Ok(v) = rx.recv(&g) {
                back_tx.send(v * 2).unwrap();
            }
        });
        let me = clock.register_actor();
        tx.send(21).unwrap();
        clock.quiesce(&me);
        // Zero time passed, and the reply is already observable.
        assert_eq!(clock.now_us(), 0);
        assert_eq!(back_rx.try_recv(), Some(42));
        drop(tx);
        h.join().unwrap();
    }

    #[test]
    fn cancel_interrupts_virtual_sleep() {
        let clock = Clock::new(ClockMode::Virtual);
        let signal = CancelSignal::new();
        let s2 = Arc::clone(&signal);
        let c2 = clock.clone();
        let h = thread::spawn(move || {
            let g = c2.register_actor();
            s2.bind(&c2, &g);
            s2.sleep_us(&c2, &g, 10_000_000)
        });
        let me = clock.register_actor();
        clock.sleep_us(&me, 1_000);
        signal.cancel();
        assert_eq!(h.join().unwrap(), SleepOutcome::Interrupted);
        assert_eq!(clock.now_us(), 1_000);
    }

    #[test]
    fn cancel_interrupts_real_sleep_quickly() {
        let clock = Clock::new(ClockMode::Real);
        let signal = CancelSignal::new();
        let s2 = Arc::clone(&signal);
        let c2 = clock.clone();
        let h = thread::spawn(move || {
            let g = c2.register_actor();
            s2.sleep_us(&c2, &g, 5_000_000)
        });
        thread::sleep(Duration::from_millis(20));
        let t0 = Instant::now();
        signal.cancel();
        assert_eq!(h.join().unwrap(), SleepOutcome::Interrupted);
        assert!(t0.elapsed() < Duration::from_millis(500));
    }

    #[test]
    fn sender_drop_unblocks_receiver() {
        let clock = Clock::new(ClockMode::Virtual);
        let (tx, rx) = clock.channel::<u8>();
        let c2 = clock.clone();
        let h = thread::spawn(move || {
            let g = c2.register_actor();
            rx.recv(&g)
        });
        thread::sleep(Duration::from_millis(10));
        drop(tx);
        assert_eq!(h.join().unwrap(), Err(RecvError::Disconnected));
    }
}
