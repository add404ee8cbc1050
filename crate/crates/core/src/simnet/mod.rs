//! Deterministic discrete-event simulation.
//!
//! Virtual time is an integer tick (1 µs). Events are processed in
//! `(deliver_at, seq)` order, where `seq` is assigned at scheduling time, so
//! a `(config, seed)` pair fixes every observable output. Message latency is
//! drawn from a seeded [`LatencyModel`] and then pushed back if needed so that
//! each `(src, dst)` channel stays FIFO.
//!
//! [`ExecMode::Sharded`] processes all events that share a tick on worker
//! threads, one worker per destination, and then schedules their output in
//! the same order the reference loop would have. Both modes must agree bit
//! for bit.

pub mod protocol;
pub mod scenario;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{NodeId, Tick};

pub use protocol::{run_scenario, Actor, Msg, SimulationResult};
pub use scenario::{Behavior, LatencyConfig, NodeClass, NodeConfig, Role, ScenarioConfig};

/// Addressable participants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Node(NodeId),
    Cvrm,
    Oracle,
    Chain,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Node(n) => write!(f, "{n}"),
            Endpoint::Cvrm => f.write_str("cvrm"),
            Endpoint::Oracle => f.write_str("oracle"),
            Endpoint::Chain => f.write_str("chain"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("no events left at tick {at} and the stop condition is unmet: {detail}")]
    Deadlock { at: Tick, detail: String },
    #[error("unknown endpoint {0}")]
    UnknownNode(Endpoint),
    #[error("tick limit {0} reached")]
    TickLimit(Tick),
    #[error("invariant `{name}` violated at tick {at}; recent events:\n{trace}")]
    InvariantViolated { name: String, at: Tick, trace: String },
}

/// Latency = `base` + uniform draw from `[0, jitter]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base: Tick,
    pub jitter: Tick,
}

impl LatencyModel {
    pub fn constant(base: Tick) -> Self {
        LatencyModel { base, jitter: 0 }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Tick {
        if self.jitter == 0 {
            self.base
        } else {
            self.base + rng.gen_range(0..=self.jitter)
        }
    }
}

/// Short static name for trace output.
pub trait Label {
    fn label(&self) -> &'static str;
}

/// A simulated participant. Handlers see only their own state and the
/// message; everything they want to happen goes through [`Ctx`].
pub trait Process: Send {
    type Msg: Clone + Send + Label;

    fn start(&mut self, _ctx: &mut Ctx<Self::Msg>) {}

    fn handle(&mut self, ctx: &mut Ctx<Self::Msg>, from: Endpoint, msg: Self::Msg);
}

enum Outgoing<M> {
    Send { dst: Endpoint, msg: M },
    Timer { delay: Tick, msg: M },
}

/// Handler context: the clock and an outbox.
pub struct Ctx<M> {
    now: Tick,
    me: Endpoint,
    out: Vec<Outgoing<M>>,
}

impl<M> Ctx<M> {
    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn me(&self) -> Endpoint {
        self.me
    }

    pub fn send(&mut self, dst: Endpoint, msg: M) {
        self.out.push(Outgoing::Send { dst, msg });
    }

    /// Delivers `msg` back to this process after exactly `delay` ticks.
    pub fn timer(&mut self, delay: Tick, msg: M) {
        self.out.push(Outgoing::Timer { delay, msg });
    }
}

impl<M: Clone> Ctx<M> {
    pub fn broadcast<'a>(&mut self, dsts: impl IntoIterator<Item = &'a Endpoint>, msg: M) {
        for d in dsts {
            self.send(*d, msg.clone());
        }
    }
}

struct Envelope<M> {
    src: Endpoint,
    dst: Endpoint,
    msg: M,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecMode {
    Reference,
    Sharded { workers: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub events: u64,
    pub final_tick: Tick,
    /// True when the run ended because the queue drained.
    pub quiescent: bool,
}

type Predicate<P> = Box<dyn Fn(&BTreeMap<Endpoint, P>) -> bool + Send + Sync>;

const TRACE_DEPTH: usize = 24;

pub struct Simulation<P: Process> {
    procs: BTreeMap<Endpoint, P>,
    queue: BTreeMap<(Tick, u64), Envelope<P::Msg>>,
    fifo: BTreeMap<(Endpoint, Endpoint), Tick>,
    latency: LatencyModel,
    rng: ChaCha8Rng,
    now: Tick,
    seq: u64,
    events: u64,
    started: bool,
    mode: ExecMode,
    pool: Option<rayon::ThreadPool>,
    invariants: Vec<(String, Predicate<P>)>,
    recent: VecDeque<String>,
}

/// Events for one destination within a tick, tagged with their queue order.
type Shard<P> = (Endpoint, P, Vec<(u64, Envelope<<P as Process>::Msg>)>);
type Emitted<M> = (u64, Endpoint, Vec<Outgoing<M>>);

impl<P: Process> Simulation<P> {
    pub fn new(latency: LatencyModel, seed: u64) -> Self {
        Simulation {
            procs: BTreeMap::new(),
            queue: BTreeMap::new(),
            fifo: BTreeMap::new(),
            latency,
            rng: ChaCha8Rng::seed_from_u64(seed),
            now: 0,
            seq: 0,
            events: 0,
            started: false,
            mode: ExecMode::Reference,
            pool: None,
            invariants: Vec::new(),
            recent: VecDeque::new(),
        }
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self.pool = match mode {
            ExecMode::Sharded { workers } if workers > 1 => {
                Some(rayon::ThreadPoolBuilder::new().num_threads(workers).build().expect("thread pool"))
            }
            _ => None,
        };
        self
    }

    pub fn add(&mut self, at: Endpoint, process: P) {
        self.procs.insert(at, process);
    }

    pub fn remove(&mut self, at: Endpoint) -> Option<P> {
        self.procs.remove(&at)
    }

    pub fn processes(&self) -> &BTreeMap<Endpoint, P> {
        &self.procs
    }

    pub fn into_processes(self) -> BTreeMap<Endpoint, P> {
        self.procs
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn events_processed(&self) -> u64 {
        self.events
    }

    /// Registers a global predicate checked after every event (after every
    /// same-tick batch in sharded mode). The first violation aborts the run.
    pub fn add_invariant(
        &mut self,
        name: impl Into<String>,
        check: impl Fn(&BTreeMap<Endpoint, P>) -> bool + Send + Sync + 'static,
    ) {
        self.invariants.push((name.into(), Box::new(check)));
    }

    /// Injects a message as if `src` had sent it now.
    pub fn send(&mut self, src: Endpoint, dst: Endpoint, msg: P::Msg) -> Result<(), SimError> {
        if !self.procs.contains_key(&dst) {
            return Err(SimError::UnknownNode(dst));
        }
        let lat = self.latency.sample(&mut self.rng);
        self.enqueue_message(src, dst, msg, lat);
        Ok(())
    }

    fn enqueue_message(&mut self, src: Endpoint, dst: Endpoint, msg: P::Msg, latency: Tick) {
        let floor = self.fifo.get(&(src, dst)).copied().unwrap_or(0);
        let at = (self.now + latency).max(floor);
        self.fifo.insert((src, dst), at);
        self.push(at, Envelope { src, dst, msg });
    }

    fn push(&mut self, at: Tick, env: Envelope<P::Msg>) {
        self.queue.insert((at, self.seq), env);
        self.seq += 1;
    }

    fn schedule(&mut self, me: Endpoint, out: Vec<Outgoing<P::Msg>>) -> Result<(), SimError> {
        for o in out {
            match o {
                Outgoing::Send { dst, msg } => {
                    if !self.procs.contains_key(&dst) {
                        return Err(SimError::UnknownNode(dst));
                    }
                    let lat = self.latency.sample(&mut self.rng);
                    self.enqueue_message(me, dst, msg, lat);
                }
                Outgoing::Timer { delay, msg } => {
                    let at = self.now + delay;
                    self.push(at, Envelope { src: me, dst: me, msg });
                }
            }
        }
        Ok(())
    }

    fn start_all(&mut self) -> Result<(), SimError> {
        self.started = true;
        let ids: Vec<Endpoint> = self.procs.keys().copied().collect();
        for id in ids {
            let mut ctx = Ctx { now: self.now, me: id, out: Vec::new() };
            self.procs.get_mut(&id).expect("listed").start(&mut ctx);
            self.schedule(id, ctx.out)?;
        }
        Ok(())
    }

    fn note(&mut self, at: Tick, env: &Envelope<P::Msg>) {
        if self.recent.len() == TRACE_DEPTH {
            self.recent.pop_front();
        }
        self.recent.push_back(format!("  t={at} {} -> {} {}", env.src, env.dst, env.msg.label()));
    }

    fn check_invariants(&self) -> Result<(), SimError> {
        for (name, check) in &self.invariants {
            if !check(&self.procs) {
                let trace = self.recent.iter().cloned().collect::<Vec<_>>().join("\n");
                return Err(SimError::InvariantViolated { name: name.clone(), at: self.now, trace });
            }
        }
        Ok(())
    }

    fn step_reference(&mut self) -> Result<(), SimError> {
        let ((at, _), env) = self.queue.pop_first().expect("caller checked");
        self.now = at;
        self.note(at, &env);
        let Some(p) = self.procs.get_mut(&env.dst) else {
            return Err(SimError::UnknownNode(env.dst));
        };
        let mut ctx = Ctx { now: at, me: env.dst, out: Vec::new() };
        p.handle(&mut ctx, env.src, env.msg);
        self.events += 1;
        self.schedule(env.dst, ctx.out)?;
        self.check_invariants()
    }

    fn step_sharded(&mut self) -> Result<(), SimError> {
        let at = self.queue.first_key_value().expect("caller checked").0 .0;
        self.now = at;
        let mut batch = Vec::new();
        while let Some(e) = self.queue.first_entry() {
            if e.key().0 != at {
                break;
            }
            let ((_, seq), env) = e.remove_entry();
            batch.push((seq, env));
        }
        for (_, env) in &batch {
            self.note(at, env);
        }
        let mut by_dst: BTreeMap<Endpoint, Vec<_>> = BTreeMap::new();
        for (seq, env) in batch {
            by_dst.entry(env.dst).or_default().push((seq, env));
        }
        let mut shards = Vec::with_capacity(by_dst.len());
        for (dst, evs) in by_dst {
            let p = self.procs.remove(&dst).ok_or(SimError::UnknownNode(dst))?;
            shards.push((dst, p, evs));
        }
        let run = |shards: &mut Vec<Shard<P>>| {
            shards
                .par_iter_mut()
                .map(|(dst, p, evs)| {
                    let mut outs = Vec::with_capacity(evs.len());
                    for (seq, env) in evs.drain(..) {
                        let mut ctx = Ctx { now: at, me: *dst, out: Vec::new() };
                        p.handle(&mut ctx, env.src, env.msg);
                        outs.push((seq, *dst, ctx.out));
                    }
                    outs
                })
                .collect::<Vec<_>>()
        };
        let results = match &self.pool {
            Some(pool) => pool.install(|| run(&mut shards)),
            None => run(&mut shards),
        };
        for (dst, p, _) in shards {
            self.procs.insert(dst, p);
        }
        let mut outs: Vec<Emitted<P::Msg>> = results.into_iter().flatten().collect();
        outs.sort_by_key(|(seq, _, _)| *seq);
        for (_, me, out) in outs {
            self.events += 1;
            self.schedule(me, out)?;
        }
        self.check_invariants()
    }

    fn step(&mut self) -> Result<(), SimError> {
        match self.mode {
            ExecMode::Reference => self.step_reference(),
            ExecMode::Sharded { .. } => self.step_sharded(),
        }
    }

    fn ensure_started(&mut self) -> Result<(), SimError> {
        if !self.started {
            self.start_all()?;
            self.check_invariants()?;
        }
        Ok(())
    }

    fn next_tick(&self, tick_limit: Tick) -> Result<Option<Tick>, SimError> {
        match self.queue.first_key_value() {
            None => Ok(None),
            Some((&(at, _), _)) if at > tick_limit => Err(SimError::TickLimit(tick_limit)),
            Some((&(at, _), _)) => Ok(Some(at)),
        }
    }

    /// Runs until the queue drains. Events beyond `tick_limit` are an error.
    pub fn run(&mut self, tick_limit: Tick) -> Result<RunSummary, SimError> {
        self.ensure_started()?;
        while self.next_tick(tick_limit)?.is_some() {
            self.step()?;
        }
        Ok(RunSummary { events: self.events, final_tick: self.now, quiescent: true })
    }

    /// Processes every event due at or before `tick`, then parks the clock
    /// there.
    pub fn run_to(&mut self, tick: Tick) -> Result<RunSummary, SimError> {
        self.ensure_started()?;
        while self.queue.first_key_value().is_some_and(|((at, _), _)| *at <= tick) {
            self.step()?;
        }
        self.now = self.now.max(tick);
        Ok(RunSummary { events: self.events, final_tick: self.now, quiescent: self.queue.is_empty() })
    }

    /// Runs until `stop` holds (checked after every step). Draining the
    /// queue first is a [`SimError::Deadlock`].
    pub fn run_until(
        &mut self,
        tick_limit: Tick,
        stop: impl Fn(&BTreeMap<Endpoint, P>) -> bool,
    ) -> Result<RunSummary, SimError> {
        self.ensure_started()?;
        loop {
            if stop(&self.procs) {
                return Ok(RunSummary { events: self.events, final_tick: self.now, quiescent: self.queue.is_empty() });
            }
            if self.next_tick(tick_limit)?.is_none() {
                return Err(SimError::Deadlock { at: self.now, detail: "event queue drained".into() });
            }
            self.step()?;
        }
    }
}
