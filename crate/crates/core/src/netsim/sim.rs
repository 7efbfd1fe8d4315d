//! Discrete-event simulator with a virtual microsecond clock.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::matrix::LatencyMatrix;
use crate::message::MsgClass;

/// Index of a simulated process (node or requester).
pub type Endpoint = usize;

/// What the simulator needs to know about a message.
pub trait Wire {
    fn wire_len(&self) -> usize;
    fn class(&self) -> MsgClass;
    fn instance(&self) -> Option<u64>;
}

impl Wire for crate::message::Message {
    fn wire_len(&self) -> usize {
        crate::codec::Encode::encoded_len(self)
    }

    fn class(&self) -> MsgClass {
        crate::message::Message::class(self)
    }

    fn instance(&self) -> Option<u64> {
        crate::message::Message::instance(self)
    }
}

/// Side effects a process requests while handling one event.
pub struct Context<M, T> {
    now: u64,
    me: Endpoint,
    sends: Vec<(Endpoint, M, u32)>,
    timers: Vec<(u64, T)>,
    milestone: Option<u64>,
}

impl<M, T> Context<M, T> {
    fn new(now: u64, me: Endpoint) -> Self {
        Context { now, me, sends: Vec::new(), timers: Vec::new(), milestone: None }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn me(&self) -> Endpoint {
        self.me
    }

    /// Sends `msg` tagged with critical-path depth `hop`.
    pub fn send(&mut self, dst: Endpoint, msg: M, hop: u32) {
        self.sends.push((dst, msg, hop));
    }

    pub fn timer(&mut self, after_us: u64, timer: T) {
        self.timers.push((after_us, timer));
    }

    /// Reports progress; the run stops once every watched endpoint reports
    /// at least the target.
    pub fn milestone(&mut self, value: u64) {
        self.milestone = Some(value);
    }
}

/// The effect surface protocol state machines are written against.
pub trait Effects<M, T> {
    fn now(&self) -> u64;
    fn send(&mut self, dst: Endpoint, msg: M, hop: u32);
    fn timer(&mut self, after_us: u64, timer: T);
    fn milestone(&mut self, value: u64);
}

impl<M, T> Effects<M, T> for Context<M, T> {
    fn now(&self) -> u64 {
        self.now
    }

    fn send(&mut self, dst: Endpoint, msg: M, hop: u32) {
        Context::send(self, dst, msg, hop)
    }

    fn timer(&mut self, after_us: u64, timer: T) {
        Context::timer(self, after_us, timer)
    }

    fn milestone(&mut self, value: u64) {
        Context::milestone(self, value)
    }
}

/// Adapts a context whose timer type wraps `U`.
pub struct Mapped<'a, M, T, U> {
    ctx: &'a mut Context<M, T>,
    wrap: fn(U) -> T,
}

impl<'a, M, T, U> Mapped<'a, M, T, U> {
    pub fn new(ctx: &'a mut Context<M, T>, wrap: fn(U) -> T) -> Self {
        Mapped { ctx, wrap }
    }
}

impl<M, T, U> Effects<M, U> for Mapped<'_, M, T, U> {
    fn now(&self) -> u64 {
        self.ctx.now
    }

    fn send(&mut self, dst: Endpoint, msg: M, hop: u32) {
        self.ctx.send(dst, msg, hop)
    }

    fn timer(&mut self, after_us: u64, timer: U) {
        self.ctx.timer(after_us, (self.wrap)(timer))
    }

    fn milestone(&mut self, value: u64) {
        self.ctx.milestone(value)
    }
}

pub trait Process {
    type Msg: Wire + Clone;
    type Timer;

    fn on_start(&mut self, ctx: &mut Context<Self::Msg, Self::Timer>);
    fn on_message(&mut self, ctx: &mut Context<Self::Msg, Self::Timer>, from: Endpoint, msg: Self::Msg, hop: u32);
    fn on_timer(&mut self, ctx: &mut Context<Self::Msg, Self::Timer>, timer: Self::Timer);
}

/// Send-time hook for adversarial behavior. Only called for `src != dst`;
/// returning `None` drops the message.
pub trait Interceptor<M> {
    fn on_send(&mut self, src: Endpoint, dst: Endpoint, msg: M) -> Option<M>;
}

pub struct PassThrough;

impl<M> Interceptor<M> for PassThrough {
    fn on_send(&mut self, _src: Endpoint, _dst: Endpoint, msg: M) -> Option<M> {
        Some(msg)
    }
}

/// Delay model for every endpoint pair.
#[derive(Debug, Clone)]
pub struct Network {
    pub matrix: Arc<LatencyMatrix>,
    /// Region of each endpoint.
    pub placement: Vec<usize>,
    pub intra_region_us: u64,
    /// Upper bound of the uniform per-message jitter.
    pub jitter_us: u64,
    /// Before this time each message may take an extra delay of up to
    /// `gst_delay_factor` times its link latency.
    pub gst_us: u64,
    pub gst_delay_factor: f64,
}

impl Network {
    pub fn latency_us(&self, a: Endpoint, b: Endpoint) -> u64 {
        if a == b {
            return 0;
        }
        let (ra, rb) = (self.placement[a], self.placement[b]);
        if ra == rb {
            self.intra_region_us
        } else {
            (self.matrix.latency_ms(ra, rb) * 1000.0).round() as u64
        }
    }

    /// Serialization delay of `bytes` on the link, in µs.
    pub fn transfer_us(&self, a: Endpoint, b: Endpoint, bytes: usize) -> u64 {
        let (ra, rb) = (self.placement[a], self.placement[b]);
        let bw = self.matrix.bandwidth_mbps(ra, rb);
        if a == b || !bw.is_finite() {
            return 0;
        }
        (bytes as f64 * 8.0 / bw).ceil() as u64
    }

    /// Largest one-way latency between any two of `endpoints`.
    pub fn max_latency_us(&self, endpoints: impl IntoIterator<Item = Endpoint> + Clone) -> u64 {
        let mut max = 0;
        for a in endpoints.clone() {
            for b in endpoints.clone() {
                max = max.max(self.latency_us(a, b));
            }
        }
        max
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStat {
    pub count: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NetStats {
    /// Sent traffic per class and instance, after interception.
    pub by_class: BTreeMap<(MsgClass, Option<u64>), ClassStat>,
    pub egress: Vec<u64>,
    pub ingress: Vec<u64>,
    pub in_flight: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("event queue empty at {now_us} µs before the stop condition (milestones {milestones:?})")]
    Deadlock { now_us: u64, milestones: Vec<u64> },
    #[error("time limit reached at {now_us} µs (milestones {milestones:?}, {pending} events pending: {pending_by_class})")]
    TimeLimit { now_us: u64, milestones: Vec<u64>, pending: usize, pending_by_class: String },
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub network: Network,
    pub seed: u64,
    pub time_limit_us: u64,
    /// Endpoints whose milestones decide when to stop.
    pub watch: Vec<Endpoint>,
    pub target: u64,
}

enum Event<M, T> {
    Deliver { src: Endpoint, msg: M, hop: u32, bytes: u64 },
    Timer(T),
}

/// Ordering key: time, then destination, source, insertion sequence.
type Key = (u64, Endpoint, Endpoint, u64);

pub struct Simulator<P: Process> {
    procs: Vec<P>,
    cfg: SimConfig,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Key>>,
    events: HashMap<u64, Event<P::Msg, P::Timer>>,
    now: u64,
    seq: u64,
    stats: NetStats,
    milestones: Vec<u64>,
    interceptor: Box<dyn Interceptor<P::Msg>>,
    processed: u64,
}

impl<P: Process> Simulator<P> {
    pub fn new(procs: Vec<P>, cfg: SimConfig) -> Self {
        Self::with_interceptor(procs, cfg, Box::new(PassThrough))
    }

    pub fn with_interceptor(procs: Vec<P>, cfg: SimConfig, interceptor: Box<dyn Interceptor<P::Msg>>) -> Self {
        let n = procs.len();
        assert_eq!(cfg.network.placement.len(), n, "placement must cover every endpoint");
        Simulator {
            procs,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            queue: BinaryHeap::new(),
            events: HashMap::new(),
            now: 0,
            seq: 0,
            stats: NetStats { egress: vec![0; n], ingress: vec![0; n], ..Default::default() },
            milestones: vec![0; n],
            interceptor,
            processed: 0,
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn procs(&self) -> &[P] {
        &self.procs
    }

    pub fn into_procs(self) -> Vec<P> {
        self.procs
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    pub fn events_processed(&self) -> u64 {
        self.processed
    }

    fn push(&mut self, at: u64, dst: Endpoint, src: Endpoint, ev: Event<P::Msg, P::Timer>) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse((at, dst, src, seq)));
        self.events.insert(seq, ev);
    }

    fn delay_us(&mut self, src: Endpoint, dst: Endpoint, bytes: usize) -> u64 {
        if src == dst {
            return 0;
        }
        let net = &self.cfg.network;
        let base = net.latency_us(src, dst);
        let mut d = base + net.transfer_us(src, dst, bytes);
        if net.jitter_us > 0 {
            d += self.rng.gen_range(0..=net.jitter_us);
        }
        if self.now < net.gst_us && net.gst_delay_factor > 0.0 {
            let cap = (base as f64 * net.gst_delay_factor) as u64;
            if cap > 0 {
                d += self.rng.gen_range(0..=cap);
            }
        }
        d
    }

    fn apply(&mut self, me: Endpoint, ctx: Context<P::Msg, P::Timer>) {
        for (dst, msg, hop) in ctx.sends {
            let msg = if dst == me {
                Some(msg)
            } else {
                self.interceptor.on_send(me, dst, msg)
            };
            let Some(msg) = msg else {
                self.stats.dropped += 1;
                continue;
            };
            let bytes = msg.wire_len();
            let stat = self.stats.by_class.entry((msg.class(), msg.instance())).or_default();
            stat.count += 1;
            stat.bytes += bytes as u64;
            self.stats.egress[me] += bytes as u64;
            self.stats.in_flight += bytes as u64;
            let at = self.now + self.delay_us(me, dst, bytes);
            // A node's message to itself adds no network hop.
            let hop = if dst == me { hop.saturating_sub(1) } else { hop };
            self.push(at, dst, me, Event::Deliver { src: me, msg, hop, bytes: bytes as u64 });
        }
        for (after, t) in ctx.timers {
            self.push(self.now + after, me, me, Event::Timer(t));
        }
        if let Some(m) = ctx.milestone {
            self.milestones[me] = self.milestones[me].max(m);
        }
    }

    fn done(&self) -> bool {
        self.cfg.watch.iter().all(|&e| self.milestones[e] >= self.cfg.target)
    }

    /// Runs until every watched endpoint reaches the target milestone.
    pub fn run(&mut self) -> Result<u64, SimError> {
        if self.processed == 0 && self.now == 0 {
            for i in 0..self.procs.len() {
                let mut ctx = Context::new(0, i);
                self.procs[i].on_start(&mut ctx);
                self.apply(i, ctx);
            }
        }
        while !self.done() {
            let Some(Reverse((at, dst, _src, seq))) = self.queue.pop() else {
                return Err(SimError::Deadlock { now_us: self.now, milestones: self.milestones.clone() });
            };
            if at > self.cfg.time_limit_us {
                self.queue.push(Reverse((at, dst, _src, seq)));
                return Err(self.time_limit());
            }
            self.now = at;
            self.processed += 1;
            let ev = self.events.remove(&seq).expect("event for key");
            let mut ctx = Context::new(at, dst);
            match ev {
                Event::Deliver { src, msg, hop, bytes } => {
                    self.stats.ingress[dst] += bytes;
                    self.stats.in_flight -= bytes;
                    self.procs[dst].on_message(&mut ctx, src, msg, hop);
                }
                Event::Timer(t) => self.procs[dst].on_timer(&mut ctx, t),
            }
            self.apply(dst, ctx);
        }
        Ok(self.now)
    }

    fn time_limit(&self) -> SimError {
        let mut by_class: BTreeMap<String, usize> = BTreeMap::new();
        for ev in self.events.values() {
            let k = match ev {
                Event::Deliver { msg, .. } => format!("{:?}", msg.class()),
                Event::Timer(_) => "timer".to_string(),
            };
            *by_class.entry(k).or_default() += 1;
        }
        SimError::TimeLimit {
            now_us: self.now,
            milestones: self.milestones.clone(),
            pending: self.events.len(),
            pending_by_class: format!("{by_class:?}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug)]
    struct Ping(usize);

    impl Wire for Ping {
        fn wire_len(&self) -> usize {
            self.0
        }
        fn class(&self) -> MsgClass {
            MsgClass::Submit
        }
        fn instance(&self) -> Option<u64> {
            None
        }
    }

    /// Node 0 sends to 1, which forwards to 2; each logs arrival time and hop.
    struct Relay {
        id: usize,
        size: usize,
        log: Vec<(u64, u32)>,
    }

    impl Process for Relay {
        type Msg = Ping;
        type Timer = ();

        fn on_start(&mut self, ctx: &mut Context<Ping, ()>) {
            if self.id == 0 {
                ctx.send(1, Ping(self.size), 1);
                ctx.milestone(1);
            }
        }

        fn on_message(&mut self, ctx: &mut Context<Ping, ()>, _from: Endpoint, msg: Ping, hop: u32) {
            self.log.push((ctx.now(), hop));
            if self.id == 1 {
                ctx.send(2, msg, hop + 1);
            }
            ctx.milestone(1);
        }

        fn on_timer(&mut self, _ctx: &mut Context<Ping, ()>, _t: ()) {}
    }

    fn network(matrix: LatencyMatrix, placement: Vec<usize>) -> Network {
        Network {
            matrix: Arc::new(matrix),
            placement,
            intra_region_us: 500,
            jitter_us: 0,
            gst_us: 0,
            gst_delay_factor: 0.0,
        }
    }

    fn relay_run(net: Network, size: usize, seed: u64) -> (Vec<Vec<(u64, u32)>>, NetStats) {
        let procs = (0..3).map(|id| Relay { id, size, log: vec![] }).collect();
        let cfg = SimConfig { network: net, seed, time_limit_us: u64::MAX, watch: vec![0, 1, 2], target: 1 };
        let mut sim = Simulator::new(procs, cfg);
        sim.run().unwrap();
        let stats = sim.stats().clone();
        (sim.into_procs().into_iter().map(|p| p.log).collect(), stats)
    }

    #[test]
    fn two_hop_chain_times_and_hops() {
        let (logs, stats) = relay_run(network(LatencyMatrix::uniform(3, 1.0), vec![0, 1, 2]), 0, 1);
        assert_eq!(logs[1], vec![(1000, 1)]);
        assert_eq!(logs[2], vec![(2000, 2)]);
        assert_eq!(stats.egress.iter().sum::<u64>(), stats.ingress.iter().sum::<u64>());
    }

    #[test]
    fn same_region_zero_size_takes_intra_latency() {
        let (logs, _) = relay_run(network(LatencyMatrix::uniform(1, 1.0), vec![0, 0, 0]), 0, 1);
        assert_eq!(logs[1], vec![(500, 1)]);
    }

    #[test]
    fn bandwidth_adds_serialization_delay() {
        let m = LatencyMatrix::parse_csv("region,a,b\na,0/1,10/8\nb,10/8,0/1\n").unwrap();
        // 1000 bytes at 8 Mbps is 1000 µs.
        let (logs, _) = relay_run(network(m, vec![0, 1, 0]), 1000, 1);
        assert_eq!(logs[1], vec![(11_000, 1)]);
        assert_eq!(logs[2], vec![(22_000, 2)]);
    }

    #[test]
    fn jitter_and_gst_are_seeded() {
        let mut net = network(LatencyMatrix::uniform(3, 1.0), vec![0, 1, 2]);
        net.jitter_us = 300;
        net.gst_us = 10_000_000;
        net.gst_delay_factor = 50.0;
        let a = relay_run(net.clone(), 0, 7).0;
        let b = relay_run(net.clone(), 0, 7).0;
        assert_eq!(a, b);
        let t = a[1][0].0;
        assert!((1000..=1000 + 300 + 50_000).contains(&t));
    }

    struct Idle;

    impl Process for Idle {
        type Msg = Ping;
        type Timer = ();
        fn on_start(&mut self, _ctx: &mut Context<Ping, ()>) {}
        fn on_message(&mut self, _: &mut Context<Ping, ()>, _: Endpoint, _: Ping, _: u32) {}
        fn on_timer(&mut self, _: &mut Context<Ping, ()>, _: ()) {}
    }

    #[test]
    fn empty_queue_before_target_is_a_deadlock() {
        let cfg = SimConfig {
            network: network(LatencyMatrix::uniform(1, 1.0), vec![0]),
            seed: 0,
            time_limit_us: 1000,
            watch: vec![0],
            target: 1,
        };
        let mut sim = Simulator::new(vec![Idle], cfg);
        assert!(matches!(sim.run(), Err(SimError::Deadlock { .. })));
    }

    #[test]
    fn interceptor_can_drop() {
        struct DropAll;
        impl Interceptor<Ping> for DropAll {
            fn on_send(&mut self, _: Endpoint, _: Endpoint, _: Ping) -> Option<Ping> {
                None
            }
        }
        let procs = (0..3).map(|id| Relay { id, size: 0, log: vec![] }).collect();
        let cfg = SimConfig {
            network: network(LatencyMatrix::uniform(3, 1.0), vec![0, 1, 2]),
            seed: 0,
            time_limit_us: 1000,
            watch: vec![1],
            target: 1,
        };
        let mut sim = Simulator::with_interceptor(procs, cfg, Box::new(DropAll));
        assert!(matches!(sim.run(), Err(SimError::Deadlock { .. })));
        assert_eq!(sim.stats().dropped, 1);
    }
}
