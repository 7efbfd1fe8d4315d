//! Assembles nodes, requesters, network and adversary into one simulation
//! and collects the resulting logs.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{Adversary, AdversaryError, AdversaryKind, AdversarySpec};
use crate::cons1::{Cons1Config, Cons1Node, Cons1Timer};
use crate::crypto::{derive_keypair, Digest, KeyPair, SigCache};
use crate::message::{Message, MsgClass};
use crate::netsim::{Context, LatencyMatrix, Mapped, Network, Process, SimConfig, SimError, Simulator};
use crate::records::NodeLog;
use crate::superblock::{NodeConfig, RbbcNode, RbbcTimer};
use crate::types::{Amount, Genesis, NodeId, Params};
use crate::workload::{assign_nodes, synthetic, Requester, RequesterConfig, RequesterTimer, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Rbbc,
    Cons1,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Rbbc => "rbbc",
            Protocol::Cons1 => "cons1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Duration {
    Rounds(u64),
    VirtualMs(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequesterSpec {
    pub count: usize,
    /// Regions hosting requester machines, used round-robin per host.
    pub regions: Vec<usize>,
    pub per_host: usize,
    pub genesis_utxos: usize,
    pub genesis_amount: Amount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SyntheticLoad {
    pub bad_sig_every: usize,
    pub conflict_every: usize,
    /// Extra rounds worth of transactions beyond the run length.
    pub slack_rounds: u64,
}

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub protocol: Protocol,
    pub params: Params,
    pub adversary: AdversarySpec,
    pub matrix: Arc<LatencyMatrix>,
    /// Regions used for nodes, assigned round-robin by node id.
    pub node_regions: Vec<usize>,
    pub requesters: Option<RequesterSpec>,
    pub synthetic: SyntheticLoad,
    pub duration: Duration,
    pub seed: u64,
    pub intra_region_us: u64,
    pub jitter_us: u64,
    pub gst_us: u64,
    pub gst_delay_factor: f64,
    pub verify_cost_us: u64,
    /// Defaults derived from the largest node-to-node latency when unset.
    pub bin_base_timeout_us: Option<u64>,
    pub fetch_timeout_us: Option<u64>,
    pub escalation_margin_us: Option<u64>,
    pub r_max: u32,
    pub allow_chained: bool,
    pub backup_rounds: u64,
    pub leader: Option<NodeId>,
    pub time_limit_us: u64,
}

impl WorldConfig {
    /// Fault-free setup on a uniform network.
    pub fn uniform(protocol: Protocol, params: Params, latency_ms: f64, rounds: u64, seed: u64) -> Self {
        WorldConfig {
            protocol,
            params,
            adversary: AdversarySpec::none(),
            matrix: Arc::new(LatencyMatrix::uniform(1, latency_ms)),
            node_regions: vec![0],
            requesters: None,
            synthetic: SyntheticLoad { slack_rounds: 2, ..Default::default() },
            duration: Duration::Rounds(rounds),
            seed,
            intra_region_us: (latency_ms * 1000.0).round() as u64,
            jitter_us: 0,
            gst_us: 0,
            gst_delay_factor: 0.0,
            verify_cost_us: 0,
            bin_base_timeout_us: None,
            fetch_timeout_us: None,
            escalation_margin_us: None,
            r_max: 20,
            allow_chained: true,
            backup_rounds: 1,
            leader: None,
            time_limit_us: 3_600_000_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error("no node regions given")]
    NoRegions,
    #[error("region index {0} outside the latency matrix")]
    BadRegion(usize),
    #[error("leader {0} is not a node")]
    BadLeader(u32),
    #[error("requester spec needs at least one region and per_host > 0")]
    BadRequesters,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActorTimer {
    Rbbc(RbbcTimer),
    Cons1(Cons1Timer),
    Requester(RequesterTimer),
}

pub enum Actor {
    Rbbc(Box<RbbcNode>),
    Cons1(Box<Cons1Node>),
    Requester(Box<Requester>),
}

impl Process for Actor {
    type Msg = Message;
    type Timer = ActorTimer;

    fn on_start(&mut self, ctx: &mut Context<Message, ActorTimer>) {
        match self {
            Actor::Rbbc(a) => a.start(&mut Mapped::new(ctx, ActorTimer::Rbbc)),
            Actor::Cons1(a) => a.start(&mut Mapped::new(ctx, ActorTimer::Cons1)),
            Actor::Requester(a) => a.start(&mut Mapped::new(ctx, ActorTimer::Requester)),
        }
    }

    fn on_message(&mut self, ctx: &mut Context<Message, ActorTimer>, from: usize, msg: Message, hop: u32) {
        let from = NodeId(from as u32);
        match self {
            Actor::Rbbc(a) => a.on_message(&mut Mapped::new(ctx, ActorTimer::Rbbc), from, msg, hop),
            Actor::Cons1(a) => a.on_message(&mut Mapped::new(ctx, ActorTimer::Cons1), from, msg, hop),
            Actor::Requester(a) => a.on_message(&mut Mapped::new(ctx, ActorTimer::Requester), from, msg),
        }
    }

    fn on_timer(&mut self, ctx: &mut Context<Message, ActorTimer>, timer: ActorTimer) {
        match (self, timer) {
            (Actor::Rbbc(a), ActorTimer::Rbbc(t)) => a.on_timer(&mut Mapped::new(ctx, ActorTimer::Rbbc), t),
            (Actor::Cons1(a), ActorTimer::Cons1(t)) => a.on_timer(&mut Mapped::new(ctx, ActorTimer::Cons1), t),
            (Actor::Requester(a), ActorTimer::Requester(t)) => {
                a.on_timer(&mut Mapped::new(ctx, ActorTimer::Requester), t)
            }
            _ => unreachable!("timer routed to the wrong actor"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Deadlock,
    TimeLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRun {
    pub id: NodeId,
    pub region: String,
    pub byzantine: bool,
    pub egress_bytes: u64,
    pub ingress_bytes: u64,
    pub log: NodeLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequesterRun {
    pub index: usize,
    pub reads: u64,
    pub writes: u64,
    pub steps: u64,
    pub polls: Vec<u64>,
    pub submitted: Vec<(Digest, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficRow {
    pub class: MsgClass,
    pub instance: Option<u64>,
    pub count: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SafetyReport {
    /// Heights at which two correct nodes hold different blocks.
    pub forks: Vec<u64>,
    pub conservation_violations: u64,
    pub apply_errors: u64,
    pub broken_links: u64,
    pub min_height: u64,
    pub max_height: u64,
}

impl SafetyReport {
    pub fn is_safe(&self) -> bool {
        self.forks.is_empty() && self.conservation_violations == 0 && self.apply_errors == 0 && self.broken_links == 0
    }
}

/// Everything a run produced; metrics are computed from this alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub protocol: Protocol,
    pub n: usize,
    pub t: usize,
    pub beta: usize,
    pub proposers: usize,
    pub adversary: AdversaryKind,
    pub byzantine: Vec<usize>,
    pub leader: Option<NodeId>,
    pub seed: u64,
    pub duration: Duration,
    pub outcome: Outcome,
    pub diagnostic: Option<String>,
    pub end_us: u64,
    pub events: u64,
    pub genesis_supply: Amount,
    pub nodes: Vec<NodeRun>,
    pub requesters: Vec<RequesterRun>,
    pub traffic: Vec<TrafficRow>,
    pub safety: SafetyReport,
}

impl RunLog {
    pub fn correct_nodes(&self) -> impl Iterator<Item = &NodeRun> {
        self.nodes.iter().filter(|n| !n.byzantine)
    }

    /// The lowest-id correct node.
    pub fn reference(&self) -> &NodeRun {
        self.correct_nodes().next().expect("at least one correct node")
    }
}

/// Node with the smallest mean latency to the other nodes.
pub fn central_node(network: &Network, n: usize) -> NodeId {
    let mut best = (u64::MAX, 0);
    for a in 0..n {
        let total: u64 = (0..n).map(|b| network.latency_us(a, b)).sum();
        if total < best.0 {
            best = (total, a);
        }
    }
    NodeId(best.1 as u32)
}

pub fn check_safety(nodes: &[NodeRun]) -> SafetyReport {
    let correct: Vec<&NodeRun> = nodes.iter().filter(|n| !n.byzantine).collect();
    let mut report = SafetyReport {
        min_height: correct.iter().map(|n| n.log.blocks.len() as u64).min().unwrap_or(0),
        max_height: correct.iter().map(|n| n.log.blocks.len() as u64).max().unwrap_or(0),
        ..Default::default()
    };
    for node in &correct {
        report.conservation_violations += node.log.conservation_violations;
        report.apply_errors += node.log.apply_errors;
        for w in node.log.blocks.windows(2) {
            if w[1].prev != w[0].hash || w[1].index != w[0].index + 1 {
                report.broken_links += 1;
            }
        }
    }
    for h in 0..report.max_height as usize {
        let mut hashes = correct.iter().filter_map(|n| n.log.blocks.get(h)).map(|b| b.hash);
        let first = hashes.next();
        if hashes.any(|x| Some(x) != first) {
            report.forks.push(h as u64 + 1);
        }
    }
    report
}

fn node_keys(n: usize) -> Vec<KeyPair> {
    (0..n as u64).map(|i| derive_keypair(b"rbbc-node", i)).collect()
}

pub fn run(cfg: &WorldConfig) -> Result<RunLog, WorldError> {
    let p = cfg.params;
    let n = p.n;
    cfg.adversary.validate(n, p.t)?;
    if cfg.node_regions.is_empty() {
        return Err(WorldError::NoRegions);
    }
    let regions = cfg.node_regions.iter().chain(cfg.requesters.iter().flat_map(|r| r.regions.iter()));
    if let Some(&r) = regions.clone().find(|&&r| r >= cfg.matrix.len()) {
        return Err(WorldError::BadRegion(r));
    }
    if let Some(r) = &cfg.requesters {
        if r.regions.is_empty() || r.per_host == 0 {
            return Err(WorldError::BadRequesters);
        }
    }

    let mut placement: Vec<usize> = (0..n).map(|i| cfg.node_regions[i % cfg.node_regions.len()]).collect();
    if let Some(r) = &cfg.requesters {
        placement.extend((0..r.count).map(|i| r.regions[(i / r.per_host) % r.regions.len()]));
    }
    let network = Network {
        matrix: cfg.matrix.clone(),
        placement: placement.clone(),
        intra_region_us: cfg.intra_region_us,
        jitter_us: cfg.jitter_us,
        gst_us: cfg.gst_us,
        gst_delay_factor: cfg.gst_delay_factor,
    };
    let leader = match cfg.protocol {
        Protocol::Cons1 => {
            let l = cfg.leader.unwrap_or_else(|| central_node(&network, n));
            if l.index() >= n {
                return Err(WorldError::BadLeader(l.0));
            }
            Some(l)
        }
        Protocol::Rbbc => None,
    };
    let max_lat = network.max_latency_us(0..n).max(1);
    let proposers = p.proposers();
    let rounds_hint = match cfg.duration {
        Duration::Rounds(k) => k,
        Duration::VirtualMs(ms) => (ms * 1000 / (4 * max_lat)).max(1),
    };

    // Genesis and initial mempools.
    let mut preload: Vec<Vec<_>> = vec![Vec::new(); n];
    let mut requester_cfgs = Vec::new();
    let genesis = match &cfg.requesters {
        None => {
            let sources = match leader {
                Some(_) => 1,
                None => proposers.len(),
            };
            let s = synthetic(&SyntheticSpec {
                sources,
                txs_per_source: (rounds_hint + cfg.synthetic.slack_rounds) as usize * p.beta,
                bad_sig_every: cfg.synthetic.bad_sig_every,
                conflict_every: cfg.synthetic.conflict_every,
                seed: cfg.seed,
            });
            for (i, txs) in s.txs.into_iter().enumerate() {
                let owner = leader.unwrap_or(proposers[i]);
                preload[owner.index()] = txs;
            }
            s.genesis
        }
        Some(r) => {
            let accounts: Vec<_> = (0..r.count).map(|i| Requester::key_for(i).account()).collect();
            let mut entries = Vec::with_capacity(r.count * r.genesis_utxos);
            for a in &accounts {
                entries.extend(std::iter::repeat((*a, r.genesis_amount)).take(r.genesis_utxos));
            }
            let population = Arc::new(accounts);
            for (i, acct) in population.iter().enumerate() {
                let (window, connections) = match leader {
                    Some(l) => assign_nodes(acct, &[l], 1, n, 2 * p.t),
                    None => assign_nodes(acct, &proposers, p.t + 1, n, p.t),
                };
                let me = n + i;
                // Round trip to the read quorum's farthest member.
                let mut lat: Vec<u64> = connections.iter().map(|c| network.latency_us(me, c.index())).collect();
                lat.sort_unstable();
                let poll = lat.get(p.t).copied().unwrap_or(max_lat);
                requester_cfgs.push(RequesterConfig {
                    index: i,
                    window,
                    connections,
                    read_quorum: p.t + 1,
                    poll_interval_us: 2 * poll.max(1),
                    population: population.clone(),
                    seed: cfg.seed,
                });
            }
            Genesis { entries }
        }
    };
    let genesis_supply = genesis.total();

    let keys = node_keys(n);
    let public: Arc<Vec<_>> = Arc::new(keys.iter().map(|k| *k.public()).collect());
    let sigs = SigCache::new();
    let reference = (0..n).find(|i| !cfg.adversary.is_byzantine(*i)).unwrap_or(0);
    let mut procs: Vec<Actor> = Vec::with_capacity(placement.len());
    for (i, key) in keys.into_iter().enumerate() {
        let me = NodeId(i as u32);
        let txs = std::mem::take(&mut preload[i]);
        let record_txs = i == reference;
        procs.push(match leader {
            None => Actor::Rbbc(Box::new(RbbcNode::new(
                NodeConfig {
                    params: p,
                    me,
                    node_keys: public.clone(),
                    verify_cost_us: cfg.verify_cost_us,
                    bin_base_timeout_us: cfg.bin_base_timeout_us.unwrap_or(4 * max_lat),
                    fetch_timeout_us: cfg.fetch_timeout_us.unwrap_or(4 * max_lat),
                    escalation_margin_us: cfg.escalation_margin_us.unwrap_or(2 * max_lat),
                    r_max: cfg.r_max,
                    allow_chained: cfg.allow_chained,
                    backup_rounds: cfg.backup_rounds,
                    record_txs,
                },
                key,
                &genesis,
                sigs.clone(),
                txs,
            ))),
            Some(l) => Actor::Cons1(Box::new(Cons1Node::new(
                Cons1Config {
                    params: p,
                    me,
                    leader: l,
                    verify_cost_us: cfg.verify_cost_us,
                    resend_timeout_us: 8 * max_lat + p.beta as u64 * cfg.verify_cost_us,
                    allow_chained: cfg.allow_chained,
                    record_txs,
                },
                &genesis,
                sigs.clone(),
                txs,
            ))),
        });
    }
    procs.extend(requester_cfgs.into_iter().map(|c| Actor::Requester(Box::new(Requester::new(c)))));

    let (target, time_limit) = match cfg.duration {
        Duration::Rounds(k) => (k, cfg.time_limit_us),
        Duration::VirtualMs(ms) => (u64::MAX, ms * 1000),
    };
    let watch: Vec<usize> = (0..n).filter(|i| !cfg.adversary.is_byzantine(*i)).collect();
    let sim_cfg = SimConfig { network, seed: cfg.seed, time_limit_us: time_limit, watch, target };
    let interceptor = Box::new(Adversary::new(cfg.adversary.clone(), n, p.t));
    let mut sim = Simulator::with_interceptor(procs, sim_cfg, interceptor);
    let result = sim.run();
    let (outcome, diagnostic) = match (&result, cfg.duration) {
        (Ok(_), _) => (Outcome::Completed, None),
        (Err(SimError::TimeLimit { .. }), Duration::VirtualMs(_)) => (Outcome::Completed, None),
        (Err(e @ SimError::Deadlock { .. }), _) => (Outcome::Deadlock, Some(e.to_string())),
        (Err(e @ SimError::TimeLimit { .. }), _) => (Outcome::TimeLimit, Some(e.to_string())),
    };
    let end_us = match (result, cfg.duration) {
        (Err(SimError::TimeLimit { .. }), Duration::VirtualMs(ms)) => ms * 1000,
        _ => sim.now(),
    };
    let events = sim.events_processed();
    let stats = sim.stats().clone();
    let traffic = stats
        .by_class
        .iter()
        .map(|((class, instance), s)| TrafficRow { class: *class, instance: *instance, count: s.count, bytes: s.bytes })
        .collect();

    let mut nodes = Vec::with_capacity(n);
    let mut requesters = Vec::new();
    for (i, actor) in sim.into_procs().into_iter().enumerate() {
        let log = match actor {
            Actor::Rbbc(mut a) => {
                a.finish_log();
                a.log
            }
            Actor::Cons1(a) => a.log,
            Actor::Requester(r) => {
                requesters.push(RequesterRun {
                    index: r.config().index,
                    reads: r.stats.reads,
                    writes: r.stats.writes,
                    steps: r.stats.steps,
                    polls: r.stats.polls,
                    submitted: r.submitted,
                });
                continue;
            }
        };
        nodes.push(NodeRun {
            id: NodeId(i as u32),
            region: cfg.matrix.regions()[placement[i]].clone(),
            byzantine: cfg.adversary.is_byzantine(i),
            egress_bytes: stats.egress[i],
            ingress_bytes: stats.ingress[i],
            log,
        });
    }
    let safety = check_safety(&nodes);
    Ok(RunLog {
        protocol: cfg.protocol,
        n,
        t: p.t,
        beta: p.beta,
        proposers: match leader {
            Some(_) => 1,
            None => proposers.len(),
        },
        adversary: cfg.adversary.kind,
        byzantine: cfg.adversary.byzantine.iter().copied().collect(),
        leader,
        seed: cfg.seed,
        duration: cfg.duration,
        outcome,
        diagnostic,
        end_us,
        events,
        genesis_supply,
        nodes,
        requesters,
        traffic,
        safety,
    })
}

/// Byte totals per class, summed over instances.
pub fn traffic_by_class(rows: &[TrafficRow]) -> BTreeMap<MsgClass, u64> {
    let mut out = BTreeMap::new();
    for r in rows {
        *out.entry(r.class).or_default() += r.bytes;
    }
    out
}
