//! Run metrics. Every value is a pure function of the [`RunLog`].

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use rbbc::adversary::AdversaryKind;
use rbbc::message::MsgClass;
use rbbc::records::BlockRecord;
use rbbc::world::{Duration, Outcome, Protocol, RunLog};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Summary::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let pct = |p: f64| v[((p * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
        Summary {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            p50: pct(0.5),
            p99: pct(0.99),
            max: v[v.len() - 1],
        }
    }
}

pub fn median(values: &[u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m] as f64
    } else {
        (v[m - 1] + v[m]) as f64 / 2.0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationStats {
    pub min: u32,
    pub max: u32,
    pub mean: f64,
    /// Transactions per distinct-verifier count.
    pub histogram: BTreeMap<u32, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub n: usize,
    pub t: usize,
    pub beta: usize,
    pub proposers: usize,
    pub adversary: AdversaryKind,
    pub seed: u64,
    pub outcome: Outcome,
    pub safe: bool,
    pub forks: usize,
    pub height: u64,
    pub warmup_rounds: u64,
    /// Blocks inside the measurement window.
    pub blocks: u64,
    pub window_ms: f64,
    pub valid_tx_per_sec: f64,
    pub reads_per_sec: f64,
    pub rw_ratio: Option<f64>,
    pub valid_tx_per_block: f64,
    pub invalid_tx_per_block: f64,
    pub duplicates_per_block: f64,
    pub proposals_per_block: f64,
    /// Mean time between consecutive commits.
    pub inter_block_ms: f64,
    /// Round start to commit.
    pub round_latency_ms: Summary,
    /// Submission to commit, when requesters drive the load.
    pub tx_latency_ms: Option<Summary>,
    pub verification: VerificationStats,
    pub bytes_per_instance: f64,
    pub rb_bytes_per_instance: f64,
    pub bin_bytes_per_instance: f64,
    pub attest_bytes_per_instance: f64,
    pub cons1_bytes_per_instance: f64,
    pub consensus_hops: (u32, u32),
    pub commit_hops: (u32, u32),
    pub egress_max: u64,
    pub egress_median: f64,
    pub egress_max_over_median: f64,
    /// Leader egress over the median of the other correct nodes.
    pub leader_egress_ratio: Option<f64>,
    pub fetch_instances: usize,
    pub max_bin_round: u32,
    pub round_limit_hits: u64,
}

fn window<'a>(blocks: &'a [BlockRecord], warmup: u64) -> (&'a [BlockRecord], u64) {
    let w = (warmup as usize).min(blocks.len());
    let start = if w == 0 { 0 } else { blocks[w - 1].committed_at_us };
    (&blocks[w..], start)
}

pub fn verification_stats(log: &RunLog) -> VerificationStats {
    let mut histogram: BTreeMap<u32, u64> = BTreeMap::new();
    for b in &log.reference().log.blocks {
        let len = b.proposed_txs - b.duplicates;
        let mut counts = vec![0u32; len];
        for node in &log.nodes {
            for &pos in node.log.verified.get(&b.index).into_iter().flatten() {
                if let Some(c) = counts.get_mut(pos as usize) {
                    *c += 1;
                }
            }
        }
        for c in counts {
            *histogram.entry(c).or_default() += 1;
        }
    }
    let total: u64 = histogram.values().sum();
    let sum: u64 = histogram.iter().map(|(c, k)| *c as u64 * k).sum();
    VerificationStats {
        min: histogram.keys().next().copied().unwrap_or(0),
        max: histogram.keys().next_back().copied().unwrap_or(0),
        mean: if total == 0 { 0.0 } else { sum as f64 / total as f64 },
        histogram,
    }
}

impl MetricsReport {
    pub fn from_log(log: &RunLog, warmup_rounds: u64) -> Self {
        let reference = log.reference();
        let all_blocks = &reference.log.blocks;
        let (blocks, start_us) = window(all_blocks, warmup_rounds);
        let end_us = match log.duration {
            Duration::VirtualMs(_) => log.end_us,
            Duration::Rounds(_) => blocks.last().map_or(start_us, |b| b.committed_at_us),
        };
        let window_s = end_us.saturating_sub(start_us) as f64 / 1e6;
        let per_sec = |x: f64| if window_s > 0.0 { x / window_s } else { 0.0 };
        let k = blocks.len().max(1) as f64;
        let sum = |f: fn(&BlockRecord) -> usize| blocks.iter().map(f).sum::<usize>() as f64;
        let valid = sum(|b| b.valid_txs);

        let mut commits: Vec<u64> = Vec::with_capacity(blocks.len() + 1);
        commits.push(start_us);
        commits.extend(blocks.iter().map(|b| b.committed_at_us));
        let gaps: Vec<f64> = commits.windows(2).map(|w| (w[1] - w[0]) as f64 / 1e3).collect();
        let round_lat: Vec<f64> = blocks.iter().map(|b| (b.committed_at_us - b.started_at_us) as f64 / 1e3).collect();

        let in_window = |t: u64| t >= start_us && t <= end_us;
        let reads = log.requesters.iter().flat_map(|r| &r.polls).filter(|t| in_window(**t)).count();
        let writes = log.requesters.iter().flat_map(|r| &r.submitted).filter(|(_, t)| in_window(*t)).count();
        let tx_latency_ms = (!log.requesters.is_empty()).then(|| {
            let submitted: HashMap<_, u64> =
                log.requesters.iter().flat_map(|r| r.submitted.iter().map(|(d, t)| (*d, *t))).collect();
            let commit_at: HashMap<u64, u64> = blocks.iter().map(|b| (b.index, b.committed_at_us)).collect();
            let lat: Vec<f64> = reference
                .log
                .txs
                .iter()
                .filter_map(|tx| {
                    let c = commit_at.get(&tx.block)?;
                    let s = submitted.get(&tx.txid)?;
                    Some(c.saturating_sub(*s) as f64 / 1e3)
                })
                .collect();
            Summary::of(&lat)
        });

        let first = blocks.first().map_or(u64::MAX, |b| b.index);
        let last = blocks.last().map_or(0, |b| b.index);
        let mut phase: BTreeMap<&'static str, u64> = BTreeMap::new();
        for row in &log.traffic {
            let Some(i) = row.instance else { continue };
            if i < first || i > last {
                continue;
            }
            let key = if row.class.is_rb() {
                "rb"
            } else if row.class.is_bin() {
                "bin"
            } else if row.class == MsgClass::Attest {
                "attest"
            } else if row.class.is_cons1() {
                "cons1"
            } else {
                continue;
            };
            *phase.entry(key).or_default() += row.bytes;
        }
        let per_inst = |key: &str| phase.get(key).copied().unwrap_or(0) as f64 / k;

        let egress: Vec<u64> = log.correct_nodes().map(|n| n.egress_bytes).collect();
        let egress_max = egress.iter().copied().max().unwrap_or(0);
        let egress_median = median(&egress);
        let leader_egress_ratio = log.leader.map(|l| {
            let others: Vec<u64> = log.correct_nodes().filter(|n| n.id != l).map(|n| n.egress_bytes).collect();
            log.nodes[l.index()].egress_bytes as f64 / median(&others).max(1.0)
        });

        let hops = |f: fn(&BlockRecord) -> u32| {
            let v: Vec<u32> = blocks.iter().map(f).collect();
            (v.iter().copied().min().unwrap_or(0), v.iter().copied().max().unwrap_or(0))
        };

        MetricsReport {
            protocol: log.protocol,
            n: log.n,
            t: log.t,
            beta: log.beta,
            proposers: log.proposers,
            adversary: log.adversary,
            seed: log.seed,
            outcome: log.outcome,
            safe: log.safety.is_safe(),
            forks: log.safety.forks.len(),
            height: log.safety.min_height,
            warmup_rounds,
            blocks: blocks.len() as u64,
            window_ms: window_s * 1e3,
            valid_tx_per_sec: per_sec(valid),
            reads_per_sec: per_sec(reads as f64),
            rw_ratio: (writes > 0).then(|| reads as f64 / writes as f64),
            valid_tx_per_block: valid / k,
            invalid_tx_per_block: sum(|b| b.invalid_txs) / k,
            duplicates_per_block: sum(|b| b.duplicates) / k,
            proposals_per_block: sum(|b| b.proposals_included) / k,
            inter_block_ms: Summary::of(&gaps).mean,
            round_latency_ms: Summary::of(&round_lat),
            tx_latency_ms,
            verification: verification_stats(log),
            bytes_per_instance: phase.values().sum::<u64>() as f64 / k,
            rb_bytes_per_instance: per_inst("rb"),
            bin_bytes_per_instance: per_inst("bin"),
            attest_bytes_per_instance: per_inst("attest"),
            cons1_bytes_per_instance: per_inst("cons1"),
            consensus_hops: hops(|b| b.consensus_hop),
            commit_hops: hops(|b| b.commit_hop),
            egress_max,
            egress_median,
            egress_max_over_median: if egress_median > 0.0 { egress_max as f64 / egress_median } else { 0.0 },
            leader_egress_ratio,
            fetch_instances: log.correct_nodes().map(|n| n.log.fetches.len()).sum(),
            max_bin_round: log.correct_nodes().map(|n| n.log.max_bin_round).max().unwrap_or(0),
            round_limit_hits: log.correct_nodes().map(|n| n.log.round_limit_hits).sum(),
        }
    }
}
