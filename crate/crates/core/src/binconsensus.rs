//! Deterministic binary consensus: BV-broadcast of estimates, an AUX
//! exchange, a parity decision rule and a rotating weak coordinator.
//!
//! Round `r` (from 1):
//! - EST(v) is relayed after `t + 1` distinct ESTs for `v`; `v` enters
//!   `bin_values` after `2t + 1`.
//! - The coordinator `r mod n` broadcasts COORD(w) for the first value in
//!   its `bin_values`.
//! - Once the round timer has expired and `bin_values` is non-empty, AUX(w)
//!   is broadcast with the coordinator's value if it is in `bin_values`,
//!   else the own estimate if it is, else the other value.
//! - On `n - t` AUX whose values lie in `bin_values`: a single value `b`
//!   becomes the estimate and is decided when `b == r mod 2`; both values
//!   give estimate `r mod 2`.
//!
//! A decided node keeps running two more rounds so the others can finish,
//! then halts.

use std::collections::BTreeMap;

use crate::message::BinKind;
use crate::types::NodeId;

/// Messages for rounds beyond this are dropped as garbage.
const ROUND_CAP: u32 = 10_000;

#[derive(Debug, Clone, Copy)]
pub struct BinParams {
    pub n: usize,
    pub t: usize,
    pub me: NodeId,
    /// Timeout of round 2; doubles every round after. Round 1 has none.
    pub base_timeout_us: u64,
    pub r_max: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BinAction {
    Broadcast { kind: BinKind, round: u32, value: bool, hop: u32 },
    Decide { value: bool, round: u32, hop: u32 },
    /// Call [`BinInstance::on_timer`] for `round` after the delay.
    Timer { round: u32, after_us: u64 },
    /// Entered a round beyond `r_max` without deciding.
    RoundLimit { round: u32 },
}

#[derive(Debug, Clone, Default)]
struct RoundState {
    est_from: [BTreeMap<NodeId, u32>; 2],
    est_sent: [bool; 2],
    /// Hop depth at which each value entered `bin_values`.
    bin_values: [Option<u32>; 2],
    aux_from: BTreeMap<NodeId, (bool, u32)>,
    aux_sent: bool,
    coord: Option<(bool, u32)>,
    coord_sent: bool,
    timer_expired: bool,
}

impl RoundState {
    fn has(&self, v: bool) -> bool {
        self.bin_values[v as usize].is_some()
    }
}

#[derive(Debug, Clone)]
pub struct BinInstance {
    p: BinParams,
    proposed: bool,
    round: u32,
    est: bool,
    /// Hop depth at which the current round was entered.
    depth: u32,
    rounds: BTreeMap<u32, RoundState>,
    decided: Option<(bool, u32, u32)>,
    halted: bool,
    limit_hit: bool,
}

fn max_hop<'a>(hops: impl IntoIterator<Item = &'a u32>) -> u32 {
    hops.into_iter().copied().max().unwrap_or(0)
}

impl BinInstance {
    pub fn new(p: BinParams) -> Self {
        BinInstance {
            p,
            proposed: false,
            round: 0,
            est: false,
            depth: 0,
            rounds: BTreeMap::new(),
            decided: None,
            halted: false,
            limit_hit: false,
        }
    }

    pub fn proposed(&self) -> bool {
        self.proposed
    }

    pub fn decided(&self) -> Option<bool> {
        self.decided.map(|(v, _, _)| v)
    }

    /// Round in which the decision happened.
    pub fn decision_round(&self) -> Option<u32> {
        self.decided.map(|(_, r, _)| r)
    }

    pub fn decision_hop(&self) -> Option<u32> {
        self.decided.map(|(_, _, h)| h)
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    /// Whether the instance ever went past `r_max`.
    pub fn limit_hit(&self) -> bool {
        self.limit_hit
    }

    fn coordinator(&self, round: u32) -> NodeId {
        NodeId((round as usize % self.p.n) as u32)
    }

    /// Starts round 1 with estimate `v`, triggered at hop depth `hop`.
    /// Panics on a second call.
    pub fn propose(&mut self, v: bool, hop: u32) -> Vec<BinAction> {
        assert!(!self.proposed, "double propose");
        self.proposed = true;
        self.est = v;
        let mut out = Vec::new();
        self.enter_round(1, hop, &mut out);
        out
    }

    pub fn on_message(&mut self, from: NodeId, kind: BinKind, round: u32, value: bool, hop: u32) -> Vec<BinAction> {
        let mut out = Vec::new();
        if self.halted || round == 0 || round > ROUND_CAP || from.index() >= self.p.n {
            return out;
        }
        let coord = self.coordinator(round);
        let rs = self.rounds.entry(round).or_default();
        match kind {
            BinKind::Est => {
                rs.est_from[value as usize].entry(from).or_insert(hop);
            }
            BinKind::Aux => {
                rs.aux_from.entry(from).or_insert((value, hop));
            }
            BinKind::Coord => {
                if from == coord && rs.coord.is_none() {
                    rs.coord = Some((value, hop));
                }
            }
        }
        if self.proposed && round <= self.round {
            self.evaluate(round, &mut out);
        }
        out
    }

    pub fn on_timer(&mut self, round: u32) -> Vec<BinAction> {
        let mut out = Vec::new();
        if self.halted || round != self.round {
            return out;
        }
        self.rounds.entry(round).or_default().timer_expired = true;
        self.evaluate(round, &mut out);
        out
    }

    fn enter_round(&mut self, round: u32, hop: u32, out: &mut Vec<BinAction>) {
        if let Some((_, r_dec, _)) = self.decided {
            if round > r_dec + 2 {
                self.halted = true;
                return;
            }
        }
        self.round = round;
        self.depth = hop;
        if round > self.p.r_max && !self.limit_hit && self.decided.is_none() {
            self.limit_hit = true;
            out.push(BinAction::RoundLimit { round });
        }
        let timeout = if round == 1 {
            0
        } else {
            self.p.base_timeout_us.saturating_mul(1u64 << (round - 2).min(40))
        };
        let rs = self.rounds.entry(round).or_default();
        if timeout == 0 {
            rs.timer_expired = true;
        } else {
            out.push(BinAction::Timer { round, after_us: timeout });
        }
        if !rs.est_sent[self.est as usize] {
            rs.est_sent[self.est as usize] = true;
            out.push(BinAction::Broadcast { kind: BinKind::Est, round, value: self.est, hop: hop + 1 });
        }
        self.evaluate(round, out);
    }

    fn evaluate(&mut self, round: u32, out: &mut Vec<BinAction>) {
        let (t, n, me) = (self.p.t, self.p.n, self.p.me);
        let is_coord = self.coordinator(round) == me;
        let current = round == self.round;
        let est = self.est;
        let rs = self.rounds.get_mut(&round).expect("round state");

        for v in [false, true] {
            let from = &rs.est_from[v as usize];
            if from.len() >= t + 1 && !rs.est_sent[v as usize] {
                rs.est_sent[v as usize] = true;
                let hop = max_hop(from.values()) + 1;
                out.push(BinAction::Broadcast { kind: BinKind::Est, round, value: v, hop });
            }
            if from.len() >= 2 * t + 1 && !rs.has(v) {
                let hop = max_hop(from.values());
                rs.bin_values[v as usize] = Some(hop);
                if is_coord && current && !rs.coord_sent {
                    rs.coord_sent = true;
                    out.push(BinAction::Broadcast { kind: BinKind::Coord, round, value: v, hop: hop + 1 });
                }
            }
        }
        if !current {
            return;
        }

        if !rs.aux_sent && rs.timer_expired && (rs.has(false) || rs.has(true)) {
            let w = match rs.coord {
                Some((c, _)) if rs.has(c) => c,
                _ if rs.has(est) => est,
                _ => !est,
            };
            rs.aux_sent = true;
            let hop = rs.bin_values[w as usize].expect("w in bin_values") + 1;
            out.push(BinAction::Broadcast { kind: BinKind::Aux, round, value: w, hop });
        }
        if !rs.aux_sent {
            return;
        }

        let counted: Vec<(bool, u32)> = rs.aux_from.values().filter(|(v, _)| rs.has(*v)).copied().collect();
        if counted.len() < n - t {
            return;
        }
        let has0 = counted.iter().any(|(v, _)| !v);
        let has1 = counted.iter().any(|(v, _)| *v);
        let hop = counted
            .iter()
            .map(|(_, h)| *h)
            .chain(rs.bin_values.iter().flatten().copied())
            .max()
            .unwrap_or(0);
        let parity = round % 2 == 1;
        if has0 && has1 {
            self.est = parity;
        } else {
            let b = has1;
            self.est = b;
            if b == parity && self.decided.is_none() {
                self.decided = Some((b, round, hop));
                out.push(BinAction::Decide { value: b, round, hop });
            }
        }
        self.enter_round(round + 1, hop, out);
    }
}
