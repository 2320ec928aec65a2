//! Wire format and round orchestration between agents and the coordinator.
//!
//! Every message is `"FLTP"`, u16 version, u8 type, u32 agent id, u64
//! payload length, the payload, then the CRC-32 of the payload. All integers
//! and floats are little-endian.

use std::sync::mpsc;

use crate::agent::Agent;
use crate::coordinator::{AgentSnapshot, Coordinator, GroupPolicy, RegressionReport};
use crate::env::{StateVector, STATE_DIM};
use crate::error::{DecodeError, Error, Result};
use crate::nn::{CriticNet, PolicyNet, Reader};

pub const WIRE_MAGIC: &[u8; 4] = b"FLTP";
pub const WIRE_VERSION: u16 = 1;
/// Bytes of framing around a payload.
pub const FRAME_OVERHEAD: usize = 4 + 2 + 1 + 4 + 8 + 4;
/// Sender id used by the coordinator.
pub const COORDINATOR_ID: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Snapshot = 1,
    GroupPolicy = 2,
    RoundBegin = 3,
    RoundAck = 4,
}

impl MessageType {
    pub fn name(self) -> &'static str {
        match self {
            Self::Snapshot => "SNAPSHOT",
            Self::GroupPolicy => "GROUP_POLICY",
            Self::RoundBegin => "ROUND_BEGIN",
            Self::RoundAck => "ROUND_ACK",
        }
    }

    fn from_u8(b: u8) -> std::result::Result<Self, DecodeError> {
        Ok(match b {
            1 => Self::Snapshot,
            2 => Self::GroupPolicy,
            3 => Self::RoundBegin,
            4 => Self::RoundAck,
            other => return Err(DecodeError::UnknownMessageType(other)),
        })
    }
}

/// A framed message with an opaque payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MessageType,
    pub agent_id: u32,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_OVERHEAD + self.payload.len());
        out.extend_from_slice(WIRE_MAGIC);
        out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.agent_id.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&crc32fast::hash(&self.payload).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != WIRE_MAGIC {
            return Err(DecodeError::BadMagic { found: magic });
        }
        let version = r.u16()?;
        if version != WIRE_VERSION {
            return Err(DecodeError::BadVersion(version));
        }
        let msg_type = MessageType::from_u8(r.u8()?)?;
        let agent_id = r.u32()?;
        let len = r.u64()?;
        let len = usize::try_from(len).ok().filter(|l| *l <= r.remaining()).ok_or(DecodeError::Truncated {
            needed: len.min(usize::MAX as u64) as usize,
            available: r.remaining(),
        })?;
        let payload = r.take(len)?.to_vec();
        let expected = r.u32()?;
        if r.remaining() != 0 {
            return Err(DecodeError::TrailingBytes(r.remaining()));
        }
        let actual = crc32fast::hash(&payload);
        if actual != expected {
            return Err(DecodeError::CrcMismatch { expected, actual });
        }
        Ok(Self {
            msg_type,
            agent_id,
            payload,
        })
    }
}

/// Typed content of the four message kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Snapshot(AgentSnapshot),
    GroupPolicy(GroupPolicy),
    RoundBegin { round: u64, group_version: u64 },
    RoundAck { agent_id: u32, round: u64, adopted_version: u64 },
}

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
}

fn take_blob<'a>(r: &mut Reader<'a>) -> std::result::Result<&'a [u8], DecodeError> {
    let len = r.u64()?;
    if len > r.remaining() as u64 {
        return Err(DecodeError::Truncated {
            needed: len as usize,
            available: r.remaining(),
        });
    }
    r.take(len as usize)
}

fn malformed(e: Error) -> DecodeError {
    match e {
        Error::Decode(d) => d,
        other => DecodeError::Malformed(other.to_string()),
    }
}

fn finish(r: &Reader<'_>) -> std::result::Result<(), DecodeError> {
    match r.remaining() {
        0 => Ok(()),
        n => Err(DecodeError::TrailingBytes(n)),
    }
}

pub fn encode_message(m: &Message) -> Vec<u8> {
    let mut payload = Vec::new();
    let (msg_type, agent_id) = match m {
        Message::Snapshot(s) => {
            payload.extend_from_slice(&s.cycle_index.to_le_bytes());
            put_blob(&mut payload, &s.actor.to_checkpoint());
            put_blob(&mut payload, &s.critic.to_checkpoint());
            payload.extend_from_slice(&(s.states.len() as u32).to_le_bytes());
            for st in &s.states {
                for x in st.to_array() {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
            (MessageType::Snapshot, s.agent_id)
        }
        Message::GroupPolicy(g) => {
            payload.extend_from_slice(&g.version.to_le_bytes());
            put_blob(&mut payload, &g.policy.to_checkpoint());
            (MessageType::GroupPolicy, COORDINATOR_ID)
        }
        Message::RoundBegin { round, group_version } => {
            payload.extend_from_slice(&round.to_le_bytes());
            payload.extend_from_slice(&group_version.to_le_bytes());
            (MessageType::RoundBegin, COORDINATOR_ID)
        }
        Message::RoundAck {
            agent_id,
            round,
            adopted_version,
        } => {
            payload.extend_from_slice(&round.to_le_bytes());
            payload.extend_from_slice(&adopted_version.to_le_bytes());
            (MessageType::RoundAck, *agent_id)
        }
    };
    WireMessage {
        msg_type,
        agent_id,
        payload,
    }
    .encode()
}

pub fn decode_message(bytes: &[u8]) -> std::result::Result<Message, DecodeError> {
    let w = WireMessage::decode(bytes)?;
    let mut r = Reader::new(&w.payload);
    let m = match w.msg_type {
        MessageType::Snapshot => {
            let cycle_index = r.u64()?;
            let actor = PolicyNet::from_checkpoint(take_blob(&mut r)?).map_err(malformed)?;
            let critic = CriticNet::from_checkpoint(take_blob(&mut r)?).map_err(malformed)?;
            let b = r.u32()? as usize;
            if b.saturating_mul(8 * STATE_DIM) > r.remaining() {
                return Err(DecodeError::Truncated {
                    needed: b.saturating_mul(8 * STATE_DIM),
                    available: r.remaining(),
                });
            }
            let mut states = Vec::with_capacity(b);
            for _ in 0..b {
                let mut a = [0.0; STATE_DIM];
                for x in a.iter_mut() {
                    *x = r.f64()?;
                }
                states.push(StateVector::from_array(a));
            }
            Message::Snapshot(AgentSnapshot {
                agent_id: w.agent_id,
                cycle_index,
                actor,
                critic,
                states,
            })
        }
        MessageType::GroupPolicy => {
            let version = r.u64()?;
            let policy = PolicyNet::from_checkpoint(take_blob(&mut r)?).map_err(malformed)?;
            Message::GroupPolicy(GroupPolicy { policy, version })
        }
        MessageType::RoundBegin => Message::RoundBegin {
            round: r.u64()?,
            group_version: r.u64()?,
        },
        MessageType::RoundAck => Message::RoundAck {
            agent_id: w.agent_id,
            round: r.u64()?,
            adopted_version: r.u64()?,
        },
    };
    finish(&r)?;
    Ok(m)
}

pub fn encode_snapshot(s: &AgentSnapshot) -> Vec<u8> {
    encode_message(&Message::Snapshot(s.clone()))
}

pub fn decode_snapshot(bytes: &[u8]) -> std::result::Result<AgentSnapshot, DecodeError> {
    match decode_message(bytes)? {
        Message::Snapshot(s) => Ok(s),
        other => Err(wrong("SNAPSHOT", &other)),
    }
}

pub fn encode_group_policy(g: &GroupPolicy) -> Vec<u8> {
    encode_message(&Message::GroupPolicy(g.clone()))
}

pub fn decode_group_policy(bytes: &[u8]) -> std::result::Result<GroupPolicy, DecodeError> {
    match decode_message(bytes)? {
        Message::GroupPolicy(g) => Ok(g),
        other => Err(wrong("GROUP_POLICY", &other)),
    }
}

fn wrong(wanted: &'static str, got: &Message) -> DecodeError {
    let got = match got {
        Message::Snapshot(_) => MessageType::Snapshot,
        Message::GroupPolicy(_) => MessageType::GroupPolicy,
        Message::RoundBegin { .. } => MessageType::RoundBegin,
        Message::RoundAck { .. } => MessageType::RoundAck,
    };
    DecodeError::WrongMessageType {
        wanted,
        got: got.name(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncMode {
    Sync,
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundSchedule {
    pub mode: SyncMode,
    pub update_interval_s: f64,
    pub route_duration_s: f64,
}

impl RoundSchedule {
    pub fn validate(&self) -> Result<()> {
        let (u, d) = (self.update_interval_s, self.route_duration_s);
        if !(u > 0.0 && d > 0.0 && u.is_finite() && d.is_finite()) {
            return Err(Error::invalid("schedule durations must be positive"));
        }
        let k = d / u;
        if (k - k.round()).abs() > 1e-9 || k.round() < 1.0 {
            return Err(Error::invalid(format!("route duration {d} s is not a multiple of the update interval {u} s")));
        }
        Ok(())
    }

    pub fn updates_per_route(&self) -> usize {
        (self.route_duration_s / self.update_interval_s).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoundTraffic {
    pub round: u64,
    /// Snapshot bytes received by the coordinator.
    pub bytes_up: u64,
    /// Size of the group-policy broadcast (one message per round).
    pub bytes_down: u64,
    /// ROUND_BEGIN and ROUND_ACK bytes.
    pub control_bytes: u64,
}

/// Cumulative byte accounting.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrafficLedger {
    pub rounds: Vec<RoundTraffic>,
    pub per_agent_up: Vec<u64>,
    pub per_agent_down: Vec<u64>,
}

impl TrafficLedger {
    pub fn new(fleet_size: usize) -> Self {
        Self {
            rounds: Vec::new(),
            per_agent_up: vec![0; fleet_size],
            per_agent_down: vec![0; fleet_size],
        }
    }

    pub fn total_up(&self) -> u64 {
        self.rounds.iter().map(|r| r.bytes_up).sum()
    }

    pub fn total_down(&self) -> u64 {
        self.rounds.iter().map(|r| r.bytes_down).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub aborted: bool,
    pub participants: Vec<u32>,
    pub missing: Vec<u32>,
    /// Coordinator version after the round.
    pub group_version: u64,
    /// `(agent, versions behind)` for agents left on an older group policy.
    pub staleness: Vec<(u32, u64)>,
    pub regression: Option<RegressionReport>,
    pub traffic: RoundTraffic,
}

/// One exchange: ROUND_BEGIN to every agent, snapshots up, one regression,
/// one broadcast down, acknowledgements. `available[k] == false` marks agent
/// `k` as unreachable this round: a sync round then aborts, an async round
/// proceeds without it and leaves it on its previous group version.
pub fn run_round(
    agents: &mut [Agent],
    available: &[bool],
    coordinator: &mut Coordinator,
    schedule: &RoundSchedule,
    round: u64,
    snapshot_states: usize,
    ledger: &mut TrafficLedger,
) -> Result<RoundReport> {
    schedule.validate()?;
    if available.len() != agents.len() {
        return Err(Error::invalid("availability mask does not match fleet size"));
    }
    if ledger.per_agent_up.len() < agents.len() {
        ledger.per_agent_up.resize(agents.len(), 0);
        ledger.per_agent_down.resize(agents.len(), 0);
    }
    let mut traffic = RoundTraffic {
        round,
        ..Default::default()
    };
    let missing: Vec<u32> = agents
        .iter()
        .zip(available)
        .filter(|(_, ok)| !**ok)
        .map(|(a, _)| a.id as u32)
        .collect();
    let version_before = coordinator.group().version;
    let staleness = |agents: &[Agent], v: u64| -> Vec<(u32, u64)> {
        agents
            .iter()
            .filter_map(|a| {
                let behind = v - a.group_version().unwrap_or(0).min(v);
                (behind > 0).then_some((a.id as u32, behind))
            })
            .collect()
    };
    if schedule.mode == SyncMode::Sync && !missing.is_empty() {
        log::warn!("round {round} aborted: agents {missing:?} unavailable in sync mode");
        ledger.rounds.push(traffic);
        return Ok(RoundReport {
            round,
            aborted: true,
            participants: Vec::new(),
            missing,
            group_version: version_before,
            staleness: staleness(agents, version_before),
            regression: None,
            traffic,
        });
    }

    let begin = encode_message(&Message::RoundBegin {
        round,
        group_version: version_before,
    });
    let (up_tx, up_rx) = mpsc::channel::<Vec<u8>>();
    let mut participants = Vec::new();
    for (k, agent) in agents.iter_mut().enumerate() {
        if !available[k] {
            continue;
        }
        traffic.control_bytes += begin.len() as u64;
        match decode_message(&begin)? {
            Message::RoundBegin { round: r, .. } if r == round => {}
            _ => return Err(Error::Contract("agent received a mismatched ROUND_BEGIN".into())),
        }
        let snap = agent
            .make_snapshot(snapshot_states, agent.learner.cycles)
            .map_err(|e| e.with_context(agent.id, round))?;
        let bytes = encode_snapshot(&snap);
        ledger.per_agent_up[k] += bytes.len() as u64;
        traffic.bytes_up += bytes.len() as u64;
        up_tx.send(bytes).map_err(|_| Error::Contract("coordinator inbox closed".into()))?;
        participants.push(agent.id as u32);
    }
    drop(up_tx);

    let snapshots: Vec<AgentSnapshot> = up_rx.iter().map(|b| decode_snapshot(&b)).collect::<std::result::Result<_, _>>()?;
    let regression = if snapshots.is_empty() {
        None
    } else {
        Some(coordinator.regress(&snapshots)?)
    };

    if regression.is_some() {
        let broadcast = coordinator.broadcast();
        traffic.bytes_down = broadcast.len() as u64;
        for (k, agent) in agents.iter_mut().enumerate() {
            if !available[k] {
                continue;
            }
            let g = decode_group_policy(&broadcast)?;
            ledger.per_agent_down[k] += broadcast.len() as u64;
            let adopted_version = g.version;
            agent.adopt_group(g);
            let ack = encode_message(&Message::RoundAck {
                agent_id: agent.id as u32,
                round,
                adopted_version,
            });
            traffic.control_bytes += ack.len() as u64;
        }
    }
    let group_version = coordinator.group().version;
    ledger.rounds.push(traffic);
    Ok(RoundReport {
        round,
        aborted: false,
        participants,
        missing,
        group_version,
        staleness: staleness(agents, group_version),
        regression,
        traffic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn snapshot(b: usize, hidden: &[usize], seed: u64) -> AgentSnapshot {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        AgentSnapshot {
            agent_id: 7,
            cycle_index: 3,
            actor: PolicyNet::new(hidden, 18000.0, &mut r).unwrap(),
            critic: CriticNet::new(hidden, 100.0, &mut r).unwrap(),
            states: (0..b)
                .map(|_| StateVector::from_array(std::array::from_fn(|_| r.random_range(-3.0..3.0))))
                .collect(),
        }
    }

    #[test]
    fn minimal_snapshot_round_trip() {
        let s = snapshot(1, &[4], 1);
        let bytes = encode_snapshot(&s);
        assert_eq!(decode_snapshot(&bytes).unwrap(), s);
        assert_eq!(encode_snapshot(&s), bytes);
    }

    #[test]
    fn flipped_payload_byte_is_crc_error() {
        let bytes = encode_snapshot(&snapshot(2, &[4], 2));
        let mut bad = bytes.clone();
        bad[FRAME_OVERHEAD - 4 + 10] ^= 0x01;
        assert!(matches!(decode_snapshot(&bad), Err(DecodeError::CrcMismatch { .. })));
    }

    #[test]
    fn distinct_framing_errors() {
        let bytes = encode_snapshot(&snapshot(2, &[4], 3));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_snapshot(&magic), Err(DecodeError::BadMagic { .. })));
        assert!(matches!(
            decode_snapshot(&bytes[..bytes.len() - 1]),
            Err(DecodeError::Truncated { .. })
        ));
        let mut ty = bytes.clone();
        ty[6] = 99;
        assert!(matches!(decode_snapshot(&ty), Err(DecodeError::UnknownMessageType(99))));
        let g = encode_group_policy(&GroupPolicy {
            policy: snapshot(1, &[4], 4).actor,
            version: 2,
        });
        assert!(matches!(decode_snapshot(&g), Err(DecodeError::WrongMessageType { .. })));
    }

    #[test]
    fn snapshot_size_matches_parameter_count() {
        let b = 17;
        let s = snapshot(b, &[256, 256, 256], 5);
        let actor_params = (6 * 256 + 256) + 2 * (256 * 256 + 256) + (256 * 5 + 5);
        let critic_params = (10 * 256 + 256) + 2 * (256 * 256 + 256) + (256 + 1);
        let names = |prefix: &str, extra: &str| -> usize {
            let mut n = 0;
            for l in 0..4 {
                n += 2 + format!("{prefix}layer{l}.weight").len() + 4 + 8;
                n += 2 + format!("{prefix}layer{l}.bias").len() + 4 + 4;
            }
            n + 2 + extra.len() + 4 + 4
        };
        let blob_header = 4 + 2 + 4;
        let actor_blob = blob_header + names("policy.", "policy.max_torque_nm") + 8 * (actor_params + 1);
        let critic_blob = blob_header + names("critic.", "critic.value_scale") + 8 * (critic_params + 1);
        let expected = FRAME_OVERHEAD + 8 + 8 + actor_blob + 8 + critic_blob + 4 + 8 * 6 * b;
        assert_eq!(encode_snapshot(&s).len(), expected);
    }

    #[test]
    fn control_messages_round_trip() {
        for m in [
            Message::RoundBegin {
                round: 9,
                group_version: 4,
            },
            Message::RoundAck {
                agent_id: 3,
                round: 9,
                adopted_version: 5,
            },
        ] {
            assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
        }
    }

    #[test]
    fn schedule_divisibility() {
        let mut s = RoundSchedule {
            mode: SyncMode::Sync,
            update_interval_s: 2500.0,
            route_duration_s: 10000.0,
        };
        s.validate().unwrap();
        assert_eq!(s.updates_per_route(), 4);
        s.update_interval_s = 3000.0;
        assert!(s.validate().is_err());
    }
}
