//! Simulated range-limited ad hoc network with per-robot mailboxes and
//! byte accounting.
//!
//! Wire rule: every scalar is 8 bytes, a pose is 24 bytes, and every message
//! carries a 16-byte header (sender, receiver, kind, timestamp).

use std::collections::{BTreeMap, VecDeque};
use std::fmt::{self, Write as _};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dpgo::{NodeKey, SeparatorPoseMsg};
use crate::estimation::LoopClosure;
use crate::geometry::Pose2;
use crate::scenario::RobotId;

pub const HEADER_BYTES: usize = 16;
pub const SCALAR_BYTES: usize = 8;
pub const POSE_BYTES: usize = 3 * SCALAR_BYTES;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Maximum delivery distance (m).
    pub comm_range: f64,
    /// Delay before a message becomes deliverable (s).
    pub latency: f64,
    pub drop_probability: f64,
    /// Undeliverable messages are discarded this long after sending (s).
    pub ttl: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            comm_range: 100.0,
            latency: 0.0,
            drop_probability: 0.0,
            ttl: 10.0,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.comm_range > 0.0) {
            return Err("comm_range must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err("drop_probability must lie in [0, 1]".into());
        }
        if !(self.latency >= 0.0 && self.ttl >= 0.0) {
            return Err("latency and ttl must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    OdomWindow,
    LoopClosure,
    SeparatorPoses,
    PcmVerdict,
}

impl MessageKind {
    pub const ALL: [MessageKind; 4] = [
        MessageKind::OdomWindow,
        MessageKind::LoopClosure,
        MessageKind::SeparatorPoses,
        MessageKind::PcmVerdict,
    ];
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MessageKind::OdomWindow => "OdomWindow",
            MessageKind::LoopClosure => "LoopClosure",
            MessageKind::SeparatorPoses => "SeparatorPoses",
            MessageKind::PcmVerdict => "PcmVerdict",
        };
        f.write_str(name)
    }
}

/// Odometry samples a robot shares with a neighbour: sample index, stamp and
/// pose in the sender's odometry frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OdomWindowMsg {
    pub samples: Vec<(usize, f64, Pose2)>,
}

/// A loop closure plus the graph edge it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopClosureMsg {
    pub id: u64,
    pub closure: LoopClosure,
    pub from_key: NodeKey,
    pub to_key: NodeKey,
}

/// Current inlier set of one robot pair, as closure ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmVerdictMsg {
    pub from: RobotId,
    pub to: RobotId,
    pub inliers: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    OdomWindow(OdomWindowMsg),
    LoopClosure(LoopClosureMsg),
    SeparatorPoses(SeparatorPoseMsg),
    PcmVerdict(PcmVerdictMsg),
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::OdomWindow(_) => MessageKind::OdomWindow,
            Payload::LoopClosure(_) => MessageKind::LoopClosure,
            Payload::SeparatorPoses(_) => MessageKind::SeparatorPoses,
            Payload::PcmVerdict(_) => MessageKind::PcmVerdict,
        }
    }

    /// Serialized size under the wire rule.
    pub fn size_bytes(&self) -> usize {
        match self {
            // index, stamp, pose
            Payload::OdomWindow(m) => m.samples.len() * (2 * SCALAR_BYTES + POSE_BYTES),
            // id, from, to, t, pose, 6 covariance terms, residual, window size,
            // two node indices
            Payload::LoopClosure(_) => 14 * SCALAR_BYTES + POSE_BYTES,
            // keys are implicit: both ends order separators identically
            Payload::SeparatorPoses(m) => m.poses.len() * POSE_BYTES,
            Payload::PcmVerdict(m) => (2 + m.inliers.len()) * SCALAR_BYTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: RobotId,
    pub receiver: RobotId,
    pub sent_at: f64,
    pub payload: Payload,
}

impl Message {
    pub fn new(sender: RobotId, receiver: RobotId, sent_at: f64, payload: Payload) -> Self {
        Self {
            sender,
            receiver,
            sent_at,
            payload,
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    pub fn size_bytes(&self) -> usize {
        HEADER_BYTES + self.payload.size_bytes()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindStats {
    pub sent: u64,
    pub bytes: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub expired: u64,
}

/// Per-kind totals. Bytes count every attempted send.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommReport {
    pub kinds: BTreeMap<MessageKind, KindStats>,
}

impl CommReport {
    pub fn get(&self, kind: MessageKind) -> KindStats {
        self.kinds.get(&kind).copied().unwrap_or_default()
    }

    pub fn total_bytes(&self) -> u64 {
        self.kinds.values().map(|k| k.bytes).sum()
    }

    pub fn total_messages(&self) -> u64 {
        self.kinds.values().map(|k| k.sent).sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16}{:>10}{:>14}{:>11}{:>9}{:>9}{:>12}",
            "kind", "messages", "bytes", "delivered", "dropped", "expired", "MB"
        );
        let mut total = KindStats::default();
        for kind in MessageKind::ALL {
            let k = self.get(kind);
            let _ = writeln!(
                out,
                "{:<16}{:>10}{:>14}{:>11}{:>9}{:>9}{:>12.6}",
                kind.to_string(),
                k.sent,
                k.bytes,
                k.delivered,
                k.dropped,
                k.expired,
                k.bytes as f64 / 1e6
            );
            total.sent += k.sent;
            total.bytes += k.bytes;
            total.delivered += k.delivered;
            total.dropped += k.dropped;
            total.expired += k.expired;
        }
        let _ = writeln!(
            out,
            "{:<16}{:>10}{:>14}{:>11}{:>9}{:>9}{:>12.6}",
            "total",
            total.sent,
            total.bytes,
            total.delivered,
            total.dropped,
            total.expired,
            total.bytes as f64 / 1e6
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,messages,bytes,delivered,dropped,expired\n");
        for kind in MessageKind::ALL {
            let k = self.get(kind);
            let _ = writeln!(
                out,
                "{kind},{},{},{},{},{}",
                k.sent, k.bytes, k.delivered, k.dropped, k.expired
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    deliver_after: f64,
    expires_at: f64,
    message: Message,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepReport {
    pub delivered: usize,
    pub expired: usize,
}

/// The single synchronization point between robots.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetConfig,
    rng: ChaCha8Rng,
    queue: VecDeque<InFlight>,
    mailboxes: BTreeMap<RobotId, Vec<Message>>,
    report: CommReport,
    now: f64,
}

impl Network {
    pub fn new(cfg: NetConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            queue: VecDeque::new(),
            mailboxes: BTreeMap::new(),
            report: CommReport::default(),
            now: f64::NEG_INFINITY,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Queue a message. Its bytes are accounted immediately.
    pub fn send(&mut self, message: Message) {
        let stats = self.report.kinds.entry(message.kind()).or_default();
        stats.sent += 1;
        stats.bytes += message.size_bytes() as u64;
        if self.cfg.drop_probability > 0.0 && self.rng.random::<f64>() < self.cfg.drop_probability {
            stats.dropped += 1;
            return;
        }
        self.queue.push_back(InFlight {
            deliver_after: message.sent_at + self.cfg.latency,
            expires_at: message.sent_at + self.cfg.ttl,
            message,
        });
    }

    /// Move every due message whose endpoints are within range into the
    /// receiver's mailbox; discard messages past their TTL.
    pub fn step(&mut self, now: f64, positions: &BTreeMap<RobotId, (f64, f64)>) -> StepReport {
        debug_assert!(now >= self.now, "network time must not go backwards");
        self.now = now;
        let mut report = StepReport::default();
        let mut kept = VecDeque::with_capacity(self.queue.len());
        while let Some(item) = self.queue.pop_front() {
            let m = &item.message;
            let in_range = match (positions.get(&m.sender), positions.get(&m.receiver)) {
                (Some(a), Some(b)) => (a.0 - b.0).hypot(a.1 - b.1) <= self.cfg.comm_range,
                _ => false,
            };
            if item.deliver_after <= now && in_range {
                self.report.kinds.entry(m.kind()).or_default().delivered += 1;
                report.delivered += 1;
                self.mailboxes
                    .entry(m.receiver)
                    .or_default()
                    .push(item.message);
            } else if now > item.expires_at {
                self.report.kinds.entry(m.kind()).or_default().expired += 1;
                report.expired += 1;
            } else {
                kept.push_back(item);
            }
        }
        self.queue = kept;
        report
    }

    /// Take every delivered message addressed to `robot`, in delivery order.
    pub fn receive(&mut self, robot: RobotId) -> Vec<Message> {
        self.mailboxes.remove(&robot).unwrap_or_default()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn account(&self) -> &CommReport {
        &self.report
    }
}
