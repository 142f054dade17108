//! Flow records, capture parsing and the three per-flow views.

mod jsonl;
mod pcap;
mod synth;
mod views;

use std::fmt;
use std::hash::{Hash, Hasher};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

pub use jsonl::{read_flows_jsonl, write_flows_jsonl, FlowReadStats};
pub use pcap::{parse_capture, parse_capture_bytes, write_pcap, CaptureStats, ParseLimits, ParsedCapture, PcapPacket};
pub use synth::{generate_synthetic_flows, ByteDist, ClassSpec, DirectionPattern, LengthDist, SynthSpec};
pub use views::{flow_to_length_sequence, flow_to_payload_matrix, flow_to_tig, LengthSequence, PayloadMatrix, Tig};

/// Client-to-server direction sign.
pub const CLIENT_TO_SERVER: i8 = -1;
/// Server-to-client direction sign.
pub const SERVER_TO_CLIENT: i8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tcp,
    Udp,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Tcp => f.write_str("tcp"),
            Protocol::Udp => f.write_str("udp"),
        }
    }
}

/// Flow key with the initiator as source. Equality and hashing ignore
/// orientation, so `A→B` equals `B→A`.
#[derive(Clone, Copy, Debug)]
pub struct FiveTuple {
    pub src_addr: Ipv4Addr,
    pub dst_addr: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
}

impl FiveTuple {
    pub fn reversed(&self) -> FiveTuple {
        FiveTuple {
            src_addr: self.dst_addr,
            dst_addr: self.src_addr,
            src_port: self.dst_port,
            dst_port: self.src_port,
            protocol: self.protocol,
        }
    }

    fn endpoints(&self) -> (Protocol, (Ipv4Addr, u16), (Ipv4Addr, u16)) {
        let a = (self.src_addr, self.src_port);
        let b = (self.dst_addr, self.dst_port);
        if a <= b {
            (self.protocol, a, b)
        } else {
            (self.protocol, b, a)
        }
    }

    /// True when `addr:port` is this key's source endpoint.
    pub fn is_source(&self, addr: Ipv4Addr, port: u16) -> bool {
        self.src_addr == addr && self.src_port == port
    }

    /// Same orientation as well as same endpoints.
    pub fn same_orientation(&self, other: &FiveTuple) -> bool {
        self.src_addr == other.src_addr
            && self.src_port == other.src_port
            && self.dst_addr == other.dst_addr
            && self.dst_port == other.dst_port
            && self.protocol == other.protocol
    }
}

impl PartialEq for FiveTuple {
    fn eq(&self, other: &Self) -> bool {
        self.endpoints() == other.endpoints()
    }
}

impl Eq for FiveTuple {}

impl Hash for FiveTuple {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.endpoints().hash(state);
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}-{}:{}-{}",
            self.src_addr, self.src_port, self.dst_addr, self.dst_port, self.protocol
        )
    }
}

/// One packet of a flow as seen by the feature views.
#[derive(Clone, Debug, PartialEq)]
pub struct PacketView {
    /// Capture timestamp in seconds.
    pub timestamp: f64,
    /// [`CLIENT_TO_SERVER`] or [`SERVER_TO_CLIENT`].
    pub direction: i8,
    /// On-wire frame length in bytes.
    pub length: u32,
    /// Leading transport payload bytes.
    pub payload_prefix: Vec<u8>,
}

impl PacketView {
    pub fn signed_length(&self) -> i64 {
        self.direction as i64 * self.length as i64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowRecord {
    pub id: String,
    pub key: FiveTuple,
    /// Timestamp-ascending, ties in capture order.
    pub packets: Vec<PacketView>,
    pub label: Option<usize>,
}

impl FlowRecord {
    pub fn start_time(&self) -> f64 {
        self.packets.first().map_or(0.0, |p| p.timestamp)
    }

    /// Copy limited to the first `n` packets and `m` payload bytes each.
    pub fn truncated(&self, n: usize, m: usize) -> FlowRecord {
        FlowRecord {
            id: self.id.clone(),
            key: self.key,
            packets: self
                .packets
                .iter()
                .take(n)
                .map(|p| PacketView {
                    payload_prefix: p.payload_prefix.iter().take(m).copied().collect(),
                    ..p.clone()
                })
                .collect(),
            label: self.label,
        }
    }
}
