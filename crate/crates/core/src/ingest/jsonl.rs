use std::io::{BufRead, Write};
use std::net::Ipv4Addr;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{FiveTuple, FlowRecord, PacketView, Protocol};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct WireTuple {
    src: String,
    sport: u16,
    dst: String,
    dport: u16,
    proto: Protocol,
}

#[derive(Serialize, Deserialize)]
struct WirePacket {
    ts: f64,
    dir: i8,
    len: u32,
    payload_hex: String,
}

#[derive(Serialize, Deserialize)]
struct WireFlow {
    id: String,
    five_tuple: WireTuple,
    label: Option<usize>,
    packets: Vec<WirePacket>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlowReadStats {
    pub flows: usize,
    pub empty_dropped: usize,
}

/// One JSON object per line, fields in fixed order.
pub fn write_flows_jsonl<W: Write>(mut out: W, flows: &[FlowRecord]) -> Result<()> {
    for f in flows {
        let wire = WireFlow {
            id: f.id.clone(),
            five_tuple: WireTuple {
                src: f.key.src_addr.to_string(),
                sport: f.key.src_port,
                dst: f.key.dst_addr.to_string(),
                dport: f.key.dst_port,
                proto: f.key.protocol,
            },
            label: f.label,
            packets: f
                .packets
                .iter()
                .map(|p| WirePacket {
                    ts: p.timestamp,
                    dir: p.direction,
                    len: p.length,
                    payload_hex: hex::encode(&p.payload_prefix),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &wire)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads flows, dropping records without packets.
pub fn read_flows_jsonl<R: BufRead>(input: R) -> Result<(Vec<FlowRecord>, FlowReadStats)> {
    let mut flows = Vec::new();
    let mut stats = FlowReadStats::default();
    let mut offset = 0u64;
    for line in input.lines() {
        let line = line?;
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            offset: line_offset,
            message,
        };
        let wire: WireFlow = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let addr = |s: &str| s.parse::<Ipv4Addr>().map_err(|e| bad(format!("address {s:?}: {e}")));
        let key = FiveTuple {
            src_addr: addr(&wire.five_tuple.src)?,
            dst_addr: addr(&wire.five_tuple.dst)?,
            src_port: wire.five_tuple.sport,
            dst_port: wire.five_tuple.dport,
            protocol: wire.five_tuple.proto,
        };
        let mut packets = Vec::with_capacity(wire.packets.len());
        for p in wire.packets {
            if p.dir != -1 && p.dir != 1 {
                return Err(bad(format!("direction must be -1 or 1, got {}", p.dir)));
            }
            let payload_prefix = hex::decode(&p.payload_hex).map_err(|e| bad(format!("payload_hex: {e}")))?;
            packets.push(PacketView {
                timestamp: p.ts,
                direction: p.dir,
                length: p.len,
                payload_prefix,
            });
        }
        if packets.is_empty() {
            warn!("flow {} has no packets; dropped", wire.id);
            stats.empty_dropped += 1;
            continue;
        }
        flows.push(FlowRecord {
            id: wire.id,
            key,
            packets,
            label: wire.label,
        });
    }
    stats.flows = flows.len();
    Ok((flows, stats))
}
