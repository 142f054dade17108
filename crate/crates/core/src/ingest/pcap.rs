//! Classic libpcap reader (Ethernet → IPv4 → TCP/UDP) and flow grouping.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::net::Ipv4Addr;
use std::path::Path;

use log::warn;

use super::{FiveTuple, FlowRecord, PacketView, Protocol, CLIENT_TO_SERVER, SERVER_TO_CLIENT};
use crate::error::{Error, Result};

const MAGIC_USEC: u32 = 0xa1b2_c3d4;
const MAGIC_NSEC: u32 = 0xa1b2_3c4d;
const LINKTYPE_ETHERNET: u32 = 1;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParseLimits {
    /// Packets kept per flow.
    pub n: usize,
    /// Payload bytes kept per packet.
    pub m: usize,
    /// Seconds of silence that end a flow.
    pub idle_timeout: f64,
}

impl Default for ParseLimits {
    fn default() -> Self {
        ParseLimits {
            n: 40,
            m: 16,
            idle_timeout: 64.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaptureStats {
    pub records: usize,
    pub packets: usize,
    /// Frames that are not Ethernet/IPv4/TCP-or-UDP, or are non-first fragments.
    pub skipped_frames: usize,
    /// Records cut short by end of file, or frames too short to decode.
    pub truncated_records: usize,
}

#[derive(Clone, Debug)]
pub struct ParsedCapture {
    pub flows: Vec<FlowRecord>,
    pub stats: CaptureStats,
}

pub fn parse_capture(path: &Path, limits: &ParseLimits) -> Result<ParsedCapture> {
    let bytes = fs::read(path)?;
    parse_capture_bytes(&bytes, limits)
}

struct Decoded {
    ts: f64,
    src: (Ipv4Addr, u16),
    dst: (Ipv4Addr, u16),
    protocol: Protocol,
    length: u32,
    payload: Vec<u8>,
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        let arr = [b[0], b[1], b[2], b[3]];
        match self {
            Endian::Little => u32::from_le_bytes(arr),
            Endian::Big => u32::from_be_bytes(arr),
        }
    }
}

pub fn parse_capture_bytes(bytes: &[u8], limits: &ParseLimits) -> Result<ParsedCapture> {
    if limits.n == 0 || limits.m == 0 {
        return Err(Error::config("packet and byte caps must be at least 1"));
    }
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            message: "file shorter than the pcap global header".into(),
        });
    }
    let le = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let be = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (endian, nanos) = match (le, be) {
        (MAGIC_USEC, _) => (Endian::Little, false),
        (MAGIC_NSEC, _) => (Endian::Little, true),
        (_, MAGIC_USEC) => (Endian::Big, false),
        (_, MAGIC_NSEC) => (Endian::Big, true),
        _ => {
            return Err(Error::Parse {
                offset: 0,
                message: format!("unrecognized pcap magic {le:#010x}"),
            })
        }
    };
    let link = endian.u32(&bytes[20..24]);
    if link != LINKTYPE_ETHERNET {
        return Err(Error::Parse {
            offset: 20,
            message: format!("unsupported link type {link}, expected Ethernet"),
        });
    }

    let mut stats = CaptureStats::default();
    let mut decoded = Vec::new();
    let mut offset = GLOBAL_HEADER_LEN;
    while offset < bytes.len() {
        if bytes.len() - offset < RECORD_HEADER_LEN {
            warn!("truncated record header at byte {offset}");
            stats.truncated_records += 1;
            break;
        }
        let hdr = &bytes[offset..offset + RECORD_HEADER_LEN];
        let ts_sec = endian.u32(&hdr[0..4]) as f64;
        let ts_frac = endian.u32(&hdr[4..8]) as f64;
        let incl = endian.u32(&hdr[8..12]) as usize;
        let orig = endian.u32(&hdr[12..16]);
        let start = offset + RECORD_HEADER_LEN;
        if bytes.len() - start < incl {
            warn!("record at byte {offset} claims {incl} bytes past end of file");
            stats.truncated_records += 1;
            break;
        }
        stats.records += 1;
        let ts = ts_sec + ts_frac / if nanos { 1e9 } else { 1e6 };
        let frame = &bytes[start..start + incl];
        match decode_frame(frame, limits.m) {
            FrameResult::Packet(mut p) => {
                p.ts = ts;
                // Captured length stands in when the original length is absent.
                p.length = if orig > 0 { orig } else { incl as u32 };
                decoded.push(p);
            }
            FrameResult::Skip => stats.skipped_frames += 1,
            FrameResult::Short => stats.truncated_records += 1,
        }
        offset = start + incl;
    }
    stats.packets = decoded.len();
    Ok(ParsedCapture {
        flows: group_flows(decoded, limits),
        stats,
    })
}

enum FrameResult {
    Packet(Decoded),
    Skip,
    Short,
}

fn decode_frame(frame: &[u8], m: usize) -> FrameResult {
    let mut pos = 12;
    if frame.len() < 14 {
        return FrameResult::Short;
    }
    let mut ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    while ethertype == 0x8100 || ethertype == 0x88a8 {
        pos += 4;
        if frame.len() < pos + 2 {
            return FrameResult::Short;
        }
        ethertype = u16::from_be_bytes([frame[pos], frame[pos + 1]]);
    }
    if ethertype != 0x0800 {
        return FrameResult::Skip;
    }
    let ip = &frame[pos + 2..];
    if ip.len() < 20 {
        return FrameResult::Short;
    }
    if ip[0] >> 4 != 4 {
        return FrameResult::Skip;
    }
    let ihl = ((ip[0] & 0x0f) as usize) * 4;
    let total_len = u16::from_be_bytes([ip[2], ip[3]]) as usize;
    let frag_offset = u16::from_be_bytes([ip[6], ip[7]]) & 0x1fff;
    if ihl < 20 || frag_offset != 0 {
        return FrameResult::Skip;
    }
    let protocol = match ip[9] {
        6 => Protocol::Tcp,
        17 => Protocol::Udp,
        _ => return FrameResult::Skip,
    };
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    // Ethernet padding can follow the datagram; trust the IP length when it fits.
    let ip_end = if total_len >= ihl { total_len.min(ip.len()) } else { ip.len() };
    if ip_end < ihl {
        return FrameResult::Short;
    }
    let l4 = &ip[ihl..ip_end];
    let header_len = match protocol {
        Protocol::Tcp => {
            if l4.len() < 20 {
                return FrameResult::Short;
            }
            ((l4[12] >> 4) as usize) * 4
        }
        Protocol::Udp => 8,
    };
    if l4.len() < header_len || header_len < 8 {
        return FrameResult::Short;
    }
    let sport = u16::from_be_bytes([l4[0], l4[1]]);
    let dport = u16::from_be_bytes([l4[2], l4[3]]);
    let payload = &l4[header_len..];
    FrameResult::Packet(Decoded {
        ts: 0.0,
        src: (src_ip, sport),
        dst: (dst_ip, dport),
        protocol,
        length: 0,
        payload: payload[..payload.len().min(m)].to_vec(),
    })
}

struct OpenFlow {
    record: FlowRecord,
    last_ts: f64,
}

fn group_flows(mut packets: Vec<Decoded>, limits: &ParseLimits) -> Vec<FlowRecord> {
    // Stable: equal timestamps keep capture order.
    packets.sort_by(|a, b| a.ts.total_cmp(&b.ts));

    let mut open: HashMap<FiveTuple, OpenFlow> = HashMap::new();
    let mut occurrences: HashMap<FiveTuple, usize> = HashMap::new();
    // Creation sequence numbers keep output order independent of hashing.
    let mut seq = 0usize;
    let mut open_seq: HashMap<FiveTuple, usize> = HashMap::new();
    let mut closed: Vec<(usize, FlowRecord)> = Vec::new();

    for p in packets {
        let key = FiveTuple {
            src_addr: p.src.0,
            src_port: p.src.1,
            dst_addr: p.dst.0,
            dst_port: p.dst.1,
            protocol: p.protocol,
        };
        let expired = open
            .get(&key)
            .is_some_and(|f| p.ts - f.last_ts > limits.idle_timeout);
        if expired {
            let old = open.remove(&key).expect("checked above");
            let s = open_seq.remove(&key).expect("tracked with open");
            closed.push((s, old.record));
        }
        let flow = open.entry(key).or_insert_with(|| {
            let count = occurrences.entry(key).or_insert(0);
            let id = format!("{key}-{count}");
            *count += 1;
            open_seq.insert(key, seq);
            seq += 1;
            OpenFlow {
                record: FlowRecord {
                    id,
                    key,
                    packets: Vec::new(),
                    label: None,
                },
                last_ts: p.ts,
            }
        });
        flow.last_ts = p.ts;
        if flow.record.packets.len() < limits.n {
            let initiator = flow.record.key;
            let direction = if initiator.is_source(p.src.0, p.src.1) {
                CLIENT_TO_SERVER
            } else {
                SERVER_TO_CLIENT
            };
            flow.record.packets.push(PacketView {
                timestamp: p.ts,
                direction,
                length: p.length,
                payload_prefix: p.payload,
            });
        }
    }
    for (key, flow) in open {
        let s = open_seq[&key];
        closed.push((s, flow.record));
    }
    closed.sort_by_key(|(s, _)| *s);
    closed.into_iter().map(|(_, f)| f).collect()
}

/// A synthetic packet for [`write_pcap`].
#[derive(Clone, Debug)]
pub struct PcapPacket {
    pub timestamp: f64,
    pub src: (Ipv4Addr, u16),
    pub dst: (Ipv4Addr, u16),
    pub protocol: Protocol,
    pub payload: Vec<u8>,
}

/// Writes a little-endian microsecond pcap of Ethernet/IPv4 frames.
pub fn write_pcap<W: Write>(mut out: W, packets: &[PcapPacket]) -> Result<()> {
    out.write_all(&MAGIC_USEC.to_le_bytes())?;
    out.write_all(&2u16.to_le_bytes())?;
    out.write_all(&4u16.to_le_bytes())?;
    out.write_all(&0i32.to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    out.write_all(&65535u32.to_le_bytes())?;
    out.write_all(&LINKTYPE_ETHERNET.to_le_bytes())?;
    for p in packets {
        let frame = build_frame(p);
        let secs = p.timestamp.floor();
        let micros = ((p.timestamp - secs) * 1e6).round() as u32;
        out.write_all(&(secs as u32).to_le_bytes())?;
        out.write_all(&micros.to_le_bytes())?;
        out.write_all(&(frame.len() as u32).to_le_bytes())?;
        out.write_all(&(frame.len() as u32).to_le_bytes())?;
        out.write_all(&frame)?;
    }
    Ok(())
}

fn build_frame(p: &PcapPacket) -> Vec<u8> {
    let l4_header = match p.protocol {
        Protocol::Tcp => 20,
        Protocol::Udp => 8,
    };
    let ip_total = 20 + l4_header + p.payload.len();
    let mut f = Vec::with_capacity(14 + ip_total);
    f.extend_from_slice(&[0x02, 0, 0, 0, 0, 2, 0x02, 0, 0, 0, 0, 1, 0x08, 0x00]);
    f.extend_from_slice(&[0x45, 0, (ip_total >> 8) as u8, ip_total as u8, 0, 0, 0x40, 0, 64]);
    f.push(match p.protocol {
        Protocol::Tcp => 6,
        Protocol::Udp => 17,
    });
    f.extend_from_slice(&[0, 0]);
    f.extend_from_slice(&p.src.0.octets());
    f.extend_from_slice(&p.dst.0.octets());
    f.extend_from_slice(&p.src.1.to_be_bytes());
    f.extend_from_slice(&p.dst.1.to_be_bytes());
    match p.protocol {
        Protocol::Tcp => {
            f.extend_from_slice(&[0, 0, 0, 1, 0, 0, 0, 0, 0x50, 0x18, 0xff, 0xff, 0, 0, 0, 0]);
        }
        Protocol::Udp => {
            let len = (8 + p.payload.len()) as u16;
            f.extend_from_slice(&len.to_be_bytes());
            f.extend_from_slice(&[0, 0]);
        }
    }
    f.extend_from_slice(&p.payload);
    f
}
