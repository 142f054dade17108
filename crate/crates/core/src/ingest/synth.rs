//! Labeled synthetic flows with per-class length, byte and direction laws.

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::{FiveTuple, FlowRecord, PacketView, Protocol};
use crate::error::{Error, Result};
use crate::tensor::Rng;

const MIN_FRAME: u32 = 54;
const MAX_FRAME: u32 = 1514;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Fixed { value: u32 },
    Uniform { min: u32, max: u32 },
    Normal { mean: f64, std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ByteDist {
    Zero,
    Constant { value: u8 },
    Uniform { min: u8, max: u8 },
    /// Fixed leading bytes followed by uniform noise.
    Header { prefix: Vec<u8> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DirectionPattern {
    Client,
    Server,
    Alternating,
    Random { p_client: f64 },
    Cycle { pattern: Vec<i8> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub count: usize,
    pub packets_min: usize,
    pub packets_max: usize,
    pub length: LengthDist,
    pub payload: ByteDist,
    pub direction: DirectionPattern,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default = "default_port")]
    pub server_port: u16,
    /// Mean inter-packet gap in seconds.
    #[serde(default = "default_gap")]
    pub mean_gap: f64,
}

fn default_protocol() -> Protocol {
    Protocol::Tcp
}

fn default_port() -> u16 {
    443
}

fn default_gap() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<ClassSpec>,
    pub seed: u64,
    /// Flow start times are spread over `[0, time_span)` seconds.
    #[serde(default = "default_span")]
    pub time_span: f64,
    /// Payload bytes stored per packet.
    #[serde(default = "default_max_payload")]
    pub max_payload: usize,
}

fn default_span() -> f64 {
    600.0
}

fn default_max_payload() -> usize {
    64
}

impl SynthSpec {
    /// Two classes that differ in every view: sizes, bytes and direction rhythm.
    pub fn separable(per_class: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            classes: vec![
                ClassSpec {
                    count: per_class,
                    packets_min: 10,
                    packets_max: 40,
                    length: LengthDist::Uniform { min: 60, max: 200 },
                    payload: ByteDist::Header {
                        prefix: vec![0x16, 0x03, 0x01],
                    },
                    direction: DirectionPattern::Alternating,
                    protocol: Protocol::Tcp,
                    server_port: 443,
                    mean_gap: 0.05,
                },
                ClassSpec {
                    count: per_class,
                    packets_min: 10,
                    packets_max: 40,
                    length: LengthDist::Uniform { min: 900, max: 1500 },
                    payload: ByteDist::Uniform { min: 0, max: 64 },
                    direction: DirectionPattern::Cycle {
                        pattern: vec![-1, 1, 1, 1],
                    },
                    protocol: Protocol::Tcp,
                    server_port: 8080,
                    mean_gap: 0.01,
                },
            ],
            seed,
            time_span: default_span(),
            max_payload: default_max_payload(),
        }
    }

    /// `classes` classes with overlapping length and byte ranges; `overlap`
    /// in `[0, 1]` controls how much the class laws coincide.
    pub fn overlapping(classes: usize, per_class: usize, overlap: f64, seed: u64) -> SynthSpec {
        let overlap = overlap.clamp(0.0, 1.0);
        let specs = (0..classes)
            .map(|c| {
                let center = 300.0 + 250.0 * c as f64;
                let spread = 60.0 + 300.0 * overlap;
                let p_client = 0.7 - 0.4 * (c as f64 / (classes.max(2) - 1) as f64) * (1.0 - overlap);
                let byte_lo = (40 * c) as f64 * (1.0 - overlap);
                ClassSpec {
                    count: per_class,
                    packets_min: 8,
                    packets_max: 40,
                    length: LengthDist::Normal {
                        mean: center,
                        std: spread,
                    },
                    payload: ByteDist::Uniform {
                        min: byte_lo as u8,
                        max: (byte_lo + 80.0 + 100.0 * overlap).min(255.0) as u8,
                    },
                    direction: DirectionPattern::Random { p_client },
                    protocol: Protocol::Tcp,
                    server_port: 443,
                    mean_gap: 0.05,
                }
            })
            .collect();
        SynthSpec {
            classes: specs,
            seed,
            time_span: default_span(),
            max_payload: default_max_payload(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::config("synthetic data needs at least two classes"));
        }
        if !(self.time_span > 0.0) {
            return Err(Error::config("time_span must be positive"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.count == 0 {
                return Err(Error::config(format!("class {i}: count must be at least 1")));
            }
            if c.packets_min == 0 || c.packets_min > c.packets_max {
                return Err(Error::config(format!("class {i}: need 1 <= packets_min <= packets_max")));
            }
            if !(c.mean_gap >= 0.0) {
                return Err(Error::config(format!("class {i}: mean_gap must be non-negative")));
            }
            match &c.length {
                LengthDist::Uniform { min, max } if min > max => {
                    return Err(Error::config(format!("class {i}: length min exceeds max")))
                }
                LengthDist::Normal { std, .. } if !(*std >= 0.0) => {
                    return Err(Error::config(format!("class {i}: length std must be non-negative")))
                }
                _ => {}
            }
            match &c.payload {
                ByteDist::Uniform { min, max } if min > max => {
                    return Err(Error::config(format!("class {i}: byte min exceeds max")))
                }
                _ => {}
            }
            match &c.direction {
                DirectionPattern::Random { p_client } if !(0.0..=1.0).contains(p_client) => {
                    return Err(Error::config(format!("class {i}: p_client outside [0, 1]")))
                }
                DirectionPattern::Cycle { pattern }
                    if pattern.is_empty() || pattern.iter().any(|d| *d != -1 && *d != 1) =>
                {
                    return Err(Error::config(format!("class {i}: cycle must be a non-empty list of -1/1")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn sample_length(dist: &LengthDist, rng: &mut Rng) -> u32 {
    match *dist {
        LengthDist::Fixed { value } => value,
        LengthDist::Uniform { min, max } => rng.int_range(min as i64, max as i64) as u32,
        LengthDist::Normal { mean, std } => {
            rng.normal(mean, std).round().clamp(MIN_FRAME as f64, MAX_FRAME as f64) as u32
        }
    }
}

fn sample_bytes(dist: &ByteDist, len: usize, rng: &mut Rng) -> Vec<u8> {
    match dist {
        ByteDist::Zero => vec![0; len],
        ByteDist::Constant { value } => vec![*value; len],
        ByteDist::Uniform { min, max } => (0..len)
            .map(|_| rng.int_range(*min as i64, *max as i64) as u8)
            .collect(),
        ByteDist::Header { prefix } => (0..len)
            .map(|j| match prefix.get(j) {
                Some(b) => *b,
                None => rng.int_range(0, 255) as u8,
            })
            .collect(),
    }
}

fn direction_at(pattern: &DirectionPattern, i: usize, rng: &mut Rng) -> i8 {
    match pattern {
        DirectionPattern::Client => -1,
        DirectionPattern::Server => 1,
        DirectionPattern::Alternating => {
            if i.is_multiple_of(2) {
                -1
            } else {
                1
            }
        }
        DirectionPattern::Random { p_client } => {
            if rng.bernoulli(*p_client) {
                -1
            } else {
                1
            }
        }
        DirectionPattern::Cycle { pattern } => pattern[i % pattern.len()],
    }
}

/// Flows ordered by start time, labeled with their class index.
pub fn generate_synthetic_flows(spec: &SynthSpec) -> Result<Vec<FlowRecord>> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut flows = Vec::new();
    for (label, class) in spec.classes.iter().enumerate() {
        for i in 0..class.count {
            let count = rng.int_range(class.packets_min as i64, class.packets_max as i64) as usize;
            let key = FiveTuple {
                src_addr: Ipv4Addr::from(0x0a00_0000 | (rng.next_u64() as u32 & 0x00ff_ffff)),
                dst_addr: Ipv4Addr::new(192, 168, label as u8, 1 + (i % 250) as u8),
                src_port: rng.int_range(1024, 65535) as u16,
                dst_port: class.server_port,
                protocol: class.protocol,
            };
            let mut t = rng.uniform_range(0.0, spec.time_span);
            let mut packets = Vec::with_capacity(count);
            for k in 0..count {
                let length = sample_length(&class.length, &mut rng);
                let direction = direction_at(&class.direction, k, &mut rng);
                let payload_len = (length.saturating_sub(MIN_FRAME) as usize).min(spec.max_payload);
                let payload_prefix = sample_bytes(&class.payload, payload_len, &mut rng);
                packets.push(PacketView {
                    timestamp: (t * 1e6).round() / 1e6,
                    direction,
                    length,
                    payload_prefix,
                });
                t += rng.uniform_range(0.0, 2.0 * class.mean_gap);
            }
            flows.push(FlowRecord {
                id: format!("syn-{label}-{i}"),
                key,
                packets,
                label: Some(label),
            });
        }
    }
    flows.sort_by(|a, b| a.start_time().total_cmp(&b.start_time()));
    Ok(flows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{flow_to_length_sequence, write_flows_jsonl};

    fn fixed_class(count: usize, direction: DirectionPattern) -> ClassSpec {
        ClassSpec {
            count,
            packets_min: 3,
            packets_max: 12,
            length: LengthDist::Fixed { value: 100 },
            payload: ByteDist::Zero,
            direction,
            protocol: Protocol::Udp,
            server_port: 53,
            mean_gap: 0.1,
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let spec = SynthSpec {
            classes: vec![fixed_class(10, DirectionPattern::Client), fixed_class(10, DirectionPattern::Alternating)],
            seed: 7,
            time_span: 60.0,
            max_payload: 16,
        };
        let dump = |flows: &[FlowRecord]| {
            let mut buf = Vec::new();
            write_flows_jsonl(&mut buf, flows).unwrap();
            buf
        };
        let a = generate_synthetic_flows(&spec).unwrap();
        let b = generate_synthetic_flows(&spec).unwrap();
        assert_eq!(dump(&a), dump(&b));
        assert_eq!(a.len(), 20);
        let mut other = spec.clone();
        other.seed = 8;
        assert_ne!(dump(&a), dump(&generate_synthetic_flows(&other).unwrap()));
    }

    #[test]
    fn fixed_client_class_lengths() {
        let spec = SynthSpec {
            classes: vec![fixed_class(5, DirectionPattern::Client), fixed_class(5, DirectionPattern::Server)],
            seed: 1,
            time_span: 10.0,
            max_payload: 16,
        };
        for f in generate_synthetic_flows(&spec).unwrap() {
            let seq = flow_to_length_sequence(&f, 40);
            let allowed = if f.label == Some(0) { -100 } else { 100 };
            assert!(seq.values.iter().all(|&v| v == allowed || v == 0));
            assert!(f.packets.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        }
    }

    #[test]
    fn bad_specs_are_config_errors() {
        let one = SynthSpec {
            classes: vec![fixed_class(5, DirectionPattern::Client)],
            seed: 1,
            time_span: 10.0,
            max_payload: 16,
        };
        assert!(matches!(generate_synthetic_flows(&one), Err(Error::Config(_))));
        let mut zero = SynthSpec::separable(3, 1);
        zero.classes[1].count = 0;
        assert!(matches!(generate_synthetic_flows(&zero), Err(Error::Config(_))));
    }

    #[test]
    fn presets_generate() {
        let flows = generate_synthetic_flows(&SynthSpec::separable(20, 3)).unwrap();
        assert_eq!(flows.len(), 40);
        let flows = generate_synthetic_flows(&SynthSpec::overlapping(3, 10, 0.5, 3)).unwrap();
        assert_eq!(flows.iter().filter(|f| f.label == Some(2)).count(), 10);
    }
}
