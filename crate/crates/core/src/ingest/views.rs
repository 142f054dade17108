use std::ops::Range;

use super::FlowRecord;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LengthSequence {
    pub values: Vec<i64>,
}

/// Row-major `n × m` byte matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PayloadMatrix {
    pub n: usize,
    pub m: usize,
    pub values: Vec<u8>,
}

impl PayloadMatrix {
    pub fn row(&self, i: usize) -> &[u8] {
        &self.values[i * self.m..(i + 1) * self.m]
    }
}

/// Traffic interaction graph over the first packets of a flow.
#[derive(Clone, Debug, PartialEq)]
pub struct Tig {
    pub node_count: usize,
    pub adjacency: Vec<Vec<u8>>,
    /// Per node: signed length, direction sign.
    pub features: Vec<[f64; 2]>,
    /// Maximal runs of equal direction, 0-based node ranges.
    pub layers: Vec<Range<usize>>,
}

impl Tig {
    /// Undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.node_count {
            for j in i + 1..self.node_count {
                if self.adjacency[i][j] == 1 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

pub fn flow_to_length_sequence(flow: &FlowRecord, n: usize) -> LengthSequence {
    let mut values = vec![0i64; n];
    for (slot, p) in values.iter_mut().zip(&flow.packets) {
        *slot = p.signed_length();
    }
    LengthSequence { values }
}

pub fn flow_to_payload_matrix(flow: &FlowRecord, n: usize, m: usize) -> PayloadMatrix {
    let mut values = vec![0u8; n * m];
    for (i, p) in flow.packets.iter().take(n).enumerate() {
        for (j, &b) in p.payload_prefix.iter().take(m).enumerate() {
            values[i * m + j] = b;
        }
    }
    PayloadMatrix { n, m, values }
}

pub fn flow_to_tig(flow: &FlowRecord, n: usize) -> Tig {
    let packets = &flow.packets[..flow.packets.len().min(n)];
    let count = packets.len();
    let features = packets
        .iter()
        .map(|p| [p.signed_length() as f64, p.direction as f64])
        .collect();

    let mut layers: Vec<Range<usize>> = Vec::new();
    for (i, p) in packets.iter().enumerate() {
        match layers.last_mut() {
            Some(layer) if packets[layer.start].direction == p.direction => layer.end = i + 1,
            _ => layers.push(i..i + 1),
        }
    }

    // Within-layer chains plus last-of-layer to first-of-next: always the
    // temporal path 0-1-...-(count-1).
    let mut adjacency = vec![vec![0u8; count]; count];
    for layer in &layers {
        for i in layer.start..layer.end.saturating_sub(1) {
            adjacency[i][i + 1] = 1;
            adjacency[i + 1][i] = 1;
        }
    }
    for pair in layers.windows(2) {
        let (a, b) = (pair[0].end - 1, pair[1].start);
        adjacency[a][b] = 1;
        adjacency[b][a] = 1;
    }

    Tig {
        node_count: count,
        adjacency,
        features,
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{FiveTuple, PacketView, Protocol};
    use proptest::prelude::*;
    use std::net::Ipv4Addr;

    fn flow(packets: &[(i8, u32, &[u8])]) -> FlowRecord {
        FlowRecord {
            id: "t".into(),
            key: FiveTuple {
                src_addr: Ipv4Addr::new(1, 1, 1, 1),
                dst_addr: Ipv4Addr::new(2, 2, 2, 2),
                src_port: 1,
                dst_port: 2,
                protocol: Protocol::Tcp,
            },
            packets: packets
                .iter()
                .enumerate()
                .map(|(i, &(d, l, p))| PacketView {
                    timestamp: i as f64,
                    direction: d,
                    length: l,
                    payload_prefix: p.to_vec(),
                })
                .collect(),
            label: None,
        }
    }

    #[test]
    fn length_sequence_examples() {
        let f = flow(&[(-1, 60, b""), (1, 1500, b""), (-1, 40, b"")]);
        assert_eq!(flow_to_length_sequence(&f, 5).values, vec![-60, 1500, -40, 0, 0]);
        assert_eq!(flow_to_length_sequence(&f, 2).values, vec![-60, 1500]);
        let single = flow(&[(1, 64, b"")]);
        assert_eq!(flow_to_length_sequence(&single, 2).values, vec![64, 0]);
    }

    #[test]
    fn payload_matrix_examples() {
        let f = flow(&[(-1, 60, &[0x41, 0x42])]);
        assert_eq!(flow_to_payload_matrix(&f, 1, 4).values, vec![65, 66, 0, 0]);
        let ack = flow(&[(-1, 60, b"")]);
        assert_eq!(flow_to_payload_matrix(&ack, 1, 4).values, vec![0; 4]);
        let m = flow_to_payload_matrix(&f, 3, 4);
        assert_eq!(m.row(1), &[0; 4]);
        assert_eq!(m.row(2), &[0; 4]);
    }

    #[test]
    fn tig_layers_and_edges() {
        let f = flow(&[(-1, 1, b""), (-1, 1, b""), (1, 1, b""), (-1, 1, b"")]);
        let t = flow_to_tig(&f, 40);
        assert_eq!(t.layers, vec![0..2, 2..3, 3..4]);
        assert_eq!(t.edges(), vec![(0, 1), (1, 2), (2, 3)]);

        let single = flow_to_tig(&flow(&[(1, 5, b"")]), 40);
        assert_eq!((single.node_count, single.edges().len(), single.layers.len()), (1, 0, 1));

        let two = flow_to_tig(&flow(&[(-1, 60, b""), (1, 1500, b"")]), 40);
        assert_eq!(two.features, vec![[-60.0, -1.0], [1500.0, 1.0]]);
        assert_eq!(two.edges(), vec![(0, 1)]);
    }

    /// Independent edge construction straight from the rule, over layer lists.
    fn oracle_edges(dirs: &[i8]) -> Vec<(usize, usize)> {
        let mut layers: Vec<Vec<usize>> = Vec::new();
        for (i, d) in dirs.iter().enumerate() {
            if i > 0 && dirs[i - 1] == *d {
                layers.last_mut().unwrap().push(i);
            } else {
                layers.push(vec![i]);
            }
        }
        let mut edges = Vec::new();
        for layer in &layers {
            for w in layer.windows(2) {
                edges.push((w[0], w[1]));
            }
        }
        for w in layers.windows(2) {
            edges.push((*w[0].last().unwrap(), w[1][0]));
        }
        edges.sort();
        edges
    }

    proptest! {
        #[test]
        fn view_shapes_and_layer_partition(
            dirs in prop::collection::vec(prop::bool::ANY, 1..60),
            n in 1usize..50,
            m in 1usize..20,
        ) {
            let packets: Vec<(i8, u32, &[u8])> = dirs
                .iter()
                .map(|&b| (if b { 1 } else { -1 }, 100, &b"abcdefghijklmnopqrstuvwxyz"[..]))
                .collect();
            let f = flow(&packets);
            prop_assert_eq!(flow_to_length_sequence(&f, n).values.len(), n);
            prop_assert_eq!(flow_to_payload_matrix(&f, n, m).values.len(), n * m);
            let t = flow_to_tig(&f, n);
            prop_assert!(t.node_count <= n);
            let flat: Vec<usize> = t.layers.iter().flat_map(|r| r.clone()).collect();
            prop_assert_eq!(flat, (0..t.node_count).collect::<Vec<_>>());
            for (k, layer) in t.layers.iter().enumerate() {
                let d = t.features[layer.start][1];
                prop_assert!(layer.clone().all(|i| t.features[i][1] == d));
                if k > 0 {
                    prop_assert_ne!(t.features[t.layers[k - 1].start][1], d);
                }
            }
            for i in 0..t.node_count {
                prop_assert_eq!(t.adjacency[i][i], 0);
                for j in 0..t.node_count {
                    prop_assert_eq!(t.adjacency[i][j], t.adjacency[j][i]);
                }
            }
            let kept: Vec<i8> = packets.iter().take(n).map(|p| p.0).collect();
            prop_assert_eq!(t.edges(), oracle_edges(&kept));
        }
    }
}
