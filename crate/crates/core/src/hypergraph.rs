//! KNN flow hypergraphs: incidence, weights and degrees.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Csr, Tensor};

/// Binary node×hyperedge membership, stored per hyperedge as ascending
/// node indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Incidence {
    nodes: usize,
    edges: Vec<Vec<usize>>,
}

impl Incidence {
    pub fn new(nodes: usize, mut edges: Vec<Vec<usize>>) -> Result<Incidence> {
        for (j, e) in edges.iter_mut().enumerate() {
            e.sort_unstable();
            e.dedup();
            if e.last().is_some_and(|&i| i >= nodes) {
                return Err(Error::shape(format!("hyperedge {j} references a node beyond {nodes}")));
            }
        }
        Ok(Incidence { nodes, edges })
    }

    pub fn from_dense(h: &Tensor) -> Result<Incidence> {
        let (n, e) = h.dims2()?;
        let edges = (0..e)
            .map(|j| (0..n).filter(|&i| h.get(&[i, j]) != 0.0).collect())
            .collect();
        Incidence::new(n, edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn members(&self, edge: usize) -> &[usize] {
        &self.edges[edge]
    }

    pub fn edges(&self) -> &[Vec<usize>] {
        &self.edges
    }

    pub fn nnz(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn contains(&self, node: usize, edge: usize) -> bool {
        self.edges[edge].binary_search(&node).is_ok()
    }

    /// Keeps the memberships for which `keep(node, edge)` is true.
    pub fn retain(&mut self, mut keep: impl FnMut(usize, usize) -> bool) {
        for (j, e) in self.edges.iter_mut().enumerate() {
            e.retain(|&i| keep(i, j));
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut h = Tensor::zeros(&[self.nodes.max(1), self.edges.len().max(1)]);
        let cols = self.edges.len();
        for (j, e) in self.edges.iter().enumerate() {
            for &i in e {
                h.data_mut()[i * cols + j] = 1.0;
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowHypergraph {
    /// N×d node features Z.
    pub node_features: Tensor,
    pub incidence: Incidence,
    /// Diagonal of M.
    pub edge_weights: Vec<f64>,
    /// Diagonal of D_v.
    pub node_degrees: Vec<f64>,
    /// Diagonal of D_e.
    pub edge_degrees: Vec<f64>,
    pub labels: Option<Vec<usize>>,
}

impl FlowHypergraph {
    /// Assembles a hypergraph and derives its degrees.
    pub fn new(node_features: Tensor, incidence: Incidence, edge_weights: Vec<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if node_features.rows() != incidence.num_nodes() {
            return Err(Error::shape(format!(
                "{} feature rows for {} nodes",
                node_features.rows(),
                incidence.num_nodes()
            )));
        }
        if edge_weights.len() != incidence.num_edges() {
            return Err(Error::shape("one weight per hyperedge required"));
        }
        if labels.as_ref().is_some_and(|l| l.len() != incidence.num_nodes()) {
            return Err(Error::shape("one label per node required"));
        }
        let (node_degrees, edge_degrees) = degree_matrices(&incidence, &edge_weights)?;
        Ok(FlowHypergraph {
            node_features,
            incidence,
            edge_weights,
            node_degrees,
            edge_degrees,
            labels,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.incidence.num_nodes()
    }

    pub fn num_edges(&self) -> usize {
        self.incidence.num_edges()
    }

    pub fn recompute_degrees(&mut self) -> Result<()> {
        let (dv, de) = degree_matrices(&self.incidence, &self.edge_weights)?;
        self.node_degrees = dv;
        self.edge_degrees = de;
        Ok(())
    }

    /// `D_e⁻¹ Hᵀ` (E×N) and `D_v⁻¹ H M` (N×E); a zero degree contributes a
    /// zero row instead of a division.
    pub fn propagation_operators(&self) -> Result<(Csr, Csr)> {
        let inv = |d: f64| if d == 0.0 { 0.0 } else { 1.0 / d };
        let mut to_edges = Vec::with_capacity(self.incidence.nnz());
        let mut to_nodes = Vec::with_capacity(self.incidence.nnz());
        for (j, members) in self.incidence.edges().iter().enumerate() {
            for &i in members {
                to_edges.push((j, i, inv(self.edge_degrees[j])));
                to_nodes.push((i, j, inv(self.node_degrees[i]) * self.edge_weights[j]));
            }
        }
        Ok((
            Csr::from_triplets(self.num_edges(), self.num_nodes(), to_edges)?,
            Csr::from_triplets(self.num_nodes(), self.num_edges(), to_nodes)?,
        ))
    }

    /// Relabels nodes so new node `r` is old node `perm[r]`; hyperedges are
    /// reordered the same way.
    pub fn permuted(&self, perm: &[usize]) -> Result<FlowHypergraph> {
        let n = self.num_nodes();
        if perm.len() != n || self.num_edges() != n {
            return Err(Error::shape("permutation needs one hyperedge per node"));
        }
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::shape("not a permutation"));
            }
            inverse[old] = new;
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&o| self.node_features.row(o).to_vec()).collect();
        let edges = perm
            .iter()
            .map(|&o| self.incidence.members(o).iter().map(|&i| inverse[i]).collect())
            .collect();
        FlowHypergraph::new(
            Tensor::from_rows(&rows)?,
            Incidence::new(n, edges)?,
            perm.iter().map(|&o| self.edge_weights[o]).collect(),
            self.labels.as_ref().map(|l| perm.iter().map(|&o| l[o]).collect()),
        )
    }
}

/// `D_v[i] = Σ_j H[i,j]·M[j]`, `D_e[j] = Σ_i H[i,j]`.
pub fn degree_matrices(incidence: &Incidence, edge_weights: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if edge_weights.len() != incidence.num_edges() {
        return Err(Error::shape("one weight per hyperedge required"));
    }
    let mut dv = vec![0.0; incidence.num_nodes()];
    let mut de = Vec::with_capacity(incidence.num_edges());
    for (members, &w) in incidence.edges().iter().zip(edge_weights) {
        for &i in members {
            dv[i] += w;
        }
        de.push(members.len() as f64);
    }
    Ok((dv, de))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One hyperedge per flow: the flow itself (when `include_self`) and its `k`
/// nearest other flows by Euclidean distance, ties to the lower index.
pub fn knn_hyperedges(features: &Tensor, k: usize, include_self: bool) -> Result<Incidence> {
    let (n, _) = features.dims2()?;
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    if n <= k {
        return Err(Error::config(format!("{n} flows cannot supply {k} neighbours each")));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("hypergraph node features".into()));
    }
    let edges = (0..n)
        .into_par_iter()
        .map(|i| {
            let query = features.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(query, features.row(j)), j))
                .collect();
            let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if cand.len() > k {
                cand.select_nth_unstable_by(k - 1, order);
                cand.truncate(k);
            }
            let mut members: Vec<usize> = cand.into_iter().map(|(_, j)| j).collect();
            if include_self {
                members.push(i);
            }
            members
        })
        .collect();
    Incidence::new(n, edges)
}

/// KNN hypergraph with unit hyperedge weights.
pub fn build_flow_hypergraph(features: Tensor, k: usize, include_self: bool, labels: Option<Vec<usize>>) -> Result<FlowHypergraph> {
    let incidence = knn_hyperedges(&features, k, include_self)?;
    let weights = vec![1.0; incidence.num_edges()];
    FlowHypergraph::new(features, incidence, weights, labels)
}

/// Text export: `#nodes N d`, N feature rows, `#edges E`, then one line per
/// hyperedge with its weight followed by member indices.
pub fn write_hypergraph_text<W: Write>(mut out: W, graph: &FlowHypergraph) -> Result<()> {
    let (n, d) = graph.node_features.dims2()?;
    let mut text = format!("#nodes {n} {d}\n");
    for i in 0..n {
        let row: Vec<String> = graph.node_features.row(i).iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    let _ = writeln!(text, "#edges {}", graph.num_edges());
    for (j, members) in graph.incidence.edges().iter().enumerate() {
        let _ = write!(text, "{:?}", graph.edge_weights[j]);
        for i in members {
            let _ = write!(text, " {i}");
        }
        text.push('\n');
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_hypergraph_text<R: BufRead>(input: R) -> Result<FlowHypergraph> {
    let mut lines = input.lines();
    let mut offset = 0u64;
    let mut next = |what: &str| -> Result<(u64, String)> {
        let line = lines.next().ok_or_else(|| Error::format(format!("missing {what}")))??;
        let at = offset;
        offset += line.len() as u64 + 1;
        Ok((at, line))
    };
    let bad = |at: u64, message: String| Error::Parse { offset: at, message };
    let header = |at: u64, line: &str, tag: &str, count: usize| -> Result<Vec<usize>> {
        let mut parts = line.split_whitespace();
        if parts.next() != Some(tag) {
            return Err(bad(at, format!("expected {tag}")));
        }
        let nums: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| bad(at, format!("bad count {p:?}"))))
            .collect::<Result<_>>()?;
        if nums.len() != count {
            return Err(bad(at, format!("{tag} takes {count} numbers")));
        }
        Ok(nums)
    };

    let (at, line) = next("#nodes header")?;
    let nd = header(at, &line, "#nodes", 2)?;
    let (n, d) = (nd[0], nd[1]);
    let mut feats = Vec::with_capacity(n * d);
    for _ in 0..n {
        let (at, line) = next("node row")?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad(at, format!("bad feature {v:?}"))))
            .collect::<Result<_>>()?;
        if row.len() != d {
            return Err(bad(at, format!("expected {d} features, found {}", row.len())));
        }
        feats.extend(row);
    }
    let (at, line) = next("#edges header")?;
    let e = header(at, &line, "#edges", 1)?[0];
    let mut weights = Vec::with_capacity(e);
    let mut edges = Vec::with_capacity(e);
    for _ in 0..e {
        let (at, line) = next("hyperedge row")?;
        let mut parts = line.split_whitespace();
        let w: f64 = parts
            .next()
            .ok_or_else(|| bad(at, "empty hyperedge row".into()))?
            .parse()
            .map_err(|_| bad(at, "bad hyperedge weight".into()))?;
        let members: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| bad(at, format!("bad member {p:?}"))))
            .collect::<Result<_>>()?;
        weights.push(w);
        edges.push(members);
    }
    FlowHypergraph::new(Tensor::new(vec![n, d], feats)?, Incidence::new(n, edges)?, weights, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn points(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Sorts every pair by (distance, index) with a full sort.
    fn brute_force(features: &Tensor, k: usize, include_self: bool) -> Vec<Vec<usize>> {
        let n = features.rows();
        (0..n)
            .map(|i| {
                let mut all: Vec<(f64, usize)> = Vec::new();
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let mut d = 0.0;
                    for c in 0..features.row_len() {
                        let diff = features.row(i)[c] - features.row(j)[c];
                        d += diff * diff;
                    }
                    all.push((d, j));
                }
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut e: Vec<usize> = all[..k].iter().map(|p| p.1).collect();
                if include_self {
                    e.push(i);
                }
                e.sort();
                e
            })
            .collect()
    }

    #[test]
    fn three_flow_example() {
        let g = build_flow_hypergraph(points(&[&[0.0], &[1.0], &[10.0]]), 1, true, None).unwrap();
        assert_eq!(g.incidence.edges(), &[vec![0, 1], vec![0, 1], vec![1, 2]]);
        assert_eq!(g.node_degrees, vec![2.0, 3.0, 1.0]);
        assert_eq!(g.edge_degrees, vec![2.0, 2.0, 2.0]);
        let doubled = degree_matrices(&g.incidence, &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(doubled, (vec![4.0, 6.0, 2.0], vec![2.0, 2.0, 2.0]));
    }

    #[test]
    fn identity_incidence_degrees() {
        let h = Incidence::new(4, (0..4).map(|i| vec![i]).collect()).unwrap();
        assert_eq!(degree_matrices(&h, &[1.0; 4]).unwrap(), (vec![1.0; 4], vec![1.0; 4]));
    }

    #[test]
    fn complete_hyperedges_when_k_is_n_minus_one() {
        let z = Rng::new(1).uniform_tensor(&[6, 3], -1.0, 1.0);
        let h = knn_hyperedges(&z, 5, true).unwrap();
        assert!(h.to_dense().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn too_few_flows_is_config_error() {
        let z = Rng::new(1).uniform_tensor(&[3, 2], -1.0, 1.0);
        assert!(matches!(knn_hyperedges(&z, 3, true), Err(Error::Config(_))));
        assert!(matches!(knn_hyperedges(&z, 0, true), Err(Error::Config(_))));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let z = points(&[&[0.0], &[1.0], &[-1.0], &[1.0]]);
        let h = knn_hyperedges(&z, 1, false).unwrap();
        assert_eq!(h.members(0), &[1]);
        assert_eq!(h.members(1), &[3]);
        assert_eq!(h.members(3), &[1]);
    }

    #[test]
    fn matches_brute_force_on_random_points() {
        let z = Rng::new(42).uniform_tensor(&[200, 16], -1.0, 1.0);
        for k in [1, 3, 5] {
            for include_self in [true, false] {
                let h = knn_hyperedges(&z, k, include_self).unwrap();
                assert_eq!(h.edges(), brute_force(&z, k, include_self).as_slice());
            }
        }
    }

    #[test]
    fn default_k_gives_four_members() {
        let z = Rng::new(5).uniform_tensor(&[30, 8], -1.0, 1.0);
        let g = build_flow_hypergraph(z, 3, true, None).unwrap();
        assert!(g.incidence.edges().iter().all(|e| e.len() == 4));
        assert!((0..30).all(|i| g.incidence.contains(i, i)));
    }

    #[test]
    fn propagation_operators_use_zero_degree_convention() {
        let h = Incidence::new(3, vec![vec![0, 1], vec![]]).unwrap();
        let g = FlowHypergraph::new(Tensor::ones(&[3, 2]), h, vec![2.0, 1.0], None).unwrap();
        let (to_e, to_v) = g.propagation_operators().unwrap();
        assert_eq!(to_e.to_dense().data(), &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(to_v.to_dense().data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn text_round_trip() {
        let z = Rng::new(9).uniform_tensor(&[6, 3], -1.0, 1.0);
        let mut g = build_flow_hypergraph(z, 2, true, None).unwrap();
        g.edge_weights[1] = 0.25;
        g.recompute_degrees().unwrap();
        let mut buf = Vec::new();
        write_hypergraph_text(&mut buf, &g).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("#nodes 6 3\n"));
        assert!(text.contains("#edges 6\n1.0 ") && text.contains("\n0.25 "));
        assert_eq!(read_hypergraph_text(&buf[..]).unwrap(), g);
    }

    #[test]
    fn malformed_text_is_rejected() {
        assert!(read_hypergraph_text("#nodes 1 2\n1.0\n".as_bytes()).is_err());
        assert!(read_hypergraph_text("#edges 1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn unit_weight_degrees_are_row_and_column_sums(seed in 0u64..1000, n in 4usize..30, k in 1usize..4) {
            let z = Rng::new(seed).uniform_tensor(&[n, 3], -1.0, 1.0);
            let g = build_flow_hypergraph(z, k, true, None).unwrap();
            let h = g.incidence.to_dense();
            for i in 0..n {
                let row: f64 = h.row(i).iter().sum();
                prop_assert_eq!(g.node_degrees[i], row);
                prop_assert!(row > 0.0);
            }
            for j in 0..n {
                let col: f64 = (0..n).map(|i| h.get(&[i, j])).sum();
                prop_assert_eq!(g.edge_degrees[j], col);
                prop_assert_eq!(col, (k + 1) as f64);
            }
        }

        #[test]
        fn positive_scaling_keeps_incidence(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let z = Rng::new(seed).uniform_tensor(&[25, 4], -1.0, 1.0);
            let scaled = z.map(|v| v * scale);
            prop_assert_eq!(knn_hyperedges(&z, 3, true).unwrap(), knn_hyperedges(&scaled, 3, true).unwrap());
        }

        #[test]
        fn permuting_flows_gives_isomorphic_hypergraph(seed in 0u64..1000) {
            let z = Rng::new(seed).uniform_tensor(&[12, 3], -1.0, 1.0);
            let mut perm: Vec<usize> = (0..12).collect();
            Rng::new(seed + 1).shuffle(&mut perm);
            let g = build_flow_hypergraph(z.clone(), 3, true, None).unwrap();
            let rows: Vec<Vec<f64>> = perm.iter().map(|&o| z.row(o).to_vec()).collect();
            let gp = build_flow_hypergraph(Tensor::from_rows(&rows).unwrap(), 3, true, None).unwrap();
            prop_assert_eq!(gp, g.permuted(&perm).unwrap());
        }
    }
}
