//! Two-phase hypergraph convolution with projection and prediction heads.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::FlowHypergraph;
use crate::tensor::nn::{dropout, init_linear, linear, Mode};
use crate::tensor::{Csr, ParameterStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Width of the incoming flow features.
    pub input_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub projection: usize,
    pub head_hidden: usize,
    pub classes: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 512,
            hidden: 128,
            depth: 2,
            projection: 128,
            head_hidden: 128,
            classes: 2,
            dropout: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.input_dim, self.hidden, self.projection, self.head_hidden].contains(&0) {
            return Err(Error::config("encoder widths must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

pub fn init_encoder(store: &mut ParameterStore, cfg: &EncoderConfig, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    let h = cfg.hidden;
    init_linear(store, "encoder.input", cfg.input_dim, h, rng)?;
    for l in 0..cfg.depth {
        store.insert_weight(&format!("encoder.layer{l}.w_e"), h, h, rng)?;
        store.insert_zeros(&format!("encoder.layer{l}.b_e"), &[h])?;
        store.insert_weight(&format!("encoder.layer{l}.w_v"), h, h, rng)?;
        store.insert_zeros(&format!("encoder.layer{l}.b_v"), &[h])?;
    }
    for head in ["head.node", "head.edge"] {
        init_linear(store, &format!("{head}.l1"), h, cfg.projection, rng)?;
        init_linear(store, &format!("{head}.l2"), cfg.projection, cfg.projection, rng)?;
    }
    init_linear(store, "head.pred.l1", h, cfg.head_hidden, rng)?;
    init_linear(store, "head.pred.l2", cfg.head_hidden, cfg.classes, rng)
}

/// Sparse propagation operators of one hypergraph.
#[derive(Clone, Debug)]
pub struct GraphOps {
    /// `D_e⁻¹ Hᵀ`.
    pub to_edges: Arc<Csr>,
    /// `D_v⁻¹ H M`.
    pub to_nodes: Arc<Csr>,
}

impl GraphOps {
    pub fn new(graph: &FlowHypergraph) -> Result<GraphOps> {
        let (to_edges, to_nodes) = graph.propagation_operators()?;
        Ok(GraphOps {
            to_edges: Arc::new(to_edges),
            to_nodes: Arc::new(to_nodes),
        })
    }
}

/// `E = ReLU(D_e⁻¹ Hᵀ V W_e + b_e)`, `V' = ReLU(D_v⁻¹ H M E W_v + b_v)`.
/// Returns `(E, V')`.
pub fn hyperconv_layer(tape: &mut Tape, store: &ParameterStore, prefix: &str, v_prev: Var, ops: &GraphOps) -> Result<(Var, Var)> {
    let w_e = tape.param(store, &format!("{prefix}.w_e"))?;
    let b_e = tape.param(store, &format!("{prefix}.b_e"))?;
    let w_v = tape.param(store, &format!("{prefix}.w_v"))?;
    let b_v = tape.param(store, &format!("{prefix}.b_v"))?;
    let agg = tape.spmm(ops.to_edges.clone(), v_prev)?;
    let e = tape.matmul(agg, w_e)?;
    let e = tape.add_bias(e, b_e)?;
    let e = tape.relu(e);
    let back = tape.spmm(ops.to_nodes.clone(), e)?;
    let v = tape.matmul(back, w_v)?;
    let v = tape.add_bias(v, b_v)?;
    Ok((e, tape.relu(v)))
}

/// Per-layer embeddings: `nodes[0]` is the projected input, `nodes[l]` and
/// `edges[l - 1]` come from layer `l`.
#[derive(Clone, Debug)]
pub struct EncodedHypergraph {
    pub nodes: Vec<Var>,
    pub edges: Vec<Var>,
}

impl EncodedHypergraph {
    pub fn last_nodes(&self) -> Var {
        *self.nodes.last().expect("input layer always present")
    }

    pub fn last_edges(&self) -> Option<Var> {
        self.edges.last().copied()
    }
}

/// Input projection of `z` followed by `cfg.depth` hyperconv layers, with
/// dropout on every layer input in training mode.
pub fn encode(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    z: Var,
    ops: &GraphOps,
    mode: Mode,
    rng: &mut Rng,
) -> Result<EncodedHypergraph> {
    let (n, d) = tape.value(z).dims2()?;
    if d != cfg.input_dim || n != ops.to_nodes.rows() {
        return Err(Error::shape(format!(
            "encoder expects {}x{}, got {n}x{d}",
            ops.to_nodes.rows(),
            cfg.input_dim
        )));
    }
    let mut v = linear(tape, store, "encoder.input", z)?;
    let mut nodes = vec![v];
    let mut edges = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let input = dropout(tape, v, cfg.dropout, mode, rng)?;
        let (e, next) = hyperconv_layer(tape, store, &format!("encoder.layer{l}"), input, ops)?;
        v = next;
        nodes.push(v);
        edges.push(e);
    }
    Ok(EncodedHypergraph { nodes, edges })
}

/// Encodes a hypergraph's stored node features as constants.
pub fn encode_graph(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    graph: &FlowHypergraph,
    mode: Mode,
    rng: &mut Rng,
) -> Result<EncodedHypergraph> {
    let ops = GraphOps::new(graph)?;
    let z = tape.constant(graph.node_features.clone());
    encode(tape, store, cfg, z, &ops, mode, rng)
}

fn mlp_elu(tape: &mut Tape, store: &ParameterStore, head: &str, x: Var) -> Result<Var> {
    let h = linear(tape, store, &format!("{head}.l1"), x)?;
    let h = tape.elu(h);
    linear(tape, store, &format!("{head}.l2"), h)
}

/// Node and hyperedge projections `(V̂, Ê)` through separate two-layer ELU
/// heads.
pub fn project(tape: &mut Tape, store: &ParameterStore, encoded: &EncodedHypergraph) -> Result<(Var, Option<Var>)> {
    let v = mlp_elu(tape, store, "head.node", encoded.last_nodes())?;
    let e = match encoded.last_edges() {
        Some(e) => Some(mlp_elu(tape, store, "head.edge", e)?),
        None => None,
    };
    Ok((v, e))
}

/// Class logits from a two-layer ReLU head.
pub fn predict_logits(tape: &mut Tape, store: &ParameterStore, nodes: Var) -> Result<Var> {
    let h = linear(tape, store, "head.pred.l1", nodes)?;
    let h = tape.relu(h);
    linear(tape, store, "head.pred.l2", h)
}

/// Row-wise class distributions.
pub fn predict(tape: &mut Tape, store: &ParameterStore, nodes: Var) -> Result<Var> {
    let logits = predict_logits(tape, store, nodes)?;
    Ok(tape.softmax_rows(logits))
}

/// Inference-mode class probabilities for every node of `graph`.
pub fn predict_graph(store: &ParameterStore, cfg: &EncoderConfig, graph: &FlowHypergraph) -> Result<Tensor> {
    let mut tape = Tape::new();
    let encoded = encode_graph(&mut tape, store, cfg, graph, Mode::Infer, &mut Rng::new(0))?;
    let probs = predict(&mut tape, store, encoded.last_nodes())?;
    let out = tape.value(probs).clone();
    if !out.is_finite() {
        return Err(Error::NonFinite("class probabilities".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::{build_flow_hypergraph, Incidence};
    use crate::tensor::{grad_check, GradCheckConfig};
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn layer_store(d: usize, seed: u64) -> ParameterStore {
        let mut rng = Rng::new(seed);
        let mut s = ParameterStore::new();
        s.insert("l.w_e", rng.uniform_tensor(&[d, d], -1.0, 1.0)).unwrap();
        s.insert("l.b_e", rng.uniform_tensor(&[d], -0.5, 0.5)).unwrap();
        s.insert("l.w_v", rng.uniform_tensor(&[d, d], -1.0, 1.0)).unwrap();
        s.insert("l.b_v", rng.uniform_tensor(&[d], -0.5, 0.5)).unwrap();
        s
    }

    fn identity_layer(d: usize) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("l.w_e", Tensor::eye(d)).unwrap();
        s.insert("l.b_e", Tensor::zeros(&[d])).unwrap();
        s.insert("l.w_v", Tensor::eye(d)).unwrap();
        s.insert("l.b_v", Tensor::zeros(&[d])).unwrap();
        s
    }

    fn run_layer(s: &ParameterStore, g: &FlowHypergraph) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let v = tape.constant(g.node_features.clone());
        let (e, v) = hyperconv_layer(&mut tape, s, "l", v, &GraphOps::new(g).unwrap()).unwrap();
        (tape.value(e).clone(), tape.value(v).clone())
    }

    /// Dense evaluation with explicit diagonal inverses, zero degree → 0.
    fn dense_layer(s: &ParameterStore, g: &FlowHypergraph) -> (Tensor, Tensor) {
        let (n, e) = (g.num_nodes(), g.num_edges());
        let h = g.incidence.to_dense();
        let mut de_inv_ht = Tensor::zeros(&[e, n]);
        let mut dv_inv_hm = Tensor::zeros(&[n, e]);
        for j in 0..e {
            for i in 0..n {
                let hij = h.get(&[i, j]);
                let de = g.edge_degrees[j];
                let dv = g.node_degrees[i];
                de_inv_ht.data_mut()[j * n + i] = if de == 0.0 { 0.0 } else { hij / de };
                dv_inv_hm.data_mut()[i * e + j] = if dv == 0.0 { 0.0 } else { hij * g.edge_weights[j] / dv };
            }
        }
        let act = |t: Tensor, b: &Tensor| {
            let w = t.row_len();
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().enumerate().map(|(k, v)| (v + b.data()[k % w]).max(0.0)).collect(),
            )
            .unwrap()
        };
        let e_out = act(
            de_inv_ht.matmul(&g.node_features).unwrap().matmul(s.value("l.w_e").unwrap()).unwrap(),
            s.value("l.b_e").unwrap(),
        );
        let v_out = act(
            dv_inv_hm.matmul(&e_out).unwrap().matmul(s.value("l.w_v").unwrap()).unwrap(),
            s.value("l.b_v").unwrap(),
        );
        (e_out, v_out)
    }

    fn random_graph(seed: u64, n: usize, e: usize, d: usize) -> FlowHypergraph {
        let mut rng = Rng::new(seed);
        let edges = (0..e)
            .map(|_| (0..n).filter(|_| rng.bernoulli(0.4)).collect())
            .collect();
        let weights = (0..e).map(|_| rng.uniform_range(0.0, 2.0)).collect();
        FlowHypergraph::new(rng.uniform_tensor(&[n, d], -1.0, 1.0), Incidence::new(n, edges).unwrap(), weights, None).unwrap()
    }

    #[test]
    fn single_self_edge_is_fixed_point() {
        let v = Tensor::new(vec![1, 3], vec![0.5, 0.0, 2.0]).unwrap();
        let g = FlowHypergraph::new(v.clone(), Incidence::new(1, vec![vec![0]]).unwrap(), vec![1.0], None).unwrap();
        let (e, out) = run_layer(&identity_layer(3), &g);
        assert_eq!(e, v);
        assert_eq!(out, v);
    }

    #[test]
    fn shared_edge_averages() {
        let v = Tensor::new(vec![2, 2], vec![1.0, 4.0, 3.0, 0.0]).unwrap();
        let g = FlowHypergraph::new(v, Incidence::new(2, vec![vec![0, 1]]).unwrap(), vec![1.0], None).unwrap();
        let (e, out) = run_layer(&identity_layer(2), &g);
        assert_eq!(e.data(), &[2.0, 2.0]);
        assert_eq!(out.data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn isolated_node_receives_relu_of_bias() {
        let mut s = layer_store(3, 2);
        s.get_mut("l.b_v").unwrap().value = Tensor::vector(vec![0.7, -0.2, 0.0]);
        let g = FlowHypergraph::new(
            Rng::new(1).uniform_tensor(&[3, 3], -1.0, 1.0),
            Incidence::new(3, vec![vec![0, 1], vec![]]).unwrap(),
            vec![1.0, 1.0],
            None,
        )
        .unwrap();
        let (e, v) = run_layer(&s, &g);
        assert_eq!(v.row(2), &[0.7, 0.0, 0.0]);
        let b_e = s.value("l.b_e").unwrap();
        let expect: Vec<f64> = b_e.data().iter().map(|b| b.max(0.0)).collect();
        assert_eq!(e.row(1), expect.as_slice());
    }

    #[test]
    fn dense_oracle_on_random_instances() {
        for seed in 0..50 {
            let mut rng = Rng::new(1000 + seed);
            let n = rng.int_range(1, 8) as usize;
            let e = rng.int_range(1, 8) as usize;
            let g = random_graph(seed, n, e, 4);
            let s = layer_store(4, seed);
            let (e1, v1) = run_layer(&s, &g);
            let (e2, v2) = dense_layer(&s, &g);
            assert!(e1.max_abs_diff(&e2) <= 1e-12);
            assert!(v1.max_abs_diff(&v2) <= 1e-12);
        }
    }

    fn small_cfg(depth: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim: 4,
            hidden: 3,
            depth,
            projection: 3,
            head_hidden: 3,
            classes: 3,
            dropout: 0.2,
        }
    }

    fn encoder_store(cfg: &EncoderConfig, seed: u64) -> ParameterStore {
        let mut s = ParameterStore::new();
        init_encoder(&mut s, cfg, &mut Rng::new(seed)).unwrap();
        let mut rng = Rng::new(seed + 1);
        for (name, p) in s.iter_mut() {
            if name.contains(".b") {
                p.value = rng.uniform_tensor(p.value.shape(), -0.3, 0.3);
            }
        }
        s
    }

    #[test]
    fn default_shapes() {
        let cfg = EncoderConfig::default();
        let mut s = ParameterStore::new();
        init_encoder(&mut s, &cfg, &mut Rng::new(1)).unwrap();
        let g = build_flow_hypergraph(Rng::new(2).uniform_tensor(&[5, 512], -1.0, 1.0), 3, true, None).unwrap();
        let mut tape = Tape::new();
        let enc = encode_graph(&mut tape, &s, &cfg, &g, Mode::Infer, &mut Rng::new(0)).unwrap();
        assert_eq!(enc.nodes.len(), 3);
        assert_eq!(tape.value(enc.last_nodes()).shape(), &[5, 128]);
        assert_eq!(tape.value(enc.last_edges().unwrap()).shape(), &[5, 128]);
        let (v, e) = project(&mut tape, &s, &enc).unwrap();
        assert_eq!(tape.value(v).shape(), &[5, 128]);
        assert_eq!(tape.value(e.unwrap()).shape(), &[5, 128]);
    }

    #[test]
    fn depth_zero_is_projected_input() {
        let cfg = small_cfg(0);
        let s = encoder_store(&cfg, 3);
        let g = random_graph(4, 5, 5, 4);
        let mut tape = Tape::new();
        let enc = encode_graph(&mut tape, &s, &cfg, &g, Mode::Train, &mut Rng::new(0)).unwrap();
        assert!(enc.edges.is_empty());
        let expect = g.node_features.matmul(s.value("encoder.input.w").unwrap()).unwrap();
        let b = s.value("encoder.input.b").unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let v = tape.value(enc.last_nodes()).get(&[i, j]);
                assert!((v - expect.get(&[i, j]) - b.data()[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_heads_give_bias_and_uniform() {
        let cfg = small_cfg(2);
        let mut s = encoder_store(&cfg, 5);
        for (name, p) in s.iter_mut() {
            if name.starts_with("head.") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        s.get_mut("head.node.l2.b").unwrap().value = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = random_graph(6, 4, 4, 4);
        let mut tape = Tape::new();
        let enc = encode_graph(&mut tape, &s, &cfg, &g, Mode::Infer, &mut Rng::new(0)).unwrap();
        let (v, _) = project(&mut tape, &s, &enc).unwrap();
        for i in 0..4 {
            assert_eq!(tape.value(v).row(i), &[1.0, -2.0, 0.5]);
        }
        let p = predict_graph(&s, &cfg, &g).unwrap();
        assert!(p.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn predictions_are_distributions() {
        let cfg = small_cfg(2);
        let s = encoder_store(&cfg, 7);
        let g = random_graph(8, 7, 7, 4);
        let p = predict_graph(&s, &cfg, &g).unwrap();
        for i in 0..7 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn project_encode_gradients() {
        let cfg = small_cfg(2);
        let s = encoder_store(&cfg, 9);
        let g = random_graph(10, 5, 4, 4);
        let probe_v = Rng::new(11).uniform_tensor(&[5, 3], -1.0, 1.0);
        let probe_e = Rng::new(12).uniform_tensor(&[4, 3], -1.0, 1.0);
        let f = |tape: &mut Tape, s: &ParameterStore| {
            let enc = encode_graph(tape, s, &cfg, &g, Mode::Infer, &mut Rng::new(0))?;
            let (v, e) = project(tape, s, &enc)?;
            let a = tape.mul_const(v, Arc::new(probe_v.clone()))?;
            let b = tape.mul_const(e.expect("depth 2"), Arc::new(probe_e.clone()))?;
            let a = tape.sum(a);
            let b = tape.sum(b);
            tape.add(a, b)
        };
        let report = grad_check(f, &s, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    proptest! {
        #[test]
        fn encode_is_permutation_equivariant(seed in 0u64..500) {
            let cfg = small_cfg(2);
            let s = encoder_store(&cfg, seed);
            let z = Rng::new(seed).uniform_tensor(&[7, 4], -1.0, 1.0);
            let g = build_flow_hypergraph(z, 2, true, None).unwrap();
            let mut perm: Vec<usize> = (0..7).collect();
            Rng::new(seed + 9).shuffle(&mut perm);
            let gp = g.permuted(&perm).unwrap();
            let run = |graph: &FlowHypergraph| {
                let mut tape = Tape::new();
                let enc = encode_graph(&mut tape, &s, &cfg, graph, Mode::Infer, &mut Rng::new(0)).unwrap();
                (tape.value(enc.last_nodes()).clone(), tape.value(enc.last_edges().unwrap()).clone())
            };
            let (v, e) = run(&g);
            let (vp, ep) = run(&gp);
            for (r, &o) in perm.iter().enumerate() {
                for c in 0..3 {
                    prop_assert!((vp.get(&[r, c]) - v.get(&[o, c])).abs() < 1e-12);
                    prop_assert!((ep.get(&[r, c]) - e.get(&[o, c])).abs() < 1e-12);
                }
            }
        }
    }
}
