//! Temporal, payload and interaction view encoders and their fusion.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{flow_to_length_sequence, flow_to_payload_matrix, flow_to_tig, FlowRecord, Tig};
use crate::tensor::nn::{attention_pool, dropout, init_attention, init_linear, init_lstm, linear, lstm_forward, Mode};
use crate::tensor::{Csr, ParameterStore, Rng, Tape, Tensor, Var};

/// Parameter-name prefixes owned by the extractor.
pub const EXTRACTOR_PREFIXES: [&str; 4] = ["temporal.", "payload.", "interaction.", "fusion."];

/// Fusion weight parameter name.
pub const ALPHA: &str = "fusion.alpha";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Packets per flow.
    pub n: usize,
    /// Payload bytes per packet.
    pub m: usize,
    /// Width of every view embedding and of the fused output.
    pub dim: usize,
    pub lstm_hidden: usize,
    pub lstm_attention: usize,
    pub conv_channels: [usize; 2],
    pub kernel: usize,
    pub padding: usize,
    pub pool: usize,
    pub payload_attention: usize,
    pub gcn_hidden: usize,
    pub fusion_hidden: usize,
    pub dropout: f64,
    /// Signed lengths are divided by this before the LSTM and GCN.
    pub length_scale: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            n: 40,
            m: 16,
            dim: 512,
            lstm_hidden: 64,
            lstm_attention: 64,
            conv_channels: [16, 32],
            kernel: 25,
            padding: 12,
            pool: 2,
            payload_attention: 32,
            gcn_hidden: 64,
            fusion_hidden: 512,
            dropout: 0.2,
            length_scale: 1514.0,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::config("n and m must be at least 1"));
        }
        if [self.dim, self.lstm_hidden, self.lstm_attention, self.payload_attention, self.gcn_hidden, self.fusion_hidden]
            .contains(&0)
            || self.conv_channels.contains(&0)
        {
            return Err(Error::config("extractor widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if !(self.length_scale > 0.0) {
            return Err(Error::config("length_scale must be positive"));
        }
        self.payload_positions()?;
        Ok(())
    }

    /// Positions left after both conv+pool blocks over the n·m byte stream.
    pub fn payload_positions(&self) -> Result<usize> {
        let mut len = self.n * self.m;
        for _ in 0..2 {
            len = crate::tensor::conv1d_output_len(len, self.kernel, 1, self.padding)
                .ok_or_else(|| Error::config("payload stream too short for the conv kernel"))?;
            if len < self.pool || self.pool == 0 {
                return Err(Error::config("payload stream too short for pooling"));
            }
            len /= self.pool;
        }
        Ok(len)
    }
}

/// The three per-flow views for N flows, sharing row order.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub n: usize,
    pub m: usize,
    /// N×n signed lengths.
    pub lengths: Tensor,
    /// N×n×m bytes as 0..=255.
    pub payloads: Tensor,
    pub tigs: Vec<Tig>,
}

impl ViewBatch {
    pub fn from_flows(flows: &[FlowRecord], n: usize, m: usize) -> Result<ViewBatch> {
        if flows.is_empty() {
            return Err(Error::config("no flows to encode"));
        }
        if n == 0 || m == 0 {
            return Err(Error::config("n and m must be at least 1"));
        }
        if let Some(f) = flows.iter().find(|f| f.packets.is_empty()) {
            return Err(Error::config(format!("flow {} has no packets", f.id)));
        }
        let views: Vec<(Vec<f64>, Vec<f64>, Tig)> = flows
            .par_iter()
            .map(|f| {
                let len = flow_to_length_sequence(f, n).values.into_iter().map(|v| v as f64).collect();
                let pay = flow_to_payload_matrix(f, n, m).values.into_iter().map(f64::from).collect();
                (len, pay, flow_to_tig(f, n))
            })
            .collect();
        let count = flows.len();
        let mut lengths = Vec::with_capacity(count * n);
        let mut payloads = Vec::with_capacity(count * n * m);
        let mut tigs = Vec::with_capacity(count);
        for (l, p, t) in views {
            lengths.extend(l);
            payloads.extend(p);
            tigs.push(t);
        }
        Ok(ViewBatch {
            n,
            m,
            lengths: Tensor::new(vec![count, n], lengths)?,
            payloads: Tensor::new(vec![count, n, m], payloads)?,
            tigs,
        })
    }

    pub fn len(&self) -> usize {
        self.tigs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tigs.is_empty()
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<ViewBatch> {
        if idx.is_empty() {
            return Err(Error::config("empty selection"));
        }
        let (n, m) = (self.n, self.m);
        let mut lengths = Vec::with_capacity(idx.len() * n);
        let mut payloads = Vec::with_capacity(idx.len() * n * m);
        let mut tigs = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::shape(format!("row {i} out of range")));
            }
            lengths.extend_from_slice(self.lengths.row(i));
            payloads.extend_from_slice(&self.payloads.data()[i * n * m..(i + 1) * n * m]);
            tigs.push(self.tigs[i].clone());
        }
        Ok(ViewBatch {
            n,
            m,
            lengths: Tensor::new(vec![idx.len(), n], lengths)?,
            payloads: Tensor::new(vec![idx.len(), n, m], payloads)?,
            tigs,
        })
    }
}

/// Tape handles for every intermediate view embedding.
#[derive(Clone, Copy, Debug)]
pub struct ViewEmbeddings {
    pub z_lstm: Var,
    pub z_cnn: Var,
    pub z_gcn: Var,
    pub z_seq: Var,
    pub z_mv: Var,
}

pub fn init_extractor(store: &mut ParameterStore, cfg: &ExtractorConfig, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    let [c1, c2] = cfg.conv_channels;
    init_lstm(store, "temporal.lstm", 1, cfg.lstm_hidden, rng)?;
    init_attention(store, "temporal.attn", cfg.lstm_hidden, cfg.lstm_attention, rng)?;
    init_linear(store, "temporal.out", cfg.lstm_hidden, cfg.dim, rng)?;

    init_conv(store, "payload.conv1", 1, c1, cfg.kernel, rng)?;
    init_conv(store, "payload.conv2", c1, c2, cfg.kernel, rng)?;
    init_attention(store, "payload.attn", c2, cfg.payload_attention, rng)?;
    init_linear(store, "payload.out", c2, cfg.dim, rng)?;

    store.insert_weight("interaction.gcn1.w", 2, cfg.gcn_hidden, rng)?;
    store.insert_weight("interaction.gcn2.w", cfg.gcn_hidden, cfg.gcn_hidden, rng)?;
    init_linear(store, "interaction.out", cfg.gcn_hidden, cfg.dim, rng)?;

    init_linear(store, "fusion.hidden", 2 * cfg.dim, cfg.fusion_hidden, rng)?;
    init_linear(store, "fusion.out", cfg.fusion_hidden, cfg.dim, rng)?;
    store.insert(ALPHA, Tensor::vector(vec![0.5]))
}

fn init_conv(store: &mut ParameterStore, prefix: &str, cin: usize, cout: usize, k: usize, rng: &mut Rng) -> Result<()> {
    let bound = (6.0 / ((cin + cout) * k) as f64).sqrt();
    store.insert(format!("{prefix}.kernel"), rng.uniform_tensor(&[cout, cin, k], -bound, bound))?;
    store.insert_zeros(&format!("{prefix}.bias"), &[cout])
}

fn check_batch(batch: &ViewBatch, cfg: &ExtractorConfig) -> Result<()> {
    if batch.n != cfg.n || batch.m != cfg.m {
        return Err(Error::shape(format!(
            "views built with n={}, m={} but the extractor expects n={}, m={}",
            batch.n, batch.m, cfg.n, cfg.m
        )));
    }
    Ok(())
}

/// LSTM over the scaled signed-length sequence, attention pooling, linear map.
pub fn temporal_encode(tape: &mut Tape, store: &ParameterStore, cfg: &ExtractorConfig, batch: &ViewBatch) -> Result<Var> {
    check_batch(batch, cfg)?;
    let rows = batch.len();
    let steps: Vec<Var> = (0..cfg.n)
        .map(|t| {
            let col = (0..rows)
                .map(|i| batch.lengths.row(i)[t] / cfg.length_scale)
                .collect();
            tape.constant(Tensor::from_parts(vec![rows, 1], col))
        })
        .collect();
    let states = lstm_forward(tape, store, "temporal.lstm", &steps)?;
    let pooled = attention_pool(tape, store, "temporal.attn", states)?;
    linear(tape, store, "temporal.out", pooled)
}

/// Two conv+ReLU+pool blocks over the flattened byte stream, attention over
/// positions, linear map.
pub fn payload_encode(tape: &mut Tape, store: &ParameterStore, cfg: &ExtractorConfig, batch: &ViewBatch) -> Result<Var> {
    check_batch(batch, cfg)?;
    let rows = batch.len();
    let scaled = batch.payloads.map(|b| b / 255.0).reshape(&[rows, 1, cfg.n * cfg.m])?;
    let mut x = tape.constant(scaled);
    for block in ["payload.conv1", "payload.conv2"] {
        let k = tape.param(store, &format!("{block}.kernel"))?;
        let b = tape.param(store, &format!("{block}.bias"))?;
        x = tape.conv1d(x, k, b, 1, cfg.padding)?;
        x = tape.relu(x);
        x = tape.maxpool1d(x, cfg.pool)?;
    }
    let positions = tape.permute021(x)?;
    let pooled = attention_pool(tape, store, "payload.attn", positions)?;
    linear(tape, store, "payload.out", pooled)
}

/// Block-diagonal `D̃^(-1/2)(A+I)D̃^(-1/2)`, the node-to-flow mean pooling
/// operator and the stacked node features.
pub fn interaction_operators(tigs: &[Tig], length_scale: f64) -> Result<(Csr, Csr, Tensor)> {
    let total: usize = tigs.iter().map(|t| t.node_count).sum();
    let mut adj = Vec::new();
    let mut pool = Vec::with_capacity(total);
    let mut feats = Vec::with_capacity(total * 2);
    let mut base = 0;
    for (f, tig) in tigs.iter().enumerate() {
        let k = tig.node_count;
        if k == 0 {
            return Err(Error::shape(format!("interaction graph {f} has no nodes")));
        }
        let deg: Vec<f64> = (0..k)
            .map(|i| 1.0 + tig.adjacency[i].iter().filter(|&&a| a == 1).count() as f64)
            .collect();
        for i in 0..k {
            adj.push((base + i, base + i, 1.0 / deg[i]));
            for j in 0..k {
                if tig.adjacency[i][j] == 1 {
                    adj.push((base + i, base + j, 1.0 / (deg[i] * deg[j]).sqrt()));
                }
            }
            pool.push((f, base + i, 1.0 / k as f64));
            feats.push(tig.features[i][0] / length_scale);
            feats.push(tig.features[i][1]);
        }
        base += k;
    }
    Ok((
        Csr::from_triplets(total, total, adj)?,
        Csr::from_triplets(tigs.len(), total, pool)?,
        Tensor::new(vec![total, 2], feats)?,
    ))
}

/// Two GCN layers with ReLU, mean pooling per graph, linear map.
pub fn interaction_encode(tape: &mut Tape, store: &ParameterStore, cfg: &ExtractorConfig, batch: &ViewBatch) -> Result<Var> {
    check_batch(batch, cfg)?;
    let (adj, pool, feats) = interaction_operators(&batch.tigs, cfg.length_scale)?;
    let adj = Arc::new(adj);
    let x = tape.constant(feats);
    let w1 = tape.param(store, "interaction.gcn1.w")?;
    let w2 = tape.param(store, "interaction.gcn2.w")?;
    let h = tape.spmm(adj.clone(), x)?;
    let h = tape.matmul(h, w1)?;
    let h = tape.relu(h);
    let h = tape.spmm(adj, h)?;
    let h = tape.matmul(h, w2)?;
    let h = tape.relu(h);
    let pooled = tape.spmm(Arc::new(pool), h)?;
    linear(tape, store, "interaction.out", pooled)
}

/// `Z_SEQ = Linear(Dropout(Linear(Z_CNN ‖ Z_LSTM)))` and
/// `Z_mv = α·Z_GCN + (1-α)·Z_SEQ` with α clamped to [0, 1]. Returns
/// `(z_seq, z_mv)`.
#[allow(clippy::too_many_arguments)]
pub fn fuse(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ExtractorConfig,
    z_lstm: Var,
    z_cnn: Var,
    z_gcn: Var,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Var, Var)> {
    let cat = tape.concat_cols(&[z_cnn, z_lstm])?;
    let hidden = linear(tape, store, "fusion.hidden", cat)?;
    let hidden = dropout(tape, hidden, cfg.dropout, mode, rng)?;
    let z_seq = linear(tape, store, "fusion.out", hidden)?;
    let alpha = tape.param(store, ALPHA)?;
    let alpha = tape.clamp(alpha, 0.0, 1.0);
    let one = tape.constant(Tensor::vector(vec![1.0]));
    let rest = tape.sub(one, alpha)?;
    let a = tape.mul_scalar(z_gcn, alpha)?;
    let b = tape.mul_scalar(z_seq, rest)?;
    let z_mv = tape.add(a, b)?;
    Ok((z_seq, z_mv))
}

/// Runs all three encoders and the fusion on one batch.
pub fn extract(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ExtractorConfig,
    batch: &ViewBatch,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ViewEmbeddings> {
    let z_lstm = temporal_encode(tape, store, cfg, batch)?;
    let z_cnn = payload_encode(tape, store, cfg, batch)?;
    let z_gcn = interaction_encode(tape, store, cfg, batch)?;
    let (z_seq, z_mv) = fuse(tape, store, cfg, z_lstm, z_cnn, z_gcn, mode, rng)?;
    Ok(ViewEmbeddings {
        z_lstm,
        z_cnn,
        z_gcn,
        z_seq,
        z_mv,
    })
}

/// Inference-mode `Z_mv` as a plain tensor.
pub fn extract_features(store: &ParameterStore, cfg: &ExtractorConfig, batch: &ViewBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let z = extract(&mut tape, store, cfg, batch, Mode::Infer, &mut Rng::new(0))?;
    let out = tape.value(z.z_mv).clone();
    if !out.is_finite() {
        return Err(Error::NonFinite("extracted flow features".into()));
    }
    Ok(out)
}

/// Keeps α inside [0, 1] after an optimizer step.
pub fn project_alpha(store: &mut ParameterStore) -> Result<()> {
    let p = store.get_mut(ALPHA)?;
    p.value.data_mut().iter_mut().for_each(|a| *a = a.clamp(0.0, 1.0));
    Ok(())
}
