//! Tumbling-window snapshots for batch inference over a capture.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::FlowRecord;
use crate::model::Model;

/// Epoch-aligned windows of `duration` seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub duration: f64,
}

impl WindowSpec {
    pub fn new(duration: f64) -> Result<WindowSpec> {
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(Error::config(format!("window duration {duration} must be positive")));
        }
        Ok(WindowSpec { duration })
    }

    /// Window holding a flow whose first packet is at `timestamp`.
    pub fn index(&self, timestamp: f64) -> i64 {
        (timestamp / self.duration).floor() as i64
    }
}

/// Flow indices per window, in input order within each window.
pub fn partition_windows(flows: &[FlowRecord], spec: &WindowSpec) -> Result<BTreeMap<i64, Vec<usize>>> {
    let mut out: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, f) in flows.iter().enumerate() {
        if f.packets.is_empty() {
            return Err(Error::config(format!("flow {} has no packets", f.id)));
        }
        out.entry(spec.index(f.start_time())).or_default().push(i);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub flow_id: String,
    pub window: i64,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedWindow {
    pub window: i64,
    pub skipped: bool,
    pub flows: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DetectionRecord {
    Flow(Detection),
    Skipped(SkippedWindow),
}

/// Classifies every window with more than K flows on its own hypergraph.
/// Smaller windows yield one [`SkippedWindow`] record. Output is ordered by
/// window, then input order.
pub fn detect(model: &Model, flows: &[FlowRecord], spec: &WindowSpec) -> Result<Vec<DetectionRecord>> {
    let windows: Vec<(i64, Vec<usize>)> = partition_windows(flows, spec)?.into_iter().collect();
    let k = model.config.k;
    let per_window = windows
        .par_iter()
        .map(|(window, idx)| -> Result<Vec<DetectionRecord>> {
            if idx.len() <= k {
                log::warn!("window {window}: {} flows, need more than K = {k}; skipped", idx.len());
                return Ok(vec![DetectionRecord::Skipped(SkippedWindow {
                    window: *window,
                    skipped: true,
                    flows: idx.len(),
                    reason: format!("needs more than K = {k} flows"),
                })]);
            }
            let snapshot: Vec<FlowRecord> = idx.iter().map(|&i| flows[i].clone()).collect();
            let probs = model.predict_flows(&snapshot)?;
            let pred = probs.argmax_rows();
            Ok(snapshot
                .iter()
                .enumerate()
                .map(|(r, f)| {
                    DetectionRecord::Flow(Detection {
                        flow_id: f.id.clone(),
                        window: *window,
                        predicted: pred[r],
                        probabilities: probs.row(r).to_vec(),
                    })
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_window.into_iter().flatten().collect())
}

pub fn write_detections_jsonl<W: Write>(mut out: W, records: &[DetectionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
