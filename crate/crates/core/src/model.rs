//! A trained classifier: architecture settings plus parameters, with the
//! flows-to-probabilities inference path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, store_from_bytes};
use crate::encoder::{init_encoder, predict_graph, EncoderConfig};
use crate::error::{Error, Result};
use crate::extractors::{extract_features, init_extractor, ExtractorConfig, ViewBatch};
use crate::hypergraph::{build_flow_hypergraph, FlowHypergraph};
use crate::ingest::FlowRecord;
use crate::tensor::{ParameterStore, Rng, Tensor};

/// Settings stored alongside the parameters as `hparam.*` scalars.
pub const HPARAM_PREFIX: &str = "hparam.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub encoder: EncoderConfig,
    /// Neighbours per hyperedge.
    pub k: usize,
    pub include_self: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        self.encoder.validate()?;
        if self.encoder.input_dim != self.extractor.dim {
            return Err(Error::config(format!(
                "encoder input width {} differs from extractor width {}",
                self.encoder.input_dim, self.extractor.dim
            )));
        }
        if self.k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        Ok(())
    }

    fn hparams(&self) -> Vec<(&'static str, f64)> {
        let x = &self.extractor;
        let e = &self.encoder;
        vec![
            ("extractor.n", x.n as f64),
            ("extractor.m", x.m as f64),
            ("extractor.dim", x.dim as f64),
            ("extractor.lstm_hidden", x.lstm_hidden as f64),
            ("extractor.lstm_attention", x.lstm_attention as f64),
            ("extractor.conv_channels0", x.conv_channels[0] as f64),
            ("extractor.conv_channels1", x.conv_channels[1] as f64),
            ("extractor.kernel", x.kernel as f64),
            ("extractor.padding", x.padding as f64),
            ("extractor.pool", x.pool as f64),
            ("extractor.payload_attention", x.payload_attention as f64),
            ("extractor.gcn_hidden", x.gcn_hidden as f64),
            ("extractor.fusion_hidden", x.fusion_hidden as f64),
            ("extractor.dropout", x.dropout),
            ("extractor.length_scale", x.length_scale),
            ("encoder.input_dim", e.input_dim as f64),
            ("encoder.hidden", e.hidden as f64),
            ("encoder.depth", e.depth as f64),
            ("encoder.projection", e.projection as f64),
            ("encoder.head_hidden", e.head_hidden as f64),
            ("encoder.classes", e.classes as f64),
            ("encoder.dropout", e.dropout),
            ("k", self.k as f64),
            ("include_self", if self.include_self { 1.0 } else { 0.0 }),
        ]
    }

    fn from_hparams(store: &ParameterStore) -> Result<ModelConfig> {
        let get = |key: &str| -> Result<f64> {
            let name = format!("{HPARAM_PREFIX}{key}");
            let t = store.value(&name).map_err(|_| Error::Checkpoint {
                tensor: name.clone(),
                message: "missing".into(),
            })?;
            match t.data() {
                [v] => Ok(*v),
                _ => Err(Error::Checkpoint {
                    tensor: name,
                    message: format!("expected one value, found shape {:?}", t.shape()),
                }),
            }
        };
        let int = |key: &str| -> Result<usize> {
            let v = get(key)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Checkpoint {
                    tensor: format!("{HPARAM_PREFIX}{key}"),
                    message: format!("expected a non-negative integer, found {v}"),
                });
            }
            Ok(v as usize)
        };
        let cfg = ModelConfig {
            extractor: ExtractorConfig {
                n: int("extractor.n")?,
                m: int("extractor.m")?,
                dim: int("extractor.dim")?,
                lstm_hidden: int("extractor.lstm_hidden")?,
                lstm_attention: int("extractor.lstm_attention")?,
                conv_channels: [int("extractor.conv_channels0")?, int("extractor.conv_channels1")?],
                kernel: int("extractor.kernel")?,
                padding: int("extractor.padding")?,
                pool: int("extractor.pool")?,
                payload_attention: int("extractor.payload_attention")?,
                gcn_hidden: int("extractor.gcn_hidden")?,
                fusion_hidden: int("extractor.fusion_hidden")?,
                dropout: get("extractor.dropout")?,
                length_scale: get("extractor.length_scale")?,
            },
            encoder: EncoderConfig {
                input_dim: int("encoder.input_dim")?,
                hidden: int("encoder.hidden")?,
                depth: int("encoder.depth")?,
                projection: int("encoder.projection")?,
                head_hidden: int("encoder.head_hidden")?,
                classes: int("encoder.classes")?,
                dropout: get("encoder.dropout")?,
            },
            k: int("k")?,
            include_self: get("include_self")? != 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl Model {
    /// Fresh extractor and encoder parameters.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        let mut params = ParameterStore::new();
        init_extractor(&mut params, &config.extractor, rng)?;
        init_encoder(&mut params, &config.encoder, rng)?;
        Ok(Model { config, params })
    }

    pub fn classes(&self) -> usize {
        self.config.encoder.classes
    }

    pub fn views(&self, flows: &[FlowRecord]) -> Result<ViewBatch> {
        ViewBatch::from_flows(flows, self.config.extractor.n, self.config.extractor.m)
    }

    /// Inference-mode fused flow features.
    pub fn features(&self, views: &ViewBatch) -> Result<Tensor> {
        extract_features(&self.params, &self.config.extractor, views)
    }

    /// KNN hypergraph over the current features of `views`.
    pub fn hypergraph(&self, views: &ViewBatch, labels: Option<Vec<usize>>) -> Result<FlowHypergraph> {
        if views.len() <= self.config.k {
            return Err(Error::config(format!(
                "{} flows cannot form a hypergraph with K = {}",
                views.len(),
                self.config.k
            )));
        }
        build_flow_hypergraph(self.features(views)?, self.config.k, self.config.include_self, labels)
    }

    /// N×C class probabilities for one snapshot.
    pub fn predict_views(&self, views: &ViewBatch) -> Result<Tensor> {
        let graph = self.hypergraph(views, None)?;
        predict_graph(&self.params, &self.config.encoder, &graph)
    }

    pub fn predict_flows(&self, flows: &[FlowRecord]) -> Result<Tensor> {
        self.predict_views(&self.views(flows)?)
    }

    fn store_with_hparams(&self) -> Result<ParameterStore> {
        let mut store = self.params.clone();
        for (key, v) in self.config.hparams() {
            store.insert(format!("{HPARAM_PREFIX}{key}"), Tensor::vector(vec![v]))?;
        }
        Ok(store)
    }

    fn from_store(mut store: ParameterStore) -> Result<Model> {
        let config = ModelConfig::from_hparams(&store)?;
        let mut params = ParameterStore::new();
        let mut expected = ParameterStore::new();
        init_extractor(&mut expected, &config.extractor, &mut Rng::new(0))?;
        init_encoder(&mut expected, &config.encoder, &mut Rng::new(0))?;
        for (name, p) in expected.iter() {
            let found = store.get_mut(name).map_err(|_| Error::Checkpoint {
                tensor: name.to_string(),
                message: "missing".into(),
            })?;
            if found.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint {
                    tensor: name.to_string(),
                    message: format!("shape {:?}, expected {:?}", found.value.shape(), p.value.shape()),
                });
            }
            params.insert(name, std::mem::replace(&mut found.value, Tensor::zeros(&[0])))?;
        }
        if let Some(extra) = store
            .names()
            .find(|n| !n.starts_with(HPARAM_PREFIX) && !expected.contains(n))
        {
            return Err(Error::Checkpoint {
                tensor: extra.to_string(),
                message: "not part of the model".into(),
            });
        }
        Ok(Model { config, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint_bytes(&self.store_with_hparams()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        Model::from_store(store_from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.store_with_hparams()?, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        Model::from_store(load_checkpoint(path)?)
    }
}
