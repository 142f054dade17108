//! Joint supervised and dual-contrastive training over one flow hypergraph.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentationPipeline, AugmentedView};
use crate::contrast::{group_group_loss, node_node_loss, ContrastConfig};
use crate::encoder::{encode, predict, project, EncoderConfig, GraphOps};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::extractors::{extract, project_alpha, ExtractorConfig, ViewBatch, EXTRACTOR_PREFIXES};
use crate::hypergraph::FlowHypergraph;
use crate::ingest::FlowRecord;
use crate::model::{Model, ModelConfig};
use crate::tensor::nn::Mode;
use crate::tensor::{AdamConfig, AdamState, ParameterStore, Rng, Tape, Tensor, Var};

/// Added inside the logarithm of the cross-entropy.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub omega_n: f64,
    pub omega_g: f64,
    pub contrast: ContrastConfig,
    pub aug1: AugmentationPipeline,
    pub aug2: AugmentationPipeline,
    pub depth: usize,
    pub hidden: usize,
    pub extractor_dim: usize,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub include_self: bool,
    pub dropout: f64,
    pub seed: u64,
    /// Epochs without a validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Keep the extractor at its initial parameters.
    pub freeze_extractor: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let ew = "ew:0.4".parse::<AugmentationPipeline>().expect("valid pipeline");
        TrainConfig {
            epochs: 200,
            learning_rate: 0.002,
            weight_decay: 1e-3,
            omega_n: 1.0,
            omega_g: 1.0,
            contrast: ContrastConfig::default(),
            aug1: ew.clone(),
            aug2: ew,
            depth: 2,
            hidden: 128,
            extractor_dim: 512,
            n: 40,
            m: 16,
            k: 3,
            include_self: true,
            dropout: 0.2,
            seed: 0,
            patience: 30,
            freeze_extractor: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if !(self.omega_n >= 0.0) || !(self.omega_g >= 0.0) || !self.omega_n.is_finite() || !self.omega_g.is_finite() {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        self.contrast.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn uses_contrast(&self) -> bool {
        self.omega_n != 0.0 || self.omega_g != 0.0
    }

    /// Architecture implied by these settings for `classes` outputs.
    pub fn model_config(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig {
                n: self.n,
                m: self.m,
                dim: self.extractor_dim,
                fusion_hidden: self.extractor_dim,
                dropout: self.dropout,
                ..ExtractorConfig::default()
            },
            encoder: EncoderConfig {
                input_dim: self.extractor_dim,
                hidden: self.hidden,
                depth: self.depth,
                projection: self.hidden,
                head_hidden: self.hidden,
                classes,
                dropout: self.dropout,
            },
            k: self.k,
            include_self: self.include_self,
        }
    }

    /// One `name = value` line per setting.
    pub fn echo(&self) -> String {
        let x = ExtractorConfig::default();
        let lines = [
            format!("epochs = {}", self.epochs),
            format!("learning_rate = {}", self.learning_rate),
            format!("weight_decay = {}", self.weight_decay),
            "optimizer = adam".to_string(),
            format!("omega_n = {}", self.omega_n),
            format!("omega_g = {}", self.omega_g),
            format!("tau_n = {}", self.contrast.tau_n),
            format!("tau_g = {}", self.contrast.tau_g),
            format!("aug1 = {}", self.aug1),
            format!("aug2 = {}", self.aug2),
            format!("hypergraph_layers = {}", self.depth),
            format!("hidden = {}", self.hidden),
            format!("projection = {}", self.hidden),
            format!("dropout = {}", self.dropout),
            "activation = relu".to_string(),
            format!("extractor_dim = {}", self.extractor_dim),
            "gcn_layers = 2".to_string(),
            "lstm_layers = 1".to_string(),
            "cnn_layers = 2".to_string(),
            format!("cnn_kernel = {}", x.kernel),
            "cnn_stride = 1".to_string(),
            format!("cnn_padding = {}", x.padding),
            format!("n = {}", self.n),
            format!("m = {}", self.m),
            format!("k = {}", self.k),
            format!("include_self = {}", self.include_self),
            format!("seed = {}", self.seed),
            format!("patience = {}", self.patience),
            format!("freeze_extractor = {}", self.freeze_extractor),
        ];
        lines.join("\n")
    }
}

/// Class indices for every flow and which of them may be used for training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub y: Vec<usize>,
    pub mask: Vec<bool>,
}

impl LabelSet {
    pub fn new(y: Vec<usize>, mask: Vec<bool>) -> Result<LabelSet> {
        if y.len() != mask.len() {
            return Err(Error::shape(format!("{} labels with a mask of {}", y.len(), mask.len())));
        }
        Ok(LabelSet { y, mask })
    }

    pub fn full(y: Vec<usize>) -> LabelSet {
        let mask = vec![true; y.len()];
        LabelSet { y, mask }
    }

    pub fn from_flows(flows: &[FlowRecord]) -> Result<LabelSet> {
        let y = flows
            .iter()
            .map(|f| f.label.ok_or_else(|| Error::config(format!("flow {} has no label", f.id))))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelSet::full(y))
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn labeled(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Smallest class count that covers every label.
    pub fn num_classes(&self) -> usize {
        self.y.iter().max().map_or(0, |&c| c + 1)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.y.len() != self.mask.len() {
            return Err(Error::shape("label and mask lengths differ"));
        }
        if let Some(&c) = self.y.iter().find(|&&c| c >= classes) {
            return Err(Error::config(format!("label {c} outside 0..{classes}")));
        }
        Ok(())
    }

    /// Keeps a per-class fraction of the labels (at least one per class
    /// present).
    pub fn subsample(&self, fraction: f64, rng: &mut Rng) -> Result<LabelSet> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::config(format!("label fraction {fraction} outside (0, 1]")));
        }
        let mut mask = vec![false; self.len()];
        for c in 0..self.num_classes() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.mask[i] && self.y[i] == c).collect();
            if idx.is_empty() {
                continue;
            }
            rng.shuffle(&mut idx);
            let keep = ((fraction * idx.len() as f64).ceil() as usize).max(1);
            for &i in &idx[..keep] {
                mask[i] = true;
            }
        }
        LabelSet::new(self.y.clone(), mask)
    }

    /// N×C one-hot rows, zero for unlabeled flows.
    pub fn one_hot_masked(&self, classes: usize) -> Result<Tensor> {
        self.validate(classes)?;
        let mut t = Tensor::zeros(&[self.len(), classes]);
        for (i, (&c, &m)) in self.y.iter().zip(&self.mask).enumerate() {
            if m {
                t.row_mut(i)[c] = 1.0;
            }
        }
        Ok(t)
    }
}

/// Mean over labeled rows of `-Σ_j y_ij log(p_ij + LOG_EPS)`.
pub fn cross_entropy_loss(pred: &Tensor, labels: &LabelSet) -> Result<f64> {
    let (n, c) = pred.dims2()?;
    if n != labels.len() {
        return Err(Error::shape(format!("{n} predictions for {} labels", labels.len())));
    }
    labels.validate(c)?;
    let count = labels.labeled();
    if count == 0 {
        return Err(Error::config("no labeled flows"));
    }
    let total: f64 = (0..n)
        .filter(|&i| labels.mask[i])
        .map(|i| -(pred.row(i)[labels.y[i]] + LOG_EPS).ln())
        .sum();
    Ok(total / count as f64)
}

/// Tape version of [`cross_entropy_loss`].
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &LabelSet) -> Result<Var> {
    let (n, c) = tape.value(probs).dims2()?;
    if n != labels.len() {
        return Err(Error::shape(format!("{n} predictions for {} labels", labels.len())));
    }
    let count = labels.labeled();
    if count == 0 {
        return Err(Error::config("no labeled flows"));
    }
    let target = Arc::new(labels.one_hot_masked(c)?);
    let logp = tape.log_eps(probs, LOG_EPS);
    let picked = tape.mul_const(logp, target)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / count as f64))
}

pub fn total_loss(l_pred: f64, l_n: f64, l_g: f64, omega_n: f64, omega_g: f64) -> f64 {
    l_pred + omega_n * l_n + omega_g * l_g
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pred: f64,
    /// Absent when both contrast weights are zero and no views are drawn.
    pub l_n: Option<f64>,
    pub l_g: Option<f64>,
    pub total: f64,
}

/// Loss terms of one step as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub l_pred: Var,
    pub l_n: Option<Var>,
    pub l_g: Option<Var>,
    pub total: Var,
}

impl Objective {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_pred: tape.scalar(self.l_pred),
            l_n: self.l_n.map(|v| tape.scalar(v)),
            l_g: self.l_g.map(|v| tape.scalar(v)),
            total: tape.scalar(self.total),
        }
    }
}

/// Training flows with the hypergraph structure fixed from the initial
/// features.
#[derive(Clone, Debug)]
pub struct TrainGraph {
    pub views: ViewBatch,
    pub graph: FlowHypergraph,
    pub labels: LabelSet,
    ops: GraphOps,
    frozen_features: Option<Tensor>,
}

impl TrainGraph {
    pub fn build(model: &Model, views: ViewBatch, labels: LabelSet, freeze_extractor: bool) -> Result<TrainGraph> {
        if views.len() != labels.len() {
            return Err(Error::shape(format!("{} flows with {} labels", views.len(), labels.len())));
        }
        labels.validate(model.classes())?;
        if labels.labeled() == 0 {
            return Err(Error::config("no labeled flows"));
        }
        let graph = model.hypergraph(&views, Some(labels.y.clone()))?;
        let ops = GraphOps::new(&graph)?;
        let frozen_features = freeze_extractor.then(|| graph.node_features.clone());
        Ok(TrainGraph {
            views,
            graph,
            labels,
            ops,
            frozen_features,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_features.is_some()
    }
}

/// Builds the full training loss: flow features, the original graph's
/// prediction loss, and the contrast terms over `views` when given.
pub fn objective(
    tape: &mut Tape,
    store: &ParameterStore,
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainGraph,
    views: Option<&(AugmentedView, AugmentedView)>,
    rng: &mut Rng,
) -> Result<Objective> {
    let z = match &data.frozen_features {
        Some(z) => tape.constant(z.clone()),
        None => extract(tape, store, &model.extractor, &data.views, Mode::Train, rng)?.z_mv,
    };
    let original = encode(tape, store, &model.encoder, z, &data.ops, Mode::Train, rng)?;
    let probs = predict(tape, store, original.last_nodes())?;
    let l_pred = cross_entropy(tape, probs, &data.labels)?;
    let Some((a1, a2)) = views else {
        return Ok(Objective {
            l_pred,
            l_n: None,
            l_g: None,
            total: l_pred,
        });
    };
    let mut projected = Vec::with_capacity(2);
    for view in [a1, a2] {
        let zv = tape.scale_rows(z, Arc::new(view.feature_scale()))?;
        let ops = GraphOps::new(&view.graph)?;
        let enc = encode(tape, store, &model.encoder, zv, &ops, Mode::Train, rng)?;
        projected.push(project(tape, store, &enc)?);
    }
    let (v1, e1) = projected[0];
    let (v2, e2) = projected[1];
    let l_n = node_node_loss(tape, v1, v2, &cfg.contrast)?;
    let weighted = tape.scale(l_n, cfg.omega_n);
    let mut total = tape.add(l_pred, weighted)?;
    let l_g = match (e1, e2) {
        (Some(e1), Some(e2)) => {
            let l_g = group_group_loss(tape, e1, e2, &cfg.contrast)?;
            let weighted = tape.scale(l_g, cfg.omega_g);
            total = tape.add(total, weighted)?;
            Some(l_g)
        }
        _ => None,
    };
    Ok(Objective {
        l_pred,
        l_n: Some(l_n),
        l_g,
        total,
    })
}

fn is_extractor_param(name: &str) -> bool {
    EXTRACTOR_PREFIXES.iter().any(|p| name.starts_with(p))
}

fn non_finite(step: u64, losses: &LossBreakdown, store: &ParameterStore) -> Error {
    let norms: Vec<String> = store.value_norms().into_iter().map(|(n, v)| format!("{n}={v:.4e}")).collect();
    log::error!("non-finite loss at step {step}: {losses:?}; parameter norms: {}", norms.join(", "));
    Error::NonFinite(format!(
        "loss at step {step} ({losses:?}); parameter norms: {}",
        norms.join(", ")
    ))
}

/// One optimizer step on the full training hypergraph with fresh views.
pub fn train_step(
    model: &mut Model,
    data: &TrainGraph,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let mut aug_rng = rng.fork();
    let mut drop_rng = rng.fork();
    let views = if cfg.uses_contrast() {
        Some(make_views(&data.graph, &cfg.aug1, &cfg.aug2, &mut aug_rng)?)
    } else {
        None
    };
    let mut tape = Tape::new();
    let obj = objective(&mut tape, &model.params, &model.config, cfg, data, views.as_ref(), &mut drop_rng)?;
    let losses = obj.values(&tape);
    let finite = [Some(losses.l_pred), losses.l_n, losses.l_g, Some(losses.total)]
        .into_iter()
        .flatten()
        .all(f64::is_finite);
    if !finite {
        return Err(non_finite(adam.step_count() + 1, &losses, &model.params));
    }
    let grads = tape.backward(obj.total)?;
    model.params.zero_grads();
    tape.accumulate_param_grads(&grads, &mut model.params)?;
    let frozen = data.is_frozen();
    adam.step(&mut model.params, &cfg.adam(), &|name| frozen && is_extractor_param(name));
    project_alpha(&mut model.params)?;
    Ok(losses)
}

/// Flows in model input form with their labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub views: ViewBatch,
    pub labels: LabelSet,
}

impl Dataset {
    pub fn from_flows(flows: &[FlowRecord], n: usize, m: usize) -> Result<Dataset> {
        Ok(Dataset {
            views: ViewBatch::from_flows(flows, n, m)?,
            labels: LabelSet::from_flows(flows)?,
        })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Splits flows into train/validation/test parts by class, shuffling each
/// class with `rng` and cutting it at the cumulative `fractions`. Unlabeled
/// flows form their own group.
pub fn stratified_split(flows: &[FlowRecord], fractions: [f64; 3], rng: &mut Rng) -> Result<[Vec<FlowRecord>; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut groups: std::collections::BTreeMap<Option<usize>, Vec<usize>> = Default::default();
    for (i, f) in flows.iter().enumerate() {
        groups.entry(f.label).or_default().push(i);
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for idx in groups.values_mut() {
        rng.shuffle(idx);
        let len = idx.len() as f64;
        let a = (fractions[0] * len).round() as usize;
        let b = (((fractions[0] + fractions[1]) * len).round() as usize).max(a);
        parts[0].extend_from_slice(&idx[..a]);
        parts[1].extend_from_slice(&idx[a..b]);
        parts[2].extend_from_slice(&idx[b..]);
    }
    Ok(parts.map(|mut p| {
        p.sort_unstable();
        p.into_iter().map(|i| flows[i].clone()).collect()
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub val_macro_f1: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters of the selected epoch, rounded to f32.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_macro_f1: Option<f64>,
}

/// Macro-F1 and accuracy of `model` on the labeled flows of `data`, using a
/// hypergraph built from `data` alone.
pub fn validate_model(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    let probs = model.predict_views(&data.views)?;
    let pred = probs.argmax_rows();
    let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels.mask[i]).collect();
    let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
    let t: Vec<usize> = idx.iter().map(|&i| data.labels.y[i]).collect();
    let classes = model.classes().max(data.labels.num_classes());
    let report = evaluate(&p, &t, classes)?;
    Ok((report.macro_f1, report.accuracy))
}

/// Initializes a model for the classes present and trains it.
pub fn fit(train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    let classes = train
        .labels
        .num_classes()
        .max(val.map_or(0, |v| v.labels.num_classes()))
        .max(2);
    let mut rng = Rng::new(cfg.seed);
    let model = Model::init(cfg.model_config(classes), &mut rng.fork())?;
    fit_model(model, train, val, cfg, &mut rng)
}

/// Trains `model` for up to `cfg.epochs` full-graph steps, keeping the
/// parameters with the best validation macro-F1 (the last ones without a
/// validation set).
pub fn fit_model(mut model: Model, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig, rng: &mut Rng) -> Result<FitResult> {
    cfg.validate()?;
    if let Some(v) = val {
        if v.len() <= model.config.k {
            return Err(Error::config(format!(
                "validation set of {} flows is too small for K = {}",
                v.len(),
                model.config.k
            )));
        }
    }
    let data = TrainGraph::build(&model, train.views.clone(), train.labels.clone(), cfg.freeze_extractor)?;
    let mut adam = AdamState::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParameterStore)> = None;
    for epoch in 0..cfg.epochs {
        let losses = train_step(&mut model, &data, &mut adam, cfg, rng)?;
        let (val_macro_f1, val_accuracy) = match val {
            Some(v) => {
                let (f1, acc) = validate_model(&model, v)?;
                (Some(f1), Some(acc))
            }
            None => (None, None),
        };
        log::debug!("epoch {epoch}: {losses:?} val_macro_f1={val_macro_f1:?}");
        history.push(EpochRecord {
            epoch,
            losses,
            val_macro_f1,
            val_accuracy,
        });
        if let Some(f1) = val_macro_f1 {
            if best.as_ref().is_none_or(|(_, b, _)| f1 > *b) {
                best = Some((epoch, f1, model.params.clone()));
            }
            let since = epoch - best.as_ref().map_or(epoch, |b| b.0);
            if cfg.patience > 0 && since >= cfg.patience {
                log::info!("early stop at epoch {epoch}; best epoch {}", best.as_ref().unwrap().0);
                break;
            }
        }
    }
    let (best_epoch, best_val_macro_f1) = match best {
        Some((epoch, f1, params)) => {
            model.params = params;
            (epoch, Some(f1))
        }
        None => (history.len() - 1, None),
    };
    model.params.round_to_f32();
    Ok(FitResult {
        model,
        history,
        best_epoch,
        best_val_macro_f1,
    })
}
