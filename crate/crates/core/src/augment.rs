//! Stochastic hypergraph views: feature masking, weight perturbation and
//! membership dropping.

use std::fmt;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::hypergraph::FlowHypergraph;
use crate::tensor::Rng;

pub const DEFAULT_NOISE_MEAN: f64 = 1.0;
pub const DEFAULT_NOISE_STD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugStep {
    /// Zero each node's feature row with probability `p`.
    NodeFeatureMask { p: f64 },
    /// Replace each hyperedge weight with probability `p` by
    /// `max(0, Normal(noise_mean, noise_std²))`.
    EdgeWeightPerturb { p: f64, noise_mean: f64, noise_std: f64 },
    /// Drop each node–hyperedge membership with probability `p`.
    MembershipMask { p: f64 },
}

impl AugStep {
    fn validate(&self) -> Result<()> {
        let p = match *self {
            AugStep::NodeFeatureMask { p } | AugStep::MembershipMask { p } => p,
            AugStep::EdgeWeightPerturb { p, noise_mean, noise_std } => {
                if !(noise_std > 0.0) || !noise_mean.is_finite() || !noise_std.is_finite() {
                    return Err(Error::config("weight noise needs a finite mean and positive std"));
                }
                p
            }
        };
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("augmentation probability {p} outside [0, 1)")));
        }
        Ok(())
    }
}

impl fmt::Display for AugStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            AugStep::NodeFeatureMask { p } => write!(f, "nf:{p}"),
            AugStep::MembershipMask { p } => write!(f, "ed:{p}"),
            AugStep::EdgeWeightPerturb { p, noise_mean, noise_std }
                if noise_mean == DEFAULT_NOISE_MEAN && noise_std == DEFAULT_NOISE_STD =>
            {
                write!(f, "ew:{p}")
            }
            AugStep::EdgeWeightPerturb { p, noise_mean, noise_std } => write!(f, "ew:{p}:{noise_mean}:{noise_std}"),
        }
    }
}

/// Ordered list of augmentation steps; empty means the identity view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentationPipeline {
    pub steps: Vec<AugStep>,
}

impl AugmentationPipeline {
    pub fn identity() -> Self {
        AugmentationPipeline::default()
    }

    pub fn new(steps: Vec<AugStep>) -> Result<Self> {
        for s in &steps {
            s.validate()?;
        }
        Ok(AugmentationPipeline { steps })
    }

    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }

    /// Applies every step in order.
    pub fn apply(&self, graph: &FlowHypergraph, rng: &mut Rng) -> Result<AugmentedView> {
        let mut view = AugmentedView {
            graph: graph.clone(),
            feature_keep: vec![true; graph.num_nodes()],
        };
        for step in &self.steps {
            match *step {
                AugStep::NodeFeatureMask { p } => {
                    let (g, keep) = node_feature_mask_traced(&view.graph, p, rng)?;
                    view.graph = g;
                    for (k, now) in view.feature_keep.iter_mut().zip(keep) {
                        *k &= now;
                    }
                }
                AugStep::EdgeWeightPerturb { p, noise_mean, noise_std } => {
                    view.graph = hyperedge_weight_perturb(&view.graph, p, noise_mean, noise_std, rng)?;
                }
                AugStep::MembershipMask { p } => {
                    view.graph = membership_mask(&view.graph, p, rng)?;
                }
            }
        }
        Ok(view)
    }
}

impl FromStr for AugmentationPipeline {
    type Err = Error;

    /// Comma list of `nf:<p>`, `ew:<p>[:<mean>:<std>]`, `ed:<p>`; an empty
    /// string, `none` or `iden` is the identity.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") || s.eq_ignore_ascii_case("iden") {
            return Ok(AugmentationPipeline::identity());
        }
        let bad = |part: &str| Error::config(format!("bad augmentation step {part:?}; expected nf:<p>, ew:<p> or ed:<p>"));
        let mut steps = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            let fields: Vec<&str> = part.split(':').collect();
            let num = |i: usize| -> Result<f64> { fields.get(i).ok_or_else(|| bad(part))?.parse().map_err(|_| bad(part)) };
            let step = match (fields[0].to_ascii_lowercase().as_str(), fields.len()) {
                ("nf", 2) => AugStep::NodeFeatureMask { p: num(1)? },
                ("ed", 2) => AugStep::MembershipMask { p: num(1)? },
                ("ew", 2) => AugStep::EdgeWeightPerturb {
                    p: num(1)?,
                    noise_mean: DEFAULT_NOISE_MEAN,
                    noise_std: DEFAULT_NOISE_STD,
                },
                ("ew", 4) => AugStep::EdgeWeightPerturb {
                    p: num(1)?,
                    noise_mean: num(2)?,
                    noise_std: num(3)?,
                },
                _ => return Err(bad(part)),
            };
            steps.push(step);
        }
        AugmentationPipeline::new(steps)
    }
}

impl fmt::Display for AugmentationPipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.steps.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self.steps.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl Serialize for AugmentationPipeline {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AugmentationPipeline {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// An augmented copy of a hypergraph plus which nodes kept their features.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    pub graph: FlowHypergraph,
    pub feature_keep: Vec<bool>,
}

impl AugmentedView {
    /// Per-row multipliers (1 kept, 0 masked).
    pub fn feature_scale(&self) -> Vec<f64> {
        self.feature_keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("augmentation probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// Node feature masking that also reports which rows survived.
pub fn node_feature_mask_traced(graph: &FlowHypergraph, p: f64, rng: &mut Rng) -> Result<(FlowHypergraph, Vec<bool>)> {
    check_p(p)?;
    let mut out = graph.clone();
    let keep: Vec<bool> = (0..graph.num_nodes()).map(|_| !rng.bernoulli(p)).collect();
    for (i, &k) in keep.iter().enumerate() {
        if !k {
            out.node_features.row_mut(i).fill(0.0);
        }
    }
    Ok((out, keep))
}

pub fn node_feature_mask(graph: &FlowHypergraph, p: f64, rng: &mut Rng) -> Result<FlowHypergraph> {
    Ok(node_feature_mask_traced(graph, p, rng)?.0)
}

pub fn hyperedge_weight_perturb(graph: &FlowHypergraph, p: f64, noise_mean: f64, noise_std: f64, rng: &mut Rng) -> Result<FlowHypergraph> {
    AugStep::EdgeWeightPerturb { p, noise_mean, noise_std }.validate()?;
    let mut out = graph.clone();
    for w in out.edge_weights.iter_mut() {
        if rng.bernoulli(p) {
            *w = rng.normal(noise_mean, noise_std).max(0.0);
        }
    }
    out.recompute_degrees()?;
    Ok(out)
}

pub fn membership_mask(graph: &FlowHypergraph, p: f64, rng: &mut Rng) -> Result<FlowHypergraph> {
    check_p(p)?;
    let mut out = graph.clone();
    out.incidence.retain(|_, _| !rng.bernoulli(p));
    out.recompute_degrees()?;
    Ok(out)
}

/// Two views from independent random substreams; `graph` is untouched.
pub fn make_views(
    graph: &FlowHypergraph,
    t1: &AugmentationPipeline,
    t2: &AugmentationPipeline,
    rng: &mut Rng,
) -> Result<(AugmentedView, AugmentedView)> {
    let mut r1 = rng.fork();
    let mut r2 = rng.fork();
    Ok((t1.apply(graph, &mut r1)?, t2.apply(graph, &mut r2)?))
}
