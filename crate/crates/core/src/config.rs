//! Training configuration and its flat `key=value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gnncore::{Activation, FusionMode, GateMode};

/// How the training graph guards against label leakage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MgtMode {
    /// Per-epoch split into graph queries and trained queries.
    #[default]
    Mgt,
    /// Graph over all training queries with labeled positive edges removed.
    DropEdges,
    /// Graph over all training queries, nothing removed.
    None,
}

impl MgtMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MgtMode::Mgt => "mgt",
            MgtMode::DropEdges => "drop_edges",
            MgtMode::None => "none",
        }
    }
}

impl FromStr for MgtMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mgt" => Ok(MgtMode::Mgt),
            "drop_edges" => Ok(MgtMode::DropEdges),
            "none" => Ok(MgtMode::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown mgt mode {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Embedding width shared by every encoder and the GNN.
    pub dim: usize,
    /// Hash vocabulary size.
    pub vocab: usize,
    pub heads: usize,
    /// Passages retrieved per graph query.
    pub k: usize,
    /// Masked ratio.
    pub beta: f64,
    /// Joint-training epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_dual: f64,
    pub lr_gnn: f64,
    pub stage1_epochs: usize,
    pub lr_stage1: f64,
    pub ce_epochs: usize,
    pub lr_ce: f64,
    pub ce_negatives: usize,
    pub k_mine: usize,
    /// Percentile (0–100) of cross-encoder scores a hard negative must stay below.
    pub tau: f64,
    pub seed: u64,
    pub fusion: FusionMode,
    /// Mixing weight used when `fusion` is `constant_alpha`.
    pub alpha: f64,
    pub mgt: MgtMode,
    pub slope: f64,
    pub activation: Activation,
    pub tied: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            vocab: 4096,
            heads: 2,
            k: 25,
            beta: 0.05,
            epochs: 5,
            batch_size: 16,
            lr_dual: 0.002,
            lr_gnn: 0.05,
            stage1_epochs: 20,
            lr_stage1: 0.5,
            ce_epochs: 2,
            lr_ce: 0.05,
            ce_negatives: 4,
            k_mine: 20,
            tau: 50.0,
            seed: 42,
            fusion: FusionMode::default(),
            alpha: 0.2,
            mgt: MgtMode::Mgt,
            slope: 0.2,
            activation: Activation::Elu,
            tied: false,
        }
    }
}

const KEYS: &[&str] = &[
    "dim",
    "vocab",
    "heads",
    "k",
    "beta",
    "epochs",
    "batch_size",
    "lr_dual",
    "lr_gnn",
    "stage1_epochs",
    "lr_stage1",
    "ce_epochs",
    "lr_ce",
    "ce_negatives",
    "k_mine",
    "tau",
    "seed",
    "fusion",
    "alpha",
    "edge_features",
    "one_layer",
    "mgt",
    "slope",
    "activation",
    "tied",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value {value:?} for config key {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("vocab", self.vocab),
            ("heads", self.heads),
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("k_mine", self.k_mine),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.vocab < 2 {
            return Err(Error::InvalidArgument("vocab must be at least 2".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta must lie in (0,1), got {}",
                self.beta
            )));
        }
        for (name, v) in [
            ("lr_dual", self.lr_dual),
            ("lr_gnn", self.lr_gnn),
            ("lr_stage1", self.lr_stage1),
            ("lr_ce", self.lr_ce),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.k_mine < 2 {
            return Err(Error::InvalidArgument("k_mine must be at least 2".into()));
        }
        if !(0.0..=100.0).contains(&self.tau) {
            return Err(Error::InvalidArgument(format!(
                "tau must lie in [0,100], got {}",
                self.tau
            )));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "slope must lie in (0,1), got {}",
                self.slope
            )));
        }
        self.fusion.validate()
    }

    /// Canonical text: every key, fixed order, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let (fusion, alpha) = match self.fusion.gate {
            GateMode::Gate => ("gate", self.alpha),
            GateMode::ConstantAlpha(a) => ("constant_alpha", a),
            GateMode::Identity => ("identity", self.alpha),
        };
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("dim", self.dim.to_string());
        put("vocab", self.vocab.to_string());
        put("heads", self.heads.to_string());
        put("k", self.k.to_string());
        put("beta", self.beta.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr_dual", self.lr_dual.to_string());
        put("lr_gnn", self.lr_gnn.to_string());
        put("stage1_epochs", self.stage1_epochs.to_string());
        put("lr_stage1", self.lr_stage1.to_string());
        put("ce_epochs", self.ce_epochs.to_string());
        put("lr_ce", self.lr_ce.to_string());
        put("ce_negatives", self.ce_negatives.to_string());
        put("k_mine", self.k_mine.to_string());
        put("tau", self.tau.to_string());
        put("seed", self.seed.to_string());
        put("fusion", fusion.to_string());
        put("alpha", alpha.to_string());
        put("edge_features", self.fusion.edge_features.to_string());
        put("one_layer", self.fusion.one_layer.to_string());
        put("mgt", self.mgt.as_str().to_string());
        put("slope", self.slope.to_string());
        put(
            "activation",
            match self.activation {
                Activation::Elu => "elu",
                Activation::Identity => "identity",
            }
            .to_string(),
        );
        put("tied", self.tied.to_string());
        s
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "dim" => self.dim = parse(key, value)?,
            "vocab" => self.vocab = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr_dual" => self.lr_dual = parse(key, value)?,
            "lr_gnn" => self.lr_gnn = parse(key, value)?,
            "stage1_epochs" => self.stage1_epochs = parse(key, value)?,
            "lr_stage1" => self.lr_stage1 = parse(key, value)?,
            "ce_epochs" => self.ce_epochs = parse(key, value)?,
            "lr_ce" => self.lr_ce = parse(key, value)?,
            "ce_negatives" => self.ce_negatives = parse(key, value)?,
            "k_mine" => self.k_mine = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "fusion" => {
                let alpha = self.alpha;
                self.fusion.gate = match value {
                    "gate" => GateMode::Gate,
                    "identity" => GateMode::Identity,
                    "constant_alpha" => GateMode::ConstantAlpha(alpha),
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown fusion mode {other:?}"
                        )))
                    }
                };
            }
            "alpha" => {
                let a: f64 = parse(key, value)?;
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::InvalidArgument(format!(
                        "alpha must lie in [0,1], got {a}"
                    )));
                }
                self.alpha = a;
                if let GateMode::ConstantAlpha(_) = self.fusion.gate {
                    self.fusion.gate = GateMode::ConstantAlpha(a);
                }
            }
            "edge_features" => self.fusion.edge_features = parse(key, value)?,
            "one_layer" => self.fusion.one_layer = parse(key, value)?,
            "mgt" => self.mgt = value.parse()?,
            "slope" => self.slope = parse(key, value)?,
            "activation" => {
                self.activation = match value {
                    "elu" => Activation::Elu,
                    "identity" => Activation::Identity,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown activation {other:?}"
                        )))
                    }
                }
            }
            "tied" => self.tied = parse(key, value)?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::data("config", i + 1, format!("expected key=value, got {line:?}"))
            })?;
            self.set(k, v)
                .map_err(|e| Error::data("config", i + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }
}
